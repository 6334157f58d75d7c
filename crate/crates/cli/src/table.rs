use seqrec_core::evaluation::EvalReport;

/// Fixed-width text rendering of a report. Numbers carry six decimals so
/// the table round-trips the JSON values to 1e-6.
pub fn render(report: &EvalReport) -> String {
    let k = report.models.first().map_or(0, |m| m.metrics.k);
    let width = report.models.iter().map(|m| m.name.len()).max().unwrap_or(5).max(5);
    let mut out = format!(
        "split {}  K={k}\n{:<width$}  {:>9}  {:>9}  {:>9}  {:>6}  config\n",
        &report.split_hash[..12.min(report.split_hash.len())],
        "model",
        format!("NDCG@{k}"),
        format!("Recall@{k}"),
        format!("Cov@{k}"),
        "Pareto",
    );
    for m in &report.models {
        out.push_str(&format!(
            "{:<width$}  {:>9.6}  {:>9.6}  {:>9.6}  {:>6}  {}\n",
            m.name,
            m.metrics.ndcg,
            m.metrics.recall,
            m.metrics.coverage,
            if m.pareto { "*" } else { "-" },
            m.config_hash.as_deref().map_or("-", |h| &h[..12.min(h.len())]),
        ));
    }
    out
}
