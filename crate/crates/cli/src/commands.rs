use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use seqrec_core::config::{set_dotted, EvalConfig, ExperimentConfig, RunManifest};
use seqrec_core::data::{read_prepared, write_prepared, MarkovConfig};
use seqrec_core::evaluation::{write_recs_csv, EvalReport, Metrics, ModelEntry};
use seqrec_core::model::ModelParams;
use seqrec_core::pipeline::{self, Prepared};
use seqrec_core::Error;
use serde_json::json;

use crate::table::render;
use crate::{CliError, Common};

type Result<T> = std::result::Result<T, CliError>;

pub const DATA_DIR_ENV: &str = "SEQREC_DATA_DIR";

fn short(hash: &str) -> &str {
    &hash[..12]
}

fn load_config(c: &Common) -> Result<(ExperimentConfig, Option<PathBuf>)> {
    let mut table = match &c.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    if let Some(seed) = c.seed {
        let seed = i64::try_from(seed).map_err(|_| Error::Config("seed must fit in i64".into()))?;
        set_dotted(&mut table, "train.seed", toml::Value::Integer(seed))?;
    }
    if let Some(k) = c.k {
        set_dotted(&mut table, "eval.k", toml::Value::Array(vec![toml::Value::Integer(k as i64)]))?;
    }
    let cfg = ExperimentConfig::from_table(&table, c.preset.as_deref())?;
    let root = std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .or_else(|| c.config.as_ref().and_then(|p| p.parent().map(Path::to_path_buf)));
    Ok((cfg, root))
}

fn prepared_dir(out: &Path, cfg: &ExperimentConfig) -> PathBuf {
    out.join(format!("prepared-{}", short(&cfg.data_hash())))
}

/// Prepares the split from the raw data and stores it under `out`.
fn prepare_split(cfg: &ExperimentConfig, root: Option<&Path>, out: &Path) -> Result<(Prepared, PathBuf)> {
    let raw = pipeline::load_raw(cfg, root)?;
    let prepared = pipeline::prepare(&raw, &cfg.split)?;
    let dir = prepared_dir(out, cfg);
    write_prepared(&dir, &prepared.split, &prepared.fold, &prepared.manifest)?;
    Ok((prepared, dir))
}

fn load_prepared(dir: &Path) -> Result<Prepared> {
    let (split, fold, manifest) = read_prepared(dir)?;
    Ok(Prepared { split, fold, manifest })
}

pub fn prepare(c: &Common) -> Result<()> {
    let (cfg, root) = load_config(c)?;
    let (prepared, dir) = prepare_split(&cfg, root.as_deref(), &c.out)?;
    println!("split {} -> {}", short(&prepared.hash()), dir.display());
    println!("{}", serde_json::to_string_pretty(&prepared.manifest.counts)?);
    Ok(())
}

fn popular_name(eval: &EvalConfig) -> String {
    format!("Popular-{}d", eval.popular_window_days)
}

/// One report per cutoff in `eval.k`.
fn reports(
    split_hash: &str,
    eval: &EvalConfig,
    models: &[(String, Option<String>, Vec<Metrics>)],
) -> Result<Vec<EvalReport>> {
    (0..eval.k.len())
        .map(|i| {
            let entries = models
                .iter()
                .map(|(name, hash, metrics)| ModelEntry {
                    name: name.clone(),
                    config_hash: hash.clone(),
                    metrics: metrics[i].clone(),
                    pareto: false,
                })
                .collect();
            Ok(sorted(EvalReport::new(split_hash.to_string(), entries)?))
        })
        .collect()
}

fn sorted(mut report: EvalReport) -> EvalReport {
    report
        .models
        .sort_by(|a, b| b.metrics.ndcg.total_cmp(&a.metrics.ndcg).then_with(|| a.name.cmp(&b.name)));
    report
}

fn write_report(out: &Path, stem: &str, report: &EvalReport) -> Result<String> {
    fs::create_dir_all(out)?;
    let text = render(report);
    fs::write(out.join(format!("{stem}.json")), serde_json::to_string_pretty(report)?)?;
    fs::write(out.join(format!("{stem}.txt")), &text)?;
    Ok(text)
}

fn relative(from: &Path, to: &Path) -> String {
    match (from.parent(), to.file_name()) {
        (Some(parent), Some(name)) if to.parent() == Some(parent) => format!("../{}", name.to_string_lossy()),
        _ => to.display().to_string(),
    }
}

/// Trains, evaluates and writes every artifact of one run. The manifest is
/// written last; a run without a complete manifest is treated as missing.
fn run_one(cfg: &ExperimentConfig, prepared: &Prepared, split_dir: &Path, out: &Path) -> Result<(PathBuf, RunManifest)> {
    let hash = cfg.hash();
    let dir = out.join(format!("run-{}", short(&hash)));
    fs::create_dir_all(&dir)?;
    let _ = fs::remove_file(dir.join("manifest.json"));
    let mut manifest = RunManifest {
        name: cfg.display_name(),
        config_hash: hash.clone(),
        split_hash: prepared.hash(),
        data_digest: prepared.manifest.data_digest.clone(),
        seed: cfg.train.seed,
        artifacts: BTreeMap::new(),
        timings: BTreeMap::new(),
        best_epoch: None,
        best_val_loss: None,
        stopped_early: false,
        complete: false,
    };
    manifest.artifacts.insert("split".into(), relative(&dir, split_dir));
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    manifest.artifacts.insert("config".into(), "config.json".into());

    let history_path = dir.join("history.jsonl");
    let mut history = String::new();
    manifest.artifacts.insert("history".into(), "history.jsonl".into());
    let model_path = dir.join("model.bin");
    log::info!("training {} ({})", manifest.name, short(&hash));
    let started = Instant::now();
    let trained = pipeline::train_on(prepared, cfg, Some(&model_path), |r| {
        history.push_str(&serde_json::to_string(r).expect("serializable"));
        history.push('\n');
        let _ = fs::write(&history_path, &history);
    });
    fs::write(&history_path, &history)?;
    let outcome = match trained {
        Ok(o) => o,
        Err(e) => {
            if let Error::NonFiniteLoss { epoch, step, batch_seed } = &e {
                let path = dir.join("diagnostics.json");
                let diag = json!({ "error": e.to_string(), "epoch": epoch, "step": step, "batch_seed": batch_seed });
                fs::write(&path, serde_json::to_string_pretty(&diag)?)?;
                manifest.artifacts.insert("diagnostics".into(), "diagnostics.json".into());
                fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
                log::error!("diagnostics written to {}", path.display());
            }
            return Err(e.into());
        }
    };
    manifest.timings.insert("train_seconds".into(), started.elapsed().as_secs_f64());
    outcome
        .params
        .save(&model_path, json!({ "config_hash": hash, "split_hash": manifest.split_hash }))?;
    manifest.artifacts.insert("model".into(), "model.bin".into());
    manifest.best_epoch = outcome.best_epoch;
    manifest.best_val_loss = outcome.best_val_loss;
    manifest.stopped_early = outcome.stopped_early;
    if outcome.fallback_draws > 0 {
        log::warn!("{} in-batch draws fell back to uniform negatives", outcome.fallback_draws);
    }

    let started = Instant::now();
    let (lists, metrics) = pipeline::evaluate_model(&outcome.params, prepared, &cfg.eval)?;
    let mut models = vec![(manifest.name.clone(), Some(hash.clone()), metrics)];
    if cfg.eval.include_popular {
        let (_, pop) = pipeline::evaluate_popular(prepared, &cfg.eval)?;
        models.push((popular_name(&cfg.eval), None, pop));
    }
    let reports = reports(&manifest.split_hash, &cfg.eval, &models)?;
    fs::write(dir.join("eval.json"), serde_json::to_string_pretty(&reports)?)?;
    manifest.artifacts.insert("eval".into(), "eval.json".into());
    write_recs_csv(&dir.join("recs.csv"), &lists, &prepared.split.train)?;
    manifest.artifacts.insert("recs".into(), "recs.csv".into());
    manifest.timings.insert("evaluate_seconds".into(), started.elapsed().as_secs_f64());

    manifest.complete = true;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok((dir, manifest))
}

pub fn train(c: &Common) -> Result<()> {
    let (cfg, root) = load_config(c)?;
    let (prepared, split_dir) = prepare_split(&cfg, root.as_deref(), &c.out)?;
    let (dir, _) = run_one(&cfg, &prepared, &split_dir, &c.out)?;
    let reports: Vec<EvalReport> = serde_json::from_slice(&fs::read(dir.join("eval.json"))?)?;
    for r in &reports {
        print!("{}", render(r));
    }
    println!("run -> {}", dir.display());
    Ok(())
}

fn read_manifest(run: &Path) -> Result<RunManifest> {
    let path = run.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::Contract(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn read_run_config(run: &Path) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = serde_json::from_slice(&fs::read(run.join("config.json"))?)
        .map_err(|e| Error::Config(format!("{}: {e}", run.join("config.json").display())))?;
    Ok(cfg)
}

pub fn evaluate(c: &Common, runs: &[PathBuf]) -> Result<()> {
    let first = read_manifest(&runs[0])?;
    let (prepared, eval) = if c.config.is_some() || c.preset.is_some() {
        let (cfg, root) = load_config(c)?;
        (prepare_split(&cfg, root.as_deref(), &c.out)?.0, cfg.eval)
    } else {
        let split = first
            .artifacts
            .get("split")
            .ok_or_else(|| Error::Contract("run manifest lists no split".into()))?;
        let mut eval = read_run_config(&runs[0])?.eval;
        if let Some(k) = c.k {
            eval.k = vec![k];
        }
        (load_prepared(&runs[0].join(split))?, eval)
    };
    let split_hash = prepared.hash();
    let mut models = Vec::new();
    for run in runs {
        let manifest = read_manifest(run)?;
        if !manifest.complete {
            return Err(Error::Contract(format!("{} is not a complete run", run.display())).into());
        }
        if manifest.split_hash != split_hash {
            return Err(CliError::SplitMismatch(format!(
                "{} was trained on split {} but the evaluation split is {}",
                run.display(),
                short(&manifest.split_hash),
                short(&split_hash)
            )));
        }
        let (params, extra) = ModelParams::<f32>::load(&run.join("model.bin"))?;
        if extra.get("config_hash").and_then(|v| v.as_str()) != Some(manifest.config_hash.as_str()) {
            return Err(Error::Contract(format!("{}: checkpoint does not match its manifest", run.display())).into());
        }
        let (_, metrics) = pipeline::evaluate_model(&params, &prepared, &eval)?;
        models.push((manifest.name, Some(manifest.config_hash), metrics));
    }
    if eval.include_popular {
        let (_, pop) = pipeline::evaluate_popular(&prepared, &eval)?;
        models.push((popular_name(&eval), None, pop));
    }
    let reports = reports(&split_hash, &eval, &models)?;
    fs::create_dir_all(&c.out)?;
    fs::write(c.out.join("evaluate.json"), serde_json::to_string_pretty(&reports)?)?;
    let text: String = reports.iter().map(render).collect();
    fs::write(c.out.join("evaluate.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn axis_label(combo: &[(String, toml::Value)]) -> String {
    let parts: Vec<String> = combo.iter().map(|(k, v)| format!("{k}={v}")).collect();
    parts.join(",")
}

pub fn grid(c: &Common) -> Result<()> {
    let (cfg, root) = load_config(c)?;
    let runs = cfg.expand_grid()?;
    let mut splits: HashMap<String, (Prepared, PathBuf)> = HashMap::new();
    let mut done = Vec::new();
    for (combo, mut run_cfg) in runs {
        run_cfg.name = Some(format!("{}[{}]", cfg.display_name(), axis_label(&combo)));
        let data_hash = run_cfg.data_hash();
        if !splits.contains_key(&data_hash) {
            let p = prepare_split(&run_cfg, root.as_deref(), &c.out)?;
            splits.insert(data_hash.clone(), p);
        }
        let (prepared, split_dir) = &splits[&data_hash];
        let dir = c.out.join(format!("run-{}", short(&run_cfg.hash())));
        let existing = read_manifest(&dir).ok().filter(|m| {
            m.complete && m.config_hash == run_cfg.hash() && m.split_hash == prepared.hash() && m.name == run_cfg.display_name()
        });
        if existing.is_some() {
            println!("skip {} (complete in {})", run_cfg.display_name(), dir.display());
        } else {
            run_one(&run_cfg, prepared, split_dir, &c.out)?;
            println!("done {}", run_cfg.display_name());
        }
        done.push(dir);
    }
    let report = collect(&done)?;
    print!("{}", write_report(&c.out, "grid", &report)?);
    Ok(())
}

/// Combines the first-cutoff entries of completed runs into one report.
fn collect(runs: &[PathBuf]) -> Result<EvalReport> {
    let mut split_hash: Option<String> = None;
    let mut entries = Vec::new();
    let mut popular: Option<ModelEntry> = None;
    for run in runs {
        let manifest = read_manifest(run)?;
        if !manifest.complete {
            continue;
        }
        match &split_hash {
            Some(h) if *h != manifest.split_hash => {
                return Err(CliError::SplitMismatch(format!(
                    "{} uses split {} but earlier runs use {}",
                    run.display(),
                    short(&manifest.split_hash),
                    short(h)
                )))
            }
            _ => split_hash = Some(manifest.split_hash.clone()),
        }
        let reports: Vec<EvalReport> = serde_json::from_slice(&fs::read(run.join("eval.json"))?)?;
        let first = reports
            .into_iter()
            .next()
            .ok_or_else(|| Error::Contract(format!("{}: empty eval.json", run.display())))?;
        for m in first.models {
            if m.config_hash.as_deref() == Some(manifest.config_hash.as_str()) {
                entries.push(m);
            } else if m.config_hash.is_none() && popular.is_none() {
                popular = Some(m);
            }
        }
    }
    let split_hash = split_hash.ok_or_else(|| Error::Contract("no completed runs found".into()))?;
    entries.extend(popular);
    Ok(sorted(EvalReport::new(split_hash, entries)?))
}

pub fn report(out: &Path) -> Result<()> {
    let mut runs: Vec<PathBuf> = fs::read_dir(out)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("run-"))
        })
        .collect();
    runs.sort();
    let report = collect(&runs)?;
    print!("{}", write_report(out, "report", &report)?);
    Ok(())
}

pub fn synth(output: &Path, users: usize, items: usize, seed: u64) -> Result<()> {
    let log = MarkovConfig {
        n_users: users,
        n_items: items,
        seed,
        ..MarkovConfig::default()
    }
    .generate()?;
    if let Some(parent) = output.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(output)?;
    w.write_record(["user_id", "item_id", "timestamp"])?;
    for (u, i, ts) in log.to_external() {
        w.write_record([u, i, ts.to_string()])?;
    }
    w.flush()?;
    println!("{} interactions -> {}", log.len(), output.display());
    Ok(())
}
