//! End-to-end steps shared by the command line and the test suites:
//! load → prepare → train → evaluate.

use std::path::Path;

use crate::config::{EvalConfig, ExperimentConfig, SplitConfig};
use crate::data::{
    core_filter, ingest, loo_validation, select_window, temporal_split, InteractionLog, SplitManifest, SplitResult,
    ValidationFold,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_lists, popular_baseline, recommend, relevant_sets, Metrics, RecList};
use crate::model::ModelParams;
use crate::trainer::{train, EpochRecord, TrainOutcome, TrainingData};

/// A prepared split with its validation fold.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub split: SplitResult,
    pub fold: ValidationFold,
    pub manifest: SplitManifest,
}

impl Prepared {
    pub fn hash(&self) -> String {
        self.manifest.hash()
    }

    pub fn n_items(&self) -> usize {
        self.split.train.n_items()
    }

    /// Users with at least one test interaction, ascending.
    pub fn test_users(&self) -> Vec<u32> {
        let mut users: Vec<u32> = self.split.test.records.iter().map(|r| r.user).collect();
        users.sort_unstable();
        users.dedup();
        users
    }
}

/// Reads the configured dataset, or generates it when `dataset.synthetic`
/// is set.
pub fn load_raw(cfg: &ExperimentConfig, data_root: Option<&Path>) -> Result<InteractionLog> {
    match (&cfg.dataset.synthetic, cfg.dataset_path(data_root)) {
        (Some(syn), None) => syn.generate(),
        (None, Some(path)) => ingest(&path, &cfg.dataset.format),
        (Some(_), Some(_)) => Err(Error::Config("dataset: set either path or synthetic, not both".into())),
        (None, None) => Err(Error::Config("dataset: no path or synthetic generator configured".into())),
    }
}

pub fn prepare(raw: &InteractionLog, cfg: &SplitConfig) -> Result<Prepared> {
    let window = cfg
        .window_days
        .unwrap_or_else(|| select_window(raw, &cfg.window_options, cfg.target_fraction));
    let filtered = core_filter(raw, cfg.user_core, cfg.item_core)?;
    let split = temporal_split(&filtered, window)?;
    let fold = loo_validation(&split.train);
    if fold.holdout.is_empty() {
        return Err(Error::Split("no user has two training interactions; validation fold is empty".into()));
    }
    let manifest = SplitManifest::new(raw, &filtered, &split, &fold);
    log::info!(
        "prepared split: window {window} days, {} train / {} test interactions, {} items",
        split.train.len(),
        split.test.len(),
        split.train.n_items()
    );
    Ok(Prepared { split, fold, manifest })
}

pub fn train_on(
    prepared: &Prepared,
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let data = TrainingData::new(&prepared.fold.reduced_train, &prepared.fold.holdout);
    train(&data, &cfg.recipe(), checkpoint, on_epoch)
}

/// Metrics per configured cutoff from lists computed once at the largest.
fn metrics_per_k(prepared: &Prepared, lists: &[RecList], eval: &EvalConfig) -> Vec<Metrics> {
    let relevant = relevant_sets(&prepared.split.test);
    eval.k
        .iter()
        .map(|&k| {
            let cut: Vec<RecList> = lists
                .iter()
                .map(|l| {
                    let n = l.items.len().min(k);
                    RecList {
                        user: l.user,
                        items: l.items[..n].to_vec(),
                        scores: l.scores[..n].to_vec(),
                        short: n < k,
                    }
                })
                .collect();
            evaluate_lists(&cut, &relevant, k, prepared.n_items(), eval.recall_capped)
        })
        .collect()
}

fn max_k(eval: &EvalConfig) -> Result<usize> {
    eval.k
        .iter()
        .copied()
        .max()
        .filter(|&k| k > 0)
        .ok_or_else(|| Error::Config("eval.k needs positive cutoffs".into()))
}

/// Recommendations for every test user from the full training history,
/// with metrics at each cutoff in `eval.k`.
pub fn evaluate_model(
    params: &ModelParams<f32>,
    prepared: &Prepared,
    eval: &EvalConfig,
) -> Result<(Vec<RecList>, Vec<Metrics>)> {
    if params.vocab().n_items != prepared.n_items() {
        return Err(Error::Contract(format!(
            "model has {} items but the split has {}",
            params.vocab().n_items,
            prepared.n_items()
        )));
    }
    let sequences = prepared.split.train.user_sequences();
    let lists = recommend(params, &sequences, &prepared.test_users(), max_k(eval)?, eval.batch_size)?;
    let metrics = metrics_per_k(prepared, &lists, eval);
    Ok((lists, metrics))
}

/// The recent-popularity baseline evaluated like a model.
pub fn evaluate_popular(prepared: &Prepared, eval: &EvalConfig) -> Result<(Vec<RecList>, Vec<Metrics>)> {
    let sequences = prepared.split.train.user_sequences();
    let lists = popular_baseline(
        &prepared.split.train,
        &sequences,
        &prepared.test_users(),
        eval.popular_window_days,
        max_k(eval)?,
    );
    let metrics = metrics_per_k(prepared, &lists, eval);
    Ok((lists, metrics))
}
