use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{IdMap, Interaction, InteractionLog, DAY};
use crate::error::{Error, Result};

pub const DEFAULT_WINDOW_OPTIONS: [u32; 3] = [14, 30, 60];

/// Global temporal split. Train and test share the train log's ID maps.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitResult {
    pub train: InteractionLog,
    pub test: InteractionLog,
    pub boundary: i64,
    pub window_days: u32,
}

/// Leave-one-out validation fold carved out of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationFold {
    /// One record per user with at least two training interactions: that
    /// user's latest interaction. Sorted by user.
    pub holdout: Vec<Interaction>,
    /// Training log minus the holdout records; same ID maps as the input.
    pub reduced_train: InteractionLog,
}

/// Share of interactions falling in the trailing `days` window.
pub fn window_share(log: &InteractionLog, days: u32) -> f64 {
    let Some(max) = log.max_ts() else {
        return 0.0;
    };
    let boundary = max - days as i64 * DAY;
    let tail = log.records.iter().filter(|r| r.ts >= boundary).count();
    tail as f64 / log.len() as f64
}

/// Window whose raw tail share is closest to `target_fraction`; ties go to
/// the smaller window.
pub fn select_window(log: &InteractionLog, options: &[u32], target_fraction: f64) -> u32 {
    let mut sorted = options.to_vec();
    sorted.sort_unstable();
    let mut best = sorted[0];
    let mut best_gap = f64::INFINITY;
    for &w in &sorted {
        let gap = (window_share(log, w) - target_fraction).abs();
        if gap < best_gap {
            best = w;
            best_gap = gap;
        }
    }
    best
}

/// Everything at or after `max_ts − window` is test, everything before is
/// train; test records of users or items missing from train are dropped.
pub fn temporal_split(log: &InteractionLog, window_days: u32) -> Result<SplitResult> {
    let (min, max) = match (log.min_ts(), log.max_ts()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Split("empty log".into())),
    };
    let window = window_days as i64 * DAY;
    if window >= max - min {
        return Err(Error::Split(format!(
            "window of {window_days} days is not shorter than the log's time span"
        )));
    }
    let boundary = max - window;
    let train = log.retain_remapped(|r| r.ts < boundary);
    if train.is_empty() {
        return Err(Error::Split("empty train set".into()));
    }
    let records: Vec<Interaction> = log
        .records
        .iter()
        .filter(|r| r.ts >= boundary)
        .filter_map(|r| {
            let user = train.users.internal(log.users.external(r.user)?)?;
            let item = train.items.internal(log.items.external(r.item)?)?;
            Some(Interaction { user, item, ts: r.ts })
        })
        .collect();
    if records.is_empty() {
        return Err(Error::Split("empty test set after filtering".into()));
    }
    let test = InteractionLog {
        records,
        users: train.users.clone(),
        items: train.items.clone(),
    };
    Ok(SplitResult {
        train,
        test,
        boundary,
        window_days,
    })
}

/// Holds out each user's chronologically last training interaction (the
/// last one in input order among equal timestamps). Users with a single
/// interaction keep it in training and get no holdout.
pub fn loo_validation(train: &InteractionLog) -> ValidationFold {
    let mut last: Vec<Option<usize>> = vec![None; train.n_users()];
    let mut counts = vec![0usize; train.n_users()];
    for (idx, r) in train.records.iter().enumerate() {
        let u = r.user as usize;
        counts[u] += 1;
        match last[u] {
            Some(j) if train.records[j].ts > r.ts => {}
            _ => last[u] = Some(idx),
        }
    }
    let mut held = vec![false; train.records.len()];
    let mut holdout = Vec::new();
    for (u, slot) in last.iter().enumerate() {
        if let (Some(idx), true) = (slot, counts[u] >= 2) {
            held[*idx] = true;
            holdout.push(train.records[*idx]);
        }
    }
    let records = train
        .records
        .iter()
        .zip(&held)
        .filter(|(_, h)| !**h)
        .map(|(r, _)| *r)
        .collect();
    ValidationFold {
        holdout,
        reduced_train: InteractionLog {
            records,
            users: train.users.clone(),
            items: train.items.clone(),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub raw_interactions: usize,
    pub filtered_interactions: usize,
    pub train_interactions: usize,
    pub test_interactions: usize,
    pub train_users: usize,
    pub train_items: usize,
    pub test_users: usize,
    pub test_items: usize,
    pub validation_users: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub boundary: i64,
    pub window_days: u32,
    pub counts: SplitCounts,
    /// Digest of the filtered input log.
    pub data_digest: String,
}

impl SplitManifest {
    pub fn new(raw: &InteractionLog, filtered: &InteractionLog, split: &SplitResult, fold: &ValidationFold) -> Self {
        let distinct = |log: &InteractionLog, f: fn(&Interaction) -> u32| {
            let mut v: Vec<u32> = log.records.iter().map(f).collect();
            v.sort_unstable();
            v.dedup();
            v.len()
        };
        Self {
            boundary: split.boundary,
            window_days: split.window_days,
            counts: SplitCounts {
                raw_interactions: raw.len(),
                filtered_interactions: filtered.len(),
                train_interactions: split.train.len(),
                test_interactions: split.test.len(),
                train_users: split.train.n_users(),
                train_items: split.train.n_items(),
                test_users: distinct(&split.test, |r| r.user),
                test_items: distinct(&split.test, |r| r.item),
                validation_users: fold.holdout.len(),
            },
            data_digest: filtered.digest(),
        }
    }

    /// Stable hash identifying this split.
    pub fn hash(&self) -> String {
        crate::config::json_hash(&serde_json::to_value(self).expect("serializable"))
    }
}

fn write_records(path: &Path, records: &[Interaction]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["user", "item", "timestamp"])?;
    for r in records {
        w.serialize((r.user, r.item, r.ts))?;
    }
    w.flush()?;
    Ok(())
}

fn write_map(path: &Path, map: &IdMap) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["internal_id", "external_id"])?;
    for (i, e) in map.externals().iter().enumerate() {
        w.write_record([i.to_string().as_str(), e.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `manifest.json`, `train.csv`, `test.csv`, `validation.csv` and
/// the `users.csv` / `items.csv` ID maps into `dir`.
pub fn write_prepared(dir: &Path, split: &SplitResult, fold: &ValidationFold, manifest: &SplitManifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(manifest)?)?;
    write_records(&dir.join("train.csv"), &split.train.records)?;
    write_records(&dir.join("test.csv"), &split.test.records)?;
    write_records(&dir.join("validation.csv"), &fold.holdout)?;
    write_map(&dir.join("users.csv"), &split.train.users)?;
    write_map(&dir.join("items.csv"), &split.train.items)?;
    Ok(())
}

fn read_records(path: &Path) -> Result<Vec<Interaction>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<(u32, u32, i64)>()
        .map(|row| {
            let (user, item, ts) = row?;
            Ok(Interaction { user, item, ts })
        })
        .collect()
}

fn read_map(path: &Path) -> Result<IdMap> {
    let mut r = csv::Reader::from_path(path)?;
    let mut map = IdMap::new();
    let mut seen: HashMap<u32, ()> = HashMap::new();
    for row in r.deserialize::<(u32, String)>() {
        let (id, ext) = row?;
        if map.get_or_insert(&ext) != id || seen.insert(id, ()).is_some() {
            return Err(Error::Split(format!("{} is not a contiguous ID map", path.display())));
        }
    }
    Ok(map)
}

/// Loads a directory written by [`write_prepared`]; the validation fold is
/// recomputed from the training log.
pub fn read_prepared(dir: &Path) -> Result<(SplitResult, ValidationFold, SplitManifest)> {
    let manifest: SplitManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    let users = read_map(&dir.join("users.csv"))?;
    let items = read_map(&dir.join("items.csv"))?;
    let check = |recs: &[Interaction]| {
        recs.iter()
            .all(|r| (r.user as usize) < users.len() && (r.item as usize) < items.len())
    };
    let train_records = read_records(&dir.join("train.csv"))?;
    let test_records = read_records(&dir.join("test.csv"))?;
    if !check(&train_records) || !check(&test_records) {
        return Err(Error::Split(format!("{}: record ID outside map", dir.display())));
    }
    let train = InteractionLog {
        records: train_records,
        users: users.clone(),
        items: items.clone(),
    };
    let test = InteractionLog {
        records: test_records,
        users,
        items,
    };
    let fold = loo_validation(&train);
    Ok((
        SplitResult {
            train,
            test,
            boundary: manifest.boundary,
            window_days: manifest.window_days,
        },
        fold,
        manifest,
    ))
}
