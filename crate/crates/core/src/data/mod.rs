//! Interaction logs: ingestion, ID mapping, k-core filtering, temporal
//! train/test splitting and leave-one-out validation folds.

mod filter;
mod split;
mod synthetic;

use std::collections::HashMap;
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

pub use filter::core_filter;
pub use synthetic::MarkovConfig;
pub use split::{
    loo_validation, read_prepared, select_window, temporal_split, window_share, write_prepared,
    SplitCounts, SplitManifest, SplitResult, ValidationFold, DEFAULT_WINDOW_OPTIONS,
};

use crate::error::{Error, Result};

/// Seconds per day; no calendar or timezone logic is applied.
pub const DAY: i64 = 86_400;

/// One positive event with internal IDs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    pub ts: i64,
}

/// Bijection between external string IDs and contiguous internal IDs
/// assigned in first-appearance order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdMap {
    external: Vec<String>,
    index: HashMap<String, u32>,
}

impl IdMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_insert(&mut self, key: &str) -> u32 {
        if let Some(&id) = self.index.get(key) {
            return id;
        }
        let id = self.external.len() as u32;
        self.external.push(key.to_owned());
        self.index.insert(key.to_owned(), id);
        id
    }

    pub fn internal(&self, key: &str) -> Option<u32> {
        self.index.get(key).copied()
    }

    pub fn external(&self, id: u32) -> Option<&str> {
        self.external.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.external.len()
    }

    pub fn is_empty(&self) -> bool {
        self.external.is_empty()
    }

    pub fn externals(&self) -> &[String] {
        &self.external
    }
}

/// Timestamped `(user, item)` events plus their ID maps.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionLog {
    pub records: Vec<Interaction>,
    pub users: IdMap,
    pub items: IdMap,
}

impl InteractionLog {
    /// Builds a log from external-ID triples, assigning IDs in order of
    /// first appearance.
    pub fn from_external<'a, I>(rows: I) -> Self
    where
        I: IntoIterator<Item = (&'a str, &'a str, i64)>,
    {
        let mut users = IdMap::new();
        let mut items = IdMap::new();
        let records = rows
            .into_iter()
            .map(|(u, i, ts)| Interaction {
                user: users.get_or_insert(u),
                item: items.get_or_insert(i),
                ts,
            })
            .collect();
        Self {
            records,
            users,
            items,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    /// Records translated back to external IDs.
    pub fn to_external(&self) -> Vec<(String, String, i64)> {
        self.records
            .iter()
            .map(|r| {
                (
                    self.users.external(r.user).expect("mapped user").to_owned(),
                    self.items.external(r.item).expect("mapped item").to_owned(),
                    r.ts,
                )
            })
            .collect()
    }

    /// Keeps the records selected by `keep` and rebuilds both maps
    /// contiguously in first-appearance order.
    pub fn retain_remapped(&self, mut keep: impl FnMut(&Interaction) -> bool) -> Self {
        let ext = |map: &IdMap, id: u32| map.external(id).expect("mapped").to_owned();
        let mut users = IdMap::new();
        let mut items = IdMap::new();
        let records = self
            .records
            .iter()
            .filter(|r| keep(r))
            .map(|r| Interaction {
                user: users.get_or_insert(&ext(&self.users, r.user)),
                item: items.get_or_insert(&ext(&self.items, r.item)),
                ts: r.ts,
            })
            .collect();
        Self {
            records,
            users,
            items,
        }
    }

    pub fn min_ts(&self) -> Option<i64> {
        self.records.iter().map(|r| r.ts).min()
    }

    pub fn max_ts(&self) -> Option<i64> {
        self.records.iter().map(|r| r.ts).max()
    }

    /// Chronological `(item, ts)` sequence per user, indexed by internal user
    /// ID. Equal timestamps keep input order.
    pub fn user_sequences(&self) -> Vec<Vec<(u32, i64)>> {
        let mut seqs = vec![Vec::new(); self.n_users()];
        for r in &self.records {
            seqs[r.user as usize].push((r.item, r.ts));
        }
        for s in &mut seqs {
            s.sort_by_key(|&(_, ts)| ts);
        }
        seqs
    }

    /// Content digest over records in external-ID form.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (u, i, ts) in self.to_external() {
            h.update(u.as_bytes());
            h.update([0]);
            h.update(i.as_bytes());
            h.update([0]);
            h.update(ts.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TimestampFormat {
    #[default]
    UnixSeconds,
    Iso8601,
}

/// Column layout of a delimited interaction file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FormatDescriptor {
    pub user_col: String,
    pub item_col: String,
    pub timestamp_col: String,
    pub timestamp_format: TimestampFormat,
    pub delimiter: char,
}

impl Default for FormatDescriptor {
    fn default() -> Self {
        Self {
            user_col: "user_id".into(),
            item_col: "item_id".into(),
            timestamp_col: "timestamp".into(),
            timestamp_format: TimestampFormat::UnixSeconds,
            delimiter: ',',
        }
    }
}

pub fn parse_timestamp(raw: &str, format: TimestampFormat) -> Option<i64> {
    let raw = raw.trim();
    match format {
        TimestampFormat::UnixSeconds => raw.parse::<i64>().ok().or_else(|| {
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(|v| v.floor() as i64)
        }),
        TimestampFormat::Iso8601 => DateTime::parse_from_rfc3339(raw)
            .map(|d| d.timestamp())
            .ok()
            .or_else(|| {
                ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"]
                    .iter()
                    .find_map(|f| NaiveDateTime::parse_from_str(raw, f).ok())
                    .map(|d| d.and_utc().timestamp())
            })
            .or_else(|| {
                NaiveDate::parse_from_str(raw, "%Y-%m-%d")
                    .ok()
                    .and_then(|d| d.and_hms_opt(0, 0, 0))
                    .map(|d| d.and_utc().timestamp())
            }),
    }
}

/// Reads a delimited file with a header row. Every row is one positive
/// event; duplicate rows are kept.
pub fn ingest(path: &Path, format: &FormatDescriptor) -> Result<InteractionLog> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::IngestFile(format!("cannot open {}: {e}", path.display())))?;
    ingest_reader(file, format)
}

pub fn ingest_reader(reader: impl std::io::Read, format: &FormatDescriptor) -> Result<InteractionLog> {
    if !format.delimiter.is_ascii() {
        return Err(Error::IngestFile(format!(
            "delimiter {:?} must be a single ASCII character",
            format.delimiter
        )));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(format.delimiter as u8)
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Ingest {
        line: 1,
        message: e.to_string(),
    })?;
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Ingest {
                line: 1,
                message: format!("missing column {name:?}"),
            })
    };
    let (uc, ic, tc) = (
        column(&format.user_col)?,
        column(&format.item_col)?,
        column(&format.timestamp_col)?,
    );

    let mut users = IdMap::new();
    let mut items = IdMap::new();
    let mut records = Vec::new();
    for (n, row) in rdr.records().enumerate() {
        let line = n + 2;
        let row = row.map_err(|e| Error::Ingest {
            line,
            message: e.to_string(),
        })?;
        let field = |c: usize, name: &str| {
            row.get(c).map(str::trim).ok_or_else(|| Error::Ingest {
                line,
                message: format!("row has no {name} field"),
            })
        };
        let (u, i, t) = (field(uc, "user")?, field(ic, "item")?, field(tc, "timestamp")?);
        let ts = parse_timestamp(t, format.timestamp_format).ok_or_else(|| Error::Ingest {
            line,
            message: format!("unparsable timestamp {t:?}"),
        })?;
        if ts < 0 {
            return Err(Error::Ingest {
                line,
                message: format!("negative timestamp {ts}"),
            });
        }
        records.push(Interaction {
            user: users.get_or_insert(u),
            item: items.get_or_insert(i),
            ts,
        });
    }
    if records.is_empty() {
        return Err(Error::IngestFile("no interactions".into()));
    }
    Ok(InteractionLog {
        records,
        users,
        items,
    })
}
