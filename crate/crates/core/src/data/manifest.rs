//! Dataset manifests: typed records binding image files to
//! (class, sample, view, illumination) with split assignments.
//!
//! On-disk form is line-delimited text, one record per line, tab-separated
//! in the canonical field order
//! `path, class_id, sample_id, view_index, theta_deg, delta_deg, illumination, split`.
//! Tabs, newlines and backslashes inside text fields are escaped as `\t`,
//! `\n`, `\\`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::rng::rng_for;

use super::DataError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    Unassigned,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
            Split::Unassigned => write!(f, "unassigned"),
        }
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "unassigned" => Ok(Split::Unassigned),
            other => Err(format!("unknown split '{other}'")),
        }
    }
}

/// One view observation: the base image path plus its metadata. The
/// differential partner file is derived from `path` by the naming grammar.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub path: String,
    pub class_id: usize,
    pub sample_id: String,
    pub view_index: usize,
    pub theta_deg: f64,
    pub delta_deg: f64,
    pub illumination: String,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String, DataError> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            other => {
                return Err(DataError::Manifest(format!(
                    "bad escape '\\{}' in field '{s}'",
                    other.map(String::from).unwrap_or_default()
                )))
            }
        }
    }
    Ok(out)
}

impl Manifest {
    pub fn new(records: Vec<ManifestRecord>) -> Self {
        Manifest { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.records.iter().map(|r| r.class_id + 1).max().unwrap_or(0)
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Distinct sample ids per class, in sorted order.
    pub fn samples_by_class(&self) -> BTreeMap<usize, BTreeSet<String>> {
        let mut map: BTreeMap<usize, BTreeSet<String>> = BTreeMap::new();
        for r in &self.records {
            map.entry(r.class_id).or_default().insert(r.sample_id.clone());
        }
        map
    }

    /// Machine-checks the manifest invariants: sample-level split atomicity
    /// and (sample, view, illumination) uniqueness.
    pub fn validate(&self) -> Result<(), DataError> {
        let mut sample_split: BTreeMap<&str, Split> = BTreeMap::new();
        let mut keys: BTreeSet<(&str, usize, &str)> = BTreeSet::new();
        for r in &self.records {
            if let Some(prev) = sample_split.insert(&r.sample_id, r.split) {
                if prev != r.split {
                    return Err(DataError::Manifest(format!(
                        "sample '{}' appears in both {prev} and {} splits",
                        r.sample_id, r.split
                    )));
                }
            }
            if !keys.insert((&r.sample_id, r.view_index, &r.illumination)) {
                return Err(DataError::Manifest(format!(
                    "duplicate record key ({}, view {}, {})",
                    r.sample_id, r.view_index, r.illumination
                )));
            }
            if r.delta_deg <= 0.0 {
                return Err(DataError::Manifest(format!(
                    "record '{}': delta_deg must be > 0",
                    r.path
                )));
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                escape(&r.path),
                r.class_id,
                escape(&r.sample_id),
                r.view_index,
                r.theta_deg,
                r.delta_deg,
                escape(&r.illumination),
                r.split
            ));
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Reads and validates a manifest file.
    pub fn read(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path)?;
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 8 {
                return Err(DataError::Manifest(format!(
                    "line {}: expected 8 fields, found {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let parse_err = |field: &str, what: &str| {
                DataError::Manifest(format!("line {}: bad {what} '{field}'", lineno + 1))
            };
            records.push(ManifestRecord {
                path: unescape(fields[0])?,
                class_id: fields[1].parse().map_err(|_| parse_err(fields[1], "class_id"))?,
                sample_id: unescape(fields[2])?,
                view_index: fields[3].parse().map_err(|_| parse_err(fields[3], "view_index"))?,
                theta_deg: fields[4].parse().map_err(|_| parse_err(fields[4], "theta_deg"))?,
                delta_deg: fields[5].parse().map_err(|_| parse_err(fields[5], "delta_deg"))?,
                illumination: unescape(fields[6])?,
                split: fields[7].parse().map_err(|e: String| DataError::Manifest(e))?,
            });
        }
        let manifest = Manifest::new(records);
        manifest.validate()?;
        Ok(manifest)
    }
}

/// Produces `n_splits` independent split assignments. Per split and class,
/// ceil(train_fraction * n_samples) whole samples go to train (all views and
/// illuminations of a sample stay together). Classes with a single sample
/// are rejected.
pub fn make_splits(
    manifest: &Manifest,
    train_fraction: f64,
    n_splits: usize,
    seed: u64,
) -> Result<Vec<Manifest>, DataError> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(DataError::Manifest(format!(
            "train_fraction {train_fraction} outside [0, 1]"
        )));
    }
    manifest.validate()?;
    let by_class = manifest.samples_by_class();
    for (class_id, samples) in &by_class {
        if samples.len() < 2 {
            return Err(DataError::Manifest(format!(
                "class {class_id} has {} sample(s); need at least 2 to split",
                samples.len()
            )));
        }
    }

    let mut out = Vec::with_capacity(n_splits);
    for split_idx in 0..n_splits {
        let mut train_samples: BTreeSet<String> = BTreeSet::new();
        for (class_id, samples) in &by_class {
            let mut ordered: Vec<&String> = samples.iter().collect();
            let mut rng = rng_for(seed, &[split_idx as u64, *class_id as u64]);
            // Fisher-Yates with the derived stream
            use rand::Rng;
            for i in (1..ordered.len()).rev() {
                let j = rng.random_range(0..=i);
                ordered.swap(i, j);
            }
            let n_train = ((train_fraction * samples.len() as f64).ceil() as usize).min(samples.len());
            for s in ordered.into_iter().take(n_train) {
                train_samples.insert(s.clone());
            }
        }
        let mut records = manifest.records.clone();
        for r in &mut records {
            r.split = if train_samples.contains(&r.sample_id) {
                Split::Train
            } else {
                Split::Test
            };
        }
        let m = Manifest::new(records);
        m.validate()?;
        out.push(m);
    }
    Ok(out)
}
