//! Control estimate data model: negative/positive control records, CSV
//! ingestion with validation, and the family-grouped train/test split.
//!
//! A "family" is a negative control together with the positive controls
//! synthesized from it; families are never split across train and test.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::artifact::ArtifactHeader;
use crate::error::{Error, Result};

/// Expected CSV header, in order.
pub const CSV_COLUMNS: [&str; 8] = [
    "database_id",
    "target_id",
    "comparator_id",
    "outcome_id",
    "family_id",
    "true_effect_size",
    "log_estimate",
    "se_log_estimate",
];

/// One effect-size estimate for a control or an outcome of interest.
///
/// `true_effect_size` is on the ratio scale: 1.0 marks a negative control,
/// values above 1 mark synthetic positive controls, and `None` marks an
/// outcome of interest (an uncalibrated estimate, never used for fitting).
#[derive(Clone, Debug, PartialEq)]
pub struct ControlRecord {
    pub database_id: String,
    pub target_id: String,
    pub comparator_id: String,
    pub outcome_id: String,
    pub family_id: String,
    pub true_effect_size: Option<f64>,
    pub log_estimate: f64,
    pub se_log_estimate: f64,
}

impl ControlRecord {
    pub fn is_negative(&self) -> bool {
        self.true_effect_size == Some(1.0)
    }

    pub fn is_positive(&self) -> bool {
        matches!(self.true_effect_size, Some(t) if t > 1.0)
    }

    pub fn is_control(&self) -> bool {
        self.true_effect_size.is_some()
    }

    /// Log of the true effect size (0 for negative controls).
    pub fn true_log_effect(&self) -> Option<f64> {
        self.true_effect_size.map(f64::ln)
    }

    /// Estimated bias: log estimate minus log true effect size.
    pub fn estimated_bias(&self) -> Option<f64> {
        self.true_log_effect().map(|t| self.log_estimate - t)
    }

    fn validate(&self, row: usize) -> Result<()> {
        if !self.log_estimate.is_finite() {
            return Err(Error::Data(format!(
                "row {row}: log_estimate must be finite, got {}",
                self.log_estimate
            )));
        }
        if !(self.se_log_estimate.is_finite() && self.se_log_estimate > 0.0) {
            return Err(Error::Data(format!(
                "row {row}: se_log_estimate must be positive and finite, got {}",
                self.se_log_estimate
            )));
        }
        if let Some(t) = self.true_effect_size {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::Data(format!(
                    "row {row}: true_effect_size must be positive, got {t}"
                )));
            }
        }
        if self.family_id.is_empty() {
            return Err(Error::Data(format!("row {row}: family_id must be non-empty")));
        }
        Ok(())
    }

    fn dedup_key(&self) -> (String, String, String, String, Option<u64>) {
        (
            self.target_id.clone(),
            self.comparator_id.clone(),
            self.outcome_id.clone(),
            self.database_id.clone(),
            self.true_effect_size.map(f64::to_bits),
        )
    }
}

/// Scope descriptor for a control set; one set is single-database by
/// construction.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ControlScope {
    pub database_id: String,
    pub analysis: String,
}

/// Validated, ordered collection of control records. Immutable after load;
/// safe to share read-only across concurrent fitters.
#[derive(Clone, Debug)]
pub struct ControlSet {
    records: Vec<ControlRecord>,
    pub scope: ControlScope,
}

/// Family-grouped train/test assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitPlan {
    pub train_families: BTreeSet<String>,
    pub test_families: BTreeSet<String>,
    pub fraction: f64,
    pub seed: u64,
}

impl ControlSet {
    /// Validate and assemble a set from records. Checks per-record
    /// invariants, duplicate keys, and positive-control family linkage.
    pub fn from_records(records: Vec<ControlRecord>, scope: ControlScope) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("control set must be non-empty".into()));
        }
        let mut problems: Vec<String> = Vec::new();
        let mut seen = BTreeMap::new();
        for (idx, rec) in records.iter().enumerate() {
            let row = idx + 1;
            if let Err(e) = rec.validate(row) {
                problems.push(e.to_string());
                continue;
            }
            if let Some(prev) = seen.insert(rec.dedup_key(), row) {
                problems.push(format!(
                    "row {row}: duplicate (target, comparator, outcome, database, \
                     true_effect_size) key first seen at row {prev}"
                ));
            }
        }
        // Positive controls must link to a negative control of the same
        // family with matching target and comparator.
        let negatives: BTreeSet<(&str, &str, &str)> = records
            .iter()
            .filter(|r| r.is_negative())
            .map(|r| (r.family_id.as_str(), r.target_id.as_str(), r.comparator_id.as_str()))
            .collect();
        for (idx, rec) in records.iter().enumerate() {
            if rec.is_positive()
                && !negatives.contains(&(
                    rec.family_id.as_str(),
                    rec.target_id.as_str(),
                    rec.comparator_id.as_str(),
                ))
            {
                problems.push(format!(
                    "row {}: positive control family_id {:?} has no matching negative \
                     control with the same target and comparator",
                    idx + 1,
                    rec.family_id
                ));
            }
        }
        if !problems.is_empty() {
            let shown = problems.iter().take(20).cloned().collect::<Vec<_>>().join("; ");
            let suffix = if problems.len() > 20 {
                format!(" (+{} more)", problems.len() - 20)
            } else {
                String::new()
            };
            return Err(Error::Data(format!("{shown}{suffix}")));
        }
        Ok(ControlSet { records, scope })
    }

    /// Load a control set from the documented CSV schema. Lines starting
    /// with `#` are artifact headers and are skipped.
    pub fn load_csv(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("no such file: {}", path.display()),
            )));
        }
        let file = std::fs::File::open(path)?;
        let mut lines = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line?;
            if !line.starts_with('#') {
                lines.push(line);
            }
        }
        let Some(header) = lines.first() else {
            return Err(Error::Data(format!("{}: empty file", path.display())));
        };
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols != CSV_COLUMNS {
            return Err(Error::Data(format!(
                "{}: header mismatch. expected {:?}, got {:?}",
                path.display(),
                CSV_COLUMNS.join(","),
                header
            )));
        }
        let mut records = Vec::with_capacity(lines.len().saturating_sub(1));
        for (idx, line) in lines.iter().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != CSV_COLUMNS.len() {
                return Err(Error::Data(format!(
                    "row {idx}: expected {} columns, got {}",
                    CSV_COLUMNS.len(),
                    fields.len()
                )));
            }
            let parse = |col: usize| -> Result<f64> {
                fields[col].trim().parse::<f64>().map_err(|_| {
                    Error::Data(format!(
                        "row {idx}, column {}: cannot parse {:?} as a number",
                        CSV_COLUMNS[col], fields[col]
                    ))
                })
            };
            let true_effect_size = if fields[5].trim().is_empty() {
                None
            } else {
                Some(parse(5)?)
            };
            records.push(ControlRecord {
                database_id: fields[0].trim().to_string(),
                target_id: fields[1].trim().to_string(),
                comparator_id: fields[2].trim().to_string(),
                outcome_id: fields[3].trim().to_string(),
                family_id: fields[4].trim().to_string(),
                true_effect_size,
                log_estimate: parse(6)?,
                se_log_estimate: parse(7)?,
            });
        }
        let scope = ControlScope {
            database_id: records.first().map(|r| r.database_id.clone()).unwrap_or_default(),
            analysis: String::new(),
        };
        Self::from_records(records, scope)
    }

    /// Write the set back in the ingestion schema with a provenance header.
    pub fn write_csv(&self, path: &Path, header: &ArtifactHeader) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "{}", header.comment_line())?;
        writeln!(out, "{}", CSV_COLUMNS.join(","))?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.database_id,
                r.target_id,
                r.comparator_id,
                r.outcome_id,
                r.family_id,
                r.true_effect_size.map(|t| t.to_string()).unwrap_or_default(),
                r.log_estimate,
                r.se_log_estimate
            )?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn records(&self) -> &[ControlRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct family ids in first-appearance order.
    pub fn family_ids(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for r in &self.records {
            if seen.insert(r.family_id.clone()) {
                out.push(r.family_id.clone());
            }
        }
        out
    }

    /// Keep only negative controls (true effect size exactly 1).
    pub fn negatives_only(&self) -> Result<ControlSet> {
        let records: Vec<ControlRecord> =
            self.records.iter().filter(|r| r.is_negative()).cloned().collect();
        if records.is_empty() {
            return Err(Error::Data("no negative controls in set".into()));
        }
        Ok(ControlSet { records, scope: self.scope.clone() })
    }

    /// Subset to records whose family is in `families`, preserving order.
    pub fn subset_by_families(&self, families: &BTreeSet<String>) -> ControlSet {
        ControlSet {
            records: self
                .records
                .iter()
                .filter(|r| families.contains(&r.family_id))
                .cloned()
                .collect(),
            scope: self.scope.clone(),
        }
    }

    /// Assign whole families to train or test. The train side receives the
    /// nearest integer to `fraction × families`, clamped so both sides stay
    /// non-empty. Deterministic in `seed`.
    pub fn split_by_family(&self, fraction: f64, seed: u64) -> Result<SplitPlan> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::InvalidInput(format!(
                "split fraction must lie in (0,1), got {fraction}"
            )));
        }
        let mut families = self.family_ids();
        if families.len() < 2 {
            return Err(Error::Data(format!(
                "need at least 2 families to split, got {}",
                families.len()
            )));
        }
        // Shuffle a sorted list so the plan depends only on (families, seed),
        // not on record order.
        families.sort();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        families.shuffle(&mut rng);

        let n = families.len();
        let n_train = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
        let train_families: BTreeSet<String> = families[..n_train].iter().cloned().collect();
        let test_families: BTreeSet<String> = families[n_train..].iter().cloned().collect();
        Ok(SplitPlan { train_families, test_families, fraction, seed })
    }
}
