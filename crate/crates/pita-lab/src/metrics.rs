//! Serialization of preference datasets and experiment results.
//!
//! Datasets go to JSON lines (streamable and appendable, matching the
//! append-only aggregation of the training loop); results go to CSV with
//! floating values printed at 9 significant digits. Readers reject invalid
//! fields rather than coercing them. Both formats are locale-independent
//! and byte-deterministic for a fixed input.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::mdp::{Completion, State, Token};
use crate::preference::{PreferenceDataset, PreferenceSample};
use crate::Result;

/// Wire form of one preference sample. Contexts are stored as plain token
/// arrays; the episode-clock position of a rolled-in context is runtime
/// information and not part of the wire format.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PreferenceRow {
    ctx: Vec<u32>,
    y: Vec<u32>,
    y_ref: Vec<u32>,
    label: u8,
    iter: usize,
}

/// Write one JSON object per sample: fields `ctx`, `y`, `y_ref`, `label`,
/// `iter`.
pub fn write_preferences(data: &PreferenceDataset, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for sample in data.samples() {
        let row = PreferenceRow {
            ctx: sample.context.tokens().iter().map(|t| t.0).collect(),
            y: sample.y.suffix().iter().map(|t| t.0).collect(),
            y_ref: sample.y_ref.suffix().iter().map(|t| t.0).collect(),
            label: sample.label,
            iter: sample.iteration,
        };
        let line = serde_json::to_string(&row)
            .map_err(|e| Error::parse(format!("serialize failure: {e}")))?;
        writeln!(file, "{line}")?;
    }
    Ok(())
}

pub fn read_preferences(path: &Path) -> Result<PreferenceDataset> {
    let file = std::fs::File::open(path)?;
    let mut data = PreferenceDataset::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: PreferenceRow = serde_json::from_str(&line)
            .map_err(|e| Error::parse(format!("line {}: {e}", i + 1)))?;
        if row.label > 1 {
            return Err(Error::parse(format!(
                "line {}: label must be 0 or 1, got {}",
                i + 1,
                row.label
            )));
        }
        let context = State::new(row.ctx.into_iter().map(Token).collect());
        let y = Completion::new(
            context.clone(),
            row.y.into_iter().map(Token).collect(),
            true,
        );
        let y_ref = Completion::new(
            context.clone(),
            row.y_ref.into_iter().map(Token).collect(),
            true,
        );
        data.push(PreferenceSample { context, y, y_ref, label: row.label, iteration: row.iter });
    }
    Ok(data)
}

/// Metric names allowed in result rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Pass1,
    MajK,
    KlExact,
    KlMc,
    SoftReturn,
    SeminormErr,
    Suboptimality,
    DatasetSize,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Pass1 => "pass1",
            Metric::MajK => "majk",
            Metric::KlExact => "kl_exact",
            Metric::KlMc => "kl_mc",
            Metric::SoftReturn => "soft_return",
            Metric::SeminormErr => "seminorm_err",
            Metric::Suboptimality => "suboptimality",
            Metric::DatasetSize => "dataset_size",
        }
    }
}

/// One measurement.
#[derive(Debug, Clone)]
pub struct ResultRow {
    pub algo: String,
    pub env: String,
    pub metric: Metric,
    pub value: f64,
    pub seed: u64,
    /// Auxiliary key-value annotations, serialized as `k=v;k=v` in key
    /// order.
    pub extra: BTreeMap<String, String>,
}

impl ResultRow {
    pub fn new(algo: &str, env: &str, metric: Metric, value: f64, seed: u64) -> Self {
        ResultRow {
            algo: algo.to_string(),
            env: env.to_string(),
            metric,
            value,
            seed,
            extra: BTreeMap::new(),
        }
    }

    pub fn with_extra(mut self, key: &str, value: impl ToString) -> Self {
        self.extra.insert(key.to_string(), value.to_string());
        self
    }
}

/// Format at 9 significant digits in plain positional notation
/// (`0.62012 -> "0.620120000"`), locale-independent.
pub fn format_sig9(value: f64) -> Result<String> {
    if !value.is_finite() {
        return Err(Error::Domain(format!("cannot format non-finite value {value}")));
    }
    if value == 0.0 {
        return Ok("0.00000000".to_string());
    }
    let exp = value.abs().log10().floor() as i32;
    let decimals = (8 - exp).max(0) as usize;
    Ok(format!("{value:.decimals$}"))
}

fn check_field(s: &str) -> Result<()> {
    if s.contains([',', '\n', '\r', '"', ';', '=']) {
        return Err(Error::Domain(format!("field {s:?} contains reserved characters")));
    }
    Ok(())
}

/// Write rows as CSV with header `algo,env,metric,value,seed,extra`, in
/// input order.
pub fn write_results(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut out = String::from("algo,env,metric,value,seed,extra\n");
    for row in rows {
        check_field(&row.algo)?;
        check_field(&row.env)?;
        let mut extras = Vec::with_capacity(row.extra.len());
        for (k, v) in &row.extra {
            check_field(k)?;
            check_field(v)?;
            extras.push(format!("{k}={v}"));
        }
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.algo,
            row.env,
            row.metric.as_str(),
            format_sig9(row.value)?,
            row.seed,
            extras.join(";")
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
