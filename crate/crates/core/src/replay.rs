//! Offline replay of logged bandit data with strict match-or-skip.
//!
//! A logged record is used only when the policy's own draw equals the logged
//! action; the propensity fed to the learner and the debiasing sums is the
//! policy's. Steps, and therefore `T` and `T0`, count matched records only.

use std::io::Read;
use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::DebiasState;
use crate::learner::{LearnerState, StepRecord};
use crate::schedule::{epsilon_at, propensities, sample_action, Cell};

/// One logged round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub cell: Cell,
    pub action: usize,
    pub reward: f64,
    /// Ordering key; file position when the log has no order column.
    pub order: f64,
    /// Raw outcome used by the target-band metric; defaults to the reward.
    pub outcome: f64,
    /// 1-based line in the source file.
    pub line: u64,
}

fn col(name: &str) -> String {
    name.to_string()
}

fn default_row() -> String {
    col("j1")
}
fn default_col() -> String {
    col("j2")
}
fn default_action() -> String {
    col("action")
}
fn default_reward() -> String {
    col("reward")
}
fn default_order() -> Option<String> {
    Some(col("order"))
}

/// Column mapping of a log file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogSchema {
    #[serde(default = "default_row")]
    pub row: String,
    #[serde(default = "default_col")]
    pub col: String,
    #[serde(default = "default_action")]
    pub action: String,
    #[serde(default = "default_reward")]
    pub reward: String,
    /// `None` keeps file order.
    #[serde(default = "default_order")]
    pub order: Option<String>,
    #[serde(default)]
    pub outcome: Option<String>,
    /// Smallest row/column/action index in the file (0 or 1).
    #[serde(default)]
    pub index_base: usize,
}

impl Default for LogSchema {
    fn default() -> Self {
        Self {
            row: default_row(),
            col: default_col(),
            action: default_action(),
            reward: default_reward(),
            order: default_order(),
            outcome: None,
            index_base: 0,
        }
    }
}

/// Expected shape of the logged data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogShape {
    pub d1: usize,
    pub d2: usize,
    pub arms: usize,
}

/// Reads and validates a CSV log, then stably sorts it by the order key.
pub fn ingest_log(path: &Path, schema: &LogSchema, shape: LogShape) -> Result<Vec<LogRecord>> {
    let file = std::fs::File::open(path)?;
    ingest_reader(file, &path.display().to_string(), schema, shape)
}

pub fn ingest_reader<R: Read>(
    reader: R,
    source: &str,
    schema: &LogSchema,
    shape: LogShape,
) -> Result<Vec<LogRecord>> {
    if schema.index_base > 1 {
        return Err(Error::Config(format!("index_base {} must be 0 or 1", schema.index_base)));
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let i_row = find(&schema.row)?;
    let i_col = find(&schema.col)?;
    let i_action = find(&schema.action)?;
    let i_reward = find(&schema.reward)?;
    let i_order = schema.order.as_deref().map(find).transpose()?;
    let i_outcome = schema.outcome.as_deref().map(find).transpose()?;

    let mut out = Vec::new();
    for (k, row) in rdr.records().enumerate() {
        let row = row?;
        let line = row.position().map_or(k as u64 + 2, |p| p.line());
        let bad = |reason: String| Error::Malformed {
            path: source.to_string(),
            line,
            reason,
        };
        let field = |i: usize, name: &str| row.get(i).ok_or_else(|| bad(format!("missing `{name}` field")));
        let index = |i: usize, name: &str, limit: usize| -> Result<usize> {
            let raw = field(i, name)?;
            let v: usize = raw
                .parse()
                .map_err(|_| bad(format!("`{name}` = `{raw}` is not a nonnegative integer")))?;
            if v < schema.index_base || v - schema.index_base >= limit {
                return Err(bad(format!(
                    "`{name}` = {v} outside {}..{}",
                    schema.index_base,
                    limit + schema.index_base
                )));
            }
            Ok(v - schema.index_base)
        };
        let real = |i: usize, name: &str| -> Result<f64> {
            let raw = field(i, name)?;
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(bad(format!("`{name}` = `{raw}` is not a finite number"))),
            }
        };
        let cell = Cell::new(index(i_row, &schema.row, shape.d1)?, index(i_col, &schema.col, shape.d2)?);
        let action = index(i_action, &schema.action, shape.arms)?;
        let reward = real(i_reward, &schema.reward)?;
        let order = match i_order {
            Some(i) => real(i, schema.order.as_deref().unwrap_or_default())?,
            None => k as f64,
        };
        let outcome = match i_outcome {
            Some(i) => real(i, schema.outcome.as_deref().unwrap_or_default())?,
            None => reward,
        };
        out.push(LogRecord {
            cell,
            action,
            reward,
            order,
            outcome,
            line,
        });
    }
    out.sort_by(|a, b| a.order.total_cmp(&b.order));
    Ok(out)
}

/// Counters of a replay pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayStats {
    pub total_records: u64,
    pub matched: u64,
    pub skipped: u64,
    /// Records skipped because the matched-step horizon was already reached.
    pub skipped_after_horizon: u64,
    /// Per logged action.
    pub total_per_arm: Vec<u64>,
    pub matched_per_arm: Vec<u64>,
    pub skipped_per_arm: Vec<u64>,
    /// Outcomes of matched records, in replay order.
    pub matched_outcomes: Vec<f64>,
}

impl ReplayStats {
    pub fn matched_fraction(&self) -> f64 {
        self.matched as f64 / self.total_records as f64
    }
}

#[derive(Debug, Clone)]
pub struct ReplayOutcome {
    pub stats: ReplayStats,
    pub learner: LearnerState,
    pub debias: Option<DebiasState>,
}

/// Replays `records` through `learner` with strict match-or-skip.
pub fn replay_run<R: RngCore>(
    records: &[LogRecord],
    mut learner: LearnerState,
    debias: bool,
    rng: &mut R,
) -> Result<ReplayOutcome> {
    let config = learner.config.clone();
    if learner.t != 0 {
        return Err(Error::Config(format!("replay needs a fresh learner, got t = {}", learner.t)));
    }
    let k = config.arms;
    let mut stats = ReplayStats {
        total_per_arm: vec![0; k],
        matched_per_arm: vec![0; k],
        skipped_per_arm: vec![0; k],
        ..Default::default()
    };
    let mut db = debias.then(|| DebiasState::for_config(&config));
    for rec in records {
        if rec.action >= k || rec.cell.row >= config.d1 || rec.cell.col >= config.d2 {
            return Err(Error::InvalidRecord(format!("log line {} does not fit the learner", rec.line)));
        }
        stats.total_records += 1;
        stats.total_per_arm[rec.action] += 1;
        if learner.t >= config.horizon {
            stats.skipped += 1;
            stats.skipped_after_horizon += 1;
            stats.skipped_per_arm[rec.action] += 1;
            continue;
        }
        let t = learner.t + 1;
        let pv = propensities(&learner.arms, rec.cell, epsilon_at(&config, t)?);
        if sample_action(&pv, rng) != rec.action {
            stats.skipped += 1;
            stats.skipped_per_arm[rec.action] += 1;
            continue;
        }
        let step = StepRecord {
            t,
            x: rec.cell,
            propensities: pv,
            action: rec.action,
            reward: rec.reward,
            phase: config.phase(t),
        };
        if let Some(db) = db.as_mut().filter(|_| t > config.phase1_len) {
            db.accumulate(&learner, &step)?;
        }
        learner.sgd_step(&step)?;
        stats.matched += 1;
        stats.matched_per_arm[rec.action] += 1;
        stats.matched_outcomes.push(rec.outcome);
    }
    Ok(ReplayOutcome {
        stats,
        learner,
        debias: db,
    })
}

/// Fraction of outcomes inside `[lo, hi]`; each outcome is one (cell, period) unit.
pub fn target_band_metric(outcomes: &[f64], lo: f64, hi: f64) -> Result<f64> {
    if !(lo <= hi) {
        return Err(Error::Config(format!("band [{lo}, {hi}] is empty")));
    }
    if outcomes.is_empty() {
        return Err(Error::Config("no outcomes to score".into()));
    }
    let inside = outcomes.iter().filter(|v| (lo..=hi).contains(*v)).count();
    Ok(inside as f64 / outcomes.len() as f64)
}
