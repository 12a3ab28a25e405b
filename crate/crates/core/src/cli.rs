//! `mcb` command line: config parsing, orchestration and result files.
//!
//! Every CSV starts with a `# schema=<name>` line and every JSON document has a
//! `schema` field. `manifest.json` lists all outputs and is itself
//! deterministic; wall-clock timings and the worker count go to `timings.log`.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, ErrorKind, Result};
use crate::impute::{soft_impute_init, Observation, SoftImputeOptions};
use crate::inference::{InferenceContext, InferenceReport};
use crate::io::Checkpoint;
use crate::learner::LearnerState;
use crate::lowrank::thin_svd;
use crate::replay::{ingest_log, replay_run, target_band_metric, LogSchema, LogShape};
use crate::schedule::{scaled_step_size, BanditConfig};
use crate::sim::{
    normality_study, regret_scaling_study, run_experiment, standard_forms, trial_rng, FormSpec,
    PhaseOneSpec, RunSpec, StepSpec, StudyOptions, TruthSpec,
};

pub const MANIFEST_SCHEMA: &str = "mcb.manifest.v1";

#[derive(Debug, Parser)]
#[command(name = "mcb", version, about = "Matrix completion bandits: simulate, study, replay, infer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the config's top-level seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for trial-parallel studies.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// One seeded episode: regret ledger, final errors, checkpoint.
    Simulate,
    /// Repeated debiased episodes: studentized statistics, KS, coverage.
    Normality,
    /// Mean cumulative regret over a horizon grid.
    RegretScaling,
    /// Match-or-skip replay of a logged CSV.
    Replay,
    /// Inference reports from a saved checkpoint.
    Infer,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Normality => "normality",
            Command::RegretScaling => "regret-scaling",
            Command::Replay => "replay",
            Command::Infer => "infer",
        }
    }
}

fn yes() -> bool {
    true
}

fn default_alpha() -> f64 {
    0.05
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    #[serde(default = "yes")]
    pub debias: bool,
    #[serde(default = "yes")]
    pub checkpoint: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalitySection {
    pub trials: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Empty means the four standard two-arm forms.
    #[serde(default)]
    pub forms: Vec<FormSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegretSection {
    pub grid: Vec<usize>,
    pub trials: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ReplayInit {
    /// Factors from a checkpoint; its step counter is discarded.
    Checkpoint(PathBuf),
    /// Soft-Impute on the first `records` log records, which are not replayed.
    Warmup {
        records: usize,
        #[serde(default)]
        options: SoftImputeOptions,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplaySection {
    pub log: PathBuf,
    #[serde(default)]
    pub columns: LogSchema,
    pub d1: usize,
    pub d2: usize,
    pub arms: usize,
    pub rank: usize,
    /// Matched-step horizon `T`.
    pub horizon: usize,
    pub phase1: PhaseOneSpec,
    pub gamma: f64,
    pub epsilon: f64,
    pub c2: f64,
    /// `fixed` or `scaled_from_init`.
    pub step: StepSpec,
    pub init: ReplayInit,
    #[serde(default = "yes")]
    pub debias: bool,
    #[serde(default)]
    pub band: Option<[f64; 2]>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub forms: Vec<FormSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferSection {
    pub checkpoint: PathBuf,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub forms: Vec<FormSpec>,
}

/// The whole configuration file; each subcommand requires its sections.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default)]
    pub truth: Option<TruthSpec>,
    #[serde(default)]
    pub run: Option<RunSpec>,
    #[serde(default)]
    pub simulate: Option<SimulateSection>,
    #[serde(default)]
    pub normality: Option<NormalitySection>,
    #[serde(default)]
    pub regret_scaling: Option<RegretSection>,
    #[serde(default)]
    pub replay: Option<ReplaySection>,
    #[serde(default)]
    pub infer: Option<InferSection>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

fn require<'a, T>(section: &'a Option<T>, name: &str) -> Result<&'a T> {
    section
        .as_ref()
        .ok_or_else(|| Error::Config(format!("missing [{name}] section")))
}

/// Where outputs go, and what has been written.
struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
    timings: Vec<(String, f64)>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
            timings: Vec::new(),
        })
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        std::fs::write(self.dir.join(name), text)?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn csv(&mut self, name: &str, schema: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(self.dir.join(name))?);
        writeln!(file, "# schema={schema}")?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(header)?;
        for row in rows {
            w.write_record(row)?;
        }
        w.flush()?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn checkpoint(&mut self, name: &str, cp: &Checkpoint) -> Result<()> {
        cp.save(&self.dir.join(name))?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn time(&mut self, label: &str, start: Instant) {
        self.timings.push((label.to_string(), start.elapsed().as_secs_f64()));
    }

    fn finish(mut self, command: Command, config: &ConfigFile, seed: u64) -> Result<()> {
        let mut log = String::new();
        if let Some(w) = config.workers {
            let _ = writeln!(log, "workers\t{w}");
        }
        for (label, secs) in &self.timings {
            let _ = writeln!(log, "{label}\t{secs:.3}s");
        }
        std::fs::write(self.dir.join("timings.log"), log)?;
        self.written.push("timings.log".into());
        let manifest = json!({
            "schema": MANIFEST_SCHEMA,
            "command": command.name(),
            "version": env!("CARGO_PKG_VERSION"),
            "build": option_env!("MCB_BUILD_REV").unwrap_or("unknown"),
            "seed": seed,
            "config": ConfigFile {
                workers: None,
                ..config.clone()
            },
            "outputs": self.written,
            "nondeterministic": ["timings.log"],
        });
        self.json("manifest.json", &manifest)
    }
}

fn f(x: f64) -> String {
    format!("{x}")
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut config = ConfigFile::load(path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(w) = cli.workers {
        config.workers = Some(w);
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = Outputs::new(&cli.out)?;
    let start = Instant::now();
    match cli.command {
        Command::Simulate => cmd_simulate(&config, &mut out)?,
        Command::Normality => cmd_normality(&config, &mut out)?,
        Command::RegretScaling => cmd_regret_scaling(&config, &mut out)?,
        Command::Replay => cmd_replay(&config, &base, &mut out)?,
        Command::Infer => cmd_infer(&config, &base, &mut out)?,
    }
    out.time(cli.command.name(), start);
    let seed = config.seed;
    out.finish(cli.command, &config, seed)
}

fn study_options(config: &ConfigFile, trials: usize) -> StudyOptions {
    StudyOptions {
        trials,
        workers: config
            .workers
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())),
        seed: config.seed,
    }
}

fn cmd_simulate(config: &ConfigFile, out: &mut Outputs) -> Result<()> {
    let truth_spec = require(&config.truth, "truth")?;
    let run = require(&config.run, "run")?;
    let section = config.simulate.clone().unwrap_or(SimulateSection {
        debias: true,
        checkpoint: true,
    });
    let truth = truth_spec.generate()?;
    info!("simulating T = {} on a {}x{} truth", run.horizon, truth_spec.d1, truth_spec.d2);
    let res = run_experiment(&truth, run, section.debias, config.seed, &mut trial_rng(config.seed, 0))?;
    let rows: Vec<Vec<String>> = res
        .ledger
        .instantaneous
        .iter()
        .zip(&res.ledger.cumulative)
        .enumerate()
        .map(|(k, (i, c))| vec![(k + 1).to_string(), f(*i), f(*c)])
        .collect();
    out.csv("regret.csv", "mcb.regret.v1", &["t", "instantaneous", "cumulative"], &rows)?;
    out.json(
        "summary.json",
        &json!({
            "schema": "mcb.simulate.v1",
            "lambda_max": truth.lambda_max,
            "lambda_min": truth.lambda_min,
            "pulls_optimal": res.ledger.pulls_optimal,
            "pulls_suboptimal": res.ledger.pulls_suboptimal,
            "run": res.summary,
        }),
    )?;
    if section.checkpoint {
        out.checkpoint("checkpoint.json", &Checkpoint::new(res.learner, res.debias))?;
    }
    Ok(())
}

fn cmd_normality(config: &ConfigFile, out: &mut Outputs) -> Result<()> {
    let truth = require(&config.truth, "truth")?.generate()?;
    let run = require(&config.run, "run")?;
    let section = require(&config.normality, "normality")?;
    let forms = if section.forms.is_empty() {
        standard_forms()
    } else {
        section.forms.clone()
    };
    let res = normality_study(&truth, run, &forms, section.alpha, &study_options(config, section.trials))?;
    let rows: Vec<Vec<String>> = res
        .stats
        .iter()
        .map(|s| {
            vec![
                s.trial.to_string(),
                forms[s.form].name.clone(),
                f(s.estimate),
                f(s.truth),
                f(s.std_error),
                f(s.statistic),
                s.covered.to_string(),
                s.ill_posed.to_string(),
            ]
        })
        .collect();
    out.csv(
        "normality_trials.csv",
        "mcb.normality_trials.v1",
        &["trial", "form", "estimate", "truth", "std_error", "statistic", "covered", "ill_posed"],
        &rows,
    )?;
    let rows: Vec<Vec<String>> = res
        .sigma_sq
        .iter()
        .enumerate()
        .flat_map(|(k, v)| v.iter().enumerate().map(move |(a, s)| vec![k.to_string(), a.to_string(), f(*s)]))
        .collect();
    out.csv("sigma_sq.csv", "mcb.sigma_sq.v1", &["trial", "arm", "sigma_sq"], &rows)?;
    out.json(
        "normality_summary.json",
        &json!({
            "schema": "mcb.normality.v1",
            "alpha": res.alpha,
            "trials": section.trials,
            "omega_empty_mass": res.omega_empty_mass,
            "forms": res.forms,
        }),
    )
}

fn cmd_regret_scaling(config: &ConfigFile, out: &mut Outputs) -> Result<()> {
    let truth = require(&config.truth, "truth")?.generate()?;
    let run = require(&config.run, "run")?;
    let section = require(&config.regret_scaling, "regret_scaling")?;
    let res = regret_scaling_study(&truth, run, &section.grid, &study_options(config, section.trials))?;
    let rows: Vec<Vec<String>> = res
        .points
        .iter()
        .map(|p| {
            vec![
                p.horizon.to_string(),
                f(p.x),
                f(p.mean_regret),
                f(p.sd_regret),
                f(p.mean_final_error),
            ]
        })
        .collect();
    out.csv(
        "regret_scaling.csv",
        "mcb.regret_scaling.v1",
        &["horizon", "t_pow", "mean_regret", "sd_regret", "mean_final_error"],
        &rows,
    )?;
    let rows: Vec<Vec<String>> = res
        .points
        .iter()
        .zip(&res.regrets)
        .flat_map(|(p, r)| r.iter().enumerate().map(move |(k, v)| vec![p.horizon.to_string(), k.to_string(), f(*v)]))
        .collect();
    out.csv("regret_trials.csv", "mcb.regret_trials.v1", &["horizon", "trial", "regret"], &rows)?;
    out.json(
        "regret_scaling_summary.json",
        &json!({
            "schema": "mcb.regret_scaling.v1",
            "gamma": res.gamma,
            "fit": res.fit,
            "ratio_last_first": res.ratio_last_first,
            "expected_ratio": res.expected_ratio,
        }),
    )
}

#[derive(Serialize)]
struct NamedReport {
    name: String,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<InferenceReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    estimate: Option<f64>,
}

fn infer_forms(ctx: &InferenceContext, forms: &[FormSpec], alpha: f64) -> Result<Vec<NamedReport>> {
    forms
        .iter()
        .map(|form| match ctx.infer(&form.terms, form.mode, alpha) {
            Ok(rep) => Ok(NamedReport {
                name: form.name.clone(),
                status: "ok",
                report: Some(rep),
                estimate: None,
            }),
            Err(Error::IllPosed { estimate }) => Ok(NamedReport {
                name: form.name.clone(),
                status: "ill_posed",
                report: None,
                estimate: Some(estimate),
            }),
            Err(e) => Err(e),
        })
        .collect()
}

fn resolve_path(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn cmd_replay(config: &ConfigFile, base: &Path, out: &mut Outputs) -> Result<()> {
    let s = require(&config.replay, "replay")?;
    let shape = LogShape {
        d1: s.d1,
        d2: s.d2,
        arms: s.arms,
    };
    let records = ingest_log(&resolve_path(base, &s.log), &s.columns, shape)?;
    let t0 = match s.phase1 {
        PhaseOneSpec::Fixed(t0) => t0,
        PhaseOneSpec::Scaled { c0 } => (c0 * (s.horizon as f64).powf(1.0 - s.gamma)).ceil() as usize,
    };
    let mut bandit = BanditConfig {
        d1: s.d1,
        d2: s.d2,
        rank: s.rank,
        arms: s.arms,
        horizon: s.horizon,
        phase1_len: t0,
        gamma: s.gamma,
        epsilon: s.epsilon,
        c2: s.c2,
        eta: 0.0,
        seed: config.seed,
        sampling_weights: None,
    };
    bandit.validate()?;

    let (arms, warmup) = match &s.init {
        ReplayInit::Checkpoint(p) => (Checkpoint::load(&resolve_path(base, p))?.learner.arms, 0),
        ReplayInit::Warmup { records: n, options } => {
            if *n >= records.len() {
                return Err(Error::Config(format!(
                    "warmup of {n} records leaves nothing of a {}-record log to replay",
                    records.len()
                )));
            }
            let obs: Vec<Observation> = records[..*n]
                .iter()
                .map(|r| Observation {
                    cell: r.cell,
                    arm: r.action,
                    reward: r.reward,
                })
                .collect();
            let mats = soft_impute_init(&obs, s.d1, s.d2, s.arms, s.rank, options)?;
            (LearnerState::init_from_matrices(&mats, bandit.clone())?.arms, *n)
        }
    };
    bandit.eta = match s.step {
        StepSpec::Fixed(eta) => eta,
        StepSpec::ScaledFromInit { c1 } => {
            let mut top = 0.0f64;
            for a in &arms {
                top = top.max(thin_svd(&a.product(), 1)?.lambda_max());
            }
            if !(top > 0.0) {
                return Err(Error::Numerical("initial estimates are all zero".into()));
            }
            scaled_step_size(c1, s.d1, s.d2, s.horizon, s.gamma, top)
        }
        StepSpec::Scaled { .. } => {
            return Err(Error::Config(
                "replay has no ground truth; use `fixed` or `scaled_from_init` step".into(),
            ))
        }
    };
    let learner = LearnerState::from_factors(arms, bandit)?;
    let res = replay_run(&records[warmup..], learner, s.debias, &mut trial_rng(config.seed, 0))?;
    let band = match s.band {
        Some([lo, hi]) if res.stats.matched > 0 => Some(target_band_metric(&res.stats.matched_outcomes, lo, hi)?),
        _ => None,
    };
    let st = &res.stats;
    out.json(
        "replay_stats.json",
        &json!({
            "schema": "mcb.replay.v1",
            "log_records": records.len(),
            "warmup_records": warmup,
            "total_records": st.total_records,
            "matched": st.matched,
            "skipped": st.skipped,
            "skipped_after_horizon": st.skipped_after_horizon,
            "total_per_arm": st.total_per_arm,
            "matched_per_arm": st.matched_per_arm,
            "skipped_per_arm": st.skipped_per_arm,
            "band": s.band,
            "band_fraction": band,
            "diagnostics": res.learner.diagnostics,
        }),
    )?;
    if s.debias && !s.forms.is_empty() {
        let db = res.debias.as_ref().expect("debias requested");
        let ctx = InferenceContext::new(db, &res.learner.arms, &res.learner.config)?;
        let reports = infer_forms(&ctx, &s.forms, s.alpha)?;
        out.json("inference.json", &json!({ "schema": "mcb.inference_set.v1", "reports": reports }))?;
    }
    out.checkpoint("checkpoint.json", &Checkpoint::new(res.learner, res.debias))
}

fn cmd_infer(config: &ConfigFile, base: &Path, out: &mut Outputs) -> Result<()> {
    let s = require(&config.infer, "infer")?;
    if s.forms.is_empty() {
        return Err(Error::Config("[infer] lists no forms".into()));
    }
    let cp = Checkpoint::load(&resolve_path(base, &s.checkpoint))?;
    let db = cp
        .debias
        .as_ref()
        .ok_or_else(|| Error::Config("checkpoint has no debiasing state".into()))?;
    let ctx = InferenceContext::new(db, &cp.learner.arms, &cp.learner.config)?;
    let reports = infer_forms(&ctx, &s.forms, s.alpha)?;
    out.json("inference.json", &json!({ "schema": "mcb.inference_set.v1", "reports": reports }))
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numerical => 4,
    }
}

/// Parses `args`, runs, reports errors on stderr and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("mcb: {e}");
            exit_code(&e)
        }
    }
}
