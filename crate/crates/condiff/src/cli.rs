//! Command-line surface: dataset generation, training, sampling, paired
//! experiments, and the conservativity audit, one subcommand per pipeline
//! step.
//!
//! Every command follows the same conventions: configuration is a JSON file
//! (`--config`) merged over built-in defaults, then dotted-path `--set
//! key=value` overrides, then flag shortcuts (flags win); the effective
//! config is echoed to `<out>/config.json` before any work starts, so
//! `--config <out>/config.json` reruns the command; a non-empty output
//! directory is refused unless `--force`. Exit codes: 0 success, 1 usage
//! error, 2 numerical abort.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::combine::CombineConfig;
use crate::conserve::{self, draw_eval_points, draw_probes, ScoreModel};
use crate::diffusion::{sample_batch, ScheduleFamily};
use crate::evalsuite;
use crate::scorenet::{InjectionMode, ModelConfig, ParamSet};
use crate::synthdata::{
    gen_biased_pairs, gen_multi_condition, gen_rebalanced_pairs, read_dataset, write_dataset,
    write_multi_dataset, CondType, Condition, ConditionedSample, DatasetHeader, SyntheticTask,
};
use crate::trainer::{self, Stage, TrainConfig, TrainData, TrainState};
use crate::{Error, Result};

/// Progress lines go to stderr every this many steps.
const PROGRESS_EVERY: usize = 200;

// ---- argument surface ----

#[derive(Parser, Debug)]
#[command(
    name = "condiff",
    version,
    about = "Conditional score-model sandbox: synthetic data, two-stage branch training, \
             sampling, paired experiments, and conservativity audits."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub shared: Shared,
}

/// Flags every command understands.
#[derive(Args, Debug, Default)]
pub struct Shared {
    /// JSON config file; merged over defaults before overrides and flags.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Dotted-path config override, e.g. --set train.lr=3e-4 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory; the effective config is echoed here first.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Shortcut for the command's main seed field.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Write into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset file.
    GenData(GenDataArgs),
    /// Train the base denoiser or a control branch.
    Train(TrainArgs),
    /// Draw samples from trained checkpoints.
    Sample(SampleArgs),
    /// Run a paired comparison experiment and write its report.
    Eval(EvalArgs),
    /// Audit score-field conservativity of a branch checkpoint.
    Audit(AuditArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Which dataset family to write.
    #[arg(long, value_enum)]
    pub kind: Option<DataKind>,
    /// Record count (ground-truth pairs for `multi`, two records each).
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Stage to run: base, 1, or 2.
    #[arg(long, value_parser = parse_stage)]
    pub stage: Option<Stage>,
    /// Checkpoint to build on (previous stage) or resume (same stage).
    #[arg(long, value_name = "FILE")]
    pub init: Option<PathBuf>,
    /// Dataset file; on resume, read from here instead of the recorded path.
    #[arg(long, value_name = "FILE")]
    pub dataset: Option<PathBuf>,
    /// Total step target; a resumed run trains until it reaches this.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Weight on the conservativity penalty (stage 2 only).
    #[arg(long, value_name = "COEF")]
    pub qc_coef: Option<f64>,
    /// How branch features enter the decoder: minimal-impact or vanilla-add.
    #[arg(long, value_parser = kebab::<InjectionMode>)]
    pub mode: Option<InjectionMode>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    /// Checkpoint to sample from (repeat to combine control branches).
    #[arg(long = "checkpoint", value_name = "FILE")]
    pub checkpoints: Vec<PathBuf>,
    /// Condition JSON file ({"mask":[...],"values":[...]}), one per
    /// checkpoint; omit for fully silent conditions.
    #[arg(long = "condition", value_name = "FILE")]
    pub conditions: Vec<PathBuf>,
    /// How branch features enter the decoder: minimal-impact or vanilla-add.
    #[arg(long, value_parser = kebab::<InjectionMode>)]
    pub mode: Option<InjectionMode>,
    /// Sample count.
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Which experiment to run.
    #[arg(long, value_enum)]
    pub experiment: Option<Experiment>,
    /// Checkpoints in the experiment's documented order (repeatable).
    #[arg(long = "checkpoint", value_name = "FILE")]
    pub checkpoints: Vec<PathBuf>,
    /// Held-out conditioned pairs (asym experiment).
    #[arg(long, value_name = "FILE")]
    pub dataset: Option<PathBuf>,
    /// Samples per metric.
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Args, Debug)]
pub struct AuditArgs {
    /// Branch checkpoint to audit.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Dataset supplying evaluation states and conditions.
    #[arg(long, value_name = "FILE")]
    pub dataset: Option<PathBuf>,
    /// Number of audit batches (one report line each).
    #[arg(long)]
    pub batches: Option<usize>,
    /// Evaluation points per batch.
    #[arg(long)]
    pub points: Option<usize>,
    /// Probe vectors per batch.
    #[arg(long)]
    pub probes: Option<usize>,
}

fn parse_stage(s: &str) -> std::result::Result<Stage, String> {
    match s {
        "base" => Ok(Stage::Base),
        "1" | "one" => Ok(Stage::One),
        "2" | "two" => Ok(Stage::Two),
        _ => Err("expected base, 1, or 2".into()),
    }
}

/// Parses a kebab-case enum value the same way config files spell it.
fn kebab<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(Value::String(s.to_string()))
        .map_err(|_| format!("unrecognized value '{s}'"))
}

// ---- per-command configs ----

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    /// Silent conditions overrepresented, their targets from a narrow cluster.
    Biased,
    /// Conditions resampled so silence carries no location information.
    Rebalanced,
    /// One ground-truth row with one type-a and one type-b condition each.
    Multi,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GenDataConfig {
    pub kind: DataKind,
    /// Records for biased/rebalanced; ground-truth pairs for multi.
    pub n: usize,
    pub seed: u64,
    /// Condition family for biased/rebalanced records.
    pub cond_type: CondType,
    pub task: SyntheticTask,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig {
            kind: DataKind::Rebalanced,
            n: 10_000,
            seed: 0,
            cond_type: CondType::Full,
            task: SyntheticTask::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainCmdConfig {
    pub model: ModelConfig,
    pub family: ScheduleFamily,
    pub horizon: usize,
    /// Condition family a fresh stage-1 branch will answer.
    pub cond_type: CondType,
    /// Checkpoint that seeds this run: a base run for stage 1, a stage-1 run
    /// for stage 2; a same-stage checkpoint resumes instead.
    pub init: Option<PathBuf>,
    /// Stream seed for fresh parameter draws.
    pub init_seed: u64,
    pub train: TrainConfig,
}

impl Default for TrainCmdConfig {
    fn default() -> Self {
        TrainCmdConfig {
            model: ModelConfig::default(),
            family: ScheduleFamily::default(),
            horizon: 200,
            cond_type: CondType::Full,
            init: None,
            init_seed: 0,
            train: TrainConfig::recipe(Stage::One),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleCmdConfig {
    pub checkpoints: Vec<PathBuf>,
    /// Condition files, one per checkpoint; empty means fully silent.
    pub conditions: Vec<PathBuf>,
    pub mode: InjectionMode,
    pub combine: CombineConfig,
    pub n: usize,
    pub seed: u64,
}

impl Default for SampleCmdConfig {
    fn default() -> Self {
        SampleCmdConfig {
            checkpoints: Vec::new(),
            conditions: Vec::new(),
            mode: InjectionMode::default(),
            combine: CombineConfig::default(),
            n: 256,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    /// Controlled-region variance under silent conditions: biased-trained
    /// vs rebalanced-trained branch. Checkpoints: BIASED REBALANCED.
    SilentTv,
    /// Control-path symmetry defect and denoising loss before vs after the
    /// penalty stage. Checkpoints: STAGE1 STAGE2; needs --dataset.
    Asym,
    /// Two combined branches, minimal-impact vs vanilla-add pipeline.
    /// Checkpoints: BRANCH_A BRANCH_B.
    Multi,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalCmdConfig {
    pub experiment: Experiment,
    /// In the order the experiment documents.
    pub checkpoints: Vec<PathBuf>,
    /// Held-out conditioned pairs (asym).
    pub dataset: Option<PathBuf>,
    /// Samples per metric (silent-tv, multi).
    pub n: usize,
    /// Evaluation points (asym).
    pub points: usize,
    /// Held-out denoising-loss draws (asym).
    pub dsm_draws: usize,
    pub seed: u64,
    /// Per-seed replications (multi).
    pub seeds: Vec<u64>,
    /// Task whose condition layouts the multi experiment draws from.
    pub task: SyntheticTask,
}

impl Default for EvalCmdConfig {
    fn default() -> Self {
        EvalCmdConfig {
            experiment: Experiment::SilentTv,
            checkpoints: Vec::new(),
            dataset: None,
            n: 2000,
            points: 50,
            dsm_draws: 2000,
            seed: 0,
            seeds: vec![0, 1, 2],
            task: SyntheticTask::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditCmdConfig {
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub batches: usize,
    pub points: usize,
    pub probes: usize,
    pub seed: u64,
}

impl Default for AuditCmdConfig {
    fn default() -> Self {
        AuditCmdConfig {
            checkpoint: None,
            dataset: None,
            batches: 4,
            points: 25,
            probes: 64,
            seed: 0,
        }
    }
}

// ---- config plumbing ----

/// Splits `key=value`; the value is JSON if it parses, a bare string
/// otherwise (quote it to force a string that looks like JSON).
fn parse_override(s: &str) -> Result<(String, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{s}' must look like key=value")))?;
    let raw = raw.trim();
    let val = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.trim().to_string(), val))
}

/// Merges `src` over `dst`, recursing through objects. Keys absent from
/// `dst` are rejected: the defaults serialize every valid key, so an unknown
/// one is a typo.
fn merge_known(dst: &mut Value, src: Value, trail: &mut Vec<String>) -> Result<()> {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                let Some(slot) = d.get_mut(&k) else {
                    return Err(Error::Config(format!(
                        "unknown config key '{}'",
                        dotted(trail, &k)
                    )));
                };
                trail.push(k);
                merge_known(slot, v, trail)?;
                trail.pop();
            }
            Ok(())
        }
        (d, s) => {
            *d = s;
            Ok(())
        }
    }
}

/// Replaces the value at a dotted path; every segment must already exist.
fn set_path(root: &mut Value, key: &str, val: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key '{key}'")));
    }
    let (last, init) = parts.split_last().expect("split checked nonempty");
    let mut cur = root;
    for (i, part) in init.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| {
            Error::Config(format!("'{}' is not a config section", parts[..i].join(".")))
        })?;
        cur = obj.get_mut(*part).ok_or_else(|| {
            Error::Config(format!("unknown config key '{}'", parts[..=i].join(".")))
        })?;
    }
    let obj = cur
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("'{}' is not a config section", init.join("."))))?;
    let slot = obj
        .get_mut(*last)
        .ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))?;
    *slot = val;
    Ok(())
}

fn dotted(trail: &[String], last: &str) -> String {
    trail.iter().map(String::as_str).chain([last]).collect::<Vec<_>>().join(".")
}

/// Defaults ← config file ← --set overrides, rejecting unknown keys at every
/// layer. Flag shortcuts are applied by the caller afterwards.
fn effective_config<T>(defaults: T, shared: &Shared) -> Result<T>
where
    T: Serialize + DeserializeOwned,
{
    let mut v = serde_json::to_value(&defaults)
        .map_err(|e| Error::Config(format!("defaults serialize: {e}")))?;
    if let Some(path) = &shared.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| Error::format(path, format!("config parse: {e}")))?;
        merge_known(&mut v, file, &mut Vec::new())?;
    }
    for s in &shared.set {
        let (key, val) = parse_override(s)?;
        set_path(&mut v, &key, val)?;
    }
    serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
}

/// Resolves the output directory, refuses a non-empty one without `--force`,
/// and echoes the effective config into it before anything else is written.
fn prepare_out<T: Serialize>(shared: &Shared, cfg: &T) -> Result<PathBuf> {
    let out = shared
        .out
        .as_ref()
        .ok_or_else(|| Error::Config("every command writes artifacts; pass --out DIR".into()))?;
    if out.exists() {
        let mut entries = fs::read_dir(out).map_err(|e| Error::io(out, e))?;
        if entries.next().is_some() && !shared.force {
            return Err(Error::Invalid(format!(
                "output directory {} is not empty (pass --force to overwrite)",
                out.display()
            )));
        }
    } else {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    write_json(&out.join("config.json"), cfg)?;
    Ok(out.clone())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(path, format!("serialize: {e}")))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ---- shared dataset plumbing ----

/// Records a branch of the given condition family trains or audits on: a
/// multi dataset is filtered to the matching half, a single-family dataset
/// must match outright.
fn records_for(
    path: &Path,
    header: &DatasetHeader,
    records: Vec<ConditionedSample>,
    want: CondType,
) -> Result<Vec<ConditionedSample>> {
    if header.kind == "multi" {
        let kept: Vec<ConditionedSample> =
            records.into_iter().filter(|r| r.cond_type == want).collect();
        if kept.is_empty() {
            return Err(Error::Invalid(format!(
                "{} holds no {want:?} records",
                path.display()
            )));
        }
        Ok(kept)
    } else if header.cond_type != want {
        Err(Error::Invalid(format!(
            "{} holds {:?} conditions but the branch expects {want:?}",
            path.display(),
            header.cond_type
        )))
    } else {
        Ok(records)
    }
}

// ---- commands ----

pub fn cmd_gen_data(shared: &Shared, args: &GenDataArgs) -> Result<()> {
    let mut cfg: GenDataConfig = effective_config(GenDataConfig::default(), shared)?;
    if let Some(k) = args.kind {
        cfg.kind = k;
    }
    if let Some(n) = args.n {
        cfg.n = n;
    }
    if let Some(s) = shared.seed {
        cfg.seed = s;
    }
    cfg.task.validate()?;
    if cfg.n == 0 {
        return Err(Error::Config("n must be positive".into()));
    }

    let out = prepare_out(shared, &cfg)?;
    let path = out.join("dataset.bin");
    let mut header = DatasetHeader {
        kind: String::new(),
        dim: cfg.task.dim,
        count: cfg.n,
        seed: cfg.seed,
        task: cfg.task.clone(),
        cond_type: cfg.cond_type,
    };
    match cfg.kind {
        DataKind::Biased => {
            header.kind = "biased".into();
            let samples = gen_biased_pairs(&cfg.task, cfg.cond_type, cfg.n, cfg.seed);
            write_dataset(&path, &header, &samples)?;
        }
        DataKind::Rebalanced => {
            header.kind = "rebalanced".into();
            let samples = gen_rebalanced_pairs(&cfg.task, cfg.cond_type, cfg.n, cfg.seed);
            write_dataset(&path, &header, &samples)?;
        }
        DataKind::Multi => {
            header.kind = "multi".into();
            header.count = 2 * cfg.n;
            let pairs = gen_multi_condition(&cfg.task, cfg.n, cfg.seed);
            write_multi_dataset(&path, &header, &pairs)?;
        }
    }
    eprintln!("wrote {} ({} records)", path.display(), header.count);
    Ok(())
}

pub fn cmd_train(shared: &Shared, args: &TrainArgs) -> Result<()> {
    let stage_hint = args.stage.unwrap_or(Stage::One);
    let defaults =
        TrainCmdConfig { train: TrainConfig::recipe(stage_hint), ..TrainCmdConfig::default() };
    let mut cfg: TrainCmdConfig = effective_config(defaults, shared)?;
    if let Some(s) = args.stage {
        cfg.train.stage = s;
    }
    if let Some(p) = &args.init {
        cfg.init = Some(p.clone());
    }
    if let Some(p) = &args.dataset {
        cfg.train.dataset = Some(p.clone());
    }
    if let Some(n) = args.steps {
        cfg.train.steps = n;
    }
    if let Some(c) = args.qc_coef {
        cfg.train.conserve_coef = c;
    }
    if let Some(m) = args.mode {
        cfg.train.mode = m;
    }
    if let Some(s) = shared.seed {
        cfg.train.seed = s;
    }
    cfg.train.validate()?;
    let out = prepare_out(shared, &cfg)?;

    // A same-stage checkpoint resumes with its recorded recipe; a
    // previous-stage checkpoint starts the next stage under `cfg.train`.
    let (mut state, resumed) = match (&cfg.init, cfg.train.stage) {
        (None, Stage::Base) => (
            TrainState::new_base(
                cfg.model.clone(),
                cfg.family,
                cfg.horizon,
                cfg.train.clone(),
                cfg.init_seed,
            )?,
            false,
        ),
        (None, Stage::One) => {
            return Err(Error::Invalid(
                "stage 1 builds on a base run; pass --init BASE_CHECKPOINT".into(),
            ))
        }
        (None, Stage::Two) => {
            return Err(Error::Invalid(
                "stage 2 continues a stage-1 run; pass --init STAGE1_CHECKPOINT".into(),
            ))
        }
        (Some(path), want) => {
            let loaded = trainer::load_checkpoint(path)?;
            if loaded.train.stage == want {
                (loaded, true)
            } else {
                let next = match want {
                    Stage::Base => {
                        return Err(Error::Invalid(
                            "a base run starts fresh; drop --init or pass a base checkpoint \
                             to resume"
                                .into(),
                        ))
                    }
                    Stage::One => {
                        TrainState::new_branch(&loaded, cfg.train.clone(), cfg.cond_type, cfg.init_seed)?
                    }
                    Stage::Two => loaded.stage2(cfg.train.clone())?,
                };
                (next, false)
            }
        }
    };

    // `--steps` is the total step target, so rerunning a finished checkpoint
    // is a no-op and `--steps 0` copies it.
    let to_run = cfg.train.steps.saturating_sub(state.step);
    let data = if to_run == 0 {
        None
    } else {
        let flagged = if resumed { args.dataset.as_deref() } else { None };
        Some(load_train_data(&state, flagged)?)
    };

    let log_path = out.join("train_log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let mut log_io: Option<std::io::Error> = None;
    let target = state.step + to_run;
    let run_result = match &data {
        None => Ok(()),
        Some(data) => trainer::train_for(&mut state, data, to_run, &mut |rec| {
            if log_io.is_none() {
                if let Err(e) = writeln!(log, "{}", trainer::log_line(rec)) {
                    log_io = Some(e);
                }
            }
            if rec.step % PROGRESS_EVERY == 0 || rec.step == target {
                eprintln!(
                    "step {}/{target}: dsm {:.6} qc {:.6}",
                    rec.step, rec.dsm_loss, rec.qc_simple
                );
            }
        }),
    };
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    if let Some(e) = log_io {
        return Err(Error::io(&log_path, e));
    }

    // On a numerical abort the state has rolled back to the last completed
    // step; retain that checkpoint, then surface the abort.
    let ckpt = out.join("checkpoint.bin");
    trainer::save_checkpoint(&state, &ckpt)?;
    run_result?;
    eprintln!("saved {} at step {}", ckpt.display(), state.step);
    Ok(())
}

fn load_train_data(state: &TrainState, flagged: Option<&Path>) -> Result<TrainData> {
    let recorded = state.train.dataset.as_deref();
    let path = flagged.or(recorded).ok_or_else(|| {
        Error::Missing(
            "training needs a dataset; write one with `condiff gen-data` and pass --dataset"
                .into(),
        )
    })?;
    let (header, records) = read_dataset(path)?;
    match state.train.stage {
        Stage::Base => Ok(TrainData::Unconditional(
            records.into_iter().map(|r| r.x0).collect(),
        )),
        Stage::One | Stage::Two => {
            let want = state
                .cond_type
                .ok_or_else(|| Error::Invalid("branch state names no condition type".into()))?;
            Ok(TrainData::Conditioned(records_for(path, &header, records, want)?))
        }
    }
}

pub fn cmd_sample(shared: &Shared, args: &SampleArgs) -> Result<()> {
    let mut cfg: SampleCmdConfig = effective_config(SampleCmdConfig::default(), shared)?;
    if !args.checkpoints.is_empty() {
        cfg.checkpoints = args.checkpoints.clone();
    }
    if !args.conditions.is_empty() {
        cfg.conditions = args.conditions.clone();
    }
    if let Some(m) = args.mode {
        cfg.mode = m;
    }
    if let Some(n) = args.n {
        cfg.n = n;
    }
    if let Some(s) = shared.seed {
        cfg.seed = s;
    }
    if cfg.checkpoints.is_empty() {
        return Err(Error::Config("sample needs at least one --checkpoint".into()));
    }
    if cfg.n == 0 {
        return Err(Error::Config("n must be positive".into()));
    }

    let out = prepare_out(shared, &cfg)?;
    let states: Vec<TrainState> = cfg
        .checkpoints
        .iter()
        .map(|p| trainer::load_checkpoint(p))
        .collect::<Result<_>>()?;
    let first = &states[0];
    let d = first.model.data_dim;
    for other in &states[1..] {
        evalsuite::check_same_frame(first, other, "sample")?;
    }

    // A lone base checkpoint samples unconditionally; otherwise every
    // checkpoint must carry a control branch.
    let unconditional = states.len() == 1 && first.branch.is_none();
    if unconditional && !cfg.conditions.is_empty() {
        return Err(Error::Invalid(
            "a base checkpoint samples unconditionally; drop --condition".into(),
        ));
    }
    let branches: Vec<(&ParamSet, Condition)> = if unconditional {
        Vec::new()
    } else {
        let conditions: Vec<Condition> = if cfg.conditions.is_empty() {
            vec![Condition::silent(d); states.len()]
        } else if cfg.conditions.len() == states.len() {
            cfg.conditions.iter().map(|p| read_condition(p, d)).collect::<Result<_>>()?
        } else {
            return Err(Error::Config(
                "pass one --condition per --checkpoint (or none for all-silent)".into(),
            ));
        };
        states
            .iter()
            .zip(cfg.checkpoints.iter())
            .map(|(s, p)| {
                s.branch.as_ref().ok_or_else(|| {
                    Error::Invalid(format!(
                        "{} has no control branch; combined sampling takes branch checkpoints",
                        p.display()
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .zip(conditions)
            .collect()
    };

    for (i, (_, cond)) in branches.iter().enumerate() {
        write_json(&out.join(format!("condition_{i}.json")), cond)?;
    }

    // Combined controls must merge before they inject; verify on a traced
    // forward pass before sampling.
    if branches.len() >= 2 && cfg.mode == InjectionMode::MinimalImpact {
        let events = evalsuite::pipeline_events(
            &first.model,
            &first.base,
            branches.clone(),
            cfg.mode,
            cfg.combine,
            first.horizon,
        )?;
        evalsuite::check_combine_before_inject(&events)?;
    }

    let schedule = first.schedule()?;
    let predict =
        evalsuite::noise_predictor(&first.model, &first.base, branches, cfg.mode, cfg.combine);
    let samples = sample_batch(&schedule, &predict, d, cfg.n, cfg.seed)?;

    let names: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    let header: Vec<&str> = names.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> =
        samples.iter().map(|row| row.iter().map(f64::to_string).collect()).collect();
    let csv = out.join("samples.csv");
    evalsuite::write_csv(&csv, &header, &rows)?;
    eprintln!("wrote {} ({} samples)", csv.display(), cfg.n);
    Ok(())
}

fn read_condition(path: &Path, d: usize) -> Result<Condition> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cond: Condition = serde_json::from_str(&text)
        .map_err(|e| Error::format(path, format!("condition parse: {e}")))?;
    if cond.mask.len() != d || cond.values.len() != d {
        return Err(Error::Invalid(format!(
            "{}: condition must have {d} mask and value entries",
            path.display()
        )));
    }
    for (m, v) in cond.mask.iter().zip(&cond.values) {
        if *m != 0.0 && *m != 1.0 {
            return Err(Error::Invalid(format!(
                "{}: mask entries must be 0 or 1",
                path.display()
            )));
        }
        if !v.is_finite() || (*m == 0.0 && *v != 0.0) {
            return Err(Error::Invalid(format!(
                "{}: values must be finite and zero outside the mask",
                path.display()
            )));
        }
    }
    Ok(cond)
}

pub fn cmd_eval(shared: &Shared, args: &EvalArgs) -> Result<()> {
    let mut cfg: EvalCmdConfig = effective_config(EvalCmdConfig::default(), shared)?;
    if let Some(e) = args.experiment {
        cfg.experiment = e;
    }
    if !args.checkpoints.is_empty() {
        cfg.checkpoints = args.checkpoints.clone();
    }
    if let Some(p) = &args.dataset {
        cfg.dataset = Some(p.clone());
    }
    if let Some(n) = args.n {
        cfg.n = n;
    }
    if let Some(s) = shared.seed {
        cfg.seed = s;
    }

    let out = prepare_out(shared, &cfg)?;
    let report = match cfg.experiment {
        Experiment::SilentTv => {
            let [biased, rebalanced] =
                two_checkpoints(&cfg.checkpoints, "silent-tv", "BIASED REBALANCED")?;
            evalsuite::run_single_silent_tv(&biased, &rebalanced, cfg.n, cfg.seed)?
        }
        Experiment::Asym => {
            let [stage1, stage2] = two_checkpoints(&cfg.checkpoints, "asym", "STAGE1 STAGE2")?;
            let path = cfg.dataset.as_ref().ok_or_else(|| {
                Error::Missing("the asym experiment needs held-out pairs; pass --dataset".into())
            })?;
            let (header, records) = read_dataset(path)?;
            let want = stage1
                .cond_type
                .ok_or_else(|| Error::Invalid("branch state names no condition type".into()))?;
            let pairs = records_for(path, &header, records, want)?;
            evalsuite::run_asym_two_stage(
                &stage1,
                &stage2,
                &pairs,
                cfg.points,
                cfg.dsm_draws,
                cfg.seed,
            )?
        }
        Experiment::Multi => {
            let [branch_a, branch_b] =
                two_checkpoints(&cfg.checkpoints, "multi", "BRANCH_A BRANCH_B")?;
            evalsuite::run_multi_combo(&branch_a, &branch_b, &cfg.task, &cfg.seeds, cfg.n)?
        }
    };

    write_json(&out.join("report.json"), &report)?;
    let tables = evalsuite::report_tables(&report);
    for (name, header, rows) in &tables {
        evalsuite::write_csv(&out.join(format!("{name}.csv")), header, rows)?;
    }
    eprintln!("wrote report.json and {} table(s) to {}", tables.len(), out.display());
    Ok(())
}

fn two_checkpoints(paths: &[PathBuf], what: &str, order: &str) -> Result<[TrainState; 2]> {
    if paths.len() != 2 {
        return Err(Error::Config(format!(
            "the {what} experiment takes exactly two checkpoints: --checkpoint {} --checkpoint {}",
            order.split(' ').next().unwrap_or(""),
            order.split(' ').nth(1).unwrap_or(""),
        )));
    }
    Ok([trainer::load_checkpoint(&paths[0])?, trainer::load_checkpoint(&paths[1])?])
}

pub fn cmd_audit(shared: &Shared, args: &AuditArgs) -> Result<()> {
    let mut cfg: AuditCmdConfig = effective_config(AuditCmdConfig::default(), shared)?;
    if let Some(p) = &args.checkpoint {
        cfg.checkpoint = Some(p.clone());
    }
    if let Some(p) = &args.dataset {
        cfg.dataset = Some(p.clone());
    }
    if let Some(b) = args.batches {
        cfg.batches = b;
    }
    if let Some(p) = args.points {
        cfg.points = p;
    }
    if let Some(p) = args.probes {
        cfg.probes = p;
    }
    if let Some(s) = shared.seed {
        cfg.seed = s;
    }
    let ckpt = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| Error::Config("audit needs --checkpoint".into()))?;
    let ds = cfg.dataset.clone().ok_or_else(|| {
        Error::Missing("audit draws evaluation states from a dataset; pass --dataset".into())
    })?;
    if cfg.batches == 0 || cfg.points == 0 || cfg.probes == 0 {
        return Err(Error::Config("batches, points, and probes must be positive".into()));
    }

    let out = prepare_out(shared, &cfg)?;
    let state = trainer::load_checkpoint(&ckpt)?;
    let branch = state
        .branch
        .as_ref()
        .ok_or_else(|| Error::Invalid("audit needs a branch checkpoint (stage 1 or 2)".into()))?;
    let want = state
        .cond_type
        .ok_or_else(|| Error::Invalid("branch checkpoint names no condition type".into()))?;
    let (header, records) = read_dataset(&ds)?;
    let records = records_for(&ds, &header, records, want)?;
    let rows: Vec<Vec<f64>> = records.iter().map(|r| r.x0.clone()).collect();
    let schedule = state.schedule()?;
    let d = state.model.data_dim;

    let path = out.join("audit.jsonl");
    let mut file = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
    for b in 0..cfg.batches {
        let batch_seed = cfg.seed.wrapping_add(b as u64);
        let points = draw_eval_points(&schedule, &rows, cfg.points, batch_seed)?;
        let probes = draw_probes(d, cfg.probes, batch_seed);
        let cond = &records[b % records.len()].condition;
        let model = ScoreModel {
            config: &state.model,
            base: &state.base,
            branches: vec![(branch, cond)],
            mode: state.train.mode,
            combine: state.train.combine,
        };
        let report = conserve::audit(&model, &schedule, &points, &probes)?;
        let line = serde_json::to_string(&report)
            .map_err(|e| Error::format(&path, format!("report serialize: {e}")))?;
        writeln!(file, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    file.flush().map_err(|e| Error::io(&path, e))?;
    eprintln!("wrote {} ({} batches)", path.display(), cfg.batches);
    Ok(())
}

// ---- entry point ----

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(args) => cmd_gen_data(&cli.shared, args),
        Command::Train(args) => cmd_train(&cli.shared, args),
        Command::Sample(args) => cmd_sample(&cli.shared, args),
        Command::Eval(args) => cmd_eval(&cli.shared, args),
        Command::Audit(args) => cmd_audit(&cli.shared, args),
    }
}

/// Parses the process arguments and runs the command. Exit codes: 0 success
/// (including --help/--version), 1 usage error, 2 numerical abort.
pub fn run() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Numeric { .. }) { 2 } else { 1 })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shared(config: Option<PathBuf>, set: &[&str]) -> Shared {
        Shared {
            config,
            set: set.iter().map(|s| s.to_string()).collect(),
            out: None,
            seed: None,
            force: false,
        }
    }

    #[test]
    fn overrides_parse_json_then_fall_back_to_strings() {
        assert_eq!(parse_override("a.b=3e-4").unwrap().1, serde_json::json!(3e-4));
        assert_eq!(parse_override("k=[1,2]").unwrap().1, serde_json::json!([1, 2]));
        assert_eq!(parse_override("k=true").unwrap().1, serde_json::json!(true));
        assert_eq!(
            parse_override("k=data.bin").unwrap().1,
            Value::String("data.bin".into())
        );
        assert!(parse_override("no-equals").is_err());
    }

    #[test]
    fn set_path_replaces_nested_values_and_rejects_unknown_keys() {
        let mut v = serde_json::json!({"train": {"lr": 1e-3, "steps": 100}, "n": 5});
        set_path(&mut v, "train.lr", serde_json::json!(0.5)).unwrap();
        assert_eq!(v["train"]["lr"], serde_json::json!(0.5));
        let err = set_path(&mut v, "train.typo", serde_json::json!(1)).unwrap_err();
        assert!(err.to_string().contains("train.typo"), "{err}");
        let err = set_path(&mut v, "n.deep", serde_json::json!(1)).unwrap_err();
        assert!(err.to_string().contains("not a config section"), "{err}");
    }

    #[test]
    fn merge_recurses_and_rejects_unknown_keys_with_full_path() {
        let mut dst = serde_json::json!({"train": {"lr": 1e-3, "steps": 100}, "n": 5});
        merge_known(
            &mut dst,
            serde_json::json!({"train": {"steps": 7}}),
            &mut Vec::new(),
        )
        .unwrap();
        assert_eq!(dst["train"]["steps"], serde_json::json!(7));
        assert_eq!(dst["train"]["lr"], serde_json::json!(1e-3));
        let err = merge_known(
            &mut dst,
            serde_json::json!({"train": {"typo": 1}}),
            &mut Vec::new(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("train.typo"), "{err}");
    }

    #[test]
    fn effective_config_layers_defaults_file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("cfg.json");
        fs::write(&file, r#"{"n": 42, "seed": 9}"#).unwrap();
        let cfg: GenDataConfig =
            effective_config(GenDataConfig::default(), &shared(Some(file), &["n=7"])).unwrap();
        assert_eq!(cfg.n, 7, "override beats file");
        assert_eq!(cfg.seed, 9, "file beats default");
        assert_eq!(cfg.kind, DataKind::Rebalanced, "default survives");
    }

    #[test]
    fn unknown_file_key_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("cfg.json");
        fs::write(&file, r#"{"nn": 42}"#).unwrap();
        let err = effective_config::<GenDataConfig>(
            GenDataConfig::default(),
            &shared(Some(file), &[]),
        )
        .unwrap_err();
        assert!(err.to_string().contains("nn"), "{err}");
    }

    #[test]
    fn stage_flag_accepts_numerals_and_names() {
        assert_eq!(parse_stage("base").unwrap(), Stage::Base);
        assert_eq!(parse_stage("1").unwrap(), Stage::One);
        assert_eq!(parse_stage("one").unwrap(), Stage::One);
        assert_eq!(parse_stage("2").unwrap(), Stage::Two);
        assert!(parse_stage("3").is_err());
    }

    #[test]
    fn prepare_out_refuses_nonempty_without_force() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        fs::create_dir(&out).unwrap();
        fs::write(out.join("stale.txt"), "x").unwrap();
        let mut sh = shared(None, &[]);
        sh.out = Some(out.clone());
        let err = prepare_out(&sh, &GenDataConfig::default()).unwrap_err();
        assert!(err.to_string().contains("--force"), "{err}");
        sh.force = true;
        prepare_out(&sh, &GenDataConfig::default()).unwrap();
        assert!(out.join("config.json").exists());
    }

    #[test]
    fn echoed_config_reruns_through_the_config_flag() {
        let dir = tempfile::tempdir().unwrap();
        let mut sh = shared(None, &["n=3", "kind=multi"]);
        sh.out = Some(dir.path().join("run"));
        let cfg: GenDataConfig = effective_config(GenDataConfig::default(), &sh).unwrap();
        let out = prepare_out(&sh, &cfg).unwrap();
        let again: GenDataConfig = effective_config(
            GenDataConfig::default(),
            &shared(Some(out.join("config.json")), &[]),
        )
        .unwrap();
        assert_eq!(again.n, 3);
        assert_eq!(again.kind, DataKind::Multi);
    }

    #[test]
    fn condition_files_are_validated() {
        let dir = tempfile::tempdir().unwrap();
        let ok = dir.path().join("ok.json");
        fs::write(&ok, r#"{"mask":[1.0,0.0],"values":[0.5,0.0]}"#).unwrap();
        let cond = read_condition(&ok, 2).unwrap();
        assert_eq!(cond.revealed_count(), 1);

        let bad_mask = dir.path().join("mask.json");
        fs::write(&bad_mask, r#"{"mask":[0.5,0.0],"values":[0.0,0.0]}"#).unwrap();
        assert!(read_condition(&bad_mask, 2).is_err());

        let leak = dir.path().join("leak.json");
        fs::write(&leak, r#"{"mask":[0.0,1.0],"values":[0.3,0.2]}"#).unwrap();
        assert!(read_condition(&leak, 2).is_err());

        assert!(read_condition(&ok, 3).is_err(), "dimension mismatch");
    }

    #[test]
    fn flags_parse_into_the_expected_commands() {
        let cli = Cli::try_parse_from([
            "condiff", "gen-data", "--out", "o", "--kind", "multi", "--n", "5", "--seed", "3",
        ])
        .unwrap();
        assert_eq!(cli.shared.out.as_deref(), Some(Path::new("o")));
        assert_eq!(cli.shared.seed, Some(3));
        match cli.command {
            Command::GenData(args) => {
                assert_eq!(args.kind, Some(DataKind::Multi));
                assert_eq!(args.n, Some(5));
            }
            other => panic!("parsed into {other:?}"),
        }

        let cli = Cli::try_parse_from([
            "condiff", "train", "--stage", "2", "--init", "c.bin", "--qc-coef", "0.02",
            "--out", "o",
        ])
        .unwrap();
        match cli.command {
            Command::Train(args) => {
                assert_eq!(args.stage, Some(Stage::Two));
                assert_eq!(args.qc_coef, Some(0.02));
            }
            other => panic!("parsed into {other:?}"),
        }

        assert!(Cli::try_parse_from(["condiff", "train", "--stage", "7"]).is_err());
        assert!(Cli::try_parse_from(["condiff"]).is_err());
    }
}
