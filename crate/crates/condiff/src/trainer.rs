//! Two-stage training loop. The base denoiser pre-trains unconditionally and
//! is frozen afterwards; a control branch then learns on conditioned pairs
//! (stage 1) and continues with a Jacobian-symmetry penalty on its score
//! contribution (stage 2, coefficient 0.01). Runs are bit-reproducible: draws
//! come from labeled RNG streams in a fixed order, gradients accumulate
//! sequentially in sample order, and checkpoints capture the exact generator
//! positions, so load-and-resume replays the uninterrupted run.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Shape, Tensor, Var};
use crate::conserve::{qc_mean_node, ProbeBatch};
use crate::diffusion::{dsm_sample_loss, NoiseSchedule, ScheduleFamily};
use crate::scorenet::{
    noise_pred, noise_pred_split, BaseModel, BoundParams, ControlBranch, ControlSpec, InjectionMode,
    ModelConfig, ParamSet, ScoreParts,
};
use crate::synthdata::{CondType, Condition, ConditionedSample};
use crate::util::{mean_compensated, normal_vec, stream_rng};
use crate::{combine::CombineConfig, Error, Result};

/// Stream label for batch composition: row indices, timesteps, noise draws.
pub const MAIN_STREAM: u64 = 300;
/// Stream label for symmetry-penalty probes. Kept separate so a zero penalty
/// coefficient leaves the main gradient stream untouched.
pub const QC_PROBE_STREAM: u64 = 301;

pub const CKPT_MAGIC: &[u8; 8] = b"CONDIFF\0";
pub const CKPT_VERSION: u32 = 1;

/// Which parameter set a run updates and which loss it minimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    /// Unconditional pre-training of the base denoiser.
    Base,
    /// Control branch on conditioned pairs; base frozen.
    One,
    /// Stage 1 objective plus the conservativity penalty; base frozen.
    Two,
}

/// One run's hyperparameters. `recipe` gives the per-stage defaults; the
/// serialized form fills missing fields from the stage-1 recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight on the symmetry penalty; only read in stage 2.
    pub conserve_coef: f64,
    pub probes_per_sample: usize,
    pub seed: u64,
    /// Training pairs on disk; `None` when the caller supplies data directly.
    pub dataset: Option<PathBuf>,
    pub mode: InjectionMode,
    pub combine: CombineConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::recipe(Stage::One)
    }
}

impl TrainConfig {
    /// Per-stage defaults: base 5000 steps at lr 1e-3; stage 1 2000 steps at
    /// lr 1e-3; stage 2 2000 steps at lr 3e-4 with penalty weight 0.01.
    pub fn recipe(stage: Stage) -> Self {
        let (steps, lr, coef) = match stage {
            Stage::Base => (5000, 1e-3, 0.0),
            Stage::One => (2000, 1e-3, 0.0),
            Stage::Two => (2000, 3e-4, 0.01),
        };
        TrainConfig {
            stage,
            steps,
            batch_size: 256,
            lr,
            conserve_coef: coef,
            probes_per_sample: 1,
            seed: 0,
            dataset: None,
            mode: InjectionMode::default(),
            combine: CombineConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.conserve_coef.is_finite() && self.conserve_coef >= 0.0) {
            return Err(Error::Config(format!(
                "conserve_coef must be non-negative, got {}",
                self.conserve_coef
            )));
        }
        if self.stage == Stage::Two && self.conserve_coef > 0.0 && self.probes_per_sample == 0 {
            return Err(Error::Config("stage 2 with a penalty needs at least one probe".into()));
        }
        Ok(())
    }
}

// ---- optimizer ----

/// Adaptive-moment hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second-moment accumulators, keyed like the parameter set they track.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    /// Update count for bias correction.
    pub t: u64,
}

impl AdamState {
    pub fn zeros_like(params: &ParamSet) -> Result<AdamState> {
        let mut m = ParamSet::new();
        let mut v = ParamSet::new();
        for (name, tensor) in params.iter() {
            m.insert(name, Tensor::zeros(tensor.shape()))?;
            v.insert(name, Tensor::zeros(tensor.shape()))?;
        }
        Ok(AdamState { m, v, t: 0 })
    }

    /// One update. `grads` aligns with the parameter set's entry order.
    pub fn step(&mut self, hyper: &Adam, params: &mut ParamSet, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Invalid(format!(
                "optimizer got {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.t += 1;
        let b1c = 1.0 - hyper.beta1.powi(self.t as i32);
        let b2c = 1.0 - hyper.beta2.powi(self.t as i32);
        let names: Vec<String> = params.names().iter().map(|s| s.to_string()).collect();
        for (name, grad) in names.iter().zip(grads) {
            let shape = params.get(name)?.shape();
            if grad.len() != shape.numel() {
                return Err(Error::Shape {
                    op: "optimizer step",
                    msg: format!("{name}: gradient length {} vs {}", grad.len(), shape.numel()),
                });
            }
            let mut m_new = self.m.get(name)?.data().to_vec();
            let mut v_new = self.v.get(name)?.data().to_vec();
            let mut p_new = params.get(name)?.data().to_vec();
            for ((p, m), (v, g)) in
                p_new.iter_mut().zip(&mut m_new).zip(v_new.iter_mut().zip(grad))
            {
                *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
                *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
                let m_hat = *m / b1c;
                let v_hat = *v / b2c;
                *p -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
            }
            self.m.set(name, tensor_with_shape(shape, m_new)?)?;
            self.v.set(name, tensor_with_shape(shape, v_new)?)?;
            params.set(name, tensor_with_shape(shape, p_new)?)?;
        }
        Ok(())
    }
}

fn tensor_with_shape(shape: Shape, data: Vec<f64>) -> Result<Tensor> {
    match shape {
        Shape::Vector(_) => Ok(Tensor::vector(data)),
        Shape::Matrix(r, c) => Tensor::matrix(r, c, data),
    }
}

// ---- data ----

/// Rows for the base stage; conditioned pairs for the branch stages.
#[derive(Clone, Debug)]
pub enum TrainData {
    Unconditional(Vec<Vec<f64>>),
    Conditioned(Vec<ConditionedSample>),
}

impl TrainData {
    pub fn len(&self) -> usize {
        match self {
            TrainData::Unconditional(rows) => rows.len(),
            TrainData::Conditioned(samples) => samples.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// Cumulative step count within the run, 1-based after the first update.
    pub step: usize,
    pub dsm_loss: f64,
    /// Mean symmetry-penalty estimate; 0 when the penalty is off.
    pub qc_simple: f64,
    pub wall_ms: f64,
}

/// JSON-lines encoding of one record (no trailing newline).
pub fn log_line(rec: &LogRecord) -> String {
    serde_json::to_string(rec).expect("plain record serializes")
}

// ---- run state ----

/// Everything a run carries between steps; checkpoints serialize it losslessly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: ModelConfig,
    pub family: ScheduleFamily,
    pub horizon: usize,
    pub train: TrainConfig,
    /// Condition family the branch was trained for; `None` for the base stage.
    pub cond_type: Option<CondType>,
    pub base: ParamSet,
    pub branch: Option<ParamSet>,
    pub adam: AdamState,
    pub step: usize,
    pub rng_main_pos: u128,
    pub rng_probe_pos: u128,
}

impl TrainState {
    /// Fresh unconditional run: random base, no branch.
    pub fn new_base(
        model: ModelConfig,
        family: ScheduleFamily,
        horizon: usize,
        train: TrainConfig,
        init_seed: u64,
    ) -> Result<TrainState> {
        if train.stage != Stage::Base {
            return Err(Error::Invalid("new_base needs a base-stage config".into()));
        }
        train.validate()?;
        NoiseSchedule::new(family, horizon)?;
        let base = BaseModel::init(model.clone(), init_seed)?;
        let adam = AdamState::zeros_like(&base.params)?;
        Ok(TrainState {
            model,
            family,
            horizon,
            train,
            cond_type: None,
            base: base.params,
            branch: None,
            adam,
            step: 0,
            rng_main_pos: 0,
            rng_probe_pos: 0,
        })
    }

    /// Stage-1 run on top of a finished base run: the base parameters are
    /// copied in frozen, the branch starts near-inert.
    pub fn new_branch(
        base_run: &TrainState,
        train: TrainConfig,
        cond_type: CondType,
        init_seed: u64,
    ) -> Result<TrainState> {
        if base_run.train.stage != Stage::Base {
            return Err(Error::Invalid("a branch run starts from a base-stage checkpoint".into()));
        }
        if train.stage != Stage::One {
            return Err(Error::Invalid("new_branch needs a stage-one config".into()));
        }
        train.validate()?;
        let branch = ControlBranch::init(base_run.model.clone(), init_seed)?;
        let adam = AdamState::zeros_like(&branch.params)?;
        Ok(TrainState {
            model: base_run.model.clone(),
            family: base_run.family,
            horizon: base_run.horizon,
            train,
            cond_type: Some(cond_type),
            base: base_run.base.clone(),
            branch: Some(branch.params),
            adam,
            step: 0,
            rng_main_pos: 0,
            rng_probe_pos: 0,
        })
    }

    /// Continue a finished stage-1 run with the penalty objective. Optimizer
    /// moments and step/RNG counters restart; parameters carry over.
    pub fn stage2(&self, train: TrainConfig) -> Result<TrainState> {
        if self.train.stage != Stage::One {
            return Err(Error::Invalid("stage 2 requires a stage-1 checkpoint".into()));
        }
        if train.stage != Stage::Two {
            return Err(Error::Invalid("stage2 needs a stage-two config".into()));
        }
        train.validate()?;
        let branch = self
            .branch
            .as_ref()
            .ok_or_else(|| Error::Invalid("stage-1 state is missing its branch".into()))?;
        let adam = AdamState::zeros_like(branch)?;
        Ok(TrainState {
            train,
            adam,
            step: 0,
            rng_main_pos: 0,
            rng_probe_pos: 0,
            ..self.clone()
        })
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.family, self.horizon)
    }

    /// The parameter set this run updates.
    pub fn trained(&self) -> Result<&ParamSet> {
        match self.train.stage {
            Stage::Base => Ok(&self.base),
            _ => self
                .branch
                .as_ref()
                .ok_or_else(|| Error::Invalid("branch stages need a control branch".into())),
        }
    }
}

// ---- training loop ----

struct SampleDraw<'a> {
    x0: &'a [f64],
    condition: Option<&'a Condition>,
    t: usize,
    eps: &'a [f64],
    probes: Option<&'a ProbeBatch>,
}

/// Loss values and gradients for one sample. The penalty path builds the
/// split-input graph so the probes act on the control contribution alone;
/// otherwise the joint graph suffices.
fn sample_grads(
    state: &TrainState,
    schedule: &NoiseSchedule,
    draw: &SampleDraw,
) -> Result<(f64, f64, Vec<Vec<f64>>)> {
    let g = Graph::new();
    let train_base = state.train.stage == Stage::Base;
    let bound_base = BoundParams::bind(&g, &state.base, train_base);
    let bound_branch =
        state.branch.as_ref().map(|b| BoundParams::bind(&g, b, !train_base));
    let mut parts = ScoreParts {
        config: &state.model,
        base: &bound_base,
        controls: Vec::new(),
        mode: state.train.mode,
        combine: state.train.combine,
        trace: None,
    };
    if let (Some(bb), Some(cond)) = (&bound_branch, draw.condition) {
        parts.controls.push(ControlSpec { params: bb, condition: cond });
    }
    let wrt = if train_base {
        bound_base.vars()
    } else {
        bound_branch.as_ref().expect("branch stages bind a branch").vars()
    };

    // The penalty needs σ > 0, so the t = 0 endpoint trains on the
    // denoising term alone.
    let (dsm, qc) = match draw.probes {
        Some(probes) if draw.t >= 1 => {
            let (a, s) = (schedule.alpha(draw.t), schedule.sigma(draw.t));
            let xt: Vec<f64> =
                draw.x0.iter().zip(draw.eps).map(|(x, e)| a * x + s * e).collect();
            let x_enc = g.constant(Tensor::vector(xt.clone()));
            let x_ctrl = g.input(Tensor::vector(xt));
            let eps_hat = noise_pred_split(&g, &parts, x_enc, x_ctrl, draw.t)?;
            let target = g.constant(Tensor::vector(draw.eps.to_vec()));
            let dsm = g.norm_sq(g.sub(eps_hat, target)?);
            let score = g.scale(eps_hat, -1.0 / s);
            let qc = qc_mean_node(&g, score, x_ctrl, probes)?;
            (dsm, Some(qc))
        }
        _ => {
            let predict = |g: &Graph, x: Var, t: usize| noise_pred(g, &parts, x, t);
            (dsm_sample_loss(&g, schedule, &predict, draw.x0, draw.t, draw.eps)?, None)
        }
    };
    let total = match qc {
        Some(q) => g.add(dsm, g.scale(q, state.train.conserve_coef))?,
        None => dsm,
    };
    let grads = g.gradient(total, &wrt)?;
    let dsm_val = g.value(dsm).item();
    let qc_val = qc.map(|q| g.value(q).item()).unwrap_or(0.0);
    let grad_vals = grads.iter().map(|&v| g.value(v).data().to_vec()).collect();
    Ok((dsm_val, qc_val, grad_vals))
}

fn check_data(state: &TrainState, data: &TrainData) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Invalid("training data is empty".into()));
    }
    let d = state.model.data_dim;
    match (state.train.stage, data) {
        (Stage::Base, TrainData::Unconditional(rows)) => {
            if rows.iter().any(|r| r.len() != d) {
                return Err(Error::Invalid(format!("base data rows must have length {d}")));
            }
        }
        (Stage::Base, TrainData::Conditioned(_)) => {
            return Err(Error::Invalid("the base stage trains on unconditioned rows".into()));
        }
        (_, TrainData::Conditioned(samples)) => {
            let want = state
                .cond_type
                .ok_or_else(|| Error::Invalid("branch state is missing its condition type".into()))?;
            for s in samples {
                if s.x0.len() != d || s.condition.dim() != d {
                    return Err(Error::Invalid(format!("conditioned pairs must have length {d}")));
                }
                if s.cond_type != want {
                    return Err(Error::Invalid(format!(
                        "dataset holds {:?} conditions but the branch trains {:?}",
                        s.cond_type, want
                    )));
                }
            }
        }
        (_, TrainData::Unconditional(_)) => {
            return Err(Error::Invalid("branch stages train on conditioned pairs".into()));
        }
    }
    Ok(())
}

/// Run `steps` more updates. On a non-finite loss or gradient the state rolls
/// back to the last completed step and the error names the failing one.
pub fn train_for(
    state: &mut TrainState,
    data: &TrainData,
    steps: usize,
    log: &mut dyn FnMut(&LogRecord),
) -> Result<()> {
    state.train.validate()?;
    state.trained()?;
    check_data(state, data)?;
    let schedule = state.schedule()?;
    let d = state.model.data_dim;
    let n = data.len();
    let batch = state.train.batch_size;
    let use_qc = state.train.stage == Stage::Two && state.train.conserve_coef > 0.0;
    let hyper = Adam { lr: state.train.lr, ..Adam::default() };

    let mut rng_main = stream_rng(state.train.seed, MAIN_STREAM);
    rng_main.set_word_pos(state.rng_main_pos);
    let mut rng_probe = stream_rng(state.train.seed, QC_PROBE_STREAM);
    rng_probe.set_word_pos(state.rng_probe_pos);

    for _ in 0..steps {
        let clock = std::time::Instant::now();
        let snapshot = state.clone();

        // Fixed draw order per sample: row, timestep, noise; probes from
        // their own stream only when the penalty is active.
        let draws: Vec<(usize, usize, Vec<f64>)> = (0..batch)
            .map(|_| {
                let row = rng_main.random_range(0..n);
                let t = rng_main.random_range(0..=schedule.horizon());
                let eps = normal_vec(&mut rng_main, d);
                (row, t, eps)
            })
            .collect();
        let probes: Vec<Option<ProbeBatch>> = (0..batch)
            .map(|_| {
                use_qc.then(|| {
                    ProbeBatch::rademacher(d, state.train.probes_per_sample, &mut rng_probe)
                })
            })
            .collect();

        let mut acc: Vec<Vec<f64>> =
            state.trained()?.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        let mut dsm_vals = Vec::with_capacity(batch);
        let mut qc_vals = Vec::with_capacity(batch);
        for ((row, t, eps), probe) in draws.iter().zip(&probes) {
            let (x0, condition): (&[f64], Option<&Condition>) = match data {
                TrainData::Unconditional(rows) => (&rows[*row], None),
                TrainData::Conditioned(samples) => {
                    (&samples[*row].x0, Some(&samples[*row].condition))
                }
            };
            let draw = SampleDraw { x0, condition, t: *t, eps, probes: probe.as_ref() };
            let (dsm_val, qc_val, grads) = sample_grads(state, &schedule, &draw)?;
            let finite = dsm_val.is_finite()
                && qc_val.is_finite()
                && grads.iter().all(|g| g.iter().all(|v| v.is_finite()));
            if !finite {
                let step = snapshot.step;
                *state = snapshot;
                return Err(Error::Numeric {
                    step,
                    msg: "training loss or gradient became non-finite".into(),
                });
            }
            for (slot, grad) in acc.iter_mut().zip(&grads) {
                for (s, g) in slot.iter_mut().zip(grad) {
                    *s += g;
                }
            }
            dsm_vals.push(dsm_val);
            qc_vals.push(qc_val);
        }
        for slot in &mut acc {
            for v in slot.iter_mut() {
                *v /= batch as f64;
            }
        }

        let params = match state.train.stage {
            Stage::Base => &mut state.base,
            _ => state.branch.as_mut().expect("validated above"),
        };
        state.adam.step(&hyper, params, &acc)?;
        state.step += 1;
        state.rng_main_pos = rng_main.get_word_pos();
        state.rng_probe_pos = rng_probe.get_word_pos();
        log(&LogRecord {
            step: state.step,
            dsm_loss: mean_compensated(&dsm_vals),
            qc_simple: mean_compensated(&qc_vals),
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(())
}

// ---- checkpoints ----

#[derive(Serialize, Deserialize)]
struct CkptMeta {
    step: usize,
    model: ModelConfig,
    family: ScheduleFamily,
    horizon: usize,
    train: TrainConfig,
    cond_type: Option<CondType>,
    adam_t: u64,
    /// ChaCha word positions as hex — they exceed the JSON-safe integer range.
    rng_main_pos: String,
    rng_probe_pos: String,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dims: Vec<usize>,
    /// Offset into the payload in f64 units.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    meta: CkptMeta,
    tensors: Vec<TensorEntry>,
}

fn push_set(prefix: &str, set: &ParamSet, dir: &mut Vec<TensorEntry>, payload: &mut Vec<f64>) {
    for (name, tensor) in set.iter() {
        dir.push(TensorEntry {
            name: format!("{prefix}{name}"),
            dims: tensor.shape().dims(),
            offset: payload.len(),
        });
        payload.extend_from_slice(tensor.data());
    }
}

/// File layout: magic, u32 version, u64 header length, JSON header (meta +
/// tensor directory), then the tensors as raw little-endian f64.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut dir = Vec::new();
    let mut payload = Vec::new();
    push_set("base.", &state.base, &mut dir, &mut payload);
    if let Some(branch) = &state.branch {
        push_set("branch.", branch, &mut dir, &mut payload);
    }
    push_set("adam.m.", &state.adam.m, &mut dir, &mut payload);
    push_set("adam.v.", &state.adam.v, &mut dir, &mut payload);
    let header = CkptHeader {
        meta: CkptMeta {
            step: state.step,
            model: state.model.clone(),
            family: state.family,
            horizon: state.horizon,
            train: state.train.clone(),
            cond_type: state.cond_type,
            adam_t: state.adam.t,
            rng_main_pos: format!("{:032x}", state.rng_main_pos),
            rng_probe_pos: format!("{:032x}", state.rng_probe_pos),
        },
        tensors: dir,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Invalid(format!("checkpoint header serialization: {e}")))?;
    let mut bytes =
        Vec::with_capacity(20 + header_json.len() + 8 * payload.len());
    bytes.extend_from_slice(CKPT_MAGIC);
    bytes.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for v in &payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_word_pos(path: &Path, hex: &str, which: &str) -> Result<u128> {
    u128::from_str_radix(hex, 16)
        .map_err(|e| Error::format(path, format!("{which} RNG position {hex:?}: {e}")))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    if !path.exists() {
        return Err(Error::Missing(format!(
            "checkpoint {} not found; `condiff train` writes one",
            path.display()
        )));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 {
        return Err(Error::format(path, "truncated: shorter than the fixed header"));
    }
    if &bytes[..8] != CKPT_MAGIC {
        return Err(Error::format(path, "bad magic bytes; not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CKPT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported checkpoint version {version}, expected {CKPT_VERSION}"),
        ));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 20 + header_len {
        return Err(Error::format(path, "truncated: header runs past end of file"));
    }
    let header: CkptHeader = serde_json::from_slice(&bytes[20..20 + header_len])
        .map_err(|e| Error::format(path, format!("header json: {e}")))?;
    let payload_bytes = &bytes[20 + header_len..];
    if payload_bytes.len() % 8 != 0 {
        return Err(Error::format(path, "truncated: payload is not a whole number of f64s"));
    }
    let payload: Vec<f64> = payload_bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();

    // The directory must tile the payload exactly.
    let mut expected_offset = 0usize;
    for entry in &header.tensors {
        if entry.offset != expected_offset {
            return Err(Error::format(
                path,
                format!("tensor directory not contiguous at {}", entry.name),
            ));
        }
        expected_offset += Shape::from_dims(&entry.dims)?.numel();
    }
    if expected_offset != payload.len() {
        return Err(Error::format(
            path,
            format!(
                "truncated: directory describes {expected_offset} values, payload holds {}",
                payload.len()
            ),
        ));
    }

    let mut base = ParamSet::new();
    let mut branch = ParamSet::new();
    let mut adam_m = ParamSet::new();
    let mut adam_v = ParamSet::new();
    for entry in &header.tensors {
        let shape = Shape::from_dims(&entry.dims)?;
        let data = payload[entry.offset..entry.offset + shape.numel()].to_vec();
        let tensor = tensor_with_shape(shape, data)?;
        let (set, name) = if let Some(n) = entry.name.strip_prefix("adam.m.") {
            (&mut adam_m, n)
        } else if let Some(n) = entry.name.strip_prefix("adam.v.") {
            (&mut adam_v, n)
        } else if let Some(n) = entry.name.strip_prefix("base.") {
            (&mut base, n)
        } else if let Some(n) = entry.name.strip_prefix("branch.") {
            (&mut branch, n)
        } else {
            return Err(Error::format(path, format!("unknown tensor {}", entry.name)));
        };
        set.insert(name, tensor)?;
    }

    let meta = header.meta;
    meta.model.validate()?;
    NoiseSchedule::new(meta.family, meta.horizon)?;
    meta.train.validate()?;
    let stage = meta.train.stage;
    if base.is_empty() {
        return Err(Error::format(path, "no base tensors present"));
    }
    let branch = if branch.is_empty() { None } else { Some(branch) };
    if stage != Stage::Base && branch.is_none() {
        return Err(Error::format(path, "branch-stage checkpoint holds no branch tensors"));
    }
    if stage != Stage::Base && meta.cond_type.is_none() {
        return Err(Error::format(path, "branch-stage checkpoint names no condition type"));
    }

    // Optimizer moments must mirror the trained set name-for-name and
    // shape-for-shape.
    let trained = match stage {
        Stage::Base => &base,
        _ => branch.as_ref().expect("checked above"),
    };
    for moments in [&adam_m, &adam_v] {
        if moments.names() != trained.names() {
            return Err(Error::format(
                path,
                "optimizer state names do not match the trained parameters",
            ));
        }
        for (name, tensor) in trained.iter() {
            let m = moments.get(name)?;
            if m.shape() != tensor.shape() {
                return Err(Error::Shape {
                    op: "checkpoint load",
                    msg: format!("{name}: optimizer moment {} vs parameter {}", m.shape(), tensor.shape()),
                });
            }
        }
    }

    let rng_main_pos = parse_word_pos(path, &meta.rng_main_pos, "main")?;
    let rng_probe_pos = parse_word_pos(path, &meta.rng_probe_pos, "probe")?;
    Ok(TrainState {
        model: meta.model,
        family: meta.family,
        horizon: meta.horizon,
        train: meta.train,
        cond_type: meta.cond_type,
        base,
        branch,
        adam: AdamState { m: adam_m, v: adam_v, t: meta.adam_t },
        step: meta.step,
        rng_main_pos,
        rng_probe_pos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{gen_ground_truth, gen_rebalanced_pairs, SyntheticTask};

    fn micro_model() -> ModelConfig {
        ModelConfig { data_dim: 3, levels: 1, hidden: vec![6, 6], time_embed_dim: 4 }
    }

    fn micro_task() -> SyntheticTask {
        SyntheticTask { dim: 3, ..SyntheticTask::default() }
    }

    fn micro_base(train: TrainConfig) -> TrainState {
        TrainState::new_base(micro_model(), ScheduleFamily::Cosine, 8, train, 11).unwrap()
    }

    fn base_cfg(steps: usize, batch: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: batch,
            seed: 5,
            ..TrainConfig::recipe(Stage::Base)
        }
    }

    fn stage1_cfg(steps: usize, batch: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: batch,
            seed: 5,
            ..TrainConfig::recipe(Stage::One)
        }
    }

    fn micro_branch(steps: usize, batch: usize) -> (TrainState, TrainData) {
        let base = micro_base(base_cfg(0, 1));
        let state =
            TrainState::new_branch(&base, stage1_cfg(steps, batch), CondType::A, 13).unwrap();
        let pairs = gen_rebalanced_pairs(&micro_task(), CondType::A, 48, 21);
        (state, TrainData::Conditioned(pairs))
    }

    fn drop_log(_: &LogRecord) {}

    #[test]
    fn recipe_defaults_follow_stage() {
        let base = TrainConfig::recipe(Stage::Base);
        assert_eq!((base.steps, base.batch_size), (5000, 256));
        assert_eq!((base.lr, base.conserve_coef), (1e-3, 0.0));
        let one = TrainConfig::recipe(Stage::One);
        assert_eq!((one.steps, one.lr), (2000, 1e-3));
        let two = TrainConfig::recipe(Stage::Two);
        assert_eq!((two.steps, two.lr, two.conserve_coef), (2000, 3e-4, 0.01));
        assert_eq!(two.probes_per_sample, 1);
    }

    #[test]
    fn adam_zero_gradient_leaves_params_bitwise_fixed() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::vector(vec![0.3, -1.7, 0.0])).unwrap();
        let before = params.clone();
        let mut adam = AdamState::zeros_like(&params).unwrap();
        for _ in 0..3 {
            adam.step(&Adam::default(), &mut params, &[vec![0.0; 3]]).unwrap();
        }
        assert_eq!(params, before);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // f(x) = (x − 0.7)², start at 0, lr 1e-2. The normalized step covers
        // the distance well inside 500 updates; the residual band is of the
        // order of the learning rate.
        let mut params = ParamSet::new();
        params.insert("x", Tensor::vector(vec![0.0])).unwrap();
        let mut adam = AdamState::zeros_like(&params).unwrap();
        let hyper = Adam { lr: 1e-2, ..Adam::default() };
        for _ in 0..500 {
            let x = params.get("x").unwrap().data()[0];
            adam.step(&hyper, &mut params, &[vec![2.0 * (x - 0.7)]]).unwrap();
        }
        let x = params.get("x").unwrap().data()[0];
        assert!((x - 0.7).abs() <= 0.02, "x = {x}");
    }

    #[test]
    fn base_stage_reduces_denoising_loss() {
        let mut state = micro_base(base_cfg(150, 16));
        let data = TrainData::Unconditional(gen_ground_truth(&micro_task(), 128, 3));
        let mut records = Vec::new();
        train_for(&mut state, &data, 150, &mut |r| records.push(r.clone())).unwrap();
        assert_eq!(records.len(), 150);
        let first = records[0].dsm_loss;
        let tail = mean_compensated(
            &records[140..].iter().map(|r| r.dsm_loss).collect::<Vec<_>>(),
        );
        assert!(
            tail < 0.8 * first,
            "loss did not drop: first {first}, tail mean {tail}"
        );
        assert_eq!(state.step, 150);
    }

    #[test]
    fn stage_and_data_mismatches_are_rejected() {
        let mut base = micro_base(base_cfg(1, 2));
        let pairs = gen_rebalanced_pairs(&micro_task(), CondType::A, 8, 21);
        let err = train_for(&mut base, &TrainData::Conditioned(pairs), 1, &mut drop_log)
            .unwrap_err();
        assert!(matches!(err, Error::Invalid(_)), "{err}");

        let (mut branch, _) = micro_branch(1, 2);
        let rows = TrainData::Unconditional(gen_ground_truth(&micro_task(), 8, 3));
        let err = train_for(&mut branch, &rows, 1, &mut drop_log).unwrap_err();
        assert!(matches!(err, Error::Invalid(_)), "{err}");

        // Wrong condition family in the dataset.
        let pairs_b = gen_rebalanced_pairs(&micro_task(), CondType::B, 8, 22);
        let err = train_for(&mut branch, &TrainData::Conditioned(pairs_b), 1, &mut drop_log)
            .unwrap_err();
        assert!(err.to_string().contains("conditions"), "{err}");

        // Stage 2 is only reachable from a finished stage-1 run.
        let base = micro_base(base_cfg(1, 2));
        assert!(base.stage2(TrainConfig::recipe(Stage::Two)).is_err());
    }

    #[test]
    fn zero_length_run_is_identity() {
        let (mut state, data) = micro_branch(0, 4);
        let before = state.clone();
        train_for(&mut state, &data, 0, &mut drop_log).unwrap();
        assert_eq!(state, before);
    }

    #[test]
    fn branch_stages_leave_base_bitwise_frozen() {
        let (mut state, data) = micro_branch(3, 4);
        let base_before = state.base.clone();
        train_for(&mut state, &data, 3, &mut drop_log).unwrap();
        assert_eq!(state.base, base_before);
        assert_ne!(
            state.branch.as_ref().unwrap().get("ctrl.embed.w").unwrap(),
            &ControlBranch::init(micro_model(), 13).unwrap().params.get("ctrl.embed.w").unwrap().clone(),
            "branch should have moved"
        );

        let mut st2 = state.stage2(TrainConfig {
            batch_size: 4,
            seed: 5,
            ..TrainConfig::recipe(Stage::Two)
        }).unwrap();
        train_for(&mut st2, &data, 2, &mut drop_log).unwrap();
        assert_eq!(st2.base, base_before);
    }

    #[test]
    fn same_seed_reruns_and_resume_are_bitwise_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("mid.ckpt");

        let (mut oneshot, data) = micro_branch(6, 4);
        let mut losses_oneshot = Vec::new();
        train_for(&mut oneshot, &data, 6, &mut |r| losses_oneshot.push(r.dsm_loss)).unwrap();

        let (mut split, _) = micro_branch(6, 4);
        let mut losses_split = Vec::new();
        train_for(&mut split, &data, 3, &mut |r| losses_split.push(r.dsm_loss)).unwrap();
        save_checkpoint(&split, &ckpt).unwrap();
        let mut resumed = load_checkpoint(&ckpt).unwrap();
        assert_eq!(resumed, split);
        train_for(&mut resumed, &data, 3, &mut |r| losses_split.push(r.dsm_loss)).unwrap();

        assert_eq!(resumed, oneshot);
        assert_eq!(losses_oneshot, losses_split);
    }

    #[test]
    fn checkpoint_save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (mut state, data) = micro_branch(2, 4);
        train_for(&mut state, &data, 2, &mut drop_log).unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&state, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn checkpoint_corruption_yields_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (state, _) = micro_branch(0, 2);
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&state, &path).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] ^= 0xff;
        fs::write(&path, &bad_magic).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");

        let mut bad_version = good.clone();
        bad_version[8] = 99;
        fs::write(&path, &bad_version).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");

        let truncated = good[..good.len() - 8].to_vec();
        fs::write(&path, &truncated).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        // Transpose one branch tensor's dims in the header: same element
        // count, so only the moment/parameter shape cross-check can object.
        let header_len =
            u64::from_le_bytes(good[12..20].try_into().unwrap()) as usize;
        let header = String::from_utf8(good[20..20 + header_len].to_vec()).unwrap();
        let tampered = header.replacen(
            "\"name\":\"branch.ctrl.embed.w\",\"dims\":[3,6]",
            "\"name\":\"branch.ctrl.embed.w\",\"dims\":[6,3]",
            1,
        );
        assert_ne!(header, tampered, "test must actually tamper the header");
        let mut bad_shape = good[..12].to_vec();
        bad_shape.extend_from_slice(&(tampered.len() as u64).to_le_bytes());
        bad_shape.extend_from_slice(tampered.as_bytes());
        bad_shape.extend_from_slice(&good[20 + header_len..]);
        fs::write(&path, &bad_shape).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }), "{err}");

        let err = load_checkpoint(&dir.path().join("absent.ckpt")).unwrap_err();
        assert!(matches!(err, Error::Missing(_)), "{err}");
    }

    #[test]
    fn stage2_zero_coefficient_reproduces_stage1_updates() {
        // With the penalty off, stage 2 must consume the same draws and
        // produce the same parameters as continuing stage 1.
        let (stage1_start, data) = micro_branch(3, 4);

        let mut as_stage1 = stage1_start.clone();
        train_for(&mut as_stage1, &data, 3, &mut drop_log).unwrap();

        let mut as_stage2 = stage1_start
            .stage2(TrainConfig {
                conserve_coef: 0.0,
                lr: stage1_start.train.lr,
                batch_size: 4,
                seed: 5,
                ..TrainConfig::recipe(Stage::Two)
            })
            .unwrap();
        train_for(&mut as_stage2, &data, 3, &mut drop_log).unwrap();

        assert_eq!(as_stage2.branch, as_stage1.branch);
        assert_eq!(as_stage2.rng_probe_pos, 0, "penalty off must not touch the probe stream");
    }

    #[test]
    fn stage2_penalty_runs_and_logs_qc() {
        let (stage1_start, data) = micro_branch(2, 4);
        let mut state = stage1_start
            .stage2(TrainConfig {
                batch_size: 4,
                probes_per_sample: 2,
                seed: 5,
                ..TrainConfig::recipe(Stage::Two)
            })
            .unwrap();
        let mut records = Vec::new();
        train_for(&mut state, &data, 2, &mut |r| records.push(r.clone())).unwrap();
        assert_eq!(records.len(), 2);
        assert!(records.iter().all(|r| r.qc_simple.is_finite()));
        assert!(records.iter().any(|r| r.qc_simple != 0.0), "penalty never measured");
        assert_ne!(state.rng_probe_pos, 0);
        assert_ne!(state.rng_main_pos, 0);
        assert_eq!(state.adam.t, 2);
    }

    #[test]
    fn non_finite_data_aborts_at_the_failing_step_with_last_good_state() {
        let mut state = micro_base(base_cfg(5, 4));
        let before = state.clone();
        let rows = vec![vec![f64::NAN, 0.0, 0.0]; 4];
        let err =
            train_for(&mut state, &TrainData::Unconditional(rows), 5, &mut drop_log).unwrap_err();
        match err {
            Error::Numeric { step, .. } => assert_eq!(step, 0),
            other => panic!("expected a numeric abort, got {other}"),
        }
        assert_eq!(state, before, "state must roll back to the last good step");
    }

    #[test]
    fn log_lines_round_trip() {
        let rec = LogRecord { step: 7, dsm_loss: 1.25, qc_simple: 0.001, wall_ms: 3.5 };
        let line = log_line(&rec);
        assert!(!line.contains('\n'));
        let back: LogRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, rec);
    }
}
