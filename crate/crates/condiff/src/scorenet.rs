//! Noise-prediction network with residual feature stacks and detachable
//! control branches.
//!
//! The base model is an MLP U-Net analogue: an encoder produces one residual
//! feature per level, a decoder walks back down consuming the deepest feature
//! and concatenating each shallower one. A control branch mirrors the encoder
//! — its input is `x + embed(condition)` — and passes every feature through a
//! per-level projection initialized near zero, so a fresh branch leaves the
//! base output untouched. Control stacks enter the decoder either by plain
//! addition (`VanillaAdd`) or through the weighted operators from
//! [`crate::combine`] (`MinimalImpact`).
//!
//! All forward builders append to a caller-supplied [`Graph`], so gradients,
//! vector-Jacobian and Jacobian-vector products of anything built here come
//! from [`crate::autodiff`] for free.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Shape, Tensor, Var};
use crate::combine::{add_com_stack, add_inj_stack, CombineConfig, CombineTrace};
use crate::synthdata::Condition;
use crate::util::{normal, stream_rng};
use crate::{Error, Result};

const BASE_STREAM: u64 = 100;
const BRANCH_STREAM: u64 = 101;
/// Std of the near-zero projection weights in a fresh control branch.
pub const PROJ_INIT_STD: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub data_dim: usize,
    /// Number of levels `l`; the encoder emits `l + 1` residual features.
    pub levels: usize,
    /// Hidden widths per level, length `levels + 1`.
    pub hidden: Vec<usize>,
    /// Width of the sinusoidal time embedding (even).
    pub time_embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { data_dim: 8, levels: 3, hidden: vec![32; 4], time_embed_dim: 16 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.levels == 0 {
            return Err(Error::Config("data_dim and levels must be positive".into()));
        }
        if self.hidden.len() != self.levels + 1 {
            return Err(Error::Config(format!(
                "hidden widths: expected {} entries for {} levels, got {}",
                self.levels + 1,
                self.levels,
                self.hidden.len()
            )));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config("time_embed_dim must be even and at least 2".into()));
        }
        Ok(())
    }

    /// Residual stack length.
    pub fn stack_len(&self) -> usize {
        self.levels + 1
    }
}

/// Sinusoidal embedding of an integer step: interleaved sin/cos banks over a
/// geometric frequency ladder. Pure data — enters graphs as a constant.
pub fn time_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(dim);
    for j in 0..half {
        let freq = (10_000f64).powf(-(j as f64) / half.max(1) as f64);
        data.push((t as f64 * freq).sin());
    }
    for j in 0..half {
        let freq = (10_000f64).powf(-(j as f64) / half.max(1) as f64);
        data.push((t as f64 * freq).cos());
    }
    Tensor::vector(data)
}

// ---- parameter storage ----

/// Ordered name → tensor map. Order is construction order and is part of the
/// contract: checkpoints and optimizer state rely on it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::Invalid(format!("duplicate parameter {name}")));
        }
        self.entries.push((name.to_string(), value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Missing(format!("parameter {name}")))
    }

    /// Replaces a value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let entry = self
            .entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Missing(format!("parameter {name}")))?;
        if entry.1.shape() != value.shape() {
            return Err(Error::Shape {
                op: "param set",
                msg: format!("{name}: {} vs {}", entry.1.shape(), value.shape()),
            });
        }
        entry.1 = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn value_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

/// Parameters bound into one graph, either as trainable inputs or as frozen
/// constants. Vars are only valid for the graph they were bound into.
pub struct BoundParams {
    entries: Vec<(String, Var)>,
}

impl BoundParams {
    pub fn bind(g: &Graph, params: &ParamSet, trainable: bool) -> Self {
        let entries = params
            .iter()
            .map(|(n, t)| {
                let v = if trainable { g.input(t.clone()) } else { g.constant(t.clone()) };
                (n.to_string(), v)
            })
            .collect();
        BoundParams { entries }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Missing(format!("bound parameter {name}")))
    }

    /// Vars in parameter order — the `wrt` list for gradient calls.
    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| *v).collect()
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }
}

fn rand_matrix(rng: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| std * normal(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("matrix dims")
}

/// Encoder + decoder parameters (names `enc.*`, `dec.*`).
#[derive(Clone, Debug, PartialEq)]
pub struct BaseModel {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl BaseModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, BASE_STREAM);
        let mut p = ParamSet::new();
        let mut prev = config.data_dim;
        for (i, &w) in config.hidden.iter().enumerate() {
            let std = (1.0 / prev as f64).sqrt();
            p.insert(&format!("enc.l{}.w", i + 1), rand_matrix(&mut rng, w, prev, std))?;
            p.insert(&format!("enc.l{}.b", i + 1), Tensor::zeros(Shape::Vector(w)))?;
            prev = w;
        }
        let tstd = (1.0 / config.time_embed_dim as f64).sqrt();
        p.insert(
            "enc.time.w",
            rand_matrix(&mut rng, config.hidden[0], config.time_embed_dim, tstd),
        )?;
        for i in (1..=config.levels).rev() {
            let fan_in = config.hidden[i] + config.hidden[i - 1];
            let std = (1.0 / fan_in as f64).sqrt();
            p.insert(
                &format!("dec.l{i}.w"),
                rand_matrix(&mut rng, config.hidden[i - 1], fan_in, std),
            )?;
            p.insert(&format!("dec.l{i}.b"), Tensor::zeros(Shape::Vector(config.hidden[i - 1])))?;
        }
        let ostd = (1.0 / config.hidden[0] as f64).sqrt();
        p.insert("dec.out.w", rand_matrix(&mut rng, config.data_dim, config.hidden[0], ostd))?;
        p.insert("dec.out.b", Tensor::zeros(Shape::Vector(config.data_dim)))?;
        Ok(BaseModel { config, params: p })
    }
}

/// Condition-embedding + mirrored encoder + near-zero per-level projections
/// (names `ctrl.*`).
#[derive(Clone, Debug, PartialEq)]
pub struct ControlBranch {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl ControlBranch {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, PROJ_INIT_STD)
    }

    /// Projections exactly zero: the branch is provably inert.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        Self::build(config, 0, 0.0)
    }

    fn build(config: ModelConfig, seed: u64, proj_std: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, BRANCH_STREAM);
        let mut p = ParamSet::new();
        let d = config.data_dim;
        let estd = (1.0 / (2 * d) as f64).sqrt();
        p.insert("ctrl.embed.w", rand_matrix(&mut rng, d, 2 * d, estd))?;
        p.insert("ctrl.embed.b", Tensor::zeros(Shape::Vector(d)))?;
        let mut prev = d;
        for (i, &w) in config.hidden.iter().enumerate() {
            let std = (1.0 / prev as f64).sqrt();
            p.insert(&format!("ctrl.l{}.w", i + 1), rand_matrix(&mut rng, w, prev, std))?;
            p.insert(&format!("ctrl.l{}.b", i + 1), Tensor::zeros(Shape::Vector(w)))?;
            prev = w;
        }
        let tstd = (1.0 / config.time_embed_dim as f64).sqrt();
        p.insert(
            "ctrl.time.w",
            rand_matrix(&mut rng, config.hidden[0], config.time_embed_dim, tstd),
        )?;
        for (i, &w) in config.hidden.iter().enumerate() {
            let weight = if proj_std == 0.0 {
                Tensor::zeros(Shape::Matrix(w, w))
            } else {
                rand_matrix(&mut rng, w, w, proj_std)
            };
            p.insert(&format!("ctrl.proj{}.w", i + 1), weight)?;
            p.insert(&format!("ctrl.proj{}.b", i + 1), Tensor::zeros(Shape::Vector(w)))?;
        }
        Ok(ControlBranch { config, params: p })
    }
}

// ---- forward builders ----

/// Residual features, one per level; `levels[i]` has width `hidden[i]`.
#[derive(Clone, Debug)]
pub struct FeatureStack {
    pub levels: Vec<Var>,
}

fn affine(g: &Graph, p: &BoundParams, w: &str, b: &str, x: Var) -> Result<Var> {
    let pre = g.matvec(p.get(w)?, x)?;
    g.add(pre, p.get(b)?)
}

fn encoder_stack(
    g: &Graph,
    cfg: &ModelConfig,
    p: &BoundParams,
    prefix: &str,
    x0: Var,
    t: usize,
) -> Result<FeatureStack> {
    let tau = g.constant(time_embedding(t, cfg.time_embed_dim));
    let mut h = x0;
    let mut levels = Vec::with_capacity(cfg.stack_len());
    for i in 1..=cfg.stack_len() {
        let mut pre = affine(g, p, &format!("{prefix}.l{i}.w"), &format!("{prefix}.l{i}.b"), h)?;
        if i == 1 {
            pre = g.add(pre, g.matvec(p.get(&format!("{prefix}.time.w"))?, tau)?)?;
        }
        h = g.silu(pre);
        levels.push(h);
    }
    Ok(FeatureStack { levels })
}

/// Base encoder: residual feature per level from `x_t` and the time embedding.
pub fn encode(g: &Graph, cfg: &ModelConfig, base: &BoundParams, x: Var, t: usize) -> Result<FeatureStack> {
    check_input(g, cfg, x, "encode")?;
    encoder_stack(g, cfg, base, "enc", x, t)
}

/// Control stack: mirrored encoder on `x + embed(condition)`, each feature
/// passed through the branch's near-zero projection.
pub fn control(
    g: &Graph,
    cfg: &ModelConfig,
    branch: &BoundParams,
    x: Var,
    cond: &Condition,
    t: usize,
) -> Result<FeatureStack> {
    check_input(g, cfg, x, "control")?;
    if cond.dim() != cfg.data_dim {
        return Err(Error::Shape {
            op: "control",
            msg: format!("condition dim {} vs data dim {}", cond.dim(), cfg.data_dim),
        });
    }
    let mut cvec = cond.mask.clone();
    cvec.extend_from_slice(&cond.values);
    let c = g.constant(Tensor::vector(cvec));
    let embed = g.add(g.matvec(branch.get("ctrl.embed.w")?, c)?, branch.get("ctrl.embed.b")?)?;
    let g0 = g.add(x, embed)?;
    let raw = encoder_stack(g, cfg, branch, "ctrl", g0, t)?;
    let levels = raw
        .levels
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            affine(g, branch, &format!("ctrl.proj{}.w", i + 1), &format!("ctrl.proj{}.b", i + 1), h)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureStack { levels })
}

/// Decoder: walks the stack from the deepest feature down, concatenating each
/// shallower one, and maps the final width back to data space.
pub fn decode(g: &Graph, cfg: &ModelConfig, base: &BoundParams, stack: &FeatureStack) -> Result<Var> {
    if stack.levels.len() != cfg.stack_len() {
        return Err(Error::Shape {
            op: "decode",
            msg: format!("stack has {} levels, config wants {}", stack.levels.len(), cfg.stack_len()),
        });
    }
    let mut d = stack.levels[cfg.levels];
    for i in (1..=cfg.levels).rev() {
        let cat = g.concat(d, stack.levels[i - 1])?;
        let pre = affine(g, base, &format!("dec.l{i}.w"), &format!("dec.l{i}.b"), cat)?;
        d = g.silu(pre);
    }
    affine(g, base, "dec.out.w", "dec.out.b", d)
}

/// How control stacks enter the decoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InjectionMode {
    /// Plain per-level sum `f_e + Σ f_c`.
    VanillaAdd,
    /// Control stacks merged pairwise by weighted combination, then injected
    /// with the data-dependent gain.
    #[default]
    MinimalImpact,
}

/// One control branch application: bound parameters plus the condition.
pub struct ControlSpec<'a> {
    pub params: &'a BoundParams,
    pub condition: &'a Condition,
}

/// Everything fixed across calls when applying the full model.
pub struct ScoreParts<'a> {
    pub config: &'a ModelConfig,
    pub base: &'a BoundParams,
    pub controls: Vec<ControlSpec<'a>>,
    pub mode: InjectionMode,
    pub combine: CombineConfig,
    pub trace: Option<&'a CombineTrace>,
}

fn check_input(g: &Graph, cfg: &ModelConfig, x: Var, op: &'static str) -> Result<()> {
    if g.shape(x) != Shape::Vector(cfg.data_dim) {
        return Err(Error::Shape {
            op,
            msg: format!("input {} vs data dim {}", g.shape(x), cfg.data_dim),
        });
    }
    Ok(())
}

fn combined_stack(
    g: &Graph,
    parts: &ScoreParts,
    fe: FeatureStack,
    stacks: Vec<FeatureStack>,
) -> Result<FeatureStack> {
    if stacks.is_empty() {
        return Ok(fe);
    }
    match parts.mode {
        InjectionMode::VanillaAdd => {
            let levels = fe
                .levels
                .iter()
                .enumerate()
                .map(|(i, &e)| {
                    let mut vars = vec![e];
                    vars.extend(stacks.iter().map(|s| s.levels[i]));
                    g.add_all(&vars)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(FeatureStack { levels })
        }
        InjectionMode::MinimalImpact => {
            let mut it = stacks.into_iter();
            let mut merged = it.next().expect("nonempty");
            for next in it {
                merged = add_com_stack(g, &merged, &next, parts.combine, parts.trace)?;
            }
            add_inj_stack(g, &fe, &merged, parts.combine, parts.trace)
        }
    }
}

fn noise_pred_inner(g: &Graph, parts: &ScoreParts, x_enc: Var, x_ctrl: Var, t: usize) -> Result<Var> {
    let fe = encode(g, parts.config, parts.base, x_enc, t)?;
    let stacks = parts
        .controls
        .iter()
        .map(|c| control(g, parts.config, c.params, x_ctrl, c.condition, t))
        .collect::<Result<Vec<_>>>()?;
    let combined = combined_stack(g, parts, fe, stacks)?;
    decode(g, parts.config, parts.base, &combined)
}

/// Full model output ε̂(x, t) with any number of control branches.
pub fn noise_pred(g: &Graph, parts: &ScoreParts, x: Var, t: usize) -> Result<Var> {
    noise_pred_inner(g, parts, x, x, t)
}

/// Like [`noise_pred`] but with separate inputs for the encoder path and the
/// control path, so the two Jacobian contributions can be read off
/// independently (both paths see the same point when `x_e == x_c`).
pub fn noise_pred_split(g: &Graph, parts: &ScoreParts, x_enc: Var, x_ctrl: Var, t: usize) -> Result<Var> {
    noise_pred_inner(g, parts, x_enc, x_ctrl, t)
}

/// Score estimate −ε̂/σ_t. Rejects σ_t ≤ 0 (the t = 0 endpoint has no noise
/// to invert).
pub fn score(g: &Graph, parts: &ScoreParts, x: Var, t: usize, sigma_t: f64) -> Result<Var> {
    if sigma_t <= 0.0 {
        return Err(Error::Invalid(format!("score needs sigma > 0, got {sigma_t}")));
    }
    Ok(g.scale(noise_pred(g, parts, x, t)?, -1.0 / sigma_t))
}

/// Split-input score, same σ handling as [`score`].
pub fn score_split(
    g: &Graph,
    parts: &ScoreParts,
    x_enc: Var,
    x_ctrl: Var,
    t: usize,
    sigma_t: f64,
) -> Result<Var> {
    if sigma_t <= 0.0 {
        return Err(Error::Invalid(format!("score needs sigma > 0, got {sigma_t}")));
    }
    Ok(g.scale(noise_pred_split(g, parts, x_enc, x_ctrl, t)?, -1.0 / sigma_t))
}
