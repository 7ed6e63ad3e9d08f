//! Jacobian-symmetry machinery: exact Jacobians as oracles, Hutchinson
//! estimators of the symmetry defect, the split of the defect into
//! encoder-only / cross / control pieces, the closed-form bound linking the
//! control-only surrogate to the full cross defect, and the audit report.
//!
//! A vector field s(x) is conservative iff its Jacobian is symmetric, so the
//! central quantity is L_QC(J) = ½‖J − Jᵀ‖²_F = tr(JJᵀ) − tr(JJ). It is
//! estimated without materializing J via probes v: with u = Jᵀv (one vjp)
//! and w = Jv (one jvp), E[‖u‖² − u·w] = L_QC for any probe distribution
//! with mean zero and identity covariance.
//!
//! All defects are evaluated on the score s = −ε̂/σ_t, so each timestep is
//! implicitly weighted by 1/σ_t². Injection coefficients stay frozen during
//! differentiation (the combine module's default), which is what makes the
//! encoder/control Jacobian split exactly additive.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::combine::CombineConfig;
use crate::diffusion::NoiseSchedule;
use crate::scorenet::{
    score, score_split, BoundParams, ControlSpec, InjectionMode, ModelConfig, ParamSet, ScoreParts,
};
use crate::synthdata::Condition;
use crate::util::{mean_compensated, stream_rng, sum_compensated};
use crate::{Error, Result};

/// Cost guard for explicit Jacobians.
pub const MAX_EXACT_DIM: usize = 32;
/// Slack allowed when asserting the closed-form bound.
pub const BOUND_TOL: f64 = 1e-8;

const EVAL_POINT_STREAM: u64 = 400;
const PROBE_STREAM: u64 = 401;

// ---- matrix-level losses ----

fn check_square(j: &[Vec<f64>], op: &'static str) -> Result<usize> {
    let n = j.len();
    if n == 0 || j.iter().any(|row| row.len() != n) {
        return Err(Error::Shape { op, msg: "matrix must be square and nonempty".into() });
    }
    Ok(n)
}

/// ½‖J − Jᵀ‖²_F.
pub fn l_qc_exact(j: &[Vec<f64>]) -> Result<f64> {
    let n = check_square(j, "l_qc_exact")?;
    let mut acc = 0.0;
    for r in 0..n {
        for c in 0..n {
            let d = j[r][c] - j[c][r];
            acc += d * d;
        }
    }
    Ok(0.5 * acc)
}

/// Same defect in trace form: tr(JJᵀ) − tr(JJ).
pub fn l_qc_trace_form(j: &[Vec<f64>]) -> Result<f64> {
    let n = check_square(j, "l_qc_trace_form")?;
    let mut acc = 0.0;
    for r in 0..n {
        for c in 0..n {
            acc += j[r][c] * j[r][c] - j[r][c] * j[c][r];
        }
    }
    Ok(acc)
}

pub fn frob_norm(j: &[Vec<f64>]) -> f64 {
    j.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

// ---- probes ----

/// Probe vectors with mean 0 and identity covariance. Rademacher ±1 entries
/// give the minimum-variance Hutchinson estimator.
#[derive(Clone, Debug)]
pub struct ProbeBatch {
    pub probes: Vec<Vec<f64>>,
}

impl ProbeBatch {
    pub fn rademacher(dim: usize, count: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        use rand::Rng;
        let probes = (0..count)
            .map(|_| (0..dim).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect())
            .collect();
        ProbeBatch { probes }
    }

    pub fn len(&self) -> usize {
        self.probes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }
}

// ---- graph-level estimators (differentiable) ----

/// Per-probe symmetry-defect estimate ‖Jᵀv‖² − (Jᵀv)·(Jv) as a scalar node.
/// Built from one vjp and one jvp, so it admits a further gradient pass.
pub fn qc_probe_node(g: &Graph, output: Var, input: Var, probe: &[f64]) -> Result<Var> {
    let v = g.constant(Tensor::vector(probe.to_vec()));
    let u = g.vjp(output, input, v)?;
    let w = g.jvp(output, input, v)?;
    g.sub(g.norm_sq(u), g.dot(u, w)?)
}

/// Per-probe estimate of the defect added by the control path on top of the
/// encoder path: symmetrized cross terms plus the control-only piece,
///   2uₑ·u_c − uₑ·w_c − u_c·wₑ + ‖u_c‖² − u_c·w_c,
/// with u = vjp, w = jvp along each path. The mixed products are split
/// symmetrically so the estimate matches the full-minus-encoder defect on
/// every single probe, not just in expectation.
pub fn qc_cross_probe_node(
    g: &Graph,
    output: Var,
    x_enc: Var,
    x_ctrl: Var,
    probe: &[f64],
) -> Result<Var> {
    let v = g.constant(Tensor::vector(probe.to_vec()));
    let u_e = g.vjp(output, x_enc, v)?;
    let w_e = g.jvp(output, x_enc, v)?;
    let u_c = g.vjp(output, x_ctrl, v)?;
    let w_c = g.jvp(output, x_ctrl, v)?;
    let mut acc = g.scale(g.dot(u_e, u_c)?, 2.0);
    acc = g.sub(acc, g.dot(u_e, w_c)?)?;
    acc = g.sub(acc, g.dot(u_c, w_e)?)?;
    acc = g.add(acc, g.norm_sq(u_c))?;
    g.sub(acc, g.dot(u_c, w_c)?)
}

/// Mean of per-probe estimates as a node (the trainable stage-2 penalty when
/// `input` is the control-path input).
pub fn qc_mean_node(g: &Graph, output: Var, input: Var, probes: &ProbeBatch) -> Result<Var> {
    if probes.is_empty() {
        return Err(Error::Invalid("at least one probe required".into()));
    }
    let nodes = probes
        .probes
        .iter()
        .map(|p| qc_probe_node(g, output, input, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(g.scale(g.add_all(&nodes)?, 1.0 / nodes.len() as f64))
}

// ---- model-level evaluation ----

/// Which input the Jacobian is taken against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JacobianPath {
    /// Joint input: ∂s(x, t)/∂x with x feeding both paths.
    Full,
    /// ∂s/∂x_e of the split form.
    Encoder,
    /// ∂s/∂x_c of the split form.
    Control,
}

/// A score model described by values (not yet bound to any graph):
/// base parameters plus any number of (branch, condition) pairs.
pub struct ScoreModel<'a> {
    pub config: &'a ModelConfig,
    pub base: &'a ParamSet,
    pub branches: Vec<(&'a ParamSet, &'a Condition)>,
    pub mode: InjectionMode,
    pub combine: CombineConfig,
}

impl ScoreModel<'_> {
    fn bind<'g>(&self, g: &'g Graph, trainable_branches: bool) -> (BoundParams, Vec<BoundParams>) {
        let base = BoundParams::bind(g, self.base, false);
        let branches = self
            .branches
            .iter()
            .map(|(p, _)| BoundParams::bind(g, p, trainable_branches))
            .collect();
        (base, branches)
    }

    fn parts<'s>(
        &'s self,
        base: &'s BoundParams,
        branches: &'s [BoundParams],
    ) -> ScoreParts<'s> {
        ScoreParts {
            config: self.config,
            base,
            controls: branches
                .iter()
                .zip(&self.branches)
                .map(|(bp, (_, cond))| ControlSpec { params: bp, condition: cond })
                .collect(),
            mode: self.mode,
            combine: self.combine,
            trace: None,
        }
    }
}

/// One evaluation state: a timestep t ≥ 1 and a noised point x_t.
pub type EvalPoint = (usize, Vec<f64>);

/// Noised evaluation states drawn the same way training does: t uniform on
/// 1..=T, x_t a forward perturbation of a random dataset row.
pub fn draw_eval_points(
    schedule: &NoiseSchedule,
    data: &[Vec<f64>],
    n: usize,
    seed: u64,
) -> Result<Vec<EvalPoint>> {
    use rand::Rng;
    if data.is_empty() {
        return Err(Error::Invalid("eval points need a nonempty dataset".into()));
    }
    let mut rng = stream_rng(seed, EVAL_POINT_STREAM);
    Ok((0..n)
        .map(|_| {
            let t = rng.random_range(1..=schedule.horizon());
            let x0 = &data[rng.random_range(0..data.len())];
            let (xt, _) = crate::diffusion::perturb(schedule, x0, t, &mut rng);
            (t, xt)
        })
        .collect())
}

/// Deterministic probe batch for audits.
pub fn draw_probes(dim: usize, count: usize, seed: u64) -> ProbeBatch {
    let mut rng = stream_rng(seed, PROBE_STREAM);
    ProbeBatch::rademacher(dim, count, &mut rng)
}

fn check_dim_guard(d: usize) -> Result<()> {
    if d > MAX_EXACT_DIM {
        return Err(Error::Invalid(format!(
            "exact Jacobians are guarded to dim ≤ {MAX_EXACT_DIM}, got {d}"
        )));
    }
    Ok(())
}

/// Explicit Jacobian of `output` w.r.t. `input`, one jvp per basis vector.
/// Row-major: result[i][j] = ∂output_i/∂input_j.
pub fn jacobian_columns(g: &Graph, output: Var, input: Var) -> Result<Vec<Vec<f64>>> {
    let out_n = g.shape(output).numel();
    let in_n = g.shape(input).numel();
    check_dim_guard(out_n.max(in_n))?;
    let mut j = vec![vec![0.0; in_n]; out_n];
    for col in 0..in_n {
        let e = g.constant(Tensor::basis(in_n, col));
        let col_v = g.value(g.jvp(output, input, e)?);
        for (row, val) in col_v.data().iter().enumerate() {
            j[row][col] = *val;
        }
    }
    Ok(j)
}

fn split_graph(
    model: &ScoreModel,
    schedule: &NoiseSchedule,
    x: &[f64],
    t: usize,
    g: &Graph,
    trainable_branches: bool,
) -> Result<(Var, Var, Var, Vec<BoundParams>)> {
    let (base, branches) = model.bind(g, trainable_branches);
    let xe = g.input(Tensor::vector(x.to_vec()));
    let xc = g.input(Tensor::vector(x.to_vec()));
    let parts = model.parts(&base, &branches);
    let s = score_split(g, &parts, xe, xc, t, schedule.sigma(t))?;
    Ok((xe, xc, s, branches))
}

fn joint_graph(
    model: &ScoreModel,
    schedule: &NoiseSchedule,
    x: &[f64],
    t: usize,
    g: &Graph,
) -> Result<(Var, Var)> {
    let (base, branches) = model.bind(g, false);
    let xin = g.input(Tensor::vector(x.to_vec()));
    let parts = model.parts(&base, &branches);
    let s = score(g, &parts, xin, t, schedule.sigma(t))?;
    Ok((xin, s))
}

/// Exact score Jacobian along the selected path at one (t, x_t).
pub fn exact_jacobian(
    model: &ScoreModel,
    schedule: &NoiseSchedule,
    x: &[f64],
    t: usize,
    path: JacobianPath,
) -> Result<Vec<Vec<f64>>> {
    check_dim_guard(model.config.data_dim)?;
    let g = Graph::new();
    match path {
        JacobianPath::Full => {
            let (xin, s) = joint_graph(model, schedule, x, t, &g)?;
            jacobian_columns(&g, s, xin)
        }
        JacobianPath::Encoder => {
            let (xe, _, s, _) = split_graph(model, schedule, x, t, &g, false)?;
            jacobian_columns(&g, s, xe)
        }
        JacobianPath::Control => {
            let (_, xc, s, _) = split_graph(model, schedule, x, t, &g, false)?;
            jacobian_columns(&g, s, xc)
        }
    }
}

/// Hutchinson estimate of the symmetry defect along a path, averaged over
/// evaluation points and probes. Points evaluate in parallel; aggregation is
/// compensated and order-fixed, so thread scheduling cannot move the result.
pub fn hutchinson_qc(
    model: &ScoreModel,
    schedule: &NoiseSchedule,
    points: &[EvalPoint],
    probes: &ProbeBatch,
    path: JacobianPath,
) -> Result<f64> {
    if points.is_empty() || probes.is_empty() {
        return Err(Error::Invalid("hutchinson_qc needs points and probes".into()));
    }
    let per_point: Vec<f64> = points
        .par_iter()
        .map(|(t, x)| -> Result<f64> {
            let g = Graph::new();
            let (out, input) = match path {
                JacobianPath::Full => {
                    let (xin, s) = joint_graph(model, schedule, x, *t, &g)?;
                    (s, xin)
                }
                JacobianPath::Encoder => {
                    let (xe, _, s, _) = split_graph(model, schedule, x, *t, &g, false)?;
                    (s, xe)
                }
                JacobianPath::Control => {
                    let (_, xc, s, _) = split_graph(model, schedule, x, *t, &g, false)?;
                    (s, xc)
                }
            };
            let vals = probes
                .probes
                .iter()
                .map(|p| Ok(g.value(qc_probe_node(&g, out, input, p)?).item()))
                .collect::<Result<Vec<_>>>()?;
            Ok(mean_compensated(&vals))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_compensated(&per_point))
}

/// Hutchinson estimate of the control-added defect (cross + control-only
/// terms), averaged over points and probes.
pub fn qc_cross(
    model: &ScoreModel,
    schedule: &NoiseSchedule,
    points: &[EvalPoint],
    probes: &ProbeBatch,
) -> Result<f64> {
    if model.branches.is_empty() {
        return Err(Error::Invalid("qc_cross needs a control branch".into()));
    }
    let per_point: Vec<f64> = points
        .par_iter()
        .map(|(t, x)| -> Result<f64> {
            let g = Graph::new();
            let (xe, xc, s, _) = split_graph(model, schedule, x, *t, &g, false)?;
            let vals = probes
                .probes
                .iter()
                .map(|p| Ok(g.value(qc_cross_probe_node(&g, s, xe, xc, p)?).item()))
                .collect::<Result<Vec<_>>>()?;
            Ok(mean_compensated(&vals))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_compensated(&per_point))
}

/// Control-only defect estimate — the trainable surrogate, evaluated here as
/// a plain number.
pub fn qc_simple(
    model: &ScoreModel,
    schedule: &NoiseSchedule,
    points: &[EvalPoint],
    probes: &ProbeBatch,
) -> Result<f64> {
    if model.branches.is_empty() {
        return Err(Error::Invalid("qc_simple needs a control branch".into()));
    }
    hutchinson_qc(model, schedule, points, probes, JacobianPath::Control)
}

/// Mean exact control-path defect ½‖Jᶜ − Jᶜᵀ‖²_F over the evaluation set.
pub fn asym(model: &ScoreModel, schedule: &NoiseSchedule, points: &[EvalPoint]) -> Result<f64> {
    if model.branches.is_empty() {
        return Err(Error::Invalid("asym needs a control branch".into()));
    }
    let vals: Vec<f64> = points
        .par_iter()
        .map(|(t, x)| {
            let jc = exact_jacobian(model, schedule, x, *t, JacobianPath::Control)?;
            l_qc_exact(&jc)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_compensated(&vals))
}

// ---- audit ----

/// Flat summary of one audit pass. Exact quantities come from explicit
/// Jacobians; `l_qc_est` is the probe estimate of `l_qc` on the same points.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConservReport {
    pub points: usize,
    pub probes: usize,
    /// Exact mean full-score defect ½‖J − Jᵀ‖²_F.
    pub l_qc: f64,
    /// Hutchinson estimate of the same quantity.
    pub l_qc_est: f64,
    /// Exact mean defect added by the control path (full minus encoder-only).
    pub l_qc_c: f64,
    /// Exact mean control-only defect, trace form.
    pub l_qc_simple: f64,
    /// Exact mean control-only defect, direct ½‖Jᶜ − Jᶜᵀ‖²_F form.
    pub asym: f64,
    /// Largest observed encoder-path Jacobian norm ‖Jᵉ‖_F.
    pub m_hat: f64,
    /// 2√2·M̂·√l_qc_simple + l_qc_simple.
    pub bound_rhs: f64,
    /// Smallest pointwise slack of the bound (≥ −1e−8 when it holds).
    pub min_bound_slack: f64,
    pub worst_point: usize,
    pub worst_point_t: usize,
    /// Max relative ‖J − (Jᵉ + Jᶜ)‖_F across points.
    pub additivity_residual: f64,
    /// Max relative per-probe mismatch of full vs encoder-only + cross
    /// estimates on shared probes.
    pub probe_identity_residual: f64,
    /// ‖∇_φ (encoder-only estimate)‖ / ‖∇_φ (control-only estimate)‖ — how
    /// far the "encoder term is φ-independent" idealization is from the
    /// truth. None when the denominator is numerically zero.
    pub assumption_ratio: Option<f64>,
}

struct PointAudit {
    l_full: f64,
    l_enc: f64,
    l_simple: f64,
    asym_direct: f64,
    est_full: f64,
    additivity_rel: f64,
    probe_identity_rel: f64,
    je_frob: f64,
    // flattened φ-gradients of the two probe estimates
    grad_eonly: Vec<f64>,
    grad_simple: Vec<f64>,
}

fn audit_point(
    model: &ScoreModel,
    schedule: &NoiseSchedule,
    t: usize,
    x: &[f64],
    probes: &ProbeBatch,
) -> Result<PointAudit> {
    // joint graph: exact full Jacobian + full-defect probe estimates
    let g = Graph::new();
    let (xin, s) = joint_graph(model, schedule, x, t, &g)?;
    let j_full = jacobian_columns(&g, s, xin)?;
    let full_probe_vals = probes
        .probes
        .iter()
        .map(|p| Ok(g.value(qc_probe_node(&g, s, xin, p)?).item()))
        .collect::<Result<Vec<_>>>()?;

    // split graph: path Jacobians, identity pieces, φ-gradients
    let g2 = Graph::new();
    let (xe, xc, s2, branches) = split_graph(model, schedule, x, t, &g2, true)?;
    let j_e = jacobian_columns(&g2, s2, xe)?;
    let j_c = jacobian_columns(&g2, s2, xc)?;

    let d = j_full.len();
    let mut add_res = 0.0;
    for r in 0..d {
        for c in 0..d {
            let diff = j_full[r][c] - (j_e[r][c] + j_c[r][c]);
            add_res += diff * diff;
        }
    }
    let additivity_rel = add_res.sqrt() / frob_norm(&j_full).max(1e-30);

    let mut eonly_nodes = Vec::with_capacity(probes.len());
    let mut probe_identity_rel = 0.0f64;
    let mut cross_nodes = Vec::with_capacity(probes.len());
    for (p, &full_val) in probes.probes.iter().zip(&full_probe_vals) {
        let eonly = qc_probe_node(&g2, s2, xe, p)?;
        let cross = qc_cross_probe_node(&g2, s2, xe, xc, p)?;
        let combined = g2.value(eonly).item() + g2.value(cross).item();
        let rel = (full_val - combined).abs() / full_val.abs().max(1.0);
        probe_identity_rel = probe_identity_rel.max(rel);
        eonly_nodes.push(eonly);
        cross_nodes.push(cross);
    }

    let phi_vars: Vec<Var> = branches.iter().flat_map(|b| b.vars()).collect();
    let flatten = |g: &Graph, nodes: &[Var]| -> Result<Vec<f64>> {
        let mean = g.scale(g.add_all(nodes)?, 1.0 / nodes.len() as f64);
        let grads = g.gradient(mean, &phi_vars)?;
        Ok(grads.iter().flat_map(|&v| g.value(v).data().to_vec()).collect())
    };
    let grad_eonly = flatten(&g2, &eonly_nodes)?;
    // control-only estimate = last two terms of the cross node; reuse the
    // plain probe estimator on the control input instead
    let simple_nodes = probes
        .probes
        .iter()
        .map(|p| qc_probe_node(&g2, s2, xc, p))
        .collect::<Result<Vec<_>>>()?;
    let grad_simple = flatten(&g2, &simple_nodes)?;

    Ok(PointAudit {
        l_full: l_qc_exact(&j_full)?,
        l_enc: l_qc_exact(&j_e)?,
        l_simple: l_qc_trace_form(&j_c)?,
        asym_direct: l_qc_exact(&j_c)?,
        est_full: mean_compensated(&full_probe_vals),
        additivity_rel,
        probe_identity_rel,
        je_frob: frob_norm(&j_e),
        grad_eonly,
        grad_simple,
    })
}

/// Full audit: exact and estimated defects, the additivity and per-probe
/// identity residuals, the pointwise bound check, and the φ-independence
/// ratio.
pub fn audit(
    model: &ScoreModel,
    schedule: &NoiseSchedule,
    points: &[EvalPoint],
    probes: &ProbeBatch,
) -> Result<ConservReport> {
    if model.branches.is_empty() {
        return Err(Error::Invalid("audit needs a control branch".into()));
    }
    if points.is_empty() || probes.is_empty() {
        return Err(Error::Invalid("audit needs points and probes".into()));
    }
    let audits: Vec<PointAudit> = points
        .par_iter()
        .map(|(t, x)| audit_point(model, schedule, *t, x, probes))
        .collect::<Result<Vec<_>>>()?;

    let m_hat = audits.iter().map(|a| a.je_frob).fold(0.0f64, f64::max);
    let mut min_slack = f64::INFINITY;
    let mut worst = 0usize;
    for (i, a) in audits.iter().enumerate() {
        let lhs = a.l_full - a.l_enc;
        let rhs = 2.0 * 2.0f64.sqrt() * m_hat * a.l_simple.max(0.0).sqrt() + a.l_simple;
        let slack = rhs - lhs;
        if slack < min_slack {
            min_slack = slack;
            worst = i;
        }
    }

    let mean = |f: &dyn Fn(&PointAudit) -> f64| {
        mean_compensated(&audits.iter().map(f).collect::<Vec<_>>())
    };
    let l_qc = mean(&|a| a.l_full);
    let l_qc_c = mean(&|a| a.l_full - a.l_enc);
    let l_qc_simple = mean(&|a| a.l_simple);
    let norm_of = |pick: &dyn Fn(&PointAudit) -> &Vec<f64>| {
        let mut acc: Vec<f64> = pick(&audits[0]).clone();
        for a in &audits[1..] {
            for (s, v) in acc.iter_mut().zip(pick(a)) {
                *s += v;
            }
        }
        let n = audits.len() as f64;
        (sum_compensated(acc.iter().map(|v| (v / n) * (v / n)))).sqrt()
    };
    let eonly_grad = norm_of(&|a| &a.grad_eonly);
    let simple_grad = norm_of(&|a| &a.grad_simple);
    let assumption_ratio =
        if simple_grad > 1e-12 { Some(eonly_grad / simple_grad) } else { None };

    Ok(ConservReport {
        points: points.len(),
        probes: probes.len(),
        l_qc,
        l_qc_est: mean(&|a| a.est_full),
        l_qc_c,
        l_qc_simple,
        asym: mean(&|a| a.asym_direct),
        m_hat,
        bound_rhs: 2.0 * 2.0f64.sqrt() * m_hat * l_qc_simple.max(0.0).sqrt() + l_qc_simple,
        min_bound_slack: min_slack,
        worst_point: worst,
        worst_point_t: points[worst].0,
        additivity_residual: audits.iter().map(|a| a.additivity_rel).fold(0.0, f64::max),
        probe_identity_residual: audits
            .iter()
            .map(|a| a.probe_identity_rel)
            .fold(0.0, f64::max),
        assumption_ratio,
    })
}

/// Asserts the control-defect bound from the report, pointwise and in
/// aggregate. Violations name the offending evaluation point.
pub fn check_bound(report: &ConservReport) -> Result<()> {
    if report.min_bound_slack < -BOUND_TOL {
        return Err(Error::Invalid(format!(
            "conservativity bound violated at point {} (t = {}): slack {}",
            report.worst_point, report.worst_point_t, report.min_bound_slack
        )));
    }
    if report.l_qc_c > report.bound_rhs + BOUND_TOL {
        return Err(Error::Invalid(format!(
            "aggregate conservativity bound violated: {} > {}",
            report.l_qc_c, report.bound_rhs
        )));
    }
    Ok(())
}
