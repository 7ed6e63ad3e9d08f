//! Feature injection and combination with gradient-balancing coefficients.
//!
//! Both operators are driven by one scalar per level: λ* minimizes the norm
//! of a convex combination of the two feature vectors (the classic
//! multi-gradient balance point), computed over the flattened features of a
//! single sample. `add_com` mixes two control stacks with weights derived
//! from λ*; `add_inj` adds a control stack onto the encoder stack with gain
//! λ = λ*/(1−λ*) clamped to [0, 20]. By default λ is treated as a per-step
//! constant in derivative passes (a config switch lets gradients flow through
//! it for ablations).

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::scorenet::FeatureStack;
use crate::{Error, Result};

/// Squared-distance threshold under which the two features are treated as
/// coincident and λ* falls back to 1/2.
pub const DEGENERATE_EPS: f64 = 1e-12;

/// Upper clamp for the injection gain λ = λ*/(1−λ*).
pub const LAMBDA_MAX: f64 = 20.0;

/// Which convex weights the combination uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CombinationFormula {
    /// Weights (1−λ*, λ*): the reflection of the minimum-norm point through
    /// the segment midpoint. This is the default.
    #[default]
    Reflected,
    /// Weights (λ*, 1−λ*): the exact minimum-norm point of the segment.
    MinNorm,
}

/// Whether derivative passes see λ as a constant or as a function of the
/// features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaGradients {
    /// λ* and λ are computed from current values and enter the graph as
    /// constants (per-step coefficients).
    #[default]
    Frozen,
    /// λ* and λ are built from graph nodes so gradients flow through them.
    /// Saturated regimes (clamped λ*, clamped λ) have zero gradient and are
    /// emitted as constants.
    Tracked,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CombineConfig {
    #[serde(default)]
    pub formula: CombinationFormula,
    #[serde(default)]
    pub lambda_gradients: LambdaGradients,
}

/// Records the order in which the two operators fire, so pipelines can assert
/// "combine before inject" without inspecting internals.
#[derive(Debug, Default)]
pub struct CombineTrace {
    pub events: RefCell<Vec<TraceEvent>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceEvent {
    Combine { level: usize },
    Inject { level: usize },
}

impl CombineTrace {
    pub fn new() -> Self {
        Self::default()
    }

    fn record(trace: Option<&CombineTrace>, ev: TraceEvent) {
        if let Some(t) = trace {
            t.events.borrow_mut().push(ev);
        }
    }

    pub fn take(&self) -> Vec<TraceEvent> {
        std::mem::take(&mut self.events.borrow_mut())
    }
}

/// λ*(v1, v2) = clamp( (v2−v1)ᵀv2 / ‖v2−v1‖², [0,1] ), with 1/2 at the
/// coincident degenerate point.
pub fn lambda_star(v1: &[f64], v2: &[f64]) -> f64 {
    debug_assert_eq!(v1.len(), v2.len());
    let mut denom = 0.0;
    let mut num = 0.0;
    for (&a, &b) in v1.iter().zip(v2) {
        let d = b - a;
        denom += d * d;
        num += d * b;
    }
    if denom < DEGENERATE_EPS {
        0.5
    } else {
        (num / denom).clamp(0.0, 1.0)
    }
}

/// Convex weights (on f1, f2) the combination uses for the given formula.
pub fn combination_weights(ls: f64, formula: CombinationFormula) -> (f64, f64) {
    match formula {
        CombinationFormula::Reflected => (1.0 - ls, ls),
        CombinationFormula::MinNorm => (ls, 1.0 - ls),
    }
}

/// Injection gain derived from λ*. Under the reflected formula this is
/// λ*/(1−λ*); under min-norm the placement swaps to (1−λ*)/λ*. Both are
/// clamped to [0, LAMBDA_MAX] (the pole maps to the clamp).
pub fn lambda_inj_from_star(ls: f64, formula: CombinationFormula) -> f64 {
    let (w1, w2) = combination_weights(ls, formula);
    let raw = w2 / w1; // w1 == 0 gives +inf, which clamps to LAMBDA_MAX
    raw.clamp(0.0, LAMBDA_MAX)
}

pub fn lambda_inj(v1: &[f64], v2: &[f64], formula: CombinationFormula) -> f64 {
    lambda_inj_from_star(lambda_star(v1, v2), formula)
}

/// f_e + λ(f_e, f_c)·f_c on plain values.
pub fn add_inj_values(fe: &[f64], fc: &[f64], formula: CombinationFormula) -> Vec<f64> {
    let lam = lambda_inj(fe, fc, formula);
    fe.iter().zip(fc).map(|(&a, &b)| a + lam * b).collect()
}

/// Convex combination of two control features on plain values.
pub fn add_com_values(f1: &[f64], f2: &[f64], formula: CombinationFormula) -> Vec<f64> {
    let (w1, w2) = combination_weights(lambda_star(f1, f2), formula);
    f1.iter().zip(f2).map(|(&a, &b)| w1 * a + w2 * b).collect()
}

/// λ* as either a frozen constant or a differentiable scalar node.
enum Coeff {
    Const(f64),
    Node(Var),
}

impl Coeff {
    fn apply(&self, g: &Graph, v: Var) -> Result<Var> {
        match *self {
            Coeff::Const(c) => Ok(g.scale(v, c)),
            Coeff::Node(n) => {
                let b = g.broadcast_to(n, g.shape(v))?;
                g.mul(b, v)
            }
        }
    }
}

/// Margin inside [0,1] beyond which λ* is saturated: the clamp gradient is
/// zero there, so the coefficient is emitted as a constant even in tracked
/// mode (this also keeps 1/(1−λ*) finite).
const TRACK_MARGIN: f64 = 1e-9;

fn lambda_star_coeff(g: &Graph, v1: Var, v2: Var, cfg: CombineConfig) -> Result<Coeff> {
    let ls_value = lambda_star(g.value(v1).data(), g.value(v2).data());
    match cfg.lambda_gradients {
        LambdaGradients::Frozen => Ok(Coeff::Const(ls_value)),
        LambdaGradients::Tracked => {
            if !(TRACK_MARGIN..=1.0 - TRACK_MARGIN).contains(&ls_value) {
                return Ok(Coeff::Const(ls_value));
            }
            let d = g.sub(v2, v1)?;
            let denom = g.norm_sq(d);
            let num = g.dot(d, v2)?;
            let raw = g.mul(num, g.recip(denom))?;
            Ok(Coeff::Node(g.clamp(raw, 0.0, 1.0)))
        }
    }
}

fn complement(g: &Graph, c: &Coeff) -> Result<Coeff> {
    Ok(match *c {
        Coeff::Const(v) => Coeff::Const(1.0 - v),
        Coeff::Node(n) => {
            let one = g.scalar(1.0);
            Coeff::Node(g.sub(one, n)?)
        }
    })
}

/// Weights on (f1, f2) for the combination, honoring the formula switch.
fn com_coeffs(g: &Graph, f1: Var, f2: Var, cfg: CombineConfig) -> Result<(Coeff, Coeff)> {
    let ls = lambda_star_coeff(g, f1, f2, cfg)?;
    let co = complement(g, &ls)?;
    Ok(match cfg.formula {
        CombinationFormula::Reflected => (co, ls),
        CombinationFormula::MinNorm => (ls, co),
    })
}

/// Injection gain as a coefficient, honoring formula and gradient mode.
fn inj_coeff(g: &Graph, fe: Var, fc: Var, cfg: CombineConfig) -> Result<Coeff> {
    let (w1, w2) = com_coeffs(g, fe, fc, cfg)?;
    match (w1, w2) {
        (Coeff::Const(a), Coeff::Const(b)) => {
            Ok(Coeff::Const((b / a).clamp(0.0, LAMBDA_MAX)))
        }
        (w1, w2) => {
            // Tracked interior regime: both weights are graph nodes bounded
            // away from zero by TRACK_MARGIN, so the reciprocal is finite.
            let w1 = match w1 {
                Coeff::Node(n) => n,
                Coeff::Const(c) => g.scalar(c),
            };
            let w2 = match w2 {
                Coeff::Node(n) => n,
                Coeff::Const(c) => g.scalar(c),
            };
            let ratio = g.mul(w2, g.recip(w1))?;
            Ok(Coeff::Node(g.clamp(ratio, 0.0, LAMBDA_MAX)))
        }
    }
}

/// Graph-level f_e + λ·f_c for one level.
pub fn add_inj_node(
    g: &Graph,
    fe: Var,
    fc: Var,
    cfg: CombineConfig,
    level: usize,
    trace: Option<&CombineTrace>,
) -> Result<Var> {
    if g.shape(fe) != g.shape(fc) {
        return Err(Error::Shape {
            op: "add_inj",
            msg: format!("level {level}: {} vs {}", g.shape(fe), g.shape(fc)),
        });
    }
    CombineTrace::record(trace, TraceEvent::Inject { level });
    let lam = inj_coeff(g, fe, fc, cfg)?;
    let scaled = lam.apply(g, fc)?;
    g.add(fe, scaled)
}

/// Graph-level convex combination of two control features for one level.
pub fn add_com_node(
    g: &Graph,
    f1: Var,
    f2: Var,
    cfg: CombineConfig,
    level: usize,
    trace: Option<&CombineTrace>,
) -> Result<Var> {
    if g.shape(f1) != g.shape(f2) {
        return Err(Error::Shape {
            op: "add_com",
            msg: format!("level {level}: {} vs {}", g.shape(f1), g.shape(f2)),
        });
    }
    CombineTrace::record(trace, TraceEvent::Combine { level });
    let (w1, w2) = com_coeffs(g, f1, f2, cfg)?;
    let a = w1.apply(g, f1)?;
    let b = w2.apply(g, f2)?;
    g.add(a, b)
}

fn check_stack_lengths(op: &'static str, a: &FeatureStack, b: &FeatureStack) -> Result<()> {
    if a.levels.len() != b.levels.len() {
        return Err(Error::Shape {
            op,
            msg: format!("stacks have {} vs {} levels", a.levels.len(), b.levels.len()),
        });
    }
    Ok(())
}

/// Per-level injection of a control stack into an encoder stack.
pub fn add_inj_stack(
    g: &Graph,
    fe: &FeatureStack,
    fc: &FeatureStack,
    cfg: CombineConfig,
    trace: Option<&CombineTrace>,
) -> Result<FeatureStack> {
    check_stack_lengths("add_inj", fe, fc)?;
    let levels = fe
        .levels
        .iter()
        .zip(&fc.levels)
        .enumerate()
        .map(|(i, (&e, &c))| add_inj_node(g, e, c, cfg, i + 1, trace))
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureStack { levels })
}

/// Per-level combination of two control stacks.
pub fn add_com_stack(
    g: &Graph,
    f1: &FeatureStack,
    f2: &FeatureStack,
    cfg: CombineConfig,
    trace: Option<&CombineTrace>,
) -> Result<FeatureStack> {
    check_stack_lengths("add_com", f1, f2)?;
    let levels = f1
        .levels
        .iter()
        .zip(&f2.levels)
        .enumerate()
        .map(|(i, (&a, &b))| add_com_node(g, a, b, cfg, i + 1, trace))
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureStack { levels })
}
