//! Forward noising process, denoising losses, and the ancestral sampler.
//!
//! The forward process is variance-preserving: x_t = α_t x_0 + σ_t ε with
//! α_0 = 1 and σ_t = √(1 − α_t²), so α_t² + σ_t² = 1 at every step. Models
//! predict the noise ε̂; the score estimate is −ε̂/σ_t (undefined at t = 0,
//! which callers must reject). Sampling runs the standard discrete posterior
//! backwards from pure noise, with a deterministic final step and a hard
//! abort on any non-finite state.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::util::{normal_vec, stream_rng};
use crate::{Error, Result};

pub const DEFAULT_HORIZON: usize = 200;
/// Retention floor: keeps α_T strictly positive so x̂_0 = (x − σε̂)/α stays
/// finite at the noisiest step.
const ALPHA_FLOOR: f64 = 1e-4;
/// Terminal retention-squared for the linear family (α_T = 0.02).
const LINEAR_ABAR_END: f64 = 4e-4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleFamily {
    /// Squared-cosine retention with offset 0.008, normalized so α_0 = 1.
    #[default]
    Cosine,
    /// α_t² declines linearly from 1 to 4·10⁻⁴.
    LinearAlphaBar,
}

/// Precomputed α_t / σ_t tables for t = 0..=horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    family: ScheduleFamily,
    horizon: usize,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(family: ScheduleFamily, horizon: usize) -> Result<Self> {
        if horizon < 2 {
            return Err(Error::Config(format!("horizon must be at least 2, got {horizon}")));
        }
        let alpha: Vec<f64> = (0..=horizon)
            .map(|t| {
                let u = t as f64 / horizon as f64;
                let a = match family {
                    ScheduleFamily::Cosine => {
                        let s = 0.008;
                        let f = |u: f64| ((u + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos();
                        // ratio form keeps α_0 = 1 exact
                        f(u) / f(0.0)
                    }
                    ScheduleFamily::LinearAlphaBar => {
                        (1.0 - (1.0 - LINEAR_ABAR_END) * u).max(0.0).sqrt()
                    }
                };
                a.clamp(ALPHA_FLOOR, 1.0)
            })
            .collect();
        let sigma = alpha.iter().map(|a| (1.0 - a * a).sqrt()).collect();
        Ok(NoiseSchedule { family, horizon, alpha, sigma })
    }

    pub fn family(&self) -> ScheduleFamily {
        self.family
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Signal retention α_t; panics on t > horizon (programmer error).
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    /// ᾱ_t = α_t² in the usual discrete-time notation.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha[t] * self.alpha[t]
    }
}

/// One forward draw: returns (x_t, ε).
pub fn perturb(
    schedule: &NoiseSchedule,
    x0: &[f64],
    t: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, Vec<f64>) {
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    let eps = normal_vec(rng, x0.len());
    let xt = x0.iter().zip(&eps).map(|(x, e)| a * x + s * e).collect();
    (xt, eps)
}

/// Value-level score from a noise prediction: s = −ε̂/σ_t. The t = 0 endpoint
/// has σ = 0 and is rejected.
pub fn eps_to_score(schedule: &NoiseSchedule, t: usize, eps_hat: &[f64]) -> Result<Vec<f64>> {
    if t == 0 {
        return Err(Error::Invalid("score is undefined at t = 0 (no noise to invert)".into()));
    }
    let s = schedule.sigma(t);
    Ok(eps_hat.iter().map(|e| -e / s).collect())
}

/// Denoising loss for one pre-drawn (x_0, t, ε) triple: ‖ε̂(x_t, t) − ε‖²
/// with unit weight. `predict` appends the model's noise prediction for a
/// given input var and step to the same graph.
pub fn dsm_sample_loss(
    g: &Graph,
    schedule: &NoiseSchedule,
    predict: &dyn Fn(&Graph, Var, usize) -> Result<Var>,
    x0: &[f64],
    t: usize,
    eps: &[f64],
) -> Result<Var> {
    if t > schedule.horizon() {
        return Err(Error::Invalid(format!(
            "step {t} beyond horizon {}",
            schedule.horizon()
        )));
    }
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    let xt: Vec<f64> = x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect();
    let xt = g.constant(Tensor::vector(xt));
    let eps_hat = predict(g, xt, t)?;
    let target = g.constant(Tensor::vector(eps.to_vec()));
    let diff = g.sub(eps_hat, target)?;
    Ok(g.norm_sq(diff))
}

/// Value-level noise predictor used by the sampler: ε̂(x, t).
pub type SamplerPredict<'a> = dyn Fn(&[f64], usize) -> Result<Vec<f64>> + Sync + 'a;

fn check_finite(x: &[f64], t: usize, what: &str) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            step: t,
            msg: format!("{what} became non-finite during sampling"),
        });
    }
    Ok(())
}

/// Ancestral sampling from x_T ~ N(0, I) down to x_0. Posterior per step:
///   x̂_0 = (x_t − σ_t ε̂)/α_t
///   μ̃  = [√α̂_t (1−ᾱ_{t−1}) x_t + √ᾱ_{t−1} β_t x̂_0] / (1−ᾱ_t)
///   β̃  = (1−ᾱ_{t−1}) β_t / (1−ᾱ_t)
/// with α̂_t = ᾱ_t/ᾱ_{t−1}, β_t = 1−α̂_t; the final step takes x̂_0 with no
/// noise. Any non-finite state aborts with the offending step index.
pub fn ancestral_sample(
    schedule: &NoiseSchedule,
    predict: &SamplerPredict,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let horizon = schedule.horizon();
    let mut x = normal_vec(rng, dim);
    for t in (1..=horizon).rev() {
        let eps_hat = predict(&x, t)?;
        if eps_hat.len() != dim {
            return Err(Error::Shape {
                op: "sample",
                msg: format!("predictor returned {} values for dim {dim}", eps_hat.len()),
            });
        }
        check_finite(&eps_hat, t, "noise prediction")?;
        let (a_t, s_t) = (schedule.alpha(t), schedule.sigma(t));
        let x0_hat: Vec<f64> =
            x.iter().zip(&eps_hat).map(|(xt, e)| (xt - s_t * e) / a_t).collect();
        if t == 1 {
            x = x0_hat;
        } else {
            let abar_t = schedule.alpha_bar(t);
            let abar_prev = schedule.alpha_bar(t - 1);
            let ahat = abar_t / abar_prev;
            let beta = 1.0 - ahat;
            let denom = 1.0 - abar_t;
            let c_x = ahat.sqrt() * (1.0 - abar_prev) / denom;
            let c_0 = abar_prev.sqrt() * beta / denom;
            let var = (1.0 - abar_prev) * beta / denom;
            let std = var.max(0.0).sqrt();
            let z = normal_vec(rng, dim);
            x = x
                .iter()
                .zip(&x0_hat)
                .zip(&z)
                .map(|((xt, x0), zi)| c_x * xt + c_0 * x0 + std * zi)
                .collect();
        }
        check_finite(&x, t, "state")?;
    }
    Ok(x)
}

/// Stream offset for per-sample RNGs; keeps batches deterministic and
/// independent of thread count.
const SAMPLE_STREAM_BASE: u64 = 200;

/// Draws `n` samples in parallel; sample `i` uses its own RNG stream, so the
/// result is identical no matter how work is scheduled.
pub fn sample_batch(
    schedule: &NoiseSchedule,
    predict: &SamplerPredict,
    dim: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, SAMPLE_STREAM_BASE + i as u64);
            ancestral_sample(schedule, predict, dim, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::ks_statistic;
    use proptest::prelude::*;

    fn both() -> Vec<NoiseSchedule> {
        vec![
            NoiseSchedule::new(ScheduleFamily::Cosine, DEFAULT_HORIZON).unwrap(),
            NoiseSchedule::new(ScheduleFamily::LinearAlphaBar, DEFAULT_HORIZON).unwrap(),
        ]
    }

    #[test]
    fn schedules_start_clean_and_end_noisy() {
        for sch in both() {
            assert_eq!(sch.alpha(0), 1.0, "{:?}", sch.family());
            assert_eq!(sch.sigma(0), 0.0);
            assert!(sch.alpha(sch.horizon()) <= 0.02 + 1e-12);
            assert!(sch.alpha(sch.horizon()) >= ALPHA_FLOOR);
            assert!(sch.sigma(sch.horizon()) > 0.999);
        }
    }

    #[test]
    fn variance_preserving_identity_holds_everywhere() {
        for sch in both() {
            for t in 0..=sch.horizon() {
                let (a, s) = (sch.alpha(t), sch.sigma(t));
                assert!((a * a + s * s - 1.0).abs() < 1e-12, "t={t}");
            }
        }
    }

    #[test]
    fn retention_is_monotone_nonincreasing() {
        for sch in both() {
            for t in 1..=sch.horizon() {
                assert!(sch.alpha(t) <= sch.alpha(t - 1), "t={t} {:?}", sch.family());
            }
            // strictly decreasing away from the floor
            assert!(sch.alpha(1) < sch.alpha(0));
            assert!(sch.alpha(sch.horizon() / 2) < sch.alpha(1));
        }
    }

    #[test]
    fn perturb_moments_match_closed_form() {
        let sch = NoiseSchedule::new(ScheduleFamily::Cosine, DEFAULT_HORIZON).unwrap();
        let x0 = vec![1.5, -0.5];
        let t = 100;
        let mut rng = stream_rng(1, 0);
        let n = 50_000;
        let mut sums = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let (xt, _) = perturb(&sch, &x0, t, &mut rng);
            for j in 0..2 {
                sums[j] += xt[j];
                sq[j] += xt[j] * xt[j];
            }
        }
        for j in 0..2 {
            let mean = sums[j] / n as f64;
            let var = sq[j] / n as f64 - mean * mean;
            assert!((mean - sch.alpha(t) * x0[j]).abs() < 0.02, "mean {mean}");
            let s2 = sch.sigma(t) * sch.sigma(t);
            assert!((var - s2).abs() < 0.02, "var {var} vs {s2}");
        }
    }

    #[test]
    fn eps_to_score_is_negative_scaled_noise_and_rejects_t0() {
        let sch = NoiseSchedule::new(ScheduleFamily::Cosine, DEFAULT_HORIZON).unwrap();
        let eps = vec![2.0, -4.0];
        let s = eps_to_score(&sch, 50, &eps).unwrap();
        for (sc, e) in s.iter().zip(&eps) {
            assert!((sc + e / sch.sigma(50)).abs() < 1e-15);
        }
        assert!(eps_to_score(&sch, 0, &eps).is_err());
    }

    #[test]
    fn dsm_loss_is_zero_for_a_perfect_predictor_graph() {
        let sch = NoiseSchedule::new(ScheduleFamily::Cosine, DEFAULT_HORIZON).unwrap();
        let x0 = vec![0.3, -1.1, 0.7];
        let mut rng = stream_rng(2, 0);
        let eps = normal_vec(&mut rng, 3);
        let g = Graph::new();
        // a predictor that reconstructs ε from x_t in closed form
        let t = 80;
        let (a, s) = (sch.alpha(t), sch.sigma(t));
        let x0c = g.constant(Tensor::vector(x0.clone()));
        let predict = |g: &Graph, xt: Var, _t: usize| -> crate::Result<Var> {
            let num = g.sub(xt, g.scale(x0c, a))?;
            Ok(g.scale(num, 1.0 / s))
        };
        let loss = dsm_sample_loss(&g, &sch, &predict, &x0, t, &eps).unwrap();
        assert!(g.value(loss).item() < 1e-20);
    }

    #[test]
    fn point_mass_oracle_recovers_the_point_exactly() {
        // With data concentrated at c, the exact noise posterior is
        // ε = (x − α_t c)/σ_t and every denoise step lands on c.
        let c = vec![0.8, -1.2, 0.4];
        for sch in both() {
            let predict = |x: &[f64], t: usize| -> crate::Result<Vec<f64>> {
                let (a, s) = (sch.alpha(t), sch.sigma(t));
                Ok(x.iter().zip(&c).map(|(xi, ci)| (xi - a * ci) / s).collect())
            };
            let mut rng = stream_rng(3, 0);
            let x = ancestral_sample(&sch, &predict, 3, &mut rng).unwrap();
            for (xi, ci) in x.iter().zip(&c) {
                assert!((xi - ci).abs() < 1e-8, "{xi} vs {ci} ({:?})", sch.family());
            }
        }
    }

    #[test]
    fn unit_gaussian_oracle_reproduces_the_marginal() {
        // For x_0 ~ N(0, I) the marginal at every t is N(0, I) and the exact
        // noise posterior is ε̂ = σ_t x. Wrong posterior coefficients would
        // show up as a variance drift here.
        let sch = NoiseSchedule::new(ScheduleFamily::Cosine, DEFAULT_HORIZON).unwrap();
        let predict = |x: &[f64], t: usize| -> crate::Result<Vec<f64>> {
            Ok(x.iter().map(|xi| sch.sigma(t) * xi).collect())
        };
        let samples = sample_batch(&sch, &predict, 2, 2000, 17).unwrap();
        let flat: Vec<f64> = samples.into_iter().flatten().collect();
        let n = flat.len() as f64;
        let mean = flat.iter().sum::<f64>() / n;
        let var = flat.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.08, "var {var}");
        let mut rng = stream_rng(18, 0);
        let reference = normal_vec(&mut rng, flat.len());
        let d = ks_statistic(&flat, &reference);
        let crit = 1.628 * (2.0 / n).sqrt();
        assert!(d < crit, "KS {d} vs critical {crit}");
    }

    #[test]
    fn non_finite_prediction_aborts_with_step_index() {
        let sch = NoiseSchedule::new(ScheduleFamily::Cosine, DEFAULT_HORIZON).unwrap();
        let predict = |x: &[f64], t: usize| -> crate::Result<Vec<f64>> {
            if t == 42 {
                Ok(vec![f64::NAN; x.len()])
            } else {
                Ok(vec![0.0; x.len()])
            }
        };
        let mut rng = stream_rng(4, 0);
        let err = ancestral_sample(&sch, &predict, 2, &mut rng).unwrap_err();
        match err {
            Error::Numeric { step, .. } => assert_eq!(step, 42),
            other => panic!("expected numeric abort, got {other}"),
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed_and_stream() {
        let sch = NoiseSchedule::new(ScheduleFamily::Cosine, DEFAULT_HORIZON).unwrap();
        let predict = |x: &[f64], t: usize| -> crate::Result<Vec<f64>> {
            Ok(x.iter().map(|xi| sch.sigma(t) * xi).collect())
        };
        let a = sample_batch(&sch, &predict, 3, 8, 5).unwrap();
        let b = sample_batch(&sch, &predict, 3, 8, 5).unwrap();
        assert_eq!(a, b);
        let c = sample_batch(&sch, &predict, 3, 8, 6).unwrap();
        assert_ne!(a, c);
        // distinct samples within a batch
        assert_ne!(a[0], a[1]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn schedule_tables_are_well_formed(
            family in prop::sample::select(vec![ScheduleFamily::Cosine, ScheduleFamily::LinearAlphaBar]),
            horizon in 2usize..400,
        ) {
            let sch = NoiseSchedule::new(family, horizon).unwrap();
            for t in 0..=horizon {
                let (a, s) = (sch.alpha(t), sch.sigma(t));
                prop_assert!((ALPHA_FLOOR..=1.0).contains(&a));
                prop_assert!((0.0..=1.0).contains(&s));
                prop_assert!((a * a + s * s - 1.0).abs() < 1e-12);
                if t > 0 {
                    prop_assert!(a <= sch.alpha(t - 1));
                }
            }
        }
    }
}
