//! Evaluation metrics and packaged experiments: silent-region total variance,
//! cycle-consistency L1 on revealed coordinates, unbiased kernel MMD with a
//! permutation null, and the three experiment drivers behind the headline
//! checks (silent-signal rebalancing, two-stage symmetry drop, two-condition
//! combination).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::combine::{CombineConfig, CombineTrace, TraceEvent};
use crate::conserve::{asym, draw_eval_points, ScoreModel};
use crate::diffusion::{dsm_sample_loss, sample_batch};
use crate::scorenet::{
    noise_pred, BoundParams, ControlSpec, InjectionMode, ModelConfig, ParamSet, ScoreParts,
};
use crate::synthdata::{
    extract_condition, gen_ground_truth, gen_multi_condition, CondType, Condition,
    ConditionedSample, SyntheticTask,
};
use crate::trainer::{Stage, TrainState};
use crate::util::{mean_compensated, normal_vec, stream_rng, sum_compensated};
use crate::{Error, Result};

/// Stream label for held-out denoising-loss draws.
pub const DSM_EVAL_STREAM: u64 = 420;
/// Stream label for permutation-test shuffles.
pub const MMD_PERM_STREAM: u64 = 430;

// ---- sampler glue ----

/// Value-level noise predictor over fixed parameters and conditions, in the
/// shape [`sample_batch`] expects. Every call builds a fresh graph, so the
/// closure is freely shareable across sampler threads.
pub fn noise_predictor<'a>(
    config: &'a ModelConfig,
    base: &'a ParamSet,
    branches: Vec<(&'a ParamSet, Condition)>,
    mode: InjectionMode,
    combine: CombineConfig,
) -> impl Fn(&[f64], usize) -> Result<Vec<f64>> + Sync + 'a {
    move |x: &[f64], t: usize| {
        let g = Graph::new();
        let bound_base = BoundParams::bind(&g, base, false);
        let bound: Vec<BoundParams> =
            branches.iter().map(|(p, _)| BoundParams::bind(&g, p, false)).collect();
        let parts = ScoreParts {
            config,
            base: &bound_base,
            controls: bound
                .iter()
                .zip(&branches)
                .map(|(bp, (_, c))| ControlSpec { params: bp, condition: c })
                .collect(),
            mode,
            combine,
            trace: None,
        };
        let xv = g.constant(Tensor::vector(x.to_vec()));
        Ok(g.value(noise_pred(&g, &parts, xv, t)?).data().to_vec())
    }
}

fn require_branch(state: &TrainState) -> Result<&ParamSet> {
    state
        .branch
        .as_ref()
        .ok_or_else(|| Error::Invalid("evaluation needs a trained control branch".into()))
}

fn require_cond_type(state: &TrainState) -> Result<CondType> {
    state
        .cond_type
        .ok_or_else(|| Error::Invalid("branch state names no condition type".into()))
}

/// Combination/injection events of one forward pass, for asserting pipeline
/// order (all merges happen before any injection at each level).
pub fn pipeline_events(
    config: &ModelConfig,
    base: &ParamSet,
    branches: Vec<(&ParamSet, Condition)>,
    mode: InjectionMode,
    combine: CombineConfig,
    t: usize,
) -> Result<Vec<TraceEvent>> {
    let g = Graph::new();
    let trace = CombineTrace::new();
    let bound_base = BoundParams::bind(&g, base, false);
    let bound: Vec<BoundParams> =
        branches.iter().map(|(p, _)| BoundParams::bind(&g, p, false)).collect();
    let parts = ScoreParts {
        config,
        base: &bound_base,
        controls: bound
            .iter()
            .zip(&branches)
            .map(|(bp, (_, c))| ControlSpec { params: bp, condition: c })
            .collect(),
        mode,
        combine,
        trace: Some(&trace),
    };
    let x = g.constant(Tensor::vector(vec![0.0; config.data_dim]));
    noise_pred(&g, &parts, x, t)?;
    let events = trace.events.borrow().clone();
    Ok(events)
}

/// Checks that every level's merge events precede its injection event.
pub fn check_combine_before_inject(events: &[TraceEvent]) -> Result<()> {
    let mut injected = std::collections::HashSet::new();
    for ev in events {
        match ev {
            TraceEvent::Inject { level } => {
                injected.insert(*level);
            }
            TraceEvent::Combine { level } => {
                if injected.contains(level) {
                    return Err(Error::Invalid(format!(
                        "level {level}: combination after injection"
                    )));
                }
            }
        }
    }
    Ok(())
}

// ---- total variance ----

/// Unbiased per-coordinate sample variances.
pub fn coord_variances(samples: &[Vec<f64>]) -> Result<Vec<f64>> {
    if samples.len() < 2 {
        return Err(Error::Invalid("variance needs at least two samples".into()));
    }
    let d = samples[0].len();
    if samples.iter().any(|s| s.len() != d) {
        return Err(Error::Invalid("samples must share one dimension".into()));
    }
    let n = samples.len() as f64;
    let means: Vec<f64> =
        (0..d).map(|j| sum_compensated(samples.iter().map(|s| s[j])) / n).collect();
    Ok((0..d)
        .map(|j| {
            sum_compensated(samples.iter().map(|s| (s[j] - means[j]) * (s[j] - means[j])))
                / (n - 1.0)
        })
        .collect())
}

/// Sum of per-coordinate variances over a coordinate region.
pub fn total_variance(samples: &[Vec<f64>], region: &[usize]) -> Result<f64> {
    let vars = coord_variances(samples)?;
    for &j in region {
        if j >= vars.len() {
            return Err(Error::Invalid(format!("region coordinate {j} out of range")));
        }
    }
    Ok(sum_compensated(region.iter().map(|&j| vars[j])))
}

/// Generations of a branch under its fully-silent condition.
pub fn silent_samples(state: &TrainState, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let branch = require_branch(state)?;
    let d = state.model.data_dim;
    let predict = noise_predictor(
        &state.model,
        &state.base,
        vec![(branch, Condition::silent(d))],
        state.train.mode,
        state.train.combine,
    );
    sample_batch(&state.schedule()?, &predict, d, n, seed)
}

/// Total variance of silent-condition generations over the branch's
/// controllable region.
pub fn total_variance_silent(state: &TrainState, n: usize, seed: u64) -> Result<f64> {
    let region: Vec<usize> = require_cond_type(state)?.region(state.model.data_dim).collect();
    total_variance(&silent_samples(state, n, seed)?, &region)
}

// ---- cycle consistency ----

/// Mean L1 distance, over samples and revealed coordinates, between the
/// condition read back from each sample and the condition that was imposed.
pub fn cycle_l1(generated: &[Vec<f64>], condition: &Condition) -> Result<f64> {
    if generated.is_empty() {
        return Err(Error::Invalid("cycle distance needs samples".into()));
    }
    if condition.is_silent() {
        return Err(Error::Invalid("cycle distance needs revealed coordinates".into()));
    }
    let revealed: Vec<usize> =
        (0..condition.dim()).filter(|&j| condition.mask[j] != 0.0).collect();
    let mut diffs = Vec::with_capacity(generated.len() * revealed.len());
    for x in generated {
        let extracted = extract_condition(x, &condition.mask)?;
        for &j in &revealed {
            diffs.push((extracted.values[j] - condition.values[j]).abs());
        }
    }
    Ok(mean_compensated(&diffs))
}

// ---- kernel MMD ----

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise distance over the pooled sets; falls back to 1 when the
/// points are (nearly) coincident.
pub fn median_heuristic(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let pooled: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let mut dists = Vec::new();
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            dists.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let med = dists[dists.len() / 2];
    if med > 1e-12 {
        med
    } else {
        1.0
    }
}

fn check_two_sample(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Invalid("mmd needs at least two points per side".into()));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|x| x.len() != d) {
        return Err(Error::Invalid("mmd samples must share one dimension".into()));
    }
    Ok(d)
}

fn gaussian_kernel_matrix(pooled: &[&Vec<f64>], bandwidth: f64) -> Vec<Vec<f64>> {
    let inv = -1.0 / (2.0 * bandwidth * bandwidth);
    let n = pooled.len();
    let mut k = vec![vec![0.0; n]; n];
    for i in 0..n {
        k[i][i] = 1.0;
        for j in i + 1..n {
            let v = (inv * sq_dist(pooled[i], pooled[j])).exp();
            k[i][j] = v;
            k[j][i] = v;
        }
    }
    k
}

fn mmd_from_kernel(k: &[Vec<f64>], idx_a: &[usize], idx_b: &[usize]) -> f64 {
    let m = idx_a.len() as f64;
    let n = idx_b.len() as f64;
    let within = |idx: &[usize]| {
        sum_compensated(
            idx.iter()
                .flat_map(|&i| idx.iter().map(move |&j| (i, j)))
                .filter(|(i, j)| i != j)
                .map(|(i, j)| k[i][j]),
        )
    };
    let cross = sum_compensated(
        idx_a.iter().flat_map(|&i| idx_b.iter().map(move |&j| k[i][j])),
    );
    let est = within(idx_a) / (m * (m - 1.0)) + within(idx_b) / (n * (n - 1.0))
        - 2.0 * cross / (m * n);
    est.max(0.0)
}

/// Unbiased Gaussian-kernel MMD² estimate, clipped at 0 for reporting.
pub fn mmd_sq(a: &[Vec<f64>], b: &[Vec<f64>], bandwidth: f64) -> Result<f64> {
    check_two_sample(a, b)?;
    if !(bandwidth.is_finite() && bandwidth > 0.0) {
        return Err(Error::Invalid(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let pooled: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let k = gaussian_kernel_matrix(&pooled, bandwidth);
    let idx_a: Vec<usize> = (0..a.len()).collect();
    let idx_b: Vec<usize> = (a.len()..a.len() + b.len()).collect();
    Ok(mmd_from_kernel(&k, &idx_a, &idx_b))
}

/// Null distribution of the statistic under label exchange: the pooled points
/// are reassigned to the two groups uniformly at random `n_perm` times.
pub fn mmd_permutation_null(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    bandwidth: f64,
    n_perm: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    check_two_sample(a, b)?;
    let pooled: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let k = gaussian_kernel_matrix(&pooled, bandwidth);
    let mut rng = stream_rng(seed, MMD_PERM_STREAM);
    let mut idx: Vec<usize> = (0..pooled.len()).collect();
    Ok((0..n_perm)
        .map(|_| {
            idx.shuffle(&mut rng);
            mmd_from_kernel(&k, &idx[..a.len()], &idx[a.len()..])
        })
        .collect())
}

/// Rows restricted to a coordinate subset (e.g. a silent region).
pub fn project(samples: &[Vec<f64>], coords: &[usize]) -> Vec<Vec<f64>> {
    samples.iter().map(|s| coords.iter().map(|&j| s[j]).collect()).collect()
}

// ---- held-out denoising loss ----

/// Mean single-sample denoising loss of a branch state over fresh draws from
/// its own evaluation stream; deterministic per seed, shared across stages so
/// before/after comparisons are paired.
pub fn mean_dsm(
    state: &TrainState,
    pairs: &[ConditionedSample],
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let branch = require_branch(state)?;
    if pairs.is_empty() || draws == 0 {
        return Err(Error::Invalid("mean_dsm needs pairs and at least one draw".into()));
    }
    let schedule = state.schedule()?;
    let d = state.model.data_dim;
    let mut rng = stream_rng(seed, DSM_EVAL_STREAM);
    let mut vals = Vec::with_capacity(draws);
    for _ in 0..draws {
        let row = rng.random_range(0..pairs.len());
        let t = rng.random_range(0..=schedule.horizon());
        let eps = normal_vec(&mut rng, d);
        let g = Graph::new();
        let bound_base = BoundParams::bind(&g, &state.base, false);
        let bound_branch = BoundParams::bind(&g, branch, false);
        let parts = ScoreParts {
            config: &state.model,
            base: &bound_base,
            controls: vec![ControlSpec {
                params: &bound_branch,
                condition: &pairs[row].condition,
            }],
            mode: state.train.mode,
            combine: state.train.combine,
            trace: None,
        };
        let predict = |g: &Graph, x: Var, t: usize| noise_pred(g, &parts, x, t);
        let loss = dsm_sample_loss(&g, &schedule, &predict, &pairs[row].x0, t, &eps)?;
        vals.push(g.value(loss).item());
    }
    Ok(mean_compensated(&vals))
}

// ---- reports ----

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TvReport {
    pub cond_type: CondType,
    pub region: Vec<usize>,
    pub n: usize,
    pub biased_tv: f64,
    pub rebalanced_tv: f64,
    /// rebalanced / biased; absent when the denominator is (numerically) zero.
    pub ratio: Option<f64>,
    pub per_coord_biased: Vec<f64>,
    pub per_coord_rebalanced: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AsymReport {
    pub points: usize,
    pub conditions: usize,
    pub asym_stage1: f64,
    pub asym_stage2: f64,
    /// stage2 / stage1; absent when stage 1 is already (numerically) zero.
    pub asym_ratio: Option<f64>,
    pub dsm_draws: usize,
    pub dsm_stage1: f64,
    pub dsm_stage2: f64,
    pub dsm_ratio: Option<f64>,
    /// Per evaluation point: (t, stage-1 defect, stage-2 defect), averaged
    /// over the condition set.
    pub per_point: Vec<(usize, f64, f64)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiSeedRow {
    pub seed: u64,
    pub cycle_a_minimal: f64,
    pub cycle_a_vanilla: f64,
    pub cycle_b_minimal: f64,
    pub cycle_b_vanilla: f64,
    pub mmd_minimal: f64,
    pub mmd_vanilla: f64,
    pub silent_coords: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiReport {
    pub per_seed: Vec<MultiSeedRow>,
    /// Seeds where the minimal-impact pipeline is no worse, per metric.
    pub cycle_a_wins: usize,
    pub cycle_b_wins: usize,
    pub mmd_wins: usize,
}

/// One experiment's results. Exactly one of the payload fields is set,
/// matching `experiment`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub experiment: String,
    pub seeds: Vec<u64>,
    pub samples_per_metric: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_variance_silent: Option<TvReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asym_two_stage: Option<AsymReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multi_combo: Option<MultiReport>,
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den.abs() > 1e-12).then(|| num / den)
}

pub(crate) fn check_same_frame(a: &TrainState, b: &TrainState, what: &str) -> Result<()> {
    if a.model != b.model || a.family != b.family || a.horizon != b.horizon {
        return Err(Error::Invalid(format!("{what}: model or schedule mismatch")));
    }
    if a.base != b.base {
        return Err(Error::Invalid(format!("{what}: runs do not share a frozen base")));
    }
    Ok(())
}

// ---- experiments ----

/// Silent-signal rebalancing effect: total variance over the controlled
/// region under a fully-silent condition, biased-trained vs
/// rebalanced-trained branch, same sampling seed.
pub fn run_single_silent_tv(
    biased: &TrainState,
    rebalanced: &TrainState,
    n: usize,
    seed: u64,
) -> Result<EvalReport> {
    check_same_frame(biased, rebalanced, "single-silent-tv")?;
    let cond_type = require_cond_type(biased)?;
    if require_cond_type(rebalanced)? != cond_type {
        return Err(Error::Invalid("branches answer different condition types".into()));
    }
    let region: Vec<usize> = cond_type.region(biased.model.data_dim).collect();
    let vars_b = coord_variances(&silent_samples(biased, n, seed)?)?;
    let vars_r = coord_variances(&silent_samples(rebalanced, n, seed)?)?;
    let biased_tv = sum_compensated(region.iter().map(|&j| vars_b[j]));
    let rebalanced_tv = sum_compensated(region.iter().map(|&j| vars_r[j]));
    Ok(EvalReport {
        experiment: "single-silent-tv".into(),
        seeds: vec![seed],
        samples_per_metric: n,
        total_variance_silent: Some(TvReport {
            cond_type,
            per_coord_biased: region.iter().map(|&j| vars_b[j]).collect(),
            per_coord_rebalanced: region.iter().map(|&j| vars_r[j]).collect(),
            region,
            n,
            biased_tv,
            rebalanced_tv,
            ratio: ratio(rebalanced_tv, biased_tv),
        }),
        asym_two_stage: None,
        multi_combo: None,
    })
}

/// Exact control-path symmetry defect and held-out denoising loss, before and
/// after the penalty stage, on shared evaluation points.
pub fn run_asym_two_stage(
    stage1: &TrainState,
    stage2: &TrainState,
    pairs: &[ConditionedSample],
    points: usize,
    dsm_draws: usize,
    seed: u64,
) -> Result<EvalReport> {
    check_same_frame(stage1, stage2, "asym-two-stage")?;
    if stage1.train.stage != Stage::One || stage2.train.stage != Stage::Two {
        return Err(Error::Invalid(
            "asym-two-stage compares a stage-1 run against a stage-2 run".into(),
        ));
    }
    if pairs.is_empty() {
        return Err(Error::Invalid("asym-two-stage needs evaluation pairs".into()));
    }
    let schedule = stage1.schedule()?;
    let rows: Vec<Vec<f64>> = pairs.iter().map(|p| p.x0.clone()).collect();
    let eval_points = draw_eval_points(&schedule, &rows, points, seed)?;
    let conditions: Vec<&Condition> =
        pairs.iter().take(4).map(|p| &p.condition).collect();

    let mut per_point: Vec<(usize, f64, f64)> = Vec::with_capacity(eval_points.len());
    let mut means = [0.0f64; 2];
    for (which, state) in [stage1, stage2].iter().enumerate() {
        let branch = require_branch(state)?;
        let mut point_means = Vec::with_capacity(eval_points.len());
        for (i, (t, x)) in eval_points.iter().enumerate() {
            let per_cond: Vec<f64> = conditions
                .iter()
                .map(|cond| {
                    let model = ScoreModel {
                        config: &state.model,
                        base: &state.base,
                        branches: vec![(branch, cond)],
                        mode: state.train.mode,
                        combine: state.train.combine,
                    };
                    asym(&model, &schedule, &[(*t, x.clone())])
                })
                .collect::<Result<Vec<_>>>()?;
            let mean = mean_compensated(&per_cond);
            point_means.push(mean);
            if which == 0 {
                per_point.push((*t, mean, 0.0));
            } else {
                per_point[i].2 = mean;
            }
        }
        means[which] = mean_compensated(&point_means);
    }
    let dsm1 = mean_dsm(stage1, pairs, dsm_draws, seed)?;
    let dsm2 = mean_dsm(stage2, pairs, dsm_draws, seed)?;
    Ok(EvalReport {
        experiment: "asym-two-stage".into(),
        seeds: vec![seed],
        samples_per_metric: points,
        total_variance_silent: None,
        asym_two_stage: Some(AsymReport {
            points: eval_points.len(),
            conditions: conditions.len(),
            asym_stage1: means[0],
            asym_stage2: means[1],
            asym_ratio: ratio(means[1], means[0]),
            dsm_draws,
            dsm_stage1: dsm1,
            dsm_stage2: dsm2,
            dsm_ratio: ratio(dsm2, dsm1),
            per_point,
        }),
        multi_combo: None,
    })
}

/// First layout draw where both conditions reveal something and at least one
/// coordinate stays silent.
fn usable_layout(task: &SyntheticTask, seed: u64) -> Result<(Condition, Condition, Vec<usize>)> {
    for pair in gen_multi_condition(task, 16, seed) {
        if pair.cond_a.is_silent() || pair.cond_b.is_silent() {
            continue;
        }
        let silent: Vec<usize> = (0..task.dim)
            .filter(|&j| pair.cond_a.mask[j] == 0.0 && pair.cond_b.mask[j] == 0.0)
            .collect();
        if !silent.is_empty() {
            return Ok((pair.cond_a, pair.cond_b, silent));
        }
    }
    Err(Error::Invalid(format!(
        "no usable two-condition layout in 16 draws at seed {seed}"
    )))
}

/// Two-condition comparison: the same trained branches sampled once with the
/// balanced combination pipeline and once with plain feature addition, scored
/// by per-condition cycle distance and silent-region MMD to unbiased ground
/// truth. One fixed condition layout per seed; generation noise is shared
/// across modes.
pub fn run_multi_combo(
    branch_a: &TrainState,
    branch_b: &TrainState,
    task: &SyntheticTask,
    seeds: &[u64],
    n: usize,
) -> Result<EvalReport> {
    check_same_frame(branch_a, branch_b, "multi-combo")?;
    if require_cond_type(branch_a)? != CondType::A || require_cond_type(branch_b)? != CondType::B
    {
        return Err(Error::Invalid(
            "multi-combo needs a type-A branch and a type-B branch".into(),
        ));
    }
    if task.dim != branch_a.model.data_dim {
        return Err(Error::Invalid("task dimension does not match the model".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Invalid("multi-combo needs at least one seed".into()));
    }
    let schedule = branch_a.schedule()?;
    let pa = require_branch(branch_a)?;
    let pb = require_branch(branch_b)?;
    let d = task.dim;

    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let (cond_a, cond_b, silent) = usable_layout(task, seed)?;
        let ground = gen_ground_truth(task, n, seed);
        let ground_silent = project(&ground, &silent);
        let bandwidth = median_heuristic(&ground_silent, &ground_silent);

        let mut results = Vec::with_capacity(2);
        for mode in [InjectionMode::MinimalImpact, InjectionMode::VanillaAdd] {
            let predict = noise_predictor(
                &branch_a.model,
                &branch_a.base,
                vec![(pa, cond_a.clone()), (pb, cond_b.clone())],
                mode,
                branch_a.train.combine,
            );
            let samples = sample_batch(&schedule, &predict, d, n, seed)?;
            let cycle_a = cycle_l1(&samples, &cond_a)?;
            let cycle_b = cycle_l1(&samples, &cond_b)?;
            let mmd = mmd_sq(&project(&samples, &silent), &ground_silent, bandwidth)?;
            results.push((cycle_a, cycle_b, mmd));
        }
        per_seed.push(MultiSeedRow {
            seed,
            cycle_a_minimal: results[0].0,
            cycle_a_vanilla: results[1].0,
            cycle_b_minimal: results[0].1,
            cycle_b_vanilla: results[1].1,
            mmd_minimal: results[0].2,
            mmd_vanilla: results[1].2,
            silent_coords: silent.len(),
        });
    }
    let count = |f: &dyn Fn(&MultiSeedRow) -> bool| per_seed.iter().filter(|r| f(r)).count();
    Ok(EvalReport {
        experiment: "multi-combo".into(),
        seeds: seeds.to_vec(),
        samples_per_metric: n,
        total_variance_silent: None,
        asym_two_stage: None,
        multi_combo: Some(MultiReport {
            cycle_a_wins: count(&|r| r.cycle_a_minimal <= r.cycle_a_vanilla),
            cycle_b_wins: count(&|r| r.cycle_b_minimal <= r.cycle_b_vanilla),
            mmd_wins: count(&|r| r.mmd_minimal <= r.mmd_vanilla),
            per_seed,
        }),
    })
}

// ---- tabular output ----

/// Raw metric tables for plotting: (table name, header, rows).
pub fn report_tables(report: &EvalReport) -> Vec<(String, Vec<&'static str>, Vec<Vec<String>>)> {
    let mut tables = Vec::new();
    if let Some(tv) = &report.total_variance_silent {
        let rows = tv
            .region
            .iter()
            .zip(tv.per_coord_biased.iter().zip(&tv.per_coord_rebalanced))
            .map(|(j, (b, r))| vec![j.to_string(), b.to_string(), r.to_string()])
            .collect();
        tables.push((
            "tv_per_coord".to_string(),
            vec!["coord", "biased_var", "rebalanced_var"],
            rows,
        ));
    }
    if let Some(a) = &report.asym_two_stage {
        let rows = a
            .per_point
            .iter()
            .enumerate()
            .map(|(i, (t, s1, s2))| {
                vec![i.to_string(), t.to_string(), s1.to_string(), s2.to_string()]
            })
            .collect();
        tables.push((
            "asym_per_point".to_string(),
            vec!["point", "t", "asym_stage1", "asym_stage2"],
            rows,
        ));
    }
    if let Some(m) = &report.multi_combo {
        let rows = m
            .per_seed
            .iter()
            .map(|r| {
                vec![
                    r.seed.to_string(),
                    r.cycle_a_minimal.to_string(),
                    r.cycle_a_vanilla.to_string(),
                    r.cycle_b_minimal.to_string(),
                    r.cycle_b_vanilla.to_string(),
                    r.mmd_minimal.to_string(),
                    r.mmd_vanilla.to_string(),
                    r.silent_coords.to_string(),
                ]
            })
            .collect();
        tables.push((
            "multi_per_seed".to_string(),
            vec![
                "seed",
                "cycle_a_minimal",
                "cycle_a_vanilla",
                "cycle_b_minimal",
                "cycle_b_vanilla",
                "mmd_minimal",
                "mmd_vanilla",
                "silent_coords",
            ],
            rows,
        ));
    }
    tables
}

/// CSV with a header row.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::format(path, format!("csv open: {e}")))?;
    w.write_record(header).map_err(|e| Error::format(path, format!("csv write: {e}")))?;
    for row in rows {
        w.write_record(row).map_err(|e| Error::format(path, format!("csv write: {e}")))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleFamily;
    use crate::scorenet::ControlBranch;
    use crate::trainer::TrainConfig;
    use crate::util::normal;

    fn micro_model() -> ModelConfig {
        ModelConfig { data_dim: 4, levels: 1, hidden: vec![6, 6], time_embed_dim: 4 }
    }

    fn micro_task() -> SyntheticTask {
        SyntheticTask { dim: 4, ..SyntheticTask::default() }
    }

    /// Untrained but structurally complete branch state.
    fn micro_state(cond_type: CondType, branch_seed: u64) -> TrainState {
        let base = TrainState::new_base(
            micro_model(),
            ScheduleFamily::Cosine,
            6,
            TrainConfig { seed: 3, ..TrainConfig::recipe(Stage::Base) },
            17,
        )
        .unwrap();
        TrainState::new_branch(
            &base,
            TrainConfig { seed: 3, ..TrainConfig::recipe(Stage::One) },
            cond_type,
            branch_seed,
        )
        .unwrap()
    }

    #[test]
    fn collapsed_generator_has_zero_total_variance() {
        let samples = vec![vec![0.4, -1.0, 2.0]; 10];
        let tv = total_variance(&samples, &[0, 1, 2]).unwrap();
        assert_eq!(tv, 0.0);
    }

    #[test]
    fn ground_truth_total_variance_matches_mixture_moments() {
        let task = SyntheticTask::default();
        let samples = gen_ground_truth(&task, 10_000, 99);
        let region: Vec<usize> = CondType::A.region(task.dim).collect();
        let tv = total_variance(&samples, &region).unwrap();
        let expect = region.len() as f64 * task.coord_variance();
        assert!(
            (tv - expect).abs() <= 0.05 * expect,
            "tv {tv} vs analytic {expect}"
        );
    }

    #[test]
    fn cycle_distance_is_zero_for_the_copy_oracle_and_positive_for_shuffled() {
        let cond = Condition {
            mask: vec![1.0, 0.0, 1.0, 0.0],
            values: vec![0.7, 0.0, -1.2, 0.0],
        };
        // Copies of the revealed coordinates, noise elsewhere.
        let copied: Vec<Vec<f64>> =
            (0..20).map(|i| vec![0.7, i as f64, -1.2, -(i as f64)]).collect();
        assert_eq!(cycle_l1(&copied, &cond).unwrap(), 0.0);

        let shuffled = Condition {
            mask: cond.mask.clone(),
            values: vec![-1.2, 0.0, 0.7, 0.0],
        };
        assert!(cycle_l1(&copied, &shuffled).unwrap() > 1.0);

        assert!(cycle_l1(&copied, &Condition::silent(4)).is_err());
    }

    #[test]
    fn cycle_distance_of_independent_draws_matches_the_analytic_mean() {
        // Generator ignores the condition and redraws from the mixture. With
        // modes at ±1 and spread 0.25: same-mode pairs contribute
        // E|N(0, 2·0.0625)| = √0.125·√(2/π), cross-mode pairs ≈ 2, each with
        // probability ½.
        let task = micro_task();
        let gens = gen_ground_truth(&task, 2000, 5);
        let conds = gen_ground_truth(&task, 2000, 6);
        let full_mask = vec![1.0; task.dim];
        let diffs: Vec<f64> = gens
            .iter()
            .zip(&conds)
            .map(|(x, c)| {
                let cond =
                    Condition { mask: full_mask.clone(), values: c.clone() };
                cycle_l1(std::slice::from_ref(x), &cond).unwrap()
            })
            .collect();
        let got = mean_compensated(&diffs);
        let expect = 0.5 * (0.125f64).sqrt() * (2.0 / std::f64::consts::PI).sqrt() + 0.5 * 2.0;
        assert!(
            (got - expect).abs() <= 0.05 * expect,
            "cycle {got} vs analytic {expect}"
        );
    }

    #[test]
    fn mmd_of_identical_sets_is_exactly_zero() {
        let mut rng = stream_rng(1, 77);
        let a: Vec<Vec<f64>> = (0..40).map(|_| normal_vec(&mut rng, 3)).collect();
        assert_eq!(mmd_sq(&a, &a.clone(), 1.0).unwrap(), 0.0);
    }

    #[test]
    fn mmd_null_case_is_small_and_shifted_case_is_large() {
        let mut rng = stream_rng(2, 78);
        let a: Vec<Vec<f64>> = (0..150).map(|_| normal_vec(&mut rng, 2)).collect();
        let b: Vec<Vec<f64>> = (0..150).map(|_| normal_vec(&mut rng, 2)).collect();
        let shifted: Vec<Vec<f64>> =
            b.iter().map(|x| x.iter().map(|v| v + 2.0).collect()).collect();

        let h = median_heuristic(&a, &b);
        let null = mmd_permutation_null(&a, &b, h, 200, 9).unwrap();
        let mut sorted = null.clone();
        sorted.sort_by(f64::total_cmp);
        let q95 = sorted[(0.95 * sorted.len() as f64) as usize];
        let q99 = sorted[(0.99 * sorted.len() as f64) as usize];

        let stat_null = mmd_sq(&a, &b, h).unwrap();
        assert!(stat_null <= q95, "null stat {stat_null} above q95 {q95}");

        let h2 = median_heuristic(&a, &shifted);
        let stat_shift = mmd_sq(&a, &shifted, h2).unwrap();
        assert!(stat_shift > q99, "shifted stat {stat_shift} below q99 {q99}");
        assert!(stat_shift > 0.1, "shift should be blatant, got {stat_shift}");
    }

    #[test]
    fn mmd_permutation_null_coverage_under_the_null() {
        // Identical distributions: the observed statistic should fall below
        // the permutation 95th percentile in at least 90% of trials.
        let mut pass = 0;
        let trials = 30;
        for trial in 0..trials {
            let mut rng = stream_rng(100 + trial, 79);
            let a: Vec<Vec<f64>> = (0..50).map(|_| normal_vec(&mut rng, 2)).collect();
            let b: Vec<Vec<f64>> = (0..50).map(|_| normal_vec(&mut rng, 2)).collect();
            let h = median_heuristic(&a, &b);
            let mut null = mmd_permutation_null(&a, &b, h, 60, trial).unwrap();
            null.sort_by(f64::total_cmp);
            let q95 = null[(0.95 * null.len() as f64) as usize];
            if mmd_sq(&a, &b, h).unwrap() <= q95 {
                pass += 1;
            }
        }
        assert!(pass * 10 >= trials * 9, "null coverage {pass}/{trials}");
    }

    #[test]
    fn median_heuristic_scales_with_the_data_and_guards_degeneracy() {
        let a = vec![vec![0.0, 0.0], vec![1.0, 0.0]];
        let b = vec![vec![0.0, 1.0], vec![1.0, 1.0]];
        let h = median_heuristic(&a, &b);
        let a2: Vec<Vec<f64>> =
            a.iter().map(|x| x.iter().map(|v| 2.0 * v).collect()).collect();
        let b2: Vec<Vec<f64>> =
            b.iter().map(|x| x.iter().map(|v| 2.0 * v).collect()).collect();
        assert!((median_heuristic(&a2, &b2) - 2.0 * h).abs() < 1e-12);

        let same = vec![vec![1.0, 1.0]; 5];
        assert_eq!(median_heuristic(&same, &same.clone()), 1.0);
    }

    #[test]
    fn inert_branch_predicts_like_the_bare_base() {
        let state = micro_state(CondType::A, 0);
        let zero = ControlBranch::zeroed(micro_model()).unwrap();
        let cond = Condition {
            mask: vec![1.0, 1.0, 0.0, 0.0],
            values: vec![0.4, -0.6, 0.0, 0.0],
        };
        let with_branch = noise_predictor(
            &state.model,
            &state.base,
            vec![(&zero.params, cond)],
            InjectionMode::MinimalImpact,
            CombineConfig::default(),
        );
        let bare = noise_predictor(
            &state.model,
            &state.base,
            vec![],
            InjectionMode::MinimalImpact,
            CombineConfig::default(),
        );
        let x = vec![0.3, -0.1, 0.8, 0.2];
        for t in [1, 3, 6] {
            assert_eq!(with_branch(&x, t).unwrap(), bare(&x, t).unwrap());
        }
    }

    #[test]
    fn pipeline_merges_before_injecting() {
        let state_a = micro_state(CondType::A, 1);
        let branch_b = ControlBranch::init(micro_model(), 2).unwrap();
        let cond_a = Condition {
            mask: vec![1.0, 0.0, 0.0, 0.0],
            values: vec![0.5, 0.0, 0.0, 0.0],
        };
        let cond_b = Condition {
            mask: vec![0.0, 0.0, 1.0, 0.0],
            values: vec![0.0, 0.0, -0.5, 0.0],
        };
        let events = pipeline_events(
            &state_a.model,
            &state_a.base,
            vec![
                (state_a.branch.as_ref().unwrap(), cond_a),
                (&branch_b.params, cond_b),
            ],
            InjectionMode::MinimalImpact,
            CombineConfig::default(),
            2,
        )
        .unwrap();
        assert!(events.iter().any(|e| matches!(e, TraceEvent::Combine { .. })));
        assert!(events.iter().any(|e| matches!(e, TraceEvent::Inject { .. })));
        check_combine_before_inject(&events).unwrap();

        let out_of_order = [TraceEvent::Inject { level: 0 }, TraceEvent::Combine { level: 0 }];
        assert!(check_combine_before_inject(&out_of_order).is_err());
    }

    #[test]
    fn silent_tv_experiment_is_deterministic_and_validates_inputs() {
        let biased = micro_state(CondType::A, 4);
        let rebalanced = micro_state(CondType::A, 5);
        let r1 = run_single_silent_tv(&biased, &rebalanced, 8, 42).unwrap();
        let r2 = run_single_silent_tv(&biased, &rebalanced, 8, 42).unwrap();
        assert_eq!(
            serde_json::to_string(&r1).unwrap(),
            serde_json::to_string(&r2).unwrap()
        );
        let tv = r1.total_variance_silent.as_ref().unwrap();
        assert_eq!(tv.region, vec![0, 1]);
        assert!(tv.biased_tv >= 0.0 && tv.rebalanced_tv >= 0.0);

        let wrong_type = micro_state(CondType::B, 6);
        assert!(run_single_silent_tv(&biased, &wrong_type, 8, 42).is_err());
    }

    #[test]
    fn asym_experiment_pairs_stages_on_shared_points() {
        let stage1 = micro_state(CondType::A, 7);
        let stage2 = stage1
            .stage2(TrainConfig { seed: 3, ..TrainConfig::recipe(Stage::Two) })
            .unwrap();
        let pairs = crate::synthdata::gen_rebalanced_pairs(&micro_task(), CondType::A, 16, 8);
        let report = run_asym_two_stage(&stage1, &stage2, &pairs, 3, 5, 11).unwrap();
        let a = report.asym_two_stage.as_ref().unwrap();
        assert_eq!(a.points, 3);
        assert_eq!(a.per_point.len(), 3);
        // Same parameters on both sides: every paired quantity must agree.
        assert_eq!(a.asym_stage1, a.asym_stage2);
        assert_eq!(a.dsm_stage1, a.dsm_stage2);
        assert!(a.asym_stage1 >= 0.0);

        // Stage order is enforced.
        assert!(run_asym_two_stage(&stage2, &stage1, &pairs, 3, 5, 11).is_err());
    }

    #[test]
    fn multi_combo_report_carries_per_condition_columns() {
        let branch_a = micro_state(CondType::A, 9);
        let branch_b = micro_state(CondType::B, 10);
        let report =
            run_multi_combo(&branch_a, &branch_b, &micro_task(), &[1, 2], 6).unwrap();
        let m = report.multi_combo.as_ref().unwrap();
        assert_eq!(m.per_seed.len(), 2);
        assert!(m.cycle_a_wins <= 2 && m.cycle_b_wins <= 2 && m.mmd_wins <= 2);

        let tables = report_tables(&report);
        let (name, header, rows) = &tables[0];
        assert_eq!(name, "multi_per_seed");
        for col in ["cycle_a_minimal", "cycle_b_vanilla", "mmd_minimal", "mmd_vanilla"] {
            assert!(header.contains(&col), "missing column {col}");
        }
        assert_eq!(rows.len(), 2);

        // Reports round-trip through JSON.
        let json = serde_json::to_string(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), json);

        // Branch roles are checked.
        assert!(run_multi_combo(&branch_b, &branch_a, &micro_task(), &[1], 6).is_err());
    }

    #[test]
    fn csv_files_have_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_csv(
            &path,
            &["a", "b"],
            &[vec!["1".into(), "2".into()], vec!["3".into(), "4".into()]],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "a,b\n1,2\n3,4\n");
    }

    fn normal_vec(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| normal(rng)).collect()
    }
}
