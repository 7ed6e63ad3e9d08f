//! Synthetic task: per-coordinate bimodal data, partial-observation
//! conditions, and deliberately biased / rebalanced training pairs.
//!
//! Ground truth draws every coordinate independently from an equal-weight
//! two-mode Gaussian mixture (modes ±`mode_center`, spread `mode_spread`).
//! A condition reveals a subset of coordinates (mask plus masked values);
//! everything outside the mask is a "silent signal" the generator is still
//! supposed to diversify over. Biased pairs redraw silent coordinates from a
//! narrow unimodal N(0, bias_spread²) — the failure mode where conditional
//! models collapse silent regions — while rebalanced pairs keep the unbiased
//! mixture under every mask.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::util::{normal, stream_rng};
use crate::{Error, Result};

/// Which coordinate block a condition may reveal. `A` and `B` are the two
/// branch-specific types (front and back half); `Full` allows any coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CondType {
    A,
    B,
    Full,
}

impl CondType {
    pub fn tag(self) -> f64 {
        match self {
            CondType::A => 0.0,
            CondType::B => 1.0,
            CondType::Full => 2.0,
        }
    }

    pub fn from_tag(tag: f64) -> Result<Self> {
        match tag {
            t if t == 0.0 => Ok(CondType::A),
            t if t == 1.0 => Ok(CondType::B),
            t if t == 2.0 => Ok(CondType::Full),
            other => Err(Error::Invalid(format!("unknown condition type tag {other}"))),
        }
    }

    /// Coordinate range this type is allowed to reveal.
    pub fn region(self, dim: usize) -> std::ops::Range<usize> {
        match self {
            CondType::A => 0..dim / 2,
            CondType::B => dim / 2..dim,
            CondType::Full => 0..dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub dim: usize,
    /// Mixture modes sit at ±mode_center on every coordinate.
    pub mode_center: f64,
    pub mode_spread: f64,
    /// Per-coordinate probability that a mask reveals the coordinate.
    pub reveal_prob: f64,
    /// Probability that a coordinate's block membership is resampled, which
    /// roughens the contiguous blocks without changing the marginal.
    pub flip_prob: f64,
    /// Silent coordinates in biased pairs are drawn from N(0, bias_spread²).
    pub bias_spread: f64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        SyntheticTask {
            dim: 8,
            mode_center: 1.0,
            mode_spread: 0.25,
            reveal_prob: 0.5,
            flip_prob: 0.2,
            bias_spread: 0.1,
        }
    }
}

impl SyntheticTask {
    /// Exact per-coordinate variance of the unbiased mixture.
    pub fn coord_variance(&self) -> f64 {
        self.mode_center * self.mode_center + self.mode_spread * self.mode_spread
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("task dimension must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.reveal_prob) || !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config("probabilities must lie in [0,1]".into()));
        }
        if self.mode_spread <= 0.0 || self.bias_spread <= 0.0 {
            return Err(Error::Config("spreads must be positive".into()));
        }
        Ok(())
    }

    fn draw_coord(&self, rng: &mut ChaCha8Rng) -> f64 {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        sign * self.mode_center + self.mode_spread * normal(rng)
    }

    pub fn draw_ground_truth(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.dim).map(|_| self.draw_coord(rng)).collect()
    }
}

/// Partial observation: which coordinates are revealed, and their values
/// (zero outside the mask).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub mask: Vec<f64>,
    pub values: Vec<f64>,
}

impl Condition {
    pub fn silent(dim: usize) -> Self {
        Condition { mask: vec![0.0; dim], values: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mask.len()
    }

    pub fn is_silent(&self) -> bool {
        self.mask.iter().all(|&m| m == 0.0)
    }

    pub fn revealed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0.0).count()
    }

    /// Coordinates outside the mask.
    pub fn silent_coords(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&i| self.mask[i] == 0.0).collect()
    }
}

/// Mask application: keeps revealed values, zeroes the rest.
pub fn extract_condition(x0: &[f64], mask: &[f64]) -> Result<Condition> {
    if x0.len() != mask.len() {
        return Err(Error::Invalid(format!(
            "extract_condition: value length {} vs mask length {}",
            x0.len(),
            mask.len()
        )));
    }
    if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::Invalid("mask entries must be 0 or 1".into()));
    }
    let values = x0.iter().zip(mask).map(|(&x, &m)| m * x).collect();
    Ok(Condition { mask: mask.to_vec(), values })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionedSample {
    pub x0: Vec<f64>,
    pub condition: Condition,
    pub cond_type: CondType,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiConditioned {
    pub x0: Vec<f64>,
    pub cond_a: Condition,
    pub cond_b: Condition,
    /// Both conditions came out empty; downstream metrics may skip the pair.
    pub degenerate: bool,
}

/// Contiguous block (cyclic within the type's region) plus independent
/// resampling. Marginal reveal probability is exactly `reveal_prob` on every
/// coordinate of the region, zero outside.
pub fn sample_mask(task: &SyntheticTask, cond_type: CondType, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let region = cond_type.region(task.dim);
    let r = region.len();
    let mut mask = vec![0.0; task.dim];
    if r == 0 {
        return mask;
    }
    // Block length ~ Binomial(r, p): keeps E[coverage] = p under a uniform
    // cyclic start.
    let len = (0..r).filter(|_| rng.random::<f64>() < task.reveal_prob).count();
    let start = rng.random_range(0..r);
    for k in 0..len {
        mask[region.start + (start + k) % r] = 1.0;
    }
    for i in region {
        if rng.random::<f64>() < task.flip_prob {
            mask[i] = if rng.random::<f64>() < task.reveal_prob { 1.0 } else { 0.0 };
        }
    }
    mask
}

/// Unconditioned draws from the unbiased mixture.
pub fn gen_ground_truth(task: &SyntheticTask, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(seed, 0);
    (0..n).map(|_| task.draw_ground_truth(&mut rng)).collect()
}

/// Pairs whose silent coordinates are redrawn from the narrow N(0,
/// bias_spread²): the silent-signal bias.
pub fn gen_biased_pairs(
    task: &SyntheticTask,
    cond_type: CondType,
    n: usize,
    seed: u64,
) -> Vec<ConditionedSample> {
    let mut rng = stream_rng(seed, 1);
    (0..n)
        .map(|_| {
            let mut x0 = task.draw_ground_truth(&mut rng);
            let mask = sample_mask(task, cond_type, &mut rng);
            for i in 0..task.dim {
                if mask[i] == 0.0 {
                    x0[i] = task.bias_spread * normal(&mut rng);
                }
            }
            let condition = extract_condition(&x0, &mask).expect("mask is valid");
            ConditionedSample { x0, condition, cond_type }
        })
        .collect()
}

/// Pairs that keep the unbiased mixture under every mask.
pub fn gen_rebalanced_pairs(
    task: &SyntheticTask,
    cond_type: CondType,
    n: usize,
    seed: u64,
) -> Vec<ConditionedSample> {
    let mut rng = stream_rng(seed, 2);
    (0..n)
        .map(|_| {
            let x0 = task.draw_ground_truth(&mut rng);
            let mask = sample_mask(task, cond_type, &mut rng);
            let condition = extract_condition(&x0, &mask).expect("mask is valid");
            ConditionedSample { x0, condition, cond_type }
        })
        .collect()
}

/// Paired two-branch layouts: type A reveals a sub-block of the front half,
/// type B of the back half; the two masks are disjoint by construction.
pub fn gen_multi_condition(task: &SyntheticTask, n: usize, seed: u64) -> Vec<MultiConditioned> {
    let mut rng = stream_rng(seed, 3);
    (0..n)
        .map(|_| {
            let x0 = task.draw_ground_truth(&mut rng);
            let mask_a = sample_mask(task, CondType::A, &mut rng);
            let mask_b = sample_mask(task, CondType::B, &mut rng);
            let cond_a = extract_condition(&x0, &mask_a).expect("mask is valid");
            let cond_b = extract_condition(&x0, &mask_b).expect("mask is valid");
            let degenerate = cond_a.is_silent() && cond_b.is_silent();
            MultiConditioned { x0, cond_a, cond_b, degenerate }
        })
        .collect()
}

// ---- dataset files ----

/// First line of a dataset file. Everything after the newline is
/// `count * record_len` little-endian f64 values laid out as
/// x0 ‖ mask ‖ values ‖ type-tag per record (multi datasets store each pair
/// as two consecutive records sharing x0).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub kind: String,
    pub dim: usize,
    /// Number of records (for kind = "multi" this is 2 × pair count).
    pub count: usize,
    pub seed: u64,
    pub task: SyntheticTask,
    pub cond_type: CondType,
}

impl DatasetHeader {
    pub fn record_len(&self) -> usize {
        3 * self.dim + 1
    }
}

fn record_bytes(x0: &[f64], cond: &Condition, tag: f64, out: &mut Vec<u8>) {
    for v in x0.iter().chain(&cond.mask).chain(&cond.values).chain(std::iter::once(&tag)) {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn write_dataset(
    path: &Path,
    header: &DatasetHeader,
    samples: &[ConditionedSample],
) -> Result<()> {
    if samples.len() != header.count {
        return Err(Error::Invalid(format!(
            "header says {} records, got {}",
            header.count,
            samples.len()
        )));
    }
    let mut buf = Vec::with_capacity(header.count * header.record_len() * 8);
    for s in samples {
        record_bytes(&s.x0, &s.condition, s.cond_type.tag(), &mut buf);
    }
    write_dataset_raw(path, header, &buf)
}

pub fn write_multi_dataset(
    path: &Path,
    header: &DatasetHeader,
    pairs: &[MultiConditioned],
) -> Result<()> {
    if pairs.len() * 2 != header.count {
        return Err(Error::Invalid(format!(
            "header says {} records, got {} pairs",
            header.count,
            pairs.len()
        )));
    }
    let mut buf = Vec::with_capacity(header.count * header.record_len() * 8);
    for p in pairs {
        record_bytes(&p.x0, &p.cond_a, CondType::A.tag(), &mut buf);
        record_bytes(&p.x0, &p.cond_b, CondType::B.tag(), &mut buf);
    }
    write_dataset_raw(path, header, &buf)
}

fn write_dataset_raw(path: &Path, header: &DatasetHeader, records: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let head = serde_json::to_string(header)
        .map_err(|e| Error::format(path, format!("header serialization: {e}")))?;
    w.write_all(head.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.write_all(records).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<ConditionedSample>)> {
    if !path.exists() {
        return Err(Error::Missing(format!(
            "dataset {} not found; generate it with `condiff gen-data`",
            path.display()
        )));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut head_bytes = Vec::new();
    loop {
        let mut b = [0u8; 1];
        let n = r.read(&mut b).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(Error::format(path, "missing header line"));
        }
        if b[0] == b'\n' {
            break;
        }
        head_bytes.push(b[0]);
    }
    let header: DatasetHeader = serde_json::from_slice(&head_bytes)
        .map_err(|e| Error::format(path, format!("header parse: {e}")))?;

    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    let expect = header.count * header.record_len() * 8;
    if payload.len() != expect {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, header requires {expect}", payload.len()),
        ));
    }

    let d = header.dim;
    let mut samples = Vec::with_capacity(header.count);
    for rec in payload.chunks_exact(header.record_len() * 8) {
        let vals: Vec<f64> =
            rec.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let x0 = vals[0..d].to_vec();
        let mask = vals[d..2 * d].to_vec();
        let values = vals[2 * d..3 * d].to_vec();
        let cond_type = CondType::from_tag(vals[3 * d])
            .map_err(|e| Error::format(path, e.to_string()))?;
        samples.push(ConditionedSample {
            x0,
            condition: Condition { mask, values },
            cond_type,
        });
    }
    Ok((header, samples))
}

/// Reassemble consecutive A/B records of a multi dataset into pairs.
pub fn pairs_from_records(samples: &[ConditionedSample]) -> Result<Vec<MultiConditioned>> {
    if samples.len() % 2 != 0 {
        return Err(Error::Invalid("multi dataset must hold an even record count".into()));
    }
    samples
        .chunks_exact(2)
        .map(|pair| {
            let (a, b) = (&pair[0], &pair[1]);
            if a.cond_type != CondType::A || b.cond_type != CondType::B || a.x0 != b.x0 {
                return Err(Error::Invalid(
                    "multi dataset records must alternate A/B sharing x0".into(),
                ));
            }
            Ok(MultiConditioned {
                x0: a.x0.clone(),
                cond_a: a.condition.clone(),
                cond_b: b.condition.clone(),
                degenerate: a.condition.is_silent() && b.condition.is_silent(),
            })
        })
        .collect()
}
