//! Match-quality and model-quality measures, and the scaling benchmark.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gap::{GapInstance, JointMatching, Label, Triple};
use crate::geometry::{symmetric_transfer_error, FeatureSet, Homography};
use crate::labeling::ProposalPool;
use crate::lsgap::{ls_gap_with, ExhaustiveSolver, FlowSolver, GapSolver, LabelSubset};
use crate::oracle::MAX_BRUTE_FORCE;
use crate::scene::GroundTruth;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocReport {
    pub p: usize,
    pub n: usize,
    pub tp: usize,
    pub fp: usize,
    pub tpr: f64,
    pub fpr: f64,
}

/// Counts identified matches against the ground truth. A pair is identified
/// when both features are real and its label is a model.
pub fn roc(m: &JointMatching, gt: &GroundTruth) -> Result<RocReport> {
    let (nl, nr) = (gt.left_plane.len(), gt.right_plane.len());
    if m.triples.len() < nl.max(nr) {
        return Err(Error::Invalid(format!(
            "matching covers {} features, ground truth has {nl} left and {nr} right",
            m.triples.len()
        )));
    }
    let mut truth = vec![None; nl];
    for &(p, q, _) in &gt.pairs {
        truth[p] = Some(q);
    }
    let (mut tp, mut fp) = (0, 0);
    for t in &m.triples {
        if t.label.is_outlier() || t.p >= nl || t.q >= nr {
            continue;
        }
        if truth[t.p] == Some(t.q) {
            tp += 1;
        } else {
            fp += 1;
        }
    }
    let p = gt.pairs.len();
    let n = nl * nr - p;
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(RocReport { p, n, tp, fp, tpr: ratio(tp, p), fpr: ratio(fp, n) })
}

/// Summed symmetric transfer error of `model` over the pairs labeled `label`.
/// Pairs mapped to infinity contribute an infinite error.
pub fn ste(model: &Homography, left: &FeatureSet, right: &FeatureSet, triples: &[Triple], label: Label) -> f64 {
    triples
        .iter()
        .filter(|t| t.label == label)
        .map(|t| symmetric_transfer_error(model, left.get(t.p).pos, right.get(t.q).pos).unwrap_or(f64::INFINITY))
        .sum()
}

/// Quality of the estimated model assigned to one ground-truth model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GqEntry {
    pub gt_model: usize,
    pub estimated: usize,
    pub numerator: f64,
    pub denominator: f64,
    /// `None` when the denominator is zero up to rounding.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GqReport {
    pub entries: Vec<GqEntry>,
}

impl GqReport {
    /// Defined ratios in ground-truth model order.
    pub fn ratios(&self) -> Vec<f64> {
        self.entries.iter().filter_map(|e| e.ratio).collect()
    }
}

/// Per-pair residual below which a ground-truth error counts as zero.
pub const ZERO_RESIDUAL: f64 = 1e-9;

/// Pairs every ground-truth model with the estimated model of least error on
/// that model's true support (several may share one estimate) and reports the
/// error ratio against the ground-truth model itself.
pub fn gq(estimated: &ProposalPool, gt: &GroundTruth, left: &FeatureSet, right: &FeatureSet) -> Result<GqReport> {
    if estimated.is_empty() {
        return Err(Error::Invalid("no estimated models".into()));
    }
    let triples: Vec<Triple> = gt.pairs.iter().map(|&(p, q, h)| Triple { p, q, label: Label::Model(h) }).collect();
    let entries = (0..gt.models.len())
        .map(|g| {
            let label = Label::Model(g);
            let denominator = ste(&gt.models[g], left, right, &triples, label);
            let (estimated, numerator) = estimated
                .models
                .iter()
                .enumerate()
                .map(|(i, h)| (i, ste(h, left, right, &triples, label)))
                .fold((0, f64::INFINITY), |best, c| if c.1 < best.1 { c } else { best });
            let support = triples.iter().filter(|t| t.label == label).count().max(1) as f64;
            let ratio = (denominator > ZERO_RESIDUAL * support).then(|| numerator / denominator);
            GqEntry { gt_model: g, estimated, numerator, denominator, ratio }
        })
        .collect();
    Ok(GqReport { entries })
}

/// Mean, median and population variance; `None` for an empty input.
pub fn summary(values: &[f64]) -> Option<(f64, f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len().is_multiple_of(2) { 0.5 * (sorted[mid - 1] + sorted[mid]) } else { sorted[mid] };
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, median, variance))
}

/// Random joint-matching instance for benchmarking: each model admits a pair
/// with probability `density`, at a cost uniform in `[0, 3T)`.
pub fn random_instance(size: usize, labels: usize, outlier: i64, density: f64, seed: u64) -> Result<GapInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let costs: Vec<Vec<Vec<Option<i64>>>> = (0..labels)
        .map(|_| {
            (0..size)
                .map(|_| (0..size).map(|_| rng.gen_bool(density).then(|| rng.gen_range(0..3 * outlier))).collect())
                .collect()
        })
        .collect();
    GapInstance::from_costs(&costs, size, size, Some(outlier))
}

/// One benchmark measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: &'static str,
    pub size: usize,
    pub labels: usize,
    pub runs: usize,
    pub mean_seconds: f64,
    /// Summed over runs; deterministic for a fixed seed set.
    pub evaluations: usize,
    pub accepted_moves: usize,
    /// Final energies summed over runs, in ticks.
    pub energy: i64,
}

/// Settings shared by the benchmark instances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchConfig {
    pub outlier: i64,
    pub beta: i64,
    pub density: f64,
    /// Timed repetitions per instance.
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { outlier: 2_000_000, beta: 1_000_000, density: 0.5, repeats: 1 }
    }
}

/// Times label-subset local search with the flow solver and, where it fits,
/// with exhaustive enumeration, over every `(size, labels)` combination.
/// The exhaustive arm is skipped above its size limit.
pub fn bench_scaling(sizes: &[usize], label_counts: &[usize], seeds: &[u64], cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    let arms: [&dyn GapSolver; 2] = [&FlowSolver, &ExhaustiveSolver];
    for &labels in label_counts {
        for &size in sizes {
            let instances = seeds
                .iter()
                .map(|&s| random_instance(size, labels, cfg.outlier, cfg.density, s))
                .collect::<Result<Vec<_>>>()?;
            for arm in arms {
                if arm.name() == "exhaustive" && size > MAX_BRUTE_FORCE {
                    continue;
                }
                let mut row = BenchRow {
                    method: arm.name(),
                    size,
                    labels,
                    runs: instances.len(),
                    mean_seconds: 0.0,
                    evaluations: 0,
                    accepted_moves: 0,
                    energy: 0,
                };
                let mut total = 0.0;
                let repeats = cfg.repeats.max(1);
                for inst in &instances {
                    let start = Instant::now();
                    let sol = ls_gap_with(inst, cfg.beta, &LabelSubset::empty(), arm)?;
                    for _ in 1..repeats {
                        std::hint::black_box(ls_gap_with(inst, cfg.beta, &LabelSubset::empty(), arm)?);
                    }
                    total += start.elapsed().as_secs_f64() / repeats as f64;
                    row.evaluations += sol.evaluations;
                    row.accepted_moves += sol.trace.len() - 1;
                    row.energy += sol.energy;
                }
                row.mean_seconds = total / instances.len().max(1) as f64;
                rows.push(row);
            }
        }
    }
    Ok(rows)
}
