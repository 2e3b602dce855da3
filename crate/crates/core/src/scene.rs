//! Synthetic multi-plane scenes and the ground-truth assignment procedure.
//!
//! Each plane owns a vertical strip of the left image and maps to the right
//! image through its own homography. Descriptors are unit vectors: a per-feature
//! base direction shared by both views, perturbed independently per view.
//! Ordinary planes draw base directions around a plane-specific center;
//! repetitive planes draw them tightly around one shared direction so that
//! nearest-neighbor descriptor matching is unreliable there.

use nalgebra::{Matrix2, Matrix3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::efm::sbr_match;
use crate::error::{Error, Result};
use crate::gap::{solve_gap, JointMatching, Label, MatchContext};
use crate::geometry::{
    fit_homography, symmetric_transfer_error, Descriptor, Feature, FeatureSet, Homography, Point2, ScoreParams, Side,
};
use crate::labeling::derive_seed;
use crate::par;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub plane_count: usize,
    pub features_per_plane: usize,
    /// Side length of the square images, in pixels.
    pub image_size: f64,
    /// Standard deviation of Gaussian noise on right positions, in pixels.
    pub noise_sigma: f64,
    /// Probability that a feature is dropped, independently per view.
    pub occlusion_rate: f64,
    pub descriptor_dim: usize,
    /// Angular perturbation of each view's descriptor, in radians.
    pub descriptor_noise: f64,
    /// Spread of base directions around an ordinary plane's center.
    pub descriptor_spread: f64,
    /// Number of planes (the last ones) with repetitive descriptors.
    pub repetitive_planes: usize,
    /// Spread of base directions on repetitive planes.
    pub repetitive_spread: f64,
    pub rng_seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            plane_count: 3,
            features_per_plane: 150,
            image_size: 640.0,
            noise_sigma: 0.0,
            occlusion_rate: 0.0,
            descriptor_dim: 32,
            descriptor_noise: 0.05,
            descriptor_spread: 0.01,
            repetitive_planes: 0,
            repetitive_spread: 0.005,
            rng_seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.plane_count == 0 || self.features_per_plane == 0 || self.descriptor_dim < 2 {
            return Err(Error::Invalid("plane count, features per plane and descriptor dimension must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.occlusion_rate) {
            return Err(Error::Invalid(format!("occlusion rate {} outside [0, 1)", self.occlusion_rate)));
        }
        if self.image_size.is_nan() || self.image_size <= 0.0 || self.noise_sigma < 0.0 || self.descriptor_noise < 0.0 {
            return Err(Error::Invalid("image size must be positive and noise levels nonnegative".into()));
        }
        if self.descriptor_spread < 0.0 || self.repetitive_spread < 0.0 {
            return Err(Error::Invalid("descriptor spreads must be nonnegative".into()));
        }
        if self.repetitive_planes > self.plane_count {
            return Err(Error::Invalid("more repetitive planes than planes".into()));
        }
        Ok(())
    }
}

/// What the generator built: per-plane models and the true correspondences.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub models: Vec<Homography>,
    /// `(left id, right id, plane)` for every feature visible in both views, ascending by left id.
    pub pairs: Vec<(usize, usize, usize)>,
    pub left_plane: Vec<usize>,
    pub right_plane: Vec<usize>,
}

impl GroundTruth {
    /// Label of every real left feature: its plane, or the outlier if its partner is occluded.
    pub fn labeling(&self) -> Vec<Label> {
        let mut f = vec![Label::Outlier; self.left_plane.len()];
        for &(p, _, h) in &self.pairs {
            f[p] = Label::Model(h);
        }
        f
    }

    /// True pairs of one plane.
    pub fn support(&self, plane: usize) -> Vec<(usize, usize)> {
        self.pairs.iter().filter(|t| t.2 == plane).map(|t| (t.0, t.1)).collect()
    }

    /// The features of one plane from both views, renumbered from zero, with
    /// the original ids of each.
    pub fn region(&self, left: &FeatureSet, right: &FeatureSet, plane: usize) -> Result<Region> {
        let left_ids: Vec<usize> = (0..self.left_plane.len()).filter(|&p| self.left_plane[p] == plane).collect();
        let right_ids: Vec<usize> = (0..self.right_plane.len()).filter(|&q| self.right_plane[q] == plane).collect();
        let pick = |set: &FeatureSet, ids: &[usize], side| {
            let feats = ids
                .iter()
                .enumerate()
                .map(|(i, &id)| Feature { id: i, ..set.get(id).clone() })
                .collect();
            FeatureSet::new(side, feats)
        };
        Ok(Region {
            left: pick(left, &left_ids, Side::Left)?,
            right: pick(right, &right_ids, Side::Right)?,
            left_ids,
            right_ids,
        })
    }
}

/// A single-plane sub-problem with the original ids of its features.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub left: FeatureSet,
    pub right: FeatureSet,
    pub left_ids: Vec<usize>,
    pub right_ids: Vec<usize>,
}

const DRAW_RETRIES: usize = 100;

fn random_homography(rng: &mut ChaCha8Rng, center: Point2, reach: f64, size: f64) -> Result<Homography> {
    for _ in 0..DRAW_RETRIES {
        let s = rng.gen_range(0.8..1.2);
        let theta: f64 = rng.gen_range(-0.35..0.35);
        let shear = rng.gen_range(-0.15..0.15);
        let rot = Matrix2::new(theta.cos(), -theta.sin(), theta.sin(), theta.cos());
        let a = rot * Matrix2::new(1.0, shear, 0.0, 1.0) * s;
        let sv = a.singular_values();
        if sv.max() / sv.min() > 4.0 {
            continue;
        }
        let g = (rng.gen_range(-1.0..1.0) * 0.4 / reach, rng.gen_range(-1.0..1.0) * 0.4 / reach);
        let shift = (rng.gen_range(-0.1..0.1) * size, rng.gen_range(-0.1..0.1) * size);
        let to_origin = Matrix3::new(1.0, 0.0, -center.x, 0.0, 1.0, -center.y, 0.0, 0.0, 1.0);
        let core = Matrix3::new(a[(0, 0)], a[(0, 1)], 0.0, a[(1, 0)], a[(1, 1)], 0.0, g.0, g.1, 1.0);
        let back = Matrix3::new(1.0, 0.0, center.x + shift.0, 0.0, 1.0, center.y + shift.1, 0.0, 0.0, 1.0);
        if let Ok(h) = Homography::new(back * core * to_origin) {
            return Ok(h);
        }
    }
    Err(Error::Degenerate("homography draw retry budget exhausted".into()))
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `base` rotated by `angle` toward a random orthogonal direction.
fn perturb(rng: &mut ChaCha8Rng, base: &[f64], angle: f64) -> Vec<f64> {
    let mut u = unit_gaussian(rng, base.len());
    let d: f64 = u.iter().zip(base).map(|(a, b)| a * b).sum();
    for (x, b) in u.iter_mut().zip(base) {
        *x -= d * b;
    }
    let n = u.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    base.iter().zip(&u).map(|(b, x)| angle.cos() * b + angle.sin() * x / n).collect()
}

fn spread_around(rng: &mut ChaCha8Rng, center: &[f64], spread: f64) -> Vec<f64> {
    let v: Vec<f64> = center
        .iter()
        .map(|c| {
            let z: f64 = StandardNormal.sample(rng);
            c + spread * z
        })
        .collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Builds both views and the ground truth. Deterministic in `spec.rng_seed`.
pub fn generate_scene(spec: &SceneSpec) -> Result<(FeatureSet, FeatureSet, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let size = spec.image_size;
    let strip = size / spec.plane_count as f64;
    let normal = rand_distr::Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("valid sigma");
    let repetitive_center = unit_gaussian(&mut rng, spec.descriptor_dim);

    let mut models = Vec::with_capacity(spec.plane_count);
    let mut left = Vec::new();
    let mut right = Vec::new();
    for plane in 0..spec.plane_count {
        let x0 = plane as f64 * strip + 0.05 * strip;
        let x1 = (plane + 1) as f64 * strip - 0.05 * strip;
        let (y0, y1) = (0.05 * size, 0.95 * size);
        let center = Point2::new(0.5 * (x0 + x1), 0.5 * (y0 + y1));
        let h = random_homography(&mut rng, center, 0.5 * (y1 - y0), size)?;
        let repetitive = plane >= spec.plane_count - spec.repetitive_planes;
        let plane_center = unit_gaussian(&mut rng, spec.descriptor_dim);
        let (c, spread) = if repetitive {
            (&repetitive_center, spec.repetitive_spread)
        } else {
            (&plane_center, spec.descriptor_spread)
        };
        for _ in 0..spec.features_per_plane {
            let p = Point2::new(rng.gen_range(x0..x1), rng.gen_range(y0..y1));
            let mapped = h.apply(p)?;
            let q = if spec.noise_sigma > 0.0 {
                Point2::new(mapped.x + normal.sample(&mut rng), mapped.y + normal.sample(&mut rng))
            } else {
                mapped
            };
            let base = spread_around(&mut rng, c, spread);
            let (al, ar) = (spec.descriptor_noise * rng.gen::<f64>(), spec.descriptor_noise * rng.gen::<f64>());
            let dl = perturb(&mut rng, &base, al);
            let dr = perturb(&mut rng, &base, ar);
            let keep_l = !rng.gen_bool(spec.occlusion_rate);
            let keep_r = !rng.gen_bool(spec.occlusion_rate);
            left.push((p, dl, plane, keep_l, keep_r));
            right.push((q, dr));
        }
        models.push(h);
    }

    let mut left_feats = Vec::new();
    let mut left_plane = Vec::new();
    let mut partner_of = Vec::new();
    let mut right_src: Vec<usize> = (0..right.len()).filter(|&i| left[i].4).collect();
    right_src.shuffle(&mut rng);
    let mut right_id = vec![usize::MAX; right.len()];
    for (id, &i) in right_src.iter().enumerate() {
        right_id[i] = id;
    }
    for (i, (p, d, plane, keep_l, keep_r)) in left.iter().enumerate() {
        if !keep_l {
            continue;
        }
        let id = left_feats.len();
        left_feats.push(Feature::new(id, *p, Descriptor::new(d.clone())?));
        left_plane.push(*plane);
        if *keep_r {
            partner_of.push((id, right_id[i], *plane));
        }
    }
    let mut right_feats = Vec::with_capacity(right_src.len());
    let mut right_plane = Vec::with_capacity(right_src.len());
    for (id, &i) in right_src.iter().enumerate() {
        right_feats.push(Feature::new(id, right[i].0, Descriptor::new(right[i].1.clone())?));
        right_plane.push(left[i].2);
    }
    let gt = GroundTruth { models, pairs: partner_of, left_plane, right_plane };
    Ok((FeatureSet::new(Side::Left, left_feats)?, FeatureSet::new(Side::Right, right_feats)?, gt))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacParams {
    pub iterations: usize,
    /// Symmetric transfer error below which a pair is an inlier, in pixels.
    pub threshold: f64,
    /// Smallest consensus accepted.
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self { iterations: 500, threshold: 3.0, min_inliers: 8, seed: 0 }
    }
}

/// Best four-point model by inlier count (first found wins ties), refit on its inliers.
/// Returns the model and the inlier indices into `pairs`.
pub fn ransac_homography(pairs: &[(Point2, Point2)], params: &RansacParams) -> Result<(Homography, Vec<usize>)> {
    if pairs.len() < 4 {
        return Err(Error::TooFewPairs { needed: 4, got: pairs.len() });
    }
    let inliers_of = |h: &Homography| -> Vec<usize> {
        (0..pairs.len())
            .filter(|&i| symmetric_transfer_error(h, pairs[i].0, pairs[i].1).is_ok_and(|e| e < params.threshold))
            .collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let idx: Vec<usize> = (0..pairs.len()).collect();
    let mut best: Option<(Homography, Vec<usize>)> = None;
    for _ in 0..params.iterations {
        let sample: Vec<(Point2, Point2)> = idx.choose_multiple(&mut rng, 4).map(|&i| pairs[i]).collect();
        let Ok(h) = fit_homography(&sample) else { continue };
        let inl = inliers_of(&h);
        if best.as_ref().is_none_or(|b| inl.len() > b.1.len()) {
            let all = inl.len() == pairs.len();
            best = Some((h, inl));
            if all {
                break;
            }
        }
    }
    let (h, inl) = best.ok_or_else(|| Error::Degenerate("every sample was degenerate".into()))?;
    if inl.len() < params.min_inliers.max(4) {
        return Err(Error::Degenerate(format!("best consensus {} below {}", inl.len(), params.min_inliers)));
    }
    let support: Vec<(Point2, Point2)> = inl.iter().map(|&i| pairs[i]).collect();
    match fit_homography(&support) {
        Ok(refit) => {
            let refit_inl = inliers_of(&refit);
            if refit_inl.len() >= inl.len() {
                return Ok((refit, refit_inl));
            }
            Ok((h, inl))
        }
        Err(_) => Ok((h, inl)),
    }
}

/// Outcome of `gt_assignment`.
#[derive(Debug, Clone, PartialEq)]
pub struct GtAssignment {
    /// Over the balanced sets (dummy ids follow the real ones); labels are `0` or the outlier.
    pub matching: JointMatching,
    pub model: Homography,
    pub objective: i64,
    /// Objective after each inner step of the winning restart.
    pub trace: Vec<i64>,
    /// Final objective of every restart.
    pub restart_objectives: Vec<i64>,
}

/// Ratio used for the initial nearest-neighbor matches.
pub const GT_INIT_RATIO: f64 = 0.9;

/// One-model assignment with occlusion: RANSAC start, then alternate optimal
/// matching with a refit that is kept only when it lowers the matched cost,
/// until the objective stops decreasing. Restarts run with derived seeds and
/// the lowest objective wins (earliest restart on ties).
pub fn gt_assignment(
    left: &FeatureSet,
    right: &FeatureSet,
    params: &ScoreParams,
    restarts: usize,
    seed: u64,
) -> Result<GtAssignment> {
    if restarts == 0 {
        return Err(Error::Invalid("at least one restart is needed".into()));
    }
    let ctx = MatchContext::new(left, right, *params)?;
    let init = sbr_match(left, right, GT_INIT_RATIO)?;
    let pts: Vec<(Point2, Point2)> = init.pairs.iter().map(|&(p, q)| (left.get(p).pos, right.get(q).pos)).collect();
    let runs = par::map_range(restarts, |r| -> Result<(JointMatching, Homography, Vec<i64>)> {
        let rp = RansacParams { seed: derive_seed(seed, r as u64), ..RansacParams::default() };
        let (mut h, _) = ransac_homography(&pts, &rp)?;
        let mut trace = Vec::new();
        loop {
            let m = solve_gap(&ctx.instance(&[h], true))?;
            trace.push(m.objective);
            let inliers: Vec<(usize, usize)> = m
                .triples
                .iter()
                .filter(|t| t.label == Label::Model(0))
                .map(|t| (t.p, t.q))
                .collect();
            let corr: Vec<(Point2, Point2)> = inliers.iter().map(|&(p, q)| (left.get(p).pos, right.get(q).pos)).collect();
            let improved = fit_homography(&corr).ok().filter(|refit| {
                let old: i64 = inliers.iter().map(|&(p, q)| ctx.pair_cost(&h, p, q).expect("matched pair")).sum();
                let new: Option<i64> = inliers.iter().map(|&(p, q)| ctx.pair_cost(refit, p, q)).sum();
                new.is_some_and(|c| c < old)
            });
            match improved {
                Some(refit) => h = refit,
                None => return Ok((m, h, trace)),
            }
        }
    });
    let mut best: Option<(JointMatching, Homography, Vec<i64>)> = None;
    let mut objectives = Vec::new();
    let mut last_err = None;
    for run in runs {
        match run {
            Ok(r) => {
                objectives.push(r.0.objective);
                if best.as_ref().is_none_or(|b| r.0.objective < b.0.objective) {
                    best = Some(r);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let (matching, model, trace) = best.ok_or_else(|| last_err.expect("at least one restart ran"))?;
    Ok(GtAssignment { objective: matching.objective, matching, model, trace, restart_objectives: objectives })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SceneSpec {
        SceneSpec { features_per_plane: 40, rng_seed: seed, ..SceneSpec::default() }
    }

    #[test]
    fn noise_free_scene_is_exact() {
        let (l, r, gt) = generate_scene(&small(1)).unwrap();
        assert_eq!(l.len(), 120);
        assert_eq!(r.len(), 120);
        assert_eq!(gt.pairs.len(), 120);
        for &(p, q, h) in &gt.pairs {
            let e = symmetric_transfer_error(&gt.models[h], l.get(p).pos, r.get(q).pos).unwrap();
            assert!(e < 1e-9, "{e}");
            assert_eq!(gt.left_plane[p], gt.right_plane[q]);
        }
    }

    #[test]
    fn scenes_are_reproducible() {
        let a = generate_scene(&small(5)).unwrap();
        let b = generate_scene(&small(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, generate_scene(&small(6)).unwrap().0);
    }

    #[test]
    fn occlusion_rate_is_binomial() {
        let spec = SceneSpec { plane_count: 1, features_per_plane: 100, occlusion_rate: 0.1, ..small(3) };
        let mut dropped = 0usize;
        let runs = 20;
        for s in 0..runs {
            let (l, r, _) = generate_scene(&SceneSpec { rng_seed: s, ..spec.clone() }).unwrap();
            dropped += 200 - l.len() - r.len();
        }
        let mean = dropped as f64 / runs as f64;
        // two sides, 100 trials each: mean 20, sd 3 per scene
        assert!((mean - 20.0).abs() < 3.0 * 3.0 / (runs as f64).sqrt() * 3.0, "{mean}");
    }

    #[test]
    fn bad_specs_rejected() {
        assert!(generate_scene(&SceneSpec { occlusion_rate: 1.0, ..small(0) }).is_err());
        assert!(generate_scene(&SceneSpec { plane_count: 0, ..small(0) }).is_err());
    }

    #[test]
    fn ransac_recovers_model_and_inliers() {
        let h = Homography::from_rows([[1.1, 0.05, 20.0], [-0.03, 0.95, -10.0], [1e-4, -5e-5, 1.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut pairs = Vec::new();
        for i in 0..100 {
            let p = Point2::new(rng.gen_range(0.0..500.0), rng.gen_range(0.0..500.0));
            let q = if i % 5 == 0 {
                Point2::new(rng.gen_range(0.0..500.0), rng.gen_range(0.0..500.0))
            } else {
                h.apply(p).unwrap()
            };
            pairs.push((p, q));
        }
        let (est, inl) = ransac_homography(&pairs, &RansacParams::default()).unwrap();
        assert_eq!(inl.len(), 80);
        assert!(est.distance(&h) < 1e-7);
    }

    #[test]
    fn ransac_fails_on_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pairs: Vec<_> = (0..60)
            .map(|_| {
                (
                    Point2::new(rng.gen_range(0.0..500.0), rng.gen_range(0.0..500.0)),
                    Point2::new(rng.gen_range(0.0..500.0), rng.gen_range(0.0..500.0)),
                )
            })
            .collect();
        assert!(ransac_homography(&pairs, &RansacParams::default()).is_err());
        assert!(ransac_homography(&pairs[..3], &RansacParams::default()).is_err());
    }

    #[test]
    fn gt_assignment_recovers_noise_free_region() {
        let (l, r, gt) = generate_scene(&small(11)).unwrap();
        let region = gt.region(&l, &r, 1).unwrap();
        let out = gt_assignment(&region.left, &region.right, &ScoreParams::default(), 3, 4).unwrap();
        assert_eq!(out.objective, 0);
        let truth = gt.support(1);
        for t in &out.matching.triples {
            assert_eq!(t.label, Label::Model(0));
            assert!(truth.contains(&(region.left_ids[t.p], region.right_ids[t.q])));
        }
        assert!(out.trace.windows(2).all(|w| w[1] <= w[0]));
    }
}
