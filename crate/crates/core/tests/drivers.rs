use fitmatch::efm::{energy_e1, energy_e2, left_neighbors, run_ef, run_efm1, run_efm2, sbr_match, EfmOptions, JointState};
use fitmatch::eval::{gq, roc};
use fitmatch::gap::{JointMatching, Label, MatchContext, Triple};
use fitmatch::geometry::{Descriptor, FeatureSet, Homography, Point2, ScoreParams, Side};
use fitmatch::labeling::{EnergyParams, ProposalPool};
use fitmatch::scene::{generate_scene, SceneSpec};

fn opts(seed: u64) -> EfmOptions {
    EfmOptions { seed, ..EfmOptions::default() }
}

#[test]
fn three_plane_noise_free_scene_is_recovered() {
    let spec = SceneSpec { plane_count: 3, features_per_plane: 60, rng_seed: 7, ..SceneSpec::default() };
    let (l, r, gt) = generate_scene(&spec).unwrap();
    let ctx = MatchContext::new(&l, &r, ScoreParams::default()).unwrap();
    let state = run_efm1(&ctx, &opts(1)).unwrap();
    let report = roc(&state.matching, &gt).unwrap();
    assert!(report.tpr >= 0.95, "TPR {}", report.tpr);
    assert!(state.iterations <= 10);
    let quality = gq(&state.models, &gt, &l, &r).unwrap();
    for e in &quality.entries {
        // zero residual ground truth leaves the ratio undefined
        assert!(e.ratio.is_none());
        let support = gt.support(e.gt_model).len() as f64;
        assert!(e.numerator / support < 0.05, "mean residual {}", e.numerator / support);
    }
    let energies: Vec<i64> = state.energy_trace.iter().map(|e| e.1).collect();
    assert!(energies.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn single_plane_reaches_its_fixed_point_in_one_iteration() {
    let spec = SceneSpec { plane_count: 1, features_per_plane: 50, rng_seed: 2, ..SceneSpec::default() };
    let (l, r, _) = generate_scene(&spec).unwrap();
    let ctx = MatchContext::new(&l, &r, ScoreParams::default()).unwrap();
    let state = run_efm1(&ctx, &opts(3)).unwrap();
    let after_first = state.energy_trace.iter().rfind(|e| e.0 == 1).unwrap().1;
    assert_eq!(state.energy(), Some(after_first));
    assert_eq!(state.models.len(), 1);
    assert!(energy_e1(&ctx, &state, &opts(3).energy).unwrap() >= opts(3).energy.beta);
}

#[test]
fn baseline_keeps_its_initial_matching() {
    let spec = SceneSpec { plane_count: 2, features_per_plane: 60, noise_sigma: 0.5, rng_seed: 4, ..SceneSpec::default() };
    let (l, r, _) = generate_scene(&spec).unwrap();
    let ctx = MatchContext::new(&l, &r, ScoreParams::default()).unwrap();
    let o = opts(5);
    let state = run_ef(&ctx, &o).unwrap();
    let mut sbr = sbr_match(&ctx.left, &ctx.right, o.sbr_ratio).unwrap().pairs;
    sbr.sort_unstable();
    for (p, q) in sbr {
        assert_eq!(state.matching.triples[p].q, q);
    }
    let energies: Vec<i64> = state.energy_trace.iter().map(|e| e.1).collect();
    assert!(energies.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn refinement_without_smoothness_keeps_the_energy() {
    let spec = SceneSpec { plane_count: 2, features_per_plane: 50, noise_sigma: 0.5, rng_seed: 9, ..SceneSpec::default() };
    let (l, r, _) = generate_scene(&spec).unwrap();
    let ctx = MatchContext::new(&l, &r, ScoreParams::default()).unwrap();
    let o = opts(2);
    let state = run_efm1(&ctx, &o).unwrap();
    let params = EnergyParams { lambda: 0, ..o.energy };
    let nbrs = left_neighbors(&ctx).unwrap();
    let before = energy_e1(&ctx, &state, &params).unwrap();
    assert_eq!(energy_e2(&ctx, &state, &params, &nbrs).unwrap(), before);
    let refined = run_efm2(&ctx, &state, &params, &nbrs, 1).unwrap();
    assert_eq!(energy_e2(&ctx, &refined, &params, &nbrs).unwrap(), before);
}

fn set(side: Side, pts: &[Point2]) -> FeatureSet {
    let d = Descriptor::new(vec![1.0, 0.0, 0.0]).unwrap();
    FeatureSet::from_parts(side, pts.to_vec(), vec![d; pts.len()]).unwrap()
}

#[test]
fn isolated_label_is_corrected_by_smoothness() {
    // a 5x5 grid on the identity, a far cluster on a shift by (5, 0), and the
    // grid center matched to a point the shift explains
    let mut left = Vec::new();
    let mut right = Vec::new();
    for i in 0..5 {
        for j in 0..5 {
            let p = Point2::new(100.0 + 10.0 * i as f64, 100.0 + 10.0 * j as f64);
            left.push(p);
            right.push(p);
        }
    }
    let center = 12;
    for i in 0..3 {
        for j in 0..3 {
            let p = Point2::new(400.0 + 12.0 * i as f64 + 3.0 * j as f64, 100.0 + 11.0 * j as f64);
            left.push(p);
            right.push(Point2::new(p.x + 5.0, p.y));
        }
    }
    let wrong = right.len();
    right.push(Point2::new(left[center].x + 5.0, left[center].y));

    let ctx = MatchContext::new(&set(Side::Left, &left), &set(Side::Right, &right), ScoreParams::default()).unwrap();
    let n = ctx.size();
    let models = ProposalPool::new(vec![Homography::identity(), Homography::translation(5.0, 0.0)]);
    let mut triples = Vec::new();
    for p in 0..n {
        let t = if p == center {
            Triple { p, q: wrong, label: Label::Model(1) }
        } else if p < 25 {
            Triple { p, q: p, label: Label::Model(0) }
        } else if p < 34 {
            Triple { p, q: p, label: Label::Model(1) }
        } else {
            Triple { p, q: center, label: Label::Outlier }
        };
        triples.push(t);
    }
    let m = JointMatching::new(triples, 0);
    let state = JointState::new(JointMatching { objective: 0, ..m }, models);
    let params = EnergyParams { beta: ctx.params.ticks(1.0), lambda: ctx.params.ticks(5.0) };
    let nbrs = left_neighbors(&ctx).unwrap();
    let before = energy_e2(&ctx, &state, &params, &nbrs).unwrap();

    let out = run_efm2(&ctx, &state, &params, &nbrs, 1).unwrap();
    let grid_label = out.matching.triples[0].label;
    assert_eq!(out.matching.triples[center].label, grid_label);
    assert_eq!(out.matching.triples[center].q, center);
    assert!(energy_e2(&ctx, &out, &params, &nbrs).unwrap() < before);
    let energies: Vec<i64> = out.energy_trace.iter().map(|e| e.1).collect();
    assert!(energies.windows(2).all(|w| w[1] <= w[0]));
}
