//! Acceptance suite. Each criterion prints one `[PASS]` or `[FAIL]` line; the
//! process exits nonzero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use fitmatch::efm::{run_ef, run_efm1, EfmOptions};
use fitmatch::eval::{bench_scaling, gq, random_instance, roc, BenchConfig, BenchRow};
use fitmatch::flow::solve_min_cost_max_flow;
use fitmatch::gap::{build_gap_network, solve_gap, GapInstance, Label, MatchContext};
use fitmatch::geometry::{neighbor_graph, Point2, ScoreParams};
use fitmatch::labeling::{
    expansion_energy, fit_step_e1, fit_step_e2, minimize_binary, sample_proposals, EnergyParams, ProposalPool,
};
use fitmatch::lsgap::ls_gap;
use fitmatch::oracle::{brute_force_gap, check_total_unimodularity, coefficient_matrix};
use fitmatch::par;
use fitmatch::scene::{generate_scene, gt_assignment, SceneSpec};
use fitmatch::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn oracle_instances() -> Vec<GapInstance> {
    (0..100u64)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let nl = 2 + (seed as usize % 4);
            let labels = 1 + (seed as usize / 4) % 3;
            // odd seeds: unequal sides balanced with dummies, always with an outlier model
            let (nr, outlier) = if seed % 2 == 1 {
                (rng.gen_range(1..=5), Some(rng.gen_range(5..40)))
            } else {
                (nl, rng.gen_bool(0.5).then(|| rng.gen_range(5..40)))
            };
            let costs: Vec<Vec<Vec<Option<i64>>>> = (0..labels)
                .map(|_| {
                    (0..nl)
                        .map(|_| (0..nr).map(|_| rng.gen_bool(0.8).then(|| rng.gen_range(0..50))).collect())
                        .collect()
                })
                .collect();
            GapInstance::from_costs(&costs, nl, nr, outlier).unwrap()
        })
        .collect()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut agree = 0;
    let mut infeasible = 0;
    let mut first_bad = None;
    for (i, inst) in oracle_instances().iter().enumerate() {
        match (solve_gap(inst), brute_force_gap(inst)) {
            (Ok(a), Ok(b)) if a.objective == b.objective => agree += 1,
            (Err(Error::Infeasible(_)), Err(Error::Infeasible(_))) => {
                agree += 1;
                infeasible += 1;
            }
            _ => {
                first_bad.get_or_insert(i);
            }
        }
    }
    let t = start.elapsed();
    Outcome::new(
        agree == 100 && t < Duration::from_secs(10),
        format!("{agree}/100 objectives equal ({infeasible} infeasible in both), first mismatch {first_bad:?}, {t:.2?}"),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut integral = 0;
    let mut networks = 0;
    for inst in oracle_instances() {
        if let Ok(g) = build_gap_network(&inst) {
            networks += 1;
            let flow = solve_min_cost_max_flow(&g.network).unwrap();
            if flow.flow_per_arc.iter().all(|&f| f == 0 || f == 1) && flow.validate(&g.network).is_ok() {
                integral += 1;
            }
        }
    }
    let mut tu = Vec::new();
    for n in 1..=3 {
        for l in 1..=2 {
            let a = coefficient_matrix(n, l).unwrap();
            tu.push(check_total_unimodularity(&a, a.rows()).unwrap());
        }
    }
    let t = start.elapsed();
    Outcome::new(
        integral == networks && tu.iter().all(|&x| x) && t < Duration::from_secs(60),
        format!("{integral}/{networks} flows integral, {}/{} matrices totally unimodular, {t:.2?}", tu.iter().filter(|&&x| x).count(), tu.len()),
    )
}

fn small_scene(seed: u64) -> (MatchContext, fitmatch::scene::GroundTruth) {
    let spec = SceneSpec {
        plane_count: 2 + (seed as usize % 2),
        features_per_plane: 50,
        noise_sigma: 0.5,
        occlusion_rate: 0.1,
        rng_seed: seed,
        ..SceneSpec::default()
    };
    let (l, r, gt) = generate_scene(&spec).unwrap();
    (MatchContext::new(&l, &r, ScoreParams::default()).unwrap(), gt)
}

fn criterion_3() -> Outcome {
    let mut ls_bad = 0;
    let mut ls_runs = 0;
    for inst in oracle_instances().iter().filter(|i| i.has_outlier()) {
        let sol = ls_gap(inst, 7).unwrap();
        ls_runs += 1;
        if !sol.trace.windows(2).all(|w| w[1] < w[0]) {
            ls_bad += 1;
        }
    }
    let increases: Vec<usize> = par::map_range(20, |s| {
        let (ctx, _) = small_scene(s as u64);
        let state = run_efm1(&ctx, &EfmOptions { seed: s as u64, ..EfmOptions::default() }).unwrap();
        state.energy_trace.windows(2).filter(|w| w[1].1 > w[0].1).count()
    });
    let scene_bad = increases.iter().filter(|&&c| c > 0).count();
    Outcome::new(
        ls_bad == 0 && scene_bad == 0,
        format!("{ls_bad}/{ls_runs} local-search traces not strictly decreasing, {scene_bad}/20 scene traces with an increase"),
    )
}

fn criterion_4() -> Outcome {
    let mut fit_equal = 0;
    for seed in 0..10u64 {
        let (ctx, gt) = small_scene(seed);
        let pairs: Vec<(usize, usize)> = gt.pairs.iter().map(|&(p, q, _)| (p, q)).collect();
        let m = ctx.matching_from_pairs(&pairs).unwrap();
        let mut models = gt.models.clone();
        models.extend(sample_proposals(&ctx, &pairs, 6, seed).unwrap().models);
        let pool = ProposalPool::new(models);
        let params = EnergyParams { beta: ctx.params.ticks(5.0), lambda: 0 };
        let nbrs = fitmatch::efm::left_neighbors(&ctx).unwrap();
        let a = fit_step_e1(&ctx, &m, &pool, &params).unwrap();
        let b = fit_step_e2(&ctx, &m, &pool, &params, &nbrs).unwrap();
        if a.energy == b.energy {
            fit_equal += 1;
        }
    }
    let mut ls_equal = 0;
    for seed in 0..20u64 {
        let inst = random_instance(6, 3, 2_000_000, 0.5, seed).unwrap();
        if ls_gap(&inst, 0).unwrap().energy == solve_gap(&inst).unwrap().objective {
            ls_equal += 1;
        }
    }
    Outcome::new(
        fit_equal == 10 && ls_equal == 20,
        format!("zero smoothness: {fit_equal}/10 equal energies; zero label cost: {ls_equal}/20 equal to the full-pool optimum"),
    )
}

fn criterion_5() -> Outcome {
    let mut exact = 0;
    let mut largest = 0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = 3 + (seed as usize % 10);
        largest = largest.max(n);
        let labels = 3;
        let pts: Vec<Point2> = (0..n).map(|_| Point2::new(rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0))).collect();
        let nbrs = neighbor_graph(&pts).unwrap();
        let costs: Vec<Vec<Option<i64>>> = (0..n)
            .map(|_| (0..labels).map(|_| rng.gen_bool(0.8).then(|| rng.gen_range(0..100))).collect())
            .collect();
        let outlier = 60;
        let cost = |p: usize, l: Label| match l {
            Label::Outlier => Some(outlier),
            Label::Model(h) => costs[p][h],
        };
        let f: Vec<Label> = (0..n)
            .map(|p| {
                let feasible: Vec<usize> = (0..labels).filter(|&h| costs[p][h].is_some()).collect();
                if feasible.is_empty() || rng.gen_bool(0.3) {
                    Label::Outlier
                } else {
                    Label::Model(feasible[rng.gen_range(0..feasible.len())])
                }
            })
            .collect();
        let alpha = if seed % 4 == 3 { Label::Outlier } else { Label::Model(rng.gen_range(0..labels)) };
        let energy = expansion_energy(&f, alpha, cost, 25, &nbrs);
        let (x, value) = minimize_binary(&energy).unwrap();
        let best = (0..1u32 << n)
            .filter_map(|mask| energy.evaluate(&(0..n).map(|i| mask >> i & 1 == 1).collect::<Vec<_>>()))
            .min()
            .unwrap();
        if value == best && energy.evaluate(&x) == Some(best) {
            exact += 1;
        }
    }
    Outcome::new(exact == 50, format!("{exact}/50 cuts equal to enumeration, up to {largest} nodes"))
}

struct SceneResult {
    efm_tpr: f64,
    ef_tpr: f64,
    efm_gq: Vec<f64>,
    ef_gq: Vec<f64>,
    iterations: usize,
}

fn table_scene(seed: u64) -> SceneResult {
    let spec = SceneSpec {
        plane_count: 3,
        features_per_plane: 150,
        noise_sigma: 0.5,
        occlusion_rate: 0.1,
        repetitive_planes: 1,
        rng_seed: seed,
        ..SceneSpec::default()
    };
    let (l, r, gt) = generate_scene(&spec).unwrap();
    let params = ScoreParams { outlier_cost: 3.0, ..ScoreParams::default() };
    let ctx = MatchContext::new(&l, &r, params).unwrap();
    let opts = EfmOptions {
        energy: EnergyParams { beta: params.ticks(40.0), lambda: params.ticks(0.25) },
        seed,
        ..EfmOptions::default()
    };
    let efm = run_efm1(&ctx, &opts).unwrap();
    let ef = run_ef(&ctx, &opts).unwrap();
    let ratios = |models: &ProposalPool| if models.is_empty() { Vec::new() } else { gq(models, &gt, &l, &r).unwrap().ratios() };
    SceneResult {
        efm_tpr: roc(&efm.matching, &gt).unwrap().tpr,
        ef_tpr: roc(&ef.matching, &gt).unwrap().tpr,
        efm_gq: ratios(&efm.models),
        ef_gq: ratios(&ef.models),
        iterations: efm.iterations,
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn criteria_6_7() -> (Outcome, Outcome) {
    let start = Instant::now();
    let results = par::map_range(10, |s| table_scene(s as u64 + 1));
    let t = start.elapsed();
    let efm_tpr = mean(&results.iter().map(|r| r.efm_tpr).collect::<Vec<_>>());
    let ef_tpr = mean(&results.iter().map(|r| r.ef_tpr).collect::<Vec<_>>());
    let efm_gq: Vec<f64> = results.iter().flat_map(|r| r.efm_gq.clone()).collect();
    let ef_gq: Vec<f64> = results.iter().flat_map(|r| r.ef_gq.clone()).collect();
    let worst = efm_gq.iter().cloned().fold(0.0, f64::max);
    let (efm_mean_gq, ef_mean_gq) = (mean(&efm_gq), mean(&ef_gq));
    let pass = efm_tpr >= 0.90
        && efm_tpr >= 1.3 * ef_tpr
        && efm_gq.len() == 30
        && worst <= 1.10
        && efm_mean_gq <= ef_mean_gq + 0.05
        && t < Duration::from_secs(600);
    let six = Outcome::new(
        pass,
        format!(
            "mean TPR {efm_tpr:.3} vs baseline {ef_tpr:.3} ({:.2}x), worst GQ {worst:.3} over {} ratios, mean GQ {efm_mean_gq:.3} vs baseline {ef_mean_gq:.3}, {t:.1?}",
            efm_tpr / ef_tpr.max(f64::MIN_POSITIVE),
            efm_gq.len()
        ),
    );
    let iters = mean(&results.iter().map(|r| r.iterations as f64).collect::<Vec<_>>());
    let seven = Outcome::new(iters <= 10.0, format!("mean {iters:.1} iterations over 10 scenes"));
    (six, seven)
}

fn print_rows(rows: &[BenchRow]) {
    println!("    {:<10} {:>5} {:>6} {:>14} {:>12}", "method", "size", "labels", "mean seconds", "evaluations");
    for r in rows {
        println!("    {:<10} {:>5} {:>6} {:>14.6} {:>12}", r.method, r.size, r.labels, r.mean_seconds, r.evaluations);
    }
}

fn criterion_8() -> Outcome {
    let seeds: Vec<u64> = (1..=10).collect();
    let small = bench_scaling(&[2, 3, 4, 5, 6, 7, 8], &[5], &seeds, &BenchConfig { repeats: 20, ..BenchConfig::default() }).unwrap();
    let large = bench_scaling(&[25, 50, 100, 200], &[5], &seeds[..3], &BenchConfig::default()).unwrap();
    let labels = bench_scaling(&[50], &[1, 2, 4, 8], &seeds[..3], &BenchConfig::default()).unwrap();
    println!("  trend table (exhaustive enumeration stands in for the LP arm):");
    print_rows(&small);
    print_rows(&large);
    print_rows(&labels);

    let biggest = large.iter().find(|r| r.size == 200).map_or(f64::INFINITY, |r| r.mean_seconds);
    let mut slower = Vec::new();
    for r in small.iter().filter(|r| r.method == "exhaustive") {
        let flow = small.iter().find(|f| f.method == "mcmf" && f.size == r.size && f.labels == r.labels).unwrap();
        if flow.mean_seconds >= r.mean_seconds {
            slower.push(r.size);
        }
    }
    Outcome::new(
        biggest < 60.0 && slower.is_empty(),
        format!("|F|=200, |L|=5 in {biggest:.2}s; flow solver not faster at sizes {slower:?}"),
    )
}

fn criterion_9() -> Outcome {
    let mut exact = 0;
    let mut regions = 0;
    let mut monotone = true;
    for seed in 0..5u64 {
        let spec = SceneSpec { plane_count: 2, features_per_plane: 60, occlusion_rate: 0.1, rng_seed: seed, ..SceneSpec::default() };
        let (l, r, gt) = generate_scene(&spec).unwrap();
        for plane in 0..2 {
            regions += 1;
            let region = gt.region(&l, &r, plane).unwrap();
            let res = gt_assignment(&region.left, &region.right, &ScoreParams::default(), 5, seed).unwrap();
            monotone &= res.trace.windows(2).all(|w| w[1] <= w[0]);
            let mut want: Vec<(usize, usize)> = gt
                .pairs
                .iter()
                .filter(|t| t.2 == plane)
                .map(|&(p, q, _)| {
                    (region.left_ids.iter().position(|&i| i == p).unwrap(), region.right_ids.iter().position(|&i| i == q).unwrap())
                })
                .collect();
            want.sort_unstable();
            let got: Vec<(usize, usize)> = res
                .matching
                .triples
                .iter()
                .filter(|t| t.label != Label::Outlier && t.p < region.left.len() && t.q < region.right.len())
                .map(|t| (t.p, t.q))
                .collect();
            if got == want {
                exact += 1;
            }
        }
    }
    let no_worse: Vec<bool> = par::map_range(20, |s| {
        let spec = SceneSpec { plane_count: 1, features_per_plane: 60, noise_sigma: 0.7, occlusion_rate: 0.1, rng_seed: 100 + s as u64, ..SceneSpec::default() };
        let (l, r, _) = generate_scene(&spec).unwrap();
        let params = ScoreParams::default();
        let one = gt_assignment(&l, &r, &params, 1, s as u64).unwrap();
        let five = gt_assignment(&l, &r, &params, 5, s as u64).unwrap();
        five.objective <= one.objective && five.trace.windows(2).all(|w| w[1] <= w[0])
    });
    let ok = no_worse.iter().filter(|&&b| b).count();
    Outcome::new(
        exact == regions && monotone && ok == 20,
        format!("{exact}/{regions} regions exact, traces monotone: {monotone}, {ok}/20 noisy seeds with five restarts no worse"),
    )
}

fn run_cli(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_fitmatch"))
        .args(args)
        .env_clear()
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn all_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_10() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let run = |tag: &str| -> bool {
        let d = root.path().join(tag);
        let s = d.join("scene");
        let sp = |x: &str| s.join(x).to_string_lossy().into_owned();
        let dp = |x: &str| d.join(x).to_string_lossy().into_owned();
        let (l, r, g) = (sp("left.txt"), sp("right.txt"), sp("gt.txt"));
        run_cli(&["gen", "--planes", "2", "--features", "60", "--noise", "0.5", "--occlusion", "0.1", "--repetitive", "1", "--seed", "21", "--out", &s.to_string_lossy()])
            && run_cli(&["gt", "--left", &l, "--right", &r, "--regions", &g, "--plane", "0", "--out", &dp("gt")])
            && run_cli(&["match", "--left", &l, "--right", &r, "--out", &dp("sbr.txt")])
            && run_cli(&["ef", "--left", &l, "--right", &r, "--seed", "3", "--out", &dp("ef")])
            && run_cli(&["efm1", "--left", &l, "--right", &r, "--seed", "3", "--out", &dp("efm1")])
            && run_cli(&[
                "efm2", "--left", &l, "--right", &r, "--matches", &dp("efm1/matches.txt"),
                "--models", &dp("efm1/models.txt"), "--out", &dp("efm2"),
            ])
            && run_cli(&[
                "eval", "--left", &l, "--right", &r, "--gt", &g, "--matches", &dp("efm1/matches.txt"),
                "--models", &dp("efm1/models.txt"), "--out", &dp("eval.txt"),
            ])
            && run_cli(&["bench", "--sizes", "4,6,30", "--seeds", "1,2", "--out", &dp("bench.txt")])
    };
    if !(run("a") && run("b")) {
        return Outcome::new(false, "a subcommand failed");
    }
    let a = all_files(&root.path().join("a"));
    let b = all_files(&root.path().join("b"));
    let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    Outcome::new(
        a.len() == b.len() && differing.is_empty(),
        format!("{} files from 8 subcommands compared, differing: {differing:?}", a.len()),
    )
}

fn main() {
    let names = [
        "oracle equivalence",
        "integrality",
        "monotonicity",
        "degeneration identities",
        "expansion exactness",
        "synthetic multi-model scene",
        "convergence",
        "scaling benchmark",
        "ground truth",
        "determinism",
    ];
    let mut outcomes: Vec<Option<Outcome>> = (0..10).map(|_| None).collect();
    let single: [(usize, fn() -> Outcome); 8] = [
        (0, criterion_1),
        (1, criterion_2),
        (2, criterion_3),
        (3, criterion_4),
        (4, criterion_5),
        (7, criterion_8),
        (8, criterion_9),
        (9, criterion_10),
    ];
    for (i, f) in single.iter().take(5) {
        outcomes[*i] = Some(f());
    }
    let (six, seven) = criteria_6_7();
    outcomes[5] = Some(six);
    outcomes[6] = Some(seven);
    for (i, f) in single.iter().skip(5) {
        outcomes[*i] = Some(f());
    }

    let mut failed = 0;
    for (k, (name, o)) in names.iter().zip(outcomes).enumerate() {
        let o = o.expect("every criterion ran");
        if !o.pass {
            failed += 1;
        }
        println!("[{}] criterion {}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, k + 1, o.detail);
    }
    println!("{} of 10 criteria passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
