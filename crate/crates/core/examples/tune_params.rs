//! Sweeps label cost and smoothness weights on synthetic scenes and prints
//! mean TPR, GQ and iteration counts for EF, EFM1 and EFM2.
//!
//! cargo run --release --example tune_params -- [seeds] [beta...]

use std::time::Instant;

use fitmatch::efm::{left_neighbors, run_ef, run_efm1, run_efm2, sbr_match, EfmOptions};
use fitmatch::eval::{gq, roc, summary};
use fitmatch::gap::MatchContext;
use fitmatch::geometry::ScoreParams;
use fitmatch::labeling::EnergyParams;
use fitmatch::scene::{generate_scene, SceneSpec};

fn env_or(key: &str, default: f64) -> f64 {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> fitmatch::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seeds: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(3);
    let betas: Vec<f64> = if args.len() > 1 { args[1..].iter().filter_map(|s| s.parse().ok()).collect() } else { vec![10.0] };
    let params = ScoreParams { outlier_cost: env_or("TUNE_T", 3.0), ..ScoreParams::default() };
    for beta in betas {
        let energy = EnergyParams { beta: params.ticks(beta), lambda: params.ticks(env_or("TUNE_LAMBDA", 0.25)) };
        let (mut tpr_ef, mut tpr_m, mut tpr_2, mut iters) = (vec![], vec![], vec![], vec![]);
        let (mut gq_ef, mut gq_m) = (vec![], vec![]);
        let start = Instant::now();
        for seed in 0..seeds {
            let spec = SceneSpec {
                noise_sigma: 0.5,
                occlusion_rate: 0.1,
                repetitive_planes: 1,
                rng_seed: seed,
                descriptor_spread: env_or("TUNE_SPREAD", SceneSpec::default().descriptor_spread),
                repetitive_spread: env_or("TUNE_REPETITIVE", SceneSpec::default().repetitive_spread),
                descriptor_noise: env_or("TUNE_NOISE", SceneSpec::default().descriptor_noise),
                ..SceneSpec::default()
            };
            let (l, r, gt) = generate_scene(&spec)?;
            let ctx = MatchContext::new(&l, &r, params)?;
            let sbr = sbr_match(&l, &r, 0.7)?;
            if std::env::var("TUNE_SBR_ONLY").is_ok() {
                let mut per = vec![(0, 0); spec.plane_count];
                for &(p, q) in &sbr.pairs {
                    per[gt.left_plane[p]].1 += 1;
                    if gt.pairs.iter().any(|t| (t.0, t.1) == (p, q)) {
                        per[gt.left_plane[p]].0 += 1;
                    }
                }
                println!("seed {seed}: sbr per plane (correct, accepted) {per:?} of {} true", gt.pairs.len());
                continue;
            }
            let correct = sbr.pairs.iter().filter(|&&(p, q)| gt.pairs.iter().any(|t| (t.0, t.1) == (p, q))).count();
            let opts = EfmOptions { energy, seed, ..EfmOptions::default() };
            let ef = run_ef(&ctx, &opts)?;
            let m1 = run_efm1(&ctx, &opts)?;
            let m2 = run_efm2(&ctx, &m1, &energy, &left_neighbors(&ctx)?, 1)?;
            let (re, r1, r2) = (roc(&ef.matching, &gt)?, roc(&m1.matching, &gt)?, roc(&m2.matching, &gt)?);
            let ge = gq(&ef.models, &gt, &l, &r).map(|g| g.ratios()).unwrap_or_default();
            let g1 = gq(&m1.models, &gt, &l, &r).map(|g| g.ratios()).unwrap_or_default();
            println!(
                "seed {seed}: sbr {}/{} ef tpr {:.3} gq {:?} | efm1 tpr {:.3} fpr {:.5} gq {:?} models {} iters {} | efm2 tpr {:.3}",
                correct, sbr.pairs.len(), re.tpr, ge.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
                r1.tpr, r1.fpr, g1.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(), m1.models.len(), m1.iterations, r2.tpr
            );
            tpr_ef.push(re.tpr);
            tpr_m.push(r1.tpr);
            tpr_2.push(r2.tpr);
            iters.push(m1.iterations as f64);
            gq_ef.extend(ge);
            gq_m.extend(g1);
        }
        let mean = |v: &[f64]| summary(v).map_or(f64::NAN, |s| s.0);
        println!(
            "beta {beta}: ef {:.3} efm1 {:.3} efm2 {:.3} iters {:.1} gq ef {:.3} efm1 {:.3} ({:.1}s)",
            mean(&tpr_ef), mean(&tpr_m), mean(&tpr_2), mean(&iters), mean(&gq_ef), mean(&gq_m),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
