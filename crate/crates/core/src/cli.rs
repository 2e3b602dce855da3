//! Command-line surface. Every flag can also be set through the environment
//! variable named next to it in `--help`; flags win over the environment.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data or solver errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::efm::{energy_e1, energy_e2, left_neighbors, run_ef, run_efm1, run_efm2, sbr_match, EfmOptions, JointState};
use crate::error::{Error, Result};
use crate::eval::{bench_scaling, gq, roc, summary, BenchConfig};
use crate::gap::MatchContext;
use crate::geometry::{FeatureSet, ScoreParams};
use crate::io::{
    read_features, read_file, read_ground_truth, read_matches, read_models, write_features, write_file,
    write_ground_truth, write_matches, write_models, MatchFile, Report,
};
use crate::labeling::EnergyParams;
use crate::scene::{generate_scene, gt_assignment, SceneSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "fitmatch", version, about = "Joint feature matching and multi-homography fitting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Parameters shared by the solving subcommands. Costs are in real units and
/// converted to integer ticks with `cost_scale`.
#[derive(Debug, Clone, Args)]
pub struct RunConfig {
    /// Label cost per model in use.
    #[arg(long, env = "FITMATCH_BETA", default_value_t = 40.0)]
    pub beta: f64,
    /// Smoothness cost per neighbor edge with differing labels.
    #[arg(long, env = "FITMATCH_LAMBDA", default_value_t = 0.25)]
    pub lambda: f64,
    /// Outlier model cost T.
    #[arg(long = "outlier-cost", env = "FITMATCH_OUTLIER_COST", default_value_t = 2.0)]
    pub outlier_cost: f64,
    /// Descriptor angle (radians) at or above which pairs cannot match.
    #[arg(long = "angle-threshold", env = "FITMATCH_ANGLE_THRESHOLD", default_value_t = std::f64::consts::FRAC_PI_4)]
    pub angle_threshold: f64,
    /// Second-best ratio for the initial matching.
    #[arg(long = "sbr-ratio", env = "FITMATCH_SBR_RATIO", default_value_t = 0.7)]
    pub sbr_ratio: f64,
    /// Proposals sampled per iteration.
    #[arg(long, env = "FITMATCH_PROPOSALS", default_value_t = 100)]
    pub proposals: usize,
    /// Restarts of the ground-truth assignment.
    #[arg(long, env = "FITMATCH_RESTARTS", default_value_t = 5)]
    pub restarts: usize,
    #[arg(long = "max-iter", env = "FITMATCH_MAX_ITER", default_value_t = 20)]
    pub max_iter: usize,
    #[arg(long, env = "FITMATCH_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Integer ticks per cost unit.
    #[arg(long = "cost-scale", env = "FITMATCH_COST_SCALE", default_value_t = 1_000_000)]
    pub cost_scale: i64,
}

impl RunConfig {
    pub fn score_params(&self) -> Result<ScoreParams> {
        let p = ScoreParams {
            angle_threshold: self.angle_threshold,
            outlier_cost: self.outlier_cost,
            cost_scale: self.cost_scale,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.score_params()?;
        if !(self.beta >= 0.0 && self.beta.is_finite()) || !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Invalid("beta and lambda must be finite and nonnegative".into()));
        }
        if !(self.sbr_ratio > 0.0 && self.sbr_ratio <= 1.0) {
            return Err(Error::Invalid("sbr ratio must lie in (0, 1]".into()));
        }
        if self.proposals == 0 || self.restarts == 0 || self.max_iter == 0 {
            return Err(Error::Invalid("proposals, restarts and max-iter must be positive".into()));
        }
        Ok(())
    }

    pub fn energy_params(&self) -> Result<EnergyParams> {
        let p = self.score_params()?;
        Ok(EnergyParams { beta: p.ticks(self.beta), lambda: p.ticks(self.lambda) })
    }

    pub fn efm_options(&self) -> Result<EfmOptions> {
        self.validate()?;
        Ok(EfmOptions {
            energy: self.energy_params()?,
            sbr_ratio: self.sbr_ratio,
            proposals: self.proposals,
            max_iter: self.max_iter,
            seed: self.seed,
            ..EfmOptions::default()
        })
    }

    fn describe(&self, r: &mut Report) -> Result<()> {
        let p = self.score_params()?;
        let e = self.energy_params()?;
        r.push("seed", self.seed);
        r.push("cost_scale", p.cost_scale);
        r.push("outlier_ticks", p.outlier_ticks());
        r.push("beta_ticks", e.beta);
        r.push("lambda_ticks", e.lambda);
        Ok(())
    }
}

#[derive(Debug, Clone, Args)]
pub struct Inputs {
    /// Left feature file.
    #[arg(long, env = "FITMATCH_LEFT")]
    pub left: PathBuf,
    /// Right feature file.
    #[arg(long, env = "FITMATCH_RIGHT")]
    pub right: PathBuf,
}

impl Inputs {
    fn load(&self) -> Result<(FeatureSet, FeatureSet)> {
        Ok((read_features(&read_file(&self.left)?)?, read_features(&read_file(&self.right)?)?))
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene: left.txt, right.txt and gt.txt.
    Gen {
        #[arg(long, env = "FITMATCH_PLANES", default_value_t = 3)]
        planes: usize,
        #[arg(long, env = "FITMATCH_FEATURES", default_value_t = 150)]
        features: usize,
        #[arg(long = "image-size", env = "FITMATCH_IMAGE_SIZE", default_value_t = 640.0)]
        image_size: f64,
        /// Pixel noise sigma on right positions.
        #[arg(long, env = "FITMATCH_NOISE", default_value_t = 0.0)]
        noise: f64,
        #[arg(long, env = "FITMATCH_OCCLUSION", default_value_t = 0.0)]
        occlusion: f64,
        #[arg(long = "descriptor-dim", env = "FITMATCH_DESCRIPTOR_DIM", default_value_t = 32)]
        descriptor_dim: usize,
        #[arg(long = "descriptor-noise", env = "FITMATCH_DESCRIPTOR_NOISE", default_value_t = 0.05)]
        descriptor_noise: f64,
        #[arg(long = "descriptor-spread", env = "FITMATCH_DESCRIPTOR_SPREAD", default_value_t = 0.01)]
        descriptor_spread: f64,
        /// Planes (the last ones) with repetitive descriptors.
        #[arg(long, env = "FITMATCH_REPETITIVE", default_value_t = 0)]
        repetitive: usize,
        #[arg(long = "repetitive-spread", env = "FITMATCH_REPETITIVE_SPREAD", default_value_t = 0.005)]
        repetitive_spread: f64,
        #[arg(long, env = "FITMATCH_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, env = "FITMATCH_OUT")]
        out: PathBuf,
    },
    /// One-model assignment with occlusion over the given feature sets.
    Gt {
        #[command(flatten)]
        inputs: Inputs,
        /// Restrict to one plane of this ground-truth file.
        #[arg(long, env = "FITMATCH_REGIONS", requires = "plane")]
        regions: Option<PathBuf>,
        #[arg(long, env = "FITMATCH_PLANE", requires = "regions")]
        plane: Option<usize>,
        #[command(flatten)]
        config: RunConfig,
        #[arg(long, env = "FITMATCH_OUT")]
        out: PathBuf,
    },
    /// Second-best-ratio matching.
    Match {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        config: RunConfig,
        #[arg(long, env = "FITMATCH_OUT")]
        out: PathBuf,
    },
    /// Fit models to fixed second-best-ratio matches.
    Ef {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        config: RunConfig,
        #[arg(long, env = "FITMATCH_OUT")]
        out: PathBuf,
    },
    /// Alternate fitting and joint matching.
    Efm1 {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        config: RunConfig,
        #[arg(long, env = "FITMATCH_OUT")]
        out: PathBuf,
    },
    /// Refine a joint state under the smoothness energy.
    Efm2 {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, env = "FITMATCH_MATCHES")]
        matches: PathBuf,
        #[arg(long, env = "FITMATCH_MODELS")]
        models: PathBuf,
        #[arg(long, env = "FITMATCH_ITERS", default_value_t = 1)]
        iters: usize,
        #[command(flatten)]
        config: RunConfig,
        #[arg(long, env = "FITMATCH_OUT")]
        out: PathBuf,
    },
    /// ROC counts and model quality against ground truth.
    Eval {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, env = "FITMATCH_GT")]
        gt: PathBuf,
        #[arg(long, env = "FITMATCH_MATCHES")]
        matches: PathBuf,
        #[arg(long, env = "FITMATCH_MODELS")]
        models: Option<PathBuf>,
        #[arg(long, env = "FITMATCH_OUT")]
        out: PathBuf,
    },
    /// Scaling table of label-subset search with the flow and exhaustive solvers.
    Bench {
        #[arg(long, env = "FITMATCH_SIZES", value_delimiter = ',', default_value = "4,5,6,7,8,20,50")]
        sizes: Vec<usize>,
        #[arg(long, env = "FITMATCH_LABELS", value_delimiter = ',', default_value = "3")]
        labels: Vec<usize>,
        #[arg(long, env = "FITMATCH_SEEDS", value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        /// Probability that a model admits a pair.
        #[arg(long, env = "FITMATCH_DENSITY", default_value_t = 0.5)]
        density: f64,
        /// Timed repetitions per instance.
        #[arg(long, env = "FITMATCH_REPEATS", default_value_t = 1)]
        repeats: usize,
        /// Label cost of the random instances.
        #[arg(long, env = "FITMATCH_BENCH_BETA", default_value_t = 1.0)]
        beta: f64,
        /// Outlier cost of the random instances.
        #[arg(long = "outlier-cost", env = "FITMATCH_BENCH_OUTLIER_COST", default_value_t = 2.0)]
        outlier_cost: f64,
        /// Deterministic work table.
        #[arg(long, env = "FITMATCH_OUT")]
        out: PathBuf,
        /// Wall-clock timings, written separately because they vary between runs.
        #[arg(long, env = "FITMATCH_TIMING")]
        timing: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(table) => {
            print!("{table}");
            EXIT_OK
        }
        Err(e @ Error::Invalid(_)) if is_config_error(&cli.command, &e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}

fn is_config_error(cmd: &Command, _e: &Error) -> bool {
    let cfg = match cmd {
        Command::Gt { config, .. }
        | Command::Match { config, .. }
        | Command::Ef { config, .. }
        | Command::Efm1 { config, .. }
        | Command::Efm2 { config, .. } => config,
        Command::Gen { .. } | Command::Bench { .. } => return true,
        Command::Eval { .. } => return false,
    };
    cfg.validate().is_err()
}

fn state_report(ctx: &MatchContext, name: &str, config: &RunConfig, state: &JointState) -> Result<Report> {
    let mut r = Report::default();
    r.push("command", name);
    config.describe(&mut r)?;
    let e = energy_e1(ctx, state, &config.energy_params()?)?;
    r.push("energy_ticks", e);
    r.push("energy", ctx.params.to_units(e));
    r.push("iterations", state.iterations);
    r.push("models", state.models.len());
    r.push("inliers", crate::efm::inlier_count(state));
    let trace: Vec<String> = state.energy_trace.iter().map(|(_, e)| e.to_string()).collect();
    r.push("trace_ticks", trace.join(","));
    Ok(r)
}

fn save_state(out: &Path, state: &JointState, report: &Report) -> Result<()> {
    write_file(&out.join("matches.txt"), &write_matches(&MatchFile::from_matching(&state.matching)))?;
    write_file(&out.join("models.txt"), &write_models(&state.models))?;
    write_file(&out.join("report.txt"), &report.to_text())
}

fn execute(cmd: &Command) -> Result<String> {
    match cmd {
        Command::Gen {
            planes,
            features,
            image_size,
            noise,
            occlusion,
            descriptor_dim,
            descriptor_noise,
            descriptor_spread,
            repetitive,
            repetitive_spread,
            seed,
            out,
        } => {
            let spec = SceneSpec {
                plane_count: *planes,
                features_per_plane: *features,
                image_size: *image_size,
                noise_sigma: *noise,
                occlusion_rate: *occlusion,
                descriptor_dim: *descriptor_dim,
                descriptor_noise: *descriptor_noise,
                descriptor_spread: *descriptor_spread,
                repetitive_planes: *repetitive,
                repetitive_spread: *repetitive_spread,
                rng_seed: *seed,
            };
            let (l, r, gt) = generate_scene(&spec)?;
            write_file(&out.join("left.txt"), &write_features(&l))?;
            write_file(&out.join("right.txt"), &write_features(&r))?;
            write_file(&out.join("gt.txt"), &write_ground_truth(&gt))?;
            let mut rep = Report::default();
            rep.push("left", l.len());
            rep.push("right", r.len());
            rep.push("true_pairs", gt.pairs.len());
            Ok(rep.to_table())
        }
        Command::Gt { inputs, regions, plane, config, out } => {
            config.validate()?;
            let (mut l, mut r) = inputs.load()?;
            let mut ids: Option<(Vec<usize>, Vec<usize>)> = None;
            if let (Some(path), Some(plane)) = (regions, plane) {
                let gt = read_ground_truth(&read_file(path)?)?;
                if *plane >= gt.models.len() {
                    return Err(Error::Invalid(format!("plane {plane} not in ground truth")));
                }
                let region = gt.region(&l, &r, *plane)?;
                l = region.left;
                r = region.right;
                ids = Some((region.left_ids, region.right_ids));
            }
            let res = gt_assignment(&l, &r, &config.score_params()?, config.restarts, config.seed)?;
            let mut file = MatchFile::from_matching(&res.matching);
            if let Some((li, ri)) = &ids {
                file.records.retain(|rec| rec.p < li.len() && rec.q < ri.len());
                for rec in &mut file.records {
                    rec.p = li[rec.p];
                    rec.q = ri[rec.q];
                }
            }
            write_file(&out.join("matches.txt"), &write_matches(&file))?;
            write_file(&out.join("models.txt"), &write_models(&crate::labeling::ProposalPool::new(vec![res.model])))?;
            let mut rep = Report::default();
            rep.push("command", "gt");
            config.describe(&mut rep)?;
            rep.push("objective_ticks", res.objective);
            rep.push("trace_ticks", res.trace.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
            rep.push(
                "restart_objectives_ticks",
                res.restart_objectives.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
            );
            write_file(&out.join("report.txt"), &rep.to_text())?;
            Ok(rep.to_table())
        }
        Command::Match { inputs, config, out } => {
            config.validate()?;
            let (l, r) = inputs.load()?;
            let m = sbr_match(&l, &r, config.sbr_ratio)?;
            write_file(out, &write_matches(&MatchFile::from_pairs(&m.pairs)))?;
            let mut rep = Report::default();
            rep.push("pairs", m.pairs.len());
            rep.push("ratio_undefined", m.ratio_undefined);
            Ok(rep.to_table())
        }
        Command::Ef { inputs, config, out } | Command::Efm1 { inputs, config, out } => {
            let opts = config.efm_options()?;
            let (l, r) = inputs.load()?;
            let ctx = MatchContext::new(&l, &r, config.score_params()?)?;
            let (name, state) = match cmd {
                Command::Ef { .. } => ("ef", run_ef(&ctx, &opts)?),
                _ => ("efm1", run_efm1(&ctx, &opts)?),
            };
            let rep = state_report(&ctx, name, config, &state)?;
            save_state(out, &state, &rep)?;
            Ok(rep.to_table())
        }
        Command::Efm2 { inputs, matches, models, iters, config, out } => {
            config.validate()?;
            let (l, r) = inputs.load()?;
            let ctx = MatchContext::new(&l, &r, config.score_params()?)?;
            let m = read_matches(&read_file(matches)?)?.to_matching(ctx.size())?;
            let pool = read_models(&read_file(models)?)?;
            let input = JointState::new(m, pool);
            let params = config.energy_params()?;
            let nbrs = left_neighbors(&ctx)?;
            let input_e1 = energy_e1(&ctx, &input, &params)?;
            let input_e2 = energy_e2(&ctx, &input, &params, &nbrs)?;
            let state = run_efm2(&ctx, &input, &params, &nbrs, *iters)?;
            let mut rep = state_report(&ctx, "efm2", config, &state)?;
            let e2 = energy_e2(&ctx, &state, &params, &nbrs)?;
            rep.push("input_energy_e1_ticks", input_e1);
            rep.push("input_energy_e2_ticks", input_e2);
            rep.push("energy_e2_ticks", e2);
            save_state(out, &state, &rep)?;
            Ok(rep.to_table())
        }
        Command::Eval { inputs, gt, matches, models, out } => {
            let (l, r) = inputs.load()?;
            let gt = read_ground_truth(&read_file(gt)?)?;
            let mf = read_matches(&read_file(matches)?)?;
            let n = l.len().max(r.len());
            let m = mf.to_matching(n)?;
            let report = roc(&m, &gt)?;
            let mut rep = Report::default();
            rep.push("P", report.p);
            rep.push("N", report.n);
            rep.push("TP", report.tp);
            rep.push("FP", report.fp);
            rep.push("TPR", report.tpr);
            rep.push("FPR", report.fpr);
            if let Some(path) = models {
                let pool = read_models(&read_file(path)?)?;
                let g = gq(&pool, &gt, &l, &r)?;
                for e in &g.entries {
                    let ratio = e.ratio.map_or("undefined".to_string(), |v| v.to_string());
                    rep.push(format!("gq_{}", e.gt_model), format!("{ratio} (model {})", e.estimated));
                }
                if let Some((mean, median, var)) = summary(&g.ratios()) {
                    rep.push("gq_mean", mean);
                    rep.push("gq_median", median);
                    rep.push("gq_variance", var);
                }
            }
            write_file(out, &rep.to_text())?;
            Ok(rep.to_table())
        }
        Command::Bench { sizes, labels, seeds, density, repeats, beta, outlier_cost, out, timing } => {
            if !(0.0..=1.0).contains(density) || beta.is_nan() || *beta < 0.0 || outlier_cost.is_nan() || *outlier_cost <= 0.0 {
                return Err(Error::Invalid("density must lie in [0, 1] and costs must be positive".into()));
            }
            let p = ScoreParams { outlier_cost: *outlier_cost, ..ScoreParams::default() };
            p.validate()?;
            let cfg = BenchConfig { outlier: p.outlier_ticks(), beta: p.ticks(*beta), density: *density, repeats: *repeats };
            let rows = bench_scaling(sizes, labels, seeds, &cfg)?;
            let mut work = String::from("# bench method size labels runs evaluations accepted_moves energy_ticks\n");
            work.push_str("# exhaustive arm stands in for a generic LP solver; sizes above its limit are skipped\n");
            let mut times = String::from("# timing method size labels mean_seconds\n");
            for row in &rows {
                let _ = writeln!(
                    work,
                    "{} {} {} {} {} {} {}",
                    row.method, row.size, row.labels, row.runs, row.evaluations, row.accepted_moves, row.energy
                );
                let _ = writeln!(times, "{} {} {} {}", row.method, row.size, row.labels, row.mean_seconds);
            }
            write_file(out, &work)?;
            if let Some(t) = timing {
                write_file(t, &times)?;
            }
            Ok(times)
        }
    }
}
