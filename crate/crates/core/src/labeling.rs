//! The fit half of block-coordinate descent: with the matching held fixed,
//! choose a label per matched pair and re-estimate model parameters.
//!
//! Two label solvers share one loop:
//! * without smoothness, greedy add/delete/swap search over the set of active
//!   labels, each point taking its cheapest active label (an uncapacitated
//!   facility-location local search);
//! * with smoothness, alpha-expansion where each move is an exact binary
//!   min-cut, and a move is kept only if the full energy including label
//!   costs drops.
//!
//! After label selection every used model is refit by DLT on its support and
//! the refit is kept only when it lowers that support's cost. The loop repeats
//! until an alternation no longer lowers the energy.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::{min_cut, FlowNetwork};
use crate::gap::{JointMatching, Label, MatchContext};
use crate::geometry::{fit_homography, Homography, Point2};
use crate::par;

/// One label per left feature.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labeling(pub Vec<Label>);

impl Labeling {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, p: usize) -> Label {
        self.0[p]
    }

    pub fn as_slice(&self) -> &[Label] {
        &self.0
    }

    /// Distinct model ids in use, ascending.
    pub fn used_models(&self) -> Vec<usize> {
        let mut used: Vec<usize> = self.0.iter().filter_map(|l| l.model()).collect();
        used.sort_unstable();
        used.dedup();
        used
    }

    /// Number of neighbor edges whose endpoints carry different labels.
    pub fn discontinuities(&self, nbrs: &[(usize, usize)]) -> usize {
        nbrs.iter().filter(|&&(a, b)| self.0[a] != self.0[b]).count()
    }
}

/// Regularization weights in ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EnergyParams {
    /// Cost per model in use.
    pub beta: i64,
    /// Cost per neighbor edge whose labels differ.
    pub lambda: i64,
}

/// The current label space.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProposalPool {
    pub models: Vec<Homography>,
}

impl ProposalPool {
    pub fn new(models: Vec<Homography>) -> Self {
        Self { models }
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }
}

/// How the four correspondences of a minimal sample are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// Four distinct pairs drawn uniformly.
    Uniform,
    /// A uniform seed pair plus three drawn from its `k` nearest pairs by left position.
    Local(usize),
}

const SAMPLE_RETRIES: usize = 50;

/// Mixes a base seed with an index into an independent stream seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws `count` homographies, each fit to four distinct correspondences drawn
/// uniformly from `pairs` (dummy pairs ignored). Degenerate samples are redrawn
/// up to a fixed budget.
pub fn sample_proposals(ctx: &MatchContext, pairs: &[(usize, usize)], count: usize, seed: u64) -> Result<ProposalPool> {
    sample_proposals_with(ctx, pairs, count, seed, Sampling::Uniform)
}

/// `sample_proposals` with an explicit sampling scheme.
pub fn sample_proposals_with(
    ctx: &MatchContext,
    pairs: &[(usize, usize)],
    count: usize,
    seed: u64,
    sampling: Sampling,
) -> Result<ProposalPool> {
    if count == 0 {
        return Err(Error::Invalid("proposal count must be positive".into()));
    }
    let pts: Vec<(Point2, Point2)> = pairs
        .iter()
        .filter(|&&(p, q)| !ctx.left.get(p).is_dummy() && !ctx.right.get(q).is_dummy())
        .map(|&(p, q)| (ctx.left.get(p).pos, ctx.right.get(q).pos))
        .collect();
    if pts.len() < 4 {
        return Err(Error::TooFewPairs { needed: 4, got: pts.len() });
    }
    let neighbors: Vec<Vec<usize>> = match sampling {
        Sampling::Uniform => Vec::new(),
        Sampling::Local(k) => {
            let k = k.max(3).min(pts.len() - 1);
            par::map_range(pts.len(), |i| {
                let mut others: Vec<usize> = (0..pts.len()).filter(|&j| j != i).collect();
                others.sort_by(|&a, &b| {
                    let da = pts[i].0.dist(&pts[a].0);
                    let db = pts[i].0.dist(&pts[b].0);
                    da.total_cmp(&db).then(a.cmp(&b))
                });
                others.truncate(k);
                others
            })
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut models = Vec::with_capacity(count);
    let all: Vec<usize> = (0..pts.len()).collect();
    for _ in 0..count {
        let mut fitted = None;
        for _ in 0..SAMPLE_RETRIES {
            let sample: Vec<usize> = if neighbors.is_empty() {
                all.choose_multiple(&mut rng, 4).copied().collect()
            } else {
                let seed_idx = rng.gen_range(0..pts.len());
                let mut v = vec![seed_idx];
                v.extend(neighbors[seed_idx].choose_multiple(&mut rng, 3).copied());
                v
            };
            let corr: Vec<(Point2, Point2)> = sample.iter().map(|&i| pts[i]).collect();
            if let Ok(h) = fit_homography(&corr) {
                fitted = Some(h);
                break;
            }
        }
        models.push(fitted.ok_or_else(|| Error::Degenerate("proposal retry budget exhausted".into()))?);
    }
    Ok(ProposalPool::new(models))
}

/// Refines each proposal on `pairs`: refit to the pairs it explains below the
/// outlier cost and keep the refit while the summed truncated cost
/// `sum min(D, T)` strictly drops, for at most `rounds` refits.
pub fn refine_proposals(ctx: &MatchContext, pool: &ProposalPool, pairs: &[(usize, usize)], rounds: usize) -> ProposalPool {
    let t = ctx.params.outlier_ticks();
    let pairs: Vec<(usize, usize)> = pairs
        .iter()
        .copied()
        .filter(|&(p, q)| !ctx.left.get(p).is_dummy() && !ctx.right.get(q).is_dummy())
        .collect();
    let score = |h: &Homography| -> (i64, Vec<(Point2, Point2)>) {
        let mut total = 0;
        let mut support = Vec::new();
        for &(p, q) in &pairs {
            match ctx.pair_cost(h, p, q) {
                Some(c) if c < t => {
                    total += c;
                    support.push((ctx.left.get(p).pos, ctx.right.get(q).pos));
                }
                _ => total += t,
            }
        }
        (total, support)
    };
    let models = par::map(&pool.models, |h0| {
        let mut h = *h0;
        let (mut cost, mut support) = score(&h);
        for _ in 0..rounds {
            if support.len() < 5 {
                break;
            }
            let Ok(refit) = fit_homography(&support) else { break };
            let (c, s) = score(&refit);
            if c >= cost {
                break;
            }
            h = refit;
            cost = c;
            support = s;
        }
        h
    });
    ProposalPool::new(models)
}

/// Keeps at most `limit` proposals with distinct support. Proposals are
/// ranked by summed truncated cost on `pairs` (ties by index); one is dropped
/// when more than `overlap` of its support below the outlier cost is already
/// covered by a kept proposal.
pub fn distinct_proposals(ctx: &MatchContext, pool: &ProposalPool, pairs: &[(usize, usize)], overlap: f64, limit: usize) -> ProposalPool {
    let t = ctx.params.outlier_ticks();
    let scored = par::map(&pool.models, |h| {
        let mut total = 0i64;
        let mut support = Vec::new();
        for (i, &(p, q)) in pairs.iter().enumerate() {
            match ctx.pair_cost(h, p, q) {
                Some(c) if c < t => {
                    total += c;
                    support.push(i);
                }
                _ => total += t,
            }
        }
        (total, support)
    });
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by_key(|&i| (scored[i].0, i));
    let mut covered = vec![false; pairs.len()];
    let mut kept = Vec::new();
    for i in order {
        if kept.len() == limit {
            break;
        }
        let support = &scored[i].1;
        if support.len() < 4 {
            continue;
        }
        let seen = support.iter().filter(|&&k| covered[k]).count();
        if seen as f64 > overlap * support.len() as f64 {
            continue;
        }
        for &k in support {
            covered[k] = true;
        }
        kept.push(pool.models[i]);
    }
    ProposalPool::new(kept)
}

/// Per-point costs: `model[p][h]` in ticks (`None` = infeasible) and the outlier cost.
#[derive(Debug, Clone)]
struct Unary {
    model: Vec<Vec<Option<i64>>>,
    outlier: i64,
    partner: Vec<usize>,
}

impl Unary {
    fn build(ctx: &MatchContext, m: &JointMatching, models: &[Homography]) -> Self {
        let partner: Vec<usize> = m.triples.iter().map(|t| t.q).collect();
        let model = par::map_range(partner.len(), |p| {
            models.iter().map(|h| ctx.pair_cost(h, p, partner[p])).collect()
        });
        Self { model, outlier: ctx.params.outlier_ticks(), partner }
    }

    fn cost(&self, p: usize, l: Label) -> Option<i64> {
        match l {
            Label::Outlier => Some(self.outlier),
            Label::Model(h) => self.model[p].get(h).copied().flatten(),
        }
    }

    fn refresh_model(&mut self, ctx: &MatchContext, h: usize, model: &Homography) {
        for p in 0..self.model.len() {
            self.model[p][h] = ctx.pair_cost(model, p, self.partner[p]);
        }
    }
}

fn energy_of(unary: &Unary, f: &[Label], params: &EnergyParams, nbrs: &[(usize, usize)]) -> Option<i64> {
    let mut data = 0i64;
    for (p, &l) in f.iter().enumerate() {
        data += unary.cost(p, l)?;
    }
    let mut used: Vec<usize> = f.iter().filter_map(|l| l.model()).collect();
    used.sort_unstable();
    used.dedup();
    let smooth = nbrs.iter().filter(|&&(a, b)| f[a] != f[b]).count() as i64;
    Some(data + params.beta * used.len() as i64 + params.lambda * smooth)
}

/// Result of one fit step.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    /// Labels index into `models`.
    pub labeling: Labeling,
    /// Only the models in use, refit; order follows their original pool index.
    pub models: ProposalPool,
    /// Energy of the returned labeling and models, in ticks.
    pub energy: i64,
    /// Energy at the start and after each label or refit phase.
    pub trace: Vec<i64>,
}

/// Minimizes data cost plus label cost for a fixed matching. The matching's
/// labels, read as indices into `pool`, give the starting labeling.
pub fn fit_step_e1(ctx: &MatchContext, m: &JointMatching, pool: &ProposalPool, params: &EnergyParams) -> Result<FitOutcome> {
    fit_step(ctx, m, pool, &EnergyParams { lambda: 0, ..*params }, &[])
}

/// As `fit_step_e1` plus a Potts smoothness term over `nbrs` (left feature ids).
/// With `lambda == 0` the energy is the same as for `fit_step_e1` and so is the solver.
pub fn fit_step_e2(
    ctx: &MatchContext,
    m: &JointMatching,
    pool: &ProposalPool,
    params: &EnergyParams,
    nbrs: &[(usize, usize)],
) -> Result<FitOutcome> {
    if params.lambda == 0 {
        return fit_step_e1(ctx, m, pool, params);
    }
    fit_step(ctx, m, pool, params, nbrs)
}

fn fit_step(
    ctx: &MatchContext,
    m: &JointMatching,
    pool: &ProposalPool,
    params: &EnergyParams,
    nbrs: &[(usize, usize)],
) -> Result<FitOutcome> {
    if params.beta < 0 || params.lambda < 0 {
        return Err(Error::Invalid("label and smoothness costs must be nonnegative".into()));
    }
    m.validate(ctx.size())?;
    let n = ctx.size();
    if let Some(&(a, b)) = nbrs.iter().find(|&&(a, b)| a >= n || b >= n) {
        return Err(Error::Invalid(format!("neighbor edge ({a}, {b}) out of range")));
    }
    let mut models = pool.models.clone();
    let mut unary = Unary::build(ctx, m, &models);
    let mut f: Vec<Label> = m
        .triples
        .iter()
        .map(|t| match t.label {
            Label::Model(h) if unary.cost(t.p, t.label).is_some() && h < models.len() => Label::Model(h),
            _ => Label::Outlier,
        })
        .collect();
    let mut energy = energy_of(&unary, &f, params, nbrs).expect("starting labeling is feasible");
    let mut trace = vec![energy];

    loop {
        let before = energy;
        let (next, e) = if params.lambda == 0 || nbrs.is_empty() {
            select_labels(&unary, &f, models.len(), params.beta)
        } else {
            expansion_sweeps(&unary, &f, models.len(), params, nbrs)?
        };
        debug_assert!(e <= energy);
        f = next;
        energy = e;
        trace.push(energy);

        for h in used(&f) {
            let support: Vec<usize> = (0..n).filter(|&p| f[p] == Label::Model(h)).collect();
            if support.len() < 4 {
                continue;
            }
            let corr: Vec<(Point2, Point2)> =
                support.iter().map(|&p| (ctx.left.get(p).pos, ctx.right.get(unary.partner[p]).pos)).collect();
            let Ok(refit) = fit_homography(&corr) else { continue };
            let old: i64 = support.iter().map(|&p| unary.model[p][h].expect("support is feasible")).sum();
            let new: Option<i64> = support
                .iter()
                .map(|&p| ctx.pair_cost(&refit, p, unary.partner[p]))
                .sum();
            if new.is_some_and(|c| c < old) {
                models[h] = refit;
                unary.refresh_model(ctx, h, &refit);
            }
        }
        energy = energy_of(&unary, &f, params, nbrs).expect("refit keeps support feasible");
        trace.push(energy);
        if energy >= before {
            break;
        }
    }

    // keep only the models in use
    let keep = used(&f);
    let mut remap = vec![None; models.len()];
    for (new, &old) in keep.iter().enumerate() {
        remap[old] = Some(new);
    }
    let labeling = f
        .iter()
        .map(|l| match l {
            Label::Model(h) => Label::Model(remap[*h].expect("used model kept")),
            Label::Outlier => Label::Outlier,
        })
        .collect();
    Ok(FitOutcome {
        labeling: Labeling(labeling),
        models: ProposalPool::new(keep.iter().map(|&h| models[h]).collect()),
        energy,
        trace,
    })
}

fn used(f: &[Label]) -> Vec<usize> {
    let mut u: Vec<usize> = f.iter().filter_map(|l| l.model()).collect();
    u.sort_unstable();
    u.dedup();
    u
}

/// Each point takes its cheapest label among `active` and the outlier (outlier wins ties).
fn assign(unary: &Unary, active: &[usize]) -> Vec<Label> {
    (0..unary.model.len())
        .map(|p| {
            let mut best = (unary.outlier, Label::Outlier);
            for &h in active {
                if let Some(c) = unary.model[p][h] {
                    if c < best.0 {
                        best = (c, Label::Model(h));
                    }
                }
            }
            best.1
        })
        .collect()
}

fn subset_energy(unary: &Unary, active: &[usize], beta: i64) -> (Vec<Label>, i64) {
    let f = assign(unary, active);
    let e = energy_of(unary, &f, &EnergyParams { beta, lambda: 0 }, &[]).expect("assignment is feasible");
    (f, e)
}

/// Add/delete/swap local search over the active label set.
fn select_labels(unary: &Unary, start: &[Label], pool: usize, beta: i64) -> (Vec<Label>, i64) {
    let mut active = used(start);
    let (mut f, mut energy) = subset_energy(unary, &active, beta);
    let start_energy = energy_of(unary, start, &EnergyParams { beta, lambda: 0 }, &[]).expect("feasible");
    if start_energy <= energy {
        // reassignment never loses to the starting labeling, kept for safety on ties
        f = start.to_vec();
        energy = start_energy;
    }
    loop {
        active = used(&f);
        let outside: Vec<usize> = (0..pool).filter(|h| !active.contains(h)).collect();
        let mut candidates: Vec<Vec<usize>> = Vec::new();
        for &h in &outside {
            let mut c = active.clone();
            c.push(h);
            c.sort_unstable();
            candidates.push(c);
        }
        for &h in &active {
            candidates.push(active.iter().copied().filter(|&x| x != h).collect());
        }
        for &h in &active {
            for &l in &outside {
                let mut c: Vec<usize> = active.iter().copied().filter(|&x| x != h).collect();
                c.push(l);
                c.sort_unstable();
                candidates.push(c);
            }
        }
        let scored = par::map(&candidates, |c| subset_energy(unary, c, beta));
        match scored.into_iter().find(|(_, e)| *e < energy) {
            Some((next, e)) => {
                f = next;
                energy = e;
            }
            None => return (f, energy),
        }
    }
}

/// Alpha-expansion sweeps over every model and the outlier until a sweep changes nothing.
fn expansion_sweeps(
    unary: &Unary,
    start: &[Label],
    pool: usize,
    params: &EnergyParams,
    nbrs: &[(usize, usize)],
) -> Result<(Vec<Label>, i64)> {
    let mut f = start.to_vec();
    let mut energy = energy_of(unary, &f, params, nbrs).expect("feasible");
    let alphas: Vec<Label> = (0..pool).map(Label::Model).chain([Label::Outlier]).collect();
    loop {
        let mut changed = false;
        for &alpha in &alphas {
            let proposal = expand(unary, &f, alpha, params.lambda, nbrs)?;
            if let Some(e) = energy_of(unary, &proposal, params, nbrs) {
                if e < energy {
                    f = proposal;
                    energy = e;
                    changed = true;
                }
            }
        }
        if !changed {
            return Ok((f, energy));
        }
    }
}

fn expand(unary: &Unary, f: &[Label], alpha: Label, lambda: i64, nbrs: &[(usize, usize)]) -> Result<Vec<Label>> {
    let energy = expansion_energy(f, alpha, |p, l| unary.cost(p, l), lambda, nbrs);
    let (x, _) = minimize_binary(&energy)?;
    Ok(f.iter().zip(x).map(|(&l, switch)| if switch { alpha } else { l }).collect())
}

/// Binary subproblem of expanding `alpha` from `f`: variable `p` is 1 when
/// `p` switches to `alpha`. `cost(p, label)` is the unary cost, `None` when
/// infeasible; every current label must be feasible.
pub fn expansion_energy(
    f: &[Label],
    alpha: Label,
    cost: impl Fn(usize, Label) -> Option<i64>,
    lambda: i64,
    nbrs: &[(usize, usize)],
) -> BinaryEnergy {
    let unary = (0..f.len())
        .map(|p| {
            let keep = cost(p, f[p]).expect("current label is feasible");
            (keep, if f[p] == alpha { Some(keep) } else { cost(p, alpha) })
        })
        .collect();
    let potts = |x: Label, y: Label| if x == y { 0 } else { lambda };
    let pairwise = nbrs
        .iter()
        .map(|&(a, b)| {
            let (la, lb) = (f[a], f[b]);
            (a, b, [potts(la, lb), potts(la, alpha), potts(alpha, lb), 0])
        })
        .collect();
    BinaryEnergy { unary, pairwise }
}

/// A pseudo-boolean energy over binary variables.
///
/// `unary[i] = (E_i(0), E_i(1))` with `None` marking a forbidden state 1;
/// `pairwise` entries are `(i, j, [E(0,0), E(0,1), E(1,0), E(1,1)])`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryEnergy {
    pub unary: Vec<(i64, Option<i64>)>,
    pub pairwise: Vec<(usize, usize, [i64; 4])>,
}

impl BinaryEnergy {
    /// Energy of an assignment; `None` if it uses a forbidden state.
    pub fn evaluate(&self, x: &[bool]) -> Option<i64> {
        let mut e = 0i64;
        for (&(e0, e1), &xi) in self.unary.iter().zip(x) {
            e += if xi { e1? } else { e0 };
        }
        for &(i, j, t) in &self.pairwise {
            e += t[usize::from(x[i]) * 2 + usize::from(x[j])];
        }
        Some(e)
    }
}

/// Exact minimizer for submodular binary energies via one s-t min-cut.
/// Nodes on the sink side take value 1.
pub fn minimize_binary(energy: &BinaryEnergy) -> Result<(Vec<bool>, i64)> {
    let n = energy.unary.len();
    let s = n;
    let t = n + 1;
    let mut constant = 0i64;
    // net capacity of s->i (positive) or i->t (negative) per node
    let mut excess = vec![0i64; n];
    let mut forbidden = vec![false; n];
    let mut finite_total = 0i64;
    for (i, &(e0, e1)) in energy.unary.iter().enumerate() {
        constant += e0;
        match e1 {
            Some(e1) => {
                excess[i] += e1 - e0;
                finite_total += (e1 - e0).abs();
            }
            None => forbidden[i] = true,
        }
    }
    let mut edges = Vec::new();
    for &(i, j, [a, b, c, d]) in &energy.pairwise {
        if i >= n || j >= n || i == j {
            return Err(Error::Invalid(format!("bad pairwise term ({i}, {j})")));
        }
        let w = b + c - a - d;
        if w < 0 {
            return Err(Error::Invalid(format!("pairwise term ({i}, {j}) is not submodular")));
        }
        constant += a;
        excess[i] += c - a;
        excess[j] += d - c;
        finite_total += (c - a).abs() + (d - c).abs() + w;
        if w > 0 {
            edges.push((i, j, w));
        }
    }
    let hard = finite_total + 1;
    let mut net = FlowNetwork::new(n + 2, s, t)?;
    for i in 0..n {
        let mut up = excess[i].max(0);
        if forbidden[i] {
            up += hard;
        }
        if up > 0 {
            net.add_arc(s, i, up, 0)?;
        }
        if excess[i] < 0 {
            constant += excess[i];
            net.add_arc(i, t, -excess[i], 0)?;
        }
    }
    for (i, j, w) in edges {
        net.add_arc(i, j, w, 0)?;
    }
    let (source_side, cut) = min_cut(&net);
    let mut x = vec![true; n];
    for v in source_side {
        if v < n {
            x[v] = false;
        }
    }
    let value = constant + cut;
    debug_assert_eq!(energy.evaluate(&x), Some(value));
    Ok((x, value))
}

/// Refits each model label on its supporting pairs. Labels with fewer than
/// four supports, or whose fit is degenerate, are dropped and their points
/// sent to the outlier. Returns the compacted pool and labeling.
pub fn reestimate(ctx: &MatchContext, f: &Labeling, m: &JointMatching) -> Result<(ProposalPool, Labeling)> {
    m.validate(ctx.size())?;
    if f.len() != ctx.size() {
        return Err(Error::Invalid("labeling size differs from the matching".into()));
    }
    let mut models = Vec::new();
    let mut labels = vec![Label::Outlier; f.len()];
    for h in f.used_models() {
        let support: Vec<usize> = (0..f.len())
            .filter(|&p| f.get(p) == Label::Model(h))
            .filter(|&p| !ctx.left.get(p).is_dummy() && !ctx.right.get(m.triples[p].q).is_dummy())
            .collect();
        if support.len() < 4 {
            continue;
        }
        let corr: Vec<(Point2, Point2)> =
            support.iter().map(|&p| (ctx.left.get(p).pos, ctx.right.get(m.triples[p].q).pos)).collect();
        if let Ok(model) = fit_homography(&corr) {
            for &p in &support {
                labels[p] = Label::Model(models.len());
            }
            models.push(model);
        }
    }
    Ok((ProposalPool::new(models), Labeling(labels)))
}
