//! Local search over label subsets for the label-cost regularized matching energy.
//!
//! Each candidate subset is scored by solving the unregularized joint matching
//! restricted to it and adding `beta` per model the solution actually uses.
//! Moves are tried add, then delete, then swap, each in label-index order, and
//! the first strict improvement is accepted; the neighborhood is then rebuilt.
//! With the `rayon` feature a whole neighborhood is scored concurrently and the
//! lowest-index improving candidate wins, so serial and parallel runs agree.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::gap::{solve_gap_for, GapInstance, JointMatching};
use crate::oracle::brute_force_gap_for;
use crate::par;

/// Inner solver for a subset-restricted joint matching.
pub trait GapSolver: Sync {
    fn solve(&self, inst: &GapInstance, labels: &[usize]) -> Result<JointMatching>;
    fn name(&self) -> &'static str;
}

/// Min-cost max-flow based solver.
#[derive(Debug, Clone, Copy, Default)]
pub struct FlowSolver;

impl GapSolver for FlowSolver {
    fn solve(&self, inst: &GapInstance, labels: &[usize]) -> Result<JointMatching> {
        solve_gap_for(inst, labels)
    }
    fn name(&self) -> &'static str {
        "mcmf"
    }
}

/// Exhaustive permutation enumeration; small instances only.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExhaustiveSolver;

impl GapSolver for ExhaustiveSolver {
    fn solve(&self, inst: &GapInstance, labels: &[usize]) -> Result<JointMatching> {
        brute_force_gap_for(inst, labels)
    }
    fn name(&self) -> &'static str {
        "exhaustive"
    }
}

/// A sorted, duplicate-free set of model ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct LabelSubset(Vec<usize>);

impl LabelSubset {
    pub fn new(mut labels: Vec<usize>) -> Self {
        labels.sort_unstable();
        labels.dedup();
        Self(labels)
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn labels(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, h: usize) -> bool {
        self.0.binary_search(&h).is_ok()
    }

    fn with(&self, h: usize) -> Self {
        let mut v = self.0.clone();
        v.push(h);
        Self::new(v)
    }

    fn without(&self, h: usize) -> Self {
        Self(self.0.iter().copied().filter(|&x| x != h).collect())
    }
}

/// The add, delete and swap neighborhoods of a subset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighborhoods {
    pub add: Vec<LabelSubset>,
    pub delete: Vec<LabelSubset>,
    pub swap: Vec<LabelSubset>,
}

impl Neighborhoods {
    /// All candidates in acceptance order.
    pub fn ordered(&self) -> Vec<LabelSubset> {
        self.add.iter().chain(&self.delete).chain(&self.swap).cloned().collect()
    }
}

pub fn neighborhoods(pool: &[usize], current: &LabelSubset) -> Neighborhoods {
    let mut pool = pool.to_vec();
    pool.sort_unstable();
    pool.dedup();
    let outside: Vec<usize> = pool.iter().copied().filter(|&h| !current.contains(h)).collect();
    let add = outside.iter().map(|&h| current.with(h)).collect();
    let delete = current.labels().iter().map(|&h| current.without(h)).collect();
    let swap = current
        .labels()
        .iter()
        .flat_map(|&h| outside.iter().map(move |&l| (h, l)))
        .map(|(h, l)| current.without(h).with(l))
        .collect();
    Neighborhoods { add, delete, swap }
}

/// Matching objective plus `beta` per distinct model label in use.
pub fn regularized_energy(m: &JointMatching, beta: i64) -> i64 {
    m.objective + beta * m.used_models().len() as i64
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegularizedSolution {
    pub subset: LabelSubset,
    pub matching: JointMatching,
    pub energy: i64,
    /// Energy after initialization and after each accepted move.
    pub trace: Vec<i64>,
    /// Number of distinct subsets solved.
    pub evaluations: usize,
}

/// Local search from the empty subset with the flow solver.
pub fn ls_gap(inst: &GapInstance, beta: i64) -> Result<RegularizedSolution> {
    ls_gap_with(inst, beta, &LabelSubset::empty(), &FlowSolver)
}

/// Local search from `initial` with an arbitrary inner solver.
pub fn ls_gap_with(
    inst: &GapInstance,
    beta: i64,
    initial: &LabelSubset,
    solver: &dyn GapSolver,
) -> Result<RegularizedSolution> {
    if !inst.has_outlier() {
        return Err(Error::Invalid("local search needs the outlier model so every subset is feasible".into()));
    }
    if beta < 0 {
        return Err(Error::Invalid("label cost must be nonnegative".into()));
    }
    let pool: Vec<usize> = (0..inst.model_count()).collect();
    for &h in initial.labels() {
        if h >= inst.model_count() {
            return Err(Error::UnknownLabel(h));
        }
    }
    let mut cache: HashMap<LabelSubset, (JointMatching, i64)> = HashMap::new();
    let evaluate = |s: &LabelSubset, cache: &mut HashMap<LabelSubset, (JointMatching, i64)>| -> Result<i64> {
        if let Some((_, e)) = cache.get(s) {
            return Ok(*e);
        }
        let m = solver.solve(inst, s.labels())?;
        let e = regularized_energy(&m, beta);
        cache.insert(s.clone(), (m, e));
        Ok(e)
    };

    let mut current = initial.clone();
    let mut energy = evaluate(&current, &mut cache)?;
    let mut trace = vec![energy];

    loop {
        let candidates = neighborhoods(&pool, &current).ordered();
        let accepted = if par::enabled() {
            let fresh: Vec<LabelSubset> = candidates.iter().filter(|c| !cache.contains_key(*c)).cloned().collect();
            let solved = par::map(&fresh, |s| solver.solve(inst, s.labels()));
            for (s, m) in fresh.into_iter().zip(solved) {
                let m = m?;
                let e = regularized_energy(&m, beta);
                cache.insert(s, (m, e));
            }
            candidates.into_iter().find(|c| cache[c].1 < energy)
        } else {
            let mut found = None;
            for c in candidates {
                if evaluate(&c, &mut cache)? < energy {
                    found = Some(c);
                    break;
                }
            }
            found
        };
        match accepted {
            Some(next) => {
                energy = cache[&next].1;
                current = next;
                trace.push(energy);
            }
            None => break,
        }
    }

    let evaluations = cache.len();
    let (matching, energy) = cache.remove(&current).expect("current subset was evaluated");
    Ok(RegularizedSolution { subset: current, matching, energy, trace, evaluations })
}
