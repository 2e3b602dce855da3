//! Joint matching over a fixed set of models, reduced to min-cost max-flow.
//!
//! Every left feature is matched to exactly one right feature and each match
//! is assigned exactly one label: a model or the outlier model. Costs are
//! integer ticks. Pairs with infeasible appearance get no arc at all.
//!
//! The outlier model is realized as one shared hub node: `n_p -> hub` at cost
//! `T` and `hub -> n_q` at cost 0. This is flow-equivalent to the complete
//! bipartite set of uniform-cost outlier arcs while using `2n` arcs instead of
//! `n^2`.

use std::fmt;

use crate::error::{Error, Result};
use crate::flow::{solve_min_cost_max_flow, FlowNetwork, FlowResult};
use crate::geometry::{
    appearance_penalty, symmetric_transfer_error, Cost, FeatureSet, Homography, ScoreParams,
};
use crate::par;

/// A label: one of the models, or the outlier model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Model(usize),
    Outlier,
}

impl Label {
    pub fn model(&self) -> Option<usize> {
        match self {
            Label::Model(h) => Some(*h),
            Label::Outlier => None,
        }
    }

    pub fn is_outlier(&self) -> bool {
        matches!(self, Label::Outlier)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Model(h) => write!(f, "{h}"),
            Label::Outlier => f.write_str("phi"),
        }
    }
}

/// Appends dummy features to the smaller set until both sides have equal size.
pub fn balance_with_dummies(left: &FeatureSet, right: &FeatureSet) -> (FeatureSet, FeatureSet) {
    let mut left = left.clone();
    let mut right = right.clone();
    while left.len() < right.len() {
        left.push_dummy();
    }
    while right.len() < left.len() {
        right.push_dummy();
    }
    (left, right)
}

/// One matched pair and its label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub p: usize,
    pub q: usize,
    pub label: Label,
}

/// A full one-to-one matching with one label per match.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointMatching {
    /// Sorted by left id; entry `i` has `p == i`.
    pub triples: Vec<Triple>,
    /// Sum of matching costs in ticks.
    pub objective: i64,
}

impl JointMatching {
    /// Builds a matching from triples, sorting by left id.
    pub fn new(mut triples: Vec<Triple>, objective: i64) -> Self {
        triples.sort();
        Self { triples, objective }
    }

    /// Checks the one-to-one constraints over `n` features per side.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.triples.len() != n {
            return Err(Error::ConstraintViolation(format!(
                "{} triples for {n} features",
                self.triples.len()
            )));
        }
        let mut seen_q = vec![false; n];
        for (i, t) in self.triples.iter().enumerate() {
            if t.p != i {
                return Err(Error::ConstraintViolation(format!("left feature {i} not matched exactly once")));
            }
            if t.q >= n || seen_q[t.q] {
                return Err(Error::ConstraintViolation(format!("right feature {} not matched exactly once", t.q)));
            }
            seen_q[t.q] = true;
        }
        Ok(())
    }

    /// The labeling induced on left features.
    pub fn labeling(&self) -> Vec<Label> {
        self.triples.iter().map(|t| t.label).collect()
    }

    /// Distinct model labels in use, ascending.
    pub fn used_models(&self) -> Vec<usize> {
        let mut used: Vec<usize> = self.triples.iter().filter_map(|t| t.label.model()).collect();
        used.sort_unstable();
        used.dedup();
        used
    }

    /// `(p, q)` pairs assigned to a model (never the outlier).
    pub fn inlier_pairs(&self) -> Vec<(usize, usize)> {
        self.triples.iter().filter(|t| !t.label.is_outlier()).map(|t| (t.p, t.q)).collect()
    }

    /// Relabels model ids through `map` (`None` sends the triple to the outlier).
    pub fn remap_models(&self, map: &[Option<usize>]) -> JointMatching {
        let triples = self
            .triples
            .iter()
            .map(|t| Triple {
                label: match t.label {
                    Label::Model(h) => map.get(h).copied().flatten().map_or(Label::Outlier, Label::Model),
                    Label::Outlier => Label::Outlier,
                },
                ..*t
            })
            .collect();
        JointMatching { triples, objective: self.objective }
    }
}

/// A balanced instance with materialized model costs.
#[derive(Debug, Clone, PartialEq)]
pub struct GapInstance {
    n: usize,
    left_dummy: Vec<bool>,
    right_dummy: Vec<bool>,
    model_count: usize,
    outlier: Option<i64>,
    /// `arcs[h * n + p]`: feasible `(q, ticks)` for model `h`, sorted by `q`.
    arcs: Vec<Vec<(usize, i64)>>,
}

impl GapInstance {
    /// Builds an instance from a dense cost table `costs[h][p][q]` (`None` = infeasible)
    /// over `n_left x n_right` features, padding the smaller side with dummies.
    pub fn from_costs(costs: &[Vec<Vec<Option<i64>>>], n_left: usize, n_right: usize, outlier: Option<i64>) -> Result<Self> {
        let n = n_left.max(n_right);
        let mut arcs = Vec::with_capacity(costs.len() * n);
        for table in costs {
            if table.len() != n_left {
                return Err(Error::Invalid("cost table has wrong number of rows".into()));
            }
            for row in table {
                if row.len() != n_right {
                    return Err(Error::Invalid("cost table has wrong number of columns".into()));
                }
                let mut list = Vec::new();
                for (q, c) in row.iter().enumerate() {
                    if let Some(c) = c {
                        if *c < 0 {
                            return Err(Error::Invalid("negative cost".into()));
                        }
                        list.push((q, *c));
                    }
                }
                arcs.push(list);
            }
            arcs.extend((n_left..n).map(|_| Vec::new()));
        }
        if outlier.is_some_and(|t| t < 0) {
            return Err(Error::Invalid("negative outlier cost".into()));
        }
        Ok(Self {
            n,
            left_dummy: (0..n).map(|p| p >= n_left).collect(),
            right_dummy: (0..n).map(|q| q >= n_right).collect(),
            model_count: costs.len(),
            outlier,
            arcs,
        })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn model_count(&self) -> usize {
        self.model_count
    }

    pub fn has_outlier(&self) -> bool {
        self.outlier.is_some()
    }

    pub fn outlier_cost(&self) -> Option<i64> {
        self.outlier
    }

    pub fn is_left_dummy(&self, p: usize) -> bool {
        self.left_dummy[p]
    }

    pub fn is_right_dummy(&self, q: usize) -> bool {
        self.right_dummy[q]
    }

    /// Feasible `(q, cost)` entries of model `h` for left feature `p`.
    pub fn model_arcs(&self, h: usize, p: usize) -> &[(usize, i64)] {
        &self.arcs[h * self.n + p]
    }

    /// Cost of matching `p` to `q` under `label`, or `None` when infeasible.
    pub fn cost(&self, p: usize, q: usize, label: Label) -> Option<i64> {
        match label {
            Label::Outlier => self.outlier,
            Label::Model(h) if h < self.model_count => {
                let list = self.model_arcs(h, p);
                list.binary_search_by_key(&q, |e| e.0).ok().map(|i| list[i].1)
            }
            Label::Model(_) => None,
        }
    }

    /// Recomputes the objective of `m`; errors when any triple is infeasible.
    pub fn objective_of(&self, m: &JointMatching) -> Result<i64> {
        m.validate(self.n)?;
        m.triples.iter().try_fold(0i64, |acc, t| {
            self.cost(t.p, t.q, t.label)
                .map(|c| acc + c)
                .ok_or_else(|| Error::Infeasible(format!("triple ({}, {}, {}) has no cost", t.p, t.q, t.label)))
        })
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        for &h in labels {
            if h >= self.model_count {
                return Err(Error::UnknownLabel(h));
            }
        }
        Ok(())
    }
}

/// A flow network together with the bookkeeping that maps arcs back to triples.
#[derive(Debug, Clone)]
pub struct GapNetwork {
    pub network: FlowNetwork,
    /// `(arc, p, q, model)` for every model arc.
    pub model_arcs: Vec<(usize, usize, usize, usize)>,
    /// `(arc, p)` for `n_p -> hub`.
    pub outlier_left: Vec<(usize, usize)>,
    /// `(arc, q)` for `hub -> n_q`.
    pub outlier_right: Vec<(usize, usize)>,
    pub left_model_nodes: usize,
    pub right_model_nodes: usize,
    n: usize,
}

impl GapNetwork {
    fn extract(&self, flow: &FlowResult) -> Result<JointMatching> {
        if flow.total_flow < self.n as i64 {
            return Err(Error::Infeasible(format!(
                "max flow {} is below {} features",
                flow.total_flow, self.n
            )));
        }
        let mut triples = Vec::with_capacity(self.n);
        for &(arc, p, q, h) in &self.model_arcs {
            if flow.flow_per_arc[arc] == 1 {
                triples.push(Triple { p, q, label: Label::Model(h) });
            }
        }
        let ps = self.outlier_left.iter().filter(|(a, _)| flow.flow_per_arc[*a] == 1).map(|e| e.1);
        let qs = self.outlier_right.iter().filter(|(a, _)| flow.flow_per_arc[*a] == 1).map(|e| e.1);
        triples.extend(ps.zip(qs).map(|(p, q)| Triple { p, q, label: Label::Outlier }));
        let m = JointMatching::new(triples, flow.total_cost);
        m.validate(self.n)?;
        Ok(m)
    }
}

/// Node numbering shared by both constructions.
struct Layout {
    n: usize,
}

impl Layout {
    const S: usize = 0;
    const T: usize = 1;
    fn left(&self, p: usize) -> usize {
        2 + p
    }
    fn right(&self, q: usize) -> usize {
        2 + self.n + q
    }
    fn base(&self) -> usize {
        2 + 2 * self.n
    }
}

/// Builds the joint-matching network over all models of the instance.
pub fn build_gap_network(inst: &GapInstance) -> Result<GapNetwork> {
    let labels: Vec<usize> = (0..inst.model_count).collect();
    build_gap_network_for(inst, &labels)
}

/// Builds the network restricted to the model subset `labels` (outlier kept when present).
///
/// With an outlier model, model arcs costing more than `T` are left out: the
/// outlier route matches the same pair for less, so the optimum is unchanged.
pub fn build_gap_network_for(inst: &GapInstance, labels: &[usize]) -> Result<GapNetwork> {
    inst.check_labels(labels)?;
    let n = inst.n;
    let k = labels.len();
    let lay = Layout { n };
    let hub = lay.base() + 2 * k * n;
    let node_count = hub + usize::from(inst.has_outlier());
    let left_node = |i: usize, p: usize| lay.base() + i * n + p;
    let right_node = |i: usize, q: usize| lay.base() + k * n + i * n + q;

    if !inst.has_outlier() {
        let mut left_ok = vec![false; n];
        let mut right_ok = vec![false; n];
        for &h in labels {
            for (p, ok) in left_ok.iter_mut().enumerate() {
                for &(q, _) in inst.model_arcs(h, p) {
                    *ok = true;
                    right_ok[q] = true;
                }
            }
        }
        if let Some(p) = left_ok.iter().position(|ok| !ok) {
            return Err(Error::Infeasible(format!("left feature {p} has no feasible arc and no outlier model")));
        }
        if let Some(q) = right_ok.iter().position(|ok| !ok) {
            return Err(Error::Infeasible(format!("right feature {q} has no feasible arc and no outlier model")));
        }
    }

    let candidate_arcs: usize = labels.iter().flat_map(|&h| (0..n).map(move |p| inst.model_arcs(h, p).len())).sum();
    let mut net = FlowNetwork::new(node_count, Layout::S, Layout::T)?;
    net.reserve_arcs(candidate_arcs + 2 * n * (k + 2));
    for p in 0..n {
        net.add_arc(Layout::S, lay.left(p), 1, 0)?;
    }
    for (i, _) in labels.iter().enumerate() {
        for p in 0..n {
            if !inst.left_dummy[p] {
                net.add_arc(lay.left(p), left_node(i, p), 1, 0)?;
            }
        }
    }
    let mut model_arcs = Vec::with_capacity(candidate_arcs);
    for (i, &h) in labels.iter().enumerate() {
        for p in 0..n {
            for &(q, c) in inst.model_arcs(h, p) {
                if inst.outlier.is_some_and(|t| c > t) {
                    continue;
                }
                let a = net.add_arc(left_node(i, p), right_node(i, q), 1, c)?;
                model_arcs.push((a, p, q, h));
            }
        }
    }
    for (i, _) in labels.iter().enumerate() {
        for q in 0..n {
            if !inst.right_dummy[q] {
                net.add_arc(right_node(i, q), lay.right(q), 1, 0)?;
            }
        }
    }
    for q in 0..n {
        net.add_arc(lay.right(q), Layout::T, 1, 0)?;
    }
    let (outlier_left, outlier_right) = add_outlier_arcs(&mut net, inst, &lay, hub, |_| true)?;

    Ok(GapNetwork {
        network: net,
        model_arcs,
        outlier_left,
        outlier_right,
        left_model_nodes: k * n,
        right_model_nodes: k * n,
        n,
    })
}

type ArcList = Vec<(usize, usize)>;

fn add_outlier_arcs(
    net: &mut FlowNetwork,
    inst: &GapInstance,
    lay: &Layout,
    hub: usize,
    left_allowed: impl Fn(usize) -> bool,
) -> Result<(ArcList, ArcList)> {
    let mut left = Vec::with_capacity(inst.n);
    let mut right = Vec::with_capacity(inst.n);
    if let Some(t) = inst.outlier {
        for p in (0..inst.n).filter(|&p| left_allowed(p)) {
            left.push((net.add_arc(lay.left(p), hub, 1, t)?, p));
        }
        for q in 0..inst.n {
            right.push((net.add_arc(hub, lay.right(q), 1, 0)?, q));
        }
    }
    Ok((left, right))
}

/// Globally optimal joint matching over all models of `inst`.
pub fn solve_gap(inst: &GapInstance) -> Result<JointMatching> {
    let labels: Vec<usize> = (0..inst.model_count).collect();
    solve_gap_for(inst, &labels)
}

/// Globally optimal joint matching restricted to the model subset `labels`.
pub fn solve_gap_for(inst: &GapInstance, labels: &[usize]) -> Result<JointMatching> {
    let g = build_gap_network_for(inst, labels)?;
    let flow = solve_min_cost_max_flow(&g.network)?;
    g.extract(&flow)
}

/// Builds the network under a fixed labeling: each left feature keeps only the
/// model node of its own label, right model nodes are kept for every model.
pub fn build_lc_gap_network(inst: &GapInstance, labeling: &[Label]) -> Result<GapNetwork> {
    let n = inst.n;
    if labeling.len() != n {
        return Err(Error::Invalid(format!("labeling covers {} of {n} features", labeling.len())));
    }
    for l in labeling {
        match l {
            Label::Model(h) if *h >= inst.model_count => return Err(Error::UnknownLabel(*h)),
            Label::Outlier if !inst.has_outlier() => {
                return Err(Error::Invalid("outlier label used without an outlier model".into()))
            }
            _ => {}
        }
    }
    let lay = Layout { n };
    let big_l = inst.model_count;
    // left model nodes: one per feature with a model label, indexed by p
    let left_node = |p: usize| lay.base() + p;
    let right_node = |h: usize, q: usize| lay.base() + n + h * n + q;
    let hub = lay.base() + n + big_l * n;
    let node_count = hub + usize::from(inst.has_outlier());

    let mut net = FlowNetwork::new(node_count, Layout::S, Layout::T)?;
    for p in 0..n {
        net.add_arc(Layout::S, lay.left(p), 1, 0)?;
    }
    let mut left_model_nodes = 0;
    for (p, l) in labeling.iter().enumerate() {
        if l.model().is_some() {
            left_model_nodes += 1;
            if !inst.left_dummy[p] {
                net.add_arc(lay.left(p), left_node(p), 1, 0)?;
            }
        }
    }
    let mut model_arcs = Vec::new();
    for (p, l) in labeling.iter().enumerate() {
        if let Label::Model(h) = *l {
            for &(q, c) in inst.model_arcs(h, p) {
                let a = net.add_arc(left_node(p), right_node(h, q), 1, c)?;
                model_arcs.push((a, p, q, h));
            }
        }
    }
    for h in 0..big_l {
        for q in 0..n {
            if !inst.right_dummy[q] {
                net.add_arc(right_node(h, q), lay.right(q), 1, 0)?;
            }
        }
    }
    for q in 0..n {
        net.add_arc(lay.right(q), Layout::T, 1, 0)?;
    }
    let (outlier_left, outlier_right) =
        add_outlier_arcs(&mut net, inst, &lay, hub, |p| labeling[p].is_outlier())?;

    Ok(GapNetwork {
        network: net,
        model_arcs,
        outlier_left,
        outlier_right,
        left_model_nodes,
        right_model_nodes: big_l * n,
        n,
    })
}

/// Optimal matching that respects the labeling: every triple has `label == labeling[p]`.
pub fn solve_lc_gap(inst: &GapInstance, labeling: &[Label]) -> Result<JointMatching> {
    let g = build_lc_gap_network(inst, labeling)?;
    let flow = solve_min_cost_max_flow(&g.network)?;
    g.extract(&flow)
}

/// Feature sets prepared for repeated matching: balanced, with the
/// appearance-feasible candidate pairs computed once.
#[derive(Debug, Clone)]
pub struct MatchContext {
    pub left: FeatureSet,
    pub right: FeatureSet,
    pub params: ScoreParams,
    /// For every left id, the right ids it may match under some model (ascending).
    candidates: Vec<Vec<usize>>,
}

impl MatchContext {
    pub fn new(left: &FeatureSet, right: &FeatureSet, params: ScoreParams) -> Result<Self> {
        params.validate()?;
        let (left, right) = balance_with_dummies(left, right);
        let candidates = par::map(left.features(), |p| {
            let Some(a) = &p.desc else { return Ok(Vec::new()) };
            let mut out = Vec::new();
            for q in right.iter() {
                if let Some(b) = &q.desc {
                    if appearance_penalty(a, b, &params)?.is_feasible() {
                        out.push(q.id);
                    }
                }
            }
            Ok(out)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(Self { left, right, params, candidates })
    }

    pub fn size(&self) -> usize {
        self.left.len()
    }

    pub fn candidates(&self, p: usize) -> &[usize] {
        &self.candidates[p]
    }

    pub fn appearance_ok(&self, p: usize, q: usize) -> bool {
        self.candidates[p].binary_search(&q).is_ok()
    }

    /// Cost in ticks of matching `p` to `q` under `model`; `None` when infeasible.
    pub fn pair_cost(&self, model: &Homography, p: usize, q: usize) -> Option<i64> {
        if !self.appearance_ok(p, q) {
            return None;
        }
        let e = symmetric_transfer_error(model, self.left.get(p).pos, self.right.get(q).pos).ok()?;
        Some(self.params.ticks(e))
    }

    /// Cost in ticks of a triple; dummies and outliers cost `T`.
    pub fn triple_cost(&self, models: &[Homography], t: &Triple) -> Option<i64> {
        match t.label {
            Label::Outlier => Some(self.params.outlier_ticks()),
            Label::Model(h) => self.pair_cost(models.get(h)?, t.p, t.q),
        }
    }

    /// Geometric matching score of the pair under `model` (real units), for reporting.
    pub fn score(&self, model: &Homography, p: usize, q: usize) -> Cost {
        match self.pair_cost(model, p, q) {
            Some(_) => symmetric_transfer_error(model, self.left.get(p).pos, self.right.get(q).pos)
                .map_or(Cost::Infeasible, Cost::Finite),
            None => Cost::Infeasible,
        }
    }

    /// Materializes the instance for `models`.
    pub fn instance(&self, models: &[Homography], include_outlier: bool) -> GapInstance {
        let n = self.size();
        let per_model = par::map(models, |h| {
            (0..n)
                .map(|p| {
                    self.candidates[p]
                        .iter()
                        .filter_map(|&q| self.pair_cost(h, p, q).map(|c| (q, c)))
                        .collect::<Vec<_>>()
                })
                .collect::<Vec<_>>()
        });
        GapInstance {
            n,
            left_dummy: self.left.iter().map(|f| f.is_dummy()).collect(),
            right_dummy: self.right.iter().map(|f| f.is_dummy()).collect(),
            model_count: models.len(),
            outlier: include_outlier.then(|| self.params.outlier_ticks()),
            arcs: per_model.into_iter().flatten().collect(),
        }
    }

    /// A matching that pairs `pairs` and fills the remaining features with outlier triples.
    pub fn matching_from_pairs(&self, pairs: &[(usize, usize)]) -> Result<JointMatching> {
        let n = self.size();
        let mut used_p = vec![false; n];
        let mut used_q = vec![false; n];
        let mut triples = Vec::with_capacity(n);
        for &(p, q) in pairs {
            if p >= n || q >= n || used_p[p] || used_q[q] {
                return Err(Error::Invalid(format!("pair ({p}, {q}) is out of range or repeated")));
            }
            used_p[p] = true;
            used_q[q] = true;
            triples.push(Triple { p, q, label: Label::Outlier });
        }
        let free_p = (0..n).filter(|&p| !used_p[p]);
        let free_q = (0..n).filter(|&q| !used_q[q]);
        triples.extend(free_p.zip(free_q).map(|(p, q)| Triple { p, q, label: Label::Outlier }));
        let t = self.params.outlier_ticks();
        Ok(JointMatching::new(triples, t * n as i64))
    }
}
