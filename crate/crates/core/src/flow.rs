//! Exact integer min-cost max-flow and min-cut.
//!
//! Min-cost flow uses successive shortest augmenting paths with node
//! potentials. All input costs must be nonnegative, so the initial potentials
//! are zero and Dijkstra stays valid on reduced costs throughout. Arcs are
//! scanned in insertion order and heap ties break on node id, which makes the
//! result a deterministic function of the input.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arc {
    pub from: usize,
    pub to: usize,
    pub capacity: i64,
    pub cost: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowNetwork {
    node_count: usize,
    source: usize,
    sink: usize,
    arcs: Vec<Arc>,
}

impl FlowNetwork {
    pub fn new(node_count: usize, source: usize, sink: usize) -> Result<Self> {
        if source == sink {
            return Err(Error::Invalid("source and sink must differ".into()));
        }
        if source >= node_count || sink >= node_count {
            return Err(Error::Invalid("source or sink out of range".into()));
        }
        Ok(Self { node_count, source, sink, arcs: Vec::new() })
    }

    pub fn reserve_arcs(&mut self, additional: usize) {
        self.arcs.reserve(additional);
    }

    /// Appends an arc and returns its index.
    pub fn add_arc(&mut self, from: usize, to: usize, capacity: i64, cost: i64) -> Result<usize> {
        if from >= self.node_count || to >= self.node_count {
            return Err(Error::Invalid(format!("arc ({from},{to}) out of range")));
        }
        if from == to {
            return Err(Error::Invalid(format!("self loop at node {from}")));
        }
        if capacity < 0 {
            return Err(Error::Invalid("negative capacity".into()));
        }
        self.arcs.push(Arc { from, to, capacity, cost });
        Ok(self.arcs.len() - 1)
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn source(&self) -> usize {
        self.source
    }

    pub fn sink(&self) -> usize {
        self.sink
    }

    pub fn arcs(&self) -> &[Arc] {
        &self.arcs
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowResult {
    pub flow_per_arc: Vec<i64>,
    pub total_flow: i64,
    pub total_cost: i64,
}

impl FlowResult {
    /// Checks capacity bounds, conservation and the cost identity.
    pub fn validate(&self, net: &FlowNetwork) -> Result<()> {
        let mut balance = vec![0i64; net.node_count];
        let mut cost = 0i64;
        for (arc, &f) in net.arcs.iter().zip(&self.flow_per_arc) {
            if f < 0 || f > arc.capacity {
                return Err(Error::ConstraintViolation("arc flow outside [0, capacity]".into()));
            }
            balance[arc.from] -= f;
            balance[arc.to] += f;
            cost += f * arc.cost;
        }
        for (v, &b) in balance.iter().enumerate() {
            let expected = if v == net.source {
                -self.total_flow
            } else if v == net.sink {
                self.total_flow
            } else {
                0
            };
            if b != expected {
                return Err(Error::ConstraintViolation(format!("conservation broken at node {v}")));
            }
        }
        if cost != self.total_cost {
            return Err(Error::ConstraintViolation("total cost mismatch".into()));
        }
        Ok(())
    }
}

/// Residual graph in compressed adjacency form. Edge `2k` is arc `k`, edge `2k+1` its reverse.
struct Residual {
    head: Vec<usize>,
    cap: Vec<i64>,
    cost: Vec<i64>,
    start: Vec<usize>,
    edges: Vec<usize>,
}

impl Residual {
    fn new(net: &FlowNetwork) -> Self {
        let m = net.arcs.len();
        let mut head = Vec::with_capacity(2 * m);
        let mut cap = Vec::with_capacity(2 * m);
        let mut cost = Vec::with_capacity(2 * m);
        let mut start = vec![0usize; net.node_count + 1];
        for a in &net.arcs {
            head.extend([a.to, a.from]);
            cap.extend([a.capacity, 0]);
            cost.extend([a.cost, -a.cost]);
            start[a.from + 1] += 1;
            start[a.to + 1] += 1;
        }
        for v in 0..net.node_count {
            start[v + 1] += start[v];
        }
        let mut fill = start.clone();
        let mut edges = vec![0usize; 2 * m];
        for (k, a) in net.arcs.iter().enumerate() {
            edges[fill[a.from]] = 2 * k;
            fill[a.from] += 1;
            edges[fill[a.to]] = 2 * k + 1;
            fill[a.to] += 1;
        }
        Residual { head, cap, cost, start, edges }
    }

    fn out(&self, v: usize) -> &[usize] {
        &self.edges[self.start[v]..self.start[v + 1]]
    }

    fn flows(&self, net: &FlowNetwork) -> Vec<i64> {
        (0..net.arcs.len()).map(|k| self.cap[2 * k + 1]).collect()
    }
}

const INF: i64 = i64::MAX / 4;

/// Maximum flow from source to sink of minimum total cost.
pub fn solve_min_cost_max_flow(net: &FlowNetwork) -> Result<FlowResult> {
    if net.arcs.iter().any(|a| a.cost < 0) {
        return Err(Error::Invalid("negative arc cost".into()));
    }
    let n = net.node_count;
    let (s, t) = (net.source, net.sink);
    let mut res = Residual::new(net);
    let mut potential = vec![0i64; n];
    let mut dist = vec![INF; n];
    let mut pred = vec![usize::MAX; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    let mut total_flow = 0i64;
    let mut total_cost = 0i64;

    loop {
        dist.fill(INF);
        pred.fill(usize::MAX);
        done.fill(false);
        dist[s] = 0;
        heap.clear();
        heap.push(Reverse((0i64, s)));
        while let Some(Reverse((d, u))) = heap.pop() {
            if done[u] {
                continue;
            }
            done[u] = true;
            if u == t {
                break;
            }
            for &e in res.out(u) {
                if res.cap[e] == 0 {
                    continue;
                }
                let v = res.head[e];
                let nd = d + res.cost[e] + potential[u] - potential[v];
                debug_assert!(res.cost[e] + potential[u] - potential[v] >= 0, "negative reduced cost");
                if nd < dist[v] {
                    dist[v] = nd;
                    pred[v] = e;
                    heap.push(Reverse((nd, v)));
                }
            }
        }
        if dist[t] == INF {
            break;
        }
        let dt = dist[t];
        for v in 0..n {
            potential[v] += dist[v].min(dt);
        }
        let mut push = INF;
        let mut v = t;
        while v != s {
            let e = pred[v];
            push = push.min(res.cap[e]);
            v = res.head[e ^ 1];
        }
        let mut v = t;
        while v != s {
            let e = pred[v];
            res.cap[e] -= push;
            res.cap[e ^ 1] += push;
            total_cost += push * res.cost[e];
            v = res.head[e ^ 1];
        }
        total_flow += push;
    }

    Ok(FlowResult { flow_per_arc: res.flows(net), total_flow, total_cost })
}

/// Minimum s-t cut. Returns the source side (sorted node ids) and the cut value.
pub fn min_cut(net: &FlowNetwork) -> (Vec<usize>, i64) {
    let n = net.node_count;
    let (s, t) = (net.source, net.sink);
    let mut res = Residual::new(net);
    let mut level = vec![-1i32; n];
    let mut it = vec![0usize; n];
    let mut value = 0i64;

    loop {
        level.fill(-1);
        level[s] = 0;
        let mut q = VecDeque::from([s]);
        while let Some(u) = q.pop_front() {
            for &e in res.out(u) {
                let v = res.head[e];
                if res.cap[e] > 0 && level[v] < 0 {
                    level[v] = level[u] + 1;
                    q.push_back(v);
                }
            }
        }
        if level[t] < 0 {
            break;
        }
        it.fill(0);
        loop {
            let f = blocking_push(&mut res, &level, &mut it, s, t, INF);
            if f == 0 {
                break;
            }
            value += f;
        }
    }

    let side: Vec<usize> = (0..n).filter(|&v| level[v] >= 0).collect();
    (side, value)
}

fn blocking_push(res: &mut Residual, level: &[i32], it: &mut [usize], u: usize, t: usize, limit: i64) -> i64 {
    if u == t {
        return limit;
    }
    while it[u] < res.start[u + 1] - res.start[u] {
        let e = res.edges[res.start[u] + it[u]];
        let v = res.head[e];
        if res.cap[e] > 0 && level[v] == level[u] + 1 {
            let f = blocking_push(res, level, it, v, t, limit.min(res.cap[e]));
            if f > 0 {
                res.cap[e] -= f;
                res.cap[e ^ 1] += f;
                return f;
            }
        }
        it[u] += 1;
    }
    0
}
