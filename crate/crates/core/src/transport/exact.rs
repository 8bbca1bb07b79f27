//! Exact discrete optimal transport by successive shortest paths.
//!
//! Used as a test oracle only. Costs are scaled to integers (`COST_SCALE`) so that
//! Dijkstra with Johnson potentials runs on exact reduced costs; masses stay real.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use super::cost::TransportCost;
use super::sinkhorn::MASS_TOLERANCE;
use crate::error::{Error, Result};
use crate::grid::{mass, DiscreteMeasure};

pub const MAX_ATOMS: usize = 256;
pub const COST_SCALE: f64 = 1e12;

/// A point mass at `position`.
#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub position: Vec<f64>,
    pub mass: f64,
}

struct Edge {
    to: usize,
    rev: usize,
    cap: f64,
    cost: i64,
}

struct FlowGraph {
    adj: Vec<Vec<Edge>>,
}

impl FlowGraph {
    fn new(n: usize) -> Self {
        Self {
            adj: (0..n).map(|_| Vec::new()).collect(),
        }
    }

    fn add_edge(&mut self, from: usize, to: usize, cap: f64, cost: i64) -> (usize, usize) {
        let fwd = self.adj[from].len();
        let bwd = self.adj[to].len() + usize::from(from == to);
        self.adj[from].push(Edge {
            to,
            rev: bwd,
            cap,
            cost,
        });
        self.adj[to].push(Edge {
            to: from,
            rev: fwd,
            cap: 0.0,
            cost: -cost,
        });
        (from, fwd)
    }

    /// Push up to `demand` units from `s` to `t` along cheapest paths.
    /// Returns the amount that could not be routed.
    fn min_cost_flow(&mut self, s: usize, t: usize, demand: f64, tiny: f64) -> f64 {
        let n = self.adj.len();
        let mut potential = vec![0i64; n];
        let mut remaining = demand;
        let mut dist = vec![i64::MAX; n];
        let mut prev: Vec<Option<(usize, usize)>> = vec![None; n];
        while remaining > tiny {
            dist.fill(i64::MAX);
            prev.fill(None);
            dist[s] = 0;
            let mut heap = BinaryHeap::new();
            heap.push(Reverse((0i64, s)));
            while let Some(Reverse((d, v))) = heap.pop() {
                if d > dist[v] {
                    continue;
                }
                for (k, e) in self.adj[v].iter().enumerate() {
                    if e.cap <= tiny {
                        continue;
                    }
                    let nd = d + e.cost + potential[v] - potential[e.to];
                    if nd < dist[e.to] {
                        dist[e.to] = nd;
                        prev[e.to] = Some((v, k));
                        heap.push(Reverse((nd, e.to)));
                    }
                }
            }
            if dist[t] == i64::MAX {
                break;
            }
            for v in 0..n {
                if dist[v] != i64::MAX {
                    potential[v] += dist[v];
                }
            }
            let mut push = remaining;
            let mut v = t;
            while let Some((u, k)) = prev[v] {
                push = push.min(self.adj[u][k].cap);
                v = u;
            }
            let mut v = t;
            while let Some((u, k)) = prev[v] {
                let rev = self.adj[u][k].rev;
                self.adj[u][k].cap -= push;
                self.adj[v][rev].cap += push;
                v = u;
            }
            remaining -= push;
        }
        remaining
    }
}

/// Optimal value of the discrete Kantorovich problem between two atom lists.
pub fn exact_transport_atoms(
    source: &[Atom],
    target: &[Atom],
    cost: &TransportCost,
) -> Result<f64> {
    let source: Vec<&Atom> = source.iter().filter(|a| a.mass > 0.0).collect();
    let target: Vec<&Atom> = target.iter().filter(|a| a.mass > 0.0).collect();
    if source.len() > MAX_ATOMS || target.len() > MAX_ATOMS {
        return Err(Error::Capacity(format!(
            "exact transport supports at most {MAX_ATOMS} atoms per side, got {} and {}",
            source.len(),
            target.len()
        )));
    }
    let m0: f64 = source.iter().map(|a| a.mass).sum();
    let m1: f64 = target.iter().map(|a| a.mass).sum();
    if (m0 - m1).abs() > MASS_TOLERANCE * m0.max(m1) {
        return Err(Error::Precondition(format!(
            "masses differ: {m0} vs {m1}"
        )));
    }
    if source.is_empty() {
        return Ok(0.0);
    }

    let (a, b) = (source.len(), target.len());
    let s = a + b;
    let t = s + 1;
    let mut graph = FlowGraph::new(a + b + 2);
    let mut real_cost = Vec::with_capacity(a * b);
    let mut middle = Vec::with_capacity(a * b);
    for (i, x) in source.iter().enumerate() {
        graph.add_edge(s, i, x.mass, 0);
        for (j, y) in target.iter().enumerate() {
            let c = cost.between(&x.position, &y.position);
            let scaled = (c * COST_SCALE).round();
            if !(scaled.abs() < 1e18) {
                return Err(Error::Capacity(format!(
                    "cost {c} does not fit the integer scaling"
                )));
            }
            middle.push(graph.add_edge(i, a + j, f64::INFINITY, scaled as i64));
            real_cost.push(c);
        }
    }
    for (j, y) in target.iter().enumerate() {
        graph.add_edge(a + j, t, y.mass, 0);
    }
    let demand = m0.min(m1);
    let tiny = 1e-15 * demand;
    let unrouted = graph.min_cost_flow(s, t, demand, tiny);
    if unrouted > 1e-9 * demand {
        return Err(Error::breakdown(
            "exact transport",
            format!("{unrouted} units of mass could not be routed"),
        ));
    }
    Ok(middle
        .iter()
        .zip(&real_cost)
        .map(|(&(u, k), c)| {
            let e = &graph.adj[u][k];
            let flow = graph.adj[e.to][e.rev].cap;
            flow * c
        })
        .sum())
}

fn atoms_of(m: &DiscreteMeasure) -> Vec<Atom> {
    let g = m.grid();
    let mut out = Vec::new();
    for j in 0..g.height() {
        for i in 0..g.width() {
            let v = m.values()[g.index(i, j)];
            if v > 0.0 {
                let (x, y) = g.center(i, j);
                out.push(Atom {
                    position: vec![x, y],
                    mass: v,
                });
            }
        }
    }
    out
}

/// Exact optimal transport value between two measures on the same grid.
pub fn exact_transport(
    mu0: &DiscreteMeasure,
    mu1: &DiscreteMeasure,
    cost: &TransportCost,
) -> Result<f64> {
    if mu0.grid() != mu1.grid() {
        return Err(Error::Contract("measures live on different grids".into()));
    }
    if !mu0.is_nonnegative() || !mu1.is_nonnegative() {
        return Err(Error::Precondition("measures must be nonnegative".into()));
    }
    let (m0, m1) = (mass(mu0), mass(mu1));
    if (m0 - m1).abs() > MASS_TOLERANCE * m0.max(m1) {
        return Err(Error::Precondition(format!(
            "masses differ: {m0} vs {m1}"
        )));
    }
    exact_transport_atoms(&atoms_of(mu0), &atoms_of(mu1), cost)
}
