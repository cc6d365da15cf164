//! Undirected communication topologies, their Laplacians and the switching
//! signal that selects the active graph over time.

use std::collections::VecDeque;
use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalues at or below this are treated as zero when testing
/// connectivity through the Laplacian spectrum.
pub const CONNECTIVITY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Line,
    Ring,
    Star,
    Custom,
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TopologyKind::Line => "line",
            TopologyKind::Ring => "ring",
            TopologyKind::Star => "star",
            TopologyKind::Custom => "custom",
        };
        f.write_str(s)
    }
}

/// A simple undirected graph on `n` agents with 0/1 weights.
///
/// Agents are indexed from zero. The adjacency is kept both as a dense
/// matrix (for spectral work) and as sorted neighbor lists (for the
/// per-step protocol evaluation).
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    n: usize,
    adjacency: Vec<bool>,
    neighbors: Vec<Vec<usize>>,
    label: TopologyKind,
}

impl Topology {
    /// Canonical line (path 0-1-..-n-1), ring (cycle) or star (hub 0).
    pub fn build(kind: TopologyKind, n: usize) -> Result<Self> {
        let edges: Vec<(usize, usize)> = match kind {
            TopologyKind::Line => {
                if n < 2 {
                    return Err(Error::Parameter(format!("line needs n >= 2, got {n}")));
                }
                (0..n - 1).map(|i| (i, i + 1)).collect()
            }
            TopologyKind::Ring => {
                if n < 3 {
                    return Err(Error::Parameter(format!("ring needs n >= 3, got {n}")));
                }
                (0..n).map(|i| (i, (i + 1) % n)).collect()
            }
            TopologyKind::Star => {
                if n < 3 {
                    return Err(Error::Parameter(format!("star needs n >= 3, got {n}")));
                }
                (1..n).map(|i| (0, i)).collect()
            }
            TopologyKind::Custom => {
                return Err(Error::Parameter("custom topologies need an edge list".into()))
            }
        };
        Self::with_edges(n, &edges, kind)
    }

    /// Graph from an explicit undirected edge list. Connectivity is not
    /// enforced here; see [`Topology::is_connected`].
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        Self::with_edges(n, edges, TopologyKind::Custom)
    }

    fn with_edges(n: usize, edges: &[(usize, usize)], label: TopologyKind) -> Result<Self> {
        if n < 2 {
            return Err(Error::Parameter(format!("need at least 2 agents, got {n}")));
        }
        let mut adjacency = vec![false; n * n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Parameter(format!("edge ({a}, {b}) out of range for n = {n}")));
            }
            if a == b {
                return Err(Error::Parameter(format!("self loop at node {a}")));
            }
            adjacency[a * n + b] = true;
            adjacency[b * n + a] = true;
        }
        let neighbors = (0..n)
            .map(|i| (0..n).filter(|&j| adjacency[i * n + j]).collect())
            .collect();
        Ok(Self { n, adjacency, neighbors, label })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn label(&self) -> TopologyKind {
        self.label
    }

    pub fn is_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.n + j]
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn max_degree(&self) -> usize {
        self.neighbors.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for &j in &self.neighbors[i] {
                if i < j {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn adjacency_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| if self.is_edge(i, j) { 1.0 } else { 0.0 })
    }

    /// `L = D - A`.
    pub fn laplacian(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| {
            if i == j {
                self.degree(i) as f64
            } else if self.is_edge(i, j) {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// Breadth-first reachability from node 0.
    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for &j in &self.neighbors[i] {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Laplacian spectrum in ascending order.
    pub fn laplacian_spectrum(&self) -> Vec<f64> {
        let eig = SymmetricEigen::new(self.laplacian());
        let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    /// Algebraic connectivity, the second-smallest Laplacian eigenvalue.
    pub fn lambda2(&self) -> Result<f64> {
        let ev = self.laplacian_spectrum();
        let l2 = ev[1];
        if l2 <= CONNECTIVITY_TOL {
            return Err(Error::Connectivity { lambda2: l2 });
        }
        Ok(l2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchRule {
    RoundRobin,
    SeededRandom(u64),
}

/// A finite set of graphs and the rule that cycles through them
/// every `dwell` seconds.
///
/// Switching is right-continuous: `t = k * dwell` already belongs to
/// window `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct TopologySchedule {
    graphs: Vec<Topology>,
    dwell: f64,
    rule: SwitchRule,
}

impl TopologySchedule {
    pub fn new(graphs: Vec<Topology>, dwell: f64, rule: SwitchRule) -> Result<Self> {
        let Some(first) = graphs.first() else {
            return Err(Error::Parameter("schedule needs at least one graph".into()));
        };
        if !(dwell > 0.0) || !dwell.is_finite() {
            return Err(Error::Parameter(format!("dwell must be positive, got {dwell}")));
        }
        let n = first.n();
        if let Some(g) = graphs.iter().find(|g| g.n() != n) {
            return Err(Error::Parameter(format!(
                "all graphs must share n = {n}, found a {} graph with n = {}",
                g.label(),
                g.n()
            )));
        }
        Ok(Self { graphs, dwell, rule })
    }

    /// A schedule holding a single static graph.
    pub fn fixed(graph: Topology) -> Result<Self> {
        Self::new(vec![graph], 1.0, SwitchRule::RoundRobin)
    }

    pub fn graphs(&self) -> &[Topology] {
        &self.graphs
    }

    pub fn dwell(&self) -> f64 {
        self.dwell
    }

    pub fn rule(&self) -> SwitchRule {
        self.rule
    }

    pub fn n(&self) -> usize {
        self.graphs[0].n()
    }

    pub fn max_degree(&self) -> usize {
        self.graphs.iter().map(Topology::max_degree).max().unwrap_or(0)
    }

    /// `min lambda2` over the graph set.
    pub fn lambda2_star(&self) -> Result<f64> {
        let mut best = f64::INFINITY;
        for g in &self.graphs {
            best = best.min(g.lambda2()?);
        }
        Ok(best)
    }

    /// Index of the graph that is active at time `t`.
    pub fn active_index(&self, t: f64) -> usize {
        let k = self.graphs.len();
        let window = (t.max(0.0) / self.dwell).floor() as u64;
        match self.rule {
            SwitchRule::RoundRobin => (window % k as u64) as usize,
            SwitchRule::SeededRandom(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(window);
                rng.random_range(0..k)
            }
        }
    }

    pub fn active_graph(&self, t: f64) -> &Topology {
        &self.graphs[self.active_index(t)]
    }

    /// Same graph set with a different switching rule.
    pub fn with_rule(&self, rule: SwitchRule) -> Self {
        Self { rule, ..self.clone() }
    }
}
