//! Per-round mixing matrices.
//!
//! A [`MixingPair`] holds the pull matrix `A` (row-stochastic, drives the
//! decision variables to consensus) and the push matrix `B`
//! (column-stochastic, preserves the total mass of the gradient trackers).
//! `A[i][j] > 0` means node `i` receives from node `j`.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;
use crate::rng::sample_without_replacement;
use crate::topology::{DirectedGraph, NodeSet};

/// Tolerance for the stochasticity and diagonal checks.
pub const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct MixingPair {
    pub pull: DenseMatrix,
    pub push: DenseMatrix,
}

impl MixingPair {
    pub fn new(pull: DenseMatrix, push: DenseMatrix) -> Result<Self> {
        if !pull.is_square() || pull.rows() != push.rows() || !push.is_square() {
            return Err(Error::Mixing(format!(
                "pull is {}x{}, push is {}x{}",
                pull.rows(),
                pull.cols(),
                push.rows(),
                push.cols()
            )));
        }
        Ok(MixingPair { pull, push })
    }

    /// Same matrix used for pulling and pushing.
    pub fn symmetric(w: DenseMatrix) -> Self {
        MixingPair {
            pull: w.clone(),
            push: w,
        }
    }

    pub fn size(&self) -> usize {
        self.pull.rows()
    }

    /// Directed links `j -> i` (with `i != j`) carrying a message this round:
    /// the union of the off-diagonal supports of `A` and `B`. A link used by
    /// both matrices is one physical message and counts once.
    pub fn link_count(&self) -> u64 {
        count_links(&self.pull, Some(&self.push))
    }

    /// Links used by the pull matrix alone.
    pub fn pull_link_count(&self) -> u64 {
        count_links(&self.pull, None)
    }

    /// Row-stochastic `A` and column-stochastic `B`, both non-negative.
    pub fn check_stochastic(&self) -> Result<()> {
        if !is_row_stochastic(&self.pull) {
            return Err(Error::Mixing("pull matrix is not row-stochastic".into()));
        }
        if !is_col_stochastic(&self.push) {
            return Err(Error::Mixing("push matrix is not column-stochastic".into()));
        }
        Ok(())
    }
}

fn count_links(a: &DenseMatrix, b: Option<&DenseMatrix>) -> u64 {
    let n = a.rows();
    let mut links = 0;
    for i in 0..n {
        for j in 0..n {
            if i != j && (a[(i, j)] != 0.0 || b.is_some_and(|b| b[(i, j)] != 0.0)) {
                links += 1;
            }
        }
    }
    links
}

fn non_negative(m: &DenseMatrix) -> bool {
    m.as_slice().iter().all(|&v| v >= 0.0)
}

pub fn is_row_stochastic(m: &DenseMatrix) -> bool {
    non_negative(m) && m.row_sums().iter().all(|s| (s - 1.0).abs() <= STOCHASTIC_TOL)
}

pub fn is_col_stochastic(m: &DenseMatrix) -> bool {
    non_negative(m) && m.col_sums().iter().all(|s| (s - 1.0).abs() <= STOCHASTIC_TOL)
}

pub fn is_doubly_stochastic(m: &DenseMatrix) -> bool {
    is_row_stochastic(m) && is_col_stochastic(m)
}

/// Metropolis matrix of the subgraph induced by `active`, extended to all
/// `M` nodes with identity rows for nodes outside the set. Returned as
/// `A = B`.
pub fn metropolis(g: &DirectedGraph, active: &NodeSet) -> Result<MixingPair> {
    if !g.is_symmetric() {
        return Err(Error::Mixing(
            "Metropolis weights need a symmetric graph".into(),
        ));
    }
    let n = g.node_count();
    if active.universe() != n {
        return Err(Error::Mixing(format!(
            "active set over {} nodes for a graph with {n}",
            active.universe()
        )));
    }
    let degree: Vec<usize> = (0..n)
        .map(|i| if active.contains(i) { g.degree_within(i, active) } else { 0 })
        .collect();
    let mut w = DenseMatrix::zeros(n, n);
    for i in 0..n {
        if !active.contains(i) {
            w[(i, i)] = 1.0;
            continue;
        }
        let mut off = 0.0;
        for &j in g.out_neighbors(i) {
            if active.contains(j) {
                let weight = 1.0 / degree[i].max(degree[j]) as f64;
                w[(i, j)] = weight;
                off += weight;
            }
        }
        // 1 - (1/3 + 1/3 + 1/3) rounds to a tiny negative number
        w[(i, i)] = (1.0 - off).max(0.0);
    }
    Ok(MixingPair::symmetric(w))
}

/// Broadcast-type pair. `targets[j]` lists the receivers of active node `j`,
/// itself included.
pub fn broadcast_matrices(
    g: &DirectedGraph,
    active: &NodeSet,
    targets: &BTreeMap<usize, Vec<usize>>,
) -> Result<MixingPair> {
    let n = g.node_count();
    if active.universe() != n {
        return Err(Error::Mixing(format!(
            "active set over {} nodes for a graph with {n}",
            active.universe()
        )));
    }
    // senders[i] = active nodes that transmit to i (N_in of i this round)
    let mut senders: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut out_size = vec![0usize; n];
    for &j in active.members() {
        let recv = targets.get(&j).ok_or_else(|| {
            Error::Mixing(format!("active node {j} has no broadcast targets"))
        })?;
        let mut recv = recv.clone();
        recv.sort_unstable();
        recv.dedup();
        if recv.binary_search(&j).is_err() {
            return Err(Error::Mixing(format!(
                "active node {j} must include itself among its targets"
            )));
        }
        for &i in &recv {
            if i != j && !g.has_edge(j, i) {
                return Err(Error::Mixing(format!(
                    "target {i} of node {j} is not an out-neighbour"
                )));
            }
            senders[i].push(j);
        }
        out_size[j] = recv.len();
    }
    if let Some(&k) = targets.keys().find(|&&k| !active.contains(k)) {
        return Err(Error::Mixing(format!(
            "inactive node {k} was given broadcast targets"
        )));
    }

    let mut pull = DenseMatrix::zeros(n, n);
    let mut push = DenseMatrix::zeros(n, n);
    for i in 0..n {
        let mut sources = senders[i].clone();
        if !sources.contains(&i) {
            sources.push(i);
        }
        let weight = 1.0 / sources.len() as f64;
        for &j in &sources {
            pull[(i, j)] = weight;
        }
        for &j in &senders[i] {
            push[(i, j)] = 1.0 / out_size[j] as f64;
        }
        if !active.contains(i) {
            push[(i, i)] = 1.0;
        }
    }
    MixingPair::new(pull, push)
}

/// `A = B = J = 11ᵀ/M`.
pub fn mean_matrix(nodes: usize) -> MixingPair {
    MixingPair::symmetric(DenseMatrix::filled(nodes, nodes, 1.0 / nodes as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub enum MixingStrategy {
    Fixed(MixingPair),
    /// Metropolis matrix on the active nodes plus `neighbors_per_active`
    /// sampled neighbours of each active node.
    MetropolisOnActive { neighbors_per_active: usize },
    /// Every active node broadcasts to itself and `targets_per_active`
    /// sampled out-neighbours.
    Broadcast { targets_per_active: usize },
    Mean,
    /// Metropolis matrix on `comm_nodes` uniformly drawn nodes plus
    /// `neighbors_per` sampled neighbours of each, drawn independently of the
    /// active set.
    IndependentGossip { comm_nodes: usize, neighbors_per: usize },
}

impl MixingStrategy {
    /// Whether every pair this strategy produces is doubly stochastic
    /// (graph assumed symmetric for the Metropolis variants).
    pub fn is_doubly_stochastic(&self) -> bool {
        match self {
            MixingStrategy::Fixed(p) => {
                is_doubly_stochastic(&p.pull) && is_doubly_stochastic(&p.push)
            }
            MixingStrategy::Broadcast { .. } => false,
            _ => true,
        }
    }

    /// Whether the drawn pair depends on the active set.
    pub fn uses_active_set(&self) -> bool {
        matches!(
            self,
            MixingStrategy::MetropolisOnActive { .. } | MixingStrategy::Broadcast { .. }
        )
    }

    /// Checks parameters against a graph of `nodes` nodes.
    pub fn check(&self, nodes: usize) -> Result<()> {
        let bad = |what: &str, v: usize| {
            Err(Error::InvalidArgument(format!(
                "{what} = {v} outside [0, {nodes}]"
            )))
        };
        match *self {
            MixingStrategy::Fixed(ref p) if p.size() != nodes => Err(Error::Mixing(format!(
                "fixed pair is {0}x{0} for a graph with {nodes} nodes",
                p.size()
            ))),
            MixingStrategy::MetropolisOnActive { neighbors_per_active: k } if k > nodes => {
                bad("neighbors_per_active", k)
            }
            MixingStrategy::Broadcast { targets_per_active: k } if k > nodes => {
                bad("targets_per_active", k)
            }
            MixingStrategy::IndependentGossip { comm_nodes, .. } if comm_nodes > nodes => {
                bad("comm_nodes", comm_nodes)
            }
            MixingStrategy::IndependentGossip { neighbors_per, .. } if neighbors_per > nodes => {
                bad("neighbors_per", neighbors_per)
            }
            _ => Ok(()),
        }
    }
}

/// `set` plus up to `k` uniformly drawn neighbours of each seed node.
fn expand_with_neighbors<R: Rng + ?Sized>(
    g: &DirectedGraph,
    seeds: &[usize],
    k: usize,
    rng: &mut R,
) -> NodeSet {
    let mut set = NodeSet::empty(g.node_count());
    for &i in seeds {
        set.insert(i);
    }
    for &i in seeds {
        for j in sample_without_replacement(g.out_neighbors(i), k, rng) {
            set.insert(j);
        }
    }
    set
}

/// Draws this round's pair. Random choices come from `rng` only.
pub fn sample_mixing<R: Rng + ?Sized>(
    strategy: &MixingStrategy,
    g: &DirectedGraph,
    active: &NodeSet,
    rng: &mut R,
) -> Result<MixingPair> {
    match strategy {
        MixingStrategy::Fixed(pair) => Ok(pair.clone()),
        MixingStrategy::Mean => Ok(mean_matrix(g.node_count())),
        MixingStrategy::MetropolisOnActive {
            neighbors_per_active,
        } => {
            let comm = expand_with_neighbors(g, active.members(), *neighbors_per_active, rng);
            metropolis(g, &comm)
        }
        MixingStrategy::IndependentGossip {
            comm_nodes,
            neighbors_per,
        } => {
            let all: Vec<usize> = (0..g.node_count()).collect();
            let mut seeds = sample_without_replacement(&all, *comm_nodes, rng);
            seeds.sort_unstable();
            let comm = expand_with_neighbors(g, &seeds, *neighbors_per, rng);
            metropolis(g, &comm)
        }
        MixingStrategy::Broadcast { targets_per_active } => {
            let mut targets = BTreeMap::new();
            for &j in active.members() {
                let mut recv = sample_without_replacement(g.out_neighbors(j), *targets_per_active, rng);
                recv.push(j);
                targets.insert(j, recv);
            }
            broadcast_matrices(g, active, &targets)
        }
    }
}

/// Outcome of [`validate_mixing`]; every flag is checked at [`STOCHASTIC_TOL`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MixingReport {
    pub row_stochastic_a: bool,
    pub col_stochastic_b: bool,
    pub graph_compatible: bool,
    pub diag_ge_beta: bool,
    pub doubly_stochastic_a: bool,
    pub doubly_stochastic_b: bool,
}

impl MixingReport {
    pub fn basic_ok(&self) -> bool {
        self.row_stochastic_a && self.col_stochastic_b && self.graph_compatible
    }
}

fn compatible(m: &DenseMatrix, g: &DirectedGraph) -> bool {
    let n = m.rows();
    n == g.node_count()
        && (0..n).all(|i| (0..n).all(|j| i == j || m[(i, j)] <= 0.0 || g.has_edge(j, i)))
}

pub fn validate_mixing(pair: &MixingPair, g: &DirectedGraph, beta: f64) -> MixingReport {
    let n = pair.size();
    let diag_ok = |m: &DenseMatrix| (0..n).all(|i| m[(i, i)] >= beta - STOCHASTIC_TOL);
    MixingReport {
        row_stochastic_a: is_row_stochastic(&pair.pull),
        col_stochastic_b: is_col_stochastic(&pair.push),
        graph_compatible: compatible(&pair.pull, g) && compatible(&pair.push, g),
        diag_ge_beta: diag_ok(&pair.pull) && diag_ok(&pair.push),
        doubly_stochastic_a: is_doubly_stochastic(&pair.pull),
        doubly_stochastic_b: is_doubly_stochastic(&pair.push),
    }
}
