//! Directed communication graphs.
//!
//! An edge `(i, j)` means node `i` can send to node `j`. Self-loops are never
//! stored; self-communication is implicit in the mixing matrices.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

/// Connectivity retries before [`build_rgg`] gives up.
pub const RGG_MAX_ATTEMPTS: u64 = 1000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectedGraph {
    nodes: usize,
    out_neighbors: Vec<Vec<usize>>,
    in_neighbors: Vec<Vec<usize>>,
}

impl DirectedGraph {
    pub fn empty(nodes: usize) -> Self {
        DirectedGraph {
            nodes,
            out_neighbors: vec![Vec::new(); nodes],
            in_neighbors: vec![Vec::new(); nodes],
        }
    }

    /// Builds a graph from directed edges. Duplicates are merged; self-loops
    /// are dropped.
    pub fn from_edges(nodes: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (i, j) in edges {
            if i >= nodes || j >= nodes {
                return Err(Error::Graph(format!(
                    "edge ({i}, {j}) out of range for {nodes} nodes"
                )));
            }
            if i != j {
                set.insert((i, j));
            }
        }
        let mut g = DirectedGraph::empty(nodes);
        for (i, j) in set {
            g.out_neighbors[i].push(j);
            g.in_neighbors[j].push(i);
        }
        // BTreeSet iteration is sorted by (i, j), so out lists are sorted;
        // in lists are filled in increasing i and are sorted as well.
        Ok(g)
    }

    /// Symmetric graph from undirected pairs.
    pub fn undirected(nodes: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let edges: Vec<_> = pairs.into_iter().flat_map(|(i, j)| [(i, j), (j, i)]).collect();
        DirectedGraph::from_edges(nodes, edges)
    }

    /// Undirected path `0 - 1 - ... - (n-1)`.
    pub fn path(nodes: usize) -> Self {
        DirectedGraph::undirected(nodes, (1..nodes).map(|i| (i - 1, i))).expect("indices in range")
    }

    /// Directed cycle `0 -> 1 -> ... -> (n-1) -> 0`.
    pub fn directed_cycle(nodes: usize) -> Self {
        DirectedGraph::from_edges(nodes, (0..nodes).map(|i| (i, (i + 1) % nodes)))
            .expect("indices in range")
    }

    pub fn complete(nodes: usize) -> Self {
        DirectedGraph::from_edges(
            nodes,
            (0..nodes).flat_map(|i| (0..nodes).map(move |j| (i, j))),
        )
        .expect("indices in range")
    }

    pub fn node_count(&self) -> usize {
        self.nodes
    }

    pub fn edge_count(&self) -> usize {
        self.out_neighbors.iter().map(Vec::len).sum()
    }

    pub fn out_neighbors(&self, i: usize) -> &[usize] {
        &self.out_neighbors[i]
    }

    pub fn in_neighbors(&self, i: usize) -> &[usize] {
        &self.in_neighbors[i]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        i < self.nodes && self.out_neighbors[i].binary_search(&j).is_ok()
    }

    /// All edges in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.out_neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, outs)| outs.iter().map(move |&j| (i, j)))
    }

    pub fn is_symmetric(&self) -> bool {
        self.edges().all(|(i, j)| self.has_edge(j, i))
    }

    /// Number of neighbours of `i` inside `set` (undirected degree in the
    /// subgraph induced by `set`).
    pub fn degree_within(&self, i: usize, set: &NodeSet) -> usize {
        self.out_neighbors[i]
            .iter()
            .filter(|&&j| set.contains(j))
            .count()
    }
}

/// Subset of `[0, M)`, stored as a membership mask plus a sorted index list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSet {
    mask: Vec<bool>,
    members: Vec<usize>,
}

impl NodeSet {
    pub fn empty(universe: usize) -> Self {
        NodeSet {
            mask: vec![false; universe],
            members: Vec::new(),
        }
    }

    pub fn full(universe: usize) -> Self {
        NodeSet {
            mask: vec![true; universe],
            members: (0..universe).collect(),
        }
    }

    pub fn from_indices(universe: usize, indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut set = NodeSet::empty(universe);
        for i in indices {
            if i >= universe {
                return Err(Error::Graph(format!(
                    "vertex {i} out of range for {universe} nodes"
                )));
            }
            set.mask[i] = true;
        }
        set.members = (0..universe).filter(|&i| set.mask[i]).collect();
        Ok(set)
    }

    pub fn universe(&self) -> usize {
        self.mask.len()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.mask.get(i).copied().unwrap_or(false)
    }

    /// Members in increasing order.
    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn insert(&mut self, i: usize) {
        if !self.mask[i] {
            self.mask[i] = true;
            let pos = self.members.partition_point(|&m| m < i);
            self.members.insert(pos, i);
        }
    }
}

/// Random geometric graph on the unit square.
///
/// Points are drawn uniformly; `i` and `j` are linked in both directions when
/// their distance is at most `radius`. Disconnected draws are discarded and
/// redrawn with `seed + 1`, `seed + 2`, ...
pub fn build_rgg(nodes: usize, radius: f64, seed: u64) -> Result<DirectedGraph> {
    if nodes == 0 {
        return Err(Error::InvalidArgument("graph needs at least one node".into()));
    }
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "radius must be positive, got {radius}"
        )));
    }
    for attempt in 0..RGG_MAX_ATTEMPTS {
        let mut stream = rng::stream(seed.wrapping_add(attempt));
        let points: Vec<(f64, f64)> = (0..nodes)
            .map(|_| (stream.random::<f64>(), stream.random::<f64>()))
            .collect();
        let r2 = radius * radius;
        let mut pairs = Vec::new();
        for i in 0..nodes {
            for j in (i + 1)..nodes {
                let dx = points[i].0 - points[j].0;
                let dy = points[i].1 - points[j].1;
                if dx * dx + dy * dy <= r2 {
                    pairs.push((i, j));
                }
            }
        }
        let g = DirectedGraph::undirected(nodes, pairs)?;
        if is_strongly_connected(&g) {
            return Ok(g);
        }
    }
    Err(Error::Graph(format!(
        "no strongly connected geometric graph on {nodes} nodes after {RGG_MAX_ATTEMPTS} draws; radius {radius} is too small"
    )))
}

/// Subgraph keeping only edges with both endpoints in `vertices`. The node
/// index space is unchanged; nodes outside the set become isolated.
pub fn induced_subgraph(g: &DirectedGraph, vertices: &NodeSet) -> Result<DirectedGraph> {
    if vertices.universe() != g.node_count() {
        return Err(Error::Graph(format!(
            "vertex set over {} nodes for a graph with {}",
            vertices.universe(),
            g.node_count()
        )));
    }
    DirectedGraph::from_edges(
        g.node_count(),
        g.edges()
            .filter(|&(i, j)| vertices.contains(i) && vertices.contains(j)),
    )
}

fn reaches_all(nodes: usize, adjacency: impl Fn(usize) -> Vec<usize>) -> bool {
    let mut seen = vec![false; nodes];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = queue.pop_front() {
        for v in adjacency(u) {
            if !seen[v] {
                seen[v] = true;
                count += 1;
                queue.push_back(v);
            }
        }
    }
    count == nodes
}

/// Two BFS passes from node 0, forward and on the reversed graph.
pub fn is_strongly_connected(g: &DirectedGraph) -> bool {
    let n = g.node_count();
    if n <= 1 {
        return true;
    }
    reaches_all(n, |u| g.out_neighbors(u).to_vec()) && reaches_all(n, |u| g.in_neighbors(u).to_vec())
}

/// Writes the edge list: a `M=<count>` header, then one `i j` line per edge.
pub fn write_edge_list<W: Write>(g: &DirectedGraph, mut out: W) -> Result<()> {
    let mut buf = String::new();
    writeln!(buf, "M={}", g.node_count()).expect("string write");
    for (i, j) in g.edges() {
        writeln!(buf, "{i} {j}").expect("string write");
    }
    out.write_all(buf.as_bytes())?;
    Ok(())
}

pub fn read_edge_list<R: BufRead>(input: R) -> Result<DirectedGraph> {
    let mut lines = input.lines().enumerate();
    let nodes = loop {
        let Some((no, line)) = lines.next() else {
            return Err(Error::Parse {
                line: 0,
                message: "missing M=<count> header".into(),
            });
        };
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let count = line.strip_prefix("M=").ok_or_else(|| Error::Parse {
            line: no + 1,
            message: format!("expected M=<count>, found {line:?}"),
        })?;
        break count.trim().parse::<usize>().map_err(|e| Error::Parse {
            line: no + 1,
            message: format!("bad node count: {e}"),
        })?;
    };
    let mut edges = Vec::new();
    for (no, line) in lines {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace().map(str::parse::<usize>);
        match (fields.next(), fields.next(), fields.next()) {
            (Some(Ok(i)), Some(Ok(j)), None) => edges.push((i, j)),
            _ => {
                return Err(Error::Parse {
                    line: no + 1,
                    message: format!("expected \"i j\", found {line:?}"),
                })
            }
        }
    }
    DirectedGraph::from_edges(nodes, edges).map_err(|e| Error::Parse {
        line: 0,
        message: e.to_string(),
    })
}
