//! Neighbor-graph adjacency and connected components.

use crate::error::{Error, Result};

/// Disjoint-set forest with path halving and union by size.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Returns false when `a` and `b` were already joined.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        true
    }

    /// Component ids `0..C`, numbered by each component's smallest element.
    pub fn component_ids(&mut self) -> Vec<usize> {
        let n = self.parent.len();
        let mut root_id = vec![usize::MAX; n];
        let mut ids = Vec::with_capacity(n);
        let mut next = 0;
        for x in 0..n {
            let r = self.find(x);
            if root_id[r] == usize::MAX {
                root_id[r] = next;
                next += 1;
            }
            ids.push(root_id[r]);
        }
        ids
    }
}

/// Undirected graph induced by a per-node neighbor choice: `i ~ j` iff
/// `j = κ_i`, `i = κ_j`, or both have the same neighbor.
///
/// Only `κ` is stored. The shared-neighbor clause can generate a quadratic
/// number of edges around a popular node, so the explicit list is produced on
/// demand by [`NeighborGraph::edges`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborGraph {
    kappa: Vec<Option<usize>>,
}

pub fn build_adjacency(kappa: &[Option<usize>]) -> Result<NeighborGraph> {
    let n = kappa.len();
    for (i, k) in kappa.iter().enumerate() {
        match *k {
            Some(j) if j >= n => {
                return Err(Error::InvalidInput(format!(
                    "neighbor {j} of node {i} is out of range 0..{n}"
                )))
            }
            Some(j) if j == i => {
                return Err(Error::InvalidInput(format!("node {i} is its own neighbor")))
            }
            _ => {}
        }
    }
    Ok(NeighborGraph {
        kappa: kappa.to_vec(),
    })
}

impl NeighborGraph {
    pub fn node_count(&self) -> usize {
        self.kappa.len()
    }

    pub fn kappa(&self) -> &[Option<usize>] {
        &self.kappa
    }

    /// Every edge `(i, j)` with `i < j`, sorted and without duplicates.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.kappa.len();
        let mut edges = Vec::new();
        let mut sources: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, k) in self.kappa.iter().enumerate() {
            if let Some(j) = *k {
                edges.push((i.min(j), i.max(j)));
                sources[j].push(i);
            }
        }
        for group in &sources {
            for (a, &i) in group.iter().enumerate() {
                for &j in &group[a + 1..] {
                    edges.push((i.min(j), i.max(j)));
                }
            }
        }
        edges.sort_unstable();
        edges.dedup();
        edges
    }
}

/// Component id per node, numbered in order of each component's smallest node.
pub fn connected_components(g: &NeighborGraph) -> Vec<usize> {
    // the shared-neighbor edges never add connectivity beyond the path i, κ_i, j
    let mut uf = UnionFind::new(g.node_count());
    for (i, k) in g.kappa.iter().enumerate() {
        if let Some(j) = *k {
            uf.union(i, j);
        }
    }
    uf.component_ids()
}

/// Components of an arbitrary undirected edge list over `n` nodes, with the
/// same numbering rule as [`connected_components`].
pub fn components_from_edges(n: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    let mut uf = UnionFind::new(n);
    for &(a, b) in edges {
        uf.union(a, b);
    }
    uf.component_ids()
}
