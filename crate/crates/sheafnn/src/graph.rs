//! Undirected graphs with a canonical edge orientation (u < v) and the
//! cosine-similarity graph builder used by the experiment pipeline: node
//! pairs are ranked by similarity and edges inserted greedily until the
//! graph becomes connected.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Undirected graph. Edges are stored as `(u, v)` with `u < v`, in
/// insertion order; the similarity builder relies on that order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    edge_set: HashSet<(usize, usize)>,
}

impl Graph {
    pub fn new(num_nodes: usize) -> Graph {
        Graph {
            num_nodes,
            edges: Vec::new(),
            edge_set: HashSet::new(),
        }
    }

    pub fn with_edges(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Graph> {
        let mut g = Graph::new(num_nodes);
        for &(u, v) in edges {
            g.add_edge(u, v)?;
        }
        Ok(g)
    }

    /// Inserts the edge `{u, v}`, normalizing to `u < v`. Self-loops and
    /// duplicates are rejected.
    pub fn add_edge(&mut self, u: usize, v: usize) -> Result<()> {
        if u == v {
            return Err(Error::contract(format!("self-loop at node {u}")));
        }
        if u >= self.num_nodes || v >= self.num_nodes {
            return Err(Error::contract(format!(
                "edge ({u}, {v}) out of range for {} nodes",
                self.num_nodes
            )));
        }
        let key = (u.min(v), u.max(v));
        if !self.edge_set.insert(key) {
            return Err(Error::contract(format!(
                "duplicate edge ({}, {})",
                key.0, key.1
            )));
        }
        self.edges.push(key);
        Ok(())
    }

    #[inline]
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    #[inline]
    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn degree(&self, v: usize) -> Result<usize> {
        if v >= self.num_nodes {
            return Err(Error::contract(format!(
                "node index {v} out of range for {} nodes",
                self.num_nodes
            )));
        }
        Ok(self.edges.iter().filter(|&&(a, b)| a == v || b == v).count())
    }

    /// Sorted neighbor lists for every node.
    pub fn adjacency_lists(&self) -> Vec<Vec<usize>> {
        let mut lists = vec![Vec::new(); self.num_nodes];
        for &(u, v) in &self.edges {
            lists[u].push(v);
            lists[v].push(u);
        }
        for list in &mut lists {
            list.sort_unstable();
        }
        lists
    }

    pub fn is_connected(&self) -> bool {
        self.connected_components() <= 1
    }

    pub fn connected_components(&self) -> usize {
        if self.num_nodes == 0 {
            return 0;
        }
        let lists = self.adjacency_lists();
        let mut seen = vec![false; self.num_nodes];
        let mut components = 0;
        let mut stack = Vec::new();
        for start in 0..self.num_nodes {
            if seen[start] {
                continue;
            }
            components += 1;
            seen[start] = true;
            stack.push(start);
            while let Some(v) = stack.pop() {
                for &w in &lists[v] {
                    if !seen[w] {
                        seen[w] = true;
                        stack.push(w);
                    }
                }
            }
        }
        components
    }

    /// Symmetric 0/1 adjacency matrix.
    pub fn adjacency(&self) -> Matrix {
        let mut a = Matrix::zeros(self.num_nodes, self.num_nodes);
        for &(u, v) in &self.edges {
            a.set(u, v, 1.0);
            a.set(v, u, 1.0);
        }
        a
    }

    /// Diagonal degree matrix.
    pub fn degree_matrix(&self) -> Matrix {
        let mut d = Matrix::zeros(self.num_nodes, self.num_nodes);
        for &(u, v) in &self.edges {
            d.add_at(u, u, 1.0);
            d.add_at(v, v, 1.0);
        }
        d
    }

    /// Graph Laplacian `D - A`.
    pub fn laplacian(&self) -> Matrix {
        let mut l = self.degree_matrix();
        for &(u, v) in &self.edges {
            l.set(u, v, -1.0);
            l.set(v, u, -1.0);
        }
        l
    }
}

/// A graph together with per-node features and optional binary labels.
#[derive(Debug, Clone)]
pub struct FeaturedGraph {
    pub graph: Graph,
    pub features: Matrix,
    pub labels: Option<Vec<u8>>,
}

impl FeaturedGraph {
    pub fn new(graph: Graph, features: Matrix, labels: Option<Vec<u8>>) -> Result<FeaturedGraph> {
        if features.rows() != graph.num_nodes() {
            return Err(Error::contract(format!(
                "feature rows {} do not match node count {}",
                features.rows(),
                graph.num_nodes()
            )));
        }
        if let Some(labels) = &labels {
            if labels.len() != graph.num_nodes() {
                return Err(Error::contract(format!(
                    "label count {} does not match node count {}",
                    labels.len(),
                    graph.num_nodes()
                )));
            }
            if let Some(bad) = labels.iter().find(|&&l| l > 1) {
                return Err(Error::validation(format!("label {bad} is not in {{0, 1}}")));
            }
        }
        Ok(FeaturedGraph {
            graph,
            features,
            labels,
        })
    }
}

struct UnionFind {
    parent: Vec<usize>,
    components: usize,
}

impl UnionFind {
    fn new(n: usize) -> UnionFind {
        UnionFind {
            parent: (0..n).collect(),
            components: n,
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra != rb {
            self.parent[ra] = rb;
            self.components -= 1;
        }
    }
}

/// Builds the similarity graph: every node pair is ranked by cosine
/// similarity (ties broken by ascending `(u, v)`) and edges are inserted in
/// that order, stopping at the first edge that makes the graph connected.
pub fn build_similarity_graph(features: &Matrix) -> Result<Graph> {
    let n = features.rows();
    if n < 2 {
        return Err(Error::contract(format!(
            "similarity graph needs at least 2 rows, got {n}"
        )));
    }
    let mut norms = Vec::with_capacity(n);
    for i in 0..n {
        let ss: f64 = features.row(i).iter().map(|x| x * x).sum();
        if ss < 1e-300 {
            return Err(Error::contract(format!(
                "feature row {i} has zero norm; cosine similarity is undefined"
            )));
        }
        norms.push(ss.sqrt());
    }

    let mut ranked: Vec<(f64, usize, usize)> = Vec::with_capacity(n * (n - 1) / 2);
    for u in 0..n {
        for v in (u + 1)..n {
            let dot: f64 = features
                .row(u)
                .iter()
                .zip(features.row(v).iter())
                .map(|(a, b)| a * b)
                .sum();
            ranked.push((dot / (norms[u] * norms[v]), u, v));
        }
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut graph = Graph::new(n);
    let mut uf = UnionFind::new(n);
    for (_, u, v) in ranked {
        graph.add_edge(u, v)?;
        uf.union(u, v);
        if uf.components == 1 {
            return Ok(graph);
        }
    }
    // All pairs inserted without connecting is impossible for n >= 2.
    Err(Error::numeric(
        "similarity graph failed to connect after inserting all pairs".to_string(),
    ))
}
