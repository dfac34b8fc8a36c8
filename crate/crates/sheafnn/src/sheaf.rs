//! Cellular sheaves of vector spaces on graphs.
//!
//! A sheaf attaches a stalk `R^d` to every vertex and edge and a d x d
//! restriction map to each (vertex, incident edge) pair. The coboundary
//! operator sends vertex data to signed differences over edges, and the
//! sheaf Laplacian is its Gram operator `delta^T delta`. With identity
//! restriction maps and d = 1 this recovers the ordinary graph Laplacian
//! `D - A`, and the kernel of the Laplacian recovers the global sections.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::linalg::{inv_sqrt_psd, sym_eig, Matrix};

/// Which endpoint of a canonically oriented edge `(u, v)`, `u < v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endpoint {
    /// The smaller-index endpoint.
    U,
    /// The larger-index endpoint.
    V,
}

/// A cellular sheaf with uniform stalk dimension `d`: one d x d restriction
/// map per (edge, endpoint) pair, stored as `[u-side, v-side]` per edge in
/// edge order.
#[derive(Debug, Clone, PartialEq)]
pub struct CellularSheaf {
    graph: Graph,
    stalk_dim: usize,
    restriction: Vec<Matrix>,
}

impl CellularSheaf {
    /// The constant sheaf: every restriction map is the identity.
    pub fn constant(graph: Graph, stalk_dim: usize) -> Result<CellularSheaf> {
        if stalk_dim == 0 {
            return Err(Error::contract("stalk dimension must be at least 1".to_string()));
        }
        let restriction = vec![Matrix::identity(stalk_dim); 2 * graph.num_edges()];
        Ok(CellularSheaf {
            graph,
            stalk_dim,
            restriction,
        })
    }

    /// Builds a sheaf from explicit restriction maps, two per edge in edge
    /// order (u-side first).
    pub fn from_restrictions(
        graph: Graph,
        stalk_dim: usize,
        restriction: Vec<Matrix>,
    ) -> Result<CellularSheaf> {
        if stalk_dim == 0 {
            return Err(Error::contract("stalk dimension must be at least 1".to_string()));
        }
        if restriction.len() != 2 * graph.num_edges() {
            return Err(Error::contract(format!(
                "expected {} restriction maps (two per edge), got {}",
                2 * graph.num_edges(),
                restriction.len()
            )));
        }
        for (i, map) in restriction.iter().enumerate() {
            if map.shape() != (stalk_dim, stalk_dim) {
                return Err(Error::contract(format!(
                    "restriction map {} has shape {:?}, expected {}x{}",
                    i,
                    map.shape(),
                    stalk_dim,
                    stalk_dim
                )));
            }
            if !map.is_finite() {
                return Err(Error::numeric(format!(
                    "restriction map {i} contains non-finite entries"
                )));
            }
        }
        Ok(CellularSheaf {
            graph,
            stalk_dim,
            restriction,
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn stalk_dim(&self) -> usize {
        self.stalk_dim
    }

    pub fn restriction(&self, edge: usize, endpoint: Endpoint) -> &Matrix {
        let offset = match endpoint {
            Endpoint::U => 0,
            Endpoint::V => 1,
        };
        &self.restriction[2 * edge + offset]
    }

    /// The coboundary operator as an `|E| d x |V| d` matrix: edge block row
    /// `e` carries `+F_{u <= e}` in u's column block and `-F_{v <= e}` in
    /// v's, following the canonical `u < v` orientation.
    pub fn coboundary(&self) -> Matrix {
        let d = self.stalk_dim;
        let mut delta = Matrix::zeros(self.graph.num_edges() * d, self.graph.num_nodes() * d);
        for (e, &(u, v)) in self.graph.edges().iter().enumerate() {
            delta.add_block(e * d, u * d, self.restriction(e, Endpoint::U), 1.0);
            delta.add_block(e * d, v * d, self.restriction(e, Endpoint::V), -1.0);
        }
        delta
    }

    /// The sheaf Laplacian `delta^T delta`, a symmetric PSD operator on
    /// vertex stalks.
    pub fn laplacian(&self) -> Matrix {
        let delta = self.coboundary();
        delta
            .transpose()
            .matmul(&delta)
            .expect("coboundary dimensions are consistent by construction")
    }

    /// Normalized sheaf Laplacian `D^{-1/2} L D^{-1/2}`, where `D` is the
    /// block diagonal of `L` in d x d vertex blocks and each block inverse
    /// square root is regularized by `eps`.
    pub fn normalized_laplacian(&self, eps: f64) -> Result<Matrix> {
        let d = self.stalk_dim;
        let n = self.graph.num_nodes();
        let lap = self.laplacian();
        let mut scaler = Matrix::zeros(n * d, n * d);
        for v in 0..n {
            let block = lap.block(v * d, v * d, d, d);
            let inv = inv_sqrt_psd(&block, eps)?;
            scaler.set_block(v * d, v * d, &inv);
        }
        scaler.matmul(&lap)?.matmul(&scaler)
    }

    /// Orthonormal basis of the near-kernel of the Laplacian: eigenvectors
    /// whose eigenvalue is below `tol` relative to the largest eigenvalue.
    /// The columns span the global sections of the sheaf.
    pub fn global_sections(&self, tol: f64) -> Result<Matrix> {
        let lap = self.laplacian();
        let (eigenvalues, vectors) = sym_eig(&lap)?;
        let top = eigenvalues.last().copied().unwrap_or(0.0).max(1.0);
        let cutoff = tol * top;
        let dim = eigenvalues.iter().take_while(|&&l| l < cutoff).count();
        Ok(vectors.block(0, 0, lap.rows(), dim))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_edge() -> Graph {
        Graph::with_edges(2, &[(0, 1)]).unwrap()
    }

    fn scaled_k2() -> CellularSheaf {
        // d = 1, F_u = 2, F_v = 3 on a single edge.
        CellularSheaf::from_restrictions(
            single_edge(),
            1,
            vec![
                Matrix::from_vec(1, 1, vec![2.0]).unwrap(),
                Matrix::from_vec(1, 1, vec![3.0]).unwrap(),
            ],
        )
        .unwrap()
    }

    fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Graph {
        let mut g = Graph::new(n);
        for u in 0..n {
            for v in (u + 1)..n {
                if rng.gen_bool(p) {
                    g.add_edge(u, v).unwrap();
                }
            }
        }
        g
    }

    fn random_sheaf(rng: &mut ChaCha8Rng, g: Graph, d: usize) -> CellularSheaf {
        let maps = (0..2 * g.num_edges())
            .map(|_| Matrix::from_fn(d, d, |_, _| rng.gen_range(-1.5..1.5)))
            .collect();
        CellularSheaf::from_restrictions(g, d, maps).unwrap()
    }

    #[test]
    fn constant_sheaf_maps_are_identities() {
        for (graph, d) in [
            (single_edge(), 1usize),
            (single_edge(), 2),
            (Graph::with_edges(3, &[(0, 1), (0, 2), (1, 2)]).unwrap(), 3),
        ] {
            let s = CellularSheaf::constant(graph, d).unwrap();
            for e in 0..s.graph().num_edges() {
                assert_eq!(*s.restriction(e, Endpoint::U), Matrix::identity(d));
                assert_eq!(*s.restriction(e, Endpoint::V), Matrix::identity(d));
            }
        }
    }

    #[test]
    fn coboundary_is_incidence_for_constant_sheaf() {
        let s = CellularSheaf::constant(single_edge(), 1).unwrap();
        assert_eq!(
            s.coboundary(),
            Matrix::from_rows(&[vec![1.0, -1.0]]).unwrap()
        );
    }

    #[test]
    fn coboundary_uses_restriction_maps() {
        assert_eq!(
            scaled_k2().coboundary(),
            Matrix::from_rows(&[vec![2.0, -3.0]]).unwrap()
        );
    }

    #[test]
    fn coboundary_path_graph() {
        let g = Graph::with_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let s = CellularSheaf::constant(g, 1).unwrap();
        assert_eq!(
            s.coboundary(),
            Matrix::from_rows(&[vec![1.0, -1.0, 0.0], vec![0.0, 1.0, -1.0]]).unwrap()
        );
    }

    #[test]
    fn laplacian_single_edge_constant() {
        let s = CellularSheaf::constant(single_edge(), 1).unwrap();
        assert_eq!(
            s.laplacian(),
            Matrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap()
        );
    }

    #[test]
    fn laplacian_single_edge_scaled() {
        assert_eq!(
            scaled_k2().laplacian(),
            Matrix::from_rows(&[vec![4.0, -6.0], vec![-6.0, 9.0]]).unwrap()
        );
    }

    #[test]
    fn laplacian_triangle_constant() {
        let g = Graph::with_edges(3, &[(0, 1), (0, 2), (1, 2)]).unwrap();
        let s = CellularSheaf::constant(g.clone(), 1).unwrap();
        let want = g.degree_matrix().sub(&g.adjacency()).unwrap();
        assert_eq!(s.laplacian(), want);
    }

    #[test]
    fn constant_sheaf_reduces_to_graph_laplacian_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..30 {
            let n = rng.gen_range(2..=12);
            let g = random_graph(&mut rng, n, 0.4);
            let want = g.degree_matrix().sub(&g.adjacency()).unwrap();
            let s = CellularSheaf::constant(g, 1).unwrap();
            // Integer-valued arithmetic: bitwise equality.
            assert_eq!(s.laplacian(), want);
        }
    }

    #[test]
    fn normalized_laplacian_constant_single_edge() {
        let s = CellularSheaf::constant(single_edge(), 1).unwrap();
        let got = s.normalized_laplacian(0.0).unwrap();
        let want = Matrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        assert!(got.sub(&want).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn normalized_laplacian_scaled_k2() {
        // D = diag(4, 9), so normalization rescales to the unweighted case.
        let got = scaled_k2().normalized_laplacian(0.0).unwrap();
        let want = Matrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        assert!(got.sub(&want).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn normalized_laplacian_isolated_node_is_finite() {
        let g = Graph::with_edges(3, &[(0, 1)]).unwrap();
        let s = CellularSheaf::constant(g, 1).unwrap();
        let got = s.normalized_laplacian(1e-6).unwrap();
        assert!(got.is_finite());
        assert_eq!(got.get(2, 2), 0.0);
    }

    #[test]
    fn global_sections_connected_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for d in 1..=3 {
            let g = Graph::with_edges(4, &[(0, 1), (1, 2), (2, 3)]).unwrap();
            let s = CellularSheaf::constant(g, d).unwrap();
            let sections = s.global_sections(1e-8).unwrap();
            assert_eq!(sections.cols(), d);
            let _ = &mut rng;
        }
    }

    #[test]
    fn global_sections_two_components() {
        let g = Graph::with_edges(4, &[(0, 1), (2, 3)]).unwrap();
        let s = CellularSheaf::constant(g, 1).unwrap();
        assert_eq!(s.global_sections(1e-8).unwrap().cols(), 2);
    }

    #[test]
    fn global_sections_scaled_k2_direction() {
        let sections = scaled_k2().global_sections(1e-8).unwrap();
        assert_eq!(sections.cols(), 1);
        // Kernel of [2, -3]: direction proportional to (3, 2)/sqrt(13).
        let norm = 13.0_f64.sqrt();
        let dot = sections.get(0, 0) * 3.0 / norm + sections.get(1, 0) * 2.0 / norm;
        assert!((dot.abs() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn laplacian_is_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..15 {
            let n = rng.gen_range(2..=8);
            let d = rng.gen_range(1..=3);
            let g = random_graph(&mut rng, n, 0.5);
            let s = random_sheaf(&mut rng, g, d);
            let lap = s.laplacian();
            assert!(lap.asymmetry() < 1e-12);
            for _ in 0..100 {
                let x = Matrix::from_fn(lap.rows(), 1, |_, _| rng.gen_range(-1.0..1.0));
                let quad = x.transpose().matmul(&lap).unwrap().matmul(&x).unwrap();
                assert!(quad.get(0, 0) >= -1e-10);
            }
        }
    }

    #[test]
    fn orientation_flip_leaves_laplacian_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let n = rng.gen_range(2..=8);
            let d = rng.gen_range(1..=3);
            let g = random_graph(&mut rng, n, 0.5);
            let s = random_sheaf(&mut rng, g, d);
            let delta = s.coboundary();
            let lap = s.laplacian();

            let mut flipped = delta.clone();
            for e in 0..s.graph().num_edges() {
                if rng.gen_bool(0.5) {
                    for r in 0..d {
                        for c in 0..flipped.cols() {
                            let val = flipped.get(e * d + r, c);
                            flipped.set(e * d + r, c, -val);
                        }
                    }
                }
            }
            let lap_flipped = flipped.transpose().matmul(&flipped).unwrap();
            assert!(lap.sub(&lap_flipped).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_dimension_counts_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..15 {
            let n = rng.gen_range(2..=8);
            let d = rng.gen_range(1..=3);
            let g = random_graph(&mut rng, n, 0.3);
            let components = g.connected_components();
            let s = CellularSheaf::constant(g, d).unwrap();
            let sections = s.global_sections(1e-8).unwrap();
            assert_eq!(sections.cols(), d * components);
        }
    }

    #[test]
    fn normalized_spectrum_within_standard_bound() {
        // Constant sheaf, d = 1, no isolated nodes: eigenvalues in [0, 2].
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..10 {
            let n = rng.gen_range(2..=10);
            let mut g = random_graph(&mut rng, n, 0.5);
            for v in 0..n {
                if g.degree(v).unwrap() == 0 {
                    let w = if v == 0 { 1 } else { v - 1 };
                    let _ = g.add_edge(v.min(w), v.max(w));
                }
            }
            let s = CellularSheaf::constant(g, 1).unwrap();
            let norm = s.normalized_laplacian(0.0).unwrap();
            let (eigenvalues, _) = sym_eig(&norm).unwrap();
            assert!(eigenvalues.first().copied().unwrap() >= -1e-8);
            assert!(eigenvalues.last().copied().unwrap() <= 2.0 + 1e-8);
        }
    }
}
