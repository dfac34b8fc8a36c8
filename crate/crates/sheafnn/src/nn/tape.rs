//! Reverse-mode differentiation over dense matrix operations.
//!
//! A [`Tape`] records the forward pass as an append-only list of nodes in
//! topological order; [`Tape::backward`] walks the list once in reverse and
//! accumulates gradients into a [`ParamSet`]. Operations cache whatever the
//! backward pass needs (dropout masks, normalization statistics, per-block
//! eigendecompositions) at record time.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{sym_eig, Matrix};

/// Variance floor shared by both normalization stages.
pub const NORM_VARIANCE_FLOOR: f64 = 1e-5;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Val(usize);

/// A trainable tensor: value, gradient accumulator, and a name for
/// diagnostics.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

/// Owns all parameters of a model. Tape leaves reference parameters by
/// index, and `backward` accumulates into the matching `grad` slots.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    items: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> usize {
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.items.push(Param {
            name: name.into(),
            value,
            grad,
        });
        self.items.len() - 1
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: usize) -> &Param {
        &self.items[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Param {
        &mut self.items[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.items.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.items.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.items {
            p.grad = Matrix::zeros(p.value.rows(), p.value.cols());
        }
    }

    /// Total number of scalar entries across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.items
            .iter()
            .map(|p| p.value.rows() * p.value.cols())
            .sum()
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(&self) -> f64 {
        self.items
            .iter()
            .map(|p| p.grad.as_slice().iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Running statistics for the batch-normalization stage in eval mode.
#[derive(Debug, Clone)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(dim: usize) -> RunningStats {
        RunningStats {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            momentum: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActKind {
    Relu,
    Elu,
    LeakyRelu(f64),
}

#[derive(Debug, Clone)]
struct NormCache {
    normalized: Matrix,
    inv_std: Vec<f64>,
    floored: Vec<bool>,
    training: bool,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(usize),
    MatMul(Val, Val),
    Transpose(Val),
    MulConstLeft(Matrix, Val),
    Add(Val, Val),
    AddScaled(Val, Val, f64),
    Scale(Val, f64),
    AddBiasRow(Val, Val),
    Activation(Val, ActKind),
    Dropout(Val, Vec<f64>),
    RowNormalize(Val, Vec<f64>, Vec<bool>),
    ConcatCols(Val, Val),
    GatherRows(Val, Vec<usize>),
    SegmentSoftmax(Val, Vec<usize>),
    AttnAggregate {
        alpha: Val,
        h: Val,
        src: Vec<usize>,
        dst: Vec<usize>,
    },
    BatchNorm {
        x: Val,
        gamma: Val,
        beta: Val,
        cache: Box<NormCache>,
    },
    LayerNorm {
        x: Val,
        gamma: Val,
        beta: Val,
        cache: Box<NormCache>,
    },
    ReshapeStalks(Val, usize),
    FlattenStalks(Val, usize),
    EdgeFeatures {
        h: Val,
        edges: Vec<(usize, usize)>,
        d: usize,
    },
    LaplacianFromMaps {
        maps: Val,
        edges: Vec<(usize, usize)>,
        d: usize,
    },
    BlockInvSqrt {
        l: Val,
        d: usize,
        eps: f64,
        cache: Vec<(Vec<f64>, Matrix)>,
    },
    BlockMulLeft {
        blocks: Val,
        x: Val,
        d: usize,
    },
    KronLeft {
        w: Val,
        x: Val,
        d: usize,
    },
    BceWithLogits {
        logits: Val,
        rows: Vec<usize>,
        targets: Vec<f64>,
    },
    WeightedSum(Matrix, Val),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Append-only record of a forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Val) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> Val {
        self.nodes.push(Node { value, op });
        Val(self.nodes.len() - 1)
    }

    fn shape_err(
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    ) -> Error {
        Error::Shape {
            op,
            lhs_rows: lhs.0,
            lhs_cols: lhs.1,
            rhs_rows: rhs.0,
            rhs_cols: rhs.1,
        }
    }

    pub fn input(&mut self, value: Matrix) -> Val {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: usize, value: Matrix) -> Val {
        self.push(value, Op::Param(id))
    }

    pub fn matmul(&mut self, a: Val, b: Val) -> Result<Val> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Val) -> Val {
        let value = self.value(x).transpose();
        self.push(value, Op::Transpose(x))
    }

    /// Product with a constant (non-differentiated) left factor, used for
    /// fixed propagation matrices.
    pub fn mul_const_left(&mut self, c: &Matrix, x: Val) -> Result<Val> {
        let value = c.matmul(self.value(x))?;
        Ok(self.push(value, Op::MulConstLeft(c.clone(), x)))
    }

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// `a + alpha * b`.
    pub fn add_scaled(&mut self, a: Val, b: Val, alpha: f64) -> Result<Val> {
        let mut value = self.value(a).clone();
        value.add_scaled_assign(self.value(b), alpha)?;
        Ok(self.push(value, Op::AddScaled(a, b, alpha)))
    }

    pub fn scale(&mut self, x: Val, c: f64) -> Val {
        let value = self.value(x).scale(c);
        self.push(value, Op::Scale(x, c))
    }

    /// Broadcast-add a `1 x f` bias row to every row of `x`.
    pub fn add_bias_row(&mut self, x: Val, bias: Val) -> Result<Val> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Self::shape_err("add_bias_row", xv.shape(), bv.shape()));
        }
        let mut value = xv.clone();
        for i in 0..value.rows() {
            for j in 0..value.cols() {
                value.add_at(i, j, bv.get(0, j));
            }
        }
        Ok(self.push(value, Op::AddBiasRow(x, bias)))
    }

    pub fn activation(&mut self, x: Val, kind: ActKind) -> Val {
        let xv = self.value(x);
        let value = Matrix::from_fn(xv.rows(), xv.cols(), |i, j| {
            let z = xv.get(i, j);
            match kind {
                ActKind::Relu => z.max(0.0),
                ActKind::Elu => {
                    if z > 0.0 {
                        z
                    } else {
                        z.exp() - 1.0
                    }
                }
                ActKind::LeakyRelu(slope) => {
                    if z > 0.0 {
                        z
                    } else {
                        slope * z
                    }
                }
            }
        });
        self.push(value, Op::Activation(x, kind))
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - rate)` so the
    /// expected output equals the input. `rate == 0` records nothing.
    pub fn dropout(&mut self, x: Val, rate: f64, rng: &mut ChaCha8Rng) -> Val {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - rate);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.rows() * xv.cols())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data: Vec<f64> = xv
            .as_slice()
            .iter()
            .zip(mask.iter())
            .map(|(v, m)| v * m)
            .collect();
        let value = Matrix::from_vec(xv.rows(), xv.cols(), data).expect("mask matches shape");
        self.push(value, Op::Dropout(x, mask))
    }

    /// Per-row L2 normalization with a `1e-12` norm floor.
    pub fn row_normalize(&mut self, x: Val) -> Val {
        const FLOOR: f64 = 1e-12;
        let xv = self.value(x);
        let mut norms = Vec::with_capacity(xv.rows());
        let mut floored = Vec::with_capacity(xv.rows());
        let mut value = xv.clone();
        for i in 0..xv.rows() {
            let norm = xv.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            let hit_floor = norm < FLOOR;
            let used = if hit_floor { FLOOR } else { norm };
            for out in value.row_mut(i) {
                *out /= used;
            }
            norms.push(used);
            floored.push(hit_floor);
        }
        self.push(value, Op::RowNormalize(x, norms, floored))
    }

    pub fn concat_cols(&mut self, a: Val, b: Val) -> Result<Val> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Self::shape_err("concat_cols", av.shape(), bv.shape()));
        }
        let value = Matrix::from_fn(av.rows(), av.cols() + bv.cols(), |i, j| {
            if j < av.cols() {
                av.get(i, j)
            } else {
                bv.get(i, j - av.cols())
            }
        });
        Ok(self.push(value, Op::ConcatCols(a, b)))
    }

    pub fn gather_rows(&mut self, x: Val, rows: Vec<usize>) -> Result<Val> {
        let xv = self.value(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= xv.rows()) {
            return Err(Error::contract(format!(
                "gather_rows index {bad} out of range for {} rows",
                xv.rows()
            )));
        }
        let value = Matrix::from_fn(rows.len(), xv.cols(), |i, j| xv.get(rows[i], j));
        Ok(self.push(value, Op::GatherRows(x, rows)))
    }

    /// Softmax within contiguous segments of a column vector. `offsets` has
    /// one more entry than there are segments and must cover all rows.
    pub fn segment_softmax(&mut self, x: Val, offsets: Vec<usize>) -> Result<Val> {
        let xv = self.value(x);
        if xv.cols() != 1 || offsets.last().copied() != Some(xv.rows()) {
            return Err(Error::contract(format!(
                "segment_softmax expects a column vector covered by offsets, got {:?} with last offset {:?}",
                xv.shape(),
                offsets.last()
            )));
        }
        let mut value = xv.clone();
        for seg in offsets.windows(2) {
            let (lo, hi) = (seg[0], seg[1]);
            if lo == hi {
                continue;
            }
            let max = (lo..hi).map(|i| xv.get(i, 0)).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for i in lo..hi {
                let e = (xv.get(i, 0) - max).exp();
                value.set(i, 0, e);
                total += e;
            }
            for i in lo..hi {
                let v = value.get(i, 0) / total;
                value.set(i, 0, v);
            }
        }
        Ok(self.push(value, Op::SegmentSoftmax(x, offsets)))
    }

    /// Attention-weighted aggregation: `out[dst_k] += alpha_k * h[src_k]`.
    pub fn attn_aggregate(
        &mut self,
        alpha: Val,
        h: Val,
        src: Vec<usize>,
        dst: Vec<usize>,
    ) -> Result<Val> {
        let (av, hv) = (self.value(alpha), self.value(h));
        if av.cols() != 1 || av.rows() != src.len() || src.len() != dst.len() {
            return Err(Error::contract(format!(
                "attn_aggregate: alpha {:?} must be one weight per edge ({} edges)",
                av.shape(),
                src.len()
            )));
        }
        let mut value = Matrix::zeros(hv.rows(), hv.cols());
        for k in 0..src.len() {
            let a = av.get(k, 0);
            for j in 0..hv.cols() {
                value.add_at(dst[k], j, a * hv.get(src[k], j));
            }
        }
        Ok(self.push(value, Op::AttnAggregate { alpha, h, src, dst }))
    }

    /// Feature-wise standardization over rows (batch stage). In training
    /// mode batch statistics are used and `state` is updated; in eval mode
    /// `state` provides the statistics. Variance is floored at
    /// [`NORM_VARIANCE_FLOOR`].
    pub fn batch_norm(
        &mut self,
        x: Val,
        gamma: Val,
        beta: Val,
        training: bool,
        state: &mut RunningStats,
    ) -> Result<Val> {
        let xv = self.value(x);
        let (n, f) = xv.shape();
        self.check_affine_shapes("batch_norm", f, gamma, beta)?;
        if state.mean.len() != f {
            return Err(Error::contract(format!(
                "batch_norm running stats cover {} features, input has {f}",
                state.mean.len()
            )));
        }
        let (mean, var) = if training {
            let mut mean = vec![0.0; f];
            let mut var = vec![0.0; f];
            for j in 0..f {
                let mut s = 0.0;
                for i in 0..n {
                    s += xv.get(i, j);
                }
                mean[j] = s / n as f64;
                let mut v = 0.0;
                for i in 0..n {
                    let d = xv.get(i, j) - mean[j];
                    v += d * d;
                }
                var[j] = v / n as f64;
            }
            let m = state.momentum;
            for j in 0..f {
                state.mean[j] = (1.0 - m) * state.mean[j] + m * mean[j];
                let unbiased = if n > 1 {
                    var[j] * n as f64 / (n as f64 - 1.0)
                } else {
                    var[j]
                };
                state.var[j] = (1.0 - m) * state.var[j] + m * unbiased;
            }
            (mean, var)
        } else {
            (state.mean.clone(), state.var.clone())
        };

        let inv_std: Vec<f64> = var
            .iter()
            .map(|&v| 1.0 / v.max(NORM_VARIANCE_FLOOR).sqrt())
            .collect();
        let floored: Vec<bool> = var.iter().map(|&v| v < NORM_VARIANCE_FLOOR).collect();
        let xv = self.value(x);
        let normalized = Matrix::from_fn(n, f, |i, j| (xv.get(i, j) - mean[j]) * inv_std[j]);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let value = Matrix::from_fn(n, f, |i, j| normalized.get(i, j) * gv.get(0, j) + bv.get(0, j));
        let cache = Box::new(NormCache {
            normalized,
            inv_std,
            floored,
            training,
        });
        Ok(self.push(value, Op::BatchNorm { x, gamma, beta, cache }))
    }

    /// Per-row standardization (layer stage) with per-feature affine
    /// parameters. Uses the same variance floor as the batch stage.
    pub fn layer_norm(&mut self, x: Val, gamma: Val, beta: Val) -> Result<Val> {
        let xv = self.value(x);
        let (n, f) = xv.shape();
        self.check_affine_shapes("layer_norm", f, gamma, beta)?;
        let mut inv_std = Vec::with_capacity(n);
        let mut floored = Vec::with_capacity(n);
        let mut normalized = Matrix::zeros(n, f);
        for i in 0..n {
            let mean = xv.row(i).iter().sum::<f64>() / f as f64;
            let var = xv.row(i).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f as f64;
            let s = 1.0 / var.max(NORM_VARIANCE_FLOOR).sqrt();
            for j in 0..f {
                normalized.set(i, j, (xv.get(i, j) - mean) * s);
            }
            inv_std.push(s);
            floored.push(var < NORM_VARIANCE_FLOOR);
        }
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let value = Matrix::from_fn(n, f, |i, j| normalized.get(i, j) * gv.get(0, j) + bv.get(0, j));
        let cache = Box::new(NormCache {
            normalized,
            inv_std,
            floored,
            training: true,
        });
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, cache }))
    }

    fn check_affine_shapes(&self, op: &'static str, f: usize, gamma: Val, beta: Val) -> Result<()> {
        for v in [gamma, beta] {
            let shape = self.value(v).shape();
            if shape != (1, f) {
                return Err(Error::contract(format!(
                    "{op}: affine parameter has shape {shape:?}, expected (1, {f})"
                )));
            }
        }
        Ok(())
    }

    /// Reinterprets each row of an `n x (d*f)` matrix as a `d x f` stalk
    /// block, producing `n*d x f`.
    pub fn reshape_stalks(&mut self, x: Val, d: usize) -> Result<Val> {
        let xv = self.value(x);
        if d == 0 || xv.cols() % d != 0 {
            return Err(Error::contract(format!(
                "reshape_stalks: {} columns not divisible by stalk dimension {d}",
                xv.cols()
            )));
        }
        let f = xv.cols() / d;
        let value = Matrix::from_fn(xv.rows() * d, f, |i, j| xv.get(i / d, (i % d) * f + j));
        Ok(self.push(value, Op::ReshapeStalks(x, d)))
    }

    /// Inverse of [`Tape::reshape_stalks`]: `n*d x f` to `n x (d*f)`.
    pub fn flatten_stalks(&mut self, x: Val, d: usize) -> Result<Val> {
        let xv = self.value(x);
        if d == 0 || xv.rows() % d != 0 {
            return Err(Error::contract(format!(
                "flatten_stalks: {} rows not divisible by stalk dimension {d}",
                xv.rows()
            )));
        }
        let f = xv.cols();
        let value = Matrix::from_fn(xv.rows() / d, d * f, |i, j| xv.get(i * d + j / f, j % f));
        Ok(self.push(value, Op::FlattenStalks(x, d)))
    }

    /// Concatenated endpoint stalk features for both sides of every edge.
    /// For edge `(u, v)` row `2e` is `[vec(h_u) | vec(h_v)]` and row
    /// `2e + 1` is `[vec(h_v) | vec(h_u)]`, with `vec` the row-major
    /// flattening of a node's `d x f` block.
    pub fn edge_features(&mut self, h: Val, edges: &[(usize, usize)], d: usize) -> Result<Val> {
        let hv = self.value(h);
        if d == 0 || hv.rows() % d != 0 {
            return Err(Error::contract(format!(
                "edge_features: {} rows not divisible by stalk dimension {d}",
                hv.rows()
            )));
        }
        let f = hv.cols();
        let block = |node: usize, k: usize| hv.get(node * d + k / f, k % f);
        let value = Matrix::from_fn(2 * edges.len(), 2 * d * f, |row, col| {
            let (u, v) = edges[row / 2];
            let (first, second) = if row % 2 == 0 { (u, v) } else { (v, u) };
            if col < d * f {
                block(first, col)
            } else {
                block(second, col - d * f)
            }
        });
        Ok(self.push(
            value,
            Op::EdgeFeatures {
                h,
                edges: edges.to_vec(),
                d,
            },
        ))
    }

    /// Assembles the sheaf Laplacian from per-side restriction maps given as
    /// rows of `maps` (`2|E| x d^2`, row-major blocks, u-side first).
    pub fn laplacian_from_maps(
        &mut self,
        maps: Val,
        edges: &[(usize, usize)],
        num_nodes: usize,
        d: usize,
    ) -> Result<Val> {
        let mv = self.value(maps);
        if mv.shape() != (2 * edges.len(), d * d) {
            return Err(Error::contract(format!(
                "laplacian_from_maps: maps have shape {:?}, expected ({}, {})",
                mv.shape(),
                2 * edges.len(),
                d * d
            )));
        }
        let map_at = |row: usize, i: usize, j: usize| mv.get(row, i * d + j);
        let mut value = Matrix::zeros(num_nodes * d, num_nodes * d);
        for (e, &(u, v)) in edges.iter().enumerate() {
            let (au, av) = (2 * e, 2 * e + 1);
            for i in 0..d {
                for j in 0..d {
                    let mut uu = 0.0;
                    let mut vv = 0.0;
                    let mut uv = 0.0;
                    for k in 0..d {
                        uu += map_at(au, k, i) * map_at(au, k, j);
                        vv += map_at(av, k, i) * map_at(av, k, j);
                        uv += map_at(au, k, i) * map_at(av, k, j);
                    }
                    value.add_at(u * d + i, u * d + j, uu);
                    value.add_at(v * d + i, v * d + j, vv);
                    value.add_at(u * d + i, v * d + j, -uv);
                    value.add_at(v * d + j, u * d + i, -uv);
                }
            }
        }
        Ok(self.push(
            value,
            Op::LaplacianFromMaps {
                maps,
                edges: edges.to_vec(),
                d,
            },
        ))
    }

    /// Inverse square root of each diagonal `d x d` block of a symmetric
    /// matrix, returned as `n*d x d` stacked blocks. Differentiates through
    /// the eigendecomposition of each block.
    pub fn block_inv_sqrt(&mut self, l: Val, d: usize, eps: f64) -> Result<Val> {
        let lv = self.value(l);
        if !lv.is_square() || lv.rows() % d != 0 {
            return Err(Error::contract(format!(
                "block_inv_sqrt: matrix {:?} is not square with block size {d}",
                lv.shape()
            )));
        }
        let n = lv.rows() / d;
        let mut value = Matrix::zeros(n * d, d);
        let mut cache = Vec::with_capacity(n);
        for v in 0..n {
            let raw = lv.block(v * d, v * d, d, d);
            let block = Matrix::from_fn(d, d, |i, j| 0.5 * (raw.get(i, j) + raw.get(j, i)));
            let (eigenvalues, vectors) = sym_eig(&block)
                .map_err(|e| Error::numeric(format!("block_inv_sqrt at node {v}: {e}")))?;
            for (k, &lambda) in eigenvalues.iter().enumerate() {
                let shifted = lambda + eps;
                if shifted <= 0.0 {
                    return Err(Error::numeric(format!(
                        "block_inv_sqrt: non-positive eigenvalue {lambda:.3e} + eps {eps:.3e} at node {v}"
                    )));
                }
                let f = 1.0 / shifted.sqrt();
                for i in 0..d {
                    for j in 0..d {
                        value.add_at(
                            v * d + i,
                            j,
                            vectors.get(i, k) * f * vectors.get(j, k),
                        );
                    }
                }
            }
            cache.push((eigenvalues, vectors));
        }
        Ok(self.push(value, Op::BlockInvSqrt { l, d, eps, cache }))
    }

    /// Block-diagonal product: `out_v = P_v x_v`, with `P` given as stacked
    /// `d x d` blocks.
    pub fn block_mul_left(&mut self, blocks: Val, x: Val, d: usize) -> Result<Val> {
        let (bv, xv) = (self.value(blocks), self.value(x));
        if bv.cols() != d || bv.rows() != xv.rows() || xv.rows() % d != 0 {
            return Err(Self::shape_err("block_mul_left", bv.shape(), xv.shape()));
        }
        let n = xv.rows() / d;
        let c = xv.cols();
        let mut value = Matrix::zeros(n * d, c);
        for v in 0..n {
            for i in 0..d {
                for k in 0..d {
                    let p = bv.get(v * d + i, k);
                    if p == 0.0 {
                        continue;
                    }
                    for j in 0..c {
                        value.add_at(v * d + i, j, p * xv.get(v * d + k, j));
                    }
                }
            }
        }
        Ok(self.push(value, Op::BlockMulLeft { blocks, x, d }))
    }

    /// Applies a single `d x d` weight to every stalk block:
    /// `out_v = W h_v`, i.e. the action of `I_n (x) W`.
    pub fn kron_left(&mut self, w: Val, x: Val, d: usize) -> Result<Val> {
        let (wv, xv) = (self.value(w), self.value(x));
        if wv.shape() != (d, d) || xv.rows() % d != 0 {
            return Err(Self::shape_err("kron_left", wv.shape(), xv.shape()));
        }
        let n = xv.rows() / d;
        let c = xv.cols();
        let mut value = Matrix::zeros(n * d, c);
        for v in 0..n {
            for i in 0..d {
                for k in 0..d {
                    let p = wv.get(i, k);
                    if p == 0.0 {
                        continue;
                    }
                    for j in 0..c {
                        value.add_at(v * d + i, j, p * xv.get(v * d + k, j));
                    }
                }
            }
        }
        Ok(self.push(value, Op::KronLeft { w, x, d }))
    }

    /// Mean binary cross-entropy with logits over the given rows of an
    /// `n x 1` logit column. Targets may be label-smoothed.
    pub fn bce_with_logits(&mut self, logits: Val, rows: &[usize], targets: &[f64]) -> Result<Val> {
        let lv = self.value(logits);
        if lv.cols() != 1 {
            return Err(Error::contract(format!(
                "bce_with_logits expects an n x 1 logit column, got {:?}",
                lv.shape()
            )));
        }
        if rows.len() != targets.len() || rows.is_empty() {
            return Err(Error::contract(format!(
                "bce_with_logits: {} rows vs {} targets",
                rows.len(),
                targets.len()
            )));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= lv.rows()) {
            return Err(Error::contract(format!(
                "bce_with_logits row {bad} out of range for {} logits",
                lv.rows()
            )));
        }
        let mut total = 0.0;
        for (&r, &y) in rows.iter().zip(targets.iter()) {
            let z = lv.get(r, 0);
            total += z.max(0.0) - z * y + (1.0 + (-z.abs()).exp()).ln();
        }
        let value = Matrix::from_vec(1, 1, vec![total / rows.len() as f64])?;
        Ok(self.push(
            value,
            Op::BceWithLogits {
                logits,
                rows: rows.to_vec(),
                targets: targets.to_vec(),
            },
        ))
    }

    /// Scalar `sum(weights .* x)`; a generic differentiable read-out used in
    /// tests.
    pub fn weighted_sum(&mut self, weights: Matrix, x: Val) -> Result<Val> {
        let xv = self.value(x);
        if weights.shape() != xv.shape() {
            return Err(Self::shape_err("weighted_sum", weights.shape(), xv.shape()));
        }
        let s: f64 = weights
            .as_slice()
            .iter()
            .zip(xv.as_slice().iter())
            .map(|(w, v)| w * v)
            .sum();
        let value = Matrix::from_vec(1, 1, vec![s])?;
        Ok(self.push(value, Op::WeightedSum(weights, x)))
    }

    /// Reverse pass from a scalar loss; gradients accumulate into `params`.
    pub fn backward(&self, loss: Val, params: &mut ParamSet) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::contract(
                "backward called before any forward was recorded for this value".to_string(),
            ));
        }
        if self.nodes[loss.0].value.shape() != (1, 1) {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Param(id) => {
                    params.get_mut(*id).grad.add_scaled_assign(&g, 1.0)?;
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.value(*b).transpose())?;
                    let db = self.value(*a).transpose().matmul(&g)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Transpose(x) => {
                    accumulate(&mut grads, *x, g.transpose())?;
                }
                Op::MulConstLeft(c, x) => {
                    let dx = c.transpose().matmul(&g)?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::AddScaled(a, b, alpha) => {
                    accumulate(&mut grads, *b, g.scale(*alpha))?;
                    accumulate(&mut grads, *a, g)?;
                }
                Op::Scale(x, c) => {
                    accumulate(&mut grads, *x, g.scale(*c))?;
                }
                Op::AddBiasRow(x, bias) => {
                    let mut db = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            db.add_at(0, j, g.get(i, j));
                        }
                    }
                    accumulate(&mut grads, *bias, db)?;
                    accumulate(&mut grads, *x, g)?;
                }
                Op::Activation(x, kind) => {
                    let xv = self.value(*x);
                    let yv = &self.nodes[idx].value;
                    let dx = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                        let slope = match kind {
                            ActKind::Relu => {
                                if xv.get(i, j) > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            ActKind::Elu => {
                                if xv.get(i, j) > 0.0 {
                                    1.0
                                } else {
                                    yv.get(i, j) + 1.0
                                }
                            }
                            ActKind::LeakyRelu(s) => {
                                if xv.get(i, j) > 0.0 {
                                    1.0
                                } else {
                                    *s
                                }
                            }
                        };
                        g.get(i, j) * slope
                    });
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Dropout(x, mask) => {
                    let data: Vec<f64> = g
                        .as_slice()
                        .iter()
                        .zip(mask.iter())
                        .map(|(gv, m)| gv * m)
                        .collect();
                    accumulate(&mut grads, *x, Matrix::from_vec(g.rows(), g.cols(), data)?)?;
                }
                Op::RowNormalize(x, norms, floored) => {
                    let yv = &self.nodes[idx].value;
                    let mut dx = Matrix::zeros(g.rows(), g.cols());
                    for i in 0..g.rows() {
                        if floored[i] {
                            for j in 0..g.cols() {
                                dx.set(i, j, g.get(i, j) / norms[i]);
                            }
                        } else {
                            let dot: f64 = (0..g.cols())
                                .map(|j| g.get(i, j) * yv.get(i, j))
                                .sum();
                            for j in 0..g.cols() {
                                dx.set(i, j, (g.get(i, j) - dot * yv.get(i, j)) / norms[i]);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::ConcatCols(a, b) => {
                    let ac = self.value(*a).cols();
                    let da = g.block(0, 0, g.rows(), ac);
                    let db = g.block(0, ac, g.rows(), g.cols() - ac);
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::GatherRows(x, rows) => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..g.cols() {
                            dx.add_at(r, j, g.get(k, j));
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::SegmentSoftmax(x, offsets) => {
                    let yv = &self.nodes[idx].value;
                    let mut dx = Matrix::zeros(g.rows(), 1);
                    for seg in offsets.windows(2) {
                        let (lo, hi) = (seg[0], seg[1]);
                        let inner: f64 = (lo..hi).map(|i| g.get(i, 0) * yv.get(i, 0)).sum();
                        for i in lo..hi {
                            dx.set(i, 0, yv.get(i, 0) * (g.get(i, 0) - inner));
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::AttnAggregate { alpha, h, src, dst } => {
                    let (av, hv) = (self.value(*alpha), self.value(*h));
                    let mut dalpha = Matrix::zeros(av.rows(), 1);
                    let mut dh = Matrix::zeros(hv.rows(), hv.cols());
                    for k in 0..src.len() {
                        let mut dot = 0.0;
                        let a = av.get(k, 0);
                        for j in 0..hv.cols() {
                            let gd = g.get(dst[k], j);
                            dot += gd * hv.get(src[k], j);
                            dh.add_at(src[k], j, a * gd);
                        }
                        dalpha.set(k, 0, dot);
                    }
                    accumulate(&mut grads, *alpha, dalpha)?;
                    accumulate(&mut grads, *h, dh)?;
                }
                Op::BatchNorm { x, gamma, beta, cache } => {
                    let (n, f) = g.shape();
                    let gv = self.value(*gamma);
                    let mut dgamma = Matrix::zeros(1, f);
                    let mut dbeta = Matrix::zeros(1, f);
                    for j in 0..f {
                        for i in 0..n {
                            dgamma.add_at(0, j, g.get(i, j) * cache.normalized.get(i, j));
                            dbeta.add_at(0, j, g.get(i, j));
                        }
                    }
                    let mut dx = Matrix::zeros(n, f);
                    for j in 0..f {
                        let s = cache.inv_std[j];
                        let gamma_j = gv.get(0, j);
                        if !cache.training {
                            for i in 0..n {
                                dx.set(i, j, g.get(i, j) * gamma_j * s);
                            }
                            continue;
                        }
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for i in 0..n {
                            let dxh = g.get(i, j) * gamma_j;
                            s1 += dxh;
                            s2 += dxh * cache.normalized.get(i, j);
                        }
                        let nf = n as f64;
                        for i in 0..n {
                            let dxh = g.get(i, j) * gamma_j;
                            let v = if cache.floored[j] {
                                s * (dxh - s1 / nf)
                            } else {
                                s / nf * (nf * dxh - s1 - cache.normalized.get(i, j) * s2)
                            };
                            dx.set(i, j, v);
                        }
                    }
                    accumulate(&mut grads, *gamma, dgamma)?;
                    accumulate(&mut grads, *beta, dbeta)?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::LayerNorm { x, gamma, beta, cache } => {
                    let (n, f) = g.shape();
                    let gv = self.value(*gamma);
                    let mut dgamma = Matrix::zeros(1, f);
                    let mut dbeta = Matrix::zeros(1, f);
                    for j in 0..f {
                        for i in 0..n {
                            dgamma.add_at(0, j, g.get(i, j) * cache.normalized.get(i, j));
                            dbeta.add_at(0, j, g.get(i, j));
                        }
                    }
                    let mut dx = Matrix::zeros(n, f);
                    let ff = f as f64;
                    for i in 0..n {
                        let s = cache.inv_std[i];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..f {
                            let dxh = g.get(i, j) * gv.get(0, j);
                            s1 += dxh;
                            s2 += dxh * cache.normalized.get(i, j);
                        }
                        for j in 0..f {
                            let dxh = g.get(i, j) * gv.get(0, j);
                            let v = if cache.floored[i] {
                                s * (dxh - s1 / ff)
                            } else {
                                s / ff * (ff * dxh - s1 - cache.normalized.get(i, j) * s2)
                            };
                            dx.set(i, j, v);
                        }
                    }
                    accumulate(&mut grads, *gamma, dgamma)?;
                    accumulate(&mut grads, *beta, dbeta)?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::ReshapeStalks(x, d) => {
                    let f = g.cols();
                    let dx = Matrix::from_fn(g.rows() / d, d * f, |i, j| {
                        g.get(i * d + j / f, j % f)
                    });
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::FlattenStalks(x, d) => {
                    let f = g.cols() / d;
                    let dx = Matrix::from_fn(g.rows() * d, f, |i, j| g.get(i / d, (i % d) * f + j));
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::EdgeFeatures { h, edges, d } => {
                    let hv = self.value(*h);
                    let f = hv.cols();
                    let mut dh = Matrix::zeros(hv.rows(), f);
                    for (e, &(u, v)) in edges.iter().enumerate() {
                        for (row, (first, second)) in [(2 * e, (u, v)), (2 * e + 1, (v, u))] {
                            for k in 0..d * f {
                                dh.add_at(first * d + k / f, k % f, g.get(row, k));
                                dh.add_at(second * d + k / f, k % f, g.get(row, d * f + k));
                            }
                        }
                    }
                    accumulate(&mut grads, *h, dh)?;
                }
                Op::LaplacianFromMaps { maps, edges, d } => {
                    let mv = self.value(*maps);
                    let d = *d;
                    let mut dmaps = Matrix::zeros(mv.rows(), mv.cols());
                    for (e, &(u, v)) in edges.iter().enumerate() {
                        let a = mv.block(2 * e, 0, 1, d * d);
                        let b = mv.block(2 * e + 1, 0, 1, d * d);
                        let a = Matrix::from_fn(d, d, |i, j| a.get(0, i * d + j));
                        let b = Matrix::from_fn(d, d, |i, j| b.get(0, i * d + j));
                        let guu = g.block(u * d, u * d, d, d);
                        let gvv = g.block(v * d, v * d, d, d);
                        let guv = g.block(u * d, v * d, d, d);
                        let gvu = g.block(v * d, u * d, d, d);

                        let sym_uu = guu.add(&guu.transpose()).expect("square");
                        let sym_vv = gvv.add(&gvv.transpose()).expect("square");
                        let cross_a = guv.transpose().add(&gvu).expect("square");
                        let cross_b = guv.add(&gvu.transpose()).expect("square");

                        let mut da = a.matmul(&sym_uu).expect("d x d");
                        da.add_scaled_assign(&b.matmul(&cross_a).expect("d x d"), -1.0)
                            .expect("d x d");
                        let mut db = b.matmul(&sym_vv).expect("d x d");
                        db.add_scaled_assign(&a.matmul(&cross_b).expect("d x d"), -1.0)
                            .expect("d x d");

                        for i in 0..d {
                            for j in 0..d {
                                dmaps.add_at(2 * e, i * d + j, da.get(i, j));
                                dmaps.add_at(2 * e + 1, i * d + j, db.get(i, j));
                            }
                        }
                    }
                    accumulate(&mut grads, *maps, dmaps)?;
                }
                Op::BlockInvSqrt { l, d, eps, cache } => {
                    let d = *d;
                    let lv = self.value(*l);
                    let mut dl = Matrix::zeros(lv.rows(), lv.cols());
                    for (v, (eigenvalues, vectors)) in cache.iter().enumerate() {
                        let gb = g.block(v * d, 0, d, d);
                        // dL_block = V (F .* (V^T G V)) V^T with F the
                        // divided differences of f(lambda) = (lambda+eps)^(-1/2).
                        let m = vectors.transpose().matmul(&gb).expect("d x d").matmul(vectors).expect("d x d");
                        let mut k = Matrix::zeros(d, d);
                        for i in 0..d {
                            for j in 0..d {
                                let (li, lj) = (eigenvalues[i], eigenvalues[j]);
                                let coeff = if (li - lj).abs()
                                    > 1e-10 * (1.0 + li.abs() + lj.abs())
                                {
                                    let fi = 1.0 / (li + eps).sqrt();
                                    let fj = 1.0 / (lj + eps).sqrt();
                                    (fi - fj) / (li - lj)
                                } else {
                                    let mid = 0.5 * (li + lj) + eps;
                                    -0.5 / (mid * mid.sqrt())
                                };
                                k.set(i, j, coeff * m.get(i, j));
                            }
                        }
                        let db = vectors
                            .matmul(&k)
                            .expect("d x d")
                            .matmul(&vectors.transpose())
                            .expect("d x d");
                        for i in 0..d {
                            for j in 0..d {
                                dl.add_at(v * d + i, v * d + j, db.get(i, j));
                            }
                        }
                    }
                    accumulate(&mut grads, *l, dl)?;
                }
                Op::BlockMulLeft { blocks, x, d } => {
                    let d = *d;
                    let (bv, xv) = (self.value(*blocks), self.value(*x));
                    let n = xv.rows() / d;
                    let c = xv.cols();
                    let mut dblocks = Matrix::zeros(bv.rows(), d);
                    let mut dx = Matrix::zeros(xv.rows(), c);
                    for v in 0..n {
                        for i in 0..d {
                            for k in 0..d {
                                let mut acc = 0.0;
                                for j in 0..c {
                                    acc += g.get(v * d + i, j) * xv.get(v * d + k, j);
                                }
                                dblocks.add_at(v * d + i, k, acc);
                                let p = bv.get(v * d + i, k);
                                if p != 0.0 {
                                    for j in 0..c {
                                        dx.add_at(v * d + k, j, p * g.get(v * d + i, j));
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *blocks, dblocks)?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::KronLeft { w, x, d } => {
                    let d = *d;
                    let (wv, xv) = (self.value(*w), self.value(*x));
                    let n = xv.rows() / d;
                    let c = xv.cols();
                    let mut dw = Matrix::zeros(d, d);
                    let mut dx = Matrix::zeros(xv.rows(), c);
                    for v in 0..n {
                        for i in 0..d {
                            for k in 0..d {
                                let mut acc = 0.0;
                                for j in 0..c {
                                    acc += g.get(v * d + i, j) * xv.get(v * d + k, j);
                                }
                                dw.add_at(i, k, acc);
                                let p = wv.get(i, k);
                                if p != 0.0 {
                                    for j in 0..c {
                                        dx.add_at(v * d + k, j, p * g.get(v * d + i, j));
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *w, dw)?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::BceWithLogits { logits, rows, targets } => {
                    let lv = self.value(*logits);
                    let scale = g.get(0, 0) / rows.len() as f64;
                    let mut dl = Matrix::zeros(lv.rows(), 1);
                    for (&r, &y) in rows.iter().zip(targets.iter()) {
                        dl.add_at(r, 0, scale * (sigmoid(lv.get(r, 0)) - y));
                    }
                    accumulate(&mut grads, *logits, dl)?;
                }
                Op::WeightedSum(weights, x) => {
                    accumulate(&mut grads, *x, weights.scale(g.get(0, 0)))?;
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Matrix>], target: Val, delta: Matrix) -> Result<()> {
    match &mut grads[target.0] {
        Some(existing) => existing.add_scaled_assign(&delta, 1.0),
        slot @ None => {
            *slot = Some(delta);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// Central finite differences against the analytic gradient of a scalar
    /// function of a single parameter matrix.
    fn check_param_gradient(
        build: &mut dyn FnMut(&mut Tape, Val) -> Val,
        initial: Matrix,
        tol: f64,
    ) {
        let mut params = ParamSet::new();
        let id = params.add("p", initial);

        let mut tape = Tape::new();
        let leaf = tape.param(id, params.get(id).value.clone());
        let loss = build(&mut tape, leaf);
        params.zero_grads();
        tape.backward(loss, &mut params).unwrap();
        let analytic = params.get(id).grad.clone();

        let h = 1e-5;
        let (rows, cols) = params.get(id).value.shape();
        for i in 0..rows {
            for j in 0..cols {
                let orig = params.get(id).value.get(i, j);
                let mut eval = |v: f64| {
                    params.get_mut(id).value.set(i, j, v);
                    let mut t = Tape::new();
                    let leaf = t.param(id, params.get(id).value.clone());
                    let loss = build(&mut t, leaf);
                    t.value(loss).get(0, 0)
                };
                let plus = eval(orig + h);
                let minus = eval(orig - h);
                params.get_mut(id).value.set(i, j, orig);
                let numeric = (plus - minus) / (2.0 * h);
                let a = analytic.get(i, j);
                let err = (a - numeric).abs();
                assert!(
                    err <= tol.max(1e-4 * a.abs().max(numeric.abs())),
                    "gradient mismatch at ({i},{j}): analytic {a}, numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn backward_linear_loss_grad_is_input_outer() {
        // loss = sum(W x) for fixed x: dW = 1 * x^T.
        let x = Matrix::from_rows(&[vec![2.0], vec![-3.0]]).unwrap();
        let mut params = ParamSet::new();
        let id = params.add("w", Matrix::from_rows(&[vec![0.5, 0.25]]).unwrap());

        let mut tape = Tape::new();
        let w = tape.param(id, params.get(id).value.clone());
        let xv = tape.input(x.clone());
        let prod = tape.matmul(w, xv).unwrap();
        let loss = tape.weighted_sum(Matrix::from_vec(1, 1, vec![1.0]).unwrap(), prod).unwrap();
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params.get(id).grad, x.transpose());
    }

    #[test]
    fn backward_half_squared_norm_grad_is_value() {
        // loss = ||W||^2 / 2 = 0.5 * tr(W^T W), so grad = W.
        let w0 = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let mut params = ParamSet::new();
        let id = params.add("w", w0.clone());
        let mut tape = Tape::new();
        let w = tape.param(id, params.get(id).value.clone());
        let wt = tape.transpose(w);
        let gram = tape.matmul(wt, w).unwrap();
        let trace = tape.weighted_sum(Matrix::identity(2), gram).unwrap();
        let loss = tape.scale(trace, 0.5);
        tape.backward(loss, &mut params).unwrap();
        assert!(params.get(id).grad.sub(&w0).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut params = ParamSet::new();
        let id = params.add("w", Matrix::zeros(2, 2));
        let mut tape = Tape::new();
        let w = tape.param(id, Matrix::zeros(2, 2));
        let err = tape.backward(w, &mut params).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn backward_rejects_unrecorded_value() {
        let tape = Tape::new();
        let mut params = ParamSet::new();
        let err = tape.backward(Val(0), &mut params).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut r = rng(1);
        let x = random_matrix(&mut r, 3, 2);
        let read = random_matrix(&mut r, 4, 2);
        let init = random_matrix(&mut r, 4, 3);
        check_param_gradient(
            &mut |tape, p| {
                let xv = tape.input(x.clone());
                let prod = tape.matmul(p, xv).unwrap();
                tape.weighted_sum(read.clone(), prod).unwrap()
            },
            init,
            1e-7,
        );
    }

    #[test]
    fn activation_gradients_match_finite_differences() {
        let mut r = rng(2);
        for kind in [ActKind::Relu, ActKind::Elu, ActKind::LeakyRelu(0.2)] {
            let read = random_matrix(&mut r, 3, 3);
            let init = random_matrix(&mut r, 3, 3);
            check_param_gradient(
                &mut |tape, p| {
                    let y = tape.activation(p, kind);
                    tape.weighted_sum(read.clone(), y).unwrap()
                },
                init,
                1e-6,
            );
        }
    }

    #[test]
    fn row_normalize_gradient_matches_finite_differences() {
        let mut r = rng(3);
        let read = random_matrix(&mut r, 3, 4);
        let init = random_matrix(&mut r, 3, 4);
        check_param_gradient(
            &mut |tape, p| {
                let y = tape.row_normalize(p);
                tape.weighted_sum(read.clone(), y).unwrap()
            },
            init,
            1e-6,
        );
    }

    #[test]
    fn softmax_and_attention_gradients_match_finite_differences() {
        let mut r = rng(4);
        // 3-node star: edges into node 0 from 1, 2 plus self-loops.
        let src = vec![0usize, 1, 2, 1, 2];
        let dst = vec![0usize, 0, 0, 1, 2];
        let offsets = vec![0usize, 3, 4, 5];
        let h = random_matrix(&mut r, 3, 2);
        let read = random_matrix(&mut r, 3, 2);
        let init = random_matrix(&mut r, 5, 1);
        check_param_gradient(
            &mut |tape, p| {
                let sm = tape.segment_softmax(p, offsets.clone()).unwrap();
                let hv = tape.input(h.clone());
                let agg = tape.attn_aggregate(sm, hv, src.clone(), dst.clone()).unwrap();
                tape.weighted_sum(read.clone(), agg).unwrap()
            },
            init,
            1e-6,
        );
    }

    #[test]
    fn norm_layer_gradients_match_finite_differences() {
        let mut r = rng(5);
        let read = random_matrix(&mut r, 4, 3);
        let init = random_matrix(&mut r, 4, 3);
        let gamma = Matrix::from_fn(1, 3, |_, j| 1.0 + 0.1 * j as f64);
        let beta = Matrix::from_fn(1, 3, |_, j| 0.05 * j as f64);
        check_param_gradient(
            &mut |tape, p| {
                let g = tape.input(gamma.clone());
                let b = tape.input(beta.clone());
                let mut stats = RunningStats::new(3);
                let bn = tape.batch_norm(p, g, b, true, &mut stats).unwrap();
                let ln = tape.layer_norm(bn, g, b).unwrap();
                tape.weighted_sum(read.clone(), ln).unwrap()
            },
            init,
            1e-6,
        );
    }

    #[test]
    fn sheaf_pipeline_gradient_matches_finite_differences() {
        // Full differentiable chain: edge features -> maps -> Laplacian ->
        // block inverse sqrt -> sandwiched diffusion.
        let mut r = rng(6);
        let edges = vec![(0usize, 1usize), (1, 2), (0, 2)];
        let (n, d, f) = (3usize, 2usize, 2usize);
        let h = random_matrix(&mut r, n * d, f);
        let read = random_matrix(&mut r, n * d, f);
        let init = random_matrix(&mut r, 2 * d * f, d * d);
        check_param_gradient(
            &mut |tape, gen_w| {
                let hv = tape.input(h.clone());
                let ef = tape.edge_features(hv, &edges, d).unwrap();
                let maps = tape.matmul(ef, gen_w).unwrap();
                let lap = tape.laplacian_from_maps(maps, &edges, n, d).unwrap();
                let p = tape.block_inv_sqrt(lap, d, 0.05).unwrap();
                let t = tape.block_mul_left(p, hv, d).unwrap();
                let t = tape.matmul(lap, t).unwrap();
                let t = tape.block_mul_left(p, t, d).unwrap();
                tape.weighted_sum(read.clone(), t).unwrap()
            },
            init,
            1e-6,
        );
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let mut r = rng(7);
        let init = random_matrix(&mut r, 5, 1);
        let rows = vec![0usize, 2, 4];
        let targets = vec![1.0, 0.0, 0.95];
        check_param_gradient(
            &mut |tape, p| tape.bce_with_logits(p, &rows, &targets).unwrap(),
            init,
            1e-7,
        );
    }

    #[test]
    fn laplacian_from_maps_matches_coboundary_route() {
        // Independent check of the assembly against delta^T delta.
        use crate::graph::Graph;
        use crate::sheaf::CellularSheaf;
        let mut r = rng(8);
        let graph = Graph::with_edges(4, &[(0, 1), (1, 2), (2, 3), (0, 3)]).unwrap();
        let d = 2;
        let maps_rows = 2 * graph.num_edges();
        let maps = random_matrix(&mut r, maps_rows, d * d);

        let mut tape = Tape::new();
        let mv = tape.input(maps.clone());
        let lap = tape
            .laplacian_from_maps(mv, graph.edges(), graph.num_nodes(), d)
            .unwrap();
        let got = tape.value(lap).clone();

        let restrictions: Vec<Matrix> = (0..maps_rows)
            .map(|row| Matrix::from_fn(d, d, |i, j| maps.get(row, i * d + j)))
            .collect();
        let sheaf = CellularSheaf::from_restrictions(graph, d, restrictions).unwrap();
        let want = sheaf.laplacian();
        assert!(got.sub(&want).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn dropout_eval_identity_and_train_expectation() {
        let mut r = rng(9);
        let x = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        // rate 0 is the identity (same node returned).
        let mut tape = Tape::new();
        let v = tape.input(x.clone());
        let out = tape.dropout(v, 0.0, &mut r);
        assert_eq!(v, out);

        // Inverted scaling keeps the expectation within 2% over 1e4 draws.
        let p = 0.3;
        let mut total = 0.0;
        let draws = 10_000;
        for _ in 0..draws {
            let mut t = Tape::new();
            let v = t.input(x.clone());
            let d = t.dropout(v, p, &mut r);
            total += t.value(d).get(0, 0);
        }
        let mean = total / draws as f64;
        assert!((mean - 1.0).abs() < 0.02, "dropout mean {mean}");
    }
}
