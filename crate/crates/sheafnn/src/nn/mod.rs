//! Differentiable graph layers and model assembly.
//!
//! A generic layer computes `sigma(psi(GConv(G, h)) + alpha * h * W_skip)`
//! followed by dropout, where the convolution is one of: the plain graph
//! Laplacian, GCN, GraphSAGE, GAT, or sheaf diffusion with restriction maps
//! learned from the incident node features. The sheaf convolution computes
//! `(Delta (I (x) W1) h) W2` with `Delta` the (optionally normalized) sheaf
//! Laplacian assembled on the tape, so gradients flow through the Laplacian
//! and its block inverse square root.

pub mod tape;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::linalg::Matrix;

pub use tape::{ActKind, Param, ParamSet, RunningStats, Tape, Val};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Gcn,
    Sage,
    Gat,
    SheafGeneral,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Gcn => "gcn",
            ModelKind::Sage => "sage",
            ModelKind::Gat => "gat",
            ModelKind::SheafGeneral => "sheaf_general",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Elu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Feature-wise batch stage followed by per-row layer stage.
    BatchThenLayer,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaplacianFlavor {
    /// `D^{-1/2} L D^{-1/2}` with `D` the block diagonal of `L`.
    Normalized,
    Unnormalized,
}

/// Convolution family of a single layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerKind {
    /// `(D - A) h W`.
    SimpleLaplacian,
    Gcn,
    Sage,
    Gat { heads: usize },
    Sheaf {
        stalk_dim: usize,
        flavor: LaplacianFlavor,
        eps: f64,
    },
}

/// Full description of one layer. For sheaf layers `in_dim`/`out_dim` are
/// channel counts; the feature matrix has `num_nodes * stalk_dim` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    pub alpha: f64,
    pub activation: Activation,
    pub dropout: f64,
    pub normalization: NormKind,
}

/// Hyperparameter configuration for a full model. Defaults per kind follow
/// the reference recipes; any field can be overridden.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub dropout: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub min_epochs: usize,
    pub sched_patience: usize,
    pub sched_factor: f64,
    pub min_lr: f64,
    pub grad_clip: Option<f64>,
    pub heads: usize,
    pub stalk_dim: usize,
    pub channels: usize,
    pub activation: Activation,
    pub label_smoothing: f64,
    pub epochs: usize,
    pub alpha: f64,
    pub normalization: NormKind,
    pub laplacian: LaplacianFlavor,
    pub laplacian_eps: f64,
}

impl ModelConfig {
    /// Reference defaults for each model kind (400-epoch budget, plateau
    /// scheduler at factor 0.5, early stopping on validation accuracy).
    pub fn defaults(kind: ModelKind) -> ModelConfig {
        let base = ModelConfig {
            kind,
            hidden_dim: 32,
            num_layers: 2,
            dropout: 0.1,
            lr: 0.005,
            weight_decay: 1e-4,
            patience: 80,
            min_epochs: 100,
            sched_patience: 40,
            sched_factor: 0.5,
            min_lr: 1e-6,
            grad_clip: Some(2.0),
            heads: 2,
            stalk_dim: 8,
            channels: 24,
            activation: Activation::Relu,
            label_smoothing: 0.0,
            epochs: 400,
            alpha: 1.0,
            normalization: NormKind::BatchThenLayer,
            laplacian: LaplacianFlavor::Normalized,
            laplacian_eps: 1e-6,
        };
        match kind {
            ModelKind::Gcn => ModelConfig {
                num_layers: 3,
                dropout: 0.2,
                lr: 0.002,
                weight_decay: 1e-5,
                min_epochs: 200,
                grad_clip: Some(1.0),
                ..base
            },
            ModelKind::Sage => ModelConfig {
                alpha: 0.05,
                label_smoothing: 0.1,
                ..base
            },
            ModelKind::Gat => ModelConfig {
                num_layers: 4,
                lr: 0.002,
                weight_decay: 1e-5,
                min_epochs: 200,
                activation: Activation::Elu,
                ..base
            },
            ModelKind::SheafGeneral => ModelConfig {
                num_layers: 2,
                dropout: 0.2,
                lr: 0.01,
                weight_decay: 1e-3,
                patience: 50,
                min_epochs: 0,
                grad_clip: Some(0.5),
                activation: Activation::Elu,
                ..base
            },
        }
    }
}

/// Fixed propagation operators derived from the graph once per fold.
#[derive(Debug, Clone)]
pub struct GraphOps {
    pub graph: Graph,
    /// `D - A`.
    pub laplacian: Matrix,
    /// Symmetric-normalized adjacency with self-loops.
    pub gcn_adj: Matrix,
    /// Row-stochastic neighbor averaging (zero rows for isolated nodes).
    pub neighbor_mean: Matrix,
    /// Directed attention edges (self-loops included), grouped by
    /// destination; `attn_offsets[v]..attn_offsets[v + 1]` indexes node v's
    /// incoming edges.
    pub attn_src: Vec<usize>,
    pub attn_dst: Vec<usize>,
    pub attn_offsets: Vec<usize>,
}

impl GraphOps {
    pub fn new(graph: &Graph) -> GraphOps {
        let n = graph.num_nodes();
        let laplacian = graph.laplacian();
        let adj = graph.adjacency();

        let mut gcn_adj = Matrix::zeros(n, n);
        let degrees: Vec<f64> = (0..n)
            .map(|v| graph.degree(v).expect("in range") as f64 + 1.0)
            .collect();
        for i in 0..n {
            for j in 0..n {
                let a = if i == j { 1.0 } else { adj.get(i, j) };
                if a != 0.0 {
                    gcn_adj.set(i, j, a / (degrees[i] * degrees[j]).sqrt());
                }
            }
        }

        let mut neighbor_mean = Matrix::zeros(n, n);
        let lists = graph.adjacency_lists();
        for v in 0..n {
            if !lists[v].is_empty() {
                let w = 1.0 / lists[v].len() as f64;
                for &u in &lists[v] {
                    neighbor_mean.set(v, u, w);
                }
            }
        }

        let mut attn_src = Vec::new();
        let mut attn_dst = Vec::new();
        let mut attn_offsets = Vec::with_capacity(n + 1);
        attn_offsets.push(0);
        for v in 0..n {
            let mut incoming = lists[v].clone();
            incoming.push(v);
            incoming.sort_unstable();
            for s in incoming {
                attn_src.push(s);
                attn_dst.push(v);
            }
            attn_offsets.push(attn_src.len());
        }

        GraphOps {
            graph: graph.clone(),
            laplacian,
            gcn_adj,
            neighbor_mean,
            attn_src,
            attn_dst,
            attn_offsets,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }
}

/// Convolution of the plain Laplacian layer: `(D - A) h W`.
pub fn simple_laplacian_conv(graph: &Graph, h: &Matrix, w: &Matrix) -> Result<Matrix> {
    if h.rows() != graph.num_nodes() {
        return Err(Error::Shape {
            op: "simple_laplacian_conv",
            lhs_rows: graph.num_nodes(),
            lhs_cols: graph.num_nodes(),
            rhs_rows: h.rows(),
            rhs_cols: h.cols(),
        });
    }
    graph.laplacian().matmul(h)?.matmul(w)
}

#[derive(Debug, Clone)]
pub struct GatHead {
    pub weight: usize,
    pub attn_dst: usize,
    pub attn_src: usize,
}

#[derive(Debug, Clone)]
pub enum ConvParams {
    /// Single dense weight (simple / GCN: `in x out`, SAGE: `2 in x out`).
    Dense { weight: usize },
    Gat { heads: Vec<GatHead> },
    Sheaf {
        /// Linear map from concatenated endpoint features to a flattened
        /// restriction map.
        generator_weight: usize,
        generator_bias: usize,
        /// d x d weight applied per stalk (the Kronecker factor).
        diffusion_weight: usize,
        /// Channel mixing applied after diffusion.
        channel_weight: usize,
        /// Skip channel weight; `None` means identity (equal channel counts).
        skip_channel_weight: Option<usize>,
    },
}

#[derive(Debug, Clone)]
pub struct NormParams {
    pub batch_gamma: usize,
    pub batch_beta: usize,
    pub layer_gamma: usize,
    pub layer_beta: usize,
    pub state: RunningStats,
}

/// One realized layer: spec plus parameter ids and normalization state.
#[derive(Debug, Clone)]
pub struct Layer {
    pub spec: LayerSpec,
    pub conv: ConvParams,
    /// Skip projection for unequal dims; `None` means identity skip.
    pub skip_weight: Option<usize>,
    pub norm: Option<NormParams>,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gain: f64) -> Matrix {
    let limit = gain * (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-limit..limit))
}

impl Layer {
    pub fn new(
        spec: LayerSpec,
        name: &str,
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Result<Layer> {
        let conv = match spec.kind {
            LayerKind::SimpleLaplacian | LayerKind::Gcn => ConvParams::Dense {
                weight: params.add(
                    format!("{name}.conv_weight"),
                    glorot(rng, spec.in_dim, spec.out_dim, 1.0),
                ),
            },
            LayerKind::Sage => ConvParams::Dense {
                weight: params.add(
                    format!("{name}.conv_weight"),
                    glorot(rng, 2 * spec.in_dim, spec.out_dim, 1.0),
                ),
            },
            LayerKind::Gat { heads } => {
                if heads == 0 || spec.out_dim % heads != 0 {
                    return Err(Error::contract(format!(
                        "hidden_dim must be divisible by heads: {} % {heads} != 0",
                        spec.out_dim
                    )));
                }
                let head_dim = spec.out_dim / heads;
                let heads = (0..heads)
                    .map(|k| GatHead {
                        weight: params.add(
                            format!("{name}.head{k}.weight"),
                            glorot(rng, spec.in_dim, head_dim, 1.0),
                        ),
                        attn_dst: params.add(
                            format!("{name}.head{k}.attn_dst"),
                            glorot(rng, head_dim, 1, 1.0),
                        ),
                        attn_src: params.add(
                            format!("{name}.head{k}.attn_src"),
                            glorot(rng, head_dim, 1, 1.0),
                        ),
                    })
                    .collect();
                ConvParams::Gat { heads }
            }
            LayerKind::Sheaf { stalk_dim, .. } => {
                let d = stalk_dim;
                let gen_in = 2 * d * spec.in_dim;
                // Small generator gain starts training near the
                // zero-diffusion regime.
                ConvParams::Sheaf {
                    generator_weight: params.add(
                        format!("{name}.generator_weight"),
                        glorot(rng, gen_in, d * d, 0.1),
                    ),
                    generator_bias: params
                        .add(format!("{name}.generator_bias"), Matrix::zeros(1, d * d)),
                    diffusion_weight: params.add(
                        format!("{name}.diffusion_weight"),
                        glorot(rng, d, d, 1.0),
                    ),
                    channel_weight: params.add(
                        format!("{name}.channel_weight"),
                        glorot(rng, spec.in_dim, spec.out_dim, 1.0),
                    ),
                    skip_channel_weight: if spec.in_dim == spec.out_dim || spec.alpha == 0.0 {
                        None
                    } else {
                        Some(params.add(
                            format!("{name}.skip_channel_weight"),
                            glorot(rng, spec.in_dim, spec.out_dim, 1.0),
                        ))
                    },
                }
            }
        };

        let skip_weight = match spec.kind {
            LayerKind::Sheaf { .. } => None,
            _ if spec.alpha != 0.0 && spec.in_dim != spec.out_dim => Some(params.add(
                format!("{name}.skip_weight"),
                glorot(rng, spec.in_dim, spec.out_dim, 1.0),
            )),
            _ => None,
        };

        let norm = if spec.normalization == NormKind::BatchThenLayer {
            Some(NormParams {
                batch_gamma: params.add(
                    format!("{name}.batch_gamma"),
                    Matrix::from_fn(1, spec.out_dim, |_, _| 1.0),
                ),
                batch_beta: params.add(format!("{name}.batch_beta"), Matrix::zeros(1, spec.out_dim)),
                layer_gamma: params.add(
                    format!("{name}.layer_gamma"),
                    Matrix::from_fn(1, spec.out_dim, |_, _| 1.0),
                ),
                layer_beta: params.add(format!("{name}.layer_beta"), Matrix::zeros(1, spec.out_dim)),
                state: RunningStats::new(spec.out_dim),
            })
        } else {
            None
        };

        Ok(Layer {
            spec,
            conv,
            skip_weight,
            norm,
        })
    }

    fn conv_forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        ops: &GraphOps,
        h: Val,
    ) -> Result<Val> {
        let load = |tape: &mut Tape, id: usize| tape.param(id, params.get(id).value.clone());
        match (&self.spec.kind, &self.conv) {
            (LayerKind::SimpleLaplacian, ConvParams::Dense { weight }) => {
                let w = load(tape, *weight);
                let propagated = tape.mul_const_left(&ops.laplacian, h)?;
                tape.matmul(propagated, w)
            }
            (LayerKind::Gcn, ConvParams::Dense { weight }) => {
                let w = load(tape, *weight);
                let propagated = tape.mul_const_left(&ops.gcn_adj, h)?;
                tape.matmul(propagated, w)
            }
            (LayerKind::Sage, ConvParams::Dense { weight }) => {
                let w = load(tape, *weight);
                let mean = tape.mul_const_left(&ops.neighbor_mean, h)?;
                let cat = tape.concat_cols(h, mean)?;
                let mixed = tape.matmul(cat, w)?;
                Ok(tape.row_normalize(mixed))
            }
            (LayerKind::Gat { .. }, ConvParams::Gat { heads }) => {
                let mut combined: Option<Val> = None;
                for head in heads {
                    let w = load(tape, head.weight);
                    let a_dst = load(tape, head.attn_dst);
                    let a_src = load(tape, head.attn_src);
                    let projected = tape.matmul(h, w)?;
                    let score_dst = tape.matmul(projected, a_dst)?;
                    let score_src = tape.matmul(projected, a_src)?;
                    let dst_part = tape.gather_rows(score_dst, ops.attn_dst.clone())?;
                    let src_part = tape.gather_rows(score_src, ops.attn_src.clone())?;
                    let logits = tape.add(dst_part, src_part)?;
                    let logits = tape.activation(logits, ActKind::LeakyRelu(0.2));
                    let alpha = tape.segment_softmax(logits, ops.attn_offsets.clone())?;
                    let aggregated = tape.attn_aggregate(
                        alpha,
                        projected,
                        ops.attn_src.clone(),
                        ops.attn_dst.clone(),
                    )?;
                    combined = Some(match combined {
                        None => aggregated,
                        Some(prev) => tape.concat_cols(prev, aggregated)?,
                    });
                }
                Ok(combined.expect("at least one head"))
            }
            (
                LayerKind::Sheaf {
                    stalk_dim, flavor, eps,
                },
                ConvParams::Sheaf {
                    generator_weight,
                    generator_bias,
                    diffusion_weight,
                    channel_weight,
                    ..
                },
            ) => {
                let d = *stalk_dim;
                let edges = ops.graph.edges();
                let gen_w = load(tape, *generator_weight);
                let gen_b = load(tape, *generator_bias);
                let w1 = load(tape, *diffusion_weight);
                let w2 = load(tape, *channel_weight);

                let endpoint_features = tape.edge_features(h, edges, d)?;
                let maps = tape.matmul(endpoint_features, gen_w)?;
                let maps = tape.add_bias_row(maps, gen_b)?;
                let lap = tape.laplacian_from_maps(maps, edges, ops.num_nodes(), d)?;

                let mixed = tape.kron_left(w1, h, d)?;
                let diffused = match flavor {
                    LaplacianFlavor::Unnormalized => tape.matmul(lap, mixed)?,
                    LaplacianFlavor::Normalized => {
                        let scaler = tape.block_inv_sqrt(lap, d, *eps)?;
                        let t = tape.block_mul_left(scaler, mixed, d)?;
                        let t = tape.matmul(lap, t)?;
                        tape.block_mul_left(scaler, t, d)?
                    }
                };
                tape.matmul(diffused, w2)
            }
            _ => Err(Error::contract(
                "layer kind does not match its parameters".to_string(),
            )),
        }
    }

    /// Full layer: convolution, normalization, skip, activation, dropout.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        params: &ParamSet,
        ops: &GraphOps,
        h: Val,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Val> {
        let load = |tape: &mut Tape, id: usize| tape.param(id, params.get(id).value.clone());
        let mut out = self.conv_forward(tape, params, ops, h)?;

        if let Some(norm) = &mut self.norm {
            let bg = load(tape, norm.batch_gamma);
            let bb = load(tape, norm.batch_beta);
            out = tape.batch_norm(out, bg, bb, training, &mut norm.state)?;
            let lg = load(tape, norm.layer_gamma);
            let lb = load(tape, norm.layer_beta);
            out = tape.layer_norm(out, lg, lb)?;
        }

        if self.spec.alpha != 0.0 {
            let skip = match (&self.conv, self.skip_weight) {
                (ConvParams::Sheaf { skip_channel_weight, .. }, _) => match skip_channel_weight {
                    Some(id) => {
                        let w3 = load(tape, *id);
                        tape.matmul(h, w3)?
                    }
                    None => h,
                },
                (_, Some(id)) => {
                    let w = load(tape, id);
                    tape.matmul(h, w)?
                }
                (_, None) => h,
            };
            out = tape.add_scaled(out, skip, self.spec.alpha)?;
        }

        out = match self.spec.activation {
            Activation::Identity => out,
            Activation::Relu => tape.activation(out, ActKind::Relu),
            Activation::Elu => tape.activation(out, ActKind::Elu),
        };

        if training {
            out = tape.dropout(out, self.spec.dropout, rng);
        }
        Ok(out)
    }
}

/// A stack of layers with a linear read-out producing one logit per node.
/// Sheaf models prepend a linear projection into stalk space.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub layers: Vec<Layer>,
    pub input_proj: Option<(usize, usize)>,
    pub readout: (usize, usize),
    pub in_dim: usize,
}

impl Model {
    pub fn new(config: &ModelConfig, in_dim: usize, rng: &mut ChaCha8Rng) -> Result<Model> {
        let mut params = ParamSet::new();
        let mut layers = Vec::with_capacity(config.num_layers);
        if config.num_layers == 0 {
            return Err(Error::validation("num_layers must be at least 1".to_string()));
        }

        let (input_proj, readout_in) = match config.kind {
            ModelKind::SheafGeneral => {
                let d = config.stalk_dim;
                let f = config.channels;
                if d == 0 || f == 0 {
                    return Err(Error::validation(
                        "sheaf models need stalk_dim >= 1 and channels >= 1".to_string(),
                    ));
                }
                let w = params.add("input_proj.weight", glorot(rng, in_dim, d * f, 1.0));
                let b = params.add("input_proj.bias", Matrix::zeros(1, d * f));
                (Some((w, b)), d * f)
            }
            _ => (None, config.hidden_dim),
        };

        for i in 0..config.num_layers {
            let last = i + 1 == config.num_layers;
            let (kind, in_dim_i, out_dim_i) = match config.kind {
                ModelKind::Gcn => (
                    LayerKind::Gcn,
                    if i == 0 { in_dim } else { config.hidden_dim },
                    config.hidden_dim,
                ),
                ModelKind::Sage => (
                    LayerKind::Sage,
                    if i == 0 { in_dim } else { config.hidden_dim },
                    config.hidden_dim,
                ),
                ModelKind::Gat => (
                    LayerKind::Gat { heads: config.heads },
                    if i == 0 { in_dim } else { config.hidden_dim },
                    config.hidden_dim,
                ),
                ModelKind::SheafGeneral => (
                    LayerKind::Sheaf {
                        stalk_dim: config.stalk_dim,
                        flavor: config.laplacian,
                        eps: config.laplacian_eps,
                    },
                    config.channels,
                    config.channels,
                ),
            };
            let spec = LayerSpec {
                kind,
                in_dim: in_dim_i,
                out_dim: out_dim_i,
                alpha: if last { 0.0 } else { config.alpha },
                activation: if last { Activation::Identity } else { config.activation },
                dropout: config.dropout,
                normalization: if last { NormKind::None } else { config.normalization },
            };
            layers.push(Layer::new(spec, &format!("layer{i}"), &mut params, rng)?);
        }

        let readout_w = params.add("readout.weight", glorot(rng, readout_in, 1, 1.0));
        let readout_b = params.add("readout.bias", Matrix::zeros(1, 1));

        Ok(Model {
            config: config.clone(),
            params,
            layers,
            input_proj,
            readout: (readout_w, readout_b),
            in_dim,
        })
    }

    /// Records a full forward pass on `tape` and returns the `n x 1` logit
    /// column.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        ops: &GraphOps,
        features: &Matrix,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Val> {
        if features.rows() != ops.num_nodes() || features.cols() != self.in_dim {
            return Err(Error::Shape {
                op: "model_forward",
                lhs_rows: ops.num_nodes(),
                lhs_cols: self.in_dim,
                rhs_rows: features.rows(),
                rhs_cols: features.cols(),
            });
        }
        let Model {
            config,
            params,
            layers,
            input_proj,
            readout,
            ..
        } = self;

        let mut h = tape.input(features.clone());
        if let Some((w, b)) = input_proj {
            let wv = tape.param(*w, params.get(*w).value.clone());
            let bv = tape.param(*b, params.get(*b).value.clone());
            h = tape.matmul(h, wv)?;
            h = tape.add_bias_row(h, bv)?;
            h = tape.reshape_stalks(h, config.stalk_dim)?;
        }
        for layer in layers.iter_mut() {
            h = layer.forward(tape, params, ops, h, training, rng)?;
        }
        if input_proj.is_some() {
            h = tape.flatten_stalks(h, config.stalk_dim)?;
        }
        let wv = tape.param(readout.0, params.get(readout.0).value.clone());
        let bv = tape.param(readout.1, params.get(readout.1).value.clone());
        let logits = tape.matmul(h, wv)?;
        tape.add_bias_row(logits, bv)
    }

    /// Evaluation-mode forward pass returning the logits as a plain matrix.
    pub fn logits(&mut self, ops: &GraphOps, features: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut tape, ops, features, false, &mut rng)?;
        Ok(tape.value(out).clone())
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }
}

use rand::SeedableRng;
