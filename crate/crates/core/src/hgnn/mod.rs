//! The hierarchical embedding model.
//!
//! Stage one runs a stack of graph convolutions over every CFG and collapses
//! its blocks with a readout; stage two convolves the resulting function
//! vectors over the call graph. A convolution updates node `k` as
//! `ReLU(h_k·W + (Σ_{m∈N(k)} h_m)·M)`; the optional attention layer computes
//! `ReLU(Σ_j α_kj · h_j·W)` with `α` a softmax of `LeakyReLU([h_k·W ‖ h_j·W]·a)`
//! over `N(k) ∪ {k}`. Weights are stored `d_in × d_out` and applied to row
//! vectors; there are no bias terms.

mod checkpoint;
mod config;

pub use checkpoint::{Checkpoint, ParamRecord, CHECKPOINT_FORMAT};
pub use config::{LayerStackConfig, ModelConfig, NeighborMode, Readout};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::gog::{Gog, NUM_FEATURES};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, TensorError, Var};

/// Negative slope of the attention logits' LeakyReLU.
pub const ATTENTION_SLOPE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum HgnnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("empty graph")]
    EmptyGraph,
    #[error("{binary}: function {function} has no blocks (strip thunks first)")]
    EmptyFunction { binary: String, function: usize },
    #[error("{binary}: function {function} block {block} has {found} features, expected {expected}")]
    FeatureWidth {
        binary: String,
        function: usize,
        block: usize,
        found: usize,
        expected: usize,
    },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// `(node, neighbor)` pairs for the chosen direction, sorted and deduplicated.
pub fn neighbor_pairs(edges: &[(usize, usize)], mode: NeighborMode) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(edges.len() * 2);
    for &(s, d) in edges {
        if matches!(mode, NeighborMode::Out | NeighborMode::Both) {
            pairs.push((s, d));
        }
        if matches!(mode, NeighborMode::In | NeighborMode::Both) {
            pairs.push((d, s));
        }
    }
    pairs.sort_unstable();
    pairs.dedup();
    pairs
}

/// Neighbor pairs plus a self pair for every node.
fn attention_pairs(neighbors: &[(usize, usize)], n: usize) -> Vec<(usize, usize)> {
    let mut pairs: Vec<_> = neighbors.iter().copied().chain((0..n).map(|i| (i, i))).collect();
    pairs.sort_unstable();
    pairs.dedup();
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Gcn { w: ParamId, m: ParamId },
    Gat { w: ParamId, a: ParamId },
}

/// Graph structure over `n` nodes in the form the layers consume.
#[derive(Debug, Clone, Default)]
pub struct Adjacency {
    pub n: usize,
    pub neighbors: Vec<(usize, usize)>,
    pub attention: Vec<(usize, usize)>,
}

impl Adjacency {
    pub fn new(n: usize, edges: &[(usize, usize)], mode: NeighborMode) -> Self {
        let neighbors = neighbor_pairs(edges, mode);
        let attention = attention_pairs(&neighbors, n);
        Self {
            n,
            neighbors,
            attention,
        }
    }
}

/// One convolution on the tape.
pub fn gcn_forward(g: &mut Graph, x: Var, adj: &Adjacency, w: Var, m: Var) -> Result<Var, HgnnError> {
    let own = g.matmul(x, w)?;
    let gathered = g.scatter_add(x, adj.neighbors.clone(), adj.n)?;
    let msg = g.matmul(gathered, m)?;
    let pre = g.add(own, msg)?;
    Ok(g.relu(pre))
}

/// One single-head attention layer on the tape.
pub fn gat_forward(g: &mut Graph, x: Var, adj: &Adjacency, w: Var, a: Var) -> Result<Var, HgnnError> {
    let z = g.matmul(x, w)?;
    let dst: Vec<usize> = adj.attention.iter().map(|p| p.0).collect();
    let src: Vec<usize> = adj.attention.iter().map(|p| p.1).collect();
    let zi = g.gather_rows(z, dst.clone())?;
    let zj = g.gather_rows(z, src)?;
    let both = g.concat(zi, zj)?;
    let logits = g.matmul(both, a)?;
    let logits = g.leaky_relu(logits, ATTENTION_SLOPE)?;
    let alpha = g.softmax_over_group(logits, dst, adj.n)?;
    let mixed = g.weighted_scatter_add(alpha, z, adj.attention.clone(), adj.n)?;
    Ok(g.relu(mixed))
}

pub fn readout_forward(g: &mut Graph, x: Var, groups: Vec<usize>, n_groups: usize, kind: Readout) -> Result<Var, HgnnError> {
    Ok(match kind {
        Readout::Sum => g.segment_sum(x, groups, n_groups)?,
        Readout::Mean => g.segment_mean(x, groups, n_groups)?,
        Readout::Max => g.segment_max(x, groups, n_groups)?,
    })
}

/// Convolution over a standalone graph. `w` and `m` are `d_in × d_out`.
pub fn gcn_layer(
    x: &Tensor,
    edges: &[(usize, usize)],
    w: &Tensor,
    m: &Tensor,
    mode: NeighborMode,
) -> Result<Tensor, HgnnError> {
    let mut g = Graph::new();
    let adj = Adjacency::new(x.rows(), edges, mode);
    let (xv, wv, mv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(m.clone()));
    let out = gcn_forward(&mut g, xv, &adj, wv, mv)?;
    Ok(g.value(out).clone())
}

/// Attention layer over a standalone graph. `a` is `2·d_out × 1`.
pub fn gat_layer(
    x: &Tensor,
    edges: &[(usize, usize)],
    w: &Tensor,
    a: &Tensor,
    mode: NeighborMode,
) -> Result<Tensor, HgnnError> {
    let mut g = Graph::new();
    let adj = Adjacency::new(x.rows(), edges, mode);
    let (xv, wv, av) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(a.clone()));
    let out = gat_forward(&mut g, xv, &adj, wv, av)?;
    Ok(g.value(out).clone())
}

/// Collapses all node rows into one graph vector.
pub fn readout(x: &Tensor, kind: Readout) -> Result<Vec<f64>, HgnnError> {
    if x.rows() == 0 {
        return Err(HgnnError::EmptyGraph);
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = readout_forward(&mut g, xv, vec![0; x.rows()], 1, kind)?;
    Ok(g.value(out).data().to_vec())
}

/// Several binaries flattened into one block graph and one function graph.
#[derive(Debug, Clone)]
pub struct PackedBatch {
    pub features: Tensor,
    pub blocks: Adjacency,
    pub block_function: Vec<usize>,
    pub functions: Adjacency,
    /// First function row of each binary, plus the total at the end.
    pub offsets: Vec<usize>,
}

impl PackedBatch {
    pub fn new(gogs: &[&Gog], config: &ModelConfig) -> Result<Self, HgnnError> {
        let mut feats = Vec::new();
        let mut block_edges = Vec::new();
        let mut block_function = Vec::new();
        let mut call_edges = Vec::new();
        let mut offsets = vec![0];
        let (mut n_blocks, mut n_functions) = (0usize, 0usize);
        for gog in gogs {
            for (fi, f) in gog.functions.iter().enumerate() {
                if f.blocks.is_empty() {
                    return Err(HgnnError::EmptyFunction {
                        binary: format!("{}/{}/{}", gog.package, gog.binary_name, gog.arch),
                        function: fi,
                    });
                }
                for (bi, b) in f.blocks.iter().enumerate() {
                    if b.0.len() != NUM_FEATURES {
                        return Err(HgnnError::FeatureWidth {
                            binary: format!("{}/{}/{}", gog.package, gog.binary_name, gog.arch),
                            function: fi,
                            block: bi,
                            found: b.0.len(),
                            expected: NUM_FEATURES,
                        });
                    }
                    feats.extend_from_slice(&b.0);
                    block_function.push(n_functions + fi);
                }
                block_edges.extend(f.edges.iter().map(|&(s, d)| (n_blocks + s, n_blocks + d)));
                n_blocks += f.blocks.len();
            }
            call_edges.extend(gog.call_edges.iter().map(|&(s, d)| (n_functions + s, n_functions + d)));
            n_functions += gog.functions.len();
            offsets.push(n_functions);
        }
        Ok(Self {
            features: Tensor::matrix(n_blocks, NUM_FEATURES, feats)?,
            blocks: Adjacency::new(n_blocks, &block_edges, config.cfg_stack.neighbor_mode),
            block_function,
            functions: Adjacency::new(n_functions, &call_edges, config.gog_stack.neighbor_mode),
            offsets,
        })
    }

    pub fn n_functions(&self) -> usize {
        self.functions.n
    }
}

/// Model weights plus the layer layout they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    seed: u64,
    params: ParamStore,
    cfg_layers: Vec<Layer>,
    gog_layers: Vec<Layer>,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::matrix(rows, cols, data).expect("finite init")
}

fn build_stack(
    params: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    level: &str,
    stack: &LayerStackConfig,
    names: (&str, &str),
) -> Vec<Layer> {
    let h = stack.hidden_dim;
    let mut layers = Vec::with_capacity(stack.depth());
    let mut d_in = stack.input_dim;
    for i in 0..stack.n_gcn {
        let w = params.add(format!("{level}.{i}.{}", names.0), uniform(rng, d_in, h));
        let m = params.add(format!("{level}.{i}.{}", names.1), uniform(rng, d_in, h));
        layers.push(Layer::Gcn { w, m });
        d_in = h;
    }
    if stack.use_gat {
        let i = stack.n_gcn;
        let w = params.add(format!("{level}.{i}.W"), uniform(rng, d_in, h));
        let a = params.add(format!("{level}.{i}.a"), uniform(rng, 2 * h, 1));
        layers.push(Layer::Gat { w, a });
    }
    layers
}

impl Model {
    /// Fresh model with weights drawn uniformly from `±1/√fan_in`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, HgnnError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let cfg_layers = build_stack(&mut params, &mut rng, "cfg", &config.cfg_stack, ("W", "M"));
        let gog_layers = build_stack(&mut params, &mut rng, "gog", &config.gog_stack, ("U", "V"));
        Ok(Self {
            config,
            seed,
            params,
            cfg_layers,
            gog_layers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn cfg_layers(&self) -> &[Layer] {
        &self.cfg_layers
    }

    pub fn gog_layers(&self) -> &[Layer] {
        &self.gog_layers
    }

    fn run_stack(&self, g: &mut Graph, layers: &[Layer], mut x: Var, adj: &Adjacency) -> Result<Var, HgnnError> {
        for layer in layers {
            x = match *layer {
                Layer::Gcn { w, m } => {
                    let (w, m) = (g.param(&self.params, w), g.param(&self.params, m));
                    gcn_forward(g, x, adj, w, m)?
                }
                Layer::Gat { w, a } => {
                    let (w, a) = (g.param(&self.params, w), g.param(&self.params, a));
                    gat_forward(g, x, adj, w, a)?
                }
            };
        }
        Ok(x)
    }

    /// Records the two-stage forward pass; returns one row per function,
    /// binaries concatenated in input order.
    pub fn forward_packed(&self, g: &mut Graph, batch: &PackedBatch) -> Result<Var, HgnnError> {
        let x = g.constant(batch.features.clone());
        let blocks = self.run_stack(g, &self.cfg_layers, x, &batch.blocks)?;
        let functions = readout_forward(
            g,
            blocks,
            batch.block_function.clone(),
            batch.n_functions(),
            self.config.cfg_stack.readout,
        )?;
        self.run_stack(g, &self.gog_layers, functions, &batch.functions)
    }

    pub fn forward(&self, g: &mut Graph, gogs: &[&Gog]) -> Result<(Var, Vec<usize>), HgnnError> {
        let batch = PackedBatch::new(gogs, &self.config)?;
        let out = self.forward_packed(g, &batch)?;
        Ok((out, batch.offsets))
    }

    /// Final embedding of every function, aligned with function ids.
    pub fn embed_functions(&self, gog: &Gog) -> Result<Vec<Vec<f64>>, HgnnError> {
        let mut g = Graph::new();
        let (out, _) = self.forward(&mut g, &[gog])?;
        Ok(g.value(out).to_rows())
    }

    /// CFG-stage embeddings (after readout, before call-graph convolution).
    pub fn embed_cfgs(&self, gog: &Gog) -> Result<Vec<Vec<f64>>, HgnnError> {
        let batch = PackedBatch::new(&[gog], &self.config)?;
        let mut g = Graph::new();
        let x = g.constant(batch.features.clone());
        let blocks = self.run_stack(&mut g, &self.cfg_layers, x, &batch.blocks)?;
        let out = readout_forward(
            &mut g,
            blocks,
            batch.block_function.clone(),
            batch.n_functions(),
            self.config.cfg_stack.readout,
        )?;
        Ok(g.value(out).to_rows())
    }
}
