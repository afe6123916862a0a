//! The TGraph ranking network.
//!
//! Node features are embedded and projected by a two-layer MLP, refined by a
//! stack of graph convolutional blocks, mean-pooled over nodes and mapped to
//! one score per configuration. Lower scores mean faster predicted runtimes.

mod checkpoint;
mod input;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use input::{ConfigBatch, GraphInput};

use log::debug;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{gradcheck, AutodiffError, GradcheckReport, Tape, Tensor, Var, FD_STEP};
use crate::dataset::{CONFIG_FEAT_DIM, LAYOUT_SLOTS, NUMERIC_FEAT_DIM};

/// Rows of the layout embedding table: slot values `-1..=5` shifted by one.
pub const LAYOUT_VOCAB: usize = 7;
const CONFIG_SLOTS: usize = 3 * LAYOUT_SLOTS;
const NORM_EPS: f64 = 1e-5;
const L2_EPS: f64 = 1e-12;
/// Standard deviation of the opcode and layout embedding initialization.
const EMBED_STD: f64 = 1.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("graph `{graph_id}`: configuration {config} has {got} node layouts for {expected} configurable nodes")]
    MissingConfig {
        graph_id: String,
        config: usize,
        got: usize,
        expected: usize,
    },
    #[error("graph `{graph_id}`: {msg}")]
    Input { graph_id: String, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelMode {
    Layout,
    Tile,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub n_blocks: usize,
    pub opcode_embed_dim: usize,
    pub layout_embed_dim: usize,
    pub se_reduction: usize,
    pub use_self_attention: bool,
    pub use_cross_attention: bool,
    pub use_edges: bool,
    pub mode: ModelMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 256,
            n_blocks: 2,
            opcode_embed_dim: 16,
            layout_embed_dim: 4,
            se_reduction: 8,
            use_self_attention: true,
            use_cross_attention: true,
            use_edges: true,
            mode: ModelMode::Layout,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let c = self.hidden_dim;
        if c == 0 || !c.is_multiple_of(2) {
            return Err(ModelError::Config(format!("hidden_dim {c} must be even")));
        }
        if self.se_reduction == 0 || !(c / 2).is_multiple_of(self.se_reduction) {
            return Err(ModelError::Config(format!(
                "hidden_dim/2 = {} is not divisible by se_reduction {}",
                c / 2,
                self.se_reduction
            )));
        }
        if self.n_blocks == 0 {
            return Err(ModelError::Config("n_blocks must be at least 1".into()));
        }
        if self.opcode_embed_dim == 0 || self.layout_embed_dim == 0 {
            return Err(ModelError::Config(
                "embedding widths must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Width of the assembled per-node input vector.
    pub fn input_dim(&self) -> usize {
        let node = NUMERIC_FEAT_DIM + LAYOUT_SLOTS * self.layout_embed_dim + self.opcode_embed_dim;
        match self.mode {
            ModelMode::Layout => node + CONFIG_SLOTS * self.layout_embed_dim,
            ModelMode::Tile => node,
        }
    }

    fn half(&self) -> usize {
        self.hidden_dim / 2
    }

    fn bottleneck(&self) -> usize {
        self.half() / self.se_reduction
    }
}

/// A named learnable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Whether weight decay applies. False for biases, normalization shifts
    /// and the attention temperature.
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TGraphModel {
    config: ModelConfig,
    opcode_vocab: usize,
    params: Vec<Param>,
}

fn dense(params: &mut Vec<Param>, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    params.push(Param {
        name: format!("{name}.weight"),
        value: Tensor::uniform(&[fan_in, fan_out], bound, rng),
        decay: true,
    });
    params.push(Param {
        name: format!("{name}.bias"),
        value: Tensor::zeros(&[fan_out]),
        decay: false,
    });
}

impl TGraphModel {
    pub fn new(config: ModelConfig, opcode_vocab: usize, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if opcode_vocab == 0 {
            return Err(ModelError::Config("opcode vocabulary is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.hidden_dim;
        let mut params = Vec::new();
        params.push(Param {
            name: "layout_embedding".into(),
            value: Tensor::randn(
                &[LAYOUT_VOCAB, config.layout_embed_dim],
                EMBED_STD,
                &mut rng,
            ),
            decay: true,
        });
        params.push(Param {
            name: "opcode_embedding".into(),
            value: Tensor::randn(
                &[opcode_vocab, config.opcode_embed_dim],
                EMBED_STD,
                &mut rng,
            ),
            decay: true,
        });
        dense(&mut params, "f_in.0", config.input_dim(), c, &mut rng);
        dense(&mut params, "f_in.1", c, c, &mut rng);
        for k in 0..config.n_blocks {
            params.push(Param {
                name: format!("block{k}.norm.gamma"),
                value: Tensor::full(&[c], 1.0),
                decay: true,
            });
            params.push(Param {
                name: format!("block{k}.norm.beta"),
                value: Tensor::zeros(&[c]),
                decay: false,
            });
            dense(&mut params, &format!("block{k}.f1"), c, c, &mut rng);
            dense(
                &mut params,
                &format!("block{k}.f2"),
                2 * c,
                config.half(),
                &mut rng,
            );
            dense(
                &mut params,
                &format!("block{k}.f_excitation"),
                config.half(),
                config.bottleneck(),
                &mut rng,
            );
            dense(
                &mut params,
                &format!("block{k}.f_squeeze"),
                config.bottleneck(),
                config.half(),
                &mut rng,
            );
            params.push(Param {
                name: format!("block{k}.log_temperature"),
                value: Tensor::zeros(&[1]),
                decay: false,
            });
        }
        let head_in = match config.mode {
            ModelMode::Layout => c,
            ModelMode::Tile => c + CONFIG_FEAT_DIM,
        };
        dense(&mut params, "f_out", head_in, 1, &mut rng);
        let model = Self {
            config,
            opcode_vocab,
            params,
        };
        debug!("model with {} parameters", model.parameter_count());
        Ok(model)
    }

    /// Rebuilds a model from stored tensors, checking names and shapes against
    /// a freshly initialized layout.
    pub fn from_params(
        config: ModelConfig,
        opcode_vocab: usize,
        stored: Vec<(String, Tensor)>,
    ) -> Result<Self, ModelError> {
        let mut model = Self::new(config, opcode_vocab, 0)?;
        if stored.len() != model.params.len() {
            return Err(ModelError::Checkpoint(format!(
                "{} tensors stored, model has {}",
                stored.len(),
                model.params.len()
            )));
        }
        for (p, (name, value)) in model.params.iter_mut().zip(stored) {
            if p.name != name || p.value.shape() != value.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "expected `{}` {:?}, found `{name}` {:?}",
                    p.name,
                    p.value.shape(),
                    value.shape()
                )));
            }
            p.value = value;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn opcode_vocab(&self) -> usize {
        self.opcode_vocab
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Attention temperature of block `k`.
    pub fn temperature(&self, k: usize) -> Option<f64> {
        self.param(&format!("block{k}.log_temperature"))
            .and_then(|p| p.value.item())
            .map(f64::exp)
    }

    /// Puts every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        Bound {
            names: self.params.iter().map(|p| p.name.clone()).collect(),
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), requires_grad))
                .collect(),
        }
    }

    fn check_input(&self, graph: &GraphInput, batch: &ConfigBatch) -> Result<(), ModelError> {
        let bad = |msg: String| ModelError::Input {
            graph_id: graph.graph_id.clone(),
            msg,
        };
        match (self.config.mode, batch) {
            (ModelMode::Layout, ConfigBatch::Layout { slots, n_configs }) => {
                if slots.len() != n_configs * graph.configurable_nodes.len() * CONFIG_SLOTS {
                    return Err(bad(
                        "layout batch does not match the configurable nodes".into()
                    ));
                }
            }
            (ModelMode::Tile, ConfigBatch::Tile { features }) => {
                if features.shape().get(1) != Some(&CONFIG_FEAT_DIM) {
                    return Err(bad(format!(
                        "tile features have shape {:?}",
                        features.shape()
                    )));
                }
            }
            _ => {
                return Err(bad(
                    "configuration batch does not match the model mode".into()
                ))
            }
        }
        if batch.is_empty() {
            return Err(bad("empty configuration batch".into()));
        }
        if let Some(&op) = graph.opcodes.iter().find(|&&o| o >= self.opcode_vocab) {
            return Err(bad(format!(
                "opcode {op} outside the vocabulary of {}",
                self.opcode_vocab
            )));
        }
        Ok(())
    }

    /// Concatenated network input `[n_configs, n_nodes, input_dim]`: scaled
    /// numeric features, embedded node layout slots, embedded configuration
    /// slots (zeros on non-configurable nodes) and the opcode embedding.
    pub fn assemble_features(
        &self,
        graph: &GraphInput,
        batch: &ConfigBatch,
    ) -> Result<Tensor, ModelError> {
        self.check_input(graph, batch)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = self.assemble_on_tape(&mut tape, &bound, graph, batch)?;
        Ok(tape.value(x).clone())
    }

    fn assemble_on_tape(
        &self,
        tape: &mut Tape,
        p: &Bound,
        graph: &GraphInput,
        batch: &ConfigBatch,
    ) -> Result<Var, ModelError> {
        let n = graph.n_nodes();
        let b = batch.len();
        let node = self.node_sections(tape, p, graph)?;
        let [numeric, slots, opcode] = node;
        let mut parts = Vec::new();
        for part in [numeric, slots] {
            let width = tape.shape(part)[1];
            let rep = tape.gather(part, 0, &tile_indices(n, b))?;
            parts.push(tape.reshape(rep, &[b, n, width])?);
        }
        if let ConfigBatch::Layout { .. } = batch {
            let cfg = self.config_section(tape, p, graph, batch)?;
            parts.push(tape.segment_sum(cfg, 1, &graph.configurable_nodes, n)?);
        }
        let width = tape.shape(opcode)[1];
        let rep = tape.gather(opcode, 0, &tile_indices(n, b))?;
        parts.push(tape.reshape(rep, &[b, n, width])?);
        Ok(tape.concat(&parts, 2)?)
    }

    /// Scaled numeric features, embedded node layout slots and opcode
    /// embedding, each `[n_nodes, width]`.
    fn node_sections(
        &self,
        tape: &mut Tape,
        p: &Bound,
        graph: &GraphInput,
    ) -> Result<[Var; 3], ModelError> {
        let n = graph.n_nodes();
        let numeric = tape.constant(graph.numeric.clone());
        let slots = tape.embedding(
            p.get("layout_embedding"),
            &graph.node_slots,
            &[n, LAYOUT_SLOTS],
        )?;
        let slots = tape.reshape(slots, &[n, LAYOUT_SLOTS * self.config.layout_embed_dim])?;
        let opcode = tape.embedding(p.get("opcode_embedding"), &graph.opcodes, &[n])?;
        Ok([numeric, slots, opcode])
    }

    /// Embedded configuration slots `[n_configs, n_configurable, 72]`.
    fn config_section(
        &self,
        tape: &mut Tape,
        p: &Bound,
        graph: &GraphInput,
        batch: &ConfigBatch,
    ) -> Result<Var, ModelError> {
        let ConfigBatch::Layout { slots, n_configs } = batch else {
            unreachable!("config section is layout-only");
        };
        let m = graph.configurable_nodes.len();
        let e = tape.embedding(
            p.get("layout_embedding"),
            slots,
            &[*n_configs, m, CONFIG_SLOTS],
        )?;
        Ok(tape.reshape(
            e,
            &[*n_configs, m, CONFIG_SLOTS * self.config.layout_embed_dim],
        )?)
    }

    /// First `f_in` layer without materializing the assembled input: the
    /// node-shared sections are projected once per node and the configuration
    /// section once per configurable node.
    fn input_projection(
        &self,
        tape: &mut Tape,
        p: &Bound,
        graph: &GraphInput,
        batch: &ConfigBatch,
    ) -> Result<Var, ModelError> {
        let n = graph.n_nodes();
        let le = self.config.layout_embed_dim;
        let w = p.get("f_in.0.weight");
        let node = self.node_sections(tape, p, graph)?;
        let node_slot_rows = LAYOUT_SLOTS * le;
        let config_rows = match self.config.mode {
            ModelMode::Layout => CONFIG_SLOTS * le,
            ModelMode::Tile => 0,
        };
        let offsets = [
            (0, NUMERIC_FEAT_DIM),
            (NUMERIC_FEAT_DIM, node_slot_rows),
            (
                NUMERIC_FEAT_DIM + node_slot_rows + config_rows,
                self.config.opcode_embed_dim,
            ),
        ];
        let mut shared = tape.constant(Tensor::zeros(&[n, self.config.hidden_dim]));
        for (part, (start, len)) in node.into_iter().zip(offsets) {
            let rows = tape.narrow(w, 0, start, len)?;
            let proj = tape.matmul(part, rows)?;
            shared = tape.add(shared, proj)?;
        }
        shared = tape.add(shared, p.get("f_in.0.bias"))?;
        match self.config.mode {
            ModelMode::Layout => {
                let cfg = self.config_section(tape, p, graph, batch)?;
                let rows = tape.narrow(w, 0, NUMERIC_FEAT_DIM + node_slot_rows, config_rows)?;
                let proj = tape.matmul(cfg, rows)?;
                let scattered = tape.segment_sum(proj, 1, &graph.configurable_nodes, n)?;
                Ok(tape.add(scattered, shared)?)
            }
            // Tile configurations share every node feature, so the graph trunk
            // runs once and configurations enter through the head.
            ModelMode::Tile => Ok(tape.reshape(shared, &[1, n, self.config.hidden_dim])?),
        }
    }

    /// Scores `[n_configs]` for one graph and one configuration batch.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        graph: &GraphInput,
        batch: &ConfigBatch,
    ) -> Result<Var, ModelError> {
        self.check_input(graph, batch)?;
        let h = self.input_projection(tape, p, graph, batch)?;
        self.forward_from_projection(tape, p, graph, batch, h)
    }

    fn forward_from_projection(
        &self,
        tape: &mut Tape,
        p: &Bound,
        graph: &GraphInput,
        batch: &ConfigBatch,
        h: Var,
    ) -> Result<Var, ModelError> {
        let mut x = tape.gelu(h)?;
        x = linear(tape, x, p.get("f_in.1.weight"), p.get("f_in.1.bias"))?;
        x = tape.gelu(x)?;
        let flags = BlockFlags::from(&self.config);
        for k in 0..self.config.n_blocks {
            let bp = BlockParams::from_bound(p, k);
            x = conv_block(tape, x, &graph.neighbors, &bp, flags)?;
        }
        let pooled = tape.mean(x, 1)?;
        let b = batch.len();
        let head_in = match batch {
            ConfigBatch::Layout { .. } => pooled,
            ConfigBatch::Tile { features } => {
                let rep = tape.gather(pooled, 0, &vec![0; b])?;
                let cfg = tape.constant(features.clone());
                tape.concat(&[rep, cfg], 1)?
            }
        };
        let out = linear(tape, head_in, p.get("f_out.weight"), p.get("f_out.bias"))?;
        Ok(tape.reshape(out, &[b])?)
    }

    /// Scores without gradient bookkeeping.
    pub fn score(&self, graph: &GraphInput, batch: &ConfigBatch) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let s = self.forward(&mut tape, &bound, graph, batch)?;
        Ok(tape.value(s).data().to_vec())
    }
}

/// Parameter leaves of one model on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("no parameter named `{name}`"));
        self.vars[i]
    }

    /// Replaces the var bound to `name`, e.g. to route externally created
    /// leaves through the forward pass.
    pub fn set(&mut self, name: &str, var: Var) {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("no parameter named `{name}`"));
        self.vars[i] = var;
    }

    /// Vars in the model's parameter order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn tile_indices(n: usize, copies: usize) -> Vec<usize> {
    (0..copies).flat_map(|_| 0..n).collect()
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// Undirected neighbor lists in gather/scatter form: the message at position
/// `j` flows from node `src[j]` into node `dst[j]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Neighbors {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
}

impl Neighbors {
    pub fn undirected(edges: &[(usize, usize)]) -> Self {
        let mut out = Self::default();
        for &(s, d) in edges {
            out.src.push(s);
            out.dst.push(d);
            if s != d {
                out.src.push(d);
                out.dst.push(s);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockFlags {
    pub self_attention: bool,
    pub cross_attention: bool,
    pub edges: bool,
}

impl From<&ModelConfig> for BlockFlags {
    fn from(c: &ModelConfig) -> Self {
        Self {
            self_attention: c.use_self_attention,
            cross_attention: c.use_cross_attention,
            edges: c.use_edges,
        }
    }
}

/// Vars of one convolutional block.
#[derive(Debug, Clone, Copy)]
pub struct BlockParams {
    pub gamma: Var,
    pub beta: Var,
    pub f1: (Var, Var),
    pub f2: (Var, Var),
    pub excitation: (Var, Var),
    pub squeeze: (Var, Var),
    pub log_temperature: Var,
}

impl BlockParams {
    fn from_bound(p: &Bound, k: usize) -> Self {
        let g = |s: &str| p.get(&format!("block{k}.{s}"));
        Self {
            gamma: g("norm.gamma"),
            beta: g("norm.beta"),
            f1: (g("f1.weight"), g("f1.bias")),
            f2: (g("f2.weight"), g("f2.bias")),
            excitation: (g("f_excitation.weight"), g("f_excitation.bias")),
            squeeze: (g("f_squeeze.weight"), g("f_squeeze.bias")),
            log_temperature: g("log_temperature"),
        }
    }
}

/// `L2norm(f2(concat(x_i, sum_{j in N(i)} f1(x_j))))` on `[B, N, C]` input,
/// giving `[B, N, C/2]`. Without edges the neighbor sum is zero.
pub fn graphsage(
    tape: &mut Tape,
    x: Var,
    neighbors: &Neighbors,
    f1: (Var, Var),
    f2: (Var, Var),
    use_edges: bool,
) -> Result<Var, AutodiffError> {
    let shape = tape.shape(x).to_vec();
    let n = shape[1];
    let agg = if use_edges && !neighbors.src.is_empty() {
        let m = linear(tape, x, f1.0, f1.1)?;
        let msgs = tape.gather(m, 1, &neighbors.src)?;
        tape.segment_sum(msgs, 1, &neighbors.dst, n)?
    } else {
        let width = tape.shape(f1.0)[1];
        tape.constant(Tensor::zeros(&[shape[0], n, width]))
    };
    let h = tape.concat(&[x, agg], 2)?;
    let s = linear(tape, h, f2.0, f2.1)?;
    tape.l2_normalize(s, 2, L2_EPS)
}

/// Squeeze-and-excitation gate over channels:
/// `eta * sigmoid(f_squeeze(relu(f_excitation(eta))))`.
pub fn channel_self_attention(
    tape: &mut Tape,
    eta: Var,
    excitation: (Var, Var),
    squeeze: (Var, Var),
) -> Result<Var, AutodiffError> {
    let z = linear(tape, eta, excitation.0, excitation.1)?;
    let z = tape.relu(z)?;
    let z = linear(tape, z, squeeze.0, squeeze.1)?;
    let gate = tape.sigmoid(z)?;
    tape.mul(eta, gate)
}

/// `eta * softmax_b(eta / T)`, the softmax running over the configuration axis.
pub fn cross_config_attention(
    tape: &mut Tape,
    eta: Var,
    log_temperature: Var,
) -> Result<Var, AutodiffError> {
    let t = tape.exp(log_temperature)?;
    let w = tape.softmax(eta, 0, t)?;
    tape.mul(eta, w)
}

/// One graph convolutional block on `[B, N, C]`:
/// `eps + GELU(concat(eta, A_cross(eta)))` with
/// `eta = A_self(GraphSAGE(InstanceNorm(eps)))`.
pub fn conv_block(
    tape: &mut Tape,
    eps: Var,
    neighbors: &Neighbors,
    p: &BlockParams,
    flags: BlockFlags,
) -> Result<Var, AutodiffError> {
    let x = tape.instance_norm(eps, p.gamma, p.beta, 1, NORM_EPS)?;
    let mut eta = graphsage(tape, x, neighbors, p.f1, p.f2, flags.edges)?;
    if flags.self_attention {
        eta = channel_self_attention(tape, eta, p.excitation, p.squeeze)?;
    }
    let cross = if flags.cross_attention {
        cross_config_attention(tape, eta, p.log_temperature)?
    } else {
        eta
    };
    let cat = tape.concat(&[eta, cross], 2)?;
    let act = tape.gelu(cat)?;
    tape.add(eps, act)
}

/// Gradchecks one full convolutional block (all attentions and edges on)
/// with respect to its input and every block parameter. Shapes stay within
/// 6x5x4: 3 configurations, 5 nodes, 4 channels, bottleneck width 1.
pub fn block_gradcheck(seed: u64) -> Result<GradcheckReport, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, n, c) = (3, 5, 4);
    let half = c / 2;
    let bottleneck = 1;
    let shapes: [&[usize]; 14] = [
        &[b, n, c],
        &[c],
        &[c],
        &[c, c],
        &[c],
        &[2 * c, half],
        &[half],
        &[half, bottleneck],
        &[bottleneck],
        &[bottleneck, half],
        &[half],
        &[1],
        &[b, n, c],
        &[],
    ];
    let inputs: Vec<Tensor> = shapes[..12]
        .iter()
        .map(|s| Tensor::randn(s, 1.0, &mut rng))
        .collect();
    let weights = Tensor::randn(shapes[12], 1.0, &mut rng);
    let neighbors = Neighbors::undirected(&[(0, 1), (1, 2), (3, 2), (0, 4)]);
    let flags = BlockFlags {
        self_attention: true,
        cross_attention: true,
        edges: true,
    };
    gradcheck("conv_block", &inputs, FD_STEP, |tape, v| {
        let p = BlockParams {
            gamma: v[1],
            beta: v[2],
            f1: (v[3], v[4]),
            f2: (v[5], v[6]),
            excitation: (v[7], v[8]),
            squeeze: (v[9], v[10]),
            log_temperature: v[11],
        };
        let out = conv_block(tape, v[0], &neighbors, &p, flags)?;
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w)?;
        tape.sum(prod)
    })
}
