//! Surrogate model definitions: the five-component base GNN, its three
//! mixture-of-experts variants, and the two-level hierarchical model.
//!
//! Parameter containers are generic over their leaf type so the same
//! structure describes stored tensors (`ModelParams<Tensor>`) and
//! tape-bound variables (`ModelParams<Var>`); `map` converts between the
//! two and `visit` drives checkpoints and the optimizer in one stable
//! order.

pub mod batch;
pub mod harp;
pub mod hier;
pub mod moe;

pub use batch::{EncodedGraph, GraphBatch};

use crate::cdfg::{PragmaKind, N_TARGETS};
use crate::nn::{Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Which surrogate structure a single (non-hierarchical) model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Harp,
    NodeMoe,
    BlockMoe,
    GraphMoe,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Harp => "harp",
            Variant::NodeMoe => "node_moe",
            Variant::BlockMoe => "block_moe",
            Variant::GraphMoe => "graph_moe",
        }
    }
}

/// Structural variants of the block MoE model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockVariant {
    /// Post-pragma GNN layer removed, pooling on pseudo nodes only.
    Standard,
    /// Keep the post-pragma GNN layer, pooling on pseudo nodes only.
    KeepPostGnn,
    /// Keep the post-pragma GNN layer and the dual pooling.
    KeepPostGnnDualPool,
}

/// Prediction head layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    /// Five scalar regression heads (perf + four resources).
    Regression,
    /// One two-class validity head.
    Classification,
}

impl OutputKind {
    pub fn head_count(self) -> usize {
        match self {
            OutputKind::Regression => N_TARGETS,
            OutputKind::Classification => 1,
        }
    }

    pub fn head_width(self) -> usize {
        match self {
            OutputKind::Regression => 1,
            OutputKind::Classification => 2,
        }
    }
}

/// High-level gate designs for the hierarchical model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateDesign {
    /// Attention pooling over raw node features feeds the gate head.
    InputPooling,
    /// Concatenation of the three experts' graph representations feeds it.
    HiddenConcat,
}

/// Which low-level models the hierarchical model aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HierExperts {
    /// Node, block, and graph MoE (the full model).
    Mixed,
    /// Three copies of a single granularity (ablation).
    Node,
    Block,
    Graph,
}

impl HierExperts {
    pub fn variants(self) -> [Variant; 3] {
        match self {
            HierExperts::Mixed => [Variant::NodeMoe, Variant::BlockMoe, Variant::GraphMoe],
            HierExperts::Node => [Variant::NodeMoe; 3],
            HierExperts::Block => [Variant::BlockMoe; 3],
            HierExperts::Graph => [Variant::GraphMoe; 3],
        }
    }
}

/// Configuration of one single-level model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelCfg {
    pub f_in: usize,
    pub hidden: usize,
    pub encoder_layers: usize,
    pub dropout: f64,
    pub experts: usize,
    pub variant: Variant,
    pub block_variant: BlockVariant,
    pub outputs: OutputKind,
}

impl ModelCfg {
    pub fn new(f_in: usize, variant: Variant) -> Self {
        ModelCfg {
            f_in,
            hidden: 64,
            encoder_layers: 6,
            dropout: 0.1,
            experts: 4,
            variant,
            block_variant: BlockVariant::Standard,
            outputs: OutputKind::Regression,
        }
    }

    /// Whether the model pools normal (non-pseudo) nodes in addition to
    /// pseudo nodes.
    pub fn dual_pooling(&self) -> bool {
        self.variant != Variant::BlockMoe || self.block_variant == BlockVariant::KeepPostGnnDualPool
    }

    /// Width of the graph representation after pooling.
    pub fn repr_width(&self) -> usize {
        if self.dual_pooling() {
            2 * self.hidden
        } else {
            self.hidden
        }
    }

    pub fn config_hash(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("cfg serializes"));
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }
}

/// Configuration of the hierarchical model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HierCfg {
    pub base: ModelCfg,
    pub gate_design: GateDesign,
    pub experts_mix: HierExperts,
    /// Zero-init the gate head so every input starts at uniform weights.
    pub constant_gate_init: bool,
}

impl HierCfg {
    pub fn new(f_in: usize) -> Self {
        HierCfg {
            base: ModelCfg::new(f_in, Variant::NodeMoe),
            gate_design: GateDesign::HiddenConcat,
            experts_mix: HierExperts::Mixed,
            constant_gate_init: true,
        }
    }

    pub fn expert_cfgs(&self) -> [ModelCfg; 3] {
        self.experts_mix.variants().map(|v| ModelCfg {
            variant: v,
            ..self.base
        })
    }

    pub fn config_hash(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("cfg serializes"));
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }
}

// ---------------------------------------------------------------------------
// Parameter containers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Linear<L> {
    pub w: L,
    pub b: Option<L>,
}

#[derive(Debug, Clone)]
pub struct Mlp<L> {
    pub layers: Vec<Linear<L>>,
}

/// One message-passing layer: a self transform plus one linear transform
/// per directed edge class.
#[derive(Debug, Clone)]
pub struct GnnLayer<L> {
    pub self_w: L,
    pub edge_w: Vec<L>,
}

/// Self-attention pooling head: a two-layer score MLP.
#[derive(Debug, Clone)]
pub struct AttnPool<L> {
    pub score: Mlp<L>,
}

/// Encoder plus per-pragma-kind MLPs, shared by every variant.
#[derive(Debug, Clone)]
pub struct Trunk<L> {
    pub encoder: Vec<GnnLayer<L>>,
    /// Indexed by [`PragmaKind::index`].
    pub pragma_mlps: Vec<Mlp<L>>,
}

/// The stage between the pragma MLPs and pooling.
#[derive(Debug, Clone)]
pub enum Mid<L> {
    PostGnn(GnnLayer<L>),
    NodeMoe { experts: Vec<GnnLayer<L>>, gate: L },
    BlockMoe { post_gnn: Option<GnnLayer<L>>, experts: Vec<L>, gate: L },
}

#[derive(Debug, Clone)]
pub struct Pooling<L> {
    pub pseudo: AttnPool<L>,
    pub normal: Option<AttnPool<L>>,
}

#[derive(Debug, Clone)]
pub enum Output<L> {
    Heads(Vec<Mlp<L>>),
    GraphMoe { experts: Vec<Vec<Mlp<L>>>, gate: L },
}

/// Full parameter set of one single-level model.
#[derive(Debug, Clone)]
pub struct ModelParams<L> {
    pub cfg: ModelCfg,
    pub trunk: Trunk<L>,
    pub mid: Mid<L>,
    pub pooling: Pooling<L>,
    pub output: Output<L>,
}

/// High-level gate parameters.
#[derive(Debug, Clone)]
pub struct HighGate<L> {
    pub head: Linear<L>,
    /// Attention MLP over raw input features (InputPooling design only).
    pub input_attn: Option<Mlp<L>>,
}

/// The hierarchical model: three complete low-level models plus the gate.
#[derive(Debug, Clone)]
pub struct HierParams<L> {
    pub cfg: HierCfg,
    pub experts: Vec<ModelParams<L>>,
    pub gate: HighGate<L>,
}

impl<L> Linear<L> {
    pub fn map<M>(&self, f: &mut impl FnMut(&L) -> M) -> Linear<M> {
        Linear { w: f(&self.w), b: self.b.as_ref().map(|b| f(b)) }
    }

    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &L)) {
        f(format!("{prefix}.w"), &self.w);
        if let Some(b) = &self.b {
            f(format!("{prefix}.b"), b);
        }
    }

    pub fn leaves_mut<'a>(&'a mut self, out: &mut Vec<&'a mut L>) {
        out.push(&mut self.w);
        if let Some(b) = &mut self.b {
            out.push(b);
        }
    }
}

impl<L> Mlp<L> {
    pub fn map<M>(&self, f: &mut impl FnMut(&L) -> M) -> Mlp<M> {
        Mlp { layers: self.layers.iter().map(|l| l.map(f)).collect() }
    }

    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &L)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}.{i}"), f);
        }
    }

    pub fn leaves_mut<'a>(&'a mut self, out: &mut Vec<&'a mut L>) {
        for l in &mut self.layers {
            l.leaves_mut(out);
        }
    }
}

impl<L> GnnLayer<L> {
    pub fn map<M>(&self, f: &mut impl FnMut(&L) -> M) -> GnnLayer<M> {
        GnnLayer {
            self_w: f(&self.self_w),
            edge_w: self.edge_w.iter().map(|w| f(w)).collect(),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &L)) {
        f(format!("{prefix}.self_w"), &self.self_w);
        for (i, w) in self.edge_w.iter().enumerate() {
            f(format!("{prefix}.edge_w.{i}"), w);
        }
    }

    pub fn leaves_mut<'a>(&'a mut self, out: &mut Vec<&'a mut L>) {
        out.push(&mut self.self_w);
        for w in &mut self.edge_w {
            out.push(w);
        }
    }
}

impl<L> AttnPool<L> {
    pub fn map<M>(&self, f: &mut impl FnMut(&L) -> M) -> AttnPool<M> {
        AttnPool { score: self.score.map(f) }
    }

    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &L)) {
        self.score.visit(&format!("{prefix}.score"), f);
    }

    pub fn leaves_mut<'a>(&'a mut self, out: &mut Vec<&'a mut L>) {
        self.score.leaves_mut(out);
    }
}

impl<L> Trunk<L> {
    pub fn map<M>(&self, f: &mut impl FnMut(&L) -> M) -> Trunk<M> {
        Trunk {
            encoder: self.encoder.iter().map(|l| l.map(f)).collect(),
            pragma_mlps: self.pragma_mlps.iter().map(|m| m.map(f)).collect(),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &L)) {
        for (i, l) in self.encoder.iter().enumerate() {
            l.visit(&format!("{prefix}.encoder.{i}"), f);
        }
        for (kind, m) in PragmaKind::ALL.iter().zip(&self.pragma_mlps) {
            m.visit(&format!("{prefix}.pragma.{}", kind.name()), f);
        }
    }

    pub fn leaves_mut<'a>(&'a mut self, out: &mut Vec<&'a mut L>) {
        for l in &mut self.encoder {
            l.leaves_mut(out);
        }
        for m in &mut self.pragma_mlps {
            m.leaves_mut(out);
        }
    }
}

impl<L> Mid<L> {
    pub fn map<M>(&self, f: &mut impl FnMut(&L) -> M) -> Mid<M> {
        match self {
            Mid::PostGnn(l) => Mid::PostGnn(l.map(f)),
            Mid::NodeMoe { experts, gate } => Mid::NodeMoe {
                experts: experts.iter().map(|e| e.map(f)).collect(),
                gate: f(gate),
            },
            Mid::BlockMoe { post_gnn, experts, gate } => Mid::BlockMoe {
                post_gnn: post_gnn.as_ref().map(|l| l.map(f)),
                experts: experts.iter().map(|e| f(e)).collect(),
                gate: f(gate),
            },
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &L)) {
        match self {
            Mid::PostGnn(l) => l.visit(&format!("{prefix}.post_gnn"), f),
            Mid::NodeMoe { experts, gate } => {
                for (i, e) in experts.iter().enumerate() {
                    e.visit(&format!("{prefix}.node_moe.expert.{i}"), f);
                }
                f(format!("{prefix}.node_moe.gate"), gate);
            }
            Mid::BlockMoe { post_gnn, experts, gate } => {
                if let Some(l) = post_gnn {
                    l.visit(&format!("{prefix}.block_moe.post_gnn"), f);
                }
                for (i, e) in experts.iter().enumerate() {
                    f(format!("{prefix}.block_moe.expert.{i}"), e);
                }
                f(format!("{prefix}.block_moe.gate"), gate);
            }
        }
    }

    pub fn leaves_mut<'a>(&'a mut self, out: &mut Vec<&'a mut L>) {
        match self {
            Mid::PostGnn(l) => l.leaves_mut(out),
            Mid::NodeMoe { experts, gate } => {
                for e in experts {
                    e.leaves_mut(out);
                }
                out.push(gate);
            }
            Mid::BlockMoe { post_gnn, experts, gate } => {
                if let Some(l) = post_gnn {
                    l.leaves_mut(out);
                }
                for e in experts {
                    out.push(e);
                }
                out.push(gate);
            }
        }
    }
}

impl<L> Pooling<L> {
    pub fn map<M>(&self, f: &mut impl FnMut(&L) -> M) -> Pooling<M> {
        Pooling {
            pseudo: self.pseudo.map(f),
            normal: self.normal.as_ref().map(|p| p.map(f)),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &L)) {
        self.pseudo.visit(&format!("{prefix}.pseudo"), f);
        if let Some(p) = &self.normal {
            p.visit(&format!("{prefix}.normal"), f);
        }
    }

    pub fn leaves_mut<'a>(&'a mut self, out: &mut Vec<&'a mut L>) {
        self.pseudo.leaves_mut(out);
        if let Some(p) = &mut self.normal {
            p.leaves_mut(out);
        }
    }
}

impl<L> Output<L> {
    pub fn map<M>(&self, f: &mut impl FnMut(&L) -> M) -> Output<M> {
        match self {
            Output::Heads(hs) => Output::Heads(hs.iter().map(|h| h.map(f)).collect()),
            Output::GraphMoe { experts, gate } => Output::GraphMoe {
                experts: experts
                    .iter()
                    .map(|hs| hs.iter().map(|h| h.map(f)).collect())
                    .collect(),
                gate: f(gate),
            },
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &L)) {
        match self {
            Output::Heads(hs) => {
                for (i, h) in hs.iter().enumerate() {
                    h.visit(&format!("{prefix}.head.{i}"), f);
                }
            }
            Output::GraphMoe { experts, gate } => {
                for (j, hs) in experts.iter().enumerate() {
                    for (i, h) in hs.iter().enumerate() {
                        h.visit(&format!("{prefix}.graph_moe.expert.{j}.head.{i}"), f);
                    }
                }
                f(format!("{prefix}.graph_moe.gate"), gate);
            }
        }
    }

    pub fn leaves_mut<'a>(&'a mut self, out: &mut Vec<&'a mut L>) {
        match self {
            Output::Heads(hs) => {
                for h in hs {
                    h.leaves_mut(out);
                }
            }
            Output::GraphMoe { experts, gate } => {
                for hs in experts {
                    for h in hs {
                        h.leaves_mut(out);
                    }
                }
                out.push(gate);
            }
        }
    }
}

impl<L> ModelParams<L> {
    pub fn map<M>(&self, f: &mut impl FnMut(&L) -> M) -> ModelParams<M> {
        ModelParams {
            cfg: self.cfg,
            trunk: self.trunk.map(f),
            mid: self.mid.map(f),
            pooling: self.pooling.map(f),
            output: self.output.map(f),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &L)) {
        self.trunk.visit(&format!("{prefix}trunk"), f);
        self.mid.visit(&format!("{prefix}mid"), f);
        self.pooling.visit(&format!("{prefix}pool"), f);
        self.output.visit(&format!("{prefix}out"), f);
    }

    pub fn leaves_mut<'a>(&'a mut self, out: &mut Vec<&'a mut L>) {
        self.trunk.leaves_mut(out);
        self.mid.leaves_mut(out);
        self.pooling.leaves_mut(out);
        self.output.leaves_mut(out);
    }
}

impl<L> HighGate<L> {
    pub fn map<M>(&self, f: &mut impl FnMut(&L) -> M) -> HighGate<M> {
        HighGate {
            head: self.head.map(f),
            input_attn: self.input_attn.as_ref().map(|m| m.map(f)),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &L)) {
        self.head.visit(&format!("{prefix}.head"), f);
        if let Some(m) = &self.input_attn {
            m.visit(&format!("{prefix}.input_attn"), f);
        }
    }

    pub fn leaves_mut<'a>(&'a mut self, out: &mut Vec<&'a mut L>) {
        self.head.leaves_mut(out);
        if let Some(m) = &mut self.input_attn {
            m.leaves_mut(out);
        }
    }
}

impl<L> HierParams<L> {
    pub fn map<M>(&self, f: &mut impl FnMut(&L) -> M) -> HierParams<M> {
        HierParams {
            cfg: self.cfg,
            experts: self.experts.iter().map(|e| e.map(f)).collect(),
            gate: self.gate.map(f),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &L)) {
        for (i, e) in self.experts.iter().enumerate() {
            e.visit(&format!("{prefix}expert.{i}."), f);
        }
        self.gate.visit(&format!("{prefix}gate"), f);
    }

    pub fn leaves_mut<'a>(&'a mut self, out: &mut Vec<&'a mut L>) {
        for e in &mut self.experts {
            e.leaves_mut(out);
        }
        self.gate.leaves_mut(out);
    }
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

// Biases get a small random init rather than zeros: with zero biases an
// all-zero state row parks downstream pre-activations exactly on the ReLU
// kink, which breaks finite-difference checks and stalls those units.
fn init_linear(inp: usize, out: usize, rng: &mut ChaCha8Rng) -> Linear<Tensor> {
    Linear {
        w: Tensor::randn(&[inp, out], 1.0 / (inp as f64).sqrt(), rng),
        b: Some(Tensor::randn(&[1, out], 0.01, rng)),
    }
}

/// MLP with the given layer widths, e.g. `[in, hidden, out]` for two layers.
fn init_mlp(widths: &[usize], rng: &mut ChaCha8Rng) -> Mlp<Tensor> {
    Mlp {
        layers: widths.windows(2).map(|w| init_linear(w[0], w[1], rng)).collect(),
    }
}

fn init_gnn_layer(inp: usize, out: usize, rng: &mut ChaCha8Rng) -> GnnLayer<Tensor> {
    let std = 1.0 / (inp as f64).sqrt();
    GnnLayer {
        self_w: Tensor::randn(&[inp, out], std, rng),
        edge_w: (0..crate::cdfg::EDGE_CLASSES)
            .map(|_| Tensor::randn(&[inp, out], std, rng))
            .collect(),
    }
}

fn init_attn_pool(d: usize, rng: &mut ChaCha8Rng) -> AttnPool<Tensor> {
    AttnPool { score: init_mlp(&[d, d, 1], rng) }
}

/// Low-level gates use a small random init (std 0.01).
fn init_low_gate(experts: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(&[experts, d], 0.01, rng)
}

fn init_heads(cfg: &ModelCfg, rng: &mut ChaCha8Rng) -> Vec<Mlp<Tensor>> {
    let d = cfg.hidden;
    let repr = cfg.repr_width();
    (0..cfg.outputs.head_count())
        .map(|_| init_mlp(&[repr, d, d, d, cfg.outputs.head_width()], rng))
        .collect()
}

impl ModelParams<Tensor> {
    /// Fresh randomly initialized parameters for `cfg`. The draw order is
    /// fixed, so a given rng state yields identical models.
    pub fn init(cfg: ModelCfg, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.hidden;
        let mut encoder = Vec::with_capacity(cfg.encoder_layers);
        for l in 0..cfg.encoder_layers {
            let inp = if l == 0 { cfg.f_in } else { d };
            encoder.push(init_gnn_layer(inp, d, rng));
        }
        let pragma_mlps = PragmaKind::ALL
            .iter()
            .map(|_| init_mlp(&[d + crate::cdfg::PRAGMA_CHANNELS, d, d], rng))
            .collect();
        let trunk = Trunk { encoder, pragma_mlps };

        let mid = match cfg.variant {
            Variant::Harp | Variant::GraphMoe => Mid::PostGnn(init_gnn_layer(d, d, rng)),
            Variant::NodeMoe => Mid::NodeMoe {
                experts: (0..cfg.experts).map(|_| init_gnn_layer(d, d, rng)).collect(),
                gate: init_low_gate(cfg.experts, d, rng),
            },
            Variant::BlockMoe => Mid::BlockMoe {
                post_gnn: (cfg.block_variant != BlockVariant::Standard)
                    .then(|| init_gnn_layer(d, d, rng)),
                experts: (0..cfg.experts)
                    .map(|_| Tensor::randn(&[d, d], 1.0 / (d as f64).sqrt(), rng))
                    .collect(),
                gate: init_low_gate(cfg.experts, d, rng),
            },
        };

        let pooling = Pooling {
            pseudo: init_attn_pool(d, rng),
            normal: cfg.dual_pooling().then(|| init_attn_pool(d, rng)),
        };

        let output = match cfg.variant {
            Variant::GraphMoe => Output::GraphMoe {
                experts: (0..cfg.experts).map(|_| init_heads(&cfg, rng)).collect(),
                gate: init_low_gate(cfg.experts, cfg.repr_width(), rng),
            },
            _ => Output::Heads(init_heads(&cfg, rng)),
        };

        ModelParams { cfg, trunk, mid, pooling, output }
    }

    pub fn bind(&self, tape: &Tape) -> ModelParams<Var> {
        self.map(&mut |t| tape.leaf(t.clone()))
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t: &Tensor| out.push((name, t.clone())));
        out
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t: &Tensor| n += t.numel());
        n
    }

    /// Loads blob values (in `named_tensors` order) into this structure.
    pub fn load_blobs(&mut self, blobs: &[(String, Tensor)]) -> crate::Result<()> {
        let names: Vec<String> = {
            let mut v = Vec::new();
            self.visit("", &mut |name, _t: &Tensor| v.push(name));
            v
        };
        if names.len() != blobs.len() {
            return Err(crate::Error::data(format!(
                "checkpoint has {} blobs, model wants {}",
                blobs.len(),
                names.len()
            )));
        }
        let mut leaves: Vec<&mut Tensor> = Vec::new();
        self.leaves_mut(&mut leaves);
        for ((leaf, want), (name, t)) in leaves.into_iter().zip(&names).zip(blobs) {
            if name != want {
                return Err(crate::Error::data(format!(
                    "checkpoint blob {name} where {want} expected"
                )));
            }
            if leaf.shape() != t.shape() {
                return Err(crate::Error::data(format!(
                    "blob {name} shape {:?} != expected {:?}",
                    t.shape(),
                    leaf.shape()
                )));
            }
            *leaf = t.clone();
        }
        Ok(())
    }
}

impl ModelParams<Var> {
    /// Gradients in the same stable order as the stored parameters.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit("", &mut |_, v: &Var| out.push(tape.grad(*v)));
        out
    }
}

impl HierParams<Tensor> {
    pub fn init(cfg: HierCfg, rng: &mut ChaCha8Rng) -> Self {
        let experts = cfg.expert_cfgs().map(|c| ModelParams::init(c, rng)).into();
        let gate_in = {
            let widths: usize = cfg.expert_cfgs().iter().map(|c| c.repr_width()).sum();
            match cfg.gate_design {
                GateDesign::HiddenConcat => widths,
                GateDesign::InputPooling => cfg.base.f_in,
            }
        };
        let head = if cfg.constant_gate_init {
            Linear { w: Tensor::zeros(&[gate_in, 3]), b: Some(Tensor::zeros(&[1, 3])) }
        } else {
            let mut l = init_linear(gate_in, 3, rng);
            l.w = Tensor::randn(&[gate_in, 3], 0.5, rng);
            l
        };
        let input_attn = matches!(cfg.gate_design, GateDesign::InputPooling)
            .then(|| init_mlp(&[cfg.base.f_in, cfg.base.f_in, 1], rng));
        HierParams { cfg, experts, gate: HighGate { head, input_attn } }
    }

    pub fn bind(&self, tape: &Tape) -> HierParams<Var> {
        self.map(&mut |t| tape.leaf(t.clone()))
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t: &Tensor| out.push((name, t.clone())));
        out
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t: &Tensor| n += t.numel());
        n
    }

    pub fn load_blobs(&mut self, blobs: &[(String, Tensor)]) -> crate::Result<()> {
        let names: Vec<String> = {
            let mut v = Vec::new();
            self.visit("", &mut |name, _t: &Tensor| v.push(name));
            v
        };
        if names.len() != blobs.len() {
            return Err(crate::Error::data(format!(
                "checkpoint has {} blobs, model wants {}",
                blobs.len(),
                names.len()
            )));
        }
        let mut leaves: Vec<&mut Tensor> = Vec::new();
        self.leaves_mut(&mut leaves);
        for ((leaf, want), (name, t)) in leaves.into_iter().zip(&names).zip(blobs) {
            if name != want {
                return Err(crate::Error::data(format!(
                    "checkpoint blob {name} where {want} expected"
                )));
            }
            if leaf.shape() != t.shape() {
                return Err(crate::Error::data(format!(
                    "blob {name} shape {:?} != expected {:?}",
                    t.shape(),
                    leaf.shape()
                )));
            }
            *leaf = t.clone();
        }
        Ok(())
    }
}

impl HierParams<Var> {
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit("", &mut |_, v: &Var| out.push(tape.grad(*v)));
        out
    }
}
