//! The noise-prediction network.
//!
//! Per frame, each joint's three rotation channels and each expression
//! coefficient become node features. Joint features pass through message
//! passing layers over the kinematic tree (one kernel per directed edge plus a
//! learnable per-joint token), expression features through a shared
//! feed-forward map with per-coefficient tokens. After every layer the
//! features are gated by the text and timestep condition. The per-frame
//! concatenation of all node features, together with the noisy frame itself,
//! feeds a sequence decoder across frames and a feed-forward output head.

use std::collections::HashMap;

use candle_core::{DType, Device, IndexOp, Tensor, D};
use candle_nn::ops::{sigmoid, softmax};
use serde::{Deserialize, Serialize};
use signmotion_core::kinematics::{KinematicTree, StateLayout};
use signmotion_core::text::{tokenize, TextEncoderConfig};

use crate::error::{Error, Result};
use crate::layers::{sinusoidal, Activation, LayerNorm, Linear};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderKind {
    Recurrent,
    Attention,
    FramePositional,
    NoRecurrence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoseEncoderKind {
    /// Message passing over the kinematic tree.
    Gnn,
    /// The same per-joint map without neighbour messages.
    JointMlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum TextConditioning {
    /// Fixed sentence embedding from a text encoder.
    Sentence { encoder: TextEncoderConfig },
    /// Trainable mean-of-word-vectors embedding.
    WordBag { dim: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Output widths of the stacked pose layers; the embedding uses the first.
    pub widths: Vec<usize>,
    pub expression_widths: Vec<usize>,
    pub hidden: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub time_dim: usize,
    pub tokens: bool,
    pub pose_encoder: PoseEncoderKind,
    pub decoder: DecoderKind,
    pub activation: Activation,
    pub text: TextConditioning,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: vec![64, 128, 256, 512],
            expression_widths: vec![64, 128, 256, 512],
            hidden: 512,
            decoder_layers: 4,
            heads: 4,
            time_dim: 128,
            tokens: true,
            pose_encoder: PoseEncoderKind::Gnn,
            decoder: DecoderKind::Recurrent,
            activation: Activation::Silu,
            text: TextConditioning::Sentence {
                encoder: TextEncoderConfig::default(),
            },
        }
    }
}

impl ModelConfig {
    /// A narrow configuration that trains in minutes on one CPU core.
    pub fn small() -> Self {
        Self {
            widths: vec![16, 16, 32, 32],
            expression_widths: vec![8, 8, 16, 16],
            hidden: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.expression_widths.len() {
            return Err(Error::InvalidConfig(
                "pose and expression encoders need the same non-zero depth".into(),
            ));
        }
        if self.widths.iter().chain(&self.expression_widths).any(|&w| w == 0) || self.hidden == 0 {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        if self.decoder_layers == 0 {
            return Err(Error::InvalidConfig("decoder needs at least one layer".into()));
        }
        if self.decoder == DecoderKind::Attention && (self.heads == 0 || self.hidden % self.heads != 0) {
            return Err(Error::InvalidConfig(format!(
                "hidden width {} is not divisible into {} heads",
                self.hidden, self.heads
            )));
        }
        if self.time_dim == 0 {
            return Err(Error::InvalidConfig("time embedding width must be positive".into()));
        }
        Ok(())
    }

    pub fn text_dim(&self) -> usize {
        match &self.text {
            TextConditioning::Sentence { encoder } => encoder.dim(),
            TextConditioning::WordBag { dim } => *dim,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        match variant {
            Variant::Full | Variant::ToyText => {}
            Variant::NoGnn => self.pose_encoder = PoseEncoderKind::JointMlp,
            Variant::NoTokens => self.tokens = false,
            Variant::NoRecurrence => self.decoder = DecoderKind::NoRecurrence,
            Variant::FramePositional => self.decoder = DecoderKind::FramePositional,
            Variant::AttentionDecoder => self.decoder = DecoderKind::Attention,
            Variant::WordbagText => self.text = TextConditioning::WordBag { dim: 256 },
        }
        if variant == Variant::ToyText {
            self.text = TextConditioning::Sentence {
                encoder: TextEncoderConfig::default(),
            };
        }
        self
    }
}

/// Named architecture ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoGnn,
    NoTokens,
    NoRecurrence,
    FramePositional,
    AttentionDecoder,
    ToyText,
    WordbagText,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Full,
        Variant::NoGnn,
        Variant::NoTokens,
        Variant::NoRecurrence,
        Variant::FramePositional,
        Variant::AttentionDecoder,
        Variant::ToyText,
        Variant::WordbagText,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoGnn => "no-gnn",
            Variant::NoTokens => "no-tokens",
            Variant::NoRecurrence => "no-recurrence",
            Variant::FramePositional => "frame-positional",
            Variant::AttentionDecoder => "attention-decoder",
            Variant::ToyText => "toy-text",
            Variant::WordbagText => "wordbag-text",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant `{s}`")))
    }
}

fn index_tensor(values: &[usize], device: &Device) -> Result<Tensor> {
    let v: Vec<u32> = values.iter().map(|&x| x as u32).collect();
    Ok(Tensor::from_vec(v, values.len(), device)?)
}

/// Message passing over the kinematic tree:
/// `f'_i = act(sum_{j in N(i)} K_ij (f_j - f_i) + P_i)`.
#[derive(Debug, Clone)]
pub struct GnnLayer {
    /// (edges, C, C') or, when shared, (1, C, C').
    kernels: Tensor,
    tokens: Option<Tensor>,
    /// Neighbour and receiving joint of each directed edge.
    src: Vec<usize>,
    dst: Vec<usize>,
    src_index: Option<Tensor>,
    dst_index: Option<Tensor>,
    joints: usize,
    activation: Activation,
}

fn directed_edges(tree: &KinematicTree) -> (Vec<usize>, Vec<usize>) {
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for i in 0..tree.joint_count() {
        for j in tree.neighbors(i) {
            src.push(j);
            dst.push(i);
        }
    }
    (src, dst)
}

impl GnnLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        tree: &KinematicTree,
        input: usize,
        output: usize,
        tokens: bool,
        shared_kernels: bool,
        activation: Activation,
    ) -> Result<Self> {
        let (src, _) = directed_edges(tree);
        let kernel_count = if shared_kernels { 1 } else { src.len().max(1) };
        let bound = 1.0 / (input as f64).sqrt();
        let kernels = store.uniform(&format!("{name}.kernels"), &[kernel_count, input, output], bound)?;
        let tokens = if tokens {
            Some(store.normal(&format!("{name}.tokens"), &[tree.joint_count(), output], 0.1)?)
        } else {
            None
        };
        Self::from_parts(tree, kernels, tokens, activation)
    }

    /// `kernels` is (edges, C, C') in directed-edge order or (1, C, C') to share.
    pub fn from_parts(
        tree: &KinematicTree,
        kernels: Tensor,
        tokens: Option<Tensor>,
        activation: Activation,
    ) -> Result<Self> {
        let (src, dst) = directed_edges(tree);
        let k = kernels.dims()[0];
        if k != 1 && k != src.len() {
            return Err(Error::InvalidConfig(format!(
                "{k} kernels for {} directed edges",
                src.len()
            )));
        }
        let device = kernels.device().clone();
        let (src_index, dst_index) = if src.is_empty() {
            (None, None)
        } else {
            (Some(index_tensor(&src, &device)?), Some(index_tensor(&dst, &device)?))
        };
        Ok(Self {
            kernels,
            tokens,
            src,
            dst,
            src_index,
            dst_index,
            joints: tree.joint_count(),
            activation,
        })
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.dst.iter().copied().zip(self.src.iter().copied())
    }

    pub fn output_dim(&self) -> usize {
        self.kernels.dims()[2]
    }

    /// `h` is (N, J, C); returns (N, J, C').
    pub fn forward(&self, h: &Tensor) -> Result<Tensor> {
        let (n, j, c) = h.dims3()?;
        let (_, kc, out) = self.kernels.dims3()?;
        if j != self.joints || c != kc {
            return Err(Error::InvalidConfig(format!(
                "message passing layer expects (N, {}, {kc}) features, got ({n}, {j}, {c})",
                self.joints
            )));
        }
        let agg = match (&self.src_index, &self.dst_index) {
            (Some(src), Some(dst)) => {
                let e = self.src.len();
                let diff = (h.index_select(src, 1)? - h.index_select(dst, 1)?)?;
                if self.kernels.dims()[0] == 1 {
                    let msg = diff
                        .reshape((n * e, c))?
                        .matmul(&self.kernels.i(0)?)?
                        .reshape((n, e, out))?;
                    Tensor::zeros((n, j, out), h.dtype(), h.device())?.index_add(dst, &msg, 1)?
                } else {
                    let msg = diff.transpose(0, 1)?.contiguous()?.matmul(&self.kernels)?;
                    Tensor::zeros((j, n, out), h.dtype(), h.device())?
                        .index_add(dst, &msg, 0)?
                        .transpose(0, 1)?
                }
            }
            _ => Tensor::zeros((n, j, out), h.dtype(), h.device())?,
        };
        let pre = match &self.tokens {
            Some(t) => agg.broadcast_add(t)?,
            None => agg,
        };
        self.activation.apply(&pre)
    }
}

/// Per-joint map without neighbour messages: `act(W f_i + P_i)`.
#[derive(Debug, Clone)]
pub struct JointMlp {
    linear: Linear,
    tokens: Option<Tensor>,
    activation: Activation,
}

impl JointMlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        joints: usize,
        input: usize,
        output: usize,
        tokens: bool,
        activation: Activation,
    ) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(store, &format!("{name}.linear"), input, output, true)?,
            tokens: if tokens {
                Some(store.normal(&format!("{name}.tokens"), &[joints, output], 0.1)?)
            } else {
                None
            },
            activation,
        })
    }

    pub fn forward(&self, h: &Tensor) -> Result<Tensor> {
        let y = self.linear.forward(h)?;
        let y = match &self.tokens {
            Some(t) => y.broadcast_add(t)?,
            None => y,
        };
        self.activation.apply(&y)
    }
}

/// `g'_i = act(FF(g_i + E_i))` with one feed-forward map shared by all
/// coefficients.
#[derive(Debug, Clone)]
pub struct ExpressionLayer {
    linear: Linear,
    tokens: Option<Tensor>,
    activation: Activation,
}

impl ExpressionLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        coefficients: usize,
        input: usize,
        output: usize,
        tokens: bool,
        activation: Activation,
    ) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(store, &format!("{name}.linear"), input, output, true)?,
            tokens: if tokens {
                Some(store.normal(&format!("{name}.tokens"), &[coefficients, input], 0.1)?)
            } else {
                None
            },
            activation,
        })
    }

    pub fn from_parts(linear: Linear, tokens: Option<Tensor>, activation: Activation) -> Self {
        Self {
            linear,
            tokens,
            activation,
        }
    }

    /// `g` is (N, E, C); returns (N, E, C').
    pub fn forward(&self, g: &Tensor) -> Result<Tensor> {
        let c = g.dims3()?.2;
        if c != self.linear.weight.dims()[0] {
            return Err(Error::InvalidConfig(format!(
                "expression layer expects width {}, got {c}",
                self.linear.weight.dims()[0]
            )));
        }
        let x = match &self.tokens {
            Some(t) => g.broadcast_add(t)?,
            None => g.clone(),
        };
        self.activation.apply(&self.linear.forward(&x)?)
    }
}

/// Feature-wise conditioning `h * sigmoid(G c) + B c`.
#[derive(Debug, Clone)]
pub struct Gate {
    scale: Linear,
    shift: Linear,
}

impl Gate {
    pub fn new(store: &mut ParamStore, name: &str, condition: usize, width: usize) -> Result<Self> {
        Ok(Self {
            scale: Linear::new(store, &format!("{name}.scale"), condition, width, true)?,
            shift: Linear::new(store, &format!("{name}.shift"), condition, width, true)?,
        })
    }

    pub fn from_parts(scale: Linear, shift: Linear) -> Self {
        Self { scale, shift }
    }

    /// `h` is (B, M, C) and `c` is (B, K).
    pub fn forward(&self, h: &Tensor, c: &Tensor) -> Result<Tensor> {
        self.forward_rows(h, c, None)
    }

    /// Like [`Gate::forward`], with `h` (N, M, C) whose row `n` is conditioned
    /// on `c[rows[n]]`.
    pub fn forward_rows(&self, h: &Tensor, c: &Tensor, rows: Option<&Tensor>) -> Result<Tensor> {
        let mut s = sigmoid(&self.scale.forward(c)?)?;
        let mut b = self.shift.forward(c)?;
        if let Some(rows) = rows {
            s = s.index_select(rows, 0)?;
            b = b.index_select(rows, 0)?;
        }
        Ok(h.broadcast_mul(&s.unsqueeze(1)?)?.broadcast_add(&b.unsqueeze(1)?)?)
    }
}

#[derive(Debug, Clone)]
struct LstmLayer {
    input: Linear,
    recurrent: Tensor,
    hidden: usize,
}

impl LstmLayer {
    fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        let weight = store.uniform(&format!("{name}.input.weight"), &[input, 4 * hidden], bound)?;
        // Gate order [input, forget, output, cell]; forget bias starts at 1.
        let bias: Vec<f64> = (0..4 * hidden)
            .map(|i| if (hidden..2 * hidden).contains(&i) { 1.0 } else { 0.0 })
            .collect();
        let bias = store.insert(&format!("{name}.input.bias"), &[4 * hidden], bias)?;
        let recurrent = store.uniform(&format!("{name}.recurrent"), &[hidden, 4 * hidden], bound)?;
        Ok(Self {
            input: Linear::from_tensors(weight, Some(bias)),
            recurrent,
            hidden,
        })
    }

    /// Hidden states for every frame of `x` (B, F, C), stacked to (B, F, H).
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, f, _) = x.dims3()?;
        let hsz = self.hidden;
        let mut projected = Vec::with_capacity(f);
        split_frames(&self.input.forward(x)?, 0, f, &mut projected)?;
        let mut h = Tensor::zeros((b, hsz), x.dtype(), x.device())?;
        let mut c = h.clone();
        let mut outputs = Vec::with_capacity(f);
        for p in projected {
            let gates = (p + h.matmul(&self.recurrent)?)?;
            let sig = sigmoid(&gates.narrow(1, 0, 3 * hsz)?)?;
            let cell = gates.narrow(1, 3 * hsz, hsz)?.tanh()?;
            let (i, fg, o) = (sig.narrow(1, 0, hsz)?, sig.narrow(1, hsz, hsz)?, sig.narrow(1, 2 * hsz, hsz)?);
            c = ((fg * c)? + (i * cell)?)?;
            h = (o * c.tanh()?)?;
            outputs.push(h.clone());
        }
        Ok(Tensor::stack(&outputs, 1)?)
    }
}

/// Splits frames `start..start + len` of `x` (B, F, C) into (B, C) slices by
/// recursive halving, so the backward pass of the slicing costs
/// O(F log F) rather than O(F^2).
fn split_frames(x: &Tensor, start: usize, len: usize, out: &mut Vec<Tensor>) -> Result<()> {
    if len == 1 {
        out.push(x.narrow(1, start, 1)?.squeeze(1)?);
        return Ok(());
    }
    let half = len / 2;
    let (left, right) = (x.narrow(1, start, half)?, x.narrow(1, start + half, len - half)?);
    split_frames(&left, 0, half, out)?;
    split_frames(&right, 0, len - half, out)
}

#[derive(Debug, Clone)]
struct AttentionBlock {
    norm1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    norm2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    heads: usize,
}

impl AttentionBlock {
    fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), width)?,
            q: Linear::new(store, &format!("{name}.q"), width, width, true)?,
            k: Linear::new(store, &format!("{name}.k"), width, width, true)?,
            v: Linear::new(store, &format!("{name}.v"), width, width, true)?,
            o: Linear::new(store, &format!("{name}.o"), width, width, true)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), width)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), width, 4 * width, true)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), 4 * width, width, true)?,
            heads,
        })
    }

    /// `bias` is (B, 1, 1, F): 0 for valid keys, a large negative for padding.
    fn forward(&self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (b, f, w) = x.dims3()?;
        let dh = w / self.heads;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((b, f, self.heads, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let n = self.norm1.forward(x)?;
        let q = split(self.q.forward(&n)?)?;
        let k = split(self.k.forward(&n)?)?;
        let v = split(self.v.forward(&n)?)?;
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (dh as f64).sqrt())?;
        let p = softmax(&scores.broadcast_add(bias)?, D::Minus1)?;
        let att = p.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, f, w))?;
        let h = (x + self.o.forward(&att)?)?;
        let ff = self.ff2.forward(&self.ff1.forward(&self.norm2.forward(&h)?)?.silu()?)?;
        Ok((h + ff)?)
    }
}

#[derive(Debug, Clone)]
enum Decoder {
    Recurrent(Vec<LstmLayer>),
    Attention(Vec<AttentionBlock>),
    /// Per-frame residual feed-forward layers; `true` adds frame positions.
    Feedforward(Vec<Linear>, bool),
}

impl Decoder {
    fn forward(&self, x: &Tensor, lengths: &[usize]) -> Result<Tensor> {
        let (b, f, w) = x.dims3()?;
        let positions = |x: &Tensor| -> Result<Tensor> {
            let pos: Vec<f64> = (0..f).map(|i| i as f64).collect();
            Ok(x.broadcast_add(&sinusoidal(&pos, w, x.dtype(), x.device())?)?)
        };
        match self {
            Decoder::Recurrent(layers) => {
                // Residual connections around each layer keep the stack trainable.
                let mut h = x.clone();
                for l in layers {
                    h = (&h + l.forward(&h)?)?;
                }
                Ok(h)
            }
            Decoder::Attention(blocks) => {
                let mut bias = vec![0.0; b * f];
                for (i, &len) in lengths.iter().enumerate() {
                    for t in len.min(f)..f {
                        bias[i * f + t] = -1e9;
                    }
                }
                let bias = Tensor::from_vec(bias, (b, 1, 1, f), x.device())?.to_dtype(x.dtype())?;
                let mut h = positions(x)?;
                for block in blocks {
                    h = block.forward(&h, &bias)?;
                }
                Ok(h)
            }
            Decoder::Feedforward(layers, with_positions) => {
                let mut h = if *with_positions { positions(x)? } else { x.clone() };
                for l in layers {
                    h = (&h + l.forward(&h)?.silu()?)?;
                }
                Ok(h)
            }
        }
    }
}

/// Conditioning input for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum TextInput {
    Vector(Vec<f64>),
    Words(Vec<String>),
}

#[derive(Debug, Clone)]
enum TextModule {
    Sentence { encoder: TextEncoderConfig, dim: usize },
    WordBag { vocab: HashMap<String, usize>, table: Tensor },
}

#[derive(Debug, Clone)]
enum PoseLayer {
    Gnn(GnnLayer),
    Mlp(JointMlp),
}

impl PoseLayer {
    fn forward(&self, h: &Tensor) -> Result<Tensor> {
        match self {
            PoseLayer::Gnn(l) => l.forward(h),
            PoseLayer::Mlp(l) => l.forward(h),
        }
    }
}

pub const TIME_FEATURES: usize = 128;

pub struct Denoiser {
    pub config: ModelConfig,
    pub layout: StateLayout,
    joints: usize,
    rotation_index: Tensor,
    pose_embed: Linear,
    expr_embed: Option<Linear>,
    pose_layers: Vec<PoseLayer>,
    pose_gates: Vec<Gate>,
    expr_layers: Vec<ExpressionLayer>,
    expr_gates: Vec<Gate>,
    time_proj: Linear,
    text: TextModule,
    input_proj: Linear,
    decoder: Decoder,
    head1: Linear,
    head2: Linear,
    /// Per-channel coefficient on the noisy state, from the time embedding.
    skip: Linear,
    dtype: DType,
    device: Device,
}

impl Denoiser {
    /// `vocabulary` lists the known words for a word-bag text embedding.
    pub fn new(
        store: &mut ParamStore,
        config: ModelConfig,
        tree: &KinematicTree,
        layout: StateLayout,
        vocabulary: &[String],
    ) -> Result<Self> {
        config.validate()?;
        let act = config.activation;
        let joints = tree.joint_count();
        let expr = layout.expression;
        let channels: Vec<usize> = (0..joints)
            .flat_map(|j| (0..3).map(move |k| tree.rotation_channel(j) + k))
            .collect();
        if channels.iter().any(|&c| c >= layout.hand_range().end) {
            return Err(Error::InvalidConfig("skeleton does not match the state layout".into()));
        }
        let rotation_index = index_tensor(&channels, store.device())?;

        let text = match &config.text {
            TextConditioning::Sentence { encoder } => TextModule::Sentence {
                encoder: encoder.clone(),
                dim: encoder.dim(),
            },
            TextConditioning::WordBag { dim } => {
                let mut vocab = HashMap::new();
                for w in vocabulary {
                    let next = vocab.len() + 1;
                    vocab.entry(w.to_lowercase()).or_insert(next);
                }
                let table = store.normal("text.word_table", &[vocab.len() + 1, *dim], 1.0 / (*dim as f64).sqrt())?;
                TextModule::WordBag { vocab, table }
            }
        };
        let cond = config.text_dim() + config.time_dim;
        let time_proj = Linear::new(store, "time.proj", TIME_FEATURES, config.time_dim, true)?;

        let pose_embed = Linear::new(store, "pose.embed", 3, config.widths[0], true)?;
        let mut pose_layers = Vec::new();
        let mut pose_gates = Vec::new();
        let mut width = config.widths[0];
        for (l, &out) in config.widths.iter().enumerate() {
            let name = format!("pose.layer{l}");
            pose_layers.push(match config.pose_encoder {
                PoseEncoderKind::Gnn => {
                    PoseLayer::Gnn(GnnLayer::new(store, &name, tree, width, out, config.tokens, false, act)?)
                }
                PoseEncoderKind::JointMlp => {
                    PoseLayer::Mlp(JointMlp::new(store, &name, joints, width, out, config.tokens, act)?)
                }
            });
            pose_gates.push(Gate::new(store, &format!("pose.gate{l}"), cond, out)?);
            width = out;
        }
        let pose_width = width;

        let (mut expr_layers, mut expr_gates, mut expr_embed) = (Vec::new(), Vec::new(), None);
        let mut ewidth = 0;
        if expr > 0 {
            ewidth = config.expression_widths[0];
            expr_embed = Some(Linear::new(store, "expr.embed", 1, ewidth, true)?);
            for (l, &out) in config.expression_widths.iter().enumerate() {
                expr_layers.push(ExpressionLayer::new(
                    store,
                    &format!("expr.layer{l}"),
                    expr,
                    ewidth,
                    out,
                    config.tokens,
                    act,
                )?);
                expr_gates.push(Gate::new(store, &format!("expr.gate{l}"), cond, out)?);
                ewidth = out;
            }
        }

        let pooled = joints * pose_width + expr * ewidth + layout.dim();
        let h = config.hidden;
        let input_proj = Linear::new(store, "decoder.input", pooled, h, true)?;
        let decoder = match config.decoder {
            DecoderKind::Recurrent => Decoder::Recurrent(
                (0..config.decoder_layers)
                    .map(|l| LstmLayer::new(store, &format!("decoder.lstm{l}"), h, h))
                    .collect::<Result<_>>()?,
            ),
            DecoderKind::Attention => Decoder::Attention(
                (0..config.decoder_layers)
                    .map(|l| AttentionBlock::new(store, &format!("decoder.block{l}"), h, config.heads))
                    .collect::<Result<_>>()?,
            ),
            DecoderKind::FramePositional | DecoderKind::NoRecurrence => Decoder::Feedforward(
                (0..config.decoder_layers)
                    .map(|l| Linear::new(store, &format!("decoder.ff{l}"), h, h, true))
                    .collect::<Result<_>>()?,
                config.decoder == DecoderKind::FramePositional,
            ),
        };
        let head1 = Linear::new(store, "head.hidden", h, h, true)?;
        let head2 = Linear::new(store, "head.out", h, layout.dim(), true)?;
        let skip = Linear::new(store, "head.skip", config.time_dim, layout.dim(), true)?;

        Ok(Self {
            config,
            layout,
            joints,
            rotation_index,
            pose_embed,
            expr_embed,
            pose_layers,
            pose_gates,
            expr_layers,
            expr_gates,
            time_proj,
            text,
            input_proj,
            decoder,
            head1,
            head2,
            skip,
            dtype: store.dtype(),
            device: store.device().clone(),
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Words known to a word-bag text embedding, by index.
    pub fn vocabulary(&self) -> Vec<String> {
        match &self.text {
            TextModule::WordBag { vocab, .. } => {
                let mut words: Vec<(&String, &usize)> = vocab.iter().collect();
                words.sort_by_key(|(_, &i)| i);
                words.into_iter().map(|(w, _)| w.clone()).collect()
            }
            TextModule::Sentence { .. } => Vec::new(),
        }
    }

    pub fn prepare_text(&self, text: &str) -> Result<TextInput> {
        match &self.text {
            TextModule::Sentence { encoder, .. } => Ok(TextInput::Vector(encoder.encode(text)?.vector)),
            TextModule::WordBag { .. } => {
                let words = tokenize(text);
                if words.is_empty() {
                    return Err(signmotion_core::Error::EmptyText.into());
                }
                Ok(TextInput::Words(words))
            }
        }
    }

    fn text_features(&self, inputs: &[TextInput]) -> Result<Tensor> {
        match &self.text {
            TextModule::Sentence { dim, .. } => {
                let mut values = Vec::with_capacity(inputs.len() * dim);
                for input in inputs {
                    match input {
                        TextInput::Vector(v) if v.len() == *dim => values.extend_from_slice(v),
                        _ => {
                            return Err(Error::InvalidConfig(format!(
                                "expected a {dim}-dimensional sentence embedding"
                            )))
                        }
                    }
                }
                Ok(Tensor::from_vec(values, (inputs.len(), *dim), &self.device)?.to_dtype(self.dtype)?)
            }
            TextModule::WordBag { vocab, table } => {
                let rows = inputs
                    .iter()
                    .map(|input| {
                        let TextInput::Words(words) = input else {
                            return Err(Error::InvalidConfig("word-bag embedding needs words".into()));
                        };
                        let ids: Vec<usize> = words.iter().map(|w| vocab.get(w).copied().unwrap_or(0)).collect();
                        Ok(table.index_select(&index_tensor(&ids, &self.device)?, 0)?.mean(0)?)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Tensor::stack(&rows, 0)?)
            }
        }
    }

    /// Predicts the noise in `x` (B, F, D) at steps `t`. Frames at or beyond
    /// `lengths[b]` are padding and predicted as zero.
    pub fn forward(&self, x: &Tensor, t: &[usize], text: &[TextInput], lengths: &[usize]) -> Result<Tensor> {
        let (b, f, d) = x.dims3()?;
        if d != self.layout.dim() || t.len() != b || text.len() != b || lengths.len() != b {
            return Err(Error::InvalidConfig(format!(
                "denoiser expects (B, F, {}) with B timesteps, texts and lengths; got ({b}, {f}, {d}), {} / {} / {}",
                self.layout.dim(),
                t.len(),
                text.len(),
                lengths.len()
            )));
        }
        // Per-frame stages only see valid frames; `valid[n]` is the padded
        // position of packed frame `n` and `owner[n]` its sequence.
        let mut valid = Vec::new();
        let mut owner = Vec::new();
        for (i, &len) in lengths.iter().enumerate() {
            for k in 0..len.min(f) {
                valid.push(i * f + k);
                owner.push(i);
            }
        }
        if valid.is_empty() {
            return Err(Error::InvalidConfig("batch has no valid frames".into()));
        }
        let n = valid.len();
        let valid = index_tensor(&valid, &self.device)?;
        let owner = index_tensor(&owner, &self.device)?;
        let packed = x.reshape((b * f, d))?.index_select(&valid, 0)?;

        let steps: Vec<f64> = t.iter().map(|&s| s as f64).collect();
        let time = self
            .time_proj
            .forward(&sinusoidal(&steps, TIME_FEATURES, self.dtype, &self.device)?)?
            .silu()?;
        let cond = Tensor::cat(&[&self.text_features(text)?, &time], 1)?;

        let mut h = self
            .pose_embed
            .forward(&packed.index_select(&self.rotation_index, 1)?.reshape((n, self.joints, 3))?)?;
        for (layer, gate) in self.pose_layers.iter().zip(&self.pose_gates) {
            h = gate.forward_rows(&layer.forward(&h)?, &cond, Some(&owner))?;
        }
        let mut pooled = vec![h.reshape((n, ()))?];

        if let Some(embed) = &self.expr_embed {
            let e = self.layout.expression;
            let start = self.layout.expression_range().start;
            let mut g = embed.forward(&packed.narrow(1, start, e)?.reshape((n, e, 1))?)?;
            for (layer, gate) in self.expr_layers.iter().zip(&self.expr_gates) {
                g = gate.forward_rows(&layer.forward(&g)?, &cond, Some(&owner))?;
            }
            pooled.push(g.reshape((n, ()))?);
        }
        pooled.push(packed.clone());
        let inputs = self.input_proj.forward(&Tensor::cat(&pooled, 1)?)?;
        let hsz = inputs.dims2()?.1;
        let inputs = Tensor::zeros((b * f, hsz), self.dtype, &self.device)?
            .index_add(&valid, &inputs, 0)?
            .reshape((b, f, hsz))?;
        let hidden = self
            .decoder
            .forward(&inputs, lengths)?
            .reshape((b * f, hsz))?
            .index_select(&valid, 0)?;
        let out = self.head2.forward(&self.head1.forward(&hidden)?.silu()?)?;
        // Near-pure-noise inputs need an almost exact copy of the state,
        // which a narrow decoder reproduces poorly.
        let coef = self.skip.forward(&time)?.index_select(&owner, 0)?;
        let out = (out + (packed * coef)?)?;
        Ok(Tensor::zeros((b * f, d), self.dtype, &self.device)?
            .index_add(&valid, &out, 0)?
            .reshape((b, f, d))?)
    }
}

/// Parameter counts by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub total: usize,
    pub pose_encoder: usize,
    pub expression_encoder: usize,
    pub decoder: usize,
    pub text: usize,
}

impl ParamSummary {
    pub fn of(store: &ParamStore) -> Self {
        Self {
            total: store.count(),
            pose_encoder: store.count_prefix("pose."),
            expression_encoder: store.count_prefix("expr."),
            decoder: store.count_prefix("decoder."),
            text: store.count_prefix("text."),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn chain() -> KinematicTree {
        KinematicTree::new(
            vec![None, Some(0), Some(1)],
            vec![Vector3::zeros(); 3],
            vec!["a".into(), "b".into(), "c".into()],
            vec![],
            vec![],
        )
        .unwrap()
    }

    fn tensor(values: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::from_vec(values, shape, &Device::Cpu).unwrap()
    }

    fn values(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        tensor((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape)
    }

    /// Mirror image of the default signer: left and right limbs swapped.
    fn mirror() -> Vec<usize> {
        vec![0, 1, 2, 3, 6, 7, 4, 5, 12, 13, 14, 15, 8, 9, 10, 11]
    }

    #[test]
    fn chain_example_with_identity_kernels() {
        let tree = chain();
        let kernels = tensor(vec![1.0; 4], &[4, 1, 1]);
        let tokens = tensor(vec![0.5, -0.25, 2.0], &[3, 1]);
        let layer = GnnLayer::from_parts(&tree, kernels, Some(tokens), Activation::Identity).unwrap();
        let out = layer.forward(&tensor(vec![1.0, 2.0, 4.0], &[1, 3, 1])).unwrap();
        assert_eq!(values(&out), vec![1.5, 0.75, 0.0]);
    }

    #[test]
    fn isolated_joint_outputs_its_token() {
        let tree = KinematicTree::new(vec![None], vec![Vector3::zeros()], vec!["root".into()], vec![], vec![]).unwrap();
        let tokens = tensor(vec![-0.5, 0.3], &[1, 2]);
        let layer = GnnLayer::from_parts(&tree, tensor(vec![1.0; 4], &[1, 2, 2]), Some(tokens), Activation::Relu).unwrap();
        let out = layer.forward(&tensor(vec![3.0, -7.0], &[1, 1, 2])).unwrap();
        assert_eq!(values(&out), vec![0.0, 0.3]);
    }

    #[test]
    fn equal_features_give_activated_tokens() {
        let tree = KinematicTree::default_signer();
        let mut store = ParamStore::new(3, DType::F64, Device::Cpu);
        let layer = GnnLayer::new(&mut store, "g", &tree, 4, 5, true, false, Activation::Tanh).unwrap();
        let x = tensor([0.3, -1.0, 2.0, 0.1].repeat(16), &[1, 16, 4]);
        let out = values(&layer.forward(&x).unwrap());
        let tokens = values(&store.get("g.tokens").unwrap().as_tensor().clone());
        for (o, p) in out.iter().zip(&tokens) {
            assert!((o - p.tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let tree = chain();
        let layer = GnnLayer::from_parts(&tree, tensor(vec![1.0; 8], &[4, 1, 2]), None, Activation::Identity).unwrap();
        assert!(layer.forward(&tensor(vec![0.0; 6], &[1, 3, 2])).is_err());
        assert!(GnnLayer::from_parts(&tree, tensor(vec![1.0; 3], &[3, 1, 1]), None, Activation::Identity).is_err());
    }

    #[test]
    fn distinct_tokens_break_symmetry() {
        let tree = KinematicTree::default_signer();
        let mut store = ParamStore::new(5, DType::F64, Device::Cpu);
        let layer = GnnLayer::new(&mut store, "g", &tree, 3, 4, true, false, Activation::Silu).unwrap();
        let out = values(&layer.forward(&tensor([0.2, -0.4, 0.9].repeat(16), &[1, 16, 3])).unwrap());
        let rows: Vec<&[f64]> = out.chunks(4).collect();
        for i in 0..16 {
            for j in i + 1..16 {
                let d: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(d > 1e-6, "joints {i} and {j} coincide");
            }
        }
    }

    #[test]
    fn shared_kernels_and_equal_tokens_commute_with_mirroring() {
        let tree = KinematicTree::default_signer();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let kernels = random(&mut rng, &[1, 3, 4]);
        let token: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tokens = tensor(token.repeat(16), &[16, 4]);
        let layer = GnnLayer::from_parts(&tree, kernels, Some(tokens), Activation::Tanh).unwrap();
        let perm = index_tensor(&mirror(), &Device::Cpu).unwrap();
        let x = random(&mut rng, &[2, 16, 3]);
        let a = layer.forward(&x.index_select(&perm, 1).unwrap()).unwrap();
        let b = layer.forward(&x).unwrap().index_select(&perm, 1).unwrap();
        for (p, q) in values(&a).iter().zip(values(&b)) {
            assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn expression_layer_examples_and_row_oracle() {
        let eye = Linear::from_tensors(tensor(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]), None);
        let layer = ExpressionLayer::from_parts(eye, Some(tensor(vec![0.0; 6], &[3, 2])), Activation::Identity);
        let x = tensor(vec![1.0, -2.0, 0.5, 3.0, 0.0, 4.0], &[1, 3, 2]);
        assert_eq!(values(&layer.forward(&x).unwrap()), values(&x));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (w, b, tok) = (random(&mut rng, &[2, 3]), random(&mut rng, &[3]), random(&mut rng, &[4, 2]));
        let layer = ExpressionLayer::from_parts(Linear::from_tensors(w.clone(), Some(b.clone())), Some(tok.clone()), Activation::Tanh);
        let x = random(&mut rng, &[2, 4, 2]);
        let out = values(&layer.forward(&x).unwrap());
        let (wv, bv, tv, xv) = (values(&w), values(&b), values(&tok), values(&x));
        for n in 0..2 {
            for e in 0..4 {
                for k in 0..3 {
                    let pre: f64 = bv[k] + (0..2).map(|c| (xv[(n * 4 + e) * 2 + c] + tv[e * 2 + c]) * wv[c * 3 + k]).sum::<f64>();
                    assert!((out[(n * 4 + e) * 3 + k] - pre.tanh()).abs() < 1e-12);
                }
            }
        }
        let zeros = tensor(vec![0.0; 8], &[1, 4, 2]);
        let from_tokens = values(&layer.forward(&zeros).unwrap());
        let direct = values(&layer.linear.forward(&tok).unwrap().tanh().unwrap());
        assert_eq!(from_tokens, direct);
    }

    #[test]
    fn gate_examples() {
        let zero = |k, c| Linear::from_tensors(tensor(vec![0.0; k * c], &[k, c]), None);
        let gate = Gate::from_parts(zero(2, 3), zero(2, 3));
        let h = tensor(vec![2.0, -4.0, 1.0], &[1, 1, 3]);
        let c = tensor(vec![0.7, -0.1], &[1, 2]);
        assert_eq!(values(&gate.forward(&h, &c).unwrap()), vec![1.0, -2.0, 0.5]);

        let shift = Linear::from_tensors(tensor(vec![1.0, 0.0, 2.0, 0.0, 1.0, -1.0], &[2, 3]), None);
        let gate = Gate::from_parts(zero(2, 3), shift);
        let out = gate.forward(&tensor(vec![0.0; 3], &[1, 1, 3]), &c).unwrap();
        let expected = [0.7, -0.1, 1.4 + 0.1];
        for (o, e) in values(&out).iter().zip(expected) {
            assert!((o - e).abs() < 1e-12);
        }

        let mut store = ParamStore::new(1, DType::F64, Device::Cpu);
        let gate = Gate::new(&mut store, "gate", 4, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = random(&mut rng, &[1, 2, 3]);
        let a = values(&gate.forward(&h, &random(&mut rng, &[1, 4])).unwrap());
        let b = values(&gate.forward(&h, &random(&mut rng, &[1, 4])).unwrap());
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            widths: vec![4, 6],
            expression_widths: vec![3, 3],
            hidden: 8,
            decoder_layers: 2,
            heads: 2,
            time_dim: 8,
            text: TextConditioning::Sentence {
                encoder: TextEncoderConfig::Toy { dim: 12 },
            },
            ..ModelConfig::default()
        }
    }

    fn build(config: ModelConfig) -> (ParamStore, Denoiser, StateLayout) {
        let tree = KinematicTree::default_signer();
        let layout = StateLayout::for_tree(&tree, 4, false);
        let mut store = ParamStore::new(9, DType::F64, Device::Cpu);
        let words: Vec<String> = ["hello", "world"].iter().map(|s| s.to_string()).collect();
        let model = Denoiser::new(&mut store, config, &tree, layout, &words).unwrap();
        (store, model, layout)
    }

    fn run(model: &Denoiser, x: &Tensor, text: &str) -> Vec<f64> {
        let b = x.dims()[0];
        let f = x.dims()[1];
        let input = model.prepare_text(text).unwrap();
        values(&model.forward(x, &vec![7; b], &vec![input; b], &vec![f; b]).unwrap())
    }

    #[test]
    fn forward_has_state_shape_and_is_deterministic() {
        let (_, model, layout) = build(tiny_config());
        let x = random(&mut ChaCha8Rng::seed_from_u64(0), &[2, 5, layout.dim()]);
        let a = run(&model, &x, "hello world");
        assert_eq!(a.len(), 2 * 5 * layout.dim());
        assert_eq!(a, run(&model, &x, "hello world"));
        assert_ne!(a, run(&model, &x, "something else entirely"));
    }

    #[test]
    fn every_decoder_is_order_sensitive_or_per_frame() {
        for variant in Variant::ALL {
            let (_, model, layout) = build(tiny_config().with_variant(variant));
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let x = random(&mut rng, &[1, 6, layout.dim()]);
            let rev = index_tensor(&(0..6).rev().collect::<Vec<_>>(), &Device::Cpu).unwrap();
            let forward = run(&model, &x, "hello world");
            let reversed = run(&model, &x.index_select(&rev, 1).unwrap(), "hello world");
            let back = values(
                &tensor(reversed, &[1, 6, layout.dim()])
                    .index_select(&rev, 1)
                    .unwrap(),
            );
            let differs = forward.iter().zip(&back).any(|(a, b)| (a - b).abs() > 1e-9);
            // Only the frame-independent decoder commutes with reversal.
            assert_eq!(differs, variant != Variant::NoRecurrence, "{}", variant.name());
        }
    }

    #[test]
    fn padding_does_not_change_valid_frames() {
        let (_, model, layout) = build(tiny_config());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, &[1, 4, layout.dim()]);
        let padded = Tensor::cat(&[&x, &random(&mut rng, &[1, 3, layout.dim()])], 1).unwrap();
        let input = model.prepare_text("hello").unwrap();
        let a = values(&model.forward(&x, &[3], &[input.clone()], &[4]).unwrap());
        let b = model.forward(&padded, &[3], &[input], &[4]).unwrap();
        let (valid, tail) = (values(&b.narrow(1, 0, 4).unwrap()), values(&b.narrow(1, 4, 3).unwrap()));
        for (p, q) in a.iter().zip(&valid) {
            assert!((p - q).abs() < 1e-12);
        }
        assert!(tail.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn recurrent_decoder_is_smaller_than_attention() {
        let (full, ..) = build(ModelConfig::small());
        let (attn, ..) = build(ModelConfig::small().with_variant(Variant::AttentionDecoder));
        let (a, b) = (ParamSummary::of(&full), ParamSummary::of(&attn));
        assert!(a.decoder < b.decoder, "{} vs {}", a.decoder, b.decoder);
    }

    #[test]
    fn wordbag_maps_unknown_words_to_the_shared_slot() {
        let (_, model, layout) = build(tiny_config().with_variant(Variant::WordbagText));
        assert_eq!(model.vocabulary(), vec!["hello", "world"]);
        let x = random(&mut ChaCha8Rng::seed_from_u64(3), &[1, 3, layout.dim()]);
        assert_eq!(run(&model, &x, "zebra"), run(&model, &x, "quokka"));
        assert_ne!(run(&model, &x, "hello"), run(&model, &x, "world"));
    }

    #[test]
    fn variants_round_trip_through_names() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
        let json = serde_json::to_string(&ModelConfig::default()).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&json).unwrap(), ModelConfig::default());
    }
}
