//! Causal transformer encoder over marked event sequences.
//!
//! Two temporal encodings are supported:
//!
//! * [`TemporalMode::Rotary`] rotates each head's queries and keys by the
//!   event timestamps. Timestamps never touch the embeddings, so every
//!   hidden state is a function of timestamp differences only.
//! * [`TemporalMode::Absolute`] adds a sinusoid of the raw timestamp to the
//!   event embedding once, before the first layer (the THP baseline).
//!
//! Layers are pre-norm: `x += attn(ln1(x)); x += ffn(ln2(x))`, followed by a
//! final normalization. Position `j` attends to every `i <= j`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::EventSequence;
use crate::error::{Error, Result};
use crate::numerics::{NodeId, Tape, Tensor};
use crate::rotary::RotaryTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TemporalMode {
    Rotary,
    Absolute,
}

impl TemporalMode {
    pub fn name(self) -> &'static str {
        match self {
            TemporalMode::Rotary => "rotary",
            TemporalMode::Absolute => "absolute",
        }
    }
}

impl std::str::FromStr for TemporalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rotary" => Ok(TemporalMode::Rotary),
            "absolute" => Ok(TemporalMode::Absolute),
            other => Err(Error::Parameter(format!("unknown temporal mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub num_types: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub d_v: usize,
    pub d_ff: usize,
    pub num_layers: usize,
    pub mode: TemporalMode,
    /// Multiplies every timestamp at ingestion.
    pub time_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_types: 5,
            d_model: 64,
            num_heads: 4,
            head_dim: 16,
            d_v: 16,
            d_ff: 256,
            num_layers: 4,
            mode: TemporalMode::Rotary,
            time_scale: 1.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_types", self.num_types),
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("head_dim", self.head_dim),
            ("d_v", self.d_v),
            ("d_ff", self.d_ff),
            ("num_layers", self.num_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be positive")));
            }
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(Error::Dimension(format!(
                "head_dim must be even, got {}",
                self.head_dim
            )));
        }
        if self.mode == TemporalMode::Absolute && !self.d_model.is_multiple_of(2) {
            return Err(Error::Dimension(format!(
                "sinusoid encoding needs an even d_model, got {}",
                self.d_model
            )));
        }
        if !(self.time_scale > 0.0) || !self.time_scale.is_finite() {
            return Err(Error::Parameter(format!(
                "time_scale must be positive, got {}",
                self.time_scale
            )));
        }
        Ok(())
    }

    pub fn qk_width(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn v_width(&self) -> usize {
        self.num_heads * self.d_v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub norm1_gain: Tensor,
    pub norm1_bias: Tensor,
    pub w_query: Tensor,
    pub w_key: Tensor,
    pub w_value: Tensor,
    pub w_out: Tensor,
    pub norm2_gain: Tensor,
    pub norm2_bias: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// `M x K`; column `k` embeds event type `k`.
    pub event_embedding: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
}

impl LayerParams {
    fn init<R: Rng>(c: &EncoderConfig, rng: &mut R) -> Self {
        let m = c.d_model;
        Self {
            norm1_gain: Tensor::filled(&[1, m], 1.0),
            norm1_bias: Tensor::zeros(&[1, m]),
            w_query: Tensor::glorot_uniform(m, c.qk_width(), rng),
            w_key: Tensor::glorot_uniform(m, c.qk_width(), rng),
            w_value: Tensor::glorot_uniform(m, c.v_width(), rng),
            w_out: Tensor::glorot_uniform(c.v_width(), m, rng),
            norm2_gain: Tensor::filled(&[1, m], 1.0),
            norm2_bias: Tensor::zeros(&[1, m]),
            ffn_w1: Tensor::glorot_uniform(m, c.d_ff, rng),
            ffn_b1: Tensor::zeros(&[1, c.d_ff]),
            ffn_w2: Tensor::glorot_uniform(c.d_ff, m, rng),
            ffn_b2: Tensor::zeros(&[1, m]),
        }
    }

    fn named(&self) -> [(&'static str, &Tensor); 12] {
        [
            ("norm1_gain", &self.norm1_gain),
            ("norm1_bias", &self.norm1_bias),
            ("w_query", &self.w_query),
            ("w_key", &self.w_key),
            ("w_value", &self.w_value),
            ("w_out", &self.w_out),
            ("norm2_gain", &self.norm2_gain),
            ("norm2_bias", &self.norm2_bias),
            ("ffn_w1", &self.ffn_w1),
            ("ffn_b1", &self.ffn_b1),
            ("ffn_w2", &self.ffn_w2),
            ("ffn_b2", &self.ffn_b2),
        ]
    }

    fn named_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.norm1_gain,
            &mut self.norm1_bias,
            &mut self.w_query,
            &mut self.w_key,
            &mut self.w_value,
            &mut self.w_out,
            &mut self.norm2_gain,
            &mut self.norm2_bias,
            &mut self.ffn_w1,
            &mut self.ffn_b1,
            &mut self.ffn_w2,
            &mut self.ffn_b2,
        ]
    }
}

impl EncoderParams {
    pub fn init<R: Rng>(config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let m = config.d_model;
        Ok(Self {
            event_embedding: Tensor::glorot_uniform(m, config.num_types, rng),
            layers: (0..config.num_layers)
                .map(|_| LayerParams::init(config, rng))
                .collect(),
            final_gain: Tensor::filled(&[1, m], 1.0),
            final_bias: Tensor::zeros(&[1, m]),
        })
    }

    /// Parameters in declaration order with dotted paths.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("encoder.event_embedding".to_string(), &self.event_embedding)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.named() {
                out.push((format!("encoder.layers.{l}.{name}"), t));
            }
        }
        out.push(("encoder.final_gain".into(), &self.final_gain));
        out.push(("encoder.final_bias".into(), &self.final_bias));
        out
    }

    /// Same order as [`EncoderParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.event_embedding];
        for layer in &mut self.layers {
            out.extend(layer.named_mut());
        }
        out.push(&mut self.final_gain);
        out.push(&mut self.final_bias);
        out
    }

    /// Expected shapes for `config`, in declaration order.
    pub fn expected_shapes(config: &EncoderConfig) -> Vec<Vec<usize>> {
        let m = config.d_model;
        let mut out = vec![vec![m, config.num_types]];
        for _ in 0..config.num_layers {
            out.extend([
                vec![1, m],
                vec![1, m],
                vec![m, config.qk_width()],
                vec![m, config.qk_width()],
                vec![m, config.v_width()],
                vec![config.v_width(), m],
                vec![1, m],
                vec![1, m],
                vec![m, config.d_ff],
                vec![1, config.d_ff],
                vec![config.d_ff, m],
                vec![1, m],
            ]);
        }
        out.push(vec![1, m]);
        out.push(vec![1, m]);
        out
    }
}

/// Tape handles for one layer's parameters.
pub struct LayerNodes {
    ids: [NodeId; 12],
}

/// Tape handles for the encoder parameters, in declaration order.
pub struct EncoderNodes {
    embedding: NodeId,
    layers: Vec<LayerNodes>,
    final_gain: NodeId,
    final_bias: NodeId,
}

impl EncoderNodes {
    pub fn register(tape: &mut Tape, params: &EncoderParams) -> Self {
        let embedding = tape.leaf(params.event_embedding.clone());
        let layers = params
            .layers
            .iter()
            .map(|l| {
                let named = l.named();
                LayerNodes {
                    ids: named.map(|(_, t)| tape.leaf(t.clone())),
                }
            })
            .collect();
        let final_gain = tape.leaf(params.final_gain.clone());
        let final_bias = tape.leaf(params.final_bias.clone());
        Self {
            embedding,
            layers,
            final_gain,
            final_bias,
        }
    }

    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = vec![self.embedding];
        for l in &self.layers {
            out.extend_from_slice(&l.ids);
        }
        out.push(self.final_gain);
        out.push(self.final_bias);
        out
    }
}

/// Row `i` is column `marks[i]` of the event embedding matrix.
pub fn embed_events(seq: &EventSequence, params: &EncoderParams) -> Result<Tensor> {
    let table = &params.event_embedding;
    seq.check_marks(table.cols())?;
    let m = table.rows();
    let mut data = Vec::with_capacity(seq.len() * m);
    for &k in seq.marks() {
        data.extend((0..m).map(|r| table.get(r, k)));
    }
    Tensor::new(vec![seq.len(), m], data)
}

/// Sinusoid temporal encoding, `n x dim`. With one-based column `j`, odd
/// columns hold `cos(t / 10000^((j-1)/dim))` and even columns hold
/// `sin(t / 10000^(j/dim))`.
pub fn sinusoid_encoding(times: &[f64], dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Dimension(format!(
            "sinusoid encoding dimension must be even, got {dim}"
        )));
    }
    if times.is_empty() {
        return Err(Error::Data("no timestamps to encode".into()));
    }
    let divisors: Vec<f64> = (1..=dim)
        .map(|j| {
            let exponent = if j % 2 == 1 { j - 1 } else { j };
            10000f64.powf(exponent as f64 / dim as f64)
        })
        .collect();
    let mut data = Vec::with_capacity(times.len() * dim);
    for &t in times {
        for (idx, d) in divisors.iter().enumerate() {
            let arg = t / d;
            data.push(if idx % 2 == 0 { arg.cos() } else { arg.sin() });
        }
    }
    Tensor::new(vec![times.len(), dim], data)
}

/// Lower-triangular attention mask including the diagonal.
pub fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|idx| idx % n <= idx / n).collect()
}

/// Records the encoder forward pass on `tape` and returns the hidden-state node.
///
/// When `trace` is given, each layer's per-head raw score matrices
/// (`rotated q · rotated k`, before scaling and masking) are appended to it.
pub fn build_encoder(
    tape: &mut Tape,
    nodes: &EncoderNodes,
    seq: &EventSequence,
    config: &EncoderConfig,
    mut trace: Option<&mut Vec<Vec<Tensor>>>,
) -> Result<NodeId> {
    let n = seq.len();
    if n == 0 {
        return Err(Error::Data("cannot encode an empty sequence".into()));
    }
    seq.check_marks(config.num_types)?;

    let mut x = tape.gather_cols(nodes.embedding, seq.marks())?;
    if config.mode == TemporalMode::Absolute {
        let pe = tape.leaf(sinusoid_encoding(seq.times(), config.d_model)?);
        x = tape.add(x, pe)?;
    }

    let angles = match config.mode {
        TemporalMode::Rotary => {
            Some(RotaryTable::build_theta(config.head_dim)?.angles(seq.times()))
        }
        TemporalMode::Absolute => None,
    };
    let mask = causal_mask(n);
    let inv_sqrt = 1.0 / (config.head_dim as f64).sqrt();

    for layer in &nodes.layers {
        let [g1, b1, wq, wk, wv, wo, g2, b2, f1, fb1, f2, fb2] = layer.ids;
        let a = tape.layer_norm(x, g1, b1)?;
        let q = tape.matmul(a, wq)?;
        let k = tape.matmul(a, wk)?;
        let v = tape.matmul(a, wv)?;
        let mut layer_scores = Vec::new();
        let mut heads = Vec::with_capacity(config.num_heads);
        for h in 0..config.num_heads {
            let mut qh = tape.col_slice(q, h * config.head_dim, config.head_dim)?;
            let mut kh = tape.col_slice(k, h * config.head_dim, config.head_dim)?;
            let vh = tape.col_slice(v, h * config.d_v, config.d_v)?;
            if let Some((cos, sin)) = &angles {
                qh = tape.rotate_pairs(qh, cos.clone(), sin.clone())?;
                kh = tape.rotate_pairs(kh, cos.clone(), sin.clone())?;
            }
            let raw = tape.matmul_nt(qh, kh)?;
            if trace.is_some() {
                layer_scores.push(tape.value(raw).clone());
            }
            let scaled = tape.scale(raw, inv_sqrt);
            let weights = tape.softmax_rows(scaled, Some(mask.clone()))?;
            heads.push(tape.matmul(weights, vh)?);
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(layer_scores);
        }
        let cat = tape.concat_cols(&heads)?;
        let attn = tape.matmul(cat, wo)?;
        x = tape.add(x, attn)?;

        let b = tape.layer_norm(x, g2, b2)?;
        let hidden = tape.matmul(b, f1)?;
        let hidden = tape.add_row(hidden, fb1)?;
        let hidden = tape.gelu(hidden);
        let out = tape.matmul(hidden, f2)?;
        let out = tape.add_row(out, fb2)?;
        x = tape.add(x, out)?;
    }
    tape.layer_norm(x, nodes.final_gain, nodes.final_bias)
}

/// Hidden states `H` (`n x d_model`); row `j` summarizes events `0..=j`.
pub fn encode(seq: &EventSequence, params: &EncoderParams, config: &EncoderConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let nodes = EncoderNodes::register(&mut tape, params);
    let h = build_encoder(&mut tape, &nodes, seq, config, None)?;
    Ok(tape.value(h).clone())
}

/// Hidden states plus the raw attention scores of every layer and head.
pub fn encode_traced(
    seq: &EventSequence,
    params: &EncoderParams,
    config: &EncoderConfig,
) -> Result<(Tensor, Vec<Vec<Tensor>>)> {
    let mut tape = Tape::new();
    let nodes = EncoderNodes::register(&mut tape, params);
    let mut scores = Vec::new();
    let h = build_encoder(&mut tape, &nodes, seq, config, Some(&mut scores))?;
    Ok((tape.value(h).clone(), scores))
}
