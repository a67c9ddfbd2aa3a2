//! Full model: encoder, intensity head and prediction heads, plus the
//! per-sequence composite loss with reverse-mode gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::EventSequence;
use crate::encoder::{build_encoder, encode, EncoderConfig, EncoderNodes, EncoderParams};
use crate::error::{Error, Result};
use crate::numerics::{ParamVector, Tape, Tensor};
use crate::tpp_head::{
    cross_entropy_terms, gap_error_terms, nll_terms, preactivations, IntegratorSpec,
    IntensityParams, LossWeights, PredictionHeads,
};

/// Initial slope on elapsed time; slightly negative so intensities decay
/// between events.
pub const INIT_ALPHA: f64 = -0.1;
pub const INIT_BETA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: EncoderConfig,
    pub encoder: EncoderParams,
    pub intensity: IntensityParams,
    pub heads: PredictionHeads,
}

impl ModelParams {
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, m) = (config.num_types, config.d_model);
        let encoder = EncoderParams::init(config, &mut rng)?;
        let intensity = IntensityParams {
            weight: Tensor::glorot_uniform(k, m, &mut rng),
            bias: Tensor::zeros(&[1, k]),
            alpha: Tensor::filled(&[1, k], INIT_ALPHA),
            beta: Tensor::filled(&[1, k], INIT_BETA),
        };
        let heads = PredictionHeads {
            type_weight: Tensor::glorot_uniform(k, m, &mut rng),
            time_weight: Tensor::glorot_uniform(1, m, &mut rng),
            time_bias: Tensor::zeros(&[1, 1]),
        };
        Ok(Self {
            config: config.clone(),
            encoder,
            intensity,
            heads,
        })
    }

    pub fn num_types(&self) -> usize {
        self.config.num_types
    }

    /// Every parameter tensor in declaration order with its dotted path.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.encoder.tensors();
        out.push(("intensity.weight".into(), &self.intensity.weight));
        out.push(("intensity.bias".into(), &self.intensity.bias));
        out.push(("intensity.alpha".into(), &self.intensity.alpha));
        out.push(("intensity.beta".into(), &self.intensity.beta));
        out.push(("heads.type_weight".into(), &self.heads.type_weight));
        out.push(("heads.time_weight".into(), &self.heads.time_weight));
        out.push(("heads.time_bias".into(), &self.heads.time_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.tensors_mut();
        out.push(&mut self.intensity.weight);
        out.push(&mut self.intensity.bias);
        out.push(&mut self.intensity.alpha);
        out.push(&mut self.intensity.beta);
        out.push(&mut self.heads.type_weight);
        out.push(&mut self.heads.time_weight);
        out.push(&mut self.heads.time_bias);
        out
    }

    pub fn expected_shapes(config: &EncoderConfig) -> Vec<Vec<usize>> {
        let (k, m) = (config.num_types, config.d_model);
        let mut out = EncoderParams::expected_shapes(config);
        out.extend([
            vec![k, m],
            vec![1, k],
            vec![1, k],
            vec![1, k],
            vec![k, m],
            vec![1, m],
            vec![1, 1],
        ]);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Applies the configured time scale.
    pub fn prepare(&self, seq: &EventSequence) -> EventSequence {
        if self.config.time_scale == 1.0 {
            seq.clone()
        } else {
            seq.scaled(self.config.time_scale)
        }
    }

    /// Hidden states for an already prepared sequence.
    pub fn hidden(&self, prepared: &EventSequence) -> Result<Tensor> {
        encode(prepared, &self.encoder, &self.config)
    }
}

impl ParamVector for ModelParams {
    fn to_flat(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    fn set_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }

    fn coordinate_name(&self, index: usize) -> String {
        let mut offset = 0;
        for (name, t) in self.tensors() {
            if index < offset + t.len() {
                let local = index - offset;
                return format!("{name}[{},{}]", local / t.cols(), local % t.cols());
            }
            offset += t.len();
        }
        format!("<out of range {index}>")
    }
}

/// Loss components of one sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequenceLoss {
    pub total: f64,
    pub log_likelihood: f64,
    pub event: f64,
    pub time: f64,
    /// `n - 1`
    pub predicted_events: usize,
}

/// Composite loss of one sequence, forward only.
pub fn sequence_loss(
    seq: &EventSequence,
    params: &ModelParams,
    integ: &IntegratorSpec,
    stream: u64,
    weights: LossWeights,
) -> Result<SequenceLoss> {
    weights.validate()?;
    params.intensity.validate()?;
    let seq = params.prepare(seq);
    if seq.len() < 2 {
        return Err(Error::Data("loss needs at least 2 events".into()));
    }
    let h = params.hidden(&seq)?;
    let pre = preactivations(&h, &params.intensity)?;
    let nll = nll_terms(&seq, &pre, &params.intensity.alpha, &params.intensity.beta, integ, stream)?;
    let (event, _) = cross_entropy_terms(&seq, &h.matmul_nt(&params.heads.type_weight)?)?;
    let gaps = h
        .matmul_nt(&params.heads.time_weight)?
        .add_row(&params.heads.time_bias)?;
    let (time, _) = gap_error_terms(&seq, &gaps)?;
    Ok(SequenceLoss {
        total: nll.value + weights.event * event + weights.time * time,
        log_likelihood: -nll.value,
        event,
        time,
        predicted_events: seq.len() - 1,
    })
}

/// Composite loss of one sequence and its gradient for every parameter
/// tensor, in [`ModelParams::tensors`] order.
pub fn loss_and_grad(
    seq: &EventSequence,
    params: &ModelParams,
    integ: &IntegratorSpec,
    stream: u64,
    weights: LossWeights,
) -> Result<(SequenceLoss, Vec<Tensor>)> {
    weights.validate()?;
    params.intensity.validate()?;
    let seq = params.prepare(seq);
    if seq.len() < 2 {
        return Err(Error::Data("loss needs at least 2 events".into()));
    }

    let mut tape = Tape::new();
    let enc = EncoderNodes::register(&mut tape, &params.encoder);
    let w_int = tape.leaf(params.intensity.weight.clone());
    let b_int = tape.leaf(params.intensity.bias.clone());
    let alpha = tape.leaf(params.intensity.alpha.clone());
    let beta = tape.leaf(params.intensity.beta.clone());
    let w_type = tape.leaf(params.heads.type_weight.clone());
    let w_time = tape.leaf(params.heads.time_weight.clone());
    let b_time = tape.leaf(params.heads.time_bias.clone());

    let h = build_encoder(&mut tape, &enc, &seq, &params.config, None)?;

    let pre = tape.matmul_nt(h, w_int)?;
    let pre = tape.add_row(pre, b_int)?;
    let nll = nll_terms(
        &seq,
        tape.value(pre),
        &params.intensity.alpha,
        &params.intensity.beta,
        integ,
        stream,
    )?;
    let nll_node = tape.fused_scalar(
        nll.value,
        vec![pre, alpha, beta],
        vec![nll.d_pre, nll.d_alpha, nll.d_beta],
    )?;

    let logits = tape.matmul_nt(h, w_type)?;
    let (event, d_logits) = cross_entropy_terms(&seq, tape.value(logits))?;
    let event_node = tape.fused_scalar(event, vec![logits], vec![d_logits])?;

    let gaps = tape.matmul_nt(h, w_time)?;
    let gaps = tape.add_row(gaps, b_time)?;
    let (time, d_gaps) = gap_error_terms(&seq, tape.value(gaps))?;
    let time_node = tape.fused_scalar(time, vec![gaps], vec![d_gaps])?;

    let event_term = tape.scale(event_node, weights.event);
    let time_term = tape.scale(time_node, weights.time);
    let total = tape.add(nll_node, event_term)?;
    let total = tape.add(total, time_term)?;

    let mut wrt = enc.ids();
    wrt.extend([w_int, b_int, alpha, beta, w_type, w_time, b_time]);
    let grads = tape.gradients(total, &wrt)?;
    let loss = SequenceLoss {
        total: tape.value(total).data()[0],
        log_likelihood: -nll.value,
        event,
        time,
        predicted_events: seq.len() - 1,
    };
    Ok((loss, grads))
}
