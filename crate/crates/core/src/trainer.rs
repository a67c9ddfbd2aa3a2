//! Mini-batch training with Adam, gradient clipping and binary checkpoints.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, EventSequence};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{loss_and_grad, ModelParams};
use crate::numerics::Tensor;
use crate::tpp_head::{IntegratorSpec, LossWeights};

/// Floor applied to the softplus softness after every update.
pub const MIN_SOFTNESS: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1_loss: f64,
    pub beta2_loss: f64,
    pub integrator: IntegratorSpec,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 4,
            epochs: 50,
            beta1_loss: 1.0,
            beta2_loss: 0.01,
            integrator: IntegratorSpec::default(),
            seed: 0,
            encoder: EncoderConfig::default(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.loss_weights().validate()?;
        let positive = [
            ("learning_rate", self.learning_rate),
            ("adam_epsilon", self.adam_epsilon),
            ("clip_norm", self.clip_norm),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Parameter(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Parameter(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            event: self.beta1_loss,
            time: self.beta2_loss,
        }
    }
}

/// Hex SHA-256 of the compact JSON form of `value`.
pub fn fingerprint<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    Ok(Sha256::digest(&json)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Composite loss per predicted event, accumulated over the epoch's batches.
    pub train_loss: f64,
    pub train_ll_per_event: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// `epoch,train_loss,train_ll_per_event,seconds`. With
    /// `wall_clock = false` the seconds column is written as 0 so the file is
    /// reproducible.
    pub fn write_csv<W: Write>(&self, mut w: W, wall_clock: bool) -> Result<()> {
        writeln!(w, "epoch,train_loss,train_ll_per_event,seconds")?;
        for r in &self.epochs {
            let secs = if wall_clock { r.seconds } else { 0.0 };
            writeln!(
                w,
                "{},{:.8e},{:.8e},{:.8e}",
                r.epoch, r.train_loss, r.train_ll_per_event, secs
            )?;
        }
        Ok(())
    }
}

/// Scales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let c = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }
    norm
}

#[derive(Debug, Clone)]
struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: i32,
}

impl Adam {
    fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    fn update(&mut self, params: &mut ModelParams, grads: &[Tensor], c: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (c.adam_beta1, c.adam_beta2);
        let bias1 = 1.0 - b1.powi(self.step);
        let bias2 = 1.0 - b2.powi(self.step);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *pi -= c.learning_rate * m_hat / (v_hat.sqrt() + c.adam_epsilon);
            }
        }
        for b in params.intensity.beta.data_mut() {
            *b = b.max(MIN_SOFTNESS);
        }
    }
}

/// Loss and summed gradient of one batch.
#[derive(Debug, Clone)]
pub struct BatchResult {
    /// Composite loss summed over the batch, divided by its predicted events.
    pub loss: f64,
    pub log_likelihood: f64,
    pub predicted_events: usize,
    pub grads: Vec<Tensor>,
}

/// Evaluates the batch loss `Σ_s L(s) / Σ_s (n_s - 1)` and its gradient.
/// `batch` pairs each sequence with its Monte Carlo stream id.
pub fn batch_loss_and_grad(
    params: &ModelParams,
    batch: &[(u64, &EventSequence)],
    integ: &IntegratorSpec,
    weights: LossWeights,
) -> Result<BatchResult> {
    let mut total = 0.0;
    let mut ll = 0.0;
    let mut events = 0;
    let mut grads: Option<Vec<Tensor>> = None;
    for &(stream, seq) in batch {
        let (loss, g) = loss_and_grad(seq, params, integ, stream, weights)?;
        total += loss.total;
        ll += loss.log_likelihood;
        events += loss.predicted_events;
        match grads.as_mut() {
            None => grads = Some(g),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    a.add_assign(b)?;
                }
            }
        }
    }
    let mut grads = grads.ok_or_else(|| Error::Data("empty batch".into()))?;
    let scale = 1.0 / events as f64;
    for g in &mut grads {
        g.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    Ok(BatchResult {
        loss: total * scale,
        log_likelihood: ll,
        predicted_events: events,
        grads,
    })
}

/// Stateful trainer: parameters plus optimizer moments.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    params: ModelParams,
    adam: Adam,
    epochs_done: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config.encoder, config.seed)?;
        Ok(Self::with_params(config, params))
    }

    pub fn with_params(config: TrainConfig, params: ModelParams) -> Self {
        let adam = Adam::new(&params);
        Self {
            config,
            params,
            adam,
            epochs_done: 0,
        }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        dataset.require_predictable()?;
        if dataset.num_types() != self.config.encoder.num_types {
            return Err(Error::Data(format!(
                "dataset has {} event types, model expects {}",
                dataset.num_types(),
                self.config.encoder.num_types
            )));
        }
        Ok(())
    }

    /// One optimizer step on `batch`. Returns the batch result before the update.
    pub fn step(&mut self, batch: &[(u64, &EventSequence)]) -> Result<BatchResult> {
        let c = &self.config;
        let mut result = batch_loss_and_grad(&self.params, batch, &c.integrator, c.loss_weights())?;
        let finite = result.loss.is_finite() && result.grads.iter().all(Tensor::is_finite);
        if !finite {
            return Err(Error::Divergence {
                epoch: self.epochs_done + 1,
                batch: 0,
                loss: result.loss,
            });
        }
        clip_global_norm(&mut result.grads, c.clip_norm);
        self.adam.update(&mut self.params, &result.grads, c);
        Ok(result)
    }

    /// Shuffles with a generator keyed by `(seed, epoch)` and takes one step per batch.
    pub fn run_epoch(&mut self, dataset: &Dataset) -> Result<EpochRecord> {
        self.check_dataset(dataset)?;
        let start = Instant::now();
        let epoch = self.epochs_done + 1;
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let (mut loss_sum, mut ll_sum, mut events) = (0.0, 0.0, 0usize);
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let batch: Vec<(u64, &EventSequence)> = chunk
                .iter()
                .map(|&i| (i as u64, &dataset.sequences[i]))
                .collect();
            let r = self.step(&batch).map_err(|e| match e {
                Error::Divergence { loss, .. } => Error::Divergence {
                    epoch,
                    batch: b,
                    loss,
                },
                other => other,
            })?;
            loss_sum += r.loss * r.predicted_events as f64;
            ll_sum += r.log_likelihood;
            events += r.predicted_events;
        }
        self.epochs_done = epoch;
        Ok(EpochRecord {
            epoch,
            train_loss: loss_sum / events as f64,
            train_ll_per_event: ll_sum / events as f64,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

/// Trains for `config.epochs` epochs from a seeded initialization.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<(ModelParams, TrainHistory)> {
    let mut trainer = Trainer::new(config.clone())?;
    trainer.check_dataset(dataset)?;
    let mut history = TrainHistory::default();
    for _ in 0..config.epochs {
        history.epochs.push(trainer.run_epoch(dataset)?);
    }
    Ok((trainer.into_params(), history))
}

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"ROTHP1";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: EncoderConfig,
    fingerprint: String,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
}

/// Writes `ROTHP1`, a little-endian `u64` header length, the JSON header and
/// then every parameter as little-endian `f64` in declaration order.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let tensors = params.tensors();
    let header = CheckpointHeader {
        config: params.config.clone(),
        fingerprint: fingerprint(&params.config)?,
        names: tensors.iter().map(|(n, _)| n.clone()).collect(),
        shapes: tensors.iter().map(|(_, t)| t.shape().to_vec()).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(14 + json.len() + 8 * params.num_parameters());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, t) in tensors {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path)?;
    let corrupt = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));
    let rest = bytes
        .strip_prefix(CHECKPOINT_MAGIC.as_slice())
        .ok_or_else(|| corrupt("missing ROTHP1 magic"))?;
    if rest.len() < 8 {
        return Err(corrupt("truncated header length"));
    }
    let (len_bytes, rest) = rest.split_at(8);
    let header_len = u64::from_le_bytes(len_bytes.try_into().expect("8 bytes")) as usize;
    if rest.len() < header_len {
        return Err(corrupt("truncated header"));
    }
    let (json, body) = rest.split_at(header_len);
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| corrupt(&format!("bad header: {e}")))?;
    header
        .config
        .validate()
        .map_err(|e| corrupt(&format!("bad config: {e}")))?;
    if header.fingerprint != fingerprint(&header.config)? {
        return Err(corrupt("config fingerprint mismatch"));
    }
    let expected = ModelParams::expected_shapes(&header.config);
    if header.shapes != expected {
        return Err(Error::Checkpoint(format!(
            "{}: parameter shapes do not match the stored config",
            path.display()
        )));
    }
    let count: usize = expected.iter().map(|s| s.iter().product::<usize>()).sum();
    if body.len() != 8 * count {
        return Err(corrupt(&format!(
            "expected {} parameter bytes, found {}",
            8 * count,
            body.len()
        )));
    }
    let mut params = ModelParams::init(&header.config, 0)?;
    let mut values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v = values.next().expect("length checked");
        }
    }
    Ok(params)
}

/// Loads a checkpoint and checks it against the expected encoder config.
pub fn load_checkpoint_for(path: &Path, expected: &EncoderConfig) -> Result<ModelParams> {
    let params = load_checkpoint(path)?;
    let want = ModelParams::expected_shapes(expected);
    let have: Vec<Vec<usize>> = params.tensors().iter().map(|(_, t)| t.shape().to_vec()).collect();
    if want != have {
        return Err(Error::Checkpoint(format!(
            "shape mismatch: checkpoint has K = {}, d_model = {}; expected K = {}, d_model = {}",
            params.config.num_types, params.config.d_model, expected.num_types, expected.d_model
        )));
    }
    if params.config.mode != expected.mode {
        return Err(Error::Checkpoint(format!(
            "checkpoint is a {} model, expected {}",
            params.config.mode.name(),
            expected.mode.name()
        )));
    }
    Ok(params)
}
