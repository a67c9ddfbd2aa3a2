//! Neural Hawkes intensity, log-likelihood, prediction heads and losses.
//!
//! On `[t_j, t_{j+1})` the type-`k` intensity is
//! `softplus(alpha_k (t - t_j) + w_k · h_j + b_k, beta_k)`. The log-likelihood
//! conditions on the first event: it sums `log λ_{k_i}(t_i)` for `i >= 2`
//! (left limits, so with `h_{i-1}`) and subtracts `∫ λ` over `[t_1, t_n]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::EventSequence;
use crate::error::{Error, Result};
use crate::numerics::{argmax, dot, log_sum_exp, softplus_unchecked, softplus_with_grad, Tensor};

/// Per-type intensity parameters. Row/column `k` belongs to event type `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityParams {
    /// `K x M`, row `k` is `w_k`.
    pub weight: Tensor,
    /// `1 x K`
    pub bias: Tensor,
    /// `1 x K`, slope on the elapsed time since the last event.
    pub alpha: Tensor,
    /// `1 x K`, softplus softness; strictly positive.
    pub beta: Tensor,
}

impl IntensityParams {
    pub fn num_types(&self) -> usize {
        self.weight.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_types();
        for (name, t) in [("bias", &self.bias), ("alpha", &self.alpha), ("beta", &self.beta)] {
            if t.shape() != [1, k] {
                return Err(Error::Dimension(format!(
                    "intensity {name} has shape {:?}, expected [1, {k}]",
                    t.shape()
                )));
            }
        }
        if let Some(b) = self.beta.data().iter().find(|b| !(**b > 0.0)) {
            return Err(Error::Parameter(format!("softness beta must be > 0, got {b}")));
        }
        Ok(())
    }

    /// Every parameter zero except `beta = 1`: λ_k ≡ ln 2.
    pub fn zeroed(num_types: usize, d_model: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[num_types, d_model]),
            bias: Tensor::zeros(&[1, num_types]),
            alpha: Tensor::zeros(&[1, num_types]),
            beta: Tensor::filled(&[1, num_types], 1.0),
        }
    }
}

/// Linear next-type and next-gap heads.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionHeads {
    /// `K x M`
    pub type_weight: Tensor,
    /// `1 x M`
    pub time_weight: Tensor,
    /// `1 x 1`
    pub time_bias: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IntegrationMethod {
    MonteCarlo,
    Trapezoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegratorSpec {
    pub method: IntegrationMethod,
    pub samples_per_interval: usize,
    pub seed: u64,
}

impl Default for IntegratorSpec {
    fn default() -> Self {
        Self {
            method: IntegrationMethod::Trapezoid,
            samples_per_interval: 20,
            seed: 0,
        }
    }
}

impl IntegratorSpec {
    pub fn trapezoid(samples_per_interval: usize) -> Self {
        Self {
            method: IntegrationMethod::Trapezoid,
            samples_per_interval,
            seed: 0,
        }
    }

    pub fn monte_carlo(samples_per_interval: usize, seed: u64) -> Self {
        Self {
            method: IntegrationMethod::MonteCarlo,
            samples_per_interval,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.samples_per_interval == 0 {
            return Err(Error::Parameter("samples_per_interval must be >= 1".into()));
        }
        Ok(())
    }

    /// Offsets into `[0, gap]` and their quadrature weights.
    ///
    /// Monte Carlo draws come from a counter-based stream addressed by
    /// `(seed, key.sequence, key.interval)`, so they do not depend on where
    /// the interval sits on the time axis.
    pub fn nodes(&self, gap: f64, key: IntervalKey) -> Vec<(f64, f64)> {
        let n = self.samples_per_interval;
        match self.method {
            IntegrationMethod::Trapezoid => {
                let h = gap / n as f64;
                (0..=n)
                    .map(|m| {
                        let w = if m == 0 || m == n { 0.5 * h } else { h };
                        (m as f64 * h, w)
                    })
                    .collect()
            }
            IntegrationMethod::MonteCarlo => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(key.sequence);
                rng.set_word_pos(u128::from(key.interval) * n as u128 * 2);
                let w = gap / n as f64;
                (0..n).map(|_| (rng.gen::<f64>() * gap, w)).collect()
            }
        }
    }
}

/// Addresses the Monte Carlo substream of one inter-event interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct IntervalKey {
    pub sequence: u64,
    pub interval: u64,
}

fn check_hidden(h: &[f64], p: &IntensityParams) -> Result<()> {
    if h.len() != p.weight.cols() {
        return Err(Error::Dimension(format!(
            "hidden vector has length {}, intensity weights expect {}",
            h.len(),
            p.weight.cols()
        )));
    }
    Ok(())
}

/// λ_k(t) on the interval opened by the event at `t_j` with hidden state `h_j`.
pub fn intensity_k(t: f64, t_j: f64, h_j: &[f64], k: usize, p: &IntensityParams) -> Result<f64> {
    if t < t_j {
        return Err(Error::Interval(format!("t = {t} precedes the last event t_j = {t_j}")));
    }
    check_hidden(h_j, p)?;
    if k >= p.num_types() {
        return Err(Error::Data(format!("event type {k} out of range")));
    }
    p.validate()?;
    let z = dot(p.weight.row(k), h_j) + p.bias.data()[k];
    Ok(softplus_unchecked(p.alpha.data()[k] * (t - t_j) + z, p.beta.data()[k]))
}

/// λ(t) = Σ_k λ_k(t).
pub fn total_intensity(t: f64, t_j: f64, h_j: &[f64], p: &IntensityParams) -> Result<f64> {
    let mut total = 0.0;
    for k in 0..p.num_types() {
        total += intensity_k(t, t_j, h_j, k, p)?;
    }
    Ok(total)
}

/// Estimate of `∫ λ(τ) dτ` over `[lower, upper]` where `lower` is the last event time.
pub fn integral_estimate(
    lower: f64,
    upper: f64,
    h_j: &[f64],
    p: &IntensityParams,
    integ: &IntegratorSpec,
    key: IntervalKey,
) -> Result<f64> {
    if upper < lower {
        return Err(Error::Interval(format!("upper bound {upper} below lower bound {lower}")));
    }
    check_hidden(h_j, p)?;
    p.validate()?;
    integ.validate()?;
    let nodes = integ.nodes(upper - lower, key);
    let mut total = 0.0;
    for k in 0..p.num_types() {
        let z = dot(p.weight.row(k), h_j) + p.bias.data()[k];
        let (a, b) = (p.alpha.data()[k], p.beta.data()[k]);
        let mut acc = 0.0;
        for &(s, w) in &nodes {
            acc += w * softplus_unchecked(a * s + z, b);
        }
        total += acc;
    }
    Ok(total)
}

/// `H W^T + b`, the time-independent part of every intensity argument (`n x K`).
pub fn preactivations(hidden: &Tensor, p: &IntensityParams) -> Result<Tensor> {
    hidden.matmul_nt(&p.weight)?.add_row(&p.bias)
}

/// Negative log-likelihood together with its gradients with respect to the
/// preactivations, `alpha` and `beta`.
pub(crate) struct NllTerms {
    pub value: f64,
    pub d_pre: Tensor,
    pub d_alpha: Tensor,
    pub d_beta: Tensor,
}

pub(crate) fn nll_terms(
    seq: &EventSequence,
    pre: &Tensor,
    alpha: &Tensor,
    beta: &Tensor,
    integ: &IntegratorSpec,
    stream: u64,
) -> Result<NllTerms> {
    let n = seq.len();
    if n < 2 {
        return Err(Error::Data("log-likelihood needs at least 2 events".into()));
    }
    integ.validate()?;
    let k_types = pre.cols();
    if pre.rows() != n {
        return Err(Error::Dimension(format!(
            "{} hidden rows for {n} events",
            pre.rows()
        )));
    }
    let (alpha, beta) = (alpha.data(), beta.data());
    if let Some(b) = beta.iter().find(|b| !(**b > 0.0)) {
        return Err(Error::Parameter(format!("softness beta must be > 0, got {b}")));
    }
    seq.check_marks(k_types)?;

    let times = seq.times();
    let marks = seq.marks();
    let mut d_pre = Tensor::zeros(&[n, k_types]);
    let mut d_alpha = vec![0.0; k_types];
    let mut d_beta = vec![0.0; k_types];
    let mut log_sum = 0.0;
    let mut integral = 0.0;

    for j in 0..n - 1 {
        let gap = times[j + 1] - times[j];
        let z = pre.row(j);
        let nodes = integ.nodes(
            gap,
            IntervalKey {
                sequence: stream,
                interval: j as u64,
            },
        );
        let grad_row = d_pre.row_mut(j);
        for k in 0..k_types {
            let (a, b) = (alpha[k], beta[k]);
            let mut acc = 0.0;
            for &(s, w) in &nodes {
                let (f, dx, db) = softplus_with_grad(a * s + z[k], b);
                acc += w * f;
                grad_row[k] += w * dx;
                d_alpha[k] += w * dx * s;
                d_beta[k] += w * db;
            }
            integral += acc;
        }

        // event j+1 is scored by the intensity conditioned on history through j
        let k = marks[j + 1];
        let (lam, dx, db) = softplus_with_grad(alpha[k] * gap + z[k], beta[k]);
        log_sum += lam.ln();
        grad_row[k] -= dx / lam;
        d_alpha[k] -= dx * gap / lam;
        d_beta[k] -= db / lam;
    }

    Ok(NllTerms {
        value: integral - log_sum,
        d_pre,
        d_alpha: Tensor::row_vector(d_alpha),
        d_beta: Tensor::row_vector(d_beta),
    })
}

/// `Σ_{i=2}^n log λ_{k_i}(t_i) − ∫_{t_1}^{t_n} λ(τ) dτ`.
///
/// `stream` selects the Monte Carlo substream (ignored by the trapezoid rule).
pub fn log_likelihood(
    seq: &EventSequence,
    hidden: &Tensor,
    p: &IntensityParams,
    integ: &IntegratorSpec,
    stream: u64,
) -> Result<f64> {
    if seq.len() < 2 {
        return Err(Error::Data("log-likelihood needs at least 2 events".into()));
    }
    p.validate()?;
    let pre = preactivations(hidden, p)?;
    Ok(-nll_terms(seq, &pre, &p.alpha, &p.beta, integ, stream)?.value)
}

/// Next-type logits `W^e h_j` and predicted next gap `W^t h_j + b`.
pub fn predict_next(h_j: &[f64], heads: &PredictionHeads) -> Result<(Vec<f64>, f64)> {
    if h_j.len() != heads.type_weight.cols() || h_j.len() != heads.time_weight.cols() {
        return Err(Error::Dimension(format!(
            "hidden vector length {} does not match prediction heads",
            h_j.len()
        )));
    }
    let logits = (0..heads.type_weight.rows())
        .map(|k| dot(heads.type_weight.row(k), h_j))
        .collect();
    let gap = dot(heads.time_weight.row(0), h_j) + heads.time_bias.data()[0];
    Ok((logits, gap))
}

/// Predicted type: argmax of the logits, lowest index on ties.
pub fn predicted_type(logits: &[f64]) -> usize {
    argmax(logits)
}

/// Logits for every position, `n x K`.
pub fn type_logits(hidden: &Tensor, heads: &PredictionHeads) -> Result<Tensor> {
    hidden.matmul_nt(&heads.type_weight)
}

/// Predicted gaps for every position, `n x 1`.
pub fn gap_predictions(hidden: &Tensor, heads: &PredictionHeads) -> Result<Tensor> {
    hidden.matmul_nt(&heads.time_weight)?.add_row(&heads.time_bias)
}

/// Cross-entropy of predicting `k_{j+1}` from row `j`, with gradient wrt the logits.
pub(crate) fn cross_entropy_terms(seq: &EventSequence, logits: &Tensor) -> Result<(f64, Tensor)> {
    let n = seq.len();
    if n < 2 {
        return Err(Error::Data("event loss needs at least 2 events".into()));
    }
    seq.check_marks(logits.cols())?;
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    for j in 0..n - 1 {
        let row = logits.row(j);
        let lse = log_sum_exp(row);
        let target = seq.marks()[j + 1];
        total += lse - row[target];
        let g = grad.row_mut(j);
        for (gk, &z) in g.iter_mut().zip(row) {
            *gk = (z - lse).exp();
        }
        g[target] -= 1.0;
    }
    Ok((total, grad))
}

/// Squared gap error, with gradient wrt the `n x 1` predictions.
pub(crate) fn gap_error_terms(seq: &EventSequence, predicted: &Tensor) -> Result<(f64, Tensor)> {
    let n = seq.len();
    if n < 2 {
        return Err(Error::Data("time loss needs at least 2 events".into()));
    }
    let mut grad = Tensor::zeros(predicted.shape());
    let mut total = 0.0;
    for (j, gap) in seq.gaps().into_iter().enumerate() {
        let r = gap - predicted.data()[j];
        total += r * r;
        grad.data_mut()[j] = -2.0 * r;
    }
    Ok((total, grad))
}

/// `Σ_{j=1}^{n-1} −log softmax(W^e h_j)[k_{j+1}]`.
pub fn event_loss(seq: &EventSequence, hidden: &Tensor, heads: &PredictionHeads) -> Result<f64> {
    Ok(cross_entropy_terms(seq, &type_logits(hidden, heads)?)?.0)
}

/// `Σ_{j=1}^{n-1} ((t_{j+1} − t_j) − predicted gap_j)²`.
pub fn time_loss(seq: &EventSequence, hidden: &Tensor, heads: &PredictionHeads) -> Result<f64> {
    Ok(gap_error_terms(seq, &gap_predictions(hidden, heads)?)?.0)
}

/// Weights of the event and time terms in the composite loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub event: f64,
    pub time: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            event: 1.0,
            time: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.event >= 0.0) || !(self.time >= 0.0) {
            return Err(Error::Parameter(format!(
                "loss weights must be >= 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// `−log_likelihood + w.event · event_loss + w.time · time_loss`.
pub fn composite_loss(
    seq: &EventSequence,
    hidden: &Tensor,
    p: &IntensityParams,
    heads: &PredictionHeads,
    integ: &IntegratorSpec,
    stream: u64,
    weights: LossWeights,
) -> Result<f64> {
    weights.validate()?;
    let ll = log_likelihood(seq, hidden, p, integ, stream)?;
    let ev = event_loss(seq, hidden, heads)?;
    let tl = time_loss(seq, hidden, heads)?;
    Ok(-ll + weights.event * ev + weights.time * tl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::logistic;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::LN_2;

    fn random_matrix(m: usize, n: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(vec![m, n], (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_params(k: usize, m: usize, seed: u64) -> IntensityParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        IntensityParams {
            weight: random_matrix(k, m, &mut rng),
            bias: random_matrix(1, k, &mut rng),
            alpha: random_matrix(1, k, &mut rng),
            beta: random_matrix(1, k, &mut rng).map(|v| 0.5 + v.abs()),
        }
    }

    fn zero_heads(k: usize, m: usize) -> PredictionHeads {
        PredictionHeads {
            type_weight: Tensor::zeros(&[k, m]),
            time_weight: Tensor::zeros(&[1, m]),
            time_bias: Tensor::zeros(&[1, 1]),
        }
    }

    #[test]
    fn zeroed_intensity_is_ln2() {
        let p = IntensityParams::zeroed(1, 3);
        for t in [0.0, 0.5, 9.0] {
            assert!((intensity_k(t, 0.0, &[0.4, 1.0, -2.0], 0, &p).unwrap() - LN_2).abs() < 1e-15);
        }
        let p3 = IntensityParams::zeroed(3, 2);
        let total = total_intensity(1.0, 0.0, &[0.0, 0.0], &p3).unwrap();
        assert!((total - 3.0 * LN_2).abs() < 1e-15);
    }

    #[test]
    fn zero_gap_drops_time_term() {
        let p = random_params(2, 3, 1);
        let h = [0.3, -0.2, 0.8];
        let z = dot(p.weight.row(1), &h) + p.bias.data()[1];
        let expected = softplus_unchecked(z, p.beta.data()[1]);
        assert_eq!(intensity_k(2.0, 2.0, &h, 1, &p).unwrap(), expected);
    }

    #[test]
    fn slope_only_intensity() {
        let mut p = IntensityParams::zeroed(1, 2);
        p.alpha = Tensor::row_vector(vec![1.0]);
        let v = intensity_k(5.0, 3.0, &[0.0, 0.0], 0, &p).unwrap();
        assert!((v - 2.0f64.exp().ln_1p()).abs() < 1e-15);
        assert!((v - 2.126928).abs() < 1e-6);
    }

    #[test]
    fn intensity_rejects_time_before_last_event() {
        let p = IntensityParams::zeroed(1, 1);
        assert!(matches!(intensity_k(0.5, 1.0, &[0.0], 0, &p), Err(Error::Interval(_))));
        assert!(matches!(
            integral_estimate(2.0, 1.0, &[0.0], &p, &IntegratorSpec::default(), IntervalKey::default()),
            Err(Error::Interval(_))
        ));
    }

    #[test]
    fn total_is_sum_of_types() {
        let p = random_params(4, 3, 2);
        let h = [0.1, 0.7, -0.5];
        let mut explicit = 0.0;
        for k in 0..4 {
            explicit += intensity_k(1.3, 0.2, &h, k, &p).unwrap();
        }
        assert_eq!(total_intensity(1.3, 0.2, &h, &p).unwrap(), explicit);
        let p1 = random_params(1, 3, 3);
        assert_eq!(
            total_intensity(1.3, 0.2, &h, &p1).unwrap(),
            intensity_k(1.3, 0.2, &h, 0, &p1).unwrap()
        );
    }

    #[test]
    fn integral_of_empty_or_constant_interval() {
        let p = IntensityParams::zeroed(1, 1);
        let key = IntervalKey::default();
        for integ in [IntegratorSpec::trapezoid(20), IntegratorSpec::monte_carlo(20, 9)] {
            assert_eq!(integral_estimate(1.0, 1.0, &[0.0], &p, &integ, key).unwrap(), 0.0);
            let v = integral_estimate(0.0, 2.0, &[0.0], &p, &integ, key).unwrap();
            assert!((v - 2.0 * LN_2).abs() < 1e-14, "{v}");
        }
    }

    #[test]
    fn trapezoid_refinement_converges() {
        // softplus(t) on [0, 1]; reference from Simpson's rule on a fine grid
        let f = |t: f64| t.exp().ln_1p();
        let m = 20_000;
        let h = 1.0 / m as f64;
        let mut exact = f(0.0) + f(1.0);
        for i in 1..m {
            exact += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
        }
        exact *= h / 3.0;

        let mut p = IntensityParams::zeroed(1, 1);
        p.alpha = Tensor::row_vector(vec![1.0]);
        let key = IntervalKey::default();
        let at = |n: usize| integral_estimate(0.0, 1.0, &[0.0], &p, &IntegratorSpec::trapezoid(n), key).unwrap();
        let fine = at(999);
        assert!((fine - exact).abs() < 1e-7);
        // leading trapezoid error term: h^2 / 12 * (f'(1) - f'(0))
        for n in [9, 10, 40] {
            let h = 1.0 / n as f64;
            let predicted = h * h / 12.0 * (logistic(1.0) - 0.5);
            let err = at(n) - exact;
            assert!((err - predicted).abs() < 0.01 * predicted, "n = {n}: {err} vs {predicted}");
        }
        assert!((at(40) - fine).abs() < 1e-4);
    }

    #[test]
    fn constant_model_log_likelihood() {
        let p = IntensityParams::zeroed(1, 2);
        let h = Tensor::zeros(&[2, 2]);
        let s = EventSequence::new(vec![1.0, 2.0], vec![0, 0]).unwrap();
        let ll = log_likelihood(&s, &h, &p, &IntegratorSpec::trapezoid(20), 0).unwrap();
        let expected = LN_2.ln() - LN_2;
        assert!((ll - expected).abs() < 1e-12);
        assert!((ll + 1.059660).abs() < 1e-6);

        let h3 = Tensor::zeros(&[3, 2]);
        let s3 = EventSequence::new(vec![1.0, 2.0, 3.0], vec![0, 0, 0]).unwrap();
        let trap = log_likelihood(&s3, &h3, &p, &IntegratorSpec::trapezoid(20), 0).unwrap();
        let mc = log_likelihood(&s3, &h3, &p, &IntegratorSpec::monte_carlo(20, 4), 0).unwrap();
        assert!((trap - 2.0 * expected).abs() < 1e-12);
        assert!((trap - mc).abs() < 1e-12);
    }

    #[test]
    fn monte_carlo_converges_to_quadrature() {
        let p = random_params(3, 4, 21);
        let h = [0.4, -0.3, 0.9, 0.1];
        let (lo, hi) = (2.0, 5.5);
        let key = IntervalKey { sequence: 7, interval: 2 };
        let reference = integral_estimate(lo, hi, &h, &p, &IntegratorSpec::trapezoid(10_000), key).unwrap();
        let mut errors = Vec::new();
        for n in [10, 100, 1000] {
            let integ = IntegratorSpec::monte_carlo(n, 3);
            let est = integral_estimate(lo, hi, &h, &p, &integ, key).unwrap();
            let values: Vec<f64> = integ
                .nodes(hi - lo, key)
                .iter()
                .map(|&(s, _)| (hi - lo) * total_intensity(lo + s, lo, &h, &p).unwrap())
                .collect();
            let mean = values.iter().sum::<f64>() / n as f64;
            assert!((mean - est).abs() < 1e-9 * est.abs());
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            errors.push(((est - reference).abs(), se));
        }
        let (err, se) = errors[2];
        assert!(err < 3.0 * se, "{err} vs 3 * {se}");
        assert!(errors[2].1 < errors[0].1);
    }

    #[test]
    fn likelihood_needs_two_events() {
        let p = IntensityParams::zeroed(1, 2);
        let s = EventSequence::new(vec![1.0], vec![0]).unwrap();
        assert!(matches!(
            log_likelihood(&s, &Tensor::zeros(&[1, 2]), &p, &IntegratorSpec::default(), 0),
            Err(Error::Data(_))
        ));
        let heads = zero_heads(1, 2);
        assert!(event_loss(&s, &Tensor::zeros(&[1, 2]), &heads).is_err());
        assert!(time_loss(&s, &Tensor::zeros(&[1, 2]), &heads).is_err());
    }

    #[test]
    fn monte_carlo_draws_ignore_interval_position() {
        let integ = IntegratorSpec::monte_carlo(8, 11);
        let key = IntervalKey { sequence: 3, interval: 5 };
        let a = integ.nodes(2.0, key);
        let b = integ.nodes(2.0, key);
        assert_eq!(a, b);
        let other = integ.nodes(2.0, IntervalKey { sequence: 3, interval: 6 });
        assert_ne!(a, other);
    }

    #[test]
    fn zero_heads_predict_uniformly() {
        let heads = zero_heads(3, 4);
        let (logits, gap) = predict_next(&[0.2, -1.0, 3.0, 0.5], &heads).unwrap();
        assert_eq!(predicted_type(&logits), 0);
        assert_eq!(gap, 0.0);
        let s = EventSequence::new(vec![0.0, 1.0, 2.0, 3.0], vec![0, 1, 2, 1]).unwrap();
        let h = Tensor::zeros(&[4, 4]);
        assert!((event_loss(&s, &h, &heads).unwrap() - 3.0 * 3f64.ln()).abs() < 1e-12);
        assert_eq!(time_loss(&s, &h, &heads).unwrap(), 3.0);
    }

    #[test]
    fn single_type_always_predicts_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let heads = PredictionHeads {
            type_weight: random_matrix(1, 3, &mut rng),
            time_weight: random_matrix(1, 3, &mut rng),
            time_bias: Tensor::zeros(&[1, 1]),
        };
        let (logits, _) = predict_next(&[1.0, 2.0, 3.0], &heads).unwrap();
        assert_eq!(predicted_type(&logits), 0);
    }

    #[test]
    fn exact_gap_head_has_zero_time_loss() {
        // hidden column 0 carries the true next gap; the head copies it
        let s = EventSequence::new(vec![0.0, 0.5, 2.0, 2.25], vec![0, 0, 0, 0]).unwrap();
        let mut h = Tensor::zeros(&[4, 2]);
        for (j, g) in s.gaps().into_iter().enumerate() {
            h.set(j, 0, g);
        }
        let heads = PredictionHeads {
            type_weight: Tensor::zeros(&[1, 2]),
            time_weight: Tensor::row_vector(vec![1.0, 0.0]),
            time_bias: Tensor::zeros(&[1, 1]),
        };
        assert_eq!(time_loss(&s, &h, &heads).unwrap(), 0.0);
        let shifted = s.translated(40.0);
        assert!((time_loss(&shifted, &h, &heads).unwrap()).abs() < 1e-24);
    }

    #[test]
    fn confident_logits_drive_event_loss_to_zero() {
        let s = EventSequence::new(vec![0.0, 1.0, 2.0], vec![0, 1, 0]).unwrap();
        let mut h = Tensor::zeros(&[3, 2]);
        h.set(0, 1, 1.0);
        h.set(1, 0, 1.0);
        let big = PredictionHeads {
            type_weight: Tensor::identity(2).scale(60.0),
            time_weight: Tensor::zeros(&[1, 2]),
            time_bias: Tensor::zeros(&[1, 1]),
        };
        assert!(event_loss(&s, &h, &big).unwrap() < 1e-20);
    }

    #[test]
    fn event_loss_matches_per_position_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = random_matrix(5, 4, &mut rng);
        let heads = PredictionHeads {
            type_weight: random_matrix(3, 4, &mut rng),
            time_weight: random_matrix(1, 4, &mut rng),
            time_bias: Tensor::zeros(&[1, 1]),
        };
        let s = EventSequence::new(vec![0.0, 0.3, 1.0, 1.1, 2.0], vec![2, 0, 1, 1, 0]).unwrap();
        let mut expected = 0.0;
        for j in 0..4 {
            let (logits, _) = predict_next(h.row(j), &heads).unwrap();
            let probs: Vec<f64> = {
                let e: Vec<f64> = logits.iter().map(|z| z.exp()).collect();
                let total: f64 = e.iter().sum();
                e.iter().map(|v| v / total).collect()
            };
            expected -= probs[s.marks()[j + 1]].ln();
        }
        assert!((event_loss(&s, &h, &heads).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn composite_is_sum_of_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = random_matrix(4, 3, &mut rng);
        let p = random_params(2, 3, 10);
        let heads = PredictionHeads {
            type_weight: random_matrix(2, 3, &mut rng),
            time_weight: random_matrix(1, 3, &mut rng),
            time_bias: Tensor::row_vector(vec![0.3]),
        };
        let s = EventSequence::new(vec![0.0, 0.7, 1.5, 4.0], vec![1, 0, 1, 1]).unwrap();
        let integ = IntegratorSpec::trapezoid(16);
        let w = LossWeights { event: 0.7, time: 0.2 };
        let total = composite_loss(&s, &h, &p, &heads, &integ, 0, w).unwrap();
        let ll = log_likelihood(&s, &h, &p, &integ, 0).unwrap();
        let parts = -ll + 0.7 * event_loss(&s, &h, &heads).unwrap() + 0.2 * time_loss(&s, &h, &heads).unwrap();
        assert!((total - parts).abs() < 1e-12);
        let nll_only = composite_loss(&s, &h, &p, &heads, &integ, 0, LossWeights { event: 0.0, time: 0.0 }).unwrap();
        assert_eq!(nll_only, -ll);
    }

    #[test]
    fn negative_weights_are_rejected() {
        assert!(LossWeights { event: -1.0, time: 0.0 }.validate().is_err());
    }

    proptest! {
        #[test]
        fn argmax_of_softmax_equals_argmax_of_logits(z in proptest::collection::vec(-20.0f64..20.0, 1..8)) {
            let e: Vec<f64> = z.iter().map(|v| (v - 20.0).exp()).collect();
            prop_assert_eq!(argmax(&z), argmax(&e));
        }

        #[test]
        fn intensities_are_positive(
            x in proptest::collection::vec(-50.0f64..50.0, 3),
            gap in 0.0f64..100.0,
            seed in 0u64..50,
        ) {
            let p = random_params(3, 3, seed);
            for k in 0..3 {
                prop_assert!(intensity_k(gap, 0.0, &x, k, &p).unwrap() > 0.0);
            }
        }
    }
}
