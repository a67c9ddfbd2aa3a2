//! Evaluation metrics and the translation, timestamp-noise and
//! future-prediction experiments.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EventSequence};
use crate::encoder::TemporalMode;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::argmax;
use crate::tpp_head::{gap_predictions, log_likelihood, type_logits, IntegratorSpec};
use crate::trainer::{train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub sequences: usize,
    pub events: usize,
    pub predicted_events: usize,
}

/// Metrics over every prediction position `j = 1..n-1` of every sequence.
/// Times are in model units, i.e. after the configured time scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Total log-likelihood divided by the number of predicted events.
    pub ll_per_event: f64,
    pub accuracy: f64,
    /// Root mean squared error of the predicted next gap.
    pub rmse_gap: f64,
    pub counts: Counts,
}

pub fn evaluate(params: &ModelParams, dataset: &Dataset, integ: &IntegratorSpec) -> Result<EvalReport> {
    dataset.require_predictable()?;
    if dataset.num_types() != params.num_types() {
        return Err(Error::Data(format!(
            "dataset has {} event types, model expects {}",
            dataset.num_types(),
            params.num_types()
        )));
    }
    let (mut ll, mut correct, mut sq, mut predicted) = (0.0, 0usize, 0.0, 0usize);
    for (i, raw) in dataset.sequences.iter().enumerate() {
        let seq = params.prepare(raw);
        let h = params.hidden(&seq)?;
        ll += log_likelihood(&seq, &h, &params.intensity, integ, i as u64)?;
        let logits = type_logits(&h, &params.heads)?;
        let gaps = gap_predictions(&h, &params.heads)?;
        for (j, gap) in seq.gaps().into_iter().enumerate() {
            if argmax(logits.row(j)) == seq.marks()[j + 1] {
                correct += 1;
            }
            let r = gap - gaps.data()[j];
            sq += r * r;
        }
        predicted += seq.len() - 1;
    }
    let n = predicted as f64;
    Ok(EvalReport {
        ll_per_event: ll / n,
        accuracy: correct as f64 / n,
        rmse_gap: (sq / n).sqrt(),
        counts: Counts {
            sequences: dataset.len(),
            events: dataset.total_events(),
            predicted_events: predicted,
        },
    })
}

/// One row of a sweep: the swept value and one report per model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub reports: Vec<(TemporalMode, EvalReport)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    /// Name of the swept quantity, used as the first CSV column.
    pub parameter: String,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Header plus one row per swept value; every number has 9 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = vec![self.parameter.clone()];
        if let Some(first) = self.rows.first() {
            for (mode, _) in &first.reports {
                for metric in ["ll_per_event", "accuracy", "rmse_gap"] {
                    header.push(format!("{}_{metric}", mode.name()));
                }
            }
        }
        writeln!(w, "{}", header.join(","))?;
        for row in &self.rows {
            let mut cells = vec![format!("{:.8e}", row.value)];
            for (_, r) in &row.reports {
                cells.push(format!("{:.8e}", r.ll_per_event));
                cells.push(format!("{:.8e}", r.accuracy));
                cells.push(format!("{:.8e}", r.rmse_gap));
            }
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }

    /// The reports of one mode, in row order.
    pub fn column(&self, mode: TemporalMode) -> Vec<&EvalReport> {
        self.rows
            .iter()
            .filter_map(|r| r.reports.iter().find(|(m, _)| *m == mode).map(|(_, rep)| rep))
            .collect()
    }
}

fn check_sweep_values(values: &[f64], what: &str) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Parameter(format!("no {what} values given")));
    }
    if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Parameter(format!("{what} values must be finite and >= 0")));
    }
    if values.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Parameter(format!("{what} values must be strictly increasing")));
    }
    Ok(())
}

/// Evaluates frozen models on copies of `dataset` with every timestamp shifted by σ.
pub fn translation_sweep(
    models: &[&ModelParams],
    dataset: &Dataset,
    sigmas: &[f64],
    integ: &IntegratorSpec,
) -> Result<SweepTable> {
    check_sweep_values(sigmas, "sigma")?;
    let mut rows = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        let shifted = if sigma == 0.0 {
            dataset.clone()
        } else {
            dataset.translated(sigma)
        };
        let reports = models
            .iter()
            .map(|m| Ok((m.config.mode, evaluate(m, &shifted, integ)?)))
            .collect::<Result<_>>()?;
        rows.push(SweepRow { value: sigma, reports });
    }
    Ok(SweepTable {
        parameter: "sigma".into(),
        rows,
    })
}

/// Dataset with every timestamp perturbed by independent `N(0, epsilon)`
/// noise, where `epsilon` is the variance. Sequences whose order changes are
/// re-sorted (marks follow their timestamps); their number is returned.
pub fn perturb_timestamps(dataset: &Dataset, epsilon: f64, seed: u64) -> Result<(Dataset, usize)> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::Parameter(format!("noise variance must be >= 0, got {epsilon}")));
    }
    if epsilon == 0.0 {
        return Ok((dataset.clone(), 0));
    }
    let normal = Normal::new(0.0, epsilon.sqrt())
        .map_err(|e| Error::Parameter(format!("noise distribution: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reordered = 0;
    let mut sequences = Vec::with_capacity(dataset.len());
    for (id, s) in dataset.ids.iter().zip(&dataset.sequences) {
        let mut events: Vec<(f64, usize)> = s
            .times()
            .iter()
            .zip(s.marks())
            .map(|(&t, &k)| (t + normal.sample(&mut rng), k))
            .collect();
        if events.windows(2).any(|w| w[1].0 <= w[0].0) {
            reordered += 1;
            events.sort_by(|a, b| a.0.total_cmp(&b.0));
        }
        let (times, marks) = events.into_iter().unzip();
        let seq = EventSequence::new(times, marks)
            .map_err(|e| Error::Data(format!("perturbed sequence {id}: {e}")))?;
        sequences.push(seq);
    }
    let mut out = Dataset::with_ids(dataset.num_types(), dataset.ids.clone(), sequences)?;
    out.meta = dataset.meta.clone();
    Ok((out, reordered))
}

/// Clean and noise-trained results of one mode at one noise level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseOutcome {
    pub mode: TemporalMode,
    pub clean: EvalReport,
    pub noisy: EvalReport,
    pub ll_degradation: f64,
    pub accuracy_degradation: f64,
    pub rmse_degradation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseRow {
    /// Noise variance.
    pub epsilon: f64,
    pub reordered_sequences: usize,
    pub outcomes: Vec<NoiseOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseTable {
    /// Always `"variance"`: noise is drawn with standard deviation `sqrt(epsilon)`.
    pub epsilon_convention: String,
    pub rows: Vec<NoiseRow>,
}

impl NoiseTable {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = vec!["epsilon".to_string(), "reordered_sequences".to_string()];
        if let Some(first) = self.rows.first() {
            for o in &first.outcomes {
                for metric in [
                    "clean_ll_per_event",
                    "noisy_ll_per_event",
                    "ll_degradation",
                    "accuracy_degradation",
                    "rmse_degradation",
                ] {
                    header.push(format!("{}_{metric}", o.mode.name()));
                }
            }
        }
        writeln!(w, "{}", header.join(","))?;
        for row in &self.rows {
            let mut cells = vec![format!("{:.8e}", row.epsilon), row.reordered_sequences.to_string()];
            for o in &row.outcomes {
                for v in [
                    o.clean.ll_per_event,
                    o.noisy.ll_per_event,
                    o.ll_degradation,
                    o.accuracy_degradation,
                    o.rmse_degradation,
                ] {
                    cells.push(format!("{v:.8e}"));
                }
            }
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

fn with_mode(config: &TrainConfig, mode: TemporalMode) -> TrainConfig {
    let mut c = config.clone();
    c.encoder.mode = mode;
    c
}

/// For every mode, trains once on clean data and once per noise level on
/// perturbed data (same config and seed), then evaluates all models on the
/// clean test set.
pub fn noise_sweep(
    train_set: &Dataset,
    test_set: &Dataset,
    epsilons: &[f64],
    config: &TrainConfig,
    modes: &[TemporalMode],
    noise_seed: u64,
) -> Result<NoiseTable> {
    check_sweep_values(epsilons, "epsilon")?;
    let mut clean = Vec::with_capacity(modes.len());
    for &mode in modes {
        let (params, _) = train(train_set, &with_mode(config, mode))?;
        clean.push(evaluate(&params, test_set, &config.integrator)?);
    }
    let mut rows = Vec::with_capacity(epsilons.len());
    for &epsilon in epsilons {
        let (noisy_set, reordered) = perturb_timestamps(train_set, epsilon, noise_seed)?;
        let mut outcomes = Vec::with_capacity(modes.len());
        for (&mode, clean_report) in modes.iter().zip(&clean) {
            let (params, _) = train(&noisy_set, &with_mode(config, mode))?;
            let noisy = evaluate(&params, test_set, &config.integrator)?;
            outcomes.push(NoiseOutcome {
                mode,
                ll_degradation: (clean_report.ll_per_event - noisy.ll_per_event).abs(),
                accuracy_degradation: (clean_report.accuracy - noisy.accuracy).abs(),
                rmse_degradation: (clean_report.rmse_gap - noisy.rmse_gap).abs(),
                clean: clean_report.clone(),
                noisy,
            });
        }
        rows.push(NoiseRow {
            epsilon,
            reordered_sequences: reordered,
            outcomes,
        });
    }
    Ok(NoiseTable {
        epsilon_convention: "variance".into(),
        rows,
    })
}

/// Single noise level version of [`noise_sweep`].
pub fn gaussian_noise_experiment(
    train_set: &Dataset,
    test_set: &Dataset,
    epsilon: f64,
    config: &TrainConfig,
    modes: &[TemporalMode],
    noise_seed: u64,
) -> Result<NoiseRow> {
    let mut table = noise_sweep(train_set, test_set, &[epsilon], config, modes, noise_seed)?;
    Ok(table.rows.remove(0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FutureSplit {
    pub train: Dataset,
    pub test: Dataset,
    /// Sequences too short for both parts to keep 2 events.
    pub skipped: usize,
}

/// Splits every sequence at `m = max(2, floor(ratio * n))`: the first `m`
/// events go to `train`, the rest to `test`. With `rebase`, each part is
/// shifted so its first event sits at time 0.
pub fn future_split(dataset: &Dataset, ratio: f64, rebase: bool) -> Result<FutureSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Parameter(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let (mut train_ids, mut train_seqs) = (Vec::new(), Vec::new());
    let (mut test_ids, mut test_seqs) = (Vec::new(), Vec::new());
    let mut skipped = 0;
    let rebased = |s: EventSequence| {
        if rebase {
            let first = s.times()[0];
            s.translated(-first)
        } else {
            s
        }
    };
    for (id, s) in dataset.ids.iter().zip(&dataset.sequences) {
        let n = s.len();
        let m = ((ratio * n as f64).floor() as usize).max(2);
        if m + 2 > n {
            skipped += 1;
            continue;
        }
        train_ids.push(id.clone());
        train_seqs.push(rebased(s.slice(0, m)?));
        test_ids.push(id.clone());
        test_seqs.push(rebased(s.slice(m, n)?));
    }
    let mut train = Dataset::with_ids(dataset.num_types(), train_ids, train_seqs)?;
    let mut test = Dataset::with_ids(dataset.num_types(), test_ids, test_seqs)?;
    train.meta = dataset.meta.clone();
    test.meta = dataset.meta.clone();
    Ok(FutureSplit { train, test, skipped })
}

/// Trains each mode on the prefixes and evaluates on the suffixes.
pub fn future_split_experiment(
    dataset: &Dataset,
    ratio: f64,
    rebase: bool,
    config: &TrainConfig,
    modes: &[TemporalMode],
) -> Result<(Vec<(TemporalMode, EvalReport)>, usize)> {
    let split = future_split(dataset, ratio, rebase)?;
    if split.train.is_empty() {
        return Err(Error::Data("no sequence is long enough to split".into()));
    }
    let mut out = Vec::with_capacity(modes.len());
    for &mode in modes {
        let (params, _) = train(&split.train, &with_mode(config, mode))?;
        out.push((mode, evaluate(&params, &split.test, &config.integrator)?));
    }
    Ok((out, split.skipped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn seq(times: &[f64], marks: &[usize]) -> EventSequence {
        EventSequence::new(times.to_vec(), marks.to_vec()).unwrap()
    }

    fn tiny(mode: TemporalMode, k: usize) -> EncoderConfig {
        EncoderConfig {
            num_types: k,
            d_model: 8,
            num_heads: 2,
            head_dim: 4,
            d_v: 4,
            d_ff: 16,
            num_layers: 1,
            mode,
            time_scale: 1.0,
        }
    }

    #[test]
    fn split_arithmetic() {
        let times: Vec<f64> = (0..10).map(|i| 3.0 + i as f64).collect();
        let ds = Dataset::new(1, vec![seq(&times, &[0; 10]), seq(&[1.0, 2.0, 3.0], &[0; 3])]).unwrap();
        let split = future_split(&ds, 0.8, false).unwrap();
        assert_eq!(split.skipped, 1);
        assert_eq!(split.train.sequences[0].len(), 8);
        assert_eq!(split.test.sequences[0].len(), 2);
        assert_eq!(split.test.sequences[0].times(), &[11.0, 12.0]);
        let rebased = future_split(&ds, 0.8, true).unwrap();
        assert_eq!(rebased.test.sequences[0].times(), &[0.0, 1.0]);
        assert_eq!(rebased.train.sequences[0].times()[0], 0.0);
        assert!(future_split(&ds, 1.0, false).is_err());
    }

    #[test]
    fn single_type_accuracy_is_one() {
        let p = ModelParams::init(&tiny(TemporalMode::Rotary, 1), 3).unwrap();
        let ds = Dataset::new(1, vec![seq(&[0.0, 0.4, 1.9, 2.0], &[0; 4])]).unwrap();
        let r = evaluate(&p, &ds, &IntegratorSpec::default()).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.counts, Counts { sequences: 1, events: 4, predicted_events: 3 });
        assert!(r.rmse_gap >= 0.0);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let p = ModelParams::init(&tiny(TemporalMode::Rotary, 2), 3).unwrap();
        let ds = Dataset::new(2, vec![]).unwrap();
        assert!(matches!(evaluate(&p, &ds, &IntegratorSpec::default()), Err(Error::Data(_))));
    }

    #[test]
    fn sweep_values_must_increase() {
        let p = ModelParams::init(&tiny(TemporalMode::Rotary, 2), 3).unwrap();
        let ds = Dataset::new(2, vec![seq(&[0.0, 1.0], &[0, 1])]).unwrap();
        let integ = IntegratorSpec::default();
        assert!(translation_sweep(&[&p], &ds, &[0.0, 2.0, 1.0], &integ).is_err());
        assert!(translation_sweep(&[&p], &ds, &[-1.0], &integ).is_err());
        let table = translation_sweep(&[&p], &ds, &[0.0], &integ).unwrap();
        assert_eq!(table.rows[0].reports[0].1, evaluate(&p, &ds, &integ).unwrap());
    }

    #[test]
    fn zero_noise_is_identity() {
        let ds = Dataset::new(2, vec![seq(&[0.0, 1.0, 1.5], &[0, 1, 1])]).unwrap();
        let (out, reordered) = perturb_timestamps(&ds, 0.0, 1).unwrap();
        assert_eq!(out, ds);
        assert_eq!(reordered, 0);
    }

    #[test]
    fn noise_is_seeded_and_reordering_is_counted() {
        let ds = Dataset::new(2, vec![seq(&[0.0, 1.0, 1.5, 1.501], &[0, 1, 1, 0])]).unwrap();
        let (a, _) = perturb_timestamps(&ds, 0.01, 1).unwrap();
        let (b, _) = perturb_timestamps(&ds, 0.01, 1).unwrap();
        let (c, _) = perturb_timestamps(&ds, 0.01, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let crowded = Dataset::new(
            1,
            vec![seq(&(0..50).map(|i| i as f64 * 1e-3).collect::<Vec<_>>(), &[0; 50])],
        )
        .unwrap();
        let (out, reordered) = perturb_timestamps(&crowded, 0.01, 5).unwrap();
        assert_eq!(reordered, 1);
        assert!(out.sequences[0].times().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn sweep_csv_layout() {
        let p = ModelParams::init(&tiny(TemporalMode::Rotary, 2), 3).unwrap();
        let q = ModelParams::init(&tiny(TemporalMode::Absolute, 2), 3).unwrap();
        let ds = Dataset::new(2, vec![seq(&[0.0, 1.0, 1.7], &[0, 1, 0])]).unwrap();
        let table = translation_sweep(&[&p, &q], &ds, &[0.0, 1.0, 5.0], &IntegratorSpec::default()).unwrap();
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(
            lines[0],
            "sigma,rotary_ll_per_event,rotary_accuracy,rotary_rmse_gap,absolute_ll_per_event,absolute_accuracy,absolute_rmse_gap"
        );
        assert!(lines[1..].iter().all(|l| l.split(',').count() == 7));
        assert!(lines[3].starts_with("5.00000000e0,"));
    }
}
