use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rothp::data::{Dataset, EventSequence};
use rothp::encoder::{encode, EncoderConfig, TemporalMode};
use rothp::experiments::{evaluate, future_split, gaussian_noise_experiment, translation_sweep};
use rothp::model::{sequence_loss, ModelParams};
use rothp::numerics::{argmax, softmax_rows, Tensor};
use rothp::simulator::{make_synthetic_dataset, SyntheticRecipe};
use rothp::tpp_head::{composite_loss, IntegratorSpec, LossWeights};
use rothp::trainer::TrainConfig;

fn small(mode: TemporalMode) -> EncoderConfig {
    EncoderConfig {
        num_types: 5,
        d_model: 16,
        num_heads: 2,
        head_dim: 8,
        d_v: 8,
        d_ff: 32,
        num_layers: 2,
        mode,
        time_scale: 1.0,
    }
}

fn synthetic(n: usize, seed: u64) -> Dataset {
    make_synthetic_dataset(n, &SyntheticRecipe::default(), seed).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs())
}

#[test]
fn pooled_report_is_event_weighted() {
    let p = ModelParams::init(&small(TemporalMode::Rotary), 4).unwrap();
    let a = synthetic(3, 1);
    let b = synthetic(4, 2);
    let mut both = a.clone();
    both.ids.extend(b.ids.iter().map(|id| format!("b-{id}")));
    both.sequences.extend(b.sequences.iter().cloned());
    let integ = IntegratorSpec::trapezoid(20);
    let (ra, rb, rab) = (
        evaluate(&p, &a, &integ).unwrap(),
        evaluate(&p, &b, &integ).unwrap(),
        evaluate(&p, &both, &integ).unwrap(),
    );
    let (na, nb) = (ra.counts.predicted_events as f64, rb.counts.predicted_events as f64);
    let w = |x: f64, y: f64| (x * na + y * nb) / (na + nb);
    assert!((rab.ll_per_event - w(ra.ll_per_event, rb.ll_per_event)).abs() < 1e-12);
    assert!((rab.accuracy - w(ra.accuracy, rb.accuracy)).abs() < 1e-12);
    let rmse = w(ra.rmse_gap.powi(2), rb.rmse_gap.powi(2)).sqrt();
    assert!((rab.rmse_gap - rmse).abs() < 1e-12);
    assert_eq!(rab.counts.events, ra.counts.events + rb.counts.events);
}

#[test]
fn perfect_gap_head_has_zero_rmse() {
    // all gaps equal and hidden states layer-normalized with zero gain:
    // the head's bias alone reproduces every gap
    let mut p = ModelParams::init(&small(TemporalMode::Rotary), 1).unwrap();
    p.heads.time_weight = Tensor::zeros(&[1, 16]);
    p.heads.time_bias = Tensor::row_vector(vec![0.75]);
    let times: Vec<f64> = (0..6).map(|i| 2.0 + 0.75 * i as f64).collect();
    let ds = Dataset::new(5, vec![EventSequence::new(times, vec![0, 1, 2, 3, 4, 0]).unwrap()]).unwrap();
    let r = evaluate(&p, &ds, &IntegratorSpec::default()).unwrap();
    assert_eq!(r.rmse_gap, 0.0);
}

#[test]
fn evaluation_is_deterministic_and_argmax_matches_softmax() {
    let p = ModelParams::init(&small(TemporalMode::Absolute), 2).unwrap();
    let ds = synthetic(3, 5);
    let integ = IntegratorSpec::monte_carlo(10, 3);
    assert_eq!(evaluate(&p, &ds, &integ).unwrap(), evaluate(&p, &ds, &integ).unwrap());
    for s in &ds.sequences {
        let h = encode(s, &p.encoder, &p.config).unwrap();
        let logits = h.matmul_nt(&p.heads.type_weight).unwrap();
        let probs = softmax_rows(&logits, None).unwrap();
        for j in 0..s.len() {
            assert_eq!(argmax(logits.row(j)), argmax(probs.row(j)));
        }
    }
}

#[test]
fn rotary_sweep_is_flat_and_absolute_moves() {
    let rot = ModelParams::init(&small(TemporalMode::Rotary), 8).unwrap();
    let abs = ModelParams::init(&small(TemporalMode::Absolute), 8).unwrap();
    let ds = synthetic(4, 9);
    let integ = IntegratorSpec::trapezoid(20);
    let sigmas = [0.0, 0.4, 0.8, 1.0, 2.0, 5.0, 10.0];
    let table = translation_sweep(&[&rot, &abs], &ds, &sigmas, &integ).unwrap();
    let r = table.column(TemporalMode::Rotary);
    let a = table.column(TemporalMode::Absolute);
    assert_eq!(r[0], &evaluate(&rot, &ds, &integ).unwrap());
    for rep in &r {
        assert!(rel(rep.ll_per_event, r[0].ll_per_event) < 1e-9);
    }
    assert!(a.iter().any(|rep| rel(rep.ll_per_event, a[0].ll_per_event) > 1e-6));
}

#[test]
fn future_split_rebase_matters_only_for_absolute() {
    let ds = synthetic(5, 11);
    let on = future_split(&ds, 0.8, true).unwrap();
    let off = future_split(&ds, 0.8, false).unwrap();
    for (s, (a, b)) in ds.sequences.iter().zip(on.train.sequences.iter().zip(&on.test.sequences)) {
        assert_eq!(a.len() + b.len(), s.len());
        assert_eq!(a.len(), ((0.8 * s.len() as f64).floor() as usize).max(2));
    }
    let integ = IntegratorSpec::trapezoid(20);
    let rot = ModelParams::init(&small(TemporalMode::Rotary), 3).unwrap();
    let abs = ModelParams::init(&small(TemporalMode::Absolute), 3).unwrap();
    let (r_on, r_off) = (evaluate(&rot, &on.test, &integ).unwrap(), evaluate(&rot, &off.test, &integ).unwrap());
    assert!(rel(r_on.ll_per_event, r_off.ll_per_event) < 1e-9);
    assert_eq!(r_on.accuracy, r_off.accuracy);
    let (a_on, a_off) = (evaluate(&abs, &on.test, &integ).unwrap(), evaluate(&abs, &off.test, &integ).unwrap());
    assert!(rel(a_on.ll_per_event, a_off.ll_per_event) > 1e-6);
}

#[test]
fn zero_noise_has_zero_degradation() {
    let train = synthetic(3, 21);
    let test = synthetic(2, 22);
    let config = TrainConfig {
        epochs: 1,
        encoder: small(TemporalMode::Rotary),
        ..TrainConfig::default()
    };
    let row = gaussian_noise_experiment(&train, &test, 0.0, &config, &[TemporalMode::Rotary, TemporalMode::Absolute], 1).unwrap();
    assert_eq!(row.reordered_sequences, 0);
    for o in &row.outcomes {
        assert_eq!(o.ll_degradation.to_bits(), 0.0f64.to_bits());
        assert_eq!(o.accuracy_degradation, 0.0);
        assert_eq!(o.rmse_degradation, 0.0);
    }
}

#[test]
fn absolute_composite_loss_changes_under_shift() {
    let p = ModelParams::init(&small(TemporalMode::Absolute), 31).unwrap();
    let s = synthetic(1, 32).sequences.remove(0);
    let integ = IntegratorSpec::trapezoid(20);
    let w = LossWeights::default();
    let base = sequence_loss(&s, &p, &integ, 0, w).unwrap().total;
    let moved = sequence_loss(&s.translated(5.0), &p, &integ, 0, w).unwrap().total;
    assert!(rel(base, moved) > 1e-6);
}

fn random_sequence(rng: &mut ChaCha8Rng, k: usize) -> EventSequence {
    let n = rng.gen_range(2..30);
    let mut t = rng.gen_range(0.0..50.0);
    let mut times = Vec::with_capacity(n);
    for _ in 0..n {
        t += rng.gen_range(0.05..3.0);
        times.push(t);
    }
    EventSequence::new(times, (0..n).map(|_| rng.gen_range(0..k)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rotary_composite_loss_is_translation_invariant(
        seed in 0u64..1000,
        sigma in prop_oneof![Just(0.4), Just(1.0), Just(2.0), Just(5.0), Just(10.0)],
    ) {
        let p = ModelParams::init(&small(TemporalMode::Rotary), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_sequence(&mut rng, 5);
        let integ = IntegratorSpec::trapezoid(20);
        let w = LossWeights::default();
        let h = encode(&s, &p.encoder, &p.config).unwrap();
        let base = composite_loss(&s, &h, &p.intensity, &p.heads, &integ, 0, w).unwrap();
        let shifted = s.translated(sigma);
        let hs = encode(&shifted, &p.encoder, &p.config).unwrap();
        let moved = composite_loss(&shifted, &hs, &p.intensity, &p.heads, &integ, 0, w).unwrap();
        prop_assert!(rel(base, moved) < 1e-9, "{} vs {}", base, moved);

        let mc = IntegratorSpec::monte_carlo(10, seed);
        let a = sequence_loss(&s, &p, &mc, 7, w).unwrap().total;
        let b = sequence_loss(&shifted, &p, &mc, 7, w).unwrap().total;
        prop_assert!(rel(a, b) < 1e-9);
    }

    #[test]
    fn intensities_stay_positive_and_likelihood_finite(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mode = if seed % 2 == 0 { TemporalMode::Rotary } else { TemporalMode::Absolute };
        let p = ModelParams::init(&small(mode), seed).unwrap();
        let s = random_sequence(&mut rng, 5);
        let l = sequence_loss(&s, &p, &IntegratorSpec::default(), 0, LossWeights::default()).unwrap();
        prop_assert!(l.log_likelihood.is_finite());
        prop_assert!(l.event >= 0.0 && l.time >= 0.0);
    }
}
