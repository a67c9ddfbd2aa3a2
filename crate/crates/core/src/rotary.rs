//! Rotary temporal position embedding.
//!
//! A head vector is split into consecutive pairs and pair `j` is rotated by
//! the angle `t * theta_j`, where `t` is the raw event timestamp. Because
//! the rotations are orthogonal and compose additively, the dot product of
//! a rotated query at `t_i` and a rotated key at `t_j` depends on the
//! timestamps only through `t_j - t_i`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, Tensor};

/// Base of the geometric frequency ladder.
pub const ROTARY_BASE: f64 = 10000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotaryTable {
    head_dim: usize,
    thetas: Vec<f64>,
}

impl RotaryTable {
    /// `thetas[j] = 10000^(-2j/d)` for `j = 0..d/2` (zero-based).
    pub fn build_theta(head_dim: usize) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(Error::Dimension(format!(
                "rotary head dimension must be even and >= 2, got {head_dim}"
            )));
        }
        let thetas = (0..head_dim / 2)
            .map(|j| ROTARY_BASE.powf(-2.0 * j as f64 / head_dim as f64))
            .collect();
        Ok(Self { head_dim, thetas })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }

    /// Cosines and sines of `t_i * theta_j`, each `n x d/2`.
    pub fn angles(&self, times: &[f64]) -> (Tensor, Tensor) {
        let half = self.thetas.len();
        let mut cos = Vec::with_capacity(times.len() * half);
        let mut sin = Vec::with_capacity(times.len() * half);
        for &t in times {
            for &theta in &self.thetas {
                let (s, c) = (t * theta).sin_cos();
                cos.push(c);
                sin.push(s);
            }
        }
        let shape = vec![times.len(), half];
        (
            Tensor::new(shape.clone(), cos).expect("angle table shape"),
            Tensor::new(shape, sin).expect("angle table shape"),
        )
    }

    /// `R_t x`: pair `j` maps to `[cos·x1 + sin·x2, -sin·x1 + cos·x2]`.
    pub fn rotate(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        if x.len() != self.head_dim {
            return Err(Error::Dimension(format!(
                "rotate expects length {}, got {}",
                self.head_dim,
                x.len()
            )));
        }
        let mut out = vec![0.0; x.len()];
        for (j, &theta) in self.thetas.iter().enumerate() {
            let (s, c) = (t * theta).sin_cos();
            let (x1, x2) = (x[2 * j], x[2 * j + 1]);
            out[2 * j] = c * x1 + s * x2;
            out[2 * j + 1] = -s * x1 + c * x2;
        }
        Ok(out)
    }

    /// `rotate(q, t_i) · rotate(k, t_j)`, equal to `q · rotate(k, t_j - t_i)`.
    pub fn relative_score(&self, q: &[f64], k: &[f64], t_i: f64, t_j: f64) -> Result<f64> {
        if q.len() != k.len() {
            return Err(Error::Dimension(format!(
                "query length {} differs from key length {}",
                q.len(),
                k.len()
            )));
        }
        Ok(dot(&self.rotate(q, t_i)?, &self.rotate(k, t_j)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn norm(v: &[f64]) -> f64 {
        dot(v, v).sqrt()
    }

    #[test]
    fn frequency_ladder() {
        assert_eq!(RotaryTable::build_theta(2).unwrap().thetas(), &[1.0]);
        let t4 = RotaryTable::build_theta(4).unwrap();
        assert_eq!(t4.thetas()[0], 1.0);
        assert!((t4.thetas()[1] - 0.01).abs() < 1e-15);
        let t8 = RotaryTable::build_theta(8).unwrap();
        assert!(t8.thetas().windows(2).all(|w| w[1] < w[0]));
        assert!((t8.thetas()[3] - 10000f64.powf(-0.75)).abs() < 1e-15);
    }

    #[test]
    fn rejects_odd_or_zero_dimension() {
        assert!(RotaryTable::build_theta(0).is_err());
        assert!(RotaryTable::build_theta(5).is_err());
    }

    #[test]
    fn zero_time_is_identity() {
        let table = RotaryTable::build_theta(6).unwrap();
        let x = [0.3, -1.0, 2.0, 0.5, -0.7, 4.0];
        assert_eq!(table.rotate(&x, 0.0).unwrap(), x.to_vec());
    }

    #[test]
    fn quarter_turn() {
        let table = RotaryTable::build_theta(2).unwrap();
        let y = table.rotate(&[1.0, 0.0], PI / 2.0).unwrap();
        assert!(y[0].abs() < 1e-12);
        assert!((y[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let table = RotaryTable::build_theta(4).unwrap();
        assert!(table.rotate(&[1.0, 2.0], 1.0).is_err());
        assert!(table.relative_score(&[1.0; 4], &[1.0; 2], 0.0, 1.0).is_err());
    }

    #[test]
    fn equal_times_give_plain_dot() {
        let table = RotaryTable::build_theta(4).unwrap();
        let (q, k) = ([0.2, 1.1, -0.4, 0.9], [1.5, -0.3, 0.8, 0.1]);
        let s = table.relative_score(&q, &k, 7.3, 7.3).unwrap();
        assert!((s - dot(&q, &k)).abs() < 1e-12);
    }

    #[test]
    fn two_dimensional_score_is_cosine_of_gap() {
        let table = RotaryTable::build_theta(2).unwrap();
        for &delta in &[0.0, 0.5, 1.7, -2.4, 9.0] {
            let s = table.relative_score(&[1.0, 0.0], &[1.0, 0.0], 1.25, 1.25 + delta).unwrap();
            assert!((s - delta.cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn shifted_pair_scores_agree() {
        let table = RotaryTable::build_theta(8).unwrap();
        let q = [0.3, -0.8, 1.2, 0.05, -1.7, 0.4, 0.9, -0.2];
        let k = [-0.6, 0.2, 0.7, 1.3, 0.1, -0.9, 0.4, 0.8];
        let a = table.relative_score(&q, &k, 3.7, 5.2).unwrap();
        let b = table.relative_score(&q, &k, 103.7, 105.2).unwrap();
        assert!((a - b).abs() / a.abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn preserves_norm(x in proptest::collection::vec(-5.0f64..5.0, 8), t in -1e4f64..1e4) {
            let table = RotaryTable::build_theta(8).unwrap();
            let y = table.rotate(&x, t).unwrap();
            prop_assert!((norm(&y) - norm(&x)).abs() < 1e-12);
        }

        #[test]
        fn rotations_compose(x in proptest::collection::vec(-5.0f64..5.0, 6), t in -100.0f64..100.0, s in -100.0f64..100.0) {
            let table = RotaryTable::build_theta(6).unwrap();
            let two_step = table.rotate(&table.rotate(&x, t).unwrap(), s).unwrap();
            let one_step = table.rotate(&x, t + s).unwrap();
            for (a, b) in two_step.iter().zip(&one_step) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }

        #[test]
        fn score_depends_on_gap_only(
            q in proptest::collection::vec(-2.0f64..2.0, 8),
            k in proptest::collection::vec(-2.0f64..2.0, 8),
            ti in 0.0f64..1e4,
            tj in 0.0f64..1e4,
            sigma in 0.0f64..10.0,
        ) {
            let table = RotaryTable::build_theta(8).unwrap();
            let direct = table.relative_score(&q, &k, ti, tj).unwrap();
            let relative = dot(&q, &table.rotate(&k, tj - ti).unwrap());
            let shifted = table.relative_score(&q, &k, ti + sigma, tj + sigma).unwrap();
            let scale = direct.abs().max(1.0);
            prop_assert!((direct - relative).abs() / scale < 1e-10);
            prop_assert!((direct - shifted).abs() / scale < 1e-9);
        }
    }
}
