use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// A parameter container that can be viewed as one flat coordinate vector.
pub trait ParamVector: Clone {
    fn to_flat(&self) -> Vec<f64>;
    fn set_flat(&mut self, flat: &[f64]);
    fn coordinate_name(&self, index: usize) -> String;
}

impl ParamVector for Vec<f64> {
    fn to_flat(&self) -> Vec<f64> {
        self.clone()
    }

    fn set_flat(&mut self, flat: &[f64]) {
        self.copy_from_slice(flat);
    }

    fn coordinate_name(&self, index: usize) -> String {
        format!("[{index}]")
    }
}

/// Which coordinates a gradient check probes.
#[derive(Debug, Clone)]
pub enum CoordinateSample {
    All,
    /// `count` distinct coordinates drawn without replacement.
    Random { count: usize, seed: u64 },
    /// Every `n`-th coordinate, starting at 0.
    Stride(usize),
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientReport {
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub num_checked: usize,
}

/// Compares an analytic gradient against central differences
/// `(f(p + eps) - f(p - eps)) / 2 eps` on the sampled coordinates.
///
/// `objective` returns the loss and its flat analytic gradient. The relative
/// error per coordinate is `|a - n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<P, F>(
    objective: F,
    params: &P,
    epsilon: f64,
    sample_spec: &CoordinateSample,
) -> Result<GradientReport>
where
    P: ParamVector,
    F: Fn(&P) -> Result<(f64, Vec<f64>)>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Parameter(format!(
            "finite-difference step {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    let (loss, analytic) = objective(params)?;
    if !loss.is_finite() {
        return Err(Error::Instability {
            coordinate: "<base point>".into(),
        });
    }
    let base = params.to_flat();
    if analytic.len() != base.len() {
        return Err(Error::Dimension(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            base.len()
        )));
    }

    let coords: Vec<usize> = match *sample_spec {
        CoordinateSample::All => (0..base.len()).collect(),
        CoordinateSample::Stride(n) => (0..base.len()).step_by(n.max(1)).collect(),
        CoordinateSample::Random { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v = sample(&mut rng, base.len(), count.min(base.len())).into_vec();
            v.sort_unstable();
            v
        }
    };

    let mut probe = params.clone();
    let mut flat = base.clone();
    let mut worst = (0.0, String::new());
    for &c in &coords {
        flat[c] = base[c] + epsilon;
        probe.set_flat(&flat);
        let up = objective(&probe)?.0;
        flat[c] = base[c] - epsilon;
        probe.set_flat(&flat);
        let down = objective(&probe)?.0;
        flat[c] = base[c];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Instability {
                coordinate: params.coordinate_name(c),
            });
        }
        let numeric = (up - down) / (2.0 * epsilon);
        let a = analytic[c];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        if rel > worst.0 || worst.1.is_empty() {
            worst = (rel, params.coordinate_name(c));
        }
    }

    Ok(GradientReport {
        max_relative_error: worst.0,
        worst_parameter: worst.1,
        num_checked: coords.len(),
    })
}
