//! Central finite-difference check of analytic parameter gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::sequential::Grads;
use super::Network;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Entries probed per parameter tensor (all entries when the tensor is smaller).
    pub samples_per_tensor: usize,
    /// Denominator floor for the elementwise relative error, multiplied by
    /// `1 + |loss|` so that roundoff in the loss difference stays below it.
    pub floor: f64,
    /// When the one-sided slopes at an entry disagree by more than this
    /// fraction of the gradient scale, the loss bends on the scale of the step
    /// (a ReLU/L1 kink, or batch norm over very few values) and the estimate
    /// is recomputed at up to `max_refinements` steps, each ten times smaller,
    /// keeping the most stable one.
    pub kink_tolerance: f64,
    pub max_refinements: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            samples_per_tensor: 12,
            floor: 1e-6,
            kink_tolerance: 1e-5,
            max_refinements: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_abs_error: f64,
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, floor * (1 + |loss|))`
    pub max_rel_error: f64,
    /// Entries evaluated at reduced steps.
    pub refined: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub loss: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn max_abs_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_abs_error)
            .fold(0.0, f64::max)
    }

    pub fn refined(&self) -> usize {
        self.tensors.iter().map(|t| t.refined).sum()
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() <= tolerance
    }
}

/// Compares the gradients returned by `objective` with central differences of
/// `loss`, which must compute the same training-mode loss without gradients.
pub fn grad_check<M, F, L>(
    model: &M,
    objective: F,
    mut loss: L,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    M: Network<f64> + Clone,
    F: FnOnce(&mut M) -> Result<(f64, Grads<f64>)>,
    L: FnMut(&mut M) -> Result<f64>,
{
    let mut work = model.clone();
    let (base, analytic) = objective(&mut work)?;
    let names = model.param_names();
    let shapes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    if analytic.len() != shapes.len() {
        return Err(Error::shape("gradient list", shapes.len(), analytic.len()));
    }
    let floor = opts.floor * (1.0 + base.abs());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut tensors = Vec::with_capacity(shapes.len());
    // Train-mode losses do not depend on batch-norm running statistics, so
    // one probe copy can be reused with the parameter restored after each use.
    let mut probe = model.clone();
    for (ti, &len) in shapes.iter().enumerate() {
        let picks: Vec<usize> = if len <= opts.samples_per_tensor {
            (0..len).collect()
        } else {
            let mut v = sample(&mut rng, len, opts.samples_per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        let (mut max_abs, mut max_rel, mut refined) = (0.0f64, 0.0f64, 0usize);
        for &idx in &picks {
            let orig = model.params()[ti].data()[idx];
            let mut eval = |value: f64| -> Result<f64> {
                probe.params_mut()[ti].data_mut()[idx] = value;
                let out = loss(&mut probe);
                probe.params_mut()[ti].data_mut()[idx] = orig;
                out
            };
            let a = analytic[ti].data()[idx];
            let mut central = |step: f64| -> Result<(f64, f64)> {
                let plus = eval(orig + step)?;
                let minus = eval(orig - step)?;
                Ok((
                    (plus - minus) / (2.0 * step),
                    (plus - 2.0 * base + minus).abs() / step,
                ))
            };
            let (mut numeric, slope_gap) = central(opts.step)?;
            let scale = a.abs().max(numeric.abs()).max(floor);
            if slope_gap > opts.kink_tolerance * scale && opts.max_refinements > 0 {
                // Take the estimate on the plateau between truncation error
                // (large steps) and roundoff (small steps).
                let mut estimates = vec![numeric];
                let mut step = opts.step;
                for _ in 0..opts.max_refinements {
                    step /= 10.0;
                    estimates.push(central(step)?.0);
                }
                let spread = |i: usize| {
                    let prev = (estimates[i] - estimates[i - 1]).abs();
                    let next = estimates
                        .get(i + 1)
                        .map_or(f64::INFINITY, |e| (estimates[i] - e).abs());
                    prev.min(next)
                };
                let best = (1..estimates.len())
                    .min_by(|&i, &j| spread(i).total_cmp(&spread(j)))
                    .expect("at least one refinement");
                numeric = estimates[best];
                refined += 1;
            }
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(floor);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
        }
        tensors.push(TensorCheck {
            name: names[ti].clone(),
            checked: picks.len(),
            max_abs_error: max_abs,
            max_rel_error: max_rel,
            refined,
        });
    }
    Ok(GradCheckReport {
        loss: base,
        tensors,
    })
}
