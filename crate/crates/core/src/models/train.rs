//! Mini-batch Adam training for both auto-encoders.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ae::AeModel;
use super::loss::ae_loss_grad;
use super::sae::SaeModel;
use crate::error::{Error, Result};
use crate::nn::{adam_step, AdamState, Network, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Cosine weight of the siamese loss; ignored by the AE.
    pub alpha: f64,
    pub seed: u64,
    /// Invoke the checkpoint callback every this many epochs (0 disables).
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn ae_default() -> Self {
        Self {
            epochs: 160,
            learning_rate: 1e-3,
            batch_size: 40,
            alpha: 0.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }

    pub fn sae_default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 1e-3,
            batch_size: 225,
            alpha: 0.005,
            seed: 0,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::arg("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch_size", "must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::arg(
                "learning_rate",
                format!("{} is not a positive number", self.learning_rate),
            ));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::arg(
                "alpha",
                format!("{} is not a non-negative number", self.alpha),
            ));
        }
        Ok(())
    }

    /// Number of mini-batches per epoch; the last one may be partial.
    pub fn batches_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub epochs: Vec<EpochLog>,
}

impl LossCurve {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }

    /// `epoch,mean_loss,wall_time_s`; wall time is written as 0 when
    /// `deterministic` so that reruns are byte-identical.
    pub fn to_csv(&self, deterministic: bool) -> String {
        let mut out = String::from("epoch,mean_loss,wall_time_s\n");
        for e in &self.epochs {
            let wall = if deterministic { 0.0 } else { e.wall_time_s };
            let _ = writeln!(out, "{},{:.9e},{:.3}", e.epoch, e.mean_loss, wall);
        }
        out
    }
}

/// Copies the samples at `idx` into a new batch tensor.
pub fn gather<T: Scalar>(data: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let [_, c, h, w] = data.shape();
    let mut out = Vec::with_capacity(idx.len() * data.sample_len());
    for &i in idx {
        out.extend_from_slice(data.sample(i));
    }
    Tensor::from_vec([idx.len(), c, h, w], out).expect("gathered length matches")
}

fn run_epochs<T, M, F, C>(
    model: &mut M,
    n: usize,
    cfg: &TrainConfig,
    mut loss_and_grads: F,
    mut on_checkpoint: C,
) -> Result<LossCurve>
where
    T: Scalar,
    M: Network<T>,
    F: FnMut(&mut M, &[usize]) -> Result<(T, Vec<Tensor<T>>)>,
    C: FnMut(usize, &M) -> Result<()>,
{
    cfg.validate()?;
    if n == 0 {
        return Err(Error::arg("dataset", "no training samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::<T>::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = LossCurve::default();
    let start = Instant::now();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (loss, grads) = loss_and_grads(model, idx)?;
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            adam_step(&mut model.params_mut(), &grads, &mut adam)?;
            total += loss;
        }
        let mean_loss = total / cfg.batches_per_epoch(n) as f64;
        log::debug!("epoch {epoch}: mean loss {mean_loss:.6e}");
        curve.epochs.push(EpochLog {
            epoch,
            mean_loss,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        if cfg.checkpoint_every > 0 && (epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs) {
            on_checkpoint(epoch, model)?;
        }
    }
    Ok(curve)
}

/// Trains `model` on a stack of slices `[n, c, h, w]` with the L1 loss.
pub fn train_ae<T: Scalar>(
    model: &mut AeModel<T>,
    slices: &Tensor<T>,
    cfg: &TrainConfig,
    on_checkpoint: impl FnMut(usize, &AeModel<T>) -> Result<()>,
) -> Result<LossCurve> {
    if slices.sample_shape() != model.arch.input {
        return Err(Error::shape(
            "ae training slices",
            model.arch.input,
            slices.sample_shape(),
        ));
    }
    run_epochs(
        model,
        slices.batch(),
        cfg,
        |m: &mut AeModel<T>, idx| {
            let x = gather(slices, idx);
            let (y, _, caches) = m.forward(&x)?;
            let (loss, dy) = ae_loss_grad(&x, &y)?;
            Ok((loss, m.backward(&dy, &caches)?))
        },
        on_checkpoint,
    )
}

/// Trains `model` on aligned pair stacks: sample `i` of `left` pairs with
/// sample `i` of `right`.
pub fn train_sae<T: Scalar>(
    model: &mut SaeModel<T>,
    left: &Tensor<T>,
    right: &Tensor<T>,
    cfg: &TrainConfig,
    on_checkpoint: impl FnMut(usize, &SaeModel<T>) -> Result<()>,
) -> Result<LossCurve> {
    if left.shape() != right.shape() {
        return Err(Error::shape(
            "sae training pairs",
            left.shape(),
            right.shape(),
        ));
    }
    let alpha = T::of(cfg.alpha);
    run_epochs(
        model,
        left.batch(),
        cfg,
        |m: &mut SaeModel<T>, idx| {
            let (loss, grads) = m.loss_and_grads(&gather(left, idx), &gather(right, idx), alpha)?;
            Ok((loss.total, grads))
        },
        on_checkpoint,
    )
}
