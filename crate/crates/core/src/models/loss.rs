//! Reconstruction losses for the two auto-encoders.

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;

fn same_shape<T: Scalar>(ctx: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(ctx, a.shape(), b.shape()));
    }
    Ok(())
}

/// Batch mean of the per-sample L1 norm `||x - x_hat||_1`.
pub fn ae_loss<T: Scalar>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<T> {
    same_shape("ae loss", x, x_hat)?;
    let total: T = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(&a, &b)| (a - b).abs())
        .sum();
    Ok(total / T::of(x.batch().max(1) as f64))
}

/// [`ae_loss`] and its gradient with respect to `x_hat` (zero at ties).
pub fn ae_loss_grad<T: Scalar>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    let loss = ae_loss(x, x_hat)?;
    let inv_n = T::one() / T::of(x.batch().max(1) as f64);
    let grad = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(&a, &b)| {
            if b > a {
                inv_n
            } else if b < a {
                -inv_n
            } else {
                T::zero()
            }
        })
        .collect();
    Ok((loss, Tensor::from_vec(x.shape(), grad)?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cosine<T> {
    pub value: T,
    /// Set when either vector has zero norm; `value` is then 0.
    pub degenerate: bool,
}

/// `<a, b> / (||a|| ||b||)`, defined as 0 when either norm vanishes.
pub fn cosine_sim<T: Scalar>(a: &[T], b: &[T]) -> Result<Cosine<T>> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine similarity", a.len(), b.len()));
    }
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na: T = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb: T = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    if na == T::zero() || nb == T::zero() {
        return Ok(Cosine {
            value: T::zero(),
            degenerate: true,
        });
    }
    let v = dot / (na * nb);
    Ok(Cosine {
        value: v.max(-T::one()).min(T::one()),
        degenerate: false,
    })
}

/// Cosine similarity and its gradients with respect to both arguments.
/// Degenerate pairs contribute no gradient.
pub fn cosine_grad<T: Scalar>(a: &[T], b: &[T]) -> Result<(Cosine<T>, Vec<T>, Vec<T>)> {
    let cos = cosine_sim(a, b)?;
    if cos.degenerate {
        return Ok((cos, vec![T::zero(); a.len()], vec![T::zero(); b.len()]));
    }
    let na2: T = a.iter().map(|&x| x * x).sum();
    let nb2: T = b.iter().map(|&x| x * x).sum();
    let inv = T::one() / (na2 * nb2).sqrt();
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let c = dot * inv;
    let ga = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| y * inv - c * x / na2)
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| x * inv - c * y / nb2)
        .collect();
    Ok((cos, ga, gb))
}

#[derive(Clone, Debug)]
pub struct SaeLoss<T> {
    pub total: T,
    /// Batch mean of `mse(x1) + mse(x2)`.
    pub reconstruction: T,
    /// Batch mean cosine similarity of the paired latents.
    pub mean_cosine: T,
    pub degenerate_pairs: usize,
}

#[derive(Clone, Debug)]
pub struct SaeGrads<T> {
    pub x_hat: [Tensor<T>; 2],
    pub z: [Tensor<T>; 2],
}

/// Per pair `mse(x1, x1_hat) + mse(x2, x2_hat) - alpha * cos(z1, z2)`, averaged
/// over the batch. The squared error of each patch is averaged over its elements.
pub fn sae_loss<T: Scalar>(
    x: [&Tensor<T>; 2],
    x_hat: [&Tensor<T>; 2],
    z: [&Tensor<T>; 2],
    alpha: T,
) -> Result<SaeLoss<T>> {
    Ok(sae_loss_grad(x, x_hat, z, alpha)?.0)
}

pub fn sae_loss_grad<T: Scalar>(
    x: [&Tensor<T>; 2],
    x_hat: [&Tensor<T>; 2],
    z: [&Tensor<T>; 2],
    alpha: T,
) -> Result<(SaeLoss<T>, SaeGrads<T>)> {
    for t in 0..2 {
        same_shape("sae reconstruction", x[t], x_hat[t])?;
    }
    same_shape("sae pair", x[0], x[1])?;
    same_shape("sae latents", z[0], z[1])?;
    let batch = x[0].batch();
    if z[0].batch() != batch {
        return Err(Error::shape("sae latent batch", batch, z[0].batch()));
    }
    let bt = T::of(batch.max(1) as f64);
    let elems = T::of(x[0].sample_len() as f64);

    let mut recon = T::zero();
    let mut gx: [Tensor<T>; 2] = [Tensor::zeros(x[0].shape()), Tensor::zeros(x[0].shape())];
    let two = T::of(2.0);
    for t in 0..2 {
        for ((g, &a), &b) in gx[t]
            .data_mut()
            .iter_mut()
            .zip(x[t].data())
            .zip(x_hat[t].data())
        {
            let d = b - a;
            recon += d * d / elems;
            *g = two * d / (elems * bt);
        }
    }

    let mut gz: [Tensor<T>; 2] = [Tensor::zeros(z[0].shape()), Tensor::zeros(z[0].shape())];
    let mut cos_sum = T::zero();
    let mut degenerate = 0;
    for n in 0..batch {
        let (cos, ga, gb) = cosine_grad(z[0].sample(n), z[1].sample(n))?;
        cos_sum += cos.value;
        degenerate += cos.degenerate as usize;
        let scale = -alpha / bt;
        for (dst, g) in gz[0].sample_mut(n).iter_mut().zip(ga) {
            *dst = scale * g;
        }
        for (dst, g) in gz[1].sample_mut(n).iter_mut().zip(gb) {
            *dst = scale * g;
        }
    }
    let reconstruction = recon / bt;
    let mean_cosine = cos_sum / bt;
    Ok((
        SaeLoss {
            total: reconstruction - alpha * mean_cosine,
            reconstruction,
            mean_cosine,
            degenerate_pairs: degenerate,
        },
        SaeGrads { x_hat: gx, z: gz },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: [usize; 4], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, v).unwrap()
    }

    fn rand_t(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        t(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn ae_loss_examples() {
        let x = t([1, 1, 1, 2], vec![1.0, 1.0]);
        assert_eq!(ae_loss(&x, &x).unwrap(), 0.0);
        assert_eq!(ae_loss(&x, &t([1, 1, 1, 2], vec![0.0, 0.0])).unwrap(), 2.0);
        assert!(ae_loss(&x, &t([1, 1, 2, 1], vec![0.0, 0.0])).is_err());
    }

    #[test]
    fn ae_loss_matches_elementwise_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (x, y) = (
            rand_t([3, 2, 4, 5], &mut rng),
            rand_t([3, 2, 4, 5], &mut rng),
        );
        let mut oracle = 0.0;
        for n in 0..3 {
            let mut s = 0.0;
            for i in 0..40 {
                s += (x.sample(n)[i] - y.sample(n)[i]).abs();
            }
            oracle += s;
        }
        oracle /= 3.0;
        assert!((ae_loss(&x, &y).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn cosine_examples() {
        let a = [1.0f64, 2.0, -0.5];
        assert!((cosine_sim(&a, &a).unwrap().value - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 3.0]).unwrap().value, 0.0);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((cosine_sim(&a, &neg).unwrap().value + 1.0).abs() < 1e-15);
        let zero = cosine_sim(&[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!(zero.degenerate && zero.value == 0.0);
        assert!(cosine_sim(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn sae_loss_identities() {
        let x = t([1, 1, 1, 3], vec![0.2, 0.4, 0.6]);
        let z = t([1, 1, 1, 2], vec![0.3, 0.7]);
        let l = sae_loss([&x, &x], [&x, &x], [&z, &z], 0.005).unwrap();
        assert!((l.total + 0.005).abs() < 1e-15);
        let z2 = t([1, 1, 1, 2], vec![-0.7, 0.3]);
        let l = sae_loss([&x, &x], [&x, &x], [&z, &z2], 0.005).unwrap();
        assert!(l.total.abs() < 1e-15);
    }

    #[test]
    fn sae_loss_matches_two_term_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = [2, 2, 3, 3];
        let (x1, x2, h1, h2) = (
            rand_t(s, &mut rng),
            rand_t(s, &mut rng),
            rand_t(s, &mut rng),
            rand_t(s, &mut rng),
        );
        let zs = [2, 4, 1, 1];
        let (z1, z2) = (rand_t(zs, &mut rng), rand_t(zs, &mut rng));
        let alpha = 0.005;
        let l = sae_loss([&x1, &x2], [&h1, &h2], [&z1, &z2], alpha).unwrap();
        let mut oracle = 0.0;
        for n in 0..2 {
            let mse = |a: &[f64], b: &[f64]| {
                a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / a.len() as f64
            };
            let (a, b) = (z1.sample(n), z2.sample(n));
            let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
            let norm = |v: &[f64]| v.iter().map(|p| p * p).sum::<f64>().sqrt();
            oracle += mse(x1.sample(n), h1.sample(n)) + mse(x2.sample(n), h2.sample(n))
                - alpha * dot / (norm(a) * norm(b));
        }
        oracle /= 2.0;
        assert!((l.total - oracle).abs() < 1e-12);
    }

    #[test]
    fn alpha_derivative_is_minus_cosine() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = [1, 2, 2, 2];
        let (x1, x2, h1, h2) = (
            rand_t(s, &mut rng),
            rand_t(s, &mut rng),
            rand_t(s, &mut rng),
            rand_t(s, &mut rng),
        );
        let z1 = t([1, 3, 1, 1], vec![0.5, 0.2, 0.1]);
        let z2 = t([1, 3, 1, 1], vec![0.4, 0.3, 0.05]);
        let f = |a: f64| {
            sae_loss([&x1, &x2], [&h1, &h2], [&z1, &z2], a)
                .unwrap()
                .total
        };
        let h = 1e-4;
        let d = (f(0.005 + h) - f(0.005 - h)) / (2.0 * h);
        let cos = cosine_sim(z1.data(), z2.data()).unwrap().value;
        assert!((d + cos).abs() < 1e-9);
        assert!(cos > 0.0 && f(0.01) < f(0.005));
    }

    #[test]
    fn cosine_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, ga, gb) = cosine_grad(&a, &b).unwrap();
        let h = 1e-6;
        for i in 0..6 {
            let mut ap = a.clone();
            ap[i] += h;
            let mut am = a.clone();
            am[i] -= h;
            let num = (cosine_sim(&ap, &b).unwrap().value - cosine_sim(&am, &b).unwrap().value)
                / (2.0 * h);
            assert!((num - ga[i]).abs() < 1e-8);
            let mut bp = b.clone();
            bp[i] += h;
            let mut bm = b.clone();
            bm[i] -= h;
            let num = (cosine_sim(&a, &bp).unwrap().value - cosine_sim(&a, &bm).unwrap().value)
                / (2.0 * h);
            assert!((num - gb[i]).abs() < 1e-8);
        }
    }
}
