use super::layer::{Cache, Layer, LayerSpec, Mode};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Parameter gradients, aligned with the owning network's `params()` order.
pub type Grads<T> = Vec<Tensor<T>>;

/// Adds `src` into `dst` elementwise, or initializes `dst` when it is empty.
pub fn accumulate<T: Scalar>(dst: &mut Grads<T>, src: Grads<T>) -> Result<()> {
    if dst.is_empty() {
        *dst = src;
        return Ok(());
    }
    if dst.len() != src.len() {
        return Err(Error::shape("gradient list", dst.len(), src.len()));
    }
    for (d, s) in dst.iter_mut().zip(&src) {
        d.add_assign(s)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self { layers }
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn out_shape(&self, in_shape: [usize; 3]) -> Result<[usize; 3]> {
        self.layers
            .iter()
            .try_fold(in_shape, |s, l| l.spec().out_shape(s))
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_mut())
            .collect()
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.infer(&cur)?;
        }
        Ok(cur)
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Vec<Cache<T>>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &mut self.layers {
            let (y, cache) = layer.forward(&cur, mode)?;
            caches.push(cache);
            cur = y;
        }
        Ok((cur, caches))
    }

    /// Backpropagates `dy` and returns `(input gradient, parameter gradients)`.
    pub fn backward(&self, dy: &Tensor<T>, caches: &[Cache<T>]) -> Result<(Tensor<T>, Grads<T>)> {
        if caches.len() != self.layers.len() {
            return Err(Error::MissingCache {
                layer: format!(
                    "sequential of {} layers ({} caches)",
                    self.layers.len(),
                    caches.len()
                ),
            });
        }
        let mut per_layer: Vec<Vec<Tensor<T>>> = Vec::with_capacity(self.layers.len());
        let mut grad = dy.clone();
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            let (dx, pg) = layer.backward(&grad, cache)?;
            per_layer.push(pg);
            grad = dx;
        }
        per_layer.reverse();
        Ok((grad, per_layer.into_iter().flatten().collect()))
    }
}
