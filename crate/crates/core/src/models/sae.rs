//! Patch auto-encoder used as both branches of the siamese pair.
//!
//! Encoder: 3x3 valid conv, 2x max-pool, two 3x3 valid convs, giving a
//! `16 x 2 x 2` latent for a `2 x 15 x 15` patch. Decoder: two 3x3 full convs,
//! 2x upsampling, a 3x3 full conv and a final 2x2 full conv back to
//! `2 x 15 x 15`. ReLU everywhere except the sigmoid output; no batch norm.
//!
//! The two siamese branches are the same [`SaeModel`]: a pair is pushed
//! through it as one stacked batch, so weight sharing needs no copying.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{sae_loss_grad, SaeLoss};
use super::persist;
use crate::error::{Error, Result};
use crate::nn::{
    param_names, Cache, Conv2d, Grads, Init, Layer, LayerSpec, Mode, Network, Padding, Sequential,
    Tensor,
};
use crate::scalar::Scalar;

pub const PATCH_SIZE: usize = 15;
pub const SAE_FILTERS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeArchitecture {
    pub channels: usize,
    pub filters: usize,
}

impl Default for SaeArchitecture {
    fn default() -> Self {
        Self {
            channels: 2,
            filters: SAE_FILTERS,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaeModel<T> {
    pub arch: SaeArchitecture,
    pub encoder: Sequential<T>,
    pub decoder: Sequential<T>,
}

#[derive(Clone, Debug)]
pub struct SaeCaches<T> {
    enc: Vec<Cache<T>>,
    dec: Vec<Cache<T>>,
}

/// Forward results of one batch of pairs.
#[derive(Clone, Debug)]
pub struct PairPass<T> {
    pub reconstructions: [Tensor<T>; 2],
    pub latents: [Tensor<T>; 2],
}

fn split_halves<T: Scalar>(t: &Tensor<T>) -> Result<[Tensor<T>; 2]> {
    let [n, c, h, w] = t.shape();
    let half = n / 2;
    let len = half * c * h * w;
    Ok([
        Tensor::from_vec([half, c, h, w], t.data()[..len].to_vec())?,
        Tensor::from_vec([half, c, h, w], t.data()[len..].to_vec())?,
    ])
}

fn join_halves<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("siamese pair", a.shape(), b.shape()));
    }
    let [n, c, h, w] = a.shape();
    let mut data = Vec::with_capacity(2 * a.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec([2 * n, c, h, w], data)
}

impl<T: Scalar> SaeModel<T> {
    pub fn new(arch: SaeArchitecture, seed: u64) -> Result<Self> {
        if arch.channels == 0 || arch.filters == 0 {
            return Err(Error::arg("architecture", format!("{arch:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, f) = (arch.channels, arch.filters);
        let mut conv = |i, o, k, p, init| {
            Layer::Conv(Conv2d::new(LayerSpec::conv(i, o, k, 1, p), init, &mut rng))
        };
        let encoder = Sequential::new(vec![
            conv(c, f, 3, Padding::Valid, Init::HeNormal),
            Layer::Relu(LayerSpec::relu(f)),
            Layer::MaxPool(LayerSpec::maxpool(f)),
            conv(f, f, 3, Padding::Valid, Init::HeNormal),
            Layer::Relu(LayerSpec::relu(f)),
            conv(f, f, 3, Padding::Valid, Init::HeNormal),
            Layer::Relu(LayerSpec::relu(f)),
        ]);
        let decoder = Sequential::new(vec![
            conv(f, f, 3, Padding::Full, Init::HeNormal),
            Layer::Relu(LayerSpec::relu(f)),
            conv(f, f, 3, Padding::Full, Init::HeNormal),
            Layer::Relu(LayerSpec::relu(f)),
            Layer::Upsample(LayerSpec::upsample(f)),
            conv(f, f, 3, Padding::Full, Init::HeNormal),
            Layer::Relu(LayerSpec::relu(f)),
            conv(f, c, 2, Padding::Full, Init::GlorotUniform),
            Layer::Sigmoid(LayerSpec::sigmoid(c)),
        ]);
        let model = Self {
            arch,
            encoder,
            decoder,
        };
        let out = model.decoder.out_shape(model.latent_shape()?)?;
        if out != model.input_shape() {
            return Err(Error::shape("sae shape plan", model.input_shape(), out));
        }
        Ok(model)
    }

    pub fn standard(seed: u64) -> Result<Self> {
        Self::new(SaeArchitecture::default(), seed)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.arch.channels, PATCH_SIZE, PATCH_SIZE]
    }

    pub fn latent_shape(&self) -> Result<[usize; 3]> {
        self.encoder.out_shape(self.input_shape())
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.sample_shape() != self.input_shape() {
            return Err(Error::shape(
                "sae input",
                self.input_shape(),
                x.sample_shape(),
            ));
        }
        Ok(())
    }

    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        self.encoder.infer(x)
    }

    pub fn reconstruct(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        self.decoder.infer(&self.encoder.infer(x)?)
    }

    /// Training pass over a batch of pairs through the shared branch.
    pub fn forward_pairs(
        &mut self,
        left: &Tensor<T>,
        right: &Tensor<T>,
    ) -> Result<(PairPass<T>, SaeCaches<T>)> {
        self.check_input(left)?;
        let stacked = join_halves(left, right)?;
        let (z, enc) = self.encoder.forward(&stacked, Mode::Train)?;
        let (y, dec) = self.decoder.forward(&z, Mode::Train)?;
        Ok((
            PairPass {
                reconstructions: split_halves(&y)?,
                latents: split_halves(&z)?,
            },
            SaeCaches { enc, dec },
        ))
    }

    /// Backpropagates gradients with respect to both reconstructions and
    /// both latents; the shared parameters receive the sum over branches.
    pub fn backward_pairs(
        &self,
        d_recon: [&Tensor<T>; 2],
        d_latent: [&Tensor<T>; 2],
        caches: &SaeCaches<T>,
    ) -> Result<Grads<T>> {
        let dy = join_halves(d_recon[0], d_recon[1])?;
        let (mut dz, mut g_dec) = self.decoder.backward(&dy, &caches.dec)?;
        dz.add_assign(&join_halves(d_latent[0], d_latent[1])?)?;
        let (_, mut g) = self.encoder.backward(&dz, &caches.enc)?;
        g.append(&mut g_dec);
        Ok(g)
    }

    /// Loss and gradients for one batch of pairs.
    pub fn loss_and_grads(
        &mut self,
        left: &Tensor<T>,
        right: &Tensor<T>,
        alpha: T,
    ) -> Result<(SaeLoss<T>, Grads<T>)> {
        let (pass, caches) = self.forward_pairs(left, right)?;
        let (loss, g) = sae_loss_grad(
            [left, right],
            [&pass.reconstructions[0], &pass.reconstructions[1]],
            [&pass.latents[0], &pass.latents[1]],
            alpha,
        )?;
        let grads = self.backward_pairs([&g.x_hat[0], &g.x_hat[1]], [&g.z[0], &g.z[1]], &caches)?;
        Ok((loss, grads))
    }

    pub fn cast<U: Scalar>(&self) -> Result<SaeModel<U>> {
        let mut out = SaeModel::<U>::new(self.arch.clone(), 0)?;
        persist::copy_state(&self.encoder, &mut out.encoder);
        persist::copy_state(&self.decoder, &mut out.decoder);
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let arch = serde_json::json!({
            "model": "sae",
            "sae": self.arch,
            "encoder": self.encoder.specs(),
            "decoder": self.decoder.specs(),
        });
        persist::encode_model(
            arch,
            &[("encoder", &self.encoder), ("decoder", &self.decoder)],
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, tensors) = crate::nn::checkpoint::decode(bytes)?;
        if header.architecture.get("model").and_then(|v| v.as_str()) != Some("sae") {
            return Err(Error::Header {
                field: "architecture.model".into(),
                reason: "not an SAE checkpoint".into(),
            });
        }
        let arch: SaeArchitecture = serde_json::from_value(header.architecture["sae"].clone())
            .map_err(|e| Error::json("sae architecture", e))?;
        let mut model = Self::new(arch, 0)?;
        persist::check_specs(&header.architecture, "encoder", &model.encoder)?;
        persist::check_specs(&header.architecture, "decoder", &model.decoder)?;
        let mut it = header.tensors.iter().zip(tensors);
        persist::load_into(&mut it, "encoder", &mut model.encoder)?;
        persist::load_into(&mut it, "decoder", &mut model.decoder)?;
        Ok(model)
    }
}

impl<T: Scalar> Network<T> for SaeModel<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }

    fn param_names(&self) -> Vec<String> {
        let mut n = param_names("encoder", &self.encoder);
        n.extend(param_names("decoder", &self.decoder));
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latent_and_output_shapes() {
        let m = SaeModel::<f32>::standard(0).unwrap();
        assert_eq!(m.latent_shape().unwrap(), [16, 2, 2]);
        let x = Tensor::full([3, 2, 15, 15], 0.4);
        assert_eq!(m.reconstruct(&x).unwrap().shape(), [3, 2, 15, 15]);
        assert!(m.reconstruct(&Tensor::zeros([1, 2, 14, 15])).is_err());
    }

    #[test]
    fn zero_output_layer_gives_one_half() {
        let mut m = SaeModel::<f32>::standard(1).unwrap();
        if let Some(Layer::Conv(last)) = m
            .decoder
            .layers
            .iter_mut()
            .rev()
            .find(|l| matches!(l, Layer::Conv(_)))
        {
            last.weight.fill(0.0);
            last.bias.as_mut().unwrap().fill(0.0);
        }
        let x = Tensor::full([2, 2, 15, 15], 0.7);
        assert!(m.reconstruct(&x).unwrap().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn branches_are_bit_identical_on_identical_inputs() {
        let mut m = SaeModel::<f32>::standard(2).unwrap();
        let x = Tensor::from_vec(
            [1, 2, 15, 15],
            (0..450).map(|i| (i as f32 * 0.01).sin().abs()).collect(),
        )
        .unwrap();
        let (pass, _) = m.forward_pairs(&x, &x).unwrap();
        assert_eq!(pass.reconstructions[0], pass.reconstructions[1]);
        assert_eq!(pass.latents[0], pass.latents[1]);
        assert_eq!(pass.reconstructions[0], m.reconstruct(&x).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = SaeModel::<f32>::standard(4).unwrap();
        let bytes = m.to_bytes().unwrap();
        let back = SaeModel::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert!(crate::models::AeModel::<f32>::from_bytes(&bytes).is_err());
    }
}
