//! Slice auto-encoder: five stride-2 convolutions down to the bottleneck and
//! five transposed convolutions back, batch norm and ReLU after every layer
//! except the sigmoid output. Convolutions followed by batch norm carry no
//! bias since the normalization cancels it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::persist;
use crate::error::{Error, Result};
use crate::nn::{
    param_names, BatchNorm2d, Cache, Conv2d, ConvTranspose2d, Grads, Init, Layer, LayerSpec, Mode,
    Network, Padding, Sequential, Tensor,
};
use crate::scalar::Scalar;

/// Encoder output channels, input to bottleneck.
pub const AE_CHANNELS: [usize; 5] = [16, 32, 64, 128, 256];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeArchitecture {
    /// `(channels, height, width)` of one input slice.
    pub input: [usize; 3],
    pub channels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AeModel<T> {
    pub arch: AeArchitecture,
    pub encoder: Sequential<T>,
    pub decoder: Sequential<T>,
}

/// Spatial sizes after each stride-2 encoder layer, starting with the input.
pub fn encoder_sizes(hw: (usize, usize), depth: usize) -> Vec<(usize, usize)> {
    let mut sizes = vec![hw];
    for _ in 0..depth {
        let (h, w) = *sizes.last().expect("non-empty");
        sizes.push((h.div_ceil(2), w.div_ceil(2)));
    }
    sizes
}

impl<T: Scalar> AeModel<T> {
    pub fn new(arch: AeArchitecture, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c0, h, w] = arch.input;
        if arch.channels.is_empty() || c0 == 0 || h == 0 || w == 0 {
            return Err(Error::arg("architecture", format!("{arch:?}")));
        }
        let ladder: Vec<usize> = std::iter::once(c0)
            .chain(arch.channels.iter().copied())
            .collect();
        let depth = arch.channels.len();
        let sizes = encoder_sizes((h, w), depth);

        let mut enc = Vec::with_capacity(3 * depth);
        for i in 1..=depth {
            let spec = LayerSpec::conv(ladder[i - 1], ladder[i], 3, 2, Padding::Explicit(1, 1))
                .without_bias();
            enc.push(Layer::Conv(Conv2d::new(spec, Init::HeNormal, &mut rng)));
            enc.push(Layer::BatchNorm(BatchNorm2d::new(ladder[i])));
            enc.push(Layer::Relu(LayerSpec::relu(ladder[i])));
        }
        let mut dec = Vec::with_capacity(3 * depth);
        for i in (1..=depth).rev() {
            let (ih, iw) = sizes[i];
            let (th, tw) = sizes[i - 1];
            let op = (th + 1 - 2 * ih, tw + 1 - 2 * iw);
            let last = i == 1;
            let mut spec = LayerSpec::conv_transposed(
                ladder[i],
                ladder[i - 1],
                3,
                2,
                Padding::Explicit(1, 1),
                op,
            );
            if !last {
                spec = spec.without_bias();
            }
            let init = if last {
                Init::GlorotUniform
            } else {
                Init::HeNormal
            };
            dec.push(Layer::ConvTransposed(ConvTranspose2d::new(
                spec, init, &mut rng,
            )));
            if last {
                dec.push(Layer::Sigmoid(LayerSpec::sigmoid(ladder[0])));
            } else {
                dec.push(Layer::BatchNorm(BatchNorm2d::new(ladder[i - 1])));
                dec.push(Layer::Relu(LayerSpec::relu(ladder[i - 1])));
            }
        }
        let model = Self {
            arch,
            encoder: Sequential::new(enc),
            decoder: Sequential::new(dec),
        };
        let out = model.decoder.out_shape(model.bottleneck_shape()?)?;
        if out != model.arch.input {
            return Err(Error::shape("ae shape plan", model.arch.input, out));
        }
        Ok(model)
    }

    /// Published configuration: 2-channel slices and the 16..256 ladder.
    pub fn standard(height: usize, width: usize, seed: u64) -> Result<Self> {
        Self::new(
            AeArchitecture {
                input: [2, height, width],
                channels: AE_CHANNELS.to_vec(),
            },
            seed,
        )
    }

    pub fn bottleneck_shape(&self) -> Result<[usize; 3]> {
        self.encoder.out_shape(self.arch.input)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.sample_shape() != self.arch.input {
            return Err(Error::shape("ae input", self.arch.input, x.sample_shape()));
        }
        Ok(())
    }

    /// Training-mode pass: returns `(reconstruction, latent, caches)`.
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, AeCaches<T>)> {
        self.check_input(x)?;
        let (z, enc) = self.encoder.forward(x, Mode::Train)?;
        let (y, dec) = self.decoder.forward(&z, Mode::Train)?;
        Ok((y, z, AeCaches { enc, dec }))
    }

    pub fn backward(&self, dy: &Tensor<T>, caches: &AeCaches<T>) -> Result<Grads<T>> {
        let (dz, mut g_dec) = self.decoder.backward(dy, &caches.dec)?;
        let (_, mut g) = self.encoder.backward(&dz, &caches.enc)?;
        g.append(&mut g_dec);
        Ok(g)
    }

    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        self.encoder.infer(x)
    }

    /// Inference-mode reconstruction (batch norm running statistics).
    pub fn reconstruct(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        self.decoder.infer(&self.encoder.infer(x)?)
    }

    pub fn cast<U: Scalar>(&self) -> Result<AeModel<U>> {
        let mut out = AeModel::<U>::new(self.arch.clone(), 0)?;
        persist::copy_state(&self.encoder, &mut out.encoder);
        persist::copy_state(&self.decoder, &mut out.decoder);
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let arch = serde_json::json!({
            "model": "ae",
            "ae": self.arch,
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
        if header.architecture.get("model").and_then(|v| v.as_str()) != Some("ae") {
            return Err(Error::Header {
                field: "architecture.model".into(),
                reason: "not an AE checkpoint".into(),
            });
        }
        let arch: AeArchitecture = serde_json::from_value(header.architecture["ae"].clone())
            .map_err(|e| Error::json("ae architecture", e))?;
        let mut model = Self::new(arch, 0)?;
        persist::check_specs(&header.architecture, "encoder", &model.encoder)?;
        persist::check_specs(&header.architecture, "decoder", &model.decoder)?;
        let mut it = header.tensors.iter().zip(tensors);
        persist::load_into(&mut it, "encoder", &mut model.encoder)?;
        persist::load_into(&mut it, "decoder", &mut model.decoder)?;
        Ok(model)
    }
}

#[derive(Clone, Debug)]
pub struct AeCaches<T> {
    enc: Vec<Cache<T>>,
    dec: Vec<Cache<T>>,
}

impl<T: Scalar> Network<T> for AeModel<T> {
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
