//! Checkpoint (de)serialization shared by both auto-encoders.

use crate::error::{Error, Result};
use crate::nn::checkpoint::{self, TensorEntry};
use crate::nn::{Layer, LayerSpec, Sequential};
use crate::scalar::Scalar;

fn entries<T: Scalar>(prefix: &str, seq: &Sequential<T>) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut out = Vec::new();
    for (i, layer) in seq.layers.iter().enumerate() {
        let t = |name: &str, shape: Vec<usize>, data: Vec<f32>| {
            (format!("{prefix}.{i}.{name}"), shape, data)
        };
        let f32s = |v: &[T]| v.iter().map(|&x| Scalar::to_f32(x)).collect::<Vec<_>>();
        match layer {
            Layer::Conv(l) => {
                out.push(t(
                    "weight",
                    l.weight.shape().to_vec(),
                    f32s(l.weight.data()),
                ));
                if let Some(b) = &l.bias {
                    out.push(t("bias", vec![b.len()], f32s(b.data())));
                }
            }
            Layer::ConvTransposed(l) => {
                out.push(t(
                    "weight",
                    l.weight.shape().to_vec(),
                    f32s(l.weight.data()),
                ));
                if let Some(b) = &l.bias {
                    out.push(t("bias", vec![b.len()], f32s(b.data())));
                }
            }
            Layer::BatchNorm(l) => {
                let c = l.gamma.len();
                out.push(t("gamma", vec![c], f32s(l.gamma.data())));
                out.push(t("beta", vec![c], f32s(l.beta.data())));
                out.push(t("running_mean", vec![c], f32s(&l.running_mean)));
                out.push(t("running_var", vec![c], f32s(&l.running_var)));
                out.push(t("tracked", vec![1], vec![l.tracked as f32]));
            }
            _ => {}
        }
    }
    out
}

pub(crate) fn encode_model<T: Scalar>(
    architecture: serde_json::Value,
    parts: &[(&str, &Sequential<T>)],
) -> Result<Vec<u8>> {
    let tensors: Vec<_> = parts.iter().flat_map(|(p, s)| entries(p, s)).collect();
    checkpoint::encode(architecture, &tensors)
}

pub(crate) fn check_specs<T: Scalar>(
    arch: &serde_json::Value,
    key: &str,
    seq: &Sequential<T>,
) -> Result<()> {
    let stored: Vec<LayerSpec> = serde_json::from_value(arch[key].clone())
        .map_err(|e| Error::json(format!("architecture.{key}"), e))?;
    if stored != seq.specs() {
        return Err(Error::Header {
            field: format!("architecture.{key}"),
            reason: "layer list does not match the rebuilt architecture".into(),
        });
    }
    Ok(())
}

pub(crate) fn load_into<'a, T: Scalar, I>(
    it: &mut I,
    prefix: &str,
    seq: &mut Sequential<T>,
) -> Result<()>
where
    I: Iterator<Item = (&'a TensorEntry, Vec<f32>)>,
{
    let expected = entries(prefix, seq);
    for (name, shape, _) in expected {
        let (entry, data) = it.next().ok_or_else(|| Error::Header {
            field: "tensors".into(),
            reason: format!("missing tensor {name}"),
        })?;
        if entry.name != name || entry.shape != shape {
            return Err(Error::Header {
                field: format!("tensors.{}", entry.name),
                reason: format!(
                    "expected {name} with shape {shape:?}, found shape {:?}",
                    entry.shape
                ),
            });
        }
        let (layer_idx, field) = {
            let rest = &name[prefix.len() + 1..];
            let (i, f) = rest.split_once('.').expect("name layout");
            (i.parse::<usize>().expect("index"), f.to_string())
        };
        let vals: Vec<T> = data.iter().map(|&v| <T as Scalar>::from_f32(v)).collect();
        match (&mut seq.layers[layer_idx], field.as_str()) {
            (Layer::Conv(l), "weight") => l.weight.data_mut().copy_from_slice(&vals),
            (Layer::Conv(l), "bias") => l
                .bias
                .as_mut()
                .expect("listed")
                .data_mut()
                .copy_from_slice(&vals),
            (Layer::ConvTransposed(l), "weight") => l.weight.data_mut().copy_from_slice(&vals),
            (Layer::ConvTransposed(l), "bias") => l
                .bias
                .as_mut()
                .expect("listed")
                .data_mut()
                .copy_from_slice(&vals),
            (Layer::BatchNorm(l), "gamma") => l.gamma.data_mut().copy_from_slice(&vals),
            (Layer::BatchNorm(l), "beta") => l.beta.data_mut().copy_from_slice(&vals),
            (Layer::BatchNorm(l), "running_mean") => l.running_mean.copy_from_slice(&vals),
            (Layer::BatchNorm(l), "running_var") => l.running_var.copy_from_slice(&vals),
            (Layer::BatchNorm(l), "tracked") => l.tracked = data[0] as u64,
            _ => unreachable!("entries() only emits known fields"),
        }
    }
    Ok(())
}

/// Copies parameters and batch-norm buffers between equally shaped networks.
pub(crate) fn copy_state<T: Scalar, U: Scalar>(src: &Sequential<T>, dst: &mut Sequential<U>) {
    let cast = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect::<Vec<U>>();
    for (s, d) in src.layers.iter().zip(dst.layers.iter_mut()) {
        match (s, d) {
            (Layer::Conv(a), Layer::Conv(b)) => {
                b.weight.data_mut().copy_from_slice(&cast(a.weight.data()));
                if let (Some(x), Some(y)) = (&a.bias, &mut b.bias) {
                    y.data_mut().copy_from_slice(&cast(x.data()));
                }
            }
            (Layer::ConvTransposed(a), Layer::ConvTransposed(b)) => {
                b.weight.data_mut().copy_from_slice(&cast(a.weight.data()));
                if let (Some(x), Some(y)) = (&a.bias, &mut b.bias) {
                    y.data_mut().copy_from_slice(&cast(x.data()));
                }
            }
            (Layer::BatchNorm(a), Layer::BatchNorm(b)) => {
                b.gamma.data_mut().copy_from_slice(&cast(a.gamma.data()));
                b.beta.data_mut().copy_from_slice(&cast(a.beta.data()));
                b.running_mean = cast(&a.running_mean);
                b.running_var = cast(&a.running_var);
                b.tracked = a.tracked;
            }
            _ => {}
        }
    }
}
