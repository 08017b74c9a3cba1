//! Layer kinds, shape algebra and analytic forward/backward passes.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    ConvTransposed,
    MaxPool,
    Upsample,
    BatchNorm,
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// No padding.
    Valid,
    /// `(k - 1) / 2`; preserves size for odd kernels at stride 1.
    Same,
    /// `k - 1`; every partial overlap produces an output.
    Full,
    Explicit(usize, usize),
}

impl Padding {
    pub fn resolve(self, kernel: (usize, usize)) -> (usize, usize) {
        match self {
            Padding::Valid => (0, 0),
            Padding::Same => ((kernel.0 - 1) / 2, (kernel.1 - 1) / 2),
            Padding::Full => (kernel.0 - 1, kernel.1 - 1),
            Padding::Explicit(h, w) => (h, w),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: Padding,
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default)]
    pub output_padding: (usize, usize),
    /// Convolutions only: whether an additive per-channel bias is learned.
    #[serde(default = "default_bias")]
    pub bias: bool,
}

fn default_bias() -> bool {
    true
}

impl LayerSpec {
    fn simple(kind: LayerKind, channels: usize) -> Self {
        Self {
            kind,
            kernel: (1, 1),
            stride: (1, 1),
            padding: Padding::Valid,
            in_channels: channels,
            out_channels: channels,
            output_padding: (0, 0),
            bias: false,
        }
    }

    pub fn conv(inc: usize, outc: usize, kernel: usize, stride: usize, padding: Padding) -> Self {
        Self {
            kind: LayerKind::Conv,
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding,
            in_channels: inc,
            out_channels: outc,
            output_padding: (0, 0),
            bias: true,
        }
    }

    pub fn conv_transposed(
        inc: usize,
        outc: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        output_padding: (usize, usize),
    ) -> Self {
        Self {
            kind: LayerKind::ConvTransposed,
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding,
            in_channels: inc,
            out_channels: outc,
            output_padding,
            bias: true,
        }
    }

    /// Drops the bias of a convolution, e.g. when batch norm follows it.
    pub fn without_bias(self) -> Self {
        Self {
            bias: false,
            ..self
        }
    }

    pub fn maxpool(channels: usize) -> Self {
        Self {
            kernel: (2, 2),
            stride: (2, 2),
            ..Self::simple(LayerKind::MaxPool, channels)
        }
    }

    pub fn upsample(channels: usize) -> Self {
        Self {
            stride: (2, 2),
            ..Self::simple(LayerKind::Upsample, channels)
        }
    }

    pub fn batchnorm(channels: usize) -> Self {
        Self::simple(LayerKind::BatchNorm, channels)
    }

    pub fn relu(channels: usize) -> Self {
        Self::simple(LayerKind::Relu, channels)
    }

    pub fn sigmoid(channels: usize) -> Self {
        Self::simple(LayerKind::Sigmoid, channels)
    }

    /// Output `(channels, height, width)` for an input of `in_shape`.
    pub fn out_shape(&self, in_shape: [usize; 3]) -> Result<[usize; 3]> {
        let [c, h, w] = in_shape;
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::arg("layer", "kernel and stride must be >= 1"));
        }
        if c != self.in_channels {
            return Err(Error::shape(
                format!("{:?} input channels", self.kind),
                self.in_channels,
                c,
            ));
        }
        let (ph, pw) = self.padding.resolve(self.kernel);
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let dims = match self.kind {
            LayerKind::Conv => {
                let f = |n: usize, p: usize, k: usize, s: usize| -> i64 {
                    let span = n as i64 + 2 * p as i64 - k as i64;
                    if span < 0 {
                        0
                    } else {
                        span / s as i64 + 1
                    }
                };
                (f(h, ph, kh, sh), f(w, pw, kw, sw))
            }
            LayerKind::ConvTransposed => {
                let (oph, opw) = self.output_padding;
                if oph >= sh || opw >= sw {
                    return Err(Error::arg("output_padding", "must be smaller than stride"));
                }
                let f = |n: usize, p: usize, k: usize, s: usize, op: usize| -> i64 {
                    (n as i64 - 1) * s as i64 - 2 * p as i64 + k as i64 + op as i64
                };
                (f(h, ph, kh, sh, oph), f(w, pw, kw, sw, opw))
            }
            LayerKind::MaxPool => ((h / 2) as i64, (w / 2) as i64),
            LayerKind::Upsample => ((h * 2) as i64, (w * 2) as i64),
            LayerKind::BatchNorm | LayerKind::Relu | LayerKind::Sigmoid => (h as i64, w as i64),
        };
        if dims.0 <= 0 || dims.1 <= 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                format!("{:?} output", self.kind),
                "positive dimensions",
                dims,
            ));
        }
        Ok([self.out_channels, dims.0 as usize, dims.1 as usize])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Normal with variance `2 / fan_in`, for layers followed by ReLU.
    HeNormal,
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`, for the sigmoid output layer.
    GlorotUniform,
}

/// Convolution geometry from an `(c, h, w)` field to `(oh, ow)` positions.
#[derive(Clone, Copy, Debug)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output columns `oj` whose input column `oj * sw + kj - pw` lies in `0..w`.
fn valid_cols(g: &Geom, kj: usize) -> std::ops::Range<usize> {
    let lo = g.pw.saturating_sub(kj).div_ceil(g.sw);
    let hi = if g.w + g.pw > kj {
        (g.w + g.pw - kj).div_ceil(g.sw)
    } else {
        0
    };
    lo.min(g.ow)..hi.clamp(lo.min(g.ow), g.ow)
}

/// Writes the patch matrix of one sample into columns `off..off + oh*ow` of a
/// `rows x ld` buffer.
fn im2col<T: Scalar>(x: &[T], g: &Geom, cols: &mut [T], ld: usize, off: usize) {
    let p = g.positions();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ld + off..row * ld + off + p];
                let valid = valid_cols(g, kj);
                for oi in 0..g.oh {
                    let ii = (oi * g.sh + ki) as isize - g.ph as isize;
                    let seg = &mut dst[oi * g.ow..(oi + 1) * g.ow];
                    if ii < 0 || ii as usize >= g.h || valid.is_empty() {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    seg[..valid.start].fill(T::zero());
                    seg[valid.end..].fill(T::zero());
                    let j0 = valid.start * g.sw + kj - g.pw;
                    if g.sw == 1 {
                        seg[valid.clone()].copy_from_slice(&src[j0..j0 + valid.len()]);
                    } else {
                        for (t, v) in seg[valid.clone()].iter_mut().enumerate() {
                            *v = src[j0 + t * g.sw];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back onto the field.
fn col2im<T: Scalar>(cols: &[T], ld: usize, off: usize, g: &Geom, x: &mut [T]) {
    let p = g.positions();
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ld + off..row * ld + off + p];
                let valid = valid_cols(g, kj);
                if valid.is_empty() {
                    continue;
                }
                let j0 = valid.start * g.sw + kj - g.pw;
                for oi in 0..g.oh {
                    let ii = (oi * g.sh + ki) as isize - g.ph as isize;
                    if ii < 0 || ii as usize >= g.h {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    let seg = &src[oi * g.ow + valid.start..oi * g.ow + valid.end];
                    if g.sw == 1 {
                        for (d, &v) in dst[j0..j0 + seg.len()].iter_mut().zip(seg) {
                            *d += v;
                        }
                    } else {
                        for (t, &v) in seg.iter().enumerate() {
                            dst[j0 + t * g.sw] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Elements of a patch-matrix chunk; keeps the working set cache-sized.
const CHUNK_ELEMS: usize = 1 << 18;

/// Consecutive sample ranges whose patch matrices fit in [`CHUNK_ELEMS`].
fn sample_chunks(n: usize, per_sample: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    let step = (CHUNK_ELEMS / per_sample.max(1)).max(1);
    (0..n).step_by(step).map(move |b| b..(b + step).min(n))
}

/// `[n, c, p]` -> `[c, n * p]`.
fn to_channel_major<T: Scalar>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let src = &x[(b * c + ch) * p..(b * c + ch + 1) * p];
            out[ch * n * p + b * p..ch * n * p + (b + 1) * p].copy_from_slice(src);
        }
    }
    out
}

/// `[c, n * p]` -> `[n, c, p]`.
fn from_channel_major<T: Scalar>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let src = &x[ch * n * p + b * p..ch * n * p + (b + 1) * p];
            out[(b * c + ch) * p..(b * c + ch + 1) * p].copy_from_slice(src);
        }
    }
    out
}

fn init_weight<T: Scalar, R: Rng + ?Sized>(
    shape: [usize; 4],
    fan_in: f64,
    fan_out: f64,
    init: Init,
    rng: &mut R,
) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = match init {
        Init::HeNormal => {
            let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            (0..n).map(|_| T::of(dist.sample(rng))).collect()
        }
        Init::GlorotUniform => {
            let limit = (6.0 / (fan_in + fan_out)).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit);
            (0..n).map(|_| T::of(dist.sample(rng))).collect()
        }
    };
    Tensor::from_vec(shape, data).expect("shape product")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub spec: LayerSpec,
    /// `[out_channels, in_channels, kh, kw]`
    pub weight: Tensor<T>,
    /// `[out_channels, 1, 1, 1]`
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(spec: LayerSpec, init: Init, rng: &mut R) -> Self {
        let (kh, kw) = spec.kernel;
        let (ic, oc) = (spec.in_channels, spec.out_channels);
        let fan_in = (ic * kh * kw) as f64;
        let fan_out = (oc * kh * kw) as f64;
        Self {
            spec,
            weight: init_weight([oc, ic, kh, kw], fan_in, fan_out, init, rng),
            bias: spec.bias.then(|| Tensor::zeros([oc, 1, 1, 1])),
        }
    }

    fn geom(&self, h: usize, w: usize) -> Result<Geom> {
        let [_, oh, ow] = self.spec.out_shape([self.spec.in_channels, h, w])?;
        let (ph, pw) = self.spec.padding.resolve(self.spec.kernel);
        Ok(Geom {
            c: self.spec.in_channels,
            h,
            w,
            kh: self.spec.kernel.0,
            kw: self.spec.kernel.1,
            sh: self.spec.stride.0,
            sw: self.spec.stride.1,
            ph,
            pw,
            oh,
            ow,
        })
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, _, h, w] = x.shape();
        let g = self.geom(h, w)?;
        let (oc, k, p) = (self.spec.out_channels, g.rows(), g.positions());
        let np = n * p;
        let mut out = vec![T::zero(); oc * np];
        let mut cols = Vec::new();
        for chunk in sample_chunks(n, k * p) {
            let m = chunk.len() * p;
            cols.resize(k * m, T::zero());
            for b in chunk.clone() {
                im2col(x.sample(b), &g, &mut cols, m, (b - chunk.start) * p);
            }
            T::gemm(
                oc,
                k,
                m,
                T::one(),
                self.weight.data(),
                k as isize,
                1,
                &cols,
                m as isize,
                1,
                T::zero(),
                &mut out[chunk.start * p..],
                np as isize,
                1,
            );
        }
        if let Some(bias) = &self.bias {
            for (row, &b) in out.chunks_mut(np).zip(bias.data()) {
                row.iter_mut().for_each(|v| *v += b);
            }
        }
        Tensor::from_vec([n, oc, g.oh, g.ow], from_channel_major(&out, n, oc, p))
    }

    fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let [n, c, h, w] = x.shape();
        let g = self.geom(h, w)?;
        let (oc, k, p) = (self.spec.out_channels, g.rows(), g.positions());
        if dy.shape() != [n, oc, g.oh, g.ow] {
            return Err(Error::shape(
                "conv upstream gradient",
                [n, oc, g.oh, g.ow],
                dy.shape(),
            ));
        }
        let np = n * p;
        let dy_cm = to_channel_major(dy.data(), n, oc, p);
        let mut dw = Tensor::zeros(self.weight.shape());
        let mut dx = Tensor::zeros([n, c, h, w]);
        let (mut cols, mut dcols) = (Vec::new(), Vec::new());
        for chunk in sample_chunks(n, k * p) {
            let m = chunk.len() * p;
            let beta = if chunk.start == 0 {
                T::zero()
            } else {
                T::one()
            };
            cols.resize(k * m, T::zero());
            dcols.resize(k * m, T::zero());
            for b in chunk.clone() {
                im2col(x.sample(b), &g, &mut cols, m, (b - chunk.start) * p);
            }
            let dy_chunk = &dy_cm[chunk.start * p..];
            T::gemm(
                oc,
                m,
                k,
                T::one(),
                dy_chunk,
                np as isize,
                1,
                &cols,
                1,
                m as isize,
                beta,
                dw.data_mut(),
                k as isize,
                1,
            );
            T::gemm(
                k,
                oc,
                m,
                T::one(),
                self.weight.data(),
                1,
                k as isize,
                dy_chunk,
                np as isize,
                1,
                T::zero(),
                &mut dcols,
                m as isize,
                1,
            );
            for b in chunk.clone() {
                col2im(&dcols, m, (b - chunk.start) * p, &g, dx.sample_mut(b));
            }
        }
        let db = self.bias.as_ref().map(|b| {
            let mut db = Tensor::zeros(b.shape());
            for (o, row) in dy_cm.chunks(np).enumerate() {
                db.data_mut()[o] = row.iter().copied().sum();
            }
            db
        });
        Ok((dx, std::iter::once(dw).chain(db).collect()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose2d<T> {
    pub spec: LayerSpec,
    /// `[in_channels, out_channels, kh, kw]`
    pub weight: Tensor<T>,
    /// `[out_channels, 1, 1, 1]`
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new<R: Rng + ?Sized>(spec: LayerSpec, init: Init, rng: &mut R) -> Self {
        let (kh, kw) = spec.kernel;
        let (ic, oc) = (spec.in_channels, spec.out_channels);
        // each output position sees roughly kernel_area / stride_area inputs per channel
        let area = (spec.stride.0 * spec.stride.1) as f64;
        let fan_in = ((ic * kh * kw) as f64 / area).max(1.0);
        let fan_out = ((oc * kh * kw) as f64 / area).max(1.0);
        Self {
            spec,
            weight: init_weight([ic, oc, kh, kw], fan_in, fan_out, init, rng),
            bias: spec.bias.then(|| Tensor::zeros([oc, 1, 1, 1])),
        }
    }

    /// Geometry of the equivalent forward convolution from output to input.
    fn geom(&self, h: usize, w: usize) -> Result<Geom> {
        let [_, oh, ow] = self.spec.out_shape([self.spec.in_channels, h, w])?;
        let (ph, pw) = self.spec.padding.resolve(self.spec.kernel);
        Ok(Geom {
            c: self.spec.out_channels,
            h: oh,
            w: ow,
            kh: self.spec.kernel.0,
            kw: self.spec.kernel.1,
            sh: self.spec.stride.0,
            sw: self.spec.stride.1,
            ph,
            pw,
            oh: h,
            ow: w,
        })
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, ic, h, w] = x.shape();
        let g = self.geom(h, w)?;
        let (oc, k, p) = (self.spec.out_channels, g.rows(), g.positions());
        let np = n * p;
        let x_cm = to_channel_major(x.data(), n, ic, p);
        let mut out = Tensor::zeros([n, oc, g.h, g.w]);
        let mut cols = Vec::new();
        for chunk in sample_chunks(n, k * p) {
            let m = chunk.len() * p;
            cols.resize(k * m, T::zero());
            T::gemm(
                k,
                ic,
                m,
                T::one(),
                self.weight.data(),
                1,
                k as isize,
                &x_cm[chunk.start * p..],
                np as isize,
                1,
                T::zero(),
                &mut cols,
                m as isize,
                1,
            );
            for b in chunk.clone() {
                col2im(&cols, m, (b - chunk.start) * p, &g, out.sample_mut(b));
            }
        }
        if let Some(bias) = &self.bias {
            let plane = g.h * g.w;
            for b in 0..n {
                for (chunk, &v) in out.sample_mut(b).chunks_mut(plane).zip(bias.data()) {
                    chunk.iter_mut().for_each(|o| *o += v);
                }
            }
        }
        Ok(out)
    }

    fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let [n, ic, h, w] = x.shape();
        let g = self.geom(h, w)?;
        let (oc, k, p) = (self.spec.out_channels, g.rows(), g.positions());
        if dy.shape() != [n, oc, g.h, g.w] {
            return Err(Error::shape(
                "transposed conv upstream gradient",
                [n, oc, g.h, g.w],
                dy.shape(),
            ));
        }
        let np = n * p;
        let x_cm = to_channel_major(x.data(), n, ic, p);
        let mut dx_cm = vec![T::zero(); ic * np];
        let mut dw = Tensor::zeros(self.weight.shape());
        let mut dcols = Vec::new();
        for chunk in sample_chunks(n, k * p) {
            let m = chunk.len() * p;
            let beta = if chunk.start == 0 {
                T::zero()
            } else {
                T::one()
            };
            dcols.resize(k * m, T::zero());
            for b in chunk.clone() {
                im2col(dy.sample(b), &g, &mut dcols, m, (b - chunk.start) * p);
            }
            T::gemm(
                ic,
                k,
                m,
                T::one(),
                self.weight.data(),
                k as isize,
                1,
                &dcols,
                m as isize,
                1,
                T::zero(),
                &mut dx_cm[chunk.start * p..],
                np as isize,
                1,
            );
            T::gemm(
                ic,
                m,
                k,
                T::one(),
                &x_cm[chunk.start * p..],
                np as isize,
                1,
                &dcols,
                1,
                m as isize,
                beta,
                dw.data_mut(),
                k as isize,
                1,
            );
        }
        let plane = g.h * g.w;
        let db = self.bias.as_ref().map(|bias| {
            let mut db = Tensor::zeros(bias.shape());
            for b in 0..n {
                for (o, chunk) in dy.sample(b).chunks(plane).enumerate() {
                    db.data_mut()[o] += chunk.iter().copied().sum();
                }
            }
            db
        });
        let dx = Tensor::from_vec([n, ic, h, w], from_channel_major(&dx_cm, n, ic, p))?;
        Ok((dx, std::iter::once(dw).chain(db).collect()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d<T> {
    pub spec: LayerSpec,
    /// `[channels, 1, 1, 1]`
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    /// Number of training batches folded into the running statistics.
    pub tracked: u64,
    pub momentum: T,
    pub eps: T,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            spec: LayerSpec::batchnorm(channels),
            gamma: Tensor::full([channels, 1, 1, 1], T::one()),
            beta: Tensor::zeros([channels, 1, 1, 1]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            tracked: 0,
            momentum: T::of(0.1),
            eps: T::of(1e-5),
        }
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> (Tensor<T>, Cache<T>) {
        let [n, c, h, w] = x.shape();
        let plane = h * w;
        let m = n * plane;
        let mf = T::of(m as f64);
        let mut y = Tensor::zeros(x.shape());
        let mut xhat = Tensor::zeros(x.shape());
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let mut mean = T::zero();
            for b in 0..n {
                let off = (b * c + ch) * plane;
                mean += x.data()[off..off + plane].iter().copied().sum::<T>();
            }
            mean /= mf;
            let mut var = T::zero();
            for b in 0..n {
                let off = (b * c + ch) * plane;
                for &v in &x.data()[off..off + plane] {
                    var += (v - mean) * (v - mean);
                }
            }
            var /= mf;
            let is = T::one() / (var + self.eps).sqrt();
            inv_std[ch] = is;
            let (g, bt) = (self.gamma.data()[ch], self.beta.data()[ch]);
            for b in 0..n {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    let xh = (x.data()[i] - mean) * is;
                    xhat.data_mut()[i] = xh;
                    y.data_mut()[i] = g * xh + bt;
                }
            }
            let unbiased = if m > 1 {
                var * mf / T::of((m - 1) as f64)
            } else {
                var
            };
            let mom = self.momentum;
            self.running_mean[ch] = (T::one() - mom) * self.running_mean[ch] + mom * mean;
            self.running_var[ch] = (T::one() - mom) * self.running_var[ch] + mom * unbiased;
        }
        self.tracked += 1;
        (y, Cache::BatchNorm { xhat, inv_std })
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if self.tracked == 0 {
            return Err(Error::UntrainedBatchNorm);
        }
        let [n, c, h, w] = x.shape();
        let plane = h * w;
        let mut y = x.clone();
        for b in 0..n {
            for ch in 0..c {
                let is = T::one() / (self.running_var[ch] + self.eps).sqrt();
                let (g, bt, mu) = (
                    self.gamma.data()[ch],
                    self.beta.data()[ch],
                    self.running_mean[ch],
                );
                let off = (b * c + ch) * plane;
                for v in &mut y.data_mut()[off..off + plane] {
                    *v = g * (*v - mu) * is + bt;
                }
            }
        }
        Ok(y)
    }

    fn backward(
        &self,
        dy: &Tensor<T>,
        xhat: &Tensor<T>,
        inv_std: &[T],
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        if dy.shape() != xhat.shape() {
            return Err(Error::shape(
                "batchnorm upstream gradient",
                xhat.shape(),
                dy.shape(),
            ));
        }
        let [n, c, h, w] = dy.shape();
        let plane = h * w;
        let mf = T::of((n * plane) as f64);
        let mut dx = Tensor::zeros(dy.shape());
        let mut dgamma = Tensor::zeros(self.gamma.shape());
        let mut dbeta = Tensor::zeros(self.beta.shape());
        for ch in 0..c {
            let g = self.gamma.data()[ch];
            let (mut sum_dy, mut sum_dy_xh) = (T::zero(), T::zero());
            for b in 0..n {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    sum_dy += dy.data()[i];
                    sum_dy_xh += dy.data()[i] * xhat.data()[i];
                }
            }
            dgamma.data_mut()[ch] = sum_dy_xh;
            dbeta.data_mut()[ch] = sum_dy;
            let scale = g * inv_std[ch] / mf;
            for b in 0..n {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    dx.data_mut()[i] =
                        scale * (mf * dy.data()[i] - sum_dy - xhat.data()[i] * sum_dy_xh);
                }
            }
        }
        Ok((dx, vec![dgamma, dbeta]))
    }
}

/// Activations retained by a training-mode forward pass.
#[derive(Clone, Debug)]
pub enum Cache<T> {
    Input(Tensor<T>),
    MaxPool {
        argmax: Vec<usize>,
        in_shape: [usize; 4],
    },
    Upsample {
        in_shape: [usize; 4],
    },
    BatchNorm {
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    Output(Tensor<T>),
    /// Inference passes keep nothing; backward through them is an error.
    Inference,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    ConvTransposed(ConvTranspose2d<T>),
    MaxPool(LayerSpec),
    Upsample(LayerSpec),
    BatchNorm(BatchNorm2d<T>),
    Relu(LayerSpec),
    Sigmoid(LayerSpec),
}

impl<T: Scalar> Layer<T> {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv(l) => l.spec,
            Layer::ConvTransposed(l) => l.spec,
            Layer::BatchNorm(l) => l.spec,
            Layer::MaxPool(s) | Layer::Upsample(s) | Layer::Relu(s) | Layer::Sigmoid(s) => *s,
        }
    }

    pub fn name(&self) -> String {
        let s = self.spec();
        match s.kind {
            LayerKind::Conv | LayerKind::ConvTransposed => format!(
                "{:?}({}->{}, k{}x{}, s{})",
                s.kind, s.in_channels, s.out_channels, s.kernel.0, s.kernel.1, s.stride.0
            ),
            kind => format!("{kind:?}({})", s.in_channels),
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::Conv(l) => std::iter::once(&l.weight).chain(&l.bias).collect(),
            Layer::ConvTransposed(l) => std::iter::once(&l.weight).chain(&l.bias).collect(),
            Layer::BatchNorm(l) => vec![&l.gamma, &l.beta],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Conv(l) => std::iter::once(&mut l.weight).chain(&mut l.bias).collect(),
            Layer::ConvTransposed(l) => std::iter::once(&mut l.weight).chain(&mut l.bias).collect(),
            Layer::BatchNorm(l) => vec![&mut l.gamma, &mut l.beta],
            _ => Vec::new(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        self.spec().out_shape(x.sample_shape()).map(|_| ())
    }

    /// Inference-mode forward pass; batch norm uses running statistics.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        match self {
            Layer::Conv(l) => l.forward(x),
            Layer::ConvTransposed(l) => l.forward(x),
            Layer::MaxPool(_) => Ok(maxpool(x).0),
            Layer::Upsample(_) => Ok(upsample(x)),
            Layer::BatchNorm(l) => l.infer(x),
            Layer::Relu(_) => Ok(x.map(|v| if v > T::zero() { v } else { T::zero() })),
            Layer::Sigmoid(_) => Ok(x.map(sigmoid)),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Cache<T>)> {
        if mode == Mode::Infer {
            return Ok((self.infer(x)?, Cache::Inference));
        }
        self.check_input(x)?;
        Ok(match self {
            Layer::Conv(l) => (l.forward(x)?, Cache::Input(x.clone())),
            Layer::ConvTransposed(l) => (l.forward(x)?, Cache::Input(x.clone())),
            Layer::MaxPool(_) => {
                let (y, argmax) = maxpool(x);
                (
                    y,
                    Cache::MaxPool {
                        argmax,
                        in_shape: x.shape(),
                    },
                )
            }
            Layer::Upsample(_) => (
                upsample(x),
                Cache::Upsample {
                    in_shape: x.shape(),
                },
            ),
            Layer::BatchNorm(l) => l.forward_train(x),
            Layer::Relu(_) => {
                let y = x.map(|v| if v > T::zero() { v } else { T::zero() });
                (y.clone(), Cache::Output(y))
            }
            Layer::Sigmoid(_) => {
                let y = x.map(sigmoid);
                (y.clone(), Cache::Output(y))
            }
        })
    }

    /// Returns the input gradient and one gradient per entry of [`Layer::params`].
    pub fn backward(
        &self,
        dy: &Tensor<T>,
        cache: &Cache<T>,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let missing = || Error::MissingCache { layer: self.name() };
        match (self, cache) {
            (Layer::Conv(l), Cache::Input(x)) => l.backward(x, dy),
            (Layer::ConvTransposed(l), Cache::Input(x)) => l.backward(x, dy),
            (Layer::MaxPool(_), Cache::MaxPool { argmax, in_shape }) => {
                if dy.len() != argmax.len() {
                    return Err(Error::shape(
                        "maxpool upstream gradient",
                        argmax.len(),
                        dy.len(),
                    ));
                }
                let mut dx = Tensor::zeros(*in_shape);
                for (&idx, &g) in argmax.iter().zip(dy.data()) {
                    dx.data_mut()[idx] += g;
                }
                Ok((dx, Vec::new()))
            }
            (Layer::Upsample(_), Cache::Upsample { in_shape }) => {
                let [n, c, h, w] = *in_shape;
                if dy.shape() != [n, c, 2 * h, 2 * w] {
                    return Err(Error::shape(
                        "upsample upstream gradient",
                        [n, c, 2 * h, 2 * w],
                        dy.shape(),
                    ));
                }
                let mut dx = Tensor::zeros(*in_shape);
                let ow = 2 * w;
                for nc in 0..n * c {
                    let src = &dy.data()[nc * 4 * h * w..(nc + 1) * 4 * h * w];
                    let dst = &mut dx.data_mut()[nc * h * w..(nc + 1) * h * w];
                    for i in 0..2 * h {
                        for j in 0..ow {
                            dst[(i / 2) * w + j / 2] += src[i * ow + j];
                        }
                    }
                }
                Ok((dx, Vec::new()))
            }
            (Layer::BatchNorm(l), Cache::BatchNorm { xhat, inv_std }) => {
                l.backward(dy, xhat, inv_std)
            }
            (Layer::Relu(_), Cache::Output(y)) => {
                if dy.shape() != y.shape() {
                    return Err(Error::shape(
                        "relu upstream gradient",
                        y.shape(),
                        dy.shape(),
                    ));
                }
                let data = dy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                Ok((Tensor::from_vec(dy.shape(), data)?, Vec::new()))
            }
            (Layer::Sigmoid(_), Cache::Output(y)) => {
                if dy.shape() != y.shape() {
                    return Err(Error::shape(
                        "sigmoid upstream gradient",
                        y.shape(),
                        dy.shape(),
                    ));
                }
                let data = dy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &v)| g * v * (T::one() - v))
                    .collect();
                Ok((Tensor::from_vec(dy.shape(), data)?, Vec::new()))
            }
            _ => Err(missing()),
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// 2x2 max pooling with stride 2 (floor). Ties go to the first position in
/// row-major order.
fn maxpool<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros([n, c, oh, ow]);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for nc in 0..n * c {
        let base = nc * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if x.data()[idx] > x.data()[best] {
                        best = idx;
                    }
                }
                y.data_mut()[(nc * oh + i) * ow + j] = x.data()[best];
                argmax.push(best);
            }
        }
    }
    (y, argmax)
}

/// Nearest-neighbour upsampling by 2.
fn upsample<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = Tensor::zeros([n, c, oh, ow]);
    for nc in 0..n * c {
        let src = &x.data()[nc * h * w..(nc + 1) * h * w];
        let dst = &mut y.data_mut()[nc * oh * ow..(nc + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                dst[i * ow + j] = src[(i / 2) * w + j / 2];
            }
        }
    }
    y
}
