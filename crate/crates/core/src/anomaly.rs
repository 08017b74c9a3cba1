//! Voxel-wise joint reconstruction error, the control-population abnormality
//! threshold and binary anomaly maps.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{AeModel, SaeModel, PATCH_SIZE};
use crate::nn::Tensor;
use crate::sampling::{eligible_centers, patch_at, slice_band};
use crate::volume::{load_mvol, save_mvol, BrainMask, Volume};

/// Patches reconstructed per inference batch.
const PATCH_BATCH: usize = 512;
/// Slices reconstructed per inference batch.
const SLICE_BATCH: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Ae,
    Sae,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Ae => "ae",
            ModelKind::Sae => "sae",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Ae => "AE",
            ModelKind::Sae => "SAE",
        }
    }
}

/// How patch reconstructions are assembled into a voxel map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum SaeAggregation {
    /// Each eligible voxel gets the error of its own centered patch.
    Center,
    /// Patches on a stride grid; each voxel averages over covering patches.
    OverlapMean { stride: usize },
}

/// `sqrt(sum_c (x_c - y_c)^2)`
pub fn joint_error(x: &[f32], y: &[f32]) -> Result<f32> {
    if x.len() != y.len() {
        return Err(Error::shape("joint error channels", x.len(), y.len()));
    }
    Ok(x.iter()
        .zip(y)
        .map(|(&a, &b)| ((a - b) as f64).powi(2))
        .sum::<f64>()
        .sqrt() as f32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorMap {
    pub subject_id: String,
    pub dims: [usize; 3],
    pub model: ModelKind,
    pub model_id: String,
    /// `[z][y][x]`; zero outside coverage.
    pub joint_error: Vec<f32>,
    pub coverage: Vec<bool>,
}

impl ErrorMap {
    fn empty(volume: &Volume, model: ModelKind, model_id: &str) -> Self {
        let n = volume.voxels();
        Self {
            subject_id: volume.subject_id.clone(),
            dims: volume.dims,
            model,
            model_id: model_id.to_string(),
            joint_error: vec![0.0; n],
            coverage: vec![false; n],
        }
    }

    pub fn covered(&self) -> usize {
        self.coverage.iter().filter(|&&c| c).count()
    }

    pub fn covered_values(&self) -> impl Iterator<Item = f32> + '_ {
        self.joint_error
            .iter()
            .zip(&self.coverage)
            .filter(|(_, &c)| c)
            .map(|(&e, _)| e)
    }

    /// Mean error over covered voxels where `select` is true, or `None` if
    /// there are none.
    pub fn mean_where(&self, select: &[bool]) -> Option<f64> {
        let (mut sum, mut n) = (0.0, 0usize);
        for ((&e, &c), &s) in self.joint_error.iter().zip(&self.coverage).zip(select) {
            if c && s {
                sum += e as f64;
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }

    /// One-channel volume with NaN outside coverage.
    pub fn to_volume(&self, voxel_size_mm: [f32; 3]) -> Result<Volume> {
        let data = self
            .joint_error
            .iter()
            .zip(&self.coverage)
            .map(|(&e, &c)| if c { e } else { f32::NAN })
            .collect();
        Volume::new(
            self.subject_id.clone(),
            self.dims,
            voxel_size_mm,
            vec!["joint_error".into()],
            data,
        )
    }

    pub fn from_volume(volume: &Volume, model: ModelKind, model_id: &str) -> Result<Self> {
        if volume.channels != 1 {
            return Err(Error::shape("error map channels", 1, volume.channels));
        }
        Ok(Self {
            subject_id: volume.subject_id.clone(),
            dims: volume.dims,
            model,
            model_id: model_id.to_string(),
            joint_error: volume
                .data
                .iter()
                .map(|v| if v.is_nan() { 0.0 } else { *v })
                .collect(),
            coverage: volume.data.iter().map(|v| !v.is_nan()).collect(),
        })
    }

    /// Writes `<stem>.mvol` and a `<stem>.json` sidecar.
    pub fn save(&self, dir: &Path, stem: &str, voxel_size_mm: [f32; 3]) -> Result<()> {
        save_mvol(
            &self.to_volume(voxel_size_mm)?,
            &dir.join(format!("{stem}.mvol")),
        )?;
        let meta = ErrorMapMeta {
            subject_id: self.subject_id.clone(),
            model: self.model,
            model_id: self.model_id.clone(),
            covered_voxels: self.covered(),
        };
        write_json(&dir.join(format!("{stem}.json")), &meta)
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let meta: ErrorMapMeta = read_json(&dir.join(format!("{stem}.json")))?;
        Self::from_volume(
            &load_mvol(&dir.join(format!("{stem}.mvol")))?,
            meta.model,
            &meta.model_id,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ErrorMapMeta {
    subject_id: String,
    model: ModelKind,
    model_id: String,
    covered_voxels: usize,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

fn check_mask(volume: &Volume, mask: &BrainMask) -> Result<()> {
    if mask.dims != volume.dims {
        return Err(Error::shape("brain mask", volume.dims, mask.dims));
    }
    Ok(())
}

/// Reconstructs the central `slice_count` axial slices and scores every
/// masked voxel of that band.
pub fn error_volume_ae(
    model: &AeModel<f32>,
    volume: &Volume,
    mask: &BrainMask,
    slice_count: usize,
    model_id: &str,
) -> Result<ErrorMap> {
    let [_, h, w] = volume.dims;
    let expected = [volume.channels, h, w];
    if model.arch.input != expected {
        return Err(Error::shape(
            "volume slices vs AE checkpoint",
            model.arch.input,
            expected,
        ));
    }
    slice_error_map(volume, mask, slice_count, ModelKind::Ae, model_id, |x| {
        model.reconstruct(x)
    })
}

/// Slice-wise error map for any reconstructor of `[n, c, h, w]` batches.
pub fn slice_error_map(
    volume: &Volume,
    mask: &BrainMask,
    slice_count: usize,
    kind: ModelKind,
    model_id: &str,
    reconstruct: impl Fn(&Tensor<f32>) -> Result<Tensor<f32>>,
) -> Result<ErrorMap> {
    check_mask(volume, mask)?;
    let [_, h, w] = volume.dims;
    let band: Vec<usize> = slice_band(volume.dims[0], slice_count)?.collect();
    let mut map = ErrorMap::empty(volume, kind, model_id);
    let plane = h * w;
    let c = volume.channels;
    for chunk in band.chunks(SLICE_BATCH) {
        let mut data = Vec::with_capacity(chunk.len() * c * plane);
        for &z in chunk {
            for ch in 0..c {
                data.extend_from_slice(volume.plane(ch, z));
            }
        }
        let x = Tensor::from_vec([chunk.len(), c, h, w], data)?;
        let y = reconstruct(&x)?;
        if y.shape() != x.shape() {
            return Err(Error::shape("slice reconstruction", x.shape(), y.shape()));
        }
        for (b, &z) in chunk.iter().enumerate() {
            let (xs, ys) = (x.sample(b), y.sample(b));
            for p in 0..plane {
                let v = z * plane + p;
                if mask.mask[v] {
                    let sq: f64 = (0..c)
                        .map(|ch| ((xs[ch * plane + p] - ys[ch * plane + p]) as f64).powi(2))
                        .sum();
                    map.joint_error[v] = sq.sqrt() as f32;
                    map.coverage[v] = true;
                }
            }
        }
    }
    Ok(map)
}

/// Scores voxels from SAE patch reconstructions. Centers are the voxels whose
/// 15x15 in-plane window lies inside the mask.
pub fn error_volume_sae(
    model: &SaeModel<f32>,
    volume: &Volume,
    mask: &BrainMask,
    aggregation: SaeAggregation,
    model_id: &str,
) -> Result<ErrorMap> {
    if model.arch.channels != volume.channels {
        return Err(Error::shape(
            "volume channels vs SAE checkpoint",
            model.arch.channels,
            volume.channels,
        ));
    }
    patch_error_map(volume, mask, aggregation, ModelKind::Sae, model_id, |x| {
        model.reconstruct(x)
    })
}

/// Patch-wise error map for any reconstructor of `[n, c, 15, 15]` batches.
pub fn patch_error_map(
    volume: &Volume,
    mask: &BrainMask,
    aggregation: SaeAggregation,
    kind: ModelKind,
    model_id: &str,
    reconstruct: impl Fn(&Tensor<f32>) -> Result<Tensor<f32>>,
) -> Result<ErrorMap> {
    check_mask(volume, mask)?;
    let p = PATCH_SIZE;
    let half = p / 2;
    let eligible = eligible_centers(mask, p);
    let centers: Vec<[usize; 3]> = match aggregation {
        SaeAggregation::Center => eligible,
        SaeAggregation::OverlapMean { stride } => {
            if stride == 0 {
                return Err(Error::arg("stride", "must be positive"));
            }
            eligible
                .into_iter()
                .filter(|c| {
                    (c[1] - half).is_multiple_of(stride) && (c[2] - half).is_multiple_of(stride)
                })
                .collect()
        }
    };
    if centers.is_empty() {
        return Err(Error::NoEligibleCenter);
    }
    let mut map = ErrorMap::empty(volume, kind, model_id);
    let mut counts = vec![0u32; volume.voxels()];
    let c = volume.channels;
    let area = p * p;
    for chunk in centers.chunks(PATCH_BATCH) {
        let mut data = Vec::with_capacity(chunk.len() * c * area);
        for &center in chunk {
            data.extend(patch_at(volume, center, p)?);
        }
        let x = Tensor::from_vec([chunk.len(), c, p, p], data)?;
        let y = reconstruct(&x)?;
        if y.shape() != x.shape() {
            return Err(Error::shape("patch reconstruction", x.shape(), y.shape()));
        }
        for (b, &[z, cy, cx]) in chunk.iter().enumerate() {
            let (xs, ys) = (x.sample(b), y.sample(b));
            let err = |k: usize| -> f32 {
                let sq: f64 = (0..c)
                    .map(|ch| ((xs[ch * area + k] - ys[ch * area + k]) as f64).powi(2))
                    .sum();
                sq.sqrt() as f32
            };
            match aggregation {
                SaeAggregation::Center => {
                    let v = volume.voxel_index(z, cy, cx);
                    map.joint_error[v] = err(half * p + half);
                    counts[v] = 1;
                }
                SaeAggregation::OverlapMean { .. } => {
                    for dy in 0..p {
                        for dx in 0..p {
                            let v = volume.voxel_index(z, cy + dy - half, cx + dx - half);
                            map.joint_error[v] += err(dy * p + dx);
                            counts[v] += 1;
                        }
                    }
                }
            }
        }
    }
    for ((e, cov), &n) in map
        .joint_error
        .iter_mut()
        .zip(map.coverage.iter_mut())
        .zip(&counts)
    {
        if n > 0 {
            *e /= n as f32;
            *cov = true;
        }
    }
    Ok(map)
}

/// Linear interpolation between order statistics: with sorted values `x` and
/// `h = (n - 1) q`, returns `x[floor h] + (h - floor h) (x[floor h + 1] - x[floor h])`.
pub fn quantile(values: &mut [f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::arg("quantile pool", "empty"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::arg("q", format!("{q} outside [0, 1]")));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite {
            context: "quantile pool".into(),
        });
    }
    let h = (values.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let (_, &mut x_lo, upper) = values.select_nth_unstable_by(lo, f64::total_cmp);
    let x_hi = upper.iter().copied().min_by(f64::total_cmp).unwrap_or(x_lo);
    Ok(x_lo + (h - lo as f64) * (x_hi - x_lo))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbnormalityThreshold {
    pub q: f64,
    pub value: f64,
    pub pool_size: usize,
    pub model: ModelKind,
    pub model_id: String,
    /// Subjects whose covered voxels form the pool.
    pub population: Vec<String>,
}

/// The `q` quantile of all covered voxel errors pooled over `controls`.
pub fn abnormality_threshold(controls: &[ErrorMap], q: f64) -> Result<AbnormalityThreshold> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::arg(
            "q",
            format!("{q} must lie strictly between 0 and 1"),
        ));
    }
    let first = controls
        .first()
        .ok_or_else(|| Error::arg("control maps", "empty"))?;
    if let Some(m) = controls
        .iter()
        .find(|m| m.model_id != first.model_id || m.model != first.model)
    {
        return Err(Error::arg(
            "control maps",
            format!("{} comes from a different model", m.subject_id),
        ));
    }
    let mut pool: Vec<f64> = controls
        .iter()
        .flat_map(|m| m.covered_values().map(f64::from))
        .collect();
    if pool.is_empty() {
        return Err(Error::arg("control maps", "no covered voxels"));
    }
    Ok(AbnormalityThreshold {
        q,
        value: quantile(&mut pool, q)?,
        pool_size: pool.len(),
        model: first.model,
        model_id: first.model_id.clone(),
        population: controls.iter().map(|m| m.subject_id.clone()).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryAnomalyMap {
    pub subject_id: String,
    pub dims: [usize; 3],
    pub abnormal: Vec<bool>,
    pub coverage: Vec<bool>,
    pub threshold: f64,
}

impl BinaryAnomalyMap {
    pub fn abnormal_count(&self) -> usize {
        self.abnormal.iter().filter(|&&a| a).count()
    }

    /// One-channel volume: 1 abnormal, 0 normal, NaN outside coverage.
    pub fn to_volume(&self, voxel_size_mm: [f32; 3]) -> Result<Volume> {
        let data = self
            .abnormal
            .iter()
            .zip(&self.coverage)
            .map(|(&a, &c)| match (c, a) {
                (false, _) => f32::NAN,
                (true, true) => 1.0,
                (true, false) => 0.0,
            })
            .collect();
        Volume::new(
            self.subject_id.clone(),
            self.dims,
            voxel_size_mm,
            vec!["abnormal".into()],
            data,
        )
    }

    pub fn from_volume(volume: &Volume, threshold: f64) -> Result<Self> {
        if volume.channels != 1 {
            return Err(Error::shape("binary map channels", 1, volume.channels));
        }
        Ok(Self {
            subject_id: volume.subject_id.clone(),
            dims: volume.dims,
            abnormal: volume.data.iter().map(|&v| v == 1.0).collect(),
            coverage: volume.data.iter().map(|v| !v.is_nan()).collect(),
            threshold,
        })
    }
}

/// A covered voxel is abnormal iff its error is strictly above `threshold`.
pub fn binarize(map: &ErrorMap, threshold: f64) -> BinaryAnomalyMap {
    BinaryAnomalyMap {
        subject_id: map.subject_id.clone(),
        dims: map.dims,
        abnormal: map
            .joint_error
            .iter()
            .zip(&map.coverage)
            .map(|(&e, &c)| c && e as f64 > threshold)
            .collect(),
        coverage: map.coverage.clone(),
        threshold,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{AeArchitecture, SaeArchitecture};
    use crate::nn::Layer;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(dims: [usize; 3], seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 2 * dims.iter().product::<usize>();
        Volume::new(
            "s",
            dims,
            [1.0; 3],
            vec!["FA".into(), "MD".into()],
            (0..n).map(|_| rng.gen()).collect(),
        )
        .unwrap()
    }

    fn full_mask(dims: [usize; 3]) -> BrainMask {
        BrainMask::new(dims, vec![true; dims.iter().product()]).unwrap()
    }

    fn map_from(values: Vec<f32>) -> ErrorMap {
        let n = values.len();
        ErrorMap {
            subject_id: "s".into(),
            dims: [1, 1, n],
            model: ModelKind::Ae,
            model_id: "m".into(),
            joint_error: values,
            coverage: vec![true; n],
        }
    }

    #[test]
    fn perfect_reconstructor_gives_zero_maps() {
        let dims = [5, 18, 17];
        let v = random_volume(dims, 8);
        let mask = full_mask(dims);
        let id = |x: &Tensor<f32>| Ok(x.clone());
        let ae = slice_error_map(&v, &mask, 3, ModelKind::Ae, "id", id).unwrap();
        assert_eq!(ae.covered(), 3 * 18 * 17);
        for agg in [
            SaeAggregation::Center,
            SaeAggregation::OverlapMean { stride: 2 },
        ] {
            let m = patch_error_map(&v, &mask, agg, ModelKind::Sae, "id", id).unwrap();
            assert!(m.covered() > 0);
            assert!(m.covered_values().all(|e| e == 0.0));
        }
        assert!(ae.covered_values().all(|e| e == 0.0));
    }

    #[test]
    fn joint_error_examples() {
        assert_eq!(joint_error(&[3.0, 0.0], &[0.0, 4.0]).unwrap(), 5.0);
        assert_eq!(joint_error(&[0.2, 0.7], &[0.2, 0.7]).unwrap(), 0.0);
        assert_eq!(joint_error(&[0.25], &[0.75]).unwrap(), 0.5);
        assert!(joint_error(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn quantile_examples() {
        let mut v: Vec<f64> = (1..=100).map(f64::from).collect();
        v.reverse();
        assert!((quantile(&mut v, 0.98).unwrap() - 98.02).abs() < 1e-12);
        let mut same = vec![0.3; 17];
        assert_eq!(quantile(&mut same, 0.98).unwrap(), 0.3);
        assert!(abnormality_threshold(&[map_from(vec![1.0, 2.0])], 1.0).is_err());
        assert!(abnormality_threshold(&[], 0.98).is_err());
    }

    #[test]
    fn all_equal_pool_marks_nothing() {
        let m = map_from(vec![0.4; 50]);
        let t = abnormality_threshold(std::slice::from_ref(&m), 0.98).unwrap();
        assert_eq!(t.value, 0.4f32 as f64);
        assert_eq!(binarize(&m, t.value).abnormal_count(), 0);
    }

    #[test]
    fn binarize_extremes() {
        let m = map_from(vec![0.1, 0.5, 0.9]);
        assert_eq!(binarize(&m, 1e9).abnormal_count(), 0);
        assert_eq!(binarize(&m, -1.0).abnormal_count(), 3);
        assert_eq!(binarize(&m, 0.5).abnormal, vec![false, false, true]);
    }

    #[test]
    fn pooled_control_fraction_is_two_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let maps: Vec<ErrorMap> = (0..5)
            .map(|_| map_from((0..2000).map(|_| rng.gen::<f32>()).collect()))
            .collect();
        let t = abnormality_threshold(&maps, 0.98).unwrap();
        assert_eq!(t.pool_size, 10_000);
        let above: usize = maps
            .iter()
            .map(|m| binarize(m, t.value).abnormal_count())
            .sum();
        // distinct values: h = 9999 * 0.98 = 9799.02, so exactly the top 200 exceed it
        assert_eq!(above, 200);
    }

    #[test]
    fn ae_coverage_is_band_intersect_mask() {
        let dims = [12, 16, 12];
        let v = random_volume(dims, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mask =
            BrainMask::new(dims, (0..v.voxels()).map(|_| rng.gen_bool(0.7)).collect()).unwrap();
        let arch = AeArchitecture {
            input: [2, 16, 12],
            channels: vec![4, 4, 4, 4, 4],
        };
        let mut model = AeModel::<f32>::new(arch, 0).unwrap();
        model.forward(&Tensor::full([2, 2, 16, 12], 0.5)).unwrap();
        let map = error_volume_ae(&model, &v, &mask, 6, "ae").unwrap();
        let oracle = (3..9)
            .map(|z| (0..16 * 12).filter(|&p| mask.mask[z * 192 + p]).count())
            .sum::<usize>();
        assert_eq!(map.covered(), oracle);
        assert!(map.coverage.iter().zip(&mask.mask).all(|(&c, &m)| !c || m));
        // recompute one voxel directly
        let slice: Vec<f32> = (0..2).flat_map(|c| v.plane(c, 4).to_vec()).collect();
        let y = model
            .reconstruct(&Tensor::from_vec([1, 2, 16, 12], slice).unwrap())
            .unwrap();
        let p = 5 * 12 + 7;
        let direct = joint_error(
            &[v.get(0, 4, 5, 7), v.get(1, 4, 5, 7)],
            &[y.data()[p], y.data()[192 + p]],
        )
        .unwrap();
        if mask.at(4, 5, 7) {
            assert_eq!(map.joint_error[v.voxel_index(4, 5, 7)], direct);
        }
        let wrong = random_volume([12, 16, 10], 1);
        assert!(error_volume_ae(&model, &wrong, &full_mask([12, 16, 10]), 6, "ae").is_err());
    }

    #[test]
    fn ae_map_is_per_subject() {
        let dims = [6, 8, 8];
        let arch = AeArchitecture {
            input: [2, 8, 8],
            channels: vec![4, 4, 4, 4, 4],
        };
        let mut model = AeModel::<f32>::new(arch, 0).unwrap();
        model.forward(&Tensor::full([2, 2, 8, 8], 0.5)).unwrap();
        let (a, b) = (random_volume(dims, 1), random_volume(dims, 2));
        let mask = full_mask(dims);
        let first = error_volume_ae(&model, &a, &mask, 4, "m").unwrap();
        error_volume_ae(&model, &b, &mask, 4, "m").unwrap();
        assert_eq!(error_volume_ae(&model, &a, &mask, 4, "m").unwrap(), first);
    }

    #[test]
    fn sae_zero_output_gives_known_errors() {
        // zero final layer: reconstruction is 0.5 everywhere
        let mut model = SaeModel::<f32>::new(SaeArchitecture::default(), 0).unwrap();
        if let Some(Layer::Conv(l)) = model
            .decoder
            .layers
            .iter_mut()
            .rev()
            .find(|l| matches!(l, Layer::Conv(_)))
        {
            l.weight.fill(0.0);
            l.bias.as_mut().unwrap().fill(0.0);
        }
        let dims = [2, 17, 16];
        let v = random_volume(dims, 4);
        let mask = full_mask(dims);
        let center = error_volume_sae(&model, &v, &mask, SaeAggregation::Center, "s").unwrap();
        assert_eq!(center.covered(), 2 * 3 * 2);
        let (z, y, x) = (1, 8, 8);
        let oracle = joint_error(&v.voxel_channels(z, y, x), &[0.5, 0.5]).unwrap();
        assert_eq!(center.joint_error[v.voxel_index(z, y, x)], oracle);
        // disjoint tiling: every covered voxel belongs to exactly one patch
        let tiled = error_volume_sae(
            &model,
            &v,
            &mask,
            SaeAggregation::OverlapMean { stride: 15 },
            "s",
        )
        .unwrap();
        assert_eq!(tiled.covered(), 2 * 225);
        for z in 0..2 {
            for y in 0..15 {
                for x in 0..15 {
                    let direct = joint_error(&v.voxel_channels(z, y, x), &[0.5, 0.5]).unwrap();
                    assert_eq!(tiled.joint_error[v.voxel_index(z, y, x)], direct);
                }
            }
        }
    }

    #[test]
    fn single_center_modes_agree() {
        let dims = [1, 15, 15];
        let v = random_volume(dims, 3);
        let model = SaeModel::<f32>::standard(1).unwrap();
        let mask = full_mask(dims);
        let a = error_volume_sae(&model, &v, &mask, SaeAggregation::Center, "s").unwrap();
        let b = error_volume_sae(
            &model,
            &v,
            &mask,
            SaeAggregation::OverlapMean { stride: 1 },
            "s",
        )
        .unwrap();
        let c = v.voxel_index(0, 7, 7);
        assert_eq!(a.joint_error[c], b.joint_error[c]);
        assert_eq!(a.covered(), 1);
    }

    #[test]
    fn map_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = map_from(vec![0.1, 0.2, 0.3, 0.4]);
        m.coverage[1] = false;
        m.joint_error[1] = 0.0;
        m.save(dir.path(), "s.ae", [1.5; 3]).unwrap();
        assert_eq!(ErrorMap::load(dir.path(), "s.ae").unwrap(), m);
        let b = binarize(&m, 0.25);
        let back = BinaryAnomalyMap::from_volume(&b.to_volume([1.5; 3]).unwrap(), 0.25).unwrap();
        assert_eq!(back, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn quantile_matches_sort_oracle(values in proptest::collection::vec(-1e3f64..1e3, 1..300), q in 0.0f64..1.0) {
            let mut sorted = values.clone();
            sorted.sort_by(f64::total_cmp);
            let h = (sorted.len() - 1) as f64 * q;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(sorted.len() - 1);
            let oracle = sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]);
            let mut work = values;
            prop_assert_eq!(quantile(&mut work, q).unwrap(), oracle);
        }

        #[test]
        fn abnormal_count_monotone_in_threshold(values in proptest::collection::vec(0.0f32..1.0, 1..200), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let m = map_from(values);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(binarize(&m, hi).abnormal_count() <= binarize(&m, lo).abnormal_count());
        }

        #[test]
        fn scaling_commutes_with_binarization(values in proptest::collection::vec(0.0f32..1.0, 1..100), k in 0.5f32..4.0, t in 0.0f64..1.0) {
            let x: Vec<f32> = values.iter().map(|v| v * 2.0).collect();
            let y: Vec<f32> = values.iter().map(|v| v * 0.5).collect();
            let e = joint_error(&x, &y).unwrap();
            let xs: Vec<f32> = x.iter().map(|v| v * k).collect();
            let ys: Vec<f32> = y.iter().map(|v| v * k).collect();
            let ek = joint_error(&xs, &ys).unwrap();
            prop_assert!((ek as f64 - (k * e) as f64).abs() <= 1e-5 * (1.0 + (k * e) as f64));
            let m = map_from(values.clone());
            let scaled = map_from(values.iter().map(|v| v * k).collect());
            // away from float ties the abnormal sets coincide
            let t = (t as f32 + 1e-3) as f64;
            let plain = binarize(&m, t).abnormal;
            let big = binarize(&scaled, t * k as f64).abnormal;
            let ties = values.iter().filter(|&&v| ((v as f64) - t).abs() < 1e-5).count();
            if ties == 0 {
                prop_assert_eq!(plain, big);
            }
        }
    }
}
