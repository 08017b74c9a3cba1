//! Multi-channel volumes, brain masks, subject metadata and the synthetic
//! phantom cohort.

pub mod manifest;
pub mod mvol;
pub mod phantom;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use manifest::{load_manifest, save_manifest, ManifestEntry};
pub use mvol::{load_mvol, save_mvol};
pub use phantom::{synth_cohort, synth_subject, PhantomCohort, PhantomSpec, PhantomTruth};

/// Canonical grid of the spatially normalized parameter maps.
pub const CANONICAL_DIMS: [usize; 3] = [121, 145, 121];
pub const CANONICAL_VOXEL_MM: [f32; 3] = [1.5, 1.5, 1.5];

/// Float32 field indexed `[channel][z][y][x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub subject_id: String,
    /// `(depth, height, width)`
    pub dims: [usize; 3],
    pub channels: usize,
    pub voxel_size_mm: [f32; 3],
    pub channel_names: Vec<String>,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(
        subject_id: impl Into<String>,
        dims: [usize; 3],
        voxel_size_mm: [f32; 3],
        channel_names: Vec<String>,
        data: Vec<f32>,
    ) -> Result<Self> {
        let channels = channel_names.len();
        if channels == 0 {
            return Err(Error::arg(
                "channel_names",
                "at least one channel is required",
            ));
        }
        if dims.contains(&0) {
            return Err(Error::arg("dims", format!("{dims:?} has a zero extent")));
        }
        if voxel_size_mm.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::arg(
                "voxel_size_mm",
                format!("{voxel_size_mm:?} must be positive"),
            ));
        }
        let expected = channels * dims.iter().product::<usize>();
        if data.len() != expected {
            return Err(Error::shape("volume data", expected, data.len()));
        }
        Ok(Self {
            subject_id: subject_id.into(),
            dims,
            channels,
            voxel_size_mm,
            channel_names,
            data,
        })
    }

    pub fn zeros(
        subject_id: impl Into<String>,
        dims: [usize; 3],
        channel_names: Vec<String>,
    ) -> Result<Self> {
        let n = channel_names.len() * dims.iter().product::<usize>();
        Self::new(subject_id, dims, [1.0; 3], channel_names, vec![0.0; n])
    }

    #[inline]
    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    #[inline]
    pub fn voxel_index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get(&self, c: usize, z: usize, y: usize, x: usize) -> f32 {
        self.data[c * self.voxels() + self.voxel_index(z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, z: usize, y: usize, x: usize, v: f32) {
        let i = c * self.voxels() + self.voxel_index(z, y, x);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// One axial plane of channel `c`.
    pub fn plane(&self, c: usize, z: usize) -> &[f32] {
        let hw = self.dims[1] * self.dims[2];
        &self.channel(c)[z * hw..(z + 1) * hw]
    }

    /// Values of every channel at one voxel.
    pub fn voxel_channels(&self, z: usize, y: usize, x: usize) -> Vec<f32> {
        (0..self.channels).map(|c| self.get(c, z, y, x)).collect()
    }
}

/// Per-channel min-max rescaling of the whole volume onto `[0, 1]`.
pub fn normalize_channels(volume: &Volume) -> Result<Volume> {
    let mut out = volume.clone();
    for c in 0..volume.channels {
        let ch = out.channel_mut(c);
        if let Some(i) = ch.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("channel {c} voxel {i} of {}", volume.subject_id),
            });
        }
        let (lo, hi) = ch
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        if !(hi > lo) {
            return Err(Error::DegenerateChannel {
                channel: c,
                value: lo,
            });
        }
        let range = hi - lo;
        for v in ch.iter_mut() {
            *v = ((*v - lo) / range).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BrainMask {
    pub dims: [usize; 3],
    pub mask: Vec<bool>,
}

impl BrainMask {
    pub fn new(dims: [usize; 3], mask: Vec<bool>) -> Result<Self> {
        if mask.len() != dims.iter().product::<usize>() {
            return Err(Error::shape(
                "brain mask",
                dims.iter().product::<usize>(),
                mask.len(),
            ));
        }
        Ok(Self { dims, mask })
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> bool {
        self.mask[(z * self.dims[1] + y) * self.dims[2] + x]
    }
}

/// True where any channel exceeds `epsilon`.
pub fn compute_brain_mask(volume: &Volume, epsilon: f32) -> Result<BrainMask> {
    let n = volume.voxels();
    let mask: Vec<bool> = (0..n)
        .map(|i| (0..volume.channels).any(|c| volume.data[c * n + i] > epsilon))
        .collect();
    let m = BrainMask::new(volume.dims, mask)?;
    if m.count() == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sex {
    F,
    M,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cohort {
    Control,
    Patient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectMeta {
    pub subject_id: String,
    pub age: f64,
    pub sex: Sex,
    pub cohort: Cohort,
}
