//! Synthetic two-channel brain phantoms with recorded ground-truth lesions.
//!
//! Every subject shares a fixed sum-of-Gaussian-blobs template inside an
//! ellipsoidal brain support. Subjects add a smooth low-amplitude
//! perturbation and i.i.d. noise; patients also receive spherical offsets of
//! magnitude `delta` (FA lowered, MD raised). Values are clipped to `[0, 1]`.
//! The template saturates at 1 in a small core of each channel, so min-max
//! normalization leaves phantom volumes unchanged.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{save_manifest, ManifestEntry};
use super::mvol::save_mvol;
use super::{BrainMask, Cohort, Sex, SubjectMeta, Volume};
use crate::error::{Error, Result};

pub const CHANNEL_NAMES: [&str; 2] = ["FA", "MD"];

const STREAM_TEMPLATE: u64 = 0;
const STREAM_ANATOMY: u64 = 1;
const STREAM_LESIONS: u64 = 2;
const STREAM_META: u64 = 3;

/// Semi-axis of the brain ellipsoid as a fraction of each grid extent.
const SUPPORT_FRACTION: f64 = 0.45;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub n_controls: usize,
    pub n_patients: usize,
    /// `(depth, height, width)`
    pub dims: [usize; 3],
    pub voxel_size_mm: [f32; 3],
    /// Lesion offset `delta`, in normalized intensity units.
    pub anomaly_magnitude: f32,
    /// Lesion radius in voxels.
    pub lesion_radius: f32,
    pub lesions_per_patient: usize,
    pub noise_sigma: f32,
    /// Peak amplitude of each subject-specific perturbation blob.
    pub perturbation_amplitude: f32,
    pub age_mean: f64,
    pub age_sd: f64,
    pub female_fraction: f64,
}

impl PhantomSpec {
    /// Desk-scale cohort used by the quick pipeline profile.
    pub fn quick() -> Self {
        Self {
            n_controls: 30,
            n_patients: 15,
            dims: [48, 56, 48],
            voxel_size_mm: [1.5; 3],
            anomaly_magnitude: 0.15,
            lesion_radius: 4.0,
            lesions_per_patient: 3,
            noise_sigma: 0.02,
            perturbation_amplitude: 0.03,
            age_mean: 61.0,
            age_sd: 9.0,
            female_fraction: 0.4,
        }
    }

    /// Clinical-size grid and cohort counts (56 controls, 129 patients).
    pub fn canonical() -> Self {
        Self {
            n_controls: 56,
            n_patients: 129,
            dims: super::CANONICAL_DIMS,
            voxel_size_mm: super::CANONICAL_VOXEL_MM,
            lesion_radius: 6.0,
            ..Self::quick()
        }
    }

    fn semi_axes(&self) -> [f64; 3] {
        self.dims.map(|d| SUPPORT_FRACTION * d as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.anomaly_magnitude;
        if !(d > 0.0 && d <= 0.3) {
            return Err(Error::arg(
                "anomaly_magnitude",
                format!("{d} not in (0, 0.3]"),
            ));
        }
        if self.n_controls == 0 || self.n_patients == 0 {
            return Err(Error::arg(
                "n_controls/n_patients",
                "both cohorts need at least one subject",
            ));
        }
        if self.lesions_per_patient == 0 {
            return Err(Error::arg("lesions_per_patient", "must be at least 1"));
        }
        if self.dims.iter().any(|&x| x < 4) {
            return Err(Error::arg(
                "dims",
                format!("{:?} too small for a phantom", self.dims),
            ));
        }
        let min_axis = self
            .semi_axes()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        let r = self.lesion_radius as f64;
        if !(r > 0.0) || r >= min_axis {
            return Err(Error::arg(
                "lesion_radius",
                format!("{r} must be positive and smaller than the brain support semi-axis {min_axis:.2}"),
            ));
        }
        if !(self.noise_sigma >= 0.0) || !(self.perturbation_amplitude >= 0.0) {
            return Err(Error::arg(
                "noise_sigma",
                "noise and perturbation must be non-negative",
            ));
        }
        if !(self.age_mean > 0.0) || !(0.0..=1.0).contains(&self.female_fraction) {
            return Err(Error::arg(
                "age_mean",
                "ages must be positive and female_fraction in [0, 1]",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomTruth {
    pub subject_id: String,
    #[serde(skip)]
    pub anomaly_mask: Vec<bool>,
    pub anomaly_magnitude: Vec<f32>,
    pub lesion_centers: Vec<[usize; 3]>,
    pub lesion_radius: f32,
}

impl PhantomTruth {
    pub fn anomalous_voxels(&self) -> usize {
        self.anomaly_mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    center: [f64; 3],
    sigma: f64,
    amplitude: f64,
}

impl Blob {
    fn add_to(&self, field: &mut [f32], dims: [usize; 3], support: &[bool]) {
        let inv = 1.0 / (2.0 * self.sigma * self.sigma);
        let reach = (4.0 * self.sigma).ceil() as isize;
        let lo = |c: f64| ((c.round() as isize) - reach).max(0) as usize;
        let hi = |c: f64, n: usize| (((c.round() as isize) + reach + 1).max(0) as usize).min(n);
        for z in lo(self.center[0])..hi(self.center[0], dims[0]) {
            let dz = z as f64 - self.center[0];
            for y in lo(self.center[1])..hi(self.center[1], dims[1]) {
                let dy = y as f64 - self.center[1];
                for x in lo(self.center[2])..hi(self.center[2], dims[2]) {
                    let i = (z * dims[1] + y) * dims[2] + x;
                    if !support[i] {
                        continue;
                    }
                    let dx = x as f64 - self.center[2];
                    field[i] +=
                        (self.amplitude * (-(dz * dz + dy * dy + dx * dx) * inv).exp()) as f32;
                }
            }
        }
    }
}

fn point_in_ellipsoid<R: Rng>(rng: &mut R, center: [f64; 3], axes: [f64; 3]) -> [f64; 3] {
    loop {
        let u: [f64; 3] = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        if u.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
            return [0, 1, 2].map(|k| center[k] + u[k] * axes[k]);
        }
    }
}

/// Shared anatomy: ellipsoidal support and the per-channel template.
#[derive(Clone, Debug)]
pub struct PhantomTemplate {
    pub dims: [usize; 3],
    pub support: BrainMask,
    pub channels: Vec<Vec<f32>>,
    center: [f64; 3],
    axes: [f64; 3],
}

impl PhantomTemplate {
    pub fn new(spec: &PhantomSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let dims = spec.dims;
        let center = dims.map(|d| (d as f64 - 1.0) / 2.0);
        let axes = spec.semi_axes();
        let n: usize = dims.iter().product();
        let mut support = vec![false; n];
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let p = [z as f64, y as f64, x as f64];
                    let r2: f64 = (0..3).map(|k| ((p[k] - center[k]) / axes[k]).powi(2)).sum();
                    support[(z * dims[1] + y) * dims[2] + x] = r2 <= 1.0;
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM_TEMPLATE);
        let mean_dim = dims.iter().sum::<usize>() as f64 / 3.0;
        // (base level, lower clamp, upper clamp) before the saturating core
        let levels = [(0.40, 0.22, 0.80), (0.45, 0.30, 0.80)];
        let mut channels = Vec::with_capacity(2);
        for &(base, lo, hi) in &levels {
            let mut field: Vec<f32> = support
                .iter()
                .map(|&s| if s { base as f32 } else { 0.0 })
                .collect();
            for _ in 0..12 {
                let blob = Blob {
                    center: point_in_ellipsoid(&mut rng, center, axes),
                    sigma: rng.gen_range(0.05..0.14) * mean_dim,
                    amplitude: rng.gen_range(0.08..0.25)
                        * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
                };
                blob.add_to(&mut field, dims, &support);
            }
            for (v, &s) in field.iter_mut().zip(&support) {
                if s {
                    *v = v.clamp(lo, hi);
                }
            }
            let core = Blob {
                center: point_in_ellipsoid(&mut rng, center, axes.map(|a| 0.4 * a)),
                sigma: 0.05 * mean_dim,
                amplitude: 0.8,
            };
            core.add_to(&mut field, dims, &support);
            channels.push(field);
        }
        Ok(Self {
            dims,
            support: BrainMask::new(dims, support)?,
            channels,
            center,
            axes,
        })
    }

    pub fn support_count(&self) -> usize {
        self.support.count()
    }
}

/// Index of subject `i` in the cohort: controls first, then patients.
fn subject_id(spec: &PhantomSpec, index: usize) -> (String, Cohort) {
    if index < spec.n_controls {
        (format!("ctl-{:03}", index + 1), Cohort::Control)
    } else {
        (
            format!("pat-{:03}", index - spec.n_controls + 1),
            Cohort::Patient,
        )
    }
}

fn subject_rng(seed: u64, index: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(index as u64));
    rng.set_stream(stream);
    rng
}

/// Generates subject `index`. With `with_anomalies = false` a patient is
/// produced without its lesions (its anomaly-free twin).
pub fn synth_subject(
    spec: &PhantomSpec,
    template: &PhantomTemplate,
    seed: u64,
    index: usize,
    with_anomalies: bool,
) -> Result<(Volume, SubjectMeta, PhantomTruth)> {
    if index >= spec.n_controls + spec.n_patients {
        return Err(Error::arg("index", format!("{index} outside cohort")));
    }
    let (id, cohort) = subject_id(spec, index);
    let dims = spec.dims;
    let n: usize = dims.iter().product();
    let support = &template.support.mask;
    let mean_dim = dims.iter().sum::<usize>() as f64 / 3.0;

    let mut rng = subject_rng(seed, index, STREAM_ANATOMY);
    let mut data = Vec::with_capacity(2 * n);
    for c in 0..2 {
        let mut field = template.channels[c].clone();
        for _ in 0..4 {
            let amp = spec.perturbation_amplitude as f64;
            let blob = Blob {
                center: point_in_ellipsoid(&mut rng, template.center, template.axes),
                sigma: rng.gen_range(0.10..0.20) * mean_dim,
                amplitude: if amp > 0.0 {
                    rng.gen_range(-amp..=amp)
                } else {
                    0.0
                },
            };
            blob.add_to(&mut field, dims, support);
        }
        if spec.noise_sigma > 0.0 {
            let noise = Normal::new(0.0, spec.noise_sigma as f64).expect("finite sigma");
            for (v, &s) in field.iter_mut().zip(support) {
                if s {
                    *v += noise.sample(&mut rng) as f32;
                }
            }
        }
        data.extend(field);
    }

    let mut truth = PhantomTruth {
        subject_id: id.clone(),
        anomaly_mask: vec![false; n],
        anomaly_magnitude: Vec::new(),
        lesion_centers: Vec::new(),
        lesion_radius: spec.lesion_radius,
    };
    if cohort == Cohort::Patient {
        let mut lrng = subject_rng(seed, index, STREAM_LESIONS);
        let r = spec.lesion_radius as f64;
        let inner = template.axes.map(|a| a - r);
        for _ in 0..spec.lesions_per_patient {
            let c = point_in_ellipsoid(&mut lrng, template.center, inner).map(|v| v.round());
            truth.lesion_centers.push(c.map(|v| v as usize));
            truth.anomaly_magnitude.push(spec.anomaly_magnitude);
            let reach = r.ceil() as isize;
            for dz in -reach..=reach {
                for dy in -reach..=reach {
                    for dx in -reach..=reach {
                        if ((dz * dz + dy * dy + dx * dx) as f64) > r * r {
                            continue;
                        }
                        let p = [c[0] as isize + dz, c[1] as isize + dy, c[2] as isize + dx];
                        if (0..3).any(|k| p[k] < 0 || p[k] as usize >= dims[k]) {
                            continue;
                        }
                        let i = (p[0] as usize * dims[1] + p[1] as usize) * dims[2] + p[2] as usize;
                        if support[i] {
                            truth.anomaly_mask[i] = true;
                        }
                    }
                }
            }
        }
        if with_anomalies {
            let delta = spec.anomaly_magnitude;
            for i in 0..n {
                if truth.anomaly_mask[i] {
                    data[i] -= delta;
                    data[n + i] += delta;
                }
            }
        }
    }
    for v in data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }

    let mut mrng = subject_rng(seed, index, STREAM_META);
    let age_dist = Normal::new(spec.age_mean, spec.age_sd.max(0.0)).expect("finite age sd");
    let age = age_dist.sample(&mut mrng).clamp(40.0, 85.0);
    let sex = if mrng.gen_bool(spec.female_fraction) {
        Sex::F
    } else {
        Sex::M
    };
    let meta = SubjectMeta {
        subject_id: id.clone(),
        age,
        sex,
        cohort,
    };
    let names = CHANNEL_NAMES.iter().map(|s| s.to_string()).collect();
    let volume = Volume::new(id, dims, spec.voxel_size_mm, names, data)?;
    Ok((volume, meta, truth))
}

#[derive(Clone, Debug)]
pub struct PhantomCohort {
    pub spec: PhantomSpec,
    pub seed: u64,
    pub support_count: usize,
    pub volumes: Vec<Volume>,
    pub metas: Vec<SubjectMeta>,
    pub truths: Vec<PhantomTruth>,
}

pub fn synth_cohort(spec: &PhantomSpec, seed: u64) -> Result<PhantomCohort> {
    let template = PhantomTemplate::new(spec, seed)?;
    let total = spec.n_controls + spec.n_patients;
    let mut volumes = Vec::with_capacity(total);
    let mut metas = Vec::with_capacity(total);
    let mut truths = Vec::with_capacity(total);
    for i in 0..total {
        let (v, m, t) = synth_subject(spec, &template, seed, i, true)?;
        volumes.push(v);
        metas.push(m);
        truths.push(t);
    }
    Ok(PhantomCohort {
        spec: spec.clone(),
        seed,
        support_count: template.support_count(),
        volumes,
        metas,
        truths,
    })
}

#[derive(Serialize, Deserialize)]
struct CohortRecord {
    spec: PhantomSpec,
    seed: u64,
    support_count: usize,
}

/// Writes volumes, truth records and `manifest.json` under `dir`.
pub fn write_cohort(cohort: &PhantomCohort, dir: &Path) -> Result<()> {
    let vol_dir = dir.join("volumes");
    let truth_dir = dir.join("truth");
    for d in [&vol_dir, &truth_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d.as_path(), e))?;
    }
    let mut entries = Vec::with_capacity(cohort.volumes.len());
    for ((v, m), t) in cohort.volumes.iter().zip(&cohort.metas).zip(&cohort.truths) {
        let rel = format!("volumes/{}.mvol", m.subject_id);
        save_mvol(v, &dir.join(&rel))?;
        let truth_rel = format!("truth/{}.json", m.subject_id);
        let mask_vol = Volume::new(
            format!("{}-anomaly", m.subject_id),
            v.dims,
            v.voxel_size_mm,
            vec!["anomaly".into()],
            t.anomaly_mask
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect(),
        )?;
        save_mvol(
            &mask_vol,
            &dir.join(format!("truth/{}.mask.mvol", m.subject_id)),
        )?;
        let json = serde_json::to_string_pretty(t).map_err(|e| Error::json("truth record", e))?;
        let p = dir.join(&truth_rel);
        fs::write(&p, json + "\n").map_err(|e| Error::io(p.as_path(), e))?;
        entries.push(ManifestEntry {
            meta: m.clone(),
            path: rel,
            truth: Some(truth_rel),
        });
    }
    save_manifest(&entries, &dir.join("manifest.json"))?;
    let record = CohortRecord {
        spec: cohort.spec.clone(),
        seed: cohort.seed,
        support_count: cohort.support_count,
    };
    let p = dir.join("phantom.json");
    let json =
        serde_json::to_string_pretty(&record).map_err(|e| Error::json("phantom record", e))?;
    fs::write(&p, json + "\n").map_err(|e| Error::io(p.as_path(), e))
}

/// Reads a truth record written by [`write_cohort`], including its mask.
pub fn load_truth(json_path: &Path) -> Result<PhantomTruth> {
    let text = fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
    let mut truth: PhantomTruth =
        serde_json::from_str(&text).map_err(|e| Error::json(json_path.display().to_string(), e))?;
    let mask_path = json_path.with_file_name(format!("{}.mask.mvol", truth.subject_id));
    let mask = super::load_mvol(&mask_path)?;
    truth.anomaly_mask = mask.data.iter().map(|&v| v > 0.5).collect();
    Ok(truth)
}
