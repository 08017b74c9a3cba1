//! Training datasets: central axial slices for the AE, same-location patch
//! pairs for the SAE, and balanced bootstrap splits of the control cohort.

use std::ops::Range;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::volume::{BrainMask, Cohort, Sex, SubjectMeta, Volume};

pub const AE_SLICE_COUNT: usize = 40;
pub const PATCHES_PER_SUBJECT: usize = 15_000;

#[derive(Clone, Debug, PartialEq)]
pub struct SliceSample {
    pub subject_id: String,
    pub slice_index: usize,
    /// `[channel][y][x]`
    pub pixels: Vec<f32>,
}

/// Contiguous band of `count` axial slices centered on `depth / 2`.
pub fn slice_band(depth: usize, count: usize) -> Result<Range<usize>> {
    if count == 0 || count > depth {
        return Err(Error::arg(
            "slice count",
            format!("{count} slices requested from depth {depth}"),
        ));
    }
    let start = (depth - count) / 2;
    Ok(start..start + count)
}

pub fn extract_axial_slices(volume: &Volume, count: usize) -> Result<Vec<SliceSample>> {
    let band = slice_band(volume.dims[0], count)?;
    Ok(band
        .map(|z| SliceSample {
            subject_id: volume.subject_id.clone(),
            slice_index: z,
            pixels: (0..volume.channels)
                .flat_map(|c| volume.plane(c, z).iter().copied())
                .collect(),
        })
        .collect())
}

/// Stacks slices of one geometry into a `[n, channels, height, width]` batch.
pub fn stack_slices(
    slices: &[SliceSample],
    channels: usize,
    height: usize,
    width: usize,
) -> Result<Tensor<f32>> {
    let views: Vec<&[f32]> = slices.iter().map(|s| s.pixels.as_slice()).collect();
    Tensor::stack(&views, [channels, height, width])
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    pub subject_id: String,
    /// `(z, y, x)` of the central voxel.
    pub center: [usize; 3],
    /// `[channel][dy][dx]`, `patch x patch` per channel.
    pub pixels: Vec<f32>,
}

/// In-plane patch of odd side `patch` centered on `center`.
pub fn patch_at(volume: &Volume, center: [usize; 3], patch: usize) -> Result<Vec<f32>> {
    let [z, y, x] = center;
    let half = patch / 2;
    let [d, h, w] = volume.dims;
    if patch.is_multiple_of(2) || z >= d || y < half || x < half || y + half >= h || x + half >= w {
        return Err(Error::arg(
            "patch center",
            format!(
                "{center:?} with size {patch} leaves the volume {:?}",
                volume.dims
            ),
        ));
    }
    let mut out = Vec::with_capacity(volume.channels * patch * patch);
    for c in 0..volume.channels {
        let plane = volume.plane(c, z);
        for yy in y - half..=y + half {
            out.extend_from_slice(&plane[yy * w + x - half..=yy * w + x + half]);
        }
    }
    Ok(out)
}

/// Centers whose whole `patch x patch` in-plane window lies inside the mask.
pub fn eligible_centers(mask: &BrainMask, patch: usize) -> Vec<[usize; 3]> {
    let [d, h, w] = mask.dims;
    let half = patch / 2;
    let mut out = Vec::new();
    if h < patch || w < patch {
        return out;
    }
    let area = patch * patch;
    // summed-area table of the mask, one plane at a time
    let mut sat = vec![0usize; (h + 1) * (w + 1)];
    for z in 0..d {
        for y in 0..h {
            let mut row = 0;
            for x in 0..w {
                row += usize::from(mask.at(z, y, x));
                sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
            }
        }
        for y in half..h - half {
            for x in half..w - half {
                let (y0, y1, x0, x1) = (y - half, y + half + 1, x - half, x + half + 1);
                let inside = sat[y1 * (w + 1) + x1] + sat[y0 * (w + 1) + x0]
                    - sat[y0 * (w + 1) + x1]
                    - sat[y1 * (w + 1) + x0];
                if inside == area {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// Samples `count` eligible centers, without replacement when possible.
pub fn sample_centers(eligible: &[[usize; 3]], count: usize, seed: u64) -> Result<Vec<[usize; 3]>> {
    if eligible.is_empty() {
        return Err(Error::NoEligibleCenter);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(if count <= eligible.len() {
        sample(&mut rng, eligible.len(), count)
            .into_iter()
            .map(|i| eligible[i])
            .collect()
    } else {
        (0..count)
            .map(|_| eligible[rng.gen_range(0..eligible.len())])
            .collect()
    })
}

pub fn extract_patches(
    volume: &Volume,
    mask: &BrainMask,
    count: usize,
    patch: usize,
    seed: u64,
) -> Result<Vec<PatchSample>> {
    if mask.dims != volume.dims {
        return Err(Error::shape("brain mask", volume.dims, mask.dims));
    }
    sample_centers(&eligible_centers(mask, patch), count, seed)?
        .into_iter()
        .map(|center| {
            Ok(PatchSample {
                subject_id: volume.subject_id.clone(),
                center,
                pixels: patch_at(volume, center, patch)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub left: PatchSample,
    pub right: PatchSample,
}

/// Subject, center and partner of one similar pair, enough to re-extract it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub left: String,
    pub right: String,
    pub center: [usize; 3],
}

impl PatchPair {
    pub fn record(&self) -> PairRecord {
        PairRecord {
            left: self.left.subject_id.clone(),
            right: self.right.subject_id.clone(),
            center: self.left.center,
        }
    }
}

/// Pairs every patch of every subject with the patch at the same center of a
/// uniformly drawn different subject.
pub fn build_similar_pairs(
    subjects: &[(&Volume, Vec<PatchSample>)],
    patch: usize,
    seed: u64,
) -> Result<Vec<PatchPair>> {
    if subjects.len() < 2 {
        return Err(Error::arg(
            "pair corpus",
            format!("{} subject(s); at least 2 needed", subjects.len()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(subjects.iter().map(|s| s.1.len()).sum());
    for (a, (_, patches)) in subjects.iter().enumerate() {
        for left in patches {
            let mut b = rng.gen_range(0..subjects.len() - 1);
            if b >= a {
                b += 1;
            }
            let partner = subjects[b].0;
            pairs.push(PatchPair {
                right: PatchSample {
                    subject_id: partner.subject_id.clone(),
                    center: left.center,
                    pixels: patch_at(partner, left.center, patch)?,
                },
                left: left.clone(),
            });
        }
    }
    Ok(pairs)
}

/// Left and right halves of `pairs` as two aligned `[n, c, p, p]` stacks.
pub fn stack_pairs(
    pairs: &[PatchPair],
    channels: usize,
    patch: usize,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let chw = [channels, patch, patch];
    let left: Vec<&[f32]> = pairs.iter().map(|p| p.left.pixels.as_slice()).collect();
    let right: Vec<&[f32]> = pairs.iter().map(|p| p.right.pixels.as_slice()).collect();
    Ok((Tensor::stack(&left, chw)?, Tensor::stack(&right, chw)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceCriteria {
    pub max_age_gap: f64,
    pub female_fraction: (f64, f64),
    pub max_attempts: usize,
}

impl Default for BalanceCriteria {
    fn default() -> Self {
        Self {
            max_age_gap: 2.0,
            female_fraction: (0.30, 0.50),
            max_attempts: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub train_mean_age: f64,
    pub test_mean_age: f64,
    pub train_female_fraction: f64,
    pub test_female_fraction: f64,
    /// Rejection-sampling attempts used, including the accepted one.
    pub attempts: usize,
}

impl BalanceReport {
    pub fn age_gap(&self) -> f64 {
        (self.train_mean_age - self.test_mean_age).abs()
    }

    pub fn satisfies(&self, c: &BalanceCriteria) -> bool {
        let (lo, hi) = c.female_fraction;
        self.age_gap() <= c.max_age_gap
            && (lo..=hi).contains(&self.train_female_fraction)
            && (lo..=hi).contains(&self.test_female_fraction)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    /// 1-based bootstrap sample number.
    pub sample_index: usize,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub balance: BalanceReport,
}

fn side_stats(side: &[&SubjectMeta]) -> (f64, f64) {
    let n = side.len() as f64;
    let age = side.iter().map(|m| m.age).sum::<f64>() / n;
    let female = side.iter().filter(|m| m.sex == Sex::F).count() as f64 / n;
    (age, female)
}

/// `n_samples` balanced train/test partitions of the control pool. Sample `k`
/// draws from its own stream of `seed`, so plans do not depend on each other.
pub fn bootstrap_split(
    controls: &[SubjectMeta],
    n_samples: usize,
    n_train: usize,
    n_test: usize,
    criteria: &BalanceCriteria,
    seed: u64,
) -> Result<Vec<SplitPlan>> {
    if n_train == 0 || n_test == 0 || controls.len() != n_train + n_test {
        return Err(Error::arg(
            "control pool",
            format!(
                "{} controls cannot be split into {n_train} train + {n_test} test",
                controls.len()
            ),
        ));
    }
    if let Some(m) = controls.iter().find(|m| m.cohort != Cohort::Control) {
        return Err(Error::arg(
            "control pool",
            format!("{} is not a control", m.subject_id),
        ));
    }
    (1..=n_samples)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let mut order: Vec<usize> = (0..controls.len()).collect();
            for attempt in 1..=criteria.max_attempts {
                order.shuffle(&mut rng);
                let (mut train, mut test) = (order[..n_train].to_vec(), order[n_train..].to_vec());
                train.sort_unstable();
                test.sort_unstable();
                let pick = |idx: &[usize]| idx.iter().map(|&i| &controls[i]).collect::<Vec<_>>();
                let (tr, te) = (pick(&train), pick(&test));
                let (
                    (train_mean_age, train_female_fraction),
                    (test_mean_age, test_female_fraction),
                ) = (side_stats(&tr), side_stats(&te));
                let balance = BalanceReport {
                    train_mean_age,
                    test_mean_age,
                    train_female_fraction,
                    test_female_fraction,
                    attempts: attempt,
                };
                if balance.satisfies(criteria) {
                    let ids = |v: Vec<&SubjectMeta>| {
                        v.into_iter().map(|m| m.subject_id.clone()).collect()
                    };
                    return Ok(SplitPlan {
                        sample_index: k,
                        train_ids: ids(tr),
                        test_ids: ids(te),
                        balance,
                    });
                }
            }
            Err(Error::SplitUnattainable {
                attempts: criteria.max_attempts,
            })
        })
        .collect()
}

/// Provenance of the slice dataset of one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceDatasetManifest {
    pub subjects: Vec<String>,
    pub slice_band: [usize; 2],
    pub samples: usize,
}

/// Provenance of the patch-pair dataset of one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDatasetManifest {
    pub seed: u64,
    pub patch: usize,
    pub patches_per_subject: usize,
    pub pairs: Vec<PairRecord>,
}
