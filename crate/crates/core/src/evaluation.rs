//! Per-region abnormal-voxel scoring, subject-level ROC with a g-mean
//! optimal pathological threshold, and aggregation over bootstrap samples.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anomaly::{read_json, write_json, BinaryAnomalyMap, ModelKind};
use crate::error::{Error, Result};
use crate::volume::{load_mvol, save_mvol, BrainMask, Cohort, Volume};

pub const WHOLE_BRAIN: &str = "whole_brain";

/// Nominal names of the eight cortical sectors of the synthetic macro atlas.
pub const MACRO_REGIONS: [&str; 8] = [
    "frontal_r",
    "parietal_r",
    "occipital_r",
    "temporal_r",
    "temporal_l",
    "occipital_l",
    "parietal_l",
    "frontal_l",
];

pub const SUBCORTICAL_REGIONS: [&str; 8] = [
    "SN", "RN", "STN", "GPi", "GPe", "thalamus", "putamen", "caudate",
];

/// Integer label volume (0 = background) with a name table.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelAtlas {
    pub atlas_id: String,
    pub dims: [usize; 3],
    pub labels: Vec<u16>,
    pub names: BTreeMap<u16, String>,
}

#[derive(Serialize, Deserialize)]
struct AtlasNames {
    atlas_id: String,
    names: BTreeMap<u16, String>,
}

impl LabelAtlas {
    pub fn new(
        atlas_id: impl Into<String>,
        dims: [usize; 3],
        labels: Vec<u16>,
        names: BTreeMap<u16, String>,
    ) -> Result<Self> {
        let n: usize = dims.iter().product();
        if labels.len() != n {
            return Err(Error::shape("atlas labels", n, labels.len()));
        }
        if names.contains_key(&0) {
            return Err(Error::arg(
                "names",
                "label 0 is background and cannot be named",
            ));
        }
        if let Some(l) = labels.iter().find(|&&l| l != 0 && !names.contains_key(&l)) {
            return Err(Error::arg(
                "labels",
                format!("label {l} missing from the name table"),
            ));
        }
        Ok(Self {
            atlas_id: atlas_id.into(),
            dims,
            labels,
            names,
        })
    }

    pub fn region_mask(&self, label: u16) -> Vec<bool> {
        self.labels.iter().map(|&l| l == label).collect()
    }

    pub fn label_of(&self, name: &str) -> Option<u16> {
        self.names
            .iter()
            .find(|(_, n)| n.as_str() == name)
            .map(|(&l, _)| l)
    }

    /// Writes `<atlas_id>.mvol` (labels as floats) and `<atlas_id>.json`.
    pub fn save(&self, dir: &Path, voxel_size_mm: [f32; 3]) -> Result<()> {
        let vol = Volume::new(
            self.atlas_id.clone(),
            self.dims,
            voxel_size_mm,
            vec!["label".into()],
            self.labels.iter().map(|&l| l as f32).collect(),
        )?;
        save_mvol(&vol, &dir.join(format!("{}.mvol", self.atlas_id)))?;
        let names = AtlasNames {
            atlas_id: self.atlas_id.clone(),
            names: self.names.clone(),
        };
        write_json(&dir.join(format!("{}.json", self.atlas_id)), &names)
    }

    /// Reads the pair written by [`LabelAtlas::save`] from its JSON path.
    pub fn load(json_path: &Path) -> Result<Self> {
        let names: AtlasNames = read_json(json_path)?;
        let vol = load_mvol(&json_path.with_extension("mvol"))?;
        if vol.channels != 1 {
            return Err(Error::shape("atlas channels", 1, vol.channels));
        }
        let mut labels = Vec::with_capacity(vol.data.len());
        for (i, &v) in vol.data.iter().enumerate() {
            if !(v >= 0.0 && v <= u16::MAX as f32 && v.fract() == 0.0) {
                return Err(Error::Format {
                    what: "atlas label",
                    offset: i as u64,
                    reason: format!("{v} is not a non-negative integer label"),
                });
            }
            labels.push(v as u16);
        }
        Self::new(names.atlas_id, vol.dims, labels, names.names)
    }
}

fn name_table(names: &[&str]) -> BTreeMap<u16, String> {
    names
        .iter()
        .enumerate()
        .map(|(i, n)| (i as u16 + 1, n.to_string()))
        .collect()
}

fn centroid(mask: &BrainMask) -> Result<[f64; 3]> {
    let [_, h, w] = mask.dims;
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for (i, _) in mask.mask.iter().enumerate().filter(|(_, &m)| m) {
        sum[0] += (i / (h * w)) as f64;
        sum[1] += (i / w % h) as f64;
        sum[2] += (i % w) as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum.map(|s| s / n as f64))
}

/// Eight azimuthal sectors about the mask centroid in the axial plane,
/// partitioning the mask.
pub fn synthetic_macro_atlas(mask: &BrainMask) -> Result<LabelAtlas> {
    let c = centroid(mask)?;
    let [_, h, w] = mask.dims;
    let labels = mask
        .mask
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            if !m {
                return 0;
            }
            let dy = (i / w % h) as f64 - c[1];
            let dx = (i % w) as f64 - c[2];
            // angle from the anterior (-y) axis, clockwise through +x
            let a = dx.atan2(-dy).rem_euclid(std::f64::consts::TAU);
            let sector = ((a / std::f64::consts::FRAC_PI_4) as usize).min(7);
            sector as u16 + 1
        })
        .collect();
    LabelAtlas::new("macro", mask.dims, labels, name_table(&MACRO_REGIONS))
}

/// Eight disjoint spheres on a ring about the mask centroid, clipped to the mask.
pub fn synthetic_subcortical_atlas(mask: &BrainMask) -> Result<LabelAtlas> {
    let c = centroid(mask)?;
    let [d, h, w] = mask.dims;
    let ring = 0.12 * h.min(w) as f64;
    let radius = (0.35 * ring).max(1.0);
    let centers: Vec<[f64; 3]> = (0..8)
        .map(|k| {
            let a = (k as f64 + 0.5) * std::f64::consts::FRAC_PI_4;
            [c[0], c[1] - ring * a.cos(), c[2] + ring * a.sin()]
        })
        .collect();
    let mut labels = vec![0u16; d * h * w];
    for (i, l) in labels.iter_mut().enumerate() {
        if !mask.mask[i] {
            continue;
        }
        let p = [(i / (h * w)) as f64, (i / w % h) as f64, (i % w) as f64];
        for (k, q) in centers.iter().enumerate() {
            let r2: f64 = (0..3).map(|j| (p[j] - q[j]).powi(2)).sum();
            if r2 <= radius * radius {
                *l = k as u16 + 1;
            }
        }
    }
    LabelAtlas::new(
        "subcortical",
        mask.dims,
        labels,
        name_table(&SUBCORTICAL_REGIONS),
    )
}

/// `100 * |abnormal & region & coverage| / |region & coverage|`
pub fn fraction_in(map: &BinaryAnomalyMap, region: &[bool], name: &str) -> Result<f64> {
    if region.len() != map.abnormal.len() {
        return Err(Error::shape(
            format!("region `{name}`"),
            map.abnormal.len(),
            region.len(),
        ));
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for ((&a, &c), &r) in map.abnormal.iter().zip(&map.coverage).zip(region) {
        if c && r {
            total += 1;
            hit += a as usize;
        }
    }
    if total == 0 {
        return Err(Error::EmptyRoi {
            roi: name.to_string(),
        });
    }
    Ok(100.0 * hit as f64 / total as f64)
}

pub fn roi_fraction(map: &BinaryAnomalyMap, atlas: &LabelAtlas, label: u16) -> Result<f64> {
    if atlas.dims != map.dims {
        return Err(Error::shape("atlas vs anomaly map", map.dims, atlas.dims));
    }
    let name = atlas.names.get(&label).ok_or_else(|| {
        Error::arg(
            "label",
            format!("{label} not in atlas `{}`", atlas.atlas_id),
        )
    })?;
    fraction_in(map, &atlas.region_mask(label), name)
}

/// Whole brain followed by every region of each atlas, in label order.
#[derive(Clone, Debug)]
pub struct RoiSet {
    pub names: Vec<String>,
    /// `None` selects the full coverage.
    pub masks: Vec<Option<Vec<bool>>>,
    /// Index of the first region of each atlas after the first (figure separators).
    pub separators: Vec<usize>,
}

impl RoiSet {
    pub fn new(atlases: &[LabelAtlas]) -> Result<Self> {
        let mut set = Self {
            names: vec![WHOLE_BRAIN.to_string()],
            masks: vec![None],
            separators: Vec::new(),
        };
        for (k, atlas) in atlases.iter().enumerate() {
            if k > 0 {
                set.separators.push(set.names.len());
            }
            for (&label, name) in &atlas.names {
                if set.names.contains(name) {
                    return Err(Error::arg(
                        "atlases",
                        format!("region name `{name}` appears twice"),
                    ));
                }
                set.names.push(name.clone());
                set.masks.push(Some(atlas.region_mask(label)));
            }
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn score(&self, map: &BinaryAnomalyMap) -> Result<Vec<f64>> {
        self.names
            .iter()
            .zip(&self.masks)
            .map(|(name, mask)| match mask {
                Some(m) => fraction_in(map, m, name),
                None => fraction_in(map, &map.coverage, name),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiScoreRow {
    pub subject_id: String,
    pub cohort: Cohort,
    pub percentages: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiScoreTable {
    pub rois: Vec<String>,
    pub rows: Vec<RoiScoreRow>,
}

impl RoiScoreTable {
    pub fn build(rois: &RoiSet, maps: &[(&BinaryAnomalyMap, Cohort)]) -> Result<Self> {
        let rows = maps
            .iter()
            .map(|(m, cohort)| {
                Ok(RoiScoreRow {
                    subject_id: m.subject_id.clone(),
                    cohort: *cohort,
                    percentages: rois.score(m)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            rois: rois.names.clone(),
            rows,
        })
    }

    pub fn column(&self, roi: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r.percentages[roi]).collect()
    }

    pub fn cohorts(&self) -> Vec<Cohort> {
        self.rows.iter().map(|r| r.cohort).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("subject_id,cohort,{}\n", self.rois.join(","));
        for r in &self.rows {
            let cohort = match r.cohort {
                Cohort::Control => "control",
                Cohort::Patient => "patient",
            };
            s.push_str(&format!("{},{cohort}", r.subject_id));
            for p in &r.percentages {
                s.push_str(&format!(",{p:.6}"));
            }
            s.push('\n');
        }
        s
    }
}

pub fn gmean(sensitivity: f64, specificity: f64) -> Result<f64> {
    for (name, v) in [("sensitivity", sensitivity), ("specificity", specificity)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::arg(name, format!("{v} not in [0, 1]")));
        }
    }
    Ok((sensitivity * specificity).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub true_positives: usize,
    pub true_negatives: usize,
    pub sensitivity: f64,
    pub specificity: f64,
    pub gmean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    pub patients: usize,
    pub controls: usize,
    /// Ascending thresholds.
    pub sweep: Vec<RocPoint>,
    pub chosen: usize,
    pub pathological_threshold: f64,
    pub gmean: f64,
}

impl RocResult {
    pub fn chosen_point(&self) -> &RocPoint {
        &self.sweep[self.chosen]
    }
}

/// Candidate thresholds: `min - 1`, midpoints of consecutive distinct scores,
/// `max + 1`. A subject is called a patient iff its score exceeds the
/// threshold. The g-mean maximum is compared exactly through `tp * tn`; ties
/// go to the smallest threshold.
pub fn roc_select(scores: &[f64], labels: &[Cohort]) -> Result<RocResult> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "roc scores vs labels",
            labels.len(),
            scores.len(),
        ));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("roc score {i}"),
        });
    }
    let positives = labels.iter().filter(|&&c| c == Cohort::Patient).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass {
            positives,
            negatives,
        });
    }
    let mut order: Vec<(f64, Cohort)> =
        scores.iter().copied().zip(labels.iter().copied()).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));

    let point = |threshold: f64, tp: usize, tn: usize| {
        let sensitivity = tp as f64 / positives as f64;
        let specificity = tn as f64 / negatives as f64;
        RocPoint {
            threshold,
            true_positives: tp,
            true_negatives: tn,
            sensitivity,
            specificity,
            // from the integer product so tied operating points agree bit for bit
            gmean: ((tp * tn) as f64 / (positives * negatives) as f64).sqrt(),
        }
    };
    let (lo, hi) = (order[0].0, order[order.len() - 1].0);
    let mut sweep = vec![point(lo - 1.0, positives, 0)];
    let (mut tp, mut tn) = (positives, 0);
    let mut i = 0;
    while i < order.len() {
        let v = order[i].0;
        while i < order.len() && order[i].0 == v {
            match order[i].1 {
                Cohort::Patient => tp -= 1,
                Cohort::Control => tn += 1,
            }
            i += 1;
        }
        let t = if i < order.len() {
            v + (order[i].0 - v) / 2.0
        } else {
            hi + 1.0
        };
        sweep.push(point(t, tp, tn));
    }

    let mut chosen = 0;
    for (k, p) in sweep.iter().enumerate() {
        let best = &sweep[chosen];
        if p.true_positives * p.true_negatives > best.true_positives * best.true_negatives {
            chosen = k;
        }
    }
    Ok(RocResult {
        patients: positives,
        controls: negatives,
        pathological_threshold: sweep[chosen].threshold,
        gmean: sweep[chosen].gmean,
        chosen,
        sweep,
    })
}

/// ROC results of one model on one bootstrap sample, one per ROI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEvaluation {
    pub sample_index: usize,
    pub model: ModelKind,
    pub rois: Vec<String>,
    pub results: Vec<RocResult>,
}

/// Runs [`roc_select`] on every ROI column of a table of test controls and
/// patients.
pub fn evaluate_split(
    sample_index: usize,
    model: ModelKind,
    table: &RoiScoreTable,
) -> Result<SplitEvaluation> {
    let labels = table.cohorts();
    let results = (0..table.rois.len())
        .map(|k| roc_select(&table.column(k), &labels))
        .collect::<Result<_>>()?;
    Ok(SplitEvaluation {
        sample_index,
        model,
        rois: table.rois.clone(),
        results,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: ModelKind,
    pub roi: String,
    pub samples: usize,
    pub mean: f64,
    /// Sample (n - 1) standard deviation; 0 for a single sample.
    pub std: f64,
    pub single_sample: bool,
    pub best_sample: usize,
    pub best_gmean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub rows: Vec<SummaryRow>,
}

impl BootstrapSummary {
    pub fn row(&self, model: ModelKind, roi: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.model == model && r.roi == roi)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "model,roi,samples,mean_gmean,std_gmean,single_sample,best_sample,best_gmean\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{:.6},{:.6},{},{},{:.6}\n",
                r.model.name(),
                r.roi,
                r.samples,
                r.mean,
                r.std,
                r.single_sample,
                r.best_sample,
                r.best_gmean
            ));
        }
        s
    }
}

/// Mean, sample standard deviation and best sample of the chosen g-mean per
/// (model, ROI). Rows follow the first appearance of each model and ROI.
pub fn aggregate_bootstrap(evaluations: &[SplitEvaluation]) -> Result<BootstrapSummary> {
    if evaluations.is_empty() {
        return Err(Error::arg("evaluations", "no completed bootstrap samples"));
    }
    let mut models: Vec<ModelKind> = Vec::new();
    for e in evaluations {
        if !models.contains(&e.model) {
            models.push(e.model);
        }
    }
    let mut rows = Vec::new();
    for model in models {
        let evals: Vec<&SplitEvaluation> =
            evaluations.iter().filter(|e| e.model == model).collect();
        let rois = &evals[0].rois;
        if let Some(e) = evals.iter().find(|e| &e.rois != rois) {
            return Err(Error::arg(
                "evaluations",
                format!("sample {} has a different ROI list", e.sample_index),
            ));
        }
        for (k, roi) in rois.iter().enumerate() {
            let values: Vec<(usize, f64)> = evals
                .iter()
                .map(|e| (e.sample_index, e.results[k].gmean))
                .collect();
            let n = values.len();
            let mean = values.iter().map(|v| v.1).sum::<f64>() / n as f64;
            let std = if n > 1 {
                (values.iter().map(|v| (v.1 - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            let best = values.iter().copied().fold(values[0], |b, v| {
                if v.1 > b.1 || (v.1 == b.1 && v.0 < b.0) {
                    v
                } else {
                    b
                }
            });
            rows.push(SummaryRow {
                model,
                roi: roi.clone(),
                samples: n,
                mean,
                std,
                single_sample: n == 1,
                best_sample: best.0,
                best_gmean: best.1,
            });
        }
    }
    Ok(BootstrapSummary { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use Cohort::{Control, Patient};

    fn binary(dims: [usize; 3], abnormal: Vec<bool>, coverage: Vec<bool>) -> BinaryAnomalyMap {
        BinaryAnomalyMap {
            subject_id: "s".into(),
            dims,
            abnormal,
            coverage,
            threshold: 0.0,
        }
    }

    fn labelled(c: &[f64], p: &[f64]) -> (Vec<f64>, Vec<Cohort>) {
        let scores = c.iter().chain(p).copied().collect();
        let labels = c
            .iter()
            .map(|_| Control)
            .chain(p.iter().map(|_| Patient))
            .collect();
        (scores, labels)
    }

    /// Brute force over every score and score +/- eps, with an explicit
    /// tie-break on the smallest threshold among exact g-mean maxima.
    fn sweep_oracle(scores: &[f64], labels: &[Cohort]) -> (f64, f64) {
        let eps = 1e-9;
        let mut cands: Vec<f64> = scores.iter().flat_map(|&s| [s - eps, s, s + eps]).collect();
        cands.sort_by(|a, b| a.total_cmp(b));
        let p = labels.iter().filter(|&&c| c == Patient).count();
        let n = labels.len() - p;
        let mut best = (-1.0, f64::NAN);
        for t in cands {
            let tp = scores
                .iter()
                .zip(labels)
                .filter(|(&s, &c)| c == Patient && s > t)
                .count();
            let tn = scores
                .iter()
                .zip(labels)
                .filter(|(&s, &c)| c == Control && s <= t)
                .count();
            let g = ((tp * tn) as f64 / (p * n) as f64).sqrt();
            if g > best.0 {
                best = (g, t);
            }
        }
        best
    }

    #[test]
    fn gmean_examples() {
        assert_eq!(gmean(1.0, 1.0).unwrap(), 1.0);
        assert_eq!(gmean(0.0, 0.37).unwrap(), 0.0);
        assert_abs_diff_eq!(gmean(2.0 / 3.0, 1.0).unwrap(), 0.8165, epsilon = 1e-4);
        assert!(gmean(1.1, 0.5).is_err());
        assert!(gmean(0.5, -0.1).is_err());
    }

    #[test]
    fn worked_example_prefers_smaller_threshold() {
        let (s, l) = labelled(&[2.0, 3.0, 4.0], &[3.5, 5.0, 6.0]);
        let r = roc_select(&s, &l).unwrap();
        assert_abs_diff_eq!(r.gmean, (2.0f64 / 3.0).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(r.gmean, 0.8165, epsilon = 1e-4);
        assert!(r.pathological_threshold > 3.0 && r.pathological_threshold < 3.5);
        let p = r.chosen_point();
        assert_eq!((p.sensitivity, p.specificity), (1.0, 2.0 / 3.0));
        // the other maximum sits between 4 and 5
        let ties = r
            .sweep
            .iter()
            .filter(|q| q.true_positives * q.true_negatives == 6)
            .count();
        assert_eq!(ties, 2);
    }

    #[test]
    fn sweep_has_sentinels_and_midpoints() {
        let (s, l) = labelled(&[1.0, 1.0, 2.0], &[4.0]);
        let r = roc_select(&s, &l).unwrap();
        let t: Vec<f64> = r.sweep.iter().map(|p| p.threshold).collect();
        assert_eq!(t, vec![0.0, 1.5, 3.0, 5.0]);
        assert_eq!(r.gmean, 1.0);
        assert_eq!(r.pathological_threshold, 3.0);
    }

    #[test]
    fn perfect_separation_gives_one() {
        let (s, l) = labelled(&[0.1, 0.2, 0.3], &[0.9, 1.0]);
        assert_eq!(roc_select(&s, &l).unwrap().gmean, 1.0);
    }

    #[test]
    fn identical_scores_match_sweep() {
        let (s, l) = labelled(&[5.0; 4], &[5.0; 3]);
        let r = roc_select(&s, &l).unwrap();
        let (g, _) = sweep_oracle(&s, &l);
        assert_eq!(r.gmean, g);
        assert_eq!(r.gmean, 0.0);
        assert_eq!(r.sweep.len(), 2);
    }

    #[test]
    fn single_class_is_rejected() {
        let (s, l) = labelled(&[1.0, 2.0], &[]);
        assert!(matches!(
            roc_select(&s, &l),
            Err(Error::SingleClass {
                positives: 0,
                negatives: 2
            })
        ));
        let (s, l) = labelled(&[], &[1.0]);
        assert!(matches!(roc_select(&s, &l), Err(Error::SingleClass { .. })));
        assert!(roc_select(&[f64::NAN, 1.0], &[Control, Patient]).is_err());
    }

    #[test]
    fn random_sets_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.gen_range(2..30);
            let mut labels: Vec<Cohort> = (0..n)
                .map(|_| if rng.gen_bool(0.6) { Patient } else { Control })
                .collect();
            labels[0] = Control;
            labels[1] = Patient;
            // coarse grid forces ties
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..12) as f64 * 2.5).collect();
            let r = roc_select(&scores, &labels).unwrap();
            let (g, t) = sweep_oracle(&scores, &labels);
            assert_eq!(r.gmean, g);
            // same classification as the oracle's threshold
            for &s in &scores {
                assert_eq!(s > r.pathological_threshold, s > t);
            }
        }
    }

    #[test]
    fn roi_fraction_counting() {
        // 1 x 4 x 4, left half label 1, right half label 2, checkerboard abnormal
        let dims = [1, 4, 4];
        let labels: Vec<u16> = (0..16).map(|i| if i % 4 < 2 { 1 } else { 2 }).collect();
        let atlas = LabelAtlas::new("a", dims, labels, name_table(&["left", "right"])).unwrap();
        let abnormal: Vec<bool> = (0..16).map(|i| (i / 4 + i % 4) % 2 == 0).collect();
        let mut coverage = vec![true; 16];
        coverage[0] = false; // abnormal, in "left"
        let map = binary(dims, abnormal, coverage);
        assert_abs_diff_eq!(
            roi_fraction(&map, &atlas, 1).unwrap(),
            100.0 * 3.0 / 7.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            roi_fraction(&map, &atlas, 2).unwrap(),
            50.0,
            epsilon = 1e-12
        );

        let empty = binary(dims, vec![false; 16], vec![true; 16]);
        assert_eq!(roi_fraction(&empty, &atlas, 1).unwrap(), 0.0);
        let full = binary(dims, vec![true; 16], vec![true; 16]);
        assert_eq!(roi_fraction(&full, &atlas, 2).unwrap(), 100.0);
        let uncovered = binary(dims, vec![false; 16], vec![false; 16]);
        assert!(matches!(
            roi_fraction(&uncovered, &atlas, 1),
            Err(Error::EmptyRoi { .. })
        ));
        assert!(roi_fraction(&full, &atlas, 3).is_err());
    }

    #[test]
    fn atlas_rejects_unnamed_labels() {
        assert!(LabelAtlas::new("a", [1, 1, 2], vec![0, 3], name_table(&["x"])).is_err());
        assert!(LabelAtlas::new("a", [1, 1, 2], vec![0, 1, 1], name_table(&["x"])).is_err());
    }

    fn ellipsoid(dims: [usize; 3]) -> BrainMask {
        let c = dims.map(|d| (d as f64 - 1.0) / 2.0);
        let a = dims.map(|d| 0.45 * d as f64);
        let mask = (0..dims.iter().product::<usize>())
            .map(|i| {
                let p = [i / (dims[1] * dims[2]), i / dims[2] % dims[1], i % dims[2]];
                (0..3)
                    .map(|k| ((p[k] as f64 - c[k]) / a[k]).powi(2))
                    .sum::<f64>()
                    <= 1.0
            })
            .collect();
        BrainMask::new(dims, mask).unwrap()
    }

    #[test]
    fn synthetic_atlases_cover_and_separate() {
        let mask = ellipsoid([48, 56, 48]);
        let macro_ = synthetic_macro_atlas(&mask).unwrap();
        let sub = synthetic_subcortical_atlas(&mask).unwrap();
        // macro sectors partition the mask
        for (l, m) in macro_.labels.iter().zip(&mask.mask) {
            assert_eq!(*l != 0, *m);
        }
        for label in 1..=8u16 {
            let nm = macro_.labels.iter().filter(|&&l| l == label).count();
            assert!(nm > 1000, "sector {label} has {nm} voxels");
            let ns = sub.labels.iter().filter(|&&l| l == label).count();
            assert!(ns >= 20, "sphere {label} has {ns} voxels");
        }
        let rois = RoiSet::new(&[macro_, sub]).unwrap();
        assert_eq!(rois.len(), 17);
        assert_eq!(rois.separators, vec![9]);
    }

    #[test]
    fn atlas_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let atlas = synthetic_subcortical_atlas(&ellipsoid([10, 12, 11])).unwrap();
        atlas.save(dir.path(), [1.5; 3]).unwrap();
        let back = LabelAtlas::load(&dir.path().join("subcortical.json")).unwrap();
        assert_eq!(back, atlas);
    }

    fn eval(sample: usize, g: f64) -> SplitEvaluation {
        let (s, l) = labelled(&[0.0], &[1.0]);
        let mut r = roc_select(&s, &l).unwrap();
        r.gmean = g;
        SplitEvaluation {
            sample_index: sample,
            model: ModelKind::Sae,
            rois: vec![WHOLE_BRAIN.into()],
            results: vec![r],
        }
    }

    #[test]
    fn aggregate_examples() {
        let s = aggregate_bootstrap(&[eval(0, 0.6), eval(1, 0.8)]).unwrap();
        let r = &s.rows[0];
        assert_abs_diff_eq!(r.mean, 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(r.std, 0.1414, epsilon = 1e-4);
        assert_eq!(
            (r.best_sample, r.best_gmean, r.single_sample),
            (1, 0.8, false)
        );

        let constant: Vec<_> = (0..10).map(|k| eval(k, 0.7)).collect();
        let r = &aggregate_bootstrap(&constant).unwrap().rows[0];
        assert_abs_diff_eq!(r.mean, 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(r.std, 0.0, epsilon = 1e-12);
        assert_eq!(r.best_sample, 0);

        let r = &aggregate_bootstrap(&[eval(3, 0.9)]).unwrap().rows[0];
        assert_eq!((r.std, r.single_sample, r.samples), (0.0, true, 1));
        assert!(aggregate_bootstrap(&[]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn invariant_under_increasing_transform(
            raw in proptest::collection::vec((0u8..20, proptest::bool::ANY), 2..40)
        ) {
            let mut labels: Vec<Cohort> = raw.iter().map(|r| if r.1 { Patient } else { Control }).collect();
            labels[0] = Control;
            labels[1] = Patient;
            let s: Vec<f64> = raw.iter().map(|r| r.0 as f64).collect();
            let t: Vec<f64> = s.iter().map(|v| (v * 0.3).exp() + 7.0).collect();
            let a = roc_select(&s, &labels).unwrap();
            let b = roc_select(&t, &labels).unwrap();
            prop_assert_eq!(a.gmean, b.gmean);
            prop_assert_eq!(a.chosen, b.chosen);
            for (p, q) in a.sweep.iter().zip(&b.sweep) {
                prop_assert_eq!((p.true_positives, p.true_negatives), (q.true_positives, q.true_negatives));
            }
        }

        #[test]
        fn sweep_is_monotone(
            raw in proptest::collection::vec((0.0f64..100.0, proptest::bool::ANY), 2..60)
        ) {
            let mut labels: Vec<Cohort> = raw.iter().map(|r| if r.1 { Patient } else { Control }).collect();
            labels[0] = Control;
            labels[1] = Patient;
            let s: Vec<f64> = raw.iter().map(|r| r.0).collect();
            let r = roc_select(&s, &labels).unwrap();
            for w in r.sweep.windows(2) {
                prop_assert!(w[0].threshold < w[1].threshold);
                prop_assert!(w[1].sensitivity <= w[0].sensitivity);
                prop_assert!(w[1].specificity >= w[0].specificity);
            }
            let max = r.sweep.iter().map(|p| p.gmean).fold(0.0, f64::max);
            prop_assert_eq!(r.gmean, max);
        }

        #[test]
        fn partition_recovers_whole_brain(seed in 0u64..1000) {
            let dims = [6, 9, 8];
            let n = 6 * 9 * 8;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask = BrainMask::new(dims, vec![true; n]).unwrap();
            let atlas = synthetic_macro_atlas(&mask).unwrap();
            let coverage: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
            let abnormal: Vec<bool> = coverage.iter().map(|&c| c && rng.gen_bool(0.2)).collect();
            let map = binary(dims, abnormal, coverage);
            let whole = fraction_in(&map, &map.coverage, WHOLE_BRAIN).unwrap();
            let mut weighted = 0.0;
            let mut total = 0usize;
            for label in 1..=8u16 {
                let region = atlas.region_mask(label);
                let size = region.iter().zip(&map.coverage).filter(|(&r, &c)| r && c).count();
                if size > 0 {
                    weighted += roi_fraction(&map, &atlas, label).unwrap() * size as f64;
                    total += size;
                }
            }
            prop_assert_eq!(total, map.coverage.iter().filter(|&&c| c).count());
            prop_assert!((weighted / total as f64 - whole).abs() < 1e-9);
        }
    }
}
