//! End-to-end orchestration over a results tree: split, train, threshold,
//! infer, score, evaluate, aggregate and report. Every stage reads its inputs
//! from disk and is recorded in `stages.json`, so runs can resume.
//!
//! ```text
//! <out>/config.json              frozen resolved configuration
//! <out>/stages.json              stage -> fingerprint of config + cohort
//! <out>/splits/splits.json       bootstrap plans
//! <out>/atlases/                 label volumes, name tables, rois.json
//! <out>/sample_NN/<model>/       checkpoint, loss curve, threshold, maps,
//!                                binary maps, scores, ROC results
//! <out>/results/                 bootstrap summary, detectability, figures
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anomaly::{
    abnormality_threshold, binarize, error_volume_ae, error_volume_sae, read_json, write_json,
    AbnormalityThreshold, BinaryAnomalyMap, ErrorMap, ModelKind, SaeAggregation,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    aggregate_bootstrap, evaluate_split, synthetic_macro_atlas, synthetic_subcortical_atlas,
    BootstrapSummary, LabelAtlas, RoiScoreTable, RoiSet, SplitEvaluation,
};
use crate::models::{
    checkpoint_id, train_ae, train_sae, AeModel, SaeModel, TrainConfig, PATCH_SIZE,
};
use crate::nn::checkpoint;
use crate::report;
use crate::sampling::{
    bootstrap_split, build_similar_pairs, extract_axial_slices, extract_patches, slice_band,
    stack_pairs, stack_slices, BalanceCriteria, PairDatasetManifest, SliceDatasetManifest,
    SplitPlan, AE_SLICE_COUNT, PATCHES_PER_SUBJECT,
};
use crate::volume::phantom::load_truth;
use crate::volume::{
    compute_brain_mask, load_manifest, load_mvol, normalize_channels, BrainMask, Cohort,
    ManifestEntry, PhantomTruth, SubjectMeta, Volume,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSelection {
    Ae,
    Sae,
    Both,
}

impl ModelSelection {
    pub fn kinds(self) -> Vec<ModelKind> {
        match self {
            ModelSelection::Ae => vec![ModelKind::Ae],
            ModelSelection::Sae => vec![ModelKind::Sae],
            ModelSelection::Both => vec![ModelKind::Ae, ModelKind::Sae],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub samples: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub balance: BalanceCriteria,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub cohort_manifest: PathBuf,
    /// Atlas name tables (`<id>.json` beside `<id>.mvol`). Empty selects the
    /// synthetic macro and subcortical atlases built from the first control.
    #[serde(default)]
    pub atlases: Vec<PathBuf>,
    pub output_dir: PathBuf,
    pub models: ModelSelection,
    pub ae: TrainConfig,
    pub sae: TrainConfig,
    pub quantile: f64,
    pub sae_aggregation: SaeAggregation,
    pub slice_count: usize,
    pub patches_per_subject: usize,
    /// A voxel is brain when any normalized channel exceeds this.
    pub mask_epsilon: f32,
    pub split: SplitConfig,
    /// Base seed of model initialization and patch sampling.
    pub seed: u64,
    /// Zero wall-clock fields so reruns are byte-identical.
    pub deterministic: bool,
    /// Keep voxel error maps next to the binary maps.
    pub save_error_maps: bool,
}

impl PipelineConfig {
    /// Hyperparameters of the original study: 41/15 control splits, ten
    /// bootstrap samples, 160 AE epochs, 30 SAE epochs, 98% quantile.
    pub fn full(cohort_manifest: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            cohort_manifest: cohort_manifest.into(),
            atlases: Vec::new(),
            output_dir: output_dir.into(),
            models: ModelSelection::Both,
            ae: TrainConfig::ae_default(),
            sae: TrainConfig::sae_default(),
            quantile: 0.98,
            sae_aggregation: SaeAggregation::Center,
            slice_count: AE_SLICE_COUNT,
            patches_per_subject: PATCHES_PER_SUBJECT,
            mask_epsilon: 1e-3,
            split: SplitConfig {
                samples: 10,
                n_train: 41,
                n_test: 15,
                balance: BalanceCriteria::default(),
                seed: 2024,
            },
            seed: 7,
            deterministic: false,
            save_error_maps: true,
        }
    }

    /// Desk-scale preset for the quick phantom cohort (30 controls): two
    /// 20/10 splits, reduced epochs and patch counts, and AE batches of 8 so
    /// the shorter schedule still takes enough optimizer steps.
    pub fn quick(cohort_manifest: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        let base = Self::full(cohort_manifest, output_dir);
        Self {
            ae: TrainConfig {
                epochs: 30,
                batch_size: 8,
                ..base.ae.clone()
            },
            sae: TrainConfig {
                epochs: 10,
                ..base.sae.clone()
            },
            patches_per_subject: 400,
            split: SplitConfig {
                samples: 2,
                n_train: 20,
                n_test: 10,
                ..base.split.clone()
            },
            deterministic: true,
            ..base
        }
    }

    pub fn preset(
        name: &str,
        cohort_manifest: impl Into<PathBuf>,
        output_dir: impl Into<PathBuf>,
    ) -> Result<Self> {
        match name {
            "full" => Ok(Self::full(cohort_manifest, output_dir)),
            "quick" => Ok(Self::quick(cohort_manifest, output_dir)),
            _ => Err(Error::Validation(format!(
                "unknown preset `{name}` (expected `full` or `quick`)"
            ))),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path).map_err(|e| Error::Validation(format!("config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(Error::Validation(msg));
        if !self.cohort_manifest.is_file() {
            return invalid(format!(
                "cohort manifest {} does not exist",
                self.cohort_manifest.display()
            ));
        }
        for a in &self.atlases {
            if !a.is_file() || !a.with_extension("mvol").is_file() {
                return invalid(format!(
                    "atlas {} (and its .mvol) does not exist",
                    a.display()
                ));
            }
        }
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return invalid(format!(
                "quantile {} must lie strictly between 0 and 1",
                self.quantile
            ));
        }
        for (name, t) in [("ae", &self.ae), ("sae", &self.sae)] {
            t.validate()
                .map_err(|e| Error::Validation(format!("{name} training: {e}")))?;
        }
        if self.slice_count == 0 || self.patches_per_subject == 0 {
            return invalid("slice_count and patches_per_subject must be positive".into());
        }
        if let SaeAggregation::OverlapMean { stride: 0 } = self.sae_aggregation {
            return invalid("overlap-mean stride must be positive".into());
        }
        let s = &self.split;
        if s.samples == 0 || s.n_train < 2 || s.n_test == 0 {
            return invalid(format!(
                "split needs at least one sample, two training and one test control (got {} / {} / {})",
                s.samples, s.n_train, s.n_test
            ));
        }
        Ok(())
    }
}

/// Seed for one (purpose, sample, model) triple, independent of run order.
fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(tag.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A normalized subject with its brain mask and, for phantoms, ground truth.
pub struct Subject {
    pub meta: SubjectMeta,
    pub volume: Volume,
    pub mask: BrainMask,
    pub truth: Option<PhantomTruth>,
}

/// Mean error inside vs outside the true anomaly masks of the patients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detectability {
    pub sample_index: usize,
    pub model: ModelKind,
    pub inside_voxels: usize,
    pub outside_voxels: usize,
    pub inside_mean: f64,
    pub outside_mean: f64,
    pub ratio: f64,
}

/// ROI names and the indices where a new atlas starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiLayout {
    pub atlases: Vec<String>,
    pub rois: Vec<String>,
    pub separators: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Skip stages already recorded with the same fingerprint.
    pub resume: bool,
    /// Start a fresh stage manifest over an existing results tree.
    pub force: bool,
    /// Maximum number of bootstrap samples processed concurrently.
    pub jobs: usize,
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    root: PathBuf,
    manifest_dir: PathBuf,
    entries: Vec<ManifestEntry>,
    fingerprint: String,
    opts: RunOptions,
    stages: Mutex<BTreeMap<String, String>>,
}

impl Pipeline {
    /// Validates `cfg`, freezes it into the output directory and opens the
    /// stage manifest. An existing results tree is reused only with
    /// `opts.resume`, and only if it was produced by the same configuration.
    pub fn create(cfg: PipelineConfig, opts: RunOptions) -> Result<Self> {
        cfg.validate()?;
        let root = cfg.output_dir.clone();
        let frozen = root.join("config.json");
        let stages_path = root.join("stages.json");
        if stages_path.exists() && !opts.resume && !opts.force {
            return Err(Error::Validation(format!(
                "{} already holds a results tree; pass --resume to continue it or --force to start over",
                root.display()
            )));
        }
        if opts.resume && frozen.is_file() {
            let old = PipelineConfig::load(&frozen)?;
            if old != cfg {
                log::warn!("configuration differs from the frozen copy; stale stages will rerun");
            }
        }
        create_dir(&root)?;
        write_json(&frozen, &cfg)?;
        Self::open_inner(cfg, opts)
    }

    /// Opens an existing results tree using its frozen configuration. Its
    /// stage manifest is kept; `opts.resume` decides whether finished stages
    /// are skipped.
    pub fn open(root: &Path, opts: RunOptions) -> Result<Self> {
        let frozen = root.join("config.json");
        if !frozen.is_file() {
            return Err(Error::Validation(format!(
                "{} has no config.json; run `run` or `split` first",
                root.display()
            )));
        }
        let mut cfg = PipelineConfig::load(&frozen)?;
        cfg.output_dir = root.to_path_buf();
        cfg.validate()?;
        Self::open_inner(
            cfg,
            RunOptions {
                force: false,
                ..opts
            },
        )
    }

    fn open_inner(cfg: PipelineConfig, opts: RunOptions) -> Result<Self> {
        let entries =
            load_manifest(&cfg.cohort_manifest).map_err(|e| Error::Validation(e.to_string()))?;
        let manifest_dir = cfg
            .cohort_manifest
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let manifest_bytes =
            fs::read(&cfg.cohort_manifest).map_err(|e| Error::io(&cfg.cohort_manifest, e))?;
        // the output location does not change what is computed
        let mut keyed = cfg.clone();
        keyed.output_dir = PathBuf::new();
        let cfg_bytes = serde_json::to_vec(&keyed).map_err(|e| Error::json("config", e))?;
        let fingerprint = sha_hex(&[cfg_bytes, manifest_bytes].concat());
        let root = cfg.output_dir.clone();
        let stages_path = root.join("stages.json");
        let stages = if !opts.force && stages_path.is_file() {
            read_json(&stages_path)?
        } else {
            BTreeMap::new()
        };
        Ok(Self {
            cfg,
            root,
            manifest_dir,
            entries,
            fingerprint,
            opts: RunOptions {
                jobs: opts.jobs.max(1),
                ..opts
            },
            stages: Mutex::new(stages),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn stage_hash(&self, stage: &str) -> String {
        sha_hex(format!("{}/{stage}", self.fingerprint).as_bytes())
    }

    fn is_done(&self, stage: &str) -> bool {
        let stages = self.stages.lock().expect("stage manifest lock");
        stages.get(stage) == Some(&self.stage_hash(stage))
    }

    fn mark_done(&self, stage: &str) -> Result<()> {
        let mut stages = self.stages.lock().expect("stage manifest lock");
        stages.insert(stage.to_string(), self.stage_hash(stage));
        write_json(&self.root.join("stages.json"), &*stages)
    }

    /// Runs `body` unless `stage` is already complete, wrapping failures with
    /// the stage name and the directory holding its partial state.
    fn stage(&self, stage: &str, dir: &Path, body: impl FnOnce() -> Result<()>) -> Result<()> {
        if self.opts.resume && self.is_done(stage) {
            log::info!("stage {stage}: up to date");
            return Ok(());
        }
        log::info!("stage {stage}: running");
        let wrap = |e: Error| match e {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage: stage.to_string(),
                path: dir.to_path_buf(),
                source: Box::new(e),
            },
        };
        create_dir(dir).map_err(wrap)?;
        body().map_err(wrap)?;
        self.mark_done(stage)
    }

    pub fn sample_dir(&self, k: usize, model: ModelKind) -> PathBuf {
        self.root.join(format!("sample_{k:02}")).join(model.name())
    }

    fn entry(&self, id: &str) -> Result<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.meta.subject_id == id)
            .ok_or_else(|| Error::arg("subject", format!("{id} not in the cohort manifest")))
    }

    pub fn load_subject(&self, id: &str) -> Result<Subject> {
        let entry = self.entry(id)?;
        let raw = load_mvol(&entry.resolve(&self.manifest_dir))?;
        let volume = normalize_channels(&raw)?;
        let mask = compute_brain_mask(&volume, self.cfg.mask_epsilon)?;
        let truth = match &entry.truth {
            Some(rel) => Some(load_truth(&self.manifest_dir.join(rel))?),
            None => None,
        };
        Ok(Subject {
            meta: entry.meta.clone(),
            volume,
            mask,
            truth,
        })
    }

    fn ids(&self, cohort: Cohort) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.meta.cohort == cohort)
            .map(|e| e.meta.subject_id.clone())
            .collect()
    }

    pub fn plans(&self) -> Result<Vec<SplitPlan>> {
        read_json(&self.root.join("splits").join("splits.json"))
    }

    pub fn roi_layout(&self) -> Result<RoiLayout> {
        read_json(&self.root.join("atlases").join("rois.json"))
    }

    fn atlases(&self) -> Result<Vec<LabelAtlas>> {
        let layout = self.roi_layout()?;
        let dir = self.root.join("atlases");
        layout
            .atlases
            .iter()
            .map(|id| LabelAtlas::load(&dir.join(format!("{id}.json"))))
            .collect()
    }

    /// Bootstrap plans and the atlases used for scoring.
    pub fn split(&self) -> Result<()> {
        let dir = self.root.join("splits");
        self.stage("split", &dir, || {
            let controls: Vec<SubjectMeta> = self
                .entries
                .iter()
                .filter(|e| e.meta.cohort == Cohort::Control)
                .map(|e| e.meta.clone())
                .collect();
            let s = &self.cfg.split;
            let plans = bootstrap_split(
                &controls, s.samples, s.n_train, s.n_test, &s.balance, s.seed,
            )?;
            write_json(&dir.join("splits.json"), &plans)?;

            let atlas_dir = self.root.join("atlases");
            create_dir(&atlas_dir)?;
            let first = controls
                .first()
                .ok_or_else(|| Error::arg("cohort", "no controls"))?;
            let reference = self.load_subject(&first.subject_id)?;
            let atlases = if self.cfg.atlases.is_empty() {
                vec![
                    synthetic_macro_atlas(&reference.mask)?,
                    synthetic_subcortical_atlas(&reference.mask)?,
                ]
            } else {
                self.cfg
                    .atlases
                    .iter()
                    .map(|p| LabelAtlas::load(p))
                    .collect::<Result<_>>()?
            };
            for a in &atlases {
                if a.dims != reference.volume.dims {
                    return Err(Error::shape(
                        format!("atlas `{}`", a.atlas_id),
                        reference.volume.dims,
                        a.dims,
                    ));
                }
                a.save(&atlas_dir, reference.volume.voxel_size_mm)?;
            }
            let set = RoiSet::new(&atlases)?;
            let layout = RoiLayout {
                atlases: atlases.iter().map(|a| a.atlas_id.clone()).collect(),
                rois: set.names,
                separators: set.separators,
            };
            write_json(&atlas_dir.join("rois.json"), &layout)
        })
    }

    fn plan(&self, k: usize) -> Result<SplitPlan> {
        self.plans()?
            .into_iter()
            .find(|p| p.sample_index == k)
            .ok_or_else(|| Error::arg("sample", format!("bootstrap sample {k} not in splits.json")))
    }

    pub fn train(&self, k: usize, model: ModelKind) -> Result<()> {
        let dir = self.sample_dir(k, model);
        let stage = format!("sample_{k:02}/{}/train", model.name());
        self.stage(&stage, &dir, || {
            let plan = self.plan(k)?;
            let subjects: Vec<Subject> = plan
                .train_ids
                .iter()
                .map(|id| self.load_subject(id))
                .collect::<Result<_>>()?;
            let tag =
                |what: &str| derive_seed(self.cfg.seed, &format!("{what}/{k}/{}", model.name()));
            let ckpt_dir = dir.clone();
            let curve = match model {
                ModelKind::Ae => {
                    let v0 = &subjects[0].volume;
                    let [d, h, w] = v0.dims;
                    let mut slices = Vec::new();
                    for s in &subjects {
                        slices.extend(extract_axial_slices(&s.volume, self.cfg.slice_count)?);
                    }
                    let x = stack_slices(&slices, v0.channels, h, w)?;
                    let band = slice_band(d, self.cfg.slice_count)?;
                    write_json(
                        &dir.join("dataset.json"),
                        &SliceDatasetManifest {
                            subjects: plan.train_ids.clone(),
                            slice_band: [band.start, band.end],
                            samples: slices.len(),
                        },
                    )?;
                    let mut net = AeModel::<f32>::standard(h, w, tag("init"))?;
                    let cfg = TrainConfig {
                        seed: tag("shuffle"),
                        ..self.cfg.ae.clone()
                    };
                    let curve = train_ae(&mut net, &x, &cfg, |epoch, m| {
                        checkpoint::write(
                            &ckpt_dir.join(format!("model_epoch{epoch:03}.ckpt")),
                            &m.to_bytes()?,
                        )
                    })?;
                    checkpoint::write(&dir.join("model.ckpt"), &net.to_bytes()?)?;
                    curve
                }
                ModelKind::Sae => {
                    let patch_seed = tag("patches");
                    let sampled: Vec<(&Volume, _)> = subjects
                        .iter()
                        .enumerate()
                        .map(|(i, s)| {
                            let seed = derive_seed(patch_seed, &s.meta.subject_id);
                            let p = extract_patches(
                                &s.volume,
                                &s.mask,
                                self.cfg.patches_per_subject,
                                PATCH_SIZE,
                                seed,
                            )
                            .map_err(|e| Error::arg("patches", format!("subject {i}: {e}")))?;
                            Ok((&s.volume, p))
                        })
                        .collect::<Result<_>>()?;
                    let pairs = build_similar_pairs(&sampled, PATCH_SIZE, tag("pairs"))?;
                    write_json(
                        &dir.join("dataset.json"),
                        &PairDatasetManifest {
                            seed: patch_seed,
                            patch: PATCH_SIZE,
                            patches_per_subject: self.cfg.patches_per_subject,
                            pairs: pairs.iter().map(|p| p.record()).collect(),
                        },
                    )?;
                    let (left, right) =
                        stack_pairs(&pairs, subjects[0].volume.channels, PATCH_SIZE)?;
                    drop(pairs);
                    let mut net = SaeModel::<f32>::new(
                        crate::models::SaeArchitecture {
                            channels: subjects[0].volume.channels,
                            ..Default::default()
                        },
                        tag("init"),
                    )?;
                    let cfg = TrainConfig {
                        seed: tag("shuffle"),
                        ..self.cfg.sae.clone()
                    };
                    let curve = train_sae(&mut net, &left, &right, &cfg, |epoch, m| {
                        checkpoint::write(
                            &ckpt_dir.join(format!("model_epoch{epoch:03}.ckpt")),
                            &m.to_bytes()?,
                        )
                    })?;
                    checkpoint::write(&dir.join("model.ckpt"), &net.to_bytes()?)?;
                    curve
                }
            };
            write_text(&dir.join("loss.csv"), &curve.to_csv(self.cfg.deterministic))
        })
    }

    fn error_map(&self, model: ModelKind, bytes: &[u8], subject: &Subject) -> Result<ErrorMap> {
        let id = checkpoint_id(bytes);
        match model {
            ModelKind::Ae => {
                let net = AeModel::<f32>::from_bytes(bytes)?;
                error_volume_ae(
                    &net,
                    &subject.volume,
                    &subject.mask,
                    self.cfg.slice_count,
                    &id,
                )
            }
            ModelKind::Sae => {
                let net = SaeModel::<f32>::from_bytes(bytes)?;
                error_volume_sae(
                    &net,
                    &subject.volume,
                    &subject.mask,
                    self.cfg.sae_aggregation,
                    &id,
                )
            }
        }
    }

    fn checkpoint(&self, k: usize, model: ModelKind) -> Result<Vec<u8>> {
        let path = self.sample_dir(k, model).join("model.ckpt");
        if !path.is_file() {
            return Err(Error::Validation(format!(
                "{} is missing; run the train stage first",
                path.display()
            )));
        }
        checkpoint::read(&path)
    }

    /// Abnormality threshold from the error maps of the training controls.
    pub fn threshold(&self, k: usize, model: ModelKind) -> Result<()> {
        let dir = self.sample_dir(k, model);
        let stage = format!("sample_{k:02}/{}/threshold", model.name());
        self.stage(&stage, &dir, || {
            let plan = self.plan(k)?;
            let bytes = self.checkpoint(k, model)?;
            let maps_dir = dir.join("maps");
            create_dir(&maps_dir)?;
            let mut maps = Vec::with_capacity(plan.train_ids.len());
            for id in &plan.train_ids {
                let s = self.load_subject(id)?;
                let m = self.error_map(model, &bytes, &s)?;
                if self.cfg.save_error_maps {
                    m.save(&maps_dir, id, s.volume.voxel_size_mm)?;
                }
                maps.push(m);
            }
            let t = abnormality_threshold(&maps, self.cfg.quantile)?;
            write_json(&dir.join("threshold.json"), &t)
        })
    }

    fn load_threshold(&self, k: usize, model: ModelKind) -> Result<AbnormalityThreshold> {
        let path = self.sample_dir(k, model).join("threshold.json");
        if !path.is_file() {
            return Err(Error::Validation(format!(
                "{} is missing; run the threshold stage first",
                path.display()
            )));
        }
        read_json(&path)
    }

    /// Test-subject order of one sample: its test controls, then all patients.
    fn test_subjects(&self, plan: &SplitPlan) -> Vec<String> {
        plan.test_ids
            .iter()
            .cloned()
            .chain(self.ids(Cohort::Patient))
            .collect()
    }

    /// Error and binary maps of the test controls and patients.
    pub fn infer(&self, k: usize, model: ModelKind) -> Result<()> {
        let dir = self.sample_dir(k, model);
        let stage = format!("sample_{k:02}/{}/infer", model.name());
        self.stage(&stage, &dir, || {
            let plan = self.plan(k)?;
            let bytes = self.checkpoint(k, model)?;
            let t = self.load_threshold(k, model)?;
            let (maps_dir, bin_dir) = (dir.join("maps"), dir.join("binary"));
            create_dir(&maps_dir)?;
            create_dir(&bin_dir)?;
            let (mut inside, mut outside) = ((0.0, 0usize), (0.0, 0usize));
            for id in self.test_subjects(&plan) {
                let s = self.load_subject(&id)?;
                let m = self.error_map(model, &bytes, &s)?;
                if self.cfg.save_error_maps {
                    m.save(&maps_dir, &id, s.volume.voxel_size_mm)?;
                }
                let b = binarize(&m, t.value);
                crate::volume::save_mvol(
                    &b.to_volume(s.volume.voxel_size_mm)?,
                    &bin_dir.join(format!("{id}.mvol")),
                )?;
                if let (Cohort::Patient, Some(truth)) = (s.meta.cohort, &s.truth) {
                    for ((&e, &c), &a) in m
                        .joint_error
                        .iter()
                        .zip(&m.coverage)
                        .zip(&truth.anomaly_mask)
                    {
                        if c {
                            let acc = if a { &mut inside } else { &mut outside };
                            acc.0 += e as f64;
                            acc.1 += 1;
                        }
                    }
                }
            }
            if inside.1 > 0 && outside.1 > 0 {
                let (im, om) = (inside.0 / inside.1 as f64, outside.0 / outside.1 as f64);
                let d = Detectability {
                    sample_index: k,
                    model,
                    inside_voxels: inside.1,
                    outside_voxels: outside.1,
                    inside_mean: im,
                    outside_mean: om,
                    ratio: im / om,
                };
                write_json(&dir.join("detectability.json"), &d)?;
            }
            Ok(())
        })
    }

    pub fn score(&self, k: usize, model: ModelKind) -> Result<()> {
        let dir = self.sample_dir(k, model);
        let stage = format!("sample_{k:02}/{}/score", model.name());
        self.stage(&stage, &dir, || {
            let plan = self.plan(k)?;
            let t = self.load_threshold(k, model)?;
            let rois = RoiSet::new(&self.atlases()?)?;
            let mut maps: Vec<(BinaryAnomalyMap, Cohort)> = Vec::new();
            for id in self.test_subjects(&plan) {
                let path = dir.join("binary").join(format!("{id}.mvol"));
                if !path.is_file() {
                    return Err(Error::Validation(format!(
                        "{} is missing; run the infer stage first",
                        path.display()
                    )));
                }
                maps.push((
                    BinaryAnomalyMap::from_volume(&load_mvol(&path)?, t.value)?,
                    self.entry(&id)?.meta.cohort,
                ));
            }
            let refs: Vec<(&BinaryAnomalyMap, Cohort)> =
                maps.iter().map(|(m, c)| (m, *c)).collect();
            let table = RoiScoreTable::build(&rois, &refs)?;
            write_text(&dir.join("scores.csv"), &table.to_csv())?;
            write_json(&dir.join("scores.json"), &table)
        })
    }

    pub fn evaluate(&self, k: usize, model: ModelKind) -> Result<()> {
        let dir = self.sample_dir(k, model);
        let stage = format!("sample_{k:02}/{}/evaluate", model.name());
        self.stage(&stage, &dir, || {
            let path = dir.join("scores.json");
            if !path.is_file() {
                return Err(Error::Validation(format!(
                    "{} is missing; run the score stage first",
                    path.display()
                )));
            }
            let table: RoiScoreTable = read_json(&path)?;
            write_json(&dir.join("roc.json"), &evaluate_split(k, model, &table)?)
        })
    }

    pub fn load_evaluation(&self, k: usize, model: ModelKind) -> Result<SplitEvaluation> {
        let path = self.sample_dir(k, model).join("roc.json");
        if !path.is_file() {
            return Err(Error::Validation(format!(
                "{} is missing; the results tree is incomplete",
                path.display()
            )));
        }
        read_json(&path)
    }

    pub fn load_scores(&self, k: usize, model: ModelKind) -> Result<RoiScoreTable> {
        read_json(&self.sample_dir(k, model).join("scores.json"))
    }

    /// All per-sample stages of sample `k` for every selected model.
    pub fn run_sample(&self, k: usize) -> Result<()> {
        for model in self.cfg.models.kinds() {
            self.train(k, model)?;
            self.threshold(k, model)?;
            self.infer(k, model)?;
            self.score(k, model)?;
            self.evaluate(k, model)?;
        }
        Ok(())
    }

    /// Runs every sample, at most `jobs` at a time.
    pub fn run_samples(&self) -> Result<()> {
        let samples: Vec<usize> = self.plans()?.iter().map(|p| p.sample_index).collect();
        let next = AtomicUsize::new(0);
        let failure: Mutex<Option<Error>> = Mutex::new(None);
        std::thread::scope(|scope| {
            for _ in 0..self.opts.jobs.min(samples.len()) {
                scope.spawn(|| loop {
                    if failure.lock().expect("failure lock").is_some() {
                        return;
                    }
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(&k) = samples.get(i) else { return };
                    if let Err(e) = self.run_sample(k) {
                        failure.lock().expect("failure lock").get_or_insert(e);
                        return;
                    }
                });
            }
        });
        match failure.into_inner().expect("failure lock") {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    pub fn aggregate(&self) -> Result<()> {
        let dir = self.root.join("results");
        self.stage("aggregate", &dir, || {
            let mut evals = Vec::new();
            let mut detect = Vec::new();
            for plan in self.plans()? {
                for model in self.cfg.models.kinds() {
                    evals.push(self.load_evaluation(plan.sample_index, model)?);
                    let d = self
                        .sample_dir(plan.sample_index, model)
                        .join("detectability.json");
                    if d.is_file() {
                        detect.push(read_json::<Detectability>(&d)?);
                    }
                }
            }
            let summary = aggregate_bootstrap(&evals)?;
            write_text(&dir.join("summary.csv"), &summary.to_csv())?;
            write_json(&dir.join("summary.json"), &summary)?;
            if !detect.is_empty() {
                let mut csv = String::from(
                    "sample,model,inside_voxels,outside_voxels,inside_mean,outside_mean,ratio\n",
                );
                for d in &detect {
                    csv.push_str(&format!(
                        "{},{},{},{},{:.6e},{:.6e},{:.4}\n",
                        d.sample_index,
                        d.model.name(),
                        d.inside_voxels,
                        d.outside_voxels,
                        d.inside_mean,
                        d.outside_mean,
                        d.ratio
                    ));
                }
                write_text(&dir.join("detectability.csv"), &csv)?;
            }
            Ok(())
        })
    }

    pub fn load_summary(&self) -> Result<BootstrapSummary> {
        let path = self.root.join("results").join("summary.json");
        if !path.is_file() {
            return Err(Error::Validation(format!(
                "{} is missing; run the aggregate stage first",
                path.display()
            )));
        }
        read_json(&path)
    }

    pub fn load_detectability(&self) -> Result<Vec<Detectability>> {
        let mut out = Vec::new();
        for plan in self.plans()? {
            for model in self.cfg.models.kinds() {
                let d = self
                    .sample_dir(plan.sample_index, model)
                    .join("detectability.json");
                if d.is_file() {
                    out.push(read_json(&d)?);
                }
            }
        }
        Ok(out)
    }

    /// Figures and the markdown report. Always regenerated: it is cheap and
    /// deterministic.
    pub fn report(&self) -> Result<()> {
        let dir = self.root.join("results");
        let fig = dir.join("figures");
        let wrap = |e: Error| Error::Stage {
            stage: "report".into(),
            path: dir.clone(),
            source: Box::new(e),
        };
        let body = || -> Result<()> {
            create_dir(&fig)?;
            let summary = self.load_summary()?;
            let layout = self.roi_layout()?;
            let models = self.cfg.models.kinds();
            write_text(
                &fig.join("gmean_bars.svg"),
                &report::gmean_bar_chart(&summary, &layout, &models),
            )?;
            let first = self.plans()?.first().map(|p| p.sample_index).unwrap_or(1);
            for &m in &models {
                let table = self.load_scores(first, m)?;
                let title = format!(
                    "{} abnormal voxels (%), bootstrap sample {first}",
                    m.label()
                );
                write_text(
                    &fig.join(format!("heat_{}.svg", m.name())),
                    &report::heat_table(&table, &title),
                )?;
            }
            let detect = self.load_detectability()?;
            write_text(
                &dir.join("report.md"),
                &report::markdown(&summary, &models, &detect),
            )
        };
        body().map_err(wrap)
    }

    /// The whole pipeline in stage order.
    pub fn run(&self) -> Result<()> {
        self.split()?;
        self.run_samples()?;
        self.aggregate()?;
        self.report()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_follow_documented_values() {
        let p = PipelineConfig::full("m.json", "out");
        assert_eq!(
            (p.ae.epochs, p.ae.batch_size, p.sae.epochs, p.sae.batch_size),
            (160, 40, 30, 225)
        );
        assert_eq!(
            (p.split.samples, p.split.n_train, p.split.n_test),
            (10, 41, 15)
        );
        assert_eq!(
            (
                p.quantile,
                p.sae.alpha,
                p.slice_count,
                p.patches_per_subject
            ),
            (0.98, 0.005, 40, 15_000)
        );
        let q = PipelineConfig::quick("m.json", "out");
        assert_eq!((q.split.samples, q.split.n_train + q.split.n_test), (2, 30));
        assert!(q.deterministic);
        assert!(PipelineConfig::preset("fast", "m", "o").is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let q = PipelineConfig::quick("cohort/manifest.json", "out");
        let text = serde_json::to_string(&q).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&text).unwrap(), q);
    }

    #[test]
    fn missing_paths_fail_validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = PipelineConfig::quick(dir.path().join("nope.json"), dir.path().join("out"));
        assert!(matches!(cfg.validate(), Err(Error::Validation(_))));
        let manifest = dir.path().join("manifest.json");
        fs::write(&manifest, "[]").unwrap();
        cfg.cohort_manifest = manifest;
        cfg.validate().unwrap();
        cfg.atlases = vec![dir.path().join("atlas.json")];
        assert!(matches!(cfg.validate(), Err(Error::Validation(_))));
        cfg.atlases.clear();
        cfg.quantile = 1.0;
        assert!(matches!(cfg.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn derived_seeds_are_distinct_and_stable() {
        let a = derive_seed(7, "init/1/ae");
        assert_eq!(a, derive_seed(7, "init/1/ae"));
        assert_ne!(a, derive_seed(7, "init/2/ae"));
        assert_ne!(a, derive_seed(8, "init/1/ae"));
    }
}
