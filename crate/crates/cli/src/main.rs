use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anomaly_core::anomaly::{ModelKind, SaeAggregation};
use anomaly_core::pipeline::{ModelSelection, Pipeline, PipelineConfig, RunOptions};
use anomaly_core::volume::phantom::write_cohort;
use anomaly_core::volume::{synth_cohort, PhantomSpec};
use anomaly_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Slice and patch auto-encoder anomaly detection on multi-channel volumes.
#[derive(Parser, Debug)]
#[command(name = "anomaly", version)]
struct Cli {
    /// Emit logs and the final status as JSON lines.
    #[arg(long, global = true)]
    json: bool,

    /// Log level (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info", env = "ANOMALY_LOG")]
    log: log::LevelFilter,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic phantom cohort (volumes, truth masks, manifest).
    Synth(SynthArgs),
    /// Freeze the configuration, draw bootstrap splits and build the ROI atlases.
    Split(ConfigArgs),
    /// Train the auto-encoders of the selected samples.
    Train(StageArgs),
    /// Compute abnormality thresholds from the training controls.
    Threshold(StageArgs),
    /// Produce error maps and binary maps for the test subjects.
    Infer(StageArgs),
    /// Score abnormal-voxel percentages per ROI.
    Score(StageArgs),
    /// Select ROC thresholds per ROI and aggregate over samples.
    Evaluate(StageArgs),
    /// Render figures and the markdown report of a completed results tree.
    Report(RootArgs),
    /// Run every stage in order.
    Run(ConfigArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Profile {
    Quick,
    Canonical,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Cohort directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "quick")]
    profile: Profile,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    controls: Option<usize>,
    #[arg(long)]
    patients: Option<usize>,
    /// Lesion intensity offset.
    #[arg(long)]
    delta: Option<f32>,
    /// Noise standard deviation.
    #[arg(long)]
    sigma: Option<f32>,
    /// Grid size as DEPTH,HEIGHT,WIDTH.
    #[arg(long, value_parser = parse_dims)]
    dims: Option<[usize; 3]>,
    #[arg(long)]
    lesion_radius: Option<f32>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Models {
    Ae,
    Sae,
    Both,
}

impl From<Models> for ModelSelection {
    fn from(m: Models) -> Self {
        match m {
            Models::Ae => ModelSelection::Ae,
            Models::Sae => ModelSelection::Sae,
            Models::Both => ModelSelection::Both,
        }
    }
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// JSON configuration file; flags below override its values.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset used when no config file is given.
    #[arg(long, default_value = "full")]
    preset: String,
    /// Cohort manifest (required with --preset).
    #[arg(long)]
    cohort: Option<PathBuf>,
    /// Results root.
    #[arg(long, env = "ANOMALY_OUT")]
    out: Option<PathBuf>,
    /// Atlas name table (`<id>.json` beside `<id>.mvol`); repeatable.
    #[arg(long = "atlas")]
    atlases: Vec<PathBuf>,
    #[arg(long, value_enum)]
    models: Option<Models>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    quantile: Option<f64>,
    #[arg(long)]
    ae_epochs: Option<usize>,
    #[arg(long)]
    sae_epochs: Option<usize>,
    #[arg(long)]
    patches: Option<usize>,
    /// Central axial slices per subject for the AE.
    #[arg(long)]
    slice_count: Option<usize>,
    /// SAE map assembly: `center` or `overlap:<stride>`.
    #[arg(long, value_parser = parse_aggregation)]
    aggregation: Option<SaeAggregation>,
    /// Zero wall-clock fields so reruns are byte-identical.
    #[arg(long)]
    deterministic: Option<bool>,
    /// Skip stages already completed with the same configuration.
    #[arg(long, conflicts_with = "force")]
    resume: bool,
    /// Discard the stage record of an existing results tree and recompute.
    #[arg(long)]
    force: bool,
    /// Bootstrap samples processed concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct RootArgs {
    /// Results root.
    #[arg(long, env = "ANOMALY_OUT")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct StageArgs {
    #[command(flatten)]
    root: RootArgs,
    /// Bootstrap sample (1-based); all samples when omitted.
    #[arg(long)]
    sample: Option<usize>,
    /// Model; every configured model when omitted.
    #[arg(long, value_enum)]
    model: Option<OneModel>,
    /// Recompute even when the stage is recorded as complete.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OneModel {
    Ae,
    Sae,
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|e| format!("bad extent `{p}`: {e}"))
        })
        .collect::<Result<_, _>>()?;
    v.try_into()
        .map_err(|_| format!("expected DEPTH,HEIGHT,WIDTH, got `{s}`"))
}

fn parse_aggregation(s: &str) -> Result<SaeAggregation, String> {
    match s.split_once(':') {
        None if s == "center" => Ok(SaeAggregation::Center),
        Some(("overlap", stride)) => stride
            .parse()
            .map(|stride| SaeAggregation::OverlapMean { stride })
            .map_err(|e| format!("bad stride `{stride}`: {e}")),
        _ => Err(format!(
            "expected `center` or `overlap:<stride>`, got `{s}`"
        )),
    }
}

fn init_logging(json: bool, level: log::LevelFilter) {
    let mut b = env_logger::Builder::new();
    b.filter_level(level);
    if json {
        b.format(|buf, r| {
            let line = serde_json::json!({
                "level": r.level().as_str(),
                "target": r.target(),
                "message": r.args().to_string(),
            });
            writeln!(buf, "{line}")
        });
    }
    b.init();
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Validation(_) | Error::InvalidArgument { .. } => 1,
        _ => 2,
    }
}

fn build_config(a: &ConfigArgs) -> anomaly_core::Result<PipelineConfig> {
    let mut cfg = match &a.config {
        Some(path) => PipelineConfig::load(path)?,
        None => {
            let cohort = a.cohort.clone().ok_or_else(|| {
                Error::Validation("--cohort is required unless --config is given".into())
            })?;
            PipelineConfig::preset(&a.preset, cohort, PathBuf::new())?
        }
    };
    if let Some(c) = &a.cohort {
        cfg.cohort_manifest = c.clone();
    }
    match &a.out {
        Some(o) => cfg.output_dir = o.clone(),
        None if cfg.output_dir.as_os_str().is_empty() => cfg.output_dir = PathBuf::from("results"),
        None => {}
    }
    if !a.atlases.is_empty() {
        cfg.atlases = a.atlases.clone();
    }
    if let Some(m) = a.models {
        cfg.models = m.into();
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.split_seed {
        cfg.split.seed = v;
    }
    if let Some(v) = a.samples {
        cfg.split.samples = v;
    }
    if let Some(v) = a.n_train {
        cfg.split.n_train = v;
    }
    if let Some(v) = a.n_test {
        cfg.split.n_test = v;
    }
    if let Some(v) = a.quantile {
        cfg.quantile = v;
    }
    if let Some(v) = a.ae_epochs {
        cfg.ae.epochs = v;
    }
    if let Some(v) = a.sae_epochs {
        cfg.sae.epochs = v;
    }
    if let Some(v) = a.patches {
        cfg.patches_per_subject = v;
    }
    if let Some(v) = a.slice_count {
        cfg.slice_count = v;
    }
    if let Some(v) = a.aggregation {
        cfg.sae_aggregation = v;
    }
    if let Some(v) = a.deterministic {
        cfg.deterministic = v;
    }
    Ok(cfg)
}

fn synth(a: &SynthArgs) -> anomaly_core::Result<PathBuf> {
    let mut spec = match a.profile {
        Profile::Quick => PhantomSpec::quick(),
        Profile::Canonical => PhantomSpec::canonical(),
    };
    if let Some(v) = a.controls {
        spec.n_controls = v;
    }
    if let Some(v) = a.patients {
        spec.n_patients = v;
    }
    if let Some(v) = a.delta {
        spec.anomaly_magnitude = v;
    }
    if let Some(v) = a.sigma {
        spec.noise_sigma = v;
    }
    if let Some(d) = &a.dims {
        spec.dims = *d;
    }
    if let Some(v) = a.lesion_radius {
        spec.lesion_radius = v;
    }
    spec.validate()?;
    if !a.force && non_empty(&a.out) {
        return Err(Error::Validation(format!(
            "{} exists and is not empty; pass --force to overwrite",
            a.out.display()
        )));
    }
    let cohort = synth_cohort(&spec, a.seed)?;
    write_cohort(&cohort, &a.out)?;
    log::info!(
        "wrote {} controls and {} patients to {}",
        spec.n_controls,
        spec.n_patients,
        a.out.display()
    );
    Ok(a.out.join("manifest.json"))
}

fn non_empty(dir: &Path) -> bool {
    std::fs::read_dir(dir)
        .map(|mut d| d.next().is_some())
        .unwrap_or(false)
}

/// Runs one per-sample stage over the selected samples and models.
fn per_sample(
    a: &StageArgs,
    stage: fn(&Pipeline, usize, ModelKind) -> anomaly_core::Result<()>,
) -> anomaly_core::Result<Pipeline> {
    let opts = RunOptions {
        resume: !a.force,
        force: false,
        jobs: 1,
    };
    let p = Pipeline::open(&a.root.out, opts)?;
    let plans = p.plans()?;
    let samples: Vec<usize> = match a.sample {
        Some(k) if plans.iter().any(|s| s.sample_index == k) => vec![k],
        Some(k) => {
            return Err(Error::Validation(format!(
                "sample {k} is not in the split plan"
            )))
        }
        None => plans.iter().map(|s| s.sample_index).collect(),
    };
    let configured = p.cfg.models.kinds();
    let models = match a.model {
        Some(m) => {
            let kind = match m {
                OneModel::Ae => ModelKind::Ae,
                OneModel::Sae => ModelKind::Sae,
            };
            if !configured.contains(&kind) {
                return Err(Error::Validation(format!(
                    "model {} is not configured for this run",
                    kind.name()
                )));
            }
            vec![kind]
        }
        None => configured,
    };
    for &k in &samples {
        for &m in &models {
            stage(&p, k, m)?;
        }
    }
    Ok(p)
}

fn execute(cmd: &Command) -> anomaly_core::Result<PathBuf> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Split(a) | Command::Run(a) => {
            let cfg = build_config(a)?;
            let opts = RunOptions {
                resume: a.resume,
                force: a.force,
                jobs: a.jobs,
            };
            let p = Pipeline::create(cfg, opts)?;
            if matches!(cmd, Command::Run(_)) {
                p.run()?;
            } else {
                p.split()?;
            }
            Ok(p.root().to_path_buf())
        }
        Command::Train(a) => per_sample(a, Pipeline::train).map(|p| p.root().to_path_buf()),
        Command::Threshold(a) => per_sample(a, Pipeline::threshold).map(|p| p.root().to_path_buf()),
        Command::Infer(a) => per_sample(a, Pipeline::infer).map(|p| p.root().to_path_buf()),
        Command::Score(a) => per_sample(a, Pipeline::score).map(|p| p.root().to_path_buf()),
        Command::Evaluate(a) => {
            let p = per_sample(a, Pipeline::evaluate)?;
            if a.sample.is_none() && a.model.is_none() {
                p.aggregate()?;
            }
            Ok(p.root().to_path_buf())
        }
        Command::Report(a) => {
            let p = Pipeline::open(&a.out, RunOptions::default())?;
            p.report()?;
            Ok(p.root().join("results"))
        }
    }
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Synth(_) => "synth",
        Command::Split(_) => "split",
        Command::Train(_) => "train",
        Command::Threshold(_) => "threshold",
        Command::Infer(_) => "infer",
        Command::Score(_) => "score",
        Command::Evaluate(_) => "evaluate",
        Command::Report(_) => "report",
        Command::Run(_) => "run",
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // usage errors are validation failures
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    init_logging(cli.json, cli.log);
    let name = command_name(&cli.command);
    match execute(&cli.command) {
        Ok(path) => {
            if cli.json {
                println!(
                    "{}",
                    serde_json::json!({"status": "ok", "command": name, "path": path.display().to_string()})
                );
            } else {
                println!("{name}: done ({})", path.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = exit_code(&e);
            if cli.json {
                eprintln!(
                    "{}",
                    serde_json::json!({"status": "error", "command": name, "code": code, "message": e.to_string()})
                );
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(code)
        }
    }
}
