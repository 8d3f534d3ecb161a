//! Command-line front end: config files, run directories and manifests.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid usage or config,
//! 3 diverged distillation, 4 preprocessing mismatch, 5 gradient check failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::attention::{AtomParams, MatchMode};
use crate::augment::{AugOp, AugSettings};
use crate::data::{
    container_dtype, load_dataset_with, load_synthetic, save_synthetic, DatasetSplits, LoadOptions, SyntheticDataset,
};
use crate::distill::{default_lambda, resume, run, DistillConfig, DistillState, MetricsLog};
use crate::error::Error;
use crate::eval::{evaluate, random_baseline, EvalProtocol, EvalReport};
use crate::export::export_images;
use crate::gradcheck::{run_gradcheck, GradcheckConfig};
use crate::model::{Encoder, TapPoint};
use crate::nas::{rank_on_proxy, reference_accuracies, SearchGrid};
use crate::real::DType;

pub const DATA_ROOT_ENV: &str = "ATOM_DATA_ROOT";

pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const DIVERGED: i32 = 3;
    pub const PREPROCESS: i32 = 4;
    pub const GRADCHECK: i32 = 5;
}

#[derive(Debug, Parser)]
#[command(name = "atom", version, about = "Dataset distillation by attention matching")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Distill a synthetic set (or draw a random baseline).
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `[distill] seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// `random` writes a per-class random real subset instead of distilling.
        #[arg(long)]
        baseline: Option<String>,
        /// Continue from a checkpoint written by an equivalent config.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        data_root: Option<PathBuf>,
    },
    /// Train fresh networks on a synthetic set and test them on real data.
    Eval {
        #[arg(long)]
        synthetic: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the directory holding the synthetic set.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        data_root: Option<PathBuf>,
    },
    /// Rank a ConvNet grid by accuracy after training on a proxy set.
    Nas {
        #[arg(long)]
        synthetic: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data_root: Option<PathBuf>,
    },
    /// Write every synthetic image and a montage per class as PNG.
    ExportImages {
        #[arg(long)]
        synthetic: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks of all analytic gradients at double precision.
    Gradcheck {
        #[arg(long, default_value_t = 2)]
        batch: usize,
        #[arg(long, default_value_t = 4)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Perturbs the analytic gradient of one suite (negative control).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub name: String,
    pub root: Option<PathBuf>,
    pub zca: Option<bool>,
    pub zca_eps: Option<f64>,
    /// ZCA cache location; defaults to `<out>/cache`.
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSection {
    pub ipc: usize,
    #[serde(default = "default_iterations")]
    pub iterations: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub checkpoint_every: u64,
}

fn default_iterations() -> u64 {
    8000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizationSection {
    pub lr_images: Option<f64>,
    pub image_momentum: f64,
    pub weight_decay_images: f64,
    pub batch_real: usize,
    pub syn_batch: Option<usize>,
}

impl Default for OptimizationSection {
    fn default() -> Self {
        let d = DistillConfig::new(1);
        OptimizationSection {
            lr_images: None,
            image_momentum: d.image_momentum,
            weight_decay_images: d.weight_decay_images,
            batch_real: d.batch_real,
            syn_batch: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    /// Defaults to 0.01, or 0.02 at 64 pixels and above.
    pub lambda: Option<f64>,
    pub p_s: f64,
    pub p_c: f64,
    pub mode: MatchMode,
    pub spatial_weight: f64,
    pub channel_weight: f64,
    pub eps: f64,
    pub tap: TapPoint,
}

impl Default for LossSection {
    fn default() -> Self {
        let a = AtomParams::default();
        LossSection {
            lambda: None,
            p_s: a.p_s,
            p_c: a.p_c,
            mode: a.mode,
            spatial_weight: a.spatial_weight,
            channel_weight: a.channel_weight,
            eps: a.eps,
            tap: TapPoint::PostPool,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationSection {
    pub enabled: bool,
    pub ops: Vec<AugOp>,
    pub brightness: f64,
    pub saturation: f64,
    pub contrast: f64,
    pub crop_pad: f64,
    pub cutout: f64,
    pub flip_p: f64,
    pub scale: f64,
    pub rotate_deg: f64,
}

impl Default for AugmentationSection {
    fn default() -> Self {
        let a = AugSettings::default();
        AugmentationSection {
            enabled: true,
            ops: a.ops,
            brightness: a.brightness,
            saturation: a.saturation,
            contrast: a.contrast,
            crop_pad: a.crop_pad,
            cutout: a.cutout,
            flip_p: a.flip_p,
            scale: a.scale,
            rotate_deg: a.rotate_deg,
        }
    }
}

impl AugmentationSection {
    fn settings(&self, per_image: bool) -> AugSettings {
        AugSettings {
            ops: self.ops.clone(),
            brightness: self.brightness,
            saturation: self.saturation,
            contrast: self.contrast,
            crop_pad: self.crop_pad,
            cutout: self.cutout,
            flip_p: self.flip_p,
            scale: self.scale,
            rotate_deg: self.rotate_deg,
            per_image,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub n_models: usize,
    pub epochs: usize,
    pub lr_net: f64,
    pub net_momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_rate: f64,
    pub lr_decay_step: usize,
    pub batch_size: Option<usize>,
    pub augment: bool,
    pub per_image_aug: bool,
    pub seed: u64,
    pub threads: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        let p = EvalProtocol::default();
        EvaluationSection {
            n_models: p.n_models,
            epochs: p.epochs,
            lr_net: p.lr_net,
            net_momentum: p.net_momentum,
            weight_decay: p.weight_decay,
            lr_decay_rate: p.lr_decay_rate,
            lr_decay_step: p.lr_decay_step,
            batch_size: p.batch_size,
            augment: p.augment,
            per_image_aug: p.aug.per_image,
            seed: p.seed,
            threads: p.threads,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridChoice {
    Desk,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NasSection {
    pub grid: GridChoice,
    /// Train every spec on the full training split to obtain a reference ranking.
    pub reference: bool,
    /// Models per spec; overrides `[evaluation] n_models`.
    pub n_models: Option<usize>,
    /// Overrides `[evaluation] epochs`.
    pub epochs: Option<usize>,
}

impl Default for NasSection {
    fn default() -> Self {
        NasSection {
            grid: GridChoice::Desk,
            reference: true,
            n_models: None,
            epochs: None,
        }
    }
}

/// The sectioned TOML run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub distill: Option<DistillSection>,
    #[serde(default)]
    pub optimization: OptimizationSection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub augmentation: AugmentationSection,
    #[serde(default)]
    pub encoder: Encoder,
    #[serde(default)]
    pub evaluation: EvaluationSection,
    #[serde(default)]
    pub nas: NasSection,
}

/// Errors of the CLI layer, each mapped to an exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("distillation diverged ({source}); state written to {}", .snapshot.display())]
    Diverged { source: Error, snapshot: PathBuf },
    #[error("gradient check failed for: {}", .0.join(", "))]
    Gradcheck(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::USAGE,
            CliError::Core(Error::Param(_)) => exit::USAGE,
            CliError::Core(Error::PreprocessMismatch { .. }) => exit::PREPROCESS,
            CliError::Core(_) => exit::FAILURE,
            CliError::Diverged { .. } => exit::DIVERGED,
            CliError::Gradcheck(_) => exit::GRADCHECK,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("{}: {e}", origin.display())))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    fn atom_params(&self) -> AtomParams {
        let l = &self.loss;
        AtomParams {
            p_s: l.p_s,
            p_c: l.p_c,
            mode: l.mode,
            spatial_weight: l.spatial_weight,
            channel_weight: l.channel_weight,
            eps: l.eps,
        }
    }

    /// Resolved distillation config for images of side `image_side`.
    pub fn distill_config(&self, image_side: usize) -> CliResult<DistillConfig> {
        let d = self
            .distill
            .as_ref()
            .ok_or_else(|| CliError::Config("missing required key `ipc` in section [distill]".into()))?;
        let o = &self.optimization;
        let cfg = DistillConfig {
            ipc: d.ipc,
            iterations: d.iterations,
            lr_images: o.lr_images,
            image_momentum: o.image_momentum,
            weight_decay_images: o.weight_decay_images,
            lambda: self.loss.lambda.unwrap_or_else(|| default_lambda(image_side)),
            atom: self.atom_params(),
            batch_real: o.batch_real,
            syn_batch: o.syn_batch,
            seed: d.seed,
            tap: self.loss.tap,
            augment: self.augmentation.enabled,
            aug: self.augmentation.settings(false),
            encoder: self.encoder,
            checkpoint_every: d.checkpoint_every,
        };
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn eval_protocol(&self) -> CliResult<EvalProtocol> {
        let e = &self.evaluation;
        let p = EvalProtocol {
            n_models: e.n_models,
            epochs: e.epochs,
            lr_net: e.lr_net,
            net_momentum: e.net_momentum,
            weight_decay: e.weight_decay,
            lr_decay_rate: e.lr_decay_rate,
            lr_decay_step: e.lr_decay_step,
            batch_size: e.batch_size,
            augment: e.augment && self.augmentation.enabled,
            aug: self.augmentation.settings(e.per_image_aug),
            encoder: self.encoder,
            seed: e.seed,
            threads: e.threads,
        };
        p.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(p)
    }

    fn data_root(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.dataset.root.clone())
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }

    fn load_data(&self, flag: Option<&Path>, out: &Path) -> CliResult<DatasetSplits<f32>> {
        let root = self.data_root(flag);
        let opts = LoadOptions {
            zca: self.dataset.zca,
            zca_eps: self.dataset.zca_eps.unwrap_or(LoadOptions::default().zca_eps),
            cache_dir: Some(self.dataset.cache_dir.clone().unwrap_or_else(|| out.join("cache"))),
        };
        Ok(load_dataset_with(&self.dataset.name, &root, &opts)?)
    }
}

/// Reproducibility record written into every run directory before any compute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub code_version: String,
    pub precision: String,
    pub dataset: String,
    pub dataset_fingerprint: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seeds: serde_json::Value,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub status: String,
    pub outputs: Vec<String>,
}

impl RunManifest {
    fn new(command: &str, argv: &[String], dataset: &str, fingerprint: String, config: serde_json::Value, hash: String, seeds: serde_json::Value) -> Self {
        RunManifest {
            command: command.into(),
            argv: argv.to_vec(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            precision: "f32".into(),
            dataset: dataset.into(),
            dataset_fingerprint: fingerprint,
            config,
            config_hash: hash,
            seeds,
            started_unix: now(),
            finished_unix: None,
            status: "running".into(),
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(dir.join("manifest.json"), text).map_err(Error::from)?;
        Ok(())
    }

    fn finish(&mut self, dir: &Path, status: &str, outputs: &[&str]) -> CliResult<()> {
        self.status = status.into();
        self.finished_unix = Some(now());
        self.outputs = outputs.iter().map(|s| s.to_string()).collect();
        self.write(dir)
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Core(e.into()))
}

fn load_any_synthetic(path: &Path) -> CliResult<SyntheticDataset<f32>> {
    Ok(match container_dtype(path)? {
        DType::F32 => load_synthetic::<f32>(path)?,
        DType::F64 => load_synthetic::<f64>(path)?.cast(),
    })
}

fn cmd_distill(
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    baseline: Option<&str>,
    resume_from: Option<&Path>,
    data_root: Option<&Path>,
    argv: &[String],
) -> CliResult<()> {
    let mut rc = RunConfig::load(config)?;
    if let (Some(s), Some(d)) = (seed, rc.distill.as_mut()) {
        d.seed = s;
    }
    if let Some(b) = baseline {
        if b != "random" {
            return Err(CliError::Config(format!("unknown baseline `{b}` (expected `random`)")));
        }
    }
    create_dir(out)?;
    let data = rc.load_data(data_root, out)?;
    let cfg = rc.distill_config(data.train.image_shape()[1])?;
    let mut manifest = RunManifest::new(
        "distill",
        argv,
        &data.name,
        data.train.fingerprint(),
        serde_json::to_value(&cfg).expect("config serializes"),
        cfg.hash(),
        serde_json::json!({ "distill": cfg.seed }),
    );
    manifest.write(out)?;
    let syn_path = out.join("synthetic.bin");

    if baseline.is_some() {
        let mut syn = random_baseline(&data.train, cfg.ipc, cfg.seed)?;
        syn.dataset = data.name.clone();
        save_synthetic(&syn, &syn_path)?;
        return manifest.finish(out, "ok", &["manifest.json", "synthetic.bin"]);
    }

    let mut state = match resume_from {
        Some(p) => resume::<f32>(p, &cfg)?,
        None => DistillState::new(&cfg, &data.train)?,
    };
    state.synthetic.dataset = data.name.clone();
    let spec = cfg.spec_for(data.train.image_shape(), data.train.num_classes());
    let mut log = MetricsLog::open(out, spec.depth)?;
    let ckpt_dir = out.join("checkpoints");
    if cfg.checkpoint_every > 0 {
        create_dir(&ckpt_dir)?;
    }
    let result = run(&mut state, &cfg, &data.train, |st, rec| {
        log.append(rec)?;
        if cfg.checkpoint_every > 0 && st.iteration() % cfg.checkpoint_every == 0 {
            st.save_checkpoint(&ckpt_dir.join(format!("iter_{:06}.ckpt", st.iteration())))?;
            log.flush()?;
        }
        Ok(())
    });
    log.flush()?;
    match result {
        Ok(_) => {
            save_synthetic(&state.synthetic, &syn_path)?;
            manifest.finish(out, "ok", &["manifest.json", "synthetic.bin", "metrics.csv", "metrics_layers.csv"])
        }
        Err(e @ Error::Diverged { .. }) => {
            let snapshot = out.join("diverged.ckpt");
            state.save_checkpoint(&snapshot)?;
            manifest.finish(out, "diverged", &["manifest.json", "metrics.csv", "diverged.ckpt"])?;
            Err(CliError::Diverged { source: e, snapshot })
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_eval(synthetic: &Path, config: &Path, out: Option<&Path>, data_root: Option<&Path>, argv: &[String]) -> CliResult<()> {
    let rc = RunConfig::load(config)?;
    let proto = rc.eval_protocol()?;
    let syn = load_any_synthetic(synthetic)?;
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| synthetic.parent().map(Path::to_path_buf).unwrap_or_default());
    create_dir(&out)?;
    let data = rc.load_data(data_root, &out)?;
    let mut manifest = RunManifest::new(
        "eval",
        argv,
        &data.name,
        data.test.fingerprint(),
        serde_json::to_value(&proto).expect("protocol serializes"),
        proto.hash(),
        serde_json::json!({ "eval": proto.seed }),
    );
    let manifest_dir = out.join("eval");
    create_dir(&manifest_dir)?;
    manifest.write(&manifest_dir)?;
    let report = evaluate(&syn, &data.test, &proto)?;
    let label = if report.origin == "random" {
        "baseline=random".to_string()
    } else {
        format!("origin={}", report.origin)
    };
    let csv = format!("{},label\n{},{label}\n", EvalReport::CSV_HEADER, report.csv_row());
    std::fs::write(manifest_dir.join("report.csv"), csv).map_err(Error::from)?;
    std::fs::write(
        manifest_dir.join("report.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )
    .map_err(Error::from)?;
    manifest.finish(&manifest_dir, "ok", &["manifest.json", "report.csv", "report.json"])?;
    println!("{} ({} models, {label})", report.summary(), report.per_model.len());
    Ok(())
}

fn cmd_nas(synthetic: &Path, config: &Path, out: &Path, data_root: Option<&Path>, argv: &[String]) -> CliResult<()> {
    let rc = RunConfig::load(config)?;
    let mut proto = rc.eval_protocol()?;
    if let Some(n) = rc.nas.n_models {
        proto.n_models = n;
    }
    if let Some(e) = rc.nas.epochs {
        proto.epochs = e;
    }
    proto.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let proxy = load_any_synthetic(synthetic)?;
    create_dir(out)?;
    let data = rc.load_data(data_root, out)?;
    let grid = match rc.nas.grid {
        GridChoice::Desk => SearchGrid::desk(),
        GridChoice::Full => SearchGrid::full(),
    };
    let mut manifest = RunManifest::new(
        "nas",
        argv,
        &data.name,
        data.test.fingerprint(),
        serde_json::json!({ "protocol": proto, "grid": grid, "reference": rc.nas.reference }),
        proto.hash(),
        serde_json::json!({ "eval": proto.seed }),
    );
    manifest.write(out)?;
    let specs = grid.specs(data.train.image_shape(), data.train.num_classes());
    let reference = rc
        .nas
        .reference
        .then(|| reference_accuracies(&specs, &data.train, &data.test, &proto));
    let result = rank_on_proxy(&specs, &proxy, &data.test, &proto, reference.as_deref())?;
    std::fs::write(out.join("nas.csv"), result.to_csv()).map_err(Error::from)?;
    std::fs::write(
        out.join("nas.json"),
        serde_json::to_string_pretty(&result).expect("result serializes"),
    )
    .map_err(Error::from)?;
    manifest.finish(out, "ok", &["manifest.json", "nas.csv", "nas.json"])?;
    match result.spearman_rho {
        Some(r) => println!("spearman rho = {r:.4} over {} specs", specs.len()),
        None => println!("ranked {} specs (no reference ranking)", specs.len()),
    }
    Ok(())
}

fn cmd_export(synthetic: &Path, out: &Path) -> CliResult<()> {
    let syn = load_any_synthetic(synthetic)?;
    if syn.preprocess.is_none() {
        return Err(CliError::Core(Error::PreprocessMismatch {
            container: "none".into(),
            dataset: "required for export".into(),
        }));
    }
    let written = export_images(&syn, out)?;
    println!("wrote {} files to {}", written.len(), out.display());
    Ok(())
}

fn cmd_gradcheck(cfg: GradcheckConfig) -> CliResult<()> {
    let report = run_gradcheck(&cfg)?;
    for line in report.lines() {
        println!("{line}");
    }
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Gradcheck(report.failing().iter().map(|s| s.to_string()).collect()))
    }
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let argv: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::OK };
        }
    };
    let result = match cli.command {
        Command::Distill {
            config,
            out,
            seed,
            baseline,
            resume,
            data_root,
        } => cmd_distill(
            &config,
            &out,
            seed,
            baseline.as_deref(),
            resume.as_deref(),
            data_root.as_deref(),
            &argv,
        ),
        Command::Eval {
            synthetic,
            config,
            out,
            data_root,
        } => cmd_eval(&synthetic, &config, out.as_deref(), data_root.as_deref(), &argv),
        Command::Nas {
            synthetic,
            config,
            out,
            data_root,
        } => cmd_nas(&synthetic, &config, &out, data_root.as_deref(), &argv),
        Command::ExportImages { synthetic, out } => cmd_export(&synthetic, &out),
        Command::Gradcheck {
            batch,
            size,
            seed,
            tolerance,
            corrupt,
        } => cmd_gradcheck(GradcheckConfig {
            corrupt,
            ..GradcheckConfig::default()
                .with_size(batch, size)
                .with_seed(seed)
                .with_tolerance(tolerance)
        }),
    };
    match result {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = r#"
[dataset]
name = "toy-fixture"

[distill]
ipc = 1
iterations = 10
seed = 3

[loss]
mode = "channel"

[encoder]
depth = 2
width = 32
"#;

    #[test]
    fn parses_and_resolves() {
        let rc = RunConfig::parse(TOY, Path::new("toy.toml")).unwrap();
        let cfg = rc.distill_config(8).unwrap();
        assert_eq!(cfg.ipc, 1);
        assert_eq!(cfg.lambda, 0.01);
        assert_eq!(cfg.atom.mode, MatchMode::Channel);
        assert_eq!(rc.distill_config(64).unwrap().lambda, 0.02);
        let p = rc.eval_protocol().unwrap();
        assert!(p.aug.per_image);
        assert_eq!(p.encoder.width, 32);
    }

    #[test]
    fn missing_ipc_names_the_key() {
        let text = TOY.replace("ipc = 1\n", "");
        let err = RunConfig::parse(&text, Path::new("toy.toml")).unwrap_err();
        assert_eq!(err.exit_code(), exit::USAGE);
        let msg = err.to_string();
        assert!(msg.contains("ipc") && msg.contains("line"), "{msg}");
    }

    #[test]
    fn unknown_key_is_rejected_with_position() {
        let text = TOY.replace("width = 32", "widht = 32");
        let msg = RunConfig::parse(&text, Path::new("toy.toml")).unwrap_err().to_string();
        assert!(msg.contains("widht") && msg.contains("line"), "{msg}");
    }
}
