use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use ltd_core::analysis::{export_features, layer_profiles};
use ltd_core::data::{gen_synthetic_dataset, synth::MANIFEST_NAME};
use ltd_core::train::score_image;
use ltd_core::{
    evaluate, resume, BackboneConfig, BackboneWeights, Branches, Checkpoint, DatasetManifest, DegradeSpec, EpochLog,
    HeadConfig, ImageTensor, LtdError, Result, TrainConfig,
};

#[derive(Debug, Parser)]
#[command(
    name = "ltd",
    version,
    about = "Layer transition discrepancy detector for AI-generated images"
)]
pub struct Cli {
    /// Worker threads; defaults to LTD_THREADS, then the number of cores.
    #[arg(long, global = true, env = "LTD_THREADS")]
    pub threads: Option<usize>,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic real/fake toy dataset and its manifest.
    GenData(GenDataArgs),
    /// Write a randomly initialised backbone archive.
    InitBackbone(InitBackboneArgs),
    /// Train the detector head over a frozen backbone.
    Train(TrainArgs),
    /// Score a manifest and write a metrics report.
    Eval(EvalArgs),
    /// Score one image.
    Score(ScoreArgs),
    /// Adjacent-layer cosine and L2 profiles as CSV.
    Profile(ProfileArgs),
    /// Per-layer CLS features (or their differences) as CSV.
    ExportFeatures(ExportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub n_per_class: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    /// 8 layers, width 32, 56 px input.
    Toy,
    /// 24 layers, width 1024, 224 px input.
    ClipVitL14,
}

#[derive(Debug, Args)]
pub struct InitBackboneArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Toy)]
    pub preset: Preset,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Zero every residual branch so all layers share one CLS state.
    #[arg(long)]
    pub zero_residuals: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BranchArg {
    Both,
    Raw,
    Ltd,
}

impl From<BranchArg> for Branches {
    fn from(b: BranchArg) -> Self {
        match b {
            BranchArg::Both => Branches::Both,
            BranchArg::Raw => Branches::Raw,
            BranchArg::Ltd => Branches::Ltd,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, required_unless_present = "resume")]
    pub train_manifest: Option<PathBuf>,
    #[arg(long)]
    pub val_manifest: Option<PathBuf>,
    #[arg(long)]
    pub backbone: PathBuf,
    /// Checkpoint path, rewritten after every epoch.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON-lines training log; defaults to the checkpoint path with `.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue a saved checkpoint (its stored config wins over head flags).
    #[arg(long, conflicts_with_all = ["layer_lo", "layer_hi", "window", "tau", "no_shared_block", "no_pos_enc", "branch"])]
    pub resume: Option<PathBuf>,
    #[arg(long, default_value_t = 5e-5)]
    pub lr: f32,
    /// Defaults to 32 for shallow (toy) backbones and 256 otherwise.
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub layer_lo: Option<usize>,
    #[arg(long)]
    pub layer_hi: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Separate block weights for the raw and difference branches.
    #[arg(long)]
    pub no_shared_block: bool,
    #[arg(long)]
    pub no_pos_enc: bool,
    #[arg(long, value_enum)]
    pub branch: Option<BranchArg>,
    /// Encode each image once without augmentation.
    #[arg(long)]
    pub feature_cache: bool,
    #[arg(long)]
    pub grad_clip: Option<f32>,
}

#[derive(Debug, Args)]
pub struct DegradeArgs {
    /// JPEG re-encode at this quality (1-100).
    #[arg(long)]
    pub jpeg: Option<u8>,
    /// Bilinear down/up-sample by this factor in (0, 1].
    #[arg(long)]
    pub downsample: Option<f32>,
    /// Gaussian blur: odd kernel size and sigma.
    #[arg(long, num_args = 2, value_names = ["K", "SIGMA"])]
    pub blur: Option<Vec<f32>>,
}

impl DegradeArgs {
    /// Applied in the order blur, downsample, JPEG.
    fn specs(&self) -> Result<Vec<DegradeSpec>> {
        let mut out = Vec::new();
        if let Some(b) = &self.blur {
            let k = b[0];
            if k.fract() != 0.0 || k < 1.0 {
                return Err(LtdError::Parameter(format!(
                    "blur kernel {k} must be a positive integer"
                )));
            }
            out.push(DegradeSpec::Blur {
                kernel: k as usize,
                sigma: b[1],
            });
        }
        if let Some(factor) = self.downsample {
            out.push(DegradeSpec::Downsample { factor });
        }
        if let Some(quality) = self.jpeg {
            out.push(DegradeSpec::Jpeg { quality });
        }
        for s in &out {
            s.validate()?;
        }
        Ok(out)
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub backbone: PathBuf,
    #[command(flatten)]
    pub degrade: DegradeArgs,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub backbone: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[arg(long)]
    pub backbone: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// One profile over all images instead of one per class.
    #[arg(long)]
    pub pooled: bool,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub backbone: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated 0-based layer indices.
    #[arg(long, value_delimiter = ',', required = true)]
    pub layers: Vec<usize>,
    /// Export `f(k+1) − f(k)` instead of `f(k)`.
    #[arg(long)]
    pub diff: bool,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<Value> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(LtdError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| LtdError::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::InitBackbone(a) => init_backbone(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Score(a) => run_score(a),
        Command::Profile(a) => run_profile(a),
        Command::ExportFeatures(a) => run_export(a),
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

/// SHA-256 over the manifest and every listed file, in manifest order.
fn tree_hash(manifest: &DatasetManifest) -> Result<String> {
    let mut h = Sha256::new();
    h.update(manifest.to_jsonl().as_bytes());
    for r in manifest.records() {
        let p = manifest.resolve(r);
        let bytes = fs::read(&p).map_err(|e| LtdError::io(&p, e))?;
        h.update(r.path.to_string_lossy().as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

fn gen_data(a: GenDataArgs) -> Result<Value> {
    let m = gen_synthetic_dataset(a.n_per_class, a.size, a.seed, &a.out)?;
    let (real, fake) = m.label_counts();
    log::info!("wrote {} images to {}", m.len(), a.out.display());
    Ok(json!({
        "command": "gen-data",
        "status": "ok",
        "out": path_str(&a.out),
        "manifest": path_str(&a.out.join(MANIFEST_NAME)),
        "count_real": real,
        "count_fake": fake,
        "sha256": tree_hash(&m)?,
    }))
}

fn init_backbone(a: InitBackboneArgs) -> Result<Value> {
    let cfg = match a.preset {
        Preset::Toy => BackboneConfig::toy(),
        Preset::ClipVitL14 => BackboneConfig::clip_vit_l14(),
    };
    let mut bb = BackboneWeights::init_random(cfg, a.seed)?;
    if a.zero_residuals {
        bb = bb.with_zeroed_residuals();
    }
    bb.save(&a.out)?;
    Ok(json!({
        "command": "init-backbone",
        "status": "ok",
        "out": path_str(&a.out),
        "params": bb.param_count(),
        "hash": bb.content_hash(),
    }))
}

fn head_config(a: &TrainArgs, bb: &BackboneWeights) -> HeadConfig {
    let c = bb.config();
    let mut h = HeadConfig::default_for(c.depth, c.width);
    if let Some(v) = a.layer_lo {
        h.layer_lo = v;
    }
    if let Some(v) = a.layer_hi {
        h.layer_hi = v;
    }
    if let Some(v) = a.window {
        h.window = v;
    }
    if let Some(v) = a.tau {
        h.tau = v;
    }
    h.shared_block = !a.no_shared_block;
    h.pos_enc = !a.no_pos_enc;
    if let Some(b) = a.branch {
        h.branches = b.into();
    }
    h
}

fn run_train(a: TrainArgs) -> Result<Value> {
    let backbone = BackboneWeights::load(&a.backbone)?;
    let val = a.val_manifest.as_deref().map(DatasetManifest::load).transpose()?;
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("log.jsonl"));

    let (state, train_path, mut history) = match &a.resume {
        Some(p) => {
            let mut ck = Checkpoint::load(p)?;
            ck.config.epochs = a.epochs;
            let tp = a
                .train_manifest
                .clone()
                .ok_or_else(|| LtdError::Config("--resume needs --train-manifest".into()))?;
            let hist = ck.history.clone();
            (ck, tp, hist)
        }
        None => {
            let depth = backbone.config().depth;
            let cfg = TrainConfig {
                lr: a.lr,
                batch_size: a.batch.unwrap_or(if depth >= 20 { 256 } else { 32 }),
                epochs: a.epochs,
                seed: a.seed,
                feature_cache: a.feature_cache,
                grad_clip: a.grad_clip,
                head: head_config(&a, &backbone),
            };
            (
                Checkpoint::initial(&cfg, &backbone)?,
                a.train_manifest.clone().expect("required by clap"),
                Vec::new(),
            )
        }
    };
    let train_m = DatasetManifest::load(&train_path)?;
    log::info!(
        "training {} head parameters on {} images",
        state.optimizer_param_count(),
        train_m.len()
    );

    let mut log_file = BufWriter::new(File::create(&log_path).map_err(|e| LtdError::io(&log_path, e))?);
    for entry in &history {
        write_log_line(&mut log_file, &log_path, entry)?;
    }
    let out = a.out.clone();
    let mut on_epoch = |ck: &Checkpoint, entry: &EpochLog| -> Result<()> {
        write_log_line(&mut log_file, &log_path, entry)?;
        ck.save(&out)
    };
    let result = resume(state, &train_m, val.as_ref(), &backbone, &mut on_epoch);
    let ck = match result {
        Ok(ck) => ck,
        Err(LtdError::Diverged {
            epoch,
            reason,
            last_good,
        }) => {
            last_good.save(&a.out)?;
            return Err(LtdError::Diverged {
                epoch,
                reason,
                last_good,
            });
        }
        Err(e) => return Err(e),
    };
    if ck.history.is_empty() {
        ck.save(&a.out)?;
    }
    history = ck.history.clone();
    let last = history.last();
    Ok(json!({
        "command": "train",
        "status": "ok",
        "checkpoint": path_str(&a.out),
        "log": path_str(&log_path),
        "epochs": ck.epoch,
        "params": ck.optimizer_param_count(),
        "final_train_loss": last.map(|l| l.train_loss),
        "best_epoch": ck.best_epoch,
        "best_val_acc": ck.best_val_acc,
        "selected_window_start": last.map(|l| l.selected_window_start),
    }))
}

fn write_log_line(w: &mut impl Write, path: &Path, entry: &EpochLog) -> Result<()> {
    let line = serde_json::to_string(entry).expect("log entry serializes");
    writeln!(w, "{line}")
        .and_then(|_| w.flush())
        .map_err(|e| LtdError::io(path, e))
}

fn run_eval(a: EvalArgs) -> Result<Value> {
    let degrade = a.degrade.specs()?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let backbone = BackboneWeights::load(&a.backbone)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let report = evaluate(&ck, &manifest, &backbone, &degrade)?;
    fs::write(&a.report, report.to_json()).map_err(|e| LtdError::io(&a.report, e))?;
    let s = &report.summary;
    log::info!("acc {:.4} ap {:?}", s.acc_overall, s.ap);
    Ok(json!({
        "command": "eval",
        "status": "ok",
        "report": path_str(&a.report),
        "count": s.count,
        "acc_overall": s.acc_overall,
        "acc_fake": s.acc_fake,
        "acc_real": s.acc_real,
        "ap": s.ap,
        "degrade": degrade,
    }))
}

fn run_score(a: ScoreArgs) -> Result<Value> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let backbone = BackboneWeights::load(&a.backbone)?;
    let img = ImageTensor::load(&a.image)?;
    let (p, label) = score_image(&ck.best_head, &backbone, &img)?;
    Ok(json!({
        "command": "score",
        "status": "ok",
        "image": path_str(&a.image),
        "probability": p,
        "label": label,
        "prediction": if label == ltd_core::FAKE { "fake" } else { "real" },
    }))
}

fn run_profile(a: ProfileArgs) -> Result<Value> {
    let backbone = BackboneWeights::load(&a.backbone)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let profile = layer_profiles(&backbone, &manifest, !a.pooled)?;
    profile.save(&a.out)?;
    Ok(json!({
        "command": "profile",
        "status": "ok",
        "out": path_str(&a.out),
        "rows": profile.rows.len(),
    }))
}

fn run_export(a: ExportArgs) -> Result<Value> {
    let backbone = BackboneWeights::load(&a.backbone)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let table = export_features(&backbone, &manifest, &a.layers, a.diff, &a.out)?;
    Ok(json!({
        "command": "export-features",
        "status": "ok",
        "out": path_str(&a.out),
        "rows": table.rows.len(),
        "width": backbone.config().width,
    }))
}
