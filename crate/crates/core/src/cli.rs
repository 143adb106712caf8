//! Operator surface: one subcommand per pipeline stage, a JSON run config
//! with flag overrides (flags win), provenance copies of the resolved config
//! in every output directory, and typed exit codes:
//!   0 ok, 2 config error, 3 data error, 4 verification failure, 5 remote error.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::backbone::{flops_estimate, BackboneConfig, BackboneError, DftBackbone, Variant};
use crate::data::{
    generate_synthetic, load_dataset, DataError, Dataset, SyntheticSpec,
};
use crate::projector::{
    load_projector, remote_knn_search, save_projector, train_projector, two_stage_rerank,
    two_stage_retrieve, ClsProjector, KnnIndex, KnnServer, ProjectorError, TwoStageOutcome,
    DEFAULT_CANDIDATES,
};
use crate::retrieval::{
    classify_store, eval_pool_retrieval, full_rank_retrieval, similarity_csv, EmbeddingStore,
    RetrievalError, RetrievalProtocol,
};
use crate::rng::SplitMix64;
use crate::tensor::RealTensor;
use crate::training::{
    grad_check, load_checkpoint, loss_csv, train, LossDirection, TrainConfig, TrainError,
};

// ---------------------------------------------------------------------------
// Failures and exit codes
// ---------------------------------------------------------------------------

#[derive(Debug)]
enum Failure {
    Config(String),
    Data(String),
    Verification(String),
    Remote(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Verification(_) => 4,
            Failure::Remote(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Data(m) | Failure::Verification(m)
            | Failure::Remote(m) => m,
        }
    }
}

type CliResult<T> = Result<T, Failure>;

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<RetrievalError> for Failure {
    fn from(e: RetrievalError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<BackboneError> for Failure {
    fn from(e: BackboneError) -> Self {
        match e {
            BackboneError::BadConfig(_) => Failure::Config(e.to_string()),
            BackboneError::InputLength { .. } => Failure::Data(e.to_string()),
            BackboneError::NonFinite { .. } => Failure::Verification(e.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::BadTrainConfig(_) | TrainError::BatchTooSmall { .. } => {
                Failure::Config(e.to_string())
            }
            TrainError::NonFinite { .. } | TrainError::NonFiniteUpdate { .. } => {
                Failure::Verification(e.to_string())
            }
            TrainError::Backbone(inner) => inner.into(),
            other => Failure::Data(other.to_string()),
        }
    }
}

impl From<ProjectorError> for Failure {
    fn from(e: ProjectorError) -> Self {
        match e {
            ProjectorError::RemoteStatus { .. }
            | ProjectorError::RemoteMalformed(_)
            | ProjectorError::RemoteTransport(_)
            | ProjectorError::RemoteContract(_) => Failure::Remote(e.to_string()),
            ProjectorError::BadK
            | ProjectorError::BadConfig(_)
            | ProjectorError::BadMetric(_) => Failure::Config(e.to_string()),
            ProjectorError::Train(inner) => inner.into(),
            other => Failure::Data(other.to_string()),
        }
    }
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectorSettings {
    pub depth: usize,
    pub slope: f64,
}

impl Default for ProjectorSettings {
    fn default() -> Self {
        Self {
            depth: ClsProjector::<f64>::DEFAULT_DEPTH,
            slope: 0.01,
        }
    }
}

/// Everything a run needs, merged from the JSON config file and flag
/// overrides, then written verbatim into each output directory.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub model: Option<BackboneConfig>,
    pub train: TrainConfig,
    pub protocol: RetrievalProtocol,
    pub synth: Option<SyntheticSpec>,
    pub projector: ProjectorSettings,
}

fn read_run_config(path: Option<&Path>) -> CliResult<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn require_model(run: &RunConfig) -> CliResult<BackboneConfig> {
    run.model
        .clone()
        .ok_or_else(|| Failure::Config("config file must define a \"model\" section".into()))
}

// ---------------------------------------------------------------------------
// Shared flag groups
// ---------------------------------------------------------------------------

#[derive(Debug, Args, Clone, Default)]
struct TrainOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// voxel_to_image | image_to_voxel | symmetric
    #[arg(long)]
    direction: Option<String>,
    /// Record wall-clock time per epoch (disable for bit-identical reruns).
    #[arg(long)]
    timing: Option<bool>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut TrainConfig) -> CliResult<()> {
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.lr {
            cfg.optimizer.lr = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.optimizer.weight_decay = v;
        }
        if let Some(v) = self.tau {
            cfg.loss.tau = v;
        }
        if let Some(v) = self.alpha {
            cfg.loss.alpha = v;
        }
        if let Some(dir) = &self.direction {
            cfg.loss.direction = match dir.as_str() {
                "voxel_to_image" => LossDirection::VoxelToImage,
                "image_to_voxel" => LossDirection::ImageToVoxel,
                "symmetric" => LossDirection::Symmetric,
                other => {
                    return Err(Failure::Config(format!(
                        "unknown loss direction {other:?} (expected voxel_to_image, image_to_voxel or symmetric)"
                    )))
                }
            };
        }
        if let Some(v) = self.timing {
            cfg.timing = v;
        }
        Ok(())
    }
}

#[derive(Debug, Args, Clone, Default)]
struct ProtocolOverrides {
    /// Candidate pool size per query.
    #[arg(long)]
    pool: Option<usize>,
    /// Independent pool resamplings to average over.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    base_seed: Option<u64>,
    /// Top-k values to report (repeatable).
    #[arg(long = "top-k")]
    top_k: Vec<usize>,
}

impl ProtocolOverrides {
    fn apply(&self, proto: &mut RetrievalProtocol) {
        if let Some(v) = self.pool {
            proto.pool_size = v;
        }
        if let Some(v) = self.seeds {
            proto.n_seeds = v;
        }
        if let Some(v) = self.base_seed {
            proto.base_seed = v;
        }
        if !self.top_k.is_empty() {
            proto.top_k = self.top_k.clone();
        }
    }
}

// ---------------------------------------------------------------------------
// Command definitions
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "specvox",
    version,
    about = "Frequency-domain voxel-to-embedding models: train, evaluate, retrieve"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic paired dataset from the config's "synth" section.
    Synth(SynthArgs),
    /// Train the backbone (or, with --stage projector, the CLS projector).
    Train(TrainArgs),
    /// Candidate-pool retrieval accuracy for a trained checkpoint.
    Eval(EvalArgs),
    /// Two-stage retrieval: CLS shortlist, hidden-space re-rank.
    Retrieve(RetrieveArgs),
    /// Retrieval-based zero-shot classification.
    Classify(ClassifyArgs),
    /// Finite-difference verification of the analytic gradients.
    Gradcheck(GradcheckArgs),
    /// Parameter count and FLOPs breakdown for a model config.
    Params(ParamsArgs),
    /// Serve a KNN index over the JSON wire protocol.
    ServeKnn(ServeKnnArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    map_seed: Option<u64>,
    #[arg(long)]
    noise_seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Training-split dataset manifest.
    #[arg(long)]
    data: PathBuf,
    /// Held-out dataset manifest for per-epoch top-1 tracking.
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// backbone (default) or projector.
    #[arg(long, default_value = "backbone")]
    stage: String,
    /// CLS backbone checkpoint; required by --stage projector.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also rank against the entire test set (no pooling).
    #[arg(long)]
    full_rank: bool,
    /// Export the full pairwise similarity matrix as CSV.
    #[arg(long)]
    similarity: bool,
    #[command(flatten)]
    protocol: ProtocolOverrides,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    hidden_checkpoint: PathBuf,
    #[arg(long)]
    cls_checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Trained projector snapshot; identity projector when omitted.
    #[arg(long)]
    projector: Option<PathBuf>,
    /// KNN index snapshot; built from the dataset's cls store when omitted.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Save the (possibly freshly built) index snapshot here.
    #[arg(long)]
    save_index: Option<PathBuf>,
    /// Remote KNN endpoint; the local index is not consulted when set.
    #[arg(long)]
    endpoint: Option<String>,
    /// Stage-1 candidate count.
    #[arg(long, default_value_t = DEFAULT_CANDIDATES)]
    k: usize,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Top-k values to report (repeatable).
    #[arg(long = "top-k")]
    top_k: Vec<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the full report JSON here (stdout summary either way).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct ServeKnnArgs {
    /// Index snapshot directory.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Dataset manifest whose cls store becomes the index.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:0")]
    bind: String,
}

// ---------------------------------------------------------------------------
// Output directories
// ---------------------------------------------------------------------------

const INCOMPLETE_MARKER: &str = "INCOMPLETE";
const RUN_CONFIG_FILE: &str = "run_config.json";

/// Creates the directory, drops an INCOMPLETE marker and the resolved config;
/// `finish()` removes the marker once every artifact is in place, so a
/// directory that still carries the marker is a partial run.
struct OutputDir {
    path: PathBuf,
}

impl OutputDir {
    fn create(path: &Path, run: &RunConfig) -> CliResult<Self> {
        std::fs::create_dir_all(path)
            .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
        let dir = Self {
            path: path.to_path_buf(),
        };
        write_text(&dir.path.join(INCOMPLETE_MARKER), "run in progress\n")?;
        write_json(&dir.path.join(RUN_CONFIG_FILE), run)?;
        Ok(dir)
    }

    fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn finish(self) -> CliResult<()> {
        let marker = self.path.join(INCOMPLETE_MARKER);
        std::fs::remove_file(&marker)
            .map_err(|e| Failure::Data(format!("{}: {e}", marker.display())))
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("reports serialize");
    write_text(path, &(text + "\n"))
}

fn say(line: String) {
    let mut out = std::io::stdout();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

// ---------------------------------------------------------------------------
// Dataset plumbing
// ---------------------------------------------------------------------------

fn space_store(ds: &Dataset, variant: Variant) -> CliResult<&EmbeddingStore<f32>> {
    let (name, store) = match variant {
        Variant::Hidden => ("hidden", ds.hidden.as_ref()),
        Variant::Cls => ("cls", ds.cls.as_ref()),
    };
    store.ok_or_else(|| {
        Failure::Data(format!(
            "dataset manifest lacks the {name:?} embedding store required by this model"
        ))
    })
}

fn embed_all(model: &DftBackbone<f32>, ds: &Dataset) -> CliResult<Vec<Vec<f32>>> {
    (0..ds.voxels.rows())
        .map(|r| model.embed_voxels(ds.voxels.row(r)).map_err(Into::into))
        .collect()
}

fn voxel_rows(ds: &Dataset) -> Vec<&[f32]> {
    (0..ds.voxels.rows()).map(|r| ds.voxels.row(r)).collect()
}

fn as_refs(rows: &[Vec<f32>]) -> Vec<&[f32]> {
    rows.iter().map(|r| r.as_slice()).collect()
}

/// Voxel-derived and image-side stores, row-aligned by stimulus id.
fn aligned_stores(
    model: &DftBackbone<f32>,
    ds: &Dataset,
) -> CliResult<(EmbeddingStore<f32>, EmbeddingStore<f32>)> {
    let space = space_store(ds, model.config.variant)?;
    let targets = ds.targets_from(space)?;
    let embedded = embed_all(model, ds)?;
    let f = EmbeddingStore::from_rows(ds.voxel_ids.clone(), embedded)?;
    let v = EmbeddingStore::from_rows(
        ds.voxel_ids.clone(),
        targets.iter().map(|r| r.to_vec()).collect(),
    )?;
    Ok((f, v))
}

fn index_from_store(store: &EmbeddingStore<f32>) -> CliResult<KnnIndex<f32>> {
    let mut rows = RealTensor::<f32>::zeros(vec![store.len(), store.dim()]);
    for r in 0..store.len() {
        rows.row_mut(r).copy_from_slice(store.row(r));
    }
    Ok(KnnIndex::build(store.ids().to_vec(), &rows)?)
}

// ---------------------------------------------------------------------------
// Subcommand bodies
// ---------------------------------------------------------------------------

fn cmd_synth(args: &SynthArgs) -> CliResult<()> {
    let mut run = read_run_config(Some(&args.config))?;
    let Some(spec) = run.synth.as_mut() else {
        return Err(Failure::Config(
            "config file must define a \"synth\" section".into(),
        ));
    };
    if let Some(v) = args.n_train {
        spec.n_train = v;
    }
    if let Some(v) = args.n_test {
        spec.n_test = v;
    }
    if let Some(v) = args.noise_sigma {
        spec.noise_sigma = v;
    }
    if let Some(v) = args.map_seed {
        spec.map_seed = v;
    }
    if let Some(v) = args.noise_seed {
        spec.noise_seed = v;
    }
    let spec = spec.clone();

    let dir = OutputDir::create(&args.out, &run)?;
    let summary = generate_synthetic(&spec, &dir.path)?;
    write_json(&dir.file("synth_summary.json"), &summary)?;
    dir.finish()?;
    say(format!(
        "wrote {} train + {} test pairs under {}",
        summary.n_train,
        summary.n_test,
        args.out.display()
    ));
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let mut run = read_run_config(Some(&args.config))?;
    args.overrides.apply(&mut run.train)?;
    match args.stage.as_str() {
        "backbone" => cmd_train_backbone(args, run),
        "projector" => cmd_train_projector(args, run),
        other => Err(Failure::Config(format!(
            "unknown training stage {other:?} (expected backbone or projector)"
        ))),
    }
}

fn cmd_train_backbone(args: &TrainArgs, run: RunConfig) -> CliResult<()> {
    let model_cfg = require_model(&run)?;
    let train_ds = load_dataset(&args.data)?;
    let eval_ds = args.eval.as_deref().map(load_dataset).transpose()?;

    let train_space = space_store(&train_ds, model_cfg.variant)?;
    let train_v = train_ds.targets_from(train_space)?;
    let train_x = voxel_rows(&train_ds);
    let (eval_x, eval_v) = match &eval_ds {
        Some(ds) => {
            let space = space_store(ds, model_cfg.variant)?;
            (voxel_rows(ds), ds.targets_from(space)?)
        }
        None => (Vec::new(), Vec::new()),
    };

    let dir = OutputDir::create(&args.out, &run)?;
    let mut model = DftBackbone::<f32>::init(model_cfg, run.train.seed)?;
    let checkpoint_dir = dir.file("checkpoint");
    let outcome = train(
        &mut model,
        &train_x,
        &train_v,
        &eval_x,
        &eval_v,
        &run.train,
        Some(&checkpoint_dir),
    )?;
    write_text(&dir.file("loss.csv"), &loss_csv(&outcome.history))?;
    write_json(&dir.file("outcome.json"), &outcome)?;
    dir.finish()?;
    say(format!(
        "trained {} epochs; best epoch {} (eval top-1 {:.4}); checkpoint at {}",
        outcome.history.len(),
        outcome.best_epoch,
        outcome.best_eval,
        checkpoint_dir.display()
    ));
    Ok(())
}

fn cmd_train_projector(args: &TrainArgs, run: RunConfig) -> CliResult<()> {
    let Some(ckpt) = &args.checkpoint else {
        return Err(Failure::Config(
            "--stage projector needs --checkpoint with a cls backbone".into(),
        ));
    };
    let (model, _) = load_checkpoint::<f32>(ckpt)?;
    if model.config.variant != Variant::Cls {
        return Err(Failure::Config(
            "projector training needs a cls-variant backbone checkpoint".into(),
        ));
    }
    let ds = load_dataset(&args.data)?;
    let cls_store = space_store(&ds, Variant::Cls)?;
    let targets = ds.targets_from(cls_store)?;
    let embedded = embed_all(&model, &ds)?;

    let dir = OutputDir::create(&args.out, &run)?;
    let mut proj = ClsProjector::<f32>::init(
        model.config.embed_dim,
        run.projector.depth,
        run.projector.slope,
        run.train.seed,
    )?;
    let history = train_projector(&mut proj, &as_refs(&embedded), &targets, &run.train)?;

    let snapshot = dir.file("projector");
    save_projector(&snapshot, &proj, run.train.seed, &run.train.loss)?;
    let mut csv = String::from("epoch,train_loss\n");
    for (i, loss) in history.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", i + 1, loss));
    }
    write_text(&dir.file("loss.csv"), &csv)?;
    dir.finish()?;
    say(format!(
        "trained projector for {} epochs (final loss {:.6}); snapshot at {}",
        history.len(),
        history.last().copied().unwrap_or(f64::NAN),
        snapshot.display()
    ));
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let mut run = read_run_config(args.config.as_deref())?;
    args.protocol.apply(&mut run.protocol);

    let (model, _) = load_checkpoint::<f32>(&args.checkpoint)?;
    let ds = load_dataset(&args.data)?;
    let (f, v) = aligned_stores(&model, &ds)?;

    let dir = OutputDir::create(&args.out, &run)?;
    let report = eval_pool_retrieval(&f, &v, &run.protocol)?;
    write_json(&dir.file("retrieval_report.json"), &report)?;
    if args.full_rank {
        let fr = full_rank_retrieval(&f, &v, &run.protocol.top_k)?;
        write_json(&dir.file("full_rank.json"), &fr)?;
    }
    if args.similarity {
        write_text(&dir.file("similarity.csv"), &similarity_csv(&f, &v)?)?;
    }
    dir.finish()?;
    say(format!(
        "image {:.4} brain {:.4} (pool {}, {} seeds, {} items)",
        report.image.acc_mean,
        report.brain.acc_mean,
        report.image.pool_size,
        report.image.n_seeds,
        report.n_items
    ));
    Ok(())
}

#[derive(Serialize)]
struct RetrieveOutcome {
    query_id: String,
    best_id: String,
    best_similarity: f64,
    hit: bool,
}

#[derive(Serialize)]
struct RetrieveReport {
    k: usize,
    n_queries: usize,
    top1: f64,
    source: String,
    outcomes: Vec<RetrieveOutcome>,
}

fn cmd_retrieve(args: &RetrieveArgs) -> CliResult<()> {
    let run = read_run_config(args.config.as_deref())?;
    let (hidden_model, _) = load_checkpoint::<f32>(&args.hidden_checkpoint)?;
    let (cls_model, _) = load_checkpoint::<f32>(&args.cls_checkpoint)?;
    if hidden_model.config.variant != Variant::Hidden {
        return Err(Failure::Config(
            "--hidden-checkpoint must hold a hidden-variant backbone".into(),
        ));
    }
    if cls_model.config.variant != Variant::Cls {
        return Err(Failure::Config(
            "--cls-checkpoint must hold a cls-variant backbone".into(),
        ));
    }

    let ds = load_dataset(&args.data)?;
    let hidden_store = space_store(&ds, Variant::Hidden)?;
    let cls_store = space_store(&ds, Variant::Cls)?;

    let index = match &args.index {
        Some(dir) => KnnIndex::<f32>::load(dir)?,
        None => index_from_store(cls_store)?,
    };
    if let Some(dir) = &args.save_index {
        index.save(dir)?;
    }
    let projector = match &args.projector {
        Some(dir) => load_projector::<f32>(dir)?.0,
        None => ClsProjector::<f32>::init(
            cls_model.config.embed_dim,
            run.projector.depth,
            run.projector.slope,
            0,
        )?,
    };

    let dir = OutputDir::create(&args.out, &run)?;
    let mut outcomes = Vec::with_capacity(ds.voxel_ids.len());
    let mut hits = 0usize;
    for (i, id) in ds.voxel_ids.iter().enumerate() {
        let row = ds.voxels.row(i);
        let f_hidden = hidden_model.embed_voxels(row)?;
        let f_cls = cls_model.embed_voxels(row)?;
        let outcome: TwoStageOutcome = match &args.endpoint {
            Some(url) => {
                let projected = projector.project(&f_cls)?;
                let q64: Vec<f64> = projected.iter().map(|&x| x as f64).collect();
                let candidates = remote_knn_search(url, &q64, args.k, None)?;
                two_stage_rerank(&f_hidden, candidates, hidden_store)?
            }
            None => two_stage_retrieve(
                &f_hidden,
                &f_cls,
                &projector,
                &index,
                hidden_store,
                args.k,
            )?,
        };
        let hit = outcome.best_id == *id;
        hits += hit as usize;
        outcomes.push(RetrieveOutcome {
            query_id: id.clone(),
            best_id: outcome.best_id,
            best_similarity: outcome.best_similarity,
            hit,
        });
    }
    let report = RetrieveReport {
        k: args.k,
        n_queries: outcomes.len(),
        top1: hits as f64 / outcomes.len().max(1) as f64,
        source: match &args.endpoint {
            Some(url) => format!("remote:{url}"),
            None => "local".into(),
        },
        outcomes,
    };
    write_json(&dir.file("two_stage_report.json"), &report)?;
    dir.finish()?;
    say(format!(
        "two-stage top-1 {:.4} over {} queries (k = {}, {})",
        report.top1, report.n_queries, report.k, report.source
    ));
    Ok(())
}

fn cmd_classify(args: &ClassifyArgs) -> CliResult<()> {
    let run = read_run_config(args.config.as_deref())?;
    let (model, _) = load_checkpoint::<f32>(&args.checkpoint)?;
    let ds = load_dataset(&args.data)?;
    // Prompt ranking happens in the cls space, so classification always runs
    // a cls-variant model against the cls image store.
    let space = space_store(&ds, Variant::Cls)?;
    let Some(prompts) = ds.class_prompts.as_ref() else {
        return Err(Failure::Data(
            "dataset manifest lacks a class_prompts store".into(),
        ));
    };
    if ds.manifest.class_labels.is_empty() {
        return Err(Failure::Data(
            "dataset manifest records no class labels".into(),
        ));
    }

    let embedded = embed_all(&model, &ds)?;
    let queries = EmbeddingStore::from_rows(ds.voxel_ids.clone(), embedded)?;
    let top_k: Vec<usize> = if args.top_k.is_empty() {
        vec![1, 5.min(prompts.len())]
    } else {
        args.top_k.clone()
    };

    let dir = OutputDir::create(&args.out, &run)?;
    let report = classify_store(&queries, space, prompts, &ds.manifest.class_labels, &top_k)?;
    write_json(&dir.file("classification_report.json"), &report)?;
    dir.finish()?;
    say(format!(
        "zero-shot top-1 {:.4} over {} queries ({} classes, chance {:.4})",
        report.topk.get(&1).copied().unwrap_or(0.0),
        report.n_queries,
        report.class_count,
        report.chance
    ));
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> CliResult<()> {
    let run = read_run_config(Some(&args.config))?;
    let model_cfg = require_model(&run)?;
    if args.batch < 2 {
        return Err(Failure::Config("--batch must be at least 2".into()));
    }
    let seed = args.seed.unwrap_or(run.train.seed);
    let model = DftBackbone::<f64>::init(model_cfg.clone(), seed)?;

    // Deterministic random pairs; double precision end to end.
    let mut rng = SplitMix64::substream(seed, 1);
    let out_len = model_cfg.out_tokens * model_cfg.embed_dim;
    let xs: Vec<Vec<f64>> = (0..args.batch)
        .map(|_| (0..model_cfg.voxel_len).map(|_| rng.normal()).collect())
        .collect();
    let vs: Vec<Vec<f64>> = (0..args.batch)
        .map(|_| (0..out_len).map(|_| rng.normal()).collect())
        .collect();
    let xs_refs: Vec<&[f64]> = xs.iter().map(|r| r.as_slice()).collect();
    let vs_refs: Vec<&[f64]> = vs.iter().map(|r| r.as_slice()).collect();

    let report = grad_check(&model, &xs_refs, &vs_refs, &run.train.loss, args.tolerance)?;
    if let Some(path) = &args.out {
        write_json(path, &report)?;
    }
    say(format!(
        "gradcheck {}: max relative error {:.3e} at {}[{}] (tolerance {:.1e}, {} tensors)",
        if report.pass { "pass" } else { "FAIL" },
        report.max_rel_err,
        report.worst_param,
        report.worst_index,
        report.tolerance,
        report.per_param.len()
    ));
    if report.pass {
        Ok(())
    } else {
        Err(Failure::Verification(format!(
            "gradient check failed: {} relative error at {}[{}] exceeds {}",
            report.max_rel_err, report.worst_param, report.worst_index, report.tolerance
        )))
    }
}

#[derive(Serialize)]
struct ParamsReport {
    param_count: usize,
    flops: crate::backbone::FlopsBreakdown,
}

fn cmd_params(args: &ParamsArgs) -> CliResult<()> {
    let run = read_run_config(Some(&args.config))?;
    let model_cfg = require_model(&run)?;
    let model = DftBackbone::<f32>::init(model_cfg.clone(), 0)?;
    let report = ParamsReport {
        param_count: model.param_count(),
        flops: flops_estimate(&model_cfg),
    };
    say(serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

fn cmd_serve_knn(args: &ServeKnnArgs) -> CliResult<()> {
    let index: KnnIndex<f64> = match (&args.index, &args.data) {
        (Some(dir), _) => KnnIndex::load(dir)?,
        (None, Some(manifest)) => {
            let ds = load_dataset(manifest)?;
            let cls = space_store(&ds, Variant::Cls)?;
            let mut rows = RealTensor::<f64>::zeros(vec![cls.len(), cls.dim()]);
            for r in 0..cls.len() {
                for (c, &v) in cls.row(r).iter().enumerate() {
                    rows.row_mut(r)[c] = v as f64;
                }
            }
            KnnIndex::build(cls.ids().to_vec(), &rows)?
        }
        (None, None) => {
            return Err(Failure::Config(
                "serve-knn needs --index or --data to build from".into(),
            ))
        }
    };
    let count = index.len();
    let server = KnnServer::spawn(index, &args.bind)
        .map_err(|e| Failure::Data(format!("cannot bind {}: {e}", args.bind)))?;
    say(format!("serving {count} items on {}", server.url()));
    server.wait();
    Ok(())
}

// ---------------------------------------------------------------------------
// Entry points
// ---------------------------------------------------------------------------

/// Testable entry: parse the given argv and run; returns the exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version arrive here too; they are not failures.
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if is_help { 0 } else { 2 };
        }
    };
    let result = match &cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Retrieve(a) => cmd_retrieve(a),
        Cmd::Classify(a) => cmd_classify(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::Params(a) => cmd_params(a),
        Cmd::ServeKnn(a) => cmd_serve_knn(a),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.code()
        }
    }
}

pub fn run_cli() -> i32 {
    run_from(std::env::args_os())
}
