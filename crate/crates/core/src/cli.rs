//! The `mll` command line: augmentation, training, evaluation, gradient
//! checks and embedding export.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

use std::collections::{BTreeMap, HashMap};
use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::checks::{run_suite, CheckSizes};
use crate::data_io::{
    dump_embeddings, load_examples, make_folds, read_manifest, write_features, write_manifest, DataError, GroupKey,
    Manifest, ManifestEntry,
};
use crate::eam::{augment, Labeled, MixConfig, MixError, MixupMode};
use crate::losses::LossError;
use crate::nn::{Aggregation, AttentionWeighting, NnError};
use crate::signal::{load_wav, save_wav, SignalError, Waveform};
use crate::synthetic::{toy_dataset, ToyConfig};
use crate::trainer::{
    evaluate, fit, load_checkpoint, save_checkpoint, CheckpointError, Evaluation, ModelParams, TrainConfig, TrainError,
    TrainState, Workers,
};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Usage(m) | Self::Data(m) | Self::Numeric(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Model(t) => t.into(),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) | TrainError::Loss(LossError::InvalidConfig(_)) => Self::Usage(e.to_string()),
            TrainError::Loss(LossError::DomainError(_)) => Self::Numeric(e.to_string()),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<SignalError> for CliError {
    fn from(e: SignalError) -> Self {
        Self::Data(e.to_string())
    }
}

fn io_error(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(
    name = "mll",
    version,
    about = "Energy-adaptive mixup, frame-level attention and multi-loss training for speech emotion recognition"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write mixed WAVs with soft-label sidecars from pairs of manifest entries.
    Augment(AugmentArgs),
    /// Train on all folds except --fold and evaluate on it.
    Train(TrainArgs),
    /// Report WA/UA and the confusion matrix of a checkpoint as JSON.
    Evaluate(EvaluateArgs),
    /// Finite-difference check of every kernel's analytic gradient.
    Gradcheck(GradcheckArgs),
    /// Export projected utterance embeddings as CSV.
    DumpEmbeddings(DumpArgs),
    /// Generate a seeded toy feature dataset and its manifest.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// JSON-lines manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated class list [default: sorted labels of the manifest]
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<String>>,
    /// Number of cross-validation folds.
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Grouping that folds must keep together.
    #[arg(long, default_value = "session")]
    pub group_key: GroupKey,
    /// 0-based held-out fold [default: none, use every clean entry]
    #[arg(long)]
    pub fold: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Comma-separated class list [default: sorted labels of the manifest]
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<String>>,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub snr_min: f64,
    #[arg(long, default_value_t = 10.0, allow_negative_numbers = true)]
    pub snr_max: f64,
    /// Lower bound on mixed length / base length.
    #[arg(long, default_value_t = 0.1)]
    pub mix_frac_min: f64,
    #[arg(long, default_value_t = 0.5)]
    pub mix_frac_max: f64,
    #[arg(long, default_value = "eam")]
    pub mixup: MixupMode,
    /// Number of mixes to attempt.
    #[arg(long)]
    pub pairs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Partners are drawn from the base utterance's fold.
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value = "session")]
    pub group_key: GroupKey,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// TOML or JSON file with training settings; flags given on the
    /// command line take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value = "flam")]
    pub aggregation: Aggregation,
    /// Frame weighting inside FLAM pooling (linear|softmax).
    #[arg(long, default_value = "linear", value_parser = parse_weighting)]
    pub weighting: AttentionWeighting,
    /// Which augmented manifest entries to train on (eam|lam|none).
    #[arg(long, default_value = "eam")]
    pub mixup: MixupMode,
    /// KL weight.
    #[arg(long, default_value_t = 1.0)]
    pub lambda1: f64,
    /// Focal weight.
    #[arg(long, default_value_t = 1.0)]
    pub lambda2: f64,
    /// Center-loss weight.
    #[arg(long, default_value_t = 0.1)]
    pub lambda3: f64,
    /// SupCon weight.
    #[arg(long, default_value_t = 0.1)]
    pub lambda4: f64,
    #[arg(long, default_value_t = 2.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.07)]
    pub tau: f64,
    #[arg(long, default_value_t = 64)]
    pub proj_dim: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub model_lr: f64,
    #[arg(long, default_value_t = 5e-3)]
    pub center_lr: f64,
    /// Per-epoch learning-rate factor.
    #[arg(long, default_value_t = 0.875)]
    pub decay: f64,
    /// Last epoch that applies a decay step.
    #[arg(long, default_value_t = 20)]
    pub decay_until_epoch: usize,
    #[arg(long, default_value_t = 16)]
    pub heads: usize,
    /// Disable context broadcasting of frame embeddings.
    #[arg(long)]
    pub no_cb: bool,
    /// Feed SupCon unnormalised frame embeddings.
    #[arg(long)]
    pub no_normalize: bool,
    /// Use the utterance projection for frame embeddings too.
    #[arg(long)]
    pub shared_frame_projection: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Checkpoint output path.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON-lines training log [default: <out>.log.jsonl]
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Seed of the fold assignment.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Frames, feature width and heads as T,D,H.
    #[arg(long, default_value = "6,32,16")]
    pub sizes: String,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 8)]
    pub proj_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub n_classes: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Maximum accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Seed of the fold assignment.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 400)]
    pub utterances: usize,
    #[arg(long, default_value_t = 4)]
    pub n_classes: usize,
    #[arg(long, default_value_t = 50)]
    pub frames: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.05)]
    pub mean_scale: f64,
    #[arg(long, default_value_t = 0.05)]
    pub noise_std: f64,
    /// Largest-to-smallest class size ratio.
    #[arg(long, default_value_t = 1.0)]
    pub imbalance: f64,
    #[arg(long, default_value_t = 5)]
    pub sessions: usize,
    #[arg(long, default_value_t = 10)]
    pub speakers: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_weighting(s: &str) -> Result<AttentionWeighting, String> {
    match s {
        "linear" => Ok(AttentionWeighting::Linear),
        "softmax" => Ok(AttentionWeighting::Softmax),
        other => Err(format!("unknown weighting '{other}' (linear|softmax)")),
    }
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return 1;
        }
    };
    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand required");
    let result = match &cli.command {
        Command::Augment(a) => cmd_augment(a, out, err),
        Command::Train(a) => cmd_train(a, sub, out, err),
        Command::Evaluate(a) => cmd_evaluate(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
        Command::DumpEmbeddings(a) => cmd_dump_embeddings(a, out),
        Command::Synth(a) => cmd_synth(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.exit_code()
        }
    }
}

fn print_json(out: &mut dyn Write, value: &impl Serialize) -> Result<(), CliError> {
    let line = serde_json::to_string(value).expect("serializable output");
    writeln!(out, "{line}").map_err(|e| CliError::Data(format!("stdout: {e}")))
}

fn load_config_file(path: &Path) -> Result<TrainConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let parsed = if is_json {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Defaults, overlaid by the config file, overlaid by explicit flags.
pub fn resolve_train_config(a: &TrainArgs, m: &ArgMatches) -> Result<TrainConfig, CliError> {
    let mut cfg = match &a.config {
        Some(p) => load_config_file(p)?,
        None => TrainConfig::default(),
    };
    let given = |id: &str| m.value_source(id) == Some(ValueSource::CommandLine);
    macro_rules! overlay {
        ($($id:literal => $target:expr, $value:expr;)*) => {
            $(if given($id) { $target = $value; })*
        };
    }
    overlay! {
        "epochs" => cfg.epochs, a.epochs;
        "aggregation" => cfg.aggregation, a.aggregation;
        "weighting" => cfg.weighting, a.weighting;
        "mixup" => cfg.mixup, a.mixup;
        "lambda1" => cfg.loss.lambdas[0], a.lambda1;
        "lambda2" => cfg.loss.lambdas[1], a.lambda2;
        "lambda3" => cfg.loss.lambdas[2], a.lambda3;
        "lambda4" => cfg.loss.lambdas[3], a.lambda4;
        "gamma" => cfg.loss.gamma, a.gamma;
        "tau" => cfg.loss.tau, a.tau;
        "proj_dim" => cfg.loss.proj_dim, a.proj_dim;
        "batch_size" => cfg.batch_size, a.batch_size;
        "model_lr" => cfg.model_lr, a.model_lr;
        "center_lr" => cfg.center_lr, a.center_lr;
        "decay" => cfg.decay, a.decay;
        "decay_until_epoch" => cfg.decay_until_epoch, a.decay_until_epoch;
        "heads" => cfg.heads, a.heads;
        "no_cb" => cfg.loss.cb_enabled, !a.no_cb;
        "no_normalize" => cfg.loss.normalize_embeddings, !a.no_normalize;
        "shared_frame_projection" => cfg.shared_frame_projection, a.shared_frame_projection;
        "seed" => cfg.seed, a.seed;
        "threads" => cfg.threads, a.threads;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Training, evaluation and augmented entries, split by fold.
struct Split<'m> {
    train: Vec<&'m ManifestEntry>,
    eval: Vec<&'m ManifestEntry>,
}

fn group_value(e: &ManifestEntry, key: GroupKey) -> &str {
    match key {
        GroupKey::Session => &e.session,
        GroupKey::Speaker => &e.speaker,
    }
}

/// Fold of every clean entry and of every group, planned over clean
/// (non-augmented) entries only; augmented entries follow their group.
/// Held-out fold and the fold of every group.
type FoldLookup = Option<(usize, HashMap<String, usize>)>;

fn fold_lookup(m: &Manifest, data: &DataArgs, seed: u64) -> Result<FoldLookup, CliError> {
    let Some(k) = data.fold else { return Ok(None) };
    if k >= data.folds {
        return Err(CliError::Usage(format!("--fold {k} out of range for {} folds", data.folds)));
    }
    let clean: Vec<ManifestEntry> = m.entries.iter().filter(|e| e.mixup.is_none()).cloned().collect();
    let plan = make_folds(&clean, data.folds, data.group_key, seed)?;
    let groups = clean
        .iter()
        .map(|e| (group_value(e, data.group_key).to_string(), plan.assignment[&e.id]))
        .collect();
    Ok(Some((k, groups)))
}

fn split<'m>(m: &'m Manifest, data: &DataArgs, seed: u64, mixup: Option<MixupMode>) -> Result<Split<'m>, CliError> {
    let lookup = fold_lookup(m, data, seed)?;
    let mut s = Split { train: Vec::new(), eval: Vec::new() };
    for e in &m.entries {
        let held_out = lookup
            .as_ref()
            .map(|(k, groups)| groups.get(group_value(e, data.group_key)) == Some(k));
        match e.mixup {
            None => {
                if held_out != Some(false) {
                    s.eval.push(e);
                }
                if held_out != Some(true) {
                    s.train.push(e);
                }
            }
            Some(mode) if Some(mode) == mixup && held_out != Some(true) => s.train.push(e),
            Some(_) => {}
        }
    }
    Ok(s)
}

fn with_features(entries: Vec<&ManifestEntry>) -> Vec<&ManifestEntry> {
    entries.into_iter().filter(|e| e.feature_path.is_some()).collect()
}

fn evaluation_json(ev: &Evaluation, classes: &[String]) -> serde_json::Value {
    json!({
        "wa": ev.wa,
        "ua": ev.ua,
        "n": ev.predictions.len(),
        "classes": classes,
        "confusion": ev.confusion,
    })
}

fn cmd_train(a: &TrainArgs, m: &ArgMatches, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let cfg = resolve_train_config(a, m)?;
    let manifest = read_manifest(&a.data.manifest, a.data.classes.as_deref())?;
    let parts = split(&manifest, &a.data, cfg.seed, Some(cfg.mixup))?;
    let train = load_examples::<f32>(&manifest, &with_features(parts.train))?;
    let eval = load_examples::<f32>(&manifest, &with_features(parts.eval))?;
    if train.is_empty() {
        return Err(CliError::Data("no training examples with feature_path".into()));
    }

    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.jsonl");
        PathBuf::from(p)
    });
    let mut log = io::BufWriter::new(fs::File::create(&log_path).map_err(io_error(&log_path))?);
    let mut log_err = None;
    let (state, _) = fit(&train, &eval, manifest.classes.len(), &cfg, |rec| {
        let line = serde_json::to_string(rec).expect("record serializes");
        if let Err(e) = writeln!(log, "{line}") {
            log_err.get_or_insert(e);
        }
        let _ = writeln!(err, "epoch {} total {:.6} wa {:.4} ua {:.4}", rec.epoch, rec.total, rec.wa, rec.ua);
    })?;
    if let Some(e) = log_err {
        return Err(io_error(&log_path)(e));
    }
    log.flush().map_err(io_error(&log_path))?;
    let TrainState { params, .. } = state;
    save_checkpoint(&params, &a.out)?;

    let workers = Workers::new(cfg.threads)?;
    let eval_set = if eval.is_empty() { &train } else { &eval };
    let ev = evaluate(eval_set, &params, &workers)?;
    print_json(out, &evaluation_json(&ev, &manifest.classes))
}

fn load_model(path: &Path, manifest: &Manifest) -> Result<ModelParams<f32>, CliError> {
    let params: ModelParams<f32> = load_checkpoint(path)?;
    if params.config.n_classes != manifest.classes.len() {
        return Err(CliError::Data(format!(
            "checkpoint has {} classes, manifest has {}",
            params.config.n_classes,
            manifest.classes.len()
        )));
    }
    Ok(params)
}

fn check_dims(params: &ModelParams<f32>, examples: &[crate::trainer::Example<f32>]) -> Result<(), CliError> {
    if let Some(ex) = examples.iter().find(|ex| ex.features.cols() != params.config.dim) {
        return Err(CliError::Data(format!(
            "dimension mismatch: '{}' has {} features per frame, checkpoint expects {}",
            ex.id,
            ex.features.cols(),
            params.config.dim
        )));
    }
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let manifest = read_manifest(&a.data.manifest, a.data.classes.as_deref())?;
    let params = load_model(&a.checkpoint, &manifest)?;
    let parts = split(&manifest, &a.data, a.seed, None)?;
    let eval = load_examples::<f32>(&manifest, &with_features(parts.eval))?;
    check_dims(&params, &eval)?;
    let workers = Workers::new(a.threads.max(1))?;
    let ev = evaluate(&eval, &params, &workers)?;
    print_json(out, &evaluation_json(&ev, &manifest.classes))
}

fn parse_sizes(s: &str) -> Result<(usize, usize, usize), CliError> {
    let v: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Usage(format!("--sizes '{s}': {e}")))?;
    match v.as_slice() {
        &[t, d, h] if t > 0 && d > 0 && h > 0 && d % h == 0 => Ok((t, d, h)),
        _ => Err(CliError::Usage(format!(
            "--sizes '{s}' must be T,D,H with positive values and H dividing D"
        ))),
    }
}

fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let (frames, dim, heads) = parse_sizes(&a.sizes)?;
    if a.batch < 2 || a.n_classes < 2 || a.proj_dim == 0 {
        return Err(CliError::Usage("need --batch >= 2, --n-classes >= 2 and --proj-dim >= 1".into()));
    }
    let sizes = CheckSizes {
        frames,
        dim,
        heads,
        batch: a.batch,
        proj_dim: a.proj_dim,
        classes: a.n_classes,
    };
    let results = run_suite(sizes, a.seed, a.step, a.tol);
    for r in &results {
        print_json(out, r)?;
    }
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.kernel).collect();
    print_json(out, &json!({ "max_rel_error": worst, "tolerance": a.tol, "failed": failed }))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn cmd_dump_embeddings(a: &DumpArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let manifest = read_manifest(&a.data.manifest, a.data.classes.as_deref())?;
    let params = load_model(&a.checkpoint, &manifest)?;
    let lookup = fold_lookup(&manifest, &a.data, a.seed)?;
    let entries = with_features(manifest.entries.iter().collect());
    let examples = load_examples::<f32>(&manifest, &entries)?;
    check_dims(&params, &examples)?;
    let splits: Vec<&str> = entries
        .iter()
        .map(|e| match (&lookup, e.mixup) {
            (_, Some(_)) => "augmented",
            (None, None) => "all",
            (Some((k, groups)), None) => {
                if groups.get(group_value(e, a.data.group_key)) == Some(k) {
                    "test"
                } else {
                    "train"
                }
            }
        })
        .collect();
    let rows: Vec<_> = examples.iter().zip(splits).collect();
    dump_embeddings(&rows, &manifest.classes, &params, &a.out)?;
    print_json(out, &json!({ "rows": rows.len(), "path": a.out }))
}

fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if a.sessions == 0 || a.speakers == 0 || a.n_classes < 2 || a.frames == 0 || a.dim == 0 {
        return Err(CliError::Usage("synth needs positive sizes and at least 2 classes".into()));
    }
    let cfg = ToyConfig {
        n_utterances: a.utterances,
        n_classes: a.n_classes,
        frames: a.frames,
        dim: a.dim,
        mean_scale: a.mean_scale,
        noise_std: a.noise_std,
        imbalance: a.imbalance,
        seed: a.seed,
    };
    let data = toy_dataset::<f32>(&cfg);
    let feat_dir = a.out_dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(io_error(&feat_dir))?;
    let mut entries = Vec::with_capacity(data.len());
    for (i, ex) in data.iter().enumerate() {
        let rel = PathBuf::from("features").join(format!("{}.eamf", ex.id));
        write_features(a.out_dir.join(&rel), &ex.features)?;
        entries.push(ManifestEntry {
            id: ex.id.clone(),
            audio_path: None,
            feature_path: Some(rel),
            label: format!("class{}", ex.label),
            speaker: format!("spk{}", i % a.speakers),
            session: format!("Ses{}", i % a.sessions),
            soft_label: None,
            mixup: None,
        });
    }
    let manifest = a.out_dir.join("manifest.jsonl");
    write_manifest(&manifest, &entries)?;
    print_json(out, &json!({ "utterances": entries.len(), "manifest": manifest }))
}

fn cmd_augment(a: &AugmentArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    if a.mixup == MixupMode::None {
        return Err(CliError::Usage("--mixup must be eam or lam".into()));
    }
    let mix_cfg = MixConfig {
        snr_db_min: a.snr_min,
        snr_db_max: a.snr_max,
        mix_frac_min: a.mix_frac_min,
        mix_frac_max: a.mix_frac_max,
        rng_seed: a.seed,
    };
    mix_cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let manifest = read_manifest(&a.manifest, a.classes.as_deref())?;
    if a.pairs == 0 {
        return print_json(out, &json!({ "written": 0, "skipped": 0 }));
    }
    let pool: Vec<&ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| e.mixup.is_none() && e.audio_path.is_some())
        .collect();
    if pool.is_empty() {
        return Err(CliError::Data("no manifest entries with audio_path".into()));
    }
    let owned: Vec<ManifestEntry> = pool.iter().map(|&e| e.clone()).collect();
    let plan = make_folds(&owned, a.folds, a.group_key, a.seed)?;
    let mut by_fold: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in pool.iter().enumerate() {
        by_fold.entry(plan.assignment[&e.id]).or_default().push(i);
    }
    fs::create_dir_all(&a.out_dir).map_err(io_error(&a.out_dir))?;

    let mut cache: HashMap<usize, Waveform> = HashMap::new();
    let mut load = |i: usize| -> Result<Waveform, CliError> {
        if let Some(w) = cache.get(&i) {
            return Ok(w.clone());
        }
        let w = load_wav(pool[i].audio_path.as_ref().expect("filtered on audio_path"))?;
        cache.insert(i, w.clone());
        Ok(w)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let n_classes = manifest.classes.len();
    let mut new_entries = Vec::new();
    let mut skipped = 0usize;
    for k in 0..a.pairs {
        let bi = rng.random_range(0..pool.len());
        let partners: Vec<usize> = by_fold[&plan.assignment[&pool[bi].id]]
            .iter()
            .copied()
            .filter(|&j| j != bi)
            .collect();
        if partners.is_empty() {
            skipped += 1;
            let _ = writeln!(err, "pair {k}: '{}' has no partner in its fold, skipped", pool[bi].id);
            continue;
        }
        let dj = partners[rng.random_range(0..partners.len())];
        let (base, donor) = (pool[bi], pool[dj]);
        let (wb, wd) = (load(bi)?, load(dj)?);
        let class_of = |e: &ManifestEntry| manifest.class_index(&e.label).expect("validated label");
        let result = augment(
            a.mixup,
            Labeled { wave: &wb, class: class_of(base) },
            Labeled { wave: &wd, class: class_of(donor) },
            n_classes,
            &mix_cfg,
            &mut rng,
        );
        let mix = match result {
            Ok(m) => m,
            Err(e @ (MixError::SilentSegment { .. } | MixError::SegmentTooShort(_) | MixError::SampleRateMismatch(..))) => {
                skipped += 1;
                let _ = writeln!(err, "pair {k}: '{}' + '{}' skipped: {e}", base.id, donor.id);
                continue;
            }
            Err(e) => return Err(CliError::Data(e.to_string())),
        };
        let id = format!("mix-{k:05}");
        let wav_name = format!("{id}.wav");
        save_wav(&mix.mixed, a.out_dir.join(&wav_name))?;
        let soft: BTreeMap<String, f64> = mix
            .label
            .probs()
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(c, &p)| (manifest.classes[c].clone(), p))
            .collect();
        let label = manifest.classes[mix.label.argmax()].clone();
        let sidecar = json!({
            "id": id,
            "base": base.id,
            "donor": donor.id,
            "mixup": a.mixup,
            "label": label,
            "soft_label": soft,
            "weight": mix.weight,
            "l_mix": mix.params.l_mix,
            "start_i": mix.params.start_i,
            "start_j": mix.params.start_j,
            "snr_db": mix.params.snr_db,
            "scale": mix.params.scale,
            "achieved_snr_db": mix.achieved_snr_db,
        });
        let side_path = a.out_dir.join(format!("{id}.json"));
        fs::write(&side_path, format!("{sidecar}\n")).map_err(io_error(&side_path))?;
        new_entries.push(ManifestEntry {
            id,
            audio_path: Some(wav_name.into()),
            feature_path: None,
            label,
            speaker: base.speaker.clone(),
            session: base.session.clone(),
            soft_label: Some(soft),
            mixup: Some(a.mixup),
        });
    }
    if !new_entries.is_empty() {
        write_manifest(a.out_dir.join("manifest.jsonl"), &new_entries)?;
    }
    print_json(out, &json!({ "written": new_entries.len(), "skipped": skipped }))
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        Self::Data(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run(std::iter::once("mll").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn help_lists_defaults() {
        let (code, out, _) = run_capture(&["train", "--help"]);
        assert_eq!(code, 0);
        for needle in [
            "[default: 0.0001]",
            "[default: 0.005]",
            "[default: 16]",
            "[default: 0.07]",
            "[default: 64]",
            "[default: 0.875]",
            "[default: flam]",
            "[default: eam]",
        ] {
            assert!(out.contains(needle), "missing {needle} in\n{out}");
        }
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run_capture(&["train"]).0, 1);
        assert_eq!(run_capture(&["frobnicate"]).0, 1);
        assert_eq!(run_capture(&["gradcheck", "--sizes", "4,30,16"]).0, 1);
    }

    #[test]
    fn sizes_parse() {
        assert_eq!(parse_sizes("8,32,16").unwrap(), (8, 32, 16));
        assert!(parse_sizes("8,32").is_err());
        assert!(parse_sizes("a,b,c").is_err());
    }
}
