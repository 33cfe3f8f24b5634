//! The `billetdec` command line: `gen`, `train`, `decode` and `eval`.
//!
//! Options come from flags and, optionally, a TOML config file passed with
//! `--config` (one table per subcommand, see `docs/config.md`). Flags win
//! over file values; the resolved configuration is printed to stderr as one
//! JSON line before any work starts.
//!
//! Exit codes: 0 success, 1 internal error, 2 user or input error.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::ctc::{decode, DecodeOptions, DecodeResult, ProbLattice, RepairOptions, DEFAULT_MIN_RUN};
use crate::error::{Error, Result};
use crate::harness::{
    entropy_error_report, evaluate, run_ablation, summary_csv, summary_table, Cell, EvalConfig,
    EvalReport, EvalSample, TtaProtocol,
};
use crate::model::{
    classify_strip, frame_accuracy, train, Architecture, FrameSet, LrSchedule, ModelParams,
    StatMode, TrainConfig,
};
use crate::numeric::Alphabet;
use crate::rules::EncodingRules;
use crate::synthgen::{
    gen_dataset, read_frames, read_pgm, CorruptionSpec, DatasetManifest, Domain, GenConfig,
    FRAME_STRIDE,
};
use crate::tta::{trajectory_csv, AdaptConfig, AdaptMode, Optimizer, DEFAULT_TTA_BATCH, DEFAULT_TTA_LR};

pub const THREADS_ENV: &str = "BILLETDEC_THREADS";

#[derive(Debug, Parser)]
#[command(name = "billetdec", version, about = "Billet number recognition toolkit")]
pub struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic strip dataset.
    Gen(GenArgs),
    /// Pretrain a frame classifier on a generated dataset.
    Train(TrainArgs),
    /// Decode one strip image or lattice file.
    Decode(DecodeArgs),
    /// Evaluate a checkpoint on a dataset, optionally as a 2x2 ablation.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum DomainArg {
    Source,
    TargetShifted,
}

impl From<DomainArg> for Domain {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::Source => Domain::Source,
            DomainArg::TargetShifted => Domain::TargetShifted,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Encoding rules file (defaults to the bundled billet schema).
    #[arg(long)]
    pub rules_file: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long, value_enum)]
    pub domain: Option<DomainArg>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub gap: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `manifest.csv` written by `gen`; `frames.bin` is read from the same directory.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Fraction of frames held out for validation.
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub cosine: bool,
    #[arg(long)]
    pub alphabet: Option<String>,
}

/// Paired on/off switches; `None` means "not given on the command line".
fn switch(on: bool, off: bool) -> Option<bool> {
    match (on, off) {
        (true, _) => Some(true),
        (_, true) => Some(false),
        _ => None,
    }
}

#[derive(Debug, Args)]
pub struct PriorFlags {
    #[arg(long, overrides_with = "no_repair")]
    pub repair: bool,
    #[arg(long)]
    pub no_repair: bool,
    #[arg(long, overrides_with = "no_rules")]
    pub rules: bool,
    #[arg(long)]
    pub no_rules: bool,
    #[arg(long)]
    pub min_run: Option<usize>,
    /// Also repair blank runs touching either end of the strip.
    #[arg(long)]
    pub repair_edges: bool,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// A PGM strip (needs --model) or a lattice file (LAT1 text or LATB binary).
    pub input: PathBuf,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub rules_file: Option<PathBuf>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[command(flatten)]
    pub prior: PriorFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ModeArg {
    Continual,
    Episodic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ProtocolArg {
    Online,
    PostHoc,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub rules_file: Option<PathBuf>,
    /// Directory for the CSV/text reports.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run all four cells (baseline, prior, tta, tta+prior).
    #[arg(long)]
    pub ablation: bool,
    #[arg(long, overrides_with = "no_tta")]
    pub tta: bool,
    #[arg(long)]
    pub no_tta: bool,
    #[command(flatten)]
    pub prior: PriorFlags,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub tta_lr: Option<f64>,
    #[arg(long, value_enum)]
    pub tta_optimizer: Option<OptimizerArg>,
    #[arg(long, value_enum)]
    pub tta_mode: Option<ModeArg>,
    #[arg(long)]
    pub tta_steps: Option<usize>,
    /// Minimum frames per adaptation batch.
    #[arg(long)]
    pub tta_batch: Option<usize>,
    #[arg(long, value_enum)]
    pub protocol: Option<ProtocolArg>,
    /// Entropy bins in the entropy/error report.
    #[arg(long)]
    pub bins: Option<usize>,
}

// ---- config file ----------------------------------------------------------

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    #[serde(default)]
    gen: FileGen,
    #[serde(default)]
    train: FileTrain,
    #[serde(default)]
    decode: FileDecode,
    #[serde(default)]
    eval: FileEval,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileGen {
    rules_file: Option<PathBuf>,
    count: Option<usize>,
    domain: Option<DomainArg>,
    out: Option<PathBuf>,
    gap: Option<usize>,
    /// Field overrides applied on top of the domain preset.
    corruption: Option<toml::Table>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileTrain {
    manifest: Option<PathBuf>,
    out: Option<PathBuf>,
    epochs: Option<usize>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    val_fraction: Option<f64>,
    schedule: Option<LrSchedule>,
    alphabet: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FilePrior {
    repair: Option<bool>,
    rules: Option<bool>,
    min_run: Option<usize>,
    repair_edges: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileDecode {
    model: Option<PathBuf>,
    rules_file: Option<PathBuf>,
    stride: Option<usize>,
    #[serde(flatten)]
    prior: FilePrior,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileEval {
    model: Option<PathBuf>,
    manifest: Option<PathBuf>,
    rules_file: Option<PathBuf>,
    out: Option<PathBuf>,
    ablation: Option<bool>,
    tta: Option<bool>,
    stride: Option<usize>,
    tta_lr: Option<f64>,
    tta_optimizer: Option<OptimizerArg>,
    tta_mode: Option<ModeArg>,
    tta_steps: Option<usize>,
    tta_batch: Option<usize>,
    protocol: Option<ProtocolArg>,
    bins: Option<usize>,
    #[serde(flatten)]
    prior: FilePrior,
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {}", path.display(), e.message())))
}

fn required<T>(value: Option<T>, name: &str) -> Result<T> {
    value.ok_or_else(|| Error::contract(format!("missing required option --{name}")))
}

/// Paths in the config file are relative to the file itself.
fn file_path(config: Option<&Path>, p: Option<PathBuf>) -> Option<PathBuf> {
    let p = p?;
    match config.and_then(Path::parent) {
        Some(dir) if p.is_relative() => Some(dir.join(p)),
        _ => Some(p),
    }
}

fn load_rules(path: Option<&Path>) -> Result<EncodingRules> {
    match path {
        Some(p) => EncodingRules::load(p),
        None => Ok(EncodingRules::billet()),
    }
}

fn log_resolved<T: Serialize>(cmd: &str, cfg: &T) {
    let json = serde_json::to_string(cfg).unwrap_or_else(|e| format!("\"<unserializable: {e}>\""));
    eprintln!("billetdec {cmd} config: {json}");
}

fn prior_options(flags: &PriorFlags, file: &FilePrior) -> DecodeOptions {
    DecodeOptions {
        repair: RepairOptions {
            min_run: flags.min_run.or(file.min_run).unwrap_or(DEFAULT_MIN_RUN),
            repair_edges: flags.repair_edges || file.repair_edges.unwrap_or(false),
        },
        repair_enabled: switch(flags.repair, flags.no_repair).or(file.repair).unwrap_or(true),
        rules_enabled: switch(flags.rules, flags.no_rules).or(file.rules).unwrap_or(true),
    }
}

#[derive(Serialize)]
struct PriorView {
    repair: bool,
    rules: bool,
    min_run: usize,
    repair_edges: bool,
}

impl From<&DecodeOptions> for PriorView {
    fn from(o: &DecodeOptions) -> Self {
        Self {
            repair: o.repair_enabled,
            rules: o.rules_enabled,
            min_run: o.repair.min_run,
            repair_edges: o.repair.repair_edges,
        }
    }
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

// ---- gen ------------------------------------------------------------------

#[derive(Serialize)]
struct GenResolved {
    rules_file: Option<PathBuf>,
    count: usize,
    domain: Domain,
    out: PathBuf,
    gap: usize,
    seed: u64,
    corruption: CorruptionSpec,
}

fn apply_overrides(spec: CorruptionSpec, overrides: Option<toml::Table>) -> Result<CorruptionSpec> {
    let Some(overrides) = overrides else {
        return Ok(spec);
    };
    let mut table = toml::Table::try_from(spec).map_err(|e| Error::Internal(e.to_string()))?;
    for (k, v) in overrides {
        if !table.contains_key(&k) {
            return Err(Error::Format(format!("unknown corruption field {k:?}")));
        }
        table.insert(k, v);
    }
    let spec: CorruptionSpec = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Format(format!("corruption overrides: {}", e.message())))?;
    spec.validate()?;
    Ok(spec)
}

fn cmd_gen(args: GenArgs, seed: Option<u64>, file: FileConfig, config: Option<&Path>) -> Result<String> {
    let f = file.gen;
    let domain: Domain = args.domain.or(f.domain).unwrap_or(DomainArg::Source).into();
    let mut gen_cfg = GenConfig::default();
    gen_cfg.layout.gap_px = args.gap.or(f.gap).unwrap_or(gen_cfg.layout.gap_px);
    gen_cfg.stride = gen_cfg.layout.frame_stride();
    let resolved = GenResolved {
        rules_file: args.rules_file.or(file_path(config, f.rules_file)),
        count: args.count.or(f.count).unwrap_or(100),
        domain,
        out: required(args.out.or(file_path(config, f.out)), "out")?,
        gap: gen_cfg.layout.gap_px,
        seed: seed.or(file.seed).unwrap_or(0),
        corruption: apply_overrides(domain.default_spec(), f.corruption)?,
    };
    log_resolved("gen", &resolved);
    let rules = load_rules(resolved.rules_file.as_deref())?;
    let ds = gen_dataset(&rules, resolved.count, &resolved.corruption, domain, resolved.seed, &gen_cfg)?;
    let manifest = ds.save(&resolved.out)?;
    let damaged = manifest.entries.iter().filter(|e| e.damage.iter().any(|&d| d)).count();
    Ok(format!(
        "wrote {} strips ({} frames, {} with damage) to {}\n",
        manifest.entries.len(),
        ds.frames.len(),
        damaged,
        resolved.out.display()
    ))
}

// ---- train ----------------------------------------------------------------

#[derive(Serialize)]
struct TrainResolved {
    manifest: PathBuf,
    out: PathBuf,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    val_fraction: f64,
    schedule: LrSchedule,
    alphabet: String,
    seed: u64,
}

fn manifest_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Deterministic frame split; validation is skipped when it would hold
/// fewer than two frames.
fn split_frames(frames: &FrameSet, fraction: f64, seed: u64) -> (FrameSet, Option<FrameSet>) {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let n_val = (frames.len() as f64 * fraction).round() as usize;
    if n_val < 2 || frames.len() - n_val < 2 {
        return (frames.clone(), None);
    }
    let mut order: Vec<usize> = (0..frames.len()).collect();
    // a stream distinct from the one that shuffles training batches
    order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)));
    let mut tr = FrameSet::new(frames.side);
    let mut va = FrameSet::new(frames.side);
    for (k, &i) in order.iter().enumerate() {
        let dst = if k < n_val { &mut va } else { &mut tr };
        dst.push(frames.image(i), frames.labels[i]);
    }
    (tr, Some(va))
}

fn cmd_train(args: TrainArgs, seed: Option<u64>, file: FileConfig, config: Option<&Path>) -> Result<String> {
    let f = file.train;
    let defaults = TrainConfig::default();
    let resolved = TrainResolved {
        manifest: required(args.manifest.or(file_path(config, f.manifest)), "manifest")?,
        out: required(args.out.or(file_path(config, f.out)), "out")?,
        epochs: args.epochs.or(f.epochs).unwrap_or(defaults.epochs),
        lr: args.lr.or(f.lr).unwrap_or(defaults.lr),
        batch_size: args.batch_size.or(f.batch_size).unwrap_or(defaults.batch_size),
        val_fraction: args.val_fraction.or(f.val_fraction).unwrap_or(0.1),
        schedule: if args.cosine { LrSchedule::Cosine } else { f.schedule.unwrap_or_default() },
        alphabet: args.alphabet.or(f.alphabet).unwrap_or_else(|| Alphabet::default().to_string()),
        seed: seed.or(file.seed).unwrap_or(0),
    };
    log_resolved("train", &resolved);
    if !(0.0..1.0).contains(&resolved.val_fraction) {
        return Err(Error::contract("val_fraction must lie in [0, 1)"));
    }
    if !(resolved.lr > 0.0 && resolved.lr.is_finite()) {
        return Err(Error::contract("lr must be positive"));
    }
    let manifest = DatasetManifest::load(&resolved.manifest)?;
    let alphabet = Alphabet::parse(&resolved.alphabet)?;
    if let Some(e) = manifest.entries.iter().find(|e| e.label.chars().any(|c| !alphabet.contains(c))) {
        return Err(Error::AlphabetMismatch(format!("label {:?} is not covered by {alphabet}", e.label)));
    }
    let frames = read_frames(&manifest_dir(&resolved.manifest).join("frames.bin"))?;
    let (train_set, val_set) = split_frames(&frames, resolved.val_fraction, resolved.seed);

    let mut params = ModelParams::init(Architecture::default(), alphabet, resolved.seed)?;
    let cfg = TrainConfig {
        lr: resolved.lr,
        batch_size: resolved.batch_size,
        epochs: resolved.epochs,
        seed: resolved.seed,
        schedule: resolved.schedule,
        ..defaults
    };
    let report = train(&mut params, &train_set, &cfg)?;
    create_parent(&resolved.out)?;
    params.save(&resolved.out)?;

    let mut out = String::new();
    let final_loss = report.epoch_losses.last().copied().unwrap_or(report.initial_loss);
    out += &format!("initial_loss {:.6}\nfinal_loss {:.6}\n", report.initial_loss, final_loss);
    if resolved.epochs > 0 {
        let acc = frame_accuracy(&params, &train_set, StatMode::RunningStats)?;
        out += &format!("train_accuracy {acc:.6}\n");
    }
    if let Some(val) = val_set {
        let acc = frame_accuracy(&params, &val, StatMode::RunningStats)?;
        out += &format!("val_accuracy {acc:.6}\n");
    }
    out += &format!("checkpoint {}\n", resolved.out.display());
    Ok(out)
}

// ---- decode ---------------------------------------------------------------

#[derive(Serialize)]
struct DecodeResolved {
    input: PathBuf,
    model: Option<PathBuf>,
    rules_file: Option<PathBuf>,
    stride: usize,
    prior: PriorView,
}

/// The JSON-lines record printed after the decoded text.
#[derive(Serialize)]
struct DecodeRecord<'a> {
    input: String,
    timesteps: usize,
    mean_entropy: f64,
    #[serde(flatten)]
    result: &'a DecodeResult,
}

fn is_pgm(path: &Path) -> Result<bool> {
    let mut magic = [0u8; 2];
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let n = std::io::Read::read(&mut f, &mut magic).map_err(|e| Error::io(path, e))?;
    Ok(n == 2 && &magic == b"P5")
}

fn cmd_decode(args: DecodeArgs, file: FileConfig, config: Option<&Path>) -> Result<String> {
    let f = file.decode;
    let opts = prior_options(&args.prior, &f.prior);
    let resolved = DecodeResolved {
        input: args.input,
        model: args.model.or(file_path(config, f.model)),
        rules_file: args.rules_file.or(file_path(config, f.rules_file)),
        stride: args.stride.or(f.stride).unwrap_or(FRAME_STRIDE),
        prior: PriorView::from(&opts),
    };
    log_resolved("decode", &resolved);
    let lattice = if is_pgm(&resolved.input)? {
        let model = required(resolved.model.as_ref(), "model")?;
        let params = ModelParams::load(model)?;
        let image = read_pgm(&resolved.input)?;
        classify_strip(&params, &image, params.arch.input, resolved.stride)?
    } else {
        ProbLattice::load(&resolved.input)?
    };
    let rules = load_rules(resolved.rules_file.as_deref())?;
    let result = decode(&lattice, Some(&rules), &opts)?;
    let record = DecodeRecord {
        input: resolved.input.display().to_string(),
        timesteps: lattice.timesteps(),
        mean_entropy: lattice.mean_entropy(),
        result: &result,
    };
    let json = serde_json::to_string(&record).map_err(|e| Error::Internal(e.to_string()))?;
    Ok(format!("{}\n{}\n", result.text, json))
}

// ---- eval -----------------------------------------------------------------

#[derive(Serialize)]
struct EvalResolved {
    model: PathBuf,
    manifest: PathBuf,
    rules_file: Option<PathBuf>,
    out: PathBuf,
    ablation: bool,
    tta: bool,
    stride: usize,
    prior: PriorView,
    adapt: AdaptConfig,
    tta_batch: usize,
    protocol: TtaProtocol,
    bins: usize,
}

fn load_samples(manifest_path: &Path) -> Result<Vec<EvalSample>> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let dir = manifest_dir(manifest_path);
    manifest
        .entries
        .iter()
        .map(|e| {
            let path = if e.path.is_absolute() { e.path.clone() } else { dir.join(&e.path) };
            Ok(EvalSample {
                label: e.label.clone(),
                image: read_pgm(&path)?,
            })
        })
        .collect()
}

fn cmd_eval(args: EvalArgs, file: FileConfig, config: Option<&Path>) -> Result<String> {
    let f = file.eval;
    let opts = prior_options(&args.prior, &f.prior);
    let defaults = AdaptConfig::default();
    let optimizer = match args.tta_optimizer.or(f.tta_optimizer) {
        Some(OptimizerArg::Sgd) => Optimizer::Sgd,
        Some(OptimizerArg::Adam) | None => defaults.optimizer,
    };
    let mode = match args.tta_mode.or(f.tta_mode) {
        Some(ModeArg::Episodic) => AdaptMode::Episodic,
        Some(ModeArg::Continual) | None => AdaptMode::Continual,
    };
    let protocol = match args.protocol.or(f.protocol) {
        Some(ProtocolArg::PostHoc) => TtaProtocol::PostHoc,
        Some(ProtocolArg::Online) | None => TtaProtocol::Online,
    };
    let resolved = EvalResolved {
        model: required(args.model.or(file_path(config, f.model)), "model")?,
        manifest: required(args.manifest.or(file_path(config, f.manifest)), "manifest")?,
        rules_file: args.rules_file.or(file_path(config, f.rules_file)),
        out: required(args.out.or(file_path(config, f.out)), "out")?,
        ablation: args.ablation || f.ablation.unwrap_or(false),
        tta: switch(args.tta, args.no_tta).or(f.tta).unwrap_or(false),
        stride: args.stride.or(f.stride).unwrap_or(FRAME_STRIDE),
        prior: PriorView::from(&opts),
        adapt: AdaptConfig {
            lr: args.tta_lr.or(f.tta_lr).unwrap_or(DEFAULT_TTA_LR),
            optimizer,
            mode,
            steps_per_batch: args.tta_steps.or(f.tta_steps).unwrap_or(1),
        },
        tta_batch: args.tta_batch.or(f.tta_batch).unwrap_or(DEFAULT_TTA_BATCH),
        protocol,
        bins: args.bins.or(f.bins).unwrap_or(5),
    };
    log_resolved("eval", &resolved);
    resolved.adapt.validate()?;

    let params = ModelParams::load(&resolved.model)?;
    let rules = load_rules(resolved.rules_file.as_deref())?;
    let samples = load_samples(&resolved.manifest)?;
    let cfg = EvalConfig {
        window: params.arch.input,
        stride: resolved.stride,
        prior: opts,
        adapt: resolved.adapt,
        tta_batch: resolved.tta_batch,
        protocol: resolved.protocol,
    };
    let reports = if resolved.ablation {
        run_ablation(&params, &samples, &rules, &cfg)?
    } else {
        let cell = Cell {
            tta: resolved.tta,
            prior: opts.repair_enabled || opts.rules_enabled,
        };
        let mut report = evaluate(&params, &samples, &rules, cell, &cfg)?;
        if cell.prior {
            report.method = cell_label(cell.tta, &opts);
        }
        vec![report]
    };
    write_reports(&resolved.out, &reports, resolved.bins)?;
    Ok(summary_table(&reports))
}

/// Name for a single-cell run whose prior may be only partly enabled.
fn cell_label(tta: bool, opts: &DecodeOptions) -> String {
    let prior = match (opts.repair_enabled, opts.rules_enabled) {
        (true, true) => "prior",
        (true, false) => "repair",
        (false, true) => "rules",
        (false, false) => "",
    };
    match (tta, prior.is_empty()) {
        (false, true) => "baseline".into(),
        (false, false) => prior.into(),
        (true, true) => "tta".into(),
        (true, false) => format!("tta+{prior}"),
    }
}

fn file_stem(method: &str) -> String {
    method.replace('+', "_")
}

fn write_reports(dir: &Path, reports: &[EvalReport], bins: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("summary.csv"), &summary_csv(reports)?)?;
    write_file(&dir.join("summary.txt"), &summary_table(reports))?;
    for r in reports {
        let stem = file_stem(&r.method);
        write_file(&dir.join(format!("records_{stem}.csv")), &r.records_csv()?)?;
        if r.records.len() >= bins {
            let er = entropy_error_report(&r.records, bins)?;
            write_file(&dir.join(format!("entropy_{stem}.csv")), &er.to_csv()?)?;
            write_file(&dir.join(format!("entropy_{stem}.txt")), &er.to_table())?;
        }
        if let Some(log) = &r.trajectory {
            write_file(&dir.join(format!("trajectory_{stem}.csv")), &trajectory_csv(log)?)?;
        }
    }
    Ok(())
}

// ---- entry points -----------------------------------------------------------

/// Caps the global rayon pool from `BILLETDEC_THREADS` when set.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::contract(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    // a second initialisation (e.g. in tests) keeps the existing pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Runs a parsed command and returns what it prints on stdout.
pub fn run(cli: Cli) -> Result<String> {
    configure_threads()?;
    let config = cli.config.as_deref();
    let file = load_config(config)?;
    match cli.command {
        Command::Gen(a) => cmd_gen(a, cli.seed, file, config),
        Command::Train(a) => cmd_train(a, cli.seed, file, config),
        Command::Decode(a) => cmd_decode(a, file, config),
        Command::Eval(a) => cmd_eval(a, file, config),
    }
}

pub fn exit_code(err: &Error) -> i32 {
    if err.is_user_error() {
        2
    } else {
        1
    }
}

/// Parses `args`, runs, prints, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(out) => {
            let mut stdout = std::io::stdout().lock();
            if stdout.write_all(out.as_bytes()).and_then(|_| stdout.flush()).is_err() {
                return 1;
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
