//! Command-line front end: dataset generation, training, prediction, combo
//! prediction, and evaluation.
//!
//! Exit codes are stable across commands: 0 success, 2 configuration or
//! usage error, 3 I/O error, 4 numeric failure, 5 data error. Every command
//! writes a resolved-config echo next to its outputs and never mutates its
//! inputs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{
    self, build_pairs, control_profile, drug_level_split, filter_dose, holdout_split,
    load_dataset, save_dataset, CellRow, ExpressionDataset, PairedSample, SplitResult,
};
use crate::error::{Error, Result};
use crate::eval::report::{save_report_csv, save_report_json};
use crate::eval::{evaluate, EvalOptions, MetricsReport};
use crate::model::checkpoint::{load_checkpoint, save_checkpoint};
use crate::model::train::{fit, EpochRecord, FitResult};
use crate::model::{Model, ModelConfig};
use crate::synth::{self, save_ground_truth, SynthConfig};
use crate::tensor::Tensor;
use crate::util::{atomic_write, derive_seed, fnv1a64_hex};

/// Prints a line to stdout, ignoring write failures so that a closed pipe
/// (e.g. `crosspert evaluate ... | head -1`) terminates output quietly
/// instead of panicking mid-command.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Debug, Parser)]
#[command(
    name = "crosspert",
    version,
    about = "Train and evaluate a disentangled autoencoder that transfers perturbation responses across cellular contexts"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic benchmark dataset with exact oracle targets.
    GenSynth(GenSynthArgs),
    /// Train a model from a JSON run config; writes checkpoints + manifest.
    Train(TrainArgs),
    /// Transfer a perturbation onto a target cell line's basal state.
    Predict(PredictArgs),
    /// Predict a dual perturbation from two singletons in one cell line.
    PredictCombo(PredictComboArgs),
    /// Score predictions against measured profiles; writes JSON + CSV.
    Evaluate(EvaluateArgs),
}

/// Entry point used by the binary: parses arguments, runs the command, and
/// converts errors into the stable exit-code scheme.
pub fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        use std::io::Write as _;
        let _ = writeln!(std::io::stderr(), "error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth(args) => cmd_gen_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Predict(args) => cmd_predict(args),
        Command::PredictCombo(args) => cmd_predict_combo(args),
        Command::Evaluate(args) => cmd_evaluate(args),
    }
}

// ---------------------------------------------------------------------------
// gen-synth
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum NonlinearityArg {
    Identity,
    Softplus,
}

impl From<NonlinearityArg> for synth::Nonlinearity {
    fn from(v: NonlinearityArg) -> Self {
        match v {
            NonlinearityArg::Identity => synth::Nonlinearity::Identity,
            NonlinearityArg::Softplus => synth::Nonlinearity::Softplus,
        }
    }
}

#[derive(Debug, Args)]
struct GenSynthArgs {
    /// Genes per profile.
    #[arg(long, default_value_t = 200)]
    genes: usize,
    /// True latent dimension of the generating process.
    #[arg(long, default_value_t = 16)]
    latent: usize,
    /// Number of distinct perturbations.
    #[arg(long, default_value_t = 24)]
    perts: usize,
    /// Number of cell lines.
    #[arg(long, default_value_t = 2)]
    cell_lines: usize,
    /// Cells per (cell line, condition), controls included.
    #[arg(long, default_value_t = 40)]
    cells: usize,
    /// Gaussian measurement noise standard deviation.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Gene-space nonlinearity.
    #[arg(long, value_enum, default_value_t = NonlinearityArg::Softplus)]
    nonlinearity: NonlinearityArg,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(short, long)]
    out: PathBuf,
}

fn cmd_gen_synth(args: GenSynthArgs) -> Result<()> {
    let config = SynthConfig {
        genes: args.genes,
        latent_dim: args.latent,
        perturbations: args.perts,
        cell_lines: args.cell_lines,
        cells_per_condition: args.cells,
        noise_sigma: args.noise,
        nonlinearity: args.nonlinearity.into(),
        seed: args.seed,
    };
    let (ds, gt) = synth::generate(&config)?;
    let dataset_path = args.out.join("dataset.tsv");
    save_dataset(&ds, &dataset_path)?;
    save_ground_truth(&gt, &args.out.join("ground_truth.json"))?;
    write_json(&args.out.join("resolved_config.json"), &config)?;
    say!(
        "wrote {} rows x {} genes to {}",
        ds.rows.len(),
        ds.gene_dim(),
        dataset_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// Run configuration (train)
// ---------------------------------------------------------------------------

/// The `model` section of a run config: every field optional, resolved
/// against the dataset and the training seed.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub gene_dim: Option<usize>,
    pub encoder_hidden: Option<Vec<usize>>,
    pub latent_dim: Option<usize>,
    pub dropout_rate: Option<f64>,
    pub loss_weights: Option<crate::model::LossWeights>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
}

impl ModelSection {
    fn resolve(&self, gene_dim_from_data: usize, seed: u64) -> Result<ModelConfig> {
        if let Some(g) = self.gene_dim {
            if g != gene_dim_from_data {
                return Err(Error::Config(format!(
                    "config says gene_dim={g} but the dataset has {gene_dim_from_data} genes"
                )));
            }
        }
        let mut c = ModelConfig::with_defaults(gene_dim_from_data, seed);
        if let Some(v) = &self.encoder_hidden {
            c.encoder_hidden = v.clone();
        }
        if let Some(v) = self.latent_dim {
            c.latent_dim = v;
        }
        if let Some(v) = self.dropout_rate {
            c.dropout_rate = v;
        }
        if let Some(v) = &self.loss_weights {
            c.loss_weights = v.clone();
        }
        if let Some(v) = self.lr {
            c.lr = v;
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Ratio,
    Holdout,
}

/// The `data.split` section. `mode` selects which of the other fields apply.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub mode: SplitMode,
    /// Ratio mode: train/val/test fractions (default 0.8/0.1/0.1).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratios: Option<[f64; 3]>,
    /// Holdout mode: perturbations reserved for the test split.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_perturbations: Option<Vec<String>>,
    /// Holdout mode: fraction of remaining perturbations used for
    /// validation (default 0.1).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_fraction: Option<f64>,
}

impl SplitSection {
    fn resolved(&self) -> Result<SplitSection> {
        let mut out = self.clone();
        match self.mode {
            SplitMode::Ratio => {
                if self.test_perturbations.is_some() || self.val_fraction.is_some() {
                    return Err(Error::Config(
                        "ratio split does not take test_perturbations/val_fraction".into(),
                    ));
                }
                out.ratios = Some(self.ratios.unwrap_or([0.8, 0.1, 0.1]));
            }
            SplitMode::Holdout => {
                if self.ratios.is_some() {
                    return Err(Error::Config("holdout split does not take ratios".into()));
                }
                if self.test_perturbations.as_ref().map_or(true, Vec::is_empty) {
                    return Err(Error::Config(
                        "holdout split needs a nonempty test_perturbations list".into(),
                    ));
                }
                out.val_fraction = Some(self.val_fraction.unwrap_or(0.1));
            }
        }
        Ok(out)
    }

    fn apply(&self, ds: &ExpressionDataset, seed: u64) -> Result<SplitResult> {
        let resolved = self.resolved()?;
        match resolved.mode {
            SplitMode::Ratio => {
                let [rt, rv, rte] = resolved.ratios.expect("resolved");
                drug_level_split(ds, (rt, rv, rte), seed)
            }
            SplitMode::Holdout => holdout_split(
                ds,
                resolved.test_perturbations.as_deref().expect("resolved"),
                resolved.val_fraction.expect("resolved"),
                seed,
            ),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub dataset_path: String,
    pub split: SplitSection,
    /// Keep only rows at this dose (controls always pass).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dose_filter: Option<f32>,
    /// Apply log1p to expression values after loading.
    #[serde(default)]
    pub log1p: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default)]
    pub seed: u64,
    pub checkpoint_dir: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub k: usize,
    pub threshold: f64,
    pub epsilon: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            k: 50,
            threshold: 1.0,
            epsilon: 1e-6,
        }
    }
}

/// A training run configuration as written by the user. Unknown keys are
/// rejected everywhere.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid run config: {e}")))
}

/// The fully resolved configuration echoed next to outputs: every default
/// explicit, ablations already folded into the loss weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResolvedRunConfig {
    pub model: ModelConfig,
    pub data: DataSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    /// Loss terms zeroed via --ablate, for bookkeeping.
    pub ablated: Vec<String>,
}

/// Seeds derived from the master training seed, recorded for audit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedTable {
    pub master: u64,
    pub split: u64,
    pub pairs_train: u64,
    pub pairs_val: u64,
    pub batching: u64,
}

/// The run manifest: everything needed to audit a training run. Rewritten
/// atomically after every epoch so it stays parseable mid-run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ResolvedRunConfig,
    /// FNV-1a digest of the raw dataset file bytes.
    pub dataset_digest: String,
    pub seeds: SeedTable,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    /// Message of the numeric failure that stopped training early, if any.
    pub diverged: Option<String>,
    pub completed: bool,
    pub total_seconds: f64,
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
struct TrainArgs {
    /// Path to the JSON run config.
    #[arg(long)]
    config: PathBuf,
    /// Override train.seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Override train.checkpoint_dir from the config.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Zero the named loss weights (comma separated: sim, orth, cross).
    #[arg(long, value_delimiter = ',')]
    ablate: Vec<String>,
}

fn apply_ablations(config: &mut ModelConfig, ablate: &[String]) -> Result<Vec<String>> {
    let mut applied = Vec::new();
    for name in ablate {
        let name = name.trim();
        if name.is_empty() {
            continue;
        }
        match name {
            "sim" => config.loss_weights.w_sim = 0.0,
            "orth" => config.loss_weights.w_orth = 0.0,
            "cross" => config.loss_weights.w_cross = 0.0,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation {other:?}; expected sim, orth, or cross"
                )))
            }
        }
        applied.push(name.to_string());
    }
    applied.sort();
    applied.dedup();
    Ok(applied)
}

fn pairs_of(ds: &ExpressionDataset, seed: u64) -> Result<Vec<PairedSample>> {
    Ok(build_pairs(ds, seed)?.pairs)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("could not serialize {}: {e}", path.display())))?;
    atomic_write(path, json.as_bytes())
}

/// Everything cmd_train does, callable in-process (the acceptance suite
/// drives training through this). Returns the fit result and the final
/// manifest.
pub fn run_training(
    run_config: &RunConfig,
    ablate: &[String],
    checkpoint_dir: &Path,
) -> Result<(FitResult, RunManifest)> {
    let started = Instant::now();
    let dataset_path = Path::new(&run_config.data.dataset_path);
    let raw_bytes = std::fs::read(dataset_path).map_err(|e| Error::io(dataset_path, e))?;
    let dataset_digest = fnv1a64_hex(&raw_bytes);
    let text = String::from_utf8(raw_bytes)
        .map_err(|_| Error::Data(format!("{} is not UTF-8", dataset_path.display())))?;
    let mut ds = data::parse_dataset(&text)?;

    if let Some(dose) = run_config.data.dose_filter {
        ds = filter_dose(&ds, dose);
    }
    if run_config.data.log1p {
        ds = data::apply_log1p(&ds)?;
    }

    let master = run_config.train.seed;
    let seeds = SeedTable {
        master,
        split: derive_seed(master, "split", &[]),
        pairs_train: derive_seed(master, "pairs.train", &[]),
        pairs_val: derive_seed(master, "pairs.val", &[]),
        batching: derive_seed(master, "batching", &[]),
    };

    let split = run_config.data.split.apply(&ds, seeds.split)?;
    let train_pairs = pairs_of(&split.train, seeds.pairs_train)?;
    let val_pairs = pairs_of(&split.val, seeds.pairs_val)?;
    if train_pairs.is_empty() {
        return Err(Error::Data(
            "the training split yields no usable pairs (need ≥ 2 perturbations per cell line)"
                .into(),
        ));
    }

    let mut model_config = run_config.model.resolve(ds.gene_dim(), master)?;
    let ablated = apply_ablations(&mut model_config, ablate)?;

    let resolved = ResolvedRunConfig {
        model: model_config.clone(),
        data: DataSection {
            dataset_path: run_config.data.dataset_path.clone(),
            split: run_config.data.split.resolved()?,
            dose_filter: run_config.data.dose_filter,
            log1p: run_config.data.log1p,
        },
        train: TrainSection {
            seed: master,
            checkpoint_dir: checkpoint_dir.display().to_string(),
        },
        eval: run_config.eval.clone(),
        ablated: ablated.clone(),
    };
    std::fs::create_dir_all(checkpoint_dir).map_err(|e| Error::io(checkpoint_dir, e))?;
    write_json(&checkpoint_dir.join("resolved_config.json"), &resolved)?;

    let manifest_path = checkpoint_dir.join("run_manifest.json");
    let mut manifest = RunManifest {
        config: resolved,
        dataset_digest,
        seeds,
        history: Vec::new(),
        best_epoch: None,
        diverged: None,
        completed: false,
        total_seconds: 0.0,
    };
    write_json(&manifest_path, &manifest)?;

    let epochs_total = model_config.epochs;
    let result = {
        let manifest = &mut manifest;
        let manifest_path = &manifest_path;
        fit(&model_config, &train_pairs, &val_pairs, |record| {
            manifest.history.push(record.clone());
            manifest.total_seconds = started.elapsed().as_secs_f64();
            write_json(manifest_path, manifest)?;
            match &record.val {
                Some(v) => say!(
                    "epoch {}/{} train {:.6} val {:.6}",
                    record.epoch + 1,
                    epochs_total,
                    record.train.total,
                    v.total
                ),
                None => say!(
                    "epoch {}/{} train {:.6}",
                    record.epoch + 1,
                    epochs_total,
                    record.train.total
                ),
            }
            Ok(())
        })?
    };

    // fit() reports a truncated final epoch in its history when it diverges;
    // mirror that into the manifest (the callback never saw it).
    manifest.history = result.history.clone();
    manifest.best_epoch = Some(result.best_epoch);
    manifest.diverged = result.diverged.clone();
    manifest.completed = result.diverged.is_none();
    manifest.total_seconds = started.elapsed().as_secs_f64();

    save_checkpoint(&result.last, &checkpoint_dir.join("last"))?;
    save_checkpoint(&result.best, &checkpoint_dir.join("best"))?;
    write_json(&manifest_path, &manifest)?;
    Ok((result, manifest))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut run_config = load_run_config(&args.config)?;
    if let Some(seed) = args.seed {
        run_config.train.seed = seed;
    }
    let checkpoint_dir = args
        .out
        .unwrap_or_else(|| PathBuf::from(&run_config.train.checkpoint_dir));
    let (result, _manifest) = run_training(&run_config, &args.ablate, &checkpoint_dir)?;
    if let Some(msg) = result.diverged {
        // Checkpoints and manifest are on disk; surface the failure.
        return Err(Error::Numeric(format!(
            "training stopped early on a non-finite loss: {msg}"
        )));
    }
    say!(
        "best epoch {} (val total {:.6}); checkpoints in {}",
        result.best_epoch + 1,
        result.history[result.best_epoch]
            .val
            .map_or(f64::NAN, |v| v.total),
        checkpoint_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
struct PredictArgs {
    /// Checkpoint directory (as written by train: .../best or .../last).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset TSV with the source-perturbed cells and target controls.
    #[arg(long)]
    dataset: PathBuf,
    /// Perturbation to transfer.
    #[arg(long)]
    source_pert: String,
    /// Cell line whose basal state receives the perturbation.
    #[arg(long)]
    target_cell_line: String,
    /// Use only source cells from this cell line (default: all lines).
    #[arg(long)]
    source_cell_line: Option<String>,
    /// Keep only rows at this dose (controls always pass).
    #[arg(long)]
    dose: Option<f32>,
    /// Apply log1p to expression values after loading.
    #[arg(long)]
    log1p: bool,
    /// Output predictions TSV.
    #[arg(short, long)]
    out: PathBuf,
}

fn load_prediction_inputs(
    checkpoint: &Path,
    dataset: &Path,
    dose: Option<f32>,
    log1p: bool,
) -> Result<(Model<f32>, ExpressionDataset)> {
    let model = load_checkpoint(checkpoint)?;
    let mut ds = load_dataset(dataset)?;
    if let Some(d) = dose {
        ds = filter_dose(&ds, d);
    }
    if log1p {
        ds = data::apply_log1p(&ds)?;
    }
    if model.config.gene_dim != ds.gene_dim() {
        return Err(Error::Data(format!(
            "checkpoint was trained on {} genes but the dataset has {}",
            model.config.gene_dim,
            ds.gene_dim()
        )));
    }
    Ok((model, ds))
}

fn rows_matrix(rows: &[&CellRow], gene_dim: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(rows.len() * gene_dim);
    for r in rows {
        data.extend_from_slice(&r.values);
    }
    Tensor::new(vec![rows.len(), gene_dim], data)
}

fn replicate_profile(profile: &[f32], n: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(n * profile.len());
    for _ in 0..n {
        data.extend_from_slice(profile);
    }
    Tensor::new(vec![n, profile.len()], data)
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let (model, ds) = load_prediction_inputs(&args.checkpoint, &args.dataset, args.dose, args.log1p)?;
    let g = ds.gene_dim();

    let source_rows: Vec<&CellRow> = ds
        .rows
        .iter()
        .filter(|r| {
            r.perturbation == args.source_pert
                && args
                    .source_cell_line
                    .as_ref()
                    .map_or(true, |line| r.cell_line == *line)
        })
        .collect();
    if source_rows.is_empty() {
        return Err(Error::Data(format!(
            "no cells carry perturbation {:?}{}",
            args.source_pert,
            args.source_cell_line
                .as_ref()
                .map_or(String::new(), |l| format!(" in cell line {l:?}"))
        )));
    }
    let ctrl = control_profile(&ds, &args.target_cell_line)?;

    let x_src = rows_matrix(&source_rows, g)?;
    let x_ctrl = replicate_profile(&ctrl, source_rows.len())?;
    let predicted = model.predict_transfer(&x_src, &x_ctrl)?;

    let out_rows: Vec<CellRow> = source_rows
        .iter()
        .enumerate()
        .map(|(i, src)| CellRow {
            cell_id: src.cell_id.clone(),
            cell_line: args.target_cell_line.clone(),
            perturbation: src.perturbation.clone(),
            dose: src.dose,
            values: predicted.row(i).to_vec(),
        })
        .collect();
    let out_ds = ExpressionDataset {
        gene_ids: ds.gene_ids.clone(),
        rows: out_rows,
    };
    save_dataset(&out_ds, &args.out)?;
    write_json(
        &config_echo_path(&args.out),
        &serde_json::json!({
            "command": "predict",
            "checkpoint": args.checkpoint.display().to_string(),
            "dataset": args.dataset.display().to_string(),
            "source_pert": args.source_pert,
            "target_cell_line": args.target_cell_line,
            "source_cell_line": args.source_cell_line,
            "dose": args.dose,
            "log1p": args.log1p,
        }),
    )?;
    say!(
        "predicted {} cells of {:?} onto {:?} -> {}",
        out_ds.rows.len(),
        args.source_pert,
        args.target_cell_line,
        args.out.display()
    );
    Ok(())
}

fn config_echo_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".config.json");
    PathBuf::from(name)
}

// ---------------------------------------------------------------------------
// predict-combo
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
struct PredictComboArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// First singleton perturbation.
    #[arg(long)]
    pert_a: String,
    /// Second singleton perturbation (distinct from the first).
    #[arg(long)]
    pert_b: String,
    /// Cell line providing both singleton cells and the basal state.
    #[arg(long)]
    cell_line: String,
    #[arg(long)]
    dose: Option<f32>,
    #[arg(long)]
    log1p: bool,
    /// Output TSV holding the single predicted mean profile.
    #[arg(short, long)]
    out: PathBuf,
}

fn cmd_predict_combo(args: PredictComboArgs) -> Result<()> {
    if args.pert_a == args.pert_b {
        return Err(Error::Config(
            "a dual perturbation needs two distinct singletons".into(),
        ));
    }
    let (model, ds) = load_prediction_inputs(&args.checkpoint, &args.dataset, args.dose, args.log1p)?;
    let g = ds.gene_dim();

    let cells_of = |pert: &str| -> Result<Vec<&CellRow>> {
        let rows: Vec<&CellRow> = ds
            .rows
            .iter()
            .filter(|r| r.perturbation == pert && r.cell_line == args.cell_line)
            .collect();
        if rows.is_empty() {
            return Err(Error::Data(format!(
                "no cells carry perturbation {pert:?} in cell line {:?}",
                args.cell_line
            )));
        }
        Ok(rows)
    };
    let rows_a = cells_of(&args.pert_a)?;
    let rows_b = cells_of(&args.pert_b)?;
    let ctrl = control_profile(&ds, &args.cell_line)?;

    let xa = rows_matrix(&rows_a, g)?;
    let xb = rows_matrix(&rows_b, g)?;
    let xc = replicate_profile(&ctrl, 1)?;
    let predicted = model.predict_combo_pooled(&xa, &xb, &xc)?;

    // Dual labels are written with their parts sorted.
    let (first, second) = if args.pert_a <= args.pert_b {
        (&args.pert_a, &args.pert_b)
    } else {
        (&args.pert_b, &args.pert_a)
    };
    let label = format!("{first}+{second}");
    let out_ds = ExpressionDataset {
        gene_ids: ds.gene_ids.clone(),
        rows: vec![CellRow {
            cell_id: format!("{}_{label}_pred", args.cell_line),
            cell_line: args.cell_line.clone(),
            perturbation: label.clone(),
            dose: 1.0,
            values: predicted.row(0).to_vec(),
        }],
    };
    save_dataset(&out_ds, &args.out)?;
    write_json(
        &config_echo_path(&args.out),
        &serde_json::json!({
            "command": "predict-combo",
            "checkpoint": args.checkpoint.display().to_string(),
            "dataset": args.dataset.display().to_string(),
            "pert_a": args.pert_a,
            "pert_b": args.pert_b,
            "cell_line": args.cell_line,
            "dose": args.dose,
            "log1p": args.log1p,
        }),
    )?;
    say!(
        "predicted {:?} in {:?} from {} + {} cells -> {}",
        label,
        args.cell_line,
        rows_a.len(),
        rows_b.len(),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Predictions TSV (dataset schema).
    #[arg(long)]
    predictions: PathBuf,
    /// Measured profiles TSV for the same conditions.
    #[arg(long)]
    actual: PathBuf,
    /// Optional dataset whose control rows supply the reference profiles
    /// (when --actual itself lacks controls).
    #[arg(long)]
    controls: Option<PathBuf>,
    /// Maximum differential genes per condition.
    #[arg(long, default_value_t = 50)]
    k: usize,
    /// Minimum |log2 fold change| to qualify.
    #[arg(long, default_value_t = 1.0)]
    threshold: f64,
    /// Pseudocount for the fold-change ratio.
    #[arg(long, default_value_t = 1e-6)]
    epsilon: f64,
    /// Values are log1p-transformed; linearize before means and fold changes.
    #[arg(long)]
    log1p_data: bool,
    /// Output directory for report.json and report.csv.
    #[arg(short, long)]
    out: PathBuf,
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let predictions = load_dataset(&args.predictions)?;
    let mut actual = load_dataset(&args.actual)?;
    if let Some(controls_path) = &args.controls {
        let controls = load_dataset(controls_path)?;
        if controls.gene_ids != actual.gene_ids {
            return Err(Error::Data(
                "controls dataset has a different gene header than the reference".into(),
            ));
        }
        actual
            .rows
            .extend(controls.rows.into_iter().filter(|r| r.is_control()));
    }
    let opts = EvalOptions {
        deg_k: args.k,
        deg_threshold: args.threshold,
        deg_epsilon: args.epsilon,
        linearize_log1p: args.log1p_data,
    };
    let report = evaluate(&predictions, &actual, &opts)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    save_report_json(&report, &args.out.join("report.json"))?;
    save_report_csv(&report, &args.out.join("report.csv"))?;
    write_json(
        &args.out.join("resolved_config.json"),
        &serde_json::json!({
            "command": "evaluate",
            "predictions": args.predictions.display().to_string(),
            "actual": args.actual.display().to_string(),
            "controls": args.controls.as_ref().map(|p| p.display().to_string()),
            "k": args.k,
            "threshold": args.threshold,
            "epsilon": args.epsilon,
            "log1p_data": args.log1p_data,
        }),
    )?;
    print_summary(&report);
    Ok(())
}

fn print_summary(report: &MetricsReport) {
    let show = |label: &str, key: &str| match report.aggregates.get(key) {
        Some(a) => {
            say!("mean R2 ({label}): {:.6}", a.mean);
            say!("median R2 ({label}): {:.6}", a.median);
        }
        None => {
            say!("mean R2 ({label}): n/a");
            say!("median R2 ({label}): n/a");
        }
    };
    show("all genes", "r2_all");
    show("DEGs", "r2_deg");
}

// Re-exported for integration tests that want to inspect manifests without
// re-declaring the schema.
pub use crate::model::train::EpochRecord as ManifestEpochRecord;
