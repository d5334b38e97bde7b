//! Subcommand implementations. Each writes the run header into the output
//! directory before doing any work and reports to `out`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use lfam_core::costmodel::{cost_report, network_cost_report, reference_levels, CostReport};
use lfam_core::data::{compute_class_weights, crop_tiles, gen_synthetic, kfold_split, load_dataset, save_dataset, LabeledImage};
use lfam_core::gradsuite::run_grad_suite;
use lfam_core::lfam::set_workers;
use lfam_core::train::{evaluate, train_loop, IouSummary, BEST_CHECKPOINT};
use lfam_core::unet::{build_unet, load_checkpoint};

use crate::config::{emit, CostGeometry, RunConfig};
use crate::error::{Category, CliError};

pub const VERSION: &str = env!("LFAM_VERSION");
pub const CONFIG_ECHO: &str = "config.txt";
pub const RUN_INFO: &str = "run.json";
pub const TEST_REPORT: &str = "test.json";
pub const EVAL_REPORT: &str = "eval.json";
pub const GRADCHECK_REPORT: &str = "gradcheck.json";
pub const COST_TABLE: &str = "cost.txt";
pub const COST_JSON: &str = "cost.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Eval,
    Gradcheck,
    Cost,
    GenData,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Gradcheck => "gradcheck",
            Command::Cost => "cost",
            Command::GenData => "gen-data",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Format {
    #[default]
    Table,
    Json,
}

type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::file(path, e)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(io_err(path))
}

fn say(out: &mut dyn Write, text: impl std::fmt::Display) -> CliResult<()> {
    writeln!(out, "{text}").map_err(|e| CliError::new(Category::Internal, format!("writing output: {e}")))
}

/// Creates the output directory and records the effective config, seed and
/// version in it.
pub fn write_run_header(cfg: &RunConfig, command: Command) -> CliResult<()> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_file(&dir.join(CONFIG_ECHO), emit(cfg))?;
    let info = serde_json::json!({
        "command": command.name(),
        "seed": cfg.seed,
        "version": VERSION,
    });
    write_file(&dir.join(RUN_INFO), format!("{info:#}\n"))
}

pub struct Splits {
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

impl Splits {
    /// Samples scored after training: the test part, or the training part
    /// when nothing is held out.
    pub fn scored(&self) -> &[LabeledImage] {
        if self.test.is_empty() {
            &self.train
        } else {
            &self.test
        }
    }
}

fn load_images(cfg: &RunConfig) -> CliResult<Vec<LabeledImage>> {
    let k = cfg.model.num_classes;
    Ok(match &cfg.data.dir {
        Some(dir) => load_dataset(dir, Some(k))?,
        None => gen_synthetic(cfg.data.images, cfg.data.size, k, cfg.data.rare_fraction, cfg.seed)?,
    })
}

fn tiles(cfg: &RunConfig, images: Vec<LabeledImage>) -> CliResult<Vec<LabeledImage>> {
    if cfg.data.tile == 0 {
        return Ok(images);
    }
    let mut out = Vec::new();
    for img in &images {
        out.extend(crop_tiles(img, cfg.data.tile)?);
    }
    Ok(out)
}

/// Splits at image level, then tiles each part, so tiles of one image never
/// straddle two parts.
pub fn prepare_splits(cfg: &RunConfig) -> CliResult<Splits> {
    let images = load_images(cfg)?;
    let n = images.len();
    let take = |idx: &[usize]| -> Vec<LabeledImage> { idx.iter().map(|&i| images[i].clone()).collect() };
    let (train, val, test) = if cfg.data.folds > 0 {
        let plan = kfold_split(n, cfg.data.folds, cfg.data.val_fraction, cfg.seed)?;
        let fold = &plan.folds[cfg.data.fold];
        (take(&fold.train), take(&fold.val), take(&fold.test))
    } else {
        let held = cfg.data.held_out;
        if held >= n {
            return Err(CliError::new(Category::Config, format!("data.held_out = {held} leaves no training images out of {n}")));
        }
        let all: Vec<usize> = (0..n).collect();
        let held_part = take(&all[n - held..]);
        (take(&all[..n - held]), held_part.clone(), held_part)
    };
    Ok(Splits { train: tiles(cfg, train)?, val: tiles(cfg, val)?, test: tiles(cfg, test)? })
}

fn iou_json(s: &IouSummary) -> serde_json::Value {
    serde_json::json!({ "per_class": s.per_class, "mean": s.mean })
}

fn iou_lines(s: &IouSummary) -> String {
    let mut lines: Vec<String> = s
        .per_class
        .iter()
        .enumerate()
        .map(|(c, v)| match v {
            Some(v) => format!("class {c}: {v:.4}"),
            None => format!("class {c}: undefined"),
        })
        .collect();
    lines.push(format!("mean IoU: {:.4}", s.mean));
    lines.join("\n")
}

fn train(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<()> {
    let splits = prepare_splits(cfg)?;
    let k = cfg.model.num_classes;
    let train_cfg = cfg.train_config(|| {
        compute_class_weights(splits.train.iter().map(|s| &s.mask), k).unwrap_or_else(|_| vec![1.0; k])
    });
    let mut model = build_unet::<f32>(&cfg.unet_config(), cfg.seed)?;
    say(out, format!(
        "training {} parameters on {} samples ({} val, {} test) for {} epochs",
        model.num_params(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        train_cfg.epochs
    ))?;
    let log = train_loop(&mut model, &splits.train, &splits.val, &train_cfg, Some(&cfg.output_dir))?;
    let test = evaluate(&model, splits.scored(), train_cfg.batch_size)?;
    write_file(&cfg.output_dir.join(TEST_REPORT), format!("{:#}\n", iou_json(&test)))?;
    let s = &log.summary;
    say(out, format!("train loss {:.6} -> {:.6}", s.initial_train_loss, s.final_train_loss))?;
    if let (Some(iou), Some(epoch)) = (s.best_val_mean_iou, s.best_epoch) {
        say(out, format!("best val mean IoU {iou:.4} at epoch {epoch}"))?;
    }
    say(out, format!("test set, final model:\n{}", iou_lines(&test)))
}

fn eval(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<()> {
    let path: PathBuf = cfg.eval_checkpoint.clone().unwrap_or_else(|| cfg.output_dir.join(BEST_CHECKPOINT));
    if !path.is_file() {
        return Err(CliError::new(Category::File, format!("checkpoint {} not found", path.display())));
    }
    let model = load_checkpoint::<f32>(&cfg.unet_config(), &path)?;
    let splits = prepare_splits(cfg)?;
    let scored = splits.scored();
    let summary = evaluate(&model, scored, cfg.train.batch_size)?;
    let report = serde_json::json!({
        "checkpoint": path.display().to_string(),
        "samples": scored.len(),
        "iou": iou_json(&summary),
    });
    write_file(&cfg.output_dir.join(EVAL_REPORT), format!("{report:#}\n"))?;
    say(out, format!("{} on {} samples:\n{}", path.display(), scored.len(), iou_lines(&summary)))
}

fn gradcheck(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<()> {
    let cases = run_grad_suite(cfg.seed)?;
    let mut failed = Vec::new();
    for c in &cases {
        let status = if c.passed() { "ok" } else { "FAIL" };
        say(out, format!("{:<40} max rel err {:.3e} (tol {:.0e}) {status}", c.name, c.max_error, c.tolerance))?;
        if !c.passed() {
            failed.push(c.name.clone());
        }
    }
    let json: Vec<_> = cases
        .iter()
        .map(|c| serde_json::json!({ "name": c.name, "max_error": c.max_error, "tolerance": c.tolerance, "passed": c.passed() }))
        .collect();
    write_file(&cfg.output_dir.join(GRADCHECK_REPORT), format!("{:#}\n", serde_json::Value::Array(json)))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::new(Category::CheckFailed, format!("gradient check failed for {}", failed.join(", "))))
    }
}

pub fn cost_for(cfg: &RunConfig) -> CliResult<CostReport> {
    Ok(match cfg.cost_geometry {
        CostGeometry::Reference => cost_report(&reference_levels(cfg.lfam.local_range), None),
        CostGeometry::Model => network_cost_report(&cfg.unet_config(), cfg.cost_size, cfg.cost_size)?,
    })
}

fn cost(cfg: &RunConfig, format: Format, out: &mut dyn Write) -> CliResult<()> {
    let report = cost_for(cfg)?;
    let (text, file) = match format {
        Format::Table => (report.to_table(), COST_TABLE),
        Format::Json => (report.to_json(), COST_JSON),
    };
    write_file(&cfg.output_dir.join(file), &text)?;
    say(out, text.trim_end())
}

fn gen_data(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<()> {
    let dir = cfg.data.dir.clone().unwrap_or_else(|| cfg.output_dir.join("data"));
    let samples = gen_synthetic(cfg.data.images, cfg.data.size, cfg.model.num_classes, cfg.data.rare_fraction, cfg.seed)?;
    save_dataset(&dir, &samples)?;
    say(out, format!("wrote {} images of {}x{} to {}", samples.len(), cfg.data.size, cfg.data.size, dir.display()))
}

/// Runs one subcommand against a validated config.
pub fn dispatch(command: Command, cfg: &RunConfig, format: Format, out: &mut dyn Write) -> CliResult<()> {
    set_workers(cfg.workers);
    write_run_header(cfg, command)?;
    match command {
        Command::Train => train(cfg, out),
        Command::Eval => eval(cfg, out),
        Command::Gradcheck => gradcheck(cfg, out),
        Command::Cost => cost(cfg, format, out),
        Command::GenData => gen_data(cfg, out),
    }
}
