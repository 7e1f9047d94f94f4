//! Configuration-driven experiment runner behind the `crpn` command line.

pub mod ablate;
pub mod config;
pub mod pipeline;
pub mod record;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use thiserror::Error;

use crate::boxes::BoxError;
use crate::cascade::CascadeError;
use crate::eval::EvalError;
use crate::objectness::TrainError;
use crate::postprocess::{NmsPreset, PostprocessError};
use crate::sampling::SamplingError;
use crate::simgen::{generate_dataset, Dataset, SimError};

pub use ablate::{expand_grid, GridCell};
pub use config::ExperimentConfig;
pub use pipeline::{run_experiment, Pipeline, SceneResult};
pub use record::{render_csv, render_text, RunRecord};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("grid error: {0}")]
    Grid(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("run record line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("refusing to merge: {0}")]
    VersionMismatch(String),
    #[error("{}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("thread pool: {0}")]
    Threads(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Cascade(#[from] CascadeError),
    #[error(transparent)]
    Postprocess(#[from] PostprocessError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Box(#[from] BoxError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub preset: Option<NmsPreset>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = self.preset {
            cfg.eval.nms_preset = p;
        }
    }
}

fn read_text(path: &Path) -> Result<String, HarnessError> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    fs::write(path, text).map_err(io_err(path))
}

pub fn load_config(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig, HarnessError> {
    let text = read_text(path)?;
    let mut cfg = ExperimentConfig::from_toml(&text).map_err(|e| match e {
        HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
        other => other,
    })?;
    overrides.apply(&mut cfg);
    Ok(cfg)
}

pub fn read_dataset(path: &Path) -> Result<Dataset, HarnessError> {
    let file = File::open(path).map_err(io_err(path))?;
    Dataset::read_jsonl(BufReader::new(file)).map_err(|e| HarnessError::Dataset(format!("{}: {e}", path.display())))
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<(), HarnessError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    dataset.write_jsonl(&mut out)?;
    out.flush().map_err(io_err(path))
}

/// Runs `f` on a dedicated pool of `threads` workers (0 = rayon default).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T, HarnessError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| HarnessError::Threads(e.to_string()))?;
    Ok(pool.install(f))
}

/// Generates the configured dataset and writes it as JSON lines.
pub fn cmd_gen(config: &Path, out: &Path, overrides: &Overrides) -> Result<Dataset, HarnessError> {
    let cfg = load_config(config, overrides)?;
    let dataset = generate_dataset(&cfg.dataset, cfg.seed)?;
    write_dataset(&dataset, out)?;
    info!(
        "wrote {} scenes with {} objects to {}",
        dataset.scenes.len(),
        dataset.num_objects(),
        out.display()
    );
    Ok(dataset)
}

fn dataset_for(cfg: &ExperimentConfig, dataset: Option<&Dataset>) -> Result<Dataset, HarnessError> {
    match dataset {
        Some(d) => Ok(d.clone()),
        None => Ok(generate_dataset(&cfg.dataset, cfg.seed)?),
    }
}

fn run_record(label: &str, cfg: &ExperimentConfig, dataset: Option<&Dataset>) -> Result<RunRecord, HarnessError> {
    let started = Instant::now();
    let data = dataset_for(cfg, dataset)?;
    let report = run_experiment(cfg, &data)?;
    let ms = started.elapsed().as_millis() as u64;
    info!("{label}: AR {:.4} in {ms} ms", report.average_recall);
    Ok(RunRecord::new(label, &cfg.hash(), ms, report))
}

/// Evaluates one config. Without a dataset file, the config's dataset is
/// generated from its seed.
pub fn cmd_run(
    config: &Path,
    dataset: Option<&Path>,
    out: &Path,
    overrides: &Overrides,
) -> Result<RunRecord, HarnessError> {
    let cfg = load_config(config, overrides)?;
    let data = dataset.map(read_dataset).transpose()?;
    let label = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".to_string());
    let rec = run_record(&label, &cfg, data.as_ref())?;
    write_text(out, &rec.to_text())?;
    Ok(rec)
}

/// Runs every grid cell and writes `cell_NN.toml`, `cell_NN.run`,
/// `table.csv` and `table.txt` into `out_dir`.
pub fn cmd_ablate(
    grid: &Path,
    dataset: Option<&Path>,
    out_dir: &Path,
    overrides: &Overrides,
) -> Result<Vec<RunRecord>, HarnessError> {
    let text = read_text(grid)?;
    let mut cells = expand_grid(&text).map_err(|e| HarnessError::Grid(format!("{}: {e}", grid.display())))?;
    for c in &mut cells {
        overrides.apply(&mut c.config);
        c.config.validate()?;
    }
    let data = dataset.map(read_dataset).transpose()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let records = cells
        .par_iter()
        .map(|c| run_record(&c.label, &c.config, data.as_ref()))
        .collect::<Result<Vec<_>, _>>()?;
    for (i, (c, r)) in cells.iter().zip(&records).enumerate() {
        write_text(&out_dir.join(format!("cell_{i:02}.toml")), &c.config.to_toml()?)?;
        write_text(&out_dir.join(format!("cell_{i:02}.run")), &r.to_text())?;
    }
    write_text(&out_dir.join("table.csv"), &render_csv(&records))?;
    write_text(&out_dir.join("table.txt"), &render_text(&records))?;
    Ok(records)
}

/// Combines run records into a table. Writes CSV to `csv_out` when given and
/// returns the aligned text rendering.
pub fn cmd_report(records: &[PathBuf], csv_out: Option<&Path>) -> Result<String, HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::Record {
            line: 0,
            message: "no run records given".into(),
        });
    }
    let parsed = records
        .iter()
        .map(|p| RunRecord::parse(&read_text(p)?).map_err(|e| annotate(p, e)))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(out) = csv_out {
        write_text(out, &render_csv(&parsed))?;
    }
    Ok(render_text(&parsed))
}

fn annotate(path: &Path, e: HarnessError) -> HarnessError {
    match e {
        HarnessError::Record { line, message } => HarnessError::Record {
            line,
            message: format!("{}: {message}", path.display()),
        },
        HarnessError::VersionMismatch(m) => HarnessError::VersionMismatch(format!("{}: {m}", path.display())),
        other => other,
    }
}
