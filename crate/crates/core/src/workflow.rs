//! End-to-end steps behind the command line: simulate, train, run, eval and
//! inspect. Every step reads and writes plain files so the steps can be run
//! separately, and every output is a deterministic function of its inputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use thiserror::Error;

use crate::config::RunConfig;
use crate::eval::{self, EvalError, RunReport};
use crate::features;
use crate::frames::EcefPos;
use crate::ingest::{self, EpochRecord, IngestError};
use crate::models::System;
use crate::net::{self, NetParams, ParamsError};
use crate::pipeline::{self, PreparedEpoch};
use crate::sim::{self, SimError, DATASET_FILE};
use crate::train::{self, TrainError, TrainReport};

pub const TRAIN_REPORT_FILE: &str = "train_report.csv";
pub const SOLUTIONS_FILE: &str = "solutions.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const CDF_FILE: &str = "cdf.csv";

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Input(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> WorkflowError + '_ {
    move |source| WorkflowError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), WorkflowError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// Dataset file inside a directory, or the path itself when it is a file.
pub fn dataset_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(DATASET_FILE)
    } else {
        data.to_path_buf()
    }
}

pub fn load_records(data: &Path) -> Result<Vec<EpochRecord>, WorkflowError> {
    let (manifest, records) = ingest::parse_dataset(&dataset_path(data))?;
    info!("loaded {} epochs of dataset {}", records.len(), manifest.name);
    Ok(records)
}

/// Generates the configured scenario into `out`.
pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<sim::Scenario, WorkflowError> {
    let scenario = sim::generate(&cfg.scenario)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    scenario.write(out)?;
    info!(
        "wrote {} epochs ({} NLOS satellite-epochs) to {}",
        scenario.records.len(),
        scenario.truth.nlos_count(),
        out.display()
    );
    Ok(scenario)
}

pub struct Trained {
    pub params: NetParams,
    pub report: TrainReport,
}

/// Trains on the records (trailing fraction held out) and saves the
/// best-validation parameters to `model` and the report CSV to `report`.
pub fn train_model(cfg: &RunConfig, records: &[EpochRecord], model: &Path, report: &Path) -> Result<Trained, WorkflowError> {
    if let Some(r) = records.iter().find(|r| r.truth.is_none()) {
        return Err(TrainError::NoGroundTruth(r.t).into());
    }
    let pcfg = cfg.pipeline();
    let prepared = pipeline::prepare(records, None, &pcfg);
    let (train_set, val_set) = train::split_train_validation(prepared, cfg.train.validation_fraction);
    info!("training on {} epochs, validating on {}", train_set.len(), val_set.len());
    let out = train::train(&train_set, &val_set, NetParams::init(cfg.seed), &pcfg, &cfg.train, &cfg.dhem)?;
    if let Some(dir) = model.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    net::save_params(&out.best, model)?;
    write_file(report, out.report.to_csv().as_bytes())?;
    Ok(Trained {
        params: out.best,
        report: out.report,
    })
}

/// Solutions of the least-squares and EKF baselines, plus the learned
/// pipeline when parameters are given.
pub fn run_methods(cfg: &RunConfig, records: &[EpochRecord], params: Option<&NetParams>) -> Vec<(String, Vec<pipeline::Solution>)> {
    let pcfg = cfg.pipeline();
    let prepared = pipeline::prepare(records, None, &pcfg);
    let mut runs = vec![
        ("ls".to_string(), pipeline::run_baseline_ls(&prepared)),
        ("ekf".to_string(), pipeline::run_baseline_ekf(&prepared, &pcfg)),
    ];
    if let Some(p) = params {
        runs.push(("lf".to_string(), pipeline::run_lf(&prepared, p, &pcfg)));
    }
    runs
}

pub fn write_solutions(runs: &[(String, Vec<pipeline::Solution>)], path: &Path) -> Result<(), WorkflowError> {
    let refs: Vec<(&str, &[pipeline::Solution])> = runs.iter().map(|(m, s)| (m.as_str(), s.as_slice())).collect();
    write_file(path, eval::solutions_csv(&refs).as_bytes())
}

pub fn read_solutions(path: &Path) -> Result<Vec<(String, Vec<pipeline::Solution>)>, WorkflowError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(eval::parse_solutions_csv(&text)?)
}

/// Reports of every method against the dataset's ground truth; writes the
/// summary and CDF files into `out_dir`.
pub fn evaluate(
    records: &[EpochRecord],
    runs: &[(String, Vec<pipeline::Solution>)],
    out_dir: &Path,
) -> Result<Vec<RunReport>, WorkflowError> {
    let truth: Vec<Option<EcefPos>> = records.iter().map(|r| r.truth).collect();
    let mut reports = Vec::new();
    for (method, sols) in runs {
        if sols.iter().zip(records).any(|(s, r)| s.t != r.t) {
            return Err(WorkflowError::Input(format!("{method} solutions do not match the dataset epochs")));
        }
        reports.push(eval::evaluate(method, sols, &truth)?.1);
    }
    write_file(&out_dir.join(REPORT_FILE), eval::reports_csv(&reports).as_bytes())?;
    write_file(&out_dir.join(CDF_FILE), eval::cdf_csv(&reports).as_bytes())?;
    Ok(reports)
}

/// Human-readable summary of a dataset; with `epoch`, the features of that epoch.
pub fn inspect_dataset(cfg: &RunConfig, records: &[EpochRecord], epoch: Option<usize>) -> Result<String, WorkflowError> {
    let mut s = String::new();
    let with_truth = records.iter().filter(|r| r.truth.is_some()).count();
    let _ = writeln!(s, "epochs: {}", records.len());
    if let (Some(a), Some(b)) = (records.first(), records.last()) {
        let _ = writeln!(s, "time span: {} to {} s", a.t, b.t);
    }
    let _ = writeln!(s, "epochs with ground truth: {with_truth}");
    for sys in System::ALL {
        let n: usize = records.iter().map(|r| r.observations.iter().filter(|o| o.system == sys).count()).sum();
        let _ = writeln!(s, "{sys} observations: {n}");
    }
    if let Some(i) = epoch {
        if i >= records.len() {
            return Err(WorkflowError::Input(format!("epoch {i} out of range (dataset has {})", records.len())));
        }
        let prepared: Vec<PreparedEpoch> = pipeline::prepare(&records[..=i], None, &cfg.pipeline());
        let e = &prepared[i];
        match (&e.fix, &e.features) {
            (Some(fix), Some(f)) => {
                let _ = writeln!(s, "epoch {i} at t = {}: {} satellites used, {} rejected", e.t, f.len(), fix.rejections.len());
                let _ = writeln!(s, "{}", features::FEATURE_CSV_HEADER);
                let mut buf = Vec::new();
                features::write_features_csv(&mut buf, e.t, f).map_err(|source| WorkflowError::Io {
                    path: PathBuf::from("<stdout>"),
                    source,
                })?;
                s.push_str(&String::from_utf8_lossy(&buf));
            }
            _ => {
                let _ = writeln!(s, "epoch {i} at t = {}: no solution ({})", e.t, e.error.as_deref().unwrap_or("unknown"));
            }
        }
    }
    Ok(s)
}

pub fn inspect_model(path: &Path) -> Result<String, WorkflowError> {
    let p = net::load_params(path)?;
    let mut s = String::new();
    let _ = writeln!(s, "model {}: {} parameters, checksum ok", path.display(), p.len());
    for (name, a) in net::PARAM_NAMES.iter().zip(p.arrays()) {
        let _ = writeln!(s, "  {name:<6} {}x{}", a.nrows(), a.ncols());
    }
    Ok(s)
}
