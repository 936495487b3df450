//! Subcommand implementations. Each returns the text it would print and
//! writes its artifacts only after all computation has succeeded.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use patchmoe::evaluation::{diagnostics, predict_all, score_predictions};
use patchmoe::gradcheck::{gradient_suite, SuiteRow, FD_STEP, FD_TOL};
use patchmoe::training::{gen_split_data, prepare, train_from_config};
use patchmoe::{EvalReport, ImagePrediction, TrainConfig};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::parse_config;
use crate::dataset::Dataset;
use crate::report::{loss_trace_csv, metrics_csv, square_csv, utilization_csv};
use crate::{pgm, CliError, CliResult};

pub const CHECKPOINT_FILE: &str = "checkpoint.moec";
pub const DIGEST_FILE: &str = "checkpoint.sha256";
pub const TRACE_FILE: &str = "loss_trace.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const UTILIZATION_FILE: &str = "utilization.csv";

/// Instances run by the `gradcheck` command.
pub const GRADCHECK_INSTANCES: usize = 20;
pub const GRADCHECK_SEED: u64 = 0;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reads and validates a config file, then applies the seed override.
pub fn load_config(path: &Path, seed: Option<u64>) -> CliResult<TrainConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg = parse_config(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Parses a `MOEC_SEED` value.
pub fn parse_seed_env(value: Option<&str>) -> CliResult<Option<u64>> {
    value
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| CliError::usage(format!("MOEC_SEED must be an unsigned integer, got {v:?}")))
        })
        .transpose()
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::usage(format!("cannot create {}: {e}", dir.display())))
}

fn write(path: PathBuf, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(&path, bytes).map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))
}

pub fn train(config: &Path, out: &Path, seed: Option<u64>) -> CliResult<String> {
    let cfg = load_config(config, seed)?;
    let run = train_from_config(&cfg)?;
    let ck = Checkpoint {
        config: cfg,
        model: run.outcome.model,
        adam: Some(run.outcome.adam),
        rng: Some(run.outcome.rng_state),
    };
    let bytes = ck.to_container().to_bytes();
    let digest = sha256_hex(&bytes);
    create_dir(out)?;
    write(out.join(CHECKPOINT_FILE), &bytes)?;
    write(out.join(DIGEST_FILE), format!("{digest}  {CHECKPOINT_FILE}\n"))?;
    write(out.join(TRACE_FILE), loss_trace_csv(&run.outcome.trace))?;
    let last = run.outcome.trace.last().map_or(f64::NAN, |r| r.loss.total);
    Ok(format!(
        "trained {} steps, final loss {last:.6}\nsha256 {digest}\n",
        run.outcome.trace.len()
    ))
}

pub fn gen_data(config: &Path, out: &Path, split: &str, seed: Option<u64>) -> CliResult<String> {
    let cfg = load_config(config, seed)?;
    let (train, eval) = gen_split_data(&cfg)?;
    let samples = match split {
        "train" => train,
        "eval" => eval,
        other => return Err(CliError::usage(format!("unknown split {other:?}; use train or eval"))),
    };
    let ds = Dataset {
        split: split.to_string(),
        image_size: cfg.data.image_size,
        samples,
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let bytes = ds.to_container().to_bytes();
    write(out.to_path_buf(), &bytes)?;
    Ok(format!("wrote {} {split} samples to {}\n", ds.samples.len(), out.display()))
}

fn load_pair(ckpt: &Path, data: &Path) -> CliResult<(Checkpoint, Dataset)> {
    let ck = Checkpoint::load(ckpt).map_err(|e| CliError::usage(format!("{}: {e}", ckpt.display())))?;
    let ds = Dataset::load(data).map_err(|e| CliError::usage(format!("{}: {e}", data.display())))?;
    if ds.image_size != ck.config.arch.image_size {
        return Err(CliError::usage(format!(
            "dimension mismatch: dataset images are {0}x{0}, checkpoint expects {1}x{1}",
            ds.image_size, ck.config.arch.image_size
        )));
    }
    if ds.samples.is_empty() {
        return Err(CliError::usage("dataset is empty"));
    }
    Ok((ck, ds))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    pub per_image_pixel_metrics: bool,
    /// Writes one anomaly-channel PGM per sample under `maps/`.
    pub export_maps: bool,
    /// Test hook: replaces model scores by the ground truth.
    pub oracle_scores: bool,
}

pub fn eval(ckpt: &Path, data: &Path, out: &Path, opts: EvalOptions) -> CliResult<(EvalReport, String)> {
    let (ck, ds) = load_pair(ckpt, data)?;
    let prepared = prepare(&ck.model, &ds.samples)?;
    let preds = if opts.oracle_scores {
        prepared
            .iter()
            .map(|s| ImagePrediction {
                pixel_scores: s.mask.iter().map(|&m| m as u8 as f64).collect(),
                score: s.label as u8 as f64,
            })
            .collect()
    } else {
        predict_all(&ck.model, &prepared)?
    };
    let report = score_predictions(&preds, &prepared, opts.per_image_pixel_metrics)?;
    let csv = metrics_csv(&report);
    create_dir(out)?;
    write(out.join(REPORT_FILE), &csv)?;
    if opts.export_maps {
        write_maps(&out.join("maps"), ds.image_size, &preds)?;
    }
    Ok((report, csv))
}

fn write_maps(dir: &Path, side: usize, preds: &[ImagePrediction]) -> CliResult<()> {
    create_dir(dir)?;
    for (i, p) in preds.iter().enumerate() {
        write(dir.join(map_file_name(i)), pgm::encode(side, side, &p.pixel_scores))?;
    }
    Ok(())
}

pub fn map_file_name(i: usize) -> String {
    format!("sample{i:04}.pgm")
}

pub fn similarity_file_name(level: usize) -> String {
    format!("similarity_level{level}.csv")
}

pub fn inspect(ckpt: &Path, data: &Path, out: &Path) -> CliResult<String> {
    let (ck, ds) = load_pair(ckpt, data)?;
    let prepared = prepare(&ck.model, &ds.samples)?;
    let diag = diagnostics(&ck.model, &prepared)?;
    let preds = predict_all(&ck.model, &prepared)?;
    let k = ck.config.arch.experts;

    let mut util_rows = Vec::new();
    for (l, u) in diag.utilization.iter().enumerate() {
        util_rows.push((format!("{l},all"), u.shares()));
        for (c, shares) in u.class_shares() {
            util_rows.push((format!("{l},{c}"), shares));
        }
    }
    create_dir(out)?;
    let mut summary = String::new();
    for (l, s) in diag.similarity.iter().enumerate() {
        write(out.join(similarity_file_name(l)), square_csv(&s.matrix(), k))?;
        let _ = writeln!(summary, "level {l}: mean off-diagonal similarity {:.6}", s.mean_off_diagonal());
    }
    write(out.join(UTILIZATION_FILE), utilization_csv(&util_rows, k))?;
    write_maps(&out.join("maps"), ds.image_size, &preds)?;
    let _ = writeln!(summary, "expert-load cv2 {:.6}", diag.load_cv2);
    Ok(summary)
}

/// Runs the suite; `Err` with exit code 1 names every failing group and its
/// worst coordinate.
pub fn gradcheck(tol: f64, grad_scale: f64) -> CliResult<(Vec<SuiteRow>, String)> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(CliError::usage(format!("--tol must be positive, got {tol}")));
    }
    let rows = gradient_suite(GRADCHECK_INSTANCES, GRADCHECK_SEED, FD_STEP, tol, grad_scale)?;
    let mut text = String::from("group,instances,coords,max_rel_err,status\n");
    for r in &rows {
        let _ = writeln!(
            text,
            "{},{},{},{:.3e},{}",
            r.name,
            r.instances,
            r.coords,
            r.max_rel_err,
            if r.pass { "PASS" } else { "FAIL" }
        );
    }
    let failures: Vec<&SuiteRow> = rows.iter().filter(|r| !r.pass).collect();
    if failures.is_empty() {
        return Ok((rows, text));
    }
    for r in failures {
        let _ = writeln!(text, "FAILED {} worst coordinate {}", r.name, r.worst);
    }
    Err(CliError::check(text))
}

/// Default tolerance for `gradcheck --tol`.
pub const DEFAULT_TOL: f64 = FD_TOL;
