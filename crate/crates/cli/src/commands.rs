use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use caformer_core::backbone::{load_checkpoint, save_checkpoint, CaformerParams};
use caformer_core::data::{
    apply_imputation_mask, load_csv, load_mask_csv, synth_generate, two_class_collection, write_mask_csv, Sample,
    SeriesDataset, SynthKind, SynthParams, Target, TaskPayload,
};
use caformer_core::heads::Task;
use caformer_core::metrics::MetricReport;
use caformer_core::numerics::{grad_check, GradCheckReport};
use caformer_core::pipeline::{ablation_run, run_anomaly, run_classification, run_forecast, run_imputation, RunResult};
use caformer_core::scm::{backdoor_suite, verify_docalculus_rules, DiscreteScm};
use caformer_core::training::sample_loss;
use caformer_core::NdArray;

use crate::config::RunConfig;
use crate::error::{io_err, CliError, CliResult};
use crate::plots;
use crate::RunArgs;

const BACKDOOR_TOL: f64 = 1e-12;

/// Input of one run: a single series or a labelled collection.
enum Input {
    Series(SeriesDataset),
    Collection(Vec<SeriesDataset>),
}

fn load_config(args: &RunArgs, task: Option<Task>) -> CliResult<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg = cfg.with_overrides(&args.overrides)?;
    if let Some(t) = task.or(args.task) {
        cfg.task = t;
    }
    if let Some(d) = &args.data {
        cfg.data = Some(d.clone());
    }
    if let Some(o) = &args.out {
        cfg.out_dir = o.clone();
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    Ok(cfg)
}

fn read_labels(path: &Path, len: usize) -> CliResult<Vec<bool>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let labels = text
        .lines()
        .skip(1)
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| match l.rsplit(',').next().unwrap_or(l).trim() {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(CliError::Config(format!("{}: line {} label {other:?} is not 0 or 1", path.display(), i + 2))),
        })
        .collect::<CliResult<Vec<_>>>()?;
    if labels.len() != len {
        return Err(CliError::Config(format!(
            "{} holds {} labels, series has {len} steps",
            path.display(),
            labels.len()
        )));
    }
    Ok(labels)
}

/// Loads the data file when set, taking `dims` from it, then resolves the
/// remaining defaults and generates synthetic data if needed.
fn prepare(cfg: RunConfig) -> CliResult<(RunConfig, Input)> {
    let mut cfg = cfg;
    let loaded = match &cfg.data {
        Some(path) => {
            let ds = load_csv(path, cfg.has_header, cfg.timestamp_col)?;
            cfg.dims = ds.dims();
            cfg.length = Some(ds.len());
            Some(ds)
        }
        None => None,
    };
    let cfg = cfg.resolve()?;
    let params = cfg.synth_params();
    let length = cfg.length.unwrap_or(0);
    let base = match loaded {
        Some(ds) => ds,
        None if cfg.task == Task::Classification => {
            let coll = two_class_collection(cfg.series_count, cfg.dims, length, cfg.data_seed, &params)?;
            return Ok((cfg, Input::Collection(coll)));
        }
        None => synth_generate(cfg.synth.unwrap_or(SynthKind::CoupledAr), cfg.dims, length, cfg.data_seed, &params)?,
    };
    let ds = match cfg.task {
        Task::Imputation => match &cfg.mask {
            Some(mask) => load_mask_csv(mask, false, &base)?,
            None => apply_imputation_mask(&base, cfg.mask_ratio, cfg.data_seed)?,
        },
        Task::Anomaly => match &cfg.labels {
            Some(path) => {
                let labels = read_labels(path, base.len())?;
                SeriesDataset {
                    payload: TaskPayload::Anomaly(labels),
                    ..base
                }
            }
            None => base,
        },
        _ => base,
    };
    Ok((cfg, Input::Series(ds)))
}

fn create_out_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir.join("plots")).map_err(io_err(dir))
}

fn write_file(path: PathBuf, text: &str) -> CliResult<PathBuf> {
    std::fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}

fn write_snapshot(cfg: &RunConfig) -> CliResult<PathBuf> {
    create_out_dir(&cfg.out_dir)?;
    write_file(cfg.out_dir.join("config.toml"), &cfg.to_toml_string()?)
}

fn execute(cfg: &RunConfig, input: &Input, pretrained: Option<CaformerParams>) -> CliResult<RunResult> {
    let model = cfg.model();
    let head = cfg.head();
    let tc = cfg.train();
    let mut opts = cfg.pipeline();
    opts.pretrained = pretrained;
    let log_path = cfg.out_dir.join("log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(io_err(&log_path))?);
    let sink: Option<&mut dyn Write> = Some(&mut log);
    let result = match (cfg.task, input) {
        (Task::Classification, Input::Collection(c)) => run_classification(c, &model, &head, &tc, &opts, sink)?,
        (Task::LongForecast | Task::ShortForecast, Input::Series(ds)) => run_forecast(ds, &model, &head, &tc, &opts, sink)?,
        (Task::Imputation, Input::Series(ds)) => run_imputation(ds, &model, &head, &tc, &opts, sink)?,
        (Task::Anomaly, Input::Series(ds)) => run_anomaly(ds, &model, &head, &tc, &opts, sink)?,
        (task, _) => return Err(CliError::Config(format!("task {task} does not fit the loaded data"))),
    };
    log.flush().map_err(io_err(&log_path))?;
    Ok(result)
}

fn print_report(report: &MetricReport) {
    println!("task {} over {} points", report.task, report.support);
    for (name, value) in &report.metrics {
        println!("  {name:<18} {value:.6}");
    }
}

/// Writes metrics and plots, then confirms every expected file exists.
fn write_artifacts(cfg: &RunConfig, result: &RunResult, mut expected: Vec<PathBuf>) -> CliResult<()> {
    let dir = &cfg.out_dir;
    let plots_dir = dir.join("plots");
    expected.push(write_file(dir.join("metrics.json"), &(result.report.to_json()? + "\n"))?);
    expected.push(dir.join("config.toml"));
    expected.push(dir.join("log.jsonl"));
    if let Some(overlay) = &result.overlay {
        expected.extend(plots::write_overlay(&plots_dir, overlay)?);
    }
    if let Some(diag) = &result.diagnostics {
        expected.extend(plots::write_diagnostics(&plots_dir, diag)?);
    }
    let missing: Vec<String> = expected
        .iter()
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Failed(format!("missing artifacts: {}", missing.join(", "))));
    }
    print_report(&result.report);
    println!("artifacts in {}", dir.display());
    Ok(())
}

pub fn task_run(args: RunArgs, task: Option<Task>) -> CliResult<()> {
    let (cfg, input) = prepare(load_config(&args, task)?)?;
    write_snapshot(&cfg)?;
    let result = execute(&cfg, &input, None)?;
    let ckpt = cfg.out_dir.join("model.ckpt");
    save_checkpoint(&ckpt, &cfg, &result.outcome.params)?;
    log::info!("best epoch {}", result.outcome.best_epoch);
    write_artifacts(&cfg, &result, vec![ckpt])
}

pub fn evaluate(checkpoint: &Path, data: Option<PathBuf>, out: Option<PathBuf>) -> CliResult<()> {
    let (mut cfg, params): (RunConfig, CaformerParams) = load_checkpoint(checkpoint)?;
    if data.is_some() {
        cfg.data = data;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    let (cfg, input) = prepare(cfg)?;
    write_snapshot(&cfg)?;
    let result = execute(&cfg, &input, Some(params))?;
    write_artifacts(&cfg, &result, Vec::new())
}

pub fn ablate(args: RunArgs) -> CliResult<()> {
    let cfg = load_config(&args, None)?;
    if !cfg.task.is_forecast() {
        return Err(CliError::Config(format!("ablation runs forecasting, not {}", cfg.task)));
    }
    let (cfg, input) = prepare(cfg)?;
    let Input::Series(ds) = input else {
        return Err(CliError::Config("ablation needs a single series".into()));
    };
    write_snapshot(&cfg)?;
    let table = ablation_run(&ds, &cfg.model(), &cfg.head(), &cfg.train(), &cfg.pipeline(), &cfg.ablation_seeds)?;
    let dir = &cfg.out_dir;
    let md = table.render();
    write_file(dir.join("ablation.md"), &md)?;
    let json = serde_json::to_string_pretty(&table).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(dir.join("ablation.json"), &(json + "\n"))?;
    let mut report = MetricReport::new("ablation", table.seeds.len())?;
    for row in &table.rows {
        report.insert(&format!("{}_median_mse", row.variant), row.median_mse)?;
        report.insert(&format!("{}_median_mae", row.variant), row.median_mae)?;
    }
    write_file(dir.join("metrics.json"), &(report.to_json()? + "\n"))?;
    print!("{md}");
    println!(
        "full model within 10% of every ablated variant: {}",
        if table.full_within(1.10) { "yes" } else { "no" }
    );
    Ok(())
}

pub fn verify_backdoor(trials: usize, seed: u64) -> CliResult<()> {
    let r = backdoor_suite(trials, seed)?;
    println!(
        "{} models, {} comparisons, confounding gap up to {:.4}",
        r.trials, r.comparisons, r.max_confounding_gap
    );
    let pass = r.max_abs_diff < BACKDOOR_TOL;
    println!(
        "max_abs_diff {:.3e} {} {BACKDOOR_TOL:e}",
        r.max_abs_diff,
        if pass { "<" } else { ">=" }
    );
    if pass {
        Ok(())
    } else {
        Err(CliError::Failed("back-door adjustment disagrees with surgery".into()))
    }
}

pub fn verify_rules(path: &Path, x: &str, z: &str, y: &str) -> CliResult<()> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let scm = DiscreteScm::from_toml_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let report = verify_docalculus_rules(&scm, x, z, y)?;
    for r in &report.rules {
        let status = match r.equality {
            None => "not applicable".to_string(),
            Some(eq) => format!(
                "{} (max diff {:.3e})",
                if eq { "holds" } else { "FAILS" },
                r.max_abs_diff.unwrap_or(0.0)
            ),
        };
        println!("rule {}: premise {}, {status}", r.rule, r.premise);
    }
    if report.all_verified() {
        Ok(())
    } else {
        Err(CliError::Failed("a rule with a satisfied premise does not hold".into()))
    }
}

/// One window of synthetic data shaped for `cfg`'s head.
fn probe_sample(cfg: &RunConfig) -> CliResult<Sample> {
    let l_in = cfg.input_len.unwrap_or(0);
    let len = (l_in + cfg.horizon).max(64);
    let params = SynthParams::default();
    let ds = synth_generate(SynthKind::CoupledAr, cfg.dims, len, cfg.data_seed, &params)?;
    let input = ds.slice(0, l_in);
    let target = match cfg.task {
        Task::Classification => Target::Class(0),
        Task::Imputation | Task::Anomaly => Target::Series(input.clone()),
        _ => Target::Series(ds.slice(l_in, l_in + cfg.horizon)),
    };
    Ok(Sample {
        input,
        target,
        mask: None,
        start: 0,
    })
}

/// Gradient check of `cfg`'s training loss at its initial parameters, with
/// the environment gates moved off zero.
pub fn gradient_report(cfg: &RunConfig, step: f64) -> CliResult<GradCheckReport> {
    let (model, head, tc) = (cfg.model(), cfg.head(), cfg.train());
    let mut params = CaformerParams::init(&model, &head, cfg.seed)?;
    for (name, p) in params.tensors.iter_mut() {
        if name.ends_with(".gamma1") || name.ends_with(".gamma2") {
            *p = NdArray::full(p.shape(), 0.05);
        }
    }
    let sample = probe_sample(cfg)?;
    Ok(grad_check(
        |tape, vars| sample_loss(tape, vars, &model, &head, &sample, tc.loss),
        &params.tensors,
        step,
    )?)
}

pub fn gradcheck(config: Option<PathBuf>, overrides: &[String], step: f64, tol: f64) -> CliResult<()> {
    let base = match &config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::gradcheck_preset(),
    };
    let cfg = base.with_overrides(overrides)?.resolve()?;
    let report = gradient_report(&cfg, step)?;
    println!(
        "{} entries, max relative error {:.3e} at {}[{}]",
        report.entries_checked, report.max_rel_error, report.worst_param, report.worst_index
    );
    if report.max_rel_error < tol {
        println!("within tolerance {tol:e}");
        Ok(())
    } else {
        Err(CliError::Failed(format!("max relative error exceeds {tol:e}")))
    }
}

fn series_csv(ds: &SeriesDataset) -> String {
    let (m, l) = (ds.dims(), ds.len());
    let mut out = ds.dim_names.join(",");
    out.push('\n');
    for t in 0..l {
        let row: Vec<String> = (0..m).map(|d| ds.values.data()[d * l + t].to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn synth(args: RunArgs) -> CliResult<()> {
    let mut cfg = load_config(&args, None)?;
    cfg.data = None;
    let (cfg, input) = prepare(cfg)?;
    write_snapshot(&cfg)?;
    let dir = &cfg.out_dir;
    match input {
        Input::Collection(coll) => {
            let names = coll.first().map(|d| d.dim_names.join(",")).unwrap_or_default();
            let mut series = format!("series,step,{names}\n");
            let mut labels = String::from("series,label\n");
            for (i, ds) in coll.iter().enumerate() {
                for (t, line) in series_csv(ds).lines().skip(1).enumerate() {
                    series.push_str(&format!("{i},{t},{line}\n"));
                }
                if let TaskPayload::Class(c) = ds.payload {
                    labels.push_str(&format!("{i},{c}\n"));
                }
            }
            write_file(dir.join("series.csv"), &series)?;
            write_file(dir.join("labels.csv"), &labels)?;
        }
        Input::Series(ds) => {
            write_file(dir.join("series.csv"), &series_csv(&ds))?;
            match &ds.payload {
                TaskPayload::Imputation { mask } => {
                    write_mask_csv(dir.join("mask.csv"), mask, ds.dims())?;
                }
                TaskPayload::Anomaly(labels) => {
                    let mut text = String::from("label\n");
                    for &l in labels {
                        text.push_str(if l { "1\n" } else { "0\n" });
                    }
                    write_file(dir.join("labels.csv"), &text)?;
                }
                _ => {}
            }
        }
    }
    println!("synthetic {} data in {}", cfg.task, dir.display());
    Ok(())
}
