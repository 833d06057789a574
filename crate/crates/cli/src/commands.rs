use std::fs;
use std::path::{Path, PathBuf};

use flowcast::dataio::{read_series, split_series, write_json, write_series, FlowSnapshotSeries, ForecastInfo, Provenance, SplitSpec};
use flowcast::metrics::{align_truth, evaluate as score, persistence_forecast, MetricsReport};
use flowcast::processor::{build_context_set, ProcessorCheckpoint, PROC_MANIFEST_FILE};
use flowcast::rom::{train_rom as fit_rom, RomCheckpoint, ROM_MANIFEST_FILE};
use flowcast::spectral::simulate_with_diagnostics;
use flowcast::Scalar;
use serde::{Deserialize, Serialize};

use crate::config::{self, Baseline, Config, Precision};
use crate::manifest::RunRecorder;
use crate::{plots, CliError, Common};

pub const REPORT_FILE: &str = "report.json";
pub const TRANSFER_REPORT_FILE: &str = "transfer_report.json";

macro_rules! with_precision {
    ($p:expr, $f:ident($($arg:expr),*)) => {
        match $p {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn split_spec(cfg: &Config) -> SplitSpec {
    SplitSpec {
        train_fraction: cfg.data.train_fraction,
        contiguous: true,
    }
}

pub fn generate(common: &Common, out: Option<PathBuf>, args: &[String]) -> Result<(), CliError> {
    let (cfg, src) = config::load(common.config.as_deref(), &common.set)?;
    let out = out.unwrap_or_else(|| cfg.data.run_dir.join("data"));
    let mut rec = RunRecorder::new("generate", args, &cfg, &src);
    let (mut series, diag) = rec.timed("simulate", || match cfg.precision {
        Precision::F32 => simulate_with_diagnostics::<f32>(&cfg.solver),
        Precision::F64 => simulate_with_diagnostics::<f64>(&cfg.solver),
    })?;
    if let Some(s) = &cfg.data.scenario {
        series.scenario = s.clone();
    }
    write_series(&series, &out)?;
    log::info!("wrote {} snapshots of {} to {}", series.t(), series.scenario, out.display());
    rec.output("dataset", &out);
    rec.result("snapshots", series.t());
    rec.result("scenario", &series.scenario);
    rec.result("max_divergence", diag.worst_divergence());
    rec.finish(&out)
}

pub fn train_rom(common: &Common, data: Option<PathBuf>, out: Option<PathBuf>, args: &[String]) -> Result<(), CliError> {
    let (cfg, src) = config::load(common.config.as_deref(), &common.set)?;
    let data = data.unwrap_or_else(|| cfg.data.run_dir.join("data"));
    let out = out.unwrap_or_else(|| cfg.data.run_dir.join("rom"));
    let mut rec = RunRecorder::new("train-rom", args, &cfg, &src);
    rec.input("dataset", &data);
    with_precision!(cfg.precision, train_rom_as(&cfg, &data, &out, &mut rec))?;
    rec.output("checkpoint", &out);
    rec.finish(&out)
}

fn train_rom_as<T: Scalar>(cfg: &Config, data: &Path, out: &Path, rec: &mut RunRecorder) -> Result<(), CliError> {
    let series = read_series(data)?;
    let (train, _) = split_series(&series, &split_spec(cfg))?;
    let ckpt = rec.timed("train", || fit_rom::<T>(&train, &cfg.rom))?;
    ckpt.save(out)?;
    rec.checkpoint("rom", ckpt.checksum());
    rec.result("train_snapshots", train.t());
    rec.result("final_loss", ckpt.final_loss());
    rec.result("loss_trace", &ckpt.loss_trace);
    Ok(())
}

pub fn train_processor(
    common: &Common,
    data: Option<PathBuf>,
    rom: Option<PathBuf>,
    out: Option<PathBuf>,
    args: &[String],
) -> Result<(), CliError> {
    let (cfg, src) = config::load(common.config.as_deref(), &common.set)?;
    let data = data.unwrap_or_else(|| cfg.data.run_dir.join("data"));
    let rom = rom.unwrap_or_else(|| cfg.data.run_dir.join("rom"));
    let out = out.unwrap_or_else(|| cfg.data.run_dir.join("processor"));
    require_checkpoint(&rom, ROM_MANIFEST_FILE, "ROM", "train-rom")?;
    let mut rec = RunRecorder::new("train-processor", args, &cfg, &src);
    rec.input("dataset", &data);
    rec.input("rom", &rom);
    with_precision!(cfg.precision, train_processor_as(&cfg, &data, &rom, &out, &mut rec))?;
    rec.output("checkpoint", &out);
    rec.finish(&out)
}

fn require_checkpoint(dir: &Path, file: &str, what: &str, producer: &str) -> Result<(), CliError> {
    if dir.join(file).is_file() {
        Ok(())
    } else {
        Err(CliError::usage(format!(
            "no {what} checkpoint at {} (run `flowcast {producer}` first)",
            dir.display()
        )))
    }
}

fn train_processor_as<T: Scalar>(
    cfg: &Config,
    data: &Path,
    rom: &Path,
    out: &Path,
    rec: &mut RunRecorder,
) -> Result<(), CliError> {
    let rom = RomCheckpoint::<T>::load(rom)?;
    let series = read_series(data)?;
    let (train, _) = split_series(&series, &split_spec(cfg))?;
    let latents = rec.timed("encode", || rom.encode_series(&train))?;
    let ckpt = rec.timed("train", || {
        flowcast::processor::train_processor(&latents, &cfg.processor, &cfg.backbone, series.dt_record)
    })?;
    ckpt.save(out)?;
    rec.checkpoint("rom", rom.checksum());
    rec.checkpoint("processor", ckpt.checksum());
    rec.checkpoint("backbone_base", ckpt.backbone.base_checksum());
    rec.result("final_loss", ckpt.final_loss());
    rec.result("loss_trace", &ckpt.loss_trace);
    rec.result("gamma", ckpt.gamma().to_f64_lossy());
    Ok(())
}

/// Inputs shared by `predict` and `transfer`.
#[derive(Debug, Clone)]
pub struct ForecastArgs {
    pub rom: PathBuf,
    pub proc: PathBuf,
    pub data: PathBuf,
    pub horizon: Option<usize>,
    pub context_pairs: Option<usize>,
    pub stride: Option<usize>,
    pub start: Option<usize>,
}

struct ForecastPlan {
    start: usize,
    horizon: usize,
    pairs: usize,
    stride: usize,
}

fn plan<T: Scalar>(
    cfg: &Config,
    fa: &ForecastArgs,
    series: &FlowSnapshotSeries,
    proc: &ProcessorCheckpoint<T>,
) -> Result<ForecastPlan, CliError> {
    let horizon = fa.horizon.unwrap_or(cfg.eval.horizon);
    if horizon == 0 {
        return Err(CliError::usage("--horizon must be at least 1"));
    }
    let start = match fa.start {
        Some(s) => s,
        None => split_spec(cfg).split_index(series.t())?,
    };
    let pairs = fa.context_pairs.unwrap_or(cfg.eval.context_pairs);
    let history = proc.config.window + 2 * pairs * proc.config.patch_len;
    if start < history || start > series.t() {
        return Err(CliError::usage(format!(
            "forecast start {start} needs {history} preceding snapshots within a series of {}",
            series.t()
        )));
    }
    let stride = fa.stride.unwrap_or(proc.config.rollout_stride);
    proc.config.check_stride(stride)?;
    Ok(ForecastPlan {
        start,
        horizon,
        pairs,
        stride,
    })
}

/// Encode the lookback (and context segment just before it), roll out and decode.
fn forecast<T: Scalar>(
    rom: &RomCheckpoint<T>,
    proc: &ProcessorCheckpoint<T>,
    series: &FlowSnapshotSeries,
    plan: &ForecastPlan,
) -> Result<FlowSnapshotSeries, CliError> {
    if rom.latent_dim() != proc.latent_dim {
        return Err(CliError::usage(format!(
            "ROM latent dimension {} does not match the processor's {}",
            rom.latent_dim(),
            proc.latent_dim
        )));
    }
    let m = proc.config.window;
    let look = series.slice_time(plan.start - m..plan.start)?;
    let tail = rom.encode_series(&look)?;
    let ctx = if plan.pairs > 0 {
        let len = 2 * plan.pairs * proc.config.patch_len;
        let seg = series.slice_time(plan.start - m - len..plan.start - m)?;
        let z = rom.encode_series(&seg)?;
        Some(build_context_set(z.values.view(), plan.pairs, proc.config.patch_len)?)
    } else {
        None
    };
    let out = proc.forecast_in_context(tail.values.view(), plan.horizon, plan.stride, ctx.as_ref())?;
    let frames = rom.decode_latents(out.latents.view())?;
    let mut pred = series.with_frames(frames, plan.horizon)?;
    pred.seed = None;
    pred.provenance = Provenance::Forecast(ForecastInfo {
        forecast_start: plan.start,
        source_scenario: proc.source_scenario.clone(),
        rom_checksum: rom.checksum(),
        processor_checksum: proc.checksum(),
        context_pairs: plan.pairs,
        rollout_stride: plan.stride,
    });
    log::info!(
        "forecast {} steps from snapshot {} with {} backbone passes",
        plan.horizon,
        plan.start,
        out.forwards
    );
    Ok(pred)
}

pub fn predict(common: &Common, fa: ForecastArgs, out: Option<PathBuf>, args: &[String]) -> Result<(), CliError> {
    let (cfg, src) = config::load(common.config.as_deref(), &common.set)?;
    let out = out.unwrap_or_else(|| cfg.data.run_dir.join("predict"));
    require_checkpoint(&fa.rom, ROM_MANIFEST_FILE, "ROM", "train-rom")?;
    require_checkpoint(&fa.proc, PROC_MANIFEST_FILE, "processor", "train-processor")?;
    let mut rec = RunRecorder::new("predict", args, &cfg, &src);
    rec.input("rom", &fa.rom);
    rec.input("processor", &fa.proc);
    rec.input("dataset", &fa.data);
    with_precision!(cfg.precision, predict_as(&cfg, &fa, &out, &mut rec))?;
    rec.output("forecast", &out);
    rec.finish(&out)
}

fn predict_as<T: Scalar>(cfg: &Config, fa: &ForecastArgs, out: &Path, rec: &mut RunRecorder) -> Result<(), CliError> {
    let rom = RomCheckpoint::<T>::load(&fa.rom)?;
    let proc = ProcessorCheckpoint::<T>::load(&fa.proc)?;
    let series = read_series(&fa.data)?;
    let plan = plan(cfg, fa, &series, &proc)?;
    let pred = rec.timed("forecast", || forecast(&rom, &proc, &series, &plan))?;
    write_series(&pred, out)?;
    rec.checkpoint("rom", rom.checksum());
    rec.checkpoint("processor", proc.checksum());
    rec.result("forecast_start", plan.start);
    rec.result("horizon", plan.horizon);
    rec.result("context_pairs", plan.pairs);
    rec.result("rollout_stride", plan.stride);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub name: Baseline,
    /// Truth snapshot repeated over the horizon.
    pub source_snapshot: usize,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub model: MetricsReport,
    pub baseline: Option<BaselineReport>,
}

pub fn evaluate(
    common: &Common,
    pred: &Path,
    truth: &Path,
    baseline: Option<Baseline>,
    plots_flag: bool,
    out: Option<PathBuf>,
    args: &[String],
) -> Result<(), CliError> {
    let (cfg, src) = config::load(common.config.as_deref(), &common.set)?;
    let out = out.unwrap_or_else(|| cfg.data.run_dir.join("eval"));
    let mut rec = RunRecorder::new("evaluate", args, &cfg, &src);
    rec.input("prediction", pred);
    rec.input("truth", truth);
    let p = read_series(pred)?;
    let t = read_series(truth)?;
    let aligned = align_truth(&p, &t)?;
    let model = rec.timed("metrics", || score(&p, &aligned))?;
    let baseline = match baseline {
        Some(Baseline::Persistence) => {
            let Provenance::Forecast(info) = &p.provenance else {
                return Err(CliError::usage("persistence baseline needs a forecast with a recorded start"));
            };
            if info.forecast_start == 0 || info.forecast_start > t.t() {
                return Err(CliError::usage(format!(
                    "persistence baseline needs truth snapshot {} before the forecast start",
                    info.forecast_start as i64 - 1
                )));
            }
            let last = info.forecast_start - 1;
            let base = persistence_forecast(&t, last, p.t())?;
            Some(BaselineReport {
                name: Baseline::Persistence,
                source_snapshot: last,
                report: score(&base, &aligned)?,
            })
        }
        None => None,
    };
    let report = EvaluationReport { model, baseline };
    fs::create_dir_all(&out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
    write_json(&out.join(REPORT_FILE), &report)?;
    log::info!(
        "MSE {:.4e}{}",
        report.model.aggregate.mse,
        report
            .baseline
            .as_ref()
            .map(|b| format!(", persistence {:.4e}", b.report.aggregate.mse))
            .unwrap_or_default()
    );
    if plots_flag {
        let mut curves = vec![("model", report.model.mse_per_timestep.as_slice())];
        if let Some(b) = &report.baseline {
            curves.push(("persistence", b.report.mse_per_timestep.as_slice()));
        }
        plots::mse_curve(&out.join("mse_per_timestep.svg"), &curves)?;
        plots::error_histogram(&out.join("abs_error_histogram.svg"), &report.model.abs_error)?;
    }
    rec.output("report", &out.join(REPORT_FILE));
    rec.result("mse", report.model.aggregate.mse);
    rec.finish(&out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub source_scenario: String,
    pub target_scenario: String,
    pub rom_a_checksum: String,
    pub rom_b_checksum: String,
    pub processor_checksum: String,
    pub processor_unchanged: bool,
    pub forecast_start: usize,
    pub horizon: usize,
    pub context_pairs: usize,
    pub zero_shot: MetricsReport,
    pub in_context: Option<MetricsReport>,
}

pub fn transfer(
    common: &Common,
    rom_a: &Path,
    fa: ForecastArgs,
    out: Option<PathBuf>,
    args: &[String],
) -> Result<(), CliError> {
    let (cfg, src) = config::load(common.config.as_deref(), &common.set)?;
    let out = out.unwrap_or_else(|| cfg.data.run_dir.join("transfer"));
    require_checkpoint(rom_a, ROM_MANIFEST_FILE, "ROM", "train-rom")?;
    require_checkpoint(&fa.rom, ROM_MANIFEST_FILE, "ROM", "train-rom")?;
    require_checkpoint(&fa.proc, PROC_MANIFEST_FILE, "processor", "train-processor")?;
    let mut rec = RunRecorder::new("transfer", args, &cfg, &src);
    rec.input("rom_a", rom_a);
    rec.input("rom_b", &fa.rom);
    rec.input("processor", &fa.proc);
    rec.input("dataset_b", &fa.data);
    with_precision!(cfg.precision, transfer_as(&cfg, rom_a, &fa, &out, &mut rec))?;
    rec.output("report", &out.join(TRANSFER_REPORT_FILE));
    rec.finish(&out)
}

fn dir_bytes(dir: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>, CliError> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    entries
        .into_iter()
        .map(|p| {
            let b = fs::read(&p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
            Ok((p, b))
        })
        .collect()
}

fn transfer_as<T: Scalar>(
    cfg: &Config,
    rom_a: &Path,
    fa: &ForecastArgs,
    out: &Path,
    rec: &mut RunRecorder,
) -> Result<(), CliError> {
    let before = dir_bytes(&fa.proc)?;
    let proc = ProcessorCheckpoint::<T>::load(&fa.proc)?;
    let rom_a = RomCheckpoint::<T>::load(rom_a)?;
    let rom_b = RomCheckpoint::<T>::load(&fa.rom)?;
    for (name, rom) in [("A", &rom_a), ("B", &rom_b)] {
        if rom.latent_dim() != proc.latent_dim {
            return Err(CliError::usage(format!(
                "ROM-{name} latent dimension {} does not match the processor's {}",
                rom.latent_dim(),
                proc.latent_dim
            )));
        }
    }
    if proc.rom_id != rom_a.checksum() {
        log::warn!("processor was trained on latents of a different ROM than ROM-A");
    }
    let series = read_series(&fa.data)?;
    let plan = plan(cfg, fa, &series, &proc)?;
    let checksum_before = proc.checksum();

    let zero_plan = ForecastPlan { pairs: 0, ..plan };
    let zero = forecast(&rom_b, &proc, &series, &zero_plan)?;
    let truth = align_truth(&zero, &series)?;
    let zero_shot = score(&zero, &truth)?;
    write_series(&zero, &out.join("zero_shot"))?;
    let in_context = if plan.pairs > 0 {
        let pred = forecast(&rom_b, &proc, &series, &plan)?;
        write_series(&pred, &out.join(format!("in_context_{}", plan.pairs)))?;
        Some(score(&pred, &truth)?)
    } else {
        None
    };

    let unchanged = proc.checksum() == checksum_before && dir_bytes(&fa.proc)? == before;
    if !unchanged {
        return Err(CliError::Runtime("processor checkpoint changed during transfer".into()));
    }
    let report = TransferReport {
        source_scenario: proc.source_scenario.clone(),
        target_scenario: series.scenario.clone(),
        rom_a_checksum: rom_a.checksum(),
        rom_b_checksum: rom_b.checksum(),
        processor_checksum: checksum_before,
        processor_unchanged: unchanged,
        forecast_start: plan.start,
        horizon: plan.horizon,
        context_pairs: plan.pairs,
        zero_shot,
        in_context,
    };
    write_json(&out.join(TRANSFER_REPORT_FILE), &report)?;
    rec.checkpoint("processor", report.processor_checksum.clone());
    rec.checkpoint("rom_a", report.rom_a_checksum.clone());
    rec.checkpoint("rom_b", report.rom_b_checksum.clone());
    rec.result("zero_shot_mse", report.zero_shot.aggregate.mse);
    if let Some(r) = &report.in_context {
        rec.result("in_context_mse", r.aggregate.mse);
    }
    Ok(())
}
