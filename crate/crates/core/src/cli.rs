//! Operator entry point: ingestion, training, online/transfer runs, the HPA
//! simulator, and report regeneration from logs.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::engine::{
    online_run, pretrain, save_checkpoint, transfer_run, EngineConfig, EnsembleMode,
    OnlineOptions, RunOutput,
};
use crate::ensemble::RegretLedger;
use crate::error::{Error, Result};
use crate::series::{load_trace, write_trace_csv, MetricReport, TimeSeriesTrace, TraceFormat};
use crate::sim::{
    simulate, tick_log_csv, EngineForecaster, Policy, SimConfig, SimReport,
};
use crate::tensor::Tensor;

#[derive(Parser)]
#[command(name = "e3cast", version, about = "Online ensemble workload forecasting and predictive autoscaling")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Validate a trace and write a normalized copy
    Ingest(IngestArgs),
    /// Offline pretraining; writes a checkpoint
    Pretrain(RunArgs),
    /// Pretrain, then replay the trace online with feedback updates
    OnlineRun(RunArgs),
    /// Pretrain on --source, run online on --target
    TransferRun(TransferArgs),
    /// Replay a QPS trace through the autoscaling simulator
    SimulateHpa(SimArgs),
    /// Regenerate summaries (and plot data) from a run directory's logs
    Report(ReportArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct EngineFlags {
    #[arg(long)]
    lookback: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Comma-separated patch sizes, e.g. 16,32,64,128
    #[arg(long, value_delimiter = ',')]
    patch_sizes: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    ensemble: Option<EnsembleFlag>,
    #[arg(long)]
    no_mimo: bool,
    #[arg(long)]
    no_adapter: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON config file; flags take precedence over it
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EnsembleFlag {
    Os,
    Ftpl,
    None,
}

impl From<EnsembleFlag> for EnsembleMode {
    fn from(f: EnsembleFlag) -> Self {
        match f {
            EnsembleFlag::Os => EnsembleMode::Os,
            EnsembleFlag::Ftpl => EnsembleMode::Ftpl,
            EnsembleFlag::None => EnsembleMode::None,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    trace: PathBuf,
    #[command(flatten)]
    engine: EngineFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[command(flatten)]
    engine: EngineFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, value_enum)]
    policy: PolicyFlag,
    #[command(flatten)]
    engine: EngineFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyFlag {
    Naive,
    Ideal,
    Predictive,
}

impl From<PolicyFlag> for Policy {
    fn from(f: PolicyFlag) -> Self {
        match f {
            PolicyFlag::Naive => Policy::Naive,
            PolicyFlag::Ideal => Policy::Ideal,
            PolicyFlag::Predictive => Policy::Predictive,
        }
    }
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding a previous run's logs
    #[arg(long)]
    out: PathBuf,
    /// Also write CSV plot series (forecast vs truth, weights, regret)
    #[arg(long)]
    emit_plot_data: bool,
}

/// Config-file shape: either a flat EngineConfig/SimConfig or a wrapper with
/// `engine` and/or `sim` keys.
#[derive(Default, Deserialize)]
struct ConfigFile {
    engine: Option<serde_json::Value>,
    sim: Option<serde_json::Value>,
}

/// Full resolved configuration of a run, sufficient to reproduce it.
#[derive(Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub engine: Option<EngineConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy: Option<Policy>,
    pub inputs: BTreeMap<String, String>,
}

/// Parse argv and execute; returns the process exit code
/// (0 success, 1 usage error, 2 data error).
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    if let Ok(threads) = std::env::var("E3CAST_THREADS") {
        if threads.parse::<usize>().map(|t| t == 0).unwrap_or(true) {
            eprintln!("E3CAST_THREADS must be a positive integer");
            return 1;
        }
        // execution is sequential by contract; any positive bound is honored
    }
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => 1,
                _ => 2,
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Ingest(a) => cmd_ingest(a),
        Cmd::Pretrain(a) => cmd_pretrain(a),
        Cmd::OnlineRun(a) => cmd_online_run(a),
        Cmd::TransferRun(a) => cmd_transfer_run(a),
        Cmd::SimulateHpa(a) => cmd_simulate(a),
        Cmd::Report(a) => cmd_report(a),
    }
}

fn load_config_file(path: &Path) -> Result<ConfigFile> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("--config {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("--config {}: invalid JSON: {e}", path.display())))?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Config(format!("--config {}: expected an object", path.display())))?;
    if obj.contains_key("engine") || obj.contains_key("sim") {
        serde_json::from_value(value.clone())
            .map_err(|e| Error::Config(format!("--config {}: {e}", path.display())))
    } else {
        // flat file: treat as both candidate sections
        Ok(ConfigFile { engine: Some(value.clone()), sim: Some(value) })
    }
}

/// Precedence: built-in defaults < --config JSON < flags.
fn resolve_engine(flags: &EngineFlags) -> Result<EngineConfig> {
    let mut cfg = EngineConfig::default();
    if let Some(path) = &flags.config {
        if let Some(section) = load_config_file(path)?.engine {
            cfg = serde_json::from_value(section)
                .map_err(|e| Error::Config(format!("--config {}: {e}", path.display())))?;
        }
    }
    if let Some(l) = flags.lookback {
        cfg.lookback = l;
    }
    if let Some(h) = flags.horizon {
        cfg.horizon = h;
    }
    if let Some(p) = &flags.patch_sizes {
        cfg.patch_sizes = p.clone();
    }
    if let Some(e) = flags.ensemble {
        cfg.ensemble = e.into();
    }
    if flags.no_mimo {
        cfg.disable_mimo = true;
    }
    if flags.no_adapter {
        cfg.disable_adapter = true;
    }
    if let Some(e) = flags.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    cfg.backbone()?;
    Ok(cfg)
}

fn resolve_sim(flags: &EngineFlags) -> Result<SimConfig> {
    let mut cfg = SimConfig::default();
    if let Some(path) = &flags.config {
        if let Some(section) = load_config_file(path)?.sim {
            cfg = serde_json::from_value(section)
                .map_err(|e| Error::Config(format!("--config {}: {e}", path.display())))?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value).expect("serializes"))?;
    Ok(())
}

fn inputs_of(pairs: &[(&str, &Path)]) -> BTreeMap<String, String> {
    pairs
        .iter()
        .map(|(k, p)| (k.to_string(), p.display().to_string()))
        .collect()
}

fn cmd_ingest(a: IngestArgs) -> Result<()> {
    let trace = load_trace(&a.trace, TraceFormat::Csv)?;
    ensure_out(&a.out)?;
    write_trace_csv(&trace, &a.out.join("trace.csv"))?;
    write_manifest(
        &a.out,
        &Manifest {
            command: "ingest".into(),
            engine: None,
            sim: None,
            policy: None,
            inputs: inputs_of(&[("trace", &a.trace)]),
        },
    )?;
    println!(
        "rows={} channels={} interval={}s",
        trace.len(),
        trace.channels(),
        trace.interval()
    );
    Ok(())
}

fn cmd_pretrain(a: RunArgs) -> Result<()> {
    let cfg = resolve_engine(&a.engine)?;
    let trace = load_trace(&a.trace, TraceFormat::Csv)?;
    let state = pretrain(&trace, &cfg)?;
    ensure_out(&a.out)?;
    save_checkpoint(&state, &a.out.join("checkpoint.json"))?;
    let mut losses = String::from("epoch,train_loss\n");
    for (i, l) in state.loss_history.iter().enumerate() {
        losses.push_str(&format!("{},{l}\n", i + 1));
    }
    fs::write(a.out.join("loss_history.csv"), losses)?;
    write_manifest(
        &a.out,
        &Manifest {
            command: "pretrain".into(),
            engine: Some(cfg),
            sim: None,
            policy: None,
            inputs: inputs_of(&[("trace", &a.trace)]),
        },
    )?;
    println!(
        "epochs={} final_loss={}",
        state.loss_history.len(),
        state.loss_history.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn steps_csv(out: &RunOutput) -> String {
    let d = out.steps.first().map_or(0, |s| s.expert_losses.len());
    let mut csv = String::from("anchor,emitted_wmape_inputs");
    for i in 1..=d {
        csv.push_str(&format!(",expert_loss_{i}"));
    }
    csv.push_str(",combined_loss,selected_or_weights\n");
    for s in &out.steps {
        csv.push_str(&format!("{},{}", s.anchor, s.wmape.unwrap_or(f64::NAN)));
        for l in &s.expert_losses {
            csv.push_str(&format!(",{l}"));
        }
        csv.push_str(&format!(",{},{}\n", s.combined_loss, s.selection));
    }
    csv
}

fn forecasts_csv(out: &RunOutput) -> String {
    let mut csv = String::from("anchor,offset,channel,forecast,truth\n");
    for s in &out.steps {
        for (c, (f, t)) in s.forecast.iter().zip(&s.truth).enumerate() {
            for (o, (fv, tv)) in f.iter().zip(t).enumerate() {
                csv.push_str(&format!("{},{o},{c},{fv},{tv}\n", s.anchor));
            }
        }
    }
    csv
}

fn write_run_artifacts(dir: &Path, out: &RunOutput) -> Result<()> {
    write_json(&dir.join("metrics.json"), &out.metrics)?;
    fs::write(dir.join("steps.csv"), steps_csv(out))?;
    fs::write(dir.join("regret.csv"), out.ledger.to_csv())?;
    fs::write(dir.join("forecasts.csv"), forecasts_csv(out))?;
    Ok(())
}

fn print_metrics(m: &MetricReport) {
    println!("mse={} mae={} wmape={}", m.mse, m.mae, m.wmape);
}

fn cmd_online_run(a: RunArgs) -> Result<()> {
    let cfg = resolve_engine(&a.engine)?;
    let trace = load_trace(&a.trace, TraceFormat::Csv)?;
    let mut state = pretrain(&trace, &cfg)?;
    let out = online_run(&mut state, &trace, &OnlineOptions::default())?;
    ensure_out(&a.out)?;
    save_checkpoint(&state, &a.out.join("checkpoint.json"))?;
    write_run_artifacts(&a.out, &out)?;
    write_manifest(
        &a.out,
        &Manifest {
            command: "online-run".into(),
            engine: Some(cfg),
            sim: None,
            policy: None,
            inputs: inputs_of(&[("trace", &a.trace)]),
        },
    )?;
    print_metrics(&out.metrics);
    Ok(())
}

fn cmd_transfer_run(a: TransferArgs) -> Result<()> {
    let cfg = resolve_engine(&a.engine)?;
    let source = load_trace(&a.source, TraceFormat::Csv)?;
    let target = load_trace(&a.target, TraceFormat::Csv)?;
    let (state, out) = transfer_run(&source, &target, &cfg)?;
    ensure_out(&a.out)?;
    save_checkpoint(&state, &a.out.join("checkpoint.json"))?;
    write_run_artifacts(&a.out, &out)?;
    write_manifest(
        &a.out,
        &Manifest {
            command: "transfer-run".into(),
            engine: Some(cfg),
            sim: None,
            policy: None,
            inputs: inputs_of(&[("source", &a.source), ("target", &a.target)]),
        },
    )?;
    print_metrics(&out.metrics);
    Ok(())
}

fn print_sim(r: &SimReport) {
    println!(
        "ave_lat={} max_lat={} p999_lat={} p99_lat={} p90_lat={} ave_pod={} max_pod={}",
        r.ave_lat, r.max_lat, r.p999_lat, r.p99_lat, r.p90_lat, r.ave_pod, r.max_pod
    );
}

fn cmd_simulate(a: SimArgs) -> Result<()> {
    let sim_cfg = resolve_sim(&a.engine)?;
    let trace = load_trace(&a.trace, TraceFormat::Csv)?;
    let policy: Policy = a.policy.into();
    let engine_cfg = if policy == Policy::Predictive { Some(resolve_engine(&a.engine)?) } else { None };

    let mut forecaster = match &engine_cfg {
        Some(cfg) => {
            // train the forecaster on the trace aggregated to scale-interval samples
            let k = (sim_cfg.scale_interval / sim_cfg.tick) as usize;
            let rates = trace.channel(0);
            let samples: Vec<f64> = rates
                .chunks(k)
                .filter(|c| c.len() == k)
                .map(|c| c.iter().sum::<f64>() / k as f64)
                .collect();
            let agg = TimeSeriesTrace::from_values(
                trace.timestamps[0],
                sim_cfg.scale_interval as i64,
                Tensor::new(samples.len(), 1, samples),
                vec!["qps".into()],
            )?;
            let state = pretrain(&agg, cfg)?;
            Some(EngineForecaster { state, ticks_per_sample: k })
        }
        None => None,
    };
    let provider = forecaster.as_mut().map(|f| f as &mut dyn crate::sim::ForecastProvider);
    let (report, log) = simulate(policy, &trace, &sim_cfg, provider)?;
    ensure_out(&a.out)?;
    write_json(&a.out.join("sim_report.json"), &report)?;
    fs::write(a.out.join("ticks.csv"), tick_log_csv(&log))?;
    write_manifest(
        &a.out,
        &Manifest {
            command: "simulate-hpa".into(),
            engine: engine_cfg,
            sim: Some(sim_cfg),
            policy: Some(policy),
            inputs: inputs_of(&[("trace", &a.trace)]),
        },
    )?;
    print_sim(&report);
    Ok(())
}

/// Rebuild a RegretLedger from its CSV export.
fn parse_regret_csv(text: &str) -> Result<RegretLedger> {
    let mut ledger = RegretLedger::default();
    for (i, line) in text.lines().enumerate().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            return Err(Error::MalformedValue { row: i, detail: "short regret row".into() });
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::MalformedValue { row: i, detail: format!("bad value '{s}'") })
        };
        let combined = parse(fields[1])?;
        let experts: Vec<f64> = fields[2..].iter().map(|f| parse(f)).collect::<Result<_>>()?;
        ledger.push(combined, &experts);
    }
    Ok(ledger)
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let dir = &a.out;
    let mut printed = false;
    let metrics_path = dir.join("metrics.json");
    if metrics_path.exists() {
        let m: MetricReport = serde_json::from_str(&fs::read_to_string(&metrics_path)?)
            .map_err(|e| Error::MalformedValue { row: 0, detail: format!("metrics.json: {e}") })?;
        print_metrics(&m);
        printed = true;
    }
    let regret_path = dir.join("regret.csv");
    let ledger = if regret_path.exists() {
        let ledger = parse_regret_csv(&fs::read_to_string(&regret_path)?)?;
        if ledger.steps() >= 2 {
            let r = ledger.report();
            println!(
                "regret={} best_expert={} slope={}",
                r.regret_curve.last().unwrap(),
                r.best_expert + 1,
                r.slope
            );
            printed = true;
        }
        Some(ledger)
    } else {
        None
    };
    let sim_path = dir.join("sim_report.json");
    if sim_path.exists() {
        let r: SimReport = serde_json::from_str(&fs::read_to_string(&sim_path)?)
            .map_err(|e| Error::MalformedValue { row: 0, detail: format!("sim_report.json: {e}") })?;
        print_sim(&r);
        printed = true;
    }
    if !printed {
        return Err(Error::EmptyTrace(format!("no run logs found in {}", dir.display())));
    }
    if a.emit_plot_data {
        emit_plot_data(dir, ledger.as_ref())?;
    }
    Ok(())
}

/// Plot series derived from the logs alone: forecast vs truth, ensemble
/// weight trajectories, and the regret curve.
fn emit_plot_data(dir: &Path, ledger: Option<&RegretLedger>) -> Result<()> {
    let forecasts = dir.join("forecasts.csv");
    if forecasts.exists() {
        fs::copy(&forecasts, dir.join("plot_forecast.csv"))?;
    }
    let steps = dir.join("steps.csv");
    if steps.exists() {
        let text = fs::read_to_string(&steps)?;
        let mut out = String::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            let Some(last) = fields.last() else { continue };
            let weights: Vec<&str> = last.split('|').collect();
            if weights.len() < 2 {
                continue; // selection index (FTPL), no trajectory to plot
            }
            if out.is_empty() {
                out.push_str("step");
                for j in 1..=weights.len() {
                    out.push_str(&format!(",w_{j}"));
                }
                out.push('\n');
            }
            out.push_str(&format!("{i}"));
            for w in &weights {
                out.push_str(&format!(",{w}"));
            }
            out.push('\n');
        }
        if !out.is_empty() {
            fs::write(dir.join("plot_weights.csv"), out)?;
        }
    }
    if let Some(ledger) = ledger {
        if ledger.steps() >= 2 {
            let r = ledger.report();
            let mut out = String::from("step,regret\n");
            for (i, v) in r.regret_curve.iter().enumerate() {
                out.push_str(&format!("{},{v}\n", i + 1));
            }
            fs::write(dir.join("plot_regret.csv"), out)?;
        }
    }
    Ok(())
}
