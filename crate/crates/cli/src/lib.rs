//! Command-line front end: waveform generation, offline decoding, rate
//! budgets, scenario checks and the network service.
//!
//! Every command returns a JSON report; `main` prints it and maps errors to
//! a nonzero exit status.

use std::cell::Cell;
use std::fs::{self, File};
use std::io::BufWriter;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crankhil_core::ecu::{Bench, EcuConfig};
use crankhil_core::fault::parse_scenario_with_seed;
use crankhil_core::runtime::stream::Streamer;
use crankhil_core::runtime::{max_rpm, ClockMode, FrameBatch, PlatformLimit, RunConfig, Simulator};
use crankhil_core::sensor::{SensorId, SensorTable};
use crankhil_core::signal::EngineGeometry;
use crankhil_core::wavefile::{
    export_len, export_waveform, read_run_path, write_tables, BinRunWriter, CsvRunWriter, FileFormat, FrameSink,
};
use crankhil_service::{Service, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "crankhil", version, about = "Software HiL rig for engine ECU crank/cam testing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a waveform file from the simulator.
    Gen(GenArgs),
    /// Run a waveform file through the virtual ECU and report diagnostics.
    Decode(DecodeArgs),
    /// Highest representable rpm for one or more sample rates.
    Maxrpm(MaxRpmArgs),
    /// Serve the control and telemetry interface over HTTP/WebSocket.
    Serve(ServeArgs),
    /// Parse and validate a scenario file.
    ScenarioCheck(ScenarioCheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// As fast as possible, deterministic.
    Sim,
    /// Paced against the wall clock.
    Rt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Bin,
}

impl From<Format> for FileFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => FileFormat::Csv,
            Format::Bin => FileFormat::Bin,
        }
    }
}

/// Flags shared by everything that builds a simulator.
#[derive(Debug, Clone, Args)]
pub struct RigArgs {
    /// Output sample rate, Hz.
    #[arg(long, default_value_t = 48_000.0)]
    pub rate: f64,
    /// Engine speed, rpm.
    #[arg(long, default_value_t = 2000.0)]
    pub rpm: f64,
    /// Scenario file with faults applied from the start.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Emulated platform sampling ceiling, Hz.
    #[arg(long = "platform-limit", value_name = "HZ")]
    pub platform_limit: Option<f64>,
    /// Seed for noise faults that do not name one.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sensor lookup table, as `<sensor>=<csv path>`. Repeatable.
    #[arg(long = "sensor-table", value_name = "ID=PATH")]
    pub sensor_tables: Vec<String>,
    /// Minimum output samples per tooth.
    #[arg(long = "min-samples", default_value_t = 4)]
    pub min_samples: u32,
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub rig: RigArgs,
    /// Seconds of signal.
    #[arg(long, default_value_t = 1.0)]
    pub duration: f64,
    #[arg(long, value_enum, default_value_t = Mode::Sim)]
    pub mode: Mode,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Also write the (faulted) 720° crank and cam tables here.
    #[arg(long = "table-out")]
    pub table_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct DecodeArgs {
    /// Waveform file, CSV or raw binary.
    pub input: PathBuf,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Samples per frame fed to the ECU; defaults to 10 ms of signal.
    #[arg(long = "frame-size")]
    pub frame_size: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct MaxRpmArgs {
    /// Sample rate, Hz. Repeatable.
    #[arg(long, required = true)]
    pub rate: Vec<f64>,
    #[arg(long = "min-samples", default_value_t = 4)]
    pub min_samples: u32,
    #[arg(long, default_value_t = 60)]
    pub teeth: u32,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub rig: RigArgs,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    /// Frame summaries per second sent to subscribers.
    #[arg(long = "display-hz", default_value_t = 20.0)]
    pub display_hz: f64,
}

#[derive(Debug, Clone, Args)]
pub struct ScenarioCheckArgs {
    pub scenario: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Runs one command to completion and returns its report.
pub fn run(cli: Cli) -> Result<Value> {
    match cli.command {
        Command::Gen(a) => gen(&a),
        Command::Decode(a) => decode(&a),
        Command::Maxrpm(a) => maxrpm(&a),
        Command::Serve(a) => serve(&a),
        Command::ScenarioCheck(a) => scenario_check(&a),
    }
}

fn parse_sensor_table(spec: &str) -> Result<SensorTable> {
    let (id, path) = spec
        .split_once('=')
        .with_context(|| format!("--sensor-table expects <sensor>=<path>, got {spec:?}"))?;
    let sensor: SensorId = id.parse()?;
    let text = fs::read_to_string(path).with_context(|| format!("reading sensor table {path}"))?;
    SensorTable::from_csv(sensor, &text).with_context(|| format!("sensor table {path}"))
}

/// Builds a stopped simulator with scenario faults staged and sensor tables
/// loaded. Every flag is checked here, before any output is produced.
pub fn build_simulator(rig: &RigArgs, mode: ClockMode) -> Result<Simulator> {
    let config = RunConfig {
        sample_rate: rig.rate,
        mode,
        platform_limit: rig.platform_limit.map(|max_sample_rate| PlatformLimit { max_sample_rate }),
        frame_size: ((rig.rate / 100.0).round() as usize).max(1),
        samples_per_tooth_min: rig.min_samples,
        initial_rpm: rig.rpm,
        ..Default::default()
    };
    let mut sim = Simulator::new(config, EngineGeometry::default())?;
    if let Some(path) = &rig.scenario {
        let text = fs::read_to_string(path).with_context(|| format!("reading scenario {}", path.display()))?;
        let script = parse_scenario_with_seed(&text, sim.geometry(), rig.seed)
            .with_context(|| format!("scenario {}", path.display()))?;
        sim.load_scenario(&script)?;
    }
    for spec in &rig.sensor_tables {
        sim.load_sensor_table(parse_sensor_table(spec)?);
    }
    Ok(sim)
}

fn rig_report(sim: &Simulator, rig: &RigArgs) -> Value {
    let cfg = sim.config();
    json!({
        "sample_rate": cfg.sample_rate,
        "rpm": rig.rpm,
        "seed": rig.seed,
        "samples_per_tooth_min": cfg.samples_per_tooth_min,
        "platform_limit_hz": rig.platform_limit,
        "rpm_ceiling": cfg.rpm_ceiling(sim.geometry().crank.teeth_per_rev),
        "scenario": rig.scenario,
        "sensor_tables": rig.sensor_tables,
    })
}

fn open_sink(format: Format, path: &Path) -> Result<Box<dyn FrameSink>> {
    let file = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    Ok(match format {
        Format::Csv => Box::new(CsvRunWriter::new(file)),
        Format::Bin => Box::new(BinRunWriter::new(file)),
    })
}

/// First `n` samples of `frame`.
fn truncated(frame: &FrameBatch, n: usize) -> FrameBatch {
    let mut f = frame.clone();
    f.angle_deg.truncate(n);
    f.crank.truncate(n);
    f.cam.truncate(n);
    for ch in &mut f.sensors {
        ch.truncate(n);
    }
    f
}

pub fn gen(args: &GenArgs) -> Result<Value> {
    if !(args.duration > 0.0 && args.duration.is_finite()) {
        bail!("--duration must be > 0, got {}", args.duration);
    }
    let mode = match args.mode {
        Mode::Sim => ClockMode::SimulatedTime,
        Mode::Rt => ClockMode::WallClock,
    };
    let mut sim = build_simulator(&args.rig, mode)?;
    let config = rig_report(&sim, &args.rig);
    sim.start()?;
    if let Some(path) = &args.table_out {
        write_tables(sim.tables(), args.format.into(), path)
            .with_context(|| format!("writing tables to {}", path.display()))?;
    }
    let active: Vec<Value> = sim.ledger().active.iter().map(|e| json!(e.fault)).collect();
    let mut sink = open_sink(args.format, &args.out)?;
    let (samples, frames, pace) = match args.mode {
        Mode::Sim => {
            let s = export_waveform(&mut sim, args.duration, sink.as_mut())?;
            (s.samples, s.frames, Value::Null)
        }
        Mode::Rt => {
            let total = export_len(args.duration, sim.config().sample_rate);
            let mut streamer = Streamer::spawn(sim, 8)?;
            streamer.prefill(4, Duration::from_secs(5));
            let written = Cell::new(0u64);
            let mut frames = 0u64;
            let mut failure = None;
            let report = streamer.pace_while(
                || written.get() < total,
                |frame| {
                    if failure.is_some() {
                        return;
                    }
                    let n = (frame.len() as u64).min(total - written.get()) as usize;
                    let result = if n == frame.len() {
                        sink.write_frame(frame)
                    } else {
                        sink.write_frame(&truncated(frame, n))
                    };
                    match result {
                        Ok(()) => {
                            written.set(written.get() + n as u64);
                            frames += 1;
                        }
                        Err(e) => failure = Some(e),
                    }
                },
            );
            streamer.stop();
            if let Some(e) = failure {
                return Err(e.into());
            }
            sink.finish()?;
            (written.get(), frames, json!(report))
        }
    };
    Ok(json!({
        "command": "gen",
        "out": args.out,
        "format": FileFormat::from(args.format),
        "mode": match args.mode { Mode::Sim => "sim", Mode::Rt => "rt" },
        "duration_s": args.duration,
        "samples": samples,
        "frames": frames,
        "config": config,
        "active_faults": active,
        "tables_out": args.table_out,
        "pace": pace,
    }))
}

pub fn decode(args: &DecodeArgs) -> Result<Value> {
    let rec = read_run_path(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    if rec.is_empty() {
        bail!("{} holds no samples", args.input.display());
    }
    let frame_size = args
        .frame_size
        .unwrap_or(((rec.sample_rate / 100.0).round() as usize).max(1));
    let mut bench = Bench::new(EcuConfig::default())?;
    for frame in rec.frames(frame_size) {
        bench.feed(&frame)?;
    }
    let report = serde_json::to_value(bench.report())?;
    if let Some(path) = &args.out {
        fs::write(path, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(json!({ "command": "decode", "input": args.input, "report": report }))
}

pub fn maxrpm(args: &MaxRpmArgs) -> Result<Value> {
    if args.min_samples == 0 {
        bail!("--min-samples must be >= 1");
    }
    if args.teeth < 4 {
        bail!("--teeth must be >= 4, got {}", args.teeth);
    }
    if let Some(bad) = args.rate.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
        bail!("--rate must be > 0, got {bad}");
    }
    let rows: Vec<Value> = args
        .rate
        .iter()
        .map(|&rate| json!({ "rate_hz": rate, "max_rpm": max_rpm(rate, args.min_samples, args.teeth) }))
        .collect();
    Ok(json!({
        "command": "maxrpm",
        "samples_per_tooth_min": args.min_samples,
        "teeth_per_rev": args.teeth,
        "ceilings": rows,
    }))
}

pub fn scenario_check(args: &ScenarioCheckArgs) -> Result<Value> {
    let text = fs::read_to_string(&args.scenario)
        .with_context(|| format!("reading scenario {}", args.scenario.display()))?;
    let script = parse_scenario_with_seed(&text, &EngineGeometry::default(), args.seed)
        .with_context(|| format!("scenario {}", args.scenario.display()))?;
    let faults: Vec<Value> = script.faults.iter().map(|f| json!(f)).collect();
    Ok(json!({
        "command": "scenario-check",
        "scenario": args.scenario,
        "valid": true,
        "version": script.version,
        "faults": faults,
    }))
}

/// Serves until interrupted. The rig always runs against the wall clock.
pub fn serve(args: &ServeArgs) -> Result<Value> {
    let sim = build_simulator(&args.rig, ClockMode::WallClock)?;
    let mut config = ServiceConfig::new(sim)?;
    config.display_hz = args.display_hz;
    config.default_seed = args.rig.seed;
    let service = Service::start(config)?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(args.bind)
            .await
            .with_context(|| format!("binding {}", args.bind))?;
        let local = listener.local_addr()?;
        println!("{}", json!({ "command": "serve", "listening": local.to_string() }));
        tokio::select! {
            served = service.serve(listener) => served?,
            _ = tokio::signal::ctrl_c() => {}
        }
        Ok::<_, anyhow::Error>(json!({ "command": "serve", "listening": local.to_string(), "stopped": true }))
    })
}
