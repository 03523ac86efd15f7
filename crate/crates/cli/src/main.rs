use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use sonarnet_core::bench::{bench_scene, run_benchmark, run_soak, SoakConfig};
use sonarnet_core::geometry::GridKind;
use sonarnet_core::nodes::{central_node_run, run_sensor, AppEvent, AppSubscriber, CentralConfig, CentralMode, SensorConfig};
use sonarnet_core::pipeline::{new_workspace, PipelineConfig, PipelineSettings};
use sonarnet_core::synth::{synthesize_measurement_with, Scene, SigmaDeltaOrder};
use sonarnet_core::wire::{decode_raw_measurement, encode_raw_measurement};
use sonarnet_core::{Error, Result};

#[derive(Parser)]
#[command(name = "sonarnet", version, about = "Synchronized in-air imaging sonar network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the central node (storage or processing).
    Central(CentralArgs),
    /// Run a sensor emulator streaming synthetic measurements.
    Sensor(SensorArgs),
    /// Subscribe to processed images and dump them to disk.
    App(AppArgs),
    /// Process one stored measurement into an image.
    Process(ProcessArgs),
    /// Synthesize one measurement from a scene file.
    Synth(SynthArgs),
    #[command(subcommand)]
    Bench(BenchCommand),
}

#[derive(Args)]
struct CentralArgs {
    #[arg(long, default_value = "processing")]
    mode: CentralMode,
    #[arg(long, default_value = "0.0.0.0")]
    host: String,
    #[arg(long, default_value_t = 7070)]
    port: u16,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    /// Pipeline configuration (JSON); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Storage directory (storage mode).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    queue: usize,
}

#[derive(Args)]
struct SensorArgs {
    #[arg(long)]
    serial: u32,
    #[arg(long)]
    central: String,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trigger rate in Hz.
    #[arg(long, default_value_t = 20.0)]
    rate: f64,
    /// Stop after this many measurements.
    #[arg(long)]
    count: Option<u64>,
    #[arg(long, default_value = "second")]
    modulator: String,
}

#[derive(Args)]
struct AppArgs {
    #[arg(long)]
    central: String,
    /// Comma-separated sensor serials; all sensors when omitted.
    #[arg(long, value_delimiter = ',')]
    serials: Vec<u32>,
    #[arg(long)]
    dump_dir: PathBuf,
    /// Also write a CSV export next to each image.
    #[arg(long)]
    csv: bool,
    /// Stop after this many images.
    #[arg(long)]
    count: Option<u64>,
}

#[derive(Args)]
struct ProcessArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    serial: u32,
    #[arg(long, default_value = "second")]
    modulator: String,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Time process() over the three direction grids.
    Pipeline {
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// Write the CSV report here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Subset of grids, comma-separated.
        #[arg(long, value_delimiter = ',')]
        grids: Vec<String>,
    },
    /// Loopback throughput and latency of the node stack.
    Soak {
        #[arg(long, default_value_t = 3)]
        sensors: usize,
        #[arg(long, default_value_t = 5.0)]
        rate: f64,
        /// Seconds.
        #[arg(long, default_value_t = 30.0)]
        duration: f64,
        #[arg(long, default_value_t = 4)]
        workers: usize,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineSettings::load(p),
        None => PipelineSettings::default().build(),
    }
}

fn load_settings(path: Option<&Path>) -> Result<PipelineSettings> {
    match path {
        Some(p) => PipelineSettings::from_json(&fs::read_to_string(p)?),
        None => Ok(PipelineSettings::default()),
    }
}

fn modulator(name: &str) -> Result<SigmaDeltaOrder> {
    match name {
        "first" => Ok(SigmaDeltaOrder::First),
        "second" => Ok(SigmaDeltaOrder::Second),
        other => Err(Error::Config(format!("unknown modulator {other:?} (first|second)"))),
    }
}

fn grid(name: &str) -> Result<GridKind> {
    GridKind::STANDARD
        .into_iter()
        .find(|k| k.name() == name)
        .ok_or_else(|| Error::Config(format!("unknown grid {name:?}")))
}

fn central(a: CentralArgs) -> Result<()> {
    let listen = format!("{}:{}", a.host, a.port);
    let mut cfg = match a.mode {
        CentralMode::Storage => {
            let dir = a.out.ok_or_else(|| Error::Config("storage mode needs --out DIR".into()))?;
            CentralConfig::storage(listen, dir)
        }
        CentralMode::Processing => {
            CentralConfig::processing(listen, Arc::new(load_config(a.config.as_deref())?), a.workers)
        }
    };
    cfg.input_capacity = a.queue;
    cfg.output_capacity = a.queue;
    central_node_run(cfg)
}

fn sensor(a: SensorArgs) -> Result<()> {
    let scene = Scene::load(&a.scene)?;
    let pipeline = Arc::new(load_config(a.config.as_deref())?);
    let mut cfg = SensorConfig::new(a.serial, a.central, scene, pipeline, a.rate);
    cfg.max_triggers = a.count;
    cfg.modulator = modulator(&a.modulator)?;
    let stats = run_sensor(&cfg, &AtomicBool::new(false))?;
    println!("{stats:?}");
    Ok(())
}

fn app(a: AppArgs) -> Result<()> {
    fs::create_dir_all(&a.dump_dir)?;
    let mut sub = AppSubscriber::connect(a.central, &a.serials)?;
    let mut images = 0u64;
    while a.count.is_none_or(|n| images < n) {
        match sub.next_event()? {
            Some(AppEvent::Image(d)) => {
                let stem = format!("{:08x}_{:012}", d.serial(), d.seq);
                fs::write(a.dump_dir.join(format!("{stem}.aimg")), d.image.encode())?;
                if a.csv {
                    d.image.write_csv(BufWriter::new(File::create(a.dump_dir.join(format!("{stem}.csv")))?))?;
                }
                images += 1;
                log::info!("image serial {} seq {}", d.serial(), d.seq);
            }
            Some(AppEvent::Gap { serial, first, last }) => {
                log::warn!("serial {serial}: missing seq {first}..={last}");
            }
            Some(AppEvent::Failed { serial, seq, message }) => {
                log::warn!("serial {serial} seq {seq}: {message}");
            }
            Some(AppEvent::Resubscribed) => log::info!("resubscribed"),
            None => {}
        }
    }
    Ok(())
}

fn process(a: ProcessArgs) -> Result<()> {
    let cfg = Arc::new(load_config(a.config.as_deref())?);
    let m = decode_raw_measurement(&fs::read(&a.input)?)?;
    let mut ws = new_workspace(cfg)?;
    let img = ws.process(&m)?;
    fs::write(&a.out, img.encode())?;
    if let Some(csv) = a.csv {
        img.write_csv(BufWriter::new(File::create(csv)?))?;
    }
    let (d, b) = img.argmax();
    println!(
        "peak {:.4e} at direction {d} range {:.3} m",
        img.peak(),
        img.range_for_bin(b)
    );
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let scene = Scene::load(&a.scene)?;
    let cfg = load_config(a.config.as_deref())?;
    let m = synthesize_measurement_with(&cfg, &scene, modulator(&a.modulator)?, a.serial, 0, 0)?;
    fs::write(&a.out, encode_raw_measurement(&m))?;
    Ok(())
}

fn bench(c: BenchCommand) -> Result<()> {
    match c {
        BenchCommand::Pipeline { n, out, grids } => {
            let kinds = if grids.is_empty() {
                GridKind::STANDARD.to_vec()
            } else {
                grids.iter().map(|g| grid(g)).collect::<Result<_>>()?
            };
            let report = run_benchmark(&kinds, n, &bench_scene())?;
            print!("{}", report.to_table());
            if let Some(path) = out {
                fs::write(path, report.to_csv())?;
            }
        }
        BenchCommand::Soak {
            sensors,
            rate,
            duration,
            workers,
            config,
        } => {
            if !(duration > 0.0 && duration.is_finite()) {
                return Err(Error::Config("duration must be positive".into()));
            }
            let mut cfg = SoakConfig::new(sensors, rate, Duration::from_secs_f64(duration), workers);
            cfg.pipeline = load_settings(config.as_deref())?;
            print!("{}", run_soak(&cfg)?.to_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SONARNET_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Central(a) => central(a),
        Command::Sensor(a) => sensor(a),
        Command::App(a) => app(a),
        Command::Process(a) => process(a),
        Command::Synth(a) => synth(a),
        Command::Bench(c) => bench(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
