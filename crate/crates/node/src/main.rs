use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use xmk_core::fedavg::SynthConfig;
use xmk_core::federation::Scheme;
use xmk_core::mkhe::Preset;
use xmk_core::{ModelLayout, Optimizer, TrainingConfig};
use xmk_node::bench::{self, AccuracyConfig, BenchConfig};
use xmk_node::config::NodeConfig;
use xmk_node::device::{run_device, DeviceConfig, Fault, DEFAULT_DEVICE_TIMEOUT};
use xmk_node::framing::DEFAULT_MAX_FRAME;
use xmk_node::message::TrainingParams;
use xmk_node::server::{Server, ServerConfig, DEFAULT_PHASE_TIMEOUT};
use xmk_node::sim::{run_simulation, Network, SimulationConfig};
use xmk_node::snapshot;
use xmk_node::transport::{connect_tcp, Hub, TcpAcceptor};

const DEFAULT_ADDR: &str = "127.0.0.1:7878";

#[derive(Parser)]
#[command(
    name = "xmk",
    version,
    about = "Federated averaging under additive multi-key CKKS"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the aggregation server.
    Server(ServerArgs),
    /// Run one device against a server.
    Device(DeviceArgs),
    /// Server and devices in one process.
    Simulate(SimulateArgs),
    /// Per-phase timings, or the accuracy comparison with --accuracy.
    Bench(BenchArgs),
    /// Serialized size of updates, sums and shares.
    Sizes(SizesArgs),
    /// Write each device's synthetic partition to a snapshot file.
    Data(DataArgs),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// key = value configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    devices: Option<usize>,
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long)]
    local_epochs: Option<usize>,
    /// Output CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServerArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    listen: Option<String>,
    /// Per-phase timeout.
    #[arg(long)]
    timeout_ms: Option<u64>,
}

#[derive(Args)]
struct DeviceArgs {
    #[command(flatten)]
    common: Common,
    /// Server address.
    #[arg(long)]
    server: Option<String>,
    /// Requested device id; 0 lets the server choose.
    #[arg(long)]
    id: Option<u32>,
    /// Dataset snapshot; defaults to this device's synthetic partition.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    timeout_ms: Option<u64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// Use local TCP sockets instead of in-memory pipes.
    #[arg(long)]
    tcp: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated weight counts.
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<usize>>,
    #[arg(long, default_value_t = bench::MIN_REPS)]
    reps: usize,
    /// Run the accuracy comparison instead of the timing sweep.
    #[arg(long)]
    accuracy: bool,
    #[arg(long, default_value_t = 5)]
    trials: usize,
}

#[derive(Args)]
struct SizesArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<usize>>,
}

#[derive(Args)]
struct DataArgs {
    #[command(flatten)]
    common: Common,
    /// Directory receiving `device-<id>.xmkd`.
    #[arg(long)]
    dir: PathBuf,
}

/// Flags merged over the optional config file.
struct Settings {
    file: NodeConfig,
    preset: Preset,
    seed: u64,
    devices: usize,
    rounds: u32,
    training: TrainingConfig,
}

impl Settings {
    fn new(c: &Common) -> Result<Self> {
        let file = match &c.config {
            Some(p) => NodeConfig::load(p)?,
            None => NodeConfig::default(),
        };
        let preset_name = c.preset.clone().or(file.preset.clone());
        let preset = Preset::from_name(preset_name.as_deref().unwrap_or("standard"))?;
        let mut training = TrainingConfig::default();
        if let Some(e) = c.local_epochs.or(file.local_epochs) {
            training.local_epochs = e;
        }
        if let Some(lr) = file.learning_rate {
            training.learning_rate = lr;
        }
        if let Some(b) = file.batch_size {
            training.batch_size = b;
        }
        if let Some(o) = &file.optimizer {
            training.optimizer = match o.as_str() {
                "sgd" => Optimizer::Sgd,
                "adam" => Optimizer::Adam,
                other => bail!("unknown optimizer {other:?}"),
            };
        }
        training.validate()?;
        Ok(Self {
            preset,
            seed: c.seed.or(file.seed).unwrap_or(1),
            devices: c.devices.or(file.devices).unwrap_or(10),
            rounds: c.rounds.or(file.rounds).unwrap_or(5),
            training,
            file,
        })
    }

    fn synth(&self) -> SynthConfig {
        SynthConfig {
            num_devices: self.devices,
            seed: self.seed,
            ..SynthConfig::default()
        }
    }

    fn timeout(&self, flag: Option<u64>, default: Duration) -> Duration {
        flag.or(self.file.timeout_ms)
            .map_or(default, Duration::from_millis)
    }

    fn max_frame(&self) -> usize {
        self.file.max_frame.unwrap_or(DEFAULT_MAX_FRAME)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_round_accuracy(path: &Path, scheme: Scheme, acc: &[(u32, f64)]) -> Result<()> {
    let records: Vec<_> = acc
        .iter()
        .map(|&(round, accuracy)| bench::AccuracyRecord {
            scheme,
            trial: 0,
            round,
            accuracy,
        })
        .collect();
    bench::write_accuracy_csv(create(path)?, &records)?;
    Ok(())
}

fn server(args: ServerArgs) -> Result<()> {
    let s = Settings::new(&args.common)?;
    let addr = args
        .listen
        .or(s.file.listen.clone())
        .unwrap_or_else(|| DEFAULT_ADDR.to_string());
    let data = xmk_core::fedavg::synth_dataset(&s.synth())?;
    let hub = Hub::new(s.max_frame());
    let acceptor = TcpAcceptor::bind(addr.as_str(), hub.handle())
        .with_context(|| format!("binding {addr}"))?;
    eprintln!(
        "listening on {} for {} devices",
        acceptor.local_addr(),
        s.devices
    );
    let mut server = Server::new(
        ServerConfig {
            devices: s.devices,
            preset: s.preset,
            rounds: s.rounds,
            training: TrainingParams::from_config(&s.training),
            layout: ModelLayout::DEFAULT,
            seed: s.seed,
            phase_timeout: s.timeout(args.timeout_ms, DEFAULT_PHASE_TIMEOUT),
            test_set: Some(data.test),
        },
        hub,
    )?;
    let report = server.run()?;
    let mut acc = Vec::new();
    for r in &report.rounds {
        match (&r.failure, r.accuracy) {
            (Some(why), _) => println!("round {}: failed: {why}", r.round),
            (None, Some(a)) => {
                println!("round {}: accuracy {a:.4}", r.round);
                acc.push((r.round, a));
            }
            (None, None) => println!("round {}: ok", r.round),
        }
    }
    if let Some(out) = &args.common.out {
        write_round_accuracy(out, Scheme::XmkCkks, &acc)?;
    }
    Ok(())
}

fn device(args: DeviceArgs) -> Result<()> {
    let s = Settings::new(&args.common)?;
    let id = args.id.or(s.file.device_id).unwrap_or(0);
    let addr = args
        .server
        .or(s.file.listen.clone())
        .unwrap_or_else(|| DEFAULT_ADDR.to_string());
    let data = match args.data.or(s.file.data.clone().map(PathBuf::from)) {
        Some(p) => {
            let mut f = File::open(&p).with_context(|| format!("opening {}", p.display()))?;
            snapshot::read_snapshot(&mut f).with_context(|| format!("reading {}", p.display()))?
        }
        None => {
            if id == 0 || id as usize > s.devices {
                bail!("--id between 1 and --devices is required without --data");
            }
            xmk_core::fedavg::synth_dataset(&s.synth())?
                .devices
                .swap_remove(id as usize - 1)
        }
    };
    let ep = connect_tcp(addr.as_str(), s.max_frame())
        .with_context(|| format!("connecting to {addr}"))?;
    let report = run_device(
        DeviceConfig {
            requested_id: id,
            preset: s.preset,
            seed: s.seed,
            data,
            timeout: s.timeout(args.timeout_ms, DEFAULT_DEVICE_TIMEOUT),
            fault: Fault::None,
        },
        ep,
    )?;
    println!(
        "device {}: {} rounds completed, {} failed",
        report.id,
        report.completed.len(),
        report.failed.len()
    );
    for (round, why) in &report.failed {
        println!("round {round}: failed: {why}");
    }
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let s = Settings::new(&args.common)?;
    let report = run_simulation(&SimulationConfig {
        devices: s.devices,
        preset: s.preset,
        rounds: s.rounds,
        training: s.training,
        seed: s.seed,
        synth: s.synth(),
        max_frame: s.max_frame(),
        network: if args.tcp {
            Network::Tcp
        } else {
            Network::Loopback
        },
        phase_timeout: s.timeout(None, DEFAULT_PHASE_TIMEOUT),
        ..SimulationConfig::default()
    })?;
    let session = report
        .session
        .as_ref()
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    for r in &session.rounds {
        match (&r.failure, r.accuracy) {
            (Some(why), _) => println!("round {}: failed: {why}", r.round),
            (_, a) => println!("round {}: accuracy {:.4}", r.round, a.unwrap_or(f64::NAN)),
        }
    }
    for (i, d) in report.devices.iter().enumerate() {
        if let Err(e) = d {
            bail!("device {}: {e}", i + 1);
        }
    }
    if let Some(out) = &args.common.out {
        write_round_accuracy(out, Scheme::XmkCkks, &report.accuracy())?;
    }
    Ok(())
}

fn bench_cmd(args: BenchArgs) -> Result<()> {
    let s = Settings::new(&args.common)?;
    if args.accuracy {
        let report = bench::run_accuracy_comparison(&AccuracyConfig {
            preset: s.preset,
            devices: s.devices,
            rounds: s.rounds,
            training: s.training,
            trials: args.trials,
            seed: s.seed,
            ..AccuracyConfig::default()
        })?;
        for sum in &report.summaries {
            println!(
                "{:8} final accuracy {:.4} ± {:.4} over {} trials, {} invalid, rounds to 0.9: {:.1}",
                sum.scheme.name(),
                sum.final_mean,
                sum.final_std,
                sum.valid_trials,
                sum.invalid_trials.len(),
                sum.rounds_to_threshold
            );
        }
        match &args.common.out {
            Some(p) => bench::write_accuracy_csv(create(p)?, &report.records)?,
            None => bench::write_accuracy_csv(io::stdout().lock(), &report.records)?,
        }
        return Ok(());
    }
    let cfg = BenchConfig {
        preset: s.preset,
        devices: s.devices,
        reps: args.reps,
        weight_counts: args
            .weights
            .unwrap_or_else(|| bench::DEFAULT_WEIGHT_COUNTS.to_vec()),
        seed: s.seed,
        ..BenchConfig::default()
    };
    let records = bench::run_bench(&cfg, |r| {
        eprintln!(
            "{:8} {:10} {:>7} rep {} {:>10.3} ms",
            r.scheme.name(),
            r.phase.name(),
            r.weight_count,
            r.rep,
            r.wall_time_ms
        )
    })?;
    match &args.common.out {
        Some(p) => bench::write_bench_csv(create(p)?, &records)?,
        None => bench::write_bench_csv(io::stdout().lock(), &records)?,
    }
    Ok(())
}

fn sizes(args: SizesArgs) -> Result<()> {
    let s = Settings::new(&args.common)?;
    let counts = args
        .weights
        .unwrap_or_else(|| vec![ModelLayout::DEFAULT.param_count()]);
    let mut rows = Vec::new();
    for w in counts {
        rows.push(bench::measure_sizes(s.preset, s.devices, w)?);
    }
    let mut out: Box<dyn Write> = match &args.common.out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    let mut csv = csv::Writer::from_writer(&mut out);
    csv.write_record([
        "object",
        "devices",
        "weight_count",
        "chunks",
        "elements_per_chunk",
        "computed_bytes",
        "measured_bytes",
    ])?;
    for r in &rows {
        for (name, e) in r.entries() {
            csv.write_record([
                name.to_string(),
                r.devices.to_string(),
                r.weight_count.to_string(),
                r.chunks.to_string(),
                e.elements_per_chunk.to_string(),
                e.computed_bytes.to_string(),
                e.measured_bytes.to_string(),
            ])?;
        }
    }
    csv.flush()?;
    Ok(())
}

fn data(args: DataArgs) -> Result<()> {
    let s = Settings::new(&args.common)?;
    let data = xmk_core::fedavg::synth_dataset(&s.synth())?;
    std::fs::create_dir_all(&args.dir)?;
    for (i, d) in data.devices.iter().enumerate() {
        let path = args.dir.join(format!("device-{}.xmkd", i + 1));
        let mut w = create(&path)?;
        snapshot::write_snapshot(&mut w, d)?;
        w.flush()?;
    }
    println!(
        "wrote {} snapshots to {}",
        data.devices.len(),
        args.dir.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Server(a) => server(a),
        Command::Device(a) => device(a),
        Command::Simulate(a) => simulate(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Sizes(a) => sizes(a),
        Command::Data(a) => data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
