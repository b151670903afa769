//! All-in-one runs: the server on the calling thread, one thread per device,
//! connected over in-memory pipes or local TCP sockets.

use std::thread;
use std::time::Duration;

use xmk_core::fedavg::{synth_dataset, SynthConfig, SynthData};
use xmk_core::mkhe::Preset;
use xmk_core::{ModelLayout, ModelWeights, TrainingConfig};

use crate::device::{run_device, DeviceConfig, DeviceReport, Fault, DEFAULT_DEVICE_TIMEOUT};
use crate::framing::DEFAULT_MAX_FRAME;
use crate::message::TrainingParams;
use crate::server::{
    ProtocolError, Rejection, Server, ServerConfig, SessionReport, TranscriptEntry,
    DEFAULT_PHASE_TIMEOUT,
};
use crate::transport::{connect_tcp, Endpoint, Hub, Loopback, TcpAcceptor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Network {
    Loopback,
    Tcp,
}

#[derive(Debug, Clone)]
pub struct SimulationConfig {
    pub devices: usize,
    pub preset: Preset,
    pub rounds: u32,
    pub training: TrainingConfig,
    pub layout: ModelLayout,
    pub seed: u64,
    /// `num_devices` is overridden by `devices`.
    pub synth: SynthConfig,
    pub phase_timeout: Duration,
    pub device_timeout: Duration,
    pub network: Network,
    pub faults: Vec<(u32, Fault)>,
    pub max_frame: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            devices: 10,
            preset: Preset::Standard,
            rounds: 5,
            training: TrainingConfig::default(),
            layout: ModelLayout::DEFAULT,
            seed: 1,
            synth: SynthConfig::default(),
            phase_timeout: DEFAULT_PHASE_TIMEOUT,
            device_timeout: DEFAULT_DEVICE_TIMEOUT,
            network: Network::Loopback,
            faults: Vec::new(),
            max_frame: DEFAULT_MAX_FRAME,
        }
    }
}

impl SimulationConfig {
    pub fn dataset(&self) -> xmk_core::Result<SynthData> {
        synth_dataset(&SynthConfig {
            num_devices: self.devices,
            ..self.synth.clone()
        })
    }
}

#[derive(Debug)]
pub struct SimulationReport {
    pub session: Result<SessionReport, ProtocolError>,
    /// Indexed by device id minus one.
    pub devices: Vec<Result<DeviceReport, String>>,
    pub transcript: Vec<TranscriptEntry>,
    pub rejections: Vec<Rejection>,
    pub global: ModelWeights,
}

impl SimulationReport {
    /// Test accuracy after each completed round.
    pub fn accuracy(&self) -> Vec<(u32, f64)> {
        match &self.session {
            Ok(s) => s
                .outcomes
                .iter()
                .filter_map(|o| o.accuracy.map(|a| (o.round, a)))
                .collect(),
            Err(_) => Vec::new(),
        }
    }
}

pub fn run_simulation(cfg: &SimulationConfig) -> anyhow::Result<SimulationReport> {
    let data = cfg.dataset()?;
    let hub = Hub::new(cfg.max_frame);
    let handle = hub.handle();
    let mut server = Server::new(
        ServerConfig {
            devices: cfg.devices,
            preset: cfg.preset,
            rounds: cfg.rounds,
            training: TrainingParams::from_config(&cfg.training),
            layout: cfg.layout,
            seed: cfg.seed,
            phase_timeout: cfg.phase_timeout,
            test_set: Some(data.test.clone()),
        },
        hub,
    )?;

    let acceptor = match cfg.network {
        Network::Tcp => Some(TcpAcceptor::bind("127.0.0.1:0", handle.clone())?),
        Network::Loopback => None,
    };
    let loopback = Loopback::new(handle);
    let connect = |_: u32| -> std::io::Result<Endpoint> {
        match &acceptor {
            Some(a) => connect_tcp(a.local_addr(), cfg.max_frame),
            None => Ok(loopback.connect()),
        }
    };

    let mut workers = Vec::with_capacity(cfg.devices);
    for (i, local) in data.devices.iter().enumerate() {
        let id = i as u32 + 1;
        let ep = connect(id)?;
        let dev_cfg = DeviceConfig {
            requested_id: id,
            preset: cfg.preset,
            seed: cfg.seed,
            data: local.clone(),
            timeout: cfg.device_timeout,
            fault: cfg
                .faults
                .iter()
                .find(|(d, _)| *d == id)
                .map_or(Fault::None, |(_, f)| *f),
        };
        workers.push(thread::spawn(move || {
            run_device(dev_cfg, ep).map_err(|e| e.to_string())
        }));
    }

    let session = server.run();
    let transcript = server.transcript().to_vec();
    let rejections = server.rejections().to_vec();
    let global = server.global().clone();
    // closes every link so devices stuck on a failed session return
    drop(server);
    drop(acceptor);
    let devices = workers
        .into_iter()
        .map(|w| {
            w.join()
                .unwrap_or_else(|_| Err("device thread panicked".into()))
        })
        .collect();
    Ok(SimulationReport {
        session,
        devices,
        transcript,
        rejections,
        global,
    })
}
