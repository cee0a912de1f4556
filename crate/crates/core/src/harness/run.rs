use serde::{Deserialize, Serialize};

use super::metrics::{cumulative, per_user_ser, ser};
use super::record::{config_hash, ExperimentRecord, ExperimentRun};
use super::TransmissionBlock;
use crate::attack::{self, AttackConfig};
use crate::channel::{Channel, ChannelConfig};
use crate::error::{Error, Result};
use crate::modem::SymbolLabel;
use crate::receivers::{Detector, DetectorKind, Dims, RES_BLOCKS};
use crate::seeds::{self, SimRng};
use crate::training::{self, JointConfig, OnlineConfig, PilotBuffer, PilotSet};

/// The four receivers compared in an experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReceiverKind {
    DeepSic,
    MetaDeepSic,
    BlackBoxMlp,
    ResidualConv,
}

impl ReceiverKind {
    pub const ALL: [ReceiverKind; 4] = [
        ReceiverKind::DeepSic,
        ReceiverKind::MetaDeepSic,
        ReceiverKind::BlackBoxMlp,
        ReceiverKind::ResidualConv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ReceiverKind::DeepSic => "deep_sic",
            ReceiverKind::MetaDeepSic => "meta_deep_sic",
            ReceiverKind::BlackBoxMlp => "black_box_mlp",
            ReceiverKind::ResidualConv => "residual_conv",
        }
    }

    /// Human-readable label for plots.
    pub fn label(self) -> &'static str {
        match self {
            ReceiverKind::DeepSic => "DeepSIC",
            ReceiverKind::MetaDeepSic => "Meta-DeepSIC",
            ReceiverKind::BlackBoxMlp => "Black-box DNN",
            ReceiverKind::ResidualConv => "ResNet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::config(
                    "receivers",
                    format!(
                        "unknown receiver `{s}` (expected one of {})",
                        Self::ALL.map(ReceiverKind::name).join(", ")
                    ),
                )
            })
    }

    pub fn detector(self) -> DetectorKind {
        match self {
            ReceiverKind::DeepSic | ReceiverKind::MetaDeepSic => DetectorKind::DeepSic,
            ReceiverKind::BlackBoxMlp => DetectorKind::BlackBoxMlp,
            ReceiverKind::ResidualConv => DetectorKind::ResidualConv,
        }
    }
}

/// Everything needed to reproduce one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub channel: ChannelConfig,
    pub receivers: Vec<ReceiverKind>,
    pub blocks: usize,
    pub reps: usize,
    pub l_pilot: usize,
    pub l_info: usize,
    pub seed: u64,
    pub resnet_channels: usize,
    pub online: OnlineConfig,
    pub joint: JointConfig,
    /// When present, every receiver runs a clean and a poisoned arm.
    pub attack: Option<AttackConfig>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.channel.validate()?;
        self.online.validate()?;
        if let Some(a) = &self.attack {
            a.validate()?;
            self.joint.validate()?;
        }
        if self.receivers.is_empty() {
            return Err(Error::config("receivers", "at least one receiver is required"));
        }
        if self.blocks == 0 {
            return Err(Error::config("blocks", "must be positive"));
        }
        if self.reps == 0 {
            return Err(Error::config("reps", "must be positive"));
        }
        if self.l_pilot < 2 {
            return Err(Error::config("l_pilot", "need at least two pilots"));
        }
        if self.l_info == 0 {
            return Err(Error::config("l_info", "must be positive"));
        }
        if self.resnet_channels == 0 {
            return Err(Error::config("resnet_channels", "must be positive"));
        }
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        Dims {
            n_tx: self.channel.n_tx,
            n_rx: self.channel.n_rx,
        }
    }

    /// Seed of repetition `rep`; every stream of that repetition derives
    /// from it.
    pub fn rep_seed(&self, rep: usize) -> u64 {
        seeds::derive_seed(self.seed, "rep", rep as u64)
    }
}

/// A receiver as seen by the experiment loop.
pub trait Receiver {
    /// Trains on the (possibly poisoned) pilots of the current block.
    fn adapt(&mut self, pilots: &PilotSet, rng: &mut SimRng) -> Result<()>;
    /// Hard decisions for the block's information symbols.
    fn decode(&mut self, block: &TransmissionBlock) -> Result<Vec<SymbolLabel>>;
}

/// A detector trained online, or with meta-learning over a pilot window.
pub struct DetectorReceiver {
    pub detector: Detector,
    pub online: OnlineConfig,
    pub buffer: Option<PilotBuffer>,
}

impl DetectorReceiver {
    pub fn new(kind: ReceiverKind, cfg: &ExperimentConfig, rng: &mut SimRng) -> Self {
        let detector = match kind.detector() {
            DetectorKind::ResidualConv => {
                Detector::residual(cfg.dims(), cfg.resnet_channels, RES_BLOCKS, rng)
            }
            other => Detector::new(other, cfg.dims(), rng),
        };
        let buffer = (kind == ReceiverKind::MetaDeepSic)
            .then(|| PilotBuffer::new(cfg.online.meta_window));
        DetectorReceiver {
            detector,
            online: cfg.online.clone(),
            buffer,
        }
    }
}

impl Receiver for DetectorReceiver {
    fn adapt(&mut self, pilots: &PilotSet, rng: &mut SimRng) -> Result<()> {
        match &mut self.buffer {
            Some(buffer) => {
                training::meta_adapt(&mut self.detector, buffer, pilots, &self.online, rng)?;
                buffer.push(pilots.clone());
            }
            None => {
                training::online_adapt(&mut self.detector, pilots, &self.online)?;
            }
        }
        Ok(())
    }

    fn decode(&mut self, block: &TransmissionBlock) -> Result<Vec<SymbolLabel>> {
        self.detector.decode(&block.info_rx)
    }
}

/// Progress notifications from a running experiment.
#[derive(Clone, Debug)]
pub enum Progress<'a> {
    SurrogateTrained { rep: usize, final_loss: f64 },
    Block {
        rep: usize,
        block: usize,
        receiver: ReceiverKind,
        poisoned: bool,
        ser: f64,
    },
    Aborted(&'a str),
}

/// Runs the experiment with the standard detector receivers.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    run_experiment_with(
        cfg,
        &mut |kind, cfg, rng| Ok(Box::new(DetectorReceiver::new(kind, cfg, rng))),
        &mut |_| {},
    )
}

type Factory<'f> =
    dyn FnMut(ReceiverKind, &ExperimentConfig, &mut SimRng) -> Result<Box<dyn Receiver>> + 'f;

struct Arm {
    receiver: ReceiverKind,
    poisoned: bool,
    rx: Box<dyn Receiver>,
    ser: Vec<f64>,
    per_user: Vec<Vec<f64>>,
}

/// Runs the experiment with receivers built by `factory`.
///
/// Every repetition is fully reseeded: channel phases, surrogate, receiver
/// initializations, block data and poison all derive from the repetition
/// seed. Clean and poisoned arms of a receiver share the initialization and
/// every block's data; only the pilot features differ. If training fails,
/// the blocks completed so far are kept and the run is flagged as aborted.
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    factory: &mut Factory<'_>,
    observe: &mut dyn FnMut(Progress<'_>),
) -> Result<ExperimentRun> {
    cfg.validate()?;
    let hash = config_hash(cfg)?;
    let mut records = Vec::new();
    let mut aborted = None;
    for rep in 0..cfg.reps {
        let rep_seed = cfg.rep_seed(rep);
        let mut arms = Vec::new();
        let outcome = run_rep(cfg, rep, rep_seed, factory, observe, &mut arms);
        for arm in arms {
            records.push(ExperimentRecord {
                receiver: arm.receiver,
                channel: cfg.channel.kind,
                snr_db: cfg.channel.snr_db,
                poisoned: arm.poisoned,
                rep: Some(rep),
                seed: rep_seed,
                config_hash: hash.clone(),
                ser_cum: cumulative(&arm.ser),
                ser_block: arm.ser,
                per_user_ser: arm.per_user,
            });
        }
        if let Err(e) = outcome {
            let msg = format!("repetition {rep}: {e}");
            observe(Progress::Aborted(&msg));
            aborted = Some(msg);
            break;
        }
    }
    Ok(ExperimentRun {
        config: cfg.clone(),
        config_hash: hash,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        records,
        aborted,
    })
}

fn run_rep(
    cfg: &ExperimentConfig,
    rep: usize,
    rep_seed: u64,
    factory: &mut Factory<'_>,
    observe: &mut dyn FnMut(Progress<'_>),
    arms: &mut Vec<Arm>,
) -> Result<()> {
    let mut channel_cfg = cfg.channel.clone();
    channel_cfg.seed = seeds::derive_seed(rep_seed, "channel", 0);
    let channel = Channel::new(channel_cfg.clone())?;

    let surrogate = match &cfg.attack {
        Some(_) => {
            let s = training::joint_train(
                &channel_cfg,
                &cfg.joint,
                seeds::derive_seed(rep_seed, "surrogate", 0),
            )?;
            observe(Progress::SurrogateTrained {
                rep,
                final_loss: s.epoch_losses.last().copied().unwrap_or(f64::NAN),
            });
            Some(s.detector)
        }
        None => None,
    };

    let arms_per_receiver: &[bool] = if cfg.attack.is_some() {
        &[false, true]
    } else {
        &[false]
    };
    for &receiver in &cfg.receivers {
        for &poisoned in arms_per_receiver {
            // same initial weights for both arms
            let mut rng = seeds::stream(rep_seed, &format!("init-{}", receiver.name()), 0);
            arms.push(Arm {
                receiver,
                poisoned,
                rx: factory(receiver, cfg, &mut rng)?,
                ser: Vec::with_capacity(cfg.blocks),
                per_user: Vec::with_capacity(cfg.blocks),
            });
        }
    }

    for b in 0..cfg.blocks {
        let mut block_rng = seeds::stream(rep_seed, "block", b as u64);
        let block = channel.generate_block(b, cfg.l_pilot, cfg.l_info, &mut block_rng)?;
        let clean = PilotSet::from_block(&block);
        let poisoned = match (&cfg.attack, &surrogate) {
            (Some(a), Some(s)) if a.poisons_block(b) => {
                let mut rng = seeds::stream(rep_seed, "attack", b as u64);
                let poison =
                    attack::pgd_poison(s, &block.pilot_rx, &block.pilot_labels, a, &mut rng)?;
                PilotSet::from_block(&attack::inject(&block, &poison)?)
            }
            _ => clean.clone(),
        };
        for arm in arms.iter_mut() {
            let pilots = if arm.poisoned { &poisoned } else { &clean };
            let mut rng =
                seeds::stream(rep_seed, &format!("adapt-{}", arm.receiver.name()), b as u64);
            arm.rx.adapt(pilots, &mut rng).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!(
                    "{} ({}) at block {b}: {msg}",
                    arm.receiver.name(),
                    if arm.poisoned { "poisoned" } else { "clean" }
                )),
                other => other,
            })?;
            let decisions = arm.rx.decode(&block)?;
            let s = ser(&decisions, &block.info_labels)?;
            arm.ser.push(s);
            arm.per_user.push(per_user_ser(&decisions, &block.info_labels)?);
            observe(Progress::Block {
                rep,
                block: b,
                receiver: arm.receiver,
                poisoned: arm.poisoned,
                ser: s,
            });
        }
    }
    Ok(())
}
