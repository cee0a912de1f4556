use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::channel::{ChannelConfig, ChannelKind};
use crate::error::{Error, Result};
use crate::harness::{ExperimentConfig, ReceiverKind};
use crate::training::{JointConfig, OnlineConfig};

/// Bundled experiment files, by name.
pub const PRESETS: [(&str, &str); 5] = [
    ("fig10", include_str!("../../presets/fig10.toml")),
    ("fig11", include_str!("../../presets/fig11.toml")),
    ("fig12", include_str!("../../presets/fig12.toml")),
    ("fig13", include_str!("../../presets/fig13.toml")),
    ("fig14", include_str!("../../presets/fig14.toml")),
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    #[default]
    Desk,
    Full,
}

impl Scale {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "full" => Ok(Scale::Full),
            other => Err(Error::config("scale", format!("`{other}` is not desk or full"))),
        }
    }
}

/// Size-dependent settings; a preset carries one set per scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleSettings {
    pub blocks: usize,
    pub reps: usize,
    pub l_info: usize,
    /// Online epochs per block; overrides `online.epochs`.
    pub epochs: usize,
    pub resnet_channels: usize,
    /// Surrogate epochs; overrides `joint.epochs`.
    pub joint_epochs: usize,
    pub snr_db: Vec<f64>,
}

impl ScaleSettings {
    pub fn desk() -> Self {
        ScaleSettings {
            blocks: 30,
            reps: 3,
            l_info: 5000,
            epochs: 20,
            resnet_channels: 16,
            joint_epochs: 10,
            snr_db: vec![14.0],
        }
    }

    pub fn full() -> Self {
        ScaleSettings {
            blocks: 100,
            reps: 5,
            l_info: 50_000,
            epochs: 300,
            resnet_channels: 32,
            joint_epochs: 300,
            snr_db: vec![10.0, 11.0, 12.0, 13.0, 14.0, 15.0],
        }
    }
}

fn default_k() -> f64 {
    0.5
}

fn four() -> usize {
    4
}

fn default_pilots() -> Vec<usize> {
    vec![200]
}

fn yes() -> bool {
    true
}

/// Channel section of a preset; the SNR comes from the scale settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    pub kind: ChannelKind,
    #[serde(default = "default_k")]
    pub k: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tap_file: Option<PathBuf>,
    #[serde(default = "four")]
    pub n_tx: usize,
    #[serde(default = "four")]
    pub n_rx: usize,
}

/// One experiment file: a figure's worth of runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preset {
    pub name: String,
    #[serde(default)]
    pub title: String,
    pub receivers: Vec<ReceiverKind>,
    #[serde(default = "default_pilots")]
    pub pilot_sizes: Vec<usize>,
    /// Run a poisoned arm next to every clean one.
    #[serde(default = "yes")]
    pub attack: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub scale: Scale,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub channel: ChannelSpec,
    #[serde(default = "ScaleSettings::desk")]
    pub desk: ScaleSettings,
    #[serde(default = "ScaleSettings::full")]
    pub full: ScaleSettings,
    #[serde(default)]
    pub online: OnlineConfig,
    /// Attack parameters, used when `attack` is on.
    #[serde(default)]
    pub pgd: AttackConfig,
    #[serde(default)]
    pub joint: JointConfig,
}

impl Preset {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let preset: Preset = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].lines().count().max(1))
                .unwrap_or(0);
            Error::Parse {
                line,
                msg: format!("{origin}: {}", e.message().trim()),
            }
        })?;
        preset.validate()?;
        Ok(preset)
    }

    pub fn bundled(name: &str) -> Option<Result<Self>> {
        PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(n, text)| Preset::parse(text, n))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Preset::parse(&std::fs::read_to_string(path)?, &path.display().to_string())
    }

    pub fn settings(&self) -> &ScaleSettings {
        match self.scale {
            Scale::Desk => &self.desk,
            Scale::Full => &self.full,
        }
    }

    pub fn settings_mut(&mut self) -> &mut ScaleSettings {
        match self.scale {
            Scale::Desk => &mut self.desk,
            Scale::Full => &mut self.full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(Error::config("name", "use letters, digits, `_` or `-`"));
        }
        if self.pilot_sizes.is_empty() {
            return Err(Error::config("pilot_sizes", "must not be empty"));
        }
        for (label, s) in [("desk", &self.desk), ("full", &self.full)] {
            if s.snr_db.is_empty() {
                return Err(Error::config(format!("{label}.snr_db"), "must not be empty"));
            }
            if s.epochs == 0 {
                return Err(Error::config(format!("{label}.epochs"), "must be positive"));
            }
        }
        for cfg in self.resolve()? {
            cfg.validate()?;
        }
        Ok(())
    }

    /// One experiment per (SNR, pilot size) of the selected scale.
    pub fn resolve(&self) -> Result<Vec<ExperimentConfig>> {
        let s = self.settings();
        let mut out = Vec::new();
        for &snr in &s.snr_db {
            for &l_pilot in &self.pilot_sizes {
                let channel = ChannelConfig {
                    kind: self.channel.kind,
                    snr_db: snr,
                    k: self.channel.k,
                    tap_file: self.channel.tap_file.clone(),
                    seed: 0,
                    n_tx: self.channel.n_tx,
                    n_rx: self.channel.n_rx,
                };
                out.push(ExperimentConfig {
                    name: run_name(&self.name, snr, l_pilot),
                    channel,
                    receivers: self.receivers.clone(),
                    blocks: s.blocks,
                    reps: s.reps,
                    l_pilot,
                    l_info: s.l_info,
                    seed: self.seed,
                    resnet_channels: s.resnet_channels,
                    online: OnlineConfig {
                        epochs: s.epochs,
                        ..self.online.clone()
                    },
                    joint: JointConfig {
                        epochs: s.joint_epochs,
                        ..self.joint.clone()
                    },
                    attack: self.attack.then(|| self.pgd.clone()),
                });
            }
        }
        Ok(out)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::State(format!("preset does not serialize: {e}")))
    }
}

/// File stem of one resolved experiment, e.g. `fig10_snr14_lp200`.
pub fn run_name(preset: &str, snr_db: f64, l_pilot: usize) -> String {
    let snr = format!("{snr_db}").replace('-', "m").replace('.', "p");
    format!("{preset}_snr{snr}_lp{l_pilot}")
}
