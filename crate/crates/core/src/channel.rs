//! Block-fading MIMO channels: synthetic time-varying taps (linear and
//! tanh-nonlinear), a static channel, and per-block taps ingested from CSV.
//!
//! Synthetic taps follow
//!
//! ```text
//! H[i,j](b) = 0.8^|i-j| · (0.6 + 0.4·cos(2πb/P_j + φ_ij)) · exp(ι·ψ_ij)
//! ```
//!
//! with column periods `P = (51, 39, 33, 21)` blocks (cycled for wider
//! arrays) and phases drawn once from the channel seed. Noise is circular
//! Gaussian with total variance `σ² = 10^(-snr_db/10)` per complex entry,
//! which makes `snr_db` the per-antenna SNR for the unit-power constellation.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::TransmissionBlock;
use crate::modem::{self, SymbolLabel, QPSK_ORDER};
use crate::numerics::Tensor;
use crate::seeds;

/// Column periods (in blocks) of the synthetic tap law.
pub const TAP_PERIODS: [f64; 4] = [51.0, 39.0, 33.0, 21.0];

/// Prefix that selects a tap table compiled into the crate instead of a file.
pub const BUNDLED_PREFIX: &str = "bundled:";

const COST_SAMPLE: &str = include_str!("../data/cost2100_sample.csv");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    LinearTimeVarying,
    NonlinearTimeVarying,
    LinearStatic,
    TapFile,
}

impl ChannelKind {
    pub fn name(self) -> &'static str {
        match self {
            ChannelKind::LinearTimeVarying => "linear_time_varying",
            ChannelKind::NonlinearTimeVarying => "nonlinear_time_varying",
            ChannelKind::LinearStatic => "linear_static",
            ChannelKind::TapFile => "tap_file",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [
            ChannelKind::LinearTimeVarying,
            ChannelKind::NonlinearTimeVarying,
            ChannelKind::LinearStatic,
            ChannelKind::TapFile,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| Error::config("channel.kind", format!("unknown channel `{s}`")))
    }
}

fn default_k() -> f64 {
    0.5
}

fn default_antennas() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    pub kind: ChannelKind,
    pub snr_db: f64,
    /// Gain inside the tanh of the nonlinear channel.
    #[serde(default = "default_k")]
    pub k: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tap_file: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_antennas")]
    pub n_tx: usize,
    #[serde(default = "default_antennas")]
    pub n_rx: usize,
}

impl ChannelConfig {
    pub fn new(kind: ChannelKind, snr_db: f64, seed: u64) -> Self {
        ChannelConfig {
            kind,
            snr_db,
            k: default_k(),
            tap_file: None,
            seed,
            n_tx: default_antennas(),
            n_rx: default_antennas(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == ChannelKind::TapFile && self.tap_file.is_none() {
            return Err(Error::config("channel.tap_file", "required for kind tap_file"));
        }
        if !(self.k > 0.0) {
            return Err(Error::config("channel.k", "must be positive"));
        }
        if !self.snr_db.is_finite() {
            return Err(Error::config("channel.snr_db", "must be finite"));
        }
        if self.n_tx == 0 || self.n_rx == 0 {
            return Err(Error::config("channel.n_tx/n_rx", "need at least one antenna"));
        }
        Ok(())
    }
}

/// σ² for a unit-power constellation at the given SNR.
pub fn noise_variance(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

/// Channel matrix and noise level of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization {
    pub n_rx: usize,
    pub n_tx: usize,
    /// Row-major `n_rx × n_tx` real parts.
    pub h_re: Vec<f64>,
    pub h_im: Vec<f64>,
    pub sigma2: f64,
    pub block_index: usize,
}

impl ChannelRealization {
    pub fn h(&self, i: usize, j: usize) -> Complex64 {
        let idx = i * self.n_tx + j;
        Complex64::new(self.h_re[idx], self.h_im[idx])
    }

    /// Hash of the tap bits, used to tie blocks to their realization.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.h_re.iter().chain(&self.h_im) {
            for byte in v.to_bits().to_le_bytes() {
                h ^= u64::from(byte);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    /// Noise-free `Hx`.
    pub fn apply(&self, x: &[Complex64]) -> Vec<Complex64> {
        (0..self.n_rx)
            .map(|i| (0..self.n_tx).map(|j| self.h(i, j) * x[j]).sum())
            .collect()
    }
}

/// Complex baseband sample at the receive array.
#[derive(Clone, Debug, PartialEq)]
pub struct ReceivedSymbol {
    pub y: Vec<Complex64>,
}

impl ReceivedSymbol {
    pub fn features(&self) -> Vec<f64> {
        modem::real_features(&self.y)
    }
}

/// Per-block taps: `rows[b]` holds `n_rx·n_tx` entries as interleaved
/// (re, im) pairs, row-major over `(i, j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TapTable {
    pub n_rx: usize,
    pub n_tx: usize,
    pub rows: Vec<Vec<f64>>,
}

impl TapTable {
    pub fn blocks(&self) -> usize {
        self.rows.len()
    }

    fn header(n_rx: usize, n_tx: usize) -> String {
        let mut h = String::from("block");
        for i in 0..n_rx {
            for j in 0..n_tx {
                let _ = write!(h, ",h{i}{j}_re,h{i}{j}_im");
            }
        }
        h
    }

    pub fn to_csv(&self) -> String {
        let mut out = TapTable::header(self.n_rx, self.n_tx);
        out.push('\n');
        for (b, row) in self.rows.iter().enumerate() {
            let _ = write!(out, "{b}");
            for v in row {
                let _ = write!(out, ",{v:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "empty tap file".into(),
        })?;
        let names: Vec<&str> = header.split(',').map(str::trim).collect();
        if names.first() != Some(&"block") {
            return Err(Error::Parse {
                line: 1,
                msg: "first column must be `block`".into(),
            });
        }
        let taps = names.len() - 1;
        if taps == 0 || taps % 2 != 0 {
            return Err(Error::Parse {
                line: 1,
                msg: format!("{taps} tap columns is not a whole number of complex entries"),
            });
        }
        let (n_rx, n_tx) = header_dims(&names[1..]).ok_or(Error::Parse {
            line: 1,
            msg: "tap columns must be h<i><j>_re,h<i><j>_im over a full grid".into(),
        })?;
        if TapTable::header(n_rx, n_tx) != names.join(",") {
            return Err(Error::Parse {
                line: 1,
                msg: "tap columns are not in row-major (i, j) order".into(),
            });
        }
        let mut rows = Vec::new();
        for (idx, line) in lines {
            let lineno = idx + 1;
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != names.len() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected {} columns, found {}", names.len(), fields.len()),
                });
            }
            let block: usize = fields[0].parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad block index `{}`", fields[0]),
            })?;
            if block != rows.len() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("block {block} out of sequence, expected {}", rows.len()),
                });
            }
            let row = fields[1..]
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Error::Parse {
                            line: lineno,
                            msg: format!("bad tap value `{f}`"),
                        })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Ok(TapTable { n_rx, n_tx, rows })
    }
}

fn header_dims(names: &[&str]) -> Option<(usize, usize)> {
    let last = names.last()?;
    let rest = last.strip_prefix('h')?.strip_suffix("_im")?;
    let mut chars = rest.chars();
    let i = chars.next()?.to_digit(10)? as usize;
    let j = chars.next()?.to_digit(10)? as usize;
    if chars.next().is_some() {
        return None;
    }
    let (n_rx, n_tx) = (i + 1, j + 1);
    (names.len() == 2 * n_rx * n_tx).then_some((n_rx, n_tx))
}

/// Reads a tap table from disk, or from the compiled-in sample when the
/// path is `bundled:cost2100`.
pub fn load_tap_file(path: &Path) -> Result<TapTable> {
    let s = path.to_string_lossy();
    if let Some(name) = s.strip_prefix(BUNDLED_PREFIX) {
        return match name {
            "cost2100" => TapTable::parse_csv(COST_SAMPLE),
            other => Err(Error::Argument(format!("no bundled tap table `{other}`"))),
        };
    }
    TapTable::parse_csv(&std::fs::read_to_string(path)?)
}

pub fn write_tap_file(path: &Path, table: &TapTable) -> Result<()> {
    std::fs::write(path, table.to_csv())?;
    Ok(())
}

/// Slowly drifting taps in the spirit of a geometric cluster model: large
/// excursions over hundreds of blocks, nearly flat between neighbours.
pub fn drifting_taps(n_rx: usize, n_tx: usize, blocks: usize, seed: u64) -> TapTable {
    let mut rng = seeds::stream(seed, "drifting-taps", 0);
    let mut params = Vec::with_capacity(n_rx * n_tx);
    for _ in 0..n_rx * n_tx {
        let slow: f64 = rng.gen_range(180.0..420.0);
        let slower: f64 = rng.gen_range(500.0..900.0);
        let rot: f64 = rng.gen_range(400.0..1200.0);
        let phases: [f64; 3] = [
            rng.gen_range(0.0..2.0 * PI),
            rng.gen_range(0.0..2.0 * PI),
            rng.gen_range(0.0..2.0 * PI),
        ];
        params.push((slow, slower, rot, phases));
    }
    let rows = (0..blocks)
        .map(|b| {
            let t = b as f64;
            let mut row = Vec::with_capacity(2 * n_rx * n_tx);
            for i in 0..n_rx {
                for j in 0..n_tx {
                    let (slow, slower, rot, ph) = params[i * n_tx + j];
                    let decay = 0.8f64.powi((i as i32 - j as i32).abs());
                    let amp = 0.6
                        + 0.3 * (2.0 * PI * t / slow + ph[0]).sin()
                        + 0.1 * (2.0 * PI * t / slower + ph[1]).sin();
                    let phase = ph[2] + 2.0 * PI * t / rot;
                    let h = Complex64::from_polar(decay * amp, phase);
                    row.push(h.re);
                    row.push(h.im);
                }
            }
            row
        })
        .collect();
    TapTable { n_rx, n_tx, rows }
}

/// A configured channel, ready to emit realizations and blocks.
#[derive(Clone, Debug)]
pub struct Channel {
    config: ChannelConfig,
    amp_phase: Vec<f64>,
    rot_phase: Vec<f64>,
    taps: Option<TapTable>,
}

impl Channel {
    pub fn new(config: ChannelConfig) -> Result<Self> {
        config.validate()?;
        let taps = match (&config.kind, &config.tap_file) {
            (ChannelKind::TapFile, Some(p)) => Some(load_tap_file(p)?),
            _ => None,
        };
        Channel::build(config, taps)
    }

    /// Uses an in-memory tap table for a `TapFile` channel.
    pub fn with_taps(mut config: ChannelConfig, taps: TapTable) -> Result<Self> {
        config.kind = ChannelKind::TapFile;
        if config.tap_file.is_none() {
            config.tap_file = Some(PathBuf::from("<memory>"));
        }
        config.validate()?;
        Channel::build(config, Some(taps))
    }

    fn build(config: ChannelConfig, taps: Option<TapTable>) -> Result<Self> {
        if let Some(t) = &taps {
            if (t.n_rx, t.n_tx) != (config.n_rx, config.n_tx) {
                return Err(Error::Dimension(format!(
                    "tap table is {}x{}, channel configured {}x{}",
                    t.n_rx, t.n_tx, config.n_rx, config.n_tx
                )));
            }
        }
        let n = config.n_rx * config.n_tx;
        let mut rng = seeds::stream(config.seed, "tap-phases", 0);
        let amp_phase = (0..n).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
        let rot_phase = (0..n).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
        Ok(Channel {
            config,
            amp_phase,
            rot_phase,
            taps,
        })
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.config
    }

    fn synthetic(&self, b: usize) -> (Vec<f64>, Vec<f64>) {
        let (n_rx, n_tx) = (self.config.n_rx, self.config.n_tx);
        let mut re = Vec::with_capacity(n_rx * n_tx);
        let mut im = Vec::with_capacity(n_rx * n_tx);
        for i in 0..n_rx {
            for j in 0..n_tx {
                let idx = i * n_tx + j;
                let period = TAP_PERIODS[j % TAP_PERIODS.len()];
                let decay = 0.8f64.powi((i as i32 - j as i32).abs());
                let amp = decay
                    * (0.6 + 0.4 * (2.0 * PI * b as f64 / period + self.amp_phase[idx]).cos());
                let h = Complex64::from_polar(amp, self.rot_phase[idx]);
                re.push(h.re);
                im.push(h.im);
            }
        }
        (re, im)
    }

    pub fn taps_at(&self, b: usize) -> Result<ChannelRealization> {
        let (h_re, h_im) = match self.config.kind {
            ChannelKind::LinearTimeVarying | ChannelKind::NonlinearTimeVarying => {
                self.synthetic(b)
            }
            ChannelKind::LinearStatic => self.synthetic(0),
            ChannelKind::TapFile => {
                let table = self
                    .taps
                    .as_ref()
                    .ok_or_else(|| Error::State("tap table not loaded".into()))?;
                let row = table.rows.get(b).ok_or_else(|| {
                    Error::Index(format!(
                        "block {b} beyond tap table of {} blocks",
                        table.blocks()
                    ))
                })?;
                (
                    row.iter().step_by(2).copied().collect(),
                    row.iter().skip(1).step_by(2).copied().collect(),
                )
            }
        };
        Ok(ChannelRealization {
            n_rx: self.config.n_rx,
            n_tx: self.config.n_tx,
            h_re,
            h_im,
            sigma2: noise_variance(self.config.snr_db),
            block_index: b,
        })
    }

    /// `y = Hx + w`, or `tanh(k(Hx + w))` per real component on the
    /// nonlinear channel.
    pub fn transmit(
        &self,
        x: &[Complex64],
        real: &ChannelRealization,
        rng: &mut impl Rng,
    ) -> ReceivedSymbol {
        let sd = (real.sigma2 / 2.0).sqrt();
        let mut y = real.apply(x);
        for v in y.iter_mut() {
            let nr: f64 = rng.sample(StandardNormal);
            let ni: f64 = rng.sample(StandardNormal);
            *v += Complex64::new(sd * nr, sd * ni);
        }
        if self.config.kind == ChannelKind::NonlinearTimeVarying {
            let k = self.config.k;
            for v in y.iter_mut() {
                *v = Complex64::new((k * v.re).tanh(), (k * v.im).tanh());
            }
        }
        ReceivedSymbol { y }
    }

    fn draw(
        &self,
        real: &ChannelRealization,
        count: usize,
        rng: &mut impl Rng,
    ) -> Result<(Tensor, Vec<SymbolLabel>)> {
        let n_tx = self.config.n_tx;
        let width = 2 * self.config.n_rx;
        let mut data = Vec::with_capacity(count * width);
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            let per_user: Vec<u8> = (0..n_tx)
                .map(|_| rng.gen_range(0..QPSK_ORDER as u8))
                .collect();
            let x = modem::modulate(&per_user)?;
            data.extend(self.transmit(&x, real, rng).features());
            labels.push(SymbolLabel { per_user });
        }
        Ok((Tensor::new(vec![count, width], data)?, labels))
    }

    /// Pilot and information symbols of block `b`, all through `H(b)`.
    pub fn generate_block(
        &self,
        b: usize,
        l_pilot: usize,
        l_info: usize,
        rng: &mut impl Rng,
    ) -> Result<TransmissionBlock> {
        if l_pilot == 0 || l_info == 0 {
            return Err(Error::Argument("block partitions must be non-empty".into()));
        }
        let real = self.taps_at(b)?;
        let (pilot_rx, pilot_labels) = self.draw(&real, l_pilot, rng)?;
        let (info_rx, info_labels) = self.draw(&real, l_info, rng)?;
        Ok(TransmissionBlock {
            block_index: b,
            pilot_rx,
            pilot_labels,
            info_rx,
            info_labels,
            channel_fingerprint: real.fingerprint(),
        })
    }
}
