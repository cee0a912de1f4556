//! Training regimes for the receivers and the attacker's surrogate.
//!
//! - [`online_adapt`]: Adam on the current block's pilots, warm-started from
//!   whatever weights the detector already holds.
//! - [`meta_adapt`]: first-order MAML over a FIFO window of recent pilot
//!   blocks, followed by [`online_adapt`] on the current block.
//! - [`joint_train`]: offline training of the black-box MLP on pooled clean
//!   data from the linear time-varying channel across an SNR grid.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{Channel, ChannelConfig, ChannelKind};
use crate::error::{Error, Result};
use crate::harness::TransmissionBlock;
use crate::modem::{self, SymbolLabel, QPSK_ORDER};
use crate::numerics::{AdamState, Tensor};
use crate::receivers::{Detector, DetectorKind, Dims, ParamBlob};
use crate::seeds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnlineConfig {
    pub epochs: usize,
    pub lr: f64,
    pub meta_lr: f64,
    /// Number of past blocks kept for meta-learning.
    pub meta_window: usize,
    pub meta_epochs: usize,
    /// Share of a block's pilots used as the MAML support set.
    pub support_fraction: f64,
    pub inner_steps: usize,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        OnlineConfig {
            epochs: 300,
            lr: 5e-3,
            meta_lr: 0.01,
            meta_window: 5,
            meta_epochs: 30,
            support_fraction: 0.5,
            inner_steps: 1,
        }
    }
}

impl OnlineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("online.lr", "must be positive"));
        }
        if !(self.meta_lr > 0.0) {
            return Err(Error::config("online.meta_lr", "must be positive"));
        }
        if self.meta_window == 0 {
            return Err(Error::config("online.meta_window", "must be at least 1"));
        }
        if !(self.support_fraction > 0.0 && self.support_fraction < 1.0) {
            return Err(Error::config("online.support_fraction", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointConfig {
    pub snr_grid: Vec<f64>,
    pub symbols_per_snr: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Minibatch size; the dataset is reshuffled every epoch.
    pub batch_size: usize,
    /// Channel blocks are drawn uniformly from `0..block_horizon`.
    pub block_horizon: usize,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig {
            snr_grid: (1..=8).map(|i| 2.0 * i as f64).collect(),
            symbols_per_snr: 5000,
            epochs: 300,
            lr: 5e-3,
            batch_size: 500,
            block_horizon: 100,
        }
    }
}

impl JointConfig {
    pub fn validate(&self) -> Result<()> {
        if self.snr_grid.is_empty() {
            return Err(Error::config("joint.snr_grid", "must not be empty"));
        }
        if self.symbols_per_snr == 0 {
            return Err(Error::config("joint.symbols_per_snr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("joint.batch_size", "must be positive"));
        }
        if self.block_horizon == 0 {
            return Err(Error::config("joint.block_horizon", "must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("joint.lr", "must be positive"));
        }
        Ok(())
    }
}

/// Received pilot features with their true labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PilotSet {
    pub features: Tensor,
    pub labels: Vec<SymbolLabel>,
}

impl PilotSet {
    pub fn new(features: Tensor, labels: Vec<SymbolLabel>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} pilot rows, {} labels",
                features.rows(),
                labels.len()
            )));
        }
        Ok(PilotSet { features, labels })
    }

    pub fn from_block(block: &TransmissionBlock) -> Self {
        PilotSet {
            features: block.pilot_rx.clone(),
            labels: block.pilot_labels.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> PilotSet {
        PilotSet {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i].clone()).collect(),
        }
    }
}

/// Loss trajectory of one training call.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Loss before each Adam step of the online phase.
    pub losses: Vec<f64>,
    /// Query loss of every meta-epoch (empty for plain online training).
    pub meta_losses: Vec<f64>,
}

fn diagnose(err: Error, epoch: usize, pilots: &PilotSet) -> Error {
    match err {
        Error::Numeric(msg) => Error::Numeric(format!(
            "{msg} at epoch {epoch}; pilot features span max |y| = {:.3e}",
            pilots.features.max_abs()
        )),
        other => other,
    }
}

/// Runs `cfg.epochs` full-batch Adam epochs on the pilots, starting from the
/// detector's current weights. The optimizer state starts fresh each call.
pub fn online_adapt(
    d: &mut Detector,
    pilots: &PilotSet,
    cfg: &OnlineConfig,
) -> Result<TrainReport> {
    let mut adam = AdamState::new(cfg.lr, d.params());
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let loss = d
            .accumulate_grads(&pilots.features, &pilots.labels)
            .map_err(|e| diagnose(e, epoch, pilots))?;
        adam.step(d.params_mut())
            .map_err(|e| diagnose(e, epoch, pilots))?;
        losses.push(loss);
    }
    d.zero_grad();
    Ok(TrainReport {
        losses,
        meta_losses: Vec::new(),
    })
}

/// FIFO of the most recent pilot blocks.
#[derive(Clone, Debug)]
pub struct PilotBuffer {
    capacity: usize,
    blocks: VecDeque<PilotSet>,
}

impl PilotBuffer {
    pub fn new(capacity: usize) -> Self {
        PilotBuffer {
            capacity,
            blocks: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, pilots: PilotSet) {
        if self.capacity == 0 {
            return;
        }
        if self.blocks.len() == self.capacity {
            self.blocks.pop_front();
        }
        self.blocks.push_back(pilots);
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &PilotSet> {
        self.blocks.iter()
    }

    pub fn get(&self, i: usize) -> Option<&PilotSet> {
        self.blocks.get(i)
    }
}

fn grads_of(d: &Detector) -> Vec<Vec<f64>> {
    d.params()
        .iter()
        .map(|p| p.grad().map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
        .collect()
}

fn sgd(d: &mut Detector, grads: &[Vec<f64>], lr: f64) {
    for (p, g) in d.params_mut().iter_mut().zip(grads) {
        p.data_mut()
            .iter_mut()
            .zip(g)
            .for_each(|(w, g)| *w -= lr * g);
    }
}

/// First-order MAML over `buffer`, then online adaptation on `current`.
///
/// The meta-weights start from the detector's current weights. Each
/// meta-epoch draws one buffered block, splits its pilots into disjoint
/// support and query halves, takes `inner_steps` SGD steps at `lr` on the
/// support loss, and moves the meta-weights by `meta_lr` times the query
/// gradient evaluated at the adapted weights. With an empty buffer this is
/// plain [`online_adapt`].
pub fn meta_adapt(
    d: &mut Detector,
    buffer: &PilotBuffer,
    current: &PilotSet,
    cfg: &OnlineConfig,
    rng: &mut impl Rng,
) -> Result<TrainReport> {
    if buffer.is_empty() {
        return online_adapt(d, current, cfg);
    }
    let mut meta_losses = Vec::with_capacity(cfg.meta_epochs);
    for epoch in 0..cfg.meta_epochs {
        let block = &buffer.blocks[rng.gen_range(0..buffer.len())];
        let n = block.len();
        if n < 2 {
            return Err(Error::Argument(
                "meta-learning needs at least two pilots per block".into(),
            ));
        }
        let n_support = ((n as f64 * cfg.support_fraction).round() as usize).clamp(1, n - 1);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        let support = block.subset(&idx[..n_support]);
        let query = block.subset(&idx[n_support..]);

        let meta_weights = d.snapshot();
        for _ in 0..cfg.inner_steps {
            d.accumulate_grads(&support.features, &support.labels)
                .map_err(|e| diagnose(e, epoch, &support))?;
            let g = grads_of(d);
            sgd(d, &g, cfg.lr);
        }
        let q_loss = d
            .accumulate_grads(&query.features, &query.labels)
            .map_err(|e| diagnose(e, epoch, &query))?;
        let query_grads = grads_of(d);
        if query_grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite meta-gradient at meta-epoch {epoch}"
            )));
        }
        d.restore(&meta_weights)?;
        sgd(d, &query_grads, cfg.meta_lr);
        meta_losses.push(q_loss);
    }
    let mut report = online_adapt(d, current, cfg)?;
    report.meta_losses = meta_losses;
    Ok(report)
}

/// Clean pooled dataset for the surrogate: `symbols_per_snr` symbols at
/// each SNR of the grid, each through the linear time-varying channel at a
/// uniformly drawn block index.
pub fn joint_dataset(
    channel: &ChannelConfig,
    jcfg: &JointConfig,
    seed: u64,
) -> Result<PilotSet> {
    jcfg.validate()?;
    let dims = Dims {
        n_tx: channel.n_tx,
        n_rx: channel.n_rx,
    };
    let mut rng = seeds::stream(seed, "joint-dataset", 0);
    let total = jcfg.snr_grid.len() * jcfg.symbols_per_snr;
    let mut data = Vec::with_capacity(total * dims.features());
    let mut labels = Vec::with_capacity(total);
    for &snr in &jcfg.snr_grid {
        let mut cfg = channel.clone();
        cfg.kind = ChannelKind::LinearTimeVarying;
        cfg.tap_file = None;
        cfg.snr_db = snr;
        let ch = Channel::new(cfg)?;
        for _ in 0..jcfg.symbols_per_snr {
            let b = rng.gen_range(0..jcfg.block_horizon);
            let real = ch.taps_at(b)?;
            let per_user: Vec<u8> = (0..dims.n_tx)
                .map(|_| rng.gen_range(0..QPSK_ORDER as u8))
                .collect();
            let x = modem::modulate(&per_user)?;
            data.extend(ch.transmit(&x, &real, &mut rng).features());
            labels.push(SymbolLabel { per_user });
        }
    }
    PilotSet::new(Tensor::new(vec![total, dims.features()], data)?, labels)
}

/// Trained surrogate and its training trace.
#[derive(Clone, Debug)]
pub struct Surrogate {
    pub detector: Detector,
    pub dataset_size: usize,
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains a black-box MLP surrogate on the joint dataset with Adam.
pub fn joint_train(channel: &ChannelConfig, jcfg: &JointConfig, seed: u64) -> Result<Surrogate> {
    let data = joint_dataset(channel, jcfg, seed)?;
    let dims = Dims {
        n_tx: channel.n_tx,
        n_rx: channel.n_rx,
    };
    let mut rng = seeds::stream(seed, "joint-train", 0);
    let mut detector = Detector::new(DetectorKind::BlackBoxMlp, dims, &mut rng);
    let mut adam = AdamState::new(jcfg.lr, detector.params());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let full_batch = jcfg.batch_size >= data.len();
    let mut epoch_losses = Vec::with_capacity(jcfg.epochs);
    for epoch in 0..jcfg.epochs {
        if !full_batch {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(jcfg.batch_size) {
            let subset;
            let batch = if full_batch {
                &data
            } else {
                subset = data.subset(chunk);
                &subset
            };
            total += detector
                .accumulate_grads(&batch.features, &batch.labels)
                .map_err(|e| diagnose(e, epoch, batch))?;
            adam.step(detector.params_mut())?;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    detector.zero_grad();
    Ok(Surrogate {
        detector,
        dataset_size: data.len(),
        epoch_losses,
    })
}

/// Euclidean distance between two detectors' parameters.
pub fn parameter_distance(a: &Detector, b: &Detector) -> Result<f64> {
    a.snapshot().distance(&b.snapshot())
}

/// Distance between a detector and a stored snapshot.
pub fn distance_to(d: &Detector, blob: &ParamBlob) -> Result<f64> {
    d.snapshot().distance(blob)
}
