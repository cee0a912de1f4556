//! Deep receivers: DeepSIC, a black-box MLP and a residual conv net behind a
//! single [`Detector`] contract.
//!
//! All detectors consume real feature rows `[Re(y); Im(y)]` of length
//! `2·n_rx` and produce per-user probability simplexes over the four QPSK
//! classes. Joint-head models (MLP, ResNet) classify the whole symbol vector
//! over `4^n_tx` classes; their per-user probabilities are marginals.

pub mod blob;
mod deepsic;
mod mlp;
mod resnet;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use blob::{BlobEntry, ParamBlob};
pub use deepsic::{DeepSicNet, SIC_ITERATIONS, SUBNET_HIDDEN};
pub use mlp::{BlackBoxMlpNet, MLP_HIDDEN};
pub use resnet::{ResidualConvNet, BN_EPS, BN_MOMENTUM, DEFAULT_RES_CHANNELS, RES_BLOCKS};

use crate::error::{Error, Result};
use crate::modem::{SymbolLabel, QPSK_ORDER};
use crate::numerics::{self, BatchStats, Tape, Tensor, Var};

/// Rows per forward pass when evaluating large batches.
const EVAL_CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    DeepSic,
    BlackBoxMlp,
    ResidualConv,
}

impl DetectorKind {
    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::DeepSic => "deep_sic",
            DetectorKind::BlackBoxMlp => "black_box_mlp",
            DetectorKind::ResidualConv => "residual_conv",
        }
    }
}

/// Antenna counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub n_tx: usize,
    pub n_rx: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Dims { n_tx: 4, n_rx: 4 }
    }
}

impl Dims {
    pub fn features(&self) -> usize {
        2 * self.n_rx
    }

    pub fn joint_classes(&self) -> usize {
        QPSK_ORDER.pow(self.n_tx as u32)
    }
}

/// Batch-norm behaviour of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running estimates are updated afterwards.
    Train,
    /// Running statistics; outputs are per-sample deterministic.
    Eval,
}

pub(crate) enum Heads {
    /// `[iteration][user] → (logits, probs)`.
    PerUser(Vec<Vec<(Var, Var)>>),
    /// Logits over joint symbols.
    Joint(Var),
}

pub(crate) struct Forward {
    pub heads: Heads,
    pub bn_stats: Vec<BatchStats>,
}

/// Weight `[fan_in, fan_out]` and bias, both `U(−1/√fan_in, 1/√fan_in)`.
pub(crate) fn init_linear(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> [Tensor; 2] {
    let bound = 1.0 / (fan_in as f64).sqrt();
    [
        Tensor::uniform(vec![fan_in, fan_out], bound, rng),
        Tensor::uniform(vec![fan_out], bound, rng),
    ]
}

pub(crate) fn init_conv(cin: usize, cout: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(vec![9 * cin, cout], 1.0 / ((9 * cin) as f64).sqrt(), rng)
}

/// `batch × n_tx × 4` probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Probs {
    pub batch: usize,
    pub n_tx: usize,
    pub data: Vec<f64>,
}

impl Probs {
    pub fn get(&self, sample: usize, user: usize) -> &[f64] {
        let o = (sample * self.n_tx + user) * QPSK_ORDER;
        &self.data[o..o + QPSK_ORDER]
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
enum Net {
    DeepSic(DeepSicNet),
    Mlp(BlackBoxMlpNet),
    ResConv(ResidualConvNet),
}

/// A trainable symbol detector.
#[derive(Clone, Debug)]
pub struct Detector {
    net: Net,
    dims: Dims,
    initialized: bool,
}

impl Detector {
    /// Randomly initialized detector with default hyperparameters.
    pub fn new(kind: DetectorKind, dims: Dims, rng: &mut impl Rng) -> Self {
        let net = match kind {
            DetectorKind::DeepSic => Net::DeepSic(DeepSicNet::new(dims, rng)),
            DetectorKind::BlackBoxMlp => Net::Mlp(BlackBoxMlpNet::new(dims, rng)),
            DetectorKind::ResidualConv => Net::ResConv(ResidualConvNet::new(
                dims,
                DEFAULT_RES_CHANNELS,
                RES_BLOCKS,
                rng,
            )),
        };
        Detector {
            net,
            dims,
            initialized: true,
        }
    }

    /// Residual detector with a custom width and depth.
    pub fn residual(dims: Dims, channels: usize, blocks: usize, rng: &mut impl Rng) -> Self {
        Detector {
            net: Net::ResConv(ResidualConvNet::new(dims, channels, blocks, rng)),
            dims,
            initialized: true,
        }
    }

    /// Architecture without usable weights; must be filled by [`restore`].
    ///
    /// [`restore`]: Detector::restore
    pub fn shell(kind: DetectorKind, dims: Dims) -> Self {
        let mut rng = crate::seeds::stream(0, "shell", 0);
        let mut d = Detector::new(kind, dims, &mut rng);
        d.initialized = false;
        d
    }

    pub fn kind(&self) -> DetectorKind {
        match self.net {
            Net::DeepSic(_) => DetectorKind::DeepSic,
            Net::Mlp(_) => DetectorKind::BlackBoxMlp,
            Net::ResConv(_) => DetectorKind::ResidualConv,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn as_deepsic(&self) -> Option<&DeepSicNet> {
        match &self.net {
            Net::DeepSic(n) => Some(n),
            _ => None,
        }
    }

    pub fn as_mlp(&self) -> Option<&BlackBoxMlpNet> {
        match &self.net {
            Net::Mlp(n) => Some(n),
            _ => None,
        }
    }

    pub fn as_residual(&self) -> Option<&ResidualConvNet> {
        match &self.net {
            Net::ResConv(n) => Some(n),
            _ => None,
        }
    }

    pub fn params(&self) -> &[Tensor] {
        match &self.net {
            Net::DeepSic(n) => n.params(),
            Net::Mlp(n) => n.params(),
            Net::ResConv(n) => n.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        match &mut self.net {
            Net::DeepSic(n) => n.params_mut(),
            Net::Mlp(n) => n.params_mut(),
            Net::ResConv(n) => n.params_mut(),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        match &self.net {
            Net::DeepSic(n) => n.param_names(),
            Net::Mlp(n) => n.param_names(),
            Net::ResConv(n) => n.param_names(),
        }
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().iter_mut().for_each(Tensor::zero_grad);
    }

    fn check_ready(&self) -> Result<()> {
        if self.initialized {
            Ok(())
        } else {
            Err(Error::State(format!(
                "{} detector has no parameters loaded",
                self.kind().name()
            )))
        }
    }

    fn check_features(&self, features: &Tensor) -> Result<()> {
        match features.shape() {
            [_, w] if *w == self.dims.features() => Ok(()),
            s => Err(Error::Dimension(format!(
                "expected [batch, {}] features, got {s:?}",
                self.dims.features()
            ))),
        }
    }

    fn check_labels(&self, features: &Tensor, labels: &[SymbolLabel]) -> Result<()> {
        if labels.len() != features.rows() {
            return Err(Error::Dimension(format!(
                "{} labels for {} samples",
                labels.len(),
                features.rows()
            )));
        }
        if let Some(l) = labels.iter().find(|l| l.n_users() != self.dims.n_tx) {
            return Err(Error::Dimension(format!(
                "label with {} users for {} transmitters",
                l.n_users(),
                self.dims.n_tx
            )));
        }
        Ok(())
    }

    /// Puts the parameters on `tape`, differentiable iff `trainable`.
    pub(crate) fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params()
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(&p.clone().with_grad())
                } else {
                    tape.constant(p)
                }
            })
            .collect()
    }

    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        mode: Mode,
    ) -> Result<Forward> {
        match &self.net {
            Net::DeepSic(n) => n.forward(tape, params, x),
            Net::Mlp(n) => n.forward(tape, params, x),
            Net::ResConv(n) => n.forward(tape, params, x, mode),
        }
    }

    /// Training objective on the tape: summed per-user cross-entropy over
    /// every DeepSIC subnet, or joint-symbol cross-entropy for joint heads.
    pub(crate) fn loss_from(
        &self,
        tape: &mut Tape,
        heads: &Heads,
        labels: &[SymbolLabel],
    ) -> Result<Var> {
        match heads {
            Heads::PerUser(iterations) => {
                let per_user: Vec<Vec<usize>> = (0..self.dims.n_tx)
                    .map(|u| labels.iter().map(|l| l.per_user[u] as usize).collect())
                    .collect();
                let mut total: Option<Var> = None;
                for outputs in iterations {
                    for (u, &(logits, _)) in outputs.iter().enumerate() {
                        let term = tape.softmax_cross_entropy(logits, &per_user[u])?;
                        total = Some(match total {
                            Some(t) => tape.add(t, term)?,
                            None => term,
                        });
                    }
                }
                total.ok_or_else(|| Error::State("detector has no subnets".into()))
            }
            Heads::Joint(logits) => {
                let joint: Vec<usize> = labels.iter().map(SymbolLabel::joint).collect();
                tape.softmax_cross_entropy(*logits, &joint)
            }
        }
    }

    /// Taped loss for an input variable. Parameters are frozen unless
    /// `trainable`; returns the loss node and the parameter nodes.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        x: Var,
        labels: &[SymbolLabel],
        mode: Mode,
        trainable: bool,
    ) -> Result<(Var, Vec<Var>, Vec<BatchStats>)> {
        self.check_ready()?;
        let params = self.register(tape, trainable);
        let fwd = self.forward(tape, &params, x, mode)?;
        let loss = self.loss_from(tape, &fwd.heads, labels)?;
        Ok((loss, params, fwd.bn_stats))
    }

    /// Computes the training loss on a batch (batch statistics), stores the
    /// parameter gradients and updates batch-norm running statistics.
    pub fn accumulate_grads(&mut self, features: &Tensor, labels: &[SymbolLabel]) -> Result<f64> {
        self.check_ready()?;
        self.check_features(features)?;
        self.check_labels(features, labels)?;
        let mut tape = Tape::new();
        let x = tape.constant(features);
        let (loss, params, stats) = self.loss_on_tape(&mut tape, x, labels, Mode::Train, true)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Numeric(format!("training loss is {value}")));
        }
        let mut grads = tape.backward(loss)?;
        for (p, v) in self.params_mut().iter_mut().zip(params) {
            let g = grads.take(v).unwrap_or_else(|| vec![0.0; p.len()]);
            p.set_grad(g)?;
        }
        if let Net::ResConv(n) = &mut self.net {
            n.update_running(&stats)?;
        }
        Ok(value)
    }

    fn eval_chunks<T>(
        &self,
        features: &Tensor,
        mut visit: impl FnMut(&Tape, &Heads, usize) -> Result<T>,
    ) -> Result<Vec<T>> {
        self.check_ready()?;
        self.check_features(features)?;
        let n = features.rows();
        let mut out = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + EVAL_CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let chunk = features.select_rows(&idx);
            let mut tape = Tape::new();
            let x = tape.constant(&chunk);
            let params = self.register(&mut tape, false);
            let fwd = self.forward(&mut tape, &params, x, Mode::Eval)?;
            out.push(visit(&tape, &fwd.heads, start)?);
            start = end;
        }
        Ok(out)
    }

    /// Per-user symbol probabilities (inference mode).
    pub fn predict(&self, features: &Tensor) -> Result<Probs> {
        let n_tx = self.dims.n_tx;
        let classes = self.dims.joint_classes();
        let chunks = self.eval_chunks(features, |tape, heads, _| {
            Ok(match heads {
                Heads::PerUser(iterations) => {
                    let last = iterations.last().expect("at least one iteration");
                    let rows = tape.shape(last[0].1)[0];
                    let mut data = Vec::with_capacity(rows * n_tx * QPSK_ORDER);
                    for r in 0..rows {
                        for &(_, probs) in last {
                            let p = tape.value(probs);
                            data.extend_from_slice(&p[r * QPSK_ORDER..(r + 1) * QPSK_ORDER]);
                        }
                    }
                    data
                }
                Heads::Joint(logits) => {
                    let p = numerics::softmax_rows(tape.value(*logits), classes);
                    let mut data = Vec::with_capacity(p.len() / classes * n_tx * QPSK_ORDER);
                    for row in p.chunks(classes) {
                        let mut marg = vec![0.0; n_tx * QPSK_ORDER];
                        for (j, &pj) in row.iter().enumerate() {
                            let mut rest = j;
                            for u in 0..n_tx {
                                marg[u * QPSK_ORDER + rest % QPSK_ORDER] += pj;
                                rest /= QPSK_ORDER;
                            }
                        }
                        data.extend(marg);
                    }
                    data
                }
            })
        })?;
        Ok(Probs {
            batch: features.rows(),
            n_tx,
            data: chunks.concat(),
        })
    }

    /// Probabilities of every iteration for DeepSIC (`[iteration]` of
    /// `batch × n_tx × 4`); joint-head detectors yield one entry.
    pub fn predict_iterations(&self, features: &Tensor) -> Result<Vec<Probs>> {
        match &self.net {
            Net::DeepSic(_) => {
                let n_tx = self.dims.n_tx;
                let chunks = self.eval_chunks(features, |tape, heads, _| {
                    let Heads::PerUser(iterations) = heads else {
                        unreachable!("DeepSIC has per-user heads")
                    };
                    Ok(iterations
                        .iter()
                        .map(|outs| {
                            let rows = tape.shape(outs[0].1)[0];
                            let mut data = Vec::with_capacity(rows * n_tx * QPSK_ORDER);
                            for r in 0..rows {
                                for &(_, probs) in outs {
                                    let p = tape.value(probs);
                                    data.extend_from_slice(
                                        &p[r * QPSK_ORDER..(r + 1) * QPSK_ORDER],
                                    );
                                }
                            }
                            data
                        })
                        .collect::<Vec<_>>())
                })?;
                Ok((0..SIC_ITERATIONS)
                    .map(|q| Probs {
                        batch: features.rows(),
                        n_tx,
                        data: chunks.iter().flat_map(|c| c[q].iter().copied()).collect(),
                    })
                    .collect())
            }
            _ => Ok(vec![self.predict(features)?]),
        }
    }

    /// Hard decisions: per-user argmax for DeepSIC (final iteration), joint
    /// argmax split into users for joint heads. Ties go to the lowest index.
    pub fn decode(&self, features: &Tensor) -> Result<Vec<SymbolLabel>> {
        let n_tx = self.dims.n_tx;
        let classes = self.dims.joint_classes();
        let chunks = self.eval_chunks(features, |tape, heads, _| match heads {
            Heads::PerUser(iterations) => {
                let last = iterations.last().expect("at least one iteration");
                let rows = tape.shape(last[0].1)[0];
                Ok((0..rows)
                    .map(|r| SymbolLabel {
                        per_user: last
                            .iter()
                            .map(|&(_, probs)| {
                                argmax(&tape.value(probs)[r * QPSK_ORDER..(r + 1) * QPSK_ORDER])
                                    as u8
                            })
                            .collect(),
                    })
                    .collect::<Vec<_>>())
            }
            Heads::Joint(logits) => tape
                .value(*logits)
                .chunks(classes)
                .map(|row| SymbolLabel::from_joint(argmax(row), n_tx))
                .collect::<Result<Vec<_>>>(),
        })?;
        Ok(chunks.concat())
    }

    /// Loss of each sample under inference mode (same objective as training).
    pub fn per_sample_loss(&self, features: &Tensor, labels: &[SymbolLabel]) -> Result<Vec<f64>> {
        self.check_labels(features, labels)?;
        let classes = self.dims.joint_classes();
        let nll = |row: &[f64], label: usize| {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[label]
        };
        let chunks = self.eval_chunks(features, |tape, heads, start| {
            Ok(match heads {
                Heads::PerUser(iterations) => {
                    let rows = tape.shape(iterations[0][0].0)[0];
                    (0..rows)
                        .map(|r| {
                            let label = &labels[start + r];
                            iterations
                                .iter()
                                .flat_map(|outs| outs.iter().enumerate())
                                .map(|(u, &(logits, _))| {
                                    let z = &tape.value(logits)
                                        [r * QPSK_ORDER..(r + 1) * QPSK_ORDER];
                                    nll(z, label.per_user[u] as usize)
                                })
                                .sum()
                        })
                        .collect::<Vec<f64>>()
                }
                Heads::Joint(logits) => tape
                    .value(*logits)
                    .chunks(classes)
                    .enumerate()
                    .map(|(r, row)| nll(row, labels[start + r].joint()))
                    .collect(),
            })
        })?;
        Ok(chunks.concat())
    }

    /// Batch-mean loss in inference mode.
    pub fn loss(&self, features: &Tensor, labels: &[SymbolLabel]) -> Result<f64> {
        let per = self.per_sample_loss(features, labels)?;
        Ok(per.iter().sum::<f64>() / per.len().max(1) as f64)
    }

    /// Gradient of the batch-mean inference loss with respect to the input
    /// features, parameters frozen. Returns the gradient and the loss.
    pub fn input_grad(&self, features: &Tensor, labels: &[SymbolLabel]) -> Result<(Tensor, f64)> {
        self.check_features(features)?;
        self.check_labels(features, labels)?;
        let input = features.clone().with_grad();
        numerics::input_grad(
            |tape, x| {
                let (loss, _, _) = self.loss_on_tape(tape, x, labels, Mode::Eval, false)?;
                Ok(loss)
            },
            &input,
        )
    }

    pub fn snapshot(&self) -> ParamBlob {
        let mut entries: Vec<BlobEntry> = self
            .param_names()
            .into_iter()
            .zip(self.params())
            .map(|(name, p)| BlobEntry {
                name,
                shape: p.shape().to_vec(),
                data: p.data().to_vec(),
            })
            .collect();
        if let Net::ResConv(n) = &self.net {
            let names = n.buffer_names();
            for (l, (mean, var)) in n.running_stats().iter().enumerate() {
                entries.push(BlobEntry {
                    name: names[2 * l].clone(),
                    shape: vec![mean.len()],
                    data: mean.clone(),
                });
                entries.push(BlobEntry {
                    name: names[2 * l + 1].clone(),
                    shape: vec![var.len()],
                    data: var.clone(),
                });
            }
        }
        ParamBlob {
            kind: self.kind(),
            n_tx: self.dims.n_tx,
            n_rx: self.dims.n_rx,
            entries,
        }
    }

    /// Loads a blob produced by [`snapshot`](Detector::snapshot) of the same
    /// architecture.
    pub fn restore(&mut self, blob: &ParamBlob) -> Result<()> {
        if blob.kind != self.kind() || (blob.n_tx, blob.n_rx) != (self.dims.n_tx, self.dims.n_rx)
        {
            return Err(Error::Compatibility(format!(
                "blob for {} {}x{} cannot load into {} {}x{}",
                blob.kind.name(),
                blob.n_rx,
                blob.n_tx,
                self.kind().name(),
                self.dims.n_rx,
                self.dims.n_tx
            )));
        }
        let expected = self.snapshot();
        if expected.entries.len() != blob.entries.len()
            || expected
                .entries
                .iter()
                .zip(&blob.entries)
                .any(|(a, b)| a.name != b.name || a.shape != b.shape)
        {
            return Err(Error::Compatibility(
                "blob layout does not match the detector architecture".into(),
            ));
        }
        let n_params = self.params().len();
        for (p, e) in self.params_mut().iter_mut().zip(&blob.entries) {
            p.data_mut().copy_from_slice(&e.data);
            p.zero_grad();
        }
        if let Net::ResConv(n) = &mut self.net {
            for (l, stats) in n.running_stats_mut().iter_mut().enumerate() {
                stats.0.copy_from_slice(&blob.entries[n_params + 2 * l].data);
                stats.1.copy_from_slice(&blob.entries[n_params + 2 * l + 1].data);
            }
        }
        self.initialized = true;
        Ok(())
    }
}

/// Fraction of samples whose decoded symbol vector equals the label.
pub fn accuracy(decisions: &[SymbolLabel], labels: &[SymbolLabel]) -> f64 {
    let hits = decisions.iter().zip(labels).filter(|(d, l)| d == l).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Per-user hard decisions from probabilities.
pub fn hard_decisions(probs: &Probs) -> Vec<SymbolLabel> {
    (0..probs.batch)
        .map(|b| SymbolLabel {
            per_user: (0..probs.n_tx)
                .map(|u| argmax(probs.get(b, u)) as u8)
                .collect(),
        })
        .collect()
}
