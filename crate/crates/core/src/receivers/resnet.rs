use rand::Rng;

use super::{init_conv, init_linear, Dims, Forward, Heads, Mode};
use crate::error::{Error, Result};
use crate::modem::QPSK_ORDER;
use crate::numerics::{BatchStats, Tape, Tensor, Var};

pub const RES_BLOCKS: usize = 10;
pub const DEFAULT_RES_CHANNELS: usize = 16;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Residual convolutional detector.
///
/// The received vector is laid out as a one-channel `2 × n_rx` image (real
/// row over imaginary row). A bias-free 3×3 stem lifts it to `channels`
/// feature maps, followed by [`RES_BLOCKS`] blocks of
/// `conv → BN → ReLU → conv → BN`, each added back onto its input and
/// passed through ReLU. Global average pooling feeds a linear head over the
/// `4^n_tx` joint symbols.
#[derive(Clone, Debug)]
pub struct ResidualConvNet {
    dims: Dims,
    channels: usize,
    blocks: usize,
    /// stem (w, γ, β), then per block (w1, γ1, β1, w2, γ2, β2), then head (w, b).
    params: Vec<Tensor>,
    /// Running (mean, var) per batch-norm layer.
    running: Vec<(Vec<f64>, Vec<f64>)>,
}

impl ResidualConvNet {
    pub fn new(dims: Dims, channels: usize, blocks: usize, rng: &mut impl Rng) -> Self {
        let mut params = Vec::with_capacity(3 + 6 * blocks + 2);
        let bn = |c: usize| [Tensor::filled(vec![c], 1.0), Tensor::zeros(vec![c])];
        params.push(init_conv(1, channels, rng));
        params.extend(bn(channels));
        for _ in 0..blocks {
            params.push(init_conv(channels, channels, rng));
            params.extend(bn(channels));
            params.push(init_conv(channels, channels, rng));
            params.extend(bn(channels));
        }
        params.extend(init_linear(channels, QPSK_ORDER.pow(dims.n_tx as u32), rng));
        let running = (0..1 + 2 * blocks)
            .map(|_| (vec![0.0; channels], vec![1.0; channels]))
            .collect();
        ResidualConvNet {
            dims,
            channels,
            blocks,
            params,
            running,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn residual_blocks(&self) -> usize {
        self.blocks
    }

    /// Shapes of every convolution kernel, stem first.
    pub fn conv_shapes(&self) -> Vec<Vec<usize>> {
        let mut idx = vec![0];
        for b in 0..self.blocks {
            idx.push(3 + 6 * b);
            idx.push(6 + 6 * b);
        }
        idx.into_iter()
            .map(|i| self.params[i].shape().to_vec())
            .collect()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[(Vec<f64>, Vec<f64>)] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [(Vec<f64>, Vec<f64>)] {
        &mut self.running
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["stem.w".into(), "stem.gamma".into(), "stem.beta".into()];
        for b in 0..self.blocks {
            for part in ["w1", "gamma1", "beta1", "w2", "gamma2", "beta2"] {
                names.push(format!("block{b}.{part}"));
            }
        }
        names.push("head.w".into());
        names.push("head.b".into());
        names
    }

    pub fn buffer_names(&self) -> Vec<String> {
        (0..self.running.len())
            .flat_map(|l| [format!("bn{l}.running_mean"), format!("bn{l}.running_var")])
            .collect()
    }

    /// Index of a block's parameters (w1, γ1, β1, w2, γ2, β2).
    pub fn block_offset(&self, block: usize) -> usize {
        3 + 6 * block
    }

    #[allow(clippy::too_many_arguments)]
    fn norm(
        &self,
        tape: &mut Tape,
        x: Var,
        gamma: Var,
        beta: Var,
        layer: usize,
        mode: Mode,
        stats: &mut Vec<BatchStats>,
    ) -> Result<Var> {
        match mode {
            Mode::Train => {
                let (y, s) = tape.batch_norm_train(x, gamma, beta, BN_EPS)?;
                stats.push(s);
                Ok(y)
            }
            Mode::Eval => {
                let (mean, var) = &self.running[layer];
                tape.batch_norm_eval(x, gamma, beta, mean, var, BN_EPS)
            }
        }
    }

    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        x: Var,
        mode: Mode,
    ) -> Result<Forward> {
        let batch = tape.shape(x)[0];
        let mut stats = Vec::new();
        let img = tape.reshape(x, vec![batch, 2, self.dims.n_rx, 1])?;
        let h = tape.conv3x3(img, p[0])?;
        let h = self.norm(tape, h, p[1], p[2], 0, mode, &mut stats)?;
        let mut h = tape.relu(h);
        for b in 0..self.blocks {
            let o = self.block_offset(b);
            let r = tape.conv3x3(h, p[o])?;
            let r = self.norm(tape, r, p[o + 1], p[o + 2], 1 + 2 * b, mode, &mut stats)?;
            let r = tape.relu(r);
            let r = tape.conv3x3(r, p[o + 3])?;
            let r = self.norm(tape, r, p[o + 4], p[o + 5], 2 + 2 * b, mode, &mut stats)?;
            let sum = tape.add(h, r)?;
            h = tape.relu(sum);
        }
        let pooled = tape.global_avg_pool(h)?;
        let head = 3 + 6 * self.blocks;
        let z = tape.matmul(pooled, p[head])?;
        let logits = tape.add_bias(z, p[head + 1])?;
        Ok(Forward {
            heads: Heads::Joint(logits),
            bn_stats: stats,
        })
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub(crate) fn update_running(&mut self, stats: &[BatchStats]) -> Result<()> {
        if stats.len() != self.running.len() {
            return Err(Error::State(format!(
                "{} batch-norm layers, got {} statistics",
                self.running.len(),
                stats.len()
            )));
        }
        for ((mean, var), s) in self.running.iter_mut().zip(stats) {
            for c in 0..mean.len() {
                mean[c] = (1.0 - BN_MOMENTUM) * mean[c] + BN_MOMENTUM * s.mean[c];
                var[c] = (1.0 - BN_MOMENTUM) * var[c] + BN_MOMENTUM * s.var_unbiased[c];
            }
        }
        Ok(())
    }
}
