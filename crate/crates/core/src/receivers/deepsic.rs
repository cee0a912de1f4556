use rand::Rng;

use super::{init_linear, Dims, Forward, Heads};
use crate::error::Result;
use crate::modem::QPSK_ORDER;
use crate::numerics::{Tape, Tensor, Var};

pub const SIC_ITERATIONS: usize = 3;
pub const SUBNET_HIDDEN: usize = 64;

/// Unfolded soft interference cancellation: `SIC_ITERATIONS × n_tx`
/// two-layer subnetworks. The subnet of user `u` at iteration `q` sees the
/// received features and the soft estimates of every other user from
/// iteration `q − 1` (uniform before the first iteration).
#[derive(Clone, Debug)]
pub struct DeepSicNet {
    dims: Dims,
    /// `[q][u] → (W1, b1, W2, b2)`, flattened.
    params: Vec<Tensor>,
}

impl DeepSicNet {
    pub fn new(dims: Dims, rng: &mut impl Rng) -> Self {
        let in_dim = Self::in_dim(dims);
        let mut params = Vec::with_capacity(4 * SIC_ITERATIONS * dims.n_tx);
        for _ in 0..SIC_ITERATIONS * dims.n_tx {
            params.extend(init_linear(in_dim, SUBNET_HIDDEN, rng));
            params.extend(init_linear(SUBNET_HIDDEN, QPSK_ORDER, rng));
        }
        DeepSicNet { dims, params }
    }

    /// `2·n_rx` real features plus a 4-vector per interfering user.
    pub fn in_dim(dims: Dims) -> usize {
        2 * dims.n_rx + QPSK_ORDER * (dims.n_tx - 1)
    }

    pub fn subnet_count(&self) -> usize {
        self.params.len() / 4
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.params.len());
        for q in 0..SIC_ITERATIONS {
            for u in 0..self.dims.n_tx {
                for p in ["w1", "b1", "w2", "b2"] {
                    names.push(format!("sic{q}.user{u}.{p}"));
                }
            }
        }
        names
    }

    /// Index of the first parameter of subnet (`iteration`, `user`).
    pub fn subnet_offset(&self, iteration: usize, user: usize) -> usize {
        4 * (iteration * self.dims.n_tx + user)
    }

    pub(crate) fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Forward> {
        let batch = tape.shape(x)[0];
        let n_tx = self.dims.n_tx;
        let prior =
            tape.constant_from(vec![batch, QPSK_ORDER], vec![0.25; batch * QPSK_ORDER])?;
        let mut soft: Vec<Var> = vec![prior; n_tx];
        let mut iterations = Vec::with_capacity(SIC_ITERATIONS);
        for q in 0..SIC_ITERATIONS {
            let mut outputs = Vec::with_capacity(n_tx);
            for u in 0..n_tx {
                let mut parts = Vec::with_capacity(n_tx);
                parts.push(x);
                parts.extend((0..n_tx).filter(|&o| o != u).map(|o| soft[o]));
                let input = tape.concat_cols(&parts)?;
                let o = self.subnet_offset(q, u);
                let h = tape.matmul(input, p[o])?;
                let h = tape.add_bias(h, p[o + 1])?;
                let h = tape.relu(h);
                let z = tape.matmul(h, p[o + 2])?;
                let logits = tape.add_bias(z, p[o + 3])?;
                let probs = tape.softmax(logits, 1)?;
                outputs.push((logits, probs));
            }
            soft = outputs.iter().map(|&(_, pr)| pr).collect();
            iterations.push(outputs);
        }
        Ok(Forward {
            heads: Heads::PerUser(iterations),
            bn_stats: Vec::new(),
        })
    }
}
