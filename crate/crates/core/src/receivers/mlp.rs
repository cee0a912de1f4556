use rand::Rng;

use super::{init_linear, Dims, Forward, Heads};
use crate::error::Result;
use crate::modem::QPSK_ORDER;
use crate::numerics::{Tape, Tensor, Var};

pub const MLP_HIDDEN: usize = 60;

/// Black-box detector: four fully connected layers with ReLU between them
/// and a softmax head over all `4^n_tx` joint symbols.
#[derive(Clone, Debug)]
pub struct BlackBoxMlpNet {
    params: Vec<Tensor>,
}

impl BlackBoxMlpNet {
    pub fn new(dims: Dims, rng: &mut impl Rng) -> Self {
        let widths = Self::layer_widths(dims);
        let params = widths
            .windows(2)
            .flat_map(|w| init_linear(w[0], w[1], rng))
            .collect();
        BlackBoxMlpNet { params }
    }

    /// `[2·n_rx, 60, 60, 60, 4^n_tx]`.
    pub fn layer_widths(dims: Dims) -> [usize; 5] {
        [
            2 * dims.n_rx,
            MLP_HIDDEN,
            MLP_HIDDEN,
            MLP_HIDDEN,
            QPSK_ORDER.pow(dims.n_tx as u32),
        ]
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..4)
            .flat_map(|l| [format!("fc{l}.w"), format!("fc{l}.b")])
            .collect()
    }

    pub(crate) fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Forward> {
        let mut h = x;
        for layer in 0..4 {
            let z = tape.matmul(h, p[2 * layer])?;
            h = tape.add_bias(z, p[2 * layer + 1])?;
            if layer < 3 {
                h = tape.relu(h);
            }
        }
        Ok(Forward {
            heads: Heads::Joint(h),
            bn_stats: Vec::new(),
        })
    }
}
