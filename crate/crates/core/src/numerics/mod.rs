//! Tensors, tape-based reverse-mode differentiation and the Adam optimizer.

mod adam;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use tape::{softmax_rows, BatchStats, Gradients, Tape, Var, PROB_FLOOR};
pub use tensor::Tensor;


use crate::error::{Error, Result};

/// Gradient of a scalar loss with respect to `input`.
///
/// `forward` receives a fresh tape and the taped input and must return the
/// scalar loss. Anything the closure places with [`Tape::constant`] is
/// treated as frozen, so model parameters are left untouched.
pub fn input_grad<F>(forward: F, input: &Tensor) -> Result<(Tensor, f64)>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    if !input.requires_grad {
        return Err(Error::Contract(
            "input_grad needs an input that participates in the tape".into(),
        ));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(input);
    let loss = forward(&mut tape, x)?;
    let value = tape.scalar(loss);
    let mut grads = tape.backward(loss)?;
    let g = grads
        .take(x)
        .unwrap_or_else(|| vec![0.0; input.len()]);
    Ok((Tensor::new(input.shape().to_vec(), g)?, value))
}
