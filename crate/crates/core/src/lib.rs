//! Link-level MIMO simulation of online-adaptive deep receivers under
//! transfer-based adversarial pilot poisoning.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: tensors, tape-based reverse-mode autodiff, Adam.
//! - [`modem`]: QPSK mapping and label encodings.
//! - [`channel`]: synthetic and tap-file MIMO channels.
//! - [`receivers`]: DeepSIC, black-box MLP and residual conv detectors.
//! - [`training`]: online, online meta-learning and joint (surrogate) training.
//! - [`attack`]: PGD pilot poisoning and transferability diagnostics.
//! - [`harness`]: block-by-block experiment loop, SER bookkeeping, persistence.
//! - [`cli`]: presets, config files and SVG plots behind the `poisonlink` binary.

pub mod attack;
pub mod channel;
pub mod cli;
pub mod error;
pub mod harness;
pub mod modem;
pub mod numerics;
pub mod receivers;
pub mod seeds;
pub mod training;

pub use error::{Error, Result};
