use crate::modem::SymbolLabel;
use crate::numerics::Tensor;

/// One transmission block: pilots followed by information symbols, all
/// through the same channel realization. Received samples are stored as
/// real feature rows (`[Re(y); Im(y)]`).
#[derive(Clone, Debug, PartialEq)]
pub struct TransmissionBlock {
    pub block_index: usize,
    pub pilot_rx: Tensor,
    pub pilot_labels: Vec<SymbolLabel>,
    pub info_rx: Tensor,
    pub info_labels: Vec<SymbolLabel>,
    pub channel_fingerprint: u64,
}

impl TransmissionBlock {
    pub fn l_pilot(&self) -> usize {
        self.pilot_labels.len()
    }

    pub fn l_info(&self) -> usize {
        self.info_labels.len()
    }
}
