//! Exhaustive maximum-likelihood detection for small MIMO toys.
//!
//! Kept independent of the crate's modem: the constellation table and the
//! complex arithmetic are spelled out here.

const R: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Class index to (re, im).
pub const QPSK: [(f64, f64); 4] = [(R, R), (R, -R), (-R, R), (-R, -R)];

/// Row-major complex matrix `n_rx × n_tx` as (re, im) pairs.
pub struct ToyChannel {
    pub n_rx: usize,
    pub n_tx: usize,
    pub h: Vec<(f64, f64)>,
}

impl ToyChannel {
    /// Noiseless `[Re(Hx); Im(Hx)]` for per-user class indices.
    pub fn features(&self, classes: &[u8]) -> Vec<f64> {
        let mut re = vec![0.0; self.n_rx];
        let mut im = vec![0.0; self.n_rx];
        for i in 0..self.n_rx {
            for (j, &c) in classes.iter().enumerate() {
                let (hr, hi) = self.h[i * self.n_tx + j];
                let (xr, xi) = QPSK[c as usize];
                re[i] += hr * xr - hi * xi;
                im[i] += hr * xi + hi * xr;
            }
        }
        re.into_iter().chain(im).collect()
    }

    /// Per-user classes minimizing `‖y − Hx‖²` over every candidate.
    pub fn ml_decode(&self, features: &[f64]) -> Vec<u8> {
        let total = 4usize.pow(self.n_tx as u32);
        let mut best = (f64::INFINITY, Vec::new());
        for joint in 0..total {
            let classes: Vec<u8> = (0..self.n_tx)
                .map(|u| ((joint >> (2 * u)) & 3) as u8)
                .collect();
            let d: f64 = self
                .features(&classes)
                .iter()
                .zip(features)
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            if d < best.0 {
                best = (d, classes);
            }
        }
        best.1
    }
}
