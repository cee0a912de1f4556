use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam optimizer state with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, params: &[Tensor]) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            first_moment: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update using each parameter's stored gradient. A missing
    /// gradient counts as zero. Nothing is modified if any gradient is
    /// non-finite.
    pub fn step(&mut self, params: &mut [Tensor]) -> Result<()> {
        if params.len() != self.first_moment.len() {
            return Err(Error::Dimension(format!(
                "optimizer tracks {} tensors, got {}",
                self.first_moment.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.len() != self.first_moment[i].len() {
                return Err(Error::Dimension(format!(
                    "parameter {i} has {} entries, moments have {}",
                    p.len(),
                    self.first_moment[i].len()
                )));
            }
            if let Some(g) = p.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient in parameter {i}"
                    )));
                }
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = p.grad().map(<[f64]>::to_vec) else {
                // zero gradient: decay the moments, apply what momentum remains
                let m = &mut self.first_moment[i];
                let v = &mut self.second_moment[i];
                let data = p.data_mut();
                for j in 0..data.len() {
                    m[j] *= self.beta1;
                    v[j] *= self.beta2;
                    data[j] -= self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                }
                continue;
            };
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            let data = p.data_mut();
            for j in 0..data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                data[j] -= self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
