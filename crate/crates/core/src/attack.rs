//! Transfer-based pilot poisoning.
//!
//! The attacker holds a frozen surrogate detector. For each pilot it runs
//! sign-gradient ascent on the surrogate loss inside a componentwise box of
//! radius `eps` around the clean features, clipped to `[I_min, I_max]`, and
//! the perturbed pilots replace the clean ones before the receiver trains.
//! Labels and information symbols are never touched.

use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::ReceivedSymbol;
use crate::error::{Error, Result};
use crate::harness::TransmissionBlock;
use crate::modem::{self, SymbolLabel};
use crate::numerics::Tensor;
use crate::receivers::Detector;

/// How the magnitude of a received vector is read when deriving `I_max`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipNorm {
    /// Largest absolute real feature.
    #[default]
    MaxAbsFeature,
    /// Largest complex-entry modulus.
    ComplexModulus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Norm reported for the constraint. The mechanics are always a sign
    /// step with a componentwise box; this field is metadata.
    pub p_norm: u32,
    pub eps: f64,
    pub step: f64,
    pub iters: usize,
    /// `y* ← clip(y* + γ·g)` when true, `y* ← clip(y + γ·g)` when false.
    pub accumulate: bool,
    pub clip_norm: ClipNorm,
    /// Fixed `I_max`; derived from the pilots when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub i_max: Option<f64>,
    /// Poison every `cadence`-th block (1 = every block).
    pub cadence: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            p_norm: 2,
            eps: 0.3,
            step: 0.01,
            iters: 250,
            accumulate: true,
            clip_norm: ClipNorm::MaxAbsFeature,
            i_max: None,
            cadence: 1,
        }
    }
}

impl AttackConfig {
    /// `eps = 0` is accepted and leaves every pilot at its clipped value.
    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::config("attack.eps", "must be finite and non-negative"));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::config("attack.step", "must be positive"));
        }
        if self.iters == 0 {
            return Err(Error::config("attack.iters", "need at least one iteration"));
        }
        if self.cadence == 0 {
            return Err(Error::config("attack.cadence", "must be at least 1"));
        }
        if let Some(m) = self.i_max {
            if !(m > 0.0 && m.is_finite()) {
                return Err(Error::config("attack.i_max", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn poisons_block(&self, block_index: usize) -> bool {
        block_index % self.cadence == 0
    }
}

/// `(I_min, I_max)` with `I_min = -I_max`.
pub fn compute_clip_bounds(pilots: &Tensor, norm: ClipNorm) -> Result<(f64, f64)> {
    if pilots.rows() == 0 {
        return Err(Error::Argument("clip bounds need at least one pilot".into()));
    }
    let i_max = match norm {
        ClipNorm::MaxAbsFeature => pilots.max_abs(),
        ClipNorm::ComplexModulus => {
            let half = pilots.row_len() / 2;
            (0..pilots.rows())
                .flat_map(|r| {
                    let row = pilots.row(r);
                    (0..half).map(move |i| Complex64::new(row[i], row[half + i]).norm())
                })
                .fold(0.0, f64::max)
        }
    };
    Ok((-i_max, i_max))
}

/// Clean and perturbed pilot features, row-aligned with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PoisonedPilotSet {
    pub originals: Tensor,
    pub perturbed: Tensor,
    pub labels: Vec<SymbolLabel>,
    pub i_min: f64,
    pub i_max: f64,
    /// Rows whose gradient went non-finite; they carry no perturbation.
    pub skipped: Vec<usize>,
    /// Mean surrogate loss before each iteration and after the last one.
    pub loss_trace: Vec<f64>,
}

impl PoisonedPilotSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-row perturbation `perturbed - original`.
    pub fn delta(&self) -> Tensor {
        let d = self
            .perturbed
            .data()
            .iter()
            .zip(self.originals.data())
            .map(|(p, o)| p - o)
            .collect();
        Tensor::new(self.perturbed.shape().to_vec(), d).expect("aligned shapes")
    }

    pub fn perturbed_symbols(&self) -> Result<Vec<ReceivedSymbol>> {
        (0..self.perturbed.rows())
            .map(|r| {
                Ok(ReceivedSymbol {
                    y: modem::from_real_features(self.perturbed.row(r))?,
                })
            })
            .collect()
    }

    /// Writes `block,symbol_index,clean_*,poisoned_*,label_*` rows.
    pub fn write_csv(&self, block_index: usize, out: impl Write) -> Result<()> {
        let width = self.originals.row_len();
        let users = self.labels.first().map_or(0, SymbolLabel::n_users);
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["block".to_string(), "symbol_index".to_string()];
        header.extend((0..width).map(|i| format!("clean_{i}")));
        header.extend((0..width).map(|i| format!("poisoned_{i}")));
        header.extend((0..users).map(|u| format!("label_{u}")));
        w.write_record(&header).map_err(csv_err)?;
        for (r, label) in self.labels.iter().enumerate() {
            let mut rec = vec![block_index.to_string(), r.to_string()];
            rec.extend(self.originals.row(r).iter().map(|v| format!("{v:?}")));
            rec.extend(self.perturbed.row(r).iter().map(|v| format!("{v:?}")));
            rec.extend(label.per_user.iter().map(u8::to_string));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, block_index: usize, path: &Path) -> Result<()> {
        self.write_csv(block_index, std::fs::File::create(path)?)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Sign-gradient ascent poisoning of every pilot against a frozen surrogate.
///
/// Rows are independent (the surrogate is evaluated in inference mode), so
/// the whole pilot set is updated as one batch.
pub fn pgd_poison(
    surrogate: &Detector,
    pilots: &Tensor,
    labels: &[SymbolLabel],
    cfg: &AttackConfig,
    rng: &mut impl Rng,
) -> Result<PoisonedPilotSet> {
    cfg.validate()?;
    if pilots.rows() != labels.len() {
        return Err(Error::Argument(format!(
            "{} pilots but {} labels",
            pilots.rows(),
            labels.len()
        )));
    }
    if pilots.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("pilot features must be finite".into()));
    }
    let (i_min, i_max) = match cfg.i_max {
        Some(m) => (-m, m),
        None => compute_clip_bounds(pilots, cfg.clip_norm)?,
    };
    let eps = cfg.eps;
    let width = pilots.row_len();
    let clip = |v: f64| v.clamp(i_min, i_max);
    let orig = pilots.data();

    let mut cur: Vec<f64> = orig
        .iter()
        .map(|&y| {
            let d0 = if eps > 0.0 { rng.gen_range(-eps..=eps) } else { 0.0 };
            clip(y + d0)
        })
        .collect();
    let mut skipped = vec![false; pilots.rows()];
    let mut loss_trace = Vec::with_capacity(cfg.iters + 1);

    for _ in 0..cfg.iters {
        let x = Tensor::new(pilots.shape().to_vec(), cur.clone())?;
        let (grad, loss) = surrogate.input_grad(&x, labels)?;
        loss_trace.push(loss);
        let g = grad.data();
        for r in 0..pilots.rows() {
            let span = r * width..(r + 1) * width;
            if skipped[r] {
                continue;
            }
            if g[span.clone()].iter().any(|v| !v.is_finite()) {
                skipped[r] = true;
                continue;
            }
            for i in span {
                let base = if cfg.accumulate { cur[i] } else { orig[i] };
                let stepped = clip(base + cfg.step * sign(g[i]));
                cur[i] = project(orig[i], stepped, eps, i_min, i_max);
            }
        }
    }
    let skipped: Vec<usize> = skipped
        .iter()
        .enumerate()
        .filter_map(|(r, &s)| s.then_some(r))
        .collect();
    for &r in &skipped {
        for i in r * width..(r + 1) * width {
            cur[i] = clip(orig[i]);
        }
    }
    let perturbed = Tensor::new(pilots.shape().to_vec(), cur)?;
    loss_trace.push(surrogate.loss(&perturbed, labels)?);
    Ok(PoisonedPilotSet {
        originals: pilots.clone(),
        perturbed,
        labels: labels.to_vec(),
        i_min,
        i_max,
        skipped,
        loss_trace,
    })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `y + clip(y* - y, -eps, eps)`, then a final clamp to `[i_min, i_max]`.
/// `y ± eps` can round one ulp outside the box; such values are stepped
/// back so `|out - y| <= eps` holds in floating point.
fn project(y: f64, candidate: f64, eps: f64, i_min: f64, i_max: f64) -> f64 {
    let d = candidate - y;
    let mut out = if d > eps {
        y + eps
    } else if d < -eps {
        y - eps
    } else {
        candidate
    };
    while out - y > eps {
        out = out.next_down();
    }
    while y - out > eps {
        out = out.next_up();
    }
    out.clamp(i_min, i_max)
}

/// Replaces the block's pilot features with the poisoned ones. An empty
/// poison set leaves the block unchanged.
pub fn inject(block: &TransmissionBlock, poison: &PoisonedPilotSet) -> Result<TransmissionBlock> {
    if poison.is_empty() {
        return Ok(block.clone());
    }
    if poison.perturbed.shape() != block.pilot_rx.shape() || poison.labels != block.pilot_labels {
        return Err(Error::Argument(
            "poison set is not aligned with the block's pilots".into(),
        ));
    }
    let mut out = block.clone();
    out.pilot_rx = poison.perturbed.clone();
    Ok(out)
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn single_grad(model: &Detector, y: &[f64], label: &SymbolLabel) -> Result<Vec<f64>> {
    let x = Tensor::new(vec![1, y.len()], y.to_vec())?;
    Ok(model
        .input_grad(&x, std::slice::from_ref(label))?
        .0
        .into_data())
}

/// `eps · ∇L / ‖∇L‖₂`: the single-step L2 ascent direction.
pub fn l2_optimal_delta(
    model: &Detector,
    y: &[f64],
    label: &SymbolLabel,
    eps: f64,
) -> Result<Vec<f64>> {
    let g = single_grad(model, y, label)?;
    let n = norm2(&g);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::DegenerateGradient(format!(
            "input gradient norm is {n}"
        )));
    }
    Ok(g.iter().map(|v| eps * v / n).collect())
}

/// First-order transfer of the surrogate's L2 step onto the target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransferDiagnostic {
    /// `δ*ᵀ ∇L_target` with `δ*` taken from the surrogate.
    pub actual: f64,
    /// `eps · ‖∇L_target‖₂`, the white-box optimum.
    pub bound: f64,
    pub cosine: f64,
}

pub fn transfer_diagnostic(
    surrogate: &Detector,
    target: &Detector,
    y: &[f64],
    label: &SymbolLabel,
    eps: f64,
) -> Result<TransferDiagnostic> {
    let gt = single_grad(target, y, label)?;
    let nt = norm2(&gt);
    if !(nt > 0.0) {
        return Err(Error::UndefinedRatio(
            "target input gradient is zero; cosine undefined".into(),
        ));
    }
    let gs = single_grad(surrogate, y, label)?;
    let ns = norm2(&gs);
    if !(ns > 0.0) {
        return Err(Error::DegenerateGradient(
            "surrogate input gradient is zero".into(),
        ));
    }
    let cosine = (dot(&gs, &gt) / (ns * nt)).clamp(-1.0, 1.0);
    Ok(TransferDiagnostic {
        actual: eps * nt * cosine,
        bound: eps * nt,
        cosine,
    })
}
