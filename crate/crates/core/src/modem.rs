//! QPSK mapping, label encodings and the complex-to-real feature adapter.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Constellation size |S|.
pub const QPSK_ORDER: usize = 4;

const AMP: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Per-user class indices of one transmitted symbol vector.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SymbolLabel {
    pub per_user: Vec<u8>,
}

impl SymbolLabel {
    pub fn new(per_user: Vec<u8>) -> Result<Self> {
        if let Some(bad) = per_user.iter().find(|&&c| c as usize >= QPSK_ORDER) {
            return Err(Error::Range(format!("QPSK index {bad}")));
        }
        Ok(SymbolLabel { per_user })
    }

    pub fn from_joint(joint: usize, n_users: usize) -> Result<Self> {
        Ok(SymbolLabel {
            per_user: users_of(joint, n_users)?,
        })
    }

    pub fn joint(&self) -> usize {
        // per_user is range-checked on construction
        joint_of(&self.per_user).expect("validated label")
    }

    pub fn n_users(&self) -> usize {
        self.per_user.len()
    }
}

/// Gray-mapped QPSK point for a class index:
/// 0 → (+1+ι)/√2, 1 → (+1−ι)/√2, 2 → (−1+ι)/√2, 3 → (−1−ι)/√2.
pub fn qpsk_point(index: u8) -> Result<Complex64> {
    if index as usize >= QPSK_ORDER {
        return Err(Error::Range(format!("QPSK index {index}")));
    }
    let re = if index & 2 == 0 { AMP } else { -AMP };
    let im = if index & 1 == 0 { AMP } else { -AMP };
    Ok(Complex64::new(re, im))
}

/// Maps per-user class indices onto a transmit vector.
pub fn modulate(per_user: &[u8]) -> Result<Vec<Complex64>> {
    per_user.iter().map(|&i| qpsk_point(i)).collect()
}

/// Nearest QPSK point (quadrant decision). Zero components decide `+`.
pub fn demodulate_hard(x: Complex64) -> u8 {
    (u8::from(x.re < 0.0) << 1) | u8::from(x.im < 0.0)
}

/// Joint index Σ per_user[u]·4^u (user 0 is least significant).
pub fn joint_of(per_user: &[u8]) -> Result<usize> {
    let mut joint = 0usize;
    for (u, &c) in per_user.iter().enumerate() {
        if c as usize >= QPSK_ORDER {
            return Err(Error::Range(format!("user {u} has class {c}")));
        }
        joint += c as usize * QPSK_ORDER.pow(u as u32);
    }
    Ok(joint)
}

pub fn users_of(joint: usize, n_users: usize) -> Result<Vec<u8>> {
    let classes = QPSK_ORDER.pow(n_users as u32);
    if joint >= classes {
        return Err(Error::Range(format!(
            "joint index {joint} with {n_users} users ({classes} classes)"
        )));
    }
    let mut rest = joint;
    Ok((0..n_users)
        .map(|_| {
            let c = (rest % QPSK_ORDER) as u8;
            rest /= QPSK_ORDER;
            c
        })
        .collect())
}

/// `[Re(y); Im(y)]`.
pub fn real_features(y: &[Complex64]) -> Vec<f64> {
    y.iter().map(|c| c.re).chain(y.iter().map(|c| c.im)).collect()
}

/// Inverse of [`real_features`].
pub fn from_real_features(features: &[f64]) -> Result<Vec<Complex64>> {
    if features.len() % 2 != 0 {
        return Err(Error::Dimension(format!(
            "odd feature length {}",
            features.len()
        )));
    }
    let n = features.len() / 2;
    Ok((0..n)
        .map(|i| Complex64::new(features[i], features[n + i]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_zero_maps_to_first_quadrant() {
        let p = qpsk_point(0).unwrap();
        assert_eq!(p, Complex64::new(AMP, AMP));
        assert!(qpsk_point(4).is_err());
        assert!(modulate(&[0, 7]).is_err());
    }

    #[test]
    fn constellation_has_unit_power() {
        let mut total = 0.0;
        for i in 0..4u8 {
            let p = qpsk_point(i).unwrap();
            assert!((p.norm() - 1.0).abs() < 1e-15);
            total += p.norm_sqr();
            assert_eq!(demodulate_hard(p), i);
        }
        assert!((total / 4.0 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn joint_positional_encoding() {
        assert_eq!(joint_of(&[0, 0, 0, 0]).unwrap(), 0);
        assert_eq!(joint_of(&[1, 0, 0, 0]).unwrap(), 1);
        assert_eq!(joint_of(&[0, 1, 0, 0]).unwrap(), 4);
        assert!(joint_of(&[0, 4]).is_err());
        assert!(users_of(256, 4).is_err());
    }

    #[test]
    fn joint_bijection_is_exhaustive() {
        let mut seen = vec![false; 256];
        for joint in 0..256 {
            let users = users_of(joint, 4).unwrap();
            assert_eq!(joint_of(&users).unwrap(), joint);
            seen[joint] = true;
        }
        // enumerate tuples independently of users_of
        for a in 0..4u8 {
            for b in 0..4u8 {
                for c in 0..4u8 {
                    for d in 0..4u8 {
                        let j = joint_of(&[a, b, c, d]).unwrap();
                        assert_eq!(users_of(j, 4).unwrap(), vec![a, b, c, d]);
                    }
                }
            }
        }
        assert!(seen.into_iter().all(|s| s));
    }

    #[test]
    fn real_features_layout() {
        let y = [
            Complex64::new(1.0, 2.0),
            Complex64::new(0.0, 0.0),
            Complex64::new(0.0, 0.0),
            Complex64::new(0.0, 0.0),
        ];
        let f = real_features(&y);
        assert_eq!(f, vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0]);
        assert_eq!(from_real_features(&f).unwrap(), y.to_vec());
    }
}
