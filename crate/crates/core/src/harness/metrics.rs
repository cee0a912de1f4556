use crate::error::{Error, Result};
use crate::modem::SymbolLabel;

fn check(decisions: &[SymbolLabel], labels: &[SymbolLabel]) -> Result<()> {
    if decisions.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} decisions for {} labels",
            decisions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Argument("SER of an empty block".into()));
    }
    Ok(())
}

/// Symbol error rate: a symbol vector counts as wrong if any user is wrong.
pub fn ser(decisions: &[SymbolLabel], labels: &[SymbolLabel]) -> Result<f64> {
    check(decisions, labels)?;
    let wrong = decisions.iter().zip(labels).filter(|(d, l)| d != l).count();
    Ok(wrong as f64 / labels.len() as f64)
}

/// Error rate of each user's stream separately.
pub fn per_user_ser(decisions: &[SymbolLabel], labels: &[SymbolLabel]) -> Result<Vec<f64>> {
    check(decisions, labels)?;
    let users = labels[0].n_users();
    let mut wrong = vec![0usize; users];
    for (d, l) in decisions.iter().zip(labels) {
        if d.n_users() != users || l.n_users() != users {
            return Err(Error::Dimension("user count varies across symbols".into()));
        }
        for u in 0..users {
            if d.per_user[u] != l.per_user[u] {
                wrong[u] += 1;
            }
        }
    }
    Ok(wrong
        .into_iter()
        .map(|w| w as f64 / labels.len() as f64)
        .collect())
}

/// Running mean of a per-block series.
pub fn cumulative(series: &[f64]) -> Vec<f64> {
    let mut sum = 0.0;
    series
        .iter()
        .enumerate()
        .map(|(i, v)| {
            sum += v;
            sum / (i + 1) as f64
        })
        .collect()
}

/// `10·log10(poisoned / clean)`.
pub fn degradation_db(clean: f64, poisoned: f64) -> Result<f64> {
    if !(clean > 0.0) {
        return Err(Error::UndefinedRatio(format!(
            "clean SER is {clean}; the dB ratio is undefined"
        )));
    }
    if poisoned < 0.0 {
        return Err(Error::Range(format!("poisoned SER {poisoned} is negative")));
    }
    Ok(10.0 * (poisoned / clean).log10())
}
