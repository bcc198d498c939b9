//! Goodness-of-fit checks for Gaussianized data.

use crate::error::{Result, SctError};
use crate::special::norm_cdf;

/// Kolmogorov-Smirnov distance between the empirical distribution of
/// `values` and the standard normal.
pub fn ks_statistic(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(SctError::domain("KS statistic of an empty sample"));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len() as f64;
    Ok(v.iter().enumerate().fold(0.0_f64, |d, (k, &x)| {
        let f = norm_cdf(x);
        d.max(f - k as f64 / n).max((k + 1) as f64 / n - f)
    }))
}

/// Asymptotic 1% critical value of the one-sample KS statistic with
/// Stephens' small-sample correction.
pub fn ks_critical_1pct(n: usize) -> f64 {
    let s = (n as f64).sqrt();
    1.628 / (s + 0.12 + 0.11 / s)
}

/// Share of columns of an `N x L` matrix rejected by the 1% KS test.
pub fn ks_rejection_rate(z: &nalgebra::DMatrix<f64>) -> Result<f64> {
    let crit = ks_critical_1pct(z.nrows());
    let mut rejected = 0;
    for c in z.column_iter() {
        let vals: Vec<f64> = c.iter().cloned().collect();
        if ks_statistic(&vals)? > crit {
            rejected += 1;
        }
    }
    Ok(rejected as f64 / z.ncols() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_at_median() {
        assert!((ks_statistic(&[0.0]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn critical_value_shrinks_with_n() {
        assert!(ks_critical_1pct(20) > ks_critical_1pct(200));
        assert!((ks_critical_1pct(100) - 1.628 / 10.131).abs() < 1e-12);
    }
}
