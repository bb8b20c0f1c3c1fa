//! Log-log least-squares exponent fits for convergence traces.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TAIL_FRACTION: f64 = 0.5;
pub const MIN_TAIL_POINTS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub tail_fraction: f64,
    pub n_points: usize,
    pub k_first: f64,
    pub k_last: f64,
    /// Fitted exponent `p` in `value ≈ c·k^p`.
    pub slope: f64,
    pub stderr: f64,
    pub intercept: f64,
}

/// Fits `log value = a + p log k` on the last `tail_fraction` of the
/// series (by point count). Points with `k = 0` are skipped because
/// `log 0` is undefined; every remaining tail value must be positive.
pub fn fit_rate(k: &[f64], value: &[f64], tail_fraction: f64) -> Result<RateFit> {
    if k.len() != value.len() {
        return Err(Error::dim("fit_rate", format!("{} abscissae vs {} values", k.len(), value.len())));
    }
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("tail_fraction must lie in (0, 1], got {tail_fraction}")));
    }
    let pts: Vec<(usize, f64, f64)> = k
        .iter()
        .zip(value)
        .enumerate()
        .filter(|(_, (kk, _))| **kk > 0.0)
        .map(|(i, (kk, v))| (i, *kk, *v))
        .collect();
    let n_tail = ((pts.len() as f64) * tail_fraction).round() as usize;
    if n_tail < MIN_TAIL_POINTS {
        return Err(Error::InvalidArgument(format!(
            "rate fit needs at least {MIN_TAIL_POINTS} tail points with k > 0, got {n_tail}"
        )));
    }
    let tail = &pts[pts.len() - n_tail..];
    for &(row, kk, v) in tail {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "row {row} (k = {kk}) has non-positive or non-finite value {v}; cannot take its logarithm"
            )));
        }
    }
    let xs: Vec<f64> = tail.iter().map(|p| p.1.ln()).collect();
    let ys: Vec<f64> = tail.iter().map(|p| p.2.ln()).collect();
    let n = n_tail as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if !(sxx > 0.0) {
        return Err(Error::InvalidArgument("rate fit needs at least two distinct k values".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let stderr = if n_tail > 2 { (sse / (n - 2.0) / sxx).sqrt() } else { f64::NAN };
    Ok(RateFit {
        tail_fraction,
        n_points: n_tail,
        k_first: tail[0].1,
        k_last: tail[n_tail - 1].1,
        slope,
        stderr,
        intercept,
    })
}

/// Pointwise mean over seeds; every series must share the same abscissae.
pub fn average_series(series: &[(Vec<f64>, Vec<f64>)]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (k0, _) = series.first().ok_or_else(|| Error::InvalidArgument("no series to average".into()))?;
    let mut mean = vec![0.0; k0.len()];
    for (i, (k, v)) in series.iter().enumerate() {
        if k != k0 || v.len() != k0.len() {
            return Err(Error::InvalidArgument(format!("series {i} does not share the abscissae of series 0")));
        }
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    let s = series.len() as f64;
    mean.iter_mut().for_each(|m| *m /= s);
    Ok((k0.clone(), mean))
}
