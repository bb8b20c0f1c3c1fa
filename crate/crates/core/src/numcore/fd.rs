//! Central finite-difference oracles.
//!
//! These are deliberately independent of every analytic gradient in the
//! crate: they only ever call the scalar function they are given.

use serde::{Deserialize, Serialize};

use super::linalg::{sym2_eigenvalues, Mat, Vector};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Off-diagonal disagreement above which a slice Hessian carries a warning.
pub const ASYMMETRY_WARN: f64 = 1e-4;

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            context: format!("finite-difference evaluation at {what}"),
        })
    }
}

/// `(f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h` for every coordinate.
pub fn fd_grad<F>(f: F, x: &Vector, h: f64) -> Result<Vector>
where
    F: Fn(&Vector) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let xi = x[i];
        probe[i] = xi + h;
        let up = finite(f(&probe)?, "x + h e_i")?;
        probe[i] = xi - h;
        let down = finite(f(&probe)?, "x - h e_i")?;
        probe[i] = xi;
        out.push((up - down) / (2.0 * h));
    }
    Ok(Vector::from_vec(out))
}

/// Matrix-argument convenience wrapper around [`fd_grad`].
pub fn fd_grad_mat<F>(f: F, x: &Mat, h: f64) -> Result<Mat>
where
    F: Fn(&Mat) -> Result<f64>,
{
    let (r, c) = x.shape();
    let flat = Vector::from_vec(x.as_slice().to_vec());
    let g = fd_grad(|v: &Vector| f(&Mat::from_raw(r, c, v.as_slice().to_vec())), &flat, h)?;
    Ok(Mat::from_raw(r, c, g.into_vec()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hessian2d {
    /// Symmetrized second-difference matrix, row-major.
    pub matrix: [[f64; 2]; 2],
    pub lambda_max: f64,
    pub lambda_min: f64,
    pub trace: f64,
    /// Gap between the forward and backward mixed-difference stencils.
    pub asymmetry: f64,
    pub warning: Option<String>,
}

/// Second-difference Hessian of a two-variable function at the origin.
///
/// Diagonal entries use the three-point stencil, the mixed entry the
/// four-point cross stencil. The forward and backward one-sided mixed
/// stencils are compared; a gap beyond [`ASYMMETRY_WARN`] (relative to the
/// curvature scale) is recorded as a warning rather than an error.
pub fn fd_hessian_2d<F>(f: F, h: f64) -> Result<Hessian2d>
where
    F: Fn(f64, f64) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let e = |a: f64, b: f64| -> Result<f64> { finite(f(a, b)?, "slice point") };
    let f00 = e(0.0, 0.0)?;
    let fp0 = e(h, 0.0)?;
    let fm0 = e(-h, 0.0)?;
    let f0p = e(0.0, h)?;
    let f0m = e(0.0, -h)?;
    let fpp = e(h, h)?;
    let fpm = e(h, -h)?;
    let fmp = e(-h, h)?;
    let fmm = e(-h, -h)?;
    let h2 = h * h;
    let h11 = (fp0 - 2.0 * f00 + fm0) / h2;
    let h22 = (f0p - 2.0 * f00 + f0m) / h2;
    let h12 = (fpp - fpm - fmp + fmm) / (4.0 * h2);
    let forward = (fpp - fp0 - f0p + f00) / h2;
    let backward = (f00 - fm0 - f0m + fmm) / h2;
    let asymmetry = (forward - backward).abs();
    let scale = 1.0f64.max(h11.abs()).max(h22.abs()).max(h12.abs());
    let warning = (asymmetry > ASYMMETRY_WARN * scale).then(|| {
        format!("mixed-difference stencils disagree by {asymmetry:.3e} (forward {forward:.6e}, backward {backward:.6e})")
    });
    let (lambda_max, lambda_min) = sym2_eigenvalues(h11, h12, h22);
    Ok(Hessian2d {
        matrix: [[h11, h12], [h12, h22]],
        lambda_max,
        lambda_min,
        trace: h11 + h22,
        asymmetry,
        warning,
    })
}
