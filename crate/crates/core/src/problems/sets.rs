use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Mat, Rng, Vector};

/// Convex feasible set for one parameter block, with its Euclidean
/// projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintSet {
    /// The same interval `[lo, hi]` for every entry.
    Box { lo: f64, hi: f64 },
    /// `{x : ‖x‖ ≤ radius}` (Frobenius norm for matrices).
    FrobeniusBall { radius: f64 },
    /// No constraint; projection is the identity.
    Free,
}

impl ConstraintSet {
    /// A ball of radius `10·max(‖init‖, 1)`: compact, but far enough out that
    /// small-scale dynamics never touch it.
    pub fn large_ball_around(init_norm: f64) -> Self {
        ConstraintSet::FrobeniusBall {
            radius: 10.0 * init_norm.max(1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ConstraintSet::Box { lo, hi } if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() => {
                Err(Error::InvalidArgument(format!("box bounds [{lo}, {hi}] are not a finite interval")))
            }
            ConstraintSet::FrobeniusBall { radius } if !(radius >= 0.0) || !radius.is_finite() => {
                Err(Error::InvalidArgument(format!("ball radius {radius} must be finite and nonnegative")))
            }
            _ => Ok(()),
        }
    }

    pub fn is_bounded(&self) -> bool {
        !matches!(self, ConstraintSet::Free)
    }

    pub fn project_slice(&self, x: &mut [f64]) {
        match *self {
            ConstraintSet::Box { lo, hi } => {
                for v in x.iter_mut() {
                    *v = v.clamp(lo, hi);
                }
            }
            ConstraintSet::FrobeniusBall { radius } => {
                let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > radius * (1.0 + 4.0 * f64::EPSILON) {
                    let s = radius / norm;
                    for v in x.iter_mut() {
                        *v *= s;
                    }
                }
            }
            ConstraintSet::Free => {}
        }
    }

    pub fn project_mat(&self, m: &Mat) -> Mat {
        let mut out = m.clone();
        self.project_slice(out.as_mut_slice());
        out
    }

    pub fn project_vec(&self, v: &Vector) -> Vector {
        let mut out = v.clone();
        self.project_slice(out.as_mut_slice());
        out
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        match *self {
            ConstraintSet::Box { lo, hi } => x.iter().all(|&v| v >= lo - tol && v <= hi + tol),
            ConstraintSet::FrobeniusBall { radius } => {
                x.iter().map(|v| v * v).sum::<f64>().sqrt() <= radius * (1.0 + tol) + tol
            }
            ConstraintSet::Free => true,
        }
    }

    /// A random member: uniform for boxes, uniform in volume for balls.
    pub fn sample(&self, len: usize, rng: &mut Rng) -> Result<Vec<f64>> {
        match *self {
            ConstraintSet::Box { lo, hi } => Ok((0..len).map(|_| rng.uniform_in(lo, hi)).collect()),
            ConstraintSet::FrobeniusBall { radius } => {
                let mut x = rng.normals(len);
                let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                let r = radius * rng.uniform().powf(1.0 / len.max(1) as f64);
                for v in x.iter_mut() {
                    *v *= r / norm;
                }
                Ok(x)
            }
            ConstraintSet::Free => Err(Error::InvalidArgument(
                "cannot sample from an unbounded constraint set".into(),
            )),
        }
    }

    /// Largest distance between two members (∞ when unbounded).
    pub fn diameter(&self, len: usize) -> f64 {
        match *self {
            ConstraintSet::Box { lo, hi } => (hi - lo) * (len as f64).sqrt(),
            ConstraintSet::FrobeniusBall { radius } => 2.0 * radius,
            ConstraintSet::Free => f64::INFINITY,
        }
    }
}
