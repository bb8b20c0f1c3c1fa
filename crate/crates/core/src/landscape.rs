//! Two-dimensional slices of the joint objective `f(·, w)` and of the
//! reduced objective `Φ` around a body iterate, with slice curvature.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{fd_hessian_2d, Mat, Rng, Vector};
use crate::optimizer::fmt_f64;
use crate::problems::{LayeredParams, Objective};
use crate::stackelberg::{best_response_from, BEST_RESPONSE_TOL};

pub const DEFAULT_RESOLUTION: usize = 41;
pub const DEFAULT_ETA_MAX: f64 = 1.0;
pub const DEFAULT_FD_STEP: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceMode {
    /// `f(M, w)` with `w` held at a fixed vector.
    Joint,
    /// `Φ(M) = f(M, w*(M))`.
    Stackelberg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceSpec {
    pub center: Mat,
    pub d1: Mat,
    pub d2: Mat,
    pub eta_max: f64,
    /// Points per axis.
    pub resolution: usize,
    pub mode: SliceMode,
    /// Step of the difference stencils for the slice gradient and Hessian.
    pub fd_step: f64,
    pub inner_tol: f64,
}

/// Grid and stencil settings shared by every checkpoint of a study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SliceTemplate {
    pub eta_max: f64,
    pub resolution: usize,
    pub fd_step: f64,
    pub inner_tol: f64,
}

impl Default for SliceTemplate {
    fn default() -> Self {
        Self {
            eta_max: DEFAULT_ETA_MAX,
            resolution: DEFAULT_RESOLUTION,
            fd_step: DEFAULT_FD_STEP,
            inner_tol: BEST_RESPONSE_TOL,
        }
    }
}

/// Two i.i.d. standard normal directions, each scaled to unit Frobenius norm.
pub fn random_directions(shape: (usize, usize), rng: &mut Rng) -> Result<(Mat, Mat)> {
    let (r, c) = shape;
    let mut draw = || -> Result<Mat> {
        let m = Mat::new(r, c, rng.normals(r * c))?;
        let n = m.frob_norm();
        Ok(m.scaled(1.0 / n))
    };
    let d1 = draw()?;
    let mut d2 = draw()?;
    while d2.frob_dist(&d1) < 1e-12 {
        d2 = draw()?;
    }
    Ok((d1, d2))
}

impl SliceSpec {
    pub fn new(center: Mat, d1: Mat, d2: Mat, mode: SliceMode, template: &SliceTemplate) -> Result<Self> {
        let spec = Self {
            center,
            d1,
            d2,
            eta_max: template.eta_max,
            resolution: template.resolution,
            mode,
            fd_step: template.fd_step,
            inner_tol: template.inner_tol,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d1.shape() != self.center.shape() || self.d2.shape() != self.center.shape() {
            return Err(Error::dim("SliceSpec", "directions must match the center's shape"));
        }
        if self.d1.frob_dist(&self.d2) == 0.0 {
            return Err(Error::InvalidArgument("slice directions must be distinct".into()));
        }
        if self.resolution < 3 {
            return Err(Error::InvalidArgument(format!("grid resolution must be >= 3, got {}", self.resolution)));
        }
        if !(self.eta_max > 0.0) || !(self.fd_step > 0.0) || !(self.inner_tol > 0.0) {
            return Err(Error::InvalidArgument("eta_max, fd_step and inner_tol must be positive".into()));
        }
        Ok(())
    }

    pub fn etas(&self) -> Vec<f64> {
        let n = self.resolution;
        (0..n).map(|i| -self.eta_max + 2.0 * self.eta_max * i as f64 / (n - 1) as f64).collect()
    }

    pub fn point(&self, e1: f64, e2: f64) -> Mat {
        let mut m = self.center.clone();
        m.axpy(e1, &self.d1);
        m.axpy(e2, &self.d2);
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceResult {
    pub mode: SliceMode,
    pub etas: Vec<f64>,
    /// Row-major over `(η₁, η₂)`; `NaN` at invalid points.
    pub values: Vec<f64>,
    pub feasible: Vec<bool>,
    pub center_value: f64,
    pub hessian2d: [[f64; 2]; 2],
    pub lambda_max: f64,
    pub trace: f64,
    pub grad2d: [f64; 2],
    pub grad_norm: f64,
    pub invalid_points: usize,
    pub inner_tol: f64,
    pub hessian_warning: Option<String>,
}

struct SliceEval<'a, O: ?Sized> {
    obj: &'a O,
    spec: &'a SliceSpec,
    w_fixed: Option<&'a Vector>,
}

impl<O: Objective + ?Sized> SliceEval<'_, O> {
    /// Value at `M` with `w` fixed or best-responding, plus the `w*` used.
    fn value(&self, body: &Mat, warm: Option<&Vector>) -> Result<(f64, Option<Vector>)> {
        match self.spec.mode {
            SliceMode::Joint => {
                let w = self.w_fixed.expect("checked by sweep");
                Ok((self.obj.loss(&LayeredParams::new(body.clone(), w.clone())?)?, None))
            }
            SliceMode::Stackelberg => {
                let br = best_response_from(self.obj, body, self.spec.inner_tol, warm)?;
                let v = self.obj.loss(&LayeredParams::new(body.clone(), br.w_star.clone())?)?;
                Ok((v, Some(br.w_star)))
            }
        }
    }
}

/// Evaluates the slice on its grid and the slice gradient and Hessian at
/// the center. Grid points outside ℳ are projected and flagged; points
/// where the best response fails are recorded as invalid.
pub fn sweep<O: Objective + Sync + ?Sized>(spec: &SliceSpec, obj: &O, w_fixed: Option<&Vector>) -> Result<SliceResult> {
    spec.validate()?;
    if spec.center.shape() != obj.body_shape() {
        return Err(Error::dim("sweep", format!("center {:?} vs body {:?}", spec.center.shape(), obj.body_shape())));
    }
    if spec.mode == SliceMode::Joint && w_fixed.is_none() {
        return Err(Error::InvalidArgument("joint-mode slices need a fixed head".into()));
    }
    let ev = SliceEval { obj, spec, w_fixed };
    let etas = spec.etas();
    let set = obj.body_set();
    // Rows in parallel; within a row each best response warm-starts from
    // its left neighbour.
    let rows: Vec<Vec<(f64, bool)>> = etas
        .par_iter()
        .map(|&e1| {
            let mut warm: Option<Vector> = None;
            etas.iter()
                .map(|&e2| {
                    let raw = spec.point(e1, e2);
                    let feasible = set.contains(raw.as_slice(), 1e-12);
                    let body = if feasible { raw } else { set.project_mat(&raw) };
                    match ev.value(&body, warm.as_ref()) {
                        Ok((v, w)) if v.is_finite() => {
                            warm = w;
                            (v, feasible)
                        }
                        _ => (f64::NAN, feasible),
                    }
                })
                .collect()
        })
        .collect();
    let values: Vec<f64> = rows.iter().flatten().map(|p| p.0).collect();
    let feasible: Vec<bool> = rows.iter().flatten().map(|p| p.1).collect();
    let invalid_points = values.iter().filter(|v| v.is_nan()).count();

    let (center_value, center_w) = ev.value(&spec.center, None)?;
    let local = |a: f64, b: f64| ev.value(&spec.point(a, b), center_w.as_ref()).map(|p| p.0);
    let h = spec.fd_step;
    let g1 = (local(h, 0.0)? - local(-h, 0.0)?) / (2.0 * h);
    let g2 = (local(0.0, h)? - local(0.0, -h)?) / (2.0 * h);
    let hess = fd_hessian_2d(local, h)?;
    Ok(SliceResult {
        mode: spec.mode,
        etas,
        values,
        feasible,
        center_value,
        hessian2d: hess.matrix,
        lambda_max: hess.lambda_max,
        trace: hess.trace,
        grad2d: [g1, g2],
        grad_norm: g1.hypot(g2),
        invalid_points,
        inner_tol: spec.inner_tol,
        hessian_warning: hess.warning,
    })
}

impl SliceResult {
    pub fn surface_csv(&self) -> String {
        let mut s = String::from("eta1,eta2,value,feasible\n");
        let n = self.etas.len();
        for i in 0..n {
            for j in 0..n {
                let v = self.values[i * n + j];
                let _ = writeln!(
                    s,
                    "{},{},{},{}",
                    fmt_f64(self.etas[i]),
                    fmt_f64(self.etas[j]),
                    if v.is_nan() { String::new() } else { fmt_f64(v) },
                    self.feasible[i * n + j]
                );
            }
        }
        s
    }

    pub fn summary(&self, k: u64) -> SliceSummary {
        SliceSummary {
            k,
            mode: self.mode,
            lambda_max: self.lambda_max,
            trace: self.trace,
            grad_norm: self.grad_norm,
            invalid_points: self.invalid_points,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceSummary {
    pub k: u64,
    pub mode: SliceMode,
    pub lambda_max: f64,
    pub trace: f64,
    pub grad_norm: f64,
    pub invalid_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSlices {
    pub k: u64,
    pub joint: SliceResult,
    pub stackelberg: SliceResult,
}

/// Paired joint/Stackelberg slices at each checkpoint, both modes sharing
/// one pair of directions drawn from `Rng::with_stream(direction_seed, k)`.
pub fn trajectory_study<O: Objective + Sync + ?Sized>(
    obj: &O,
    checkpoints: &[(u64, LayeredParams)],
    template: &SliceTemplate,
    direction_seed: u64,
) -> Result<Vec<CheckpointSlices>> {
    checkpoints
        .iter()
        .map(|(k, p)| {
            let mut rng = Rng::with_stream(direction_seed, *k);
            let (d1, d2) = random_directions(obj.body_shape(), &mut rng)?;
            let joint = SliceSpec::new(p.body.clone(), d1.clone(), d2.clone(), SliceMode::Joint, template)?;
            let stack = SliceSpec::new(p.body.clone(), d1, d2, SliceMode::Stackelberg, template)?;
            Ok(CheckpointSlices {
                k: *k,
                joint: sweep(&joint, obj, Some(&p.head))?,
                stackelberg: sweep(&stack, obj, None)?,
            })
        })
        .collect()
}
