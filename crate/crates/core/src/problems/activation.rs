use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Elementwise activation `φ` together with a fixed Clarke-subgradient
/// selection `φ′`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    /// Subgradient at 0 is 0 (the left derivative).
    #[default]
    Relu,
    /// Subgradient at 0 is `slope` (the left derivative).
    LeakyRelu { slope: f64 },
    Tanh,
    /// Logistic sigmoid `1 / (1 + e^{-a})`.
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(&self, a: f64) -> f64 {
        match *self {
            Activation::Identity => a,
            Activation::Relu => a.max(0.0),
            Activation::LeakyRelu { slope } => {
                if a > 0.0 {
                    a
                } else {
                    slope * a
                }
            }
            Activation::Tanh => a.tanh(),
            Activation::Sigmoid => sigmoid(a),
        }
    }

    #[inline]
    pub fn derivative(&self, a: f64) -> f64 {
        match *self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if a > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Tanh => {
                let t = a.tanh();
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = sigmoid(a);
                s * (1.0 - s)
            }
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match *self {
            Activation::Identity | Activation::Relu | Activation::Tanh => 1.0,
            Activation::LeakyRelu { slope } => slope.abs().max(1.0),
            Activation::Sigmoid => 0.25,
        }
    }

    /// Clarke derivative range `[lo, hi]` at the kink `a = 0` for the
    /// piecewise-linear variants.
    pub fn kink_range(&self) -> Option<(f64, f64)> {
        match *self {
            Activation::Relu => Some((0.0, 1.0)),
            Activation::LeakyRelu { slope } => Some((slope.min(1.0), slope.max(1.0))),
            _ => None,
        }
    }

    /// Differentiable with a Lipschitz derivative.
    pub fn is_smooth(&self) -> bool {
        matches!(self, Activation::Identity | Activation::Tanh | Activation::Sigmoid)
    }

    /// `a ↦ φ(a)²` has a Lipschitz derivative. True for every variant here:
    /// for the piecewise-linear ones the second derivative jumps between
    /// `2` and `2·slope²` but stays bounded.
    pub fn square_is_smooth(&self) -> bool {
        true
    }

    pub fn name(&self) -> String {
        match self {
            Activation::Identity => "identity".into(),
            Activation::Relu => "relu".into(),
            Activation::LeakyRelu { slope } => format!("leaky_relu({slope})"),
            Activation::Tanh => "tanh".into(),
            Activation::Sigmoid => "sigmoid".into(),
        }
    }

    pub fn require_smooth(&self, why: &str) -> Result<()> {
        if self.is_smooth() {
            Ok(())
        } else {
            Err(Error::ActivationNotAllowed {
                activation: self.name(),
                reason: format!("{why} requires a differentiable activation with Lipschitz derivative"),
            })
        }
    }
}

#[inline]
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^t)` without overflow.
#[inline]
pub fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}
