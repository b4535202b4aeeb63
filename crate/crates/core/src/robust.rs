//! Robust kernels for M-estimation.
//!
//! A kernel acts on the whitened residual norm `r = ‖e / σ‖` of a whole
//! factor. The cost is expressed on the squared norm `s = r²` so that the
//! kernel-free case reduces to ordinary least squares.

use serde::{Deserialize, Serialize};

/// Classical 95%-efficiency Huber threshold for unit-variance residuals.
pub const DEFAULT_HUBER_K: f64 = 1.345;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobustKernel {
    /// Plain squared loss.
    #[default]
    None,
    /// Quadratic inside `|r| ≤ k`, linear outside.
    Huber { k: f64 },
}

impl RobustKernel {
    pub fn huber(k: f64) -> Self {
        RobustKernel::Huber { k }
    }

    pub fn is_valid(&self) -> bool {
        match *self {
            RobustKernel::None => true,
            RobustKernel::Huber { k } => k.is_finite() && k > 0.0,
        }
    }

    /// Cost ρ(s) for a squared whitened norm `s`.
    pub fn cost(&self, squared_norm: f64) -> f64 {
        match *self {
            RobustKernel::None => squared_norm,
            RobustKernel::Huber { k } => {
                let r = squared_norm.sqrt();
                if r <= k {
                    squared_norm
                } else {
                    2.0 * k * r - k * k
                }
            }
        }
    }

    /// IRLS weight `ρ'(s)` for the whitened norm `r`.
    pub fn weight(&self, norm: f64) -> f64 {
        match *self {
            RobustKernel::None => 1.0,
            RobustKernel::Huber { k } => huber_weight(norm, k),
        }
    }
}

/// Huber IRLS weight: 1 inside the threshold, `k/|r|` outside.
pub fn huber_weight(r: f64, k: f64) -> f64 {
    let a = r.abs();
    if a <= k {
        1.0
    } else {
        k / a
    }
}
