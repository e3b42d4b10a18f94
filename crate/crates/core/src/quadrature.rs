//! Composite Gauss-Legendre rules for `∫₀^∞ g(t) dt`.
//!
//! The window `[t_min, t_max]` is mapped to `u = log t` and split into panels of
//! unit length; `[0, t_min]` gets one extra panel in linear `t`. The caller
//! bounds whatever lies beyond `t_max`.

use gauss_quad::GaussLegendre;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::scalar::Real;
use crate::spectral::SpectralDecomposition;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum QuadratureRule {
    /// Per-mode closed form when the symbol has one, quadrature otherwise.
    #[default]
    ClosedForm,
    /// Always integrate numerically.
    LogGauss,
}

/// Discretisation of a time integral. `None` bounds are filled from the spectrum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureSpec {
    #[serde(default)]
    pub rule: QuadratureRule,
    /// Nodes per panel.
    #[serde(default = "default_nodes")]
    pub nodes: usize,
    #[serde(default)]
    pub t_min: Option<f64>,
    #[serde(default)]
    pub t_max: Option<f64>,
}

fn default_nodes() -> usize {
    32
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec {
            rule: QuadratureRule::ClosedForm,
            nodes: default_nodes(),
            t_min: None,
            t_max: None,
        }
    }
}

impl QuadratureSpec {
    pub fn log_gauss(nodes: usize) -> Self {
        QuadratureSpec {
            rule: QuadratureRule::LogGauss,
            nodes,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes < 16 {
            return Err(LabError::validation("quadrature.nodes", "must be at least 16"));
        }
        if let Some(a) = self.t_min {
            if !(a > 0.0 && a.is_finite()) {
                return Err(LabError::validation("quadrature.t_min", "must be positive"));
            }
        }
        if let (Some(a), Some(b)) = (self.t_min, self.t_max) {
            if !(a < b) {
                return Err(LabError::validation("quadrature.t_max", "must exceed t_min"));
            }
        }
        Ok(())
    }

    /// Resolved `(t_min, t_max)`, or `None` when `L` has no positive eigenvalue.
    pub fn window<T: Real>(&self, dec: &SpectralDecomposition<T>) -> Result<Option<(T, T)>> {
        self.validate()?;
        let Some((lo, hi)) = dec.time_window() else {
            return Ok(None);
        };
        let lo = self.t_min.map(T::lit).unwrap_or(lo);
        let hi = self.t_max.map(T::lit).unwrap_or(hi);
        if !(lo < hi) {
            return Err(LabError::validation("quadrature.t_max", "must exceed t_min"));
        }
        Ok(Some((lo, hi)))
    }
}

/// Nodes `t_i` and weights `w_i` with `Σ w_i g(t_i) ≈ ∫₀^{t_max} g(t) dt`.
#[derive(Debug, Clone)]
pub struct TimeGrid<T> {
    pub t: Vec<T>,
    pub w: Vec<T>,
    pub t_max: T,
}

impl<T: Real> TimeGrid<T> {
    pub fn new(t_min: T, t_max: T, nodes: usize) -> Self {
        let rule = GaussLegendre::new(nodes.max(2).try_into().expect("nonzero"));
        let pairs = rule.as_node_weight_pairs();
        let half = T::lit(0.5);
        let mut t = Vec::new();
        let mut w = Vec::new();
        for &(x, wx) in pairs {
            let (x, wx) = (T::lit(x), T::lit(wx));
            t.push(half * t_min * (x + T::one()));
            w.push(half * t_min * wx);
        }
        let (ua, ub) = (t_min.ln(), t_max.ln());
        let panels = (ub - ua).ceil().to_usize().unwrap_or(1).max(1);
        let h = (ub - ua) / T::lit(panels as f64);
        for p in 0..panels {
            let a = ua + h * T::lit(p as f64);
            for &(x, wx) in pairs {
                let u = a + half * h * (T::lit(x) + T::one());
                let tu = u.exp();
                t.push(tu);
                w.push(half * h * T::lit(wx) * tu);
            }
        }
        TimeGrid { t, w, t_max }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integrates_exponential_over_wide_window() {
        for lambda in [1e-3, 0.7, 40.0] {
            let grid = TimeGrid::<f64>::new(1e-3 / 40.0, 1e3 / 1e-3, 32);
            let s: f64 = grid.t.iter().zip(&grid.w).map(|(t, w)| w * (-lambda * t).exp()).sum();
            assert!((s * lambda - 1.0).abs() < 1e-10, "{lambda}: {s}");
        }
    }

    #[test]
    fn gamma_moment() {
        let grid = TimeGrid::<f64>::new(1e-4, 1e4, 24);
        let s: f64 = grid
            .t
            .iter()
            .zip(&grid.w)
            .map(|(t, w)| w * t.powf(1.5) * (-2.0 * t).exp())
            .sum();
        let want = statrs::function::gamma::gamma(2.5) / 2f64.powf(2.5);
        assert!((s - want).abs() < 1e-12);
    }

    #[test]
    fn spec_validation() {
        assert!(QuadratureSpec { nodes: 8, ..Default::default() }.validate().is_err());
        let bad = QuadratureSpec {
            t_min: Some(2.0),
            t_max: Some(1.0),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(QuadratureSpec::default().validate().is_ok());
    }
}
