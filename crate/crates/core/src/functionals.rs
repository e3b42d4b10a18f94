//! Littlewood-Paley-Stein functionals, the heat maximal function, Meyer's
//! functional and the empirical gradient bound.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::weighted_norm;
use crate::model::CarreOperator;
use crate::quadrature::{QuadratureRule, QuadratureSpec, TimeGrid};
use crate::scalar::Real;
use crate::spectral::{SpectralDecomposition, Symbol};

/// p-values at which every functional reports its norm.
pub const DEFAULT_P_GRID: [f64; 5] = [1.1, 1.25, 1.5, 1.75, 2.0];

/// Relative quadrature error above which a result carries a warning.
pub const QUADRATURE_WARNING: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PNorm<T> {
    pub p: f64,
    pub norm: T,
}

/// Per-vertex values of a functional with their `ℓ^p(μ)` norms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpsResult<T> {
    pub values: Vec<T>,
    pub p_norms: Vec<PNorm<T>>,
    /// Relative error estimate: rule comparison plus the truncated tail.
    pub quadrature_error_estimate: f64,
    pub quadrature_warning: bool,
    pub rule: QuadratureRule,
}

impl<T: Real> LpsResult<T> {
    pub fn new(values: Vec<T>, mu: &[T], error: f64, rule: QuadratureRule) -> Self {
        let p_norms = DEFAULT_P_GRID
            .iter()
            .map(|&p| PNorm {
                p,
                norm: weighted_norm(&values, mu, T::lit(p)),
            })
            .collect();
        LpsResult {
            values,
            p_norms,
            quadrature_error_estimate: error,
            quadrature_warning: error > QUADRATURE_WARNING,
            rule,
        }
    }

    pub fn norm(&self, mu: &[T], p: T) -> T {
        weighted_norm(&self.values, mu, p)
    }

    pub fn values_csv(&self) -> String {
        let mut s = String::from("vertex,value\n");
        for (x, v) in self.values.iter().enumerate() {
            s.push_str(&format!("{x},{v:e}\n"));
        }
        s
    }

    pub fn norms_csv(&self) -> String {
        let mut s = String::from("p,norm\n");
        for n in &self.p_norms {
            s.push_str(&format!("{},{:e}\n", n.p, n.norm));
        }
        s
    }
}

/// `Γu_k` for every eigenvector, as the columns of a `channels × n` matrix.
/// Kernel columns are set to exactly zero.
pub fn eigen_channels<T: Real>(
    dec: &SpectralDecomposition<T>,
    gamma: &CarreOperator<T>,
) -> Result<Array2<T>> {
    if gamma.dim() != dec.dim() {
        return Err(LabError::Shape {
            expected: dec.dim(),
            got: gamma.dim(),
        });
    }
    let mut a = gamma.channel_matrix().dot(&dec.vectors);
    for k in 0..dec.kernel_dim {
        a.column_mut(k).fill(T::zero());
    }
    Ok(a)
}

/// Precomputed pair integrals `K_jk = ∫₀^∞ F(tλ_j) F(tλ_k) dt`, reusable
/// across many `f`.
#[derive(Debug, Clone)]
pub struct LpsEngine<'a, T> {
    dec: &'a SpectralDecomposition<T>,
    gamma: &'a CarreOperator<T>,
    channels: Array2<T>,
    kernel: Array2<T>,
    coarse: Option<Array2<T>>,
    /// `C_k` with `|F(tλ_k)| ≤ C_k t^{−δ}` beyond `t_max`, and the factor
    /// `t_max^{1−2δ}/(2δ−1)`.
    tail: Option<(Vec<T>, T)>,
    rule: QuadratureRule,
}

impl<'a, T: Real> LpsEngine<'a, T> {
    /// The classical functional `F = e^{−z}`, integrated exactly.
    pub fn exact(dec: &'a SpectralDecomposition<T>, gamma: &'a CarreOperator<T>) -> Result<Self> {
        let channels = eigen_channels(dec, gamma)?;
        let n = dec.dim();
        let mut kernel = Array2::zeros((n, n));
        for j in dec.kernel_dim..n {
            for k in dec.kernel_dim..n {
                kernel[[j, k]] = T::one() / (dec.lambdas[j] + dec.lambdas[k]);
            }
        }
        Ok(LpsEngine {
            dec,
            gamma,
            channels,
            kernel,
            coarse: None,
            tail: None,
            rule: QuadratureRule::ClosedForm,
        })
    }

    /// `H_Γ^F` for a symbol decaying faster than `z^{−1/2}`.
    pub fn with_symbol(
        dec: &'a SpectralDecomposition<T>,
        gamma: &'a CarreOperator<T>,
        symbol: &Symbol,
        quad: &QuadratureSpec,
    ) -> Result<Self> {
        symbol.validate()?;
        quad.validate()?;
        let delta = symbol.delta_infinity();
        if !(delta > 0.5) {
            return Err(LabError::Divergence(format!(
                "symbol {symbol} decays like z^-{delta} with {delta} <= 1/2; \
                 the t-integral of |ΓF(tL)f|² need not converge"
            )));
        }
        let channels = eigen_channels(dec, gamma)?;
        let n = dec.dim();
        let lo = dec.kernel_dim;
        let mut kernel = Array2::zeros((n, n));

        if quad.rule == QuadratureRule::ClosedForm {
            let mut closed = true;
            'outer: for j in lo..n {
                for k in lo..n {
                    match symbol.pair_integral(dec.lambdas[j], dec.lambdas[k]) {
                        Some(v) => kernel[[j, k]] = v,
                        None => {
                            closed = false;
                            break 'outer;
                        }
                    }
                }
            }
            if closed {
                return Ok(LpsEngine {
                    dec,
                    gamma,
                    channels,
                    kernel,
                    coarse: None,
                    tail: None,
                    rule: QuadratureRule::ClosedForm,
                });
            }
        }

        let Some((t_min, t_max)) = quad.window(dec)? else {
            return Ok(LpsEngine {
                dec,
                gamma,
                channels,
                kernel,
                coarse: None,
                tail: None,
                rule: QuadratureRule::LogGauss,
            });
        };
        let fine = TimeGrid::new(t_min, t_max, quad.nodes);
        let coarse = TimeGrid::new(t_min, t_max, quad.nodes / 2);
        let kernel = pair_kernel(dec, symbol, &fine)?;
        let coarse = pair_kernel(dec, symbol, &coarse)?;
        let tail = tail_constants(dec, symbol, t_max);
        Ok(LpsEngine {
            dec,
            gamma,
            channels,
            kernel,
            coarse: Some(coarse),
            tail: Some(tail),
            rule: QuadratureRule::LogGauss,
        })
    }

    fn squared(&self, c: &Array1<T>, kernel: &Array2<T>) -> Vec<T> {
        let b = &self.channels * &c.view().insert_axis(Axis(0));
        let w = b.dot(kernel);
        let prod = &w * &b;
        let offsets = self.gamma.offsets();
        (0..self.dec.dim())
            .map(|x| {
                let s: T = prod
                    .slice(ndarray::s![offsets[x]..offsets[x + 1], ..])
                    .iter()
                    .copied()
                    .sum();
                s.max(T::zero())
            })
            .collect()
    }

    /// `H(f)` per vertex.
    pub fn evaluate(&self, f: &[T]) -> Result<LpsResult<T>> {
        if f.len() != self.dec.dim() {
            return Err(LabError::Shape {
                expected: self.dec.dim(),
                got: f.len(),
            });
        }
        let c = Array1::from(self.dec.coefficients(f));
        let h2 = self.squared(&c, &self.kernel);
        let scale = h2.iter().fold(T::zero(), |m, &v| m.max(v));
        let mut error = 0.0;
        if scale > T::zero() {
            if let Some(coarse) = &self.coarse {
                let h2c = self.squared(&c, coarse);
                let diff = h2
                    .iter()
                    .zip(&h2c)
                    .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()));
                error += (diff / scale).as_f64();
            }
            if let Some((consts, factor)) = &self.tail {
                let offsets = self.gamma.offsets();
                let mut worst = T::zero();
                for x in 0..self.dec.dim() {
                    let mut s = T::zero();
                    for e in offsets[x]..offsets[x + 1] {
                        let g: T = (0..self.dec.dim())
                            .map(|j| (self.channels[[e, j]] * c[j]).abs() * consts[j])
                            .sum();
                        s += g * g;
                    }
                    worst = worst.max(s * *factor);
                }
                error += (worst / scale).as_f64();
            }
        }
        let values = h2.into_iter().map(|v| v.sqrt()).collect();
        Ok(LpsResult::new(values, &self.dec.mu, error, self.rule))
    }
}

fn pair_kernel<T: Real>(
    dec: &SpectralDecomposition<T>,
    symbol: &Symbol,
    grid: &TimeGrid<T>,
) -> Result<Array2<T>> {
    let n = dec.dim();
    let g = grid.len();
    let mut e = Array2::<T>::zeros((n, g));
    let mut ew = Array2::<T>::zeros((n, g));
    for k in dec.kernel_dim..n {
        for i in 0..g {
            let z = grid.t[i] * dec.lambdas[k];
            let v = symbol.evaluate(z).ok_or_else(|| {
                LabError::Domain(format!("symbol {symbol} is undefined at z = {z}"))
            })?;
            e[[k, i]] = v;
            ew[[k, i]] = v * grid.w[i];
        }
    }
    Ok(e.dot(&ew.t()))
}

fn tail_constants<T: Real>(dec: &SpectralDecomposition<T>, symbol: &Symbol, t_max: T) -> (Vec<T>, T) {
    let declared = symbol.delta_infinity();
    let delta = if declared.is_finite() { declared } else { 8.0 };
    let n = dec.dim();
    let tm = t_max.as_f64();
    let consts = (0..n)
        .map(|k| {
            if dec.is_kernel(k) {
                return T::zero();
            }
            let lam = dec.lambdas[k].as_f64();
            // sup over t ≥ t_max of |F(tλ)| t^δ, sampled over four decades
            let mut c = 0.0f64;
            for i in 0..=80 {
                let t = tm * 10f64.powf(i as f64 / 20.0);
                let v = symbol.evaluate(t * lam).unwrap_or(0.0).abs() * t.powf(delta);
                c = c.max(v);
            }
            T::lit(c)
        })
        .collect();
    let factor = T::lit(tm.powf(1.0 - 2.0 * delta) / (2.0 * delta - 1.0));
    (consts, factor)
}

/// `H_Γ(f)(x) = (∫₀^∞ |Γe^{−tL}f|²(x) dt)^{1/2}` from the exact double sum.
pub fn h_gamma_exact<T: Real>(
    dec: &SpectralDecomposition<T>,
    gamma: &CarreOperator<T>,
    f: &[T],
) -> Result<LpsResult<T>> {
    LpsEngine::exact(dec, gamma)?.evaluate(f)
}

/// `H_Γ^F(f)(x) = (∫₀^∞ |ΓF(tL)f|²(x) dt)^{1/2}`.
pub fn h_gamma_f<T: Real>(
    dec: &SpectralDecomposition<T>,
    gamma: &CarreOperator<T>,
    symbol: &Symbol,
    f: &[T],
    quad: &QuadratureSpec,
) -> Result<LpsResult<T>> {
    LpsEngine::with_symbol(dec, gamma, symbol, quad)?.evaluate(f)
}

/// Log grid over the default time window at `per_decade` points per decade.
pub fn log_time_grid<T: Real>(dec: &SpectralDecomposition<T>, per_decade: usize) -> Vec<T> {
    let Some((lo, hi)) = dec.time_window() else {
        return Vec::new();
    };
    let (a, b) = (lo.as_f64().log10(), hi.as_f64().log10());
    let count = ((b - a) * per_decade as f64).ceil() as usize + 1;
    (0..count)
        .map(|i| T::lit(10f64.powf(a + (b - a) * i as f64 / (count - 1).max(1) as f64)))
        .collect()
}

/// `sup_t |e^{−tL}f|(x)` over `t_grid`, together with the exact endpoints
/// `|f|` (t → 0) and `|Pf|` (t → ∞). `None` uses 200 points per decade.
pub fn maximal_function<T: Real>(
    dec: &SpectralDecomposition<T>,
    f: &[T],
    t_grid: Option<&[T]>,
) -> Result<Vec<T>> {
    if f.len() != dec.dim() {
        return Err(LabError::Shape {
            expected: dec.dim(),
            got: f.len(),
        });
    }
    let owned;
    let grid = match t_grid {
        Some(g) => g,
        None => {
            owned = log_time_grid(dec, 200);
            &owned
        }
    };
    let n = dec.dim();
    let c = dec.coefficients(f);
    let pf = dec.kernel_part(f);
    let mut out: Vec<T> = f
        .iter()
        .zip(&pf)
        .map(|(&a, &b)| a.abs().max(b.abs()))
        .collect();
    if grid.is_empty() {
        return Ok(out);
    }
    let mut e = Array2::<T>::zeros((n, grid.len()));
    for k in 0..n {
        let lam = dec.lambda(k);
        for (i, &t) in grid.iter().enumerate() {
            e[[k, i]] = c[k] * (-t * lam).exp();
        }
    }
    let y = dec.vectors.dot(&e);
    for (x, row) in y.outer_iter().enumerate() {
        for &v in row.iter() {
            out[x] = out[x].max(v.abs());
        }
    }
    Ok(out)
}

/// Meyer's functional `S(f)(x) = (∫₀^∞ e^{−tL}(|Γe^{−tL}f|²)(x) dt)^{1/2}`,
/// always by quadrature.
pub fn meyer_s<T: Real>(
    dec: &SpectralDecomposition<T>,
    gamma: &CarreOperator<T>,
    f: &[T],
    quad: &QuadratureSpec,
) -> Result<LpsResult<T>> {
    if f.len() != dec.dim() {
        return Err(LabError::Shape {
            expected: dec.dim(),
            got: f.len(),
        });
    }
    let n = dec.dim();
    let Some((t_min, t_max)) = quad.window(dec)? else {
        return Ok(LpsResult::new(vec![T::zero(); n], &dec.mu, 0.0, QuadratureRule::LogGauss));
    };
    let c = dec.coefficients(f);
    let integrate = |grid: &TimeGrid<T>| -> Vec<T> {
        let mut acc = vec![T::zero(); n];
        for (&t, &w) in grid.t.iter().zip(&grid.w) {
            let ct: Vec<T> = (0..n).map(|k| c[k] * (-t * dec.lambda(k)).exp()).collect();
            let g2 = gamma.modulus_sq(&dec.synthesize(&ct));
            let smoothed = dec.semigroup(t, &g2).expect("length checked");
            for (a, v) in acc.iter_mut().zip(smoothed) {
                *a += w * v;
            }
        }
        acc
    };
    let fine = integrate(&TimeGrid::new(t_min, t_max, quad.nodes));
    let coarse = integrate(&TimeGrid::new(t_min, t_max, quad.nodes / 2));
    let scale = fine.iter().fold(T::zero(), |m, &v| m.max(v));
    let mut error = 0.0;
    if scale > T::zero() {
        let diff = fine
            .iter()
            .zip(&coarse)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()));
        // e^{−tL} is an ∞-contraction and |Γe^{−tL}f|² decays at least like
        // e^{−2tλ_min⁺}, so the tail is at most sup|Γe^{−t_max L}f|² / (2λ_min⁺)
        let lmin = dec.lambda_min_positive().unwrap_or(T::one());
        let ct: Vec<T> = (0..n)
            .map(|k| c[k] * (-t_max * dec.lambda(k)).exp())
            .collect();
        let edge = gamma
            .modulus_sq(&dec.synthesize(&ct))
            .into_iter()
            .fold(T::zero(), |m, v| m.max(v));
        error = ((diff + edge / (T::lit(2.0) * lmin)) / scale).as_f64();
    }
    let values = fine.into_iter().map(|v| v.max(T::zero()).sqrt()).collect();
    Ok(LpsResult::new(values, &dec.mu, error, QuadratureRule::LogGauss))
}

/// Smallest `c_θ` with `|Γe^{−tL}f|² ≤ c_θ e^{−θtL}|Γf|²` on the sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientFit<T> {
    pub theta: T,
    pub c_theta: T,
    pub witness_entry: usize,
    pub witness_t: T,
    pub witness_vertex: usize,
    /// Corpus entries whose ratio is still increasing at the largest sampled `t`.
    pub growth_flags: Vec<usize>,
    /// True when no entry was flagged.
    pub bound_holds: bool,
}

/// Empirical fit of the gradient bound over a corpus and time grid. `t = 0` is
/// always included; `None` samples 20 points per decade.
pub fn fit_gradient_bound<T: Real>(
    dec: &SpectralDecomposition<T>,
    gamma: &CarreOperator<T>,
    theta: T,
    corpus: &[Vec<T>],
    t_grid: Option<&[T]>,
) -> Result<GradientFit<T>> {
    if !(theta > T::zero() && theta <= T::one()) {
        return Err(LabError::validation("theta", "must lie in (0, 1]"));
    }
    if corpus.is_empty() {
        return Err(LabError::validation("corpus", "empty"));
    }
    let mut grid = vec![T::zero()];
    match t_grid {
        Some(g) => grid.extend(g.iter().copied().filter(|&t| t > T::zero())),
        None => grid.extend(log_time_grid(dec, 20)),
    }
    let mut best: Option<(T, usize, T, usize)> = None;
    let mut growth_flags = Vec::new();
    for (idx, f) in corpus.iter().enumerate() {
        if f.len() != dec.dim() {
            return Err(LabError::Shape {
                expected: dec.dim(),
                got: f.len(),
            });
        }
        let g0 = gamma.modulus_sq(f);
        let floor = T::lit(1e-14) * g0.iter().fold(T::zero(), |m, &v| m.max(v));
        if floor == T::zero() {
            continue;
        }
        let mut profile: Vec<T> = Vec::with_capacity(grid.len());
        for &t in &grid {
            let num = gamma.modulus_sq(&dec.semigroup(t, f)?);
            let den = dec.semigroup(theta * t, &g0)?;
            let mut r_t: Option<T> = None;
            for x in 0..dec.dim() {
                if den[x] <= floor {
                    continue;
                }
                let r = num[x] / den[x];
                r_t = Some(r_t.map_or(r, |m: T| m.max(r)));
                if best.is_none_or(|(b, ..)| r > b) {
                    best = Some((r, idx, t, x));
                }
            }
            if let Some(r) = r_t {
                profile.push(r);
            }
        }
        if profile.len() >= 2 {
            let last = profile[profile.len() - 1];
            let prev = profile[profile.len() - 2];
            let peak = profile.iter().fold(T::zero(), |m, &v| m.max(v));
            if last >= peak && last > prev * (T::one() + T::lit(1e-12)) {
                growth_flags.push(idx);
            }
        }
    }
    let (c, entry, t, x) = best.ok_or(LabError::NoActiveVertex)?;
    Ok(GradientFit {
        theta,
        c_theta: c,
        witness_entry: entry,
        witness_t: t,
        witness_vertex: x,
        bound_holds: growth_flags.is_empty(),
        growth_flags,
    })
}
