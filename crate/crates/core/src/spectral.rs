//! Exact spectral calculus for a μ-self-adjoint generator.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma as gamma_fn;

use crate::error::{LabError, Result};
use crate::linalg::{symmetric_eigen, weighted_norm};
use crate::model::Generator;
use crate::scalar::Real;

/// Eigenpairs `(λ_k, u_k)` of `L`, with `u_k` orthonormal in `ℓ²(μ)`.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition<T> {
    /// Nondecreasing eigenvalues.
    pub lambdas: Vec<T>,
    /// `u_k` stored as column `k`.
    pub vectors: Array2<T>,
    pub mu: Vec<T>,
    /// Number of leading eigenvalues with `λ_k ≤ kernel_tol · λ_max`.
    pub kernel_dim: usize,
}

/// Diagonalises `L` through the similarity `μ^{1/2} L μ^{−1/2}`.
pub fn decompose<T: Real>(gen: &Generator<T>) -> Result<SpectralDecomposition<T>> {
    let n = gen.dim();
    let mu = &gen.mu;
    let sq: Vec<T> = mu.iter().map(|m| m.sqrt()).collect();
    let mut s = Array2::<T>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            s[[i, j]] = sq[i] * gen.matrix[[i, j]] / sq[j];
        }
    }
    let half = T::lit(0.5);
    let sym = (&s + &s.t()) * half;
    let eig = symmetric_eigen(sym.view())?;
    let mut vectors = eig.vectors;
    for i in 0..n {
        let inv = T::one() / sq[i];
        vectors.row_mut(i).mapv_inplace(|v| v * inv);
    }
    let lambdas: Vec<T> = eig.values.to_vec();
    let lmax = lambdas
        .iter()
        .fold(T::zero(), |m, &l| m.max(l.abs()));
    let cutoff = T::kernel_rel_tol() * lmax;
    let kernel_dim = lambdas.iter().take_while(|&&l| l <= cutoff).count();
    Ok(SpectralDecomposition {
        lambdas,
        vectors,
        mu: mu.clone(),
        kernel_dim,
    })
}

impl<T: Real> SpectralDecomposition<T> {
    pub fn dim(&self) -> usize {
        self.lambdas.len()
    }

    pub fn lambda_max(&self) -> T {
        self.lambdas.last().copied().unwrap_or(T::zero())
    }

    /// Smallest eigenvalue outside the kernel.
    pub fn lambda_min_positive(&self) -> Option<T> {
        self.lambdas.get(self.kernel_dim).copied()
    }

    /// Eigenvalue with kernel modes pinned to exactly zero.
    #[inline]
    pub fn lambda(&self, k: usize) -> T {
        if k < self.kernel_dim {
            T::zero()
        } else {
            self.lambdas[k]
        }
    }

    pub fn is_kernel(&self, k: usize) -> bool {
        k < self.kernel_dim
    }

    /// Default truncation `[1e−3/λ_max, 1e3/λ_min⁺]` for time integrals.
    pub fn time_window(&self) -> Option<(T, T)> {
        let lmin = self.lambda_min_positive()?;
        Some((
            T::lit(1e-3) / self.lambda_max(),
            T::lit(1e3) / lmin,
        ))
    }

    fn check_len(&self, f: &[T]) -> Result<()> {
        if f.len() != self.dim() {
            return Err(LabError::Shape {
                expected: self.dim(),
                got: f.len(),
            });
        }
        Ok(())
    }

    /// `c_k = ⟨f, u_k⟩_μ`.
    pub fn coefficients(&self, f: &[T]) -> Vec<T> {
        let n = self.dim();
        let weighted: Vec<T> = f.iter().zip(&self.mu).map(|(&a, &m)| a * m).collect();
        (0..n)
            .map(|k| {
                self.vectors
                    .column(k)
                    .iter()
                    .zip(&weighted)
                    .map(|(&u, &w)| u * w)
                    .sum()
            })
            .collect()
    }

    /// `Σ_k c_k u_k`.
    pub fn synthesize(&self, c: &[T]) -> Vec<T> {
        let c = Array1::from(c.to_vec());
        self.vectors.dot(&c).to_vec()
    }

    /// `(I − P) f`.
    pub fn project_out_kernel(&self, f: &[T]) -> Vec<T> {
        let mut c = self.coefficients(f);
        for ck in c.iter_mut().take(self.kernel_dim) {
            *ck = T::zero();
        }
        self.synthesize(&c)
    }

    /// `P f`, the projection onto `ker L`.
    pub fn kernel_part(&self, f: &[T]) -> Vec<T> {
        let mut c = self.coefficients(f);
        for ck in c.iter_mut().skip(self.kernel_dim) {
            *ck = T::zero();
        }
        self.synthesize(&c)
    }

    /// Dense matrix of `Σ_k g_k u_k u_kᵀ diag(μ)`.
    pub fn spectral_matrix(&self, weights: &[T]) -> Array2<T> {
        let n = self.dim();
        let mut scaled = self.vectors.clone();
        for k in 0..n {
            let w = weights[k];
            scaled.column_mut(k).mapv_inplace(|v| v * w);
        }
        let mut m = scaled.dot(&self.vectors.t());
        for j in 0..n {
            let mj = self.mu[j];
            m.column_mut(j).mapv_inplace(|v| v * mj);
        }
        m
    }

    /// `F(tL)` as a dense matrix.
    pub fn symbol_matrix(&self, symbol: &Symbol, t: T) -> Result<Array2<T>> {
        let weights = self.symbol_weights(symbol, t, None)?;
        Ok(self.spectral_matrix(&weights))
    }

    /// `Σ_{λ_k > 0} λ_k^s u_k u_kᵀ diag(μ)`; with `s = 0` this is `I − P`.
    pub fn range_power_matrix(&self, s: T) -> Array2<T> {
        let w: Vec<T> = (0..self.dim())
            .map(|k| {
                if self.is_kernel(k) {
                    T::zero()
                } else {
                    self.lambdas[k].powf(s)
                }
            })
            .collect();
        self.spectral_matrix(&w)
    }

    /// `F(tλ_k)` for every mode. Kernel modes use the symbol's limit at zero;
    /// when `coeffs` is given, an undefined limit is tolerated on modes that
    /// `f` does not charge.
    pub fn symbol_weights(&self, symbol: &Symbol, t: T, coeffs: Option<&[T]>) -> Result<Vec<T>> {
        let norm = coeffs.map(|c| c.iter().map(|&x| x * x).sum::<T>().sqrt());
        (0..self.dim())
            .map(|k| {
                let z = t * self.lambda(k);
                match symbol.evaluate(z) {
                    Some(v) => Ok(v),
                    None => {
                        if let (Some(c), Some(nrm)) = (coeffs, norm) {
                            if c[k].abs() <= T::lit(1e-10) * nrm {
                                return Ok(T::zero());
                            }
                        }
                        Err(LabError::Domain(format!(
                            "symbol {symbol} is undefined at z = {z} (mode {k})"
                        )))
                    }
                }
            })
            .collect()
    }

    /// `F(tL) f = Σ_k F(tλ_k) ⟨f, u_k⟩_μ u_k`.
    pub fn apply_symbol(&self, symbol: &Symbol, t: T, f: &[T]) -> Result<Vec<T>> {
        self.check_len(f)?;
        if !(t > T::zero()) {
            return Err(LabError::validation("t", "must be positive"));
        }
        let mut c = self.coefficients(f);
        let w = self.symbol_weights(symbol, t, Some(&c))?;
        for (ck, wk) in c.iter_mut().zip(&w) {
            *ck *= *wk;
        }
        Ok(self.synthesize(&c))
    }

    /// `L^s f` with `0^s = 0` for `s > 0`; `s < 0` needs `f ⊥ ker L`.
    pub fn fractional_power(&self, s: T, f: &[T]) -> Result<Vec<T>> {
        self.check_len(f)?;
        if s == T::zero() {
            return Ok(f.to_vec());
        }
        let mut c = self.coefficients(f);
        if s < T::zero() {
            let fnorm = weighted_norm(f, &self.mu, T::lit(2.0));
            let kern: T = c
                .iter()
                .take(self.kernel_dim)
                .map(|&x| x * x)
                .sum::<T>()
                .sqrt();
            if kern > T::tol(1e-10) * fnorm {
                return Err(LabError::Domain(format!(
                    "negative power s = {s} requires f orthogonal to ker L \
                     (kernel component {kern})"
                )));
            }
        }
        for (k, ck) in c.iter_mut().enumerate() {
            *ck = if self.is_kernel(k) {
                T::zero()
            } else {
                *ck * self.lambdas[k].powf(s)
            };
        }
        Ok(self.synthesize(&c))
    }

    /// `e^{−tL} f`.
    pub fn semigroup(&self, t: T, f: &[T]) -> Result<Vec<T>> {
        self.check_len(f)?;
        if !(t >= T::zero()) {
            return Err(LabError::validation("t", "must be nonnegative"));
        }
        if t == T::zero() {
            return Ok(f.to_vec());
        }
        let mut c = self.coefficients(f);
        for (k, ck) in c.iter_mut().enumerate() {
            *ck *= (-t * self.lambda(k)).exp();
        }
        Ok(self.synthesize(&c))
    }

    /// `(1 + tL)^{−δ} f`.
    pub fn resolvent_power(&self, delta: T, t: T, f: &[T]) -> Result<Vec<T>> {
        self.check_len(f)?;
        if !(t > T::zero()) {
            return Err(LabError::validation("t", "must be positive"));
        }
        if !(delta > T::zero()) {
            return Err(LabError::validation("delta", "must be positive"));
        }
        let mut c = self.coefficients(f);
        for (k, ck) in c.iter_mut().enumerate() {
            *ck *= (T::one() + t * self.lambda(k)).powf(-delta);
        }
        Ok(self.synthesize(&c))
    }

    /// `e^{−tL}` as a dense matrix.
    pub fn heat_matrix(&self, t: T) -> Array2<T> {
        let w: Vec<T> = (0..self.dim())
            .map(|k| (-t * self.lambda(k)).exp())
            .collect();
        self.spectral_matrix(&w)
    }
}

/// A scalar function on `[0, ∞)` evaluated on the spectrum.
///
/// Every symbol carries its decay exponent at infinity (`|F(z)| ≲ z^{−δ}`)
/// and its regularity exponent at zero (`|F′(z)| ≲ z^{ε−1}`). [`Symbol::check`]
/// tests both numerically instead of trusting them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Symbol {
    /// `e^{−z}`
    Exp,
    /// `(1 − e^{−z}) / z^{1/2+ε}`
    Phi { eps: f64 },
    /// `z^{1/2+ε} e^{−z}`
    Psi { eps: f64 },
    /// `(1 + z)^{−δ}`
    Resolvent { delta: f64 },
    /// `1 − e^{−z}`
    OneMinusExp,
    /// `z e^{−z}`
    ZExp,
    /// `1`
    One,
    /// Pointwise product.
    Product(Box<Symbol>, Box<Symbol>),
    /// Tabulated values, interpolated linearly in `log z`. Approximate.
    Tabulated(Table),
}

/// Samples `(z_i, F(z_i))` with `z_i > 0` increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub z: Vec<f64>,
    pub values: Vec<f64>,
    #[serde(default)]
    pub at_zero: Option<f64>,
    pub delta_infinity: f64,
    pub eps_zero: f64,
}

impl Table {
    pub fn new(z: Vec<f64>, values: Vec<f64>, delta_infinity: f64, eps_zero: f64) -> Result<Self> {
        if z.len() != values.len() || z.len() < 2 {
            return Err(LabError::validation(
                "table",
                "needs at least two (z, F(z)) pairs of equal length",
            ));
        }
        if z[0] <= 0.0 || z.windows(2).any(|w| w[1] <= w[0]) {
            return Err(LabError::validation(
                "table",
                "abscissae must be positive and strictly increasing",
            ));
        }
        Ok(Table {
            z,
            values,
            at_zero: None,
            delta_infinity,
            eps_zero,
        })
    }

    fn interpolate(&self, z: f64) -> Option<f64> {
        if z == 0.0 {
            return self.at_zero;
        }
        let last = *self.z.last()?;
        if z < self.z[0] || z > last {
            return None;
        }
        let i = self.z.partition_point(|&x| x <= z).clamp(1, self.z.len() - 1);
        let (z0, z1) = (self.z[i - 1].ln(), self.z[i].ln());
        let s = (z.ln() - z0) / (z1 - z0);
        Some(self.values[i - 1] + s * (self.values[i] - self.values[i - 1]))
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Symbol::Exp => write!(f, "exp"),
            Symbol::Phi { eps } => write!(f, "phi({eps})"),
            Symbol::Psi { eps } => write!(f, "psi({eps})"),
            Symbol::Resolvent { delta } => write!(f, "resolvent({delta})"),
            Symbol::OneMinusExp => write!(f, "one-minus-exp"),
            Symbol::ZExp => write!(f, "z-exp"),
            Symbol::One => write!(f, "one"),
            Symbol::Product(a, b) => write!(f, "{a}*{b}"),
            Symbol::Tabulated(t) => write!(f, "tabulated[{}]", t.z.len()),
        }
    }
}

impl FromStr for Symbol {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some((a, b)) = s.split_once('*') {
            return Ok(Symbol::Product(Box::new(a.parse()?), Box::new(b.parse()?)));
        }
        let param = |prefix: &str| -> Option<Result<f64>> {
            let rest = s.strip_prefix(prefix)?.strip_prefix('(')?.strip_suffix(')')?;
            Some(
                rest.trim()
                    .parse::<f64>()
                    .map_err(|_| LabError::validation("symbol", format!("bad parameter in {s:?}"))),
            )
        };
        let sym = match s {
            "exp" => Symbol::Exp,
            "one-minus-exp" => Symbol::OneMinusExp,
            "z-exp" => Symbol::ZExp,
            "one" => Symbol::One,
            _ => {
                if let Some(eps) = param("phi") {
                    Symbol::Phi { eps: eps? }
                } else if let Some(eps) = param("psi") {
                    Symbol::Psi { eps: eps? }
                } else if let Some(delta) = param("resolvent") {
                    Symbol::Resolvent { delta: delta? }
                } else {
                    return Err(LabError::validation(
                        "symbol",
                        format!("unknown symbol {s:?}"),
                    ));
                }
            }
        };
        sym.validate()?;
        Ok(sym)
    }
}

impl Symbol {
    pub fn phi(eps: f64) -> Self {
        Symbol::Phi { eps }
    }

    pub fn psi(eps: f64) -> Self {
        Symbol::Psi { eps }
    }

    pub fn resolvent(delta: f64) -> Self {
        Symbol::Resolvent { delta }
    }

    pub fn product(a: Symbol, b: Symbol) -> Self {
        Symbol::Product(Box::new(a), Box::new(b))
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Symbol::Phi { eps } | Symbol::Psi { eps } if !(*eps >= 0.0 && *eps <= 0.5) => Err(
                LabError::validation("symbol", format!("eps = {eps} outside [0, 1/2]")),
            ),
            Symbol::Resolvent { delta } if !(*delta > 0.0) => Err(LabError::validation(
                "symbol",
                format!("delta = {delta} must be positive"),
            )),
            Symbol::Product(a, b) => {
                a.validate()?;
                b.validate()
            }
            _ => Ok(()),
        }
    }

    /// `F(z)` for `z ≥ 0`; `None` where the symbol is undefined.
    pub fn evaluate<T: Real>(&self, z: T) -> Option<T> {
        if z < T::zero() || z.is_nan() {
            return None;
        }
        let half = T::lit(0.5);
        let v = match self {
            Symbol::Exp => (-z).exp(),
            Symbol::Phi { eps } => {
                let a = half + T::lit(*eps);
                if z == T::zero() {
                    if *eps >= 0.5 {
                        T::one()
                    } else {
                        T::zero()
                    }
                } else {
                    -(-z).exp_m1() / z.powf(a)
                }
            }
            Symbol::Psi { eps } => {
                if z == T::zero() {
                    T::zero()
                } else {
                    z.powf(half + T::lit(*eps)) * (-z).exp()
                }
            }
            Symbol::Resolvent { delta } => (T::one() + z).powf(-T::lit(*delta)),
            Symbol::OneMinusExp => -(-z).exp_m1(),
            Symbol::ZExp => z * (-z).exp(),
            Symbol::One => T::one(),
            Symbol::Product(a, b) => a.evaluate(z)? * b.evaluate(z)?,
            Symbol::Tabulated(t) => T::lit(t.interpolate(z.as_f64())?),
        };
        Some(v)
    }

    /// Exponent `δ` with `|F(z)| ≲ z^{−δ}` as `z → ∞` (`∞` for exponential decay).
    pub fn delta_infinity(&self) -> f64 {
        match self {
            Symbol::Exp | Symbol::Psi { .. } | Symbol::ZExp => f64::INFINITY,
            Symbol::Phi { eps } => 0.5 + eps,
            Symbol::Resolvent { delta } => *delta,
            Symbol::OneMinusExp | Symbol::One => 0.0,
            Symbol::Product(a, b) => a.delta_infinity() + b.delta_infinity(),
            Symbol::Tabulated(t) => t.delta_infinity,
        }
    }

    /// Exponent `ε` with `|F′(z)| ≲ z^{ε−1}` as `z → 0`.
    pub fn eps_zero(&self) -> f64 {
        match self {
            Symbol::Phi { eps } => {
                if *eps >= 0.5 {
                    1.0
                } else {
                    0.5 - eps
                }
            }
            Symbol::Psi { eps } => 0.5 + eps,
            Symbol::Exp
            | Symbol::Resolvent { .. }
            | Symbol::OneMinusExp
            | Symbol::ZExp
            | Symbol::One => 1.0,
            Symbol::Product(a, b) => a.eps_zero().min(b.eps_zero()),
            Symbol::Tabulated(t) => t.eps_zero,
        }
    }

    /// `lim_{z→0} F(z)` when it exists.
    pub fn value_at_zero(&self) -> Option<f64> {
        self.evaluate(0.0f64)
    }

    /// `∫₀^∞ F(tλ) F(tμ) dt` in closed form, when known.
    pub fn pair_integral<T: Real>(&self, a: T, b: T) -> Option<T> {
        let s = a + b;
        if !(s > T::zero()) {
            return None;
        }
        match self {
            Symbol::Exp => Some(T::one() / s),
            Symbol::ZExp => Some(gamma_moment(T::one(), a, b, 1.0)),
            Symbol::Psi { eps } => Some(gamma_moment(T::lit(0.5 + eps), a, b, 1.0)),
            _ => None,
        }
    }

    /// `∫₀^∞ F(tλ) F(tμ) dt/t` in closed form, when known.
    pub fn pair_integral_dt_over_t<T: Real>(&self, a: T, b: T) -> Option<T> {
        if !(a > T::zero() && b > T::zero()) {
            return Some(T::zero()).filter(|_| self.value_at_zero() == Some(0.0));
        }
        match self {
            Symbol::ZExp => Some(gamma_moment(T::one(), a, b, 0.0)),
            Symbol::Psi { eps } => Some(gamma_moment(T::lit(0.5 + eps), a, b, 0.0)),
            _ => None,
        }
    }

    /// Numerical check of the declared exponents.
    pub fn check(&self) -> SymbolCheck {
        let delta = self.delta_infinity();
        let d = if delta.is_finite() { delta } else { 8.0 };
        let f100 = self.evaluate(1e2f64).unwrap_or(f64::NAN).abs();
        let bound = 10.0 * f100 * 1e2f64.powf(d);
        let mut worst_decay = 0.0f64;
        for i in 0..=40 {
            let z = 10f64.powf(2.0 + 4.0 * i as f64 / 40.0);
            let v = self.evaluate(z).unwrap_or(f64::NAN).abs() * z.powf(d);
            worst_decay = worst_decay.max(if bound > 0.0 { v / bound } else { v });
        }
        let decay_ok = worst_decay <= 1.0 || (bound == 0.0 && worst_decay == 0.0);

        let eps = self.eps_zero();
        let deriv = |z: f64| -> f64 {
            let h = 1e-4;
            let hi = self.evaluate(z * (1.0 + h)).unwrap_or(f64::NAN);
            let lo = self.evaluate(z * (1.0 - h)).unwrap_or(f64::NAN);
            (hi - lo) / (2.0 * z * h)
        };
        let reference = deriv(1e-2).abs() * 1e-2f64.powf(1.0 - eps);
        let mut worst_zero = 0.0f64;
        for i in 0..=40 {
            let z = 10f64.powf(-6.0 + 4.0 * i as f64 / 40.0);
            let v = deriv(z).abs() * z.powf(1.0 - eps);
            worst_zero = worst_zero.max(v);
        }
        let zero_bound = 10.0 * reference + 1e-9;
        SymbolCheck {
            name: self.to_string(),
            delta_infinity: delta,
            eps_zero: eps,
            decay_ok,
            decay_worst_ratio: worst_decay,
            zero_ok: worst_zero <= zero_bound,
            zero_worst_ratio: worst_zero / zero_bound,
        }
    }
}

/// `(ab)^κ Γ(2κ + m) / (a + b)^{2κ + m}`, the integral of
/// `(ta)^κ (tb)^κ e^{−t(a+b)} t^{m−1}` over `(0, ∞)`.
fn gamma_moment<T: Real>(kappa: T, a: T, b: T, m: f64) -> T {
    let order = T::lit(2.0) * kappa + T::lit(m);
    let g = T::lit(gamma_fn(order.as_f64()));
    (a * b).powf(kappa) * g / (a + b).powf(order)
}

/// Outcome of [`Symbol::check`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SymbolCheck {
    pub name: String,
    pub delta_infinity: f64,
    pub eps_zero: f64,
    pub decay_ok: bool,
    pub decay_worst_ratio: f64,
    pub zero_ok: bool,
    pub zero_worst_ratio: f64,
}

/// Lower end `arcsin|2/p − 1|` of the admissible sector angle for `p`.
///
/// Metadata only: computations never leave the nonnegative real axis.
pub fn sector_angle_floor(p: f64) -> f64 {
    (2.0 / p - 1.0).abs().asin()
}
