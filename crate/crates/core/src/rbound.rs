//! R-bounds of operator families through Rademacher averages and the
//! square-function normalisation `‖(Σ|T_k f_k|²)^{1/2}‖_p / ‖(Σ|f_k|²)^{1/2}‖_p`.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::functionals::eigen_channels;
use crate::model::CarreOperator;
use crate::quadrature::{QuadratureRule, QuadratureSpec, TimeGrid};
use crate::scalar::Real;
use crate::spectral::{SpectralDecomposition, Symbol};

/// Largest family size accepted by exact sign enumeration.
pub const MAX_EXACT_MEMBERS: usize = 16;
/// Smallest Monte Carlo sample count.
pub const MIN_MC_SAMPLES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FamilyKind {
    /// `√t Γ e^{−tL}`
    SqrtTGammaSemigroup,
    /// `√t Γ (1 + tL)^{−δ}`
    SqrtTGammaResolvent { delta: f64 },
    /// `√t Γ G(tL)`
    CustomSymbol { symbol: Symbol },
    /// `c·I`, independent of `t`.
    Scalar { c: f64 },
}

impl FamilyKind {
    fn symbol(&self) -> Option<Symbol> {
        match self {
            FamilyKind::SqrtTGammaSemigroup => Some(Symbol::Exp),
            FamilyKind::SqrtTGammaResolvent { delta } => Some(Symbol::resolvent(*delta)),
            FamilyKind::CustomSymbol { symbol } => Some(symbol.clone()),
            FamilyKind::Scalar { .. } => None,
        }
    }
}

/// A one-parameter family `t ↦ T_t` acting on vertex vectors and producing
/// fields indexed by channel (or by vertex for the scalar family).
#[derive(Debug, Clone)]
pub struct OperatorFamily<'a, T> {
    pub kind: FamilyKind,
    dec: &'a SpectralDecomposition<T>,
    channels: Array2<T>,
    offsets: Vec<usize>,
    symbol: Option<Symbol>,
}

impl<'a, T: Real> OperatorFamily<'a, T> {
    pub fn new(
        kind: FamilyKind,
        dec: &'a SpectralDecomposition<T>,
        gamma: &CarreOperator<T>,
    ) -> Result<Self> {
        let symbol = kind.symbol();
        if let Some(s) = &symbol {
            s.validate()?;
        }
        let (channels, offsets) = match kind {
            FamilyKind::Scalar { .. } => (Array2::zeros((0, 0)), (0..=dec.dim()).collect()),
            _ => (eigen_channels(dec, gamma)?, gamma.offsets().to_vec()),
        };
        Ok(OperatorFamily {
            kind,
            dec,
            channels,
            offsets,
            symbol,
        })
    }

    pub fn semigroup(dec: &'a SpectralDecomposition<T>, gamma: &CarreOperator<T>) -> Result<Self> {
        Self::new(FamilyKind::SqrtTGammaSemigroup, dec, gamma)
    }

    pub fn resolvent(
        dec: &'a SpectralDecomposition<T>,
        gamma: &CarreOperator<T>,
        delta: f64,
    ) -> Result<Self> {
        Self::new(FamilyKind::SqrtTGammaResolvent { delta }, dec, gamma)
    }

    pub fn dim(&self) -> usize {
        self.dec.dim()
    }

    pub fn mu(&self) -> &[T] {
        &self.dec.mu
    }

    /// `offsets[x]..offsets[x+1]` are the output entries of vertex `x`.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Sampling window for `t`.
    pub fn t_window(&self) -> (T, T) {
        self.dec
            .time_window()
            .unwrap_or((T::lit(1e-3), T::lit(1e3)))
    }

    /// `√t G(tλ_k)` per mode.
    fn weights(&self, t: T) -> Vec<T> {
        let sym = self.symbol.as_ref().expect("spectral family");
        let st = t.sqrt();
        (0..self.dim())
            .map(|k| {
                if self.dec.is_kernel(k) {
                    T::zero()
                } else {
                    st * sym.evaluate(t * self.dec.lambdas[k]).unwrap_or(T::zero())
                }
            })
            .collect()
    }

    /// `T_t f` from the eigen-coefficients of `f`.
    fn apply_coeffs(&self, t: T, f: &[T], c: &[T]) -> Vec<T> {
        if let FamilyKind::Scalar { c: s } = self.kind {
            let s = T::lit(s);
            return f.iter().map(|&v| s * v).collect();
        }
        let w = self.weights(t);
        let wc: Array1<T> = w.iter().zip(c).map(|(&a, &b)| a * b).collect();
        self.channels.dot(&wc).to_vec()
    }

    /// `T_t f`.
    pub fn apply(&self, t: T, f: &[T]) -> Result<Vec<T>> {
        if f.len() != self.dim() {
            return Err(LabError::Shape {
                expected: self.dim(),
                got: f.len(),
            });
        }
        let c = self.dec.coefficients(f);
        Ok(self.apply_coeffs(t, f, &c))
    }

    /// Euclidean transpose `T_tᵀ y`.
    fn transpose(&self, t: T, y: &[T]) -> Vec<T> {
        if let FamilyKind::Scalar { c: s } = self.kind {
            let s = T::lit(s);
            return y.iter().map(|&v| s * v).collect();
        }
        let w = self.weights(t);
        let ay = self.channels.t().dot(&Array1::from(y.to_vec()));
        let scaled: Array1<T> = ay.iter().zip(&w).map(|(&a, &b)| a * b).collect();
        let v = self.dec.vectors.dot(&scaled);
        v.iter().zip(&self.dec.mu).map(|(&a, &m)| a * m).collect()
    }

    /// Maximiser of `z G(z)²`, where `‖T_t u_k‖` peaks at `t = z*/λ_k`.
    fn peak_z(&self) -> f64 {
        match &self.kind {
            FamilyKind::SqrtTGammaSemigroup => 0.5,
            FamilyKind::SqrtTGammaResolvent { delta } if *delta > 0.5 => 1.0 / (2.0 * delta - 1.0),
            FamilyKind::Scalar { .. } => 1.0,
            _ => {
                let sym = self.symbol.as_ref().expect("spectral family");
                let mut best = (f64::NEG_INFINITY, 1.0);
                for i in 0..=1200 {
                    let z = 10f64.powf(-6.0 + 12.0 * i as f64 / 1200.0);
                    let g = sym.evaluate(z).unwrap_or(0.0);
                    if z * g * g > best.0 {
                        best = (z * g * g, z);
                    }
                }
                best.1
            }
        }
    }
}

fn modulus_sq_t<T: Real>(field: &[T], offsets: &[usize]) -> Vec<T> {
    (0..offsets.len() - 1)
        .map(|x| field[offsets[x]..offsets[x + 1]].iter().map(|&v| v * v).sum())
        .collect()
}

/// `(Σ_x μ(x) s(x)^{p/2})^{1/p}` for a per-vertex squared modulus `s`.
fn lp_of_squares<T: Real>(s: &[T], mu: &[T], p: T) -> T {
    let half = p / T::lit(2.0);
    let sum: T = s.iter().zip(mu).map(|(&v, &m)| m * v.max(T::zero()).powf(half)).sum();
    sum.powf(T::one() / p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum RademacherMode {
    /// Average over every sign pattern.
    Exact,
    MonteCarlo { samples: usize, seed: u64 },
}

/// `E‖Σ_k r_k g_k‖_p` with its standard error (zero in exact mode).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RademacherEstimate<T> {
    pub mean: T,
    pub stderr: T,
    pub mode: RademacherMode,
    /// Sign patterns actually evaluated.
    pub evaluations: usize,
}

/// Rademacher average of fields `g_k` sharing one layout `offsets` over
/// vertices with measure `mu`.
pub fn rademacher_norm<T: Real>(
    fields: &[Vec<T>],
    offsets: &[usize],
    mu: &[T],
    p: T,
    mode: RademacherMode,
) -> Result<RademacherEstimate<T>> {
    let m = fields.len();
    if m == 0 {
        return Err(LabError::validation("fields", "empty family"));
    }
    if !(p >= T::one()) {
        return Err(LabError::validation("p", "must be at least 1"));
    }
    let len = *offsets.last().unwrap_or(&0);
    if let Some(bad) = fields.iter().find(|g| g.len() != len) {
        return Err(LabError::Shape {
            expected: len,
            got: bad.len(),
        });
    }
    let norm = |v: &[T]| lp_of_squares(&modulus_sq_t(v, offsets), mu, p);
    match mode {
        RademacherMode::Exact => {
            if m > MAX_EXACT_MEMBERS {
                return Err(LabError::TooManyForExact {
                    got: m,
                    max: MAX_EXACT_MEMBERS,
                });
            }
            // r_1 = +1 by the symmetry v ↦ −v; Gray code over the rest
            let mut signs = vec![T::one(); m];
            let mut sum: Vec<T> = (0..len).map(|i| fields.iter().map(|g| g[i]).sum()).collect();
            let patterns = 1usize << (m - 1);
            let mut total = norm(&sum);
            for i in 1..patterns {
                let k = i.trailing_zeros() as usize + 1;
                let delta = -T::lit(2.0) * signs[k];
                for (s, &g) in sum.iter_mut().zip(&fields[k]) {
                    *s += delta * g;
                }
                signs[k] = -signs[k];
                total += norm(&sum);
            }
            Ok(RademacherEstimate {
                mean: total / T::lit(patterns as f64),
                stderr: T::zero(),
                mode,
                evaluations: patterns,
            })
        }
        RademacherMode::MonteCarlo { samples, seed } => {
            if samples < MIN_MC_SAMPLES {
                return Err(LabError::validation(
                    "samples",
                    format!("monte-carlo needs at least {MIN_MC_SAMPLES} samples"),
                ));
            }
            const CHUNK: usize = 4096;
            let chunks = samples.div_ceil(CHUNK);
            let partial: Vec<(T, T)> = (0..chunks)
                .into_par_iter()
                .map(|c| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(c as u64);
                    let count = CHUNK.min(samples - c * CHUNK);
                    let mut sum = vec![T::zero(); len];
                    let (mut s1, mut s2) = (T::zero(), T::zero());
                    for _ in 0..count {
                        sum.iter_mut().for_each(|v| *v = T::zero());
                        for g in fields {
                            let r = if rng.random::<bool>() { T::one() } else { -T::one() };
                            for (s, &gv) in sum.iter_mut().zip(g) {
                                *s += r * gv;
                            }
                        }
                        let v = norm(&sum);
                        s1 += v;
                        s2 += v * v;
                    }
                    (s1, s2)
                })
                .collect();
            let (s1, s2) = partial
                .into_iter()
                .fold((T::zero(), T::zero()), |(a, b), (c, d)| (a + c, b + d));
            let nn = T::lit(samples as f64);
            let mean = s1 / nn;
            let var = (s2 / nn - mean * mean).max(T::zero()) * nn / (nn - T::one());
            Ok(RademacherEstimate {
                mean,
                stderr: (var / nn).sqrt(),
                mode,
                evaluations: samples,
            })
        }
    }
}

/// `E‖Σ_k r_k T_{t_k} f_k‖_p` for members of a family.
pub fn rademacher_family<T: Real>(
    family: &OperatorFamily<'_, T>,
    ts: &[T],
    fs: &[Vec<T>],
    p: T,
    mode: RademacherMode,
) -> Result<RademacherEstimate<T>> {
    if ts.len() != fs.len() {
        return Err(LabError::Shape {
            expected: ts.len(),
            got: fs.len(),
        });
    }
    let fields = ts
        .iter()
        .zip(fs)
        .map(|(&t, f)| family.apply(t, f))
        .collect::<Result<Vec<_>>>()?;
    rademacher_norm(&fields, family.offsets(), family.mu(), p, mode)
}

/// `‖(Σ_k |T_{t_k} f_k|²)^{1/2}‖_p / ‖(Σ_k |f_k|²)^{1/2}‖_p`.
pub fn square_function_ratio<T: Real>(
    family: &OperatorFamily<'_, T>,
    ts: &[T],
    fs: &[Vec<T>],
    p: T,
) -> Result<T> {
    if ts.len() != fs.len() || ts.is_empty() {
        return Err(LabError::validation("witness", "t-values and f-vectors must pair up"));
    }
    let n = family.dim();
    let mut s = vec![T::zero(); n];
    let mut q = vec![T::zero(); n];
    for (&t, f) in ts.iter().zip(fs) {
        let g = modulus_sq_t(&family.apply(t, f)?, family.offsets());
        for x in 0..n {
            s[x] += g[x];
            q[x] += f[x] * f[x];
        }
    }
    let den = lp_of_squares(&q, family.mu(), p);
    if !(den > T::zero()) {
        return Err(LabError::Domain("all f_k vanish".into()));
    }
    Ok(lp_of_squares(&s, family.mu(), p) / den)
}

/// Search budget for [`estimate_rbound`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpec {
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Additional restarts seeded on single eigenvectors at their peak time.
    #[serde(default = "default_eigen_seeds")]
    pub eigen_seeds: usize,
}

fn default_restarts() -> usize {
    32
}
fn default_steps() -> usize {
    100
}
fn default_eigen_seeds() -> usize {
    16
}

impl Default for SearchSpec {
    fn default() -> Self {
        SearchSpec {
            restarts: default_restarts(),
            steps: default_steps(),
            seed: 0,
            eigen_seeds: default_eigen_seeds(),
        }
    }
}

impl SearchSpec {
    pub fn with_seed(seed: u64) -> Self {
        SearchSpec {
            seed,
            ..Default::default()
        }
    }
}

/// Best square-function ratio found, with the configuration that attains it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RboundEstimate<T> {
    pub family: FamilyKind,
    pub p: T,
    pub m: usize,
    pub value: T,
    pub n: usize,
    pub t_values: Vec<T>,
    pub f_witnesses: Vec<Vec<T>>,
    pub normalization: String,
    pub seed: u64,
    pub restarts: usize,
    pub steps: usize,
    /// Best value after each restart (random restarts first, then eigen seeds).
    pub best_so_far: Vec<T>,
    /// Best value kept rising over the second half of the restarts.
    pub trending: bool,
}

struct Config<T> {
    ts: Vec<T>,
    fs: Vec<Vec<T>>,
}

struct Evaluator<'f, 'a, T> {
    family: &'f OperatorFamily<'a, T>,
    p: T,
}

impl<T: Real> Evaluator<'_, '_, T> {
    fn parts(&self, cfg: &Config<T>) -> (Vec<Vec<T>>, Vec<Vec<T>>, Vec<T>, Vec<T>) {
        let n = self.family.dim();
        let mut fields = Vec::with_capacity(cfg.ts.len());
        let mut s = vec![T::zero(); n];
        let mut q = vec![T::zero(); n];
        let mut ss = Vec::with_capacity(cfg.ts.len());
        for (&t, f) in cfg.ts.iter().zip(&cfg.fs) {
            let c = self.family.dec.coefficients(f);
            let g = self.family.apply_coeffs(t, f, &c);
            let gs = modulus_sq_t(&g, self.family.offsets());
            for x in 0..n {
                s[x] += gs[x];
                q[x] += f[x] * f[x];
            }
            fields.push(g);
            ss.push(gs);
        }
        (fields, ss, s, q)
    }

    fn ratio(&self, cfg: &Config<T>) -> T {
        let (_, _, s, q) = self.parts(cfg);
        let den = lp_of_squares(&q, self.family.mu(), self.p);
        if den > T::zero() {
            lp_of_squares(&s, self.family.mu(), self.p) / den
        } else {
            T::zero()
        }
    }

    /// Euclidean gradient of `log ratio` with respect to every `f_k`.
    fn log_gradient(&self, cfg: &Config<T>) -> Vec<Vec<T>> {
        let (fields, _, s, q) = self.parts(cfg);
        let mu = self.family.mu();
        let p = self.p;
        let exponent = p / T::lit(2.0) - T::one();
        let np = lp_of_squares(&s, mu, p).powf(p);
        let dp = lp_of_squares(&q, mu, p).powf(p);
        let weight = |v: T, x: usize, total: T| {
            if v > T::zero() && total > T::zero() {
                mu[x] * v.powf(exponent) / total
            } else {
                T::zero()
            }
        };
        let offsets = self.family.offsets();
        cfg.ts
            .iter()
            .zip(&cfg.fs)
            .zip(&fields)
            .map(|((&t, f), g)| {
                let mut y = g.clone();
                for x in 0..offsets.len() - 1 {
                    let wx = weight(s[x], x, np);
                    for v in &mut y[offsets[x]..offsets[x + 1]] {
                        *v *= wx;
                    }
                }
                let num = self.family.transpose(t, &y);
                num.iter()
                    .enumerate()
                    .map(|(x, &a)| a - weight(q[x], x, dp) * f[x])
                    .collect()
            })
            .collect()
    }
}

fn gaussian_config<T: Real>(
    family: &OperatorFamily<'_, T>,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Config<T> {
    let (lo, hi) = family.t_window();
    let (a, b) = (lo.as_f64().ln(), hi.as_f64().ln());
    let n = family.dim();
    let mut ts = Vec::with_capacity(m);
    let mut fs = Vec::with_capacity(m);
    for _ in 0..m {
        let u: f64 = rng.random();
        ts.push(T::lit((a + (b - a) * u).exp()));
        let c: Vec<T> = (0..n)
            .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        fs.push(family.dec.synthesize(&c));
    }
    Config { ts, fs }
}

fn eigen_config<T: Real>(family: &OperatorFamily<'_, T>, m: usize, mode: usize) -> Config<T> {
    let lam = family.dec.lambdas[mode];
    let t = if lam > T::zero() {
        T::lit(family.peak_z()) / lam
    } else {
        T::one()
    };
    let u: Vec<T> = family.dec.vectors.column(mode).to_vec();
    Config {
        ts: vec![t; m],
        fs: vec![u; m],
    }
}

/// Coordinate ascent: multiplicative `t`-moves per member, then a joint
/// gradient step on the `f_k`. Only improvements are accepted.
fn ascend<T: Real>(eval: &Evaluator<'_, '_, T>, mut cfg: Config<T>, steps: usize) -> (Config<T>, T) {
    let m = cfg.ts.len();
    let mut best = eval.ratio(&cfg);
    let spectral = !matches!(eval.family.kind, FamilyKind::Scalar { .. });
    let mut sigma = vec![T::lit(std::f64::consts::LN_2); m];
    let sigma_floor = T::lit(1e-8);
    let mut eta = T::lit(0.1);
    let eta_floor = T::lit(1e-12);
    let mut stalls = 0;
    for _ in 0..steps {
        let start = best;
        if spectral {
            for k in 0..m {
                if sigma[k] < sigma_floor {
                    continue;
                }
                let t0 = cfg.ts[k];
                let mut moved = false;
                for dir in [T::one(), -T::one()] {
                    cfg.ts[k] = t0 * (dir * sigma[k]).exp();
                    let r = eval.ratio(&cfg);
                    if r > best {
                        best = r;
                        moved = true;
                        break;
                    }
                }
                if moved {
                    sigma[k] = (sigma[k] * T::lit(1.5)).min(T::lit(2.0));
                } else {
                    cfg.ts[k] = t0;
                    sigma[k] = sigma[k] / T::lit(2.0);
                }
            }
        }
        if eta >= eta_floor {
            let grad = eval.log_gradient(&cfg);
            let gnorm = grad.iter().flatten().map(|&v| v * v).sum::<T>().sqrt();
            let fnorm = cfg.fs.iter().flatten().map(|&v| v * v).sum::<T>().sqrt();
            if gnorm > T::zero() && fnorm > T::zero() {
                let scale = eta * fnorm / gnorm;
                let trial = Config {
                    ts: cfg.ts.clone(),
                    fs: cfg
                        .fs
                        .iter()
                        .zip(&grad)
                        .map(|(f, g)| f.iter().zip(g).map(|(&a, &b)| a + scale * b).collect())
                        .collect(),
                };
                let r = eval.ratio(&trial);
                if r > best {
                    best = r;
                    cfg = trial;
                    eta = (eta * T::lit(1.5)).min(T::one());
                } else {
                    eta = eta / T::lit(2.0);
                }
            } else {
                eta = T::zero();
            }
        }
        if best - start <= T::lit(1e-10) * best.abs() {
            stalls += 1;
            let t_done = !spectral || sigma.iter().all(|&s| s < sigma_floor);
            if stalls >= 8 || (t_done && eta < eta_floor) {
                break;
            }
        } else {
            stalls = 0;
        }
    }
    (cfg, best)
}

/// Lower estimate of the R-bound of `family` in the square-function
/// normalisation, over `m`-member selections.
pub fn estimate_rbound<T: Real>(
    family: &OperatorFamily<'_, T>,
    p: T,
    m: usize,
    search: &SearchSpec,
) -> Result<RboundEstimate<T>> {
    if m == 0 {
        return Err(LabError::validation("m", "must be at least 1"));
    }
    if !(p > T::one()) {
        return Err(LabError::validation("p", "must exceed 1"));
    }
    let eval = Evaluator { family, p };
    let dec = family.dec;
    let positive: Vec<usize> = (dec.kernel_dim..dec.dim()).collect();
    let eigen_modes: Vec<usize> = if positive.is_empty() || search.eigen_seeds == 0 {
        Vec::new()
    } else {
        let count = search.eigen_seeds.min(positive.len());
        (0..count)
            .map(|i| positive[i * (positive.len() - 1) / (count - 1).max(1)])
            .collect()
    };
    let jobs = search.restarts + eigen_modes.len();
    let results: Vec<(Config<T>, T)> = (0..jobs)
        .into_par_iter()
        .map(|i| {
            let init = if i < search.restarts {
                let mut rng = ChaCha8Rng::seed_from_u64(search.seed);
                rng.set_stream(i as u64);
                gaussian_config(family, m, &mut rng)
            } else {
                eigen_config(family, m, eigen_modes[i - search.restarts])
            };
            ascend(&eval, init, search.steps)
        })
        .collect();
    let mut best: Option<(usize, T)> = None;
    let mut best_so_far = Vec::with_capacity(jobs);
    for (i, (_, r)) in results.iter().enumerate() {
        if best.is_none_or(|(_, b)| *r > b) {
            best = Some((i, *r));
        }
        best_so_far.push(best.map(|b| b.1).unwrap_or(T::zero()));
    }
    let (idx, _) = best.ok_or_else(|| LabError::validation("search", "no restarts"))?;
    let witness = &results[idx].0;
    let value = square_function_ratio(family, &witness.ts, &witness.fs, p)?;
    let half = search.restarts / 2;
    let trending = search.restarts >= 4
        && best_so_far[search.restarts - 1] > best_so_far[half] * T::lit(1.01);
    Ok(RboundEstimate {
        family: family.kind.clone(),
        p,
        m,
        value,
        n: dec.dim(),
        t_values: witness.ts.clone(),
        f_witnesses: witness.fs.clone(),
        normalization: "square-function".into(),
        seed: search.seed,
        restarts: search.restarts,
        steps: search.steps,
        best_so_far,
        trending,
    })
}

/// Exact `p = 2` value `sup_t ‖T_t‖_{2→2}`: the top eigenvalue of
/// `D_t G D_t` with `G_jk = ⟨Γu_j, Γu_k⟩_μ` and `D_t = diag(√t G(tλ_k))`,
/// maximised over a fine log grid in `t` and refined by golden section.
pub fn l2_family_norm<T: Real>(family: &OperatorFamily<'_, T>) -> Result<T> {
    if let FamilyKind::Scalar { c } = family.kind {
        return Ok(T::lit(c.abs()));
    }
    let dec = family.dec;
    let n = dec.dim();
    let mut gram = Array2::<f64>::zeros((n, n));
    let offsets = family.offsets();
    let owner: Vec<usize> = (0..offsets.len() - 1)
        .flat_map(|x| std::iter::repeat_n(x, offsets[x + 1] - offsets[x]))
        .collect();
    for j in 0..n {
        for k in 0..=j {
            let v: f64 = (0..family.channels.nrows())
                .map(|e| {
                    (family.channels[[e, j]] * family.channels[[e, k]]).as_f64()
                        * dec.mu[owner[e]].as_f64()
                })
                .sum();
            gram[[j, k]] = v;
            gram[[k, j]] = v;
        }
    }
    let top = |t: f64| -> f64 {
        let w: Vec<f64> = family.weights(T::lit(t)).iter().map(|v| v.as_f64()).collect();
        let mut m = gram.clone();
        for j in 0..n {
            for k in 0..n {
                m[[j, k]] *= w[j] * w[k];
            }
        }
        crate::linalg::symmetric_eigen(m.view())
            .map(|e| e.values[n - 1])
            .unwrap_or(f64::NAN)
    };
    let (lo, hi) = family.t_window();
    let (a, b) = (lo.as_f64().ln(), hi.as_f64().ln());
    let count = 400;
    let mut best = (f64::NEG_INFINITY, a);
    for i in 0..=count {
        let u = a + (b - a) * i as f64 / count as f64;
        let v = top(u.exp());
        if v > best.0 {
            best = (v, u);
        }
    }
    let h = (b - a) / count as f64;
    let (mut x0, mut x1) = (best.1 - h, best.1 + h);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..80 {
        let c = x1 - g * (x1 - x0);
        let d = x0 + g * (x1 - x0);
        if top(c.exp()) > top(d.exp()) {
            x1 = d;
        } else {
            x0 = c;
        }
    }
    let refined = top((0.5 * (x0 + x1)).exp());
    Ok(T::lit(best.0.max(refined).max(0.0).sqrt()))
}

/// Semigroup-family and resolvent-family estimates on the same search budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyComparison<T> {
    pub semigroup: RboundEstimate<T>,
    pub resolvent: RboundEstimate<T>,
    /// `semigroup.value / resolvent.value`.
    pub ratio: T,
    pub trending: bool,
}

pub fn compare_families<T: Real>(
    dec: &SpectralDecomposition<T>,
    gamma: &CarreOperator<T>,
    p: T,
    delta: f64,
    m: usize,
    search: &SearchSpec,
) -> Result<FamilyComparison<T>> {
    if !(delta > 0.5) {
        return Err(LabError::validation("delta", "must exceed 1/2"));
    }
    let semigroup = estimate_rbound(&OperatorFamily::semigroup(dec, gamma)?, p, m, search)?;
    let resolvent = estimate_rbound(&OperatorFamily::resolvent(dec, gamma, delta)?, p, m, search)?;
    let ratio = semigroup.value / resolvent.value;
    let trending = semigroup.trending || resolvent.trending;
    Ok(FamilyComparison {
        semigroup,
        resolvent,
        ratio,
        trending,
    })
}

/// Vertical square function `(∫₀^∞ |G(tL)f|²(x) dt/t)^{1/2}`.
pub fn square_function<T: Real>(
    dec: &SpectralDecomposition<T>,
    symbol: &Symbol,
    f: &[T],
    quad: &QuadratureSpec,
) -> Result<Vec<T>> {
    symbol.validate()?;
    quad.validate()?;
    if f.len() != dec.dim() {
        return Err(LabError::Shape {
            expected: dec.dim(),
            got: f.len(),
        });
    }
    if symbol.value_at_zero() != Some(0.0) || !(symbol.eps_zero() > 0.0) {
        return Err(LabError::Divergence(format!(
            "symbol {symbol} does not vanish at 0; ∫ |G(tL)f|² dt/t diverges"
        )));
    }
    if !(symbol.delta_infinity() > 0.0) {
        return Err(LabError::Divergence(format!(
            "symbol {symbol} does not decay at infinity; ∫ |G(tL)f|² dt/t diverges"
        )));
    }
    let n = dec.dim();
    let lo = dec.kernel_dim;
    let mut kernel = Array2::<T>::zeros((n, n));
    let mut closed = quad.rule == QuadratureRule::ClosedForm;
    if closed {
        'outer: for j in lo..n {
            for k in lo..n {
                match symbol.pair_integral_dt_over_t(dec.lambdas[j], dec.lambdas[k]) {
                    Some(v) => kernel[[j, k]] = v,
                    None => {
                        closed = false;
                        break 'outer;
                    }
                }
            }
        }
    }
    if !closed {
        let Some((t_min, t_max)) = quad.window(dec)? else {
            return Ok(vec![T::zero(); n]);
        };
        let grid = TimeGrid::new(t_min, t_max, quad.nodes);
        let g = grid.len();
        let mut e = Array2::<T>::zeros((n, g));
        let mut ew = Array2::<T>::zeros((n, g));
        for k in lo..n {
            for i in 0..g {
                let v = symbol.evaluate(grid.t[i] * dec.lambdas[k]).unwrap_or(T::zero());
                e[[k, i]] = v;
                ew[[k, i]] = v * grid.w[i] / grid.t[i];
            }
        }
        kernel = e.dot(&ew.t());
    }
    let c = dec.coefficients(f);
    let mut b = dec.vectors.clone();
    for k in 0..n {
        let ck = if k < lo { T::zero() } else { c[k] };
        b.column_mut(k).mapv_inplace(|v| v * ck);
    }
    let w = b.dot(&kernel);
    Ok((0..n)
        .map(|x| {
            let s: T = (0..n).map(|k| w[[x, k]] * b[[x, k]]).sum();
            s.max(T::zero()).sqrt()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_graph_laplacian, CarreMode, Model};
    use crate::spectral::decompose;

    fn path(n: usize) -> (SpectralDecomposition<f64>, CarreOperator<f64>) {
        let m = Model::path(n).unwrap();
        let gen = build_graph_laplacian(&m).unwrap();
        (decompose(&gen).unwrap(), CarreOperator::new(&m, CarreMode::Full).unwrap())
    }

    #[test]
    fn single_member_is_its_norm() {
        let (dec, gamma) = path(4);
        let fam = OperatorFamily::semigroup(&dec, &gamma).unwrap();
        let f = vec![vec![0.3, -1.0, 2.0, 0.5]];
        let g = fam.apply(0.7, &f[0]).unwrap();
        let direct = lp_of_squares(&modulus_sq_t(&g, fam.offsets()), &dec.mu, 1.5);
        let r = rademacher_family(&fam, &[0.7], &f, 1.5, RademacherMode::Exact).unwrap();
        assert!((r.mean - direct).abs() < 1e-14);
    }

    #[test]
    fn identical_members_average() {
        let (dec, gamma) = path(3);
        let fam = OperatorFamily::new(FamilyKind::Scalar { c: 1.0 }, &dec, &gamma).unwrap();
        let f = vec![1.0, -2.0, 0.5];
        let r = rademacher_family(&fam, &[1.0, 1.0], &[f.clone(), f.clone()], 1.5, RademacherMode::Exact)
            .unwrap();
        let norm = crate::linalg::weighted_norm(&f, &dec.mu, 1.5);
        assert!((r.mean - norm).abs() < 1e-14);
    }

    #[test]
    fn p2_second_moment_identity() {
        let (dec, gamma) = path(5);
        let fam = OperatorFamily::new(FamilyKind::Scalar { c: 1.0 }, &dec, &gamma).unwrap();
        let fs: Vec<Vec<f64>> = (0..5).map(|k| dec.vectors.column(k).to_vec()).collect();
        let r = rademacher_family(&fam, &[1.0; 5], &fs, 2.0, RademacherMode::Exact).unwrap();
        let root_m = 5f64.sqrt();
        assert!(r.mean <= root_m + 1e-12 && r.mean >= root_m / 2f64.sqrt());
    }

    #[test]
    fn exact_refuses_large_families() {
        let fields = vec![vec![1.0]; 17];
        let err = rademacher_norm(&fields, &[0, 1], &[1.0], 2.0, RademacherMode::Exact).unwrap_err();
        assert!(matches!(err, LabError::TooManyForExact { got: 17, max: 16 }));
        let mc = RademacherMode::MonteCarlo { samples: 10, seed: 1 };
        assert!(rademacher_norm(&fields, &[0, 1], &[1.0], 2.0, mc).is_err());
    }

    #[test]
    fn monte_carlo_tracks_exact() {
        let (dec, gamma) = path(6);
        let fam = OperatorFamily::semigroup(&dec, &gamma).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = gaussian_config(&fam, 8, &mut rng);
        let exact = rademacher_family(&fam, &cfg.ts, &cfg.fs, 1.5, RademacherMode::Exact).unwrap();
        let mc = RademacherMode::MonteCarlo { samples: 20_000, seed: 4 };
        let est = rademacher_family(&fam, &cfg.ts, &cfg.fs, 1.5, mc).unwrap();
        assert!((est.mean - exact.mean).abs() < 0.02 * exact.mean);
        assert!(est.stderr > 0.0);
        let again = rademacher_family(&fam, &cfg.ts, &cfg.fs, 1.5, mc).unwrap();
        assert_eq!(est, again);
    }

    #[test]
    fn scalar_family_estimate() {
        let (dec, gamma) = path(5);
        let fam = OperatorFamily::new(FamilyKind::Scalar { c: -3.0 }, &dec, &gamma).unwrap();
        let spec = SearchSpec {
            restarts: 4,
            steps: 5,
            ..Default::default()
        };
        let est = estimate_rbound(&fam, 1.5, 3, &spec).unwrap();
        assert!((est.value - 3.0).abs() < 1e-12);
    }

    #[test]
    fn p2_semigroup_matches_oracle() {
        let (dec, gamma) = path(2);
        let fam = OperatorFamily::semigroup(&dec, &gamma).unwrap();
        let oracle = l2_family_norm(&fam).unwrap();
        assert!((oracle - (2.0 * std::f64::consts::E).powf(-0.5)).abs() < 1e-10);
        let est = estimate_rbound(&fam, 2.0, 3, &SearchSpec::with_seed(3)).unwrap();
        assert!((est.value - oracle).abs() < 1e-6 * oracle, "{} vs {oracle}", est.value);
        let replay = square_function_ratio(&fam, &est.t_values, &est.f_witnesses, 2.0).unwrap();
        assert_eq!(replay, est.value);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (dec, gamma) = path(4);
        let fam = OperatorFamily::resolvent(&dec, &gamma, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = gaussian_config(&fam, 2, &mut rng);
        let eval = Evaluator { family: &fam, p: 1.4 };
        let grad = eval.log_gradient(&cfg);
        let h = 1e-6;
        for k in 0..2 {
            for x in 0..4 {
                let mut up = Config { ts: cfg.ts.clone(), fs: cfg.fs.clone() };
                let mut dn = Config { ts: cfg.ts.clone(), fs: cfg.fs.clone() };
                up.fs[k][x] += h;
                dn.fs[k][x] -= h;
                let fd = (eval.ratio(&up).ln() - eval.ratio(&dn).ln()) / (2.0 * h);
                assert!((fd - grad[k][x]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", grad[k][x]);
            }
        }
    }

    #[test]
    fn best_so_far_is_monotone_and_deterministic() {
        let (dec, gamma) = path(6);
        let fam = OperatorFamily::semigroup(&dec, &gamma).unwrap();
        let spec = SearchSpec {
            restarts: 6,
            steps: 10,
            seed: 11,
            eigen_seeds: 2,
        };
        let a = estimate_rbound(&fam, 1.5, 2, &spec).unwrap();
        let b = estimate_rbound(&fam, 1.5, 2, &spec).unwrap();
        assert_eq!(a, b);
        assert!(a.best_so_far.windows(2).all(|w| w[0] <= w[1]));
        let more = estimate_rbound(&fam, 1.5, 2, &SearchSpec { restarts: 12, ..spec }).unwrap();
        assert!(more.value >= a.value * (1.0 - 1e-12));
    }

    #[test]
    fn square_function_examples() {
        let (dec, _) = path(5);
        let u: Vec<f64> = dec.vectors.column(2).to_vec();
        for quad in [QuadratureSpec::default(), QuadratureSpec::log_gauss(32)] {
            let s = square_function(&dec, &Symbol::ZExp, &u, &quad).unwrap();
            for (a, b) in s.iter().zip(&u) {
                assert!((a - b.abs() / 2.0).abs() < 1e-9, "{a} vs {}", b.abs() / 2.0);
            }
        }
        assert!(matches!(
            square_function(&dec, &Symbol::One, &u, &QuadratureSpec::default()),
            Err(LabError::Divergence(_))
        ));
        let k = square_function(&dec, &Symbol::ZExp, &[1.0; 5], &QuadratureSpec::default()).unwrap();
        assert!(k.iter().all(|&v| v < 1e-12));
    }

    #[test]
    fn square_function_scale_invariant() {
        let m = Model::<f64>::path(4).unwrap();
        let gen = build_graph_laplacian(&m).unwrap();
        let dec = decompose(&gen).unwrap();
        let mut gen2 = gen.clone();
        gen2.matrix.mapv_inplace(|v| 2.0 * v);
        let dec2 = decompose(&gen2).unwrap();
        let f = [0.4, -1.0, 0.2, 1.3];
        let quad = QuadratureSpec::log_gauss(32);
        let a = square_function(&dec, &Symbol::psi(0.2), &f, &quad).unwrap();
        let b = square_function(&dec2, &Symbol::psi(0.2), &f, &quad).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn families_compare_on_k2() {
        let (dec, gamma) = path(2);
        let spec = SearchSpec {
            restarts: 4,
            steps: 20,
            seed: 5,
            eigen_seeds: 1,
        };
        let cmp = compare_families(&dec, &gamma, 2.0, 1.0, 2, &spec).unwrap();
        // sup_z √z (1+z)^{-1} = 1/2 at z = 1
        assert!((cmp.resolvent.value - 0.5).abs() < 1e-6);
        assert!((cmp.ratio - (2.0 * std::f64::consts::E).powf(-0.5) / 0.5).abs() < 1e-6);
        assert!(compare_families(&dec, &gamma, 2.0, 0.5, 2, &spec).is_err());
    }
}
