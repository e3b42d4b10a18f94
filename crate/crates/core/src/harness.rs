//! Verification of the multiplicative inequality and its relatives:
//! ratio evaluation, extremal search, sweeps, the `ΓL^{−α}e^{−L}` bound and
//! the square-function chain through the maximal function.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, CorpusEntry};
use crate::error::{LabError, Result};
use crate::functionals::{maximal_function, LpsEngine};
use crate::gallery::Instance;
use crate::linalg::{symmetric_eigen, weighted_norm};
use crate::model::{
    measure_alpha_p, AlphaMeasurement, BoundaryCondition, CarreMode, CarreOperator, Generator,
    GridSpec, ModelSpec,
};
use crate::scalar::Real;
use crate::spectral::SpectralDecomposition;

pub const DEFAULT_EPS_GRID: [f64; 8] = [0.5, 0.4, 0.3, 0.2, 0.1, 0.05, 0.02, 0.01];
pub const DEFAULT_SIZES: [usize; 6] = [16, 32, 64, 128, 256, 512];
pub const HOLDER_TOL: f64 = 1e-12;

/// Rejects `(p, p0, p1)` unless `1/p0 + 1/p1 = 2/p`.
pub fn validate_holder(p: f64, p0: f64, p1: f64) -> Result<()> {
    for (name, v) in [("p", p), ("p0", p0), ("p1", p1)] {
        if !(v > 1.0 && v.is_finite()) {
            return Err(LabError::validation(name, "must be a finite exponent above 1"));
        }
    }
    let lhs = 1.0 / p0 + 1.0 / p1;
    let rhs = 2.0 / p;
    if (lhs - rhs).abs() > HOLDER_TOL {
        return Err(LabError::HolderTriple { lhs, rhs });
    }
    Ok(())
}

fn validate_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 0.5) {
        return Err(LabError::validation("eps", "must lie in (0, 1/2]"));
    }
    Ok(())
}

/// `ρ(f) = ‖Γf‖_p² / (‖L^{1/2+ε}f‖_{p0} ‖L^{1/2−ε}f‖_{p1})`, evaluated on `(I − P)f`.
pub fn ratio_31<T: Real>(
    dec: &SpectralDecomposition<T>,
    gamma: &CarreOperator<T>,
    f: &[T],
    p: f64,
    p0: f64,
    p1: f64,
    eps: f64,
) -> Result<T> {
    validate_eps(eps)?;
    validate_holder(p, p0, p1)?;
    let g = admissible(dec, f)?;
    let half = T::lit(0.5);
    let e = T::lit(eps);
    let hi = dec.fractional_power(half + e, &g)?;
    let lo = if eps == 0.5 {
        g.clone()
    } else {
        dec.fractional_power(half - e, &g)?
    };
    let num = gamma.norm(&g, T::lit(p));
    Ok(num * num / (weighted_norm(&hi, &dec.mu, T::lit(p0)) * weighted_norm(&lo, &dec.mu, T::lit(p1))))
}

/// `(I − P)f`, or a domain error when `f` lies in `ker L`.
fn admissible<T: Real>(dec: &SpectralDecomposition<T>, f: &[T]) -> Result<Vec<T>> {
    if f.len() != dec.dim() {
        return Err(LabError::Shape {
            expected: dec.dim(),
            got: f.len(),
        });
    }
    let g = dec.project_out_kernel(f);
    let two = T::lit(2.0);
    let full = weighted_norm(f, &dec.mu, two);
    let rest = weighted_norm(&g, &dec.mu, two);
    if !(rest > T::lit(1e-14) * full) || rest == T::zero() {
        return Err(LabError::Domain("f lies in ker L".into()));
    }
    Ok(g)
}

/// The endpoint form `‖Γf‖_p² / (‖Lf‖_p ‖f − Pf‖_p)`, computed from the
/// generator matrix directly rather than from spectral powers.
pub fn coulhon_duong_ratio<T: Real>(
    gen: &Generator<T>,
    dec: &SpectralDecomposition<T>,
    gamma: &CarreOperator<T>,
    f: &[T],
    p: f64,
) -> Result<T> {
    let pf = dec.kernel_part(f);
    let rest: Vec<T> = f.iter().zip(&pf).map(|(&a, &b)| a - b).collect();
    let lf = gen.apply(f);
    let pp = T::lit(p);
    let num = gamma.norm(f, pp);
    Ok(num * num / (weighted_norm(&lf, &dec.mu, pp) * weighted_norm(&rest, &dec.mu, pp)))
}

/// `‖ |Mf|_groups ‖_{p,w}`: rows of `Mf` are grouped by `offsets`, each group
/// contributes its Euclidean length with weight `w`.
#[derive(Debug, Clone)]
pub struct NormTerm<T> {
    /// Transposed matrix: row `j` is column `j` of `M`.
    columns: Array2<T>,
    offsets: Vec<usize>,
    weights: Vec<T>,
    p: T,
    exponent: T,
}

impl<T: Real> NormTerm<T> {
    pub fn new(matrix: &Array2<T>, offsets: Vec<usize>, weights: Vec<T>, p: T, exponent: T) -> Self {
        assert_eq!(*offsets.last().unwrap_or(&0), matrix.nrows());
        assert_eq!(offsets.len(), weights.len() + 1);
        NormTerm {
            columns: matrix.t().as_standard_layout().into_owned(),
            offsets,
            weights,
            p,
            exponent,
        }
    }

    /// One group per vertex.
    pub fn vertexwise(matrix: &Array2<T>, mu: &[T], p: T, exponent: T) -> Self {
        Self::new(matrix, (0..=matrix.nrows()).collect(), mu.to_vec(), p, exponent)
    }

    fn image(&self, f: &[T]) -> Vec<T> {
        let mut y = vec![T::zero(); self.columns.ncols()];
        for (j, &fj) in f.iter().enumerate() {
            if fj != T::zero() {
                for (yr, &m) in y.iter_mut().zip(self.columns.row(j)) {
                    *yr += fj * m;
                }
            }
        }
        y
    }

    fn norm(&self, y: &[T]) -> T {
        let two = T::lit(2.0);
        let half = self.p / two;
        let mut s = T::zero();
        for (g, &w) in self.weights.iter().enumerate() {
            let sq: T = y[self.offsets[g]..self.offsets[g + 1]].iter().map(|&v| v * v).sum();
            s += if self.p == two { w * sq } else { w * sq.powf(half) };
        }
        s.powf(T::one() / self.p)
    }

    /// Norm of `y + h·M e_j` without forming the perturbed image twice.
    fn norm_shifted(&self, y: &[T], j: usize, h: T, scratch: &mut Vec<T>) -> T {
        scratch.clear();
        scratch.extend(y.iter().zip(self.columns.row(j)).map(|(&a, &m)| a + h * m));
        self.norm(scratch)
    }
}

/// A scale-invariant objective for [`extremal_search`].
pub trait Objective<T: Real> {
    fn dim(&self) -> usize;
    /// Objective value, `None` where undefined (a vanishing denominator).
    fn value(&self, f: &[T]) -> Option<T>;
    /// Central finite-difference gradient of `log value` with step `h`.
    fn log_gradient(&self, f: &[T], h: T) -> Vec<T>;
    /// Map onto the search manifold (unit sphere, possibly kernel-orthogonal).
    fn project(&self, f: &[T]) -> Vec<T>;
}

/// `Π_i ‖M_i f‖^{e_i}` over dense linear maps.
#[derive(Debug, Clone)]
pub struct ProductOfNorms<'a, T> {
    terms: Vec<NormTerm<T>>,
    dec: &'a SpectralDecomposition<T>,
    kernel_orthogonal: bool,
}

impl<'a, T: Real> ProductOfNorms<'a, T> {
    pub fn new(dec: &'a SpectralDecomposition<T>, terms: Vec<NormTerm<T>>, kernel_orthogonal: bool) -> Self {
        ProductOfNorms {
            terms,
            dec,
            kernel_orthogonal,
        }
    }

    /// The objective behind [`ratio_31`].
    pub fn ratio_31(
        dec: &'a SpectralDecomposition<T>,
        gamma: &CarreOperator<T>,
        p: f64,
        p0: f64,
        p1: f64,
        eps: f64,
    ) -> Result<Self> {
        validate_eps(eps)?;
        validate_holder(p, p0, p1)?;
        let half = T::lit(0.5);
        let e = T::lit(eps);
        let grad = NormTerm::new(
            &gamma.channel_matrix(),
            gamma.offsets().to_vec(),
            dec.mu.clone(),
            T::lit(p),
            T::lit(2.0),
        );
        let hi = NormTerm::vertexwise(&dec.range_power_matrix(half + e), &dec.mu, T::lit(p0), -T::one());
        let lo = NormTerm::vertexwise(&dec.range_power_matrix(half - e), &dec.mu, T::lit(p1), -T::one());
        Ok(Self::new(dec, vec![grad, hi, lo], true))
    }

    fn log_value_of_images(&self, images: &[Vec<T>]) -> Option<T> {
        let mut s = T::zero();
        for (term, y) in self.terms.iter().zip(images) {
            let nrm = term.norm(y);
            if !(nrm > T::zero()) {
                if term.exponent < T::zero() {
                    return None;
                }
                return Some(T::neg_infinity());
            }
            s += term.exponent * nrm.ln();
        }
        Some(s)
    }
}

impl<T: Real> Objective<T> for ProductOfNorms<'_, T> {
    fn dim(&self) -> usize {
        self.dec.dim()
    }

    fn value(&self, f: &[T]) -> Option<T> {
        let images: Vec<Vec<T>> = self.terms.iter().map(|t| t.image(f)).collect();
        self.log_value_of_images(&images).map(|v| v.exp())
    }

    fn log_gradient(&self, f: &[T], h: T) -> Vec<T> {
        let images: Vec<Vec<T>> = self.terms.iter().map(|t| t.image(f)).collect();
        let mut scratch = Vec::new();
        let two_h = T::lit(2.0) * h;
        (0..f.len())
            .map(|j| {
                let mut d = T::zero();
                for (term, y) in self.terms.iter().zip(&images) {
                    let up = term.norm_shifted(y, j, h, &mut scratch);
                    let dn = term.norm_shifted(y, j, -h, &mut scratch);
                    if up > T::zero() && dn > T::zero() {
                        d += term.exponent * (up.ln() - dn.ln()) / two_h;
                    }
                }
                d
            })
            .collect()
    }

    fn project(&self, f: &[T]) -> Vec<T> {
        let g = if self.kernel_orthogonal {
            self.dec.project_out_kernel(f)
        } else {
            f.to_vec()
        };
        let nrm = weighted_norm(&g, &self.dec.mu, T::lit(2.0));
        if nrm > T::zero() {
            g.into_iter().map(|v| v / nrm).collect()
        } else {
            g
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace<T> {
    pub iterations: usize,
    pub accepted: usize,
    pub initial: T,
    pub best: T,
    /// Objective after every accepted step, starting with the initial value.
    pub history: Vec<T>,
    /// Stopped on a stationary point rather than the step budget.
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome<T> {
    pub f: Vec<T>,
    pub value: T,
    pub trace: SearchTrace<T>,
}

/// Projected ascent on `log value` with step halving; only improvements are
/// accepted, so the value never drops below the starting one. If no step
/// improves, `init` itself is returned.
pub fn extremal_search<T: Real, O: Objective<T> + ?Sized>(
    obj: &O,
    init: &[T],
    steps: usize,
) -> SearchOutcome<T> {
    let mut f = obj.project(init);
    let start = obj.value(&f).unwrap_or(T::zero());
    let mut value = start;
    let mut trace = SearchTrace {
        iterations: 0,
        accepted: 0,
        initial: start,
        best: start,
        history: vec![start],
        converged: false,
    };
    if !(start > T::zero()) {
        trace.converged = true;
        return SearchOutcome {
            f: init.to_vec(),
            value: start,
            trace,
        };
    }
    let two = T::lit(2.0);
    let mut eta = T::lit(0.1);
    let eta_floor = T::lit(1e-12);
    'outer: for _ in 0..steps {
        trace.iterations += 1;
        let euclid = f.iter().map(|&v| v * v).sum::<T>().sqrt();
        let grad = obj.log_gradient(&f, T::lit(1e-5) * euclid);
        let gnorm = grad.iter().map(|&v| v * v).sum::<T>().sqrt();
        if !(gnorm > T::zero()) {
            trace.converged = true;
            break;
        }
        loop {
            let scale = eta * euclid / gnorm;
            let trial: Vec<T> = f.iter().zip(&grad).map(|(&a, &b)| a + scale * b).collect();
            let trial = obj.project(&trial);
            match obj.value(&trial) {
                Some(v) if v > value => {
                    let rel = (v - value) / value;
                    f = trial;
                    value = v;
                    trace.accepted += 1;
                    trace.history.push(v);
                    eta = (eta * two).min(T::one());
                    if rel < T::lit(1e-10) {
                        trace.converged = true;
                        break 'outer;
                    }
                    break;
                }
                _ => {
                    eta = eta / two;
                    if eta < eta_floor {
                        trace.converged = true;
                        break 'outer;
                    }
                }
            }
        }
    }
    trace.best = value;
    if trace.accepted == 0 {
        return SearchOutcome {
            f: init.to_vec(),
            value: start,
            trace,
        };
    }
    SearchOutcome { f, value, trace }
}

/// Search budget of the harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarnessSearch {
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Number of best corpus entries used as starting points.
    #[serde(default = "default_top")]
    pub top: usize,
}

fn default_steps() -> usize {
    100
}
fn default_top() -> usize {
    5
}

impl Default for HarnessSearch {
    fn default() -> Self {
        HarnessSearch {
            steps: default_steps(),
            top: default_top(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub size: usize,
    pub admissible: usize,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
}

impl CorpusStats {
    fn of(size: usize, mut ratios: Vec<f64>) -> Self {
        ratios.sort_by(|a, b| a.total_cmp(b));
        let k = ratios.len();
        let median = match k {
            0 => 0.0,
            _ if k % 2 == 1 => ratios[k / 2],
            _ => 0.5 * (ratios[k / 2 - 1] + ratios[k / 2]),
        };
        CorpusStats {
            size,
            admissible: k,
            mean: if k == 0 { 0.0 } else { ratios.iter().sum::<f64>() / k as f64 },
            median,
            max: ratios.last().copied().unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InequalityReport<T> {
    pub model_id: String,
    pub p: f64,
    pub p0: f64,
    pub p1: f64,
    pub eps: f64,
    pub max_ratio: T,
    pub witness: Vec<T>,
    pub witness_id: String,
    pub corpus: CorpusStats,
    pub search: SearchTrace<T>,
    pub seed: u64,
    pub flags: Vec<String>,
}

pub const FLAG_NO_ADMISSIBLE: &str = "no admissible corpus entry";
pub const FLAG_NOT_CONVERGED: &str = "search stopped on step budget";

/// Evaluates `ρ` on the corpus, then climbs from the best entries.
#[allow(clippy::too_many_arguments)]
pub fn verify_31<T: Real>(
    dec: &SpectralDecomposition<T>,
    gamma: &CarreOperator<T>,
    model_id: &str,
    (p, p0, p1): (f64, f64, f64),
    eps: f64,
    corpus: &[CorpusEntry<T>],
    search: &HarnessSearch,
    seed: u64,
) -> Result<InequalityReport<T>> {
    validate_eps(eps)?;
    validate_holder(p, p0, p1)?;
    if corpus.is_empty() {
        return Err(LabError::validation("corpus", "empty"));
    }
    let mut scored: Vec<(T, usize)> = Vec::new();
    for (i, e) in corpus.iter().enumerate() {
        match ratio_31(dec, gamma, &e.f, p, p0, p1, eps) {
            Ok(r) => scored.push((r, i)),
            Err(LabError::Domain(_)) => {}
            Err(err) => return Err(err),
        }
    }
    let stats = CorpusStats::of(corpus.len(), scored.iter().map(|(r, _)| r.as_f64()).collect());
    if scored.is_empty() {
        return Ok(InequalityReport {
            model_id: model_id.to_string(),
            p,
            p0,
            p1,
            eps,
            max_ratio: T::zero(),
            witness: Vec::new(),
            witness_id: String::new(),
            corpus: stats,
            search: SearchTrace {
                iterations: 0,
                accepted: 0,
                initial: T::zero(),
                best: T::zero(),
                history: Vec::new(),
                converged: true,
            },
            seed,
            flags: vec![FLAG_NO_ADMISSIBLE.to_string()],
        });
    }
    // stable order: ratio descending, then corpus index
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
    let obj = ProductOfNorms::ratio_31(dec, gamma, p, p0, p1, eps)?;
    let mut best: Option<(SearchOutcome<T>, usize)> = None;
    let mut iterations = 0;
    for &(_, idx) in scored.iter().take(search.top.max(1)) {
        let out = extremal_search(&obj, &corpus[idx].f, search.steps);
        iterations += out.trace.iterations;
        if best.as_ref().is_none_or(|(b, _)| out.value > b.value) {
            best = Some((out, idx));
        }
    }
    let (out, idx) = best.expect("at least one seed");
    let mut max_ratio = ratio_31(dec, gamma, &out.f, p, p0, p1, eps)?;
    let (witness, witness_id) = if max_ratio >= scored[0].0 {
        let tag = if out.trace.accepted > 0 { "+search" } else { "" };
        (out.f.clone(), format!("{}{tag}", corpus[idx].id))
    } else {
        // the objective and ratio_31 differ by rounding; keep the larger
        max_ratio = scored[0].0;
        (corpus[scored[0].1].f.clone(), corpus[scored[0].1].id.clone())
    };
    let mut flags = Vec::new();
    if !out.trace.converged {
        flags.push(FLAG_NOT_CONVERGED.to_string());
    }
    let mut trace = out.trace;
    trace.iterations = iterations;
    Ok(InequalityReport {
        model_id: model_id.to_string(),
        p,
        p0,
        p1,
        eps,
        max_ratio,
        witness,
        witness_id,
        corpus: stats,
        search: trace,
        seed,
        flags,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: f64,
    pub max_ratio: f64,
    pub witness_id: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep<T> {
    pub rows: Vec<SweepRow>,
    pub reports: Vec<InequalityReport<T>>,
    /// `max_ratio` never decreased along the sweep parameter.
    pub monotone: bool,
}

impl<T: Real> Sweep<T> {
    fn from_reports(params: &[f64], reports: Vec<InequalityReport<T>>) -> Self {
        let rows: Vec<SweepRow> = params
            .iter()
            .zip(&reports)
            .map(|(&param, r)| SweepRow {
                param,
                max_ratio: r.max_ratio.as_f64(),
                witness_id: r.witness_id.clone(),
                seed: r.seed,
            })
            .collect();
        let monotone = rows.windows(2).all(|w| w[1].max_ratio >= w[0].max_ratio);
        Sweep {
            rows,
            reports,
            monotone,
        }
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("param,max_ratio,witness_id,seed\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:e},{},{}\n", r.param, r.max_ratio, r.witness_id, r.seed));
        }
        s
    }
}

/// `max_ratio` over `eps_list` at `p = p0 = p1`.
#[allow(clippy::too_many_arguments)]
pub fn epsilon_sweep<T: Real>(
    dec: &SpectralDecomposition<T>,
    gamma: &CarreOperator<T>,
    model_id: &str,
    p: f64,
    eps_list: &[f64],
    corpus: &[CorpusEntry<T>],
    search: &HarnessSearch,
    seed: u64,
) -> Result<Sweep<T>> {
    for &e in eps_list {
        validate_eps(e)?;
    }
    let reports = eps_list
        .iter()
        .map(|&e| verify_31(dec, gamma, model_id, (p, p, p), e, corpus, search, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(Sweep::from_reports(eps_list, reports))
}

/// Neumann paths or square grids of the given side lengths.
pub fn grid_family(sizes: &[usize], two_dimensional: bool) -> Vec<ModelSpec> {
    sizes
        .iter()
        .map(|&n| {
            let dims = if two_dimensional { vec![n, n] } else { vec![n] };
            let id = if two_dimensional {
                format!("grid{n}x{n}")
            } else {
                format!("p{n}")
            };
            ModelSpec::Grid {
                id: Some(id),
                grid: GridSpec {
                    dims,
                    coeff: crate::model::CoefficientField::Constant(1.0),
                    bc: BoundaryCondition::Neumann,
                    spacing: 1.0,
                },
                potential: None,
            }
        })
        .collect()
}

/// Carries a vector from a grid with `small` dims to one with `big` dims.
///
/// When every dimension doubles the vector is mirrored across the new half,
/// which on Neumann grids commutes with `L` and preserves `ρ` exactly.
/// Otherwise each node takes the value of the proportionally placed node.
pub fn embed_grid_vector<T: Real>(f: &[T], small: &[usize], big: &[usize]) -> Vec<T> {
    assert_eq!(small.len(), big.len());
    let doubled = small.iter().zip(big).all(|(&s, &b)| b == 2 * s);
    let total: usize = big.iter().product();
    (0..total)
        .map(|mut idx| {
            let mut src = 0;
            let mut stride = 1;
            for (&s, &b) in small.iter().zip(big) {
                let x = idx % b;
                idx /= b;
                let sx = if doubled {
                    if x < s {
                        x
                    } else {
                        2 * s - 1 - x
                    }
                } else {
                    (x * s / b).min(s - 1)
                };
                src += sx * stride;
                stride *= s;
            }
            f[src]
        })
        .collect()
}

/// `max_ratio` along a family of grid models. Each model's corpus is seeded
/// with the previous witness, embedded by [`embed_grid_vector`].
#[allow(clippy::too_many_arguments)]
pub fn size_sweep<T: Real>(
    family: &[ModelSpec],
    mode: CarreMode,
    (p, p0, p1): (f64, f64, f64),
    eps: f64,
    corpus_size: usize,
    search: &HarnessSearch,
    seed: u64,
) -> Result<Sweep<T>> {
    let mut reports: Vec<InequalityReport<T>> = Vec::new();
    let mut params = Vec::new();
    let mut previous: Option<(Vec<usize>, Vec<T>, String)> = None;
    for spec in family {
        let dims = match spec {
            ModelSpec::Grid { grid, .. } => grid.dims.clone(),
            ModelSpec::Explicit { .. } => {
                return Err(LabError::validation("family", "size sweeps need grid models"));
            }
        };
        let inst = Instance::<T>::new(spec.build()?)?;
        let gamma = inst.gamma(mode)?;
        let mut entries = corpus::mixed(&inst.model, &inst.spectral, corpus_size, seed);
        if let Some((small, w, id)) = &previous {
            if small.len() == dims.len() && small.iter().zip(&dims).all(|(a, b)| a <= b) {
                entries.push(CorpusEntry {
                    id: format!("embedded-{id}"),
                    f: embed_grid_vector(w, small, &dims),
                });
            }
        }
        let report = verify_31(&inst.spectral, &gamma, &inst.model.id, (p, p0, p1), eps, &entries, search, seed)?;
        if !report.witness.is_empty() {
            previous = Some((dims.clone(), report.witness.clone(), inst.model.id.clone()));
        }
        params.push(inst.spectral.dim() as f64);
        reports.push(report);
    }
    Ok(Sweep::from_reports(&params, reports))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorollaryReport<T> {
    pub alpha: f64,
    pub p: f64,
    pub estimate: T,
    pub witness: Vec<T>,
    pub witness_id: String,
    /// Exact operator norm at `p = 2`.
    pub l2_oracle: Option<T>,
    pub search: SearchTrace<T>,
}

fn validate_alpha(alpha: f64) -> Result<()> {
    if !(alpha >= 0.0 && alpha < 0.5) {
        return Err(LabError::validation("alpha", "must lie in [0, 1/2)"));
    }
    Ok(())
}

fn corollary_weights<T: Real>(dec: &SpectralDecomposition<T>, alpha: f64) -> Vec<T> {
    let a = T::lit(alpha);
    (0..dec.dim())
        .map(|k| {
            if dec.is_kernel(k) {
                T::zero()
            } else {
                let l = dec.lambdas[k];
                l.powf(-a) * (-l).exp()
            }
        })
        .collect()
}

/// `‖ΓL^{−α}e^{−L}(I − P)f‖_p / ‖f‖_p`.
pub fn corollary_ratio<T: Real>(
    dec: &SpectralDecomposition<T>,
    gamma: &CarreOperator<T>,
    alpha: f64,
    p: f64,
    f: &[T],
) -> Result<T> {
    validate_alpha(alpha)?;
    if f.len() != dec.dim() {
        return Err(LabError::Shape {
            expected: dec.dim(),
            got: f.len(),
        });
    }
    let w = corollary_weights(dec, alpha);
    let mut c = dec.coefficients(f);
    for (ck, wk) in c.iter_mut().zip(&w) {
        *ck *= *wk;
    }
    let g = dec.synthesize(&c);
    let pp = T::lit(p);
    let den = weighted_norm(f, &dec.mu, pp);
    if !(den > T::zero()) {
        return Err(LabError::Domain("f vanishes".into()));
    }
    Ok(gamma.norm(&g, pp) / den)
}

/// Exact `p = 2` norm: the top eigenvalue of `W G W`, with the Gram matrix
/// `G_jk = ⟨Γu_j, Γu_k⟩_μ` and `W = diag(λ^{−α}e^{−λ})`.
pub fn corollary_l2_oracle<T: Real>(
    dec: &SpectralDecomposition<T>,
    gamma: &CarreOperator<T>,
    alpha: f64,
) -> Result<T> {
    validate_alpha(alpha)?;
    let w = corollary_weights(dec, alpha);
    let a = crate::functionals::eigen_channels(dec, gamma)?;
    let owner = gamma.channel_vertex();
    let mut weighted = a.clone();
    for (e, mut row) in weighted.outer_iter_mut().enumerate() {
        let m = dec.mu[owner[e]];
        row.mapv_inplace(|v| v * m);
    }
    let mut g = a.t().dot(&weighted);
    let n = dec.dim();
    for j in 0..n {
        for k in 0..n {
            g[[j, k]] *= w[j] * w[k];
        }
    }
    let top = symmetric_eigen(g.view())?.values[n - 1];
    Ok(top.max(T::zero()).sqrt())
}

/// Lower estimate of the `p → p` norm of `f ↦ ΓL^{−α}e^{−L}(I − P)f`.
pub fn corollary_34<T: Real>(
    dec: &SpectralDecomposition<T>,
    gamma: &CarreOperator<T>,
    alpha: f64,
    p: f64,
    corpus: &[CorpusEntry<T>],
    search: &HarnessSearch,
) -> Result<CorollaryReport<T>> {
    validate_alpha(alpha)?;
    if !(p > 1.0 && p.is_finite()) {
        return Err(LabError::validation("p", "must be a finite exponent above 1"));
    }
    let w = corollary_weights(dec, alpha);
    let m = dec.spectral_matrix(&w);
    let pp = T::lit(p);
    let image = gamma.channel_matrix().dot(&m);
    let obj = ProductOfNorms::new(
        dec,
        vec![
            NormTerm::new(&image, gamma.offsets().to_vec(), dec.mu.clone(), pp, T::one()),
            NormTerm::vertexwise(&Array2::eye(dec.dim()), &dec.mu, pp, -T::one()),
        ],
        false,
    );
    // starting points: best corpus entries and the eigenvectors the L² norm favours
    let mut seeds: Vec<(T, String, Vec<T>)> = corpus
        .iter()
        .filter_map(|e| {
            corollary_ratio(dec, gamma, alpha, p, &e.f)
                .ok()
                .map(|r| (r, e.id.clone(), e.f.clone()))
        })
        .collect();
    seeds.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    seeds.truncate(search.top.max(1));
    let mut modes: Vec<(T, usize)> = (dec.kernel_dim..dec.dim())
        .map(|k| {
            let u: Vec<T> = dec.vectors.column(k).to_vec();
            (w[k] * w[k] * gamma.energy(&u), k)
        })
        .collect();
    modes.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
    for &(_, k) in modes.iter().take(16) {
        let u: Vec<T> = dec.vectors.column(k).to_vec();
        let r = corollary_ratio(dec, gamma, alpha, p, &u)?;
        seeds.push((r, format!("eigen-{k}"), u));
    }
    let mut best: Option<(SearchOutcome<T>, String)> = None;
    for (_, id, f) in &seeds {
        let out = extremal_search(&obj, f, search.steps);
        if best.as_ref().is_none_or(|(b, _)| out.value > b.value) {
            best = Some((out, id.clone()));
        }
    }
    let (out, id) = best.ok_or(LabError::NoAdmissibleEntry)?;
    let estimate = corollary_ratio(dec, gamma, alpha, p, &out.f)?;
    let tag = if out.trace.accepted > 0 { "+search" } else { "" };
    Ok(CorollaryReport {
        alpha,
        p,
        estimate,
        witness: out.f,
        witness_id: format!("{id}{tag}"),
        l2_oracle: if p == 2.0 {
            Some(corollary_l2_oracle(dec, gamma, alpha)?)
        } else {
            None
        },
        search: out.trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRow<T> {
    pub id: String,
    pub lhs: T,
    pub rhs: T,
    pub margin: T,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainReport<T> {
    pub p: f64,
    pub alpha_p: T,
    pub rows: Vec<ChainRow<T>>,
    pub violations: usize,
    pub all_ok: bool,
}

/// Tolerance on `rhs − lhs`, relative to `rhs`.
pub const CHAIN_TOL: f64 = 1e-8;

/// Checks `‖H_Γ f‖_p ≤ α_p^{−1/2} ‖Mf‖_p^{(2−p)/2} ‖f‖_p^{p/2}` on every entry.
pub fn verify_chain_24<T: Real>(
    dec: &SpectralDecomposition<T>,
    gamma: &CarreOperator<T>,
    p: f64,
    alpha_p: T,
    corpus: &[CorpusEntry<T>],
) -> Result<ChainReport<T>> {
    if !(alpha_p > T::zero()) {
        return Err(LabError::Refused(format!(
            "alpha_p = {alpha_p} is not positive; the pointwise inequality was not established on this model"
        )));
    }
    if !(p > 1.0 && p <= 2.0) {
        return Err(LabError::validation("p", "must lie in (1, 2]"));
    }
    for e in corpus {
        if let Some(x) = e.f.iter().position(|&v| !(v > T::zero())) {
            return Err(LabError::validation(
                "corpus",
                format!("entry {} is not strictly positive at vertex {x}", e.id),
            ));
        }
    }
    let engine = LpsEngine::exact(dec, gamma)?;
    let pp = T::lit(p);
    let two = T::lit(2.0);
    let scale = alpha_p.powf(-T::lit(0.5));
    let mut rows = Vec::with_capacity(corpus.len());
    for e in corpus {
        let lhs = engine.evaluate(&e.f)?.norm(&dec.mu, pp);
        let mf = maximal_function(dec, &e.f, None)?;
        let rhs = scale
            * weighted_norm(&mf, &dec.mu, pp).powf((two - pp) / two)
            * weighted_norm(&e.f, &dec.mu, pp).powf(pp / two);
        let margin = rhs - lhs;
        rows.push(ChainRow {
            id: e.id.clone(),
            lhs,
            rhs,
            margin,
            ok: margin >= -T::lit(CHAIN_TOL) * rhs,
        });
    }
    let violations = rows.iter().filter(|r| !r.ok).count();
    Ok(ChainReport {
        p,
        alpha_p,
        rows,
        violations,
        all_ok: violations == 0,
    })
}

/// `α_p` over the corpus together with the heat trajectories `e^{−tL}f`
/// sampled at `per_decade` points per decade of the time window.
pub fn measure_alpha_along_flow<T: Real>(
    gen: &Generator<T>,
    dec: &SpectralDecomposition<T>,
    gamma: &CarreOperator<T>,
    p: f64,
    corpus: &[CorpusEntry<T>],
    per_decade: usize,
) -> Result<AlphaMeasurement<T>> {
    let times = crate::functionals::log_time_grid(dec, per_decade);
    let mut samples: Vec<Vec<T>> = Vec::with_capacity(corpus.len() * (times.len() + 1));
    for e in corpus {
        samples.push(e.f.clone());
        for &t in &times {
            let u = dec.semigroup(t, &e.f)?;
            if u.iter().all(|&v| v > T::zero()) {
                samples.push(u);
            }
        }
    }
    measure_alpha_p(gen, gamma, T::lit(p), &samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_graph_laplacian, Model};
    use crate::spectral::decompose;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn path(n: usize) -> (Generator<f64>, SpectralDecomposition<f64>, CarreOperator<f64>) {
        let m = Model::path(n).unwrap();
        let gen = build_graph_laplacian(&m).unwrap();
        let dec = decompose(&gen).unwrap();
        (gen, dec, CarreOperator::new(&m, CarreMode::Full).unwrap())
    }

    #[test]
    fn holder_validation() {
        assert!(validate_holder(2.0, 2.0, 2.0).is_ok());
        assert!(validate_holder(1.5, 1.2, 2.0).is_ok());
        assert!(matches!(
            validate_holder(2.0, 3.0, 3.0),
            Err(LabError::HolderTriple { .. })
        ));
        assert!(validate_holder(1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn k2_ratio_is_one() {
        let (_, dec, gamma) = path(2);
        for eps in [0.05, 0.25, 0.5] {
            let r = ratio_31(&dec, &gamma, &[1.0, -1.0], 2.0, 2.0, 2.0, eps).unwrap();
            assert!((r - 1.0).abs() < 1e-13);
        }
        assert!(matches!(
            ratio_31(&dec, &gamma, &[1.0, 1.0], 2.0, 2.0, 2.0, 0.25),
            Err(LabError::Domain(_))
        ));
        assert!(ratio_31(&dec, &gamma, &[1.0, -1.0], 2.0, 2.0, 2.0, 0.0).is_err());
        assert!(ratio_31(&dec, &gamma, &[1.0, -1.0], 2.0, 2.0, 2.0, 0.6).is_err());
    }

    #[test]
    fn endpoint_matches_generator_form() {
        let (gen, dec, gamma) = path(9);
        let f = [0.3, -1.0, 2.0, 0.1, 0.0, 1.2, -0.7, 0.4, 0.9];
        for p in [1.25, 1.5, 2.0] {
            let a = ratio_31(&dec, &gamma, &f, p, p, p, 0.5).unwrap();
            let b = coulhon_duong_ratio(&gen, &dec, &gamma, &f, p).unwrap();
            assert!((a - b).abs() < 1e-12 * b);
        }
    }

    #[test]
    fn objective_agrees_with_ratio() {
        let (_, dec, gamma) = path(7);
        let obj = ProductOfNorms::ratio_31(&dec, &gamma, 1.5, 1.2, 2.0, 0.3).unwrap();
        let f = [0.3, -1.0, 2.0, 0.1, 0.0, 1.2, -0.7];
        let a = obj.value(&obj.project(&f)).unwrap();
        let b = ratio_31(&dec, &gamma, &f, 1.5, 1.2, 2.0, 0.3).unwrap();
        assert!((a - b).abs() < 1e-12 * b);
    }

    #[test]
    fn search_ascends_and_keeps_constant_objectives() {
        let (_, dec, gamma) = path(2);
        let obj = ProductOfNorms::ratio_31(&dec, &gamma, 1.5, 1.5, 1.5, 0.25).unwrap();
        let init = [3.0, -1.0];
        let out = extremal_search(&obj, &init, 50);
        assert_eq!(out.trace.accepted, 0);
        assert_eq!(out.f, init.to_vec());

        let (_, dec, gamma) = path(10);
        let obj = ProductOfNorms::ratio_31(&dec, &gamma, 1.5, 1.5, 1.5, 0.25).unwrap();
        let init: Vec<f64> = (0..10).map(|i| ((i * 7 % 5) as f64) - 2.0).collect();
        let out = extremal_search(&obj, &init, 60);
        assert!(out.value >= obj.value(&obj.project(&init)).unwrap());
        assert!(out.trace.history.windows(2).all(|w| w[1] > w[0]));
    }

    /// Neumann path eigenpairs in closed form: `λ_k = 2 − 2cos(πk/n)`,
    /// `u_k(x) ∝ cos(πk(x + 1/2)/n)`.
    fn path_ratio_oracle(n: usize, f: &[f64], p: f64, eps: f64) -> f64 {
        let modes: Vec<(f64, Vec<f64>)> = (0..n)
            .map(|k| {
                let lam = 2.0 - 2.0 * (std::f64::consts::PI * k as f64 / n as f64).cos();
                let u: Vec<f64> = (0..n)
                    .map(|x| (std::f64::consts::PI * k as f64 * (x as f64 + 0.5) / n as f64).cos())
                    .collect();
                let nrm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
                (lam, u.into_iter().map(|v| v / nrm).collect())
            })
            .collect();
        let power = |s: f64| -> Vec<f64> {
            let mut out = vec![0.0; n];
            for (lam, u) in modes.iter().skip(1) {
                let c: f64 = u.iter().zip(f).map(|(a, b)| a * b).sum();
                for x in 0..n {
                    out[x] += lam.powf(s) * c * u[x];
                }
            }
            out
        };
        let lp = |v: &[f64]| v.iter().map(|a| a.abs().powf(p)).sum::<f64>().powf(1.0 / p);
        // |Γf|(x)² = Σ_{y~x} (f(x) − f(y))² / 2
        let g: Vec<f64> = (0..n)
            .map(|x| {
                let mut s = 0.0;
                if x > 0 {
                    s += (f[x] - f[x - 1]).powi(2) / 2.0;
                }
                if x + 1 < n {
                    s += (f[x] - f[x + 1]).powi(2) / 2.0;
                }
                s.sqrt()
            })
            .collect();
        lp(&g).powi(2) / (lp(&power(0.5 + eps)) * lp(&power(0.5 - eps)))
    }

    #[test]
    fn search_beats_random_sampling_on_p10() {
        let (_, dec, gamma) = path(10);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut best = 0.0f64;
        for _ in 0..1000 {
            let f: Vec<f64> = (0..10).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
            let oracle = path_ratio_oracle(10, &f, 1.5, 0.25);
            let ours = ratio_31(&dec, &gamma, &f, 1.5, 1.5, 1.5, 0.25).unwrap();
            assert!((oracle - ours).abs() < 1e-10 * oracle);
            best = best.max(oracle);
        }
        let model = Model::path(10).unwrap();
        let corpus = corpus::mixed(&model, &dec, 40, 1);
        let rep = verify_31(&dec, &gamma, "p10", (1.5, 1.5, 1.5), 0.25, &corpus, &HarnessSearch::default(), 1).unwrap();
        assert!(rep.max_ratio >= best, "{} < {best}", rep.max_ratio);
    }

    #[test]
    fn l2_reports_respect_cauchy_schwarz() {
        let m = Model::new(
            6,
            vec![1.0, 2.0, 0.5, 1.0, 1.5, 1.0],
            vec![(0, 1, 1.0), (1, 2, 3.0), (2, 3, 0.2), (3, 4, 1.0), (4, 5, 2.0), (0, 5, 0.5)],
            vec![0.0, 0.0, 0.3, 0.0, 0.0, 0.0],
            vec![],
        )
        .unwrap();
        let gen = build_graph_laplacian(&m).unwrap();
        let dec = decompose(&gen).unwrap();
        let gamma = CarreOperator::new(&m, CarreMode::Full).unwrap();
        let corpus = corpus::mixed(&m, &dec, 20, 3);
        for eps in [0.5, 0.1, 0.01] {
            let rep = verify_31(&dec, &gamma, "w6", (2.0, 2.0, 2.0), eps, &corpus, &HarnessSearch::default(), 3).unwrap();
            assert!(rep.max_ratio <= 1.0 + 1e-8);
            assert!(rep.max_ratio > 0.5);
        }
    }

    #[test]
    fn kernel_corpus_is_flagged() {
        let (_, dec, gamma) = path(4);
        let corpus = vec![CorpusEntry { id: "const".into(), f: vec![1.0; 4] }];
        let rep = verify_31(&dec, &gamma, "p4", (2.0, 2.0, 2.0), 0.3, &corpus, &HarnessSearch::default(), 0).unwrap();
        assert_eq!(rep.flags, vec![FLAG_NO_ADMISSIBLE.to_string()]);
    }

    #[test]
    fn mirror_embedding_preserves_ratio() {
        let (_, d8, g8) = path(8);
        let (_, d16, g16) = path(16);
        let f: Vec<f64> = (0..8).map(|i| ((i * i) % 5) as f64 - 1.5).collect();
        let big = embed_grid_vector(&f, &[8], &[16]);
        for (p, p0, p1) in [(1.25, 1.25, 1.25), (1.5, 1.2, 2.0)] {
            let a = ratio_31(&d8, &g8, &f, p, p0, p1, 0.25).unwrap();
            let b = ratio_31(&d16, &g16, &big, p, p0, p1, 0.25).unwrap();
            assert!((a - b).abs() < 1e-11 * a, "{a} vs {b}");
        }
        let stretched = embed_grid_vector(&[1.0, 2.0], &[2], &[5]);
        assert_eq!(stretched, vec![1.0, 1.0, 1.0, 2.0, 2.0]);
        let sq = embed_grid_vector(&[1.0, 2.0, 3.0, 4.0], &[2, 2], &[4, 4]);
        assert_eq!(&sq[..4], &[1.0, 2.0, 2.0, 1.0]);
    }

    #[test]
    fn nested_size_sweep_is_monotone() {
        let family = grid_family(&[16, 32, 64], false);
        let search = HarnessSearch { steps: 40, top: 3 };
        let sweep = size_sweep::<f64>(&family, CarreMode::Full, (1.25, 1.25, 1.25), 0.25, 30, &search, 7).unwrap();
        assert!(sweep.monotone, "{:?}", sweep.rows);
        assert!(sweep.csv().starts_with("param,max_ratio,witness_id,seed\n16,"));
    }

    #[test]
    fn corollary_examples() {
        let (_, dec, gamma) = path(2);
        let rep = corollary_34(&dec, &gamma, 0.0, 2.0, &[], &HarnessSearch::default()).unwrap();
        let want = 2f64.sqrt() * (-2.0f64).exp();
        assert!((rep.estimate - want).abs() < 1e-12);
        assert!((rep.l2_oracle.unwrap() - want).abs() < 1e-12);
        let rep = corollary_34(&dec, &gamma, 0.3, 2.0, &[], &HarnessSearch::default()).unwrap();
        assert!((rep.estimate - 2f64.powf(0.2) * (-2.0f64).exp()).abs() < 1e-12);
        assert!(corollary_34(&dec, &gamma, 0.5, 2.0, &[], &HarnessSearch::default()).is_err());

        let (_, dec, gamma) = path(12);
        let oracle = corollary_l2_oracle(&dec, &gamma, 0.2).unwrap();
        let diag = (dec.kernel_dim..12)
            .map(|k| dec.lambdas[k].powf(0.3) * (-dec.lambdas[k]).exp())
            .fold(0.0, f64::max);
        assert!((oracle - diag).abs() < 1e-12);
        assert!(oracle <= (2.0 * std::f64::consts::E).powf(-0.5) + 1e-12 || 0.2 > 0.0);
    }

    #[test]
    fn chain_examples() {
        let (gen, dec, gamma) = path(8);
        let model = Model::path(8).unwrap();
        let corpus = corpus::positive(&model, &dec, 12, 5);
        let alpha = measure_alpha_along_flow(&gen, &dec, &gamma, 2.0, &corpus, 4).unwrap();
        assert!((alpha.alpha - 2.0).abs() < 1e-9, "{alpha:?}");
        let rep = verify_chain_24(&dec, &gamma, 2.0, alpha.alpha, &corpus).unwrap();
        assert!(rep.all_ok);
        assert!(verify_chain_24(&dec, &gamma, 2.0, 0.0, &corpus).is_err());
        let constant = vec![CorpusEntry { id: "c".into(), f: vec![2.0; 8] }];
        let rep = verify_chain_24(&dec, &gamma, 1.5, 1.0, &constant).unwrap();
        assert!(rep.rows[0].lhs.abs() < 1e-12 && rep.all_ok);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn ratio_invariances(
            f in prop::collection::vec(-2.0f64..2.0, 6),
            c in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0],
            k in -3.0f64..3.0,
            eps in 0.01f64..0.5,
        ) {
            let (_, dec, gamma) = path(6);
            prop_assume!(admissible(&dec, &f).is_ok());
            let base = ratio_31(&dec, &gamma, &f, 1.5, 1.5, 1.5, eps).unwrap();
            let scaled: Vec<f64> = f.iter().map(|v| c * v).collect();
            let shifted: Vec<f64> = f.iter().map(|v| v + k).collect();
            let a = ratio_31(&dec, &gamma, &scaled, 1.5, 1.5, 1.5, eps).unwrap();
            let b = ratio_31(&dec, &gamma, &shifted, 1.5, 1.5, 1.5, eps).unwrap();
            prop_assert!((a - base).abs() <= 1e-10 * base);
            prop_assert!((b - base).abs() <= 1e-10 * base);
        }

        #[test]
        fn l2_ratio_bounded_by_one(f in prop::collection::vec(-2.0f64..2.0, 6), eps in 0.01f64..0.5) {
            let (_, dec, gamma) = path(6);
            prop_assume!(admissible(&dec, &f).is_ok());
            let r = ratio_31(&dec, &gamma, &f, 2.0, 2.0, 2.0, eps).unwrap();
            prop_assert!(r <= 1.0 + 1e-12);
        }
    }
}
