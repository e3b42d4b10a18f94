//! Command dispatch. Every command produces a JSON report; sweeps add a CSV
//! table and commands with extremal searches add witness files.

use std::path::Path;

use lps_lab::corpus::{self, CorpusEntry};
use lps_lab::functionals::{self, LpsResult};
use lps_lab::gallery::Instance;
use lps_lab::harness::{self, InequalityReport, DEFAULT_EPS_GRID, DEFAULT_SIZES};
use lps_lab::linalg::weighted_norm;
use lps_lab::model::{self, CarreMode, ModelSpec};
use lps_lab::quadrature::QuadratureRule;
use lps_lab::rbound::{self, OperatorFamily, SearchSpec};
use lps_lab::scalar::{cast_vec, to_f64_vec};
use lps_lab::Real;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{CommandName, ExperimentConfig, Functional, Precision};
use crate::CliError;

/// Relative agreement required when a witness is re-evaluated.
pub const REVERIFY_TOL: f64 = 1e-9;
/// Slack on the `p = 2` Cauchy-Schwarz bound.
pub const L2_BOUND_TOL: f64 = 1e-8;
/// Agreement between the `p = 2` search for `ΓL^{−α}e^{−L}` and its oracle.
pub const ORACLE_TOL: f64 = 1e-6;

const DEFAULT_CORPUS: usize = 100;

/// Files to write and whether a verification failed.
#[derive(Debug, Default)]
pub struct Outcome {
    pub files: Vec<(String, Vec<u8>)>,
    pub summary: Vec<String>,
    pub failed: bool,
}

impl Outcome {
    fn json<S: Serialize>(&mut self, name: String, value: &S) {
        self.files.push((name, crate::output::to_json(value)));
    }
}

/// A recorded extremal function with enough context to recompute its value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Witness {
    pub kind: WitnessKind,
    pub model: ModelSpec,
    pub gamma: CarreMode,
    pub precision: Precision,
    pub p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub id: String,
    pub value: f64,
    pub f: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WitnessKind {
    Ratio,
    Corollary,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum WitnessFile {
    One(Box<Witness>),
    Many(Vec<Witness>),
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    base: &'a Path,
    command: CommandName,
    seed: u64,
}

impl Ctx<'_> {
    fn spec(&self) -> Result<ModelSpec, CliError> {
        self.cfg.model_spec(self.base)
    }

    fn instance<T: Real>(&self, spec: &ModelSpec) -> Result<Instance<T>, CliError> {
        Ok(Instance::new(spec.build()?)?)
    }

    fn corpus_size(&self) -> usize {
        self.cfg.corpus_size.unwrap_or(DEFAULT_CORPUS)
    }

    fn name(&self, suffix: &str) -> String {
        format!("{}{suffix}", self.command)
    }

    /// `(p, p0, p1)`, completing a missing exponent from the Hölder relation.
    fn triple(&self, default_p: f64) -> Result<(f64, f64, f64), CliError> {
        let p = self.cfg.p.unwrap_or(default_p);
        let (p0, p1) = match (self.cfg.p0, self.cfg.p1) {
            (None, None) => (p, p),
            (Some(a), Some(b)) => (a, b),
            (Some(a), None) => (a, 1.0 / (2.0 / p - 1.0 / a)),
            (None, Some(b)) => (1.0 / (2.0 / p - 1.0 / b), b),
        };
        harness::validate_holder(p, p0, p1)?;
        Ok((p, p0, p1))
    }

    fn header(&self, model_id: Option<&str>) -> Value {
        json!({
            "command": self.command.as_str(),
            "model_id": model_id,
            "seed": self.seed,
            "precision": self.cfg.precision,
            "gamma": self.cfg.gamma,
        })
    }
}

fn with_header(mut header: Value, body: Value) -> Value {
    if let (Some(h), Value::Object(b)) = (header.as_object_mut(), body) {
        h.extend(b);
    }
    header
}

/// Runs `command` as configured.
pub fn run(
    cfg: &ExperimentConfig,
    base: &Path,
    command: CommandName,
    seed: Option<u64>,
) -> Result<Outcome, CliError> {
    cfg.validate()?;
    let seed = match seed.or(cfg.seed) {
        Some(s) => s,
        None if command.stochastic() => {
            return Err(CliError::usage(format!(
                "invalid seed: required for {command} (set it in the config or pass --seed)"
            )))
        }
        None => 0,
    };
    let ctx = Ctx {
        cfg,
        base,
        command,
        seed,
    };
    match cfg.precision {
        Precision::F64 => dispatch::<f64>(&ctx),
        Precision::F32 => dispatch::<f32>(&ctx),
    }
}

fn dispatch<T: Real>(ctx: &Ctx) -> Result<Outcome, CliError> {
    match ctx.command {
        CommandName::Validate => validate::<T>(ctx),
        CommandName::Spectrum => spectrum::<T>(ctx),
        CommandName::Lps => lps::<T>(ctx),
        CommandName::Rbound => rbound_cmd::<T>(ctx),
        CommandName::Verify31 => verify_31::<T>(ctx),
        CommandName::SweepEps => sweep_eps::<T>(ctx),
        CommandName::SweepSize => sweep_size::<T>(ctx),
        CommandName::Chain24 => chain_24::<T>(ctx),
        CommandName::Corollary34 => corollary_34::<T>(ctx),
        CommandName::GradientBound => gradient_bound::<T>(ctx),
    }
}

fn to_value<S: Serialize>(s: &S) -> Value {
    serde_json::to_value(s).expect("reports serialize")
}

fn validate<T: Real>(ctx: &Ctx) -> Result<Outcome, CliError> {
    let spec = ctx.spec()?;
    let inst = ctx.instance::<T>(&spec)?;
    let gamma = inst.gamma(ctx.cfg.gamma)?;
    let dec = &inst.spectral;
    let submarkov = model::verify_submarkov(&inst.generator);

    // ‖Γf‖₂² against ‖L^{1/2}f‖₂², only an identity in full mode
    let identity = if ctx.cfg.gamma == CarreMode::Full {
        let mut worst = 0.0f64;
        for e in corpus::gaussian_vertices::<T>(dec.dim(), 100, ctx.seed) {
            let half = dec.fractional_power(T::lit(0.5), &e.f)?;
            let rhs = weighted_norm(&half, &dec.mu, T::lit(2.0)).as_f64().powi(2);
            let lhs = gamma.energy(&e.f).as_f64();
            if rhs > 0.0 {
                worst = worst.max((lhs - rhs).abs() / rhs);
            }
        }
        Some(worst)
    } else {
        None
    };
    let identity_tol = 1e-10f64.max(1e3 * T::epsilon().as_f64());

    let conservative = inst.model.is_conservative();
    let positives = corpus::positive(&inst.model, dec, 20, ctx.seed);
    let round = 1e-12f64.max(1e2 * T::epsilon().as_f64());
    let mut bis = Vec::new();
    let mut bis_ok = true;
    for p in [1.25, 1.5, 2.0] {
        let mut worst = if conservative { 0.0f64 } else { f64::INFINITY };
        for e in &positives {
            let v = model::check_2_2bis(&inst.generator, &e.f, T::lit(p))?.as_f64();
            let scale: f64 = e
                .f
                .iter()
                .zip(&dec.mu)
                .map(|(&x, &m)| (m * x.powf(T::lit(p))).as_f64())
                .sum::<f64>()
                .max(1.0);
            let rel = v / scale;
            if conservative {
                worst = worst.max(rel.abs());
                bis_ok &= rel.abs() <= round;
            } else {
                worst = worst.min(rel);
                bis_ok &= rel >= -round;
            }
        }
        bis.push(json!({"p": p, "worst_relative": worst}));
    }
    let symbol = ctx.cfg.symbol().map(|s| s.check());
    let symbol_ok = symbol.as_ref().is_none_or(|c| c.decay_ok && c.zero_ok);
    let identity_ok = identity.is_none_or(|w| w <= identity_tol);
    let passes = submarkov.passes && identity_ok && bis_ok && symbol_ok;

    let report = with_header(
        ctx.header(Some(&inst.model.id)),
        json!({
            "n": dec.dim(),
            "kind": inst.generator.kind,
            "kernel_dim": dec.kernel_dim,
            "conservative": conservative,
            "submarkov": submarkov,
            "energy_identity_worst_relative": identity,
            "energy_identity_tolerance": identity_tol,
            "mass_balance": bis,
            "mass_balance_ok": bis_ok,
            "mass_balance_tolerance": round,
            "symbol_check": symbol,
            "passes": passes,
        }),
    );
    let mut out = Outcome::default();
    out.json(ctx.name(".json"), &report);
    out.summary.push(format!(
        "{}: {}",
        inst.model.id,
        if passes { "all checks pass" } else { "check failed" }
    ));
    out.failed = !passes;
    Ok(out)
}

fn spectrum<T: Real>(ctx: &Ctx) -> Result<Outcome, CliError> {
    let spec = ctx.spec()?;
    let inst = ctx.instance::<T>(&spec)?;
    let dec = &inst.spectral;
    let report = with_header(
        ctx.header(Some(&inst.model.id)),
        json!({
            "n": dec.dim(),
            "kind": inst.generator.kind,
            "kernel_dim": dec.kernel_dim,
            "lambda_max": dec.lambda_max().as_f64(),
            "lambda_min_positive": dec.lambda_min_positive().map(|v| v.as_f64()),
            "time_window": dec.time_window().map(|(a, b)| [a.as_f64(), b.as_f64()]),
            "lambdas": to_f64_vec(&dec.lambdas),
        }),
    );
    let mut csv = String::from("k,lambda\n");
    for (k, l) in dec.lambdas.iter().enumerate() {
        csv.push_str(&format!("{k},{:e}\n", l.as_f64()));
    }
    let mut out = Outcome::default();
    out.json(ctx.name(".json"), &report);
    out.files.push((ctx.name(".csv"), csv.into_bytes()));
    out.summary.push(format!(
        "{}: n = {}, kernel dimension {}, λ_max = {:e}",
        inst.model.id,
        dec.dim(),
        dec.kernel_dim,
        dec.lambda_max().as_f64()
    ));
    Ok(out)
}

fn lps<T: Real>(ctx: &Ctx) -> Result<Outcome, CliError> {
    let spec = ctx.spec()?;
    let inst = ctx.instance::<T>(&spec)?;
    let gamma = inst.gamma(ctx.cfg.gamma)?;
    let dec = &inst.spectral;
    let (f, f_id) = match &ctx.cfg.f {
        Some(f) => {
            if f.len() != dec.dim() {
                return Err(CliError::usage(format!(
                    "invalid f: expected {} values, got {}",
                    dec.dim(),
                    f.len()
                )));
            }
            (cast_vec::<T>(f), "config".to_string())
        }
        None => {
            let e = corpus::mixed(&inst.model, dec, 1, ctx.seed).remove(0);
            (e.f, e.id)
        }
    };
    let symbol = ctx.cfg.symbol();
    let result: LpsResult<T> = match ctx.cfg.functional {
        Functional::HGamma => match &symbol {
            None => functionals::h_gamma_exact(dec, &gamma, &f)?,
            Some(s) => functionals::h_gamma_f(dec, &gamma, s, &f, &ctx.cfg.quadrature)?,
        },
        Functional::Maximal => {
            let values = functionals::maximal_function(dec, &f, None)?;
            LpsResult::new(values, &dec.mu, 0.0, QuadratureRule::ClosedForm)
        }
        Functional::MeyerS => functionals::meyer_s(dec, &gamma, &f, &ctx.cfg.quadrature)?,
    };
    let report = with_header(
        ctx.header(Some(&inst.model.id)),
        json!({
            "functional": ctx.cfg.functional,
            "symbol": symbol.as_ref().map(|s| s.to_string()),
            "input_id": f_id,
            "input": to_f64_vec(&f),
            "result": to_value(&result),
        }),
    );
    let mut out = Outcome::default();
    out.json(ctx.name(".json"), &report);
    out.files.push((ctx.name(".csv"), result.values_csv().into_bytes()));
    if result.quadrature_warning {
        out.summary.push(format!(
            "warning: quadrature error estimate {:e}",
            result.quadrature_error_estimate
        ));
    }
    out.summary.push(format!(
        "{}: ‖·‖_2 = {:e}",
        inst.model.id,
        result.norm(&dec.mu, T::lit(2.0)).as_f64()
    ));
    Ok(out)
}

fn rbound_cmd<T: Real>(ctx: &Ctx) -> Result<Outcome, CliError> {
    let spec = ctx.spec()?;
    let inst = ctx.instance::<T>(&spec)?;
    let gamma = inst.gamma(ctx.cfg.gamma)?;
    let dec = &inst.spectral;
    let rc = &ctx.cfg.rbound;
    let p = ctx.cfg.p.unwrap_or(2.0);
    let search = SearchSpec {
        restarts: rc.restarts,
        steps: rc.steps,
        seed: ctx.seed,
        eigen_seeds: rc.eigen_seeds,
    };
    let family = OperatorFamily::new(rc.family.clone(), dec, &gamma)?;
    let estimate = rbound::estimate_rbound(&family, T::lit(p), rc.m, &search)?;
    let oracle = if p == 2.0 {
        Some(rbound::l2_family_norm(&family)?.as_f64())
    } else {
        None
    };
    let comparison = match rc.compare_delta {
        Some(delta) => Some(to_value(&rbound::compare_families(
            dec,
            &gamma,
            T::lit(p),
            delta,
            rc.m,
            &search,
        )?)),
        None => None,
    };
    let report = with_header(
        ctx.header(Some(&inst.model.id)),
        json!({
            "estimate": to_value(&estimate),
            "l2_operator_norm": oracle,
            "comparison": comparison,
        }),
    );
    let mut out = Outcome::default();
    out.json(ctx.name(".json"), &report);
    out.summary.push(format!(
        "{}: R-bound lower estimate {:e} (m = {}, p = {p})",
        inst.model.id,
        estimate.value.as_f64(),
        rc.m
    ));
    if estimate.trending {
        out.summary.push("note: estimate still rising across restarts".into());
    }
    Ok(out)
}

fn ratio_witness<T: Real>(
    ctx: &Ctx,
    spec: &ModelSpec,
    gamma: CarreMode,
    r: &InequalityReport<T>,
) -> Option<Witness> {
    if r.witness.is_empty() {
        return None;
    }
    Some(Witness {
        kind: WitnessKind::Ratio,
        model: spec.clone(),
        gamma,
        precision: ctx.cfg.precision,
        p: r.p,
        p0: Some(r.p0),
        p1: Some(r.p1),
        eps: Some(r.eps),
        alpha: None,
        id: format!("{}/{}", r.model_id, r.witness_id),
        value: r.max_ratio.as_f64(),
        f: to_f64_vec(&r.witness),
    })
}

/// `p = p0 = p1 = 2` in full mode has the sharp bound 1.
fn l2_violation<T: Real>(gamma: CarreMode, r: &InequalityReport<T>) -> bool {
    gamma == CarreMode::Full
        && r.p == 2.0
        && r.p0 == 2.0
        && r.p1 == 2.0
        && r.max_ratio.as_f64() > 1.0 + L2_BOUND_TOL
}

fn ratio_summary<T: Real>(r: &InequalityReport<T>) -> String {
    let mut s = format!(
        "{}: p = {}, p0 = {}, p1 = {}, eps = {}: max ratio {:e} ({})",
        r.model_id,
        r.p,
        r.p0,
        r.p1,
        r.eps,
        r.max_ratio.as_f64(),
        r.witness_id
    );
    for flag in &r.flags {
        s.push_str(&format!(" [{flag}]"));
    }
    s
}

fn verify_31<T: Real>(ctx: &Ctx) -> Result<Outcome, CliError> {
    let triple = ctx.triple(2.0)?;
    let spec = ctx.spec()?;
    let inst = ctx.instance::<T>(&spec)?;
    let gamma = inst.gamma(ctx.cfg.gamma)?;
    let eps = ctx.cfg.eps.unwrap_or(0.25);
    let corpus = corpus::mixed(&inst.model, &inst.spectral, ctx.corpus_size(), ctx.seed);
    let report = harness::verify_31(
        &inst.spectral,
        &gamma,
        &inst.model.id,
        triple,
        eps,
        &corpus,
        &ctx.cfg.search,
        ctx.seed,
    )?;
    let mut out = Outcome::default();
    out.summary.push(ratio_summary(&report));
    if l2_violation(ctx.cfg.gamma, &report) {
        out.failed = true;
        out.summary.push("FAILED: ratio exceeds the L² bound 1".into());
    }
    out.json(
        ctx.name(".json"),
        &with_header(ctx.header(Some(&inst.model.id)), to_value(&report)),
    );
    if let Some(w) = ratio_witness(ctx, &spec, ctx.cfg.gamma, &report) {
        out.json(ctx.name(".witness.json"), &w);
    }
    Ok(out)
}

fn sweep_outputs<T: Real>(
    ctx: &Ctx,
    model_id: Option<&str>,
    sweep: &harness::Sweep<T>,
    witnesses: Vec<Witness>,
) -> Outcome {
    let mut out = Outcome::default();
    for r in &sweep.reports {
        out.summary.push(ratio_summary(r));
        if l2_violation(ctx.cfg.gamma, r) {
            out.failed = true;
            out.summary.push("FAILED: ratio exceeds the L² bound 1".into());
        }
    }
    out.json(
        ctx.name(".json"),
        &with_header(ctx.header(model_id), to_value(sweep)),
    );
    out.files.push((ctx.name(".csv"), sweep.csv().into_bytes()));
    out.json(ctx.name(".witness.json"), &witnesses);
    out
}

fn sweep_eps<T: Real>(ctx: &Ctx) -> Result<Outcome, CliError> {
    let p = ctx.cfg.p.unwrap_or(1.5);
    if ctx.cfg.p0.is_some() || ctx.cfg.p1.is_some() {
        return Err(CliError::usage("invalid p0: sweep-eps runs at p0 = p1 = p"));
    }
    let spec = ctx.spec()?;
    let inst = ctx.instance::<T>(&spec)?;
    let gamma = inst.gamma(ctx.cfg.gamma)?;
    let eps_list = ctx.cfg.eps_list.clone().unwrap_or(DEFAULT_EPS_GRID.to_vec());
    let corpus = corpus::mixed(&inst.model, &inst.spectral, ctx.corpus_size(), ctx.seed);
    let sweep = harness::epsilon_sweep(
        &inst.spectral,
        &gamma,
        &inst.model.id,
        p,
        &eps_list,
        &corpus,
        &ctx.cfg.search,
        ctx.seed,
    )?;
    let witnesses = sweep
        .reports
        .iter()
        .filter_map(|r| ratio_witness(ctx, &spec, ctx.cfg.gamma, r))
        .collect();
    Ok(sweep_outputs(ctx, Some(&inst.model.id), &sweep, witnesses))
}

fn sweep_size<T: Real>(ctx: &Ctx) -> Result<Outcome, CliError> {
    let triple = ctx.triple(1.25)?;
    let two_d = ctx.cfg.grid_dims == Some(2);
    let sizes = match &ctx.cfg.sizes {
        Some(s) => s.clone(),
        None if two_d => vec![4, 8, 16, 32],
        None => DEFAULT_SIZES.to_vec(),
    };
    for (i, &n) in sizes.iter().enumerate() {
        if two_d && n * n > 4096 {
            return Err(CliError::usage(format!(
                "invalid sizes[{i}]: a {n}×{n} grid exceeds 4096 vertices"
            )));
        }
    }
    let family = harness::grid_family(&sizes, two_d);
    let eps = ctx.cfg.eps.unwrap_or(0.25);
    let sweep = harness::size_sweep::<T>(
        &family,
        ctx.cfg.gamma,
        triple,
        eps,
        ctx.corpus_size(),
        &ctx.cfg.search,
        ctx.seed,
    )?;
    let witnesses = sweep
        .reports
        .iter()
        .zip(&family)
        .filter_map(|(r, spec)| ratio_witness(ctx, spec, ctx.cfg.gamma, r))
        .collect();
    let mut out = sweep_outputs(ctx, None, &sweep, witnesses);
    if !sweep.monotone {
        out.summary
            .push("note: max ratio decreased along the size sweep".into());
    }
    Ok(out)
}

fn chain_24<T: Real>(ctx: &Ctx) -> Result<Outcome, CliError> {
    let spec = ctx.spec()?;
    let inst = ctx.instance::<T>(&spec)?;
    let gamma = inst.gamma(ctx.cfg.gamma)?;
    let dec = &inst.spectral;
    let p_list = ctx.cfg.p_list.clone().unwrap_or(vec![1.25, 1.5, 2.0]);
    let corpus: Vec<CorpusEntry<T>> = corpus::positive(&inst.model, dec, ctx.corpus_size(), ctx.seed);
    let mut runs = Vec::new();
    let mut out = Outcome::default();
    for &p in &p_list {
        let alpha = harness::measure_alpha_along_flow(&inst.generator, dec, &gamma, p, &corpus, 4)?;
        match harness::verify_chain_24(dec, &gamma, p, alpha.alpha, &corpus) {
            Ok(chain) => {
                out.summary.push(format!(
                    "{}: p = {p}, α_p = {:e}: {} violations over {} functions",
                    inst.model.id,
                    alpha.alpha.as_f64(),
                    chain.violations,
                    chain.rows.len()
                ));
                out.failed |= !chain.all_ok;
                runs.push(json!({"p": p, "alpha": to_value(&alpha), "status": "checked", "chain": to_value(&chain)}));
            }
            Err(lps_lab::LabError::Refused(reason)) => {
                out.summary.push(format!("{}: p = {p}: refused ({reason})", inst.model.id));
                runs.push(json!({"p": p, "alpha": to_value(&alpha), "status": "refused", "reason": reason}));
            }
            Err(e) => return Err(e.into()),
        }
    }
    out.json(
        ctx.name(".json"),
        &with_header(ctx.header(Some(&inst.model.id)), json!({ "runs": runs })),
    );
    Ok(out)
}

fn corollary_34<T: Real>(ctx: &Ctx) -> Result<Outcome, CliError> {
    let spec = ctx.spec()?;
    let inst = ctx.instance::<T>(&spec)?;
    let gamma = inst.gamma(ctx.cfg.gamma)?;
    let dec = &inst.spectral;
    let alpha = ctx.cfg.alpha.unwrap_or(0.25);
    let p = ctx.cfg.p.unwrap_or(2.0);
    let corpus = corpus::mixed(&inst.model, dec, ctx.corpus_size(), ctx.seed);
    let report = harness::corollary_34(dec, &gamma, alpha, p, &corpus, &ctx.cfg.search)?;
    let mut out = Outcome::default();
    let estimate = report.estimate.as_f64();
    out.summary.push(format!(
        "{}: alpha = {alpha}, p = {p}: norm estimate {estimate:e}",
        inst.model.id
    ));
    if let Some(oracle) = report.l2_oracle.map(|v| v.as_f64()) {
        let rel = (estimate - oracle).abs() / oracle.max(f64::MIN_POSITIVE);
        let tol = ORACLE_TOL.max(1e3 * T::epsilon().as_f64());
        if rel > tol {
            out.failed = true;
            out.summary.push(format!(
                "FAILED: estimate differs from the exact L² norm {oracle:e} by {rel:e}"
            ));
        }
    }
    let witness = Witness {
        kind: WitnessKind::Corollary,
        model: spec.clone(),
        gamma: ctx.cfg.gamma,
        precision: ctx.cfg.precision,
        p,
        p0: None,
        p1: None,
        eps: None,
        alpha: Some(alpha),
        id: format!("{}/{}", inst.model.id, report.witness_id),
        value: estimate,
        f: to_f64_vec(&report.witness),
    };
    out.json(
        ctx.name(".json"),
        &with_header(ctx.header(Some(&inst.model.id)), to_value(&report)),
    );
    out.json(ctx.name(".witness.json"), &witness);
    Ok(out)
}

fn gradient_bound<T: Real>(ctx: &Ctx) -> Result<Outcome, CliError> {
    let spec = ctx.spec()?;
    let inst = ctx.instance::<T>(&spec)?;
    let gamma = inst.gamma(ctx.cfg.gamma)?;
    let dec = &inst.spectral;
    let theta = ctx.cfg.theta.unwrap_or(1.0);
    let corpus = corpus::mixed(&inst.model, dec, ctx.corpus_size(), ctx.seed);
    let fs: Vec<Vec<T>> = corpus.iter().map(|e| e.f.clone()).collect();
    let fit = functionals::fit_gradient_bound(dec, &gamma, T::lit(theta), &fs, None)?;
    let mut out = Outcome::default();
    out.summary.push(format!(
        "{}: theta = {theta}: c_theta = {:e}{}",
        inst.model.id,
        fit.c_theta.as_f64(),
        if fit.bound_holds { "" } else { " [growth flagged]" }
    ));
    let mut extension = Value::Null;
    if let Some(q) = ctx.cfg.extension_p {
        if q < 2.0 {
            return Err(CliError::usage("invalid extension_p: must be at least 2"));
        }
        if fit.bound_holds {
            let eps = ctx.cfg.eps.unwrap_or(0.25);
            let report = harness::verify_31(
                dec,
                &gamma,
                &inst.model.id,
                (q, q, q),
                eps,
                &corpus,
                &ctx.cfg.search,
                ctx.seed,
            )?;
            out.summary.push(ratio_summary(&report));
            if let Some(w) = ratio_witness(ctx, &spec, ctx.cfg.gamma, &report) {
                out.json(ctx.name(".witness.json"), &w);
            }
            extension = to_value(&report);
        } else {
            extension = json!("skipped: gradient bound not certified on this model");
        }
    }
    out.json(
        ctx.name(".json"),
        &with_header(
            ctx.header(Some(&inst.model.id)),
            json!({"fit": to_value(&fit), "extension": extension}),
        ),
    );
    Ok(out)
}

fn recompute<T: Real>(w: &Witness) -> Result<f64, CliError> {
    let inst = Instance::<T>::new(w.model.build()?)?;
    let gamma = inst.gamma(w.gamma)?;
    let f = cast_vec::<T>(&w.f);
    let missing = |field: &str| CliError::usage(format!("invalid witness: missing {field}"));
    let v = match w.kind {
        WitnessKind::Ratio => harness::ratio_31(
            &inst.spectral,
            &gamma,
            &f,
            w.p,
            w.p0.ok_or_else(|| missing("p0"))?,
            w.p1.ok_or_else(|| missing("p1"))?,
            w.eps.ok_or_else(|| missing("eps"))?,
        )?,
        WitnessKind::Corollary => harness::corollary_ratio(
            &inst.spectral,
            &gamma,
            w.alpha.ok_or_else(|| missing("alpha"))?,
            w.p,
            &f,
        )?,
    };
    Ok(v.as_f64())
}

/// Recomputes every witness in `path` and compares with the recorded value.
pub fn reverify(path: &Path, command: CommandName) -> Result<Outcome, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("re-verify: cannot read {}: {e}", path.display())))?;
    let witnesses = match serde_json::from_str::<WitnessFile>(&text)
        .map_err(|e| CliError::usage(format!("re-verify: {}: not a witness file ({e})", path.display())))?
    {
        WitnessFile::One(w) => vec![*w],
        WitnessFile::Many(ws) => ws,
    };
    let mut out = Outcome::default();
    let mut rows = Vec::new();
    for w in &witnesses {
        let v = match w.precision {
            Precision::F64 => recompute::<f64>(w)?,
            Precision::F32 => recompute::<f32>(w)?,
        };
        let rel = (v - w.value).abs() / w.value.abs().max(f64::MIN_POSITIVE);
        let ok = rel <= REVERIFY_TOL;
        out.failed |= !ok;
        out.summary.push(format!(
            "{}: recorded {:e}, recomputed {v:e}: {}",
            w.id,
            w.value,
            if ok { "ok" } else { "MISMATCH" }
        ));
        rows.push(json!({"id": w.id, "recorded": w.value, "recomputed": v, "relative_error": rel, "ok": ok}));
    }
    out.json(
        format!("{command}.reverify.json"),
        &json!({"command": command.as_str(), "witnesses": rows, "tolerance": REVERIFY_TOL}),
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> ExperimentConfig {
        ExperimentConfig::from_json(text).unwrap()
    }

    #[test]
    fn holder_completion() {
        let c = cfg(r#"{"model":"k2","p":1.5,"p0":1.2}"#);
        let ctx = Ctx {
            cfg: &c,
            base: Path::new("."),
            command: CommandName::Verify31,
            seed: 0,
        };
        let (p, p0, p1) = ctx.triple(2.0).unwrap();
        assert_eq!((p, p0), (1.5, 1.2));
        assert!((p1 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn holder_violation_is_a_usage_error() {
        let c = cfg(r#"{"model":"k2","p":2,"p0":3,"p1":3,"seed":1}"#);
        let e = run(&c, Path::new("."), CommandName::Verify31, None).unwrap_err();
        assert_eq!(e.code, 1);
        assert!(e.message.contains("Hölder triple invalid"), "{}", e.message);
    }

    #[test]
    fn seed_is_required_for_stochastic_commands() {
        let c = cfg(r#"{"model":"k2"}"#);
        let e = run(&c, Path::new("."), CommandName::Verify31, None).unwrap_err();
        assert!(e.message.starts_with("invalid seed"));
        assert!(run(&c, Path::new("."), CommandName::Validate, None).is_ok());
    }

    #[test]
    fn k2_validates() {
        let c = cfg(r#"{"model":"k2"}"#);
        let out = run(&c, Path::new("."), CommandName::Validate, None).unwrap();
        assert!(!out.failed);
        let report: Value = serde_json::from_slice(&out.files[0].1).unwrap();
        assert_eq!(report["passes"], true);
    }

    #[test]
    fn witness_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(r#"{"model":"p16","p":1.5,"eps":0.1,"seed":4,"corpus_size":12,"search":{"steps":10,"top":2}}"#);
        let out = run(&c, Path::new("."), CommandName::Verify31, None).unwrap();
        let (name, bytes) = out.files.iter().find(|(n, _)| n.ends_with("witness.json")).unwrap();
        let path = dir.path().join(name);
        std::fs::write(&path, bytes).unwrap();
        let re = reverify(&path, CommandName::Verify31).unwrap();
        assert!(!re.failed, "{:?}", re.summary);

        let mut w: Witness = serde_json::from_slice(bytes).unwrap();
        w.value *= 1.0 + 1e-6;
        std::fs::write(&path, serde_json::to_vec(&w).unwrap()).unwrap();
        assert!(reverify(&path, CommandName::Verify31).unwrap().failed);
    }
}
