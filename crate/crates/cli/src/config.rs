//! Experiment configuration files.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use lps_lab::gallery;
use lps_lab::harness::HarnessSearch;
use lps_lab::model::{CarreMode, ModelSpec};
use lps_lab::quadrature::QuadratureSpec;
use lps_lab::rbound::FamilyKind;
use lps_lab::spectral::Symbol;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CommandName {
    Validate,
    Spectrum,
    Lps,
    Rbound,
    #[value(name = "verify-31")]
    #[serde(rename = "verify-31")]
    Verify31,
    SweepEps,
    SweepSize,
    #[value(name = "chain-24")]
    #[serde(rename = "chain-24")]
    Chain24,
    #[value(name = "corollary-34")]
    #[serde(rename = "corollary-34")]
    Corollary34,
    GradientBound,
}

impl CommandName {
    pub fn as_str(self) -> &'static str {
        match self {
            CommandName::Validate => "validate",
            CommandName::Spectrum => "spectrum",
            CommandName::Lps => "lps",
            CommandName::Rbound => "rbound",
            CommandName::Verify31 => "verify-31",
            CommandName::SweepEps => "sweep-eps",
            CommandName::SweepSize => "sweep-size",
            CommandName::Chain24 => "chain-24",
            CommandName::Corollary34 => "corollary-34",
            CommandName::GradientBound => "gradient-bound",
        }
    }

    /// Commands whose output depends on random draws.
    pub fn stochastic(self) -> bool {
        !matches!(self, CommandName::Validate | CommandName::Spectrum)
    }
}

impl fmt::Display for CommandName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Functional {
    #[default]
    HGamma,
    Maximal,
    MeyerS,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RboundConfig {
    #[serde(default = "semigroup")]
    pub family: FamilyKind,
    #[serde(default = "default_members")]
    pub m: usize,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_eigen_seeds")]
    pub eigen_seeds: usize,
    /// Also compare with the resolvent family of this order.
    #[serde(default)]
    pub compare_delta: Option<f64>,
}

fn semigroup() -> FamilyKind {
    FamilyKind::SqrtTGammaSemigroup
}
fn default_members() -> usize {
    4
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

impl Default for RboundConfig {
    fn default() -> Self {
        RboundConfig {
            family: semigroup(),
            m: default_members(),
            restarts: default_restarts(),
            steps: default_steps(),
            eigen_seeds: default_eigen_seeds(),
            compare_delta: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub command: Option<CommandName>,
    /// A gallery name, a path to a model file (relative to the config), or
    /// an inline specification.
    #[serde(default)]
    pub model: Option<serde_json::Value>,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default = "full")]
    pub gamma: CarreMode,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub p: Option<f64>,
    #[serde(default)]
    pub p0: Option<f64>,
    #[serde(default)]
    pub p1: Option<f64>,
    #[serde(default)]
    pub p_list: Option<Vec<f64>>,
    #[serde(default)]
    pub eps: Option<f64>,
    #[serde(default)]
    pub eps_list: Option<Vec<f64>>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub theta: Option<f64>,
    /// Exponent of the verification run that follows a successful gradient fit.
    #[serde(default)]
    pub extension_p: Option<f64>,
    #[serde(default)]
    pub symbol: Option<String>,
    #[serde(default)]
    pub functional: Functional,
    #[serde(default)]
    pub quadrature: QuadratureSpec,
    #[serde(default)]
    pub search: HarnessSearch,
    #[serde(default)]
    pub rbound: RboundConfig,
    #[serde(default)]
    pub corpus_size: Option<usize>,
    /// Input function for `lps`; a corpus entry is drawn when absent.
    #[serde(default)]
    pub f: Option<Vec<f64>>,
    #[serde(default)]
    pub sizes: Option<Vec<usize>>,
    /// 1 for paths, 2 for square grids.
    #[serde(default)]
    pub grid_dims: Option<usize>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn full() -> CarreMode {
    CarreMode::Full
}

pub const MAX_CORPUS: usize = 100_000;

fn range(field: &str, ok: bool, reason: &str) -> Result<(), CliError> {
    if ok {
        Ok(())
    } else {
        Err(CliError::usage(format!("invalid {field}: {reason}")))
    }
}

fn exponent(field: &str, v: Option<f64>) -> Result<(), CliError> {
    match v {
        Some(p) => range(field, p > 1.0 && p.is_finite(), "must be a finite exponent above 1"),
        None => Ok(()),
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::usage(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<(Self, PathBuf), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("config: cannot read {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((Self::from_json(&text)?, base))
    }

    /// Range checks that do not depend on the command.
    pub fn validate(&self) -> Result<(), CliError> {
        exponent("p", self.p)?;
        exponent("p0", self.p0)?;
        exponent("p1", self.p1)?;
        exponent("extension_p", self.extension_p)?;
        for (i, &p) in self.p_list.iter().flatten().enumerate() {
            range(&format!("p_list[{i}]"), p > 1.0 && p <= 2.0, "must lie in (1, 2]")?;
        }
        if let Some(e) = self.eps {
            range("eps", e > 0.0 && e <= 0.5, "must lie in (0, 1/2]")?;
        }
        if let Some(list) = &self.eps_list {
            range("eps_list", !list.is_empty(), "must not be empty")?;
            for (i, &e) in list.iter().enumerate() {
                range(&format!("eps_list[{i}]"), e > 0.0 && e <= 0.5, "must lie in (0, 1/2]")?;
            }
        }
        if let Some(a) = self.alpha {
            range("alpha", (0.0..0.5).contains(&a), "must lie in [0, 1/2)")?;
        }
        if let Some(t) = self.theta {
            range("theta", t > 0.0 && t <= 1.0, "must lie in (0, 1]")?;
        }
        if let Some(c) = self.corpus_size {
            range("corpus_size", (1..=MAX_CORPUS).contains(&c), "must lie in [1, 100000]")?;
        }
        if let Some(sizes) = &self.sizes {
            range("sizes", !sizes.is_empty(), "must not be empty")?;
            for (i, &n) in sizes.iter().enumerate() {
                range(&format!("sizes[{i}]"), (2..=4096).contains(&n), "must lie in [2, 4096]")?;
            }
        }
        if let Some(d) = self.grid_dims {
            range("grid_dims", d == 1 || d == 2, "must be 1 or 2")?;
        }
        if let Some(s) = &self.symbol {
            s.parse::<Symbol>()
                .map_err(|e| CliError::usage(format!("invalid symbol: {e}")))?;
        }
        range("search.steps", self.search.steps <= 100_000, "must be at most 100000")?;
        range("search.top", self.search.top >= 1, "must be at least 1")?;
        range("rbound.m", (1..=64).contains(&self.rbound.m), "must lie in [1, 64]")?;
        range("rbound.restarts", self.rbound.restarts >= 1, "must be at least 1")?;
        if let Some(d) = self.rbound.compare_delta {
            range("rbound.compare_delta", d > 0.5 && d.is_finite(), "must exceed 1/2")?;
        }
        self.quadrature
            .validate()
            .map_err(|e| CliError::usage(e.to_string()))?;
        Ok(())
    }

    /// Resolves the model reference against the config's directory.
    pub fn model_spec(&self, base: &Path) -> Result<ModelSpec, CliError> {
        match &self.model {
            None => Err(CliError::usage("invalid model: required for this command")),
            Some(serde_json::Value::String(name)) => {
                if name.ends_with(".json") || name.contains('/') {
                    let path = base.join(name);
                    let text = std::fs::read_to_string(&path).map_err(|e| {
                        CliError::usage(format!("invalid model: cannot read {}: {e}", path.display()))
                    })?;
                    ModelSpec::from_json(&text).map_err(|e| CliError::usage(format!("invalid model: {e}")))
                } else {
                    gallery::spec(name).map_err(|e| CliError::usage(e.to_string()))
                }
            }
            Some(inline) => serde_json::from_value(inline.clone())
                .map_err(|e| CliError::usage(format!("invalid model: {e}"))),
        }
    }

    pub fn symbol(&self) -> Option<Symbol> {
        self.symbol.as_ref().map(|s| s.parse().expect("validated"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config() {
        let c = ExperimentConfig::from_json(r#"{"model":"k2"}"#).unwrap();
        assert_eq!(c.gamma, CarreMode::Full);
        assert_eq!(c.precision, Precision::F64);
        assert!(c.validate().is_ok());
        assert!(matches!(c.model_spec(Path::new(".")), Ok(ModelSpec::Explicit { .. })));
    }

    #[test]
    fn unknown_fields_are_named() {
        let e = ExperimentConfig::from_json(r#"{"model":"k2","epsilon":0.1}"#).unwrap_err();
        assert!(e.message.contains("epsilon"), "{}", e.message);
        let e = ExperimentConfig::from_json(r#"{"rbound":{"mm":3}}"#).unwrap_err();
        assert!(e.message.contains("mm"), "{}", e.message);
    }

    #[test]
    fn ranges_name_the_field() {
        for (text, field) in [
            (r#"{"eps":0.7}"#, "eps"),
            (r#"{"eps_list":[0.1,0.0]}"#, "eps_list[1]"),
            (r#"{"alpha":0.5}"#, "alpha"),
            (r#"{"p":1.0}"#, "p"),
            (r#"{"theta":2}"#, "theta"),
            (r#"{"symbol":"phi(-1)"}"#, "symbol"),
            (r#"{"corpus_size":0}"#, "corpus_size"),
        ] {
            let e = ExperimentConfig::from_json(text).unwrap().validate().unwrap_err();
            assert!(e.message.starts_with(&format!("invalid {field}")), "{}", e.message);
            assert_eq!(e.code, 1);
        }
    }

    #[test]
    fn inline_and_gallery_models() {
        let c = ExperimentConfig::from_json(r#"{"model":{"grid":{"dims":[4],"bc":"neumann"}}}"#).unwrap();
        assert!(matches!(c.model_spec(Path::new(".")), Ok(ModelSpec::Grid { .. })));
        let c = ExperimentConfig::from_json(r#"{"model":"nowhere"}"#).unwrap();
        assert!(c.model_spec(Path::new(".")).is_err());
    }
}
