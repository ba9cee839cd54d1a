//! Run configuration: one TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::basis::{BasisConfig, BasisConfigKind, KnotRule};
use crate::dataset::Schema;
use crate::inference::MIN_REPLICATES;
use crate::nuisance::NuisanceSpecs;
use crate::pseudo::PseudoVariant;
use crate::second_stage::GridSpec;
use crate::simulate::DgpSpec;
use crate::{Error, Result};

pub const DEFAULT_ANALYZE_REPLICATES: usize = 200;
pub const DEFAULT_VALIDATE_REPLICATES: usize = 2000;
pub const DEFAULT_MONTE_CARLO_RUNS: usize = 200;
pub const DEFAULT_SE_REPLICATES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subcommand {
    Analyze,
    Simulate,
    Validate,
}

fn default_order() -> usize {
    3
}

fn default_knots() -> KnotRule {
    KnotRule::Median
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SecondStageConfig {
    Bspline {
        #[serde(default = "default_order")]
        order: usize,
        #[serde(default = "default_knots")]
        knots: KnotRule,
        #[serde(default)]
        boundary: Option<[f64; 2]>,
        #[serde(default = "default_true")]
        include_intercept: bool,
    },
    Polynomial {
        degree: usize,
        #[serde(default = "default_true")]
        include_intercept: bool,
    },
    /// Pseudo-outcome means within each level of a discrete modifier.
    Subgroup,
}

impl Default for SecondStageConfig {
    fn default() -> Self {
        SecondStageConfig::Bspline { order: 3, knots: KnotRule::Median, boundary: None, include_intercept: true }
    }
}

impl SecondStageConfig {
    /// Basis for regression second stages; `None` for subgroup means.
    pub fn basis(&self) -> Option<BasisConfig> {
        match self {
            SecondStageConfig::Bspline { order, knots, boundary, include_intercept } => Some(BasisConfig {
                kind: BasisConfigKind::Bspline { order: *order, knots: knots.clone(), boundary: *boundary },
                include_intercept: *include_intercept,
            }),
            SecondStageConfig::Polynomial { degree, include_intercept } => Some(BasisConfig {
                kind: BasisConfigKind::Polynomial { degree: *degree },
                include_intercept: *include_intercept,
            }),
            SecondStageConfig::Subgroup => None,
        }
    }
}

fn default_folds() -> usize {
    2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossfitConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_folds")]
    pub k: usize,
}

impl Default for CrossfitConfig {
    fn default() -> Self {
        CrossfitConfig { enabled: false, k: 2 }
    }
}

/// How pointwise standard errors are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeMode {
    /// Heteroskedasticity-robust sandwich of the second stage.
    #[default]
    Sandwich,
    /// Nonparametric bootstrap of the second stage, pseudo-outcomes fixed.
    Bootstrap,
    /// Nonparametric bootstrap of rows, refitting both steps.
    BootstrapRefit,
}

fn default_se_replicates() -> usize {
    DEFAULT_SE_REPLICATES
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeConfig {
    #[serde(default)]
    pub mode: SeMode,
    #[serde(default = "default_se_replicates")]
    pub replicates: usize,
}

impl Default for SeConfig {
    fn default() -> Self {
        SeConfig { mode: SeMode::Sandwich, replicates: DEFAULT_SE_REPLICATES }
    }
}

/// Pass/fail limits for `validate`. Unset limits are not checked.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub max_abs_bias: Option<f64>,
    pub max_rmse: Option<f64>,
    pub min_uniform_coverage: Option<f64>,
    pub min_pointwise_coverage: Option<f64>,
}

fn default_runs() -> usize {
    DEFAULT_MONTE_CARLO_RUNS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateConfig {
    /// Monte Carlo replicates `R`.
    #[serde(default = "default_runs")]
    pub runs: usize,
    /// Truth file (columns `grid,truth`) overriding the analytic truth.
    #[serde(default)]
    pub truth: Option<PathBuf>,
    #[serde(default)]
    pub thresholds: Thresholds,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        ValidateConfig { runs: DEFAULT_MONTE_CARLO_RUNS, truth: None, thresholds: Thresholds::default() }
    }
}

fn default_alpha() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub input: Option<PathBuf>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub schema: Option<Schema>,
    #[serde(default)]
    pub stratify_by: Option<String>,
    /// Main effects of every covariate when absent.
    #[serde(default)]
    pub nuisance: Option<NuisanceSpecs>,
    #[serde(default)]
    pub second_stage: SecondStageConfig,
    #[serde(default)]
    pub variant: PseudoVariant,
    #[serde(default)]
    pub crossfit: CrossfitConfig,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Multiplier-bootstrap replicates; the default depends on the subcommand.
    #[serde(default)]
    pub replicates: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub se: SeConfig,
    #[serde(default)]
    pub simulate: Option<DgpSpec>,
    #[serde(default)]
    pub validate: ValidateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input: None,
            out: None,
            schema: None,
            stratify_by: None,
            nuisance: None,
            second_stage: SecondStageConfig::default(),
            variant: PseudoVariant::default(),
            crossfit: CrossfitConfig::default(),
            grid: GridSpec::default(),
            alpha: default_alpha(),
            replicates: None,
            seed: 0,
            se: SeConfig::default(),
            simulate: None,
            validate: ValidateConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
    pub replicates: Option<usize>,
    pub grid_min: Option<f64>,
    pub grid_max: Option<f64>,
    pub grid_step: Option<f64>,
    pub variant: Option<PseudoVariant>,
    pub crossfit: Option<bool>,
    pub stratify_by: Option<String>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.input {
            self.input = Some(v.clone());
        }
        if let Some(v) = &o.out {
            self.out = Some(v.clone());
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.alpha {
            self.alpha = v;
        }
        if let Some(v) = o.replicates {
            self.replicates = Some(v);
        }
        if let Some(v) = o.grid_min {
            self.grid.min = Some(v);
        }
        if let Some(v) = o.grid_max {
            self.grid.max = Some(v);
        }
        if let Some(v) = o.grid_step {
            self.grid.step = Some(v);
        }
        if let Some(v) = o.variant {
            self.variant = v;
        }
        if let Some(v) = o.crossfit {
            self.crossfit.enabled = v;
        }
        if let Some(v) = &o.stratify_by {
            self.stratify_by = Some(v.clone());
        }
    }

    pub fn replicates_for(&self, command: Subcommand) -> usize {
        self.replicates.unwrap_or(match command {
            Subcommand::Validate => DEFAULT_VALIDATE_REPLICATES,
            _ => DEFAULT_ANALYZE_REPLICATES,
        })
    }

    /// Checks everything that can be checked without reading data.
    pub fn validate(&self, command: Subcommand) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if let (Some(lo), Some(hi)) = (self.grid.min, self.grid.max) {
            if !(lo <= hi) {
                return bad(format!("grid min {lo} exceeds grid max {hi}"));
            }
        }
        if let Some(step) = self.grid.step {
            if !(step > 0.0 && step.is_finite()) {
                return bad(format!("grid step must be positive, got {step}"));
            }
        }
        if self.out.is_none() {
            return bad("output directory required".into());
        }
        if command != Subcommand::Simulate && self.replicates_for(command) < MIN_REPLICATES {
            return bad(format!(
                "at least {MIN_REPLICATES} bootstrap replicates required, got {}",
                self.replicates_for(command)
            ));
        }
        if self.crossfit.enabled && self.crossfit.k < 2 {
            return bad(format!("crossfit needs k >= 2, got {}", self.crossfit.k));
        }
        if self.se.mode != SeMode::Sandwich && self.se.replicates < 2 {
            return bad("bootstrap standard errors need at least 2 replicates".into());
        }
        if let Some(basis) = self.second_stage.basis() {
            check_basis(&basis).map_err(|e| Error::Config(format!("second stage: {e}")))?;
        }
        match command {
            Subcommand::Analyze => {
                if self.input.is_none() {
                    return bad("analyze needs an input file".into());
                }
                match &self.schema {
                    Some(s) if !s.effect_modifiers.is_empty() => {}
                    _ => return bad("schema with at least one effect modifier required".into()),
                }
            }
            Subcommand::Simulate | Subcommand::Validate => {
                let Some(dgp) = &self.simulate else {
                    return bad(format!("{command:?} needs a [simulate] section").to_lowercase());
                };
                dgp.validate().map_err(|e| Error::Config(e.to_string()))?;
                if command == Subcommand::Validate {
                    if self.validate.runs == 0 {
                        return bad("validate needs at least one run".into());
                    }
                    if self.stratify_by.is_some() {
                        return bad("validate does not support stratification".into());
                    }
                }
            }
        }
        Ok(())
    }
}

/// Resolves `basis` against synthetic values spanning any explicit knots and
/// boundaries, which catches bad orders, degrees and knot lists.
fn check_basis(basis: &BasisConfig) -> std::result::Result<(), crate::basis::BasisError> {
    let mut values = vec![0.0, 1.0];
    if let BasisConfigKind::Bspline { knots, boundary, .. } = &basis.kind {
        match boundary {
            Some(b) => values = b.to_vec(),
            None => {
                if let KnotRule::At(k) = knots {
                    values.extend(k.iter().map(|v| v - 1.0));
                    values.extend(k.iter().map(|v| v + 1.0));
                }
            }
        }
    }
    basis.resolve(&values).map(|_| ())
}
