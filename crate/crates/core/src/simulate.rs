//! Nested-trial data-generating processes with known CATE functions.
//!
//! Covariates are independent. Participation is logistic in the
//! covariates, treatment in the trial is a fair (or fixed-probability) coin,
//! and each arm's outcome mean is a linear predictor passed through an
//! identity or logit link.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CohortDataset, DatasetError, Schema};
use crate::pseudo::{aipw_value, TrialRow};
use crate::rng::{replicate_seed, stream_rng, Stream};
use crate::stats::{expit, normal_pdf};

/// Midpoints per integrated dimension.
pub const QUADRATURE_POINTS: usize = 1024;
pub const MAX_INTEGRATED_DIMENSIONS: usize = 2;
/// Normal laws are integrated over `mean -/+ NORMAL_SPAN * sd`.
const NORMAL_SPAN: f64 = 8.0;
/// Smallest participation probability allowed anywhere on the support.
pub const MIN_PARTICIPATION: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum SimulateError {
    #[error("invalid simulation spec: {0}")]
    InvalidSpec(String),
    #[error("row {row}: bernoulli mean {mean} outside (0, 1)")]
    MeanOutOfRange { row: usize, mean: f64 },
    #[error("true CATE needs integration over {0} covariates; at most {MAX_INTEGRATED_DIMENSIONS} supported")]
    TooManyIntegratedDimensions(usize),
    #[error("exact enumeration needs discrete covariates; `{0}` is continuous")]
    NotEnumerable(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum CovariateLaw {
    Uniform { low: f64, high: f64 },
    Normal { mean: f64, sd: f64 },
    Bernoulli { p: f64 },
    /// Finite support with the given probabilities.
    Discrete { values: Vec<f64>, probs: Vec<f64> },
}

impl CovariateLaw {
    fn validate(&self, name: &str) -> Result<(), SimulateError> {
        let bad = |msg: &str| Err(SimulateError::InvalidSpec(format!("covariate `{name}`: {msg}")));
        match self {
            CovariateLaw::Uniform { low, high } if !(low.is_finite() && high.is_finite() && low < high) => {
                bad("uniform needs finite low < high")
            }
            CovariateLaw::Normal { mean, sd } if !(mean.is_finite() && sd.is_finite() && *sd > 0.0) => {
                bad("normal needs finite mean and sd > 0")
            }
            CovariateLaw::Bernoulli { p } if !(*p > 0.0 && *p < 1.0) => bad("bernoulli p must lie in (0, 1)"),
            CovariateLaw::Discrete { values, probs } => {
                if values.is_empty() || values.len() != probs.len() {
                    return bad("discrete values and probs must be non-empty and of equal length");
                }
                if values.iter().any(|v| !v.is_finite()) || probs.iter().any(|p| !(*p > 0.0)) {
                    return bad("discrete values must be finite and probs positive");
                }
                if (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return bad("discrete probs must sum to 1");
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn mean(&self) -> f64 {
        match self {
            CovariateLaw::Uniform { low, high } => 0.5 * (low + high),
            CovariateLaw::Normal { mean, .. } => *mean,
            CovariateLaw::Bernoulli { p } => *p,
            CovariateLaw::Discrete { values, probs } => values.iter().zip(probs).map(|(v, p)| v * p).sum(),
        }
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            CovariateLaw::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
            CovariateLaw::Normal { mean, sd } => mean + sd * rng.sample::<f64, _>(StandardNormal),
            CovariateLaw::Bernoulli { p } => f64::from(u8::from(rng.random::<f64>() < *p)),
            CovariateLaw::Discrete { values, probs } => {
                let u = rng.random::<f64>();
                let mut acc = 0.0;
                for (v, p) in values.iter().zip(probs) {
                    acc += p;
                    if u < acc {
                        return *v;
                    }
                }
                *values.last().expect("validated non-empty")
            }
        }
    }

    /// Nodes and weights summing to one.
    fn quadrature(&self) -> Vec<(f64, f64)> {
        match self {
            CovariateLaw::Uniform { low, high } => midpoints(*low, *high)
                .map(|x| (x, 1.0 / QUADRATURE_POINTS as f64))
                .collect(),
            CovariateLaw::Normal { mean, sd } => {
                let nodes: Vec<f64> = midpoints(mean - NORMAL_SPAN * sd, mean + NORMAL_SPAN * sd).collect();
                let dens: Vec<f64> = nodes.iter().map(|x| normal_pdf((x - mean) / sd)).collect();
                let total: f64 = dens.iter().sum();
                nodes.into_iter().zip(dens).map(|(x, d)| (x, d / total)).collect()
            }
            CovariateLaw::Bernoulli { p } => vec![(0.0, 1.0 - p), (1.0, *p)],
            CovariateLaw::Discrete { values, probs } => values.iter().copied().zip(probs.iter().copied()).collect(),
        }
    }

    /// Interval containing the support (normal laws are cut at the
    /// quadrature span).
    fn range(&self) -> (f64, f64) {
        match self {
            CovariateLaw::Uniform { low, high } => (*low, *high),
            CovariateLaw::Normal { mean, sd } => (mean - NORMAL_SPAN * sd, mean + NORMAL_SPAN * sd),
            CovariateLaw::Bernoulli { .. } => (0.0, 1.0),
            CovariateLaw::Discrete { values, .. } => (
                values.iter().copied().fold(f64::INFINITY, f64::min),
                values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            ),
        }
    }

    fn is_discrete(&self) -> bool {
        matches!(self, CovariateLaw::Bernoulli { .. } | CovariateLaw::Discrete { .. })
    }
}

fn midpoints(low: f64, high: f64) -> impl Iterator<Item = f64> {
    let h = (high - low) / QUADRATURE_POINTS as f64;
    (0..QUADRATURE_POINTS).map(move |i| low + (i as f64 + 0.5) * h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covariate {
    pub name: String,
    #[serde(flatten)]
    pub law: CovariateLaw,
}

/// `intercept + sum_j coefficients[j] * x_j`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LinearPredictor {
    #[serde(default)]
    pub intercept: f64,
    #[serde(default)]
    pub coefficients: BTreeMap<String, f64>,
}

impl LinearPredictor {
    pub fn constant(intercept: f64) -> Self {
        LinearPredictor { intercept, coefficients: BTreeMap::new() }
    }

    pub fn with(mut self, covariate: &str, coefficient: f64) -> Self {
        self.coefficients.insert(covariate.to_string(), coefficient);
        self
    }

    fn eval(&self, names: &[String], x: &[f64]) -> f64 {
        self.intercept
            + names
                .iter()
                .zip(x)
                .filter_map(|(n, v)| self.coefficients.get(n).map(|c| c * v))
                .sum::<f64>()
    }

    fn depends_on(&self, name: &str) -> bool {
        self.coefficients.get(name).is_some_and(|c| *c != 0.0)
    }

    /// Smallest and largest value over a box.
    fn extremes(&self, names: &[String], ranges: &[(f64, f64)]) -> (f64, f64) {
        let mut lo = self.intercept;
        let mut hi = self.intercept;
        for (n, (a, b)) in names.iter().zip(ranges) {
            if let Some(c) = self.coefficients.get(n) {
                lo += (c * a).min(c * b);
                hi += (c * a).max(c * b);
            }
        }
        (lo, hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    #[default]
    Identity,
    Logit,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ArmMean {
    #[serde(flatten)]
    pub predictor: LinearPredictor,
    #[serde(default)]
    pub link: Link,
}

impl ArmMean {
    pub fn identity(predictor: LinearPredictor) -> Self {
        ArmMean { predictor, link: Link::Identity }
    }

    pub fn logit(predictor: LinearPredictor) -> Self {
        ArmMean { predictor, link: Link::Logit }
    }

    fn eval(&self, names: &[String], x: &[f64]) -> f64 {
        let eta = self.predictor.eval(names, x);
        match self.link {
            Link::Identity => eta,
            Link::Logit => expit(eta),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum OutcomeFamily {
    Bernoulli,
    Gaussian { sigma: f64 },
}

fn default_treatment_probability() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub n: usize,
    pub covariates: Vec<Covariate>,
    /// Logit of `Pr[S = 1 | X]`.
    pub participation: LinearPredictor,
    #[serde(default = "default_treatment_probability")]
    pub treatment_probability: f64,
    pub treated: ArmMean,
    pub control: ArmMean,
    #[serde(flatten)]
    pub family: OutcomeFamily,
    pub effect_modifier: String,
    #[serde(default)]
    pub seed: u64,
}

impl DgpSpec {
    pub fn names(&self) -> Vec<String> {
        self.covariates.iter().map(|c| c.name.clone()).collect()
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        DgpSpec { seed, ..self.clone() }
    }

    /// The same process seeded for Monte Carlo replicate `r`.
    pub fn replicate(&self, r: u64) -> Self {
        self.with_seed(replicate_seed(self.seed, r))
    }

    pub fn modifier_index(&self) -> Option<usize> {
        self.covariates.iter().position(|c| c.name == self.effect_modifier)
    }

    pub fn validate(&self) -> Result<(), SimulateError> {
        let invalid = |m: String| Err(SimulateError::InvalidSpec(m));
        if self.n == 0 {
            return invalid("n must be positive".into());
        }
        if self.covariates.is_empty() {
            return invalid("at least one covariate required".into());
        }
        let names = self.names();
        for (i, c) in self.covariates.iter().enumerate() {
            if names[..i].contains(&c.name) {
                return invalid(format!("duplicate covariate `{}`", c.name));
            }
            if ["s", "a", "y"].contains(&c.name.as_str()) {
                return invalid(format!("covariate name `{}` is reserved", c.name));
            }
            c.law.validate(&c.name)?;
        }
        if self.modifier_index().is_none() {
            return invalid(format!("effect modifier `{}` is not a covariate", self.effect_modifier));
        }
        for (what, lp) in [
            ("participation", &self.participation),
            ("treated", &self.treated.predictor),
            ("control", &self.control.predictor),
        ] {
            if !lp.intercept.is_finite() || lp.coefficients.values().any(|c| !c.is_finite()) {
                return invalid(format!("{what}: coefficients must be finite"));
            }
            if let Some(unknown) = lp.coefficients.keys().find(|k| !names.contains(k)) {
                return invalid(format!("{what}: unknown covariate `{unknown}`"));
            }
        }
        if !(self.treatment_probability > 0.0 && self.treatment_probability < 1.0) {
            return invalid("treatment probability must lie in (0, 1)".into());
        }
        if let OutcomeFamily::Gaussian { sigma } = self.family {
            if !(sigma.is_finite() && sigma >= 0.0) {
                return invalid("gaussian sigma must be finite and non-negative".into());
            }
        }
        let ranges: Vec<(f64, f64)> = self.covariates.iter().map(|c| c.law.range()).collect();
        let (eta_min, _) = self.participation.extremes(&names, &ranges);
        if expit(eta_min) < MIN_PARTICIPATION {
            return invalid(format!(
                "participation probability falls to {:.3e} on the covariate support",
                expit(eta_min)
            ));
        }
        Ok(())
    }

    pub fn participation_probability(&self, x: &[f64]) -> f64 {
        expit(self.participation.eval(&self.names(), x))
    }

    /// `(mu1(x), mu0(x))`.
    pub fn arm_means(&self, x: &[f64]) -> (f64, f64) {
        let names = self.names();
        (self.treated.eval(&names, x), self.control.eval(&names, x))
    }
}

/// Raw draws of a simulated cohort, before dataset validation.
#[derive(Debug, Clone, PartialEq)]
pub struct Draws {
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
    pub s: Vec<bool>,
    pub a: Vec<Option<bool>>,
    pub y: Vec<Option<f64>>,
}

/// Draws `X`, then `S | X`, then for trial rows `A` and `Y | X, A`, row by
/// row from stream `Data` of the spec seed.
pub fn draw(spec: &DgpSpec) -> Result<Draws, SimulateError> {
    spec.validate()?;
    let names = spec.names();
    let mut rng = stream_rng(spec.seed, Stream::Data);
    let d = spec.covariates.len();
    let mut columns = vec![Vec::with_capacity(spec.n); d];
    let mut s = Vec::with_capacity(spec.n);
    let mut a = Vec::with_capacity(spec.n);
    let mut y = Vec::with_capacity(spec.n);
    let mut x = vec![0.0; d];
    for row in 0..spec.n {
        for (j, c) in spec.covariates.iter().enumerate() {
            x[j] = c.law.draw(&mut rng);
            columns[j].push(x[j]);
        }
        let in_trial = rng.random::<f64>() < expit(spec.participation.eval(&names, &x));
        s.push(in_trial);
        if !in_trial {
            a.push(None);
            y.push(None);
            continue;
        }
        let treated = rng.random::<f64>() < spec.treatment_probability;
        let arm = if treated { &spec.treated } else { &spec.control };
        let mean = arm.eval(&names, &x);
        let outcome = match spec.family {
            OutcomeFamily::Bernoulli => {
                if !(mean > 0.0 && mean < 1.0) {
                    return Err(SimulateError::MeanOutOfRange { row, mean });
                }
                f64::from(u8::from(rng.random::<f64>() < mean))
            }
            OutcomeFamily::Gaussian { sigma } => mean + sigma * rng.sample::<f64, _>(StandardNormal),
        };
        a.push(Some(treated));
        y.push(Some(outcome));
    }
    Ok(Draws { names, columns, s, a, y })
}

/// Simulated cohort with the effect modifier recorded in the schema.
pub fn generate(spec: &DgpSpec) -> Result<CohortDataset, SimulateError> {
    let draws = draw(spec)?;
    let schema = Schema { effect_modifiers: vec![spec.effect_modifier.clone()], ..Schema::default() };
    Ok(CohortDataset::new(schema, draws.names, draws.columns, draws.s, draws.a, draws.y)?)
}

/// `E[mu1(X) - mu0(X) | X~ = x~]` in the target population.
pub fn true_cate(spec: &DgpSpec, grid: &[f64]) -> Result<Vec<f64>, SimulateError> {
    conditional_effect(spec, grid, false)
}

/// `E[mu1(X) - mu0(X) | X~ = x~, S = 1]`, the CATE over the trial's
/// covariate law.
pub fn true_trial_cate(spec: &DgpSpec, grid: &[f64]) -> Result<Vec<f64>, SimulateError> {
    conditional_effect(spec, grid, true)
}

fn conditional_effect(spec: &DgpSpec, grid: &[f64], trial: bool) -> Result<Vec<f64>, SimulateError> {
    spec.validate()?;
    let names = spec.names();
    let m = spec.modifier_index().expect("validated");
    let linear = spec.treated.link == Link::Identity && spec.control.link == Link::Identity;
    let matters = |j: usize| {
        let name = &names[j];
        if j == m {
            return false;
        }
        let in_effect = spec.treated.predictor.depends_on(name) || spec.control.predictor.depends_on(name);
        let in_selection = trial && spec.participation.depends_on(name);
        (in_effect && (!linear || trial)) || in_selection
    };
    let integrated: Vec<usize> = (0..names.len()).filter(|&j| matters(j)).collect();
    if integrated.len() > MAX_INTEGRATED_DIMENSIONS {
        return Err(SimulateError::TooManyIntegratedDimensions(integrated.len()));
    }
    // Covariates not integrated over sit at their mean; they enter the
    // effect linearly or not at all.
    let base: Vec<f64> = spec.covariates.iter().map(|c| c.law.mean()).collect();
    let rules: Vec<Vec<(f64, f64)>> = integrated.iter().map(|&j| spec.covariates[j].law.quadrature()).collect();
    let nodes = tensor_nodes(&rules);

    Ok(grid
        .iter()
        .map(|&xm| {
            let mut x = base.clone();
            x[m] = xm;
            let mut num = 0.0;
            let mut den = 0.0;
            for (values, weight) in &nodes {
                for (k, &j) in integrated.iter().enumerate() {
                    x[j] = values[k];
                }
                let w = if trial { weight * expit(spec.participation.eval(&names, &x)) } else { *weight };
                num += w * (spec.treated.eval(&names, &x) - spec.control.eval(&names, &x));
                den += w;
            }
            num / den
        })
        .collect())
}

fn tensor_nodes(rules: &[Vec<(f64, f64)>]) -> Vec<(Vec<f64>, f64)> {
    rules.iter().fold(vec![(Vec::new(), 1.0)], |acc, rule| {
        acc.iter()
            .flat_map(|(vals, w)| {
                rule.iter().map(move |(x, rw)| {
                    let mut v = vals.clone();
                    v.push(*x);
                    (v, w * rw)
                })
            })
            .collect()
    })
}

/// One support point of a discrete covariate law with its true nuisances.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportPoint {
    pub x: Vec<f64>,
    pub prob: f64,
    pub p: f64,
    pub e1: f64,
    pub mu1: f64,
    pub mu0: f64,
}

/// A process whose covariates have finite support and whose outcomes are
/// binary, so every population expectation is a finite sum.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteWorld {
    pub names: Vec<String>,
    pub modifier: usize,
    pub points: Vec<SupportPoint>,
}

/// Nuisance values `(p, e1, g1, g0)` plugged into the pseudo-outcome.
pub type Nuisances = (f64, f64, f64, f64);

impl DiscreteWorld {
    pub fn from_spec(spec: &DgpSpec) -> Result<Self, SimulateError> {
        spec.validate()?;
        if let Some(c) = spec.covariates.iter().find(|c| !c.law.is_discrete()) {
            return Err(SimulateError::NotEnumerable(c.name.clone()));
        }
        if spec.family != OutcomeFamily::Bernoulli {
            return Err(SimulateError::InvalidSpec("exact enumeration needs a bernoulli outcome".into()));
        }
        let rules: Vec<Vec<(f64, f64)>> = spec.covariates.iter().map(|c| c.law.quadrature()).collect();
        let points = tensor_nodes(&rules)
            .into_iter()
            .map(|(x, prob)| {
                let (mu1, mu0) = spec.arm_means(&x);
                SupportPoint { p: spec.participation_probability(&x), e1: spec.treatment_probability, mu1, mu0, x, prob }
            })
            .collect::<Vec<_>>();
        if let Some(pt) = points.iter().find(|pt| !(pt.mu1 > 0.0 && pt.mu1 < 1.0 && pt.mu0 > 0.0 && pt.mu0 < 1.0)) {
            return Err(SimulateError::InvalidSpec(format!("bernoulli mean outside (0, 1) at {:?}", pt.x)));
        }
        Ok(DiscreteWorld { names: spec.names(), modifier: spec.modifier_index().expect("validated"), points })
    }

    /// Distinct modifier values in increasing order.
    pub fn modifier_levels(&self) -> Vec<f64> {
        let mut levels: Vec<f64> = self.points.iter().map(|pt| pt.x[self.modifier]).collect();
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        levels
    }

    fn by_level(&self, value: impl Fn(&SupportPoint) -> f64) -> Vec<(f64, f64)> {
        self.modifier_levels()
            .into_iter()
            .map(|level| {
                let (num, den) = self
                    .points
                    .iter()
                    .filter(|pt| pt.x[self.modifier] == level)
                    .fold((0.0, 0.0), |(n, d), pt| (n + pt.prob * value(pt), d + pt.prob));
                (level, num / den)
            })
            .collect()
    }

    /// `(x~, E[mu1 - mu0 | X~ = x~])` at every modifier level.
    pub fn true_cate(&self) -> Vec<(f64, f64)> {
        self.by_level(|pt| pt.mu1 - pt.mu0)
    }

    /// `(x~, E[phi | X~ = x~])`, enumerating `S`, `A` and `Y` at every support
    /// point, with `nuisances` supplying the values plugged into `phi`.
    pub fn pseudo_mean(&self, nuisances: impl Fn(&SupportPoint) -> Nuisances) -> Vec<(f64, f64)> {
        self.by_level(|pt| {
            let (p, e1, g1, g0) = nuisances(pt);
            let mut total = (1.0 - pt.p) * aipw_value(None, p, e1, g1, g0);
            for (treated, pr_a, mu) in [(true, pt.e1, pt.mu1), (false, 1.0 - pt.e1, pt.mu0)] {
                for (y, pr_y) in [(1.0, mu), (0.0, 1.0 - mu)] {
                    total += pt.p * pr_a * pr_y * aipw_value(Some(TrialRow { treated, y }), p, e1, g1, g0);
                }
            }
            total
        })
    }

    /// Nuisances equal to the truth.
    pub fn true_nuisances(pt: &SupportPoint) -> Nuisances {
        (pt.p, pt.e1, pt.mu1, pt.mu0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(name: &str) -> Covariate {
        Covariate { name: name.into(), law: CovariateLaw::Uniform { low: 0.0, high: 1.0 } }
    }

    fn linear_spec(effect: LinearPredictor) -> DgpSpec {
        let mut treated = effect.clone();
        treated.intercept += 0.2;
        DgpSpec {
            n: 1000,
            covariates: vec![uniform("x1"), uniform("x2")],
            participation: LinearPredictor::constant(-0.5).with("x2", 1.0),
            treatment_probability: 0.5,
            treated: ArmMean::identity(treated),
            control: ArmMean::identity(LinearPredictor::constant(0.2)),
            family: OutcomeFamily::Gaussian { sigma: 1.0 },
            effect_modifier: "x1".into(),
            seed: 3,
        }
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn constant_effect() {
        let spec = linear_spec(LinearPredictor::constant(0.2));
        let grid = [0.0, 0.3, 0.9];
        assert!(close(&true_cate(&spec, &grid).unwrap(), &[0.2; 3], 1e-12));
    }

    #[test]
    fn effect_in_modifier_only() {
        let spec = linear_spec(LinearPredictor::constant(-0.15).with("x1", 0.3));
        let grid = [0.1, 0.5, 0.8];
        let want: Vec<f64> = grid.iter().map(|x| 0.3 * (x - 0.5)).collect();
        assert!(close(&true_cate(&spec, &grid).unwrap(), &want, 1e-12));
    }

    #[test]
    fn effect_averaged_over_second_covariate() {
        let effect = LinearPredictor::constant(0.0).with("x1", 0.1).with("x2", 0.1);
        let grid = [0.0, 0.25, 1.0];
        let want: Vec<f64> = grid.iter().map(|x| 0.1 * x + 0.05).collect();
        let spec = linear_spec(effect.clone());
        assert!(close(&true_cate(&spec, &grid).unwrap(), &want, 1e-12));

        // Midpoint sum over the second covariate.
        let z: Vec<f64> = midpoints(0.0, 1.0).collect();
        let quad: Vec<f64> = grid
            .iter()
            .map(|x| z.iter().map(|zz| 0.1 * x + 0.1 * zz).sum::<f64>() / z.len() as f64)
            .collect();
        assert!(close(&quad, &want, 1e-6));
    }

    #[test]
    fn logit_arms_match_independent_quadrature() {
        let mut spec = linear_spec(LinearPredictor::constant(0.0));
        spec.family = OutcomeFamily::Bernoulli;
        spec.treated = ArmMean::logit(LinearPredictor::constant(0.3).with("x1", 1.0).with("x2", -2.0));
        spec.control = ArmMean::logit(LinearPredictor::constant(-0.2).with("x2", 1.5));
        let grid = [0.2, 0.7];
        let got = true_cate(&spec, &grid).unwrap();
        // Composite Simpson on 2001 points as an independent oracle.
        let simpson = |f: &dyn Fn(f64) -> f64| {
            let m = 2000;
            let h = 1.0 / m as f64;
            (0..=m)
                .map(|i| {
                    let w = if i == 0 || i == m { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                    w * f(i as f64 * h)
                })
                .sum::<f64>()
                * h
                / 3.0
        };
        for (x, g) in grid.iter().zip(&got) {
            let want = simpson(&|z| expit(0.3 + x - 2.0 * z) - expit(-0.2 + 1.5 * z));
            assert!((g - want).abs() < 1e-6, "{g} vs {want}");
        }
    }

    #[test]
    fn normal_covariate_quadrature() {
        let mut spec = linear_spec(LinearPredictor::constant(0.0));
        spec.covariates[1] = Covariate { name: "x2".into(), law: CovariateLaw::Normal { mean: 0.0, sd: 1.0 } };
        spec.participation = LinearPredictor::constant(0.0);
        spec.family = OutcomeFamily::Bernoulli;
        spec.treated = ArmMean::logit(LinearPredictor::constant(0.0).with("x2", 1.0));
        spec.control = ArmMean::logit(LinearPredictor::constant(0.0));
        // E[expit(Z)] = 1/2 for symmetric Z.
        let got = true_cate(&spec, &[0.5]).unwrap();
        assert!(got[0].abs() < 1e-9);
    }

    #[test]
    fn trial_cate_weights_by_participation() {
        let mut spec = linear_spec(LinearPredictor::constant(0.0).with("x2", 1.0));
        spec.participation = LinearPredictor::constant(0.0).with("x2", 2.0);
        let target = true_cate(&spec, &[0.5]).unwrap()[0];
        let trial = true_trial_cate(&spec, &[0.5]).unwrap()[0];
        assert!((target - 0.5).abs() < 1e-12);
        // E[Z expit(2Z)] / E[expit(2Z)] with Z ~ U(0, 1), by Simpson.
        let m = 2000;
        let h = 1.0 / m as f64;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..=m {
            let z = i as f64 * h;
            let w = if i == 0 || i == m { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            num += w * z * expit(2.0 * z);
            den += w * expit(2.0 * z);
        }
        assert!((trial - num / den).abs() < 1e-6);
        assert!(trial > target);
    }

    #[test]
    fn too_many_integrated_dimensions() {
        let mut spec = linear_spec(LinearPredictor::constant(0.0));
        spec.covariates.extend([uniform("x3"), uniform("x4")]);
        spec.treated = ArmMean::logit(LinearPredictor::constant(0.0).with("x2", 1.0).with("x3", 1.0).with("x4", 1.0));
        spec.control = ArmMean::logit(LinearPredictor::constant(0.0));
        spec.family = OutcomeFamily::Bernoulli;
        assert_eq!(true_cate(&spec, &[0.5]).unwrap_err(), SimulateError::TooManyIntegratedDimensions(3));
    }

    #[test]
    fn saturated_participation() {
        let mut spec = linear_spec(LinearPredictor::constant(0.0));
        spec.participation = LinearPredictor::constant(20.0);
        spec.n = 5000;
        let d = draw(&spec).unwrap();
        let share = d.s.iter().filter(|s| **s).count() as f64 / spec.n as f64;
        assert!(share >= 0.999);
    }

    #[test]
    fn null_effect_arm_means_agree() {
        let mut spec = linear_spec(LinearPredictor::constant(0.0));
        spec.n = 20000;
        spec.participation = LinearPredictor::constant(1.0);
        spec.family = OutcomeFamily::Gaussian { sigma: 0.5 };
        spec.treated = ArmMean::identity(LinearPredictor::constant(0.3).with("x1", 0.5));
        spec.control = spec.treated.clone();
        let d = draw(&spec).unwrap();
        let (mut sums, mut counts) = ([0.0; 2], [0usize; 2]);
        for (a, y) in d.a.iter().zip(&d.y) {
            if let (Some(a), Some(y)) = (a, y) {
                sums[usize::from(*a)] += y;
                counts[usize::from(*a)] += 1;
            }
        }
        let diff = sums[1] / counts[1] as f64 - sums[0] / counts[0] as f64;
        assert!(diff.abs() < 0.03, "{diff}");
    }

    #[test]
    fn generation_is_deterministic_and_structured() {
        let spec = linear_spec(LinearPredictor::constant(0.1));
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate(&spec.with_seed(4)).unwrap());
        for i in 0..a.n_rows() {
            assert_eq!(a.s()[i], a.a()[i].is_some());
            assert_eq!(a.s()[i], a.y()[i].is_some());
        }
        assert_eq!(a.effect_modifiers(), ["x1".to_string()]);
        assert_ne!(spec.replicate(0).seed, spec.replicate(1).seed);
    }

    #[test]
    fn bernoulli_mean_out_of_range() {
        let mut spec = linear_spec(LinearPredictor::constant(0.0));
        spec.family = OutcomeFamily::Bernoulli;
        spec.treated = ArmMean::identity(LinearPredictor::constant(0.5).with("x1", 1.0));
        spec.control = ArmMean::identity(LinearPredictor::constant(0.5));
        assert!(matches!(draw(&spec), Err(SimulateError::MeanOutOfRange { .. })));
    }

    #[test]
    fn spec_validation() {
        let base = linear_spec(LinearPredictor::constant(0.0));
        let mut s = base.clone();
        s.n = 0;
        assert!(matches!(s.validate(), Err(SimulateError::InvalidSpec(_))));
        let mut s = base.clone();
        s.effect_modifier = "zz".into();
        assert!(matches!(s.validate(), Err(SimulateError::InvalidSpec(_))));
        let mut s = base.clone();
        s.participation = LinearPredictor::constant(-10.0);
        assert!(matches!(s.validate(), Err(SimulateError::InvalidSpec(_))));
        let mut s = base.clone();
        s.treated.predictor.coefficients.insert("w".into(), 1.0);
        assert!(matches!(s.validate(), Err(SimulateError::InvalidSpec(_))));
        let mut s = base;
        s.covariates[0].law = CovariateLaw::Uniform { low: 1.0, high: 1.0 };
        assert!(matches!(s.validate(), Err(SimulateError::InvalidSpec(_))));
    }

    fn discrete_spec() -> DgpSpec {
        DgpSpec {
            n: 100,
            covariates: vec![
                Covariate {
                    name: "m".into(),
                    law: CovariateLaw::Discrete { values: vec![0.0, 1.0, 2.0], probs: vec![0.2, 0.5, 0.3] },
                },
                Covariate { name: "w".into(), law: CovariateLaw::Bernoulli { p: 0.4 } },
                Covariate { name: "v".into(), law: CovariateLaw::Bernoulli { p: 0.7 } },
            ],
            participation: LinearPredictor::constant(-0.4).with("m", 0.6).with("w", -1.0).with("v", 0.5),
            treatment_probability: 0.4,
            treated: ArmMean::logit(LinearPredictor::constant(0.1).with("m", 0.5).with("w", 1.0)),
            control: ArmMean::logit(LinearPredictor::constant(-0.3).with("w", -0.7).with("v", 0.8)),
            family: OutcomeFamily::Bernoulli,
            effect_modifier: "m".into(),
            seed: 1,
        }
    }

    #[test]
    fn enumerated_pseudo_mean_is_the_cate() {
        let spec = discrete_spec();
        let world = DiscreteWorld::from_spec(&spec).unwrap();
        assert_eq!(world.points.len(), 12);
        let truth = world.true_cate();
        let exact = world.pseudo_mean(DiscreteWorld::true_nuisances);
        for ((l1, t), (l2, e)) in truth.iter().zip(&exact) {
            assert_eq!(l1, l2);
            assert!((t - e).abs() < 1e-10);
        }
        let levels: Vec<f64> = truth.iter().map(|t| t.0).collect();
        let quad = true_cate(&spec, &levels).unwrap();
        for (q, t) in quad.iter().zip(&truth) {
            assert!((q - t.1).abs() < 1e-12);
        }
    }

    #[test]
    fn enumerated_double_robustness() {
        let world = DiscreteWorld::from_spec(&discrete_spec()).unwrap();
        let truth = world.true_cate();
        let wrong_outcome = world.pseudo_mean(|pt| (pt.p, pt.e1, 0.5, 0.2));
        let wrong_participation = world.pseudo_mean(|pt| (0.5, pt.e1, pt.mu1, pt.mu0));
        let both_wrong = world.pseudo_mean(|pt| (0.5, pt.e1, 0.5, 0.2));
        for i in 0..truth.len() {
            assert!((wrong_outcome[i].1 - truth[i].1).abs() < 1e-10);
            assert!((wrong_participation[i].1 - truth[i].1).abs() < 1e-10);
        }
        assert!(truth.iter().zip(&both_wrong).any(|(t, b)| (t.1 - b.1).abs() > 1e-3));
    }

    #[test]
    fn continuous_law_is_not_enumerable() {
        let spec = linear_spec(LinearPredictor::constant(0.0));
        assert_eq!(DiscreteWorld::from_spec(&spec).unwrap_err(), SimulateError::NotEnumerable("x1".into()));
    }

    #[test]
    fn spec_from_toml() {
        let text = r#"
            n = 500
            effect_modifier = "x1"
            family = "gaussian"
            sigma = 0.5
            seed = 9
            [[covariates]]
            name = "x1"
            law = "uniform"
            low = 0.0
            high = 1.0
            [participation]
            intercept = -0.5
            coefficients = { x1 = 1.0 }
            [treated]
            intercept = 0.1
            coefficients = { x1 = 0.3 }
            [control]
            intercept = 0.25
        "#;
        let spec: DgpSpec = toml::from_str(text).unwrap();
        assert_eq!(spec.treatment_probability, 0.5);
        assert_eq!(spec.family, OutcomeFamily::Gaussian { sigma: 0.5 });
        assert_eq!(spec.treated.link, Link::Identity);
        let cate = true_cate(&spec, &[0.5]).unwrap();
        assert!((cate[0] - 0.0).abs() < 1e-12);
    }
}
