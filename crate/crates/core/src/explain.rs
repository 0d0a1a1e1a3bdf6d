//! The full pipeline: sample, search counterfactuals, fit, certify, assemble.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::counterfactual::{search_counterfactuals_with, CostConfig, CostMetric, SearchLimits};
use crate::error::{Error, Result};
use crate::model::BlackBoxModel;
use crate::report::{
    CounterfactualRecord, EngineInfo, ExplanationReport, FeatureWeight, FidelitySummary, NeighbourhoodStats,
    SearchStats,
};
use crate::sampling::{fit_distributions, generate_neighbourhood, perturb, MIN_SAMPLES};
use crate::schema::{Dataset, FeatureKind, Observation};
use crate::surrogate::{build_terms, fit_equation_weighted, stepwise_select, Link, Term, TermOptions};
use crate::woodward::{certify, CertifyOptions, Tolerances};

/// Offset mixed into the seed for the out-of-fit probes used by condition (i).
const PROBE_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

pub const FLAG_UNBALANCED: &str = "neighbourhood_unbalanced";
pub const FLAG_BUDGET: &str = "search_budget_exhausted";
pub const FLAG_CLAMPED: &str = "estimate_clamped";
pub const FLAG_STEPWISE: &str = "stepwise_selection";
pub const FLAG_NONDETERMINISTIC: &str = "model_nondeterministic";
pub const FLAG_OUTSIDE_RADIUS: &str = "counterfactual_outside_validity_radius";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub n_samples: usize,
    pub seed: u64,
    pub kernel_width: f64,
    pub metric: CostMetric,
    pub sparsity_cap: usize,
    pub plausibility_floor: f64,
    pub terms: TermOptions,
    pub link: Link,
    pub ridge: f64,
    /// Above this many candidate terms, forward stepwise selection picks the
    /// subset.
    pub max_terms: usize,
    pub epsilon: f64,
    pub epsilon_change: f64,
    pub budget: usize,
    pub max_counterfactuals: usize,
    pub line_search_tol: f64,
    /// Weight of counterfactual rows in the fit; `None` uses the largest
    /// neighbourhood weight.
    pub counterfactual_weight: Option<f64>,
    pub certify_probes: usize,
    pub invariance_probes: usize,
    pub direct_cause_probes: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            seed: 0,
            kernel_width: 1.0,
            metric: CostMetric::L1Mad,
            sparsity_cap: 2,
            plausibility_floor: 0.999,
            terms: TermOptions::default(),
            link: Link::Logit,
            ridge: crate::surrogate::DEFAULT_RIDGE,
            max_terms: 32,
            epsilon: 0.05,
            epsilon_change: 1e-4,
            budget: 10_000,
            max_counterfactuals: 8,
            line_search_tol: 1e-6,
            counterfactual_weight: None,
            certify_probes: 32,
            invariance_probes: 8,
            direct_cause_probes: 64,
        }
    }
}

impl EngineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies a JSON object of field overrides on top of `self`.
    pub fn with_overrides(&self, overrides: &serde_json::Value) -> Result<Self> {
        let mut merged = serde_json::to_value(self)?;
        match (merged.as_object_mut(), overrides) {
            (Some(base), serde_json::Value::Object(o)) => {
                for (k, v) in o {
                    base.insert(k.clone(), v.clone());
                }
            }
            (_, serde_json::Value::Null) => {}
            _ => return Err(Error::Config("config overrides must be a JSON object".into())),
        }
        let cfg: Self = serde_json::from_value(merged)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_samples < MIN_SAMPLES {
            return bad(format!("n_samples must be at least {MIN_SAMPLES}"));
        }
        if !(self.kernel_width > 0.0 && self.kernel_width.is_finite()) {
            return bad("kernel_width must be positive".into());
        }
        if self.sparsity_cap == 0 {
            return bad("sparsity_cap must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.plausibility_floor) {
            return bad("plausibility_floor must lie in [0, 1]".into());
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return bad("ridge must be non-negative".into());
        }
        if self.max_terms == 0 {
            return bad("max_terms must be at least 1".into());
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) || !(self.epsilon_change >= 0.0) {
            return bad("tolerances must be non-negative".into());
        }
        if self.budget < 1000 {
            return bad("budget must be at least 1000".into());
        }
        if self.max_counterfactuals == 0 {
            return bad("max_counterfactuals must be at least 1".into());
        }
        if !(self.line_search_tol > 0.0 && self.line_search_tol < 1.0) {
            return bad("line_search_tol must lie in (0, 1)".into());
        }
        if let Some(w) = self.counterfactual_weight {
            if !(w >= 0.0 && w.is_finite()) {
                return bad("counterfactual_weight must be non-negative".into());
            }
        }
        if self.invariance_probes == 0 || self.direct_cause_probes < 2 {
            return bad("need at least 1 invariance probe and 2 direct-cause probes".into());
        }
        Ok(())
    }

    pub fn tolerances(&self) -> Tolerances {
        Tolerances {
            epsilon: self.epsilon,
            epsilon_change: self.epsilon_change,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Input,
    Distributions,
    Sampling,
    Counterfactuals,
    Surrogate,
    Certification,
    Consistency,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Config => "config",
            Stage::Input => "input",
            Stage::Distributions => "distributions",
            Stage::Sampling => "sampling",
            Stage::Counterfactuals => "counterfactual search",
            Stage::Surrogate => "surrogate fit",
            Stage::Certification => "certification",
            Stage::Consistency => "consistency check",
        };
        f.write_str(s)
    }
}

/// A module error tagged with the pipeline stage it came from.
#[derive(Debug, thiserror::Error)]
#[error("{stage}: {source}")]
pub struct ExplainError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, ExplainError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, ExplainError> {
        self.map_err(|source| ExplainError { stage, source })
    }
}

/// `|coefficient| * MAD` for linear terms; the largest indicator magnitude for
/// categoricals. Features without a first-order term get 0.
fn feature_weights(
    schema: &crate::schema::FeatureSchema,
    eq: &crate::surrogate::CausalEquation,
    mads: &[f64],
) -> Vec<FeatureWeight> {
    schema
        .features()
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let weight = match &f.kind {
                FeatureKind::Categorical { .. } => eq
                    .terms
                    .iter()
                    .zip(&eq.coefficients)
                    .filter(|(t, _)| matches!(t, Term::Indicator { feature, .. } if *feature == f.name))
                    .map(|(_, c)| c.abs())
                    .fold(0.0, f64::max),
                _ => eq
                    .coefficient(&Term::Linear { feature: f.name.clone() })
                    .map_or(0.0, |c| c.abs() * mads[i]),
            };
            FeatureWeight {
                feature: f.name.clone(),
                weight,
            }
        })
        .collect()
}

/// Explains `model(x)`. Deterministic in its four arguments for a
/// deterministic model.
pub fn explain(
    model: &BlackBoxModel,
    data: &Dataset,
    x: &Observation,
    cfg: &EngineConfig,
) -> std::result::Result<ExplanationReport, ExplainError> {
    cfg.validate().at(Stage::Config)?;
    let schema = model.schema();
    if data.schema().as_ref() != schema.as_ref() {
        return Err(Error::Config("dataset and model use different schemas".into())).at(Stage::Input);
    }
    schema.validate(x).at(Stage::Input)?;
    let prediction = model.predict(x).at(Stage::Input)?;
    let mut flags = Vec::new();
    if !model.is_deterministic() && model.probability(x).at(Stage::Input)? != prediction.probability {
        flags.push(FLAG_NONDETERMINISTIC.to_string());
    }

    let dists = fit_distributions(data, schema).at(Stage::Distributions)?;
    let nbhd = generate_neighbourhood(model, x, &dists, cfg.n_samples, cfg.seed, cfg.kernel_width)
        .at(Stage::Sampling)?;
    if !nbhd.balance.balanced {
        flags.push(FLAG_UNBALANCED.to_string());
    }

    let cost = CostConfig::new(cfg.metric, dists.mads().to_vec(), cfg.sparsity_cap, cfg.plausibility_floor)
        .at(Stage::Counterfactuals)?;
    let limits = SearchLimits {
        budget: cfg.budget,
        max_results: cfg.max_counterfactuals,
        relative_tol: cfg.line_search_tol,
    };
    let search = search_counterfactuals_with(model, x, &cost, &dists, &limits).at(Stage::Counterfactuals)?;
    if search.budget_exhausted {
        flags.push(FLAG_BUDGET.to_string());
    }

    let candidates = build_terms(schema, &cfg.terms);
    let terms = if candidates.len() > cfg.max_terms {
        flags.push(FLAG_STEPWISE.to_string());
        stepwise_select(schema, &nbhd, &search.instances, &candidates, cfg.max_terms, cfg.link, cfg.ridge)
            .at(Stage::Surrogate)?
    } else {
        candidates
    };
    let cf_weight = cfg.counterfactual_weight.unwrap_or_else(|| nbhd.max_weight());
    let equation = fit_equation_weighted(schema, &nbhd, &search.instances, &terms, cfg.link, cfg.ridge, cf_weight)
        .at(Stage::Surrogate)?;

    let mut counterfactuals = Vec::with_capacity(search.instances.len());
    let mut clamped = false;
    let mut outside = false;
    for cf in &search.instances {
        let est = equation.evaluate_detailed(schema, &cf.x_cf).at(Stage::Surrogate)?;
        clamped |= est.clamped;
        outside |= equation.distance_from_center(schema, &cf.x_cf) > equation.validity_radius;
        counterfactuals.push(CounterfactualRecord {
            label: model.label(crate::model::class_of(cf.y_actual, schema.threshold())).to_string(),
            instance: cf.clone(),
            y_estimate: est.value,
            fidelity_error: (est.value - cf.y_actual).abs(),
        });
    }
    clamped |= equation.evaluate_detailed(schema, x).at(Stage::Surrogate)?.clamped;
    if clamped {
        flags.push(FLAG_CLAMPED.to_string());
    }
    if outside {
        flags.push(FLAG_OUTSIDE_RADIUS.to_string());
    }

    let probes = perturb(schema, x, &dists, cfg.certify_probes, cfg.seed.wrapping_add(PROBE_SEED_OFFSET));
    let options = CertifyOptions {
        tolerances: cfg.tolerances(),
        invariance_probes: cfg.invariance_probes,
        direct_cause_probes: cfg.direct_cause_probes,
    };
    let certificate =
        certify(&equation, model, x, &search.instances, &probes, &options).at(Stage::Certification)?;

    let report = ExplanationReport {
        engine: EngineInfo::current(),
        model: model.id().to_string(),
        schema: schema.as_ref().clone(),
        observation: x.clone(),
        prediction,
        equation_text: equation.render(),
        feature_weights: feature_weights(schema, &equation, dists.mads()),
        equation,
        fidelity_summary: FidelitySummary::of(&counterfactuals),
        counterfactuals,
        certificate,
        neighbourhood: NeighbourhoodStats {
            samples: nbhd.len(),
            seed: nbhd.seed,
            kernel_width: nbhd.kernel_width,
            positive: nbhd.balance.positive,
            negative: nbhd.balance.negative,
            extra_batches: nbhd.balance.extra_batches,
            balanced: nbhd.balance.balanced,
        },
        search: SearchStats {
            queries: search.queries,
            budget: cfg.budget,
            budget_exhausted: search.budget_exhausted,
        },
        flags,
        config: cfg.clone(),
    };
    if model.is_deterministic() {
        report.verify_against(model).at(Stage::Consistency)?;
    } else {
        report.verify_internal().at(Stage::Consistency)?;
    }
    Ok(report)
}
