//! Interventionist certification of a local equation.
//!
//! An equation `G` explains the prediction `y = m(x)` when
//!
//! * (i) it is approximately true: its estimates match the model within ε at
//!   the explanandum, at every counterfactual and at fresh probes,
//! * (ii) it gives (approximately) `y` at `x` itself,
//! * (iii) some intervention moving `x` to `x'` changes the model output, and
//!   `G` both changes and tracks the new value within ε.
//!
//! Interventions are value settings of model inputs: every other feature is
//! held at its value in `x`. Inputs of `m` have no causes inside `m`, so
//! setting one cannot act on the output through any other route.

use serde::{Deserialize, Serialize};

use crate::counterfactual::{changes, CounterfactualInstance, FeatureChange};
use crate::error::{Error, Result};
use crate::model::BlackBoxModel;
use crate::schema::{FeatureKind, FeatureSchema, Observation, Value};
use crate::surrogate::CausalEquation;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Allowed gap between equation and model.
    pub epsilon: f64,
    /// Smallest output movement that counts as a change.
    pub epsilon_change: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            epsilon_change: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionSource {
    Counterfactual,
    Probe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestingInterventionResult {
    pub source: InterventionSource,
    /// Features set by the intervention; all others held at `x`.
    pub intervention: Vec<FeatureChange>,
    pub y_model_before: f64,
    pub y_model_after: f64,
    pub y_eq_before: f64,
    pub y_eq_after: f64,
    pub model_changed: bool,
    pub eq_changed: bool,
    pub eq_tracks: bool,
}

impl TestingInterventionResult {
    fn from_outputs(
        source: InterventionSource,
        intervention: Vec<FeatureChange>,
        outputs: [f64; 4],
        tol: &Tolerances,
    ) -> Self {
        let [y_model_before, y_model_after, y_eq_before, y_eq_after] = outputs;
        let mut r = Self {
            source,
            intervention,
            y_model_before,
            y_model_after,
            y_eq_before,
            y_eq_after,
            model_changed: false,
            eq_changed: false,
            eq_tracks: false,
        };
        r.reflag(tol);
        r
    }

    fn reflag(&mut self, tol: &Tolerances) {
        self.model_changed = (self.y_model_after - self.y_model_before).abs() > tol.epsilon_change;
        self.eq_changed = (self.y_eq_after - self.y_eq_before).abs() > tol.epsilon_change;
        self.eq_tracks = (self.y_eq_after - self.y_model_after).abs() <= tol.epsilon;
    }

    /// A testing intervention in the strict sense: the model moves, the
    /// equation moves, and the equation lands on the model's new value.
    pub fn supports_invariance(&self) -> bool {
        self.model_changed && self.eq_changed && self.eq_tracks
    }

    /// Re-applies the intervention to `x`.
    pub fn target(&self, schema: &FeatureSchema, x: &Observation) -> Result<Observation> {
        let overrides: Vec<(String, Value)> = self
            .intervention
            .iter()
            .map(|c| (c.feature.clone(), c.to.clone()))
            .collect();
        schema.apply_overrides(x, &overrides)
    }
}

fn intervene(
    eq: &CausalEquation,
    model: &BlackBoxModel,
    x: &Observation,
    after: &Observation,
    source: InterventionSource,
    tol: &Tolerances,
) -> Result<TestingInterventionResult> {
    let schema = model.schema();
    let outputs = [
        model.probability(x)?,
        model.probability(after)?,
        eq.evaluate(schema, x)?,
        eq.evaluate(schema, after)?,
    ];
    Ok(TestingInterventionResult::from_outputs(
        source,
        changes(schema, x, after),
        outputs,
        tol,
    ))
}

/// Sets `feature` to `to_value`, holds everything else at `x`, and compares
/// model and equation before and after. Immutable features may be probed.
pub fn testing_intervention(
    eq: &CausalEquation,
    model: &BlackBoxModel,
    x: &Observation,
    feature: &str,
    to_value: Value,
    tol: &Tolerances,
) -> Result<TestingInterventionResult> {
    let schema = model.schema();
    schema.validate(x)?;
    let i = schema.index_of(feature)?;
    schema.feature(i).check_value(&to_value)?;
    intervene(eq, model, x, &x.with(i, to_value), InterventionSource::Probe, tol)
}

/// `count` probe values for feature `i`: evenly spaced over a numeric range,
/// evenly spaced ranks for ordinals, every level for categoricals. The current
/// value is skipped.
pub fn probe_values(schema: &FeatureSchema, x: &Observation, i: usize, count: usize) -> Vec<Value> {
    let decl = schema.feature(i);
    let current = x.get(i);
    let mut values: Vec<Value> = match &decl.kind {
        FeatureKind::Categorical { levels } => levels.iter().map(|l| Value::Level(l.clone())).collect(),
        _ => {
            let (lo, hi) = decl.scalar_range().expect("scalar");
            let pts: Vec<f64> = if count <= 1 {
                vec![0.5 * (lo + hi)]
            } else {
                (0..count)
                    .map(|k| {
                        if k == count - 1 {
                            hi
                        } else {
                            lo + (hi - lo) * k as f64 / (count - 1) as f64
                        }
                    })
                    .collect()
            };
            pts.into_iter().map(|p| decl.from_scalar(p)).collect()
        }
    };
    values.dedup();
    values.retain(|v| v != current);
    values
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureInvariance {
    pub feature: String,
    pub supported: bool,
    pub probes: Vec<TestingInterventionResult>,
}

/// A feature supports invariance iff at least one probe is a testing
/// intervention the equation tracks.
pub fn invariance_check(
    eq: &CausalEquation,
    model: &BlackBoxModel,
    x: &Observation,
    features: &[String],
    probes_per_feature: usize,
    tol: &Tolerances,
) -> Result<Vec<FeatureInvariance>> {
    if probes_per_feature == 0 {
        return Err(Error::Config("probes_per_feature must be at least 1".into()));
    }
    let schema = model.schema();
    features
        .iter()
        .map(|name| {
            let i = schema.index_of(name)?;
            let probes = probe_values(schema, x, i, probes_per_feature)
                .into_iter()
                .map(|v| intervene(eq, model, x, &x.with(i, v), InterventionSource::Probe, tol))
                .collect::<Result<Vec<_>>>()?;
            Ok(FeatureInvariance {
                feature: name.clone(),
                supported: probes.iter().any(TestingInterventionResult::supports_invariance),
                probes,
            })
        })
        .collect()
}

/// Features whose change alone, with all others held at `x`, moves the model
/// output by more than `epsilon_change` at some probe. Schema order.
pub fn direct_causes(
    model: &BlackBoxModel,
    x: &Observation,
    schema: &FeatureSchema,
    probes: usize,
    epsilon_change: f64,
) -> Result<Vec<String>> {
    if probes < 2 {
        return Err(Error::Config("direct-cause detection needs at least 2 probes".into()));
    }
    let base = model.probability(x)?;
    let mut out = Vec::new();
    for (i, decl) in schema.features().iter().enumerate() {
        for v in probe_values(schema, x, i, probes) {
            if (model.probability(&x.with(i, v))? - base).abs() > epsilon_change {
                out.push(decl.name.clone());
                break;
            }
        }
    }
    Ok(out)
}

/// `|G(x') - m(x')|`.
pub fn fidelity_error(eq: &CausalEquation, model: &BlackBoxModel, x_cf: &Observation) -> Result<f64> {
    let estimate = eq.evaluate(model.schema(), x_cf)?;
    let actual = model.probability(x_cf)?;
    Ok((estimate - actual).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointRole {
    Explanandum,
    Counterfactual,
    Probe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCheck {
    pub role: PointRole,
    pub y_model: f64,
    pub y_eq: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproximateTruth {
    pub holds: bool,
    pub max_error: f64,
    pub checks: Vec<PointCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanandumFit {
    pub holds: bool,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionWitness {
    pub holds: bool,
    pub witness: Option<TestingInterventionResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WoodwardCertificate {
    pub passes: bool,
    pub tolerances: Tolerances,
    pub condition_i: ApproximateTruth,
    pub condition_ii: ExplanandumFit,
    pub condition_iii: InterventionWitness,
    /// Every intervention evaluated: counterfactuals first, then probes in
    /// schema order.
    pub interventions: Vec<TestingInterventionResult>,
    pub invariant_features: Vec<String>,
    pub direct_causes: Vec<String>,
}

impl WoodwardCertificate {
    /// Re-evaluates all three conditions from the recorded outputs at a new
    /// ε. No model or equation queries are made.
    pub fn recertify(&self, epsilon: f64) -> Self {
        let tolerances = Tolerances {
            epsilon,
            ..self.tolerances
        };
        let mut interventions = self.interventions.clone();
        for r in &mut interventions {
            r.reflag(&tolerances);
        }
        let mut invariant_features: Vec<String> = Vec::new();
        for r in interventions.iter().filter(|r| r.source == InterventionSource::Probe) {
            if r.supports_invariance() {
                if let Some(c) = r.intervention.first() {
                    if !invariant_features.contains(&c.feature) {
                        invariant_features.push(c.feature.clone());
                    }
                }
            }
        }
        // Keep the original feature order.
        let order: Vec<String> = self
            .interventions
            .iter()
            .filter(|r| r.source == InterventionSource::Probe)
            .filter_map(|r| r.intervention.first().map(|c| c.feature.clone()))
            .collect();
        invariant_features.sort_by_key(|f| order.iter().position(|o| o == f));
        assemble(
            self.condition_i.checks.clone(),
            self.condition_ii.error,
            interventions,
            invariant_features,
            self.direct_causes.clone(),
            tolerances,
        )
    }
}

fn assemble(
    checks: Vec<PointCheck>,
    explanandum_error: f64,
    interventions: Vec<TestingInterventionResult>,
    invariant_features: Vec<String>,
    direct_causes: Vec<String>,
    tolerances: Tolerances,
) -> WoodwardCertificate {
    let max_error = checks.iter().map(|c| c.error).fold(0.0, f64::max);
    let condition_i = ApproximateTruth {
        holds: max_error <= tolerances.epsilon,
        max_error,
        checks,
    };
    let condition_ii = ExplanandumFit {
        holds: explanandum_error <= tolerances.epsilon,
        error: explanandum_error,
    };
    let witness = interventions.iter().find(|r| r.supports_invariance()).cloned();
    let condition_iii = InterventionWitness {
        holds: witness.is_some(),
        witness,
    };
    WoodwardCertificate {
        passes: condition_i.holds && condition_ii.holds && condition_iii.holds,
        tolerances,
        condition_i,
        condition_ii,
        condition_iii,
        interventions,
        invariant_features,
        direct_causes,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertifyOptions {
    pub tolerances: Tolerances,
    pub invariance_probes: usize,
    pub direct_cause_probes: usize,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self {
            tolerances: Tolerances::default(),
            invariance_probes: 8,
            direct_cause_probes: 64,
        }
    }
}

/// Checks conditions (i)-(iii) for `eq` as an explanation of `m(x)`.
/// `probes` are fresh out-of-fit points used for condition (i).
pub fn certify(
    eq: &CausalEquation,
    model: &BlackBoxModel,
    x: &Observation,
    cfs: &[CounterfactualInstance],
    probes: &[Observation],
    options: &CertifyOptions,
) -> Result<WoodwardCertificate> {
    let schema = model.schema();
    let tol = options.tolerances;
    let point = |role: PointRole, p: &Observation| -> Result<PointCheck> {
        let y_model = model.probability(p)?;
        let y_eq = eq.evaluate(schema, p)?;
        Ok(PointCheck {
            role,
            y_model,
            y_eq,
            error: (y_eq - y_model).abs(),
        })
    };
    let mut checks = vec![point(PointRole::Explanandum, x)?];
    for cf in cfs {
        checks.push(point(PointRole::Counterfactual, &cf.x_cf)?);
    }
    for p in probes {
        checks.push(point(PointRole::Probe, p)?);
    }
    let explanandum_error = checks[0].error;

    let mut interventions = Vec::new();
    for cf in cfs {
        interventions.push(intervene(eq, model, x, &cf.x_cf, InterventionSource::Counterfactual, &tol)?);
    }
    let all: Vec<String> = schema.features().iter().map(|f| f.name.clone()).collect();
    let invariance = invariance_check(eq, model, x, &all, options.invariance_probes, &tol)?;
    let invariant_features = invariance
        .iter()
        .filter(|f| f.supported)
        .map(|f| f.feature.clone())
        .collect();
    interventions.extend(invariance.into_iter().flat_map(|f| f.probes));
    let causes = direct_causes(model, x, schema, options.direct_cause_probes, tol.epsilon_change)?;
    Ok(assemble(checks, explanandum_error, interventions, invariant_features, causes, tol))
}
