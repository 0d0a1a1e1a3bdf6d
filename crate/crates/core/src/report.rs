//! The explanation document: its fields, canonical serialization, and the
//! three text renderings.
//!
//! The canonical form is pretty-printed JSON with keys in declaration order
//! and floats in shortest round-trip decimal, so equal reports serialize to
//! identical bytes and parsing then re-serializing is a fixed point.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::counterfactual::CounterfactualInstance;
use crate::error::{Error, Result};
use crate::explain::EngineConfig;
use crate::model::{BlackBoxModel, Prediction};
use crate::schema::{FeatureSchema, Observation};
use crate::surrogate::CausalEquation;
use crate::woodward::{InterventionSource, TestingInterventionResult, WoodwardCertificate};

pub const ENGINE_NAME: &str = "causex";
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

const EMPTY_COUNTERFACTUALS: &str = "none found within constraints";
const BAR_WIDTH: usize = 24;
const TOP_FEATURES: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineInfo {
    pub name: String,
    pub version: String,
}

impl EngineInfo {
    pub fn current() -> Self {
        Self {
            name: ENGINE_NAME.to_string(),
            version: ENGINE_VERSION.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualRecord {
    #[serde(flatten)]
    pub instance: CounterfactualInstance,
    pub label: String,
    pub y_estimate: f64,
    pub fidelity_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelitySummary {
    pub max: f64,
    pub mean: f64,
    pub count: usize,
}

impl FidelitySummary {
    pub fn of(records: &[CounterfactualRecord]) -> Self {
        let count = records.len();
        let errors = records.iter().map(|r| r.fidelity_error);
        Self {
            max: errors.clone().fold(0.0, f64::max),
            mean: if count == 0 { 0.0 } else { errors.sum::<f64>() / count as f64 },
            count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureWeight {
    pub feature: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighbourhoodStats {
    pub samples: usize,
    pub seed: u64,
    pub kernel_width: f64,
    pub positive: usize,
    pub negative: usize,
    pub extra_batches: usize,
    pub balanced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchStats {
    pub queries: usize,
    pub budget: usize,
    pub budget_exhausted: bool,
}

/// Everything produced for one prediction. Observations are arrays in schema
/// order; the schema travels with the document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub engine: EngineInfo,
    pub model: String,
    pub schema: FeatureSchema,
    pub observation: Observation,
    pub prediction: Prediction,
    pub equation: CausalEquation,
    pub equation_text: String,
    pub counterfactuals: Vec<CounterfactualRecord>,
    pub fidelity_summary: FidelitySummary,
    pub certificate: WoodwardCertificate,
    /// Schema order; rendering sorts by weight.
    pub feature_weights: Vec<FeatureWeight>,
    pub neighbourhood: NeighbourhoodStats,
    pub search: SearchStats,
    pub flags: Vec<String>,
    pub config: EngineConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Customer,
    Analyst,
    Scientist,
}

impl std::str::FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "customer" => Ok(Level::Customer),
            "analyst" => Ok(Level::Analyst),
            "scientist" => Ok(Level::Scientist),
            other => Err(Error::Config(format!("unknown level `{other}`"))),
        }
    }
}

impl ExplanationReport {
    /// Checks every stored relation recomputable from the document alone.
    pub fn verify_internal(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Inconsistent(m));
        for (k, r) in self.counterfactuals.iter().enumerate() {
            let est = self.equation.evaluate(&self.schema, &r.instance.x_cf)?;
            if est != r.y_estimate {
                return fail(format!("counterfactual {k}: stored estimate {} but equation gives {est}", r.y_estimate));
            }
            if r.fidelity_error != (r.y_estimate - r.instance.y_actual).abs() {
                return fail(format!("counterfactual {k}: fidelity error does not match its outputs"));
            }
        }
        let summary = FidelitySummary::of(&self.counterfactuals);
        if summary.count != self.fidelity_summary.count
            || summary.max != self.fidelity_summary.max
            || (summary.mean - self.fidelity_summary.mean).abs() > 1e-12
        {
            return fail("fidelity summary does not match the counterfactual list".into());
        }
        if self.feature_weights.iter().any(|w| self.schema.index_of(&w.feature).is_err()) {
            return fail("feature weight for a feature outside the schema".into());
        }
        Ok(())
    }

    /// [`verify_internal`](Self::verify_internal) plus fresh model calls at
    /// every counterfactual.
    pub fn verify_against(&self, model: &BlackBoxModel) -> Result<()> {
        self.verify_internal()?;
        for (k, r) in self.counterfactuals.iter().enumerate() {
            let actual = model.probability(&r.instance.x_cf)?;
            if actual != r.instance.y_actual {
                return Err(Error::Inconsistent(format!(
                    "counterfactual {k}: stored model output {} but model gives {actual}",
                    r.instance.y_actual
                )));
            }
        }
        Ok(())
    }

    pub fn to_canonical(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports contain only finite numbers");
        s.push('\n');
        s
    }

    pub fn from_canonical(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn render(&self, level: Level) -> String {
        let mut out = String::new();
        self.render_prediction(&mut out);
        self.render_weights(&mut out);
        self.render_counterfactuals(&mut out);
        if level != Level::Customer {
            self.render_equation(&mut out);
            self.render_fidelity(&mut out);
        }
        if level == Level::Scientist {
            self.render_certificate(&mut out);
            self.render_config(&mut out);
        }
        out
    }

    fn render_prediction(&self, out: &mut String) {
        let _ = writeln!(
            out,
            "Prediction: {} = {} (probability {:.4}, threshold {})",
            self.schema.target_name(),
            self.prediction.label,
            self.prediction.probability,
            self.schema.threshold()
        );
        let shown: Vec<String> = self
            .schema
            .features()
            .iter()
            .zip(self.observation.values())
            .map(|(f, v)| format!("{} = {v}", f.name))
            .collect();
        let _ = writeln!(out, "Observation: {}", shown.join(", "));
        for flag in &self.flags {
            let _ = writeln!(out, "Warning: {flag}");
        }
    }

    fn render_weights(&self, out: &mut String) {
        let mut weights: Vec<&FeatureWeight> = self.feature_weights.iter().collect();
        // Stable: equal weights keep schema order.
        weights.sort_by(|a, b| b.weight.total_cmp(&a.weight));
        weights.truncate(TOP_FEATURES);
        let top = weights.first().map_or(0.0, |w| w.weight);
        let pad = weights.iter().map(|w| w.feature.len()).max().unwrap_or(0);
        let _ = writeln!(out, "\nMost important features");
        for w in weights {
            let len = if top > 0.0 {
                (w.weight / top * BAR_WIDTH as f64).round() as usize
            } else {
                0
            };
            let _ = writeln!(out, "  {:<pad$}  {:<BAR_WIDTH$}  {:.4}", w.feature, "#".repeat(len), w.weight);
        }
    }

    fn render_counterfactuals(&self, out: &mut String) {
        let _ = writeln!(out, "\nCounterfactuals");
        if self.counterfactuals.is_empty() {
            let _ = writeln!(out, "  {EMPTY_COUNTERFACTUALS}");
            return;
        }
        for (k, r) in self.counterfactuals.iter().enumerate() {
            let names: Vec<&str> = r.instance.delta.iter().map(|c| c.feature.as_str()).collect();
            let values: Vec<String> = r.instance.delta.iter().map(|c| c.to.to_string()).collect();
            let (noun, value_text) = if values.len() == 1 {
                ("value", values[0].clone())
            } else {
                ("values", format!("({})", values.join(", ")))
            };
            let _ = writeln!(
                out,
                "  {}. If {} instead had {noun} {value_text}, and all other features remained constant, \
                 the outcome would have been {} (probability {:.4}). Cost {:.4}.",
                k + 1,
                names.join(", "),
                r.label,
                r.instance.y_actual,
                r.instance.cost
            );
        }
    }

    fn render_equation(&self, out: &mut String) {
        let _ = writeln!(out, "\nLocal causal equation");
        let _ = writeln!(out, "  {}", self.equation_text);
        let _ = writeln!(
            out,
            "  training R^2 {:.6}, {} rows, validity radius {:.4}, ridge {:e}",
            self.equation.training_r2, self.equation.rows, self.equation.validity_radius, self.equation.ridge
        );
    }

    fn render_fidelity(&self, out: &mut String) {
        let _ = writeln!(out, "\nFidelity");
        if self.counterfactuals.is_empty() {
            let _ = writeln!(out, "  {EMPTY_COUNTERFACTUALS}");
        } else {
            let _ = writeln!(out, "  #  actual  estimate  error");
            for (k, r) in self.counterfactuals.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "  {}  {}  {}  {}",
                    k + 1,
                    r.instance.y_actual,
                    r.y_estimate,
                    r.fidelity_error
                );
            }
        }
        let s = &self.fidelity_summary;
        let _ = writeln!(out, "  max {}, mean {}, count {}", s.max, s.mean, s.count);
    }

    fn render_certificate(&self, out: &mut String) {
        let c = &self.certificate;
        let verdict = if c.passes { "PASS" } else { "FAIL" };
        let _ = writeln!(
            out,
            "\nCertificate: {verdict} (epsilon {}, epsilon_change {})",
            c.tolerances.epsilon, c.tolerances.epsilon_change
        );
        let mark = |b: bool| if b { "holds" } else { "fails" };
        let _ = writeln!(
            out,
            "  (i) approximate truth: {} (max error {} over {} points)",
            mark(c.condition_i.holds),
            c.condition_i.max_error,
            c.condition_i.checks.len()
        );
        let _ = writeln!(
            out,
            "  (ii) explanandum: {} (error {})",
            mark(c.condition_ii.holds),
            c.condition_ii.error
        );
        let _ = writeln!(out, "  (iii) testing intervention: {}", mark(c.condition_iii.holds));
        if let Some(w) = &c.condition_iii.witness {
            let _ = writeln!(out, "    witness: {}", describe_intervention(w));
        }
        let list = |v: &[String]| if v.is_empty() { "(none)".to_string() } else { v.join(", ") };
        let _ = writeln!(out, "  invariant under intervention: {}", list(&c.invariant_features));
        let _ = writeln!(out, "  direct causes: {}", list(&c.direct_causes));
    }

    fn render_config(&self, out: &mut String) {
        let _ = writeln!(out, "\nConfiguration (engine {} {})", self.engine.name, self.engine.version);
        let text = serde_json::to_string_pretty(&self.config).expect("finite config");
        for line in text.lines() {
            let _ = writeln!(out, "  {line}");
        }
    }
}

fn describe_intervention(r: &TestingInterventionResult) -> String {
    let set: Vec<String> = r
        .intervention
        .iter()
        .map(|c| format!("{} {} -> {}", c.feature, c.from, c.to))
        .collect();
    let source = match r.source {
        InterventionSource::Counterfactual => "counterfactual",
        InterventionSource::Probe => "probe",
    };
    format!(
        "{source} [{}]: model {} -> {}, equation {} -> {}",
        set.join("; "),
        r.y_model_before,
        r.y_model_after,
        r.y_eq_before,
        r.y_eq_after
    )
}
