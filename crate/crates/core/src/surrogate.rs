//! The local causal equation: a kernel-weighted ridge regression of the
//! model's output on the features, fitted on the synthetic neighbourhood with
//! the counterfactual instances appended.
//!
//! The penalty covers every term except the intercept, which is the usual
//! centered-ridge form: shifting a feature's origin changes only the
//! intercept.

use serde::{Deserialize, Serialize};

use crate::counterfactual::{scaled_distance, CounterfactualInstance};
use crate::error::{Error, Result};
use crate::linalg::{normal_equations, solve_spd};
use crate::model::sigmoid;
use crate::sampling::Neighbourhood;
use crate::schema::{FeatureKind, FeatureSchema, Observation, Value};

/// Target clamp used before taking the logit of a probability.
pub const LOGIT_EPSILON: f64 = 1e-6;
pub const DEFAULT_RIDGE: f64 = 1e-6;
/// Times the ridge is raised (x10 each) before a fit is declared singular.
const RIDGE_RETRIES: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Term {
    Intercept,
    Linear { feature: String },
    Quadratic { feature: String },
    Interaction { a: String, b: String },
    Indicator { feature: String, level: String },
}

impl Term {
    fn linear(f: &str) -> Self {
        Term::Linear { feature: f.to_string() }
    }

    /// Human-readable rendering used in equation strings.
    pub fn label(&self) -> String {
        match self {
            Term::Intercept => "1".to_string(),
            Term::Linear { feature } => feature.clone(),
            Term::Quadratic { feature } => format!("{feature}^2"),
            Term::Interaction { a, b } => format!("{a}*{b}"),
            Term::Indicator { feature, level } => format!("[{feature}={level}]"),
        }
    }

    /// Features this term reads.
    pub fn features(&self) -> Vec<&str> {
        match self {
            Term::Intercept => vec![],
            Term::Linear { feature } | Term::Quadratic { feature } | Term::Indicator { feature, .. } => {
                vec![feature.as_str()]
            }
            Term::Interaction { a, b } => vec![a.as_str(), b.as_str()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TermOptions {
    /// Squares of numeric features.
    #[serde(default)]
    pub quadratic: bool,
    /// Pairwise products of numeric and ordinal features.
    #[serde(default)]
    pub interactions: bool,
}

/// Intercept, then one linear term per encoded column in schema order
/// (indicators for categorical levels), then quadratics, then interactions in
/// lexicographic pair order.
pub fn build_terms(schema: &FeatureSchema, options: &TermOptions) -> Vec<Term> {
    let mut terms = vec![Term::Intercept];
    for f in schema.features() {
        match &f.kind {
            FeatureKind::Categorical { levels } => terms.extend(levels.iter().map(|l| Term::Indicator {
                feature: f.name.clone(),
                level: l.clone(),
            })),
            _ => terms.push(Term::linear(&f.name)),
        }
    }
    if options.quadratic {
        terms.extend(
            schema
                .features()
                .iter()
                .filter(|f| f.is_numeric())
                .map(|f| Term::Quadratic { feature: f.name.clone() }),
        );
    }
    if options.interactions {
        let scalar: Vec<&str> = schema
            .features()
            .iter()
            .filter(|f| !f.is_categorical())
            .map(|f| f.name.as_str())
            .collect();
        for (i, a) in scalar.iter().enumerate() {
            for b in &scalar[i + 1..] {
                terms.push(Term::Interaction {
                    a: a.to_string(),
                    b: b.to_string(),
                });
            }
        }
    }
    terms
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Identity,
    Logit,
}

impl Link {
    fn forward(self, y: f64) -> f64 {
        match self {
            Link::Identity => y,
            Link::Logit => {
                let p = y.clamp(LOGIT_EPSILON, 1.0 - LOGIT_EPSILON);
                (p / (1.0 - p)).ln()
            }
        }
    }

    fn inverse(self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Logit => sigmoid(eta),
        }
    }
}

/// A term resolved against a schema.
#[derive(Debug, Clone)]
enum Resolved {
    Intercept,
    Scalar(usize),
    Square(usize),
    Product(usize, usize),
    Level(usize, String),
}

fn resolve(schema: &FeatureSchema, term: &Term) -> Result<Resolved> {
    let scalar = |name: &str| -> Result<usize> {
        let i = schema.index_of(name)?;
        if schema.feature(i).is_categorical() {
            return Err(Error::validation(name, "categorical features enter through indicator terms"));
        }
        Ok(i)
    };
    Ok(match term {
        Term::Intercept => Resolved::Intercept,
        Term::Linear { feature } => Resolved::Scalar(scalar(feature)?),
        Term::Quadratic { feature } => Resolved::Square(scalar(feature)?),
        Term::Interaction { a, b } => {
            if a == b {
                return Err(Error::validation(a, "interaction needs two distinct features"));
            }
            Resolved::Product(scalar(a)?, scalar(b)?)
        }
        Term::Indicator { feature, level } => {
            let i = schema.index_of(feature)?;
            match &schema.feature(i).kind {
                FeatureKind::Categorical { levels } if levels.contains(level) => Resolved::Level(i, level.clone()),
                _ => return Err(Error::validation(feature, format!("no categorical level `{level}`"))),
            }
        }
    })
}

fn term_value(schema: &FeatureSchema, r: &Resolved, x: &Observation) -> f64 {
    let s = |i: usize| schema.feature(i).scalar(x.get(i)).expect("validated scalar");
    match r {
        Resolved::Intercept => 1.0,
        Resolved::Scalar(i) => s(*i),
        Resolved::Square(i) => s(*i).powi(2),
        Resolved::Product(i, j) => s(*i) * s(*j),
        Resolved::Level(i, level) => match x.get(*i) {
            Value::Level(l) if l == level => 1.0,
            _ => 0.0,
        },
    }
}

fn design_row(schema: &FeatureSchema, resolved: &[Resolved], x: &Observation) -> Vec<f64> {
    resolved.iter().map(|r| term_value(schema, r, x)).collect()
}

/// Output of the equation at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    /// The identity-link value fell outside [0, 1] and was clamped.
    pub clamped: bool,
}

/// The local generalisation `G`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalEquation {
    pub terms: Vec<Term>,
    pub coefficients: Vec<f64>,
    pub link: Link,
    pub center: Observation,
    /// Distance from the center (MAD units) inside which the fit applies.
    pub validity_radius: f64,
    pub training_r2: f64,
    /// Number of design rows: neighbourhood samples plus counterfactuals.
    pub rows: usize,
    /// Per-feature MAD scales for distances from the center.
    pub scales: Vec<f64>,
    pub ridge: f64,
}

impl CausalEquation {
    /// Linear predictor before the inverse link.
    pub fn linear_predictor(&self, schema: &FeatureSchema, x: &Observation) -> Result<f64> {
        schema.validate(x)?;
        let mut eta = 0.0;
        for (t, c) in self.terms.iter().zip(&self.coefficients) {
            eta += c * term_value(schema, &resolve(schema, t)?, x);
        }
        Ok(eta)
    }

    pub fn evaluate_detailed(&self, schema: &FeatureSchema, x: &Observation) -> Result<Estimate> {
        let p = self.link.inverse(self.linear_predictor(schema, x)?);
        let value = p.clamp(0.0, 1.0);
        Ok(Estimate {
            value,
            clamped: value != p,
        })
    }

    /// Estimated probability at `x`.
    pub fn evaluate(&self, schema: &FeatureSchema, x: &Observation) -> Result<f64> {
        Ok(self.evaluate_detailed(schema, x)?.value)
    }

    pub fn distance_from_center(&self, schema: &FeatureSchema, x: &Observation) -> f64 {
        scaled_distance(schema, &self.scales, &self.center, x)
    }

    pub fn coefficient(&self, term: &Term) -> Option<f64> {
        self.terms.iter().position(|t| t == term).map(|i| self.coefficients[i])
    }

    /// `y = 0.25 + 1.5*income - ...`, wrapped in `logistic(...)` for the logit link.
    pub fn render(&self) -> String {
        let mut body = String::new();
        for (i, (t, c)) in self.terms.iter().zip(&self.coefficients).enumerate() {
            let mag = format!("{:.6}", c.abs());
            let piece = match t {
                Term::Intercept => mag,
                _ => format!("{mag}*{}", t.label()),
            };
            if i == 0 {
                if *c < 0.0 {
                    body.push('-');
                }
                body.push_str(&piece);
            } else {
                body.push_str(if *c < 0.0 { " - " } else { " + " });
                body.push_str(&piece);
            }
        }
        match self.link {
            Link::Identity => format!("y = {body}"),
            Link::Logit => format!("y = logistic({body})"),
        }
    }
}

struct Design {
    rows: Vec<Vec<f64>>,
    /// The intercept is left out of the ridge penalty.
    penalized: Vec<bool>,
    targets: Vec<f64>,
    weights: Vec<f64>,
}

fn design(
    schema: &FeatureSchema,
    nbhd: &Neighbourhood,
    cfs: &[CounterfactualInstance],
    resolved: &[Resolved],
    link: Link,
    cf_weight: f64,
) -> Design {
    let n = nbhd.len() + cfs.len();
    let mut rows = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for s in &nbhd.samples {
        rows.push(design_row(schema, resolved, &s.x));
        targets.push(link.forward(s.y));
        weights.push(s.weight);
    }
    for cf in cfs {
        rows.push(design_row(schema, resolved, &cf.x_cf));
        targets.push(link.forward(cf.y_actual));
        weights.push(cf_weight);
    }
    let penalized = resolved.iter().map(|r| !matches!(r, Resolved::Intercept)).collect();
    Design {
        rows,
        penalized,
        targets,
        weights,
    }
}

struct Solved {
    beta: Vec<f64>,
    ridge: f64,
    sse: f64,
}

fn solve(d: &Design, ridge: f64) -> Result<Solved> {
    let p = d.rows.first().map_or(0, Vec::len);
    if d.rows.len() < p {
        return Err(Error::InsufficientRows {
            rows: d.rows.len(),
            terms: p,
        });
    }
    let mut lambda = ridge;
    for attempt in 0..=RIDGE_RETRIES {
        let (a, b) = normal_equations(&d.rows, &d.targets, &d.weights, lambda, &d.penalized);
        match solve_spd(&a, &b, p) {
            Ok(beta) => {
                let sse = d
                    .rows
                    .iter()
                    .zip(&d.targets)
                    .zip(&d.weights)
                    .map(|((row, y), w)| {
                        let fit: f64 = row.iter().zip(&beta).map(|(x, b)| x * b).sum();
                        w * (y - fit).powi(2)
                    })
                    .sum();
                return Ok(Solved { beta, ridge: lambda, sse });
            }
            Err(_) if attempt < RIDGE_RETRIES => lambda = lambda.max(1e-12) * 10.0,
            Err(_) => break,
        }
    }
    Err(Error::Singular { ridge: lambda })
}

fn weighted_r2(d: &Design, sse: f64) -> f64 {
    let wsum: f64 = d.weights.iter().sum();
    let mean = d.targets.iter().zip(&d.weights).map(|(y, w)| y * w).sum::<f64>() / wsum;
    let sst: f64 = d.targets.iter().zip(&d.weights).map(|(y, w)| w * (y - mean).powi(2)).sum();
    if sst <= f64::EPSILON * wsum * (1.0 + mean * mean) {
        if sse <= f64::EPSILON * wsum * (1.0 + mean * mean) {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - sse / sst
    }
}

/// Fits with counterfactual rows weighted at the neighbourhood's maximum weight.
pub fn fit_equation(
    schema: &FeatureSchema,
    nbhd: &Neighbourhood,
    cfs: &[CounterfactualInstance],
    terms: &[Term],
    link: Link,
    ridge: f64,
) -> Result<CausalEquation> {
    fit_equation_weighted(schema, nbhd, cfs, terms, link, ridge, nbhd.max_weight())
}

pub fn fit_equation_weighted(
    schema: &FeatureSchema,
    nbhd: &Neighbourhood,
    cfs: &[CounterfactualInstance],
    terms: &[Term],
    link: Link,
    ridge: f64,
    counterfactual_weight: f64,
) -> Result<CausalEquation> {
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::Config(format!("ridge must be non-negative, got {ridge}")));
    }
    if terms.is_empty() {
        return Err(Error::Config("at least one term is required".into()));
    }
    let resolved = terms.iter().map(|t| resolve(schema, t)).collect::<Result<Vec<_>>>()?;
    let d = design(schema, nbhd, cfs, &resolved, link, counterfactual_weight);
    let solved = solve(&d, ridge)?;
    let cf_reach = cfs
        .iter()
        .map(|cf| scaled_distance(schema, &nbhd.scales, &nbhd.center, &cf.x_cf))
        .fold(0.0, f64::max);
    Ok(CausalEquation {
        terms: terms.to_vec(),
        coefficients: solved.beta,
        link,
        center: nbhd.center.clone(),
        validity_radius: (2.0 * nbhd.kernel_width).max(cf_reach),
        training_r2: weighted_r2(&d, solved.sse),
        rows: d.rows.len(),
        scales: nbhd.scales.clone(),
        ridge: solved.ridge,
    })
}

/// Kish effective sample size of the weights.
fn effective_n(weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    s * s / s2
}

/// Weighted BIC: `n_eff * ln(mse) + k * ln(n_eff)`, where `mse` is the
/// weight-normalized residual sum of squares. The mse is floored at 1e-24
/// times the target scale so exact fits compare equal rather than on noise.
fn weighted_bic(d: &Design, sse: f64, k: usize) -> f64 {
    let wsum: f64 = d.weights.iter().sum();
    let scale = 1.0 + d.targets.iter().zip(&d.weights).map(|(y, w)| w * y * y).sum::<f64>() / wsum;
    let n_eff = effective_n(&d.weights);
    let mse = (sse / wsum).max(1e-24 * scale);
    n_eff * mse.ln() + k as f64 * n_eff.ln()
}

/// Forward stepwise selection by weighted BIC, starting from the intercept.
/// Stops at `max_terms` or when no candidate strictly lowers the BIC; ties go
/// to the earlier candidate.
pub fn stepwise_select(
    schema: &FeatureSchema,
    nbhd: &Neighbourhood,
    cfs: &[CounterfactualInstance],
    candidates: &[Term],
    max_terms: usize,
    link: Link,
    ridge: f64,
) -> Result<Vec<Term>> {
    if max_terms == 0 {
        return Err(Error::Config("max_terms must be at least 1".into()));
    }
    let cf_weight = nbhd.max_weight();
    let score = |terms: &[Term]| -> Result<f64> {
        let resolved = terms.iter().map(|t| resolve(schema, t)).collect::<Result<Vec<_>>>()?;
        let d = design(schema, nbhd, cfs, &resolved, link, cf_weight);
        let solved = solve(&d, ridge)?;
        Ok(weighted_bic(&d, solved.sse, terms.len()))
    };
    let mut selected = vec![Term::Intercept];
    let mut best = score(&selected)?;
    while selected.len() < max_terms {
        let mut step: Option<(f64, &Term)> = None;
        for cand in candidates {
            if selected.contains(cand) {
                continue;
            }
            let mut trial = selected.clone();
            trial.push(cand.clone());
            let bic = score(&trial)?;
            if step.map_or(true, |(b, _)| bic < b) {
                step = Some((bic, cand));
            }
        }
        match step {
            Some((bic, cand)) if bic < best => {
                best = bic;
                selected.push(cand.clone());
            }
            _ => break,
        }
    }
    Ok(selected)
}
