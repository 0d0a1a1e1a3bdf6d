//! The black box under explanation and the built-in model zoo.
//!
//! Every model maps an encoded observation to a probability of the positive
//! class. Zoo models (logistic, multilayer perceptron, decision tree) load from
//! a JSON spec; anything else plugs in through [`Evaluator`].

use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{FeatureSchema, Observation};

/// Pure mapping from an encoded observation to a probability.
pub trait Evaluator: Send + Sync + fmt::Debug {
    fn evaluate(&self, encoded: &[f64]) -> Result<f64>;

    /// Whether repeated evaluation is guaranteed to agree. Remote endpoints
    /// cannot promise this.
    fn is_deterministic(&self) -> bool {
        true
    }
}

/// Predicted class relative to the schema threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Class {
    Negative,
    Positive,
}

/// Positive iff `p >= threshold`; a tie goes to the positive class.
pub fn class_of(p: f64, threshold: f64) -> Class {
    if p >= threshold {
        Class::Positive
    } else {
        Class::Negative
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probability: f64,
    pub label: String,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// Row-major, one row per output unit.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TreeNode {
    /// Goes `left` when `encoded[feature] < value`, otherwise `right`.
    Split {
        feature: String,
        op: SplitOp,
        value: f64,
        left: usize,
        right: usize,
    },
    Leaf { leaf: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitOp {
    #[serde(rename = "<")]
    Less,
}

/// Portable description of a zoo model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Logistic {
        weights: Vec<f64>,
        bias: f64,
    },
    Mlp {
        layers: Vec<DenseLayer>,
    },
    /// Node 0 is the root; children must have larger indices than parents.
    Tree {
        nodes: Vec<TreeNode>,
    },
}

impl ModelSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::ModelSpec(e.to_string()))
    }

    /// Builds an evaluator after checking shapes against the schema encoding.
    pub fn build(&self, schema: &FeatureSchema) -> Result<Arc<dyn Evaluator>> {
        let dim = schema.encoded_dim();
        match self {
            ModelSpec::Logistic { weights, bias } => {
                if weights.len() != dim {
                    return Err(Error::ModelSpec(format!(
                        "logistic model has {} weights but the encoding has {dim} columns",
                        weights.len()
                    )));
                }
                if !bias.is_finite() || weights.iter().any(|w| !w.is_finite()) {
                    return Err(Error::ModelSpec("logistic parameters must be finite".into()));
                }
                Ok(Arc::new(Logistic {
                    weights: weights.clone(),
                    bias: *bias,
                }))
            }
            ModelSpec::Mlp { layers } => {
                let mut width = dim;
                for (i, layer) in layers.iter().enumerate() {
                    if layer.weights.len() != layer.bias.len() || layer.weights.is_empty() {
                        return Err(Error::ModelSpec(format!("layer {i}: weight rows and bias length differ")));
                    }
                    if layer.weights.iter().any(|row| row.len() != width) {
                        return Err(Error::ModelSpec(format!("layer {i}: expected {width} inputs per unit")));
                    }
                    if layer.weights.iter().flatten().chain(&layer.bias).any(|w| !w.is_finite()) {
                        return Err(Error::ModelSpec(format!("layer {i}: parameters must be finite")));
                    }
                    width = layer.bias.len();
                }
                match layers.last() {
                    Some(last) if last.activation == Activation::Sigmoid && width == 1 => {}
                    _ => {
                        return Err(Error::ModelSpec(
                            "mlp must end in a single sigmoid output unit".into(),
                        ))
                    }
                }
                Ok(Arc::new(Mlp { layers: layers.clone() }))
            }
            ModelSpec::Tree { nodes } => {
                if nodes.is_empty() {
                    return Err(Error::ModelSpec("tree has no nodes".into()));
                }
                let names = schema.encoded_names();
                let mut compiled = Vec::with_capacity(nodes.len());
                for (i, node) in nodes.iter().enumerate() {
                    compiled.push(match node {
                        TreeNode::Leaf { leaf } => {
                            if !(0.0..=1.0).contains(leaf) {
                                return Err(Error::ModelSpec(format!(
                                    "node {i}: leaf probability {leaf} outside [0, 1]"
                                )));
                            }
                            Compiled::Leaf(*leaf)
                        }
                        TreeNode::Split {
                            feature,
                            value,
                            left,
                            right,
                            ..
                        } => {
                            let column = names.iter().position(|n| n == feature).ok_or_else(|| {
                                Error::ModelSpec(format!("node {i}: unknown encoded column `{feature}`"))
                            })?;
                            for &child in [left, right] {
                                if child <= i || child >= nodes.len() {
                                    return Err(Error::ModelSpec(format!(
                                        "node {i}: child index {child} must point forward within the tree"
                                    )));
                                }
                            }
                            Compiled::Split {
                                column,
                                value: *value,
                                left: *left,
                                right: *right,
                            }
                        }
                    });
                }
                Ok(Arc::new(Tree { nodes: compiled }))
            }
        }
    }
}

#[derive(Debug)]
struct Logistic {
    weights: Vec<f64>,
    bias: f64,
}

impl Evaluator for Logistic {
    fn evaluate(&self, encoded: &[f64]) -> Result<f64> {
        let z = self.weights.iter().zip(encoded).fold(self.bias, |acc, (w, x)| acc + w * x);
        Ok(sigmoid(z))
    }
}

#[derive(Debug)]
struct Mlp {
    layers: Vec<DenseLayer>,
}

impl Evaluator for Mlp {
    fn evaluate(&self, encoded: &[f64]) -> Result<f64> {
        let mut current = encoded.to_vec();
        for layer in &self.layers {
            current = layer
                .weights
                .iter()
                .zip(&layer.bias)
                .map(|(row, b)| {
                    let z = row.iter().zip(&current).fold(*b, |acc, (w, x)| acc + w * x);
                    match layer.activation {
                        Activation::Relu => z.max(0.0),
                        Activation::Sigmoid => sigmoid(z),
                    }
                })
                .collect();
        }
        Ok(current[0])
    }
}

#[derive(Debug)]
enum Compiled {
    Split {
        column: usize,
        value: f64,
        left: usize,
        right: usize,
    },
    Leaf(f64),
}

#[derive(Debug)]
struct Tree {
    nodes: Vec<Compiled>,
}

impl Evaluator for Tree {
    fn evaluate(&self, encoded: &[f64]) -> Result<f64> {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Compiled::Leaf(p) => return Ok(p),
                Compiled::Split {
                    column,
                    value,
                    left,
                    right,
                } => at = if encoded[column] < value { left } else { right },
            }
        }
    }
}

/// Wraps a plain function as an evaluator.
pub struct FnEvaluator<F>(pub F);

impl<F> fmt::Debug for FnEvaluator<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("FnEvaluator")
    }
}

impl<F> Evaluator for FnEvaluator<F>
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    fn evaluate(&self, encoded: &[f64]) -> Result<f64> {
        Ok((self.0)(encoded))
    }
}

/// The classifier `m` being explained.
#[derive(Clone)]
pub struct BlackBoxModel {
    id: String,
    schema: Arc<FeatureSchema>,
    evaluator: Arc<dyn Evaluator>,
    queries: Arc<AtomicU64>,
}

impl fmt::Debug for BlackBoxModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BlackBoxModel")
            .field("id", &self.id)
            .field("evaluator", &self.evaluator)
            .finish()
    }
}

impl BlackBoxModel {
    pub fn new(id: impl Into<String>, schema: Arc<FeatureSchema>, evaluator: Arc<dyn Evaluator>) -> Self {
        Self {
            id: id.into(),
            schema,
            evaluator,
            queries: Arc::new(AtomicU64::new(0)),
        }
    }

    pub fn from_spec(id: impl Into<String>, schema: Arc<FeatureSchema>, spec: &ModelSpec) -> Result<Self> {
        let evaluator = spec.build(&schema)?;
        Ok(Self::new(id, schema, evaluator))
    }

    /// Wraps a closure over the encoded vector.
    pub fn from_fn<F>(id: impl Into<String>, schema: Arc<FeatureSchema>, f: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Self::new(id, schema, Arc::new(FnEvaluator(f)))
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn schema(&self) -> &Arc<FeatureSchema> {
        &self.schema
    }

    pub fn is_deterministic(&self) -> bool {
        self.evaluator.is_deterministic()
    }

    /// Total number of evaluations served by this model handle and its clones.
    pub fn query_count(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    /// Evaluates an already encoded observation.
    pub fn evaluate_encoded(&self, encoded: &[f64]) -> Result<f64> {
        if encoded.len() != self.schema.encoded_dim() {
            return Err(Error::Model(format!(
                "expected {} encoded values, got {}",
                self.schema.encoded_dim(),
                encoded.len()
            )));
        }
        self.queries.fetch_add(1, Ordering::Relaxed);
        let p = self.evaluator.evaluate(encoded)?;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Model(format!("model `{}` returned {p}, not a probability", self.id)));
        }
        Ok(p)
    }

    /// Probability of the positive class at `x`.
    pub fn probability(&self, x: &Observation) -> Result<f64> {
        let encoded = self.schema.encode(x)?;
        self.evaluate_encoded(&encoded)
    }

    pub fn class(&self, x: &Observation) -> Result<Class> {
        Ok(class_of(self.probability(x)?, self.schema.threshold()))
    }

    pub fn predict(&self, x: &Observation) -> Result<Prediction> {
        let probability = self.probability(x)?;
        Ok(Prediction {
            probability,
            label: self.label(class_of(probability, self.schema.threshold())).to_string(),
        })
    }

    pub fn label(&self, class: Class) -> &str {
        match class {
            Class::Positive => self.schema.positive_label(),
            Class::Negative => self.schema.negative_label(),
        }
    }
}

/// Loads a zoo model from a JSON spec. The model id is the file stem.
pub fn load_model(path: impl AsRef<Path>, schema: Arc<FeatureSchema>) -> Result<BlackBoxModel> {
    let path = path.as_ref();
    let spec = ModelSpec::from_json(&std::fs::read_to_string(path)?)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".to_string());
    BlackBoxModel::from_spec(id, schema, &spec)
}
