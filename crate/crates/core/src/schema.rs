//! Feature space declaration, observation validation and encoding, and
//! training-data ingestion.
//!
//! Observations are encoded into a fixed-width numeric vector before they
//! reach a model or a regression:
//!
//! * numeric features pass through unchanged,
//! * ordinal features become their 0-based rank in declared order,
//! * categorical features expand to one indicator per level (full one-hot).

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Direction constraint on how a feature may change in a counterfactual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monotonic {
    #[default]
    None,
    IncreaseOnly,
    DecreaseOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    Numeric { min: f64, max: f64 },
    Ordinal { levels: Vec<String> },
    Categorical { levels: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDecl {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
    #[serde(default)]
    pub immutable: bool,
    #[serde(default)]
    pub monotonic: Monotonic,
}

impl FeatureDecl {
    pub fn numeric(name: &str, min: f64, max: f64) -> Self {
        Self {
            name: name.to_string(),
            kind: FeatureKind::Numeric { min, max },
            immutable: false,
            monotonic: Monotonic::None,
        }
    }

    pub fn ordinal(name: &str, levels: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            kind: FeatureKind::Ordinal {
                levels: levels.iter().map(|s| s.to_string()).collect(),
            },
            immutable: false,
            monotonic: Monotonic::None,
        }
    }

    pub fn categorical(name: &str, levels: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            kind: FeatureKind::Categorical {
                levels: levels.iter().map(|s| s.to_string()).collect(),
            },
            immutable: false,
            monotonic: Monotonic::None,
        }
    }

    pub fn immutable(mut self) -> Self {
        self.immutable = true;
        self
    }

    pub fn monotonic(mut self, direction: Monotonic) -> Self {
        self.monotonic = direction;
        self
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, FeatureKind::Categorical { .. })
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self.kind, FeatureKind::Numeric { .. })
    }

    /// Levels of an ordinal or categorical feature.
    pub fn levels(&self) -> Option<&[String]> {
        match &self.kind {
            FeatureKind::Numeric { .. } => None,
            FeatureKind::Ordinal { levels } | FeatureKind::Categorical { levels } => Some(levels),
        }
    }

    /// Range of the feature on its scalar axis (ranks for ordinals). `None`
    /// for categorical features.
    pub fn scalar_range(&self) -> Option<(f64, f64)> {
        match &self.kind {
            FeatureKind::Numeric { min, max } => Some((*min, *max)),
            FeatureKind::Ordinal { levels } => Some((0.0, (levels.len() - 1) as f64)),
            FeatureKind::Categorical { .. } => None,
        }
    }

    /// Number of encoded columns this feature occupies.
    pub fn width(&self) -> usize {
        match &self.kind {
            FeatureKind::Categorical { levels } => levels.len(),
            _ => 1,
        }
    }

    fn level_index(&self, level: &str) -> Option<usize> {
        self.levels()?.iter().position(|l| l == level)
    }

    fn check(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::Schema("feature names must be non-empty".into()));
        }
        match &self.kind {
            FeatureKind::Numeric { min, max } => {
                if !(min.is_finite() && max.is_finite() && min < max) {
                    return Err(Error::Schema(format!(
                        "numeric feature `{}` needs finite min < max, got [{min}, {max}]",
                        self.name
                    )));
                }
            }
            FeatureKind::Ordinal { levels } | FeatureKind::Categorical { levels } => {
                let distinct: HashSet<&String> = levels.iter().collect();
                if distinct.len() != levels.len() || levels.len() < 2 {
                    return Err(Error::Schema(format!(
                        "feature `{}` needs at least 2 distinct levels",
                        self.name
                    )));
                }
                if self.is_categorical() && self.monotonic != Monotonic::None {
                    return Err(Error::Schema(format!(
                        "categorical feature `{}` cannot carry a monotonic annotation",
                        self.name
                    )));
                }
            }
        }
        if self.immutable && self.monotonic != Monotonic::None {
            return Err(Error::Schema(format!(
                "immutable feature `{}` cannot carry a monotonic annotation",
                self.name
            )));
        }
        Ok(())
    }

    /// Validates a single value against this declaration.
    pub fn check_value(&self, value: &Value) -> Result<()> {
        match (&self.kind, value) {
            (FeatureKind::Numeric { min, max }, Value::Number(v)) => {
                if !v.is_finite() {
                    Err(Error::validation(&self.name, format!("value {v} is not finite")))
                } else if v < min || v > max {
                    Err(Error::validation(
                        &self.name,
                        format!("value {v} outside range [{min}, {max}]"),
                    ))
                } else {
                    Ok(())
                }
            }
            (FeatureKind::Numeric { .. }, Value::Level(l)) => Err(Error::validation(
                &self.name,
                format!("expected a number, got `{l}`"),
            )),
            (_, Value::Level(l)) => {
                if self.level_index(l).is_some() {
                    Ok(())
                } else {
                    Err(Error::validation(&self.name, format!("unknown level `{l}`")))
                }
            }
            (_, Value::Number(v)) => Err(Error::validation(
                &self.name,
                format!("expected a level name, got {v}"),
            )),
        }
    }

    /// Parses a textual cell (as found in a dataset file) into a value.
    pub fn parse_value(&self, text: &str) -> Result<Value> {
        let text = text.trim();
        let value = match self.kind {
            FeatureKind::Numeric { .. } => Value::Number(
                text.parse::<f64>()
                    .map_err(|_| Error::validation(&self.name, format!("cannot parse `{text}` as a number")))?,
            ),
            _ => Value::Level(text.to_string()),
        };
        self.check_value(&value)?;
        Ok(value)
    }

    /// Scalar coordinate of a value: the number itself, or the rank of an
    /// ordinal level. `None` for categorical features.
    pub fn scalar(&self, value: &Value) -> Option<f64> {
        match (&self.kind, value) {
            (FeatureKind::Numeric { .. }, Value::Number(v)) => Some(*v),
            (FeatureKind::Ordinal { .. }, Value::Level(l)) => self.level_index(l).map(|i| i as f64),
            _ => None,
        }
    }

    /// Inverse of [`FeatureDecl::scalar`] for numeric and ordinal features.
    /// Ordinal ranks are rounded and clamped to the level list.
    pub fn from_scalar(&self, x: f64) -> Value {
        match &self.kind {
            FeatureKind::Numeric { min, max } => Value::Number(x.clamp(*min, *max)),
            FeatureKind::Ordinal { levels } | FeatureKind::Categorical { levels } => {
                let idx = x.round().clamp(0.0, (levels.len() - 1) as f64) as usize;
                Value::Level(levels[idx].clone())
            }
        }
    }
}

/// A single feature value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Number(f64),
    Level(String),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Number(v) => write!(f, "{v}"),
            Value::Level(l) => f.write_str(l),
        }
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Number(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Level(v.to_string())
    }
}

/// One value per feature, in schema order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Observation(Vec<Value>);

impl Observation {
    pub fn new(values: Vec<Value>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[Value] {
        &self.0
    }

    pub fn get(&self, index: usize) -> &Value {
        &self.0[index]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Copy with one feature replaced.
    pub fn with(&self, index: usize, value: Value) -> Self {
        let mut values = self.0.clone();
        values[index] = value;
        Self(values)
    }

    pub(crate) fn set(&mut self, index: usize, value: Value) {
        self.0[index] = value;
    }
}

#[derive(Deserialize)]
struct SchemaDoc {
    features: Vec<FeatureDecl>,
    target_name: String,
    positive_label: String,
    #[serde(default)]
    negative_label: Option<String>,
    threshold: f64,
}

/// Ordered feature declarations plus the decision rule of the classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SchemaDoc")]
pub struct FeatureSchema {
    features: Vec<FeatureDecl>,
    target_name: String,
    positive_label: String,
    negative_label: String,
    threshold: f64,
    #[serde(skip)]
    offsets: Vec<usize>,
}

impl TryFrom<SchemaDoc> for FeatureSchema {
    type Error = Error;

    fn try_from(doc: SchemaDoc) -> Result<Self> {
        let mut schema = FeatureSchema::new(doc.features, &doc.target_name, &doc.positive_label, doc.threshold)?;
        if let Some(negative) = doc.negative_label {
            schema = schema.with_negative_label(&negative)?;
        }
        Ok(schema)
    }
}

impl FeatureSchema {
    pub fn new(
        features: Vec<FeatureDecl>,
        target_name: &str,
        positive_label: &str,
        threshold: f64,
    ) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Schema("at least one feature is required".into()));
        }
        let mut seen = HashSet::new();
        for f in &features {
            f.check()?;
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Schema(format!("duplicate feature name `{}`", f.name)));
            }
        }
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::Schema(format!("threshold must lie in (0, 1), got {threshold}")));
        }
        let mut offsets = Vec::with_capacity(features.len() + 1);
        let mut acc = 0;
        for f in &features {
            offsets.push(acc);
            acc += f.width();
        }
        offsets.push(acc);
        Ok(Self {
            features,
            target_name: target_name.to_string(),
            positive_label: positive_label.to_string(),
            negative_label: format!("not_{positive_label}"),
            threshold,
            offsets,
        })
    }

    pub fn with_negative_label(mut self, label: &str) -> Result<Self> {
        if label == self.positive_label {
            return Err(Error::Schema("negative label must differ from the positive label".into()));
        }
        self.negative_label = label.to_string();
        Ok(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn features(&self) -> &[FeatureDecl] {
        &self.features
    }

    pub fn feature(&self, index: usize) -> &FeatureDecl {
        &self.features[index]
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.features
            .iter()
            .position(|f| f.name == name)
            .ok_or_else(|| Error::UnknownFeature(name.to_string()))
    }

    pub fn target_name(&self) -> &str {
        &self.target_name
    }

    pub fn positive_label(&self) -> &str {
        &self.positive_label
    }

    pub fn negative_label(&self) -> &str {
        &self.negative_label
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn has_mutable_feature(&self) -> bool {
        self.features.iter().any(|f| !f.immutable)
    }

    /// Encoded vector length: numeric + ordinal + sum of categorical levels.
    pub fn encoded_dim(&self) -> usize {
        self.offsets[self.features.len()]
    }

    /// Offset of feature `index` within the encoded vector.
    pub fn offset(&self, index: usize) -> usize {
        self.offsets[index]
    }

    /// Column names of the encoding; indicator columns read `feature=level`.
    pub fn encoded_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.encoded_dim());
        for f in &self.features {
            match &f.kind {
                FeatureKind::Categorical { levels } => {
                    names.extend(levels.iter().map(|l| format!("{}={}", f.name, l)));
                }
                _ => names.push(f.name.clone()),
            }
        }
        names
    }

    pub fn validate(&self, x: &Observation) -> Result<()> {
        if x.len() != self.features.len() {
            return Err(Error::Validation {
                feature: "*".into(),
                message: format!("expected {} values, got {}", self.features.len(), x.len()),
            });
        }
        for (f, v) in self.features.iter().zip(x.values()) {
            f.check_value(v)?;
        }
        Ok(())
    }

    /// Validates then encodes.
    pub fn encode(&self, x: &Observation) -> Result<Vec<f64>> {
        self.validate(x)?;
        let mut out = vec![0.0; self.encoded_dim()];
        self.encode_into(x, &mut out);
        Ok(out)
    }

    /// Encodes an observation already known to be valid.
    pub(crate) fn encode_into(&self, x: &Observation, out: &mut [f64]) {
        for (i, (f, v)) in self.features.iter().zip(x.values()).enumerate() {
            let at = self.offsets[i];
            match (&f.kind, v) {
                (FeatureKind::Numeric { .. }, Value::Number(n)) => out[at] = *n,
                (FeatureKind::Ordinal { .. }, Value::Level(l)) => {
                    out[at] = f.level_index(l).expect("validated level") as f64;
                }
                (FeatureKind::Categorical { levels }, Value::Level(l)) => {
                    for (k, level) in levels.iter().enumerate() {
                        out[at + k] = if level == l { 1.0 } else { 0.0 };
                    }
                }
                _ => unreachable!("observation was validated"),
            }
        }
    }

    /// Inverse of [`FeatureSchema::encode`].
    pub fn decode(&self, encoded: &[f64]) -> Result<Observation> {
        if encoded.len() != self.encoded_dim() {
            return Err(Error::Validation {
                feature: "*".into(),
                message: format!("expected {} encoded values, got {}", self.encoded_dim(), encoded.len()),
            });
        }
        let mut values = Vec::with_capacity(self.features.len());
        for (i, f) in self.features.iter().enumerate() {
            let at = self.offsets[i];
            let value = match &f.kind {
                FeatureKind::Numeric { .. } => Value::Number(encoded[at]),
                FeatureKind::Ordinal { levels } => {
                    let rank = encoded[at];
                    if rank.fract() != 0.0 || rank < 0.0 || rank as usize >= levels.len() {
                        return Err(Error::validation(&f.name, format!("invalid rank {rank}")));
                    }
                    Value::Level(levels[rank as usize].clone())
                }
                FeatureKind::Categorical { levels } => {
                    let block = &encoded[at..at + levels.len()];
                    let hot: Vec<usize> = (0..levels.len()).filter(|&k| block[k] == 1.0).collect();
                    let cold = block.iter().filter(|&&b| b == 0.0).count();
                    if hot.len() != 1 || cold != levels.len() - 1 {
                        return Err(Error::validation(&f.name, "indicator block is not one-hot"));
                    }
                    Value::Level(levels[hot[0]].clone())
                }
            };
            values.push(value);
        }
        let x = Observation(values);
        self.validate(&x)?;
        Ok(x)
    }

    /// Builds an observation from `(name, value)` pairs covering every feature.
    pub fn observation_from_pairs<'a, I>(&self, pairs: I) -> Result<Observation>
    where
        I: IntoIterator<Item = (&'a str, Value)>,
    {
        let mut slots: Vec<Option<Value>> = vec![None; self.features.len()];
        for (name, value) in pairs {
            let idx = self.index_of(name)?;
            slots[idx] = Some(value);
        }
        let values = slots
            .into_iter()
            .zip(&self.features)
            .map(|(v, f)| v.ok_or_else(|| Error::validation(&f.name, "missing value")))
            .collect::<Result<Vec<_>>>()?;
        let x = Observation(values);
        self.validate(&x)?;
        Ok(x)
    }

    /// Builds an observation from a JSON object keyed by feature name.
    pub fn observation_from_json(&self, value: &serde_json::Value) -> Result<Observation> {
        let map = value
            .as_object()
            .ok_or_else(|| Error::validation("*", "observation must be a JSON object"))?;
        let pairs = map
            .iter()
            .map(|(k, v)| Ok((k.as_str(), json_to_value(k, v)?)))
            .collect::<Result<Vec<_>>>()?;
        self.observation_from_pairs(pairs)
    }

    /// JSON object keyed by feature name, in schema order.
    pub fn observation_to_json(&self, x: &Observation) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for (f, v) in self.features.iter().zip(x.values()) {
            map.insert(f.name.clone(), serde_json::to_value(v).expect("value serializes"));
        }
        serde_json::Value::Object(map)
    }

    /// Applies partial overrides to `x`, validating each one.
    pub fn apply_overrides(&self, x: &Observation, overrides: &[(String, Value)]) -> Result<Observation> {
        let mut merged = x.clone();
        for (name, value) in overrides {
            let idx = self.index_of(name)?;
            self.features[idx].check_value(value)?;
            merged.set(idx, value.clone());
        }
        Ok(merged)
    }
}

pub(crate) fn json_to_value(feature: &str, v: &serde_json::Value) -> Result<Value> {
    match v {
        serde_json::Value::Number(n) => n
            .as_f64()
            .map(Value::Number)
            .ok_or_else(|| Error::validation(feature, "number out of range")),
        serde_json::Value::String(s) => Ok(Value::Level(s.clone())),
        _ => Err(Error::validation(feature, "value must be a number or a string")),
    }
}

/// Training rows used to fit perturbation distributions and MAD scales.
/// Labels, when present, are carried along but never consulted by the engine.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: Arc<FeatureSchema>,
    rows: Vec<Observation>,
    labels: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(schema: Arc<FeatureSchema>, rows: Vec<Observation>, labels: Option<Vec<String>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some(l) = &labels {
            if l.len() != rows.len() {
                return Err(Error::Schema(format!("{} labels for {} rows", l.len(), rows.len())));
            }
        }
        for (i, row) in rows.iter().enumerate() {
            schema.validate(row).map_err(|e| match e {
                Error::Validation { feature, message } => Error::Parse {
                    row: i + 1,
                    column: feature,
                    message,
                },
                other => other,
            })?;
        }
        Ok(Self { schema, rows, labels })
    }

    pub fn schema(&self) -> &Arc<FeatureSchema> {
        &self.schema
    }

    pub fn rows(&self) -> &[Observation] {
        &self.rows
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Values of one feature across all rows.
    pub fn column(&self, index: usize) -> impl Iterator<Item = &Value> {
        self.rows.iter().map(move |r| r.get(index))
    }
}

/// Reads a comma-delimited dataset with a header row. Rows are numbered from 1
/// (the first data row after the header) in error messages. A column named
/// after the schema's target is read as the optional label column.
pub fn load_dataset(path: impl AsRef<Path>, schema: Arc<FeatureSchema>) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_dataset(file, schema)
}

pub fn read_dataset<R: std::io::Read>(reader: R, schema: Arc<FeatureSchema>) -> Result<Dataset> {
    let mut csv = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header = csv.headers()?.clone();

    let mut column_of = Vec::with_capacity(schema.len());
    for f in schema.features() {
        let col = header.iter().position(|h| h == f.name).ok_or_else(|| Error::Parse {
            row: 0,
            column: f.name.clone(),
            message: "missing column".into(),
        })?;
        column_of.push(col);
    }
    let label_col = header.iter().position(|h| h == schema.target_name());
    for h in header.iter() {
        if h != schema.target_name() && schema.index_of(h).is_err() {
            return Err(Error::Parse {
                row: 0,
                column: h.to_string(),
                message: "column not declared in schema".into(),
            });
        }
    }

    let mut rows = Vec::new();
    let mut labels = label_col.map(|_| Vec::new());
    for (i, record) in csv.records().enumerate() {
        let row = i + 1;
        let record = record?;
        let mut values = Vec::with_capacity(schema.len());
        for (f, &col) in schema.features().iter().zip(&column_of) {
            let cell = record.get(col).ok_or_else(|| Error::Parse {
                row,
                column: f.name.clone(),
                message: "missing value".into(),
            })?;
            let value = f.parse_value(cell).map_err(|e| Error::Parse {
                row,
                column: f.name.clone(),
                message: match e {
                    Error::Validation { message, .. } => message,
                    other => other.to_string(),
                },
            })?;
            values.push(value);
        }
        if let (Some(labels), Some(col)) = (labels.as_mut(), label_col) {
            labels.push(record.get(col).unwrap_or_default().to_string());
        }
        rows.push(Observation(values));
    }
    Dataset::new(schema, rows, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn jones_schema() -> Arc<FeatureSchema> {
        Arc::new(
            FeatureSchema::new(
                vec![
                    FeatureDecl::numeric("income", 0.0, 200_000.0).monotonic(Monotonic::IncreaseOnly),
                    FeatureDecl::numeric("age", 18.0, 100.0).immutable(),
                    FeatureDecl::categorical("education", &["graduate", "none"]),
                ],
                "approved",
                "yes",
                0.5,
            )
            .unwrap(),
        )
    }

    #[test]
    fn rejects_bad_declarations() {
        let dup = FeatureSchema::new(
            vec![FeatureDecl::numeric("a", 0.0, 1.0), FeatureDecl::numeric("a", 0.0, 1.0)],
            "y",
            "p",
            0.5,
        );
        assert!(dup.is_err());
        assert!(FeatureSchema::new(vec![FeatureDecl::numeric("a", 1.0, 1.0)], "y", "p", 0.5).is_err());
        assert!(FeatureSchema::new(vec![FeatureDecl::categorical("c", &["x"])], "y", "p", 0.5).is_err());
        assert!(FeatureSchema::new(vec![FeatureDecl::categorical("c", &["x", "x"])], "y", "p", 0.5).is_err());
        let immut_mono = FeatureDecl::numeric("a", 0.0, 1.0).immutable().monotonic(Monotonic::IncreaseOnly);
        assert!(FeatureSchema::new(vec![immut_mono], "y", "p", 0.5).is_err());
        assert!(FeatureSchema::new(vec![FeatureDecl::numeric("a", 0.0, 1.0)], "y", "p", 1.0).is_err());
        assert!(FeatureSchema::new(vec![FeatureDecl::numeric(" ", 0.0, 1.0)], "y", "p", 0.5).is_err());
    }

    #[test]
    fn numeric_values_pass_through() {
        let s = FeatureSchema::new(
            vec![FeatureDecl::numeric("income", 0.0, 1e6), FeatureDecl::numeric("age", 0.0, 120.0)],
            "y",
            "p",
            0.5,
        )
        .unwrap();
        let x = Observation::new(vec![32000.0.into(), 45.0.into()]);
        assert_eq!(s.encode(&x).unwrap(), vec![32000.0, 45.0]);
    }

    #[test]
    fn categorical_is_one_hot() {
        let s = jones_schema();
        let x = Observation::new(vec![32000.0.into(), 45.0.into(), "graduate".into()]);
        let e = s.encode(&x).unwrap();
        assert_eq!(&e[2..], &[1.0, 0.0]);
        assert_eq!(s.encoded_dim(), 4);
        assert_eq!(s.encoded_names(), vec!["income", "age", "education=graduate", "education=none"]);
        let other = x.with(2, "none".into());
        assert_ne!(s.encode(&other).unwrap(), e);
        assert_eq!(s.decode(&e).unwrap(), x);
    }

    #[test]
    fn ordinal_is_rank() {
        let s = FeatureSchema::new(vec![FeatureDecl::ordinal("grade", &["low", "mid", "high"])], "y", "p", 0.5).unwrap();
        let x = Observation::new(vec!["high".into()]);
        assert_eq!(s.encode(&x).unwrap(), vec![2.0]);
        assert!(s.decode(&[1.5]).is_err());
    }

    #[test]
    fn schema_json_round_trip() {
        let s = jones_schema();
        let text = serde_json::to_string(&*s).unwrap();
        let back = FeatureSchema::from_json(&text).unwrap();
        assert_eq!(back, *s);
        assert_eq!(back.encoded_dim(), 4);
        let bad = text.replace("\"threshold\":0.5", "\"threshold\":1.5");
        assert!(FeatureSchema::from_json(&bad).is_err());
    }

    #[test]
    fn loads_three_rows() {
        let csv = "income,age,education\n32000,45,graduate\n50000,30,none\n41000,60,graduate\n";
        let d = read_dataset(csv.as_bytes(), jones_schema()).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.rows()[1].get(0), &Value::Number(50000.0));
        assert!(d.labels().is_none());
    }

    #[test]
    fn parse_error_names_row_and_column() {
        let csv = "income,age,education\n32000,45,graduate\nabc,30,none\n";
        match read_dataset(csv.as_bytes(), jones_schema()) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "income");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn range_error_on_negative_age() {
        let csv = "income,age,education\n32000,-5,graduate\n";
        let err = read_dataset(csv.as_bytes(), jones_schema()).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 1, ref column, .. } if column == "age"), "{err}");
        assert!(err.to_string().contains("outside range"));
    }

    #[test]
    fn missing_column_is_reported() {
        let csv = "income,education\n32000,graduate\n";
        let err = read_dataset(csv.as_bytes(), jones_schema()).unwrap_err();
        assert!(matches!(err, Error::Parse { ref column, .. } if column == "age"));
    }

    #[test]
    fn label_column_is_optional() {
        let csv = "income,age,education,approved\n32000,45,graduate,no\n";
        let d = read_dataset(csv.as_bytes(), jones_schema()).unwrap();
        assert_eq!(d.labels().unwrap(), &["no".to_string()]);
    }

    #[test]
    fn empty_dataset_rejected() {
        let csv = "income,age,education\n";
        assert!(matches!(read_dataset(csv.as_bytes(), jones_schema()), Err(Error::EmptyDataset)));
    }

    #[test]
    fn observation_json_and_overrides() {
        let s = jones_schema();
        let x = s
            .observation_from_json(&serde_json::json!({"education": "graduate", "income": 32000, "age": 45}))
            .unwrap();
        assert_eq!(s.observation_to_json(&x)["income"], serde_json::json!(32000.0));
        let merged = s.apply_overrides(&x, &[("income".into(), 35000.0.into())]).unwrap();
        assert_eq!(merged.get(0), &Value::Number(35000.0));
        assert!(s.apply_overrides(&x, &[("age".into(), 500.0.into())]).is_err());
        assert!(s.apply_overrides(&x, &[("height".into(), 1.0.into())]).is_err());
    }
}
