//! Registry of schemas, datasets and models, explanation storage, and the
//! request handlers shared by the CLI and the HTTP server.

pub mod http;
pub mod remote;
pub mod store;

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use causex_core::model::{class_of, BlackBoxModel, ModelSpec};
use causex_core::schema::{read_dataset, Dataset, FeatureSchema, Observation, Value};
use causex_core::{explain, EngineConfig, Error, ExplainError, ExplanationReport};
use serde::{Deserialize, Serialize};

use crate::remote::{RemoteEvaluator, RemoteSpec};
use crate::store::{content_id, ExplanationStore};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{kind} `{id}` not found")]
    NotFound { kind: &'static str, id: String },
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Resource(String),
    #[error("{0}")]
    Engine(String),
}

impl ServiceError {
    fn not_found(kind: &'static str, id: &str) -> Self {
        ServiceError::NotFound {
            kind,
            id: id.to_string(),
        }
    }

    pub fn status(&self) -> u16 {
        match self {
            ServiceError::NotFound { .. } => 404,
            ServiceError::Validation(_) => 422,
            ServiceError::Resource(_) => 502,
            ServiceError::Engine(_) => 500,
        }
    }

    /// 2 for bad input, 3 for missing or failing resources, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            ServiceError::Validation(_) => 2,
            ServiceError::NotFound { .. } | ServiceError::Resource(_) => 3,
            ServiceError::Engine(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ServiceError::NotFound { .. } => "not_found",
            ServiceError::Validation(_) => "validation",
            ServiceError::Resource(_) => "resource",
            ServiceError::Engine(_) => "engine",
        }
    }

    fn classify(e: &Error, message: String) -> Self {
        match e {
            Error::Schema(_)
            | Error::Validation { .. }
            | Error::UnknownFeature(_)
            | Error::Parse { .. }
            | Error::EmptyDataset
            | Error::ModelSpec(_)
            | Error::Config(_)
            | Error::Csv(_)
            | Error::Json(_) => ServiceError::Validation(message),
            Error::Io(_) | Error::Model(_) => ServiceError::Resource(message),
            Error::InsufficientRows { .. } | Error::Singular { .. } | Error::Inconsistent(_) => {
                ServiceError::Engine(message)
            }
        }
    }
}

impl From<Error> for ServiceError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        Self::classify(&e, message)
    }
}

impl From<ExplainError> for ServiceError {
    fn from(e: ExplainError) -> Self {
        let message = e.to_string();
        Self::classify(&e.source, message)
    }
}

impl From<serde_json::Error> for ServiceError {
    fn from(e: serde_json::Error) -> Self {
        ServiceError::Validation(format!("malformed JSON: {e}"))
    }
}

impl From<std::io::Error> for ServiceError {
    fn from(e: std::io::Error) -> Self {
        ServiceError::Resource(e.to_string())
    }
}

pub type ServiceResult<T> = Result<T, ServiceError>;

#[derive(Debug, Clone, Deserialize)]
pub struct SchemaUpload {
    #[serde(default)]
    pub id: Option<String>,
    pub schema: FeatureSchema,
}

#[derive(Debug, Clone, Deserialize)]
pub struct DatasetUpload {
    #[serde(default)]
    pub id: Option<String>,
    pub schema: String,
    /// CSV text with a header row.
    pub csv: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ModelUpload {
    #[serde(default)]
    pub id: Option<String>,
    pub schema: String,
    /// A zoo spec, or `{"kind": "remote", "url": ...}`.
    pub model: serde_json::Value,
}

#[derive(Debug, Clone)]
pub enum ModelSource {
    Zoo(ModelSpec),
    Remote(RemoteSpec),
}

impl ModelSource {
    pub fn from_json(value: &serde_json::Value) -> ServiceResult<Self> {
        if value.get("kind").and_then(|k| k.as_str()) == Some("remote") {
            Ok(ModelSource::Remote(serde_json::from_value(value.clone())?))
        } else {
            let spec: ModelSpec = serde_json::from_value(value.clone())
                .map_err(|e| ServiceError::Validation(format!("invalid model spec: {e}")))?;
            Ok(ModelSource::Zoo(spec))
        }
    }

    pub fn build(&self, id: &str, schema: Arc<FeatureSchema>) -> ServiceResult<BlackBoxModel> {
        Ok(match self {
            ModelSource::Zoo(spec) => BlackBoxModel::from_spec(id, schema, spec)?,
            ModelSource::Remote(spec) => BlackBoxModel::new(id, schema, Arc::new(RemoteEvaluator::new(spec)?)),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Registered {
    pub id: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ExplainRequest {
    pub model: String,
    pub dataset: String,
    /// JSON object keyed by feature name.
    pub observation: serde_json::Value,
    /// Overrides merged onto the service's base configuration.
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplainResponse {
    pub id: String,
    pub document: ExplanationReport,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct WhatIfRequest {
    #[serde(default)]
    pub explanation: String,
    #[serde(default)]
    pub overrides: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfResponse {
    pub explanation: String,
    /// Merged observation keyed by feature name.
    pub observation: serde_json::Value,
    pub y_estimate: f64,
    pub y_actual: f64,
    pub gap: f64,
    pub estimate_label: String,
    pub actual_label: String,
    pub distance: f64,
    pub validity_radius: f64,
    pub inside_validity_radius: bool,
}

/// Registered resources plus the explanation store. Resources are immutable
/// once registered; re-registering an id replaces it.
#[derive(Debug)]
pub struct Service {
    schemas: RwLock<HashMap<String, Arc<FeatureSchema>>>,
    datasets: RwLock<HashMap<String, Arc<Dataset>>>,
    models: RwLock<HashMap<String, Arc<BlackBoxModel>>>,
    store: ExplanationStore,
    base_config: EngineConfig,
}

fn lookup<T>(map: &RwLock<HashMap<String, Arc<T>>>, kind: &'static str, id: &str) -> ServiceResult<Arc<T>> {
    map.read()
        .expect("registry lock")
        .get(id)
        .cloned()
        .ok_or_else(|| ServiceError::not_found(kind, id))
}

fn hashed_id(prefix: &str, content: &str) -> String {
    format!("{prefix}-{}", &content_id(content)[..16])
}

impl Service {
    pub fn new(store: ExplanationStore) -> Self {
        Self::with_config(store, EngineConfig::default())
    }

    pub fn with_config(store: ExplanationStore, base_config: EngineConfig) -> Self {
        Self {
            schemas: RwLock::default(),
            datasets: RwLock::default(),
            models: RwLock::default(),
            store,
            base_config,
        }
    }

    pub fn store(&self) -> &ExplanationStore {
        &self.store
    }

    pub fn add_schema(&self, id: &str, schema: FeatureSchema) -> String {
        self.schemas
            .write()
            .expect("registry lock")
            .insert(id.to_string(), Arc::new(schema));
        id.to_string()
    }

    pub fn add_dataset(&self, id: &str, dataset: Dataset) -> String {
        self.datasets
            .write()
            .expect("registry lock")
            .insert(id.to_string(), Arc::new(dataset));
        id.to_string()
    }

    pub fn add_model(&self, model: BlackBoxModel) -> String {
        let id = model.id().to_string();
        self.models.write().expect("registry lock").insert(id.clone(), Arc::new(model));
        id
    }

    pub fn schema(&self, id: &str) -> ServiceResult<Arc<FeatureSchema>> {
        lookup(&self.schemas, "schema", id)
    }

    pub fn dataset(&self, id: &str) -> ServiceResult<Arc<Dataset>> {
        lookup(&self.datasets, "dataset", id)
    }

    pub fn model(&self, id: &str) -> ServiceResult<Arc<BlackBoxModel>> {
        lookup(&self.models, "model", id)
    }

    pub fn register_schema(&self, body: &str) -> ServiceResult<Registered> {
        let upload: SchemaUpload = serde_json::from_str(body)?;
        let id = upload.id.unwrap_or_else(|| hashed_id("schema", body));
        Ok(Registered {
            id: self.add_schema(&id, upload.schema),
        })
    }

    pub fn register_dataset(&self, body: &str) -> ServiceResult<Registered> {
        let upload: DatasetUpload = serde_json::from_str(body)?;
        let schema = self.schema(&upload.schema)?;
        let dataset = read_dataset(upload.csv.as_bytes(), schema)?;
        let id = upload.id.unwrap_or_else(|| hashed_id("dataset", body));
        Ok(Registered {
            id: self.add_dataset(&id, dataset),
        })
    }

    pub fn register_model(&self, body: &str) -> ServiceResult<Registered> {
        let upload: ModelUpload = serde_json::from_str(body)?;
        let schema = self.schema(&upload.schema)?;
        let source = ModelSource::from_json(&upload.model)?;
        let id = upload.id.unwrap_or_else(|| hashed_id("model", body));
        let model = source.build(&id, schema)?;
        Ok(Registered { id: self.add_model(model) })
    }

    /// Runs the engine and stores the canonical document. Identical inputs
    /// give identical documents and therefore the same id.
    pub fn handle_explain(&self, req: &ExplainRequest) -> ServiceResult<ExplainResponse> {
        let model = self.model(&req.model)?;
        let dataset = self.dataset(&req.dataset)?;
        let x = model.schema().observation_from_json(&req.observation)?;
        let cfg = self.base_config.with_overrides(&req.config)?;
        let document = explain(&model, &dataset, &x, &cfg)?;
        let id = self.store.put(&document.to_canonical())?;
        Ok(ExplainResponse { id, document })
    }

    /// Stores a pre-built document (fixtures, imports).
    pub fn insert_report(&self, report: &ExplanationReport) -> ServiceResult<String> {
        Ok(self.store.put(&report.to_canonical())?)
    }

    /// The stored canonical bytes.
    pub fn explanation(&self, id: &str) -> ServiceResult<String> {
        self.store
            .get(id)?
            .ok_or_else(|| ServiceError::not_found("explanation", id))
    }

    pub fn report(&self, id: &str) -> ServiceResult<ExplanationReport> {
        ExplanationReport::from_canonical(&self.explanation(id)?)
            .map_err(|e| ServiceError::Engine(format!("stored explanation `{id}` is unreadable: {e}")))
    }

    /// Read-only: merges overrides onto the stored observation and compares
    /// the stored equation against a fresh model call.
    pub fn handle_whatif(&self, req: &WhatIfRequest) -> ServiceResult<WhatIfResponse> {
        let report = self.report(&req.explanation)?;
        let model = self.model(&report.model)?;
        let schema = model.schema();
        if schema.as_ref() != &report.schema {
            return Err(ServiceError::Validation(format!(
                "model `{}` no longer matches the schema stored with the explanation",
                report.model
            )));
        }
        let overrides = req
            .overrides
            .iter()
            .map(|(k, v)| {
                let value: Value = serde_json::from_value(v.clone())
                    .map_err(|_| Error::Validation {
                        feature: k.clone(),
                        message: "value must be a number or a string".into(),
                    })?;
                Ok((k.clone(), value))
            })
            .collect::<Result<Vec<_>, Error>>()?;
        let merged: Observation = schema.apply_overrides(&report.observation, &overrides)?;
        let y_estimate = report.equation.evaluate(schema, &merged)?;
        let y_actual = model.probability(&merged)?;
        let distance = report.equation.distance_from_center(schema, &merged);
        let label = |p: f64| model.label(class_of(p, schema.threshold())).to_string();
        Ok(WhatIfResponse {
            explanation: req.explanation.clone(),
            observation: schema.observation_to_json(&merged),
            y_estimate,
            y_actual,
            gap: (y_estimate - y_actual).abs(),
            estimate_label: label(y_estimate),
            actual_label: label(y_actual),
            distance,
            validity_radius: report.equation.validity_radius,
            inside_validity_radius: distance <= report.equation.validity_radius,
        })
    }
}
