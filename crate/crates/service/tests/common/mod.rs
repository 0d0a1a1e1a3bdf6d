#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use causex_core::model::{load_model, BlackBoxModel};
use causex_core::report::FidelitySummary;
use causex_core::schema::{load_dataset, Dataset, FeatureSchema, Observation};
use causex_core::surrogate::{CausalEquation, Link, Term};
use causex_core::woodward::{certify, CertifyOptions};
use causex_core::{explain, EngineConfig, ExplanationReport};
use causex_service::store::ExplanationStore;
use causex_service::Service;

pub fn data_dir(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

pub struct Fixture {
    pub schema: Arc<FeatureSchema>,
    pub data: Dataset,
    pub model: BlackBoxModel,
    pub x: Observation,
}

pub fn load(name: &str) -> Fixture {
    let dir = data_dir(name);
    let schema = Arc::new(FeatureSchema::load(dir.join("schema.json")).unwrap());
    let data = load_dataset(dir.join("train.csv"), schema.clone()).unwrap();
    let model = load_model(dir.join("model.json"), schema.clone()).unwrap();
    let obs: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("observation.json")).unwrap()).unwrap();
    let x = schema.observation_from_json(&obs).unwrap();
    Fixture { schema, data, model, x }
}

/// Married exemplar: the Adult-like tree returns 0.57 once `marital` is
/// `married`, and the stored equation estimates 0.61 there.
pub fn married_equation(template: &CausalEquation) -> CausalEquation {
    CausalEquation {
        terms: vec![
            Term::Intercept,
            Term::Indicator {
                feature: "marital".into(),
                level: "never_married".into(),
            },
        ],
        coefficients: vec![0.61, -0.41],
        link: Link::Identity,
        ..template.clone()
    }
}

pub fn married_report(f: &Fixture) -> ExplanationReport {
    let cfg = EngineConfig {
        n_samples: 300,
        ..EngineConfig::default()
    };
    let mut r = explain(&f.model, &f.data, &f.x, &cfg).unwrap();
    let eq = married_equation(&r.equation);
    for rec in &mut r.counterfactuals {
        rec.y_estimate = eq.evaluate(&f.schema, &rec.instance.x_cf).unwrap();
        rec.fidelity_error = (rec.y_estimate - rec.instance.y_actual).abs();
    }
    r.fidelity_summary = FidelitySummary::of(&r.counterfactuals);
    let instances: Vec<_> = r.counterfactuals.iter().map(|c| c.instance.clone()).collect();
    r.certificate = certify(&eq, &f.model, &f.x, &instances, &[], &CertifyOptions::default()).unwrap();
    r.equation_text = eq.render();
    r.equation = eq;
    r.verify_against(&f.model).unwrap();
    r
}

pub fn adult_service() -> (Service, Fixture) {
    let f = load("adult");
    let svc = Service::new(ExplanationStore::in_memory());
    svc.add_schema("adult", f.schema.as_ref().clone());
    svc.add_dataset("adult", f.data.clone());
    svc.add_model(load_model(data_dir("adult").join("model.json"), f.schema.clone()).unwrap());
    (svc, f)
}

/// Serves `router` on an ephemeral port from a background runtime.
pub fn spawn(router: axum::Router) -> String {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, router).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}
