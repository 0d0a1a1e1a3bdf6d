mod common;

use causex_service::store::{content_id, ExplanationStore};
use causex_service::{ExplainRequest, Service, ServiceError, WhatIfRequest};
use serde_json::json;

fn request(observation: serde_json::Value) -> ExplainRequest {
    ExplainRequest {
        model: "model".into(),
        dataset: "adult".into(),
        observation,
        config: json!({"n_samples": 200}),
    }
}

fn adult_x() -> serde_json::Value {
    json!({"age": 39, "education_num": 13, "hours_per_week": 40, "marital": "never_married", "sex": "male"})
}

fn overrides(v: serde_json::Value) -> serde_json::Map<String, serde_json::Value> {
    v.as_object().unwrap().clone()
}

#[test]
fn explain_is_idempotent_and_stored() {
    let (svc, _) = common::adult_service();
    let a = svc.handle_explain(&request(adult_x())).unwrap();
    let b = svc.handle_explain(&request(adult_x())).unwrap();
    assert_eq!(a.id, b.id);
    let stored = svc.explanation(&a.id).unwrap();
    assert_eq!(stored, a.document.to_canonical());
    assert_eq!(content_id(&stored), a.id);
    assert!(!a.document.counterfactuals.is_empty());
}

#[test]
fn explain_errors() {
    let (svc, _) = common::adult_service();
    let mut req = request(adult_x());
    req.model = "missing".into();
    let err = svc.handle_explain(&req).unwrap_err();
    assert!(matches!(err, ServiceError::NotFound { kind: "model", .. }));
    assert_eq!((err.status(), err.exit_code()), (404, 3));

    let mut bad = adult_x();
    bad["hours_per_week"] = json!(500);
    let err = svc.handle_explain(&request(bad)).unwrap_err();
    assert!(matches!(err, ServiceError::Validation(_)));
    assert!(err.to_string().contains("hours_per_week"), "{err}");
    assert_eq!(err.exit_code(), 2);

    let mut req = request(adult_x());
    req.config = json!({"budget": 5});
    assert!(matches!(svc.handle_explain(&req), Err(ServiceError::Validation(_))));
}

#[test]
fn married_whatif_triple() {
    let (svc, f) = common::adult_service();
    let report = common::married_report(&f);
    let id = svc.insert_report(&report).unwrap();
    let before = svc.explanation(&id).unwrap();

    let married = report
        .counterfactuals
        .iter()
        .find(|c| c.instance.delta.iter().any(|d| d.to == "married".into()))
        .expect("married counterfactual");
    assert_eq!(married.instance.y_actual, 0.57);
    assert_eq!(married.y_estimate, 0.61);
    assert_eq!(married.fidelity_error, 0.61 - 0.57);

    let r = svc
        .handle_whatif(&WhatIfRequest {
            explanation: id.clone(),
            overrides: overrides(json!({"marital": "married"})),
        })
        .unwrap();
    assert_eq!((r.y_actual, r.y_estimate, r.gap), (0.57, 0.61, married.fidelity_error));
    assert_eq!(r.actual_label, ">50K");
    assert!(r.inside_validity_radius);
    // What-if never touches the stored document.
    assert_eq!(svc.explanation(&id).unwrap(), before);
}

#[test]
fn whatif_identity_far_and_invalid() {
    let (svc, _) = common::adult_service();
    let resp = svc.handle_explain(&request(adult_x())).unwrap();
    let same = svc
        .handle_whatif(&WhatIfRequest {
            explanation: resp.id.clone(),
            overrides: Default::default(),
        })
        .unwrap();
    assert_eq!(same.y_actual, resp.document.prediction.probability);
    assert_eq!(same.gap, resp.document.certificate.condition_ii.error);
    assert_eq!(same.gap, (same.y_estimate - same.y_actual).abs());
    assert_eq!(same.distance, 0.0);

    let far = svc
        .handle_whatif(&WhatIfRequest {
            explanation: resp.id.clone(),
            overrides: overrides(json!({"hours_per_week": 99, "education_num": 1, "age": 90})),
        })
        .unwrap();
    assert!(!far.inside_validity_radius, "{far:?}");

    for bad in [json!({"hours_per_week": 100}), json!({"nope": 1}), json!({"marital": "single"})] {
        let err = svc
            .handle_whatif(&WhatIfRequest {
                explanation: resp.id.clone(),
                overrides: overrides(bad),
            })
            .unwrap_err();
        assert!(matches!(err, ServiceError::Validation(_)), "{err}");
    }
    let err = svc
        .handle_whatif(&WhatIfRequest {
            explanation: content_id("nothing"),
            overrides: Default::default(),
        })
        .unwrap_err();
    assert!(matches!(err, ServiceError::NotFound { kind: "explanation", .. }));
}

#[test]
fn registration_from_json_bodies() {
    let svc = Service::new(ExplanationStore::in_memory());
    let schema = std::fs::read_to_string(common::data_dir("jones").join("schema.json")).unwrap();
    let csv = std::fs::read_to_string(common::data_dir("jones").join("train.csv")).unwrap();
    let id = svc
        .register_schema(&format!(r#"{{"id": "jones", "schema": {schema}}}"#))
        .unwrap()
        .id;
    assert_eq!(id, "jones");
    let body = json!({"schema": "jones", "csv": csv}).to_string();
    let ds = svc.register_dataset(&body).unwrap().id;
    assert!(ds.starts_with("dataset-"));
    assert_eq!(svc.register_dataset(&body).unwrap().id, ds);
    let model = json!({"id": "step", "schema": "jones", "model": {"kind": "tree", "nodes": [
        {"feature": "income", "op": "<", "value": 35000, "left": 1, "right": 2},
        {"leaf": 0.0}, {"leaf": 1.0}]}});
    assert_eq!(svc.register_model(&model.to_string()).unwrap().id, "step");

    assert!(matches!(svc.register_schema("{"), Err(ServiceError::Validation(_))));
    let missing = json!({"schema": "nope", "csv": "a\n1\n"}).to_string();
    assert!(matches!(svc.register_dataset(&missing), Err(ServiceError::NotFound { .. })));
    let bad_csv = json!({"schema": "jones", "csv": "income,age,education\n1,2,phd\n"}).to_string();
    assert!(matches!(svc.register_dataset(&bad_csv), Err(ServiceError::Validation(_))));
    let bad_model = json!({"schema": "jones", "model": {"kind": "logistic", "weights": [1.0], "bias": 0.0}});
    assert!(matches!(svc.register_model(&bad_model.to_string()), Err(ServiceError::Validation(_))));
}

#[test]
fn disk_store_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let (_, f) = common::adult_service();
    let report = common::married_report(&f);
    let id = {
        let svc = Service::new(ExplanationStore::on_disk(dir.path()).unwrap());
        svc.insert_report(&report).unwrap()
    };
    let svc = Service::new(ExplanationStore::on_disk(dir.path()).unwrap());
    assert_eq!(svc.explanation(&id).unwrap(), report.to_canonical());
    assert_eq!(svc.report(&id).unwrap(), report);
}
