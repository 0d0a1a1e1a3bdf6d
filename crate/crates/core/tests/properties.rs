//! Property tests for the type invariants across modules. Each case builds a
//! small random world (schema, data, model, explanandum) from a proptest seed.

use std::sync::Arc;

use causex_core::counterfactual::{
    check_feasibility, delta_cost, search_counterfactuals_with, CostConfig, CostMetric, SearchLimits,
};
use causex_core::model::{class_of, Activation, BlackBoxModel, Class, DenseLayer, ModelSpec};
use causex_core::sampling::{fit_distributions, generate_neighbourhood, FeatureDistribution};
use causex_core::schema::{Dataset, FeatureDecl, FeatureSchema, Monotonic, Observation, Value};
use causex_core::surrogate::{build_terms, fit_equation, Link, TermOptions};
use causex_core::woodward::{certify, testing_intervention, CertifyOptions, Tolerances};
use causex_core::{explain, EngineConfig, ExplanationReport};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct World {
    schema: Arc<FeatureSchema>,
    data: Dataset,
    model: BlackBoxModel,
    x: Observation,
}

fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("l{i}")).collect()
}

fn world(seed: u64) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(1..=4);
    let mut features = Vec::new();
    for i in 0..d {
        let levels = names(rng.random_range(2..=5));
        let refs: Vec<&str> = levels.iter().map(String::as_str).collect();
        let mut f = match rng.random_range(0..3) {
            0 => {
                let lo: f64 = rng.random_range(-10.0..10.0);
                FeatureDecl::numeric(&format!("n{i}"), lo, lo + rng.random_range(0.5..20.0))
            }
            1 => FeatureDecl::ordinal(&format!("o{i}"), &refs),
            _ => FeatureDecl::categorical(&format!("c{i}"), &refs),
        };
        match rng.random_range(0..5) {
            0 if !f.is_categorical() => f = f.monotonic(Monotonic::IncreaseOnly),
            1 if !f.is_categorical() => f = f.monotonic(Monotonic::DecreaseOnly),
            2 => f = f.immutable(),
            _ => {}
        }
        features.push(f);
    }
    let schema = Arc::new(FeatureSchema::new(features, "y", "yes", rng.random_range(0.2..0.8)).unwrap());
    let draw = |rng: &mut ChaCha8Rng| {
        Observation::new(
            schema
                .features()
                .iter()
                .map(|f| match f.levels() {
                    Some(l) => Value::Level(l[rng.random_range(0..l.len())].clone()),
                    None => {
                        let (lo, hi) = f.scalar_range().unwrap();
                        rng.random_range(lo..=hi).into()
                    }
                })
                .collect(),
        )
    };
    let rows: Vec<Observation> = (0..30).map(|_| draw(&mut rng)).collect();
    let data = Dataset::new(schema.clone(), rows, None).unwrap();
    let x = draw(&mut rng);
    let dim = schema.encoded_dim();
    let spec = if rng.random_bool(0.5) {
        ModelSpec::Logistic {
            weights: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            bias: rng.random_range(-1.0..1.0),
        }
    } else {
        ModelSpec::Mlp {
            layers: vec![
                DenseLayer {
                    weights: (0..3).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
                    bias: vec![0.1, -0.2, 0.3],
                    activation: Activation::Relu,
                },
                DenseLayer {
                    weights: vec![(0..3).map(|_| rng.random_range(-3.0..3.0)).collect()],
                    bias: vec![0.0],
                    activation: Activation::Sigmoid,
                },
            ],
        }
    };
    let model = BlackBoxModel::from_spec("m", schema.clone(), &spec).unwrap();
    World { schema, data, model, x }
}

fn any_metric() -> impl Strategy<Value = CostMetric> {
    prop_oneof![Just(CostMetric::L1), Just(CostMetric::L2), Just(CostMetric::L1Mad)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn encode_decode_round_trip(seed in any::<u64>()) {
        let w = world(seed);
        for x in w.data.rows().iter().chain([&w.x]) {
            let e = w.schema.encode(x).unwrap();
            prop_assert_eq!(e.len(), w.schema.encoded_dim());
            prop_assert_eq!(&w.schema.decode(&e).unwrap(), x);
        }
    }

    #[test]
    fn model_outputs_are_probabilities_and_labels_follow_threshold(seed in any::<u64>()) {
        let w = world(seed);
        for x in w.data.rows() {
            let p = w.model.probability(x).unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
            prop_assert_eq!(p.to_bits(), w.model.probability(x).unwrap().to_bits());
            let pred = w.model.predict(x).unwrap();
            let positive = pred.label == w.schema.positive_label();
            prop_assert_eq!(positive, p >= w.schema.threshold());
            prop_assert_eq!(class_of(p, w.schema.threshold()) == Class::Positive, positive);
        }
    }

    #[test]
    fn fitted_distributions(seed in any::<u64>()) {
        let w = world(seed);
        let dists = fit_distributions(&w.data, &w.schema).unwrap();
        for (i, d) in dists.features().iter().enumerate() {
            match d {
                FeatureDistribution::Frequencies { frequencies, .. } => {
                    prop_assert!((frequencies.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                }
                FeatureDistribution::Gaussian { std, .. } => {
                    let decl = w.schema.feature(i);
                    let col: Vec<f64> = w.data.column(i).map(|v| decl.scalar(v).unwrap()).collect();
                    let constant = col.iter().all(|v| *v == col[0]);
                    prop_assert!(*std >= 0.0);
                    prop_assert_eq!(*std == 0.0, constant);
                }
            }
        }
        prop_assert!(dists.mads().iter().all(|m| *m > 0.0));
    }

    #[test]
    fn neighbourhood_labels_and_weights(seed in any::<u64>(), width in 0.3f64..3.0) {
        let w = world(seed);
        let dists = fit_distributions(&w.data, &w.schema).unwrap();
        let nb = generate_neighbourhood(&w.model, &w.x, &dists, 120, seed, width).unwrap();
        let max = nb.max_weight();
        prop_assert!(nb.samples.iter().any(|s| s.x == w.x && s.weight == max));
        for s in &nb.samples {
            prop_assert_eq!(s.y.to_bits(), w.model.probability(&s.x).unwrap().to_bits());
            prop_assert!(s.weight >= 0.0 && s.weight <= max);
        }
        let mut by_distance: Vec<_> = nb.samples.iter().map(|s| (s.distance, s.weight)).collect();
        by_distance.sort_by(|a, b| a.0.total_cmp(&b.0));
        prop_assert!(by_distance.windows(2).all(|p| p[1].1 <= p[0].1));
    }

    #[test]
    fn counterfactual_instances_flip_and_respect_constraints(
        seed in any::<u64>(),
        metric in any_metric(),
        cap in 1usize..=3,
        theta in prop_oneof![Just(0.9), Just(0.999), Just(1.0)],
    ) {
        let w = world(seed);
        let dists = fit_distributions(&w.data, &w.schema).unwrap();
        let cfg = CostConfig::new(metric, dists.mads().to_vec(), cap, theta).unwrap();
        let limits = SearchLimits { budget: 1500, ..SearchLimits::default() };
        let out = search_counterfactuals_with(&w.model, &w.x, &cfg, &dists, &limits).unwrap();
        let original = w.model.class(&w.x).unwrap();
        let mut last = 0.0;
        for cf in &out.instances {
            prop_assert_ne!(class_of(cf.y_actual, w.schema.threshold()), original);
            prop_assert_eq!(cf.y_actual, w.model.probability(&cf.x_cf).unwrap());
            let differing = (0..w.schema.len()).filter(|&i| cf.x_cf.get(i) != w.x.get(i)).count();
            prop_assert_eq!(cf.sparsity, differing);
            prop_assert_eq!(cf.delta.len(), differing);
            prop_assert!(cf.sparsity >= 1 && cf.sparsity <= cap);
            prop_assert!(cf.feasible && check_feasibility(&w.schema, &w.x, &cf.x_cf));
            prop_assert!(cf.plausible);
            prop_assert!(cf.cost >= 0.0);
            prop_assert_eq!(cf.cost, delta_cost(&w.schema, &w.x, &cf.x_cf, &cfg));
            prop_assert!(cf.cost >= last);
            last = cf.cost;
        }
        prop_assert!(out.queries <= limits.budget);
    }

    #[test]
    fn cost_is_a_seminorm_on_changes(seed in any::<u64>(), metric in any_metric()) {
        let w = world(seed);
        let dists = fit_distributions(&w.data, &w.schema).unwrap();
        let cfg = CostConfig::new(metric, dists.mads().to_vec(), 1, 1.0).unwrap();
        prop_assert_eq!(delta_cost(&w.schema, &w.x, &w.x, &cfg), 0.0);
        for r in w.data.rows().iter().take(10) {
            let a = delta_cost(&w.schema, &w.x, r, &cfg);
            let b = delta_cost(&w.schema, r, &w.x, &cfg);
            prop_assert!(a >= 0.0 && (a - b).abs() <= 1e-12 * a.max(1.0));
            prop_assert_eq!(a == 0.0, r == &w.x);
        }
    }

    #[test]
    fn equations_evaluate_to_probabilities(
        seed in any::<u64>(),
        quadratic in any::<bool>(),
        identity in any::<bool>(),
    ) {
        let w = world(seed);
        let dists = fit_distributions(&w.data, &w.schema).unwrap();
        let nb = generate_neighbourhood(&w.model, &w.x, &dists, 150, seed, 1.0).unwrap();
        let terms = build_terms(&w.schema, &TermOptions { quadratic, interactions: false });
        let link = if identity { Link::Identity } else { Link::Logit };
        let eq = fit_equation(&w.schema, &nb, &[], &terms, link, 1e-6).unwrap();
        prop_assert_eq!(eq.terms.len(), eq.coefficients.len());
        for s in &nb.samples {
            let e = eq.evaluate_detailed(&w.schema, &s.x).unwrap();
            prop_assert!((0.0..=1.0).contains(&e.value));
            if link == Link::Logit {
                prop_assert!(!e.clamped);
            }
        }
    }

    #[test]
    fn interventions_and_certificates(seed in any::<u64>(), eps in 0.001f64..0.3) {
        let w = world(seed);
        let dists = fit_distributions(&w.data, &w.schema).unwrap();
        let nb = generate_neighbourhood(&w.model, &w.x, &dists, 150, seed, 1.0).unwrap();
        let terms = build_terms(&w.schema, &TermOptions::default());
        let eq = fit_equation(&w.schema, &nb, &[], &terms, Link::Logit, 1e-6).unwrap();
        let tol = Tolerances { epsilon: eps, epsilon_change: 1e-4 };
        for (i, f) in w.schema.features().iter().enumerate() {
            let to = w.data.rows()[i].get(i).clone();
            let r = testing_intervention(&eq, &w.model, &w.x, &f.name, to, &tol).unwrap();
            prop_assert_eq!(r.model_changed, (r.y_model_after - r.y_model_before).abs() > tol.epsilon_change);
            prop_assert_eq!(r.eq_tracks, (r.y_eq_after - r.y_model_after).abs() <= tol.epsilon);
        }
        let probes: Vec<Observation> = nb.samples.iter().take(16).map(|s| s.x.clone()).collect();
        let options = CertifyOptions { tolerances: tol, direct_cause_probes: 8, ..CertifyOptions::default() };
        let c = certify(&eq, &w.model, &w.x, &[], &probes, &options).unwrap();
        prop_assert_eq!(c.passes, c.condition_i.holds && c.condition_ii.holds && c.condition_iii.holds);
        if let Some(wit) = &c.condition_iii.witness {
            prop_assert!(wit.model_changed && wit.eq_changed && wit.eq_tracks);
        }
        prop_assert!(!c.condition_iii.holds || c.condition_iii.witness.is_some());
        // Every recorded intervention reproduces when replayed.
        for r in &c.interventions {
            let after = r.target(&w.schema, &w.x).unwrap();
            prop_assert_eq!(r.y_model_after.to_bits(), w.model.probability(&after).unwrap().to_bits());
            prop_assert_eq!(r.y_eq_after.to_bits(), eq.evaluate(&w.schema, &after).unwrap().to_bits());
        }
        // Recertifying at the same tolerance is the identity; loosening it
        // never revokes a pass.
        prop_assert_eq!(&c.recertify(eps), &c);
        if c.passes {
            prop_assert!(c.recertify(eps * 2.0).passes);
        }
        if !c.recertify(eps / 2.0).passes {
            prop_assert!(!c.recertify(eps / 4.0).passes);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn reports_are_consistent_and_canonical(seed in any::<u64>(), n in 100usize..300) {
        let w = world(seed);
        let cfg = EngineConfig { seed, n_samples: n, budget: 2000, certify_probes: 8,
            direct_cause_probes: 8, ..EngineConfig::default() };
        let r = explain(&w.model, &w.data, &w.x, &cfg).unwrap();
        for c in &r.counterfactuals {
            prop_assert_eq!(c.fidelity_error, (c.y_estimate - c.instance.y_actual).abs());
        }
        prop_assert!(r.feature_weights.iter().all(|fw| w.schema.index_of(&fw.feature).is_ok()));
        let text = r.to_canonical();
        let back = ExplanationReport::from_canonical(&text).unwrap();
        prop_assert_eq!(&back, &r);
        prop_assert_eq!(back.to_canonical(), text);
        r.verify_against(&w.model).unwrap();
    }
}
