//! Counterfactual search: minimum-cost changes to an observation that flip
//! the model's class, subject to actionability (feasibility) and density
//! (plausibility) constraints.
//!
//! The search runs in two phases. Every mutable feature first gets a
//! single-feature boundary search over a 256-point grid (bisection refines
//! numeric boundaries). Multi-feature changes are then enumerated best-first
//! by cost over the same per-feature candidate grids, so the first flipping
//! assignments found are the cheapest ones on the grid. Candidates are
//! generated inside the feasible and plausible region, and every result is
//! re-checked and re-predicted before it is returned.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::{class_of, BlackBoxModel, Class};
use crate::sampling::{FeatureDistribution, PerturbationDistributions};
use crate::schema::{Dataset, FeatureDecl, FeatureKind, FeatureSchema, Monotonic, Observation, Value};

/// Number of grid points used by the coarse boundary scan.
pub const LINE_SEARCH_GRID: usize = 256;

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Median absolute deviation per feature. Constant columns get 1% of the
/// feature range; categorical features get 1 (one unit per level change).
pub fn feature_mads(dataset: &Dataset, schema: &FeatureSchema) -> Vec<f64> {
    schema
        .features()
        .iter()
        .enumerate()
        .map(|(i, decl)| match decl.scalar_range() {
            None => 1.0,
            Some((lo, hi)) => {
                let mut xs: Vec<f64> = dataset.column(i).filter_map(|v| decl.scalar(v)).collect();
                xs.sort_by(f64::total_cmp);
                let m = median(&xs);
                let mut dev: Vec<f64> = xs.iter().map(|x| (x - m).abs()).collect();
                dev.sort_by(f64::total_cmp);
                let mad = median(&dev);
                if mad > 0.0 {
                    mad
                } else {
                    0.01 * (hi - lo)
                }
            }
        })
        .collect()
}

/// L2 distance where numeric and ordinal deltas are divided by their MAD and
/// each changed categorical feature contributes one unit.
pub fn scaled_distance(schema: &FeatureSchema, mads: &[f64], a: &Observation, b: &Observation) -> f64 {
    schema
        .features()
        .iter()
        .enumerate()
        .map(|(i, decl)| match (decl.scalar(a.get(i)), decl.scalar(b.get(i))) {
            (Some(u), Some(v)) => ((u - v) / mads[i]).powi(2),
            _ => {
                if a.get(i) == b.get(i) {
                    0.0
                } else {
                    1.0
                }
            }
        })
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CostMetric {
    L1,
    L2,
    #[serde(rename = "L1_MAD")]
    L1Mad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostConfig {
    pub metric: CostMetric,
    pub mads: Vec<f64>,
    pub sparsity_cap: usize,
    /// Plausibility level θ: numeric values must lie within `z(θ)` standard
    /// deviations of the training mean. θ = 1 disables the band.
    pub plausibility_floor: f64,
}

impl CostConfig {
    pub fn new(metric: CostMetric, mads: Vec<f64>, sparsity_cap: usize, plausibility_floor: f64) -> Result<Self> {
        if mads.iter().any(|m| !(*m > 0.0 && m.is_finite())) {
            return Err(Error::Config("every MAD must be positive".into()));
        }
        if sparsity_cap < 1 {
            return Err(Error::Config("sparsity cap must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&plausibility_floor) {
            return Err(Error::Config(format!(
                "plausibility floor must lie in [0, 1], got {plausibility_floor}"
            )));
        }
        Ok(Self {
            metric,
            mads,
            sparsity_cap,
            plausibility_floor,
        })
    }

    /// Additive contribution of changing feature `i` from `from` to `to`.
    /// The total cost is the sum of contributions (square-rooted for L2).
    fn component(&self, decl: &FeatureDecl, i: usize, from: &Value, to: &Value) -> f64 {
        match (decl.scalar(from), decl.scalar(to)) {
            (Some(a), Some(b)) => {
                let d = (b - a).abs();
                match self.metric {
                    CostMetric::L1 => d,
                    CostMetric::L2 => d * d,
                    CostMetric::L1Mad => d / self.mads[i],
                }
            }
            _ => {
                if from == to {
                    0.0
                } else {
                    1.0
                }
            }
        }
    }

    fn finish(&self, key: f64) -> f64 {
        match self.metric {
            CostMetric::L2 => key.sqrt(),
            _ => key,
        }
    }
}

pub fn delta_cost(schema: &FeatureSchema, x: &Observation, x_cf: &Observation, cfg: &CostConfig) -> f64 {
    let key = schema
        .features()
        .iter()
        .enumerate()
        .map(|(i, decl)| cfg.component(decl, i, x.get(i), x_cf.get(i)))
        .sum();
    cfg.finish(key)
}

/// No immutable feature changed and every monotonic direction respected.
pub fn check_feasibility(schema: &FeatureSchema, x: &Observation, x_cf: &Observation) -> bool {
    schema.features().iter().enumerate().all(|(i, decl)| {
        let (from, to) = (x.get(i), x_cf.get(i));
        if from == to {
            return true;
        }
        if decl.immutable {
            return false;
        }
        match (decl.monotonic, decl.scalar(from), decl.scalar(to)) {
            (Monotonic::None, _, _) => true,
            (Monotonic::IncreaseOnly, Some(a), Some(b)) => b >= a,
            (Monotonic::DecreaseOnly, Some(a), Some(b)) => b <= a,
            _ => false,
        }
    })
}

/// Standard-normal quantile for the plausibility band, floored at 0.
/// θ = 1 gives an unbounded band.
pub fn plausibility_z(theta: f64) -> f64 {
    if theta >= 1.0 {
        f64::INFINITY
    } else if theta <= 0.5 {
        0.0
    } else {
        Normal::standard().inverse_cdf(theta)
    }
}

fn band_std(decl: &FeatureDecl, std: f64) -> f64 {
    match decl.scalar_range() {
        Some((lo, hi)) if std <= 0.0 => 0.01 * (hi - lo),
        _ => std,
    }
}

/// Plausible band `[mean - z*std, mean + z*std]` of a numeric/ordinal feature.
fn plausible_band(decl: &FeatureDecl, dist: &FeatureDistribution, theta: f64) -> Option<(f64, f64)> {
    match dist {
        FeatureDistribution::Gaussian { mean, std } => {
            let z = plausibility_z(theta);
            if z.is_infinite() {
                Some((f64::NEG_INFINITY, f64::INFINITY))
            } else {
                let half = z * band_std(decl, *std);
                Some((mean - half, mean + half))
            }
        }
        FeatureDistribution::Frequencies { .. } => None,
    }
}

/// Every numeric/ordinal value lies within the fitted band and every
/// categorical level was observed in the training data.
pub fn check_plausibility(
    schema: &FeatureSchema,
    x_cf: &Observation,
    dists: &PerturbationDistributions,
    theta: f64,
) -> bool {
    (0..schema.len()).all(|i| feature_plausible(schema, x_cf, i, dists, theta))
}

fn feature_plausible(
    schema: &FeatureSchema,
    x: &Observation,
    i: usize,
    dists: &PerturbationDistributions,
    theta: f64,
) -> bool {
    let decl = schema.feature(i);
    match (dists.feature(i), decl.scalar(x.get(i))) {
        (dist @ FeatureDistribution::Gaussian { .. }, Some(v)) => {
            let (lo, hi) = plausible_band(decl, dist, theta).expect("gaussian");
            v >= lo && v <= hi
        }
        (FeatureDistribution::Frequencies { frequencies, .. }, None) => match (&decl.kind, x.get(i)) {
            (FeatureKind::Categorical { levels }, Value::Level(l)) => levels
                .iter()
                .position(|a| a == l)
                .map(|k| frequencies[k] > 0.0)
                .unwrap_or(false),
            _ => false,
        },
        _ => false,
    }
}

/// Record of one feature's change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureChange {
    pub feature: String,
    pub from: Value,
    pub to: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualInstance {
    pub x_cf: Observation,
    pub delta: Vec<FeatureChange>,
    pub cost: f64,
    pub sparsity: usize,
    pub y_actual: f64,
    pub feasible: bool,
    pub plausible: bool,
}

impl CounterfactualInstance {
    fn changed_indices(&self, schema: &FeatureSchema) -> Vec<usize> {
        self.delta
            .iter()
            .filter_map(|c| schema.index_of(&c.feature).ok())
            .collect()
    }
}

pub fn changes(schema: &FeatureSchema, x: &Observation, x_cf: &Observation) -> Vec<FeatureChange> {
    schema
        .features()
        .iter()
        .enumerate()
        .filter(|(i, _)| x.get(*i) != x_cf.get(*i))
        .map(|(i, decl)| FeatureChange {
            feature: decl.name.clone(),
            from: x.get(i).clone(),
            to: x_cf.get(i).clone(),
        })
        .collect()
}

/// Counts model queries against a budget. `None` means the budget is spent.
struct Prober<'a> {
    model: &'a BlackBoxModel,
    used: usize,
    budget: usize,
}

impl<'a> Prober<'a> {
    fn new(model: &'a BlackBoxModel, budget: usize) -> Self {
        Self { model, used: 0, budget }
    }

    fn remaining(&self) -> usize {
        self.budget.saturating_sub(self.used)
    }

    fn probability(&mut self, x: &Observation) -> Result<Option<f64>> {
        if self.used >= self.budget {
            return Ok(None);
        }
        self.used += 1;
        self.model.probability(x).map(Some)
    }

    fn class(&mut self, x: &Observation) -> Result<Option<Class>> {
        let threshold = self.model.schema().threshold();
        Ok(self.probability(x)?.map(|p| class_of(p, threshold)))
    }
}

fn grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if hi <= lo {
        return vec![lo];
    }
    (0..points)
        .map(|k| {
            if k == points - 1 {
                hi
            } else {
                lo + (hi - lo) * k as f64 / (points - 1) as f64
            }
        })
        .collect()
}

/// Bisects between `near` (original class) and `far` (flipped) along feature
/// `i` until the bracket is at most `tol` wide and returns the flipped end.
fn bisect(
    prober: &mut Prober<'_>,
    base: &Observation,
    i: usize,
    mut near: f64,
    mut far: f64,
    original: Class,
    tol: f64,
) -> Result<f64> {
    let decl = prober.model.schema().feature(i).clone();
    while (far - near).abs() > tol {
        let mid = 0.5 * (near + far);
        if mid == near || mid == far {
            break;
        }
        match prober.class(&base.with(i, decl.from_scalar(mid)))? {
            None => break,
            Some(c) if c != original => far = mid,
            Some(_) => near = mid,
        }
    }
    Ok(far)
}

/// Candidate values of feature `i` for a counterfactual of `x`, in ascending
/// scalar order: the grid over the allowed interval for numeric features, all
/// allowed ranks for ordinals, all other plausible levels for categoricals.
fn candidate_values(
    schema: &FeatureSchema,
    x: &Observation,
    i: usize,
    limits: Option<(&PerturbationDistributions, f64)>,
) -> Vec<Value> {
    let decl = schema.feature(i);
    let current = x.get(i);
    match &decl.kind {
        FeatureKind::Categorical { levels } => levels
            .iter()
            .enumerate()
            .filter(|(_, l)| current != &Value::Level((*l).clone()))
            .filter(|(k, _)| match limits.map(|(d, _)| d.feature(i)) {
                Some(FeatureDistribution::Frequencies { frequencies, .. }) => frequencies[*k] > 0.0,
                _ => true,
            })
            .map(|(_, l)| Value::Level(l.clone()))
            .collect(),
        _ => {
            let (mut lo, mut hi) = decl.scalar_range().expect("scalar feature");
            let v = decl.scalar(current).expect("validated");
            if limits.is_some() {
                match decl.monotonic {
                    Monotonic::IncreaseOnly => lo = lo.max(v),
                    Monotonic::DecreaseOnly => hi = hi.min(v),
                    Monotonic::None => {}
                }
            }
            if let Some((dists, theta)) = limits {
                if let Some((blo, bhi)) = plausible_band(decl, dists.feature(i), theta) {
                    lo = lo.max(blo);
                    hi = hi.min(bhi);
                }
            }
            if lo > hi {
                return Vec::new();
            }
            let points: Vec<f64> = match decl.kind {
                FeatureKind::Ordinal { .. } => {
                    let (first, last) = (lo.ceil() as i64, hi.floor() as i64);
                    (first..=last).map(|r| r as f64).collect()
                }
                _ => grid(lo, hi, LINE_SEARCH_GRID),
            };
            points
                .into_iter()
                .filter(|p| *p != v)
                .map(|p| decl.from_scalar(p))
                .collect()
        }
    }
}

/// Single-feature search restricted to `candidates` (ascending). Returns the
/// flip nearest to `x` (refined by bisection for numeric features) together
/// with the class of each candidate that was evaluated.
fn line_search_over(
    prober: &mut Prober<'_>,
    x: &Observation,
    i: usize,
    candidates: &[Value],
    original: Class,
    tol: f64,
) -> Result<(Option<Observation>, Vec<Option<Class>>)> {
    let schema = prober.model.schema().clone();
    let decl = schema.feature(i);
    let mut classes = Vec::with_capacity(candidates.len());
    for value in candidates {
        classes.push(prober.class(&x.with(i, value.clone()))?);
    }
    let flipped = |k: usize| matches!(classes[k], Some(c) if c != original);

    if decl.is_categorical() {
        let found = (0..candidates.len()).find(|&k| flipped(k));
        return Ok((found.map(|k| x.with(i, candidates[k].clone())), classes));
    }

    let v = decl.scalar(x.get(i)).expect("scalar feature");
    let scalars: Vec<f64> = candidates.iter().map(|c| decl.scalar(c).expect("scalar")).collect();
    let nearest = (0..candidates.len())
        .filter(|&k| flipped(k))
        .min_by(|&a, &b| {
            (scalars[a] - v)
                .abs()
                .total_cmp(&(scalars[b] - v).abs())
                .then(scalars[a].total_cmp(&scalars[b]))
        });
    let Some(k) = nearest else {
        return Ok((None, classes));
    };
    if !decl.is_numeric() {
        return Ok((Some(x.with(i, candidates[k].clone())), classes));
    }
    let far = scalars[k];
    let near = if far > v {
        if k > 0 && scalars[k - 1] > v {
            scalars[k - 1]
        } else {
            v
        }
    } else if k + 1 < scalars.len() && scalars[k + 1] < v {
        scalars[k + 1]
    } else {
        v
    };
    let refined = bisect(prober, x, i, near, far, original, tol)?;
    Ok((Some(x.with(i, decl.from_scalar(refined))), classes))
}

/// Single-feature boundary search over the feature's full declared range.
/// Numeric features are scanned on a 256-point grid then refined by bisection
/// to a bracket of width `tol`; ordinal features scan every rank; categorical
/// features return the first flipping level in declared order.
pub fn boundary_line_search(
    model: &BlackBoxModel,
    x: &Observation,
    feature: &str,
    tol: f64,
) -> Result<Option<Observation>> {
    let schema = model.schema().clone();
    schema.validate(x)?;
    let i = schema.index_of(feature)?;
    let mut prober = Prober::new(model, usize::MAX);
    let original = prober.class(x)?.expect("unbounded budget");
    let candidates = candidate_values(&schema, x, i, None);
    Ok(line_search_over(&mut prober, x, i, &candidates, original, tol)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchLimits {
    /// Maximum number of model queries.
    pub budget: usize,
    pub max_results: usize,
    /// Bisection bracket width as a fraction of each numeric feature's range.
    pub relative_tol: f64,
}

impl Default for SearchLimits {
    fn default() -> Self {
        Self {
            budget: 10_000,
            max_results: 8,
            relative_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub instances: Vec<CounterfactualInstance>,
    pub queries: usize,
    pub budget_exhausted: bool,
}

#[derive(Debug, Clone, PartialEq)]
struct Frontier {
    key: f64,
    /// (feature, candidate rank) pairs with strictly increasing feature order.
    assignment: Vec<(usize, usize)>,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed so BinaryHeap pops the cheapest, then sparsest, then
        // earliest in schema order.
        other
            .key
            .total_cmp(&self.key)
            .then_with(|| other.assignment.len().cmp(&self.assignment.len()))
            .then_with(|| other.assignment.cmp(&self.assignment))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Runs the search with default limits and the given query budget.
pub fn search_counterfactuals(
    model: &BlackBoxModel,
    x: &Observation,
    cfg: &CostConfig,
    dists: &PerturbationDistributions,
    budget: usize,
) -> Result<SearchOutcome> {
    search_counterfactuals_with(
        model,
        x,
        cfg,
        dists,
        &SearchLimits {
            budget,
            ..SearchLimits::default()
        },
    )
}

pub fn search_counterfactuals_with(
    model: &BlackBoxModel,
    x: &Observation,
    cfg: &CostConfig,
    dists: &PerturbationDistributions,
    limits: &SearchLimits,
) -> Result<SearchOutcome> {
    if limits.budget < 1000 {
        return Err(Error::Config(format!("query budget must be at least 1000, got {}", limits.budget)));
    }
    if limits.max_results == 0 {
        return Err(Error::Config("max_results must be at least 1".into()));
    }
    let schema = model.schema().clone();
    schema.validate(x)?;
    if cfg.mads.len() != schema.len() {
        return Err(Error::Config(format!("{} MADs for {} features", cfg.mads.len(), schema.len())));
    }
    let theta = cfg.plausibility_floor;
    // Verification of the final list is paid for up front.
    let reserve = limits.max_results;
    let mut prober = Prober::new(model, limits.budget - reserve);
    let empty = |prober: &Prober<'_>| SearchOutcome {
        instances: Vec::new(),
        queries: prober.used,
        budget_exhausted: false,
    };

    let original = match prober.class(x)? {
        Some(c) => c,
        None => return Ok(empty(&prober)),
    };
    // Features left at x's values must themselves be plausible.
    let unchanged_plausible: Vec<bool> = (0..schema.len())
        .map(|i| feature_plausible(&schema, x, i, dists, theta))
        .collect();

    let mutable: Vec<usize> = (0..schema.len()).filter(|&i| !schema.feature(i).immutable).collect();
    let mut candidates: HashMap<usize, Vec<Value>> = HashMap::new();
    for &i in &mutable {
        candidates.insert(i, candidate_values(&schema, x, i, Some((dists, theta))));
    }

    // Phase 1: single-feature boundary search.
    let mut found: Vec<Observation> = Vec::new();
    let mut single_classes: HashMap<usize, Vec<Option<Class>>> = HashMap::new();
    for &i in &mutable {
        let decl = schema.feature(i);
        let tol = decl
            .scalar_range()
            .map(|(lo, hi)| limits.relative_tol * (hi - lo))
            .unwrap_or(0.0);
        let (hit, classes) = line_search_over(&mut prober, x, i, &candidates[&i], original, tol)?;
        let others_ok = (0..schema.len()).all(|j| j == i || unchanged_plausible[j]);
        if let Some(obs) = hit {
            if others_ok {
                found.push(obs);
            }
        }
        single_classes.insert(i, classes);
    }

    // Phase 2: best-first enumeration of multi-feature assignments.
    let mut order: HashMap<usize, Vec<(f64, usize)>> = HashMap::new();
    for &i in &mutable {
        let decl = schema.feature(i);
        let mut ranked: Vec<(f64, usize)> = candidates[&i]
            .iter()
            .enumerate()
            .map(|(k, v)| (cfg.component(decl, i, x.get(i), v), k))
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        order.insert(i, ranked);
    }
    let active: Vec<usize> = mutable.iter().copied().filter(|i| !order[i].is_empty()).collect();
    let mut multi: Vec<(f64, Observation)> = Vec::new();
    let mut exhausted = false;
    if cfg.sparsity_cap >= 2 && active.len() >= 2 {
        let mut heap = BinaryHeap::new();
        for &i in &active {
            heap.push(Frontier {
                key: order[&i][0].0,
                assignment: vec![(i, 0)],
            });
        }
        let single_cost = |i: usize, rank: usize| order[&i][rank].0;
        let build = |assignment: &[(usize, usize)]| {
            let mut obs = x.clone();
            for &(i, rank) in assignment {
                let k = order[&i][rank].1;
                obs.set(i, candidates[&i][k].clone());
            }
            obs
        };
        let kth_single_bound = {
            let mut costs: Vec<f64> = found.iter().map(|o| cost_key(&schema, cfg, x, o)).collect();
            costs.sort_by(f64::total_cmp);
            costs
        };
        while let Some(state) = heap.pop() {
            // Nothing cheaper than the current k-th best can remain.
            let mut best: Vec<f64> = kth_single_bound.clone();
            best.extend(multi.iter().map(|(k, _)| *k));
            best.sort_by(f64::total_cmp);
            if best.len() >= limits.max_results && state.key > best[limits.max_results - 1] {
                break;
            }
            let &(last, rank) = state.assignment.last().expect("non-empty");
            let prefix_key = state.key - single_cost(last, rank);
            if rank + 1 < order[&last].len() {
                let mut sibling = state.assignment.clone();
                sibling.last_mut().expect("non-empty").1 = rank + 1;
                heap.push(Frontier {
                    key: prefix_key + single_cost(last, rank + 1),
                    assignment: sibling,
                });
            }

            let class = if state.assignment.len() == 1 {
                single_classes[&last][order[&last][rank].1]
            } else {
                let obs = build(&state.assignment);
                let changed: Vec<usize> = state.assignment.iter().map(|a| a.0).collect();
                if !(0..schema.len()).all(|j| changed.contains(&j) || unchanged_plausible[j]) {
                    continue;
                }
                match prober.class(&obs)? {
                    Some(c) => Some(c),
                    None => {
                        exhausted = true;
                        break;
                    }
                }
            };
            match class {
                Some(c) if c != original => {
                    if state.assignment.len() >= 2 {
                        multi.push((state.key, build(&state.assignment)));
                    }
                }
                None => {}
                Some(_) => {
                    if state.assignment.len() < cfg.sparsity_cap {
                        for &j in active.iter().filter(|&&j| j > last) {
                            let mut next = state.assignment.clone();
                            next.push((j, 0));
                            heap.push(Frontier {
                                key: state.key + single_cost(j, 0),
                                assignment: next,
                            });
                        }
                    }
                }
            }
        }
    }

    // Pull numeric coordinates of multi-feature flips toward x.
    for (_, obs) in multi.iter_mut() {
        for i in 0..schema.len() {
            let decl = schema.feature(i);
            if !decl.is_numeric() || obs.get(i) == x.get(i) {
                continue;
            }
            let v = decl.scalar(x.get(i)).expect("numeric");
            let far = decl.scalar(obs.get(i)).expect("numeric");
            let grid_vals: Vec<f64> = candidates[&i].iter().filter_map(|c| decl.scalar(c)).collect();
            let near = if far > v {
                grid_vals.iter().copied().filter(|g| *g > v && *g < far).fold(v, f64::max)
            } else {
                grid_vals.iter().copied().filter(|g| *g < v && *g > far).fold(v, f64::min)
            };
            match prober.class(&obs.with(i, decl.from_scalar(near)))? {
                Some(c) if c == original => {
                    let (lo, hi) = decl.scalar_range().expect("numeric");
                    let refined = bisect(&mut prober, obs, i, near, far, original, limits.relative_tol * (hi - lo))?;
                    obs.set(i, decl.from_scalar(refined));
                }
                _ => {}
            }
        }
    }
    found.extend(multi.into_iter().map(|(_, o)| o));

    // Rank, filter, dedupe, truncate, then verify with fresh predictions.
    let mut ranked: Vec<(f64, Vec<usize>, Observation)> = found
        .into_iter()
        .filter(|o| check_feasibility(&schema, x, o) && check_plausibility(&schema, o, dists, theta))
        .filter(|o| changes(&schema, x, o).len() <= cfg.sparsity_cap)
        .map(|o| {
            let idx = (0..schema.len()).filter(|&i| o.get(i) != x.get(i)).collect();
            (delta_cost(&schema, x, &o, cfg), idx, o)
        })
        .collect();
    ranked.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1.len().cmp(&b.1.len()))
            .then(a.1.cmp(&b.1))
    });
    ranked.dedup_by(|a, b| a.2 == b.2);
    ranked.truncate(limits.max_results);

    let exhausted = exhausted || prober.remaining() == 0;
    prober.budget += reserve;
    let mut instances = Vec::with_capacity(ranked.len());
    for (cost, idx, obs) in ranked {
        let Some(y) = prober.probability(&obs)? else { break };
        if class_of(y, schema.threshold()) == original {
            continue;
        }
        instances.push(CounterfactualInstance {
            delta: changes(&schema, x, &obs),
            cost,
            sparsity: idx.len(),
            y_actual: y,
            feasible: true,
            plausible: true,
            x_cf: obs,
        });
    }
    // Ordering is by (cost, sparsity, schema order); re-sorting stays stable.
    instances.sort_by(|a, b| {
        a.cost
            .total_cmp(&b.cost)
            .then(a.sparsity.cmp(&b.sparsity))
            .then_with(|| a.changed_indices(&schema).cmp(&b.changed_indices(&schema)))
    });
    Ok(SearchOutcome {
        instances,
        queries: prober.used,
        budget_exhausted: exhausted,
    })
}

fn cost_key(schema: &FeatureSchema, cfg: &CostConfig, x: &Observation, o: &Observation) -> f64 {
    schema
        .features()
        .iter()
        .enumerate()
        .map(|(i, decl)| cfg.component(decl, i, x.get(i), o.get(i)))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use crate::sampling::fit_distributions;
    use crate::schema::FeatureDecl;
    use std::sync::Arc;

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

    fn jones() -> Observation {
        Observation::new(vec![32000.0.into(), 45.0.into(), "graduate".into()])
    }

    fn cfg(metric: CostMetric, mads: Vec<f64>) -> CostConfig {
        CostConfig::new(metric, mads, 2, 1.0).unwrap()
    }

    #[test]
    fn jones_costs() {
        let s = jones_schema();
        let cf = jones().with(0, 35000.0.into());
        assert_eq!(delta_cost(&s, &jones(), &cf, &cfg(CostMetric::L1, vec![1.0; 3])), 3000.0);
        let mad = cfg(CostMetric::L1Mad, vec![10000.0, 10.0, 1.0]);
        assert!((delta_cost(&s, &jones(), &cf, &mad) - 0.3).abs() < 1e-15);
        for metric in [CostMetric::L1, CostMetric::L2, CostMetric::L1Mad] {
            assert_eq!(delta_cost(&s, &jones(), &jones(), &cfg(metric, vec![1.0; 3])), 0.0);
        }
        let both = cf.with(2, "none".into());
        assert_eq!(delta_cost(&s, &jones(), &both, &cfg(CostMetric::L1, vec![1.0; 3])), 3001.0);
        let l2 = delta_cost(&s, &jones(), &both, &cfg(CostMetric::L2, vec![1.0; 3]));
        assert!((l2 - (3000.0f64.powi(2) + 1.0).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn feasibility_rules() {
        let s = jones_schema();
        assert!(!check_feasibility(&s, &jones(), &jones().with(1, 44.0.into())));
        assert!(check_feasibility(&s, &jones(), &jones()));
        assert!(check_feasibility(&s, &jones(), &jones().with(0, 35000.0.into())));
        assert!(!check_feasibility(&s, &jones(), &jones().with(0, 31000.0.into())));
    }

    #[test]
    fn plausibility_band() {
        let s = Arc::new(
            FeatureSchema::new(
                vec![FeatureDecl::numeric("a", -100.0, 100.0), FeatureDecl::categorical("c", &["p", "q"])],
                "y",
                "pos",
                0.5,
            )
            .unwrap(),
        );
        let rows = [-1.0, 0.0, 1.0]
            .iter()
            .map(|&a| Observation::new(vec![a.into(), "p".into()]))
            .collect();
        let d = fit_distributions(&Dataset::new(s.clone(), rows, None).unwrap(), &s).unwrap();
        let at_mean = Observation::new(vec![0.0.into(), "p".into()]);
        for theta in [0.0, 0.3, 0.5, 0.9, 0.99] {
            assert!(check_plausibility(&s, &at_mean, &d, theta));
        }
        let far = Observation::new(vec![10.0.into(), "p".into()]);
        assert!(!check_plausibility(&s, &far, &d, 0.99));
        assert!(check_plausibility(&s, &far, &d, 1.0));
        let unseen = Observation::new(vec![0.0.into(), "q".into()]);
        assert!(!check_plausibility(&s, &unseen, &d, 1.0));
        assert!((plausibility_z(0.99) - 2.326_347_874).abs() < 1e-6);
    }

    #[test]
    fn mads_with_degenerate_column() {
        let s = jones_schema();
        let rows = [(30000.0, 40.0), (40000.0, 40.0), (60000.0, 40.0)]
            .iter()
            .map(|&(i, a)| Observation::new(vec![i.into(), a.into(), "none".into()]))
            .collect();
        let d = Dataset::new(s.clone(), rows, None).unwrap();
        let mads = feature_mads(&d, &s);
        assert_eq!(mads[0], 10000.0);
        assert!((mads[1] - 0.82).abs() < 1e-12);
        assert_eq!(mads[2], 1.0);
    }

    fn income_tree(s: &Arc<FeatureSchema>, cut: f64) -> BlackBoxModel {
        let spec = ModelSpec::from_json(&format!(
            r#"{{"kind":"tree","nodes":[{{"feature":"income","op":"<","value":{cut},"left":1,"right":2}},{{"leaf":0.2}},{{"leaf":0.8}}]}}"#
        ))
        .unwrap();
        BlackBoxModel::from_spec("income-threshold", s.clone(), &spec).unwrap()
    }

    #[test]
    fn line_search_finds_income_threshold() {
        let s = jones_schema();
        let m = income_tree(&s, 35000.0);
        let hit = boundary_line_search(&m, &jones(), "income", 0.5).unwrap().unwrap();
        let v = match hit.get(0) {
            Value::Number(v) => *v,
            _ => unreachable!(),
        };
        // Oracle: $1 grid over the range, nearest flipping value.
        let oracle = (0..=200_000)
            .map(|k| k as f64)
            .filter(|&w| m.class(&jones().with(0, w.into())).unwrap() == Class::Positive)
            .min_by(|a, b| (a - 32000.0).abs().total_cmp(&(b - 32000.0).abs()))
            .unwrap();
        assert_eq!(oracle, 35000.0);
        assert!(v >= oracle && v - oracle <= 0.5, "{v}");
        assert!(boundary_line_search(&m, &jones(), "education", 0.5).unwrap().is_none());
    }

    #[test]
    fn constant_model_has_no_boundary() {
        let s = jones_schema();
        let m = BlackBoxModel::from_fn("half", s.clone(), |_| 0.3);
        for f in ["income", "age", "education"] {
            assert!(boundary_line_search(&m, &jones(), f, 0.5).unwrap().is_none());
        }
    }

    #[test]
    fn categorical_line_search_returns_flipping_level() {
        let s = Arc::new(
            FeatureSchema::new(
                vec![FeatureDecl::categorical("marital", &["never_married", "married", "divorced"])],
                "y",
                "pos",
                0.5,
            )
            .unwrap(),
        );
        let m = BlackBoxModel::from_fn("m", s.clone(), |e| if e[1] == 1.0 { 0.57 } else { 0.3 });
        let x = Observation::new(vec!["never_married".into()]);
        let hit = boundary_line_search(&m, &x, "marital", 0.5).unwrap().unwrap();
        assert_eq!(hit.get(0), &Value::from("married"));
    }

    fn dists_for(s: &Arc<FeatureSchema>) -> PerturbationDistributions {
        let rows = (0..40)
            .map(|k| {
                Observation::new(vec![
                    (20000.0 + 1000.0 * k as f64).into(),
                    (25.0 + k as f64).into(),
                    if k % 2 == 0 { "graduate" } else { "none" }.into(),
                ])
            })
            .collect();
        fit_distributions(&Dataset::new(s.clone(), rows, None).unwrap(), s).unwrap()
    }

    #[test]
    fn jones_search_changes_income_only() {
        let s = jones_schema();
        let m = income_tree(&s, 35000.0);
        let d = dists_for(&s);
        let cfg = CostConfig::new(CostMetric::L1, d.mads().to_vec(), 2, 1.0).unwrap();
        let out = search_counterfactuals(&m, &jones(), &cfg, &d, 5000).unwrap();
        let top = &out.instances[0];
        assert_eq!(top.sparsity, 1);
        assert_eq!(top.delta[0].feature, "income");
        assert!((top.cost - 3000.0).abs() <= 0.5, "{}", top.cost);
        assert!(out.instances.iter().all(|c| c.x_cf.get(1) == &Value::Number(45.0)));
        assert!(out.queries <= 5000);
        for w in out.instances.windows(2) {
            assert!(w[0].cost <= w[1].cost);
        }
    }

    #[test]
    fn needs_two_features_for_conjunction() {
        let s = jones_schema();
        // Positive iff income >= 34000 and education = graduate.
        let spec = ModelSpec::from_json(
            r#"{"kind":"tree","nodes":[
                {"feature":"education=graduate","op":"<","value":0.5,"left":1,"right":2},
                {"leaf":0.1},
                {"feature":"income","op":"<","value":34000,"left":3,"right":4},
                {"leaf":0.1},{"leaf":0.9}]}"#,
        )
        .unwrap();
        let m = BlackBoxModel::from_spec("and", s.clone(), &spec).unwrap();
        let x = Observation::new(vec![32000.0.into(), 45.0.into(), "none".into()]);
        let d = dists_for(&s);
        let mut cfg = CostConfig::new(CostMetric::L1, d.mads().to_vec(), 2, 1.0).unwrap();
        let out = search_counterfactuals(&m, &x, &cfg, &d, 5000).unwrap();
        let top = &out.instances[0];
        assert_eq!(top.sparsity, 2);
        assert!((top.cost - 2001.0).abs() <= 0.5, "{}", top.cost);
        cfg.sparsity_cap = 1;
        assert!(search_counterfactuals(&m, &x, &cfg, &d, 5000).unwrap().instances.is_empty());
    }

    #[test]
    fn immutable_only_path_is_empty() {
        let s = Arc::new(
            FeatureSchema::new(
                vec![FeatureDecl::numeric("a", 0.0, 1.0).immutable(), FeatureDecl::numeric("b", 0.0, 1.0)],
                "y",
                "pos",
                0.5,
            )
            .unwrap(),
        );
        // Only the immutable feature can flip the model.
        let m = BlackBoxModel::from_fn("m", s.clone(), |e| if e[0] > 0.5 { 0.9 } else { 0.1 });
        let rows = (0..10)
            .map(|k| Observation::new(vec![(k as f64 / 10.0).into(), 0.5.into()]))
            .collect();
        let d = fit_distributions(&Dataset::new(s.clone(), rows, None).unwrap(), &s).unwrap();
        let cfg = CostConfig::new(CostMetric::L1, d.mads().to_vec(), 2, 1.0).unwrap();
        let x = Observation::new(vec![0.2.into(), 0.5.into()]);
        assert!(search_counterfactuals(&m, &x, &cfg, &d, 1000).unwrap().instances.is_empty());
    }

    #[test]
    fn budget_is_respected_and_validated() {
        let s = jones_schema();
        let m = BlackBoxModel::from_fn("half", s.clone(), |_| 0.3);
        let d = dists_for(&s);
        let cfg = CostConfig::new(CostMetric::L1, d.mads().to_vec(), 2, 1.0).unwrap();
        assert!(search_counterfactuals(&m, &jones(), &cfg, &d, 999).is_err());
        let before = m.query_count();
        let out = search_counterfactuals(&m, &jones(), &cfg, &d, 1000).unwrap();
        assert!(out.queries <= 1000);
        assert_eq!((m.query_count() - before) as usize, out.queries);
        assert!(out.instances.is_empty());
    }
}
