//! Synthetic neighbourhood generation around the observation being explained.
//!
//! Each synthetic row keeps the observation's values except for a uniformly
//! chosen non-empty subset of features, which are redrawn from distributions
//! fitted to the training data. Rows are labelled by the black box and
//! weighted by a Gaussian kernel on MAD-normalized distance.
//!
//! Randomness comes from ChaCha20 (`rand_chacha`, seeded with
//! `seed_from_u64`). Uniforms are `(next_u64 >> 11) * 2^-53`; normals use the
//! cosine branch of Box-Muller. The stream layout is documented in
//! `docs/FORMATS.md` so fixtures can be reproduced elsewhere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::counterfactual::{feature_mads, scaled_distance};
use crate::error::{Error, Result};
use crate::model::{class_of, BlackBoxModel, Class};
use crate::schema::{Dataset, FeatureDecl, FeatureKind, FeatureSchema, Observation, Value};

/// Minimum share of each class among synthetic rows before balancing kicks in.
pub const MIN_CLASS_SHARE: f64 = 0.05;
/// Additional batches drawn when one class is under-represented.
pub const MAX_BALANCE_BATCHES: usize = 4;
pub const MIN_SAMPLES: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureDistribution {
    /// Numeric values, or ordinal ranks.
    Gaussian { mean: f64, std: f64 },
    /// Empirical level frequencies of a categorical feature. `floor` is the
    /// draw probability given to levels never seen in the data.
    Frequencies { frequencies: Vec<f64>, floor: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationDistributions {
    features: Vec<FeatureDistribution>,
    mads: Vec<f64>,
    spread: f64,
}

impl PerturbationDistributions {
    pub fn feature(&self, index: usize) -> &FeatureDistribution {
        &self.features[index]
    }

    pub fn features(&self) -> &[FeatureDistribution] {
        &self.features
    }

    /// Per-feature median absolute deviation (after degenerate substitution).
    pub fn mads(&self) -> &[f64] {
        &self.mads
    }

    /// Copy whose Gaussian standard deviations are multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            spread: self.spread * factor,
            ..self.clone()
        }
    }

    /// Standard deviation actually used for draws: the fitted value, or 1% of
    /// the range for a constant column, times the spread factor.
    pub fn effective_std(&self, decl: &FeatureDecl, index: usize) -> f64 {
        match (&self.features[index], decl.scalar_range()) {
            (FeatureDistribution::Gaussian { std, .. }, Some((lo, hi))) => {
                let base = if *std > 0.0 { *std } else { 0.01 * (hi - lo) };
                base * self.spread
            }
            _ => 0.0,
        }
    }

    /// Probabilities used when drawing categorical levels: floored then
    /// renormalized.
    pub fn draw_probabilities(&self, index: usize) -> Option<Vec<f64>> {
        match &self.features[index] {
            FeatureDistribution::Frequencies { frequencies, floor } => {
                let raw: Vec<f64> = frequencies.iter().map(|f| f.max(*floor)).collect();
                let total: f64 = raw.iter().sum();
                Some(raw.into_iter().map(|p| p / total).collect())
            }
            _ => None,
        }
    }
}

/// Fits a Gaussian (sample mean, n-1 standard deviation) per numeric or
/// ordinal feature and level frequencies per categorical feature.
pub fn fit_distributions(dataset: &Dataset, schema: &FeatureSchema) -> Result<PerturbationDistributions> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = dataset.len();
    let mut features = Vec::with_capacity(schema.len());
    for (i, decl) in schema.features().iter().enumerate() {
        let dist = match &decl.kind {
            FeatureKind::Numeric { .. } | FeatureKind::Ordinal { .. } => {
                let xs: Vec<f64> = dataset
                    .column(i)
                    .map(|v| decl.scalar(v).expect("validated row"))
                    .collect();
                let mean = xs.iter().sum::<f64>() / n as f64;
                let std = if n > 1 {
                    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                } else {
                    0.0
                };
                FeatureDistribution::Gaussian { mean, std }
            }
            FeatureKind::Categorical { levels } => {
                let mut counts = vec![0usize; levels.len()];
                for v in dataset.column(i) {
                    if let Value::Level(l) = v {
                        let k = levels.iter().position(|x| x == l).expect("validated row");
                        counts[k] += 1;
                    }
                }
                FeatureDistribution::Frequencies {
                    frequencies: counts.iter().map(|&c| c as f64 / n as f64).collect(),
                    floor: 1.0 / (n + levels.len()) as f64,
                }
            }
        };
        features.push(dist);
    }
    Ok(PerturbationDistributions {
        features,
        mads: feature_mads(dataset, schema),
        spread: 1.0,
    })
}

/// `exp(-distance^2 / width^2)`.
pub fn kernel_weight(distance: f64, width: f64) -> f64 {
    debug_assert!(width > 0.0);
    (-(distance * distance) / (width * width)).exp()
}

pub(crate) fn uniform(rng: &mut ChaCha20Rng) -> f64 {
    rng.random::<f64>()
}

pub(crate) fn standard_normal(rng: &mut ChaCha20Rng) -> f64 {
    // 1 - u lies in (0, 1], keeping ln finite.
    let u1 = 1.0 - uniform(rng);
    let u2 = uniform(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn draw_value(
    rng: &mut ChaCha20Rng,
    decl: &FeatureDecl,
    index: usize,
    dists: &PerturbationDistributions,
) -> Value {
    match (&decl.kind, dists.feature(index)) {
        (FeatureKind::Categorical { levels }, FeatureDistribution::Frequencies { .. }) => {
            let probs = dists.draw_probabilities(index).expect("categorical");
            let u = uniform(rng);
            let mut acc = 0.0;
            for (level, p) in levels.iter().zip(&probs) {
                acc += p;
                if u < acc {
                    return Value::Level(level.clone());
                }
            }
            Value::Level(levels[levels.len() - 1].clone())
        }
        (_, FeatureDistribution::Gaussian { mean, .. }) => {
            let std = dists.effective_std(decl, index);
            decl.from_scalar(mean + std * standard_normal(rng))
        }
        _ => unreachable!("distribution kind follows feature kind"),
    }
}

fn perturb_one(
    rng: &mut ChaCha20Rng,
    schema: &FeatureSchema,
    x: &Observation,
    dists: &PerturbationDistributions,
) -> Observation {
    let d = schema.len();
    let mask = loop {
        let mask: Vec<bool> = (0..d).map(|_| uniform(rng) < 0.5).collect();
        if mask.iter().any(|&b| b) {
            break mask;
        }
    };
    let mut out = x.clone();
    for (i, resample) in mask.into_iter().enumerate() {
        if resample {
            out.set(i, draw_value(rng, schema.feature(i), i, dists));
        }
    }
    out
}

/// Draws `count` perturbed copies of `x` without evaluating any model.
pub fn perturb(
    schema: &FeatureSchema,
    x: &Observation,
    dists: &PerturbationDistributions,
    count: usize,
    seed: u64,
) -> Vec<Observation> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..count).map(|_| perturb_one(&mut rng, schema, x, dists)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Observation,
    pub y: f64,
    pub weight: f64,
    pub distance: f64,
}

/// Class counts among synthetic rows and whether balancing succeeded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BalanceReport {
    pub positive: usize,
    pub negative: usize,
    pub extra_batches: usize,
    pub balanced: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbourhood {
    pub center: Observation,
    /// Synthetic rows followed by the center itself.
    pub samples: Vec<Sample>,
    pub seed: u64,
    pub kernel_width: f64,
    /// MAD scales used for the distances.
    pub scales: Vec<f64>,
    pub balance: BalanceReport,
}

impl Neighbourhood {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn max_weight(&self) -> f64 {
        self.samples.iter().map(|s| s.weight).fold(0.0, f64::max)
    }
}

pub fn generate_neighbourhood(
    model: &BlackBoxModel,
    x: &Observation,
    dists: &PerturbationDistributions,
    n: usize,
    seed: u64,
    kernel_width: f64,
) -> Result<Neighbourhood> {
    if n < MIN_SAMPLES {
        return Err(Error::Config(format!("neighbourhood needs at least {MIN_SAMPLES} samples, got {n}")));
    }
    if !(kernel_width > 0.0 && kernel_width.is_finite()) {
        return Err(Error::Config(format!("kernel width must be positive, got {kernel_width}")));
    }
    let schema = model.schema();
    schema.validate(x)?;
    let threshold = schema.threshold();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let mut rows: Vec<(Observation, f64)> = Vec::with_capacity(n);
    for _ in 0..n {
        let xp = perturb_one(&mut rng, schema, x, dists);
        let y = model.probability(&xp)?;
        rows.push((xp, y));
    }

    let min_count = (MIN_CLASS_SHARE * n as f64).ceil() as usize;
    let count = |rows: &[(Observation, f64)], c: Class| {
        rows.iter().filter(|(_, y)| class_of(*y, threshold) == c).count()
    };
    let mut extra_batches = 0;
    let positives = count(&rows, Class::Positive);
    let minority = if positives < n - positives { Class::Positive } else { Class::Negative };
    let mut have = count(&rows, minority);
    while have < min_count && extra_batches < MAX_BALANCE_BATCHES {
        extra_batches += 1;
        let mut found = Vec::new();
        for _ in 0..n {
            let xp = perturb_one(&mut rng, schema, x, dists);
            let y = model.probability(&xp)?;
            if class_of(y, threshold) == minority && have + found.len() < min_count {
                found.push((xp, y));
            }
        }
        // Minority rows replace majority rows from the back so the count holds.
        for row in found {
            let slot = rows
                .iter()
                .rposition(|(_, y)| class_of(*y, threshold) != minority)
                .expect("majority rows remain while minority is short");
            rows[slot] = row;
            have += 1;
        }
    }

    let mads = dists.mads();
    let mut samples: Vec<Sample> = rows
        .into_iter()
        .map(|(xp, y)| {
            let distance = scaled_distance(schema, mads, &xp, x);
            Sample {
                weight: kernel_weight(distance, kernel_width),
                x: xp,
                y,
                distance,
            }
        })
        .collect();
    let positive = samples.iter().filter(|s| class_of(s.y, threshold) == Class::Positive).count();
    let balance = BalanceReport {
        positive,
        negative: n - positive,
        extra_batches,
        balanced: positive >= min_count && n - positive >= min_count,
    };
    samples.push(Sample {
        x: x.clone(),
        y: model.probability(x)?,
        weight: 1.0,
        distance: 0.0,
    });

    Ok(Neighbourhood {
        center: x.clone(),
        samples,
        seed,
        kernel_width,
        scales: mads.to_vec(),
        balance,
    })
}
