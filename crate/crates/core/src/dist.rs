//! Categorical distributions and the Gumbel-max structural mechanism.
//!
//! A categorical sample is expressed as `argmax_v(logits_v + U_v)` with `U`
//! a vector of i.i.d. standard Gumbel variables. Because the mechanism is a
//! deterministic function of the noise, counterfactuals reduce to (1) abducing
//! the posterior of `U` given an observed outcome and (2) replaying that noise
//! against alternative logits. This module provides prior and posterior noise
//! sampling, the argmax mechanism, counterfactual distribution estimation, and
//! the padding/truncation rule for mismatched outcome spaces.
//!
//! All probability arithmetic is carried out in log space with log-sum-exp
//! reductions.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sum tolerance for derived probability vectors.
pub const PROB_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DistError {
    #[error("degenerate distribution: no finite logit")]
    DegenerateDistribution,
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid categorical: {0}")]
    InvalidCategorical(String),
    #[error("impossible observation: label index {index} has probability zero")]
    ImpossibleObservation { index: usize },
    #[error("unknown label: {0}")]
    UnknownLabel(String),
}

/// Serialize logit/score vectors that may contain `-inf` (JSON has no
/// infinity literal, so `-inf` entries round-trip as the string `"-inf"`).
pub mod serde_logits {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(serde::Serialize, serde::Deserialize)]
    #[serde(untagged)]
    enum Entry {
        Num(f64),
        Tag(String),
    }

    pub fn serialize<S: Serializer>(values: &[f64], ser: S) -> Result<S::Ok, S::Error> {
        let entries: Vec<Entry> = values
            .iter()
            .map(|&v| {
                if v == f64::NEG_INFINITY {
                    Entry::Tag("-inf".to_string())
                } else {
                    Entry::Num(v)
                }
            })
            .collect();
        serde::Serialize::serialize(&entries, ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Vec<f64>, D::Error> {
        let entries = Vec::<Entry>::deserialize(de)?;
        entries
            .into_iter()
            .map(|e| match e {
                Entry::Num(v) => Ok(v),
                Entry::Tag(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
                Entry::Tag(s) => Err(D::Error::custom(format!("invalid logit entry: {s:?}"))),
            })
            .collect()
    }
}

/// A labeled discrete distribution stored as unnormalized natural-log logits.
///
/// Invariants, enforced at construction:
/// - labels are non-empty and pairwise distinct, one logit per label
/// - every logit is finite or `-inf`, and at least one is finite
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Categorical {
    labels: Vec<String>,
    #[serde(with = "serde_logits")]
    logits: Vec<f64>,
}

impl Categorical {
    pub fn new(labels: Vec<String>, logits: Vec<f64>) -> Result<Self, DistError> {
        if labels.is_empty() {
            return Err(DistError::InvalidCategorical("empty label set".into()));
        }
        if labels.len() != logits.len() {
            return Err(DistError::LengthMismatch {
                expected: labels.len(),
                got: logits.len(),
            });
        }
        for (i, a) in labels.iter().enumerate() {
            if labels[..i].contains(a) {
                return Err(DistError::InvalidCategorical(format!(
                    "duplicate label {a:?}"
                )));
            }
        }
        if logits
            .iter()
            .any(|l| l.is_nan() || *l == f64::INFINITY)
        {
            return Err(DistError::InvalidCategorical(
                "logits must be finite or -inf".into(),
            ));
        }
        if !logits.iter().any(|l| l.is_finite()) {
            return Err(DistError::DegenerateDistribution);
        }
        Ok(Self { labels, logits })
    }

    /// Build from non-negative weights; they are renormalized, so any positive
    /// scale is accepted. Zero weights become `-inf` logits.
    pub fn from_probs(labels: Vec<String>, probs: Vec<f64>) -> Result<Self, DistError> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(DistError::InvalidCategorical(
                "probabilities must be finite and non-negative".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if total <= 0.0 {
            return Err(DistError::DegenerateDistribution);
        }
        let logits = probs.iter().map(|&p| (p / total).ln()).collect();
        Self::new(labels, logits)
    }

    /// Point mass on one label of the given label set.
    pub fn point_mass(labels: Vec<String>, index: usize) -> Result<Self, DistError> {
        let n = labels.len();
        if index >= n {
            return Err(DistError::LengthMismatch {
                expected: n,
                got: index,
            });
        }
        let logits = (0..n)
            .map(|i| if i == index { 0.0 } else { f64::NEG_INFINITY })
            .collect();
        Self::new(labels, logits)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Normalized probabilities (softmax of the logits).
    pub fn probs(&self) -> Vec<f64> {
        softmax(&self.logits).expect("categorical invariant guarantees a finite logit")
    }

    /// Normalized log-probabilities.
    pub fn log_probs(&self) -> Vec<f64> {
        let z = log_sum_exp(&self.logits);
        self.logits.iter().map(|l| l - z).collect()
    }

    pub fn prob(&self, index: usize) -> f64 {
        self.probs()[index]
    }

    /// Restrict to a label subset and renormalize over it.
    pub fn restrict(&self, labels: &[String]) -> Result<Self, DistError> {
        let logits = labels
            .iter()
            .map(|l| {
                self.index_of(l)
                    .map(|i| self.logits[i])
                    .ok_or_else(|| DistError::UnknownLabel(l.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(labels.to_vec(), logits)
    }

    /// Index of the most probable label, ties broken by lowest index.
    pub fn argmax(&self) -> usize {
        argmax_lowest(&self.logits)
    }
}

/// Argmax with ties broken by lowest index.
pub(crate) fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Log-sum-exp with the usual max-shift; `-inf` for an all-`-inf` input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Softmax over natural-log logits. Shift-invariant; errors when every entry
/// is `-inf`.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>, DistError> {
    let z = log_sum_exp(logits);
    if z == f64::NEG_INFINITY {
        return Err(DistError::DegenerateDistribution);
    }
    Ok(logits.iter().map(|l| (l - z).exp()).collect())
}

/// Provenance of a Gumbel noise vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSource {
    Prior,
    Posterior,
    Padded,
}

/// A realization of the exogenous noise, aligned with a categorical's labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GumbelVector {
    pub values: Vec<f64>,
    pub source: NoiseSource,
}

impl GumbelVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// One standard Gumbel(0,1) draw: `-ln(-ln U)` for `U ~ Uniform(0,1)`.
pub fn gumbel_draw<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // random::<f64>() is in [0,1); reject 0 so the transform stays finite.
    let mut u: f64 = rng.random();
    while u <= 0.0 {
        u = rng.random();
    }
    -(-u.ln()).ln()
}

/// A vector of `n` i.i.d. standard Gumbel draws.
pub fn sample_gumbel<R: Rng + ?Sized>(n: usize, rng: &mut R) -> GumbelVector {
    assert!(n >= 1, "sample_gumbel: n must be >= 1");
    GumbelVector {
        values: (0..n).map(|_| gumbel_draw(rng)).collect(),
        source: NoiseSource::Prior,
    }
}

/// The structural mechanism: `argmax_v(logits_v + noise_v)`.
///
/// Ties are broken by lowest index so replays with padded zero coordinates
/// stay reproducible.
pub fn gumbel_argmax(dist: &Categorical, noise: &GumbelVector) -> Result<usize, DistError> {
    if dist.len() != noise.len() {
        return Err(DistError::LengthMismatch {
            expected: dist.len(),
            got: noise.len(),
        });
    }
    let perturbed: Vec<f64> = dist
        .logits()
        .iter()
        .zip(&noise.values)
        .map(|(l, u)| l + u)
        .collect();
    Ok(argmax_lowest(&perturbed))
}

/// `Gumbel(location)` truncated above at `bound`, via the max-coupling
/// identity: if `G ~ Gumbel(location)` then `-ln(exp(-G) + exp(-bound))`
/// follows the truncated law.
fn truncated_gumbel<R: Rng + ?Sized>(location: f64, bound: f64, rng: &mut R) -> f64 {
    let g = location + gumbel_draw(rng);
    let lo = g.min(bound);
    lo - (-(g - bound).abs()).exp().ln_1p()
}

/// One sample from the exact posterior of the Gumbel noise conditional on
/// `gumbel_argmax(dist, noise) == observed`.
///
/// Top-down construction: the maximum perturbed value is `Gumbel` shifted by
/// the log-sum-exp of the logits and lands on the observed index; every other
/// perturbed value is a `Gumbel(logit)` truncated above at that maximum. The
/// replay guarantee `gumbel_argmax(dist, result) == observed` holds for every
/// sample, including under floating-point rounding.
pub fn posterior_gumbel<R: Rng + ?Sized>(
    dist: &Categorical,
    observed: usize,
    rng: &mut R,
) -> Result<GumbelVector, DistError> {
    if observed >= dist.len() {
        return Err(DistError::LengthMismatch {
            expected: dist.len(),
            got: observed,
        });
    }
    let logits = dist.logits();
    if logits[observed] == f64::NEG_INFINITY {
        return Err(DistError::ImpossibleObservation { index: observed });
    }
    let z = log_sum_exp(logits);
    let max_value = z + gumbel_draw(rng);
    let mut values = vec![0.0; dist.len()];
    values[observed] = max_value - logits[observed];
    for (i, &logit) in logits.iter().enumerate() {
        if i == observed {
            continue;
        }
        if logit == f64::NEG_INFINITY {
            // A zero-probability label never wins, so its noise keeps the prior law.
            values[i] = gumbel_draw(rng);
            continue;
        }
        let mut t = truncated_gumbel(logit, max_value, rng);
        // The truncated draw is strictly below the bound in exact arithmetic;
        // if rounding lands it on the bound, step one ulp down so the observed
        // index stays the argmax under lowest-index tie-breaking.
        if t >= max_value {
            t = f64::from_bits(max_value.to_bits() - 1);
        }
        values[i] = t - logit;
    }
    Ok(GumbelVector {
        values,
        source: NoiseSource::Posterior,
    })
}

/// How to fill noise coordinates for outcomes absent from the factual space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaddingMode {
    /// Pad with zeros (default). Biases against unseen outcomes, since a zero
    /// coordinate is below the typical posterior maximum.
    #[default]
    Zeros,
    /// Pad with fresh prior Gumbel draws, making that bias measurable.
    PriorGumbel,
}

/// Align a factual-space noise vector to a counterfactual space of
/// `counterfactual_size` labels: pad when larger, truncate when smaller,
/// identity when equal.
pub fn align_noise(
    noise: &GumbelVector,
    factual_size: usize,
    counterfactual_size: usize,
) -> GumbelVector {
    align_noise_with(
        noise,
        factual_size,
        counterfactual_size,
        PaddingMode::Zeros,
        &mut NoPadRng,
    )
}

/// `align_noise` with an explicit padding mode; `PriorGumbel` draws padded
/// coordinates from the supplied stream.
pub fn align_noise_with<R: Rng + ?Sized>(
    noise: &GumbelVector,
    factual_size: usize,
    counterfactual_size: usize,
    mode: PaddingMode,
    rng: &mut R,
) -> GumbelVector {
    assert_eq!(
        noise.len(),
        factual_size,
        "align_noise: noise length must equal the factual size"
    );
    if counterfactual_size == factual_size {
        return noise.clone();
    }
    let mut values = noise.values.clone();
    if counterfactual_size < factual_size {
        values.truncate(counterfactual_size);
        return GumbelVector {
            values,
            source: noise.source,
        };
    }
    for _ in factual_size..counterfactual_size {
        values.push(match mode {
            PaddingMode::Zeros => 0.0,
            PaddingMode::PriorGumbel => gumbel_draw(rng),
        });
    }
    GumbelVector {
        values,
        source: NoiseSource::Padded,
    }
}

/// Panic-on-use stream for the zero-padding path, which never draws.
struct NoPadRng;

impl rand::RngCore for NoPadRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("zero padding draws no randomness")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("zero padding draws no randomness")
    }
    fn fill_bytes(&mut self, _dest: &mut [u8]) {
        unreachable!("zero padding draws no randomness")
    }
}

/// A Monte-Carlo (or exact) estimate of a counterfactual distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualEstimate {
    pub distribution: Categorical,
    pub n_draws: usize,
    /// Per-label Monte-Carlo standard error; all zero when `exact`.
    pub standard_error: Vec<f64>,
    pub exact: bool,
}

impl CounterfactualEstimate {
    /// Wrap an exactly-known distribution.
    pub fn exact(distribution: Categorical) -> Self {
        let n = distribution.len();
        Self {
            distribution,
            n_draws: 1,
            standard_error: vec![0.0; n],
            exact: true,
        }
    }

    /// Build from Monte-Carlo counts with binomial standard errors.
    pub fn from_counts(
        labels: Vec<String>,
        counts: &[u64],
        n_draws: usize,
    ) -> Result<Self, DistError> {
        let n = n_draws as f64;
        let probs: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
        let standard_error = probs.iter().map(|&p| (p * (1.0 - p) / n).sqrt()).collect();
        let distribution = Categorical::from_probs(labels, probs.clone())?;
        Ok(Self {
            distribution,
            n_draws,
            standard_error,
            exact: false,
        })
    }
}

/// Estimate the counterfactual distribution: per draw, abduce posterior noise
/// from `(factual, observed)`, align it to the counterfactual label set, and
/// replay through the argmax mechanism against the counterfactual logits.
///
/// Label-set alignment is positional (the caller chooses the padding rule);
/// the factual and counterfactual distributions may differ in size.
pub fn counterfactual_categorical<R: Rng + ?Sized>(
    factual: &Categorical,
    observed: usize,
    counterfactual: &Categorical,
    n_draws: usize,
    rng: &mut R,
) -> Result<CounterfactualEstimate, DistError> {
    counterfactual_categorical_with(
        factual,
        observed,
        counterfactual,
        PaddingMode::Zeros,
        n_draws,
        rng,
    )
}

/// `counterfactual_categorical` with an explicit padding mode for
/// mismatched label-set sizes.
pub fn counterfactual_categorical_with<R: Rng + ?Sized>(
    factual: &Categorical,
    observed: usize,
    counterfactual: &Categorical,
    padding: PaddingMode,
    n_draws: usize,
    rng: &mut R,
) -> Result<CounterfactualEstimate, DistError> {
    assert!(n_draws >= 1, "counterfactual_categorical: n_draws >= 1");
    let mut counts = vec![0u64; counterfactual.len()];
    for _ in 0..n_draws {
        let noise = posterior_gumbel(factual, observed, rng)?;
        let aligned = align_noise_with(&noise, factual.len(), counterfactual.len(), padding, rng);
        let idx = gumbel_argmax(counterfactual, &aligned)?;
        counts[idx] += 1;
    }
    CounterfactualEstimate::from_counts(counterfactual.labels().to_vec(), &counts, n_draws)
}
