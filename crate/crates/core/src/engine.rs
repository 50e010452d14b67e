//! The counterfactual inference engine: token-level counterfactuals (TLCF)
//! and the three-step abstract counterfactual (ACF) pipeline, plus the
//! interventional-consistency verifier.
//!
//! Both procedures share the same mechanism: abduce exogenous Gumbel noise
//! from the factual observation, intervene on the state, and replay the
//! argmax mechanism under the counterfactual distribution. TLCF does this at
//! the token level, so its noise is tied to surface tokens; ACF abduces at
//! the abstraction level, maps the counterfactual abstraction back to
//! actions, and never abduces the token-level noise.

use crate::abstraction::{
    marginal_abstraction, AbstractionError, AbstractionProvider, MarginalAbstraction, MarginalMode,
};
use crate::dist::{
    gumbel_argmax, gumbel_draw, posterior_gumbel, Categorical, CounterfactualEstimate, DistError,
    GumbelVector, NoiseSource, PaddingMode,
};
use crate::envsim::{SceneBundle, SceneError};
use crate::fixtures::sha256_hex;
use crate::policy::{
    apply_intervention, sample_continuations, ActionSample, InterventionSpec, PolicyError,
    PolicyProvider, StateRef,
};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("missing observation: {0}")]
    MissingObservation(String),
    #[error("the engine has no abstraction provider; abstract counterfactuals need one")]
    MissingAbstraction,
    #[error("no scene bundle available to resolve {0}")]
    MissingScenes(String),
    #[error("observed choice {label:?} is not among the factual choices")]
    UnknownChoice { label: String },
    #[error("abstraction class {label:?} is not in the space")]
    UnknownClass { label: String },
    #[error("observed class {label:?} has zero probability under the factual marginal")]
    ZeroProbabilityObservation { label: String },
    #[error("abstraction space mismatch: expected {expected:?}, got {got:?}")]
    SpaceMismatch { expected: Vec<String>, got: Vec<String> },
    #[error(
        "cannot abduce position {position}: token {token:?} is absent from the provider's \
         reported distribution"
    )]
    UnabduciblePosition { position: usize, token: String },
    #[error("invalid budget: {0}")]
    InvalidBudget(String),
    #[error("estimation failed: {0}")]
    Estimation(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Abstraction(#[from] AbstractionError),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// Monte-Carlo budgets for the stochastic stages of a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryBudget {
    /// Posterior noise draws (TLCF replay and the abstraction stage).
    #[serde(default = "default_posterior_draws")]
    pub posterior_draws: usize,
    /// Continuation draws (Monte-Carlo marginals and map-back).
    #[serde(default = "default_continuation_samples")]
    pub continuation_samples: usize,
}

fn default_posterior_draws() -> usize {
    1024
}
fn default_continuation_samples() -> usize {
    256
}

impl Default for QueryBudget {
    fn default() -> Self {
        Self {
            posterior_draws: default_posterior_draws(),
            continuation_samples: default_continuation_samples(),
        }
    }
}

impl QueryBudget {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.posterior_draws < 1 {
            return Err(EngineError::InvalidBudget(
                "posterior_draws must be at least 1".into(),
            ));
        }
        if self.continuation_samples < 1 {
            return Err(EngineError::InvalidBudget(
                "continuation_samples must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// What was observed in the factual world: an action (choice label or text
/// continuation), an abstraction class, or both.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choice: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub continuation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abstraction_class: Option<String>,
}

impl Observation {
    pub fn choice(label: &str) -> Self {
        Self {
            choice: Some(label.to_string()),
            ..Self::default()
        }
    }

    pub fn continuation(text: &str) -> Self {
        Self {
            continuation: Some(text.to_string()),
            ..Self::default()
        }
    }

    pub fn class(label: &str) -> Self {
        Self {
            abstraction_class: Some(label.to_string()),
            ..Self::default()
        }
    }

    pub fn with_class(mut self, label: &str) -> Self {
        self.abstraction_class = Some(label.to_string());
        self
    }

    pub fn is_empty(&self) -> bool {
        self.choice.is_none() && self.continuation.is_none() && self.abstraction_class.is_none()
    }

    /// The observed action content matching the state's kind.
    fn action_content(&self, choice_based: bool) -> Option<&str> {
        if choice_based {
            self.choice.as_deref()
        } else {
            self.continuation.as_deref()
        }
    }
}

/// One counterfactual question: a factual state, what was observed there, an
/// intervention, and budgets. The seed fully determines engine randomness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualQuery {
    pub factual_state: StateRef,
    pub observation: Observation,
    pub intervention: InterventionSpec,
    #[serde(default)]
    pub budget: QueryBudget,
    pub seed: u64,
}

/// A weighted set of sampled continuations, self-normalized, with a
/// multinomial resample for downstream consumers that need unweighted
/// samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedSamples {
    pub contents: Vec<String>,
    /// Non-negative, summing to 1.
    pub weights: Vec<f64>,
    /// Indices into `contents`; identity when the weights are uniform.
    pub resample: Vec<usize>,
    pub effective_sample_size: f64,
}

impl WeightedSamples {
    /// Unweighted samples: uniform weights, identity resample.
    pub fn uniform(contents: Vec<String>) -> Self {
        let n = contents.len();
        assert!(n >= 1, "WeightedSamples::uniform: empty sample set");
        Self {
            weights: vec![1.0 / n as f64; n],
            resample: (0..n).collect(),
            effective_sample_size: n as f64,
            contents,
        }
    }

    /// Importance-weighted samples: normalizes the weights, computes the
    /// effective sample size `1 / Σ w²`, and draws a same-size multinomial
    /// resample.
    pub fn weighted(
        contents: Vec<String>,
        weights: Vec<f64>,
        rng: &mut dyn RngCore,
    ) -> Result<Self, EngineError> {
        let n = contents.len();
        assert_eq!(n, weights.len(), "one weight per sample");
        assert!(n >= 1, "WeightedSamples::weighted: empty sample set");
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(EngineError::Estimation(
                "importance weights must be finite and non-negative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(EngineError::Estimation(
                "importance weights sum to zero".into(),
            ));
        }
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let resample = multinomial_indices(&weights, n, rng);
        Ok(Self {
            contents,
            weights,
            resample,
            effective_sample_size: ess,
        })
    }

    pub fn len(&self) -> usize {
        self.contents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contents.is_empty()
    }

    pub fn resampled_contents(&self) -> Vec<&str> {
        self.resample
            .iter()
            .map(|&i| self.contents[i].as_str())
            .collect()
    }

    /// Total weight per distinct content, in first-seen order.
    pub fn mass_by_content(&self) -> Vec<(String, f64)> {
        let mut order: Vec<String> = Vec::new();
        let mut mass: HashMap<&str, f64> = HashMap::new();
        for (content, w) in self.contents.iter().zip(&self.weights) {
            if !mass.contains_key(content.as_str()) {
                order.push(content.clone());
            }
            *mass.entry(content).or_insert(0.0) += w;
        }
        order
            .into_iter()
            .map(|c| {
                let w = mass[c.as_str()];
                (c, w)
            })
            .collect()
    }
}

/// The counterfactual action distribution: exact over choices, or a weighted
/// sample set for open text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum ActionDistribution {
    Choice { estimate: CounterfactualEstimate },
    Samples { samples: WeightedSamples },
}

impl ActionDistribution {
    pub fn as_choice(&self) -> Option<&CounterfactualEstimate> {
        match self {
            ActionDistribution::Choice { estimate } => Some(estimate),
            ActionDistribution::Samples { .. } => None,
        }
    }

    pub fn as_samples(&self) -> Option<&WeightedSamples> {
        match self {
            ActionDistribution::Choice { .. } => None,
            ActionDistribution::Samples { samples } => Some(samples),
        }
    }
}

/// Per-stage estimation metadata and every warning the pipeline raised.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub method: String,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed_class: Option<String>,
    /// The observed class came from the argmax of a non-degenerate score.
    pub soft_observation: bool,
    /// Classes with counterfactual mass but no support under P(Y|s'),
    /// renormalized away during map-back.
    pub unsupported_classes: Vec<String>,
    /// No class was supported; the action distribution fell back to the
    /// interventional one.
    pub fallback_interventional: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marginal_factual: Option<MarginalAbstraction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marginal_counterfactual: Option<MarginalAbstraction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effective_sample_size: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ess_floor: Option<f64>,
    /// Interventional-baseline continuation draws that failed.
    pub baseline_failures: usize,
}

impl Diagnostics {
    fn for_method(method: &str) -> Self {
        Self {
            method: method.to_string(),
            ..Self::default()
        }
    }
}

/// The answer to a counterfactual query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualResult {
    pub factual_state: StateRef,
    pub counterfactual_state: StateRef,
    /// P_{Y'}(· | s') — ACF only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_counterfactual: Option<CounterfactualEstimate>,
    /// P_Y(· | s'), the interventional abstraction marginal — ACF only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_interventional: Option<Categorical>,
    pub action_distribution: ActionDistribution,
    /// The same-shape distribution without abduction.
    pub interventional_baseline: ActionDistribution,
    pub diagnostics: Diagnostics,
}

// ---------------------------------------------------------------------------
// Abstraction-level abduction and replay
// ---------------------------------------------------------------------------

/// Posterior sampler over abstraction-level noise, abduced from the factual
/// marginal and the observed class.
#[derive(Debug, Clone)]
pub struct PosteriorNoiseSampler {
    marginal: Categorical,
    observed: usize,
}

impl PosteriorNoiseSampler {
    pub fn marginal(&self) -> &Categorical {
        &self.marginal
    }

    pub fn observed_index(&self) -> usize {
        self.observed
    }

    /// One posterior draw; replaying it against the factual marginal always
    /// reproduces the observed class.
    pub fn draw(&self, rng: &mut dyn RngCore) -> Result<GumbelVector, DistError> {
        posterior_gumbel(&self.marginal, self.observed, rng)
    }
}

/// Abduce the abstraction-level noise posterior from `(marginal_factual,
/// y_obs)`.
pub fn abduct_abstraction(
    y_obs: &str,
    marginal_factual: &Categorical,
) -> Result<PosteriorNoiseSampler, EngineError> {
    let observed = marginal_factual
        .index_of(y_obs)
        .ok_or_else(|| EngineError::UnknownClass {
            label: y_obs.to_string(),
        })?;
    if marginal_factual.logits()[observed] == f64::NEG_INFINITY {
        return Err(EngineError::ZeroProbabilityObservation {
            label: y_obs.to_string(),
        });
    }
    Ok(PosteriorNoiseSampler {
        marginal: marginal_factual.clone(),
        observed,
    })
}

/// Estimate P_{Y'}(· | s') by replaying posterior noise draws against the
/// counterfactual marginal.
pub fn counterfactual_abstraction(
    sampler: &PosteriorNoiseSampler,
    marginal_cf: &Categorical,
    n: usize,
    rng: &mut dyn RngCore,
) -> Result<CounterfactualEstimate, EngineError> {
    if marginal_cf.labels() != sampler.marginal.labels() {
        return Err(EngineError::SpaceMismatch {
            expected: sampler.marginal.labels().to_vec(),
            got: marginal_cf.labels().to_vec(),
        });
    }
    assert!(n >= 1, "counterfactual_abstraction: n must be >= 1");
    let mut counts = vec![0u64; marginal_cf.len()];
    for _ in 0..n {
        let noise = sampler.draw(rng)?;
        counts[gumbel_argmax(marginal_cf, &noise)?] += 1;
    }
    Ok(CounterfactualEstimate::from_counts(
        marginal_cf.labels().to_vec(),
        &counts,
        n,
    )?)
}

// ---------------------------------------------------------------------------
// Map-back from abstraction to actions
// ---------------------------------------------------------------------------

/// How to compute the map-back stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapBackMode {
    /// Enumerate choices exactly (choice-based states only).
    Exact,
    /// Importance-weight `m` interventional continuations.
    MonteCarlo { m: usize },
}

/// Knobs for the Monte-Carlo map-back.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapBackOptions {
    /// Warn when the effective sample size falls below this fraction of the
    /// kept draws.
    pub ess_floor_fraction: f64,
}

impl Default for MapBackOptions {
    fn default() -> Self {
        Self {
            ess_floor_fraction: 0.1,
        }
    }
}

/// The map-back outcome plus the flags the pipeline must surface.
#[derive(Debug, Clone, PartialEq)]
pub struct MapBackResult {
    pub action_distribution: ActionDistribution,
    pub unsupported_classes: Vec<String>,
    pub fallback_interventional: bool,
    pub effective_sample_size: Option<f64>,
    pub ess_floor: Option<f64>,
    pub ess_floor_hit: bool,
    pub failures: usize,
}

/// Renormalize `y_probs` over classes supported by `marginal`; returns the
/// renormalized weights, the dropped class labels, and whether nothing was
/// supported.
fn renormalize_supported(
    y_probs: &[f64],
    marginal: &[f64],
    labels: &[String],
) -> (Vec<f64>, Vec<String>, bool) {
    let mut dropped = Vec::new();
    let mut kept = vec![0.0; y_probs.len()];
    for ((&y, &m), label) in y_probs.iter().zip(marginal).zip(labels) {
        if y > 0.0 && m <= 0.0 {
            dropped.push(label.clone());
        } else {
            kept[labels.iter().position(|l| l == label).unwrap()] = y;
        }
    }
    let total: f64 = kept.iter().sum();
    if total <= 0.0 {
        return (kept, dropped, true);
    }
    for w in &mut kept {
        *w /= total;
    }
    (kept, dropped, false)
}

/// Map a counterfactual abstraction distribution back to actions:
/// P_{A'}(a' | s') = Σ_{y'} y_cf(y') · P_Y(y' | s', a') · P_A(a' | s') /
/// P_Y(y' | s').
///
/// Exact mode enumerates the given choices; Monte-Carlo mode draws `m`
/// interventional continuations and forms self-normalized importance weights
/// against the same-sample estimate of P_Y(· | s'). Classes with
/// counterfactual mass but zero support are renormalized away and reported;
/// when no class is supported the result falls back to the interventional
/// distribution with `fallback_interventional` set.
pub fn map_back(
    y_cf: &Categorical,
    cf_state: &StateRef,
    choices: &[String],
    policy: &dyn PolicyProvider,
    abstraction: &dyn AbstractionProvider,
    mode: MapBackMode,
    options: &MapBackOptions,
    rng: &mut dyn RngCore,
) -> Result<MapBackResult, EngineError> {
    let space = abstraction.space();
    if y_cf.labels() != space.labels().as_slice() {
        return Err(EngineError::SpaceMismatch {
            expected: space.labels(),
            got: y_cf.labels().to_vec(),
        });
    }
    let y_probs = y_cf.probs();
    match mode {
        MapBackMode::Exact => {
            if !cf_state.is_choice_based() {
                return Err(EngineError::Estimation(
                    "exact map-back requires a choice-based state".into(),
                ));
            }
            let action_dist = policy.choice_logits(cf_state, choices)?;
            let action_probs = action_dist.dist.probs();
            let mut rows = Vec::with_capacity(choices.len());
            for label in choices {
                let action = ActionSample {
                    content: label.clone(),
                    token_logprob_sum: 0.0,
                    provider_tag: "enumeration".into(),
                };
                rows.push(abstraction.score(cf_state, &action)?.dist.probs());
            }
            let mut marginal = vec![0.0; space.len()];
            for (row, &pa) in rows.iter().zip(&action_probs) {
                for (m, &p) in marginal.iter_mut().zip(row) {
                    *m += pa * p;
                }
            }
            let (weights, dropped, none_supported) =
                renormalize_supported(&y_probs, &marginal, y_cf.labels());
            if none_supported {
                return Ok(MapBackResult {
                    action_distribution: ActionDistribution::Choice {
                        estimate: CounterfactualEstimate::exact(action_dist.dist),
                    },
                    unsupported_classes: dropped,
                    fallback_interventional: true,
                    effective_sample_size: None,
                    ess_floor: None,
                    ess_floor_hit: false,
                    failures: 0,
                });
            }
            let mut out = vec![0.0; choices.len()];
            for (a, (row, &pa)) in rows.iter().zip(&action_probs).enumerate() {
                for ((&w, &m), &p) in weights.iter().zip(&marginal).zip(row) {
                    if w > 0.0 && m > 0.0 {
                        out[a] += w * p * pa / m;
                    }
                }
            }
            let dist = Categorical::from_probs(choices.to_vec(), out)?;
            Ok(MapBackResult {
                action_distribution: ActionDistribution::Choice {
                    estimate: CounterfactualEstimate::exact(dist),
                },
                unsupported_classes: dropped,
                fallback_interventional: false,
                effective_sample_size: None,
                ess_floor: None,
                ess_floor_hit: false,
                failures: 0,
            })
        }
        MapBackMode::MonteCarlo { m } => {
            assert!(m >= 1, "map_back: m must be >= 1");
            let batch = sample_continuations(cf_state, m, policy, rng);
            let mut contents = Vec::new();
            let mut rows = Vec::new();
            let mut failures = 0;
            for item in batch {
                match item {
                    Ok(action) => {
                        rows.push(abstraction.score(cf_state, &action)?.dist.probs());
                        contents.push(action.content);
                    }
                    Err(_) => failures += 1,
                }
            }
            if contents.is_empty() {
                return Err(EngineError::Estimation(
                    "every map-back continuation draw failed".into(),
                ));
            }
            let kept = contents.len() as f64;
            let mut marginal = vec![0.0; space.len()];
            for row in &rows {
                for (m_y, &p) in marginal.iter_mut().zip(row) {
                    *m_y += p / kept;
                }
            }
            let (class_weights, dropped, none_supported) =
                renormalize_supported(&y_probs, &marginal, y_cf.labels());
            if none_supported {
                return Ok(MapBackResult {
                    action_distribution: ActionDistribution::Samples {
                        samples: WeightedSamples::uniform(contents),
                    },
                    unsupported_classes: dropped,
                    fallback_interventional: true,
                    effective_sample_size: Some(kept),
                    ess_floor: None,
                    ess_floor_hit: false,
                    failures,
                });
            }
            let weights: Vec<f64> = rows
                .iter()
                .map(|row| {
                    class_weights
                        .iter()
                        .zip(&marginal)
                        .zip(row)
                        .filter(|((&w, &m_y), _)| w > 0.0 && m_y > 0.0)
                        .map(|((&w, &m_y), &p)| w * p / m_y)
                        .sum()
                })
                .collect();
            let samples = WeightedSamples::weighted(contents, weights, rng)?;
            let ess = samples.effective_sample_size;
            let floor = options.ess_floor_fraction * kept;
            Ok(MapBackResult {
                action_distribution: ActionDistribution::Samples { samples },
                unsupported_classes: dropped,
                fallback_interventional: false,
                effective_sample_size: Some(ess),
                ess_floor: Some(floor),
                ess_floor_hit: ess < floor,
                failures,
            })
        }
    }
}

fn multinomial_indices(weights: &[f64], n: usize, rng: &mut dyn RngCore) -> Vec<usize> {
    let mut cumulative = Vec::with_capacity(weights.len());
    let mut total = 0.0;
    for w in weights {
        total += w;
        cumulative.push(total);
    }
    (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>() * total;
            match cumulative.binary_search_by(|c| c.partial_cmp(&u).expect("weights are finite")) {
                Ok(i) => i,
                Err(i) => i.min(weights.len() - 1),
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Token-level counterfactual primitives
// ---------------------------------------------------------------------------

/// Transfer factual-space noise to the counterfactual label set by label
/// identity: shared labels keep their abduced coordinate, labels unique to
/// the counterfactual side are padded per `mode`.
fn transfer_noise(
    noise: &GumbelVector,
    factual: &Categorical,
    counterfactual: &Categorical,
    mode: PaddingMode,
    rng: &mut dyn RngCore,
) -> GumbelVector {
    let mut padded = false;
    let values = counterfactual
        .labels()
        .iter()
        .map(|label| match factual.index_of(label) {
            Some(i) => noise.values[i],
            None => {
                padded = true;
                match mode {
                    PaddingMode::Zeros => 0.0,
                    PaddingMode::PriorGumbel => gumbel_draw(rng),
                }
            }
        })
        .collect();
    GumbelVector {
        values,
        source: if padded {
            NoiseSource::Padded
        } else {
            noise.source
        },
    }
}

/// Token-level counterfactual over a single choice point: abduce posterior
/// noise from `(factual, observed_index)` per draw, align it to the
/// counterfactual label set by label identity, and replay the argmax.
pub fn counterfactual_choice_estimate(
    factual: &Categorical,
    observed_index: usize,
    counterfactual: &Categorical,
    padding: PaddingMode,
    n_draws: usize,
    rng: &mut dyn RngCore,
) -> Result<CounterfactualEstimate, EngineError> {
    assert!(n_draws >= 1, "counterfactual_choice_estimate: n_draws >= 1");
    let mut counts = vec![0u64; counterfactual.len()];
    for _ in 0..n_draws {
        let noise = posterior_gumbel(factual, observed_index, rng)?;
        let aligned = transfer_noise(&noise, factual, counterfactual, padding, rng);
        counts[gumbel_argmax(counterfactual, &aligned)?] += 1;
    }
    Ok(CounterfactualEstimate::from_counts(
        counterfactual.labels().to_vec(),
        &counts,
        n_draws,
    )?)
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

/// Engine-wide inference options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineOptions {
    /// Noise for outcomes absent from the factual label set.
    pub padding: PaddingMode,
    pub map_back: MapBackOptions,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            padding: PaddingMode::Zeros,
            map_back: MapBackOptions::default(),
        }
    }
}

/// The inference engine: a policy provider, an optional scene bundle for
/// resolving choice labels and scene text, and an optional abstraction
/// provider for ACF queries.
pub struct Engine {
    policy: Arc<dyn PolicyProvider>,
    scenes: Option<Arc<SceneBundle>>,
    abstraction: Option<Arc<dyn AbstractionProvider>>,
    options: EngineOptions,
}

impl Engine {
    pub fn new(policy: Arc<dyn PolicyProvider>) -> Self {
        Self {
            policy,
            scenes: None,
            abstraction: None,
            options: EngineOptions::default(),
        }
    }

    pub fn with_scenes(mut self, scenes: Arc<SceneBundle>) -> Self {
        self.scenes = Some(scenes);
        self
    }

    pub fn with_abstraction(mut self, abstraction: Arc<dyn AbstractionProvider>) -> Self {
        self.abstraction = Some(abstraction);
        self
    }

    pub fn with_options(mut self, options: EngineOptions) -> Self {
        self.options = options;
        self
    }

    pub fn policy(&self) -> &Arc<dyn PolicyProvider> {
        &self.policy
    }

    pub fn scenes(&self) -> Option<&Arc<SceneBundle>> {
        self.scenes.as_ref()
    }

    pub fn abstraction(&self) -> Option<&Arc<dyn AbstractionProvider>> {
        self.abstraction.as_ref()
    }

    /// Choice labels of the state's scene.
    pub fn choice_labels(&self, state: &StateRef) -> Result<Vec<String>, EngineError> {
        let scene_id = state.scene_id.as_deref().ok_or_else(|| {
            EngineError::MissingScenes("an open-text state has no choice labels".into())
        })?;
        let scenes = self
            .scenes
            .as_ref()
            .ok_or_else(|| EngineError::MissingScenes(format!("scene {scene_id:?}")))?;
        Ok(scenes.scene(scene_id)?.choice_labels())
    }

    /// Fill in scene text for scene swaps when the engine owns the scene
    /// graph and the caller left it blank.
    fn resolve_intervention(&self, spec: &InterventionSpec) -> Result<InterventionSpec, EngineError> {
        if let InterventionSpec::SceneSwap {
            scene_id,
            scene_text: None,
        } = spec
        {
            if let Some(scenes) = &self.scenes {
                let scene = scenes.scene(scene_id)?;
                return Ok(InterventionSpec::SceneSwap {
                    scene_id: scene_id.clone(),
                    scene_text: Some(scene.text.clone()),
                });
            }
        }
        Ok(spec.clone())
    }

    /// Resolve and apply the intervention, producing the counterfactual
    /// state.
    pub fn counterfactual_state(
        &self,
        state: &StateRef,
        spec: &InterventionSpec,
    ) -> Result<StateRef, EngineError> {
        let resolved = self.resolve_intervention(spec)?;
        Ok(apply_intervention(state, &resolved, self.policy.as_ref())?)
    }

    /// Token-level counterfactual (the baseline): abduce token noise from the
    /// observed action, replay it under the intervened state.
    pub fn tlcf(&self, query: &CounterfactualQuery) -> Result<CounterfactualResult, EngineError> {
        query.budget.validate()?;
        query.factual_state.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(query.seed);
        let cf_state = self.counterfactual_state(&query.factual_state, &query.intervention)?;
        let mut diagnostics = Diagnostics::for_method("tlcf");

        if query.factual_state.is_choice_based() {
            let label = query.observation.choice.as_deref().ok_or_else(|| {
                EngineError::MissingObservation(
                    "token-level counterfactuals need the observed choice".into(),
                )
            })?;
            let factual_labels = self.choice_labels(&query.factual_state)?;
            let cf_labels = self.choice_labels(&cf_state)?;
            let factual = self.policy.choice_logits(&query.factual_state, &factual_labels)?;
            let counterfactual = self.policy.choice_logits(&cf_state, &cf_labels)?;
            if factual.estimated || counterfactual.estimated {
                diagnostics
                    .warnings
                    .push("choice distributions were Monte-Carlo estimated".into());
            }
            let observed_index = factual.dist.index_of(label).ok_or_else(|| {
                EngineError::UnknownChoice {
                    label: label.to_string(),
                }
            })?;
            let estimate = counterfactual_choice_estimate(
                &factual.dist,
                observed_index,
                &counterfactual.dist,
                self.options.padding,
                query.budget.posterior_draws,
                &mut rng,
            )?;
            Ok(CounterfactualResult {
                factual_state: query.factual_state.clone(),
                counterfactual_state: cf_state,
                y_counterfactual: None,
                y_interventional: None,
                action_distribution: ActionDistribution::Choice { estimate },
                interventional_baseline: ActionDistribution::Choice {
                    estimate: CounterfactualEstimate::exact(counterfactual.dist),
                },
                diagnostics,
            })
        } else {
            let text = query.observation.continuation.as_deref().ok_or_else(|| {
                EngineError::MissingObservation(
                    "token-level counterfactuals need the observed continuation".into(),
                )
            })?;
            let samples =
                self.tlcf_open_text(&query.factual_state, &cf_state, text, query.budget, &mut rng)?;
            let baseline =
                self.interventional_samples(&cf_state, query.budget, &mut diagnostics, &mut rng)?;
            diagnostics.effective_sample_size = Some(samples.effective_sample_size);
            Ok(CounterfactualResult {
                factual_state: query.factual_state.clone(),
                counterfactual_state: cf_state,
                y_counterfactual: None,
                y_interventional: None,
                action_distribution: ActionDistribution::Samples { samples },
                interventional_baseline: baseline,
                diagnostics,
            })
        }
    }

    /// TLCF over open text: walk the observed token sequence, abduce
    /// per-position noise under the factual prefix, and replay
    /// autoregressively under the counterfactual state — the replayed prefix,
    /// not the observed one, conditions each counterfactual step.
    fn tlcf_open_text(
        &self,
        factual_state: &StateRef,
        cf_state: &StateRef,
        observed: &str,
        budget: QueryBudget,
        rng: &mut dyn RngCore,
    ) -> Result<WeightedSamples, EngineError> {
        let policy = self.policy.as_ref();
        let observed_tokens = policy.tokenize(observed)?;
        if observed_tokens.is_empty() {
            return Err(EngineError::MissingObservation(
                "the observed continuation has no tokens".into(),
            ));
        }
        let factual_prompt_tokens = policy.tokenize(&factual_state.prompt)?;
        let cf_prompt_tokens = policy.tokenize(&cf_state.prompt)?;

        // The factual distributions along the observed sequence are fixed
        // across draws; abduce against them once per position per draw.
        let mut factual_steps: Vec<(Categorical, usize)> =
            Vec::with_capacity(observed_tokens.len());
        let mut prefix = factual_prompt_tokens.clone();
        for (position, token) in observed_tokens.iter().enumerate() {
            let prompt = policy.join_tokens(&prefix)?;
            let dist = policy.next_token_distribution(&factual_state.with_prompt(prompt))?;
            let index =
                dist.index_of(token)
                    .ok_or_else(|| EngineError::UnabduciblePosition {
                        position,
                        token: token.clone(),
                    })?;
            factual_steps.push((dist, index));
            prefix.push(token.clone());
        }

        // Counterfactual next-token distributions, keyed by the replayed
        // prefix; `None` marks end-of-sequence.
        let mut cf_cache: HashMap<String, Option<Categorical>> = HashMap::new();
        let max_len = cf_state.max_len.min(observed_tokens.len());
        let mut contents = Vec::with_capacity(budget.posterior_draws);
        for _ in 0..budget.posterior_draws {
            let mut replayed: Vec<String> = Vec::with_capacity(max_len);
            for (factual_dist, observed_index) in factual_steps.iter().take(max_len) {
                let noise = posterior_gumbel(factual_dist, *observed_index, rng)?;
                let mut prefix = cf_prompt_tokens.clone();
                prefix.extend(replayed.iter().cloned());
                let prompt = policy.join_tokens(&prefix)?;
                let cf_dist = match cf_cache.get(&prompt) {
                    Some(entry) => entry.clone(),
                    None => {
                        let entry = match policy
                            .next_token_distribution(&cf_state.with_prompt(prompt.clone()))
                        {
                            Ok(dist) => Some(dist),
                            // The counterfactual world ends here; the factual
                            // sequence continuing further is not an error.
                            Err(PolicyError::UnknownState(_))
                            | Err(PolicyError::EmptyContinuation(_))
                                if !replayed.is_empty() =>
                            {
                                None
                            }
                            Err(e) => return Err(e.into()),
                        };
                        cf_cache.insert(prompt, entry.clone());
                        entry
                    }
                };
                let Some(cf_dist) = cf_dist else {
                    break;
                };
                let aligned =
                    transfer_noise(&noise, factual_dist, &cf_dist, self.options.padding, rng);
                let index = gumbel_argmax(&cf_dist, &aligned)?;
                replayed.push(cf_dist.labels()[index].clone());
            }
            contents.push(policy.join_tokens(&replayed)?);
        }
        Ok(WeightedSamples::uniform(contents))
    }

    /// Interventional continuation samples (no abduction), uniform weights.
    fn interventional_samples(
        &self,
        cf_state: &StateRef,
        budget: QueryBudget,
        diagnostics: &mut Diagnostics,
        rng: &mut dyn RngCore,
    ) -> Result<ActionDistribution, EngineError> {
        let batch =
            sample_continuations(cf_state, budget.continuation_samples, self.policy.as_ref(), rng);
        let mut contents = Vec::new();
        for item in batch {
            match item {
                Ok(action) => contents.push(action.content),
                Err(_) => diagnostics.baseline_failures += 1,
            }
        }
        if contents.is_empty() {
            return Err(EngineError::Estimation(
                "every interventional baseline draw failed".into(),
            ));
        }
        Ok(ActionDistribution::Samples {
            samples: WeightedSamples::uniform(contents),
        })
    }

    /// The observed abstraction class: taken from the query when given,
    /// otherwise scored from the observed action (argmax for non-degenerate
    /// scores, flagged as soft).
    fn observed_class(
        &self,
        query: &CounterfactualQuery,
        abstraction: &dyn AbstractionProvider,
    ) -> Result<(String, bool), EngineError> {
        let space = abstraction.space();
        if let Some(label) = &query.observation.abstraction_class {
            if space.class_index(label).is_none() {
                return Err(EngineError::UnknownClass {
                    label: label.clone(),
                });
            }
            return Ok((label.clone(), false));
        }
        let content = query
            .observation
            .action_content(query.factual_state.is_choice_based())
            .ok_or_else(|| {
                EngineError::MissingObservation(
                    "abstract counterfactuals need an observed class or an observed action".into(),
                )
            })?;
        let action = ActionSample {
            content: content.to_string(),
            token_logprob_sum: 0.0,
            provider_tag: "observed".into(),
        };
        let score = abstraction.score(&query.factual_state, &action)?;
        let index = score.dist.argmax();
        Ok((score.dist.labels()[index].clone(), !score.degenerate))
    }

    fn marginal_mode(&self, state: &StateRef, budget: QueryBudget) -> MarginalMode {
        if state.is_choice_based() {
            MarginalMode::Exact
        } else {
            MarginalMode::MonteCarlo {
                n: budget.continuation_samples,
            }
        }
    }

    /// Abstract counterfactual: abduce on the abstraction marginal, intervene,
    /// replay at the abstraction level, and map the result back to actions.
    /// Token-level noise is never abduced; map-back draws fresh interventional
    /// continuations.
    pub fn acf(&self, query: &CounterfactualQuery) -> Result<CounterfactualResult, EngineError> {
        query.budget.validate()?;
        query.factual_state.validate()?;
        let abstraction = self
            .abstraction
            .as_ref()
            .ok_or(EngineError::MissingAbstraction)?
            .clone();
        let mut rng = ChaCha12Rng::seed_from_u64(query.seed);
        let mut diagnostics = Diagnostics::for_method("acf");

        // Step 0: the observed abstraction value.
        let (y_obs, soft) = self.observed_class(query, abstraction.as_ref())?;
        diagnostics.observed_class = Some(y_obs.clone());
        diagnostics.soft_observation = soft;
        if soft {
            diagnostics.warnings.push(format!(
                "observed action scored non-degenerately; using its argmax class {y_obs:?}"
            ));
        }

        // Step 1: abduction against the factual abstraction marginal.
        let factual_labels = if query.factual_state.is_choice_based() {
            self.choice_labels(&query.factual_state)?
        } else {
            Vec::new()
        };
        let marginal_factual = marginal_abstraction(
            &query.factual_state,
            &factual_labels,
            self.policy.as_ref(),
            abstraction.as_ref(),
            self.marginal_mode(&query.factual_state, query.budget),
            &mut rng,
        )?;
        let sampler = abduct_abstraction(&y_obs, &marginal_factual.dist)?;

        // Step 2: intervene and replay against the counterfactual marginal.
        let cf_state = self.counterfactual_state(&query.factual_state, &query.intervention)?;
        let cf_labels = if cf_state.is_choice_based() {
            self.choice_labels(&cf_state)?
        } else {
            Vec::new()
        };
        let marginal_cf = marginal_abstraction(
            &cf_state,
            &cf_labels,
            self.policy.as_ref(),
            abstraction.as_ref(),
            self.marginal_mode(&cf_state, query.budget),
            &mut rng,
        )?;
        let y_estimate = counterfactual_abstraction(
            &sampler,
            &marginal_cf.dist,
            query.budget.posterior_draws,
            &mut rng,
        )?;

        // Step 3: map back to the action space.
        let mode = if cf_state.is_choice_based() {
            MapBackMode::Exact
        } else {
            MapBackMode::MonteCarlo {
                m: query.budget.continuation_samples,
            }
        };
        let mapped = map_back(
            &y_estimate.distribution,
            &cf_state,
            &cf_labels,
            self.policy.as_ref(),
            abstraction.as_ref(),
            mode,
            &self.options.map_back,
            &mut rng,
        )?;
        diagnostics.unsupported_classes = mapped.unsupported_classes.clone();
        diagnostics.fallback_interventional = mapped.fallback_interventional;
        diagnostics.effective_sample_size = mapped.effective_sample_size;
        diagnostics.ess_floor = mapped.ess_floor;
        if !mapped.unsupported_classes.is_empty() {
            diagnostics.warnings.push(format!(
                "classes {:?} carry counterfactual mass but no support under the intervened \
                 state; renormalized over the rest",
                mapped.unsupported_classes
            ));
        }
        if mapped.fallback_interventional {
            diagnostics.warnings.push(
                "no abstraction class is supported under the intervened state; returning the \
                 interventional distribution"
                    .into(),
            );
        }
        if mapped.ess_floor_hit {
            diagnostics.warnings.push(format!(
                "effective sample size {:.1} fell below the floor {:.1}",
                mapped.effective_sample_size.unwrap_or(0.0),
                mapped.ess_floor.unwrap_or(0.0)
            ));
        }

        let interventional_baseline = if cf_state.is_choice_based() {
            let dist = self.policy.choice_logits(&cf_state, &cf_labels)?.dist;
            ActionDistribution::Choice {
                estimate: CounterfactualEstimate::exact(dist),
            }
        } else {
            self.interventional_samples(&cf_state, query.budget, &mut diagnostics, &mut rng)?
        };

        diagnostics.marginal_factual = Some(marginal_factual);
        diagnostics.marginal_counterfactual = Some(marginal_cf.clone());
        Ok(CounterfactualResult {
            factual_state: query.factual_state.clone(),
            counterfactual_state: cf_state,
            y_counterfactual: Some(y_estimate),
            y_interventional: Some(marginal_cf.dist),
            action_distribution: mapped.action_distribution,
            interventional_baseline,
            diagnostics,
        })
    }

    /// Verify interventional consistency on choice-based cases: averaging
    /// the ACF map-back conditionals over prior abstraction noise must
    /// reproduce the interventional action distribution, both as an exact
    /// algebraic identity and as a Monte-Carlo average. `tamper` perturbs
    /// the conditionals multiplicatively — a sensitivity canary that must
    /// make the exact check fail; pass 0 for real verification.
    pub fn verify_consistency(
        &self,
        cases: &[ConsistencyCase],
        n_prior_draws: usize,
        tamper: f64,
        seed: u64,
    ) -> Result<ConsistencyReport, EngineError> {
        let abstraction = self
            .abstraction
            .as_ref()
            .ok_or(EngineError::MissingAbstraction)?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut reports = Vec::with_capacity(cases.len());
        for case in cases {
            let choices = self.choice_labels(&case.state)?;
            reports.push(verify_case(
                case,
                &choices,
                self.policy.as_ref(),
                abstraction.as_ref(),
                n_prior_draws,
                tamper,
                &mut rng,
            )?);
        }
        let passed = reports.iter().all(|r| r.exact_ok && r.monte_carlo_ok);
        Ok(ConsistencyReport {
            cases: reports,
            n_prior_draws,
            exact_tolerance: EXACT_CONSISTENCY_TOLERANCE,
            tv_threshold: MC_CONSISTENCY_TV,
            tamper,
            passed,
        })
    }
}

/// Implied abstraction distribution of an action distribution: the mean score
/// under its weights. Lets token-level results be compared to abstract ones.
pub fn implied_class_distribution(
    action: &ActionDistribution,
    state: &StateRef,
    abstraction: &dyn AbstractionProvider,
) -> Result<Categorical, EngineError> {
    let space = abstraction.space();
    let mut mean = vec![0.0; space.len()];
    let score_of = |content: &str| -> Result<Vec<f64>, EngineError> {
        let action = ActionSample {
            content: content.to_string(),
            token_logprob_sum: 0.0,
            provider_tag: "implied".into(),
        };
        Ok(abstraction.score(state, &action)?.dist.probs())
    };
    match action {
        ActionDistribution::Choice { estimate } => {
            let probs = estimate.distribution.probs();
            for (label, &w) in estimate.distribution.labels().iter().zip(&probs) {
                if w == 0.0 {
                    continue;
                }
                for (total, p) in mean.iter_mut().zip(score_of(label)?) {
                    *total += w * p;
                }
            }
        }
        ActionDistribution::Samples { samples } => {
            for (content, &w) in samples.contents.iter().zip(&samples.weights) {
                if w == 0.0 {
                    continue;
                }
                for (total, p) in mean.iter_mut().zip(score_of(content)?) {
                    *total += w * p;
                }
            }
        }
    }
    Ok(Categorical::from_probs(space.labels(), mean)?)
}

// ---------------------------------------------------------------------------
// Interventional-consistency verification
// ---------------------------------------------------------------------------

/// Exact-identity tolerance for the consistency check.
pub const EXACT_CONSISTENCY_TOLERANCE: f64 = 1e-12;
/// Total-variation bound for the Monte-Carlo consistency check.
pub const MC_CONSISTENCY_TV: f64 = 0.01;

/// One consistency fixture: a choice-based state to check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyCase {
    pub id: String,
    pub state: StateRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyCaseReport {
    pub id: String,
    /// Exact check: max |Σ_y P(y|s')·P(a|y,s') − P_A(a|s')| over actions.
    pub max_abs_deviation: f64,
    pub exact_ok: bool,
    /// Monte-Carlo check: TV between the prior-noise-averaged ACF
    /// distribution and the interventional one.
    pub monte_carlo_tv: f64,
    pub monte_carlo_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub cases: Vec<ConsistencyCaseReport>,
    pub n_prior_draws: usize,
    pub exact_tolerance: f64,
    pub tv_threshold: f64,
    /// Multiplicative perturbation applied to the map-back weights (a test
    /// hook; 0 in real verification).
    pub tamper: f64,
    pub passed: bool,
}

impl ConsistencyReport {
    /// Stable content hash of the report for reproducibility comparisons.
    pub fn content_hash(&self) -> String {
        sha256_hex(
            serde_json::to_string(self)
                .expect("report serializes")
                .as_bytes(),
        )
    }
}

fn verify_case(
    case: &ConsistencyCase,
    choices: &[String],
    policy: &dyn PolicyProvider,
    abstraction: &dyn AbstractionProvider,
    n_prior_draws: usize,
    tamper: f64,
    rng: &mut dyn RngCore,
) -> Result<ConsistencyCaseReport, EngineError> {
    let space = abstraction.space();
    let action_probs = policy.choice_logits(&case.state, choices)?.dist.probs();
    let mut rows = Vec::with_capacity(choices.len());
    for label in choices {
        let action = ActionSample {
            content: label.clone(),
            token_logprob_sum: 0.0,
            provider_tag: "enumeration".into(),
        };
        rows.push(abstraction.score(&case.state, &action)?.dist.probs());
    }
    let mut marginal = vec![0.0; space.len()];
    for (row, &pa) in rows.iter().zip(&action_probs) {
        for (m, &p) in marginal.iter_mut().zip(row) {
            *m += pa * p;
        }
    }
    // Map-back conditionals P(a | y, s'), with the tamper hook applied the
    // way a buggy implementation would mis-scale them.
    let conditional = |a: usize, y: usize| -> f64 {
        if marginal[y] <= 0.0 {
            return 0.0;
        }
        rows[a][y] * action_probs[a] / marginal[y] * (1.0 + tamper)
    };

    // Exact identity: marginalizing the conditionals over P(Y|s') must
    // reproduce the interventional distribution.
    let mut max_abs_deviation: f64 = 0.0;
    for (a, &pa) in action_probs.iter().enumerate() {
        let reconstructed: f64 = (0..space.len()).map(|y| marginal[y] * conditional(a, y)).sum();
        max_abs_deviation = max_abs_deviation.max((reconstructed - pa).abs());
    }

    // Monte-Carlo: average the per-draw ACF conditional over prior noise.
    let marginal_dist = Categorical::from_probs(space.labels(), marginal.clone())?;
    let mut averaged = vec![0.0; choices.len()];
    for _ in 0..n_prior_draws {
        let noise = crate::dist::sample_gumbel(space.len(), rng);
        let y = gumbel_argmax(&marginal_dist, &noise)?;
        for (acc, a) in averaged.iter_mut().zip(0..choices.len()) {
            *acc += conditional(a, y) / n_prior_draws as f64;
        }
    }
    let monte_carlo_tv = action_probs
        .iter()
        .zip(&averaged)
        .map(|(p, q)| (p - q).abs())
        .sum::<f64>()
        / 2.0;

    Ok(ConsistencyCaseReport {
        id: case.id.clone(),
        max_abs_deviation,
        exact_ok: max_abs_deviation < EXACT_CONSISTENCY_TOLERANCE,
        monte_carlo_tv,
        monte_carlo_ok: monte_carlo_tv <= MC_CONSISTENCY_TV,
    })
}
