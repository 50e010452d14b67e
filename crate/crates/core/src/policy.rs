//! Black-box policy providers and state interventions.
//!
//! A policy provider exposes the agent's action mechanism for a state:
//! exact choice-token distributions for choice-based states, next-token
//! distributions and continuation sampling for open text. Providers own
//! tokenization; the engine never assumes a vocabulary. Implementations
//! cover local tabular fixtures, an OpenAI-compatible HTTP endpoint, and
//! record/replay wrappers that make any provider auditable offline.

use crate::dist::{Categorical, DistError};
use crate::fixtures::{FixtureError, RecordStore, ReplayStore};
use crate::httpclient::{self, HttpCallError};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("authentication rejected: {0}")]
    Auth(String),
    #[error("endpoint returned status {status}: {body}")]
    Api { status: u16, body: String },
    #[error("malformed provider response: {0}")]
    MalformedResponse(String),
    #[error("invalid choice label {0:?}: must be a single token")]
    InvalidChoiceLabel(String),
    #[error("choice label {label:?} not configured for state {state:?}")]
    UnknownChoiceLabel { state: String, label: String },
    #[error("state {0:?} is outside the provider's domain")]
    UnknownState(String),
    #[error("unknown model config {0:?}")]
    UnknownModelConfig(String),
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("no replacement candidate: the present token is the only option")]
    NoReplacementCandidate,
    #[error("no continuation available at state {0:?}")]
    EmptyContinuation(String),
    #[error("constrained estimation failed: {0}")]
    Estimation(String),
    #[error("operation not supported by this provider: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Replay(#[from] FixtureError),
    #[error(transparent)]
    Dist(#[from] DistError),
}

impl From<HttpCallError> for PolicyError {
    fn from(e: HttpCallError) -> Self {
        match e {
            HttpCallError::Transport(msg) => PolicyError::Transport(msg),
            HttpCallError::Auth(msg) => PolicyError::Auth(msg),
            HttpCallError::Api { status, body } => PolicyError::Api { status, body },
            HttpCallError::Malformed(msg) => PolicyError::MalformedResponse(msg),
        }
    }
}

/// A reference to an agent state: the prompt, an opaque model configuration
/// (model name, endpoint, decoding parameters, latent-edit tag), an optional
/// environment scene, and the generation cap.
///
/// A state is choice-based exactly when `scene_id` is present; open-text
/// states must carry a non-empty prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateRef {
    pub prompt: String,
    pub model_config: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_id: Option<String>,
    pub max_len: usize,
}

impl StateRef {
    /// A choice-based state anchored to an environment scene.
    pub fn choice(scene_id: &str, prompt: &str, model_config: &str) -> Self {
        Self {
            prompt: prompt.to_string(),
            model_config: model_config.to_string(),
            scene_id: Some(scene_id.to_string()),
            max_len: 1,
        }
    }

    /// An open-text state.
    pub fn open_text(prompt: &str, model_config: &str, max_len: usize) -> Self {
        Self {
            prompt: prompt.to_string(),
            model_config: model_config.to_string(),
            scene_id: None,
            max_len,
        }
    }

    pub fn is_choice_based(&self) -> bool {
        self.scene_id.is_some()
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if !self.is_choice_based() && self.prompt.is_empty() {
            return Err(PolicyError::EmptyPrompt);
        }
        if self.max_len < 1 {
            return Err(PolicyError::MalformedResponse(
                "max_len must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub(crate) fn with_prompt(&self, prompt: String) -> Self {
        Self {
            prompt,
            ..self.clone()
        }
    }
}

/// One sampled action: a choice label or a text continuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSample {
    pub content: String,
    /// Cumulative log-probability of the sampled tokens; 0 when the provider
    /// does not report it.
    pub token_logprob_sum: f64,
    pub provider_tag: String,
}

/// An exact choice distribution, flagged when it came from Monte-Carlo
/// estimation rather than reported log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceDistribution {
    pub dist: Categorical,
    pub estimated: bool,
}

/// A transformation producing a counterfactual state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum InterventionSpec {
    /// Replace the last (non-padding) token of the prompt with the provider's
    /// most likely prediction at that position, excluding the token present.
    PromptTokenReplacement,
    /// Re-point the state at a different opaque model configuration.
    ModelConfigSwap { model_config: String },
    /// Retarget the environment scene; `scene_text` updates the prompt when
    /// supplied by the caller that owns the scene graph.
    SceneSwap {
        scene_id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scene_text: Option<String>,
    },
}

/// The agent's action mechanism, behind a uniform black-box surface.
pub trait PolicyProvider: Send + Sync {
    /// Identifier recorded on samples this provider produces.
    fn tag(&self) -> String;

    /// Exact next-token distribution over the given single-token choice
    /// labels, renormalized over that subset.
    fn choice_logits(
        &self,
        state: &StateRef,
        labels: &[String],
    ) -> Result<ChoiceDistribution, PolicyError>;

    /// Distribution over the provider's reported next tokens for the state's
    /// prompt (top-k for remote providers, exhaustive for tabular ones).
    fn next_token_distribution(&self, state: &StateRef) -> Result<Categorical, PolicyError>;

    /// One continuation of the state's prompt, terminated by end-of-sequence
    /// or `max_len` tokens.
    fn sample_continuation(
        &self,
        state: &StateRef,
        rng: &mut dyn RngCore,
    ) -> Result<ActionSample, PolicyError>;

    /// Split text by the provider's tokenization.
    fn tokenize(&self, text: &str) -> Result<Vec<String>, PolicyError>;

    /// Inverse of `tokenize`.
    fn join_tokens(&self, tokens: &[String]) -> Result<String, PolicyError>;

    /// Whether the provider recognizes a model configuration id.
    fn has_model_config(&self, config: &str) -> Result<bool, PolicyError>;
}

/// Draw `n` independent continuations. Failed draws are reported in place as
/// per-item errors; the batch always has exactly `n` entries.
pub fn sample_continuations(
    state: &StateRef,
    n: usize,
    provider: &dyn PolicyProvider,
    rng: &mut dyn RngCore,
) -> Vec<Result<ActionSample, PolicyError>> {
    assert!(n >= 1, "sample_continuations: n must be >= 1");
    (0..n)
        .map(|_| provider.sample_continuation(state, rng))
        .collect()
}

/// Produce the counterfactual state for an intervention.
///
/// Pure given a provider snapshot: the same (state, spec, provider) always
/// yields the same state.
pub fn apply_intervention(
    state: &StateRef,
    spec: &InterventionSpec,
    provider: &dyn PolicyProvider,
) -> Result<StateRef, PolicyError> {
    match spec {
        InterventionSpec::PromptTokenReplacement => {
            let tokens = provider.tokenize(&state.prompt)?;
            if tokens.is_empty() {
                return Err(PolicyError::EmptyPrompt);
            }
            let present = &tokens[tokens.len() - 1];
            let prefix = &tokens[..tokens.len() - 1];
            let prefix_state = state.with_prompt(provider.join_tokens(prefix)?);
            let dist = provider.next_token_distribution(&prefix_state)?;
            let probs = dist.probs();
            let replacement = dist
                .labels()
                .iter()
                .zip(&probs)
                .filter(|(label, _)| *label != present)
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
                .map(|(label, _)| label.clone())
                .ok_or(PolicyError::NoReplacementCandidate)?;
            let mut new_tokens = prefix.to_vec();
            new_tokens.push(replacement);
            Ok(state.with_prompt(provider.join_tokens(&new_tokens)?))
        }
        InterventionSpec::ModelConfigSwap { model_config } => {
            if !provider.has_model_config(model_config)? {
                return Err(PolicyError::UnknownModelConfig(model_config.clone()));
            }
            Ok(StateRef {
                model_config: model_config.clone(),
                ..state.clone()
            })
        }
        InterventionSpec::SceneSwap {
            scene_id,
            scene_text,
        } => Ok(StateRef {
            prompt: scene_text.clone().unwrap_or_else(|| state.prompt.clone()),
            scene_id: Some(scene_id.clone()),
            ..state.clone()
        }),
    }
}

fn require_single_token(label: &str) -> Result<(), PolicyError> {
    if label.is_empty() || label.split_whitespace().count() != 1 {
        return Err(PolicyError::InvalidChoiceLabel(label.to_string()));
    }
    Ok(())
}

fn whitespace_tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

/// Multinomial draw over (label, weight) pairs whose weights sum to ~1.
fn draw_weighted<'a, R: Rng + ?Sized>(
    items: impl Iterator<Item = (&'a String, f64)>,
    rng: &mut R,
) -> Option<(&'a String, f64)> {
    let items: Vec<_> = items.collect();
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    if total <= 0.0 {
        return None;
    }
    let mut u = rng.random::<f64>() * total;
    for (label, w) in &items {
        u -= w;
        if u < 0.0 {
            return Some((label, w / total));
        }
    }
    items.last().map(|(label, w)| (*label, w / total))
}

// ---------------------------------------------------------------------------
// Tabular choice policy
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct ChoiceStateEntry {
    choices: BTreeMap<String, f64>,
}

#[derive(Debug, Deserialize)]
struct ChoiceConfigEntry {
    states: BTreeMap<String, ChoiceStateEntry>,
}

#[derive(Debug, Deserialize)]
struct ChoicePolicyFile {
    #[serde(default)]
    kind: Option<String>,
    #[serde(default)]
    states: BTreeMap<String, ChoiceStateEntry>,
    #[serde(default)]
    configs: BTreeMap<String, ChoiceConfigEntry>,
}

/// Choice-based policy backed by a probability table.
///
/// File format: `{"states": {"<scene-id>": {"choices": {"<label>": p}}}}`,
/// optionally nested under `"configs": {"<model-config>": {"states": ...}}`
/// for per-configuration overrides; the top-level table serves any
/// configuration without an override.
#[derive(Debug, Clone)]
pub struct TabularChoicePolicy {
    states: BTreeMap<String, BTreeMap<String, f64>>,
    configs: BTreeMap<String, BTreeMap<String, BTreeMap<String, f64>>>,
}

impl TabularChoicePolicy {
    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        let file: ChoicePolicyFile = serde_json::from_str(text)
            .map_err(|e| PolicyError::MalformedResponse(format!("policy file: {e}")))?;
        if let Some(kind) = &file.kind {
            if kind != "choice" {
                return Err(PolicyError::MalformedResponse(format!(
                    "expected a choice policy file, found kind {kind:?}"
                )));
            }
        }
        let lift = |states: BTreeMap<String, ChoiceStateEntry>| {
            states
                .into_iter()
                .map(|(id, entry)| (id, entry.choices))
                .collect::<BTreeMap<_, _>>()
        };
        let policy = Self {
            states: lift(file.states),
            configs: file
                .configs
                .into_iter()
                .map(|(config, entry)| (config, lift(entry.states)))
                .collect(),
        };
        for table in policy
            .states
            .values()
            .chain(policy.configs.values().flat_map(|c| c.values()))
        {
            if table.is_empty() {
                return Err(PolicyError::MalformedResponse(
                    "a state entry has no choices".into(),
                ));
            }
            if table.values().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(PolicyError::MalformedResponse(
                    "choice probabilities must be finite and non-negative".into(),
                ));
            }
        }
        Ok(policy)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, PolicyError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PolicyError::Transport(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn table(&self, state: &StateRef) -> Result<&BTreeMap<String, f64>, PolicyError> {
        let scene = state.scene_id.as_deref().ok_or_else(|| {
            PolicyError::Unsupported("choice lookup on an open-text state".into())
        })?;
        self.configs
            .get(&state.model_config)
            .and_then(|states| states.get(scene))
            .or_else(|| self.states.get(scene))
            .ok_or_else(|| {
                PolicyError::UnknownState(format!("{}::{scene}", state.model_config))
            })
    }
}

impl PolicyProvider for TabularChoicePolicy {
    fn tag(&self) -> String {
        "tabular-choice".into()
    }

    fn choice_logits(
        &self,
        state: &StateRef,
        labels: &[String],
    ) -> Result<ChoiceDistribution, PolicyError> {
        let table = self.table(state)?;
        let mut probs = Vec::with_capacity(labels.len());
        for label in labels {
            require_single_token(label)?;
            let p = table.get(label).ok_or_else(|| PolicyError::UnknownChoiceLabel {
                state: state.scene_id.clone().unwrap_or_default(),
                label: label.clone(),
            })?;
            probs.push(*p);
        }
        Ok(ChoiceDistribution {
            dist: Categorical::from_probs(labels.to_vec(), probs)?,
            estimated: false,
        })
    }

    fn next_token_distribution(&self, state: &StateRef) -> Result<Categorical, PolicyError> {
        let table = self.table(state)?;
        let labels: Vec<String> = table.keys().cloned().collect();
        let probs: Vec<f64> = table.values().copied().collect();
        Ok(Categorical::from_probs(labels, probs)?)
    }

    fn sample_continuation(
        &self,
        state: &StateRef,
        rng: &mut dyn RngCore,
    ) -> Result<ActionSample, PolicyError> {
        let table = self.table(state)?;
        let (label, p) = draw_weighted(table.iter().map(|(l, p)| (l, *p)), rng)
            .ok_or_else(|| PolicyError::EmptyContinuation(state.prompt.clone()))?;
        Ok(ActionSample {
            content: label.clone(),
            token_logprob_sum: p.ln(),
            provider_tag: self.tag(),
        })
    }

    fn tokenize(&self, text: &str) -> Result<Vec<String>, PolicyError> {
        Ok(whitespace_tokenize(text))
    }

    fn join_tokens(&self, tokens: &[String]) -> Result<String, PolicyError> {
        Ok(tokens.join(" "))
    }

    fn has_model_config(&self, config: &str) -> Result<bool, PolicyError> {
        Ok(self.configs.contains_key(config) || !self.states.is_empty())
    }
}

// ---------------------------------------------------------------------------
// Tabular open-text policy
// ---------------------------------------------------------------------------

/// One node of a probability-weighted continuation tree.
#[derive(Debug, Clone, Deserialize)]
pub struct TextNode {
    #[serde(default)]
    p: Option<f64>,
    #[serde(default)]
    next: BTreeMap<String, TextNode>,
}

#[derive(Debug, Deserialize)]
struct TextConfigEntry {
    states: BTreeMap<String, TextNode>,
}

#[derive(Debug, Deserialize)]
struct TextPolicyFile {
    #[serde(default)]
    kind: Option<String>,
    #[serde(default)]
    states: BTreeMap<String, TextNode>,
    #[serde(default)]
    configs: BTreeMap<String, TextConfigEntry>,
}

/// Open-text policy backed by a continuation tree over whitespace tokens.
///
/// File format mirrors the choice policy with tree-valued states:
/// `{"states": {"<root prompt>": {"next": {"<token>": {"p": w, "next": ...}}}}}`.
/// Sibling weights are renormalized; a node without children ends the
/// continuation. Lookup finds the root whose tokenized prompt is the longest
/// prefix of the query prompt (configuration-specific roots take priority)
/// and walks the remaining tokens down the tree.
#[derive(Debug, Clone)]
pub struct TabularTextPolicy {
    states: BTreeMap<String, TextNode>,
    configs: BTreeMap<String, BTreeMap<String, TextNode>>,
}

impl TabularTextPolicy {
    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        let file: TextPolicyFile = serde_json::from_str(text)
            .map_err(|e| PolicyError::MalformedResponse(format!("policy file: {e}")))?;
        if let Some(kind) = &file.kind {
            if kind != "text" {
                return Err(PolicyError::MalformedResponse(format!(
                    "expected a text policy file, found kind {kind:?}"
                )));
            }
        }
        let policy = Self {
            states: file.states,
            configs: file
                .configs
                .into_iter()
                .map(|(config, entry)| (config, entry.states))
                .collect(),
        };
        for root in policy
            .states
            .values()
            .chain(policy.configs.values().flat_map(|c| c.values()))
        {
            validate_tree(root)?;
        }
        Ok(policy)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, PolicyError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PolicyError::Transport(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Walk to the tree node addressed by the state's prompt.
    fn node(&self, state: &StateRef) -> Result<&TextNode, PolicyError> {
        let prompt_tokens = whitespace_tokenize(&state.prompt);
        let scopes: [Option<&BTreeMap<String, TextNode>>; 2] = [
            self.configs.get(&state.model_config),
            Some(&self.states),
        ];
        for scope in scopes.into_iter().flatten() {
            let mut best: Option<(usize, &TextNode)> = None;
            for (root_prompt, node) in scope {
                let root_tokens = whitespace_tokenize(root_prompt);
                let matches = root_tokens.len() <= prompt_tokens.len()
                    && root_tokens
                        .iter()
                        .zip(&prompt_tokens)
                        .all(|(a, b)| a == b);
                if matches && best.is_none_or(|(len, _)| root_tokens.len() > len) {
                    best = Some((root_tokens.len(), node));
                }
            }
            if let Some((root_len, mut node)) = best {
                for token in &prompt_tokens[root_len..] {
                    node = node.next.get(token).ok_or_else(|| {
                        PolicyError::UnknownState(format!(
                            "no continuation for token {token:?} under prompt {:?}",
                            state.prompt
                        ))
                    })?;
                }
                return Ok(node);
            }
        }
        Err(PolicyError::UnknownState(state.prompt.clone()))
    }
}

fn validate_tree(node: &TextNode) -> Result<(), PolicyError> {
    for (token, child) in &node.next {
        if token.is_empty() || token.split_whitespace().count() != 1 {
            return Err(PolicyError::MalformedResponse(format!(
                "tree token {token:?} must be a single token"
            )));
        }
        let w = child.p.unwrap_or(1.0);
        if !w.is_finite() || w <= 0.0 {
            return Err(PolicyError::MalformedResponse(format!(
                "tree weight for {token:?} must be positive"
            )));
        }
        validate_tree(child)?;
    }
    Ok(())
}

fn children_dist(node: &TextNode) -> Result<Categorical, PolicyError> {
    let labels: Vec<String> = node.next.keys().cloned().collect();
    let weights: Vec<f64> = node.next.values().map(|c| c.p.unwrap_or(1.0)).collect();
    Ok(Categorical::from_probs(labels, weights)?)
}

impl PolicyProvider for TabularTextPolicy {
    fn tag(&self) -> String {
        "tabular-text".into()
    }

    fn choice_logits(
        &self,
        state: &StateRef,
        labels: &[String],
    ) -> Result<ChoiceDistribution, PolicyError> {
        // Choices for a text policy are its next tokens.
        let node = self.node(state)?;
        let mut probs = Vec::with_capacity(labels.len());
        let full = children_dist(node)?;
        let full_probs = full.probs();
        for label in labels {
            require_single_token(label)?;
            let idx = full
                .index_of(label)
                .ok_or_else(|| PolicyError::UnknownChoiceLabel {
                    state: state.prompt.clone(),
                    label: label.clone(),
                })?;
            probs.push(full_probs[idx]);
        }
        Ok(ChoiceDistribution {
            dist: Categorical::from_probs(labels.to_vec(), probs)?,
            estimated: false,
        })
    }

    fn next_token_distribution(&self, state: &StateRef) -> Result<Categorical, PolicyError> {
        let node = self.node(state)?;
        if node.next.is_empty() {
            return Err(PolicyError::UnknownState(format!(
                "prompt {:?} ends at a terminal node",
                state.prompt
            )));
        }
        children_dist(node)
    }

    fn sample_continuation(
        &self,
        state: &StateRef,
        rng: &mut dyn RngCore,
    ) -> Result<ActionSample, PolicyError> {
        let mut node = self.node(state)?;
        if node.next.is_empty() {
            return Err(PolicyError::EmptyContinuation(state.prompt.clone()));
        }
        let mut tokens = Vec::new();
        let mut logprob_sum = 0.0;
        while !node.next.is_empty() && tokens.len() < state.max_len {
            let (token, p) = draw_weighted(
                node.next.iter().map(|(t, c)| (t, c.p.unwrap_or(1.0))),
                rng,
            )
            .expect("non-empty children have positive total weight");
            logprob_sum += p.ln();
            tokens.push(token.clone());
            node = &node.next[&tokens[tokens.len() - 1]];
        }
        Ok(ActionSample {
            content: tokens.join(" "),
            token_logprob_sum: logprob_sum,
            provider_tag: self.tag(),
        })
    }

    fn tokenize(&self, text: &str) -> Result<Vec<String>, PolicyError> {
        Ok(whitespace_tokenize(text))
    }

    fn join_tokens(&self, tokens: &[String]) -> Result<String, PolicyError> {
        Ok(tokens.join(" "))
    }

    fn has_model_config(&self, config: &str) -> Result<bool, PolicyError> {
        Ok(self.configs.contains_key(config) || !self.states.is_empty())
    }
}

// ---------------------------------------------------------------------------
// OpenAI-compatible HTTP policy
// ---------------------------------------------------------------------------

/// Connection and decoding settings for [`HttpPolicy`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpPolicyConfig {
    pub base_url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key: Option<String>,
    #[serde(default = "default_completions_path")]
    pub completions_path: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Top-k log-probabilities requested per position.
    #[serde(default = "default_top_logprobs")]
    pub top_logprobs: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    /// Retries after the first attempt, on transport errors, 429, and 5xx.
    #[serde(default = "default_max_retries")]
    pub max_retries: usize,
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
    /// Sample budget for the constrained Monte-Carlo fallback when the
    /// endpoint cannot report log-probabilities for the requested labels.
    #[serde(default = "default_estimate_samples")]
    pub estimate_samples: usize,
    /// Forwarded as the API `seed` field when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_completions_path() -> String {
    "/v1/completions".into()
}
fn default_temperature() -> f64 {
    1.0
}
fn default_top_logprobs() -> usize {
    20
}
fn default_timeout_secs() -> u64 {
    30
}
fn default_max_retries() -> usize {
    3
}
fn default_backoff_ms() -> u64 {
    100
}
fn default_estimate_samples() -> usize {
    256
}

impl HttpPolicyConfig {
    pub fn new(base_url: &str) -> Self {
        Self {
            base_url: base_url.to_string(),
            api_key: None,
            completions_path: default_completions_path(),
            temperature: default_temperature(),
            top_logprobs: default_top_logprobs(),
            timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            backoff_base_ms: default_backoff_ms(),
            estimate_samples: default_estimate_samples(),
            seed: None,
        }
    }

    /// Read `ACF_API_BASE` and `ACF_API_KEY` from the environment.
    pub fn from_env() -> Result<Self, PolicyError> {
        let base_url = std::env::var("ACF_API_BASE").map_err(|_| {
            PolicyError::Auth("ACF_API_BASE is not set; configure the endpoint first".into())
        })?;
        let mut config = Self::new(&base_url);
        config.api_key = std::env::var("ACF_API_KEY").ok();
        Ok(config)
    }
}

/// Policy served by an OpenAI-compatible completions endpoint.
///
/// The endpoint owns tokenization, so `tokenize`/`join_tokens` are
/// unsupported: open-text counterfactual queries against HTTP providers must
/// carry pre-tokenized observations.
pub struct HttpPolicy {
    config: HttpPolicyConfig,
    agent: ureq::Agent,
}

impl HttpPolicy {
    pub fn new(config: HttpPolicyConfig) -> Self {
        let agent = httpclient::build_agent(config.timeout_secs);
        Self { config, agent }
    }

    fn completions_url(&self) -> String {
        format!(
            "{}{}",
            self.config.base_url.trim_end_matches('/'),
            self.config.completions_path
        )
    }

    fn post(&self, url: &str, body: &Value) -> Result<Value, PolicyError> {
        Ok(httpclient::post_json(
            &self.agent,
            url,
            self.config.api_key.as_deref(),
            body,
            self.config.max_retries,
            self.config.backoff_base_ms,
        )?)
    }

    fn completion_request(&self, state: &StateRef, overrides: Value) -> Value {
        let mut body = json!({
            "model": state.model_config,
            "prompt": state.prompt,
            "max_tokens": state.max_len,
            "temperature": self.config.temperature,
        });
        if let Some(seed) = self.config.seed {
            body["seed"] = json!(seed);
        }
        if let Value::Object(extra) = overrides {
            for (k, v) in extra {
                body[k] = v;
            }
        }
        body
    }

    /// Top log-probabilities of the first generated position.
    fn first_position_logprobs(
        &self,
        state: &StateRef,
    ) -> Result<BTreeMap<String, f64>, PolicyError> {
        let body = self.completion_request(
            state,
            json!({"max_tokens": 1, "logprobs": self.config.top_logprobs}),
        );
        let response = self.post(&self.completions_url(), &body)?;
        let top = response
            .pointer("/choices/0/logprobs/top_logprobs/0")
            .and_then(Value::as_object)
            .ok_or_else(|| {
                PolicyError::MalformedResponse(
                    "missing choices[0].logprobs.top_logprobs[0]".into(),
                )
            })?;
        let mut out = BTreeMap::new();
        for (token, lp) in top {
            let lp = lp.as_f64().ok_or_else(|| {
                PolicyError::MalformedResponse(format!("non-numeric logprob for {token:?}"))
            })?;
            out.insert(token.clone(), lp);
        }
        if out.is_empty() {
            return Err(PolicyError::MalformedResponse(
                "empty top_logprobs map".into(),
            ));
        }
        Ok(out)
    }

    /// Find a label among reported tokens, tolerating a leading space (many
    /// tokenizers attach it to the token).
    fn lookup_token(map: &BTreeMap<String, f64>, label: &str) -> Option<f64> {
        map.get(label)
            .or_else(|| map.get(&format!(" {label}")))
            .copied()
    }

    /// Monte-Carlo fallback: sample single tokens and count label matches.
    fn estimate_choice_probs(
        &self,
        state: &StateRef,
        labels: &[String],
    ) -> Result<Vec<f64>, PolicyError> {
        let body = self.completion_request(
            state,
            json!({"max_tokens": 1, "n": self.config.estimate_samples}),
        );
        let response = self.post(&self.completions_url(), &body)?;
        let choices = response
            .pointer("/choices")
            .and_then(Value::as_array)
            .ok_or_else(|| PolicyError::MalformedResponse("missing choices array".into()))?;
        let mut counts = vec![0u64; labels.len()];
        for choice in choices {
            let text = choice
                .pointer("/text")
                .and_then(Value::as_str)
                .unwrap_or("")
                .trim();
            if let Some(idx) = labels.iter().position(|l| l == text) {
                counts[idx] += 1;
            }
        }
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(PolicyError::Estimation(format!(
                "none of {} sampled tokens matched a choice label",
                choices.len()
            )));
        }
        Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
    }
}

impl PolicyProvider for HttpPolicy {
    fn tag(&self) -> String {
        format!("http:{}", self.config.base_url)
    }

    fn choice_logits(
        &self,
        state: &StateRef,
        labels: &[String],
    ) -> Result<ChoiceDistribution, PolicyError> {
        for label in labels {
            require_single_token(label)?;
        }
        let reported = self.first_position_logprobs(state)?;
        let logits: Option<Vec<f64>> = labels
            .iter()
            .map(|l| Self::lookup_token(&reported, l))
            .collect();
        match logits {
            Some(logits) => Ok(ChoiceDistribution {
                dist: Categorical::new(labels.to_vec(), logits)?,
                estimated: false,
            }),
            None => {
                let probs = self.estimate_choice_probs(state, labels)?;
                Ok(ChoiceDistribution {
                    dist: Categorical::from_probs(labels.to_vec(), probs)?,
                    estimated: true,
                })
            }
        }
    }

    fn next_token_distribution(&self, state: &StateRef) -> Result<Categorical, PolicyError> {
        let reported = self.first_position_logprobs(state)?;
        // Order by descending log-probability, ties lexicographic, so the
        // label order is deterministic for a given response.
        let mut entries: Vec<(String, f64)> = reported.into_iter().collect();
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let (labels, logits): (Vec<String>, Vec<f64>) = entries.into_iter().unzip();
        Ok(Categorical::new(labels, logits)?)
    }

    fn sample_continuation(
        &self,
        state: &StateRef,
        _rng: &mut dyn RngCore,
    ) -> Result<ActionSample, PolicyError> {
        let body = self.completion_request(state, json!({"logprobs": 1}));
        let response = self.post(&self.completions_url(), &body)?;
        let text = response
            .pointer("/choices/0/text")
            .and_then(Value::as_str)
            .ok_or_else(|| PolicyError::MalformedResponse("missing choices[0].text".into()))?;
        if text.is_empty() {
            return Err(PolicyError::MalformedResponse(
                "provider returned an empty continuation".into(),
            ));
        }
        let token_logprob_sum = response
            .pointer("/choices/0/logprobs/token_logprobs")
            .and_then(Value::as_array)
            .map(|lps| lps.iter().filter_map(Value::as_f64).sum())
            .unwrap_or(0.0);
        Ok(ActionSample {
            content: text.to_string(),
            token_logprob_sum,
            provider_tag: self.tag(),
        })
    }

    fn tokenize(&self, _text: &str) -> Result<Vec<String>, PolicyError> {
        Err(PolicyError::Unsupported(
            "the completions endpoint does not expose tokenization; supply observed tokens"
                .into(),
        ))
    }

    fn join_tokens(&self, _tokens: &[String]) -> Result<String, PolicyError> {
        Err(PolicyError::Unsupported(
            "the completions endpoint does not expose tokenization".into(),
        ))
    }

    fn has_model_config(&self, _config: &str) -> Result<bool, PolicyError> {
        // Model ids are opaque server-side names; existence surfaces as an
        // API error on first use.
        Ok(true)
    }
}

// ---------------------------------------------------------------------------
// Record / replay wrappers
// ---------------------------------------------------------------------------

fn op_request(op: &str, state: Option<&StateRef>, extra: Value) -> Value {
    let mut body = json!({"surface": "policy", "op": op});
    if let Some(state) = state {
        body["state"] = serde_json::to_value(state).expect("state serializes");
    }
    if let Value::Object(extra) = extra {
        for (k, v) in extra {
            body[k] = v;
        }
    }
    body
}

fn from_value<T: serde::de::DeserializeOwned>(
    value: Value,
    what: &str,
) -> Result<T, PolicyError> {
    serde_json::from_value(value)
        .map_err(|e| PolicyError::MalformedResponse(format!("recorded {what}: {e}")))
}

/// Wraps a provider, recording every interaction to a fixture store.
pub struct RecordingPolicy<P> {
    inner: P,
    store: Arc<RecordStore>,
}

impl<P: PolicyProvider> RecordingPolicy<P> {
    pub fn new(inner: P, store: Arc<RecordStore>) -> Self {
        Self { inner, store }
    }

    fn capture<T: Serialize>(
        &self,
        request: &Value,
        result: Result<T, PolicyError>,
    ) -> Result<T, PolicyError> {
        let value = result?;
        self.store
            .record(request, &serde_json::to_value(&value).expect("serializable"))?;
        Ok(value)
    }
}

impl<P: PolicyProvider> PolicyProvider for RecordingPolicy<P> {
    fn tag(&self) -> String {
        self.inner.tag()
    }

    fn choice_logits(
        &self,
        state: &StateRef,
        labels: &[String],
    ) -> Result<ChoiceDistribution, PolicyError> {
        let request = op_request("choice_logits", Some(state), json!({"labels": labels}));
        self.capture(&request, self.inner.choice_logits(state, labels))
    }

    fn next_token_distribution(&self, state: &StateRef) -> Result<Categorical, PolicyError> {
        let request = op_request("next_token_distribution", Some(state), json!({}));
        self.capture(&request, self.inner.next_token_distribution(state))
    }

    fn sample_continuation(
        &self,
        state: &StateRef,
        rng: &mut dyn RngCore,
    ) -> Result<ActionSample, PolicyError> {
        let request = op_request("sample_continuation", Some(state), json!({}));
        self.capture(&request, self.inner.sample_continuation(state, rng))
    }

    fn tokenize(&self, text: &str) -> Result<Vec<String>, PolicyError> {
        let request = op_request("tokenize", None, json!({"text": text}));
        self.capture(&request, self.inner.tokenize(text))
    }

    fn join_tokens(&self, tokens: &[String]) -> Result<String, PolicyError> {
        let request = op_request("join_tokens", None, json!({"tokens": tokens}));
        self.capture(&request, self.inner.join_tokens(tokens))
    }

    fn has_model_config(&self, config: &str) -> Result<bool, PolicyError> {
        let request = op_request("has_model_config", None, json!({"config": config}));
        self.capture(&request, self.inner.has_model_config(config))
    }
}

/// Serves a recorded fixture; never touches a live endpoint.
pub struct ReplayPolicy {
    store: Arc<ReplayStore>,
}

impl ReplayPolicy {
    pub fn new(store: Arc<ReplayStore>) -> Self {
        Self { store }
    }
}

impl PolicyProvider for ReplayPolicy {
    fn tag(&self) -> String {
        "replay".into()
    }

    fn choice_logits(
        &self,
        state: &StateRef,
        labels: &[String],
    ) -> Result<ChoiceDistribution, PolicyError> {
        let request = op_request("choice_logits", Some(state), json!({"labels": labels}));
        from_value(self.store.replay(&request)?, "choice distribution")
    }

    fn next_token_distribution(&self, state: &StateRef) -> Result<Categorical, PolicyError> {
        let request = op_request("next_token_distribution", Some(state), json!({}));
        from_value(self.store.replay(&request)?, "token distribution")
    }

    fn sample_continuation(
        &self,
        state: &StateRef,
        _rng: &mut dyn RngCore,
    ) -> Result<ActionSample, PolicyError> {
        let request = op_request("sample_continuation", Some(state), json!({}));
        from_value(self.store.replay(&request)?, "continuation")
    }

    fn tokenize(&self, text: &str) -> Result<Vec<String>, PolicyError> {
        let request = op_request("tokenize", None, json!({"text": text}));
        from_value(self.store.replay(&request)?, "tokens")
    }

    fn join_tokens(&self, tokens: &[String]) -> Result<String, PolicyError> {
        let request = op_request("join_tokens", None, json!({"tokens": tokens}));
        from_value(self.store.replay(&request)?, "joined text")
    }

    fn has_model_config(&self, config: &str) -> Result<bool, PolicyError> {
        let request = op_request("has_model_config", None, json!({"config": config}));
        from_value(self.store.replay(&request)?, "config flag")
    }
}
