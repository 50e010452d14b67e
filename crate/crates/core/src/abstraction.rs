//! Abstraction providers: scoring P_Y(y | a, s), state-marginal abstraction
//! distributions, and unsupervised topic discovery/assignment.
//!
//! An abstraction space is a soft partition of action meanings into a small
//! set of classes. Scores come from scene annotations (degenerate), local
//! score tables, a remote classifier, or an LLM prompted to assign topics;
//! all providers return the same validated shape, so the inference engine is
//! agnostic to where the abstraction comes from.

use crate::dist::{Categorical, DistError};
use crate::envsim::{SceneBundle, MORALITY_TAGS};
use crate::fixtures::{FixtureError, RecordStore, ReplayStore};
use crate::httpclient::{self, HttpCallError};
use crate::policy::{sample_continuations, ActionSample, PolicyError, PolicyProvider, StateRef};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use thiserror::Error;

/// Prompt template for the topic-discovery phase; the slot
/// `<formatted string list>` receives one quoted sample per line.
pub const TOPIC_DISCOVERY_TEMPLATE: &str = include_str!("../assets/topic_discovery_prompt.txt");

/// Prompt template for topic assignment; `<formatted topics>` receives
/// `id. title: description` lines and `<formatted string>` the raw sample.
pub const TOPIC_ASSIGNMENT_TEMPLATE: &str = include_str!("../assets/topic_assignment_prompt.txt");

#[derive(Debug, Error)]
pub enum AbstractionError {
    #[error("invalid abstraction space: {0}")]
    InvalidSpace(String),
    #[error("cannot score: {0}")]
    Unscorable(String),
    #[error("abstraction space mismatch: expected {expected:?}, got {got:?}")]
    SpaceMismatch { expected: Vec<String>, got: Vec<String> },
    #[error("topic response unparseable after {attempts} attempts; last response: {last:?}")]
    ParseFailure { attempts: usize, last: String },
    #[error("topic discovery produced an empty topic list")]
    EmptyTopicList,
    #[error("exact marginal requires a choice-based state")]
    ExactModeUnavailable,
    #[error("no continuation samples survived; cannot estimate the marginal")]
    NoSamples,
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("authentication rejected: {0}")]
    Auth(String),
    #[error("endpoint returned status {status}: {body}")]
    Api { status: u16, body: String },
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error(transparent)]
    Replay(#[from] FixtureError),
}

impl From<HttpCallError> for AbstractionError {
    fn from(e: HttpCallError) -> Self {
        match e {
            HttpCallError::Transport(msg) => AbstractionError::Transport(msg),
            HttpCallError::Auth(msg) => AbstractionError::Auth(msg),
            HttpCallError::Api { status, body } => AbstractionError::Api { status, body },
            HttpCallError::Malformed(msg) => AbstractionError::Malformed(msg),
        }
    }
}

/// One abstraction class: a short title and a one-line description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicClass {
    pub label: String,
    pub description: String,
}

impl TopicClass {
    pub fn new(label: &str, description: &str) -> Self {
        Self {
            label: label.to_string(),
            description: description.to_string(),
        }
    }
}

/// Label reserved for the coverage class appended after topic discovery.
pub const OTHER_LABEL: &str = "Other";

/// An ordered set of abstraction classes — the support of the abstraction
/// variable. When `includes_other`, the catch-all class sits last.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbstractionSpace {
    classes: Vec<TopicClass>,
    includes_other: bool,
}

impl AbstractionSpace {
    pub fn new(classes: Vec<TopicClass>, includes_other: bool) -> Result<Self, AbstractionError> {
        if classes.is_empty() {
            return Err(AbstractionError::InvalidSpace("no classes".into()));
        }
        for (i, class) in classes.iter().enumerate() {
            if class.label.is_empty() {
                return Err(AbstractionError::InvalidSpace("empty class label".into()));
            }
            if classes[..i].iter().any(|c| c.label == class.label) {
                return Err(AbstractionError::InvalidSpace(format!(
                    "duplicate class label {:?}",
                    class.label
                )));
            }
        }
        if includes_other && classes.last().map(|c| c.label.as_str()) != Some(OTHER_LABEL) {
            return Err(AbstractionError::InvalidSpace(format!(
                "{OTHER_LABEL:?} must be the last class"
            )));
        }
        Ok(Self {
            classes,
            includes_other,
        })
    }

    /// Append the catch-all class to a discovered topic list.
    pub fn with_other(mut classes: Vec<TopicClass>) -> Result<Self, AbstractionError> {
        classes.retain(|c| c.label != OTHER_LABEL);
        classes.push(TopicClass::new(OTHER_LABEL, "none of the other topics"));
        Self::new(classes, true)
    }

    pub fn classes(&self) -> &[TopicClass] {
        &self.classes
    }

    pub fn includes_other(&self) -> bool {
        self.includes_other
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn labels(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.label.clone()).collect()
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.label == label)
    }

    pub fn other_index(&self) -> Option<usize> {
        self.includes_other.then(|| self.classes.len() - 1)
    }
}

/// The distribution P_Y(y | a, s) for one (state, action) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstractionScore {
    pub space: Arc<AbstractionSpace>,
    pub dist: Categorical,
    /// All mass on a single class (fixed annotations score this way).
    pub degenerate: bool,
    /// The provider could not produce a real score and fell back to a point
    /// mass on the catch-all class.
    pub fallback: bool,
}

impl AbstractionScore {
    pub fn new(space: Arc<AbstractionSpace>, dist: Categorical) -> Result<Self, AbstractionError> {
        let expected = space.labels();
        if dist.labels() != expected.as_slice() {
            return Err(AbstractionError::SpaceMismatch {
                expected,
                got: dist.labels().to_vec(),
            });
        }
        let degenerate = dist.probs().iter().any(|&p| p == 1.0);
        Ok(Self {
            space,
            dist,
            degenerate,
            fallback: false,
        })
    }

    pub fn point_mass(space: Arc<AbstractionSpace>, index: usize) -> Result<Self, AbstractionError> {
        let dist = Categorical::point_mass(space.labels(), index)?;
        Self::new(space, dist)
    }
}

/// A scorer of P_Y(y | a, s), behind a uniform surface.
pub trait AbstractionProvider: Send + Sync {
    fn tag(&self) -> String;
    fn space(&self) -> &Arc<AbstractionSpace>;
    fn score(
        &self,
        state: &StateRef,
        action: &ActionSample,
    ) -> Result<AbstractionScore, AbstractionError>;
}

// ---------------------------------------------------------------------------
// Annotation-table provider (degenerate scores from scene annotations)
// ---------------------------------------------------------------------------

/// Scores choice actions by a scene's binary morality annotations: the
/// flagged class when the chosen edge carries the tag, its complement
/// otherwise. Always degenerate.
pub struct AnnotationAbstraction {
    bundle: Arc<SceneBundle>,
    tag_name: String,
    space: Arc<AbstractionSpace>,
}

impl AnnotationAbstraction {
    pub fn new(bundle: Arc<SceneBundle>, tag_name: &str) -> Result<Self, AbstractionError> {
        if !MORALITY_TAGS.contains(&tag_name) {
            return Err(AbstractionError::InvalidSpace(format!(
                "unknown annotation tag {tag_name:?}"
            )));
        }
        let space = Arc::new(AbstractionSpace::new(
            vec![
                TopicClass::new(tag_name, &format!("the action is annotated {tag_name} = 1")),
                TopicClass::new(
                    &format!("no_{tag_name}"),
                    &format!("the action is annotated {tag_name} = 0"),
                ),
            ],
            false,
        )?);
        Ok(Self {
            bundle,
            tag_name: tag_name.to_string(),
            space,
        })
    }
}

impl AbstractionProvider for AnnotationAbstraction {
    fn tag(&self) -> String {
        format!("annotation:{}", self.tag_name)
    }

    fn space(&self) -> &Arc<AbstractionSpace> {
        &self.space
    }

    fn score(
        &self,
        state: &StateRef,
        action: &ActionSample,
    ) -> Result<AbstractionScore, AbstractionError> {
        let scene_id = state
            .scene_id
            .as_deref()
            .ok_or_else(|| AbstractionError::Unscorable("state has no scene".into()))?;
        let scene = self
            .bundle
            .scene(scene_id)
            .map_err(|e| AbstractionError::Unscorable(e.to_string()))?;
        let choice = scene.choice(&action.content).ok_or_else(|| {
            AbstractionError::Unscorable(format!(
                "scene {scene_id:?} has no choice {:?}",
                action.content
            ))
        })?;
        let index = if choice.tag(&self.tag_name) == 1 { 0 } else { 1 };
        AbstractionScore::point_mass(Arc::clone(&self.space), index)
    }
}

// ---------------------------------------------------------------------------
// Local score-table provider
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct TableClassifierFile {
    classes: Vec<TopicClass>,
    #[serde(default)]
    includes_other: bool,
    scores: BTreeMap<String, BTreeMap<String, Vec<f64>>>,
}

/// Classifier fixture backed by a `(state text, action text) -> class
/// probabilities` table.
///
/// File format: `{"classes": [{"label", "description"}, ...],
/// "includes_other": bool, "scores": {"<state text>": {"<action text>":
/// [p, ...]}}}`.
pub struct TableClassifier {
    space: Arc<AbstractionSpace>,
    scores: BTreeMap<String, BTreeMap<String, Vec<f64>>>,
}

impl TableClassifier {
    pub fn from_json(text: &str) -> Result<Self, AbstractionError> {
        let file: TableClassifierFile = serde_json::from_str(text)
            .map_err(|e| AbstractionError::Malformed(format!("score table: {e}")))?;
        let space = Arc::new(AbstractionSpace::new(file.classes, file.includes_other)?);
        for by_action in file.scores.values() {
            for probs in by_action.values() {
                if probs.len() != space.len() {
                    return Err(AbstractionError::Malformed(format!(
                        "a score row has {} entries for {} classes",
                        probs.len(),
                        space.len()
                    )));
                }
            }
        }
        Ok(Self {
            space,
            scores: file.scores,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, AbstractionError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AbstractionError::Transport(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

impl AbstractionProvider for TableClassifier {
    fn tag(&self) -> String {
        "table-classifier".into()
    }

    fn space(&self) -> &Arc<AbstractionSpace> {
        &self.space
    }

    fn score(
        &self,
        state: &StateRef,
        action: &ActionSample,
    ) -> Result<AbstractionScore, AbstractionError> {
        let probs = self
            .scores
            .get(&state.prompt)
            .and_then(|by_action| by_action.get(&action.content))
            .ok_or_else(|| {
                AbstractionError::Unscorable(format!(
                    "no score recorded for state {:?} action {:?}",
                    state.prompt, action.content
                ))
            })?;
        let dist = Categorical::from_probs(self.space.labels(), probs.clone())?;
        AbstractionScore::new(Arc::clone(&self.space), dist)
    }
}

// ---------------------------------------------------------------------------
// Remote classifier provider
// ---------------------------------------------------------------------------

/// Connection settings for [`HttpClassifier`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpClassifierConfig {
    pub base_url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key: Option<String>,
    #[serde(default = "default_classify_path")]
    pub path: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: usize,
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
}

fn default_classify_path() -> String {
    "/v1/classify".into()
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

impl HttpClassifierConfig {
    pub fn new(base_url: &str) -> Self {
        Self {
            base_url: base_url.to_string(),
            api_key: None,
            path: default_classify_path(),
            timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            backoff_base_ms: default_backoff_ms(),
        }
    }
}

/// External scorer endpoint: POST `{state_text, action_text}`, response
/// `{"class_probs": [...]}` aligned with the configured space.
pub struct HttpClassifier {
    space: Arc<AbstractionSpace>,
    config: HttpClassifierConfig,
    agent: ureq::Agent,
}

impl HttpClassifier {
    pub fn new(space: Arc<AbstractionSpace>, config: HttpClassifierConfig) -> Self {
        let agent = httpclient::build_agent(config.timeout_secs);
        Self {
            space,
            config,
            agent,
        }
    }
}

impl AbstractionProvider for HttpClassifier {
    fn tag(&self) -> String {
        format!("http-classifier:{}", self.config.base_url)
    }

    fn space(&self) -> &Arc<AbstractionSpace> {
        &self.space
    }

    fn score(
        &self,
        state: &StateRef,
        action: &ActionSample,
    ) -> Result<AbstractionScore, AbstractionError> {
        let url = format!(
            "{}{}",
            self.config.base_url.trim_end_matches('/'),
            self.config.path
        );
        let body = json!({"state_text": state.prompt, "action_text": action.content});
        let response = httpclient::post_json(
            &self.agent,
            &url,
            self.config.api_key.as_deref(),
            &body,
            self.config.max_retries,
            self.config.backoff_base_ms,
        )?;
        let probs: Vec<f64> = response
            .pointer("/class_probs")
            .and_then(Value::as_array)
            .map(|xs| xs.iter().filter_map(Value::as_f64).collect())
            .ok_or_else(|| AbstractionError::Malformed("missing class_probs".into()))?;
        if probs.len() != self.space.len() {
            return Err(AbstractionError::Malformed(format!(
                "classifier returned {} probabilities for {} classes",
                probs.len(),
                self.space.len()
            )));
        }
        let dist = Categorical::from_probs(self.space.labels(), probs)?;
        AbstractionScore::new(Arc::clone(&self.space), dist)
    }
}

// ---------------------------------------------------------------------------
// State-marginal abstraction distribution
// ---------------------------------------------------------------------------

/// How to marginalize the abstraction over actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarginalMode {
    /// Enumerate the choice labels exactly (choice-based states only).
    Exact,
    /// Average scores of `n` sampled continuations.
    MonteCarlo { n: usize },
}

/// P(Y | s) with estimation metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalAbstraction {
    pub dist: Categorical,
    /// Per-class Monte-Carlo standard errors; zeros in exact mode.
    pub standard_error: Vec<f64>,
    pub n_samples: usize,
    /// Continuation draws that failed and were excluded (Monte-Carlo only).
    pub failures: usize,
    pub exact: bool,
}

/// Compute P(Y = y | s) = Σ_a P_Y(y | a, s) · P_A(a | s).
///
/// Exact mode enumerates `choices` with `choice_logits` weights; Monte-Carlo
/// mode averages scores of sampled continuations and attaches standard
/// errors. Failed draws are excluded from the average but counted in
/// `failures`, never silently dropped.
pub fn marginal_abstraction(
    state: &StateRef,
    choices: &[String],
    policy: &dyn PolicyProvider,
    abstraction: &dyn AbstractionProvider,
    mode: MarginalMode,
    rng: &mut dyn RngCore,
) -> Result<MarginalAbstraction, AbstractionError> {
    let space = abstraction.space();
    match mode {
        MarginalMode::Exact => {
            if !state.is_choice_based() {
                return Err(AbstractionError::ExactModeUnavailable);
            }
            let action_dist = policy.choice_logits(state, choices)?;
            let action_probs = action_dist.dist.probs();
            let mut marginal = vec![0.0; space.len()];
            for (label, weight) in choices.iter().zip(action_probs) {
                let action = ActionSample {
                    content: label.clone(),
                    token_logprob_sum: 0.0,
                    provider_tag: "enumeration".into(),
                };
                let score = abstraction.score(state, &action)?;
                for (total, p) in marginal.iter_mut().zip(score.dist.probs()) {
                    *total += weight * p;
                }
            }
            Ok(MarginalAbstraction {
                dist: Categorical::from_probs(space.labels(), marginal)?,
                standard_error: vec![0.0; space.len()],
                n_samples: choices.len(),
                failures: 0,
                exact: true,
            })
        }
        MarginalMode::MonteCarlo { n } => {
            assert!(n >= 1, "marginal_abstraction: n must be >= 1");
            let batch = sample_continuations(state, n, policy, rng);
            let mut rows: Vec<Vec<f64>> = Vec::new();
            let mut failures = 0;
            for item in batch {
                match item {
                    Ok(action) => rows.push(abstraction.score(state, &action)?.dist.probs()),
                    Err(_) => failures += 1,
                }
            }
            if rows.is_empty() {
                return Err(AbstractionError::NoSamples);
            }
            let m = rows.len() as f64;
            let mut mean = vec![0.0; space.len()];
            for row in &rows {
                for (total, p) in mean.iter_mut().zip(row) {
                    *total += p / m;
                }
            }
            let mut standard_error = vec![0.0; space.len()];
            if rows.len() > 1 {
                for (k, se) in standard_error.iter_mut().enumerate() {
                    let var = rows
                        .iter()
                        .map(|row| (row[k] - mean[k]).powi(2))
                        .sum::<f64>()
                        / (m - 1.0);
                    *se = (var / m).sqrt();
                }
            }
            Ok(MarginalAbstraction {
                dist: Categorical::from_probs(space.labels(), mean)?,
                standard_error,
                n_samples: rows.len(),
                failures,
                exact: false,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// LLM provider surface (topic discovery and assignment)
// ---------------------------------------------------------------------------

/// A text-completion model used for topic discovery and assignment.
pub trait LlmProvider: Send + Sync {
    fn tag(&self) -> String;
    /// Free-form completion of a prompt.
    fn complete(&self, prompt: &str, max_tokens: usize) -> Result<String, AbstractionError>;
    /// Log-probabilities of the most likely single next tokens.
    fn top_token_logprobs(&self, prompt: &str)
        -> Result<BTreeMap<String, f64>, AbstractionError>;
}

/// Scripted LLM for tests and offline fixtures: serves queued responses in
/// order.
#[derive(Default)]
pub struct MockLlm {
    completions: Mutex<std::collections::VecDeque<String>>,
    logprobs: Mutex<std::collections::VecDeque<BTreeMap<String, f64>>>,
}

impl MockLlm {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_completion(&self, text: &str) {
        self.completions.lock().unwrap().push_back(text.to_string());
    }

    pub fn push_logprobs(&self, entries: &[(&str, f64)]) {
        let map = entries
            .iter()
            .map(|(t, lp)| (t.to_string(), *lp))
            .collect();
        self.logprobs.lock().unwrap().push_back(map);
    }
}

impl LlmProvider for MockLlm {
    fn tag(&self) -> String {
        "mock-llm".into()
    }

    fn complete(&self, _prompt: &str, _max_tokens: usize) -> Result<String, AbstractionError> {
        self.completions
            .lock()
            .unwrap()
            .pop_front()
            .ok_or_else(|| AbstractionError::Transport("mock has no queued completion".into()))
    }

    fn top_token_logprobs(
        &self,
        _prompt: &str,
    ) -> Result<BTreeMap<String, f64>, AbstractionError> {
        self.logprobs
            .lock()
            .unwrap()
            .pop_front()
            .ok_or_else(|| AbstractionError::Transport("mock has no queued logprobs".into()))
    }
}

/// Connection settings for [`HttpLlm`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpLlmConfig {
    pub base_url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key: Option<String>,
    #[serde(default = "default_completions_path")]
    pub completions_path: String,
    pub model: String,
    #[serde(default = "default_llm_temperature")]
    pub temperature: f64,
    #[serde(default = "default_top_logprobs")]
    pub top_logprobs: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: usize,
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
}

fn default_completions_path() -> String {
    "/v1/completions".into()
}
fn default_llm_temperature() -> f64 {
    0.0
}
fn default_top_logprobs() -> usize {
    20
}

impl HttpLlmConfig {
    pub fn new(base_url: &str, model: &str) -> Self {
        Self {
            base_url: base_url.to_string(),
            api_key: None,
            completions_path: default_completions_path(),
            model: model.to_string(),
            temperature: default_llm_temperature(),
            top_logprobs: default_top_logprobs(),
            timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            backoff_base_ms: default_backoff_ms(),
        }
    }
}

/// LLM served by an OpenAI-compatible completions endpoint.
pub struct HttpLlm {
    config: HttpLlmConfig,
    agent: ureq::Agent,
}

impl HttpLlm {
    pub fn new(config: HttpLlmConfig) -> Self {
        let agent = httpclient::build_agent(config.timeout_secs);
        Self { config, agent }
    }

    fn post(&self, body: &Value) -> Result<Value, AbstractionError> {
        let url = format!(
            "{}{}",
            self.config.base_url.trim_end_matches('/'),
            self.config.completions_path
        );
        Ok(httpclient::post_json(
            &self.agent,
            &url,
            self.config.api_key.as_deref(),
            body,
            self.config.max_retries,
            self.config.backoff_base_ms,
        )?)
    }
}

impl LlmProvider for HttpLlm {
    fn tag(&self) -> String {
        format!("http-llm:{}", self.config.model)
    }

    fn complete(&self, prompt: &str, max_tokens: usize) -> Result<String, AbstractionError> {
        let body = json!({
            "model": self.config.model,
            "prompt": prompt,
            "max_tokens": max_tokens,
            "temperature": self.config.temperature,
        });
        let response = self.post(&body)?;
        response
            .pointer("/choices/0/text")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| AbstractionError::Malformed("missing choices[0].text".into()))
    }

    fn top_token_logprobs(
        &self,
        prompt: &str,
    ) -> Result<BTreeMap<String, f64>, AbstractionError> {
        let body = json!({
            "model": self.config.model,
            "prompt": prompt,
            "max_tokens": 1,
            "temperature": self.config.temperature,
            "logprobs": self.config.top_logprobs,
        });
        let response = self.post(&body)?;
        let top = response
            .pointer("/choices/0/logprobs/top_logprobs/0")
            .and_then(Value::as_object)
            .ok_or_else(|| {
                AbstractionError::Malformed("missing choices[0].logprobs.top_logprobs[0]".into())
            })?;
        let mut out = BTreeMap::new();
        for (token, lp) in top {
            let lp = lp.as_f64().ok_or_else(|| {
                AbstractionError::Malformed(format!("non-numeric logprob for {token:?}"))
            })?;
            out.insert(token.clone(), lp);
        }
        Ok(out)
    }
}

/// Wraps an LLM provider, recording every interaction.
pub struct RecordingLlm<L> {
    inner: L,
    store: Arc<RecordStore>,
}

impl<L: LlmProvider> RecordingLlm<L> {
    pub fn new(inner: L, store: Arc<RecordStore>) -> Self {
        Self { inner, store }
    }
}

impl<L: LlmProvider> LlmProvider for RecordingLlm<L> {
    fn tag(&self) -> String {
        self.inner.tag()
    }

    fn complete(&self, prompt: &str, max_tokens: usize) -> Result<String, AbstractionError> {
        let request =
            json!({"surface": "llm", "op": "complete", "prompt": prompt, "max_tokens": max_tokens});
        let text = self.inner.complete(prompt, max_tokens)?;
        self.store.record(&request, &json!({"text": text}))?;
        Ok(text)
    }

    fn top_token_logprobs(
        &self,
        prompt: &str,
    ) -> Result<BTreeMap<String, f64>, AbstractionError> {
        let request = json!({"surface": "llm", "op": "top_token_logprobs", "prompt": prompt});
        let map = self.inner.top_token_logprobs(prompt)?;
        self.store
            .record(&request, &serde_json::to_value(&map).expect("map serializes"))?;
        Ok(map)
    }
}

/// Serves recorded LLM interactions; never touches a live endpoint.
pub struct ReplayLlm {
    store: Arc<ReplayStore>,
}

impl ReplayLlm {
    pub fn new(store: Arc<ReplayStore>) -> Self {
        Self { store }
    }
}

impl LlmProvider for ReplayLlm {
    fn tag(&self) -> String {
        "replay-llm".into()
    }

    fn complete(&self, prompt: &str, max_tokens: usize) -> Result<String, AbstractionError> {
        let request =
            json!({"surface": "llm", "op": "complete", "prompt": prompt, "max_tokens": max_tokens});
        let response = self.store.replay(&request)?;
        response
            .pointer("/text")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| AbstractionError::Malformed("recorded completion lacks text".into()))
    }

    fn top_token_logprobs(
        &self,
        prompt: &str,
    ) -> Result<BTreeMap<String, f64>, AbstractionError> {
        let request = json!({"surface": "llm", "op": "top_token_logprobs", "prompt": prompt});
        let response = self.store.replay(&request)?;
        serde_json::from_value(response)
            .map_err(|e| AbstractionError::Malformed(format!("recorded logprobs: {e}")))
    }
}

// ---------------------------------------------------------------------------
// Topic discovery
// ---------------------------------------------------------------------------

/// Budgets for the discovery conversation.
#[derive(Debug, Clone)]
pub struct DiscoveryConfig {
    /// Re-prompts allowed after the first malformed response.
    pub max_reprompts: usize,
    pub max_tokens: usize,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            max_reprompts: 3,
            max_tokens: 512,
        }
    }
}

/// Fill the discovery template with one quoted sample per line.
pub fn render_discovery_prompt(samples: &[String]) -> String {
    let formatted = samples
        .iter()
        .map(|s| serde_json::to_string(s).expect("string serializes"))
        .collect::<Vec<_>>()
        .join("\n");
    TOPIC_DISCOVERY_TEMPLATE.replace("<formatted string list>", &formatted)
}

/// Fill the assignment template for one sample.
pub fn render_assignment_prompt(sample: &str, space: &AbstractionSpace) -> String {
    let formatted = space
        .classes()
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{i}. {}: {}", c.label, c.description))
        .collect::<Vec<_>>()
        .join("\n");
    TOPIC_ASSIGNMENT_TEMPLATE
        .replace("<formatted topics>", &formatted)
        .replace("<formatted string>", sample)
}

/// Parse an LLM reply as a list of `(title, description)` tuples.
///
/// Accepts an optional markdown code fence and leading prose before the
/// list; inside the brackets the grammar is strict: parenthesized pairs of
/// single- or double-quoted strings with backslash escapes.
pub fn parse_tuple_list(text: &str) -> Result<Vec<(String, String)>, String> {
    let body = strip_code_fence(text);
    let start = body.find('[').ok_or("no list found")?;
    let chars: Vec<char> = body[start..].chars().collect();
    let mut pos = 0usize;

    fn skip_ws(chars: &[char], pos: &mut usize) {
        while *pos < chars.len() && chars[*pos].is_whitespace() {
            *pos += 1;
        }
    }

    fn parse_string(chars: &[char], pos: &mut usize) -> Result<String, String> {
        skip_ws(chars, pos);
        let quote = match chars.get(*pos) {
            Some(&q) if q == '"' || q == '\'' => q,
            other => return Err(format!("expected a quoted string, found {other:?}")),
        };
        *pos += 1;
        let mut out = String::new();
        while let Some(&c) = chars.get(*pos) {
            *pos += 1;
            if c == '\\' {
                let escaped = chars.get(*pos).ok_or("dangling escape")?;
                *pos += 1;
                out.push(match escaped {
                    'n' => '\n',
                    't' => '\t',
                    other => *other,
                });
            } else if c == quote {
                return Ok(out);
            } else {
                out.push(c);
            }
        }
        Err("unterminated string".into())
    }

    skip_ws(&chars, &mut pos);
    if chars.get(pos) != Some(&'[') {
        return Err("expected '['".into());
    }
    pos += 1;
    let mut tuples = Vec::new();
    loop {
        skip_ws(&chars, &mut pos);
        match chars.get(pos) {
            Some(&']') => break,
            Some(&',') => {
                pos += 1;
                continue;
            }
            Some(&'(') => {
                pos += 1;
                let title = parse_string(&chars, &mut pos)?;
                skip_ws(&chars, &mut pos);
                if chars.get(pos) != Some(&',') {
                    return Err("expected ',' inside tuple".into());
                }
                pos += 1;
                let description = parse_string(&chars, &mut pos)?;
                skip_ws(&chars, &mut pos);
                if chars.get(pos) != Some(&')') {
                    return Err("expected ')'".into());
                }
                pos += 1;
                tuples.push((title, description));
            }
            other => return Err(format!("expected '(' or ']', found {other:?}")),
        }
    }
    Ok(tuples)
}

fn strip_code_fence(text: &str) -> &str {
    let trimmed = text.trim();
    let Some(after_open) = trimmed.strip_prefix("```") else {
        return trimmed;
    };
    let after_lang = after_open
        .split_once('\n')
        .map(|(_, rest)| rest)
        .unwrap_or(after_open);
    after_lang.rsplit_once("```").map_or(after_lang, |(inner, _)| inner)
}

/// Discover an abstraction space from pooled factual/counterfactual samples.
///
/// Prompts the LLM for a tuple list, re-prompting up to the configured bound
/// on malformed or empty replies, deduplicates titles preserving order, and
/// appends the catch-all class.
pub fn discover_topics(
    samples: &[String],
    llm: &dyn LlmProvider,
    config: &DiscoveryConfig,
) -> Result<AbstractionSpace, AbstractionError> {
    if samples.is_empty() {
        return Err(AbstractionError::Unscorable(
            "topic discovery needs at least one sample".into(),
        ));
    }
    let prompt = render_discovery_prompt(samples);
    let mut last = String::new();
    let mut saw_empty_list = false;
    for _ in 0..=config.max_reprompts {
        last = llm.complete(&prompt, config.max_tokens)?;
        match parse_tuple_list(&last) {
            Ok(tuples) if tuples.is_empty() => {
                saw_empty_list = true;
            }
            Ok(tuples) => {
                let mut classes: Vec<TopicClass> = Vec::new();
                for (title, description) in tuples {
                    if classes.iter().any(|c| c.label == title) {
                        continue;
                    }
                    classes.push(TopicClass::new(&title, &description));
                }
                return AbstractionSpace::with_other(classes);
            }
            Err(_) => {}
        }
    }
    if saw_empty_list {
        return Err(AbstractionError::EmptyTopicList);
    }
    Err(AbstractionError::ParseFailure {
        attempts: config.max_reprompts + 1,
        last,
    })
}

// ---------------------------------------------------------------------------
// Topic assignment
// ---------------------------------------------------------------------------

/// Score one sample against a discovered space via the LLM's logits over
/// topic indices.
///
/// Tokens that do not parse as a class index are filtered out and their mass
/// dropped by renormalization; it is never redistributed to the catch-all
/// class, which competes only through its own index. When no valid index
/// token comes back at all, the score falls back to a point mass on the
/// catch-all class with the `fallback` flag set.
pub fn assign_topic(
    sample: &str,
    space: &Arc<AbstractionSpace>,
    llm: &dyn LlmProvider,
) -> Result<AbstractionScore, AbstractionError> {
    let prompt = render_assignment_prompt(sample, space);
    let reported = llm.top_token_logprobs(&prompt)?;
    let mut mass = vec![0.0; space.len()];
    let mut any_valid = false;
    for (token, logprob) in &reported {
        let Ok(index) = token.trim().parse::<usize>() else {
            continue;
        };
        if index >= space.len() {
            continue;
        }
        mass[index] += logprob.exp();
        any_valid = true;
    }
    if !any_valid {
        let other = space.other_index().ok_or_else(|| {
            AbstractionError::Unscorable(
                "no valid topic-index token and the space has no catch-all class".into(),
            )
        })?;
        let mut score = AbstractionScore::point_mass(Arc::clone(space), other)?;
        score.fallback = true;
        return Ok(score);
    }
    let dist = Categorical::from_probs(space.labels(), mass)?;
    AbstractionScore::new(Arc::clone(space), dist)
}

/// Abstraction provider that scores by LLM topic assignment.
pub struct TopicAbstraction {
    space: Arc<AbstractionSpace>,
    llm: Arc<dyn LlmProvider>,
}

impl TopicAbstraction {
    pub fn new(space: Arc<AbstractionSpace>, llm: Arc<dyn LlmProvider>) -> Self {
        Self { space, llm }
    }
}

impl AbstractionProvider for TopicAbstraction {
    fn tag(&self) -> String {
        format!("topics:{}", self.llm.tag())
    }

    fn space(&self) -> &Arc<AbstractionSpace> {
        &self.space
    }

    fn score(
        &self,
        _state: &StateRef,
        action: &ActionSample,
    ) -> Result<AbstractionScore, AbstractionError> {
        assign_topic(&action.content, &self.space, self.llm.as_ref())
    }
}

// ---------------------------------------------------------------------------
// Record / replay wrappers for score providers
// ---------------------------------------------------------------------------

fn score_request(tag: &str, state: &StateRef, action_content: &str) -> Value {
    json!({
        "surface": "abstraction",
        "op": "score",
        "tag": tag,
        "state": serde_json::to_value(state).expect("state serializes"),
        "action": action_content,
    })
}

/// Wraps an abstraction provider, recording every score.
pub struct RecordingAbstraction<P> {
    inner: P,
    store: Arc<RecordStore>,
}

impl<P: AbstractionProvider> RecordingAbstraction<P> {
    pub fn new(inner: P, store: Arc<RecordStore>) -> Self {
        Self { inner, store }
    }
}

impl<P: AbstractionProvider> AbstractionProvider for RecordingAbstraction<P> {
    fn tag(&self) -> String {
        self.inner.tag()
    }

    fn space(&self) -> &Arc<AbstractionSpace> {
        self.inner.space()
    }

    fn score(
        &self,
        state: &StateRef,
        action: &ActionSample,
    ) -> Result<AbstractionScore, AbstractionError> {
        let request = score_request(&self.inner.tag(), state, &action.content);
        let score = self.inner.score(state, action)?;
        self.store
            .record(&request, &serde_json::to_value(&score).expect("score serializes"))?;
        Ok(score)
    }
}

/// Serves recorded abstraction scores. Construction pins the space and the
/// tag of the provider that produced the fixture, so request keys line up.
pub struct ReplayAbstraction {
    store: Arc<ReplayStore>,
    space: Arc<AbstractionSpace>,
    source_tag: String,
}

impl ReplayAbstraction {
    pub fn new(store: Arc<ReplayStore>, space: Arc<AbstractionSpace>, source_tag: &str) -> Self {
        Self {
            store,
            space,
            source_tag: source_tag.to_string(),
        }
    }
}

impl AbstractionProvider for ReplayAbstraction {
    fn tag(&self) -> String {
        self.source_tag.clone()
    }

    fn space(&self) -> &Arc<AbstractionSpace> {
        &self.space
    }

    fn score(
        &self,
        state: &StateRef,
        action: &ActionSample,
    ) -> Result<AbstractionScore, AbstractionError> {
        let request = score_request(&self.source_tag, state, &action.content);
        let response = self.store.replay(&request)?;
        serde_json::from_value(response)
            .map_err(|e| AbstractionError::Malformed(format!("recorded score: {e}")))
    }
}

// ---------------------------------------------------------------------------
// Dependency diagnostics
// ---------------------------------------------------------------------------

/// Diagnostics for whether an abstraction is informative about (state,
/// action) pairs without being a per-sample relabeling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DependencyReport {
    pub n_observations: usize,
    pub n_identities: usize,
    /// Plug-in mutual information (nats) between the argmax class and the
    /// (state, action) identity.
    pub mutual_information: f64,
    /// Entropy (nats) of the averaged score distribution.
    pub marginal_entropy: f64,
    /// Mean score per class across all observations.
    pub mean_scores: Vec<f64>,
    pub class_labels: Vec<String>,
    /// MI below the configured threshold.
    pub low_dependency: bool,
    /// One class holds more than 99% of the averaged mass.
    pub too_coarse: bool,
    /// At least as many classes as observations.
    pub too_fine: bool,
    pub mi_threshold: f64,
}

/// Default MI floor below which a space is flagged as uninformative.
pub const DEFAULT_MI_THRESHOLD: f64 = 0.01;

/// Report empirical dependency between scores and their (state, action)
/// pairs.
pub fn diagnose_dependency(
    pairs: &[(StateRef, ActionSample, AbstractionScore)],
    mi_threshold: f64,
) -> Result<DependencyReport, AbstractionError> {
    let n = pairs.len();
    if n < 2 {
        return Err(AbstractionError::Unscorable(
            "dependency diagnosis needs at least 2 pairs".into(),
        ));
    }
    let space = &pairs[0].2.space;
    for (_, _, score) in pairs {
        if score.space.labels() != space.labels() {
            return Err(AbstractionError::SpaceMismatch {
                expected: space.labels(),
                got: score.space.labels(),
            });
        }
    }
    let identity = |state: &StateRef, action: &ActionSample| {
        format!(
            "{}\u{1f}{}\u{1f}{}",
            state.prompt,
            state.scene_id.as_deref().unwrap_or(""),
            action.content
        )
    };
    // Joint counts over (identity, argmax class).
    let mut joint: BTreeMap<(String, usize), usize> = BTreeMap::new();
    let mut by_identity: BTreeMap<String, usize> = BTreeMap::new();
    let mut by_class: BTreeMap<usize, usize> = BTreeMap::new();
    let mut mean_scores = vec![0.0; space.len()];
    for (state, action, score) in pairs {
        let id = identity(state, action);
        let class = score.dist.argmax();
        *joint.entry((id.clone(), class)).or_insert(0) += 1;
        *by_identity.entry(id).or_insert(0) += 1;
        *by_class.entry(class).or_insert(0) += 1;
        for (total, p) in mean_scores.iter_mut().zip(score.dist.probs()) {
            *total += p / n as f64;
        }
    }
    let n_identities = by_identity.len();
    if n_identities < 2 {
        return Err(AbstractionError::Unscorable(
            "dependency diagnosis needs at least 2 distinct (state, action) pairs".into(),
        ));
    }
    let nf = n as f64;
    let mut mutual_information = 0.0;
    for ((id, class), &count) in &joint {
        let p_xy = count as f64 / nf;
        let p_x = by_identity[id] as f64 / nf;
        let p_y = by_class[class] as f64 / nf;
        mutual_information += p_xy * (p_xy / (p_x * p_y)).ln();
    }
    // Clamp away the tiny negatives float cancellation can produce.
    mutual_information = mutual_information.max(0.0);
    let marginal_entropy = -mean_scores
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>();
    Ok(DependencyReport {
        n_observations: n,
        n_identities,
        mutual_information,
        marginal_entropy,
        too_coarse: mean_scores.iter().any(|&p| p > 0.99),
        too_fine: space.len() >= n,
        low_dependency: mutual_information < mi_threshold,
        mean_scores,
        class_labels: space.labels(),
        mi_threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::TabularChoicePolicy;
    use crate::policy::TabularTextPolicy;
    use crate::testhttp::CannedServer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn harm_space() -> Arc<AbstractionSpace> {
        Arc::new(
            AbstractionSpace::new(
                vec![
                    TopicClass::new("harm", "physical harm occurs"),
                    TopicClass::new("no_harm", "no physical harm"),
                ],
                false,
            )
            .unwrap(),
        )
    }

    fn action(content: &str) -> ActionSample {
        ActionSample {
            content: content.to_string(),
            token_logprob_sum: 0.0,
            provider_tag: "test".into(),
        }
    }

    #[test]
    fn space_validation() {
        assert!(AbstractionSpace::new(vec![], false).is_err());
        let dup = vec![TopicClass::new("a", ""), TopicClass::new("a", "")];
        assert!(AbstractionSpace::new(dup, false).is_err());
        let other_not_last = vec![TopicClass::new("Other", ""), TopicClass::new("a", "")];
        assert!(AbstractionSpace::new(other_not_last, true).is_err());
        let good = vec![TopicClass::new("a", ""), TopicClass::new("Other", "")];
        let space = AbstractionSpace::new(good, true).unwrap();
        assert_eq!(space.other_index(), Some(1));
    }

    #[test]
    fn with_other_drops_discovered_collision() {
        let classes = vec![TopicClass::new("a", ""), TopicClass::new("Other", "stray")];
        let space = AbstractionSpace::with_other(classes).unwrap();
        assert_eq!(space.len(), 2);
        assert_eq!(space.classes()[1].description, "none of the other topics");
    }

    const SCENES: &str = r#"{
        "scenes": [{
            "id": "field",
            "text": "A stray dog growls at the gate.",
            "choices": [
                {"label": "0", "text": "Back away.", "annotations": {"physical_harm": 0}},
                {"label": "1", "text": "Throw a stone.", "annotations": {"physical_harm": 1}},
                {"label": "2", "text": "Call for help.", "annotations": {"physical_harm": 0}}
            ]
        }]
    }"#;

    #[test]
    fn annotation_scores_are_degenerate() {
        let bundle = Arc::new(SceneBundle::from_json(SCENES).unwrap());
        let provider = AnnotationAbstraction::new(bundle, "physical_harm").unwrap();
        let state = StateRef::choice("field", "A stray dog growls at the gate.", "base");
        let harm = provider.score(&state, &action("1")).unwrap();
        assert!(harm.degenerate);
        assert_eq!(harm.dist.probs(), vec![1.0, 0.0]);
        let no_harm = provider.score(&state, &action("0")).unwrap();
        assert_eq!(no_harm.dist.probs(), vec![0.0, 1.0]);
        // Determinism: repeated calls are bit-identical.
        assert_eq!(provider.score(&state, &action("1")).unwrap(), harm);
        assert!(matches!(
            provider.score(&state, &action("9")),
            Err(AbstractionError::Unscorable(_))
        ));
        assert!(AnnotationAbstraction::new(
            Arc::new(SceneBundle::from_json(SCENES).unwrap()),
            "bravery"
        )
        .is_err());
    }

    #[test]
    fn table_classifier_passthrough() {
        let table = TableClassifier::from_json(
            r#"{
                "classes": [
                    {"label": "a", "description": ""},
                    {"label": "b", "description": ""},
                    {"label": "c", "description": ""}
                ],
                "scores": {"prompt": {"x": [1, 1, 1]}}
            }"#,
        )
        .unwrap();
        let state = StateRef::open_text("prompt", "base", 4);
        let score = table.score(&state, &action("x")).unwrap();
        for p in score.dist.probs() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!(!score.degenerate);
        assert!(matches!(
            table.score(&state, &action("unseen")),
            Err(AbstractionError::Unscorable(_))
        ));
    }

    #[test]
    fn marginal_exact_enumerates() {
        let bundle = Arc::new(SceneBundle::from_json(SCENES).unwrap());
        let abstraction = AnnotationAbstraction::new(bundle, "physical_harm").unwrap();
        let policy = TabularChoicePolicy::from_json(
            r#"{"states": {"field": {"choices": {"0": 0.2, "1": 0.5, "2": 0.3}}}}"#,
        )
        .unwrap();
        let state = StateRef::choice("field", "A stray dog growls at the gate.", "base");
        let labels: Vec<String> = ["0", "1", "2"].iter().map(|s| s.to_string()).collect();
        let marginal = marginal_abstraction(
            &state,
            &labels,
            &policy,
            &abstraction,
            MarginalMode::Exact,
            &mut rng(0),
        )
        .unwrap();
        assert!(marginal.exact);
        let probs = marginal.dist.probs();
        assert!((probs[0] - 0.5).abs() < 1e-12, "harm mass");
        assert!((probs[1] - 0.5).abs() < 1e-12, "no-harm mass");
    }

    #[test]
    fn marginal_exact_worked_example() {
        // P_A = [0.2, 0.5, 0.3] with choice 0 -> harm, 1 and 2 -> no-harm.
        let bundle = Arc::new(
            SceneBundle::from_json(
                r#"{"scenes": [{
                    "id": "s", "text": "t",
                    "choices": [
                        {"label": "0", "text": "a", "annotations": {"physical_harm": 1}},
                        {"label": "1", "text": "b", "annotations": {"physical_harm": 0}},
                        {"label": "2", "text": "c", "annotations": {"physical_harm": 0}}
                    ]
                }]}"#,
            )
            .unwrap(),
        );
        let abstraction = AnnotationAbstraction::new(bundle, "physical_harm").unwrap();
        let policy = TabularChoicePolicy::from_json(
            r#"{"states": {"s": {"choices": {"0": 0.2, "1": 0.5, "2": 0.3}}}}"#,
        )
        .unwrap();
        let state = StateRef::choice("s", "t", "base");
        let labels: Vec<String> = ["0", "1", "2"].iter().map(|s| s.to_string()).collect();
        let marginal = marginal_abstraction(
            &state,
            &labels,
            &policy,
            &abstraction,
            MarginalMode::Exact,
            &mut rng(0),
        )
        .unwrap();
        let probs = marginal.dist.probs();
        assert!((probs[0] - 0.2).abs() < 1e-12);
        assert!((probs[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn marginal_absorbs_to_point_mass() {
        let bundle = Arc::new(
            SceneBundle::from_json(
                r#"{"scenes": [{
                    "id": "s", "text": "t",
                    "choices": [
                        {"label": "0", "text": "a", "annotations": {"deception": 1}},
                        {"label": "1", "text": "b", "annotations": {"deception": 1}}
                    ]
                }]}"#,
            )
            .unwrap(),
        );
        let abstraction = AnnotationAbstraction::new(bundle, "deception").unwrap();
        let policy = TabularChoicePolicy::from_json(
            r#"{"states": {"s": {"choices": {"0": 0.4, "1": 0.6}}}}"#,
        )
        .unwrap();
        let state = StateRef::choice("s", "t", "base");
        let labels: Vec<String> = ["0", "1"].iter().map(|s| s.to_string()).collect();
        let marginal = marginal_abstraction(
            &state,
            &labels,
            &policy,
            &abstraction,
            MarginalMode::Exact,
            &mut rng(0),
        )
        .unwrap();
        assert_eq!(marginal.dist.probs(), vec![1.0, 0.0]);
    }

    #[test]
    fn marginal_exact_rejects_open_text() {
        let table = TableClassifier::from_json(
            r#"{"classes": [{"label": "a", "description": ""}], "scores": {}}"#,
        )
        .unwrap();
        let policy = TabularTextPolicy::from_json(r#"{"states": {}}"#).unwrap();
        let state = StateRef::open_text("p", "base", 4);
        assert!(matches!(
            marginal_abstraction(&state, &[], &policy, &table, MarginalMode::Exact, &mut rng(0)),
            Err(AbstractionError::ExactModeUnavailable)
        ));
    }

    #[test]
    fn marginal_monte_carlo_converges_to_enumeration() {
        let policy = TabularTextPolicy::from_json(
            r#"{"states": {"the door": {"next": {
                "opens": {"p": 0.7, "next": {"slowly": {"p": 1.0}}},
                "stays": {"p": 0.3, "next": {"shut": {"p": 1.0}}}
            }}}}"#,
        )
        .unwrap();
        let table = TableClassifier::from_json(
            r#"{
                "classes": [
                    {"label": "open", "description": ""},
                    {"label": "closed", "description": ""}
                ],
                "scores": {"the door": {
                    "opens slowly": [1, 0],
                    "stays shut": [0, 1]
                }}
            }"#,
        )
        .unwrap();
        let state = StateRef::open_text("the door", "base", 8);
        let marginal = marginal_abstraction(
            &state,
            &[],
            &policy,
            &table,
            MarginalMode::MonteCarlo { n: 10_000 },
            &mut rng(11),
        )
        .unwrap();
        assert!(!marginal.exact);
        assert_eq!(marginal.n_samples, 10_000);
        let p_open = marginal.dist.probs()[0];
        let se = marginal.standard_error[0].max(1e-6);
        assert!(
            (p_open - 0.7).abs() <= 3.0 * se,
            "estimate {p_open} further than 3 SE ({se}) from 0.7"
        );
    }

    #[test]
    fn discovery_parses_and_appends_other() {
        let llm = MockLlm::new();
        llm.push_completion(r#"[("Sports", "athletic activities"), ("Food", "meals and cooking")]"#);
        let samples = vec!["a".to_string(), "b".to_string()];
        let space = discover_topics(&samples, &llm, &DiscoveryConfig::default()).unwrap();
        assert_eq!(space.len(), 3);
        assert_eq!(space.labels(), vec!["Sports", "Food", "Other"]);
        assert!(space.includes_other());
    }

    #[test]
    fn discovery_deduplicates_titles_in_order() {
        let llm = MockLlm::new();
        llm.push_completion(r#"[("B", "1"), ("A", "2"), ("B", "3")]"#);
        let space =
            discover_topics(&["x".to_string()], &llm, &DiscoveryConfig::default()).unwrap();
        assert_eq!(space.labels(), vec!["B", "A", "Other"]);
        assert_eq!(space.classes()[0].description, "1");
    }

    #[test]
    fn discovery_reprompts_then_succeeds() {
        let llm = MockLlm::new();
        llm.push_completion("I think the topics are sports and food.");
        llm.push_completion("```python\n[(\"Sports\", \"games\")]\n```");
        let space =
            discover_topics(&["x".to_string()], &llm, &DiscoveryConfig::default()).unwrap();
        assert_eq!(space.labels(), vec!["Sports", "Other"]);
    }

    #[test]
    fn discovery_fails_after_bounded_reprompts() {
        let llm = MockLlm::new();
        for _ in 0..4 {
            llm.push_completion("still not a list");
        }
        let err =
            discover_topics(&["x".to_string()], &llm, &DiscoveryConfig::default()).unwrap_err();
        match err {
            AbstractionError::ParseFailure { attempts, .. } => assert_eq!(attempts, 4),
            other => panic!("expected ParseFailure, got {other:?}"),
        }
    }

    #[test]
    fn discovery_empty_list_is_its_own_error() {
        let llm = MockLlm::new();
        for _ in 0..4 {
            llm.push_completion("[]");
        }
        assert!(matches!(
            discover_topics(&["x".to_string()], &llm, &DiscoveryConfig::default()),
            Err(AbstractionError::EmptyTopicList)
        ));
    }

    #[test]
    fn tuple_parser_variants() {
        assert_eq!(
            parse_tuple_list(r#"[("A", "x"), ('B', 'y')]"#).unwrap(),
            vec![("A".into(), "x".into()), ("B".into(), "y".into())]
        );
        assert_eq!(
            parse_tuple_list("Here you go:\n[(\"A\", \"x\")]").unwrap(),
            vec![("A".into(), "x".into())]
        );
        assert_eq!(
            parse_tuple_list("```python\n[(\"A\", \"it said \\\"hi\\\"\")]\n```").unwrap(),
            vec![("A".into(), "it said \"hi\"".into())]
        );
        assert_eq!(
            parse_tuple_list("[(\"A\", \"x\"), (\"B\", \"y\"),]").unwrap().len(),
            2
        );
        assert!(parse_tuple_list("no list here").is_err());
        assert!(parse_tuple_list("[(\"A\",)]").is_err());
        assert!(parse_tuple_list("[(\"A\" \"x\")]").is_err());
    }

    fn discovered_space() -> Arc<AbstractionSpace> {
        Arc::new(
            AbstractionSpace::with_other(vec![
                TopicClass::new("Sports", "games"),
                TopicClass::new("Food", "meals"),
            ])
            .unwrap(),
        )
    }

    #[test]
    fn assignment_filters_and_renormalizes() {
        let space = discovered_space();
        let llm = MockLlm::new();
        llm.push_logprobs(&[
            ("0", 0.6_f64.ln()),
            ("1", 0.3_f64.ln()),
            ("banana", 0.1_f64.ln()),
        ]);
        let score = assign_topic("sample", &space, &llm).unwrap();
        let probs = score.dist.probs();
        assert!((probs[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((probs[1] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(probs[2], 0.0);
        assert!(!score.fallback);
    }

    #[test]
    fn assignment_renormalization_ignores_zero_mass_invalid_tokens() {
        let space = discovered_space();
        let llm = MockLlm::new();
        llm.push_logprobs(&[("0", 0.6_f64.ln()), ("1", 0.3_f64.ln())]);
        llm.push_logprobs(&[
            ("0", 0.6_f64.ln()),
            ("1", 0.3_f64.ln()),
            ("banana", -4000.0),
        ]);
        let clean = assign_topic("s", &space, &llm).unwrap();
        let with_noise = assign_topic("s", &space, &llm).unwrap();
        for (a, b) in clean.dist.probs().iter().zip(with_noise.dist.probs()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn assignment_accepts_whitespace_padded_indices() {
        let space = discovered_space();
        let llm = MockLlm::new();
        llm.push_logprobs(&[(" 1", 0.9_f64.ln()), ("nope", 0.1_f64.ln())]);
        let score = assign_topic("s", &space, &llm).unwrap();
        assert_eq!(score.dist.probs()[1], 1.0);
        assert!(score.degenerate);
    }

    #[test]
    fn assignment_out_of_range_index_is_invalid() {
        let space = discovered_space();
        let llm = MockLlm::new();
        llm.push_logprobs(&[("7", 0.9_f64.ln()), ("0", 0.1_f64.ln())]);
        let score = assign_topic("s", &space, &llm).unwrap();
        assert_eq!(score.dist.probs()[0], 1.0);
    }

    #[test]
    fn assignment_all_invalid_falls_back_to_other() {
        let space = discovered_space();
        let llm = MockLlm::new();
        llm.push_logprobs(&[("banana", -0.1), ("apple", -3.0)]);
        let score = assign_topic("s", &space, &llm).unwrap();
        assert!(score.fallback);
        assert!(score.degenerate);
        assert_eq!(score.dist.probs()[2], 1.0);
    }

    #[test]
    fn assignment_prompt_renders_topics_and_sample() {
        let space = discovered_space();
        let prompt = render_assignment_prompt("the match", &space);
        assert!(prompt.contains("0. Sports: games"));
        assert!(prompt.contains("1. Food: meals"));
        assert!(prompt.contains("2. Other: none of the other topics"));
        assert!(prompt.contains("String to be classified: the match"));
        assert!(prompt.ends_with("topic ID:"));
        assert!(!prompt.contains("<formatted"));
    }

    #[test]
    fn discovery_prompt_quotes_samples() {
        let prompt = render_discovery_prompt(&["a b".to_string(), "c \"d\"".to_string()]);
        assert!(prompt.contains("\"a b\"\n\"c \\\"d\\\"\""));
        assert!(!prompt.contains("<formatted"));
    }

    #[test]
    fn dependency_flags_independence() {
        let space = harm_space();
        let score = AbstractionScore::point_mass(Arc::clone(&space), 0).unwrap();
        let pairs: Vec<_> = (0..4)
            .map(|i| {
                (
                    StateRef::open_text(&format!("p{i}"), "base", 4),
                    action(&format!("a{i}")),
                    score.clone(),
                )
            })
            .collect();
        let report = diagnose_dependency(&pairs, DEFAULT_MI_THRESHOLD).unwrap();
        assert_eq!(report.mutual_information, 0.0);
        assert!(report.low_dependency);
        assert!(report.too_coarse);
    }

    #[test]
    fn dependency_perfect_keying_gives_log_n() {
        let space = Arc::new(
            AbstractionSpace::new(
                (0..4)
                    .map(|i| TopicClass::new(&format!("c{i}"), ""))
                    .collect(),
                false,
            )
            .unwrap(),
        );
        let pairs: Vec<_> = (0..4)
            .map(|i| {
                (
                    StateRef::open_text(&format!("p{i}"), "base", 4),
                    action(&format!("a{i}")),
                    AbstractionScore::point_mass(Arc::clone(&space), i).unwrap(),
                )
            })
            .collect();
        let report = diagnose_dependency(&pairs, DEFAULT_MI_THRESHOLD).unwrap();
        assert!((report.mutual_information - 4.0_f64.ln()).abs() < 1e-12);
        assert!(!report.low_dependency);
        assert!(!report.too_coarse);
        assert!(report.too_fine, "4 classes on 4 observations");
    }

    #[test]
    fn dependency_requires_two_distinct_pairs() {
        let space = harm_space();
        let score = AbstractionScore::point_mass(Arc::clone(&space), 0).unwrap();
        let state = StateRef::open_text("p", "base", 4);
        let pairs = vec![
            (state.clone(), action("a"), score.clone()),
            (state.clone(), action("a"), score.clone()),
        ];
        assert!(diagnose_dependency(&pairs, DEFAULT_MI_THRESHOLD).is_err());
        assert!(diagnose_dependency(&pairs[..1], DEFAULT_MI_THRESHOLD).is_err());
    }

    #[test]
    fn score_record_then_replay_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.jsonl");
        let bundle = Arc::new(SceneBundle::from_json(SCENES).unwrap());
        let state = StateRef::choice("field", "A stray dog growls at the gate.", "base");

        let live;
        let tag;
        let space;
        {
            let inner = AnnotationAbstraction::new(bundle, "physical_harm").unwrap();
            tag = inner.tag();
            space = Arc::clone(inner.space());
            let recording = RecordingAbstraction::new(
                inner,
                Arc::new(RecordStore::open(&path).unwrap()),
            );
            live = recording.score(&state, &action("1")).unwrap();
        }

        let replay = ReplayAbstraction::new(
            Arc::new(ReplayStore::load(&path).unwrap()),
            space,
            &tag,
        );
        assert_eq!(replay.score(&state, &action("1")).unwrap(), live);
        assert!(matches!(
            replay.score(&state, &action("0")),
            Err(AbstractionError::Replay(_))
        ));
    }

    #[test]
    fn llm_record_then_replay_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("llm.jsonl");
        let mock = MockLlm::new();
        mock.push_completion(r#"[("T", "d")]"#);
        mock.push_logprobs(&[("0", -0.1)]);
        {
            let recording = RecordingLlm::new(mock, Arc::new(RecordStore::open(&path).unwrap()));
            recording.complete("discover", 64).unwrap();
            recording.top_token_logprobs("assign").unwrap();
        }
        let replay = ReplayLlm::new(Arc::new(ReplayStore::load(&path).unwrap()));
        assert_eq!(replay.complete("discover", 64).unwrap(), r#"[("T", "d")]"#);
        assert_eq!(
            replay.top_token_logprobs("assign").unwrap()["0"],
            -0.1
        );
        assert!(replay.complete("never asked", 64).is_err());
    }

    #[test]
    fn recorded_discovery_session_reproduces_space() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("discovery.jsonl");
        let samples: Vec<String> = (0..20).map(|i| format!("continuation {i}")).collect();
        let first;
        {
            let mock = MockLlm::new();
            mock.push_completion(r#"[("Careers", "jobs and work"), ("Family", "home life")]"#);
            let recording = RecordingLlm::new(mock, Arc::new(RecordStore::open(&path).unwrap()));
            first = discover_topics(&samples, &recording, &DiscoveryConfig::default()).unwrap();
        }
        let replay = ReplayLlm::new(Arc::new(ReplayStore::load(&path).unwrap()));
        let second = discover_topics(&samples, &replay, &DiscoveryConfig::default()).unwrap();
        assert_eq!(first, second);
        assert_eq!(
            serde_json::to_string(&first).unwrap(),
            serde_json::to_string(&second).unwrap()
        );
    }

    #[test]
    fn http_classifier_scores() {
        let server = CannedServer::spawn(vec![(
            200,
            r#"{"class_probs": [0.25, 0.75]}"#.to_string(),
        )]);
        let classifier = HttpClassifier::new(harm_space(), {
            let mut c = HttpClassifierConfig::new(&server.base_url);
            c.max_retries = 0;
            c
        });
        let state = StateRef::open_text("prompt text", "base", 4);
        let score = classifier.score(&state, &action("an action")).unwrap();
        assert!((score.dist.probs()[1] - 0.75).abs() < 1e-12);
        let requests = server.request_jsons();
        assert_eq!(requests[0]["state_text"], "prompt text");
        assert_eq!(requests[0]["action_text"], "an action");
    }

    #[test]
    fn http_classifier_rejects_wrong_arity() {
        let server = CannedServer::spawn(vec![(200, r#"{"class_probs": [1.0]}"#.to_string())]);
        let classifier = HttpClassifier::new(harm_space(), {
            let mut c = HttpClassifierConfig::new(&server.base_url);
            c.max_retries = 0;
            c
        });
        let state = StateRef::open_text("p", "base", 4);
        assert!(matches!(
            classifier.score(&state, &action("a")),
            Err(AbstractionError::Malformed(_))
        ));
    }

    #[test]
    fn http_llm_complete_and_logprobs() {
        let completion = r#"{"choices": [{"text": "[(\"T\", \"d\")]"}]}"#;
        let logprobs = r#"{"choices": [{"logprobs": {"top_logprobs": [{"0": -0.2, "1": -1.8}]}}]}"#;
        let server = CannedServer::spawn(vec![
            (200, completion.to_string()),
            (200, logprobs.to_string()),
        ]);
        let llm = HttpLlm::new({
            let mut c = HttpLlmConfig::new(&server.base_url, "gpt-test");
            c.max_retries = 0;
            c
        });
        assert_eq!(llm.complete("p", 64).unwrap(), r#"[("T", "d")]"#);
        let map = llm.top_token_logprobs("q").unwrap();
        assert_eq!(map.len(), 2);
        let requests = server.request_jsons();
        assert_eq!(requests[0]["model"], "gpt-test");
        assert_eq!(requests[0]["max_tokens"], 64);
        assert_eq!(requests[1]["logprobs"], 20);
        assert_eq!(requests[1]["max_tokens"], 1);
    }
}
