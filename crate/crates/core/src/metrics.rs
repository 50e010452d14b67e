//! Evaluation metrics over counterfactual results: abstraction change rate,
//! counterfactual probability increase rate, semantic tightness of sampled
//! continuations, paired comparison statistics, and the pronoun-distribution
//! breakdown for gender-swap experiments.
//!
//! Every function here is pure over immutable records; randomness and
//! provider access stay in the engine and CLI layers.

use crate::dist::{Categorical, DistError};
use crate::httpclient::{self, HttpCallError};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty input: {0}")]
    Empty(String),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("score spaces disagree: expected {expected:?}, got {got:?}")]
    SpaceMismatch { expected: Vec<String>, got: Vec<String> },
    #[error("observed class {label:?} is not in the score space")]
    UnknownClass { label: String },
    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("authentication rejected: {0}")]
    Auth(String),
    #[error("endpoint returned status {status}: {body}")]
    Api { status: u16, body: String },
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error(transparent)]
    Dist(#[from] DistError),
}

impl From<HttpCallError> for MetricsError {
    fn from(e: HttpCallError) -> Self {
        match e {
            HttpCallError::Transport(msg) => MetricsError::Transport(msg),
            HttpCallError::Auth(msg) => MetricsError::Auth(msg),
            HttpCallError::Api { status, body } => MetricsError::Api { status, body },
            HttpCallError::Malformed(msg) => MetricsError::Malformed(msg),
        }
    }
}

// ---------------------------------------------------------------------------
// Evaluation records
// ---------------------------------------------------------------------------

/// One evaluated query: abstraction scores of the counterfactual and
/// interventional samples, plus the sampled texts for semantic tightness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub query_id: String,
    /// Method tag, `"acf"` or `"tlcf"`.
    pub method: String,
    pub observed_class: String,
    /// P_Y(· | a'_i, s') for each counterfactual sample.
    pub counterfactual_scores: Vec<Categorical>,
    /// P_Y(· | a_i, s') for each interventional sample.
    pub interventional_scores: Vec<Categorical>,
    pub counterfactual_texts: Vec<String>,
    pub seed: u64,
}

impl EvalRecord {
    /// Check the record invariants: non-empty score lists sharing one label
    /// set that contains the observed class.
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.counterfactual_scores.is_empty() {
            return Err(MetricsError::Empty(format!(
                "record {:?} has no counterfactual scores",
                self.query_id
            )));
        }
        if self.interventional_scores.is_empty() {
            return Err(MetricsError::Empty(format!(
                "record {:?} has no interventional scores",
                self.query_id
            )));
        }
        let labels = self.counterfactual_scores[0].labels();
        for score in self
            .counterfactual_scores
            .iter()
            .chain(&self.interventional_scores)
        {
            if score.labels() != labels {
                return Err(MetricsError::SpaceMismatch {
                    expected: labels.to_vec(),
                    got: score.labels().to_vec(),
                });
            }
        }
        if !labels.contains(&self.observed_class) {
            return Err(MetricsError::UnknownClass {
                label: self.observed_class.clone(),
            });
        }
        Ok(())
    }

    fn observed_index(&self) -> usize {
        self.counterfactual_scores[0]
            .index_of(&self.observed_class)
            .expect("validated above")
    }
}

/// Coordinate-wise mean of probability vectors.
fn mean_probs(scores: &[Categorical]) -> Vec<f64> {
    let n = scores.len() as f64;
    let mut mean = vec![0.0; scores[0].len()];
    for score in scores {
        for (total, p) in mean.iter_mut().zip(score.probs()) {
            *total += p / n;
        }
    }
    mean
}

/// Whether the record's averaged counterfactual scores peak away from the
/// observed class (ties broken by lowest class index).
pub fn acr_flag(record: &EvalRecord) -> Result<bool, MetricsError> {
    record.validate()?;
    let mean = mean_probs(&record.counterfactual_scores);
    let averaged = Categorical::from_probs(
        record.counterfactual_scores[0].labels().to_vec(),
        mean,
    )?;
    Ok(averaged.argmax() != record.observed_index())
}

/// Abstraction change rate: the fraction of records whose averaged
/// counterfactual abstraction argmax differs from the observed class.
pub fn acr(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty("acr over zero records".into()));
    }
    let mut changed = 0usize;
    for record in records {
        if acr_flag(record)? {
            changed += 1;
        }
    }
    Ok(changed as f64 / records.len() as f64)
}

/// Whether the record's counterfactual mean probability of the observed class
/// strictly exceeds the interventional mean.
pub fn cpir_flag(record: &EvalRecord) -> Result<bool, MetricsError> {
    record.validate()?;
    let index = record.observed_index();
    let cf = mean_probs(&record.counterfactual_scores)[index];
    let interventional = mean_probs(&record.interventional_scores)[index];
    Ok(cf > interventional)
}

/// Counterfactual probability increase rate: the fraction of records where
/// the observed class got strictly more probable than under intervention
/// alone.
pub fn cpir(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty("cpir over zero records".into()));
    }
    let mut increased = 0usize;
    for record in records {
        if cpir_flag(record)? {
            increased += 1;
        }
    }
    Ok(increased as f64 / records.len() as f64)
}

// ---------------------------------------------------------------------------
// Embeddings and semantic tightness
// ---------------------------------------------------------------------------

/// A semantic embedding model. Outputs are unit-normalized except for the
/// all-zero vector, which downstream cosines reject.
pub trait EmbeddingProvider: Send + Sync {
    fn tag(&self) -> String;
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, MetricsError>;
}

pub const DEFAULT_EMBEDDING_DIM: usize = 256;

/// Offline, seed-free embedder: a hashed bag of byte trigrams over
/// whitespace tokens (each padded as `^^token$`), signed by one hash bit and
/// unit-normalized. Pure and fully reproducible, so semantic-tightness tests
/// run without an embeddings endpoint; texts sharing more trigrams land
/// closer in cosine.
#[derive(Debug, Clone)]
pub struct DeterministicLocalEmbedder {
    dimension: usize,
}

impl Default for DeterministicLocalEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_EMBEDDING_DIM)
    }
}

impl DeterministicLocalEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension >= 1, "embedding dimension must be at least 1");
        Self { dimension }
    }
}

fn fnv1a_64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &byte in bytes {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

impl EmbeddingProvider for DeterministicLocalEmbedder {
    fn tag(&self) -> String {
        "deterministic-local".into()
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, MetricsError> {
        let mut vector = vec![0.0; self.dimension];
        for token in text.split_whitespace() {
            let padded = format!("^^{}$", token.to_lowercase());
            for trigram in padded.as_bytes().windows(3) {
                let hash = fnv1a_64(trigram);
                let sign = if hash & (1 << 63) != 0 { -1.0 } else { 1.0 };
                let index = ((hash >> 1) % self.dimension as u64) as usize;
                vector[index] += sign;
            }
        }
        let norm = vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in &mut vector {
                *x /= norm;
            }
        }
        Ok(vector)
    }
}

/// Cosine similarity, rejecting zero vectors and clamping rounding overshoot
/// into [-1, 1].
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let norm_a = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let norm_b = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm_a == 0.0 || norm_b == 0.0 {
        return Err(MetricsError::DegenerateEmbedding(
            "cosine of a zero vector".into(),
        ));
    }
    Ok((dot / (norm_a * norm_b)).clamp(-1.0, 1.0))
}

/// Semantic tightness: the mean cosine similarity over all ordered pairs of
/// embedded texts, diagonal included — `(1/n²) Σ_i Σ_j cos(λ(a_i), λ(a_j))`.
pub fn semantic_tightness(
    texts: &[String],
    embedder: &dyn EmbeddingProvider,
) -> Result<f64, MetricsError> {
    semantic_tightness_with(texts, embedder, true)
}

/// Semantic tightness with the diagonal made optional. Excluding it averages
/// over the `n·(n−1)` ordered pairs with `i ≠ j`, which shifts the score by a
/// fixed affine transform and needs at least two texts.
pub fn semantic_tightness_with(
    texts: &[String],
    embedder: &dyn EmbeddingProvider,
    include_diagonal: bool,
) -> Result<f64, MetricsError> {
    if texts.is_empty() {
        return Err(MetricsError::Empty("semantic tightness of no texts".into()));
    }
    if !include_diagonal && texts.len() < 2 {
        return Err(MetricsError::Empty(
            "off-diagonal semantic tightness needs at least two texts".into(),
        ));
    }
    let embeddings: Vec<Vec<f64>> = texts
        .iter()
        .map(|t| embedder.embed(t))
        .collect::<Result<_, _>>()?;
    let n = embeddings.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if !include_diagonal && i == j {
                continue;
            }
            total += cosine_similarity(&embeddings[i], &embeddings[j])?;
        }
    }
    let pairs = if include_diagonal {
        n * n
    } else {
        n * (n - 1)
    };
    Ok(total / pairs as f64)
}

// ---------------------------------------------------------------------------
// Paired comparison
// ---------------------------------------------------------------------------

/// Paired ACF-vs-TLCF comparison: win rate plus the paired t test over the
/// per-query differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub n: usize,
    /// Fraction of pairs where the first series strictly exceeds the second.
    pub win_rate: f64,
    pub mean_difference: f64,
    /// `mean(diff) / (sd(diff) / √n)`; `None` when undefined.
    pub t_statistic: Option<f64>,
    /// Two-sided p-value from the t distribution with `n − 1` degrees of
    /// freedom; `None` whenever the statistic is.
    pub p_value: Option<f64>,
    /// The differences had zero variance (or a single pair), leaving the
    /// statistic undefined.
    pub degenerate: bool,
}

/// Compare paired semantic-tightness series. The t statistic needs at least
/// two pairs and non-zero variance of the differences; otherwise it is
/// reported as undefined rather than fabricated.
pub fn paired_comparison(
    st_first: &[f64],
    st_second: &[f64],
) -> Result<PairedComparison, MetricsError> {
    if st_first.len() != st_second.len() {
        return Err(MetricsError::LengthMismatch {
            expected: st_first.len(),
            got: st_second.len(),
        });
    }
    if st_first.is_empty() {
        return Err(MetricsError::Empty("paired comparison of no pairs".into()));
    }
    let n = st_first.len();
    let diffs: Vec<f64> = st_first
        .iter()
        .zip(st_second)
        .map(|(a, b)| a - b)
        .collect();
    let wins = diffs.iter().filter(|d| **d > 0.0).count();
    let win_rate = wins as f64 / n as f64;
    let mean = diffs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return Ok(PairedComparison {
            n,
            win_rate,
            mean_difference: mean,
            t_statistic: None,
            p_value: None,
            degenerate: true,
        });
    }
    let variance = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let sd = variance.sqrt();
    if sd == 0.0 {
        return Ok(PairedComparison {
            n,
            win_rate,
            mean_difference: mean,
            t_statistic: None,
            p_value: None,
            degenerate: true,
        });
    }
    let t = mean / (sd / (n as f64).sqrt());
    let students = StudentsT::new(0.0, 1.0, n as f64 - 1.0)
        .expect("n >= 2 gives positive degrees of freedom");
    let p = 2.0 * (1.0 - students.cdf(t.abs()));
    Ok(PairedComparison {
        n,
        win_rate,
        mean_difference: mean,
        t_statistic: Some(t),
        p_value: Some(p),
        degenerate: false,
    })
}

// ---------------------------------------------------------------------------
// Pronoun distribution
// ---------------------------------------------------------------------------

const MALE_PRONOUNS: [&str; 4] = ["he", "him", "his", "himself"];
const FEMALE_PRONOUNS: [&str; 4] = ["she", "her", "hers", "herself"];

/// Exclusive pronoun-usage category of one text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PronounUse {
    OnlyMale,
    OnlyFemale,
    Mixed,
    NoPronouns,
}

/// Classify a text by case-insensitive word-boundary matches against the
/// gendered pronoun lexicons.
pub fn classify_pronouns(text: &str) -> PronounUse {
    let mut male = false;
    let mut female = false;
    for word in text.split(|c: char| !c.is_alphabetic()) {
        if word.is_empty() {
            continue;
        }
        let lower = word.to_lowercase();
        male |= MALE_PRONOUNS.contains(&lower.as_str());
        female |= FEMALE_PRONOUNS.contains(&lower.as_str());
    }
    match (male, female) {
        (true, true) => PronounUse::Mixed,
        (true, false) => PronounUse::OnlyMale,
        (false, true) => PronounUse::OnlyFemale,
        (false, false) => PronounUse::NoPronouns,
    }
}

/// Rates over the four exclusive pronoun categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PronounDistribution {
    pub n: usize,
    pub only_male: f64,
    pub only_female: f64,
    pub mixed: f64,
    pub no_pronouns: f64,
}

/// The pronoun breakdown of a sample set. Every text lands in exactly one
/// category; the rates sum to 1 (or all-zero for empty input).
pub fn pronoun_distribution(texts: &[String]) -> PronounDistribution {
    let mut counts = [0usize; 4];
    for text in texts {
        let index = match classify_pronouns(text) {
            PronounUse::OnlyMale => 0,
            PronounUse::OnlyFemale => 1,
            PronounUse::Mixed => 2,
            PronounUse::NoPronouns => 3,
        };
        counts[index] += 1;
    }
    let n = texts.len();
    let rate = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    PronounDistribution {
        n,
        only_male: rate(counts[0]),
        only_female: rate(counts[1]),
        mixed: rate(counts[2]),
        no_pronouns: rate(counts[3]),
    }
}

// ---------------------------------------------------------------------------
// Remote embeddings endpoint
// ---------------------------------------------------------------------------

/// Connection settings for [`HttpEmbedder`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpEmbedderConfig {
    pub base_url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key: Option<String>,
    pub model: String,
    #[serde(default = "default_embeddings_path")]
    pub path: String,
    pub dimension: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: usize,
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
}

fn default_embeddings_path() -> String {
    "/v1/embeddings".into()
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

impl HttpEmbedderConfig {
    pub fn new(base_url: &str, model: &str, dimension: usize) -> Self {
        Self {
            base_url: base_url.to_string(),
            api_key: None,
            model: model.to_string(),
            path: default_embeddings_path(),
            dimension,
            timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            backoff_base_ms: default_backoff_ms(),
        }
    }
}

/// OpenAI-compatible embeddings endpoint: POST `{model, input}`, response
/// `{"data": [{"embedding": [...]}]}`. Vectors are unit-normalized on
/// receipt.
pub struct HttpEmbedder {
    config: HttpEmbedderConfig,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    pub fn new(config: HttpEmbedderConfig) -> Self {
        let agent = httpclient::build_agent(config.timeout_secs);
        Self { config, agent }
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn tag(&self) -> String {
        format!("http-embeddings:{}", self.config.base_url)
    }

    fn dimension(&self) -> usize {
        self.config.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, MetricsError> {
        let url = format!(
            "{}{}",
            self.config.base_url.trim_end_matches('/'),
            self.config.path
        );
        let body = json!({"model": self.config.model, "input": text});
        let response = httpclient::post_json(
            &self.agent,
            &url,
            self.config.api_key.as_deref(),
            &body,
            self.config.max_retries,
            self.config.backoff_base_ms,
        )?;
        let mut vector: Vec<f64> = response
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .map(|xs| xs.iter().filter_map(Value::as_f64).collect())
            .ok_or_else(|| MetricsError::Malformed("missing data[0].embedding".into()))?;
        if vector.len() != self.config.dimension {
            return Err(MetricsError::Malformed(format!(
                "embedding has {} dimensions, expected {}",
                vector.len(),
                self.config.dimension
            )));
        }
        let norm = vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in &mut vector {
                *x /= norm;
            }
        }
        Ok(vector)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testhttp::CannedServer;
    use std::collections::HashMap;

    fn score(labels: &[&str], probs: &[f64]) -> Categorical {
        Categorical::from_probs(
            labels.iter().map(|s| s.to_string()).collect(),
            probs.to_vec(),
        )
        .unwrap()
    }

    fn record(
        id: &str,
        observed: &str,
        cf: Vec<Categorical>,
        interventional: Vec<Categorical>,
    ) -> EvalRecord {
        EvalRecord {
            query_id: id.into(),
            method: "acf".into(),
            observed_class: observed.into(),
            counterfactual_scores: cf,
            interventional_scores: interventional,
            counterfactual_texts: vec!["sample".into()],
            seed: 0,
        }
    }

    const HARM: [&str; 2] = ["harm", "no_harm"];

    #[test]
    fn record_validation_catches_bad_inputs() {
        let good = record(
            "q",
            "harm",
            vec![score(&HARM, &[0.6, 0.4])],
            vec![score(&HARM, &[0.5, 0.5])],
        );
        assert!(good.validate().is_ok());

        let mut empty = good.clone();
        empty.counterfactual_scores.clear();
        assert!(matches!(empty.validate(), Err(MetricsError::Empty(_))));

        let mut mismatched = good.clone();
        mismatched
            .interventional_scores
            .push(score(&["a", "b"], &[0.5, 0.5]));
        assert!(matches!(
            mismatched.validate(),
            Err(MetricsError::SpaceMismatch { .. })
        ));

        let mut unknown = good;
        unknown.observed_class = "bravery".into();
        assert!(matches!(
            unknown.validate(),
            Err(MetricsError::UnknownClass { .. })
        ));
    }

    #[test]
    fn acr_counts_argmax_changes() {
        // Averaged scores peak at the observed class -> no change.
        let stay = record(
            "stay",
            "harm",
            vec![score(&HARM, &[0.9, 0.1]), score(&HARM, &[0.7, 0.3])],
            vec![score(&HARM, &[0.5, 0.5])],
        );
        assert!(!acr_flag(&stay).unwrap());

        // Mean [0.3, 0.7] peaks away from "harm".
        let change = record(
            "change",
            "harm",
            vec![score(&HARM, &[0.2, 0.8]), score(&HARM, &[0.4, 0.6])],
            vec![score(&HARM, &[0.5, 0.5])],
        );
        assert!(acr_flag(&change).unwrap());

        // 10 records, 3 changed -> 0.3.
        let mut records = vec![stay; 7];
        records.extend(vec![change; 3]);
        assert!((acr(&records).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(acr(&records[..7]).unwrap(), 0.0);
        assert!(matches!(acr(&[]), Err(MetricsError::Empty(_))));
    }

    #[test]
    fn acr_ties_break_to_the_lowest_index() {
        // A 50/50 mean peaks at index 0 under lowest-index tie-breaking, so
        // observing class 1 counts as a change and class 0 does not.
        let tied = |obs: &str| {
            record(
                "tie",
                obs,
                vec![score(&HARM, &[0.5, 0.5])],
                vec![score(&HARM, &[0.5, 0.5])],
            )
        };
        assert!(!acr_flag(&tied("harm")).unwrap());
        assert!(acr_flag(&tied("no_harm")).unwrap());
    }

    #[test]
    fn cpir_requires_strict_increase() {
        let up = record(
            "up",
            "harm",
            vec![score(&HARM, &[0.9, 0.1])],
            vec![score(&HARM, &[0.4, 0.6])],
        );
        assert!(cpir_flag(&up).unwrap());

        let equal = record(
            "equal",
            "harm",
            vec![score(&HARM, &[0.4, 0.6])],
            vec![score(&HARM, &[0.4, 0.6])],
        );
        assert!(!cpir_flag(&equal).unwrap());

        let records = vec![up, equal];
        assert!((cpir(&records).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(cpir(&[]), Err(MetricsError::Empty(_))));
    }

    /// Test embedder with hand-picked vectors per text.
    struct FixedEmbedder {
        vectors: HashMap<String, Vec<f64>>,
    }

    impl FixedEmbedder {
        fn new(entries: &[(&str, Vec<f64>)]) -> Self {
            Self {
                vectors: entries
                    .iter()
                    .map(|(k, v)| (k.to_string(), v.clone()))
                    .collect(),
            }
        }
    }

    impl EmbeddingProvider for FixedEmbedder {
        fn tag(&self) -> String {
            "fixed".into()
        }

        fn dimension(&self) -> usize {
            4
        }

        fn embed(&self, text: &str) -> Result<Vec<f64>, MetricsError> {
            Ok(self.vectors[text].clone())
        }
    }

    #[test]
    fn semantic_tightness_of_identical_texts_is_one() {
        let embedder = DeterministicLocalEmbedder::default();
        let texts: Vec<String> = vec!["the gate stays shut".into(); 5];
        let st = semantic_tightness(&texts, &embedder).unwrap();
        assert!((st - 1.0).abs() < 1e-12);
    }

    #[test]
    fn semantic_tightness_orthogonal_pair_is_half() {
        let embedder = FixedEmbedder::new(&[
            ("a", vec![1.0, 0.0, 0.0, 0.0]),
            ("b", vec![0.0, 1.0, 0.0, 0.0]),
        ]);
        let texts: Vec<String> = vec!["a".into(), "b".into()];
        // (1 + 0 + 0 + 1) / 4.
        let st = semantic_tightness(&texts, &embedder).unwrap();
        assert!((st - 0.5).abs() < 1e-15);
    }

    #[test]
    fn semantic_tightness_pairwise_half_matches_formula() {
        // Three unit vectors sharing one coordinate: pairwise cosine 0.5, so
        // the diagonal-included mean is (3·1 + 6·0.5) / 9 = 2/3 and the
        // off-diagonal variant gives exactly 0.5.
        let s = 0.5f64.sqrt();
        let embedder = FixedEmbedder::new(&[
            ("a", vec![s, s, 0.0, 0.0]),
            ("b", vec![s, 0.0, s, 0.0]),
            ("c", vec![s, 0.0, 0.0, s]),
        ]);
        let texts: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let with_diag = semantic_tightness(&texts, &embedder).unwrap();
        assert!((with_diag - 2.0 / 3.0).abs() < 1e-12, "got {with_diag}");
        let off_diag = semantic_tightness_with(&texts, &embedder, false).unwrap();
        assert!((off_diag - 0.5).abs() < 1e-12, "got {off_diag}");

        // Permutation invariance.
        let shuffled: Vec<String> = vec!["c".into(), "a".into(), "b".into()];
        let st2 = semantic_tightness(&shuffled, &embedder).unwrap();
        assert!((with_diag - st2).abs() < 1e-15);
    }

    #[test]
    fn semantic_tightness_rejects_degenerate_input() {
        let embedder = DeterministicLocalEmbedder::default();
        assert!(matches!(
            semantic_tightness(&[], &embedder),
            Err(MetricsError::Empty(_))
        ));
        // Whitespace-only text embeds to the zero vector.
        let texts: Vec<String> = vec!["   ".into(), "words".into()];
        assert!(matches!(
            semantic_tightness(&texts, &embedder),
            Err(MetricsError::DegenerateEmbedding(_))
        ));
        let one: Vec<String> = vec!["alone".into()];
        assert!(matches!(
            semantic_tightness_with(&one, &embedder, false),
            Err(MetricsError::Empty(_))
        ));
        assert!((semantic_tightness(&one, &embedder).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn local_embedder_is_pure_and_unit_normalized() {
        let embedder = DeterministicLocalEmbedder::default();
        let a = embedder.embed("The guard draws his sword").unwrap();
        let b = embedder.embed("The guard draws his sword").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), DEFAULT_EMBEDDING_DIM);
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);

        // Case-folding makes capitalization irrelevant; different texts land
        // on different vectors but shared tokens keep them correlated.
        let lower = embedder.embed("the guard draws his sword").unwrap();
        assert_eq!(a, lower);
        let other = embedder.embed("the guard lowers the gate").unwrap();
        let cos = cosine_similarity(&a, &other).unwrap();
        assert!(cos < 0.999, "distinct texts must not coincide: {cos}");
        assert!(cos > 0.0, "shared tokens keep some similarity: {cos}");
    }

    #[test]
    fn paired_comparison_matches_hand_t_statistic() {
        // Differences [0.2, 0.1, 0.3, 0.2]: mean 0.2, sd ~ 0.0816, t ~ 4.899,
        // and the two-sided p under t(3) is ~ 0.01626.
        let tlcf = [0.5, 0.5, 0.5, 0.5];
        let acf = [0.7, 0.6, 0.8, 0.7];
        let cmp = paired_comparison(&acf, &tlcf).unwrap();
        assert_eq!(cmp.n, 4);
        assert_eq!(cmp.win_rate, 1.0);
        assert!((cmp.mean_difference - 0.2).abs() < 1e-12);
        let t = cmp.t_statistic.unwrap();
        assert!((t - 4.898979).abs() < 1e-5, "t = {t}");
        let p = cmp.p_value.unwrap();
        assert!((p - 0.016256).abs() < 1e-4, "p = {p}");
        assert!(!cmp.degenerate);
    }

    #[test]
    fn paired_comparison_degenerate_cases() {
        // All pairs equal: zero win rate, undefined t.
        let flat = paired_comparison(&[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert_eq!(flat.win_rate, 0.0);
        assert!(flat.t_statistic.is_none());
        assert!(flat.degenerate);

        // Constant nonzero differences: sd 0, undefined t, full win rate.
        // (Dyadic values so the subtractions are exact.)
        let constant = paired_comparison(&[0.75, 1.75, 2.75, 3.75], &[0.5, 1.5, 2.5, 3.5]).unwrap();
        assert_eq!(constant.win_rate, 1.0);
        assert!((constant.mean_difference - 0.25).abs() < 1e-12);
        assert!(constant.t_statistic.is_none());
        assert!(constant.degenerate);

        // A single pair cannot support a t test but keeps its win rate.
        let single = paired_comparison(&[0.7], &[0.5]).unwrap();
        assert_eq!(single.n, 1);
        assert_eq!(single.win_rate, 1.0);
        assert!(single.t_statistic.is_none());
        assert!(single.degenerate);

        assert!(matches!(
            paired_comparison(&[], &[]),
            Err(MetricsError::Empty(_))
        ));
        assert!(matches!(
            paired_comparison(&[0.1], &[0.1, 0.2]),
            Err(MetricsError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn pronoun_classification_follows_the_lexicons() {
        assert_eq!(classify_pronouns("She is a reporter."), PronounUse::OnlyFemale);
        assert_eq!(classify_pronouns("He thanked her."), PronounUse::Mixed);
        assert_eq!(classify_pronouns("The draft arrived."), PronounUse::NoPronouns);
        assert_eq!(classify_pronouns("HIS words echoed."), PronounUse::OnlyMale);
        assert_eq!(classify_pronouns("himself, alone"), PronounUse::OnlyMale);
        assert_eq!(classify_pronouns("hers to keep"), PronounUse::OnlyFemale);
        // Word boundaries: substrings inside larger words never match.
        assert_eq!(classify_pronouns("A hero chemist."), PronounUse::NoPronouns);
        assert_eq!(classify_pronouns("The shimmering theme."), PronounUse::NoPronouns);
        // Punctuation-attached pronouns still match.
        assert_eq!(classify_pronouns("\"him,\" they said"), PronounUse::OnlyMale);
    }

    #[test]
    fn pronoun_distribution_partitions_inputs() {
        let texts: Vec<String> = [
            "He wrote back.",
            "She wrote back.",
            "He wrote to her.",
            "Nobody wrote.",
            "His reply and hers crossed.",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let dist = pronoun_distribution(&texts);
        assert_eq!(dist.n, 5);
        assert!((dist.only_male - 0.2).abs() < 1e-15);
        assert!((dist.only_female - 0.2).abs() < 1e-15);
        assert!((dist.mixed - 0.4).abs() < 1e-15);
        assert!((dist.no_pronouns - 0.2).abs() < 1e-15);
        let total = dist.only_male + dist.only_female + dist.mixed + dist.no_pronouns;
        assert!((total - 1.0).abs() < 1e-12);

        let empty = pronoun_distribution(&[]);
        assert_eq!(empty.n, 0);
        assert_eq!(empty.only_male, 0.0);
    }

    #[test]
    fn http_embedder_parses_and_normalizes() {
        let body = json!({"data": [{"embedding": [3.0, 0.0, 4.0, 0.0]}]}).to_string();
        let server = CannedServer::spawn(vec![(200, body)]);
        let mut config = HttpEmbedderConfig::new(&server.base_url, "embed-small", 4);
        config.api_key = Some("k".into());
        config.max_retries = 0;
        let embedder = HttpEmbedder::new(config);
        let vector = embedder.embed("some text").unwrap();
        assert!((vector[0] - 0.6).abs() < 1e-12);
        assert!((vector[2] - 0.8).abs() < 1e-12);
        let requests = server.request_jsons();
        assert_eq!(requests[0]["model"], "embed-small");
        assert_eq!(requests[0]["input"], "some text");
    }

    #[test]
    fn http_embedder_rejects_bad_responses() {
        let wrong_dim = json!({"data": [{"embedding": [1.0, 0.0]}]}).to_string();
        let server = CannedServer::spawn(vec![(200, wrong_dim)]);
        let mut config = HttpEmbedderConfig::new(&server.base_url, "embed-small", 4);
        config.max_retries = 0;
        let embedder = HttpEmbedder::new(config);
        assert!(matches!(
            embedder.embed("x"),
            Err(MetricsError::Malformed(_))
        ));

        let server = CannedServer::spawn(vec![(401, "{\"error\": \"no key\"}".into())]);
        let mut config = HttpEmbedderConfig::new(&server.base_url, "embed-small", 4);
        config.max_retries = 0;
        let embedder = HttpEmbedder::new(config);
        assert!(matches!(embedder.embed("x"), Err(MetricsError::Auth(_))));
    }
}
