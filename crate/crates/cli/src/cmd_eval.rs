//! `acf eval`: run a manifest of paired scene-swap queries through both
//! inference methods, score every sample through the abstraction, and emit a
//! per-row metrics CSV plus a JSON summary with paired statistics.
//!
//! Partial failures do not abort the sweep: a failing (query, method) pair is
//! recorded in the summary's failure list and its row is skipped; the
//! aggregates are computed over completed rows with the counts disclosed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use acf_core::abstraction::AbstractionProvider;
use acf_core::engine::{
    ActionDistribution, CounterfactualQuery, Engine, Observation, QueryBudget,
};
use acf_core::envsim::SceneBundle;
use acf_core::metrics::{
    self, DeterministicLocalEmbedder, EmbeddingProvider, EvalRecord, HttpEmbedder,
    HttpEmbedderConfig, DEFAULT_EMBEDDING_DIM,
};
use acf_core::policy::{ActionSample, InterventionSpec, StateRef};
use clap::Args;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::Deserialize;

use crate::cmd_query::csv_field;
use crate::config::{Mode, RunConfig};
use crate::error::CliError;
use crate::providers;
use crate::report;

/// The documented CSV header; golden-checked by the test suite.
pub const CSV_HEADER: &str =
    "query_id, method, observed_class, acr_flag, cpir_flag, st, n_cf_samples, n_int_samples, seed";

const METHODS: [&str; 2] = ["acf", "tlcf"];

/// Run a batch evaluation from a query manifest.
#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub provider: crate::config::ProviderFlags,

    /// Query manifest (JSON). Relative paths inside it resolve against its
    /// own directory; flags override its provider fields.
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,

    /// Directory receiving eval.csv and summary.json.
    #[arg(long, value_name = "DIR", default_value = ".")]
    pub out_dir: PathBuf,

    /// Embedding provider for semantic tightness: "local" or "http:<model>".
    #[arg(long, value_name = "SPEC", default_value = "local")]
    pub embedder: String,

    /// Embedding dimension for the local provider.
    #[arg(long, value_name = "N", default_value_t = DEFAULT_EMBEDDING_DIM)]
    pub embedding_dim: usize,

    /// Drop the i = j diagonal from the semantic-tightness average.
    #[arg(long)]
    pub exclude_diagonal: bool,
}

/// One evaluation query: a factual/intervened scene pair plus the observed
/// choice.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct ManifestQuery {
    pub(crate) id: String,
    pub(crate) factual_scene: String,
    pub(crate) intervened_scene: String,
    pub(crate) observed_choice: String,
    pub(crate) seed: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct EvalManifest {
    #[serde(default)]
    pub(crate) scene_file: Option<PathBuf>,
    #[serde(default)]
    pub(crate) policy_file: Option<PathBuf>,
    #[serde(default)]
    pub(crate) abstraction: Option<String>,
    #[serde(default)]
    pub(crate) model_config: Option<String>,
    #[serde(default)]
    pub(crate) default_budget: Option<QueryBudget>,
    pub(crate) queries: Vec<ManifestQuery>,
    /// Provenance stamp written by asset generators; ignored here.
    #[serde(default, rename = "_meta")]
    pub(crate) _meta: Option<serde_json::Value>,
}

pub(crate) fn load_manifest(path: &Path) -> Result<EvalManifest, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
    let manifest: EvalManifest = serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    if manifest.queries.is_empty() {
        return Err(CliError::Validation(format!(
            "{}: manifest has no queries",
            path.display()
        )));
    }
    Ok(manifest)
}

fn join_manifest_relative(manifest: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match manifest.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => dir.join(path),
        _ => path.to_path_buf(),
    }
}

/// Fold the manifest's provider fields into the resolved config. Flags win;
/// manifest values fill the rest, with its relative paths (including the file
/// argument of an abstraction spec) resolved against the manifest directory.
fn apply_manifest(config: &mut RunConfig, args: &EvalArgs, manifest: &EvalManifest) {
    if args.provider.scene_file.is_none() {
        if let Some(path) = &manifest.scene_file {
            config.scene_file = Some(join_manifest_relative(&args.manifest, path));
        }
    }
    if args.provider.policy_file.is_none() {
        if let Some(path) = &manifest.policy_file {
            config.policy_file = Some(join_manifest_relative(&args.manifest, path));
        }
    }
    if args.provider.abstraction.is_none() {
        if let Some(spec) = &manifest.abstraction {
            let rejoined = match providers::abstraction_file_arg(spec) {
                Some(path) => {
                    let kind = spec.split_once(':').expect("spec has a file arg").0;
                    format!(
                        "{kind}:{}",
                        join_manifest_relative(&args.manifest, &path).display()
                    )
                }
                None => spec.clone(),
            };
            config.abstraction = Some(rejoined);
        }
    }
    if let Some(budget) = &manifest.default_budget {
        if args.provider.posterior_draws.is_none() {
            config.posterior_draws = budget.posterior_draws;
        }
        if args.provider.continuation_samples.is_none() {
            config.continuation_samples = budget.continuation_samples;
        }
    }
}

fn build_embedder(
    args: &EvalArgs,
    config: &RunConfig,
) -> Result<Arc<dyn EmbeddingProvider>, CliError> {
    if args.embedder == "local" {
        return Ok(Arc::new(DeterministicLocalEmbedder::new(args.embedding_dim)));
    }
    let Some(model) = args.embedder.strip_prefix("http:") else {
        return Err(CliError::Validation(format!(
            "bad embedder spec {:?}: expected \"local\" or \"http:<model>\"",
            args.embedder
        )));
    };
    if config.mode != Mode::Live {
        return Err(CliError::Validation(
            "the http embedder is live-only; use --embedder local in record/replay".into(),
        ));
    }
    let base = config
        .api_base
        .as_ref()
        .ok_or_else(|| CliError::Validation("the http embedder needs --api-base".into()))?;
    let mut http = HttpEmbedderConfig::new(base, model, args.embedding_dim);
    http.api_key = config.api_key.clone();
    Ok(Arc::new(HttpEmbedder::new(http)))
}

fn eval_action(content: &str) -> ActionSample {
    ActionSample {
        content: content.to_string(),
        token_logprob_sum: 0.0,
        provider_tag: "eval".into(),
    }
}

/// Draw `k` labels from an exact choice distribution by inverse-CDF sampling.
/// The engine reports choice results as exact distributions, so the eval
/// layer draws its own concrete samples to score and embed.
fn sample_labels(dist: &acf_core::dist::Categorical, k: usize, rng: &mut impl Rng) -> Vec<String> {
    let probs = dist.probs();
    let labels = dist.labels();
    (0..k)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut chosen = labels.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    chosen = i;
                    break;
                }
            }
            labels[chosen].clone()
        })
        .collect()
}

/// Concrete sample contents for one result distribution. Each (query, method,
/// counterfactual/interventional) slot gets its own RNG stream so the four
/// sample sets are independent but reproducible from the query seed.
fn contents_for(dist: &ActionDistribution, seed: u64, role: u64, k: usize) -> Vec<String> {
    match dist {
        ActionDistribution::Choice { estimate } => {
            let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_mul(4).wrapping_add(role));
            sample_labels(&estimate.distribution, k, &mut rng)
        }
        ActionDistribution::Samples { samples } => samples
            .resampled_contents()
            .into_iter()
            .map(str::to_string)
            .collect(),
    }
}

/// Map sampled choice labels to the intervened scene's choice texts, the
/// surface strings semantic tightness embeds. Open-text contents embed as
/// they are.
fn texts_for(
    contents: &[String],
    scenes: &SceneBundle,
    scene_id: &str,
    choice_based: bool,
) -> Result<Vec<String>, CliError> {
    if !choice_based {
        return Ok(contents.to_vec());
    }
    let scene = scenes.scene(scene_id)?;
    contents
        .iter()
        .map(|label| {
            scene
                .choice(label)
                .map(|c| c.text.clone())
                .ok_or_else(|| {
                    CliError::Inference(format!(
                        "sampled label {label:?} is missing from scene {scene_id:?}"
                    ))
                })
        })
        .collect()
}

struct RowOutcome {
    query_id: String,
    method: &'static str,
    observed_class: String,
    acr: bool,
    cpir: bool,
    st: f64,
    n_cf: usize,
    n_int: usize,
    seed: u64,
}

struct QueryContext {
    factual_state: StateRef,
    cf_state: StateRef,
    observed_class: String,
}

fn prepare_query(
    mq: &ManifestQuery,
    scenes: &SceneBundle,
    engine: &Engine,
    abstraction: &dyn AbstractionProvider,
    model_config: &str,
) -> Result<QueryContext, CliError> {
    let factual = scenes.scene(&mq.factual_scene)?;
    if factual.choice(&mq.observed_choice).is_none() {
        return Err(CliError::Validation(format!(
            "scene {:?} has no choice {:?}",
            mq.factual_scene, mq.observed_choice
        )));
    }
    scenes.scene(&mq.intervened_scene)?;
    let factual_state = StateRef::choice(&mq.factual_scene, &factual.text, model_config);
    let cf_state = engine.counterfactual_state(
        &factual_state,
        &InterventionSpec::SceneSwap {
            scene_id: mq.intervened_scene.clone(),
            scene_text: None,
        },
    )?;
    let observed_score = abstraction.score(&factual_state, &eval_action(&mq.observed_choice))?;
    let observed_class = observed_score.dist.labels()[observed_score.dist.argmax()].clone();
    Ok(QueryContext {
        factual_state,
        cf_state,
        observed_class,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_method(
    mq: &ManifestQuery,
    context: &QueryContext,
    method_index: usize,
    engine: &Engine,
    abstraction: &dyn AbstractionProvider,
    scenes: &SceneBundle,
    embedder: &dyn EmbeddingProvider,
    budget: QueryBudget,
    include_diagonal: bool,
) -> Result<(RowOutcome, EvalRecord), CliError> {
    let method = METHODS[method_index];
    let query = CounterfactualQuery {
        factual_state: context.factual_state.clone(),
        observation: Observation::choice(&mq.observed_choice),
        intervention: InterventionSpec::SceneSwap {
            scene_id: mq.intervened_scene.clone(),
            scene_text: None,
        },
        budget,
        seed: mq.seed,
    };
    let result = match method {
        "acf" => engine.acf(&query)?,
        _ => engine.tlcf(&query)?,
    };
    let choice_based = context.cf_state.is_choice_based();
    let k = budget.continuation_samples;
    let cf_role = 2 * method_index as u64;
    let cf_contents = contents_for(&result.action_distribution, mq.seed, cf_role, k);
    let int_contents = contents_for(&result.interventional_baseline, mq.seed, cf_role + 1, k);

    let score = |contents: &[String]| -> Result<Vec<_>, CliError> {
        contents
            .iter()
            .map(|content| {
                abstraction
                    .score(&context.cf_state, &eval_action(content))
                    .map(|s| s.dist)
                    .map_err(CliError::from)
            })
            .collect()
    };
    let counterfactual_scores = score(&cf_contents)?;
    let interventional_scores = score(&int_contents)?;
    let counterfactual_texts =
        texts_for(&cf_contents, scenes, &mq.intervened_scene, choice_based)?;

    let record = EvalRecord {
        query_id: mq.id.clone(),
        method: method.to_string(),
        observed_class: context.observed_class.clone(),
        counterfactual_scores,
        interventional_scores,
        counterfactual_texts,
        seed: mq.seed,
    };
    record.validate()?;
    let acr = metrics::acr_flag(&record)?;
    let cpir = metrics::cpir_flag(&record)?;
    let st = metrics::semantic_tightness_with(&record.counterfactual_texts, embedder, include_diagonal)?;
    let outcome = RowOutcome {
        query_id: mq.id.clone(),
        method,
        observed_class: context.observed_class.clone(),
        acr,
        cpir,
        st,
        n_cf: record.counterfactual_texts.len(),
        n_int: record.interventional_scores.len(),
        seed: mq.seed,
    };
    Ok((outcome, record))
}

fn csv_row(row: &RowOutcome) -> String {
    format!(
        "{}, {}, {}, {}, {}, {}, {}, {}, {}",
        csv_field(&row.query_id),
        row.method,
        csv_field(&row.observed_class),
        row.acr as u8,
        row.cpir as u8,
        row.st,
        row.n_cf,
        row.n_int,
        row.seed
    )
}

/// Aggregate over completed records: per-method ACR/CPIR plus the paired
/// ACF-vs-TLCF semantic-tightness statistics over queries where both methods
/// completed.
fn summary_payload(
    manifest: &EvalManifest,
    rows: &[RowOutcome],
    records: &BTreeMap<(String, &'static str), EvalRecord>,
    failures: &[serde_json::Value],
) -> Result<serde_json::Value, CliError> {
    let method_metric = |f: fn(&[EvalRecord]) -> Result<f64, metrics::MetricsError>| {
        let mut out = serde_json::Map::new();
        for method in METHODS {
            let method_records: Vec<EvalRecord> = manifest
                .queries
                .iter()
                .filter_map(|q| records.get(&(q.id.clone(), method)).cloned())
                .collect();
            let value = if method_records.is_empty() {
                serde_json::Value::Null
            } else {
                match f(&method_records) {
                    Ok(v) => serde_json::json!(v),
                    Err(_) => serde_json::Value::Null,
                }
            };
            out.insert(method.to_string(), value);
        }
        serde_json::Value::Object(out)
    };

    let mut acf_st = Vec::new();
    let mut tlcf_st = Vec::new();
    for q in &manifest.queries {
        let by_method: Vec<Option<&RowOutcome>> = METHODS
            .iter()
            .map(|m| rows.iter().find(|r| r.query_id == q.id && r.method == *m))
            .collect();
        if let (Some(acf), Some(tlcf)) = (by_method[0], by_method[1]) {
            acf_st.push(acf.st);
            tlcf_st.push(tlcf.st);
        }
    }
    let paired = if acf_st.is_empty() {
        None
    } else {
        Some(metrics::paired_comparison(&acf_st, &tlcf_st)?)
    };

    let (st_win_rate, t, p, paired_n) = match &paired {
        Some(c) => (
            serde_json::json!(c.win_rate),
            c.t_statistic.map_or(serde_json::Value::Null, |t| serde_json::json!(t)),
            c.p_value.map_or(serde_json::Value::Null, |p| serde_json::json!(p)),
            c.n,
        ),
        None => (serde_json::Value::Null, serde_json::Value::Null, serde_json::Value::Null, 0),
    };
    Ok(serde_json::json!({
        "acr": method_metric(metrics::acr),
        "cpir": method_metric(metrics::cpir),
        "st_win_rate": st_win_rate,
        "t": t,
        "p": p,
        "paired_n": paired_n,
        "completed": rows.len(),
        "failed": failures.len(),
        "failures": failures,
    }))
}

pub fn run(args: &EvalArgs) -> Result<(), CliError> {
    let mut config = RunConfig::resolve(&args.provider)?;
    let manifest = load_manifest(&args.manifest)?;
    apply_manifest(&mut config, args, &manifest);
    config.budget().validate()?;

    let scenes = providers::build_scenes(&config)?
        .ok_or_else(|| CliError::Validation("eval needs a scene file".into()))?;
    if config.abstraction.is_none() {
        return Err(CliError::Validation(
            "eval needs an abstraction (manifest field or --abstraction)".into(),
        ));
    }

    let mut input_files: Vec<PathBuf> = vec![args.manifest.clone()];
    if let Some(path) = &args.provider.config {
        input_files.push(path.clone());
    }
    input_files.extend(config.scene_file.clone());
    input_files.extend(config.policy_file.clone());
    if let Some(spec) = &config.abstraction {
        input_files.extend(providers::abstraction_file_arg(spec));
    }
    input_files.extend(providers::replay_inputs(&config));
    let hashes = report::fixture_hashes(input_files.iter().map(PathBuf::as_path))?;

    let policy = providers::build_policy(&config)?;
    let abstraction = providers::build_abstraction(&config, Some(&scenes))?
        .expect("abstraction presence checked above");
    let engine = Engine::new(policy)
        .with_scenes(Arc::clone(&scenes))
        .with_abstraction(Arc::clone(&abstraction));
    let embedder = build_embedder(args, &config)?;
    let model_config = manifest
        .model_config
        .clone()
        .unwrap_or_else(|| config.model_config());
    let budget = config.budget();
    let include_diagonal = !args.exclude_diagonal;

    let mut rows: Vec<RowOutcome> = Vec::new();
    let mut records: BTreeMap<(String, &'static str), EvalRecord> = BTreeMap::new();
    let mut failures: Vec<serde_json::Value> = Vec::new();
    let fail = |failures: &mut Vec<serde_json::Value>, id: &str, method: &str, e: &CliError| {
        failures.push(serde_json::json!({
            "query_id": id,
            "method": method,
            "error": e.to_string(),
        }));
    };

    for mq in &manifest.queries {
        let context = match prepare_query(mq, &scenes, &engine, abstraction.as_ref(), &model_config)
        {
            Ok(context) => context,
            Err(e) => {
                // Shared-stage failure: both method rows are lost.
                for method in METHODS {
                    fail(&mut failures, &mq.id, method, &e);
                }
                continue;
            }
        };
        for (method_index, method) in METHODS.iter().enumerate() {
            match run_method(
                mq,
                &context,
                method_index,
                &engine,
                abstraction.as_ref(),
                &scenes,
                embedder.as_ref(),
                budget,
                include_diagonal,
            ) {
                Ok((outcome, record)) => {
                    rows.push(outcome);
                    records.insert((mq.id.clone(), METHODS[method_index]), record);
                }
                Err(e) => fail(&mut failures, &mq.id, method, &e),
            }
        }
    }

    if rows.is_empty() {
        let first = failures
            .first()
            .and_then(|f| f["error"].as_str())
            .unwrap_or("no queries ran");
        return Err(CliError::Inference(format!(
            "no queries completed ({} failures; first: {first})",
            failures.len()
        )));
    }

    let config_hash = config.hash();
    let seeds: Vec<u64> = manifest.queries.iter().map(|q| q.seed).collect();

    let mut csv = report::csv_comments(&config_hash, &hashes);
    csv.push_str(CSV_HEADER);
    csv.push('\n');
    for row in &rows {
        csv.push_str(&csv_row(row));
        csv.push('\n');
    }
    let csv_path = args.out_dir.join("eval.csv");
    report::write_text(Some(&csv_path), &csv)?;

    let payload = summary_payload(&manifest, &rows, &records, &failures)?;
    let envelope = report::Envelope::new(&config_hash, seeds, hashes, payload.clone());
    let summary_path = args.out_dir.join("summary.json");
    report::write_text(Some(&summary_path), &envelope.to_json())?;

    for row in &rows {
        println!(
            "{} {}: observed={} acr={} cpir={} st={:.4}",
            row.query_id, row.method, row.observed_class, row.acr as u8, row.cpir as u8, row.st
        );
    }
    for failure in &failures {
        println!(
            "{} {}: FAILED ({})",
            failure["query_id"].as_str().unwrap_or("?"),
            failure["method"].as_str().unwrap_or("?"),
            failure["error"].as_str().unwrap_or("?")
        );
    }
    println!(
        "eval: {} rows, {} failures → {} and {}",
        rows.len(),
        failures.len(),
        csv_path.display(),
        summary_path.display()
    );
    println!(
        "summary: acr={} cpir={} st_win_rate={} t={} p={}",
        payload["acr"], payload["cpir"], payload["st_win_rate"], payload["t"], payload["p"]
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use acf_core::dist::Categorical;
    use clap::Parser;

    #[derive(Parser)]
    struct Harness {
        #[command(flatten)]
        args: EvalArgs,
    }

    fn parse(argv: &[&str]) -> EvalArgs {
        let mut full = vec!["test"];
        full.extend_from_slice(argv);
        Harness::parse_from(full).args
    }

    fn write_corpus(dir: &Path) -> PathBuf {
        std::fs::write(
            dir.join("scenes.json"),
            serde_json::json!({
                "scenes": [
                    {"id": "a", "text": "at the ledge", "choices": [
                        {"label": "0", "text": "step back", "annotations": {"physical_harm": 0}},
                        {"label": "1", "text": "jump down", "annotations": {"physical_harm": 1}},
                    ]},
                    {"id": "b", "text": "at the fence", "choices": [
                        {"label": "0", "text": "walk away", "annotations": {"physical_harm": 0}},
                        {"label": "1", "text": "climb over", "annotations": {"physical_harm": 1}},
                    ]},
                ]
            })
            .to_string(),
        )
        .unwrap();
        std::fs::write(
            dir.join("policy.json"),
            serde_json::json!({
                "states": {
                    "a": {"choices": {"0": 0.7, "1": 0.3}},
                    "b": {"choices": {"0": 0.4, "1": 0.6}},
                }
            })
            .to_string(),
        )
        .unwrap();
        let manifest = dir.join("manifest.json");
        std::fs::write(
            &manifest,
            serde_json::json!({
                "scene_file": "scenes.json",
                "policy_file": "policy.json",
                "abstraction": "annotation:physical_harm",
                "default_budget": {"posterior_draws": 64, "continuation_samples": 16},
                "queries": [
                    {"id": "q0", "factual_scene": "a", "intervened_scene": "b",
                     "observed_choice": "0", "seed": 1},
                    {"id": "q1", "factual_scene": "a", "intervened_scene": "b",
                     "observed_choice": "1", "seed": 2},
                ]
            })
            .to_string(),
        )
        .unwrap();
        manifest
    }

    #[test]
    fn manifest_paths_resolve_relative_to_the_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let manifest_path = write_corpus(dir.path());
        let args = parse(&["--manifest", manifest_path.to_str().unwrap()]);
        let mut config = RunConfig::resolve(&args.provider).unwrap();
        let manifest = load_manifest(&args.manifest).unwrap();
        apply_manifest(&mut config, &args, &manifest);
        assert_eq!(config.scene_file.as_deref(), Some(dir.path().join("scenes.json").as_path()));
        assert_eq!(config.posterior_draws, 64);
        assert_eq!(config.continuation_samples, 16);
        assert_eq!(
            config.abstraction.as_deref(),
            Some("annotation:physical_harm")
        );
    }

    #[test]
    fn sampled_labels_follow_the_distribution() {
        let dist = Categorical::from_probs(
            vec!["x".into(), "y".into()],
            vec![0.25, 0.75],
        )
        .unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let labels = sample_labels(&dist, 4000, &mut rng);
        let y = labels.iter().filter(|l| *l == "y").count() as f64 / 4000.0;
        assert!((y - 0.75).abs() < 0.03, "got {y}");
    }

    #[test]
    fn end_to_end_eval_writes_the_documented_schema() {
        let dir = tempfile::tempdir().unwrap();
        let manifest_path = write_corpus(dir.path());
        let out = dir.path().join("out");
        let args = parse(&[
            "--manifest",
            manifest_path.to_str().unwrap(),
            "--out-dir",
            out.to_str().unwrap(),
        ]);
        run(&args).unwrap();
        let csv = std::fs::read_to_string(out.join("eval.csv")).unwrap();
        let header = csv
            .lines()
            .find(|l| !l.starts_with('#'))
            .expect("a header after the comments");
        assert_eq!(header, CSV_HEADER);
        let rows: Vec<&str> = csv
            .lines()
            .filter(|l| !l.starts_with('#') && !l.is_empty())
            .skip(1)
            .collect();
        assert_eq!(rows.len(), 4, "two queries × two methods: {rows:?}");
        assert!(rows[0].starts_with("q0, acf, "), "acf row first: {}", rows[0]);
        assert!(rows[1].starts_with("q0, tlcf, "), "then tlcf: {}", rows[1]);

        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap())
                .unwrap();
        for key in ["acr", "cpir", "st_win_rate", "t", "p"] {
            assert!(
                summary["payload"].get(key).is_some(),
                "summary must carry {key}"
            );
        }
        assert_eq!(summary["payload"]["completed"], 4);
        assert_eq!(summary["payload"]["failed"], 0);
        assert_eq!(summary["seeds"], serde_json::json!([1, 2]));
    }

    #[test]
    fn failures_are_recorded_per_row_and_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let manifest_path = write_corpus(dir.path());
        // Point one query at a scene the policy has no row for: shared-stage
        // failure for that query, the other query still completes.
        let text = std::fs::read_to_string(&manifest_path).unwrap();
        let mut manifest: serde_json::Value = serde_json::from_str(&text).unwrap();
        manifest["queries"][1]["factual_scene"] = serde_json::json!("missing");
        std::fs::write(&manifest_path, manifest.to_string()).unwrap();

        let out = dir.path().join("out");
        let args = parse(&[
            "--manifest",
            manifest_path.to_str().unwrap(),
            "--out-dir",
            out.to_str().unwrap(),
        ]);
        run(&args).unwrap();
        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap())
                .unwrap();
        assert_eq!(summary["payload"]["completed"], 2);
        assert_eq!(summary["payload"]["failed"], 2);
        assert_eq!(summary["payload"]["failures"][0]["query_id"], "q1");
        // One completed pair still yields a defined win rate but no t.
        assert_eq!(summary["payload"]["paired_n"], 1);
        assert_eq!(summary["payload"]["t"], serde_json::Value::Null);
    }

    #[test]
    fn bad_embedder_specs_and_offline_http_are_rejected() {
        let config = RunConfig {
            api_base: None,
            api_key: None,
            model: None,
            policy_file: None,
            scene_file: None,
            abstraction: None,
            posterior_draws: 1,
            continuation_samples: 1,
            seed: 0,
            mode: Mode::Replay,
            record_dir: Some(PathBuf::from("fixtures")),
        };
        let mut args = parse(&["--manifest", "m.json", "--embedder", "nonsense"]);
        let err = build_embedder(&args, &config).map(|_| ()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        args.embedder = "http:embed-small".into();
        let err = build_embedder(&args, &config).map(|_| ()).unwrap_err();
        assert!(err.to_string().contains("live-only"), "{err}");
    }
}
