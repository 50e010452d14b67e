//! `acf query`: answer one counterfactual query, from a query file or inline
//! flags, and emit the result as JSON or CSV with full provenance.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use acf_core::engine::{
    ActionDistribution, CounterfactualQuery, CounterfactualResult, Engine, Observation,
};
use acf_core::policy::{InterventionSpec, StateRef};
use clap::{Args, ValueEnum};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::providers;
use crate::report;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Acf,
    Tlcf,
    Both,
}

impl Method {
    fn runs_acf(self) -> bool {
        matches!(self, Method::Acf | Method::Both)
    }

    fn runs_tlcf(self) -> bool {
        matches!(self, Method::Tlcf | Method::Both)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

/// Answer a single counterfactual query.
#[derive(Debug, Args)]
pub struct QueryArgs {
    #[command(flatten)]
    pub provider: crate::config::ProviderFlags,

    /// Query as a JSON file; explicit budget/seed/observation flags override
    /// the corresponding fields.
    #[arg(long, value_name = "FILE")]
    pub query: Option<PathBuf>,

    /// Factual scene id (choice-based state; needs --scene-file).
    #[arg(long, value_name = "SCENE", conflicts_with = "query")]
    pub factual: Option<String>,

    /// Factual prompt (open-text state).
    #[arg(long, value_name = "TEXT", conflicts_with_all = ["query", "factual"])]
    pub prompt: Option<String>,

    /// Generation cap for open-text states.
    #[arg(long, value_name = "N", default_value_t = 16)]
    pub max_len: usize,

    /// Intervention: swap the environment to this scene.
    #[arg(long, value_name = "SCENE", conflicts_with = "query")]
    pub counterfactual: Option<String>,

    /// Intervention: re-point the state at this model configuration.
    #[arg(long, value_name = "CONFIG", conflicts_with = "query")]
    pub swap_model_config: Option<String>,

    /// Intervention: replace the last prompt token with the provider's top
    /// prediction at that position.
    #[arg(long, conflicts_with = "query")]
    pub replace_last_token: bool,

    /// Observed choice label.
    #[arg(long, value_name = "LABEL")]
    pub observed_choice: Option<String>,

    /// Observed text continuation.
    #[arg(long, value_name = "TEXT")]
    pub observed_text: Option<String>,

    /// Observed abstraction class.
    #[arg(long, value_name = "CLASS")]
    pub observed_class: Option<String>,

    /// Shorthand: set both Monte-Carlo budgets at once
    /// (--posterior-draws / --continuation-samples win when given).
    #[arg(long, value_name = "N")]
    pub samples: Option<usize>,

    /// Inference method(s) to run.
    #[arg(long, value_enum, default_value = "both")]
    pub method: Method,

    /// Output file (stdout when omitted).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,

    /// Output format.
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
}

#[derive(Debug, Serialize)]
struct QueryPayload {
    query: CounterfactualQuery,
    /// Keyed by method name; one entry per method run.
    results: BTreeMap<String, CounterfactualResult>,
}

/// Assemble the query (file or inline flags) without touching any provider.
fn build_query(args: &QueryArgs, config: &RunConfig) -> Result<CounterfactualQuery, CliError> {
    let mut query = match &args.query {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Validation(format!("cannot read {}: {e}", path.display()))
            })?;
            serde_json::from_str::<CounterfactualQuery>(&text)
                .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?
        }
        None => {
            let factual_state = match (&args.factual, &args.prompt) {
                (Some(scene_id), None) => {
                    // Inline choice states need the scene graph; resolve the
                    // prompt from it and validate ids before any provider
                    // exists.
                    let scenes = providers::build_scenes(config)?.ok_or_else(|| {
                        CliError::Validation("--factual needs --scene-file".into())
                    })?;
                    let scene = scenes.scene(scene_id)?;
                    if let Some(label) = &args.observed_choice {
                        if scene.choice(label).is_none() {
                            return Err(CliError::Validation(format!(
                                "scene {scene_id:?} has no choice {label:?}"
                            )));
                        }
                    }
                    StateRef::choice(scene_id, &scene.text, &config.model_config())
                }
                (None, Some(prompt)) => {
                    StateRef::open_text(prompt, &config.model_config(), args.max_len)
                }
                _ => {
                    return Err(CliError::Validation(
                        "no factual state: pass --query, --factual <scene>, or --prompt <text>"
                            .into(),
                    ))
                }
            };
            let mut interventions: Vec<InterventionSpec> = Vec::new();
            if let Some(scene_id) = &args.counterfactual {
                if let Some(scenes) = providers::build_scenes(config)? {
                    scenes.scene(scene_id)?;
                }
                interventions.push(InterventionSpec::SceneSwap {
                    scene_id: scene_id.clone(),
                    scene_text: None,
                });
            }
            if let Some(model_config) = &args.swap_model_config {
                interventions.push(InterventionSpec::ModelConfigSwap {
                    model_config: model_config.clone(),
                });
            }
            if args.replace_last_token {
                interventions.push(InterventionSpec::PromptTokenReplacement);
            }
            if interventions.len() != 1 {
                return Err(CliError::Validation(format!(
                    "exactly one intervention required (--counterfactual, --swap-model-config, \
                     or --replace-last-token); got {}",
                    interventions.len()
                )));
            }
            CounterfactualQuery {
                factual_state,
                observation: Observation::default(),
                intervention: interventions.pop().expect("checked length"),
                budget: config.budget(),
                seed: config.seed,
            }
        }
    };

    // Flags override file fields; --samples fills in whichever budget knob
    // was not given explicitly.
    if let Some(n) = args.samples {
        if args.provider.posterior_draws.is_none() {
            query.budget.posterior_draws = n;
        }
        if args.provider.continuation_samples.is_none() {
            query.budget.continuation_samples = n;
        }
    }
    if args.provider.posterior_draws.is_some() {
        query.budget.posterior_draws = config.posterior_draws;
    }
    if args.provider.continuation_samples.is_some() {
        query.budget.continuation_samples = config.continuation_samples;
    }
    if args.provider.seed.is_some() {
        query.seed = config.seed;
    }
    if let Some(label) = &args.observed_choice {
        query.observation.choice = Some(label.clone());
    }
    if let Some(text) = &args.observed_text {
        query.observation.continuation = Some(text.clone());
    }
    if let Some(class) = &args.observed_class {
        query.observation.abstraction_class = Some(class.clone());
    }
    Ok(query)
}

/// Everything checkable before provider construction; the fail-fast contract
/// is that none of these paths performs a provider call.
fn validate(args: &QueryArgs, config: &RunConfig, query: &CounterfactualQuery) -> Result<(), CliError> {
    query.budget.validate().map_err(CliError::from)?;
    if query.observation.is_empty() {
        return Err(CliError::Validation(
            "no observation: pass --observed-choice, --observed-text, or --observed-class".into(),
        ));
    }
    if args.method.runs_tlcf() {
        let has_action = if query.factual_state.is_choice_based() {
            query.observation.choice.is_some()
        } else {
            query.observation.continuation.is_some()
        };
        if !has_action {
            let flag = if query.factual_state.is_choice_based() {
                "--observed-choice"
            } else {
                "--observed-text"
            };
            return Err(CliError::Validation(format!(
                "tlcf needs the observed action: pass {flag} (or --method acf)"
            )));
        }
    }
    if args.method.runs_acf() && config.abstraction.is_none() {
        return Err(CliError::Validation(
            "acf needs an abstraction: pass --abstraction (or --method tlcf)".into(),
        ));
    }
    Ok(())
}

/// Input files whose hashes are stamped into the output: everything the run
/// read, including replay fixtures (record-mode fixtures are outputs, not
/// inputs, so they are skipped).
fn input_files(args: &QueryArgs, config: &RunConfig) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = Vec::new();
    let mut push = |p: Option<&PathBuf>| {
        if let Some(p) = p {
            files.push(p.clone());
        }
    };
    push(args.provider.config.as_ref());
    push(args.query.as_ref());
    push(config.scene_file.as_ref());
    push(config.policy_file.as_ref());
    if let Some(spec) = &config.abstraction {
        if let Some(path) = providers::abstraction_file_arg(spec) {
            files.push(path);
        }
    }
    files.extend(providers::replay_inputs(config));
    files
}

/// Quote a CSV field when it contains a delimiter, quote, or newline.
pub fn csv_field(value: &str) -> String {
    if value.contains([',', '"', '\n']) {
        format!("\"{}\"", value.replace('"', "\"\""))
    } else {
        value.to_string()
    }
}

fn csv_body(results: &BTreeMap<String, CounterfactualResult>) -> String {
    let mut out = String::from("method, label, probability\n");
    for (method, result) in results {
        match &result.action_distribution {
            ActionDistribution::Choice { estimate } => {
                let labels = estimate.distribution.labels();
                let probs = estimate.distribution.probs();
                for (label, p) in labels.iter().zip(probs) {
                    out.push_str(&format!("{method}, {}, {p}\n", csv_field(label)));
                }
            }
            ActionDistribution::Samples { samples } => {
                for (content, mass) in samples.mass_by_content() {
                    out.push_str(&format!("{method}, {}, {mass}\n", csv_field(&content)));
                }
            }
        }
    }
    out
}

fn human_summary(results: &BTreeMap<String, CounterfactualResult>) -> String {
    let mut out = String::new();
    for (method, result) in results {
        let state = &result.counterfactual_state;
        let target = state
            .scene_id
            .as_deref()
            .map(|s| format!("scene {s:?}"))
            .unwrap_or_else(|| format!("prompt {:?}", state.prompt));
        out.push_str(&format!("{method}: counterfactual state = {target}\n"));
        match &result.action_distribution {
            ActionDistribution::Choice { estimate } => {
                let labels = estimate.distribution.labels();
                let probs = estimate.distribution.probs();
                for (label, p) in labels.iter().zip(probs) {
                    out.push_str(&format!("  p({label}) = {p:.6}\n"));
                }
            }
            ActionDistribution::Samples { samples } => {
                let mut mass = samples.mass_by_content();
                mass.sort_by(|a, b| b.1.total_cmp(&a.1));
                for (content, w) in mass.iter().take(5) {
                    out.push_str(&format!("  p({content:?}) = {w:.6}\n"));
                }
                if mass.len() > 5 {
                    out.push_str(&format!("  … {} more\n", mass.len() - 5));
                }
            }
        }
        for warning in &result.diagnostics.warnings {
            out.push_str(&format!("  warning: {warning}\n"));
        }
    }
    out
}

pub fn run(args: &QueryArgs) -> Result<(), CliError> {
    let config = RunConfig::resolve(&args.provider)?;
    let query = build_query(args, &config)?;
    validate(args, &config, &query)?;

    let files = input_files(args, &config);
    let hashes = report::fixture_hashes(files.iter().map(PathBuf::as_path))?;

    let scenes = providers::build_scenes(&config)?;
    let policy = providers::build_policy(&config)?;
    let mut engine = Engine::new(policy);
    if let Some(scenes) = &scenes {
        engine = engine.with_scenes(Arc::clone(scenes));
    }
    if let Some(abstraction) = providers::build_abstraction(&config, scenes.as_ref())? {
        engine = engine.with_abstraction(abstraction);
    }

    let mut results = BTreeMap::new();
    if args.method.runs_acf() {
        results.insert("acf".to_string(), engine.acf(&query)?);
    }
    if args.method.runs_tlcf() {
        results.insert("tlcf".to_string(), engine.tlcf(&query)?);
    }

    let config_hash = config.hash();
    let text = match args.format {
        Format::Json => {
            let envelope = report::Envelope::new(
                &config_hash,
                vec![query.seed],
                hashes,
                QueryPayload {
                    query: query.clone(),
                    results: results.clone(),
                },
            );
            envelope.to_json()
        }
        Format::Csv => format!(
            "{}{}",
            report::csv_comments(&config_hash, &hashes),
            csv_body(&results)
        ),
    };
    report::write_text(args.out.as_deref(), &text)?;
    if args.out.is_some() {
        print!("{}", human_summary(&results));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ProviderFlags;
    use clap::Parser;
    use std::path::Path;

    #[derive(Parser)]
    struct Harness {
        #[command(flatten)]
        args: QueryArgs,
    }

    fn parse(argv: &[&str]) -> QueryArgs {
        let mut full = vec!["test"];
        full.extend_from_slice(argv);
        Harness::parse_from(full).args
    }

    fn write_bundle(dir: &Path) -> (PathBuf, PathBuf) {
        let scenes = dir.join("scenes.json");
        std::fs::write(
            &scenes,
            serde_json::json!({
                "scenes": [
                    {"id": "a", "text": "at a", "choices": [
                        {"label": "0", "text": "stay"},
                        {"label": "1", "text": "go"},
                    ]},
                    {"id": "b", "text": "at b", "choices": [
                        {"label": "0", "text": "stay"},
                        {"label": "1", "text": "go"},
                    ]},
                ]
            })
            .to_string(),
        )
        .unwrap();
        let policy = dir.join("policy.json");
        std::fs::write(
            &policy,
            serde_json::json!({
                "states": {
                    "a": {"choices": {"0": 0.8, "1": 0.2}},
                    "b": {"choices": {"0": 0.4, "1": 0.6}},
                }
            })
            .to_string(),
        )
        .unwrap();
        (scenes, policy)
    }

    fn config_for(scenes: &Path, policy: &Path) -> RunConfig {
        let flags = ProviderFlags {
            scene_file: Some(scenes.to_path_buf()),
            policy_file: Some(policy.to_path_buf()),
            ..ProviderFlags::default()
        };
        RunConfig::resolve(&flags).unwrap()
    }

    #[test]
    fn tlcf_without_an_observed_action_fails_validation_before_any_provider() {
        let dir = tempfile::tempdir().unwrap();
        let (scenes, policy) = write_bundle(dir.path());
        let args = parse(&[
            "--scene-file",
            scenes.to_str().unwrap(),
            "--factual",
            "a",
            "--counterfactual",
            "b",
            "--observed-class",
            "harm",
            "--method",
            "tlcf",
        ]);
        let config = config_for(&scenes, &policy);
        let query = build_query(&args, &config).unwrap();
        let err = validate(&args, &config, &query).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("--observed-choice"));
    }

    #[test]
    fn inline_queries_validate_scene_and_choice_ids_eagerly() {
        let dir = tempfile::tempdir().unwrap();
        let (scenes, policy) = write_bundle(dir.path());
        let config = config_for(&scenes, &policy);
        let args = parse(&[
            "--factual",
            "nope",
            "--counterfactual",
            "b",
            "--observed-choice",
            "0",
        ]);
        assert_eq!(build_query(&args, &config).unwrap_err().exit_code(), 2);
        let args = parse(&[
            "--factual",
            "a",
            "--counterfactual",
            "b",
            "--observed-choice",
            "9",
        ]);
        assert_eq!(build_query(&args, &config).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn exactly_one_inline_intervention() {
        let dir = tempfile::tempdir().unwrap();
        let (scenes, policy) = write_bundle(dir.path());
        let config = config_for(&scenes, &policy);
        let args = parse(&[
            "--factual",
            "a",
            "--counterfactual",
            "b",
            "--replace-last-token",
            "--observed-choice",
            "0",
        ]);
        let err = build_query(&args, &config).unwrap_err();
        assert!(err.to_string().contains("exactly one intervention"));
    }

    #[test]
    fn samples_flag_sets_both_budgets_unless_overridden() {
        let dir = tempfile::tempdir().unwrap();
        let (scenes, policy) = write_bundle(dir.path());
        let config = config_for(&scenes, &policy);
        let args = parse(&[
            "--factual",
            "a",
            "--counterfactual",
            "b",
            "--observed-choice",
            "0",
            "--samples",
            "32",
        ]);
        let query = build_query(&args, &config).unwrap();
        assert_eq!(query.budget.posterior_draws, 32);
        assert_eq!(query.budget.continuation_samples, 32);

        let args = parse(&[
            "--factual",
            "a",
            "--counterfactual",
            "b",
            "--observed-choice",
            "0",
            "--samples",
            "32",
            "--posterior-draws",
            "64",
        ]);
        let config = RunConfig::resolve(&args.provider).unwrap();
        let mut with_files = config.clone();
        with_files.scene_file = Some(scenes.clone());
        with_files.policy_file = Some(policy.clone());
        let query = build_query(&args, &with_files).unwrap();
        assert_eq!(query.budget.posterior_draws, 64);
        assert_eq!(query.budget.continuation_samples, 32);
    }

    #[test]
    fn csv_fields_escape_delimiters() {
        assert_eq!(csv_field("plain"), "plain");
        assert_eq!(csv_field("a, b"), "\"a, b\"");
        assert_eq!(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
    }

    #[test]
    fn end_to_end_json_query_over_tabular_files() {
        let dir = tempfile::tempdir().unwrap();
        let (scenes, policy) = write_bundle(dir.path());
        let out = dir.path().join("result.json");
        let args = parse(&[
            "--scene-file",
            scenes.to_str().unwrap(),
            "--policy-file",
            policy.to_str().unwrap(),
            "--factual",
            "a",
            "--counterfactual",
            "b",
            "--observed-choice",
            "0",
            "--method",
            "tlcf",
            "--out",
            out.to_str().unwrap(),
        ]);
        run(&args).unwrap();
        let text = std::fs::read_to_string(&out).unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(value["config_hash"].is_string());
        assert!(value["payload"]["results"]["tlcf"]["action_distribution"]["estimate"]
            .is_object());
        assert_eq!(value["seeds"], serde_json::json!([0]));
        // Binary closed form: the observed choice keeps min(1, q/p) of its
        // mass, so p(0) = min(1, 0.4/0.8) = 0.5.
        let probs = &value["payload"]["results"]["tlcf"]["action_distribution"]["estimate"]
            ["distribution"];
        assert!(probs.is_object());
    }
}
