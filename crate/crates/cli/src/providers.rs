//! Provider construction: map the resolved config onto concrete policy,
//! abstraction, and LLM providers, wiring in record/replay wrappers per the
//! mode. Tabular providers are local and deterministic, so they pass through
//! all modes unwrapped; only remote surfaces get recorded and replayed.

use std::path::Path;
use std::sync::Arc;

use acf_core::abstraction::{
    AbstractionProvider, AbstractionSpace, AnnotationAbstraction, HttpClassifier,
    HttpClassifierConfig, HttpLlm, HttpLlmConfig, LlmProvider, RecordingAbstraction,
    RecordingLlm, ReplayAbstraction, ReplayLlm, TableClassifier, TopicAbstraction,
};
use acf_core::envsim::SceneBundle;
use acf_core::fixtures::{RecordStore, ReplayStore};
use acf_core::policy::{
    HttpPolicy, HttpPolicyConfig, PolicyProvider, RecordingPolicy, ReplayPolicy,
    TabularChoicePolicy, TabularTextPolicy,
};

use crate::config::{Mode, RunConfig, ENV_API_KEY};
use crate::error::CliError;

/// Fixture file names inside `--record-dir`.
pub const POLICY_FIXTURE: &str = "policy.jsonl";
pub const ABSTRACTION_FIXTURE: &str = "abstraction.jsonl";
pub const LLM_FIXTURE: &str = "llm.jsonl";
/// Sidecar pinning the tag of the recorded classifier. Request keys embed
/// the tag, so replay must present the same one; record mode writes this
/// file and replay reads it back.
pub const ABSTRACTION_SOURCE: &str = "abstraction_source.json";

/// The file argument of an abstraction spec, when its kind takes one
/// (`table:`, `topics:`, and `http:` do; `annotation:` takes a tag).
pub fn abstraction_file_arg(spec: &str) -> Option<std::path::PathBuf> {
    let (kind, arg) = spec.split_once(':')?;
    matches!(kind, "table" | "topics" | "http").then(|| std::path::PathBuf::from(arg))
}

/// Replay fixture files present under the record directory. These are run
/// inputs worth hashing into output provenance; in record mode the same
/// files are outputs, so nothing is listed.
pub fn replay_inputs(config: &RunConfig) -> Vec<std::path::PathBuf> {
    let mut files = Vec::new();
    if config.mode == Mode::Replay {
        if let Some(dir) = &config.record_dir {
            for name in [POLICY_FIXTURE, ABSTRACTION_FIXTURE, LLM_FIXTURE, ABSTRACTION_SOURCE] {
                let path = dir.join(name);
                if path.is_file() {
                    files.push(path);
                }
            }
        }
    }
    files
}

fn record_store(dir: &Path, file: &str) -> Result<Arc<RecordStore>, CliError> {
    Ok(Arc::new(RecordStore::open(&dir.join(file))?))
}

fn replay_store(dir: &Path, file: &str) -> Result<Arc<ReplayStore>, CliError> {
    Ok(Arc::new(ReplayStore::load(&dir.join(file))?))
}

/// Load the scene bundle when one is configured.
pub fn build_scenes(config: &RunConfig) -> Result<Option<Arc<SceneBundle>>, CliError> {
    let Some(path) = &config.scene_file else {
        return Ok(None);
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
    let bundle = SceneBundle::from_json(&text)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    Ok(Some(Arc::new(bundle)))
}

enum LocalPolicy {
    Choice(TabularChoicePolicy),
    Text(TabularTextPolicy),
}

fn load_policy_file(path: &Path) -> Result<LocalPolicy, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    let wrap =
        |e: acf_core::policy::PolicyError| CliError::Validation(format!("{}: {e}", path.display()));
    // A `kind` tag selects the text form; untagged files default to choice
    // tables, which is what untagged fixtures have always been.
    match value.get("kind").and_then(serde_json::Value::as_str) {
        Some("text") => Ok(LocalPolicy::Text(
            TabularTextPolicy::from_json(&text).map_err(wrap)?,
        )),
        _ => Ok(LocalPolicy::Choice(
            TabularChoicePolicy::from_json(&text).map_err(wrap)?,
        )),
    }
}

/// Build the policy provider: a tabular file when given, otherwise the HTTP
/// endpoint; replay mode without a file serves recorded fixtures.
pub fn build_policy(config: &RunConfig) -> Result<Arc<dyn PolicyProvider>, CliError> {
    if config.mode == Mode::Replay && config.policy_file.is_none() {
        let dir = config.require_record_dir()?;
        return Ok(Arc::new(ReplayPolicy::new(replay_store(
            dir,
            POLICY_FIXTURE,
        )?)));
    }
    let store = if config.mode == Mode::Record {
        Some(record_store(config.require_record_dir()?, POLICY_FIXTURE)?)
    } else {
        None
    };
    if let Some(path) = &config.policy_file {
        return Ok(match (load_policy_file(path)?, store) {
            (LocalPolicy::Choice(p), Some(s)) => Arc::new(RecordingPolicy::new(p, s)),
            (LocalPolicy::Choice(p), None) => Arc::new(p),
            (LocalPolicy::Text(p), Some(s)) => Arc::new(RecordingPolicy::new(p, s)),
            (LocalPolicy::Text(p), None) => Arc::new(p),
        });
    }
    if let Some(base) = &config.api_base {
        let mut http = HttpPolicyConfig::new(base);
        http.api_key = config.api_key.clone();
        let policy = HttpPolicy::new(http);
        return Ok(match store {
            Some(s) => Arc::new(RecordingPolicy::new(policy, s)),
            None => Arc::new(policy),
        });
    }
    Err(CliError::Validation(
        "no policy source: pass --policy-file or --api-base, or use --mode replay with \
         --record-dir"
            .into(),
    ))
}

/// Build the LLM provider used by topic discovery and topic scoring.
pub fn build_llm(config: &RunConfig) -> Result<Arc<dyn LlmProvider>, CliError> {
    match config.mode {
        Mode::Replay => {
            let dir = config.require_record_dir()?;
            Ok(Arc::new(ReplayLlm::new(replay_store(dir, LLM_FIXTURE)?)))
        }
        Mode::Live | Mode::Record => {
            let base = config.api_base.as_ref().ok_or_else(|| {
                CliError::Validation(
                    "an LLM provider needs --api-base (or --mode replay with --record-dir)".into(),
                )
            })?;
            let model = config.model.as_ref().ok_or_else(|| {
                CliError::Validation("an LLM provider needs --model".into())
            })?;
            // Checked before any request goes out, so a missing credential
            // fails fast instead of after a network round trip.
            let key = config.api_key.clone().ok_or_else(|| {
                CliError::Credential(format!(
                    "no API key: pass --api-key or set {ENV_API_KEY}"
                ))
            })?;
            let mut llm_config = HttpLlmConfig::new(base, model);
            llm_config.api_key = Some(key);
            let llm = HttpLlm::new(llm_config);
            if config.mode == Mode::Record {
                let store = record_store(config.require_record_dir()?, LLM_FIXTURE)?;
                Ok(Arc::new(RecordingLlm::new(llm, store)))
            } else {
                Ok(Arc::new(llm))
            }
        }
    }
}

fn load_space(path: &Path) -> Result<Arc<AbstractionSpace>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
    let space: AbstractionSpace = serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    if space.labels().is_empty() {
        return Err(CliError::Validation(format!(
            "{}: abstraction space has no classes",
            path.display()
        )));
    }
    Ok(Arc::new(space))
}

fn write_source_tag(dir: &Path, tag: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Validation(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(ABSTRACTION_SOURCE);
    let body = serde_json::to_string_pretty(&serde_json::json!({ "tag": tag }))
        .expect("tag serializes");
    std::fs::write(&path, format!("{body}\n"))
        .map_err(|e| CliError::Validation(format!("cannot write {}: {e}", path.display())))
}

fn read_source_tag(dir: &Path) -> Result<String, CliError> {
    let path = dir.join(ABSTRACTION_SOURCE);
    let text = std::fs::read_to_string(&path).map_err(|e| {
        CliError::Validation(format!(
            "cannot read {} (record mode writes it; replay needs it to key requests): {e}",
            path.display()
        ))
    })?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    value
        .get("tag")
        .and_then(serde_json::Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| {
            CliError::Validation(format!("{}: missing \"tag\" field", path.display()))
        })
}

/// Build the abstraction provider from its spec string, when one is
/// configured. `annotation:` and `table:` providers are local; `topics:`
/// rides on the LLM provider and `http:` on the classify endpoint, both of
/// which honor record/replay.
pub fn build_abstraction(
    config: &RunConfig,
    scenes: Option<&Arc<SceneBundle>>,
) -> Result<Option<Arc<dyn AbstractionProvider>>, CliError> {
    let Some(spec) = &config.abstraction else {
        return Ok(None);
    };
    let (kind, arg) = spec.split_once(':').ok_or_else(|| {
        CliError::Validation(format!(
            "bad abstraction spec {spec:?}: expected annotation:<tag>, table:<file>, \
             topics:<space-file>, or http:<space-file>"
        ))
    })?;
    let provider: Arc<dyn AbstractionProvider> = match kind {
        "annotation" => {
            let bundle = scenes.ok_or_else(|| {
                CliError::Validation("annotation abstraction needs --scene-file".into())
            })?;
            Arc::new(
                AnnotationAbstraction::new(Arc::clone(bundle), arg)
                    .map_err(|e| CliError::Validation(e.to_string()))?,
            )
        }
        "table" => Arc::new(
            TableClassifier::load(Path::new(arg))
                .map_err(|e| CliError::Validation(e.to_string()))?,
        ),
        "topics" => {
            let space = load_space(Path::new(arg))?;
            Arc::new(TopicAbstraction::new(space, build_llm(config)?))
        }
        "http" => {
            let space = load_space(Path::new(arg))?;
            match config.mode {
                Mode::Replay => {
                    let dir = config.require_record_dir()?;
                    let source_tag = read_source_tag(dir)?;
                    Arc::new(ReplayAbstraction::new(
                        replay_store(dir, ABSTRACTION_FIXTURE)?,
                        space,
                        &source_tag,
                    ))
                }
                Mode::Live | Mode::Record => {
                    let base = config.api_base.as_ref().ok_or_else(|| {
                        CliError::Validation("http abstraction needs --api-base".into())
                    })?;
                    let mut http = HttpClassifierConfig::new(base);
                    http.api_key = config.api_key.clone();
                    let classifier = HttpClassifier::new(space, http);
                    if config.mode == Mode::Record {
                        let dir = config.require_record_dir()?;
                        write_source_tag(dir, &classifier.tag())?;
                        Arc::new(RecordingAbstraction::new(
                            classifier,
                            record_store(dir, ABSTRACTION_FIXTURE)?,
                        ))
                    } else {
                        Arc::new(classifier)
                    }
                }
            }
        }
        other => {
            return Err(CliError::Validation(format!(
                "unknown abstraction kind {other:?} in {spec:?}"
            )))
        }
    };
    Ok(Some(provider))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ProviderFlags;

    fn config_with(f: impl FnOnce(&mut RunConfig)) -> RunConfig {
        // Resolution reads the environment; build the default directly so
        // provider tests stay independent of ambient variables.
        let mut config = RunConfig {
            api_base: None,
            api_key: None,
            model: None,
            policy_file: None,
            scene_file: None,
            abstraction: None,
            posterior_draws: 16,
            continuation_samples: 8,
            seed: 0,
            mode: Mode::Live,
            record_dir: None,
        };
        f(&mut config);
        config
    }

    #[test]
    fn policy_requires_a_source() {
        let err = build_policy(&config_with(|_| {})).map(|_| ()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("--policy-file"));
    }

    #[test]
    fn policy_file_kind_tag_selects_the_text_form() {
        let dir = tempfile::tempdir().unwrap();
        let choice = dir.path().join("choice.json");
        std::fs::write(
            &choice,
            r#"{"kind": "choice", "states": {"s": {"choices": {"0": 0.5, "1": 0.5}}}}"#,
        )
        .unwrap();
        let text = dir.path().join("text.json");
        std::fs::write(
            &text,
            r#"{"kind": "text", "states": {"go": {"next": {"on": {"p": 1.0}}}}}"#,
        )
        .unwrap();
        let choice_policy =
            build_policy(&config_with(|c| c.policy_file = Some(choice.clone()))).unwrap();
        assert_eq!(choice_policy.tag(), "tabular-choice");
        let text_policy =
            build_policy(&config_with(|c| c.policy_file = Some(text.clone()))).unwrap();
        assert_eq!(text_policy.tag(), "tabular-text");
    }

    #[test]
    fn live_llm_without_credentials_is_a_fast_credential_error() {
        let config = config_with(|c| {
            c.api_base = Some("http://127.0.0.1:1".into());
            c.model = Some("m".into());
        });
        let err = build_llm(&config).map(|_| ()).unwrap_err();
        assert_eq!(err.exit_code(), 6, "must fail before any request: {err}");
    }

    #[test]
    fn abstraction_spec_must_parse() {
        let err = build_abstraction(&config_with(|c| c.abstraction = Some("bogus".into())), None)
            .map(|_| ())
            .unwrap_err();
        assert!(err.to_string().contains("bad abstraction spec"));
        let err = build_abstraction(
            &config_with(|c| c.abstraction = Some("annotation:physical_harm".into())),
            None,
        )
        .map(|_| ())
        .unwrap_err();
        assert!(err.to_string().contains("--scene-file"));
    }

    #[test]
    fn http_abstraction_replay_round_trips_the_source_tag() {
        let dir = tempfile::tempdir().unwrap();
        write_source_tag(dir.path(), "http-classifier:http://example").unwrap();
        assert_eq!(
            read_source_tag(dir.path()).unwrap(),
            "http-classifier:http://example"
        );
    }

    #[test]
    fn flags_struct_defaults_resolve() {
        // Guard the Default derive the resolver leans on.
        let flags = ProviderFlags::default();
        assert!(flags.config.is_none() && flags.mode.is_none());
    }
}
