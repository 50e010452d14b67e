//! `acf discover`: elicit an abstraction space from a pool of behavior
//! samples and write it in the form the `topics:` abstraction loads.
//!
//! The command drives one LLM surface, so it honors the full record/replay
//! stack: a recorded discovery session replays offline byte for byte.

use std::path::{Path, PathBuf};

use acf_core::abstraction::{discover_topics, DiscoveryConfig};
use clap::Args;
use serde::Deserialize;

use crate::config::{ProviderFlags, RunConfig};
use crate::error::CliError;
use crate::{providers, report};

/// Discover an abstraction space from behavior samples.
#[derive(Debug, Args)]
pub struct DiscoverArgs {
    #[command(flatten)]
    pub provider: ProviderFlags,

    /// JSON file holding the sample pool: {"samples": ["...", ...]}.
    #[arg(long, value_name = "FILE")]
    pub samples_file: PathBuf,

    /// Output file for the discovered space (stdout when omitted).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,

    /// Re-prompts allowed after a malformed discovery reply.
    #[arg(long, value_name = "N")]
    pub max_reprompts: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SamplesFile {
    samples: Vec<String>,
}

fn load_samples(path: &Path) -> Result<Vec<String>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
    let file: SamplesFile = serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    if file.samples.is_empty() {
        return Err(CliError::Validation(format!(
            "{}: the sample pool is empty",
            path.display()
        )));
    }
    Ok(file.samples)
}

pub fn run(args: &DiscoverArgs) -> Result<(), CliError> {
    let config = RunConfig::resolve(&args.provider)?;
    run_with(args, &config)
}

/// The command body after configuration resolution; split out so tests can
/// inject a configuration without touching process environment.
pub(crate) fn run_with(args: &DiscoverArgs, config: &RunConfig) -> Result<(), CliError> {
    let samples = load_samples(&args.samples_file)?;
    let llm = providers::build_llm(config)?;
    let discovery = DiscoveryConfig {
        max_reprompts: args
            .max_reprompts
            .unwrap_or(DiscoveryConfig::default().max_reprompts),
        ..DiscoveryConfig::default()
    };
    let space = discover_topics(&samples, llm.as_ref(), &discovery)?;

    let mut inputs: Vec<&Path> = vec![args.samples_file.as_path()];
    if let Some(path) = &args.provider.config {
        inputs.push(path.as_path());
    }
    let replay_inputs = providers::replay_inputs(config);
    inputs.extend(replay_inputs.iter().map(PathBuf::as_path));

    let mut meta = report::meta_object(&config.hash(), &[]);
    meta["fixture_hashes"] = serde_json::json!(report::fixture_hashes(inputs)?);
    let mut value = serde_json::to_value(&space).expect("space serializes");
    value
        .as_object_mut()
        .expect("space serializes to an object")
        .insert("_meta".into(), meta);
    let mut text = serde_json::to_string_pretty(&value).expect("serializable");
    text.push('\n');
    report::write_text(args.out.as_deref(), &text)?;

    if let Some(out) = &args.out {
        println!("discovered {} classes → {}", space.len(), out.display());
        for class in space.classes() {
            println!("  {}: {}", class.label, class.description);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use acf_core::abstraction::{AbstractionSpace, MockLlm, RecordingLlm};
    use acf_core::fixtures::RecordStore;

    use crate::config::Mode;

    fn base_config() -> RunConfig {
        RunConfig {
            api_base: None,
            api_key: None,
            model: None,
            policy_file: None,
            scene_file: None,
            abstraction: None,
            posterior_draws: 64,
            continuation_samples: 8,
            seed: 0,
            mode: Mode::Live,
            record_dir: None,
        }
    }

    fn write_samples(dir: &Path) -> PathBuf {
        let path = dir.join("samples.json");
        std::fs::write(
            &path,
            serde_json::json!({"samples": [
                "I step back from the ledge and wait.",
                "I rush the guard before he can shout.",
                "I slip out through the side door.",
            ]})
            .to_string(),
        )
        .unwrap();
        path
    }

    #[test]
    fn a_recorded_discovery_session_replays_offline() {
        let dir = tempfile::tempdir().unwrap();
        let samples_path = write_samples(dir.path());
        let record_dir = dir.path().join("fixtures");

        // Record: drive the real discovery routine against a scripted LLM,
        // capturing the exchange the way `--mode record` would.
        let store =
            Arc::new(RecordStore::open(&record_dir.join("llm.jsonl")).unwrap());
        let mock = MockLlm::new();
        mock.push_completion(
            "[(\"Evasion\", \"leaving or avoiding the threat\"), \
              (\"Aggression\", \"direct physical confrontation\")]",
        );
        let recording = RecordingLlm::new(mock, store);
        let samples = load_samples(&samples_path).unwrap();
        let expected =
            discover_topics(&samples, &recording, &DiscoveryConfig::default()).unwrap();

        // Replay: the command reproduces the same space with no LLM at all.
        let out = dir.path().join("space.json");
        let args = DiscoverArgs {
            provider: ProviderFlags::default(),
            samples_file: samples_path,
            out: Some(out.clone()),
            max_reprompts: None,
        };
        let config = RunConfig {
            mode: Mode::Replay,
            record_dir: Some(record_dir),
            ..base_config()
        };
        run_with(&args, &config).unwrap();

        let written: AbstractionSpace =
            serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
        assert_eq!(written, expected);
        assert_eq!(written.labels(), vec!["Evasion", "Aggression", "Other"]);
        assert!(written.includes_other());

        // The written file is exactly what the `topics:` loader expects, and
        // its provenance block names the replayed fixture.
        let raw: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
        assert!(raw["_meta"]["fixture_hashes"]
            .as_object()
            .unwrap()
            .keys()
            .any(|k| k.ends_with("llm.jsonl")));
    }

    #[test]
    fn live_discovery_without_credentials_fails_fast() {
        let dir = tempfile::tempdir().unwrap();
        let samples_path = write_samples(dir.path());
        let args = DiscoverArgs {
            provider: ProviderFlags::default(),
            samples_file: samples_path,
            out: None,
            max_reprompts: None,
        };
        let config = RunConfig {
            api_base: Some("http://127.0.0.1:9".into()),
            model: Some("test-model".into()),
            ..base_config()
        };
        let err = run_with(&args, &config).unwrap_err();
        assert_eq!(err.exit_code(), 6, "{err}");
    }

    #[test]
    fn sample_pool_problems_are_validation_errors() {
        let dir = tempfile::tempdir().unwrap();
        let args = DiscoverArgs {
            provider: ProviderFlags::default(),
            samples_file: dir.path().join("missing.json"),
            out: None,
            max_reprompts: None,
        };
        assert_eq!(run_with(&args, &base_config()).unwrap_err().exit_code(), 2);

        let empty = dir.path().join("empty.json");
        std::fs::write(&empty, r#"{"samples": []}"#).unwrap();
        let args = DiscoverArgs {
            samples_file: empty,
            ..args
        };
        assert_eq!(run_with(&args, &base_config()).unwrap_err().exit_code(), 2);
    }
}
