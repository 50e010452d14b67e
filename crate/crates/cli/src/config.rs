//! Run configuration: one resolved view of flags, config file, and
//! environment. Precedence is flags over config file over `ACF_API_BASE` /
//! `ACF_API_KEY` over built-in defaults, and the resolved result is hashed
//! (credential redacted) into every output.

use std::path::{Path, PathBuf};

use acf_core::engine::QueryBudget;
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::report;

pub const ENV_API_BASE: &str = "ACF_API_BASE";
pub const ENV_API_KEY: &str = "ACF_API_KEY";

/// Provider mode. `record` and `replay` need `--record-dir`; `replay` locks
/// the run offline, rejecting any endpoint configured via flag or file (an
/// ambient `ACF_API_BASE` is quietly dropped instead, so a replay run still
/// works in an environment that exports one).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Live,
    Record,
    Replay,
}

/// Provider and budget flags shared by the subcommands.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct ProviderFlags {
    /// JSON config file; flags override its values, which override the
    /// ACF_API_BASE / ACF_API_KEY environment.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Base URL of the OpenAI-compatible endpoint.
    #[arg(long, value_name = "URL")]
    pub api_base: Option<String>,

    /// Bearer credential for remote endpoints.
    #[arg(long, value_name = "KEY")]
    pub api_key: Option<String>,

    /// Model identifier; doubles as the default model configuration on
    /// states built from inline flags.
    #[arg(long)]
    pub model: Option<String>,

    /// Tabular policy file: choice tables (`"kind": "choice"`) or
    /// continuation trees (`"kind": "text"`).
    #[arg(long, value_name = "FILE")]
    pub policy_file: Option<PathBuf>,

    /// Scene bundle file.
    #[arg(long, value_name = "FILE")]
    pub scene_file: Option<PathBuf>,

    /// Abstraction spec: `annotation:<tag>`, `table:<file>`,
    /// `topics:<space-file>`, or `http:<space-file>`.
    #[arg(long, value_name = "SPEC")]
    pub abstraction: Option<String>,

    /// Posterior noise draws per query.
    #[arg(long, value_name = "N")]
    pub posterior_draws: Option<usize>,

    /// Continuation samples per query.
    #[arg(long, value_name = "N")]
    pub continuation_samples: Option<usize>,

    /// Base RNG seed.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Provider mode.
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,

    /// Fixture directory for record/replay.
    #[arg(long, value_name = "DIR")]
    pub record_dir: Option<PathBuf>,
}

/// Config-file form of the flags: same field names, all optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    api_base: Option<String>,
    api_key: Option<String>,
    model: Option<String>,
    policy_file: Option<PathBuf>,
    scene_file: Option<PathBuf>,
    abstraction: Option<String>,
    posterior_draws: Option<usize>,
    continuation_samples: Option<usize>,
    seed: Option<u64>,
    mode: Option<Mode>,
    record_dir: Option<PathBuf>,
}

/// Where the effective `api_base` came from. Replay mode rejects explicit
/// sources and drops the ambient environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ApiBaseSource {
    Unset,
    Env,
    File,
    Flag,
}

/// The fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub api_base: Option<String>,
    pub api_key: Option<String>,
    pub model: Option<String>,
    pub policy_file: Option<PathBuf>,
    pub scene_file: Option<PathBuf>,
    pub abstraction: Option<String>,
    pub posterior_draws: usize,
    pub continuation_samples: usize,
    pub seed: u64,
    pub mode: Mode,
    pub record_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Resolve flags > config file > environment > defaults, then enforce
    /// the mode invariants.
    pub fn resolve(flags: &ProviderFlags) -> Result<Self, CliError> {
        let mut api_base = None;
        let mut base_source = ApiBaseSource::Unset;
        if let Ok(v) = std::env::var(ENV_API_BASE) {
            if !v.is_empty() {
                api_base = Some(v);
                base_source = ApiBaseSource::Env;
            }
        }
        let mut api_key = std::env::var(ENV_API_KEY).ok().filter(|v| !v.is_empty());

        let file = match &flags.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    CliError::Validation(format!("cannot read config {}: {e}", path.display()))
                })?;
                serde_json::from_str::<FileConfig>(&text).map_err(|e| {
                    CliError::Validation(format!("config {}: {e}", path.display()))
                })?
            }
            None => FileConfig::default(),
        };

        if let Some(v) = file.api_base {
            api_base = Some(v);
            base_source = ApiBaseSource::File;
        }
        if let Some(v) = &flags.api_base {
            api_base = Some(v.clone());
            base_source = ApiBaseSource::Flag;
        }
        if let Some(v) = file.api_key {
            api_key = Some(v);
        }
        if let Some(v) = &flags.api_key {
            api_key = Some(v.clone());
        }

        let mode = flags.mode.or(file.mode).unwrap_or_default();
        let config = Self {
            api_base,
            api_key,
            model: flags.model.clone().or(file.model),
            policy_file: flags.policy_file.clone().or(file.policy_file),
            scene_file: flags.scene_file.clone().or(file.scene_file),
            abstraction: flags.abstraction.clone().or(file.abstraction),
            posterior_draws: flags
                .posterior_draws
                .or(file.posterior_draws)
                .unwrap_or_else(|| QueryBudget::default().posterior_draws),
            continuation_samples: flags
                .continuation_samples
                .or(file.continuation_samples)
                .unwrap_or_else(|| QueryBudget::default().continuation_samples),
            seed: flags.seed.or(file.seed).unwrap_or(0),
            mode,
            record_dir: flags.record_dir.clone().or(file.record_dir),
        };
        config.enforce_invariants(base_source)
    }

    fn enforce_invariants(mut self, base_source: ApiBaseSource) -> Result<Self, CliError> {
        self.budget().validate()?;
        if matches!(self.mode, Mode::Record | Mode::Replay) && self.record_dir.is_none() {
            return Err(CliError::Validation(
                "--record-dir is required in record and replay modes".into(),
            ));
        }
        if self.mode == Mode::Replay {
            match base_source {
                ApiBaseSource::Flag | ApiBaseSource::File => {
                    return Err(CliError::Validation(
                        "replay mode forbids live endpoints; remove api_base from the flags \
                         or config file"
                            .into(),
                    ));
                }
                // The ambient environment is not an expressed intent to go
                // live, so it is dropped rather than rejected.
                ApiBaseSource::Env => self.api_base = None,
                ApiBaseSource::Unset => {}
            }
        }
        Ok(self)
    }

    pub fn budget(&self) -> QueryBudget {
        QueryBudget {
            posterior_draws: self.posterior_draws,
            continuation_samples: self.continuation_samples,
        }
    }

    /// Model configuration stamped on states built from inline flags.
    pub fn model_config(&self) -> String {
        self.model.clone().unwrap_or_else(|| "default".into())
    }

    pub fn require_record_dir(&self) -> Result<&Path, CliError> {
        self.record_dir
            .as_deref()
            .ok_or_else(|| CliError::Validation("this mode requires --record-dir".into()))
    }

    /// Hash of the resolved configuration with the credential redacted to a
    /// presence bit. Stamped into every output.
    pub fn hash(&self) -> String {
        let as_path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let value = serde_json::json!({
            "api_base": self.api_base,
            "api_key_set": self.api_key.is_some(),
            "model": self.model,
            "policy_file": as_path(&self.policy_file),
            "scene_file": as_path(&self.scene_file),
            "abstraction": self.abstraction,
            "posterior_draws": self.posterior_draws,
            "continuation_samples": self.continuation_samples,
            "seed": self.seed,
            "mode": self.mode,
            "record_dir": as_path(&self.record_dir),
        });
        report::sha256_hex(acf_core::fixtures::canonical_json(&value).as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags() -> ProviderFlags {
        ProviderFlags::default()
    }

    // The environment is process-global, so tests that touch ACF_API_BASE /
    // ACF_API_KEY serialize behind one lock and restore the prior state.
    fn with_env(vars: &[(&str, Option<&str>)], body: impl FnOnce()) {
        use std::sync::Mutex;
        static LOCK: Mutex<()> = Mutex::new(());
        let _guard = LOCK.lock().unwrap();
        let saved: Vec<(String, Option<String>)> = vars
            .iter()
            .map(|(k, _)| ((*k).to_string(), std::env::var(k).ok()))
            .collect();
        for (k, v) in vars {
            match v {
                Some(v) => std::env::set_var(k, v),
                None => std::env::remove_var(k),
            }
        }
        body();
        for (k, v) in saved {
            match v {
                Some(v) => std::env::set_var(&k, v),
                None => std::env::remove_var(&k),
            }
        }
    }

    #[test]
    fn defaults_match_the_engine_budget() {
        with_env(&[(ENV_API_BASE, None), (ENV_API_KEY, None)], || {
            let config = RunConfig::resolve(&flags()).unwrap();
            assert_eq!(config.posterior_draws, 1024);
            assert_eq!(config.continuation_samples, 256);
            assert_eq!(config.seed, 0);
            assert_eq!(config.mode, Mode::Live);
            assert!(config.api_base.is_none());
        });
    }

    #[test]
    fn flags_override_file_which_overrides_env() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, r#"{"api_base": "http://file", "seed": 7}"#).unwrap();
        with_env(
            &[(ENV_API_BASE, Some("http://env")), (ENV_API_KEY, None)],
            || {
                let mut f = flags();
                f.config = Some(path.clone());
                let config = RunConfig::resolve(&f).unwrap();
                assert_eq!(config.api_base.as_deref(), Some("http://file"));
                assert_eq!(config.seed, 7);

                f.api_base = Some("http://flag".into());
                f.seed = Some(11);
                let config = RunConfig::resolve(&f).unwrap();
                assert_eq!(config.api_base.as_deref(), Some("http://flag"));
                assert_eq!(config.seed, 11);
            },
        );
    }

    #[test]
    fn replay_rejects_explicit_endpoints_and_drops_ambient_ones() {
        with_env(&[(ENV_API_BASE, None), (ENV_API_KEY, None)], || {
            let mut f = flags();
            f.mode = Some(Mode::Replay);
            f.record_dir = Some(PathBuf::from("fixtures"));
            f.api_base = Some("http://live".into());
            let err = RunConfig::resolve(&f).unwrap_err();
            assert_eq!(err.exit_code(), 2);
        });
        with_env(
            &[(ENV_API_BASE, Some("http://ambient")), (ENV_API_KEY, None)],
            || {
                let mut f = flags();
                f.mode = Some(Mode::Replay);
                f.record_dir = Some(PathBuf::from("fixtures"));
                let config = RunConfig::resolve(&f).unwrap();
                assert!(config.api_base.is_none(), "ambient endpoint must be dropped");
            },
        );
    }

    #[test]
    fn record_and_replay_require_a_fixture_directory() {
        with_env(&[(ENV_API_BASE, None), (ENV_API_KEY, None)], || {
            let mut f = flags();
            f.mode = Some(Mode::Record);
            let err = RunConfig::resolve(&f).unwrap_err();
            assert!(err.to_string().contains("--record-dir"));
        });
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, r#"{"api_bse": "http://typo"}"#).unwrap();
        with_env(&[(ENV_API_BASE, None), (ENV_API_KEY, None)], || {
            let mut f = flags();
            f.config = Some(path.clone());
            let err = RunConfig::resolve(&f).unwrap_err();
            assert_eq!(err.exit_code(), 2);
            assert!(err.to_string().contains("api_bse"));
        });
    }

    #[test]
    fn hash_redacts_the_credential_but_tracks_its_presence() {
        with_env(&[(ENV_API_BASE, None), (ENV_API_KEY, None)], || {
            let base = RunConfig::resolve(&flags()).unwrap();
            let mut with_key = base.clone();
            with_key.api_key = Some("secret".into());
            let mut other_key = base.clone();
            other_key.api_key = Some("different".into());
            assert_ne!(base.hash(), with_key.hash(), "presence must change the hash");
            assert_eq!(
                with_key.hash(),
                other_key.hash(),
                "the credential value must not leak into the hash"
            );
        });
    }

    #[test]
    fn zero_budgets_fail_fast() {
        with_env(&[(ENV_API_BASE, None), (ENV_API_KEY, None)], || {
            let mut f = flags();
            f.posterior_draws = Some(0);
            let err = RunConfig::resolve(&f).unwrap_err();
            assert_eq!(err.exit_code(), 2);
        });
    }
}
