//! Failure classification: every error funnels into one of the exit-code
//! classes documented in `--help`, so operators can branch on the process
//! status without parsing messages.

use std::fmt;

use acf_core::abstraction::AbstractionError;
use acf_core::engine::EngineError;
use acf_core::envsim::SceneError;
use acf_core::fixtures::FixtureError;
use acf_core::metrics::MetricsError;
use acf_core::policy::PolicyError;

/// One failure, tagged by the stage that produced it.
#[derive(Debug)]
pub enum CliError {
    /// A verification or acceptance check ran to completion and failed.
    Check(String),
    /// Bad flags, unreadable local files, malformed configuration.
    Validation(String),
    /// A remote or recorded provider failed to answer.
    Provider(String),
    /// Inference failed on a well-formed query.
    Inference(String),
    /// A provider answered, but the response could not be parsed.
    Parse(String),
    /// Credentials were missing or rejected.
    Credential(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Check(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Provider(_) => 3,
            CliError::Inference(_) => 4,
            CliError::Parse(_) => 5,
            CliError::Credential(_) => 6,
        }
    }

    fn class(&self) -> &'static str {
        match self {
            CliError::Check(_) => "check failed",
            CliError::Validation(_) => "validation",
            CliError::Provider(_) => "provider",
            CliError::Inference(_) => "inference",
            CliError::Parse(_) => "parse",
            CliError::Credential(_) => "credential",
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (CliError::Check(msg)
        | CliError::Validation(msg)
        | CliError::Provider(msg)
        | CliError::Inference(msg)
        | CliError::Parse(msg)
        | CliError::Credential(msg)) = self;
        write!(f, "{}: {msg}", self.class())
    }
}

impl std::error::Error for CliError {}

/// Classify a policy failure without consuming it, returning the matching
/// constructor. Tuple-variant constructors coerce to `fn(String) -> CliError`.
fn policy_ctor(e: &PolicyError) -> fn(String) -> CliError {
    match e {
        PolicyError::Auth(_) => CliError::Credential,
        PolicyError::Transport(_) | PolicyError::Api { .. } | PolicyError::Replay(_) => {
            CliError::Provider
        }
        PolicyError::MalformedResponse(_) => CliError::Parse,
        PolicyError::InvalidChoiceLabel(_)
        | PolicyError::UnknownChoiceLabel { .. }
        | PolicyError::UnknownState(_)
        | PolicyError::UnknownModelConfig(_)
        | PolicyError::EmptyPrompt
        | PolicyError::Unsupported(_) => CliError::Validation,
        PolicyError::NoReplacementCandidate
        | PolicyError::EmptyContinuation(_)
        | PolicyError::Estimation(_)
        | PolicyError::Dist(_) => CliError::Inference,
    }
}

fn abstraction_ctor(e: &AbstractionError) -> fn(String) -> CliError {
    match e {
        AbstractionError::Auth(_) => CliError::Credential,
        AbstractionError::Transport(_)
        | AbstractionError::Api { .. }
        | AbstractionError::Replay(_) => CliError::Provider,
        AbstractionError::Malformed(_)
        | AbstractionError::ParseFailure { .. }
        | AbstractionError::EmptyTopicList => CliError::Parse,
        AbstractionError::InvalidSpace(_)
        | AbstractionError::SpaceMismatch { .. }
        | AbstractionError::ExactModeUnavailable => CliError::Validation,
        AbstractionError::Unscorable(_)
        | AbstractionError::NoSamples
        | AbstractionError::Dist(_) => CliError::Inference,
        AbstractionError::Policy(p) => policy_ctor(p),
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        policy_ctor(&e)(e.to_string())
    }
}

impl From<AbstractionError> for CliError {
    fn from(e: AbstractionError) -> Self {
        abstraction_ctor(&e)(e.to_string())
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        let ctor = match &e {
            EngineError::MissingObservation(_)
            | EngineError::MissingAbstraction
            | EngineError::MissingScenes(_)
            | EngineError::UnknownChoice { .. }
            | EngineError::UnknownClass { .. }
            | EngineError::SpaceMismatch { .. }
            | EngineError::InvalidBudget(_)
            | EngineError::Scene(_) => CliError::Validation,
            EngineError::ZeroProbabilityObservation { .. }
            | EngineError::UnabduciblePosition { .. }
            | EngineError::Estimation(_)
            | EngineError::Dist(_) => CliError::Inference,
            EngineError::Policy(p) => policy_ctor(p),
            EngineError::Abstraction(a) => abstraction_ctor(a),
        };
        ctor(e.to_string())
    }
}

impl From<SceneError> for CliError {
    fn from(e: SceneError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<acf_core::dist::DistError> for CliError {
    fn from(e: acf_core::dist::DistError) -> Self {
        CliError::Inference(e.to_string())
    }
}

impl From<FixtureError> for CliError {
    fn from(e: FixtureError) -> Self {
        CliError::Provider(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        let ctor = match &e {
            MetricsError::Auth(_) => CliError::Credential,
            MetricsError::Transport(_) | MetricsError::Api { .. } => CliError::Provider,
            MetricsError::Malformed(_) => CliError::Parse,
            MetricsError::Empty(_)
            | MetricsError::LengthMismatch { .. }
            | MetricsError::SpaceMismatch { .. }
            | MetricsError::UnknownClass { .. }
            | MetricsError::DegenerateEmbedding(_)
            | MetricsError::Dist(_) => CliError::Inference,
        };
        ctor(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct_and_stable() {
        let errors = [
            CliError::Check("c".into()),
            CliError::Validation("v".into()),
            CliError::Provider("p".into()),
            CliError::Inference("i".into()),
            CliError::Parse("x".into()),
            CliError::Credential("k".into()),
        ];
        let codes: Vec<i32> = errors.iter().map(CliError::exit_code).collect();
        assert_eq!(codes, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn auth_failures_map_to_credential_wherever_they_surface() {
        let direct = CliError::from(PolicyError::Auth("401".into()));
        assert_eq!(direct.exit_code(), 6);
        let nested = CliError::from(EngineError::Policy(PolicyError::Auth("401".into())));
        assert_eq!(nested.exit_code(), 6);
        let via_abstraction = CliError::from(EngineError::Abstraction(
            AbstractionError::Policy(PolicyError::Auth("401".into())),
        ));
        assert_eq!(via_abstraction.exit_code(), 6);
    }

    #[test]
    fn engine_validation_and_inference_split() {
        let validation = CliError::from(EngineError::MissingAbstraction);
        assert_eq!(validation.exit_code(), 2);
        let inference = CliError::from(EngineError::UnabduciblePosition {
            position: 3,
            token: "the".into(),
        });
        assert_eq!(inference.exit_code(), 4);
    }

    #[test]
    fn display_carries_class_and_message() {
        let e = CliError::Provider("endpoint down".into());
        assert_eq!(e.to_string(), "provider: endpoint down");
    }
}
