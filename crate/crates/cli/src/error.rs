use std::fmt;
use std::process::ExitCode;

use gmner_agent::config::ConfigError;
use gmner_agent::grpo::GrpoError;
use gmner_agent::jsonl::JsonlError;
use gmner_agent::metrics::MetricsError;
use gmner_agent::policy::PolicyError;
use gmner_agent::rollout::RolloutError;
use gmner_agent::tagger::TaggerError;
use gmner_agent::toolgw::{GatewayError, ToolError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// Bad flags, config file, spec strings or paths.
    Config,
    /// A policy endpoint or search backend failed.
    Upstream,
    /// Input data or outputs failed a check.
    Validation,
}

impl Kind {
    pub fn code(self) -> u8 {
        match self {
            Kind::Config => 2,
            Kind::Upstream => 3,
            Kind::Validation => 4,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn config(m: impl fmt::Display) -> Self {
        CliError {
            kind: Kind::Config,
            message: m.to_string(),
        }
    }

    pub fn upstream(m: impl fmt::Display) -> Self {
        CliError {
            kind: Kind::Upstream,
            message: m.to_string(),
        }
    }

    pub fn validation(m: impl fmt::Display) -> Self {
        CliError {
            kind: Kind::Validation,
            message: m.to_string(),
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.kind.code())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::config(e)
    }
}

impl From<JsonlError> for CliError {
    fn from(e: JsonlError) -> Self {
        match e {
            JsonlError::Io { .. } => CliError::config(e),
            JsonlError::Parse { .. } => CliError::validation(e),
        }
    }
}

fn policy_kind(e: &PolicyError) -> Kind {
    match e {
        PolicyError::Endpoint { .. } | PolicyError::EndpointTimeout { .. } | PolicyError::FixtureExhausted { .. } => {
            Kind::Upstream
        }
        PolicyError::Fixture(_) | PolicyError::InvalidSpec(_) => Kind::Config,
        PolicyError::EmptyHistory | PolicyError::ZeroSamples => Kind::Validation,
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        CliError {
            kind: policy_kind(&e),
            message: e.to_string(),
        }
    }
}

fn tool_kind(e: &ToolError) -> Kind {
    match e {
        ToolError::Unavailable(_) => Kind::Upstream,
        ToolError::Rejected(_) => Kind::Validation,
    }
}

impl From<ToolError> for CliError {
    fn from(e: ToolError) -> Self {
        CliError {
            kind: tool_kind(&e),
            message: e.to_string(),
        }
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::Bind { .. } => CliError::config(e),
            GatewayError::EmptyQuery => CliError::validation(e),
            GatewayError::Backend(_) => CliError::upstream(e),
        }
    }
}

impl From<RolloutError> for CliError {
    fn from(e: RolloutError) -> Self {
        let kind = match &e {
            RolloutError::InvalidConfig(_) | RolloutError::GroupTooSmall(_) => Kind::Config,
            RolloutError::PolicyUnavailable { source, .. } => policy_kind(source),
            RolloutError::ToolUnavailable { source, .. } => tool_kind(source),
        };
        CliError {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<TaggerError> for CliError {
    fn from(e: TaggerError) -> Self {
        let kind = match &e {
            TaggerError::EmptySamples | TaggerError::InvalidThreshold(_) => Kind::Config,
            TaggerError::Policy { source, .. } => policy_kind(source),
        };
        CliError {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<GrpoError> for CliError {
    fn from(e: GrpoError) -> Self {
        CliError::validation(e)
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::InvalidBox(_) => CliError::validation(e),
            MetricsError::MissingTrainCorpus | MetricsError::UnknownTask(_) => CliError::config(e),
        }
    }
}
