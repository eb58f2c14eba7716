use std::process::ExitCode;

use birdscape::audio::AudioError;
use birdscape::crnn::CrnnError;
use birdscape::eval::EvalError;
use birdscape::features::FeatureError;
use birdscape::ingest::IngestError;
use birdscape::labelgrid::LabelError;
use birdscape::synth::SynthError;
use thiserror::Error;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad or inconsistent configuration (exit 2).
    #[error("config error: {0}")]
    Config(String),
    /// Missing or malformed input data (exit 3).
    #[error("data error: {0}")]
    Data(String),
    /// Numeric failure or anything else at run time (exit 4).
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 4,
        })
    }

    pub fn data(context: impl std::fmt::Display, e: impl std::fmt::Display) -> Self {
        CliError::Data(format!("{context}: {e}"))
    }
}

pub fn io(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

impl From<AudioError> for CliError {
    fn from(e: AudioError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Config(m) => CliError::Config(format!("synth: {m}")),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<LabelError> for CliError {
    fn from(e: LabelError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<FeatureError> for CliError {
    fn from(e: FeatureError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::InvalidThreshold(_) => CliError::Config(e.to_string()),
            EvalError::Io(_) => CliError::Runtime(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<CrnnError> for CliError {
    fn from(e: CrnnError) -> Self {
        match e {
            CrnnError::Config(_) | CrnnError::InvalidPreset(_) => CliError::Config(e.to_string()),
            CrnnError::DivergedLoss { .. } | CrnnError::AllMasked | CrnnError::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}
