use std::fmt;
use std::process::ExitCode;

use sarcd_core::Error;

/// Process exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage = 2,
    Data = 3,
    Numeric = 4,
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub stage: &'static str,
    pub message: String,
}

impl Failure {
    pub fn new(kind: Kind, stage: &'static str, message: impl Into<String>) -> Self {
        Self { kind, stage, message: message.into() }
    }

    pub fn usage(stage: &'static str, message: impl Into<String>) -> Self {
        Self::new(Kind::Usage, stage, message)
    }

    pub fn data(stage: &'static str, message: impl Into<String>) -> Self {
        Self::new(Kind::Data, stage, message)
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.kind as u8)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.stage, self.message)
    }
}

pub fn classify(e: &Error) -> Kind {
    match e {
        Error::InvalidParam(_) => Kind::Usage,
        Error::NonFinite(_) | Error::Tensor(_) => Kind::Numeric,
        _ => Kind::Data,
    }
}

pub type CliResult<T> = Result<T, Failure>;

/// Attach a stage name to core errors.
pub trait Stage<T> {
    fn stage(self, stage: &'static str) -> CliResult<T>;
    /// Like [`Stage::stage`] but with a fixed exit class.
    fn stage_as(self, stage: &'static str, kind: Kind) -> CliResult<T>;
}

impl<T> Stage<T> for sarcd_core::Result<T> {
    fn stage(self, stage: &'static str) -> CliResult<T> {
        self.map_err(|e| Failure::new(classify(&e), stage, e.to_string()))
    }

    fn stage_as(self, stage: &'static str, kind: Kind) -> CliResult<T> {
        self.map_err(|e| Failure::new(kind, stage, e.to_string()))
    }
}

impl<T> Stage<T> for std::io::Result<T> {
    fn stage(self, stage: &'static str) -> CliResult<T> {
        self.map_err(|e| Failure::data(stage, e.to_string()))
    }

    fn stage_as(self, stage: &'static str, kind: Kind) -> CliResult<T> {
        self.map_err(|e| Failure::new(kind, stage, e.to_string()))
    }
}
