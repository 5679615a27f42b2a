use std::fmt;

use slowfast::config::ConfigError;
use slowfast::grpo::GrpoError;
use slowfast::reasoning::EpisodeError;
use slowfast::synthetic_env::ExperimentError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Input,
    Backend,
    Numerical,
}

impl Kind {
    fn code(self) -> u8 {
        match self {
            Kind::Input => 2,
            Kind::Backend => 3,
            Kind::Numerical => 4,
        }
    }
}

/// An error tagged with the exit status it should produce.
#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub source: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.source)
    }
}

impl std::error::Error for Failure {}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<Failure>())
        .map(|f| f.kind.code())
        .unwrap_or(1)
}

pub fn tag(kind: Kind, err: impl Into<anyhow::Error>) -> anyhow::Error {
    Failure {
        kind,
        source: err.into(),
    }
    .into()
}

pub trait Tagged<T> {
    fn input(self) -> anyhow::Result<T>;
}

impl<T, E: Into<anyhow::Error>> Tagged<T> for Result<T, E> {
    fn input(self) -> anyhow::Result<T> {
        self.map_err(|e| tag(Kind::Input, e))
    }
}

pub fn config(err: ConfigError) -> anyhow::Error {
    tag(Kind::Input, err)
}

pub fn episode(err: EpisodeError) -> anyhow::Error {
    let kind = match err {
        EpisodeError::Backend { .. } => Kind::Backend,
        _ => Kind::Input,
    };
    tag(kind, err)
}

pub fn grpo(err: GrpoError) -> anyhow::Error {
    let kind = match &err {
        GrpoError::NonFiniteGradient { .. } | GrpoError::Policy(_) => Kind::Numerical,
        GrpoError::Episode(EpisodeError::Backend { .. }) => Kind::Backend,
        _ => Kind::Input,
    };
    tag(kind, err)
}

pub fn experiment(err: ExperimentError) -> anyhow::Error {
    match err {
        ExperimentError::Grpo(e) => grpo(e),
        ExperimentError::Episode(e) => episode(e),
        ExperimentError::Env(e) => tag(Kind::Input, e),
    }
}
