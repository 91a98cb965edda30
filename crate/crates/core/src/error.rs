use thiserror::Error;

use crate::codec::CodecError;
use crate::container::ContainerError;
use crate::gaussian::GaussianError;
use crate::metrics::MetricsError;
use crate::motion::MotionError;
use crate::quant::QuantError;
use crate::rate::RateError;
use crate::render::RenderError;
use crate::splat_io::SplatIoError;
use crate::synth::SynthError;

/// Any library error, tagged with the module it came from.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
    #[error(transparent)]
    SplatIo(#[from] SplatIoError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Rate(#[from] RateError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("config: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn module(&self) -> &'static str {
        match self {
            Error::Gaussian(_) | Error::SplatIo(_) | Error::Synth(_) | Error::Input(_) => "gaussian-core",
            Error::Motion(_) => "motion-group",
            Error::Render(_) => "splat-render",
            Error::Metrics(_) => "quality-metrics",
            Error::Rate(_) => "rate-model",
            Error::Quant(_) => "quant-pack",
            Error::Codec(_) => "plane-codec",
            Error::Container(ContainerError::Payload { .. }) => "plane-codec",
            Error::Container(_) | Error::Io(_) => "container",
            Error::Config(_) => "cli",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
