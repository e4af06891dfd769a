use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: [{0} x {1}] vs [{2} x {3}]", a.0, a.1, b.0, b.1)]
    ShapeMismatch {
        op: &'static str,
        a: (usize, usize),
        b: (usize, usize),
    },

    #[error("backward requires a scalar loss, got [{0} x {1}]", shape.0, shape.1)]
    NonScalarLoss { shape: (usize, usize) },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("degenerate scene bounds: extent {0:?} must be positive on every axis")]
    DegenerateBounds([f64; 3]),

    #[error("non-finite loss during {phase} at frame {frame} (total = {value})")]
    NonFiniteLoss {
        phase: &'static str,
        frame: usize,
        value: f64,
    },

    #[error("mapping window is empty")]
    EmptyWindow,

    #[error("config error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("mesh error: {0}")]
    Mesh(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn shape(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Self {
        Error::ShapeMismatch { op, a, b }
    }
}
