use thiserror::Error;

pub type Result<T, E = CflError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CflError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this graph; reset it first")]
    GraphConsumed,

    #[error("layer index {index} out of range 1..={layers}")]
    LayerIndex { index: usize, layers: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("length mismatch: {0}")]
    Length(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("{0} has no global Lipschitz bound")]
    NotGloballyLipschitz(&'static str),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<CflError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CflError {
    pub fn context(self, context: impl Into<String>) -> Self {
        CflError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub trait ResultExt<T> {
    fn context(self, context: impl FnOnce() -> String) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn context(self, context: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| e.context(context()))
    }
}
