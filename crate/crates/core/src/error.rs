use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoaError {
    #[error(transparent)]
    Autodiff(#[from] coa_autodiff::AutodiffError),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid action: {0}")]
    InvalidAction(String),

    #[error("expert failed on seed {seed}: {reason}")]
    ExpertFailure { seed: u64, reason: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("dataset record {index}: {reason}")]
    Record { index: usize, reason: String },

    #[error("chain target: {0}")]
    ChainTarget(String),

    #[error("model: {0}")]
    Model(String),

    #[error("loss: {0}")]
    Loss(String),

    #[error("training aborted at iteration {iteration}: non-finite loss (total {total}, act {act}, lat {lat}, stop {stop})")]
    NonFiniteLoss {
        iteration: u64,
        total: f64,
        act: f64,
        lat: f64,
        stop: f64,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("ensemble: no chain aligns with step {0}")]
    NoAlignedEntry(usize),

    #[error("analysis: {0}")]
    Analysis(String),

    #[error("config: {0}")]
    Config(String),
}

impl CoaError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = CoaError> = std::result::Result<T, E>;
