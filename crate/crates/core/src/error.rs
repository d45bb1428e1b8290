//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not symmetric (max asymmetry {max_asym:e} exceeds {tol:e})")]
    NotSymmetric { max_asym: f64, tol: f64 },
    #[error("matrix could not be factorized even with ridge up to {max_ridge:e}")]
    NotFactorizable { max_ridge: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset has no positive bags; pi and mu1 are not estimable")]
    NoPositiveBags,
    #[error("dataset has no positive instances")]
    NoPositiveInstances,
    #[error("dataset has no negative instances")]
    NoNegativeInstances,
    #[error("instance {instance_id} in bag {bag_id} has no observed label")]
    UnlabeledInstance { bag_id: String, instance_id: String },
    #[error("degenerate responsibilities: total weight {total:e} too small to update means")]
    DegenerateResponsibilities { total: f64 },
    #[error("EM initialization failed: {0}")]
    InitFailure(String),
    #[error("subsample indicators inconsistent with labels: {0}")]
    InconsistentSubsample(String),
    #[error("instance {instance_id} in bag {bag_id} was subsampled but no label is available to reveal")]
    MissingTruthLabel { bag_id: String, instance_id: String },
    #[error("pilot subset too small: {0}")]
    PilotTooSmall(String),
    #[error("target subsampling fraction {target} unreachable: mean gamma range is [{lo}, {hi}]")]
    TargetUnreachable { target: f64, lo: f64, hi: f64 },
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("spatial kernel of size {0} exceeds the factorization guard (5000)")]
    ConfigTooLarge(usize),
    #[error("kernel matrix not factorizable even with ridge")]
    KernelNotFactorizable,
    #[error("{path}:{line}: parse error: {msg}")]
    Parse { path: String, line: u64, msg: String },
    #[error("schema error in {path}: missing columns {missing:?}")]
    Schema { path: String, missing: Vec<String> },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 fit failure.
    pub fn exit_code(&self) -> i32 {
        use Error::*;
        match self {
            Config(_) | InvalidConfig(_) | ConfigTooLarge(_) => 2,
            Parse { .. } | Schema { .. } | Io { .. } | EmptyDataset | NoPositiveBags
            | NoPositiveInstances | NoNegativeInstances
            | UnlabeledInstance { .. } | InconsistentSubsample(_)
            | MissingTruthLabel { .. } | DimensionMismatch { .. } => 3,
            NotSymmetric { .. } | NotFactorizable { .. } | DegenerateResponsibilities { .. }
            | InitFailure(_) | PilotTooSmall(_) | TargetUnreachable { .. }
            | KernelNotFactorizable => 4,
        }
    }
}
