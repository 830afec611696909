//! Synthetic scenes, metrics, benchmarks and the end-to-end pipeline that
//! drive the `easlam` command line.

pub mod bench;
pub mod graph;
pub mod metrics;
pub mod pipeline;
pub mod synth;

pub const EXIT_INVALID_INPUT: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: easlam_core::Error,
    },
    #[error(transparent)]
    Core(#[from] easlam_core::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        let core = match self {
            HarnessError::Stage { source, .. } => Some(source),
            HarnessError::Core(e) => Some(e),
            _ => None,
        };
        match core {
            Some(easlam_core::Error::Numerical(_)) => EXIT_NUMERICAL,
            _ => EXIT_INVALID_INPUT,
        }
    }
}
