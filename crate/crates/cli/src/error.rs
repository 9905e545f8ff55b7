use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or inputs, detected before any stage runs.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: twinshield::Error,
    },

    #[error("stage `{stage}` needs artifact {artifact}, which is missing; run the upstream stage first")]
    MissingArtifact { stage: &'static str, artifact: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Stage { .. } | CliError::MissingArtifact { .. } => 2,
        }
    }
}

/// Attaches the stage name to a core error.
pub trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError>;
}

impl<T, E: Into<twinshield::Error>> StageContext<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|e| CliError::Stage {
            stage,
            source: e.into(),
        })
    }
}
