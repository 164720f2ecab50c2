use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("no active elements")]
    EmptyActiveSet,

    #[error("singular matrix: zero pivot at index {pivot}")]
    SingularMatrix { pivot: usize },

    #[error("entry ({row}, {col}) lies outside the union sparsity pattern")]
    PatternOverflow { row: usize, col: usize },

    #[error("selected entry ({row}, {col}) is not covered by any element")]
    UncoveredIndex { row: usize, col: usize },

    #[error("rank collapse: {0}")]
    RankCollapse(String),

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("malformed container {path}: {msg}")]
    Format { path: String, msg: String },

    #[error("stage `{stage}` failed{}: {source}", .mu.map(|m| format!(" at mu = {m}")).unwrap_or_default())]
    Stage {
        stage: String,
        mu: Option<f64>,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerical pipeline (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::SingularMatrix { .. }
            | Error::EmptyActiveSet
            | Error::PatternOverflow { .. }
            | Error::UncoveredIndex { .. }
            | Error::RankCollapse(_) => true,
            Error::Stage { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    pub fn at_stage(self, stage: &str, mu: Option<f64>) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            mu,
            source: Box::new(self),
        }
    }
}
