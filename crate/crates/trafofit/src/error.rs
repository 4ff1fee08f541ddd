use thiserror::Error;

/// Formula parsing failure, with a byte position into the source text.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("formula error at position {pos}: {msg}")]
pub struct FormulaError {
    pub pos: usize,
    pub msg: String,
}

impl FormulaError {
    pub fn new(pos: usize, msg: impl Into<String>) -> Self {
        Self {
            pos,
            msg: msg.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum TrafoError {
    #[error(transparent)]
    Formula(#[from] FormulaError),

    #[error("data error: {0}")]
    Data(String),

    #[error("column `{0}` not found in the dataset")]
    MissingColumn(String),

    #[error("column `{column}` has the wrong type: {expected}")]
    ColumnType { column: String, expected: String },

    #[error("unseen factor level `{level}` in column `{column}`")]
    UnseenLevel { column: String, level: String },

    #[error("basis error: {0}")]
    Basis(String),

    #[error("response value {value} outside the training support [{lower}, {upper}]")]
    OutsideSupport {
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("model specification error: {0}")]
    Spec(String),

    #[error("non-finite value produced by node {node} ({op}) during evaluation{context}")]
    NonFinite {
        node: usize,
        op: String,
        context: String,
    },

    #[error("training aborted: non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("prediction error: {0}")]
    Predict(String),

    #[error("persistence error: {0}")]
    Persist(String),
}

pub type Result<T> = std::result::Result<T, TrafoError>;
