use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in tensor `{tensor}`")]
    Numerical { tensor: String },

    #[error("training diverged on task {task} at epoch {epoch}: {detail}")]
    Divergence {
        task: usize,
        epoch: usize,
        detail: String,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("operation requires a supervised model")]
    Mode,

    #[error("component {index} failed: {source}")]
    Component {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("distribution for task {task} is empty after oracle filtering")]
    EmptyDistribution { task: usize },

    #[error("trade-off ratio undefined: K = card(B') = {0}")]
    UndefinedRatio(usize),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn check_finite(tensor: &str, values: impl IntoIterator<Item = f64>) -> Result<()> {
        if values.into_iter().all(f64::is_finite) {
            Ok(())
        } else {
            Err(Error::Numerical {
                tensor: tensor.to_string(),
            })
        }
    }
}
