use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("version mismatch: file has version {found}, this build reads version {expected}")]
    Version { found: u16, expected: u16 },
    #[error("objective became non-finite at iteration {iteration} (learning rate {lr}): {detail}")]
    Diverged { iteration: usize, lr: f64, detail: String },
    #[error("label inference failed: {0}; supply ground-truth labels instead")]
    LabelInference(String),
    #[error("training did not converge: {message} (epoch losses: {curve:?})")]
    NotConverged { message: String, curve: Vec<f64> },
}
