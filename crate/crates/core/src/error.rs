use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("diffusion time {0} outside [0, 1]")]
    Domain(f64),

    #[error("near-singular conversion: {what} = {value:e} is below 1e-8")]
    NearSingular { what: &'static str, value: f64 },

    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    Shape {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_shape(
    context: &'static str,
    expected: &[usize],
    got: &[usize],
) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Shape {
            context,
            expected: expected.to_vec(),
            got: got.to_vec(),
        })
    }
}
