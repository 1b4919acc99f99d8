use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// A fixed-point iterate became non-finite.
    #[error("solver diverged at iteration {iteration}{}{}",
        .context.as_deref().map(|c| format!(" ({c})")).unwrap_or_default(),
        .certificate.map(|l| format!(", forward certificate L = {l:.6}")).unwrap_or_default())]
    Divergence {
        iteration: usize,
        context: Option<String>,
        certificate: Option<f64>,
    },

    #[error("numerical error: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Attach a context label to a divergence error; other variants pass through.
    pub fn with_context(self, ctx: impl Into<String>) -> Self {
        match self {
            Error::Divergence {
                iteration,
                certificate,
                ..
            } => Error::Divergence {
                iteration,
                context: Some(ctx.into()),
                certificate,
            },
            other => other,
        }
    }

    /// Attach the forward Lipschitz certificate to a divergence error.
    pub fn with_certificate(self, l: Option<f64>) -> Self {
        match self {
            Error::Divergence {
                iteration, context, ..
            } => Error::Divergence {
                iteration,
                context,
                certificate: l,
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
