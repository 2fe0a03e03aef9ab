use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("distance {distance} m is inside the reference radius {d_ref} m")]
    InsideReferenceRadius { distance: f64, d_ref: f64 },

    #[error("invalid instance: {0}")]
    InvalidInstance(String),

    #[error("assignment violates {0}")]
    InvalidAssignment(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("instance exceeds oracle size cap: {0}")]
    SizeCap(String),

    #[error("policy recovery failed: {0}")]
    Recovery(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("comparison error: {0}")]
    Compare(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
