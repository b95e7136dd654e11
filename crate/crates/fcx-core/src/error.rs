//! Error type shared by the core numerics.

use alloc::string::String;

/// Failure modes surfaced by core operations. All carry a human-readable
/// message; callers that need programmatic dispatch match on the variant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CoreError {
    /// A configuration value is out of range or internally inconsistent.
    InvalidConfig(String),
    /// Tensor or field dimensions do not line up.
    ShapeMismatch(String),
    /// A NaN or infinity appeared where finite data is required.
    NonFinite(String),
    /// A numerical stability precondition was violated.
    Unstable(String),
}

impl core::fmt::Display for CoreError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            CoreError::InvalidConfig(m) => write!(f, "invalid config: {m}"),
            CoreError::ShapeMismatch(m) => write!(f, "shape mismatch: {m}"),
            CoreError::NonFinite(m) => write!(f, "non-finite value: {m}"),
            CoreError::Unstable(m) => write!(f, "unstable: {m}"),
        }
    }
}

#[cfg(any(test, feature = "std"))]
impl std::error::Error for CoreError {}
