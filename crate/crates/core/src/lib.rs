//! Planning engine for directional deep brain stimulation leads.
//!
//! The engine samples per-contact unit-current electric fields at target and
//! constraint points, solves a scalar amplitude problem for every admissible
//! contact configuration, and ranks configurations by a weighted
//! target/constraint coverage score. Point-cloud targets and streamline
//! targets (point-wise or trajectory-wise activation) share one code path.

pub mod activation;
pub mod anatomy;
pub mod fieldmodel;
pub mod grid;
pub mod lead;
pub mod optimizer;
mod par;
pub mod pipeline;

pub use nalgebra::Vector3;

/// Millimetre-space 3-vector.
pub type Vec3 = nalgebra::Vector3<f64>;

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a value's canonical JSON encoding.
pub fn json_hash<T: serde::Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("serializable value"))
}

/// A validation problem located by a dotted field path such as
/// `optimization.gamma`.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Issue {
    pub path: String,
    pub message: String,
}

impl Issue {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Prefix the path with `parent.`.
    pub fn under(self, parent: &str) -> Self {
        Self {
            path: format!("{parent}.{}", self.path),
            ..self
        }
    }
}

impl std::fmt::Display for Issue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}
