//! Per-site conditioning vectors.
//!
//! Each site carries an indicator vector that conditions both the local
//! channel-selection gate and the server aggregation gate. Three variants
//! exist: a deterministic hash-seeded text embedding (stand-in for a
//! pretrained text encoder, usable offline and stable forever), a one-hot
//! basis vector, and a seeded random unit vector. Externally computed
//! embeddings can also be loaded from a rank-1 TDF file.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{fnv1a64, Xoshiro256StarStar};
use crate::tdf;
use crate::tensor::Tensor;

/// Default indicator dimension.
pub const DEFAULT_INDICATOR_DIM: usize = 64;

/// How an indicator vector was produced.
#[derive(Debug, Clone, PartialEq)]
pub enum IndicatorProvenance {
    /// Hash-seeded embedding of a prompt string (or a loaded file path).
    Text(String),
    /// Basis vector for a site index among `site_count` sites.
    OneHot { site: usize, site_count: usize },
    /// Seeded random unit vector.
    Random { seed: u64 },
}

/// A per-site conditioning vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TextIndicator {
    pub vector: Tensor,
    pub provenance: IndicatorProvenance,
}

impl TextIndicator {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Indicator variant selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndicatorKind {
    Text,
    OneHot,
    Random,
}

fn unit_normal_vector(seed: u64, d: usize) -> Tensor {
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let mut data: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let norm = data.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut data {
        *v /= norm;
    }
    Tensor::new(vec![d], data).expect("shape matches data")
}

/// Deterministic text embedding: FNV-1a of the prompt seeds a
/// xoshiro256** stream, `d` Box-Muller normals are drawn and
/// L2-normalized. The same prompt yields the same vector forever.
pub fn embed_prompt(prompt: &str, d: usize) -> Result<TextIndicator> {
    if prompt.is_empty() {
        return Err(Error::Input("prompt must be non-empty".into()));
    }
    if d == 0 {
        return Err(Error::Input("indicator dimension must be positive".into()));
    }
    let seed = fnv1a64(prompt.as_bytes());
    Ok(TextIndicator {
        vector: unit_normal_vector(seed, d),
        provenance: IndicatorProvenance::Text(prompt.to_string()),
    })
}

/// Builds an indicator of the requested kind.
///
/// `text` embeds `prompt`; `one_hot` places a 1 at index `site`
/// (requires `site < d`); `random` draws a seeded unit vector
/// independent of the prompt.
pub fn make_indicator(
    kind: IndicatorKind,
    site: usize,
    prompt: &str,
    site_count: usize,
    d: usize,
    seed: u64,
) -> Result<TextIndicator> {
    match kind {
        IndicatorKind::Text => embed_prompt(prompt, d),
        IndicatorKind::OneHot => {
            if site >= d {
                return Err(Error::Input(format!(
                    "one-hot site index {} requires dimension > {}, got {}",
                    site, site, d
                )));
            }
            let mut data = vec![0.0; d];
            data[site] = 1.0;
            Ok(TextIndicator {
                vector: Tensor::new(vec![d], data)?,
                provenance: IndicatorProvenance::OneHot { site, site_count },
            })
        }
        IndicatorKind::Random => Ok(TextIndicator {
            vector: unit_normal_vector(seed, d),
            provenance: IndicatorProvenance::Random { seed },
        }),
    }
}

/// Loads a rank-1 TDF tensor as an indicator, L2-normalizing it.
pub fn load_embedding_file(path: &Path) -> Result<TextIndicator> {
    let raw = tdf::read_tensor(path)?;
    if raw.rank() != 1 {
        return Err(Error::Format(format!(
            "{}: embedding file must be rank 1, got rank {}",
            path.display(),
            raw.rank()
        )));
    }
    let norm = raw.l2_norm();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Input(format!(
            "{}: cannot normalize zero or non-finite embedding",
            path.display()
        )));
    }
    Ok(TextIndicator {
        vector: raw.scale(1.0 / norm),
        provenance: IndicatorProvenance::Text(path.display().to_string()),
    })
}
