use serde::{Deserialize, Serialize};

use crate::embedder::Embedding;
use crate::error::{Error, Result};
use crate::numcore::{l2_normalize, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    /// `‖f − s·e‖²` on unnormalized embeddings.
    L2,
    /// `−f·(s·e)` on unnormalized embeddings.
    Dot,
    /// `−f̃·ẽ` on normalized embeddings; the scale is irrelevant.
    NormalizedDot,
}

impl DistanceKind {
    pub fn wants_normalized(self) -> bool {
        matches!(self, DistanceKind::NormalizedDot)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceSpec {
    pub kind: DistanceKind,
    pub target: Embedding,
    pub scale: f64,
}

impl DistanceSpec {
    pub fn new(kind: DistanceKind, target: Embedding) -> Self {
        Self { kind, target, scale: 1.0 }
    }

    pub fn scaled(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }
}

/// Distance between an embedding and the spec's target, with its gradient
/// with respect to `f` (unnormalized for `L2`/`Dot`, normalized for
/// `NormalizedDot`).
pub fn distance(f: &Embedding, spec: &DistanceSpec) -> Result<(f64, Tensor)> {
    if f.is_normalized() != spec.kind.wants_normalized() {
        return Err(Error::Contract(format!(
            "{:?} distance needs a {} embedding",
            spec.kind,
            if spec.kind.wants_normalized() { "normalized" } else { "unnormalized" }
        )));
    }
    let e = spec.target.values();
    if e.dims() != f.values().dims() {
        return Err(Error::Shape(format!("embedding dims {:?} vs target {:?}", f.values().dims(), e.dims())));
    }
    let fv = f.values();
    match spec.kind {
        DistanceKind::L2 => {
            let r = fv.zip_map(e, |a, b| a - spec.scale * b)?;
            Ok((r.dot(&r)?, r.scale(2.0)?))
        }
        DistanceKind::Dot => {
            let se = e.scale(spec.scale)?;
            Ok((-fv.dot(&se)?, se.scale(-1.0)?))
        }
        DistanceKind::NormalizedDot => {
            let en = if spec.target.is_normalized() { e.clone() } else { l2_normalize(e)? };
            Ok((-fv.dot(&en)?, en.scale(-1.0)?))
        }
    }
}
