//! Circuits as vertex sets. Edges are the induced subgraph and are never
//! stored.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_model::{PruneMask, VertexId};
use crate::scoring::{ScoreKind, VertexMask};
use crate::smoothing::{CertConfig, CertifiedMask, Decision};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "paradigm", rename_all = "lowercase")]
pub enum Provenance {
    Baseline { k: f64, score_kind: ScoreKind },
    Certified { k: f64, score_kind: ScoreKind, config: CertConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Circuit {
    pub block_widths: Vec<usize>,
    pub vertices: BTreeSet<VertexId>,
    pub provenance: Provenance,
}

/// Serialized form: vertices as `[layer, channel]` pairs in sorted order.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CircuitFile {
    block_widths: Vec<usize>,
    vertices: Vec<[usize; 2]>,
    provenance: Provenance,
}

impl Circuit {
    pub fn new(block_widths: Vec<usize>, vertices: BTreeSet<VertexId>, provenance: Provenance) -> Result<Self> {
        if let Some(v) = vertices
            .iter()
            .find(|v| v.layer >= block_widths.len() || v.channel >= block_widths[v.layer])
        {
            return Err(Error::Shape(format!("vertex {v:?} outside block widths {block_widths:?}")));
        }
        Ok(Self { block_widths, vertices, provenance })
    }

    pub fn total_vertices(&self) -> usize {
        self.block_widths.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn contains(&self, v: VertexId) -> bool {
        self.vertices.contains(&v)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = CircuitFile {
            block_widths: self.block_widths.clone(),
            vertices: self.vertices.iter().map(|v| [v.layer, v.channel]).collect(),
            provenance: self.provenance.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: CircuitFile = serde_json::from_str(s)?;
        let vertices = file.vertices.iter().map(|&[l, c]| VertexId::new(l, c)).collect();
        Self::new(file.block_widths, vertices, file.provenance)
    }
}

fn block_major(block_widths: &[usize]) -> impl Iterator<Item = VertexId> + '_ {
    block_widths
        .iter()
        .enumerate()
        .flat_map(|(l, &w)| (0..w).map(move |c| VertexId::new(l, c)))
}

/// Circuit of the certified-in vertices.
pub fn induce_certified(mask: &CertifiedMask, k: f64, score_kind: ScoreKind) -> Circuit {
    let vertices = block_major(&mask.block_widths)
        .zip(&mask.decisions)
        .filter(|(_, &d)| d == Decision::In)
        .map(|(v, _)| v)
        .collect();
    Circuit {
        block_widths: mask.block_widths.clone(),
        vertices,
        provenance: Provenance::Certified { k, score_kind, config: mask.config },
    }
}

/// Circuit of the set bits of a baseline mask.
pub fn induce_baseline(mask: &VertexMask, block_widths: &[usize], k: f64, score_kind: ScoreKind) -> Result<Circuit> {
    let total: usize = block_widths.iter().sum();
    if mask.bits.len() != total {
        return Err(Error::Shape(format!("mask has {} bits for {total} vertices", mask.bits.len())));
    }
    let vertices = block_major(block_widths)
        .zip(&mask.bits)
        .filter(|(_, &b)| b)
        .map(|(v, _)| v)
        .collect();
    Ok(Circuit {
        block_widths: block_widths.to_vec(),
        vertices,
        provenance: Provenance::Baseline { k, score_kind },
    })
}

/// Retained fraction overall and per block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveK {
    pub overall: f64,
    pub per_block: Vec<f64>,
}

pub fn effective_k(c: &Circuit) -> EffectiveK {
    let mut counts = vec![0usize; c.block_widths.len()];
    for v in &c.vertices {
        counts[v.layer] += 1;
    }
    EffectiveK {
        overall: c.len() as f64 / c.total_vertices() as f64,
        per_block: counts.iter().zip(&c.block_widths).map(|(&n, &w)| n as f64 / w as f64).collect(),
    }
}

/// Intersection over union of vertex sets; two empty circuits give 1.
pub fn iou(a: &Circuit, b: &Circuit) -> Result<f64> {
    if a.block_widths != b.block_widths {
        return Err(Error::Shape(format!(
            "block widths differ: {:?} vs {:?}",
            a.block_widths, b.block_widths
        )));
    }
    let inter = a.vertices.intersection(&b.vertices).count();
    let union = a.vertices.union(&b.vertices).count();
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

pub fn to_prune_mask(c: &Circuit) -> PruneMask {
    let mut mask = PruneMask::all(&c.block_widths, false);
    for v in &c.vertices {
        mask.blocks[v.layer][v.channel] = true;
    }
    mask
}

/// Flattens a prune mask into a block-major vertex mask.
pub fn prune_mask_bits(mask: &PruneMask) -> VertexMask {
    VertexMask { bits: mask.blocks.iter().flatten().copied().collect() }
}
