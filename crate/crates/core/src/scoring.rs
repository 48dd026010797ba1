//! Per-example vertex scores and the top-K base discovery algorithm.
//!
//! Scores are computed once per example and cached in a [`ScoreTensor`];
//! discovery on any sub-dataset is then a column mean over the surviving
//! rows followed by a per-block top-K selection.
//!
//! Column sums are accumulated in fixed point (2^-32 resolution) so that
//! the result, including ties, does not depend on row order.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::datasets::{ConceptDataset, DeletionMask};
use crate::error::{Error, Result};
use crate::graph_model::{NetworkSpec, VertexId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Activation,
    Relevance,
    RankBorda,
}

impl ScoreKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Activation => "activation",
            ScoreKind::Relevance => "relevance",
            ScoreKind::RankBorda => "rank_borda",
        }
    }
}

impl std::str::FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "activation" => Ok(ScoreKind::Activation),
            "relevance" => Ok(ScoreKind::Relevance),
            "rank" | "rank_borda" => Ok(ScoreKind::RankBorda),
            other => Err(Error::Invalid(format!("unknown score kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

const FIXED_SCALE: f64 = 4_294_967_296.0; // 2^32
/// Largest accepted score magnitude; keeps fixed-point sums far from overflow.
pub const MAX_SCORE_MAGNITUDE: f64 = 1_073_741_824.0; // 2^30

/// Per-example x per-vertex scores, block-major columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTensor {
    kind: ScoreKind,
    target_class: usize,
    example_ids: Vec<String>,
    block_widths: Vec<usize>,
    /// Row-major `[rows][total_vertices]`.
    scores: Vec<f32>,
    fixed: Vec<i64>,
    extra: BTreeMap<String, serde_json::Value>,
}

impl ScoreTensor {
    pub fn new(
        kind: ScoreKind,
        target_class: usize,
        example_ids: Vec<String>,
        block_widths: Vec<usize>,
        scores: Vec<f32>,
    ) -> Result<Self> {
        if block_widths.is_empty() || block_widths.contains(&0) {
            return Err(Error::Shape("block widths must be non-empty and positive".into()));
        }
        let cols: usize = block_widths.iter().sum();
        if scores.len() != cols * example_ids.len() {
            return Err(Error::Shape(format!(
                "{} scores for {} rows x {cols} columns",
                scores.len(),
                example_ids.len()
            )));
        }
        if let Some(v) = scores.iter().find(|v| !v.is_finite() || (**v as f64).abs() > MAX_SCORE_MAGNITUDE) {
            return Err(Error::Invalid(format!("score {v} is non-finite or exceeds 2^30 in magnitude")));
        }
        let fixed = scores.iter().map(|&v| (v as f64 * FIXED_SCALE).round() as i64).collect();
        Ok(Self {
            kind,
            target_class,
            example_ids,
            block_widths,
            scores,
            fixed,
            extra: BTreeMap::new(),
        })
    }

    pub fn kind(&self) -> ScoreKind {
        self.kind
    }

    pub fn target_class(&self) -> usize {
        self.target_class
    }

    pub fn example_ids(&self) -> &[String] {
        &self.example_ids
    }

    pub fn block_widths(&self) -> &[usize] {
        &self.block_widths
    }

    pub fn rows(&self) -> usize {
        self.example_ids.len()
    }

    pub fn total_vertices(&self) -> usize {
        self.block_widths.iter().sum()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.total_vertices();
        &self.scores[i * c..(i + 1) * c]
    }

    fn fixed_row(&self, i: usize) -> &[i64] {
        let c = self.total_vertices();
        &self.fixed[i * c..(i + 1) * c]
    }

    /// Extra header fields carried through from a file (e.g. exporter metadata).
    pub fn extra_header(&self) -> &BTreeMap<String, serde_json::Value> {
        &self.extra
    }

    /// Vertex id for a block-major column index.
    pub fn vertex(&self, column: usize) -> VertexId {
        let mut offset = 0;
        for (layer, &w) in self.block_widths.iter().enumerate() {
            if column < offset + w {
                return VertexId::new(layer, column - offset);
            }
            offset += w;
        }
        panic!("column {column} out of range");
    }

    /// New tensor with rows taken in the given order (repeats allowed).
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&r) = rows.iter().find(|&&r| r >= self.rows()) {
            return Err(Error::Shape(format!("row {r} out of range")));
        }
        let mut scores = Vec::with_capacity(rows.len() * self.total_vertices());
        for &r in rows {
            scores.extend_from_slice(self.row(r));
        }
        let ids = rows.iter().map(|&r| self.example_ids[r].clone()).collect();
        let mut out = Self::new(self.kind, self.target_class, ids, self.block_widths.clone(), scores)?;
        out.extra = self.extra.clone();
        Ok(out)
    }

    /// Exact fixed-point column sums over `rows` (repeats count multiply).
    fn column_sums(&self, rows: &[usize]) -> Vec<i128> {
        let mut sums = vec![0i128; self.total_vertices()];
        for &r in rows {
            for (s, &v) in sums.iter_mut().zip(self.fixed_row(r)) {
                *s += v as i128;
            }
        }
        sums
    }
}

/// Binary vertex mask over all vertices, block-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VertexMask {
    pub bits: Vec<bool>,
}

impl VertexMask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Keep the `ceil(k_fraction * width)` best vertices of every block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopKRule {
    pub k_fraction: f64,
    pub score_kind: ScoreKind,
}

impl TopKRule {
    pub fn new(k_fraction: f64, score_kind: ScoreKind) -> Result<Self> {
        let rule = Self { k_fraction, score_kind };
        rule.validate()?;
        Ok(rule)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k_fraction > 0.0 && self.k_fraction <= 1.0) {
            return Err(Error::Config(format!("k_fraction must lie in (0,1], got {}", self.k_fraction)));
        }
        Ok(())
    }

    /// Number of vertices kept in a block of `width` channels.
    ///
    /// `ceil` is taken with a 1e-9 slack so that products like `0.3 * 10`
    /// that land a rounding error above an integer are not bumped up.
    pub fn kept_per_block(&self, width: usize) -> usize {
        let m = (self.k_fraction * width as f64 - 1e-9).ceil() as usize;
        m.clamp(1, width)
    }
}

/// Scores every example of `d` against `net`.
pub fn compute_scores(net: &NetworkSpec, d: &ConceptDataset, kind: ScoreKind, target_class: usize) -> Result<ScoreTensor> {
    if target_class >= net.num_classes {
        return Err(Error::Invalid(format!(
            "target class {target_class} out of range for {} classes",
            net.num_classes
        )));
    }
    let widths = net.block_widths();
    let mut scores = Vec::with_capacity(d.len() * net.total_vertices());
    for ex in &d.examples {
        match kind {
            ScoreKind::Activation => {
                for block in net.block_activations(&ex.x)? {
                    scores.extend(block.iter().map(|a| a.abs() as f32));
                }
            }
            ScoreKind::Relevance => {
                let (acts, grads) = net.block_gradients(&ex.x, target_class)?;
                for (a, g) in acts.iter().zip(&grads) {
                    scores.extend(a.iter().zip(g).map(|(a, g)| (a * g) as f32));
                }
            }
            ScoreKind::RankBorda => {
                for block in net.block_activations(&ex.x)? {
                    scores.extend(borda(&block).into_iter().map(|s| s as f32));
                }
            }
        }
    }
    let ids = d.examples.iter().map(|e| e.id.clone()).collect();
    ScoreTensor::new(kind, target_class, ids, widths, scores)
}

/// Borda score of each channel: `width - position`, with positions counted
/// from 1 in descending-activation order and ties going to the lower index.
fn borda(acts: &[f64]) -> Vec<usize> {
    let width = acts.len();
    let mut order: Vec<usize> = (0..width).collect();
    order.sort_by(|&a, &b| acts[b].total_cmp(&acts[a]).then(a.cmp(&b)));
    let mut out = vec![0; width];
    for (pos, &ch) in order.iter().enumerate() {
        out[ch] = width - (pos + 1);
    }
    out
}

fn check_surviving(st: &ScoreTensor, surviving: &DeletionMask) -> Result<()> {
    if surviving.len() != st.rows() {
        return Err(Error::Shape(format!(
            "mask length {} != score rows {}",
            surviving.len(),
            st.rows()
        )));
    }
    Ok(())
}

/// Mean of the surviving rows per vertex; all zeros when nothing survives.
pub fn aggregate(st: &ScoreTensor, surviving: &DeletionMask) -> Result<Vec<f64>> {
    check_surviving(st, surviving)?;
    Ok(aggregate_rows(st, &surviving.kept_indices()))
}

/// Mean over an explicit row multiset.
pub fn aggregate_rows(st: &ScoreTensor, rows: &[usize]) -> Vec<f64> {
    if rows.is_empty() {
        return vec![0.0; st.total_vertices()];
    }
    let n = rows.len() as f64;
    st.column_sums(rows)
        .into_iter()
        .map(|s| s as f64 / FIXED_SCALE / n)
        .collect()
}

/// Base discovery algorithm on the surviving rows of `st`.
pub fn discover(st: &ScoreTensor, surviving: &DeletionMask, rule: &TopKRule) -> Result<VertexMask> {
    check_surviving(st, surviving)?;
    rule.validate()?;
    Ok(discover_rows(st, &surviving.kept_indices(), rule))
}

/// Base discovery on an explicit row multiset. The empty multiset maps to
/// the all-false mask.
pub fn discover_rows(st: &ScoreTensor, rows: &[usize], rule: &TopKRule) -> VertexMask {
    let mut bits = vec![false; st.total_vertices()];
    if rows.is_empty() {
        return VertexMask { bits };
    }
    // Same divisor for every column, so ranking sums ranks means.
    let sums = st.column_sums(rows);
    select_top_k(&sums, st.block_widths(), rule, &mut bits);
    VertexMask { bits }
}

fn select_top_k<T: Ord + Copy>(scores: &[T], widths: &[usize], rule: &TopKRule, bits: &mut [bool]) {
    let mut offset = 0;
    let mut order = Vec::new();
    for &w in widths {
        let block = &scores[offset..offset + w];
        order.clear();
        order.extend(0..w);
        let m = rule.kept_per_block(w);
        if m < w {
            order.select_nth_unstable_by(m - 1, |&a, &b| block[b].cmp(&block[a]).then(a.cmp(&b)));
        }
        for &c in &order[..m] {
            bits[offset + c] = true;
        }
        offset += w;
    }
}

/// Top-K over a caller-supplied per-vertex score vector (same tie rule).
pub fn top_k_mask(scores: &[f64], widths: &[usize], rule: &TopKRule) -> Result<VertexMask> {
    let total: usize = widths.iter().sum();
    if scores.len() != total {
        return Err(Error::Shape(format!("{} scores for {total} vertices", scores.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Invalid("NaN score".into()));
    }
    let keys: Vec<OrdF64> = scores.iter().map(|&s| OrdF64(s)).collect();
    let mut bits = vec![false; total];
    select_top_k(&keys, widths, rule, &mut bits);
    Ok(VertexMask { bits })
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

// ---------------------------------------------------------------------------
// CCSC file format
//
//   "CCSC" | version: u16 LE | header_len: u32 LE | header: UTF-8 JSON |
//   rows * total_vertices f32 LE, row-major
// ---------------------------------------------------------------------------

pub const CCSC_MAGIC: &[u8; 4] = b"CCSC";
pub const CCSC_VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CcscHeader {
    score_kind: ScoreKind,
    example_ids: Vec<String>,
    block_widths: Vec<usize>,
    target_class: usize,
    #[serde(flatten)]
    extra: BTreeMap<String, serde_json::Value>,
}

impl ScoreTensor {
    pub fn write_ccsc<W: Write>(&self, mut w: W) -> Result<()> {
        let header = CcscHeader {
            score_kind: self.kind,
            example_ids: self.example_ids.clone(),
            block_widths: self.block_widths.clone(),
            target_class: self.target_class,
            extra: self.extra.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let len = u32::try_from(json.len()).map_err(|_| Error::Format("header too large".into()))?;
        w.write_all(CCSC_MAGIC)?;
        w.write_all(&CCSC_VERSION.to_le_bytes())?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(&json)?;
        let mut payload = Vec::with_capacity(self.scores.len() * 4);
        for v in &self.scores {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&payload)?;
        Ok(())
    }

    pub fn to_ccsc_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_ccsc(&mut buf)?;
        Ok(buf)
    }

    pub fn read_ccsc<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_ccsc_bytes(&bytes)
    }

    /// Parses and validates a CCSC file. Trailing or missing payload bytes
    /// are errors.
    pub fn from_ccsc_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 10 || &bytes[..4] != CCSC_MAGIC {
            return Err(Error::Format("missing CCSC magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CCSC_VERSION {
            return Err(Error::Format(format!("unsupported CCSC version {version}")));
        }
        let header_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
        let body = &bytes[10..];
        if body.len() < header_len {
            return Err(Error::Format("truncated header".into()));
        }
        let header_text = std::str::from_utf8(&body[..header_len])
            .map_err(|e| Error::Format(format!("header is not UTF-8: {e}")))?;
        let header: CcscHeader = serde_json::from_str(header_text)
            .map_err(|e| Error::Format(format!("bad header: {e}")))?;
        let payload = &body[header_len..];
        let cols: usize = header.block_widths.iter().sum();
        let expected = header.example_ids.len() * cols * 4;
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "payload has {} bytes, expected {expected}",
                payload.len()
            )));
        }
        let scores = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut st = ScoreTensor::new(
            header.score_kind,
            header.target_class,
            header.example_ids,
            header.block_widths,
            scores,
        )
        .map_err(|e| Error::Format(e.to_string()))?;
        st.extra = header.extra;
        Ok(st)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::LabeledExample;
    use crate::graph_model::{Activation, LayerSpec};
    use crate::rng::CounterRng;
    use proptest::prelude::*;

    fn tensor(widths: Vec<usize>, rows: &[&[f32]]) -> ScoreTensor {
        let ids = (0..rows.len()).map(|i| format!("e{i}")).collect();
        let scores = rows.iter().flat_map(|r| r.iter().copied()).collect();
        ScoreTensor::new(ScoreKind::Activation, 0, ids, widths, scores).unwrap()
    }

    fn rule(k: f64) -> TopKRule {
        TopKRule::new(k, ScoreKind::Activation).unwrap()
    }

    fn identity_net() -> NetworkSpec {
        NetworkSpec::new(
            2,
            2,
            vec![
                LayerSpec {
                    weight: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                    bias: vec![0.0, 0.0],
                    activation: Activation::Relu,
                    is_block: true,
                },
                LayerSpec {
                    weight: vec![vec![2.0, -1.0], vec![0.5, 3.0]],
                    bias: vec![0.0, 0.0],
                    activation: Activation::Identity,
                    is_block: false,
                },
            ],
        )
        .unwrap()
    }

    fn concept(xs: &[&[f64]]) -> ConceptDataset {
        ConceptDataset {
            examples: xs
                .iter()
                .enumerate()
                .map(|(i, x)| LabeledExample { id: format!("e{i}"), x: x.to_vec(), y: 0 })
                .collect(),
            concept_class: 0,
        }
    }

    #[test]
    fn activation_scores_identity_net() {
        let st = compute_scores(&identity_net(), &concept(&[&[3.0, -1.0]]), ScoreKind::Activation, 0).unwrap();
        assert_eq!(st.row(0), &[3.0, 0.0]);
    }

    #[test]
    fn borda_tie_goes_to_lower_index() {
        assert_eq!(borda(&[0.2, 0.9, 0.9]), vec![0, 2, 1]);
    }

    #[test]
    fn relevance_on_linear_block_is_weight_times_activation() {
        // Block is linear-positive here, so grad = W2[target, c].
        let net = identity_net();
        let st = compute_scores(&net, &concept(&[&[3.0, 2.0]]), ScoreKind::Relevance, 1).unwrap();
        assert_eq!(st.row(0), &[0.5 * 3.0, 3.0 * 2.0]);
    }

    #[test]
    fn scoring_errors() {
        let net = identity_net();
        assert!(compute_scores(&net, &concept(&[&[1.0, 1.0]]), ScoreKind::Activation, 5).is_err());
        assert!(compute_scores(&net, &concept(&[&[1.0]]), ScoreKind::Activation, 0).is_err());
        assert!("bogus".parse::<ScoreKind>().is_err());
        assert_eq!("rank".parse::<ScoreKind>().unwrap(), ScoreKind::RankBorda);
    }

    #[test]
    fn aggregate_examples() {
        let st = tensor(vec![2], &[&[1.0, 3.0], &[3.0, 5.0]]);
        assert_eq!(aggregate(&st, &DeletionMask::all(2, true)).unwrap(), vec![2.0, 4.0]);
        assert_eq!(aggregate(&st, &vec![true, false].into()).unwrap(), vec![1.0, 3.0]);
        assert_eq!(aggregate(&st, &DeletionMask::all(2, false)).unwrap(), vec![0.0, 0.0]);
        assert!(aggregate(&st, &DeletionMask::all(3, true)).is_err());
    }

    #[test]
    fn aggregate_matches_brute_force_mean() {
        let mut rng = CounterRng::new(42, 0);
        let data: Vec<f32> = (0..24).map(|_| (rng.normal() * 3.0) as f32).collect();
        let ids = (0..6).map(|i| format!("e{i}")).collect();
        let st = ScoreTensor::new(ScoreKind::Relevance, 0, ids, vec![1, 3], data.clone()).unwrap();
        let mask: DeletionMask = vec![true, false, true, true, false, true].into();
        let got = aggregate(&st, &mask).unwrap();
        for col in 0..4 {
            let vals: Vec<f64> = (0..6).filter(|&r| mask.bits[r]).map(|r| data[r * 4 + col] as f64).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!((got[col] - mean).abs() < 1e-9, "col {col}: {} vs {mean}", got[col]);
        }
    }

    #[test]
    fn discover_examples() {
        let st = tensor(vec![4], &[&[0.9, 0.1, 0.5, 0.5]]);
        let all = DeletionMask::all(1, true);
        assert_eq!(discover(&st, &all, &rule(0.5)).unwrap().bits, vec![true, false, true, false]);
        assert_eq!(discover(&st, &all, &rule(1.0)).unwrap().bits, vec![true; 4]);
        assert_eq!(discover(&st, &DeletionMask::all(1, false), &rule(1.0)).unwrap().bits, vec![false; 4]);
    }

    #[test]
    fn kept_per_block_arithmetic() {
        assert_eq!(rule(0.7).kept_per_block(256), 180);
        assert_eq!(rule(0.3).kept_per_block(10), 3);
        assert_eq!(rule(0.01).kept_per_block(4), 1);
        assert_eq!(rule(1.0).kept_per_block(7), 7);
        assert!(TopKRule::new(0.0, ScoreKind::Activation).is_err());
        assert!(TopKRule::new(1.5, ScoreKind::Activation).is_err());
    }

    #[test]
    fn top_k_mask_matches_discover_on_means() {
        let st = tensor(vec![3, 2], &[&[0.1, 0.4, 0.4, 2.0, 1.0], &[0.3, 0.2, 0.2, 0.0, 1.0]]);
        let all = DeletionMask::all(2, true);
        let means = aggregate(&st, &all).unwrap();
        assert_eq!(
            top_k_mask(&means, &[3, 2], &rule(0.5)).unwrap(),
            discover(&st, &all, &rule(0.5)).unwrap()
        );
    }

    #[test]
    fn rejects_bad_tensors() {
        assert!(ScoreTensor::new(ScoreKind::Activation, 0, vec!["a".into()], vec![2], vec![1.0]).is_err());
        assert!(ScoreTensor::new(ScoreKind::Activation, 0, vec!["a".into()], vec![1], vec![f32::NAN]).is_err());
        assert!(ScoreTensor::new(ScoreKind::Activation, 0, vec!["a".into()], vec![1], vec![1e12]).is_err());
        assert!(ScoreTensor::new(ScoreKind::Activation, 0, vec![], vec![], vec![]).is_err());
    }

    #[test]
    fn ccsc_layout_is_exact() {
        let st = tensor(vec![2], &[&[1.0, -2.5]]);
        let bytes = st.to_ccsc_bytes().unwrap();
        let header = br#"{"score_kind":"activation","example_ids":["e0"],"block_widths":[2],"target_class":0}"#;
        let mut expected = b"CCSC".to_vec();
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.extend_from_slice(&(header.len() as u32).to_le_bytes());
        expected.extend_from_slice(header);
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn ccsc_rejects_corruption() {
        let st = tensor(vec![2], &[&[1.0, 2.0]]);
        let bytes = st.to_ccsc_bytes().unwrap();
        assert!(ScoreTensor::from_ccsc_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(ScoreTensor::from_ccsc_bytes(&longer).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(ScoreTensor::from_ccsc_bytes(&bad_magic).is_err());
        let mut bad_version = bytes;
        bad_version[4] = 9;
        assert!(ScoreTensor::from_ccsc_bytes(&bad_version).is_err());
    }

    #[test]
    fn ccsc_preserves_extra_header_fields() {
        let header = br#"{"score_kind":"relevance","example_ids":["a"],"block_widths":[1],"target_class":3,"spatial_reduction":"sum"}"#;
        let mut bytes = b"CCSC".to_vec();
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&0.5f32.to_le_bytes());
        let st = ScoreTensor::from_ccsc_bytes(&bytes).unwrap();
        assert_eq!(st.extra_header()["spatial_reduction"], "sum");
        assert_eq!(st.to_ccsc_bytes().unwrap(), bytes);
    }

    fn arb_tensor() -> impl Strategy<Value = (ScoreTensor, Vec<bool>)> {
        (1usize..8, proptest::collection::vec(1usize..6, 1..4)).prop_flat_map(|(rows, widths)| {
            let cols: usize = widths.iter().sum();
            (
                Just(widths),
                proptest::collection::vec(-4i32..5, rows * cols),
                proptest::collection::vec(any::<bool>(), rows),
            )
                .prop_map(move |(widths, vals, mask)| {
                    let ids = (0..rows).map(|i| format!("e{i}")).collect();
                    // quarter steps make exact ties common
                    let scores = vals.into_iter().map(|v| v as f32 * 0.25).collect();
                    (ScoreTensor::new(ScoreKind::Activation, 0, ids, widths, scores).unwrap(), mask)
                })
        })
    }

    proptest! {
        #[test]
        fn ccsc_round_trip((st, _) in arb_tensor()) {
            let bytes = st.to_ccsc_bytes().unwrap();
            let back = ScoreTensor::from_ccsc_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &st);
            prop_assert_eq!(back.to_ccsc_bytes().unwrap(), bytes);
        }

        #[test]
        fn top_k_is_monotone_in_k((st, mask) in arb_tensor(), k1 in 0.01f64..1.0, k2 in 0.01f64..1.0) {
            let (lo, hi) = if k1 <= k2 { (k1, k2) } else { (k2, k1) };
            let m = DeletionMask::from(mask);
            let small = discover(&st, &m, &rule(lo)).unwrap();
            let large = discover(&st, &m, &rule(hi)).unwrap();
            prop_assert!(small.bits.iter().zip(&large.bits).all(|(&s, &l)| !s || l));
        }

        #[test]
        fn kept_count_is_exact_per_block((st, mask) in arb_tensor(), k in 0.01f64..=1.0) {
            let m = DeletionMask::from(mask);
            let r = rule(k);
            let out = discover(&st, &m, &r).unwrap();
            let mut offset = 0;
            for &w in st.block_widths() {
                let kept = out.bits[offset..offset + w].iter().filter(|&&b| b).count();
                let expected = if m.kept() == 0 { 0 } else { r.kept_per_block(w) };
                prop_assert_eq!(kept, expected);
                offset += w;
            }
        }

        #[test]
        fn subsampled_rescore_matches_cached_aggregation((st, mask) in arb_tensor(), k in 0.01f64..=1.0) {
            let m = DeletionMask::from(mask);
            let sub = st.select_rows(&m.kept_indices()).unwrap();
            let all = DeletionMask::all(sub.rows(), true);
            prop_assert_eq!(discover(&sub, &all, &rule(k)).unwrap(), discover(&st, &m, &rule(k)).unwrap());
        }
    }
}
