//! Concept datasets as ordered example sequences, deletion masks, edit
//! distance over example ids, and the planted-spurious-feature generator.
//!
//! The order of a [`ConceptDataset`] is its serialization order. It only
//! matters for edit distance; base discovery never looks at it.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, CounterRng};

/// One row of a dataset file: `{"id": str, "x": [floats], "y": int}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledExample {
    pub id: String,
    pub x: Vec<f64>,
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub num_classes: usize,
    pub examples: Vec<LabeledExample>,
}

impl LabeledDataset {
    pub fn input_dim(&self) -> usize {
        self.examples.first().map_or(0, |e| e.x.len())
    }

    /// Reads JSON lines. `num_classes` is one past the largest label.
    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut examples = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let ex: LabeledExample = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
            examples.push(ex);
        }
        let num_classes = examples.iter().map(|e| e.y + 1).max().unwrap_or(0);
        let ds = Self { num_classes, examples };
        ds.validate()?;
        Ok(ds)
    }

    pub fn write_jsonl<W: Write>(&self, mut writer: W) -> Result<()> {
        for ex in &self.examples {
            serde_json::to_writer(&mut writer, ex)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.input_dim();
        if let Some(e) = self.examples.iter().find(|e| e.x.len() != dim) {
            return Err(Error::Shape(format!("example {} has dim {} != {dim}", e.id, e.x.len())));
        }
        if let Some(e) = self.examples.iter().find(|e| e.x.iter().any(|v| !v.is_finite())) {
            return Err(Error::Invalid(format!("example {} has non-finite values", e.id)));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(e) = self.examples.iter().find(|e| !seen.insert(e.id.as_str())) {
            return Err(Error::Invalid(format!("duplicate example id {}", e.id)));
        }
        Ok(())
    }

    /// Examples of `class` in file order, as a concept dataset.
    pub fn concept(&self, class: usize) -> ConceptDataset {
        ConceptDataset {
            examples: self.examples.iter().filter(|e| e.y == class).cloned().collect(),
            concept_class: class,
        }
    }
}

/// Ordered sequence of same-concept examples.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptDataset {
    pub examples: Vec<LabeledExample>,
    pub concept_class: usize,
}

impl ConceptDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.examples.iter().map(|e| e.id.as_str()).collect()
    }

    /// Resolves a concept file against its parent dataset.
    pub fn from_ref(reference: &ConceptRef, parent: &LabeledDataset) -> Result<Self> {
        let index: HashMap<&str, &LabeledExample> =
            parent.examples.iter().map(|e| (e.id.as_str(), e)).collect();
        let examples = reference
            .ids
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .map(|e| (*e).clone())
                    .ok_or_else(|| Error::Invalid(format!("id {id} not in parent {}", reference.parent)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { examples, concept_class: reference.concept_class })
    }

    pub fn to_ref(&self, parent: &str) -> ConceptRef {
        ConceptRef {
            parent: parent.to_string(),
            concept_class: self.concept_class,
            ids: self.examples.iter().map(|e| e.id.clone()).collect(),
        }
    }
}

/// Concept dataset file: a parent dataset path plus an ordered id list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptRef {
    pub parent: String,
    pub concept_class: usize,
    pub ids: Vec<String>,
}

/// Keep bits over a dataset (true = keep).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DeletionMask {
    pub bits: Vec<bool>,
}

impl DeletionMask {
    pub fn all(len: usize, keep: bool) -> Self {
        Self { bits: vec![keep; len] }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn kept(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Indices of kept positions in order.
    pub fn kept_indices(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }
}

impl From<Vec<bool>> for DeletionMask {
    fn from(bits: Vec<bool>) -> Self {
        Self { bits }
    }
}

/// The ordered subsequence of examples whose mask bit is set.
pub fn apply_mask(d: &ConceptDataset, m: &DeletionMask) -> Result<ConceptDataset> {
    if d.len() != m.len() {
        return Err(Error::Shape(format!("mask length {} != dataset length {}", m.len(), d.len())));
    }
    Ok(ConceptDataset {
        examples: d
            .examples
            .iter()
            .zip(&m.bits)
            .filter(|(_, &keep)| keep)
            .map(|(e, _)| e.clone())
            .collect(),
        concept_class: d.concept_class,
    })
}

pub fn check_p_del(p_del: f64) -> Result<()> {
    if !(p_del > 0.0 && p_del < 1.0) {
        return Err(Error::Config(format!("p_del must lie in (0,1), got {p_del}")));
    }
    Ok(())
}

/// Deletion mask for Monte-Carlo sample `sample_index`: position `i` is kept
/// iff `uniform(master_seed, sample_index, i) < 1 - p_del`.
pub fn sample_mask(len: usize, p_del: f64, master_seed: u64, sample_index: u64) -> Result<DeletionMask> {
    check_p_del(p_del)?;
    let keep = 1.0 - p_del;
    Ok(DeletionMask {
        bits: (0..len as u64).map(|i| rng::uniform(master_seed, sample_index, i) < keep).collect(),
    })
}

/// Levenshtein distance with unit costs over arbitrary tokens.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Planted-spurious-feature generator settings.
///
/// Inputs are `[core dims | spurious dims]`. Dimension `i` of either group
/// carries the signal of class `i % num_classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    /// Size of each in-distribution and shifted concept dataset.
    pub examples_per_class: usize,
    #[serde(default = "default_train_per_class")]
    pub train_per_class: usize,
    pub core_feature_dims: usize,
    pub spurious_feature_dims: usize,
    pub spurious_correlation: f64,
    pub noise_sigma: f64,
    #[serde(default = "one")]
    pub core_signal: f64,
    #[serde(default = "one")]
    pub spurious_signal: f64,
    pub seed: u64,
}

fn default_train_per_class() -> usize {
    200
}

fn one() -> f64 {
    1.0
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            examples_per_class: 40,
            train_per_class: default_train_per_class(),
            core_feature_dims: 8,
            spurious_feature_dims: 8,
            spurious_correlation: 0.95,
            noise_sigma: 0.5,
            core_signal: 1.0,
            spurious_signal: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.core_feature_dims == 0 {
            return Err(Error::Config("core_feature_dims must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.spurious_correlation) {
            return Err(Error::Config("spurious_correlation must lie in [0,1]".into()));
        }
        if !(self.noise_sigma >= 0.0) || !self.core_signal.is_finite() || !self.spurious_signal.is_finite() {
            return Err(Error::Config("noise_sigma must be non-negative and signals finite".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.core_feature_dims + self.spurious_feature_dims
    }
}

/// Output of [`gen_synthetic`].
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub train: LabeledDataset,
    /// All in-distribution concept examples, grouped by class.
    pub in_dist: LabeledDataset,
    /// Same as `in_dist` but with spurious dims drawn independently of the label.
    pub shifted: LabeledDataset,
    pub concepts: Vec<ConceptDataset>,
    pub shifted_concepts: Vec<ConceptDataset>,
}

const STREAM_TRAIN: u64 = 100;
const STREAM_IN_DIST: u64 = 200;
const STREAM_SHIFTED: u64 = 300;

fn draw_example(cfg: &SynthConfig, rng: &mut CounterRng, y: usize, correlation: f64, id: String) -> LabeledExample {
    let c = cfg.num_classes;
    let spurious_class = if rng.bernoulli(correlation) { y } else { rng.below(c as u64) as usize };
    let mut x = Vec::with_capacity(cfg.input_dim());
    for i in 0..cfg.core_feature_dims {
        let signal = if i % c == y { cfg.core_signal } else { 0.0 };
        x.push(signal + cfg.noise_sigma * rng.normal());
    }
    for i in 0..cfg.spurious_feature_dims {
        let signal = if i % c == spurious_class { cfg.spurious_signal } else { 0.0 };
        x.push(signal + cfg.noise_sigma * rng.normal());
    }
    LabeledExample { id, x, y }
}

fn draw_split(cfg: &SynthConfig, stream: u64, per_class: usize, correlation: f64, tag: &str) -> LabeledDataset {
    let mut examples = Vec::with_capacity(per_class * cfg.num_classes);
    for y in 0..cfg.num_classes {
        let mut rng = CounterRng::new(cfg.seed, stream + y as u64);
        for i in 0..per_class {
            examples.push(draw_example(cfg, &mut rng, y, correlation, format!("{tag}-c{y}-{i:04}")));
        }
    }
    LabeledDataset { num_classes: cfg.num_classes, examples }
}

/// Generates a training set, per-class concept datasets, and the shifted
/// variant where the spurious/label correlation is broken.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<SyntheticTask> {
    cfg.validate()?;
    let train = draw_split(cfg, STREAM_TRAIN, cfg.train_per_class, cfg.spurious_correlation, "tr");
    let in_dist = draw_split(cfg, STREAM_IN_DIST, cfg.examples_per_class, cfg.spurious_correlation, "in");
    let shifted = draw_split(cfg, STREAM_SHIFTED, cfg.examples_per_class, 0.0, "sh");
    let concepts = (0..cfg.num_classes).map(|c| in_dist.concept(c)).collect();
    let shifted_concepts = (0..cfg.num_classes).map(|c| shifted.concept(c)).collect();
    Ok(SyntheticTask { train, in_dist, shifted, concepts, shifted_concepts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ds(ids: &[&str]) -> ConceptDataset {
        ConceptDataset {
            examples: ids
                .iter()
                .map(|id| LabeledExample { id: id.to_string(), x: vec![0.0], y: 0 })
                .collect(),
            concept_class: 0,
        }
    }

    #[test]
    fn apply_mask_examples() {
        let d = ds(&["a", "b", "c"]);
        assert_eq!(apply_mask(&d, &DeletionMask::all(3, true)).unwrap(), d);
        assert!(apply_mask(&d, &DeletionMask::all(3, false)).unwrap().is_empty());
        let sub = apply_mask(&d, &vec![true, false, true].into()).unwrap();
        assert_eq!(sub.ids(), vec!["a", "c"]);
        assert!(matches!(apply_mask(&d, &DeletionMask::all(2, true)), Err(Error::Shape(_))));
    }

    #[test]
    fn sample_mask_tiny_p_del_keeps_everything() {
        let m = sample_mask(20, 1e-12, 12345, 0).unwrap();
        assert_eq!(m, DeletionMask::all(20, true));
    }

    #[test]
    fn sample_mask_keep_rate() {
        let mut kept = 0usize;
        let mut total = 0usize;
        for j in 0..1000 {
            let m = sample_mask(100, 0.6, 7, j).unwrap();
            kept += m.kept();
            total += m.len();
        }
        assert_eq!(total, 100_000);
        let rate = kept as f64 / total as f64;
        assert!((rate - 0.4).abs() <= 0.01, "keep rate {rate}");
    }

    #[test]
    fn sample_mask_is_deterministic_and_validated() {
        assert_eq!(sample_mask(50, 0.3, 1, 9).unwrap(), sample_mask(50, 0.3, 1, 9).unwrap());
        assert_ne!(sample_mask(50, 0.3, 1, 9).unwrap(), sample_mask(50, 0.3, 1, 10).unwrap());
        for bad in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(matches!(sample_mask(5, bad, 0, 0), Err(Error::Config(_))));
        }
    }

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance(&["a", "b", "c"], &["a", "c"]), 1);
        assert_eq!(edit_distance(&["a", "b"], &["b", "a"]), 2);
        assert_eq!(edit_distance(&["x"], &["x"]), 0);
        assert_eq!(edit_distance::<&str>(&[], &["a", "b"]), 2);
        assert_eq!(edit_distance(&["a", "b"], &[]), 2);
    }

    fn brute_edit(a: &[u8], b: &[u8]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                let sub = brute_edit(ra, rb) + usize::from(x != y);
                sub.min(brute_edit(ra, b) + 1).min(brute_edit(a, rb) + 1)
            }
        }
    }

    proptest! {
        #[test]
        fn edit_distance_matches_recursive_oracle(
            a in proptest::collection::vec(0u8..4, 0..6),
            b in proptest::collection::vec(0u8..4, 0..6),
        ) {
            prop_assert_eq!(edit_distance(&a, &b), brute_edit(&a, &b));
        }

        #[test]
        fn edit_distance_is_a_metric(
            a in proptest::collection::vec(0u8..3, 0..6),
            b in proptest::collection::vec(0u8..3, 0..6),
            c in proptest::collection::vec(0u8..3, 0..6),
        ) {
            let ab = edit_distance(&a, &b);
            prop_assert_eq!(ab, edit_distance(&b, &a));
            prop_assert_eq!(ab == 0, a == b);
            prop_assert!(edit_distance(&a, &c) <= ab + edit_distance(&b, &c));
        }

        #[test]
        fn masks_compose_by_and(
            bits1 in proptest::collection::vec(any::<bool>(), 0..12),
            seed in any::<u64>(),
        ) {
            let d = ds(&(0..bits1.len()).map(|i| ["a","b","c","d","e","f","g","h","i","j","k","l"][i]).collect::<Vec<_>>());
            let m1 = DeletionMask::from(bits1.clone());
            let once = apply_mask(&d, &m1).unwrap();
            let mut rng = CounterRng::new(seed, 0);
            let bits2: Vec<bool> = (0..once.len()).map(|_| rng.bernoulli(0.5)).collect();
            let twice = apply_mask(&once, &bits2.clone().into()).unwrap();
            // compose: AND m2 into the surviving positions of m1
            let mut it = bits2.iter();
            let composed: Vec<bool> = bits1.iter().map(|&b| b && *it.next().unwrap()).collect();
            prop_assert_eq!(twice, apply_mask(&d, &composed.into()).unwrap());
        }
    }

    #[test]
    fn jsonl_round_trip_is_byte_identical() {
        let task = gen_synthetic(&SynthConfig { examples_per_class: 3, train_per_class: 2, ..Default::default() }).unwrap();
        let mut first = Vec::new();
        task.in_dist.write_jsonl(&mut first).unwrap();
        let back = LabeledDataset::read_jsonl(first.as_slice()).unwrap();
        let mut second = Vec::new();
        back.write_jsonl(&mut second).unwrap();
        assert_eq!(first, second);
        assert_eq!(back, task.in_dist);
    }

    #[test]
    fn concept_ref_resolves() {
        let task = gen_synthetic(&SynthConfig { examples_per_class: 4, train_per_class: 1, ..Default::default() }).unwrap();
        let c = &task.concepts[2];
        let r = c.to_ref("in.jsonl");
        assert_eq!(&ConceptDataset::from_ref(&r, &task.in_dist).unwrap(), c);
        let mut bad = r.clone();
        bad.ids.push("nope".into());
        assert!(ConceptDataset::from_ref(&bad, &task.in_dist).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_labelled() {
        let cfg = SynthConfig::default();
        let a = gen_synthetic(&cfg).unwrap();
        let b = gen_synthetic(&cfg).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.shifted, b.shifted);
        assert_eq!(a.concepts.len(), 4);
        assert!(a.concepts.iter().enumerate().all(|(c, d)| d.len() == 40 && d.examples.iter().all(|e| e.y == c)));
        assert_eq!(a.train.examples.len(), 800);
        let bad = SynthConfig { spurious_correlation: 1.5, ..cfg };
        assert!(gen_synthetic(&bad).is_err());
    }
}
