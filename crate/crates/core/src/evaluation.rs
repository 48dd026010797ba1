//! Sufficiency-pruning evaluation of class circuits.
//!
//! A class circuit is scored by running the network with every non-circuit
//! block channel zeroed. cACC is the unweighted mean over classes of the
//! accuracy on the class's own examples; oACC is the accuracy of the same
//! pruned model on the other classes' examples (lower means more specific).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::circuit::{effective_k, induce_baseline, induce_certified, iou, to_prune_mask, Circuit};
use crate::datasets::{ConceptDataset, DeletionMask, LabeledExample};
use crate::error::{Error, Result};
use crate::graph_model::NetworkSpec;
use crate::scoring::{discover, ScoreKind, ScoreTensor, TopKRule};
use crate::smoothing::{certify, run_votes, CertConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetTag {
    InDist,
    Shifted,
}

impl DatasetTag {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetTag::InDist => "in_dist",
            DatasetTag::Shifted => "shifted",
        }
    }
}

impl std::str::FromStr for DatasetTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in_dist" => Ok(DatasetTag::InDist),
            "shifted" => Ok(DatasetTag::Shifted),
            other => Err(Error::Invalid(format!("unknown dataset tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Paradigm {
    Baseline,
    Certified,
}

impl Paradigm {
    pub fn as_str(self) -> &'static str {
        match self {
            Paradigm::Baseline => "baseline",
            Paradigm::Certified => "certified",
        }
    }
}

fn check_blocks(net: &NetworkSpec, circuit: &Circuit) -> Result<()> {
    if net.block_widths() != circuit.block_widths {
        return Err(Error::Shape(format!(
            "circuit widths {:?} != network block widths {:?}",
            circuit.block_widths,
            net.block_widths()
        )));
    }
    Ok(())
}

fn pruned_accuracy<'a>(
    net: &NetworkSpec,
    circuit: &Circuit,
    examples: impl ExactSizeIterator<Item = &'a LabeledExample>,
    label: impl Fn(&LabeledExample) -> usize,
) -> Result<f64> {
    check_blocks(net, circuit)?;
    let n = examples.len();
    if n == 0 {
        return Err(Error::Invalid("cannot evaluate on an empty dataset".into()));
    }
    let mask = to_prune_mask(circuit);
    let mut correct = 0usize;
    for ex in examples {
        if net.predict(&ex.x, Some(&mask))? == label(ex) {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}

/// Fraction of `d` whose pruned-model prediction is `d.concept_class`.
pub fn class_accuracy(net: &NetworkSpec, circuit: &Circuit, d: &ConceptDataset) -> Result<f64> {
    pruned_accuracy(net, circuit, d.examples.iter(), |_| d.concept_class)
}

/// Accuracy of class `class`'s circuit on examples of other classes,
/// scored against their own labels.
pub fn oacc(net: &NetworkSpec, circuit: &Circuit, class: usize, others: &[LabeledExample]) -> Result<f64> {
    if let Some(e) = others.iter().find(|e| e.y == class) {
        return Err(Error::Invalid(format!("example {} belongs to class {class}", e.id)));
    }
    pruned_accuracy(net, circuit, others.iter(), |e| e.y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEval {
    pub class_id: usize,
    pub circuit_ref: String,
    pub effective_k: f64,
    pub class_acc: f64,
    pub other_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalAggregate {
    pub cacc: f64,
    pub oacc: f64,
    pub mean_effective_k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassEval>,
    pub aggregate: EvalAggregate,
    pub dataset_tag: DatasetTag,
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len();
    xs.sum::<f64>() / n as f64
}

/// Evaluates one circuit per class on that class's dataset (cACC) and on
/// the pooled examples of every other class in `data` (oACC).
pub fn cacc(
    net: &NetworkSpec,
    circuits: &BTreeMap<usize, Circuit>,
    data: &BTreeMap<usize, ConceptDataset>,
    dataset_tag: DatasetTag,
) -> Result<EvalReport> {
    if !circuits.keys().eq(data.keys()) {
        return Err(Error::Invalid(format!(
            "class sets differ: circuits {:?} vs data {:?}",
            circuits.keys().collect::<Vec<_>>(),
            data.keys().collect::<Vec<_>>()
        )));
    }
    if circuits.is_empty() {
        return Err(Error::Invalid("no classes to evaluate".into()));
    }
    let mut per_class = Vec::with_capacity(circuits.len());
    for (&class, circuit) in circuits {
        let d = &data[&class];
        if d.concept_class != class {
            return Err(Error::Invalid(format!("dataset for class {class} has concept {}", d.concept_class)));
        }
        let class_acc = class_accuracy(net, circuit, d)?;
        let others: Vec<LabeledExample> = data
            .iter()
            .filter(|(&c, _)| c != class)
            .flat_map(|(_, d)| d.examples.iter().cloned())
            .collect();
        let other_acc = if others.is_empty() { 0.0 } else { oacc(net, circuit, class, &others)? };
        per_class.push(ClassEval {
            class_id: class,
            circuit_ref: format!("class-{class}"),
            effective_k: effective_k(circuit).overall,
            class_acc,
            other_acc,
        });
    }
    let aggregate = EvalAggregate {
        cacc: mean(per_class.iter().map(|c| c.class_acc)),
        oacc: mean(per_class.iter().map(|c| c.other_acc)),
        mean_effective_k: mean(per_class.iter().map(|c| c.effective_k)),
    };
    Ok(EvalReport { per_class, aggregate, dataset_tag })
}

/// Class circuits at base fraction `k`: the plain top-K mask, or, with a
/// certification config, the certified-in set of the smoothed rule.
pub fn discover_circuits(
    scores: &BTreeMap<usize, ScoreTensor>,
    kind: ScoreKind,
    k: f64,
    cert: Option<&CertConfig>,
    workers: usize,
) -> Result<BTreeMap<usize, Circuit>> {
    let rule = TopKRule::new(k, kind)?;
    let mut out = BTreeMap::new();
    for (&class, st) in scores {
        if st.kind() != kind {
            return Err(Error::Invalid(format!(
                "score tensor for class {class} is {}, expected {kind}",
                st.kind()
            )));
        }
        let circuit = match cert {
            None => {
                let mask = discover(st, &DeletionMask::all(st.rows(), true), &rule)?;
                induce_baseline(&mask, st.block_widths(), k, kind)?
            }
            Some(cfg) => {
                let votes = run_votes(st, &rule, cfg, workers)?;
                induce_certified(&certify(&votes, cfg)?, k, kind)
            }
        };
        out.insert(class, circuit);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k_requested: f64,
    pub mean_effective_k: f64,
    pub cacc: f64,
    pub oacc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPeak {
    pub cacc: f64,
    /// Mean effective K of the circuits at the peak.
    pub k_at_peak: f64,
    pub k_requested: f64,
    pub oacc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub paradigm: Paradigm,
    pub score_kind: ScoreKind,
    pub dataset_tag: DatasetTag,
    pub grid: Vec<f64>,
    pub per_k: Vec<SweepRow>,
    pub peak: SweepPeak,
}

pub const SWEEP_CSV_HEADER: &str = "paradigm,score_kind,k_requested,mean_effective_k,cacc,oacc,dataset_tag";

impl SweepResult {
    /// CSV rows without the header line.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for row in &self.per_k {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.paradigm.as_str(),
                self.score_kind,
                row.k_requested,
                row.mean_effective_k,
                row.cacc,
                row.oacc,
                self.dataset_tag.as_str()
            ));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        format!("{SWEEP_CSV_HEADER}\n{}", self.csv_rows())
    }
}

pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config("empty K grid".into()));
    }
    if grid.iter().any(|&k| !(k > 0.0 && k <= 1.0)) {
        return Err(Error::Config("grid values must lie in (0,1]".into()));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("grid must be strictly increasing".into()));
    }
    Ok(())
}

/// Inputs shared by every grid point of a sweep.
pub struct SweepInputs<'a> {
    pub net: &'a NetworkSpec,
    /// Discovery scores per class.
    pub scores: &'a BTreeMap<usize, ScoreTensor>,
    /// Evaluation datasets per class.
    pub eval: &'a BTreeMap<usize, ConceptDataset>,
    pub dataset_tag: DatasetTag,
    pub workers: usize,
}

/// Evaluates circuits over a grid of base K values. The peak is the row
/// with the highest cACC; ties go to the earliest (smallest) K.
pub fn sweep(inputs: &SweepInputs<'_>, kind: ScoreKind, cert: Option<&CertConfig>, grid: &[f64]) -> Result<SweepResult> {
    validate_grid(grid)?;
    let mut per_k = Vec::with_capacity(grid.len());
    for &k in grid {
        let circuits = discover_circuits(inputs.scores, kind, k, cert, inputs.workers)?;
        let report = cacc(inputs.net, &circuits, inputs.eval, inputs.dataset_tag)?;
        per_k.push(SweepRow {
            k_requested: k,
            mean_effective_k: report.aggregate.mean_effective_k,
            cacc: report.aggregate.cacc,
            oacc: report.aggregate.oacc,
        });
    }
    let best = per_k
        .iter()
        .enumerate()
        .fold(0, |best, (i, row)| if row.cacc > per_k[best].cacc { i } else { best });
    let row = &per_k[best];
    let peak = SweepPeak {
        cacc: row.cacc,
        k_at_peak: row.mean_effective_k,
        k_requested: row.k_requested,
        oacc: row.oacc,
    };
    Ok(SweepResult {
        paradigm: if cert.is_some() { Paradigm::Certified } else { Paradigm::Baseline },
        score_kind: kind,
        dataset_tag: inputs.dataset_tag,
        grid: grid.to_vec(),
        per_k,
        peak,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class_id: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub per_class: Vec<ClassIou>,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Per-class IoU between circuits found on two datasets of the same class.
pub fn stability_iou(a: &BTreeMap<usize, Circuit>, b: &BTreeMap<usize, Circuit>) -> Result<StabilityReport> {
    if !a.keys().eq(b.keys()) || a.is_empty() {
        return Err(Error::Invalid("circuit maps must cover the same non-empty class set".into()));
    }
    let per_class = a
        .iter()
        .map(|(&class, ca)| Ok(ClassIou { class_id: class, iou: iou(ca, &b[&class])? }))
        .collect::<Result<Vec<_>>>()?;
    let mut sorted: Vec<f64> = per_class.iter().map(|c| c.iou).collect();
    sorted.sort_by(f64::total_cmp);
    Ok(StabilityReport {
        median: quantile(&sorted, 0.5),
        q1: quantile(&sorted, 0.25),
        q3: quantile(&sorted, 0.75),
        per_class,
    })
}
