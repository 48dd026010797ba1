//! Brute-force check of the edit-distance invariance guarantee on tiny
//! instances.
//!
//! Smoothed inclusion probabilities are computed exactly by enumerating
//! every deletion mask, neighborhoods are enumerated exhaustively, and the
//! smoothed label of every certified vertex is compared across the ball.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::datasets::{check_p_del, edit_distance};
use crate::error::{Error, Result};
use crate::graph_model::VertexId;
use crate::rng::CounterRng;
use crate::scoring::{discover_rows, ScoreKind, ScoreTensor, TopKRule};
use crate::smoothing::certified_radius;

pub const MAX_BASE: usize = 12;
pub const MAX_UNIVERSE: usize = 16;
pub const MAX_ENUMERATED: usize = 20;
pub const MAX_NEIGHBORHOOD_BASE: usize = 8;
pub const MAX_NEIGHBORHOOD_DIST: usize = 2;

/// A dataset is a sequence of universe row indices.
pub type Sequence = Vec<usize>;

#[derive(Debug, Clone)]
pub struct TinyInstance {
    /// One row per universe example; row order is the universe order.
    pub universe: ScoreTensor,
    pub base: Sequence,
    pub rule: TopKRule,
    pub p_del: f64,
    pub tau: f64,
}

impl TinyInstance {
    pub fn validate(&self) -> Result<()> {
        check_p_del(self.p_del)?;
        certified_radius(self.tau, self.p_del)?;
        self.rule.validate()?;
        if self.universe.rows() > MAX_UNIVERSE {
            return Err(Error::Guard(format!("universe of {} > {MAX_UNIVERSE}", self.universe.rows())));
        }
        if self.base.len() > MAX_BASE {
            return Err(Error::Guard(format!("base of {} > {MAX_BASE}", self.base.len())));
        }
        if self.base.iter().any(|&i| i >= self.universe.rows()) {
            return Err(Error::Invalid("base references a row outside the universe".into()));
        }
        let ids: BTreeSet<&String> = self.universe.example_ids().iter().collect();
        if ids.len() != self.universe.rows() {
            return Err(Error::Invalid("universe ids must be unique".into()));
        }
        Ok(())
    }

    pub fn ids(&self, seq: &[usize]) -> Vec<String> {
        seq.iter().map(|&i| self.universe.example_ids()[i].clone()).collect()
    }

    /// Random instance: `block_count` blocks of width 2..=4, universe of
    /// 2..=`max_universe` rows, base of 1..=`max_base` distinct rows.
    ///
    /// Each channel gets a base level plus per-example jitter, so some
    /// vertices are reliably selected and others flip with the sample.
    pub fn random(seed: u64, max_base: usize, max_universe: usize, p_del: f64, tau: f64) -> Result<Self> {
        let mut rng = CounterRng::new(seed, 0xC0FFEE);
        let universe_size = 2 + rng.below((max_universe.max(2) - 1) as u64) as usize;
        let block_count = 1 + rng.below(2) as usize;
        let widths: Vec<usize> = (0..block_count).map(|_| 2 + rng.below(3) as usize).collect();
        let total: usize = widths.iter().sum();
        let levels: Vec<f64> = (0..total).map(|_| rng.next_f64()).collect();
        let jitter = 0.2 + rng.next_f64();
        let mut scores = Vec::with_capacity(universe_size * total);
        for _ in 0..universe_size {
            for &level in &levels {
                // eighth steps make exact ties common
                let v = ((level + jitter * rng.next_f64()) * 8.0).round() / 8.0;
                scores.push(v as f32);
            }
        }
        let ids = (0..universe_size).map(|i| format!("u{i}")).collect();
        let universe = ScoreTensor::new(ScoreKind::Activation, 0, ids, widths, scores)?;

        let base_len = 1 + rng.below(max_base.min(universe_size) as u64) as usize;
        let mut pool: Vec<usize> = (0..universe_size).collect();
        rng.shuffle(&mut pool);
        pool.truncate(base_len);
        let k = [0.25, 0.5, 0.75][rng.below(3) as usize];
        let inst = TinyInstance {
            universe,
            base: pool,
            rule: TopKRule::new(k, ScoreKind::Activation)?,
            p_del,
            tau,
        };
        inst.validate()?;
        Ok(inst)
    }
}

/// Exact smoothed inclusion probabilities of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactSmoothing {
    pub p: Vec<f64>,
    /// Total probability of all enumerated masks; 1 up to rounding.
    pub total_mass: f64,
}

/// Sums `Pr[m] * A_v(d ⊙ m)` over all `2^|d|` deletion masks.
pub fn exact_pv(inst: &TinyInstance, d: &[usize]) -> Result<ExactSmoothing> {
    if d.len() > MAX_ENUMERATED {
        return Err(Error::Guard(format!("{} examples > {MAX_ENUMERATED}", d.len())));
    }
    if d.iter().any(|&i| i >= inst.universe.rows()) {
        return Err(Error::Invalid("dataset references a row outside the universe".into()));
    }
    check_p_del(inst.p_del)?;
    let n = d.len();
    let keep = 1.0 - inst.p_del;
    let mut p = vec![0.0; inst.universe.total_vertices()];
    let mut total_mass = 0.0;
    let mut rows = Vec::with_capacity(n);
    for m in 0u64..(1u64 << n) {
        rows.clear();
        rows.extend((0..n).filter(|&i| m >> i & 1 == 1).map(|i| d[i]));
        let kept = rows.len() as i32;
        let prob = keep.powi(kept) * inst.p_del.powi(n as i32 - kept);
        total_mass += prob;
        let mask = discover_rows(&inst.universe, &rows, &inst.rule);
        for (acc, &b) in p.iter_mut().zip(&mask.bits) {
            if b {
                *acc += prob;
            }
        }
    }
    Ok(ExactSmoothing { p, total_mass })
}

/// All sequences obtained from `seq` by one insertion, deletion or
/// substitution with symbols from `0..universe`, without deduplication.
pub fn single_edits(seq: &[usize], universe: usize) -> Vec<Sequence> {
    let mut out = Vec::new();
    for i in 0..seq.len() {
        let mut s = seq.to_vec();
        s.remove(i);
        out.push(s);
    }
    for i in 0..seq.len() {
        for x in (0..universe).filter(|&x| x != seq[i]) {
            let mut s = seq.to_vec();
            s[i] = x;
            out.push(s);
        }
    }
    for i in 0..=seq.len() {
        for x in 0..universe {
            let mut s = seq.to_vec();
            s.insert(i, x);
            out.push(s);
        }
    }
    out
}

/// Every sequence within edit distance `max_dist` of `base`, in sorted order.
pub fn neighborhood(base: &[usize], universe: usize, max_dist: usize) -> Result<Vec<Sequence>> {
    if max_dist > MAX_NEIGHBORHOOD_DIST {
        return Err(Error::Guard(format!("max_dist {max_dist} > {MAX_NEIGHBORHOOD_DIST}")));
    }
    if base.len() > MAX_NEIGHBORHOOD_BASE {
        return Err(Error::Guard(format!("base of {} > {MAX_NEIGHBORHOOD_BASE}", base.len())));
    }
    if universe > MAX_UNIVERSE {
        return Err(Error::Guard(format!("universe of {universe} > {MAX_UNIVERSE}")));
    }
    let mut all: BTreeSet<Sequence> = BTreeSet::new();
    all.insert(base.to_vec());
    let mut frontier = vec![base.to_vec()];
    for _ in 0..max_dist {
        let mut next = Vec::new();
        for seq in &frontier {
            for s in single_edits(seq, universe) {
                if all.insert(s.clone()) {
                    next.push(s);
                }
            }
        }
        frontier = next;
    }
    Ok(all.into_iter().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub vertex: VertexId,
    pub dataset: Vec<String>,
    pub base_decision: bool,
    pub p_base: f64,
    pub p_perturbed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub radius: u64,
    /// Largest edit distance actually enumerated.
    pub max_dist_checked: Option<usize>,
    pub certified_vertices: usize,
    pub datasets: usize,
    /// Number of (vertex, dataset) pairs compared.
    pub checked: usize,
    pub violations: Vec<Violation>,
}

/// Checks that the smoothed label of every exactly-certified vertex is the
/// same on every dataset at edit distance below the radius (capped at
/// `max_dist` for tractability).
pub fn verify_theorem(inst: &TinyInstance, max_dist: usize) -> Result<VerifyReport> {
    inst.validate()?;
    let radius = certified_radius(inst.tau, inst.p_del)?;
    // Datasets with dist < radius, i.e. dist <= radius - 1.
    let reach = (radius as usize).checked_sub(1).map(|r| r.min(max_dist));
    let base = exact_pv(inst, &inst.base)?;
    let certified: Vec<(usize, bool)> = base
        .p
        .iter()
        .enumerate()
        .filter_map(|(v, &p)| {
            if p > inst.tau {
                Some((v, true))
            } else if 1.0 - p > inst.tau {
                Some((v, false))
            } else {
                None
            }
        })
        .collect();

    let mut report = VerifyReport {
        radius,
        max_dist_checked: reach,
        certified_vertices: certified.len(),
        datasets: 0,
        checked: 0,
        violations: Vec::new(),
    };
    let Some(reach) = reach else {
        return Ok(report);
    };
    let ball = neighborhood(&inst.base, inst.universe.rows(), reach)?;
    // The base rule only sees the multiset of rows, so p_v is cached on it.
    let mut cache: HashMap<Sequence, Vec<f64>> = HashMap::new();
    for d in &ball {
        debug_assert!(edit_distance(d, &inst.base) <= reach);
        let mut key = d.clone();
        key.sort_unstable();
        if !cache.contains_key(&key) {
            cache.insert(key.clone(), exact_pv(inst, d)?.p);
        }
        let p = &cache[&key];
        report.datasets += 1;
        for &(v, decision) in &certified {
            report.checked += 1;
            let label = if p[v] > 0.5 {
                Some(true)
            } else if p[v] < 0.5 {
                Some(false)
            } else {
                None
            };
            if label != Some(decision) {
                report.violations.push(Violation {
                    vertex: inst.universe.vertex(v),
                    dataset: inst.ids(d),
                    base_decision: decision,
                    p_base: base.p[v],
                    p_perturbed: p[v],
                });
            }
        }
    }
    Ok(report)
}

/// Verifies `count` random instances with seeds `first_seed..`.
pub fn verify_random(
    count: usize,
    first_seed: u64,
    max_base: usize,
    max_universe: usize,
    p_del: f64,
    tau: f64,
    max_dist: usize,
) -> Result<Vec<VerifyReport>> {
    (0..count as u64)
        .map(|i| {
            let inst = TinyInstance::random(first_seed + i, max_base, max_universe, p_del, tau)?;
            verify_theorem(&inst, max_dist)
        })
        .collect()
}
