//! Deletion-smoothed discovery: Monte-Carlo votes, confidence bounds,
//! three-valued certified decisions and the certified radius.

mod binomial;

pub use binomial::{cp_lower, cp_lower_table, upper_tail, CP_TOLERANCE};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{check_p_del, sample_mask};
use crate::error::{Error, Result};
use crate::graph_model::VertexId;
use crate::scoring::{discover, ScoreTensor, TopKRule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertConfig {
    pub p_del: f64,
    pub tau: f64,
    pub n_samples: u64,
    pub alpha: f64,
    #[serde(default)]
    pub simultaneous: bool,
    #[serde(default)]
    pub master_seed: u64,
}

impl Default for CertConfig {
    fn default() -> Self {
        Self {
            p_del: 0.6,
            tau: 0.95,
            n_samples: 1000,
            alpha: 0.001,
            simultaneous: false,
            master_seed: 0,
        }
    }
}

impl CertConfig {
    pub fn validate(&self) -> Result<()> {
        check_p_del(self.p_del)?;
        check_tau(self.tau)?;
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0,1), got {}", self.alpha)));
        }
        Ok(())
    }

    /// Per-vertex failure probability actually used for the bounds.
    pub fn effective_alpha(&self, num_vertices: usize) -> f64 {
        if self.simultaneous {
            self.alpha / num_vertices.max(1) as f64
        } else {
            self.alpha
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(0.5..1.0).contains(&tau) {
        return Err(Error::Config(format!("tau must lie in [0.5,1), got {tau}")));
    }
    Ok(())
}

/// Edit-distance radius below which non-abstaining decisions are invariant:
/// `floor(ln(1.5 - tau) / ln(p_del))`, clamped at zero.
pub fn certified_radius(tau: f64, p_del: f64) -> Result<u64> {
    check_tau(tau)?;
    check_p_del(p_del)?;
    Ok(radius_for_confidence(tau, p_del))
}

/// Same formula evaluated at an arbitrary confidence `mu` in `[0.5, 1)`.
/// Used for per-vertex diagnostics; certification uses `tau`.
pub fn radius_for_confidence(mu: f64, p_del: f64) -> u64 {
    let r = ((1.5 - mu).ln() / p_del.ln()).floor();
    if r > 0.0 {
        r as u64
    } else {
        0
    }
}

/// One row of a radius table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiusEntry {
    pub tau: f64,
    pub p_del: f64,
    pub radius: u64,
}

pub fn radius_table(taus: &[f64], p_dels: &[f64]) -> Result<Vec<RadiusEntry>> {
    let mut out = Vec::with_capacity(taus.len() * p_dels.len());
    for &tau in taus {
        for &p_del in p_dels {
            out.push(RadiusEntry { tau, p_del, radius: certified_radius(tau, p_del)? });
        }
    }
    Ok(out)
}

/// Inclusion counts over the Monte-Carlo deletion samples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoteTable {
    pub n_samples: u64,
    pub block_widths: Vec<usize>,
    pub include_counts: Vec<u64>,
}

impl VoteTable {
    pub fn validate(&self) -> Result<()> {
        let total: usize = self.block_widths.iter().sum();
        if self.include_counts.len() != total {
            return Err(Error::Shape(format!(
                "{} counts for {total} vertices",
                self.include_counts.len()
            )));
        }
        if self.include_counts.iter().any(|&c| c > self.n_samples) {
            return Err(Error::Invalid("vote count exceeds n_samples".into()));
        }
        Ok(())
    }
}

/// Runs the base rule on `cfg.n_samples` deletion samples and counts, per
/// vertex, how often it was included. Sample `j` (1-based) uses the mask
/// keyed on `(master_seed, j)`, so the table is the same for any `workers`.
pub fn run_votes(st: &ScoreTensor, rule: &TopKRule, cfg: &CertConfig, workers: usize) -> Result<VoteTable> {
    cfg.validate()?;
    rule.validate()?;
    let v = st.total_vertices();
    let rows = st.rows();
    let sample = |j: u64| -> Result<Vec<bool>> {
        let mask = sample_mask(rows, cfg.p_del, cfg.master_seed, j)?;
        Ok(discover(st, &mask, rule)?.bits)
    };
    let add = |mut acc: Vec<u64>, bits: Vec<bool>| {
        for (a, b) in acc.iter_mut().zip(bits) {
            *a += u64::from(b);
        }
        acc
    };

    let counts = if workers <= 1 {
        let mut acc = vec![0u64; v];
        for j in 1..=cfg.n_samples {
            acc = add(acc, sample(j)?);
        }
        acc
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| {
            (1..=cfg.n_samples)
                .into_par_iter()
                .try_fold(
                    || vec![0u64; v],
                    |acc, j| sample(j).map(|bits| add(acc, bits)),
                )
                .try_reduce(
                    || vec![0u64; v],
                    |mut a, b| {
                        a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                        Ok(a)
                    },
                )
        })?
    };
    Ok(VoteTable {
        n_samples: cfg.n_samples,
        block_widths: st.block_widths().to_vec(),
        include_counts: counts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    In,
    Out,
    Abstain,
}

/// Three-valued certified mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifiedMask {
    pub block_widths: Vec<usize>,
    pub decisions: Vec<Decision>,
    /// Lower bound on the winning side; for abstentions, the larger of the
    /// two side bounds.
    pub p_lower: Vec<f64>,
    pub radius: u64,
    pub config: CertConfig,
}

impl CertifiedMask {
    pub fn count(&self, decision: Decision) -> usize {
        self.decisions.iter().filter(|&&d| d == decision).count()
    }

    /// Radius implied by the vertex's own lower bound. Never smaller than
    /// `radius` for a non-abstaining vertex; informational only.
    pub fn vertex_radius(&self, index: usize) -> Option<u64> {
        match self.decisions[index] {
            Decision::Abstain => None,
            _ => Some(radius_for_confidence(self.p_lower[index], self.config.p_del)),
        }
    }
}

/// Thresholds the lower confidence bounds of both sides at `tau`.
pub fn certify(votes: &VoteTable, cfg: &CertConfig) -> Result<CertifiedMask> {
    cfg.validate()?;
    votes.validate()?;
    if votes.n_samples != cfg.n_samples {
        return Err(Error::Invalid(format!(
            "vote table has {} samples, config expects {}",
            votes.n_samples, cfg.n_samples
        )));
    }
    let n = votes.n_samples;
    let alpha = cfg.effective_alpha(votes.include_counts.len());
    let bounds = cp_lower_table(n, alpha)?;
    let mut decisions = Vec::with_capacity(votes.include_counts.len());
    let mut p_lower = Vec::with_capacity(votes.include_counts.len());
    for &count in &votes.include_counts {
        let inc = bounds[count as usize];
        let exc = bounds[(n - count) as usize];
        if inc > cfg.tau {
            decisions.push(Decision::In);
            p_lower.push(inc);
        } else if exc > cfg.tau {
            decisions.push(Decision::Out);
            p_lower.push(exc);
        } else {
            decisions.push(Decision::Abstain);
            p_lower.push(inc.max(exc));
        }
    }
    Ok(CertifiedMask {
        block_widths: votes.block_widths.clone(),
        decisions,
        p_lower,
        radius: certified_radius(cfg.tau, cfg.p_del)?,
        config: *cfg,
    })
}

/// Per-vertex line of a certification report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VertexReport {
    pub layer: usize,
    pub channel: usize,
    pub count: u64,
    pub p_hat: f64,
    pub p_lower: f64,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertReport {
    pub config: CertConfig,
    pub radius: u64,
    pub per_vertex: Vec<VertexReport>,
}

impl CertReport {
    pub fn new(votes: &VoteTable, mask: &CertifiedMask) -> Self {
        let mut per_vertex = Vec::with_capacity(votes.include_counts.len());
        let mut index = 0;
        for (layer, &w) in votes.block_widths.iter().enumerate() {
            for channel in 0..w {
                let count = votes.include_counts[index];
                per_vertex.push(VertexReport {
                    layer,
                    channel,
                    count,
                    p_hat: count as f64 / votes.n_samples as f64,
                    p_lower: mask.p_lower[index],
                    decision: mask.decisions[index],
                });
                index += 1;
            }
        }
        Self { config: mask.config, radius: mask.radius, per_vertex }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,channel,count,p_hat,p_lower,decision\n");
        for v in &self.per_vertex {
            let d = match v.decision {
                Decision::In => "in",
                Decision::Out => "out",
                Decision::Abstain => "abstain",
            };
            out.push_str(&format!("{},{},{},{},{},{}\n", v.layer, v.channel, v.count, v.p_hat, v.p_lower, d));
        }
        out
    }

    pub fn vertex(&self, index: usize) -> VertexId {
        VertexId::new(self.per_vertex[index].layer, self.per_vertex[index].channel)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::DeletionMask;
    use crate::rng::CounterRng;
    use crate::scoring::ScoreKind;

    fn cfg(n: u64) -> CertConfig {
        CertConfig { n_samples: n, ..Default::default() }
    }

    fn votes(counts: Vec<u64>, n: u64) -> VoteTable {
        VoteTable { n_samples: n, block_widths: vec![counts.len()], include_counts: counts }
    }

    #[test]
    fn radius_examples() {
        assert_eq!(certified_radius(0.95, 0.6).unwrap(), 1);
        assert_eq!(certified_radius(0.5, 0.3).unwrap(), 0);
        assert_eq!(certified_radius(0.5, 0.95).unwrap(), 0);
        assert_eq!(certified_radius(0.95, 0.9).unwrap(), 5);
        assert!(certified_radius(0.4, 0.6).is_err());
        assert!(certified_radius(1.0, 0.6).is_err());
        assert!(certified_radius(0.9, 1.0).is_err());
    }

    #[test]
    fn certify_examples() {
        let c = cfg(1000);
        let m = certify(&votes(vec![500, 1000, 0], 1000), &c).unwrap();
        assert_eq!(m.decisions, vec![Decision::Abstain, Decision::In, Decision::Out]);
        assert!((m.p_lower[1] - 0.99311604842093377158).abs() < 1e-9);
        assert!((m.p_lower[2] - 0.99311604842093377158).abs() < 1e-9);
        assert_eq!(m.radius, 1);
        assert!(m.vertex_radius(1).unwrap() >= m.radius);
        assert_eq!(m.vertex_radius(0), None);
    }

    #[test]
    fn certify_checks_consistency() {
        assert!(certify(&votes(vec![3], 10), &cfg(1000)).is_err());
        assert!(certify(&votes(vec![11], 10), &cfg(10)).is_err());
    }

    #[test]
    fn simultaneous_mode_is_stricter() {
        let v = votes(vec![975; 100], 1000);
        let single = certify(&v, &cfg(1000)).unwrap();
        let joint = certify(&v, &CertConfig { simultaneous: true, ..cfg(1000) }).unwrap();
        assert_eq!(single.count(Decision::In), 100);
        assert!(joint.p_lower[0] < single.p_lower[0]);
        // cp_lower(975, 1000, 1e-5) < 0.95
        assert_eq!(joint.count(Decision::Abstain), 100);
    }

    #[test]
    fn decisions_exclusive_and_monotone_in_tau() {
        let mut rng = CounterRng::new(5, 5);
        let counts: Vec<u64> = (0..300).map(|_| rng.below(201)).collect();
        let v = votes(counts, 200);
        let mut prev: Option<CertifiedMask> = None;
        for tau in [0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99] {
            let m = certify(&v, &CertConfig { tau, n_samples: 200, ..Default::default() }).unwrap();
            for &count in &v.include_counts {
                let inc = cp_lower(count, 200, 0.001).unwrap() > tau;
                let exc = cp_lower(200 - count, 200, 0.001).unwrap() > tau;
                assert!(!(inc && exc));
            }
            if let Some(p) = &prev {
                for (a, b) in p.decisions.iter().zip(&m.decisions) {
                    assert!(a == b || *b == Decision::Abstain, "{a:?} -> {b:?}");
                }
            }
            prev = Some(m);
        }
    }

    fn tensor(rows: usize, cols: usize, seed: u64) -> ScoreTensor {
        let mut rng = CounterRng::new(seed, 0);
        let data = (0..rows * cols).map(|_| rng.next_f64() as f32).collect();
        ScoreTensor::new(ScoreKind::Activation, 0, (0..rows).map(|i| format!("e{i}")).collect(), vec![cols], data).unwrap()
    }

    #[test]
    fn single_sample_votes_equal_the_discovered_mask() {
        let st = tensor(10, 6, 1);
        let rule = TopKRule::new(0.5, ScoreKind::Activation).unwrap();
        let c = CertConfig { n_samples: 1, master_seed: 77, ..Default::default() };
        let v = run_votes(&st, &rule, &c, 1).unwrap();
        let mask = sample_mask(10, c.p_del, 77, 1).unwrap();
        let expected: Vec<u64> = discover(&st, &mask, &rule).unwrap().bits.iter().map(|&b| u64::from(b)).collect();
        assert_eq!(v.include_counts, expected);
    }

    #[test]
    fn dominant_vertex_is_always_included() {
        // Channel 2 is strictly largest in every row, hence in every mean.
        let rows = 12;
        let mut data = Vec::new();
        let mut rng = CounterRng::new(3, 3);
        for _ in 0..rows {
            let mut r: Vec<f32> = (0..5).map(|_| rng.next_f64() as f32).collect();
            r[2] = 2.0;
            data.extend(r);
        }
        let st = ScoreTensor::new(ScoreKind::Activation, 0, (0..rows).map(|i| format!("e{i}")).collect(), vec![5], data).unwrap();
        let rule = TopKRule::new(0.2, ScoreKind::Activation).unwrap();
        let c = CertConfig { n_samples: 500, p_del: 0.3, ..Default::default() };
        let v = run_votes(&st, &rule, &c, 1).unwrap();
        // Only the empty sub-dataset (prob 0.3^12) could exclude it.
        assert_eq!(v.include_counts[2], 500);
    }

    #[test]
    fn two_example_toy_frequency() {
        // A includes vertex 0 iff example 0 survives: its score dominates
        // only when example 0 is present.
        let st = ScoreTensor::new(
            ScoreKind::Activation,
            0,
            vec!["a".into(), "b".into()],
            vec![2],
            vec![5.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let rule = TopKRule::new(0.5, ScoreKind::Activation).unwrap();
        for m in [[true, true], [true, false], [false, true], [false, false]] {
            let got = discover(&st, &DeletionMask::from(m.to_vec()), &rule).unwrap().bits[0];
            assert_eq!(got, m[0]);
        }
        let c = CertConfig { n_samples: 100_000, p_del: 0.5, master_seed: 9, ..Default::default() };
        let v = run_votes(&st, &rule, &c, 4).unwrap();
        let freq = v.include_counts[0] as f64 / 100_000.0;
        assert!((freq - 0.5).abs() <= 0.01, "{freq}");
    }

    #[test]
    fn votes_independent_of_worker_count() {
        let st = tensor(30, 16, 2);
        let rule = TopKRule::new(0.4, ScoreKind::Activation).unwrap();
        let c = CertConfig { n_samples: 400, master_seed: 5, ..Default::default() };
        let one = run_votes(&st, &rule, &c, 1).unwrap();
        for w in [2, 3, 8] {
            assert_eq!(run_votes(&st, &rule, &c, w).unwrap(), one);
        }
    }

    #[test]
    fn report_layout() {
        let v = VoteTable { n_samples: 10, block_widths: vec![1, 2], include_counts: vec![10, 0, 5] };
        let m = certify(&v, &CertConfig { n_samples: 10, tau: 0.5, ..Default::default() }).unwrap();
        let r = CertReport::new(&v, &m);
        assert_eq!(r.vertex(2), VertexId::new(1, 1));
        assert_eq!(r.per_vertex[2].p_hat, 0.5);
        let csv = r.to_csv();
        assert!(csv.starts_with("layer,channel,count,p_hat,p_lower,decision\n0,0,10,1,"));
        assert_eq!(csv.lines().count(), 4);
    }
}
