//! `certcirc` command-line front end.
//!
//! Every subcommand prints one JSON summary line on stdout. Failures print
//! `{"error": kind, "message": ...}` on stderr and exit 1; an oracle
//! violation from `verify` exits 2.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use certcirc::circuit::{effective_k, induce_baseline, induce_certified, Circuit};
use certcirc::datasets::{gen_synthetic, ConceptDataset, ConceptRef, DeletionMask, LabeledDataset, SynthConfig};
use certcirc::evaluation::{cacc, stability_iou, sweep, DatasetTag, SweepInputs};
use certcirc::graph_model::{train_toy, NetworkSpec, ToyTrainConfig};
use certcirc::oracle::{self, TinyInstance};
use certcirc::scoring::{compute_scores, discover, ScoreKind, ScoreTensor, TopKRule};
use certcirc::smoothing::{certify, radius_table, run_votes, CertConfig, CertReport, Decision};

#[derive(Parser, Debug)]
#[command(name = "certcirc", version, about = "Certified circuit discovery via dataset-deletion smoothing")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Seed for data generation, training and Monte-Carlo sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// JSON config file; explicit flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Indent JSON files and print a human-readable table after the summary.
    #[arg(long, global = true)]
    pretty: bool,

    /// Monte-Carlo worker threads (results do not depend on this).
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the planted-spurious-feature task.
    GenData,
    /// Train a toy ReLU network.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Compute per-example vertex scores for concept datasets.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "concept", required = true, num_args = 1..)]
        concepts: Vec<PathBuf>,
        #[arg(long)]
        score: Option<ScoreKind>,
    },
    /// Baseline top-K circuits.
    Discover {
        #[arg(long = "scores", required = true, num_args = 1..)]
        scores: Vec<PathBuf>,
        #[arg(long)]
        k: Option<f64>,
    },
    /// Smoothed votes, certification report and certified circuits.
    Certify {
        #[arg(long = "scores", required = true, num_args = 1..)]
        scores: Vec<PathBuf>,
        #[arg(long)]
        k: Option<f64>,
        #[command(flatten)]
        cert: CertArgs,
    },
    /// cACC/oACC of circuits paired with concept datasets by position.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "circuit", required = true, num_args = 1..)]
        circuits: Vec<PathBuf>,
        #[arg(long = "concept", required = true, num_args = 1..)]
        concepts: Vec<PathBuf>,
        #[arg(long)]
        tag: Option<DatasetTag>,
    },
    /// cACC/oACC over a grid of K values.
    Sweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "scores", required = true, num_args = 1..)]
        scores: Vec<PathBuf>,
        /// Evaluation datasets, paired with `--scores` by position.
        #[arg(long = "concept", required = true, num_args = 1..)]
        concepts: Vec<PathBuf>,
        /// Comma-separated K values.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        /// Sweep certified circuits instead of baseline ones.
        #[arg(long)]
        certified: bool,
        #[arg(long)]
        tag: Option<DatasetTag>,
        #[command(flatten)]
        cert: CertArgs,
    },
    /// Per-class IoU between two circuit sets paired by position.
    Iou {
        #[arg(long = "a", required = true, num_args = 1..)]
        a: Vec<PathBuf>,
        #[arg(long = "b", required = true, num_args = 1..)]
        b: Vec<PathBuf>,
    },
    /// Exhaustive check of the radius guarantee on random tiny instances.
    Verify {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        max_base: Option<usize>,
        #[arg(long)]
        max_universe: Option<usize>,
        #[arg(long)]
        max_dist: Option<usize>,
        #[arg(long)]
        p_del: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Certified radius over a tau x p_del grid, as CSV.
    RadiusTable {
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        p_dels: Option<Vec<f64>>,
    },
}

#[derive(Args, Debug, Default)]
struct CertArgs {
    #[arg(long)]
    p_del: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    n_samples: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Bonferroni-correct the confidence level over all vertices.
    #[arg(long)]
    simultaneous: bool,
}

/// Contents of `--config`. Keys not listed here are rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    workers: Option<usize>,
    synth: Option<SynthConfig>,
    train: Option<ToyTrainConfig>,
    score: Option<ScoreKind>,
    k: Option<f64>,
    grid: Option<Vec<f64>>,
    p_del: Option<f64>,
    tau: Option<f64>,
    n_samples: Option<u64>,
    alpha: Option<f64>,
    simultaneous: Option<bool>,
    certified: Option<bool>,
    dataset_tag: Option<DatasetTag>,
    count: Option<usize>,
    max_base: Option<usize>,
    max_universe: Option<usize>,
    max_dist: Option<usize>,
    taus: Option<Vec<f64>>,
    p_dels: Option<Vec<f64>>,
}

const DEFAULT_K: f64 = 0.5;
const DEFAULT_GRID: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
const DEFAULT_TAUS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];
const DEFAULT_P_DELS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

struct Ctx {
    seed: u64,
    out: PathBuf,
    pretty: bool,
    workers: usize,
    file: FileConfig,
    written: Vec<String>,
}

/// Result of a successful command: its summary and an optional table.
struct Outcome {
    summary: Value,
    table: Option<String>,
    violation: bool,
}

impl Outcome {
    fn new(summary: Value) -> Self {
        Self { summary, table: None, violation: false }
    }

    fn table(mut self, table: String) -> Self {
        self.table = Some(table);
        self
    }
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.written.push(path.display().to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut s = if self.pretty {
            serde_json::to_string_pretty(value)?
        } else {
            serde_json::to_string(value)?
        };
        s.push('\n');
        self.write_bytes(name, s.as_bytes())
    }

    fn cert_config(&self, args: &CertArgs) -> Result<CertConfig> {
        let f = &self.file;
        let d = CertConfig::default();
        let cfg = CertConfig {
            p_del: args.p_del.or(f.p_del).unwrap_or(d.p_del),
            tau: args.tau.or(f.tau).unwrap_or(d.tau),
            n_samples: args.n_samples.or(f.n_samples).unwrap_or(d.n_samples),
            alpha: args.alpha.or(f.alpha).unwrap_or(d.alpha),
            simultaneous: args.simultaneous || f.simultaneous.unwrap_or(false),
            master_seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn k(&self, flag: Option<f64>) -> Result<f64> {
        let k = flag.or(self.file.k).unwrap_or(DEFAULT_K);
        if !(k > 0.0 && k <= 1.0) {
            bail!(certcirc::Error::Config(format!("k must lie in (0,1], got {k}")));
        }
        Ok(k)
    }
}

fn stem(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .with_context(|| format!("no file name in {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&s)
        .map_err(certcirc::Error::from)
        .with_context(|| format!("parsing {}", path.display()))
}

fn read_model(path: &Path) -> Result<NetworkSpec> {
    let s = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    NetworkSpec::from_json(&s).with_context(|| format!("loading model {}", path.display()))
}

fn read_dataset(path: &Path) -> Result<LabeledDataset> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    LabeledDataset::read_jsonl(BufReader::new(f)).with_context(|| format!("loading {}", path.display()))
}

fn read_scores(path: &Path) -> Result<ScoreTensor> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    ScoreTensor::read_ccsc(BufReader::new(f)).with_context(|| format!("loading {}", path.display()))
}

fn read_circuit(path: &Path) -> Result<Circuit> {
    let s = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Circuit::from_json(&s).with_context(|| format!("loading circuit {}", path.display()))
}

/// Loads concept files, resolving each parent path relative to the file.
fn read_concepts(paths: &[PathBuf]) -> Result<Vec<ConceptDataset>> {
    let mut parents: HashMap<PathBuf, LabeledDataset> = HashMap::new();
    paths
        .iter()
        .map(|p| {
            let r: ConceptRef = read_json(p)?;
            let parent = p.parent().unwrap_or(Path::new(".")).join(&r.parent);
            if !parents.contains_key(&parent) {
                parents.insert(parent.clone(), read_dataset(&parent)?);
            }
            Ok(ConceptDataset::from_ref(&r, &parents[&parent])?)
        })
        .collect()
}

fn by_class<T>(items: impl IntoIterator<Item = (usize, T)>) -> Result<BTreeMap<usize, T>> {
    let mut out = BTreeMap::new();
    for (class, item) in items {
        if out.insert(class, item).is_some() {
            bail!(certcirc::Error::Invalid(format!("class {class} given twice")));
        }
    }
    Ok(out)
}

fn paired<'a, A, B>(a: &'a [A], b: &'a [B], what: &str) -> Result<impl Iterator<Item = (&'a A, &'a B)>> {
    if a.len() != b.len() {
        bail!(certcirc::Error::Invalid(format!("{what}: {} vs {} files", a.len(), b.len())));
    }
    Ok(a.iter().zip(b))
}

fn gen_data(ctx: &mut Ctx) -> Result<Outcome> {
    let mut cfg = ctx.file.synth.clone().unwrap_or_default();
    cfg.seed = ctx.seed;
    let task = gen_synthetic(&cfg)?;
    for (name, ds) in [("train", &task.train), ("in_dist", &task.in_dist), ("shifted", &task.shifted)] {
        let mut buf = Vec::new();
        ds.write_jsonl(&mut buf)?;
        ctx.write_bytes(&format!("{name}.jsonl"), &buf)?;
    }
    for (name, concepts) in [("in_dist", &task.concepts), ("shifted", &task.shifted_concepts)] {
        for d in concepts.iter() {
            let r = d.to_ref(&format!("../{name}.jsonl"));
            ctx.write_json(&format!("concepts/{name}_c{}.json", d.concept_class), &r)?;
        }
    }
    ctx.write_json("synth_config.json", &cfg)?;
    Ok(Outcome::new(json!({
        "num_classes": cfg.num_classes,
        "input_dim": cfg.input_dim(),
        "train_examples": task.train.examples.len(),
        "concept_examples": cfg.examples_per_class,
    })))
}

fn train(ctx: &mut Ctx, data: &Path) -> Result<Outcome> {
    let mut cfg = ctx.file.train.clone().unwrap_or_default();
    cfg.seed = ctx.seed;
    let ds = read_dataset(data)?;
    let model = train_toy(&cfg, &ds)?;
    ctx.write_json("model.json", &model.net)?;
    Ok(Outcome::new(json!({
        "train_accuracy": model.train_accuracy,
        "block_widths": model.net.block_widths(),
    })))
}

fn score(ctx: &mut Ctx, model: &Path, concepts: &[PathBuf], kind: Option<ScoreKind>) -> Result<Outcome> {
    let kind = kind.or(ctx.file.score).unwrap_or(ScoreKind::Activation);
    let net = read_model(model)?;
    let datasets = read_concepts(concepts)?;
    let mut files = Vec::new();
    for (path, d) in concepts.iter().zip(&datasets) {
        let st = compute_scores(&net, d, kind, d.concept_class)?;
        let name = format!("{}.{kind}.ccsc", stem(path)?);
        ctx.write_bytes(&name, &st.to_ccsc_bytes()?)?;
        files.push(json!({ "concept_class": d.concept_class, "rows": st.rows(), "file": name }));
    }
    Ok(Outcome::new(json!({ "score_kind": kind, "tensors": files })))
}

fn circuit_summary(name: &str, class: usize, c: &Circuit) -> Value {
    json!({
        "target_class": class,
        "file": name,
        "vertices": c.len(),
        "effective_k": effective_k(c).overall,
    })
}

fn discover_cmd(ctx: &mut Ctx, scores: &[PathBuf], k: Option<f64>) -> Result<Outcome> {
    let k = ctx.k(k)?;
    let mut out = Vec::new();
    let mut table = String::from("class  vertices  effective_k\n");
    for path in scores {
        let st = read_scores(path)?;
        let rule = TopKRule::new(k, st.kind())?;
        let mask = discover(&st, &DeletionMask::all(st.rows(), true), &rule)?;
        let c = induce_baseline(&mask, st.block_widths(), k, st.kind())?;
        let name = format!("{}.circuit.json", stem(path)?);
        ctx.write_bytes(&name, format!("{}\n", c.to_json()?).as_bytes())?;
        let s = circuit_summary(&name, st.target_class(), &c);
        table.push_str(&format!("{:>5}  {:>8}  {:>11.4}\n", st.target_class(), c.len(), effective_k(&c).overall));
        out.push(s);
    }
    Ok(Outcome::new(json!({ "k": k, "circuits": out })).table(table))
}

fn certify_cmd(ctx: &mut Ctx, scores: &[PathBuf], k: Option<f64>, args: &CertArgs) -> Result<Outcome> {
    let k = ctx.k(k)?;
    let cfg = ctx.cert_config(args)?;
    let mut out = Vec::new();
    let mut radius = None;
    let mut table = String::from("class     in    out  abstain  effective_k\n");
    for path in scores {
        let st = read_scores(path)?;
        let rule = TopKRule::new(k, st.kind())?;
        let votes = run_votes(&st, &rule, &cfg, ctx.workers)?;
        let mask = certify(&votes, &cfg)?;
        let report = CertReport::new(&votes, &mask);
        let c = induce_certified(&mask, k, st.kind());
        let base = stem(path)?;
        ctx.write_json(&format!("{base}.votes.json"), &votes)?;
        ctx.write_json(&format!("{base}.cert.json"), &report)?;
        ctx.write_bytes(&format!("{base}.cert.csv"), report.to_csv().as_bytes())?;
        let name = format!("{base}.circuit.json");
        ctx.write_bytes(&name, format!("{}\n", c.to_json()?).as_bytes())?;
        let mut s = circuit_summary(&name, st.target_class(), &c);
        let counts = [Decision::In, Decision::Out, Decision::Abstain].map(|d| mask.count(d));
        s["in"] = json!(counts[0]);
        s["out"] = json!(counts[1]);
        s["abstain"] = json!(counts[2]);
        table.push_str(&format!(
            "{:>5}  {:>5}  {:>5}  {:>7}  {:>11.4}\n",
            st.target_class(),
            counts[0],
            counts[1],
            counts[2],
            effective_k(&c).overall
        ));
        out.push(s);
        radius = Some(mask.radius);
    }
    Ok(Outcome::new(json!({ "k": k, "radius": radius, "config": cfg, "circuits": out })).table(table))
}

fn tag(ctx: &Ctx, flag: Option<DatasetTag>) -> DatasetTag {
    flag.or(ctx.file.dataset_tag).unwrap_or(DatasetTag::InDist)
}

fn evaluate_cmd(
    ctx: &mut Ctx,
    model: &Path,
    circuits: &[PathBuf],
    concepts: &[PathBuf],
    tag_flag: Option<DatasetTag>,
) -> Result<Outcome> {
    let net = read_model(model)?;
    let data = read_concepts(concepts)?;
    let pairs = paired(circuits, &data, "circuits and concepts")?;
    let mut refs = BTreeMap::new();
    let mut cs = Vec::new();
    for (path, d) in pairs {
        cs.push((d.concept_class, read_circuit(path)?));
        refs.insert(d.concept_class, path.file_name().unwrap_or_default().to_string_lossy().into_owned());
    }
    let circuits = by_class(cs)?;
    let data = by_class(data.into_iter().map(|d| (d.concept_class, d)))?;
    let mut report = cacc(&net, &circuits, &data, tag(ctx, tag_flag))?;
    for ce in &mut report.per_class {
        ce.circuit_ref = refs[&ce.class_id].clone();
    }
    ctx.write_json("eval.json", &report)?;
    let mut table = String::from("class  effective_k  class_acc  other_acc\n");
    for ce in &report.per_class {
        table.push_str(&format!("{:>5}  {:>11.4}  {:>9.4}  {:>9.4}\n", ce.class_id, ce.effective_k, ce.class_acc, ce.other_acc));
    }
    Ok(Outcome::new(json!({ "dataset_tag": report.dataset_tag, "aggregate": report.aggregate })).table(table))
}

#[allow(clippy::too_many_arguments)]
fn sweep_cmd(
    ctx: &mut Ctx,
    model: &Path,
    scores: &[PathBuf],
    concepts: &[PathBuf],
    grid: Option<Vec<f64>>,
    certified: bool,
    tag_flag: Option<DatasetTag>,
    args: &CertArgs,
) -> Result<Outcome> {
    let net = read_model(model)?;
    let grid = grid.or(ctx.file.grid.clone()).unwrap_or(DEFAULT_GRID.to_vec());
    let certified = certified || ctx.file.certified.unwrap_or(false);
    let cert = if certified { Some(ctx.cert_config(args)?) } else { None };
    let data = read_concepts(concepts)?;
    let mut tensors = Vec::new();
    for (path, d) in paired(scores, &data, "scores and concepts")? {
        let st = read_scores(path)?;
        if st.target_class() != d.concept_class {
            bail!(certcirc::Error::Invalid(format!(
                "{} scores class {} but is paired with class {}",
                path.display(),
                st.target_class(),
                d.concept_class
            )));
        }
        tensors.push((d.concept_class, st));
    }
    let kind = match tensors.first() {
        Some((_, st)) => st.kind(),
        None => bail!(certcirc::Error::Invalid("no score tensors".into())),
    };
    let scores = by_class(tensors)?;
    let eval = by_class(data.into_iter().map(|d| (d.concept_class, d)))?;
    let inputs = SweepInputs { net: &net, scores: &scores, eval: &eval, dataset_tag: tag(ctx, tag_flag), workers: ctx.workers };
    let result = sweep(&inputs, kind, cert.as_ref(), &grid)?;
    ctx.write_bytes("sweep.csv", result.to_csv().as_bytes())?;
    let mut table = String::from("k_requested  mean_effective_k    cacc    oacc\n");
    for r in &result.per_k {
        table.push_str(&format!("{:>11.4}  {:>16.4}  {:.4}  {:.4}\n", r.k_requested, r.mean_effective_k, r.cacc, r.oacc));
    }
    Ok(Outcome::new(json!({
        "paradigm": result.paradigm,
        "score_kind": result.score_kind,
        "dataset_tag": result.dataset_tag,
        "peak": result.peak,
    }))
    .table(table))
}

fn iou_cmd(ctx: &mut Ctx, a: &[PathBuf], b: &[PathBuf]) -> Result<Outcome> {
    let mut ca = Vec::new();
    let mut cb = Vec::new();
    for (i, (pa, pb)) in paired(a, b, "circuit sets")?.enumerate() {
        ca.push((i, read_circuit(pa)?));
        cb.push((i, read_circuit(pb)?));
    }
    let report = stability_iou(&by_class(ca)?, &by_class(cb)?)?;
    ctx.write_json("iou.json", &report)?;
    Ok(Outcome::new(json!({ "median": report.median, "q1": report.q1, "q3": report.q3 })))
}

fn verify_cmd(
    ctx: &mut Ctx,
    count: Option<usize>,
    max_base: Option<usize>,
    max_universe: Option<usize>,
    max_dist: Option<usize>,
    p_del: Option<f64>,
    tau: Option<f64>,
) -> Result<Outcome> {
    let f = &ctx.file;
    let count = count.or(f.count).unwrap_or(50);
    let max_base = max_base.or(f.max_base).unwrap_or(6);
    let max_universe = max_universe.or(f.max_universe).unwrap_or(8);
    let max_dist = max_dist.or(f.max_dist).unwrap_or(oracle::MAX_NEIGHBORHOOD_DIST);
    let p_del = p_del.or(f.p_del).unwrap_or(0.9);
    let tau = tau.or(f.tau).unwrap_or(0.95);
    let mut reports = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let inst = TinyInstance::random(ctx.seed.wrapping_add(i), max_base, max_universe, p_del, tau)?;
        reports.push(oracle::verify_theorem(&inst, max_dist)?);
    }
    let violations: usize = reports.iter().map(|r| r.violations.len()).sum();
    let checked: usize = reports.iter().map(|r| r.checked).sum();
    ctx.write_json("verify.json", &reports)?;
    let mut outcome = Outcome::new(json!({
        "instances": count,
        "radius": reports.first().map(|r| r.radius),
        "checked": checked,
        "violations": violations,
    }));
    outcome.violation = violations > 0;
    Ok(outcome)
}

fn radius_table_cmd(ctx: &mut Ctx, taus: Option<Vec<f64>>, p_dels: Option<Vec<f64>>) -> Result<Outcome> {
    let taus = taus.or(ctx.file.taus.clone()).unwrap_or(DEFAULT_TAUS.to_vec());
    let p_dels = p_dels.or(ctx.file.p_dels.clone()).unwrap_or(DEFAULT_P_DELS.to_vec());
    let rows = radius_table(&taus, &p_dels)?;
    let mut csv = String::from("tau,p_del,radius\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{}\n", r.tau, r.p_del, r.radius));
    }
    ctx.write_bytes("radius_table.csv", csv.as_bytes())?;
    let max = rows.iter().map(|r| r.radius).max();
    Ok(Outcome::new(json!({ "rows": rows.len(), "max_radius": max })).table(csv))
}

fn run(cli: Cli) -> Result<Outcome> {
    let file: FileConfig = match &cli.config {
        Some(p) => read_json(p)?,
        None => FileConfig::default(),
    };
    let mut ctx = Ctx {
        seed: cli.seed.or(file.seed).unwrap_or(0),
        out: cli.out.clone().unwrap_or_else(|| PathBuf::from(".")),
        pretty: cli.pretty,
        workers: cli.workers.or(file.workers).unwrap_or(1),
        file,
        written: Vec::new(),
    };
    let (name, mut outcome) = match cli.command {
        Command::GenData => ("gen-data", gen_data(&mut ctx)?),
        Command::Train { data } => ("train", train(&mut ctx, &data)?),
        Command::Score { model, concepts, score: kind } => ("score", score(&mut ctx, &model, &concepts, kind)?),
        Command::Discover { scores, k } => ("discover", discover_cmd(&mut ctx, &scores, k)?),
        Command::Certify { scores, k, cert } => ("certify", certify_cmd(&mut ctx, &scores, k, &cert)?),
        Command::Evaluate { model, circuits, concepts, tag } => {
            ("evaluate", evaluate_cmd(&mut ctx, &model, &circuits, &concepts, tag)?)
        }
        Command::Sweep { model, scores, concepts, grid, certified, tag, cert } => {
            ("sweep", sweep_cmd(&mut ctx, &model, &scores, &concepts, grid, certified, tag, &cert)?)
        }
        Command::Iou { a, b } => ("iou", iou_cmd(&mut ctx, &a, &b)?),
        Command::Verify { count, max_base, max_universe, max_dist, p_del, tau } => {
            ("verify", verify_cmd(&mut ctx, count, max_base, max_universe, max_dist, p_del, tau)?)
        }
        Command::RadiusTable { taus, p_dels } => ("radius-table", radius_table_cmd(&mut ctx, taus, p_dels)?),
    };
    if let Value::Object(map) = &mut outcome.summary {
        map.insert("command".into(), json!(name));
        map.insert("seed".into(), json!(ctx.seed));
        map.insert("files".into(), json!(ctx.written));
    }
    if !ctx.pretty {
        outcome.table = None;
    }
    Ok(outcome)
}

fn error_json(err: &anyhow::Error) -> Value {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<certcirc::Error>())
        .map(certcirc::Error::kind)
        .or_else(|| err.chain().find_map(|e| e.downcast_ref::<std::io::Error>()).map(|_| "io"))
        .unwrap_or("error");
    // Library errors wrap their source and repeat its text; keep each
    // message fragment once.
    let mut message = String::new();
    for part in err.chain().map(|e| e.to_string()) {
        if !message.ends_with(&part) {
            if !message.is_empty() {
                message.push_str(": ");
            }
            message.push_str(&part);
        }
    }
    json!({ "error": kind, "message": message })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                // --help / --version
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            eprintln!("{}", json!({ "error": "usage", "message": e.to_string().trim_end() }));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(outcome) => {
            let mut stdout = std::io::stdout().lock();
            let _ = writeln!(stdout, "{}", outcome.summary);
            if let Some(table) = outcome.table {
                let _ = write!(stdout, "{table}");
            }
            if outcome.violation {
                eprintln!("{}", json!({ "error": "violation", "message": "oracle found certificate violations" }));
                return ExitCode::from(2);
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{}", error_json(&err));
            ExitCode::from(1)
        }
    }
}
