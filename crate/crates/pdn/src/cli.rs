//! Command-line pipeline: prepare -> train -> build-index -> retrieve ->
//! eval. Every stage writes its artifact plus a run manifest (input
//! hashes, resolved config, timing) under the output directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline_cf::{CfMatrix, CoocStats};
use crate::evaluation::{evaluate, item_to_item_evaluate, EvalReport, PdnScorer, Protocol};
use crate::features::default_schema_set;
use crate::index::{build_index, generate_candidate_pairs, load_index, save_index, IndexError};
use crate::model::{ModelConfig, PdnModel};
use crate::retrieval::{retrieve, user_triggers};
use crate::training::{load_log, split_leave_one_out, train, InteractionLog, TrainConfig, TrainError};

/// Errors carry their process exit code: 2 for data problems, 3 for a
/// model/index id mismatch, 4 for an unknown user, 1 otherwise.
#[derive(Debug)]
pub enum CliError {
    Data(String),
    IdMismatch(String),
    UnknownUser(String),
    Other(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::IdMismatch(m) => write!(f, "id mismatch: {m}"),
            CliError::UnknownUser(m) => write!(f, "unknown user: {m}"),
            CliError::Other(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Data(_) => 2,
            CliError::IdMismatch(_) => 3,
            CliError::UnknownUser(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::MalformedRow { .. }
            | TrainError::EmptyDataset { .. }
            | TrainError::UnsupportedFormat(_)
            | TrainError::Io(_) => CliError::Data(e.to_string()),
            TrainError::UnknownUser(u) => CliError::UnknownUser(u),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<IndexError> for CliError {
    fn from(e: IndexError) -> Self {
        match e {
            IndexError::ModelIdMismatch { .. } => CliError::IdMismatch(e.to_string()),
            IndexError::Io(_) | IndexError::Corrupt(_) => CliError::Data(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<crate::model::ModelError> for CliError {
    fn from(e: crate::model::ModelError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<crate::retrieval::RetrievalError> for CliError {
    fn from(e: crate::retrieval::RetrievalError) -> Self {
        match e {
            crate::retrieval::RetrievalError::Index(ie) => ie.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

// ---- run configuration ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub path: PathBuf,
    pub format: String,
    pub min_interactions: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: PathBuf::from("interactions.tsv"),
            format: "tsv".into(),
            min_interactions: 20,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct IndexConfig {
    pub k: usize,
    pub k_hat: usize,
    pub session_window_secs: i64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig {
            k: 60,
            k_hat: 600,
            session_window_secs: 3600,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub m: usize,
    pub k: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig { m: 20, k: 100 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// "all", "sampled", or "both"
    pub protocol: String,
    pub negatives: usize,
    pub seed: u64,
    pub k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            protocol: "sampled".into(),
            negatives: 100,
            seed: 42,
            k: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub index: IndexConfig,
    pub retrieval: RetrievalConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

// ---- argument surface ----

#[derive(Debug, Parser)]
#[command(name = "pdn", about = "Path-based candidate matching pipeline")]
pub struct Cli {
    /// Run configuration TOML; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the training seed from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores; training is sequential).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "pdn-out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse the raw log, apply the minimum-interaction filter, and write
    /// the leave-one-out split.
    Prepare {
        /// Raw interaction TSV; overrides the config's data path.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train the model on the prepared split.
    Train,
    /// Build the offline similarity index from the trained model.
    BuildIndex,
    /// Retrieve top-K recommendations for one user.
    Retrieve {
        #[arg(long)]
        user: String,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
    },
    /// Evaluate the model, the similarity index, and the CF baseline.
    Eval {
        /// "all", "sampled", or "both"; overrides the config.
        #[arg(long)]
        protocol: Option<String>,
    },
}

// ---- manifest plumbing ----

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    stage: &'a str,
    inputs: BTreeMap<String, String>,
    config: &'a RunConfig,
    seed: u64,
    elapsed_secs: f64,
}

fn write_manifest(
    out: &Path,
    stage: &str,
    inputs: &[&Path],
    config: &RunConfig,
    started: Instant,
) -> Result<()> {
    let mut hashed = BTreeMap::new();
    for p in inputs {
        hashed.insert(p.display().to_string(), sha256_file(p)?);
    }
    let manifest = Manifest {
        stage,
        inputs: hashed,
        config,
        seed: config.training.seed,
        elapsed_secs: started.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CliError::Other(e.to_string()))?;
    std::fs::write(out.join(format!("manifest-{stage}.json")), json)?;
    Ok(())
}

fn write_resolved_config(out: &Path, config: &RunConfig) -> Result<()> {
    let text = toml::to_string_pretty(config).map_err(|e| CliError::Other(e.to_string()))?;
    std::fs::write(out.join("config-resolved.toml"), text)?;
    Ok(())
}

// ---- artifact paths ----

fn filtered_path(out: &Path) -> PathBuf {
    out.join("filtered.tsv")
}
fn train_path(out: &Path) -> PathBuf {
    out.join("train.tsv")
}
fn test_path(out: &Path) -> PathBuf {
    out.join("test.tsv")
}
fn model_dir(out: &Path) -> PathBuf {
    out.join("model")
}
fn index_path(out: &Path) -> PathBuf {
    out.join("index.bin")
}

fn log_row(log: &InteractionLog, u: u32, item: u32, ts: i64) -> String {
    let cat = log
        .item_category(item)
        .map_or("-".to_string(), |c| format!("c{c}"));
    format!("{}\t{}\t{}\t{}", log.user_key(u), log.item_key(item), ts, cat)
}

/// Reload the prepared corpus and re-derive the leave-one-out split. The
/// full filtered file (not the per-split views) is the interning source,
/// so item ids cover targets that only occur as held-out interactions.
fn load_split(out: &Path) -> Result<(InteractionLog, Vec<crate::training::TestCase>)> {
    let log = load_log(&filtered_path(out), "tsv", 1)?;
    Ok(split_leave_one_out(&log))
}

// ---- stage implementations ----

pub fn cmd_prepare(cli: &Cli, config: &RunConfig, input: Option<&Path>) -> Result<()> {
    let started = Instant::now();
    std::fs::create_dir_all(&cli.out)?;
    let input = input.unwrap_or(&config.data.path);
    let log = load_log(input, &config.data.format, config.data.min_interactions)?;
    let (train_log, test) = split_leave_one_out(&log);

    // the filtered file is what downstream stages reload; train/test views
    // are written alongside for inspection and external tooling
    let mut filtered_out = String::new();
    for u in 0..log.n_users() as u32 {
        for r in log.user_history(u) {
            let _ = writeln!(filtered_out, "{}", log_row(&log, u, r.item, r.timestamp));
        }
    }
    std::fs::write(filtered_path(&cli.out), filtered_out)?;

    let mut train_out = String::new();
    for u in 0..train_log.n_users() as u32 {
        for r in train_log.user_history(u) {
            let _ = writeln!(train_out, "{}", log_row(&log, u, r.item, r.timestamp));
        }
    }
    std::fs::write(train_path(&cli.out), train_out)?;

    let mut test_out = String::new();
    for case in &test {
        let _ = writeln!(
            test_out,
            "{}",
            log_row(&log, case.user, case.target, case.timestamp)
        );
    }
    std::fs::write(test_path(&cli.out), test_out)?;

    std::fs::write(
        cli.out.join("stats.txt"),
        format!("{}\ntest cases {}\n", log.summary(), test.len()),
    )?;

    write_resolved_config(&cli.out, config)?;
    write_manifest(&cli.out, "prepare", &[input], config, started)?;
    println!("prepared {} -> {}", log.summary(), cli.out.display());
    Ok(())
}

pub fn cmd_train(cli: &Cli, config: &RunConfig) -> Result<()> {
    let started = Instant::now();
    let (train_log, _) = load_split(&cli.out)?;
    let stats = CoocStats::from_log(&train_log);
    let schemas = default_schema_set(&train_log, &stats);
    let mut model = PdnModel::new(schemas, config.model.clone(), config.training.seed)?;
    let trace = train(&mut model, &train_log, &stats, &config.training)?;
    let dir = model_dir(&cli.out);
    model.save(&dir)?;

    let mut trace_out = String::from("epoch\tmean_loss\n");
    for (e, l) in trace.iter().enumerate() {
        let _ = writeln!(trace_out, "{e}\t{l}");
    }
    std::fs::write(cli.out.join("loss-trace.tsv"), trace_out)?;

    write_resolved_config(&cli.out, config)?;
    write_manifest(&cli.out, "train", &[&train_path(&cli.out)], config, started)?;
    println!(
        "trained model {} ({} epochs, final loss {:.6})",
        model.model_id(),
        trace.len(),
        trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn cmd_build_index(cli: &Cli, config: &RunConfig) -> Result<()> {
    let started = Instant::now();
    let (train_log, _) = load_split(&cli.out)?;
    let stats = CoocStats::from_log(&train_log);
    let model = PdnModel::load(&model_dir(&cli.out))?;
    let pairs = generate_candidate_pairs(&train_log, config.index.k_hat, config.index.session_window_secs);
    let index = build_index(&model, &train_log, &stats, &pairs, config.index.k)?;
    save_index(&index, &index_path(&cli.out))?;
    index.export_tsv(&cli.out.join("index.tsv"))?;

    write_resolved_config(&cli.out, config)?;
    write_manifest(
        &cli.out,
        "build-index",
        &[&train_path(&cli.out), &model_dir(&cli.out).join("checkpoint.bin")],
        config,
        started,
    )?;
    println!(
        "built index for model {} ({} items, k={}, skipped {})",
        index.model_id,
        index.n_items(),
        index.k,
        index.skipped_pairs
    );
    Ok(())
}

pub fn cmd_retrieve(
    cli: &Cli,
    config: &RunConfig,
    user_key: &str,
    k: Option<usize>,
    m: Option<usize>,
) -> Result<()> {
    let started = Instant::now();
    let (train_log, _) = load_split(&cli.out)?;
    let model = PdnModel::load(&model_dir(&cli.out))?;
    let index = load_index(&index_path(&cli.out))?;
    let user = train_log
        .user_id(user_key)
        .ok_or_else(|| CliError::UnknownUser(user_key.to_string()))?;
    let now = train_log
        .user_history(user)
        .last()
        .map_or(0, |r| r.timestamp + 1);
    let history = user_triggers(&train_log, user, now, config.training.n_max);
    let m = m.unwrap_or(config.retrieval.m);
    let k = k.unwrap_or(config.retrieval.k);
    let result = retrieve(&model, &index, &train_log, user, &history, m, k, None)?;

    println!("rank\titem\tscore\ttriggers");
    for (rank, c) in result.items.iter().enumerate() {
        let trigs: Vec<String> = c
            .triggers
            .iter()
            .map(|&j| train_log.item_key(j).to_string())
            .collect();
        println!(
            "{}\t{}\t{:.6}\t{}",
            rank + 1,
            train_log.item_key(c.item),
            c.score,
            trigs.join(",")
        );
    }
    eprintln!(
        "retrieved {} items in {} us ({} triggers missing from index)",
        result.items.len(),
        result.wall_micros,
        result.missing_triggers
    );
    write_manifest(
        &cli.out,
        "retrieve",
        &[&index_path(&cli.out), &model_dir(&cli.out).join("checkpoint.bin")],
        config,
        started,
    )?;
    Ok(())
}

fn protocols_for(config: &RunConfig, flag: Option<&str>) -> Result<Vec<Protocol>> {
    let sampled = Protocol::Sampled {
        n: config.eval.negatives,
        seed: config.eval.seed,
    };
    match flag.unwrap_or(&config.eval.protocol) {
        "all" => Ok(vec![Protocol::All]),
        "sampled" => Ok(vec![sampled]),
        "both" => Ok(vec![sampled, Protocol::All]),
        other => Err(CliError::Data(format!(
            "unknown protocol `{other}` (expected all, sampled, or both)"
        ))),
    }
}

pub fn cmd_eval(cli: &Cli, config: &RunConfig, protocol: Option<&str>) -> Result<Vec<EvalReport>> {
    let started = Instant::now();
    let (train_log, test) = load_split(&cli.out)?;
    let stats = CoocStats::from_log(&train_log);
    let model = PdnModel::load(&model_dir(&cli.out))?;
    let index = load_index(&index_path(&cli.out))?;
    index.verify_model_id(&model.model_id())?;
    let cf = CfMatrix::build(&train_log, &stats, config.index.k);

    let mut reports = Vec::new();
    for proto in protocols_for(config, protocol)? {
        let pdn = PdnScorer {
            model: &model,
            train: &train_log,
            stats: &stats,
            n_max: config.training.n_max,
        };
        reports.push(evaluate(&pdn, &train_log, &test, proto, config.eval.k));
        reports.push(item_to_item_evaluate(
            &index,
            "simnet-item-to-item",
            &train_log,
            &test,
            proto,
            config.eval.k,
        ));
        reports.push(item_to_item_evaluate(
            &cf,
            "pcf-item-to-item",
            &train_log,
            &test,
            proto,
            config.eval.k,
        ));
    }

    let mut tsv = String::new();
    for (i, r) in reports.iter().enumerate() {
        let body = r.to_tsv();
        if i == 0 {
            tsv.push_str(&body);
        } else {
            tsv.extend(body.lines().skip(1).map(|l| format!("{l}\n")));
        }
        print!("{}", r.summary());
    }
    std::fs::write(cli.out.join("eval-report.tsv"), tsv)?;

    write_resolved_config(&cli.out, config)?;
    write_manifest(
        &cli.out,
        "eval",
        &[
            &train_path(&cli.out),
            &test_path(&cli.out),
            &index_path(&cli.out),
            &model_dir(&cli.out).join("checkpoint.bin"),
        ],
        config,
        started,
    )?;
    Ok(reports)
}

/// Dispatch a parsed command line. Returns the error whose `exit_code`
/// the binary should propagate.
pub fn run(cli: &Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.training.seed = seed;
    }
    let body = || -> Result<()> {
        match &cli.command {
            Command::Prepare { input } => cmd_prepare(cli, &config, input.as_deref()),
            Command::Train => cmd_train(cli, &config),
            Command::BuildIndex => cmd_build_index(cli, &config),
            Command::Retrieve { user, k, m } => {
                cmd_retrieve(cli, &config, user, *k, *m)
            }
            Command::Eval { protocol } => cmd_eval(cli, &config, protocol.as_deref()).map(|_| ()),
        }
    };
    match cli.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| CliError::Other(e.to_string()))?
            .install(body),
        None => body(),
    }
}
