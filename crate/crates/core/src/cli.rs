//! Command-line driver: `generate`, `train`, `eval` and `ablate`.
//!
//! Every command reads an optional JSON [`RunConfig`]; command-line flags
//! override the matching config fields. Relative paths inside a config file
//! resolve against the directory holding that file.
//!
//! Exit codes: 0 success, 2 usage/config/data error, 3 numerical failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{self, ClassifierConfig, LabelSet, TransferReport};
use crate::graph::{build_propagation, load_graph, Graph, GraphPair, GraphTag};
use crate::model::{encode, Checkpoint, EmbeddingMatrix};
use crate::synth::{generate_pair, SynthSpec};
use crate::train::{TrainConfig, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const LOG_ENV: &str = "DANE_LOG_LEVEL";

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const BEST_CHECKPOINT_FILE: &str = "best_checkpoint.json";
pub const LAST_GOOD_CHECKPOINT_FILE: &str = "last_good_checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const PROJECTION_FILE: &str = "projection.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ABLATION_FILE: &str = "ablation.json";

fn tag_lower(tag: GraphTag) -> &'static str {
    match tag {
        GraphTag::A => "a",
        GraphTag::B => "b",
    }
}

pub fn edges_file(tag: GraphTag) -> String {
    format!("{}.edges.tsv", tag_lower(tag))
}

pub fn features_file(tag: GraphTag) -> String {
    format!("{}.features.csv", tag_lower(tag))
}

pub fn labels_file(tag: GraphTag) -> String {
    format!("{}.labels.tsv", tag_lower(tag))
}

pub fn embeddings_file(tag: GraphTag) -> String {
    format!("embeddings_{}.csv", tag_lower(tag))
}

pub fn report_file(src: GraphTag) -> String {
    format!("report_{}_to_{}.json", src, src.other())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    AToB,
    BToA,
    #[default]
    Both,
}

impl Direction {
    /// Source graphs to train the classifier on.
    pub fn sources(self) -> Vec<GraphTag> {
        match self {
            Direction::AToB => vec![GraphTag::A],
            Direction::BToA => vec![GraphTag::B],
            Direction::Both => vec![GraphTag::A, GraphTag::B],
        }
    }
}

/// Input file locations. `dir` supplies the default names written by
/// `generate`; explicit paths take precedence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub dir: Option<PathBuf>,
    pub source_edges: Option<PathBuf>,
    pub source_features: Option<PathBuf>,
    pub source_labels: Option<PathBuf>,
    pub target_edges: Option<PathBuf>,
    pub target_features: Option<PathBuf>,
    pub target_labels: Option<PathBuf>,
}

impl DataPaths {
    fn pick(&self, explicit: &Option<PathBuf>, default: String, field: &str) -> Result<PathBuf> {
        match (explicit, &self.dir) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(d)) => Ok(d.join(default)),
            (None, None) => Err(Error::InvalidConfig(format!(
                "data.{field} is not set and data.dir is absent"
            ))),
        }
    }

    pub fn edges(&self, tag: GraphTag) -> Result<PathBuf> {
        match tag {
            GraphTag::A => self.pick(&self.source_edges, edges_file(tag), "source_edges"),
            GraphTag::B => self.pick(&self.target_edges, edges_file(tag), "target_edges"),
        }
    }

    pub fn features(&self, tag: GraphTag) -> Result<PathBuf> {
        match tag {
            GraphTag::A => self.pick(&self.source_features, features_file(tag), "source_features"),
            GraphTag::B => self.pick(&self.target_features, features_file(tag), "target_features"),
        }
    }

    pub fn labels(&self, tag: GraphTag) -> Result<PathBuf> {
        match tag {
            GraphTag::A => self.pick(&self.source_labels, labels_file(tag), "source_labels"),
            GraphTag::B => self.pick(&self.target_labels, labels_file(tag), "target_labels"),
        }
    }

    fn rebase(&mut self, base: &Path) {
        for p in [
            &mut self.dir,
            &mut self.source_edges,
            &mut self.source_features,
            &mut self.source_labels,
            &mut self.target_edges,
            &mut self.target_features,
            &mut self.target_labels,
        ]
        .into_iter()
        .flatten()
        {
            rebase(p, base);
        }
    }
}

fn rebase(p: &mut PathBuf, base: &Path) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

/// The single serializable description of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub classifier: ClassifierConfig,
    pub data: DataPaths,
    pub out: Option<PathBuf>,
    /// Checkpoint read by `eval`; defaults to the one `train` writes under `out`.
    pub checkpoint: Option<PathBuf>,
    pub direction: Direction,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.data.rebase(base);
        for p in [&mut cfg.out, &mut cfg.checkpoint].into_iter().flatten() {
            rebase(p, base);
        }
        Ok(cfg)
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("no output directory: pass --out or set \"out\"".into()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[derive(Debug, Parser)]
#[command(name = "dane", version, about = "Domain-adaptive node embeddings across two graphs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic graph pair with block labels.
    Generate(CommonArgs),
    /// Train the shared encoder and write checkpoints, embeddings and the log.
    Train(CommonArgs),
    /// Fit a classifier on one graph and report transfer to the other.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        direction: Option<Direction>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate with lambda 0 and lambda 1, then compare.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        direction: Option<Direction>,
    },
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "lambda")]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub disc_steps: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub neg_samples: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Graph B shift for `generate`.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Directory holding the files written by `generate`.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

impl CommonArgs {
    /// Loads the config file (if any) and applies flag overrides.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.train.seed = s;
            cfg.synth.seed = s;
            cfg.classifier.seed = s;
        }
        if let Some(v) = self.lambda {
            cfg.train.lambda = v;
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.disc_steps {
            cfg.train.disc_steps = v;
        }
        if let Some(v) = self.dim {
            cfg.train.embedding_dim = v;
        }
        if let Some(v) = self.neg_samples {
            cfg.train.negative_samples = v;
        }
        if let Some(v) = self.delta {
            cfg.synth.delta = v;
        }
        if let Some(v) = &self.out {
            cfg.out = Some(v.clone());
        }
        if let Some(v) = &self.data {
            cfg.data.dir = Some(v.clone());
        }
        Ok(cfg)
    }
}

/// Maps a library error onto the process exit code contract.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFiniteLoss { .. } | Error::NonFinite(_) => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

/// Initializes logging from `DANE_LOG_LEVEL` (default `info`).
pub fn init_logging() -> Result<()> {
    let level = match std::env::var(LOG_ENV) {
        Ok(v) => match v.to_ascii_lowercase().as_str() {
            l @ ("error" | "warn" | "info" | "debug") => l.to_string(),
            other => {
                return Err(Error::InvalidConfig(format!(
                    "{LOG_ENV} must be one of error, warn, info, debug; got {other:?}"
                )))
            }
        },
        Err(_) => "info".to_string(),
    };
    // a second call in the same process keeps the first logger
    let _ = env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp(None)
        .try_init();
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Err(e) = init_logging() {
        eprintln!("error: {e}");
        return EXIT_USAGE;
    }
    match dispatch(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            if let Error::NonFiniteLoss { epoch, .. } = &e {
                error!("training diverged at epoch {epoch}");
            }
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

impl Command {
    /// The resolved run configuration: config file, then flag overrides.
    pub fn config(&self) -> Result<RunConfig> {
        match self {
            Command::Generate(args) | Command::Train(args) => args.resolve(),
            Command::Eval {
                common,
                direction,
                checkpoint,
            } => {
                let mut cfg = common.resolve()?;
                if let Some(d) = direction {
                    cfg.direction = *d;
                }
                if let Some(c) = checkpoint {
                    cfg.checkpoint = Some(c.clone());
                }
                Ok(cfg)
            }
            Command::Ablate { common, direction } => {
                let mut cfg = common.resolve()?;
                if let Some(d) = direction {
                    cfg.direction = *d;
                }
                Ok(cfg)
            }
        }
    }
}

/// Parses `args` (including the program name) into a resolved configuration without running anything.
pub fn config_from_args<I, T>(args: I) -> Result<RunConfig>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    cli.command.config()
}

fn dispatch(cmd: &Command) -> Result<()> {
    let cfg = cmd.config()?;
    match cmd {
        Command::Generate(_) => cmd_generate(&cfg).map(|_| ()),
        Command::Train(_) => cmd_train(&cfg).map(|_| ()),
        Command::Eval { .. } => {
            for r in cmd_eval(&cfg)? {
                println!("{} micro_f1={:.4} macro_f1={:.4}", r.direction, r.micro_f1, r.macro_f1);
            }
            Ok(())
        }
        Command::Ablate { .. } => {
            let summary = cmd_ablate(&cfg)?;
            for d in &summary.directions {
                println!(
                    "{} macro_f1 {:.4} -> {:.4} ({:+.4}), mmd2 {:.5} -> {:.5}",
                    d.direction,
                    d.lambda_0.macro_f1,
                    d.lambda_1.macro_f1,
                    d.macro_f1_diff,
                    d.lambda_0.mmd2,
                    d.lambda_1.mmd2
                );
            }
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub spec: SynthSpec,
    pub files: Vec<String>,
}

/// Writes both graphs' edge, feature and label files plus `manifest.json`.
/// Returns the paths written.
pub fn cmd_generate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let out = cfg.out_dir()?;
    let synth = generate_pair(&cfg.synth)?;
    create_dir(out)?;
    let mut names = Vec::new();
    for (tag, labels) in [GraphTag::A, GraphTag::B].into_iter().zip(&synth.labels) {
        let g = synth.pair.get(tag);
        g.write_edges(&out.join(edges_file(tag)))?;
        g.write_features(&out.join(features_file(tag)))?;
        labels.write(&out.join(labels_file(tag)))?;
        names.extend([edges_file(tag), features_file(tag), labels_file(tag)]);
    }
    let manifest = Manifest {
        seed: cfg.synth.seed,
        spec: cfg.synth.clone(),
        files: names.clone(),
    };
    write_file(
        &out.join(MANIFEST_FILE),
        &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    names.push(MANIFEST_FILE.to_string());
    info!(
        "wrote {} nodes per graph ({} / {} edges) to {}",
        cfg.synth.num_nodes(),
        synth.pair.source.num_edges(),
        synth.pair.target.num_edges(),
        out.display()
    );
    Ok(names.into_iter().map(|n| out.join(n)).collect())
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found"),
        ))
    }
}

/// Loads both graphs after checking that every input path exists.
pub fn load_pair(data: &DataPaths) -> Result<GraphPair> {
    let mut paths = Vec::new();
    for tag in [GraphTag::A, GraphTag::B] {
        paths.push((data.edges(tag)?, data.features(tag)?));
    }
    for (e, f) in &paths {
        require_file(e)?;
        require_file(f)?;
    }
    let load = |(e, f): &(PathBuf, PathBuf)| -> Result<Graph> { load_graph(e, f) };
    GraphPair::new(load(&paths[0])?, load(&paths[1])?)
}

fn load_labels(data: &DataPaths, pair: &GraphPair) -> Result<[LabelSet; 2]> {
    let paths = [data.labels(GraphTag::A)?, data.labels(GraphTag::B)?];
    for p in &paths {
        require_file(p)?;
    }
    Ok([
        LabelSet::load(&paths[0], GraphTag::A, pair.source.num_nodes())?,
        LabelSet::load(&paths[1], GraphTag::B, pair.target.num_nodes())?,
    ])
}

/// Files produced by [`cmd_train`].
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub embeddings: [PathBuf; 2],
    pub log: PathBuf,
}

/// Trains on the configured pair and writes checkpoints, embeddings and the log.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutput> {
    cfg.train.validate()?;
    let out = cfg.out_dir()?.to_path_buf();
    let pair = load_pair(&cfg.data)?;
    create_dir(&out)?;
    let epochs = cfg.train.epochs;
    let mut trainer = Trainer::new(&pair, cfg.train.clone())?;
    let every = (epochs / 10).max(1);
    for e in 0..epochs {
        match trainer.run_epoch() {
            Ok(r) => {
                if (e + 1) % every == 0 || e + 1 == epochs {
                    info!(
                        "epoch {}/{}: l_gcn={:.4} l_d={:.4} l_adv={:.4} scores {:.3}/{:.3}",
                        e + 1,
                        epochs,
                        r.l_gcn,
                        r.l_d,
                        r.l_adv,
                        r.mean_score_src,
                        r.mean_score_tgt
                    );
                }
            }
            Err(Error::NonFiniteLoss {
                epoch,
                detail,
                last_good,
            }) => {
                if let Some(ck) = &last_good {
                    let path = out.join(LAST_GOOD_CHECKPOINT_FILE);
                    ck.save(&path)?;
                    warn!("last finite parameters saved to {}", path.display());
                }
                trainer.log().write_csv(&out.join(TRAIN_LOG_FILE))?;
                return Err(Error::NonFiniteLoss {
                    epoch,
                    detail,
                    last_good,
                });
            }
            Err(e) => return Err(e),
        }
    }
    let final_ck = trainer.checkpoint();
    let fit = trainer.finish()?;
    let result = TrainOutput {
        checkpoint: out.join(CHECKPOINT_FILE),
        best_checkpoint: out.join(BEST_CHECKPOINT_FILE),
        embeddings: [
            out.join(embeddings_file(GraphTag::A)),
            out.join(embeddings_file(GraphTag::B)),
        ],
        log: out.join(TRAIN_LOG_FILE),
    };
    final_ck.save(&result.checkpoint)?;
    fit.best.as_ref().unwrap_or(&final_ck).save(&result.best_checkpoint)?;
    for (emb, path) in fit.embeddings.iter().zip(&result.embeddings) {
        emb.write_csv(path)?;
    }
    fit.log.write_csv(&result.log)?;
    info!("wrote checkpoint, embeddings and log to {}", out.display());
    Ok(result)
}

/// Embeds both graphs with the encoder stored in `ck`.
pub fn embed_pair(ck: &Checkpoint, pair: &GraphPair) -> Result<[EmbeddingMatrix; 2]> {
    let mut out = Vec::new();
    for tag in [GraphTag::A, GraphTag::B] {
        let g = pair.get(tag);
        if ck.encoder.input_dim() != g.feature_dim() {
            return Err(Error::InvalidConfig(format!(
                "checkpoint expects {} input features, graph {tag} has {}",
                ck.encoder.input_dim(),
                g.feature_dim()
            )));
        }
        out.push(encode(&ck.encoder, tag, &build_propagation(g), g.features())?);
    }
    let b = out.pop().expect("two graphs");
    let a = out.pop().expect("two graphs");
    Ok([a, b])
}

fn side(tag: GraphTag) -> usize {
    match tag {
        GraphTag::A => 0,
        GraphTag::B => 1,
    }
}

/// Transfer reports for the configured directions, plus the pooled projection CSV.
pub fn evaluate_embeddings(
    emb: &[EmbeddingMatrix; 2],
    labels: &[LabelSet; 2],
    direction: Direction,
    clf: &ClassifierConfig,
) -> Result<(Vec<TransferReport>, String)> {
    let mut reports = Vec::new();
    for src in direction.sources() {
        let (s, t) = (side(src), side(src.other()));
        let r = eval::transfer((&emb[s], &labels[s]), (&emb[t], &labels[t]), clf)?;
        reports.push(r);
    }
    let proj = eval::project_2d(&[&emb[0], &emb[1]])?;
    let csv = eval::projection_csv(&proj, &[(&emb[0], Some(&labels[0])), (&emb[1], Some(&labels[1]))]);
    Ok((reports, csv))
}

/// Evaluates a checkpoint: writes one report per direction and the projection CSV.
pub fn cmd_eval(cfg: &RunConfig) -> Result<Vec<TransferReport>> {
    let out = cfg.out_dir()?.to_path_buf();
    let ck_path = cfg.checkpoint.clone().unwrap_or_else(|| out.join(CHECKPOINT_FILE));
    require_file(&ck_path)?;
    let pair = load_pair(&cfg.data)?;
    let labels = load_labels(&cfg.data, &pair)?;
    let ck = Checkpoint::load(&ck_path)?;
    let emb = embed_pair(&ck, &pair)?;
    let (reports, csv) = evaluate_embeddings(&emb, &labels, cfg.direction, &cfg.classifier)?;
    create_dir(&out)?;
    for (src, r) in cfg.direction.sources().into_iter().zip(&reports) {
        write_file(&out.join(report_file(src)), &r.to_json())?;
        info!("{}: micro_f1={:.4} macro_f1={:.4}", r.direction, r.micro_f1, r.macro_f1);
    }
    write_file(&out.join(PROJECTION_FILE), &csv)?;
    Ok(reports)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationScores {
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub mmd2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationDirection {
    pub direction: String,
    pub lambda_0: AblationScores,
    pub lambda_1: AblationScores,
    /// `lambda_1 − lambda_0`.
    pub micro_f1_diff: f64,
    pub macro_f1_diff: f64,
    pub mmd2_diff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub directions: Vec<AblationDirection>,
}

/// Runs train + eval with λ = 0 and λ = 1 under `out/lambda_0` and
/// `out/lambda_1`, then writes the comparison to `out/ablation.json`.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<AblationSummary> {
    let out = cfg.out_dir()?.to_path_buf();
    let mut runs = Vec::new();
    for (lambda, name) in [(0.0, "lambda_0"), (1.0, "lambda_1")] {
        let mut c = cfg.clone();
        c.train.lambda = lambda;
        c.out = Some(out.join(name));
        c.checkpoint = None;
        info!("ablation run {name}");
        cmd_train(&c)?;
        runs.push(cmd_eval(&c)?);
    }
    let scores = |r: &TransferReport| AblationScores {
        micro_f1: r.micro_f1,
        macro_f1: r.macro_f1,
        mmd2: r.mmd2.unwrap_or(f64::NAN),
    };
    let directions = runs[0]
        .iter()
        .zip(&runs[1])
        .map(|(r0, r1)| {
            let (s0, s1) = (scores(r0), scores(r1));
            AblationDirection {
                direction: r0.direction.clone(),
                micro_f1_diff: s1.micro_f1 - s0.micro_f1,
                macro_f1_diff: s1.macro_f1 - s0.macro_f1,
                mmd2_diff: s1.mmd2 - s0.mmd2,
                lambda_0: s0,
                lambda_1: s1,
            }
        })
        .collect();
    let summary = AblationSummary { directions };
    write_file(
        &out.join(ABLATION_FILE),
        &serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    Ok(summary)
}
