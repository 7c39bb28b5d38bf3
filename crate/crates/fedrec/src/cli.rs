//! Command-line front end: dataset tooling, training runs, oracle checks,
//! and metric export.
//!
//! Subcommands: `train`, `synth`, `verify`, `eval`. Datasets live in a
//! directory as `train.txt`/`test.txt`; a training run writes `trace.csv`,
//! `final.ckpt`, and `manifest.toml` into its output directory. Exit codes:
//! 0 success, 1 validation, 2 divergence, 3 I/O.

use crate::checkpoint;
use crate::client::OptimizerKind;
use crate::dataset::{self, DatasetSplit};
use crate::error::{Error, Result};
use crate::eval::{evaluate_detailed, EvalReport, UserMetrics};
use crate::oracle;
use crate::protocol::{
    self, ExperimentConfig, SchemeSpec, TraceRecord, TrainState,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Parser, Debug)]
#[command(name = "fedrec", version, about = "Federated graph recommender simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run warm-up and training on a dataset directory.
    Train(TrainArgs),
    /// Generate a synthetic block-community dataset.
    Synth(SynthArgs),
    /// Check the federated warm-up against the dense propagation oracle.
    Verify(VerifyArgs),
    /// Evaluate a checkpoint and export per-user metrics.
    Eval(EvalArgs),
}

/// Scheme choice exposed on the command line; custom weighted means are
/// config-file only.
#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum SchemeFlag {
    Mean,
    LastPair,
    Concat,
}

impl From<SchemeFlag> for SchemeSpec {
    fn from(f: SchemeFlag) -> Self {
        match f {
            SchemeFlag::Mean => SchemeSpec::Mean,
            SchemeFlag::LastPair => SchemeSpec::LastPair,
            SchemeFlag::Concat => SchemeSpec::Concat,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum OptimizerFlag {
    Plain,
    Adaptive,
}

impl From<OptimizerFlag> for OptimizerKind {
    fn from(f: OptimizerFlag) -> Self {
        match f {
            OptimizerFlag::Plain => OptimizerKind::Plain,
            OptimizerFlag::Adaptive => OptimizerKind::Adaptive,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// TOML config file with a flat schema mirroring the experiment fields.
    #[arg(long)]
    pub config: PathBuf,
    /// Directory holding train.txt and test.txt.
    #[arg(long)]
    pub dataset_dir: PathBuf,
    /// Output directory for trace, checkpoint, and manifest.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Continue from this checkpoint instead of warming up.
    #[arg(long)]
    pub resume: Option<PathBuf>,

    // Per-field overrides; flags win over the config file.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub users_per_epoch: Option<usize>,
    #[arg(long)]
    pub local_iters: Option<usize>,
    #[arg(long)]
    pub latent_depth: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub local_rate: Option<f64>,
    #[arg(long)]
    pub server_rate: Option<f64>,
    #[arg(long)]
    pub reg_weight: Option<f64>,
    #[arg(long)]
    pub init_scale: Option<f64>,
    #[arg(long)]
    pub neg_count: Option<usize>,
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeFlag>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerFlag>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub eval_cut: Option<usize>,
    #[arg(long)]
    pub frac_bits: Option<u32>,
    #[arg(long)]
    pub master_seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Directory to write train.txt and test.txt into.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub users: usize,
    #[arg(long, default_value_t = 300)]
    pub items: usize,
    #[arg(long, default_value_t = 2)]
    pub communities: usize,
    /// Interaction probability inside a user's community.
    #[arg(long, default_value_t = 0.2)]
    pub p_in: f64,
    /// Interaction probability outside it.
    #[arg(long, default_value_t = 0.005)]
    pub p_out: f64,
    /// Fraction of each user's interactions held out for testing.
    #[arg(long, default_value_t = 0.2)]
    pub holdout: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Directory holding train.txt and test.txt.
    #[arg(long)]
    pub dataset_dir: PathBuf,
    /// Latent depth of the warm-up under test.
    #[arg(long, default_value_t = 2)]
    pub latent_depth: usize,
    #[arg(long, default_value_t = 0)]
    pub master_seed: u64,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.1)]
    pub init_scale: f64,
    #[arg(long, default_value_t = 24)]
    pub frac_bits: u32,
    /// Also load this checkpoint to check its integrity against the dataset.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory holding train.txt and test.txt.
    #[arg(long)]
    pub dataset_dir: PathBuf,
    /// Ranking cutoff.
    #[arg(long, default_value_t = 20)]
    pub cut: usize,
    #[arg(long, value_enum, default_value_t = SchemeFlag::Mean)]
    pub scheme: SchemeFlag,
    /// Per-user table destination; defaults to the checkpoint path with a
    /// .metrics.csv suffix.
    #[arg(long)]
    pub table: Option<PathBuf>,
}

/// Reproducibility record written next to every run's artifacts.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub dataset_train: String,
    pub dataset_test: String,
    /// SHA-256 over both dataset files.
    pub dataset_fingerprint: String,
    pub trace: String,
    pub checkpoint: String,
    pub resumed_from: Option<String>,
    /// Cohort-mean default made explicit.
    pub resolved_server_rate: f64,
    pub config: ExperimentConfig,
}

/// Dispatches a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(&args),
        Command::Synth(args) => cmd_synth(&args),
        Command::Verify(args) => cmd_verify(&args),
        Command::Eval(args) => cmd_eval(&args),
    }
}

fn dataset_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("train.txt"), dir.join("test.txt"))
}

fn load_dataset(dir: &Path) -> Result<DatasetSplit> {
    let (train, test) = dataset_paths(dir);
    dataset::load_split(&train, &test)
}

fn fingerprint(dir: &Path) -> Result<String> {
    let (train, test) = dataset_paths(dir);
    let mut h = Sha256::new();
    h.update(fs::read(&train)?);
    h.update([0x1f]);
    h.update(fs::read(&test)?);
    let digest: [u8; 32] = h.finalize().into();
    let mut out = String::with_capacity(71);
    out.push_str("sha256:");
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    Ok(out)
}

fn apply_overrides(config: &mut ExperimentConfig, args: &TrainArgs) {
    macro_rules! take {
        ($field:ident) => {
            if let Some(v) = args.$field {
                config.$field = v;
            }
        };
    }
    take!(epochs);
    take!(users_per_epoch);
    take!(local_iters);
    take!(latent_depth);
    take!(dim);
    take!(local_rate);
    take!(reg_weight);
    take!(init_scale);
    take!(neg_count);
    take!(eval_every);
    take!(eval_cut);
    take!(frac_bits);
    take!(master_seed);
    if let Some(v) = args.server_rate {
        config.server_rate = Some(v);
    }
    if let Some(s) = args.scheme {
        config.scheme = s.into();
    }
    if let Some(o) = args.optimizer {
        config.optimizer = o.into();
    }
}

fn format_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_trace_record(w: &mut impl Write, r: &TraceRecord) -> Result<()> {
    writeln!(
        w,
        "{},{},{},{}",
        r.epoch,
        format_field(r.loss),
        format_field(r.recall),
        format_field(r.ndcg)
    )?;
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let split = load_dataset(&args.dataset_dir)?;
    let text = fs::read_to_string(&args.config)?;
    let mut config: ExperimentConfig = toml::from_str(&text)
        .map_err(|e| Error::Validation(format!("config {}: {e}", args.config.display())))?;
    apply_overrides(&mut config, args);
    config.validate(split.train.num_users)?;

    fs::create_dir_all(&args.out_dir)?;
    let trace_path = args.out_dir.join("trace.csv");
    let ckpt_path = args.out_dir.join("final.ckpt");
    let (train_path, test_path) = dataset_paths(&args.dataset_dir);
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        dataset_train: train_path.display().to_string(),
        dataset_test: test_path.display().to_string(),
        dataset_fingerprint: fingerprint(&args.dataset_dir)?,
        trace: trace_path.display().to_string(),
        checkpoint: ckpt_path.display().to_string(),
        resumed_from: args.resume.as_ref().map(|p| p.display().to_string()),
        resolved_server_rate: config.resolved_server_rate(),
        config: config.clone(),
    };
    let manifest_text = toml::to_string(&manifest)
        .map_err(|e| Error::Validation(format!("manifest serialization: {e}")))?;
    fs::write(args.out_dir.join("manifest.toml"), manifest_text)?;

    let mut trace = fs::File::create(&trace_path)?;
    writeln!(trace, "epoch,loss,recall,ndcg")?;

    // The trace is flushed per record so a diverging run keeps its prefix.
    let outcome = if let Some(resume) = &args.resume {
        let graph = Arc::new(split.train.clone());
        let (completed_epochs, store, clients) = checkpoint::load(resume, &graph)?;
        let state = TrainState {
            store,
            clients,
            completed_epochs,
        };
        protocol::resume_experiment(state, &split, &config, |r| {
            write_trace_record(&mut trace, r)
        })
    } else {
        protocol::run_experiment(&split, &config, |r| write_trace_record(&mut trace, r))
    };
    trace.flush()?;
    let state = outcome?;

    checkpoint::save(&ckpt_path, state.completed_epochs, &state.store, &state.clients)?;
    println!(
        "trained to epoch {} over {} users and {} items",
        state.completed_epochs,
        state.clients.len(),
        state.store.num_items()
    );
    println!("artifacts in {}", args.out_dir.display());
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let split = dataset::synth_blocks(
        args.users,
        args.items,
        args.communities,
        args.p_in,
        args.p_out,
        args.holdout,
        args.seed,
    )?;
    fs::create_dir_all(&args.out_dir)?;
    let (train, test) = dataset_paths(&args.out_dir);
    split.save(&train, &test)?;
    let edges: usize = split.train.user_items.iter().map(|l| l.len()).sum();
    let held: usize = split.test_items.iter().map(|l| l.len()).sum();
    println!(
        "wrote {} users, {} items, {edges} train edges, {held} test edges to {}",
        args.users,
        args.items,
        args.out_dir.display()
    );
    Ok(())
}

fn cmd_verify(args: &VerifyArgs) -> Result<()> {
    let split = load_dataset(&args.dataset_dir)?;
    let graph = Arc::new(split.train.clone());
    let nodes = graph.num_users + graph.num_items;
    if nodes > 1000 {
        return Err(Error::Validation(format!(
            "dense oracle check refuses graphs over 1000 nodes, got {nodes}"
        )));
    }
    if let Some(ckpt) = &args.checkpoint {
        checkpoint::load(ckpt, &graph)?;
        println!("checkpoint {} is intact and matches the dataset", ckpt.display());
    }

    let (store, clients) = crate::server::warmup(
        &graph,
        args.dim,
        args.latent_depth,
        args.init_scale,
        args.frac_bits,
        args.master_seed,
    )?;
    let user0 = Array2::from_shape_fn((graph.num_users, args.dim), |(u, i)| {
        clients[u].embedding.layers[0][i]
    });
    let dense = oracle::propagate(&graph, &user0, &store.layer0, args.latent_depth)?;

    let mut max_dev = 0.0f64;
    for k in 1..=args.latent_depth {
        for (a, b) in store.latents[k - 1].iter().zip(dense.item_layers[k].iter()) {
            max_dev = max_dev.max((a - b).abs());
        }
        for (u, c) in clients.iter().enumerate() {
            for (a, b) in c.embedding.layers[k].iter().zip(dense.user_layers[k].row(u)) {
                max_dev = max_dev.max((a - b).abs());
            }
        }
    }
    println!("max abs deviation from dense propagation: {max_dev:e}");
    if max_dev <= 1e-5 {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "warm-up deviates from the dense oracle by {max_dev:e} > 1e-5"
        )))
    }
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let split = load_dataset(&args.dataset_dir)?;
    let graph = Arc::new(split.train.clone());
    let (epoch, store, clients) = checkpoint::load(&args.checkpoint, &graph)?;
    let scheme = SchemeSpec::from(args.scheme).resolve(store.depth())?;
    let (report, table) = evaluate_detailed(&store, &clients, &split, &scheme, args.cut)?;
    print_report(epoch, &report);

    let table_path = args
        .table
        .clone()
        .unwrap_or_else(|| args.checkpoint.with_extension("metrics.csv"));
    let mut w = fs::File::create(&table_path)?;
    writeln!(w, "user,recall,ndcg")?;
    for UserMetrics { user_id, recall, ndcg } in &table {
        writeln!(w, "{user_id},{recall},{ndcg}")?;
    }
    println!("per-user table: {}", table_path.display());
    Ok(())
}

fn print_report(epoch: usize, report: &EvalReport) {
    println!(
        "epoch {epoch}: recall@{} {:.6}, ndcg@{} {:.6} over {} users",
        report.cut, report.mean_recall, report.cut, report.mean_ndcg, report.users_evaluated
    );
}
