use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hardkuma::corpus::{self, Layout, Split};
use hardkuma::dist::{KumaParams, StretchBounds};
use hardkuma::model::CellKind;
use hardkuma::optim::OptimizerKind;
use hardkuma::sparsity::ConstraintMode;
use hardkuma::train::{self, Data, GatePolicy, Model, ModelKind, RunConfig};
use hardkuma::{Error, Result};

#[derive(Parser)]
#[command(name = "hardkuma", version, about = "HardKuma rationale models on synthetic data")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write train/valid/test JSONL corpora and the vocabulary.
    GenData {
        #[command(flatten)]
        run: RunFlags,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes metrics CSV and the best checkpoint.
    Train {
        #[command(flatten)]
        run: RunFlags,
    },
    /// Evaluate a checkpoint with deterministic gates.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config to build the model from; defaults to the one stored in the
        /// checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long, default_value = "valid")]
        split: String,
        /// Rationale dump, one JSON record per example.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Density, cdf and point masses of a HardKuma distribution as CSV.
    Dist {
        #[arg(long, allow_hyphen_values = true)]
        a: f64,
        #[arg(long, allow_hyphen_values = true)]
        b: f64,
        #[arg(long, default_value_t = -0.1, allow_hyphen_values = true)]
        l: f64,
        #[arg(long, default_value_t = 1.1, allow_hyphen_values = true)]
        r: f64,
        #[arg(long, default_value_t = 100)]
        grid: usize,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Overrides applied on top of the config file.
#[derive(Args)]
struct RunFlags {
    /// JSON run config; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_kebab::<ModelKind>)]
    model: Option<ModelKind>,
    #[arg(long, value_parser = parse_kebab::<GatePolicy>)]
    gates: Option<GatePolicy>,
    #[arg(long, value_parser = parse_kebab::<CellKind>)]
    cell: Option<CellKind>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    target_l0: Option<f64>,
    #[arg(long)]
    target_fused: Option<f64>,
    #[arg(long, value_parser = parse_kebab::<ConstraintMode>)]
    constraint_mode: Option<ConstraintMode>,
    #[arg(long, value_parser = parse_kebab::<OptimizerKind>)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_final: Option<f64>,
    #[arg(long)]
    lambda_lr: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Corpus signal rate.
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long, value_parser = parse_kebab::<Layout>)]
    layout: Option<Layout>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
}

fn parse_kebab<T: serde::de::DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

impl RunFlags {
    fn resolve(self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$( if let Some(v) = self.$field { c.$field = v; } )*};
        }
        set!(model, gates, cell, embed_dim, hidden, constraint_mode, optimizer, lr, lambda_lr, beta, batch_size, epochs, eval_every, seed);
        if let Some(v) = self.target_l0 {
            c.target_l0 = Some(v);
        }
        if let Some(v) = self.lr_final {
            c.lr_final = Some(v);
        }
        if let Some(v) = self.target_fused {
            c.target_fused = Some(v);
        }
        if let Some(v) = self.rho {
            c.corpus.rho = v;
        }
        if let Some(v) = self.layout {
            c.corpus.layout = v;
        }
        if self.data_dir.is_some() {
            c.data_dir = self.data_dir;
        }
        if self.checkpoint.is_some() {
            c.checkpoint = self.checkpoint;
        }
        if self.metrics.is_some() {
            c.metrics = self.metrics;
        }
        c.validate()?;
        Ok(c)
    }
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mkdir = |e| Error::io(format!("creating {}", out.display()), e);
    if cfg.model.is_matching() {
        let c = cfg.matching.generate()?;
        std::fs::create_dir_all(out).map_err(mkdir)?;
        for split in Split::ALL {
            corpus::write_jsonl(&out.join(format!("{}.jsonl", split.name())), c.split(split))?;
        }
        let vocab = (0..cfg.matching.vocab_size()).map(|i| (format!("w{i:04}"), i)).collect();
        corpus::write_vocab(&out.join("vocab.json"), &vocab)?;
    } else {
        let c = cfg.corpus.generate()?;
        std::fs::create_dir_all(out).map_err(mkdir)?;
        for split in Split::ALL {
            corpus::write_jsonl(&out.join(format!("{}.jsonl", split.name())), c.split(split))?;
        }
        corpus::write_vocab(&out.join("vocab.json"), &cfg.corpus.vocabulary())?;
    }
    println!("wrote corpus to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { run, out } => gen_data(&run.resolve()?, &out),
        Cmd::Train { run } => {
            let cfg = run.resolve()?;
            let data = Data::load(&cfg)?;
            let outcome = train::train(&cfg, &data)?;
            if let Some(last) = outcome.rows.last() {
                println!(
                    "steps {} | val accuracy {:.4} | selected {:.4} | precision {:.4} | best step {}",
                    outcome.steps,
                    last.val_accuracy,
                    last.selected_rate,
                    last.precision,
                    outcome.best_step
                );
            }
            Ok(())
        }
        Cmd::Eval {
            checkpoint,
            config,
            data_dir,
            split,
            dump,
        } => {
            let ckpt = train::load_checkpoint(&checkpoint)?;
            let mut cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => ckpt.config.clone(),
            };
            if data_dir.is_some() {
                cfg.data_dir = data_dir;
            }
            let split: Split = split.parse()?;
            let model = Model::from_checkpoint(&cfg, &ckpt)?;
            let data = Data::load(&cfg)?;
            let m = train::evaluate_to(&model, &data, split, dump.as_deref())?;
            println!("split,examples,loss,accuracy,precision,selected_rate,gates_per_example");
            println!(
                "{},{},{},{},{},{},{}",
                split.name(),
                m.examples,
                m.loss,
                m.accuracy,
                m.precision,
                m.selected_rate,
                m.gates_per_example
            );
            Ok(())
        }
        Cmd::Dist {
            a,
            b,
            l,
            r,
            grid,
            out,
        } => {
            let rows = train::dist_table(KumaParams::new(a, b)?, StretchBounds::new(l, r)?, grid)?;
            match out {
                Some(p) => {
                    let f = std::fs::File::create(&p)
                        .map_err(|e| Error::io(format!("creating {}", p.display()), e))?;
                    train::write_dist_csv(f, &rows)
                }
                None => train::write_dist_csv(std::io::stdout().lock(), &rows),
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Divergence { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
