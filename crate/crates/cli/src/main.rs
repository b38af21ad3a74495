//! `taxolink` command-line entry point.
//!
//! Exit status is 0 on success, 1 on configuration or data errors and 2 when
//! training diverges.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use taxolink::config::{Manifest, RunConfig};
use taxolink::corpus::Split;
use taxolink::pipeline::{self, ModelRun, Registries};
use taxolink::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "taxolink", version, about = "Disease mention tagging and taxonomy entity linking")]
struct Cli {
    /// Config file or a run manifest to re-run.
    #[arg(long, global = true, env = "TAXOLINK_CONFIG")]
    config: Option<PathBuf>,
    /// Output directory (overrides paths.out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override any config key, e.g. `--set ner.hidden=64`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load every configured input and print its counts.
    Validate,
    /// Train node embeddings and write them to `nodes.txt`.
    EmbedGraph(NodeArgs),
    /// Train the tagger.
    TrainNer(EpochArgs),
    /// Train the linker on gold mentions.
    TrainEl(NodeArgs),
    /// Train tagger and linker jointly.
    TrainMtl(NodeArgs),
    /// Score a checkpoint on one split.
    Evaluate(ModelArgs),
    /// Write predicted mentions and links of a checkpoint.
    Predict(ModelArgs),
}

#[derive(Debug, Args)]
struct EpochArgs {
    /// Training epochs of this command.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Args)]
struct NodeArgs {
    /// Training epochs of this command, random-walk training included.
    #[arg(long)]
    epochs: Option<usize>,
    /// Registered node source: type1, type2, gcn-live or file.
    #[arg(long)]
    node_source: Option<String>,
    /// Train fixed node embeddings together with the linker.
    #[arg(long)]
    finetune_nodes: bool,
    /// Build the GCN adjacency without self loops.
    #[arg(long)]
    no_self_loops: bool,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Checkpoint written by a training command.
    #[arg(long)]
    model: PathBuf,
    /// train, validation or test; defaults to the last configured split.
    #[arg(long)]
    split: Option<Split>,
}

impl NodeArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = &self.node_source {
            cfg.run.node_source = s.clone();
        }
        if self.finetune_nodes {
            cfg.run.finetune_nodes = true;
        }
        if self.no_self_loops {
            cfg.gcn.self_loops = false;
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.set)?;
    if let Some(out) = &cli.out {
        cfg.paths.out = std::path::absolute(out).map_err(|e| Error::io(out, e))?;
    }
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
        cfg.node2vec.seed = seed;
    }
    match &cli.command {
        Command::EmbedGraph(a) => {
            a.apply(&mut cfg);
            if let Some(e) = a.epochs {
                cfg.node2vec.epochs = e;
            }
        }
        Command::TrainNer(a) => {
            if let Some(e) = a.epochs {
                cfg.ner.epochs = e;
            }
        }
        Command::TrainEl(a) => {
            a.apply(&mut cfg);
            if let Some(e) = a.epochs {
                cfg.linker.epochs = e;
                cfg.node2vec.epochs = e;
            }
        }
        Command::TrainMtl(a) => {
            a.apply(&mut cfg);
            if let Some(e) = a.epochs {
                cfg.ner.epochs = e;
                cfg.node2vec.epochs = e;
            }
        }
        Command::Validate | Command::Evaluate(_) | Command::Predict(_) => {}
    }
    Ok(cfg)
}

fn model_run(cli: &Cli, args: &ModelArgs) -> ModelRun {
    ModelRun {
        model: args.model.clone(),
        split: args.split,
        out: cli.out.clone(),
        overrides: cli.set.clone(),
    }
}

fn run(cli: &Cli) -> Result<Manifest> {
    let reg = Registries::default();
    match &cli.command {
        Command::Evaluate(a) => pipeline::evaluate(&model_run(cli, a), &reg),
        Command::Predict(a) => pipeline::predict(&model_run(cli, a), &reg),
        cmd => {
            let cfg = load_config(cli)?;
            match cmd {
                Command::Validate => pipeline::validate(&cfg),
                Command::EmbedGraph(_) => pipeline::embed_graph(&cfg, &reg),
                Command::TrainNer(_) => pipeline::train_ner_command(&cfg, &reg),
                Command::TrainEl(_) => pipeline::train_el_command(&cfg, &reg),
                Command::TrainMtl(_) => pipeline::train_mtl_command(&cfg, &reg),
                Command::Evaluate(_) | Command::Predict(_) => unreachable!("handled above"),
            }
        }
    }
}

fn print_summary(m: &Manifest) {
    for (k, v) in &m.counts {
        println!("{k}\t{v}");
    }
    for (k, v) in &m.metrics {
        println!("{k}\t{v:.4}");
    }
    println!("manifest\t{}", m.out.join(m.file_name()).display());
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(m) => {
            print_summary(&m);
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("error: {e}");
            ExitCode::from(if e.is_divergence() { 2 } else { 1 })
        }
    }
}
