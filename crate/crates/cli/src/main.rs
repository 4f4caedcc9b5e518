use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use weaver_core::config::RunConfig;
use weaver_core::eval::SweepKind;
use weaver_core::Error;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "weaver", version, about = "Compositional tool tokenization pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Dotted-key override, e.g. `quantizer.epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Master seed for every random stream
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; falls back to the config, then `WEAVER_OUT`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Weight of the co-occurrence term, same as `--set quantizer.collab_lambda=..`
    #[arg(long, global = true)]
    collab_lambda: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic corpus and a query set as JSONL.
    Synth,
    /// Train the quantizer and write the model and graph bundles.
    Fit,
    /// Assign collision-free code sequences to every tool.
    Assign {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Plain nearest-centroid assignment at the last level.
        #[arg(long)]
        no_sinkhorn: bool,
    },
    /// Retrieve each query through the code trie and score NDCG.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        codemap: Option<PathBuf>,
    },
    /// Retrain across a parameter grid on the synthetic corpus.
    Sweep {
        #[arg(value_enum)]
        kind: Kind,
    },
    /// Verify a bundle and summarize its contents.
    Report { bundle: PathBuf },
    /// Write the code map as TSV, the code vocabulary and the similarity list.
    Export {
        #[arg(long)]
        codemap: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    Lambda,
    Vocab,
    Depth,
}

impl From<Kind> for SweepKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Lambda => SweepKind::Lambda,
            Kind::Vocab => SweepKind::Vocab,
            Kind::Depth => SweepKind::Depth,
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } => 3,
        Error::Io { .. } => 4,
        _ => 2,
    }
}

fn load_config(g: &Global) -> Result<(RunConfig, PathBuf), Error> {
    let mut overrides = g.overrides.clone();
    if let Some(s) = g.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(l) = g.collab_lambda {
        overrides.push(format!("quantizer.collab_lambda={l:?}"));
    }
    if let Some(d) = &g.out_dir {
        overrides.push(format!("output_dir={:?}", d.display().to_string()));
    }
    let cfg = RunConfig::load(g.config.as_deref(), &overrides)?;
    let out = cfg
        .output_dir
        .clone()
        .or_else(|| std::env::var_os("WEAVER_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("weaver-out"));
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<(), Error> {
    let (cfg, out) = load_config(&cli.global)?;
    std::fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
    let ctx = commands::Context { cfg, out };
    match cli.command {
        Command::Synth => ctx.synth(),
        Command::Fit => ctx.fit(),
        Command::Assign { model, no_sinkhorn } => ctx.assign(model, no_sinkhorn),
        Command::Eval { model, codemap } => ctx.eval(model, codemap),
        Command::Sweep { kind } => ctx.sweep(kind.into()),
        Command::Report { bundle } => ctx.report(&bundle),
        Command::Export { codemap } => ctx.export(codemap),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
