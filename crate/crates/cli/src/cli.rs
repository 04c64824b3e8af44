use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ragdistill::fusion::InferenceMode;
use ragdistill::StorageDtype;

use crate::commands::{self, ChooserInputs, HeadChoice};
use crate::config::{Overrides, RunConfig};
use crate::error::{CliError, CliResult};
use crate::manifest::Run;

#[derive(Debug, Parser)]
#[command(name = "ragdistill", version, about = "Retriever distillation against a frozen reader")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Run configuration (TOML). Flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory for every file the command writes.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker cap (0 = one per core).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Single worker everywhere.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Re-run stages even when the manifest says they are up to date.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build or inspect a binary index.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Write top-k candidates for each query.
    Retrieve {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        /// Trained heads; identity heads when omitted.
        #[arg(long)]
        heads: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "dual")]
        head: HeadChoice,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Distill both projection heads from the reader.
    Train {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
    },
    /// Write prediction dumps, one per mode.
    Infer {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        heads: Option<PathBuf>,
        /// Repeatable; defaults to the configured modes.
        #[arg(long = "mode")]
        modes: Vec<InferenceMode>,
        #[arg(long)]
        k: Option<usize>,
        /// File-name prefix for the dumps.
        #[arg(long, default_value = "")]
        prefix: String,
    },
    /// Summarize a fused dump, or compare two dumps.
    Analyze {
        /// Fused-mode prediction dump.
        #[arg(long, required_unless_present = "compare")]
        predictions: Option<PathBuf>,
        /// Additional dumps as NAME=PATH, reported as extra rows.
        #[arg(long = "extra", value_parser = parse_extra)]
        extras: Vec<(String, PathBuf)>,
        /// External reranker choices file.
        #[arg(long)]
        choices: Option<PathBuf>,
        /// Before/after report on splits fixed by BEFORE.
        #[arg(long, num_args = 2, value_names = ["BEFORE", "AFTER"])]
        compare: Option<Vec<PathBuf>>,
    },
    /// Generate the synthetic corpus and query sets.
    Synth {
        /// Synthetic spec (TOML).
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Inject label-mixed retrievals at this rate.
        #[arg(long)]
        inject_rate: Option<f64>,
    },
    /// synth, train, infer and analyze in one run directory.
    Pipeline {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        inject_rate: Option<f64>,
    },
}

#[derive(Debug, Subcommand)]
pub enum IndexCommand {
    /// Encode a corpus JSONL file as a binary index.
    Build {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "f32")]
        dtype: DtypeArg,
        /// L2-normalize embeddings before storing.
        #[arg(long)]
        normalize: bool,
    },
    /// Print index statistics as JSON.
    Inspect {
        #[arg(long)]
        index: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DtypeArg {
    F32,
    F16,
}

impl From<DtypeArg> for StorageDtype {
    fn from(d: DtypeArg) -> Self {
        match d {
            DtypeArg::F32 => StorageDtype::F32,
            DtypeArg::F16 => StorageDtype::F16,
        }
    }
}

fn parse_extra(s: &str) -> Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or_else(|| format!("expected NAME=PATH, got {s}"))?;
    if name.is_empty() {
        return Err("empty name".into());
    }
    Ok((name.to_string(), PathBuf::from(path)))
}

fn load_config(global: &GlobalArgs, spec: Option<&PathBuf>) -> CliResult<RunConfig> {
    let overrides = Overrides {
        seed: global.seed,
        jobs: global.jobs,
        deterministic: global.deterministic,
        out_dir: global.out.clone(),
        spec: spec.cloned(),
    };
    RunConfig::load(global.config.as_deref(), &overrides)
}

fn with_k(mut config: RunConfig, k: Option<usize>) -> CliResult<RunConfig> {
    if let Some(k) = k {
        config.inference.k = k;
    }
    config.resolve()
}

fn with_rate(mut config: RunConfig, rate: Option<f64>) -> CliResult<RunConfig> {
    if rate.is_some() {
        config.inject_rate = rate;
    }
    config.resolve()
}

pub fn run(cli: Cli) -> CliResult<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Index(IndexCommand::Inspect { index }) => {
            let stats = commands::index_inspect(index)?;
            println!("{}", serde_json::to_string_pretty(&stats).expect("stats serialize"));
        }
        Command::Index(IndexCommand::Build { corpus, dtype, normalize }) => {
            let config = load_config(g, None)?;
            let mut run = Run::open(&config, g.force)?;
            let out = commands::index_build(&mut run, corpus, (*dtype).into(), *normalize)?;
            println!("{}", out.display());
        }
        Command::Retrieve { index, queries, heads, head, k } => {
            let config = with_k(load_config(g, None)?, *k)?;
            let mut run = Run::open(&config, g.force)?;
            let out = commands::retrieve_stage(&mut run, &config, index, queries, heads.as_deref(), *head)?;
            println!("{}", out.display());
        }
        Command::Train { index, queries } => {
            let config = load_config(g, None)?;
            let mut run = Run::open(&config, g.force)?;
            let out = commands::train_stage(&mut run, &config, index, queries)?;
            println!("{}", out.display());
        }
        Command::Infer { index, queries, heads, modes, k, prefix } => {
            let config = with_k(load_config(g, None)?, *k)?;
            let modes = if modes.is_empty() { config.inference.modes.clone() } else { modes.clone() };
            let mut run = Run::open(&config, g.force)?;
            for (_, p) in commands::infer_stage(&mut run, &config, index, queries, heads.as_deref(), &modes, prefix)? {
                println!("{}", p.display());
            }
        }
        Command::Analyze { predictions, extras, choices, compare } => {
            let config = load_config(g, None)?;
            let mut run = Run::open(&config, g.force)?;
            if let Some(pair) = compare {
                let out = commands::compare_stage(&mut run, &pair[0], &pair[1])?;
                print!("{}", std::fs::read_to_string(out.with_extension("txt"))?);
            }
            if let Some(p) = predictions {
                let out = commands::analyze_stage(&mut run, &config, p, extras, choices.as_deref(), None::<ChooserInputs<'_>>)?;
                print!("{}", std::fs::read_to_string(out.with_extension("txt"))?);
            }
        }
        Command::Synth { spec, inject_rate } => {
            let config = with_rate(load_config(g, spec.as_ref())?, *inject_rate)?;
            let mut run = Run::open(&config, g.force)?;
            let (_, out) = commands::synth_stage(&mut run, &config)?;
            println!("{}", out.index.display());
        }
        Command::Pipeline { spec, inject_rate } => {
            let config = with_rate(load_config(g, spec.as_ref())?, *inject_rate)?;
            let mut run = Run::open(&config, g.force)?;
            let summary = commands::pipeline(&mut run, &config)?;
            print!("{}", std::fs::read_to_string(summary.with_extension("txt"))?);
        }
    }
    Ok(())
}

impl From<clap::Error> for CliError {
    fn from(e: clap::Error) -> Self {
        CliError::config(e.to_string())
    }
}
