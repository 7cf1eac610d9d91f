//! Argument parsing and exit codes: 0 success, 1 user error, 2 internal
//! invariant violation.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use log::error;

use vcenet_core::synth::{SynthSpec, SynthStyle};

use crate::config::Config;
use crate::error::{CliError, CliResult};
use crate::run;

#[derive(Debug, Parser)]
#[command(name = "vcenet", version = run::version(), about = "Zero-shot segmentation with visual class embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct ConfigArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    pub config: PathBuf,
    /// `key=value` overrides, applied after the file.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `--override seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn load(&self) -> CliResult<Config> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        Config::load(&self.config, &overrides)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on the configured fold's train classes.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from a checkpoint written under the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the fold's test classes.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate on the source test split and on a target dataset.
    DomainEval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        target_root: PathBuf,
        /// JSON file `{"map": {"<source id>": <target id>}}`.
        #[arg(long)]
        class_map: PathBuf,
    },
    /// Segment one image and write a 0/255 mask.
    Predict {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic shapes dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        classes: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `smooth` (source domain) or `striped` (shifted target domain).
        #[arg(long, default_value = "smooth")]
        style: String,
    },
}

pub fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { config, resume } => {
            let cfg = config.load()?;
            let out = run::train(&cfg, resume.as_deref())?;
            for m in &out.metrics {
                println!("{}", m.to_json());
            }
        }
        Command::Eval { config, checkpoint } => {
            for m in run::eval(&config.load()?, &checkpoint)? {
                println!("{}", m.to_json());
            }
        }
        Command::DomainEval { config, checkpoint, target_root, class_map } => {
            for m in run::domain_eval(&config.load()?, &checkpoint, &target_root, &class_map)? {
                println!("{}", m.to_json());
            }
        }
        Command::Predict { image, checkpoint, out } => run::predict(&image, &checkpoint, &out)?,
        Command::Synth { out, n, size, classes, seed, style } => {
            let style = SynthStyle::parse(&style)
                .ok_or_else(|| CliError::user(format!("unknown style `{style}` (smooth or striped)")))?;
            let spec = SynthSpec { n_images: n, image_size: size, n_classes: classes, seed, style };
            run::synth(&out, &spec)?;
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            error!("{e}");
            e.exit_code()
        }
    }
}
