// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use stylesteer_cli::config::{Overrides, RunConfig};
use stylesteer_cli::error::CliError;
use stylesteer_cli::pipeline::{self, Run, SteerArgs};
use stylesteer_cli::service::{self, Limits};

/// Composer-style steering for a small ABC-notation language model.
///
/// Every stage reads and writes artifacts in `<out>/run-<hash>/`, where the
/// hash covers the seed, corpus, model and judge settings. Errors are printed
/// to stderr as one JSON object and the exit code is non-zero.
#[derive(Parser, Debug)]
#[command(name = "stylesteer", version)]
struct Cli {
    /// TOML run configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Top-level seed; every stage derives its own stream from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root directory for run directories.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct SteerFlags {
    /// Layer to steer at; defaults to the selected layer l*.
    #[arg(long)]
    layer: Option<usize>,
    /// Sampling temperature; 0 means greedy decoding.
    #[arg(long)]
    temperature: Option<f64>,
    /// Steer every token, including bar lines and header fields.
    #[arg(long)]
    no_format_gate: bool,
    /// Add the steering vector without rescaling to the original norm.
    #[arg(long)]
    no_norm_preserve: bool,
    /// Use mean-centered composer vectors.
    #[arg(long)]
    centered: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic style corpus.
    GenCorpus,
    /// Train the language model on the corpus.
    Train,
    /// Score every layer and select l*.
    Localize,
    /// Build one composer vector per style.
    BuildVectors {
        /// Layer to read; defaults to l*.
        #[arg(long)]
        layer: Option<usize>,
        /// Subtract the mean of all style vectors.
        #[arg(long)]
        centered: bool,
    },
    /// Generate one piece, optionally steered.
    Steer {
        /// Style whose prompt starts the piece; defaults to the first style.
        #[arg(long)]
        prompt_style: Option<String>,
        /// Steer towards one style with weight 1.
        #[arg(long)]
        target: Option<String>,
        /// Fused target, e.g. "Alpha=0.7,Beta=0.3".
        #[arg(long)]
        weights: Option<String>,
        /// Steering strength.
        #[arg(long, allow_negative_numbers = true)]
        alpha: Option<f64>,
        /// Plain sampling without any edit.
        #[arg(long)]
        no_steering: bool,
        /// Sampler seed; derived from --seed when absent.
        #[arg(long)]
        sample_seed: Option<u64>,
        /// Maximum continuation length in tokens.
        #[arg(long)]
        max_len: Option<usize>,
        /// Print a JSON record instead of the ABC text.
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        flags: SteerFlags,
    },
    /// P(target) against alpha for each target style.
    SweepAlpha {
        /// Target styles (repeatable or comma-separated); defaults to the
        /// configured targets.
        #[arg(long, value_delimiter = ',')]
        target: Vec<String>,
        #[command(flatten)]
        flags: SteerFlags,
    },
    /// P(c1) and P(c2) against the fusion weight w1.
    SweepFusion {
        /// Style pair "A,B" (repeatable); defaults to the most distinct pairs.
        #[arg(long)]
        pair: Vec<String>,
        /// Steering strength.
        #[arg(long, allow_negative_numbers = true)]
        alpha: Option<f64>,
        #[command(flatten)]
        flags: SteerFlags,
    },
    /// Judge accuracy, single-steer grid and format-gate comparison.
    Eval {
        /// Steering strength for the format-gate comparison.
        #[arg(long, allow_negative_numbers = true)]
        alpha: Option<f64>,
        #[command(flatten)]
        flags: SteerFlags,
    },
    /// Write a 2-D PCA projection of piece embeddings as CSV.
    Project {
        /// Layer to project; defaults to l*.
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Serve the HTTP API.
    Serve {
        /// Listen address; overrides `serve.addr`.
        #[arg(long)]
        addr: Option<String>,
    },
}

fn overrides(cli: &Cli) -> Overrides {
    let mut o = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        ..Overrides::default()
    };
    let (flags, alpha) = match &cli.command {
        Command::Steer { flags, alpha, .. }
        | Command::SweepFusion { flags, alpha, .. }
        | Command::Eval { flags, alpha, .. } => (Some(flags), *alpha),
        Command::SweepAlpha { flags, .. } => (Some(flags), None),
        Command::BuildVectors { centered, .. } => {
            o.centered = *centered;
            (None, None)
        }
        _ => (None, None),
    };
    o.alpha = alpha;
    if let Some(f) = flags {
        o.temperature = f.temperature;
        o.no_format_gate = f.no_format_gate;
        o.no_norm_preserve = f.no_norm_preserve;
        o.centered = f.centered;
    }
    o
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("value serializes"));
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    config.apply(&overrides(&cli));
    let run = Run::open(config)?;
    let started = Instant::now();
    match cli.command {
        Command::GenCorpus => print_json(&pipeline::gen_corpus(&run)?),
        Command::Train => print_json(&pipeline::train(&run)?),
        Command::Localize => print!("{}", pipeline::localize(&run)?),
        Command::BuildVectors { layer, .. } => print_json(&pipeline::build_vectors(&run, layer)?),
        Command::Steer {
            prompt_style,
            target,
            weights,
            no_steering,
            sample_seed,
            max_len,
            json,
            flags,
            ..
        } => {
            let args = SteerArgs {
                prompt_style,
                target,
                weights,
                no_steering,
                layer: flags.layer,
                sample_seed,
                max_len,
            };
            let (generated, echo) = pipeline::steer(&run, &args)?;
            if json {
                print_json(&serde_json::json!({ "request": echo, "result": generated }));
            } else {
                print!("{}", generated.abc);
                if !generated.abc.ends_with('\n') {
                    println!();
                }
            }
        }
        Command::SweepAlpha { target, flags } => {
            print_json(&pipeline::sweep_alpha(&run, &target, flags.layer)?)
        }
        Command::SweepFusion { pair, flags, .. } => {
            print_json(&pipeline::sweep_fusion(&run, &pair, flags.layer)?)
        }
        Command::Eval { flags, .. } => print_json(&pipeline::eval(&run, flags.layer)?),
        Command::Project { layer } => print_json(&pipeline::project(&run, layer)?),
        Command::Serve { addr } => {
            let s = &run.config.serve;
            let addr = addr.unwrap_or_else(|| s.addr.clone());
            let limits = Limits {
                max_len_cap: s.max_len_cap,
                budget: Duration::from_secs_f64(s.budget_secs),
            };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(service::serve(run, &addr, limits))?;
        }
    }
    eprintln!("done in {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", CliError::usage(e.render().to_string().trim()).to_json());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
