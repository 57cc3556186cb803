use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use carve_cli::commands::{self, SynthSpec};
use carve_cli::config::PartialConfig;
use carve_core::{Error, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

/// Convert a dense SwiGLU FFN into a shared + routed mixture of experts.
#[derive(Parser, Debug)]
#[command(name = "moe-carve", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Profile neuron activation rates on calibration tokens.
    Profile(Common),
    /// Partition neurons into experts and write the carved layer.
    Carve(Common),
    /// Compare a carved layer against the dense one.
    Eval(Common),
    /// Simulate bias-based load balancing over repeated passes.
    BalanceSim(Common),
    /// Write a synthetic grouped layer with calibration and held-out tokens.
    Synth(SynthArgs),
}

#[derive(Args, Debug, Default)]
struct Common {
    /// JSON config file; flags and MOE_CARVE_* variables override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Held-out tokens for `eval` (defaults to --calib).
    #[arg(long)]
    tokens: Option<PathBuf>,
    /// Saved profile for `carve`.
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Directory written by `carve`.
    #[arg(long)]
    moe: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// binary, scaled or generic.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    n_experts: Option<usize>,
    #[arg(long)]
    n_shared: Option<usize>,
    #[arg(long)]
    n_active: Option<usize>,
    #[arg(long)]
    k_a: Option<usize>,
    #[arg(long)]
    max_kmeans_iters: Option<usize>,
    /// Disable L2 normalisation of tokens and weight columns when profiling.
    #[arg(long)]
    no_normalize: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = 8)]
    groups: usize,
    #[arg(long, default_value_t = 32)]
    group_size: usize,
    #[arg(long, default_value_t = 8)]
    sequences: usize,
    #[arg(long, default_value_t = 128)]
    seq_len: usize,
    #[arg(long, default_value_t = 2)]
    heldout_sequences: usize,
    #[arg(long, default_value_t = 2)]
    per_token: usize,
}

impl Common {
    fn into_partial(self) -> Result<PartialConfig> {
        let file = match &self.config {
            Some(path) => PartialConfig::from_file(path)?,
            None => PartialConfig::default(),
        };
        let flags = PartialConfig {
            n_experts: self.n_experts,
            n_shared: self.n_shared,
            n_active: self.n_active,
            k_a: self.k_a,
            gamma: self.gamma,
            max_kmeans_iters: self.max_kmeans_iters,
            normalize: self.no_normalize.then_some(false),
            seed: self.seed,
            weights: self.weights,
            calib: self.calib,
            tokens: self.tokens,
            profile: self.profile,
            moe: self.moe,
            out: self.out,
            mode: self.mode,
            steps: self.steps,
            histogram_bins: None,
        };
        Ok(PartialConfig::default()
            .merge(file)
            .merge(PartialConfig::from_env()?)
            .merge(flags))
    }
}

fn emit<T: Serialize>(report: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    // A closed pipe (`| head`) is not an error worth reporting.
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io {
            path: "<stdout>".into(),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Profile(c) => emit(&commands::profile(&c.into_partial()?.resolve()?)?),
        Command::Carve(c) => emit(&commands::carve(&c.into_partial()?.resolve()?)?),
        Command::Eval(c) => emit(&commands::eval(&c.into_partial()?.resolve()?)?),
        Command::BalanceSim(c) => emit(&commands::balance_sim(&c.into_partial()?.resolve()?)?),
        Command::Synth(s) => {
            let spec = SynthSpec {
                d: s.d,
                groups: s.groups,
                group_size: s.group_size,
                sequences: s.sequences,
                seq_len: s.seq_len,
                heldout_sequences: s.heldout_sequences,
                per_token: s.per_token,
                seed: s.seed,
            };
            emit(&commands::synth(&spec, &s.out)?)
        }
    }
}

fn fail(kind: &str, message: String) -> ExitCode {
    eprintln!(
        "{}",
        json!({ "error": { "kind": kind, "message": message } })
    );
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            return fail("usage", e.to_string());
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), e.to_string()),
    }
}
