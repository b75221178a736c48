use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedspar::ablate::{ablate, Sweep};
use fedspar::config::ConfigError;
use fedspar::payload::{describe, PayloadFile};
use fedspar::runner::codebooks;
use fedspar::{run_experiment, ExperimentConfig, RunError, RunOptions};
use fedspar_core::transform::FreshTransforms;

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(name = "fedspar", version, about = "Federated learning with sparsified, quantized uplink updates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: runs/<name>).
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Stop after at most this many rounds.
    #[arg(long)]
    rounds: Option<usize>,
    /// Worker threads for the participants of a round (0 = all cores).
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Directory with the MNIST IDX files.
    #[arg(long)]
    data: Option<PathBuf>,
    /// No progress output.
    #[arg(long, short)]
    quiet: bool,
}

impl Common {
    fn options(&self, cfg: &ExperimentConfig) -> RunOptions {
        RunOptions {
            round_cap: self.rounds,
            seed: self.seed,
            out_dir: Some(self.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name))),
            threads: self.threads,
            mnist_dir: self.data.clone(),
            progress: !self.quiet,
            payload_round: None,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Save the compressed uploads of this (0-based) round.
        #[arg(long, value_name = "ROUND")]
        save_payloads: Option<usize>,
    },
    /// Run a config over a grid of settings.
    Ablate {
        config: PathBuf,
        /// `key=v1,v2,...` with key one of q, kappa, c, l, scheme; repeatable.
        #[arg(long = "sweep")]
        sweeps: Vec<Sweep>,
        /// Comma-separated seeds; default is the config's.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Decode a saved payload and describe it.
    Inspect { payload: PathBuf },
    /// Print the trained Lloyd-Max codebooks.
    DumpCodebooks {
        #[arg(long, default_value_t = 16)]
        q_max: usize,
    },
}

fn load(path: &Path) -> Result<ExperimentConfig, ExitCode> {
    ExperimentConfig::load(path).map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(EXIT_CONFIG)
    })
}

fn fail(e: RunError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(if e.is_config_error() { EXIT_CONFIG } else { EXIT_RUNTIME })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Command::Run { config, common, save_payloads } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let mut opts = common.options(&cfg);
            opts.payload_round = save_payloads;
            match run_experiment(&cfg, &opts) {
                Ok(out) => {
                    let s = &out.summary;
                    let acc = s.final_accuracy.map_or("-".into(), |a| format!("{:.2}%", 100.0 * a));
                    println!(
                        "{}: {} rounds, final loss {:.4}, accuracy {acc}, {:.0} bits/upload, sparsification {:.2}%",
                        s.name,
                        s.rounds,
                        s.final_loss,
                        s.mean_bits,
                        100.0 * s.mean_sparsification
                    );
                    println!("wrote {}", opts.out_dir.unwrap().display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Ablate { config, sweeps, seeds, common } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let opts = common.options(&cfg);
            match ablate(&cfg, &sweeps, &seeds, &opts) {
                Ok(rows) => {
                    for r in &rows {
                        let acc = r.summary.final_accuracy.map_or("-".into(), |a| format!("{:.2}%", 100.0 * a));
                        println!(
                            "{:<30} seed {:<4} accuracy {acc:>7}  loss {:.4}",
                            r.point, r.summary.seed, r.summary.final_loss
                        );
                    }
                    if rows.is_empty() {
                        println!("nothing to run");
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Inspect { payload } => {
            let bytes = match std::fs::read(&payload) {
                Ok(b) => b,
                Err(e) => {
                    eprintln!("error: {}: {e}", payload.display());
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            let result = PayloadFile::from_bytes(&bytes).map_err(|e| e.to_string()).and_then(|f| {
                let bank = codebooks(f.q_max.max(2)).map_err(|e| e.to_string())?;
                describe(&f, &bank, &FreshTransforms).map_err(|e| e.to_string())
            });
            match result {
                Ok(text) => {
                    print!("{text}");
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {}: {e}", payload.display());
                    ExitCode::from(EXIT_RUNTIME)
                }
            }
        }
        Command::DumpCodebooks { q_max } => match codebooks(q_max) {
            Ok(bank) => {
                println!("q,gamma,psi,gain,distortion,levels,thresholds");
                for q in bank.iter() {
                    let join = |v: &[f64]| v.iter().map(|x| format!("{x:.12}")).collect::<Vec<_>>().join(" ");
                    println!(
                        "{},{:.12},{:.12},{:.12},{:.12},{},{}",
                        q.q_level(),
                        q.gamma(),
                        q.psi(),
                        q.gain(),
                        q.distortion(),
                        join(q.levels()),
                        join(q.thresholds())
                    );
                }
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {}", ConfigError::Invalid { field: "q_max", message: e.to_string() });
                ExitCode::from(EXIT_CONFIG)
            }
        },
    }
}
