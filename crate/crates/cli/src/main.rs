//! `sidebranch`: profile, search, train, attack and report from one experiment file.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sidebranch_core::moo::MooError;
use sidebranch_core::pipeline::{self, LoadedSpec, PipelineError, RunDir};

#[derive(Parser)]
#[command(name = "sidebranch", version, about = "Search-before-training pipeline for TEE side-branch sub-networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment file (TOML).
    #[arg(long)]
    spec: PathBuf,
    /// Run directory; defaults to `out_dir` from the experiment file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces the master seed of the experiment file.
    #[arg(long)]
    seed_override: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-form latency against the event simulation and the sequential baseline.
    Profile(Common),
    /// Constrained Bayesian search for the side-branch configuration.
    Search {
        #[command(flatten)]
        common: Common,
        /// Continue the search log already in the run directory.
        #[arg(long)]
        resume: bool,
        /// Pause after this many evaluations in total; resume later with --resume.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Teacher, poisoned victim and the lambda = 0 control on the selected configuration.
    Train(Common),
    /// Backbone degradation across the lambda grid of the experiment file.
    Sweep(Common),
    /// Model-stealing attacks against the trained victim.
    Attack(Common),
    /// Consolidated summary of a finished run.
    Report {
        /// Experiment file; only used to locate the run directory when --out is absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn open(c: &Common) -> Result<(LoadedSpec, RunDir), PipelineError> {
    let loaded = LoadedSpec::load(&c.spec, c.seed_override)?;
    let root = run_root(&c.spec, c.out.as_deref(), &loaded.spec.out_dir);
    let run = RunDir::open(&root, &loaded)?;
    Ok((loaded, run))
}

/// Relative `out_dir` values are resolved against the experiment file's directory.
fn run_root(spec: &Path, out: Option<&Path>, out_dir: &Path) -> PathBuf {
    match out {
        Some(o) => o.to_path_buf(),
        None => spec.parent().unwrap_or(Path::new(".")).join(out_dir),
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Profile(c) => {
            let (loaded, mut run) = open(&c)?;
            let s = pipeline::cmd_profile(&loaded, &mut run)?;
            println!("profiled {} configurations, max |closed - oracle| = {:e} ms", s.rows, s.max_oracle_diff_ms);
            println!("pure backbone {:.4} ms; sequential >= parallel in {}/{} rows", s.backbone_ms, s.sequential_not_faster, s.rows);
        }
        Command::Search { common, resume, stop_after } => {
            let (loaded, mut run) = open(&common)?;
            match pipeline::cmd_search(&loaded, &mut run, resume, stop_after) {
                Ok(r) => {
                    let s = r.summary;
                    println!("{} evaluations, front of {}, hypervolume {:.6}", s.evaluations, s.front_size, s.hypervolume);
                    println!("selected {} (accuracy {:.4}, {:.4} ms, {} bytes)", s.selected, s.selected_accuracy, s.selected_latency_ms, s.selected_memory_bytes);
                }
                Err(PipelineError::Search(MooError::Paused { evaluations })) => {
                    println!("paused after {evaluations} evaluations; continue with --resume");
                }
                Err(e) => return Err(e),
            }
        }
        Command::Train(c) => {
            let (loaded, mut run) = open(&c)?;
            let s = pipeline::cmd_train(&loaded, &mut run)?;
            println!("teacher {:.4}  public {:.4}  chance {:.4}", s.teacher_accuracy, s.public_accuracy, s.chance);
            println!("lambda={}: combined {:.4} backbone {:.4}", s.lambda, s.victim_combined_accuracy, s.victim_backbone_accuracy);
            println!("lambda=0: combined {:.4} backbone {:.4}", s.control_combined_accuracy, s.control_backbone_accuracy);
        }
        Command::Sweep(c) => {
            let (loaded, mut run) = open(&c)?;
            let s = pipeline::cmd_sweep(&loaded, &mut run)?;
            for p in &s.points {
                println!("lambda {:<8} backbone {:.4} combined {:.4}", p.lambda, p.median_backbone_accuracy, p.median_combined_accuracy);
            }
            println!("monotone (tolerance {}): {}", s.tolerance, s.monotone);
        }
        Command::Attack(c) => {
            let (loaded, mut run) = open(&c)?;
            let s = pipeline::cmd_attack(&loaded, &mut run)?;
            for sc in &s.scenarios {
                println!("{:<12} median {:.4} [{:.4}, {:.4}]", sc.scenario.name(), sc.median, sc.min, sc.max);
            }
        }
        Command::Report { spec, out } => {
            let root = match (out, spec) {
                (Some(o), _) => o,
                (None, Some(s)) => {
                    let loaded = LoadedSpec::load(&s, None)?;
                    run_root(&s, None, &loaded.spec.out_dir)
                }
                (None, None) => return Err(PipelineError::Spec("report needs --out or --spec".into())),
            };
            let mut run = RunDir::open_existing(&root)?;
            pipeline::cmd_report(&mut run)?;
            let text = std::fs::read_to_string(run.path("report/summary.txt")).map_err(|source| PipelineError::Io { path: run.path("report/summary.txt"), source })?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
