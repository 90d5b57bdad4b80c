use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ovd_selftrain::eval::{BranchMode, EvalOptions};
use ovd_selftrain::harness::{self, ExperimentConfig, PresetName, Prepared};
use ovd_selftrain::heads::load_checkpoint;
use ovd_selftrain::selftrain::Phase;

/// Self-training testbed for open-vocabulary detection on a synthetic world.
/// Set `OVD_LOG=info` (or `debug`) for progress on stderr.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train and evaluate every repeat seed of a config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run an ablation preset (or `all`) and check its trend assertions.
    Ablate {
        #[arg(long)]
        preset: String,
        /// Comma-separated seeds; defaults to the config's repeat seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, default_value = "out/ablate")]
        out: PathBuf,
        /// Base config; defaults to the shipped reference.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the config's test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        branch: Option<Branch>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Write the PLs a checkpointed teacher emits on the training split.
    ExportPls {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Score PLs as an initial teacher (RPN fusion per config).
        #[arg(long)]
        initial: bool,
    },
    /// Train a fresh student on a fixed PL file.
    Retrain {
        #[arg(long)]
        pls: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Branch {
    Open,
    Closed,
    Fused,
}

impl From<Branch> for BranchMode {
    fn from(b: Branch) -> Self {
        match b {
            Branch::Open => BranchMode::OpenOnly,
            Branch::Closed => BranchMode::ClosedOnly,
            Branch::Fused => BranchMode::Fused,
        }
    }
}

fn load(config: Option<&PathBuf>) -> ovd_selftrain::Result<ExperimentConfig> {
    match config {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::reference()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("OVD_LOG", "warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

/// `Ok(false)` when a trend assertion failed.
fn dispatch(cmd: Cmd) -> ovd_selftrain::Result<bool> {
    match cmd {
        Cmd::Run { config } => {
            for run in harness::run_experiment(&config)? {
                let r = &run.report;
                println!(
                    "seed {}: ap50_novel={:.4} ap50_base={:.4} ap50_all={:.4}",
                    run.seed,
                    r.ap50_novel.unwrap_or(f64::NAN),
                    r.ap50_base.unwrap_or(f64::NAN),
                    r.ap50_all.unwrap_or(f64::NAN)
                );
            }
            Ok(true)
        }
        Cmd::Ablate {
            preset,
            seeds,
            out,
            config,
        } => {
            let base = load(config.as_ref())?;
            let presets: Vec<PresetName> = if preset == "all" {
                PresetName::ALL.to_vec()
            } else {
                vec![preset.parse()?]
            };
            let seeds = seeds.unwrap_or_else(|| base.repeat_seeds.clone());
            let mut ok = true;
            for p in presets {
                let report = harness::run_ablation_with(&base, p, &seeds)?;
                harness::write_trend_outputs(&report, &out.join(p.as_str()))?;
                println!("{p}");
                for name in &report.variant_order {
                    let s = &report.variants[name].summary;
                    println!(
                        "  {name:<28} ap50_novel {:.4} ± {:.4}  initial PL quality {:.4}",
                        s.mean_ap50_novel, s.std_ap50_novel, s.mean_initial_pl_quality
                    );
                }
                for a in &report.assertions {
                    let tag = if a.passed { "PASS" } else { "FAIL" };
                    println!("  [{tag}] {} ({:.4} vs {:.4})", a.description, a.lhs_value, a.rhs_value);
                    ok &= a.passed;
                }
            }
            Ok(ok)
        }
        Cmd::Eval {
            checkpoint,
            config,
            branch,
            alpha,
            seed,
        } => {
            let cfg = ExperimentConfig::load(&config)?.with_seed(seed);
            let params = load_checkpoint(&checkpoint)?;
            let opts = EvalOptions {
                branch_mode: branch.map_or(cfg.eval.branch_mode, Into::into),
                alpha: alpha.unwrap_or(cfg.eval.alpha),
                ..cfg.eval.clone()
            };
            opts.validate()?;
            let prepared = Prepared::new(&cfg)?;
            let report = harness::report_for(&cfg, &params, &prepared, None, &opts)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(true)
        }
        Cmd::ExportPls {
            checkpoint,
            out,
            config,
            seed,
            initial,
        } => {
            let cfg = load(config.as_ref())?;
            let params = load_checkpoint(&checkpoint)?;
            let phase = if initial {
                Phase::PreFirstUpdate
            } else {
                Phase::PostUpdate
            };
            let table = harness::export_teacher_pls(&cfg, &params, seed, phase)?;
            table.save(&out)?;
            println!("wrote {} PLs for {} scenes to {}", table.len(), table.by_scene.len(), out.display());
            Ok(true)
        }
        Cmd::Retrain { pls, config, seed } => {
            let cfg = ExperimentConfig::load(&config)?;
            let run = harness::retrain_from_pls(&cfg, &pls, seed)?;
            println!("{}", serde_json::to_string_pretty(&run.report)?);
            Ok(true)
        }
    }
}
