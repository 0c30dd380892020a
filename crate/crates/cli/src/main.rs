use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use nats::run::{decode_run, erf_run, retrain_run, search_run, Progress, RunConfig, PLAN};
use nats::search::EpochMetrics;
use nats::verify::{run_verify, Fault, VerifyOptions};

#[derive(Parser)]
#[command(name = "nats", version, about = "Channel-level dilation search for residual backbones")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a baseline, search dilations and write the decoded plan.
    Search {
        #[arg(short, long)]
        config: PathBuf,
        /// Run directory; defaults to the config's `output_dir`.
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Continue from the baseline and search state already in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Re-decode a plan from the alphas recorded after a given epoch.
    Decode {
        #[arg(short, long)]
        run: PathBuf,
        #[arg(long)]
        epoch: Option<usize>,
        /// Where to write the plan; defaults to `plan.json`, or `plan_epoch<N>.json` with `--epoch`.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Apply the plan to the baseline and retrain the transformed network.
    Retrain {
        #[arg(short, long)]
        run: PathBuf,
        /// Also retrain the untransformed baseline with the same schedule.
        #[arg(long)]
        baseline: bool,
        /// Plan to apply instead of the run's `plan.json`.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Render receptive fields of the baseline and transformed networks.
    Erf {
        #[arg(short, long)]
        run: PathBuf,
        #[arg(long, default_value_t = 0.95)]
        mass: f64,
        /// Pixel upscaling of the PNG renders.
        #[arg(long, default_value_t = 4)]
        scale: usize,
    },
    /// Run the invariant self-checks.
    Verify {
        #[arg(long)]
        json: bool,
        #[arg(long, value_enum)]
        inject_fault: Option<FaultArg>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum FaultArg {
    SkipPermutation,
}

struct Stderr(Instant);

impl Progress for Stderr {
    fn message(&mut self, text: &str) {
        eprintln!("[{:>7.1}s] {text}", self.0.elapsed().as_secs_f64());
    }

    fn epoch(&mut self, m: &EpochMetrics) {
        let alpha = m.alpha_loss.map_or_else(|| "frozen".to_string(), |l| format!("{l:.4}"));
        self.message(&format!(
            "epoch {:>3}  weight loss {:.4}  alpha loss {alpha}  lr {:.3e}",
            m.epoch, m.weight_loss, m.lr
        ));
    }
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<nats::Error> for Failure {
    fn from(e: nats::Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Search { config, out, resume } => {
            let mut cfg = RunConfig::load(&config)?;
            let dir = out
                .or_else(|| cfg.output_dir.clone())
                .ok_or_else(|| Failure::Validation("no run directory: pass --out or set output_dir".into()))?;
            cfg.output_dir = Some(dir.clone());
            let outcome = search_run(&cfg, &dir, resume, &mut Stderr(Instant::now()))?;
            for l in &outcome.plan.layers {
                let parts: Vec<String> = l.entries.iter().map(|e| format!("{}×{}", e.dilation, e.channels)).collect();
                println!("{:<5} {}", l.layer, parts.join("  "));
            }
            for stage in 3..=5 {
                println!("stage {stage} mean dilation {:.4}", outcome.plan.mean_stage_dilation(stage));
            }
            println!("wrote {}", dir.join(PLAN).display());
        }
        Command::Decode { run, epoch, out } => {
            let plan = decode_run(&run, epoch)?;
            let path = out.unwrap_or_else(|| match epoch {
                Some(e) => run.join(format!("plan_epoch{e}.json")),
                None => run.join(PLAN),
            });
            fs::write(&path, plan.to_json())?;
            println!("wrote {}", path.display());
        }
        Command::Retrain { run, baseline, plan } => {
            let report = retrain_run(&run, baseline, plan.as_deref())?;
            println!("transformed accuracy {:.4}", report.transformed_accuracy);
            if let Some(a) = report.baseline_accuracy {
                println!("baseline accuracy {a:.4}");
            }
            println!("{}", report.parity_line());
            if !report.parity() {
                return Err(Failure::Runtime("transformed network costs differ from the baseline".into()));
            }
        }
        Command::Erf { run, mass, scale } => {
            for r in erf_run(&run, mass, scale)? {
                println!("{:<12} radius@{} = {}", r.network, r.mass, r.radius);
            }
            println!("wrote {}", run.join("erf").display());
        }
        Command::Verify { json, inject_fault, seed } => {
            let opts = VerifyOptions {
                fault: inject_fault.map(|FaultArg::SkipPermutation| Fault::SkipPermutation),
                seed,
            };
            let report = run_verify(&opts);
            if json {
                println!("{}", serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.to_string()))?);
            } else {
                for c in &report.checks {
                    let tag = if c.passed { "PASS" } else { "FAIL" };
                    println!("{tag} {:<22} {} ({:.2}s)", c.name, c.detail, c.seconds);
                }
            }
            if !report.passed {
                let names: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
                return Err(Failure::Runtime(format!("failed checks: {}", names.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
