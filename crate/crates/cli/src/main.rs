use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dcond::condense::{Method, MethodConfig};
use dcond::data::{save_dataset, two_gaussian_blobs};
use dcond::discrepancy::Metric;
use dcond::harness::{
    discrepancy_command, evaluate_command, plot_command, run_to_dir, DiscrepancyConfig, EvalConfig, RunConfig,
};
use dcond::spaces::Regime;
use dcond::Error;

#[derive(Parser)]
#[command(name = "dcond", version, about = "Dataset condensation and discrepancy tooling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Condense a dataset, evaluate the result and write the run artifacts.
    Condense(CondenseArgs),
    /// Compare two CSV datasets under the selected discrepancies.
    Discrepancy {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Comma-separated: dd_feature, dd_gradient, dd_moment, mmd, w1,
        /// hausdorff, cd, gd.
        #[arg(long, default_value = "mmd,w1,hausdorff")]
        metrics: String,
        /// Size of the random model batch used by model-based metrics.
        #[arg(long, default_value_t = 8)]
        models: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report to this JSON file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train fresh models on a synthetic CSV and test them on real data.
    Evaluate {
        #[arg(long)]
        synthetic: PathBuf,
        #[arg(long)]
        real: PathBuf,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render objective and accuracy plots from a run directory's files.
    Plot {
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        steps: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a two-Gaussian-blobs dataset as CSV.
    Blobs {
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long, default_value_t = 6.0)]
        separation: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Flags override the matching fields of the config file.
#[derive(clap::Args)]
struct CondenseArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    regime: Option<String>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_regime(s: &str) -> dcond::Result<Regime> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Error::Config(format!("unknown regime `{s}`")))
}

fn resolve(args: &CondenseArgs) -> dcond::Result<RunConfig> {
    let mut cfg = match (&args.config, &args.method) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(m)) => RunConfig::new(MethodConfig::new(Method::parse(m)?)),
        (None, None) => return Err(Error::Config("give --config or --method".into())),
    };
    if let Some(m) = &args.method {
        cfg.method.method = Method::parse(m)?;
    }
    if let Some(d) = &args.dataset {
        cfg.dataset = Some(d.clone());
    }
    if let Some(s) = args.steps {
        cfg.method.steps = s;
    }
    if let Some(p) = args.per_class {
        cfg.per_class = p;
    }
    if let Some(r) = args.repeats {
        cfg.evaluation.repeats = r;
    }
    if let Some(r) = &args.regime {
        cfg.regime = parse_regime(r)?;
    }
    if let Some(l) = args.latent_dim {
        cfg.latent_dim = Some(l);
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.out_dir = Some(o.clone());
    }
    Ok(cfg)
}

fn write_json(path: &PathBuf, text: &str) -> dcond::Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

fn execute(cli: Cli) -> dcond::Result<()> {
    match cli.command {
        Command::Condense(args) => {
            let cfg = resolve(&args)?;
            let out = cfg
                .out_dir
                .clone()
                .ok_or_else(|| Error::Config("no output directory (--out)".into()))?;
            let res = run_to_dir(&cfg, &out)?;
            let r = &res.report;
            println!("method {} -> {} synthetic rows", r.method, r.synthetic_rows);
            for a in &r.architectures {
                println!(
                    "{}: synthetic {:.4} ± {:.4}, baseline {:.4} ± {:.4}",
                    a.name, a.synthetic.mean, a.synthetic.std, a.baseline.mean, a.baseline.std
                );
            }
            if let Some(gd) = r.gd_estimate {
                println!("gd estimate {gd:.6}");
            }
            println!("artifacts in {}", out.display());
        }
        Command::Discrepancy {
            a,
            b,
            metrics,
            models,
            seed,
            out,
        } => {
            let metrics: Vec<Metric> = metrics
                .split(',')
                .filter(|m| !m.trim().is_empty())
                .map(Metric::parse)
                .collect::<dcond::Result<_>>()?;
            if metrics.is_empty() {
                return Err(Error::Config("no metrics selected".into()));
            }
            let report = discrepancy_command(&a, &b, &metrics, models, seed)?;
            for (name, v) in report.values() {
                println!("{name} {v}");
            }
            if let Some(p) = out {
                write_json(&p, &(report.to_json()? + "\n"))?;
            }
        }
        Command::Evaluate {
            synthetic,
            real,
            repeats,
            epochs,
            train_fraction,
            seed,
            out,
        } => {
            let mut eval = EvalConfig {
                repeats,
                ..EvalConfig::default()
            };
            if let Some(e) = epochs {
                eval.train.epochs = e;
            }
            let report = evaluate_command(&synthetic, &real, &eval, &DiscrepancyConfig::default(), train_fraction, seed)?;
            for a in &report.architectures {
                println!(
                    "{}: synthetic {:.4} ± {:.4}, baseline {:.4} ± {:.4}",
                    a.name, a.synthetic.mean, a.synthetic.std, a.baseline.mean, a.baseline.std
                );
            }
            if let Some(p) = out {
                write_json(&p, &report.to_json()?)?;
            }
        }
        Command::Plot { report, steps, out } => {
            for name in plot_command(report.as_deref(), steps.as_deref(), &out)? {
                println!("{}", out.join(name).display());
            }
        }
        Command::Blobs {
            n,
            dim,
            separation,
            seed,
            out,
        } => {
            save_dataset(&two_gaussian_blobs(n, dim, separation, seed)?, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
