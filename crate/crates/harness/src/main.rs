use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use ngvi_harness::config::{EstimatorChoice, Method, ModelChoice, ScheduleSpec};
use ngvi_harness::experiment::write_summary;
use ngvi_harness::suites::{counterexample, landscape, verify};
use ngvi_harness::{run_experiment, ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(name = "ngvi", version, about = "Natural-gradient variational inference experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write metrics.csv and summary.json.
    Fit(RunArgs),
    /// Run an experiment plus identity and bound checks; exits with 2 on any finding.
    Verify(RunArgs),
    /// Search for non-convexity witnesses in logistic and Poisson regression.
    Landscape {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Count how often the reparameterization gradient fails to be negative definite.
    Counterexample {
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment file; a small synthetic linear-regression run when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "seed", alias = "seeds", value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    estimator: Option<EstimatorChoice>,
    /// `2/(2+t)`, `constant:<g>` or `inverse:<c>`.
    #[arg(long)]
    schedule: Option<ScheduleSpec>,
    #[arg(long)]
    model: Option<ModelChoice>,
    #[arg(long)]
    optimizer: Option<Method>,
    /// Maximum number of seeds run at once.
    #[arg(long)]
    jobs: Option<usize>,
}

const DEFAULT_CONFIG: &str = r#"
name = "linreg-demo"
iterations = 1000
batch_size = 10
seeds = [0, 1, 2, 3]
cadence = "default"

[model]
kind = "linreg"
noise_var = 1.0

[data]
source = "synthetic"
n = 200
d = 3
seed = 0
"#;

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::from_toml(DEFAULT_CONFIG)?,
        };
        cfg.apply(&Overrides {
            seeds: (!self.seeds.is_empty()).then(|| self.seeds.clone()),
            output: self.out.clone(),
            iterations: self.iterations,
            batch_size: self.batch_size,
            estimator: self.estimator,
            schedule: self.schedule,
            model: self.model,
            optimizer: self.optimizer,
            jobs: self.jobs,
        });
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Fit(args) => {
            let out = run_experiment(&args.config()?)?;
            let s = &out.summary;
            let failed = s.seeds.iter().filter(|r| r.failure.is_some()).count();
            println!("config {}: {} seeds, {failed} stopped early", &s.config_hash[..12], s.seeds.len());
            if let Some(b) = &s.bound {
                println!("bound V2 = {:e}: {}", b.v2, if b.all_hold { "holds" } else { "violated" });
            }
            println!("metrics: {}", out.metrics_path.display());
            println!("summary: {}", out.summary_path.display());
            Ok(0)
        }
        Command::Verify(args) => {
            let report = verify(&args.config()?)?;
            for c in &report.checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            for f in &report.findings {
                println!("finding [{}] {}: {}", &f.config_hash[..12], f.kind, f.detail);
            }
            Ok(if report.passed { 0 } else { 2 })
        }
        Command::Landscape { seed, out } => {
            let report = landscape(seed)?;
            std::fs::create_dir_all(&out)?;
            write_summary(&out.join("landscape.json"), &report)?;
            match &report.logistic.witness {
                Some(w) => println!(
                    "logistic witness at n = {}: curvature {:.4} ± {:.4}",
                    w.n, w.curvature.value, w.curvature.std_error
                ),
                None => println!("logistic witness: none on the grid"),
            }
            match report.poisson.found {
                Some((c, eig)) => println!("poisson sign flip at c = {c}: minimum eigenvalue {eig:.4e}"),
                None => println!("poisson sign flip: none up to the largest scale"),
            }
            let found = report.logistic.witness.is_some() && report.poisson.found.is_some();
            Ok(if found { 0 } else { 2 })
        }
        Command::Counterexample { trials, seed, out } => {
            let report = counterexample(trials, seed)?;
            std::fs::create_dir_all(&out)?;
            write_summary(&out.join("counterexample.json"), &report)?;
            println!(
                "not negative definite in {}/{} trials ({:.3}, 95% CI [{:.3}, {:.3}])",
                report.not_negative_definite,
                report.trials,
                report.frequency,
                report.wilson_95.lower,
                report.wilson_95.upper
            );
            println!(
                "price estimator: {}",
                if report.price_exact { "exactly -I/2 in every trial" } else { "deviates from -I/2" }
            );
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // Usage errors exit with 1 so that 2 keeps meaning a failed check.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(u8::from(e.use_stderr()));
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
