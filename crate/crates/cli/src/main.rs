use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::Parser;
use pcn_cli::{run_experiment, ExperimentConfig, EXPERIMENTS};

/// Run predictive coding experiments and write their CSV tables.
///
/// Settings come from built-in defaults, then `--config`, then flags.
/// Exit status: 0 all checks passed, 1 a check failed or a run errored, 2 bad usage or config.
#[derive(Parser, Debug)]
#[command(name = "pcn", version)]
struct Cli {
    /// Experiment name, or `list`.
    experiment: String,
    #[arg(long)]
    seeds: Option<String>,
    /// Inference steps per phase.
    #[arg(long)]
    steps: Option<String>,
    /// Inference step size.
    #[arg(long)]
    step_size: Option<String>,
    #[arg(long)]
    weight_lr: Option<String>,
    #[arg(long)]
    momentum: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    /// Comma-separated precision ratios.
    #[arg(long)]
    ratios: Option<String>,
    /// Number of MNIST training digits for the full-batch runs.
    #[arg(long)]
    digits: Option<String>,
    /// Cap on MNIST test images.
    #[arg(long)]
    test_limit: Option<String>,
    #[arg(long)]
    trace_stride: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
    /// `key = value` file applied before the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mnist_images: Option<String>,
    #[arg(long)]
    mnist_labels: Option<String>,
    #[arg(long)]
    mnist_test_images: Option<String>,
    #[arg(long)]
    mnist_test_labels: Option<String>,
}

impl Cli {
    fn overrides(&self) -> Vec<(&'static str, &String)> {
        [
            ("seeds", &self.seeds),
            ("steps", &self.steps),
            ("step-size", &self.step_size),
            ("weight-lr", &self.weight_lr),
            ("momentum", &self.momentum),
            ("epochs", &self.epochs),
            ("batch-size", &self.batch_size),
            ("ratios", &self.ratios),
            ("digits", &self.digits),
            ("test-limit", &self.test_limit),
            ("trace-stride", &self.trace_stride),
            ("out", &self.out),
            ("mnist-images", &self.mnist_images),
            ("mnist-labels", &self.mnist_labels),
            ("mnist-test-images", &self.mnist_test_images),
            ("mnist-test-labels", &self.mnist_test_labels),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_ref().map(|v| (k, v)))
        .collect()
    }

    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::new(&self.experiment);
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        // the positional name wins over an `experiment =` line in the file
        cfg.experiment = self.experiment.clone();
        for (k, v) in self.overrides() {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn list() {
    let width = EXPERIMENTS.iter().map(|e| e.name.len()).max().unwrap_or(0);
    for e in EXPERIMENTS {
        println!("{:width$}  [{:>3} seeds]  {}", e.name, e.default_seeds, e.description);
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.experiment == "list" {
        list();
        return ExitCode::SUCCESS;
    }
    let cfg = match cli.config() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let report = match run_experiment(&cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::FAILURE;
        }
    };
    for c in &report.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    const SHOWN: usize = 5;
    for e in report.errors.iter().take(SHOWN) {
        println!("ERROR {e}");
    }
    if report.errors.len() > SHOWN {
        println!("ERROR ... {} more, see the checks CSV", report.errors.len() - SHOWN);
    }
    println!("wrote {}", cfg.out.display());
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
