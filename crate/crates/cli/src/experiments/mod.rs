//! Named experiments. Each one runs its seeds (in parallel), merges the results
//! in seed order and returns tables plus pass/fail checks.

mod energy;
mod equilibria;
mod mnist;
mod numerics;
mod similarity;

use anyhow::Result;
use pcn_core::linalg::Matrix;
use pcn_core::network::{build_network, ActivationKind, Network, NetworkSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::report::Report;

pub use mnist::MnistPaths;

pub struct Experiment {
    pub name: &'static str,
    pub description: &'static str,
    pub default_seeds: usize,
    pub run: fn(&ExperimentConfig) -> Result<Report>,
}

pub const SMALL_SEEDS: usize = 50;
pub const MNIST_SEEDS: usize = 1;
pub const DEFAULT_STEP: f64 = 0.05;
pub const DEFAULT_STEPS: usize = 100;
pub const DEFAULT_STD: f64 = 0.223_606_797_749_979;

pub static EXPERIMENTS: &[Experiment] = &[
    Experiment {
        name: "fig1a",
        description: "distance of each layer to its TP target during inference, input-free 5-layer tanh net",
        default_seeds: SMALL_SEEDS,
        run: equilibria::fig1a,
    },
    Experiment {
        name: "fig1b",
        description: "activities of one layer converging to the analytic linear equilibrium, 3-layer linear net",
        default_seeds: SMALL_SEEDS,
        run: equilibria::fig1b,
    },
    Experiment {
        name: "fig1c",
        description: "total distance to the analytic linear equilibrium during inference",
        default_seeds: SMALL_SEEDS,
        run: equilibria::fig1c,
    },
    Experiment {
        name: "fig2",
        description: "BP/TP interpolation: linear equilibria across precision ratios and tanh cosine traces",
        default_seeds: SMALL_SEEDS,
        run: similarity::fig2,
    },
    Experiment {
        name: "fig3a",
        description: "activities converging to the analytic precision-weighted equilibrium",
        default_seeds: SMALL_SEEDS,
        run: equilibria::fig3a,
    },
    Experiment {
        name: "fig3b",
        description: "total distance to the precision-weighted equilibrium during inference",
        default_seeds: SMALL_SEEDS,
        run: equilibria::fig3b,
    },
    Experiment {
        name: "fig3c",
        description: "equilibrium similarity to BP adjoints and TP targets per precision ratio, 3-layer tanh net",
        default_seeds: SMALL_SEEDS,
        run: similarity::fig3c,
    },
    Experiment {
        name: "fig4a",
        description: "output loss and residual energy during one inference phase, 4-layer relu net",
        default_seeds: SMALL_SEEDS,
        run: energy::fig4a,
    },
    Experiment {
        name: "fig4b",
        description: "change of output loss over each inference phase during 20 training epochs",
        default_seeds: SMALL_SEEDS,
        run: energy::fig4b,
    },
    Experiment {
        name: "fig4c",
        description: "full-batch MNIST training on 1 or 500 digits: loss and gradient norms",
        default_seeds: MNIST_SEEDS,
        run: mnist::fig4c,
    },
    Experiment {
        name: "fig4d",
        description: "per-layer cosine between PC and BP weight updates during the 500-digit run",
        default_seeds: MNIST_SEEDS,
        run: mnist::fig4d,
    },
    Experiment {
        name: "fig4e",
        description: "PC and BP test accuracy on an MNIST subset with identical hyperparameters",
        default_seeds: MNIST_SEEDS,
        run: mnist::fig4e,
    },
    Experiment {
        name: "thm31",
        description: "output-free inference settles on the feedforward pass",
        default_seeds: SMALL_SEEDS,
        run: equilibria::thm31,
    },
    Experiment {
        name: "thm33",
        description: "input-free inference settles on the TP targets, output layers first",
        default_seeds: SMALL_SEEDS,
        run: equilibria::thm33,
    },
    Experiment {
        name: "thm34",
        description: "linear equilibrium: dynamics against the closed form",
        default_seeds: SMALL_SEEDS,
        run: equilibria::thm34,
    },
    Experiment {
        name: "thm35",
        description: "precision-weighted linear equilibrium: dynamics against the closed form",
        default_seeds: SMALL_SEEDS,
        run: equilibria::thm35,
    },
    Experiment {
        name: "lemma32",
        description: "marginal condition residual at converged equilibria, with finite-difference cross-check",
        default_seeds: SMALL_SEEDS,
        run: equilibria::lemma32,
    },
    Experiment {
        name: "bound",
        description: "energy gradient bound evaluated at every inference step",
        default_seeds: SMALL_SEEDS,
        run: energy::bound,
    },
    Experiment {
        name: "convexity",
        description: "minimum eigenvalues of the per-layer Hessians of random linear nets",
        default_seeds: 100,
        run: numerics::convexity,
    },
    Experiment {
        name: "path",
        description: "closed-form single-layer trajectory against Euler, step-halving ratio",
        default_seeds: SMALL_SEEDS,
        run: numerics::path,
    },
    Experiment {
        name: "zero-error",
        description: "feedforward and feedback drive agree when equilibrium errors vanish",
        default_seeds: SMALL_SEEDS,
        run: numerics::zero_error,
    },
    Experiment {
        name: "first-step",
        description: "first activity update from feedforward init points along the BP adjoint; lambda-limit gradients equal BP",
        default_seeds: SMALL_SEEDS,
        run: numerics::first_step,
    },
    Experiment {
        name: "numerics",
        description: "finite-difference gradient checks, Penrose conditions, step halving, convexity, zero-error",
        default_seeds: 100,
        run: numerics::numerics,
    },
];

pub fn find(name: &str) -> Option<&'static Experiment> {
    EXPERIMENTS.iter().find(|e| e.name == name)
}

/// Validates the config, runs the experiment and writes its files.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    cfg.prepare_output()?;
    let exp = find(&cfg.experiment).expect("validated");
    let report = (exp.run)(cfg)?;
    report.write(&cfg.out, exp.name)?;
    Ok(report)
}

pub(crate) fn seeds(cfg: &ExperimentConfig, default: usize) -> usize {
    cfg.seeds.unwrap_or(default)
}

/// Runs `f` for seeds `0..n` in parallel; results come back in seed order.
pub(crate) fn per_seed<T, F>(n: usize, f: F) -> Vec<(u64, Result<T>)>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync,
{
    (0..n as u64)
        .into_par_iter()
        .map(|s| {
            let r = f(s);
            log::info!("seed {s} finished");
            (s, r)
        })
        .collect()
}

/// Splits per-seed results into successes and error strings for the report.
pub(crate) fn partition<T>(results: Vec<(u64, Result<T>)>, report: &mut Report) -> Vec<(u64, T)> {
    let mut ok = Vec::with_capacity(results.len());
    for (seed, r) in results {
        match r {
            Ok(v) => ok.push((seed, v)),
            Err(e) => {
                log::warn!("seed {seed}: {e:#}");
                report.errors.push(format!("seed {seed}: {e:#}"));
            }
        }
    }
    ok
}

pub(crate) fn gaussian(rows: usize, cols: usize, mean: f64, std: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let n = Normal::new(mean, std).expect("finite std");
    Matrix::from_fn(rows, cols, |_, _| n.sample(rng))
}

pub(crate) fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub(crate) fn net(widths: &[usize], act: ActivationKind, seed: u64) -> Result<Network> {
    Ok(build_network(&NetworkSpec::uniform(widths, act, DEFAULT_STD, seed))?)
}

/// Identity output layer, `act` everywhere else.
pub(crate) fn hidden_net(widths: &[usize], act: ActivationKind, seed: u64) -> Result<Network> {
    Ok(build_network(&NetworkSpec::with_hidden(widths, act, DEFAULT_STD, seed))?)
}

/// Keeps step 0, every `stride`-th step and the last one.
pub(crate) fn kept(step: usize, last: usize, stride: usize) -> bool {
    step.is_multiple_of(stride) || step == last
}
