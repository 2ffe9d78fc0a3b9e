//! Numerical checks: gradients against finite differences, pseudoinverse identities,
//! step halving, convexity, the zero-error condition and first-step equivalence.

use anyhow::{bail, Result};
use pcn_core::analytic::{convexity_certificate, path_to_convergence, zero_error_residual};
use pcn_core::baselines::backprop;
use pcn_core::inference::{
    activity_step, activity_velocity, init_activities, run_inference, ActivityState, ClampMode, InferenceSettings,
    InitMode, Objective,
};
use pcn_core::learning::{lambda_limit_gradient, mse_loss, weight_gradient};
use pcn_core::linalg::{pseudoinverse, sup_dist, sup_norm, Matrix, PINV_TOL};
use pcn_core::metrics::{energy_report, ProbeContext};
use pcn_core::network::{build_network, forward_pass, ActivationKind, Network, NetworkSpec};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::equilibria::{diag_dominant_spd, split_gradient_fd_error};
use super::{gaussian, partition, per_seed, rng, seeds};
use crate::config::ExperimentConfig;
use crate::report::{Check, Report, Table};

const KINDS: [ActivationKind; 3] = [ActivationKind::Linear, ActivationKind::Tanh, ActivationKind::Relu];

fn random_net(r: &mut ChaCha8Rng, seed: u64, kinds: &[ActivationKind], max_depth: usize) -> Result<Network> {
    let depth = r.random_range(1..=max_depth);
    let widths: Vec<usize> = (0..=depth).map(|_| r.random_range(1..=6)).collect();
    let acts = (0..depth).map(|_| kinds[r.random_range(0..kinds.len())]).collect();
    let spec = NetworkSpec {
        layer_widths: widths,
        activations: acts,
        weight_init_std: r.random_range(0.2..1.5),
        seed,
    };
    Ok(build_network(&spec)?)
}

fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
    let scale = a.norm().max(b.norm());
    if scale < 1e-8 {
        return 0.0;
    }
    (a - b).norm() / scale
}

/// Central differences of `f` with respect to every entry of `m`.
fn fd_matrix(m: &Matrix, h: f64, mut f: impl FnMut(&Matrix) -> Result<f64>) -> Result<Matrix> {
    let mut out = Matrix::zeros(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let mut p = m.clone();
            p[(i, j)] += h;
            let mut q = m.clone();
            q[(i, j)] -= h;
            out[(i, j)] = (f(&p)? - f(&q)?) / (2.0 * h);
        }
    }
    Ok(out)
}

/// Worst relative error of the activity velocity, the PC and BP weight gradients
/// and the split gradients against central differences, for one random configuration.
fn gradient_seed(seed: u64) -> Result<[f64; 4]> {
    let mut r = rng(seed, 11);
    let mut net = random_net(&mut r, seed, &KINDS, 4)?;
    if net.depth() == 1 {
        net = random_net(&mut r, seed + 1_000, &KINDS, 4)?;
    }
    if r.random_bool(0.5) {
        let p = (1..=net.depth()).map(|l| diag_dominant_spd(net.width(l), &mut r)).collect();
        net.set_precisions(p)?;
    }
    let depth = net.depth();
    let batch = r.random_range(1..=3);
    let acts: Vec<Matrix> = (0..=depth).map(|l| gaussian(net.width(l), batch, 0.0, 1.0, &mut r)).collect();
    let state = ActivityState::new(&net, acts.clone())?;
    let mode = ClampMode::supervised(acts[0].clone(), acts[depth].clone());
    let h = 1e-6;

    let total = |net: &Network, acts: Vec<Matrix>| -> Result<f64> {
        Ok(energy_report(net, &ActivityState::new(net, acts)?).total)
    };
    let v = activity_velocity(&net, &state, &mode, true, Objective::Standard);
    let mut act_err: f64 = 0.0;
    for l in 1..depth {
        let fd = fd_matrix(&acts[l], h, |m| {
            let mut a = acts.clone();
            a[l] = m.clone();
            total(&net, a)
        })?;
        act_err = act_err.max(rel_err(&(&v[l] * -2.0), &fd));
    }

    let grads = weight_gradient(&net, &state);
    let mut pc_err: f64 = 0.0;
    for l in 1..=depth {
        let fd = fd_matrix(net.weight(l), h, |w| {
            let mut n = net.clone();
            n.set_weight(l, w.clone())?;
            total(&n, acts.clone())
        })?;
        pc_err = pc_err.max(rel_err(&grads[l - 1], &fd));
    }

    let (_, bp) = backprop(&net, &acts[0], &acts[depth])?;
    let mut bp_err: f64 = 0.0;
    for l in 1..=depth {
        let fd = fd_matrix(net.weight(l), h, |w| {
            let mut n = net.clone();
            n.set_weight(l, w.clone())?;
            let out = forward_pass(&n, &acts[0])?;
            Ok(mse_loss(&out[depth], &acts[depth])?)
        })?;
        bp_err = bp_err.max(rel_err(&bp[l - 1], &fd));
    }

    let split_err = split_gradient_fd_error(&net, &state, &mode)?;
    Ok([act_err, pc_err, bp_err, split_err])
}

/// Worst relative violation of the four Penrose conditions.
fn penrose_seed(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 12);
    let (m, n) = (r.random_range(1..=8), r.random_range(1..=8));
    let a = if r.random_bool(0.3) {
        let k = r.random_range(1..=m.min(n));
        gaussian(m, k, 0.0, 1.0, &mut r) * gaussian(k, n, 0.0, 1.0, &mut r)
    } else {
        gaussian(m, n, 0.0, 1.0, &mut r)
    };
    let p = pseudoinverse(&a, PINV_TOL)?;
    let ap = &a * &p;
    let pa = &p * &a;
    let rel = |x: &Matrix, y: &Matrix| sup_dist(x, y) / sup_norm(y).max(1.0);
    Ok(rel(&(&ap * &a), &a)
        .max(rel(&(&pa * &p), &p))
        .max(rel(&ap.transpose(), &ap))
        .max(rel(&pa.transpose(), &pa)))
}

fn random_linear(r: &mut ChaCha8Rng, seed: u64) -> Result<Network> {
    let mut net = random_net(r, seed, &[ActivationKind::Linear], 5)?;
    while net.depth() < 2 {
        net = random_net(r, seed + 7_919, &[ActivationKind::Linear], 5)?;
    }
    Ok(net)
}

fn convexity_seed(seed: u64) -> Result<Vec<f64>> {
    let mut r = rng(seed, 13);
    let net = random_linear(&mut r, seed)?;
    Ok(convexity_certificate(&net)?.min_eigs)
}

fn convexity_report(n: usize, report: &mut Report) {
    let runs = partition(per_seed(n, convexity_seed), report);
    let mut t = Table::new("convexity", &["layer"], &["min_eig"]);
    let mut worst = f64::INFINITY;
    for (seed, eigs) in &runs {
        for (i, e) in eigs.iter().enumerate() {
            t.push(Some(*seed), vec![(i + 1).to_string()], vec![*e]);
            worst = worst.min(*e);
        }
    }
    report.checks.push(Check::new(
        "convexity_min_eigenvalue",
        runs.len() == n && worst >= 1.0 - 1e-9,
        format!("{} nets, smallest eigenvalue {worst} (need >= 1 - 1e-9)", runs.len()),
    ));
    report.tables.push(t);
}

pub fn convexity(cfg: &ExperimentConfig) -> Result<Report> {
    let mut report = Report::default();
    convexity_report(seeds(cfg, 100), &mut report);
    Ok(report)
}

/// Euler error at `steps` and `2 * steps` over a unit horizon, one hidden layer.
fn path_seed(seed: u64, steps: usize) -> Result<(f64, f64)> {
    let mut r = rng(seed, 14);
    let widths = [r.random_range(1..=6), r.random_range(1..=6), r.random_range(1..=6)];
    let net = build_network(&NetworkSpec::uniform(&widths, ActivationKind::Linear, 0.7, seed))?;
    let xb = gaussian(widths[0], 1, 0.0, 1.0, &mut r);
    let xa = gaussian(widths[2], 1, 0.0, 1.0, &mut r);
    let x0 = gaussian(widths[1], 1, 0.0, 1.0, &mut r);
    let horizon = 1.0;
    let exact = path_to_convergence(net.weight(1), net.weight(2), &xb, &xa, &x0, horizon)?;
    let mode = ClampMode::supervised(xb.clone(), xa.clone());
    let euler = |k: usize| -> Result<f64> {
        let mut s = ActivityState::new(&net, vec![xb.clone(), x0.clone(), xa.clone()])?;
        for _ in 0..k {
            s = activity_step(&net, &s, &mode, horizon / k as f64);
        }
        Ok(sup_dist(s.activity(1), &exact))
    };
    Ok((euler(steps)?, euler(2 * steps)?))
}

fn path_report(n: usize, steps: usize, report: &mut Report) {
    let runs = partition(per_seed(n, |s| path_seed(s, steps)), report);
    let mut t = Table::new("path", &[], &["err_h", "err_h_half", "ratio"]);
    let mut good = 0;
    let mut worst: f64 = 0.0;
    for (seed, (a, b)) in &runs {
        let ratio = a / b;
        t.push(Some(*seed), vec![], vec![*a, *b, ratio]);
        good += ((ratio - 2.0).abs() <= 0.2) as usize;
        worst = worst.max((ratio - 2.0).abs());
    }
    report.checks.push(Check::new(
        "step_halving_ratio",
        good == n,
        format!("{good}/{n} seeds with ratio 2 +- 0.2 (worst deviation {worst:.4})"),
    ));
    report.tables.push(t);
}

pub fn path(cfg: &ExperimentConfig) -> Result<Report> {
    let mut report = Report::default();
    path_report(seeds(cfg, super::SMALL_SEEDS), cfg.max_steps.unwrap_or(200), &mut report);
    Ok(report)
}

/// Input-free square linear chain relaxed until its errors vanish.
fn zero_error_seed(seed: u64) -> Result<(f64, Option<f64>)> {
    let mut r = rng(seed, 15);
    let depth = r.random_range(2..=4);
    let w = 5;
    let weights: Vec<Matrix> = (0..depth)
        .map(|_| gaussian(w, w, 0.0, 1.0, &mut r).qr().q() * r.random_range(0.6..1.2))
        .collect();
    let net = Network::from_weights(weights, vec![ActivationKind::Linear; depth])?;
    let target = gaussian(w, 1, 0.0, 1.0, &mut r);
    let start = gaussian(w, 1, 0.0, 1.0, &mut r);
    let settings = InferenceSettings {
        step_size: 0.2,
        max_steps: 50_000,
        convergence_tol: 1e-13,
        record_trace: false,
        ..Default::default()
    };
    let mode = ClampMode::output_only(target, Some(start));
    let out = run_inference(&net, &mode, &settings, &[], &ProbeContext::default())?;
    let max_err = out.state.errors().iter().map(sup_norm).fold(0.0, f64::max);
    Ok((max_err, zero_error_residual(&net, &out.state)?))
}

fn zero_error_report(n: usize, report: &mut Report) {
    let runs = partition(per_seed(n, zero_error_seed), report);
    let mut t = Table::new("zero_error", &[], &["max_error", "residual"]);
    let (mut applied, mut good) = (0, 0);
    for (seed, (err, res)) in &runs {
        t.push(Some(*seed), vec![], vec![*err, res.unwrap_or(f64::NAN)]);
        if let Some(v) = res {
            applied += 1;
            good += (*v < 1e-6) as usize;
        }
    }
    report.checks.push(Check::new(
        "zero_error_residual",
        applied > 0 && good == applied,
        format!("{good}/{applied} zero-error equilibria with residual below 1e-6 ({} runs)", runs.len()),
    ));
    report.tables.push(t);
}

pub fn zero_error(cfg: &ExperimentConfig) -> Result<Report> {
    let mut report = Report::default();
    zero_error_report(seeds(cfg, super::SMALL_SEEDS), &mut report);
    Ok(report)
}

/// For each hidden layer: the step at which its velocity first moves, and the sup-norm
/// gap between the normalised velocity and the normalised `-dL/dx_l`. Also the
/// relative gap between the lambda-limit weight gradient and BP.
fn first_step_seed(seed: u64) -> Result<(Vec<(usize, usize, f64)>, f64)> {
    let mut r = rng(seed, 16);
    let depth = r.random_range(2..=5);
    let widths: Vec<usize> = (0..=depth).map(|_| r.random_range(2..=6)).collect();
    let hidden = KINDS[(seed % 3) as usize];
    let net = build_network(&NetworkSpec::with_hidden(&widths, hidden, 0.8, seed))?;
    let x = gaussian(widths[0], 2, 0.0, 1.0, &mut r);
    let t = gaussian(widths[depth], 2, 0.0, 1.0, &mut r);
    let mode = ClampMode::supervised(x.clone(), t.clone());
    let (adj, bp) = backprop(&net, &x, &t)?;
    let eta = 0.1;
    let mut state = init_activities(&net, &mode, InitMode::FeedforwardPass)?;
    let mut velocities = Vec::with_capacity(depth);
    for _ in 0..depth {
        velocities.push(activity_velocity(&net, &state, &mode, false, Objective::Standard));
        state = activity_step(&net, &state, &mode, eta);
    }
    // layer l stays put until the output error has travelled down to it
    let mut rows = Vec::new();
    for l in 1..depth {
        let due = depth - 1 - l;
        if (0..due).any(|k| sup_norm(&velocities[k][l]) > 0.0) {
            bail!("layer {l} moved before step {due}");
        }
        let v = &velocities[due][l];
        let desc = -&adj.deltas[l];
        let gap = match (v.norm() > 0.0, desc.norm() > 0.0) {
            (true, true) => sup_dist(&(v / v.norm()), &(&desc / desc.norm())),
            (false, false) => 0.0,
            _ => f64::INFINITY,
        };
        rows.push((l, due, gap));
    }
    let limit = lambda_limit_gradient(&net, &x, &t)?;
    let lam = limit
        .iter()
        .zip(&bp)
        .map(|(a, b)| sup_dist(a, b) / sup_norm(b).max(1.0))
        .fold(0.0, f64::max);
    Ok((rows, lam))
}

fn first_step_report(n: usize, report: &mut Report) {
    let runs = partition(per_seed(n, first_step_seed), report);
    let mut t = Table::new("first_step", &["layer"], &["first_step", "direction_gap"]);
    let mut g = Table::new("first_step_lambda", &[], &["lambda_limit_gap"]);
    let (mut dir_ok, mut lam_ok) = (0, 0);
    let (mut worst_dir, mut worst_lam): (f64, f64) = (0.0, 0.0);
    for (seed, (rows, lam)) in &runs {
        let mut ok = true;
        for (l, step, gap) in rows {
            t.push(Some(*seed), vec![l.to_string()], vec![*step as f64, *gap]);
            ok &= *gap < 1e-10;
            worst_dir = worst_dir.max(*gap);
        }
        g.push(Some(*seed), vec![], vec![*lam]);
        dir_ok += ok as usize;
        lam_ok += (*lam <= 1e-12) as usize;
        worst_lam = worst_lam.max(*lam);
    }
    report.checks.push(Check::new(
        "first_step_bp_direction",
        dir_ok == n,
        format!("{dir_ok}/{n} seeds, worst gap {worst_dir:e} (need < 1e-10)"),
    ));
    report.checks.push(Check::new(
        "lambda_limit_equals_bp",
        lam_ok == n,
        format!("{lam_ok}/{n} seeds, worst relative gap {worst_lam:e} (need <= 1e-12)"),
    ));
    report.tables.push(t);
    report.tables.push(g);
}

pub fn first_step(cfg: &ExperimentConfig) -> Result<Report> {
    let mut report = Report::default();
    first_step_report(seeds(cfg, super::SMALL_SEEDS), &mut report);
    Ok(report)
}

pub fn numerics(cfg: &ExperimentConfig) -> Result<Report> {
    let n = seeds(cfg, 100);
    let mut report = Report::default();
    let grads = partition(per_seed(n, gradient_seed), &mut report);
    let mut t = Table::new("numerics_gradients", &[], &["activity", "pc_weight", "bp_weight", "split"]);
    let mut worst = [0.0f64; 4];
    let mut good = 0;
    for (seed, errs) in &grads {
        t.push(Some(*seed), vec![], errs.to_vec());
        for (w, e) in worst.iter_mut().zip(errs) {
            *w = w.max(*e);
        }
        good += errs.iter().all(|e| *e < 1e-5) as usize;
    }
    report.checks.push(Check::new(
        "finite_difference_gradients",
        good == n,
        format!(
            "{good}/{n} configurations; worst activity {:.1e}, PC weight {:.1e}, BP weight {:.1e}, split {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    ));
    report.tables.push(t);

    let pen = partition(per_seed(n, penrose_seed), &mut report);
    let mut p = Table::new("numerics_penrose", &[], &["violation"]);
    let mut pworst: f64 = 0.0;
    for (seed, v) in &pen {
        p.push(Some(*seed), vec![], vec![*v]);
        pworst = pworst.max(*v);
    }
    report.checks.push(Check::new(
        "penrose_conditions",
        pen.len() == n && pworst < 1e-9,
        format!("{} matrices, worst relative violation {pworst:e} (need < 1e-9)", pen.len()),
    ));
    report.tables.push(p);

    path_report(seeds(cfg, super::SMALL_SEEDS), 200, &mut report);
    convexity_report(n, &mut report);
    zero_error_report(seeds(cfg, super::SMALL_SEEDS), &mut report);
    Ok(report)
}
