//! Learning phase: the M-step weight update, the EM training loop, optimizers,
//! and the energy gradient bound monitor.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselines::backprop;
use crate::data::{argmax_columns, Dataset};
use crate::error::{PcnError, Result};
use crate::inference::{
    energy_scales, init_activities, relax, weighted_errors, ActivityState, BoundStats, ClampMode, InferenceSettings,
    InitMode, Objective,
};
use crate::linalg::{add_scaled, solve_spd, Matrix};
use crate::metrics::{cosine_similarity, energy_split_gradients, per_sample_output_loss, ProbeContext};
use crate::network::{forward_pass, Network};

/// `||target - output||^2`, summed over every entry.
pub fn mse_loss(output: &Matrix, target: &Matrix) -> Result<f64> {
    if output.shape() != target.shape() {
        return Err(PcnError::Shape(format!(
            "output {:?} vs target {:?}",
            output.shape(),
            target.shape()
        )));
    }
    Ok((target - output).norm_squared())
}

fn gradient_with(net: &Network, state: &ActivityState, use_precision: bool, scales: &[f64]) -> Vec<Matrix> {
    let weighted = weighted_errors(net, state, use_precision, scales);
    (1..=net.depth())
        .map(|l| {
            let gated = weighted[l].component_mul(&net.activation(l).derivative(state.preact(l)));
            (gated * state.activity(l - 1).transpose()) * -2.0
        })
        .collect()
}

/// `dF/dW_l = -2 (P_l e_l .* f'(W_l x_{l-1})) x_{l-1}^T`, summed over the batch.
/// Index 0 holds the gradient for `W_1`.
pub fn weight_gradient(net: &Network, state: &ActivityState) -> Vec<Matrix> {
    let scales = energy_scales(net.depth(), Objective::Standard);
    gradient_with(net, state, !net.has_identity_precisions(), &scales)
}

/// Weight gradient of the chosen inference objective.
pub fn objective_weight_gradient(net: &Network, state: &ActivityState, objective: Objective) -> Vec<Matrix> {
    let scales = energy_scales(net.depth(), objective);
    gradient_with(net, state, !net.has_identity_precisions(), &scales)
}

/// Euclidean norm over all blocks concatenated.
pub fn gradient_norm(grads: &[Matrix]) -> f64 {
    grads.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCheck {
    /// `sum_l -(dL/dx_l)^T dE_tilde/dx_l` over the free layers.
    pub lhs: f64,
    /// `sum_l ||dL/dx_l||^2`.
    pub rhs: f64,
    pub satisfied: bool,
}

/// Evaluates the energy gradient bound at the current activities.
pub fn energy_gradient_bound_check(net: &Network, state: &ActivityState, mode: &ClampMode) -> BoundCheck {
    let (gl, ge) = energy_split_gradients(net, state, mode);
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    for (l, e) in gl.iter().zip(&ge) {
        lhs -= l.dot(e);
        rhs += l.norm_squared();
    }
    BoundCheck {
        lhs,
        rhs,
        satisfied: lhs <= rhs + 1e-12,
    }
}

/// `lim_{lambda -> 0} (dF_lambda/dW) / lambda` at the feedforward pass.
///
/// At `lambda = 0` the equilibrium is the feedforward pass itself and the
/// gradient vanishes; the first-order term is found from the tangent of the
/// equilibrium, `H u = -dL/dx` with `H` the Hessian of `E_tilde` over the
/// hidden layers. Identity precisions only.
pub fn lambda_limit_gradient(net: &Network, data: &Matrix, target: &Matrix) -> Result<Vec<Matrix>> {
    let depth = net.depth();
    let ff = forward_pass(net, data)?;
    if target.shape() != ff[depth].shape() {
        return Err(PcnError::Shape("target does not match the network output".into()));
    }
    let derivs: Vec<Matrix> = (0..=depth)
        .map(|l| {
            if l == 0 {
                Matrix::zeros(0, 0)
            } else {
                net.activation(l).derivative(&(net.weight(l) * &ff[l - 1]))
            }
        })
        .collect();
    let out_err = target - &ff[depth];
    let mut grads: Vec<Matrix> = (1..=depth)
        .map(|l| Matrix::zeros(net.width(l), net.width(l - 1)))
        .collect();
    grads[depth - 1] = (out_err.component_mul(&derivs[depth]) * ff[depth - 1].transpose()) * -2.0;
    if depth == 1 {
        return Ok(grads);
    }
    // hidden layers 1..L-1 stacked
    let offsets: Vec<usize> = (1..depth)
        .scan(0, |acc, l| {
            let at = *acc;
            *acc += net.width(l);
            Some(at)
        })
        .collect();
    let n: usize = (1..depth).map(|l| net.width(l)).sum();
    for s in 0..data.ncols() {
        // J: unit block lower-bidiagonal, eps = J dx
        let mut j = Matrix::identity(n, n);
        for l in 2..depth {
            let block = Matrix::from_diagonal(&derivs[l].column(s).into_owned()) * net.weight(l);
            let (r, c) = (offsets[l - 1], offsets[l - 2]);
            j.view_mut((r, c), block.shape()).copy_from(&(-block));
        }
        let h = j.transpose() * &j * 2.0;
        let mut grad_l = Matrix::zeros(n, 1);
        let gated = out_err.column(s).component_mul(&derivs[depth].column(s));
        let top = net.weight(depth).tr_mul(&gated) * -2.0;
        grad_l.view_mut((offsets[depth - 2], 0), top.shape()).copy_from(&top);
        let u = solve_spd(&h, &(-grad_l))?;
        let eps = &j * u;
        for l in 1..depth {
            let e = eps.view((offsets[l - 1], 0), (net.width(l), 1));
            let gated = e.component_mul(&derivs[l].column(s));
            grads[l - 1] -= (gated * ff[l - 1].column(s).transpose()) * 2.0;
        }
    }
    Ok(grads)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub weight_lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub inference: InferenceSettings,
    /// Evaluate the energy gradient bound at every inference step.
    pub loss_monitor: bool,
    /// Shuffle the sample order each epoch with this seed; `None` keeps file order.
    pub shuffle_seed: Option<u64>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            weight_lr: 0.01,
            momentum: 0.0,
            nesterov: false,
            epochs: 1,
            batch_size: 32,
            inference: InferenceSettings {
                record_trace: false,
                ..InferenceSettings::default()
            },
            loss_monitor: false,
            shuffle_seed: None,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.weight_lr >= 0.0 && self.weight_lr.is_finite()) {
            return Err(PcnError::InvalidSettings(format!("weight_lr must be >= 0, got {}", self.weight_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(PcnError::InvalidSettings(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(PcnError::InvalidSettings("batch_size must be at least 1".into()));
        }
        self.inference.validate()
    }
}

/// SGD with optional (Nesterov) momentum: `v = mu v + g`, step `g + mu v` or `v`.
#[derive(Debug, Clone)]
pub struct Optimizer {
    lr: f64,
    momentum: f64,
    nesterov: bool,
    velocity: Vec<Matrix>,
}

impl Optimizer {
    pub fn new(net: &Network, settings: &TrainSettings) -> Self {
        Optimizer {
            lr: settings.weight_lr,
            momentum: settings.momentum,
            nesterov: settings.nesterov,
            velocity: net.weights().iter().map(|w| Matrix::zeros(w.nrows(), w.ncols())).collect(),
        }
    }

    /// Applies one descent step with gradients `grads` (index 0 is `W_1`).
    pub fn step(&mut self, net: &mut Network, grads: &[Matrix]) {
        if self.lr == 0.0 {
            return;
        }
        for ((w, v), g) in net.weights_mut().iter_mut().zip(&mut self.velocity).zip(grads) {
            if self.momentum == 0.0 {
                add_scaled(w, -self.lr, g);
                continue;
            }
            *v *= self.momentum;
            *v += g;
            if self.nesterov {
                add_scaled(w, -self.lr, g);
                add_scaled(w, -self.lr * self.momentum, v);
            } else {
                add_scaled(w, -self.lr, v);
            }
        }
    }
}

/// What one EM step observed.
#[derive(Debug, Clone)]
pub struct StepMetrics {
    /// Output loss per sample at the start and end of the inference phase.
    pub loss_before: Vec<f64>,
    pub loss_after: Vec<f64>,
    /// Batch-mean weight gradient applied in the M-step.
    pub gradient: Vec<Matrix>,
    pub converged: bool,
    pub inference_steps: usize,
    pub bound: BoundStats,
}

impl StepMetrics {
    /// Largest per-sample change in output loss over the inference phase.
    pub fn max_delta_loss(&self) -> f64 {
        self.loss_before
            .iter()
            .zip(&self.loss_after)
            .map(|(b, a)| a - b)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// E-step (inference with both ends clamped) then M-step (one optimizer update).
pub fn em_train_step(
    net: &mut Network,
    data: &Matrix,
    target: &Matrix,
    settings: &TrainSettings,
    optimizer: &mut Optimizer,
) -> Result<StepMetrics> {
    let mode = ClampMode::supervised(data.clone(), target.clone());
    let mut inference = settings.inference.clone();
    inference.check_energy_bound = inference.check_energy_bound || settings.loss_monitor;
    let start = init_activities(net, &mode, inference.init)?;
    let loss_before = per_sample_output_loss(&start);
    let out = relax(net, &mode, &inference, &[], &ProbeContext::default(), start)?;
    let loss_after = per_sample_output_loss(&out.state);
    let batch = data.ncols() as f64;
    let mut gradient = objective_weight_gradient(net, &out.state, inference.objective);
    for g in &mut gradient {
        *g /= batch;
    }
    optimizer.step(net, &gradient);
    Ok(StepMetrics {
        loss_before,
        loss_after,
        gradient,
        converged: out.converged,
        inference_steps: out.steps,
        bound: out.bound,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientRule {
    PredictiveCoding,
    Backprop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean feedforward loss per training sample after the epoch.
    pub loss: f64,
    /// Norm of the full-training-set mean BP gradient after the epoch.
    pub bp_grad_norm: f64,
    /// Norm of the last applied gradient.
    pub pc_grad_norm: f64,
    /// Argmax accuracy on the evaluation set.
    pub accuracy: f64,
    /// Largest per-sample output-loss change over any inference phase of the epoch.
    pub delta_l_inference: f64,
    /// Mean cosine between the applied and the BP gradient per layer.
    pub cos_sim: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainRecord {
    pub epochs: Vec<EpochRecord>,
    /// Max per-sample output-loss change of every inference phase, in order.
    pub step_delta_l: Vec<f64>,
    pub bound_checks: usize,
    pub bound_violations: usize,
}

impl TrainRecord {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let layers = self.epochs.first().map_or(0, |e| e.cos_sim.len());
        write!(out, "epoch,loss,bp_grad_norm,pc_grad_norm,accuracy,delta_L_inference")?;
        for l in 1..=layers {
            write!(out, ",cos_sim_layer_{l}")?;
        }
        writeln!(out)?;
        for e in &self.epochs {
            write!(
                out,
                "{},{:e},{:e},{:e},{},{:e}",
                e.epoch, e.loss, e.bp_grad_norm, e.pc_grad_norm, e.accuracy, e.delta_l_inference
            )?;
            for c in &e.cos_sim {
                write!(out, ",{c}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Result of a training run. `error` is set when training aborted; the record
/// then holds the completed epochs.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub record: TrainRecord,
    pub error: Option<PcnError>,
}

/// Mean feedforward loss and mean BP gradient over a dataset.
pub fn dataset_loss_and_gradient(net: &Network, data: &Dataset) -> Result<(f64, Vec<Matrix>)> {
    let out = forward_pass(net, &data.inputs)?;
    let n = data.len() as f64;
    let loss = mse_loss(&out[net.depth()], &data.targets)? / n;
    let (_, mut grads) = backprop(net, &data.inputs, &data.targets)?;
    for g in &mut grads {
        *g /= n;
    }
    Ok((loss, grads))
}

pub fn accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    let out = forward_pass(net, &data.inputs)?;
    let pred = argmax_columns(&out[net.depth()]);
    let truth = argmax_columns(&data.targets);
    let hits = pred.iter().zip(&truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / data.len() as f64)
}

/// EM training with predictive coding gradients.
pub fn train(net: &Network, data: &Dataset, test: Option<&Dataset>, settings: &TrainSettings) -> Result<TrainOutcome> {
    train_with_rule(net, data, test, settings, GradientRule::PredictiveCoding)
}

pub(crate) fn train_with_rule(
    net: &Network,
    data: &Dataset,
    test: Option<&Dataset>,
    settings: &TrainSettings,
    rule: GradientRule,
) -> Result<TrainOutcome> {
    settings.validate()?;
    if data.is_empty() {
        return Err(PcnError::InvalidSettings("training set is empty".into()));
    }
    if data.input_dim() != net.width(0) || data.target_dim() != net.width(net.depth()) {
        return Err(PcnError::Shape(format!(
            "dataset is {}->{}, network is {}->{}",
            data.input_dim(),
            data.target_dim(),
            net.width(0),
            net.width(net.depth())
        )));
    }
    let mut network = net.clone();
    let mut optimizer = Optimizer::new(&network, settings);
    let mut record = TrainRecord::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = settings.shuffle_seed.map(ChaCha8Rng::seed_from_u64);
    let depth = network.depth();
    for epoch in 1..=settings.epochs {
        if let Some(rng) = rng.as_mut() {
            order.shuffle(rng);
        }
        let mut cos_sum = vec![0.0; depth];
        let mut batches = 0usize;
        let mut delta_max = f64::NEG_INFINITY;
        let mut last_norm = 0.0;
        for chunk in order.chunks(settings.batch_size) {
            let (x, t) = data.gather(chunk);
            let (_, mut bp) = match backprop(&network, &x, &t) {
                Ok(v) => v,
                Err(e) => return Ok(TrainOutcome { network, record, error: Some(e) }),
            };
            for g in &mut bp {
                *g /= chunk.len() as f64;
            }
            let applied = match rule {
                GradientRule::Backprop => {
                    optimizer.step(&mut network, &bp);
                    delta_max = delta_max.max(0.0);
                    bp.clone()
                }
                GradientRule::PredictiveCoding => {
                    let m = match em_train_step(&mut network, &x, &t, settings, &mut optimizer) {
                        Ok(m) => m,
                        Err(e) => return Ok(TrainOutcome { network, record, error: Some(e) }),
                    };
                    let d = m.max_delta_loss();
                    record.step_delta_l.push(d);
                    record.bound_checks += m.bound.checks;
                    record.bound_violations += m.bound.violations;
                    delta_max = delta_max.max(d);
                    m.gradient
                }
            };
            for l in 0..depth {
                cos_sum[l] += cosine_similarity(&applied[l], &bp[l]).value;
            }
            last_norm = gradient_norm(&applied);
            batches += 1;
        }
        let (loss, full) = dataset_loss_and_gradient(&network, data)?;
        if !loss.is_finite() {
            return Ok(TrainOutcome {
                network,
                record,
                error: Some(PcnError::NonFinite(format!("training loss at epoch {epoch}"))),
            });
        }
        let acc = accuracy(&network, test.unwrap_or(data))?;
        record.epochs.push(EpochRecord {
            epoch,
            loss,
            bp_grad_norm: gradient_norm(&full),
            pc_grad_norm: last_norm,
            accuracy: acc,
            delta_l_inference: delta_max,
            cos_sim: cos_sum.iter().map(|c| c / batches as f64).collect(),
        });
        log::debug!("epoch {epoch}: loss {loss:e} acc {acc}");
    }
    Ok(TrainOutcome {
        network,
        record,
        error: None,
    })
}

/// Per-sample L right after feedforward initialization with the target clamped.
pub fn initial_output_loss(net: &Network, data: &Matrix, target: &Matrix) -> Result<Vec<f64>> {
    let mode = ClampMode::supervised(data.clone(), target.clone());
    Ok(per_sample_output_loss(&init_activities(net, &mode, InitMode::FeedforwardPass)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::run_inference;
    use crate::linalg::{col, sup_dist, sup_norm};
    use crate::metrics::energy_report;
    use crate::network::{build_network, ActivationKind, NetworkSpec};

    fn tanh_net(widths: &[usize], seed: u64) -> Network {
        build_network(&NetworkSpec::uniform(widths, ActivationKind::Tanh, 0.6, seed)).unwrap()
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&col(&[1.0, 2.0]), &col(&[1.0, 2.0])).unwrap(), 0.0);
        assert_eq!(mse_loss(&col(&[0.0]), &col(&[2.0])).unwrap(), 4.0);
        assert!(mse_loss(&col(&[0.0]), &col(&[2.0, 1.0])).is_err());
        let a = [0.3, -1.2, 2.5];
        let b = [1.0, 0.5, -0.5];
        let mut manual = 0.0;
        for i in 0..3 {
            manual += (b[i] - a[i]) * (b[i] - a[i]);
        }
        assert!((mse_loss(&col(&a), &col(&b)).unwrap() - manual).abs() < 1e-15);
    }

    #[test]
    fn zero_errors_give_zero_gradient() {
        let net = tanh_net(&[3, 4, 2], 0);
        let s = init_activities(&net, &ClampMode::input_only(col(&[0.1, 0.2, 0.3])), InitMode::FeedforwardPass).unwrap();
        assert!(weight_gradient(&net, &s).iter().all(|g| sup_norm(g) == 0.0));
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let net = tanh_net(&[3, 4, 2], seed);
            let mode = ClampMode::supervised(col(&[0.4, -0.1, 0.8]), col(&[0.3, -0.6]));
            let s = init_activities(&net, &mode, InitMode::Random { std: 1.0, seed }).unwrap();
            let grads = weight_gradient(&net, &s);
            let h = 1e-6;
            for l in 1..=net.depth() {
                let w = net.weight(l).clone();
                let fd = Matrix::from_fn(w.nrows(), w.ncols(), |i, j| {
                    let energy = |delta: f64| {
                        let mut n = net.clone();
                        let mut wm = w.clone();
                        wm[(i, j)] += delta;
                        n.set_weight(l, wm).unwrap();
                        let st = ActivityState::new(&n, s.activities().to_vec()).unwrap();
                        energy_report(&n, &st).total
                    };
                    (energy(h) - energy(-h)) / (2.0 * h)
                });
                assert!(sup_dist(&grads[l - 1], &fd) / sup_norm(&fd) < 1e-5);
            }
        }
    }

    #[test]
    fn feedforward_gradient_is_backprop() {
        let net = tanh_net(&[3, 5, 4, 2], 3);
        let (x, t) = (col(&[0.4, -0.1, 0.8]), col(&[0.3, -0.6]));
        let s = init_activities(&net, &ClampMode::supervised(x.clone(), t.clone()), InitMode::FeedforwardPass).unwrap();
        let pc = weight_gradient(&net, &s);
        let (_, bp) = backprop(&net, &x, &t).unwrap();
        // only the output layer carries error at the feedforward pass
        assert_eq!(pc[2], bp[2]);
        assert!(sup_norm(&pc[0]) == 0.0 && sup_norm(&pc[1]) == 0.0);
    }

    #[test]
    fn lambda_limit_equals_backprop() {
        for seed in 0..5 {
            let net = tanh_net(&[3, 5, 4, 4, 2], seed);
            let x = Matrix::from_row_slice(3, 2, &[0.4, 1.0, -0.1, 0.2, 0.8, -0.7]);
            let t = Matrix::from_row_slice(2, 2, &[0.3, 0.1, -0.6, 0.5]);
            let limit = lambda_limit_gradient(&net, &x, &t).unwrap();
            let (_, bp) = backprop(&net, &x, &t).unwrap();
            for l in 0..4 {
                assert!(sup_dist(&limit[l], &bp[l]) < 1e-12 * sup_norm(&bp[l]).max(1.0));
            }
        }
    }

    #[test]
    fn small_lambda_inference_approaches_backprop() {
        let net = tanh_net(&[3, 4, 4, 2], 8);
        let (x, t) = (col(&[0.4, -0.1, 0.8]), col(&[0.3, -0.6]));
        let (_, bp) = backprop(&net, &x, &t).unwrap();
        let mut errs = Vec::new();
        for lambda in [1e-2, 1e-3] {
            let settings = InferenceSettings {
                step_size: 0.2,
                max_steps: 20_000,
                convergence_tol: 1e-14,
                objective: Objective::Lambda(lambda),
                record_trace: false,
                ..Default::default()
            };
            let mode = ClampMode::supervised(x.clone(), t.clone());
            let out = run_inference(&net, &mode, &settings, &[], &ProbeContext::default()).unwrap();
            let g = objective_weight_gradient(&net, &out.state, Objective::Lambda(lambda));
            let err: f64 = (0..3).map(|l| sup_dist(&(&g[l] / lambda), &bp[l])).fold(0.0, f64::max);
            errs.push(err);
        }
        // first order in lambda
        assert!(errs[1] < errs[0] / 5.0, "{errs:?}");
        assert!(errs[1] < 1e-2);
    }

    #[test]
    fn bound_holds_at_feedforward_and_is_tight_at_equilibrium() {
        let net = tanh_net(&[3, 4, 4, 2], 9);
        let mode = ClampMode::supervised(col(&[0.4, -0.1, 0.8]), col(&[0.9, -0.9]));
        let ff = init_activities(&net, &mode, InitMode::FeedforwardPass).unwrap();
        let b = energy_gradient_bound_check(&net, &ff, &mode);
        assert_eq!(b.lhs, 0.0);
        assert!(b.satisfied && b.rhs > 0.0);
        let settings = InferenceSettings {
            step_size: 0.1,
            max_steps: 50_000,
            convergence_tol: 1e-12,
            ..Default::default()
        };
        let out = run_inference(&net, &mode, &settings, &[], &ProbeContext::default()).unwrap();
        let b = energy_gradient_bound_check(&net, &out.state, &mode);
        assert!((b.lhs - b.rhs).abs() < 1e-6);
    }

    #[test]
    fn bound_flag_agrees_with_loss_derivative_sign() {
        // dL/dt along the flow is dL/dx . v with v = -(dL + dE)/2, so the bound is
        // exactly the condition dL/dt <= 0.
        let mut agree = 0;
        let mut violated = 0;
        for seed in 0..40 {
            let net = tanh_net(&[3, 4, 4, 2], 100 + seed);
            let mode = ClampMode::supervised(col(&[0.4, -0.1, 0.8]), col(&[0.9, -0.9]));
            let s = init_activities(&net, &mode, InitMode::Random { std: 2.0, seed }).unwrap();
            let b = energy_gradient_bound_check(&net, &s, &mode);
            let h = 1e-7;
            let v = crate::inference::activity_velocity(&net, &s, &mode, false, Objective::Standard);
            let moved = |dt: f64| {
                let acts: Vec<Matrix> = s.activities().iter().zip(&v).map(|(a, d)| a + d * dt).collect();
                energy_report(&net, &ActivityState::new(&net, acts).unwrap()).output_loss
            };
            let dl_dt = (moved(h) - moved(-h)) / (2.0 * h);
            if (b.lhs - b.rhs).abs() > 1e-6 {
                if b.satisfied == (dl_dt <= 0.0) {
                    agree += 1;
                }
                if !b.satisfied {
                    violated += 1;
                }
            } else {
                agree += 1;
            }
        }
        assert_eq!(agree, 40);
        assert!(violated > 0, "random inits should break the bound sometimes");
    }

    #[test]
    fn zero_lr_changes_nothing_but_records() {
        let net = tanh_net(&[3, 4, 2], 10);
        let mut n = net.clone();
        let settings = TrainSettings {
            weight_lr: 0.0,
            ..Default::default()
        };
        let mut opt = Optimizer::new(&n, &settings);
        let m = em_train_step(&mut n, &col(&[0.1, 0.2, 0.3]), &col(&[0.5, -0.5]), &settings, &mut opt).unwrap();
        assert_eq!(n, net);
        assert_eq!(m.loss_before.len(), 1);
        assert!(m.loss_after[0] <= m.loss_before[0]);
    }

    #[test]
    fn scalar_chain_em_step_matches_closed_form() {
        // x0 = d, x2 = T clamped; linear: x1* = (a d + b T) / (1 + b^2)
        let (a, b, d, t, lr) = (0.8, 0.5, 1.0, 2.0, 0.1);
        let net = Network::from_weights(
            vec![Matrix::from_element(1, 1, a), Matrix::from_element(1, 1, b)],
            vec![ActivationKind::Linear; 2],
        )
        .unwrap();
        let mut n = net.clone();
        let settings = TrainSettings {
            weight_lr: lr,
            batch_size: 1,
            inference: InferenceSettings {
                step_size: 0.2,
                max_steps: 10_000,
                convergence_tol: 1e-14,
                record_trace: false,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut opt = Optimizer::new(&n, &settings);
        em_train_step(&mut n, &col(&[d]), &col(&[t]), &settings, &mut opt).unwrap();
        let x1 = (a * d + b * t) / (1.0 + b * b);
        let e1 = x1 - a * d;
        let e2 = t - b * x1;
        let new_a = a + lr * 2.0 * e1 * d;
        let new_b = b + lr * 2.0 * e2 * x1;
        assert!((n.weight(1)[(0, 0)] - new_a).abs() < 1e-12);
        assert!((n.weight(2)[(0, 0)] - new_b).abs() < 1e-12);
    }

    #[test]
    fn optimizer_forms() {
        let net = Network::from_weights(vec![Matrix::from_element(1, 1, 1.0)], vec![ActivationKind::Linear]).unwrap();
        let g = vec![Matrix::from_element(1, 1, 1.0)];
        let mut plain = net.clone();
        let settings = TrainSettings {
            weight_lr: 0.1,
            momentum: 0.5,
            ..Default::default()
        };
        let mut opt = Optimizer::new(&plain, &settings);
        opt.step(&mut plain, &g);
        opt.step(&mut plain, &g);
        // v1 = 1, v2 = 1.5
        assert!((plain.weight(1)[(0, 0)] - (1.0 - 0.1 - 0.15)).abs() < 1e-15);
        let mut nest = net.clone();
        let mut opt = Optimizer::new(
            &nest,
            &TrainSettings {
                nesterov: true,
                ..settings
            },
        );
        opt.step(&mut nest, &g);
        opt.step(&mut nest, &g);
        // steps g + mu v: 1 + 0.5, then 1 + 0.75
        assert!((nest.weight(1)[(0, 0)] - (1.0 - 0.15 - 0.175)).abs() < 1e-15);
    }

    #[test]
    fn zero_epochs_leave_network_unchanged() {
        let net = tanh_net(&[3, 4, 2], 11);
        let data = crate::data::synthetic_gaussian(8, 3, 2, 0).unwrap();
        let settings = TrainSettings {
            epochs: 0,
            ..Default::default()
        };
        let out = train(&net, &data, None, &settings).unwrap();
        assert_eq!(out.network, net);
        assert!(out.record.epochs.is_empty());
    }

    #[test]
    fn m_step_does_not_raise_energy() {
        let net = tanh_net(&[3, 4, 2], 12);
        let mode = ClampMode::supervised(col(&[0.4, -0.1, 0.8]), col(&[0.3, -0.6]));
        let settings = InferenceSettings {
            max_steps: 500,
            ..Default::default()
        };
        let out = run_inference(&net, &mode, &settings, &[], &ProbeContext::default()).unwrap();
        let before = energy_report(&net, &out.state).total;
        let g = weight_gradient(&net, &out.state);
        let mut n = net.clone();
        for l in 1..=n.depth() {
            let w = n.weight(l) - &g[l - 1] * 1e-3;
            n.set_weight(l, w).unwrap();
        }
        let after = energy_report(&n, &ActivityState::new(&n, out.state.activities().to_vec()).unwrap()).total;
        assert!(after <= before);
    }

    #[test]
    fn train_record_csv_header() {
        let net = tanh_net(&[3, 4, 2], 13);
        let data = crate::data::synthetic_gaussian(8, 3, 2, 1).unwrap();
        let settings = TrainSettings {
            epochs: 2,
            batch_size: 4,
            ..Default::default()
        };
        let out = train(&net, &data, None, &settings).unwrap();
        assert!(out.error.is_none());
        let mut csv = Vec::new();
        out.record.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with(
            "epoch,loss,bp_grad_norm,pc_grad_norm,accuracy,delta_L_inference,cos_sim_layer_1,cos_sim_layer_2\n"
        ));
        assert_eq!(text.lines().count(), 3);
    }
}
