//! Exact backpropagation and pseudoinverse target propagation on the same networks.

use crate::data::Dataset;
use crate::error::{PcnError, Result};
use crate::learning::{train_with_rule, GradientRule, TrainOutcome, TrainSettings};
use crate::linalg::{pseudoinverse, Matrix, PINV_TOL};
use crate::network::{forward_pass, Network};

/// `dL/dx_l` at the feedforward pass, for every layer `0..=L`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjoints {
    pub deltas: Vec<Matrix>,
}

/// Adjoint recursion for `L = ||T - x_L||^2` summed over the batch columns.
/// Returns the adjoints and `dL/dW_l` for `l = 1..=L` (index 0 is `W_1`).
pub fn backprop(net: &Network, input: &Matrix, target: &Matrix) -> Result<(Adjoints, Vec<Matrix>)> {
    let acts = forward_pass(net, input)?;
    let depth = net.depth();
    if target.shape() != acts[depth].shape() {
        return Err(PcnError::Shape(format!(
            "target is {:?}, network output is {:?}",
            target.shape(),
            acts[depth].shape()
        )));
    }
    let mut deltas = vec![Matrix::zeros(0, 0); depth + 1];
    let mut grads = vec![Matrix::zeros(0, 0); depth];
    deltas[depth] = (&acts[depth] - target) * 2.0;
    for l in (1..=depth).rev() {
        let preact = net.weight(l) * &acts[l - 1];
        let gated = deltas[l].component_mul(&net.activation(l).derivative(&preact));
        grads[l - 1] = &gated * acts[l - 1].transpose();
        deltas[l - 1] = net.weight(l).tr_mul(&gated);
    }
    Ok((Adjoints { deltas }, grads))
}

/// Local targets `t_0..t_L`.
#[derive(Debug, Clone, PartialEq)]
pub struct TpTargets {
    pub targets: Vec<Matrix>,
}

/// `t_L = T`, `t_l = W_{l+1}^+ f^{-1}(t_{l+1})`.
pub fn targetprop_targets(net: &Network, target: &Matrix) -> Result<TpTargets> {
    let depth = net.depth();
    if target.nrows() != net.width(depth) {
        return Err(PcnError::Shape(format!(
            "target has {} rows, output layer has width {}",
            target.nrows(),
            net.width(depth)
        )));
    }
    let mut targets = vec![Matrix::zeros(0, 0); depth + 1];
    targets[depth] = target.clone();
    for l in (0..depth).rev() {
        let inv = net.activation(l + 1).apply_inverse(&targets[l + 1])?;
        targets[l] = pseudoinverse(net.weight(l + 1), PINV_TOL)? * inv;
    }
    Ok(TpTargets { targets })
}

/// As [`targetprop_targets`], but stops at the first layer whose activation
/// cannot be inverted and leaves every target below it as an empty block.
pub fn partial_targetprop_targets(net: &Network, target: &Matrix) -> Result<TpTargets> {
    let depth = net.depth();
    if target.nrows() != net.width(depth) {
        return Err(PcnError::Shape(format!(
            "target has {} rows, output layer has width {}",
            target.nrows(),
            net.width(depth)
        )));
    }
    let mut targets = vec![Matrix::zeros(0, 0); depth + 1];
    targets[depth] = target.clone();
    for l in (0..depth).rev() {
        let Ok(inv) = net.activation(l + 1).apply_inverse(&targets[l + 1]) else {
            break;
        };
        targets[l] = pseudoinverse(net.weight(l + 1), PINV_TOL)? * inv;
    }
    Ok(TpTargets { targets })
}

/// Same trainer loop as [`crate::learning::train`] with backprop gradients.
pub fn bp_train(
    net: &Network,
    train: &Dataset,
    test: Option<&Dataset>,
    settings: &TrainSettings,
) -> Result<TrainOutcome> {
    train_with_rule(net, train, test, settings, GradientRule::Backprop)
}
