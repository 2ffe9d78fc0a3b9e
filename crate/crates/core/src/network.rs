//! Multilayer PCN structure shared by predictive coding, backprop and target-prop.
//!
//! Layer `l` (1-based, `1..=L`) predicts its activity from the layer below as
//! `f_l(W_l x_{l-1})`. There are no biases.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{PcnError, Result};
use crate::linalg::{min_eigenvalue_symmetric, Matrix};

/// Inputs to `atanh` are clipped to this band.
pub const TANH_CLIP: f64 = 1.0 - 1e-12;

const MAGIC: &[u8; 4] = b"PCN1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActivationKind {
    Linear,
    Tanh,
    Relu,
}

impl ActivationKind {
    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Linear => "linear",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Relu => "relu",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            ActivationKind::Linear => 0,
            ActivationKind::Tanh => 1,
            ActivationKind::Relu => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(ActivationKind::Linear),
            1 => Ok(ActivationKind::Tanh),
            2 => Ok(ActivationKind::Relu),
            other => Err(PcnError::Format(format!("unknown activation code {other}"))),
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "linear" | "identity" => Ok(ActivationKind::Linear),
            "tanh" => Ok(ActivationKind::Tanh),
            "relu" => Ok(ActivationKind::Relu),
            other => Err(PcnError::InvalidSpec(format!("unknown activation '{other}'"))),
        }
    }

    pub fn is_invertible(self) -> bool {
        !matches!(self, ActivationKind::Relu)
    }

    #[inline]
    pub fn eval(self, v: f64) -> f64 {
        match self {
            ActivationKind::Linear => v,
            ActivationKind::Tanh => v.tanh(),
            ActivationKind::Relu => v.max(0.0),
        }
    }

    /// f'(v); the ReLU derivative at exactly zero is zero.
    #[inline]
    pub fn deriv(self, v: f64) -> f64 {
        match self {
            ActivationKind::Linear => 1.0,
            ActivationKind::Tanh => {
                let t = v.tanh();
                1.0 - t * t
            }
            ActivationKind::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn inverse(self, v: f64) -> Result<f64> {
        match self {
            ActivationKind::Linear => Ok(v),
            ActivationKind::Relu => Err(PcnError::NonInvertibleActivation("relu")),
            ActivationKind::Tanh => {
                if !v.is_finite() || v.abs() >= 1.0 {
                    return Err(PcnError::Domain {
                        activation: "tanh",
                        value: v,
                    });
                }
                Ok(v.clamp(-TANH_CLIP, TANH_CLIP).atanh())
            }
        }
    }

    pub fn apply(self, m: &Matrix) -> Matrix {
        match self {
            ActivationKind::Linear => m.clone(),
            _ => m.map(|v| self.eval(v)),
        }
    }

    pub fn derivative(self, preact: &Matrix) -> Matrix {
        preact.map(|v| self.deriv(v))
    }

    pub fn apply_inverse(self, m: &Matrix) -> Result<Matrix> {
        if !self.is_invertible() {
            return Err(PcnError::NonInvertibleActivation(self.name()));
        }
        let mut out = m.clone();
        for v in out.iter_mut() {
            *v = self.inverse(*v)?;
        }
        Ok(out)
    }
}

/// Elementwise f(v).
pub fn activation_apply(kind: ActivationKind, v: &Matrix) -> Matrix {
    kind.apply(v)
}

/// Elementwise f'(preact).
pub fn activation_derivative(kind: ActivationKind, preact: &Matrix) -> Matrix {
    kind.derivative(preact)
}

/// Elementwise f^-1(v). Tanh inputs within 1e-12 of +-1 are clipped first.
pub fn activation_inverse(kind: ActivationKind, v: &Matrix) -> Result<Matrix> {
    kind.apply_inverse(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    /// Widths `w_0..w_L`.
    pub layer_widths: Vec<usize>,
    /// One activation per weight layer (`f_1..f_L`).
    pub activations: Vec<ActivationKind>,
    pub weight_init_std: f64,
    pub seed: u64,
}

impl NetworkSpec {
    /// Same activation on every hidden layer, identity on the output.
    pub fn with_hidden(widths: &[usize], hidden: ActivationKind, std: f64, seed: u64) -> Self {
        let layers = widths.len().saturating_sub(1);
        let activations = (1..=layers)
            .map(|l| if l == layers { ActivationKind::Linear } else { hidden })
            .collect();
        NetworkSpec {
            layer_widths: widths.to_vec(),
            activations,
            weight_init_std: std,
            seed,
        }
    }

    /// Same activation on every layer, output included.
    pub fn uniform(widths: &[usize], activation: ActivationKind, std: f64, seed: u64) -> Self {
        NetworkSpec {
            layer_widths: widths.to_vec(),
            activations: vec![activation; widths.len().saturating_sub(1)],
            weight_init_std: std,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(PcnError::InvalidSpec("at least two layers are required".into()));
        }
        if self.layer_widths.contains(&0) {
            return Err(PcnError::InvalidSpec("layer widths must be positive".into()));
        }
        if self.activations.len() != self.layer_widths.len() - 1 {
            return Err(PcnError::InvalidSpec(format!(
                "{} activations for {} weight layers",
                self.activations.len(),
                self.layer_widths.len() - 1
            )));
        }
        if !(self.weight_init_std >= 0.0 && self.weight_init_std.is_finite()) {
            return Err(PcnError::InvalidSpec("weight_init_std must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    weights: Vec<Matrix>,
    precisions: Vec<Matrix>,
    activations: Vec<ActivationKind>,
    identity_precisions: bool,
}

/// Samples weights i.i.d. from N(0, std^2) with a seeded ChaCha generator;
/// precisions start at the identity.
pub fn build_network(spec: &NetworkSpec) -> Result<Network> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, spec.weight_init_std)
        .map_err(|e| PcnError::InvalidSpec(e.to_string()))?;
    let weights = spec
        .layer_widths
        .windows(2)
        .map(|w| {
            let (below, above) = (w[0], w[1]);
            // Fill row-major so the draw order is independent of storage layout.
            let entries: Vec<f64> = (0..above * below).map(|_| normal.sample(&mut rng)).collect();
            Matrix::from_row_slice(above, below, &entries)
        })
        .collect();
    Network::from_weights(weights, spec.activations.clone())
}

impl Network {
    pub fn from_weights(weights: Vec<Matrix>, activations: Vec<ActivationKind>) -> Result<Self> {
        let precisions = weights
            .iter()
            .map(|w| Matrix::identity(w.nrows(), w.nrows()))
            .collect();
        Network::with_precisions(weights, precisions, activations)
    }

    pub fn with_precisions(
        weights: Vec<Matrix>,
        precisions: Vec<Matrix>,
        activations: Vec<ActivationKind>,
    ) -> Result<Self> {
        if weights.is_empty() {
            return Err(PcnError::InvalidSpec("network needs at least one weight layer".into()));
        }
        if activations.len() != weights.len() || precisions.len() != weights.len() {
            return Err(PcnError::InvalidSpec(
                "weights, precisions and activations must have equal counts".into(),
            ));
        }
        for (i, pair) in weights.windows(2).enumerate() {
            if pair[1].ncols() != pair[0].nrows() {
                return Err(PcnError::Shape(format!(
                    "W_{} is {}x{} but W_{} has {} rows",
                    i + 2,
                    pair[1].nrows(),
                    pair[1].ncols(),
                    i + 1,
                    pair[0].nrows()
                )));
            }
        }
        let mut net = Network {
            weights,
            precisions: Vec::new(),
            activations,
            identity_precisions: true,
        };
        net.set_precisions(precisions)?;
        Ok(net)
    }

    /// Number of weight layers `L`.
    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    /// Widths `w_0..w_L`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.weights[0].ncols()];
        w.extend(self.weights.iter().map(|m| m.nrows()));
        w
    }

    pub fn width(&self, layer: usize) -> usize {
        if layer == 0 {
            self.weights[0].ncols()
        } else {
            self.weights[layer - 1].nrows()
        }
    }

    /// `W_l` for `l` in `1..=L`.
    pub fn weight(&self, layer: usize) -> &Matrix {
        &self.weights[layer - 1]
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    /// Replaces `W_l`, keeping its shape.
    pub fn set_weight(&mut self, layer: usize, w: Matrix) -> Result<()> {
        let old = &self.weights[layer - 1];
        if old.shape() != w.shape() {
            return Err(PcnError::Shape(format!(
                "W_{layer} must stay {:?}, got {:?}",
                old.shape(),
                w.shape()
            )));
        }
        self.weights[layer - 1] = w;
        Ok(())
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [Matrix] {
        &mut self.weights
    }

    /// `Pi_l` for `l` in `1..=L`.
    pub fn precision(&self, layer: usize) -> &Matrix {
        &self.precisions[layer - 1]
    }

    pub fn precisions(&self) -> &[Matrix] {
        &self.precisions
    }

    pub fn set_precisions(&mut self, precisions: Vec<Matrix>) -> Result<()> {
        if precisions.len() != self.weights.len() {
            return Err(PcnError::InvalidSpec("one precision matrix per weight layer".into()));
        }
        for (l, (p, w)) in precisions.iter().zip(&self.weights).enumerate() {
            if p.nrows() != w.nrows() || p.ncols() != w.nrows() {
                return Err(PcnError::Shape(format!(
                    "Pi_{} must be {}x{}",
                    l + 1,
                    w.nrows(),
                    w.nrows()
                )));
            }
            if min_eigenvalue_symmetric(p)? <= 0.0 {
                return Err(PcnError::NotPositiveDefinite);
            }
        }
        self.identity_precisions = precisions
            .iter()
            .all(|p| *p == Matrix::identity(p.nrows(), p.ncols()));
        self.precisions = precisions;
        Ok(())
    }

    pub fn has_identity_precisions(&self) -> bool {
        self.identity_precisions
    }

    /// `f_l` for `l` in `1..=L`.
    pub fn activation(&self, layer: usize) -> ActivationKind {
        self.activations[layer - 1]
    }

    pub fn activations(&self) -> &[ActivationKind] {
        &self.activations
    }

    pub fn is_linear(&self) -> bool {
        self.activations.iter().all(|a| *a == ActivationKind::Linear)
    }

    /// Writes the `PCN1` binary container.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(MAGIC)?;
        let widths = self.widths();
        out.write_all(&(widths.len() as u32).to_le_bytes())?;
        for w in &widths {
            out.write_all(&(*w as u32).to_le_bytes())?;
        }
        for a in &self.activations {
            out.write_all(&[a.code()])?;
        }
        for m in self.weights.iter().chain(&self.precisions) {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    out.write_all(&m[(i, j)].to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(PcnError::Format(format!("bad network magic {magic:?}")));
        }
        let count = read_u32(&mut input)? as usize;
        if count < 2 {
            return Err(PcnError::Format(format!("layer count {count} < 2")));
        }
        let widths = (0..count)
            .map(|_| read_u32(&mut input).map(|w| w as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut codes = vec![0u8; count - 1];
        input.read_exact(&mut codes).map_err(truncated)?;
        let activations = codes
            .into_iter()
            .map(ActivationKind::from_code)
            .collect::<Result<Vec<_>>>()?;
        let mut read_matrix = |rows: usize, cols: usize| -> Result<Matrix> {
            let mut entries = Vec::with_capacity(rows * cols);
            let mut buf = [0u8; 8];
            for _ in 0..rows * cols {
                input.read_exact(&mut buf).map_err(truncated)?;
                entries.push(f64::from_le_bytes(buf));
            }
            crate::linalg::matrix_from_row_major(rows, cols, &entries)
        };
        let weights = widths
            .windows(2)
            .map(|w| read_matrix(w[1], w[0]))
            .collect::<Result<Vec<_>>>()?;
        let precisions = widths[1..]
            .iter()
            .map(|&w| read_matrix(w, w))
            .collect::<Result<Vec<_>>>()?;
        Network::with_precisions(weights, precisions, activations)
    }
}

fn truncated(e: std::io::Error) -> PcnError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        PcnError::Format("truncated network file".into())
    } else {
        e.into()
    }
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf).map_err(truncated)?;
    Ok(u32::from_le_bytes(buf))
}

/// Feedforward pass values `x_0..x_L` with `x_0 = input` and `x_l = f_l(W_l x_{l-1})`.
/// Each column of `input` is an independent sample.
pub fn forward_pass(net: &Network, input: &Matrix) -> Result<Vec<Matrix>> {
    if input.nrows() != net.width(0) {
        return Err(PcnError::Shape(format!(
            "input has {} rows, network expects {}",
            input.nrows(),
            net.width(0)
        )));
    }
    let mut values = Vec::with_capacity(net.depth() + 1);
    values.push(input.clone());
    for l in 1..=net.depth() {
        let pre = net.weight(l) * &values[l - 1];
        values.push(net.activation(l).apply(&pre));
    }
    Ok(values)
}
