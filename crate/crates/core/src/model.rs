//! Bias-free fully-connected ReLU networks with a linear output layer.
//!
//! Layer `i` maps `width[i-1] -> width[i]` through `W_i`; every hidden layer
//! applies ReLU and the last layer produces raw logits.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::losses::softmax;
use crate::numerics::{gemm, MatRef, Matrix, SeededRng};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ARL1";

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    weights: Vec<Matrix>,
}

impl Network {
    /// Wraps weight matrices `W_1..W_L`, checking that adjacent layers chain.
    pub fn from_weights(weights: Vec<Matrix>) -> Result<Self> {
        if weights.is_empty() {
            return invalid("a network needs at least one layer");
        }
        for (i, pair) in weights.windows(2).enumerate() {
            if pair[1].cols() != pair[0].rows() {
                return invalid(format!(
                    "layer {} has {} columns but layer {} has {} rows",
                    i + 2,
                    pair[1].cols(),
                    i + 1,
                    pair[0].rows()
                ));
            }
        }
        if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
            return invalid(format!("layer {} has non-finite weights", i + 1));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [Matrix] {
        &mut self.weights
    }

    /// Replaces one layer; `index` is zero-based.
    pub fn set_layer(&mut self, index: usize, w: Matrix) -> Result<()> {
        let old = self
            .weights
            .get(index)
            .ok_or_else(|| Error::InvalidInput(format!("no layer {index}")))?;
        if old.shape() != w.shape() {
            return invalid(format!(
                "layer {index} shape {:?} cannot be replaced by {:?}",
                old.shape(),
                w.shape()
            ));
        }
        if !w.is_finite() {
            return invalid("replacement layer has non-finite weights");
        }
        self.weights[index] = w;
        Ok(())
    }

    /// Number of weight layers `L`.
    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights[self.weights.len() - 1].rows()
    }

    /// `[input_dim, width_1, ..., output_dim]`.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.weights.iter().map(Matrix::rows))
            .collect()
    }

    pub fn hidden_layers(&self) -> usize {
        self.depth() - 1
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(forward(self, x)?.logits)
    }

    /// Logits for `n` row-major inputs, computed through blocked matrix
    /// products. Returns an `n x output_dim` row-major buffer.
    pub fn batch_logits(&self, inputs: &[f64], n: usize) -> Result<Vec<f64>> {
        let acts = batch_forward(self, inputs, n)?;
        Ok(acts.into_iter().last().expect("at least one layer").1)
    }

    /// Writes the `ARL1` binary checkpoint.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&(self.depth() as u32).to_le_bytes())?;
        for w in &self.weights {
            out.write_all(&(w.rows() as u32).to_le_bytes())?;
            out.write_all(&(w.cols() as u32).to_le_bytes())?;
            for v in w.as_slice() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut input, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                expected: "magic ARL1".into(),
                actual: format!("{:?}", String::from_utf8_lossy(&magic)),
            });
        }
        let layers = read_u32_le(&mut input)? as usize;
        if layers == 0 {
            return Err(Error::Format {
                expected: "at least one layer".into(),
                actual: "0".into(),
            });
        }
        let mut weights = Vec::with_capacity(layers);
        for _ in 0..layers {
            let rows = read_u32_le(&mut input)? as usize;
            let cols = read_u32_le(&mut input)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            let mut buf = [0u8; 8];
            for _ in 0..rows * cols {
                read_exact(&mut input, &mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            weights.push(Matrix::new(rows, cols, data)?);
        }
        let mut trailing = [0u8; 1];
        if input.read(&mut trailing)? != 0 {
            return Err(Error::Format {
                expected: "end of checkpoint".into(),
                actual: "trailing bytes".into(),
            });
        }
        Self::from_weights(weights)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_checkpoint(bytes.as_slice())
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format {
            expected: format!("{} more bytes", buf.len()),
            actual: "end of file".into(),
        },
        _ => Error::Io(e),
    })
}

pub(crate) fn read_u32_le<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Xavier-uniform initialization: `W_i ~ U(-a, a)` with
/// `a = sqrt(6 / (fan_in + fan_out))`.
pub fn init_network(widths: &[usize], rng: &mut SeededRng) -> Result<Network> {
    if widths.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least two widths, got {widths:?}"
        )));
    }
    if widths.contains(&0) {
        return Err(Error::InvalidConfig(format!(
            "widths must be positive: {widths:?}"
        )));
    }
    let weights = widths
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = rng.uniform(-a, a, fan_in * fan_out)?;
            Matrix::new(fan_out, fan_in, data)
        })
        .collect::<Result<Vec<_>>>()?;
    Network::from_weights(weights)
}

/// Per-layer values from a single forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    /// `W_i I_{i-1}` for the hidden layers `i = 1..L-1`.
    pub pre_activations: Vec<Vec<f64>>,
    /// `I_i = ReLU(W_i I_{i-1})` for the hidden layers.
    pub activations: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

impl ForwardTrace {
    /// Activation `I_l` with `I_0` the input.
    pub fn activation(&self, layer: usize) -> &[f64] {
        if layer == 0 {
            &self.input
        } else {
            &self.activations[layer - 1]
        }
    }
}

pub fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

pub fn forward(net: &Network, x: &[f64]) -> Result<ForwardTrace> {
    if x.len() != net.input_dim() {
        return invalid(format!(
            "input has length {} but the network expects {}",
            x.len(),
            net.input_dim()
        ));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return invalid("input has non-finite entries");
    }
    let hidden = net.hidden_layers();
    let mut pre_activations = Vec::with_capacity(hidden);
    let mut activations = Vec::with_capacity(hidden);
    let mut current = x.to_vec();
    for w in &net.weights[..hidden] {
        let z = w.matvec(&current)?;
        current = z.iter().map(|&v| relu(v)).collect();
        pre_activations.push(z);
        activations.push(current.clone());
    }
    let logits = net.weights[hidden].matvec(&current)?;
    Ok(ForwardTrace {
        input: x.to_vec(),
        pre_activations,
        activations,
        logits,
    })
}

/// Which hidden units are strictly positive, per hidden layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ActivationPattern {
    pub layers: Vec<Vec<bool>>,
}

impl ActivationPattern {
    pub fn active_count(&self) -> usize {
        self.layers.iter().flatten().filter(|b| **b).count()
    }
}

/// Zero pre-activations count as inactive.
pub fn activation_pattern(trace: &ForwardTrace) -> ActivationPattern {
    ActivationPattern {
        layers: trace
            .pre_activations
            .iter()
            .map(|z| z.iter().map(|&v| v > 0.0).collect())
            .collect(),
    }
}

/// `diag(tau_i) W_i` for each hidden layer, followed by `W_L` unchanged.
pub fn induced_matrices(net: &Network, pattern: &ActivationPattern) -> Result<Vec<Matrix>> {
    if pattern.layers.len() != net.hidden_layers() {
        return invalid(format!(
            "pattern covers {} layers, network has {} hidden layers",
            pattern.layers.len(),
            net.hidden_layers()
        ));
    }
    let mut out = Vec::with_capacity(net.depth());
    for (i, (w, tau)) in net.weights.iter().zip(&pattern.layers).enumerate() {
        if tau.len() != w.rows() {
            return invalid(format!(
                "pattern layer {} has {} entries, W_{} has {} rows",
                i + 1,
                tau.len(),
                i + 1,
                w.rows()
            ));
        }
        let mut masked = w.clone();
        for (r, &on) in tau.iter().enumerate() {
            if !on {
                masked.row_mut(r).fill(0.0);
            }
        }
        out.push(masked);
    }
    out.push(net.weights[net.depth() - 1].clone());
    Ok(out)
}

/// Cross-entropy gradients for one labelled input.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub param_grads: Vec<Matrix>,
    pub input_grad: Vec<f64>,
    pub loss: f64,
}

pub fn backward(net: &Network, x: &[f64], y: usize) -> Result<Gradients> {
    if x.len() != net.input_dim() {
        return invalid(format!(
            "input has length {} but the network expects {}",
            x.len(),
            net.input_dim()
        ));
    }
    let g = batch_backward(net, x, &[y], true, true)?;
    Ok(Gradients {
        param_grads: g.param_grads.expect("requested"),
        input_grad: g.input_grads.expect("requested"),
        loss: g.losses[0],
    })
}

/// Forward pass over a row-major batch. Entry `i` holds the pre-activation
/// and activation buffers of layer `i + 1`; for the last layer both are the
/// logits.
pub(crate) fn batch_forward(
    net: &Network,
    inputs: &[f64],
    n: usize,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let d = net.input_dim();
    if n == 0 || inputs.len() != n * d {
        return invalid(format!(
            "batch of {n} inputs of dim {d} needs {} values, got {}",
            n * d,
            inputs.len()
        ));
    }
    let depth = net.depth();
    let mut layers: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(depth);
    for (i, w) in net.weights.iter().enumerate() {
        let prev: &[f64] = if i == 0 { inputs } else { &layers[i - 1].1 };
        let (out_dim, in_dim) = w.shape();
        let mut z = vec![0.0; n * out_dim];
        gemm(
            n,
            in_dim,
            out_dim,
            MatRef::normal(prev, in_dim),
            MatRef::transposed(w.as_slice(), in_dim),
            &mut z,
            0.0,
        );
        let a = if i + 1 < depth {
            z.iter().map(|&v| relu(v)).collect()
        } else {
            z.clone()
        };
        layers.push((z, a));
    }
    Ok(layers)
}

/// Per-sample losses plus gradients of the *summed* cross-entropy.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub losses: Vec<f64>,
    /// Row-major `n x input_dim`; row `k` is the gradient of sample `k`'s loss.
    pub input_grads: Option<Vec<f64>>,
    pub param_grads: Option<Vec<Matrix>>,
    pub logits: Vec<f64>,
}

pub fn batch_backward(
    net: &Network,
    inputs: &[f64],
    labels: &[usize],
    want_input: bool,
    want_params: bool,
) -> Result<BatchGradients> {
    let n = labels.len();
    let classes = net.output_dim();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return invalid(format!("label {bad} out of range for {classes} classes"));
    }
    let layers = batch_forward(net, inputs, n)?;
    let depth = net.depth();
    let logits = layers[depth - 1].1.clone();

    let mut losses = Vec::with_capacity(n);
    let mut delta = vec![0.0; n * classes];
    for k in 0..n {
        let row = &logits[k * classes..(k + 1) * classes];
        let (p, log_p_y) = softmax_with_log(row, labels[k]);
        losses.push(-log_p_y);
        let drow = &mut delta[k * classes..(k + 1) * classes];
        drow.copy_from_slice(&p);
        drow[labels[k]] -= 1.0;
    }

    let mut param_grads: Vec<Option<Matrix>> = vec![None; depth];
    let mut input_grads = None;
    for i in (0..depth).rev() {
        let w = &net.weights[i];
        let (out_dim, in_dim) = w.shape();
        let prev: &[f64] = if i == 0 { inputs } else { &layers[i - 1].1 };
        if want_params {
            let mut gw = Matrix::zeros(out_dim, in_dim);
            gemm(
                out_dim,
                n,
                in_dim,
                MatRef::transposed(&delta, out_dim),
                MatRef::normal(prev, in_dim),
                gw.as_mut_slice(),
                0.0,
            );
            param_grads[i] = Some(gw);
        }
        if i == 0 && !want_input {
            break;
        }
        let mut d_prev = vec![0.0; n * in_dim];
        gemm(
            n,
            out_dim,
            in_dim,
            MatRef::normal(&delta, out_dim),
            MatRef::normal(w.as_slice(), in_dim),
            &mut d_prev,
            0.0,
        );
        if i == 0 {
            input_grads = Some(d_prev);
            break;
        }
        let z_prev = &layers[i - 1].0;
        for (g, &z) in d_prev.iter_mut().zip(z_prev) {
            if z <= 0.0 {
                *g = 0.0;
            }
        }
        delta = d_prev;
    }
    Ok(BatchGradients {
        losses,
        input_grads,
        param_grads: if want_params {
            Some(
                param_grads
                    .into_iter()
                    .map(|g| g.expect("filled"))
                    .collect(),
            )
        } else {
            None
        },
        logits,
    })
}

fn softmax_with_log(logits: &[f64], y: usize) -> (Vec<f64>, f64) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    let p = softmax(logits);
    (p, logits[y] - max - sum.ln())
}
