//! Feedforward classifier with a softmax head, cross-entropy loss and exact
//! backpropagation.
//!
//! Layers are dense, `out = in * W + b` with `W` stored `in_dim x out_dim`.
//! Every hidden layer is followed by the activation and, in training mode,
//! inverted dropout (kept units are divided by the keep probability, so eval
//! mode is a plain forward pass).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_nt, matmul_tn, Matrix, Rng};

pub const NETWORK_FORMAT: &str = "calibreg-network";
pub const NETWORK_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation value.
    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `in_dim x out_dim`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        DenseLayer {
            weight: Matrix::zeros(in_dim, out_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    fn num_params(&self) -> usize {
        self.weight.data().len() + self.bias.len()
    }
}

/// Layer sizes plus activation and dropout, enough to build a fresh network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub dropout_rate: f64,
}

fn default_activation() -> Activation {
    Activation::Relu
}

impl Default for Architecture {
    /// Two hidden layers of 128 ReLU units, no dropout.
    fn default() -> Self {
        Architecture {
            hidden: vec![128, 128],
            activation: Activation::Relu,
            dropout_rate: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<DenseLayer>,
    activation: Activation,
    dropout_rate: f64,
}

/// Cached intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `inputs[l]` is the input to layer `l` (after activation and dropout
    /// of the previous layer).
    inputs: Vec<Matrix>,
    /// Pre-activation of each hidden layer.
    pre_activations: Vec<Matrix>,
    /// Scaled dropout masks per hidden layer, present only in training mode
    /// with a positive dropout rate.
    masks: Vec<Option<Matrix>>,
}

impl ForwardTrace {
    pub fn dropout_masks(&self) -> &[Option<Matrix>] {
        &self.masks
    }
}

/// Gradients shaped exactly like the network's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<DenseLayer>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| DenseLayer::zeros(l.in_dim(), l.out_dim()))
                .collect(),
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.sum_squares() + l.bias.iter().map(|b| b * b).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight.scale_in_place(s);
            l.bias.iter_mut().for_each(|b| *b *= s);
        }
    }

    /// Same ordering as [`Network::flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }
}

impl Network {
    pub fn from_layers(layers: Vec<DenseLayer>, activation: Activation, dropout_rate: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network", "a network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::invalid(
                    "network",
                    format!("layer {i}: bias length {} != output dim {}", l.bias.len(), l.out_dim()),
                ));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::invalid(
                    "network",
                    format!(
                        "layer {} output dim {} does not chain into layer {} input dim {}",
                        i,
                        pair[0].out_dim(),
                        i + 1,
                        pair[1].in_dim()
                    ),
                ));
            }
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::invalid(
                "network",
                format!("dropout rate must lie in [0, 1), got {dropout_rate}"),
            ));
        }
        Ok(Network {
            layers,
            activation,
            dropout_rate,
        })
    }

    /// He-initialized network: weights `N(0, 2 / fan_in)`, zero biases.
    pub fn new(input_dim: usize, arch: &Architecture, num_classes: usize, rng: &mut Rng) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 || arch.hidden.contains(&0) {
            return Err(Error::invalid("network", "layer dimensions must be positive"));
        }
        let mut dims = vec![input_dim];
        dims.extend_from_slice(&arch.hidden);
        dims.push(num_classes);
        let layers = dims
            .windows(2)
            .map(|w| {
                let std = (2.0 / w[0] as f64).sqrt();
                let data = (0..w[0] * w[1]).map(|_| std * rng.normal()).collect();
                DenseLayer {
                    weight: Matrix::new(w[0], w[1], data).expect("shape is consistent"),
                    bias: vec![0.0; w[1]],
                }
            })
            .collect();
        Network::from_layers(layers, arch.activation, arch.dropout_rate)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn set_dropout_rate(&mut self, rate: f64) -> Result<()> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(
                "network",
                format!("dropout rate must lie in [0, 1), got {rate}"),
            ));
        }
        self.dropout_rate = rate;
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(DenseLayer::num_params).sum()
    }

    /// Sum of squared weights and biases.
    pub fn param_sq_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.sum_squares() + l.bias.iter().map(|b| b * b).sum::<f64>())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    /// All parameters, layer by layer: weights row-major, then biases.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::invalid(
                "network",
                format!("expected {} parameters, got {}", self.num_params(), params.len()),
            ));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let nw = l.weight.data().len();
            l.weight.data_mut().copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    /// Logits for a batch. `rng` is only drawn from in training mode with
    /// a positive dropout rate.
    pub fn forward(&self, batch: &Matrix, mode: Mode, rng: &mut Rng) -> Result<(Matrix, ForwardTrace)> {
        if batch.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                op: "network forward",
                left: batch.shape(),
                right: self.layers[0].weight.shape(),
            });
        }
        let n_layers = self.layers.len();
        let keep = 1.0 - self.dropout_rate;
        let use_dropout = mode == Mode::Train && self.dropout_rate > 0.0;
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre_activations = Vec::with_capacity(n_layers - 1);
        let mut masks = Vec::with_capacity(n_layers - 1);
        let mut current = batch.clone();
        for (idx, layer) in self.layers.iter().enumerate() {
            let mut z = matmul(&current, &layer.weight)?;
            z.add_row_vector(&layer.bias)?;
            inputs.push(current);
            if idx + 1 == n_layers {
                return Ok((
                    z,
                    ForwardTrace {
                        inputs,
                        pre_activations,
                        masks,
                    },
                ));
            }
            let mut a = z.map(|x| self.activation.apply(x));
            if use_dropout {
                let mask_data = (0..a.data().len())
                    .map(|_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 })
                    .collect();
                let mask = Matrix::new(a.rows(), a.cols(), mask_data)?;
                for (v, m) in a.data_mut().iter_mut().zip(mask.data()) {
                    *v *= m;
                }
                masks.push(Some(mask));
            } else {
                masks.push(None);
            }
            pre_activations.push(z);
            current = a;
        }
        unreachable!("loop returns at the last layer")
    }

    /// Deterministic eval-mode logits.
    pub fn logits(&self, batch: &Matrix) -> Result<Matrix> {
        // Eval mode never draws, so a throwaway generator is fine.
        let mut rng = Rng::new(0);
        self.forward(batch, Mode::Eval, &mut rng).map(|(z, _)| z)
    }

    /// Parameter gradients given the loss gradient with respect to the logits.
    pub fn backward(&self, trace: &ForwardTrace, dlogits: &Matrix) -> Result<Gradients> {
        let n_layers = self.layers.len();
        if trace.inputs.len() != n_layers || trace.pre_activations.len() + 1 != n_layers {
            return Err(Error::invalid(
                "network",
                "forward trace does not match the network's layer count",
            ));
        }
        let m = trace.inputs[0].rows();
        if dlogits.shape() != (m, self.num_classes()) {
            return Err(Error::DimensionMismatch {
                op: "network backward",
                left: dlogits.shape(),
                right: (m, self.num_classes()),
            });
        }
        let mut grads = Vec::with_capacity(n_layers);
        let mut delta = dlogits.clone();
        for idx in (0..n_layers).rev() {
            let layer = &self.layers[idx];
            let input = &trace.inputs[idx];
            if input.cols() != layer.in_dim() {
                return Err(Error::invalid("network", "forward trace shapes do not chain"));
            }
            let dw = matmul_tn(input, &delta)?;
            let db = delta.column_sums();
            grads.push(DenseLayer { weight: dw, bias: db });
            if idx == 0 {
                break;
            }
            let mut da = matmul_nt(&delta, &layer.weight)?;
            if let Some(mask) = &trace.masks[idx - 1] {
                for (v, mk) in da.data_mut().iter_mut().zip(mask.data()) {
                    *v *= mk;
                }
            }
            let pre = &trace.pre_activations[idx - 1];
            for (v, &p) in da.data_mut().iter_mut().zip(pre.data()) {
                *v *= self.activation.derivative(p);
            }
            delta = da;
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }

    /// Writes the network as versioned JSON.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Network::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let file = NetworkFile {
            format: NETWORK_FORMAT.to_string(),
            version: NETWORK_FORMAT_VERSION,
            activation: self.activation,
            dropout_rate: self.dropout_rate,
            layers: self
                .layers
                .iter()
                .map(|l| LayerFile {
                    in_dim: l.in_dim(),
                    out_dim: l.out_dim(),
                    weight: l.weight.data().to_vec(),
                    bias: l.bias.clone(),
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("network serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: NetworkFile =
            serde_json::from_str(text).map_err(|e| Error::parse("network file", e.to_string()))?;
        if file.format != NETWORK_FORMAT || file.version != NETWORK_FORMAT_VERSION {
            return Err(Error::parse(
                "network file",
                format!(
                    "unsupported format {} v{} (expected {} v{})",
                    file.format, file.version, NETWORK_FORMAT, NETWORK_FORMAT_VERSION
                ),
            ));
        }
        let layers = file
            .layers
            .into_iter()
            .map(|l| {
                Ok(DenseLayer {
                    weight: Matrix::new(l.in_dim, l.out_dim, l.weight)?,
                    bias: l.bias,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Network::from_layers(layers, file.activation, file.dropout_rate)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkFile {
    format: String,
    version: u32,
    activation: Activation,
    dropout_rate: f64,
    layers: Vec<LayerFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerFile {
    in_dim: usize,
    out_dim: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

/// Row-wise softmax, stabilized by subtracting the row maximum.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    let c = out.cols();
    if c == 0 {
        return out;
    }
    for row in out.data_mut().chunks_exact_mut(c) {
        softmax_in_place(row);
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise log-softmax, `z - max - ln(sum(exp(z - max)))`.
pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - max - lse).collect()
}

/// Mean negative log-likelihood and its gradient `(softmax - onehot) / m`.
pub fn nll_loss(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (m, k) = logits.shape();
    if labels.len() != m {
        return Err(Error::invalid(
            "network",
            format!("{} labels for {} logit rows", labels.len(), m),
        ));
    }
    if m == 0 {
        return Err(Error::invalid("network", "nll_loss on an empty batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::invalid(
            "network",
            format!("label {bad} out of range for {k} classes"),
        ));
    }
    let mut grad = Matrix::zeros(m, k);
    let mut total = 0.0;
    let inv_m = 1.0 / m as f64;
    for (i, &y) in labels.iter().enumerate() {
        let lsm = log_softmax_row(logits.row(i));
        total -= lsm[y];
        let g = grad.row_mut(i);
        for (gj, l) in g.iter_mut().zip(&lsm) {
            *gj = l.exp() * inv_m;
        }
        g[y] -= inv_m;
    }
    Ok((total * inv_m, grad))
}

/// Mean over `n_samples` stochastic (training-mode) passes of the softmax.
pub fn predict_mc_dropout(net: &Network, batch: &Matrix, n_samples: usize, rng: &mut Rng) -> Result<Matrix> {
    if net.dropout_rate() <= 0.0 {
        return Err(Error::invalid(
            "network",
            "MC-dropout needs a positive dropout rate",
        ));
    }
    if n_samples == 0 {
        return Err(Error::invalid("network", "MC-dropout needs n_samples >= 1"));
    }
    let mut acc = Matrix::zeros(batch.rows(), net.num_classes());
    for _ in 0..n_samples {
        let (z, _) = net.forward(batch, Mode::Train, rng)?;
        acc.add_scaled(&softmax(&z), 1.0)?;
    }
    acc.scale_in_place(1.0 / n_samples as f64);
    Ok(acc)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
