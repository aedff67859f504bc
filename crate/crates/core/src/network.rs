// Copyright 2026 The sdplab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Masked multilayer perceptron with manual forward/backward passes,
//! momentum SGD and text checkpoints.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{seeded_normal, Matrix, Rng};

static NEXT_NETWORK_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_NETWORK_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
        }
    }
}

/// Weight-norm regularizer added to the training loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regularizer {
    None,
    L1(f64),
    L2(f64),
}

/// One dense layer `z = A·(W ⊙ M)ᵀ + b`. `W` is stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedLinear {
    weights: Matrix,
    bias: Vec<f64>,
    mask: Matrix,
    prunable: bool,
}

impl MaskedLinear {
    pub fn new(weights: Matrix, bias: Vec<f64>, prunable: bool) -> Result<Self> {
        let mask = Matrix::filled(weights.rows(), weights.cols(), 1.0);
        Self::with_mask(weights, bias, mask, prunable)
    }

    pub fn with_mask(mut weights: Matrix, bias: Vec<f64>, mask: Matrix, prunable: bool) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::ShapeMismatch {
                op: "layer bias",
                left: weights.shape(),
                right: (bias.len(), 1),
            });
        }
        if mask.shape() != weights.shape() {
            return Err(Error::ShapeMismatch {
                op: "layer mask",
                left: weights.shape(),
                right: mask.shape(),
            });
        }
        if mask.as_slice().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::invalid("mask entries must be 0 or 1"));
        }
        for (w, &m) in weights.as_mut_slice().iter_mut().zip(mask.as_slice()) {
            if m == 0.0 {
                *w = 0.0;
            }
        }
        Ok(Self {
            weights,
            bias,
            mask,
            prunable,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn mask(&self) -> &Matrix {
        &self.mask
    }

    pub fn is_prunable(&self) -> bool {
        self.prunable
    }

    pub fn is_live(&self, flat: usize) -> bool {
        self.mask.as_slice()[flat] != 0.0
    }

    pub fn live_count(&self) -> usize {
        self.mask.as_slice().iter().filter(|&&m| m != 0.0).count()
    }

    pub fn effective_weights(&self) -> Matrix {
        // W is kept at exactly 0 wherever the mask is 0
        self.weights.clone()
    }

    fn effective_gated(&self, gate: Option<&Matrix>) -> Result<Matrix> {
        match gate {
            Some(g) => self.weights.hadamard(g),
            None => Ok(self.effective_weights()),
        }
    }
}

/// Per-layer activations for one batch.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    net_id: u64,
    net_version: u64,
    input: Matrix,
    pre: Vec<Matrix>,
    post: Vec<Matrix>,
    effective: Vec<Matrix>,
    gates: Option<Vec<Option<Matrix>>>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Matrix {
        self.pre.last().expect("network has at least one layer")
    }

    /// Pre-activations `z_l` per layer.
    pub fn pre_activations(&self) -> &[Matrix] {
        &self.pre
    }

    /// Activations `A_l = g(z_l)`; the last entry equals the logits.
    pub fn activations(&self) -> &[Matrix] {
        &self.post
    }

    /// `A_{L-1}`, the representation feeding the classification layer.
    pub fn penultimate(&self) -> &Matrix {
        if self.post.len() >= 2 {
            &self.post[self.post.len() - 2]
        } else {
            &self.input
        }
    }

    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }
}

/// Gradients congruent with a network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    /// Gradient with respect to multiplicative weight gates, when the
    /// forward pass was gated.
    pub gates: Option<Vec<Option<Matrix>>>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            weights: net.layers.iter().map(|l| Matrix::zeros(l.out_dim(), l.in_dim())).collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.out_dim()]).collect(),
            gates: None,
        }
    }

    pub fn global_norm(&self) -> f64 {
        let w: f64 = self.weights.iter().map(Matrix::sum_squares).sum();
        let b: f64 = self.biases.iter().flatten().map(|v| v * v).sum();
        (w + b).sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(Matrix::all_finite) && self.biases.iter().flatten().all(|v| v.is_finite())
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for w in &mut self.weights {
            w.as_mut_slice().iter_mut().for_each(|v| *v *= s);
        }
        for b in &mut self.biases {
            b.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        if self.weights.len() != other.weights.len() {
            return Err(Error::invalid("gradient layer counts differ"));
        }
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.add_assign(b)?;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            if a.len() != b.len() {
                return Err(Error::invalid("bias gradient lengths differ"));
            }
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }
}

/// Rescales `grads` so their global L2 norm is at most `clip_norm`.
/// Returns the factor applied (1.0 when no clipping happened).
pub fn clip_gradients(grads: &mut Gradients, clip_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > clip_norm {
        let s = clip_norm / norm;
        grads.scale_in_place(s);
        s
    } else {
        1.0
    }
}

/// Row-wise softmax of `logits / tau`.
pub fn softmax_with_temperature(logits: &Matrix, tau: f64) -> Result<Matrix> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / tau).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(out)
}

#[derive(Debug)]
pub struct Network {
    layers: Vec<MaskedLinear>,
    activation: Activation,
    role: Role,
    id: u64,
    version: u64,
}

impl Clone for Network {
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            activation: self.activation,
            role: self.role,
            id: fresh_id(),
            version: 0,
        }
    }
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.activation == other.activation
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Remaining {
    pub live: usize,
    pub total: usize,
    pub fraction: f64,
}

impl Network {
    /// He-initialized MLP with the given layer widths `[input, hidden.., classes]`.
    /// Every layer except the classification layer is prunable.
    pub fn new(widths: &[usize], rng: &mut Rng) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid(format!("invalid layer widths {widths:?}")));
        }
        let n = widths.len() - 1;
        let mut layers = Vec::with_capacity(n);
        for (i, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let w = seeded_normal(rng, fan_out, fan_in, 0.0, (2.0 / fan_in as f64).sqrt())?;
            layers.push(MaskedLinear::new(w, vec![0.0; fan_out], i + 1 < n)?);
        }
        Self::from_layers(layers, Role::Student)
    }

    pub fn from_layers(layers: Vec<MaskedLinear>, role: Role) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::ShapeMismatch {
                    op: "layer stack",
                    left: pair[0].weights.shape(),
                    right: pair[1].weights.shape(),
                });
            }
        }
        if layers.last().is_some_and(|l| l.prunable) {
            return Err(Error::invalid("the classification layer must not be prunable"));
        }
        Ok(Self {
            layers,
            activation: Activation::Relu,
            role,
            id: fresh_id(),
            version: 0,
        })
    }

    pub fn layers(&self) -> &[MaskedLinear] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, MaskedLinear::out_dim)
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(MaskedLinear::out_dim));
        w
    }

    fn touch(&mut self) {
        self.version += 1;
    }

    pub fn forward(&self, inputs: &Matrix) -> Result<ForwardTrace> {
        self.forward_gated(inputs, None)
    }

    /// Forward pass where each layer's effective weight is additionally
    /// multiplied elementwise by an optional gate matrix.
    pub fn forward_gated(&self, inputs: &Matrix, gates: Option<&[Option<Matrix>]>) -> Result<ForwardTrace> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "forward input",
                left: inputs.shape(),
                right: (inputs.rows(), self.input_dim()),
            });
        }
        if let Some(g) = gates {
            if g.len() != self.layers.len() {
                return Err(Error::invalid("one gate slot per layer required"));
            }
        }
        let last = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Matrix> = Vec::with_capacity(self.layers.len());
        let mut effective = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let gate = gates.and_then(|g| g[l].as_ref());
            let w = layer.effective_gated(gate)?;
            let a_prev = if l == 0 { inputs } else { &post[l - 1] };
            let mut z = a_prev.matmul_nt(&w)?;
            for r in 0..z.rows() {
                z.row_mut(r).iter_mut().zip(&layer.bias).for_each(|(v, b)| *v += b);
            }
            let a = if l == last { z.clone() } else { z.map(|v| v.max(0.0)) };
            pre.push(z);
            post.push(a);
            effective.push(w);
        }
        Ok(ForwardTrace {
            net_id: self.id,
            net_version: self.version,
            input: inputs.clone(),
            pre,
            post,
            effective,
            gates: gates.map(<[Option<Matrix>]>::to_vec),
        })
    }

    pub fn logits(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(self.forward(inputs)?.logits().clone())
    }

    pub fn backward(&self, trace: &ForwardTrace, logit_grad: &Matrix) -> Result<Gradients> {
        self.backward_with_hidden(trace, logit_grad, None)
    }

    /// Reverse pass. `hidden_grad`, when given, is an extra gradient with
    /// respect to the penultimate activation `A_{L-1}` (representation losses).
    pub fn backward_with_hidden(
        &self,
        trace: &ForwardTrace,
        logit_grad: &Matrix,
        hidden_grad: Option<&Matrix>,
    ) -> Result<Gradients> {
        if trace.net_id != self.id || trace.net_version != self.version {
            return Err(Error::StaleTrace {
                trace_id: trace.net_id,
                trace_version: trace.net_version,
                net_id: self.id,
                net_version: self.version,
            });
        }
        if logit_grad.shape() != trace.logits().shape() {
            return Err(Error::ShapeMismatch {
                op: "backward logit gradient",
                left: logit_grad.shape(),
                right: trace.logits().shape(),
            });
        }
        if let Some(h) = hidden_grad {
            if h.shape() != trace.penultimate().shape() {
                return Err(Error::ShapeMismatch {
                    op: "backward hidden gradient",
                    left: h.shape(),
                    right: trace.penultimate().shape(),
                });
            }
        }
        let n = self.layers.len();
        let mut weights = vec![Matrix::zeros(0, 0); n];
        let mut biases = vec![Vec::new(); n];
        let mut gate_grads: Option<Vec<Option<Matrix>>> = trace.gates.as_ref().map(|g| vec![None; g.len()]);

        let mut delta = logit_grad.clone();
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            let a_prev = if l == 0 { &trace.input } else { &trace.post[l - 1] };
            // dL/d(effective W) = δᵀ · A_{l-1}
            let d_eff = delta.matmul_tn(a_prev)?;
            let mut db = vec![0.0; layer.out_dim()];
            for r in 0..delta.rows() {
                db.iter_mut().zip(delta.row(r)).for_each(|(acc, v)| *acc += v);
            }
            let gate = trace.gates.as_ref().and_then(|g| g[l].as_ref());
            let mut dw = d_eff.hadamard(&layer.mask)?;
            if let Some(g) = gate {
                dw = dw.hadamard(g)?;
                if let Some(gg) = gate_grads.as_mut() {
                    gg[l] = Some(d_eff.hadamard(&layer.weights)?);
                }
            }
            weights[l] = dw;
            biases[l] = db;

            if l > 0 {
                let mut d_act = delta.matmul(&trace.effective[l])?;
                if l == n - 1 {
                    if let Some(h) = hidden_grad {
                        d_act.add_assign(h)?;
                    }
                }
                let z_prev = &trace.pre[l - 1];
                delta = d_act.zip_map(z_prev, "relu backward", |g, z| if z > 0.0 { g } else { 0.0 })?;
            }
        }
        Ok(Gradients {
            weights,
            biases,
            gates: gate_grads,
        })
    }

    /// Value and gradient of the weight regularizer over live prunable weights.
    pub fn weight_penalty(&self, reg: Regularizer) -> (f64, Gradients) {
        let mut grads = Gradients::zeros_like(self);
        let mut value = 0.0;
        for (layer, g) in self.layers.iter().zip(grads.weights.iter_mut()) {
            if !layer.prunable {
                continue;
            }
            for ((gw, &w), &m) in g.as_mut_slice().iter_mut().zip(layer.weights.as_slice()).zip(layer.mask.as_slice()) {
                if m == 0.0 {
                    continue;
                }
                match reg {
                    Regularizer::None => {}
                    Regularizer::L1(c) => {
                        value += c * w.abs();
                        *gw = if w > 0.0 {
                            c
                        } else if w < 0.0 {
                            -c
                        } else {
                            0.0
                        };
                    }
                    Regularizer::L2(c) => {
                        value += c * w * w;
                        *gw = 2.0 * c * w;
                    }
                }
            }
        }
        (value, grads)
    }

    /// Frozen deep copy with full masks. Weights at previously pruned
    /// positions are already 0, so outputs are unchanged.
    pub fn snapshot_teacher(&self) -> Network {
        let mut t = self.clone();
        t.role = Role::Teacher;
        for layer in &mut t.layers {
            layer.mask = Matrix::filled(layer.mask.rows(), layer.mask.cols(), 1.0);
        }
        t
    }

    /// Student copy: same weights and masks, role `Student`.
    pub fn student_copy(&self) -> Network {
        let mut s = self.clone();
        s.role = Role::Student;
        s
    }

    /// Permanently masks the given flat positions of layer `layer`.
    /// Returns how many live weights were removed.
    pub fn prune_positions(&mut self, layer: usize, positions: &[usize]) -> Result<usize> {
        let l = self
            .layers
            .get_mut(layer)
            .ok_or_else(|| Error::invalid(format!("no layer {layer}")))?;
        if !l.prunable {
            return Err(Error::invalid(format!("layer {layer} is not prunable")));
        }
        let mut removed = 0;
        for &p in positions {
            if p >= l.mask.len() {
                return Err(Error::invalid(format!("position {p} out of range for layer {layer}")));
            }
            if l.mask.as_slice()[p] != 0.0 {
                l.mask.as_mut_slice()[p] = 0.0;
                l.weights.as_mut_slice()[p] = 0.0;
                removed += 1;
            }
        }
        self.touch();
        Ok(removed)
    }

    /// Multiplies each layer's weights by its gate matrix (when present).
    pub fn fold_gates(&mut self, gates: &[Option<Matrix>]) -> Result<()> {
        for (layer, gate) in self.layers.iter_mut().zip(gates) {
            if let Some(g) = gate {
                layer.weights = layer.weights.hadamard(g)?;
            }
        }
        self.touch();
        Ok(())
    }

    pub fn count_remaining(&self) -> Remaining {
        let (live, total) = self
            .layers
            .iter()
            .filter(|l| l.prunable)
            .fold((0, 0), |(live, total), l| (live + l.live_count(), total + l.mask.len()));
        Remaining {
            live,
            total,
            fraction: if total == 0 { 1.0 } else { live as f64 / total as f64 },
        }
    }

    pub fn masks(&self) -> Vec<Matrix> {
        self.layers.iter().map(|l| l.mask.clone()).collect()
    }

    /// Direct parameter access for tests and finite-difference checks.
    pub fn weight_mut(&mut self, layer: usize) -> &mut Matrix {
        self.touch();
        &mut self.layers[layer].weights
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut Vec<f64> {
        self.touch();
        &mut self.layers[layer].bias
    }

    pub fn to_checkpoint_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{CHECKPOINT_HEADER}");
        let _ = writeln!(s, "activation {}", self.activation.name());
        let _ = writeln!(s, "layers {}", self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let _ = writeln!(
                s,
                "layer {i} in {} out {} prunable {}",
                l.in_dim(),
                l.out_dim(),
                u8::from(l.prunable)
            );
            s.push_str("weights");
            for v in l.weights.as_slice() {
                let _ = write!(s, " {v:.16e}");
            }
            s.push_str("\nbias");
            for v in &l.bias {
                let _ = write!(s, " {v:.16e}");
            }
            s.push_str("\nmask");
            for &m in l.mask.as_slice() {
                s.push_str(if m != 0.0 { " 1" } else { " 0" });
            }
            s.push('\n');
        }
        s.push_str("end\n");
        s
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Network> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        if header != CHECKPOINT_HEADER {
            return Err(Error::CheckpointVersion {
                expected: CHECKPOINT_HEADER.into(),
                found: header.chars().take(64).collect(),
            });
        }
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::CheckpointTruncated(format!("missing {what}")))
        };
        let activation = next("activation")?;
        if activation.trim() != "activation relu" {
            return Err(Error::CheckpointShape(format!("unsupported activation line '{activation}'")));
        }
        let count_line = next("layer count")?;
        let count: usize = count_line
            .strip_prefix("layers ")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::CheckpointShape(format!("bad layer count line '{count_line}'")))?;
        let mut layers = Vec::with_capacity(count);
        for i in 0..count {
            let spec = next("layer header")?;
            let tok: Vec<&str> = spec.split_whitespace().collect();
            let parsed = match tok.as_slice() {
                ["layer", idx, "in", din, "out", dout, "prunable", p] => {
                    let idx: Option<usize> = idx.parse().ok();
                    let din: Option<usize> = din.parse().ok();
                    let dout: Option<usize> = dout.parse().ok();
                    match (idx, din, dout, *p) {
                        (Some(idx), Some(din), Some(dout), "0" | "1") if idx == i => Some((din, dout, *p == "1")),
                        _ => None,
                    }
                }
                _ => None,
            };
            let (din, dout, prunable) =
                parsed.ok_or_else(|| Error::CheckpointShape(format!("bad layer header '{spec}'")))?;
            let weights = parse_values(next("weights")?, "weights", din * dout)?;
            let bias = parse_values(next("bias")?, "bias", dout)?;
            let mask = parse_values(next("mask")?, "mask", din * dout)?;
            if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
                return Err(Error::CheckpointShape(format!("layer {i}: mask entries must be 0/1")));
            }
            if weights.iter().zip(&mask).any(|(&w, &m)| m == 0.0 && w != 0.0) {
                return Err(Error::CheckpointShape(format!("layer {i}: nonzero weight at a masked position")));
            }
            let layer = MaskedLinear::with_mask(
                Matrix::from_vec(dout, din, weights)?,
                bias,
                Matrix::from_vec(dout, din, mask)?,
                prunable,
            )
            .map_err(|e| Error::CheckpointShape(format!("layer {i}: {e}")))?;
            layers.push(layer);
        }
        match next("end marker")? {
            "end" => {}
            other => return Err(Error::CheckpointShape(format!("expected 'end', found '{other}'"))),
        }
        Network::from_layers(layers, Role::Student).map_err(|e| Error::CheckpointShape(e.to_string()))
    }
}

pub const CHECKPOINT_HEADER: &str = "SDPLAB-CKPT v1";

fn parse_values(line: &str, key: &str, expected: usize) -> Result<Vec<f64>> {
    let mut tok = line.split_whitespace();
    if tok.next() != Some(key) {
        return Err(Error::CheckpointShape(format!("expected '{key}' record")));
    }
    let values: Vec<f64> = tok
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::CheckpointShape(format!("bad {key} value '{t}'")))
        })
        .collect::<Result<_>>()?;
    match values.len().cmp(&expected) {
        std::cmp::Ordering::Less => Err(Error::CheckpointTruncated(format!(
            "{key}: expected {expected} values, found {}",
            values.len()
        ))),
        std::cmp::Ordering::Greater => Err(Error::CheckpointShape(format!(
            "{key}: expected {expected} values, found {}",
            values.len()
        ))),
        std::cmp::Ordering::Equal => Ok(values),
    }
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    std::fs::write(path, net.to_checkpoint_string())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let text = std::fs::read_to_string(path)?;
    Network::from_checkpoint_str(&text)
}

/// Momentum SGD with global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    velocity_w: Vec<Matrix>,
    velocity_b: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub clip_scale: f64,
}

impl OptimizerState {
    pub fn new(net: &Network, learning_rate: f64, momentum: f64, clip_norm: f64) -> Result<Self> {
        if !(clip_norm > 0.0) {
            return Err(Error::invalid(format!("clip_norm must be positive, got {clip_norm}")));
        }
        if !(learning_rate > 0.0) || !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!(
                "need lr > 0 and momentum in [0,1) (got {learning_rate}, {momentum})"
            )));
        }
        let zeros = Gradients::zeros_like(net);
        Ok(Self {
            learning_rate,
            momentum,
            clip_norm,
            velocity_w: zeros.weights,
            velocity_b: zeros.biases,
        })
    }
}

/// Clip, then `v ← μv + g; θ ← θ − ηv`. Masked weights stay exactly 0.
pub fn sgd_step(net: &mut Network, opt: &mut OptimizerState, mut grads: Gradients) -> Result<StepInfo> {
    if !grads.all_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    if grads.weights.len() != net.layers.len() || opt.velocity_w.len() != net.layers.len() {
        return Err(Error::invalid("gradient / optimizer layer count mismatch"));
    }
    for ((g, layer), v) in grads.weights.iter().zip(&net.layers).zip(&opt.velocity_w) {
        if g.shape() != layer.weights.shape() || v.shape() != layer.weights.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                left: g.shape(),
                right: layer.weights.shape(),
            });
        }
    }
    for (g, layer) in grads.weights.iter_mut().zip(&net.layers) {
        *g = g.hadamard(&layer.mask)?;
    }
    let grad_norm = grads.global_norm();
    let clip_scale = clip_gradients(&mut grads, opt.clip_norm);

    let (lr, mu) = (opt.learning_rate, opt.momentum);
    for (l, layer) in net.layers.iter_mut().enumerate() {
        let v = opt.velocity_w[l].as_mut_slice();
        let w = layer.weights.as_mut_slice();
        let m = layer.mask.as_slice();
        for (((vi, wi), &gi), &mi) in v.iter_mut().zip(w.iter_mut()).zip(grads.weights[l].as_slice()).zip(m) {
            if mi == 0.0 {
                *vi = 0.0;
                *wi = 0.0;
                continue;
            }
            *vi = mu * *vi + gi;
            *wi -= lr * *vi;
        }
        for ((vb, b), &g) in opt.velocity_b[l].iter_mut().zip(layer.bias.iter_mut()).zip(&grads.biases[l]) {
            *vb = mu * *vb + g;
            *b -= lr * *vb;
        }
    }
    net.touch();
    Ok(StepInfo { grad_norm, clip_scale })
}
