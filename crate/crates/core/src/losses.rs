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

//! Training objectives with exact gradients.
//!
//! Every loss returns its batch-mean value together with the gradient of
//! that value with respect to the student input it was given (logits or
//! penultimate representation). Teacher inputs are treated as constants.

use crate::error::{Error, Result};
use crate::network::softmax_with_temperature;
use crate::tensor::Matrix;

/// Stabilizer added to the variance in [`batch_standardize`].
pub const STANDARDIZE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Matrix,
}

/// How the KLD term is weighted inside the cross-correlation objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KldCoefficient {
    /// `α·τ²`, the same weighting as the plain distillation objective.
    AlphaTauSquared,
    /// `α²`, as the combined objective is sometimes written.
    AlphaSquared,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda_offdiag: f64,
    pub temperature: f64,
    pub label_smoothing: f64,
    pub kld_coefficient: KldCoefficient,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 2e-5,
            lambda_offdiag: 5e-3,
            temperature: 0.9,
            label_smoothing: 0.0,
            kld_coefficient: KldCoefficient::AlphaTauSquared,
        }
    }
}

impl LossWeights {
    /// Defaults with the cosine-variant `β`.
    pub fn cosine_defaults() -> Self {
        Self {
            beta: 0.05,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha must be in [0,1], got {}", self.alpha)));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::invalid(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.lambda_offdiag >= 0.0) || !self.lambda_offdiag.is_finite() {
            return Err(Error::invalid(format!("lambda must be >= 0, got {}", self.lambda_offdiag)));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::invalid(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::invalid(format!(
                "label smoothing must be in [0,1), got {}",
                self.label_smoothing
            )));
        }
        Ok(())
    }

    pub fn kld_weight(&self) -> f64 {
        match self.kld_coefficient {
            KldCoefficient::AlphaTauSquared => self.alpha * self.temperature * self.temperature,
            KldCoefficient::AlphaSquared => self.alpha * self.alpha,
        }
    }
}

fn check_labels(logits: &Matrix, labels: &[usize]) -> Result<()> {
    if labels.len() != logits.rows() {
        return Err(Error::invalid(format!("{} labels for {} rows", labels.len(), logits.rows())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.cols()) {
        return Err(Error::invalid(format!("label {bad} >= {} classes", logits.cols())));
    }
    Ok(())
}

/// Smoothed cross-entropy `−Σ_c ỹ_c log q_c`, ỹ = (1−ε)·onehot + ε/C.
/// The logit gradient is `(q − ỹ)/M`.
pub fn cross_entropy(logits: &Matrix, labels: &[usize], smoothing: f64) -> Result<LossOutput> {
    check_labels(logits, labels)?;
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::invalid(format!("label smoothing must be in [0,1), got {smoothing}")));
    }
    let (m, c) = logits.shape();
    let q = softmax_with_temperature(logits, 1.0)?;
    let off = smoothing / c as f64;
    let on = 1.0 - smoothing + off;
    let mut value = 0.0;
    let mut grad = q.clone();
    for (r, &y) in labels.iter().enumerate() {
        let z = logits.row(r);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let g = grad.row_mut(r);
        for k in 0..c {
            let target = if k == y { on } else { off };
            if target > 0.0 {
                value -= target * (z[k] - lse);
            }
            g[k] = (g[k] - target) / m as f64;
        }
    }
    Ok(LossOutput {
        value: value / m as f64,
        grad,
    })
}

/// `D_KL(softmax(t/τ) ‖ softmax(s/τ))`, averaged over the batch.
/// The gradient with respect to the student logits is `(p_s − p_t)/(τM)`.
pub fn kld_distillation(student_logits: &Matrix, teacher_logits: &Matrix, tau: f64) -> Result<LossOutput> {
    if student_logits.shape() != teacher_logits.shape() {
        return Err(Error::ShapeMismatch {
            op: "kld_distillation",
            left: student_logits.shape(),
            right: teacher_logits.shape(),
        });
    }
    let ps = softmax_with_temperature(student_logits, tau)?;
    let pt = softmax_with_temperature(teacher_logits, tau)?;
    let m = student_logits.rows() as f64;
    let mut value = 0.0;
    for r in 0..student_logits.rows() {
        let ls = log_softmax_row(student_logits.row(r), tau);
        let lt = log_softmax_row(teacher_logits.row(r), tau);
        for ((&p, a), b) in pt.row(r).iter().zip(&lt).zip(&ls) {
            if p > 0.0 {
                value += p * (a - b);
            }
        }
    }
    let grad = ps.zip_map(&pt, "kld grad", |s, t| (s - t) / (tau * m))?;
    Ok(LossOutput { value: value / m, grad })
}

fn log_softmax_row(z: &[f64], tau: f64) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|v| ((v - max) / tau).exp()).sum::<f64>().ln();
    z.iter().map(|v| (v - max) / tau - lse).collect()
}

/// The two parts of `D_KL(y^T ‖ y^S)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KldTerms {
    /// `Σ y^T log y^T` (negative teacher entropy).
    pub entropic: f64,
    /// `Σ y^T log y^S`.
    pub kd_cross_entropy: f64,
}

impl KldTerms {
    pub fn divergence(&self) -> f64 {
        self.entropic - self.kd_cross_entropy
    }
}

pub fn kld_decomposition(teacher_probs: &[f64], student_probs: &[f64]) -> Result<KldTerms> {
    if teacher_probs.len() != student_probs.len() {
        return Err(Error::ShapeMismatch {
            op: "kld_decomposition",
            left: (1, teacher_probs.len()),
            right: (1, student_probs.len()),
        });
    }
    for p in [teacher_probs, student_probs] {
        if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("kld_decomposition needs probability vectors"));
        }
    }
    let mut entropic = 0.0;
    let mut kd = 0.0;
    for (&t, &s) in teacher_probs.iter().zip(student_probs) {
        if t == 0.0 {
            continue;
        }
        if s == 0.0 {
            return Err(Error::invalid("student assigns zero probability where the teacher has mass (infinite KL)"));
        }
        entropic += t * t.ln();
        kd += t * s.ln();
    }
    Ok(KldTerms {
        entropic,
        kd_cross_entropy: kd,
    })
}

/// Column-standardized batch (mean 0, population std 1, no affine terms).
#[derive(Debug, Clone)]
pub struct Standardized {
    pub values: Matrix,
    inv_std: Vec<f64>,
}

impl Standardized {
    /// Gradient with respect to the unstandardized input, given the
    /// gradient with respect to [`Standardized::values`].
    pub fn backward(&self, grad_out: &Matrix) -> Result<Matrix> {
        if grad_out.shape() != self.values.shape() {
            return Err(Error::ShapeMismatch {
                op: "standardize backward",
                left: grad_out.shape(),
                right: self.values.shape(),
            });
        }
        let (m, d) = grad_out.shape();
        let mf = m as f64;
        let mut out = Matrix::zeros(m, d);
        for j in 0..d {
            let (mut sum_g, mut sum_gy) = (0.0, 0.0);
            for r in 0..m {
                let g = grad_out.get(r, j);
                sum_g += g;
                sum_gy += g * self.values.get(r, j);
            }
            for r in 0..m {
                let y = self.values.get(r, j);
                let g = grad_out.get(r, j);
                out.set(r, j, self.inv_std[j] * (g - sum_g / mf - y * sum_gy / mf));
            }
        }
        Ok(out)
    }
}

pub fn batch_standardize(z: &Matrix) -> Result<Standardized> {
    let (m, d) = z.shape();
    if m < 2 {
        return Err(Error::invalid(format!("batch standardization needs >= 2 rows, got {m}")));
    }
    let mf = m as f64;
    let mut values = z.clone();
    let mut inv_std = vec![0.0; d];
    for j in 0..d {
        let mean = (0..m).map(|r| z.get(r, j)).sum::<f64>() / mf;
        let var = (0..m).map(|r| (z.get(r, j) - mean).powi(2)).sum::<f64>() / mf;
        let inv = 1.0 / (var + STANDARDIZE_EPS).sqrt();
        inv_std[j] = inv;
        for r in 0..m {
            values.set(r, j, (z.get(r, j) - mean) * inv);
        }
    }
    Ok(Standardized { values, inv_std })
}

fn column_norms(z: &Matrix) -> Vec<f64> {
    let mut n = vec![0.0; z.cols()];
    for r in 0..z.rows() {
        n.iter_mut().zip(z.row(r)).for_each(|(acc, v)| *acc += v * v);
    }
    n.into_iter().map(f64::sqrt).collect()
}

/// `C_ij = Σ_m s_mi t_mj / (‖s_·i‖ ‖t_·j‖)` for already standardized inputs.
pub fn cross_correlation(zs: &Matrix, zt: &Matrix) -> Result<Matrix> {
    if zs.shape() != zt.shape() {
        return Err(Error::ShapeMismatch {
            op: "cross_correlation",
            left: zs.shape(),
            right: zt.shape(),
        });
    }
    if zs.rows() < 2 {
        return Err(Error::invalid("cross_correlation needs a batch of >= 2"));
    }
    let (ns, nt) = (column_norms(zs), column_norms(zt));
    if let Some(j) = ns.iter().chain(&nt).position(|&n| n == 0.0) {
        return Err(Error::invalid(format!("zero-norm column {} in cross_correlation", j % zs.cols())));
    }
    let mut c = zs.matmul_tn(zt)?;
    for i in 0..c.rows() {
        for j in 0..c.cols() {
            c.set(i, j, c.get(i, j) / (ns[i] * nt[j]));
        }
    }
    Ok(c)
}

/// `Σ_i (1 − C_ii)² + λ Σ_{i≠j} C_ij²`, gradient with respect to `C`.
pub fn cc_loss(c: &Matrix, lambda: f64) -> Result<LossOutput> {
    if c.rows() != c.cols() {
        return Err(Error::invalid(format!("cc_loss needs a square matrix, got {:?}", c.shape())));
    }
    let mut value = 0.0;
    let mut grad = Matrix::zeros(c.rows(), c.cols());
    for i in 0..c.rows() {
        for j in 0..c.cols() {
            let v = c.get(i, j);
            if i == j {
                value += (1.0 - v).powi(2);
                grad.set(i, j, -2.0 * (1.0 - v));
            } else {
                value += lambda * v * v;
                grad.set(i, j, 2.0 * lambda * v);
            }
        }
    }
    Ok(LossOutput { value, grad })
}

/// Cross-correlation loss from raw (unstandardized) representations,
/// with the gradient carried back through correlation and standardization
/// to the student representation.
///
/// Columns that standardize to all zeros (a constant feature, e.g. a dead
/// ReLU unit) have no defined correlation; they contribute `C = 0` entries
/// and receive no gradient.
pub fn cc_representation_loss(zs_raw: &Matrix, zt_raw: &Matrix, lambda: f64) -> Result<LossOutput> {
    if zs_raw.shape() != zt_raw.shape() {
        return Err(Error::ShapeMismatch {
            op: "cc_representation_loss",
            left: zs_raw.shape(),
            right: zt_raw.shape(),
        });
    }
    let s = batch_standardize(zs_raw)?;
    let t = batch_standardize(zt_raw)?;
    let (ns, nt) = (column_norms(&s.values), column_norms(&t.values));
    let normalize = |z: &Matrix, n: &[f64]| {
        let mut out = z.clone();
        for r in 0..z.rows() {
            for (v, &nj) in out.row_mut(r).iter_mut().zip(n) {
                *v = if nj > 0.0 { *v / nj } else { 0.0 };
            }
        }
        out
    };
    let s_hat = normalize(&s.values, &ns);
    let t_hat = normalize(&t.values, &nt);
    let c = s_hat.matmul_tn(&t_hat)?;
    let LossOutput { value, grad: g_c } = cc_loss(&c, lambda)?;

    // dL/dŜ = T̂ · Gᵀ
    let g_shat = t_hat.matmul_nt(&g_c)?;
    let (m, d) = g_shat.shape();
    let mut g_s = Matrix::zeros(m, d);
    for j in 0..d {
        if ns[j] == 0.0 {
            continue;
        }
        let proj: f64 = (0..m).map(|r| s_hat.get(r, j) * g_shat.get(r, j)).sum();
        for r in 0..m {
            g_s.set(r, j, (g_shat.get(r, j) - s_hat.get(r, j) * proj) / ns[j]);
        }
    }
    Ok(LossOutput {
        value,
        grad: s.backward(&g_s)?,
    })
}

fn cosine_rows(zs: &Matrix, zt: &Matrix, strict: bool) -> Result<LossOutput> {
    if zs.shape() != zt.shape() {
        return Err(Error::ShapeMismatch {
            op: "cosine_sdp_loss",
            left: zs.shape(),
            right: zt.shape(),
        });
    }
    let m = zs.rows() as f64;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(zs.rows(), zs.cols());
    for r in 0..zs.rows() {
        let (s, t) = (zs.row(r), zt.row(r));
        let (ns, nt) = (crate::tensor::dot(s, s).sqrt(), crate::tensor::dot(t, t).sqrt());
        if ns == 0.0 || nt == 0.0 {
            if strict {
                return Err(Error::invalid(format!("zero-norm row {r} in cosine loss")));
            }
            value += 1.0;
            continue;
        }
        let cos = crate::tensor::dot(s, t) / (ns * nt);
        value += 1.0 - cos;
        for (k, g) in grad.row_mut(r).iter_mut().enumerate() {
            *g = -(t[k] / (ns * nt) - cos * s[k] / (ns * ns)) / m;
        }
    }
    Ok(LossOutput { value: value / m, grad })
}

/// Batch mean of `1 − cos(z^S, z^T)`; errors on zero-norm rows.
pub fn cosine_sdp_loss(zs: &Matrix, zt: &Matrix) -> Result<LossOutput> {
    cosine_rows(zs, zt, true)
}

/// As [`cosine_sdp_loss`], but a zero-norm row contributes 1 with no gradient.
pub fn cosine_sdp_loss_lenient(zs: &Matrix, zt: &Matrix) -> Result<LossOutput> {
    cosine_rows(zs, zt, false)
}

/// Which objective a student trains under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LossMode {
    Ce,
    SdpKld,
    SdpCc,
    SdpCos,
}

impl LossMode {
    pub const ALL: [LossMode; 4] = [LossMode::Ce, LossMode::SdpKld, LossMode::SdpCc, LossMode::SdpCos];

    pub fn name(self) -> &'static str {
        match self {
            LossMode::Ce => "ce",
            LossMode::SdpKld => "sdp-kld",
            LossMode::SdpCc => "sdp-cc",
            LossMode::SdpCos => "sdp-cos",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn needs_teacher(self) -> bool {
        self != LossMode::Ce
    }
}

/// Value, components and student gradients of a combined objective.
#[derive(Debug, Clone)]
pub struct ObjectiveOutput {
    pub total: f64,
    pub ce: f64,
    pub kld: f64,
    pub cc: f64,
    pub cos: f64,
    pub logit_grad: Matrix,
    /// Gradient with respect to the student's penultimate representation.
    pub hidden_grad: Option<Matrix>,
}

pub fn ce_objective(student_logits: &Matrix, labels: &[usize], weights: &LossWeights) -> Result<ObjectiveOutput> {
    let ce = cross_entropy(student_logits, labels, weights.label_smoothing)?;
    Ok(ObjectiveOutput {
        total: ce.value,
        ce: ce.value,
        kld: 0.0,
        cc: 0.0,
        cos: 0.0,
        logit_grad: ce.grad,
        hidden_grad: None,
    })
}

/// `(1−α)·ℓ_CE + α·τ²·ℓ_KLD`.
pub fn sdp_kld_objective(
    student_logits: &Matrix,
    teacher_logits: &Matrix,
    labels: &[usize],
    weights: &LossWeights,
) -> Result<ObjectiveOutput> {
    weights.validate()?;
    let ce = cross_entropy(student_logits, labels, weights.label_smoothing)?;
    let kld = kld_distillation(student_logits, teacher_logits, weights.temperature)?;
    let (a, k) = (1.0 - weights.alpha, weights.alpha * weights.temperature * weights.temperature);
    Ok(ObjectiveOutput {
        total: a * ce.value + k * kld.value,
        ce: ce.value,
        kld: kld.value,
        cc: 0.0,
        cos: 0.0,
        logit_grad: ce.grad.zip_map(&kld.grad, "sdp-kld grad", |g, h| a * g + k * h)?,
        hidden_grad: None,
    })
}

/// `(1−α)·ℓ_CE + κ·ℓ_KLD + β·ℓ_CC` with κ from [`LossWeights::kld_weight`].
pub fn sdp_cc_objective(
    student_logits: &Matrix,
    teacher_logits: &Matrix,
    zs: &Matrix,
    zt: &Matrix,
    labels: &[usize],
    weights: &LossWeights,
) -> Result<ObjectiveOutput> {
    weights.validate()?;
    let ce = cross_entropy(student_logits, labels, weights.label_smoothing)?;
    let kld = kld_distillation(student_logits, teacher_logits, weights.temperature)?;
    let cc = cc_representation_loss(zs, zt, weights.lambda_offdiag)?;
    let (a, k, b) = (1.0 - weights.alpha, weights.kld_weight(), weights.beta);
    Ok(ObjectiveOutput {
        total: a * ce.value + k * kld.value + b * cc.value,
        ce: ce.value,
        kld: kld.value,
        cc: cc.value,
        cos: 0.0,
        logit_grad: ce.grad.zip_map(&kld.grad, "sdp-cc grad", |g, h| a * g + k * h)?,
        hidden_grad: Some(cc.grad.scale(b)),
    })
}

/// `α·ℓ_CE + β·(1 − cos(z^S, z^T))`.
pub fn sdp_cos_objective(
    student_logits: &Matrix,
    zs: &Matrix,
    zt: &Matrix,
    labels: &[usize],
    weights: &LossWeights,
) -> Result<ObjectiveOutput> {
    weights.validate()?;
    let ce = cross_entropy(student_logits, labels, weights.label_smoothing)?;
    let cos = cosine_sdp_loss_lenient(zs, zt)?;
    let (a, b) = (weights.alpha, weights.beta);
    Ok(ObjectiveOutput {
        total: a * ce.value + b * cos.value,
        ce: ce.value,
        kld: 0.0,
        cc: 0.0,
        cos: cos.value,
        logit_grad: ce.grad.scale(a),
        hidden_grad: Some(cos.grad.scale(b)),
    })
}
