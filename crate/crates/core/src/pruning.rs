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

//! Importance scores, mask construction and hard-concrete L0 gates.

use crate::error::{Error, Result};
use crate::network::{Gradients, Network};
use crate::tensor::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PruneMethod {
    Random,
    /// Layerwise magnitude.
    Magnitude,
    GlobalMagnitude,
    Gradient,
    Taylor,
    L0,
    /// Layerwise magnitude on a network retrained under an L1 penalty.
    L1,
    /// Layerwise magnitude on a network retrained under an L2 penalty.
    L2,
    Lookahead,
    Lamp,
    FdmSdp,
}

/// How a score matrix becomes a mask update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    Layerwise,
    Global,
    Random,
}

impl PruneMethod {
    pub const ALL: [PruneMethod; 11] = [
        PruneMethod::Random,
        PruneMethod::Magnitude,
        PruneMethod::GlobalMagnitude,
        PruneMethod::Gradient,
        PruneMethod::Taylor,
        PruneMethod::L0,
        PruneMethod::L1,
        PruneMethod::L2,
        PruneMethod::Lookahead,
        PruneMethod::Lamp,
        PruneMethod::FdmSdp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PruneMethod::Random => "random",
            PruneMethod::Magnitude => "mbp",
            PruneMethod::GlobalMagnitude => "global-mbp",
            PruneMethod::Gradient => "gradient",
            PruneMethod::Taylor => "taylor",
            PruneMethod::L0 => "l0",
            PruneMethod::L1 => "l1",
            PruneMethod::L2 => "l2",
            PruneMethod::Lookahead => "lookahead",
            PruneMethod::Lamp => "lamp",
            PruneMethod::FdmSdp => "fdm-sdp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn selection(self) -> Selection {
        match self {
            PruneMethod::Random => Selection::Random,
            PruneMethod::GlobalMagnitude | PruneMethod::Lamp => Selection::Global,
            _ => Selection::Layerwise,
        }
    }

    /// Whether scoring needs a pass over the training data.
    pub fn needs_gradients(self) -> bool {
        matches!(self, PruneMethod::Gradient | PruneMethod::Taylor)
    }
}

/// Per-layer scores; `None` for non-prunable layers. Pruned positions hold `+∞`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores {
    pub method: PruneMethod,
    pub layers: Vec<Option<Matrix>>,
}

fn scores_from(net: &Network, method: PruneMethod, mut f: impl FnMut(usize, usize) -> f64) -> ImportanceScores {
    let layers = net
        .layers()
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            if !layer.is_prunable() {
                return None;
            }
            let mut m = Matrix::zeros(layer.out_dim(), layer.in_dim());
            for (p, v) in m.as_mut_slice().iter_mut().enumerate() {
                *v = if layer.is_live(p) { f(l, p) } else { f64::INFINITY };
            }
            Some(m)
        })
        .collect();
    ImportanceScores { method, layers }
}

pub fn score_magnitude(net: &Network) -> ImportanceScores {
    scores_from(net, PruneMethod::Magnitude, |l, p| net.layers()[l].weights().as_slice()[p].abs())
}

/// Accumulated `Σ|g|` and `Σg` over a full pass of batches.
#[derive(Debug, Clone)]
pub struct GradientAccumulator {
    pub abs_sum: Vec<Matrix>,
    pub signed_sum: Vec<Matrix>,
    pub batches: usize,
}

impl GradientAccumulator {
    pub fn new(net: &Network) -> Self {
        let z: Vec<Matrix> = net
            .layers()
            .iter()
            .map(|l| Matrix::zeros(l.out_dim(), l.in_dim()))
            .collect();
        Self {
            abs_sum: z.clone(),
            signed_sum: z,
            batches: 0,
        }
    }

    pub fn add(&mut self, grads: &Gradients) -> Result<()> {
        if !grads.all_finite() {
            return Err(Error::NonFinite(format!("gradient in scoring batch {}", self.batches)));
        }
        if grads.weights.len() != self.abs_sum.len() {
            return Err(Error::invalid("gradient layer count mismatch"));
        }
        for ((a, s), g) in self.abs_sum.iter_mut().zip(&mut self.signed_sum).zip(&grads.weights) {
            a.add_assign(&g.map(f64::abs))?;
            s.add_assign(g)?;
        }
        self.batches += 1;
        Ok(())
    }
}

pub fn score_gradient(net: &Network, acc: &GradientAccumulator) -> ImportanceScores {
    scores_from(net, PruneMethod::Gradient, |l, p| acc.abs_sum[l].as_slice()[p])
}

pub fn score_taylor(net: &Network, acc: &GradientAccumulator) -> ImportanceScores {
    scores_from(net, PruneMethod::Taylor, |l, p| {
        (acc.signed_sum[l].as_slice()[p] * net.layers()[l].weights().as_slice()[p]).abs()
    })
}

/// `|W_l[i,j]|·‖row j of W_{l−1}‖·‖column i of W_{l+1}‖` over masked weights.
/// Neighbours are taken among prunable layers; absent ones contribute 1.
pub fn score_lookahead(net: &Network) -> ImportanceScores {
    let layers = net.layers();
    let eff: Vec<Matrix> = layers.iter().map(|l| l.effective_weights()).collect();
    let prunable = |l: usize| layers.get(l).is_some_and(|x| x.is_prunable());
    let incoming: Vec<Option<Vec<f64>>> = (0..layers.len())
        .map(|l| {
            (l > 0 && prunable(l - 1)).then(|| {
                let w = &eff[l - 1];
                (0..w.rows()).map(|r| crate::tensor::dot(w.row(r), w.row(r)).sqrt()).collect()
            })
        })
        .collect();
    let outgoing: Vec<Option<Vec<f64>>> = (0..layers.len())
        .map(|l| {
            prunable(l + 1).then(|| {
                let w = &eff[l + 1];
                (0..w.cols()).map(|c| w.column(c).iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
            })
        })
        .collect();
    scores_from(net, PruneMethod::Lookahead, |l, p| {
        let cols = layers[l].in_dim();
        let (i, j) = (p / cols, p % cols);
        let up = incoming[l].as_ref().map_or(1.0, |n| n[j]);
        let down = outgoing[l].as_ref().map_or(1.0, |n| n[i]);
        eff[l].as_slice()[p].abs() * up * down
    })
}

/// Per layer, live `w²` sorted ascending (ties by index); the u-th weight
/// scores `w²_u / Σ_{v≥u} w²_v` (0 when that tail sum is 0).
pub fn score_lamp(net: &Network) -> ImportanceScores {
    let mut out = scores_from(net, PruneMethod::Lamp, |_, _| 0.0);
    for (layer, slot) in net.layers().iter().zip(out.layers.iter_mut()) {
        let Some(scores) = slot else { continue };
        let w = layer.weights().as_slice();
        let mut live: Vec<usize> = (0..w.len()).filter(|&p| layer.is_live(p)).collect();
        live.sort_by(|&a, &b| (w[a] * w[a]).total_cmp(&(w[b] * w[b])).then(a.cmp(&b)));
        let mut tail = 0.0;
        for &p in live.iter().rev() {
            let sq = w[p] * w[p];
            tail += sq;
            scores.as_mut_slice()[p] = if tail > 0.0 { sq / tail } else { 0.0 };
        }
    }
    out
}

/// `w² + λ·((w^T)² − (w^T − w)²)`: the increase of the squared combined
/// distortion when a single weight is removed.
pub fn score_fdm_sdp(student: &Network, teacher: &Network, lambda: f64) -> Result<ImportanceScores> {
    if student.widths() != teacher.widths() {
        return Err(Error::invalid(format!(
            "student widths {:?} differ from teacher widths {:?}",
            student.widths(),
            teacher.widths()
        )));
    }
    Ok(scores_from(student, PruneMethod::FdmSdp, |l, p| {
        let w = student.layers()[l].weights().as_slice()[p];
        let t = teacher.layers()[l].weights().as_slice()[p];
        w * w + lambda * (t * t - (t - w) * (t - w))
    }))
}

/// Scores from gate log-alphas; lower `S` means a smaller test-time gate.
pub fn score_l0(net: &Network, gates: &[Option<HardConcreteGate>]) -> Result<ImportanceScores> {
    if gates.len() != net.num_layers() {
        return Err(Error::invalid("one gate slot per layer required"));
    }
    for (l, (layer, g)) in net.layers().iter().zip(gates).enumerate() {
        if let Some(g) = g {
            if g.log_alpha.shape() != layer.weights().shape() {
                return Err(Error::invalid(format!("gate shape mismatch at layer {l}")));
            }
        } else if layer.is_prunable() {
            return Err(Error::invalid(format!("prunable layer {l} has no gate")));
        }
    }
    Ok(scores_from(net, PruneMethod::L0, |l, p| {
        gates[l].as_ref().map_or(f64::INFINITY, |g| g.log_alpha.as_slice()[p])
    }))
}

/// Flat positions to prune, per layer.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskUpdate {
    pub positions: Vec<Vec<usize>>,
    /// Prunable layers left untouched because fewer than two weights were live.
    pub skipped_layers: Vec<usize>,
}

impl MaskUpdate {
    pub fn total(&self) -> usize {
        self.positions.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneEvent {
    pub step: usize,
    pub method: PruneMethod,
    pub fraction: f64,
    pub removed_per_layer: Vec<usize>,
    pub skipped_layers: Vec<usize>,
}

fn check_fraction(fraction: f64) -> Result<()> {
    if fraction > 0.0 && fraction < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("prune fraction must be in (0,1), got {fraction}")))
    }
}

fn live_positions(net: &Network, l: usize) -> Vec<usize> {
    let layer = &net.layers()[l];
    (0..layer.weights().len()).filter(|&p| layer.is_live(p)).collect()
}

fn check_scores(net: &Network, scores: &ImportanceScores) -> Result<()> {
    if scores.layers.len() != net.num_layers() {
        return Err(Error::invalid("score layer count differs from network"));
    }
    for (l, (layer, s)) in net.layers().iter().zip(&scores.layers).enumerate() {
        match s {
            Some(m) if m.shape() != layer.weights().shape() => {
                return Err(Error::ShapeMismatch {
                    op: "scores",
                    left: m.shape(),
                    right: layer.weights().shape(),
                })
            }
            None if layer.is_prunable() => return Err(Error::invalid(format!("no scores for prunable layer {l}"))),
            Some(m) => {
                if (0..m.len()).any(|p| layer.is_live(p) && !m.as_slice()[p].is_finite()) {
                    return Err(Error::NonFinite(format!("score at a live position of layer {l}")));
                }
            }
            None => {}
        }
    }
    Ok(())
}

/// Per prunable layer, the `⌊fraction × live⌋` lowest-scoring live weights
/// (ties broken by lower flat index).
pub fn build_mask_layerwise(net: &Network, scores: &ImportanceScores, fraction: f64) -> Result<MaskUpdate> {
    check_fraction(fraction)?;
    check_scores(net, scores)?;
    let mut update = MaskUpdate {
        positions: vec![Vec::new(); net.num_layers()],
        skipped_layers: Vec::new(),
    };
    for (l, s) in scores.layers.iter().enumerate() {
        let Some(s) = s else { continue };
        let mut live = live_positions(net, l);
        if live.len() < 2 {
            log::warn!("layer {l} has {} live weights; skipped", live.len());
            update.skipped_layers.push(l);
            continue;
        }
        let k = (fraction * live.len() as f64).floor() as usize;
        let sv = s.as_slice();
        live.sort_by(|&a, &b| sv[a].total_cmp(&sv[b]).then(a.cmp(&b)));
        let mut chosen = live[..k].to_vec();
        chosen.sort_unstable();
        update.positions[l] = chosen;
    }
    Ok(update)
}

/// Picks candidates in order, refusing any that would leave a layer empty.
fn take_keeping_one(net: &Network, order: impl Iterator<Item = (usize, usize)>, k: usize) -> MaskUpdate {
    let mut live: Vec<usize> = net.layers().iter().map(|l| l.live_count()).collect();
    let mut update = MaskUpdate {
        positions: vec![Vec::new(); net.num_layers()],
        skipped_layers: Vec::new(),
    };
    let mut taken = 0;
    for (l, p) in order {
        if taken == k {
            break;
        }
        if live[l] <= 1 {
            if !update.skipped_layers.contains(&l) {
                log::warn!("layer {l} would be emptied; remaining candidates there skipped");
                update.skipped_layers.push(l);
            }
            continue;
        }
        live[l] -= 1;
        update.positions[l].push(p);
        taken += 1;
    }
    update.positions.iter_mut().for_each(|v| v.sort_unstable());
    update.skipped_layers.sort_unstable();
    update
}

fn all_live(net: &Network) -> Vec<(usize, usize)> {
    net.layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_prunable())
        .flat_map(|(l, _)| live_positions(net, l).into_iter().map(move |p| (l, p)))
        .collect()
}

/// The `⌊fraction × total live⌋` lowest scores across all prunable layers.
pub fn build_mask_global(net: &Network, scores: &ImportanceScores, fraction: f64) -> Result<MaskUpdate> {
    check_fraction(fraction)?;
    check_scores(net, scores)?;
    let mut cand = all_live(net);
    let k = (fraction * cand.len() as f64).floor() as usize;
    let score = |&(l, p): &(usize, usize)| scores.layers[l].as_ref().map_or(f64::INFINITY, |m| m.as_slice()[p]);
    cand.sort_by(|a, b| score(a).total_cmp(&score(b)).then(a.cmp(b)));
    Ok(take_keeping_one(net, cand.into_iter(), k))
}

/// Uniform sample without replacement among all live prunable weights.
pub fn build_mask_random(rng: &mut Rng, net: &Network, fraction: f64) -> Result<MaskUpdate> {
    check_fraction(fraction)?;
    let cand = all_live(net);
    let k = (fraction * cand.len() as f64).floor() as usize;
    let order = rng.permutation(cand.len());
    Ok(take_keeping_one(net, order.into_iter().map(|i| cand[i]), k))
}

pub fn apply_mask_update(net: &mut Network, update: &MaskUpdate, step: usize, method: PruneMethod, fraction: f64) -> Result<PruneEvent> {
    if update.positions.len() != net.num_layers() {
        return Err(Error::invalid("mask update layer count differs from network"));
    }
    let mut removed = vec![0; net.num_layers()];
    for (l, pos) in update.positions.iter().enumerate() {
        if !pos.is_empty() {
            removed[l] = net.prune_positions(l, pos)?;
        }
    }
    Ok(PruneEvent {
        step,
        method,
        fraction,
        removed_per_layer: removed,
        skipped_layers: update.skipped_layers.clone(),
    })
}

/// Stochastic-gate parameters for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HardConcreteGate {
    pub log_alpha: Matrix,
    pub b: f64,
    pub l: f64,
    pub r: f64,
}

pub const HC_DEFAULT_B: f64 = 2.0 / 3.0;
pub const HC_DEFAULT_L: f64 = -0.1;
pub const HC_DEFAULT_R: f64 = 1.1;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl HardConcreteGate {
    pub fn new(log_alpha: Matrix, b: f64, l: f64, r: f64) -> Result<Self> {
        let g = Self { log_alpha, b, l, r };
        g.validate()?;
        Ok(g)
    }

    pub fn with_defaults(log_alpha: Matrix) -> Result<Self> {
        Self::new(log_alpha, HC_DEFAULT_B, HC_DEFAULT_L, HC_DEFAULT_R)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.b > 0.0) || !(self.l < 0.0) || !(self.r > 1.0) {
            return Err(Error::invalid(format!(
                "hard-concrete needs b > 0, l < 0, r > 1 (got b={}, l={}, r={})",
                self.b, self.l, self.r
            )));
        }
        if !self.log_alpha.all_finite() {
            return Err(Error::NonFinite("gate log-alpha".into()));
        }
        Ok(())
    }

    /// `(M, f)` for a single gate given uniform noise `u ∈ (0,1)`.
    pub fn sample_scalar(&self, s: f64, u: f64) -> (f64, f64) {
        let sbar = sigmoid(((u.ln() - (1.0 - u).ln()) + s) / self.b);
        let z = (self.r - self.l) * sbar + self.l;
        let m = z.clamp(0.0, 1.0);
        let f = if (0.0..=1.0).contains(&z) {
            (self.r - self.l) / self.b * sbar * (1.0 - sbar)
        } else {
            0.0
        };
        (m, f)
    }

    pub fn expected_l0_scalar(&self, s: f64) -> f64 {
        sigmoid(s - self.b * (-self.l / self.r).ln())
    }

    /// `clamp((r−l)·σ(S) + l, 0, 1)`, evaluated as `r·σ + l·(1−σ)`.
    pub fn test_mask_scalar(&self, s: f64) -> f64 {
        let p = sigmoid(s);
        (self.r * p + self.l * (1.0 - p)).clamp(0.0, 1.0)
    }
}

/// Draws a stochastic mask and the per-gate factor `∂M/∂S`.
pub fn hc_sample(gate: &HardConcreteGate, rng: &mut Rng) -> (Matrix, Matrix) {
    let (rows, cols) = gate.log_alpha.shape();
    let mut m = Matrix::zeros(rows, cols);
    let mut f = Matrix::zeros(rows, cols);
    for (i, &s) in gate.log_alpha.as_slice().iter().enumerate() {
        let (mi, fi) = gate.sample_scalar(s, rng.uniform_open());
        m.as_mut_slice()[i] = mi;
        f.as_mut_slice()[i] = fi;
    }
    (m, f)
}

/// `Σ σ(S − b·log(−l/r))`.
pub fn hc_expected_l0(gate: &HardConcreteGate) -> f64 {
    gate.log_alpha.as_slice().iter().map(|&s| gate.expected_l0_scalar(s)).sum()
}

/// Gradient of [`hc_expected_l0`] with respect to every `S`.
pub fn hc_expected_l0_grad(gate: &HardConcreteGate) -> Matrix {
    gate.log_alpha.map(|s| {
        let p = gate.expected_l0_scalar(s);
        p * (1.0 - p)
    })
}

pub fn hc_test_mask(gate: &HardConcreteGate) -> Matrix {
    gate.log_alpha.map(|s| gate.test_mask_scalar(s))
}

/// `‖W − M⊙W‖_F`.
pub fn frobenius_distortion(w: &Matrix, mask: &Matrix) -> Result<f64> {
    if w.shape() != mask.shape() {
        return Err(Error::ShapeMismatch {
            op: "frobenius_distortion",
            left: w.shape(),
            right: mask.shape(),
        });
    }
    Ok(w.as_slice()
        .iter()
        .zip(mask.as_slice())
        .map(|(&x, &m)| (x - m * x).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// `sqrt(Σ_l ‖W_l − M_l⊙W_l‖²)` of `reference` weights under `masked`'s masks,
/// over prunable layers.
pub fn total_frobenius_distortion(reference: &Network, masked: &Network) -> Result<f64> {
    if reference.widths() != masked.widths() {
        return Err(Error::invalid("networks differ in widths"));
    }
    let mut total = 0.0;
    for (a, b) in reference.layers().iter().zip(masked.layers()) {
        if a.is_prunable() {
            total += frobenius_distortion(a.weights(), b.mask())?.powi(2);
        }
    }
    Ok(total.sqrt())
}

/// `gᵀδθ + λ·g_Tᵀδθ` summed over layers.
pub fn first_order_loss_change(
    grads: &[Matrix],
    delta_theta: &[Matrix],
    teacher_grads: &[Matrix],
    lambda: f64,
) -> Result<f64> {
    if grads.len() != delta_theta.len() || grads.len() != teacher_grads.len() {
        return Err(Error::invalid("layer counts differ"));
    }
    let mut total = 0.0;
    for ((g, d), t) in grads.iter().zip(delta_theta).zip(teacher_grads) {
        if g.shape() != d.shape() || t.shape() != d.shape() {
            return Err(Error::ShapeMismatch {
                op: "first_order_loss_change",
                left: g.shape(),
                right: d.shape(),
            });
        }
        total += crate::tensor::dot(g.as_slice(), d.as_slice()) + lambda * crate::tensor::dot(t.as_slice(), d.as_slice());
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::MaskedLinear;
    use crate::tensor::{seeded_normal, Rng};
    use proptest::prelude::*;

    fn one_layer_net(weights: &[f64], rows: usize, cols: usize) -> Network {
        let prunable = MaskedLinear::new(Matrix::from_vec(rows, cols, weights.to_vec()).unwrap(), vec![0.0; rows], true).unwrap();
        let head = MaskedLinear::new(Matrix::filled(2, rows, 1.0), vec![0.0; 2], false).unwrap();
        Network::from_layers(vec![prunable, head], crate::network::Role::Student).unwrap()
    }

    fn layer_scores(s: &ImportanceScores, l: usize) -> Vec<f64> {
        s.layers[l].as_ref().unwrap().as_slice().to_vec()
    }

    /// All subsets of `0..n` of size `k`.
    fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
        (0u32..1 << n)
            .filter(|m| m.count_ones() as usize == k)
            .map(|m| (0..n).filter(|i| m >> i & 1 == 1).collect())
            .collect()
    }

    #[test]
    fn magnitude_scores() {
        let net = one_layer_net(&[0.1, -0.5, 0.3, -0.2], 2, 2);
        assert_eq!(layer_scores(&score_magnitude(&net), 0), vec![0.1, 0.5, 0.3, 0.2]);
        assert!(score_magnitude(&net).layers[1].is_none());

        let mut pruned = net.clone();
        pruned.prune_positions(0, &[0]).unwrap();
        let s = score_magnitude(&pruned);
        assert_eq!(s.layers[0].as_ref().unwrap().as_slice()[0], f64::INFINITY);
        let upd = build_mask_layerwise(&pruned, &s, 0.5).unwrap();
        assert!(!upd.positions[0].contains(&0));
    }

    #[test]
    fn layerwise_examples() {
        let net = one_layer_net(&[0.1, 0.5, 0.3, 0.2], 2, 2);
        let upd = build_mask_layerwise(&net, &score_magnitude(&net), 0.5).unwrap();
        assert_eq!(upd.positions[0], vec![0, 3]);
        let upd = build_mask_layerwise(&net, &score_magnitude(&net), 0.1).unwrap();
        assert_eq!(upd.total(), 0);
        assert!(build_mask_layerwise(&net, &score_magnitude(&net), 1.0).is_err());
        assert!(build_mask_layerwise(&net, &score_magnitude(&net), 0.0).is_err());
    }

    #[test]
    fn ties_break_by_lower_index() {
        let net = one_layer_net(&[0.2, 0.2, 0.2, 0.2], 2, 2);
        let upd = build_mask_layerwise(&net, &score_magnitude(&net), 0.5).unwrap();
        assert_eq!(upd.positions[0], vec![0, 1]);
    }

    #[test]
    fn magnitude_rank_matches_sort_oracle() {
        let mut rng = Rng::new(3);
        let net = Network::new(&[5, 7, 3], &mut rng).unwrap();
        let s = score_magnitude(&net);
        let w = net.layers()[0].weights().as_slice();
        let mut oracle: Vec<usize> = (0..w.len()).collect();
        oracle.sort_by(|&a, &b| w[a].abs().partial_cmp(&w[b].abs()).unwrap());
        assert_eq!(crate::tensor::argsort(&layer_scores(&s, 0)).unwrap(), oracle);
    }

    #[test]
    fn small_layers_are_skipped() {
        let mut net = one_layer_net(&[0.1, 0.5, 0.3, 0.2], 2, 2);
        net.prune_positions(0, &[0, 1, 2]).unwrap();
        let upd = build_mask_layerwise(&net, &score_magnitude(&net), 0.5).unwrap();
        assert_eq!(upd.skipped_layers, vec![0]);
        assert_eq!(upd.total(), 0);
    }

    #[test]
    fn repeated_steps_follow_floor_recurrence() {
        let mut net = Network::new(&[10, 20, 10, 3], &mut Rng::new(1)).unwrap();
        let mut expected: Vec<usize> = vec![200, 200];
        for _ in 0..15 {
            let upd = build_mask_layerwise(&net, &score_magnitude(&net), 0.1).unwrap();
            apply_mask_update(&mut net, &upd, 0, PruneMethod::Magnitude, 0.1).unwrap();
            for e in expected.iter_mut() {
                *e -= (0.1 * *e as f64).floor() as usize;
            }
            let live: Vec<usize> = net.layers()[..2].iter().map(|l| l.live_count()).collect();
            assert_eq!(live, expected);
        }
        let frac = net.count_remaining().fraction;
        assert!((frac - 0.9f64.powi(15)).abs() < 0.03, "{frac}");
    }

    #[test]
    fn global_examples() {
        let a = MaskedLinear::new(Matrix::from_vec(1, 2, vec![0.1, 0.9]).unwrap(), vec![0.0], true).unwrap();
        let b = MaskedLinear::new(Matrix::from_vec(2, 1, vec![0.2, 0.05]).unwrap(), vec![0.0; 2], true).unwrap();
        let head = MaskedLinear::new(Matrix::filled(2, 2, 1.0), vec![0.0; 2], false).unwrap();
        let net = Network::from_layers(vec![a, b, head], crate::network::Role::Student).unwrap();
        let upd = build_mask_global(&net, &score_magnitude(&net), 0.5).unwrap();
        assert_eq!(upd.positions, vec![vec![0], vec![1], vec![]]);
    }

    #[test]
    fn global_counts_are_exact() {
        let mut net = Network::new(&[8, 16, 16, 4], &mut Rng::new(9)).unwrap();
        for _ in 0..10 {
            let live = net.count_remaining().live;
            let upd = build_mask_global(&net, &score_magnitude(&net), 0.1).unwrap();
            assert_eq!(upd.total(), (0.1 * live as f64).floor() as usize);
            apply_mask_update(&mut net, &upd, 0, PruneMethod::GlobalMagnitude, 0.1).unwrap();
        }
    }

    #[test]
    fn global_matches_layerwise_on_equal_distributions() {
        // both layers hold the same multiset of magnitudes
        let vals: Vec<f64> = (1..=16).map(|v| v as f64 / 16.0).collect();
        let mut rev = vals.clone();
        rev.reverse();
        let a = MaskedLinear::new(Matrix::from_vec(4, 4, vals).unwrap(), vec![0.0; 4], true).unwrap();
        let b = MaskedLinear::new(Matrix::from_vec(4, 4, rev).unwrap(), vec![0.0; 4], true).unwrap();
        let head = MaskedLinear::new(Matrix::filled(2, 4, 1.0), vec![0.0; 2], false).unwrap();
        let net = Network::from_layers(vec![a, b, head], crate::network::Role::Student).unwrap();
        for f in [0.1, 0.25, 0.5, 0.75, 0.9] {
            let g = build_mask_global(&net, &score_magnitude(&net), f).unwrap();
            let l = build_mask_layerwise(&net, &score_magnitude(&net), f).unwrap();
            for i in 0..2 {
                assert!((g.positions[i].len() as i64 - l.positions[i].len() as i64).abs() <= 1);
            }
        }
    }

    #[test]
    fn global_never_empties_a_layer() {
        let a = MaskedLinear::new(Matrix::from_vec(1, 2, vec![1e-6, 2e-6]).unwrap(), vec![0.0], true).unwrap();
        let b = MaskedLinear::new(Matrix::from_vec(2, 1, vec![5.0, 6.0]).unwrap(), vec![0.0; 2], true).unwrap();
        let head = MaskedLinear::new(Matrix::filled(2, 2, 1.0), vec![0.0; 2], false).unwrap();
        let net = Network::from_layers(vec![a, b, head], crate::network::Role::Student).unwrap();
        let upd = build_mask_global(&net, &score_magnitude(&net), 0.75).unwrap();
        assert_eq!(upd.positions[0], vec![0]);
        assert_eq!(upd.positions[1], vec![0]);
        assert_eq!(upd.total(), 2);
        assert_eq!(upd.skipped_layers, vec![0, 1]);
    }

    #[test]
    fn random_masks() {
        let net = Network::new(&[10, 20, 10, 3], &mut Rng::new(2)).unwrap();
        let a = build_mask_random(&mut Rng::new(5), &net, 0.3).unwrap();
        let b = build_mask_random(&mut Rng::new(5), &net, 0.3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.total(), 120);

        let eps = 0.05;
        let upd = build_mask_random(&mut Rng::new(6), &net, 1.0 - eps).unwrap();
        let left = 400 - upd.total();
        assert_eq!(left, (eps * 400.0f64).ceil() as usize);
    }

    #[test]
    fn random_per_layer_counts_are_hypergeometric() {
        // layer sizes 200 and 200; pruning k=120 of N=400
        let net = Network::new(&[10, 20, 10, 3], &mut Rng::new(2)).unwrap();
        let (n, big_k, k) = (400.0, 200.0, 120.0);
        let mean = k * big_k / n;
        let var = k * (big_k / n) * (1.0 - big_k / n) * (n - k) / (n - 1.0);
        let seeds = 100;
        let avg = (0..seeds)
            .map(|s| build_mask_random(&mut Rng::new(1000 + s), &net, 0.3).unwrap().positions[0].len() as f64)
            .sum::<f64>()
            / seeds as f64;
        assert!((avg - mean).abs() < 3.0 * (var / seeds as f64).sqrt(), "{avg} vs {mean}");
    }

    #[test]
    fn taylor_and_gradient_scores() {
        let net = one_layer_net(&[1.0, -0.1], 1, 2);
        let mut acc = GradientAccumulator::new(&net);
        let mut g = Gradients::zeros_like(&net);
        g.weights[0] = Matrix::from_vec(1, 2, vec![0.01, 2.0]).unwrap();
        acc.add(&g).unwrap();
        let s = layer_scores(&score_taylor(&net, &acc), 0);
        assert!((s[0] - 0.01).abs() < 1e-15 && (s[1] - 0.2).abs() < 1e-15);
        let upd = build_mask_layerwise(&net, &score_taylor(&net, &acc), 0.5).unwrap();
        assert_eq!(upd.positions[0], vec![0]);

        let zero = one_layer_net(&[0.0, 1.0], 1, 2);
        let mut acc0 = GradientAccumulator::new(&zero);
        acc0.add(&g).unwrap();
        assert_eq!(layer_scores(&score_taylor(&zero, &acc0), 0)[0], 0.0);

        // gradient accumulation is additive across batches
        let mut g2 = Gradients::zeros_like(&net);
        g2.weights[0] = Matrix::from_vec(1, 2, vec![-0.5, 0.0]).unwrap();
        acc.add(&g2).unwrap();
        assert_eq!(layer_scores(&score_gradient(&net, &acc), 0), vec![0.51, 2.0]);

        let mut bad = Gradients::zeros_like(&net);
        bad.weights[0].as_mut_slice()[0] = f64::NAN;
        assert!(acc.add(&bad).is_err());
    }

    #[test]
    fn lookahead_reduces_to_magnitude_with_one_prunable_layer() {
        let net = Network::new(&[4, 6, 3], &mut Rng::new(4)).unwrap();
        assert_eq!(layer_scores(&score_lookahead(&net), 0), layer_scores(&score_magnitude(&net), 0));
    }

    #[test]
    fn lookahead_matches_path_product_oracle() {
        let net = Network::new(&[3, 4, 5, 4, 2], &mut Rng::new(8)).unwrap();
        let s = score_lookahead(&net);
        let w: Vec<&Matrix> = net.layers().iter().map(|l| l.weights()).collect();
        for l in 0..3 {
            for i in 0..w[l].rows() {
                for j in 0..w[l].cols() {
                    let mut expected = w[l].get(i, j).abs();
                    if l > 0 {
                        expected *= (0..w[l - 1].cols()).map(|c| w[l - 1].get(j, c).powi(2)).sum::<f64>().sqrt();
                    }
                    if l < 2 {
                        expected *= (0..w[l + 1].rows()).map(|r| w[l + 1].get(r, i).powi(2)).sum::<f64>().sqrt();
                    }
                    let got = s.layers[l].as_ref().unwrap().get(i, j);
                    assert!((got - expected).abs() < 1e-12 * expected.max(1.0));
                }
            }
        }
    }

    #[test]
    fn lookahead_dead_downstream_column_zeros_upstream() {
        let mut net = Network::new(&[3, 4, 5, 2], &mut Rng::new(10)).unwrap();
        // neuron 2 of layer 0's output feeds column 2 of layer 1
        let col: Vec<usize> = (0..5).map(|r| r * 4 + 2).collect();
        net.prune_positions(1, &col).unwrap();
        let s = score_lookahead(&net);
        for j in 0..3 {
            assert_eq!(s.layers[0].as_ref().unwrap().get(2, j), 0.0);
        }
    }

    #[test]
    fn lamp_examples() {
        let net = one_layer_net(&[1.0, 1.0], 1, 2);
        assert_eq!(layer_scores(&score_lamp(&net), 0), vec![0.5, 1.0]);

        let net = Network::new(&[4, 5, 3, 2], &mut Rng::new(12)).unwrap();
        let s = score_lamp(&net);
        for l in 0..2 {
            let sc = layer_scores(&s, l);
            let w = net.layers()[l].weights().as_slice();
            let top = (0..w.len()).max_by(|&a, &b| w[a].abs().total_cmp(&w[b].abs()).then(b.cmp(&a))).unwrap();
            assert_eq!(sc[top], 1.0);
        }
    }

    #[test]
    fn lamp_matches_trailing_sum_oracle() {
        let w = [0.3, -0.1, 0.7, 0.2, -0.5, 0.05];
        let net = one_layer_net(&w, 2, 3);
        let got = layer_scores(&score_lamp(&net), 0);
        for u in 0..6 {
            let wu = w[u] * w[u];
            let tail: f64 = w.iter().map(|v| v * v).filter(|&v| v >= wu).sum();
            assert!((got[u] - wu / tail).abs() < 1e-15);
        }
    }

    fn squared_combined(w: &[f64], t: &[f64], pruned: &[usize], lambda: f64) -> f64 {
        (0..w.len())
            .map(|j| {
                if pruned.contains(&j) {
                    w[j] * w[j] + lambda * t[j] * t[j]
                } else {
                    lambda * (t[j] - w[j]).powi(2)
                }
            })
            .sum()
    }

    #[test]
    fn fdm_sdp_reduces_to_magnitude() {
        let s = Network::new(&[4, 6, 3], &mut Rng::new(13)).unwrap();
        let t = s.clone();
        let mbp = build_mask_layerwise(&s, &score_magnitude(&s), 0.4).unwrap();
        for lambda in [0.0, 0.5, 3.0] {
            let sc = score_fdm_sdp(&s, &t, lambda).unwrap();
            let w = s.layers()[0].weights().as_slice();
            for (a, b) in layer_scores(&sc, 0).iter().zip(w) {
                assert!((a - (1.0 + lambda) * b * b).abs() < 1e-15);
            }
            assert_eq!(build_mask_layerwise(&s, &sc, 0.4).unwrap(), mbp);
        }
        let other = Network::new(&[4, 5, 3], &mut Rng::new(1)).unwrap();
        assert!(score_fdm_sdp(&s, &other, 1.0).is_err());
    }

    #[test]
    fn fdm_sdp_greedy_is_exhaustive_minimizer() {
        for seed in 0..20 {
            let mut rng = Rng::new(500 + seed);
            let (rows, cols) = (3, 4);
            let w = seeded_normal(&mut rng, rows, cols, 0.0, 1.0).unwrap();
            let t = w.add(&seeded_normal(&mut rng, rows, cols, 0.0, 0.5).unwrap()).unwrap();
            let student = one_layer_net(w.as_slice(), rows, cols);
            let teacher = one_layer_net(t.as_slice(), rows, cols);
            for lambda in [0.0, 0.5, 1.0, 5.0] {
                let sc = score_fdm_sdp(&student, &teacher, lambda).unwrap();
                for k in 1..12 {
                    let f = (k as f64 + 0.5) / 12.0;
                    let upd = build_mask_layerwise(&student, &sc, f).unwrap();
                    assert_eq!(upd.positions[0].len(), k);
                    let greedy = squared_combined(w.as_slice(), t.as_slice(), &upd.positions[0], lambda);
                    let best = subsets(12, k)
                        .iter()
                        .map(|p| squared_combined(w.as_slice(), t.as_slice(), p, lambda))
                        .fold(f64::INFINITY, f64::min);
                    assert!(greedy <= best + 1e-12, "seed {seed} λ {lambda} k {k}");
                }
            }
        }
    }

    #[test]
    fn mbp_minimizes_frobenius_distortion() {
        for seed in 0..10 {
            let w = seeded_normal(&mut Rng::new(seed), 2, 5, 0.0, 1.0).unwrap();
            let net = one_layer_net(w.as_slice(), 2, 5);
            for k in 1..10 {
                let f = (k as f64 + 0.5) / 10.0;
                let upd = build_mask_layerwise(&net, &score_magnitude(&net), f).unwrap();
                let mask_of = |p: &[usize]| {
                    let mut m = Matrix::filled(2, 5, 1.0);
                    p.iter().for_each(|&i| m.as_mut_slice()[i] = 0.0);
                    m
                };
                let got = frobenius_distortion(&w, &mask_of(&upd.positions[0])).unwrap();
                let best = subsets(10, k)
                    .iter()
                    .map(|p| frobenius_distortion(&w, &mask_of(p)).unwrap())
                    .fold(f64::INFINITY, f64::min);
                assert!(got <= best + 1e-12);
            }
        }
    }

    #[test]
    fn frobenius_examples() {
        let w = Matrix::from_vec(1, 2, vec![3.0, 4.0]).unwrap();
        assert_eq!(frobenius_distortion(&w, &Matrix::filled(1, 2, 1.0)).unwrap(), 0.0);
        assert_eq!(frobenius_distortion(&w, &Matrix::zeros(1, 2)).unwrap(), 5.0);
        assert!(frobenius_distortion(&w, &Matrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn hard_concrete_limits_and_closed_forms() {
        let g = HardConcreteGate::with_defaults(Matrix::zeros(1, 1)).unwrap();
        assert_eq!(g.test_mask_scalar(0.0), 0.5);
        let expected = 1.0 / (1.0 + (-(2.0 / 3.0) * 11f64.ln()).exp());
        assert!((g.expected_l0_scalar(0.0) - expected).abs() < 1e-15);
        assert!((g.expected_l0_scalar(0.0) - 0.832).abs() < 1e-3);

        for u in [1e-6, 0.3, 0.5, 0.9, 1.0 - 1e-6] {
            assert_eq!(g.sample_scalar(60.0, u).0, 1.0);
            assert_eq!(g.sample_scalar(-60.0, u).0, 0.0);
        }
        assert!(g.expected_l0_scalar(-50.0) < 1e-20);

        // boundaries of the deterministic mask
        let lo = (-g.l / (g.r - g.l)).ln() - (1.0 - (-g.l / (g.r - g.l))).ln();
        assert_eq!(g.test_mask_scalar(lo - 1e-9), 0.0);
        let hi_p: f64 = (1.0 - g.l) / (g.r - g.l);
        let hi = hi_p.ln() - (1.0 - hi_p).ln();
        assert_eq!(g.test_mask_scalar(hi + 1e-9), 1.0);

        assert!(HardConcreteGate::new(Matrix::zeros(1, 1), 0.0, -0.1, 1.1).is_err());
        assert!(HardConcreteGate::new(Matrix::zeros(1, 1), 0.5, 0.1, 1.1).is_err());
        assert!(HardConcreteGate::new(Matrix::zeros(1, 1), 0.5, -0.1, 0.9).is_err());
    }

    #[test]
    fn hard_concrete_monte_carlo() {
        let mut rng = Rng::new(77);
        for s in [-2.0, -1.0, 0.0, 1.0, 2.0] {
            let g = HardConcreteGate::with_defaults(Matrix::filled(1, 1, s)).unwrap();
            let n = 100_000;
            let hits = (0..n).filter(|_| hc_sample(&g, &mut rng).0.as_slice()[0] > 0.0).count();
            let p = hits as f64 / n as f64;
            assert!((p - hc_expected_l0(&g)).abs() < 0.01, "S={s}: {p} vs {}", hc_expected_l0(&g));
        }
    }

    #[test]
    fn gate_factor_matches_derivative() {
        let g = HardConcreteGate::with_defaults(Matrix::zeros(1, 1)).unwrap();
        for (s, u) in [(0.0, 0.4), (0.5, 0.7), (-0.3, 0.35)] {
            let (m, f) = g.sample_scalar(s, u);
            let h = 1e-6;
            let num = (g.sample_scalar(s + h, u).0 - g.sample_scalar(s - h, u).0) / (2.0 * h);
            assert!(m > 0.0 && m < 1.0);
            assert!((f - num).abs() < 1e-6);
        }
        let (m, f) = g.sample_scalar(5.0, 0.9);
        assert_eq!((m, f), (1.0, 0.0));
    }

    #[test]
    fn first_order_examples() {
        let g = vec![Matrix::from_vec(1, 2, vec![1.0, -2.0]).unwrap()];
        let t = vec![Matrix::from_vec(1, 2, vec![0.5, 0.5]).unwrap()];
        let zero = vec![Matrix::zeros(1, 2)];
        assert_eq!(first_order_loss_change(&g, &zero, &t, 3.0).unwrap(), 0.0);
        let d = vec![Matrix::from_vec(1, 2, vec![-0.1, 0.0]).unwrap()];
        assert!((first_order_loss_change(&g, &d, &t, 0.0).unwrap() + 0.1).abs() < 1e-15);
        assert!((first_order_loss_change(&g, &d, &t, 2.0).unwrap() + 0.2).abs() < 1e-15);
    }

    #[test]
    fn first_order_matches_direct_evaluation() {
        use crate::losses::cross_entropy;
        let mut rng = Rng::new(40);
        let net = Network::new(&[4, 6, 3], &mut rng).unwrap();
        let x = seeded_normal(&mut rng, 16, 4, 0.0, 1.0).unwrap();
        let y: Vec<usize> = (0..16).map(|i| i % 3).collect();
        let loss = |n: &Network| cross_entropy(&n.logits(&x).unwrap(), &y, 0.0).unwrap().value;
        let trace = net.forward(&x).unwrap();
        let ce = cross_entropy(trace.logits(), &y, 0.0).unwrap();
        let grads = net.backward(&trace, &ce.grad).unwrap();

        let mut delta: Vec<Matrix> = grads.weights.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
        delta[0] = seeded_normal(&mut rng, 6, 4, 0.0, 1e-4).unwrap();
        let mut moved = net.clone();
        let w = moved.weight_mut(0);
        *w = w.add(&delta[0]).unwrap();
        let actual = loss(&moved) - loss(&net);
        let zeros: Vec<Matrix> = delta.iter().map(|d| Matrix::zeros(d.rows(), d.cols())).collect();
        let est = first_order_loss_change(&grads.weights, &delta, &zeros, 1.0).unwrap();
        assert!((est - actual).abs() < 0.1 * actual.abs(), "{est} vs {actual}");
    }

    proptest! {
        #[test]
        fn masks_are_cumulative(seed in 0u64..200, method_idx in 0usize..5, f in 0.05f64..0.6) {
            let mut net = Network::new(&[5, 8, 6, 3], &mut Rng::new(seed)).unwrap();
            let teacher = net.clone();
            let mut rng = Rng::new(seed + 1);
            for step in 0..4 {
                let before = net.masks();
                let upd = match method_idx {
                    0 => build_mask_layerwise(&net, &score_magnitude(&net), f).unwrap(),
                    1 => build_mask_global(&net, &score_magnitude(&net), f).unwrap(),
                    2 => build_mask_random(&mut rng, &net, f).unwrap(),
                    3 => build_mask_global(&net, &score_lamp(&net), f).unwrap(),
                    _ => build_mask_layerwise(&net, &score_fdm_sdp(&net, &teacher, 1.0).unwrap(), f).unwrap(),
                };
                let ev = apply_mask_update(&mut net, &upd, step, PruneMethod::Magnitude, f).unwrap();
                prop_assert_eq!(ev.removed_per_layer.iter().sum::<usize>(), upd.total());
                for (a, b) in before.iter().zip(net.masks()) {
                    prop_assert!(a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| y <= x));
                }
            }
        }

        #[test]
        fn expected_l0_is_monotone(s in -10.0f64..10.0, d in 0.0f64..5.0) {
            let g = HardConcreteGate::with_defaults(Matrix::zeros(1, 1)).unwrap();
            prop_assert!(g.expected_l0_scalar(s + d) >= g.expected_l0_scalar(s));
        }

        #[test]
        fn gate_factor_zero_outside_unit_interval(s in -6.0f64..6.0, u in 0.001f64..0.999) {
            let g = HardConcreteGate::with_defaults(Matrix::zeros(1, 1)).unwrap();
            let sbar = sigmoid(((u.ln() - (1.0 - u).ln()) + s) / g.b);
            let z = (g.r - g.l) * sbar + g.l;
            let (_, f) = g.sample_scalar(s, u);
            prop_assert_eq!(f == 0.0, !(0.0..=1.0).contains(&z));
        }
    }
}
