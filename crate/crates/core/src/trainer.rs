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

//! Teacher training and the iterative prune / retrain loop.

use crate::analysis::position_overlap;
use crate::data::{minibatches, sequential_batches, LabeledBatch, LabeledDataset};
use crate::error::{Error, Result};
use crate::losses::{
    ce_objective, cross_entropy, sdp_cc_objective, sdp_cos_objective, sdp_kld_objective, LossMode, LossWeights,
    ObjectiveOutput,
};
use crate::network::{sgd_step, Network, OptimizerState, Regularizer, Remaining};
use crate::pruning::{
    apply_mask_update, build_mask_global, build_mask_layerwise, build_mask_random, hc_expected_l0,
    hc_expected_l0_grad, hc_sample, hc_test_mask, score_fdm_sdp, score_gradient, score_l0, score_lamp,
    score_lookahead, score_magnitude, score_taylor, GradientAccumulator, HardConcreteGate, MaskUpdate, PruneEvent,
    PruneMethod, Selection,
};
use crate::tensor::{Matrix, Rng};

/// Fraction of the pre-prune dev accuracy that counts as recovered.
pub const RECOVERY_THRESHOLD: f64 = 0.95;

const EVAL_BATCH: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            clip_norm: 1.0,
            batch_size: 64,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid(format!("clip norm must be > 0, got {}", self.clip_norm)));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid(format!("batch size must be >= 2, got {}", self.batch_size)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeacherConfig {
    pub optim: OptimConfig,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub label_smoothing: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig::default(),
            max_epochs: 60,
            patience: 5,
            min_delta: 1e-4,
            label_smoothing: 0.0,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if self.max_epochs == 0 {
            return Err(Error::invalid("teacher epochs must be >= 1"));
        }
        if self.patience == 0 {
            return Err(Error::invalid("patience must be >= 1"));
        }
        if !(self.min_delta >= 0.0) {
            return Err(Error::invalid("min_delta must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::invalid(format!("label smoothing must be in [0,1), got {}", self.label_smoothing)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleKind {
    Uniform,
    /// Cumulative density follows a cubic decay to `final_density`.
    Cubic { final_density: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub num_prune_steps: usize,
    pub fraction_per_step: f64,
    pub epochs_per_step: usize,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            num_prune_steps: 15,
            fraction_per_step: 0.10,
            epochs_per_step: 10,
            kind: ScheduleKind::Uniform,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_prune_steps == 0 {
            return Err(Error::invalid("prune steps must be >= 1"));
        }
        if self.epochs_per_step == 0 {
            return Err(Error::invalid("epochs per step must be >= 1"));
        }
        if !(self.fraction_per_step > 0.0 && self.fraction_per_step < 1.0) {
            return Err(Error::invalid(format!(
                "fraction per step must be in (0,1), got {}",
                self.fraction_per_step
            )));
        }
        if let ScheduleKind::Cubic { final_density } = self.kind {
            if !(final_density > 0.0 && final_density < 1.0) {
                return Err(Error::invalid(format!("final density must be in (0,1), got {final_density}")));
            }
        }
        Ok(())
    }

    /// Target cumulative density after `t` steps under the cubic schedule.
    pub fn cubic_density(final_density: f64, t: usize, total: usize) -> f64 {
        let x = 1.0 - t as f64 / total as f64;
        final_density + (1.0 - final_density) * x * x * x
    }
}

/// Fraction of the remaining weights to prune at `step_index` (0-based).
pub fn step_fraction(schedule: &ScheduleConfig, step_index: usize) -> Result<f64> {
    schedule.validate()?;
    if step_index >= schedule.num_prune_steps {
        return Err(Error::invalid(format!(
            "step {step_index} out of range for {} steps",
            schedule.num_prune_steps
        )));
    }
    Ok(match schedule.kind {
        ScheduleKind::Uniform => schedule.fraction_per_step,
        ScheduleKind::Cubic { final_density } => {
            let t = schedule.num_prune_steps;
            let a = ScheduleConfig::cubic_density(final_density, step_index, t);
            let b = ScheduleConfig::cubic_density(final_density, step_index + 1, t);
            1.0 - b / a
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct L0Config {
    /// Weight of the mean expected gate count in the objective.
    pub lambda: f64,
    pub gate_learning_rate: f64,
    /// Initial log-alpha; large enough that every deterministic gate is 1.
    pub init_log_alpha: f64,
}

impl Default for L0Config {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            gate_learning_rate: 0.1,
            init_log_alpha: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudentConfig {
    pub optim: OptimConfig,
    pub loss_mode: LossMode,
    pub weights: LossWeights,
    pub method: PruneMethod,
    pub schedule: ScheduleConfig,
    /// Penalty coefficient for the L1 / L2 methods.
    pub regularizer_coeff: f64,
    pub l0: L0Config,
    pub fdm_lambda: f64,
    /// Compute teacher outputs once over the training split instead of per batch.
    pub cache_teacher: bool,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig {
                learning_rate: 0.01,
                ..OptimConfig::default()
            },
            loss_mode: LossMode::SdpKld,
            weights: LossWeights::default(),
            method: PruneMethod::Magnitude,
            schedule: ScheduleConfig::default(),
            regularizer_coeff: 1e-4,
            l0: L0Config::default(),
            fdm_lambda: 1.0,
            cache_teacher: false,
        }
    }
}

impl StudentConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.weights.validate()?;
        self.schedule.validate()?;
        if !(self.regularizer_coeff >= 0.0) || !self.regularizer_coeff.is_finite() {
            return Err(Error::invalid("regularizer coefficient must be >= 0"));
        }
        if !(self.fdm_lambda >= 0.0) || !self.fdm_lambda.is_finite() {
            return Err(Error::invalid("fdm lambda must be >= 0"));
        }
        if !(self.l0.lambda >= 0.0) || !(self.l0.gate_learning_rate > 0.0) || !self.l0.init_log_alpha.is_finite() {
            return Err(Error::invalid("l0 settings: lambda >= 0, gate learning rate > 0, finite init"));
        }
        Ok(())
    }

    fn regularizer(&self) -> Regularizer {
        match self.method {
            PruneMethod::L1 => Regularizer::L1(self.regularizer_coeff),
            PruneMethod::L2 => Regularizer::L2(self.regularizer_coeff),
            _ => Regularizer::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub total: f64,
    pub ce: f64,
    pub kld: f64,
    pub cc: f64,
    pub cos: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 0 for teacher training, otherwise the prune step this epoch retrains after.
    pub step: usize,
    /// 1-based within the step.
    pub epoch: usize,
    pub train: LossComponents,
    pub dev: Evaluation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub fraction: f64,
    pub event: PruneEvent,
    pub pre_prune: Evaluation,
    pub post_prune: Evaluation,
    pub post_retrain: Evaluation,
    /// First retraining epoch reaching the recovery threshold; 0 if pruning
    /// did not drop below it, `None` if never reached.
    pub recovery_epochs: Option<usize>,
    pub remaining: Remaining,
    /// Jaccard overlap between this step's pruned positions and what layerwise
    /// magnitude pruning would have chosen on the same network.
    pub overlap_vs_mbp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub method: PruneMethod,
    pub loss_mode: LossMode,
    pub initial: Evaluation,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub teacher_queries: usize,
}

impl RunRecord {
    /// Line-oriented text rendering; identical runs give identical text.
    pub fn summary_text(&self) -> String {
        let mut s = format!(
            "method {}\nloss_mode {}\nteacher_queries {}\ninitial acc {:e} loss {:e}\n",
            self.method.name(),
            self.loss_mode.name(),
            self.teacher_queries,
            self.initial.accuracy,
            self.initial.loss
        );
        for e in &self.epochs {
            s += &format!(
                "epoch step {} epoch {} total {:e} ce {:e} kld {:e} cc {:e} cos {:e} dev_acc {:e} dev_loss {:e}\n",
                e.step, e.epoch, e.train.total, e.train.ce, e.train.kld, e.train.cc, e.train.cos, e.dev.accuracy, e.dev.loss
            );
        }
        for st in &self.steps {
            s += &format!(
                "step {} fraction {:e} removed {:?} pre {:e} post {:e} retrained {:e} recovery {} remaining {}/{} overlap {:e}\n",
                st.step,
                st.fraction,
                st.event.removed_per_layer,
                st.pre_prune.accuracy,
                st.post_prune.accuracy,
                st.post_retrain.accuracy,
                st.recovery_epochs.map_or("unrecovered".to_string(), |r| r.to_string()),
                st.remaining.live,
                st.remaining.total,
                st.overlap_vs_mbp
            );
        }
        s
    }
}

/// Deterministic full pass: accuracy and mean cross-entropy.
pub fn evaluate(net: &Network, data: &LabeledDataset) -> Result<Evaluation> {
    evaluate_gated(net, data, None)
}

pub fn evaluate_gated(net: &Network, data: &LabeledDataset, gates: Option<&[Option<Matrix>]>) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty split"));
    }
    let (mut correct, mut loss_sum) = (0usize, 0.0);
    for batch in sequential_batches(data, EVAL_BATCH)? {
        let logits = net.forward_gated(&batch.inputs, gates)?.logits().clone();
        correct += count_correct(&logits, &batch.labels);
        loss_sum += cross_entropy(&logits, &batch.labels, 0.0)?.value * batch.len() as f64;
    }
    // sequential_batches drops a trailing singleton; score it separately
    let covered: usize = sequential_batches(data, EVAL_BATCH)?.iter().map(LabeledBatch::len).sum();
    if covered < data.len() {
        let idx: Vec<usize> = (covered..data.len()).collect();
        let x = data.inputs().select_rows(&idx);
        let y: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();
        let logits = net.forward_gated(&x, gates)?.logits().clone();
        correct += count_correct(&logits, &y);
        loss_sum += cross_entropy(&logits, &y, 0.0)?.value * y.len() as f64;
    }
    Ok(Evaluation {
        accuracy: correct as f64 / data.len() as f64,
        loss: loss_sum / data.len() as f64,
    })
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

fn count_correct(logits: &Matrix, labels: &[usize]) -> usize {
    labels.iter().enumerate().filter(|(r, &y)| argmax(logits.row(*r)) == y).count()
}

#[derive(Debug, Clone)]
pub struct TeacherOutcome {
    /// Frozen snapshot at the best dev epoch.
    pub teacher: Network,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Plain cross-entropy training with dev-accuracy early stopping.
pub fn train_teacher(
    train: &LabeledDataset,
    dev: &LabeledDataset,
    mut net: Network,
    config: &TeacherConfig,
    rng: &Rng,
) -> Result<TeacherOutcome> {
    config.validate()?;
    if net.count_remaining().live != net.count_remaining().total {
        return Err(Error::invalid("teacher training needs an unmasked network"));
    }
    let mut opt = OptimizerState::new(&net, config.optim.learning_rate, config.optim.momentum, config.optim.clip_norm)?;
    let weights = LossWeights {
        label_smoothing: config.label_smoothing,
        ..LossWeights::default()
    };
    let mut batch_rng = rng.split_named("teacher-batches");
    let mut epochs = Vec::new();
    let (mut best, mut best_epoch, mut best_net, mut stale) = (f64::NEG_INFINITY, 0, net.clone(), 0);
    for epoch in 1..=config.max_epochs {
        let mut acc = LossComponents::default();
        let batches = minibatches(train, config.optim.batch_size, &mut batch_rng)?;
        for (b, batch) in batches.iter().enumerate() {
            let trace = net.forward(&batch.inputs)?;
            let out = ce_objective(trace.logits(), &batch.labels, &weights)?;
            if !out.total.is_finite() {
                return Err(Error::Diverged { epoch, batch: b, loss: out.total });
            }
            let grads = net.backward(&trace, &out.logit_grad)?;
            sgd_step(&mut net, &mut opt, grads)?;
            add_components(&mut acc, &out);
        }
        scale_components(&mut acc, batches.len());
        let dev_eval = evaluate(&net, dev)?;
        log::debug!("teacher epoch {epoch}: loss {:.4} dev acc {:.4}", acc.total, dev_eval.accuracy);
        epochs.push(EpochRecord {
            step: 0,
            epoch,
            train: acc,
            dev: dev_eval,
        });
        if dev_eval.accuracy > best + config.min_delta {
            best = dev_eval.accuracy;
            best_epoch = epoch;
            best_net = net.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    Ok(TeacherOutcome {
        teacher: best_net.snapshot_teacher(),
        epochs,
        best_epoch,
    })
}

fn add_components(acc: &mut LossComponents, out: &ObjectiveOutput) {
    acc.total += out.total;
    acc.ce += out.ce;
    acc.kld += out.kld;
    acc.cc += out.cc;
    acc.cos += out.cos;
}

fn scale_components(acc: &mut LossComponents, n: usize) {
    let s = 1.0 / n.max(1) as f64;
    acc.total *= s;
    acc.ce *= s;
    acc.kld *= s;
    acc.cc *= s;
    acc.cos *= s;
}

/// Teacher outputs, either recomputed per batch or read from a cache.
struct TeacherView<'a> {
    teacher: &'a Network,
    cache: Option<(Matrix, Matrix)>,
    queries: usize,
}

impl<'a> TeacherView<'a> {
    fn new(teacher: &'a Network, train: &LabeledDataset, cache: bool, needed: bool) -> Result<Self> {
        let mut view = Self {
            teacher,
            cache: None,
            queries: 0,
        };
        if cache && needed {
            let trace = teacher.forward(train.inputs())?;
            view.queries += 1;
            view.cache = Some((trace.logits().clone(), trace.penultimate().clone()));
        }
        Ok(view)
    }

    fn outputs(&mut self, batch: &LabeledBatch) -> Result<(Matrix, Matrix)> {
        if let Some((logits, hidden)) = &self.cache {
            return Ok((logits.select_rows(&batch.indices), hidden.select_rows(&batch.indices)));
        }
        self.queries += 1;
        let trace = self.teacher.forward(&batch.inputs)?;
        Ok((trace.logits().clone(), trace.penultimate().clone()))
    }
}

/// What the observer sees at the start of a run and after every step.
pub struct Boundary<'a> {
    /// 0 before any pruning.
    pub step: usize,
    /// The student as it computes (deterministic gates folded in).
    pub student: &'a Network,
    /// `None` at step 0.
    pub step_record: Option<&'a StepRecord>,
    /// Retraining epochs of this step.
    pub epochs: &'a [EpochRecord],
}

/// Final student (gates folded) and the run log.
#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub student: Network,
    pub record: RunRecord,
}

struct StudentState {
    net: Network,
    opt: OptimizerState,
    gates: Option<Vec<Option<HardConcreteGate>>>,
}

impl StudentState {
    fn test_gates(&self) -> Option<Vec<Option<Matrix>>> {
        self.gates
            .as_ref()
            .map(|g| g.iter().map(|x| x.as_ref().map(hc_test_mask)).collect())
    }

    fn evaluate(&self, data: &LabeledDataset) -> Result<Evaluation> {
        evaluate_gated(&self.net, data, self.test_gates().as_deref())
    }

    fn effective(&self) -> Result<Network> {
        let mut n = self.net.clone();
        if let Some(g) = self.test_gates() {
            n.fold_gates(&g)?;
        }
        Ok(n)
    }
}

/// Prunes a copy of `teacher` step by step, retraining after every step.
pub fn iterative_prune(
    teacher: &Network,
    train: &LabeledDataset,
    dev: &LabeledDataset,
    config: &StudentConfig,
    rng: &Rng,
    mut observer: impl FnMut(&Boundary<'_>) -> Result<()>,
) -> Result<PruneOutcome> {
    config.validate()?;
    let net = teacher.student_copy();
    let opt = OptimizerState::new(&net, config.optim.learning_rate, config.optim.momentum, config.optim.clip_norm)?;
    let gates = if config.method == PruneMethod::L0 {
        let g = net
            .layers()
            .iter()
            .map(|l| {
                l.is_prunable()
                    .then(|| {
                        HardConcreteGate::with_defaults(Matrix::filled(l.out_dim(), l.in_dim(), config.l0.init_log_alpha))
                    })
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        Some(g)
    } else {
        None
    };
    let mut state = StudentState { net, opt, gates };
    let mut view = TeacherView::new(teacher, train, config.cache_teacher, config.loss_mode.needs_teacher())?;
    let mut batch_rng = rng.split_named("student-batches");
    let mut gate_rng = rng.split_named("gate-noise");
    let mut mask_rng = rng.split_named("random-mask");

    let initial = state.evaluate(dev)?;
    observer(&Boundary {
        step: 0,
        student: &state.effective()?,
        step_record: None,
        epochs: &[],
    })?;
    let mut epochs = Vec::new();
    let mut steps = Vec::new();
    for step in 1..=config.schedule.num_prune_steps {
        let fraction = step_fraction(&config.schedule, step - 1)?;
        let pre_prune = state.evaluate(dev)?;
        let update = select_update(&state, teacher, train, config, fraction, &mut mask_rng)?;
        let mbp = build_mask_layerwise(&state.net, &score_magnitude(&state.net), fraction)?;
        let overlap_vs_mbp = position_overlap(&update.positions, &mbp.positions);
        let event = apply_mask_update(&mut state.net, &update, step, config.method, fraction)?;
        for l in &event.skipped_layers {
            log::warn!("step {step}: layer {l} skipped");
        }
        let post_prune = state.evaluate(dev)?;
        let threshold = RECOVERY_THRESHOLD * pre_prune.accuracy;
        let mut recovery_epochs = (post_prune.accuracy >= threshold).then_some(0);
        let mut last = post_prune;
        for epoch in 1..=config.schedule.epochs_per_step {
            let train_loss = student_epoch(&mut state, &mut view, train, config, &mut batch_rng, &mut gate_rng, step, epoch)?;
            last = state.evaluate(dev)?;
            if recovery_epochs.is_none() && last.accuracy >= threshold {
                recovery_epochs = Some(epoch);
            }
            epochs.push(EpochRecord {
                step,
                epoch,
                train: train_loss,
                dev: last,
            });
        }
        steps.push(StepRecord {
            step,
            fraction,
            event,
            pre_prune,
            post_prune,
            post_retrain: last,
            recovery_epochs,
            remaining: state.net.count_remaining(),
            overlap_vs_mbp,
        });
        let n = config.schedule.epochs_per_step;
        observer(&Boundary {
            step,
            student: &state.effective()?,
            step_record: steps.last(),
            epochs: &epochs[epochs.len() - n..],
        })?;
    }
    let student = state.effective()?;
    Ok(PruneOutcome {
        student,
        record: RunRecord {
            method: config.method,
            loss_mode: config.loss_mode,
            initial,
            epochs,
            steps,
            teacher_queries: view.queries,
        },
    })
}

fn select_update(
    state: &StudentState,
    teacher: &Network,
    train: &LabeledDataset,
    config: &StudentConfig,
    fraction: f64,
    mask_rng: &mut Rng,
) -> Result<MaskUpdate> {
    let net = &state.net;
    let scores = match config.method {
        PruneMethod::Random => return build_mask_random(mask_rng, net, fraction),
        PruneMethod::Magnitude | PruneMethod::GlobalMagnitude | PruneMethod::L1 | PruneMethod::L2 => score_magnitude(net),
        PruneMethod::Gradient => score_gradient(net, &gradient_pass(state, train, config)?),
        PruneMethod::Taylor => score_taylor(net, &gradient_pass(state, train, config)?),
        PruneMethod::L0 => score_l0(net, state.gates.as_deref().unwrap_or(&[]))?,
        PruneMethod::Lookahead => score_lookahead(net),
        PruneMethod::Lamp => score_lamp(net),
        PruneMethod::FdmSdp => score_fdm_sdp(net, teacher, config.fdm_lambda)?,
    };
    match config.method.selection() {
        Selection::Global => build_mask_global(net, &scores, fraction),
        _ => build_mask_layerwise(net, &scores, fraction),
    }
}

/// Cross-entropy gradients over the training split in fixed order.
fn gradient_pass(state: &StudentState, train: &LabeledDataset, config: &StudentConfig) -> Result<GradientAccumulator> {
    let net = &state.net;
    let mut acc = GradientAccumulator::new(net);
    for batch in sequential_batches(train, config.optim.batch_size)? {
        let trace = net.forward(&batch.inputs)?;
        let ce = cross_entropy(trace.logits(), &batch.labels, 0.0)?;
        acc.add(&net.backward(&trace, &ce.grad)?)?;
    }
    Ok(acc)
}

#[allow(clippy::too_many_arguments)]
fn student_epoch(
    state: &mut StudentState,
    view: &mut TeacherView<'_>,
    train: &LabeledDataset,
    config: &StudentConfig,
    batch_rng: &mut Rng,
    gate_rng: &mut Rng,
    step: usize,
    epoch: usize,
) -> Result<LossComponents> {
    let reg = config.regularizer();
    let mut acc = LossComponents::default();
    let batches = minibatches(train, config.optim.batch_size, batch_rng)?;
    let total_gates: usize = state
        .gates
        .as_ref()
        .map_or(0, |g| g.iter().flatten().map(|x| x.log_alpha.len()).sum());
    for (b, batch) in batches.iter().enumerate() {
        let sampled: Option<Vec<Option<(Matrix, Matrix)>>> = state
            .gates
            .as_ref()
            .map(|g| g.iter().map(|x| x.as_ref().map(|x| hc_sample(x, gate_rng))).collect());
        let gate_masks: Option<Vec<Option<Matrix>>> = sampled
            .as_ref()
            .map(|s| s.iter().map(|x| x.as_ref().map(|(m, _)| m.clone())).collect());
        let trace = state.net.forward_gated(&batch.inputs, gate_masks.as_deref())?;
        let mut out = match config.loss_mode {
            LossMode::Ce => ce_objective(trace.logits(), &batch.labels, &config.weights)?,
            mode => {
                let (t_logits, t_hidden) = view.outputs(batch)?;
                match mode {
                    LossMode::SdpKld => sdp_kld_objective(trace.logits(), &t_logits, &batch.labels, &config.weights)?,
                    LossMode::SdpCc => sdp_cc_objective(
                        trace.logits(),
                        &t_logits,
                        trace.penultimate(),
                        &t_hidden,
                        &batch.labels,
                        &config.weights,
                    )?,
                    _ => sdp_cos_objective(trace.logits(), trace.penultimate(), &t_hidden, &batch.labels, &config.weights)?,
                }
            }
        };
        let mut grads = state
            .net
            .backward_with_hidden(&trace, &out.logit_grad, out.hidden_grad.as_ref())?;
        if reg != Regularizer::None {
            let (penalty, pg) = state.net.weight_penalty(reg);
            out.total += penalty;
            grads.weights.iter_mut().zip(pg.weights).try_for_each(|(g, p)| g.add_assign(&p))?;
        }
        if let (Some(gates), Some(sampled)) = (state.gates.as_mut(), sampled.as_ref()) {
            let n = total_gates.max(1) as f64;
            let gate_grads = grads.gates.take().unwrap_or_default();
            for (l, gate) in gates.iter_mut().enumerate() {
                let (Some(gate), Some((_, factor))) = (gate.as_mut(), sampled[l].as_ref()) else {
                    continue;
                };
                out.total += config.l0.lambda * hc_expected_l0(gate) / n;
                let dl0 = hc_expected_l0_grad(gate);
                let task = gate_grads.get(l).and_then(Option::as_ref);
                let mask = state.net.layers()[l].mask().as_slice().to_vec();
                for (i, s) in gate.log_alpha.as_mut_slice().iter_mut().enumerate() {
                    if mask[i] == 0.0 {
                        continue;
                    }
                    let g_task = task.map_or(0.0, |t| t.as_slice()[i] * factor.as_slice()[i]);
                    let g = g_task + config.l0.lambda * dl0.as_slice()[i] / n;
                    *s -= config.l0.gate_learning_rate * g;
                }
            }
        }
        if !out.total.is_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: b,
                loss: out.total,
            });
        }
        sgd_step(&mut state.net, &mut state.opt, grads)
            .map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { epoch, batch: b, loss: f64::NAN },
                other => other,
            })?;
        add_components(&mut acc, &out);
    }
    scale_components(&mut acc, batches.len());
    log::debug!("step {step} epoch {epoch}: loss {:.5}", acc.total);
    Ok(acc)
}
