//! Phase-scheduled training: Adam, a kernel-smoothed convergence
//! criterion, the three-phase warmup / regularize / finetune pipeline for
//! the exponential and l1 surrogates, and the minimax alternating loop
//! for the probabilistic gate formulation.

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::data::Targets;
use crate::loss::{gauss_loss_tape, mse_loss_tape, LossError, LossKind};
use crate::model::{LayerVars, MaskedModel, ModelError};
use crate::pruning::{
    input_bounding_box, magnitude_prune, random_gradient_prune, tamade, PruneError, PruneOutcome,
    TamadeMode,
};
use crate::regularizer::{
    drr_penalty, drr_penalty_tape, l1_penalty, l1_penalty_tape, pmmp_penalty_tape, Method,
    RegularizerSpec,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training plan: {0}")]
    BadPlan(String),
    #[error("non-finite loss {loss} at epoch {epoch} in phase {phase}")]
    NonFinite { phase: usize, epoch: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Prune(#[from] PruneError),
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamSettings {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self { step_size: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Per-tensor first/second moment state with shared step counter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub settings: AdamSettings,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(settings: AdamSettings, shapes: &[(usize, usize)]) -> Self {
        Self {
            settings,
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            t: 0,
        }
    }

    /// Advance the shared step counter; call once per optimization step,
    /// before `apply`.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Bias-corrected moment update of one tensor slot.
    pub fn apply(&mut self, slot: usize, param: &mut Array2<f64>, grad: &Array2<f64>) {
        let s = self.settings;
        let m = &mut self.m[slot];
        let v = &mut self.v[slot];
        m.zip_mut_with(grad, |mi, &g| *mi = s.beta1 * *mi + (1.0 - s.beta1) * g);
        v.zip_mut_with(grad, |vi, &g| *vi = s.beta2 * *vi + (1.0 - s.beta2) * g * g);
        let c1 = 1.0 - s.beta1.powi(self.t as i32);
        let c2 = 1.0 - s.beta2.powi(self.t as i32);
        for ((p, &mi), &vi) in param.iter_mut().zip(m.iter()).zip(v.iter()) {
            let m_hat = mi / c1;
            let v_hat = vi / c2;
            *p -= s.step_size * m_hat / (v_hat.sqrt() + s.epsilon);
        }
    }
}

// ---------------------------------------------------------------------------
// Convergence criterion
// ---------------------------------------------------------------------------

/// Nadaraya-Watson local average with the kernel K(t) = 0.75 (1 - t^2)
/// on |t| <= 1, t = (i - j) / bandwidth.
pub fn epanechnikov_smooth(ys: &[f64], bandwidth: f64) -> Vec<f64> {
    assert!(bandwidth > 0.0 && !ys.is_empty());
    let n = ys.len();
    (0..n)
        .map(|i| {
            let mut num = 0.0;
            let mut den = 0.0;
            for (j, &y) in ys.iter().enumerate() {
                let t = (i as f64 - j as f64) / bandwidth;
                if t.abs() <= 1.0 {
                    let k = 0.75 * (1.0 - t * t);
                    num += k * y;
                    den += k;
                }
            }
            num / den
        })
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn residual_spread(data: &[f64], smooth: &[f64]) -> f64 {
    let resid: Vec<f64> = data.iter().zip(smooth).map(|(d, s)| d - s).collect();
    let mu = mean(&resid);
    (resid.iter().map(|r| (r - mu) * (r - mu)).sum::<f64>() / resid.len() as f64).sqrt()
}

/// Noise-aware plateau detector: with fewer than `w` logged values the
/// answer is false; otherwise the last `w` values are halved into A then
/// B, each smoothed at bandwidth w/4, and training has converged iff
/// mean(B) >= mean(A) - (s_A + s_B)/2 where s is the standard deviation
/// of the data around its smooth.
pub fn convergence_check(trace: &[f64], w: usize) -> bool {
    assert!(w % 2 == 0 && w >= 4, "window must be even and >= 4");
    if trace.len() < w {
        return false;
    }
    let tail = &trace[trace.len() - w..];
    let (a, b) = tail.split_at(w / 2);
    let bandwidth = w as f64 / 4.0;
    let sa = residual_spread(a, &epanechnikov_smooth(a, bandwidth));
    let sb = residual_spread(b, &epanechnikov_smooth(b, bandwidth));
    mean(b) >= mean(a) - (sa + sb) / 2.0
}

// ---------------------------------------------------------------------------
// Plans and traces
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhaseKind {
    Warmup,
    Regularized,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub kind: PhaseKind,
    pub alpha: f64,
    pub max_epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvergenceSettings {
    /// Even window length >= 4 over the logged loss series.
    pub window: usize,
    /// Epochs between checks.
    pub check_every: usize,
    /// Check the train series instead of validation.
    pub on_train: bool,
}

impl Default for ConvergenceSettings {
    fn default() -> Self {
        Self { window: 20, check_every: 5, on_train: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TamadeSettings {
    pub tol: f64,
    pub r: f64,
    pub mode: TamadeMode,
}

impl Default for TamadeSettings {
    fn default() -> Self {
        Self { tol: 0.05, r: 1e-5, mode: TamadeMode::LossRelative }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub optimizer: AdamSettings,
    pub phases: Vec<Phase>,
    /// Minibatch size; 0 trains full-batch.
    pub batch_size: usize,
    pub convergence: ConvergenceSettings,
    pub tamade: TamadeSettings,
    /// Random-gradient-pruning draws after the mask is fixed.
    pub rgp_trials: usize,
    pub seed: u64,
}

impl TrainPlan {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.convergence.window % 2 != 0 || self.convergence.window < 4 {
            return Err(TrainError::BadPlan("convergence window must be even and >= 4".into()));
        }
        if self.convergence.check_every == 0 {
            return Err(TrainError::BadPlan("check_every must be >= 1".into()));
        }
        let finetunes = self.phases.iter().filter(|p| p.kind == PhaseKind::Finetune).count();
        if finetunes != 1 || self.phases.last().map(|p| p.kind) != Some(PhaseKind::Finetune) {
            return Err(TrainError::BadPlan("exactly one FINETUNE phase, last".into()));
        }
        if self.rgp_trials == 0 {
            return Err(TrainError::BadPlan("rgp_trials must be >= 1".into()));
        }
        Ok(())
    }

    /// Three phases with shared defaults; alpha applies to the
    /// regularized phase only.
    pub fn standard(alpha: f64, warmup: usize, regularized: usize, finetune: usize, seed: u64) -> Self {
        Self {
            optimizer: AdamSettings::default(),
            phases: vec![
                Phase { kind: PhaseKind::Warmup, alpha: 0.0, max_epochs: warmup },
                Phase { kind: PhaseKind::Regularized, alpha, max_epochs: regularized },
                Phase { kind: PhaseKind::Finetune, alpha: 0.0, max_epochs: finetune },
            ],
            batch_size: 0,
            convergence: ConvergenceSettings::default(),
            tamade: TamadeSettings::default(),
            rgp_trials: 1,
            seed,
        }
    }
}

/// Per-epoch log of the bare (penalty-free) losses.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub epochs: Vec<usize>,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Epoch at which the regularized phase's convergence criterion fired.
    pub converged_at: Option<usize>,
    /// Global epoch index at which each phase ended.
    pub phase_ends: Vec<usize>,
    pub warnings: Vec<String>,
}

/// One split of a dataset, ready for training.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub x: Array2<f64>,
    pub targets: Targets,
}

impl TrainSet {
    pub fn len(&self) -> usize {
        self.x.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn take(&self, idx: &[usize]) -> (Array2<f64>, Targets) {
        let mut x = Array2::zeros((idx.len(), self.x.dim().1));
        for (row, &i) in idx.iter().enumerate() {
            x.row_mut(row).assign(&self.x.row(i));
        }
        let targets = match &self.targets {
            Targets::Regression(y) => {
                let mut yy = Array2::zeros((idx.len(), y.dim().1));
                for (row, &i) in idx.iter().enumerate() {
                    yy.row_mut(row).assign(&y.row(i));
                }
                Targets::Regression(yy)
            }
            Targets::Classes(l) => Targets::Classes(idx.iter().map(|&i| l[i]).collect()),
        };
        (x, targets)
    }
}

/// Bare loss of the model on a set under the loss kind (MSE, mean
/// cross-entropy bits, or Gaussian bits per sample at the model's sigma).
pub fn bare_loss(model: &MaskedModel, set: &TrainSet, loss_kind: LossKind) -> Result<f64, TrainError> {
    let v = match (&set.targets, loss_kind) {
        (Targets::Regression(y), LossKind::Mse) => crate::loss::mse_loss(model, &set.x, y)?,
        (Targets::Regression(y), LossKind::Gauss) => {
            crate::loss::gauss_mdl_loss(model, &set.x, y, model.sigma())?
        }
        (Targets::Classes(l), LossKind::CrossEntropy) => {
            crate::loss::cross_entropy_bits(model, &set.x, l)?
        }
        _ => return Err(TrainError::Loss(LossError::KindMismatch)),
    };
    Ok(v)
}

enum Penalty {
    None,
    Drr { alpha: f64, beta: f64 },
    Rl1 { alpha: f64 },
}

/// Param leaves for one gradient step: theta per group, optional sigma.
struct StepVars {
    thetas: Vec<Var>,
    log_sigma: Option<Var>,
}

fn forward_with_theta_leaves(
    tape: &mut Tape,
    model: &MaskedModel,
    x: &Array2<f64>,
) -> Result<(StepVars, Var), TrainError> {
    let xv = tape.leaf(x.clone());
    let mut thetas = Vec::new();
    let mut layer_vars = Vec::new();
    for layer in &model.layers {
        let mut eff = Vec::new();
        for group in [&layer.weight, &layer.bias] {
            let theta = tape.leaf(group.theta.clone());
            let mask = tape.leaf(group.mask.clone());
            thetas.push(theta);
            eff.push(tape.mul(theta, mask)?);
        }
        layer_vars.push(LayerVars { weight: eff[0], bias: eff[1] });
    }
    let out = crate::model::mlp_forward_tape(tape, &model.spec, &layer_vars, xv)?;
    Ok((StepVars { thetas, log_sigma: None }, out))
}

fn batch_loss_node(
    tape: &mut Tape,
    pred: Var,
    targets: &Targets,
    loss_kind: LossKind,
    vars: &mut StepVars,
    log_sigma: f64,
) -> Result<Var, TrainError> {
    match (targets, loss_kind) {
        (Targets::Regression(y), LossKind::Mse) => Ok(mse_loss_tape(tape, pred, y)?),
        (Targets::Regression(y), LossKind::Gauss) => {
            let s = tape.leaf(Array2::from_elem((1, 1), log_sigma));
            vars.log_sigma = Some(s);
            Ok(gauss_loss_tape(tape, pred, y, s)?)
        }
        (Targets::Classes(l), LossKind::CrossEntropy) => Ok(tape.softmax_cross_entropy(pred, l)?),
        _ => Err(TrainError::Loss(LossError::KindMismatch)),
    }
}

fn minibatches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if batch_size != 0 && batch_size < n {
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        order.chunks(batch_size).map(|c| c.to_vec()).collect()
    } else {
        vec![order]
    }
}

/// Indicator of the current active set {i : |theta_i * mask_i| > r}.
fn active_set(model: &MaskedModel, r: f64) -> Vec<bool> {
    model
        .layers
        .iter()
        .flat_map(|l| [&l.weight, &l.bias])
        .flat_map(|g| g.effective().into_iter().map(|v| v.abs() > r).collect::<Vec<_>>())
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn run_gd_phase(
    model: &mut MaskedModel,
    train: &TrainSet,
    val: &TrainSet,
    loss_kind: LossKind,
    penalty: &Penalty,
    phase: &Phase,
    phase_idx: usize,
    plan: &TrainPlan,
    trace: &mut LossTrace,
    rng: &mut ChaCha8Rng,
    global_epoch: &mut usize,
    rl1_active_exit: bool,
) -> Result<(), TrainError> {
    let mut shapes: Vec<(usize, usize)> = model
        .layers
        .iter()
        .flat_map(|l| [l.weight.theta.dim(), l.bias.theta.dim()])
        .collect();
    let sigma_slot = shapes.len();
    if loss_kind == LossKind::Gauss {
        shapes.push((1, 1));
    }
    let mut adam = Adam::new(plan.optimizer, &shapes);
    let mut prev_active: Option<Vec<bool>> = None;
    // Convergence is judged on the objective the phase actually minimizes:
    // the bare loss plateaus long before a shrinking penalty term does, so
    // penalized phases track loss + penalty rather than the logged bare loss.
    let mut conv_series: Vec<f64> = Vec::new();

    for epoch_in_phase in 0..phase.max_epochs {
        for batch in minibatches(train.len(), plan.batch_size, rng) {
            let (xb, tb) = train.take(&batch);
            let mut tape = Tape::new();
            let (mut vars, pred) = forward_with_theta_leaves(&mut tape, model, &xb)?;
            let base = batch_loss_node(&mut tape, pred, &tb, loss_kind, &mut vars, model.log_sigma)?;
            let total = match penalty {
                Penalty::None => base,
                Penalty::Drr { alpha, beta } => {
                    let p = drr_penalty_tape(&mut tape, &vars.thetas, *alpha, *beta)?;
                    tape.add(base, p)?
                }
                Penalty::Rl1 { alpha } => {
                    let p = l1_penalty_tape(&mut tape, &vars.thetas, *alpha)?;
                    tape.add(base, p)?
                }
            };
            let grads = tape.backward(total)?;
            adam.begin_step();
            let mut slot = 0;
            for layer in &mut model.layers {
                for group in [&mut layer.weight, &mut layer.bias] {
                    adam.apply(slot, &mut group.theta, grads.get(vars.thetas[slot]));
                    slot += 1;
                }
            }
            if let Some(sv) = vars.log_sigma {
                let mut s = Array2::from_elem((1, 1), model.log_sigma);
                adam.apply(sigma_slot, &mut s, grads.get(sv));
                model.log_sigma = s[[0, 0]];
            }
        }

        let train_l = bare_loss(model, train, loss_kind)?;
        let val_l = bare_loss(model, val, loss_kind)?;
        if !train_l.is_finite() || !val_l.is_finite() {
            return Err(TrainError::NonFinite {
                phase: phase_idx,
                epoch: *global_epoch,
                loss: if train_l.is_finite() { val_l } else { train_l },
            });
        }
        trace.epochs.push(*global_epoch);
        trace.train_loss.push(train_l);
        trace.val_loss.push(val_l);
        *global_epoch += 1;

        let penalty_val = {
            let thetas: Vec<&Array2<f64>> = model
                .layers
                .iter()
                .flat_map(|l| [&l.weight.theta, &l.bias.theta])
                .collect();
            match penalty {
                Penalty::None => 0.0,
                Penalty::Drr { alpha, beta } => drr_penalty(&thetas, *alpha, *beta),
                Penalty::Rl1 { alpha } => l1_penalty(&thetas, *alpha),
            }
        };
        conv_series.push(if plan.convergence.on_train { train_l } else { val_l } + penalty_val);

        let epochs_logged = epoch_in_phase + 1;
        if epochs_logged % plan.convergence.check_every == 0 {
            if rl1_active_exit {
                // Early on the active set is trivially stable (nothing has
                // crossed r yet), so stability alone is not enough: also
                // require the penalized objective to have plateaued.
                let current = active_set(model, plan.tamade.r);
                let stable = prev_active.as_ref() == Some(&current);
                prev_active = Some(current);
                if stable && convergence_check(&conv_series, plan.convergence.window) {
                    if phase.kind == PhaseKind::Regularized && trace.converged_at.is_none() {
                        trace.converged_at = Some(*global_epoch - 1);
                    }
                    break;
                }
            } else {
                if convergence_check(&conv_series, plan.convergence.window) {
                    if phase.kind == PhaseKind::Regularized && trace.converged_at.is_none() {
                        trace.converged_at = Some(*global_epoch - 1);
                    }
                    break;
                }
            }
        }
    }
    trace.phase_ends.push(*global_epoch);
    Ok(())
}

/// Threshold search plus mask fixing shared by both pipelines: binary
/// search for the largest magnitude threshold keeping the validation
/// metric within tolerance, apply it, then clear parameters with exactly
/// zero gradient influence.
fn fix_mask(
    model: &mut MaskedModel,
    train: &TrainSet,
    val: &TrainSet,
    loss_kind: LossKind,
    plan: &TrainPlan,
    rng: &mut ChaCha8Rng,
) -> Result<PruneOutcome, TrainError> {
    let max_abs = model
        .layers
        .iter()
        .flat_map(|l| [&l.weight, &l.bias])
        .flat_map(|g| g.effective().into_iter().map(f64::abs).collect::<Vec<_>>())
        .fold(0.0f64, f64::max);
    let evaluator = |m: &MaskedModel| -> Result<f64, TrainError> {
        match plan.tamade.mode {
            TamadeMode::LossRelative => bare_loss(m, val, loss_kind),
            TamadeMode::AccAbsolute => match &val.targets {
                Targets::Classes(l) => Ok(m.accuracy(&val.x, l)?),
                Targets::Regression(_) => Err(TrainError::BadPlan(
                    "accuracy-mode threshold search needs class targets".into(),
                )),
            },
        }
    };
    let target = evaluator(model)?;
    let outcome = if max_abs > plan.tamade.r {
        let (pruned, outcome) = tamade(
            model,
            evaluator,
            target,
            0.0,
            max_abs,
            plan.tamade.tol,
            plan.tamade.r,
            plan.tamade.mode,
        )?;
        *model = pruned;
        outcome
    } else {
        magnitude_prune(model, 0.0);
        PruneOutcome {
            threshold: 0.0,
            steps: 0,
            masks: Vec::new(),
            pre_metric: target,
            post_metric: target,
        }
    };
    let bounds = input_bounding_box(&train.x);
    let rgp = random_gradient_prune(model, rng, plan.rgp_trials, &bounds)?;
    Ok(PruneOutcome {
        threshold: outcome.threshold,
        steps: outcome.steps,
        masks: rgp.masks,
        pre_metric: outcome.pre_metric,
        post_metric: outcome.post_metric,
    })
}

/// Warmup, penalized training (exponential or l1 surrogate on theta),
/// threshold search + zero-influence pruning, then masked finetuning.
pub fn train_three_phase(
    mut model: MaskedModel,
    train: &TrainSet,
    val: &TrainSet,
    loss_kind: LossKind,
    reg: &RegularizerSpec,
    plan: &TrainPlan,
) -> Result<(MaskedModel, LossTrace, PruneOutcome), TrainError> {
    plan.validate()?;
    if !matches!(reg.method, Method::Drr | Method::Rl1 | Method::None) {
        return Err(TrainError::BadPlan("three-phase training takes the Drr/Rl1/None methods".into()));
    }
    let mut trace = LossTrace::default();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut global_epoch = 0usize;
    let mut outcome = None;

    for (phase_idx, phase) in plan.phases.iter().enumerate() {
        if phase.kind == PhaseKind::Finetune && outcome.is_none() {
            outcome = Some(fix_mask(&mut model, train, val, loss_kind, plan, &mut rng)?);
        }
        let penalty = match (phase.kind, reg.method) {
            (PhaseKind::Regularized, Method::Drr) if phase.alpha != 0.0 => {
                Penalty::Drr { alpha: phase.alpha, beta: reg.beta }
            }
            (PhaseKind::Regularized, Method::Rl1) if phase.alpha != 0.0 => {
                Penalty::Rl1 { alpha: phase.alpha }
            }
            _ => Penalty::None,
        };
        let rl1_exit = matches!(penalty, Penalty::Rl1 { .. });
        run_gd_phase(
            &mut model,
            train,
            val,
            loss_kind,
            &penalty,
            phase,
            phase_idx,
            plan,
            &mut trace,
            &mut rng,
            &mut global_epoch,
            rl1_exit,
        )?;
    }
    let outcome = outcome.expect("plan validation guarantees a finetune phase");
    model.enforce_mask();
    Ok((model, trace, outcome))
}

/// Shapes of the Adam slots for the minimax loop: theta, w, gamma per
/// group, then an optional sigma slot.
fn pmmp_shapes(model: &MaskedModel, loss_kind: LossKind) -> Vec<(usize, usize)> {
    let mut shapes: Vec<(usize, usize)> = model
        .layers
        .iter()
        .flat_map(|l| [&l.weight, &l.bias])
        .flat_map(|g| {
            let d = g.theta.dim();
            [d, d, d]
        })
        .collect();
    if loss_kind == LossKind::Gauss {
        shapes.push((1, 1));
    }
    shapes
}

/// Fraction of gates strictly inside (0.1, 0.9).
fn undecided_gate_fraction(model: &MaskedModel) -> f64 {
    let mut total = 0usize;
    let mut inside = 0usize;
    for layer in &model.layers {
        for group in [&layer.weight, &layer.bias] {
            for &g in group.gamma.iter() {
                total += 1;
                if g > 0.1 && g < 0.9 {
                    inside += 1;
                }
            }
        }
    }
    inside as f64 / total as f64
}

/// Minimax training of the probabilistic-gate objective: alternating
/// Adam descent on (theta, w, gamma) and plain gradient ascent on the
/// multipliers u, with projection of gamma into [0,1] and u to >= 0
/// after every step. At phase exit gamma is rounded at 0.5 (ties keep
/// the gate open), the mask becomes round(gamma), theta is set to
/// w * mask exactly, and the shared pruning + finetune tail runs.
pub fn train_pmmp(
    mut model: MaskedModel,
    train: &TrainSet,
    val: &TrainSet,
    loss_kind: LossKind,
    reg: &RegularizerSpec,
    plan: &TrainPlan,
) -> Result<(MaskedModel, LossTrace, PruneOutcome), TrainError> {
    plan.validate()?;
    if reg.method != Method::Pmmp {
        return Err(TrainError::BadPlan("train_pmmp requires the Pmmp method".into()));
    }
    let mut trace = LossTrace::default();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut global_epoch = 0usize;
    let mut outcome = None;
    let mut gates_initialized = false;

    for (phase_idx, phase) in plan.phases.iter().enumerate() {
        match phase.kind {
            PhaseKind::Warmup => {
                run_gd_phase(
                    &mut model,
                    train,
                    val,
                    loss_kind,
                    &Penalty::None,
                    phase,
                    phase_idx,
                    plan,
                    &mut trace,
                    &mut rng,
                    &mut global_epoch,
                    false,
                )?;
            }
            PhaseKind::Regularized => {
                if !gates_initialized {
                    model.init_pmmp(reg.pmmp_p_init, reg.pmmp_u_multi);
                    gates_initialized = true;
                }
                run_pmmp_phase(
                    &mut model,
                    train,
                    val,
                    loss_kind,
                    reg,
                    phase,
                    phase_idx,
                    plan,
                    &mut trace,
                    &mut rng,
                    &mut global_epoch,
                )?;
            }
            PhaseKind::Finetune => {
                // Round gates, bind theta to the surviving w entries, fix
                // the mask, then finetune bare.
                for layer in &mut model.layers {
                    for group in [&mut layer.weight, &mut layer.bias] {
                        group.mask = group.gamma.mapv(|g| if g >= 0.5 { 1.0 } else { 0.0 });
                        group.theta = &group.w * &group.mask;
                    }
                }
                outcome = Some(fix_mask(&mut model, train, val, loss_kind, plan, &mut rng)?);
                run_gd_phase(
                    &mut model,
                    train,
                    val,
                    loss_kind,
                    &Penalty::None,
                    phase,
                    phase_idx,
                    plan,
                    &mut trace,
                    &mut rng,
                    &mut global_epoch,
                    false,
                )?;
            }
        }
    }
    let outcome = outcome.ok_or_else(|| TrainError::BadPlan("missing finetune phase".into()))?;
    model.enforce_mask();
    Ok((model, trace, outcome))
}

#[allow(clippy::too_many_arguments)]
fn run_pmmp_phase(
    model: &mut MaskedModel,
    train: &TrainSet,
    val: &TrainSet,
    loss_kind: LossKind,
    reg: &RegularizerSpec,
    phase: &Phase,
    phase_idx: usize,
    plan: &TrainPlan,
    trace: &mut LossTrace,
    rng: &mut ChaCha8Rng,
    global_epoch: &mut usize,
) -> Result<(), TrainError> {
    let shapes = pmmp_shapes(model, loss_kind);
    let sigma_slot = shapes.len() - if loss_kind == LossKind::Gauss { 1 } else { 0 };
    let mut adam = Adam::new(plan.optimizer, &shapes);
    let ascent_lr = plan.optimizer.step_size * reg.pmmp_u_ratio;
    let phase_series_start = trace.train_loss.len();
    // Oscillation detector state: undecided-gate fractions at checks.
    let mut gate_fracs: Vec<f64> = Vec::new();
    let mut warned_oscillation = false;

    for epoch_in_phase in 0..phase.max_epochs {
        for batch in minibatches(train.len(), plan.batch_size, rng) {
            let (xb, tb) = train.take(&batch);
            let mut tape = Tape::new();
            let xv = tape.leaf(xb);
            let mut theta_vars = Vec::new();
            let mut w_vars = Vec::new();
            let mut gamma_vars = Vec::new();
            let mut u_vars = Vec::new();
            let mut layer_vars = Vec::new();
            for layer in &model.layers {
                let mut eff = Vec::new();
                for group in [&layer.weight, &layer.bias] {
                    let theta = tape.leaf(group.theta.clone());
                    let w = tape.leaf(group.w.clone());
                    let gamma = tape.leaf(group.gamma.clone());
                    let u = tape.leaf(group.u.clone());
                    let mask = tape.leaf(group.mask.clone());
                    theta_vars.push(theta);
                    w_vars.push(w);
                    gamma_vars.push(gamma);
                    u_vars.push(u);
                    eff.push(tape.mul(theta, mask)?);
                }
                layer_vars.push(LayerVars { weight: eff[0], bias: eff[1] });
            }
            let pred = crate::model::mlp_forward_tape(&mut tape, &model.spec, &layer_vars, xv)?;
            let mut vars = StepVars { thetas: Vec::new(), log_sigma: None };
            let base = batch_loss_node(&mut tape, pred, &tb, loss_kind, &mut vars, model.log_sigma)?;
            let mut total = base;
            for i in 0..theta_vars.len() {
                let p = pmmp_penalty_tape(
                    &mut tape,
                    theta_vars[i],
                    w_vars[i],
                    gamma_vars[i],
                    u_vars[i],
                    phase.alpha,
                )?;
                total = tape.add(total, p)?;
            }
            let grads = tape.backward(total)?;

            adam.begin_step();
            let mut group_idx = 0;
            for layer in &mut model.layers {
                for group in [&mut layer.weight, &mut layer.bias] {
                    adam.apply(3 * group_idx, &mut group.theta, grads.get(theta_vars[group_idx]));
                    adam.apply(3 * group_idx + 1, &mut group.w, grads.get(w_vars[group_idx]));
                    adam.apply(3 * group_idx + 2, &mut group.gamma, grads.get(gamma_vars[group_idx]));
                    // Plain gradient ascent on the multipliers.
                    group.u.zip_mut_with(grads.get(u_vars[group_idx]), |u, &g| *u += ascent_lr * g);
                    group_idx += 1;
                }
            }
            if let Some(sv) = vars.log_sigma {
                let mut s = Array2::from_elem((1, 1), model.log_sigma);
                adam.apply(sigma_slot, &mut s, grads.get(sv));
                model.log_sigma = s[[0, 0]];
            }
            model.pmmp_project();
        }

        let train_l = bare_loss(model, train, loss_kind)?;
        let val_l = bare_loss(model, val, loss_kind)?;
        if !train_l.is_finite() || !val_l.is_finite() {
            return Err(TrainError::NonFinite {
                phase: phase_idx,
                epoch: *global_epoch,
                loss: if train_l.is_finite() { val_l } else { train_l },
            });
        }
        trace.epochs.push(*global_epoch);
        trace.train_loss.push(train_l);
        trace.val_loss.push(val_l);
        *global_epoch += 1;

        let epochs_logged = epoch_in_phase + 1;
        if epochs_logged % plan.convergence.check_every == 0 {
            gate_fracs.push(undecided_gate_fraction(model));
            if !warned_oscillation && gate_fracs.len() >= 50 {
                let tail = &gate_fracs[gate_fracs.len() - 50..];
                if tail.last() >= tail.first() && tail.first() > Some(&0.0) {
                    trace.warnings.push(format!(
                        "gate oscillation: undecided-gate fraction not decreasing over 50 checks (= {:.3})",
                        tail.last().unwrap()
                    ));
                    warned_oscillation = true;
                }
            }
            let series = if plan.convergence.on_train { &trace.train_loss } else { &trace.val_loss };
            if convergence_check(&series[phase_series_start..], plan.convergence.window) {
                if trace.converged_at.is_none() {
                    trace.converged_at = Some(*global_epoch - 1);
                }
                break;
            }
        }
    }
    trace.phase_ends.push(*global_epoch);
    Ok(())
}
