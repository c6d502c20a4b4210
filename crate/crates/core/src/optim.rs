//! The optimizer family: SGD, top-k SGD, SAM, K-SAM and their random-subset
//! baselines, sharing one base update rule.
//!
//! Every step follows the same outline. Per-example losses select index
//! subsets; an ascent gradient over the first subset defines a parameter
//! perturbation of l2 norm rho; the descent gradient over the second subset,
//! evaluated at the perturbed weights, feeds the base SGD update. Setting
//! the subsets to the whole batch recovers SAM, and rho = 0 recovers plain
//! (top-k) SGD. Momentum and weight decay apply only to the final descent
//! update, never to the ascent gradient.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::instrument::{CostMethod, CostModel};
use crate::model::Model;
use crate::params::ParamVector;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Sorted, deduplicated batch-local indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsetIndices {
    indices: Vec<usize>,
}

impl SubsetIndices {
    /// Validates: nonempty, strictly ascending, within [0, batch).
    pub fn new(indices: Vec<usize>, batch: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("empty subset".into()));
        }
        for pair in indices.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::InvalidArgument("subset indices must be strictly ascending".into()));
            }
        }
        if *indices.last().unwrap() >= batch {
            return Err(Error::InvalidArgument(format!(
                "subset index {} out of range for batch {batch}",
                indices.last().unwrap()
            )));
        }
        Ok(SubsetIndices { indices })
    }

    pub fn full(batch: usize) -> Self {
        SubsetIndices {
            indices: (0..batch).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.indices
    }
}

/// Subset selection rule for both the ascent and descent sub-batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    TopK,
    Random,
}

/// Schedule for shrinking the descent subset partway through training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum K2Decay {
    None,
    /// Halve K2 (ceiling division) once the step fraction reaches `f`.
    HalveAtFraction(f64),
}

#[derive(Debug, Clone)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Perturbation radius rho (l2).
    pub rho: f64,
    pub k1: usize,
    pub k2: usize,
    pub k2_decay: K2Decay,
    pub selection: Selection,
    /// Ascent gradients with norm at or below this are treated as degenerate.
    pub zero_grad_tol: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            rho: 0.05,
            k1: 16,
            k2: 64,
            k2_decay: K2Decay::None,
            selection: Selection::TopK,
            zero_grad_tol: 1e-12,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self, batch: usize) -> Result<()> {
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.rho < 0.0 {
            return Err(Error::Config(format!("rho must be >= 0, got {}", self.rho)));
        }
        if self.zero_grad_tol.is_nan() || self.zero_grad_tol <= 0.0 {
            return Err(Error::Config("zero-grad tolerance must be > 0".into()));
        }
        if self.k1 == 0 || self.k1 > batch || self.k2 == 0 || self.k2 > batch {
            return Err(Error::Config(format!(
                "subset sizes K1={} K2={} must be in [1, {batch}]",
                self.k1, self.k2
            )));
        }
        if let K2Decay::HalveAtFraction(f) = self.k2_decay {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("decay fraction must be in (0,1), got {f}")));
            }
        }
        Ok(())
    }
}

/// Momentum buffer, the selection RNG and the step counter.
#[derive(Debug, Clone)]
pub struct OptimState {
    momentum: ParamVector,
    rng: SplitMix64,
    t: u64,
}

impl OptimState {
    pub fn new(param_len: usize, seed: u64) -> Self {
        OptimState {
            momentum: ParamVector::zeros(param_len),
            rng: SplitMix64::from_seed_stream(seed, 0x5e1ec7), // selection stream
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Generator driving random subset selection; part of optimizer state
    /// so runs are reproducible from (config, seed) alone.
    pub fn selection_rng(&mut self) -> &mut SplitMix64 {
        &mut self.rng
    }
}

/// Wall-clock nanoseconds per step phase.
#[derive(Debug, Clone, Copy, Default)]
pub struct PhaseTimes {
    pub infer_forward_ns: u64,
    pub selection_ns: u64,
    pub ascent_ns: u64,
    pub descent_ns: u64,
    pub update_ns: u64,
    pub total_ns: u64,
}

impl PhaseTimes {
    pub fn phase_sum_ns(&self) -> u64 {
        self.infer_forward_ns + self.selection_ns + self.ascent_ns + self.descent_ns + self.update_ns
    }
}

/// Everything observable about one optimizer step.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub step: u64,
    /// Mean loss over the full batch at the pre-step weights.
    pub loss_full: f64,
    pub loss_ascent_subset: Option<f64>,
    pub loss_descent_subset: Option<f64>,
    pub ascent_grad_norm: Option<f64>,
    pub eps_norm: f64,
    pub descent_grad_norm: f64,
    pub ascent_indices: Option<SubsetIndices>,
    pub descent_indices: Option<SubsetIndices>,
    pub degenerate_ascent: bool,
    pub cost_units: f64,
    pub phases: PhaseTimes,
}

/// A differentiable objective over a fixed batch: the meeting point between
/// models and optimizers. Implemented by [`TaskBatch`] for real models and
/// by tiny analytic objectives in tests.
pub trait Objective {
    fn num_examples(&self) -> usize;
    fn param_len(&self) -> usize;
    fn params(&self) -> ParamVector;
    fn set_params(&mut self, w: &ParamVector) -> Result<()>;
    fn add_params(&mut self, v: &ParamVector) -> Result<()>;
    /// Per-example losses with a forward-only pass; no gradients recorded.
    fn per_example_losses(&mut self) -> Result<Vec<f64>>;
    /// Mean loss over the subset and its gradient, via a recorded forward
    /// and a backward pass.
    fn loss_and_grad(&mut self, subset: &SubsetIndices) -> Result<(f64, ParamVector)>;
}

/// A model paired with one mini-batch.
pub struct TaskBatch<'a> {
    model: &'a mut Model,
    inputs: &'a Tensor,
    targets: &'a [usize],
}

impl<'a> TaskBatch<'a> {
    pub fn new(model: &'a mut Model, inputs: &'a Tensor, targets: &'a [usize]) -> Result<Self> {
        if inputs.shape().is_empty() || inputs.shape()[0] != targets.len() || targets.is_empty() {
            return Err(Error::shape(
                "task_batch",
                format!("inputs {:?} with {} targets", inputs.shape(), targets.len()),
            ));
        }
        Ok(TaskBatch { model, inputs, targets })
    }
}

impl Objective for TaskBatch<'_> {
    fn num_examples(&self) -> usize {
        self.targets.len()
    }

    fn param_len(&self) -> usize {
        self.model.param_len()
    }

    fn params(&self) -> ParamVector {
        self.model.params_flat()
    }

    fn set_params(&mut self, w: &ParamVector) -> Result<()> {
        self.model.set_flat(w)
    }

    fn add_params(&mut self, v: &ParamVector) -> Result<()> {
        self.model.add_in_place(v)
    }

    fn per_example_losses(&mut self) -> Result<Vec<f64>> {
        let mut tape = crate::autograd::Tape::new(crate::autograd::Mode::Infer);
        let x = tape.leaf(self.inputs.clone());
        let logits = self.model.forward(&mut tape, x)?;
        let losses = tape.cross_entropy(logits, self.targets)?;
        Ok(tape.value(losses).data().to_vec())
    }

    fn loss_and_grad(&mut self, subset: &SubsetIndices) -> Result<(f64, ParamVector)> {
        // A subset covering the whole batch is the identity; skip the gather.
        let full = subset.len() == self.targets.len();
        let sub_inputs = if full {
            self.inputs.clone()
        } else {
            self.inputs.gather_rows(subset.as_slice())?
        };
        let sub_targets: Vec<usize> = if full {
            self.targets.to_vec()
        } else {
            subset.as_slice().iter().map(|&i| self.targets[i]).collect()
        };
        let k = subset.len();
        let mut tape = crate::autograd::Tape::new(crate::autograd::Mode::Train);
        let x = tape.leaf(sub_inputs);
        let logits = self.model.forward(&mut tape, x)?;
        let losses = tape.cross_entropy(logits, &sub_targets)?;
        let all: Vec<usize> = (0..k).collect();
        let loss = tape.mean_subset(losses, &all)?;
        let loss_value = tape.value(loss).scalar_value()?;
        let grads = tape.backward(loss)?;
        Ok((loss_value, self.model.flatten_grads(&grads)))
    }
}

/// Indices of the k largest losses, ties broken toward the smaller index,
/// result sorted ascending.
pub fn select_topk(losses: &[f64], k: usize) -> Result<SubsetIndices> {
    let b = losses.len();
    if k == 0 || k > b {
        return Err(Error::InvalidArgument(format!("k={k} out of range for batch {b}")));
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("losses for top-k selection".into()));
    }
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&i, &j| losses[j].total_cmp(&losses[i]).then(i.cmp(&j)));
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    SubsetIndices::new(chosen, b)
}

/// Uniform subset of size k without replacement, sorted ascending;
/// deterministic for a given generator state.
pub fn select_random(losses: &[f64], k: usize, rng: &mut SplitMix64) -> Result<SubsetIndices> {
    let b = losses.len();
    if k == 0 || k > b {
        return Err(Error::InvalidArgument(format!("k={k} out of range for batch {b}")));
    }
    let mut pool: Vec<usize> = (0..b).collect();
    for i in 0..k {
        let j = i + rng.next_below(b - i);
        pool.swap(i, j);
    }
    let mut chosen = pool[..k].to_vec();
    chosen.sort_unstable();
    SubsetIndices::new(chosen, b)
}

/// First-order solution of the inner maximization: `rho * g / ||g||_2`.
/// Gradients with norm at or below `tol` yield the zero vector and the
/// degenerate flag instead of dividing by (near) zero.
pub fn compute_perturbation(g: &ParamVector, rho: f64, tol: f64) -> Result<(ParamVector, bool)> {
    if !g.all_finite() {
        return Err(Error::NonFinite("ascent gradient".into()));
    }
    Ok(perturbation_with_norm(g, g.l2_norm(), rho, tol))
}

fn perturbation_with_norm(g: &ParamVector, norm: f64, rho: f64, tol: f64) -> (ParamVector, bool) {
    if norm > tol {
        (g.scaled(rho / norm), false)
    } else {
        (ParamVector::zeros(g.len()), true)
    }
}

/// Effective descent subset size at step (or epoch) `t` of `total`.
pub fn k2_schedule(t: u64, total: u64, config: &OptimConfig) -> usize {
    match config.k2_decay {
        K2Decay::None => config.k2,
        K2Decay::HalveAtFraction(f) => {
            if (t as f64) < f * (total as f64) {
                config.k2
            } else {
                config.k2.div_ceil(2)
            }
        }
    }
}

/// Base SGD update direction with momentum and weight decay:
/// `d = g + wd * w; buf = momentum * buf + d;` returns `-lr * buf` and
/// advances the step counter. Every optimizer in the family, including the
/// distributed simulation, applies exactly this rule.
pub(crate) fn base_update_direction(
    state: &mut OptimState,
    grad: &ParamVector,
    current: impl FnOnce() -> ParamVector,
    config: &OptimConfig,
) -> Result<ParamVector> {
    if config.weight_decay != 0.0 {
        let mut d = grad.clone();
        d.axpy(config.weight_decay, &current())?;
        state.momentum.scale_then_add(config.momentum, &d)?;
    } else {
        state.momentum.scale_then_add(config.momentum, grad)?;
    }
    state.t += 1;
    Ok(state.momentum.scaled(-config.lr))
}

fn apply_base_update(
    obj: &mut impl Objective,
    state: &mut OptimState,
    grad: &ParamVector,
    config: &OptimConfig,
) -> Result<()> {
    let direction = base_update_direction(state, grad, || obj.params(), config)?;
    obj.add_params(&direction)
}

/// Contiguous phase timer: every span between laps is attributed to the
/// phase that just finished, so phase times sum to the step total up to
/// the cost of building the report itself.
struct PhaseClock {
    start: Instant,
    last: Instant,
}

impl PhaseClock {
    fn start() -> Self {
        let now = Instant::now();
        PhaseClock { start: now, last: now }
    }

    fn lap(&mut self) -> u64 {
        let now = Instant::now();
        let ns = now.duration_since(self.last).as_nanos() as u64;
        self.last = now;
        ns
    }

    fn total(&self) -> u64 {
        self.start.elapsed().as_nanos() as u64
    }
}

/// Plain SGD over the full batch.
pub fn sgd_step(obj: &mut impl Objective, state: &mut OptimState, config: &OptimConfig) -> Result<StepReport> {
    let mut clock = PhaseClock::start();
    let b = obj.num_examples();
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let full = SubsetIndices::full(b);
    let (loss, grad) = obj.loss_and_grad(&full)?;
    let descent_grad_norm = grad.l2_norm();
    let descent_ns = clock.lap();
    let step = state.t;
    apply_base_update(obj, state, &grad, config)?;
    let update_ns = clock.lap();
    Ok(StepReport {
        step,
        loss_full: loss,
        loss_ascent_subset: None,
        loss_descent_subset: None,
        ascent_grad_norm: None,
        eps_norm: 0.0,
        descent_grad_norm,
        ascent_indices: None,
        descent_indices: None,
        degenerate_ascent: false,
        cost_units: CostModel::default().units(b, 0, 0, CostMethod::Sgd),
        phases: PhaseTimes {
            descent_ns,
            update_ns,
            total_ns: clock.total(),
            ..Default::default()
        },
    })
}

/// SGD whose descent gradient uses only the K2-subset of the batch selected
/// from a forward-only loss pass (top-k, or uniform when configured).
pub fn topk_sgd_step(
    obj: &mut impl Objective,
    state: &mut OptimState,
    config: &OptimConfig,
) -> Result<StepReport> {
    let mut clock = PhaseClock::start();
    let b = obj.num_examples();
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if config.k2 == 0 || config.k2 > b {
        return Err(Error::InvalidArgument(format!("K2={} out of range for batch {b}", config.k2)));
    }
    let losses = obj.per_example_losses()?;
    let loss_full = losses.iter().sum::<f64>() / b as f64;
    let infer_forward_ns = clock.lap();
    let subset = match config.selection {
        Selection::TopK => select_topk(&losses, config.k2)?,
        Selection::Random => select_random(&losses, config.k2, &mut state.rng)?,
    };
    let selection_ns = clock.lap();
    let (subset_loss, grad) = obj.loss_and_grad(&subset)?;
    let descent_grad_norm = grad.l2_norm();
    let descent_ns = clock.lap();
    let step = state.t;
    apply_base_update(obj, state, &grad, config)?;
    let update_ns = clock.lap();
    Ok(StepReport {
        step,
        loss_full,
        loss_ascent_subset: None,
        loss_descent_subset: Some(subset_loss),
        ascent_grad_norm: None,
        eps_norm: 0.0,
        descent_grad_norm,
        ascent_indices: None,
        descent_indices: Some(subset),
        degenerate_ascent: false,
        cost_units: CostModel::default().units(b, 0, config.k2, CostMethod::Ksam),
        phases: PhaseTimes {
            infer_forward_ns,
            selection_ns,
            descent_ns,
            update_ns,
            total_ns: clock.total(),
            ..Default::default()
        },
    })
}

/// Full SAM: ascent gradient on the whole batch defines the perturbation,
/// descent gradient on the whole batch at the perturbed weights feeds the
/// base update. The pre-step weights are restored exactly before updating.
pub fn sam_step(obj: &mut impl Objective, state: &mut OptimState, config: &OptimConfig) -> Result<StepReport> {
    let mut clock = PhaseClock::start();
    let b = obj.num_examples();
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let full = SubsetIndices::full(b);
    let (loss, ascent_grad) = obj.loss_and_grad(&full)?;
    if !ascent_grad.all_finite() {
        return Err(Error::NonFinite("ascent gradient".into()));
    }
    let ascent_norm = ascent_grad.l2_norm();
    let (eps, degenerate) = perturbation_with_norm(&ascent_grad, ascent_norm, config.rho, config.zero_grad_tol);
    let eps_norm = eps.l2_norm();
    let saved = obj.params();
    obj.add_params(&eps)?;
    let ascent_ns = clock.lap();

    let perturbed = obj.loss_and_grad(&full);
    obj.set_params(&saved)?;
    let (perturbed_loss, descent_grad) = perturbed?;
    let descent_grad_norm = descent_grad.l2_norm();
    let descent_ns = clock.lap();

    let step = state.t;
    apply_base_update(obj, state, &descent_grad, config)?;
    let update_ns = clock.lap();
    Ok(StepReport {
        step,
        loss_full: loss,
        loss_ascent_subset: Some(loss),
        loss_descent_subset: Some(perturbed_loss),
        ascent_grad_norm: Some(ascent_norm),
        eps_norm,
        descent_grad_norm,
        ascent_indices: None,
        descent_indices: None,
        degenerate_ascent: degenerate,
        cost_units: CostModel::default().units(b, 0, 0, CostMethod::Sam),
        phases: PhaseTimes {
            ascent_ns,
            descent_ns,
            update_ns,
            total_ns: clock.total(),
            ..Default::default()
        },
    })
}

/// K-SAM: one forward-only pass over the batch yields per-example losses;
/// the K1 and K2 largest-loss subsets supply the ascent and descent
/// gradients. With K1 = K2 = B this reproduces SAM; with rho = 0 it
/// reproduces top-K2 SGD.
pub fn ksam_step(obj: &mut impl Objective, state: &mut OptimState, config: &OptimConfig) -> Result<StepReport> {
    let mut clock = PhaseClock::start();
    let b = obj.num_examples();
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    config.validate(b)?;
    let losses = obj.per_example_losses()?;
    let loss_full = losses.iter().sum::<f64>() / b as f64;
    let infer_forward_ns = clock.lap();

    let (ascent_set, descent_set) = match config.selection {
        Selection::TopK => (select_topk(&losses, config.k1)?, select_topk(&losses, config.k2)?),
        Selection::Random => (
            select_random(&losses, config.k1, &mut state.rng)?,
            select_random(&losses, config.k2, &mut state.rng)?,
        ),
    };
    let selection_ns = clock.lap();

    let (ascent_loss, ascent_grad) = obj.loss_and_grad(&ascent_set)?;
    if !ascent_grad.all_finite() {
        return Err(Error::NonFinite("ascent gradient".into()));
    }
    let ascent_norm = ascent_grad.l2_norm();
    let (eps, degenerate) = perturbation_with_norm(&ascent_grad, ascent_norm, config.rho, config.zero_grad_tol);
    let eps_norm = eps.l2_norm();
    let saved = obj.params();
    obj.add_params(&eps)?;
    let ascent_ns = clock.lap();

    let descent = obj.loss_and_grad(&descent_set);
    obj.set_params(&saved)?;
    let (descent_loss, descent_grad) = descent?;
    let descent_grad_norm = descent_grad.l2_norm();
    let descent_ns = clock.lap();

    let step = state.t;
    apply_base_update(obj, state, &descent_grad, config)?;
    let update_ns = clock.lap();
    Ok(StepReport {
        step,
        loss_full,
        loss_ascent_subset: Some(ascent_loss),
        loss_descent_subset: Some(descent_loss),
        ascent_grad_norm: Some(ascent_norm),
        eps_norm,
        descent_grad_norm,
        ascent_indices: Some(ascent_set),
        descent_indices: Some(descent_set),
        degenerate_ascent: degenerate,
        cost_units: CostModel::default().units(b, config.k1, config.k2, CostMethod::Ksam),
        phases: PhaseTimes {
            infer_forward_ns,
            selection_ns,
            ascent_ns,
            descent_ns,
            update_ns,
            total_ns: clock.total(),
        },
    })
}

/// The four primitive step kinds. The harness layers schedules (learning
/// rate, K2 decay) on top by adjusting the per-step config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepMethod {
    Sgd,
    TopkSgd,
    Sam,
    Ksam,
}

pub fn run_step(
    method: StepMethod,
    obj: &mut impl Objective,
    state: &mut OptimState,
    config: &OptimConfig,
) -> Result<StepReport> {
    match method {
        StepMethod::Sgd => sgd_step(obj, state, config),
        StepMethod::TopkSgd => topk_sgd_step(obj, state, config),
        StepMethod::Sam => sam_step(obj, state, config),
        StepMethod::Ksam => ksam_step(obj, state, config),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// One-parameter quadratic `L(w) = w^2 / 2`, gradient `w`.
    struct Quad {
        w: f64,
    }

    impl Objective for Quad {
        fn num_examples(&self) -> usize {
            1
        }
        fn param_len(&self) -> usize {
            1
        }
        fn params(&self) -> ParamVector {
            ParamVector::from_vec(vec![self.w])
        }
        fn set_params(&mut self, w: &ParamVector) -> Result<()> {
            self.w = w.as_slice()[0];
            Ok(())
        }
        fn add_params(&mut self, v: &ParamVector) -> Result<()> {
            self.w += v.as_slice()[0];
            Ok(())
        }
        fn per_example_losses(&mut self) -> Result<Vec<f64>> {
            Ok(vec![self.w * self.w / 2.0])
        }
        fn loss_and_grad(&mut self, _subset: &SubsetIndices) -> Result<(f64, ParamVector)> {
            Ok((self.w * self.w / 2.0, ParamVector::from_vec(vec![self.w])))
        }
    }

    fn quad_config(lr: f64, momentum: f64, weight_decay: f64, rho: f64) -> OptimConfig {
        OptimConfig {
            lr,
            momentum,
            weight_decay,
            rho,
            k1: 1,
            k2: 1,
            ..OptimConfig::default()
        }
    }

    #[test]
    fn topk_definition() {
        let s = select_topk(&[0.1, 0.9, 0.5, 0.7], 2).unwrap();
        assert_eq!(s.as_slice(), &[1, 3]);
    }

    #[test]
    fn topk_full_batch_is_identity() {
        let s = select_topk(&[0.3, 0.1, 0.2], 3).unwrap();
        assert_eq!(s.as_slice(), &[0, 1, 2]);
    }

    #[test]
    fn topk_ties_take_smaller_index() {
        let s = select_topk(&[0.5, 0.5, 0.1], 2).unwrap();
        assert_eq!(s.as_slice(), &[0, 1]);
    }

    #[test]
    fn topk_out_of_range() {
        assert!(select_topk(&[1.0, 2.0], 0).is_err());
        assert!(select_topk(&[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn topk_matches_brute_force_on_small_batches() {
        // select_topk must pick an argmax subset of the loss sum.
        let mut rng = SplitMix64::new(17);
        for b in 1..=8usize {
            for _case in 0..20 {
                // Quantized losses so ties actually happen.
                let losses: Vec<f64> = (0..b).map(|_| (rng.next_below(4) as f64) / 4.0).collect();
                for k in 1..=b {
                    let picked = select_topk(&losses, k).unwrap();
                    let picked_sum: f64 = picked.as_slice().iter().map(|&i| losses[i]).sum();
                    let best = best_subset_sum(&losses, k);
                    assert!(
                        (picked_sum - best).abs() < 1e-12,
                        "b={b} k={k} losses={losses:?} picked={picked:?}"
                    );
                }
            }
        }
    }

    fn best_subset_sum(losses: &[f64], k: usize) -> f64 {
        // Enumerate all C(B, k) subsets.
        let b = losses.len();
        let mut best = f64::NEG_INFINITY;
        for mask in 0u32..(1 << b) {
            if mask.count_ones() as usize != k {
                continue;
            }
            let sum: f64 = (0..b).filter(|i| mask & (1 << i) != 0).map(|i| losses[i]).sum();
            if sum > best {
                best = sum;
            }
        }
        best
    }

    #[test]
    fn random_full_batch_is_identity() {
        let mut rng = SplitMix64::new(5);
        let s = select_random(&[0.0; 4], 4, &mut rng).unwrap();
        assert_eq!(s.as_slice(), &[0, 1, 2, 3]);
    }

    #[test]
    fn random_is_reproducible() {
        let draw = || {
            let mut rng = SplitMix64::new(123);
            select_random(&[0.0; 16], 4, &mut rng).unwrap()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn random_is_uniform() {
        // B=8, k=2: every index should appear with frequency k/B = 0.25.
        let mut rng = SplitMix64::new(2024);
        let mut counts = [0usize; 8];
        let draws = 10_000;
        for _ in 0..draws {
            let s = select_random(&[0.0; 8], 2, &mut rng).unwrap();
            for &i in s.as_slice() {
                counts[i] += 1;
            }
        }
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.25).abs() < 0.02, "index {i}: frequency {freq}");
        }
    }

    #[test]
    fn perturbation_normalizes_to_rho() {
        let g = ParamVector::from_vec(vec![3.0, 4.0]);
        let (eps, degenerate) = compute_perturbation(&g, 0.05, 1e-12).unwrap();
        assert!(!degenerate);
        assert!((eps.as_slice()[0] - 0.03).abs() < 1e-15);
        assert!((eps.as_slice()[1] - 0.04).abs() < 1e-15);
        assert!((eps.l2_norm() - 0.05).abs() / 0.05 < 1e-12);
    }

    #[test]
    fn perturbation_degenerate_on_zero_gradient() {
        let g = ParamVector::zeros(3);
        let (eps, degenerate) = compute_perturbation(&g, 0.05, 1e-12).unwrap();
        assert!(degenerate);
        assert_eq!(eps.as_slice(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn perturbation_rejects_nonfinite() {
        let g = ParamVector::from_vec(vec![f64::NAN]);
        assert!(matches!(
            compute_perturbation(&g, 0.05, 1e-12),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn sgd_unit_lr_subtracts_gradient() {
        let mut obj = Quad { w: 3.0 };
        let mut state = OptimState::new(1, 0);
        let config = quad_config(1.0, 0.0, 0.0, 0.0);
        let report = sgd_step(&mut obj, &mut state, &config).unwrap();
        assert_eq!(obj.w, 0.0); // w - g = 3 - 3
        assert_eq!(report.step, 0);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn sgd_momentum_two_step_recursion() {
        // mu=0.5, lr=0.25, w0=1 on L=w^2/2. All values are exact dyadics.
        let mut obj = Quad { w: 1.0 };
        let mut state = OptimState::new(1, 0);
        let config = quad_config(0.25, 0.5, 0.0, 0.0);
        sgd_step(&mut obj, &mut state, &config).unwrap();
        assert_eq!(obj.w, 0.75); // buf=1, w=1-0.25
        sgd_step(&mut obj, &mut state, &config).unwrap();
        assert_eq!(obj.w, 0.4375); // buf=0.5+0.75=1.25, w=0.75-0.3125
    }

    #[test]
    fn sgd_weight_decay_scalar() {
        // lambda=0.5, w0=2: effective gradient 2 + 0.5*2 = 3, lr=1 -> w=-1.
        let mut obj = Quad { w: 2.0 };
        let mut state = OptimState::new(1, 0);
        let config = quad_config(1.0, 0.0, 0.5, 0.0);
        sgd_step(&mut obj, &mut state, &config).unwrap();
        assert_eq!(obj.w, -1.0);
    }

    #[test]
    fn sam_quadratic_hand_oracle() {
        // w=1, rho=0.1, lr=1: ascent grad 1, eps=0.1, descent grad at 1.1
        // is 1.1, new w = 1 - 1.1 = -0.1.
        let mut obj = Quad { w: 1.0 };
        let mut state = OptimState::new(1, 0);
        let config = quad_config(1.0, 0.0, 0.0, 0.1);
        let report = sam_step(&mut obj, &mut state, &config).unwrap();
        assert!((obj.w - (-0.1)).abs() < 1e-15);
        assert!((report.eps_norm - 0.1).abs() < 1e-15);
        assert!((report.ascent_grad_norm.unwrap() - 1.0).abs() < 1e-15);
        assert!((report.descent_grad_norm - 1.1).abs() < 1e-15);
    }

    #[test]
    fn sam_rho_zero_matches_sgd() {
        let run = |rho: f64, use_sam: bool| {
            let mut obj = Quad { w: 1.5 };
            let mut state = OptimState::new(1, 0);
            let config = quad_config(0.125, 0.5, 0.0, rho);
            for _ in 0..10 {
                if use_sam {
                    sam_step(&mut obj, &mut state, &config).unwrap();
                } else {
                    sgd_step(&mut obj, &mut state, &config).unwrap();
                }
            }
            obj.w
        };
        assert_eq!(run(0.0, true).to_bits(), run(0.0, false).to_bits());
    }

    #[test]
    fn eps_norm_is_zero_or_rho() {
        let mut obj = Quad { w: 0.7 };
        let mut state = OptimState::new(1, 0);
        let config = quad_config(0.05, 0.9, 1e-4, 0.02);
        for _ in 0..50 {
            let report = sam_step(&mut obj, &mut state, &config).unwrap();
            let ok_zero = report.eps_norm == 0.0 && report.degenerate_ascent;
            let ok_rho = (report.eps_norm - config.rho).abs() / config.rho < 1e-12;
            assert!(ok_zero || ok_rho, "eps norm {}", report.eps_norm);
        }
    }

    #[test]
    fn k2_schedule_halves_at_fraction() {
        let config = OptimConfig {
            k2: 64,
            k2_decay: K2Decay::HalveAtFraction(0.5),
            ..OptimConfig::default()
        };
        assert_eq!(k2_schedule(49, 100, &config), 64);
        assert_eq!(k2_schedule(50, 100, &config), 32);
    }

    #[test]
    fn k2_schedule_none_is_constant() {
        let config = OptimConfig {
            k2: 64,
            k2_decay: K2Decay::None,
            ..OptimConfig::default()
        };
        assert_eq!(k2_schedule(0, 100, &config), 64);
        assert_eq!(k2_schedule(99, 100, &config), 64);
    }

    #[test]
    fn k2_schedule_floor_is_one() {
        let config = OptimConfig {
            k2: 1,
            k2_decay: K2Decay::HalveAtFraction(0.5),
            ..OptimConfig::default()
        };
        assert_eq!(k2_schedule(99, 100, &config), 1);
    }

    #[test]
    fn subset_indices_validation() {
        assert!(SubsetIndices::new(vec![], 4).is_err());
        assert!(SubsetIndices::new(vec![0, 0], 4).is_err());
        assert!(SubsetIndices::new(vec![2, 1], 4).is_err());
        assert!(SubsetIndices::new(vec![4], 4).is_err());
        assert!(SubsetIndices::new(vec![0, 3], 4).is_ok());
    }

    #[test]
    fn phase_times_account_for_total() {
        let mut obj = Quad { w: 1.0 };
        let mut state = OptimState::new(1, 0);
        let config = quad_config(0.1, 0.0, 0.0, 0.05);
        let report = sam_step(&mut obj, &mut state, &config).unwrap();
        assert!(report.phases.phase_sum_ns() <= report.phases.total_ns);
    }
}
