//! Deterministic in-process simulation of data-parallel K-SAM.
//!
//! Each logical worker owns a contiguous shard of the batch and runs the
//! full K-SAM inner procedure on it: shard losses, shard-local top-k with
//! per-worker subset sizes K1/W and K2/W, its own perturbation and its own
//! descent gradient. Descent gradients are averaged in fixed worker order
//! and a single base update is applied, matching the distributed protocol
//! in which ascent gradients stay per-card and only descent gradients are
//! aggregated. With one worker the procedure is bit-identical to the
//! single-process K-SAM step.

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::instrument::{CostMethod, CostModel};
use crate::model::Model;
use crate::optim::{
    base_update_direction, compute_perturbation, select_random, select_topk, Objective,
    OptimConfig, OptimState, Selection, TaskBatch,
};
use crate::params::ParamVector;

/// Per-worker observables from one distributed step.
#[derive(Debug, Clone)]
pub struct WorkerReport {
    pub worker: usize,
    pub eps_norm: f64,
    pub degenerate_ascent: bool,
    pub perturbation: ParamVector,
    /// Global batch indices of the worker's descent subset.
    pub descent_indices: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct DistStepReport {
    pub step: u64,
    pub loss_full: f64,
    pub descent_grad_norm: f64,
    pub workers: Vec<WorkerReport>,
    pub cost_units: f64,
}

impl DistStepReport {
    /// Smallest pairwise l2 distance between worker perturbations;
    /// 0.0 when there is only one worker.
    pub fn min_pairwise_eps_distance(&self) -> f64 {
        let mut min = f64::INFINITY;
        for i in 0..self.workers.len() {
            for j in i + 1..self.workers.len() {
                let mut diff = self.workers[i].perturbation.clone();
                diff.axpy(-1.0, &self.workers[j].perturbation).unwrap();
                min = min.min(diff.l2_norm());
            }
        }
        if min.is_finite() {
            min
        } else {
            0.0
        }
    }
}

pub fn distsim_step(
    model: &mut Model,
    state: &mut OptimState,
    batch: &Batch,
    config: &OptimConfig,
    workers: usize,
) -> Result<DistStepReport> {
    let b = batch.labels.len();
    if workers == 0 {
        return Err(Error::InvalidArgument("need at least one worker".into()));
    }
    if !b.is_multiple_of(workers) {
        return Err(Error::InvalidArgument(format!(
            "batch {b} not divisible by {workers} workers"
        )));
    }
    let shard = b / workers;
    let (k1_local, k2_local) = (config.k1 / workers, config.k2 / workers);
    if k1_local == 0 || k2_local == 0 {
        return Err(Error::InvalidArgument(format!(
            "per-worker subset sizes K1/W={} K2/W={} must be >= 1",
            config.k1 as f64 / workers as f64,
            config.k2 as f64 / workers as f64
        )));
    }
    if k1_local > shard || k2_local > shard {
        return Err(Error::InvalidArgument(format!(
            "per-worker subsets ({k1_local}, {k2_local}) exceed shard size {shard}"
        )));
    }

    let step = state.step_count();
    let mut grad_sum = ParamVector::zeros(model.param_len());
    let mut worker_reports = Vec::with_capacity(workers);
    let mut loss_sum = 0.0;

    for w in 0..workers {
        let rows: Vec<usize> = (w * shard..(w + 1) * shard).collect();
        let shard_inputs = batch.inputs.gather_rows(&rows)?;
        let shard_labels: Vec<usize> = rows.iter().map(|&i| batch.labels[i]).collect();
        let mut task = TaskBatch::new(model, &shard_inputs, &shard_labels)?;

        let losses = task.per_example_losses()?;
        loss_sum += losses.iter().sum::<f64>();
        let (ascent_set, descent_set) = match config.selection {
            Selection::TopK => (
                select_topk(&losses, k1_local)?,
                select_topk(&losses, k2_local)?,
            ),
            Selection::Random => (
                select_random(&losses, k1_local, state.selection_rng())?,
                select_random(&losses, k2_local, state.selection_rng())?,
            ),
        };

        let (_, ascent_grad) = task.loss_and_grad(&ascent_set)?;
        let (eps, degenerate) = compute_perturbation(&ascent_grad, config.rho, config.zero_grad_tol)?;

        let saved = task.params();
        task.add_params(&eps)?;
        let descent = task.loss_and_grad(&descent_set);
        task.set_params(&saved)?;
        let (_, descent_grad) = descent?;

        grad_sum.axpy(1.0, &descent_grad)?;
        worker_reports.push(WorkerReport {
            worker: w,
            eps_norm: eps.l2_norm(),
            degenerate_ascent: degenerate,
            descent_indices: descent_set.as_slice().iter().map(|&i| i + w * shard).collect(),
            perturbation: eps,
        });
    }

    let averaged = grad_sum.scaled(1.0 / workers as f64);
    let descent_grad_norm = averaged.l2_norm();
    let direction = base_update_direction(state, &averaged, || model.params_flat(), config)?;
    model.add_in_place(&direction)?;

    Ok(DistStepReport {
        step,
        loss_full: loss_sum / b as f64,
        descent_grad_norm,
        workers: worker_reports,
        cost_units: CostModel::default().units(b, config.k1, config.k2, CostMethod::Ksam),
    })
}
