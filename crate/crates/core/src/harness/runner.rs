//! Config-driven entry points: train, align, ablate and distsim.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::data::{
    load_csv, load_idx, synth_blobs, synth_images, BatchStream, Dataset, NormStats,
};
use crate::error::{Error, Result};
use crate::harness::config::FlatConfig;
use crate::harness::distsim::distsim_step;
use crate::harness::metrics::{MetricsWriter, RunSummary};
use crate::instrument::{
    ascent_alignment_probe, descent_alignment_probe, sharpness_probe, AlignmentRecord,
    AlignmentReference, CostMethod, CostModel,
};
use crate::model::{Model, ModelConfig};
use crate::optim::{
    k2_schedule, run_step, K2Decay, OptimConfig, OptimState, Selection, StepMethod, TaskBatch,
};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Sgd,
    TopkSgd,
    Sam,
    Ksam,
    KsamStar,
    RandSam,
}

impl Method {
    pub fn parse(name: &str) -> Result<Method> {
        match name {
            "sgd" => Ok(Method::Sgd),
            "topk-sgd" => Ok(Method::TopkSgd),
            "sam" => Ok(Method::Sam),
            "ksam" => Ok(Method::Ksam),
            "ksam-star" => Ok(Method::KsamStar),
            "rand-sam" => Ok(Method::RandSam),
            other => Err(Error::Config(format!(
                "unknown method {other:?} (expected sgd | topk-sgd | sam | ksam | ksam-star | rand-sam)"
            ))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Method::Sgd => "sgd",
            Method::TopkSgd => "topk-sgd",
            Method::Sam => "sam",
            Method::Ksam => "ksam",
            Method::KsamStar => "ksam-star",
            Method::RandSam => "rand-sam",
        }
    }

    pub fn step_method(&self) -> StepMethod {
        match self {
            Method::Sgd => StepMethod::Sgd,
            Method::TopkSgd => StepMethod::TopkSgd,
            Method::Sam => StepMethod::Sam,
            Method::Ksam | Method::KsamStar | Method::RandSam => StepMethod::Ksam,
        }
    }

    fn cost_method(&self) -> CostMethod {
        match self {
            Method::Sgd => CostMethod::Sgd,
            Method::Sam => CostMethod::Sam,
            _ => CostMethod::Ksam,
        }
    }
}

/// A fully validated run: datasets materialized, model and optimizer
/// configs resolved, output paths known.
#[derive(Clone)]
pub struct RunSetup {
    pub config: FlatConfig,
    pub method: Method,
    pub train: Dataset,
    pub test: Option<Dataset>,
    pub model_config: ModelConfig,
    pub optim: OptimConfig,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub run_id: String,
    pub probe_every: u64,
    pub eval_every: usize,
    pub dry_run: bool,
    pub cosine_lr: bool,
    pub shuffle: bool,
    pub drop_last: bool,
    pub workers: usize,
    pub cost_model: CostModel,
    pub probe_ks: Vec<usize>,
    pub probe_repeats: usize,
    pub probe_rho: f64,
}

fn resolve_datasets(config: &FlatConfig, seed: u64) -> Result<(Dataset, Option<Dataset>)> {
    let kind = config.str_or("task.kind", "blobs");
    let data_seed = config.u64_or("task.data_seed", seed)?;
    let (mut train, mut test) = match kind.as_str() {
        "blobs" => {
            let classes = config.usize_or("task.classes", 2)?;
            let per_class = config.usize_or("task.per_class", 500)?;
            let test_per_class = config.usize_or("task.test_per_class", per_class.div_ceil(5))?;
            let dim = config.usize_or("task.dim", 2)?;
            let separation = config.f64_or("task.separation", 4.0)?;
            (
                synth_blobs(classes, per_class, dim, separation, data_seed, 0)?,
                Some(synth_blobs(classes, test_per_class, dim, separation, data_seed, 1)?),
            )
        }
        "images" => {
            let classes = config.usize_or("task.classes", 10)?;
            let per_class = config.usize_or("task.per_class", 1000)?;
            let test_per_class = config.usize_or("task.test_per_class", per_class)?;
            let noise = config.f64_or("task.noise", 0.3)?;
            let class_scale = config.f64_or("task.class_scale", 0.35)?;
            (
                synth_images(classes, per_class, noise, class_scale, data_seed, 0)?,
                Some(synth_images(classes, test_per_class, noise, class_scale, data_seed, 1)?),
            )
        }
        "idx" => {
            let images = config
                .get("task.idx_images")
                .ok_or_else(|| Error::Config("task.idx_images is required for kind=idx".into()))?;
            let labels = config
                .get("task.idx_labels")
                .ok_or_else(|| Error::Config("task.idx_labels is required for kind=idx".into()))?;
            let train = load_idx(Path::new(images), Path::new(labels))?;
            let test = match (config.get("task.idx_test_images"), config.get("task.idx_test_labels")) {
                (Some(ti), Some(tl)) => Some(load_idx(Path::new(ti), Path::new(tl))?),
                (None, None) => None,
                _ => {
                    return Err(Error::Config(
                        "need both task.idx_test_images and task.idx_test_labels".into(),
                    ))
                }
            };
            (train, test)
        }
        "csv" => {
            let path = config
                .get("task.csv_path")
                .ok_or_else(|| Error::Config("task.csv_path is required for kind=csv".into()))?;
            (load_csv(Path::new(path))?, None)
        }
        other => {
            return Err(Error::Config(format!(
                "unknown task.kind {other:?} (expected blobs | images | idx | csv)"
            )))
        }
    };
    if config.bool_or("task.normalize", true)? {
        let stats: NormStats = train.compute_stats();
        train.normalize_with(&stats)?;
        if let Some(t) = test.as_mut() {
            t.normalize_with(&stats)?;
        }
    }
    Ok((train, test))
}

fn resolve_model(config: &FlatConfig, train: &Dataset, seed: u64) -> Result<ModelConfig> {
    let arch = config.str_or("model.arch", "mlp");
    let classes = train.classes();
    match arch.as_str() {
        "mlp" => {
            let hidden = config.usize_list_or("model.hidden", &[256])?;
            Ok(ModelConfig::mlp(train.feature_len(), hidden, classes, seed))
        }
        "convnet" => {
            let shape = train.inputs().shape();
            if shape.len() != 3 {
                return Err(Error::Config(format!(
                    "convnet needs [N, H, W] image data, dataset is {shape:?}"
                )));
            }
            let channels = config.usize_list_or("model.channels", &[8, 16])?;
            if channels.len() != 2 {
                return Err(Error::Config("model.channels wants exactly two values".into()));
            }
            let fc = config.usize_or("model.fc", 64)?;
            Ok(ModelConfig::convnet(
                [1, shape[1], shape[2]],
                [channels[0], channels[1]],
                fc,
                classes,
                seed,
            ))
        }
        other => Err(Error::Config(format!(
            "unknown model.arch {other:?} (expected mlp | convnet)"
        ))),
    }
}

/// Validates the whole config and materializes datasets. No side effects
/// on the filesystem happen before this succeeds.
pub fn resolve(config: FlatConfig) -> Result<RunSetup> {
    let method = Method::parse(&config.str_or("run.method", "sgd"))?;
    let seed = config.u64_or("run.seed", 0)?;
    let epochs = config.usize_or("run.epochs", 5)?;
    let batch = config.usize_or("run.batch", 128)?;
    if epochs == 0 {
        return Err(Error::Config("run.epochs must be >= 1".into()));
    }

    let (train, test) = resolve_datasets(&config, seed)?;
    if batch > train.len() {
        return Err(Error::Config(format!(
            "run.batch {batch} exceeds {} training examples",
            train.len()
        )));
    }
    let model_config = resolve_model(&config, &train, seed)?;

    let selection = match (method, config.str_or("optim.selection", "topk").as_str()) {
        (Method::RandSam, _) => Selection::Random,
        (_, "topk") => Selection::TopK,
        (_, "random") => Selection::Random,
        (_, other) => {
            return Err(Error::Config(format!(
                "unknown optim.selection {other:?} (expected topk | random)"
            )))
        }
    };
    let k2_decay = if method == Method::KsamStar {
        K2Decay::HalveAtFraction(config.f64_or("optim.k2_halve_at", 0.5)?)
    } else {
        K2Decay::None
    };
    let optim = OptimConfig {
        lr: config.f64_or("optim.lr", 0.1)?,
        momentum: config.f64_or("optim.momentum", 0.9)?,
        weight_decay: config.f64_or("optim.weight_decay", 0.0)?,
        rho: config.f64_or("optim.rho", 0.05)?,
        k1: config.usize_or("optim.k1", batch.div_ceil(8))?,
        k2: config.usize_or("optim.k2", batch.div_ceil(2))?,
        k2_decay,
        selection,
        zero_grad_tol: config.f64_or("optim.zero_grad_tol", 1e-12)?,
    };
    optim.validate(batch)?;

    let lr_schedule = config.str_or("optim.lr_schedule", "constant");
    let cosine_lr = match lr_schedule.as_str() {
        "constant" => false,
        "cosine" => true,
        other => {
            return Err(Error::Config(format!(
                "unknown optim.lr_schedule {other:?} (expected constant | cosine)"
            )))
        }
    };

    let cost_model = CostModel::new(
        config.f64_or("cost.beta", CostModel::default().backward_ratio)?,
        config.f64_or("cost.sigma", 0.0)?,
    )?;

    let run_id = match config.get("run.id") {
        Some(id) => id.to_string(),
        None => {
            let nanos = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_nanos())
                .unwrap_or(0);
            format!("{}-s{}-{:x}", method.label(), seed, nanos)
        }
    };

    let probe_rho_default = config.f64_or("optim.rho", 0.05)?;
    Ok(RunSetup {
        method,
        train,
        test,
        model_config,
        optim,
        epochs,
        batch,
        seed,
        out_dir: PathBuf::from(config.str_or("run.out", "runs/out")),
        run_id,
        probe_every: config.u64_or("run.probe_every", 0)?,
        eval_every: config.usize_or("run.eval_every", 1)?.max(1),
        dry_run: config.bool_or("run.dry_run", false)?,
        cosine_lr,
        shuffle: config.bool_or("run.shuffle", true)?,
        drop_last: config.bool_or("run.drop_last", true)?,
        workers: config.usize_or("run.workers", 1)?,
        probe_ks: config.usize_list_or("probe.ks", &[16, 32, 64])?,
        probe_repeats: config.usize_or("probe.repeats", 10)?,
        probe_rho: config.f64_or("probe.rho", probe_rho_default)?,
        cost_model,
        config,
    })
}

/// Top-1 accuracy over a dataset, evaluated in inference mode in chunks.
pub fn evaluate_accuracy(model: &Model, dataset: &Dataset, chunk: usize) -> Result<f64> {
    let n = dataset.len();
    let classes = dataset.classes();
    let mut correct = 0usize;
    let mut at = 0;
    while at < n {
        let hi = (at + chunk).min(n);
        let rows: Vec<usize> = (at..hi).collect();
        let inputs = dataset.inputs().gather_rows(&rows)?;
        let logits = model.forward_infer(&inputs)?;
        for (row, &target) in logits.data().chunks(classes).zip(&dataset.labels()[at..hi]) {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best == target {
                correct += 1;
            }
        }
        at = hi;
    }
    Ok(correct as f64 / n as f64)
}

fn effective_lr(setup: &RunSetup, t: u64, total: u64) -> f64 {
    if setup.cosine_lr && total > 0 {
        setup.optim.lr * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos()) / 2.0
    } else {
        setup.optim.lr
    }
}

fn alignment_value_name(record: &AlignmentRecord) -> String {
    let mode = match record.reference {
        AlignmentReference::SgdDescent => "full".to_string(),
        _ => match record.mode {
            Selection::TopK => "topk".to_string(),
            Selection::Random => "random".to_string(),
        },
    };
    format!("cos_{}_{}_k{}", record.reference.label(), mode, record.k)
}

/// Probes emitted during cmd_train / cmd_align at the probe cadence.
enum ProbeKind {
    None,
    Sharpness,
    Alignment,
}

fn run_training(setup: &RunSetup, metrics: &mut MetricsWriter, probes: ProbeKind) -> Result<RunSummary> {
    let wall_start = Instant::now();
    let stream = BatchStream::new(&setup.train, setup.batch, setup.seed, setup.shuffle, setup.drop_last)?;
    let steps_per_epoch = stream.batches_per_epoch() as u64;
    if steps_per_epoch == 0 {
        return Err(Error::Config("drop_last leaves no full batch".into()));
    }
    let total_steps = steps_per_epoch * setup.epochs as u64;
    let mut total_cost = 0.0;

    if setup.dry_run {
        // Schedule and cost accounting only; no model, no gradients.
        let mut t = 0u64;
        for epoch in 0..setup.epochs {
            let k2_eff = k2_schedule(epoch as u64, setup.epochs as u64, &setup.optim);
            metrics.write(t, epoch as u64, "schedule", "k2_effective", k2_eff as f64)?;
            for _ in 0..steps_per_epoch {
                let cost = setup.cost_model.units(
                    setup.batch,
                    setup.optim.k1,
                    k2_eff,
                    setup.method.cost_method(),
                );
                total_cost += cost;
                metrics.write(t, epoch as u64, "cost", "units", cost)?;
                t += 1;
            }
        }
        metrics.flush()?;
        let summary = RunSummary {
            run_id: setup.run_id.clone(),
            method: setup.method.label().to_string(),
            final_test_accuracy: None,
            total_wall_clock_ns: wall_start.elapsed().as_nanos() as u64,
            total_cost_units: total_cost,
            config_hash: setup.config.hash(),
        };
        summary.write_atomic(&setup.out_dir)?;
        return Ok(summary);
    }

    let mut model = Model::init(setup.model_config.clone())?;
    let mut state = OptimState::new(model.param_len(), setup.seed);
    let mut probe_rng = SplitMix64::from_seed_stream(setup.seed, 0xa119);
    let step_method = setup.method.step_method();
    let mut final_acc = None;
    let mut t = 0u64;

    for epoch in 0..setup.epochs {
        let k2_eff = k2_schedule(epoch as u64, setup.epochs as u64, &setup.optim);
        if setup.method == Method::KsamStar {
            metrics.write(t, epoch as u64, "schedule", "k2_effective", k2_eff as f64)?;
        }
        for batch in stream.batches(epoch as u64)? {
            let mut step_config = setup.optim.clone();
            step_config.lr = effective_lr(setup, t, total_steps);
            step_config.k2 = k2_eff;

            let report = {
                let mut task = TaskBatch::new(&mut model, &batch.inputs, &batch.labels)?;
                run_step(step_method, &mut task, &mut state, &step_config)?
            };
            let cost = setup.cost_model.units(
                setup.batch,
                if step_method == StepMethod::Ksam { step_config.k1 } else { 0 },
                if matches!(step_method, StepMethod::Ksam | StepMethod::TopkSgd) {
                    step_config.k2
                } else {
                    0
                },
                setup.method.cost_method(),
            );
            total_cost += cost;
            metrics.write(t, epoch as u64, "train", "loss_full", report.loss_full)?;
            metrics.write(t, epoch as u64, "cost", "units", cost)?;
            metrics.write(t, epoch as u64, "time", "step_ns", report.phases.total_ns as f64)?;
            if report.eps_norm != 0.0 || report.degenerate_ascent {
                metrics.write(t, epoch as u64, "train", "eps_norm", report.eps_norm)?;
            }
            if report.degenerate_ascent {
                metrics.write(t, epoch as u64, "train", "degenerate_ascent", 1.0)?;
            }

            if setup.probe_every > 0 && t.is_multiple_of(setup.probe_every) {
                match probes {
                    ProbeKind::None => {}
                    ProbeKind::Sharpness => {
                        let mut task = TaskBatch::new(&mut model, &batch.inputs, &batch.labels)?;
                        let sharp = sharpness_probe(&mut task, setup.probe_rho, setup.optim.zero_grad_tol)?;
                        metrics.write(t, epoch as u64, "probe", "sharpness", sharp.value)?;
                    }
                    ProbeKind::Alignment => {
                        let mut task = TaskBatch::new(&mut model, &batch.inputs, &batch.labels)?;
                        let probed = ascent_alignment_probe(
                            &mut task,
                            t,
                            &setup.probe_ks,
                            &[Selection::TopK, Selection::Random],
                            setup.probe_repeats,
                            &mut probe_rng,
                            setup.optim.zero_grad_tol,
                        )
                        .and_then(|mut records| {
                            records.extend(descent_alignment_probe(
                                &mut task,
                                t,
                                k2_eff,
                                setup.probe_rho,
                                setup.optim.zero_grad_tol,
                            )?);
                            Ok(records)
                        });
                        match probed {
                            Ok(records) => {
                                for record in &records {
                                    metrics.write(
                                        t,
                                        epoch as u64,
                                        "align",
                                        &alignment_value_name(record),
                                        record.cosine,
                                    )?;
                                }
                            }
                            // A converged model can leave nothing to probe;
                            // record that and keep training.
                            Err(Error::Degenerate(_)) => {
                                metrics.write(t, epoch as u64, "align", "degenerate_probe", 1.0)?;
                            }
                            Err(e) => return Err(e),
                        }
                    }
                }
            }
            t += 1;
        }

        if (epoch + 1) % setup.eval_every == 0 || epoch + 1 == setup.epochs {
            if let Some(test) = &setup.test {
                let acc = evaluate_accuracy(&model, test, 256)?;
                final_acc = Some(acc);
                metrics.write(t, epoch as u64, "eval", "test_accuracy", acc)?;
            }
        }
        metrics.flush()?;
    }

    model.save_checkpoint(&setup.out_dir.join(format!("checkpoint-{}.ckpt", setup.run_id)))?;
    let summary = RunSummary {
        run_id: setup.run_id.clone(),
        method: setup.method.label().to_string(),
        final_test_accuracy: final_acc,
        total_wall_clock_ns: wall_start.elapsed().as_nanos() as u64,
        total_cost_units: total_cost,
        config_hash: setup.config.hash(),
    };
    summary.write_atomic(&setup.out_dir)?;
    Ok(summary)
}

pub fn cmd_train(setup: &RunSetup) -> Result<RunSummary> {
    let mut metrics = MetricsWriter::append(&setup.out_dir, &setup.run_id)?;
    let probes = if setup.probe_every > 0 {
        ProbeKind::Sharpness
    } else {
        ProbeKind::None
    };
    run_training(setup, &mut metrics, probes)
}

pub fn cmd_align(setup: &RunSetup) -> Result<RunSummary> {
    let mut metrics = MetricsWriter::append(&setup.out_dir, &setup.run_id)?;
    let mut probed = setup.clone();
    if probed.probe_every == 0 {
        // Default cadence: once per epoch.
        let stream = BatchStream::new(&probed.train, probed.batch, probed.seed, probed.shuffle, probed.drop_last)?;
        probed.probe_every = stream.batches_per_epoch() as u64;
    }
    run_training(&probed, &mut metrics, ProbeKind::Alignment)
}

/// One ablation grid cell result.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub k1: usize,
    pub k2: usize,
    pub selection: Selection,
    pub seeds: usize,
    pub acc_mean: f64,
    pub acc_stderr: f64,
    pub cost_units_per_step: f64,
    pub cost_ratio_vs_sgd: f64,
    pub wall_s_mean: f64,
}

/// Runs the K1 x K2 x selection grid (plus the K1=K2=B SAM anchor cell)
/// over several seeds and writes one summary row per cell.
pub fn cmd_ablate(setup: &RunSetup) -> Result<Vec<AblationRow>> {
    let k1_grid = setup.config.usize_list_or("ablate.k1_grid", &[setup.optim.k1])?;
    let k2_grid = setup.config.usize_list_or("ablate.k2_grid", &[setup.optim.k2])?;
    let selections = setup.config.str_list_or("ablate.selections", &["topk"]);
    let seeds = setup.config.usize_or("ablate.seeds", 3)?.max(1);
    let epochs = setup.config.usize_or("ablate.epochs", setup.epochs)?;

    let mut cells: Vec<(usize, usize, Selection)> = Vec::new();
    for sel_name in &selections {
        let sel = match sel_name.as_str() {
            "topk" => Selection::TopK,
            "random" => Selection::Random,
            other => return Err(Error::Config(format!("unknown selection {other:?}"))),
        };
        for &k1 in &k1_grid {
            for &k2 in &k2_grid {
                cells.push((k1, k2, sel));
            }
        }
    }
    // SAM anchor: full-batch subsets.
    if !cells.contains(&(setup.batch, setup.batch, Selection::TopK)) {
        cells.push((setup.batch, setup.batch, Selection::TopK));
    }

    let mut rows = Vec::new();
    for (k1, k2, sel) in cells {
        let mut accs = Vec::new();
        let mut walls = Vec::new();
        for seed_offset in 0..seeds {
            let mut cell = setup.clone();
            cell.method = if sel == Selection::Random { Method::RandSam } else { Method::Ksam };
            cell.optim.k1 = k1;
            cell.optim.k2 = k2;
            cell.optim.selection = sel;
            cell.optim.validate(cell.batch)?;
            cell.epochs = epochs;
            cell.seed = setup.seed + seed_offset as u64;
            cell.model_config.seed = cell.seed;
            cell.run_id = format!("{}-ablate-k{}-{}-{:?}-s{}", setup.run_id, k1, k2, sel, cell.seed);

            let start = Instant::now();
            let outcome = silent_train(&cell)?;
            walls.push(start.elapsed().as_secs_f64());
            accs.push(outcome.unwrap_or(f64::NAN));
        }
        let n = accs.len() as f64;
        let mean = accs.iter().sum::<f64>() / n;
        let var = if accs.len() > 1 {
            accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let estimate = setup.cost_model.estimate(setup.batch, k1, k2, CostMethod::Ksam);
        let prefix = if sel == Selection::Random { "Rand" } else { "K" };
        rows.push(AblationRow {
            label: format!("{prefix}-{k1}/{k2}"),
            k1,
            k2,
            selection: sel,
            seeds: accs.len(),
            acc_mean: mean,
            acc_stderr: (var / n).sqrt(),
            cost_units_per_step: estimate.units,
            cost_ratio_vs_sgd: estimate.ratio_vs_sgd,
            wall_s_mean: walls.iter().sum::<f64>() / n,
        });
    }

    write_ablation_csv(&setup.out_dir, &setup.run_id, &rows)?;
    Ok(rows)
}

/// Trains without writing metrics; returns the final test accuracy.
fn silent_train(setup: &RunSetup) -> Result<Option<f64>> {
    let stream = BatchStream::new(&setup.train, setup.batch, setup.seed, setup.shuffle, setup.drop_last)?;
    let steps_per_epoch = stream.batches_per_epoch() as u64;
    let total_steps = steps_per_epoch * setup.epochs as u64;
    let mut model = Model::init(setup.model_config.clone())?;
    let mut state = OptimState::new(model.param_len(), setup.seed);
    let step_method = setup.method.step_method();
    let mut t = 0u64;
    for epoch in 0..setup.epochs {
        let k2_eff = k2_schedule(epoch as u64, setup.epochs as u64, &setup.optim);
        for batch in stream.batches(epoch as u64)? {
            let mut step_config = setup.optim.clone();
            step_config.lr = effective_lr(setup, t, total_steps);
            step_config.k2 = k2_eff;
            let mut task = TaskBatch::new(&mut model, &batch.inputs, &batch.labels)?;
            run_step(step_method, &mut task, &mut state, &step_config)?;
            t += 1;
        }
    }
    match &setup.test {
        Some(test) => Ok(Some(evaluate_accuracy(&model, test, 256)?)),
        None => Ok(None),
    }
}

fn write_ablation_csv(dir: &Path, run_id: &str, rows: &[AblationRow]) -> Result<()> {
    use std::io::Write as _;
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("ablate-{run_id}.csv"));
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "method,k1,k2,selection,seeds,acc_mean,acc_stderr,cost_units_per_step,cost_ratio_vs_sgd,wall_s_mean"
    )?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.label,
            r.k1,
            r.k2,
            match r.selection {
                Selection::TopK => "topk",
                Selection::Random => "random",
            },
            r.seeds,
            r.acc_mean,
            r.acc_stderr,
            r.cost_units_per_step,
            r.cost_ratio_vs_sgd,
            r.wall_s_mean
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Simulated data-parallel K-SAM training run.
pub fn cmd_distsim(setup: &RunSetup) -> Result<RunSummary> {
    let wall_start = Instant::now();
    let workers = setup.workers;
    if !setup.batch.is_multiple_of(workers) {
        return Err(Error::Config(format!(
            "run.batch {} must be divisible by run.workers {workers}",
            setup.batch
        )));
    }
    let mut metrics = MetricsWriter::append(&setup.out_dir, &setup.run_id)?;
    let stream = BatchStream::new(&setup.train, setup.batch, setup.seed, setup.shuffle, setup.drop_last)?;
    let mut model = Model::init(setup.model_config.clone())?;
    let mut state = OptimState::new(model.param_len(), setup.seed);
    let mut total_cost = 0.0;
    let mut final_acc = None;
    let mut t = 0u64;

    for epoch in 0..setup.epochs {
        let k2_eff = k2_schedule(epoch as u64, setup.epochs as u64, &setup.optim);
        for batch in stream.batches(epoch as u64)? {
            let mut step_config = setup.optim.clone();
            step_config.k2 = k2_eff;
            let report = distsim_step(&mut model, &mut state, &batch, &step_config, workers)?;
            let cost = setup
                .cost_model
                .units(setup.batch, step_config.k1, step_config.k2, CostMethod::Ksam);
            total_cost += cost;
            metrics.write(t, epoch as u64, "train", "loss_full", report.loss_full)?;
            metrics.write(t, epoch as u64, "cost", "units", cost)?;
            for w in &report.workers {
                metrics.write(t, epoch as u64, "dist", &format!("eps_norm_w{}", w.worker), w.eps_norm)?;
            }
            if workers > 1 {
                metrics.write(
                    t,
                    epoch as u64,
                    "dist",
                    "min_pairwise_eps_distance",
                    report.min_pairwise_eps_distance(),
                )?;
            }
            t += 1;
        }
        if let Some(test) = &setup.test {
            let acc = evaluate_accuracy(&model, test, 256)?;
            final_acc = Some(acc);
            metrics.write(t, epoch as u64, "eval", "test_accuracy", acc)?;
        }
        metrics.flush()?;
    }

    model.save_checkpoint(&setup.out_dir.join(format!("checkpoint-{}.ckpt", setup.run_id)))?;
    let summary = RunSummary {
        run_id: setup.run_id.clone(),
        method: format!("distsim-{}-w{}", setup.method.label(), workers),
        final_test_accuracy: final_acc,
        total_wall_clock_ns: wall_start.elapsed().as_nanos() as u64,
        total_cost_units: total_cost,
        config_hash: setup.config.hash(),
    };
    summary.write_atomic(&setup.out_dir)?;
    Ok(summary)
}
