//! Diagnostics: gradient-alignment probes, a sharpness estimate, the
//! analytic cost model and wall-clock statistics.
//!
//! The probes are read-only. They perturb and restore parameters internally
//! but leave the model, optimizer state and batch untouched, so they can be
//! interleaved with training at any cadence.

use crate::error::{Error, Result};
use crate::optim::{
    compute_perturbation, select_random, select_topk, Objective, Selection, StepReport,
    SubsetIndices,
};
use crate::params::ParamVector;
use crate::rng::SplitMix64;

/// What a recorded cosine was measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignmentReference {
    /// Subset ascent gradient vs. the full-batch ascent gradient at w.
    FullBatchAscent,
    /// Subset descent gradient vs. the full-batch descent gradient, both at
    /// the perturbed weights.
    SamDescent,
    /// Full-batch gradient at w vs. the full-batch descent gradient at the
    /// perturbed weights.
    SgdDescent,
}

impl AlignmentReference {
    pub fn label(&self) -> &'static str {
        match self {
            AlignmentReference::FullBatchAscent => "full_ascent",
            AlignmentReference::SamDescent => "sam_descent",
            AlignmentReference::SgdDescent => "sgd_descent",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AlignmentRecord {
    pub step: u64,
    pub mode: Selection,
    pub k: usize,
    /// In [-1, 1] up to roundoff; random-mode records hold the mean over
    /// the configured number of draws.
    pub cosine: f64,
    pub reference: AlignmentReference,
}

/// Cosine similarity `g1 . g2 / (||g1|| ||g2||)`.
///
/// Identical and exactly-negated inputs short-circuit to +/-1 so that
/// subset == full-batch probes report alignment 1 exactly.
pub fn cosine(g1: &ParamVector, g2: &ParamVector) -> Result<f64> {
    if g1.len() != g2.len() {
        return Err(Error::shape(
            "cosine",
            format!("length {} vs {}", g1.len(), g2.len()),
        ));
    }
    let (n1, n2) = (g1.l2_norm(), g2.l2_norm());
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::InvalidArgument("cosine of a zero vector".into()));
    }
    let (a, b) = (g1.as_slice(), g2.as_slice());
    if a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()) {
        return Ok(1.0);
    }
    if a.iter().zip(b).all(|(x, y)| (-x).to_bits() == y.to_bits()) {
        return Ok(-1.0);
    }
    Ok(g1.dot(g2)? / (n1 * n2))
}

/// Cosine between subset ascent gradients and the full-batch ascent
/// gradient at the current weights, for each (k, mode) pair. Random-mode
/// cosines are averaged over `repeats` draws.
pub fn ascent_alignment_probe(
    obj: &mut impl Objective,
    step: u64,
    ks: &[usize],
    modes: &[Selection],
    repeats: usize,
    rng: &mut SplitMix64,
    tol: f64,
) -> Result<Vec<AlignmentRecord>> {
    let b = obj.num_examples();
    if ks.iter().any(|&k| k == 0 || k > b) {
        return Err(Error::InvalidArgument(format!("alignment k out of range for batch {b}")));
    }
    let full = SubsetIndices::full(b);
    let (_, g_full) = obj.loss_and_grad(&full)?;
    if g_full.l2_norm() <= tol {
        return Err(Error::Degenerate("ascent alignment probe (full batch)".into()));
    }
    let losses = obj.per_example_losses()?;
    let mut records = Vec::new();
    for &mode in modes {
        for &k in ks {
            let cos = match mode {
                Selection::TopK => {
                    let subset = select_topk(&losses, k)?;
                    let (_, g_sub) = obj.loss_and_grad(&subset)?;
                    cosine(&g_sub, &g_full)?
                }
                Selection::Random => {
                    let reps = repeats.max(1);
                    let mut acc = 0.0;
                    for _ in 0..reps {
                        let subset = select_random(&losses, k, rng)?;
                        let (_, g_sub) = obj.loss_and_grad(&subset)?;
                        acc += cosine(&g_sub, &g_full)?;
                    }
                    acc / reps as f64
                }
            };
            records.push(AlignmentRecord {
                step,
                mode,
                k,
                cosine: cos,
                reference: AlignmentReference::FullBatchAscent,
            });
        }
    }
    Ok(records)
}

/// Descent-step alignment at a shared perturbation: the full-batch ascent
/// gradient defines one epsilon-hat, and both the top-K2 and full-batch
/// descent gradients are evaluated at w + epsilon-hat. Also reports how the
/// unperturbed full-batch gradient (an SGD descent direction) aligns with
/// the SAM descent gradient. Parameters are restored exactly afterwards.
pub fn descent_alignment_probe(
    obj: &mut impl Objective,
    step: u64,
    k2: usize,
    rho: f64,
    tol: f64,
) -> Result<Vec<AlignmentRecord>> {
    let b = obj.num_examples();
    if k2 == 0 || k2 > b {
        return Err(Error::InvalidArgument(format!("K2={k2} out of range for batch {b}")));
    }
    let losses = obj.per_example_losses()?;
    let descent_set = select_topk(&losses, k2)?;
    let full = SubsetIndices::full(b);
    let (_, g_at_w) = obj.loss_and_grad(&full)?;
    let (eps, degenerate) = compute_perturbation(&g_at_w, rho, tol)?;
    if degenerate {
        return Err(Error::Degenerate("descent alignment probe (ascent gradient)".into()));
    }
    let saved = obj.params();
    obj.add_params(&eps)?;
    let sam = obj.loss_and_grad(&full);
    let ksam = obj.loss_and_grad(&descent_set);
    obj.set_params(&saved)?;
    let (_, g_sam) = sam?;
    let (_, g_ksam) = ksam?;
    Ok(vec![
        AlignmentRecord {
            step,
            mode: Selection::TopK,
            k: k2,
            cosine: cosine(&g_ksam, &g_sam)?,
            reference: AlignmentReference::SamDescent,
        },
        AlignmentRecord {
            step,
            mode: Selection::TopK,
            k: b,
            cosine: cosine(&g_at_w, &g_sam)?,
            reference: AlignmentReference::SgdDescent,
        },
    ])
}

#[derive(Debug, Clone, Copy)]
pub struct SharpnessReport {
    /// First-order estimate `L(w + eps-hat) - L(w)` of the inner maximum.
    /// Can be negative; it is reported, not clamped.
    pub value: f64,
    pub degenerate: bool,
}

/// Loss increase along the normalized ascent direction.
pub fn sharpness_probe(obj: &mut impl Objective, rho: f64, tol: f64) -> Result<SharpnessReport> {
    if rho.is_nan() || rho <= 0.0 {
        return Err(Error::InvalidArgument(format!("rho must be > 0, got {rho}")));
    }
    let b = obj.num_examples();
    let base: f64 = {
        let losses = obj.per_example_losses()?;
        losses.iter().sum::<f64>() / b as f64
    };
    let full = SubsetIndices::full(b);
    let (_, grad) = obj.loss_and_grad(&full)?;
    let (eps, degenerate) = compute_perturbation(&grad, rho, tol)?;
    if degenerate {
        return Ok(SharpnessReport {
            value: 0.0,
            degenerate: true,
        });
    }
    let saved = obj.params();
    obj.add_params(&eps)?;
    let perturbed = obj.per_example_losses();
    obj.set_params(&saved)?;
    let perturbed = perturbed?.iter().sum::<f64>() / b as f64;
    Ok(SharpnessReport {
        value: perturbed - base,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostMethod {
    Sgd,
    Sam,
    Ksam,
}

/// Analytic per-step cost in forward-pass units: a forward pass costs 1 per
/// sample, a combined forward+backward costs `1 + backward_ratio`.
///
/// The default ratio 2.343 comes from measured per-step timings of a
/// regular forward pass (56.81 ms) against a forward+backward pass
/// (189.92 ms); it is a calibration parameter that can be re-derived for
/// any hardware with [`CostModel::from_timings`].
#[derive(Debug, Clone, Copy)]
pub struct CostModel {
    pub backward_ratio: f64,
    /// Extra per-sample cost of loss ranking and subset construction.
    pub selection_overhead: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            backward_ratio: 2.343,
            selection_overhead: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CostEstimate {
    pub units: f64,
    pub ratio_vs_sgd: f64,
}

impl CostModel {
    pub fn new(backward_ratio: f64, selection_overhead: f64) -> Result<Self> {
        if backward_ratio.is_nan() || backward_ratio <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "backward ratio must be > 0, got {backward_ratio}"
            )));
        }
        Ok(CostModel {
            backward_ratio,
            selection_overhead,
        })
    }

    /// Calibrates the ratio from a forward-only and a forward+backward
    /// timing of the same workload.
    pub fn from_timings(forward: f64, forward_backward: f64) -> Result<Self> {
        if forward.is_nan() || forward_backward.is_nan() || forward <= 0.0 || forward_backward <= forward {
            return Err(Error::InvalidArgument(
                "timings must satisfy 0 < forward < forward_backward".into(),
            ));
        }
        CostModel::new((forward_backward - forward) / forward, 0.0)
    }

    /// Cost units per step: SGD `B(1+beta)`, SAM `2B(1+beta)`, K-SAM
    /// `B + (K1+K2)(1+beta) + sigma*B`. `k1`/`k2` are ignored except for
    /// `Ksam` (and a gradient-free first pass with `k1 = 0` models top-k
    /// SGD).
    pub fn units(&self, batch: usize, k1: usize, k2: usize, method: CostMethod) -> f64 {
        let b = batch as f64;
        let fb = 1.0 + self.backward_ratio;
        match method {
            CostMethod::Sgd => b * fb,
            CostMethod::Sam => 2.0 * b * fb,
            CostMethod::Ksam => b + (k1 + k2) as f64 * fb + self.selection_overhead * b,
        }
    }

    pub fn estimate(&self, batch: usize, k1: usize, k2: usize, method: CostMethod) -> CostEstimate {
        let units = self.units(batch, k1, k2, method);
        CostEstimate {
            units,
            ratio_vs_sgd: units / self.units(batch, 0, 0, CostMethod::Sgd),
        }
    }

    /// K1 + K2 at which K-SAM costs exactly as much as SGD:
    /// `B * beta / (1 + beta)` (with zero selection overhead).
    pub fn equal_cost_frontier(&self, batch: usize) -> f64 {
        batch as f64 * self.backward_ratio / (1.0 + self.backward_ratio)
    }

    /// K1 + K2 below which K-SAM costs strictly less than SAM:
    /// `(2B(1+beta) - B) / (1+beta)`.
    pub fn sam_cost_frontier(&self, batch: usize) -> f64 {
        let b = batch as f64;
        let fb = 1.0 + self.backward_ratio;
        (2.0 * b * fb - b) / fb
    }
}

/// Median and mean of one timing series.
#[derive(Debug, Clone, Copy)]
pub struct PhaseStats {
    pub median_ns: u64,
    pub mean_ns: f64,
}

fn stats(mut xs: Vec<u64>) -> PhaseStats {
    if xs.is_empty() {
        return PhaseStats {
            median_ns: 0,
            mean_ns: 0.0,
        };
    }
    xs.sort_unstable();
    PhaseStats {
        median_ns: xs[xs.len() / 2],
        mean_ns: xs.iter().sum::<u64>() as f64 / xs.len() as f64,
    }
}

#[derive(Debug, Clone)]
pub struct WallclockReport {
    pub reps: usize,
    pub infer_forward: PhaseStats,
    pub selection: PhaseStats,
    pub ascent: PhaseStats,
    pub descent: PhaseStats,
    pub update: PhaseStats,
    pub total: PhaseStats,
}

/// Times repeated optimizer steps on an objective and aggregates per-phase
/// medians and means. The first `warmup` steps are discarded. Stepping
/// mutates the objective's parameters, so callers pass a scratch model.
pub fn wallclock_probe(
    obj: &mut impl Objective,
    state: &mut crate::optim::OptimState,
    config: &crate::optim::OptimConfig,
    method: crate::optim::StepMethod,
    reps: usize,
    warmup: usize,
) -> Result<WallclockReport> {
    let mut reports = Vec::with_capacity(reps);
    for rep in 0..warmup + reps {
        let report = crate::optim::run_step(method, obj, state, config)?;
        if rep >= warmup {
            reports.push(report);
        }
    }
    Ok(wallclock_stats(&reports))
}

/// Aggregates per-phase timings over a series of step reports.
pub fn wallclock_stats(reports: &[StepReport]) -> WallclockReport {
    WallclockReport {
        reps: reports.len(),
        infer_forward: stats(reports.iter().map(|r| r.phases.infer_forward_ns).collect()),
        selection: stats(reports.iter().map(|r| r.phases.selection_ns).collect()),
        ascent: stats(reports.iter().map(|r| r.phases.ascent_ns).collect()),
        descent: stats(reports.iter().map(|r| r.phases.descent_ns).collect()),
        update: stats(reports.iter().map(|r| r.phases.update_ns).collect()),
        total: stats(reports.iter().map(|r| r.phases.total_ns).collect()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_vec(v.to_vec())
    }

    #[test]
    fn cosine_identities() {
        let g = pv(&[0.3, -0.4, 1.2]);
        assert_eq!(cosine(&g, &g).unwrap(), 1.0);
        assert_eq!(cosine(&g, &g.negated()).unwrap(), -1.0);
        assert_eq!(cosine(&pv(&[1.0, 0.0]), &pv(&[0.0, 1.0])).unwrap(), 0.0);
    }

    #[test]
    fn cosine_zero_vector_errors() {
        let g = pv(&[1.0, 2.0]);
        assert!(cosine(&g, &pv(&[0.0, 0.0])).is_err());
        assert!(cosine(&pv(&[0.0, 0.0]), &g).is_err());
    }

    #[test]
    fn cosine_length_mismatch_errors() {
        assert!(cosine(&pv(&[1.0]), &pv(&[1.0, 2.0])).is_err());
    }

    proptest! {
        #[test]
        fn cosine_is_scale_invariant(
            xs in proptest::collection::vec(-10.0f64..10.0, 2..6),
            ys in proptest::collection::vec(-10.0f64..10.0, 2..6),
            a in prop_oneof![(-8.0f64..-0.25), (0.25f64..8.0)],
            b in prop_oneof![(-8.0f64..-0.25), (0.25f64..8.0)],
        ) {
            let n = xs.len().min(ys.len());
            let g1 = pv(&xs[..n]);
            let g2 = pv(&ys[..n]);
            prop_assume!(g1.l2_norm() > 1e-6 && g2.l2_norm() > 1e-6);
            let base = cosine(&g1, &g2).unwrap();
            let scaled = cosine(&g1.scaled(a), &g2.scaled(b)).unwrap();
            let expected = (a * b).signum() * base;
            prop_assert!((scaled - expected).abs() < 1e-9);
        }

        #[test]
        fn cosine_stays_in_range(
            xs in proptest::collection::vec(-100.0f64..100.0, 3),
            ys in proptest::collection::vec(-100.0f64..100.0, 3),
        ) {
            let g1 = pv(&xs);
            let g2 = pv(&ys);
            prop_assume!(g1.l2_norm() > 0.0 && g2.l2_norm() > 0.0);
            let c = cosine(&g1, &g2).unwrap();
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
        }
    }

    #[test]
    fn beta_from_measured_timings() {
        let model = CostModel::from_timings(56.81, 189.92).unwrap();
        assert!((model.backward_ratio - 2.343).abs() < 1e-3);
    }

    #[test]
    fn ksam_cost_ratio_reference_point() {
        let est = CostModel::default().estimate(128, 16, 64, CostMethod::Ksam);
        assert!((est.ratio_vs_sgd - 0.924).abs() < 1e-3, "ratio {}", est.ratio_vs_sgd);
    }

    #[test]
    fn sam_costs_twice_sgd_for_any_batch() {
        for b in [8, 32, 128, 512, 4096] {
            let est = CostModel::default().estimate(b, 0, 0, CostMethod::Sam);
            assert_eq!(est.ratio_vs_sgd, 2.0);
        }
    }

    #[test]
    fn cost_monotone_and_sam_frontier() {
        let model = CostModel::default();
        for b in [32usize, 64, 128, 256, 512] {
            let bound = model.sam_cost_frontier(b);
            let sam = model.units(b, 0, 0, CostMethod::Sam);
            let step = (b / 16).max(1);
            for k1 in (1..=b).step_by(step) {
                for k2 in (1..=b).step_by(step) {
                    let units = model.units(b, k1, k2, CostMethod::Ksam);
                    let total = (k1 + k2) as f64;
                    if total < bound - 1e-9 {
                        assert!(units < sam, "B={b} K1={k1} K2={k2}");
                    } else if total > bound + 1e-9 {
                        assert!(units >= sam, "B={b} K1={k1} K2={k2}");
                    }
                    // Strictly increasing in each subset size.
                    assert!(model.units(b, k1 + 1, k2, CostMethod::Ksam) > units);
                    assert!(model.units(b, k1, k2 + 1, CostMethod::Ksam) > units);
                }
            }
            // At the equal-cost frontier K-SAM matches SGD.
            let frontier = model.equal_cost_frontier(b);
            let at = model.units(b, 0, frontier.round() as usize, CostMethod::Ksam);
            let sgd = model.units(b, 0, 0, CostMethod::Sgd);
            assert!((at - sgd).abs() / sgd < 0.05);
        }
    }

    #[test]
    fn sharpness_requires_positive_rho() {
        struct Dummy;
        impl Objective for Dummy {
            fn num_examples(&self) -> usize {
                1
            }
            fn param_len(&self) -> usize {
                1
            }
            fn params(&self) -> ParamVector {
                ParamVector::zeros(1)
            }
            fn set_params(&mut self, _: &ParamVector) -> crate::Result<()> {
                Ok(())
            }
            fn add_params(&mut self, _: &ParamVector) -> crate::Result<()> {
                Ok(())
            }
            fn per_example_losses(&mut self) -> crate::Result<Vec<f64>> {
                Ok(vec![0.0])
            }
            fn loss_and_grad(&mut self, _: &SubsetIndices) -> crate::Result<(f64, ParamVector)> {
                Ok((0.0, ParamVector::zeros(1)))
            }
        }
        assert!(sharpness_probe(&mut Dummy, 0.0, 1e-12).is_err());
        // Zero gradient: degenerate, value 0.
        let report = sharpness_probe(&mut Dummy, 0.1, 1e-12).unwrap();
        assert!(report.degenerate);
        assert_eq!(report.value, 0.0);
    }

    /// Quadratic objective for the hand-computed sharpness value.
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
            pv(&[self.w])
        }
        fn set_params(&mut self, w: &ParamVector) -> crate::Result<()> {
            self.w = w.as_slice()[0];
            Ok(())
        }
        fn add_params(&mut self, v: &ParamVector) -> crate::Result<()> {
            self.w += v.as_slice()[0];
            Ok(())
        }
        fn per_example_losses(&mut self) -> crate::Result<Vec<f64>> {
            Ok(vec![self.w * self.w / 2.0])
        }
        fn loss_and_grad(&mut self, _: &SubsetIndices) -> crate::Result<(f64, ParamVector)> {
            Ok((self.w * self.w / 2.0, pv(&[self.w])))
        }
    }

    #[test]
    fn sharpness_quadratic_hand_oracle() {
        // L(w) = w^2/2 at w=1, rho=0.1: eps-hat = 0.1, L(1.1) - L(1) = 0.105.
        let mut quad = Quad { w: 1.0 };
        let report = sharpness_probe(&mut quad, 0.1, 1e-12).unwrap();
        assert!(!report.degenerate);
        assert!((report.value - 0.105).abs() < 1e-12);
        // Parameters restored.
        assert_eq!(quad.w, 1.0);
    }

    #[test]
    fn sharpness_shrinks_with_rho() {
        let mut quad = Quad { w: 1.0 };
        let big = sharpness_probe(&mut quad, 0.1, 1e-12).unwrap().value;
        let small = sharpness_probe(&mut quad, 1e-4, 1e-12).unwrap().value;
        assert!(small < big);
        assert!(small.abs() < 2e-4);
    }

    #[test]
    fn wallclock_stats_median() {
        let mut reports = Vec::new();
        for ns in [30u64, 10, 20] {
            let mut r = StepReport {
                step: 0,
                loss_full: 0.0,
                loss_ascent_subset: None,
                loss_descent_subset: None,
                ascent_grad_norm: None,
                eps_norm: 0.0,
                descent_grad_norm: 0.0,
                ascent_indices: None,
                descent_indices: None,
                degenerate_ascent: false,
                cost_units: 0.0,
                phases: Default::default(),
            };
            r.phases.total_ns = ns;
            reports.push(r);
        }
        let stats = wallclock_stats(&reports);
        assert_eq!(stats.total.median_ns, 20);
        assert_eq!(stats.total.mean_ns, 20.0);
    }
}
