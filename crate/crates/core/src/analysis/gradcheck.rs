//! Finite-difference check of the full objective with respect to sampled
//! model parameters.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::STNetModel;
use crate::scale_tree::CrossScaleGates;
use crate::supervision::{objective, MixedBatch};
use crate::tensor::{grad_check, GradCheckConfig, GradCheckReport, ParamId, ProbeOutcome, ProbeResult, TensorError};
use crate::{Error, Result};

/// Component labels in probe order.
pub const COMPONENTS: [&str; 4] = ["backbone", "enhancer", "density", "aux"];

/// `count` probes spread round-robin over the model's components; within a
/// component the parameter tensor and the element are uniform.
pub fn sample_probes<R: Rng + ?Sized>(model: &STNetModel, count: usize, rng: &mut R) -> Vec<(ParamId, usize)> {
    let groups: Vec<Vec<ParamId>> = COMPONENTS
        .iter()
        .map(|c| model.params().ids().filter(|&id| model.component_of(id) == *c).collect::<Vec<_>>())
        .filter(|g| !g.is_empty())
        .collect();
    (0..count)
        .map(|k| {
            let id = *groups[k % groups.len()].choose(rng).expect("non-empty group");
            (id, rng.random_range(0..model.params().value(id).numel()))
        })
        .collect()
}

/// Check sampled parameters of L on `batch` with gates frozen at `gates`
/// until `count` probes have been judged. Probes whose perturbation crosses a
/// piecewise boundary, or whose disagreement is below rounding resolution,
/// are kept in the report and replaced by fresh draws, up to `4 * count`
/// draws in total. Parameter values are left unchanged.
pub fn model_grad_check(
    model: &STNetModel,
    batch: &MixedBatch,
    gates: CrossScaleGates,
    count: usize,
    seed: u64,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut probe_model = model.clone();
    probe_model.set_gates(gates);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = probe_model.params().clone();
    let judged = |p: &ProbeResult| matches!(p.outcome, ProbeOutcome::Pass | ProbeOutcome::Fail);
    let mut probes: Vec<ProbeResult> = Vec::new();
    let mut report = loop {
        let want = count
            .saturating_sub(probes.iter().filter(|p| judged(p)).count())
            .min(4 * count - probes.len());
        let round = grad_check(
            &mut store,
            &sample_probes(&probe_model, want, &mut rng),
            |values, tape| {
                let wrap = |e: Error| TensorError::InvalidArgument {
                    op: "objective",
                    reason: e.to_string(),
                };
                probe_model.load_values(values).map_err(wrap)?;
                Ok(objective(&probe_model, tape, batch).map_err(wrap)?.total)
            },
            cfg,
        )?;
        probes.extend(round.probes.iter().cloned());
        if want == 0 || round.probes.iter().all(judged) {
            break round;
        }
    };
    report.probes = probes;
    Ok(report)
}
