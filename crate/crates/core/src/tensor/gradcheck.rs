//! Central finite-difference verification of tape gradients.

use std::fmt;

use super::{ParamId, ParamStore, Result, Tape, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Perturbation applied to each probed scalar.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-6,
            abs_floor: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeOutcome {
    Pass,
    Fail,
    /// The perturbation crossed a piecewise boundary (a ReLU sign change, a
    /// max-pool winner change or a BCE clamp), so the central difference does
    /// not measure a derivative.
    Excluded,
    /// Outside tolerance, but the disagreement is below what double-precision
    /// rounding of the loss lets a central difference resolve.
    Unresolved,
}

/// Rounding allowance, in units of `EPSILON * |f|`, on each loss evaluation.
const ROUNDING_ULPS: f64 = 256.0;

#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub param: String,
    pub id: ParamId,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub outcome: ProbeOutcome,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub probes: Vec<ProbeResult>,
    pub tolerance: f64,
}

impl GradCheckReport {
    fn checked(&self) -> impl Iterator<Item = &ProbeResult> {
        self.probes
            .iter()
            .filter(|p| matches!(p.outcome, ProbeOutcome::Pass | ProbeOutcome::Fail))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.checked().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn mean_rel_error(&self) -> f64 {
        let n = self.checked().count();
        if n == 0 {
            0.0
        } else {
            self.checked().map(|p| p.rel_error).sum::<f64>() / n as f64
        }
    }

    pub fn excluded(&self) -> usize {
        self.probes
            .iter()
            .filter(|p| p.outcome == ProbeOutcome::Excluded)
            .count()
    }

    pub fn unresolved(&self) -> usize {
        self.probes
            .iter()
            .filter(|p| p.outcome == ProbeOutcome::Unresolved)
            .count()
    }

    pub fn checked_count(&self) -> usize {
        self.checked().count()
    }

    pub fn passed(&self) -> bool {
        self.probes.iter().all(|p| p.outcome != ProbeOutcome::Fail)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.probes {
            writeln!(
                f,
                "{:<32} [{:>6}] analytic {:>+.6e} numeric {:>+.6e} rel {:.3e} {:?}",
                p.param, p.index, p.analytic, p.numeric, p.rel_error, p.outcome
            )?;
        }
        write!(
            f,
            "checked {} excluded {} unresolved {} max rel {:.3e} mean rel {:.3e} tolerance {:.1e} -> {}",
            self.checked_count(),
            self.excluded(),
            self.unresolved(),
            self.max_rel_error(),
            self.mean_rel_error(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Loss value and branch signature of one pass.
fn evaluate<F>(store: &ParamStore, loss_fn: &mut F) -> Result<(f64, u64)>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(store, &mut tape)?;
    let v = tape.value(loss);
    if !v.shape().is_scalar() {
        return Err(TensorError::NonScalarLoss(v.shape()));
    }
    Ok((v.data()[0], tape.stats().branch_signature))
}

/// Compare reverse-mode gradients of `loss_fn` against central differences
/// at each `(parameter, flat index)` probe.
///
/// A probe whose perturbed passes take a different piecewise branch than the
/// unperturbed one is reported as excluded rather than judged.
///
/// The store's gradients are overwritten with the analytic gradient at the
/// unperturbed point; parameter values are restored before returning.
pub fn grad_check<F>(
    store: &mut ParamStore,
    probes: &[(ParamId, usize)],
    mut loss_fn: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(store, &mut tape)?;
    let f0 = tape.value(loss).data()[0];
    let sig0 = tape.stats().branch_signature;
    let (again, _) = evaluate(store, &mut loss_fn)?;
    if f0.to_bits() != again.to_bits() {
        return Err(TensorError::NonDeterministic {
            first: f0,
            second: again,
        });
    }
    store.zero_grad();
    tape.backward(loss, store)?;
    drop(tape);

    let h = cfg.step;
    let mut results = Vec::with_capacity(probes.len());
    for &(id, index) in probes {
        let analytic = store.grad(id).data()[index];
        let orig = store.value(id).data()[index];
        store.value_mut(id).data_mut()[index] = orig + h;
        let plus = evaluate(store, &mut loss_fn);
        store.value_mut(id).data_mut()[index] = orig - h;
        let minus = evaluate(store, &mut loss_fn);
        store.value_mut(id).data_mut()[index] = orig;
        let ((plus, sig_plus), (minus, sig_minus)) = (plus?, minus?);

        let numeric = (plus - minus) / (2.0 * h);
        let resolution = ROUNDING_ULPS * f64::EPSILON * (plus.abs() + minus.abs()) / (2.0 * h);
        let denom = analytic.abs().max(numeric.abs()).max(cfg.abs_floor);
        let rel_error = (analytic - numeric).abs() / denom;
        let outcome = if sig_plus != sig0 || sig_minus != sig0 {
            ProbeOutcome::Excluded
        } else if rel_error <= cfg.tolerance {
            ProbeOutcome::Pass
        } else if (analytic - numeric).abs() <= resolution {
            ProbeOutcome::Unresolved
        } else {
            ProbeOutcome::Fail
        };
        results.push(ProbeResult {
            param: store.get(id).name.clone(),
            id,
            index,
            analytic,
            numeric,
            rel_error,
            outcome,
        });
    }
    Ok(GradCheckReport {
        probes: results,
        tolerance: cfg.tolerance,
    })
}
