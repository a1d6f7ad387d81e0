//! Loss terms, crowd labels and λ-mixed batches.
//!
//! The objective is `L = L_d + L_c + L_b` with unit weights:
//!
//! * `L_d`: squared error between predicted and ground-truth density, summed
//!   per image, averaged over the crowd sub-batch;
//! * `L_c`: binary cross-entropy between the confidence map and the crowd
//!   label, same averaging;
//! * `L_b`: squared confidence on pure-background images, averaged over the
//!   background sub-batch.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{downsample_density, CrowdSample};
use crate::model::STNetModel;
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Confidence predictions are clamped into `[eps, 1 - eps]` inside the BCE.
pub const BCE_EPS: f64 = 1e-7;

pub const DEFAULT_LAMBDA: f64 = 0.125;

/// Binary crowd/background map.
#[derive(Clone, Debug, PartialEq)]
pub struct CrowdLabel {
    map: Tensor,
}

impl CrowdLabel {
    /// Wrap an existing map; every element must be exactly 0 or 1.
    pub fn from_map(map: Tensor) -> Result<Self> {
        if let Some(v) = map.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Input(format!("crowd label holds non-binary value {v}")));
        }
        Ok(Self { map })
    }

    pub fn map(&self) -> &Tensor {
        &self.map
    }

    pub fn into_map(self) -> Tensor {
        self.map
    }

    /// Max-pool by `factor` so thin crowd regions survive.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        let s = self.map.shape();
        if factor == 0 || !s.h.is_multiple_of(factor) || !s.w.is_multiple_of(factor) {
            return Err(crate::data::DataError::Indivisible {
                height: s.h,
                width: s.w,
                factor,
            }
            .into());
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (pooled, _) = crate::tensor::maxpool2d_forward(&self.map, factor, factor)?;
        Ok(Self { map: pooled })
    }

    /// Stack single-item labels along the batch axis.
    pub fn stack(labels: &[&CrowdLabel]) -> Result<Self> {
        let maps: Vec<&Tensor> = labels.iter().map(|l| &l.map).collect();
        Ok(Self {
            map: Tensor::stack(&maps)?,
        })
    }
}

/// Threshold each batch item at half its own mean density. Items whose mean
/// is zero get an all-zero label.
pub fn make_crowd_label(density: &Tensor) -> Result<CrowdLabel> {
    if let Some(v) = density.data().iter().find(|&&v| !(v >= 0.0)) {
        return Err(Error::Input(format!("density map holds negative or NaN value {v}")));
    }
    let item = density.shape().item();
    let mut map = Tensor::zeros(density.shape());
    if item == 0 {
        return Ok(CrowdLabel { map });
    }
    for (src, dst) in density
        .data()
        .chunks_exact(item)
        .zip(map.data_mut().chunks_exact_mut(item))
    {
        let mean = src.iter().sum::<f64>() / item as f64;
        if mean > 0.0 {
            let threshold = 0.5 * mean;
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = if v >= threshold { 1.0 } else { 0.0 };
            }
        }
    }
    Ok(CrowdLabel { map })
}

/// `round(λ n)`, at least one when `λ > 0`. At least one crowd slot must remain.
pub fn background_count(n: usize, lambda: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::Input(format!("lambda must lie in [0, 1), got {lambda}")));
    }
    if n == 0 {
        return Err(Error::Input("batch size must be positive".into()));
    }
    let mut bg = (lambda * n as f64).round() as usize;
    if lambda > 0.0 {
        bg = bg.max(1);
    }
    if bg >= n {
        return Err(Error::Input(format!(
            "lambda {lambda} with batch size {n} leaves no crowd samples"
        )));
    }
    Ok(bg)
}

fn crowd_count(n: usize, lambda: f64) -> Result<usize> {
    Ok(n - background_count(n, lambda)?)
}

fn check_items(tape: &Tape, v: Var, expected: usize, what: &str) -> Result<()> {
    let got = tape.shape(v).n;
    if got != expected {
        return Err(Error::Input(format!(
            "{what}: expected a sub-batch of {expected} images, got {got}"
        )));
    }
    Ok(())
}

/// Density loss over the crowd sub-batch `pred` (`(1 - λ) N` items).
pub fn loss_density(tape: &mut Tape, pred: Var, gt: &Tensor, lambda: f64, n: usize) -> Result<Var> {
    let nc = crowd_count(n, lambda)?;
    check_items(tape, pred, nc, "density loss")?;
    let target = tape.constant(gt.clone());
    let diff = tape.sub(pred, target)?;
    let ss = tape.sum_squares(diff);
    Ok(tape.scale(ss, 1.0 / nc as f64))
}

/// Confidence BCE over the crowd sub-batch. Clamped elements are counted in
/// the tape statistics.
pub fn loss_confidence(
    tape: &mut Tape,
    pred_conf: Var,
    labels: &CrowdLabel,
    lambda: f64,
    n: usize,
) -> Result<Var> {
    let nc = crowd_count(n, lambda)?;
    check_items(tape, pred_conf, nc, "confidence loss")?;
    let bce = tape.bce_sum(pred_conf, labels.map(), BCE_EPS)?;
    Ok(tape.scale(bce, 1.0 / nc as f64))
}

/// Squared confidence on the background sub-batch; requires `λ > 0`.
pub fn loss_background(tape: &mut Tape, pred_background: Var, lambda: f64, n: usize) -> Result<Var> {
    let nb = background_count(n, lambda)?;
    if nb == 0 {
        return Err(Error::Input("background loss needs lambda > 0".into()));
    }
    check_items(tape, pred_background, nb, "background loss")?;
    let ss = tape.sum_squares(pred_background);
    Ok(tape.scale(ss, 1.0 / nb as f64))
}

/// Unweighted sum of the present terms; absent terms contribute nothing.
/// Any non-finite term is an error.
pub fn loss_total(tape: &mut Tape, ld: Var, lc: Option<Var>, lb: Option<Var>) -> Result<Var> {
    let mut total = ld;
    for (name, term) in [("L_d", Some(ld)), ("L_c", lc), ("L_b", lb)] {
        let Some(t) = term else { continue };
        let v = tape.value(t).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFiniteTerm(format!("{name} = {v}")));
        }
        if t != ld {
            total = tape.add(total, t)?;
        }
    }
    Ok(total)
}

/// A training batch: `(1 - λ) N` crowd samples and `λ N` pure-background
/// samples, interleaved in random order.
#[derive(Clone, Debug)]
pub struct MixedBatch {
    /// `N x C x H x W`.
    pub images: Tensor,
    /// Batch positions of crowd samples; densities and labels follow this order.
    pub crowd_slots: Vec<usize>,
    pub background_slots: Vec<usize>,
    /// `n_c x 1 x H x W` ground-truth densities.
    pub density: Tensor,
    /// `n_c x 1 x H x W` labels at ground-truth resolution.
    pub labels: CrowdLabel,
    pub lambda: f64,
}

impl MixedBatch {
    /// Interleave the given samples in a random order. Crowd samples keep
    /// their density even when a crop left them empty.
    pub fn assemble<R: Rng + ?Sized>(
        crowd: &[&CrowdSample],
        background: &[&CrowdSample],
        lambda: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let n = crowd.len() + background.len();
        let nb = background_count(n, lambda)?;
        if nb != background.len() {
            return Err(Error::Input(format!(
                "batch of {n} with lambda {lambda} needs {nb} background samples, got {}",
                background.len()
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let (crowd_slots, background_slots) = order.split_at(crowd.len());
        let mut slots: Vec<Option<&Tensor>> = vec![None; n];
        for (&slot, s) in crowd_slots.iter().zip(crowd) {
            slots[slot] = Some(&s.image);
        }
        for (&slot, s) in background_slots.iter().zip(background) {
            slots[slot] = Some(&s.image);
        }
        let images: Vec<&Tensor> = slots.into_iter().map(|s| s.expect("every slot filled")).collect();
        let images = Tensor::stack(&images)?;
        let densities: Vec<Tensor> = crowd.iter().map(|s| s.density_or_zeros()).collect();
        let density = Tensor::stack(&densities.iter().collect::<Vec<_>>())?;
        let labels = make_crowd_label(&density)?;
        Ok(Self {
            images,
            crowd_slots: crowd_slots.to_vec(),
            background_slots: background_slots.to_vec(),
            density,
            labels,
            lambda,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape().n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Density (sum-pooled) and labels (max-pooled) at output resolution.
    pub fn targets(&self, stride: usize) -> Result<(Tensor, CrowdLabel)> {
        Ok((downsample_density(&self.density, stride)?, self.labels.downsample(stride)?))
    }
}

/// Draw `round(λ n)` background samples and the remaining crowd samples
/// uniformly with replacement, then shuffle.
pub fn compose_batch<R: Rng + ?Sized>(
    crowd_pool: &[CrowdSample],
    background_pool: &[CrowdSample],
    n: usize,
    lambda: f64,
    rng: &mut R,
) -> Result<MixedBatch> {
    let nb = background_count(n, lambda)?;
    if crowd_pool.is_empty() {
        return Err(Error::Input("crowd pool is empty".into()));
    }
    if nb > 0 && background_pool.is_empty() {
        return Err(Error::Input(format!(
            "lambda {lambda} needs background samples but the pool is empty"
        )));
    }
    let crowd: Vec<&CrowdSample> = (0..n - nb)
        .map(|_| &crowd_pool[rng.random_range(0..crowd_pool.len())])
        .collect();
    let background: Vec<&CrowdSample> = (0..nb)
        .map(|_| &background_pool[rng.random_range(0..background_pool.len())])
        .collect();
    MixedBatch::assemble(&crowd, &background, lambda, rng)
}

/// Loss terms of one forward pass, plus their scalar values.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub total: Var,
    pub density: Var,
    pub confidence: Option<Var>,
    pub background: Option<Var>,
}

/// Scalar values of the terms in an [`Objective`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub density: f64,
    pub confidence: f64,
    pub background: f64,
    pub total: f64,
}

impl Objective {
    pub fn values(&self, tape: &Tape) -> LossValues {
        let v = |t: Option<Var>| t.map_or(0.0, |t| tape.value(t).data()[0]);
        LossValues {
            density: v(Some(self.density)),
            confidence: v(self.confidence),
            background: v(self.background),
            total: v(Some(self.total)),
        }
    }
}

/// Forward `batch` through `model` and build `L_d + L_c + L_b`. Without an
/// auxiliator only `L_d` remains; with `λ = 0` the background term is skipped.
pub fn objective(model: &STNetModel, tape: &mut Tape, batch: &MixedBatch) -> Result<Objective> {
    let images = tape.constant(batch.images.clone());
    objective_from_images(model, tape, images, batch)
}

/// As [`objective`], with the image batch already on the tape.
pub fn objective_from_images(
    model: &STNetModel,
    tape: &mut Tape,
    images: Var,
    batch: &MixedBatch,
) -> Result<Objective> {
    let n = batch.len();
    let out = model.forward(tape, images)?;
    let (gt, labels) = batch.targets(model.spec().output_stride())?;
    let crowd_density = tape.select_batch(out.density, &batch.crowd_slots)?;
    let ld = loss_density(tape, crowd_density, &gt, batch.lambda, n)?;
    let (lc, lb) = match out.confidence {
        None => (None, None),
        Some(conf) => {
            let cc = tape.select_batch(conf, &batch.crowd_slots)?;
            let lc = loss_confidence(tape, cc, &labels, batch.lambda, n)?;
            let lb = if batch.background_slots.is_empty() {
                None
            } else {
                let cb = tape.select_batch(conf, &batch.background_slots)?;
                Some(loss_background(tape, cb, batch.lambda, n)?)
            };
            (Some(lc), lb)
        }
    };
    let total = loss_total(tape, ld, lc, lb)?;
    Ok(Objective {
        total,
        density: ld,
        confidence: lc,
        background: lb,
    })
}
