//! Count metrics. `mse` follows the crowd-counting convention: it is the
//! *root* of the mean squared count error.

use std::fmt;

use crate::data::CrowdSample;
use crate::model::STNetModel;
use crate::scale_tree::GateMode;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Images per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub mae: f64,
    /// Root-mean-squared count error.
    pub mse: f64,
    /// `(predicted, true)` per image.
    pub per_image_counts: Vec<(f64, f64)>,
}

impl Metrics {
    pub fn from_counts(counts: Vec<(f64, f64)>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Input("cannot evaluate an empty sample list".into()));
        }
        let n = counts.len() as f64;
        let mae = counts.iter().map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
        let mse = (counts.iter().map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n).sqrt();
        Ok(Self {
            mae,
            mse,
            per_image_counts: counts,
        })
    }

    /// Single-line `key=value` record.
    pub fn record(&self) -> String {
        format!("mae={:?} mse={:?} images={}", self.mae, self.mse, self.per_image_counts.len())
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "MAE {:.4}  MSE (root-mean-square) {:.4}  over {} images",
            self.mae,
            self.mse,
            self.per_image_counts.len()
        )
    }
}

/// True count of a sample: the mass of its ground-truth density map.
pub fn true_count(sample: &CrowdSample) -> f64 {
    sample.density.as_ref().map_or(0.0, Tensor::sum)
}

/// Evaluate any density predictor; each call receives a `n x C x H x W`
/// batch and returns `n x 1 x h x w` density maps.
pub fn evaluate_with<F>(samples: &[CrowdSample], chunk: usize, mut predict: F) -> Result<Metrics>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    if samples.is_empty() {
        return Err(Error::Input("cannot evaluate an empty sample list".into()));
    }
    let mut counts = Vec::with_capacity(samples.len());
    for group in samples.chunks(chunk.max(1)) {
        let images: Vec<&Tensor> = group.iter().map(|s| &s.image).collect();
        let density = predict(&Tensor::stack(&images)?)?;
        if density.shape().n != group.len() {
            return Err(Error::Input(format!(
                "predictor returned {} maps for {} images",
                density.shape().n,
                group.len()
            )));
        }
        for (k, s) in group.iter().enumerate() {
            counts.push((density.item(k).sum(), true_count(s)));
        }
    }
    Metrics::from_counts(counts)
}

/// MAE/MSE of `model`, which must be in eval mode.
pub fn evaluate_mae_mse(model: &STNetModel, samples: &[CrowdSample]) -> Result<Metrics> {
    if model.mode() != GateMode::Eval {
        return Err(Error::Input("evaluation requires an eval-mode model".into()));
    }
    evaluate_with(samples, EVAL_CHUNK, |x| Ok(model.predict(x)?.density))
}

/// Mean predicted confidence over every pixel of `samples` (eval mode).
pub fn mean_confidence(model: &STNetModel, samples: &[CrowdSample]) -> Result<f64> {
    if model.mode() != GateMode::Eval {
        return Err(Error::Input("evaluation requires an eval-mode model".into()));
    }
    if samples.is_empty() {
        return Err(Error::Input("cannot evaluate an empty sample list".into()));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for group in samples.chunks(EVAL_CHUNK) {
        let images: Vec<&Tensor> = group.iter().map(|s| &s.image).collect();
        let conf = model.predict(&Tensor::stack(&images)?)?.confidence.ok_or(Error::NoAuxiliator)?;
        total += conf.sum();
        count += conf.numel();
    }
    Ok(total / count as f64)
}
