//! Training loop.
//!
//! Each epoch draws its randomness from a generator keyed by `(seed, epoch)`,
//! so a run resumed from a checkpoint replays exactly the batches, crops and
//! gates an uninterrupted run would have used.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, LogRecord};
use super::config::TrainConfig;
use super::metrics::{evaluate_mae_mse, Metrics};
use crate::data::{augment, AugmentConfig, CrowdSample};
use crate::model::STNetModel;
use crate::scale_tree::GateMode;
use crate::supervision::{background_count, objective, LossValues, MixedBatch};
use crate::tensor::{Adam, Tape};
use crate::{Error, Result};

/// Mean loss terms over one epoch plus validation metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: LossValues,
    pub batches: usize,
    pub val_mae: Option<f64>,
    pub val_mse: Option<f64>,
}

impl EpochLog {
    pub fn record(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("nan".to_string(), |v| format!("{v:?}"));
        format!(
            "epoch={} loss_density={:?} loss_confidence={:?} loss_background={:?} loss_total={:?} batches={} val_mae={} val_mse={}",
            self.epoch,
            self.losses.density,
            self.losses.confidence,
            self.losses.background,
            self.losses.total,
            self.batches,
            opt(self.val_mae),
            opt(self.val_mse)
        )
    }

    fn to_record(&self) -> LogRecord {
        LogRecord {
            epoch: self.epoch,
            density: self.losses.density,
            confidence: self.losses.confidence,
            background: self.losses.background,
            total: self.losses.total,
            val_mae: self.val_mae.unwrap_or(f64::NAN),
            val_mse: self.val_mse.unwrap_or(f64::NAN),
        }
    }

    fn from_record(r: &LogRecord) -> Self {
        let opt = |v: f64| (!v.is_nan()).then_some(v);
        Self {
            epoch: r.epoch,
            losses: LossValues {
                density: r.density,
                confidence: r.confidence,
                background: r.background,
                total: r.total,
            },
            batches: 0,
            val_mae: opt(r.val_mae),
            val_mse: opt(r.val_mse),
        }
    }
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch {:>3}  L_d {:.5}  L_c {:.5}  L_b {:.5}  L {:.5}",
            self.epoch, self.losses.density, self.losses.confidence, self.losses.background, self.losses.total
        )?;
        if let (Some(mae), Some(mse)) = (self.val_mae, self.val_mse) {
            write!(f, "  val MAE {mae:.3}  MSE {mse:.3}")?;
        }
        Ok(())
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5354_4e45_545f_5452);
    rng.set_stream(epoch as u64);
    rng
}

/// Model, optimizer and progress of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: STNetModel,
    pub optimizer: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub log: Vec<EpochLog>,
}

impl Trainer {
    /// Fresh model initialized from `config.seed`.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = STNetModel::build(&config.model_spec()?, config.seed)?;
        let optimizer = Adam::new(config.adam(), model.params());
        Ok(Self {
            config: config.clone(),
            model,
            optimizer,
            epoch: 0,
            log: Vec::new(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            self.epoch,
            self.config.to_string(),
            self.log.iter().map(EpochLog::to_record).collect(),
            self.model.params(),
            Some(&self.optimizer),
        )
    }

    /// Rebuild a trainer from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ck: &Checkpoint) -> Result<Self> {
        let config = TrainConfig::parse(&ck.config)?;
        let mut t = Self::new(&config)?;
        ck.restore_params(t.model.params_mut())?;
        if let Some(opt) = &ck.optimizer {
            t.optimizer = opt.clone();
        }
        t.epoch = ck.epoch;
        t.log = ck.log.iter().map(EpochLog::from_record).collect();
        Ok(t)
    }

    fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            crop: Some(self.config.crop),
            flip_prob: self.config.flip_prob,
            brightness: self.config.jitter,
            contrast: self.config.jitter,
        }
    }

    /// Eval-mode validation metrics; leaves the model in train mode.
    pub fn validate(&mut self, samples: &[CrowdSample]) -> Result<Metrics> {
        let previous = self.model.gates();
        self.model.set_mode(GateMode::Eval);
        let metrics = evaluate_mae_mse(&self.model, samples);
        self.model.set_mode(GateMode::Train);
        for (b, g) in self.model.blocks_mut().iter_mut().filter(|b| b.gates().is_some()).zip(previous) {
            b.set_gates(g);
        }
        metrics
    }

    /// Crowd batches of one epoch: a shuffled pass over the pool in full
    /// batches of `nc` (a trailing partial batch is dropped). A pool smaller
    /// than one batch is sampled with replacement.
    fn plan<R: Rng>(pool: usize, nc: usize, rng: &mut R) -> Vec<Vec<usize>> {
        if pool < nc {
            return vec![(0..nc).map(|_| rng.random_range(0..pool)).collect()];
        }
        let mut order: Vec<usize> = (0..pool).collect();
        order.shuffle(rng);
        order.chunks_exact(nc).map(<[usize]>::to_vec).collect()
    }

    /// One epoch: resample gates, iterate λ-mixed batches with Adam updates,
    /// then validate when `val` is non-empty.
    pub fn run_epoch(
        &mut self,
        train: &[CrowdSample],
        val: &[CrowdSample],
        background: &[CrowdSample],
    ) -> Result<EpochLog> {
        if train.is_empty() {
            return Err(Error::Input("training pool is empty".into()));
        }
        let cfg = &self.config;
        let n = cfg.batch_size;
        let nb = background_count(n, cfg.lambda)?;
        if nb > 0 && background.is_empty() {
            return Err(Error::Input(format!(
                "lambda {} needs a background pool, but none was given",
                cfg.lambda
            )));
        }
        let epoch = self.epoch + 1;
        let mut rng = epoch_rng(cfg.seed, epoch);
        self.model.set_mode(GateMode::Train);
        self.model.resample_gates(&mut rng);

        let aug = self.augment_config();
        let lambda = cfg.lambda;
        let plan = Self::plan(train.len(), n - nb, &mut rng);
        let mut sums = LossValues::default();
        for (batch_idx, indices) in plan.iter().enumerate() {
            let crowd = indices
                .iter()
                .map(|&i| augment(&train[i], &aug, &mut rng))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let bg = (0..nb)
                .map(|_| augment(&background[rng.random_range(0..background.len())], &aug, &mut rng))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let batch = MixedBatch::assemble(
                &crowd.iter().collect::<Vec<_>>(),
                &bg.iter().collect::<Vec<_>>(),
                lambda,
                &mut rng,
            )?;

            let mut tape = Tape::new();
            let obj = objective(&self.model, &mut tape, &batch).map_err(|e| match e {
                Error::NonFiniteTerm(detail) => Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    detail,
                },
                other => other,
            })?;
            let v = obj.values(&tape);
            if !v.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    detail: format!("L = {}", v.total),
                });
            }
            let params = self.model.params_mut();
            params.zero_grad();
            tape.backward(obj.total, params)?;
            self.optimizer.step(params)?;

            sums.density += v.density;
            sums.confidence += v.confidence;
            sums.background += v.background;
            sums.total += v.total;
        }
        let k = plan.len() as f64;
        let losses = LossValues {
            density: sums.density / k,
            confidence: sums.confidence / k,
            background: sums.background / k,
            total: sums.total / k,
        };
        let metrics = if val.is_empty() {
            None
        } else {
            Some(self.validate(val)?)
        };
        self.epoch = epoch;
        let entry = EpochLog {
            epoch,
            losses,
            batches: plan.len(),
            val_mae: metrics.as_ref().map(|m| m.mae),
            val_mse: metrics.as_ref().map(|m| m.mse),
        };
        self.log.push(entry.clone());
        Ok(entry)
    }

    /// Run epochs until `config.epochs` have completed.
    pub fn run(
        &mut self,
        train: &[CrowdSample],
        val: &[CrowdSample],
        background: &[CrowdSample],
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<()> {
        while self.epoch < self.config.epochs {
            let entry = self.run_epoch(train, val, background)?;
            on_epoch(&entry);
        }
        Ok(())
    }
}

/// Outcome of [`train_loop`].
#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Validation metrics of the untrained model (absent without validation data).
    pub initial: Option<Metrics>,
    pub epochs: Vec<EpochLog>,
}

impl TrainReport {
    pub fn final_val_mae(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.val_mae)
    }
}

/// Train a fresh model for `config.epochs` epochs.
pub fn train_loop(
    config: &TrainConfig,
    crowd_train: &[CrowdSample],
    crowd_val: &[CrowdSample],
    background_pool: &[CrowdSample],
) -> Result<(STNetModel, TrainReport)> {
    let mut trainer = Trainer::new(config)?;
    let initial = if crowd_val.is_empty() {
        None
    } else {
        Some(trainer.validate(crowd_val)?)
    };
    trainer.run(crowd_train, crowd_val, background_pool, |_| {})?;
    Ok((
        trainer.model,
        TrainReport {
            initial,
            epochs: trainer.log,
        },
    ))
}
