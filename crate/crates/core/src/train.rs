//! Stochastic gradient descent with a per-epoch exponential learning-rate
//! decay and validation-based early stopping.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::ImageFeatureStore;
use crate::error::{MqaError, Result};
use crate::eval;
use crate::model::{EncodedExample, MqaModel};
use crate::nn::{self, GradientSet};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub initial_lr: f64,
    /// The learning rate is divided by this after every epoch.
    pub decay_factor: f64,
    /// Non-improving validation epochs tolerated before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; `f64::INFINITY` disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 1.0,
            decay_factor: 10.0,
            patience: 3,
            max_epochs: 10,
            batch_size: 1,
            clip_norm: 5.0,
            seed: 0,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(MqaError::Config("initial_lr must be > 0".into()));
        }
        if !(self.decay_factor > 1.0 && self.decay_factor.is_finite()) {
            return Err(MqaError::Config("decay_factor must be > 1".into()));
        }
        if self.patience == 0 {
            return Err(MqaError::Config("patience must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(MqaError::Config("batch_size must be >= 1".into()));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(MqaError::Config("clip_norm must be > 0".into()));
        }
        Ok(())
    }
}

/// `initial_lr / decay_factor^epoch`, epochs counted from 0.
pub fn lr_schedule(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.initial_lr / cfg.decay_factor.powi(epoch as i32)
}

/// Scales `grads` so their global L2 norm is at most `clip_norm`; returns
/// the norm before clipping.
pub fn clip_gradients(grads: &mut GradientSet, clip_norm: f64) -> f64 {
    let norm = grads.sq_norm().sqrt();
    if norm > clip_norm {
        grads.scale(clip_norm / norm);
    }
    norm
}

/// `θ ← θ − lr·∇θ` after global-norm clipping. Shared tensors exist once in
/// the parameter set and are updated once.
pub fn sgd_update(
    model: &mut MqaModel,
    grads: &mut GradientSet,
    lr: f64,
    clip_norm: f64,
) -> Result<()> {
    if !grads.all_finite() {
        return Err(MqaError::NonFinite {
            what: "gradient",
            step: 0,
        });
    }
    clip_gradients(grads, clip_norm);
    model.params.axpy(-lr, grads)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean negative log-likelihood per target token over the epoch's updates.
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
    pub word_error_rate: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

pub const HISTORY_HEADER: &str = "epoch,lr,train_loss,valid_loss,word_error_rate";

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(HISTORY_HEADER);
        s.push('\n');
        for r in &self.records {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.epoch,
                r.lr,
                r.train_loss,
                opt(r.valid_loss),
                opt(r.word_error_rate)
            );
        }
        s
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.records
            .iter()
            .filter_map(|r| r.valid_loss.map(|v| (r.epoch, v)))
            .fold(None, |best: Option<(usize, f64)>, (e, v)| match best {
                Some((_, bv)) if bv <= v => best,
                _ => Some((e, v)),
            })
            .map(|(e, _)| e)
    }
}

/// Tracks the best validation loss and counts epochs without improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observation {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records one epoch's validation loss. Improvement means strictly
    /// lower than every earlier epoch.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> Observation {
        let improved = match self.best {
            None => !loss.is_nan(),
            Some((_, b)) => loss < b,
        };
        if improved {
            self.best = Some((epoch, loss));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        Observation {
            improved,
            stop: self.stale >= self.patience,
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    EarlyStop {
        epoch: usize,
    },
    /// A non-finite loss or gradient appeared; the model is the last finite one.
    Diverged {
        epoch: usize,
    },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the last completed update.
    pub model: MqaModel,
    /// Parameters from the epoch with the lowest validation loss (the final
    /// model when there is no validation set).
    pub best: MqaModel,
    pub best_epoch: Option<usize>,
    pub history: TrainHistory,
    pub stop_reason: StopReason,
}

/// Trains without per-epoch callbacks. See [`train_with`].
pub fn train(
    model: MqaModel,
    train_set: &[EncodedExample],
    valid_set: &[EncodedExample],
    features: &ImageFeatureStore,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(model, train_set, valid_set, features, cfg, |_, _| Ok(()))
}

/// Runs up to `cfg.max_epochs` passes over `train_set` in a seeded shuffled
/// order. After every epoch the validation loss and word error rate are
/// recorded and `on_epoch` is called with the record and current model.
pub fn train_with<F>(
    mut model: MqaModel,
    train_set: &[EncodedExample],
    valid_set: &[EncodedExample],
    features: &ImageFeatureStore,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochRecord, &MqaModel) -> Result<()>,
{
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(MqaError::Empty("training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut grads = model.params.zeros_like();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = TrainHistory::default();
    let mut best: Option<MqaModel> = None;
    let mut stop_reason = StopReason::MaxEpochs;

    'epochs: for epoch in 0..cfg.max_epochs {
        let lr = lr_schedule(cfg, epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut tokens = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let last_good = model.clone();
            let step = batch_gradient(&model, train_set, batch, features, cfg, &mut grads);
            let batch_loss = match step {
                Ok(l) if l.is_finite() && grads.all_finite() => l,
                Ok(_) | Err(MqaError::NonFinite { .. }) => {
                    model = last_good;
                    stop_reason = StopReason::Diverged { epoch };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            loss_sum += batch_loss;
            tokens += batch
                .iter()
                .map(|&i| train_set[i].target_len())
                .sum::<usize>();
            sgd_update(&mut model, &mut grads, lr, cfg.clip_norm)?;
            if !model.params.all_finite() {
                model = last_good;
                stop_reason = StopReason::Diverged { epoch };
                break 'epochs;
            }
        }

        let (valid_loss, wer) = if valid_set.is_empty() {
            (None, None)
        } else {
            let r = eval::teacher_forced(&model, valid_set, features)?;
            (Some(r.mean_loss), Some(r.word_error_rate))
        };
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / tokens as f64,
            valid_loss,
            word_error_rate: wer,
        };
        history.records.push(record);
        on_epoch(&record, &model)?;

        if let Some(v) = valid_loss {
            let obs = stopper.observe(epoch, v);
            if obs.improved {
                best = Some(model.clone());
            }
            if obs.stop {
                stop_reason = StopReason::EarlyStop { epoch };
                break;
            }
        }
    }

    let best_epoch = stopper.best().map(|(e, _)| e);
    Ok(TrainOutcome {
        best: best.unwrap_or_else(|| model.clone()),
        model,
        best_epoch,
        history,
        stop_reason,
    })
}

/// Fills `grads` with the batch-mean gradient and returns the summed loss.
fn batch_gradient(
    model: &MqaModel,
    data: &[EncodedExample],
    batch: &[usize],
    features: &ImageFeatureStore,
    cfg: &TrainConfig,
    grads: &mut GradientSet,
) -> Result<f64> {
    grads.fill(0.0);
    if batch.len() == 1 {
        let trace = model.forward(&data[batch[0]], features)?;
        nn::backward_into(&model.params, &trace, 1.0, grads)?;
        return Ok(trace.loss);
    }
    let scale = 1.0 / batch.len() as f64;
    let per_example = |&i: &usize| -> Result<(f64, GradientSet)> {
        let trace = model.forward(&data[i], features)?;
        let g = nn::backward(&model.params, &trace, scale)?;
        Ok((trace.loss, g))
    };
    let mut loss = 0.0;
    if cfg.deterministic {
        // ordered reduction
        let parts: Vec<(f64, GradientSet)> =
            batch.par_iter().map(per_example).collect::<Result<_>>()?;
        for (l, g) in &parts {
            loss += l;
            grads.axpy(1.0, g)?;
        }
    } else {
        let (l, g) = batch
            .par_iter()
            .map(per_example)
            .try_reduce_with(|(la, mut ga), (lb, gb)| {
                ga.axpy(1.0, &gb)?;
                Ok((la + lb, ga))
            })
            .expect("batch is nonempty")?;
        loss = l;
        grads.axpy(1.0, &g)?;
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MqaConfig, Variant};
    use crate::nn::Params;

    #[test]
    fn schedule_values() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(&cfg, 0), 1.0);
        assert_eq!(lr_schedule(&cfg, 1), 0.1);
        assert_eq!(lr_schedule(&cfg, 2), 0.01);
        let eps = TrainConfig {
            decay_factor: 1.0 + 1e-3,
            ..cfg
        };
        assert_eq!(lr_schedule(&eps, 0) / lr_schedule(&eps, 1), 1.0 + 1e-3);
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig {
                initial_lr: 0.0,
                ..ok.clone()
            },
            TrainConfig {
                decay_factor: 1.0,
                ..ok.clone()
            },
            TrainConfig {
                patience: 0,
                ..ok.clone()
            },
            TrainConfig {
                batch_size: 0,
                ..ok.clone()
            },
        ] {
            assert!(bad.validate().is_err());
        }
        assert!(TrainConfig {
            clip_norm: f64::INFINITY,
            ..ok
        }
        .validate()
        .is_ok());
    }

    fn scalar_model() -> MqaModel {
        // smallest legal model; only the head bias is touched below
        MqaModel::zeros(MqaConfig {
            n: 3,
            d_embed: 1,
            d_hidden: 1,
            d_fuse: 1,
            d_img: 1,
            variant: Variant::Complete,
            ..MqaConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn sgd_update_hand_arithmetic() {
        let mut m = scalar_model();
        m.params.head.bias[1] = 1.0;
        let mut g = m.params.zeros_like();
        g.head.bias[1] = 0.5;
        sgd_update(&mut m, &mut g, 0.1, f64::INFINITY).unwrap();
        assert_eq!(m.params.head.bias[1], 0.95);
    }

    #[test]
    fn sgd_update_noops() {
        let mut m = MqaModel::init(MqaConfig {
            n: 5,
            d_embed: 2,
            d_hidden: 2,
            d_fuse: 2,
            d_img: 2,
            ..MqaConfig::default()
        })
        .unwrap();
        let before = crate::checkpoint::to_bytes(&m);
        let mut zero = m.params.zeros_like();
        sgd_update(&mut m, &mut zero, 1.0, 5.0).unwrap();
        assert_eq!(crate::checkpoint::to_bytes(&m), before);
        let mut g = m.params.zeros_like();
        g.fill(0.3);
        sgd_update(&mut m, &mut g, 0.0, 5.0).unwrap();
        assert_eq!(crate::checkpoint::to_bytes(&m), before);
        g.head.bias[0] = f64::NAN;
        assert!(sgd_update(&mut m, &mut g, 0.1, 5.0).is_err());
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let m = scalar_model();
        let mut g: Params = m.params.zeros_like();
        g.fill(2.0);
        let count = g.parameter_count() as f64;
        let norm = clip_gradients(&mut g, 1.0);
        assert!((norm - 2.0 * count.sqrt()).abs() < 1e-12);
        assert!((g.sq_norm().sqrt() - 1.0).abs() < 1e-12);
        let mut small = m.params.zeros_like();
        small.fill(1e-3);
        let copy = small.clone();
        clip_gradients(&mut small, 1.0);
        assert_eq!(small, copy);
    }

    #[test]
    fn early_stopping_on_rising_losses() {
        let mut es = EarlyStopping::new(3);
        let losses = [5.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let mut stopped_at = None;
        for (e, &l) in losses.iter().enumerate() {
            if es.observe(e, l).stop {
                stopped_at = Some(e);
                break;
            }
        }
        assert_eq!(stopped_at, Some(4));
        assert_eq!(es.best(), Some((1, 1.0)));
    }

    #[test]
    fn equal_loss_is_not_an_improvement() {
        let mut es = EarlyStopping::new(2);
        assert!(es.observe(0, 1.0).improved);
        assert!(!es.observe(1, 1.0).improved);
        assert!(es.observe(2, 1.0).stop);
    }

    #[test]
    fn history_csv_layout() {
        let h = TrainHistory {
            records: vec![
                EpochRecord {
                    epoch: 0,
                    lr: 1.0,
                    train_loss: 0.5,
                    valid_loss: Some(0.25),
                    word_error_rate: Some(0.125),
                },
                EpochRecord {
                    epoch: 1,
                    lr: 0.1,
                    train_loss: 0.4,
                    valid_loss: None,
                    word_error_rate: None,
                },
            ],
        };
        assert_eq!(
            h.to_csv(),
            "epoch,lr,train_loss,valid_loss,word_error_rate\n0,1,0.5,0.25,0.125\n1,0.1,0.4,,\n"
        );
        assert_eq!(h.best_epoch(), Some(0));
    }
}
