//! Training loop with the staged plan, saturation-based LR decay, and
//! deterministic batching; evaluation lives in [`eval`].

mod eval;
mod sgd;
mod schedule;

pub use eval::{
    evaluate, export_features, features_csv, format_mean_std, predict_single_view, EvalMode,
    EvalReport, FeatureRow,
};
pub use schedule::{lr_schedule_update, ScheduleConfig, ScheduleDecision, ScheduleState, StagePlan};
pub use sgd::{OptimizerConfig, OptimizerState};

use thiserror::Error;

use crate::angular::MultiviewMode;
use crate::data::{
    augment_pair, draw_augment, AugmentConfig, ChannelStats, DataError, LoadedItem, LoadedSplit,
    normalize_diff, normalize_image,
};
use crate::models::{
    accumulate_grads, bind, combine_view_maps, Architecture, Batch, ForwardCtx,
};
use crate::rng::{hash_str, rng_for};
use crate::tensor::{Element, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("training diverged at epoch {epoch}: {message} (parameters rolled back to the last good epoch)")]
    Diverged { epoch: usize, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub stages: StagePlan,
    pub augment: AugmentConfig,
    /// Stop once eval-mode train accuracy reaches this value.
    pub early_stop_train_acc: Option<f64>,
    /// Evaluate the test split every k epochs (0 = never).
    pub test_eval_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(crop: usize, seed: u64) -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            stages: StagePlan::default(),
            augment: AugmentConfig::training_default(crop),
            early_stop_train_acc: None,
            test_eval_every: 0,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub stage: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainLog {
    pub epochs: Vec<EpochMetrics>,
    pub stats: ChannelStats,
    /// True when training stopped on schedule exhaustion or early stop.
    pub stopped_early: bool,
}

impl TrainLog {
    /// Metrics in the `epoch,stage,lr,train_loss,train_acc,test_acc` CSV form.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("epoch,stage,lr,train_loss,train_acc,test_acc\n");
        for m in &self.epochs {
            let test = m.test_acc.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                m.epoch, m.stage, m.lr, m.train_loss, m.train_acc, test
            ));
        }
        out
    }

    pub fn final_train_acc(&self) -> f64 {
        self.epochs.last().map(|m| m.train_acc).unwrap_or(0.0)
    }
}

/// Stacks per-item `[C, k, k]` pairs into one batch, applying the given
/// geometric draws and the normalization stats.
fn stack_batch<T: Element>(
    items: &[&LoadedItem<T>],
    draws: &[crate::data::AugmentDraw],
    stats: &ChannelStats,
) -> Result<(Batch<T>, Vec<usize>), TrainError> {
    let n = items.len();
    let mut rgb_data = Vec::new();
    let mut diff_data = Vec::new();
    let mut labels = Vec::with_capacity(n);
    let mut item_shape: Option<Vec<usize>> = None;
    for (item, draw) in items.iter().zip(draws) {
        let (rgb, diff) = augment_pair(&item.rgb, &item.diff, draw);
        let rgb = normalize_image(&rgb, stats);
        let diff = normalize_diff(&diff, stats);
        if item_shape.is_none() {
            item_shape = Some(rgb.shape().to_vec());
        }
        rgb_data.extend_from_slice(rgb.data());
        diff_data.extend_from_slice(diff.data());
        labels.push(item.record.class_id);
    }
    let mut shape = vec![n];
    shape.extend(item_shape.expect("non-empty batch"));
    Ok((
        Batch {
            rgb: Tensor::from_vec(shape.clone(), rgb_data)?,
            diff: Some(Tensor::from_vec(shape, diff_data)?),
        },
        labels,
    ))
}

/// One SGD step on an already-prepared batch; returns the batch loss.
/// Exposed as a building block for the verification suites.
pub fn sgd_batch_step<T: Element>(
    model: &mut dyn Architecture<T>,
    batch: &Batch<T>,
    labels: &[usize],
    opt: &mut OptimizerState<T>,
    stage: usize,
    dropout_rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<f64, TrainError> {
    model.params_mut().zero_grads();
    let mut tape = Tape::new();
    let binding = bind(&mut tape, model.params());
    let mut ctx = ForwardCtx {
        train: true,
        rng: Some(dropout_rng),
    };
    let loss = model.loss(&mut tape, &binding, batch, labels, &mut ctx)?;
    let loss_value = tape.value(loss).scalar()?.as_f64();
    tape.backward(loss)?;
    accumulate_grads(&tape, &binding, model.params_mut());
    opt.step(model.params_mut(), |g| StagePlan::trainable(stage, g))?;
    Ok(loss_value)
}

struct EpochOutcome {
    mean_loss: f64,
}

fn run_epoch_single_view<T: Element>(
    model: &mut dyn Architecture<T>,
    data: &LoadedSplit<T>,
    cfg: &TrainConfig,
    stats: &ChannelStats,
    opt: &mut OptimizerState<T>,
    stage: usize,
    epoch: usize,
) -> Result<EpochOutcome, TrainError> {
    let n = data.items.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = rng_for(cfg.seed, &[hash_str("shuffle"), epoch as u64]);
    use rand::Rng;
    for i in (1..n).rev() {
        let j = shuffle_rng.random_range(0..=i);
        order.swap(i, j);
    }

    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let items: Vec<&LoadedItem<T>> = chunk.iter().map(|&i| &data.items[i]).collect();
        let mut draws = Vec::with_capacity(items.len());
        for &i in chunk {
            let item = &data.items[i];
            let shape = item.rgb.shape();
            let mut rng = rng_for(cfg.seed, &[hash_str("augment"), epoch as u64, i as u64]);
            draws.push(draw_augment(&cfg.augment, shape[1], shape[2], &mut rng)?);
        }
        let (batch, labels) = stack_batch(&items, &draws, stats)?;
        let mut dropout_rng = rng_for(cfg.seed, &[hash_str("dropout"), epoch as u64, batch_idx as u64]);
        let loss = sgd_batch_step(model, &batch, &labels, opt, stage, &mut dropout_rng)?;
        loss_sum += loss;
        batches += 1;
    }
    Ok(EpochOutcome {
        mean_loss: if batches > 0 { loss_sum / batches as f64 } else { 0.0 },
    })
}

/// Multiview (3D-filter) training: each example is a consecutive-angle
/// window of `n_views` views of one sample; the view filter convolves the
/// stacked maps before the heads, so its weights receive gradient.
fn run_epoch_windows<T: Element>(
    model: &mut dyn Architecture<T>,
    data: &LoadedSplit<T>,
    cfg: &TrainConfig,
    stats: &ChannelStats,
    opt: &mut OptimizerState<T>,
    stage: usize,
    epoch: usize,
) -> Result<EpochOutcome, TrainError> {
    use rand::Rng;
    let sets = crate::data::group_view_sets(data);
    if sets.is_empty() {
        return Err(TrainError::Invalid("no view sets in the training split".into()));
    }
    let n_views = model.config().fusion.n_views;
    let mut order: Vec<usize> = (0..sets.len()).collect();
    let mut shuffle_rng = rng_for(cfg.seed, &[hash_str("shuffle-mv"), epoch as u64]);
    for i in (1..order.len()).rev() {
        let j = shuffle_rng.random_range(0..=i);
        order.swap(i, j);
    }

    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    for (batch_idx, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
        model.params_mut().zero_grads();
        let mut tape = Tape::new();
        let binding = bind(&mut tape, model.params());
        let mut dropout_rng = rng_for(cfg.seed, &[hash_str("dropout-mv"), epoch as u64, batch_idx as u64]);

        let mut per_head: Vec<Vec<crate::tensor::Var>> = Vec::new();
        let mut labels = Vec::with_capacity(chunk.len());
        for &set_idx in chunk {
            let set = &sets[set_idx];
            let window: Vec<&LoadedItem<T>> = if set.views.len() < n_views {
                set.views.clone()
            } else {
                let mut rng = rng_for(
                    cfg.seed,
                    &[hash_str("window"), epoch as u64, set_idx as u64],
                );
                let start = rng.random_range(0..=set.views.len() - n_views);
                set.views[start..start + n_views].to_vec()
            };
            let mut per_view_acts = Vec::with_capacity(window.len());
            for (view_pos, item) in window.iter().enumerate() {
                let shape = item.rgb.shape();
                let mut rng = rng_for(
                    cfg.seed,
                    &[hash_str("augment-mv"), epoch as u64, set_idx as u64, view_pos as u64],
                );
                let draw = draw_augment(&cfg.augment, shape[1], shape[2], &mut rng)?;
                let (batch, _) = stack_batch(&[item], &[draw], stats)?;
                per_view_acts.push(model.stream_maps(&mut tape, &binding, &batch)?);
            }
            let combined = combine_view_maps(&*model, &mut tape, &binding, &per_view_acts, MultiviewMode::Filter3d)?;
            let mut ctx = ForwardCtx {
                train: true,
                rng: Some(&mut dropout_rng),
            };
            let heads = model.heads(&mut tape, &binding, &combined, &mut ctx)?;
            if per_head.is_empty() {
                per_head = vec![Vec::new(); heads.len()];
            }
            for (h, var) in heads.into_iter().enumerate() {
                per_head[h].push(var);
            }
            labels.push(set.class_id);
        }

        let mut total: Option<crate::tensor::Var> = None;
        for rows in &per_head {
            let logits = tape.concat(rows, 0)?;
            let ce = tape.cross_entropy_mean(logits, &labels)?;
            total = Some(match total {
                None => ce,
                Some(acc) => tape.add(acc, ce)?,
            });
        }
        let loss = total.expect("at least one head");
        loss_sum += tape.value(loss).scalar()?.as_f64();
        batches += 1;
        tape.backward(loss)?;
        accumulate_grads(&tape, &binding, model.params_mut());
        opt.step(model.params_mut(), |g| StagePlan::trainable(stage, g))?;
    }
    Ok(EpochOutcome {
        mean_loss: if batches > 0 { loss_sum / batches as f64 } else { 0.0 },
    })
}

/// Eval-mode accuracy over a split (center crop, no dropout).
pub fn split_accuracy<T: Element>(
    model: &dyn Architecture<T>,
    data: &LoadedSplit<T>,
    stats: &ChannelStats,
    crop: usize,
) -> Result<f64, TrainError> {
    if data.items.is_empty() {
        return Ok(0.0);
    }
    let item_refs: Vec<&LoadedItem<T>> = data.items.iter().collect();
    let probas = predict_single_view(model, &item_refs, stats, crop)?;
    let correct = probas
        .iter()
        .zip(&data.items)
        .filter(|(p, item)| crate::angular::argmax(p) == item.record.class_id)
        .count();
    Ok(correct as f64 / data.items.len() as f64)
}

/// Trains the model in place. Deterministic given (model seed, data, config):
/// shuffles, augmentation, dropout and window draws all derive from
/// `cfg.seed`. On divergence (non-finite loss or gradients) the parameters
/// roll back to the last completed epoch and an error reports the epoch.
pub fn train<T: Element>(
    model: &mut dyn Architecture<T>,
    train_data: &LoadedSplit<T>,
    test_data: Option<&LoadedSplit<T>>,
    cfg: &TrainConfig,
) -> Result<TrainLog, TrainError> {
    if train_data.items.is_empty() {
        return Err(TrainError::Invalid("empty training split".into()));
    }
    let model_classes = model.config().n_classes;
    if train_data.n_classes > model_classes {
        return Err(TrainError::Invalid(format!(
            "data has {} classes but the model was built for {model_classes}",
            train_data.n_classes
        )));
    }

    let stats = ChannelStats::compute(train_data.items.iter().map(|i| &i.rgb));
    let window_mode = model.config().fusion.multiview_mode == MultiviewMode::Filter3d;
    let crop = cfg.augment.crop;

    let mut opt = OptimizerState::new(model.params(), cfg.optimizer);
    let mut sched = ScheduleState::new(cfg.optimizer.lr);
    let mut stage3_history: Vec<f64> = Vec::new();
    let mut metrics = Vec::new();
    let mut stopped_early = false;

    let snapshot = |m: &dyn Architecture<T>| -> Vec<Vec<T>> {
        m.params().iter().map(|e| e.tensor.data().to_vec()).collect()
    };
    let mut last_good = snapshot(&*model);

    for epoch in 0..cfg.epochs {
        let stage = cfg.stages.stage_for(epoch);
        opt.lr = sched.lr;
        let outcome = if window_mode {
            run_epoch_windows(model, train_data, cfg, &stats, &mut opt, stage, epoch)
        } else {
            run_epoch_single_view(model, train_data, cfg, &stats, &mut opt, stage, epoch)
        };
        let outcome = match outcome {
            Ok(o) => o,
            Err(TrainError::Tensor(TensorError::NonFinite { op })) => {
                for (entry, saved) in model.params_mut().iter_mut().zip(&last_good) {
                    entry.tensor.data_mut().copy_from_slice(saved);
                }
                return Err(TrainError::Diverged {
                    epoch: epoch + 1,
                    message: format!("non-finite values in {op}"),
                });
            }
            Err(e) => return Err(e),
        };

        let train_acc = split_accuracy(&*model, train_data, &stats, crop)?;
        let test_acc = match test_data {
            Some(td) if cfg.test_eval_every > 0 && (epoch + 1) % cfg.test_eval_every == 0 => {
                Some(split_accuracy(&*model, td, &stats, crop)?)
            }
            _ => None,
        };
        metrics.push(EpochMetrics {
            epoch: epoch + 1,
            stage,
            lr: opt.lr,
            train_loss: outcome.mean_loss,
            train_acc,
            test_acc,
        });
        last_good = snapshot(&*model);

        if let Some(threshold) = cfg.early_stop_train_acc {
            if train_acc >= threshold {
                stopped_early = true;
                break;
            }
        }
        if stage == 3 {
            stage3_history.push(train_acc);
            match lr_schedule_update(&stage3_history, &mut sched, &cfg.schedule) {
                ScheduleDecision::Exhausted => {
                    stopped_early = true;
                    break;
                }
                _ => {}
            }
        }
    }

    Ok(TrainLog {
        epochs: metrics,
        stats,
        stopped_early,
    })
}
