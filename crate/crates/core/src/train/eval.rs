//! Evaluation: single-view and multiview scoring, per-class and per-angle
//! accuracy, confusion matrices, and the cross-split summary format.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::angular::{
    argmax, mean_prediction, multiview_hard_vote, FusionConfig, MultiviewMode,
};
use crate::data::{center_crop, group_view_sets, ChannelStats, LoadedItem, LoadedSplit,
    normalize_diff, normalize_image,
};
use crate::models::{bind, combine_view_maps, Architecture, Batch, ForwardCtx};
use crate::rng::{hash_str, rng_for};
use crate::tensor::{Element, Tape, Tensor};

use super::TrainError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    SingleView,
    Multiview,
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EvalMode::SingleView => write!(f, "single_view"),
            EvalMode::Multiview => write!(f, "multiview"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub n_classes: usize,
    /// Scored units: records (single view) or view sets (multiview).
    pub n_units: usize,
    pub overall_acc: f64,
    /// (class_id, correct, total)
    pub per_class: Vec<(usize, usize, usize)>,
    /// (theta_deg, correct, total); single-view mode only.
    pub per_angle: Vec<(f64, usize, usize)>,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<usize>>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    fn from_outcomes(
        mode: EvalMode,
        n_classes: usize,
        outcomes: &[(usize, usize, Option<f64>)], // (true, pred, theta)
        warnings: Vec<String>,
    ) -> Result<Self, TrainError> {
        let mut confusion = vec![vec![0usize; n_classes]; n_classes];
        let mut by_angle: BTreeMap<u64, (f64, usize, usize)> = BTreeMap::new();
        for &(truth, pred, theta) in outcomes {
            confusion[truth][pred] += 1;
            if let Some(t) = theta {
                let slot = by_angle.entry(t.to_bits()).or_insert((t, 0, 0));
                slot.2 += 1;
                if truth == pred {
                    slot.1 += 1;
                }
            }
        }
        let per_class: Vec<(usize, usize, usize)> = (0..n_classes)
            .map(|c| {
                let total: usize = confusion[c].iter().sum();
                (c, confusion[c][c], total)
            })
            .collect();
        let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
        let mut per_angle: Vec<(f64, usize, usize)> = by_angle.into_values().collect();
        per_angle.sort_by(|a, b| a.0.total_cmp(&b.0));
        let report = EvalReport {
            mode,
            n_classes,
            n_units: outcomes.len(),
            overall_acc: if outcomes.is_empty() {
                0.0
            } else {
                correct as f64 / outcomes.len() as f64
            },
            per_class,
            per_angle,
            confusion,
            warnings,
        };
        report.validate()?;
        Ok(report)
    }

    /// Internal consistency: confusion rows sum to per-class totals and the
    /// trace reproduces the overall accuracy.
    pub fn validate(&self) -> Result<(), TrainError> {
        let mut trace = 0usize;
        let mut total = 0usize;
        for (class_id, correct, class_total) in &self.per_class {
            let row_sum: usize = self.confusion[*class_id].iter().sum();
            if row_sum != *class_total || self.confusion[*class_id][*class_id] != *correct {
                return Err(TrainError::Invalid(format!(
                    "confusion row {class_id} disagrees with per-class counts"
                )));
            }
            trace += correct;
            total += class_total;
        }
        if total != self.n_units {
            return Err(TrainError::Invalid("per-class totals disagree with unit count".into()));
        }
        let acc = if total == 0 { 0.0 } else { trace as f64 / total as f64 };
        if (acc - self.overall_acc).abs() > 1e-12 {
            return Err(TrainError::Invalid("overall accuracy is not trace/total".into()));
        }
        Ok(())
    }

    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("true\\pred");
        for c in 0..self.n_classes {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
        for (r, row) in self.confusion.iter().enumerate() {
            let _ = write!(out, "{r}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn per_angle_csv(&self) -> String {
        let mut out = String::from("theta_deg,correct,total,accuracy\n");
        for (theta, correct, total) in &self.per_angle {
            let acc = if *total == 0 { 0.0 } else { *correct as f64 / *total as f64 };
            let _ = writeln!(out, "{theta},{correct},{total},{acc}");
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mode: {}", self.mode);
        let _ = writeln!(out, "units: {}", self.n_units);
        let _ = writeln!(out, "overall_accuracy: {:.4}", self.overall_acc);
        let _ = writeln!(out, "per_class:");
        for (c, correct, total) in &self.per_class {
            let acc = if *total == 0 { 0.0 } else { *correct as f64 / *total as f64 };
            let _ = writeln!(out, "  class {c}: {correct}/{total} = {acc:.4}");
        }
        if !self.per_angle.is_empty() {
            let _ = writeln!(out, "per_angle:");
            for (theta, correct, total) in &self.per_angle {
                let acc = if *total == 0 { 0.0 } else { *correct as f64 / *total as f64 };
                let _ = writeln!(out, "  theta {theta:+.0}: {correct}/{total} = {acc:.4}");
            }
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}

/// `mean±std` over percentages, formatted like the result tables
/// (e.g. `83.3±2.1`). Sample standard deviation (n - 1).
pub fn format_mean_std(values_pct: &[f64]) -> String {
    if values_pct.is_empty() {
        return "n/a".into();
    }
    let n = values_pct.len() as f64;
    let mean = values_pct.iter().sum::<f64>() / n;
    let std = if values_pct.len() > 1 {
        (values_pct.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    format!("{mean:.1}±{std:.1}")
}

const EVAL_BATCH: usize = 32;

/// Eval-mode class probabilities for each item (center crop, normalization,
/// no dropout). Items are processed in fixed-size batches, batches in
/// parallel; the output order matches the input order.
pub fn predict_single_view<T: Element>(
    model: &dyn Architecture<T>,
    items: &[&LoadedItem<T>],
    stats: &ChannelStats,
    crop: usize,
) -> Result<Vec<Tensor<T>>, TrainError> {
    let chunks: Vec<&[&LoadedItem<T>]> = items.chunks(EVAL_BATCH).collect();
    let results: Vec<Result<Vec<Tensor<T>>, TrainError>> = chunks
        .par_iter()
        .map(|chunk| {
            let mut rgb_data = Vec::new();
            let mut diff_data = Vec::new();
            let mut shape: Option<Vec<usize>> = None;
            for item in chunk.iter() {
                let rgb = normalize_image(&center_crop(&item.rgb, crop), stats);
                let diff = normalize_diff(&center_crop(&item.diff, crop), stats);
                if shape.is_none() {
                    shape = Some(rgb.shape().to_vec());
                }
                rgb_data.extend_from_slice(rgb.data());
                diff_data.extend_from_slice(diff.data());
            }
            let mut full = vec![chunk.len()];
            full.extend(shape.expect("non-empty chunk"));
            let batch = Batch {
                rgb: Tensor::from_vec(full.clone(), rgb_data)?,
                diff: Some(Tensor::from_vec(full, diff_data)?),
            };
            let mut tape = Tape::new();
            let binding = bind(&mut tape, model.params());
            let acts = model.stream_maps(&mut tape, &binding, &batch)?;
            let mut ctx = ForwardCtx::eval();
            let proba = model.proba(&mut tape, &binding, &acts, &mut ctx)?;
            let value = tape.value(proba);
            let k = value.shape()[1];
            let rows = value
                .data()
                .chunks(k)
                .map(|row| Tensor::from_vec(vec![k], row.to_vec()).unwrap())
                .collect();
            Ok(rows)
        })
        .collect();
    let mut out = Vec::with_capacity(items.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

fn multiview_proba<T: Element>(
    model: &dyn Architecture<T>,
    window: &[&LoadedItem<T>],
    stats: &ChannelStats,
    crop: usize,
    mode: MultiviewMode,
) -> Result<Tensor<T>, TrainError> {
    let mut tape = Tape::new();
    let binding = bind(&mut tape, model.params());
    let mut per_view = Vec::with_capacity(window.len());
    for item in window {
        let rgb = normalize_image(&center_crop(&item.rgb, crop), stats);
        let diff = normalize_diff(&center_crop(&item.diff, crop), stats);
        let mut shape = vec![1];
        shape.extend_from_slice(rgb.shape());
        let batch = Batch {
            rgb: Tensor::from_vec(shape.clone(), rgb.data().to_vec())?,
            diff: Some(Tensor::from_vec(shape, diff.data().to_vec())?),
        };
        per_view.push(model.stream_maps(&mut tape, &binding, &batch)?);
    }
    let combined = combine_view_maps(model, &mut tape, &binding, &per_view, mode)?;
    let mut ctx = ForwardCtx::eval();
    let proba = model.proba(&mut tape, &binding, &combined, &mut ctx)?;
    let value = tape.value(proba);
    let k = value.shape()[1];
    Ok(Tensor::from_vec(vec![k], value.data().to_vec())?)
}

/// Scores a split. Single-view mode scores every record and reports
/// per-angle accuracy; multiview mode groups each sample's views (per
/// illumination), picks a consecutive-angle window of `fusion.n_views`
/// starting at a seeded random view, and combines according to
/// `fusion.multiview_mode`. Samples with fewer views fall back to all
/// available views, with a warning.
pub fn evaluate<T: Element>(
    model: &dyn Architecture<T>,
    data: &LoadedSplit<T>,
    stats: &ChannelStats,
    crop: usize,
    mode: EvalMode,
    fusion: &FusionConfig,
    seed: u64,
) -> Result<EvalReport, TrainError> {
    let n_classes = model.config().n_classes;
    match mode {
        EvalMode::SingleView => {
            let refs: Vec<&LoadedItem<T>> = data.items.iter().collect();
            let probas = predict_single_view(model, &refs, stats, crop)?;
            let outcomes: Vec<(usize, usize, Option<f64>)> = probas
                .iter()
                .zip(&data.items)
                .map(|(p, item)| (item.record.class_id, argmax(p), Some(item.record.theta_deg)))
                .collect();
            EvalReport::from_outcomes(EvalMode::SingleView, n_classes, &outcomes, Vec::new())
        }
        EvalMode::Multiview => {
            let sets = group_view_sets(data);
            let mut warnings = Vec::new();
            let mut plans: Vec<(usize, Vec<&LoadedItem<T>>)> = Vec::new();
            for set in &sets {
                let window: Vec<&LoadedItem<T>> = if set.views.len() < fusion.n_views {
                    warnings.push(format!(
                        "sample '{}' ({}) has {} views, fewer than n_views = {}; using all views",
                        set.sample_id,
                        set.illumination,
                        set.views.len(),
                        fusion.n_views
                    ));
                    set.views.clone()
                } else {
                    let mut rng = rng_for(
                        seed,
                        &[hash_str("mv-window"), hash_str(&set.sample_id), hash_str(&set.illumination)],
                    );
                    use rand::Rng;
                    let start = rng.random_range(0..=set.views.len() - fusion.n_views);
                    set.views[start..start + fusion.n_views].to_vec()
                };
                plans.push((set.class_id, window));
            }

            let outcomes: Vec<Result<(usize, usize, Option<f64>), TrainError>> = plans
                .par_iter()
                .map(|(class_id, window)| {
                    let pred = match fusion.multiview_mode {
                        MultiviewMode::Voting => {
                            let probas = predict_single_view(model, window, stats, crop)?;
                            if fusion.hard_voting {
                                multiview_hard_vote(&probas)?
                            } else {
                                argmax(&mean_prediction(&probas)?)
                            }
                        }
                        mv @ (MultiviewMode::Pooling | MultiviewMode::Filter3d) => {
                            let proba = multiview_proba(model, window, stats, crop, mv)?;
                            argmax(&proba)
                        }
                    };
                    Ok((*class_id, pred, None))
                })
                .collect();
            let outcomes: Vec<(usize, usize, Option<f64>)> =
                outcomes.into_iter().collect::<Result<_, _>>()?;
            EvalReport::from_outcomes(EvalMode::Multiview, n_classes, &outcomes, warnings)
        }
    }
}

/// Pre-classifier feature vectors for every item, deterministic in eval mode.
pub struct FeatureRow<T: Element> {
    pub sample_id: String,
    pub view_index: usize,
    pub features: Vec<T>,
}

pub fn export_features<T: Element>(
    model: &dyn Architecture<T>,
    data: &LoadedSplit<T>,
    stats: &ChannelStats,
    crop: usize,
) -> Result<Vec<FeatureRow<T>>, TrainError> {
    let refs: Vec<&LoadedItem<T>> = data.items.iter().collect();
    let chunks: Vec<&[&LoadedItem<T>]> = refs.chunks(EVAL_BATCH).collect();
    let results: Vec<Result<Vec<Vec<T>>, TrainError>> = chunks
        .par_iter()
        .map(|chunk| {
            let mut rgb_data = Vec::new();
            let mut diff_data = Vec::new();
            let mut shape: Option<Vec<usize>> = None;
            for item in chunk.iter() {
                let rgb = normalize_image(&center_crop(&item.rgb, crop), stats);
                let diff = normalize_diff(&center_crop(&item.diff, crop), stats);
                if shape.is_none() {
                    shape = Some(rgb.shape().to_vec());
                }
                rgb_data.extend_from_slice(rgb.data());
                diff_data.extend_from_slice(diff.data());
            }
            let mut full = vec![chunk.len()];
            full.extend(shape.expect("non-empty chunk"));
            let batch = Batch {
                rgb: Tensor::from_vec(full.clone(), rgb_data)?,
                diff: Some(Tensor::from_vec(full, diff_data)?),
            };
            let mut tape = Tape::new();
            let binding = bind(&mut tape, model.params());
            let acts = model.stream_maps(&mut tape, &binding, &batch)?;
            let feats = model.features(&mut tape, &binding, &acts)?;
            let value = tape.value(feats);
            let f = value.shape()[1];
            Ok(value.data().chunks(f).map(|row| row.to_vec()).collect())
        })
        .collect();
    let mut rows = Vec::with_capacity(refs.len());
    let mut flat = Vec::new();
    for r in results {
        flat.extend(r?);
    }
    for (item, features) in data.items.iter().zip(flat) {
        rows.push(FeatureRow {
            sample_id: item.record.sample_id.clone(),
            view_index: item.record.view_index,
            features,
        });
    }
    Ok(rows)
}

/// `sample_id,view_index,f_0..f_{k-1}` CSV.
pub fn features_csv<T: Element>(rows: &[FeatureRow<T>]) -> String {
    let mut out = String::from("sample_id,view_index");
    let width = rows.first().map(|r| r.features.len()).unwrap_or(0);
    for i in 0..width {
        let _ = write!(out, ",f_{i}");
    }
    out.push('\n');
    for row in rows {
        let _ = write!(out, "{},{}", row.sample_id, row.view_index);
        for v in &row.features {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}
