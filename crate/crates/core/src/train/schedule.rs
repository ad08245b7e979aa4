//! Learning-rate schedule and the staged fine-tuning plan.
//!
//! The rate decays by a fixed factor when training accuracy saturates:
//! if the best accuracy of the last `window` epochs improves on the best
//! of all earlier epochs by at most `tau`, the window is saturated. At most
//! one decay fires per window, and training stops once `max_decays` decays
//! have been spent and saturation hits again.

use crate::models::ParamGroup;

#[derive(Clone, Copy, Debug)]
pub struct ScheduleConfig {
    pub decay_factor: f64,
    /// Saturation window length in epochs.
    pub window: usize,
    /// Minimum absolute train-accuracy gain that counts as progress.
    pub tau: f64,
    /// Decays to spend before saturation stops training.
    pub max_decays: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            decay_factor: 0.1,
            window: 3,
            tau: 0.002,
            max_decays: 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScheduleState {
    pub lr: f64,
    pub decays: usize,
    last_decay_epoch: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleDecision {
    Hold,
    Decayed,
    /// Saturated again after all decays were spent.
    Exhausted,
}

impl ScheduleState {
    pub fn new(lr: f64) -> Self {
        ScheduleState {
            lr,
            decays: 0,
            last_decay_epoch: None,
        }
    }
}

/// Applies the saturation rule to the accuracy history (one entry per epoch,
/// oldest first). Comparison allows gain == tau to count as saturation; the
/// epsilon absorbs float noise in accuracies derived from ratios.
pub fn lr_schedule_update(
    history: &[f64],
    state: &mut ScheduleState,
    cfg: &ScheduleConfig,
) -> ScheduleDecision {
    let epoch = history.len();
    if epoch < cfg.window + 1 {
        return ScheduleDecision::Hold;
    }
    if let Some(last) = state.last_decay_epoch {
        if epoch - last < cfg.window {
            return ScheduleDecision::Hold;
        }
    }
    let split = history.len() - cfg.window;
    let recent_best = history[split..].iter().cloned().fold(f64::MIN, f64::max);
    let earlier_best = history[..split].iter().cloned().fold(f64::MIN, f64::max);
    let gain = recent_best - earlier_best;
    if gain <= cfg.tau + 1e-12 {
        if state.decays >= cfg.max_decays {
            return ScheduleDecision::Exhausted;
        }
        state.lr *= cfg.decay_factor;
        state.decays += 1;
        state.last_decay_epoch = Some(epoch);
        return ScheduleDecision::Decayed;
    }
    ScheduleDecision::Hold
}

/// Which parameter groups train in which stage: stage 1 only the classifier,
/// stage 2 adds the head layers (fully connected, encoding, bilinear,
/// reductions, view filter), stage 3 trains everything.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StagePlan {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
}

impl Default for StagePlan {
    fn default() -> Self {
        StagePlan {
            stage1_epochs: 3,
            stage2_epochs: 3,
        }
    }
}

impl StagePlan {
    /// End-to-end from the first epoch (no frozen stages).
    pub fn single_stage() -> Self {
        StagePlan {
            stage1_epochs: 0,
            stage2_epochs: 0,
        }
    }

    pub fn stage_for(&self, epoch_index: usize) -> usize {
        if epoch_index < self.stage1_epochs {
            1
        } else if epoch_index < self.stage1_epochs + self.stage2_epochs {
            2
        } else {
            3
        }
    }

    pub fn trainable(stage: usize, group: ParamGroup) -> bool {
        match stage {
            1 => group == ParamGroup::Classifier,
            2 => group != ParamGroup::Backbone,
            _ => true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(history: &[f64], cfg: &ScheduleConfig) -> (ScheduleState, Vec<usize>) {
        let mut state = ScheduleState::new(0.01);
        let mut decay_epochs = Vec::new();
        for e in 1..=history.len() {
            if lr_schedule_update(&history[..e], &mut state, cfg) == ScheduleDecision::Decayed {
                decay_epochs.push(e);
            }
        }
        (state, decay_epochs)
    }

    #[test]
    fn strictly_improving_history_never_decays() {
        let history: Vec<f64> = (0..10).map(|i| 0.1 * i as f64).collect();
        let (state, decays) = run(&history, &ScheduleConfig::default());
        assert!(decays.is_empty());
        assert_eq!(state.lr, 0.01);
    }

    #[test]
    fn flat_history_of_window_plus_one_decays_once() {
        let cfg = ScheduleConfig::default();
        let history = vec![0.8; cfg.window + 1];
        let (state, decays) = run(&history, &cfg);
        assert_eq!(decays, vec![cfg.window + 1]);
        assert!((state.lr - 0.001).abs() < 1e-12);
    }

    #[test]
    fn hand_worked_history_decays_at_epoch_five() {
        // window 3, tau 0.002: best of last 3 = 0.902, best before = 0.9,
        // gain 0.002 counts as saturated.
        let history = [0.5, 0.9, 0.901, 0.902, 0.9015];
        let (_, decays) = run(&history, &ScheduleConfig::default());
        assert_eq!(decays, vec![5]);
    }

    #[test]
    fn at_most_one_decay_per_window() {
        let cfg = ScheduleConfig { max_decays: 10, ..Default::default() };
        let history = vec![0.5; 12];
        let (_, decays) = run(&history, &cfg);
        // epochs 4, 7, 10 at window 3
        assert_eq!(decays, vec![4, 7, 10]);
    }

    #[test]
    fn exhaustion_after_max_decays() {
        let cfg = ScheduleConfig::default(); // max 2 decays
        let mut state = ScheduleState::new(0.01);
        let history = vec![0.5; 30];
        let mut saw_exhausted = false;
        for e in 1..=history.len() {
            match lr_schedule_update(&history[..e], &mut state, &cfg) {
                ScheduleDecision::Exhausted => {
                    saw_exhausted = true;
                    break;
                }
                _ => {}
            }
        }
        assert!(saw_exhausted);
        assert_eq!(state.decays, 2);
    }

    #[test]
    fn stage_plan_gates_groups() {
        let plan = StagePlan::default();
        assert_eq!(plan.stage_for(0), 1);
        assert_eq!(plan.stage_for(3), 2);
        assert_eq!(plan.stage_for(6), 3);
        assert!(StagePlan::trainable(1, ParamGroup::Classifier));
        assert!(!StagePlan::trainable(1, ParamGroup::Head));
        assert!(StagePlan::trainable(2, ParamGroup::Head));
        assert!(!StagePlan::trainable(2, ParamGroup::Backbone));
        assert!(StagePlan::trainable(3, ParamGroup::Backbone));
    }
}
