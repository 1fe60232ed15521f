use super::optim::{AdamConfig, AdamState};
use crate::model::Seq2SeqParams;

/// Parameters and optimizer moments saved at the best checkpoint.
#[derive(Clone, Debug)]
pub struct BestCheckpoint {
    /// 1-based checkpoint number.
    pub checkpoint: usize,
    pub metric: f64,
    pub tiebreak: f64,
    pub params: Seq2SeqParams,
    pub adam: AdamState,
}

/// Mutable state of one training run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: Seq2SeqParams,
    pub adam: AdamState,
    pub updates: u64,
    pub lr: f64,
    /// Validation metric per checkpoint.
    pub history: Vec<f64>,
    pub best: Option<BestCheckpoint>,
    pub not_improved: usize,
    pub reductions: usize,
    pub reduce_factor: f64,
    pub patience: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleEvent {
    Improved,
    NotImproved,
    /// Learning rate reduced and parameters/moments restored from the best checkpoint.
    Reduced,
}

impl TrainState {
    pub fn new(
        params: Seq2SeqParams,
        adam: AdamConfig,
        lr: f64,
        reduce_factor: f64,
        patience: usize,
    ) -> Self {
        Self {
            params,
            adam: AdamState::new(adam),
            updates: 0,
            lr,
            history: Vec::new(),
            best: None,
            not_improved: 0,
            reductions: 0,
            reduce_factor,
            patience,
        }
    }

    pub fn best_checkpoint(&self) -> Option<usize> {
        self.best.as_ref().map(|b| b.checkpoint)
    }
}

/// Plateau-reduce step, called once per checkpoint with the validation
/// metric (higher is better) and a tie-breaker (lower is better). After
/// `patience` consecutive checkpoints without a strict improvement the
/// learning rate is multiplied by the reduce factor and parameters and
/// moments are reloaded from the best checkpoint.
///
/// The tie-breaker only matters when the metric is exactly equal, as with
/// BLEU stuck at 0 early in training; without it the first checkpoint stays
/// "best" and the reset throws away everything learned since.
pub fn lr_schedule_step(state: &mut TrainState, metric: f64, tiebreak: f64) -> ScheduleEvent {
    state.history.push(metric);
    let checkpoint = state.history.len();
    let better =
        |b: &BestCheckpoint| metric > b.metric || (metric == b.metric && tiebreak < b.tiebreak);
    if state.best.as_ref().is_none_or(better) {
        state.best = Some(BestCheckpoint {
            checkpoint,
            metric,
            tiebreak,
            params: state.params.clone(),
            adam: state.adam.clone(),
        });
        state.not_improved = 0;
        return ScheduleEvent::Improved;
    }
    state.not_improved += 1;
    if state.not_improved < state.patience {
        return ScheduleEvent::NotImproved;
    }
    let best = state
        .best
        .as_ref()
        .expect("best exists after the first checkpoint");
    state.params = best.params.clone();
    state.adam = best.adam.clone();
    state.lr *= state.reduce_factor;
    state.not_improved = 0;
    state.reductions += 1;
    ScheduleEvent::Reduced
}
