//! Weighted cross-entropy training with Adam and a plateau schedule.

mod adam;
mod loss;
mod schedule;
mod trainer;
mod weights;

pub use adam::Adam;
pub use loss::{segment_loss_grad, segment_loss_parts, weighted_ce, weighted_ce_valid, LossParts};
pub use schedule::{
    run_schedule, EpochRecord, EpochRunner, ScheduleOutcome, ScriptedRunner, StopReason, TrainConfig, TrainLog,
    TrainState,
};
pub use trainer::{
    batch_gradient, evaluate_loss, frame_accuracy, mix_seed, train_model, OnlineAugment, TrainOutcome, TrainSet,
    Trainer,
};
pub use weights::{
    derive_weights, inverse_frequency, resample_to_proportions, weights_from_proportions, ClassWeights, WeightsMode,
};
