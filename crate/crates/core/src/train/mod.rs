//! Losses, learning-rate schedule, optimizers, IoU metrics and the
//! training loop.

mod loss;
mod metrics;
mod optim;
mod run;
mod schedule;

pub use loss::{focal_iou_loss, loss, weighted_ce, FocalIouConfig, LossConfig, IOU_SMOOTH};
pub use metrics::{argmax_classes, mean_iou, IouAccumulator, IouSummary};
pub use optim::{OptimState, OptimizerKind};
pub use run::{
    evaluate, evaluate_loss, train_loop, EpochRecord, RunLog, RunSummary, TrainConfig, BEST_CHECKPOINT,
    FINAL_CHECKPOINT, LOG_FILE, SUMMARY_FILE,
};
pub use schedule::{cosine_lr, ScheduleKind, ScheduleState};
