//! Online class-incremental training: rehearsal with memory duplication and
//! distillation against the model frozen after the previous task.

mod buffer;
mod loss;
mod train;

pub use buffer::{build_task_train_set, BufferEntry, Origin, RehearsalBuffer, TrainItem};
pub use loss::{ce_loss, ce_loss_value, lwf_loss, lwf_loss_value};
pub use train::{
    class_mask, run_experiment, train_task, ExperimentOutcome, Learner, LossEvent, TaskData, TaskReport, TrainPlan,
};

#[cfg(test)]
mod tests;
