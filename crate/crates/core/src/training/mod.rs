//! Staged optimization: distillation toward teacher soft targets, then score-distribution
//! regression, both with SGD + momentum, weight decay and a step learning-rate schedule.

mod optim;
mod teacher;
mod trainer;

pub use optim::{lr_at, sgd_step, OptimizerConfig, SgdState};
pub use teacher::{generate_teacher_targets, read_teacher_targets, write_teacher_targets, TeacherTargets};
pub use trainer::{
    evaluate, mean_cross_entropy, predict_all, train_aesthetic, train_distill, train_teacher,
    write_loss_csv, InitPolicy, LossKind, LossRecord, StagedModel, TrainConfig, TrainOutcome, TrainStage,
};
