//! Multi-scale loss, momentum SGD and the phased training curriculum.

mod curriculum;
mod loss;
mod pyramid;
mod sgd;

pub use curriculum::{
    default_phases, loss_csv_header, loss_csv_row, plateaued, run_curriculum, write_loss_csv,
    CurriculumPhase, IterationRecord, LabelTarget, TrainConfig, Trainer, TrainingSample,
};
pub use loss::{multiscale_loss, output_loss, LossOptions, LossReport, Supervision};
pub use pyramid::{build_label_pyramid, LabelPyramid};
pub use sgd::{collect_grads, lr_schedule, ParamGrads, PathMultipliers, Sgd};
