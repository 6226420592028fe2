//! Toy teacher/student networks, training loops, evaluation and metrics files.

mod eval;
mod metrics;
mod network;
mod optim;
mod train;

pub use eval::{
    average_precision, detect_peaks, gt_centers, match_detections, synthetic_ap, Detection,
    MATCH_RADIUS, MIN_PEAK_SCORE,
};
pub use metrics::{read_layer_losses, read_metrics, write_layer_losses, write_metrics};
pub use network::{NetOutputs, StudentNet, TeacherNet};
pub use optim::{cosine_lr, AdamW};
pub use train::{
    evaluate, inherit_head, teacher_view, train_student, train_teacher, EpochMetrics, EvalMetrics,
    LayerLossRow, StudentModel, StudentRun, TeacherRun, TeacherView, TrainConfig, INPUT_CHANNELS,
};
