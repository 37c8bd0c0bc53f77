//! Distillation objectives and the per-method training loops.

pub mod config;
pub mod loss;
pub mod trainer;

pub use config::{DistillConfig, Method};
pub use loss::KdTerms;
pub use trainer::{
    baseline_step, classic_kd_step, evaluate, evaluate_teacher, kdfm_train_step, logits_mimic_step, student_logits,
    train_epoch, EpochMetrics, LossBundle, TeacherTrainer, TrainerState,
};
