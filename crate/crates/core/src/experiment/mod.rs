//! Config-driven experiment commands, checkpoints and metrics files.

mod checkpoint;
mod commands;
mod config;
mod metrics;

pub use checkpoint::{Checkpoint, CheckpointMeta, Record, MAGIC, VERSION};
pub use commands::{
    bench_checkpoint, bench_fn, build_student_side, cmd_bench, cmd_distill, cmd_eval, cmd_sweep, cmd_train_teacher,
    derive_seed, distill_with_teacher, epoch_seed, sweep_point, train_teacher, BenchReport, DistillRun, RunOutput,
    SweepAxis, SweepRow, TeacherRun, BENCH_DEFAULT_REPS, BENCH_WARMUP, CONFIG_FILE, METRICS_FILE, STUDENT_CHECKPOINT,
    SUMMARY_FILE, TEACHER_CHECKPOINT, TIMINGS_FILE,
};
pub use config::{
    apply_override, DatasetConfig, DiscriminatorConfig, ExperimentConfig, ScheduleConfig, StudentConfig, TeacherConfig,
};
pub use metrics::{read_metrics, write_metrics, write_timings, MetricsRow, RunSummary, METRICS_HEADER};
