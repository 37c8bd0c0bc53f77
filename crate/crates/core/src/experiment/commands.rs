use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointMeta};
use super::config::ExperimentConfig;
use super::metrics::{write_metrics, write_timings, MetricsRow, RunSummary};
use crate::data::{rng_for, Dataset, Split};
use crate::distill::{evaluate, evaluate_teacher, student_logits, train_epoch, TeacherTrainer, TrainerState};
use crate::error::{Error, Result};
use crate::nn::{student_width_for_params, Architecture, Model, Role};
use crate::tensor::Tensor;

pub const TEACHER_CHECKPOINT: &str = "teacher.ckpt";
pub const STUDENT_CHECKPOINT: &str = "student.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.json";

/// Mixes a purpose tag into the run seed so each consumer gets its own
/// stream.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let h = tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    });
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Shuffle seed for one epoch.
pub fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    derive_seed(seed, "shuffle").wrapping_add(epoch)
}

/// What a training command produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub checkpoint: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub summary: RunSummary,
}

fn prepare(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_run(
    cfg: &ExperimentConfig,
    rows: &[MetricsRow],
    seconds: &[f64],
    summary: &RunSummary,
    checkpoint: &Checkpoint,
    name: &str,
) -> Result<PathBuf> {
    let dir = &cfg.output_dir;
    let ck_path = dir.join(name);
    checkpoint.save(&ck_path)?;
    write_metrics(dir.join(METRICS_FILE), rows)?;
    write_timings(dir.join(TIMINGS_FILE), seconds)?;
    summary.write(dir.join(SUMMARY_FILE))?;
    let cfg_path = dir.join(CONFIG_FILE);
    std::fs::write(&cfg_path, cfg.to_json() + "\n").map_err(|e| Error::io(&cfg_path, e))?;
    Ok(ck_path)
}

fn meta(cfg: &ExperimentConfig, arch: Architecture, epochs: u64) -> CheckpointMeta {
    CheckpointMeta {
        seed: cfg.schedule.seed,
        epoch: epochs,
        config_hash: format!("{:016x}", cfg.hash()),
        rng_state: epoch_seed(cfg.schedule.seed, epochs),
        ..CheckpointMeta::new(arch)
    }
}

fn epoch_rows(epoch: u64, train_acc: f64, test_acc: f64, losses: crate::distill::LossBundle) -> [MetricsRow; 2] {
    [
        MetricsRow {
            epoch,
            split: Split::Train,
            accuracy: train_acc,
            losses: Some(losses),
        },
        MetricsRow {
            epoch,
            split: Split::Test,
            accuracy: test_acc,
            losses: None,
        },
    ]
}

/// A trained teacher with its per-epoch metrics.
#[derive(Debug, Clone)]
pub struct TeacherRun {
    pub trainer: TeacherTrainer,
    pub rows: Vec<MetricsRow>,
    pub seconds: Vec<f64>,
    pub test_accuracy: f64,
}

/// Trains the teacher in memory with plain cross-entropy.
pub fn train_teacher(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<TeacherRun> {
    let spec = cfg.teacher_spec()?;
    let mut teacher: Model = Architecture::Teacher(spec).build()?;
    teacher.init_params(derive_seed(cfg.schedule.seed, "teacher"));
    let mut trainer = TeacherTrainer::new(teacher, cfg.schedule.teacher_opt)?;
    trainer.augment = cfg.schedule.augment;
    let mut rows = Vec::new();
    let mut seconds = Vec::new();
    let base = cfg.schedule.teacher_opt;
    for epoch in 0..cfg.schedule.teacher_epochs {
        let t0 = Instant::now();
        let factor = cfg.schedule.lr_schedule.factor(epoch, cfg.schedule.teacher_epochs);
        trainer.opt.scale_lr(&base, factor);
        let m = trainer.train_epoch(train, cfg.schedule.batch_size, epoch_seed(cfg.schedule.seed, epoch))?;
        let acc = evaluate_teacher(&mut trainer.teacher, test)?;
        seconds.push(t0.elapsed().as_secs_f64());
        log::info!(
            "teacher epoch {epoch}: loss {:.4} train {:.4} test {acc:.4}",
            m.losses.l_h,
            m.train_accuracy
        );
        rows.extend(epoch_rows(epoch, m.train_accuracy, acc, m.losses));
    }
    let test_accuracy = evaluate_teacher(&mut trainer.teacher, test)?;
    Ok(TeacherRun {
        trainer,
        rows,
        seconds,
        test_accuracy,
    })
}

/// Pre-trains the teacher and writes `teacher.ckpt`, metrics and summary
/// into the output directory.
pub fn cmd_train_teacher(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    prepare(&cfg.output_dir)?;
    let (train, test) = cfg.dataset.load()?;
    let run = train_teacher(cfg, &train, &test)?;
    let teacher = &run.trainer.teacher;
    let mut ck = Checkpoint::new(meta(cfg, teacher.arch.clone(), cfg.schedule.teacher_epochs));
    ck.push_model("T", teacher);
    ck.push_optimizer("opt_T", &run.trainer.opt);
    let summary = RunSummary {
        role: Role::TeacherT.to_string(),
        method: None,
        epochs: cfg.schedule.teacher_epochs,
        seed: cfg.schedule.seed,
        config_hash: ck.meta.config_hash.clone(),
        final_train_accuracy: run
            .rows
            .iter()
            .rev()
            .find(|r| r.split == Split::Train)
            .map(|r| r.accuracy),
        final_test_accuracy: run.test_accuracy,
        param_count: teacher.param_count(),
    };
    let checkpoint = write_run(cfg, &run.rows, &run.seconds, &summary, &ck, TEACHER_CHECKPOINT)?;
    Ok(RunOutput {
        checkpoint,
        rows: run.rows,
        summary,
    })
}

/// Fresh student-side components for a config: `G`, `C` and, when the
/// method uses one, `D`.
pub fn build_student_side(cfg: &ExperimentConfig) -> Result<(Model, Model, Option<Model>)> {
    let seed = cfg.schedule.seed;
    let spec = cfg.student_spec()?;
    let mut g: Model = Architecture::Student(spec).build()?;
    g.init_params(derive_seed(seed, "student"));
    let feature = g.output_shape()?;
    let feature: [usize; 3] = feature
        .try_into()
        .map_err(|f| Error::config(format!("student features must be [C, H, W], got {f:?}")))?;
    let (_, num_classes) = cfg.dataset.geometry()?;
    let mut c: Model = Architecture::Classifier {
        channels: feature[0],
        height: feature[1],
        width: feature[2],
        num_classes,
    }
    .build()?;
    c.init_params(derive_seed(seed, "classifier"));
    let d = if cfg.distill.uses_discriminator() {
        let mut d: Model = Architecture::Discriminator(cfg.discriminator_spec(feature)).build()?;
        d.init_params(derive_seed(seed, "discriminator"));
        Some(d)
    } else {
        None
    };
    Ok((g, c, d))
}

/// A finished distillation run held in memory.
#[derive(Debug, Clone)]
pub struct DistillRun {
    pub state: TrainerState,
    pub rows: Vec<MetricsRow>,
    pub seconds: Vec<f64>,
    pub test_accuracy: f64,
}

/// Runs the configured method against an in-memory teacher.
pub fn distill_with_teacher(
    cfg: &ExperimentConfig,
    teacher: Option<Model>,
    train: &Dataset,
    test: &Dataset,
) -> Result<DistillRun> {
    let (g, c, d) = build_student_side(cfg)?;
    let teacher = if cfg.distill.method.uses_teacher() {
        teacher
    } else {
        None
    };
    let mut state = TrainerState::new(cfg.distill.clone(), g, c, teacher, d, cfg.schedule.seed)?;
    state.augment = cfg.schedule.augment;
    let mut rows = Vec::new();
    let mut seconds = Vec::new();
    for epoch in 0..cfg.schedule.epochs {
        let t0 = Instant::now();
        let factor = cfg.schedule.lr_schedule.factor(epoch, cfg.schedule.epochs);
        state.opt_g.scale_lr(&cfg.distill.opt_g, factor);
        state.opt_c.scale_lr(&cfg.distill.opt_c, factor);
        if let Some(d) = state.opt_d.as_mut() {
            d.scale_lr(&cfg.distill.opt_d, factor);
        }
        let m = train_epoch(
            &mut state,
            train,
            cfg.schedule.batch_size,
            epoch_seed(cfg.schedule.seed, epoch),
        )?;
        let acc = evaluate(&mut state.student, &mut state.classifier, test)?;
        seconds.push(t0.elapsed().as_secs_f64());
        log::info!(
            "{} epoch {epoch}: l_g {:.4} train {:.4} test {acc:.4}",
            cfg.distill.method,
            m.losses.l_g,
            m.train_accuracy
        );
        rows.extend(epoch_rows(epoch, m.train_accuracy, acc, m.losses));
    }
    let test_accuracy = evaluate(&mut state.student, &mut state.classifier, test)?;
    Ok(DistillRun {
        state,
        rows,
        seconds,
        test_accuracy,
    })
}

/// Checks a teacher checkpoint's header against the config.
fn check_teacher_header(cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    let header = Checkpoint::read_header(path)?;
    if header.role != Role::TeacherT {
        return Err(Error::RoleMismatch {
            expected: Role::TeacherT.to_string(),
            found: header.role.to_string(),
        });
    }
    let expected = Architecture::Teacher(cfg.teacher_spec()?);
    if header.arch != expected {
        return Err(Error::config(format!(
            "teacher checkpoint architecture {:?} does not match config {:?}",
            header.arch, expected
        )));
    }
    Ok(())
}

/// Trains a student by the configured method and writes `student.ckpt`,
/// metrics and summary. The baseline reads only the teacher's header.
pub fn cmd_distill(cfg: &ExperimentConfig, teacher_checkpoint: impl AsRef<Path>) -> Result<RunOutput> {
    cfg.validate()?;
    let path = teacher_checkpoint.as_ref();
    check_teacher_header(cfg, path)?;
    prepare(&cfg.output_dir)?;
    let teacher = if cfg.distill.method.uses_teacher() {
        Some(Checkpoint::load(path)?.teacher()?)
    } else {
        None
    };
    let (train, test) = cfg.dataset.load()?;
    let run = distill_with_teacher(cfg, teacher, &train, &test)?;
    let state = &run.state;
    let mut ck = Checkpoint::new(meta(cfg, state.student.arch.clone(), cfg.schedule.epochs));
    ck.meta.classifier = Some(state.classifier.arch.clone());
    ck.meta.method = Some(cfg.distill.method);
    ck.push_model("G", &state.student);
    ck.push_model("C", &state.classifier);
    ck.push_optimizer("opt_G", &state.opt_g);
    ck.push_optimizer("opt_C", &state.opt_c);
    if let (Some(d), Some(opt)) = (&state.discriminator, &state.opt_d) {
        ck.push_model("D", d);
        ck.push_optimizer("opt_D", opt);
    }
    let summary = RunSummary {
        role: Role::StudentG.to_string(),
        method: Some(cfg.distill.method.to_string()),
        epochs: cfg.schedule.epochs,
        seed: cfg.schedule.seed,
        config_hash: ck.meta.config_hash.clone(),
        final_train_accuracy: run
            .rows
            .iter()
            .rev()
            .find(|r| r.split == Split::Train)
            .map(|r| r.accuracy),
        final_test_accuracy: run.test_accuracy,
        param_count: state.student.param_count() + state.classifier.param_count(),
    };
    let checkpoint = write_run(cfg, &run.rows, &run.seconds, &summary, &ck, STUDENT_CHECKPOINT)?;
    Ok(RunOutput {
        checkpoint,
        rows: run.rows,
        summary,
    })
}

/// Hyper-parameter or architecture axis for [`cmd_sweep`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    T,
    Lambda,
    Alpha,
    /// Number of student convs.
    Depth,
    /// Target student feature-extractor parameter count.
    Params,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::T => "t",
            SweepAxis::Lambda => "lambda",
            SweepAxis::Alpha => "alpha",
            SweepAxis::Depth => "depth",
            SweepAxis::Params => "params",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "t" => SweepAxis::T,
            "lambda" => SweepAxis::Lambda,
            "alpha" => SweepAxis::Alpha,
            "depth" => SweepAxis::Depth,
            "params" => SweepAxis::Params,
            other => return Err(Error::usage(format!("unknown sweep axis {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub test_accuracy: f64,
}

fn positive_integer(axis: SweepAxis, v: f64) -> Result<usize> {
    if v >= 1.0 && v.fract() == 0.0 && v <= usize::MAX as f64 {
        Ok(v as usize)
    } else {
        Err(Error::config(format!(
            "{} values must be positive integers, got {v}",
            axis.as_str()
        )))
    }
}

/// The config for one sweep point, writing into its own subdirectory.
pub fn sweep_point(cfg: &ExperimentConfig, axis: SweepAxis, value: f64) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    match axis {
        SweepAxis::T => c.distill.t = value,
        SweepAxis::Lambda => c.distill.lambda = value,
        SweepAxis::Alpha => c.distill.alpha = value,
        SweepAxis::Depth => {
            c.student.depth = positive_integer(axis, value)?;
            c.student.channels = None;
            c.student.pool_after = None;
        }
        SweepAxis::Params => {
            let target = positive_integer(axis, value)?;
            let teacher = c.teacher_spec()?;
            c.student.width =
                student_width_for_params(teacher.input[0], c.student.depth, teacher.feature_shape()[0], target)?;
            c.student.channels = None;
        }
    }
    c.output_dir = cfg.output_dir.join(format!("{}_{value}", axis.as_str()));
    Ok(c)
}

/// Runs [`cmd_distill`] once per value and writes `sweep_<axis>.csv`
/// (`value,test_accuracy`) into the output directory.
pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    teacher_checkpoint: impl AsRef<Path>,
    axis: SweepAxis,
    values: &[f64],
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::usage("sweep needs at least one value"));
    }
    let points: Vec<ExperimentConfig> = values
        .iter()
        .map(|&v| {
            let p = sweep_point(cfg, axis, v)?;
            p.validate()?;
            Ok(p)
        })
        .collect::<Result<_>>()?;
    prepare(&cfg.output_dir)?;
    let mut rows = Vec::new();
    for (point, &value) in points.iter().zip(values) {
        let out = cmd_distill(point, teacher_checkpoint.as_ref())?;
        rows.push(SweepRow {
            value,
            test_accuracy: out.summary.final_test_accuracy,
        });
    }
    let path = cfg.output_dir.join(format!("sweep_{}.csv", axis.as_str()));
    let mut w = csv::Writer::from_path(&path).map_err(|e| super::metrics::csv_error(&path, e))?;
    w.write_record(["value", "test_accuracy"])?;
    for r in &rows {
        w.write_record([r.value.to_string(), r.test_accuracy.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

/// Test-split accuracy of a student (through its classifier) or teacher
/// checkpoint.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: impl AsRef<Path>) -> Result<f64> {
    let ck = Checkpoint::load(checkpoint)?;
    let (_, test) = cfg.dataset.load()?;
    let expected = ck.meta.arch.input_shape();
    if test.image_shape() != expected {
        return Err(Error::Dimension {
            op: "eval",
            lhs: expected.to_vec(),
            rhs: test.image_shape().to_vec(),
        });
    }
    match ck.meta.role {
        Role::StudentG => {
            let (mut g, mut c) = ck.student()?;
            evaluate(&mut g, &mut c, &test)
        }
        Role::TeacherT => evaluate_teacher(&mut ck.teacher()?, &test),
        other => Err(Error::RoleMismatch {
            expected: format!("{} or {}", Role::StudentG, Role::TeacherT),
            found: other.to_string(),
        }),
    }
}

pub const BENCH_WARMUP: usize = 10;
pub const BENCH_DEFAULT_REPS: usize = 1000;

/// Single-image latency statistics in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub repetitions: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    /// Sample standard deviation; 0 for a single repetition.
    pub std_ms: f64,
}

impl BenchReport {
    pub fn from_samples(ms: &[f64]) -> Self {
        let n = ms.len();
        let mean = ms.iter().sum::<f64>() / n as f64;
        let mut sorted = ms.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        let std = if n > 1 {
            (ms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        BenchReport {
            repetitions: n,
            mean_ms: mean,
            median_ms: median,
            std_ms: std,
        }
    }
}

/// Times `reps` calls of `f` after [`BENCH_WARMUP`] untimed ones.
pub fn bench_fn(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<BenchReport> {
    if reps == 0 {
        return Err(Error::usage("repetitions must be at least 1"));
    }
    for _ in 0..BENCH_WARMUP {
        f()?;
    }
    let mut ms = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        f()?;
        ms.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    Ok(BenchReport::from_samples(&ms))
}

/// Eval-mode forward latency of one image through a loaded checkpoint:
/// `C(G(x))` for a student, the full network for a teacher.
pub fn bench_checkpoint(ck: &Checkpoint, reps: usize) -> Result<BenchReport> {
    let [c, h, w] = ck.meta.arch.input_shape();
    let image = Tensor::randn(vec![1, c, h, w], 1.0, &mut rng_for(0, 0));
    match ck.meta.role {
        Role::StudentG => {
            let (mut g, mut cl) = ck.student()?;
            bench_fn(reps, || student_logits(&mut g, &mut cl, &image).map(drop))
        }
        Role::TeacherT => {
            let mut t = ck.teacher()?;
            bench_fn(reps, || t.teacher_outputs(&image).map(drop))
        }
        other => Err(Error::RoleMismatch {
            expected: format!("{} or {}", Role::StudentG, Role::TeacherT),
            found: other.to_string(),
        }),
    }
}

pub fn cmd_bench(checkpoint: impl AsRef<Path>, reps: usize) -> Result<BenchReport> {
    bench_checkpoint(&Checkpoint::load(checkpoint)?, reps)
}
