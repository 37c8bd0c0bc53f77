use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use super::config::{DistillConfig, Method};
use super::loss;
use crate::data::{augment, iterate_batches, rng_for, Dataset, DatasetBatch};
use crate::error::{Error, Result};
use crate::nn::{Mode, Model, Role};
use crate::tensor::{Graph, OptimizerState, Scalar, SgdConfig, Tensor, Var};

/// Rows per forward pass when evaluating or caching teacher outputs.
const EVAL_CHUNK: usize = 256;

/// Per-step loss values.
///
/// For KDFM every field is populated and `l_kd = λ·l_h + (1−λ)·l_s`,
/// `l_g = l_adv_g + α·l_kd`. Without the adversarial term `l_g = l_kd`.
/// The other methods fill the terms they have and put the minimized
/// objective in `l_g`: classic KD mirrors KDFM's `l_h`/`l_s`/`l_kd`,
/// logits mimic and the baseline leave the distillation terms at zero
/// (the baseline reports its cross-entropy as `l_h`).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_h: f64,
    pub l_s: f64,
    pub l_kd: f64,
    pub l_adv_d: f64,
    pub l_adv_g: f64,
    pub l_g: f64,
}

impl LossBundle {
    pub fn fields(&self) -> [f64; 6] {
        [self.l_h, self.l_s, self.l_kd, self.l_adv_d, self.l_adv_g, self.l_g]
    }

    /// Field-wise arithmetic mean; zero for an empty slice.
    pub fn mean(items: &[LossBundle]) -> LossBundle {
        if items.is_empty() {
            return LossBundle::default();
        }
        let n = items.len() as f64;
        let mut acc = [0.0; 6];
        for b in items {
            for (a, v) in acc.iter_mut().zip(b.fields()) {
                *a += v;
            }
        }
        let [l_h, l_s, l_kd, l_adv_d, l_adv_g, l_g] = acc.map(|v| v / n);
        LossBundle {
            l_h,
            l_s,
            l_kd,
            l_adv_d,
            l_adv_g,
            l_g,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub losses: LossBundle,
    /// Eval-mode accuracy on the training split after the epoch.
    pub train_accuracy: f64,
    pub steps: usize,
}

/// Teacher features and logits for every row of one dataset.
#[derive(Debug, Clone)]
struct TeacherCache {
    fingerprint: u64,
    features: Tensor<f32>,
    logits: Tensor<f32>,
}

/// Everything one distillation run mutates: student `G`, classifier `C`,
/// frozen teacher `T`, discriminator `D` and their optimizers.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub config: DistillConfig,
    pub student: Model,
    pub classifier: Model,
    pub teacher: Option<Model>,
    pub discriminator: Option<Model>,
    pub opt_g: OptimizerState,
    pub opt_c: OptimizerState,
    pub opt_d: Option<OptimizerState>,
    pub step: u64,
    pub seed: u64,
    /// Apply pad/crop/flip augmentation to training batches.
    pub augment: bool,
    feature_shape: Vec<usize>,
    teacher_evaluations: u64,
    cache: Option<TeacherCache>,
}

fn expect_role(model: &Model, role: Role) -> Result<()> {
    if model.role != role {
        return Err(Error::RoleMismatch {
            expected: role.to_string(),
            found: model.role.to_string(),
        });
    }
    Ok(())
}

fn shape_mismatch(what: &str, student: &[usize], teacher: &[usize]) -> Error {
    Error::config(format!(
        "{what}: student produces {student:?} but teacher produces {teacher:?}"
    ))
}

impl TrainerState {
    /// Validates the components against each other and the method.
    ///
    /// Methods other than the baseline need a teacher; KDFM additionally
    /// needs equal student and teacher feature shapes, and a discriminator
    /// unless the adversarial term is disabled.
    pub fn new(
        config: DistillConfig,
        student: Model,
        classifier: Model,
        teacher: Option<Model>,
        discriminator: Option<Model>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        expect_role(&student, Role::StudentG)?;
        expect_role(&classifier, Role::ClassifierC)?;
        let feature_shape = student.output_shape()?;
        let classifier_in = classifier.input_shape().to_vec();
        if feature_shape != classifier_in {
            return Err(Error::config(format!(
                "classifier expects features {classifier_in:?}, student produces {feature_shape:?}"
            )));
        }
        if let Some(t) = &teacher {
            expect_role(t, Role::TeacherT)?;
            if t.input_shape() != student.input_shape() {
                return Err(shape_mismatch("input shape", &student.input_shape(), &t.input_shape()));
            }
        }
        if config.method.uses_teacher() {
            let t = teacher
                .as_ref()
                .ok_or_else(|| Error::config(format!("method {} needs a teacher", config.method)))?;
            if config.method == Method::Kdfm {
                let tf = t.output_shape()?;
                if tf != feature_shape {
                    return Err(shape_mismatch("feature maps differ", &feature_shape, &tf));
                }
            }
        }
        let discriminator = if config.uses_discriminator() {
            let d = discriminator.ok_or_else(|| Error::config("kdfm with adversarial loss needs a discriminator"))?;
            expect_role(&d, Role::DiscriminatorD)?;
            if d.input_shape().to_vec() != feature_shape {
                return Err(Error::config(format!(
                    "discriminator expects features {:?}, student produces {feature_shape:?}",
                    d.input_shape()
                )));
            }
            Some(d)
        } else {
            None
        };
        let opt_g = OptimizerState::new(config.opt_g, student.params().into_iter().map(|p| &p.tensor));
        let opt_c = OptimizerState::new(config.opt_c, classifier.params().into_iter().map(|p| &p.tensor));
        let opt_d = discriminator
            .as_ref()
            .map(|d| OptimizerState::new(config.opt_d, d.params().into_iter().map(|p| &p.tensor)));
        Ok(TrainerState {
            config,
            student,
            classifier,
            teacher,
            discriminator,
            opt_g,
            opt_c,
            opt_d,
            step: 0,
            seed,
            augment: false,
            feature_shape,
            teacher_evaluations: 0,
            cache: None,
        })
    }

    /// Number of teacher forward passes so far.
    pub fn teacher_evaluations(&self) -> u64 {
        self.teacher_evaluations
    }

    /// Per-sample shape of the student's feature maps.
    pub fn feature_shape(&self) -> &[usize] {
        &self.feature_shape
    }

    fn teacher_mut(&mut self) -> Result<&mut Model> {
        let method = self.config.method;
        self.teacher
            .as_mut()
            .ok_or_else(|| Error::config(format!("method {method} needs a teacher")))
    }

    /// Runs the frozen teacher on a batch: `(T(X), z)`.
    pub fn teacher_outputs(&mut self, images: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let out = self.teacher_mut()?.teacher_outputs(images)?;
        self.teacher_evaluations += 1;
        Ok(out)
    }

    /// Precomputes teacher outputs for every row of `dataset`. Used by
    /// [`train_epoch`] for unaugmented batches.
    pub fn cache_teacher_outputs(&mut self, dataset: &Dataset) -> Result<()> {
        let fingerprint = fingerprint(dataset);
        if self.cache.as_ref().is_some_and(|c| c.fingerprint == fingerprint) {
            return Ok(());
        }
        let mut features = Vec::new();
        let mut logits = Vec::new();
        let mut shapes = (Vec::new(), Vec::new());
        let all: Vec<usize> = (0..dataset.len()).collect();
        for chunk in all.chunks(EVAL_CHUNK) {
            let (f, z) = self.teacher_outputs(&dataset.images.gather_rows(chunk))?;
            shapes = (f.shape()[1..].to_vec(), z.shape()[1..].to_vec());
            features.extend(f.into_data());
            logits.extend(z.into_data());
        }
        let with_rows = |s: Vec<usize>| [vec![dataset.len()], s].concat();
        self.cache = Some(TeacherCache {
            fingerprint,
            features: Tensor::new(with_rows(shapes.0), features)?,
            logits: Tensor::new(with_rows(shapes.1), logits)?,
        });
        Ok(())
    }

    fn cached_outputs(&self, batch: &DatasetBatch, fp: Option<u64>) -> Option<(Tensor<f32>, Tensor<f32>)> {
        let c = self.cache.as_ref()?;
        if batch.augmented || fp != Some(c.fingerprint) {
            return None;
        }
        Some((
            c.features.gather_rows(&batch.indices),
            c.logits.gather_rows(&batch.indices),
        ))
    }

    fn check_batch(&self, batch: &DatasetBatch) -> Result<()> {
        let expected = self.student.input_shape();
        let found = &batch.images.shape()[1..];
        if found != expected {
            return Err(Error::Dimension {
                op: "train_step",
                lhs: expected.to_vec(),
                rhs: found.to_vec(),
            });
        }
        if batch.labels.is_empty() {
            return Err(Error::usage("empty batch"));
        }
        Ok(())
    }
}

fn fingerprint(dataset: &Dataset) -> u64 {
    let mut h = DefaultHasher::new();
    dataset.images.shape().hash(&mut h);
    for v in dataset.images.data() {
        v.to_bits().hash(&mut h);
    }
    dataset.labels.hash(&mut h);
    h.finish()
}

fn value(g: &Graph<f32>, v: Var) -> f64 {
    g.value(v).item().as_f64()
}

/// One KDFM step: computes `T(X)` and `z` without gradient, then `G(X)`,
/// the discriminator scores and the shared classifier's logits on both
/// feature maps, and applies three updates in order: `D ← ∇L_advD`,
/// `G ← ∇L_G`, `C ← ∇L_KD`. Every loss is taken at the pre-step
/// parameters and each update touches only its own component.
pub fn kdfm_train_step(state: &mut TrainerState, batch: &DatasetBatch) -> Result<LossBundle> {
    state.check_batch(batch)?;
    let (t_feat, z) = state.teacher_outputs(&batch.images)?;
    kdfm_step_with(state, batch, t_feat, z)
}

fn kdfm_step_with(
    state: &mut TrainerState,
    batch: &DatasetBatch,
    t_feat: Tensor<f32>,
    z: Tensor<f32>,
) -> Result<LossBundle> {
    if t_feat.shape()[1..] != state.feature_shape[..] {
        return Err(shape_mismatch(
            "feature maps differ",
            &state.feature_shape,
            &t_feat.shape()[1..],
        ));
    }
    let cfg = state.config.clone();
    let adversarial = cfg.uses_discriminator();
    let mut g = Graph::new();
    let bg = state.student.bind(&mut g, true);
    let bc = state.classifier.bind(&mut g, true);
    let x = g.constant(batch.images.clone());
    let gx = state.student.forward(&mut g, &bg, x, Mode::Train)?;
    let tx = g.constant(t_feat);
    let c_gx = state.classifier.forward(&mut g, &bc, gx, Mode::Train)?;
    let c_tx = state.classifier.forward(&mut g, &bc, tx, Mode::Train)?;
    let kd = loss::kdfm_kd_loss(&mut g, c_gx, c_tx, &z, cfg.t, cfg.lambda)?;

    let mut bundle = LossBundle {
        l_h: value(&g, kd.l_h),
        l_s: value(&g, kd.l_s),
        ..LossBundle::default()
    };
    bundle.l_kd = cfg.lambda * bundle.l_h + (1.0 - cfg.lambda) * bundle.l_s;

    let l_g = if adversarial {
        let d = state.discriminator.as_mut().expect("validated at construction");
        let bd = d.bind(&mut g, true);
        let d_fake = d.forward(&mut g, &bd, gx, Mode::Train)?;
        let d_real = d.forward(&mut g, &bd, tx, Mode::Train)?;
        let l_adv_d = loss::adv_d_loss(&mut g, d_fake, d_real)?;
        let l_adv_g = loss::adv_g_loss(&mut g, d_fake)?;
        let l_g = loss::generator_loss(&mut g, l_adv_g, kd.l_kd, cfg.alpha)?;
        bundle.l_adv_d = value(&g, l_adv_d);
        bundle.l_adv_g = value(&g, l_adv_g);
        bundle.l_g = bundle.l_adv_g + cfg.alpha * bundle.l_kd;

        g.backward_wrt(l_adv_d, bd.vars())?;
        d.collect_grads(&g, &bd);
        state.opt_d.as_mut().expect("paired with D").step(d.tensors_mut())?;
        g.zero_grad();
        l_g
    } else {
        bundle.l_g = bundle.l_kd;
        kd.l_kd
    };

    g.backward_wrt(l_g, bg.vars())?;
    state.student.collect_grads(&g, &bg);
    state.opt_g.step(state.student.tensors_mut())?;
    g.zero_grad();

    g.backward_wrt(kd.l_kd, bc.vars())?;
    state.classifier.collect_grads(&g, &bc);
    state.opt_c.step(state.classifier.tensors_mut())?;

    if adversarial && cfg.d_steps > 1 {
        let fake = g.value(gx).clone();
        let real = g.value(tx).clone();
        for _ in 1..cfg.d_steps {
            discriminator_step(state, &fake, &real)?;
        }
    }
    state.step += 1;
    Ok(bundle)
}

/// An extra `D ← ∇L_advD` update on fixed feature maps.
fn discriminator_step(state: &mut TrainerState, fake: &Tensor<f32>, real: &Tensor<f32>) -> Result<()> {
    let d = state.discriminator.as_mut().expect("checked by caller");
    let mut g = Graph::new();
    let bd = d.bind(&mut g, true);
    let f = g.constant(fake.clone());
    let r = g.constant(real.clone());
    let d_fake = d.forward(&mut g, &bd, f, Mode::Train)?;
    let d_real = d.forward(&mut g, &bd, r, Mode::Train)?;
    let l = loss::adv_d_loss(&mut g, d_fake, d_real)?;
    g.backward_wrt(l, bd.vars())?;
    d.collect_grads(&g, &bd);
    state.opt_d.as_mut().expect("paired with D").step(d.tensors_mut())
}

/// Student logits `C(G(X))` on a fresh graph with both models trainable.
struct StudentPass {
    g: Graph<f32>,
    bg: crate::nn::Binding,
    bc: crate::nn::Binding,
    logits: Var,
}

fn student_pass(state: &mut TrainerState, batch: &DatasetBatch) -> Result<StudentPass> {
    let mut g = Graph::new();
    let bg = state.student.bind(&mut g, true);
    let bc = state.classifier.bind(&mut g, true);
    let x = g.constant(batch.images.clone());
    let f = state.student.forward(&mut g, &bg, x, Mode::Train)?;
    let logits = state.classifier.forward(&mut g, &bc, f, Mode::Train)?;
    Ok(StudentPass { g, bg, bc, logits })
}

fn update_student(state: &mut TrainerState, mut pass: StudentPass, objective: Var) -> Result<()> {
    pass.g.backward(objective)?;
    state.student.collect_grads(&pass.g, &pass.bg);
    state.classifier.collect_grads(&pass.g, &pass.bc);
    state.opt_g.step(state.student.tensors_mut())?;
    state.opt_c.step(state.classifier.tensors_mut())?;
    state.step += 1;
    Ok(())
}

/// Classic KD step: `G` and `C` both descend `L_KD` with ground-truth `L_H`.
pub fn classic_kd_step(state: &mut TrainerState, batch: &DatasetBatch) -> Result<LossBundle> {
    state.check_batch(batch)?;
    let (_, z) = state.teacher_outputs(&batch.images)?;
    classic_kd_step_with(state, batch, z)
}

fn classic_kd_step_with(state: &mut TrainerState, batch: &DatasetBatch, z: Tensor<f32>) -> Result<LossBundle> {
    let (t, lambda) = (state.config.t, state.config.lambda);
    let mut pass = student_pass(state, batch)?;
    let kd = loss::kd_loss_classic(&mut pass.g, pass.logits, &z, &batch.onehot, t, lambda)?;
    let (l_h, l_s) = (value(&pass.g, kd.l_h), value(&pass.g, kd.l_s));
    let l_kd = lambda * l_h + (1.0 - lambda) * l_s;
    update_student(state, pass, kd.l_kd)?;
    Ok(LossBundle {
        l_h,
        l_s,
        l_kd,
        l_g: l_kd,
        ..LossBundle::default()
    })
}

/// Logits-mimic step: `G` and `C` descend the MSE to the teacher's logits.
pub fn logits_mimic_step(state: &mut TrainerState, batch: &DatasetBatch) -> Result<LossBundle> {
    state.check_batch(batch)?;
    let (_, z) = state.teacher_outputs(&batch.images)?;
    logits_mimic_step_with(state, batch, z)
}

fn logits_mimic_step_with(state: &mut TrainerState, batch: &DatasetBatch, z: Tensor<f32>) -> Result<LossBundle> {
    let mut pass = student_pass(state, batch)?;
    let l = loss::logits_mimic_loss(&mut pass.g, pass.logits, &z)?;
    let l_g = value(&pass.g, l);
    update_student(state, pass, l)?;
    Ok(LossBundle {
        l_g,
        ..LossBundle::default()
    })
}

/// Baseline step: plain cross-entropy on labels. Never touches the teacher.
pub fn baseline_step(state: &mut TrainerState, batch: &DatasetBatch) -> Result<LossBundle> {
    state.check_batch(batch)?;
    let mut pass = student_pass(state, batch)?;
    let y = pass.g.constant(batch.onehot.clone());
    let p = loss::hard_target(&mut pass.g, pass.logits)?;
    let l = loss::cross_entropy(&mut pass.g, p, y)?;
    let l_h = value(&pass.g, l);
    update_student(state, pass, l)?;
    Ok(LossBundle {
        l_h,
        l_g: l_h,
        ..LossBundle::default()
    })
}

/// Runs the configured method's step on every batch of one shuffled pass.
///
/// Augmentation (when enabled) draws from `(shuffle_seed, batch index)`.
/// Unaugmented teacher outputs come from a per-dataset cache.
pub fn train_epoch(
    state: &mut TrainerState,
    dataset: &Dataset,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<EpochMetrics> {
    if dataset.is_empty() {
        return Err(Error::usage("cannot train on an empty dataset"));
    }
    if batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let method = state.config.method;
    let fp = if method.uses_teacher() && !state.augment {
        state.cache_teacher_outputs(dataset)?;
        Some(fingerprint(dataset))
    } else {
        None
    };
    let mut losses = Vec::new();
    for (i, batch) in iterate_batches(dataset, batch_size, shuffle_seed).enumerate() {
        let batch = if state.augment {
            augment(&batch, &mut rng_for(shuffle_seed, 1 + i as u64))
        } else {
            batch
        };
        state.check_batch(&batch)?;
        let bundle = if method == Method::Baseline {
            baseline_step(state, &batch)?
        } else {
            let (t_feat, z) = match state.cached_outputs(&batch, fp) {
                Some(out) => out,
                None => state.teacher_outputs(&batch.images)?,
            };
            match method {
                Method::Kdfm => kdfm_step_with(state, &batch, t_feat, z)?,
                Method::ClassicKd => classic_kd_step_with(state, &batch, z)?,
                Method::LogitsMimic => logits_mimic_step_with(state, &batch, z)?,
                Method::Baseline => unreachable!(),
            }
        };
        losses.push(bundle);
    }
    let train_accuracy = evaluate(&mut state.student, &mut state.classifier, dataset)?;
    Ok(EpochMetrics {
        losses: LossBundle::mean(&losses),
        train_accuracy,
        steps: losses.len(),
    })
}

fn accuracy_of(predictions: &[usize], labels: &[usize]) -> f64 {
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Student logits `C(G(X))` in eval mode.
pub fn student_logits(student: &mut Model, classifier: &mut Model, images: &Tensor<f32>) -> Result<Tensor<f32>> {
    let features = student.infer(images)?;
    classifier.infer(&features)
}

/// Fraction of rows whose `argmax C(G(X))` equals the label, eval-mode BN.
pub fn evaluate(student: &mut Model, classifier: &mut Model, dataset: &Dataset) -> Result<f64> {
    let mut predictions = Vec::with_capacity(dataset.len());
    let all: Vec<usize> = (0..dataset.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let logits = student_logits(student, classifier, &dataset.images.gather_rows(chunk))?;
        predictions.extend(logits.argmax_rows());
    }
    Ok(accuracy_of(&predictions, &dataset.labels))
}

/// Teacher accuracy from its own logits head.
pub fn evaluate_teacher(teacher: &mut Model, dataset: &Dataset) -> Result<f64> {
    let mut predictions = Vec::with_capacity(dataset.len());
    let all: Vec<usize> = (0..dataset.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let (_, z) = teacher.teacher_outputs(&dataset.images.gather_rows(chunk))?;
        predictions.extend(z.argmax_rows());
    }
    Ok(accuracy_of(&predictions, &dataset.labels))
}

/// Supervised pre-training of a teacher with plain cross-entropy.
#[derive(Debug, Clone)]
pub struct TeacherTrainer {
    pub teacher: Model,
    pub opt: OptimizerState,
    pub augment: bool,
    pub step: u64,
}

impl TeacherTrainer {
    pub fn new(teacher: Model, opt: SgdConfig) -> Result<Self> {
        expect_role(&teacher, Role::TeacherT)?;
        opt.validate()?;
        let state = OptimizerState::new(opt, teacher.params().into_iter().map(|p| &p.tensor));
        Ok(TeacherTrainer {
            teacher,
            opt: state,
            augment: false,
            step: 0,
        })
    }

    /// One cross-entropy update; returns the batch loss.
    pub fn step(&mut self, batch: &DatasetBatch) -> Result<f64> {
        let mut g = Graph::new();
        let b = self.teacher.bind(&mut g, true);
        let x = g.constant(batch.images.clone());
        let f = self.teacher.forward(&mut g, &b, x, Mode::Train)?;
        let logits = self.teacher.forward_head(&mut g, &b, f, Mode::Train)?;
        let y = g.constant(batch.onehot.clone());
        let p = loss::hard_target(&mut g, logits)?;
        let l = loss::cross_entropy(&mut g, p, y)?;
        g.backward(l)?;
        self.teacher.collect_grads(&g, &b);
        self.opt.step(self.teacher.tensors_mut())?;
        self.step += 1;
        Ok(value(&g, l))
    }

    /// One shuffled pass; the loss is reported as `l_h` and `l_g`.
    pub fn train_epoch(&mut self, dataset: &Dataset, batch_size: usize, shuffle_seed: u64) -> Result<EpochMetrics> {
        if dataset.is_empty() {
            return Err(Error::usage("cannot train on an empty dataset"));
        }
        if batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        let mut losses = Vec::new();
        for (i, batch) in iterate_batches(dataset, batch_size, shuffle_seed).enumerate() {
            let batch = if self.augment {
                augment(&batch, &mut rng_for(shuffle_seed, 1 + i as u64))
            } else {
                batch
            };
            let l = self.step(&batch)?;
            losses.push(LossBundle {
                l_h: l,
                l_g: l,
                ..LossBundle::default()
            });
        }
        let train_accuracy = evaluate_teacher(&mut self.teacher, dataset)?;
        Ok(EpochMetrics {
            losses: LossBundle::mean(&losses),
            train_accuracy,
            steps: losses.len(),
        })
    }
}
