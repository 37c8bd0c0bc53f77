//! Distillation and adversarial losses.
//!
//! Every loss is expressed as graph ops so it can be differentiated; the
//! `*_value` helpers evaluate the same graphs on plain tensors.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Probabilities below this are clamped before taking the log.
pub const LOG_CLAMP: f64 = 1e-12;

fn check_t(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::config(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Dimension {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

/// `P_H(x) = softmax(x)` row-wise.
pub fn hard_target<S: Scalar>(g: &mut Graph<S>, logits: Var) -> Result<Var> {
    g.softmax(logits)
}

/// `P_S(x, t) = softmax(x / t)` row-wise.
pub fn soft_target<S: Scalar>(g: &mut Graph<S>, logits: Var, t: f64) -> Result<Var> {
    check_t(t)?;
    if t == 1.0 {
        return g.softmax(logits);
    }
    let scaled = g.scale(logits, S::from_f64(1.0 / t));
    g.softmax(scaled)
}

/// Mean over rows of `−Σ target · log(max(pred, 1e-12))`.
pub fn cross_entropy<S: Scalar>(g: &mut Graph<S>, pred: Var, target: Var) -> Result<Var> {
    check_same("cross_entropy", g.shape(pred), g.shape(target))?;
    let rows = g.shape(pred)[0];
    let clamped = g.clamp_min(pred, S::from_f64(LOG_CLAMP));
    let logp = g.log(clamped);
    let weighted = g.mul(logp, target)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, S::from_f64(-1.0 / rows as f64)))
}

/// Loss terms shared by classic KD and KDFM.
#[derive(Debug, Clone, Copy)]
pub struct KdTerms {
    pub l_h: Var,
    pub l_s: Var,
    pub l_kd: Var,
}

fn mix<S: Scalar>(g: &mut Graph<S>, l_h: Var, l_s: Var, lambda: f64) -> Result<KdTerms> {
    let a = g.scale(l_h, S::from_f64(lambda));
    let b = g.scale(l_s, S::from_f64(1.0 - lambda));
    let l_kd = g.add(a, b)?;
    Ok(KdTerms { l_h, l_s, l_kd })
}

/// Classic KD: `L_H = H(P_H(x_S), y)`, `L_S = H(P_S(x_S,t), P_S(x_T,t))`,
/// `L_KD = λ·L_H + (1−λ)·L_S`. Teacher logits and labels are constants.
pub fn kd_loss_classic<S: Scalar>(
    g: &mut Graph<S>,
    student_logits: Var,
    teacher_logits: &Tensor<S>,
    labels_onehot: &Tensor<S>,
    t: f64,
    lambda: f64,
) -> Result<KdTerms> {
    check_t(t)?;
    check_same("kd_loss_classic", g.shape(student_logits), teacher_logits.shape())?;
    check_same("kd_loss_classic", g.shape(student_logits), labels_onehot.shape())?;
    let y = g.constant(labels_onehot.clone());
    let p_h = hard_target(g, student_logits)?;
    let l_h = cross_entropy(g, p_h, y)?;
    let target = soft_target_tensor(teacher_logits, t)?;
    let target = g.constant(target);
    let p_s = soft_target(g, student_logits, t)?;
    let l_s = cross_entropy(g, p_s, target)?;
    mix(g, l_h, l_s, lambda)
}

/// KDFM distillation loss. With `z` the teacher's own logits:
///
/// `L_H = H(P_H(C(G(X))), P_H(z)) + H(P_H(C(T(X))), P_H(z))`
/// `L_S = H(P_S(C(G(X)),t), P_S(z,t)) + H(P_S(C(T(X)),t), P_S(z,t))`
///
/// The targets derived from `z` carry no gradient.
pub fn kdfm_kd_loss<S: Scalar>(
    g: &mut Graph<S>,
    c_of_gx: Var,
    c_of_tx: Var,
    z: &Tensor<S>,
    t: f64,
    lambda: f64,
) -> Result<KdTerms> {
    check_t(t)?;
    check_same("kdfm_kd_loss", g.shape(c_of_gx), g.shape(c_of_tx))?;
    check_same("kdfm_kd_loss", g.shape(c_of_gx), z.shape())?;
    let hard_z = g.constant(soft_target_tensor(z, 1.0)?);
    let soft_z = g.constant(soft_target_tensor(z, t)?);

    let mut hard = Vec::with_capacity(2);
    let mut soft = Vec::with_capacity(2);
    for logits in [c_of_gx, c_of_tx] {
        let p = hard_target(g, logits)?;
        hard.push(cross_entropy(g, p, hard_z)?);
        let p = soft_target(g, logits, t)?;
        soft.push(cross_entropy(g, p, soft_z)?);
    }
    let l_h = g.add(hard[0], hard[1])?;
    let l_s = g.add(soft[0], soft[1])?;
    mix(g, l_h, l_s, lambda)
}

fn check_scores<S: Scalar>(g: &Graph<S>, v: Var) -> Result<()> {
    match g.shape(v) {
        [_, 1] => Ok(()),
        other => Err(Error::Dimension {
            op: "adversarial_loss",
            lhs: other.to_vec(),
            rhs: vec![other.first().copied().unwrap_or(0), 1],
        }),
    }
}

/// LSGAN critic loss: mean of `½·D(G(X))² + ½·(D(T(X)) − 1)²`.
pub fn adv_d_loss<S: Scalar>(g: &mut Graph<S>, d_fake: Var, d_real: Var) -> Result<Var> {
    check_scores(g, d_fake)?;
    check_scores(g, d_real)?;
    check_same("adv_d_loss", g.shape(d_fake), g.shape(d_real))?;
    let fake_sq = g.square(d_fake);
    let shifted = g.add_scalar(d_real, -S::one());
    let real_sq = g.square(shifted);
    let per_sample = g.add(fake_sq, real_sq)?;
    let m = g.mean(per_sample);
    Ok(g.scale(m, S::from_f64(0.5)))
}

/// LSGAN generator loss: mean of `½·(D(G(X)) − 1)²`.
pub fn adv_g_loss<S: Scalar>(g: &mut Graph<S>, d_fake: Var) -> Result<Var> {
    check_scores(g, d_fake)?;
    let shifted = g.add_scalar(d_fake, -S::one());
    let sq = g.square(shifted);
    let m = g.mean(sq);
    Ok(g.scale(m, S::from_f64(0.5)))
}

/// `L_G = L_advG + α·L_KD`.
pub fn generator_loss<S: Scalar>(g: &mut Graph<S>, l_adv_g: Var, l_kd: Var, alpha: f64) -> Result<Var> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::config(format!("alpha must be non-negative, got {alpha}")));
    }
    let weighted = g.scale(l_kd, S::from_f64(alpha));
    g.add(l_adv_g, weighted)
}

/// Mean squared error over all logit entries.
pub fn logits_mimic_loss<S: Scalar>(g: &mut Graph<S>, student_logits: Var, teacher_logits: &Tensor<S>) -> Result<Var> {
    check_same("logits_mimic_loss", g.shape(student_logits), teacher_logits.shape())?;
    let t = g.constant(teacher_logits.clone());
    let d = g.sub(student_logits, t)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Row-wise `softmax(logits / t)` as a plain tensor.
pub fn soft_target_tensor<S: Scalar>(logits: &Tensor<S>, t: f64) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let x = g.constant(logits.clone());
    let p = soft_target(&mut g, x, t)?;
    Ok(g.value(p).clone())
}

pub fn hard_target_tensor<S: Scalar>(logits: &Tensor<S>) -> Result<Tensor<S>> {
    soft_target_tensor(logits, 1.0)
}

pub fn cross_entropy_value<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<S> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let t = g.constant(target.clone());
    let l = cross_entropy(&mut g, p, t)?;
    Ok(g.value(l).item())
}

pub fn adv_d_loss_value<S: Scalar>(d_fake: &Tensor<S>, d_real: &Tensor<S>) -> Result<S> {
    let mut g = Graph::new();
    let f = g.constant(d_fake.clone());
    let r = g.constant(d_real.clone());
    let l = adv_d_loss(&mut g, f, r)?;
    Ok(g.value(l).item())
}

pub fn adv_g_loss_value<S: Scalar>(d_fake: &Tensor<S>) -> Result<S> {
    let mut g = Graph::new();
    let f = g.constant(d_fake.clone());
    let l = adv_g_loss(&mut g, f)?;
    Ok(g.value(l).item())
}

pub fn generator_loss_value(l_adv_g: f64, l_kd: f64, alpha: f64) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::scalar(l_adv_g));
    let k = g.constant(Tensor::scalar(l_kd));
    let l = generator_loss(&mut g, a, k, alpha)?;
    Ok(g.value(l).item())
}

pub fn logits_mimic_loss_value<S: Scalar>(student: &Tensor<S>, teacher: &Tensor<S>) -> Result<S> {
    let mut g = Graph::new();
    let s = g.constant(student.clone());
    let l = logits_mimic_loss(&mut g, s, teacher)?;
    Ok(g.value(l).item())
}

/// `(L_H, L_S, L_KD)` values of [`kd_loss_classic`].
pub fn kd_loss_classic_value<S: Scalar>(
    student_logits: &Tensor<S>,
    teacher_logits: &Tensor<S>,
    labels_onehot: &Tensor<S>,
    t: f64,
    lambda: f64,
) -> Result<(S, S, S)> {
    let mut g = Graph::new();
    let s = g.constant(student_logits.clone());
    let k = kd_loss_classic(&mut g, s, teacher_logits, labels_onehot, t, lambda)?;
    Ok((g.value(k.l_h).item(), g.value(k.l_s).item(), g.value(k.l_kd).item()))
}

/// `(L_H, L_S, L_KD)` values of [`kdfm_kd_loss`].
pub fn kdfm_kd_loss_value<S: Scalar>(
    c_of_gx: &Tensor<S>,
    c_of_tx: &Tensor<S>,
    z: &Tensor<S>,
    t: f64,
    lambda: f64,
) -> Result<(S, S, S)> {
    let mut g = Graph::new();
    let a = g.constant(c_of_gx.clone());
    let b = g.constant(c_of_tx.clone());
    let k = kdfm_kd_loss(&mut g, a, b, z, t, lambda)?;
    Ok((g.value(k.l_h).item(), g.value(k.l_s).item(), g.value(k.l_kd).item()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
    }

    fn col(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn hard_target_examples() {
        assert_eq!(hard_target_tensor(&row(&[0.0, 0.0])).unwrap().data(), &[0.5, 0.5]);
        let p = hard_target_tensor(&row(&[1000.0, 0.0])).unwrap();
        assert!(p.all_finite());
        assert!((p.data()[0] - 1.0).abs() < 1e-12);
        let p = hard_target_tensor(&row(&[1f64.ln(), 2f64.ln(), 3f64.ln()])).unwrap();
        for (a, b) in p.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_target_examples() {
        let x = row(&[0.3, -1.2, 2.5]);
        assert_eq!(soft_target_tensor(&x, 1.0).unwrap(), hard_target_tensor(&x).unwrap());
        let p = soft_target_tensor(&row(&[2.0, 0.0]), 2.0).unwrap();
        assert!((p.data()[0] - 0.7311).abs() < 5e-5);
        assert!((p.data()[1] - 0.2689).abs() < 5e-5);
        let p = soft_target_tensor(&row(&[2.0, 0.0]), 1e6).unwrap();
        assert!((p.data()[0] - 0.5).abs() < 1e-5);
        assert!(matches!(soft_target_tensor(&x, 0.0), Err(Error::Config(_))));
        assert!(soft_target_tensor(&x, -1.0).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy_value(&row(&[1.0, 0.0]), &row(&[1.0, 0.0])).unwrap(), 0.0);
        let v = cross_entropy_value(&row(&[0.5, 0.5]), &row(&[1.0, 0.0])).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
        // A zero prediction is clamped rather than producing infinity.
        let v = cross_entropy_value(&row(&[0.0, 1.0]), &row(&[1.0, 0.0])).unwrap();
        assert!((v - (-(LOG_CLAMP.ln()))).abs() < 1e-9);
    }

    #[test]
    fn lsgan_plug_in_values() {
        assert_eq!(adv_d_loss_value(&col(&[0.0]), &col(&[1.0])).unwrap(), 0.0);
        assert_eq!(adv_d_loss_value(&col(&[0.5]), &col(&[0.5])).unwrap(), 0.25);
        assert_eq!(adv_d_loss_value(&col(&[1.0]), &col(&[0.0])).unwrap(), 1.0);
        assert_eq!(adv_g_loss_value(&col(&[1.0])).unwrap(), 0.0);
        assert_eq!(adv_g_loss_value(&col(&[0.0])).unwrap(), 0.5);
        assert_eq!(adv_g_loss_value(&col(&[0.5])).unwrap(), 0.125);
        assert!(adv_g_loss_value(&row(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn generator_loss_examples() {
        assert_eq!(generator_loss_value(0.3, 5.0, 0.0).unwrap(), 0.3);
        assert_eq!(generator_loss_value(0.125, 2.0, 10.0).unwrap(), 20.125);
        assert!(generator_loss_value(0.1, 1.0, -1.0).is_err());
    }

    #[test]
    fn logits_mimic_examples() {
        let a = Tensor::<f64>::from_fn(vec![2, 10], |i| i as f64);
        assert_eq!(logits_mimic_loss_value(&a, &a).unwrap(), 0.0);
        let zeros = Tensor::<f64>::zeros(vec![3, 10]);
        let ones = Tensor::<f64>::ones(vec![3, 10]);
        assert_eq!(logits_mimic_loss_value(&zeros, &ones).unwrap(), 1.0);
        assert!(logits_mimic_loss_value(&zeros, &a).is_err());
    }

    #[test]
    fn classic_kd_endpoints() {
        let s = Tensor::<f64>::new(vec![2, 3], vec![0.2, -0.4, 1.0, 0.0, 0.5, -0.5]).unwrap();
        let t = Tensor::<f64>::new(vec![2, 3], vec![1.0, 0.0, 2.0, -1.0, 1.5, 0.0]).unwrap();
        let y = Tensor::<f64>::new(vec![2, 3], vec![0.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let (l_h, _, l_kd) = kd_loss_classic_value(&s, &t, &y, 10.0, 1.0).unwrap();
        assert_eq!(l_kd, l_h);
        let (_, l_s, l_kd) = kd_loss_classic_value(&s, &t, &y, 10.0, 0.0).unwrap();
        assert_eq!(l_kd, l_s);
    }

    #[test]
    fn kdfm_self_target_floor() {
        let z = Tensor::<f64>::new(vec![2, 3], vec![0.5, 1.5, -0.3, 2.0, 0.0, 0.1]).unwrap();
        let entropy = |p: &Tensor<f64>| -> f64 { -p.data().iter().map(|&v| v * v.ln()).sum::<f64>() / 2.0 };
        let (l_h, l_s, _) = kdfm_kd_loss_value(&z, &z, &z, 10.0, 0.1).unwrap();
        let eh = entropy(&hard_target_tensor(&z).unwrap());
        let es = entropy(&soft_target_tensor(&z, 10.0).unwrap());
        assert!((l_h - 2.0 * eh).abs() < 1e-12);
        assert!((l_s - 2.0 * es).abs() < 1e-12);
    }

    #[test]
    fn kdfm_shape_mismatch() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![2, 4]);
        assert!(matches!(
            kdfm_kd_loss_value(&a, &a, &b, 10.0, 0.1),
            Err(Error::Dimension { .. })
        ));
    }
}
