mod common;

use common::{cross_entropy_oracle, softmax_oracle};
use kdfm::distill::loss::{
    adv_d_loss_value, adv_g_loss_value, cross_entropy_value, generator_loss_value, hard_target_tensor,
    kd_loss_classic_value, kdfm_kd_loss_value, logits_mimic_loss_value, soft_target_tensor,
};
use kdfm::Tensor;
use proptest::prelude::*;

const K: usize = 5;

fn logits(rows: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-20.0f64..20.0, rows * K).prop_map(move |v| Tensor::new(vec![rows, K], v).unwrap())
}

fn scores(rows: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows).prop_map(move |v| Tensor::new(vec![rows, 1], v).unwrap())
}

fn onehot(labels: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(vec![labels.len(), K], |i| f64::from(u8::from(labels[i / K] == i % K)))
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #[test]
    fn soft_target_matches_direct_formula(x in logits(3), t in 0.5f64..100.0) {
        let p = soft_target_tensor(&x, t).unwrap();
        for (row, out) in x.data().chunks(K).zip(p.data().chunks(K)) {
            let expected = softmax_oracle(row, t);
            for k in 0..K {
                prop_assert!((out[k] - expected[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn soft_target_rows_are_distributions(x in logits(4), t in 0.5f64..100.0) {
        let p = soft_target_tensor(&x, t).unwrap();
        for row in p.data().chunks(K) {
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn temperature_one_is_the_hard_target(x in logits(3)) {
        let soft = soft_target_tensor(&x, 1.0).unwrap();
        let hard = hard_target_tensor(&x).unwrap();
        for (a, b) in soft.data().iter().zip(hard.data()) {
            prop_assert!((a - b).abs() <= 1e-7);
        }
    }

    #[test]
    fn higher_temperature_raises_entropy(x in logits(1), t in 1.0f64..50.0) {
        let entropy = |p: &Tensor<f64>| -p.data().iter().map(|&q| if q > 0.0 { q * q.ln() } else { 0.0 }).sum::<f64>();
        let lo = soft_target_tensor(&x, t).unwrap();
        let hi = soft_target_tensor(&x, 2.0 * t).unwrap();
        prop_assert!(entropy(&hi) >= entropy(&lo) - 1e-12);
    }

    #[test]
    fn cross_entropy_matches_oracle_and_gibbs(a in logits(3), b in logits(3)) {
        let p = hard_target_tensor(&a).unwrap();
        let q = hard_target_tensor(&b).unwrap();
        let h_qp = cross_entropy_value(&p, &q).unwrap();
        prop_assert!(close(h_qp, cross_entropy_oracle(p.data(), q.data(), K), 1e-12));
        // H(q, p) ≥ H(q, q) with equality at p = q.
        let h_qq = cross_entropy_value(&q, &q).unwrap();
        prop_assert!(h_qp >= h_qq - 1e-9);
    }

    #[test]
    fn classic_kd_composes(
        s in logits(3),
        t_logits in logits(3),
        labels in prop::collection::vec(0usize..K, 3),
        t in 1.0f64..100.0,
        lambda in 0.0f64..1.0,
    ) {
        let y = onehot(&labels);
        let (l_h, l_s, l_kd) = kd_loss_classic_value(&s, &t_logits, &y, t, lambda).unwrap();
        let p_h = softmax_oracle_rows(&s, 1.0);
        let p_s = softmax_oracle_rows(&s, t);
        let q_s = softmax_oracle_rows(&t_logits, t);
        prop_assert!(close(l_h, cross_entropy_oracle(&p_h, y.data(), K), 1e-10));
        prop_assert!(close(l_s, cross_entropy_oracle(&p_s, &q_s, K), 1e-10));
        prop_assert!(close(l_kd, lambda * l_h + (1.0 - lambda) * l_s, 1e-12));
    }

    #[test]
    fn kdfm_kd_sums_both_branches(
        gx in logits(2),
        tx in logits(2),
        z in logits(2),
        t in 1.0f64..100.0,
        lambda in 0.0f64..1.0,
    ) {
        let (l_h, l_s, l_kd) = kdfm_kd_loss_value(&gx, &tx, &z, t, lambda).unwrap();
        let hz = softmax_oracle_rows(&z, 1.0);
        let sz = softmax_oracle_rows(&z, t);
        let h = cross_entropy_oracle(&softmax_oracle_rows(&gx, 1.0), &hz, K)
            + cross_entropy_oracle(&softmax_oracle_rows(&tx, 1.0), &hz, K);
        let soft = cross_entropy_oracle(&softmax_oracle_rows(&gx, t), &sz, K)
            + cross_entropy_oracle(&softmax_oracle_rows(&tx, t), &sz, K);
        prop_assert!(close(l_h, h, 1e-10));
        prop_assert!(close(l_s, soft, 1e-10));
        prop_assert!(close(l_kd, lambda * l_h + (1.0 - lambda) * l_s, 1e-12));
    }

    #[test]
    fn lsgan_losses_are_nonnegative(fake in scores(4), real in scores(4)) {
        let d = adv_d_loss_value(&fake, &real).unwrap();
        let g = adv_g_loss_value(&fake).unwrap();
        let d_expected = fake.data().iter().zip(real.data())
            .map(|(f, r)| 0.5 * f * f + 0.5 * (r - 1.0) * (r - 1.0)).sum::<f64>() / 4.0;
        let g_expected = fake.data().iter().map(|f| 0.5 * (f - 1.0) * (f - 1.0)).sum::<f64>() / 4.0;
        prop_assert!(d >= 0.0 && g >= 0.0);
        prop_assert!(close(d, d_expected, 1e-12));
        prop_assert!(close(g, g_expected, 1e-12));
    }

    #[test]
    fn generator_loss_is_affine_in_alpha(adv in 0.0f64..5.0, kd in 0.0f64..5.0, alpha in 0.0f64..50.0) {
        prop_assert!(close(generator_loss_value(adv, kd, alpha).unwrap(), adv + alpha * kd, 1e-12));
    }

    #[test]
    fn logits_mimic_vanishes_only_at_equality(a in logits(2), b in logits(2)) {
        prop_assert_eq!(logits_mimic_loss_value(&a, &a).unwrap(), 0.0);
        let expected = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / (2 * K) as f64;
        prop_assert!(close(logits_mimic_loss_value(&a, &b).unwrap(), expected, 1e-12));
    }
}

fn softmax_oracle_rows(x: &Tensor<f64>, t: f64) -> Vec<f64> {
    x.data().chunks(K).flat_map(|row| softmax_oracle(row, t)).collect()
}

#[test]
fn lsgan_zero_only_at_targets() {
    let col = |v: &[f64]| Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap();
    assert_eq!(adv_d_loss_value(&col(&[0.0, 0.0]), &col(&[1.0, 1.0])).unwrap(), 0.0);
    assert!(adv_d_loss_value(&col(&[0.0, 1e-3]), &col(&[1.0, 1.0])).unwrap() > 0.0);
    assert_eq!(adv_g_loss_value(&col(&[1.0, 1.0])).unwrap(), 0.0);
    assert!(adv_g_loss_value(&col(&[1.0, 0.999])).unwrap() > 0.0);
}

#[test]
fn bad_hyperparameters_are_config_errors() {
    let x = Tensor::<f64>::zeros(vec![1, K]);
    for t in [0.0, -1.0, f64::NAN, f64::INFINITY] {
        assert!(
            matches!(soft_target_tensor(&x, t), Err(kdfm::Error::Config(_))),
            "t={t}"
        );
    }
    assert!(matches!(
        generator_loss_value(0.1, 0.2, -1.0),
        Err(kdfm::Error::Config(_))
    ));
}
