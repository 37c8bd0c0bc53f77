//! An independent re-derivation of one KDFM step's gradients.

use kdfm::data::DatasetBatch;
use kdfm::distill::{loss, TrainerState};
use kdfm::nn::{Mode, Model};
use kdfm::{Graph, Var};

pub fn params(m: &Model) -> Vec<Vec<f32>> {
    m.params().iter().map(|p| p.tensor.data().to_vec()).collect()
}

pub fn bits(v: &[Vec<f32>]) -> Vec<u32> {
    v.iter().flatten().map(|x| x.to_bits()).collect()
}

/// `(before − after) / lr`: on a first momentum-SGD step this is the
/// gradient the optimizer applied.
pub fn applied_grad(before: &[Vec<f32>], after: &[Vec<f32>], lr: f32) -> Vec<Vec<f32>> {
    before
        .iter()
        .zip(after)
        .map(|(b, a)| b.iter().zip(a).map(|(b, a)| (b - a) / lr).collect())
        .collect()
}

pub struct Reference {
    pub d: Vec<Vec<f32>>,
    pub g: Vec<Vec<f32>>,
    pub g_adv_only: Vec<Vec<f32>>,
    pub c: Vec<Vec<f32>>,
}

pub fn grads_of(g: &mut Graph<f32>, loss: Var, vars: &[Var]) -> Vec<Vec<f32>> {
    g.zero_grad();
    g.backward_wrt(loss, vars).unwrap();
    vars.iter()
        .map(|&v| {
            g.grad(v)
                .map(<[f32]>::to_vec)
                .unwrap_or_else(|| vec![0.0; g.value(v).len()])
        })
        .collect()
}

/// Rebuilds one KDFM step's losses from copies of the pre-step models and
/// differentiates each with respect to its own component.
pub fn reference(state: &TrainerState, batch: &DatasetBatch) -> Reference {
    let cfg = &state.config;
    let mut teacher = state.teacher.clone().unwrap();
    let (mut gm, mut cm, mut dm) = (
        state.student.clone(),
        state.classifier.clone(),
        state.discriminator.clone().unwrap(),
    );
    let (t_feat, z) = teacher.teacher_outputs(&batch.images).unwrap();
    let mut g = Graph::new();
    let (bg, bc, bd) = (gm.bind(&mut g, true), cm.bind(&mut g, true), dm.bind(&mut g, true));
    let x = g.constant(batch.images.clone());
    let gx = gm.forward(&mut g, &bg, x, Mode::Train).unwrap();
    let tx = g.constant(t_feat);
    let c_gx = cm.forward(&mut g, &bc, gx, Mode::Train).unwrap();
    let c_tx = cm.forward(&mut g, &bc, tx, Mode::Train).unwrap();
    let kd = loss::kdfm_kd_loss(&mut g, c_gx, c_tx, &z, cfg.t, cfg.lambda).unwrap();
    let d_fake = dm.forward(&mut g, &bd, gx, Mode::Train).unwrap();
    let d_real = dm.forward(&mut g, &bd, tx, Mode::Train).unwrap();
    let l_adv_d = loss::adv_d_loss(&mut g, d_fake, d_real).unwrap();
    let l_adv_g = loss::adv_g_loss(&mut g, d_fake).unwrap();
    let l_g = loss::generator_loss(&mut g, l_adv_g, kd.l_kd, cfg.alpha).unwrap();
    Reference {
        d: grads_of(&mut g, l_adv_d, bd.vars()),
        g: grads_of(&mut g, l_g, bg.vars()),
        g_adv_only: grads_of(&mut g, l_adv_g, bg.vars()),
        c: grads_of(&mut g, kd.l_kd, bc.vars()),
    }
}

pub fn assert_close(what: &str, got: &[Vec<f32>], want: &[Vec<f32>]) {
    let mut nonzero = false;
    for (i, (a, b)) in got.iter().zip(want).enumerate() {
        for (x, y) in a.iter().zip(b) {
            nonzero |= *y != 0.0;
            assert!(
                (x - y).abs() <= 2e-5 + 1e-3 * y.abs(),
                "{what} param {i}: applied {x}, expected {y}"
            );
        }
    }
    assert!(nonzero, "{what}: reference gradient is identically zero");
}
