//! Independent oracles shared by the integration tests and the acceptance
//! harness.
#![allow(dead_code)]

use kdfm::data::{make_synthetic, Dataset, SyntheticSpec};
use kdfm::distill::{DistillConfig, TrainerState};
use kdfm::nn::{Architecture, DiscriminatorSpec, Model, StudentSpec, TeacherSpec};
use kdfm::tensor::SgdConfig;
use kdfm::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod step;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, so ReLU-like kinks sit far from every
/// finite-difference probe.
pub fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let mag = rng.random_range(0.05..1.5);
        if rng.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

/// A random permutation of well-separated values, so every pooling window
/// has a unique maximum by a wide margin.
pub fn distinct(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

pub fn one_hot_rows(rng: &mut impl Rng, rows: usize, classes: usize) -> Tensor<f64> {
    let mut t = Tensor::zeros(vec![rows, classes]);
    for r in 0..rows {
        let k = rng.random_range(0..classes);
        t.data_mut()[r * classes + k] = 1.0;
    }
    t
}

/// Reduces any output to a scalar with fixed, non-uniform weights so every
/// output element contributes a distinct amount.
fn scalarize(g: &mut Graph<f64>, out: Var) -> Var {
    if g.value(out).len() == 1 {
        return out;
    }
    let shape = g.shape(out).to_vec();
    let w = g.constant(Tensor::from_fn(shape, |i| (0.7 * i as f64 + 0.3).sin() + 1.1));
    let p = g.mul(out, w).unwrap();
    g.sum(p)
}

pub type GraphFn<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

fn loss_value(inputs: &[Tensor<f64>], f: &GraphFn<'_>) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    let l = scalarize(&mut g, out);
    g.value(l).item()
}

pub const FD_STEP: f64 = 1e-4;

/// Largest relative error, over all inputs, between reverse-mode gradients
/// and central finite differences. Per input the error is
/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-8)`.
pub fn grad_check(inputs: &[Tensor<f64>], f: &GraphFn<'_>) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut g, &vars).unwrap();
    let l = scalarize(&mut g, out);
    g.backward(l).unwrap();

    let mut worst: f64 = 0.0;
    for (i, (t, &v)) in inputs.iter().zip(&vars).enumerate() {
        let analytic: Vec<f64> = g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
        let mut numeric = vec![0.0; t.len()];
        for j in 0..t.len() {
            let mut probe = inputs.to_vec();
            probe[i].data_mut()[j] = t.data()[j] + FD_STEP;
            let up = loss_value(&probe, f);
            probe[i].data_mut()[j] = t.data()[j] - FD_STEP;
            let down = loss_value(&probe, f);
            numeric[j] = (up - down) / (2.0 * FD_STEP);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let scale = norm(&analytic).max(norm(&numeric)).max(1e-8);
        worst = worst.max(norm(&diff) / scale);
    }
    worst
}

/// A convolution geometry whose windows tile the padded input exactly.
#[derive(Debug, Clone, Copy)]
pub struct ConvShape {
    pub n: usize,
    pub c: usize,
    pub f: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvShape {
    /// Rejection-samples `N,C,F ≤ max_ncf`, `H,W ≤ max_hw`, kernels up to
    /// 3×3, stride in {1,2} and padding in {0,1}.
    pub fn sample(r: &mut impl Rng, max_ncf: usize, max_hw: usize) -> Self {
        loop {
            let s = ConvShape {
                n: r.random_range(1..=max_ncf),
                c: r.random_range(1..=max_ncf),
                f: r.random_range(1..=max_ncf),
                h: r.random_range(1..=max_hw),
                w: r.random_range(1..=max_hw),
                kh: r.random_range(1..=3),
                kw: r.random_range(1..=3),
                stride: r.random_range(1..=2),
                pad: r.random_range(0..=1),
            };
            let fits = |extent: usize, k: usize| {
                let padded = extent + 2 * s.pad;
                padded >= k && (padded - k).is_multiple_of(s.stride)
            };
            if fits(s.h, s.kh) && fits(s.w, s.kw) {
                return s;
            }
        }
    }

    pub fn input(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn kernel(&self) -> [usize; 4] {
        [self.f, self.c, self.kh, self.kw]
    }
}

/// Direct quadruple-loop cross-correlation with zero padding.
pub fn naive_conv(input: &Tensor<f64>, kernel: &Tensor<f64>, stride: usize, padding: usize) -> Tensor<f64> {
    let [n, c, h, w] = input.shape().try_into().unwrap();
    let [f, kc, kh, kw] = kernel.shape().try_into().unwrap();
    assert_eq!(c, kc);
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0; n * f * oh * ow];
    for b in 0..n {
        for o in 0..f {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as isize - padding as isize;
                                let ix = (xo * stride + dx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((b * c + ch) * h + iy as usize) * w + ix as usize]
                                    * k[((o * c + ch) * kh + dy) * kw + dx];
                            }
                        }
                    }
                    out[((b * f + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, f, oh, ow], out).unwrap()
}

/// Softmax computed directly with `exp`, for checking the library's.
pub fn softmax_oracle(row: &[f64], t: f64) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| ((v - m) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn cross_entropy_oracle(pred: &[f64], target: &[f64], classes: usize) -> f64 {
    let rows = pred.len() / classes;
    let mut total = 0.0;
    for r in 0..rows {
        for k in 0..classes {
            total -= target[r * classes + k] * pred[r * classes + k].max(1e-12).ln();
        }
    }
    total / rows as f64
}

/// A small but complete KDFM setup on an 8×8 synthetic task.
pub struct Tiny {
    pub train: Dataset,
    pub test: Dataset,
    pub state: TrainerState,
}

pub fn tiny_teacher_spec() -> TeacherSpec {
    TeacherSpec {
        input: [3, 8, 8],
        num_blocks: 2,
        layers_per_block: 1,
        growth: 4,
        init_channels: 4,
        num_classes: 4,
    }
}

pub fn tiny(config: DistillConfig, seed: u64) -> Tiny {
    let (train, test) = make_synthetic(&SyntheticSpec {
        samples_per_class: 16,
        image_size: 8,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let tspec = tiny_teacher_spec();
    let feature = tspec.feature_shape();
    let mut teacher: Model = Architecture::Teacher(tspec).build().unwrap();
    teacher.init_params(seed + 100);
    let mut g: Model = Architecture::Student(StudentSpec {
        input: [3, 8, 8],
        channels: vec![4, feature[0]],
        pool_after: vec![2],
    })
    .build()
    .unwrap();
    g.init_params(seed + 1);
    let mut c: Model = Architecture::Classifier {
        channels: feature[0],
        height: feature[1],
        width: feature[2],
        num_classes: 4,
    }
    .build()
    .unwrap();
    c.init_params(seed + 2);
    let mut d: Model = Architecture::Discriminator(DiscriminatorSpec::new(feature))
        .build()
        .unwrap();
    d.init_params(seed + 3);
    let state = TrainerState::new(config, g, c, Some(teacher), Some(d), seed).unwrap();
    Tiny { train, test, state }
}

pub fn sgd(lr: f64) -> SgdConfig {
    SgdConfig {
        lr,
        ..SgdConfig::default()
    }
}

/// Every differentiable graph op plus the composite losses.
pub const GRADIENT_CASES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "relu",
    "leaky_relu",
    "log",
    "clamp_min",
    "square",
    "sum",
    "mean",
    "reshape",
    "matmul",
    "add_row_bias",
    "add_channel_bias",
    "conv2d",
    "batch_norm_train",
    "batch_norm_eval",
    "max_pool",
    "avg_pool",
    "global_avg_pool",
    "concat_channels",
    "softmax",
    "hard_target",
    "soft_target",
    "cross_entropy",
    "kd_loss_classic",
    "kdfm_kd_loss",
    "adv_d_loss",
    "adv_g_loss",
    "generator_loss",
    "logits_mimic_loss",
];

/// Draws one random instance of `case` and returns its gradient-check error.
pub fn gradient_instance(case: &str, r: &mut ChaCha8Rng) -> f64 {
    use kdfm::distill::loss;

    let m = [2usize, 3];
    match case {
        "add" => grad_check(&[uniform(r, &m, -1.0, 1.0), uniform(r, &m, -1.0, 1.0)], &|g, v| {
            g.add(v[0], v[1])
        }),
        "sub" => grad_check(&[uniform(r, &m, -1.0, 1.0), uniform(r, &m, -1.0, 1.0)], &|g, v| {
            g.sub(v[0], v[1])
        }),
        "mul" => grad_check(&[uniform(r, &m, -1.0, 1.0), uniform(r, &m, -1.0, 1.0)], &|g, v| {
            g.mul(v[0], v[1])
        }),
        "scale" => {
            let c = r.random_range(-2.0..2.0);
            grad_check(&[uniform(r, &m, -1.0, 1.0)], &move |g, v| Ok(g.scale(v[0], c)))
        }
        "add_scalar" => {
            let c = r.random_range(-2.0..2.0);
            grad_check(&[uniform(r, &m, -1.0, 1.0)], &move |g, v| Ok(g.add_scalar(v[0], c)))
        }
        "relu" => grad_check(&[away_from_zero(r, &[3, 4])], &|g, v| Ok(g.relu(v[0]))),
        "leaky_relu" => {
            let slope = r.random_range(0.01..0.5);
            grad_check(
                &[away_from_zero(r, &[3, 4])],
                &move |g, v| Ok(g.leaky_relu(v[0], slope)),
            )
        }
        "log" => grad_check(&[uniform(r, &m, 0.3, 3.0)], &|g, v| Ok(g.log(v[0]))),
        "clamp_min" => {
            let mut x = away_from_zero(r, &[3, 4]);
            x.data_mut().iter_mut().for_each(|v| *v += 0.1);
            grad_check(&[x], &|g, v| Ok(g.clamp_min(v[0], 0.1)))
        }
        "square" => grad_check(&[uniform(r, &m, -2.0, 2.0)], &|g, v| Ok(g.square(v[0]))),
        "sum" => grad_check(&[uniform(r, &m, -2.0, 2.0)], &|g, v| {
            let s = g.sum(v[0]);
            Ok(g.square(s))
        }),
        "mean" => grad_check(&[uniform(r, &m, -2.0, 2.0)], &|g, v| {
            let s = g.mean(v[0]);
            Ok(g.square(s))
        }),
        "reshape" => grad_check(&[uniform(r, &[2, 3, 2], -1.0, 1.0)], &|g, v| {
            g.reshape(v[0], vec![3, 4])
        }),
        "matmul" => {
            let (a, b, c) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
            grad_check(
                &[uniform(r, &[a, b], -1.0, 1.0), uniform(r, &[b, c], -1.0, 1.0)],
                &|g, v| g.matmul(v[0], v[1]),
            )
        }
        "add_row_bias" => grad_check(
            &[uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)],
            &|g, v| g.add_row_bias(v[0], v[1]),
        ),
        "add_channel_bias" => grad_check(
            &[uniform(r, &[2, 3, 2, 2], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)],
            &|g, v| g.add_channel_bias(v[0], v[1]),
        ),
        "conv2d" => {
            let s = ConvShape::sample(r, 3, 6);
            grad_check(
                &[uniform(r, &s.input(), -1.0, 1.0), uniform(r, &s.kernel(), -1.0, 1.0)],
                &move |g, v| g.conv2d(v[0], v[1], s.stride, s.pad),
            )
        }
        "batch_norm_train" => grad_check(
            &[
                uniform(r, &[3, 2, 2, 2], -1.0, 1.0),
                uniform(r, &[2], 0.5, 1.5),
                uniform(r, &[2], -0.5, 0.5),
            ],
            &|g, v| Ok(g.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0),
        ),
        "batch_norm_eval" => {
            let mean = [r.random_range(-0.5..0.5), r.random_range(-0.5..0.5)];
            let var = [r.random_range(0.5..2.0), r.random_range(0.5..2.0)];
            grad_check(
                &[
                    uniform(r, &[2, 2, 3, 3], -1.0, 1.0),
                    uniform(r, &[2], 0.5, 1.5),
                    uniform(r, &[2], -0.5, 0.5),
                ],
                &move |g, v| g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5),
            )
        }
        "max_pool" => {
            let (window, stride) = if r.random_bool(0.5) { (2, 2) } else { (3, 1) };
            grad_check(&[distinct(r, &[2, 2, 4, 4])], &move |g, v| {
                g.max_pool(v[0], window, stride)
            })
        }
        "avg_pool" => {
            let (window, stride) = if r.random_bool(0.5) { (2, 2) } else { (3, 1) };
            grad_check(&[uniform(r, &[2, 2, 4, 4], -1.0, 1.0)], &move |g, v| {
                g.avg_pool(v[0], window, stride)
            })
        }
        "global_avg_pool" => grad_check(&[uniform(r, &[2, 3, 3, 2], -1.0, 1.0)], &|g, v| g.global_avg_pool(v[0])),
        "concat_channels" => grad_check(
            &[
                uniform(r, &[2, 2, 2, 2], -1.0, 1.0),
                uniform(r, &[2, 3, 2, 2], -1.0, 1.0),
            ],
            &|g, v| g.concat_channels(&[v[0], v[1]]),
        ),
        "softmax" => grad_check(&[uniform(r, &[3, 5], -3.0, 3.0)], &|g, v| g.softmax(v[0])),
        "hard_target" => grad_check(&[uniform(r, &[3, 5], -3.0, 3.0)], &|g, v| loss::hard_target(g, v[0])),
        "soft_target" => {
            let t = r.random_range(1.0..20.0);
            grad_check(&[uniform(r, &[3, 5], -3.0, 3.0)], &move |g, v| {
                loss::soft_target(g, v[0], t)
            })
        }
        "cross_entropy" => {
            let target = softmax_rows(&uniform(r, &[3, 5], -2.0, 2.0));
            grad_check(&[uniform(r, &[3, 5], 0.05, 1.0)], &move |g, v| {
                let y = g.constant(target.clone());
                loss::cross_entropy(g, v[0], y)
            })
        }
        "kd_loss_classic" => {
            let (n, k) = (r.random_range(1..5), r.random_range(2..6));
            let teacher = uniform(r, &[n, k], -4.0, 4.0);
            let y = one_hot_rows(r, n, k);
            let (t, lambda) = (r.random_range(1.0..20.0), r.random_range(0.0..1.0));
            grad_check(&[uniform(r, &[n, k], -4.0, 4.0)], &move |g, v| {
                Ok(loss::kd_loss_classic(g, v[0], &teacher, &y, t, lambda)?.l_kd)
            })
        }
        "kdfm_kd_loss" => {
            let (n, k) = (r.random_range(1..5), r.random_range(2..6));
            let z = uniform(r, &[n, k], -4.0, 4.0);
            let (t, lambda) = (r.random_range(1.0..20.0), r.random_range(0.0..1.0));
            grad_check(
                &[uniform(r, &[n, k], -4.0, 4.0), uniform(r, &[n, k], -4.0, 4.0)],
                &move |g, v| Ok(loss::kdfm_kd_loss(g, v[0], v[1], &z, t, lambda)?.l_kd),
            )
        }
        "adv_d_loss" => {
            let n = r.random_range(1..6);
            grad_check(
                &[uniform(r, &[n, 1], -2.0, 2.0), uniform(r, &[n, 1], -2.0, 2.0)],
                &|g, v| loss::adv_d_loss(g, v[0], v[1]),
            )
        }
        "adv_g_loss" => {
            let n = r.random_range(1..6);
            grad_check(&[uniform(r, &[n, 1], -2.0, 2.0)], &|g, v| loss::adv_g_loss(g, v[0]))
        }
        "generator_loss" => {
            let (n, k) = (r.random_range(1..5), r.random_range(2..6));
            let z = uniform(r, &[n, k], -4.0, 4.0);
            let (t, lambda, alpha) = (
                r.random_range(1.0..20.0),
                r.random_range(0.0..1.0),
                r.random_range(0.0..20.0),
            );
            grad_check(
                &[
                    uniform(r, &[n, 1], -2.0, 2.0),
                    uniform(r, &[n, k], -4.0, 4.0),
                    uniform(r, &[n, k], -4.0, 4.0),
                ],
                &move |g, v| {
                    let adv = loss::adv_g_loss(g, v[0])?;
                    let kd = loss::kdfm_kd_loss(g, v[1], v[2], &z, t, lambda)?;
                    loss::generator_loss(g, adv, kd.l_kd, alpha)
                },
            )
        }
        "logits_mimic_loss" => {
            let teacher = uniform(r, &[3, 4], -3.0, 3.0);
            grad_check(&[uniform(r, &[3, 4], -3.0, 3.0)], &move |g, v| {
                loss::logits_mimic_loss(g, v[0], &teacher)
            })
        }
        other => panic!("unknown gradient case {other}"),
    }
}

pub fn softmax_rows(x: &Tensor<f64>) -> Tensor<f64> {
    let k = *x.shape().last().unwrap();
    let data = x.data().chunks(k).flat_map(|row| softmax_oracle(row, 1.0)).collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

/// Pixel bytes of a hand-built CIFAR image: the R plane is 255 except
/// `R[0][1] = 102`, the G plane is 0, and the B plane is 51 except
/// `B[31][31] = 204`.
pub fn cifar_fixture_pixels() -> Vec<u8> {
    let mut px = vec![255u8; 1024];
    px[1] = 102;
    px.extend(std::iter::repeat_n(0u8, 1024));
    px.extend(std::iter::repeat_n(51u8, 1024));
    px[3071] = 204;
    px
}

/// The decoded `[3×32×32]` image of [`cifar_fixture_pixels`], written out
/// by hand: 255 → 1.0, 102 → 0.4, 51 → 0.2, 204 → 0.8.
pub fn cifar_fixture_expected() -> Vec<f32> {
    let mut v = vec![1.0f32; 1024];
    v[1] = 0.4;
    v.extend(std::iter::repeat_n(0.0f32, 1024));
    v.extend(std::iter::repeat_n(0.2f32, 1024));
    v[3071] = 0.8;
    v
}

/// A CIFAR record whose pixels vary with `seed`.
pub fn cifar_record(prefix: &[u8], seed: u8) -> Vec<u8> {
    let mut rec = prefix.to_vec();
    rec.extend((0..3072u32).map(|i| ((i * 31 + seed as u32 * 17) % 256) as u8));
    rec
}

/// Two 2×2 IDX images, and their labels 3 and 7.
pub fn idx_fixture() -> (Vec<u8>, Vec<u8>) {
    let mut images = Vec::new();
    for v in [0x0803u32, 2, 2, 2] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend_from_slice(&[0, 255, 51, 102, 204, 153, 0, 255]);
    let mut labels = Vec::new();
    for v in [0x0801u32, 2] {
        labels.extend_from_slice(&v.to_be_bytes());
    }
    labels.extend_from_slice(&[3, 7]);
    (images, labels)
}

pub const IDX_FIXTURE_EXPECTED: [f32; 8] = [0.0, 1.0, 0.2, 0.4, 0.8, 0.6, 0.0, 1.0];

/// A complete experiment config small enough to train in seconds.
pub const TINY_CONFIG: &str = r#"{
  "dataset": {"kind": "synthetic", "samples_per_class": 10, "image_size": 8},
  "teacher": {"num_blocks": 2, "layers_per_block": 1, "growth": 4, "init_channels": 4},
  "student": {"width": 4},
  "schedule": {"epochs": 2, "teacher_epochs": 2, "batch_size": 16}
}"#;

pub fn tiny_experiment(out: &std::path::Path) -> kdfm::experiment::ExperimentConfig {
    let mut cfg = kdfm::experiment::ExperimentConfig::from_json(TINY_CONFIG).unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg
}

pub fn same_bits(a: &Tensor<f32>, b: &Tensor<f32>) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}
