//! Layers, models and the four network builders: student extractor `G`,
//! teacher `T`, discriminator `D` and shared classifier `C`.

mod builders;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub use builders::{
    build_discriminator, build_shared_classifier, build_student_cnn, build_teacher_tinydense, default_pool_positions,
    student_width_for_params, Architecture, DiscriminatorSpec, StudentSpec, TeacherSpec,
};

pub const BN_EPS: f64 = 1e-5;
/// Weight kept on the old running statistic at each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "student_G")]
    StudentG,
    #[serde(rename = "teacher_T")]
    TeacherT,
    #[serde(rename = "discriminator_D")]
    DiscriminatorD,
    #[serde(rename = "classifier_C")]
    ClassifierC,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::StudentG => "student_G",
            Role::TeacherT => "teacher_T",
            Role::DiscriminatorD => "discriminator_D",
            Role::ClassifierC => "classifier_C",
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<S: Scalar> {
    pub name: String,
    pub tensor: Tensor<S>,
}

impl<S: Scalar> Param<S> {
    fn new(name: String, shape: Vec<usize>) -> Self {
        Param {
            name,
            tensor: Tensor::zeros(shape).with_requires_grad(true),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv<S: Scalar> {
    pub weight: Param<S>,
    pub bias: Option<Param<S>>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<S: Scalar> {
    pub gamma: Param<S>,
    pub beta: Param<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
}

/// Fully connected layer, weight stored `[in × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<S: Scalar> {
    pub weight: Param<S>,
    pub bias: Param<S>,
}

/// One pre-activation unit of a dense block: BN → ReLU → conv3×3.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseUnit<S: Scalar> {
    pub norm: BatchNorm<S>,
    pub conv: Conv<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<S: Scalar> {
    Conv(Conv<S>),
    BatchNorm(BatchNorm<S>),
    Relu,
    LeakyRelu(f64),
    MaxPool {
        window: usize,
        stride: usize,
    },
    AvgPool {
        window: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Linear(Linear<S>),
    /// Each unit sees the channel concatenation of the block input and all
    /// earlier unit outputs; the block emits the full concatenation.
    DenseBlock(Vec<DenseUnit<S>>),
}

impl<S: Scalar> Conv<S> {
    pub(crate) fn new(
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        Conv {
            weight: Param::new(format!("{name}.weight"), vec![out_c, in_c, k, k]),
            bias: bias.then(|| Param::new(format!("{name}.bias"), vec![out_c])),
            stride,
            padding,
        }
    }
}

impl<S: Scalar> BatchNorm<S> {
    pub(crate) fn new(name: &str, c: usize) -> Self {
        BatchNorm {
            gamma: Param::new(format!("{name}.gamma"), vec![c]),
            beta: Param::new(format!("{name}.beta"), vec![c]),
            running_mean: Tensor::zeros(vec![c]),
            running_var: Tensor::ones(vec![c]),
        }
    }

    fn forward(&mut self, g: &mut Graph<S>, vars: &mut std::slice::Iter<'_, Var>, x: Var, mode: Mode) -> Result<Var> {
        let (gamma, beta) = (next(vars), next(vars));
        let eps = S::from_f64(BN_EPS);
        match mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm_train(x, gamma, beta, eps)?;
                let m = S::from_f64(BN_MOMENTUM);
                let keep = S::one() - m;
                for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
                    *r = m * *r + keep * b;
                }
                for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
                    *r = m * *r + keep * b;
                }
                Ok(y)
            }
            Mode::Eval => g.batch_norm_eval(x, gamma, beta, self.running_mean.data(), self.running_var.data(), eps),
        }
    }
}

impl<S: Scalar> Linear<S> {
    pub(crate) fn new(name: &str, in_f: usize, out_f: usize) -> Self {
        Linear {
            weight: Param::new(format!("{name}.weight"), vec![in_f, out_f]),
            bias: Param::new(format!("{name}.bias"), vec![out_f]),
        }
    }
}

fn next(vars: &mut std::slice::Iter<'_, Var>) -> Var {
    *vars.next().expect("binding shorter than parameter list")
}

fn conv_forward<S: Scalar>(
    conv: &Conv<S>,
    g: &mut Graph<S>,
    vars: &mut std::slice::Iter<'_, Var>,
    x: Var,
) -> Result<Var> {
    let w = next(vars);
    let y = g.conv2d(x, w, conv.stride, conv.padding)?;
    match conv.bias {
        Some(_) => {
            let b = next(vars);
            g.add_channel_bias(y, b)
        }
        None => Ok(y),
    }
}

impl<S: Scalar> Layer<S> {
    fn params(&self) -> Vec<&Param<S>> {
        match self {
            Layer::Conv(c) => std::iter::once(&c.weight).chain(c.bias.as_ref()).collect(),
            Layer::BatchNorm(bn) => vec![&bn.gamma, &bn.beta],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            Layer::DenseBlock(units) => units
                .iter()
                .flat_map(|u| {
                    [&u.norm.gamma, &u.norm.beta, &u.conv.weight]
                        .into_iter()
                        .chain(u.conv.bias.as_ref())
                })
                .collect(),
            _ => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        match self {
            Layer::Conv(c) => std::iter::once(&mut c.weight).chain(c.bias.as_mut()).collect(),
            Layer::BatchNorm(bn) => vec![&mut bn.gamma, &mut bn.beta],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            Layer::DenseBlock(units) => units
                .iter_mut()
                .flat_map(|u| {
                    [&mut u.norm.gamma, &mut u.norm.beta, &mut u.conv.weight]
                        .into_iter()
                        .chain(u.conv.bias.as_mut())
                })
                .collect(),
            _ => Vec::new(),
        }
    }

    fn norms(&self) -> Vec<&BatchNorm<S>> {
        match self {
            Layer::BatchNorm(bn) => vec![bn],
            Layer::DenseBlock(units) => units.iter().map(|u| &u.norm).collect(),
            _ => Vec::new(),
        }
    }

    fn norms_mut(&mut self) -> Vec<&mut BatchNorm<S>> {
        match self {
            Layer::BatchNorm(bn) => vec![bn],
            Layer::DenseBlock(units) => units.iter_mut().map(|u| &mut u.norm).collect(),
            _ => Vec::new(),
        }
    }

    fn forward(&mut self, g: &mut Graph<S>, vars: &mut std::slice::Iter<'_, Var>, x: Var, mode: Mode) -> Result<Var> {
        match self {
            Layer::Conv(conv) => conv_forward(conv, g, vars, x),
            Layer::BatchNorm(bn) => bn.forward(g, vars, x, mode),
            Layer::Relu => Ok(g.relu(x)),
            Layer::LeakyRelu(slope) => Ok(g.leaky_relu(x, S::from_f64(*slope))),
            Layer::MaxPool { window, stride } => g.max_pool(x, *window, *stride),
            Layer::AvgPool { window, stride } => g.avg_pool(x, *window, *stride),
            Layer::GlobalAvgPool => g.global_avg_pool(x),
            Layer::Linear(_) => {
                let (w, b) = (next(vars), next(vars));
                let y = g.matmul(x, w)?;
                g.add_row_bias(y, b)
            }
            Layer::DenseBlock(units) => {
                let mut features = vec![x];
                let mut input = x;
                for unit in units.iter_mut() {
                    let h = unit.norm.forward(g, vars, input, mode)?;
                    let h = g.relu(h);
                    let h = conv_forward(&unit.conv, g, vars, h)?;
                    features.push(h);
                    input = g.concat_channels(&features)?;
                }
                Ok(input)
            }
        }
    }
}

/// Graph leaves for a model's parameters, in [`Model::params`] order.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
    body_len: usize,
}

impl Binding {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// An ordered layer stack with a role tag. `body` produces the model's main
/// output (features for `G`/`T`, scores for `D`, logits for `C`); `head`,
/// used only by the teacher, maps features to logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<S: Scalar = f32> {
    pub role: Role,
    pub arch: Architecture,
    pub body: Vec<Layer<S>>,
    pub head: Vec<Layer<S>>,
}

impl<S: Scalar> Model<S> {
    pub fn params(&self) -> Vec<&Param<S>> {
        self.body.iter().chain(&self.head).flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        self.body
            .iter_mut()
            .chain(self.head.iter_mut())
            .flat_map(|l| l.params_mut())
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.params_mut().into_iter().map(|p| &mut p.tensor).collect()
    }

    pub fn batch_norms(&self) -> Vec<&BatchNorm<S>> {
        self.body.iter().chain(&self.head).flat_map(|l| l.norms()).collect()
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<S>> {
        self.body
            .iter_mut()
            .chain(self.head.iter_mut())
            .flat_map(|l| l.norms_mut())
            .collect()
    }

    /// Total scalar parameters, BN affine terms included, running stats not.
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.tensor.len()).sum()
    }

    /// He-normal weights (`std = sqrt(2 / fan_in)`), zero biases, BN γ=1 β=0,
    /// fresh running stats. Fully determined by `seed`.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in self.params_mut() {
            let shape = p.tensor.shape().to_vec();
            let fresh = if p.name.ends_with(".gamma") {
                Tensor::ones(shape)
            } else if p.name.ends_with(".beta") || p.name.ends_with(".bias") {
                Tensor::zeros(shape)
            } else {
                let fan_in = match shape.as_slice() {
                    [_, c, kh, kw] => c * kh * kw,
                    [i, _] => *i,
                    _ => unreachable!("weights are 2-D or 4-D"),
                };
                Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), &mut rng)
            };
            p.tensor = fresh.with_requires_grad(true);
        }
        for bn in self.batch_norms_mut() {
            bn.running_mean = Tensor::zeros(bn.running_mean.shape().to_vec());
            bn.running_var = Tensor::ones(bn.running_var.shape().to_vec());
        }
    }

    /// Pushes every parameter into `g` as a leaf. With `trainable == false`
    /// the leaves record no gradient.
    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Binding {
        let body_len = self.body.iter().map(|l| l.params().len()).sum();
        let vars = self
            .params()
            .into_iter()
            .map(|p| g.leaf(p.tensor.clone().with_requires_grad(trainable)))
            .collect();
        Binding { vars, body_len }
    }

    /// Runs the body. In train mode batch-norm running statistics update.
    pub fn forward(&mut self, g: &mut Graph<S>, binding: &Binding, x: Var, mode: Mode) -> Result<Var> {
        let mut vars = binding.vars[..binding.body_len].iter();
        let mut h = x;
        for layer in &mut self.body {
            h = layer.forward(g, &mut vars, h, mode)?;
        }
        Ok(h)
    }

    /// Runs the logits head on features produced by [`Model::forward`].
    pub fn forward_head(&mut self, g: &mut Graph<S>, binding: &Binding, features: Var, mode: Mode) -> Result<Var> {
        if self.head.is_empty() {
            return Err(Error::usage(format!("{} model has no logits head", self.role)));
        }
        let mut vars = binding.vars[binding.body_len..].iter();
        let mut h = features;
        for layer in &mut self.head {
            h = layer.forward(g, &mut vars, h, mode)?;
        }
        Ok(h)
    }

    /// Copies leaf gradients from `g` into the parameter tensors.
    pub fn collect_grads(&mut self, g: &Graph<S>, binding: &Binding) {
        for (p, &v) in self.params_mut().into_iter().zip(&binding.vars) {
            match g.grad(v) {
                Some(grad) => p.tensor.accumulate_grad(grad),
                // Trainable but unreachable from the loss: a zero gradient.
                None if g.value(v).requires_grad() => p.tensor.accumulate_grad(&vec![S::zero(); p.tensor.len()]),
                None => {}
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.tensor.zero_grad();
        }
    }

    /// Body output for a whole batch in inference mode, without recording
    /// gradients.
    pub fn infer(&mut self, batch: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.constant(batch.clone());
        let y = self.forward(&mut g, &b, x, Mode::Eval)?;
        Ok(g.value(y).clone())
    }

    /// Last convolutional activations of a student or teacher.
    ///
    /// The teacher is frozen: it always runs in eval mode and records no
    /// gradients, whatever `mode` says.
    pub fn forward_features(&mut self, batch: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        match self.role {
            Role::TeacherT => self.infer(batch),
            Role::StudentG => {
                let mut g = Graph::new();
                let b = self.bind(&mut g, mode == Mode::Train);
                let x = g.constant(batch.clone());
                let y = self.forward(&mut g, &b, x, mode)?;
                Ok(g.value(y).clone())
            }
            other => Err(Error::usage(format!(
                "forward_features needs a student_G or teacher_T model, got {other}"
            ))),
        }
    }

    /// Teacher features and logits in one eval-mode pass.
    pub fn teacher_outputs(&mut self, batch: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        if self.role != Role::TeacherT {
            return Err(Error::usage(format!("teacher_outputs on a {} model", self.role)));
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.constant(batch.clone());
        let f = self.forward(&mut g, &b, x, Mode::Eval)?;
        let z = self.forward_head(&mut g, &b, f, Mode::Eval)?;
        Ok((g.value(f).clone(), g.value(z).clone()))
    }

    /// Input shape `[C, H, W]` the model was built for.
    pub fn input_shape(&self) -> [usize; 3] {
        self.arch.input_shape()
    }

    /// Shape of the body output for a single sample.
    pub fn output_shape(&self) -> Result<Vec<usize>> {
        let mut probe = self.clone();
        let [c, h, w] = self.input_shape();
        let out = probe.infer(&Tensor::zeros(vec![1, c, h, w]))?;
        Ok(out.shape()[1..].to_vec())
    }

    /// Bit-exact copy of parameters and running stats, for snapshot diffs.
    pub fn state_vector(&self) -> Vec<S> {
        let mut v: Vec<S> = self
            .params()
            .into_iter()
            .flat_map(|p| p.tensor.data().iter().copied())
            .collect();
        for bn in self.batch_norms() {
            v.extend_from_slice(bn.running_mean.data());
            v.extend_from_slice(bn.running_var.data());
        }
        v
    }
}
