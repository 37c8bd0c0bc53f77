use serde::{Deserialize, Serialize};

use super::{BatchNorm, Conv, DenseUnit, Layer, Linear, Model, Role};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Serializable description of a network, enough to rebuild it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Student(StudentSpec),
    Teacher(TeacherSpec),
    Discriminator(DiscriminatorSpec),
    Classifier {
        channels: usize,
        height: usize,
        width: usize,
        num_classes: usize,
    },
}

impl Architecture {
    pub fn input_shape(&self) -> [usize; 3] {
        match self {
            Architecture::Student(s) => s.input,
            Architecture::Teacher(t) => t.input,
            Architecture::Discriminator(d) => d.feature,
            Architecture::Classifier {
                channels,
                height,
                width,
                ..
            } => [*channels, *height, *width],
        }
    }

    pub fn role(&self) -> Role {
        match self {
            Architecture::Student(_) => Role::StudentG,
            Architecture::Teacher(_) => Role::TeacherT,
            Architecture::Discriminator(_) => Role::DiscriminatorD,
            Architecture::Classifier { .. } => Role::ClassifierC,
        }
    }

    /// Builds an uninitialized (all-zero) model for this architecture.
    pub fn build<S: Scalar>(&self) -> Result<Model<S>> {
        match self {
            Architecture::Student(s) => build_student_cnn(s.input, &s.channels, Some(&s.pool_after), None),
            Architecture::Teacher(t) => build_teacher_tinydense(t),
            Architecture::Discriminator(d) => build_discriminator(d),
            Architecture::Classifier {
                channels,
                height,
                width,
                num_classes,
            } => build_shared_classifier([*channels, *height, *width], *num_classes),
        }
    }
}

/// Plain CNN feature extractor: `[conv3×3 → BN → ReLU (→ maxpool)]×n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentSpec {
    pub input: [usize; 3],
    pub channels: Vec<usize>,
    /// 1-based indices of the convs followed by a 2×2 max-pool.
    pub pool_after: Vec<usize>,
}

/// Desk-scale densely connected teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSpec {
    pub input: [usize; 3],
    pub num_blocks: usize,
    pub layers_per_block: usize,
    pub growth: usize,
    pub init_channels: usize,
    pub num_classes: usize,
}

impl TeacherSpec {
    /// `[C, H, W]` of the last dense block's activations.
    pub fn feature_shape(&self) -> [usize; 3] {
        let channels = self.init_channels + self.num_blocks * self.layers_per_block * self.growth;
        let down = 1usize << self.num_blocks.saturating_sub(1);
        [channels, self.input[1] / down, self.input[2] / down]
    }
}

/// LSGAN critic over feature maps: `[conv4×4/2 → leaky-ReLU]×k → GAP → FC(1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub feature: [usize; 3],
    pub channels: Vec<usize>,
    pub slope: f64,
}

impl DiscriminatorSpec {
    pub fn new(feature: [usize; 3]) -> Self {
        DiscriminatorSpec {
            feature,
            channels: vec![4, 8],
            slope: 0.2,
        }
    }
}

/// Pool positions when none are given: after every second conv, as many
/// pools as needed to shrink `input_hw` to `feature_hw`. When the depth has
/// too few even positions, the remaining pools go after the last convs.
pub fn default_pool_positions(depth: usize, input_hw: usize, feature_hw: usize) -> Result<Vec<usize>> {
    if feature_hw == 0 || !input_hw.is_multiple_of(feature_hw) || !(input_hw / feature_hw).is_power_of_two() {
        return Err(Error::config(format!(
            "cannot reach spatial extent {feature_hw} from {input_hw} with 2×2 pooling"
        )));
    }
    let pools = (input_hw / feature_hw).trailing_zeros() as usize;
    if pools > depth {
        return Err(Error::config(format!(
            "{depth} conv layers cannot hold {pools} pooling stages"
        )));
    }
    let mut positions: Vec<usize> = (1..=depth).filter(|i| i % 2 == 0).take(pools).collect();
    let mut candidate = depth;
    while positions.len() < pools {
        if !positions.contains(&candidate) {
            positions.push(candidate);
        }
        candidate -= 1;
    }
    positions.sort_unstable();
    Ok(positions)
}

/// Builds the student extractor `G`.
///
/// `pool_after` defaults via [`default_pool_positions`] when `out_feature`
/// is given; `out_feature` (if any) is checked against a probe forward.
pub fn build_student_cnn<S: Scalar>(
    input: [usize; 3],
    channel_plan: &[usize],
    pool_after: Option<&[usize]>,
    out_feature: Option<[usize; 3]>,
) -> Result<Model<S>> {
    if channel_plan.is_empty() {
        return Err(Error::config("student needs at least one conv layer"));
    }
    if channel_plan.contains(&0) {
        return Err(Error::config("student channel counts must be positive"));
    }
    let depth = channel_plan.len();
    let pool_after = match (pool_after, out_feature) {
        (Some(p), _) => p.to_vec(),
        (None, Some(f)) => default_pool_positions(depth, input[1], f[1])?,
        (None, None) => Vec::new(),
    };
    if let Some(&bad) = pool_after.iter().find(|&&i| i == 0 || i > depth) {
        return Err(Error::config(format!("pool position {bad} outside 1..={depth}")));
    }
    if let Some(f) = out_feature {
        if f[0] != channel_plan[depth - 1] {
            return Err(Error::config(format!(
                "final student channels {} do not match feature channels {}",
                channel_plan[depth - 1],
                f[0]
            )));
        }
    }

    let mut body = Vec::new();
    let mut in_c = input[0];
    for (i, &out_c) in channel_plan.iter().enumerate() {
        let idx = i + 1;
        body.push(Layer::Conv(Conv::new(
            &format!("conv{idx}"),
            in_c,
            out_c,
            3,
            1,
            1,
            false,
        )));
        body.push(Layer::BatchNorm(BatchNorm::new(&format!("bn{idx}"), out_c)));
        body.push(Layer::Relu);
        if pool_after.contains(&idx) {
            body.push(Layer::MaxPool { window: 2, stride: 2 });
        }
        in_c = out_c;
    }
    let mut pool_after = pool_after;
    pool_after.sort_unstable();
    pool_after.dedup();
    let model = Model {
        role: Role::StudentG,
        arch: Architecture::Student(StudentSpec {
            input,
            channels: channel_plan.to_vec(),
            pool_after,
        }),
        body,
        head: Vec::new(),
    };
    let out = model.output_shape()?;
    if let Some(f) = out_feature {
        if out != f {
            return Err(Error::config(format!(
                "student feature shape {out:?} does not match required {f:?}"
            )));
        }
    }
    Ok(model)
}

/// Builds the teacher `T`: stem conv, dense blocks joined by transitions
/// (BN → ReLU → conv1×1 → avg-pool 2), final BN → ReLU as the feature map,
/// plus a GAP → FC logits head.
pub fn build_teacher_tinydense<S: Scalar>(spec: &TeacherSpec) -> Result<Model<S>> {
    if spec.num_blocks == 0
        || spec.layers_per_block == 0
        || spec.growth == 0
        || spec.init_channels == 0
        || spec.num_classes < 2
    {
        return Err(Error::config(format!(
            "teacher needs positive blocks, layers, growth and stem width, and ≥2 classes: {spec:?}"
        )));
    }
    let mut body = vec![Layer::Conv(Conv::new(
        "stem",
        spec.input[0],
        spec.init_channels,
        3,
        1,
        1,
        false,
    ))];
    let mut c = spec.init_channels;
    for b in 1..=spec.num_blocks {
        let units = (0..spec.layers_per_block)
            .map(|i| {
                let name = format!("block{b}.unit{}", i + 1);
                let in_c = c + i * spec.growth;
                DenseUnit {
                    norm: BatchNorm::new(&format!("{name}.bn"), in_c),
                    conv: Conv::new(&format!("{name}.conv"), in_c, spec.growth, 3, 1, 1, false),
                }
            })
            .collect();
        body.push(Layer::DenseBlock(units));
        c += spec.layers_per_block * spec.growth;
        if b < spec.num_blocks {
            body.push(Layer::BatchNorm(BatchNorm::new(&format!("trans{b}.bn"), c)));
            body.push(Layer::Relu);
            body.push(Layer::Conv(Conv::new(&format!("trans{b}.conv"), c, c, 1, 1, 0, false)));
            body.push(Layer::AvgPool { window: 2, stride: 2 });
        }
    }
    body.push(Layer::BatchNorm(BatchNorm::new("final.bn", c)));
    body.push(Layer::Relu);
    let head = vec![
        Layer::GlobalAvgPool,
        Layer::Linear(Linear::new("fc", c, spec.num_classes)),
    ];
    let model = Model {
        role: Role::TeacherT,
        arch: Architecture::Teacher(spec.clone()),
        body,
        head,
    };
    let out = model.output_shape()?;
    if out != spec.feature_shape() {
        return Err(Error::config(format!(
            "teacher input {:?} does not pool cleanly to {:?}",
            spec.input,
            spec.feature_shape()
        )));
    }
    Ok(model)
}

pub fn build_discriminator<S: Scalar>(spec: &DiscriminatorSpec) -> Result<Model<S>> {
    if spec.channels.is_empty() || spec.channels.contains(&0) {
        return Err(Error::config("discriminator needs positive conv widths"));
    }
    let [fc, fh, fw] = spec.feature;
    let shrink = 1usize << spec.channels.len();
    if fh < shrink || fw < shrink || fh % shrink != 0 || fw % shrink != 0 {
        return Err(Error::config(format!(
            "feature extent {fh}×{fw} too small for {} stride-2 discriminator layers",
            spec.channels.len()
        )));
    }
    let mut body = Vec::new();
    let mut in_c = fc;
    for (i, &out_c) in spec.channels.iter().enumerate() {
        body.push(Layer::Conv(Conv::new(
            &format!("conv{}", i + 1),
            in_c,
            out_c,
            4,
            2,
            1,
            true,
        )));
        body.push(Layer::LeakyRelu(spec.slope));
        in_c = out_c;
    }
    body.push(Layer::GlobalAvgPool);
    body.push(Layer::Linear(Linear::new("score", in_c, 1)));
    Ok(Model {
        role: Role::DiscriminatorD,
        arch: Architecture::Discriminator(spec.clone()),
        body,
        head: Vec::new(),
    })
}

/// Shared classifier `C`: global average pool then one FC layer.
pub fn build_shared_classifier<S: Scalar>(feature: [usize; 3], num_classes: usize) -> Result<Model<S>> {
    if num_classes < 2 || feature.contains(&0) {
        return Err(Error::config(format!(
            "classifier needs ≥2 classes and a non-empty feature shape, got {feature:?} / {num_classes}"
        )));
    }
    Ok(Model {
        role: Role::ClassifierC,
        arch: Architecture::Classifier {
            channels: feature[0],
            height: feature[1],
            width: feature[2],
            num_classes,
        },
        body: vec![
            Layer::GlobalAvgPool,
            Layer::Linear(Linear::new("fc", feature[0], num_classes)),
        ],
        head: Vec::new(),
    })
}

fn uniform_student_params(in_c: usize, depth: usize, width: usize, final_c: usize) -> usize {
    let mut plan = vec![width; depth - 1];
    plan.push(final_c);
    let mut prev = in_c;
    let mut total = 0;
    for c in plan {
        total += 9 * prev * c + 2 * c;
        prev = c;
    }
    total
}

/// Hidden width whose uniform plan `[w; depth-1] + [final_c]` comes closest
/// to `target` parameters.
pub fn student_width_for_params(in_c: usize, depth: usize, final_c: usize, target: usize) -> Result<usize> {
    if depth < 2 {
        return Err(Error::config("a width search needs at least two conv layers"));
    }
    (1..=4096)
        .min_by_key(|&w| uniform_student_params(in_c, depth, w, final_c).abs_diff(target))
        .ok_or_else(|| Error::config("empty width range"))
}
