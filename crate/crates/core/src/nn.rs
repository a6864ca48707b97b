//! The segmentation network.
//!
//! One shared convolutional encoder feeds three kinds of decoders: the
//! student decoder (segmentation logits), Q classmate decoders (boundary
//! regression from a perturbed copy of the feature map) and a frozen teacher
//! copy of encoder + student decoder that is only ever moved by exponential
//! moving averages of the student. The teacher's tensors never require
//! gradients, so no gradient buffer can even be allocated for them.
//!
//! Encoder: four 3×3 conv blocks (ReLU + per-channel normalization), three of
//! them with stride 2. Decoders: three nearest-upsample + conv blocks back to
//! full resolution and a 1×1 head, giving classmates the four conv layers
//! they need.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ops::{channel_norm_eval, channel_norm_train, conv2d};
use crate::tensor::{no_grad, Tensor};
use ndarray::{Array1, Array4, ArrayD, Ix1};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub encoder_widths: [usize; 4],
    pub decoder_widths: [usize; 3],
    pub num_classmates: usize,
    pub norm_eps: f64,
    pub norm_momentum: f64,
    pub dropout_p: f64,
    pub noise_amplitude: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            num_classes: 2,
            encoder_widths: [16, 32, 64, 64],
            decoder_widths: [32, 16, 8],
            num_classmates: 2,
            norm_eps: 1e-5,
            norm_momentum: 0.1,
            dropout_p: 0.5,
            noise_amplitude: 0.3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.num_classes == 0 {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.encoder_widths.iter().any(|&w| w == 0) || self.decoder_widths.iter().any(|&w| w == 0)
        {
            return Err(Error::config("layer widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config("dropout_p must lie in [0, 1)"));
        }
        if self.noise_amplitude < 0.0 {
            return Err(Error::config("noise_amplitude must be nonnegative"));
        }
        Ok(())
    }
}

/// Whether normalization uses batch statistics (and updates running ones) or
/// frozen running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Named view of one stored array.
#[derive(Clone)]
pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Optimizer updates apply only to trainable entries; running statistics
    /// are carried but never trained.
    pub trainable: bool,
}

/// Parameter group ids mirroring the per-loss gradient routing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Encoder,
    StudentDecoder,
    Teacher,
    Classmates,
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

struct ConvLayer<T: Scalar> {
    weight: Tensor<T>,
    bias: Tensor<T>,
    stride: usize,
    pad: usize,
}

impl<T: Scalar> ConvLayer<T> {
    fn init(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (cin * k * k) as f64;
        let bound = (1.0 / fan_in).sqrt();
        let weight = Array4::from_shape_fn((cout, cin, k, k), |_| {
            T::cast(rng.random_range(-bound..bound))
        });
        let bias = Array1::from_shape_fn(cout, |_| T::cast(rng.random_range(-bound..bound)));
        Self {
            weight: Tensor::from_array(weight, true),
            bias: Tensor::from_array(bias, true),
            stride,
            pad,
        }
    }

    fn frozen_copy(&self) -> Self {
        Self {
            weight: self.weight.detach(),
            bias: self.bias.detach(),
            stride: self.stride,
            pad: self.pad,
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        conv2d(x, &self.weight, &self.bias, self.stride, self.pad)
    }

    fn collect(&self, prefix: &str, out: &mut Vec<ParamEntry<T>>) {
        out.push(ParamEntry {
            name: format!("{prefix}.weight"),
            tensor: self.weight.clone(),
            trainable: true,
        });
        out.push(ParamEntry {
            name: format!("{prefix}.bias"),
            tensor: self.bias.clone(),
            trainable: true,
        });
    }
}

struct ChannelNorm<T: Scalar> {
    gamma: Tensor<T>,
    beta: Tensor<T>,
    running_mean: Tensor<T>,
    running_var: Tensor<T>,
    eps: T,
    momentum: T,
}

impl<T: Scalar> ChannelNorm<T> {
    fn init(c: usize, eps: f64, momentum: f64) -> Self {
        Self {
            gamma: Tensor::from_array(Array1::from_elem(c, T::one()), true),
            beta: Tensor::from_array(Array1::zeros(c), true),
            running_mean: Tensor::from_array(Array1::zeros(c), false),
            running_var: Tensor::from_array(Array1::from_elem(c, T::one()), false),
            eps: T::cast(eps),
            momentum: T::cast(momentum),
        }
    }

    fn frozen_copy(&self) -> Self {
        Self {
            gamma: self.gamma.detach(),
            beta: self.beta.detach(),
            running_mean: self.running_mean.detach(),
            running_var: self.running_var.detach(),
            eps: self.eps,
            momentum: self.momentum,
        }
    }

    fn forward(&self, x: &Tensor<T>, mode: NormMode) -> Tensor<T> {
        match mode {
            NormMode::Train => {
                let (y, mean, var) = channel_norm_train(x, &self.gamma, &self.beta, self.eps);
                let mom = self.momentum;
                let one = T::one();
                let mean = mean.into_dyn();
                let var = var.into_dyn();
                self.running_mean.update_data(|rm| {
                    ndarray::Zip::from(rm)
                        .and(&mean)
                        .for_each(|r, &m| *r = (one - mom) * *r + mom * m);
                });
                self.running_var.update_data(|rv| {
                    ndarray::Zip::from(rv)
                        .and(&var)
                        .for_each(|r, &v| *r = (one - mom) * *r + mom * v);
                });
                y
            }
            NormMode::Eval => {
                let rm = self
                    .running_mean
                    .data()
                    .view()
                    .into_dimensionality::<Ix1>()
                    .unwrap()
                    .to_owned();
                let rv = self
                    .running_var
                    .data()
                    .view()
                    .into_dimensionality::<Ix1>()
                    .unwrap()
                    .to_owned();
                channel_norm_eval(x, &self.gamma, &self.beta, &rm, &rv, self.eps)
            }
        }
    }

    fn collect(&self, prefix: &str, out: &mut Vec<ParamEntry<T>>) {
        out.push(ParamEntry {
            name: format!("{prefix}.gamma"),
            tensor: self.gamma.clone(),
            trainable: true,
        });
        out.push(ParamEntry {
            name: format!("{prefix}.beta"),
            tensor: self.beta.clone(),
            trainable: true,
        });
        out.push(ParamEntry {
            name: format!("{prefix}.running_mean"),
            tensor: self.running_mean.clone(),
            trainable: false,
        });
        out.push(ParamEntry {
            name: format!("{prefix}.running_var"),
            tensor: self.running_var.clone(),
            trainable: false,
        });
    }
}

struct ConvBlock<T: Scalar> {
    conv: ConvLayer<T>,
    norm: ChannelNorm<T>,
}

impl<T: Scalar> ConvBlock<T> {
    fn init(cin: usize, cout: usize, stride: usize, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        Self {
            conv: ConvLayer::init(cin, cout, 3, stride, 1, rng),
            norm: ChannelNorm::init(cout, cfg.norm_eps, cfg.norm_momentum),
        }
    }

    fn frozen_copy(&self) -> Self {
        Self {
            conv: self.conv.frozen_copy(),
            norm: self.norm.frozen_copy(),
        }
    }

    fn forward(&self, x: &Tensor<T>, mode: NormMode) -> Tensor<T> {
        self.norm.forward(&self.conv.forward(x), mode).relu()
    }

    fn collect(&self, prefix: &str, out: &mut Vec<ParamEntry<T>>) {
        self.conv.collect(&format!("{prefix}.conv"), out);
        self.norm.collect(&format!("{prefix}.norm"), out);
    }
}

struct Encoder<T: Scalar> {
    blocks: Vec<ConvBlock<T>>,
}

impl<T: Scalar> Encoder<T> {
    fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let w = cfg.encoder_widths;
        let strides = [1usize, 2, 2, 2];
        let mut blocks = Vec::with_capacity(4);
        let mut cin = cfg.in_channels;
        for i in 0..4 {
            blocks.push(ConvBlock::init(cin, w[i], strides[i], cfg, rng));
            cin = w[i];
        }
        Self { blocks }
    }

    fn frozen_copy(&self) -> Self {
        Self {
            blocks: self.blocks.iter().map(|b| b.frozen_copy()).collect(),
        }
    }

    fn forward(&self, x: &Tensor<T>, mode: NormMode) -> Tensor<T> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h, mode);
        }
        h
    }

    fn collect(&self, prefix: &str, out: &mut Vec<ParamEntry<T>>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("{prefix}.b{i}"), out);
        }
    }
}

struct Decoder<T: Scalar> {
    blocks: Vec<ConvBlock<T>>,
    head: ConvLayer<T>,
}

impl<T: Scalar> Decoder<T> {
    fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let w = cfg.decoder_widths;
        let mut blocks = Vec::with_capacity(3);
        let mut cin = cfg.encoder_widths[3];
        for width in w {
            blocks.push(ConvBlock::init(cin, width, 1, cfg, rng));
            cin = width;
        }
        let head = ConvLayer::init(cin, cfg.num_classes, 1, 1, 0, rng);
        Self { blocks, head }
    }

    fn frozen_copy(&self) -> Self {
        Self {
            blocks: self.blocks.iter().map(|b| b.frozen_copy()).collect(),
            head: self.head.frozen_copy(),
        }
    }

    fn forward(&self, z: &Tensor<T>, mode: NormMode) -> Tensor<T> {
        let mut h = z.clone();
        for b in &self.blocks {
            h = b.forward(&h.upsample_nearest_2x(), mode);
        }
        self.head.forward(&h)
    }

    fn collect(&self, prefix: &str, out: &mut Vec<ParamEntry<T>>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("{prefix}.b{i}"), out);
        }
        self.head.collect(&format!("{prefix}.head"), out);
    }
}

// ---------------------------------------------------------------------------
// feature perturbation
// ---------------------------------------------------------------------------

/// Feature-map perturbation applied before a classmate decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbKind {
    Dropout,
    UniformNoise,
}

impl PerturbKind {
    /// Classmate `j` uses kind `j mod 2` so each one sees a different
    /// perturbed view of the features.
    pub fn for_classmate(j: usize) -> Self {
        if j % 2 == 0 {
            PerturbKind::Dropout
        } else {
            PerturbKind::UniformNoise
        }
    }
}

/// Perturb a feature map: dropout zeroes each element with probability `p`
/// and rescales survivors by `1/(1-p)`; uniform noise multiplies elementwise
/// by `(1 + u)`, `u ~ U(-amp, amp)`. Gradients flow through as an elementwise
/// product with a constant mask.
pub fn perturb_features<T: Scalar>(
    z: &Tensor<T>,
    kind: PerturbKind,
    p: f64,
    amp: f64,
    rng: &mut impl Rng,
) -> Tensor<T> {
    let shape = z.data().raw_dim();
    let mask = match kind {
        PerturbKind::Dropout => {
            let keep_scale = 1.0 / (1.0 - p);
            ArrayD::from_shape_simple_fn(shape, || {
                if rng.random_range(0.0..1.0) < p {
                    T::zero()
                } else {
                    T::cast(keep_scale)
                }
            })
        }
        PerturbKind::UniformNoise => ArrayD::from_shape_simple_fn(shape, || {
            if amp > 0.0 {
                T::cast(1.0 + rng.random_range(-amp..amp))
            } else {
                T::one()
            }
        }),
    };
    z.mul(&Tensor::new(mask, false))
}

/// What the classmate decoders emit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassmateTask {
    /// Dual task: tanh-bounded signed-distance regression.
    Boundary,
    /// Ablation arm: plain segmentation logits like the student.
    Segmentation,
}

// ---------------------------------------------------------------------------
// the model
// ---------------------------------------------------------------------------

pub struct SegModel<T: Scalar> {
    pub cfg: ModelConfig,
    encoder: Encoder<T>,
    student_decoder: Decoder<T>,
    teacher_encoder: Encoder<T>,
    teacher_decoder: Decoder<T>,
    classmates: Vec<Decoder<T>>,
}

impl<T: Scalar> SegModel<T> {
    /// Initialize student, classmates and a frozen teacher copy of the
    /// student. Weight draws happen in a fixed order, so a seeded stream
    /// reproduces the model bit-for-bit.
    pub fn new(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::init(&cfg, rng);
        let student_decoder = Decoder::init(&cfg, rng);
        let classmates = (0..cfg.num_classmates)
            .map(|_| Decoder::init(&cfg, rng))
            .collect();
        let teacher_encoder = encoder.frozen_copy();
        let teacher_decoder = student_decoder.frozen_copy();
        Ok(Self {
            cfg,
            encoder,
            student_decoder,
            teacher_encoder,
            teacher_decoder,
            classmates,
        })
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let shape = x.shape();
        if shape.len() != 4 {
            return Err(Error::shape(format!("expected B×C×H×W input, got {shape:?}")));
        }
        if shape[1] != self.cfg.in_channels {
            return Err(Error::shape(format!(
                "expected {} input channels, got {}",
                self.cfg.in_channels, shape[1]
            )));
        }
        if shape[2] % 8 != 0 || shape[3] % 8 != 0 {
            return Err(Error::shape(format!(
                "spatial dims must be divisible by 8, got {}x{}",
                shape[2], shape[3]
            )));
        }
        Ok(())
    }

    /// Encoder features only.
    pub fn encode(&self, x: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        self.check_input(x)?;
        Ok(self.encoder.forward(x, mode))
    }

    /// Student decoder on precomputed features.
    pub fn decode_student(&self, z: &Tensor<T>, mode: NormMode) -> Tensor<T> {
        self.student_decoder.forward(z, mode)
    }

    /// Student forward: segmentation logits plus the encoder features the
    /// classmates consume.
    pub fn forward_student(&self, x: &Tensor<T>, mode: NormMode) -> Result<(Tensor<T>, Tensor<T>)> {
        let z = self.encode(x, mode)?;
        let logits = self.decode_student(&z, mode);
        Ok((logits, z))
    }

    /// Teacher forward: gradient-free by construction, frozen statistics.
    pub fn forward_teacher(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        Ok(no_grad(|| {
            let z = self.teacher_encoder.forward(x, NormMode::Eval);
            self.teacher_decoder.forward(&z, NormMode::Eval)
        }))
    }

    /// Run every classmate on its own perturbed copy of `z`.
    ///
    /// `perturb_rng = None` disables feature perturbation. Boundary task
    /// output is tanh-bounded into (-1, 1); segmentation task output is raw
    /// logits.
    pub fn forward_classmates(
        &self,
        z: &Tensor<T>,
        mode: NormMode,
        task: ClassmateTask,
        mut perturb_rng: Option<&mut crate::rng::Stream>,
    ) -> Vec<Tensor<T>> {
        self.classmates
            .iter()
            .enumerate()
            .map(|(j, cla)| {
                let zj = match perturb_rng.as_deref_mut() {
                    Some(rng) => perturb_features(
                        z,
                        PerturbKind::for_classmate(j),
                        self.cfg.dropout_p,
                        self.cfg.noise_amplitude,
                        rng,
                    ),
                    None => z.clone(),
                };
                let raw = cla.forward(&zj, mode);
                match task {
                    ClassmateTask::Boundary => raw.tanh(),
                    ClassmateTask::Segmentation => raw,
                }
            })
            .collect()
    }

    /// Named tensors of one parameter group, in a fixed deterministic order.
    pub fn group(&self, group: Group) -> Vec<ParamEntry<T>> {
        let mut out = Vec::new();
        match group {
            Group::Encoder => self.encoder.collect("encoder", &mut out),
            Group::StudentDecoder => self.student_decoder.collect("decoder", &mut out),
            Group::Teacher => {
                self.teacher_encoder.collect("encoder", &mut out);
                self.teacher_decoder.collect("decoder", &mut out);
                for e in &mut out {
                    e.trainable = false;
                }
            }
            Group::Classmates => {
                for (j, cla) in self.classmates.iter().enumerate() {
                    cla.collect(&format!("classmate{j}"), &mut out);
                }
            }
        }
        out
    }

    /// Student parameters: encoder plus student decoder.
    pub fn student_entries(&self) -> Vec<ParamEntry<T>> {
        let mut v = self.group(Group::Encoder);
        v.extend(self.group(Group::StudentDecoder));
        v
    }

    /// Every entry with a group tag, for checkpoints.
    pub fn all_entries(&self) -> Vec<(Group, ParamEntry<T>)> {
        let mut v = Vec::new();
        for g in [Group::Encoder, Group::StudentDecoder, Group::Teacher, Group::Classmates] {
            for e in self.group(g) {
                v.push((g, e));
            }
        }
        v
    }

    /// EMA update `θ_tea ← m·θ_tea + (1-m)·θ_stu` over every mirrored entry
    /// (weights and running statistics). Classmates do not participate.
    pub fn ema_update(&self, m: T) -> Result<()> {
        if m < T::zero() || m > T::one() {
            return Err(Error::invalid_input(format!("EMA momentum {m} outside [0, 1]")));
        }
        let student = self.student_entries();
        let teacher = self.group(Group::Teacher);
        if student.len() != teacher.len() {
            return Err(Error::invalid_input(
                "teacher does not mirror the student parameterization".to_string(),
            ));
        }
        let one = T::one();
        for (s, t) in student.iter().zip(teacher.iter()) {
            if s.name != t.name || s.tensor.shape() != t.tensor.shape() {
                return Err(Error::invalid_input(format!(
                    "teacher mirror violation at {} vs {}",
                    s.name, t.name
                )));
            }
            let sd = s.tensor.data();
            t.tensor.update_data(|td| {
                ndarray::Zip::from(td).and(&*sd).for_each(|tv, &sv| {
                    *tv = m * *tv + (one - m) * sv;
                });
            });
        }
        Ok(())
    }
}

/// SHA-256 over the listed tensors' values (names and order included).
pub fn hash_entries<T: Scalar>(entries: &[ParamEntry<T>]) -> String {
    let mut h = Sha256::new();
    for e in entries {
        h.update(e.name.as_bytes());
        h.update([0u8]);
        for v in e.tensor.data().iter() {
            let f: f64 = (*v).as_();
            h.update(f.to_le_bytes());
        }
    }
    hex_string(&h.finalize())
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
