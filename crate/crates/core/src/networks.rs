//! Generator and discriminator architectures.
//!
//! The generator is a stack of valid 3×3×3 convolutions, each followed by
//! batch normalization and ReLU, closed by a single-channel 1×1×1 head.
//! With eight stages it maps a 32³ patch to the central 16³ estimate. It has
//! no pooling.
//!
//! The discriminator sees only a CT patch: three stages of same-padded
//! 5×5×5 convolution, batch normalization, ReLU and 2×2×2 max pooling, one
//! more convolution with ReLU, then three dense layers ending in a sigmoid.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    load_checkpoint, save_checkpoint, BatchStats, BnMode, Checkpoint, Graph, GraphError, Padding, Parameter, Scalar,
    Tensor, Var,
};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running estimate in the batch-norm update.
pub const BN_MOMENTUM: f64 = 0.9;

pub const FULL_GENERATOR_PLAN: [usize; 8] = [32, 32, 32, 64, 64, 64, 32, 32];
pub const REDUCED_GENERATOR_PLAN: [usize; 8] = [8, 8, 8, 16, 16, 16, 8, 8];
pub const FULL_DISCRIMINATOR_FILTERS: [usize; 4] = [32, 64, 128, 256];
pub const FULL_DISCRIMINATOR_DENSE: [usize; 2] = [512, 128];

const GEN_KERNEL: usize = 3;
const DISC_KERNEL: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("invalid architecture: {0}")]
    Plan(String),
    #[error("network expects {expected} input channels, got {found}")]
    Channels { expected: usize, found: usize },
    #[error("invalid network input: {0}")]
    Input(String),
    #[error("network metadata: {0}")]
    Meta(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Batch-norm evaluation mode of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Output of a forward pass plus the batch statistics of every batch-norm
/// layer (train mode only), for [`GeneratorNet::update_running_stats`].
#[derive(Debug)]
pub struct Forward {
    pub out: Var,
    pub stats: Vec<BatchStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    prefix: String,
}

impl<T: Scalar> BatchNorm<T> {
    fn new(prefix: &str, c: usize) -> Self {
        Self {
            gamma: Parameter::new(format!("{prefix}.gamma"), Tensor::full(vec![c], T::one())),
            beta: Parameter::new(format!("{prefix}.beta"), Tensor::zeros(vec![c])),
            running_mean: vec![T::zero(); c],
            running_var: vec![T::one(); c],
            prefix: prefix.to_string(),
        }
    }

    fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode, stats: &mut Vec<BatchStats>) -> Result<Var, NetError> {
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        let bn_mode = match mode {
            Mode::Train => BnMode::Train { eps: BN_EPS },
            Mode::Infer => BnMode::Infer { running_mean: &self.running_mean, running_var: &self.running_var, eps: BN_EPS },
        };
        let (y, s) = g.batch_norm(x, gamma, beta, bn_mode)?;
        stats.extend(s);
        Ok(y)
    }

    fn update(&mut self, s: &BatchStats) {
        for (r, &b) in self.running_mean.iter_mut().zip(&s.mean) {
            *r = T::of(BN_MOMENTUM * r.f64() + (1.0 - BN_MOMENTUM) * b);
        }
        for (r, &b) in self.running_var.iter_mut().zip(&s.var) {
            *r = T::of(BN_MOMENTUM * r.f64() + (1.0 - BN_MOMENTUM) * b);
        }
    }

    fn cast<U: Scalar>(&self) -> BatchNorm<U> {
        BatchNorm {
            gamma: cast_param(&self.gamma),
            beta: cast_param(&self.beta),
            running_mean: self.running_mean.iter().map(|v| U::of(v.f64())).collect(),
            running_var: self.running_var.iter().map(|v| U::of(v.f64())).collect(),
            prefix: self.prefix.clone(),
        }
    }

    fn store(&self, ck: &mut Checkpoint) {
        store_param(ck, &self.gamma);
        store_param(ck, &self.beta);
        let c = self.running_mean.len();
        let as_f32 = |v: &[T]| Tensor::new(vec![c], v.iter().map(|x| x.as_f32()).collect()).expect("channel count");
        ck.insert(format!("{}.running_mean", self.prefix), as_f32(&self.running_mean));
        ck.insert(format!("{}.running_var", self.prefix), as_f32(&self.running_var));
    }

    fn restore(&mut self, ck: &Checkpoint) -> Result<(), NetError> {
        restore_param(ck, &mut self.gamma)?;
        restore_param(ck, &mut self.beta)?;
        let c = self.running_mean.len();
        let read = |field: &str| -> Result<Vec<T>, NetError> {
            let t = ck.require(&format!("{}.{field}", self.prefix), &[c])?;
            Ok(t.data().iter().map(|&v| T::of_f32(v)).collect())
        };
        self.running_mean = read("running_mean")?;
        self.running_var = read("running_var")?;
        Ok(())
    }
}

/// A convolution with optional batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    pub bn: Option<BatchNorm<T>>,
    pub padding: Padding,
}

impl<T: Scalar> ConvLayer<T> {
    fn new(prefix: &str, cin: usize, cout: usize, k: usize, padding: Padding, bn: bool, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = cin * k * k * k;
        Self {
            weight: Parameter::new(format!("{prefix}.weight"), he_normal(vec![cout, cin, k, k, k], fan_in, rng)),
            bias: Parameter::new(format!("{prefix}.bias"), Tensor::zeros(vec![cout])),
            bn: bn.then(|| BatchNorm::new(&format!("{prefix}.bn"), cout)),
            padding,
        }
    }

    pub fn cin(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn cout(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value().shape()[2]
    }

    /// conv → (batch norm) → relu when `relu` is set.
    fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode, relu: bool, stats: &mut Vec<BatchStats>) -> Result<Var, NetError> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let mut h = g.conv3d(x, w, b, self.padding)?;
        if let Some(bn) = &self.bn {
            h = bn.forward(g, h, mode, stats)?;
        }
        if relu {
            h = g.relu(h)?;
        }
        Ok(h)
    }

    fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = vec![&self.weight, &self.bias];
        if let Some(bn) = &self.bn {
            v.extend([&bn.gamma, &bn.beta]);
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = vec![&mut self.weight, &mut self.bias];
        if let Some(bn) = &mut self.bn {
            v.extend([&mut bn.gamma, &mut bn.beta]);
        }
        v
    }

    fn cast<U: Scalar>(&self) -> ConvLayer<U> {
        ConvLayer {
            weight: cast_param(&self.weight),
            bias: cast_param(&self.bias),
            bn: self.bn.as_ref().map(BatchNorm::cast),
            padding: self.padding,
        }
    }

    fn store(&self, ck: &mut Checkpoint) {
        store_param(ck, &self.weight);
        store_param(ck, &self.bias);
        if let Some(bn) = &self.bn {
            bn.store(ck);
        }
    }

    fn restore(&mut self, ck: &Checkpoint) -> Result<(), NetError> {
        restore_param(ck, &mut self.weight)?;
        restore_param(ck, &mut self.bias)?;
        if let Some(bn) = &mut self.bn {
            bn.restore(ck)?;
        }
        Ok(())
    }

    fn describe(&self, pool: bool, relu: bool) -> String {
        let pad = match self.padding {
            Padding::Valid => "valid",
            Padding::Same => "same",
        };
        let k = self.kernel();
        let mut s = format!("conv{k}x{k}x{k}({}->{},{pad})", self.cin(), self.cout());
        if self.bn.is_some() {
            s.push_str("+bn");
        }
        if relu {
            s.push_str("+relu");
        }
        if pool {
            s.push_str("+maxpool2");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

impl<T: Scalar> DenseLayer<T> {
    fn new(prefix: &str, fin: usize, fout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Parameter::new(format!("{prefix}.weight"), he_normal(vec![fout, fin], fin, rng)),
            bias: Parameter::new(format!("{prefix}.bias"), Tensor::zeros(vec![fout])),
        }
    }

    fn cast<U: Scalar>(&self) -> DenseLayer<U> {
        DenseLayer { weight: cast_param(&self.weight), bias: cast_param(&self.bias) }
    }
}

fn he_normal<T: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(normal.sample(rng) as f32 as f64)).collect();
    Tensor::new(shape, data).expect("shape matches")
}

fn cast_param<T: Scalar, U: Scalar>(p: &Parameter<T>) -> Parameter<U> {
    let mut q = Parameter::new(p.name(), p.value().cast());
    if p.is_frozen() {
        q.freeze();
    }
    q
}

fn store_param<T: Scalar>(ck: &mut Checkpoint, p: &Parameter<T>) {
    ck.insert(p.name(), p.value().cast());
}

fn restore_param<T: Scalar>(ck: &Checkpoint, p: &mut Parameter<T>) -> Result<(), NetError> {
    let t = ck.require(p.name(), p.value().shape())?;
    *p.value_mut() = t.cast();
    Ok(())
}

fn check_input<T: Scalar>(g: &Graph<T>, x: Var, channels: usize, min: usize) -> Result<(), NetError> {
    let s = g.shape(x);
    if s.len() != 5 {
        return Err(NetError::Input(format!("expected [N, C, X, Y, Z], got {s:?}")));
    }
    if s[1] != channels {
        return Err(NetError::Channels { expected: channels, found: s[1] });
    }
    if s[2..].iter().any(|&d| d < min) {
        return Err(NetError::Input(format!("spatial dims {:?} below the minimum {min}", &s[2..])));
    }
    Ok(())
}

/// Sidecar metadata sufficient to rebuild a network before loading its
/// weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetMeta {
    pub kind: String,
    pub in_channels: usize,
    pub channel_plan: Vec<usize>,
    #[serde(default)]
    pub dense_plan: Vec<usize>,
    pub input_size: usize,
    pub output_size: usize,
    pub stages: Vec<String>,
}

impl NetMeta {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, NetError> {
        serde_json::from_str(s).map_err(|e| NetError::Meta(e.to_string()))
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), NetError> {
    std::fs::write(path, text).map_err(|e| GraphError::Io(format!("{}: {e}", path.display())).into())
}

fn read_text(path: &Path) -> Result<String, NetError> {
    std::fs::read_to_string(path).map_err(|e| GraphError::Io(format!("{}: {e}", path.display())).into())
}

/// The patch generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorNet<T = f32> {
    in_channels: usize,
    input_size: usize,
    stages: Vec<ConvLayer<T>>,
    head: ConvLayer<T>,
}

impl<T: Scalar> GeneratorNet<T> {
    /// `plan` lists the filters of each stage; every stage shrinks each axis
    /// by 2, so the plan length must be `(input_size - output_size) / 2`.
    pub fn new(in_channels: usize, plan: &[usize], input_size: usize, output_size: usize, seed: u64) -> Result<Self, NetError> {
        if !(1..=2).contains(&in_channels) {
            return Err(NetError::Plan(format!("in_channels must be 1 or 2, got {in_channels}")));
        }
        if plan.is_empty() || plan.contains(&0) {
            return Err(NetError::Plan(format!("channel plan {plan:?} must be non-empty and positive")));
        }
        let shrink = (GEN_KERNEL - 1) * plan.len();
        if input_size != output_size + shrink {
            return Err(NetError::Plan(format!(
                "{} valid {GEN_KERNEL}³ stages map {input_size}³ to {}³, not {output_size}³",
                plan.len(),
                input_size as isize - shrink as isize
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = in_channels;
        let mut stages = Vec::with_capacity(plan.len());
        for (i, &cout) in plan.iter().enumerate() {
            stages.push(ConvLayer::new(&format!("gen.conv{i}"), cin, cout, GEN_KERNEL, Padding::Valid, true, &mut rng));
            cin = cout;
        }
        let head = ConvLayer::new("gen.head", cin, 1, 1, Padding::Valid, false, &mut rng);
        Ok(Self { in_channels, input_size, stages, head })
    }

    /// The full-size architecture on 32³ → 16³ patches.
    pub fn full(in_channels: usize, seed: u64) -> Result<Self, NetError> {
        Self::new(in_channels, &FULL_GENERATOR_PLAN, 32, 16, seed)
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn output_size(&self) -> usize {
        self.input_size - (GEN_KERNEL - 1) * self.stages.len()
    }

    pub fn plan(&self) -> Vec<usize> {
        self.stages.iter().map(ConvLayer::cout).collect()
    }

    pub fn stages(&self) -> &[ConvLayer<T>] {
        &self.stages
    }

    pub fn stages_mut(&mut self) -> &mut [ConvLayer<T>] {
        &mut self.stages
    }

    pub fn head(&self) -> &ConvLayer<T> {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut ConvLayer<T> {
        &mut self.head
    }

    /// Zeroes the output head, making the network the zero function.
    pub fn zero_head(&mut self) {
        self.head.weight.value_mut().data_mut().fill(T::zero());
        self.head.bias.value_mut().data_mut().fill(T::zero());
    }

    /// `x: [N, in_channels, X, Y, Z]` → `[N, 1, X - s, Y - s, Z - s]` with
    /// `s = 2 · stages`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Forward, NetError> {
        check_input(g, x, self.in_channels, (GEN_KERNEL - 1) * self.stages.len() + 1)?;
        let mut stats = Vec::new();
        let mut h = x;
        for st in &self.stages {
            h = st.forward(g, h, mode, true, &mut stats)?;
        }
        let out = self.head.forward(g, h, mode, false, &mut stats)?;
        Ok(Forward { out, stats })
    }

    /// Folds per-layer batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        for (bn, s) in self.stages.iter_mut().filter_map(|s| s.bn.as_mut()).zip(stats) {
            bn.update(s);
        }
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        self.stages.iter().chain([&self.head]).flat_map(ConvLayer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.stages.iter_mut().chain([&mut self.head]).flat_map(ConvLayer::params_mut).collect()
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value().len()).sum()
    }

    pub fn freeze(&mut self) {
        self.params_mut().into_iter().for_each(Parameter::freeze);
    }

    pub fn unfreeze(&mut self) {
        self.params_mut().into_iter().for_each(Parameter::unfreeze);
    }

    pub fn is_frozen(&self) -> bool {
        self.params().iter().all(|p| p.is_frozen())
    }

    pub fn cast<U: Scalar>(&self) -> GeneratorNet<U> {
        GeneratorNet {
            in_channels: self.in_channels,
            input_size: self.input_size,
            stages: self.stages.iter().map(ConvLayer::cast).collect(),
            head: self.head.cast(),
        }
    }

    pub fn meta(&self) -> NetMeta {
        let mut stages: Vec<String> = self.stages.iter().map(|s| s.describe(false, true)).collect();
        stages.push(self.head.describe(false, false));
        NetMeta {
            kind: "generator".into(),
            in_channels: self.in_channels,
            channel_plan: self.plan(),
            dense_plan: Vec::new(),
            input_size: self.input_size,
            output_size: self.output_size(),
            stages,
        }
    }

    pub fn from_meta(meta: &NetMeta) -> Result<Self, NetError> {
        if meta.kind != "generator" {
            return Err(NetError::Meta(format!("expected a generator, found {}", meta.kind)));
        }
        Self::new(meta.in_channels, &meta.channel_plan, meta.input_size, meta.output_size, 0)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for s in self.stages.iter().chain([&self.head]) {
            s.store(&mut ck);
        }
        ck
    }

    pub fn load_weights(&mut self, ck: &Checkpoint) -> Result<(), NetError> {
        for s in self.stages.iter_mut().chain([&mut self.head]) {
            s.restore(ck)?;
        }
        Ok(())
    }

    pub fn from_checkpoint(meta: &NetMeta, ck: &Checkpoint) -> Result<Self, NetError> {
        let mut net = Self::from_meta(meta)?;
        net.load_weights(ck)?;
        Ok(net)
    }

    pub fn save(&self, ckpt: &Path, meta: &Path) -> Result<(), NetError> {
        save_checkpoint(ckpt, &self.to_checkpoint())?;
        write_text(meta, &self.meta().to_json())
    }

    pub fn load(ckpt: &Path, meta: &Path) -> Result<Self, NetError> {
        let m = NetMeta::from_json(&read_text(meta)?)?;
        Self::from_checkpoint(&m, &load_checkpoint(ckpt)?)
    }
}

/// The CT-patch discriminator.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorNet<T = f32> {
    input_size: usize,
    convs: Vec<ConvLayer<T>>,
    dense: Vec<DenseLayer<T>>,
}

impl<T: Scalar> DiscriminatorNet<T> {
    /// `filters` has four entries (three pooled stages plus the final
    /// convolution); `dense` lists the hidden dense widths before the
    /// single-output layer. `input_size` must be divisible by 8.
    pub fn new(filters: &[usize], dense: &[usize], input_size: usize, seed: u64) -> Result<Self, NetError> {
        if filters.len() != 4 || filters.contains(&0) {
            return Err(NetError::Plan(format!("discriminator needs 4 positive filter counts, got {filters:?}")));
        }
        if dense.contains(&0) {
            return Err(NetError::Plan(format!("dense widths must be positive, got {dense:?}")));
        }
        if input_size == 0 || !input_size.is_multiple_of(8) {
            return Err(NetError::Plan(format!("discriminator input {input_size}³ cannot be pooled three times")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::with_capacity(4);
        let mut cin = 1;
        for (i, &cout) in filters.iter().enumerate() {
            convs.push(ConvLayer::new(&format!("disc.conv{i}"), cin, cout, DISC_KERNEL, Padding::Same, i < 3, &mut rng));
            cin = cout;
        }
        let mut fin = filters[3] * (input_size / 8).pow(3);
        let mut layers = Vec::with_capacity(dense.len() + 1);
        for (i, &fout) in dense.iter().chain([&1]).enumerate() {
            layers.push(DenseLayer::new(&format!("disc.fc{i}"), fin, fout, &mut rng));
            fin = fout;
        }
        Ok(Self { input_size, convs, dense: layers })
    }

    /// The full-size architecture on 16³ CT patches.
    pub fn full(seed: u64) -> Result<Self, NetError> {
        Self::new(&FULL_DISCRIMINATOR_FILTERS, &FULL_DISCRIMINATOR_DENSE, 16, seed)
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn filters(&self) -> Vec<usize> {
        self.convs.iter().map(ConvLayer::cout).collect()
    }

    pub fn dense_plan(&self) -> Vec<usize> {
        self.dense[..self.dense.len() - 1].iter().map(|d| d.weight.value().shape()[0]).collect()
    }

    /// Width of the flattened feature vector entering the dense head.
    pub fn flatten_size(&self) -> usize {
        self.dense[0].weight.value().shape()[1]
    }

    /// `x: [N, 1, S, S, S]` → `[N, 1]` probabilities.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Forward, NetError> {
        check_input(g, x, 1, self.input_size)?;
        let s = g.shape(x);
        if s[2..].iter().any(|&d| d != self.input_size) {
            return Err(NetError::Input(format!("discriminator expects {}³ patches, got {:?}", self.input_size, &s[2..])));
        }
        let n = s[0];
        let mut stats = Vec::new();
        let mut h = x;
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(g, h, mode, true, &mut stats)?;
            if i < 3 {
                h = g.max_pool(h)?;
            }
        }
        let flat = self.flatten_size();
        h = g.reshape(h, vec![n, flat])?;
        let last = self.dense.len() - 1;
        for (i, d) in self.dense.iter().enumerate() {
            let w = g.param(&d.weight);
            let b = g.param(&d.bias);
            h = g.dense(h, w, b)?;
            h = if i < last { g.relu(h)? } else { g.sigmoid(h)? };
        }
        Ok(Forward { out: h, stats })
    }

    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        for (bn, s) in self.convs.iter_mut().filter_map(|c| c.bn.as_mut()).zip(stats) {
            bn.update(s);
        }
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut v: Vec<&Parameter<T>> = self.convs.iter().flat_map(ConvLayer::params).collect();
        v.extend(self.dense.iter().flat_map(|d| [&d.weight, &d.bias]));
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v: Vec<&mut Parameter<T>> = self.convs.iter_mut().flat_map(ConvLayer::params_mut).collect();
        v.extend(self.dense.iter_mut().flat_map(|d| [&mut d.weight, &mut d.bias]));
        v
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value().len()).sum()
    }

    pub fn freeze(&mut self) {
        self.params_mut().into_iter().for_each(Parameter::freeze);
    }

    pub fn unfreeze(&mut self) {
        self.params_mut().into_iter().for_each(Parameter::unfreeze);
    }

    pub fn is_frozen(&self) -> bool {
        self.params().iter().all(|p| p.is_frozen())
    }

    pub fn cast<U: Scalar>(&self) -> DiscriminatorNet<U> {
        DiscriminatorNet {
            input_size: self.input_size,
            convs: self.convs.iter().map(ConvLayer::cast).collect(),
            dense: self.dense.iter().map(DenseLayer::cast).collect(),
        }
    }

    pub fn meta(&self) -> NetMeta {
        let mut stages: Vec<String> = self.convs.iter().enumerate().map(|(i, c)| c.describe(i < 3, true)).collect();
        let last = self.dense.len() - 1;
        for (i, d) in self.dense.iter().enumerate() {
            let s = d.weight.value().shape();
            stages.push(format!("dense({}->{})+{}", s[1], s[0], if i < last { "relu" } else { "sigmoid" }));
        }
        NetMeta {
            kind: "discriminator".into(),
            in_channels: 1,
            channel_plan: self.filters(),
            dense_plan: self.dense_plan(),
            input_size: self.input_size,
            output_size: 1,
            stages,
        }
    }

    pub fn from_meta(meta: &NetMeta) -> Result<Self, NetError> {
        if meta.kind != "discriminator" {
            return Err(NetError::Meta(format!("expected a discriminator, found {}", meta.kind)));
        }
        Self::new(&meta.channel_plan, &meta.dense_plan, meta.input_size, 0)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for c in &self.convs {
            c.store(&mut ck);
        }
        for d in &self.dense {
            store_param(&mut ck, &d.weight);
            store_param(&mut ck, &d.bias);
        }
        ck
    }

    pub fn load_weights(&mut self, ck: &Checkpoint) -> Result<(), NetError> {
        for c in &mut self.convs {
            c.restore(ck)?;
        }
        for d in &mut self.dense {
            restore_param(ck, &mut d.weight)?;
            restore_param(ck, &mut d.bias)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_bn_count(cin: usize, cout: usize, k: usize) -> usize {
        cout * cin * k * k * k + cout + 2 * cout
    }

    #[test]
    fn rejects_unreachable_plan() {
        assert!(matches!(GeneratorNet::<f32>::new(1, &[8; 7], 32, 16, 0), Err(NetError::Plan(_))));
        assert!(matches!(GeneratorNet::<f32>::new(1, &[], 32, 32, 0), Err(NetError::Plan(_))));
        assert!(matches!(GeneratorNet::<f32>::new(3, &[8; 8], 32, 16, 0), Err(NetError::Plan(_))));
    }

    #[test]
    fn full_generator_parameter_count() {
        let net = GeneratorNet::<f32>::full(1, 0).unwrap();
        let mut expected = 0;
        let mut cin = 1;
        for &c in &FULL_GENERATOR_PLAN {
            expected += conv_bn_count(cin, c, 3);
            cin = c;
        }
        expected += cin + 1;
        assert_eq!(net.param_count(), expected);
        assert_eq!(net.output_size(), 16);
    }

    #[test]
    fn full_discriminator_flatten() {
        let d = DiscriminatorNet::<f32>::full(0).unwrap();
        assert_eq!(d.flatten_size(), 256 * 8);
        assert_eq!(d.dense_plan(), vec![512, 128]);
        assert!(d.meta().stages[3].starts_with("conv5x5x5(128->256,same)+relu"));
    }

    #[test]
    fn zero_head_gives_zero_output() {
        let mut net = GeneratorNet::<f64>::new(1, &[2, 2], 8, 4, 3).unwrap();
        net.zero_head();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![2, 1, 8, 8, 8]));
        let f = net.forward(&mut g, x, Mode::Train).unwrap();
        assert_eq!(g.shape(f.out), &[2, 1, 4, 4, 4]);
        assert!(g.value(f.out).data().iter().all(|&v| v == 0.0));
        let bad = g.constant(Tensor::zeros(vec![1, 2, 8, 8, 8]));
        assert_eq!(net.forward(&mut g, bad, Mode::Infer).unwrap_err(), NetError::Channels { expected: 1, found: 2 });
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut net = GeneratorNet::<f32>::new(2, &[3, 2], 9, 5, 11).unwrap();
        net.update_running_stats(&[
            BatchStats { mean: vec![1.0, 2.0, 3.0], var: vec![0.5, 0.5, 0.5] },
            BatchStats { mean: vec![-1.0, 0.0], var: vec![2.0, 4.0] },
        ]);
        let back = GeneratorNet::<f32>::from_checkpoint(&net.meta(), &net.to_checkpoint()).unwrap();
        assert_eq!(back, net);
        let meta = NetMeta::from_json(&net.meta().to_json()).unwrap();
        assert_eq!(meta, net.meta());
    }

    #[test]
    fn freeze_toggles_every_param() {
        let mut d = DiscriminatorNet::<f32>::new(&[2, 2, 2, 2], &[4], 8, 0).unwrap();
        d.freeze();
        assert!(d.is_frozen());
        d.unfreeze();
        assert!(d.params().iter().all(|p| !p.is_frozen()));
    }
}
