//! Student, decoder and classifier networks over latent tensors, the
//! channel-wise simplex projection and one-hot sampling.
//!
//! All three networks are stride-1 so spatial resolution is preserved end to
//! end; the classifier's last convolution therefore yields activation maps at
//! the latent resolution.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ConvStack, Grads, Linear, Parameterized, StackCache};
use crate::seed::{self, Rng};
use crate::tensor::{Dims, LatentTensor};

pub const SIMPLEX_TOL: f64 = 1e-5;

/// An `(H, W, C')` tensor whose every spatial coordinate lies on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseLatent(LatentTensor);

impl SparseLatent {
    /// Validates entries in `[0, 1]` and channel sums within [`SIMPLEX_TOL`].
    pub fn new(t: LatentTensor) -> Result<Self> {
        let d = t.dims();
        for i in 0..d.h {
            for j in 0..d.w {
                let px = t.pixel(i, j);
                if px.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::Invalid(format!(
                        "sparse entry outside [0, 1] at ({i}, {j})"
                    )));
                }
                let s: f64 = px.iter().sum();
                if (s - 1.0).abs() > SIMPLEX_TOL {
                    return Err(Error::Invalid(format!(
                        "channel sum {s} at ({i}, {j}) is not 1"
                    )));
                }
            }
        }
        Ok(SparseLatent(t))
    }

    pub fn dims(&self) -> Dims {
        self.0.dims()
    }

    pub fn tensor(&self) -> &LatentTensor {
        &self.0
    }

    pub fn into_tensor(self) -> LatentTensor {
        self.0
    }
}

impl AsRef<LatentTensor> for SparseLatent {
    fn as_ref(&self) -> &LatentTensor {
        &self.0
    }
}

/// One selected channel per spatial coordinate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinarySparse {
    dims: Dims,
    choice: Vec<usize>,
}

impl BinarySparse {
    pub fn new(dims: Dims, choice: Vec<usize>) -> Result<Self> {
        if choice.len() != dims.spatial() {
            return Err(Error::Shape(format!(
                "{} choices for {} coordinates",
                choice.len(),
                dims.spatial()
            )));
        }
        if let Some(&c) = choice.iter().find(|&&c| c >= dims.c) {
            return Err(Error::Invalid(format!(
                "channel {c} out of range {}",
                dims.c
            )));
        }
        Ok(BinarySparse { dims, choice })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// Selected channel per coordinate, row-major.
    pub fn choices(&self) -> &[usize] {
        &self.choice
    }

    pub fn to_dense(&self) -> LatentTensor {
        let mut t = LatentTensor::zeros(self.dims);
        for (p, &k) in self.choice.iter().enumerate() {
            t.data_mut()[p * self.dims.c + k] = 1.0;
        }
        t
    }
}

/// Softmax over the channel axis at every spatial coordinate.
pub fn channelwise_softmax(logits: &LatentTensor) -> Result<SparseLatent> {
    if !logits.is_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let mut out = logits.clone();
    let c = logits.dims().c;
    for px in out.data_mut().chunks_exact_mut(c) {
        softmax_in_place(px);
    }
    Ok(SparseLatent(out))
}

fn softmax_in_place(px: &mut [f64]) {
    let max = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in px.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in px.iter_mut() {
        *v /= sum;
    }
}

/// Backward of the channel-wise softmax given its output `p`.
pub fn softmax_backward(p: &[f64], dp: &[f64], channels: usize) -> Vec<f64> {
    let mut out = vec![0.0; p.len()];
    for ((o, pp), dd) in out
        .chunks_exact_mut(channels)
        .zip(p.chunks_exact(channels))
        .zip(dp.chunks_exact(channels))
    {
        let dot: f64 = pp.iter().zip(dd).map(|(a, b)| a * b).sum();
        for k in 0..channels {
            o[k] = pp[k] * (dd[k] - dot);
        }
    }
    out
}

/// Draws one channel per coordinate with probability `p[i, j, k]`.
pub fn sample_onehot(p: &SparseLatent, seed: u64) -> BinarySparse {
    sample_onehot_with(p, 1.0, &mut seed::rng(seed))
}

/// Like [`sample_onehot`] with a temperature: probabilities are raised to
/// `1 / temperature` and renormalized before sampling.
pub fn sample_onehot_with(p: &SparseLatent, temperature: f64, rng: &mut Rng) -> BinarySparse {
    let dims = p.dims();
    let mut choice = Vec::with_capacity(dims.spatial());
    let mut tempered = vec![0.0; dims.c];
    for px in p.tensor().data().chunks_exact(dims.c) {
        let probs: &[f64] = if temperature == 1.0 {
            px
        } else {
            let inv = 1.0 / temperature;
            for (t, &v) in tempered.iter_mut().zip(px) {
                *t = v.powf(inv);
            }
            let s: f64 = tempered.iter().sum();
            tempered.iter_mut().for_each(|t| *t /= s);
            &tempered
        };
        let u: f64 = rng.random();
        let total: f64 = probs.iter().sum();
        let target = u * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (k, &v) in probs.iter().enumerate() {
            acc += v;
            if target < acc {
                pick = Some(k);
                break;
            }
        }
        // rounding can leave target == total; fall back to the last
        // channel with mass
        let k = pick.unwrap_or_else(|| probs.iter().rposition(|&v| v > 0.0).unwrap_or(0));
        choice.push(k);
    }
    BinarySparse { dims, choice }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "student-conv3")]
    Student,
    #[serde(rename = "decoder-conv3")]
    Decoder,
    #[serde(rename = "classifier-conv2-gap-linear")]
    Classifier,
}

/// Dimensions that pin down every parameter shape of an architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDims {
    pub h: usize,
    pub w: usize,
    pub in_channels: usize,
    pub hidden: usize,
    /// `C'` for the student, `C` for the decoder, `K` for the classifier.
    pub out_channels: usize,
}

/// Named parameter tensors of one network plus its architecture tag.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub architecture: Architecture,
    pub dims: ArchDims,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl ModelParams {
    fn expected_shapes(architecture: Architecture, d: &ArchDims) -> Vec<(String, Vec<usize>)> {
        let convs: Vec<(usize, usize)> = match architecture {
            Architecture::Student | Architecture::Decoder => vec![
                (d.in_channels, d.hidden),
                (d.hidden, d.hidden),
                (d.hidden, d.out_channels),
            ],
            Architecture::Classifier => vec![(d.in_channels, d.hidden), (d.hidden, d.hidden)],
        };
        let mut shapes = Vec::new();
        for (l, (cin, cout)) in convs.into_iter().enumerate() {
            shapes.push((format!("conv{l}.weight"), vec![3, 3, cin, cout]));
            shapes.push((format!("conv{l}.bias"), vec![cout]));
        }
        if architecture == Architecture::Classifier {
            shapes.push(("head.weight".into(), vec![d.hidden, d.out_channels]));
            shapes.push(("head.bias".into(), vec![d.out_channels]));
        }
        shapes
    }

    pub fn validate(&self) -> Result<()> {
        let expected = Self::expected_shapes(self.architecture, &self.dims);
        if expected.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "{:?} expects {} tensors, found {}",
                self.architecture,
                expected.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in expected {
            let (got, data) = self
                .tensors
                .get(&name)
                .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))?;
            if *got != shape || data.len() != shape.iter().product::<usize>() {
                return Err(Error::Shape(format!(
                    "parameter {name}: expected {shape:?}, found {got:?}"
                )));
            }
        }
        Ok(())
    }

    fn take(&self, name: &str) -> Vec<f64> {
        self.tensors[name].1.clone()
    }
}

fn stack_to_params(stack: &ConvStack, tensors: &mut BTreeMap<String, (Vec<usize>, Vec<f64>)>) {
    for (l, layer) in stack.layers.iter().enumerate() {
        tensors.insert(
            format!("conv{l}.weight"),
            (layer.weight_shape(), layer.weight.clone()),
        );
        tensors.insert(
            format!("conv{l}.bias"),
            (vec![layer.cout], layer.bias.clone()),
        );
    }
}

fn stack_from_params(p: &ModelParams, template: &mut ConvStack) {
    for (l, layer) in template.layers.iter_mut().enumerate() {
        layer.weight = p.take(&format!("conv{l}.weight"));
        layer.bias = p.take(&format!("conv{l}.bias"));
    }
}

/// Maps a base latent `(H, W, C)` to a sparse latent `(H, W, C')`.
#[derive(Debug, Clone, PartialEq)]
pub struct Student {
    dims: ArchDims,
    stack: ConvStack,
}

/// Cached forward state of the student for backprop.
#[derive(Debug, Clone)]
pub struct StudentTrace {
    cache: StackCache,
    logits: Vec<f64>,
    pub probs: SparseLatent,
}

impl Student {
    pub fn init(dims: ArchDims, rng: &mut Rng) -> Self {
        let stack = ConvStack::init(
            &[
                dims.in_channels,
                dims.hidden,
                dims.hidden,
                dims.out_channels,
            ],
            false,
            rng,
        );
        Student { dims, stack }
    }

    pub fn arch_dims(&self) -> ArchDims {
        self.dims
    }

    pub fn sparse_dims(&self) -> Dims {
        Dims::new(self.dims.h, self.dims.w, self.dims.out_channels)
    }

    fn check_input(&self, z: &LatentTensor) -> Result<()> {
        z.check_dims(
            Dims::new(self.dims.h, self.dims.w, self.dims.in_channels),
            "student input",
        )
    }

    pub fn logits(&self, z: &LatentTensor) -> Result<LatentTensor> {
        self.check_input(z)?;
        let out = self.stack.forward(z.data(), self.dims.h, self.dims.w);
        LatentTensor::new(self.sparse_dims(), out)
    }

    pub fn forward(&self, z: &LatentTensor) -> Result<SparseLatent> {
        channelwise_softmax(&self.logits(z)?)
    }

    pub fn forward_traced(&self, z: &LatentTensor) -> Result<StudentTrace> {
        self.check_input(z)?;
        let (logits, cache) = self
            .stack
            .forward_cached(z.data(), self.dims.h, self.dims.w);
        let probs = channelwise_softmax(&LatentTensor::new(self.sparse_dims(), logits.clone())?)?;
        Ok(StudentTrace {
            cache,
            logits,
            probs,
        })
    }

    /// Accumulates parameter gradients given `dL/dprobs`.
    pub fn backward(&self, trace: &StudentTrace, dprobs: &[f64], grads: &mut Grads) {
        let dlogits = softmax_backward(trace.probs.tensor().data(), dprobs, self.dims.out_channels);
        self.stack
            .backward(&trace.cache, &trace.logits, &dlogits, grads);
    }

    pub fn to_params(&self) -> ModelParams {
        let mut tensors = BTreeMap::new();
        stack_to_params(&self.stack, &mut tensors);
        ModelParams {
            architecture: Architecture::Student,
            dims: self.dims,
            tensors,
        }
    }

    pub fn from_params(p: &ModelParams) -> Result<Self> {
        expect_arch(p, Architecture::Student)?;
        let mut s = Student::init(p.dims, &mut seed::rng(0));
        stack_from_params(p, &mut s.stack);
        Ok(s)
    }
}

impl Parameterized for Student {
    fn params(&self) -> Vec<&Vec<f64>> {
        self.stack.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.stack.params_mut()
    }
}

fn expect_arch(p: &ModelParams, arch: Architecture) -> Result<()> {
    if p.architecture != arch {
        return Err(Error::Shape(format!(
            "expected {arch:?} parameters, found {:?}",
            p.architecture
        )));
    }
    p.validate()
}

/// Maps a sparse latent `(H, W, C')` back to the base latent `(H, W, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    dims: ArchDims,
    stack: ConvStack,
}

#[derive(Debug, Clone)]
pub struct DecoderTrace {
    cache: StackCache,
    pub output: LatentTensor,
}

impl Decoder {
    pub fn init(dims: ArchDims, rng: &mut Rng) -> Self {
        let stack = ConvStack::init(
            &[
                dims.in_channels,
                dims.hidden,
                dims.hidden,
                dims.out_channels,
            ],
            false,
            rng,
        );
        Decoder { dims, stack }
    }

    /// Decoder made of a given stack, for tests and hand-built doubles.
    pub fn from_stack(h: usize, w: usize, stack: ConvStack) -> Self {
        let dims = ArchDims {
            h,
            w,
            in_channels: stack.in_channels(),
            hidden: stack.layers.first().map(|l| l.cout).unwrap_or(0),
            out_channels: stack.out_channels(),
        };
        Decoder { dims, stack }
    }

    pub fn arch_dims(&self) -> ArchDims {
        self.dims
    }

    fn check_input(&self, zs: &LatentTensor) -> Result<()> {
        zs.check_dims(
            Dims::new(self.dims.h, self.dims.w, self.dims.in_channels),
            "decoder input",
        )
    }

    /// Accepts any sparse-shaped tensor, including fused vectors.
    pub fn forward(&self, zs: &LatentTensor) -> Result<LatentTensor> {
        self.check_input(zs)?;
        let out = self.stack.forward(zs.data(), self.dims.h, self.dims.w);
        LatentTensor::new(
            Dims::new(self.dims.h, self.dims.w, self.dims.out_channels),
            out,
        )
    }

    pub fn forward_traced(&self, zs: &LatentTensor) -> Result<DecoderTrace> {
        self.check_input(zs)?;
        let (out, cache) = self
            .stack
            .forward_cached(zs.data(), self.dims.h, self.dims.w);
        let output = LatentTensor::new(
            Dims::new(self.dims.h, self.dims.w, self.dims.out_channels),
            out,
        )?;
        Ok(DecoderTrace { cache, output })
    }

    /// Accumulates gradients and returns `dL/dinput`.
    pub fn backward(&self, trace: &DecoderTrace, dout: &[f64], grads: &mut Grads) -> Vec<f64> {
        self.stack
            .backward(&trace.cache, trace.output.data(), dout, grads)
    }

    pub fn to_params(&self) -> ModelParams {
        let mut tensors = BTreeMap::new();
        stack_to_params(&self.stack, &mut tensors);
        ModelParams {
            architecture: Architecture::Decoder,
            dims: self.dims,
            tensors,
        }
    }

    pub fn from_params(p: &ModelParams) -> Result<Self> {
        expect_arch(p, Architecture::Decoder)?;
        let mut d = Decoder::init(p.dims, &mut seed::rng(0));
        stack_from_params(p, &mut d.stack);
        Ok(d)
    }
}

impl Parameterized for Decoder {
    fn params(&self) -> Vec<&Vec<f64>> {
        self.stack.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.stack.params_mut()
    }
}

/// Per-class sigmoid scores and the last convolution's activations.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    pub scores: Vec<f64>,
    /// Post-ReLU activations `A` of shape `(H, W, C_a)`.
    pub activations: LatentTensor,
}

impl ClassScores {
    /// Globally average-pooled activations.
    pub fn pooled(&self) -> Vec<f64> {
        global_average_pool(&self.activations)
    }
}

pub fn global_average_pool(a: &LatentTensor) -> Vec<f64> {
    let d = a.dims();
    let mut pooled = vec![0.0; d.c];
    for px in a.data().chunks_exact(d.c) {
        for (p, v) in pooled.iter_mut().zip(px) {
            *p += v;
        }
    }
    let n = d.spatial() as f64;
    pooled.iter_mut().for_each(|p| *p /= n);
    pooled
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Two convolutions, global average pool, linear head, per-class sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    dims: ArchDims,
    stack: ConvStack,
    head: Linear,
}

#[derive(Debug, Clone)]
pub struct ClassifierTrace {
    cache: StackCache,
    pooled: Vec<f64>,
    pub output: ClassScores,
}

impl Classifier {
    pub fn init(dims: ArchDims, rng: &mut Rng) -> Self {
        let stack = ConvStack::init(&[dims.in_channels, dims.hidden, dims.hidden], true, rng);
        let head = Linear::init(dims.hidden, dims.out_channels, rng);
        Classifier { dims, stack, head }
    }

    pub fn arch_dims(&self) -> ArchDims {
        self.dims
    }

    pub fn num_classes(&self) -> usize {
        self.dims.out_channels
    }

    /// Head weights feeding class `c`, one per activation channel.
    pub fn head_weights(&self, c: usize) -> Vec<f64> {
        (0..self.head.fin)
            .map(|i| self.head.weight[i * self.head.fout + c])
            .collect()
    }

    pub fn head_mut(&mut self) -> &mut Linear {
        &mut self.head
    }

    fn check_input(&self, x: &LatentTensor) -> Result<()> {
        x.check_dims(
            Dims::new(self.dims.h, self.dims.w, self.dims.in_channels),
            "classifier input",
        )
    }

    pub fn forward(&self, x: &LatentTensor) -> Result<ClassScores> {
        Ok(self.forward_traced(x)?.output)
    }

    pub fn forward_traced(&self, x: &LatentTensor) -> Result<ClassifierTrace> {
        self.check_input(x)?;
        let (act, cache) = self
            .stack
            .forward_cached(x.data(), self.dims.h, self.dims.w);
        let activations =
            LatentTensor::new(Dims::new(self.dims.h, self.dims.w, self.dims.hidden), act)?;
        let pooled = global_average_pool(&activations);
        let scores = self
            .head
            .forward(&pooled)
            .into_iter()
            .map(sigmoid)
            .collect();
        Ok(ClassifierTrace {
            cache,
            pooled,
            output: ClassScores {
                scores,
                activations,
            },
        })
    }

    /// Accumulates gradients given `dL/dlogits` and returns `dL/dinput`.
    pub fn backward(
        &self,
        trace: &ClassifierTrace,
        dlogits: &[f64],
        grads: &mut Grads,
    ) -> Vec<f64> {
        let n = grads.len();
        let (conv_grads, head_grads) = grads.split_at_mut(n - 2);
        let (gw, gb) = head_grads.split_at_mut(1);
        let dpooled = self
            .head
            .backward(&trace.pooled, dlogits, &mut gw[0], &mut gb[0]);
        let spatial = (self.dims.h * self.dims.w) as f64;
        let mut dact = Vec::with_capacity(trace.output.activations.data().len());
        for _ in 0..self.dims.h * self.dims.w {
            dact.extend(dpooled.iter().map(|d| d / spatial));
        }
        self.stack.backward(
            &trace.cache,
            trace.output.activations.data(),
            &dact,
            conv_grads,
        )
    }

    pub fn to_params(&self) -> ModelParams {
        let mut tensors = BTreeMap::new();
        stack_to_params(&self.stack, &mut tensors);
        tensors.insert(
            "head.weight".into(),
            (
                vec![self.head.fin, self.head.fout],
                self.head.weight.clone(),
            ),
        );
        tensors.insert(
            "head.bias".into(),
            (vec![self.head.fout], self.head.bias.clone()),
        );
        ModelParams {
            architecture: Architecture::Classifier,
            dims: self.dims,
            tensors,
        }
    }

    pub fn from_params(p: &ModelParams) -> Result<Self> {
        expect_arch(p, Architecture::Classifier)?;
        let mut c = Classifier::init(p.dims, &mut seed::rng(0));
        stack_from_params(p, &mut c.stack);
        c.head.weight = p.take("head.weight");
        c.head.bias = p.take("head.bias");
        Ok(c)
    }
}

impl Parameterized for Classifier {
    fn params(&self) -> Vec<&Vec<f64>> {
        let mut v = self.stack.params();
        v.push(&self.head.weight);
        v.push(&self.head.bias);
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v = self.stack.params_mut();
        v.push(&mut self.head.weight);
        v.push(&mut self.head.bias);
        v
    }
}
