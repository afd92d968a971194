//! The fully convolutional height regressor.
//!
//! Five 3x3 conv layers (128 filters, leaky ReLU) followed by a 1x1
//! linear head: receptive field 11x11, output aligned pixelwise with the
//! input. Forward/backward are hand-rolled on the conv kernels in
//! [`conv`]; the model is generic over f32/f64 so gradient checks can run
//! in 64-bit while production stays 32-bit.

pub mod conv;
mod checkpoint;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, NamedTensor, OptimizerBlob,
};

use ndarray::{Array1, Array4};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{derive_seed, label, rng_from};
use conv::{
    conv2d_backward_input, conv2d_backward_params, conv2d_same, leaky_relu_backward,
    leaky_relu_forward,
};

/// Activation/parameter scalar: f32 in production, f64 in gradient-check
/// builds.
pub trait Scalar: ndarray::NdFloat + rand::distributions::uniform::SampleUniform {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> f64 {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// (batch, channels, height, width), row-major.
pub type Tensor4<F> = Array4<F>;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<F: Scalar> {
    pub weight: Array4<F>,
    pub bias: Array1<F>,
}

/// Architecture description; the defaults of [`FcnSpec::standard`] are the
/// production network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcnSpec {
    pub in_channels: usize,
    pub hidden_layers: usize,
    pub filters: usize,
    pub kernel: usize,
    pub leaky_slope: f64,
}

impl FcnSpec {
    pub fn standard(in_channels: usize) -> FcnSpec {
        FcnSpec {
            in_channels,
            hidden_layers: 5,
            filters: 128,
            kernel: 3,
            leaky_slope: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::parameter("input channel count must be at least 1"));
        }
        if self.hidden_layers == 0 || self.filters == 0 {
            return Err(Error::parameter("need at least one hidden layer and filter"));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::parameter(format!(
                "kernel must be odd, got {}",
                self.kernel
            )));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::parameter(format!(
                "leaky slope {} outside (0, 1)",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    /// (out_channels, in_channels, kernel) per layer, head last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden_layers + 1);
        let mut c_in = self.in_channels;
        for _ in 0..self.hidden_layers {
            shapes.push((self.filters, c_in, self.kernel));
            c_in = self.filters;
        }
        shapes.push((1, self.filters, 1));
        shapes
    }

    /// Total layer count including the head.
    pub fn n_layers(&self) -> usize {
        self.hidden_layers + 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|&(o, i, k)| o * i * k * k + o)
            .sum()
    }

    /// Side length of the receptive field of one output pixel.
    pub fn receptive_field(&self) -> usize {
        self.hidden_layers * (self.kernel - 1) + 1
    }
}

/// Per-layer trainable flags, head last. At least one layer trains.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    trainable: Vec<bool>,
}

impl FreezeMask {
    pub fn new(trainable: Vec<bool>) -> Result<FreezeMask> {
        if !trainable.iter().any(|&t| t) {
            return Err(Error::parameter("freeze mask disables every layer"));
        }
        Ok(FreezeMask { trainable })
    }

    pub fn all(n_layers: usize) -> FreezeMask {
        FreezeMask {
            trainable: vec![true; n_layers],
        }
    }

    /// Only the last `k` layers (counting the head) train.
    pub fn train_last(n_layers: usize, k: usize) -> Result<FreezeMask> {
        if k == 0 || k > n_layers {
            return Err(Error::parameter(format!(
                "cannot train last {k} of {n_layers} layers"
            )));
        }
        let mut t = vec![false; n_layers];
        for flag in t.iter_mut().skip(n_layers - k) {
            *flag = true;
        }
        Ok(FreezeMask { trainable: t })
    }

    pub fn len(&self) -> usize {
        self.trainable.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trainable.is_empty()
    }

    pub fn is_trainable(&self, layer: usize) -> bool {
        self.trainable[layer]
    }

    fn first_trainable(&self) -> usize {
        self.trainable.iter().position(|&t| t).unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<F: Scalar> {
    pub weight: Array4<F>,
    pub bias: Array1<F>,
}

/// Gradients aligned with the model's layers; frozen layers hold None.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F: Scalar> {
    pub layers: Vec<Option<LayerGrads<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Flat (weight, bias) slices per layer, aligned with
    /// [`FcnModel::param_tensors`] order; None for frozen layers.
    pub fn tensor_pairs(&self) -> Vec<Option<(&[F], &[F])>> {
        self.layers
            .iter()
            .map(|l| {
                l.as_ref()
                    .map(|g| (g.weight.as_slice().unwrap(), g.bias.as_slice().unwrap()))
            })
            .collect()
    }
}

#[derive(Debug)]
struct Cache<F: Scalar> {
    input: Tensor4<F>,
    /// Post-activation output of each hidden layer.
    acts: Vec<Tensor4<F>>,
}

#[derive(Debug)]
pub struct FcnModel<F: Scalar> {
    spec: FcnSpec,
    layers: Vec<ConvLayer<F>>,
    head: ConvLayer<F>,
    cache: Option<Cache<F>>,
}

impl<F: Scalar> FcnModel<F> {
    /// Fresh model with fan-in-scaled uniform weights
    /// U(-sqrt(6/fan_in), +sqrt(6/fan_in)) and zero biases, drawn from a
    /// stream derived from `seed`.
    pub fn build(spec: &FcnSpec, seed: u64) -> Result<FcnModel<F>> {
        spec.validate()?;
        let mut rng = rng_from(derive_seed(seed, &[label("fcn-init")]));
        let mut layers = Vec::with_capacity(spec.hidden_layers);
        let mut head = None;
        for (idx, (o, i, k)) in spec.layer_shapes().into_iter().enumerate() {
            let fan_in = (i * k * k) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let lo = F::from_f64(-bound);
            let hi = F::from_f64(bound);
            let mut weight = Array4::<F>::zeros((o, i, k, k));
            for v in weight.iter_mut() {
                *v = rng.gen_range(lo..hi);
            }
            let layer = ConvLayer {
                weight,
                bias: Array1::zeros(o),
            };
            if idx < spec.hidden_layers {
                layers.push(layer);
            } else {
                head = Some(layer);
            }
        }
        Ok(FcnModel {
            spec: spec.clone(),
            layers,
            head: head.unwrap(),
            cache: None,
        })
    }

    /// Assembles a model from explicit parameters (checkpoint load, tests).
    pub fn from_parts(
        spec: FcnSpec,
        layers: Vec<ConvLayer<F>>,
        head: ConvLayer<F>,
    ) -> Result<FcnModel<F>> {
        spec.validate()?;
        let shapes = spec.layer_shapes();
        if layers.len() != spec.hidden_layers {
            return Err(Error::shape(format!(
                "{} hidden layers for a {}-layer spec",
                layers.len(),
                spec.hidden_layers
            )));
        }
        for (idx, layer) in layers.iter().chain(std::iter::once(&head)).enumerate() {
            let (o, i, k) = shapes[idx];
            if layer.weight.dim() != (o, i, k, k) || layer.bias.len() != o {
                return Err(Error::shape(format!(
                    "layer {idx} shape {:?} does not match spec {:?}",
                    layer.weight.dim(),
                    (o, i, k, k)
                )));
            }
        }
        Ok(FcnModel {
            spec,
            layers,
            head,
            cache: None,
        })
    }

    pub fn spec(&self) -> &FcnSpec {
        &self.spec
    }

    pub fn hidden_layers(&self) -> &[ConvLayer<F>] {
        &self.layers
    }

    pub fn head(&self) -> &ConvLayer<F> {
        &self.head
    }

    /// Layer count including the head (the unit [`FreezeMask`] works in).
    pub fn n_layers(&self) -> usize {
        self.spec.n_layers()
    }

    fn check_input(&self, input: &Tensor4<F>) -> Result<()> {
        let (_, c, h, w) = input.dim();
        if c != self.spec.in_channels {
            return Err(Error::shape(format!(
                "input has {c} channels, model expects {}",
                self.spec.in_channels
            )));
        }
        if h == 0 || w == 0 || input.dim().0 == 0 {
            return Err(Error::shape("empty input tensor"));
        }
        Ok(())
    }

    /// Inference pass; activations are not retained.
    pub fn forward(&self, input: &Tensor4<F>) -> Result<Tensor4<F>> {
        self.check_input(input)?;
        let slope = F::from_f64(self.spec.leaky_slope);
        let mut x = conv2d_same(input, &self.layers[0].weight, Some(&self.layers[0].bias))?;
        leaky_relu_forward(&mut x, slope);
        for layer in &self.layers[1..] {
            x = conv2d_same(&x, &layer.weight, Some(&layer.bias))?;
            leaky_relu_forward(&mut x, slope);
        }
        conv2d_same(&x, &self.head.weight, Some(&self.head.bias))
    }

    /// Training pass: caches the activations [`FcnModel::backward`] needs.
    pub fn forward_train(&mut self, input: &Tensor4<F>) -> Result<Tensor4<F>> {
        self.check_input(input)?;
        let slope = F::from_f64(self.spec.leaky_slope);
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &self.layers {
            let mut y = conv2d_same(&x, &layer.weight, Some(&layer.bias))?;
            leaky_relu_forward(&mut y, slope);
            acts.push(y.clone());
            x = y;
        }
        let out = conv2d_same(&x, &self.head.weight, Some(&self.head.bias))?;
        self.cache = Some(Cache {
            input: input.clone(),
            acts,
        });
        Ok(out)
    }

    /// Drops a cached forward pass without backpropagating, for batches
    /// the loss skipped.
    pub fn discard_cache(&mut self) {
        self.cache = None;
    }

    /// Backpropagates `grad_out` (dLoss/dOutput) through the cached
    /// forward pass. Consumes the cache: each backward needs its own
    /// preceding forward_train. Frozen layers get no gradient storage, and
    /// nothing below the first trainable layer is even computed.
    pub fn backward(&mut self, grad_out: &Tensor4<F>, mask: &FreezeMask) -> Result<Gradients<F>> {
        if mask.len() != self.n_layers() {
            return Err(Error::parameter(format!(
                "freeze mask covers {} layers, model has {}",
                mask.len(),
                self.n_layers()
            )));
        }
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::state("backward called without a cached forward pass"))?;
        let (n, _, h, w) = cache.input.dim();
        if grad_out.dim() != (n, 1, h, w) {
            return Err(Error::shape(format!(
                "output gradient shape {:?} does not match cached forward ({:?})",
                grad_out.dim(),
                (n, 1usize, h, w)
            )));
        }
        let hidden = self.layers.len();
        let slope = F::from_f64(self.spec.leaky_slope);
        let mut grads: Vec<Option<LayerGrads<F>>> = (0..=hidden).map(|_| None).collect();

        let head_input = cache.acts.last().unwrap_or(&cache.input);
        if mask.is_trainable(hidden) {
            let (dw, db) = conv2d_backward_params(head_input, grad_out, 1)?;
            grads[hidden] = Some(LayerGrads {
                weight: dw,
                bias: db,
            });
        }

        let first = mask.first_trainable();
        if first < hidden {
            let mut g = conv2d_backward_input(grad_out, &self.head.weight)?;
            for i in (first..hidden).rev() {
                leaky_relu_backward(&mut g, &cache.acts[i], slope);
                let layer_input = if i == 0 { &cache.input } else { &cache.acts[i - 1] };
                if mask.is_trainable(i) {
                    let (dw, db) = conv2d_backward_params(layer_input, &g, self.spec.kernel)?;
                    grads[i] = Some(LayerGrads {
                        weight: dw,
                        bias: db,
                    });
                }
                if i > first {
                    g = conv2d_backward_input(&g, &self.layers[i].weight)?;
                }
            }
        }
        Ok(Gradients { layers: grads })
    }

    /// (total, trainable) parameter counts under the mask.
    pub fn param_count(&self, mask: &FreezeMask) -> (usize, usize) {
        assert_eq!(
            mask.len(),
            self.n_layers(),
            "freeze mask length must equal layer count"
        );
        let mut total = 0;
        let mut trainable = 0;
        for (i, layer) in self
            .layers
            .iter()
            .chain(std::iter::once(&self.head))
            .enumerate()
        {
            let n = layer.weight.len() + layer.bias.len();
            total += n;
            if mask.is_trainable(i) {
                trainable += n;
            }
        }
        (total, trainable)
    }

    /// Named flat views of every parameter tensor, in checkpoint order:
    /// conv1.weight, conv1.bias, ..., head.weight, head.bias.
    pub fn param_tensors(&self) -> Vec<(String, &[F])> {
        let mut out = Vec::with_capacity(2 * (self.layers.len() + 1));
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("conv{}.weight", i + 1), layer.weight.as_slice().unwrap()));
            out.push((format!("conv{}.bias", i + 1), layer.bias.as_slice().unwrap()));
        }
        out.push(("head.weight".to_string(), self.head.weight.as_slice().unwrap()));
        out.push(("head.bias".to_string(), self.head.bias.as_slice().unwrap()));
        out
    }

    /// Mutable visit over parameter tensors in [`FcnModel::param_tensors`]
    /// order; the layer index passed alongside matches [`FreezeMask`]
    /// indexing.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(usize, &str, &mut [F])) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            f(
                i,
                &format!("conv{}.weight", i + 1),
                layer.weight.as_slice_mut().unwrap(),
            );
            f(
                i,
                &format!("conv{}.bias", i + 1),
                layer.bias.as_slice_mut().unwrap(),
            );
        }
        let head_idx = self.layers.len();
        f(
            head_idx,
            "head.weight",
            self.head.weight.as_slice_mut().unwrap(),
        );
        f(head_idx, "head.bias", self.head.bias.as_slice_mut().unwrap());
    }

    /// Copy into another scalar width (f32 model to f64 for gradient
    /// checks, and back).
    pub fn convert<G: Scalar>(&self) -> FcnModel<G> {
        let conv_layer = |l: &ConvLayer<F>| ConvLayer {
            weight: l.weight.mapv(|v| G::from_f64(v.as_f64())),
            bias: l.bias.mapv(|v| G::from_f64(v.as_f64())),
        };
        FcnModel {
            spec: self.spec.clone(),
            layers: self.layers.iter().map(conv_layer).collect(),
            head: conv_layer(&self.head),
            cache: None,
        }
    }
}

/// Production entry point: 32-bit model per [`FcnSpec`].
pub fn build_fcn(spec: &FcnSpec, seed: u64) -> Result<FcnModel<f32>> {
    FcnModel::build(spec, seed)
}
