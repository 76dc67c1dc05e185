//! Feed-forward network with hand-derived backpropagation, AdaGrad and
//! input standardization.
//!
//! Layer `l` maps `activations[l]` to `activations[l + 1]`; `activations[0]`
//! is the standardized input. The bottleneck is the post-activation output of
//! layer `bottleneck_index`, which is where d-vectors are read.
//!
//! Gradients may be injected at two places at once: the network output and
//! the bottleneck. For a softmax output layer the output gradient is taken
//! with respect to the logits (fused softmax cross-entropy form); for tanh and
//! identity outputs it is taken with respect to the activated output.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::losses::LossTag;

/// Rows per unit of parallel work. Fixed so gradient sums do not depend on
/// the number of worker threads.
pub const REDUCTION_CHUNK: usize = 64;

pub const ADAGRAD_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Softmax,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }
}

/// Per-dimension affine input normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: Array1::zeros(dim),
            std: Array1::ones(dim),
        }
    }

    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            Zip::from(&mut row)
                .and(&self.mean)
                .and(&self.std)
                .for_each(|v, &m, &s| *v = (*v - m) / s);
        }
        out
    }
}

/// Per-dimension mean and population standard deviation of `frames`.
pub fn fit_standardizer(frames: ArrayView2<'_, f64>) -> Result<Standardizer> {
    let n = frames.nrows();
    if n < 2 {
        return Err(Error::Input(format!(
            "need at least 2 frames to fit a standardizer, got {n}"
        )));
    }
    let mean = frames.mean_axis(Axis(0)).expect("nonempty");
    let mut var = Array1::<f64>::zeros(frames.ncols());
    for row in frames.rows() {
        Zip::from(&mut var)
            .and(&row)
            .and(&mean)
            .for_each(|v, &x, &m| *v += (x - m) * (x - m));
    }
    var /= n as f64;
    if let Some(dim) = var.iter().position(|&v| v.is_nan() || v <= 0.0) {
        return Err(Error::Degenerate(format!(
            "feature dimension {dim} has zero variance"
        )));
    }
    Ok(Standardizer {
        mean,
        std: var.mapv(f64::sqrt),
    })
}

/// Hidden layer sizes; the last hidden layer is the bottleneck.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub hidden: Vec<usize>,
}

impl Architecture {
    /// Three 256-unit tanh layers followed by an 8-unit bottleneck.
    pub fn full() -> Self {
        Self {
            hidden: vec![256, 256, 256, 8],
        }
    }

    /// 8-8-8 with a 3-unit bottleneck, for gradient checks.
    pub fn small() -> Self {
        Self {
            hidden: vec![8, 8, 8, 3],
        }
    }

    pub fn bottleneck_dim(&self) -> usize {
        *self.hidden.last().expect("validated architecture")
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(format!(
                "architecture needs at least one nonzero hidden layer, got {:?}",
                self.hidden
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    bottleneck_index: usize,
    standardizer: Standardizer,
}

/// Activations kept by a batch forward pass; row `b` belongs to input `b`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> ArrayView2<'_, f64> {
        self.activations.last().expect("nonempty cache").view()
    }

    pub fn batch_size(&self) -> usize {
        self.activations[0].nrows()
    }
}

/// Result of a single-frame forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub output: Array1<f64>,
    pub bottleneck: Array1<f64>,
    pub cache: ForwardCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Gradients for every weight and bias, laid out like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.layers {
            g.weights *= factor;
            g.bias *= factor;
        }
    }

    pub fn iter_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|g| g.weights.iter().chain(g.bias.iter()).copied())
    }

    fn check_shapes(&self, net: &Network) -> Result<()> {
        let ok =
            self.layers.len() == net.layers.len()
                && self.layers.iter().zip(&net.layers).all(|(g, l)| {
                    g.weights.dim() == l.weights.dim() && g.bias.len() == l.bias.len()
                });
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("gradient shapes do not match network".into()))
        }
    }
}

fn tanh_in_place(a: &mut Array2<f64>) {
    a.mapv_inplace(f64::tanh);
}

/// Row-wise softmax with max subtraction.
fn softmax_rows(a: &mut Array2<f64>) {
    for mut row in a.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

impl Network {
    /// Builds a network with Glorot-uniform weights and zero biases.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        arch: &Architecture,
        output_dim: usize,
        output_activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        arch.validate()?;
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::Config(
                "input and output dimensions must be nonzero".into(),
            ));
        }
        let mut dims = vec![input_dim];
        dims.extend(&arch.hidden);
        dims.push(output_dim);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights =
                    Array2::from_shape_simple_fn((fan_out, fan_in), || rng.random_range(-a..=a));
                Layer {
                    weights,
                    bias: Array1::zeros(fan_out),
                    activation: if l + 2 == dims.len() {
                        output_activation
                    } else {
                        Activation::Tanh
                    },
                }
            })
            .collect();
        Self::from_layers(
            layers,
            arch.hidden.len() - 1,
            Standardizer::identity(input_dim),
        )
    }

    pub fn from_layers(
        layers: Vec<Layer>,
        bottleneck_index: usize,
        standardizer: Standardizer,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network has no layers".into()));
        }
        if bottleneck_index >= layers.len() {
            return Err(Error::Range {
                index: bottleneck_index,
                size: layers.len(),
            });
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.output_dim() {
                return Err(Error::Shape(format!("layer {l}: bias length mismatch")));
            }
            if l > 0 && layer.input_dim() != layers[l - 1].output_dim() {
                return Err(Error::Shape(format!(
                    "layer {l} expects {} inputs but layer {} produces {}",
                    layer.input_dim(),
                    l - 1,
                    layers[l - 1].output_dim()
                )));
            }
            if layer.activation == Activation::Softmax && l + 1 != layers.len() {
                return Err(Error::Shape(format!(
                    "softmax is only allowed at the output layer, found at layer {l}"
                )));
            }
        }
        if layers[bottleneck_index].activation == Activation::Softmax {
            return Err(Error::Shape("bottleneck layer cannot be softmax".into()));
        }
        let input_dim = layers[0].input_dim();
        if standardizer.mean.len() != input_dim || standardizer.std.len() != input_dim {
            return Err(Error::Shape("standardizer dimension mismatch".into()));
        }
        if standardizer.std.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(Error::Degenerate("feature std must be positive".into()));
        }
        Ok(Self {
            layers,
            bottleneck_index,
            standardizer,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn bottleneck_index(&self) -> usize {
        self.bottleneck_index
    }

    pub fn bottleneck_dim(&self) -> usize {
        self.layers[self.bottleneck_index].output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").output_dim()
    }

    pub fn output_activation(&self) -> Activation {
        self.layers.last().expect("nonempty").activation
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn set_standardizer(&mut self, standardizer: Standardizer) -> Result<()> {
        if standardizer.mean.len() != self.input_dim() || standardizer.std.len() != self.input_dim()
        {
            return Err(Error::Shape("standardizer dimension mismatch".into()));
        }
        if standardizer.std.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(Error::Degenerate("feature std must be positive".into()));
        }
        self.standardizer = standardizer;
        Ok(())
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::output_dim))
            .collect()
    }

    /// Forward pass over a batch of raw (unstandardized) frames, one per row.
    pub fn forward_batch(&self, frames: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        if frames.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "frame dimension {} does not match network input {}",
                frames.ncols(),
                self.input_dim()
            )));
        }
        if frames.iter().any(|v| v.is_nan()) {
            return Err(Error::Input("NaN in input frame".into()));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(self.standardizer.apply(frames));
        for layer in &self.layers {
            let input = activations.last().expect("nonempty");
            let mut a = input.dot(&layer.weights.t());
            a += &layer.bias;
            match layer.activation {
                Activation::Tanh => tanh_in_place(&mut a),
                Activation::Softmax => softmax_rows(&mut a),
                Activation::Identity => {}
            }
            activations.push(a);
        }
        Ok(ForwardCache { activations })
    }

    pub fn forward(&self, frame: ArrayView1<'_, f64>) -> Result<ForwardOutput> {
        let batch = frame.insert_axis(Axis(0));
        let cache = self.forward_batch(batch)?;
        Ok(ForwardOutput {
            output: cache.output().row(0).to_owned(),
            bottleneck: self.bottleneck_of(&cache).row(0).to_owned(),
            cache,
        })
    }

    /// Bottleneck activations of every row in `cache`.
    pub fn bottleneck_of<'a>(&self, cache: &'a ForwardCache) -> ArrayView2<'a, f64> {
        cache.activations[self.bottleneck_index + 1].view()
    }

    fn check_cache(&self, cache: &ForwardCache) -> Result<()> {
        let dims = self.layer_dims();
        let ok = cache.activations.len() == dims.len()
            && cache
                .activations
                .iter()
                .zip(&dims)
                .all(|(a, &d)| a.ncols() == d);
        if ok {
            Ok(())
        } else {
            Err(Error::State("forward cache does not match network".into()))
        }
    }

    /// Backpropagates gradients injected at the output and the bottleneck,
    /// summing parameter gradients over the batch rows.
    pub fn backward_batch(
        &self,
        cache: &ForwardCache,
        output_gradient: ArrayView2<'_, f64>,
        bottleneck_gradient: ArrayView2<'_, f64>,
    ) -> Result<Gradients> {
        self.check_cache(cache)?;
        let batch = cache.batch_size();
        if output_gradient.dim() != (batch, self.output_dim()) {
            return Err(Error::Shape(format!(
                "output gradient is {:?}, expected ({batch}, {})",
                output_gradient.dim(),
                self.output_dim()
            )));
        }
        if bottleneck_gradient.dim() != (batch, self.bottleneck_dim()) {
            return Err(Error::Shape(format!(
                "bottleneck gradient is {:?}, expected ({batch}, {})",
                bottleneck_gradient.dim(),
                self.bottleneck_dim()
            )));
        }
        let n_layers = self.layers.len();
        let mut grads = Vec::with_capacity(n_layers);
        // Gradient with respect to the activated output of the current layer.
        let mut upstream = output_gradient.to_owned();
        for l in (0..n_layers).rev() {
            let layer = &self.layers[l];
            if l == self.bottleneck_index {
                upstream += &bottleneck_gradient;
            }
            let out = &cache.activations[l + 1];
            let delta = match layer.activation {
                Activation::Tanh => {
                    let mut d = upstream;
                    Zip::from(&mut d)
                        .and(out)
                        .for_each(|g, &y| *g *= 1.0 - y * y);
                    d
                }
                // Fused form: the output gradient already refers to logits.
                Activation::Softmax | Activation::Identity => upstream,
            };
            let input = &cache.activations[l];
            grads.push(LayerGrad {
                weights: delta.t().dot(input),
                bias: delta.sum_axis(Axis(0)),
            });
            upstream = delta.dot(&layer.weights);
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }

    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_gradient: ArrayView1<'_, f64>,
        bottleneck_gradient: ArrayView1<'_, f64>,
    ) -> Result<Gradients> {
        self.backward_batch(
            cache,
            output_gradient.insert_axis(Axis(0)),
            bottleneck_gradient.insert_axis(Axis(0)),
        )
    }

    /// Bottleneck activations for many frames, computed chunk by chunk.
    pub fn bottlenecks(&self, frames: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((frames.nrows(), self.bottleneck_dim()));
        for (start, chunk) in
            chunk_starts(frames.nrows()).zip(frames.axis_chunks_iter(Axis(0), REDUCTION_CHUNK))
        {
            let cache = self.forward_batch(chunk)?;
            out.slice_mut(ndarray::s![start..start + chunk.nrows(), ..])
                .assign(&self.bottleneck_of(&cache));
        }
        Ok(out)
    }

    /// Runs forward, a per-chunk gradient callback and backward over fixed
    /// chunks of `frames` in parallel, then sums losses and gradients in
    /// chunk order.
    ///
    /// `signal` receives the cache and the chunk's starting row and returns
    /// `(loss_sum, output_gradient, bottleneck_gradient)` for that chunk.
    pub fn accumulate<F>(&self, frames: ArrayView2<'_, f64>, signal: F) -> Result<(f64, Gradients)>
    where
        F: Fn(&ForwardCache, usize) -> Result<(f64, Array2<f64>, Array2<f64>)> + Sync,
    {
        let chunks: Vec<(usize, ArrayView2<'_, f64>)> = chunk_starts(frames.nrows())
            .zip(frames.axis_chunks_iter(Axis(0), REDUCTION_CHUNK))
            .collect();
        let partials = chunks
            .into_par_iter()
            .map(|(start, chunk)| {
                let cache = self.forward_batch(chunk)?;
                let (loss, out_grad, bn_grad) = signal(&cache, start)?;
                let grads = self.backward_batch(&cache, out_grad.view(), bn_grad.view())?;
                Ok((loss, grads))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut total_loss = 0.0;
        let mut total = Gradients::zeros_like(self);
        for (loss, grads) in &partials {
            total_loss += loss;
            total.add_assign(grads);
        }
        Ok((total_loss, total))
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Flat mutable access to parameter `k` in (weights row-major, bias)
    /// order per layer.
    pub fn parameter_mut(&mut self, mut k: usize) -> &mut f64 {
        for layer in &mut self.layers {
            let nw = layer.weights.len();
            if k < nw {
                let cols = layer.weights.ncols();
                return &mut layer.weights[[k / cols, k % cols]];
            }
            k -= nw;
            if k < layer.bias.len() {
                return &mut layer.bias[k];
            }
            k -= layer.bias.len();
        }
        panic!("parameter index out of range");
    }
}

fn chunk_starts(n: usize) -> impl Iterator<Item = usize> {
    (0..n).step_by(REDUCTION_CHUNK)
}

/// AdaGrad accumulators for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaGradState {
    pub accumulators: Gradients,
    pub learning_rate: f64,
    pub epsilon: f64,
}

impl AdaGradState {
    pub fn new(net: &Network, learning_rate: f64) -> Self {
        Self {
            accumulators: Gradients::zeros_like(net),
            learning_rate,
            epsilon: ADAGRAD_EPSILON,
        }
    }

    /// `acc += g^2; param -= lr * g / (sqrt(acc) + eps)`, elementwise.
    pub fn step(&mut self, net: &mut Network, grads: &Gradients) -> Result<()> {
        grads.check_shapes(net)?;
        self.accumulators.check_shapes(net)?;
        let (lr, eps) = (self.learning_rate, self.epsilon);
        for ((layer, g), acc) in net
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.accumulators.layers)
        {
            Zip::from(&mut layer.weights)
                .and(&g.weights)
                .and(&mut acc.weights)
                .for_each(|p, &g, a| {
                    *a += g * g;
                    *p -= lr * g / (a.sqrt() + eps);
                });
            Zip::from(&mut layer.bias)
                .and(&g.bias)
                .and(&mut acc.bias)
                .for_each(|p, &g, a| {
                    *a += g * g;
                    *p -= lr * g / (a.sqrt() + eps);
                });
        }
        Ok(())
    }
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// On-disk network checkpoint. Weights are stored row-major per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub layer_dims: Vec<usize>,
    pub activations: Vec<Activation>,
    pub bottleneck_index: usize,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub loss_tag: LossTag,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn from_network(net: &Network, loss_tag: LossTag) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            layer_dims: net.layer_dims(),
            activations: net.layers.iter().map(|l| l.activation).collect(),
            bottleneck_index: net.bottleneck_index,
            feature_mean: net.standardizer.mean.to_vec(),
            feature_std: net.standardizer.std.to_vec(),
            loss_tag,
            weights: net
                .layers
                .iter()
                .map(|l| l.weights.iter().copied().collect())
                .collect(),
            biases: net.layers.iter().map(|l| l.bias.to_vec()).collect(),
        }
    }

    pub fn to_network(&self) -> Result<Network> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Input(format!(
                "unsupported checkpoint format version {}",
                self.format_version
            )));
        }
        let n_layers = self.layer_dims.len().saturating_sub(1);
        if n_layers == 0
            || self.activations.len() != n_layers
            || self.weights.len() != n_layers
            || self.biases.len() != n_layers
        {
            return Err(Error::Shape("checkpoint layer counts disagree".into()));
        }
        let layers = (0..n_layers)
            .map(|l| {
                let (fan_in, fan_out) = (self.layer_dims[l], self.layer_dims[l + 1]);
                let weights = Array2::from_shape_vec((fan_out, fan_in), self.weights[l].clone())
                    .map_err(|e| Error::Shape(format!("layer {l} weights: {e}")))?;
                if self.biases[l].len() != fan_out {
                    return Err(Error::Shape(format!("layer {l} bias length mismatch")));
                }
                Ok(Layer {
                    weights,
                    bias: Array1::from(self.biases[l].clone()),
                    activation: self.activations[l],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Network::from_layers(
            layers,
            self.bottleneck_index,
            Standardizer {
                mean: Array1::from(self.feature_mean.clone()),
                std: Array1::from(self.feature_std.clone()),
            },
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_net(seed: u64, out_act: Activation) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Network::init(5, &Architecture::small(), 4, out_act, &mut rng).unwrap()
    }

    #[test]
    fn zero_network_has_zero_bottleneck() {
        let mut net = small_net(1, Activation::Tanh);
        for l in net.layers_mut() {
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
        let out = net
            .forward(array![1.0, -2.0, 3.0, 0.5, 9.0].view())
            .unwrap();
        assert!(out.bottleneck.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_output_sums_to_one() {
        let net = small_net(2, Activation::Softmax);
        for x in [
            array![0.0, 0.0, 0.0, 0.0, 0.0],
            array![5.0, -3.0, 2.0, 100.0, -7.0],
        ] {
            let out = net.forward(x.view()).unwrap();
            assert!((out.output.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let layer = Layer {
            weights: Array2::eye(3),
            bias: Array1::zeros(3),
            activation: Activation::Identity,
        };
        let net = Network::from_layers(vec![layer], 0, Standardizer::identity(3)).unwrap();
        let x = array![0.25, -1.5, 7.0];
        assert_eq!(net.forward(x.view()).unwrap().output, x);
    }

    #[test]
    fn softmax_is_shift_invariant_and_stable() {
        let mut a = array![[1.0, 2.0, 3.0]];
        let mut b = array![[1001.0, 1002.0, 1003.0]];
        softmax_rows(&mut a);
        softmax_rows(&mut b);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        let mut big = array![[1e3, -1e3, 0.0]];
        softmax_rows(&mut big);
        assert!(big.iter().all(|v| v.is_finite()));
        assert!((big[[0, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_bad_input() {
        let net = small_net(3, Activation::Tanh);
        assert!(matches!(
            net.forward(array![1.0, 2.0].view()),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            net.forward(array![1.0, f64::NAN, 0.0, 0.0, 0.0].view()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn forward_is_deterministic() {
        let net = small_net(4, Activation::Softmax);
        let x = array![0.3, -0.2, 1.1, 0.0, -4.0];
        let a = net.forward(x.view()).unwrap();
        let b = net.forward(x.view()).unwrap();
        assert_eq!(a.output, b.output);
        assert_eq!(a.bottleneck, b.bottleneck);
    }

    #[test]
    fn softmax_only_at_output() {
        let mk = |act| Layer {
            weights: Array2::eye(2),
            bias: Array1::zeros(2),
            activation: act,
        };
        let layers = vec![mk(Activation::Softmax), mk(Activation::Tanh)];
        assert!(Network::from_layers(layers, 1, Standardizer::identity(2)).is_err());
    }

    #[test]
    fn zero_signals_give_zero_gradients() {
        let net = small_net(5, Activation::Tanh);
        let out = net.forward(array![1.0, 2.0, 3.0, 4.0, 5.0].view()).unwrap();
        let g = net
            .backward(&out.cache, Array1::zeros(4).view(), Array1::zeros(3).view())
            .unwrap();
        assert!(g.iter_values().all(|v| v == 0.0));
    }

    #[test]
    fn linear_layer_gradient_is_outer_product() {
        // L = 0.5 * |W x - y|^2, dL/dW = (W x - y) x^T
        let layer = Layer {
            weights: array![[1.0, 2.0], [3.0, 4.0]],
            bias: Array1::zeros(2),
            activation: Activation::Identity,
        };
        let net = Network::from_layers(vec![layer], 0, Standardizer::identity(2)).unwrap();
        let x = array![1.0, -1.0];
        let y = array![0.0, 1.0];
        let out = net.forward(x.view()).unwrap();
        let residual = &out.output - &y; // [-1, -2]
        let g = net
            .backward(&out.cache, residual.view(), Array1::zeros(2).view())
            .unwrap();
        assert_eq!(g.layers[0].weights, array![[-1.0, 1.0], [-2.0, 2.0]]);
        assert_eq!(g.layers[0].bias, array![-1.0, -2.0]);
    }

    #[test]
    fn backward_rejects_foreign_cache() {
        let a = small_net(6, Activation::Tanh);
        let layer = Layer {
            weights: Array2::eye(5),
            bias: Array1::zeros(5),
            activation: Activation::Tanh,
        };
        let b = Network::from_layers(vec![layer], 0, Standardizer::identity(5)).unwrap();
        let out = b.forward(array![1.0, 2.0, 3.0, 4.0, 5.0].view()).unwrap();
        assert!(matches!(
            a.backward(&out.cache, Array1::zeros(4).view(), Array1::zeros(3).view()),
            Err(Error::State(_))
        ));
    }

    fn scalar_net(w: f64) -> Network {
        let layer = Layer {
            weights: array![[w]],
            bias: array![0.0],
            activation: Activation::Identity,
        };
        Network::from_layers(vec![layer], 0, Standardizer::identity(1)).unwrap()
    }

    fn scalar_grad(g: f64) -> Gradients {
        Gradients {
            layers: vec![LayerGrad {
                weights: array![[g]],
                bias: array![0.0],
            }],
        }
    }

    #[test]
    fn adagrad_first_step_closed_form() {
        let lr = 0.01;
        let g = 2.5;
        let mut net = scalar_net(1.0);
        let mut state = AdaGradState::new(&net, lr);
        state.step(&mut net, &scalar_grad(g)).unwrap();
        let delta1 = net.layers()[0].weights[[0, 0]] - 1.0;
        assert!((delta1 - (-lr * g / (g.abs() + ADAGRAD_EPSILON))).abs() < 1e-15);
        assert!((delta1 + lr).abs() < 1e-9);
        assert_eq!(state.accumulators.layers[0].weights[[0, 0]], g * g);

        let before = net.layers()[0].weights[[0, 0]];
        state.step(&mut net, &scalar_grad(g)).unwrap();
        let delta2 = net.layers()[0].weights[[0, 0]] - before;
        let expected = lr * g / (2f64.sqrt() * g + ADAGRAD_EPSILON);
        assert!((delta2.abs() - expected).abs() < 1e-15);
        assert!(delta2.abs() < delta1.abs());
    }

    #[test]
    fn adagrad_zero_gradient_is_noop() {
        let mut net = small_net(7, Activation::Tanh);
        let before = net.clone();
        let mut state = AdaGradState::new(&net, 0.01);
        let zero = Gradients::zeros_like(&net);
        state.step(&mut net, &zero).unwrap();
        assert_eq!(net, before);
        assert!(state.accumulators.iter_values().all(|v| v == 0.0));
    }

    #[test]
    fn adagrad_rejects_mismatched_gradients() {
        let mut net = small_net(8, Activation::Tanh);
        let mut state = AdaGradState::new(&net, 0.01);
        assert!(matches!(
            state.step(&mut net, &scalar_grad(1.0)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn standardizer_fit() {
        let s = fit_standardizer(array![[0.0], [2.0]].view()).unwrap();
        assert_eq!(s.mean, array![1.0]);
        assert_eq!(s.std, array![1.0]);

        let frames = array![[1.0, 10.0], [2.0, -3.0], [4.0, 0.5], [8.0, 7.0]];
        let s = fit_standardizer(frames.view()).unwrap();
        let z = s.apply(frames.view());
        for col in z.columns() {
            let mean = col.mean().unwrap();
            let var = col.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-10);
        }

        assert!(matches!(
            fit_standardizer(array![[1.0, 3.0], [2.0, 3.0]].view()),
            Err(Error::Degenerate(_))
        ));
        assert!(fit_standardizer(array![[1.0]].view()).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut net = small_net(9, Activation::Softmax);
        net.set_standardizer(Standardizer {
            mean: array![0.1, 0.2, -0.3, 1.0 / 3.0, 5.0],
            std: array![1.5, 0.7, 2.0, 1.0 / 7.0, 3.0],
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        Checkpoint::from_network(&net, LossTag::DvecSce)
            .save(&path)
            .unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.loss_tag, LossTag::DvecSce);
        assert_eq!(back.to_network().unwrap(), net);
    }
}
