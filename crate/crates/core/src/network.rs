//! Layer stacks, exact reverse-mode gradients and plain SGD.
//!
//! Every weight layer owns one [`WeightMatrix`] of shape
//! `N_row x N_col`, where each column feeds one output unit. Convolution
//! kernels are stored unrolled the same way (`N_row = C * kh * kw`, one
//! column per filter), so pruning and targeting treat both layer kinds
//! uniformly. Biases are kept separately and are never pruned or targeted.
//!
//! The flat parameter vector is every matrix row-major in layer order,
//! followed by every bias vector in layer order.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{self, ConvGeometry, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct WeightMatrix {
    pub id: String,
    pub values: Tensor,
    pub prunable: bool,
    pub is_logits: bool,
}

impl WeightMatrix {
    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.values.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense {
        matrix: usize,
    },
    Conv2d {
        matrix: usize,
        geometry: ConvGeometry,
        out_h: usize,
        out_w: usize,
    },
    Relu,
    Flatten,
}

/// Reference architectures used by the experiment harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    /// flatten -> dense(hidden) -> relu -> logits
    ToyDense { hidden: usize },
    /// conv3x3x16 -> relu -> conv4x4x32/2 -> relu -> conv3x3x32 -> relu
    /// -> flatten -> dense(hidden) -> relu -> logits
    SmallCnn { hidden: usize },
}

impl Architecture {
    pub fn build(&self, input_shape: &[usize], classes: usize, rng: &mut Rng) -> Result<Network> {
        match *self {
            Architecture::ToyDense { hidden } => NetworkBuilder::new(input_shape)
                .flatten()
                .dense(hidden)
                .relu()
                .logits(classes)
                .build(rng),
            Architecture::SmallCnn { hidden } => NetworkBuilder::new(input_shape)
                .conv(16, 3, 1, 1)
                .relu()
                .conv(32, 4, 2, 1)
                .relu()
                .conv(32, 3, 1, 1)
                .relu()
                .flatten()
                .dense(hidden)
                .relu()
                .logits(classes)
                .build(rng),
        }
    }
}

#[derive(Clone, Debug)]
enum Spec {
    Dense(usize),
    Logits(usize),
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    Flatten,
}

/// Incremental construction of a [`Network`]; the final layer must be
/// [`NetworkBuilder::logits`].
#[derive(Clone, Debug)]
pub struct NetworkBuilder {
    input_shape: Vec<usize>,
    specs: Vec<Spec>,
}

impl NetworkBuilder {
    pub fn new(input_shape: &[usize]) -> Self {
        Self {
            input_shape: input_shape.to_vec(),
            specs: Vec::new(),
        }
    }

    pub fn dense(mut self, outputs: usize) -> Self {
        self.specs.push(Spec::Dense(outputs));
        self
    }

    pub fn logits(mut self, classes: usize) -> Self {
        self.specs.push(Spec::Logits(classes));
        self
    }

    pub fn conv(mut self, filters: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        self.specs.push(Spec::Conv {
            filters,
            kernel,
            stride,
            pad,
        });
        self
    }

    pub fn relu(mut self) -> Self {
        self.specs.push(Spec::Relu);
        self
    }

    pub fn flatten(mut self) -> Self {
        self.specs.push(Spec::Flatten);
        self
    }

    /// Builds the stack with He (fan-in) Gaussian weights and zero biases.
    /// Each matrix draws row-major from its own substream keyed by its id.
    pub fn build(self, rng: &mut Rng) -> Result<Network> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Config(format!("bad input shape {:?}", self.input_shape)));
        }
        if !matches!(self.specs.last(), Some(Spec::Logits(_))) {
            return Err(Error::Config("network must end with a logits layer".into()));
        }
        let mut shape = self.input_shape.clone();
        let mut layers = Vec::new();
        let mut matrices: Vec<WeightMatrix> = Vec::new();
        let mut biases = Vec::new();
        let (mut n_dense, mut n_conv) = (0, 0);
        for spec in &self.specs {
            match *spec {
                Spec::Dense(out) | Spec::Logits(out) => {
                    let [inputs] = shape[..] else {
                        return Err(Error::Config(format!(
                            "dense layer needs a flat input, got {shape:?} (add flatten)"
                        )));
                    };
                    if out == 0 {
                        return Err(Error::Config("dense layer with zero outputs".into()));
                    }
                    let is_logits = matches!(spec, Spec::Logits(_));
                    let id = if is_logits {
                        String::from("logits")
                    } else {
                        n_dense += 1;
                        format!("dense{}", n_dense - 1)
                    };
                    layers.push(Layer::Dense {
                        matrix: matrices.len(),
                    });
                    matrices.push(init_matrix(id, inputs, out, is_logits, rng));
                    biases.push(vec![0.0; out]);
                    shape = vec![out];
                }
                Spec::Conv {
                    filters,
                    kernel,
                    stride,
                    pad,
                } => {
                    let [c, h, w] = shape[..] else {
                        return Err(Error::Config(format!(
                            "conv layer needs a C x H x W input, got {shape:?}"
                        )));
                    };
                    let geometry = ConvGeometry {
                        channels: c,
                        height: h,
                        width: w,
                        kernel_h: kernel,
                        kernel_w: kernel,
                        stride,
                        pad,
                    };
                    let (out_h, out_w) = geometry.output_hw()?;
                    layers.push(Layer::Conv2d {
                        matrix: matrices.len(),
                        geometry,
                        out_h,
                        out_w,
                    });
                    let id = format!("conv{n_conv}");
                    n_conv += 1;
                    matrices.push(init_matrix(id, geometry.patch_len(), filters, false, rng));
                    biases.push(vec![0.0; filters]);
                    shape = vec![filters, out_h, out_w];
                }
                Spec::Relu => layers.push(Layer::Relu),
                Spec::Flatten => {
                    layers.push(Layer::Flatten);
                    shape = vec![shape.iter().product()];
                }
            }
        }
        let classes = shape[0];
        Ok(Network {
            input_shape: self.input_shape,
            classes,
            layers,
            matrices,
            biases,
        })
    }
}

fn init_matrix(id: String, rows: usize, cols: usize, is_logits: bool, rng: &Rng) -> WeightMatrix {
    let mut r = rng.substream_named(&id);
    let std = libm::sqrt(2.0 / rows as f64);
    let values = Tensor::from_fn(&[rows, cols], |_| r.normal() * std);
    WeightMatrix {
        id,
        values,
        prunable: !is_logits,
        is_logits,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    classes: usize,
    layers: Vec<Layer>,
    matrices: Vec<WeightMatrix>,
    biases: Vec<Vec<f64>>,
}

/// Per-matrix dropout masks, indexed like [`Network::matrices`].
///
/// A weight mask multiplies the weight matrix (`Y = X (W * M)`); an input
/// mask multiplies the layer's input activations (`Y = (X * M) W`) and is
/// shaped like the batched input of that layer. Masks are applied as given:
/// no inverse-keep-probability rescaling happens here.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DropoutMasks {
    pub weight: Vec<Option<Tensor>>,
    pub input: Vec<Option<Tensor>>,
}

impl DropoutMasks {
    pub fn empty(matrices: usize) -> Self {
        Self {
            weight: vec![None; matrices],
            input: vec![None; matrices],
        }
    }
}

/// Gradient buffers congruent with the network parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            weights: net
                .matrices
                .iter()
                .map(|m| Tensor::zeros(m.values.shape()))
                .collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    /// Flattened in parameter-vector order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for w in &self.weights {
            out.extend_from_slice(w.data());
        }
        for b in &self.biases {
            out.extend_from_slice(b);
        }
        out
    }

    pub fn norm(&self) -> f64 {
        let mut s = 0.0;
        for w in &self.weights {
            s += w.data().iter().map(|x| x * x).sum::<f64>();
        }
        for b in &self.biases {
            s += b.iter().map(|x| x * x).sum::<f64>();
        }
        libm::sqrt(s)
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += scale * y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }
}

enum Cache {
    Dense {
        x: Vec<f64>,
        w_eff: Option<Vec<f64>>,
    },
    Conv {
        x: Vec<f64>,
        w_eff: Option<Vec<f64>>,
    },
    Relu {
        y: Vec<f64>,
    },
    Flatten,
}

impl Network {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn matrices(&self) -> &[WeightMatrix] {
        &self.matrices
    }

    pub fn matrices_mut(&mut self) -> &mut [WeightMatrix] {
        &mut self.matrices
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.biases
    }

    pub fn weight_count(&self) -> usize {
        self.matrices.iter().map(|m| m.values.len()).sum()
    }

    pub fn bias_count(&self) -> usize {
        self.biases.iter().map(Vec::len).sum()
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.bias_count()
    }

    /// Offset of each matrix inside the flat parameter vector.
    pub fn matrix_offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.matrices
            .iter()
            .map(|m| {
                let o = off;
                off += m.values.len();
                o
            })
            .collect()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for m in &self.matrices {
            out.extend_from_slice(m.values.data());
        }
        for b in &self.biases {
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_flat_params(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.param_count() {
            return Err(Error::dim("set_flat_params", &[self.param_count()], &[theta.len()]));
        }
        let mut off = 0;
        for m in &mut self.matrices {
            let n = m.values.len();
            m.values.data_mut().copy_from_slice(&theta[off..off + n]);
            off += n;
        }
        for b in &mut self.biases {
            let n = b.len();
            b.copy_from_slice(&theta[off..off + n]);
            off += n;
        }
        Ok(())
    }

    fn batch_size(&self, batch: &Tensor) -> Result<usize> {
        let sample: usize = self.input_shape.iter().product();
        let shape = batch.shape();
        let ok = shape.len() >= 2
            && shape[1..].iter().product::<usize>() == sample
            && (shape[1..] == self.input_shape[..] || shape.len() == 2);
        if !ok {
            let mut want = vec![shape[0]];
            want.extend_from_slice(&self.input_shape);
            return Err(Error::dim("forward", shape, &want));
        }
        Ok(shape[0])
    }

    fn check_masks(&self, masks: &DropoutMasks, batch: usize) -> Result<()> {
        let n = self.matrices.len();
        if masks.weight.len() != n || masks.input.len() != n {
            return Err(Error::Config(format!(
                "mask set covers {}/{} matrices, network has {n}",
                masks.weight.len(),
                masks.input.len()
            )));
        }
        for (m, w) in self.matrices.iter().zip(&masks.weight) {
            if let Some(w) = w {
                if w.shape() != m.values.shape() {
                    return Err(Error::Config(format!(
                        "weight mask for `{}` has shape {:?}, matrix is {:?}",
                        m.id,
                        w.shape(),
                        m.values.shape()
                    )));
                }
            }
        }
        let mut shape = self.input_shape.clone();
        for layer in &self.layers {
            match layer {
                Layer::Dense { matrix } | Layer::Conv2d { matrix, .. } => {
                    if let Some(mask) = &masks.input[*matrix] {
                        let mut want = vec![batch];
                        want.extend_from_slice(&shape);
                        let flat_ok = mask.shape()[0] == batch
                            && mask.len() == want.iter().product::<usize>();
                        if !flat_ok {
                            return Err(Error::Config(format!(
                                "input mask for `{}` has shape {:?}, layer input is {want:?}",
                                self.matrices[*matrix].id,
                                mask.shape()
                            )));
                        }
                    }
                    shape = match layer {
                        Layer::Conv2d { matrix, out_h, out_w, .. } => {
                            vec![self.matrices[*matrix].cols(), *out_h, *out_w]
                        }
                        _ => vec![self.matrices[*matrix].cols()],
                    };
                }
                Layer::Flatten => shape = vec![shape.iter().product()],
                Layer::Relu => {}
            }
        }
        Ok(())
    }

    fn run_forward(
        &self,
        batch: &Tensor,
        masks: Option<&DropoutMasks>,
        keep_cache: bool,
    ) -> Result<(Vec<f64>, Vec<Cache>)> {
        let n = self.batch_size(batch)?;
        if let Some(m) = masks {
            self.check_masks(m, n)?;
        }
        let mut act = batch.data().to_vec();
        let mut caches = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Dense { matrix } => {
                    let m = &self.matrices[*matrix];
                    let (rows, cols) = (m.rows(), m.cols());
                    if let Some(mask) = masks.and_then(|ms| ms.input[*matrix].as_ref()) {
                        act.iter_mut().zip(mask.data()).for_each(|(a, k)| *a *= k);
                    }
                    let w_eff = masks
                        .and_then(|ms| ms.weight[*matrix].as_ref())
                        .map(|mask| m.values.hadamard(mask).map(Tensor::into_data))
                        .transpose()?;
                    let w = w_eff.as_deref().unwrap_or(m.values.data());
                    let mut out = Vec::with_capacity(n * cols);
                    for _ in 0..n {
                        out.extend_from_slice(&self.biases[*matrix]);
                    }
                    tensor::gemm_nn(n, rows, cols, &act, w, &mut out);
                    let x = core::mem::replace(&mut act, out);
                    if keep_cache {
                        caches.push(Cache::Dense { x, w_eff });
                    }
                }
                Layer::Conv2d {
                    matrix,
                    geometry,
                    out_h,
                    out_w,
                } => {
                    let m = &self.matrices[*matrix];
                    let f = m.cols();
                    if let Some(mask) = masks.and_then(|ms| ms.input[*matrix].as_ref()) {
                        act.iter_mut().zip(mask.data()).for_each(|(a, k)| *a *= k);
                    }
                    let w_eff = masks
                        .and_then(|ms| ms.weight[*matrix].as_ref())
                        .map(|mask| m.values.hadamard(mask).map(Tensor::into_data))
                        .transpose()?;
                    let w = w_eff.as_deref().unwrap_or(m.values.data());
                    let npos = out_h * out_w;
                    let mut out = vec![0.0; n * f * npos];
                    tensor::conv_forward(geometry, *out_h, *out_w, n, f, &act, w, &mut out);
                    let bias = &self.biases[*matrix];
                    for s in 0..n {
                        for (fi, b) in bias.iter().enumerate() {
                            let base = (s * f + fi) * npos;
                            out[base..base + npos].iter_mut().for_each(|v| *v += b);
                        }
                    }
                    let x = core::mem::replace(&mut act, out);
                    if keep_cache {
                        caches.push(Cache::Conv { x, w_eff });
                    }
                }
                Layer::Relu => {
                    act.iter_mut().for_each(|v| {
                        if *v < 0.0 {
                            *v = 0.0
                        }
                    });
                    if keep_cache {
                        caches.push(Cache::Relu { y: act.clone() });
                    }
                }
                Layer::Flatten => {
                    if keep_cache {
                        caches.push(Cache::Flatten);
                    }
                }
            }
        }
        Ok((act, caches))
    }

    /// Logits `[B x classes]`.
    pub fn forward(&self, batch: &Tensor, masks: Option<&DropoutMasks>) -> Result<Tensor> {
        let n = self.batch_size(batch)?;
        let (logits, _) = self.run_forward(batch, masks, false)?;
        Tensor::new(vec![n, self.classes], logits)
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn loss(&self, batch: &Tensor, labels: &[usize], masks: Option<&DropoutMasks>) -> Result<f64> {
        let logits = self.forward(batch, masks)?;
        let (loss, _) = cross_entropy(&logits, labels, false)?;
        Ok(loss)
    }

    /// Arg-max class per sample.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward(batch, None)?;
        Ok(logits
            .data()
            .chunks(self.classes)
            .map(|row| {
                let mut best = 0;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    /// Mean cross-entropy and its exact gradient with respect to every
    /// parameter. Masked weights and masked inputs receive zero gradient
    /// through the masked path.
    pub fn backward(
        &self,
        batch: &Tensor,
        labels: &[usize],
        masks: Option<&DropoutMasks>,
    ) -> Result<(f64, Gradients)> {
        let n = self.batch_size(batch)?;
        let (logits, caches) = self.run_forward(batch, masks, true)?;
        let logits = Tensor::new(vec![n, self.classes], logits)?;
        let (loss, dlogits) = cross_entropy(&logits, labels, true)?;
        let mut grads = Gradients::zeros_like(self);
        let mut delta = dlogits.expect("requested").into_data();
        let first_weight_layer = self
            .layers
            .iter()
            .position(|l| matches!(l, Layer::Dense { .. } | Layer::Conv2d { .. }));

        for (li, (layer, cache)) in self.layers.iter().zip(&caches).enumerate().rev() {
            let need_dx = Some(li) != first_weight_layer;
            match (layer, cache) {
                (Layer::Dense { matrix }, Cache::Dense { x, w_eff }) => {
                    let m = &self.matrices[*matrix];
                    let (rows, cols) = (m.rows(), m.cols());
                    let gw = grads.weights[*matrix].data_mut();
                    tensor::gemm_tn(rows, n, cols, x, &delta, gw);
                    if let Some(mask) = masks.and_then(|ms| ms.weight[*matrix].as_ref()) {
                        gw.iter_mut().zip(mask.data()).for_each(|(g, k)| *g *= k);
                    }
                    let gb = &mut grads.biases[*matrix];
                    for row in delta.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                    }
                    if need_dx {
                        let w = w_eff.as_deref().unwrap_or(m.values.data());
                        let mut dx = vec![0.0; n * rows];
                        tensor::gemm_nt(n, cols, rows, &delta, w, &mut dx);
                        if let Some(mask) = masks.and_then(|ms| ms.input[*matrix].as_ref()) {
                            dx.iter_mut().zip(mask.data()).for_each(|(g, k)| *g *= k);
                        }
                        delta = dx;
                    }
                }
                (
                    Layer::Conv2d {
                        matrix,
                        geometry,
                        out_h,
                        out_w,
                    },
                    Cache::Conv { x, w_eff },
                ) => {
                    let m = &self.matrices[*matrix];
                    let f = m.cols();
                    let pl = geometry.patch_len();
                    let npos = out_h * out_w;
                    let in_len = geometry.channels * geometry.height * geometry.width;
                    let w = w_eff.as_deref().unwrap_or(m.values.data());
                    let mut cols = vec![0.0; npos * pl];
                    let mut dout = vec![0.0; npos * f];
                    let mut dcols = vec![0.0; npos * pl];
                    let mut dx = if need_dx { vec![0.0; n * in_len] } else { Vec::new() };
                    for s in 0..n {
                        let d = &delta[s * f * npos..(s + 1) * f * npos];
                        for fi in 0..f {
                            for p in 0..npos {
                                dout[p * f + fi] = d[fi * npos + p];
                            }
                            grads.biases[*matrix][fi] += d[fi * npos..(fi + 1) * npos].iter().sum::<f64>();
                        }
                        tensor::im2col(geometry, *out_h, *out_w, &x[s * in_len..(s + 1) * in_len], &mut cols);
                        tensor::gemm_tn(pl, npos, f, &cols, &dout, grads.weights[*matrix].data_mut());
                        if need_dx {
                            dcols.iter_mut().for_each(|v| *v = 0.0);
                            tensor::gemm_nt(npos, f, pl, &dout, w, &mut dcols);
                            tensor::col2im(
                                geometry,
                                *out_h,
                                *out_w,
                                &dcols,
                                &mut dx[s * in_len..(s + 1) * in_len],
                            );
                        }
                    }
                    if let Some(mask) = masks.and_then(|ms| ms.weight[*matrix].as_ref()) {
                        let gw = grads.weights[*matrix].data_mut();
                        gw.iter_mut().zip(mask.data()).for_each(|(g, k)| *g *= k);
                    }
                    if need_dx {
                        if let Some(mask) = masks.and_then(|ms| ms.input[*matrix].as_ref()) {
                            dx.iter_mut().zip(mask.data()).for_each(|(g, k)| *g *= k);
                        }
                        delta = dx;
                    }
                }
                (Layer::Relu, Cache::Relu { y }) => {
                    delta.iter_mut().zip(y).for_each(|(d, &v)| {
                        if v <= 0.0 {
                            *d = 0.0
                        }
                    });
                }
                (Layer::Flatten, Cache::Flatten) => {}
                _ => unreachable!("cache out of sync with layers"),
            }
            if !need_dx {
                break;
            }
        }
        Ok((loss, grads))
    }

    /// `theta <- theta - lr * grad` for weights and biases alike.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (m, g) in self.matrices.iter_mut().zip(&grads.weights) {
            m.values
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(w, g)| *w -= lr * g);
        }
        for (b, g) in self.biases.iter_mut().zip(&grads.biases) {
            b.iter_mut().zip(g).for_each(|(w, g)| *w -= lr * g);
        }
    }

    /// `beta * sum |w|` over weight matrices (not biases); adds the
    /// subgradient `beta * sign(w)` (with `sign(0) = 0`) into `grads`.
    pub fn l1_penalty(&self, beta: f64, grads: &mut Gradients) -> f64 {
        if beta == 0.0 {
            return 0.0;
        }
        let mut total = 0.0;
        for (m, g) in self.matrices.iter().zip(grads.weights.iter_mut()) {
            for (w, g) in m.values.data().iter().zip(g.data_mut()) {
                total += w.abs();
                if *w > 0.0 {
                    *g += beta;
                } else if *w < 0.0 {
                    *g -= beta;
                }
            }
        }
        beta * total
    }
}

/// Mean cross-entropy of `logits [B x K]` against integer labels, and
/// optionally `d loss / d logits = (softmax - onehot) / B`.
pub fn cross_entropy(
    logits: &Tensor,
    labels: &[usize],
    want_grad: bool,
) -> Result<(f64, Option<Tensor>)> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::dim("cross_entropy", logits.shape(), &[labels.len()]));
    }
    let mut total = 0.0;
    let mut grad = if want_grad { vec![0.0; n * k] } else { Vec::new() };
    for (i, (row, &y)) in logits.data().chunks(k).zip(labels).enumerate() {
        if y >= k {
            return Err(Error::Domain(format!("label {y} outside 0..{k}")));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| libm::exp(z - max)).sum();
        let lse = max + libm::log(sum);
        total += lse - row[y];
        if want_grad {
            let g = &mut grad[i * k..(i + 1) * k];
            for (j, z) in row.iter().enumerate() {
                g[j] = libm::exp(z - lse) / n as f64;
            }
            g[y] -= 1.0 / n as f64;
        }
    }
    let loss = total / n as f64;
    let grad = if want_grad {
        Some(Tensor::new(vec![n, k], grad)?)
    } else {
        None
    };
    Ok((loss, grad))
}
