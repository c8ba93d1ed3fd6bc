//! Forward and backward passes, SGD and back-prop cost accounting.
//!
//! Backward accepts a [`ChannelMask`]. For a masked layer the rows of its
//! output gradient `dZ` that belong to inactive filters are never read:
//! the weight-gradient product skips those output rows and the
//! input-gradient product skips those reduction terms. The ReLU and pooling
//! layers in between carry the same channels and skip them too.

use super::{ChannelMask, EngineError, LayerKind, LayerParams, Model, ParamSet};
use crate::tensor::{col2im_into, gemm_nn, gemm_nt, gemm_tn, im2col_into, Float, Tensor};

/// Everything a forward pass leaves behind for backward and for the
/// importance metric.
#[derive(Clone, Debug)]
pub struct ForwardPass<T = f32> {
    input: Tensor<T>,
    labels: Vec<usize>,
    outputs: Vec<Tensor<T>>,
    cols: Vec<Vec<T>>,
    argmax: Vec<Vec<u32>>,
    loss: T,
}

impl<T: Float> ForwardPass<T> {
    pub fn loss(&self) -> T {
        self.loss
    }

    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn input(&self) -> &Tensor<T> {
        &self.input
    }

    /// Output of layer `idx`, shaped `[N,C,H,W]`.
    pub fn output(&self, idx: usize) -> &Tensor<T> {
        &self.outputs[idx]
    }

    /// Classifier outputs before the softmax, `[N, classes]`.
    pub fn logits(&self) -> Tensor<T> {
        let t = &self.outputs[self.outputs.len() - 2];
        let n = self.labels.len();
        Tensor::new(&[n, t.len() / n.max(1)], t.data().to_vec()).expect("logits shape")
    }

    /// Softmax probabilities, `[N, classes]`.
    pub fn probabilities(&self) -> &[T] {
        self.outputs[self.outputs.len() - 1].data()
    }

    pub fn correct(&self) -> usize {
        let probs = self.probabilities();
        let classes = probs.len() / self.labels.len().max(1);
        self.labels
            .iter()
            .enumerate()
            .filter(|(i, &y)| argmax(&probs[i * classes..(i + 1) * classes]) == y)
            .count()
    }

    fn matches(&self, model: &Model) -> bool {
        self.outputs.len() == model.layers().len()
            && self.input.shape()[1..] == model.input_shape()[..]
    }
}

pub(crate) fn argmax<T: Float>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn check_batch<T: Float>(model: &Model, batch: &Tensor<T>) -> Result<usize, EngineError> {
    let [c, h, w] = model.input_shape();
    let shape = batch.shape();
    if shape.len() != 4 || shape[1..] != [c, h, w] || shape[0] == 0 {
        return Err(EngineError::Shape {
            layer: 0,
            expected: vec![shape.first().copied().unwrap_or(0), c, h, w],
            actual: shape.to_vec(),
        });
    }
    Ok(shape[0])
}

fn batch_shape(n: usize, s: [usize; 3]) -> [usize; 4] {
    [n, s[0], s[1], s[2]]
}

/// Runs the network on a labelled batch `[N,C,H,W]`, caching what backward
/// needs. The loss is the mean cross-entropy over the batch.
pub fn forward<T: Float>(
    model: &Model,
    params: &ParamSet<T>,
    batch: &Tensor<T>,
    labels: &[usize],
) -> Result<ForwardPass<T>, EngineError> {
    params.check(model)?;
    let n = check_batch(model, batch)?;
    if labels.len() != n {
        return Err(EngineError::LabelCount {
            expected: n,
            actual: labels.len(),
        });
    }
    let classes = model.classes();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(EngineError::LabelOutOfRange { label: bad, classes });
    }

    let layers = model.layers();
    let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(layers.len());
    let mut cols = vec![Vec::new(); layers.len()];
    let mut argmaxes = vec![Vec::new(); layers.len()];
    let mut loss = T::zero();
    for idx in 0..layers.len() {
        let x = if idx == 0 { batch } else { &outputs[idx - 1] };
        let out = match layers[idx].kind {
            LayerKind::SoftmaxCrossEntropy => {
                let (probs, l) = softmax_xent(x, labels);
                loss = l;
                probs
            }
            _ => {
                let (out, c, a) = layer_forward(model, params, idx, x, true);
                cols[idx] = c;
                argmaxes[idx] = a;
                out
            }
        };
        outputs.push(out);
    }
    Ok(ForwardPass {
        input: batch.clone(),
        labels: labels.to_vec(),
        outputs,
        cols,
        argmax: argmaxes,
        loss,
    })
}

/// Logits `[N, classes]` without keeping any backward cache.
pub fn predict<T: Float>(
    model: &Model,
    params: &ParamSet<T>,
    batch: &Tensor<T>,
) -> Result<Tensor<T>, EngineError> {
    params.check(model)?;
    let n = check_batch(model, batch)?;
    let mut current = batch.clone();
    for idx in 0..model.loss_layer() {
        current = layer_forward(model, params, idx, &current, false).0;
    }
    Ok(current.reshape(&[n, model.classes()])?)
}

fn layer_forward<T: Float>(
    model: &Model,
    params: &ParamSet<T>,
    idx: usize,
    x: &Tensor<T>,
    keep: bool,
) -> (Tensor<T>, Vec<T>, Vec<u32>) {
    let n = x.shape()[0];
    let out_shape = batch_shape(n, model.output_shape(idx));
    match model.layers()[idx].kind {
        LayerKind::Conv2d { .. } => {
            let g = model.geometry(idx).expect("conv geometry");
            let lp = params.layer(model.slot_of_layer(idx).expect("conv slot"));
            let (k, p, f) = (g.col_rows(), g.col_cols(), lp.filters());
            let in_len = g.input_len();
            let mut out = Tensor::zeros(&out_shape);
            let mut cols = vec![T::zero(); if keep { n * k * p } else { k * p }];
            for s in 0..n {
                let col = if keep {
                    &mut cols[s * k * p..(s + 1) * k * p]
                } else {
                    &mut cols[..]
                };
                im2col_into(&x.data()[s * in_len..(s + 1) * in_len], g, col);
                let o = &mut out.data_mut()[s * f * p..(s + 1) * f * p];
                for (fi, row) in o.chunks_exact_mut(p).enumerate() {
                    row.fill(lp.bias.data()[fi]);
                }
                gemm_nn(f, k, p, lp.weights.data(), col, o, None);
            }
            (out, if keep { cols } else { Vec::new() }, Vec::new())
        }
        LayerKind::FullyConnected { units } => {
            let lp = params.layer(model.slot_of_layer(idx).expect("fc slot"));
            let fan_in = x.len() / n;
            let mut out = Tensor::zeros(&out_shape);
            for row in out.data_mut().chunks_exact_mut(units) {
                row.copy_from_slice(lp.bias.data());
            }
            gemm_nt(n, fan_in, units, x.data(), lp.weights.data(), out.data_mut(), None);
            (out, Vec::new(), Vec::new())
        }
        LayerKind::Relu => {
            let mut out = x.clone().reshape(&out_shape).expect("relu shape");
            for v in out.data_mut() {
                if *v < T::zero() {
                    *v = T::zero();
                }
            }
            (out, Vec::new(), Vec::new())
        }
        LayerKind::MaxPool2d { size, stride } => {
            let [c, h, w] = model.input_shape_of(idx);
            let [_, oh_n, ow_n] = model.output_shape(idx);
            let mut out = Tensor::zeros(&out_shape);
            let mut arg = vec![0u32; out.len()];
            let od = out.data_mut();
            let xd = x.data();
            let mut o = 0;
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * h * w;
                    for oh in 0..oh_n {
                        for ow in 0..ow_n {
                            let mut best = base + oh * stride * w + ow * stride;
                            for kh in 0..size {
                                for kw in 0..size {
                                    let at = base + (oh * stride + kh) * w + ow * stride + kw;
                                    if xd[at] > xd[best] {
                                        best = at;
                                    }
                                }
                            }
                            od[o] = xd[best];
                            arg[o] = (best - s * c * h * w) as u32;
                            o += 1;
                        }
                    }
                }
            }
            (out, Vec::new(), if keep { arg } else { Vec::new() })
        }
        LayerKind::SoftmaxCrossEntropy => unreachable!("loss is handled by the caller"),
    }
}

fn softmax_xent<T: Float>(logits: &Tensor<T>, labels: &[usize]) -> (Tensor<T>, T) {
    let n = labels.len();
    let classes = logits.len() / n;
    let mut probs = logits.clone();
    let mut total = 0.0f64;
    for (row, &y) in probs.data_mut().chunks_exact_mut(classes).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
        total -= row[y].to_f64_lossy().max(f64::MIN_POSITIVE).ln();
    }
    (probs, T::from_f64_lossy(total / n as f64))
}

/// Gradient of the mean loss with respect to every parameter, with
/// structural pruning applied according to `mask` (`None` means dense).
pub fn backward<T: Float>(
    model: &Model,
    params: &ParamSet<T>,
    pass: &ForwardPass<T>,
    mask: Option<&ChannelMask>,
) -> Result<ParamSet<T>, EngineError> {
    let mut grads = ParamSet::zeros(model);
    let upstream = loss_gradient(model, pass)?;
    backward_from(model, params, pass, mask, model.loss_layer() - 1, upstream, &mut grads)?;
    Ok(grads)
}

/// `dL/dlogits` for the mean cross-entropy: `(p − onehot(y)) / N`.
pub fn loss_gradient<T: Float>(model: &Model, pass: &ForwardPass<T>) -> Result<Tensor<T>, EngineError> {
    if !pass.matches(model) {
        return Err(EngineError::StalePass);
    }
    let n = pass.batch_size();
    let classes = model.classes();
    let scale = T::one() / T::from_f64_lossy(n as f64);
    let mut grad = Tensor::new(
        &batch_shape(n, [classes, 1, 1]),
        pass.probabilities().to_vec(),
    )?;
    for (row, &y) in grad.data_mut().chunks_exact_mut(classes).zip(pass.labels()) {
        row[y] -= T::one();
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    Ok(grad)
}

/// Back-propagates `upstream` (the gradient with respect to the output of
/// layer `top`) down through layer 0, accumulating into `grads`.
#[allow(clippy::too_many_arguments)]
pub fn backward_from<T: Float>(
    model: &Model,
    params: &ParamSet<T>,
    pass: &ForwardPass<T>,
    mask: Option<&ChannelMask>,
    top: usize,
    upstream: Tensor<T>,
    grads: &mut ParamSet<T>,
) -> Result<(), EngineError> {
    if !pass.matches(model) {
        return Err(EngineError::StalePass);
    }
    if let Some(m) = mask {
        m.check(model)?;
    }
    params.check(model)?;
    grads.check(model)?;
    let mut current = upstream;
    for idx in (0..=top).rev() {
        match backward_layer(model, params, pass, idx, &current, mask, grads)? {
            Some(dx) => current = dx,
            None => break,
        }
    }
    Ok(())
}

/// Backward through a single layer. `upstream` is the gradient with respect
/// to the layer's output; returns the gradient with respect to its input,
/// or `None` for layer 0 (the data needs no gradient).
#[allow(clippy::too_many_arguments)]
pub fn backward_layer<T: Float>(
    model: &Model,
    params: &ParamSet<T>,
    pass: &ForwardPass<T>,
    idx: usize,
    upstream: &Tensor<T>,
    mask: Option<&ChannelMask>,
    grads: &mut ParamSet<T>,
) -> Result<Option<Tensor<T>>, EngineError> {
    if !pass.matches(model) {
        return Err(EngineError::StalePass);
    }
    let n = pass.batch_size();
    let expected = batch_shape(n, model.output_shape(idx));
    if upstream.shape() != expected {
        return Err(EngineError::Shape {
            layer: idx,
            expected: expected.to_vec(),
            actual: upstream.shape().to_vec(),
        });
    }
    let x = if idx == 0 { &pass.input } else { &pass.outputs[idx - 1] };
    let need_dx = idx > 0;
    let in_shape = batch_shape(n, model.input_shape_of(idx));
    let channel_active = model
        .owner(idx)
        .and_then(|owner| model.slot_of_layer(owner))
        .and_then(|slot| ChannelMask::for_slot(model, mask, slot));

    let dx = match model.layers()[idx].kind {
        LayerKind::Conv2d { .. } => {
            let slot = model.slot_of_layer(idx).expect("conv slot");
            let g = model.geometry(idx).expect("conv geometry");
            let lp = params.layer(slot);
            let (k, p, f) = (g.col_rows(), g.col_cols(), lp.filters());
            let in_len = g.input_len();
            let gl = grads.layer_mut(slot);
            let dz = upstream.data();
            let cols = &pass.cols[idx];
            let mut dx = need_dx.then(|| Tensor::zeros(&in_shape));
            let mut dcols = vec![T::zero(); if need_dx { k * p } else { 0 }];
            for s in 0..n {
                let dz_s = &dz[s * f * p..(s + 1) * f * p];
                let col = &cols[s * k * p..(s + 1) * k * p];
                gemm_nt(f, p, k, dz_s, col, gl.weights.data_mut(), channel_active);
                accumulate_bias_rows(dz_s, p, gl, channel_active);
                if let Some(dx) = dx.as_mut() {
                    dcols.fill(T::zero());
                    gemm_tn(f, k, p, lp.weights.data(), dz_s, &mut dcols, channel_active, None);
                    col2im_into(&dcols, g, &mut dx.data_mut()[s * in_len..(s + 1) * in_len]);
                }
            }
            dx
        }
        LayerKind::FullyConnected { units } => {
            let slot = model.slot_of_layer(idx).expect("fc slot");
            let lp = params.layer(slot);
            let fan_in = lp.fan_in();
            let gl = grads.layer_mut(slot);
            let dy = upstream.data();
            gemm_tn(n, units, fan_in, dy, x.data(), gl.weights.data_mut(), None, channel_active);
            let db = gl.bias.data_mut();
            for row in dy.chunks_exact(units) {
                for (o, (b, &v)) in db.iter_mut().zip(row).enumerate() {
                    if channel_active.map_or(true, |act| act[o]) {
                        *b += v;
                    }
                }
            }
            need_dx.then(|| {
                let mut dx = Tensor::zeros(&in_shape);
                gemm_nn(n, units, fan_in, dy, lp.weights.data(), dx.data_mut(), channel_active);
                dx
            })
        }
        LayerKind::Relu => need_dx.then(|| {
            let out = pass.outputs[idx].data();
            let plane = expected[2] * expected[3];
            let channels = expected[1];
            let mut dx = Tensor::zeros(&in_shape);
            for (i, (d, (&g, &y))) in dx
                .data_mut()
                .iter_mut()
                .zip(upstream.data().iter().zip(out))
                .enumerate()
            {
                let ch = (i / plane) % channels;
                if channel_active.map_or(true, |act| act[ch]) && y > T::zero() {
                    *d = g;
                }
            }
            dx
        }),
        LayerKind::MaxPool2d { .. } => need_dx.then(|| {
            let per_sample: usize = in_shape[1..].iter().product();
            let plane = expected[2] * expected[3];
            let channels = expected[1];
            let arg = &pass.argmax[idx];
            let mut dx = Tensor::zeros(&in_shape);
            let dxd = dx.data_mut();
            for (o, &g) in upstream.data().iter().enumerate() {
                let ch = (o / plane) % channels;
                if channel_active.map_or(true, |act| act[ch]) {
                    let s = o / (plane * channels);
                    dxd[s * per_sample + arg[o] as usize] += g;
                }
            }
            dx
        }),
        LayerKind::SoftmaxCrossEntropy => {
            return Err(EngineError::InvalidModel(
                "backward_layer: start from loss_gradient, not the loss layer".into(),
            ))
        }
    };
    Ok(dx)
}

fn accumulate_bias_rows<T: Float>(
    dz: &[T],
    positions: usize,
    grads: &mut LayerParams<T>,
    active: Option<&[bool]>,
) {
    for (f, (row, b)) in dz
        .chunks_exact(positions)
        .zip(grads.bias.data_mut())
        .enumerate()
    {
        if active.is_some_and(|act| !act[f]) {
            continue;
        }
        let mut acc = T::zero();
        for &v in row {
            acc += v;
        }
        *b += acc;
    }
}

/// `w ← w − lr·g`. Filters outside `mask` in prunable layers are left
/// untouched; local-scope and other non-prunable layers always update.
pub fn sgd_step<T: Float>(
    model: &Model,
    params: &mut ParamSet<T>,
    grads: &ParamSet<T>,
    lr: f64,
    mask: Option<&ChannelMask>,
) -> Result<(), EngineError> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(EngineError::LearningRate(lr));
    }
    params.check(model)?;
    grads.check(model)?;
    if let Some(m) = mask {
        m.check(model)?;
    }
    for (slot, g) in grads.layers().iter().enumerate() {
        if !(g.weights.all_finite() && g.bias.all_finite()) {
            return Err(EngineError::NonFinite {
                layer: model.layer_of_slot(slot),
            });
        }
    }
    let lr = T::from_f64_lossy(lr);
    for (slot, (p, g)) in params
        .layers_mut()
        .iter_mut()
        .zip(grads.layers())
        .enumerate()
    {
        let active = ChannelMask::for_slot(model, mask, slot);
        let fan_in = p.fan_in();
        for f in 0..p.filters() {
            if active.is_some_and(|act| !act[f]) {
                continue;
            }
            let gw = &g.weights.data()[f * fan_in..(f + 1) * fan_in];
            for (w, &d) in p.filter_mut(f).iter_mut().zip(gw) {
                *w -= lr * d;
            }
            p.bias.data_mut()[f] -= lr * g.bias.data()[f];
        }
    }
    Ok(())
}

/// Forward, masked backward and SGD update on one batch. Returns the pass
/// so callers can read the loss or accumulate importance.
pub fn train_step<T: Float>(
    model: &Model,
    params: &mut ParamSet<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    lr: f64,
    mask: Option<&ChannelMask>,
) -> Result<ForwardPass<T>, EngineError> {
    let pass = forward(model, params, batch, labels)?;
    let grads = backward(model, params, &pass, mask)?;
    sgd_step(model, params, &grads, lr, mask)?;
    Ok(pass)
}

/// Multiply-accumulates of the two backward products of one trainable layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerFlops {
    pub layer: usize,
    pub prunable: bool,
    /// `dW = A · dZ`
    pub weight_grad: u64,
    /// `dA = dZ · W`; zero for the first layer.
    pub input_grad: u64,
}

impl LayerFlops {
    pub fn total(&self) -> u64 {
        self.weight_grad + self.input_grad
    }
}

/// Per-sample backward multiply-accumulate counts for every trainable layer.
pub fn backprop_flops_by_layer(model: &Model, mask: Option<&ChannelMask>) -> Vec<LayerFlops> {
    (0..model.slot_count())
        .map(|slot| {
            let layer = model.layer_of_slot(slot);
            let filters = model.slot_filters(slot);
            let active = ChannelMask::for_slot(model, mask, slot)
                .map_or(filters, |act| act.iter().filter(|&&b| b).count());
            let positions = model.output_shape(layer)[1] * model.output_shape(layer)[2];
            let per_product = (active * model.slot_fan_in(slot) * positions) as u64;
            LayerFlops {
                layer,
                prunable: model.prunable_of_slot(slot).is_some(),
                weight_grad: per_product,
                input_grad: if layer == 0 { 0 } else { per_product },
            }
        })
        .collect()
}

/// Per-sample multiply-accumulates of the backward matmuls under `mask`.
pub fn count_backprop_flops(model: &Model, mask: Option<&ChannelMask>) -> u64 {
    backprop_flops_by_layer(model, mask)
        .iter()
        .map(LayerFlops::total)
        .sum()
}
