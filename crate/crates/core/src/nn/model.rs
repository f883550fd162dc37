use std::sync::Arc;

use crate::conv;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

use super::grads::{ParamVec, PerSampleGrads};
use super::layout::{ParamLayout, ParamRole};
use super::spec::{resolve, ActShape, Layer, LayerSpec, ModelSpec, GROUP_NORM_EPS};

/// A sequential network with its parameters stored in one flat buffer
/// following the [`ParamLayout`] enumeration.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar> {
    spec: ModelSpec,
    class_count: usize,
    layers: Vec<Layer>,
    layout: Arc<ParamLayout>,
    theta: Vec<T>,
}

/// What the backward pass needs from the forward pass of one sample.
struct Trace<T> {
    /// Activation entering each layer, plus the final output.
    acts: Vec<Vec<T>>,
    aux: Vec<Aux<T>>,
}

enum Aux<T> {
    None,
    Norm { xhat: Vec<T>, inv_std: Vec<T> },
    Pool(Vec<usize>),
}

fn he_std(info_shape: &Shape) -> f64 {
    let fan_in: usize = info_shape.dims()[1..].iter().product();
    (2.0 / fan_in as f64).sqrt()
}

impl<T: Scalar> Model<T> {
    /// Builds a model with He-scaled Gaussian weights, zero biases, unit
    /// norm scales and zero norm shifts. Weights are drawn from `init` in
    /// layout order.
    pub fn build(spec: &ModelSpec, class_count: usize, init: &mut RngStream) -> Result<Self> {
        let mut model = Self::zeroed(spec, class_count)?;
        let layout = model.layout.clone();
        for info in layout.entries() {
            let dst = &mut model.theta[info.range()];
            match info.role {
                ParamRole::Weight => {
                    let std = he_std(&info.shape);
                    for v in dst.iter_mut() {
                        *v = T::of(init.normal() * std);
                    }
                }
                ParamRole::Scale => dst.fill(T::one()),
                ParamRole::Bias | ParamRole::Shift => dst.fill(T::zero()),
            }
        }
        Ok(model)
    }

    pub(crate) fn zeroed(spec: &ModelSpec, class_count: usize) -> Result<Self> {
        if class_count == 0 {
            return Err(Error::config("class_count must be positive"));
        }
        let (layers, out) = resolve(spec)?;
        if out != ActShape::Flat(class_count) {
            return Err(Error::config(format!(
                "model output {:?} does not match {class_count} classes",
                out.dims()
            )));
        }
        let layout = Arc::new(ParamLayout::for_layers(&layers));
        let theta = vec![T::zero(); layout.total()];
        Ok(Model {
            spec: spec.clone(),
            class_count,
            layers,
            layout,
            theta,
        })
    }

    /// Reassembles a model from a spec and a flat parameter vector.
    pub fn from_flat(spec: &ModelSpec, class_count: usize, theta: Vec<T>) -> Result<Self> {
        let mut model = Self::zeroed(spec, class_count)?;
        if theta.len() != model.theta.len() {
            return Err(Error::shape(format!(
                "spec needs {} parameters, got {}",
                model.theta.len(),
                theta.len()
            )));
        }
        if !theta.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("Model::from_flat"));
        }
        model.theta = theta;
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn input_dims(&self) -> &[usize] {
        &self.spec.input
    }

    pub fn input_len(&self) -> usize {
        self.spec.input.iter().product()
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    /// All parameters in global flat order.
    pub fn params(&self) -> &[T] {
        &self.theta
    }

    pub fn param(&self, i: usize) -> &[T] {
        &self.theta[self.layout.entries()[i].range()]
    }

    pub fn param_tensor(&self, i: usize) -> Tensor<T> {
        let info = &self.layout.entries()[i];
        Tensor::from_parts_unchecked(info.shape.clone(), self.param(i).to_vec())
    }

    pub fn set_param(&mut self, i: usize, values: &[T]) -> Result<()> {
        let info = self
            .layout
            .get(i)
            .ok_or(Error::Index { index: i, len: self.layout.len() })?;
        if values.len() != info.len() {
            return Err(Error::shape(format!(
                "{} has {} entries, got {}",
                info.name,
                info.len(),
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("Model::set_param"));
        }
        let r = info.range();
        self.theta[r].copy_from_slice(values);
        Ok(())
    }

    /// Same network with parameters converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            class_count: self.class_count,
            layers: self.layers.clone(),
            layout: self.layout.clone(),
            theta: self.theta.iter().map(|&v| U::of(v.real())).collect(),
        }
    }

    /// `params <- params - delta`.
    pub fn apply_update(&mut self, delta: &ParamVec<T>) -> Result<()> {
        if **delta.layout() != *self.layout {
            return Err(Error::shape("update does not match the model parameter layout"));
        }
        let next: Vec<T> = self
            .theta
            .iter()
            .zip(delta.data())
            .map(|(&p, &d)| p - d)
            .collect();
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("Model::apply_update"));
        }
        self.theta = next;
        Ok(())
    }

    /// Replaces the final fully-connected layer with a freshly initialized
    /// one of width `new_class_count`; every other parameter is copied.
    pub fn reinit_last_layer(&self, new_class_count: usize, stream: &mut RngStream) -> Result<Self> {
        let last = self.spec.layers.len() - 1;
        if !matches!(self.spec.layers[last], LayerSpec::Linear { .. }) {
            return Err(Error::config("last layer is not fully-connected"));
        }
        let mut spec = self.spec.clone();
        spec.layers[last] = LayerSpec::fc(new_class_count);
        let mut next = Self::zeroed(&spec, new_class_count)?;
        for info in next.layout.entries().to_vec() {
            let dst = &mut next.theta[info.range()];
            if info.layer != last {
                let src = self.layout.entries().iter().find(|e| e.name == info.name);
                let src = src.expect("layers before the last are unchanged");
                dst.copy_from_slice(&self.theta[src.range()]);
            } else if info.role == ParamRole::Weight {
                let std = he_std(&info.shape);
                for v in dst.iter_mut() {
                    *v = T::of(stream.normal() * std);
                }
            } else {
                dst.fill(T::zero());
            }
        }
        Ok(next)
    }

    fn check_batch(&self, inputs: &Tensor<T>) -> Result<usize> {
        let d = inputs.dims();
        if d.len() != self.spec.input.len() + 1 || d[1..] != self.spec.input[..] {
            return Err(Error::shape(format!(
                "input {:?} does not match model input [B, {:?}]",
                d, self.spec.input
            )));
        }
        Ok(d[0])
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.class_count) {
            return Err(Error::data(format!(
                "label {bad} out of range for {} classes",
                self.class_count
            )));
        }
        Ok(())
    }

    /// Logits `[B, class_count]`. Normalization statistics are per sample.
    pub fn forward(&self, inputs: &Tensor<T>) -> Result<Tensor<T>> {
        let batch = self.check_batch(inputs)?;
        let mut out = Vec::with_capacity(batch * self.class_count);
        for x in inputs.data().chunks_exact(self.input_len()) {
            out.extend(self.forward_sample(x));
        }
        Tensor::new(Shape::new(vec![batch, self.class_count])?, out)
    }

    /// Logits for one sample given as a flat slice.
    pub fn forward_sample(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.input_len());
        let mut act = x.to_vec();
        for li in 0..self.layers.len() {
            act = self.layer_forward(li, &act, None);
        }
        act
    }

    pub fn predict(&self, x: &[T]) -> usize {
        argmax(&self.forward_sample(x))
    }

    /// Mean cross-entropy over the batch and the exact gradient of each
    /// sample's loss.
    pub fn loss_and_per_sample_gradients(
        &self,
        inputs: &Tensor<T>,
        labels: &[usize],
    ) -> Result<(T, PerSampleGrads<T>)> {
        let batch = self.check_batch(inputs)?;
        let samples: Vec<&[T]> = inputs.data().chunks_exact(self.input_len()).collect();
        if labels.len() != batch {
            return Err(Error::shape(format!("{batch} inputs but {} labels", labels.len())));
        }
        self.per_sample_gradients(&samples, labels)
    }

    /// Slice-based variant of [`Model::loss_and_per_sample_gradients`].
    pub fn per_sample_gradients(&self, samples: &[&[T]], labels: &[usize]) -> Result<(T, PerSampleGrads<T>)> {
        self.check_samples(samples, labels)?;
        let mut grads = PerSampleGrads::zeros(self.layout.clone(), samples.len());
        let mut total = T::zero();
        for (b, (x, &y)) in samples.iter().zip(labels).enumerate() {
            total += self.sample_backward(x, y, grads.sample_mut(b));
        }
        let mean = if samples.is_empty() { T::zero() } else { total / T::count(samples.len()) };
        Ok((mean, grads))
    }

    /// Mean loss and the gradient of the mean loss (non-private training).
    pub fn mean_gradient(&self, samples: &[&[T]], labels: &[usize]) -> Result<(T, ParamVec<T>)> {
        self.check_samples(samples, labels)?;
        let mut g = ParamVec::zeros(self.layout.clone());
        let mut total = T::zero();
        for (x, &y) in samples.iter().zip(labels) {
            total += self.sample_backward(x, y, g.data_mut());
        }
        if samples.is_empty() {
            return Ok((T::zero(), g));
        }
        let inv = T::one() / T::count(samples.len());
        for v in g.data_mut() {
            *v *= inv;
        }
        Ok((total * inv, g))
    }

    fn check_samples(&self, samples: &[&[T]], labels: &[usize]) -> Result<()> {
        if samples.len() != labels.len() {
            return Err(Error::shape(format!("{} inputs but {} labels", samples.len(), labels.len())));
        }
        if let Some(x) = samples.iter().find(|x| x.len() != self.input_len()) {
            return Err(Error::shape(format!(
                "sample has {} values, model input needs {}",
                x.len(),
                self.input_len()
            )));
        }
        self.check_labels(labels)
    }

    /// Forward and backward for one sample; adds its gradient into `grad`
    /// and returns its loss.
    fn sample_backward(&self, x: &[T], label: usize, grad: &mut [T]) -> T {
        let n = self.layers.len();
        let mut trace = Trace {
            acts: Vec::with_capacity(n + 1),
            aux: Vec::with_capacity(n),
        };
        trace.acts.push(x.to_vec());
        for li in 0..n {
            let mut aux = Aux::None;
            let y = self.layer_forward(li, &trace.acts[li], Some(&mut aux));
            trace.acts.push(y);
            trace.aux.push(aux);
        }
        let (loss, mut gy) = cross_entropy(&trace.acts[n], label);
        for li in (0..n).rev() {
            gy = self.layer_backward(li, &trace, &gy, grad, li > 0);
        }
        loss
    }

    fn layer_forward(&self, li: usize, x: &[T], aux: Option<&mut Aux<T>>) -> Vec<T> {
        let lp = self.layout.layer(li);
        let p = |i: Option<usize>| -> &[T] { &self.theta[self.layout.entries()[i.unwrap()].range()] };
        match self.layers[li] {
            Layer::Conv(ref g) => {
                let mut out = vec![T::zero(); g.output_len()];
                conv::forward_single(g, x, p(lp.weight), p(lp.bias), &mut out);
                out
            }
            Layer::Linear { inputs, outputs } => {
                let (w, b) = (p(lp.weight), p(lp.bias));
                (0..outputs)
                    .map(|o| {
                        let row = &w[o * inputs..(o + 1) * inputs];
                        b[o] + row.iter().zip(x).map(|(&a, &v)| a * v).sum::<T>()
                    })
                    .collect()
            }
            Layer::GroupNorm { channels, groups, spatial } => {
                let (scale, shift) = (p(lp.scale), p(lp.shift));
                let m = channels / groups * spatial;
                let eps = T::of(GROUP_NORM_EPS);
                let mut xhat = vec![T::zero(); x.len()];
                let mut inv_std = vec![T::zero(); groups];
                for gi in 0..groups {
                    let xs = &x[gi * m..(gi + 1) * m];
                    let mean = xs.iter().copied().sum::<T>() / T::count(m);
                    let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / T::count(m);
                    let inv = T::one() / (var + eps).sqrt();
                    inv_std[gi] = inv;
                    for (h, &v) in xhat[gi * m..(gi + 1) * m].iter_mut().zip(xs) {
                        *h = (v - mean) * inv;
                    }
                }
                let y = xhat
                    .iter()
                    .enumerate()
                    .map(|(k, &h)| {
                        let c = k / spatial;
                        scale[c] * h + shift[c]
                    })
                    .collect();
                if let Some(aux) = aux {
                    *aux = Aux::Norm { xhat, inv_std };
                }
                y
            }
            Layer::Relu => x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
            Layer::MaxPool { channels, in_h, in_w, size, out_h, out_w } => {
                let mut y = Vec::with_capacity(channels * out_h * out_w);
                let mut arg = Vec::with_capacity(if aux.is_some() { y.capacity() } else { 0 });
                for c in 0..channels {
                    for oi in 0..out_h {
                        for oj in 0..out_w {
                            let mut best = c * in_h * in_w + oi * size * in_w + oj * size;
                            for di in 0..size {
                                for dj in 0..size {
                                    let k = c * in_h * in_w + (oi * size + di) * in_w + oj * size + dj;
                                    if x[k] > x[best] {
                                        best = k;
                                    }
                                }
                            }
                            y.push(x[best]);
                            if aux.is_some() {
                                arg.push(best);
                            }
                        }
                    }
                }
                if let Some(aux) = aux {
                    *aux = Aux::Pool(arg);
                }
                y
            }
            Layer::Flatten => x.to_vec(),
        }
    }

    /// Accumulates parameter gradients of layer `li` into `grad` and returns
    /// the gradient with respect to the layer input (empty when not needed).
    fn layer_backward(&self, li: usize, trace: &Trace<T>, gy: &[T], grad: &mut [T], need_input: bool) -> Vec<T> {
        let lp = self.layout.layer(li);
        let entries = self.layout.entries();
        let x = &trace.acts[li];
        match self.layers[li] {
            Layer::Conv(ref g) => {
                let (wr, br) = (entries[lp.weight.unwrap()].range(), entries[lp.bias.unwrap()].range());
                let (gw, gb) = two_mut(grad, wr.clone(), br);
                let mut gx = if need_input { vec![T::zero(); x.len()] } else { Vec::new() };
                let gx_opt = if need_input { Some(gx.as_mut_slice()) } else { None };
                conv::backward_single(g, x, &self.theta[wr], gy, gw, gb, gx_opt);
                gx
            }
            Layer::Linear { inputs, outputs } => {
                let (wr, br) = (entries[lp.weight.unwrap()].range(), entries[lp.bias.unwrap()].range());
                let w = &self.theta[wr.clone()];
                let (gw, gb) = two_mut(grad, wr, br);
                let mut gx = if need_input { vec![T::zero(); inputs] } else { Vec::new() };
                for o in 0..outputs {
                    let g = gy[o];
                    gb[o] += g;
                    for (d, &v) in gw[o * inputs..(o + 1) * inputs].iter_mut().zip(x) {
                        *d += g * v;
                    }
                    if need_input {
                        for (d, &wv) in gx.iter_mut().zip(&w[o * inputs..(o + 1) * inputs]) {
                            *d += wv * g;
                        }
                    }
                }
                gx
            }
            Layer::GroupNorm { channels, groups, spatial } => {
                let Aux::Norm { ref xhat, ref inv_std } = trace.aux[li] else {
                    unreachable!("group norm trace")
                };
                let (sr, hr) = (entries[lp.scale.unwrap()].range(), entries[lp.shift.unwrap()].range());
                let scale = &self.theta[sr.clone()];
                let (gscale, gshift) = two_mut(grad, sr, hr);
                let mut gxhat = vec![T::zero(); gy.len()];
                for c in 0..channels {
                    let r = c * spatial..(c + 1) * spatial;
                    let (mut s1, mut s2) = (T::zero(), T::zero());
                    for ((&g, &h), d) in gy[r.clone()].iter().zip(&xhat[r.clone()]).zip(&mut gxhat[r]) {
                        s1 += g;
                        s2 += g * h;
                        *d = g * scale[c];
                    }
                    gshift[c] += s1;
                    gscale[c] += s2;
                }
                if !need_input {
                    return Vec::new();
                }
                let m = channels / groups * spatial;
                let mut gx = vec![T::zero(); gy.len()];
                for (gi, &inv) in inv_std.iter().enumerate() {
                    let r = gi * m..(gi + 1) * m;
                    let (gh, h) = (&gxhat[r.clone()], &xhat[r.clone()]);
                    let mean_g = gh.iter().copied().sum::<T>() / T::count(m);
                    let mean_gh = gh.iter().zip(h).map(|(&a, &b)| a * b).sum::<T>() / T::count(m);
                    for ((d, &a), &b) in gx[r].iter_mut().zip(gh).zip(h) {
                        *d = inv * (a - mean_g - b * mean_gh);
                    }
                }
                gx
            }
            Layer::Relu => {
                let y = &trace.acts[li + 1];
                gy.iter()
                    .zip(y)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect()
            }
            Layer::MaxPool { .. } => {
                let Aux::Pool(ref arg) = trace.aux[li] else {
                    unreachable!("pool trace")
                };
                let mut gx = vec![T::zero(); x.len()];
                for (&k, &g) in arg.iter().zip(gy) {
                    gx[k] += g;
                }
                gx
            }
            Layer::Flatten => gy.to_vec(),
        }
    }
}

/// Disjoint mutable views of two non-overlapping ranges.
fn two_mut<T>(buf: &mut [T], a: std::ops::Range<usize>, b: std::ops::Range<usize>) -> (&mut [T], &mut [T]) {
    if a.start < b.start {
        let (lo, hi) = buf.split_at_mut(b.start);
        (&mut lo[a], &mut hi[..b.end - b.start])
    } else {
        let (lo, hi) = buf.split_at_mut(a.start);
        (&mut hi[..a.end - a.start], &mut lo[b])
    }
}

pub(crate) fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Loss and gradient with respect to the logits, via log-sum-exp.
fn cross_entropy<T: Scalar>(logits: &[T], label: usize) -> (T, Vec<T>) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
    let mut g: Vec<T> = logits.iter().map(|&z| (z - lse).exp()).collect();
    g[label] -= T::one();
    (lse - logits[label], g)
}
