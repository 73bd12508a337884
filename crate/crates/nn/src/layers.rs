//! Layer kernels: forward passes with cached state and exact backward passes.
//!
//! Spatial activations are `(N, H, W, C)` row-major; flat activations are
//! `(N, F)`. Convolutions run as im2col followed by a single GEMM.

use patchgrid_core::tensor::matmul;
use patchgrid_core::{Rng, Scalar, Tensor};

use crate::error::{NnError, Result};
use crate::spec::LayerSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T> {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// `(kernel, kernel, in_channels, out_channels)`
    pub weight: Tensor<T>,
    /// `(out_channels)`
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    /// `(inputs, outputs)`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Conv(Conv<T>),
    Relu,
    MaxPool { kernel: usize, stride: usize },
    Residual(Vec<Layer<T>>),
    Flatten,
    Dense(Dense<T>),
    Dropout(f64),
    Softmax,
}

#[derive(Clone, Debug)]
pub enum Cache<T> {
    Conv { input_shape: Vec<usize>, cols: Vec<T> },
    Relu { active: Vec<bool> },
    MaxPool { input_shape: Vec<usize>, argmax: Vec<usize> },
    Residual(Vec<Cache<T>>),
    Flatten { input_shape: Vec<usize> },
    Dense { input: Tensor<T> },
    Dropout { scale: Option<Vec<T>> },
    Softmax { output: Tensor<T> },
}

fn kaiming_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of_f64(rng.uniform_in(-bound, bound)))
}

fn spatial(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, h, w, c] => Ok((n, h, w, c)),
        _ => Err(NnError::Shape(format!("{what} expects (N, H, W, C), got {shape:?}"))),
    }
}

impl<T: Scalar> Conv<T> {
    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        ((h + 2 * self.padding - self.kernel) / self.stride + 1, (w + 2 * self.padding - self.kernel) / self.stride + 1)
    }

    fn im2col(&self, x: &[T], n: usize, h: usize, w: usize) -> Vec<T> {
        let (k, c, s, p) = (self.kernel, self.in_channels, self.stride, self.padding);
        let (ho, wo) = self.out_hw(h, w);
        let row_len = k * k * c;
        let mut cols = vec![T::zero(); n * ho * wo * row_len];
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = ((b * ho + oy) * wo + ox) * row_len;
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let src = ((b * h + iy as usize) * w + ix as usize) * c;
                            let dst = row + (ky * k + kx) * c;
                            cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[T], n: usize, h: usize, w: usize) -> Vec<T> {
        let (k, c, s, p) = (self.kernel, self.in_channels, self.stride, self.padding);
        let (ho, wo) = self.out_hw(h, w);
        let row_len = k * k * c;
        let mut x = vec![T::zero(); n * h * w * c];
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = ((b * ho + oy) * wo + ox) * row_len;
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let dst = ((b * h + iy as usize) * w + ix as usize) * c;
                            let src = row + (ky * k + kx) * c;
                            for ch in 0..c {
                                x[dst + ch] += cols[src + ch];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T]) {
    for row in out.chunks_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn column_sums<T: Scalar>(grad: &[T], width: usize) -> Vec<T> {
    let mut sums = vec![T::zero(); width];
    for row in grad.chunks(width) {
        for (s, &g) in sums.iter_mut().zip(row) {
            *s += g;
        }
    }
    sums
}

impl<T: Scalar> Layer<T> {
    /// Materializes `spec` for an input of `input_shape` (batch axis omitted).
    pub fn init(spec: &LayerSpec, input_shape: &[usize], rng: &mut Rng) -> Result<Self> {
        spec.output_shape(input_shape)?;
        Ok(match *spec {
            LayerSpec::Conv { out_channels, kernel, stride, padding } => {
                let in_channels = input_shape[2];
                let fan_in = kernel * kernel * in_channels;
                Layer::Conv(Conv {
                    kernel,
                    stride,
                    padding,
                    in_channels,
                    out_channels,
                    weight: kaiming_uniform(&[kernel, kernel, in_channels, out_channels], fan_in, &mut rng.child(0)),
                    bias: Tensor::zeros(&[out_channels]),
                })
            }
            LayerSpec::Dense { nodes } => {
                let inputs = input_shape[0];
                Layer::Dense(Dense {
                    weight: kaiming_uniform(&[inputs, nodes], inputs, &mut rng.child(0)),
                    bias: Tensor::zeros(&[nodes]),
                })
            }
            LayerSpec::Residual(ref block) => {
                let mut shape = input_shape.to_vec();
                let mut layers = Vec::with_capacity(block.len());
                for (i, inner) in block.iter().enumerate() {
                    layers.push(Layer::init(inner, &shape, &mut rng.child(i as u64))?);
                    shape = inner.output_shape(&shape)?;
                }
                Layer::Residual(layers)
            }
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::MaxPool { kernel, stride } => Layer::MaxPool { kernel, stride },
            LayerSpec::Flatten => Layer::Flatten,
            LayerSpec::Dropout { probability } => Layer::Dropout(probability),
            LayerSpec::Softmax => Layer::Softmax,
        })
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::Conv(c) => vec![&c.weight, &c.bias],
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            Layer::Residual(block) => block.iter().flat_map(Layer::params).collect(),
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Conv(c) => vec![&mut c.weight, &mut c.bias],
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            Layer::Residual(block) => block.iter_mut().flat_map(Layer::params_mut).collect(),
            _ => vec![],
        }
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        match self {
            Layer::Conv(_) | Layer::Dense(_) => vec![format!("{prefix}.weight"), format!("{prefix}.bias")],
            Layer::Residual(block) => {
                block.iter().enumerate().flat_map(|(i, l)| l.param_names(&format!("{prefix}.{i}"))).collect()
            }
            _ => vec![],
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv(_) | Layer::Dense(_) => 2,
            Layer::Residual(block) => block.iter().map(Layer::param_count).sum(),
            _ => 0,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Layer<U> {
        match self {
            Layer::Conv(c) => Layer::Conv(Conv {
                kernel: c.kernel,
                stride: c.stride,
                padding: c.padding,
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                weight: c.weight.cast(),
                bias: c.bias.cast(),
            }),
            Layer::Dense(d) => Layer::Dense(Dense { weight: d.weight.cast(), bias: d.bias.cast() }),
            Layer::Residual(block) => Layer::Residual(block.iter().map(Layer::cast).collect()),
            Layer::Relu => Layer::Relu,
            Layer::MaxPool { kernel, stride } => Layer::MaxPool { kernel: *kernel, stride: *stride },
            Layer::Flatten => Layer::Flatten,
            Layer::Dropout(p) => Layer::Dropout(*p),
            Layer::Softmax => Layer::Softmax,
        }
    }

    /// Runs the layer on a batch. The cache is only built when `keep` is set.
    pub fn forward(
        &self,
        x: Tensor<T>,
        mode: Mode,
        rng: &mut Rng,
        keep: bool,
    ) -> Result<(Tensor<T>, Option<Cache<T>>)> {
        match self {
            Layer::Conv(conv) => {
                let (n, h, w, c) = spatial(x.shape(), "conv")?;
                if c != conv.in_channels || h + 2 * conv.padding < conv.kernel || w + 2 * conv.padding < conv.kernel {
                    return Err(NnError::Shape(format!(
                        "conv over {} channels cannot take {:?}",
                        conv.in_channels,
                        x.shape()
                    )));
                }
                let (ho, wo) = conv.out_hw(h, w);
                let cols = conv.im2col(x.data(), n, h, w);
                let m = n * ho * wo;
                let kk = conv.kernel * conv.kernel * c;
                let mut out = vec![T::zero(); m * conv.out_channels];
                matmul(&cols, false, conv.weight.data(), false, &mut out, m, kk, conv.out_channels, false);
                add_bias(&mut out, conv.bias.data());
                let cache = keep.then(|| Cache::Conv { input_shape: x.shape().to_vec(), cols });
                Ok((Tensor::new(vec![n, ho, wo, conv.out_channels], out)?, cache))
            }
            Layer::Dense(dense) => {
                let (n, f) = match *x.shape() {
                    [n, f] => (n, f),
                    _ => return Err(NnError::Shape(format!("dense expects (N, F), got {:?}", x.shape()))),
                };
                let (fin, fout) = (dense.weight.shape()[0], dense.weight.shape()[1]);
                if f != fin {
                    return Err(NnError::Shape(format!("dense over {fin} inputs got {f}")));
                }
                let mut out = vec![T::zero(); n * fout];
                matmul(x.data(), false, dense.weight.data(), false, &mut out, n, fin, fout, false);
                add_bias(&mut out, dense.bias.data());
                let out = Tensor::new(vec![n, fout], out)?;
                Ok((out, keep.then(|| Cache::Dense { input: x })))
            }
            Layer::Relu => {
                let mut x = x;
                let mut active = Vec::new();
                if keep {
                    active.reserve(x.len());
                }
                for v in x.data_mut() {
                    let on = *v > T::zero();
                    if !on {
                        *v = T::zero();
                    }
                    if keep {
                        active.push(on);
                    }
                }
                Ok((x, keep.then_some(Cache::Relu { active })))
            }
            Layer::MaxPool { kernel, stride } => {
                let (n, h, w, c) = spatial(x.shape(), "max pool")?;
                if h < *kernel || w < *kernel {
                    return Err(NnError::Shape(format!("{kernel}x{kernel} pool does not fit {:?}", x.shape())));
                }
                let (ho, wo) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
                let src = x.data();
                let mut out = Vec::with_capacity(n * ho * wo * c);
                let mut argmax = Vec::with_capacity(if keep { n * ho * wo * c } else { 0 });
                for b in 0..n {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            for ch in 0..c {
                                let mut best = usize::MAX;
                                for ky in 0..*kernel {
                                    for kx in 0..*kernel {
                                        let idx = ((b * h + oy * stride + ky) * w + ox * stride + kx) * c + ch;
                                        if best == usize::MAX || src[idx] > src[best] {
                                            best = idx;
                                        }
                                    }
                                }
                                out.push(src[best]);
                                if keep {
                                    argmax.push(best);
                                }
                            }
                        }
                    }
                }
                let cache = keep.then(|| Cache::MaxPool { input_shape: x.shape().to_vec(), argmax });
                Ok((Tensor::new(vec![n, ho, wo, c], out)?, cache))
            }
            Layer::Residual(block) => {
                let skip = x.clone();
                let mut y = x;
                let mut caches = Vec::with_capacity(block.len());
                for (i, layer) in block.iter().enumerate() {
                    let (out, cache) = layer.forward(y, mode, &mut rng.child(i as u64), keep)?;
                    y = out;
                    caches.extend(cache);
                }
                if y.shape() != skip.shape() {
                    return Err(NnError::Shape(format!(
                        "residual block changed shape {:?} -> {:?}",
                        skip.shape(),
                        y.shape()
                    )));
                }
                for (v, &s) in y.data_mut().iter_mut().zip(skip.data()) {
                    *v += s;
                }
                Ok((y, keep.then_some(Cache::Residual(caches))))
            }
            Layer::Flatten => {
                let input_shape = x.shape().to_vec();
                let n = input_shape[0];
                let f = x.len() / n;
                let y = x.reshape(&[n, f])?;
                Ok((y, keep.then_some(Cache::Flatten { input_shape })))
            }
            Layer::Dropout(p) => {
                if mode == Mode::Eval || *p == 0.0 {
                    return Ok((x, keep.then_some(Cache::Dropout { scale: None })));
                }
                let keep_scale = T::of_f64(1.0 / (1.0 - p));
                let scale: Vec<T> =
                    (0..x.len()).map(|_| if rng.bernoulli(*p) { T::zero() } else { keep_scale }).collect();
                let mut x = x;
                for (v, &s) in x.data_mut().iter_mut().zip(&scale) {
                    *v *= s;
                }
                Ok((x, keep.then_some(Cache::Dropout { scale: Some(scale) })))
            }
            Layer::Softmax => {
                let y = softmax_rows(&x)?;
                let cache = keep.then(|| Cache::Softmax { output: y.clone() });
                Ok((y, cache))
            }
        }
    }

    /// Propagates `grad` (w.r.t. this layer's output) backwards, writing
    /// parameter gradients into `param_grads` (this layer's slots, in
    /// [`Layer::params`] order). The input gradient is skipped when not needed.
    pub fn backward(
        &self,
        cache: &Cache<T>,
        grad: Tensor<T>,
        need_input: bool,
        param_grads: &mut [Option<Tensor<T>>],
    ) -> Result<Option<Tensor<T>>> {
        let mismatch = || NnError::Shape("cache does not belong to this layer".into());
        match (self, cache) {
            (Layer::Conv(conv), Cache::Conv { input_shape, cols }) => {
                let (n, h, w, c) = spatial(input_shape, "conv")?;
                let (ho, wo) = conv.out_hw(h, w);
                let m = n * ho * wo;
                let kk = conv.kernel * conv.kernel * c;
                let co = conv.out_channels;
                if grad.len() != m * co {
                    return Err(NnError::Shape(format!("conv output grad {:?}", grad.shape())));
                }
                let mut dw = vec![T::zero(); kk * co];
                matmul(cols, true, grad.data(), false, &mut dw, kk, m, co, false);
                param_grads[0] = Some(Tensor::new(conv.weight.shape().to_vec(), dw)?);
                param_grads[1] = Some(Tensor::new(vec![co], column_sums(grad.data(), co))?);
                if !need_input {
                    return Ok(None);
                }
                let mut dcols = vec![T::zero(); m * kk];
                matmul(grad.data(), false, conv.weight.data(), true, &mut dcols, m, co, kk, false);
                Ok(Some(Tensor::new(input_shape.clone(), conv.col2im(&dcols, n, h, w))?))
            }
            (Layer::Dense(dense), Cache::Dense { input }) => {
                let (n, fin) = (input.shape()[0], input.shape()[1]);
                let fout = dense.weight.shape()[1];
                if grad.shape() != [n, fout] {
                    return Err(NnError::Shape(format!("dense output grad {:?}", grad.shape())));
                }
                let mut dw = vec![T::zero(); fin * fout];
                matmul(input.data(), true, grad.data(), false, &mut dw, fin, n, fout, false);
                param_grads[0] = Some(Tensor::new(vec![fin, fout], dw)?);
                param_grads[1] = Some(Tensor::new(vec![fout], column_sums(grad.data(), fout))?);
                if !need_input {
                    return Ok(None);
                }
                let mut dx = vec![T::zero(); n * fin];
                matmul(grad.data(), false, dense.weight.data(), true, &mut dx, n, fout, fin, false);
                Ok(Some(Tensor::new(vec![n, fin], dx)?))
            }
            (Layer::Relu, Cache::Relu { active }) => {
                let mut g = grad;
                if g.len() != active.len() {
                    return Err(mismatch());
                }
                for (v, &on) in g.data_mut().iter_mut().zip(active) {
                    if !on {
                        *v = T::zero();
                    }
                }
                Ok(Some(g))
            }
            (Layer::MaxPool { .. }, Cache::MaxPool { input_shape, argmax }) => {
                if grad.len() != argmax.len() {
                    return Err(mismatch());
                }
                let mut dx = vec![T::zero(); input_shape.iter().product()];
                for (&g, &idx) in grad.data().iter().zip(argmax) {
                    dx[idx] += g;
                }
                Ok(Some(Tensor::new(input_shape.clone(), dx)?))
            }
            (Layer::Residual(block), Cache::Residual(caches)) => {
                if caches.len() != block.len() {
                    return Err(mismatch());
                }
                let mut offsets = Vec::with_capacity(block.len());
                let mut offset = 0;
                for layer in block {
                    offsets.push(offset);
                    offset += layer.param_count();
                }
                let mut g = grad.clone();
                for (i, layer) in block.iter().enumerate().rev() {
                    let slots = &mut param_grads[offsets[i]..offsets[i] + layer.param_count()];
                    g = layer
                        .backward(&caches[i], g, true, slots)?
                        .ok_or_else(|| NnError::Shape("residual branch lost its gradient".into()))?;
                }
                for (v, &s) in g.data_mut().iter_mut().zip(grad.data()) {
                    *v += s;
                }
                Ok(Some(g))
            }
            (Layer::Flatten, Cache::Flatten { input_shape }) => Ok(Some(grad.reshape(input_shape)?)),
            (Layer::Dropout(_), Cache::Dropout { scale }) => {
                let mut g = grad;
                if let Some(scale) = scale {
                    if scale.len() != g.len() {
                        return Err(mismatch());
                    }
                    for (v, &s) in g.data_mut().iter_mut().zip(scale) {
                        *v *= s;
                    }
                }
                Ok(Some(g))
            }
            (Layer::Softmax, Cache::Softmax { output }) => {
                if grad.shape() != output.shape() {
                    return Err(mismatch());
                }
                let classes = output.shape()[1];
                let mut dx = Vec::with_capacity(output.len());
                for (p, g) in output.data().chunks(classes).zip(grad.data().chunks(classes)) {
                    let dot: T = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
                    dx.extend(p.iter().zip(g).map(|(&pi, &gi)| pi * (gi - dot)));
                }
                Ok(Some(Tensor::new(output.shape().to_vec(), dx)?))
            }
            _ => Err(mismatch()),
        }
    }
}

/// Row-wise softmax over the last axis of an `(N, C)` tensor.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let classes = match *x.shape() {
        [_, c] => c,
        _ => return Err(NnError::Shape(format!("softmax expects (N, C), got {:?}", x.shape()))),
    };
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(classes) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        out.extend(row.iter().map(|&v| (v - max).exp()));
        let sum: T = out[start..].iter().copied().sum();
        out[start..].iter_mut().for_each(|v| *v = *v / sum);
    }
    Ok(Tensor::new(x.shape().to_vec(), out)?)
}
