//! A materialized [`ModelSpec`]: parameters plus forward and backward passes.

use patchgrid_core::{Rng, Scalar, Tensor};

use crate::error::{NnError, Result};
pub use crate::layers::Mode;
use crate::layers::{Cache, Layer};
use crate::spec::{LayerSpec, ModelSpec};

/// Per-layer state recorded by [`Network::forward`].
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    caches: Vec<Cache<T>>,
    mode: Mode,
}

impl<T> ForwardCache<T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

/// Parameter gradients in [`Network::params`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T>(pub Vec<Tensor<T>>);

impl<T: Scalar> Gradients<T> {
    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Tensor::is_finite)
    }

    pub fn max_abs(&self) -> T {
        self.0.iter().flat_map(|t| t.data().iter()).fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    spec: ModelSpec,
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> Network<T> {
    /// Kaiming-uniform weights and zero biases drawn from `rng` (one child
    /// stream per layer).
    pub fn init(spec: &ModelSpec, rng: &Rng) -> Result<Self> {
        spec.validate()?;
        let mut shape = spec.input_shape();
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            layers.push(Layer::init(layer, &shape, &mut rng.child(i as u64))?);
            shape = layer.output_shape(&shape)?;
        }
        Ok(Self { spec: spec.clone(), layers })
    }

    /// Rebuilds a network from parameters in [`Network::params`] order.
    pub fn from_params(spec: &ModelSpec, params: Vec<Tensor<T>>) -> Result<Self> {
        let mut net = Self::init(spec, &Rng::seeded(0))?;
        let slots = net.params_mut();
        if slots.len() != params.len() {
            return Err(NnError::Shape(format!("model has {} parameter tensors, got {}", slots.len(), params.len())));
        }
        for (slot, p) in slots.into_iter().zip(params) {
            if slot.shape() != p.shape() {
                return Err(NnError::Shape(format!(
                    "parameter shape {:?} does not match {:?}",
                    p.shape(),
                    slot.shape()
                )));
            }
            *slot = p;
        }
        Ok(net)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn class_count(&self) -> usize {
        self.spec.class_count
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.layers.iter().enumerate().flat_map(|(i, l)| l.param_names(&format!("layers.{i}"))).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network { spec: self.spec.clone(), layers: self.layers.iter().map(Layer::cast).collect() }
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<()> {
        let (h, w, c) = self.spec.input_size;
        match *batch.shape() {
            [_, bh, bw, bc] if (bh, bw, bc) == (h, w, c) => Ok(()),
            _ => Err(NnError::Shape(format!("batch {:?} does not match input (N, {h}, {w}, {c})", batch.shape()))),
        }
    }

    fn run(
        &self,
        batch: &Tensor<T>,
        upto: usize,
        mode: Mode,
        rng: &mut Rng,
        keep: bool,
    ) -> Result<(Tensor<T>, Vec<Cache<T>>)> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        let mut caches = Vec::with_capacity(if keep { upto } else { 0 });
        for (i, layer) in self.layers[..upto].iter().enumerate() {
            let (y, cache) = layer
                .forward(x, mode, &mut rng.child(i as u64), keep)
                .map_err(|e| NnError::Shape(format!("layer {i}: {e}")))?;
            x = y;
            caches.extend(cache);
        }
        Ok((x, caches))
    }

    /// Class probabilities `(N, classes)` and the cache for backward.
    /// Dropout is active only in [`Mode::Train`]; masks come from `rng`.
    pub fn forward(&self, batch: &Tensor<T>, mode: Mode, rng: &mut Rng) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let (probs, caches) = self.run(batch, self.layers.len(), mode, rng, true)?;
        Ok((probs, ForwardCache { caches, mode }))
    }

    /// Evaluation-mode probabilities without keeping a cache.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(batch, self.layers.len(), Mode::Eval, &mut Rng::seeded(0), false)?.0)
    }

    /// Evaluation-mode activations feeding the final dense layer.
    pub fn features(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let upto = self.spec.feature_layer()? + 1;
        Ok(self.run(batch, upto, Mode::Eval, &mut Rng::seeded(0), false)?.0)
    }

    /// Backpropagates `grad` from the output of layer `top - 1` down to the
    /// input. Returns parameter gradients and, when requested, the input
    /// gradient.
    fn backprop(
        &self,
        cache: &ForwardCache<T>,
        grad: Tensor<T>,
        top: usize,
        need_input: bool,
    ) -> Result<(Gradients<T>, Option<Tensor<T>>)> {
        if cache.caches.len() != self.layers.len() {
            return Err(NnError::Shape(format!(
                "cache has {} layers, model has {}",
                cache.caches.len(),
                self.layers.len()
            )));
        }
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut total = 0;
        for layer in &self.layers {
            offsets.push(total);
            total += layer.param_count();
        }
        let mut slots: Vec<Option<Tensor<T>>> = vec![None; total];
        let mut g = grad;
        for i in (0..top).rev() {
            let layer = &self.layers[i];
            let want = i > 0 || need_input;
            let range = offsets[i]..offsets[i] + layer.param_count();
            match layer
                .backward(&cache.caches[i], g, want, &mut slots[range])
                .map_err(|e| NnError::Shape(format!("layer {i}: {e}")))?
            {
                Some(next) => g = next,
                None => {
                    debug_assert_eq!(i, 0);
                    g = Tensor::scalar(T::zero());
                }
            }
        }
        let params = self.params();
        let grads = slots.into_iter().zip(params).map(|(s, p)| s.unwrap_or_else(|| Tensor::zeros(p.shape()))).collect();
        Ok((Gradients(grads), need_input.then_some(g)))
    }

    /// Gradients given `d loss / d probabilities`.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_probs: Tensor<T>) -> Result<Gradients<T>> {
        Ok(self.backprop(cache, grad_probs, self.layers.len(), false)?.0)
    }

    /// Gradients given `d loss / d logits`, skipping the final softmax. Use
    /// with [`crate::softmax_cross_entropy_grad`].
    pub fn backward_logits(&self, cache: &ForwardCache<T>, grad_logits: Tensor<T>) -> Result<Gradients<T>> {
        if self.spec.layers.last() != Some(&LayerSpec::Softmax) {
            return Err(NnError::Spec("model does not end in softmax".into()));
        }
        Ok(self.backprop(cache, grad_logits, self.layers.len() - 1, false)?.0)
    }

    /// Like [`Network::backward`] but also returns the gradient w.r.t. the batch.
    pub fn backward_with_input(
        &self,
        cache: &ForwardCache<T>,
        grad_probs: Tensor<T>,
    ) -> Result<(Gradients<T>, Tensor<T>)> {
        let (g, input) = self.backprop(cache, grad_probs, self.layers.len(), true)?;
        Ok((g, input.expect("input gradient requested")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::LayerSpec;

    fn tiny_spec() -> ModelSpec {
        ModelSpec::new(
            (4, 4, 2),
            vec![
                LayerSpec::conv3(3),
                LayerSpec::Relu,
                LayerSpec::pool2(),
                LayerSpec::Flatten,
                LayerSpec::dense(5),
                LayerSpec::Relu,
                LayerSpec::dropout(0.5),
                LayerSpec::dense(3),
                LayerSpec::Softmax,
            ],
            3,
        )
        .unwrap()
    }

    fn batch(n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = Rng::seeded(seed);
        Tensor::from_fn(&[n, 4, 4, 2], |_| rng.uniform())
    }

    #[test]
    fn rows_sum_to_one() {
        let net = Network::<f64>::init(&tiny_spec(), &Rng::seeded(1)).unwrap();
        let (p, _) = net.forward(&batch(6, 2), Mode::Train, &mut Rng::seeded(3)).unwrap();
        assert_eq!(p.shape(), &[6, 3]);
        for row in p.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_final_layer_gives_uniform_output() {
        let mut net = Network::<f64>::init(&tiny_spec(), &Rng::seeded(1)).unwrap();
        let n = net.params().len();
        for p in net.params_mut().into_iter().skip(n - 2) {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let p = net.predict(&batch(4, 5)).unwrap();
        assert!(p.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn identity_pointwise_conv_passes_input_through() {
        let spec = ModelSpec::new(
            (3, 3, 2),
            vec![
                LayerSpec::Conv { out_channels: 2, kernel: 1, stride: 1, padding: 0 },
                LayerSpec::Flatten,
                LayerSpec::dense(2),
                LayerSpec::Softmax,
            ],
            2,
        )
        .unwrap();
        let mut net = Network::<f64>::init(&spec, &Rng::seeded(0)).unwrap();
        {
            let mut params = net.params_mut();
            params[0].data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
            params[1].data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = Rng::seeded(9);
        let x = Tensor::from_fn(&[2, 3, 3, 2], |_| rng.normal());
        let (y, _) = net.layers()[0].forward(x.clone(), Mode::Eval, &mut Rng::seeded(0), false).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn rejects_wrong_batch_shape() {
        let net = Network::<f64>::init(&tiny_spec(), &Rng::seeded(1)).unwrap();
        assert!(net.predict(&Tensor::zeros(&[2, 4, 4, 3])).is_err());
        assert!(net.predict(&Tensor::zeros(&[2, 16])).is_err());
    }

    #[test]
    fn dropout_only_in_training() {
        let net = Network::<f64>::init(&tiny_spec(), &Rng::seeded(1)).unwrap();
        let x = batch(3, 4);
        let eval = net.predict(&x).unwrap();
        let (again, _) = net.forward(&x, Mode::Eval, &mut Rng::seeded(77)).unwrap();
        assert_eq!(eval, again);
        let (a, _) = net.forward(&x, Mode::Train, &mut Rng::seeded(1)).unwrap();
        let (b, _) = net.forward(&x, Mode::Train, &mut Rng::seeded(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn from_params_checks_shapes() {
        let net = Network::<f32>::init(&tiny_spec(), &Rng::seeded(1)).unwrap();
        let params: Vec<_> = net.params().into_iter().cloned().collect();
        assert_eq!(Network::from_params(&tiny_spec(), params.clone()).unwrap(), net);
        assert!(Network::<f32>::from_params(&tiny_spec(), params[1..].to_vec()).is_err());
        let mut wrong = params;
        wrong[0] = Tensor::zeros(&[1]);
        assert!(Network::from_params(&tiny_spec(), wrong).is_err());
        assert_eq!(net.param_names()[0], "layers.0.weight");
    }
}
