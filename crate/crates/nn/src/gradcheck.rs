//! Central finite-difference gradient oracle.
//!
//! Only forward passes are used here, so the numeric gradients are
//! independent of the backward kernels they are compared against.

use patchgrid_core::{Rng, Tensor};

use crate::error::Result;
use crate::loss::{cross_entropy, cross_entropy_grad};
use crate::network::{Mode, Network};

pub const STEP: f64 = 1e-5;

/// `||a - b|| / max(||a|| + ||b||, 1e-12)`
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

fn loss(net: &Network<f64>, batch: &Tensor<f64>, labels: &[usize], mode: Mode, seed: u64) -> Result<f64> {
    let (p, _) = net.forward(batch, mode, &mut Rng::seeded(seed))?;
    cross_entropy(&p, labels)
}

/// Numeric `d loss / d parameter` for every parameter tensor.
pub fn numeric_param_grads(
    net: &Network<f64>,
    batch: &Tensor<f64>,
    labels: &[usize],
    mode: Mode,
    seed: u64,
) -> Result<Vec<Tensor<f64>>> {
    let mut probe = net.clone();
    let count = probe.params().len();
    let mut out = Vec::with_capacity(count);
    for t in 0..count {
        let len = probe.params()[t].len();
        let mut g = Tensor::zeros(probe.params()[t].shape());
        for i in 0..len {
            let orig = probe.params()[t].data()[i];
            probe.params_mut()[t].data_mut()[i] = orig + STEP;
            let up = loss(&probe, batch, labels, mode, seed)?;
            probe.params_mut()[t].data_mut()[i] = orig - STEP;
            let down = loss(&probe, batch, labels, mode, seed)?;
            probe.params_mut()[t].data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * STEP);
        }
        out.push(g);
    }
    Ok(out)
}

/// Numeric `d loss / d batch`.
pub fn numeric_input_grad(
    net: &Network<f64>,
    batch: &Tensor<f64>,
    labels: &[usize],
    mode: Mode,
    seed: u64,
) -> Result<Tensor<f64>> {
    let mut x = batch.clone();
    let mut g = Tensor::zeros(batch.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + STEP;
        let up = loss(net, &x, labels, mode, seed)?;
        x.data_mut()[i] = orig - STEP;
        let down = loss(net, &x, labels, mode, seed)?;
        x.data_mut()[i] = orig;
        g.data_mut()[i] = (up - down) / (2.0 * STEP);
    }
    Ok(g)
}

#[derive(Debug, Clone)]
pub struct GradReport {
    /// `(tensor name, relative error)`; the batch gradient is named `input`.
    pub errors: Vec<(String, f64)>,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.errors.iter().map(|e| e.1).fold(0.0, f64::max)
    }
}

/// Compares the analytic gradients (cross-entropy gradient pushed through
/// [`Network::backward_with_input`]) with the numeric oracle.
pub fn check(net: &Network<f64>, batch: &Tensor<f64>, labels: &[usize], mode: Mode, seed: u64) -> Result<GradReport> {
    let (p, cache) = net.forward(batch, mode, &mut Rng::seeded(seed))?;
    let (grads, input) = net.backward_with_input(&cache, cross_entropy_grad(&p, labels)?)?;
    let numeric = numeric_param_grads(net, batch, labels, mode, seed)?;
    let mut errors: Vec<(String, f64)> = net
        .param_names()
        .into_iter()
        .zip(grads.tensors().iter().zip(&numeric))
        .map(|(name, (a, n))| (name, relative_error(a.data(), n.data())))
        .collect();
    let numeric_input = numeric_input_grad(net, batch, labels, mode, seed)?;
    errors.push(("input".into(), relative_error(input.data(), numeric_input.data())));
    Ok(GradReport { errors })
}
