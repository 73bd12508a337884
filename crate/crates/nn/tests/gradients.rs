//! Analytic gradients against central finite differences, per layer type.

use patchgrid_core::{Rng, Tensor};
use patchgrid_nn::gradcheck::{check, relative_error, STEP};
use patchgrid_nn::layers::Mode;
use patchgrid_nn::loss::cross_entropy;
use patchgrid_nn::{softmax_cross_entropy_grad, LayerSpec, ModelSpec, Network};

const TOLERANCE: f64 = 1e-4;

fn random_batch(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal())
}

fn assert_gradients(spec: ModelSpec, batch_size: usize, seed: u64, mode: Mode) {
    let mut rng = Rng::seeded(seed);
    let net = Network::<f64>::init(&spec, &rng.child(1)).unwrap();
    let (h, w, c) = spec.input_size;
    let batch = random_batch(&[batch_size, h, w, c], &mut rng);
    let labels: Vec<usize> = (0..batch_size).map(|_| rng.below(spec.class_count)).collect();
    let report = check(&net, &batch, &labels, mode, seed).unwrap();
    assert!(report.worst() < TOLERANCE, "spec {:?}: {:?}", spec.layers, report.errors);
}

fn tail(mut layers: Vec<LayerSpec>, classes: usize) -> Vec<LayerSpec> {
    layers.push(LayerSpec::dense(classes));
    layers.push(LayerSpec::Softmax);
    layers
}

#[test]
fn conv() {
    let cases = [
        ((5, 5, 2), 3, 3, 1, 1),
        ((6, 4, 3), 2, 3, 2, 0),
        ((4, 4, 1), 4, 1, 1, 0),
        ((7, 5, 2), 2, 2, 2, 1),
        ((3, 3, 3), 1, 3, 1, 0),
    ];
    for (i, (input, out_channels, kernel, stride, padding)) in cases.into_iter().enumerate() {
        let spec = ModelSpec::new(
            input,
            tail(vec![LayerSpec::Conv { out_channels, kernel, stride, padding }, LayerSpec::Flatten], 3),
            3,
        )
        .unwrap();
        assert_gradients(spec, 2, 100 + i as u64, Mode::Train);
    }
}

#[test]
fn dense() {
    for (i, (inputs, hidden, classes)) in
        [(3, 4, 2), (6, 2, 3), (1, 5, 4), (8, 8, 2), (4, 1, 5)].into_iter().enumerate()
    {
        let spec =
            ModelSpec::new((1, 1, inputs), tail(vec![LayerSpec::Flatten, LayerSpec::dense(hidden)], classes), classes)
                .unwrap();
        assert_gradients(spec, 3, 200 + i as u64, Mode::Train);
    }
}

#[test]
fn relu() {
    for (i, (h, w, c)) in [(2, 2, 2), (3, 1, 4), (1, 5, 1), (4, 4, 1), (2, 3, 3)].into_iter().enumerate() {
        let spec = ModelSpec::new(
            (h, w, c),
            tail(vec![LayerSpec::Relu, LayerSpec::Flatten, LayerSpec::dense(4), LayerSpec::Relu], 3),
            3,
        )
        .unwrap();
        assert_gradients(spec, 2, 300 + i as u64, Mode::Train);
    }
}

#[test]
fn max_pool() {
    let cases = [((4, 4, 2), 2, 2), ((5, 5, 1), 3, 2), ((4, 6, 3), 2, 1), ((3, 3, 2), 3, 3), ((6, 6, 1), 2, 3)];
    for (i, (input, kernel, stride)) in cases.into_iter().enumerate() {
        let spec =
            ModelSpec::new(input, tail(vec![LayerSpec::MaxPool { kernel, stride }, LayerSpec::Flatten], 3), 3).unwrap();
        assert_gradients(spec, 2, 400 + i as u64, Mode::Train);
    }
}

#[test]
fn residual() {
    for (i, (h, w, c)) in [(3, 3, 2), (4, 4, 1), (3, 5, 3), (2, 2, 4), (5, 3, 2)].into_iter().enumerate() {
        let block = vec![LayerSpec::conv3(c), LayerSpec::Relu, LayerSpec::conv3(c)];
        let spec = ModelSpec::new(
            (h, w, c),
            tail(vec![LayerSpec::Residual(block), LayerSpec::Relu, LayerSpec::Flatten], 3),
            3,
        )
        .unwrap();
        assert_gradients(spec, 2, 500 + i as u64, Mode::Train);
    }
}

#[test]
fn dropout() {
    for (i, (features, p)) in [(4, 0.05), (6, 0.15), (3, 0.5), (8, 0.3), (5, 0.0)].into_iter().enumerate() {
        let spec = ModelSpec::new(
            (1, 1, features),
            tail(vec![LayerSpec::Flatten, LayerSpec::dense(5), LayerSpec::dropout(p)], 3),
            3,
        )
        .unwrap();
        assert_gradients(spec.clone(), 3, 600 + i as u64, Mode::Eval);
        // the mask is a pure function of the seed, so training mode is checkable too
        assert_gradients(spec, 3, 650 + i as u64, Mode::Train);
    }
}

#[test]
fn softmax_cross_entropy_composition() {
    let mut rng = Rng::seeded(700);
    for (n, classes) in [(1, 2), (3, 4), (5, 3), (2, 6), (4, 5)] {
        let logits = random_batch(&[n, classes], &mut rng).map(|v| 3.0 * v);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
        let softmax = |z: &Tensor<f64>| {
            let mut out = z.clone();
            for row in out.data_mut().chunks_mut(classes) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
                row.iter_mut().for_each(|v| *v = (*v - m).exp() / s);
            }
            out
        };
        let mut numeric = vec![0.0; logits.len()];
        let mut z = logits.clone();
        for i in 0..z.len() {
            let orig = z.data()[i];
            z.data_mut()[i] = orig + STEP;
            let up = cross_entropy(&softmax(&z), &labels).unwrap();
            z.data_mut()[i] = orig - STEP;
            let down = cross_entropy(&softmax(&z), &labels).unwrap();
            z.data_mut()[i] = orig;
            numeric[i] = (up - down) / (2.0 * STEP);
        }
        let analytic = softmax_cross_entropy_grad(&softmax(&logits), &labels).unwrap();
        assert!(relative_error(analytic.data(), &numeric) < TOLERANCE);
    }
}

#[test]
fn fused_and_unfused_backward_agree() {
    let spec = ModelSpec::default_classifier(16, 16, 4).unwrap();
    let mut rng = Rng::seeded(800);
    let net = Network::<f64>::init(&spec, &rng.child(0)).unwrap();
    let batch = random_batch(&[3, 16, 16, 3], &mut rng);
    let labels = [0, 2, 3];
    let (p, cache) = net.forward(&batch, Mode::Train, &mut Rng::seeded(1)).unwrap();
    let fused = net.backward_logits(&cache, softmax_cross_entropy_grad(&p, &labels).unwrap()).unwrap();
    let chained = net.backward(&cache, patchgrid_nn::loss::cross_entropy_grad(&p, &labels).unwrap()).unwrap();
    for (a, b) in fused.tensors().iter().zip(chained.tensors()) {
        assert!(relative_error(a.data(), b.data()) < 1e-9);
    }
}

#[test]
fn single_dense_gradient_is_outer_product() {
    let spec = ModelSpec::new((1, 1, 3), vec![LayerSpec::Flatten, LayerSpec::dense(2), LayerSpec::Softmax], 2).unwrap();
    let net = Network::<f64>::init(&spec, &Rng::seeded(3)).unwrap();
    let x = Tensor::new(vec![1, 1, 1, 3], vec![0.5, -1.0, 2.0]).unwrap();
    let (p, cache) = net.forward(&x, Mode::Train, &mut Rng::seeded(0)).unwrap();
    let err = softmax_cross_entropy_grad(&p, &[1]).unwrap();
    let g = net.backward_logits(&cache, err.clone()).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let expected = x.data()[i] * err.data()[j];
            assert!((g.tensors()[0].data()[i * 2 + j] - expected).abs() < 1e-15);
        }
    }
    assert_eq!(g.tensors()[1].data(), err.data());
}

#[test]
fn confident_correct_prediction_has_vanishing_gradient() {
    let spec = ModelSpec::new((1, 1, 2), vec![LayerSpec::Flatten, LayerSpec::dense(3), LayerSpec::Softmax], 3).unwrap();
    let mut net = Network::<f64>::init(&spec, &Rng::seeded(3)).unwrap();
    {
        let mut params = net.params_mut();
        params[0].data_mut().iter_mut().for_each(|v| *v = 0.0);
        params[1].data_mut().copy_from_slice(&[60.0, 0.0, 0.0]);
    }
    let x = Tensor::new(vec![1, 1, 1, 2], vec![0.3, 0.7]).unwrap();
    let (p, cache) = net.forward(&x, Mode::Train, &mut Rng::seeded(0)).unwrap();
    let g = net.backward(&cache, patchgrid_nn::loss::cross_entropy_grad(&p, &[0]).unwrap()).unwrap();
    assert!(g.max_abs() < 1e-12);
}
