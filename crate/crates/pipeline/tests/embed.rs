use patchgrid_core::{Rng, Taxonomy, Tensor};
use patchgrid_nn::{ModelSpec, Network};
use patchgrid_pipeline::embed::*;
use patchgrid_pipeline::PatchSet;
use proptest::prelude::*;

fn random_rows(n: usize, d: usize, seed: u64) -> Tensor<f64> {
    let mut rng = Rng::seeded(seed);
    Tensor::from_fn(&[n, d], |_| rng.normal())
}

/// `2^H` of a conditional row, recomputed from scratch.
fn perplexity_of(row: &[f64]) -> f64 {
    let h: f64 = row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.log2()).sum();
    2f64.powf(h)
}

#[test]
fn calibration_hits_the_target_perplexity() {
    let rows = random_rows(20, 5, 1);
    let d = squared_distances(&rows);
    for target in [2.0, 5.0, 10.5] {
        let p = perplexity_calibrate(&d, 20, target).unwrap();
        for i in 0..20 {
            let row = &p[i * 20..(i + 1) * 20];
            assert_eq!(row[i], 0.0);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((perplexity_of(row) - target).abs() < 1e-4, "point {i}");
        }
    }
}

#[test]
fn equidistant_neighbours_are_uniform() {
    let s3 = 3f64.sqrt() / 2.0;
    let tri = Tensor::new(vec![3, 2], vec![0.0, 0.0, 1.0, 0.0, 0.5, s3]).unwrap();
    let mut d = squared_distances(&tri);
    // exact equilateral distances
    d.iter_mut().for_each(|v| {
        if *v > 0.0 {
            *v = 1.0
        }
    });
    for target in [0.5, 1.0, 1.9] {
        let p = perplexity_calibrate(&d, 3, target).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(p[i * 3 + j], if i == j { 0.0 } else { 0.5 });
            }
        }
    }
    let mut hub = vec![4.0; 25];
    for i in 0..5 {
        hub[i * 5 + i] = 0.0;
    }
    let p = perplexity_calibrate(&hub, 5, 2.0).unwrap();
    assert!(p[1..5].iter().all(|&v| v == 0.25));
}

#[test]
fn joint_probabilities_are_a_symmetric_distribution() {
    let rows = random_rows(15, 4, 2);
    let p = joint_probabilities(&perplexity_calibrate(&squared_distances(&rows), 15, 4.0).unwrap(), 15);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    for i in 0..15 {
        assert_eq!(p[i * 15 + i], 0.0);
        for j in 0..15 {
            assert_eq!(p[i * 15 + j], p[j * 15 + i]);
            assert!(p[i * 15 + j] >= 0.0);
        }
    }
    assert_eq!(kl(&p, &p), 0.0);
}

proptest! {
    #[test]
    fn kl_gradient_matches_finite_differences(seed in 0u64..500) {
        let n = 10;
        let mut rng = Rng::seeded(seed);
        let mut p: Vec<f64> = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let v = rng.uniform() + 0.01;
                p[i * n + j] = v;
                p[j * n + i] = v;
            }
        }
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        let y: Vec<[f64; 2]> = (0..n).map(|_| [rng.normal(), rng.normal()]).collect();
        let analytic = kl_gradient(&p, &y);
        let h = 1e-5;
        let (mut diff, mut norm) = (0.0f64, 0.0f64);
        for i in 0..n {
            for a in 0..2 {
                let mut up = y.clone();
                up[i][a] += h;
                let mut down = y.clone();
                down[i][a] -= h;
                let numeric = (kl_divergence(&p, &up) - kl_divergence(&p, &down)) / (2.0 * h);
                diff += (numeric - analytic[i][a]).powi(2);
                norm += numeric.powi(2) + analytic[i][a].powi(2);
            }
        }
        prop_assert!(diff.sqrt() / norm.sqrt() < 1e-3);
    }
}

#[test]
fn two_points_land_symmetric_and_apart() {
    let rows = Tensor::new(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 1.0, 0.0]).unwrap();
    let config = TsneConfig { perplexity: 0.5, iterations: 50, ..TsneConfig::default() };
    let e = tsne(&rows, &config).unwrap();
    let [a, b] = [e.coords[0], e.coords[1]];
    assert_ne!(a, b);
    assert!((a[0] + b[0]).abs() < 1e-15 && (a[1] + b[1]).abs() < 1e-15);
}

fn clusters(per: usize, d: usize, separation: f64, seed: u64) -> (Tensor<f64>, Vec<usize>) {
    let mut rng = Rng::seeded(seed);
    let centers: Vec<Vec<f64>> =
        (0..3).map(|c| (0..d).map(|k| if k == c { separation } else { 0.0 }).collect()).collect();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per {
            data.extend(center.iter().map(|m| m + rng.normal()));
            labels.push(c);
        }
    }
    (Tensor::new(vec![3 * per, d], data).unwrap(), labels)
}

fn centroid_purity(coords: &[[f64; 2]], labels: &[usize], classes: usize) -> f64 {
    let mut cent = vec![[0.0f64; 2]; classes];
    let mut count = vec![0.0; classes];
    for (c, &l) in coords.iter().zip(labels) {
        cent[l][0] += c[0];
        cent[l][1] += c[1];
        count[l] += 1.0;
    }
    for (c, n) in cent.iter_mut().zip(&count) {
        c[0] /= n;
        c[1] /= n;
    }
    let hits = coords
        .iter()
        .zip(labels)
        .filter(|(c, &l)| {
            let d = |k: usize| (c[0] - cent[k][0]).powi(2) + (c[1] - cent[k][1]).powi(2);
            (0..classes).min_by(|&a, &b| d(a).total_cmp(&d(b))).unwrap() == l
        })
        .count();
    hits as f64 / labels.len() as f64
}

#[test]
fn separated_clusters_stay_separated() {
    let (rows, labels) = clusters(50, 512, 10.0, 3);
    let e = tsne(&rows, &TsneConfig::default()).unwrap();
    assert!(e.final_kl < e.initial_kl, "{} !< {}", e.final_kl, e.initial_kl);
    assert!(centroid_purity(&e.coords, &labels, 3) >= 0.9);
    let mx: f64 = e.coords.iter().map(|c| c[0]).sum::<f64>() / 150.0;
    assert!(mx.abs() < 1e-9);
}

#[test]
fn permuting_rows_permutes_the_embedding() {
    let rows = random_rows(30, 6, 4);
    let config = TsneConfig { perplexity: 5.0, iterations: 300, ..TsneConfig::default() };
    let e = tsne(&rows, &config).unwrap();
    let mut perm: Vec<usize> = (0..30).collect();
    Rng::seeded(8).shuffle(&mut perm);
    let mut shuffled = Vec::new();
    for &i in &perm {
        shuffled.extend_from_slice(rows.sample(i));
    }
    let f = tsne(&Tensor::new(vec![30, 6], shuffled).unwrap(), &config).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        assert_eq!(f.coords[k], e.coords[i]);
    }
    assert_eq!(e.final_kl, f.final_kl);
}

#[test]
fn identical_rows_fall_back_to_zero() {
    let rows = Tensor::full(&[6, 3], 0.7);
    let e = tsne(&rows, &TsneConfig { perplexity: 2.0, ..TsneConfig::default() }).unwrap();
    assert!(e.coords.iter().all(|c| *c == [0.0, 0.0]));
}

#[test]
fn config_checks() {
    let rows = random_rows(5, 2, 1);
    assert!(tsne(&rows, &TsneConfig::default()).is_err());
    assert!(tsne(&rows, &TsneConfig { perplexity: 2.0, iterations: 0, ..TsneConfig::default() }).is_err());
    assert!(tsne(&random_rows(1, 2, 1), &TsneConfig { perplexity: 0.5, ..TsneConfig::default() }).is_err());
}

fn patch_set(n: usize) -> PatchSet {
    let mut set = PatchSet::empty(Taxonomy::four(), (16, 16));
    for i in 0..n {
        set.push(Tensor::full(&[16, 16, 3], (i % 3) as f32 / 3.0), i % 4, format!("p{i}")).unwrap();
    }
    set
}

#[test]
fn features_are_penultimate_activations() {
    let spec = ModelSpec::default_classifier(16, 16, 4).unwrap();
    let net = Network::<f32>::init(&spec, &Rng::seeded(1)).unwrap();
    let set = patch_set(7);
    let f = extract_features(&net, &set, 3).unwrap();
    assert_eq!((f.len(), f.width()), (7, 512));
    // patches 0, 3, 6 are identical
    assert_eq!(f.rows.sample(0), f.rows.sample(3));
    assert_eq!(f.rows.sample(0), f.rows.sample(6));
    assert_eq!(f, extract_features(&net, &set, 7).unwrap());

    // zero weights everywhere: every row is the same bias image
    let mut zero = net.clone();
    zero.params_mut().into_iter().for_each(|p| p.data_mut().iter_mut().for_each(|v| *v = 0.0));
    let f = extract_features(&zero, &patch_set(5), 5).unwrap();
    assert!((1..5).all(|i| f.rows.sample(i) == f.rows.sample(0)));
}

#[test]
fn subsample_is_seeded_and_bounded() {
    assert_eq!(subsample(10, 20, 1), (0..10).collect::<Vec<_>>());
    let s = subsample(10_000, 5000, 3);
    assert_eq!(s.len(), 5000);
    assert!(s.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(s, subsample(10_000, 5000, 3));
}

#[test]
fn scatter_plot_uses_class_colors() {
    let points = vec![
        EmbeddedPoint { id: "a".into(), label: 0, x: -1.0, y: 0.0 },
        EmbeddedPoint { id: "b".into(), label: 1, x: 1.0, y: 0.0 },
    ];
    let img = scatter_plot(&points, &[[255, 255, 0], [255, 0, 0]]);
    assert_eq!((img.width(), img.height()), (1024, 1024));
    assert_eq!(img.pixel(32, 992), [255, 255, 0]);
    assert_eq!(img.pixel(992, 992), [255, 0, 0]);
    assert_eq!(img.pixel(500, 100), [255, 255, 255]);
}
