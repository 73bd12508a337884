use std::fs;
use std::path::Path;

use patchgrid_core::tiler::build_patch_dataset;
use patchgrid_core::{GridSpec, Split};
use patchgrid_pipeline::synth::SynthSpec;
use walkdir::WalkDir;

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().is_file())
        .map(|e| (e.path().strip_prefix(root).unwrap().display().to_string(), fs::read(e.path()).unwrap()))
        .collect()
}

fn small(seed: u64) -> SynthSpec {
    SynthSpec { width: 64, height: 40, seed, ..SynthSpec::default() }
}

#[test]
fn enumerates_classes_sites_and_images() {
    let dir = tempfile::tempdir().unwrap();
    let m = small(1).generate(dir.path()).unwrap();
    assert_eq!(m.len(), 200);
    assert_eq!(m.sub_areas().len(), 10);
    assert!(m.records.iter().all(|r| r.collection_date.is_some()));
    assert!(m.records.iter().all(|r| r.split == Split::Unassigned));
}

#[test]
fn same_seed_same_bytes() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let spec = SynthSpec { sub_areas: 2, images_per_sub_area: 2, brightness_shift: 0.2, ..small(5) };
    spec.generate(a.path()).unwrap();
    spec.generate(b.path()).unwrap();
    SynthSpec { seed: 6, ..spec }.generate(c.path()).unwrap();
    assert_eq!(tree(a.path()), tree(b.path()));
    assert_ne!(tree(a.path()), tree(c.path()));
}

#[test]
fn classes_separate_in_mean_color() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        sub_areas: 4,
        images_per_sub_area: 3,
        width: 256,
        height: 160,
        brightness_shift: 0.1,
        seed: 2,
        ..SynthSpec::default()
    };
    let m = spec.generate(dir.path()).unwrap();
    let ds = build_patch_dataset(&m, dir.path(), &GridSpec::survey()).unwrap();
    let mean = |p: &patchgrid_core::LabeledPatch| {
        let mut s = [0.0f64; 3];
        for px in p.pixels.data().chunks(3) {
            for c in 0..3 {
                s[c] += px[c] as f64;
            }
        }
        let n = (p.pixels.data().len() / 3) as f64;
        s.map(|v| v / n)
    };
    let mut centroids = vec![[0.0f64; 3]; 4];
    let mut counts = [0usize; 4];
    for p in &ds.patches {
        let m = mean(p);
        for c in 0..3 {
            centroids[p.label][c] += m[c];
        }
        counts[p.label] += 1;
    }
    for (c, n) in centroids.iter_mut().zip(counts) {
        c.iter_mut().for_each(|v| *v /= n as f64);
    }
    let correct = ds
        .patches
        .iter()
        .filter(|p| {
            let m = mean(p);
            let d = |c: &[f64; 3]| (0..3).map(|i| (m[i] - c[i]).powi(2)).sum::<f64>();
            let nearest = (0..4).min_by(|&a, &b| d(&centroids[a]).total_cmp(&d(&centroids[b]))).unwrap();
            nearest == p.label
        })
        .count();
    assert!(correct as f64 / ds.len() as f64 >= 0.99, "{correct}/{}", ds.len());
}

#[test]
fn rejects_bad_specs() {
    let dir = tempfile::tempdir().unwrap();
    assert!(SynthSpec { sub_areas: 0, ..small(0) }.generate(dir.path()).is_err());
    assert!(SynthSpec { split_class: Some(9), ..small(0) }.generate(dir.path()).is_err());
}

#[test]
fn sub_area_offsets_are_bounded_and_shared() {
    let spec = SynthSpec { brightness_shift: 0.3, sub_areas: 50, ..small(3) };
    let offsets = spec.offsets();
    assert!(offsets.iter().all(|o| o.abs() <= 0.3));
    assert_eq!(offsets, spec.offsets());
    assert!(SynthSpec { brightness_shift: 0.0, ..spec }.offsets().iter().all(|&o| o == 0.0));
}
