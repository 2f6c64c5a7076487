use ndarray::Array3;
use voxlesion::dataset::{generate_dataset, DatasetSpec};
use voxlesion::phantom::{generate_phantom, generate_weak_label, PhantomSpec, WeakLabelSpec};
use voxlesion::training::Split;
use voxlesion::volume::{BinaryMask, Geometry, LabelVolume, Provenance};

/// Two-sample Kolmogorov-Smirnov statistic by merging the sorted samples.
fn ks_statistic(mut a: Vec<f32>, mut b: Vec<f32>) -> f64 {
    a.sort_by(f32::total_cmp);
    b.sort_by(f32::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

#[test]
fn lesion_and_confounder_intensities_match() {
    let spec = PhantomSpec::default();
    let (mut les, mut conf) = (Vec::new(), Vec::new());
    for seed in 0..20 {
        let p = generate_phantom(&spec, seed).unwrap();
        for ((&v, &l), &c) in p.image.as_slice().iter().zip(p.label.as_slice()).zip(p.confounder.as_slice()) {
            if l != 0 {
                les.push(v);
            }
            if c {
                conf.push(v);
            }
        }
    }
    assert!(les.len() > 1000 && conf.len() > 1000);
    let d = ks_statistic(les, conf);
    assert!(d < 0.1, "KS statistic {d}");
}

#[test]
fn ks_oracle_sanity() {
    assert_eq!(ks_statistic(vec![1.0, 2.0], vec![1.0, 2.0]), 0.0);
    assert_eq!(ks_statistic(vec![1.0, 2.0], vec![3.0, 4.0]), 1.0);
}

#[test]
fn mean_lesion_fraction_over_hundred_phantoms() {
    let spec = PhantomSpec::default();
    let mut sum = 0.0;
    for seed in 0..100 {
        let p = generate_phantom(&spec, 1000 + seed).unwrap();
        assert!(p.label.within(&p.prostate));
        assert!(p.confounder.as_slice().iter().zip(p.label.as_slice()).all(|(&c, &l)| !(c && l != 0)));
        assert!(p.confounder_count() >= 1);
        sum += p.lesion_fraction();
    }
    let mean = sum / 100.0;
    assert!((mean - 0.04).abs() <= 0.01, "mean fraction {mean}");
}

#[test]
fn dilation_two_matches_brute_force() {
    let shape = [24usize, 24, 24];
    let g = Geometry::default();
    let c = 11.0f64;
    let sphere = Array3::from_shape_fn(shape, |(i, j, k)| {
        let d = (i as f64 - c).powi(2) + (j as f64 - c).powi(2) + (k as f64 - c).powi(2);
        u8::from(d <= 25.0)
    });
    let strong = LabelVolume::new(sphere.clone(), g, Provenance::Strong).unwrap();
    let prostate = BinaryMask::full(shape, g).unwrap();
    let spec = WeakLabelSpec { dilation: [2, 2], jitter: 0 };
    let weak = generate_weak_label(&strong, &prostate, &spec, 9).unwrap();
    assert_eq!(weak.provenance(), Provenance::Weak);

    let pts: Vec<[i64; 3]> = sphere
        .indexed_iter()
        .filter(|(_, &v)| v != 0)
        .map(|((i, j, k), _)| [i as i64, j as i64, k as i64])
        .collect();
    let oracle = Array3::from_shape_fn(shape, |(i, j, k)| {
        let v = [i as i64, j as i64, k as i64];
        u8::from(pts.iter().any(|p| (0..3).map(|a| (p[a] - v[a]).pow(2)).sum::<i64>() <= 4))
    });
    assert_eq!(weak.data(), &oracle);
}

#[test]
fn weak_labels_are_clipped_to_the_gland() {
    let p = generate_phantom(&PhantomSpec::default(), 5).unwrap();
    let w = generate_weak_label(&p.label, &p.prostate, &WeakLabelSpec::default(), 5).unwrap();
    assert!(w.within(&p.prostate));
    assert!(w.lesion_voxels() > p.label.lesion_voxels() / 2);
}

#[test]
fn hundred_case_dataset() {
    let spec = DatasetSpec { n_cases: 100, positive_fraction: 0.5, seed: 4, ..Default::default() };
    let cases = generate_dataset(&spec).unwrap();
    assert_eq!(cases.iter().filter(|c| c.positive).count(), 50);
    let count = |s: Split| cases.iter().filter(|c| c.split == s).count();
    assert_eq!([count(Split::Train), count(Split::Val), count(Split::Test)], [76, 11, 13]);
    for c in &cases {
        assert!(c.phantom.label.within(&c.phantom.prostate), "{}", c.id);
        assert!(c.weak_label.within(&c.phantom.prostate), "{}", c.id);
        assert_eq!(c.positive, c.phantom.label.lesion_voxels() > 0, "{}", c.id);
    }
}

#[test]
fn dataset_is_deterministic() {
    let spec = DatasetSpec { n_cases: 12, seed: 21, ..Default::default() };
    let a = generate_dataset(&spec).unwrap();
    let b = generate_dataset(&spec).unwrap();
    assert_eq!(a, b);
    let c = generate_dataset(&DatasetSpec { seed: 22, ..spec }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn tiny_dataset_is_rejected() {
    let spec = DatasetSpec { n_cases: 9, ..Default::default() };
    assert!(generate_dataset(&spec).is_err());
}
