use std::path::Path;

use pemd::rng::stream;
use pemd::synth::{
    domain_b_remap, generate_datasets, generate_image, modality_transform, sample_geometry, sample_patch_pair, DataConfig,
    Domain, PairSet, Pairing, PatchPair, PATCH_SIDE, WINDOW,
};
use pemd::DisplacementGrid;
use rand::Rng;

fn small(pairs: usize, augment: bool) -> DataConfig {
    DataConfig { image_count: 3, pairs_per_modality: pairs, train_count: pairs / 2, augment, ..DataConfig::default() }
}

fn pearson_f32(a: &[f32], b: &[f32]) -> f64 {
    let x: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    pemd::eval::pearson(&x, &y).unwrap()
}

#[test]
fn images_are_deterministic_bounded_and_structured() {
    let a = generate_image(4);
    assert_eq!(a, generate_image(4));
    assert_ne!(a.data, generate_image(5).data);
    assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
    let mut rng = stream(1, "test/windows");
    for _ in 0..20 {
        let x0 = rng.random_range(0..=a.side - WINDOW);
        let y0 = rng.random_range(0..=a.side - WINDOW);
        let vals: Vec<f64> = (0..WINDOW * WINDOW).map(|k| a.at(x0 + k % WINDOW, y0 + k / WINDOW) as f64).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let sd = (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64).sqrt();
        assert!(sd >= 0.02, "window at ({x0}, {y0}) has std {sd}");
    }
}

#[test]
fn domain_a_keeps_contrast_and_domain_b_inverts_it() {
    let img = generate_image(2);
    assert_eq!(modality_transform(&img, Domain::A), img);
    let b = modality_transform(&img, Domain::B);
    for (v, w) in img.data.iter().zip(&b.data) {
        assert_eq!(*w, domain_b_remap(*v as f64) as f32);
    }
    let grid: Vec<f64> = (0..100).map(|i| domain_b_remap(i as f64 / 99.0)).collect();
    assert!(grid.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn same_location_patches_are_related_but_not_identical() {
    let d = generate_datasets(9, &small(200, false)).unwrap();
    let rs: Vec<f64> = d.a_train.pairs()[..100]
        .iter()
        .zip(&d.b_train.pairs()[..100])
        .map(|(a, b)| pearson_f32(&a.fixed, &b.fixed).abs())
        .collect();
    let mean = rs.iter().sum::<f64>() / rs.len() as f64;
    assert!((0.3..=0.98).contains(&mean), "mean |r| {mean}");
}

#[test]
fn zero_displacement_without_augmentation_is_an_exact_copy() {
    let img = generate_image(0);
    let grid = DisplacementGrid::default();
    let mut rng = stream(3, "test/identity");
    let mut seen = 0;
    while seen < 5 {
        let pair = sample_patch_pair(&img, Domain::A, &grid, &mut rng, false).unwrap();
        if pair.label == 12 {
            assert_eq!(pair.fixed, pair.moving);
            seen += 1;
        }
    }
}

#[test]
fn labels_are_uniform_over_25000_draws() {
    let grid = DisplacementGrid::default();
    let mut rng = stream(4, "test/labels");
    let mut counts = [0usize; 25];
    for _ in 0..25_000 {
        counts[sample_geometry(256, &grid, &mut rng, true).unwrap().label] += 1;
    }
    assert!(counts.iter().all(|&c| (850..=1150).contains(&c)), "{counts:?}");
}

#[test]
fn domain_b_patches_are_standardized_per_patch() {
    let d = generate_datasets(5, &small(60, true)).unwrap();
    for p in d.b_train.pairs().iter().chain(d.b_test.pairs()) {
        for patch in [&p.fixed, &p.moving] {
            let n = patch.len() as f64;
            let m = patch.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = patch.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n;
            assert!(m.abs() <= 1e-5 && (var - 1.0).abs() <= 1e-4, "mean {m}, var {var}");
        }
    }
}

#[test]
fn default_generation_has_5120_aligned_pairs_per_domain() {
    let d = generate_datasets(0, &DataConfig::default()).unwrap();
    assert_eq!(d.a_train.len() + d.a_test.len(), 5120);
    assert_eq!(d.b_train.len() + d.b_test.len(), 5120);
    assert_eq!((d.a_train.len(), d.a_test.len()), (4096, 1024));
    assert_eq!(d.a_train.side(), PATCH_SIDE);
    for (a, b) in d.a_test.pairs().iter().zip(d.b_test.pairs()) {
        assert_eq!(a.label, b.label);
    }
    let ba = PairSet::pairing(&d.a_test, &d.b_test, Pairing::BA).unwrap();
    assert_eq!(ba.pairs()[7].fixed, d.b_test.pairs()[7].fixed);
    assert_eq!(ba.pairs()[7].moving, d.a_test.pairs()[7].moving);
    assert_eq!((ba.pairs()[7].domain_fixed, ba.pairs()[7].domain_moving), (Domain::B, Domain::A));
}

#[test]
fn generation_is_a_function_of_the_seed() {
    let c = small(40, true);
    assert_eq!(generate_datasets(7, &c).unwrap(), generate_datasets(7, &c).unwrap());
    assert_ne!(generate_datasets(7, &c).unwrap().a_train, generate_datasets(8, &c).unwrap().a_train);
}

#[test]
fn dataset_files_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let d = generate_datasets(2, &small(30, true)).unwrap();
    d.save(dir.path()).unwrap();
    let back = pemd::synth::Datasets::load(dir.path()).unwrap();
    assert_eq!(back, d);
    let bytes = d.a_train.encode();
    assert_eq!(back.a_train.encode(), bytes);
    assert_eq!(&bytes[..4], b"PEMD");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
}

#[test]
fn corrupted_dataset_headers_are_rejected() {
    let p = |label| PatchPair { fixed: vec![0.5; 4], moving: vec![-0.5; 4], label, domain_fixed: Domain::A, domain_moving: Domain::B };
    let set = PairSet::new(2, 5, vec![p(3), p(24)]).unwrap();
    let bytes = set.encode();
    let path = Path::new("set.pemd");
    assert_eq!(PairSet::decode(&bytes, path).unwrap(), set);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    let err = PairSet::decode(&bad, path).unwrap_err().to_string();
    assert!(err.contains("magic") && err.contains("set.pemd"), "{err}");
    let mut bad = bytes.clone();
    bad[4] = 2;
    assert!(PairSet::decode(&bad, path).unwrap_err().to_string().contains("version"));
    assert!(PairSet::decode(&bytes[..bytes.len() - 1], path).is_err());
    let mut bad = bytes.clone();
    let label_at = 16 + 2 * 4 * 4;
    bad[label_at] = 30;
    assert!(PairSet::decode(&bad, path).unwrap_err().to_string().contains("label"));
}
