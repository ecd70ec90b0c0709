use std::fs;

use super::*;
use crate::error::Error;

fn small_config() -> SyntheticConfig {
    SyntheticConfig {
        train_samples: 64,
        test_samples: 32,
        seed: 3,
        ..SyntheticConfig::default()
    }
}

#[test]
fn synthetic_shapes_and_balance() {
    let (train, test) = generate_synthetic(&small_config()).unwrap();
    assert_eq!(train.images().shape(), &[64, 3, 32, 32]);
    assert_eq!(test.len(), 32);
    assert_eq!(train.class_counts(), vec![32, 32]);
    assert_eq!(train.split(), Split::Train);
    assert!(train
        .images()
        .data()
        .iter()
        .all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn synthetic_is_seed_deterministic() {
    let a = generate_synthetic(&small_config()).unwrap();
    let b = generate_synthetic(&small_config()).unwrap();
    assert_eq!(a, b);
    let c = generate_synthetic(&SyntheticConfig {
        seed: 4,
        ..small_config()
    })
    .unwrap();
    assert_ne!(a.0.images(), c.0.images());
}

#[test]
fn zero_noise_images_are_identical_within_a_class() {
    let cfg = SyntheticConfig {
        noise_level: 0.0,
        ..small_config()
    };
    let (train, _) = generate_synthetic(&cfg).unwrap();
    let labels = train.labels();
    let first: Vec<usize> = (0..2)
        .map(|k| labels.iter().position(|&l| l == k).unwrap())
        .collect();
    for i in 0..train.len() {
        assert_eq!(train.image(i), train.image(first[labels[i]]));
    }
    assert_ne!(train.image(first[0]), train.image(first[1]));
    let img = train.image(first[1]);
    let (r, c) = cfg.patch_positions[1];
    assert_eq!(img.data()[r * 32 + c], 1.0);
    assert_eq!(img.data()[0], 0.5);
}

#[test]
fn patch_overflow_is_a_config_error() {
    let cfg = SyntheticConfig {
        patch_positions: [(0, 0), (28, 28)],
        ..small_config()
    };
    assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
}

/// Plain logistic regression on raw pixels, trained by full-batch gradient
/// descent, as an independent check that the task is learnable.
#[test]
fn pixel_logistic_regression_separates_the_synthetic_task() {
    let cfg = SyntheticConfig {
        train_samples: 256,
        test_samples: 128,
        seed: 11,
        ..SyntheticConfig::default()
    };
    let (train, test) = generate_synthetic(&cfg).unwrap();
    let d = 3 * 32 * 32;
    let mut w = vec![0f64; d];
    let mut b = 0f64;
    let xs = train.images().data();
    for _ in 0..60 {
        let mut gw = vec![0f64; d];
        let mut gb = 0f64;
        for (i, &y) in train.labels().iter().enumerate() {
            let x = &xs[i * d..(i + 1) * d];
            let z: f64 = b + x
                .iter()
                .zip(&w)
                .map(|(&xi, wi)| xi as f64 * wi)
                .sum::<f64>();
            let err = 1.0 / (1.0 + (-z).exp()) - y as f64;
            gb += err;
            for (g, &xi) in gw.iter_mut().zip(x) {
                *g += err * xi as f64;
            }
        }
        let n = train.len() as f64;
        b -= 0.5 * gb / n;
        for (wi, g) in w.iter_mut().zip(gw) {
            *wi -= 0.5 * g / n;
        }
    }
    let xt = test.images().data();
    let correct = test
        .labels()
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let z: f64 = b + xt[i * d..(i + 1) * d]
                .iter()
                .zip(&w)
                .map(|(&xi, wi)| xi as f64 * wi)
                .sum::<f64>();
            (z > 0.0) as usize == y
        })
        .count();
    assert!(
        correct as f64 / test.len() as f64 > 0.9,
        "{correct}/{}",
        test.len()
    );
}

#[test]
fn stratified_split_sizes() {
    let images = Tensor::zeros(vec![100, 1, 2, 2]);
    let labels: Vec<usize> = (0..100).map(|i| if i < 70 { 0 } else { 1 }).collect();
    let ds = LabeledDataset::new(images, labels, 2, Split::Train).unwrap();
    let (train, val) = split_train_val(&ds, 0.2, 9).unwrap();
    assert_eq!((train.len(), val.len()), (80, 20));
    assert_eq!(val.class_counts(), vec![14, 6]);
    let mut ids: Vec<u32> = train.ids().iter().chain(val.ids()).copied().collect();
    ids.sort_unstable();
    assert_eq!(ids, (0..100).collect::<Vec<u32>>());
    assert_eq!(split_train_val(&ds, 0.2, 9).unwrap().1, val);
}

#[test]
fn split_quotas_use_largest_remainder() {
    let images = Tensor::zeros(vec![10, 1, 1, 1]);
    let labels = vec![0, 0, 0, 0, 0, 1, 1, 1, 2, 2];
    let ds = LabeledDataset::new(images, labels, 3, Split::Train).unwrap();
    let (_, val) = split_train_val(&ds, 0.3, 1).unwrap();
    // exact shares 1.5, 0.9, 0.6 -> floors 1, 0, 0; remainders favour class 1
    assert_eq!(val.class_counts(), vec![1, 1, 1]);
}

#[test]
fn empty_split_is_a_config_error() {
    let ds = LabeledDataset::new(
        Tensor::zeros(vec![3, 1, 1, 1]),
        vec![0, 1, 0],
        2,
        Split::Train,
    )
    .unwrap();
    assert!(matches!(
        split_train_val(&ds, 0.1, 0),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        split_train_val(&ds, 1.0, 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn dataset_rejects_bad_labels_and_pixels() {
    assert!(matches!(
        LabeledDataset::new(Tensor::zeros(vec![1, 1, 1, 1]), vec![2], 2, Split::Test),
        Err(Error::Label {
            label: 2,
            classes: 2
        })
    ));
    assert!(matches!(
        LabeledDataset::new(Tensor::full(vec![1, 1, 1, 1], 1.5), vec![0], 2, Split::Test),
        Err(Error::Data(_))
    ));
}

#[test]
fn channel_statistics() {
    let images = Tensor::new(
        vec![2, 2, 1, 2],
        vec![0.0, 1.0, 0.5, 0.5, 0.2, 0.2, 0.1, 0.9],
    )
    .unwrap();
    let ds = LabeledDataset::new(images, vec![0, 1], 2, Split::Train).unwrap();
    let m = ds.channel_means();
    assert!((m[0] - 0.35).abs() < 1e-6 && (m[1] - 0.5).abs() < 1e-6);
    assert_eq!(ds.channel_ranges(), vec![(0.0, 1.0), (0.1, 0.9)]);
}

fn cifar_record(label: u8, fill: u8) -> Vec<u8> {
    let mut r = vec![label];
    r.extend(std::iter::repeat_n(fill, CIFAR_RECORD_BYTES - 1));
    r
}

#[test]
fn cifar_batches_load_and_scale() {
    let dir = tempfile::tempdir().unwrap();
    for i in 1..=5 {
        fs::write(
            dir.path().join(format!("data_batch_{i}.bin")),
            cifar_record(i as u8, 255),
        )
        .unwrap();
    }
    let mut test_bytes = cifar_record(0, 0);
    test_bytes.extend(cifar_record(9, 51));
    fs::write(dir.path().join("test_batch.bin"), test_bytes).unwrap();
    let (train, test) = load_cifar10_binary(dir.path()).unwrap();
    assert_eq!(train.labels(), &[1, 2, 3, 4, 5]);
    assert_eq!(train.classes(), 10);
    assert!(train.images().data().iter().all(|&v| v == 1.0));
    assert_eq!(test.images().shape(), &[2, 3, 32, 32]);
    assert!((test.image(1).data()[0] - 0.2).abs() < 1e-7);
}

#[test]
fn cifar_errors_report_byte_offsets() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("b.bin");
    let mut bytes = cifar_record(0, 0);
    bytes.extend(cifar_record(10, 0));
    fs::write(&p, &bytes).unwrap();
    match read_cifar_batch(&p) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, CIFAR_RECORD_BYTES as u64),
        other => panic!("{other:?}"),
    }
    fs::write(&p, &bytes[..CIFAR_RECORD_BYTES + 10]).unwrap();
    assert!(
        matches!(read_cifar_batch(&p), Err(Error::Format { offset, .. }) if offset == CIFAR_RECORD_BYTES as u64)
    );
    assert!(matches!(
        load_cifar10_binary(dir.path()),
        Err(Error::Io { .. })
    ));
}

#[test]
fn cache_round_trip_is_order_independent() {
    let dir = tempfile::tempdir().unwrap();
    let entry = |id: u32| CacheEntry {
        sample_id: id,
        class: id % 2,
        map: vec![id as f32; 6],
    };
    let mut a = AttributionCache::new(2, 3);
    let mut b = AttributionCache::new(2, 3);
    for id in [5, 1, 9] {
        a.insert(entry(id)).unwrap();
    }
    for id in [9, 5, 1] {
        b.insert(entry(id)).unwrap();
    }
    assert_eq!(a.to_bytes(), b.to_bytes());
    let p = dir.path().join("cache.bin");
    a.write(&p).unwrap();
    let back = AttributionCache::read(&p).unwrap();
    assert_eq!(back.len(), 3);
    assert_eq!(back.get(9), Some(&entry(9)));
    assert!(back.get(2).is_none());
    assert!(!dir.path().join("cache.partial").exists());
}

#[test]
fn cache_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("cache.bin");
    let mut c = AttributionCache::new(1, 2);
    assert!(matches!(
        c.insert(CacheEntry {
            sample_id: 0,
            class: 0,
            map: vec![0.0; 3]
        }),
        Err(Error::Dimension { .. })
    ));
    c.insert(CacheEntry {
        sample_id: 0,
        class: 0,
        map: vec![0.0; 2],
    })
    .unwrap();
    let mut bytes = c.to_bytes();
    bytes[0] = b'Z';
    fs::write(&p, &bytes).unwrap();
    assert!(matches!(
        AttributionCache::read(&p),
        Err(Error::Format { offset: 0, .. })
    ));
    let good = c.to_bytes();
    fs::write(&p, &good[..good.len() - 2]).unwrap();
    assert!(matches!(
        AttributionCache::read(&p),
        Err(Error::Format { offset: 28, .. })
    ));
}
