mod common;

use common::rng;
use proptest::prelude::*;
use rand::Rng;
use ssat_core::data::{
    augment, generate_synthetic, hflip, load_cifar_binary, load_raw_dir, mixup, mixup_with, nearest_centroid_accuracy,
    parse_cifar, perspective_perturb, random_erasing, sample_perspective, AugmentationPipeline, CifarLayout, Dataset,
    Split, SyntheticSpec, Transform,
};
use ssat_core::vit::Image;
use ssat_core::Error;

fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut r = rng(seed);
    Image::new(h, w, 3, (0..h * w * 3).map(|_| r.gen::<f32>()).collect()).unwrap()
}

fn cifar_record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
    let mut rec = vec![label];
    rec.extend((0..3072).map(fill));
    rec
}

#[test]
fn cifar_records_parse() {
    let mut bytes = cifar_record(7, |i| (i % 251) as u8);
    bytes.extend(cifar_record(2, |i| (i / 1024) as u8 * 100));
    let d = parse_cifar(&bytes, CifarLayout::Cifar10, Split::Train).unwrap();
    assert_eq!(d.len(), 2);
    assert_eq!((d.height, d.width, d.channels), (32, 32, 3));
    assert_eq!(d.label(0).unwrap(), 7);
    assert_eq!(d.label(1).unwrap(), 2);
    // planes are R, G, B; pixel (0, 0) of image 1 is (0, 100, 200)
    assert_eq!(&d.raw(1)[..3], &[0, 100, 200]);
    let img = d.image(0);
    assert_eq!(img.at(0, 1, 0), 1.0 / 255.0);
    assert_eq!(img.at(0, 0, 1), (1024 % 251) as f32 / 255.0);

    assert!(matches!(
        parse_cifar(&vec![0u8; 3072], CifarLayout::Cifar10, Split::Train),
        Err(Error::DatasetFormat(_))
    ));
    assert!(matches!(
        parse_cifar(&cifar_record(10, |_| 0), CifarLayout::Cifar10, Split::Train),
        Err(Error::DatasetFormat(_))
    ));

    let mut hundred = vec![3u8];
    hundred.extend(cifar_record(57, |_| 9));
    let d = parse_cifar(&hundred, CifarLayout::Cifar100, Split::Test).unwrap();
    assert_eq!(d.label(0).unwrap(), 57);
    assert_eq!(d.num_classes, 100);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("batch.bin");
    std::fs::write(&path, &bytes).unwrap();
    assert_eq!(load_cifar_binary(&path, CifarLayout::Cifar10, Split::Train).unwrap().len(), 2);
}

#[test]
fn raw_directory_loads() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("header.txt"), "2 3 3 4\n").unwrap();
    std::fs::write(dir.path().join("labels.txt"), "1\n3\n").unwrap();
    for i in 0..2u8 {
        let planes: Vec<u8> = (0..18).map(|j| j + 20 * i).collect();
        std::fs::write(dir.path().join(format!("{i:05}.raw")), planes).unwrap();
    }
    let d = load_raw_dir(dir.path(), Split::Train).unwrap();
    assert_eq!(d.len(), 2);
    assert_eq!(d.labels().unwrap(), &[1, 3]);
    assert_eq!(&d.raw(1)[..3], &[20, 26, 32]);
}

#[test]
fn stripped_labels_cannot_be_read() {
    let d = generate_synthetic(
        &SyntheticSpec {
            per_class: 2,
            image_size: 8,
            ..SyntheticSpec::default()
        },
        Split::Train,
    )
    .unwrap();
    let blind = d.without_labels();
    assert!(blind.label(0).is_err());
    assert!(blind.labels().is_err());
    assert_eq!(blind.image(0).label, None);
    assert_eq!(blind.bytes(), d.bytes());
}

#[test]
fn synthetic_is_deterministic_and_sized() {
    let spec = SyntheticSpec {
        classes: 3,
        per_class: 100,
        image_size: 16,
        seed: 4,
        ..SyntheticSpec::default()
    };
    let a = generate_synthetic(&spec, Split::Train).unwrap();
    assert_eq!(a.len(), 300);
    assert_eq!(a, generate_synthetic(&spec, Split::Train).unwrap());
    assert_ne!(a.bytes(), generate_synthetic(&spec, Split::Test).unwrap().bytes());
    for k in 0..3 {
        assert_eq!(a.labels().unwrap().iter().filter(|&&l| l == k).count(), 100);
    }
    assert!(generate_synthetic(&SyntheticSpec { classes: 1, ..spec.clone() }, Split::Train).is_err());
}

#[test]
fn synthetic_is_learnable_but_not_trivial() {
    let spec = SyntheticSpec {
        classes: 3,
        per_class: 200,
        image_size: 32,
        seed: 0,
        ..SyntheticSpec::default()
    };
    let train = generate_synthetic(&spec, Split::Train).unwrap();
    let test = generate_synthetic(&spec, Split::Test).unwrap();
    let acc = nearest_centroid_accuracy(&train, &test).unwrap();
    println!("nearest-centroid accuracy: {acc:.3}");
    assert!(acc > 1.0 / 3.0 + 0.05 && acc < 0.9, "{acc}");
}

#[test]
fn stratified_fraction_keeps_class_balance() {
    let spec = SyntheticSpec {
        classes: 3,
        per_class: 20,
        image_size: 8,
        ..SyntheticSpec::default()
    };
    let d = generate_synthetic(&spec, Split::Train).unwrap();
    let sub = d.stratified_fraction(0.3, 1).unwrap();
    assert_eq!(sub.len(), 18);
    for k in 0..3 {
        assert_eq!(sub.labels().unwrap().iter().filter(|&&l| l == k).count(), 6);
    }
    assert_eq!(d.stratified_fraction(1.0, 1).unwrap(), d);
    assert!(d.stratified_fraction(0.0, 1).is_err());
    let joined = Dataset::concat(&[sub.clone(), sub]).unwrap();
    assert_eq!(joined.len(), 36);
}

#[test]
fn augment_contracts() {
    let img = random_image(12, 10, 1);
    assert_eq!(augment(&img, &AugmentationPipeline::identity(), &mut rng(0)), img);

    let flip = AugmentationPipeline {
        transforms: vec![Transform::HorizontalFlip { p: 1.0 }, Transform::HorizontalFlip { p: 1.0 }],
    };
    assert_eq!(augment(&img, &flip, &mut rng(0)), img);
    assert_eq!(hflip(&img).at(3, 0, 1), img.at(3, 9, 1));

    let full_crop = AugmentationPipeline {
        transforms: vec![Transform::RandomResizedCrop {
            scale: (1.0, 1.0),
            ratio: (1.2, 1.2),
        }],
    };
    let out = augment(&img, &full_crop, &mut rng(0));
    assert_eq!((out.height, out.width), (12, 10));

    let standard = AugmentationPipeline::standard();
    for seed in 0..50 {
        let out = augment(&img, &standard, &mut rng(seed));
        assert_eq!((out.height, out.width, out.channels), (12, 10, 3));
        assert!(out.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        assert_eq!(out, augment(&img, &standard, &mut rng(seed)));
    }
}

#[test]
fn random_erasing_fills_one_rectangle_within_bounds() {
    let base = Image::zeros(32, 32, 3);
    let (lo, hi) = (0.02, 1.0 / 3.0);
    for seed in 0..200 {
        let mut img = base.clone();
        let rect = random_erasing(&mut img, (lo, hi), (0.3, 1.0 / 0.3), &mut rng(seed)).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let inside =
                    (rect.top..rect.top + rect.height).contains(&y) && (rect.left..rect.left + rect.width).contains(&x);
                if !inside {
                    assert!((0..3).all(|c| img.at(y, x, c) == 0.0));
                }
            }
        }
        let changed = img.pixels.iter().filter(|&&p| p != 0.0).count();
        assert!(changed > 0);
        // rounding of the side lengths can move the area by under one row and column
        let area = (rect.height * rect.width) as f64;
        let slack = (rect.height + rect.width + 1) as f64;
        assert!(area >= lo * 1024.0 - slack && area <= hi * 1024.0 + slack, "{rect:?}");
    }
}

#[test]
fn mixup_contracts() {
    let imgs: Vec<Image> = (0..4).map(|s| random_image(4, 4, s)).collect();
    let labels = [0, 1, 2, 1];
    let same = mixup_with(&imgs, &labels, 3, 1.0, &[3, 2, 1, 0]).unwrap();
    assert_eq!(same.images, imgs);
    for (i, row) in same.targets.chunks(3).enumerate() {
        assert_eq!(row[labels[i]], 1.0);
    }

    let a = mixup(&imgs, &labels, 3, 0.8, &mut rng(5)).unwrap();
    let b = mixup(&imgs, &labels, 3, 0.8, &mut rng(5)).unwrap();
    assert_eq!(a, b);
    for row in a.targets.chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&t| t >= 0.0));
    }
    let j = a.pairing[0];
    let expect = a.lambda * imgs[0].pixels[5] as f64 + (1.0 - a.lambda) * imgs[j].pixels[5] as f64;
    assert!((a.images[0].pixels[5] as f64 - expect).abs() < 1e-6);

    assert!(mixup(&imgs[..1], &labels[..1], 3, 0.8, &mut rng(0)).is_err());
    assert!(mixup(&imgs, &labels, 3, 0.0, &mut rng(0)).is_err());
}

#[test]
fn perspective_contracts() {
    let img = random_image(16, 20, 3);
    let out = perspective_perturb(&img, 0.0, &mut rng(0)).unwrap();
    for (a, b) in out.pixels.iter().zip(&img.pixels) {
        assert!((a - b).abs() < 1e-6);
    }

    let mut r = rng(1);
    for _ in 0..1000 {
        let strength = r.gen_range(0.0..=1.0);
        let p = sample_perspective(16, 20, strength, &mut r).unwrap();
        let bound = strength * 16.0 / 4.0;
        for (dx, dy) in p.displacements {
            assert!(dx.abs() <= bound && dy.abs() <= bound);
        }
    }

    let a = perspective_perturb(&img, 0.5, &mut rng(9)).unwrap();
    assert_eq!(a, perspective_perturb(&img, 0.5, &mut rng(9)).unwrap());
    assert_ne!(a, img);
    assert!(a.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
    assert!(perspective_perturb(&img, 1.5, &mut rng(0)).is_err());
}

proptest! {
    #[test]
    fn mixed_labels_are_distributions(lambda in 0.0f64..=1.0, seed in 0u64..100) {
        let imgs: Vec<Image> = (0..3).map(|s| random_image(2, 2, s + seed)).collect();
        let m = mixup_with(&imgs, &[0, 1, 1], 2, lambda, &[1, 2, 0]).unwrap();
        for row in m.targets.chunks(2) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        prop_assert!(m.images.iter().all(|i| i.pixels.iter().all(|p| (0.0..=1.0).contains(p))));
    }
}
