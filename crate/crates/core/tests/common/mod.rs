//! Synthetic bi-temporal data shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hcgmnet::data::BitemporalSample;

/// Random-noise background shared by both dates; B additionally carries one
/// to three solid rectangles, which form the change label (0/255).
pub fn synthetic_pair(size: u32, seed: u64) -> (RgbImage, RgbImage, GrayImage) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = RgbImage::from_fn(size, size, |_, _| Rgb([rng.random(), rng.random(), rng.random()]));
    let mut b = a.clone();
    let mut label = GrayImage::new(size, size);
    for _ in 0..rng.random_range(1..=3) {
        let (w, h) = (
            rng.random_range(size / 8..=size / 3),
            rng.random_range(size / 8..=size / 3),
        );
        let (x0, y0) = (rng.random_range(0..size - w), rng.random_range(0..size - h));
        let colour = Rgb([rng.random(), rng.random(), rng.random()]);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                b.put_pixel(x, y, colour);
                label.put_pixel(x, y, Luma([255]));
            }
        }
    }
    (a, b, label)
}

pub fn synthetic_samples(count: usize, size: u32, seed: u64) -> Vec<BitemporalSample> {
    (0..count)
        .map(|i| {
            let (a, b, l) = synthetic_pair(size, seed + i as u64);
            BitemporalSample::from_images(format!("s{i}"), &a, &b, &l).unwrap()
        })
        .collect()
}

/// Write `count` pairs as `<root>/<split>/{A,B,label}/<prefix><i>.png`.
pub fn write_split(root: &Path, split: &str, prefix: &str, count: usize, size: u32, seed: u64) {
    for side in ["A", "B", "label"] {
        std::fs::create_dir_all(root.join(split).join(side)).unwrap();
    }
    for i in 0..count {
        let (a, b, l) = synthetic_pair(size, seed + i as u64);
        let name = format!("{prefix}{i:03}.png");
        a.save(root.join(split).join("A").join(&name)).unwrap();
        b.save(root.join(split).join("B").join(&name)).unwrap();
        l.save(root.join(split).join("label").join(&name)).unwrap();
    }
}

/// Small train/val/test dataset of `size`² pairs.
pub fn write_dataset(root: &Path, size: u32, counts: [usize; 3]) {
    for ((split, n), seed) in ["train", "val", "test"].into_iter().zip(counts).zip([100, 200, 300]) {
        write_split(root, split, split, n, size, seed);
    }
}
