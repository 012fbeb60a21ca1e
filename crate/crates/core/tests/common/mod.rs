#![allow(dead_code)]

use image::{Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use spectex::network::vgg19_conv_shapes;
use spectex::weights::{ConvRecord, WeightSet};

/// The first `convs` VGG-19 conv records with every width set to `width`,
/// He-initialized Gaussian kernels and small biases.
pub fn random_weights(seed: u64, convs: usize, width: u32) -> WeightSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = vgg19_conv_shapes()
        .into_iter()
        .take(convs)
        .enumerate()
        .map(|(i, s)| {
            let c_in = if i == 0 { 3 } else { width };
            let std = (2.0 / (9.0 * c_in as f64)).sqrt();
            let normal = Normal::new(0.0, std).unwrap();
            let kernel = (0..width * c_in * 9).map(|_| normal.sample(&mut rng) as f32).collect();
            let bias = (0..width).map(|_| (0.01 * normal.sample(&mut rng)) as f32).collect();
            ConvRecord::new(s.name, width, c_in, kernel, bias)
        })
        .collect();
    WeightSet::new([123.68, 116.78, 103.94], records)
}

/// Black/white checkerboard with the given period (two squares per period).
pub fn checkerboard(n: u32, period: u32) -> RgbImage {
    RgbImage::from_fn(n, n, |x, y| {
        let v = if (x / (period / 2) + y / (period / 2)).is_multiple_of(2) { 230 } else { 25 };
        Rgb([v, v, v])
    })
}

/// Colored vertical stripes with a slow vertical gradient.
pub fn stripes(n: u32) -> RgbImage {
    RgbImage::from_fn(n, n, |x, y| {
        let v = if (x / 2) % 2 == 0 { 200u32 } else { 40 };
        Rgb([v as u8, (v * 3 / 4) as u8, ((y * 9) % 255) as u8])
    })
}

pub fn constant(n: u32, v: u8) -> RgbImage {
    RgbImage::from_pixel(n, n, Rgb([v, v, v]))
}

/// Vertical cosine grating with `k` cycles across the image.
pub fn sinusoid(n: u32, k: u32) -> RgbImage {
    RgbImage::from_fn(n, n, |x, _| {
        let t = 2.0 * std::f64::consts::PI * (k * x) as f64 / n as f64;
        let v = (127.5 + 100.0 * t.cos()).round() as u8;
        Rgb([v, v, v])
    })
}
