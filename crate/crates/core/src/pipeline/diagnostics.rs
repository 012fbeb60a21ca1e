//! Spectral diagnostics: radially averaged power and the centred
//! log-magnitude picture of the gray-level DFT.

use std::io::Write;

use image::RgbImage;

use crate::error::Result;
use crate::real::Real;
use crate::spectrum::{Complex64, Fft2};
use crate::tensor::Tensor;

fn gray_dft<T: Real>(img: &Tensor<T>) -> Vec<Complex64> {
    let c = img.channels() as f64;
    let gray: Vec<f64> = (0..img.plane_len())
        .map(|i| (0..img.channels()).map(|ch| img.plane(ch)[i].as_f64()).sum::<f64>() / c)
        .collect();
    Fft2::new(img.height(), img.width()).forward(&gray)
}

/// Signed frequency of DFT index `k` for a transform of length `n`.
#[inline]
fn signed(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Mean power `|F(gray)|²` over integer-radius annuli (radius in cycles per
/// image, rounded to the nearest integer). The DC bin is excluded, so
/// radii start at 1. Empty annuli are omitted.
pub fn radial_spectrum_profile<T: Real>(img: &Tensor<T>) -> Vec<(usize, f64)> {
    let (h, w) = (img.height(), img.width());
    let bins = gray_dft(img);
    let mut sum: Vec<f64> = Vec::new();
    let mut count: Vec<usize> = Vec::new();
    for ky in 0..h {
        for kx in 0..w {
            let (fy, fx) = (signed(ky, h), signed(kx, w));
            let r = (fy * fy + fx * fx).sqrt().round() as usize;
            if r == 0 {
                continue;
            }
            if r >= sum.len() {
                sum.resize(r + 1, 0.0);
                count.resize(r + 1, 0);
            }
            sum[r] += bins[ky * w + kx].norm_sqr();
            count[r] += 1;
        }
    }
    (1..sum.len())
        .filter(|&r| count[r] > 0)
        .map(|r| (r, sum[r] / count[r] as f64))
        .collect()
}

/// Radius with the largest mean power, ties going to the smaller radius.
pub fn dominant_radius(profile: &[(usize, f64)]) -> Option<usize> {
    profile
        .iter()
        .fold(None::<(usize, f64)>, |best, &(r, p)| match best {
            Some((_, bp)) if bp >= p => best,
            _ => Some((r, p)),
        })
        .map(|(r, _)| r)
}

pub fn write_profile_csv(profile: &[(usize, f64)], mut out: impl Write) -> Result<()> {
    writeln!(out, "radius,power")?;
    for (r, p) in profile {
        writeln!(out, "{r},{p:e}")?;
    }
    Ok(())
}

/// `log(1 + |F(gray)|)` with the DC bin moved to the centre, scaled so the
/// largest value maps to 255.
pub fn log_magnitude_image<T: Real>(img: &Tensor<T>) -> RgbImage {
    let (h, w) = (img.height(), img.width());
    let bins = gray_dft(img);
    let logs: Vec<f64> = bins.iter().map(|b| b.norm().ln_1p()).collect();
    let max = logs.iter().cloned().fold(0.0, f64::max);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let ky = (y as usize + h - h / 2) % h;
        let kx = (x as usize + w - w / 2) % w;
        let v = if max > 0.0 {
            (logs[ky * w + kx] / max * 255.0).round() as u8
        } else {
            0
        };
        image::Rgb([v, v, v])
    })
}
