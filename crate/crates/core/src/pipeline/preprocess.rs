//! Conversions between 8-bit RGB images and mean-centred tensors.

use image::imageops::{self, FilterType};
use image::RgbImage;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

fn resize_dims(width: u32, height: u32, target: Option<u32>) -> Option<(u32, u32)> {
    let t = target.filter(|&t| t > 0)?;
    let longest = width.max(height);
    if longest == t {
        return None;
    }
    let s = t as f64 / longest as f64;
    Some((
        ((width as f64 * s).round() as u32).max(1),
        ((height as f64 * s).round() as u32).max(1),
    ))
}

/// Output size for a rescale that makes the longest side `target`, with both
/// sides then made even by dropping a trailing row or column.
pub fn rescaled_dims(width: u32, height: u32, target: Option<u32>) -> (u32, u32) {
    let (w, h) = resize_dims(width, height, target).unwrap_or((width, height));
    (w - w % 2, h - h % 2)
}

/// Resizes (bilinear) so the longest side equals `scale`, forces even
/// dimensions and subtracts the per-channel means.
pub fn preprocess<T: Real>(img: &RgbImage, means: [f32; 3], scale: Option<u32>) -> Result<Tensor<T>> {
    let (w, h) = rescaled_dims(img.width(), img.height(), scale);
    if w < 2 || h < 2 {
        return Err(Error::config(format!(
            "image of {}x{} is too small after preprocessing",
            img.width(),
            img.height()
        )));
    }
    let resized;
    let src = match resize_dims(img.width(), img.height(), scale) {
        Some((rw, rh)) => {
            resized = imageops::resize(img, rw, rh, FilterType::Triangle);
            &resized
        }
        None => img,
    };
    Ok(Tensor::from_fn(3, h as usize, w as usize, |c, y, x| {
        T::of_f64(src.get_pixel(x as u32, y as u32)[c] as f64 - means[c] as f64)
    }))
}

/// Raw pixel values as a tensor, without rescaling or centring.
pub fn image_to_tensor<T: Real>(img: &RgbImage) -> Tensor<T> {
    Tensor::from_fn(3, img.height() as usize, img.width() as usize, |c, y, x| {
        T::of_f64(img.get_pixel(x as u32, y as u32)[c] as f64)
    })
}

/// Adds the means back, clamps to `[0, 255]` and rounds.
pub fn postprocess<T: Real>(t: &Tensor<T>, means: [f32; 3]) -> Result<RgbImage> {
    if t.channels() != 3 {
        return Err(Error::config(format!(
            "cannot export a {}-channel tensor as RGB",
            t.channels()
        )));
    }
    Ok(RgbImage::from_fn(t.width() as u32, t.height() as u32, |x, y| {
        let px = |c: usize| {
            let v = t.get(c, y as usize, x as usize).as_f64() + means[c] as f64;
            v.clamp(0.0, 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_rule() {
        assert_eq!(rescaled_dims(512, 512, Some(256)), (256, 256));
        // 200·256/300 = 170.67 rounds to 171, evened to 170
        assert_eq!(rescaled_dims(300, 200, Some(256)), (256, 170));
        assert_eq!(rescaled_dims(200, 300, Some(256)), (170, 256));
        assert_eq!(rescaled_dims(65, 33, None), (64, 32));
        assert_eq!(rescaled_dims(64, 64, Some(0)), (64, 64));
    }

    #[test]
    fn preprocess_shapes_and_means() {
        let img = RgbImage::from_pixel(512, 512, image::Rgb([10, 20, 30]));
        let t: Tensor<f32> = preprocess(&img, [0.0; 3], Some(256)).unwrap();
        assert_eq!(t.shape(), (3, 256, 256));

        let means = [123.0, 117.0, 104.0];
        let img = RgbImage::from_pixel(40, 30, image::Rgb([123, 117, 104]));
        let t: Tensor<f64> = preprocess(&img, means, None).unwrap();
        assert!(t.as_slice().iter().all(|&v| v == 0.0));

        let img = RgbImage::new(300, 200);
        let t: Tensor<f32> = preprocess(&img, [0.0; 3], Some(256)).unwrap();
        assert_eq!((t.width(), t.height()), (256, 170));

        assert!(preprocess::<f32>(&RgbImage::new(1, 5), [0.0; 3], None).is_err());
    }

    #[test]
    fn postprocess_round_trips_and_clamps() {
        let img = RgbImage::from_fn(6, 4, |x, y| image::Rgb([x as u8 * 40, y as u8 * 60, 7]));
        let means = [100.5, 50.0, 3.25];
        let t: Tensor<f64> = preprocess(&img, means, None).unwrap();
        assert_eq!(postprocess(&t, means).unwrap(), img);

        let wild = Tensor::from_vec(3, 1, 2, vec![-500.0, 500.0, 0.4, 0.6, 254.6, 255.4]).unwrap();
        let out = postprocess(&wild, [0.0; 3]).unwrap();
        assert_eq!(out.get_pixel(0, 0).0, [0, 0, 255]);
        assert_eq!(out.get_pixel(1, 0).0, [255, 1, 255]);
    }
}
