//! Pixel-level helpers: PNG IO, standardization, bilinear resize and the
//! quadrant split used by the 4-crop mode.

use std::path::Path;

use image::RgbImage;
use ndarray::{s, Array3, ArrayView3};
use num_traits::Float;

use crate::error::{Error, Result};

/// Per-channel means of the standard ImageNet normalization.
pub const CHANNEL_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
/// Per-channel standard deviations of the standard ImageNet normalization.
pub const CHANNEL_STD: [f32; 3] = [0.229, 0.224, 0.225];

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(img.to_rgb8())
}

pub fn save_rgb(image: &RgbImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    image
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// View an RGB image as a `(height, width, 3)` array.
pub fn rgb_to_array(image: &RgbImage) -> Array3<u8> {
    let (w, h) = image.dimensions();
    Array3::from_shape_vec((h as usize, w as usize, 3), image.as_raw().clone())
        .expect("RgbImage buffer is h*w*3")
}

pub fn array_to_rgb(raw: ArrayView3<u8>) -> Result<RgbImage> {
    let (h, w, c) = raw.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let data: Vec<u8> = raw.iter().copied().collect();
    Ok(RgbImage::from_raw(w as u32, h as u32, data).expect("buffer sized from shape"))
}

/// Standardize an 8-bit `(height, width, channels)` image into a
/// `(channels, height, width)` array: `(v / 255 - mean_c) / std_c`.
pub fn normalize_image(raw: ArrayView3<u8>) -> Result<Array3<f32>> {
    let (h, w, c) = raw.dim();
    if c != 3 {
        return Err(Error::Shape(format!(
            "normalize_image expects 3 channels, got {c}"
        )));
    }
    let mut out = Array3::<f32>::zeros((3, h, w));
    for ch in 0..3 {
        let (mean, std) = (CHANNEL_MEAN[ch], CHANNEL_STD[ch]);
        let src = raw.slice(s![.., .., ch]);
        out.slice_mut(s![ch, .., ..])
            .zip_mut_with(&src, |o, &v| *o = (f32::from(v) / 255.0 - mean) / std);
    }
    Ok(out)
}

/// Inverse of [`normalize_image`], returning values on the 0..255 scale
/// without rounding.
pub fn denormalize_image(x: ArrayView3<f32>) -> Result<Array3<f32>> {
    let (c, h, w) = x.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let mut out = Array3::<f32>::zeros((h, w, 3));
    for ch in 0..3 {
        let (mean, std) = (CHANNEL_MEAN[ch], CHANNEL_STD[ch]);
        out.slice_mut(s![.., .., ch])
            .zip_mut_with(&x.slice(s![ch, .., ..]), |o, &v| {
                *o = (v * std + mean) * 255.0
            });
    }
    Ok(out)
}

/// Quantize a de-normalized image back to 8-bit RGB.
pub fn to_rgb8(x: ArrayView3<f32>) -> Result<RgbImage> {
    let hwc = denormalize_image(x)?;
    let bytes = hwc.mapv(|v| v.round().clamp(0.0, 255.0) as u8);
    array_to_rgb(bytes.view())
}

/// Bilinear resize of a `(channels, height, width)` array with half-pixel
/// centres (source coordinates clamped at the border).
pub fn resize_bilinear<F: Float>(x: ArrayView3<F>, out_h: usize, out_w: usize) -> Array3<F> {
    let (c, h, w) = x.dim();
    if h == out_h && w == out_w {
        return x.to_owned();
    }
    let axis = |out_len: usize, in_len: usize| -> Vec<(usize, usize, F)> {
        let scale = in_len as f64 / out_len as f64;
        (0..out_len)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(in_len - 1);
                let i1 = (i0 + 1).min(in_len - 1);
                let t = F::from(src - i0 as f64).unwrap();
                (i0, i1, t)
            })
            .collect()
    };
    let ys = axis(out_h, h);
    let xs = axis(out_w, w);
    let mut out = Array3::<F>::zeros((c, out_h, out_w));
    let one = F::one();
    for ch in 0..c {
        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                let top = x[[ch, y0, x0]] * (one - tx) + x[[ch, y0, x1]] * tx;
                let bottom = x[[ch, y1, x0]] * (one - tx) + x[[ch, y1, x1]] * tx;
                out[[ch, oy, ox]] = top * (one - ty) + bottom * ty;
            }
        }
    }
    out
}

/// Split a `(channels, height, width)` image into its four quadrants in
/// row-major order: top-left, top-right, bottom-left, bottom-right.
pub fn four_crop<T: Clone>(x: ArrayView3<T>) -> Result<[Array3<T>; 4]> {
    let (_, h, w) = x.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "four_crop needs even sides, got {h}x{w}"
        )));
    }
    let (hh, hw) = (h / 2, w / 2);
    Ok([
        x.slice(s![.., ..hh, ..hw]).to_owned(),
        x.slice(s![.., ..hh, hw..]).to_owned(),
        x.slice(s![.., hh.., ..hw]).to_owned(),
        x.slice(s![.., hh.., hw..]).to_owned(),
    ])
}

/// Stitch four quadrants (as produced by [`four_crop`]) back together.
pub fn recompose<T: Clone + num_traits::Zero>(crops: &[Array3<T>; 4]) -> Result<Array3<T>> {
    let dim = crops[0].dim();
    if crops.iter().any(|c| c.dim() != dim) {
        return Err(Error::Shape("quadrants differ in shape".into()));
    }
    let (c, hh, hw) = dim;
    let mut out = Array3::<T>::zeros((c, hh * 2, hw * 2));
    out.slice_mut(s![.., ..hh, ..hw]).assign(&crops[0]);
    out.slice_mut(s![.., ..hh, hw..]).assign(&crops[1]);
    out.slice_mut(s![.., hh.., ..hw]).assign(&crops[2]);
    out.slice_mut(s![.., hh.., hw..]).assign(&crops[3]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_image_normalizes_to_negative_mean_over_std() {
        let raw = Array3::<u8>::zeros((4, 5, 3));
        let x = normalize_image(raw.view()).unwrap();
        for ch in 0..3 {
            let expected = -CHANNEL_MEAN[ch] / CHANNEL_STD[ch];
            assert!(x.slice(s![ch, .., ..]).iter().all(|&v| v == expected));
        }
    }

    #[test]
    fn mean_value_maps_to_zero() {
        // 255 * mean is not an integer, so check the formula at that value directly.
        for ch in 0..3 {
            let v = 255.0 * CHANNEL_MEAN[ch];
            let z = (v / 255.0 - CHANNEL_MEAN[ch]) / CHANNEL_STD[ch];
            assert!(z.abs() < 1e-6);
        }
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let raw = Array3::<u8>::zeros((4, 4, 4));
        assert!(normalize_image(raw.view()).is_err());
    }

    #[test]
    fn normalize_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw = Array::from_shape_fn((16, 12, 3), |_| rng.random::<u8>());
        let back = denormalize_image(normalize_image(raw.view()).unwrap().view()).unwrap();
        for (a, b) in raw.iter().zip(back.iter()) {
            assert!((f32::from(*a) - b).abs() < 1e-3, "{a} vs {b}");
        }
        // Relative to the unit-interval scale the error is below 1e-6 * 255.
        let unit_err = raw
            .iter()
            .zip(back.iter())
            .map(|(a, b)| ((f32::from(*a) - b) / 255.0).abs())
            .fold(0.0f32, f32::max);
        assert!(unit_err < 1e-5);
    }

    #[test]
    fn four_crop_shapes_and_identity() {
        let x = Array::from_shape_fn((3, 224, 224), |(c, y, x)| (c * 100000 + y * 300 + x) as f32);
        let crops = four_crop(x.view()).unwrap();
        for c in &crops {
            assert_eq!(c.dim(), (3, 112, 112));
        }
        assert_eq!(crops[1][[0, 0, 0]], x[[0, 0, 112]]);
        assert_eq!(crops[2][[0, 0, 0]], x[[0, 112, 0]]);
        assert_eq!(recompose(&crops).unwrap(), x);
    }

    #[test]
    fn four_crop_of_constant_is_constant() {
        let x = Array3::<f32>::from_elem((3, 8, 6), 0.25);
        let crops = four_crop(x.view()).unwrap();
        assert!(crops.iter().all(|c| c.iter().all(|&v| v == 0.25)));
    }

    #[test]
    fn four_crop_rejects_odd() {
        let x = Array3::<f32>::zeros((3, 7, 8));
        assert!(four_crop(x.view()).is_err());
    }

    #[test]
    fn resize_preserves_constants_and_identity() {
        let x = Array3::<f64>::from_elem((2, 5, 7), 1.5);
        let y = resize_bilinear(x.view(), 11, 3);
        assert!(y.iter().all(|&v| (v - 1.5).abs() < 1e-12));
        let z = Array::from_shape_fn((1, 4, 4), |(_, a, b)| (a * 4 + b) as f64);
        assert_eq!(resize_bilinear(z.view(), 4, 4), z);
    }

    #[test]
    fn resize_upsample_matches_half_pixel_convention() {
        // 2 -> 4 along a line: [a, b] -> [a, 0.75a+0.25b, 0.25a+0.75b, b]
        let x = Array3::from_shape_vec((1, 1, 2), vec![0.0f64, 4.0]).unwrap();
        let y = resize_bilinear(x.view(), 1, 4);
        assert_eq!(y.as_slice().unwrap(), &[0.0, 1.0, 3.0, 4.0]);
    }
}
