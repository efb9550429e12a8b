//! Training-free centre-surround saliency.
//!
//! For each pixel the centre value is compared against the mean of its
//! `(2s+1)^2 - 1` neighbours at surround radii `s` in {1, 3, 7}; positive
//! differences are summed over the radii and divided by their count, which
//! keeps the map in `[0, 1]`. Borders use replicate-edge padding so every
//! surround is a full window.

use crate::error::{Error, Result};
use crate::image::{GrayImage, Image};

/// Surround radii.
pub const SALIENCY_SCALES: [usize; 3] = [1, 3, 7];

/// Luma weights for RGB to gray.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Default finite-difference step for [`saliency_directional_derivative`].
pub const DEFAULT_PROBE_STEP: f64 = 1e-4;

/// Single-channel saliency map with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl SaliencyMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::raw(self.height, self.width, self.values.clone())
    }
}

pub fn to_gray(image: &Image) -> GrayImage {
    let data = image
        .data()
        .chunks_exact(3)
        // grouped so that white maps to exactly 1.0
        .map(|p| LUMA[0] * p[0] + (LUMA[1] * p[1] + LUMA[2] * p[2]))
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    GrayImage::raw(image.height(), image.width(), data)
}

/// Mean of the `(2s+1)^2 - 1` neighbours of `(row, col)`.
pub fn surround_mean(gray: &GrayImage, row: usize, col: usize, scale: usize) -> Result<f64> {
    let (h, w) = (gray.height(), gray.width());
    if row >= h || col >= w {
        return Err(Error::OutOfBounds {
            row,
            col,
            height: h,
            width: w,
        });
    }
    if scale == 0 {
        return Err(Error::Config("surround scale must be at least 1".into()));
    }
    let padded = Padded::new(gray.data(), h, w, scale);
    Ok(padded.surround(row, col, scale))
}

/// Replicate-padded copy of an image, so window sums need no bounds logic.
struct Padded {
    data: Vec<f64>,
    stride: usize,
    pad: usize,
}

impl Padded {
    fn new(src: &[f64], h: usize, w: usize, pad: usize) -> Self {
        let stride = w + 2 * pad;
        let mut data = Vec::with_capacity((h + 2 * pad) * stride);
        for r in 0..h + 2 * pad {
            let sr = r.saturating_sub(pad).min(h - 1);
            let line = &src[sr * w..(sr + 1) * w];
            data.extend(std::iter::repeat(line[0]).take(pad));
            data.extend_from_slice(line);
            data.extend(std::iter::repeat(line[w - 1]).take(pad));
        }
        Padded { data, stride, pad }
    }

    /// Window sum in row-major order minus the centre, over the neighbour count.
    fn surround(&self, row: usize, col: usize, scale: usize) -> f64 {
        let mut sum = 0.0;
        let top = row + self.pad - scale;
        let left = col + self.pad - scale;
        let side = 2 * scale + 1;
        for r in top..top + side {
            let line = &self.data[r * self.stride + left..r * self.stride + left + side];
            for &v in line {
                sum += v;
            }
        }
        let centre = self.data[(row + self.pad) * self.stride + col + self.pad];
        (sum - centre) / ((side * side - 1) as f64)
    }

    /// `cen - sur` as the mean of centre-minus-neighbour differences in
    /// row-major order, skipping the centre. Equal in exact arithmetic to
    /// `centre - surround`, but exactly zero wherever the window is flat.
    fn contrast(&self, row: usize, col: usize, scale: usize) -> f64 {
        let top = row + self.pad - scale;
        let left = col + self.pad - scale;
        let side = 2 * scale + 1;
        let centre = self.data[(row + self.pad) * self.stride + col + self.pad];
        let mut sum = 0.0;
        for r in 0..side {
            let base = (top + r) * self.stride + left;
            for c in 0..side {
                if r != scale || c != scale {
                    sum += centre - self.data[base + c];
                }
            }
        }
        sum / ((side * side - 1) as f64)
    }
}

fn saliency_raw(data: &[f64], h: usize, w: usize) -> Vec<f64> {
    saliency_raw_with_norm(data, h, w, SALIENCY_SCALES.len() as f64)
}

fn saliency_raw_with_norm(data: &[f64], h: usize, w: usize, norm: f64) -> Vec<f64> {
    let pad = SALIENCY_SCALES[SALIENCY_SCALES.len() - 1];
    let padded = Padded::new(data, h, w, pad);
    let mut out = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            let mut acc = 0.0;
            for &s in &SALIENCY_SCALES {
                acc += padded.contrast(row, col, s).max(0.0);
            }
            out.push(acc / norm);
        }
    }
    out
}

pub fn fine_grained_saliency(gray: &GrayImage) -> SaliencyMap {
    SaliencyMap {
        height: gray.height(),
        width: gray.width(),
        values: saliency_raw(gray.data(), gray.height(), gray.width()),
    }
}

/// [`fine_grained_saliency`] with the divisor of the scale sum replaced.
/// Only useful for exercising the verification harness.
pub fn fine_grained_saliency_with_norm(gray: &GrayImage, norm: f64) -> SaliencyMap {
    SaliencyMap {
        height: gray.height(),
        width: gray.width(),
        values: saliency_raw_with_norm(gray.data(), gray.height(), gray.width(), norm),
    }
}

/// Saliency of the luma image replicated into three channels: the
/// reconstruction target for generated examples.
pub fn saliency_target(image: &Image) -> Image {
    let map = fine_grained_saliency(&to_gray(image));
    let data = map.values.iter().flat_map(|&v| [v, v, v]).collect();
    Image::from_unclamped(image.height(), image.width(), data)
}

/// Forward-difference response of the whole saliency map to a bump of
/// `step` at one pixel: `(G(x + step * e_rc) - G(x)) / step`.
pub fn saliency_directional_derivative(gray: &GrayImage, row: usize, col: usize, step: f64) -> Result<Vec<f64>> {
    let (h, w) = (gray.height(), gray.width());
    if row >= h || col >= w {
        return Err(Error::OutOfBounds {
            row,
            col,
            height: h,
            width: w,
        });
    }
    let base = saliency_raw(gray.data(), h, w);
    let mut bumped = gray.data().to_vec();
    bumped[row * w + col] += step;
    let moved = saliency_raw(&bumped, h, w);
    Ok(moved.iter().zip(&base).map(|(a, b)| (a - b) / step).collect())
}

/// Upper bound on any single entry of [`saliency_directional_derivative`].
pub fn derivative_bound() -> f64 {
    SALIENCY_SCALES
        .iter()
        .map(|&s| {
            let n = ((2 * s + 1) * (2 * s + 1) - 1) as f64;
            1.0 + 1.0 / n
        })
        .sum::<f64>()
        / SALIENCY_SCALES.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> GrayImage {
        GrayImage::new(h, w, (0..h * w).map(|i| f(i / w, i % w)).collect()).unwrap()
    }

    #[test]
    fn luma_weights() {
        let px = |rgb| to_gray(&Image::filled(1, 1, rgb).unwrap()).data()[0];
        assert_eq!(px([1.0, 1.0, 1.0]), 1.0);
        assert_eq!(px([0.0, 0.0, 0.0]), 0.0);
        assert_eq!(px([1.0, 0.0, 0.0]), 0.299);
    }

    #[test]
    fn surround_of_constant_is_constant() {
        let g = GrayImage::constant(9, 9, 0.375).unwrap();
        for s in SALIENCY_SCALES {
            assert_eq!(surround_mean(&g, 0, 4, s).unwrap(), 0.375);
        }
    }

    #[test]
    fn surround_centre_and_corner() {
        let g = gray(3, 3, |r, c| if (r, c) == (1, 1) { 1.0 } else { 0.0 });
        assert_eq!(surround_mean(&g, 1, 1, 1).unwrap(), 0.0);
        assert_eq!(surround_mean(&g, 0, 0, 1).unwrap(), 0.125);
        assert!(matches!(surround_mean(&g, 3, 0, 1), Err(Error::OutOfBounds { .. })));
    }

    #[test]
    fn single_bright_pixel() {
        let g = gray(31, 31, |r, c| if (r, c) == (15, 15) { 1.0 } else { 0.0 });
        let s = fine_grained_saliency(&g);
        assert_eq!(s.get(15, 15), 1.0);
        for (r, c) in [(14, 15), (16, 15), (15, 14), (15, 16)] {
            assert_eq!(s.get(r, c), 0.0);
        }
    }

    #[test]
    fn target_replicates_channels() {
        let img = Image::new(4, 4, (0..48).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let t = saliency_target(&img);
        for p in t.data().chunks_exact(3) {
            assert!(p[0] == p[1] && p[1] == p[2]);
        }
        let flat = saliency_target(&Image::filled(8, 8, [0.2, 0.4, 0.9]).unwrap());
        assert!(flat.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn derivative_is_zero_where_clamp_is_active() {
        // dark pixel in a bright field: centre minus surround stays negative
        let g = gray(20, 20, |r, c| if (r, c) == (10, 10) { 0.1 } else { 0.8 });
        let d = saliency_directional_derivative(&g, 10, 10, DEFAULT_PROBE_STEP).unwrap();
        assert_eq!(d[10 * 20 + 10], 0.0);
    }

    #[test]
    fn derivative_is_local() {
        let g = GrayImage::constant(40, 40, 0.5).unwrap();
        let d = saliency_directional_derivative(&g, 20, 20, DEFAULT_PROBE_STEP).unwrap();
        for r in 0..40usize {
            for c in 0..40usize {
                let v = d[r * 40 + c];
                assert!(v.is_finite() && v.abs() <= derivative_bound() + 1e-9);
                if r.abs_diff(20) > 7 || c.abs_diff(20) > 7 {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }
}
