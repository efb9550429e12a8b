//! Interleaved RGB and single-channel images with values in `[0, 1]`.

use gues_tensor::Tensor;

use crate::error::{Error, Result};

/// `H x W x 3` image, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// Single-channel `H x W` image.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

fn check_range(data: &[f64], what: &'static str) -> Result<()> {
    match data.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(i) => Err(Error::Format {
            format: what,
            detail: format!("value {} at index {i} outside [0, 1]", data[i]),
        }),
        None => Ok(()),
    }
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("image extent {height}x{width} must be positive")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        check_range(&data, "image")?;
        Ok(Image { height, width, data })
    }

    /// Builds from a channel count that must be three.
    pub fn with_channels(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 3 {
            return Err(Error::Channels { expected: 3, got: channels });
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Clamps every value into `[0, 1]`.
    pub(crate) fn from_unclamped(height: usize, width: usize, mut data: Vec<f64>) -> Self {
        data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Image { height, width, data }
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("image extent {height}x{width} must be positive")));
        }
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} gray image needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        check_range(&data, "gray image")?;
        Ok(GrayImage { height, width, data })
    }

    /// No range check; used for perturbed probes that may leave `[0, 1]`.
    pub(crate) fn raw(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        GrayImage { height, width, data }
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }
}

/// Stacks images into an `(N, 3, H, W)` tensor.
pub fn images_to_tensor(images: &[Image]) -> Result<Tensor> {
    let first = images.first().ok_or(Error::EmptyDataset)?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.height != h || img.width != w {
            return Err(Error::Shape(format!(
                "batch mixes {h}x{w} with {}x{}",
                img.height, img.width
            )));
        }
        for c in 0..3 {
            data.extend(img.data.iter().skip(c).step_by(3));
        }
    }
    Ok(Tensor::new(&[images.len(), 3, h, w], data)?)
}

/// Splits an `(N, 3, H, W)` tensor back into images, clamping into `[0, 1]`.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Image>> {
    let [n, 3, h, w] = *t.shape() else {
        return Err(Error::Shape(format!("expected (N, 3, H, W), got {:?}", t.shape())));
    };
    let plane = h * w;
    Ok((0..n)
        .map(|s| {
            let base = &t.data()[s * 3 * plane..(s + 1) * 3 * plane];
            let data = (0..plane).flat_map(|p| (0..3).map(move |c| base[c * plane + p])).collect();
            Image::from_unclamped(h, w, data)
        })
        .collect())
}
