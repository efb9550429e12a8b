use gues_tensor::SeededRng;

use crate::image::Image;

/// Parametric acquisition shift:
/// `clamp01((blur(x, r) * tint + brightness)^gamma + N(0, sigma^2))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShiftParams {
    pub brightness_delta: f64,
    pub tint: [f64; 3],
    pub noise_sigma: f64,
    pub gamma: f64,
    pub blur_radius: usize,
}

impl ShiftParams {
    pub const IDENTITY: ShiftParams = ShiftParams {
        brightness_delta: 0.0,
        tint: [1.0, 1.0, 1.0],
        noise_sigma: 0.0,
        gamma: 1.0,
        blur_radius: 0,
    };

    /// Shift applied to every target-domain sample.
    pub const DEFAULT_TARGET: ShiftParams = ShiftParams {
        brightness_delta: -0.08,
        tint: [1.05, 0.95, 0.90],
        noise_sigma: 0.02,
        gamma: 1.1,
        blur_radius: 1,
    };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    pub fn validate(&self) -> crate::Result<()> {
        let ok = self.brightness_delta.is_finite()
            && self.tint.iter().all(|t| t.is_finite())
            && self.noise_sigma.is_finite()
            && self.noise_sigma >= 0.0
            && self.gamma.is_finite()
            && self.gamma > 0.0;
        if ok {
            Ok(())
        } else {
            Err(crate::Error::Config(format!("invalid shift parameters {self:?}")))
        }
    }
}

impl Default for ShiftParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Box blur with a `(2r+1)^2` window and replicate edges, per channel.
fn box_blur(image: &Image, radius: usize) -> Vec<f64> {
    let (h, w) = (image.height(), image.width());
    let src = image.data();
    let side = (2 * radius + 1) as f64;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut horizontal = vec![0.0; src.len()];
    for row in 0..h {
        for col in 0..w {
            for ch in 0..3 {
                let mut acc = 0.0;
                for d in -(radius as isize)..=radius as isize {
                    acc += src[(row * w + clamp(col as isize + d, w)) * 3 + ch];
                }
                horizontal[(row * w + col) * 3 + ch] = acc / side;
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for row in 0..h {
        for col in 0..w {
            for ch in 0..3 {
                let mut acc = 0.0;
                for d in -(radius as isize)..=radius as isize {
                    acc += horizontal[(clamp(row as isize + d, h) * w + col) * 3 + ch];
                }
                out[(row * w + col) * 3 + ch] = acc / side;
            }
        }
    }
    out
}

/// Applies `params` in the fixed order blur, tint, brightness, gamma,
/// noise, clamp. Stages at their identity setting are skipped, so the
/// identity shift returns the input bit for bit.
pub fn apply_shift(image: &Image, params: &ShiftParams, seed: u64) -> Image {
    let mut data = if params.blur_radius > 0 {
        box_blur(image, params.blur_radius)
    } else {
        image.data().to_vec()
    };
    for px in data.chunks_exact_mut(3) {
        for (v, t) in px.iter_mut().zip(params.tint) {
            *v *= t;
        }
    }
    if params.brightness_delta != 0.0 {
        data.iter_mut().for_each(|v| *v += params.brightness_delta);
    }
    if params.gamma != 1.0 {
        // a negative base has no real power; it would clamp to 0 anyway
        data.iter_mut().for_each(|v| *v = v.max(0.0).powf(params.gamma));
    }
    if params.noise_sigma > 0.0 {
        let mut rng = SeededRng::new(seed);
        data.iter_mut().for_each(|v| *v += params.noise_sigma * rng.normal());
    }
    Image::from_unclamped(image.height(), image.width(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::retina::render_with_counts;

    #[test]
    fn identity_is_bitwise_noop() {
        let img = render_with_counts(9, 3, 2).image;
        assert_eq!(apply_shift(&img, &ShiftParams::IDENTITY, 1), img);
    }

    #[test]
    fn full_brightness_saturates() {
        let img = render_with_counts(9, 3, 2).image;
        let p = ShiftParams {
            brightness_delta: 1.0,
            ..ShiftParams::IDENTITY
        };
        assert!(apply_shift(&img, &p, 1).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn default_shift_is_seeded_and_in_range() {
        let img = render_with_counts(9, 3, 2).image;
        let a = apply_shift(&img, &ShiftParams::DEFAULT_TARGET, 4);
        let b = apply_shift(&img, &ShiftParams::DEFAULT_TARGET, 4);
        let c = apply_shift(&img, &ShiftParams::DEFAULT_TARGET, 5);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn blur_preserves_constants() {
        let img = Image::filled(6, 5, [0.25, 0.5, 0.75]).unwrap();
        let out = box_blur(&img, 2);
        for (a, b) in out.iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
