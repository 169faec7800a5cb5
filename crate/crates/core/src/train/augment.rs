use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::BitemporalSample;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::rng::ChaCha8Rng;
use crate::tensor::{Shape, Tensor};

/// Probabilities and magnitudes of the training-time augmentations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Applied independently to the horizontal and the vertical axis.
    pub flip_prob: f64,
    pub jitter_prob: f64,
    /// Additive brightness offset drawn from [-b, b].
    pub brightness: f32,
    /// Contrast factor drawn from [1 - c, 1 + c].
    pub contrast: f32,
    pub scale_crop_prob: f64,
    pub max_scale: f32,
    pub blur_prob: f64,
    pub blur_sigma: [f32; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            jitter_prob: 0.5,
            brightness: 0.1,
            contrast: 0.1,
            scale_crop_prob: 0.3,
            max_scale: 1.2,
            blur_prob: 0.2,
            blur_sigma: [0.3, 1.0],
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            flip_prob: 0.0,
            jitter_prob: 0.0,
            scale_crop_prob: 0.0,
            blur_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("jitter_prob", self.jitter_prob),
            ("scale_crop_prob", self.scale_crop_prob),
            ("blur_prob", self.blur_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        let [lo, hi] = self.blur_sigma;
        if !(self.max_scale >= 1.0 && self.brightness >= 0.0 && self.contrast >= 0.0 && 0.0 < lo && lo <= hi) {
            return Err(Error::Config(
                "max_scale must be >= 1, brightness/contrast >= 0 and 0 < blur_sigma[0] <= blur_sigma[1]".into(),
            ));
        }
        Ok(())
    }
}

fn flip_image(img: &Tensor<f32>, horizontal: bool) -> Tensor<f32> {
    let s = img.shape();
    let (h, w) = (s.h(), s.w());
    let src = img.data();
    Tensor::from_fn(s, |i| {
        let (plane, r) = (i / (h * w), i % (h * w));
        let (y, x) = (r / w, r % w);
        let (y, x) = if horizontal { (y, w - 1 - x) } else { (h - 1 - y, x) };
        src[plane * h * w + y * w + x]
    })
}

fn flip_mask(m: &Mask, horizontal: bool) -> Mask {
    let (h, w) = (m.h(), m.w());
    let t = Tensor::new(Shape::new(m.n(), 1, h, w), m.data().iter().map(|&v| v as f32).collect())
        .expect("mask extent");
    let f = flip_image(&t, horizontal);
    Mask::new(m.n(), h, w, f.data().iter().map(|&v| v as u8).collect()).expect("binary")
}

/// Joint flip of pre, post and mask.
pub fn flip_pair(s: &BitemporalSample, horizontal: bool) -> BitemporalSample {
    BitemporalSample {
        pre: flip_image(&s.pre, horizontal),
        post: flip_image(&s.post, horizontal),
        mask: flip_mask(&s.mask, horizontal),
    }
}

fn jitter(img: &Tensor<f32>, brightness: f32, contrast: f32) -> Tensor<f32> {
    let mean = img.data().iter().sum::<f32>() / img.numel() as f32;
    img.map(|v| ((v - mean) * contrast + mean + brightness).clamp(0.0, 1.0))
}

/// Zooms by `scale` about the origin of the window `(oy, ox)` in the zoomed
/// image and crops back to the input size. Images are sampled bilinearly,
/// the mask by nearest neighbour.
fn scale_crop(s: &BitemporalSample, scale: f32, oy: usize, ox: usize) -> BitemporalSample {
    let (h, w) = (s.height(), s.width());
    let src = |y: usize, x: usize| {
        (
            (((y + oy) as f32 + 0.5) / scale - 0.5).clamp(0.0, (h - 1) as f32),
            (((x + ox) as f32 + 0.5) / scale - 0.5).clamp(0.0, (w - 1) as f32),
        )
    };
    let sample = |img: &Tensor<f32>| {
        let d = img.data();
        Tensor::from_fn(img.shape(), |i| {
            let (c, r) = (i / (h * w), i % (h * w));
            let (sy, sx) = src(r / w, r % w);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f32, sx - x0 as f32);
            let at = |y: usize, x: usize| d[c * h * w + y * w + x];
            let top = at(y0, x0) + fx * (at(y0, x1) - at(y0, x0));
            let bot = at(y1, x0) + fx * (at(y1, x1) - at(y1, x0));
            top + fy * (bot - top)
        })
    };
    let md = s.mask.data();
    let mask: Vec<u8> = (0..h * w)
        .map(|r| {
            let y = ((((r / w + oy) as f32 + 0.5) / scale) as usize).min(h - 1);
            let x = ((((r % w + ox) as f32 + 0.5) / scale) as usize).min(w - 1);
            md[y * w + x]
        })
        .collect();
    BitemporalSample {
        pre: sample(&s.pre),
        post: sample(&s.post),
        mask: Mask::new(1, h, w, mask).expect("binary"),
    }
}

fn gaussian3(sigma: f32) -> [f32; 3] {
    let e = (-0.5 / (sigma * sigma)).exp();
    let z = 1.0 + 2.0 * e;
    [e / z, 1.0 / z, e / z]
}

/// Separable 3×3 Gaussian blur with edge clamping, per channel.
pub fn blur3x3(img: &Tensor<f32>, sigma: f32) -> Tensor<f32> {
    let k = gaussian3(sigma);
    let s = img.shape();
    let (h, w) = (s.h(), s.w());
    let pass = |d: &[f32], horizontal: bool| -> Vec<f32> {
        (0..d.len())
            .map(|i| {
                let (p, r) = (i / (h * w), i % (h * w));
                let (y, x) = (r / w, r % w);
                let mut acc = 0.0;
                for (t, kt) in k.iter().enumerate() {
                    let (yy, xx) = if horizontal {
                        (y, (x + t).saturating_sub(1).min(w - 1))
                    } else {
                        ((y + t).saturating_sub(1).min(h - 1), x)
                    };
                    acc += kt * d[p * h * w + yy * w + xx];
                }
                acc
            })
            .collect()
    };
    let tmp = pass(img.data(), true);
    Tensor::new(s, pass(&tmp, false)).expect("same shape")
}

/// Randomly augments a sample. Geometric transforms are shared by both
/// images and the mask; photometric ones are drawn per image and never touch
/// the mask.
pub fn augment_pair(sample: &BitemporalSample, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> BitemporalSample {
    let mut s = sample.clone();
    if rng.random_bool(cfg.flip_prob) {
        s = flip_pair(&s, true);
    }
    if rng.random_bool(cfg.flip_prob) {
        s = flip_pair(&s, false);
    }
    if rng.random_bool(cfg.scale_crop_prob) {
        let scale = rng.random_range(1.0..=cfg.max_scale);
        let (h, w) = (s.height(), s.width());
        let span = |n: usize| ((n as f32 * scale).floor() as usize).saturating_sub(n);
        let oy = rng.random_range(0..=span(h));
        let ox = rng.random_range(0..=span(w));
        s = scale_crop(&s, scale, oy, ox);
    }
    for img in [&mut s.pre, &mut s.post] {
        if rng.random_bool(cfg.jitter_prob) {
            let b = rng.random_range(-cfg.brightness..=cfg.brightness);
            let c = rng.random_range(1.0 - cfg.contrast..=1.0 + cfg.contrast);
            *img = jitter(img, b, c);
        }
        if rng.random_bool(cfg.blur_prob) {
            let sigma = rng.random_range(cfg.blur_sigma[0]..=cfg.blur_sigma[1]);
            *img = blur3x3(img, sigma);
        }
    }
    s
}

/// Deterministic stand-in teacher: one-hot ground truth blended toward the
/// uniform distribution by `smoothing`, optionally blurred spatially.
/// Returns (N,2,H,W) probabilities.
pub fn oracle_teacher_predict(gt: &Mask, smoothing: f64, blur_sigma: Option<f32>) -> Tensor<f32> {
    let (n, h, w) = (gt.n(), gt.h(), gt.w());
    let lam = smoothing as f32;
    let on = Tensor::new(
        Shape::new(n, 1, h, w),
        gt.data().iter().map(|&g| (1.0 - lam) * g as f32 + lam / 2.0).collect(),
    )
    .expect("mask extent");
    let on = match blur_sigma {
        Some(sigma) => blur3x3(&on, sigma),
        None => on,
    };
    let plane = h * w;
    let mut out = vec![0f32; 2 * n * plane];
    for b in 0..n {
        for p in 0..plane {
            let p1 = on.data()[b * plane + p];
            out[(2 * b) * plane + p] = 1.0 - p1;
            out[(2 * b + 1) * plane + p] = p1;
        }
    }
    Tensor::new(Shape::new(n, 2, h, w), out).expect("extent")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_split, SynthConfig};
    use crate::rng;

    fn sample() -> BitemporalSample {
        let cfg = SynthConfig {
            size: 32,
            shape_extent: [4, 10],
            ..SynthConfig::default()
        };
        generate_split(&cfg, 0, 1).unwrap().remove(0)
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let s = sample();
        let mut r = rng::stream(0, 0);
        assert_eq!(augment_pair(&s, &AugmentConfig::disabled(), &mut r), s);
    }

    #[test]
    fn double_flip_is_identity() {
        let s = sample();
        for horizontal in [true, false] {
            let once = flip_pair(&s, horizontal);
            assert_ne!(once, s);
            assert_eq!(flip_pair(&once, horizontal), s);
        }
    }

    #[test]
    fn augmented_masks_stay_binary_and_images_in_range() {
        let s = sample();
        let cfg = AugmentConfig {
            flip_prob: 0.5,
            jitter_prob: 1.0,
            scale_crop_prob: 1.0,
            blur_prob: 1.0,
            ..AugmentConfig::default()
        };
        let mut r = rng::stream(1, 0);
        for _ in 0..10 {
            let a = augment_pair(&s, &cfg, &mut r);
            assert!(a.mask.data().iter().all(|&v| v <= 1));
            assert!(a.pre.data().iter().chain(a.post.data()).all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn unit_scale_crop_is_identity() {
        let s = sample();
        assert_eq!(scale_crop(&s, 1.0, 0, 0), s);
    }

    #[test]
    fn oracle_teacher_values() {
        let gt = Mask::new(1, 1, 2, vec![0, 1]).unwrap();
        let exact = oracle_teacher_predict(&gt, 0.0, None);
        assert_eq!(exact.data(), &[1.0, 0.0, 0.0, 1.0]);
        let smooth = oracle_teacher_predict(&gt, 0.1, None);
        assert!((smooth.data()[3] - 0.95).abs() < 1e-7 && (smooth.data()[1] - 0.05).abs() < 1e-7);
        let blurred = oracle_teacher_predict(&sample().mask, 0.1, Some(0.8));
        let plane = 32 * 32;
        for p in 0..plane {
            assert!((blurred.data()[p] + blurred.data()[plane + p] - 1.0).abs() < 1e-6);
        }
    }
}
