use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::index::{DatasetIndex, SPLITS};
use super::netpbm::{save_pgm, save_ppm};
use super::BitemporalSample;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::rng::{self, ChaCha8Rng};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Side length of the square images.
    pub size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Inclusive range for the number of buildings in the pre image.
    pub shapes: [usize; 2],
    /// Inclusive range for the number of buildings added or removed.
    pub changes: [usize; 2],
    /// Inclusive range of building side lengths in pixels.
    pub shape_extent: [usize; 2],
    pub change_fraction: [f64; 2],
    /// Half-width of the per-channel gain and offset drift applied to post.
    pub drift: f32,
    pub noise_sigma: f32,
    pub seed: u64,
    /// Regeneration attempts per sample before giving up.
    pub max_retries: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            n_train: 200,
            n_val: 50,
            n_test: 50,
            shapes: [3, 7],
            changes: [1, 4],
            shape_extent: [8, 20],
            change_fraction: [0.02, 0.5],
            drift: 0.08,
            noise_sigma: 0.02,
            seed: 0,
            max_retries: 200,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.change_fraction;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "change fraction bounds must satisfy 0 <= lo <= hi <= 1, got [{lo}, {hi}]"
            )));
        }
        if self.size == 0 || !self.size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of 32",
                self.size
            )));
        }
        for (name, [a, b]) in [
            ("shapes", self.shapes),
            ("changes", self.changes),
            ("shape_extent", self.shape_extent),
        ] {
            if a > b {
                return Err(Error::Config(format!("{name} range [{a}, {b}] is empty")));
            }
        }
        let [emin, emax] = self.shape_extent;
        if emin == 0 || emax > self.size {
            return Err(Error::Config(format!(
                "shape extent [{emin}, {emax}] must lie in [1, {}]",
                self.size
            )));
        }
        if !(self.drift >= 0.0 && self.noise_sigma >= 0.0) {
            return Err(Error::Config("drift and noise_sigma must be non-negative".into()));
        }
        Ok(())
    }

    pub fn counts(&self) -> [usize; 3] {
        [self.n_train, self.n_val, self.n_test]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Rect,
    Ellipse,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Building {
    kind: Kind,
    x: usize,
    y: usize,
    w: usize,
    h: usize,
    color: [f32; 3],
}

impl Building {
    fn covers(&self, px: usize, py: usize) -> bool {
        if px < self.x || py < self.y || px >= self.x + self.w || py >= self.y + self.h {
            return false;
        }
        match self.kind {
            Kind::Rect => true,
            Kind::Ellipse => {
                let rx = self.w as f32 / 2.0;
                let ry = self.h as f32 / 2.0;
                let dx = (px as f32 + 0.5 - self.x as f32 - rx) / rx;
                let dy = (py as f32 + 0.5 - self.y as f32 - ry) / ry;
                dx * dx + dy * dy <= 1.0
            }
        }
    }

    /// Bounding boxes separated by at least one pixel.
    fn clear_of(&self, other: &Building) -> bool {
        self.x + self.w < other.x
            || other.x + other.w < self.x
            || self.y + self.h < other.y
            || other.y + other.h < self.y
    }
}

/// A generated scene together with the occupancy rasters it was drawn from.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub sample: BitemporalSample,
    pub occupancy_pre: Vec<u8>,
    pub occupancy_post: Vec<u8>,
}

struct Background {
    base: [f32; 3],
    waves: [(f32, f32, f32, f32); 3],
    grain: Vec<f32>,
}

impl Background {
    fn sample(size: usize, rng: &mut ChaCha8Rng) -> Self {
        let base = [
            rng.random_range(0.18..0.35),
            rng.random_range(0.25..0.42),
            rng.random_range(0.15..0.30),
        ];
        let waves = std::array::from_fn(|_| {
            (
                rng.random_range(0.02..0.12),
                rng.random_range(0.02..0.12),
                rng.random_range(0.0..std::f32::consts::TAU),
                rng.random_range(0.02..0.06),
            )
        });
        let grain = (0..size * size).map(|_| rng.random_range(-0.04..0.04)).collect();
        Self { base, waves, grain }
    }

    fn at(&self, c: usize, x: usize, y: usize, size: usize) -> f32 {
        let mut v = self.base[c] + self.grain[y * size + x];
        for &(fx, fy, phase, amp) in &self.waves {
            v += amp * (fx * x as f32 + fy * y as f32 + phase + c as f32).sin();
        }
        v
    }
}

fn place(
    cfg: &SynthConfig,
    existing: &[Building],
    rng: &mut ChaCha8Rng,
) -> Option<Building> {
    let [emin, emax] = cfg.shape_extent;
    for _ in 0..64 {
        let w = rng.random_range(emin..=emax);
        let h = rng.random_range(emin..=emax);
        let b = Building {
            kind: if rng.random_bool(0.5) { Kind::Rect } else { Kind::Ellipse },
            x: rng.random_range(0..=cfg.size - w),
            y: rng.random_range(0..=cfg.size - h),
            w,
            h,
            color: roof_color(rng),
        };
        if existing.iter().all(|o| b.clear_of(o)) {
            return Some(b);
        }
    }
    None
}

fn roof_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    let bright = rng.random_range(0.65..0.95);
    let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.15..0.05));
    tint.map(|t| bright + t)
}

fn occupancy(buildings: &[&Building], size: usize) -> Vec<u8> {
    let mut occ = vec![0u8; size * size];
    for b in buildings {
        for y in b.y..b.y + b.h {
            for x in b.x..b.x + b.w {
                if b.covers(x, y) {
                    occ[y * size + x] = 1;
                }
            }
        }
    }
    occ
}

fn render(bg: &Background, buildings: &[&Building], size: usize) -> Vec<f32> {
    let plane = size * size;
    let mut img = vec![0f32; 3 * plane];
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                img[c * plane + y * size + x] = bg.at(c, x, y, size);
            }
        }
    }
    for b in buildings {
        for y in b.y..b.y + b.h {
            for x in b.x..b.x + b.w {
                if b.covers(x, y) {
                    for c in 0..3 {
                        img[c * plane + y * size + x] = b.color[c];
                    }
                }
            }
        }
    }
    img
}

fn finish(img: &mut [f32], gain: [f32; 3], offset: [f32; 3], noise: &Option<Normal<f32>>, rng: &mut ChaCha8Rng) {
    let plane = img.len() / 3;
    for (i, v) in img.iter_mut().enumerate() {
        let c = i / plane;
        let mut x = gain[c] * *v + offset[c];
        if let Some(n) = noise {
            x += n.sample(rng);
        }
        *v = x.clamp(0.0, 1.0);
    }
}

/// One scene attempt; the change fraction is not checked here.
fn draw_scene(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<SynthScene> {
    let size = cfg.size;
    let bg = Background::sample(size, rng);
    let mut all: Vec<Building> = Vec::new();
    let n_pre = rng.random_range(cfg.shapes[0]..=cfg.shapes[1]);
    for _ in 0..n_pre {
        match place(cfg, &all, rng) {
            Some(b) => all.push(b),
            None => break,
        }
    }
    let n_pre = all.len();
    let mut removed = vec![false; n_pre];
    let n_changes = rng.random_range(cfg.changes[0]..=cfg.changes[1]);
    for _ in 0..n_changes {
        let kept: Vec<usize> = (0..n_pre).filter(|&i| !removed[i]).collect();
        if !kept.is_empty() && rng.random_bool(0.5) {
            removed[kept[rng.random_range(0..kept.len())]] = true;
        } else if let Some(b) = place(cfg, &all, rng) {
            all.push(b);
        } else if let Some(&i) = kept.first() {
            removed[i] = true;
        }
    }
    let pre: Vec<&Building> = all[..n_pre].iter().collect();
    let post: Vec<&Building> = all
        .iter()
        .enumerate()
        .filter(|&(i, _)| i >= n_pre || !removed[i])
        .map(|(_, b)| b)
        .collect();
    let occupancy_pre = occupancy(&pre, size);
    let occupancy_post = occupancy(&post, size);
    let mask_data: Vec<u8> = occupancy_pre
        .iter()
        .zip(&occupancy_post)
        .map(|(a, b)| a ^ b)
        .collect();

    let noise = (cfg.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, cfg.noise_sigma))
        .transpose()
        .map_err(|e| Error::Config(format!("noise sigma: {e}")))?;
    let d = cfg.drift;
    let gain: [f32; 3] = std::array::from_fn(|_| if d > 0.0 { rng.random_range(1.0 - d..=1.0 + d) } else { 1.0 });
    let offset: [f32; 3] =
        std::array::from_fn(|_| if d > 0.0 { rng.random_range(-d / 2.0..=d / 2.0) } else { 0.0 });
    let mut pre_img = render(&bg, &pre, size);
    let mut post_img = render(&bg, &post, size);
    finish(&mut pre_img, [1.0; 3], [0.0; 3], &noise, rng);
    finish(&mut post_img, gain, offset, &noise, rng);

    let shape = Shape::new(1, 3, size, size);
    Ok(SynthScene {
        sample: BitemporalSample {
            pre: Tensor::new(shape, pre_img)?,
            post: Tensor::new(shape, post_img)?,
            mask: Mask::new(1, size, size, mask_data)?,
        },
        occupancy_pre,
        occupancy_post,
    })
}

/// Draws scenes until one has a change fraction inside the configured bounds.
pub fn generate_scene(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<SynthScene> {
    let [lo, hi] = cfg.change_fraction;
    for _ in 0..cfg.max_retries.max(1) {
        let scene = draw_scene(cfg, rng)?;
        let f = scene.sample.mask.change_fraction();
        if (lo..=hi).contains(&f) {
            return Ok(scene);
        }
    }
    Err(Error::Generation(format!(
        "no scene with change fraction in [{lo}, {hi}] after {} attempts; \
         the bounds are likely infeasible for sizes {:?} and {:?} changes",
        cfg.max_retries.max(1),
        cfg.shape_extent,
        cfg.changes
    )))
}

/// Generates one split in memory. Each split draws from its own stream.
pub fn generate_split(cfg: &SynthConfig, split: usize, count: usize) -> Result<Vec<BitemporalSample>> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, (rng::streams::SYNTH << 8) | split as u64);
    (0..count)
        .map(|_| generate_scene(cfg, &mut rng).map(|s| s.sample))
        .collect()
}

pub fn sample_id(split: &str, i: usize) -> String {
    format!("{split}_{i:05}")
}

/// Writes train/val/test splits under `root` and returns their indexes.
pub fn generate_synthetic_dataset(cfg: &SynthConfig, root: impl AsRef<Path>) -> Result<Vec<DatasetIndex>> {
    cfg.validate()?;
    let root = root.as_ref();
    let mut out = Vec::new();
    for (si, (&split, count)) in SPLITS.iter().zip(cfg.counts()).enumerate() {
        let dir = root.join(split);
        for sub in ["A", "B", "label"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let samples = generate_split(cfg, si, count)?;
        let mut ids = Vec::with_capacity(count);
        for (i, s) in samples.iter().enumerate() {
            let id = sample_id(split, i);
            save_ppm(&s.pre, dir.join("A").join(format!("{id}.ppm")))?;
            save_ppm(&s.post, dir.join("B").join(format!("{id}.ppm")))?;
            save_pgm(&s.mask, dir.join("label").join(format!("{id}.pgm")))?;
            ids.push(id);
        }
        let index = DatasetIndex::new(root, split, ids);
        index.write_manifest()?;
        out.push(index);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            size: 32,
            n_train: 4,
            n_val: 2,
            n_test: 2,
            shape_extent: [4, 10],
            ..SynthConfig::default()
        }
    }

    #[test]
    fn mask_is_xor_of_occupancy() {
        let cfg = small();
        let mut rng = rng::stream(1, 0);
        for _ in 0..20 {
            let s = generate_scene(&cfg, &mut rng).unwrap();
            for i in 0..s.occupancy_pre.len() {
                assert_eq!(s.sample.mask.data()[i], s.occupancy_pre[i] ^ s.occupancy_post[i]);
            }
        }
    }

    #[test]
    fn no_changes_gives_empty_mask() {
        let cfg = SynthConfig {
            changes: [0, 0],
            change_fraction: [0.0, 1.0],
            ..small()
        };
        let mut rng = rng::stream(2, 0);
        for _ in 0..10 {
            let s = generate_scene(&cfg, &mut rng).unwrap();
            assert_eq!(s.sample.mask.count_ones(), 0);
            assert_eq!(s.occupancy_pre, s.occupancy_post);
        }
    }

    #[test]
    fn images_stay_in_unit_range() {
        let s = generate_split(&small(), 0, 3).unwrap();
        for x in &s {
            assert!(x.pre.data().iter().chain(x.post.data()).all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn infeasible_bounds_exhaust_retries() {
        let cfg = SynthConfig {
            change_fraction: [0.99, 1.0],
            max_retries: 5,
            ..small()
        };
        let err = generate_split(&cfg, 0, 1).unwrap_err();
        assert!(matches!(err, Error::Generation(ref m) if m.contains("[0.99, 1]")), "{err}");
    }

    #[test]
    fn invalid_config_is_rejected() {
        for cfg in [
            SynthConfig { change_fraction: [0.5, 0.2], ..small() },
            SynthConfig { size: 40, ..small() },
            SynthConfig { shapes: [5, 2], ..small() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }
}
