//! Datasets: the synthetic "fruit on foliage" generator and the on-disk
//! layout (`images/*.png`, `masks/*.png`, `train.txt`, `val.txt`).

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{LabelMap, RgbImage};
use crate::par;

/// One image with its class map (0 background, 1 foreground).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: RgbImage,
    pub mask: LabelMap,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub train: usize,
    pub val: usize,
    pub size: usize,
    /// 0: separable colors; 1: more noise and occluding stripes;
    /// 2: additionally fruit-colored decoys and overlapping hues.
    pub difficulty: u8,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            train: 200,
            val: 50,
            size: 64,
            difficulty: 0,
            seed: 0,
        }
    }
}

const GREEN: [f64; 3] = [0.22, 0.52, 0.18];
const BROWN: [f64; 3] = [0.42, 0.31, 0.2];
const RED: [f64; 3] = [0.86, 0.12, 0.1];
const PURPLE: [f64; 3] = [0.52, 0.12, 0.55];

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i] * (1.0 - t) + b[i] * t)
}

struct Wave {
    fr: f64,
    fc: f64,
    phase: f64,
}

/// Draws one synthetic image. Each image has its own RNG stream so the
/// result does not depend on generation order.
pub fn synthetic_sample(size: usize, difficulty: u8, seed: u64, index: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    let noise_std = if difficulty == 0 { 0.03 } else { 0.06 };
    let noise = Normal::new(0.0, noise_std).expect("finite std");
    let n = size as f64;

    let waves: Vec<Wave> = (0..3)
        .map(|_| Wave {
            fr: rng.gen_range(0.5..3.0) * std::f64::consts::TAU / n,
            fc: rng.gen_range(0.5..3.0) * std::f64::consts::TAU / n,
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        })
        .collect();
    let mut image = RgbImage::filled(size, size, [0.0; 3]);
    let mut mask = LabelMap::filled(size, size, 0);
    for r in 0..size {
        for c in 0..size {
            let f: f64 = waves
                .iter()
                .map(|w| (w.fr * r as f64 + w.fc * c as f64 + w.phase).sin())
                .sum::<f64>()
                / 3.0;
            image.set_pixel(r, c, mix(GREEN, BROWN, 0.5 + 0.5 * f));
        }
    }

    if difficulty >= 2 {
        // Flat fruit-colored squares: same hue, no disc shape or shading.
        for _ in 0..rng.gen_range(1..=3) {
            let side = rng.gen_range(size / 8..=size / 4).max(2);
            let r0 = rng.gen_range(0..size - side);
            let c0 = rng.gen_range(0..size - side);
            let color = mix(if rng.gen_bool(0.5) { RED } else { PURPLE }, BROWN, rng.gen_range(0.0..0.4));
            for r in r0..r0 + side {
                for c in c0..c0 + side {
                    image.set_pixel(r, c, [0, 1, 2].map(|i| color[i] * 0.8));
                }
            }
        }
    }

    for _ in 0..rng.gen_range(1..=3) {
        let radius = rng.gen_range(n * 0.14..n * 0.25);
        let cr = rng.gen_range(radius * 0.5..n - radius * 0.5);
        let cc = rng.gen_range(radius * 0.5..n - radius * 0.5);
        let base = if rng.gen_bool(0.5) { RED } else { PURPLE };
        let base = if difficulty >= 2 {
            mix(base, BROWN, rng.gen_range(0.0..0.4))
        } else {
            base
        };
        for r in 0..size {
            for c in 0..size {
                let d = ((r as f64 + 0.5 - cr).powi(2) + (c as f64 + 0.5 - cc).powi(2)).sqrt() / radius;
                if d < 1.0 {
                    let shade = 1.05 - 0.35 * d * d;
                    image.set_pixel(r, c, [0, 1, 2].map(|i| base[i] * shade));
                    mask.set(r, c, 1);
                }
            }
        }
    }

    if difficulty >= 1 {
        for _ in 0..rng.gen_range(0..=2) {
            let width = rng.gen_range(1.5..3.5);
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            let (sa, ca) = angle.sin_cos();
            let (r0, c0) = (rng.gen_range(0.0..n), rng.gen_range(0.0..n));
            for r in 0..size {
                for c in 0..size {
                    let dist = ((r as f64 - r0) * ca - (c as f64 - c0) * sa).abs();
                    if dist < width / 2.0 {
                        image.set_pixel(r, c, mix(BROWN, [0.0; 3], 0.3));
                        mask.set(r, c, 0);
                    }
                }
            }
        }
    }

    for r in 0..size {
        for c in 0..size {
            let p = image.pixel(r, c);
            image.set_pixel(r, c, p.map(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0)));
        }
    }
    Sample {
        name: format!("img_{index:05}"),
        image: image.quantized(),
        mask,
    }
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.size < 8 || cfg.train == 0 {
        return Err(Error::Config("synthetic data needs size >= 8 and at least one training image".into()));
    }
    if cfg.difficulty > 2 {
        return Err(Error::Config(format!("difficulty must be 0, 1 or 2, got {}", cfg.difficulty)));
    }
    let total = cfg.train + cfg.val;
    let mut all = par::map_range(total, |i| synthetic_sample(cfg.size, cfg.difficulty, cfg.seed, i as u64));
    let val = all.split_off(cfg.train);
    Ok(Dataset { train: all, val })
}

/// Writes the dataset layout under `root`.
pub fn write_dataset(root: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(root.join("images"))?;
    fs::create_dir_all(root.join("masks"))?;
    for (split, samples) in [("train", &data.train), ("val", &data.val)] {
        let mut list = String::new();
        for s in samples {
            let file = format!("{}.png", s.name);
            s.image.save(&root.join("images").join(&file))?;
            s.mask.save_mask(&root.join("masks").join(&file))?;
            list.push_str(&file);
            list.push('\n');
        }
        crate::fsutil::atomic_write(&root.join(format!("{split}.txt")), list.as_bytes())?;
    }
    Ok(())
}

fn manifest(root: &Path, split: &str) -> Result<Vec<String>> {
    let path = root.join(format!("{split}.txt"));
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    Ok(fs::read_to_string(&path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

/// Loads one split listed in `<split>.txt`, checking that every image has
/// a mask of the same size.
pub fn load_split(root: &Path, split: &str) -> Result<Vec<Sample>> {
    let files = manifest(root, split)?;
    if files.is_empty() {
        return Err(Error::Dataset(format!("{split}.txt under {} lists no images", root.display())));
    }
    let paths: Vec<(PathBuf, PathBuf, String)> = files
        .iter()
        .map(|f| {
            let name = Path::new(f).file_stem().map_or(f.clone(), |s| s.to_string_lossy().into_owned());
            (root.join("images").join(f), root.join("masks").join(f), name)
        })
        .collect();
    for (img, mask, _) in &paths {
        for p in [img, mask] {
            if !p.exists() {
                return Err(Error::MissingFile(p.clone()));
            }
        }
    }
    let loaded = par::map_slice(&paths, |(img, mask, name)| -> Result<Sample> {
        let image = RgbImage::load(img)?;
        let mask_map = LabelMap::load_mask(mask)?;
        if mask_map.height() != image.height() || mask_map.width() != image.width() {
            return Err(Error::Dataset(format!(
                "mask {} is {}x{} but its image is {}x{}",
                mask.display(),
                mask_map.height(),
                mask_map.width(),
                image.height(),
                image.width()
            )));
        }
        Ok(Sample {
            name: name.clone(),
            image,
            mask: mask_map,
        })
    });
    loaded.into_iter().collect()
}

/// Cuts every sample into `n x n` training tiles. Samples already `n x n`
/// pass through; larger ones yield `ceil(h/n) * ceil(w/n)` crops at
/// uniformly random offsets.
pub fn random_crops(samples: &[Sample], n: usize, seed: u64) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::Config("crop size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for s in samples {
        let (h, w) = (s.image.height(), s.image.width());
        if h < n || w < n {
            return Err(Error::Dataset(format!("{} is {h}x{w}, smaller than the {n}x{n} training size", s.name)));
        }
        if h == n && w == n {
            out.push(s.clone());
            continue;
        }
        for _ in 0..h.div_ceil(n) * w.div_ceil(n) {
            let r0 = rng.gen_range(0..=h - n);
            let c0 = rng.gen_range(0..=w - n);
            out.push(Sample {
                name: format!("{}@{r0}x{c0}", s.name),
                image: s.image.crop(r0, c0, r0 + n, c0 + n)?,
                mask: s.mask.crop(r0, c0, r0 + n, c0 + n)?,
            });
        }
    }
    Ok(out)
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    Ok(Dataset {
        train: load_split(root, "train")?,
        val: load_split(root, "val")?,
    })
}
