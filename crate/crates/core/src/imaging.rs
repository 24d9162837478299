//! Image containers, PNG IO and color conversions.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// RGB image with channel values in `[0, 1]`, row-major, interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::SizeMismatch(format!(
                "rgb buffer of {} values for {height}x{width}",
                data.len()
            )));
        }
        Ok(RgbImage { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        RgbImage { height, width, data }
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

    pub fn pixel(&self, r: usize, c: usize) -> [f64; 3] {
        let o = (r * self.width + c) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, r: usize, c: usize, rgb: [f64; 3]) {
        let o = (r * self.width + c) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
        RgbImage::new(h as usize, w as usize, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::fsutil::atomic_with(path, |tmp| {
            image::save_buffer(
            tmp,
            &self.to_bytes(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
            )?;
            Ok(())
        })
    }

    /// Quantizes to 8 bits and back, matching a PNG round trip.
    pub fn quantized(&self) -> RgbImage {
        let data = self.to_bytes().into_iter().map(|v| v as f64 / 255.0).collect();
        RgbImage {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Channel-first tensor `[3, h, w]` after per-channel standardization.
    pub fn to_chw(&self, mean: [f64; 3], std: [f64; 3]) -> Tensor {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for i in 0..hw {
            for c in 0..3 {
                out[c * hw + i] = (self.data[i * 3 + c] - mean[c]) / std[c];
            }
        }
        Tensor::new(vec![3, self.height, self.width], out).expect("image shape")
    }

    /// Sub-image over rows `r0..r1`, columns `c0..c1`.
    pub fn crop(&self, r0: usize, c0: usize, r1: usize, c1: usize) -> Result<RgbImage> {
        if r0 >= r1 || c0 >= c1 || r1 > self.height || c1 > self.width {
            return Err(Error::SizeMismatch(format!("crop ({r0},{c0},{r1},{c1}) of {}x{}", self.height, self.width)));
        }
        let mut data = Vec::with_capacity((r1 - r0) * (c1 - c0) * 3);
        for r in r0..r1 {
            let o = (r * self.width + c0) * 3;
            data.extend_from_slice(&self.data[o..o + (c1 - c0) * 3]);
        }
        RgbImage::new(r1 - r0, c1 - c0, data)
    }

    pub fn lab(&self) -> Vec<[f64; 3]> {
        self.data.chunks(3).map(|p| rgb_to_lab([p[0], p[1], p[2]])).collect()
    }
}

/// Integer label per pixel (class map or segment map).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<usize>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<usize>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::SizeMismatch(format!(
                "label buffer of {} values for {height}x{width}",
                data.len()
            )));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: usize) -> Self {
        LabelMap {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[usize] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [usize] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> usize {
        self.data[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: usize) {
        self.data[r * self.width + c] = v;
    }

    pub fn crop(&self, r0: usize, c0: usize, r1: usize, c1: usize) -> Result<LabelMap> {
        if r0 >= r1 || c0 >= c1 || r1 > self.height || c1 > self.width {
            return Err(Error::SizeMismatch(format!("crop ({r0},{c0},{r1},{c1}) of {}x{}", self.height, self.width)));
        }
        let data = (r0..r1).flat_map(|r| self.data[r * self.width + c0..r * self.width + c1].iter().copied()).collect();
        LabelMap::new(r1 - r0, c1 - c0, data)
    }

    pub fn same_size(&self, h: usize, w: usize) -> Result<()> {
        if self.height != h || self.width != w {
            return Err(Error::SizeMismatch(format!(
                "{}x{} map against {h}x{w}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Loads a binary mask: 0 is background, any non-zero value foreground.
    pub fn load_mask(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| usize::from(v > 127)).collect();
        LabelMap::new(h as usize, w as usize, data)
    }

    /// Writes a binary mask as 0 / 255.
    pub fn save_mask(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| if v > 0 { 255 } else { 0 }).collect();
        crate::fsutil::atomic_with(path, |tmp| {
            image::save_buffer(tmp, &bytes, self.width as u32, self.height as u32, image::ExtendedColorType::L8)?;
            Ok(())
        })
    }

    /// Writes raw label values as 16-bit grayscale.
    pub fn save_labels(&self, path: &Path) -> Result<()> {
        let max = self.data.iter().copied().max().unwrap_or(0);
        if max > u16::MAX as usize {
            return Err(Error::SizeMismatch(format!("label {max} does not fit in 16 bits")));
        }
        let bytes: Vec<u8> = self.data.iter().flat_map(|&v| (v as u16).to_ne_bytes()).collect();
        crate::fsutil::atomic_with(path, |tmp| {
            image::save_buffer(tmp, &bytes, self.width as u32, self.height as u32, image::ExtendedColorType::L16)?;
            Ok(())
        })
    }

    pub fn load_labels(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let img = image::open(path)?.to_luma16();
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| v as usize).collect();
        LabelMap::new(h as usize, w as usize, data)
    }
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// sRGB (D65) to CIELAB.
pub fn rgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(srgb_to_linear);
    let x = 0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175 * b;
    let z = 0.019_333_9 * r + 0.119_192 * g + 0.950_304_1 * b;
    let f = |t: f64| {
        let d: f64 = 6.0 / 29.0;
        if t > d * d * d {
            t.cbrt()
        } else {
            t / (3.0 * d * d) + 4.0 / 29.0
        }
    };
    let (fx, fy, fz) = (f(x / 0.950_47), f(y), f(z / 1.088_83));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// RGB to HSV, all components in `[0, 1]`.
pub fn rgb_to_hsv(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    [h, s, max]
}
