//! Prototype localization and gallery rendering.
//!
//! Every mixture component is mapped to the training region whose embedding
//! maximizes `log p(K = k | z)`: a grid cell upscaled to its `p x p` pixel box
//! for grid models, or a superpixel's exact pixel set for region models.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::gpl;
use crate::imaging::RgbImage;
use crate::pipeline::{grid_rows, Model, ModelKind};
use crate::regions::PixelBox;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Region {
    /// Grid cell `(row, col)` and its pixel box.
    Cell { row: usize, col: usize, bbox: PixelBox },
    /// Superpixel with its flat pixel indices and bounding box.
    Proposal { segment: usize, bbox: PixelBox, pixels: Vec<usize> },
}

impl Region {
    pub fn bbox(&self) -> PixelBox {
        match self {
            Region::Cell { bbox, .. } | Region::Proposal { bbox, .. } => *bbox,
        }
    }

    /// Flat pixel indices covered, for an image of width `width`.
    pub fn pixels(&self, width: usize) -> Vec<usize> {
        match self {
            Region::Cell { bbox: [r0, c0, r1, c1], .. } => {
                (*r0..*r1).flat_map(|r| (*c0..*c1).map(move |c| r * width + c)).collect()
            }
            Region::Proposal { pixels, .. } => pixels.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeReport {
    pub component: usize,
    pub class: usize,
    pub image: usize,
    pub image_name: String,
    pub region: Region,
    /// `log p(K = k | z)` of the best match.
    pub log_resp: f64,
    /// Share of the region's pixels whose true label is `class`.
    pub class_fraction: f64,
    /// Gallery file, set by [`render_gallery`].
    pub crop: Option<String>,
}

/// Pixel box of grid cell `(i, j)` at scale `p`.
pub fn cell_box(i: usize, j: usize, p: usize) -> PixelBox {
    [i * p, j * p, (i + 1) * p, (j + 1) * p]
}

/// Grid cell containing pixel `(r, c)`.
pub fn pixel_cell(r: usize, c: usize, p: usize) -> (usize, usize) {
    (r / p, c / p)
}

struct Best {
    value: f64,
    image: usize,
    region: Option<Region>,
}

/// Candidate regions of one image with their log responsibilities
/// `[regions, K]`.
fn scan_image(model: &Model, sample: &Sample) -> Result<(Vec<Region>, crate::numerics::Tensor)> {
    let params = model.gpl()?;
    match model.spec.kind {
        ModelKind::Protoseg => {
            let rows = grid_rows(model, &[&sample.image])?;
            let p = model.spec.encoder.scale();
            let gw = sample.image.width() / p;
            let regions = (0..rows.shape()[0])
                .map(|n| {
                    let (i, j) = (n / gw, n % gw);
                    Region::Cell {
                        row: i,
                        col: j,
                        bbox: cell_box(i, j, p),
                    }
                })
                .collect();
            Ok((regions, gpl::log_responsibilities(&params, &rows)?))
        }
        ModelKind::Protobb => {
            let e = model.embeddings(&sample.image)?;
            let regions = e
                .proposals
                .iter()
                .map(|p| Region::Proposal {
                    segment: p.segment,
                    bbox: p.bbox,
                    pixels: p.pixels.clone(),
                })
                .collect();
            Ok((regions, gpl::log_responsibilities(&params, &e.rows)?))
        }
    }
}

/// One report per component, scanning `samples` in order. Ties keep the
/// first region in (image, row-major cell or segment) order.
pub fn locate_prototypes(model: &Model, samples: &[Sample]) -> Result<Vec<PrototypeReport>> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let k = model.spec.num_components();
    let scans = crate::par::map_slice(samples, |s| scan_image(model, s));
    let mut best: Vec<Best> = (0..k)
        .map(|_| Best {
            value: f64::NEG_INFINITY,
            image: 0,
            region: None,
        })
        .collect();
    for (img, scan) in scans.into_iter().enumerate() {
        let (regions, lr) = scan?;
        for (n, region) in regions.iter().enumerate() {
            let row = lr.row(n);
            for (c, b) in best.iter_mut().enumerate() {
                if row[c] > b.value || b.region.is_none() {
                    b.value = row[c];
                    b.image = img;
                    b.region = Some(region.clone());
                }
            }
        }
    }
    let class_of = model.spec.class_of();
    best.into_iter()
        .enumerate()
        .map(|(c, b)| {
            let region = b.region.ok_or(Error::EmptyBatch)?;
            let s = &samples[b.image];
            let px = region.pixels(s.mask.width());
            let hits = px.iter().filter(|&&p| s.mask.data()[p] == class_of[c]).count();
            Ok(PrototypeReport {
                component: c,
                class: class_of[c],
                image: b.image,
                image_name: s.name.clone(),
                class_fraction: hits as f64 / px.len().max(1) as f64,
                region,
                log_resp: b.value,
                crop: None,
            })
        })
        .collect()
}

const TILE: usize = 64;
const GAP: usize = 4;

/// Crop of the report's bounding box; for proposals, pixels outside the
/// superpixel are dimmed.
pub fn crop_region(image: &RgbImage, region: &Region) -> Result<RgbImage> {
    let [r0, c0, r1, c1] = region.bbox();
    let mut crop = image.crop(r0, c0, r1, c1)?;
    if let Region::Proposal { pixels, .. } = region {
        let w = image.width();
        let mut inside = vec![false; crop.height() * crop.width()];
        for &p in pixels {
            let (r, c) = (p / w, p % w);
            inside[(r - r0) * crop.width() + (c - c0)] = true;
        }
        for r in 0..crop.height() {
            for c in 0..crop.width() {
                if !inside[r * crop.width() + c] {
                    let px = crop.pixel(r, c);
                    crop.set_pixel(r, c, px.map(|v| v * 0.35));
                }
            }
        }
    }
    Ok(crop)
}

/// Nearest-neighbour fit into a `size x size` tile, centered on black.
fn fit_tile(img: &RgbImage, size: usize) -> RgbImage {
    let scale = (size as f64 / img.height().max(img.width()) as f64).max(f64::MIN_POSITIVE);
    let (h, w) = (
        ((img.height() as f64 * scale) as usize).clamp(1, size),
        ((img.width() as f64 * scale) as usize).clamp(1, size),
    );
    let (oy, ox) = ((size - h) / 2, (size - w) / 2);
    let mut out = RgbImage::filled(size, size, [0.0; 3]);
    for r in 0..h {
        for c in 0..w {
            let sr = (r * img.height() / h).min(img.height() - 1);
            let sc = (c * img.width() / w).min(img.width() - 1);
            out.set_pixel(oy + r, ox + c, img.pixel(sr, sc));
        }
    }
    out
}

/// Colors of the class strip on the index sheet.
pub fn class_color(class: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 6] = [
        [0.2, 0.2, 0.9],
        [0.95, 0.15, 0.1],
        [0.1, 0.8, 0.2],
        [0.95, 0.8, 0.1],
        [0.7, 0.2, 0.8],
        [0.1, 0.8, 0.8],
    ];
    PALETTE[class % PALETTE.len()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GalleryIndex {
    pub index_sheet: String,
    /// Component ids per class row of the sheet.
    pub rows: Vec<Vec<usize>>,
    pub prototypes: Vec<PrototypeReport>,
}

/// Writes `proto_<k>.png` per report, `index.png` with one row per class
/// and `report.json`. Returns the written index.
pub fn render_gallery(reports: &[PrototypeReport], samples: &[Sample], out: &Path) -> Result<GalleryIndex> {
    if reports.is_empty() {
        return Err(Error::Config("no prototypes to render".into()));
    }
    std::fs::create_dir_all(out)?;
    let mut written = Vec::with_capacity(reports.len());
    let mut tiles = Vec::with_capacity(reports.len());
    for r in reports {
        let sample = samples
            .get(r.image)
            .ok_or_else(|| Error::Dataset(format!("report refers to image {} of {}", r.image, samples.len())))?;
        let crop = crop_region(&sample.image, &r.region)?;
        let name = format!("proto_{:03}.png", r.component);
        crop.save(&out.join(&name))?;
        tiles.push(fit_tile(&crop, TILE));
        let mut r = r.clone();
        r.crop = Some(name);
        written.push(r);
    }

    let classes = reports.iter().map(|r| r.class).max().unwrap_or(0) + 1;
    let rows: Vec<Vec<usize>> = (0..classes)
        .map(|c| (0..reports.len()).filter(|&i| reports[i].class == c).collect())
        .collect();
    let cols = rows.iter().map(Vec::len).max().unwrap_or(1).max(1);
    let strip = GAP * 2;
    let (h, w) = (classes * (TILE + GAP) + GAP, strip + GAP + cols * (TILE + GAP));
    let mut sheet = RgbImage::filled(h, w, [1.0; 3]);
    for (c, row) in rows.iter().enumerate() {
        let y = GAP + c * (TILE + GAP);
        for r in y..y + TILE {
            for x in 0..strip {
                sheet.set_pixel(r, x, class_color(c));
            }
        }
        for (slot, &i) in row.iter().enumerate() {
            let x = strip + GAP + slot * (TILE + GAP);
            for r in 0..TILE {
                for cc in 0..TILE {
                    sheet.set_pixel(y + r, x + cc, tiles[i].pixel(r, cc));
                }
            }
        }
    }
    sheet.save(&out.join("index.png"))?;
    let index = GalleryIndex {
        index_sheet: "index.png".into(),
        rows: rows.iter().map(|r| r.iter().map(|&i| reports[i].component).collect()).collect(),
        prototypes: written,
    };
    crate::fsutil::atomic_write(&out.join("report.json"), &serde_json::to_vec_pretty(&index)?)?;
    Ok(index)
}
