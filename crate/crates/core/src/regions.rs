//! Region proposals: SLIC superpixels, majority-vote labels and RoIAlign.

use std::collections::VecDeque;
use std::path::Path;

use crate::encoders::LatentGrid;
use crate::error::{Error, Result};
use crate::imaging::{LabelMap, RgbImage};
use crate::numerics::{CustomOp, Graph, Tensor, Var};

pub const DEFAULT_COMPACTNESS: f64 = 10.0;
pub const DEFAULT_SLIC_ITERS: usize = 10;
pub const DEFAULT_ALIGN_SIZE: usize = 8;
pub const DEFAULT_ALIGN_SAMPLES: usize = 2;

/// Segment id per pixel; ids are `0..count`.
#[derive(Clone, Debug, PartialEq)]
pub struct SuperpixelMap {
    pub labels: LabelMap,
    pub count: usize,
    pub compactness: f64,
    pub requested: usize,
}

impl SuperpixelMap {
    pub fn height(&self) -> usize {
        self.labels.height()
    }

    pub fn width(&self) -> usize {
        self.labels.width()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.count];
        for &l in self.labels.data() {
            s[l] += 1;
        }
        s
    }

    /// Writes the segment ids as a 16-bit PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.labels.save_labels(path)
    }

    /// True when every segment id in `0..count` is used and forms a single
    /// 4-connected component.
    pub fn is_connected_partition(&self) -> bool {
        let comps = components(&self.labels);
        comps.count == self.count && self.labels.data().iter().all(|&l| l < self.count)
    }
}

struct Components {
    id: Vec<usize>,
    count: usize,
    size: Vec<usize>,
}

/// 4-connected components of equal labels, numbered in scan order.
fn components(map: &LabelMap) -> Components {
    let (h, w) = (map.height(), map.width());
    let data = map.data();
    let mut id = vec![usize::MAX; h * w];
    let mut size = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if id[start] != usize::MAX {
            continue;
        }
        let c = size.len();
        let mut n = 0;
        id[start] = c;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            n += 1;
            for q in neighbors(p, h, w).into_iter().flatten() {
                if id[q] == usize::MAX && data[q] == data[p] {
                    id[q] = c;
                    queue.push_back(q);
                }
            }
        }
        size.push(n);
    }
    Components {
        id,
        count: size.len(),
        size,
    }
}

fn neighbors(p: usize, h: usize, w: usize) -> [Option<usize>; 4] {
    let (r, c) = (p / w, p % w);
    [
        (r > 0).then(|| p - w),
        (r + 1 < h).then(|| p + w),
        (c > 0).then(|| p - 1),
        (c + 1 < w).then(|| p + 1),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Center {
    lab: [f64; 3],
    r: f64,
    c: f64,
}

/// Seed grid: `rows x cols` cells covering the image, about `m` in total.
fn seed_grid(h: usize, w: usize, m: usize) -> (usize, usize) {
    let cols = ((m as f64 * w as f64 / h as f64).sqrt().ceil() as usize).clamp(1, w);
    let rows = ((m as f64 / cols as f64).round() as usize).clamp(1, h);
    (rows, cols)
}

fn gradient_at(lab: &[[f64; 3]], h: usize, w: usize, r: usize, c: usize) -> f64 {
    let at = |rr: usize, cc: usize| lab[rr * w + cc];
    let d = |a: [f64; 3], b: [f64; 3]| (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>();
    let (r0, r1) = (r.saturating_sub(1), (r + 1).min(h - 1));
    let (c0, c1) = (c.saturating_sub(1), (c + 1).min(w - 1));
    d(at(r, c1), at(r, c0)) + d(at(r1, c), at(r0, c))
}

struct Slic<'a> {
    lab: &'a [[f64; 3]],
    h: usize,
    w: usize,
    step: f64,
    weight: f64,
}

impl Slic<'_> {
    fn dist2(&self, p: usize, c: &Center) -> f64 {
        let col = self.lab[p];
        let dc: f64 = (0..3).map(|i| (col[i] - c.lab[i]).powi(2)).sum();
        let (r, cc) = ((p / self.w) as f64, (p % self.w) as f64);
        let ds = (r - c.r).powi(2) + (cc - c.c).powi(2);
        dc + ds * self.weight
    }

    fn energy(&self, labels: &[usize], centers: &[Center]) -> f64 {
        labels.iter().enumerate().map(|(p, &l)| self.dist2(p, &centers[l])).sum()
    }

    /// Each pixel picks the closest center among those whose `2S x 2S`
    /// window covers it, its current center included.
    fn assign(&self, labels: &mut [usize], centers: &[Center]) {
        let mut best: Vec<f64> = labels.iter().enumerate().map(|(p, &l)| self.dist2(p, &centers[l])).collect();
        for (k, c) in centers.iter().enumerate() {
            let r0 = (c.r - self.step).floor().max(0.0) as usize;
            let r1 = ((c.r + self.step).ceil() as usize).min(self.h - 1);
            let c0 = (c.c - self.step).floor().max(0.0) as usize;
            let c1 = ((c.c + self.step).ceil() as usize).min(self.w - 1);
            for r in r0..=r1 {
                for cc in c0..=c1 {
                    let p = r * self.w + cc;
                    let d = self.dist2(p, c);
                    if d < best[p] {
                        best[p] = d;
                        labels[p] = k;
                    }
                }
            }
        }
    }

    fn update(&self, labels: &[usize], centers: &mut [Center]) {
        let mut acc = vec![[0.0f64; 6]; centers.len()];
        for (p, &l) in labels.iter().enumerate() {
            let a = &mut acc[l];
            for i in 0..3 {
                a[i] += self.lab[p][i];
            }
            a[3] += (p / self.w) as f64;
            a[4] += (p % self.w) as f64;
            a[5] += 1.0;
        }
        for (c, a) in centers.iter_mut().zip(&acc) {
            if a[5] > 0.0 {
                c.lab = [a[0] / a[5], a[1] / a[5], a[2] / a[5]];
                c.r = a[3] / a[5];
                c.c = a[4] / a[5];
            }
        }
    }
}

/// Per-iteration SLIC energies, exposed for diagnostics.
pub fn slic_energies(image: &RgbImage, m: usize, compactness: f64, max_iter: usize) -> Result<Vec<f64>> {
    Ok(slic_impl(image, m, compactness, max_iter)?.1)
}

/// SLIC superpixels in CIELAB with connectivity enforcement.
pub fn slic(image: &RgbImage, m: usize, compactness: f64, max_iter: usize) -> Result<SuperpixelMap> {
    Ok(slic_impl(image, m, compactness, max_iter)?.0)
}

fn slic_impl(image: &RgbImage, m: usize, compactness: f64, max_iter: usize) -> Result<(SuperpixelMap, Vec<f64>)> {
    let (h, w) = (image.height(), image.width());
    if m == 0 || !(compactness > 0.0) {
        return Err(Error::Config(format!("slic needs m >= 1 and compactness > 0, got {m}, {compactness}")));
    }
    if m > h * w {
        return Err(Error::MTooLarge {
            requested: m,
            pixels: h * w,
        });
    }
    if m == h * w {
        // Saturation: one pixel per segment.
        let labels = LabelMap::new(h, w, (0..h * w).collect())?;
        let sp = SuperpixelMap {
            labels,
            count: m,
            compactness,
            requested: m,
        };
        return Ok((sp, vec![0.0]));
    }
    let lab = image.lab();
    let step = ((h * w) as f64 / m as f64).sqrt();
    let slic = Slic {
        lab: &lab,
        h,
        w,
        step,
        weight: (compactness / step).powi(2),
    };

    let (rows, cols) = seed_grid(h, w, m);
    let (sy, sx) = (h as f64 / rows as f64, w as f64 / cols as f64);
    let mut centers = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let (mut r, mut c) = ((i as f64 + 0.5) * sy - 0.5, (j as f64 + 0.5) * sx - 0.5);
            let (ri, ci) = (r.round() as usize, c.round() as usize);
            let mut best = gradient_at(&lab, h, w, ri, ci);
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (ri as i64 + dr, ci as i64 + dc);
                    if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                        continue;
                    }
                    let g = gradient_at(&lab, h, w, rr as usize, cc as usize);
                    if g < best {
                        best = g;
                        r = rr as f64;
                        c = cc as f64;
                    }
                }
            }
            let p = r.round() as usize * w + c.round() as usize;
            centers.push(Center { lab: lab[p], r, c });
        }
    }

    // Start from the purely spatial nearest-seed partition.
    let mut labels: Vec<usize> = (0..h * w)
        .map(|p| {
            let (r, c) = ((p / w) as f64, (p % w) as f64);
            let i = ((r + 0.5) / sy).floor().min(rows as f64 - 1.0) as usize;
            let j = ((c + 0.5) / sx).floor().min(cols as f64 - 1.0) as usize;
            i * cols + j
        })
        .collect();
    let mut energies = vec![slic.energy(&labels, &centers)];
    for _ in 0..max_iter {
        slic.assign(&mut labels, &centers);
        slic.update(&labels, &mut centers);
        energies.push(slic.energy(&labels, &centers));
    }

    let raw = LabelMap::new(h, w, labels)?;
    let min_size = ((step * step) / 4.0).floor() as usize;
    let (labels, count) = enforce_connectivity(&raw, min_size);
    Ok((
        SuperpixelMap {
            labels,
            count,
            compactness,
            requested: m,
        },
        energies,
    ))
}

/// Keeps the largest component of each label; other fragments and
/// components below `min_size` join their largest adjacent kept segment.
fn enforce_connectivity(map: &LabelMap, min_size: usize) -> (LabelMap, usize) {
    let (h, w) = (map.height(), map.width());
    let comps = components(map);
    let nlabels = map.data().iter().max().map_or(0, |m| m + 1);
    let mut largest = vec![usize::MAX; nlabels];
    for c in 0..comps.count {
        let first = comps.id.iter().position(|&x| x == c).unwrap_or(0);
        let l = map.data()[first];
        if largest[l] == usize::MAX || comps.size[c] > comps.size[largest[l]] {
            largest[l] = c;
        }
    }
    let mut kept = vec![false; comps.count];
    for &c in largest.iter().filter(|&&c| c != usize::MAX) {
        kept[c] = comps.size[c] >= min_size.max(1);
    }
    if !kept.iter().any(|&k| k) {
        let biggest = (0..comps.count).max_by_key(|&c| (comps.size[c], std::cmp::Reverse(c))).unwrap_or(0);
        kept[biggest] = true;
    }

    let mut pixels_of: Vec<Vec<usize>> = vec![Vec::new(); comps.count];
    for (p, &c) in comps.id.iter().enumerate() {
        pixels_of[c].push(p);
    }
    let mut owner: Vec<usize> = (0..comps.count).collect();
    let mut size = comps.size.clone();
    let mut pending: Vec<usize> = (0..comps.count).filter(|&c| !kept[c]).collect();
    let mut id = comps.id.clone();
    while !pending.is_empty() {
        let mut deferred = Vec::new();
        for &c in &pending {
            let mut target: Option<usize> = None;
            for &p in &pixels_of[c] {
                for q in neighbors(p, h, w).into_iter().flatten() {
                    let o = owner[id[q]];
                    if o != c && kept[o] && target.is_none_or(|t| size[o] > size[t] || (size[o] == size[t] && o < t)) {
                        target = Some(o);
                    }
                }
            }
            match target {
                Some(t) => {
                    for &p in &pixels_of[c] {
                        id[p] = t;
                    }
                    owner[c] = t;
                    size[t] += size[c];
                }
                None => deferred.push(c),
            }
        }
        if deferred.len() == pending.len() {
            kept[deferred[0]] = true;
            deferred.remove(0);
        }
        pending = deferred;
    }

    let mut relabel = vec![usize::MAX; comps.count];
    let mut next = 0;
    let mut out = Vec::with_capacity(h * w);
    for &c in &id {
        if relabel[c] == usize::MAX {
            relabel[c] = next;
            next += 1;
        }
        out.push(relabel[c]);
    }
    (LabelMap::new(h, w, out).expect("same size"), next)
}

/// Box `(row0, col0, row1, col1)`, half-open.
pub type PixelBox = [usize; 4];
/// Box `(row0, col0, row1, col1)` in latent-grid cell units.
pub type LatentBox = [f64; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct RegionProposal {
    pub segment: usize,
    /// Flat pixel indices `r * width + c`, ascending.
    pub pixels: Vec<usize>,
    pub bbox: PixelBox,
    pub label: usize,
    pub latent_box: LatentBox,
}

/// Maps a pixel box into grid cells: divide by `p`, clamp to the grid and
/// widen sub-cell extents to one cell.
pub fn latent_box(bbox: PixelBox, scale: usize, grid_h: usize, grid_w: usize) -> LatentBox {
    let p = scale as f64;
    let axis = |a: usize, b: usize, n: usize| {
        let n = n as f64;
        let (mut lo, mut hi) = ((a as f64 / p).clamp(0.0, n), (b as f64 / p).clamp(0.0, n));
        if hi - lo < 1.0 {
            let span = 1.0f64.min(n);
            let mid = 0.5 * (lo + hi);
            lo = (mid - 0.5 * span).clamp(0.0, n - span);
            hi = lo + span;
        }
        (lo, hi)
    };
    let (r0, r1) = axis(bbox[0], bbox[2], grid_h);
    let (c0, c1) = axis(bbox[1], bbox[3], grid_w);
    [r0, c0, r1, c1]
}

/// One proposal per segment. With a mask, a segment takes a foreground
/// class only when that class covers strictly more than half its pixels;
/// otherwise (and without a mask) it is background.
pub fn proposals_from_superpixels(sp: &SuperpixelMap, mask: Option<&LabelMap>, scale: usize) -> Result<Vec<RegionProposal>> {
    let (h, w) = (sp.height(), sp.width());
    if let Some(m) = mask {
        m.same_size(h, w)?;
    }
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(Error::SizeNotDivisible { size: h.max(w), scale });
    }
    let mut pixels: Vec<Vec<usize>> = vec![Vec::new(); sp.count];
    for (p, &l) in sp.labels.data().iter().enumerate() {
        pixels[l].push(p);
    }
    let mut out = Vec::with_capacity(sp.count);
    for (segment, px) in pixels.into_iter().enumerate() {
        if px.is_empty() {
            continue;
        }
        let mut bbox = [usize::MAX, usize::MAX, 0, 0];
        for &p in &px {
            let (r, c) = (p / w, p % w);
            bbox[0] = bbox[0].min(r);
            bbox[1] = bbox[1].min(c);
            bbox[2] = bbox[2].max(r + 1);
            bbox[3] = bbox[3].max(c + 1);
        }
        let label = match mask {
            None => 0,
            Some(m) => majority_label(px.iter().map(|&p| m.data()[p]), px.len()),
        };
        out.push(RegionProposal {
            segment,
            latent_box: latent_box(bbox, scale, h / scale, w / scale),
            pixels: px,
            bbox,
            label,
        });
    }
    Ok(out)
}

/// Class covering strictly more than half of `n` labels, else background.
pub fn majority_label(labels: impl Iterator<Item = usize>, n: usize) -> usize {
    let mut counts: Vec<usize> = Vec::new();
    for l in labels {
        if l >= counts.len() {
            counts.resize(l + 1, 0);
        }
        counts[l] += 1;
    }
    counts
        .iter()
        .enumerate()
        .skip(1)
        .find(|&(_, &c)| 2 * c > n)
        .map_or(0, |(l, _)| l)
}

/// Bilinear taps of one RoIAlign output bin: `(row, col, weight)` with the
/// weights already divided by the number of samples.
type Taps = Vec<(usize, usize, f64)>;

fn check_box(b: &LatentBox, h: usize, w: usize) -> Result<LatentBox> {
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateBox(*b));
    }
    let c = [
        b[0].clamp(0.0, h as f64),
        b[1].clamp(0.0, w as f64),
        b[2].clamp(0.0, h as f64),
        b[3].clamp(0.0, w as f64),
    ];
    if c[2] - c[0] <= 0.0 || c[3] - c[1] <= 0.0 {
        return Err(Error::DegenerateBox(*b));
    }
    Ok(c)
}

/// Sample plan for a box on an `h x w` grid. Cell `i` spans `[i, i+1)` and
/// its value sits at the center `i + 0.5`.
fn plan(b: &LatentBox, h: usize, w: usize, s: usize, samples: usize) -> Result<Vec<Taps>> {
    if s == 0 || samples == 0 {
        return Err(Error::Config("roi_align needs s >= 1 and samples >= 1".into()));
    }
    let b = check_box(b, h, w)?;
    let (bh, bw) = ((b[2] - b[0]) / s as f64, (b[3] - b[1]) / s as f64);
    let norm = 1.0 / (samples * samples) as f64;
    let axis = |x: f64, n: usize| -> [(usize, f64); 2] {
        let x = (x - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        let t = x - lo as f64;
        [(lo, 1.0 - t), (hi, t)]
    };
    let mut out = Vec::with_capacity(s * s);
    for i in 0..s {
        for j in 0..s {
            let mut taps = Vec::with_capacity(4 * samples * samples);
            for si in 0..samples {
                let y = b[0] + bh * (i as f64 + (si as f64 + 0.5) / samples as f64);
                for sj in 0..samples {
                    let x = b[1] + bw * (j as f64 + (sj as f64 + 0.5) / samples as f64);
                    for (r, wr) in axis(y, h) {
                        for (c, wc) in axis(x, w) {
                            let wt = wr * wc * norm;
                            if wt != 0.0 {
                                taps.push((r, c, wt));
                            }
                        }
                    }
                }
            }
            out.push(taps);
        }
    }
    Ok(out)
}

/// Crops `grid` over `latent_box` into `[ℓ, s, s]`.
pub fn roi_align(grid: &LatentGrid, latent_box: LatentBox, s: usize, samples: usize) -> Result<Tensor> {
    let (h, w, l) = (grid.height(), grid.width(), grid.channels());
    let taps = plan(&latent_box, h, w, s, samples)?;
    let vals = grid.values.data();
    let mut out = vec![0.0; l * s * s];
    for (bin, t) in taps.iter().enumerate() {
        for &(r, c, wt) in t {
            let cell = &vals[(r * w + c) * l..(r * w + c + 1) * l];
            for ch in 0..l {
                out[ch * s * s + bin] += wt * cell[ch];
            }
        }
    }
    Tensor::new(vec![l, s, s], out)
}

struct RoiAlignOp {
    rois: Vec<(usize, Vec<Taps>)>,
    s: usize,
}

impl CustomOp for RoiAlignOp {
    fn name(&self) -> &'static str {
        "roi_align"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        if !needs[0] {
            return Ok(vec![None]);
        }
        let x = inputs[0];
        let [_, c, h, w] = x.dims4("roi_align")?;
        let ss = self.s * self.s;
        let mut dx = vec![0.0; x.len()];
        let g = grad.data();
        for (r, (b, taps)) in self.rois.iter().enumerate() {
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                let gbase = (r * c + ch) * ss;
                for (bin, t) in taps.iter().enumerate() {
                    let gv = g[gbase + bin];
                    for &(rr, cc, wt) in t {
                        dx[base + rr * w + cc] += wt * gv;
                    }
                }
            }
        }
        Ok(vec![Some(Tensor::new(x.shape().to_vec(), dx)?)])
    }
}

impl Graph {
    /// RoIAlign over `features[b, c, h, w]` for `(batch index, box)` pairs,
    /// giving `[r, c, s, s]`.
    pub fn roi_align(&mut self, features: Var, rois: &[(usize, LatentBox)], s: usize, samples: usize) -> Result<Var> {
        let [b, c, h, w] = self.value(features).dims4("roi_align")?;
        if rois.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut planned = Vec::with_capacity(rois.len());
        for &(bi, bx) in rois {
            if bi >= b {
                return Err(Error::shape("roi_align", format!("batch index {bi} of {b}")));
            }
            planned.push((bi, plan(&bx, h, w, s, samples)?));
        }
        let x = self.value(features).data();
        let ss = s * s;
        let mut out = vec![0.0; rois.len() * c * ss];
        for (r, (bi, taps)) in planned.iter().enumerate() {
            for ch in 0..c {
                let base = (bi * c + ch) * h * w;
                let obase = (r * c + ch) * ss;
                for (bin, t) in taps.iter().enumerate() {
                    out[obase + bin] = t.iter().map(|&(rr, cc, wt)| wt * x[base + rr * w + cc]).sum();
                }
            }
        }
        let out = Tensor::new(vec![rois.len(), c, s, s], out)?;
        self.custom(&[features], out, Box::new(RoiAlignOp { rois: planned, s }))
    }
}
