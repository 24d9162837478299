//! ProtoSegNet and ProtoBBNet: model assembly, staged training,
//! segmentation and checkpoints.
//!
//! ProtoSegNet classifies every cell of the latent grid and paints its
//! `p x p` pixel patch. ProtoBBNet embeds one vector per SLIC superpixel
//! (RoIAlign crop of the grid through a secondary encoder) and paints the
//! superpixel's pixels.

mod checkpoint;
mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use train::{train, LossRecord, Schedule, TrainReport, Trainer};

use crate::encoders::{Ctx, EncoderConfig, FeatureExtractor, LatentGrid, SecondaryEncoder};
use crate::error::{Error, Result};
use crate::gpl::{self, GplParams, LinearHead};
use crate::imaging::{LabelMap, RgbImage};
use crate::numerics::nn::nchw_to_rows;
use crate::numerics::{Graph, Tensor};
use crate::params::{Bound, ParamStore};
use crate::regions::{self, RegionProposal, SuperpixelMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Protoseg,
    Protobb,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "protoseg" => Ok(ModelKind::Protoseg),
            "protobb" => Ok(ModelKind::Protobb),
            other => Err(Error::Config(format!("unknown model {other:?}; expected protoseg or protobb"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub gmm: f64,
    pub clf: f64,
    pub l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            gmm: 1.0,
            clf: 1.0,
            l1: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegionConfig {
    pub proposals: usize,
    pub compactness: f64,
    pub slic_iters: usize,
    pub align_size: usize,
    pub align_samples: usize,
    /// Channels of the secondary encoder's hidden layers.
    pub hidden: usize,
    /// Dimension of the proposal embedding.
    pub latent: usize,
}

impl Default for RegionConfig {
    fn default() -> Self {
        RegionConfig {
            proposals: 200,
            compactness: regions::DEFAULT_COMPACTNESS,
            slic_iters: regions::DEFAULT_SLIC_ITERS,
            align_size: regions::DEFAULT_ALIGN_SIZE,
            align_samples: regions::DEFAULT_ALIGN_SAMPLES,
            hidden: 16,
            latent: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub encoder: EncoderConfig,
    pub classes: usize,
    pub prototypes_per_class: usize,
    pub region: Option<RegionConfig>,
    pub loss: LossWeights,
}

impl ModelSpec {
    /// Spec with default region and loss settings.
    pub fn new(kind: ModelKind, encoder: EncoderConfig, classes: usize, prototypes_per_class: usize) -> Self {
        ModelSpec {
            kind,
            encoder,
            classes,
            prototypes_per_class,
            region: (kind == ModelKind::Protobb).then(RegionConfig::default),
            loss: LossWeights::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.classes < 2 || self.prototypes_per_class == 0 {
            return Err(Error::Config("need at least 2 classes and 1 prototype per class".into()));
        }
        match (self.kind, &self.region) {
            (ModelKind::Protobb, None) => Err(Error::Config("protobb needs a region config".into())),
            (ModelKind::Protoseg, Some(_)) => Err(Error::Config("protoseg takes no region config".into())),
            (ModelKind::Protobb, Some(r)) if r.align_size < 8 || r.proposals == 0 || r.latent == 0 => Err(Error::Config(
                "region config needs align_size >= 8, proposals >= 1 and latent >= 1".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn num_components(&self) -> usize {
        self.classes * self.prototypes_per_class
    }

    pub fn class_of(&self) -> Vec<usize> {
        (0..self.num_components()).map(|k| k / self.prototypes_per_class).collect()
    }

    /// Dimension of the vectors the prototype layer sees.
    pub fn embedding_dim(&self) -> usize {
        match &self.region {
            Some(r) => r.latent,
            None => self.encoder.reduced_channels,
        }
    }

    pub fn extractor(&self) -> FeatureExtractor {
        FeatureExtractor::new(self.encoder.clone(), true).expect("validated encoder config")
    }

    pub fn secondary(&self) -> Option<SecondaryEncoder> {
        self.region
            .as_ref()
            .map(|r| SecondaryEncoder::new(self.encoder.reduced_channels, r.hidden, r.latent, r.align_size))
    }
}

pub const GPL_LOGITS: &str = "gpl.logits";
pub const GPL_MEANS: &str = "gpl.means";
pub const GPL_CHOL: &str = "gpl.chol_raw";
pub const HEAD_RAW: &str = "head.raw";
const NORM_MEAN: &str = "norm.mean";
const NORM_STD: &str = "norm.std";

/// Initial cross-class effective head weight.
pub const HEAD_INIT_CROSS: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
    /// Batch-norm running statistics and input normalization.
    pub buffers: ParamStore,
}

impl Model {
    /// Randomly initialized network with placeholder prototypes.
    pub fn new<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        spec.extractor().init(&mut params, &mut buffers, rng);
        if let Some(sec) = spec.secondary() {
            sec.init(&mut params, &mut buffers, rng);
        }
        let (n, d) = (spec.num_components(), spec.embedding_dim());
        params.insert(GPL_LOGITS, Tensor::zeros(&[n]));
        params.insert(GPL_MEANS, Tensor::zeros(&[n, d]));
        params.insert(GPL_CHOL, Tensor::zeros(&[n, d, d]));
        let head = LinearHead::class_aligned(&spec.class_of(), spec.classes, 1.0, HEAD_INIT_CROSS);
        params.insert(HEAD_RAW, head.raw);
        buffers.insert(NORM_MEAN, Tensor::zeros(&[3]));
        buffers.insert(NORM_STD, Tensor::full(&[3], 1.0));
        Ok(Model { spec, params, buffers })
    }

    pub fn gpl(&self) -> Result<GplParams> {
        GplParams::new(
            self.params.get(GPL_LOGITS)?.clone(),
            self.params.get(GPL_MEANS)?.clone(),
            self.params.get(GPL_CHOL)?.clone(),
            self.spec.class_of(),
        )
    }

    pub fn set_gpl(&mut self, p: &GplParams) -> Result<()> {
        *self.params.get_mut(GPL_LOGITS)? = p.logits.clone();
        *self.params.get_mut(GPL_MEANS)? = p.means.clone();
        *self.params.get_mut(GPL_CHOL)? = p.chol_raw.clone();
        Ok(())
    }

    pub fn head(&self) -> Result<LinearHead> {
        LinearHead::new(self.params.get(HEAD_RAW)?.clone())
    }

    pub fn normalization(&self) -> Result<([f64; 3], [f64; 3])> {
        let m = self.buffers.get(NORM_MEAN)?.data();
        let s = self.buffers.get(NORM_STD)?.data();
        Ok(([m[0], m[1], m[2]], [s[0], s[1], s[2]]))
    }

    /// Sets the per-channel input statistics from a set of images.
    pub fn fit_normalization(&mut self, images: &[&RgbImage]) -> Result<()> {
        if images.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        let mut n = 0.0;
        for img in images {
            for p in img.data().chunks(3) {
                for c in 0..3 {
                    sum[c] += p[c];
                    sq[c] += p[c] * p[c];
                }
                n += 1.0;
            }
        }
        let mean = sum.map(|s| s / n);
        let std: Vec<f64> = (0..3).map(|c| (sq[c] / n - mean[c] * mean[c]).max(1e-6).sqrt()).collect();
        *self.buffers.get_mut(NORM_MEAN)? = Tensor::from_vec(mean.to_vec());
        *self.buffers.get_mut(NORM_STD)? = Tensor::from_vec(std);
        Ok(())
    }

    pub fn input_tensor(&self, image: &RgbImage) -> Result<Tensor> {
        let n = self.spec.encoder.input_size;
        if image.height() != n || image.width() != n {
            return Err(Error::SizeMismatch(format!(
                "image is {}x{} but the model expects {n}x{n}",
                image.height(),
                image.width()
            )));
        }
        let (mean, std) = self.normalization()?;
        Ok(image.to_chw(mean, std))
    }

    /// Stacks images into `[b, 3, n, n]`.
    pub fn input_batch(&self, images: &[&RgbImage]) -> Result<Tensor> {
        let n = self.spec.encoder.input_size;
        let mut data = Vec::with_capacity(images.len() * 3 * n * n);
        for img in images {
            data.extend_from_slice(self.input_tensor(img)?.data());
        }
        Tensor::new(vec![images.len(), 3, n, n], data)
    }

    pub fn grid(&self, image: &RgbImage) -> Result<LatentGrid> {
        self.spec.extractor().encode(&self.params, &self.buffers, &self.input_tensor(image)?)
    }

    fn region(&self) -> Result<&RegionConfig> {
        self.spec
            .region
            .as_ref()
            .ok_or_else(|| Error::Config("model has no region config".into()))
    }

    pub fn superpixels(&self, image: &RgbImage) -> Result<SuperpixelMap> {
        let r = self.region()?;
        let m = r.proposals.min(image.height() * image.width());
        regions::slic(image, m, r.compactness, r.slic_iters)
    }

    /// SLIC proposals, labeled from `mask` when given.
    pub fn proposals(&self, image: &RgbImage, mask: Option<&LabelMap>) -> Result<(SuperpixelMap, Vec<RegionProposal>)> {
        let sp = self.superpixels(image)?;
        let props = regions::proposals_from_superpixels(&sp, mask, self.spec.encoder.scale())?;
        Ok((sp, props))
    }

    /// Proposal embeddings `[r, ℓ′]` for one image's grid.
    pub fn proposal_embeddings(&self, grid: &LatentGrid, proposals: &[RegionProposal]) -> Result<Tensor> {
        let r = self.region()?;
        let sec = self.spec.secondary().expect("region config present");
        let mut g = Graph::new();
        let vars = Bound::frozen(&mut g, &self.params)?;
        let mut ctx = Ctx::new(&mut g, &vars, &self.buffers);
        let chw = grid.to_chw();
        let shape = chw.shape().to_vec();
        let x = ctx.g.constant(chw.reshape(&[1, shape[0], shape[1], shape[2]])?)?;
        let rois: Vec<_> = proposals.iter().map(|p| (0, p.latent_box)).collect();
        let patches = ctx.g.roi_align(x, &rois, r.align_size, r.align_samples)?;
        let z = sec.forward(&mut ctx, patches)?;
        Ok(g.value(z).clone())
    }

    /// Embeddings used by the prototype layer: grid cells in scan order for
    /// ProtoSegNet, one row per proposal for ProtoBBNet.
    pub fn embeddings(&self, image: &RgbImage) -> Result<Embedded> {
        let grid = self.grid(image)?;
        match self.spec.kind {
            ModelKind::Protoseg => {
                let (h, w, l) = (grid.height(), grid.width(), grid.channels());
                Ok(Embedded {
                    rows: grid.values.clone().reshape(&[h * w, l])?,
                    grid,
                    superpixels: None,
                    proposals: Vec::new(),
                })
            }
            ModelKind::Protobb => {
                let (sp, props) = self.proposals(image, None)?;
                Ok(Embedded {
                    rows: self.proposal_embeddings(&grid, &props)?,
                    grid,
                    superpixels: Some(sp),
                    proposals: props,
                })
            }
        }
    }
}

/// Latent vectors of one image together with what they came from.
#[derive(Clone, Debug)]
pub struct Embedded {
    pub rows: Tensor,
    pub grid: LatentGrid,
    pub superpixels: Option<SuperpixelMap>,
    pub proposals: Vec<RegionProposal>,
}

/// Ground-truth class of each `p x p` cell: strict majority, else background.
pub fn cell_labels(mask: &LabelMap, scale: usize) -> Result<Vec<usize>> {
    let (h, w) = (mask.height(), mask.width());
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(Error::SizeNotDivisible { size: h.max(w), scale });
    }
    let (gh, gw) = (h / scale, w / scale);
    let mut out = Vec::with_capacity(gh * gw);
    for i in 0..gh {
        for j in 0..gw {
            let vals = (0..scale * scale).map(|t| mask.get(i * scale + t / scale, j * scale + t % scale));
            out.push(regions::majority_label(vals, scale * scale));
        }
    }
    Ok(out)
}

/// Paints each grid cell's class over its `p x p` patch.
pub fn paint_cells(classes: &[usize], grid_h: usize, grid_w: usize, scale: usize) -> Result<LabelMap> {
    if classes.len() != grid_h * grid_w {
        return Err(Error::SizeMismatch(format!("{} cell classes for a {grid_h}x{grid_w} grid", classes.len())));
    }
    let (h, w) = (grid_h * scale, grid_w * scale);
    let data = (0..h * w)
        .map(|p| classes[(p / w / scale) * grid_w + (p % w) / scale])
        .collect();
    LabelMap::new(h, w, data)
}

/// Paints each superpixel with its proposal's class.
pub fn paint_superpixels(sp: &SuperpixelMap, proposals: &[RegionProposal], classes: &[usize]) -> Result<LabelMap> {
    if proposals.len() != classes.len() {
        return Err(Error::SizeMismatch(format!("{} classes for {} proposals", classes.len(), proposals.len())));
    }
    let mut out = LabelMap::filled(sp.height(), sp.width(), 0);
    for (p, &c) in proposals.iter().zip(classes) {
        for &px in &p.pixels {
            out.data_mut()[px] = c;
        }
    }
    Ok(out)
}

pub fn segment_protoseg(model: &Model, image: &RgbImage) -> Result<LabelMap> {
    let grid = model.grid(image)?;
    let (h, w, l) = (grid.height(), grid.width(), grid.channels());
    let rows = grid.values.reshape(&[h * w, l])?;
    let classes = gpl::classify_rows(&model.head()?, &model.gpl()?, &rows)?;
    paint_cells(&classes, h, w, model.spec.encoder.scale())
}

pub fn segment_protobb(model: &Model, image: &RgbImage) -> Result<LabelMap> {
    let e = model.embeddings(image)?;
    let classes = gpl::classify_rows(&model.head()?, &model.gpl()?, &e.rows)?;
    paint_superpixels(e.superpixels.as_ref().expect("protobb embedding"), &e.proposals, &classes)
}

pub fn segment(model: &Model, image: &RgbImage) -> Result<LabelMap> {
    match model.spec.kind {
        ModelKind::Protoseg => segment_protoseg(model, image),
        ModelKind::Protobb => segment_protobb(model, image),
    }
}

/// Tile origins covering `len` with windows of `n`; the last window is
/// pulled back to end at `len`.
fn tile_starts(len: usize, n: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..len.saturating_sub(n) + 1).step_by(n).collect();
    if v.last().is_none_or(|&s| s + n < len) {
        v.push(len - n);
    }
    v
}

/// Segments images at least as large as the model input by tiling windows
/// of the model's size; overlapping windows keep the later tile's labels.
pub fn segment_tiled(model: &Model, image: &RgbImage) -> Result<LabelMap> {
    let n = model.spec.encoder.input_size;
    let (h, w) = (image.height(), image.width());
    if h == n && w == n {
        return segment(model, image);
    }
    if h < n || w < n {
        return Err(Error::SizeMismatch(format!(
            "image is {h}x{w}, smaller than the model input {n}x{n}"
        )));
    }
    let mut out = LabelMap::filled(h, w, 0);
    for r0 in tile_starts(h, n) {
        for c0 in tile_starts(w, n) {
            let tile = segment(model, &image.crop(r0, c0, r0 + n, c0 + n)?)?;
            for r in 0..n {
                for c in 0..n {
                    out.set(r0 + r, c0 + c, tile.get(r, c));
                }
            }
        }
    }
    Ok(out)
}

pub fn segment_all(model: &Model, images: &[&RgbImage]) -> Result<Vec<LabelMap>> {
    crate::par::map_slice(images, |img| segment(model, img)).into_iter().collect()
}

/// Raw grid rows of a batch, `[b * h′ * w′, ℓ]`, in image-major scan order.
pub fn grid_rows(model: &Model, images: &[&RgbImage]) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = Bound::frozen(&mut g, &model.params)?;
    let mut ctx = Ctx::new(&mut g, &vars, &model.buffers);
    let x = ctx.g.constant(model.input_batch(images)?)?;
    let out = model.spec.extractor().forward(&mut ctx, x)?;
    nchw_to_rows(g.value(out))
}
