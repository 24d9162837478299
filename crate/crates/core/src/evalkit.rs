//! Segmentation metrics and the HSV superpixel GMM baseline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gpl::{self, GplParams, GplVars};
use crate::imaging::{rgb_to_hsv, LabelMap, RgbImage};
use crate::numerics::special::lse;
use crate::numerics::{Graph, Optimizer, Tensor};
use crate::par;
use crate::regions::{slic, SuperpixelMap};

/// Confusion counts, indexed `[truth][prediction]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion {
            classes,
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn add(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        truth.same_size(pred.height(), pred.width())?;
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            for l in [p, t] {
                if l >= self.classes {
                    return Err(Error::LabelOutOfRange {
                        label: l,
                        classes: self.classes,
                    });
                }
            }
            self.counts[t][p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// `TP / (TP + FP + FN)`; 1 when the class is absent from both maps.
    pub fn iou(&self, c: usize) -> f64 {
        let tp = self.counts[c][c];
        let fn_: u64 = self.counts[c].iter().sum::<u64>() - tp;
        let fp: u64 = self.counts.iter().map(|row| row[c]).sum::<u64>() - tp;
        let denom = tp + fp + fn_;
        if denom == 0 {
            1.0
        } else {
            tp as f64 / denom as f64
        }
    }

    /// Recall of class `c`; 1 when the class never occurs in the truth.
    pub fn recall(&self, c: usize) -> f64 {
        let row: u64 = self.counts[c].iter().sum();
        if row == 0 {
            1.0
        } else {
            self.counts[c][c] as f64 / row as f64
        }
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let correct: u64 = (0..self.classes).map(|c| self.counts[c][c]).sum();
        match self.total() {
            0 => 1.0,
            t => correct as f64 / t as f64,
        }
    }

    pub fn scores(&self) -> Scores {
        let ious: Vec<f64> = (0..self.classes).map(|c| self.iou(c)).collect();
        let fg: Vec<usize> = (1..self.classes).collect();
        let mean_fg = |f: &dyn Fn(usize) -> f64| {
            if fg.is_empty() {
                1.0
            } else {
                fg.iter().map(|&c| f(c)).sum::<f64>() / fg.len() as f64
            }
        };
        Scores {
            mean_iou: ious.iter().sum::<f64>() / ious.len() as f64,
            class_iou: mean_fg(&|c| ious[c]),
            pixel_accuracy: self.pixel_accuracy(),
            class_accuracy: mean_fg(&|c| self.recall(c)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    #[serde(rename = "Mean IoU")]
    pub mean_iou: f64,
    /// Foreground IoU (averaged over foreground classes when there are several).
    #[serde(rename = "Class IoU")]
    pub class_iou: f64,
    #[serde(rename = "Pixel Accuracy")]
    pub pixel_accuracy: f64,
    /// Foreground recall.
    #[serde(rename = "Class Accuracy")]
    pub class_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub image: usize,
    #[serde(flatten)]
    pub scores: Scores,
}

/// Dataset-level scores from one pooled confusion matrix, plus a
/// per-image breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    #[serde(flatten)]
    pub scores: Scores,
    pub per_class_iou: Vec<f64>,
    pub confusion: Confusion,
    pub per_image: Vec<ImageScores>,
}

pub fn evaluate(predictions: &[LabelMap], truth: &[LabelMap], classes: usize) -> Result<MetricTable> {
    if predictions.len() != truth.len() {
        return Err(Error::SizeMismatch(format!(
            "{} predictions for {} ground-truth maps",
            predictions.len(),
            truth.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let per: Vec<Result<Confusion>> = par::map_range(predictions.len(), |i| {
        let mut c = Confusion::new(classes);
        c.add(&predictions[i], &truth[i])?;
        Ok(c)
    });
    let mut total = Confusion::new(classes);
    let mut per_image = Vec::with_capacity(per.len());
    for (i, c) in per.into_iter().enumerate() {
        let c = c?;
        per_image.push(ImageScores {
            image: i,
            scores: c.scores(),
        });
        total.merge(&c);
    }
    Ok(MetricTable {
        scores: total.scores(),
        per_class_iou: (0..classes).map(|c| total.iou(c)).collect(),
        confusion: total,
        per_image,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub superpixels: usize,
    pub compactness: f64,
    pub slic_iters: usize,
    pub components_per_class: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            superpixels: 200,
            compactness: 10.0,
            slic_iters: 10,
            components_per_class: 3,
            epochs: 200,
            lr: 1e-2,
        }
    }
}

/// Mean color of a region as `(cos 2πh, sin 2πh, s, v)`.
pub fn hsv_feature(pixels: impl Iterator<Item = [f64; 3]>) -> [f64; 4] {
    let mut acc = [0.0; 4];
    let mut n: f64 = 0.0;
    for rgb in pixels {
        let [h, s, v] = rgb_to_hsv(rgb);
        let a = std::f64::consts::TAU * h;
        acc[0] += a.cos();
        acc[1] += a.sin();
        acc[2] += s;
        acc[3] += v;
        n += 1.0;
    }
    acc.map(|x| x / n.max(1.0))
}

/// Superpixel features of one image, one row per segment.
pub fn superpixel_features(image: &RgbImage, sp: &SuperpixelMap) -> Vec<[f64; 4]> {
    let mut groups: Vec<Vec<[f64; 3]>> = vec![Vec::new(); sp.count];
    for (p, &l) in sp.labels.data().iter().enumerate() {
        groups[l].push(image.pixel(p / image.width(), p % image.width()));
    }
    groups.into_iter().map(|g| hsv_feature(g.into_iter())).collect()
}

/// One GMM per class over superpixel color features.
#[derive(Clone, Debug, PartialEq)]
pub struct HsvBaseline {
    pub config: BaselineConfig,
    pub class_models: Vec<GplParams>,
    pub log_priors: Vec<f64>,
}

/// Gradient-trained GMM over `rows` (full batch, Adam).
pub fn fit_gmm<R: Rng + ?Sized>(rows: &Tensor, components: usize, class: usize, epochs: usize, lr: f64, rng: &mut R) -> Result<GplParams> {
    let n = rows.shape()[0];
    let k = components.min(n).max(1);
    let mut p = gpl::init_from_data(rows, &vec![class; k], None, rng)?;
    let mut opt = Optimizer::adam(lr);
    for _ in 0..epochs {
        let mut g = Graph::new();
        let vars = GplVars {
            logits: g.leaf(p.logits.clone())?,
            means: g.leaf(p.means.clone())?,
            chol_raw: g.leaf(p.chol_raw.clone())?,
        };
        let z = g.constant(rows.clone())?;
        let fwd = gpl::forward(&mut g, &vars, z)?;
        let loss = gpl::nll_graph(&mut g, &fwd)?;
        let mut grads = g.backward(loss)?;
        opt.step("logits", &mut p.logits, &grads.take(vars.logits))?;
        opt.step("means", &mut p.means, &grads.take(vars.means))?;
        opt.step("chol_raw", &mut p.chol_raw, &grads.take(vars.chol_raw))?;
    }
    Ok(p)
}

impl HsvBaseline {
    pub fn superpixels(&self, image: &RgbImage) -> Result<SuperpixelMap> {
        let m = self.config.superpixels.min(image.height() * image.width());
        slic(image, m, self.config.compactness, self.config.slic_iters)
    }

    /// Fits per-class mixtures on superpixels labeled by strict majority.
    pub fn fit<R: Rng + ?Sized>(images: &[RgbImage], masks: &[LabelMap], classes: usize, config: BaselineConfig, rng: &mut R) -> Result<Self> {
        if images.len() != masks.len() || images.is_empty() {
            return Err(Error::SizeMismatch(format!("{} images, {} masks", images.len(), masks.len())));
        }
        let stub = HsvBaseline {
            config: config.clone(),
            class_models: Vec::new(),
            log_priors: Vec::new(),
        };
        let per_image: Vec<Result<Vec<([f64; 4], usize)>>> = par::map_range(images.len(), |i| {
            let sp = stub.superpixels(&images[i])?;
            masks[i].same_size(images[i].height(), images[i].width())?;
            let feats = superpixel_features(&images[i], &sp);
            let mut members: Vec<Vec<usize>> = vec![Vec::new(); sp.count];
            for (p, &l) in sp.labels.data().iter().enumerate() {
                members[l].push(masks[i].data()[p]);
            }
            Ok(feats
                .into_iter()
                .zip(members)
                .map(|(f, m)| (f, crate::regions::majority_label(m.iter().copied(), m.len())))
                .collect())
        });
        let mut by_class: Vec<Vec<f64>> = vec![Vec::new(); classes];
        for r in per_image {
            for (f, label) in r? {
                if label >= classes {
                    return Err(Error::LabelOutOfRange { label, classes });
                }
                by_class[label].extend_from_slice(&f);
            }
        }
        let total: usize = by_class.iter().map(|v| v.len() / 4).sum();
        let mut class_models = Vec::with_capacity(classes);
        let mut log_priors = Vec::with_capacity(classes);
        for (c, rows) in by_class.into_iter().enumerate() {
            let n = rows.len() / 4;
            if n == 0 {
                return Err(Error::MissingClass(c));
            }
            let t = Tensor::new(vec![n, 4], rows)?;
            class_models.push(fit_gmm(&t, config.components_per_class, c, config.epochs, config.lr, rng)?);
            log_priors.push((n as f64 / total as f64).ln());
        }
        Ok(HsvBaseline {
            config,
            class_models,
            log_priors,
        })
    }

    /// `log π_c + log p(x | c)` for each class.
    pub fn class_log_densities(&self, feature: &[f64; 4]) -> Result<Vec<f64>> {
        let z = Tensor::new(vec![1, 4], feature.to_vec())?;
        self.class_models
            .iter()
            .zip(&self.log_priors)
            .map(|(m, lp)| Ok(lp + lse(m.log_joint(&z)?.data())))
            .collect()
    }

    pub fn predict(&self, image: &RgbImage) -> Result<LabelMap> {
        let sp = self.superpixels(image)?;
        let feats = superpixel_features(image, &sp);
        let mut seg_class = Vec::with_capacity(feats.len());
        for f in &feats {
            seg_class.push(gpl::argmax_first(&self.class_log_densities(f)?));
        }
        let data = sp.labels.data().iter().map(|&l| seg_class[l]).collect();
        LabelMap::new(image.height(), image.width(), data)
    }
}
