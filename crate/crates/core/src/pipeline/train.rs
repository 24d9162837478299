//! The four training stages.
//!
//! 1. autoencoder pretraining of the reducer (and, for ProtoBBNet, the
//!    secondary encoder);
//! 2. prototype fitting by `L_GMM`;
//! 3. head training by `L_clf + λ·L1`;
//! 4. joint training of encoder, prototypes and head on the full loss.
//!
//! Batch norm runs on calibrated running statistics everywhere except
//! while the secondary encoder is pretrained, so stages 3 and 4 measure the
//! same objective on the same data.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{cell_labels, Model, ModelKind, ModelSpec, GPL_CHOL, GPL_LOGITS, GPL_MEANS, HEAD_RAW};
use crate::data::Sample;
use crate::encoders::{autoencoder_graph, update_running_stats, Conv, Ctx};
use crate::error::{Error, Result};
use crate::gpl::{self, GplVars};
use crate::numerics::nn::BatchStats;
use crate::numerics::{Graph, Optimizer, Tensor, Var};
use crate::params::{Bound, ParamStore};
use crate::regions::RegionProposal;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    /// Stage 1 epochs (per autoencoder).
    pub autoencoder_epochs: usize,
    /// Stage 2 epochs.
    pub gmm_epochs: usize,
    /// Stage 3 epochs.
    pub head_epochs: usize,
    /// Stage 4 epoch cap.
    pub joint_epochs: usize,
    pub lr: f64,
    pub joint_lr: f64,
    pub batch_images: usize,
    pub batch_rows: usize,
    /// Proposals sampled per image in ProtoBBNet batches.
    pub train_proposals: usize,
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            autoencoder_epochs: 50,
            gmm_epochs: 100,
            head_epochs: 50,
            joint_epochs: 200,
            lr: 1e-3,
            joint_lr: 1e-4,
            batch_images: 8,
            batch_rows: 1024,
            train_proposals: 64,
            patience: 10,
            min_delta: 1e-4,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_images == 0 || self.batch_rows == 0 || self.train_proposals == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.lr > 0.0 && self.joint_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// One logged epoch. Stage 1 reports the reconstruction error as `total`
/// and leaves the prototype terms empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub stage: u8,
    pub epoch: usize,
    pub gmm: Option<f64>,
    pub clf: Option<f64>,
    pub l1: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<LossRecord>,
    pub epochs_run: [usize; 4],
}

impl TrainReport {
    pub fn last_total(&self, stage: u8) -> Option<f64> {
        self.history.iter().rev().find(|r| r.stage == stage).map(|r| r.total)
    }
}

struct EarlyStop {
    best: f64,
    since: usize,
    patience: usize,
    min_delta: f64,
}

impl EarlyStop {
    fn new(s: &Schedule) -> Self {
        EarlyStop {
            best: f64::INFINITY,
            since: 0,
            patience: s.patience,
            min_delta: s.min_delta,
        }
    }

    /// Returns true once `patience` epochs pass without an improvement of
    /// at least `min_delta`.
    fn update(&mut self, v: f64) -> bool {
        if v < self.best - self.min_delta {
            self.best = v;
            self.since = 0;
        } else {
            self.since += 1;
        }
        self.patience > 0 && self.since >= self.patience
    }
}

#[derive(Clone, Copy)]
struct Terms {
    gmm: Var,
    clf: Var,
    l1: Var,
}

/// Running means of the loss terms over an epoch.
#[derive(Default)]
struct Tally {
    gmm: f64,
    clf: f64,
    l1: f64,
    weight: f64,
}

impl Tally {
    fn add(&mut self, g: &Graph, t: Terms, w: f64) -> Result<()> {
        self.gmm += w * g.value(t.gmm).item()?;
        self.clf += w * g.value(t.clf).item()?;
        self.l1 += w * g.value(t.l1).item()?;
        self.weight += w;
        Ok(())
    }

    fn record(&self, stage: u8, epoch: usize, lw: &super::LossWeights) -> LossRecord {
        let (gmm, clf, l1) = (self.gmm / self.weight, self.clf / self.weight, self.l1 / self.weight);
        LossRecord {
            stage,
            epoch,
            gmm: Some(gmm),
            clf: Some(clf),
            l1: Some(l1),
            total: lw.gmm * gmm + lw.clf * clf + lw.l1 * l1,
        }
    }
}

fn gpl_vars(b: &Bound) -> GplVars {
    GplVars {
        logits: b.var(GPL_LOGITS),
        means: b.var(GPL_MEANS),
        chol_raw: b.var(GPL_CHOL),
    }
}

/// Records the three loss terms for rows `z` with labels.
fn terms(g: &mut Graph, b: &Bound, z: Var, labels: &[usize], class_of: &[usize]) -> Result<Terms> {
    let fwd = gpl::forward(g, &gpl_vars(b), z)?;
    let gmm = gpl::nll_graph(g, &fwd)?;
    let scores = gpl::scores_graph(g, b.var(HEAD_RAW), fwd.log_resp)?;
    let clf = g.cross_entropy(scores, labels)?;
    let l1 = gpl::l1_graph(g, b.var(HEAD_RAW), class_of)?;
    Ok(Terms { gmm, clf, l1 })
}

fn weighted(g: &mut Graph, parts: &[(Var, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(v, w) in parts {
        if w == 0.0 {
            continue;
        }
        let s = g.scale(v, w)?;
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => g.scale(parts[0].0, 0.0),
    }
}

fn apply(params: &mut ParamStore, opt: &mut Optimizer, grads: Vec<(String, Tensor)>) -> Result<()> {
    for (name, grad) in grads {
        opt.step(&name, params.get_mut(&name)?, &grad)?;
    }
    Ok(())
}

fn non_finite(stage: u8, epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NotFinite { op } => Error::NonFiniteLoss {
            stage,
            epoch,
            detail: format!("non-finite value produced by {op}"),
        },
        other => other,
    }
}

fn average_stats(batches: &[Vec<(String, BatchStats)>]) -> Vec<(String, BatchStats)> {
    let Some(first) = batches.first() else {
        return Vec::new();
    };
    let n = batches.len() as f64;
    first
        .iter()
        .enumerate()
        .map(|(i, (name, s))| {
            let mut mean = vec![0.0; s.mean.len()];
            let mut var = vec![0.0; s.var.len()];
            for b in batches {
                for (m, x) in mean.iter_mut().zip(&b[i].1.mean) {
                    *m += x / n;
                }
                for (v, x) in var.iter_mut().zip(&b[i].1.var) {
                    *v += x / n;
                }
            }
            (name.clone(), BatchStats { mean, var })
        })
        .collect()
}

fn stack(parts: &[&Tensor]) -> Result<Tensor> {
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(parts[0].shape());
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(shape, data)
}

fn split_batch(t: &Tensor) -> Result<Vec<Tensor>> {
    let b = t.shape()[0];
    let inner = t.shape()[1..].to_vec();
    let len = t.len() / b;
    t.data()
        .chunks(len)
        .map(|c| Tensor::new(inner.clone(), c.to_vec()))
        .collect()
}

fn is_joint(name: &str) -> bool {
    ["enc.", "reducer.", "sec.", "gpl.", "head."].iter().any(|p| name.starts_with(p))
}

/// Owns the model and all state of one training run.
pub struct Trainer<'a> {
    model: Model,
    data: &'a [Sample],
    schedule: Schedule,
    rng: ChaCha8Rng,
    report: TrainReport,
    next_stage: u8,
    /// Per image: cell labels (grid) or proposal labels (regions).
    labels: Vec<Vec<usize>>,
    proposals: Vec<Vec<RegionProposal>>,
    features: Vec<Tensor>,
    grids: Vec<Tensor>,
    rows: Option<(Tensor, Vec<usize>)>,
}

impl<'a> Trainer<'a> {
    pub fn new(spec: ModelSpec, data: &'a [Sample], schedule: Schedule, seed: u64) -> Result<Self> {
        spec.validate()?;
        schedule.validate()?;
        if data.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut seen = vec![false; spec.classes];
        for s in data {
            for &l in s.mask.data() {
                if l >= spec.classes {
                    return Err(Error::LabelOutOfRange {
                        label: l,
                        classes: spec.classes,
                    });
                }
                seen[l] = true;
            }
        }
        if let Some(c) = seen.iter().position(|&s| !s) {
            return Err(Error::MissingClass(c));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Model::new(spec, &mut rng)?;
        let images: Vec<_> = data.iter().map(|s| &s.image).collect();
        model.fit_normalization(&images)?;

        let mut t = Trainer {
            model,
            data,
            schedule,
            rng,
            report: TrainReport::default(),
            next_stage: 1,
            labels: Vec::new(),
            proposals: Vec::new(),
            features: Vec::new(),
            grids: Vec::new(),
            rows: None,
        };
        t.calibrate_backbone()?;
        let scale = t.model.spec.encoder.scale();
        match t.model.spec.kind {
            ModelKind::Protoseg => {
                t.labels = data.iter().map(|s| cell_labels(&s.mask, scale)).collect::<Result<_>>()?;
            }
            ModelKind::Protobb => {
                let model = &t.model;
                let props: Vec<Result<Vec<RegionProposal>>> =
                    crate::par::map_slice(data, |s| Ok(model.proposals(&s.image, Some(&s.mask))?.1));
                t.proposals = props.into_iter().collect::<Result<_>>()?;
                t.labels = t.proposals.iter().map(|ps| ps.iter().map(|p| p.label).collect()).collect();
            }
        }
        let mut seen = vec![false; t.model.spec.classes];
        for l in t.labels.iter().flatten() {
            seen[*l] = true;
        }
        if let Some(c) = seen.iter().position(|&s| !s) {
            return Err(Error::MissingClass(c));
        }
        Ok(t)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn report(&self) -> &TrainReport {
        &self.report
    }

    pub fn next_stage(&self) -> u8 {
        self.next_stage
    }

    pub fn finish(self) -> (Model, TrainReport) {
        (self.model, self.report)
    }

    pub fn run_all(&mut self) -> Result<()> {
        while self.next_stage <= 4 {
            self.run_stage(self.next_stage)?;
        }
        Ok(())
    }

    /// Runs `stage`, which must be the next one in order.
    pub fn run_stage(&mut self, stage: u8) -> Result<()> {
        if stage != self.next_stage {
            return Err(Error::Config(format!(
                "stage {stage} requested but stage {} is next",
                self.next_stage
            )));
        }
        match stage {
            1 => self.stage_autoencoder()?,
            2 => self.stage_gmm()?,
            3 => self.stage_head()?,
            4 => self.stage_joint()?,
            _ => unreachable!(),
        }
        self.next_stage += 1;
        Ok(())
    }

    fn image_batches(&mut self, shuffle: bool) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.data.len()).collect();
        if shuffle {
            idx.shuffle(&mut self.rng);
        }
        idx.chunks(self.schedule.batch_images).map(<[usize]>::to_vec).collect()
    }

    fn calibrate_backbone(&mut self) -> Result<()> {
        let ext = self.model.spec.extractor();
        let mut collected = Vec::new();
        for batch in self.image_batches(false) {
            let imgs: Vec<_> = batch.iter().map(|&i| &self.data[i].image).collect();
            let mut g = Graph::new();
            let vars = Bound::frozen(&mut g, &self.model.params)?;
            let mut ctx = Ctx::new(&mut g, &vars, &self.model.buffers);
            ctx.bn_train = true;
            let x = ctx.g.constant(self.model.input_batch(&imgs)?)?;
            ext.backbone(&mut ctx, x)?;
            collected.push(std::mem::take(&mut ctx.stats));
        }
        update_running_stats(&mut self.model.buffers, &average_stats(&collected), 1.0)
    }

    fn push(&mut self, rec: LossRecord) {
        self.report.epochs_run[rec.stage as usize - 1] += 1;
        self.report.history.push(rec);
    }

    fn stage_autoencoder(&mut self) -> Result<()> {
        let ext = self.model.spec.extractor();
        let mut features = Vec::with_capacity(self.data.len());
        for batch in self.image_batches(false) {
            let imgs: Vec<_> = batch.iter().map(|&i| &self.data[i].image).collect();
            let mut g = Graph::new();
            let vars = Bound::frozen(&mut g, &self.model.params)?;
            let mut ctx = Ctx::new(&mut g, &vars, &self.model.buffers);
            let x = ctx.g.constant(self.model.input_batch(&imgs)?)?;
            let f = ext.backbone(&mut ctx, x)?;
            features.extend(split_batch(g.value(f))?);
        }
        self.features = features;

        let reducer = ext.reducer.clone().expect("extractor has a reducer");
        let decoder = ext.decoder();
        let mut opt = Optimizer::adam(self.schedule.lr);
        let mut stop = EarlyStop::new(&self.schedule);
        let mut epoch = 0;
        for _ in 0..self.schedule.autoencoder_epochs {
            let (mut sum, mut count) = (0.0, 0.0);
            for batch in self.image_batches(true) {
                let parts: Vec<&Tensor> = batch.iter().map(|&i| &self.features[i]).collect();
                let x = stack(&parts)?;
                let mut g = Graph::new();
                let vars = Bound::bind(&mut g, &self.model.params, |n| n.starts_with("reducer.") || n.starts_with("decoder."))?;
                let mut ctx = Ctx::new(&mut g, &vars, &self.model.buffers);
                let xv = ctx.g.constant(x)?;
                let (_, _, mse) = autoencoder_graph(&mut ctx, &reducer, &decoder, xv).map_err(non_finite(1, epoch))?;
                let mut grads = g.backward(mse)?;
                let named = vars.collect(&mut grads);
                apply(&mut self.model.params, &mut opt, named)?;
                sum += g.value(mse).item()? * batch.len() as f64;
                count += batch.len() as f64;
            }
            let total = sum / count;
            self.push(LossRecord {
                stage: 1,
                epoch,
                gmm: None,
                clf: None,
                l1: None,
                total,
            });
            epoch += 1;
            if stop.update(total) {
                break;
            }
        }
        if self.model.spec.kind == ModelKind::Protobb {
            self.pretrain_secondary(&reducer, epoch)?;
        }
        Ok(())
    }

    fn reduced_grids(&self, reducer: &Conv) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.features.len());
        for chunk in self.features.chunks(self.schedule.batch_images) {
            let parts: Vec<&Tensor> = chunk.iter().collect();
            let mut g = Graph::new();
            let vars = Bound::frozen(&mut g, &self.model.params)?;
            let mut ctx = Ctx::new(&mut g, &vars, &self.model.buffers);
            let x = ctx.g.constant(stack(&parts)?)?;
            let r = reducer.forward(&mut ctx, x)?;
            out.extend(split_batch(g.value(r))?);
        }
        Ok(out)
    }

    /// Boxes for a batch, at most `limit` sampled proposals per image.
    fn sample_rois(&mut self, batch: &[usize], limit: Option<usize>) -> (Vec<(usize, [f64; 4])>, Vec<usize>) {
        let mut rois = Vec::new();
        let mut labels = Vec::new();
        for (bi, &i) in batch.iter().enumerate() {
            let n = self.proposals[i].len();
            let mut pick: Vec<usize> = (0..n).collect();
            if let Some(l) = limit {
                if n > l {
                    pick.shuffle(&mut self.rng);
                    pick.truncate(l);
                    pick.sort_unstable();
                }
            }
            for j in pick {
                rois.push((bi, self.proposals[i][j].latent_box));
                labels.push(self.labels[i][j]);
            }
        }
        (rois, labels)
    }

    fn pretrain_secondary(&mut self, reducer: &Conv, mut epoch: usize) -> Result<()> {
        let region = self.model.spec.region.clone().expect("protobb region config");
        let sec = self.model.spec.secondary().expect("protobb secondary encoder");
        self.grids = self.reduced_grids(reducer)?;
        let mut opt = Optimizer::adam(self.schedule.lr);
        let mut stop = EarlyStop::new(&self.schedule);
        let limit = Some(self.schedule.train_proposals);
        for _ in 0..self.schedule.autoencoder_epochs {
            let (mut sum, mut count) = (0.0, 0.0);
            for batch in self.image_batches(true) {
                let (rois, _) = self.sample_rois(&batch, limit);
                let parts: Vec<&Tensor> = batch.iter().map(|&i| &self.grids[i]).collect();
                let x = stack(&parts)?;
                let mut g = Graph::new();
                let vars = Bound::bind(&mut g, &self.model.params, |n| n.starts_with("sec.") || n.starts_with("secdec."))?;
                let mut ctx = Ctx::new(&mut g, &vars, &self.model.buffers);
                ctx.bn_train = true;
                let xv = ctx.g.constant(x)?;
                let patches = ctx.g.roi_align(xv, &rois, region.align_size, region.align_samples)?;
                let z = sec.forward(&mut ctx, patches).map_err(non_finite(1, epoch))?;
                let loss = sec.reconstruction_loss(&mut ctx, z, patches).map_err(non_finite(1, epoch))?;
                let stats = std::mem::take(&mut ctx.stats);
                let mut grads = g.backward(loss)?;
                let named = vars.collect(&mut grads);
                apply(&mut self.model.params, &mut opt, named)?;
                update_running_stats(&mut self.model.buffers, &stats, 0.1)?;
                sum += g.value(loss).item()? * rois.len() as f64;
                count += rois.len() as f64;
            }
            let total = sum / count;
            self.push(LossRecord {
                stage: 1,
                epoch,
                gmm: None,
                clf: None,
                l1: None,
                total,
            });
            epoch += 1;
            if stop.update(total) {
                break;
            }
        }

        // Calibrate the secondary batch norm on every proposal.
        let mut collected = Vec::new();
        for batch in self.image_batches(false) {
            let (rois, _) = self.sample_rois(&batch, None);
            let parts: Vec<&Tensor> = batch.iter().map(|&i| &self.grids[i]).collect();
            let mut g = Graph::new();
            let vars = Bound::frozen(&mut g, &self.model.params)?;
            let mut ctx = Ctx::new(&mut g, &vars, &self.model.buffers);
            ctx.bn_train = true;
            let xv = ctx.g.constant(stack(&parts)?)?;
            let patches = ctx.g.roi_align(xv, &rois, region.align_size, region.align_samples)?;
            sec.forward(&mut ctx, patches)?;
            collected.push(std::mem::take(&mut ctx.stats));
        }
        update_running_stats(&mut self.model.buffers, &average_stats(&collected), 1.0)
    }

    /// Embeddings of the whole training set under the current model.
    fn embed_all(&mut self) -> Result<(Tensor, Vec<usize>)> {
        let dim = self.model.spec.embedding_dim();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for batch in self.image_batches(false) {
            let rows = match self.model.spec.kind {
                ModelKind::Protoseg => {
                    let imgs: Vec<_> = batch.iter().map(|&i| &self.data[i].image).collect();
                    super::grid_rows(&self.model, &imgs)?
                }
                ModelKind::Protobb => {
                    let region = self.model.spec.region.clone().expect("region config");
                    let sec = self.model.spec.secondary().expect("secondary encoder");
                    let (rois, _) = self.sample_rois(&batch, None);
                    let parts: Vec<&Tensor> = batch.iter().map(|&i| &self.grids[i]).collect();
                    let mut g = Graph::new();
                    let vars = Bound::frozen(&mut g, &self.model.params)?;
                    let mut ctx = Ctx::new(&mut g, &vars, &self.model.buffers);
                    let xv = ctx.g.constant(stack(&parts)?)?;
                    let patches = ctx.g.roi_align(xv, &rois, region.align_size, region.align_samples)?;
                    let z = sec.forward(&mut ctx, patches)?;
                    g.value(z).clone()
                }
            };
            data.extend_from_slice(rows.data());
            for &i in &batch {
                labels.extend_from_slice(&self.labels[i]);
            }
        }
        let n = labels.len();
        Ok((Tensor::new(vec![n, dim], data)?, labels))
    }

    fn row_batches(&mut self, n: usize) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut self.rng);
        idx.chunks(self.schedule.batch_rows).map(<[usize]>::to_vec).collect()
    }

    /// Trains on cached embedding rows, updating only names accepted by
    /// `trainable` against the objective weighted by `(w_gmm, w_clf, w_l1)`.
    fn rows_stage(&mut self, stage: u8, epochs: usize, trainable: fn(&str) -> bool, w: (f64, f64, f64)) -> Result<()> {
        let (rows, labels) = self.rows.clone().expect("embeddings cached");
        let dim = rows.shape()[1];
        let class_of = self.model.spec.class_of();
        let lw = self.model.spec.loss;
        let mut opt = Optimizer::adam(self.schedule.lr);
        let mut stop = EarlyStop::new(&self.schedule);
        for epoch in 0..epochs {
            let mut tally = Tally::default();
            let mut objective = 0.0;
            for batch in self.row_batches(labels.len()) {
                let mut zb = Vec::with_capacity(batch.len() * dim);
                for &i in &batch {
                    zb.extend_from_slice(rows.row(i));
                }
                let yb: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
                let mut g = Graph::new();
                let vars = Bound::bind(&mut g, &self.model.params, trainable)?;
                let z = g.constant(Tensor::new(vec![batch.len(), dim], zb)?)?;
                let t = terms(&mut g, &vars, z, &yb, &class_of).map_err(non_finite(stage, epoch))?;
                let obj = weighted(&mut g, &[(t.gmm, w.0), (t.clf, w.1), (t.l1, w.2)])?;
                let mut grads = g.backward(obj)?;
                let named = vars.collect(&mut grads);
                apply(&mut self.model.params, &mut opt, named)?;
                tally.add(&g, t, batch.len() as f64)?;
                objective += g.value(obj).item()? * batch.len() as f64;
            }
            let rec = tally.record(stage, epoch, &lw);
            self.push(rec);
            if stop.update(objective / labels.len() as f64) {
                break;
            }
        }
        Ok(())
    }

    fn stage_gmm(&mut self) -> Result<()> {
        let (rows, labels) = self.embed_all()?;
        let class_of = self.model.spec.class_of();
        let init = gpl::init_from_data(&rows, &class_of, Some(&labels), &mut self.rng)?;
        self.model.set_gpl(&init)?;
        self.rows = Some((rows, labels));
        let w = self.model.spec.loss.gmm;
        self.rows_stage(2, self.schedule.gmm_epochs, |n| n.starts_with("gpl."), (w, 0.0, 0.0))
    }

    fn stage_head(&mut self) -> Result<()> {
        let lw = self.model.spec.loss;
        self.rows_stage(3, self.schedule.head_epochs, |n| n.starts_with("head."), (0.0, lw.clf, lw.l1))
    }

    fn stage_joint(&mut self) -> Result<()> {
        self.rows = None;
        self.features.clear();
        let class_of = self.model.spec.class_of();
        let lw = self.model.spec.loss;
        let ext = self.model.spec.extractor();
        let sec = self.model.spec.secondary();
        let region = self.model.spec.region.clone();
        let mut opt = Optimizer::adam(self.schedule.joint_lr);
        let mut stop = EarlyStop::new(&self.schedule);
        let limit = Some(self.schedule.train_proposals);
        for epoch in 0..self.schedule.joint_epochs {
            let mut tally = Tally::default();
            for batch in self.image_batches(true) {
                let imgs: Vec<_> = batch.iter().map(|&i| &self.data[i].image).collect();
                let input = self.model.input_batch(&imgs)?;
                let (rois, labels) = match self.model.spec.kind {
                    ModelKind::Protoseg => (Vec::new(), batch.iter().flat_map(|&i| self.labels[i].iter().copied()).collect()),
                    ModelKind::Protobb => self.sample_rois(&batch, limit),
                };
                let mut g = Graph::new();
                let vars = Bound::bind(&mut g, &self.model.params, is_joint)?;
                let mut ctx = Ctx::new(&mut g, &vars, &self.model.buffers);
                let x = ctx.g.constant(input)?;
                let grid = ext.forward(&mut ctx, x).map_err(non_finite(4, epoch))?;
                let z = match (&sec, &region) {
                    (Some(sec), Some(region)) => {
                        let patches = ctx.g.roi_align(grid, &rois, region.align_size, region.align_samples)?;
                        sec.forward(&mut ctx, patches).map_err(non_finite(4, epoch))?
                    }
                    _ => ctx.g.nchw_to_rows(grid)?,
                };
                let t = terms(&mut g, &vars, z, &labels, &class_of).map_err(non_finite(4, epoch))?;
                let obj = weighted(&mut g, &[(t.gmm, lw.gmm), (t.clf, lw.clf), (t.l1, lw.l1)])?;
                let mut grads = g.backward(obj)?;
                let named = vars.collect(&mut grads);
                apply(&mut self.model.params, &mut opt, named)?;
                tally.add(&g, t, labels.len() as f64)?;
            }
            let rec = tally.record(4, epoch, &lw);
            let total = rec.total;
            self.push(rec);
            if stop.update(total) {
                break;
            }
        }
        Ok(())
    }
}

/// Runs all four stages.
pub fn train(spec: ModelSpec, data: &[Sample], schedule: Schedule, seed: u64) -> Result<(Model, TrainReport)> {
    let mut t = Trainer::new(spec, data, schedule, seed)?;
    t.run_all()?;
    Ok(t.finish())
}
