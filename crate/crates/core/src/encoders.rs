//! Convolutional feature extractors.
//!
//! The primary encoder stacks residual blocks (two 3x3 convs with batch norm
//! and leaky-ReLU, stride 2 on entry, 1x1 strided projection on the skip
//! path). A 1x1 reducer maps its output to the latent width and is
//! pretrained together with a 1x1 decoder as an autoencoder. The secondary
//! encoder embeds RoIAlign crops into a single latent vector per proposal.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::BatchStats;
use crate::numerics::{BnMode, Graph, Tensor, Var};
use crate::params::{Bound, ParamStore};

pub const LEAKY_SLOPE: f64 = 0.01;
const DEFAULT_WIDTHS: [usize; 4] = [16, 32, 64, 128];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_blocks: usize,
    pub widths: Vec<usize>,
    pub reduced_channels: usize,
    pub input_size: usize,
    pub in_channels: usize,
}

impl EncoderConfig {
    pub fn new(num_blocks: usize, reduced_channels: usize, input_size: usize) -> Result<Self> {
        let cfg = EncoderConfig {
            num_blocks,
            widths: DEFAULT_WIDTHS.iter().take(num_blocks).copied().collect(),
            reduced_channels,
            input_size,
            in_channels: 3,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.num_blocks) {
            return Err(Error::Config(format!("num_blocks must be in 1..=4, got {}", self.num_blocks)));
        }
        if self.widths.len() != self.num_blocks || self.widths.contains(&0) {
            return Err(Error::Config("one positive width per block is required".into()));
        }
        if self.reduced_channels == 0 || self.in_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        let scale = self.scale();
        if self.input_size == 0 || !self.input_size.is_multiple_of(scale) {
            return Err(Error::SizeNotDivisible {
                size: self.input_size,
                scale,
            });
        }
        Ok(())
    }

    /// Spatial scale factor `p` of the latent grid.
    pub fn scale(&self) -> usize {
        1 << self.num_blocks
    }

    pub fn latent_size(&self) -> usize {
        self.input_size / self.scale()
    }

    /// Channels produced by the last residual block.
    pub fn feature_channels(&self) -> usize {
        self.widths[self.num_blocks - 1]
    }
}

/// Forward-pass context: the graph, bound parameters, batch-norm buffers
/// and the statistics collected by training-mode batch norm.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    pub vars: &'a Bound,
    pub buffers: &'a ParamStore,
    pub bn_train: bool,
    pub stats: Vec<(String, BatchStats)>,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a mut Graph, vars: &'a Bound, buffers: &'a ParamStore) -> Self {
        Ctx {
            g,
            vars,
            buffers,
            bn_train: false,
            stats: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

impl Conv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> Self {
        Conv {
            name: name.into(),
            cin,
            cout,
            k,
            stride,
            pad: k / 2,
            bias,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamStore, rng: &mut R) {
        let std = (2.0 / (self.cin * self.k * self.k) as f64).sqrt();
        params.insert(
            format!("{}.w", self.name),
            Tensor::randn(&[self.cout, self.cin, self.k, self.k], std, rng),
        );
        if self.bias {
            params.insert(format!("{}.b", self.name), Tensor::zeros(&[self.cout]));
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.vars.var(&format!("{}.w", self.name));
        let b = self.bias.then(|| ctx.vars.var(&format!("{}.b", self.name)));
        ctx.g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        BatchNorm {
            name: name.into(),
            channels,
        }
    }

    pub fn init(&self, params: &mut ParamStore, buffers: &mut ParamStore) {
        params.insert(format!("{}.gamma", self.name), Tensor::full(&[self.channels], 1.0));
        params.insert(format!("{}.beta", self.name), Tensor::zeros(&[self.channels]));
        buffers.insert(self.mean_key(), Tensor::zeros(&[self.channels]));
        buffers.insert(self.var_key(), Tensor::full(&[self.channels], 1.0));
    }

    pub fn mean_key(&self) -> String {
        format!("{}.running_mean", self.name)
    }

    pub fn var_key(&self) -> String {
        format!("{}.running_var", self.name)
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let gamma = ctx.vars.var(&format!("{}.gamma", self.name));
        let beta = ctx.vars.var(&format!("{}.beta", self.name));
        if ctx.bn_train {
            let (y, stats) = ctx.g.batch_norm(x, gamma, beta, BnMode::Train)?;
            if let Some(s) = stats {
                ctx.stats.push((self.name.clone(), s));
            }
            Ok(y)
        } else {
            let mean = ctx.buffers.get(&self.mean_key())?.data();
            let var = ctx.buffers.get(&self.var_key())?.data();
            let (y, _) = ctx.g.batch_norm(x, gamma, beta, BnMode::Eval { mean, var })?;
            Ok(y)
        }
    }
}

/// Blends collected batch statistics into the running buffers.
pub fn update_running_stats(buffers: &mut ParamStore, stats: &[(String, BatchStats)], momentum: f64) -> Result<()> {
    for (name, s) in stats {
        for (key, fresh) in [(format!("{name}.running_mean"), &s.mean), (format!("{name}.running_var"), &s.var)] {
            let buf = buffers.get_mut(&key)?;
            for (b, f) in buf.data_mut().iter_mut().zip(fresh) {
                *b = (1.0 - momentum) * *b + momentum * f;
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub conv1: Conv,
    pub bn1: BatchNorm,
    pub conv2: Conv,
    pub bn2: BatchNorm,
    pub proj: Conv,
}

impl ResidualBlock {
    pub fn new(name: &str, cin: usize, cout: usize) -> Self {
        ResidualBlock {
            conv1: Conv::new(format!("{name}.conv1"), cin, cout, 3, 2, false),
            bn1: BatchNorm::new(format!("{name}.bn1"), cout),
            conv2: Conv::new(format!("{name}.conv2"), cout, cout, 3, 1, false),
            bn2: BatchNorm::new(format!("{name}.bn2"), cout),
            proj: Conv::new(format!("{name}.proj"), cin, cout, 1, 2, true),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamStore, buffers: &mut ParamStore, rng: &mut R) {
        self.conv1.init(params, rng);
        self.bn1.init(params, buffers);
        self.conv2.init(params, rng);
        self.bn2.init(params, buffers);
        self.proj.init(params, rng);
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(ctx, x)?;
        let h = self.bn1.forward(ctx, h)?;
        let h = ctx.g.leaky_relu(h, LEAKY_SLOPE)?;
        let h = self.conv2.forward(ctx, h)?;
        let h = self.bn2.forward(ctx, h)?;
        let skip = self.proj.forward(ctx, x)?;
        let sum = ctx.g.add(h, skip)?;
        ctx.g.leaky_relu(sum, LEAKY_SLOPE)
    }
}

/// The residual backbone `g`, optionally followed by the 1x1 reducer `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub cfg: EncoderConfig,
    pub blocks: Vec<ResidualBlock>,
    pub reducer: Option<Conv>,
}

pub const REDUCER: &str = "reducer";
pub const DECODER: &str = "decoder";

impl FeatureExtractor {
    pub fn new(cfg: EncoderConfig, with_reducer: bool) -> Result<Self> {
        cfg.validate()?;
        let mut cin = cfg.in_channels;
        let mut blocks = Vec::new();
        for (i, &w) in cfg.widths.iter().enumerate() {
            blocks.push(ResidualBlock::new(&format!("enc.block{i}"), cin, w));
            cin = w;
        }
        let reducer = with_reducer.then(|| Conv::new(REDUCER, cin, cfg.reduced_channels, 1, 1, true));
        Ok(FeatureExtractor { cfg, blocks, reducer })
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamStore, buffers: &mut ParamStore, rng: &mut R) {
        for b in &self.blocks {
            b.init(params, buffers, rng);
        }
        if let Some(r) = &self.reducer {
            r.init(params, rng);
            self.decoder().init(params, rng);
        }
    }

    /// The 1x1 decoder `H` paired with the reducer.
    pub fn decoder(&self) -> Conv {
        Conv::new(DECODER, self.cfg.reduced_channels, self.cfg.feature_channels(), 1, 1, true)
    }

    pub fn batch_norms(&self) -> Vec<&BatchNorm> {
        self.blocks.iter().flat_map(|b| [&b.bn1, &b.bn2]).collect()
    }

    /// Backbone output `g(x)` for `x[b,3,n,n]`.
    pub fn backbone(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let [_, c, h, w] = ctx.g.value(x).dims4("encode")?;
        if c != self.cfg.in_channels {
            return Err(Error::ChannelMismatch {
                expected: self.cfg.in_channels,
                got: c,
            });
        }
        let scale = self.cfg.scale();
        if h % scale != 0 || w % scale != 0 {
            return Err(Error::SizeNotDivisible { size: h.max(w), scale });
        }
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(ctx, h)?;
        }
        Ok(h)
    }

    /// `f = h ∘ g` (or `g` alone without a reducer).
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let h = self.backbone(ctx, x)?;
        match &self.reducer {
            Some(r) => r.forward(ctx, h),
            None => Ok(h),
        }
    }

    /// Encodes one standardized `3 x n x n` image into its latent grid.
    pub fn encode(&self, params: &ParamStore, buffers: &ParamStore, image: &Tensor) -> Result<LatentGrid> {
        let shape = image.shape().to_vec();
        let &[c, h, w] = shape.as_slice() else {
            return Err(Error::shape("encode", format!("image shape {shape:?}")));
        };
        let mut g = Graph::new();
        let vars = Bound::frozen(&mut g, params)?;
        let mut ctx = Ctx::new(&mut g, &vars, buffers);
        let x = ctx.g.constant(image.clone().reshape(&[1, c, h, w])?)?;
        let out = self.forward(&mut ctx, x)?;
        let [_, l, gh, gw] = g.value(out).dims4("encode")?;
        let rows = crate::numerics::nn::nchw_to_rows(g.value(out))?;
        Ok(LatentGrid {
            values: rows.reshape(&[gh, gw, l])?,
            scale: self.cfg.scale(),
        })
    }
}

/// The `n′ x n′ x ℓ` embedding of an image.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub values: Tensor,
    pub scale: usize,
}

impl LatentGrid {
    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let l = self.channels();
        let off = (i * self.width() + j) * l;
        &self.values.data()[off..off + l]
    }

    /// Channel-first copy, `[ℓ, n′, n′]`.
    pub fn to_chw(&self) -> Tensor {
        let (h, w, l) = (self.height(), self.width(), self.channels());
        let mut out = vec![0.0; h * w * l];
        for i in 0..h * w {
            for c in 0..l {
                out[c * h * w + i] = self.values.data()[i * l + c];
            }
        }
        Tensor::new(vec![l, h, w], out).expect("grid shape")
    }
}

/// Result of one pass through the reducer autoencoder.
#[derive(Clone, Debug)]
pub struct AutoencoderPass {
    pub reduced: Tensor,
    pub reconstruction: Tensor,
    pub mse: f64,
}

/// Records `H(h(x))` and the reconstruction MSE on the graph.
pub fn autoencoder_graph(ctx: &mut Ctx<'_>, reducer: &Conv, decoder: &Conv, features: Var) -> Result<(Var, Var, Var)> {
    let [_, c, _, _] = ctx.g.value(features).dims4("reduce_and_reconstruct")?;
    if c != reducer.cin {
        return Err(Error::ChannelMismatch {
            expected: reducer.cin,
            got: c,
        });
    }
    let reduced = reducer.forward(ctx, features)?;
    let recon = decoder.forward(ctx, reduced)?;
    let diff = ctx.g.sub(recon, features)?;
    let sq = ctx.g.square(diff)?;
    let mse = ctx.g.mean(sq)?;
    Ok((reduced, recon, mse))
}

/// Reduces `features[b,c,h,w]`, decodes back and reports the MSE.
pub fn reduce_and_reconstruct(reducer: &Conv, decoder: &Conv, params: &ParamStore, features: &Tensor) -> Result<AutoencoderPass> {
    let mut g = Graph::new();
    let vars = Bound::frozen(&mut g, params)?;
    let empty = ParamStore::new();
    let mut ctx = Ctx::new(&mut g, &vars, &empty);
    let x = ctx.g.constant(features.clone())?;
    let (r, rec, mse) = autoencoder_graph(&mut ctx, reducer, decoder, x)?;
    Ok(AutoencoderPass {
        reduced: g.value(r).clone(),
        reconstruction: g.value(rec).clone(),
        mse: g.value(mse).item()?,
    })
}

/// Secondary encoder `f_φ`: four 3x3 convs (strides 2,1,2,2), batch norm and
/// leaky-ReLU after the first three, then global average pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct SecondaryEncoder {
    pub in_channels: usize,
    pub hidden: usize,
    pub latent: usize,
    pub patch: usize,
    pub convs: Vec<Conv>,
    pub bns: Vec<BatchNorm>,
}

pub const SECONDARY: &str = "sec";
pub const SECONDARY_DECODER: &str = "secdec";

impl SecondaryEncoder {
    pub fn new(in_channels: usize, hidden: usize, latent: usize, patch: usize) -> Self {
        let strides = [2, 1, 2, 2];
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        let mut cin = in_channels;
        for (i, &s) in strides.iter().enumerate() {
            let last = i == strides.len() - 1;
            let cout = if last { latent } else { hidden };
            convs.push(Conv::new(format!("{SECONDARY}.conv{i}"), cin, cout, 3, s, last));
            if !last {
                bns.push(BatchNorm::new(format!("{SECONDARY}.bn{i}"), cout));
            }
            cin = cout;
        }
        SecondaryEncoder {
            in_channels,
            hidden,
            latent,
            patch,
            convs,
            bns,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamStore, buffers: &mut ParamStore, rng: &mut R) {
        for c in &self.convs {
            c.init(params, rng);
        }
        for b in &self.bns {
            b.init(params, buffers);
        }
        let out = self.in_channels * self.patch * self.patch;
        let std = (1.0 / self.latent as f64).sqrt();
        params.insert(format!("{SECONDARY_DECODER}.w"), Tensor::randn(&[self.latent, out], std, rng));
        params.insert(format!("{SECONDARY_DECODER}.b"), Tensor::zeros(&[out]));
    }

    /// `patches[r, c, s, s] -> [r, ℓ]`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, patches: Var) -> Result<Var> {
        let shape = ctx.g.value(patches).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.in_channels || shape[2] != self.patch || shape[3] != self.patch {
            return Err(Error::WrongPatchSize {
                expected: self.patch,
                got: shape,
            });
        }
        let mut h = patches;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(ctx, h)?;
            if let Some(bn) = self.bns.get(i) {
                h = bn.forward(ctx, h)?;
                h = ctx.g.leaky_relu(h, LEAKY_SLOPE)?;
            }
        }
        ctx.g.global_avg_pool(h)
    }

    /// Linear decoder back to the flattened patch; returns the reconstruction MSE.
    pub fn reconstruction_loss(&self, ctx: &mut Ctx<'_>, z: Var, patches: Var) -> Result<Var> {
        let w = ctx.vars.var(&format!("{SECONDARY_DECODER}.w"));
        let b = ctx.vars.var(&format!("{SECONDARY_DECODER}.b"));
        let r = ctx.g.value(patches).shape()[0];
        let flat = ctx.g.reshape(patches, &[r, self.in_channels * self.patch * self.patch])?;
        let rec = ctx.g.matmul(z, w)?;
        let rec = ctx.g.add_row(rec, b)?;
        let diff = ctx.g.sub(rec, flat)?;
        let sq = ctx.g.square(diff)?;
        ctx.g.mean(sq)
    }

    pub fn batch_norms(&self) -> Vec<&BatchNorm> {
        self.bns.iter().collect()
    }
}

/// One latent vector for one region proposal.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalEmbedding {
    pub vector: Vec<f64>,
    pub proposal: usize,
}

/// Embeds a single aligned patch `[c, s, s]` in inference mode.
pub fn encode_proposal(
    enc: &SecondaryEncoder,
    params: &ParamStore,
    buffers: &ParamStore,
    patch: &Tensor,
    proposal: usize,
) -> Result<ProposalEmbedding> {
    let shape = patch.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::WrongPatchSize {
            expected: enc.patch,
            got: shape,
        });
    }
    let mut g = Graph::new();
    let vars = Bound::frozen(&mut g, params)?;
    let mut ctx = Ctx::new(&mut g, &vars, buffers);
    let x = ctx.g.constant(patch.clone().reshape(&[1, shape[0], shape[1], shape[2]])?)?;
    let z = enc.forward(&mut ctx, x)?;
    Ok(ProposalEmbedding {
        vector: g.value(z).data().to_vec(),
        proposal,
    })
}
