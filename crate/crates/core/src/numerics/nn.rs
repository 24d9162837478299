//! Convolutional building blocks recorded as fused graph ops.

use super::graph::{CustomOp, Graph, Var};
use super::kernels::{col2im, gemm, im2col, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::par;

pub const BN_EPS: f64 = 1e-5;

/// Per-channel statistics of a training-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalize with the batch's own (biased) statistics.
    Train,
    /// Normalize with fixed running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

struct Conv2dOp {
    stride: usize,
    pad: usize,
    has_bias: bool,
}

fn conv_geom(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<(usize, usize, ConvGeom)> {
    let [b, cin, h, wd] = x.dims4("conv2d")?;
    let [cout, cin2, k, k2] = w.dims4("conv2d")?;
    if cin != cin2 {
        return Err(Error::ChannelMismatch {
            expected: cin2,
            got: cin,
        });
    }
    if k != k2 || stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
        return Err(Error::shape("conv2d", format!("kernel {k}x{k2} on {h}x{wd}")));
    }
    Ok((
        b,
        cout,
        ConvGeom {
            cin,
            h,
            w: wd,
            k,
            stride,
            pad,
        },
    ))
}

impl CustomOp for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (b, cout, geom) = conv_geom(x, w, self.stride, self.pad)?;
        let p = geom.out_h() * geom.out_w();
        let kl = geom.patch_len();
        let in_len = geom.cin * geom.h * geom.w;
        let (need_x, need_w) = (needs[0], needs[1]);

        let per_sample = par::map_range(b, |bi| {
            let gout = &grad.data()[bi * cout * p..(bi + 1) * cout * p];
            let mut cols = vec![0.0; kl * p];
            let mut dw = None;
            if need_w {
                im2col(&x.data()[bi * in_len..(bi + 1) * in_len], &geom, &mut cols);
                let mut d = vec![0.0; cout * kl];
                gemm(cout, p, kl, 1.0, gout, false, &cols, true, 0.0, &mut d);
                dw = Some(d);
            }
            let mut dx = None;
            if need_x {
                gemm(kl, cout, p, 1.0, w.data(), true, gout, false, 0.0, &mut cols);
                let mut d = vec![0.0; in_len];
                col2im(&cols, &geom, &mut d);
                dx = Some(d);
            }
            (dx, dw)
        });

        let mut gx = need_x.then(|| vec![0.0; b * in_len]);
        let mut gw = need_w.then(|| vec![0.0; cout * kl]);
        for (bi, (dx, dw)) in per_sample.into_iter().enumerate() {
            if let (Some(gx), Some(dx)) = (gx.as_mut(), dx) {
                gx[bi * in_len..(bi + 1) * in_len].copy_from_slice(&dx);
            }
            if let (Some(gw), Some(dw)) = (gw.as_mut(), dw) {
                for (a, d) in gw.iter_mut().zip(dw) {
                    *a += d;
                }
            }
        }
        let mut out = vec![
            gx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?,
            gw.map(|d| Tensor::new(w.shape().to_vec(), d)).transpose()?,
        ];
        if self.has_bias {
            let gb = needs[2].then(|| {
                let mut gb = vec![0.0; cout];
                for bi in 0..b {
                    for (c, acc) in gb.iter_mut().enumerate() {
                        let off = (bi * cout + c) * p;
                        *acc += grad.data()[off..off + p].iter().sum::<f64>();
                    }
                }
                Tensor::from_vec(gb)
            });
            out.push(gb);
        }
        Ok(out)
    }
}

struct BatchNormOp {
    mean: Vec<f64>,
    invstd: Vec<f64>,
    train: bool,
}

impl CustomOp for BatchNormOp {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let [b, c, h, w] = x.dims4("batch_norm")?;
        let hw = h * w;
        let m = (b * hw) as f64;
        let mut gx = vec![0.0; x.len()];
        let mut ggamma = vec![0.0; c];
        let mut gbeta = vec![0.0; c];
        for ch in 0..c {
            let (mu, is) = (self.mean[ch], self.invstd[ch]);
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for bi in 0..b {
                let off = (bi * c + ch) * hw;
                for i in off..off + hw {
                    let xhat = (x.data()[i] - mu) * is;
                    sum_dy += grad.data()[i];
                    sum_dy_xhat += grad.data()[i] * xhat;
                }
            }
            ggamma[ch] = sum_dy_xhat;
            gbeta[ch] = sum_dy;
            if !needs[0] {
                continue;
            }
            let gm = gamma.data()[ch];
            for bi in 0..b {
                let off = (bi * c + ch) * hw;
                for i in off..off + hw {
                    gx[i] = if self.train {
                        let xhat = (x.data()[i] - mu) * is;
                        gm * is / m * (m * grad.data()[i] - sum_dy - xhat * sum_dy_xhat)
                    } else {
                        gm * is * grad.data()[i]
                    };
                }
            }
        }
        Ok(vec![
            needs[0].then(|| Tensor::new(x.shape().to_vec(), gx)).transpose()?,
            needs[1].then(|| Tensor::from_vec(ggamma)),
            needs[2].then(|| Tensor::from_vec(gbeta)),
        ])
    }
}

struct GlobalAvgPoolOp;

impl CustomOp for GlobalAvgPoolOp {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let [b, c, h, w] = inputs[0].dims4("global_avg_pool")?;
        let hw = h * w;
        let mut gx = vec![0.0; b * c * hw];
        for (i, chunk) in gx.chunks_mut(hw).enumerate() {
            chunk.fill(grad.data()[i] / hw as f64);
        }
        Ok(vec![Some(Tensor::new(vec![b, c, h, w], gx)?)])
    }
}

struct NchwToRowsOp;

impl CustomOp for NchwToRowsOp {
    fn name(&self) -> &'static str {
        "nchw_to_rows"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let [b, c, h, w] = inputs[0].dims4("nchw_to_rows")?;
        Ok(vec![Some(rows_to_nchw(grad.data(), b, c, h * w, inputs[0].shape())?)])
    }
}

fn rows_to_nchw(rows: &[f64], b: usize, c: usize, hw: usize, shape: &[usize]) -> Result<Tensor> {
    let mut out = vec![0.0; b * c * hw];
    for bi in 0..b {
        for s in 0..hw {
            let r = &rows[(bi * hw + s) * c..(bi * hw + s + 1) * c];
            for (ch, &v) in r.iter().enumerate() {
                out[(bi * c + ch) * hw + s] = v;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// `[b,c,h,w] -> [b*h*w, c]`, one row per spatial position.
pub fn nchw_to_rows(x: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = x.dims4("nchw_to_rows")?;
    let hw = h * w;
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ch in 0..c {
            let plane = &x.data()[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
            for (s, &v) in plane.iter().enumerate() {
                out[(bi * hw + s) * c + ch] = v;
            }
        }
    }
    Tensor::new(vec![b * hw, c], out)
}

impl Graph {
    /// 2-D convolution of `x[b,cin,h,w]` with `w[cout,cin,k,k]` and optional bias.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (b, cout, geom) = conv_geom(xv, wv, stride, pad)?;
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let p = oh * ow;
        let kl = geom.patch_len();
        let in_len = geom.cin * geom.h * geom.w;
        let bias_v = match bias {
            Some(bv) => {
                let t = self.value(bv);
                if t.shape() != [cout] {
                    return Err(Error::shape("conv2d", "bias length"));
                }
                Some(t.data().to_vec())
            }
            None => None,
        };
        let mut out = vec![0.0; b * cout * p];
        par::for_each_chunk_mut(&mut out, cout * p, |bi, o| {
            let mut cols = vec![0.0; kl * p];
            im2col(&xv.data()[bi * in_len..(bi + 1) * in_len], &geom, &mut cols);
            gemm(cout, kl, p, 1.0, wv.data(), false, &cols, false, 0.0, o);
            if let Some(bv) = &bias_v {
                for (c, chunk) in o.chunks_mut(p).enumerate() {
                    for v in chunk {
                        *v += bv[c];
                    }
                }
            }
        });
        let out = Tensor::new(vec![b, cout, oh, ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.custom(
            &inputs,
            out,
            Box::new(Conv2dOp {
                stride,
                pad,
                has_bias: bias.is_some(),
            }),
        )
    }

    /// Batch normalization over `[b,c,h,w]` with per-channel affine `gamma`, `beta`.
    /// Returns the batch statistics in training mode.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_>) -> Result<(Var, Option<BatchStats>)> {
        let xv = self.value(x);
        let [b, c, h, w] = xv.dims4("batch_norm")?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape("batch_norm", "affine parameter length"));
        }
        let hw = h * w;
        let (mean, var, train) = match mode {
            BnMode::Train => {
                let m = (b * hw) as f64;
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for bi in 0..b {
                        let off = (bi * c + ch) * hw;
                        s += xv.data()[off..off + hw].iter().sum::<f64>();
                    }
                    let mu = s / m;
                    let mut v = 0.0;
                    for bi in 0..b {
                        let off = (bi * c + ch) * hw;
                        v += xv.data()[off..off + hw].iter().map(|x| (x - mu) * (x - mu)).sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = v / m;
                }
                (mean, var, true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", "running statistics length"));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                for i in off..off + hw {
                    out[i] = gm[ch] * (xv.data()[i] - mean[ch]) * invstd[ch] + bt[ch];
                }
            }
        }
        let out = Tensor::new(vec![b, c, h, w], out)?;
        let stats = train.then(|| BatchStats {
            mean: mean.clone(),
            var,
        });
        let v = self.custom(&[x, gamma, beta], out, Box::new(BatchNormOp { mean, invstd, train }))?;
        Ok((v, stats))
    }

    /// `[b,c,h,w] -> [b,c]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4("global_avg_pool")?;
        let hw = (h * w) as f64;
        let out: Vec<f64> = self.value(x).data().chunks(h * w).map(|p| p.iter().sum::<f64>() / hw).collect();
        self.custom(&[x], Tensor::new(vec![b, c], out)?, Box::new(GlobalAvgPoolOp))
    }

    /// `[b,c,h,w] -> [b*h*w, c]`.
    pub fn nchw_to_rows(&mut self, x: Var) -> Result<Var> {
        let out = nchw_to_rows(self.value(x))?;
        self.custom(&[x], out, Box::new(NchwToRowsOp))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let xv = g.constant(x.clone()).unwrap();
        let w = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0)).unwrap();
        let y = g.conv2d(xv, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn conv_shape_with_stride() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3, 32, 32])).unwrap();
        let w = g.constant(Tensor::zeros(&[16, 3, 3, 3])).unwrap();
        let y = g.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 16, 16, 16]);
    }

    #[test]
    fn conv_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4])).unwrap();
        let w = g.constant(Tensor::zeros(&[1, 3, 3, 3])).unwrap();
        assert!(matches!(g.conv2d(x, w, None, 1, 1), Err(Error::ChannelMismatch { .. })));
    }

    #[test]
    fn rows_layout() {
        let x = Tensor::new(vec![1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = nchw_to_rows(&x).unwrap();
        assert_eq!(r.shape(), &[2, 2]);
        assert_eq!(r.data(), &[1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn batch_norm_modes_agree_on_matching_stats() {
        let x = Tensor::new(vec![2, 1, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x).unwrap();
        let gamma = g.constant(Tensor::from_vec(vec![1.5])).unwrap();
        let beta = g.constant(Tensor::from_vec(vec![-0.5])).unwrap();
        let (yt, stats) = g.batch_norm(xv, gamma, beta, BnMode::Train).unwrap();
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![4.0]);
        assert_eq!(stats.var, vec![5.0]);
        let (ye, none) = g
            .batch_norm(xv, gamma, beta, BnMode::Eval { mean: &stats.mean, var: &stats.var })
            .unwrap();
        assert!(none.is_none());
        assert!(g.value(yt).max_abs_diff(g.value(ye)) < 1e-6);
    }
}
