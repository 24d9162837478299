//! The Gaussian Prototype Layer.
//!
//! Latent vectors are scored against `N` anisotropic Gaussian components,
//! each owned by one class. The layer outputs the normalized conditional
//! log-probabilities `log p(K = k | z)`; a non-negative linear head without
//! bias turns them into class scores. Class labels are 0-based and class 0
//! is background.
//!
//! Constraints hold by construction: mixture weights are `softmax(logits)`,
//! the Cholesky diagonal passes through `exp` and head weights through
//! `softplus`, so plain gradient steps can never leave the feasible set.

mod density;
mod init;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::special::{lse, softplus, softplus_inverse};
use crate::numerics::{Graph, Tensor, Var};

pub use init::kmeans;

/// Added to every reconstructed covariance as `ε·I`.
pub const COVARIANCE_FLOOR: f64 = 1e-4;

/// Raw value whose softplus underflows to exactly zero.
const ZERO_WEIGHT_RAW: f64 = -1000.0;

#[derive(Clone, Debug, PartialEq)]
pub struct GplParams {
    pub logits: Tensor,
    pub means: Tensor,
    pub chol_raw: Tensor,
    class_of: Vec<usize>,
}

impl GplParams {
    pub fn new(logits: Tensor, means: Tensor, chol_raw: Tensor, class_of: Vec<usize>) -> Result<Self> {
        let [n, dim] = means.dims2("gpl")?;
        if logits.shape() != [n] || chol_raw.shape() != [n, dim, dim] || class_of.len() != n {
            return Err(Error::shape(
                "gpl",
                format!(
                    "logits {:?}, means {:?}, chol_raw {:?}, {} class assignments",
                    logits.shape(),
                    means.shape(),
                    chol_raw.shape(),
                    class_of.len()
                ),
            ));
        }
        Ok(GplParams {
            logits,
            means,
            chol_raw,
            class_of,
        })
    }

    /// Builds parameters from explicit weights, means and covariances.
    /// Each covariance must exceed the floor `ε·I` by a positive definite margin.
    pub fn from_moments(weights: &[f64], means: &[Vec<f64>], covariances: &[Tensor], class_of: Vec<usize>) -> Result<Self> {
        let n = means.len();
        let dim = means.first().map(Vec::len).ok_or(Error::EmptyBatch)?;
        if weights.len() != n || covariances.len() != n {
            return Err(Error::shape("gpl", "moment counts differ"));
        }
        let logits = Tensor::from_vec(weights.iter().map(|w| w.ln()).collect());
        let mut raw = Vec::with_capacity(n * dim * dim);
        for cov in covariances {
            let mut shifted = cov.clone();
            for i in 0..dim {
                let v = shifted.get(&[i, i]) - COVARIANCE_FLOOR;
                shifted.set(&[i, i], v);
            }
            let l = crate::numerics::cholesky(&shifted)?;
            for i in 0..dim {
                for j in 0..dim {
                    raw.push(match i.cmp(&j) {
                        std::cmp::Ordering::Greater => l.get(&[i, j]),
                        std::cmp::Ordering::Equal => l.get(&[i, i]).ln(),
                        std::cmp::Ordering::Less => 0.0,
                    });
                }
            }
        }
        GplParams::new(
            logits,
            Tensor::from_rows(means)?,
            Tensor::new(vec![n, dim, dim], raw)?,
            class_of,
        )
    }

    pub fn num_components(&self) -> usize {
        self.class_of.len()
    }

    pub fn dim(&self) -> usize {
        self.means.shape()[1]
    }

    pub fn class_of(&self) -> &[usize] {
        &self.class_of
    }

    pub fn num_classes(&self) -> usize {
        self.class_of.iter().max().map_or(0, |m| m + 1)
    }

    /// Mixture weights `softmax(logits)`.
    pub fn weights(&self) -> Vec<f64> {
        let l = lse(self.logits.data());
        self.logits.data().iter().map(|x| (x - l).exp()).collect()
    }

    /// `Σ_k = L_k L_kᵀ + εI`.
    pub fn covariance(&self, k: usize) -> Tensor {
        let dim = self.dim();
        let raw = &self.chol_raw.data()[k * dim * dim..(k + 1) * dim * dim];
        let l = density::lower_from_raw(raw, dim);
        Tensor::new(vec![dim, dim], density::covariance_from_lower(&l, dim, COVARIANCE_FLOOR))
            .expect("covariance shape")
    }

    fn rows(&self, z: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        let dim = self.dim();
        let shape = z.shape();
        if shape.last() != Some(&dim) {
            return Err(Error::shape("gpl", format!("latent shape {shape:?} for dim {dim}")));
        }
        z.ensure_finite("gpl input")?;
        let m = z.len() / dim;
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        out_shape.push(self.num_components());
        Ok((z.clone().reshape(&[m, dim])?, out_shape))
    }

    /// `log w_k + log N(z; μ_k, Σ_k)` for each row of `z`.
    pub fn log_joint(&self, z: &Tensor) -> Result<Tensor> {
        let (rows, out_shape) = self.rows(z)?;
        let mut g = Graph::new();
        let vars = self.constants(&mut g)?;
        let zv = g.constant(rows)?;
        let out = forward(&mut g, &vars, zv)?;
        g.value(out.log_joint).clone().reshape(&out_shape)
    }

    pub(crate) fn constants(&self, g: &mut Graph) -> Result<GplVars> {
        Ok(GplVars {
            logits: g.constant(self.logits.clone())?,
            means: g.constant(self.means.clone())?,
            chol_raw: g.constant(self.chol_raw.clone())?,
        })
    }
}

/// Graph handles for the layer's three parameter tensors.
#[derive(Clone, Copy, Debug)]
pub struct GplVars {
    pub logits: Var,
    pub means: Var,
    pub chol_raw: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct GplForward {
    /// `[m, N]` log joint `log w_k + log N_k(z)`.
    pub log_joint: Var,
    /// `[m]` mixture log-likelihood per row.
    pub log_lik: Var,
    /// `[m, N]` normalized conditional log-probabilities.
    pub log_resp: Var,
}

/// Records the layer on `g` for latent rows `z[m, ℓ]`.
pub fn forward(g: &mut Graph, vars: &GplVars, z: Var) -> Result<GplForward> {
    let n = g.value(vars.logits).len();
    let dens = g.gaussian_log_density(z, vars.means, vars.chol_raw, COVARIANCE_FLOOR)?;
    let row = g.reshape(vars.logits, &[1, n])?;
    let logw = g.log_softmax_rows(row)?;
    let logw = g.reshape(logw, &[n])?;
    let log_joint = g.add_row(dens, logw)?;
    let log_lik = g.log_sum_exp_rows(log_joint)?;
    let log_resp = g.sub_col(log_joint, log_lik)?;
    Ok(GplForward {
        log_joint,
        log_lik,
        log_resp,
    })
}

/// Mean negative log-likelihood of the rows behind `fwd`.
pub fn nll_graph(g: &mut Graph, fwd: &GplForward) -> Result<Var> {
    let m = g.mean(fwd.log_lik)?;
    g.scale(m, -1.0)
}

/// Class scores `log_resp · Aᵀ` with `A = softplus(raw)`.
pub fn scores_graph(g: &mut Graph, head_raw: Var, log_resp: Var) -> Result<Var> {
    let a = g.softplus(head_raw)?;
    g.matmul_t(log_resp, a)
}

/// `Σ_{(y,k): class_of(k) ≠ y} a_{y,k}`.
pub fn l1_graph(g: &mut Graph, head_raw: Var, class_of: &[usize]) -> Result<Var> {
    let shape = g.value(head_raw).shape().to_vec();
    let mask = cross_class_mask(shape[0], class_of)?;
    let a = g.softplus(head_raw)?;
    g.weighted_sum(a, mask)
}

fn cross_class_mask(classes: usize, class_of: &[usize]) -> Result<Tensor> {
    let n = class_of.len();
    let mut m = Tensor::zeros(&[classes, n]);
    for y in 0..classes {
        for (k, &c) in class_of.iter().enumerate() {
            if c != y {
                m.set(&[y, k], 1.0);
            }
        }
    }
    Ok(m)
}

/// Non-negative linear head without bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    /// `[C, N]`; effective weights are `softplus(raw)`.
    pub raw: Tensor,
}

impl LinearHead {
    pub fn new(raw: Tensor) -> Result<Self> {
        raw.dims2("linear_head")?;
        Ok(LinearHead { raw })
    }

    /// Head whose effective weights equal `a` (entries must be ≥ 0).
    pub fn from_effective(a: &Tensor) -> Result<Self> {
        a.dims2("linear_head")?;
        if a.data().iter().any(|&x| x < 0.0) {
            return Err(Error::shape("linear_head", "effective weights must be non-negative"));
        }
        LinearHead::new(a.map(|x| if x > 0.0 { softplus_inverse(x) } else { ZERO_WEIGHT_RAW }))
    }

    /// Own-class weight `own`, cross-class weight `cross`.
    pub fn class_aligned(class_of: &[usize], classes: usize, own: f64, cross: f64) -> Self {
        let mut a = Tensor::zeros(&[classes, class_of.len()]);
        for y in 0..classes {
            for (k, &c) in class_of.iter().enumerate() {
                a.set(&[y, k], if c == y { own } else { cross });
            }
        }
        LinearHead::from_effective(&a).expect("non-negative weights")
    }

    pub fn num_classes(&self) -> usize {
        self.raw.shape()[0]
    }

    pub fn num_components(&self) -> usize {
        self.raw.shape()[1]
    }

    pub fn effective(&self) -> Tensor {
        self.raw.map(softplus)
    }
}

/// `log p(K | z)` for every row of `z[…, ℓ]`, shaped `[…, N]`.
///
/// The dominant component gets `-log1p(Σ_{j≠k} e^{l_j - l_k})`, so values
/// near zero keep their full relative precision instead of rounding to
/// multiples of `ulp(l_k)`.
pub fn log_responsibilities(params: &GplParams, z: &Tensor) -> Result<Tensor> {
    let joint = params.log_joint(z)?;
    let shape = joint.shape().to_vec();
    let n = params.num_components();
    let mut out = joint.data().to_vec();
    for row in out.chunks_exact_mut(n) {
        let top = argmax_first(row);
        let lt = row[top];
        let rest: f64 = (0..n).filter(|&j| j != top).map(|j| (row[j] - lt).exp()).sum();
        if !rest.is_finite() || !lt.is_finite() {
            return Err(Error::NotFinite { op: "log_responsibilities" });
        }
        let lse = lt + rest.ln_1p();
        for (j, v) in row.iter_mut().enumerate() {
            *v = if j == top { -rest.ln_1p() } else { *v - lse };
        }
    }
    Tensor::new(shape, out)
}

/// Mean over rows of `-log Σ_k w_k N(z; μ_k, Σ_k)`.
pub fn gmm_nll(params: &GplParams, z: &Tensor) -> Result<f64> {
    if z.len() < params.dim() {
        return Err(Error::EmptyBatch);
    }
    let (rows, _) = params.rows(z)?;
    let mut g = Graph::new();
    let vars = params.constants(&mut g)?;
    let zv = g.constant(rows)?;
    let out = forward(&mut g, &vars, zv)?;
    let nll = nll_graph(&mut g, &out)?;
    g.value(nll).item()
}

/// `c_y = Σ_k a_{y,k} log p(K = k | z)` for each row of `logresp[…, N]`.
pub fn class_scores(head: &LinearHead, logresp: &Tensor) -> Result<Tensor> {
    let n = head.num_components();
    let shape = logresp.shape();
    if shape.last() != Some(&n) {
        return Err(Error::shape("class_scores", format!("{shape:?} against {n} components")));
    }
    let m = logresp.len() / n;
    let rows = logresp.clone().reshape(&[m, n])?;
    let scores = rows.matmul(&head.effective().transpose()?)?;
    let mut out_shape = shape[..shape.len() - 1].to_vec();
    out_shape.push(head.num_classes());
    scores.reshape(&out_shape)
}

/// Index of the largest score; ties go to the smallest index.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Predicted class of a single latent vector.
pub fn classify(head: &LinearHead, params: &GplParams, z: &[f64]) -> Result<usize> {
    Ok(classify_rows(head, params, &Tensor::from_vec(z.to_vec()))?[0])
}

/// Predicted class for every row of `z[…, ℓ]`.
pub fn classify_rows(head: &LinearHead, params: &GplParams, z: &Tensor) -> Result<Vec<usize>> {
    let lr = log_responsibilities(params, z)?;
    let scores = class_scores(head, &lr)?;
    let c = head.num_classes();
    Ok(scores.data().chunks(c).map(argmax_first).collect())
}

/// Mean softmax cross-entropy of the head's class scores.
pub fn classification_loss(head: &LinearHead, logresp: &Tensor, labels: &[usize]) -> Result<f64> {
    let [m, n] = logresp.dims2("classification_loss")?;
    if n != head.num_components() {
        return Err(Error::shape("classification_loss", "component count"));
    }
    let mut g = Graph::new();
    let raw = g.constant(head.raw.clone())?;
    let lr = g.constant(logresp.clone())?;
    let scores = scores_graph(&mut g, raw, lr)?;
    if labels.len() != m {
        return Err(Error::shape("classification_loss", "label count"));
    }
    let loss = g.cross_entropy(scores, labels)?;
    g.value(loss).item()
}

pub fn l1_cross_class(head: &LinearHead, class_of: &[usize]) -> Result<f64> {
    if class_of.len() != head.num_components() {
        return Err(Error::shape("l1_cross_class", "component count"));
    }
    let mask = cross_class_mask(head.num_classes(), class_of)?;
    Ok(head.effective().data().iter().zip(mask.data()).map(|(a, m)| a * m).sum())
}

/// Seeds prototype parameters from latent rows `z[m, ℓ]`.
///
/// With `labels`, each class's components are clustered on that class's rows
/// only; otherwise all components are clustered on the pooled rows and take
/// the classes of `class_of` in order. Every covariance starts as `σ²·I`
/// where `σ²` is the mean within-cluster variance per coordinate.
pub fn init_from_data<R: Rng + ?Sized>(
    z: &Tensor,
    class_of: &[usize],
    labels: Option<&[usize]>,
    rng: &mut R,
) -> Result<GplParams> {
    let [m, dim] = z.dims2("init_from_data")?;
    let n = class_of.len();
    if m == 0 || n == 0 {
        return Err(Error::EmptyBatch);
    }
    let rows: Vec<&[f64]> = (0..m).map(|i| z.row(i)).collect();
    let mut means = vec![Vec::new(); n];
    let mut sq_err = 0.0;
    match labels {
        Some(labels) => {
            if labels.len() != m {
                return Err(Error::shape("init_from_data", "label count"));
            }
            let classes = class_of.iter().max().map_or(0, |c| c + 1);
            for c in 0..classes {
                let comps: Vec<usize> = (0..n).filter(|&k| class_of[k] == c).collect();
                if comps.is_empty() {
                    continue;
                }
                let class_rows: Vec<&[f64]> = rows
                    .iter()
                    .zip(labels)
                    .filter(|(_, &l)| l == c)
                    .map(|(r, _)| *r)
                    .collect();
                if class_rows.is_empty() {
                    return Err(Error::MissingClass(c));
                }
                let (centers, inertia) = kmeans(&class_rows, comps.len(), dim, rng)?;
                sq_err += inertia;
                for (k, center) in comps.into_iter().zip(centers) {
                    means[k] = center;
                }
            }
        }
        None => {
            let (centers, inertia) = kmeans(&rows, n, dim, rng)?;
            sq_err = inertia;
            means = centers;
        }
    }
    let mut sigma2 = sq_err / (m * dim) as f64;
    if sigma2 <= 0.0 {
        let mean: Vec<f64> = (0..dim).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / m as f64).collect();
        sigma2 = rows
            .iter()
            .map(|r| r.iter().zip(&mean).map(|(x, mu)| (x - mu) * (x - mu)).sum::<f64>())
            .sum::<f64>()
            / (m * dim) as f64;
    }
    if sigma2 <= 0.0 {
        sigma2 = 1.0;
    }
    let diag = 0.5 * (sigma2 - COVARIANCE_FLOOR).max(COVARIANCE_FLOOR).ln();
    let mut raw = vec![0.0; n * dim * dim];
    for k in 0..n {
        for i in 0..dim {
            raw[k * dim * dim + i * dim + i] = diag;
        }
    }
    GplParams::new(
        Tensor::zeros(&[n]),
        Tensor::from_rows(&means)?,
        Tensor::new(vec![n, dim, dim], raw)?,
        class_of.to_vec(),
    )
}

#[cfg(test)]
mod tests;
