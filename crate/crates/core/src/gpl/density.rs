//! Batched Gaussian log-density with covariances parametrized through a
//! raw Cholesky tensor: `Σ_k = L_k L_kᵀ + εI`, where `L_k` takes the strict
//! lower triangle of `chol_raw[k]` verbatim and `exp` of its diagonal.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::kernels::gemm;
use crate::numerics::linalg::{cholesky_into, invert_lower, log_det_from_cholesky};
use crate::numerics::{CustomOp, Graph, Tensor, Var};
use crate::par;

/// Per-component factors derived from the raw parametrization.
pub(crate) struct Factors {
    /// `L_k`, row-major `ℓ x ℓ` per component.
    pub lower: Vec<Vec<f64>>,
    /// Inverse of the Cholesky factor of `Σ_k`.
    pub factor_inv: Vec<Vec<f64>>,
    pub log_det: Vec<f64>,
}

pub(crate) fn lower_from_raw(raw: &[f64], dim: usize) -> Vec<f64> {
    let mut l = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..i {
            l[i * dim + j] = raw[i * dim + j];
        }
        l[i * dim + i] = raw[i * dim + i].exp();
    }
    l
}

pub(crate) fn covariance_from_lower(l: &[f64], dim: usize, eps: f64) -> Vec<f64> {
    let mut s = vec![0.0; dim * dim];
    gemm(dim, dim, dim, 1.0, l, false, l, true, 0.0, &mut s);
    for i in 0..dim {
        s[i * dim + i] += eps;
    }
    s
}

pub(crate) fn factors(chol_raw: &Tensor, eps: f64) -> Result<Factors> {
    let (n, dim) = match chol_raw.shape() {
        &[n, a, b] if a == b => (n, a),
        s => return Err(Error::shape("gaussian_log_density", format!("chol_raw shape {s:?}"))),
    };
    let mut lower = Vec::with_capacity(n);
    let mut factor_inv = Vec::with_capacity(n);
    let mut log_det = Vec::with_capacity(n);
    let mut c = vec![0.0; dim * dim];
    for k in 0..n {
        let l = lower_from_raw(&chol_raw.data()[k * dim * dim..(k + 1) * dim * dim], dim);
        let sigma = covariance_from_lower(&l, dim, eps);
        cholesky_into(&sigma, dim, &mut c)?;
        log_det.push(log_det_from_cholesky(&c, dim));
        factor_inv.push(invert_lower(&c, dim));
        lower.push(l);
    }
    Ok(Factors {
        lower,
        factor_inv,
        log_det,
    })
}

/// `U = (Z - μ_k) C_k⁻ᵀ`, one whitened residual per row.
fn whitened(z: &[f64], m: usize, mean: &[f64], cinv: &[f64], dim: usize) -> Vec<f64> {
    let mut d = z.to_vec();
    for row in d.chunks_mut(dim) {
        for (x, mu) in row.iter_mut().zip(mean) {
            *x -= mu;
        }
    }
    let mut u = vec![0.0; m * dim];
    gemm(m, dim, dim, 1.0, &d, false, cinv, true, 0.0, &mut u);
    u
}

fn check_shapes(z: &Tensor, means: &Tensor, chol_raw: &Tensor) -> Result<(usize, usize, usize)> {
    let [m, dim] = z.dims2("gaussian_log_density")?;
    let [n, dim2] = means.dims2("gaussian_log_density")?;
    if dim != dim2 || chol_raw.shape() != [n, dim, dim] {
        return Err(Error::shape(
            "gaussian_log_density",
            format!("z {:?}, means {:?}, chol_raw {:?}", z.shape(), means.shape(), chol_raw.shape()),
        ));
    }
    Ok((m, n, dim))
}

/// `out[i,k] = log N(z_i; μ_k, Σ_k)`.
pub(crate) fn log_density(z: &Tensor, means: &Tensor, chol_raw: &Tensor, eps: f64) -> Result<Tensor> {
    let (m, n, dim) = check_shapes(z, means, chol_raw)?;
    let f = factors(chol_raw, eps)?;
    let norm = -0.5 * dim as f64 * (2.0 * PI).ln();
    let cols = par::map_range(n, |k| {
        let u = whitened(z.data(), m, means.row(k), &f.factor_inv[k], dim);
        let base = norm - 0.5 * f.log_det[k];
        u.chunks(dim)
            .map(|r| base - 0.5 * r.iter().map(|x| x * x).sum::<f64>())
            .collect::<Vec<f64>>()
    });
    let mut out = vec![0.0; m * n];
    for (k, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            out[i * n + k] = *v;
        }
    }
    let t = Tensor::new(vec![m, n], out)?;
    t.ensure_finite("gaussian_log_density")?;
    Ok(t)
}

struct GaussianLogDensityOp {
    eps: f64,
}

impl CustomOp for GaussianLogDensityOp {
    fn name(&self) -> &'static str {
        "gaussian_log_density"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (z, means, chol_raw) = (inputs[0], inputs[1], inputs[2]);
        let (m, n, dim) = check_shapes(z, means, chol_raw)?;
        let f = factors(chol_raw, self.eps)?;
        let need_z = needs[0];

        let per_component = par::map_range(n, |k| {
            let cinv = &f.factor_inv[k];
            let u = whitened(z.data(), m, means.row(k), cinv, dim);
            // V = Σ⁻¹(z - μ) row-wise, i.e. U C⁻¹.
            let mut v = vec![0.0; m * dim];
            gemm(m, dim, dim, 1.0, &u, false, cinv, false, 0.0, &mut v);
            let gk: Vec<f64> = (0..m).map(|i| grad.data()[i * n + k]).collect();
            let mut w = v.clone();
            for (row, g) in w.chunks_mut(dim).zip(&gk) {
                for x in row {
                    *x *= g;
                }
            }
            let mut dmu = vec![0.0; dim];
            for row in w.chunks(dim) {
                for (a, x) in dmu.iter_mut().zip(row) {
                    *a += x;
                }
            }
            // dΣ = ½ Vᵀ diag(g) V - ½ (Σ g) Σ⁻¹
            let mut dsigma = vec![0.0; dim * dim];
            gemm(dim, m, dim, 0.5, &v, true, &w, false, 0.0, &mut dsigma);
            let gsum: f64 = gk.iter().sum();
            let mut sinv = vec![0.0; dim * dim];
            gemm(dim, dim, dim, 1.0, cinv, true, cinv, false, 0.0, &mut sinv);
            for (d, s) in dsigma.iter_mut().zip(&sinv) {
                *d -= 0.5 * gsum * s;
            }
            // dL = (dΣ + dΣᵀ) L = 2 dΣ L since dΣ is symmetric.
            let l = &f.lower[k];
            let mut dl = vec![0.0; dim * dim];
            gemm(dim, dim, dim, 2.0, &dsigma, false, l, false, 0.0, &mut dl);
            let mut draw = vec![0.0; dim * dim];
            for i in 0..dim {
                for j in 0..i {
                    draw[i * dim + j] = dl[i * dim + j];
                }
                draw[i * dim + i] = dl[i * dim + i] * l[i * dim + i];
            }
            (dmu, draw, need_z.then_some(w))
        });

        let mut gz = need_z.then(|| vec![0.0; m * dim]);
        let mut gmu = vec![0.0; n * dim];
        let mut graw = vec![0.0; n * dim * dim];
        for (k, (dmu, draw, w)) in per_component.into_iter().enumerate() {
            gmu[k * dim..(k + 1) * dim].copy_from_slice(&dmu);
            graw[k * dim * dim..(k + 1) * dim * dim].copy_from_slice(&draw);
            if let (Some(gz), Some(w)) = (gz.as_mut(), w) {
                for (a, x) in gz.iter_mut().zip(&w) {
                    *a -= x;
                }
            }
        }
        Ok(vec![
            gz.map(|d| Tensor::new(vec![m, dim], d)).transpose()?,
            needs[1].then(|| Tensor::new(vec![n, dim], gmu)).transpose()?,
            needs[2].then(|| Tensor::new(vec![n, dim, dim], graw)).transpose()?,
        ])
    }
}

impl Graph {
    /// `[m,ℓ] x ([n,ℓ], [n,ℓ,ℓ]) -> [m,n]` Gaussian log-densities.
    pub fn gaussian_log_density(&mut self, z: Var, means: Var, chol_raw: Var, eps: f64) -> Result<Var> {
        let out = log_density(self.value(z), self.value(means), self.value(chol_raw), eps)?;
        self.custom(&[z, means, chol_raw], out, Box::new(GaussianLogDensityOp { eps }))
    }
}
