use super::tensor::Tensor;
use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-9;

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    let [n, m] = a.dims2("cholesky")?;
    if n != m {
        return Err(Error::shape("cholesky", format!("not square: {n}x{m}")));
    }
    let d = a.data();
    for i in 0..n {
        for j in 0..i {
            if (d[i * n + j] - d[j * n + i]).abs() > SYMMETRY_TOL {
                return Err(Error::shape("cholesky", "matrix is not symmetric"));
            }
        }
    }
    let mut l = vec![0.0; n * n];
    cholesky_into(d, n, &mut l)?;
    Tensor::new(vec![n, n], l)
}

/// Raw-slice Cholesky used by the hot paths; reads only the lower triangle.
pub(crate) fn cholesky_into(a: &[f64], n: usize, l: &mut [f64]) -> Result<()> {
    l.fill(0.0);
    for j in 0..n {
        let mut s = a[j * n + j];
        for k in 0..j {
            s -= l[j * n + k] * l[j * n + k];
        }
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::NotPositiveDefinite { row: j, pivot: s });
        }
        let djj = s.sqrt();
        l[j * n + j] = djj;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / djj;
        }
    }
    Ok(())
}

/// Solves `L x = b` in place for lower-triangular `L`.
pub(crate) fn solve_lower_in_place(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Solves `Lᵀ x = b` in place for lower-triangular `L`.
#[cfg(test)]
pub(crate) fn solve_lower_transpose_in_place(l: &[f64], n: usize, b: &mut [f64]) {
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Inverse of a lower-triangular matrix (itself lower-triangular).
pub(crate) fn invert_lower(l: &[f64], n: usize) -> Vec<f64> {
    let mut inv = vec![0.0; n * n];
    let mut col = vec![0.0; n];
    for j in 0..n {
        col.fill(0.0);
        col[j] = 1.0;
        solve_lower_in_place(l, n, &mut col);
        for i in 0..n {
            inv[i * n + j] = col[i];
        }
    }
    inv
}

/// `log |A|` given the Cholesky factor of `A`.
pub(crate) fn log_det_from_cholesky(l: &[f64], n: usize) -> f64 {
    2.0 * (0..n).map(|i| l[i * n + i].ln()).sum::<f64>()
}

/// Solves `L x = b` for a lower-triangular tensor `L`.
pub fn solve_lower(l: &Tensor, b: &[f64]) -> Result<Vec<f64>> {
    let [n, _] = l.dims2("solve_lower")?;
    if b.len() != n {
        return Err(Error::shape("solve_lower", "rhs length"));
    }
    let mut x = b.to_vec();
    solve_lower_in_place(l.data(), n, &mut x);
    Ok(x)
}
