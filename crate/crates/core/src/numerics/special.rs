use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `log Σ exp(v)` with a max shift.
pub fn lse(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || !m.is_finite() {
        return m;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Writes `v - lse(v)` into `out` and returns `lse(v)`.
pub fn log_softmax_into(v: &[f64], out: &mut [f64]) -> f64 {
    let l = lse(v);
    for (o, &x) in out.iter_mut().zip(v) {
        *o = x - l;
    }
    l
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid, the derivative of [`softplus`].
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

/// Log-sum-exp along `axis`; the axis is removed from the output shape.
pub fn log_sum_exp(v: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = v.shape();
    if axis >= shape.len() {
        return Err(Error::shape(
            "log_sum_exp",
            format!("axis {axis} for shape {shape:?}"),
        ));
    }
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(outer * inner);
    let mut buf = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            for (a, b) in buf.iter_mut().enumerate() {
                *b = v.data()[(o * len + a) * inner + i];
            }
            out.push(lse(&buf));
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape.remove(axis);
    let t = Tensor::new(out_shape, out)?;
    t.ensure_finite("log_sum_exp")?;
    Ok(t)
}
