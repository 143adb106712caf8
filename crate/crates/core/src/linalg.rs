//! Small dense building blocks shared by the backbone and projector stacks:
//! row-major matmuls (forward and the two backward orientations), per-token
//! layer normalization with its exact gradient, and the leaky-ramp
//! activation. Nothing here allocates more than its output.

use crate::tensor::{s, RealTensor, Scalar};

/// y[n,m] = x[n,k] . w[k,m]
pub(crate) fn matmul<S: Scalar>(x: &RealTensor<S>, w: &RealTensor<S>) -> RealTensor<S> {
    let (n, k) = (x.rows(), x.cols());
    let (k2, m) = (w.rows(), w.cols());
    assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
    let mut out = RealTensor::zeros(vec![n, m]);
    for i in 0..n {
        let xrow = x.row(i);
        let orow = out.row_mut(i);
        for (p, &xv) in xrow.iter().enumerate() {
            if xv == S::zero() {
                continue;
            }
            let wrow = w.row(p);
            for c in 0..m {
                orow[c] = orow[c] + xv * wrow[c];
            }
        }
    }
    out
}

/// y[n,k] = x[n,m] . w[k,m]^T  (gradient w.r.t. the input of a linear layer)
pub(crate) fn matmul_nt<S: Scalar>(x: &RealTensor<S>, w: &RealTensor<S>) -> RealTensor<S> {
    let (n, m) = (x.rows(), x.cols());
    let (k, m2) = (w.rows(), w.cols());
    assert_eq!(m, m2, "matmul_nt: inner dims {m} vs {m2}");
    let mut out = RealTensor::zeros(vec![n, k]);
    for i in 0..n {
        let xrow = x.row(i);
        let orow = out.row_mut(i);
        for p in 0..k {
            let wrow = w.row(p);
            let mut acc = S::zero();
            for c in 0..m {
                acc = acc + xrow[c] * wrow[c];
            }
            orow[p] = acc;
        }
    }
    out
}

/// y[k,m] = x[n,k]^T . g[n,m]  (gradient w.r.t. the weights of a linear layer)
pub(crate) fn matmul_tn<S: Scalar>(x: &RealTensor<S>, g: &RealTensor<S>) -> RealTensor<S> {
    let (n, k) = (x.rows(), x.cols());
    let (n2, m) = (g.rows(), g.cols());
    assert_eq!(n, n2, "matmul_tn: outer dims {n} vs {n2}");
    let mut out = RealTensor::zeros(vec![k, m]);
    for i in 0..n {
        let xrow = x.row(i);
        let grow = g.row(i);
        for (p, &xv) in xrow.iter().enumerate() {
            if xv == S::zero() {
                continue;
            }
            let orow = out.row_mut(p);
            for c in 0..m {
                orow[c] = orow[c] + xv * grow[c];
            }
        }
    }
    out
}

pub(crate) fn add_row_bias<S: Scalar>(y: &mut RealTensor<S>, b: &[S]) {
    let m = y.cols();
    assert_eq!(m, b.len(), "bias width mismatch");
    for r in 0..y.rows() {
        let row = y.row_mut(r);
        for c in 0..m {
            row[c] = row[c] + b[c];
        }
    }
}

/// Column sums (gradient w.r.t. a row-broadcast bias).
pub(crate) fn col_sums<S: Scalar>(y: &RealTensor<S>) -> Vec<S> {
    let m = y.cols();
    let mut out = vec![S::zero(); m];
    for r in 0..y.rows() {
        for (c, &v) in y.row(r).iter().enumerate() {
            out[c] = out[c] + v;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Layer normalization (per row, over channels)
// ---------------------------------------------------------------------------

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) struct LnCache<S> {
    /// Normalized rows (x - mean) * inv_std, before gain/bias.
    pub normed: RealTensor<S>,
    pub inv_std: Vec<S>,
}

pub(crate) fn layer_norm_fwd<S: Scalar>(
    x: &RealTensor<S>,
    gain: &[S],
    bias: &[S],
) -> (RealTensor<S>, LnCache<S>) {
    let (n, d) = (x.rows(), x.cols());
    assert_eq!(gain.len(), d);
    assert_eq!(bias.len(), d);
    let mut out = RealTensor::zeros(vec![n, d]);
    let mut normed = RealTensor::zeros(vec![n, d]);
    let mut inv_std = vec![S::zero(); n];
    let inv_d = s::<S>(1.0 / d as f64);
    for r in 0..n {
        let row = x.row(r);
        let mut mean = S::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean * inv_d;
        let mut var = S::zero();
        for &v in row {
            let c = v - mean;
            var = var + c * c;
        }
        var = var * inv_d;
        let istd = S::one() / (var + s::<S>(LN_EPS)).sqrt();
        inv_std[r] = istd;
        let nrow = normed.row_mut(r);
        for (c, &v) in row.iter().enumerate() {
            nrow[c] = (v - mean) * istd;
        }
        let orow = out.row_mut(r);
        for c in 0..d {
            orow[c] = normed.row(r)[c] * gain[c] + bias[c];
        }
    }
    (out, LnCache { normed, inv_std })
}

/// Exact gradient through layer_norm_fwd. Returns (g_input, g_gain, g_bias).
pub(crate) fn layer_norm_bwd<S: Scalar>(
    cache: &LnCache<S>,
    gain: &[S],
    gy: &RealTensor<S>,
) -> (RealTensor<S>, Vec<S>, Vec<S>) {
    let (n, d) = (gy.rows(), gy.cols());
    let inv_d = s::<S>(1.0 / d as f64);
    let mut gx = RealTensor::zeros(vec![n, d]);
    let mut g_gain = vec![S::zero(); d];
    let mut g_bias = vec![S::zero(); d];
    for r in 0..n {
        let grow = gy.row(r);
        let nrow = cache.normed.row(r);
        // dy = gy * gain; gx = istd * (dy - mean(dy) - normed * mean(dy*normed))
        let mut mean_dy = S::zero();
        let mut mean_dyn = S::zero();
        for c in 0..d {
            let dy = grow[c] * gain[c];
            mean_dy = mean_dy + dy;
            mean_dyn = mean_dyn + dy * nrow[c];
            g_gain[c] = g_gain[c] + grow[c] * nrow[c];
            g_bias[c] = g_bias[c] + grow[c];
        }
        mean_dy = mean_dy * inv_d;
        mean_dyn = mean_dyn * inv_d;
        let istd = cache.inv_std[r];
        let gxrow = gx.row_mut(r);
        for c in 0..d {
            let dy = grow[c] * gain[c];
            gxrow[c] = istd * (dy - mean_dy - nrow[c] * mean_dyn);
        }
    }
    (gx, g_gain, g_bias)
}

// ---------------------------------------------------------------------------
// Leaky-ramp activation
// ---------------------------------------------------------------------------

#[inline]
pub(crate) fn leaky<S: Scalar>(x: S, slope: S) -> S {
    if x >= S::zero() {
        x
    } else {
        slope * x
    }
}

#[inline]
pub(crate) fn leaky_grad<S: Scalar>(x: S, slope: S) -> S {
    if x >= S::zero() {
        S::one()
    } else {
        slope
    }
}
