//! Independent reference implementations, deliberately written with the
//! dumbest correct algorithms available: a textbook O(n^2) DFT, scalar
//! complex arithmetic, and a dense-Cholesky ridge regression. Library code
//! is validated against these, never the other way around.

use specvox::tensor::RealTensor;

/// Direct-sum DFT/IDFT of `d` channels along the leading axis (length `n`).
/// Forward is unnormalized, inverse carries 1/n.
pub fn naive_dft(
    re: &[f64],
    im: &[f64],
    n: usize,
    d: usize,
    inverse: bool,
) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(re.len(), n * d);
    assert_eq!(im.len(), n * d);
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut out_re = vec![0.0; n * d];
    let mut out_im = vec![0.0; n * d];
    for k in 0..n {
        for i in 0..n {
            let ang = sign * 2.0 * std::f64::consts::PI * (k as f64) * (i as f64) / n as f64;
            let (s, c) = ang.sin_cos();
            for ch in 0..d {
                out_re[k * d + ch] += re[i * d + ch] * c - im[i * d + ch] * s;
                out_im[k * d + ch] += re[i * d + ch] * s + im[i * d + ch] * c;
            }
        }
    }
    if inverse {
        for v in out_re.iter_mut().chain(out_im.iter_mut()) {
            *v /= n as f64;
        }
    }
    (out_re, out_im)
}

/// Scalar complex multiply, kept separate from the library's version.
pub fn cmul(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    (a.0 * b.0 - a.1 * b.1, a.0 * b.1 + a.1 * b.0)
}

/// In-place Cholesky factorization of a symmetric positive-definite matrix
/// (lower triangle), followed by forward/back substitution for `m`
/// right-hand sides stored row-major in `rhs` (n x m). Panics if the matrix
/// is not positive definite.
pub fn cholesky_solve(a: &mut [f64], n: usize, rhs: &mut [f64], m: usize) {
    assert_eq!(a.len(), n * n);
    assert_eq!(rhs.len(), n * m);
    // Factor: a[i][j] (j <= i) becomes L.
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= a[i * n + k] * a[j * n + k];
            }
            if i == j {
                assert!(sum > 0.0, "matrix not positive definite at pivot {i}");
                a[i * n + j] = sum.sqrt();
            } else {
                a[i * n + j] = sum / a[j * n + j];
            }
        }
    }
    // L y = b
    for i in 0..n {
        for k in 0..i {
            let l = a[i * n + k];
            for c in 0..m {
                rhs[i * m + c] -= l * rhs[k * m + c];
            }
        }
        let d = a[i * n + i];
        for c in 0..m {
            rhs[i * m + c] /= d;
        }
    }
    // L^T x = y
    for i in (0..n).rev() {
        let d = a[i * n + i];
        for c in 0..m {
            rhs[i * m + c] /= d;
        }
        for k in 0..i {
            let l = a[i * n + k];
            for c in 0..m {
                rhs[k * m + c] -= l * rhs[i * m + c];
            }
        }
    }
}

/// Kernel ridge regression in the dual form: with K = X X^T over training
/// rows, solve (K + lambda I) alpha = V, then predict X_test X^T alpha.
/// Returns predicted embedding rows for the test inputs.
pub fn ridge_fit_predict(
    x_train: &RealTensor<f32>,
    v_train: &[&[f32]],
    x_test: &RealTensor<f32>,
    lambda: f64,
) -> Vec<Vec<f64>> {
    let n = x_train.rows();
    let p = x_train.cols();
    let k_out = v_train[0].len();
    assert_eq!(v_train.len(), n);
    assert_eq!(x_test.cols(), p);

    let xt: Vec<f64> = x_train.data().iter().map(|&v| v as f64).collect();
    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };

    let mut gram = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let g = dot(&xt[i * p..(i + 1) * p], &xt[j * p..(j + 1) * p]);
            gram[i * n + j] = g;
            gram[j * n + i] = g;
        }
        gram[i * n + i] += lambda;
    }

    let mut alpha = vec![0.0f64; n * k_out];
    for (i, row) in v_train.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            alpha[i * k_out + c] = v as f64;
        }
    }
    cholesky_solve(&mut gram, n, &mut alpha, k_out);

    let mut preds = Vec::with_capacity(x_test.rows());
    for t in 0..x_test.rows() {
        let row: Vec<f64> = x_test.row(t).iter().map(|&v| v as f64).collect();
        let mut pred = vec![0.0f64; k_out];
        for i in 0..n {
            let k_ti = dot(&row, &xt[i * p..(i + 1) * p]);
            if k_ti != 0.0 {
                for c in 0..k_out {
                    pred[c] += k_ti * alpha[i * k_out + c];
                }
            }
        }
        preds.push(pred);
    }
    preds
}

/// Central finite difference of a scalar function at x, step h.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}
