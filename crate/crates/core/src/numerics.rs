//! 1-d discrete Fourier transforms over the leading axis of a tensor, plus
//! the small complex-arithmetic helpers the model is built from.
//!
//! Conventions, fixed once here and relied on everywhere else:
//!   forward:  X[k] = sum_i t[i] * exp(-j*2*pi*k*i/n)   (unnormalized)
//!   inverse:  t[i] = (1/n) * sum_k X[k] * exp(+j*2*pi*k*i/n)
//! with 0-indexed k and i. Power-of-two lengths take an iterative radix-2
//! path; everything else falls back to the direct O(n^2) sum with a
//! precomputed twiddle table. At the sizes this crate works with (token
//! counts of a few hundred) the direct path is plenty.

use crate::tensor::{ComplexTensor, RealTensor, Scalar};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("circular convolution needs equal lengths, got {x} and {h}")]
    ConvolveLengthMismatch { x: usize, h: usize },
    #[error("circular convolution of empty signals")]
    ConvolveEmpty,
}

/// (a + bj)(c + dj) = (ac - bd) + (ad + bc)j
#[inline]
pub fn complex_mul<S: Scalar>(a: (S, S), b: (S, S)) -> (S, S) {
    (a.0 * b.0 - a.1 * b.1, a.0 * b.1 + a.1 * b.0)
}

/// Leading axis length and flattened trailing width of a shape.
fn axis0_view(shape: &[usize]) -> (usize, usize) {
    let n = shape.first().copied().unwrap_or(1);
    let d: usize = shape.iter().skip(1).product();
    (n, d)
}

/// In-place transform of `d` interleaved channels along the leading axis of
/// length `n`. `re` and `im` are row-major n*d planes.
fn transform<S: Scalar>(re: &mut [S], im: &mut [S], n: usize, d: usize, inverse: bool) {
    debug_assert_eq!(re.len(), n * d);
    debug_assert_eq!(im.len(), n * d);
    if n > 1 {
        if n.is_power_of_two() {
            radix2(re, im, n, d, inverse);
        } else {
            naive(re, im, n, d, inverse);
        }
    }
    if inverse {
        let inv_n = S::from_f64(1.0 / n as f64);
        for v in re.iter_mut() {
            *v = *v * inv_n;
        }
        for v in im.iter_mut() {
            *v = *v * inv_n;
        }
    }
}

fn naive<S: Scalar>(re: &mut [S], im: &mut [S], n: usize, d: usize, inverse: bool) {
    // exp(sign * j * 2*pi * t / n) for t in 0..n; angles evaluated in f64.
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut tw_re = Vec::with_capacity(n);
    let mut tw_im = Vec::with_capacity(n);
    for t in 0..n {
        let ang = sign * 2.0 * std::f64::consts::PI * t as f64 / n as f64;
        tw_re.push(S::from_f64(ang.cos()));
        tw_im.push(S::from_f64(ang.sin()));
    }

    let mut out_re = vec![S::zero(); n * d];
    let mut out_im = vec![S::zero(); n * d];
    for k in 0..n {
        for i in 0..n {
            let t = (k * i) % n;
            let (wr, wi) = (tw_re[t], tw_im[t]);
            let src = i * d;
            let dst = k * d;
            for c in 0..d {
                let (ar, ai) = (re[src + c], im[src + c]);
                out_re[dst + c] = out_re[dst + c] + ar * wr - ai * wi;
                out_im[dst + c] = out_im[dst + c] + ar * wi + ai * wr;
            }
        }
    }
    re.copy_from_slice(&out_re);
    im.copy_from_slice(&out_im);
}

fn radix2<S: Scalar>(re: &mut [S], im: &mut [S], n: usize, d: usize, inverse: bool) {
    // Bit-reversal permutation of whole rows.
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = (i.reverse_bits() >> (usize::BITS - bits)) as usize;
        if j > i {
            for c in 0..d {
                re.swap(i * d + c, j * d + c);
                im.swap(i * d + c, j * d + c);
            }
        }
    }

    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        for j in 0..half {
            let ang = sign * 2.0 * std::f64::consts::PI * j as f64 / len as f64;
            let wr = S::from_f64(ang.cos());
            let wi = S::from_f64(ang.sin());
            let mut start = 0;
            while start < n {
                let a = (start + j) * d;
                let b = (start + j + half) * d;
                for c in 0..d {
                    let (br, bi) = (re[b + c], im[b + c]);
                    let tr = br * wr - bi * wi;
                    let ti = br * wi + bi * wr;
                    re[b + c] = re[a + c] - tr;
                    im[b + c] = im[a + c] - ti;
                    re[a + c] = re[a + c] + tr;
                    im[a + c] = im[a + c] + ti;
                }
                start += len;
            }
        }
        len *= 2;
    }
}

/// Forward DFT of a real tensor along its leading axis.
pub fn dft_1d<S: Scalar>(t: &RealTensor<S>) -> ComplexTensor<S> {
    let mut x = ComplexTensor::from_real(t);
    let (n, d) = axis0_view(t.shape());
    let (re, im) = x.planes_mut();
    transform(re, im, n, d, false);
    x
}

/// Forward DFT of a complex tensor along its leading axis.
pub fn dft_complex<S: Scalar>(x: &ComplexTensor<S>) -> ComplexTensor<S> {
    let mut y = x.clone();
    let (n, d) = axis0_view(x.shape());
    let (re, im) = y.planes_mut();
    transform(re, im, n, d, false);
    y
}

/// Inverse DFT along the leading axis, including the 1/n factor.
pub fn idft_1d<S: Scalar>(x: &ComplexTensor<S>) -> ComplexTensor<S> {
    let mut y = x.clone();
    let (n, d) = axis0_view(x.shape());
    let (re, im) = y.planes_mut();
    transform(re, im, n, d, true);
    y
}

/// Real plane of a complex tensor, plus the largest |imaginary| entry that
/// was dropped — a cheap diagnostic for "this should have been real".
pub fn take_real<S: Scalar>(x: &ComplexTensor<S>) -> (RealTensor<S>, S) {
    let residue = x.max_imag_abs();
    let t = RealTensor::new(x.shape().to_vec(), x.re().to_vec())
        .expect("take_real: plane length matches shape by construction");
    (t, residue)
}

/// Circular convolution y[t] = sum_i x[i] * h[(t - i) mod n], computed by the
/// direct sum. The DFT route (transform, multiply, invert) is what the tests
/// compare this against.
pub fn circular_convolve<S: Scalar>(x: &[S], h: &[S]) -> Result<Vec<S>, NumericsError> {
    if x.is_empty() {
        return Err(NumericsError::ConvolveEmpty);
    }
    if x.len() != h.len() {
        return Err(NumericsError::ConvolveLengthMismatch {
            x: x.len(),
            h: h.len(),
        });
    }
    let n = x.len();
    let mut y = vec![S::zero(); n];
    for t in 0..n {
        let mut acc = S::zero();
        for i in 0..n {
            acc = acc + x[i] * h[(t + n - i) % n];
        }
        y[t] = acc;
    }
    Ok(y)
}

/// Relative gap between time-domain energy and (1/n)-scaled frequency-domain
/// energy. Exactly zero in exact arithmetic for every real tensor; in
/// floating point it measures the transform's rounding error.
pub fn parseval_gap<S: Scalar>(t: &RealTensor<S>) -> f64 {
    let (n, _) = axis0_view(t.shape());
    let time = t.energy();
    let freq = dft_1d(t).energy() / n as f64;
    (time - freq).abs() / time.max(1e-300)
}
