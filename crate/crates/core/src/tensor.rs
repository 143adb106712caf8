//! Dense row-major tensors over a real scalar type, plus a split-complex
//! variant that stores real and imaginary parts as separate planes.

use num_traits::Float;
use thiserror::Error;

/// Element type codes used by the on-disk tensor container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Floating-point scalar the numerics are generic over. Models train in
/// `f32`; oracles and gradient checks run the same code in `f64`.
pub trait Scalar:
    Float + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    const DTYPE: Dtype;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Little-endian encoding, matching the on-disk container.
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}

/// Shorthand for lowering an `f64` literal into the working scalar type.
pub fn s<S: Scalar>(x: f64) -> S {
    S::from_f64(x)
}

#[derive(Debug, Error, PartialEq)]
pub enum ShapeError {
    #[error("shape {shape:?} implies {expected} elements, got {actual}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape {0:?} has a zero extent")]
    ZeroExtent(Vec<usize>),
    #[error("shapes {0:?} and {1:?} differ")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
}

fn checked_len(shape: &[usize]) -> Result<usize, ShapeError> {
    if shape.iter().any(|&e| e == 0) {
        return Err(ShapeError::ZeroExtent(shape.to_vec()));
    }
    let mut len = 1usize;
    for &e in shape {
        len = len
            .checked_mul(e)
            .ok_or_else(|| ShapeError::ZeroExtent(shape.to_vec()))?;
    }
    Ok(len)
}

/// Row-major real tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct RealTensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> RealTensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self, ShapeError> {
        let expected = checked_len(&shape)?;
        if data.len() != expected {
            return Err(ShapeError::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = checked_len(&shape).expect("zeros: invalid shape");
        Self {
            shape,
            data: vec![S::zero(); len],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> S) -> Self {
        let len = checked_len(&shape).expect("from_fn: invalid shape");
        Self {
            shape,
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Number of rows / row width for 2-d tensors.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows: tensor is not 2-d");
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols: tensor is not 2-d");
        self.shape[1]
    }

    pub fn row(&self, r: usize) -> &[S] {
        let w = self.cols();
        &self.data[r * w..(r + 1) * w]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        let w = self.cols();
        &mut self.data[r * w..(r + 1) * w]
    }

    pub fn validate_finite(&self) -> Result<(), ShapeError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(ShapeError::NonFinite(i)),
            None => Ok(()),
        }
    }

    pub fn map<T: Scalar>(&self, f: impl Fn(S) -> T) -> RealTensor<T> {
        RealTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise sum of squares, accumulated in f64.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<(), ShapeError> {
        if self.shape != other.shape {
            return Err(ShapeError::ShapeMismatch(
                self.shape.clone(),
                other.shape.clone(),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
        Ok(())
    }
}

/// Split-storage complex tensor: two row-major planes of identical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexTensor<S> {
    shape: Vec<usize>,
    re: Vec<S>,
    im: Vec<S>,
}

impl<S: Scalar> ComplexTensor<S> {
    pub fn new(shape: Vec<usize>, re: Vec<S>, im: Vec<S>) -> Result<Self, ShapeError> {
        let expected = checked_len(&shape)?;
        if re.len() != expected {
            return Err(ShapeError::LengthMismatch {
                shape,
                expected,
                actual: re.len(),
            });
        }
        if im.len() != expected {
            return Err(ShapeError::LengthMismatch {
                shape,
                expected,
                actual: im.len(),
            });
        }
        Ok(Self { shape, re, im })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = checked_len(&shape).expect("zeros: invalid shape");
        Self {
            shape,
            re: vec![S::zero(); len],
            im: vec![S::zero(); len],
        }
    }

    pub fn from_real(t: &RealTensor<S>) -> Self {
        Self {
            shape: t.shape.clone(),
            re: t.data.clone(),
            im: vec![S::zero(); t.data.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn re(&self) -> &[S] {
        &self.re
    }

    pub fn im(&self) -> &[S] {
        &self.im
    }

    pub fn re_mut(&mut self) -> &mut [S] {
        &mut self.re
    }

    pub fn im_mut(&mut self) -> &mut [S] {
        &mut self.im
    }

    pub fn planes_mut(&mut self) -> (&mut [S], &mut [S]) {
        (&mut self.re, &mut self.im)
    }

    pub fn into_planes(self) -> (Vec<S>, Vec<S>) {
        (self.re, self.im)
    }

    /// Largest |imaginary part| over all entries.
    pub fn max_imag_abs(&self) -> S {
        self.im
            .iter()
            .fold(S::zero(), |acc, &v| acc.max(v.abs()))
    }

    /// Sum of squared magnitudes, accumulated in f64.
    pub fn energy(&self) -> f64 {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(a, b)| a.as_f64() * a.as_f64() + b.as_f64() * b.as_f64())
            .sum()
    }

    pub fn map<T: Scalar>(&self, f: impl Fn(S) -> T) -> ComplexTensor<T> {
        ComplexTensor {
            shape: self.shape.clone(),
            re: self.re.iter().map(|&v| f(v)).collect(),
            im: self.im.iter().map(|&v| f(v)).collect(),
        }
    }
}
