//! Dense row-major matrices in 32- or 64-bit precision.
//!
//! Every operation runs natively in the precision of its inputs; mixing
//! precisions is an error. Products use a blocked kernel whose per-element
//! reduction is a single dot product accumulated in index order, so results
//! match a naive triple loop bit for bit and do not depend on thread count.

mod kernel;
mod lstsq;
mod svd;

use std::fmt::Debug;

use crate::error::{Error, Result};

pub use lstsq::{lstsq, LstsqSolution, SolveSide};
pub use svd::singular_values;

pub(crate) use kernel::Addend;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    P32,
    P64,
}

impl Precision {
    pub fn element_size(self) -> usize {
        match self {
            Precision::P32 => 4,
            Precision::P64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::P32 => "p32",
            Precision::P64 => "p64",
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "p32" | "f32" => Ok(Precision::P32),
            "p64" | "f64" => Ok(Precision::P64),
            other => Err(Error::arg(format!("unknown precision '{other}'"))),
        }
    }
}

/// Backing storage of a [`Tensor2D`].
#[derive(Debug, Clone, PartialEq)]
pub enum Data {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

/// Scalar types a [`Tensor2D`] can hold.
pub trait Element:
    num_traits::Float + Default + Debug + Send + Sync + std::iter::Sum + 'static
{
    const PRECISION: Precision;

    fn into_data(v: Vec<Self>) -> Data;
    fn as_slice(data: &Data) -> Option<&[Self]>;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    const PRECISION: Precision = Precision::P32;

    fn into_data(v: Vec<Self>) -> Data {
        Data::F32(v)
    }
    fn as_slice(data: &Data) -> Option<&[Self]> {
        match data {
            Data::F32(v) => Some(v),
            Data::F64(_) => None,
        }
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const PRECISION: Precision = Precision::P64;

    fn into_data(v: Vec<Self>) -> Data {
        Data::F64(v)
    }
    fn as_slice(data: &Data) -> Option<&[Self]> {
        match data {
            Data::F64(v) => Some(v),
            Data::F32(_) => None,
        }
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Applies a generic body to one tensor's storage, rewrapping a `Vec<T>` result.
macro_rules! map1 {
    ($t:expr, |$x:ident| $body:expr) => {
        match &$t.data {
            Data::F32($x) => Data::F32($body),
            Data::F64($x) => Data::F64($body),
        }
    };
}

/// Same as `map1!` for two tensors that must share a precision.
macro_rules! map2 {
    ($op:expr, $a:expr, $b:expr, |$x:ident, $y:ident| $body:expr) => {
        match (&$a.data, &$b.data) {
            (Data::F32($x), Data::F32($y)) => Data::F32($body),
            (Data::F64($x), Data::F64($y)) => Data::F64($body),
            _ => {
                return Err(Error::Precision {
                    op: $op,
                    left: $a.precision(),
                    right: $b.precision(),
                })
            }
        }
    };
}


/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Data,
}

impl Tensor2D {
    fn check_len(rows: usize, cols: usize, len: usize) -> Result<()> {
        let expected = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::arg(format!("shape {rows}x{cols} overflows")))?;
        if expected != len {
            return Err(Error::dim(
                "from_vec",
                format!("{rows}x{cols} needs {expected} elements, got {len}"),
            ));
        }
        Ok(())
    }

    fn check_finite<T: Element>(v: &[T]) -> Result<()> {
        match v.iter().position(|x| !x.is_finite()) {
            Some(index) => Err(Error::NonFinite { index }),
            None => Ok(()),
        }
    }

    /// Builds a tensor from row-major values; rejects wrong lengths and NaN/Inf.
    pub fn from_vec<T: Element>(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::check_len(rows, cols, data.len())?;
        Self::check_finite(&data)?;
        Ok(Self {
            rows,
            cols,
            data: T::into_data(data),
        })
    }

    pub fn from_data(rows: usize, cols: usize, data: Data) -> Result<Self> {
        match data {
            Data::F32(v) => Self::from_vec(rows, cols, v),
            Data::F64(v) => Self::from_vec(rows, cols, v),
        }
    }

    /// P64 tensor from nested rows, mostly for tests and small fixtures.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("from_rows", "ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_vec(rows.len(), cols, data)
    }

    pub(crate) fn from_parts_unchecked(rows: usize, cols: usize, data: Data) -> Self {
        debug_assert_eq!(
            match &data {
                Data::F32(v) => v.len(),
                Data::F64(v) => v.len(),
            },
            rows * cols
        );
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize, precision: Precision) -> Self {
        let n = rows * cols;
        let data = match precision {
            Precision::P32 => Data::F32(vec![0.0; n]),
            Precision::P64 => Data::F64(vec![0.0; n]),
        };
        Self { rows, cols, data }
    }

    pub fn identity(n: usize, precision: Precision) -> Self {
        let mut out = Self::zeros(n, n, precision);
        match &mut out.data {
            Data::F32(v) => (0..n).for_each(|i| v[i * n + i] = 1.0),
            Data::F64(v) => (0..n).for_each(|i| v[i * n + i] = 1.0),
        }
        out
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn precision(&self) -> Precision {
        match self.data {
            Data::F32(_) => Precision::P32,
            Data::F64(_) => Precision::P64,
        }
    }

    pub fn data(&self) -> &Data {
        &self.data
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        f32::as_slice(&self.data)
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        f64::as_slice(&self.data)
    }

    pub(crate) fn values<T: Element>(&self) -> &[T] {
        T::as_slice(&self.data).expect("precision checked by caller")
    }

    /// Entries widened to f64, row-major.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            Data::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Data::F64(v) => v.clone(),
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        assert!(row < self.rows && col < self.cols, "index out of bounds");
        let i = row * self.cols + col;
        match &self.data {
            Data::F32(v) => v[i] as f64,
            Data::F64(v) => v[i],
        }
    }

    /// Converts to another precision (rounding to nearest when narrowing).
    pub fn cast(&self, precision: Precision) -> Self {
        if precision == self.precision() {
            return self.clone();
        }
        let data = match &self.data {
            Data::F32(v) => Data::F64(v.iter().map(|&x| x as f64).collect()),
            Data::F64(v) => Data::F32(v.iter().map(|&x| x as f32).collect()),
        };
        Self {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    fn same_precision(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.precision() != other.precision() {
            return Err(Error::Precision {
                op,
                left: self.precision(),
                right: other.precision(),
            });
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::dim(
                "matmul",
                format!("{}x{} times {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let data = map2!("matmul", self, other, |a, b| kernel::gemm(
            m, k, n, a, k, 0, b, None
        ));
        Ok(Self::from_parts_unchecked(m, n, data))
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows, self.cols);
        let data = map1!(self, |v| {
            let mut out = Vec::with_capacity(r * c);
            for j in 0..c {
                out.extend((0..r).map(|i| v[i * c + j]));
            }
            out
        });
        Self::from_parts_unchecked(c, r, data)
    }

    /// Copies columns `[from, to)`.
    pub fn slice_cols(&self, from: usize, to: usize) -> Result<Self> {
        if from >= to || to > self.cols {
            return Err(Error::Range {
                op: "slice_cols",
                from,
                to,
                extent: self.cols,
            });
        }
        let (r, c, w) = (self.rows, self.cols, to - from);
        let data = map1!(self, |v| {
            let mut out = Vec::with_capacity(r * w);
            for i in 0..r {
                out.extend_from_slice(&v[i * c + from..i * c + to]);
            }
            out
        });
        Ok(Self::from_parts_unchecked(r, w, data))
    }

    /// Copies rows `[from, to)`.
    pub fn slice_rows(&self, from: usize, to: usize) -> Result<Self> {
        if from >= to || to > self.rows {
            return Err(Error::Range {
                op: "slice_rows",
                from,
                to,
                extent: self.rows,
            });
        }
        let c = self.cols;
        let data = map1!(self, |v| v[from * c..to * c].to_vec());
        Ok(Self::from_parts_unchecked(to - from, c, data))
    }

    pub fn concat_cols(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::arg("concat_cols of an empty list"))?;
        let rows = first.rows;
        for p in parts {
            first.same_precision(p, "concat_cols")?;
            if p.rows != rows {
                return Err(Error::dim(
                    "concat_cols",
                    format!("row counts {} and {}", rows, p.rows),
                ));
            }
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        fn join<T: Element>(parts: &[Tensor2D], rows: usize, cols: usize) -> Vec<T> {
            let mut out = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                for p in parts {
                    out.extend_from_slice(&p.values::<T>()[i * p.cols..(i + 1) * p.cols]);
                }
            }
            out
        }
        let data = match first.precision() {
            Precision::P32 => Data::F32(join::<f32>(parts, rows, cols)),
            Precision::P64 => Data::F64(join::<f64>(parts, rows, cols)),
        };
        Ok(Self::from_parts_unchecked(rows, cols, data))
    }

    pub fn concat_rows(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::arg("concat_rows of an empty list"))?;
        let cols = first.cols;
        for p in parts {
            first.same_precision(p, "concat_rows")?;
            if p.cols != cols {
                return Err(Error::dim(
                    "concat_rows",
                    format!("column counts {} and {}", cols, p.cols),
                ));
            }
        }
        let rows: usize = parts.iter().map(|p| p.rows).sum();
        fn join<T: Element>(parts: &[Tensor2D]) -> Vec<T> {
            parts
                .iter()
                .flat_map(|p| p.values::<T>().iter().copied())
                .collect()
        }
        let data = match first.precision() {
            Precision::P32 => Data::F32(join::<f32>(parts)),
            Precision::P64 => Data::F64(join::<f64>(parts)),
        };
        Ok(Self::from_parts_unchecked(rows, cols, data))
    }

    /// Tiles the matrix `times` times horizontally.
    pub fn repeat_cols(&self, times: usize) -> Result<Self> {
        if times == 0 {
            return Err(Error::arg("repeat_cols needs times >= 1"));
        }
        let (r, c) = (self.rows, self.cols);
        let data = map1!(self, |v| {
            let mut out = Vec::with_capacity(r * c * times);
            for i in 0..r {
                let row = &v[i * c..(i + 1) * c];
                for _ in 0..times {
                    out.extend_from_slice(row);
                }
            }
            out
        });
        Ok(Self::from_parts_unchecked(r, c * times, data))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                "add",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let data = map2!("add", self, other, |a, b| a
            .iter()
            .zip(b.iter())
            .map(|(&x, &y)| x + y)
            .collect());
        Ok(Self::from_parts_unchecked(self.rows, self.cols, data))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                "sub",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let data = map2!("sub", self, other, |a, b| a
            .iter()
            .zip(b.iter())
            .map(|(&x, &y)| x - y)
            .collect());
        Ok(Self::from_parts_unchecked(self.rows, self.cols, data))
    }

    /// Multiplies every entry by `factor` (rounded to the tensor's precision).
    pub fn scale(&self, factor: f64) -> Self {
        fn go<T: Element>(v: &[T], f: f64) -> Vec<T> {
            let f = T::from_f64(f);
            v.iter().map(|&x| x * f).collect()
        }
        let data = map1!(self, |v| go(v, factor));
        Self::from_parts_unchecked(self.rows, self.cols, data)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Self {
        fn go<T: Element>(v: &[T], cols: usize) -> Vec<T> {
            let mut out = v.to_vec();
            if cols == 0 {
                return out;
            }
            for row in out.chunks_exact_mut(cols) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    sum = sum + *x;
                }
                for x in row.iter_mut() {
                    *x = *x / sum;
                }
            }
            out
        }
        let data = map1!(self, |v| go(v, self.cols));
        Self::from_parts_unchecked(self.rows, self.cols, data)
    }

    /// Frobenius norm, accumulated in f64 whatever the storage precision.
    pub fn frobenius_norm(&self) -> f64 {
        match &self.data {
            Data::F32(v) => v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt(),
            Data::F64(v) => v.iter().map(|&x| x * x).sum::<f64>().sqrt(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        match &self.data {
            Data::F32(v) => v.iter().fold(0.0f64, |m, &x| m.max((x as f64).abs())),
            Data::F64(v) => v.iter().fold(0.0f64, |m, &x| m.max(x.abs())),
        }
    }

    /// Largest absolute elementwise difference, computed in f64.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                "max_abs_diff",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let a = self.to_f64_vec();
        let b = other.to_f64_vec();
        Ok(a.iter().zip(&b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())))
    }

    /// `max |self - reference| / max |reference|`; zero when both vanish.
    pub fn max_rel_diff(&self, reference: &Self) -> Result<f64> {
        let diff = self.max_abs_diff(reference)?;
        let scale = reference.max_abs();
        Ok(if scale == 0.0 {
            if diff == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            diff / scale
        })
    }

    /// Bitwise equality of shape, precision and every entry.
    pub fn bit_eq(&self, other: &Self) -> bool {
        if self.shape() != other.shape() {
            return false;
        }
        match (&self.data, &other.data) {
            (Data::F32(a), Data::F32(b)) => a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            (Data::F64(a), Data::F64(b)) => a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            _ => false,
        }
    }
}

/// `x[:, rep_off..rep_off+d_h]` tiled `n` times plus `x[:, mul_off..mul_off+k] · c`,
/// written in one pass over the output.
pub(crate) fn fused_repeat_matmul(
    x: &Tensor2D,
    c: &Tensor2D,
    mul_off: usize,
    rep_off: usize,
    rep_width: usize,
) -> Result<Tensor2D> {
    let (l, d) = x.shape();
    let (k, n) = c.shape();
    debug_assert!(mul_off + k <= d && rep_off + rep_width <= d);
    let data = map2!("fused_kv_proj", x, c, |xv, cv| kernel::gemm(
        l,
        k,
        n,
        xv,
        d,
        mul_off,
        cv,
        Some(Addend {
            src: xv,
            ld: d,
            offset: rep_off,
            width: rep_width,
        })
    ));
    Ok(Tensor2D::from_parts_unchecked(l, n, data))
}
