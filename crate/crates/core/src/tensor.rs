//! Dense row-major `f64` tensors and the kernels the rest of the crate builds on.
//!
//! Tensors are immutable values: every kernel returns a new tensor. There is no
//! broadcasting except against scalars, so every shape mismatch is reported with
//! both operand shapes.

use std::fmt;
use std::ops::Range;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("index {index:?} out of bounds for shape {shape:?}")]
    IndexOutOfBounds { index: Vec<usize>, shape: Vec<usize> },
    #[error("length {len} is not divisible by block length {block}")]
    NonDivisibleLength { len: usize, block: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    name: Option<String>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        if let Some(name) = &self.name {
            d.field("name", name);
        }
        d.field("shape", &self.shape);
        if self.data.len() <= 16 {
            d.field("data", &self.data);
        } else {
            d.field("data", &format_args!("[{} values]", self.data.len()));
        }
        d.finish()
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().any(|&e| e == 0) || shape.iter().product::<usize>() != len {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            len,
        });
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape, data.len())?;
        Ok(Self {
            shape,
            data,
            name: None,
        })
    }

    /// Scalar as a rank-1 tensor of one element.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            name: None,
        }
    }

    /// Rank-1 tensor; fails on an empty vector.
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Result<Self> {
        let shape = shape.into();
        let len = shape.iter().product();
        Self::new(shape, vec![value; len])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, 1.0)
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self {
            shape: other.shape.clone(),
            data: vec![0.0; other.data.len()],
            name: None,
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let shape = shape.into();
        let len = shape.iter().product();
        Self::new(shape, (0..len).map(&mut f).collect())
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Shape is fixed; only values may change.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row-major offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() || index.iter().zip(&self.shape).any(|(i, e)| i >= e) {
            return Err(TensorError::IndexOutOfBounds {
                index: index.to_vec(),
                shape: self.shape.clone(),
            });
        }
        Ok(index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &e)| acc * e + i))
    }

    /// Inverse of [`Tensor::offset`].
    pub fn unflatten(&self, offset: usize) -> Result<Vec<usize>> {
        if offset >= self.data.len() {
            return Err(TensorError::IndexOutOfBounds {
                index: vec![offset],
                shape: self.shape.clone(),
            });
        }
        let mut rem = offset;
        let mut index = vec![0; self.shape.len()];
        for (slot, &extent) in index.iter_mut().zip(&self.shape).rev() {
            *slot = rem % extent;
            rem /= extent;
        }
        Ok(index)
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        self.clone().into_reshape(shape)
    }

    pub fn into_reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        check_shape(&shape, self.data.len())?;
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            name: None,
        }
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            name: None,
        })
    }

    /// Elementwise combination of two same-shape tensors; panics on mismatch.
    pub(crate) fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip on mismatched shapes");
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            name: None,
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        self.map(|v| v + s)
    }

    /// In-place `self += other`; used by gradient accumulation.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add_assign",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `[m×k] · [k×n] -> [m×n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &other.data, false, &mut out, 0.0);
        Tensor::new(vec![m, n], out)
    }

    /// Swaps the two axes of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                left: self.shape.clone(),
                right: vec![],
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    fn split_axis(&self, axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= self.rank() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                rank: self.rank(),
            });
        }
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        Ok((outer, self.shape[axis], inner))
    }

    fn reduce(&self, axis: usize, init: f64, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (outer, extent, inner) = self.split_axis(axis)?;
        let mut out = vec![init; outer * inner];
        for o in 0..outer {
            for a in 0..extent {
                let base = (o * extent + a) * inner;
                for i in 0..inner {
                    let slot = &mut out[o * inner + i];
                    *slot = f(*slot, self.data[base + i]);
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Tensor::new(shape, out)
    }

    /// Maximum along `axis`; the axis is removed from the shape.
    pub fn reduce_max(&self, axis: usize) -> Result<Tensor> {
        self.reduce(axis, f64::NEG_INFINITY, f64::max)
    }

    /// Mean along `axis`; the axis is removed from the shape.
    pub fn reduce_mean(&self, axis: usize) -> Result<Tensor> {
        let extent = self.split_axis(axis)?.1 as f64;
        Ok(self.reduce(axis, 0.0, |a, b| a + b)?.scale(1.0 / extent))
    }

    /// Concatenates tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or(TensorError::InvalidShape {
            shape: vec![],
            len: 0,
        })?;
        let (outer, _, inner) = first.split_axis(axis)?;
        let mut total = 0;
        for p in parts {
            let compatible = p.rank() == first.rank()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
            total += p.shape[axis];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let run = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * run..(o + 1) * run]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Tensor::new(shape, data)
    }

    /// Sub-range `range` of `axis`.
    pub fn slice(&self, axis: usize, range: Range<usize>) -> Result<Tensor> {
        let (outer, extent, inner) = self.split_axis(axis)?;
        if range.start >= range.end || range.end > extent {
            return Err(TensorError::IndexOutOfBounds {
                index: vec![range.start, range.end],
                shape: self.shape.clone(),
            });
        }
        let len = range.end - range.start;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + range.start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Tensor::new(shape, data)
    }
}

/// `c = op(a)[m×k] · op(b)[k×n] + beta·c`, row-major; `ta`/`tb` read the
/// operand as its transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe exactly the m×k, k×n and m×n row-major buffers
    // whose lengths are asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Tensor viewed as `[numBlocks, blockLen, channels]`, built from a `[T, C]`
/// tensor by splitting time into contiguous blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTensor {
    num_blocks: usize,
    block_len: usize,
    channels: usize,
    data: Tensor,
}

impl BlockTensor {
    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn get(&self, block: usize, t: usize, c: usize) -> Result<f64> {
        self.data.get(&[block, t, c])
    }

    /// Wraps a `[numBlocks, blockLen, channels]` tensor.
    pub fn from_tensor(data: Tensor) -> Result<Self> {
        match *data.shape() {
            [num_blocks, block_len, channels] => Ok(Self {
                num_blocks,
                block_len,
                channels,
                data,
            }),
            _ => Err(TensorError::InvalidShape {
                shape: data.shape().to_vec(),
                len: data.len(),
            }),
        }
    }
}

/// Splits a `[T, C]` tensor into `T / block_len` blocks. Row-major layout makes
/// this a relabelling of the same buffer: element `(b, t, c)` is `F[b·B + t, c]`.
pub fn reshape_to_blocks(f: &Tensor, block_len: usize) -> Result<BlockTensor> {
    let [t, c] = *f.shape() else {
        return Err(TensorError::InvalidShape {
            shape: f.shape().to_vec(),
            len: f.len(),
        });
    };
    if block_len == 0 || t % block_len != 0 {
        return Err(TensorError::NonDivisibleLength {
            len: t,
            block: block_len,
        });
    }
    BlockTensor::from_tensor(f.reshape(vec![t / block_len, block_len, c])?)
}

/// Inverse of [`reshape_to_blocks`].
pub fn reshape_from_blocks(blocks: &BlockTensor) -> Tensor {
    blocks
        .data
        .reshape(vec![blocks.num_blocks * blocks.block_len, blocks.channels])
        .expect("block tensor extents are positive")
}
