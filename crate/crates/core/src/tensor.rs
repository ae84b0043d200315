//! Dense row-major `f32` tensors and the GEMM entry point used by every layer.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::Shape(format!("expected rank-4 tensor, got {:?}", self.shape))),
        }
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape(format!("expected rank-2 tensor, got {:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Copies channels `[start, end)` of an NCHW tensor.
    pub fn channel_slice(&self, start: usize, end: usize) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        if start >= end || end > c {
            return Err(Error::Shape(format!("channel slice {start}..{end} of {c} channels")));
        }
        let hw = h * w;
        let width = end - start;
        let mut out = Vec::with_capacity(n * width * hw);
        for i in 0..n {
            let base = (i * c + start) * hw;
            out.extend_from_slice(&self.data[base..base + width * hw]);
        }
        Ok(Tensor { shape: vec![n, width, h, w], data: out })
    }

    /// Adds `src` into channels `[start, start + src.c)` of `self`.
    pub fn add_channel_slice(&mut self, start: usize, src: &Tensor) -> Result<()> {
        let (n, c, h, w) = self.dims4()?;
        let (sn, sc, sh, sw) = src.dims4()?;
        if sn != n || sh != h || sw != w || start + sc > c {
            return Err(Error::Shape(format!(
                "cannot add {:?} at channel {start} into {:?}",
                src.shape, self.shape
            )));
        }
        let hw = h * w;
        for i in 0..n {
            let dst = &mut self.data[(i * c + start) * hw..(i * c + start + sc) * hw];
            let s = &src.data[i * sc * hw..(i + 1) * sc * hw];
            add_assign(dst, s);
        }
        Ok(())
    }
}

pub fn add_assign(dst: &mut [f32], src: &[f32]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on contiguous row-major buffers.
///
/// `op(a)` is `m x k` and `op(b)` is `k x n`; a transposed operand is stored
/// with the swapped shape.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    n: usize,
    k: usize,
    alpha: f32,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds checked above; strides describe dense row-major storage.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
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
