//! Flat dense containers for parameters and activations.
//!
//! `Tensor` is the parameter/checkpoint container (arbitrary rank, row-major
//! f64). `FeatureMap` is the rank-3 activation grid (height x width x
//! channels, channel-last) used for images, view features and BEV states.

use crate::{Error, Result};

/// Row-major dense f64 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor dims {:?} need {} elements, got {}",
                dims,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![v],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn zeros_like(&self) -> Self {
        Tensor::zeros(&self.dims)
    }

    /// Index a rank-2 tensor.
    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.dims.len(), 2);
        self.data[i * self.dims[1] + j]
    }

    /// Row slice of a rank-2 tensor.
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.dims.len(), 2);
        let w = self.dims[1];
        &self.data[i * w..(i + 1) * w]
    }

    /// Contiguous slab `[i, ..]` of a rank-3 tensor, viewed as a
    /// rows*cols slice.
    #[inline]
    pub fn slab3(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.dims.len(), 3);
        let n = self.dims[1] * self.dims[2];
        &self.data[i * n..(i + 1) * n]
    }

    #[inline]
    pub fn slab3_mut(&mut self, i: usize) -> &mut [f64] {
        debug_assert_eq!(self.dims.len(), 3);
        let n = self.dims[1] * self.dims[2];
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A height x width x channels activation grid, channel-last so that the
/// per-position channel vector is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        FeatureMap {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::ShapeMismatch(format!(
                "feature map {}x{}x{} needs {} elements, got {}",
                h,
                w,
                c,
                h * w * c,
                data.len()
            )));
        }
        Ok(FeatureMap { h, w, c, data })
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.h == other.h && self.w == other.w && self.c == other.c
    }

    /// Channel vector at integer position (row y, column x).
    #[inline]
    pub fn at(&self, y: usize, x: usize) -> &[f64] {
        let base = (y * self.w + x) * self.c;
        &self.data[base..base + self.c]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let base = (y * self.w + x) * self.c;
        &mut self.data[base..base + self.c]
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f64) {
        self.data[(y * self.w + x) * self.c + ch] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn zeros_like(&self) -> Self {
        FeatureMap::zeros(self.h, self.w, self.c)
    }

    pub fn scale(&mut self, a: f64) {
        self.data.iter_mut().for_each(|x| *x *= a);
    }

    pub fn add_assign(&mut self, other: &FeatureMap) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            dims: vec![self.h, self.w, self.c],
            data: self.data.clone(),
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.dims().len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected rank-3 tensor for feature map, got dims {:?}",
                t.dims()
            )));
        }
        FeatureMap::from_vec(t.dims()[0], t.dims()[1], t.dims()[2], t.data().to_vec())
    }
}

/// y = W x + b for a rank-2 weight `[out, in]`.
pub fn affine_apply(w: &Tensor, b: &Tensor, x: &[f64], out: &mut [f64]) {
    let (n_out, n_in) = (w.dims()[0], w.dims()[1]);
    debug_assert_eq!(x.len(), n_in);
    debug_assert_eq!(out.len(), n_out);
    debug_assert_eq!(b.len(), n_out);
    for o in 0..n_out {
        let row = w.row(o);
        let mut acc = b.data()[o];
        for i in 0..n_in {
            acc += row[i] * x[i];
        }
        out[o] = acc;
    }
}

/// Fill a map row by row with `f(y, x, cell)`, splitting rows across
/// `threads` OS threads. Each cell is written exactly once, so the result
/// is bitwise identical for any thread count.
pub fn par_fill_rows<F>(out: &mut FeatureMap, threads: usize, f: F)
where
    F: Fn(usize, usize, &mut [f64]) + Sync,
{
    let (w, c) = (out.w, out.c);
    let row_len = w * c;
    let run_rows = |y0: usize, rows: &mut [f64]| {
        for (dy, row) in rows.chunks_mut(row_len).enumerate() {
            for (x, cell) in row.chunks_mut(c).enumerate() {
                f(y0 + dy, x, cell);
            }
        }
    };
    if threads <= 1 || out.h <= 1 {
        run_rows(0, out.data_mut());
        return;
    }
    let per = out.h.div_ceil(threads.min(out.h));
    std::thread::scope(|s| {
        for (i, chunk) in out.data_mut().chunks_mut(per * row_len).enumerate() {
            let run_rows = &run_rows;
            s.spawn(move || run_rows(i * per, chunk));
        }
    });
}

/// Accumulates gradients of `affine_apply` given upstream dy.
/// dw += dy ⊗ x, db += dy, dx += Wᵀ dy.
pub fn affine_backward(
    w: &Tensor,
    x: &[f64],
    dy: &[f64],
    dw: &mut Tensor,
    db: &mut Tensor,
    dx: &mut [f64],
) {
    let (n_out, n_in) = (w.dims()[0], w.dims()[1]);
    for o in 0..n_out {
        let g = dy[o];
        if g == 0.0 {
            continue;
        }
        db.data_mut()[o] += g;
        let dw_row = &mut dw.data_mut()[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            dw_row[i] += g * x[i];
        }
        let w_row = w.row(o);
        for i in 0..n_in {
            dx[i] += w_row[i] * g;
        }
    }
}
