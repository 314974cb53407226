//! Dense row-major `f64` tensors and the raw kernels the graph builds on.

use crate::error::{Error, Result};
use crate::exec;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(Error::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(&mut f).collect();
        Tensor { shape, data }
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[offset(&self.shape, index)]
    }

    pub fn reshaped(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn offset(shape: &[usize], index: &[usize]) -> usize {
    assert_eq!(shape.len(), index.len(), "index rank mismatch");
    let mut off = 0;
    for (d, (&n, &i)) in shape.iter().zip(index).enumerate() {
        assert!(i < n, "index {i} out of bounds for dim {d} of size {n}");
        off = off * n + i;
    }
    off
}

/// Splits `shape` around `axis` into (outer, axis_len, inner).
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let err = || Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() != b.len() {
        return Err(err());
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(err()),
        })
        .collect()
}

/// Walks every output index of a broadcast binary op, handing `f` the flat
/// offsets into the output and both operands.
pub fn broadcast_walk(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    if a == out && b == out {
        for i in 0..numel(out) {
            f(i, i, i);
        }
        return;
    }
    let sa = strides(a);
    let sb = strides(b);
    let total = numel(out);
    if total == 0 {
        return;
    }
    // Drop unit axes and merge neighbours that both operands traverse
    // contiguously, so the inner loop runs as long as possible.
    let mut dims: Vec<(usize, usize, usize)> = Vec::with_capacity(rank);
    for d in 0..rank {
        if out[d] == 1 {
            continue;
        }
        let step = |s: &[usize], x: &[usize]| if x[d] == 1 { 0 } else { s[d] };
        let (n, ta, tb) = (out[d], step(&sa, a), step(&sb, b));
        match dims.last_mut() {
            Some(prev) if prev.1 == ta * n && prev.2 == tb * n => {
                *prev = (prev.0 * n, ta, tb);
            }
            _ => dims.push((n, ta, tb)),
        }
    }
    if dims.is_empty() {
        f(0, 0, 0);
        return;
    }
    let rank = dims.len();
    let out: Vec<usize> = dims.iter().map(|d| d.0).collect();
    let step_a: Vec<usize> = dims.iter().map(|d| d.1).collect();
    let step_b: Vec<usize> = dims.iter().map(|d| d.2).collect();
    // Tight loop over the last axis; the carry walk runs once per row.
    let last = rank - 1;
    let (inner, ia_step, ib_step) = (out[last], step_a[last], step_b[last]);
    let mut idx = vec![0usize; last];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    while o < total {
        let (mut xa, mut xb) = (oa, ob);
        for k in 0..inner {
            f(o + k, xa, xb);
            xa += ia_step;
            xb += ib_step;
        }
        o += inner;
        let mut d = last;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            oa += step_a[d];
            ob += step_b[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= step_a[d] * out[d];
            ob -= step_b[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Rows per parallel block in the matmul kernels.
const BLOCK_ROWS: usize = 64;

/// Below this many multiply-adds a plain loop beats packing for dgemm.
const SMALL_GEMM: usize = 1 << 13;

/// `c[rows×n] = a·b` where `a` and `b` are given by pointer and strides.
///
/// # Safety
/// The strided views must lie inside live allocations of the right size.
#[allow(clippy::too_many_arguments)]
unsafe fn gemm(
    rows: usize,
    k: usize,
    n: usize,
    a: *const f64,
    rsa: isize,
    csa: isize,
    b: *const f64,
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), rows * n);
    if rows * k * n < SMALL_GEMM {
        // SAFETY: every offset below addresses an element of the views.
        unsafe {
            for i in 0..rows {
                let row = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = *a.offset(i as isize * rsa + p as isize * csa);
                    let bp = b.offset(p as isize * rsb);
                    for (j, cv) in row.iter_mut().enumerate() {
                        *cv += av * *bp.offset(j as isize * csb);
                    }
                }
            }
        }
        return;
    }
    // SAFETY: caller guarantees the views; `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            rows,
            k,
            n,
            1.0,
            a,
            rsa,
            csa,
            b,
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[m×n] = a[m×k] · b[k×n]`.
pub fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert!(a.len() == m * k && b.len() == k * n);
    let mut c = vec![0.0; m * n];
    exec::for_each_block(&mut c, n, BLOCK_ROWS, m * k * n, |i, block| {
        let rows = block.len() / n;
        // SAFETY: rows i..i+rows of `a` and all of `b` are in bounds.
        unsafe {
            gemm(
                rows,
                k,
                n,
                a[i * k..].as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                block,
            )
        }
    });
    c
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`.
pub fn matmul_bt_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert!(a.len() == m * k && b.len() == n * k);
    let mut c = vec![0.0; m * n];
    exec::for_each_block(&mut c, n, BLOCK_ROWS, m * k * n, |i, block| {
        let rows = block.len() / n;
        // SAFETY: as above, with `b` read column-major.
        unsafe {
            gemm(
                rows,
                k,
                n,
                a[i * k..].as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                1,
                k as isize,
                block,
            )
        }
    });
    c
}

/// `c[k×n] = a[m×k]ᵀ · g[m×n]`.
pub fn matmul_at_kernel(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert!(a.len() == m * k && g.len() == m * n);
    let mut c = vec![0.0; k * n];
    exec::for_each_block(&mut c, n, BLOCK_ROWS, m * k * n, |p, block| {
        let rows = block.len() / n;
        // SAFETY: columns p..p+rows of `a` and all of `g` are in bounds.
        unsafe {
            gemm(
                rows,
                m,
                n,
                a[p..].as_ptr(),
                1,
                k as isize,
                g.as_ptr(),
                n as isize,
                1,
                block,
            )
        }
    });
    c
}
