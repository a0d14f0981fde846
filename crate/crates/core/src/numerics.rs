//! Dense tensors and the sliding-window primitives used by every layer.
//!
//! Layout is row-major, channels first (`C×H×W`). Convolution is done by
//! flattening receptive fields into a patch matrix (one row per spatial
//! position) and multiplying by the filter bank.

use std::fmt;

use crate::error::{Error, Result};

/// Dimensions of a tensor. Every dimension is at least one.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::invalid(format!(
                "shape dimensions must be non-empty and positive, got {dims:?}"
            )));
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `(channels, height, width)` for a rank-3 shape.
    pub fn chw(&self) -> Option<(usize, usize, usize)> {
        match self.0[..] {
            [c, h, w] => Some((c, h, w)),
            _ => None,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join("×"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        let data = vec![0.0; shape.len()];
        Tensor { shape, data }
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(
                "Tensor::from_vec",
                format!("{} elements for shape {shape}", shape.len()),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// A `rows×cols` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Tensor::from_vec(Shape::new([rows, cols])?, data)
    }

    pub fn shape(&self) -> &Shape {
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(rows, cols)` if this is a rank-2 tensor.
    pub fn matrix_dims(&self) -> Option<(usize, usize)> {
        match self.shape.dims() {
            &[r, c] => Some((r, c)),
            _ => None,
        }
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Tensor::from_vec(shape, self.data)
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    // Eight independent accumulators let the compiler vectorize the loop.
    let mut acc = [0f32; 8];
    let chunks_a = a.chunks_exact(8);
    let chunks_b = b.chunks_exact(8);
    let tail: f32 = chunks_a
        .remainder()
        .iter()
        .zip(chunks_b.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (ca, cb) in chunks_a.zip(chunks_b) {
        for i in 0..8 {
            acc[i] += ca[i] * cb[i];
        }
    }
    acc.iter().sum::<f32>() + tail
}

pub fn norm(x: &[f32]) -> f32 {
    x.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt() as f32
}

/// `y = A x` for a `K×N` matrix `A`.
pub fn matvec(a: &Tensor, x: &[f32]) -> Result<Vec<f32>> {
    let (rows, cols) = a
        .matrix_dims()
        .ok_or_else(|| Error::shape("matvec", "rank-2 matrix", a.shape()))?;
    if x.len() != cols {
        return Err(Error::shape(
            "matvec",
            format!("vector of length {cols} for matrix {}", a.shape()),
            format!("vector of length {}", x.len()),
        ));
    }
    Ok(a.data()
        .chunks_exact(cols)
        .take(rows)
        .map(|row| {
            row.iter()
                .zip(x)
                .map(|(&w, &v)| f64::from(w) * f64::from(v))
                .sum::<f64>() as f32
        })
        .collect())
}

/// Strided read-only view used to drive the GEMM kernel.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MatRef<'a> {
    data: &'a [f32],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a> MatRef<'a> {
    pub(crate) fn row_major(data: &'a [f32], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "matrix view out of bounds");
        MatRef {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub(crate) fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = a·b + beta·c`, with `c` row-major `a.rows × b.cols`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f32, c: &mut [f32]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions disagree");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(c.len(), m * n, "gemm output has the wrong size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the asserts above and in `MatRef::row_major` bound every index
    // the kernel touches: a[(m-1)*rs + (k-1)*cs] lies inside `a.data`, and
    // likewise for `b` and `c`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Flattened receptive fields of a `C×H×W` input, one row per spatial
/// position in row-major order. Each row has length `C·window·window` with
/// channel slowest and column fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Patches {
    pub window: usize,
    pub stride: usize,
    pub channels: usize,
    pub out_h: usize,
    pub out_w: usize,
    data: Vec<f32>,
}

impl Patches {
    pub fn patch_len(&self) -> usize {
        self.channels * self.window * self.window
    }

    pub fn count(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Patch at spatial index `s = row·out_w + col`.
    pub fn patch(&self, s: usize) -> &[f32] {
        let len = self.patch_len();
        &self.data[s * len..(s + 1) * len]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.patch_len())
    }

    /// The whole `count × patch_len` matrix.
    pub fn as_matrix(&self) -> &[f32] {
        &self.data
    }
}

pub fn extract_patches(input: &Tensor, window: usize, stride: usize) -> Result<Patches> {
    let (c, h, w) = input
        .shape()
        .chw()
        .ok_or_else(|| Error::shape("extract_patches", "C×H×W tensor", input.shape()))?;
    if stride == 0 || window == 0 {
        return Err(Error::invalid("window and stride must be at least 1"));
    }
    if window > h || window > w {
        return Err(Error::shape(
            "extract_patches",
            format!("input at least {window}×{window}"),
            input.shape(),
        ));
    }
    let out_h = (h - window) / stride + 1;
    let out_w = (w - window) / stride + 1;
    let len = c * window * window;
    let mut data = vec![0.0; out_h * out_w * len];
    let src = input.data();
    for oy in 0..out_h {
        for ox in 0..out_w {
            let row = &mut data[(oy * out_w + ox) * len..][..len];
            let mut idx = 0;
            for ch in 0..c {
                for dy in 0..window {
                    let start = ch * h * w + (oy * stride + dy) * w + ox * stride;
                    row[idx..idx + window].copy_from_slice(&src[start..start + window]);
                    idx += window;
                }
            }
        }
    }
    Ok(Patches {
        window,
        stride,
        channels: c,
        out_h,
        out_w,
        data,
    })
}

/// Adjoint of [`extract_patches`]: sums per-patch gradients (rows of
/// `grad`, same layout as the patch matrix) back onto a `C×H×W` input.
pub(crate) fn fold_patches(
    grad: &[f32],
    input_shape: &Shape,
    window: usize,
    stride: usize,
) -> Tensor {
    let (c, h, w) = input_shape.chw().expect("fold_patches needs a C×H×W shape");
    let out_h = (h - window) / stride + 1;
    let out_w = (w - window) / stride + 1;
    let len = c * window * window;
    assert_eq!(grad.len(), out_h * out_w * len);
    let mut out = Tensor::zeros(input_shape.clone());
    let dst = out.data_mut();
    for oy in 0..out_h {
        for ox in 0..out_w {
            let row = &grad[(oy * out_w + ox) * len..][..len];
            let mut idx = 0;
            for ch in 0..c {
                for dy in 0..window {
                    let start = ch * h * w + (oy * stride + dy) * w + ox * stride;
                    for (d, g) in dst[start..start + window].iter_mut().zip(&row[idx..idx + window]) {
                        *d += g;
                    }
                    idx += window;
                }
            }
        }
    }
    out
}

/// Output of a 2×2/stride-2 max pool together with the flat input index of
/// each block's winner.
#[derive(Debug, Clone, PartialEq)]
pub struct Pooled {
    pub output: Tensor,
    pub argmax: Vec<usize>,
}

impl Pooled {
    /// Winner position `(row, col)` inside the 2×2 block of output cell
    /// `(channel, i, j)`.
    pub fn winner(&self, channel: usize, i: usize, j: usize) -> (usize, usize) {
        let (_, oh, ow) = self.output.shape().chw().expect("pooled output is C×H×W");
        let w = ow * 2;
        let h = oh * 2;
        let flat = self.argmax[(channel * oh + i) * ow + j] - channel * h * w;
        (flat / w - 2 * i, flat % w - 2 * j)
    }
}

/// 2×2 max pooling with stride 2. Ties go to the first element in row-major
/// order within the block.
pub fn max_pool(input: &Tensor) -> Result<Pooled> {
    let (c, h, w) = input
        .shape()
        .chw()
        .ok_or_else(|| Error::shape("max_pool", "C×H×W tensor", input.shape()))?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("max_pool", "even height and width", input.shape()));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let top = base + 2 * i * w + 2 * j;
                let mut best = top;
                for cand in [top + 1, top + w, top + w + 1] {
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
    }
    Ok(Pooled {
        output: Tensor::from_vec(Shape::new([c, oh, ow])?, out)?,
        argmax,
    })
}

/// Routes pooled-output gradients back to the winning input positions.
pub(crate) fn max_unpool(grad: &[f32], argmax: &[usize], input_shape: &Shape) -> Tensor {
    let mut out = Tensor::zeros(input_shape.clone());
    let dst = out.data_mut();
    for (&g, &idx) in grad.iter().zip(argmax) {
        dst[idx] += g;
    }
    out
}
