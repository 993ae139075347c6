//! Dense tensor kernel: the resize / pooling / normalization / similarity
//! primitives everything else is built from.
//!
//! Tensors are rank 1-4, row-major, `f64`. All operations are pure functions;
//! values are immutable after construction and freely shareable across threads.

use crate::error::{Error, Result};

/// Added to the denominator of min-max normalization.
pub const EPS_MINMAX: f64 = 1e-7;
/// Added to the norm product in cosine similarity.
pub const EPS_COSINE: f64 = 1e-8;

/// Dense row-major numeric array with explicit shape (rank 1-4).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, validating rank, dimension positivity, element count
    /// and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::InvalidTensor(format!(
                "rank {} outside 1-4",
                shape.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidTensor("zero-size dimension".into()));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidTensor("non-finite element".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
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

    /// Scalar accessor for rank-1 tensors of length 1.
    pub fn scalar(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.data[0]
    }

    /// Element of a `[c,h,w]` tensor.
    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    /// Element of a `[h,w]` tensor.
    #[inline]
    pub fn at2(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.shape[1] + x]
    }

    /// Reinterprets the buffer under a new shape with equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} to {:?}",
                self.shape, shape
            )));
        }
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn min(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Binary spatial mask; every element is exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidTensor("zero-size mask".into()));
        }
        if data.len() != height * width {
            return Err(Error::InvalidTensor(format!(
                "mask {}x{} needs {} elements, got {}",
                height,
                width,
                height * width,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidTensor("mask element outside {0,1}".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        debug_assert!(v <= 1);
        self.data[y * self.width + x] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Mask as a `[h,w]` float tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![self.height, self.width],
            data: self.data.iter().map(|&v| v as f64).collect(),
        }
    }
}

#[inline]
fn bilinear_taps(src: f64, size: usize) -> (usize, usize, f64) {
    let floor = src.floor();
    let t = src - floor;
    let i0 = floor.max(0.0).min((size - 1) as f64) as usize;
    let i1 = (floor + 1.0).max(0.0).min((size - 1) as f64) as usize;
    (i0, i1, t)
}

fn resize_plane(src: &[f64], h: usize, w: usize, out: &mut [f64], out_h: usize, out_w: usize) {
    for oy in 0..out_h {
        let sy = (oy as f64 + 0.5) * h as f64 / out_h as f64 - 0.5;
        let (y0, y1, ty) = bilinear_taps(sy, h);
        for ox in 0..out_w {
            let sx = (ox as f64 + 0.5) * w as f64 / out_w as f64 - 0.5;
            let (x0, x1, tx) = bilinear_taps(sx, w);
            let top = src[y0 * w + x0] + tx * (src[y0 * w + x1] - src[y0 * w + x0]);
            let bot = src[y1 * w + x0] + tx * (src[y1 * w + x1] - src[y1 * w + x0]);
            out[oy * out_w + ox] = top + ty * (bot - top);
        }
    }
}

/// Bilinear resize of a `[c,h,w]` or `[h,w]` tensor to `(out_h, out_w)`.
///
/// Pixel centers at `(i+0.5)/n` (align-corners-false). Constants are preserved
/// exactly and equal sizes are the identity.
pub fn resize_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidTargetSize);
    }
    let (c, h, w) = match t.shape() {
        [h, w] => (1usize, *h, *w),
        [c, h, w] => (*c, *h, *w),
        s => {
            return Err(Error::ShapeMismatch(format!(
                "resize expects [h,w] or [c,h,w], got {s:?}"
            )))
        }
    };
    let mut data = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        resize_plane(
            &t.data[ch * h * w..(ch + 1) * h * w],
            h,
            w,
            &mut data[ch * out_h * out_w..(ch + 1) * out_h * out_w],
            out_h,
            out_w,
        );
    }
    let shape = if t.rank() == 2 {
        vec![out_h, out_w]
    } else {
        vec![c, out_h, out_w]
    };
    Tensor::new(shape, data)
}

/// Resizes a binary mask: bilinear on the float mask, then threshold at 0.5
/// with ties going to 1.
pub fn resize_mask(m: &BinaryMask, out_h: usize, out_w: usize) -> Result<BinaryMask> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidTargetSize);
    }
    if out_h == m.height && out_w == m.width {
        return Ok(m.clone());
    }
    let f = resize_bilinear(&m.to_tensor(), out_h, out_w)?;
    let data = f.data().iter().map(|&v| u8::from(v >= 0.5)).collect();
    BinaryMask::new(out_h, out_w, data)
}

/// Adaptive average pooling of `[c,h,w]` down to `(out_h, out_w)`.
///
/// Output cell `(i,j)` is the mean over the input window
/// `[floor(i*h/out_h), ceil((i+1)*h/out_h))` and likewise for `w`.
pub fn average_pool_to(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [c, h, w] = *t.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "pool expects [c,h,w], got {:?}",
            t.shape()
        )));
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidTargetSize);
    }
    if out_h > h || out_w > w {
        return Err(Error::PoolUpsample);
    }
    let mut data = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        let plane = &t.data[ch * h * w..(ch + 1) * h * w];
        for oy in 0..out_h {
            let y0 = oy * h / out_h;
            let y1 = ((oy + 1) * h).div_ceil(out_h);
            for ox in 0..out_w {
                let x0 = ox * w / out_w;
                let x1 = ((ox + 1) * w).div_ceil(out_w);
                let mut acc = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += plane[y * w + x];
                    }
                }
                data[(ch * out_h + oy) * out_w + ox] =
                    acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], data)
}

/// Per-channel mean of `f` over foreground pixels of `m` (resized to match).
///
/// Returns the prototype vector and an empty-foreground flag; an all-zero
/// resized mask yields the zero vector with the flag set instead of an error.
pub fn masked_average_pool(f: &Tensor, m: &BinaryMask) -> Result<(Tensor, bool)> {
    let [c, h, w] = *f.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "masked pool expects [c,h,w], got {:?}",
            f.shape()
        )));
    };
    let m = resize_mask(m, h, w)?;
    let fg = m.count_ones();
    if fg == 0 {
        return Ok((Tensor::zeros(&[c]), true));
    }
    let mut out = vec![0.0; c];
    for ch in 0..c {
        let mut acc = 0.0;
        for y in 0..h {
            for x in 0..w {
                if m.at(y, x) == 1 {
                    acc += f.at3(ch, y, x);
                }
            }
        }
        out[ch] = acc / fg as f64;
    }
    Ok((Tensor::new(vec![c], out)?, false))
}

/// Min-max normalization: `(t - min) / (max - min + EPS_MINMAX)`.
///
/// Output lies in `[0,1]`; a constant input maps to all zeros.
pub fn minmax_normalize(t: &Tensor) -> Tensor {
    let lo = t.min();
    let denom = t.max() - lo + EPS_MINMAX;
    let data = t.data.iter().map(|&v| (v - lo) / denom).collect();
    Tensor {
        shape: t.shape.clone(),
        data,
    }
}

/// Pairwise cosine similarity of the columns of `a: [c,n]` and `b: [c,m]`.
///
/// Entry `(i,j)` is `dot(a_col_i, b_col_j) / (|a_col_i| * |b_col_j| + EPS_COSINE)`,
/// so all-zero columns contribute similarity 0.
pub fn cosine_similarity_matrix(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let ([ca, n], [cb, m]) = (dims2(a)?, dims2(b)?);
    if ca != cb {
        return Err(Error::ShapeMismatch(format!(
            "channel mismatch: {ca} vs {cb}"
        )));
    }
    let c = ca;
    if c == 0 {
        return Err(Error::ShapeMismatch("zero channels".into()));
    }
    // Column-major access of [c,n] strides by n; transpose into row vectors
    // once so the dot loops run over contiguous memory.
    let rows_a = transpose_cols(a, c, n);
    let rows_b = transpose_cols(b, c, m);
    let norm = |rows: &[f64], k: usize| -> Vec<f64> {
        (0..k)
            .map(|i| rows[i * c..(i + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    };
    let na = norm(&rows_a, n);
    let nb = norm(&rows_b, m);
    let mut data = vec![0.0; n * m];
    for i in 0..n {
        let ra = &rows_a[i * c..(i + 1) * c];
        for j in 0..m {
            let rb = &rows_b[j * c..(j + 1) * c];
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            data[i * m + j] = dot / (na[i] * nb[j] + EPS_COSINE);
        }
    }
    Tensor::new(vec![n, m], data)
}

fn dims2(t: &Tensor) -> Result<[usize; 2]> {
    match t.shape() {
        [a, b] => Ok([*a, *b]),
        s => Err(Error::ShapeMismatch(format!("expected rank 2, got {s:?}"))),
    }
}

fn transpose_cols(t: &Tensor, c: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c];
    for ch in 0..c {
        for i in 0..n {
            out[i * c + ch] = t.data[ch * n + i];
        }
    }
    out
}

/// Euclidean distance between two equal-length vectors.
pub fn l2_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() || a.rank() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "l2 expects equal rank-1 shapes, got {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Elementwise product. A rank-2 `[h,w]` factor broadcasts across the
/// channels of a rank-3 `[c,h,w]` tensor (in either argument position).
pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
        return Tensor::new(a.shape.clone(), data);
    }
    let (full, map) = match (a.rank(), b.rank()) {
        (3, 2) => (a, b),
        (2, 3) => (b, a),
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "hadamard shapes {:?} vs {:?}",
                a.shape(),
                b.shape()
            )))
        }
    };
    let [c, h, w] = *full.shape() else { unreachable!() };
    if map.shape() != [h, w] {
        return Err(Error::ShapeMismatch(format!(
            "hadamard broadcast {:?} vs {:?}",
            full.shape(),
            map.shape()
        )));
    }
    let mut data = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h * w {
            data[ch * h * w + i] = full.data[ch * h * w + i] * map.data[i];
        }
    }
    Tensor::new(vec![c, h, w], data)
}

/// Concatenation along the leading (channel) axis. Accepts `[c,h,w]` pairs
/// with matching spatial dims, or plain rank-1 vectors.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != b.rank() || a.shape()[1..] != b.shape()[1..] {
        return Err(Error::ShapeMismatch(format!(
            "concat shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut shape = a.shape.clone();
    shape[0] += b.shape[0];
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::new(shape, data)
}

/// Tiles a `[c]` vector into a `[c,h,w]` tensor of constant planes.
pub fn expand_vector(v: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    if v.rank() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "expand expects rank 1, got {:?}",
            v.shape()
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::InvalidTargetSize);
    }
    let c = v.len();
    let mut data = vec![0.0; c * h * w];
    for ch in 0..c {
        data[ch * h * w..(ch + 1) * h * w].fill(v.data[ch]);
    }
    Tensor::new(vec![c, h, w], data)
}
