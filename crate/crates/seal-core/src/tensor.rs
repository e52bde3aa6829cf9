//! Dense row-major tensors with f32 storage.
//!
//! All reductions (dot products, matrix multiplies, convolution sums,
//! means) accumulate in f64 and round once at the end, which keeps the
//! exact-response arithmetic used by the surgery routines stable.

use crate::error::{Result, SealError};

/// Dense row-major tensor of f32 values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking that `data.len()` equals the shape
    /// product. Zero extents are rejected.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(SealError::ShapeMismatch(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(SealError::ShapeMismatch(format!(
                "shape {shape:?} implies {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Row-major offset of a multi-index.
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, &x) in idx.iter().enumerate() {
            debug_assert!(x < self.shape[i]);
            off = off * self.shape[i] + x;
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> f32 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f32) {
        let off = self.offset(idx);
        self.data[off] = value;
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn check_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(SealError::ShapeMismatch(format!(
                "{op}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "sub")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "mul")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| a * b)
                .collect(),
        })
    }

    pub fn scale(&self, c: f32) -> Tensor {
        self.map(|v| v * c)
    }

    /// `self + c * other`, elementwise.
    pub fn add_scaled(&self, other: &Tensor, c: f32) -> Result<Tensor> {
        self.check_same_shape(other, "add_scaled")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| a + c * b)
                .collect(),
        })
    }

    /// Dot product over flattened elements, accumulated in f64. Shapes
    /// must match elementwise.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.data.len() != other.data.len() {
            return Err(SealError::ShapeMismatch(format!(
                "dot: {} vs {} elements",
                self.data.len(),
                other.data.len()
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (*a as f64) * (*b as f64))
            .sum())
    }

    /// Euclidean norm (f64 accumulation).
    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// l1 norm (f64 accumulation).
    pub fn norm_l1(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64).abs()).sum()
    }

    pub fn clamp(&self, lo: f32, hi: f32) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| v.max(0.0))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(|v| (1.0 / (1.0 + (-(v as f64)).exp())) as f32)
    }

    /// relu6(x + 3) / 6.
    pub fn hard_sigmoid(&self) -> Tensor {
        self.map(|v| ((v + 3.0).clamp(0.0, 6.0)) / 6.0)
    }

    /// Per-channel spatial mean of a [C, H, W] tensor, f64 accumulation.
    pub fn channel_mean(&self) -> Result<Tensor> {
        if self.rank() != 3 {
            return Err(SealError::ShapeMismatch(format!(
                "channel_mean expects rank 3, got {:?}",
                self.shape
            )));
        }
        let (c, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        let plane = h * w;
        let mut out = Vec::with_capacity(c);
        for ch in 0..c {
            let s: f64 = self.data[ch * plane..(ch + 1) * plane]
                .iter()
                .map(|&v| v as f64)
                .sum();
            out.push((s / plane as f64) as f32);
        }
        Tensor::new(vec![c], out)
    }
}

/// Matrix [n, m] times vector [m] -> [n], f64 accumulation per row.
pub fn matvec(w: &Tensor, x: &Tensor) -> Result<Tensor> {
    if w.rank() != 2 || x.rank() != 1 || w.shape()[1] != x.shape()[0] {
        return Err(SealError::ShapeMismatch(format!(
            "matvec: {:?} x {:?}",
            w.shape(),
            x.shape()
        )));
    }
    let (n, m) = (w.shape()[0], w.shape()[1]);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = &w.data()[i * m..(i + 1) * m];
        let s: f64 = row
            .iter()
            .zip(x.data().iter())
            .map(|(a, b)| (*a as f64) * (*b as f64))
            .sum();
        out.push(s as f32);
    }
    Tensor::new(vec![n], out)
}

/// Transposed matrix application: [n, m]^T times [n] -> [m].
pub fn matvec_t(w: &Tensor, y: &Tensor) -> Result<Tensor> {
    if w.rank() != 2 || y.rank() != 1 || w.shape()[0] != y.shape()[0] {
        return Err(SealError::ShapeMismatch(format!(
            "matvec_t: {:?}^T x {:?}",
            w.shape(),
            y.shape()
        )));
    }
    let (n, m) = (w.shape()[0], w.shape()[1]);
    let mut acc = vec![0.0f64; m];
    for i in 0..n {
        let yi = y.data()[i] as f64;
        let row = &w.data()[i * m..(i + 1) * m];
        for (a, r) in acc.iter_mut().zip(row.iter()) {
            *a += yi * (*r as f64);
        }
    }
    Tensor::new(vec![m], acc.into_iter().map(|v| v as f32).collect())
}

/// Outer product [n] x [m] -> [n, m].
pub fn outer(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 1 || b.rank() != 1 {
        return Err(SealError::ShapeMismatch(format!(
            "outer: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (n, m) = (a.len(), b.len());
    let mut data = Vec::with_capacity(n * m);
    for i in 0..n {
        let ai = a.data()[i];
        for j in 0..m {
            data.push(ai * b.data()[j]);
        }
    }
    Tensor::new(vec![n, m], data)
}

/// General matrix product [n, m] x [m, p] -> [n, p], f64 accumulation.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(SealError::ShapeMismatch(format!(
            "matmul: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (n, m, p) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut data = vec![0.0f32; n * p];
    for i in 0..n {
        for j in 0..p {
            let mut s = 0.0f64;
            for k in 0..m {
                s += (a.data()[i * m + k] as f64) * (b.data()[k * p + j] as f64);
            }
            data[i * p + j] = s as f32;
        }
    }
    Tensor::new(vec![n, p], data)
}

/// Output spatial extent of a convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(SealError::InvalidArgument("stride must be >= 1".into()));
    }
    let padded = input + 2 * pad;
    if kernel == 0 || kernel > padded {
        return Err(SealError::ShapeMismatch(format!(
            "kernel {kernel} exceeds padded extent {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

fn conv_check(input: &Tensor, weight: &Tensor) -> Result<()> {
    if input.rank() != 3 {
        return Err(SealError::ShapeMismatch(format!(
            "conv input must be [C, H, W], got {:?}",
            input.shape()
        )));
    }
    if weight.rank() != 4 {
        return Err(SealError::ShapeMismatch(format!(
            "conv weight must be [O, C, K, K], got {:?}",
            weight.shape()
        )));
    }
    if weight.shape()[2] != weight.shape()[3] {
        return Err(SealError::ShapeMismatch(format!(
            "conv kernels must be square, got {:?}",
            weight.shape()
        )));
    }
    if input.shape()[0] != weight.shape()[1] {
        return Err(SealError::ShapeMismatch(format!(
            "conv channel mismatch: input {:?} vs weight {:?}",
            input.shape(),
            weight.shape()
        )));
    }
    Ok(())
}

/// 2-d cross-correlation of a [C, H, W] input with [O, C, K, K] weights,
/// zero padding, square kernel, shared stride. Each output element is an
/// f64-accumulated window sum.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    conv_check(input, weight)?;
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (o, k) = (weight.shape()[0], weight.shape()[2]);
    if let Some(b) = bias {
        if b.rank() != 1 || b.len() != o {
            return Err(SealError::ShapeMismatch(format!(
                "conv bias must be [{o}], got {:?}",
                b.shape()
            )));
        }
    }
    let oh = conv_out_extent(h, k, stride, pad)?;
    let ow = conv_out_extent(w, k, stride, pad)?;

    let mut out = vec![0.0f32; o * oh * ow];
    let in_plane = h * w;
    let w_per_o = c * k * k;
    for oc in 0..o {
        let wk = &weight.data()[oc * w_per_o..(oc + 1) * w_per_o];
        let b = bias.map_or(0.0, |b| b.data()[oc] as f64);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                let iy0 = (oy * stride) as i64 - pad as i64;
                let ix0 = (ox * stride) as i64 - pad as i64;
                for ic in 0..c {
                    let plane = &input.data()[ic * in_plane..(ic + 1) * in_plane];
                    let wches = &wk[ic * k * k..(ic + 1) * k * k];
                    for ky in 0..k {
                        let iy = iy0 + ky as i64;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        let row = &plane[(iy as usize) * w..(iy as usize) * w + w];
                        let wrow = &wches[ky * k..ky * k + k];
                        for kx in 0..k {
                            let ix = ix0 + kx as i64;
                            if ix < 0 || ix >= w as i64 {
                                continue;
                            }
                            acc += (row[ix as usize] as f64) * (wrow[kx] as f64);
                        }
                    }
                }
                out[oc * oh * ow + oy * ow + ox] = (acc + b) as f32;
            }
        }
    }
    Tensor::new(vec![o, oh, ow], out)
}

/// Gradient of a convolution with respect to its input: scatters
/// `grad_out` [O, OH, OW] back through [O, C, K, K] weights onto the
/// input shape [C, H, W].
pub fn conv2d_input_grad(
    grad_out: &Tensor,
    weight: &Tensor,
    input_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    if input_shape.len() != 3 || weight.rank() != 4 {
        return Err(SealError::ShapeMismatch(
            "conv input grad expects [C,H,W] input shape and [O,C,K,K] weight".into(),
        ));
    }
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let (o, k) = (weight.shape()[0], weight.shape()[2]);
    let oh = conv_out_extent(h, k, stride, pad)?;
    let ow = conv_out_extent(w, k, stride, pad)?;
    if grad_out.shape() != [o, oh, ow] {
        return Err(SealError::ShapeMismatch(format!(
            "conv grad_out shape {:?}, expected [{o}, {oh}, {ow}]",
            grad_out.shape()
        )));
    }

    let mut acc = vec![0.0f64; c * h * w];
    let w_per_o = c * k * k;
    for oc in 0..o {
        let wk = &weight.data()[oc * w_per_o..(oc + 1) * w_per_o];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad_out.data()[oc * oh * ow + oy * ow + ox] as f64;
                if g == 0.0 {
                    continue;
                }
                let iy0 = (oy * stride) as i64 - pad as i64;
                let ix0 = (ox * stride) as i64 - pad as i64;
                for ic in 0..c {
                    for ky in 0..k {
                        let iy = iy0 + ky as i64;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ix0 + kx as i64;
                            if ix < 0 || ix >= w as i64 {
                                continue;
                            }
                            acc[ic * h * w + (iy as usize) * w + ix as usize] +=
                                g * (wk[ic * k * k + ky * k + kx] as f64);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(
        vec![c, h, w],
        acc.into_iter().map(|v| v as f32).collect(),
    )
}

/// Gradient of a convolution with respect to its weights.
pub fn conv2d_weight_grad(
    input: &Tensor,
    grad_out: &Tensor,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    if input.rank() != 3 || grad_out.rank() != 3 {
        return Err(SealError::ShapeMismatch(
            "conv weight grad expects rank-3 input and grad".into(),
        ));
    }
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (o, oh, ow) = (
        grad_out.shape()[0],
        grad_out.shape()[1],
        grad_out.shape()[2],
    );
    if conv_out_extent(h, kernel, stride, pad)? != oh
        || conv_out_extent(w, kernel, stride, pad)? != ow
    {
        return Err(SealError::ShapeMismatch(
            "conv weight grad: grad_out extents do not match".into(),
        ));
    }

    let k = kernel;
    let mut acc = vec![0.0f64; o * c * k * k];
    for oc in 0..o {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad_out.data()[oc * oh * ow + oy * ow + ox] as f64;
                if g == 0.0 {
                    continue;
                }
                let iy0 = (oy * stride) as i64 - pad as i64;
                let ix0 = (ox * stride) as i64 - pad as i64;
                for ic in 0..c {
                    for ky in 0..k {
                        let iy = iy0 + ky as i64;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ix0 + kx as i64;
                            if ix < 0 || ix >= w as i64 {
                                continue;
                            }
                            acc[((oc * c + ic) * k + ky) * k + kx] += g
                                * (input.data()[ic * h * w + (iy as usize) * w + ix as usize]
                                    as f64);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(
        vec![o, c, k, k],
        acc.into_iter().map(|v| v as f32).collect(),
    )
}

/// Mean of a set of equally shaped rank-1 samples, f64 accumulation.
pub fn sample_mean(samples: &[Tensor]) -> Result<Tensor> {
    if samples.is_empty() {
        return Err(SealError::InvalidArgument(
            "sample_mean needs at least one sample".into(),
        ));
    }
    let d = samples[0].len();
    let mut acc = vec![0.0f64; d];
    for s in samples {
        if s.rank() != 1 || s.len() != d {
            return Err(SealError::ShapeMismatch(
                "samples must be rank-1 with equal length".into(),
            ));
        }
        for (a, &v) in acc.iter_mut().zip(s.data().iter()) {
            *a += v as f64;
        }
    }
    let n = samples.len() as f64;
    Tensor::new(vec![d], acc.into_iter().map(|v| (v / n) as f32).collect())
}

/// Trace of the unbiased sample covariance (sum of per-coordinate
/// variances), computed in f64. Needs at least two samples.
pub fn covariance_trace(samples: &[Tensor]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(SealError::InvalidArgument(
            "covariance_trace needs at least two samples".into(),
        ));
    }
    let d = samples[0].len();
    let mut sum = vec![0.0f64; d];
    let mut sumsq = vec![0.0f64; d];
    for s in samples {
        if s.rank() != 1 || s.len() != d {
            return Err(SealError::ShapeMismatch(
                "samples must be rank-1 with equal length".into(),
            ));
        }
        for i in 0..d {
            let v = s.data()[i] as f64;
            sum[i] += v;
            sumsq[i] += v * v;
        }
    }
    let n = samples.len() as f64;
    let mut trace = 0.0;
    for i in 0..d {
        let mean = sum[i] / n;
        trace += (sumsq[i] - n * mean * mean) / (n - 1.0);
    }
    Ok(trace.max(0.0))
}
