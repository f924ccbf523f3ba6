//! Dense `f64` tensors and the handful of kernels the network is built from.
//!
//! Images are stored row-major in HWC order. All kernels accumulate in a
//! fixed order (documented per kernel) so that results are bit-reproducible
//! and can be checked against naive loop references exactly.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense n-dimensional array of finite `f64` values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        check_finite(&data, "tensor construction")?;
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    /// Rank-1 tensor from a non-empty vector.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a tensor without re-validating; callers guarantee the invariants.
    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
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

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    pub fn l2_distance(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    pub fn linf_distance(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Number of positions where the two tensors differ.
    pub fn l0_distance(&self, other: &Tensor) -> Result<usize> {
        self.same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| a != b)
            .count())
    }

    fn same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Writes the on-disk form: `rank: u32`, `extent: u32` per axis, then
    /// the values as little-endian `f64`.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.shape.len() + 8 * self.data.len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let fmt = |reason: String| Error::Format {
            kind: "tensor",
            path: "<stream>".into(),
            reason,
        };
        let mut word = [0u8; 4];
        r.read_exact(&mut word)
            .map_err(|e| fmt(format!("reading rank: {e}")))?;
        let rank = u32::from_le_bytes(word) as usize;
        if rank == 0 || rank > 8 {
            return Err(fmt(format!("unsupported rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut word)
                .map_err(|e| fmt(format!("reading extent: {e}")))?;
            shape.push(u32::from_le_bytes(word) as usize);
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)
            .map_err(|e| fmt(format!("reading {n} values: {e}")))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data)
    }
}

pub(crate) fn check_finite(values: &[f64], context: &str) -> Result<()> {
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "{context}: value {} at index {pos}",
            values[pos]
        )));
    }
    Ok(())
}

/// Spatial padding mode for [`conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Valid,
    Same,
}

/// Output extent and leading pad for one spatial axis.
pub(crate) fn conv_output_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Option<(usize, usize)> {
    match padding {
        Padding::Valid => {
            if input < kernel {
                None
            } else {
                Some(((input - kernel) / stride + 1, 0))
            }
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let needed = (out - 1) * stride + kernel;
            let total = needed.saturating_sub(input);
            Some((out, total / 2))
        }
    }
}

/// Geometry of a 2-D convolution over an HWC image with HWIO kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_c: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    pub fn new(
        input: [usize; 3],
        kernel: [usize; 4],
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let [in_h, in_w, in_c] = input;
        let [k_h, k_w, k_c, out_c] = kernel;
        if stride == 0 {
            return Err(Error::InvalidArgument("conv stride must be positive".into()));
        }
        if k_c != in_c {
            return Err(Error::Shape(format!(
                "kernel expects {k_c} input channels, image has {in_c}"
            )));
        }
        let (out_h, pad_top) = conv_output_extent(in_h, k_h, stride, padding)
            .ok_or_else(|| Error::Shape(format!("kernel height {k_h} exceeds input {in_h}")))?;
        let (out_w, pad_left) = conv_output_extent(in_w, k_w, stride, padding)
            .ok_or_else(|| Error::Shape(format!("kernel width {k_w} exceeds input {in_w}")))?;
        Ok(Self {
            in_h,
            in_w,
            in_c,
            k_h,
            k_w,
            out_c,
            stride,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w * self.out_c
    }

    /// Input row/col for output position and kernel offset, if inside the image.
    #[inline]
    pub fn input_coord(&self, out: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (out * self.stride + k) as isize - pad as isize;
        if pos < 0 || pos as usize >= extent {
            None
        } else {
            Some(pos as usize)
        }
    }

    /// Computes all output channels at one spatial position into `out`.
    ///
    /// Per channel, terms are summed in (ky, kx, ic) order starting from 0.0,
    /// then the bias is added. Zero inputs are skipped; this leaves the sum
    /// bitwise unchanged.
    #[inline]
    pub fn position(
        &self,
        input: &[f64],
        kernels: &[f64],
        bias: &[f64],
        oy: usize,
        ox: usize,
        out: &mut [f64],
    ) {
        let oc = self.out_c;
        out.iter_mut().for_each(|v| *v = 0.0);
        for ky in 0..self.k_h {
            let Some(iy) = self.input_coord(oy, ky, self.pad_top, self.in_h) else {
                continue;
            };
            for kx in 0..self.k_w {
                let Some(ix) = self.input_coord(ox, kx, self.pad_left, self.in_w) else {
                    continue;
                };
                let in_base = (iy * self.in_w + ix) * self.in_c;
                let k_base = (ky * self.k_w + kx) * self.in_c * oc;
                for ic in 0..self.in_c {
                    let v = input[in_base + ic];
                    if v == 0.0 {
                        continue;
                    }
                    let row = &kernels[k_base + ic * oc..k_base + (ic + 1) * oc];
                    for (acc, &w) in out.iter_mut().zip(row) {
                        *acc += v * w;
                    }
                }
            }
        }
        for (acc, &b) in out.iter_mut().zip(bias) {
            *acc += b;
        }
    }

    pub fn forward(&self, input: &[f64], kernels: &[f64], bias: &[f64], out: &mut [f64]) {
        let oc = self.out_c;
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let base = (oy * self.out_w + ox) * oc;
                self.position(input, kernels, bias, oy, ox, &mut out[base..base + oc]);
            }
        }
    }

    /// Gradient with respect to the input, accumulated into `grad_in`.
    pub fn backward_input(&self, grad_out: &[f64], kernels: &[f64], grad_in: &mut [f64]) {
        let oc = self.out_c;
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let g = &grad_out[(oy * self.out_w + ox) * oc..][..oc];
                if g.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for ky in 0..self.k_h {
                    let Some(iy) = self.input_coord(oy, ky, self.pad_top, self.in_h) else {
                        continue;
                    };
                    for kx in 0..self.k_w {
                        let Some(ix) = self.input_coord(ox, kx, self.pad_left, self.in_w) else {
                            continue;
                        };
                        let in_base = (iy * self.in_w + ix) * self.in_c;
                        let k_base = (ky * self.k_w + kx) * self.in_c * oc;
                        for ic in 0..self.in_c {
                            let row = &kernels[k_base + ic * oc..k_base + (ic + 1) * oc];
                            grad_in[in_base + ic] += dot(row, g);
                        }
                    }
                }
            }
        }
    }

    /// Accumulates kernel and bias gradients.
    pub fn backward_params(
        &self,
        input: &[f64],
        grad_out: &[f64],
        grad_kernels: &mut [f64],
        grad_bias: &mut [f64],
    ) {
        let oc = self.out_c;
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let g = &grad_out[(oy * self.out_w + ox) * oc..][..oc];
                if g.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for (gb, &d) in grad_bias.iter_mut().zip(g) {
                    *gb += d;
                }
                for ky in 0..self.k_h {
                    let Some(iy) = self.input_coord(oy, ky, self.pad_top, self.in_h) else {
                        continue;
                    };
                    for kx in 0..self.k_w {
                        let Some(ix) = self.input_coord(ox, kx, self.pad_left, self.in_w) else {
                            continue;
                        };
                        let in_base = (iy * self.in_w + ix) * self.in_c;
                        let k_base = (ky * self.k_w + kx) * self.in_c * oc;
                        for ic in 0..self.in_c {
                            let v = input[in_base + ic];
                            if v == 0.0 {
                                continue;
                            }
                            let row = &mut grad_kernels[k_base + ic * oc..k_base + (ic + 1) * oc];
                            for (gw, &d) in row.iter_mut().zip(g) {
                                *gw += v * d;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Output positions whose receptive field contains input position (iy, ix).
    pub fn affected_outputs(&self, iy: usize, ix: usize, mut visit: impl FnMut(usize, usize)) {
        for ky in 0..self.k_h {
            let num = iy as isize + self.pad_top as isize - ky as isize;
            if num < 0 || num as usize % self.stride != 0 {
                continue;
            }
            let oy = num as usize / self.stride;
            if oy >= self.out_h {
                continue;
            }
            for kx in 0..self.k_w {
                let num = ix as isize + self.pad_left as isize - kx as isize;
                if num < 0 || num as usize % self.stride != 0 {
                    continue;
                }
                let ox = num as usize / self.stride;
                if ox >= self.out_w {
                    continue;
                }
                visit(oy, ox);
            }
        }
    }
}

/// Dot product with eight interleaved partial sums, combined in a fixed
/// order. Deterministic for a given length.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Standard matrix product of two rank-2 tensors.
///
/// Each output element is accumulated over the inner index in ascending
/// order starting from 0.0.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::Shape(format!(
            "matmul needs rank-2 operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (n, k) = (a.shape[0], a.shape[1]);
    let (k2, m) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::Shape(format!(
            "inner dimensions disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a.data[i * k + p];
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    check_finite(&out, "matmul")?;
    Ok(Tensor::from_parts_unchecked(vec![n, m], out))
}

/// Cross-correlation of an HWC image with HWIO kernels plus per-channel bias.
pub fn conv2d(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let geom = conv_geometry(input, kernels, bias, stride, padding)?;
    let mut out = vec![0.0; geom.out_len()];
    geom.forward(input.data(), kernels.data(), bias.data(), &mut out);
    check_finite(&out, "conv2d")?;
    Ok(Tensor::from_parts_unchecked(
        vec![geom.out_h, geom.out_w, geom.out_c],
        out,
    ))
}

pub(crate) fn conv_geometry(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<ConvGeometry> {
    if input.rank() != 3 {
        return Err(Error::Shape(format!(
            "conv2d input must be HWC, got {:?}",
            input.shape()
        )));
    }
    if kernels.rank() != 4 {
        return Err(Error::Shape(format!(
            "conv2d kernels must be [kh, kw, cin, cout], got {:?}",
            kernels.shape()
        )));
    }
    let ks = kernels.shape();
    if bias.shape() != [ks[3]] {
        return Err(Error::Shape(format!(
            "bias {:?} does not match {} output channels",
            bias.shape(),
            ks[3]
        )));
    }
    let s = input.shape();
    ConvGeometry::new([s[0], s[1], s[2]], [ks[0], ks[1], ks[2], ks[3]], stride, padding)
}

/// 2x2 stride-2 max pooling over an HWC tensor.
///
/// Returns the pooled tensor and, for every output element, the flat input
/// index that produced it. Ties go to the first element in row-major window
/// order.
pub fn maxpool2x2(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    if input.rank() != 3 {
        return Err(Error::Shape(format!(
            "maxpool input must be HWC, got {:?}",
            input.shape()
        )));
    }
    let (h, w, c) = (input.shape[0], input.shape[1], input.shape[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "maxpool2x2 needs even spatial extents, got {h}x{w}"
        )));
    }
    let mut out = vec![0.0; (h / 2) * (w / 2) * c];
    let mut idx = vec![0usize; out.len()];
    maxpool_forward([h, w, c], input.data(), &mut out, &mut idx);
    Ok((
        Tensor::from_parts_unchecked(vec![h / 2, w / 2, c], out),
        idx,
    ))
}

pub(crate) fn maxpool_forward(shape: [usize; 3], input: &[f64], out: &mut [f64], idx: &mut [usize]) {
    let [h, w, c] = shape;
    let (oh, ow) = (h / 2, w / 2);
    for oy in 0..oh {
        for ox in 0..ow {
            maxpool_window([h, w, c], input, oy, ox, |ch, v, i| {
                let o = (oy * ow + ox) * c + ch;
                out[o] = v;
                idx[o] = i;
            });
        }
    }
}

/// Evaluates one pooling window for every channel.
#[inline]
pub(crate) fn maxpool_window(
    shape: [usize; 3],
    input: &[f64],
    oy: usize,
    ox: usize,
    mut emit: impl FnMut(usize, f64, usize),
) {
    let [_, w, c] = shape;
    for ch in 0..c {
        let mut best_i = ((2 * oy) * w + 2 * ox) * c + ch;
        let mut best = input[best_i];
        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
            let i = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
            if input[i] > best {
                best = input[i];
                best_i = i;
            }
        }
        emit(ch, best, best_i);
    }
}

/// Numerically stable softmax of a rank-1 tensor.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 1 {
        return Err(Error::Shape(format!(
            "softmax expects rank 1, got {:?}",
            logits.shape()
        )));
    }
    Ok(Tensor::from_parts_unchecked(
        logits.shape.clone(),
        softmax_slice(logits.data())?,
    ))
}

pub(crate) fn softmax_slice(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Empty("softmax of empty vector".into()));
    }
    check_finite(logits, "softmax input")?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// `log(sum(exp(z)))` computed with max subtraction.
pub(crate) fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

/// Elementwise clamp into `[lo, hi]`.
pub fn clip(x: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
    if !(lo <= hi) {
        return Err(Error::InvalidArgument(format!(
            "clip bounds out of order: [{lo}, {hi}]"
        )));
    }
    Ok(Tensor::from_parts_unchecked(
        x.shape.clone(),
        x.data.iter().map(|v| v.clamp(lo, hi)).collect(),
    ))
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
