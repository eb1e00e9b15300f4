// SPDX-License-Identifier: Apache-2.0

//! Tensor primitives over height × width × channel (HWC) f32 tensors.
//! Kernels are stored HWIO (`[ky][kx][c_in][c_out]`) so the innermost loop
//! always runs over contiguous output channels.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Contract(format!(
                "{} values for a {height}x{width}x{channels} tensor",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Converts plane-major (CHW) data into HWC.
    pub fn from_planes(channels: usize, side: usize, planes: &[f32]) -> Result<Self> {
        let n = side * side;
        if planes.len() != channels * n {
            return Err(Error::Contract(format!(
                "{} plane values for {channels} planes of {side}x{side}",
                planes.len()
            )));
        }
        let mut data = vec![0.0; planes.len()];
        for c in 0..channels {
            for (i, &v) in planes[c * n..(c + 1) * n].iter().enumerate() {
                data[i * channels + c] = v;
            }
        }
        Ok(Self {
            height: side,
            width: side,
            channels,
            data,
        })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let k = (y * self.width + x) * self.channels;
        &self.data[k..k + self.channels]
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::Contract(format!("{what}: {got} values, expected {want}")))
    }
}

/// `out[r][j] = bias[j] + Σ_k a[r][k] · w[k][j]`, accumulated in ascending
/// `k` for every output whatever the code path.
fn matmul_bias(a: &[f32], k: usize, w: &[f32], bias: &[f32], out: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2.
        unsafe { matmul_bias_avx2(a, k, w, bias, out) };
        return;
    }
    matmul_bias_portable(a, k, w, bias, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_bias_avx2(a: &[f32], k: usize, w: &[f32], bias: &[f32], out: &mut [f32]) {
    matmul_bias_portable(a, k, w, bias, out)
}

const ROW_BLOCK: usize = 4;

/// One `ROW_BLOCK × B` tile of outputs starting at row `r`, column `j`.
#[inline(always)]
fn tile<const B: usize>(
    a_rows: &[&[f32]; ROW_BLOCK],
    w: &[f32],
    bias: &[f32],
    out: &mut [f32],
    r: usize,
    j: usize,
) {
    let n = bias.len();
    let mut acc = [[0.0f32; B]; ROW_BLOCK];
    for row in acc.iter_mut() {
        row.copy_from_slice(&bias[j..j + B]);
    }
    for (kk, w_row) in w.chunks_exact(n).enumerate() {
        let wv: &[f32; B] = w_row[j..j + B].try_into().unwrap();
        for (row, a_row) in acc.iter_mut().zip(a_rows) {
            let av = a_row[kk];
            for (o, &wl) in row.iter_mut().zip(wv) {
                *o += av * wl;
            }
        }
    }
    for (i, row) in acc.iter().enumerate() {
        out[(r + i) * n + j..(r + i) * n + j + B].copy_from_slice(row);
    }
}

#[inline(always)]
fn matmul_bias_portable(a: &[f32], k: usize, w: &[f32], bias: &[f32], out: &mut [f32]) {
    let n = bias.len();
    let rows = out.len() / n.max(1);
    debug_assert_eq!(a.len(), rows * k);
    debug_assert_eq!(w.len(), k * n);
    let mut r = 0;
    while r + ROW_BLOCK <= rows {
        let a_rows: [&[f32]; ROW_BLOCK] = std::array::from_fn(|i| &a[(r + i) * k..(r + i + 1) * k]);
        let mut j = 0;
        while j + 16 <= n {
            tile::<16>(&a_rows, w, bias, out, r, j);
            j += 16;
        }
        while j + 8 <= n {
            tile::<8>(&a_rows, w, bias, out, r, j);
            j += 8;
        }
        for jj in j..n {
            for (i, a_row) in a_rows.iter().enumerate() {
                let mut o = bias[jj];
                for kk in 0..k {
                    o += a_row[kk] * w[kk * n + jj];
                }
                out[(r + i) * n + jj] = o;
            }
        }
        r += ROW_BLOCK;
    }
    for rr in r..rows {
        let a_row = &a[rr * k..(rr + 1) * k];
        let o_row = &mut out[rr * n..(rr + 1) * n];
        o_row.copy_from_slice(bias);
        for (kk, &av) in a_row.iter().enumerate() {
            for (o, &wv) in o_row.iter_mut().zip(&w[kk * n..(kk + 1) * n]) {
                *o += av * wv;
            }
        }
    }
}

/// 3×3 cross-correlation, stride 1, zero "same" padding, weights `[3][3][c_in][c_out]`.
pub fn conv2d_3x3(input: &Tensor, weight: &[f32], bias: &[f32]) -> Result<Tensor> {
    let cin = input.channels;
    let cout = bias.len();
    check_len("conv3x3 weight", weight.len(), 9 * cin * cout)?;
    let (h, w) = (input.height, input.width);
    // im2col: one row of 9 * c_in taps per output pixel, zeros outside.
    let k = 9 * cin;
    let mut cols = vec![0.0f32; h * w * k];
    for y in 0..h {
        for x in 0..w {
            let row = &mut cols[(y * w + x) * k..(y * w + x + 1) * k];
            for ky in 0..3 {
                let Some(iy) = (y + ky).checked_sub(1).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..3 {
                    let Some(ix) = (x + kx).checked_sub(1).filter(|&v| v < w) else {
                        continue;
                    };
                    let t = (ky * 3 + kx) * cin;
                    row[t..t + cin].copy_from_slice(input.pixel(iy, ix));
                }
            }
        }
    }
    let mut out = Tensor::zeros(h, w, cout);
    matmul_bias(&cols, k, weight, bias, &mut out.data);
    Ok(out)
}

/// Per-channel 3×3 convolution, weights `[3][3][c]`.
pub fn depthwise_3x3(input: &Tensor, weight: &[f32], bias: &[f32]) -> Result<Tensor> {
    let c = input.channels;
    check_len("depthwise bias", bias.len(), c)?;
    check_len("depthwise weight", weight.len(), 9 * c)?;
    let mut out = Tensor::zeros(input.height, input.width, c);
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2.
        unsafe { depthwise_avx2(input, weight, bias, &mut out) };
        return Ok(out);
    }
    depthwise_portable(input, weight, bias, &mut out);
    Ok(out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn depthwise_avx2(input: &Tensor, weight: &[f32], bias: &[f32], out: &mut Tensor) {
    depthwise_portable(input, weight, bias, out)
}

/// Tap-major: each output still receives its bias first and then the taps
/// in ascending (ky, kx) order.
#[inline(always)]
fn depthwise_portable(input: &Tensor, weight: &[f32], bias: &[f32], out: &mut Tensor) {
    let (h, w, c) = (input.height, input.width, input.channels);
    for y in 0..h {
        let o_row = &mut out.data[y * w * c..(y + 1) * w * c];
        for px in o_row.chunks_exact_mut(c) {
            px.copy_from_slice(bias);
        }
        for ky in 0..3 {
            let Some(iy) = (y + ky).checked_sub(1).filter(|&v| v < h) else {
                continue;
            };
            let i_row = &input.data[iy * w * c..(iy + 1) * w * c];
            for kx in 0..3 {
                let wk = &weight[(ky * 3 + kx) * c..(ky * 3 + kx + 1) * c];
                // Output columns whose tap column x + kx - 1 is inside.
                let x_lo = usize::from(kx == 0);
                let x_hi = if kx == 2 { w - 1 } else { w };
                for x in x_lo..x_hi {
                    let ix = x + kx - 1;
                    let src = &i_row[ix * c..(ix + 1) * c];
                    let dst = &mut o_row[x * c..(x + 1) * c];
                    for ((d, &a), &wv) in dst.iter_mut().zip(src).zip(wk) {
                        *d += a * wv;
                    }
                }
            }
        }
    }
}

/// 1×1 convolution, weights `[c_in][c_out]`, sampling every `stride`-th pixel.
pub fn pointwise(input: &Tensor, weight: &[f32], bias: &[f32], stride: usize) -> Result<Tensor> {
    let cin = input.channels;
    let cout = bias.len();
    check_len("pointwise weight", weight.len(), cin * cout)?;
    if stride == 0 {
        return Err(Error::Contract("pointwise stride 0".into()));
    }
    let (oh, ow) = (input.height.div_ceil(stride), input.width.div_ceil(stride));
    let mut out = Tensor::zeros(oh, ow, cout);
    if stride == 1 {
        matmul_bias(&input.data, cin, weight, bias, &mut out.data);
    } else {
        let mut sampled = Vec::with_capacity(oh * ow * cin);
        for y in 0..oh {
            for x in 0..ow {
                sampled.extend_from_slice(input.pixel(y * stride, x * stride));
            }
        }
        matmul_bias(&sampled, cin, weight, bias, &mut out.data);
    }
    Ok(out)
}

pub fn depthwise_separable(
    input: &Tensor,
    dw_weight: &[f32],
    dw_bias: &[f32],
    pw_weight: &[f32],
    pw_bias: &[f32],
) -> Result<Tensor> {
    let mid = depthwise_3x3(input, dw_weight, dw_bias)?;
    pointwise(&mid, pw_weight, pw_bias, 1)
}

pub fn relu_inplace(t: &mut Tensor) {
    relu_slice(&mut t.data);
}

pub fn relu_slice(v: &mut [f32]) {
    for x in v {
        *x = x.max(0.0);
    }
}

/// 2×2 max pooling with stride 2; both spatial sizes must be even.
pub fn maxpool_2x2(input: &Tensor) -> Result<Tensor> {
    let (h, w, c) = (input.height, input.width, input.channels);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Contract(format!("maxpool on odd size {h}x{w}")));
    }
    let mut out = Tensor::zeros(h / 2, w / 2, c);
    for y in 0..h / 2 {
        for x in 0..w / 2 {
            let o = (y * (w / 2) + x) * c;
            let acc = &mut out.data[o..o + c];
            acc.copy_from_slice(input.pixel(2 * y, 2 * x));
            for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                for (a, &v) in acc.iter_mut().zip(input.pixel(2 * y + dy, 2 * x + dx)) {
                    *a = a.max(v);
                }
            }
        }
    }
    Ok(out)
}

pub fn add_inplace(acc: &mut Tensor, other: &Tensor) -> Result<()> {
    if (acc.height, acc.width, acc.channels) != (other.height, other.width, other.channels) {
        return Err(Error::Contract("residual add of mismatched tensors".into()));
    }
    for (a, &b) in acc.data.iter_mut().zip(&other.data) {
        *a += b;
    }
    Ok(())
}

pub fn global_avg_pool(input: &Tensor) -> Vec<f32> {
    let c = input.channels;
    let mut sum = vec![0.0f32; c];
    for px in input.data.chunks_exact(c.max(1)) {
        for (s, &v) in sum.iter_mut().zip(px) {
            *s += v;
        }
    }
    let n = (input.height * input.width) as f32;
    sum.iter_mut().for_each(|s| *s /= n);
    sum
}

/// Affine map with weights `[n_in][n_out]`.
pub fn dense(input: &[f32], weight: &[f32], bias: &[f32]) -> Result<Vec<f32>> {
    let m = bias.len();
    check_len("dense weight", weight.len(), input.len() * m)?;
    let mut out = bias.to_vec();
    for (i, &a) in input.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(&weight[i * m..(i + 1) * m]) {
            *o += a * wv;
        }
    }
    Ok(out)
}

pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exp: Vec<f32> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f32 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_all_ones() {
        let input = Tensor::from_vec(3, 3, 1, vec![1.0; 9]).unwrap();
        let out = conv2d_3x3(&input, &[1.0; 9], &[0.0]).unwrap();
        assert_eq!(out.at(1, 1, 0), 9.0);
        assert_eq!(out.at(0, 0, 0), 4.0);
        assert_eq!(out.at(0, 1, 0), 6.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let data: Vec<f32> = (0..20).map(|v| v as f32 * 0.1).collect();
        let input = Tensor::from_vec(4, 5, 1, data.clone()).unwrap();
        let mut k = [0.0; 9];
        k[4] = 1.0;
        assert_eq!(conv2d_3x3(&input, &k, &[0.0]).unwrap().data, data);
    }

    #[test]
    fn conv_shape_mismatch() {
        let input = Tensor::zeros(3, 3, 2);
        assert!(conv2d_3x3(&input, &[0.0; 9], &[0.0]).is_err());
        assert!(Tensor::from_vec(2, 2, 2, vec![0.0; 7]).is_err());
    }

    #[test]
    fn separable_identities() {
        let data: Vec<f32> = (0..36).map(|v| (v as f32).sin()).collect();
        let input = Tensor::from_vec(3, 4, 3, data.clone()).unwrap();
        let mut dw = vec![0.0; 27];
        dw[12..15].fill(1.0); // center tap for every channel
        let pw = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let out = depthwise_separable(&input, &dw, &[0.0; 3], &pw, &[0.0; 3]).unwrap();
        assert_eq!(out.data, data);
    }

    #[test]
    fn separable_single_channel_equals_factored_conv() {
        let data: Vec<f32> = (0..30).map(|v| (v as f32 * 0.37).cos()).collect();
        let input = Tensor::from_vec(5, 6, 1, data).unwrap();
        let dw: Vec<f32> = (0..9).map(|v| v as f32 * 0.1 - 0.4).collect();
        let pw = [0.5f32, -1.5];
        let sep = depthwise_separable(&input, &dw, &[0.0], &pw, &[0.0, 0.0]).unwrap();
        // Factored kernel: dw[k] * pw[co], laid out [3][3][1][2].
        let factored: Vec<f32> = dw.iter().flat_map(|&d| pw.map(|p| d * p)).collect();
        let conv = conv2d_3x3(&input, &factored, &[0.0, 0.0]).unwrap();
        for (a, b) in sep.data.iter().zip(&conv.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn maxpool_and_odd_sizes() {
        let input = Tensor::from_vec(2, 2, 1, vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!(maxpool_2x2(&input).unwrap().data, vec![3.0]);
        assert!(maxpool_2x2(&Tensor::zeros(3, 2, 1)).is_err());
    }

    #[test]
    fn dense_examples() {
        assert_eq!(
            dense(&[1.0, 2.0], &[1.0, 0.0, 0.0, 1.0], &[3.0, 4.0]).unwrap(),
            vec![4.0, 6.0]
        );
        assert_eq!(
            dense(&[0.3, -0.7], &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0]).unwrap(),
            vec![0.3, -0.7]
        );
        assert!(dense(&[1.0], &[1.0, 2.0, 3.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        assert_eq!(softmax(&[0.0; 5]), vec![0.2; 5]);
        let s = softmax(&[1000.0, -1000.0, 0.0]);
        assert!((s.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn plane_conversion() {
        let planes = [1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0];
        let t = Tensor::from_planes(2, 2, &planes).unwrap();
        assert_eq!(t.at(0, 1, 0), 2.0);
        assert_eq!(t.at(1, 1, 1), 40.0);
    }

    #[test]
    fn strided_pointwise_samples_even_pixels() {
        let data: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let input = Tensor::from_vec(4, 4, 1, data).unwrap();
        let out = pointwise(&input, &[2.0], &[1.0], 2).unwrap();
        assert_eq!(out.data, vec![1.0, 5.0, 17.0, 21.0]);
    }
}
