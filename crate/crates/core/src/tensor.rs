//! Dense NCHW tensors and the forward numeric kernels.
//!
//! A [`Tensor`] has rank 1 to 4 with extents ordered (instances, channels,
//! height, width). Reductions accumulate in `f64` and store `f32`.

use std::ops::Range;

use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::normalization::ChannelStats;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        ensure!(
            (1..=4).contains(&shape.len()),
            Shape,
            "rank must be 1..=4, got {}",
            shape.len()
        );
        ensure!(
            shape.iter().all(|&d| d >= 1),
            Shape,
            "all extents must be positive, got {shape:?}"
        );
        let len: usize = shape.iter().product();
        ensure!(
            len == data.len(),
            Shape,
            "shape {shape:?} needs {len} elements, got {}",
            data.len()
        );
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Panics on an invalid shape; use [`Tensor::new`] for untrusted extents.
    pub fn full(shape: &[usize], value: f32) -> Self {
        let len = shape.iter().product();
        Tensor::new(shape, vec![value; len]).expect("invalid tensor shape")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
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

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Extents as (N, C, H, W); errors unless the tensor has rank 4.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::Shape(format!(
                "expected a rank-4 NCHW tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// Number of rows along the leading axis.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Rows `range` along the leading axis, keeping the rank.
    pub fn slice_rows(&self, range: Range<usize>) -> Result<Tensor> {
        ensure!(
            range.start < range.end && range.end <= self.rows(),
            Shape,
            "row range {range:?} out of bounds for {} rows",
            self.rows()
        );
        let stride = self.row_len();
        let mut shape = self.shape.clone();
        shape[0] = range.len();
        Tensor::new(
            &shape,
            self.data[range.start * stride..range.end * stride].to_vec(),
        )
    }

    pub fn row(&self, index: usize) -> Result<Tensor> {
        self.slice_rows(index..index + 1)
    }

    pub fn row_data(&self, index: usize) -> &[f32] {
        let stride = self.row_len();
        &self.data[index * stride..(index + 1) * stride]
    }

    /// Stacks tensors along the leading axis; trailing extents must agree.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("cannot concatenate zero tensors".into()))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::with_capacity(parts.iter().map(Tensor::len).sum());
        for part in parts {
            ensure!(
                part.rank() == first.rank() && &part.shape[1..] == tail,
                Shape,
                "cannot stack shape {:?} onto {:?}",
                part.shape,
                first.shape
            );
            rows += part.shape[0];
            data.extend_from_slice(&part.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Tensor::new(&shape, data)
    }

    /// The whole tensor repeated `times` times along the leading axis.
    pub fn repeat_rows(&self, times: usize) -> Result<Tensor> {
        ensure!(times >= 1, Shape, "repeat count must be positive");
        let mut shape = self.shape.clone();
        shape[0] *= times;
        Tensor::new(&shape, self.data.repeat(times))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// `c = alpha * a·b + beta * c` over strided row/column views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len(), "gemm: lhs view out of bounds");
        assert!(last(k, n, rsb, csb) < b.len(), "gemm: rhs view out of bounds");
    }
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: output view out of bounds");
    // SAFETY: every index the kernel touches lies inside the asserted views.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Geometry of a 2-D convolution over one channel plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn new(
        cin: usize,
        (h, w): (usize, usize),
        (kh, kw): (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        ensure!(stride >= 1, InvalidArgument, "stride must be positive");
        let out = |size: usize, k: usize| -> Result<usize> {
            let padded = size + 2 * pad;
            ensure!(
                padded >= k,
                Shape,
                "kernel extent {k} exceeds padded input extent {padded}"
            );
            Ok((padded - k) / stride + 1)
        };
        let ho = out(h, kh)?;
        let wo = out(w, kw)?;
        Ok(ConvGeometry {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `ox` whose input column `ox*stride + kx - pad` is in range.
    fn valid_cols(&self, kx: usize) -> Range<usize> {
        valid_range(self.w, self.wo, kx, self.stride, self.pad)
    }

    fn valid_rows(&self, ky: usize) -> Range<usize> {
        valid_range(self.h, self.ho, ky, self.stride, self.pad)
    }
}

fn valid_range(size: usize, out: usize, k: usize, stride: usize, pad: usize) -> Range<usize> {
    // o*stride + k - pad in [0, size)
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if size + pad > k {
        ((size + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    lo.min(hi)..hi
}

/// Unfolds one image (`cin·h·w` values) into `cols[row * ld + col_off ..]`,
/// one row per (channel, ky, kx) and one column per output position.
pub(crate) fn im2col(x: &[f32], g: &ConvGeometry, cols: &mut [f32], ld: usize, col_off: usize) {
    let plane = g.h * g.w;
    for ci in 0..g.cin {
        let src = &x[ci * plane..(ci + 1) * plane];
        for ky in 0..g.kh {
            let rows = g.valid_rows(ky);
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ld + col_off..row * ld + col_off + g.out_len()];
                let cols_ok = g.valid_cols(kx);
                for oy in 0..g.ho {
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if !rows.contains(&oy) || cols_ok.is_empty() {
                        line.fill(0.0);
                        continue;
                    }
                    let iy = oy * g.stride + ky - g.pad;
                    line[..cols_ok.start].fill(0.0);
                    line[cols_ok.end..].fill(0.0);
                    let ix0 = cols_ok.start * g.stride + kx - g.pad;
                    let src_line = &src[iy * g.w..(iy + 1) * g.w];
                    if g.stride == 1 {
                        line[cols_ok.clone()]
                            .copy_from_slice(&src_line[ix0..ix0 + cols_ok.len()]);
                    } else {
                        for (j, ox) in cols_ok.clone().enumerate() {
                            line[ox] = src_line[ix0 + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates column values back into one image.
pub(crate) fn col2im(cols: &[f32], g: &ConvGeometry, ld: usize, col_off: usize, x: &mut [f32]) {
    let plane = g.h * g.w;
    for ci in 0..g.cin {
        let dst = &mut x[ci * plane..(ci + 1) * plane];
        for ky in 0..g.kh {
            let rows = g.valid_rows(ky);
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ld + col_off..row * ld + col_off + g.out_len()];
                let cols_ok = g.valid_cols(kx);
                for oy in rows.clone() {
                    let iy = oy * g.stride + ky - g.pad;
                    for ox in cols_ok.clone() {
                        let ix = ox * g.stride + kx - g.pad;
                        dst[iy * g.w + ix] += src[oy * g.wo + ox];
                    }
                }
            }
        }
    }
}

/// Target number of GEMM columns per work chunk. Chunking depends only on
/// shapes, never on the worker count, so results are thread-count invariant.
const COLUMNS_PER_CHUNK: usize = 1024;

pub(crate) fn rows_per_chunk(columns_per_row: usize) -> usize {
    COLUMNS_PER_CHUNK.div_ceil(columns_per_row).max(1)
}

/// Zero-padded cross-correlation, NCHW input and OIHW weights.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &[f32],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (n, cin, h, w) = input.dims4()?;
    let (cout, wcin, kh, kw) = weight.dims4()?;
    ensure!(
        cin == wcin,
        Shape,
        "conv input has {cin} channels, weight expects {wcin}"
    );
    ensure!(
        bias.len() == cout,
        Shape,
        "conv bias has {} entries, expected {cout}",
        bias.len()
    );
    let g = ConvGeometry::new(cin, (h, w), (kh, kw), stride, padding)?;
    let (k, p) = (g.patch_len(), g.out_len());
    let in_row = cin * h * w;
    let out_row = cout * p;
    let mut out = vec![0.0f32; n * out_row];
    let chunk_rows = rows_per_chunk(p);

    out.par_chunks_mut(chunk_rows * out_row)
        .enumerate()
        .for_each(|(chunk, out_chunk)| {
            let first = chunk * chunk_rows;
            let rows = out_chunk.len() / out_row;
            let ld = rows * p;
            if rows == 1 {
                // A single row's [cout, p] product is already NCHW.
                for (co, dst) in out_chunk.chunks_mut(p).enumerate() {
                    dst.fill(bias[co]);
                }
                let x = &input.data[first * in_row..(first + 1) * in_row];
                if g.is_pointwise() {
                    gemm(cout, k, p, 1.0, &weight.data, (k, 1), x, (p, 1), 1.0, out_chunk, (p, 1));
                } else {
                    let mut cols = vec![0.0f32; k * p];
                    im2col(x, &g, &mut cols, p, 0);
                    gemm(cout, k, p, 1.0, &weight.data, (k, 1), &cols, (p, 1), 1.0, out_chunk, (p, 1));
                }
                return;
            }
            let mut cols = vec![0.0f32; k * ld];
            for r in 0..rows {
                let x = &input.data[(first + r) * in_row..(first + r + 1) * in_row];
                im2col(x, &g, &mut cols, ld, r * p);
            }
            let mut result = vec![0.0f32; cout * ld];
            gemm(cout, k, ld, 1.0, &weight.data, (k, 1), &cols, (ld, 1), 0.0, &mut result, (ld, 1));
            for r in 0..rows {
                for co in 0..cout {
                    let src = &result[co * ld + r * p..co * ld + (r + 1) * p];
                    let dst = &mut out_chunk[r * out_row + co * p..r * out_row + (co + 1) * p];
                    let b = bias[co];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = s + b;
                    }
                }
            }
        });
    Tensor::new(&[n, cout, g.ho, g.wo], out)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

#[derive(Clone, Copy)]
enum PoolKind {
    Avg,
    Max,
}

fn pool2d(x: &Tensor, window: usize, stride: usize, kind: PoolKind) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    ensure!(window >= 1 && stride >= 1, InvalidArgument, "pool window and stride must be positive");
    ensure!(
        window <= h && window <= w,
        Shape,
        "pool window {window} exceeds input extent {h}x{w}"
    );
    let ho = (h - window) / stride + 1;
    let wo = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let area = (window * window) as f64;
    for plane in x.data.chunks(h * w) {
        for oy in 0..ho {
            for ox in 0..wo {
                let cells = (0..window).flat_map(|dy| {
                    let row = (oy * stride + dy) * w + ox * stride;
                    plane[row..row + window].iter().copied()
                });
                out.push(match kind {
                    PoolKind::Avg => (cells.map(f64::from).sum::<f64>() / area) as f32,
                    PoolKind::Max => cells.fold(f32::NEG_INFINITY, f32::max),
                });
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

pub fn avg_pool2d(x: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    pool2d(x, window, stride, PoolKind::Avg)
}

pub fn max_pool2d(x: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    pool2d(x, window, stride, PoolKind::Max)
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let means = x
        .data
        .chunks(h * w)
        .map(|plane| (plane.iter().map(|&v| f64::from(v)).sum::<f64>() / (h * w) as f64) as f32)
        .collect();
    Tensor::new(&[n, c, 1, 1], means)
}

/// `x · weightᵀ + bias` for `x: [N, D]`, `weight: [K, D]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &[f32]) -> Result<Tensor> {
    let (n, d) = match *x.shape() {
        [n, d] => (n, d),
        _ => return Err(Error::Shape(format!("linear expects [N, D] input, got {:?}", x.shape()))),
    };
    let (k, wd) = match *weight.shape() {
        [k, wd] => (k, wd),
        _ => {
            return Err(Error::Shape(format!(
                "linear expects [K, D] weight, got {:?}",
                weight.shape()
            )))
        }
    };
    ensure!(d == wd, Shape, "linear input width {d} != weight width {wd}");
    ensure!(bias.len() == k, Shape, "linear bias has {} entries, expected {k}", bias.len());
    let mut out: Vec<f32> = (0..n).flat_map(|_| bias.iter().copied()).collect();
    gemm(n, d, k, 1.0, &x.data, (d, 1), &weight.data, (1, d), 1.0, &mut out, (k, 1));
    Tensor::new(&[n, k], out)
}

/// Numerically safe softmax (max-subtracted, `f64` accumulation).
pub fn softmax(logits: &[f32]) -> Result<Vec<f32>> {
    ensure!(!logits.is_empty(), InvalidArgument, "softmax of an empty vector");
    ensure!(
        logits.iter().all(|v| v.is_finite()),
        InvalidArgument,
        "softmax input contains non-finite values"
    );
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|&v| f64::from(v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| (e / total) as f32).collect())
}

/// f64 sum of `xs`, or of `(x − center)²` when `center` is given. Eight
/// independent lanes keep the loop vectorizable; the lane split depends only
/// on the slice length.
pub(crate) fn lane_sum(xs: &[f32], center: Option<f64>) -> f64 {
    const LANES: usize = 8;
    let mut acc = [0.0f64; LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail = chunks.remainder();
    match center {
        None => {
            for c in chunks {
                for (a, &v) in acc.iter_mut().zip(c) {
                    *a += f64::from(v);
                }
            }
            for (a, &v) in acc.iter_mut().zip(tail) {
                *a += f64::from(v);
            }
        }
        Some(mu) => {
            for c in chunks {
                for (a, &v) in acc.iter_mut().zip(c) {
                    let d = f64::from(v) - mu;
                    *a += d * d;
                }
            }
            for (a, &v) in acc.iter_mut().zip(tail) {
                let d = f64::from(v) - mu;
                *a += d * d;
            }
        }
    }
    acc.iter().sum()
}

/// Per-channel mean and population variance over (N, H, W).
pub fn channel_moments(x: &Tensor) -> Result<ChannelStats> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let count = (n * plane) as f64;
    let mut mean = Vec::with_capacity(c);
    let mut variance = Vec::with_capacity(c);
    for ch in 0..c {
        let planes = || (0..n).map(move |i| &x.data[(i * c + ch) * plane..(i * c + ch + 1) * plane]);
        let mu = planes().map(|p| lane_sum(p, None)).sum::<f64>() / count;
        let var = planes().map(|p| lane_sum(p, Some(mu))).sum::<f64>() / count;
        mean.push(mu as f32);
        variance.push(var as f32);
    }
    ChannelStats::new(mean, variance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let len = shape.iter().product();
        t(shape, &(0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>())
    }

    // Direct nested-loop reference, accumulated in f64.
    fn naive_conv(x: &Tensor, wt: &Tensor, b: &[f32], stride: usize, pad: usize) -> Vec<f64> {
        let (n, cin, h, w) = x.dims4().unwrap();
        let (cout, _, kh, kw) = wt.dims4().unwrap();
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let mut out = Vec::new();
        for i in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = f64::from(b[co]);
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = x.data[((i * cin + ci) * h + iy as usize) * w + ix as usize];
                                    let wv = wt.data[((co * cin + ci) * kh + ky) * kw + kx];
                                    acc += f64::from(xv) * f64::from(wv);
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
        out
    }

    fn assert_rel_close(got: &[f32], want: &[f64], tol: f64) {
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want) {
            let err = (f64::from(*g) - w).abs() / w.abs().max(1.0);
            assert!(err <= tol, "got {g}, want {w}, rel err {err}");
        }
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(&[0, 2], vec![]).is_err());
        assert!(Tensor::new(&[1, 1, 1, 1, 1], vec![0.0]).is_err());
        assert!(Tensor::new(&[], vec![]).is_err());
    }

    #[test]
    fn conv_scaling_kernel_doubles() {
        let x = t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let w = t(&[1, 1, 1, 1], &[2.0]);
        let y = conv2d(&x, &w, &[0.0], 1, 0).unwrap();
        assert_eq!(y.data(), &[2., 4., 6., 8., 10., 12., 14., 16., 18.]);
    }

    #[test]
    fn conv_averages_constant() {
        let x = Tensor::full(&[1, 1, 3, 3], 5.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0);
        let y = conv2d(&x, &w, &[0.0], 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert!((y.data()[0] - 5.0).abs() < 1e-6);
    }

    #[test]
    fn conv_zero_weight_broadcasts_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 3, 5, 5], &mut rng);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        let y = conv2d(&x, &w, &[0.75], 2, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor::zeros(&[1, 2, 3, 3]);
        assert!(conv2d(&x, &Tensor::zeros(&[1, 3, 1, 1]), &[0.0], 1, 0).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 5, 5]), &[0.0], 1, 0).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 1, 1]), &[0.0, 0.0], 1, 0).is_err());
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for case in 0..40 {
            let n = rng.random_range(1..4);
            let cin = rng.random_range(1..5);
            let cout = rng.random_range(1..6);
            let h = rng.random_range(4..9);
            let w = rng.random_range(4..9);
            let k = rng.random_range(1..4);
            let stride = rng.random_range(1..3);
            let pad = rng.random_range(0..2);
            let x = random(&[n, cin, h, w], &mut rng);
            let wt = random(&[cout, cin, k, k], &mut rng);
            let b: Vec<f32> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = conv2d(&x, &wt, &b, stride, pad).unwrap();
            assert_rel_close(y.data(), &naive_conv(&x, &wt, &b, stride, pad), 1e-5);
            assert!(y.is_finite(), "case {case}");
        }
    }

    #[test]
    fn conv_chunking_does_not_change_rows() {
        // Enough rows to span several work chunks.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[40, 2, 12, 12], &mut rng);
        let wt = random(&[3, 2, 3, 3], &mut rng);
        let all = conv2d(&x, &wt, &[0.1, 0.2, 0.3], 1, 1).unwrap();
        for r in [0, 17, 39] {
            let one = conv2d(&x.row(r).unwrap(), &wt, &[0.1, 0.2, 0.3], 1, 1).unwrap();
            for (a, b) in one.data().iter().zip(all.row_data(r)) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn relu_cases() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        assert!(relu(&t(&[2], &[-3.0, -0.5])).data().iter().all(|&v| v == 0.0));
        assert_eq!(relu(&relu(&x)), relu(&x));
    }

    #[test]
    fn pooling_hand_cases() {
        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        assert_eq!(avg_pool2d(&x, 2, 2).unwrap().data(), &[2.5]);
        assert_eq!(max_pool2d(&x, 2, 2).unwrap().data(), &[4.0]);
        let c = Tensor::full(&[2, 3, 4, 4], 1.5);
        assert!(avg_pool2d(&c, 2, 1).unwrap().data().iter().all(|&v| v == 1.5));
        assert!(max_pool2d(&c, 3, 1).unwrap().data().iter().all(|&v| v == 1.5));
        assert!(avg_pool2d(&x, 3, 1).is_err());
        let single = t(&[2, 3, 1, 1], &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(global_avg_pool(&single).unwrap(), single);
    }

    #[test]
    fn linear_cases() {
        let x = t(&[1, 2], &[1.0, 2.0]);
        let y = linear(&x, &t(&[1, 2], &[3.0, 4.0]), &[1.0]).unwrap();
        assert_eq!(y.data(), &[12.0]);
        let eye = t(&[2, 2], &[1., 0., 0., 1.]);
        let x2 = t(&[2, 2], &[0.5, -1.5, 2.0, 3.0]);
        assert_eq!(linear(&x2, &eye, &[0.0, 0.0]).unwrap(), x2);
        let z = linear(&x2, &Tensor::zeros(&[3, 2]), &[1., 2., 3.]).unwrap();
        assert_eq!(z.data(), &[1., 2., 3., 1., 2., 3.]);
        assert!(linear(&x2, &Tensor::zeros(&[3, 3]), &[0.; 3]).is_err());
    }

    #[test]
    fn linear_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let (n, d, k) = (rng.random_range(4..9), rng.random_range(4..9), rng.random_range(4..9));
            let x = random(&[n, d], &mut rng);
            let w = random(&[k, d], &mut rng);
            let b: Vec<f32> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let want: Vec<f64> = (0..n)
                .flat_map(|i| {
                    let (x, w, b) = (&x, &w, &b);
                    (0..k).map(move |j| {
                        f64::from(b[j])
                            + (0..d)
                                .map(|e| f64::from(x.data[i * d + e]) * f64::from(w.data[j * d + e]))
                                .sum::<f64>()
                    })
                })
                .collect();
            assert_rel_close(linear(&x, &w, &b).unwrap().data(), &want, 1e-5);
        }
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[0.0, std::f32::consts::LN_2]).unwrap();
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-6 && (p[1] - 2.0 / 3.0).abs() < 1e-6);
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-6 && p[1] < 1e-30);
        assert!(softmax(&[f32::NAN]).is_err());
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn moments_hand_cases() {
        let s = channel_moments(&t(&[1, 1, 2, 2], &[1., 3., 5., 7.])).unwrap();
        assert_eq!((s.mean[0], s.variance[0]), (4.0, 5.0));
        let c = channel_moments(&Tensor::full(&[2, 3, 4, 4], -2.5)).unwrap();
        assert!(c.mean.iter().all(|&m| m == -2.5));
        assert!(c.variance.iter().all(|&v| v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random(&[1, 3, 5, 5], &mut rng);
        let twice = Tensor::concat_rows(&[img.clone(), img.clone()]).unwrap();
        assert_eq!(channel_moments(&img).unwrap(), channel_moments(&twice).unwrap());
    }

    #[test]
    fn row_helpers() {
        let x = t(&[3, 2], &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(x.slice_rows(1..3).unwrap().data(), &[3., 4., 5., 6.]);
        assert_eq!(x.row(2).unwrap().shape(), &[1, 2]);
        assert!(x.slice_rows(2..4).is_err());
        assert_eq!(x.repeat_rows(2).unwrap().shape(), &[6, 2]);
        let y = Tensor::concat_rows(&[x.row(0).unwrap(), x.row(2).unwrap()]).unwrap();
        assert_eq!(y.data(), &[1., 2., 5., 6.]);
    }

    proptest! {
        #[test]
        fn moments_variance_matches_raw_moments(
            data in proptest::collection::vec(-10.0f32..10.0, 2 * 3 * 4 * 4)
        ) {
            let x = t(&[2, 3, 4, 4], &data);
            let s = channel_moments(&x).unwrap();
            for c in 0..3 {
                let vals: Vec<f64> = (0..2)
                    .flat_map(|i| x.data[(i * 3 + c) * 16..(i * 3 + c + 1) * 16].iter().map(|&v| f64::from(v)))
                    .collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let m2 = vals.iter().map(|v| v * v).sum::<f64>() / vals.len() as f64;
                let want = m2 - m * m;
                prop_assert!((f64::from(s.variance[c]) - want).abs() <= 1e-5 * want.abs().max(1.0));
                prop_assert!(s.variance[c] >= 0.0);
            }
        }

        #[test]
        fn softmax_normalized_and_shift_invariant(
            logits in proptest::collection::vec(-50.0f32..50.0, 1..16),
            shift in -20.0f32..20.0,
        ) {
            let p = softmax(&logits).unwrap();
            let total: f64 = p.iter().map(|&v| f64::from(v)).sum();
            prop_assert!((total - 1.0).abs() <= 1e-6);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            let shifted: Vec<f32> = logits.iter().map(|v| v + shift).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }

        #[test]
        fn kernels_are_pure(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&[2, 2, 6, 6], &mut rng);
            let w = random(&[3, 2, 3, 3], &mut rng);
            let a = conv2d(&x, &w, &[0.0; 3], 1, 1).unwrap();
            let b = conv2d(&x, &w, &[0.0; 3], 1, 1).unwrap();
            prop_assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
