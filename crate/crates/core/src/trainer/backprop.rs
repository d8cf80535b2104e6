//! Training-mode forward pass with a tape, and the per-layer gradients.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::model::{LayerKind, ModelGraph};
use crate::normalization::ChannelStats;
use crate::tensor::{self, channel_moments, col2im, gemm, im2col, rows_per_chunk, ConvGeometry, Tensor};

static BACKWARD_PASSES: AtomicU64 = AtomicU64::new(0);

/// Number of full-network backward passes run by this process so far.
pub fn backward_pass_count() -> u64 {
    BACKWARD_PASSES.load(Ordering::SeqCst)
}

/// Gradients of a conv layer.
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<ConvGrads> {
    let (n, cin, h, w) = input.dims4()?;
    let (cout, _, kh, kw) = weight.dims4()?;
    let g = ConvGeometry::new(cin, (h, w), (kh, kw), stride, padding)?;
    let (k, p) = (g.patch_len(), g.out_len());
    ensure!(
        grad_out.shape() == [n, cout, g.ho, g.wo],
        Shape,
        "conv output gradient has shape {:?}, expected {:?}",
        grad_out.shape(),
        [n, cout, g.ho, g.wo]
    );
    let in_row = cin * h * w;
    let out_row = cout * p;
    let chunk_rows = rows_per_chunk(p);
    let mut grad_input = vec![0.0f32; n * in_row];

    let partials: Vec<Vec<f32>> = grad_input
        .par_chunks_mut(chunk_rows * in_row)
        .enumerate()
        .map(|(chunk, gin)| {
            let first = chunk * chunk_rows;
            let rows = gin.len() / in_row;
            let ld = rows * p;
            let mut cols = vec![0.0f32; k * ld];
            let mut dy = vec![0.0f32; cout * ld];
            for r in 0..rows {
                let x = &input.data()[(first + r) * in_row..(first + r + 1) * in_row];
                im2col(x, &g, &mut cols, ld, r * p);
                let gy = grad_out.row_data(first + r);
                for co in 0..cout {
                    dy[co * ld + r * p..co * ld + (r + 1) * p].copy_from_slice(&gy[co * p..(co + 1) * p]);
                }
            }
            // dW = dY · colsᵀ
            let mut dw = vec![0.0f32; cout * k];
            gemm(cout, ld, k, 1.0, &dy, (ld, 1), &cols, (1, ld), 0.0, &mut dw, (k, 1));
            // dcols = Wᵀ · dY
            let mut dcols = vec![0.0f32; k * ld];
            gemm(k, cout, ld, 1.0, weight.data(), (1, k), &dy, (ld, 1), 0.0, &mut dcols, (ld, 1));
            for r in 0..rows {
                col2im(&dcols, &g, ld, r * p, &mut gin[r * in_row..(r + 1) * in_row]);
            }
            dw
        })
        .collect();

    let mut grad_weight = vec![0.0f32; cout * k];
    for part in &partials {
        for (a, b) in grad_weight.iter_mut().zip(part) {
            *a += b;
        }
    }
    let mut grad_bias = vec![0.0f64; cout];
    for row in grad_out.data().chunks(out_row) {
        for (co, plane) in row.chunks(p).enumerate() {
            grad_bias[co] += plane.iter().map(|&v| f64::from(v)).sum::<f64>();
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape(), grad_input)?,
        weight: Tensor::new(weight.shape(), grad_weight)?,
        bias: grad_bias.into_iter().map(|v| v as f32).collect(),
    })
}

/// What a training-mode BN layer keeps for its backward pass.
#[derive(Clone, Debug)]
pub struct BnTrainCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f32>,
    pub batch_stats: ChannelStats,
}

/// Normalizes with the batch's own (biased) statistics.
pub fn bn_train_forward(x: &Tensor, gamma: &[f32], beta: &[f32], epsilon: f32) -> Result<(Tensor, BnTrainCache)> {
    let (_, c, h, w) = x.dims4()?;
    ensure!(gamma.len() == c && beta.len() == c, Shape, "BN parameters do not have {c} channels");
    let stats = channel_moments(x)?;
    let inv_std: Vec<f32> = stats
        .variance
        .iter()
        .map(|&v| (1.0 / (f64::from(v) + f64::from(epsilon)).sqrt()) as f32)
        .collect();
    let plane = h * w;
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for (i, ((src, xh), out)) in x
        .data()
        .chunks(plane)
        .zip(xhat.data_mut().chunks_mut(plane))
        .zip(y.data_mut().chunks_mut(plane))
        .enumerate()
    {
        let ch = i % c;
        let (mu, is) = (stats.mean[ch], inv_std[ch]);
        for ((s, xv), o) in src.iter().zip(xh.iter_mut()).zip(out.iter_mut()) {
            *xv = (s - mu) * is;
            *o = gamma[ch] * *xv + beta[ch];
        }
    }
    Ok((
        y,
        BnTrainCache {
            xhat,
            inv_std,
            batch_stats: stats,
        },
    ))
}

/// Returns (input gradient, γ gradient, β gradient).
pub fn bn_train_backward(grad_out: &Tensor, cache: &BnTrainCache, gamma: &[f32]) -> Result<(Tensor, Vec<f32>, Vec<f32>)> {
    let (n, c, h, w) = grad_out.dims4()?;
    ensure!(grad_out.shape() == cache.xhat.shape(), Shape, "BN gradient shape mismatch");
    let plane = h * w;
    let m = (n * plane) as f64;
    let mut sum_dy = vec![0.0f64; c];
    let mut sum_dy_xhat = vec![0.0f64; c];
    for (i, (dy, xh)) in grad_out.data().chunks(plane).zip(cache.xhat.data().chunks(plane)).enumerate() {
        let ch = i % c;
        for (&d, &x) in dy.iter().zip(xh) {
            sum_dy[ch] += f64::from(d);
            sum_dy_xhat[ch] += f64::from(d) * f64::from(x);
        }
    }
    let mut dx = Tensor::zeros(grad_out.shape());
    for (i, ((dy, xh), out)) in grad_out
        .data()
        .chunks(plane)
        .zip(cache.xhat.data().chunks(plane))
        .zip(dx.data_mut().chunks_mut(plane))
        .enumerate()
    {
        let ch = i % c;
        let scale = f64::from(gamma[ch]) * f64::from(cache.inv_std[ch]) / m;
        for ((&d, &x), o) in dy.iter().zip(xh).zip(out.iter_mut()) {
            *o = (scale * (m * f64::from(d) - sum_dy[ch] - f64::from(x) * sum_dy_xhat[ch])) as f32;
        }
    }
    Ok((
        dx,
        sum_dy_xhat.into_iter().map(|v| v as f32).collect(),
        sum_dy.into_iter().map(|v| v as f32).collect(),
    ))
}

/// Passes gradient where the ReLU output was positive.
pub fn relu_backward(output: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut g = grad_out.clone();
    for (d, &y) in g.data_mut().iter_mut().zip(output.data()) {
        if y <= 0.0 {
            *d = 0.0;
        }
    }
    g
}

pub fn avg_pool2d_backward(input_shape: &[usize], grad_out: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let mut gin = Tensor::zeros(input_shape);
    let (_, _, h, w) = gin.dims4()?;
    let (_, _, ho, wo) = grad_out.dims4()?;
    let share = 1.0 / (window * window) as f32;
    for (plane, g) in gin.data_mut().chunks_mut(h * w).zip(grad_out.data().chunks(ho * wo)) {
        for oy in 0..ho {
            for ox in 0..wo {
                let v = g[oy * wo + ox] * share;
                for dy in 0..window {
                    let row = (oy * stride + dy) * w + ox * stride;
                    for cell in &mut plane[row..row + window] {
                        *cell += v;
                    }
                }
            }
        }
    }
    Ok(gin)
}

/// Routes each output gradient to the first maximal input in its window.
pub fn max_pool2d_backward(input: &Tensor, grad_out: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let (_, _, h, w) = input.dims4()?;
    let (_, _, ho, wo) = grad_out.dims4()?;
    let mut gin = Tensor::zeros(input.shape());
    for ((plane, gplane), g) in input
        .data()
        .chunks(h * w)
        .zip(gin.data_mut().chunks_mut(h * w))
        .zip(grad_out.data().chunks(ho * wo))
    {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = (f32::NEG_INFINITY, 0);
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = (oy * stride + dy) * w + ox * stride + dx;
                        if plane[idx] > best.0 {
                            best = (plane[idx], idx);
                        }
                    }
                }
                gplane[best.1] += g[oy * wo + ox];
            }
        }
    }
    Ok(gin)
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let mut gin = Tensor::zeros(input_shape);
    let (_, _, h, w) = gin.dims4()?;
    let share = 1.0 / (h * w) as f32;
    for (plane, &g) in gin.data_mut().chunks_mut(h * w).zip(grad_out.data()) {
        plane.fill(g * share);
    }
    Ok(gin)
}

/// Returns (input gradient, weight gradient, bias gradient).
pub fn linear_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Vec<f32>)> {
    let (n, d) = (input.shape()[0], input.shape()[1]);
    let k = weight.shape()[0];
    ensure!(grad_out.shape() == [n, k], Shape, "linear gradient shape mismatch");
    let mut dx = vec![0.0f32; n * d];
    gemm(n, k, d, 1.0, grad_out.data(), (k, 1), weight.data(), (d, 1), 0.0, &mut dx, (d, 1));
    let mut dw = vec![0.0f32; k * d];
    gemm(k, n, d, 1.0, grad_out.data(), (1, k), input.data(), (d, 1), 0.0, &mut dw, (d, 1));
    let db = (0..k)
        .map(|j| (0..n).map(|i| f64::from(grad_out.data()[i * k + j])).sum::<f64>() as f32)
        .collect();
    Ok((Tensor::new(&[n, d], dx)?, Tensor::new(&[k, d], dw)?, db))
}

enum Saved {
    Conv { input: Tensor },
    Bn(BnTrainCache),
    Relu { output: Tensor },
    AvgPool { input_shape: Vec<usize> },
    MaxPool { input: Tensor },
    GlobalAvgPool { input_shape: Vec<usize> },
    Flatten { input_shape: Vec<usize> },
    Linear { input: Tensor },
    ResidualBegin,
    ResidualEnd { shortcut: Option<Tensor> },
}

/// Activations recorded by [`train_forward`].
pub struct Tape {
    saved: Vec<Saved>,
}

impl Tape {
    /// Batch statistics seen by each BN layer, keyed by layer name.
    pub fn batch_stats<'a>(&'a self, model: &'a ModelGraph) -> impl Iterator<Item = (&'a str, &'a ChannelStats)> + 'a {
        model.layers().iter().zip(&self.saved).filter_map(|(layer, s)| match s {
            Saved::Bn(cache) => Some((layer.name.as_str(), &cache.batch_stats)),
            _ => None,
        })
    }
}

/// Forward pass with BN on batch statistics; returns logits and the tape.
pub fn train_forward(model: &ModelGraph, batch: &Tensor) -> Result<(Tensor, Tape)> {
    let mut x = batch.clone();
    let mut saved = Vec::with_capacity(model.layers().len());
    let mut shortcuts: Vec<Tensor> = Vec::new();
    for layer in model.layers() {
        let name = layer.name.as_str();
        let weight = |suffix: &str| model.param(&format!("{name}.{suffix}"));
        let (next, entry) = match &layer.kind {
            LayerKind::Conv { stride, padding, .. } => {
                let y = tensor::conv2d(&x, weight("weight")?, weight("bias")?.data(), *stride, *padding)?;
                (y, Saved::Conv { input: x })
            }
            LayerKind::BatchNorm { .. } => {
                let (y, cache) = bn_train_forward(&x, weight("gamma")?.data(), weight("beta")?.data(), model.bn_epsilon())?;
                (y, Saved::Bn(cache))
            }
            LayerKind::Relu => {
                let y = tensor::relu(&x);
                (y.clone(), Saved::Relu { output: y })
            }
            LayerKind::AvgPool { window, stride } => (
                tensor::avg_pool2d(&x, *window, *stride)?,
                Saved::AvgPool { input_shape: x.shape().to_vec() },
            ),
            LayerKind::MaxPool { window, stride } => (tensor::max_pool2d(&x, *window, *stride)?, Saved::MaxPool { input: x }),
            LayerKind::GlobalAvgPool => (
                tensor::global_avg_pool(&x)?,
                Saved::GlobalAvgPool { input_shape: x.shape().to_vec() },
            ),
            LayerKind::Flatten => {
                let shape = x.shape().to_vec();
                let n = shape[0];
                let d = x.len() / n;
                (x.reshape(&[n, d])?, Saved::Flatten { input_shape: shape })
            }
            LayerKind::Linear { .. } => {
                let y = tensor::linear(&x, weight("weight")?, weight("bias")?.data())?;
                (y, Saved::Linear { input: x })
            }
            LayerKind::ResidualBegin => {
                shortcuts.push(x.clone());
                (x, Saved::ResidualBegin)
            }
            LayerKind::ResidualEnd { projection } => {
                let s = shortcuts
                    .pop()
                    .ok_or_else(|| Error::Invariant(format!("`{name}` has no open shortcut")))?;
                let (added, keep) = match projection {
                    Some(p) => (
                        tensor::conv2d(&s, weight("weight")?, weight("bias")?.data(), p.stride, 0)?,
                        Some(s),
                    ),
                    None => (s, None),
                };
                ensure!(added.shape() == x.shape(), Shape, "`{name}`: shortcut and branch shapes differ");
                let mut y = x;
                for (o, a) in y.data_mut().iter_mut().zip(added.data()) {
                    *o += a;
                }
                (y, Saved::ResidualEnd { shortcut: keep })
            }
        };
        saved.push(entry);
        x = next;
    }
    Ok((x, Tape { saved }))
}

/// Backpropagates `grad_logits` through the tape; returns gradients keyed by
/// parameter name, plus the gradient with respect to the input batch.
pub fn backward(model: &ModelGraph, tape: Tape, grad_logits: &Tensor) -> Result<(BTreeMap<String, Tensor>, Tensor)> {
    BACKWARD_PASSES.fetch_add(1, Ordering::SeqCst);
    let mut grads = BTreeMap::new();
    let mut g = grad_logits.clone();
    let mut shortcut_grads: Vec<Tensor> = Vec::new();
    for (layer, saved) in model.layers().iter().zip(tape.saved).rev() {
        let name = layer.name.as_str();
        let mut put = |suffix: &str, t: Tensor| {
            grads.insert(format!("{name}.{suffix}"), t);
        };
        g = match (&layer.kind, saved) {
            (LayerKind::Conv { stride, padding, .. }, Saved::Conv { input }) => {
                let cg = conv2d_backward(&input, model.param(&format!("{name}.weight"))?, &g, *stride, *padding)?;
                put("weight", cg.weight);
                let c = cg.bias.len();
                put("bias", Tensor::new(&[c], cg.bias)?);
                cg.input
            }
            (LayerKind::BatchNorm { .. }, Saved::Bn(cache)) => {
                let gamma = model.param(&format!("{name}.gamma"))?;
                let (dx, dgamma, dbeta) = bn_train_backward(&g, &cache, gamma.data())?;
                let c = dgamma.len();
                put("gamma", Tensor::new(&[c], dgamma)?);
                put("beta", Tensor::new(&[c], dbeta)?);
                dx
            }
            (LayerKind::Relu, Saved::Relu { output }) => relu_backward(&output, &g),
            (LayerKind::AvgPool { window, stride }, Saved::AvgPool { input_shape }) => {
                avg_pool2d_backward(&input_shape, &g, *window, *stride)?
            }
            (LayerKind::MaxPool { window, stride }, Saved::MaxPool { input }) => {
                max_pool2d_backward(&input, &g, *window, *stride)?
            }
            (LayerKind::GlobalAvgPool, Saved::GlobalAvgPool { input_shape }) => {
                global_avg_pool_backward(&input_shape, &g)?
            }
            (LayerKind::Flatten, Saved::Flatten { input_shape }) => g.reshape(&input_shape)?,
            (LayerKind::Linear { .. }, Saved::Linear { input }) => {
                let (dx, dw, db) = linear_backward(&input, model.param(&format!("{name}.weight"))?, &g)?;
                put("weight", dw);
                let k = db.len();
                put("bias", Tensor::new(&[k], db)?);
                dx
            }
            (LayerKind::ResidualEnd { projection }, Saved::ResidualEnd { shortcut }) => {
                let to_shortcut = match (projection, shortcut) {
                    (Some(p), Some(input)) => {
                        let cg = conv2d_backward(&input, model.param(&format!("{name}.weight"))?, &g, p.stride, 0)?;
                        put("weight", cg.weight);
                        let c = cg.bias.len();
                        put("bias", Tensor::new(&[c], cg.bias)?);
                        cg.input
                    }
                    _ => g.clone(),
                };
                shortcut_grads.push(to_shortcut);
                g
            }
            (LayerKind::ResidualBegin, Saved::ResidualBegin) => {
                let s = shortcut_grads
                    .pop()
                    .ok_or_else(|| Error::Invariant(format!("`{name}` has no pending shortcut gradient")))?;
                let mut g = g;
                for (a, b) in g.data_mut().iter_mut().zip(s.data()) {
                    *a += b;
                }
                g
            }
            _ => return Err(Error::Invariant(format!("tape does not match layer `{name}`"))),
        };
    }
    Ok((grads, g))
}
