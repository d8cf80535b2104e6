use super::*;
use crate::data::synthetic_dataset;
use crate::model::{forward, BnLayerMode, BnMode, LayerKind};
use crate::tensor::channel_moments;
use rand::Rng;
use rand_distr::{Distribution, Normal};

const STEP: f64 = 1e-3;
const TOL: f64 = 1e-3;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_vec(len: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

// ---- f64 reference layers, written as direct loops ----

fn ref_conv(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], b: &[f64], stride: usize, pad: usize) -> (Vec<f64>, [usize; 4]) {
    let [n, cin, h, wd] = xs;
    let [cout, _, kh, kw] = ws;
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut y = vec![0.0; n * cout * ho * wo];
    for i in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((i * cin + ci) * h + iy as usize) * wd + ix as usize];
                                acc += xv * w[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    y[((i * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (y, [n, cout, ho, wo])
}

fn ref_bn(x: &[f64], xs: [usize; 4], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let [n, c, h, w] = xs;
    let plane = h * w;
    let m = (n * plane) as f64;
    let mut y = vec![0.0; x.len()];
    for ch in 0..c {
        let idx = || (0..n).flat_map(move |i| (0..plane).map(move |p| (i * c + ch) * plane + p));
        let mu = idx().map(|k| x[k]).sum::<f64>() / m;
        let var = idx().map(|k| (x[k] - mu).powi(2)).sum::<f64>() / m;
        for k in idx() {
            y[k] = gamma[ch] * (x[k] - mu) / (var + eps).sqrt() + beta[ch];
        }
    }
    y
}

fn ref_pool(x: &[f64], xs: [usize; 4], window: usize, stride: usize, max: bool) -> Vec<f64> {
    let [n, c, h, w] = xs;
    let ho = (h - window) / stride + 1;
    let wo = (w - window) / stride + 1;
    let mut y = Vec::with_capacity(n * c * ho * wo);
    for p in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let vals = (0..window).flat_map(|dy| (0..window).map(move |dx| (dy, dx)));
                let cells: Vec<f64> = vals
                    .map(|(dy, dx)| x[p * h * w + (oy * stride + dy) * w + ox * stride + dx])
                    .collect();
                y.push(if max {
                    cells.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                } else {
                    cells.iter().sum::<f64>() / cells.len() as f64
                });
            }
        }
    }
    y
}

fn ref_linear(x: &[f64], n: usize, d: usize, w: &[f64], k: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n * k];
    for i in 0..n {
        for j in 0..k {
            y[i * k + j] = b[j] + (0..d).map(|t| x[i * d + t] * w[j * d + t]).sum::<f64>();
        }
    }
    y
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Central differences of `f` with respect to every entry of `at`.
fn numeric(at: &[f64], step: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut x = at.to_vec();
    (0..at.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + step;
            let up = f(&x);
            x[i] = orig - step;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Norm-wise relative error, plus an elementwise bound scaled by the largest
/// reference entry so near-zero components are not judged in isolation.
fn assert_close(what: &str, analytic: &[f32], reference: &[f64]) {
    assert_eq!(analytic.len(), reference.len(), "{what}: length");
    let diff: f64 = analytic
        .iter()
        .zip(reference)
        .map(|(&a, r)| (f64::from(a) - r).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = reference.iter().map(|r| r * r).sum::<f64>().sqrt();
    let rel = diff / norm.max(1e-12);
    assert!(rel <= TOL, "{what}: relative error {rel:e}");
    let scale = reference.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    for (i, (&a, r)) in analytic.iter().zip(reference).enumerate() {
        let err = (f64::from(a) - r).abs();
        assert!(err <= TOL * r.abs().max(scale), "{what}[{i}]: analytic {a}, reference {r}");
    }
}

fn tensor(shape: &[usize], data: Vec<f32>) -> Tensor {
    Tensor::new(shape, data).unwrap()
}

#[test]
fn conv_gradients_match_finite_differences() {
    let cases = [
        ([2, 3, 5, 5], [4, 3, 3, 3], 1, 1),
        ([2, 2, 6, 6], [3, 2, 3, 3], 2, 1),
        ([1, 3, 5, 4], [2, 3, 1, 1], 2, 0),
        ([3, 1, 4, 4], [2, 1, 2, 2], 1, 0),
    ];
    for (seed, (xs, ws, stride, pad)) in cases.into_iter().enumerate() {
        let mut r = rng(seed as u64);
        let x = random_vec(xs.iter().product(), &mut r);
        let w = random_vec(ws.iter().product(), &mut r);
        let b = random_vec(ws[0], &mut r);
        let (x64, w64, b64) = (widen(&x), widen(&w), widen(&b));
        let (_, ys) = ref_conv(&x64, xs, &w64, ws, &b64, stride, pad);
        let probe = random_vec(ys.iter().product(), &mut r);
        let p64 = widen(&probe);

        let g = conv2d_backward(&tensor(&xs, x), &tensor(&ws, w), &tensor(&ys, probe), stride, pad).unwrap();
        let nx = numeric(&x64, STEP, |v| dot(&ref_conv(v, xs, &w64, ws, &b64, stride, pad).0, &p64));
        let nw = numeric(&w64, STEP, |v| dot(&ref_conv(&x64, xs, v, ws, &b64, stride, pad).0, &p64));
        let nb = numeric(&b64, STEP, |v| dot(&ref_conv(&x64, xs, &w64, ws, v, stride, pad).0, &p64));
        assert_close("conv input", g.input.data(), &nx);
        assert_close("conv weight", g.weight.data(), &nw);
        assert_close("conv bias", &g.bias, &nb);
    }
}

#[test]
fn batch_norm_gradients_match_finite_differences() {
    for (seed, xs) in [[3, 4, 3, 3], [5, 2, 1, 1], [2, 3, 2, 4]].into_iter().enumerate() {
        let mut r = rng(10 + seed as u64);
        let c = xs[1];
        let x = random_vec(xs.iter().product(), &mut r);
        let gamma: Vec<f32> = (0..c).map(|_| r.random_range(0.5f32..1.5)).collect();
        let beta = random_vec(c, &mut r);
        let probe = random_vec(x.len(), &mut r);
        let eps = 1e-5;
        let (x64, g64, b64, p64) = (widen(&x), widen(&gamma), widen(&beta), widen(&probe));

        let (_, cache) = bn_train_forward(&tensor(&xs, x), &gamma, &beta, eps).unwrap();
        let (dx, dgamma, dbeta) = bn_train_backward(&tensor(&xs, probe), &cache, &gamma).unwrap();
        let e = f64::from(eps);
        let nx = numeric(&x64, STEP, |v| dot(&ref_bn(v, xs, &g64, &b64, e), &p64));
        let ng = numeric(&g64, STEP, |v| dot(&ref_bn(&x64, xs, v, &b64, e), &p64));
        let nb = numeric(&b64, STEP, |v| dot(&ref_bn(&x64, xs, &g64, v, e), &p64));
        assert_close("bn input", dx.data(), &nx);
        assert_close("bn gamma", &dgamma, &ng);
        assert_close("bn beta", &dbeta, &nb);
    }
}

#[test]
fn batch_norm_forward_uses_biased_batch_statistics() {
    let x = tensor(&[1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]);
    let (y, cache) = bn_train_forward(&x, &[1.0], &[0.0], 1e-5).unwrap();
    assert_eq!(cache.batch_stats.mean, vec![4.0]);
    assert_eq!(cache.batch_stats.variance, vec![5.0]);
    let want = ref_bn(&[1.0, 3.0, 5.0, 7.0], [1, 1, 2, 2], &[1.0], &[0.0], 1e-5);
    for (a, b) in y.data().iter().zip(want) {
        assert!((f64::from(*a) - b).abs() < 1e-6);
    }
}

#[test]
fn relu_gradient_matches_finite_differences() {
    let mut r = rng(20);
    // Keep inputs away from the kink.
    let x: Vec<f32> = (0..2 * 3 * 4 * 4)
        .map(|_| {
            let v = r.random_range(0.05f32..1.0);
            if r.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    let probe = random_vec(x.len(), &mut r);
    let p64 = widen(&probe);
    let xt = tensor(&[2, 3, 4, 4], x.clone());
    let g = relu_backward(&crate::tensor::relu(&xt), &tensor(&[2, 3, 4, 4], probe));
    let n = numeric(&widen(&x), STEP, |v| v.iter().zip(&p64).map(|(a, p)| a.max(0.0) * p).sum());
    assert_close("relu", g.data(), &n);
}

#[test]
fn pooling_gradients_match_finite_differences() {
    let mut r = rng(30);
    let xs = [2, 2, 6, 6];
    // Distinct values keep max-pool away from ties.
    let mut x: Vec<f32> = (0..xs.iter().product::<usize>()).map(|i| i as f32 * 0.01).collect();
    for i in (1..x.len()).rev() {
        let j = r.random_range(0..=i);
        x.swap(i, j);
    }
    let x64 = widen(&x);
    let xt = tensor(&xs, x);
    for (window, stride) in [(2, 2), (3, 1), (2, 1)] {
        let ho = (6 - window) / stride + 1;
        let probe = random_vec(2 * 2 * ho * ho, &mut r);
        let p64 = widen(&probe);
        let gout = tensor(&[2, 2, ho, ho], probe);
        let ga = avg_pool2d_backward(&xs, &gout, window, stride).unwrap();
        let na = numeric(&x64, STEP, |v| dot(&ref_pool(v, xs, window, stride, false), &p64));
        assert_close("avg pool", ga.data(), &na);
        let gm = max_pool2d_backward(&xt, &gout, window, stride).unwrap();
        let nm = numeric(&x64, STEP, |v| dot(&ref_pool(v, xs, window, stride, true), &p64));
        assert_close("max pool", gm.data(), &nm);
    }
    let probe = random_vec(4, &mut r);
    let p64 = widen(&probe);
    let gg = global_avg_pool_backward(&xs, &tensor(&[2, 2, 1, 1], probe)).unwrap();
    let ng = numeric(&x64, STEP, |v| dot(&ref_pool(v, xs, 6, 1, false), &p64));
    assert_close("global avg pool", gg.data(), &ng);
}

#[test]
fn linear_gradients_match_finite_differences() {
    let mut r = rng(40);
    let (n, d, k) = (3, 5, 4);
    let x = random_vec(n * d, &mut r);
    let w = random_vec(k * d, &mut r);
    let b = random_vec(k, &mut r);
    let probe = random_vec(n * k, &mut r);
    let (x64, w64, b64, p64) = (widen(&x), widen(&w), widen(&b), widen(&probe));
    let (dx, dw, db) = linear_backward(&tensor(&[n, d], x), &tensor(&[k, d], w), &tensor(&[n, k], probe)).unwrap();
    assert_close("linear input", dx.data(), &numeric(&x64, STEP, |v| dot(&ref_linear(v, n, d, &w64, k, &b64), &p64)));
    assert_close("linear weight", dw.data(), &numeric(&w64, STEP, |v| dot(&ref_linear(&x64, n, d, v, k, &b64), &p64)));
    assert_close("linear bias", &db, &numeric(&b64, STEP, |v| dot(&ref_linear(&x64, n, d, &w64, k, v), &p64)));
}

fn ref_cross_entropy(logits: &[f64], labels: &[usize]) -> f64 {
    let k = logits.len() / labels.len();
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let row = &logits[i * k..(i + 1) * k];
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            lse - row[l]
        })
        .sum::<f64>()
        / labels.len() as f64
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut r = rng(50);
    let logits = random_vec(4 * 6, &mut r);
    let labels = [0, 5, 2, 2];
    let (loss, grad) = cross_entropy_batch(&tensor(&[4, 6], logits.clone()), &labels).unwrap();
    let l64 = widen(&logits);
    assert!((loss - ref_cross_entropy(&l64, &labels)).abs() < 1e-6);
    assert_close("cross entropy", grad.data(), &numeric(&l64, STEP, |v| ref_cross_entropy(v, &labels)));
}

#[test]
fn cross_entropy_cases() {
    for c in [2usize, 10] {
        let l = cross_entropy(&vec![0.3; c], c - 1).unwrap();
        assert!((f64::from(l) - (c as f64).ln()).abs() < 1e-6);
    }
    assert!(cross_entropy(&[100.0, 0.0, 0.0], 0).unwrap() < 1e-6);
    assert!(cross_entropy(&[0.0, 1.0], 2).is_err());
    assert!(cross_entropy(&[3.0, -2.0, 0.5], 1).unwrap() >= 0.0);
}

/// Full train-mode network in f64, parameters looked up by name.
fn ref_network(model: &ModelGraph, params: &BTreeMap<String, Vec<f64>>, x: &[f64], xs: [usize; 4], labels: &[usize]) -> f64 {
    let mut a = x.to_vec();
    let mut s = xs;
    let mut stack: Vec<(Vec<f64>, [usize; 4])> = Vec::new();
    let p = |name: &str, suffix: &str| &params[&format!("{name}.{suffix}")];
    for layer in model.layers() {
        let name = layer.name.as_str();
        match &layer.kind {
            LayerKind::Conv { in_channels, out_channels, kernel, stride, padding } => {
                let ws = [*out_channels, *in_channels, *kernel, *kernel];
                (a, s) = ref_conv(&a, s, p(name, "weight"), ws, p(name, "bias"), *stride, *padding);
            }
            LayerKind::BatchNorm { .. } => a = ref_bn(&a, s, p(name, "gamma"), p(name, "beta"), f64::from(model.bn_epsilon())),
            LayerKind::Relu => a.iter_mut().for_each(|v| *v = v.max(0.0)),
            LayerKind::AvgPool { window, stride } | LayerKind::MaxPool { window, stride } => {
                let max = matches!(layer.kind, LayerKind::MaxPool { .. });
                a = ref_pool(&a, s, *window, *stride, max);
                s = [s[0], s[1], (s[2] - window) / stride + 1, (s[3] - window) / stride + 1];
            }
            LayerKind::GlobalAvgPool => {
                a = ref_pool(&a, s, s[2], 1, false);
                s = [s[0], s[1], 1, 1];
            }
            LayerKind::Flatten => s = [s[0], s[1] * s[2] * s[3], 1, 1],
            LayerKind::Linear { in_features, out_features } => {
                a = ref_linear(&a, s[0], *in_features, p(name, "weight"), *out_features, p(name, "bias"));
                s = [s[0], *out_features, 1, 1];
            }
            LayerKind::ResidualBegin => stack.push((a.clone(), s)),
            LayerKind::ResidualEnd { projection } => {
                let (mut short, ss) = stack.pop().unwrap();
                if let Some(pr) = projection {
                    let ws = [pr.out_channels, pr.in_channels, 1, 1];
                    short = ref_conv(&short, ss, p(name, "weight"), ws, p(name, "bias"), pr.stride, 0).0;
                }
                a.iter_mut().zip(short).for_each(|(v, t)| *v += t);
            }
        }
    }
    ref_cross_entropy(&a, labels)
}

#[test]
fn whole_network_gradients_match_finite_differences() {
    for arch in [Arch::TinyCnn, Arch::ResnetMini] {
        let mut model = build_reference_model(arch, 4, 3).unwrap();
        let mut r = rng(60);
        // Non-trivial γ and β so their gradients are exercised.
        for name in model.bn_layer_names().iter().map(|s| s.to_string()).collect::<Vec<_>>() {
            for (suffix, lo, hi) in [("gamma", 0.5f32, 1.5f32), ("beta", -0.2, 0.2)] {
                let key = format!("{name}.{suffix}");
                let c = model.param(&key).unwrap().len();
                let v = (0..c).map(|_| r.random_range(lo..hi)).collect();
                model = model.with_param(&key, tensor(&[c], v)).unwrap();
            }
        }
        let xs = [3, 3, 8, 8];
        let x = random_vec(xs.iter().product(), &mut r);
        let labels = [1, 3, 0];
        let (logits, tape) = train_forward(&model, &tensor(&xs, x.clone())).unwrap();
        let (_, dlogits) = cross_entropy_batch(&logits, &labels).unwrap();
        let (grads, _) = backward(&model, tape, &dlogits).unwrap();
        assert_eq!(grads.len(), model.params().len());

        let x64 = widen(&x);
        let mut params: BTreeMap<String, Vec<f64>> =
            model.params().iter().map(|(k, v)| (k.clone(), widen(v.data()))).collect();
        let (mut analytic, mut reference) = (Vec::new(), Vec::new());
        for (name, g) in &grads {
            for _ in 0..3 {
                let i = r.random_range(0..g.len());
                let orig = params[name][i];
                let mut eval = |delta: f64| {
                    params.get_mut(name).unwrap()[i] = orig + delta;
                    let l = ref_network(&model, &params, &x64, xs, &labels);
                    params.get_mut(name).unwrap()[i] = orig;
                    l
                };
                // The f64 oracle tolerates a tiny step, which keeps ReLU kinks out of reach.
                let n = (eval(1e-6) - eval(-1e-6)) / 2e-6;
                analytic.push(g.data()[i]);
                reference.push(n);
            }
        }
        assert_close(&format!("{arch} parameters"), &analytic, &reference);
    }
}

#[test]
fn first_step_loss_is_near_log_class_count() {
    let data = synthetic_dataset(10, 4, 16, 1).unwrap();
    for arch in [Arch::TinyCnn, Arch::ResnetMini] {
        let model = build_reference_model(arch, 10, 2).unwrap();
        let images: Vec<Tensor> = data.iter().map(|d| d.image.clone()).collect();
        let labels: Vec<usize> = data.iter().map(|d| d.label).collect();
        let (logits, _) = train_forward(&model, &Tensor::concat_rows(&images).unwrap()).unwrap();
        let (loss, _) = cross_entropy_batch(&logits, &labels).unwrap();
        assert!((loss - 10f64.ln()).abs() <= 0.2, "{arch}: first-step loss {loss}");
    }
}

#[test]
fn tiny_cnn_learns_the_synthetic_set() {
    let data = synthetic_dataset(10, 30, 16, 5).unwrap();
    let cfg = TrainConfig {
        epochs: 50,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let (model, _) = train_source_model(Arch::TinyCnn, 10, &data, &cfg).unwrap();
    let correct = data
        .iter()
        .filter(|item| argmax(forward(&model, &item.image, &BnMode::Source).unwrap().data()) == item.label)
        .count();
    assert!(correct as f64 >= 0.95 * data.len() as f64, "{correct}/{} correct", data.len());
}

#[test]
fn overfits_ten_samples() {
    let data = synthetic_dataset(10, 1, 16, 7).unwrap();
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 10,
        learning_rate: 0.05,
        momentum: 0.9,
        weight_decay: 0.0,
        bn_momentum: 0.1,
        lr_schedule: LrSchedule::Constant,
        seed: 3,
    };
    let (model, report) = train_source_model(Arch::TinyCnn, 10, &data, &cfg).unwrap();
    assert_eq!(*report.epoch_accuracy.last().unwrap(), 1.0);
    // Inference with the EMA statistics classifies the training set too.
    for item in &data {
        let logits = forward(&model, &item.image, &BnMode::Source).unwrap();
        assert_eq!(argmax(logits.data()), item.label);
    }
    for w in report.epoch_loss.windows(6) {
        assert!(w[5] <= w[0] + 1e-6, "loss rose across a 5-epoch window: {w:?}");
    }
}

#[test]
fn training_is_deterministic() {
    let data = synthetic_dataset(3, 4, 8, 1).unwrap();
    let cfg = TrainConfig { epochs: 2, batch_size: 5, seed: 4, ..TrainConfig::default() };
    let (a, ra) = train_source_model(Arch::TinyCnn, 3, &data, &cfg).unwrap();
    let (b, rb) = train_source_model(Arch::TinyCnn, 3, &data, &cfg).unwrap();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    assert_eq!(ra, rb);
    assert!(a.bn_mask().values().all(|&m| m == BnLayerMode::AugBn));
}

#[test]
fn ema_reaches_a_constant_stream() {
    let x = Tensor::full(&[4, 3, 2, 2], 0.75);
    let batch = channel_moments(&x).unwrap();
    let mut running = ChannelStats::standard(3);
    for _ in 0..1000 {
        update_running_stats(&mut running, &batch, 0.1);
    }
    assert!(running.mean.iter().all(|m| (m - 0.75).abs() <= 1e-3));
    assert!(running.variance.iter().all(|v| v.abs() <= 1e-3));
}

#[test]
fn ema_error_shrinks_in_expectation() {
    let checkpoints = [0usize, 5, 10, 20, 30];
    let (true_mean, trials, batch) = (3.0f32, 200, 32);
    let normal = Normal::new(true_mean, 1.0).unwrap();
    let mut err = vec![0.0f64; checkpoints.len()];
    let mut r = rng(70);
    for _ in 0..trials {
        let mut running = ChannelStats::standard(1);
        for step in 0..=*checkpoints.last().unwrap() {
            if let Some(k) = checkpoints.iter().position(|&c| c == step) {
                err[k] += f64::from((running.mean[0] - true_mean).abs()) / trials as f64;
            }
            let x = tensor(&[batch, 1, 1, 1], (0..batch).map(|_| normal.sample(&mut r)).collect());
            update_running_stats(&mut running, &channel_moments(&x).unwrap(), 0.1);
        }
    }
    for w in err.windows(2) {
        assert!(w[1] < w[0], "{err:?}");
    }
}

#[test]
fn sgd_cases() {
    let mut params = BTreeMap::from([("a.weight".to_string(), tensor(&[2], vec![1.0, -2.0]))]);
    let grads = BTreeMap::from([("a.weight".to_string(), tensor(&[2], vec![0.5, 0.5]))]);
    let mut vel = BTreeMap::new();
    let before = params.clone();
    sgd_step(&mut params, &grads, &mut vel, 0.0, 0.9, 0.1).unwrap();
    assert_eq!(params, before);

    // v = g, then v = 0.9·g + g; decay on top.
    let mut vel = BTreeMap::new();
    sgd_step(&mut params, &grads, &mut vel, 0.1, 0.9, 0.0).unwrap();
    assert!((params["a.weight"].data()[0] - 0.95).abs() < 1e-6);
    sgd_step(&mut params, &grads, &mut vel, 0.1, 0.9, 0.0).unwrap();
    assert!((params["a.weight"].data()[0] - (0.95 - 0.1 * 0.95)).abs() < 1e-6);

    let mut p = BTreeMap::from([("b.weight".to_string(), tensor(&[1], vec![2.0]))]);
    let g = BTreeMap::from([("b.weight".to_string(), tensor(&[1], vec![0.0]))]);
    sgd_step(&mut p, &g, &mut BTreeMap::new(), 0.5, 0.0, 0.1).unwrap();
    assert!((p["b.weight"].data()[0] - 1.9).abs() < 1e-6);

    let unknown = BTreeMap::from([("zzz".to_string(), tensor(&[1], vec![0.0]))]);
    assert!(sgd_step(&mut p, &unknown, &mut BTreeMap::new(), 0.1, 0.0, 0.0).is_err());
}

#[test]
fn config_and_dataset_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig { bn_momentum: 1.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
    assert!(train_source_model(Arch::TinyCnn, 3, &[], &cfg).is_err());
    let mut data = synthetic_dataset(3, 1, 8, 0).unwrap();
    data[0].label = 5;
    assert!(train_source_model(Arch::TinyCnn, 3, &data, &cfg).is_err());
    let cos = TrainConfig { lr_schedule: LrSchedule::Cosine, ..TrainConfig::default() };
    assert_eq!(cos.learning_rate_at(0, 10), cos.learning_rate);
    assert!(cos.learning_rate_at(10, 10).abs() < 1e-7);
    assert_eq!("constant".parse::<LrSchedule>().unwrap(), LrSchedule::Constant);
}
