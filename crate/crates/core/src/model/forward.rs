use crate::error::{ensure, Error, Result};
use crate::normalization::{augbn_forward, augbn_multiprior_forward, bn_forward, AugWeights, BlendRule};
use crate::tensor::{self, channel_moments, Tensor};

use super::{BnLayerMode, LayerKind, ModelGraph};

/// How AugBN-masked layers pick their statistics for one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum BnMode {
    /// Stored running statistics everywhere; rows are independent.
    Source,
    /// Statistics of the current batch only.
    Ptn,
    /// Rows are one original image followed by its augments; stats are
    /// blended at `lambda`.
    FixedPrior {
        lambda: f32,
        weights: AugWeights,
        rule: BlendRule,
    },
    /// `priors.len()` contiguous replicas of an augment group, one per prior.
    MultiPrior {
        priors: Vec<f32>,
        weights: AugWeights,
        rule: BlendRule,
    },
}

impl BnMode {
    pub fn fixed(lambda: f32, n_augments: usize) -> Self {
        BnMode::FixedPrior {
            lambda,
            weights: AugWeights::for_augments(n_augments),
            rule: BlendRule::Variance,
        }
    }

    pub fn multi(priors: Vec<f32>, n_augments: usize) -> Self {
        BnMode::MultiPrior {
            priors,
            weights: AugWeights::for_augments(n_augments),
            rule: BlendRule::Variance,
        }
    }

    fn check_layout(&self, rows: usize) -> Result<()> {
        let in_range = |p: f32| (0.0..=1.0).contains(&p);
        match self {
            BnMode::Source | BnMode::Ptn => Ok(()),
            BnMode::FixedPrior { lambda, weights, .. } => {
                ensure!(in_range(*lambda), InvalidArgument, "prior {lambda} outside [0, 1]");
                ensure!(
                    rows == weights.len(),
                    Layout,
                    "fixed-prior mode expects {} rows, got {rows}",
                    weights.len()
                );
                Ok(())
            }
            BnMode::MultiPrior { priors, weights, .. } => {
                ensure!(!priors.is_empty(), InvalidArgument, "need at least one prior");
                ensure!(
                    priors.iter().all(|&p| in_range(p)),
                    InvalidArgument,
                    "priors must lie in [0, 1]"
                );
                ensure!(
                    rows == weights.len() * priors.len(),
                    Layout,
                    "multi-prior mode expects {} rows, got {rows}",
                    weights.len() * priors.len()
                );
                Ok(())
            }
        }
    }
}

/// Logits `[N, class_count]` for every row of `batch`.
pub fn forward(model: &ModelGraph, batch: &Tensor, mode: &BnMode) -> Result<Tensor> {
    forward_inspect(model, batch, mode, |_, _| {})
}

/// [`forward`], calling `visit(layer_index, output)` after every layer.
pub fn forward_inspect(
    model: &ModelGraph,
    batch: &Tensor,
    mode: &BnMode,
    mut visit: impl FnMut(usize, &Tensor),
) -> Result<Tensor> {
    let (rows, channels, _, _) = batch.dims4()?;
    ensure!(
        channels == model.input_channels,
        Shape,
        "model expects {} input channels, got {channels}",
        model.input_channels
    );
    mode.check_layout(rows)?;

    let mut x = batch.clone();
    let mut shortcuts: Vec<Tensor> = Vec::new();
    for (index, layer) in model.layers.iter().enumerate() {
        let name = layer.name.as_str();
        x = match &layer.kind {
            LayerKind::Conv { stride, padding, .. } => tensor::conv2d(
                &x,
                model.param(&format!("{name}.weight"))?,
                model.param(&format!("{name}.bias"))?.data(),
                *stride,
                *padding,
            )?,
            LayerKind::BatchNorm { .. } => normalize(model, name, &x, mode)?,
            LayerKind::Relu => tensor::relu(&x),
            LayerKind::AvgPool { window, stride } => tensor::avg_pool2d(&x, *window, *stride)?,
            LayerKind::MaxPool { window, stride } => tensor::max_pool2d(&x, *window, *stride)?,
            LayerKind::GlobalAvgPool => tensor::global_avg_pool(&x)?,
            LayerKind::Flatten => {
                let n = x.rows();
                let d = x.len() / n;
                x.reshape(&[n, d])?
            }
            LayerKind::Linear { .. } => tensor::linear(
                &x,
                model.param(&format!("{name}.weight"))?,
                model.param(&format!("{name}.bias"))?.data(),
            )?,
            LayerKind::ResidualBegin => {
                shortcuts.push(x.clone());
                x
            }
            LayerKind::ResidualEnd { projection } => {
                let saved = shortcuts
                    .pop()
                    .ok_or_else(|| Error::Invariant(format!("`{name}` has no open shortcut")))?;
                let shortcut = match projection {
                    Some(p) => tensor::conv2d(
                        &saved,
                        model.param(&format!("{name}.weight"))?,
                        model.param(&format!("{name}.bias"))?.data(),
                        p.stride,
                        0,
                    )?,
                    None => saved,
                };
                ensure!(
                    shortcut.shape() == x.shape(),
                    Shape,
                    "`{name}`: shortcut {:?} vs branch {:?}",
                    shortcut.shape(),
                    x.shape()
                );
                let mut sum = x;
                for (o, s) in sum.data_mut().iter_mut().zip(shortcut.data()) {
                    *o += s;
                }
                sum
            }
        };
        visit(index, &x);
    }
    Ok(x)
}

fn normalize(model: &ModelGraph, layer: &str, x: &Tensor, mode: &BnMode) -> Result<Tensor> {
    let source = model.bn_stats(layer)?;
    let params = model.bn_params(layer)?;
    let adaptive = model.bn_mask.get(layer) == Some(&BnLayerMode::AugBn);
    match mode {
        _ if !adaptive => bn_forward(x, source, &params),
        BnMode::Source => bn_forward(x, source, &params),
        BnMode::Ptn => bn_forward(x, &channel_moments(x)?, &params),
        BnMode::FixedPrior { lambda, weights, rule } => {
            augbn_forward(x, source, &params, *lambda, weights, *rule)
        }
        BnMode::MultiPrior { priors, weights, rule } => {
            augbn_multiprior_forward(x, source, &params, priors, weights, *rule)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_reference_model, Arch};
    use crate::normalization::ChannelStats;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(seed: u64, rows: usize, size: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * 3 * size * size).map(|_| rng.random::<f32>()).collect();
        Tensor::new(&[rows, 3, size, size], data).unwrap()
    }

    fn max_diff(a: &[f32], b: &[f32]) -> f32 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    /// Perturbed running stats so adaptation has something to change.
    fn skewed(arch: Arch) -> ModelGraph {
        let mut m = build_reference_model(arch, 10, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for s in m.bn_stats.values_mut() {
            let c = s.channels();
            *s = ChannelStats::new(
                (0..c).map(|_| rng.random_range(-0.5..0.5)).collect(),
                (0..c).map(|_| rng.random_range(0.5..2.0)).collect(),
            )
            .unwrap();
        }
        m.with_all_bn(BnLayerMode::AugBn)
    }

    #[test]
    fn logits_have_class_count_and_are_finite() {
        for arch in [Arch::TinyCnn, Arch::ResnetMini] {
            let m = build_reference_model(arch, 7, 1).unwrap();
            let y = forward(&m, &image(1, 1, 32), &BnMode::Source).unwrap();
            assert_eq!(y.shape(), &[1, 7]);
            assert!(y.is_finite());
        }
    }

    #[test]
    fn source_mode_has_no_row_coupling() {
        let m = skewed(Arch::ResnetMini);
        let batch = image(2, 4, 16);
        let all = forward(&m, &batch, &BnMode::Source).unwrap();
        for r in 0..4 {
            let one = forward(&m, &batch.row(r).unwrap(), &BnMode::Source).unwrap();
            assert!(max_diff(one.data(), all.row_data(r)) <= 1e-6);
        }
    }

    #[test]
    fn unit_prior_matches_source_on_row_zero() {
        let m = skewed(Arch::ResnetMini);
        let batch = image(3, 3, 16);
        let adapted = forward(&m, &batch, &BnMode::fixed(1.0, 2)).unwrap();
        let source = forward(&m, &batch.row(0).unwrap(), &BnMode::Source).unwrap();
        assert!(max_diff(adapted.row_data(0), source.data()) <= 1e-5);
    }

    #[test]
    fn ptn_on_one_image_is_zero_prior_without_augments() {
        let m = skewed(Arch::TinyCnn);
        let img = image(4, 1, 16);
        let ptn = forward(&m, &img, &BnMode::Ptn).unwrap();
        let zero = forward(&m, &img, &BnMode::fixed(0.0, 0)).unwrap();
        assert!(max_diff(ptn.data(), zero.data()) <= 1e-6);
    }

    #[test]
    fn all_source_mask_ignores_adaptive_mode() {
        let m = skewed(Arch::ResnetMini).with_all_bn(BnLayerMode::Source);
        let batch = image(5, 3, 16);
        let adapted = forward(&m, &batch, &BnMode::fixed(0.5, 2)).unwrap();
        let source = forward(&m, &batch.row(0).unwrap(), &BnMode::Source).unwrap();
        assert!(max_diff(adapted.row_data(0), source.data()) <= 1e-5);
    }

    #[test]
    fn toggling_a_layer_only_changes_downstream_activations() {
        let base = skewed(Arch::ResnetMini).with_all_bn(BnLayerMode::Source);
        let target = "g2.b1.bn1";
        let mut upd = std::collections::BTreeMap::new();
        upd.insert(target.to_string(), BnLayerMode::AugBn);
        let toggled = base.with_bn_modes(&upd).unwrap();
        let at = base.layers.iter().position(|l| l.name == target).unwrap();
        let batch = image(6, 3, 16);
        let mode = BnMode::fixed(0.3, 2);
        let mut a = Vec::new();
        let mut b = Vec::new();
        forward_inspect(&base, &batch, &mode, |_, t| a.push(t.clone())).unwrap();
        forward_inspect(&toggled, &batch, &mode, |_, t| b.push(t.clone())).unwrap();
        for i in 0..at {
            assert_eq!(a[i], b[i], "layer {i} upstream of the toggle changed");
        }
        assert_ne!(a[at], b[at]);
    }

    #[test]
    fn forward_is_deterministic() {
        let m = skewed(Arch::ResnetMini);
        let batch = image(7, 6, 16);
        let mode = BnMode::multi(vec![0.2, 0.9], 2);
        let a = forward(&m, &batch, &mode).unwrap();
        let b = forward(&m, &batch, &mode).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn layout_errors() {
        let m = skewed(Arch::TinyCnn);
        assert!(matches!(
            forward(&m, &image(8, 2, 16), &BnMode::fixed(0.5, 2)),
            Err(Error::Layout(_))
        ));
        assert!(matches!(
            forward(&m, &image(8, 5, 16), &BnMode::multi(vec![0.1, 0.2], 2)),
            Err(Error::Layout(_))
        ));
        let gray = Tensor::zeros(&[1, 1, 16, 16]);
        assert!(forward(&m, &gray, &BnMode::Source).is_err());
    }
}
