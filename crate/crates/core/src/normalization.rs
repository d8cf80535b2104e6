//! Batch normalization with source, target and blended statistics.
//!
//! Target statistics come from one test image plus its augmentations,
//! weighted so the original carries half of the mass. They are blended with
//! the stored source statistics by a prior `lambda` (`1` = source only,
//! `0` = target only) before normalizing.

use crate::error::{ensure, Result};
use crate::tensor::{lane_sum, Tensor};

/// Per-channel mean and (population) variance.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub variance: Vec<f32>,
}

impl ChannelStats {
    pub fn new(mean: Vec<f32>, variance: Vec<f32>) -> Result<Self> {
        ensure!(
            mean.len() == variance.len(),
            Shape,
            "mean has {} channels but variance has {}",
            mean.len(),
            variance.len()
        );
        ensure!(
            variance.iter().all(|&v| v >= 0.0 && v.is_finite()),
            InvalidArgument,
            "variances must be finite and non-negative"
        );
        ensure!(
            mean.iter().all(|m| m.is_finite()),
            InvalidArgument,
            "means must be finite"
        );
        Ok(ChannelStats { mean, variance })
    }

    /// Zero mean, unit variance.
    pub fn standard(channels: usize) -> Self {
        ChannelStats {
            mean: vec![0.0; channels],
            variance: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Affine parameters of a BN layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub epsilon: f32,
}

pub const DEFAULT_EPSILON: f32 = 1e-5;

impl BnParams {
    pub fn new(gamma: Vec<f32>, beta: Vec<f32>, epsilon: f32) -> Result<Self> {
        ensure!(
            gamma.len() == beta.len(),
            Shape,
            "gamma has {} channels but beta has {}",
            gamma.len(),
            beta.len()
        );
        ensure!(
            epsilon > 0.0 && epsilon.is_finite(),
            InvalidArgument,
            "epsilon must be positive, got {epsilon}"
        );
        Ok(BnParams { gamma, beta, epsilon })
    }

    pub fn identity(channels: usize) -> Self {
        BnParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Mixing weights over the original image (index 0) and its augments.
#[derive(Clone, Debug, PartialEq)]
pub struct AugWeights(Vec<f64>);

impl AugWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        ensure!(!weights.is_empty(), InvalidArgument, "need at least one weight");
        ensure!(
            weights.iter().all(|&w| w >= 0.0 && w.is_finite()),
            InvalidArgument,
            "weights must be finite and non-negative"
        );
        let total: f64 = weights.iter().sum();
        ensure!(
            (total - 1.0).abs() <= 1e-9,
            InvalidArgument,
            "weights must sum to 1, got {total}"
        );
        Ok(AugWeights(weights))
    }

    /// Half the mass on the original, the rest split evenly over `n` augments.
    pub fn for_augments(n: usize) -> Self {
        if n == 0 {
            return AugWeights(vec![1.0]);
        }
        let mut w = vec![0.5 / n as f64; n + 1];
        w[0] = 0.5;
        AugWeights(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Group size: original plus augments.
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// How source and target spread are mixed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BlendRule {
    /// `var = λ·var_s + (1−λ)·var_t`
    #[default]
    Variance,
    /// `σ = λ·σ_s + (1−λ)·σ_t`, `var = σ²`
    StdDev,
}

fn check_lambda(lambda: f32) -> Result<()> {
    ensure!(
        (0.0..=1.0).contains(&lambda),
        InvalidArgument,
        "prior must lie in [0, 1], got {lambda}"
    );
    Ok(())
}

/// Normalizes every row of `data` (rows of `c` planes of `plane` values).
fn normalize_into(
    src: &[f32],
    dst: &mut [f32],
    plane: usize,
    stats: &ChannelStats,
    params: &BnParams,
) {
    let c = stats.channels();
    let (scale, shift): (Vec<f32>, Vec<f32>) = (0..c)
        .map(|ch| {
            let inv = 1.0 / (f64::from(stats.variance[ch]) + f64::from(params.epsilon)).sqrt();
            let scale = f64::from(params.gamma[ch]) * inv;
            let shift = f64::from(params.beta[ch]) - f64::from(stats.mean[ch]) * scale;
            (scale as f32, shift as f32)
        })
        .unzip();
    for (i, (s, d)) in src.chunks(plane).zip(dst.chunks_mut(plane)).enumerate() {
        let ch = i % c;
        let (a, b) = (scale[ch], shift[ch]);
        for (o, &x) in d.iter_mut().zip(s) {
            *o = x * a + b;
        }
    }
}

fn check_channels(x: &Tensor, stats: &ChannelStats, params: &BnParams) -> Result<(usize, usize, usize, usize)> {
    let dims = x.dims4()?;
    ensure!(
        dims.1 == stats.channels() && dims.1 == params.channels(),
        Shape,
        "input has {} channels, stats {} and params {}",
        dims.1,
        stats.channels(),
        params.channels()
    );
    Ok(dims)
}

/// `γ·(x − mean)/√(var + ε) + β` per channel.
pub fn bn_forward(x: &Tensor, stats: &ChannelStats, params: &BnParams) -> Result<Tensor> {
    let (_, _, h, w) = check_channels(x, stats, params)?;
    let mut out = Tensor::zeros(x.shape());
    normalize_into(x.data(), out.data_mut(), h * w, stats, params);
    Ok(out)
}

/// Weighted statistics of consecutive rows `data` (each `c` planes of `plane`).
fn weighted_group_stats(data: &[f32], c: usize, plane: usize, weights: &[f64]) -> ChannelStats {
    let row = c * plane;
    let hw = plane as f64;
    let mut mean = Vec::with_capacity(c);
    let mut variance = Vec::with_capacity(c);
    for ch in 0..c {
        let plane_of = |i: usize| &data[i * row + ch * plane..i * row + (ch + 1) * plane];
        let mu: f64 = weights
            .iter()
            .enumerate()
            .map(|(i, w)| w * lane_sum(plane_of(i), None) / hw)
            .sum();
        let var: f64 = weights
            .iter()
            .enumerate()
            .map(|(i, w)| w * lane_sum(plane_of(i), Some(mu)) / hw)
            .sum();
        mean.push(mu as f32);
        variance.push(var.max(0.0) as f32);
    }
    ChannelStats { mean, variance }
}

/// Weighted mean over the original and augment features, and the weighted
/// second moment about that mean.
pub fn weighted_target_stats(features: &[Tensor], weights: &AugWeights) -> Result<ChannelStats> {
    ensure!(
        features.len() == weights.len(),
        Shape,
        "{} feature maps but {} weights",
        features.len(),
        weights.len()
    );
    let batch = Tensor::concat_rows(features)?;
    let (n, c, h, w) = batch.dims4()?;
    ensure!(
        n == weights.len(),
        Shape,
        "each feature map must hold exactly one instance"
    );
    Ok(weighted_group_stats(batch.data(), c, h * w, weights.as_slice()))
}

pub fn combine_stats(source: &ChannelStats, target: &ChannelStats, lambda: f32) -> Result<ChannelStats> {
    combine_stats_with(source, target, lambda, BlendRule::Variance)
}

pub fn combine_stats_with(
    source: &ChannelStats,
    target: &ChannelStats,
    lambda: f32,
    rule: BlendRule,
) -> Result<ChannelStats> {
    check_lambda(lambda)?;
    ensure!(
        source.channels() == target.channels(),
        Shape,
        "source has {} channels, target {}",
        source.channels(),
        target.channels()
    );
    let l = f64::from(lambda);
    let mix = |s: f32, t: f32| l * f64::from(s) + (1.0 - l) * f64::from(t);
    let mean = source
        .mean
        .iter()
        .zip(&target.mean)
        .map(|(&s, &t)| mix(s, t) as f32)
        .collect();
    let variance = source
        .variance
        .iter()
        .zip(&target.variance)
        .map(|(&s, &t)| match rule {
            BlendRule::Variance => mix(s, t) as f32,
            BlendRule::StdDev => {
                let sd = l * f64::from(s).sqrt() + (1.0 - l) * f64::from(t).sqrt();
                (sd * sd) as f32
            }
        })
        .collect();
    Ok(ChannelStats { mean, variance })
}

/// AugBN over one group: row 0 is the original image, rows 1.. its augments.
/// The whole group is normalized with the blended statistics.
pub fn augbn_forward(
    batch: &Tensor,
    source: &ChannelStats,
    params: &BnParams,
    lambda: f32,
    weights: &AugWeights,
    rule: BlendRule,
) -> Result<Tensor> {
    augbn_multiprior_forward(batch, source, params, &[lambda], weights, rule)
}

/// AugBN over `priors.len()` contiguous replicas of an augment group; replica
/// `p` is normalized with its own target statistics blended at `priors[p]`.
pub fn augbn_multiprior_forward(
    batch: &Tensor,
    source: &ChannelStats,
    params: &BnParams,
    priors: &[f32],
    weights: &AugWeights,
    rule: BlendRule,
) -> Result<Tensor> {
    let (n, c, h, w) = check_channels(batch, source, params)?;
    ensure!(!priors.is_empty(), InvalidArgument, "need at least one prior");
    for &p in priors {
        check_lambda(p)?;
    }
    let group = weights.len();
    ensure!(
        n == group * priors.len(),
        Layout,
        "batch of {n} rows is not {} replicas of {group}-row groups",
        priors.len()
    );
    let plane = h * w;
    let group_len = group * c * plane;
    let mut out = Tensor::zeros(batch.shape());
    for ((src, dst), &prior) in batch
        .data()
        .chunks(group_len)
        .zip(out.data_mut().chunks_mut(group_len))
        .zip(priors)
    {
        let target = weighted_group_stats(src, c, plane, weights.as_slice());
        let blended = combine_stats_with(source, &target, prior, rule)?;
        normalize_into(src, dst, plane, &blended, params);
    }
    Ok(out)
}
