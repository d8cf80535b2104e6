//! Single-image prediction: SITA with a fixed prior, entropy-based prior
//! selection (OPS), and the Source, PTN, BN-prior and augmentation-ensemble
//! baselines.
//!
//! Every predictor takes the model by shared reference and runs forward passes
//! only, so no adaptation state survives a call.

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use crate::augment::{generate_augmented_batch, AugmentPlan};
use crate::error::{ensure, Error, Result};
use crate::model::{forward, BnMode, ModelGraph};
use crate::normalization::{AugWeights, BlendRule, DEFAULT_EPSILON};
use crate::tensor::{softmax, Tensor};

/// Prior grid searched by OPS unless configured otherwise.
pub const DEFAULT_PRIORS: [f32; 8] = [0.0, 0.3, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

/// Pseudo-count of the BN-prior baseline.
pub const DEFAULT_BN_PSEUDO_COUNT: f64 = 16.0;

#[derive(Clone, Debug, PartialEq)]
pub struct AugBnConfig {
    pub lambda: f32,
    pub plan: AugmentPlan,
    priors: Vec<f32>,
    pub k_top: usize,
    pub epsilon: f32,
    /// Blend standard deviations rather than variances.
    pub std_blend: bool,
}

impl AugBnConfig {
    /// λ = 0.7, two augments composed from the classification pool, the
    /// default prior grid and top-3 voting.
    pub fn classification(seed: u64) -> Self {
        AugBnConfig {
            lambda: 0.7,
            plan: AugmentPlan::classification(seed),
            priors: DEFAULT_PRIORS.to_vec(),
            k_top: 3,
            epsilon: DEFAULT_EPSILON,
            std_blend: false,
        }
    }

    /// λ = 0.8 with one blur-and-rotate augment.
    pub fn dense(seed: u64) -> Self {
        AugBnConfig {
            lambda: 0.8,
            plan: AugmentPlan::dense(seed),
            ..AugBnConfig::classification(seed)
        }
    }

    /// Sorts and de-duplicates `priors`.
    pub fn with_priors(mut self, priors: &[f32]) -> Result<Self> {
        ensure!(!priors.is_empty(), Config, "prior grid is empty");
        ensure!(
            priors.iter().all(|p| (0.0..=1.0).contains(p)),
            Config,
            "priors must lie in [0, 1]"
        );
        let mut p = priors.to_vec();
        p.sort_by(f32::total_cmp);
        p.dedup();
        self.priors = p;
        Ok(self)
    }

    pub fn priors(&self) -> &[f32] {
        &self.priors
    }

    pub fn rule(&self) -> BlendRule {
        if self.std_blend {
            BlendRule::StdDev
        } else {
            BlendRule::Variance
        }
    }

    pub fn weights(&self) -> AugWeights {
        AugWeights::for_augments(self.plan.n_augments)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            (0.0..=1.0).contains(&self.lambda),
            Config,
            "lambda must lie in [0, 1], got {}",
            self.lambda
        );
        ensure!(
            self.k_top >= 1 && self.k_top <= self.priors.len(),
            Config,
            "k_top must lie in 1..={}, got {}",
            self.priors.len(),
            self.k_top
        );
        ensure!(
            self.epsilon > 0.0 && self.epsilon.is_finite(),
            Config,
            "epsilon must be positive"
        );
        self.plan.validate()
    }
}

impl Default for AugBnConfig {
    fn default() -> Self {
        AugBnConfig::classification(0)
    }
}

/// What one prior of an OPS pass predicted.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorOutcome {
    pub prior: f32,
    pub class_id: usize,
    pub entropy: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f32>,
    pub probs: Vec<f32>,
    pub class_id: usize,
    /// Shannon entropy of `probs`, in nats.
    pub entropy: f32,
    pub chosen_prior: Option<f32>,
    pub per_prior: Option<Vec<PriorOutcome>>,
}

impl Prediction {
    pub fn from_logits(logits: &[f32]) -> Result<Self> {
        let probs = softmax(logits)?;
        Prediction::from_parts(logits.to_vec(), probs)
    }

    fn from_parts(logits: Vec<f32>, probs: Vec<f32>) -> Result<Self> {
        let entropy = entropy(&probs)?;
        Ok(Prediction {
            class_id: argmax(&probs),
            logits,
            probs,
            entropy,
            chosen_prior: None,
            per_prior: None,
        })
    }
}

/// Index of the largest value; the smallest index wins exact ties.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `−Σ p ln p` in nats, with `0·ln 0 = 0`.
pub fn entropy(probs: &[f32]) -> Result<f32> {
    ensure!(!probs.is_empty(), InvalidArgument, "empty distribution");
    ensure!(
        probs.iter().all(|p| p.is_finite() && *p >= 0.0),
        InvalidArgument,
        "probabilities must be finite and non-negative"
    );
    let total: f64 = probs.iter().map(|&p| f64::from(p)).sum();
    ensure!(
        (total - 1.0).abs() <= 1e-4,
        InvalidArgument,
        "probabilities sum to {total}"
    );
    let h: f64 = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| {
            let p = f64::from(p);
            -p * p.ln()
        })
        .sum();
    Ok(h.clamp(0.0, (probs.len() as f64).ln()) as f32)
}

fn with_epsilon(model: &ModelGraph, epsilon: f32) -> Result<Cow<'_, ModelGraph>> {
    if epsilon == model.bn_epsilon() {
        Ok(Cow::Borrowed(model))
    } else {
        Ok(Cow::Owned(model.with_bn_epsilon(epsilon)?))
    }
}

fn single_image(model: &ModelGraph, image: &Tensor) -> Result<()> {
    let (n, c, _, _) = image.dims4()?;
    ensure!(n == 1, Shape, "expected one image, got {n} rows");
    ensure!(
        c == model.input_channels(),
        Shape,
        "model expects {} channels, image has {c}",
        model.input_channels()
    );
    Ok(())
}

pub fn source_predict(model: &ModelGraph, image: &Tensor) -> Result<Prediction> {
    single_image(model, image)?;
    Prediction::from_logits(forward(model, image, &BnMode::Source)?.data())
}

/// Normalizes AugBN-masked layers with the image's own statistics.
pub fn ptn_predict(model: &ModelGraph, image: &Tensor) -> Result<Prediction> {
    single_image(model, image)?;
    Prediction::from_logits(forward(model, image, &BnMode::Ptn)?.data())
}

/// One forward pass over the image and its augments at prior `cfg.lambda`;
/// returns the prediction for the original image.
pub fn sita_predict(model: &ModelGraph, image: &Tensor, cfg: &AugBnConfig) -> Result<Prediction> {
    single_image(model, image)?;
    cfg.validate()?;
    let model = with_epsilon(model, cfg.epsilon)?;
    let batch = generate_augmented_batch(image, &cfg.plan)?;
    let mode = BnMode::FixedPrior {
        lambda: cfg.lambda,
        weights: cfg.weights(),
        rule: cfg.rule(),
    };
    let logits = forward(&model, &batch, &mode)?;
    let mut p = Prediction::from_logits(logits.row_data(0))?;
    p.chosen_prior = Some(cfg.lambda);
    Ok(p)
}

/// Index of the outcome OPS reports: the `k_top` lowest-entropy outcomes vote
/// on a class (ties go to the class with the lowest supporting entropy, then
/// the lowest class index) and the winner's lowest-entropy supporter is
/// returned. Equal entropies keep input order.
pub fn ops_select(outcomes: &[(usize, f32)], k_top: usize) -> Result<usize> {
    ensure!(
        k_top >= 1 && k_top <= outcomes.len(),
        InvalidArgument,
        "k_top must lie in 1..={}, got {k_top}",
        outcomes.len()
    );
    let mut order: Vec<usize> = (0..outcomes.len()).collect();
    order.sort_by(|&a, &b| outcomes[a].1.total_cmp(&outcomes[b].1));
    let top = &order[..k_top];
    // (class, votes, best supporter); `top` is entropy-ascending so the first
    // supporter seen is the best one.
    let mut tally: Vec<(usize, usize, usize)> = Vec::new();
    for &i in top {
        let class = outcomes[i].0;
        match tally.iter_mut().find(|t| t.0 == class) {
            Some(t) => t.1 += 1,
            None => tally.push((class, 1, i)),
        }
    }
    let winner = tally
        .iter()
        .min_by(|a, b| {
            b.1.cmp(&a.1)
                .then(outcomes[a.2].1.total_cmp(&outcomes[b.2].1))
                .then(a.0.cmp(&b.0))
        })
        .ok_or_else(|| Error::Invariant("empty OPS vote".into()))?;
    Ok(winner.2)
}

/// One forward pass over `n_p` replicas of the same augmented batch, one per
/// prior; the class is chosen by [`ops_select`].
pub fn ops_predict(model: &ModelGraph, image: &Tensor, cfg: &AugBnConfig) -> Result<Prediction> {
    single_image(model, image)?;
    cfg.validate()?;
    let model = with_epsilon(model, cfg.epsilon)?;
    let batch = generate_augmented_batch(image, &cfg.plan)?;
    let group = batch.rows();
    let priors = cfg.priors().to_vec();
    let replicated = batch.repeat_rows(priors.len())?;
    let mode = BnMode::MultiPrior {
        priors: priors.clone(),
        weights: cfg.weights(),
        rule: cfg.rule(),
    };
    let logits = forward(&model, &replicated, &mode)?;
    let per: Vec<Prediction> = (0..priors.len())
        .map(|p| Prediction::from_logits(logits.row_data(p * group)))
        .collect::<Result<_>>()?;
    let votes: Vec<(usize, f32)> = per.iter().map(|p| (p.class_id, p.entropy)).collect();
    let chosen = ops_select(&votes, cfg.k_top)?;
    let detail = priors
        .iter()
        .zip(&per)
        .map(|(&prior, p)| PriorOutcome {
            prior,
            class_id: p.class_id,
            entropy: p.entropy,
        })
        .collect();
    let mut out = per[chosen].clone();
    out.chosen_prior = Some(priors[chosen]);
    out.per_prior = Some(detail);
    Ok(out)
}

/// Source-mode softmax averaged over the image and its augments. Reported
/// logits are the log of the averaged probabilities.
pub fn aug_ensemble_predict(model: &ModelGraph, image: &Tensor, plan: &AugmentPlan) -> Result<Prediction> {
    single_image(model, image)?;
    let batch = generate_augmented_batch(image, plan)?;
    let logits = forward(model, &batch, &BnMode::Source)?;
    let rows = batch.rows();
    let mut mean = vec![0.0f64; model.class_count()];
    for r in 0..rows {
        for (m, p) in mean.iter_mut().zip(softmax(logits.row_data(r))?) {
            *m += f64::from(p);
        }
    }
    let probs: Vec<f32> = mean.iter().map(|m| (m / rows as f64) as f32).collect();
    let log_probs = probs.iter().map(|&p| p.max(f32::MIN_POSITIVE).ln()).collect();
    Prediction::from_parts(log_probs, probs)
}

/// Prior for a source pseudo-count `n` against one test observation.
pub fn bn_prior(n: f64) -> Result<f32> {
    ensure!(n >= 0.0 && n.is_finite(), InvalidArgument, "pseudo-count must be finite and non-negative");
    Ok((n / (n + 1.0)) as f32)
}

/// Blends source statistics with the image's own (no augments) at `N/(N+1)`.
pub fn bn_baseline_predict(model: &ModelGraph, image: &Tensor, pseudo_count: f64) -> Result<Prediction> {
    single_image(model, image)?;
    let lambda = bn_prior(pseudo_count)?;
    let logits = forward(model, image, &BnMode::fixed(lambda, 0))?;
    let mut p = Prediction::from_logits(logits.data())?;
    p.chosen_prior = Some(lambda);
    Ok(p)
}

/// Predictor selector used by the harness and CLI.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PredictMode {
    Source,
    Ptn,
    Bn16,
    AugBn,
    AugBnOps,
    AugEnsemble,
}

impl PredictMode {
    pub const ALL: [PredictMode; 6] = [
        PredictMode::Source,
        PredictMode::Ptn,
        PredictMode::Bn16,
        PredictMode::AugBn,
        PredictMode::AugBnOps,
        PredictMode::AugEnsemble,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PredictMode::Source => "source",
            PredictMode::Ptn => "ptn",
            PredictMode::Bn16 => "bn16",
            PredictMode::AugBn => "augbn",
            PredictMode::AugBnOps => "augbn-ops",
            PredictMode::AugEnsemble => "aug-ensemble",
        }
    }
}

impl fmt::Display for PredictMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PredictMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PredictMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown prediction mode `{s}`")))
    }
}

/// Runs the predictor for `mode`; `cfg` supplies λ, the plan and the grid.
pub fn predict(model: &ModelGraph, image: &Tensor, mode: PredictMode, cfg: &AugBnConfig) -> Result<Prediction> {
    match mode {
        PredictMode::Source => source_predict(model, image),
        PredictMode::Ptn => ptn_predict(model, image),
        PredictMode::Bn16 => bn_baseline_predict(model, image, DEFAULT_BN_PSEUDO_COUNT),
        PredictMode::AugBn => sita_predict(model, image, cfg),
        PredictMode::AugBnOps => ops_predict(model, image, cfg),
        PredictMode::AugEnsemble => aug_ensemble_predict(model, image, &cfg.plan),
    }
}
