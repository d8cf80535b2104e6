//! Evaluation, latency benchmarking, entropy analysis and ablation sweeps.
//! Every table is emitted as CSV preceded by `#` lines carrying the resolved
//! config and its fingerprint.

mod config;

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::time::Instant;

use rayon::prelude::*;

pub use config::ExperimentConfig;

use crate::adapt::{predict, AugBnConfig, PredictMode, Prediction};
use crate::augment::AugmentPlan;
use crate::data::{corrupt_with, CorruptionSpec, LabeledImage};
use crate::error::{ensure, Error, Result};
use crate::model::{model_hash, ModelGraph};
use crate::tensor::Tensor;

/// Input condition of one evaluation cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Condition {
    Clean,
    Corrupted(CorruptionSpec),
}

impl Condition {
    pub fn name(&self) -> &'static str {
        match self {
            Condition::Clean => "clean",
            Condition::Corrupted(spec) => spec.kind.as_str(),
        }
    }

    pub fn severity(&self) -> u8 {
        match self {
            Condition::Clean => 0,
            Condition::Corrupted(spec) => spec.severity,
        }
    }

    /// Image `index` under this condition; noise streams are per index.
    pub fn apply(&self, item: &LabeledImage, index: usize) -> Result<LabeledImage> {
        match self {
            Condition::Clean => Ok(item.clone()),
            Condition::Corrupted(spec) => corrupt_with(item, spec, &mut spec.rng_for(index as u64)),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.name(), self.severity())
    }
}

/// Augmentation seed for image `index` under root seed `root`.
pub fn image_seed(root: u64, index: usize) -> u64 {
    root ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Outcome of one prediction inside an evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub label: usize,
    pub prediction: Prediction,
}

impl Sample {
    pub fn correct(&self) -> bool {
        self.prediction.class_id == self.label
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalCell {
    pub condition: Condition,
    pub mode: String,
    pub images: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EntropySummary {
    pub mean_correct: Option<f64>,
    pub mean_incorrect: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyRow {
    pub mode: PredictMode,
    pub mean_ms: f64,
    pub p95_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub cells: Vec<EvalCell>,
    /// Mean of the per-cell accuracies.
    pub mca: f64,
    pub entropy: EntropySummary,
    /// Chosen prior (as text) → (count, correct count).
    pub prior_histogram: BTreeMap<String, (usize, usize)>,
    pub latency: Vec<LatencyRow>,
    pub fingerprint: String,
    /// Per-image outcomes, grouped by cell in cell order.
    pub samples: Vec<Vec<Sample>>,
}

impl EvalReport {
    /// Fraction of chosen-prior mass on priors satisfying `pred`.
    pub fn prior_mass(&self, pred: impl Fn(f32) -> bool) -> f64 {
        let total: usize = self.prior_histogram.values().map(|c| c.0).sum();
        let hit: usize = self
            .prior_histogram
            .iter()
            .filter(|(k, _)| k.parse::<f32>().map(&pred).unwrap_or(false))
            .map(|(_, c)| c.0)
            .sum();
        if total == 0 {
            0.0
        } else {
            hit as f64 / total as f64
        }
    }

    /// One row per cell, then an `mca` row.
    pub fn to_csv(&self, resolved_config: &str) -> String {
        let mut out = preamble(&self.fingerprint, resolved_config);
        out.push_str("condition,severity,mode,images,correct,accuracy\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                c.condition.name(),
                c.condition.severity(),
                c.mode,
                c.images,
                c.correct,
                c.accuracy
            );
        }
        let _ = writeln!(out, "mca,,,,,{}", self.mca);
        out
    }

    pub fn prior_histogram_csv(&self) -> String {
        let mut out = format!("# fingerprint = {}\nprior,count,correct\n", self.fingerprint);
        for (p, (n, k)) in &self.prior_histogram {
            let _ = writeln!(out, "{p},{n},{k}");
        }
        out
    }
}

fn preamble(fingerprint: &str, resolved_config: &str) -> String {
    let mut out = format!("# fingerprint = {fingerprint}\n");
    for line in resolved_config.lines() {
        let _ = writeln!(out, "# {line}");
    }
    out
}

/// Arithmetic mean of the `accuracy` column of a CSV written by
/// [`EvalReport::to_csv`], in row order.
pub fn mca_from_csv(csv: &str) -> Result<f64> {
    let mut values = Vec::new();
    for line in csv.lines().filter(|l| !l.starts_with('#')).skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.first() == Some(&"mca") {
            continue;
        }
        let acc = fields
            .last()
            .and_then(|f| f.parse::<f64>().ok())
            .ok_or_else(|| Error::Data(format!("bad report row `{line}`")))?;
        values.push(acc);
    }
    ensure!(!values.is_empty(), Data, "report has no cells");
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Predictor signature accepted by [`evaluate_with`]: (model, image, index).
pub type Predictor<'a> = dyn Fn(&ModelGraph, &LabeledImage, usize) -> Result<Prediction> + Sync + 'a;

/// Predicts every image of every condition with `mode`, one image at a time.
pub fn evaluate(
    model: &ModelGraph,
    dataset: &[LabeledImage],
    conditions: &[Condition],
    mode: PredictMode,
    cfg: &AugBnConfig,
    fingerprint: &str,
) -> Result<EvalReport> {
    cfg.validate()?;
    let predictor = |m: &ModelGraph, item: &LabeledImage, index: usize| {
        let mut per_image = cfg.clone();
        per_image.plan.seed = image_seed(cfg.plan.seed, index);
        predict(m, &item.image, mode, &per_image)
    };
    evaluate_with(model, dataset, conditions, mode.as_str(), &predictor, fingerprint)
}

/// [`evaluate`] with an arbitrary predictor. Images run in parallel and results
/// are gathered in index order. The model hash is checked before and after.
pub fn evaluate_with(
    model: &ModelGraph,
    dataset: &[LabeledImage],
    conditions: &[Condition],
    mode_name: &str,
    predictor: &Predictor<'_>,
    fingerprint: &str,
) -> Result<EvalReport> {
    ensure!(!dataset.is_empty(), Data, "evaluation set is empty");
    ensure!(!conditions.is_empty(), Config, "no conditions to evaluate");
    let before = model_hash(model)?;
    let mut cells = Vec::with_capacity(conditions.len());
    let mut samples = Vec::with_capacity(conditions.len());
    for condition in conditions {
        let outcome: Vec<Sample> = dataset
            .par_iter()
            .enumerate()
            .map(|(i, item)| {
                let input = condition.apply(item, i)?;
                let prediction = predictor(model, &input, i)?;
                Ok(Sample {
                    label: item.label,
                    prediction,
                })
            })
            .collect::<Result<_>>()?;
        let correct = outcome.iter().filter(|s| s.correct()).count();
        cells.push(EvalCell {
            condition: *condition,
            mode: mode_name.to_string(),
            images: outcome.len(),
            correct,
            accuracy: correct as f64 / outcome.len() as f64,
        });
        samples.push(outcome);
    }
    let after = model_hash(model)?;
    ensure!(before == after, Invariant, "model changed during evaluation");

    let mca = cells.iter().map(|c| c.accuracy).sum::<f64>() / cells.len() as f64;
    let mean = |want: bool| {
        let e: Vec<f64> = samples
            .iter()
            .flatten()
            .filter(|s| s.correct() == want)
            .map(|s| f64::from(s.prediction.entropy))
            .collect();
        (!e.is_empty()).then(|| e.iter().sum::<f64>() / e.len() as f64)
    };
    let mut prior_histogram = BTreeMap::new();
    for s in samples.iter().flatten() {
        if let Some(p) = s.prediction.chosen_prior {
            let slot = prior_histogram.entry(format!("{p}")).or_insert((0, 0));
            slot.0 += 1;
            slot.1 += usize::from(s.correct());
        }
    }
    Ok(EvalReport {
        cells,
        mca,
        entropy: EntropySummary {
            mean_correct: mean(true),
            mean_incorrect: mean(false),
        },
        prior_histogram,
        latency: Vec::new(),
        fingerprint: fingerprint.to_string(),
        samples,
    })
}

/// Wall-clock latency per prediction. Each mode is timed in its own block
/// after two discarded warmup runs, so every mode is measured with warm
/// caches; interleaving modes would let a large batch evict the working set
/// of the next, small one.
pub fn bench_latency(
    model: &ModelGraph,
    image: &Tensor,
    modes: &[PredictMode],
    cfg: &AugBnConfig,
    repetitions: usize,
) -> Result<Vec<LatencyRow>> {
    ensure!(repetitions >= 10, Config, "need at least 10 repetitions, got {repetitions}");
    ensure!(!modes.is_empty(), Config, "no modes to benchmark");
    const WARMUP: usize = 2;
    let mut rows = Vec::with_capacity(modes.len());
    for &mode in modes {
        let mut t = Vec::with_capacity(repetitions);
        for rep in 0..WARMUP + repetitions {
            let start = Instant::now();
            let p = predict(model, image, mode, cfg)?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            std::hint::black_box(p);
            if rep >= WARMUP {
                t.push(ms);
            }
        }
        t.sort_by(f64::total_cmp);
        let mean = t.iter().sum::<f64>() / t.len() as f64;
        let rank = ((0.95 * t.len() as f64).ceil() as usize).clamp(1, t.len());
        rows.push(LatencyRow {
            mode,
            mean_ms: mean,
            p95_ms: t[rank - 1],
        });
    }
    Ok(rows)
}

pub fn latency_csv(rows: &[LatencyRow], fingerprint: &str) -> String {
    let mut out = format!("# fingerprint = {fingerprint}\nmode,mean_ms,p95_ms\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.4},{:.4}", r.mode, r.mean_ms, r.p95_ms);
    }
    out
}

/// Accuracy within one entropy bin; bins without samples are not listed.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub accuracy: f64,
}

/// Bins `(entropy, correct)` pairs into `bins` equal-width bins over
/// `[0, max_entropy]`; values at the top edge fall in the last bin.
pub fn entropy_histogram(samples: &[(f32, bool)], bins: usize, max_entropy: f64) -> Result<Vec<EntropyBin>> {
    ensure!(bins >= 1, Config, "need at least one bin");
    ensure!(max_entropy > 0.0, InvalidArgument, "entropy range must be positive");
    let width = max_entropy / bins as f64;
    let mut tally = vec![(0usize, 0usize); bins];
    for &(h, ok) in samples {
        let b = ((f64::from(h) / width) as usize).min(bins - 1);
        tally[b].0 += 1;
        tally[b].1 += usize::from(ok);
    }
    Ok(tally
        .into_iter()
        .enumerate()
        .filter(|(_, (n, _))| *n > 0)
        .map(|(b, (n, k))| EntropyBin {
            lower: b as f64 * width,
            upper: (b + 1) as f64 * width,
            count: n,
            accuracy: k as f64 / n as f64,
        })
        .collect())
}

/// Accuracy per entropy bin over one evaluated condition.
pub fn entropy_correlation(
    model: &ModelGraph,
    dataset: &[LabeledImage],
    condition: Condition,
    mode: PredictMode,
    cfg: &AugBnConfig,
    bins: usize,
) -> Result<Vec<EntropyBin>> {
    ensure!(dataset.len() >= 100, Data, "entropy analysis needs at least 100 samples, got {}", dataset.len());
    let report = evaluate(model, dataset, &[condition], mode, cfg, "")?;
    let pairs: Vec<(f32, bool)> = report.samples[0]
        .iter()
        .map(|s| (s.prediction.entropy, s.correct()))
        .collect();
    entropy_histogram(&pairs, bins, (model.class_count() as f64).ln())
}

pub fn entropy_csv(bins: &[EntropyBin], fingerprint: &str) -> String {
    let mut out = format!("# fingerprint = {fingerprint}\nentropy_lower,entropy_upper,count,accuracy\n");
    for b in bins {
        let _ = writeln!(out, "{:.6},{:.6},{},{}", b.lower, b.upper, b.count, b.accuracy);
    }
    out
}

/// Ablation axis with its grid.
#[derive(Clone, Debug, PartialEq)]
pub enum SweepAxis {
    Lambda(Vec<f32>),
    NAugments(Vec<usize>),
    /// Drop each pool entry in turn.
    LeaveOneOutAugment,
    /// AugBN on the first `k` block groups, and on the last `k`, for every `k`.
    BnMask,
}

impl SweepAxis {
    /// `lambda`, `n-augments`, `loo-augment` or `bn-mask`; the grid is a
    /// comma-separated list for the first two and ignored otherwise.
    pub fn parse(axis: &str, grid: &str) -> Result<Self> {
        let list = || grid.split(',').map(str::trim).filter(|s| !s.is_empty());
        match axis {
            "lambda" => {
                let v = list()
                    .map(|s| s.parse::<f32>().map_err(|_| Error::Config(format!("bad prior `{s}`"))))
                    .collect::<Result<Vec<_>>>()?;
                ensure!(!v.is_empty(), Config, "empty lambda grid");
                Ok(SweepAxis::Lambda(v))
            }
            "n-augments" => {
                let v = list()
                    .map(|s| s.parse::<usize>().map_err(|_| Error::Config(format!("bad augment count `{s}`"))))
                    .collect::<Result<Vec<_>>>()?;
                ensure!(!v.is_empty(), Config, "empty augment-count grid");
                Ok(SweepAxis::NAugments(v))
            }
            "loo-augment" => Ok(SweepAxis::LeaveOneOutAugment),
            "bn-mask" => Ok(SweepAxis::BnMask),
            other => Err(Error::Config(format!("unknown sweep axis `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub series: String,
    pub point: String,
    pub report: EvalReport,
}

/// One evaluation per grid point. λ and augment-count points run AugBN with the
/// point's setting; the leave-one-out and mask sweeps run AugBN on the model
/// and pool they describe.
pub fn ablation_sweep(
    model: &ModelGraph,
    dataset: &[LabeledImage],
    conditions: &[Condition],
    axis: &SweepAxis,
    cfg: &AugBnConfig,
    fingerprint: &str,
) -> Result<Vec<SweepRow>> {
    let run = |m: &ModelGraph, c: &AugBnConfig| evaluate(m, dataset, conditions, PredictMode::AugBn, c, fingerprint);
    let mut rows = Vec::new();
    match axis {
        SweepAxis::Lambda(grid) => {
            for &lambda in grid {
                let mut c = cfg.clone();
                c.lambda = lambda;
                rows.push(SweepRow {
                    series: "lambda".into(),
                    point: format!("{lambda}"),
                    report: run(model, &c)?,
                });
            }
        }
        SweepAxis::NAugments(grid) => {
            for &n in grid {
                let mut c = cfg.clone();
                c.plan.n_augments = n;
                rows.push(SweepRow {
                    series: "n_augments".into(),
                    point: n.to_string(),
                    report: run(model, &c)?,
                });
            }
        }
        SweepAxis::LeaveOneOutAugment => {
            let pool = &cfg.plan.pool;
            ensure!(pool.len() >= 2, Config, "leave-one-out needs a pool of at least two");
            for (i, left_out) in pool.iter().enumerate() {
                let mut rest = pool.clone();
                rest.remove(i);
                let plan = AugmentPlan {
                    k_compose: cfg.plan.k_compose.min(rest.len()),
                    pool: rest,
                    ..cfg.plan.clone()
                };
                let mut c = cfg.clone();
                c.plan = plan;
                rows.push(SweepRow {
                    series: "without".into(),
                    point: left_out.name().to_string(),
                    report: run(model, &c)?,
                });
            }
        }
        SweepAxis::BnMask => {
            let groups = model.bn_groups().len();
            for (series, prefix) in [("first", true), ("last", false)] {
                for k in 1..=groups {
                    let mask: Vec<bool> = (0..groups).map(|g| if prefix { g < k } else { g >= groups - k }).collect();
                    let masked = model.with_group_mask(&mask)?;
                    rows.push(SweepRow {
                        series: series.into(),
                        point: k.to_string(),
                        report: run(&masked, cfg)?,
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// One line per (grid point, condition), plus each point's mCA.
pub fn sweep_csv(rows: &[SweepRow], fingerprint: &str, resolved_config: &str) -> String {
    let mut out = preamble(fingerprint, resolved_config);
    out.push_str("series,point,condition,severity,accuracy\n");
    for r in rows {
        for c in &r.report.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.series,
                r.point,
                c.condition.name(),
                c.condition.severity(),
                c.accuracy
            );
        }
        let _ = writeln!(out, "{},{},mca,,{}", r.series, r.point, r.report.mca);
    }
    out
}
