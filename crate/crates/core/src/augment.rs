//! Label-preserving image augmentations and their random composition.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`), a portable generator with
//! a published algorithm. Every augmented batch derives from one root seed;
//! augment `i` draws from ChaCha stream `i` of that seed.

use std::fmt;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

/// A pool entry: an augmentation family with the ranges its parameters are
/// drawn from.
#[derive(Clone, Debug, PartialEq)]
pub enum AugmentKind {
    GaussianBlur { sigma: (f32, f32) },
    Rotate { degrees: (f32, f32) },
    ColorJitter { brightness: f32, contrast: f32, saturation: f32 },
    HorizontalFlip,
    VerticalFlip,
    MirrorReflect,
}

/// A concrete augmentation with all parameters fixed.
#[derive(Clone, Debug, PartialEq)]
pub enum AugmentationOp {
    GaussianBlur { sigma: f32 },
    Rotate { degrees: f32 },
    ColorJitter { brightness: f32, contrast: f32, saturation: f32 },
    HorizontalFlip,
    VerticalFlip,
    MirrorReflect,
}

impl AugmentKind {
    pub fn name(&self) -> &'static str {
        match self {
            AugmentKind::GaussianBlur { .. } => "blur",
            AugmentKind::Rotate { .. } => "rotate",
            AugmentKind::ColorJitter { .. } => "jitter",
            AugmentKind::HorizontalFlip => "hflip",
            AugmentKind::VerticalFlip => "vflip",
            AugmentKind::MirrorReflect => "mirror",
        }
    }

    pub fn default_blur() -> Self {
        AugmentKind::GaussianBlur { sigma: (0.5, 2.0) }
    }

    pub fn default_rotate() -> Self {
        AugmentKind::Rotate { degrees: (-30.0, 30.0) }
    }

    pub fn default_jitter() -> Self {
        AugmentKind::ColorJitter {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
        }
    }

    /// Parses a pool entry by name, using the default parameter ranges.
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "blur" => Self::default_blur(),
            "rotate" => Self::default_rotate(),
            "jitter" => Self::default_jitter(),
            "hflip" => AugmentKind::HorizontalFlip,
            "vflip" => AugmentKind::VerticalFlip,
            "mirror" => AugmentKind::MirrorReflect,
            other => return Err(Error::Config(format!("unknown augmentation `{other}`"))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            AugmentKind::GaussianBlur { sigma: (lo, hi) } => {
                ensure!(
                    lo >= 0.0 && lo <= hi && hi.is_finite(),
                    Config,
                    "blur sigma range must satisfy 0 <= lo <= hi, got ({lo}, {hi})"
                );
            }
            AugmentKind::Rotate { degrees: (lo, hi) } => {
                ensure!(
                    lo.is_finite() && hi.is_finite() && lo <= hi,
                    Config,
                    "rotation range must be finite and ordered, got ({lo}, {hi})"
                );
            }
            AugmentKind::ColorJitter { brightness, contrast, saturation } => {
                check_jitter(brightness, contrast, saturation)?;
            }
            _ => {}
        }
        Ok(())
    }

    fn sample(&self, rng: &mut impl Rng) -> AugmentationOp {
        let draw = |rng: &mut dyn rand::RngCore, (lo, hi): (f32, f32)| {
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..=hi)
            }
        };
        match *self {
            AugmentKind::GaussianBlur { sigma } => AugmentationOp::GaussianBlur { sigma: draw(rng, sigma) },
            AugmentKind::Rotate { degrees } => AugmentationOp::Rotate { degrees: draw(rng, degrees) },
            AugmentKind::ColorJitter { brightness, contrast, saturation } => AugmentationOp::ColorJitter {
                brightness: draw(rng, (1.0 - brightness, 1.0 + brightness)),
                contrast: draw(rng, (1.0 - contrast, 1.0 + contrast)),
                saturation: draw(rng, (1.0 - saturation, 1.0 + saturation)),
            },
            AugmentKind::HorizontalFlip => AugmentationOp::HorizontalFlip,
            AugmentKind::VerticalFlip => AugmentationOp::VerticalFlip,
            AugmentKind::MirrorReflect => AugmentationOp::MirrorReflect,
        }
    }
}

impl fmt::Display for AugmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl AugmentationOp {
    pub fn apply(&self, img: &Tensor) -> Result<Tensor> {
        match *self {
            AugmentationOp::GaussianBlur { sigma } => gaussian_blur(img, sigma),
            AugmentationOp::Rotate { degrees } => rotate(img, degrees),
            AugmentationOp::ColorJitter { brightness, contrast, saturation } => {
                jitter_with_factors(img, brightness, contrast, saturation)
            }
            AugmentationOp::HorizontalFlip => horizontal_flip(img),
            AugmentationOp::VerticalFlip => vertical_flip(img),
            AugmentationOp::MirrorReflect => mirror_reflect(img),
        }
    }
}

/// An ordered sequence of concrete augmentations.
#[derive(Clone, Debug, PartialEq)]
pub struct ComposedAugment(pub Vec<AugmentationOp>);

impl ComposedAugment {
    pub fn apply(&self, img: &Tensor) -> Result<Tensor> {
        self.0.iter().try_fold(img.clone(), |acc, op| op.apply(&acc))
    }
}

/// Pool, composition size, augment count and seed for one augmented batch.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPlan {
    pub pool: Vec<AugmentKind>,
    pub k_compose: usize,
    pub n_augments: usize,
    pub seed: u64,
}

impl AugmentPlan {
    /// Jitter, rotation, mirror and both flips, all five composed per augment,
    /// two augments.
    pub fn classification(seed: u64) -> Self {
        AugmentPlan {
            pool: vec![
                AugmentKind::default_jitter(),
                AugmentKind::default_rotate(),
                AugmentKind::MirrorReflect,
                AugmentKind::VerticalFlip,
                AugmentKind::HorizontalFlip,
            ],
            k_compose: 5,
            n_augments: 2,
            seed,
        }
    }

    /// Blur plus rotation, one augment; the recipe used for dense features.
    pub fn dense(seed: u64) -> Self {
        AugmentPlan {
            pool: vec![AugmentKind::default_blur(), AugmentKind::default_rotate()],
            k_compose: 2,
            n_augments: 1,
            seed,
        }
    }

    pub fn with_augments(mut self, n: usize) -> Self {
        self.n_augments = n;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.k_compose >= 1 && self.k_compose <= self.pool.len(),
            Config,
            "compose size {} must lie in 1..={}",
            self.k_compose,
            self.pool.len()
        );
        self.pool.iter().try_for_each(AugmentKind::validate)
    }

    /// Generator for augment `index`: stream `index` of the root seed.
    pub fn rng_for(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }
}

/// Picks `k_compose` distinct pool entries uniformly, shuffles their order and
/// samples their parameters.
pub fn rand_choose_k(pool: &[AugmentKind], k_compose: usize, rng: &mut impl Rng) -> Result<ComposedAugment> {
    ensure!(
        k_compose >= 1 && k_compose <= pool.len(),
        Config,
        "compose size {k_compose} must lie in 1..={}",
        pool.len()
    );
    let mut chosen: Vec<usize> = index::sample(rng, pool.len(), k_compose).into_vec();
    chosen.shuffle(rng);
    Ok(ComposedAugment(chosen.into_iter().map(|i| pool[i].sample(rng)).collect()))
}

/// Row 0 is `img` untouched; rows `1..=n` are independent random compositions.
pub fn generate_augmented_batch(img: &Tensor, plan: &AugmentPlan) -> Result<Tensor> {
    let (n, _, _, _) = img.dims4()?;
    ensure!(n == 1, Shape, "expected a single image, got {n} rows");
    plan.validate()?;
    let mut rows = Vec::with_capacity(plan.n_augments + 1);
    rows.push(img.clone());
    for i in 1..=plan.n_augments {
        let mut rng = plan.rng_for(i as u64);
        let composed = rand_choose_k(&plan.pool, plan.k_compose, &mut rng)?;
        rows.push(composed.apply(img)?);
    }
    Tensor::concat_rows(&rows)
}

fn map_planes(img: &Tensor, f: impl Fn(&[f32], &mut [f32], usize, usize)) -> Result<Tensor> {
    let (_, _, h, w) = img.dims4()?;
    let mut out = Tensor::zeros(img.shape());
    for (src, dst) in img.data().chunks(h * w).zip(out.data_mut().chunks_mut(h * w)) {
        f(src, dst, h, w);
    }
    Ok(out)
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as i64;
    let s2 = 2.0 * f64::from(sigma).powi(2);
    let raw: Vec<f64> = (-radius..=radius).map(|j| (-(j * j) as f64 / s2).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| (v / total) as f32).collect()
}

/// Separable Gaussian blur, radius ⌈3σ⌉, clamp-to-edge borders.
pub fn gaussian_blur(img: &Tensor, sigma: f32) -> Result<Tensor> {
    ensure!(
        sigma >= 0.0 && sigma.is_finite(),
        InvalidArgument,
        "blur sigma must be non-negative, got {sigma}"
    );
    img.dims4()?;
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    map_planes(img, |src, dst, h, w| {
        let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
        let mut tmp = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(j, k)| k * src[y * w + clamp(x as isize + j as isize - radius, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(j, k)| k * tmp[clamp(y as isize + j as isize - radius, h) * w + x])
                    .sum();
            }
        }
    })
}

/// Counter-clockwise rotation about the image center with bilinear sampling;
/// samples falling outside the frame read as zero. Multiples of 180°, and of
/// 90° on square images, are exact index permutations.
pub fn rotate(img: &Tensor, degrees: f32) -> Result<Tensor> {
    ensure!(degrees.is_finite(), InvalidArgument, "rotation angle must be finite");
    let (_, _, h, w) = img.dims4()?;
    let turn = f64::from(degrees).rem_euclid(360.0);
    let quarter = (turn / 90.0).round();
    if (turn - quarter * 90.0).abs() < 1e-9 {
        match (quarter as u32) % 4 {
            0 => return Ok(img.clone()),
            2 => return map_planes(img, |s, d, h, w| {
                for (i, v) in d.iter_mut().enumerate() {
                    *v = s[h * w - 1 - i];
                }
            }),
            1 if h == w => return map_planes(img, |s, d, n, _| {
                for y in 0..n {
                    for x in 0..n {
                        d[y * n + x] = s[x * n + (n - 1 - y)];
                    }
                }
            }),
            3 if h == w => return map_planes(img, |s, d, n, _| {
                for y in 0..n {
                    for x in 0..n {
                        d[y * n + x] = s[(n - 1 - x) * n + y];
                    }
                }
            }),
            _ => {}
        }
    }
    let (sin, cos) = f64::from(degrees).to_radians().sin_cos();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    map_planes(img, |s, d, h, w| {
        let at = |y: i64, x: i64| -> f64 {
            if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                0.0
            } else {
                f64::from(s[y as usize * w + x as usize])
            }
        };
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let sx = cos * dx - sin * dy + cx;
                let sy = sin * dx + cos * dy + cy;
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let (x0, y0) = (x0 as i64, y0 as i64);
                let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                    + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
                d[y * w + x] = v as f32;
            }
        }
    })
}

pub fn horizontal_flip(img: &Tensor) -> Result<Tensor> {
    map_planes(img, |s, d, _, w| {
        for (src, dst) in s.chunks(w).zip(d.chunks_mut(w)) {
            for (o, v) in dst.iter_mut().zip(src.iter().rev()) {
                *o = *v;
            }
        }
    })
}

pub fn vertical_flip(img: &Tensor) -> Result<Tensor> {
    map_planes(img, |s, d, h, w| {
        for y in 0..h {
            d[y * w..(y + 1) * w].copy_from_slice(&s[(h - 1 - y) * w..(h - y) * w]);
        }
    })
}

/// Reflection about the main diagonal (transpose); needs a square image.
pub fn mirror_reflect(img: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = img.dims4()?;
    ensure!(h == w, Shape, "mirror reflection needs a square image, got {h}x{w}");
    map_planes(img, |s, d, n, _| {
        for y in 0..n {
            for x in 0..n {
                d[y * n + x] = s[x * n + y];
            }
        }
    })
}

fn check_jitter(brightness: f32, contrast: f32, saturation: f32) -> Result<()> {
    for (name, v) in [("brightness", brightness), ("contrast", contrast), ("saturation", saturation)] {
        ensure!(
            (0.0..1.0).contains(&v),
            InvalidArgument,
            "{name} jitter must lie in [0, 1) so its factor range stays positive, got {v}"
        );
    }
    Ok(())
}

/// Random brightness, contrast and saturation with factors drawn uniformly
/// from `[1 − b, 1 + b]` etc.
pub fn color_jitter(
    img: &Tensor,
    brightness: f32,
    contrast: f32,
    saturation: f32,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    check_jitter(brightness, contrast, saturation)?;
    let op = AugmentKind::ColorJitter { brightness, contrast, saturation }.sample(rng);
    op.apply(img)
}

/// Applies fixed brightness, contrast and saturation factors in that order,
/// clamping to [0, 1] after each step.
pub fn jitter_with_factors(img: &Tensor, brightness: f32, contrast: f32, saturation: f32) -> Result<Tensor> {
    ensure!(
        brightness > 0.0 && contrast > 0.0 && saturation > 0.0,
        InvalidArgument,
        "jitter factors must be positive"
    );
    let (n, c, h, w) = img.dims4()?;
    let plane = h * w;
    let mut out = img.map(|v| (v * brightness).clamp(0.0, 1.0));
    for row in out.data_mut().chunks_mut(c * plane) {
        let mean = (row.iter().map(|&v| f64::from(v)).sum::<f64>() / row.len() as f64) as f32;
        for v in row.iter_mut() {
            *v = (contrast * *v + (1.0 - contrast) * mean).clamp(0.0, 1.0);
        }
        for p in 0..plane {
            let gray = (0..c).map(|ch| f64::from(row[ch * plane + p])).sum::<f64>() / c as f64;
            let gray = gray as f32;
            for ch in 0..c {
                let v = &mut row[ch * plane + p];
                *v = (saturation * *v + (1.0 - saturation) * gray).clamp(0.0, 1.0);
            }
        }
    }
    debug_assert_eq!(out.rows(), n);
    Ok(out)
}
