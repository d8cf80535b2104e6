//! Labeled images: CIFAR-10 and raw fixture I/O, a procedural grating set for
//! offline runs, and seeded corruptions at five severities.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::augment::gaussian_blur;
use crate::error::{ensure, Error, FormatError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// `[1, 3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
}

impl LabeledImage {
    pub fn new(image: Tensor, label: usize) -> Result<Self> {
        let (n, c, _, _) = image.dims4()?;
        ensure!(n == 1 && c == 3, Data, "expected a [1, 3, H, W] image, got {:?}", image.shape());
        ensure!(
            image.data().iter().all(|v| (0.0..=1.0).contains(v)),
            Data,
            "pixel values must lie in [0, 1]"
        );
        Ok(LabeledImage { image, label })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    GaussianBlur,
    Contrast,
    Brightness,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 7] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::GaussianBlur,
        CorruptionKind::Contrast,
        CorruptionKind::Brightness,
        CorruptionKind::Pixelate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Pixelate => "pixelate",
        }
    }

    /// Parameter for severities 1 through 5. Blur sigmas are for 32×32 images.
    pub fn severity_table(self) -> [f32; 5] {
        match self {
            CorruptionKind::GaussianNoise => [0.04, 0.08, 0.12, 0.18, 0.26],
            CorruptionKind::ShotNoise => [500.0, 250.0, 100.0, 60.0, 30.0],
            CorruptionKind::ImpulseNoise => [0.01, 0.03, 0.06, 0.10, 0.17],
            CorruptionKind::GaussianBlur => [0.4, 0.6, 0.9, 1.3, 1.8],
            CorruptionKind::Contrast => [0.75, 0.6, 0.45, 0.3, 0.15],
            CorruptionKind::Brightness => [0.05, 0.10, 0.15, 0.22, 0.30],
            CorruptionKind::Pixelate => [0.9, 0.75, 0.6, 0.45, 0.3],
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown corruption kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        ensure!((1..=5).contains(&severity), Config, "severity must lie in 1..=5, got {severity}");
        Ok(CorruptionSpec { kind, severity, seed })
    }

    pub fn parameter(&self) -> f32 {
        self.kind.severity_table()[usize::from(self.severity) - 1]
    }

    /// Generator for the image at `index` of a dataset.
    pub fn rng_for(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }
}

/// Corrupts with the severity's table parameter, drawing noise from the corruption seed.
pub fn corrupt(img: &LabeledImage, spec: &CorruptionSpec) -> Result<LabeledImage> {
    corrupt_with(img, spec, &mut spec.rng_for(0))
}

/// [`corrupt`] with an explicit generator.
pub fn corrupt_with(img: &LabeledImage, spec: &CorruptionSpec, rng: &mut impl Rng) -> Result<LabeledImage> {
    CorruptionSpec::new(spec.kind, spec.severity, spec.seed)?;
    let image = apply_corruption(&img.image, spec.kind, spec.parameter(), rng)?;
    Ok(LabeledImage { image, label: img.label })
}

/// Corrupts every image; image `i` draws from stream `i` of the corruption seed.
pub fn corrupt_dataset(images: &[LabeledImage], spec: &CorruptionSpec) -> Result<Vec<LabeledImage>> {
    images
        .iter()
        .enumerate()
        .map(|(i, img)| corrupt_with(img, spec, &mut spec.rng_for(i as u64)))
        .collect()
}

/// Applies `kind` with a raw table parameter; output is clamped to `[0, 1]`.
pub fn apply_corruption(img: &Tensor, kind: CorruptionKind, param: f32, rng: &mut impl Rng) -> Result<Tensor> {
    let (_, c, h, w) = img.dims4()?;
    let mut out = match kind {
        CorruptionKind::GaussianNoise => {
            ensure!(param >= 0.0, InvalidArgument, "noise sigma must be non-negative");
            let mut out = img.clone();
            if param > 0.0 {
                let normal = Normal::new(0.0f32, param).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                for v in out.data_mut() {
                    *v += normal.sample(rng);
                }
            }
            out
        }
        CorruptionKind::ShotNoise => {
            ensure!(param > 0.0, InvalidArgument, "photon count must be positive");
            let count = f64::from(param);
            let mut out = img.clone();
            for v in out.data_mut() {
                let rate = count * f64::from(v.clamp(0.0, 1.0));
                let k = if rate > 0.0 {
                    Poisson::new(rate).map_err(|e| Error::InvalidArgument(e.to_string()))?.sample(rng)
                } else {
                    0.0
                };
                *v = (k / count) as f32;
            }
            out
        }
        CorruptionKind::ImpulseNoise => {
            ensure!((0.0..=1.0).contains(&param), InvalidArgument, "impulse fraction must lie in [0, 1]");
            let mut out = img.clone();
            for v in out.data_mut() {
                if rng.random::<f32>() < param {
                    *v = if rng.random::<bool>() { 1.0 } else { 0.0 };
                }
            }
            out
        }
        CorruptionKind::GaussianBlur => gaussian_blur(img, param * h.max(w) as f32 / 32.0)?,
        CorruptionKind::Contrast => {
            ensure!(param >= 0.0, InvalidArgument, "contrast factor must be non-negative");
            let mean = img.data().iter().map(|&v| f64::from(v)).sum::<f64>() / img.len() as f64;
            img.map(|v| (mean + (f64::from(v) - mean) * f64::from(param)) as f32)
        }
        CorruptionKind::Brightness => img.map(|v| v + param),
        CorruptionKind::Pixelate => {
            ensure!(param > 0.0 && param <= 1.0, InvalidArgument, "pixelate factor must lie in (0, 1]");
            let (sh, sw) = (scaled(h, param), scaled(w, param));
            let mut out = img.clone();
            for (src, dst) in img.data().chunks(h * w).zip(out.data_mut().chunks_mut(h * w)) {
                for y in 0..h {
                    // Down to (sh, sw) by nearest sampling, then back up by nearest.
                    let ys = nearest(nearest(y, h, sh), sh, h);
                    for x in 0..w {
                        let xs = nearest(nearest(x, w, sw), sw, w);
                        dst[y * w + x] = src[ys * w + xs];
                    }
                }
            }
            out
        }
    };
    debug_assert_eq!(out.shape()[1], c);
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

fn scaled(extent: usize, factor: f32) -> usize {
    ((extent as f32 * factor).round() as usize).clamp(1, extent)
}

/// Index in a `to`-long axis nearest to index `i` of a `from`-long axis.
fn nearest(i: usize, from: usize, to: usize) -> usize {
    (((i as f64 + 0.5) * to as f64 / from as f64) as usize).min(to - 1)
}

/// Procedural oriented gratings. Class `k` fixes an orientation and a spatial
/// frequency; phase, tint, amplitude, brightness and pixel noise vary per
/// image.
pub fn synthetic_dataset(class_count: usize, per_class: usize, image_size: usize, seed: u64) -> Result<Vec<LabeledImage>> {
    ensure!(class_count >= 2, Config, "need at least two classes");
    ensure!(per_class > 0 && image_size > 0, Config, "per_class and image_size must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(class_count * per_class);
    for _ in 0..per_class {
        for label in 0..class_count {
            let image = grating(label, class_count, image_size, &mut rng)?;
            out.push(LabeledImage { image, label });
        }
    }
    Ok(out)
}

/// Orientation (radians) and frequency (cycles per image) for class `label`.
pub fn class_pattern(label: usize, class_count: usize) -> (f32, f32) {
    let orientations = class_count.div_ceil(2);
    let theta = std::f32::consts::PI * (label % orientations) as f32 / orientations as f32;
    let cycles = if label < orientations { 3.0 } else { 6.0 };
    (theta, cycles)
}

fn grating(label: usize, class_count: usize, size: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (theta, cycles) = class_pattern(label, class_count);
    let theta = theta + rng.random_range(-0.08f32..0.08);
    let freq = cycles * rng.random_range(0.92f32..1.08) / size as f32;
    let phase = rng.random_range(0.0..std::f32::consts::TAU);
    let amplitude = rng.random_range(0.15f32..0.35);
    let brightness = rng.random_range(0.35f32..0.65);
    let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.6f32..1.0));
    let noise = Normal::new(0.0f32, 0.04).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let (s, co) = theta.sin_cos();
    let mut data = vec![0.0f32; 3 * size * size];
    for (ch, plane) in data.chunks_mut(size * size).enumerate() {
        for y in 0..size {
            for x in 0..size {
                let u = x as f32 * co + y as f32 * s;
                let wave = (std::f32::consts::TAU * freq * u + phase).sin();
                let v = brightness + amplitude * tint[ch] * wave + noise.sample(rng);
                plane[y * size + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(&[1, 3, size, size], data)
}

const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Parses CIFAR-10 binary records: one label byte then R, G, B planes.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Vec<LabeledImage>> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(FormatError::Truncated("CIFAR-10 record").into());
    }
    bytes
        .chunks(CIFAR_RECORD)
        .enumerate()
        .map(|(i, rec)| {
            let label = usize::from(rec[0]);
            if label > 9 {
                return Err(FormatError::Record(format!("record {i} has label {label}")).into());
            }
            let pixels = rec[1..].iter().map(|&b| f32::from(b) / 255.0).collect();
            Ok(LabeledImage {
                image: Tensor::new(&[1, 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?,
                label,
            })
        })
        .collect()
}

pub fn load_cifar10_binary(path: impl AsRef<Path>) -> Result<Vec<LabeledImage>> {
    parse_cifar10(&fs::read(path)?)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Raw fixture: u32 count, u32 H, u32 W (little-endian), then per image a label
/// byte and `3·H·W` pixel bytes.
pub fn encode_raw(images: &[LabeledImage]) -> Result<Vec<u8>> {
    let (h, w) = match images.first() {
        Some(first) => {
            let (_, _, h, w) = first.image.dims4()?;
            (h, w)
        }
        None => (0, 0),
    };
    let mut out = Vec::with_capacity(12 + images.len() * (1 + 3 * h * w));
    for v in [images.len(), h, w] {
        let v = u32::try_from(v).map_err(|_| Error::Data(format!("{v} does not fit the raw header")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (i, item) in images.iter().enumerate() {
        ensure!(
            item.image.shape() == [1, 3, h, w],
            Data,
            "image {i} has shape {:?}, expected [1, 3, {h}, {w}]",
            item.image.shape()
        );
        let label = u8::try_from(item.label).map_err(|_| Error::Data(format!("label {} exceeds one byte", item.label)))?;
        out.push(label);
        out.extend(item.image.data().iter().map(|&v| quantize(v)));
    }
    Ok(out)
}

pub fn decode_raw(bytes: &[u8]) -> Result<Vec<LabeledImage>> {
    let word = |i: usize| -> Result<usize> {
        let b = bytes
            .get(4 * i..4 * i + 4)
            .ok_or(FormatError::Truncated("raw image header"))?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    };
    let (count, h, w) = (word(0)?, word(1)?, word(2)?);
    let record = 1 + 3 * h * w;
    let body = &bytes[12..];
    if body.len() < count * record {
        return Err(FormatError::Truncated("raw image record").into());
    }
    if body.len() > count * record {
        return Err(FormatError::Record(format!("{} trailing bytes", body.len() - count * record)).into());
    }
    if count > 0 && h * w == 0 {
        return Err(FormatError::Record("zero image extent".into()).into());
    }
    body.chunks(record.max(1))
        .take(count)
        .map(|rec| {
            let pixels = rec[1..].iter().map(|&b| f32::from(b) / 255.0).collect();
            Ok(LabeledImage {
                image: Tensor::new(&[1, 3, h, w], pixels)?,
                label: usize::from(rec[0]),
            })
        })
        .collect()
}

pub fn write_raw_images(path: impl AsRef<Path>, images: &[LabeledImage]) -> Result<()> {
    fs::write(path, encode_raw(images)?)?;
    Ok(())
}

pub fn read_raw_images(path: impl AsRef<Path>) -> Result<Vec<LabeledImage>> {
    decode_raw(&fs::read(path)?)
}

/// Reads either format: a consistent raw header wins, otherwise CIFAR-10.
pub fn load_images(path: impl AsRef<Path>) -> Result<Vec<LabeledImage>> {
    let bytes = fs::read(path)?;
    if bytes.len() >= 12 {
        let word = |i: usize| u32::from_le_bytes([bytes[4 * i], bytes[4 * i + 1], bytes[4 * i + 2], bytes[4 * i + 3]]) as u64;
        let (count, h, w) = (word(0), word(1), word(2));
        let expected = count
            .checked_mul(1 + 3 * h * w)
            .and_then(|body| body.checked_add(12));
        if expected == Some(bytes.len() as u64) {
            return decode_raw(&bytes);
        }
    }
    parse_cifar10(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(size: usize, value: f32) -> LabeledImage {
        LabeledImage::new(Tensor::full(&[1, 3, size, size], value), 3).unwrap()
    }

    fn mse(a: &Tensor, b: &Tensor) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| f64::from(x - y).powi(2))
            .sum::<f64>()
            / a.len() as f64
    }

    #[test]
    fn synthetic_is_deterministic_and_in_range() {
        let a = synthetic_dataset(2, 3, 16, 4).unwrap();
        let b = synthetic_dataset(2, 3, 16, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        assert!(a.iter().all(|i| i.label < 2));
        assert!(a.iter().all(|i| i.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
        assert_ne!(a, synthetic_dataset(2, 3, 16, 5).unwrap());
    }

    #[test]
    fn identity_probes() {
        let img = synthetic_dataset(2, 1, 16, 1).unwrap().remove(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let same = apply_corruption(&img.image, CorruptionKind::GaussianNoise, 0.0, &mut rng).unwrap();
        assert_eq!(same, img.image);
        let same = apply_corruption(&img.image, CorruptionKind::Pixelate, 1.0, &mut rng).unwrap();
        assert_eq!(same, img.image);
    }

    #[test]
    fn severe_noise_is_unbiased_on_mid_gray() {
        let size = 32;
        let img = gray(size, 0.5);
        let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, 5, 11).unwrap();
        let out = corrupt(&img, &spec).unwrap();
        let n = out.image.len() as f64;
        let mean = out.image.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let bound = 3.0 * 0.26 / n.sqrt();
        assert!((mean - 0.5).abs() <= bound, "mean {mean}, bound {bound}");
        assert_eq!(out.label, img.label);
    }

    #[test]
    fn label_and_shape_are_preserved() {
        let img = synthetic_dataset(3, 1, 12, 2).unwrap().remove(2);
        for kind in CorruptionKind::ALL {
            for severity in 1..=5 {
                let out = corrupt(&img, &CorruptionSpec::new(kind, severity, 3).unwrap()).unwrap();
                assert_eq!(out.label, img.label);
                assert_eq!(out.image.shape(), img.image.shape());
                assert!(out.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn severity_is_monotone_in_distortion() {
        let images = synthetic_dataset(10, 10, 16, 6).unwrap();
        for kind in CorruptionKind::ALL {
            let mut last = 0.0;
            for severity in 1..=5 {
                let spec = CorruptionSpec::new(kind, severity, 9).unwrap();
                let out = corrupt_dataset(&images, &spec).unwrap();
                let d = images.iter().zip(&out).map(|(a, b)| mse(&a.image, &b.image)).sum::<f64>() / images.len() as f64;
                assert!(d >= last, "{kind} severity {severity}: {d} < {last}");
                last = d;
            }
        }
    }

    #[test]
    fn stochastic_kinds_are_seeded() {
        let img = synthetic_dataset(2, 1, 16, 1).unwrap().remove(1);
        for kind in [CorruptionKind::GaussianNoise, CorruptionKind::ShotNoise, CorruptionKind::ImpulseNoise] {
            let spec = CorruptionSpec::new(kind, 3, 21).unwrap();
            assert_eq!(corrupt(&img, &spec).unwrap(), corrupt(&img, &spec).unwrap());
            let other = CorruptionSpec { seed: 22, ..spec };
            assert_ne!(corrupt(&img, &spec).unwrap(), corrupt(&img, &other).unwrap());
        }
    }

    #[test]
    fn bad_specs_are_rejected() {
        assert!(CorruptionSpec::new(CorruptionKind::Contrast, 0, 0).is_err());
        assert!(CorruptionSpec::new(CorruptionKind::Contrast, 6, 0).is_err());
        assert!("fog".parse::<CorruptionKind>().is_err());
        assert_eq!("pixelate".parse::<CorruptionKind>().unwrap(), CorruptionKind::Pixelate);
    }

    #[test]
    fn contrast_and_brightness_tables() {
        let img = gray(4, 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = apply_corruption(&img.image, CorruptionKind::Brightness, 0.3, &mut rng).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
        let mut data = vec![0.2f32; 48];
        data[0] = 1.0;
        let x = Tensor::new(&[1, 3, 4, 4], data).unwrap();
        let out = apply_corruption(&x, CorruptionKind::Contrast, 0.5, &mut rng).unwrap();
        let mean = (1.0 + 47.0 * 0.2) / 48.0;
        assert!((out.data()[0] - (mean + 0.5 * (1.0 - mean))).abs() < 1e-6);
    }

    #[test]
    fn pixelate_makes_blocks() {
        let data: Vec<f32> = (0..3 * 16).map(|i| (i % 16) as f32 / 16.0).collect();
        let x = Tensor::new(&[1, 3, 4, 4], data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = apply_corruption(&x, CorruptionKind::Pixelate, 0.5, &mut rng).unwrap();
        let p = &out.data()[..16];
        assert_eq!(p[0], p[1]);
        assert_eq!(p[0], p[4]);
        assert_eq!(p[0], p[5]);
        assert_eq!(p[2], p[3]);
    }

    #[test]
    fn cifar_format() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[0] = 7;
        bytes[1] = 255;
        bytes[CIFAR_RECORD] = 9;
        let images = parse_cifar10(&bytes).unwrap();
        assert_eq!(images.len(), 2);
        assert_eq!(images[0].label, 7);
        assert_eq!(images[0].image.data()[0], 1.0);
        assert_eq!(images[1].label, 9);
        assert_eq!(10_000 * CIFAR_RECORD, 30_730_000);
        assert!(matches!(
            parse_cifar10(&bytes[..CIFAR_RECORD + 5]),
            Err(Error::Format(FormatError::Truncated(_)))
        ));
        bytes[0] = 10;
        assert!(matches!(parse_cifar10(&bytes), Err(Error::Format(FormatError::Record(_)))));
    }

    #[test]
    fn raw_round_trip_is_lossless_at_8_bits() {
        let images = synthetic_dataset(4, 3, 8, 1).unwrap();
        let back = decode_raw(&encode_raw(&images).unwrap()).unwrap();
        assert_eq!(back.len(), images.len());
        for (a, b) in images.iter().zip(&back) {
            assert_eq!(a.label, b.label);
            for (&x, &y) in a.image.data().iter().zip(b.image.data()) {
                assert_eq!(quantize(x), quantize(y));
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
        // A second pass is exact.
        assert_eq!(decode_raw(&encode_raw(&back).unwrap()).unwrap(), back);
        let bytes = encode_raw(&images).unwrap();
        assert!(decode_raw(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn load_images_detects_format() {
        let dir = tempfile::tempdir().unwrap();
        let images = synthetic_dataset(2, 2, 8, 3).unwrap();
        let raw = dir.path().join("set.raw");
        write_raw_images(&raw, &images).unwrap();
        assert_eq!(load_images(&raw).unwrap().len(), 4);
        let cifar = dir.path().join("set.bin");
        fs::write(&cifar, vec![1u8; CIFAR_RECORD]).unwrap();
        assert_eq!(load_images(&cifar).unwrap()[0].label, 1);
    }
}
