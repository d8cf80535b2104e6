//! Network graphs, reference architectures and per-layer BN modes.

mod forward;
mod io;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use forward::{forward, forward_inspect, BnMode};
pub use io::{load_weights, model_hash, save_weights, FORMAT_VERSION, MAGIC, MANIFEST_RECORD};

use crate::error::{ensure, Error, Result};
use crate::normalization::{BnParams, ChannelStats, DEFAULT_EPSILON};
use crate::tensor::Tensor;

/// 1×1 strided convolution on a residual shortcut.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Projection {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    AvgPool {
        window: usize,
        stride: usize,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    /// Saves the current activation as a shortcut.
    ResidualBegin,
    /// Adds the saved shortcut (optionally projected) to the current activation.
    ResidualEnd {
        projection: Option<Projection>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
        }
    }

    /// Learned parameter tensors of this layer with their expected shapes.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let p = |suffix: &str, shape: Vec<usize>| (format!("{}.{suffix}", self.name), shape);
        match self.kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                p("weight", vec![out_channels, in_channels, kernel, kernel]),
                p("bias", vec![out_channels]),
            ],
            LayerKind::BatchNorm { channels } => {
                vec![p("gamma", vec![channels]), p("beta", vec![channels])]
            }
            LayerKind::Linear {
                in_features,
                out_features,
            } => vec![
                p("weight", vec![out_features, in_features]),
                p("bias", vec![out_features]),
            ],
            LayerKind::ResidualEnd {
                projection: Some(proj),
            } => vec![
                p("weight", vec![proj.out_channels, proj.in_channels, 1, 1]),
                p("bias", vec![proj.out_channels]),
            ],
            _ => Vec::new(),
        }
    }
}

/// Which statistics a BN layer uses under an adaptive mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnLayerMode {
    /// Always the stored running statistics.
    Source,
    /// Adapted statistics, as dictated by the active [`BnMode`].
    AugBn,
}

impl BnLayerMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BnLayerMode::Source => "source",
            BnLayerMode::AugBn => "augbn",
        }
    }
}

impl FromStr for BnLayerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(BnLayerMode::Source),
            "augbn" => Ok(BnLayerMode::AugBn),
            other => Err(Error::Config(format!("unknown BN layer mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    TinyCnn,
    ResnetMini,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::TinyCnn => "tiny-cnn",
            Arch::ResnetMini => "resnet-mini",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny-cnn" => Ok(Arch::TinyCnn),
            "resnet-mini" => Ok(Arch::ResnetMini),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

/// Channel widths of the four resnet-mini block groups.
pub const RESNET_MINI_WIDTHS: [usize; 4] = [16, 32, 64, 128];

/// An ordered layer list with its parameters, BN running statistics and
/// per-BN-layer modes. Immutable during inference.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    pub(crate) arch: String,
    pub(crate) input_channels: usize,
    pub(crate) class_count: usize,
    pub(crate) bn_epsilon: f32,
    pub(crate) layers: Vec<LayerSpec>,
    pub(crate) params: BTreeMap<String, Tensor>,
    pub(crate) bn_stats: BTreeMap<String, ChannelStats>,
    pub(crate) bn_mask: BTreeMap<String, BnLayerMode>,
}

impl ModelGraph {
    /// Assembles a graph and checks it; parameters absent from `params` are
    /// zero-filled, BN layers without stats get zero mean and unit variance.
    pub fn from_layers(
        arch: impl Into<String>,
        input_channels: usize,
        class_count: usize,
        layers: Vec<LayerSpec>,
        mut params: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let mut bn_stats = BTreeMap::new();
        let mut bn_mask = BTreeMap::new();
        for layer in &layers {
            for (name, shape) in layer.param_shapes() {
                params
                    .entry(name)
                    .or_insert_with(|| Tensor::zeros(&shape));
            }
            if let LayerKind::BatchNorm { channels } = layer.kind {
                bn_stats.insert(layer.name.clone(), ChannelStats::standard(channels));
                bn_mask.insert(layer.name.clone(), BnLayerMode::Source);
            }
        }
        let model = ModelGraph {
            arch: arch.into(),
            input_channels,
            class_count,
            bn_epsilon: DEFAULT_EPSILON,
            layers,
            params,
            bn_stats,
            bn_mask,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn arch(&self) -> &str {
        &self.arch
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn bn_epsilon(&self) -> f32 {
        self.bn_epsilon
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn bn_stats(&self, layer: &str) -> Result<&ChannelStats> {
        self.bn_stats
            .get(layer)
            .ok_or_else(|| Error::UnknownLayer(layer.to_string()))
    }

    pub fn bn_params(&self, layer: &str) -> Result<BnParams> {
        Ok(BnParams {
            gamma: self.param(&format!("{layer}.gamma"))?.data().to_vec(),
            beta: self.param(&format!("{layer}.beta"))?.data().to_vec(),
            epsilon: self.bn_epsilon,
        })
    }

    pub fn bn_mask(&self) -> &BTreeMap<String, BnLayerMode> {
        &self.bn_mask
    }

    pub fn bn_layer_names(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::BatchNorm { .. }))
            .map(|l| l.name.as_str())
            .collect()
    }

    /// Block groups, in order, keyed by the layer-name prefix before the
    /// first `.`; only groups holding BN layers are listed.
    pub fn bn_groups(&self) -> Vec<String> {
        let mut groups: Vec<String> = Vec::new();
        for name in self.bn_layer_names() {
            let g = group_of(name).to_string();
            if !groups.contains(&g) {
                groups.push(g);
            }
        }
        groups
    }

    /// New graph with the given BN layers switched; other layers keep their mode.
    pub fn with_bn_modes(&self, updates: &BTreeMap<String, BnLayerMode>) -> Result<Self> {
        let mut next = self.clone();
        for (name, mode) in updates {
            let slot = next
                .bn_mask
                .get_mut(name)
                .ok_or_else(|| Error::UnknownLayer(name.clone()))?;
            *slot = *mode;
        }
        Ok(next)
    }

    pub fn with_all_bn(&self, mode: BnLayerMode) -> Self {
        let mut next = self.clone();
        next.bn_mask.values_mut().for_each(|m| *m = mode);
        next
    }

    /// New graph where BN layers of group `i` use AugBN iff `aug_groups[i]`.
    pub fn with_group_mask(&self, aug_groups: &[bool]) -> Result<Self> {
        let groups = self.bn_groups();
        ensure!(
            aug_groups.len() == groups.len(),
            Config,
            "mask names {} groups but the model has {}",
            aug_groups.len(),
            groups.len()
        );
        let mut next = self.clone();
        for (name, mode) in next.bn_mask.iter_mut() {
            let idx = groups.iter().position(|g| g == group_of(name)).expect("group of a BN layer");
            *mode = if aug_groups[idx] {
                BnLayerMode::AugBn
            } else {
                BnLayerMode::Source
            };
        }
        Ok(next)
    }

    /// New graph with parameter `name` replaced by a tensor of the same shape.
    pub fn with_param(&self, name: &str, value: Tensor) -> Result<Self> {
        let current = self.param(name)?;
        ensure!(
            current.shape() == value.shape(),
            Shape,
            "`{name}` has shape {:?}, got {:?}",
            current.shape(),
            value.shape()
        );
        let mut next = self.clone();
        next.params.insert(name.to_string(), value);
        Ok(next)
    }

    /// New graph with the running statistics of BN layer `layer` replaced.
    pub fn with_bn_stats(&self, layer: &str, stats: ChannelStats) -> Result<Self> {
        let current = self.bn_stats(layer)?;
        ensure!(
            current.channels() == stats.channels(),
            Shape,
            "`{layer}` has {} channels, got {}",
            current.channels(),
            stats.channels()
        );
        let mut next = self.clone();
        next.bn_stats.insert(layer.to_string(), stats);
        Ok(next)
    }

    pub fn with_bn_epsilon(&self, epsilon: f32) -> Result<Self> {
        ensure!(
            epsilon > 0.0 && epsilon.is_finite(),
            InvalidArgument,
            "epsilon must be positive, got {epsilon}"
        );
        let mut next = self.clone();
        next.bn_epsilon = epsilon;
        Ok(next)
    }

    pub fn has_augbn_layer(&self) -> bool {
        self.bn_mask.values().any(|&m| m == BnLayerMode::AugBn)
    }

    /// Checks layer compatibility and that every parameter and statistic has
    /// the shape its layer implies.
    pub fn validate(&self) -> Result<()> {
        ensure!(self.class_count >= 2, Config, "need at least two classes");
        ensure!(self.input_channels >= 1, Config, "need at least one input channel");
        let mut names = std::collections::BTreeSet::new();
        for layer in &self.layers {
            ensure!(
                names.insert(layer.name.as_str()),
                Config,
                "duplicate layer name `{}`",
                layer.name
            );
            for (name, shape) in layer.param_shapes() {
                let t = self.params.get(&name).ok_or_else(|| {
                    Error::Format(crate::error::FormatError::ShapeMismatch(format!(
                        "missing parameter `{name}`"
                    )))
                })?;
                if t.shape() != shape.as_slice() {
                    return Err(crate::error::FormatError::ShapeMismatch(format!(
                        "`{name}` has shape {:?}, layer expects {shape:?}",
                        t.shape()
                    ))
                    .into());
                }
            }
            if let LayerKind::BatchNorm { channels } = layer.kind {
                let stats = self.bn_stats.get(&layer.name).ok_or_else(|| {
                    crate::error::FormatError::ShapeMismatch(format!(
                        "missing running statistics for `{}`",
                        layer.name
                    ))
                })?;
                if stats.channels() != channels {
                    return Err(crate::error::FormatError::ShapeMismatch(format!(
                        "running statistics of `{}` have {} channels, expected {channels}",
                        layer.name,
                        stats.channels()
                    ))
                    .into());
                }
                ensure!(
                    self.bn_mask.contains_key(&layer.name),
                    Config,
                    "no BN mode for `{}`",
                    layer.name
                );
            }
        }
        ensure!(
            self.bn_mask.len() == self.bn_stats.len() && self.bn_mask.keys().all(|k| self.bn_stats.contains_key(k)),
            Config,
            "BN mode mask and statistics name different layers"
        );

        // Channel flow through the graph.
        enum Flow {
            Spatial(usize),
            Flat(usize),
        }
        let mut flow = Flow::Spatial(self.input_channels);
        let mut shortcuts = Vec::new();
        for layer in &self.layers {
            let bad = |what: String| Error::Config(format!("layer `{}`: {what}", layer.name));
            flow = match (&layer.kind, flow) {
                (
                    LayerKind::Conv {
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                        ..
                    },
                    Flow::Spatial(c),
                ) => {
                    if *in_channels != c {
                        return Err(bad(format!("expects {in_channels} channels, receives {c}")));
                    }
                    if *kernel == 0 || *stride == 0 {
                        return Err(bad("kernel and stride must be positive".into()));
                    }
                    Flow::Spatial(*out_channels)
                }
                (LayerKind::BatchNorm { channels }, Flow::Spatial(c)) => {
                    if *channels != c {
                        return Err(bad(format!("expects {channels} channels, receives {c}")));
                    }
                    Flow::Spatial(c)
                }
                (LayerKind::Relu, f) => f,
                (LayerKind::AvgPool { window, stride } | LayerKind::MaxPool { window, stride }, Flow::Spatial(c)) => {
                    if *window == 0 || *stride == 0 {
                        return Err(bad("window and stride must be positive".into()));
                    }
                    Flow::Spatial(c)
                }
                (LayerKind::GlobalAvgPool, Flow::Spatial(c)) => Flow::Spatial(c),
                (LayerKind::Flatten, Flow::Spatial(c)) => Flow::Flat(c),
                (
                    LayerKind::Linear {
                        in_features,
                        out_features,
                    },
                    Flow::Flat(d),
                ) => {
                    if *in_features != d {
                        return Err(bad(format!("expects {in_features} features, receives {d}")));
                    }
                    Flow::Flat(*out_features)
                }
                (LayerKind::ResidualBegin, Flow::Spatial(c)) => {
                    shortcuts.push(c);
                    Flow::Spatial(c)
                }
                (LayerKind::ResidualEnd { projection }, Flow::Spatial(c)) => {
                    let saved = shortcuts
                        .pop()
                        .ok_or_else(|| bad("residual end without a begin".into()))?;
                    match projection {
                        None if saved != c => {
                            return Err(bad(format!("shortcut has {saved} channels, branch {c}")))
                        }
                        Some(p) if p.in_channels != saved || p.out_channels != c || p.stride == 0 => {
                            return Err(bad("projection does not match shortcut and branch".into()))
                        }
                        _ => {}
                    }
                    Flow::Spatial(c)
                }
                _ => return Err(bad("layer cannot follow the previous layer's output".into())),
            };
        }
        ensure!(shortcuts.is_empty(), Config, "unterminated residual block");
        match flow {
            Flow::Flat(k) if k == self.class_count => Ok(()),
            _ => Err(Error::Config(format!(
                "graph must end in {} flat logits",
                self.class_count
            ))),
        }
    }
}

fn group_of(layer: &str) -> &str {
    layer.split('.').next().unwrap_or(layer)
}

fn conv(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize) -> LayerSpec {
    LayerSpec::new(
        name,
        LayerKind::Conv {
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            padding: kernel / 2,
        },
    )
}

fn bn(name: impl Into<String>, channels: usize) -> LayerSpec {
    LayerSpec::new(name, LayerKind::BatchNorm { channels })
}

fn relu(name: impl Into<String>) -> LayerSpec {
    LayerSpec::new(name, LayerKind::Relu)
}

fn head(width: usize, class_count: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::new("head.pool", LayerKind::GlobalAvgPool),
        LayerSpec::new("head.flatten", LayerKind::Flatten),
        LayerSpec::new(
            "head.fc",
            LayerKind::Linear {
                in_features: width,
                out_features: class_count,
            },
        ),
    ]
}

/// Three conv-BN-ReLU stages (16, 32, 64 channels; the last two stride 2),
/// global average pooling and a linear classifier.
fn tiny_cnn_layers(class_count: usize) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    let mut cin = 3;
    for (i, (width, stride)) in [(16, 1), (32, 2), (64, 2)].into_iter().enumerate() {
        let stage = format!("c{}", i + 1);
        layers.push(conv(format!("{stage}.conv"), cin, width, 3, stride));
        layers.push(bn(format!("{stage}.bn"), width));
        layers.push(relu(format!("{stage}.relu")));
        cin = width;
    }
    layers.extend(head(cin, class_count));
    layers
}

/// A 3×3 stem followed by four groups of two pre-activation residual blocks
/// (BN-ReLU-conv twice plus shortcut). Groups 2–4 halve resolution in their
/// first block and use a 1×1 projection shortcut there.
fn resnet_mini_layers(class_count: usize) -> Vec<LayerSpec> {
    let mut layers = vec![conv("stem.conv", 3, RESNET_MINI_WIDTHS[0], 3, 1)];
    let mut cin = RESNET_MINI_WIDTHS[0];
    for (g, &width) in RESNET_MINI_WIDTHS.iter().enumerate() {
        for b in 0..2 {
            let stride = if g > 0 && b == 0 { 2 } else { 1 };
            let p = format!("g{}.b{}", g + 1, b + 1);
            layers.push(LayerSpec::new(format!("{p}.res"), LayerKind::ResidualBegin));
            layers.push(bn(format!("{p}.bn1"), cin));
            layers.push(relu(format!("{p}.relu1")));
            layers.push(conv(format!("{p}.conv1"), cin, width, 3, stride));
            layers.push(bn(format!("{p}.bn2"), width));
            layers.push(relu(format!("{p}.relu2")));
            layers.push(conv(format!("{p}.conv2"), width, width, 3, 1));
            let projection = (stride != 1 || cin != width).then_some(Projection {
                in_channels: cin,
                out_channels: width,
                stride,
            });
            layers.push(LayerSpec::new(format!("{p}.add"), LayerKind::ResidualEnd { projection }));
            cin = width;
        }
    }
    layers.push(bn("g4.out_bn", cin));
    layers.push(relu("g4.out_relu"));
    layers.extend(head(cin, class_count));
    layers
}

/// He-initialized reference network; BN stats start at zero mean, unit
/// variance and every BN layer starts in source mode.
pub fn build_reference_model(arch: Arch, class_count: usize, seed: u64) -> Result<ModelGraph> {
    ensure!(class_count >= 2, Config, "need at least two classes, got {class_count}");
    let layers = match arch {
        Arch::TinyCnn => tiny_cnn_layers(class_count),
        Arch::ResnetMini => resnet_mini_layers(class_count),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    for layer in &layers {
        for (name, shape) in layer.param_shapes() {
            let len: usize = shape.iter().product();
            let data = if name.ends_with(".weight") {
                let fan_in: usize = shape[1..].iter().product();
                let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("finite std");
                (0..len).map(|_| normal.sample(&mut rng)).collect()
            } else if name.ends_with(".gamma") {
                vec![1.0; len]
            } else {
                vec![0.0; len]
            };
            params.insert(name, Tensor::new(&shape, data)?);
        }
    }
    ModelGraph::from_layers(arch.as_str(), 3, class_count, layers, params)
}
