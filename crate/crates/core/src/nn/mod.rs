//! Minimal neural-network engine: layer specs, models, exact gradients,
//! cross-entropy, and SGD with momentum.

pub mod checkpoint;
pub mod engine;
pub mod kernels;
pub mod loss;
pub mod optim;

use crate::error::{Error, Result};
use crate::rng::{self, PURPOSE_INIT};
use crate::tensor::Tensor;
use rand::Rng;

pub use engine::{backward, forward, infer, BnState, ForwardCache, Gradients, Phase, TrainScope};
pub use loss::cross_entropy;
pub use optim::{sgd_step, SgdConfig};

/// Activation geometry flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dims {
    Flat(usize),
    Chw(usize, usize, usize),
}

impl Dims {
    pub fn volume(&self) -> usize {
        match *self {
            Dims::Flat(d) => d,
            Dims::Chw(c, h, w) => c * h * w,
        }
    }

    /// Shape of a batch of `n` activations with these dims.
    pub fn batch_shape(&self, n: usize) -> Vec<usize> {
        match *self {
            Dims::Flat(d) => vec![n, d],
            Dims::Chw(c, h, w) => vec![n, c, h, w],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense { in_features: usize, out_features: usize },
    /// 3x3 kernel, stride 1, padding 1.
    Conv2d { in_channels: usize, out_channels: usize },
    /// 2x2 kernel, stride 2.
    MaxPool2d,
    Relu,
    Flatten,
    /// Affine frozen at gamma=1, beta=0; running statistics live with the
    /// caller (per client), never in the model.
    BatchNorm2d { channels: usize },
}

impl LayerKind {
    pub fn has_weights(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv2d { .. })
    }

    /// Prunable unit count: output nodes for dense, output channels for conv.
    pub fn unit_count(&self) -> usize {
        match *self {
            LayerKind::Dense { out_features, .. } => out_features,
            LayerKind::Conv2d { out_channels, .. } => out_channels,
            _ => 0,
        }
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerKind::Dense {
                in_features,
                out_features,
            } => Some(vec![out_features, in_features]),
            LayerKind::Conv2d {
                in_channels,
                out_channels,
            } => Some(vec![
                out_channels,
                in_channels,
                kernels::CONV_KERNEL,
                kernels::CONV_KERNEL,
            ]),
            _ => None,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Dense { in_features, .. } => in_features,
            LayerKind::Conv2d { in_channels, .. } => {
                in_channels * kernels::CONV_KERNEL * kernels::CONV_KERNEL
            }
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Participates in the sign supermask (weights frozen at init).
    pub masked: bool,
    /// Units of this layer may be removed by structured pruning.
    pub prune_eligible: bool,
}

impl LayerSpec {
    pub fn plain(kind: LayerKind) -> Self {
        LayerSpec {
            kind,
            masked: false,
            prune_eligible: false,
        }
    }

    pub fn masked(kind: LayerKind, prune_eligible: bool) -> Self {
        LayerSpec {
            kind,
            masked: true,
            prune_eligible,
        }
    }
}

/// Ordered layer chain with weights. Masked-layer weights are frozen after
/// initialization; only the classifier (final dense layer) stays trainable
/// under mask-based algorithms.
#[derive(Debug, Clone)]
pub struct Model {
    pub specs: Vec<LayerSpec>,
    pub weights: Vec<Option<Tensor>>,
    pub biases: Vec<Option<Tensor>>,
    pub input: Dims,
    /// Index of the classifier layer (the final dense layer).
    pub classifier: usize,
}

/// Per-layer input dims for a validated chain, plus the output dims.
pub fn infer_dims(specs: &[LayerSpec], input: Dims) -> Result<(Vec<Dims>, Dims)> {
    let mut per_layer = Vec::with_capacity(specs.len());
    let mut cur = input;
    for (i, spec) in specs.iter().enumerate() {
        per_layer.push(cur);
        cur = match spec.kind {
            LayerKind::Dense { in_features, out_features } => match cur {
                Dims::Flat(d) if d == in_features => Dims::Flat(out_features),
                other => {
                    return Err(Error::Config(format!(
                        "layer {i}: dense expects flat {in_features}, got {other:?}"
                    )))
                }
            },
            LayerKind::Conv2d { in_channels, out_channels } => match cur {
                Dims::Chw(c, h, w) if c == in_channels => Dims::Chw(out_channels, h, w),
                other => {
                    return Err(Error::Config(format!(
                        "layer {i}: conv expects {in_channels} channels, got {other:?}"
                    )))
                }
            },
            // floor semantics: a trailing odd row/column is ignored
            LayerKind::MaxPool2d => match cur {
                Dims::Chw(c, h, w) if h >= 2 && w >= 2 => Dims::Chw(c, h / 2, w / 2),
                other => {
                    return Err(Error::Config(format!(
                        "layer {i}: maxpool needs spatial dims >= 2, got {other:?}"
                    )))
                }
            },
            LayerKind::Relu => cur,
            LayerKind::Flatten => match cur {
                Dims::Chw(c, h, w) => Dims::Flat(c * h * w),
                other => {
                    return Err(Error::Config(format!(
                        "layer {i}: flatten expects spatial input, got {other:?}"
                    )))
                }
            },
            LayerKind::BatchNorm2d { channels } => match cur {
                Dims::Chw(c, _, _) if c == channels => cur,
                other => {
                    return Err(Error::Config(format!(
                        "layer {i}: batchnorm expects {channels} channels, got {other:?}"
                    )))
                }
            },
        };
    }
    Ok((per_layer, cur))
}

fn validate_classifier(specs: &[LayerSpec]) -> Result<usize> {
    match specs.last() {
        Some(spec) if matches!(spec.kind, LayerKind::Dense { .. }) => {
            if spec.masked || spec.prune_eligible {
                return Err(Error::Config(
                    "classifier layer must be unmasked and not prune-eligible".into(),
                ));
            }
            Ok(specs.len() - 1)
        }
        _ => Err(Error::Config("model must end with a dense classifier".into())),
    }
}

/// Builds a model with Kaiming-uniform weights, bound sqrt(6 / fan_in), and
/// zero biases. Deterministic given the seed.
pub fn init_model(specs: Vec<LayerSpec>, input: Dims, seed: u64) -> Result<Model> {
    infer_dims(&specs, input)?;
    let classifier = validate_classifier(&specs)?;
    let mut weights = Vec::with_capacity(specs.len());
    let mut biases = Vec::with_capacity(specs.len());
    for (l, spec) in specs.iter().enumerate() {
        match spec.kind.weight_shape() {
            Some(shape) => {
                let bound = (6.0 / spec.kind.fan_in() as f64).sqrt() as f32;
                let mut rng = rng::stream(&[seed, PURPOSE_INIT, l as u64]);
                let len: usize = shape.iter().product();
                let data: Vec<f32> = (0..len).map(|_| rng.random_range(-bound..=bound)).collect();
                weights.push(Some(Tensor::from_vec(&shape, data)?));
                biases.push(Some(Tensor::zeros(&[spec.kind.unit_count()])));
            }
            None => {
                weights.push(None);
                biases.push(None);
            }
        }
    }
    Ok(Model {
        specs,
        weights,
        biases,
        input,
        classifier,
    })
}

impl Model {
    pub fn num_classes(&self) -> usize {
        match self.specs[self.classifier].kind {
            LayerKind::Dense { out_features, .. } => out_features,
            _ => unreachable!("classifier is validated to be dense"),
        }
    }

    /// Total parameter count (weights + biases of every weighted layer).
    pub fn param_count(&self) -> usize {
        self.weights
            .iter()
            .chain(self.biases.iter())
            .flatten()
            .map(Tensor::len)
            .sum()
    }

    /// Indices of masked weighted layers, in order.
    pub fn masked_layers(&self) -> Vec<usize> {
        self.specs
            .iter()
            .enumerate()
            .filter(|(_, s)| s.masked && s.kind.has_weights())
            .map(|(i, _)| i)
            .collect()
    }

    /// Indices of all weighted layers, in order.
    pub fn weighted_layers(&self) -> Vec<usize> {
        self.specs
            .iter()
            .enumerate()
            .filter(|(_, s)| s.kind.has_weights())
            .map(|(i, _)| i)
            .collect()
    }

    /// FNV-1a over the little-endian bytes of all masked-layer weights and
    /// biases. Used to audit that the frozen core never changes.
    pub fn masked_weight_checksum(&self) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        let mut eat = |t: &Tensor| {
            for v in t.data() {
                for b in v.to_le_bytes() {
                    hash ^= b as u64;
                    hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        };
        for l in self.masked_layers() {
            eat(self.weights[l].as_ref().expect("masked layer has weights"));
            eat(self.biases[l].as_ref().expect("masked layer has bias"));
        }
        hash
    }
}

/// Built-in model families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// 300-100 hidden dense layers; both hidden layers masked and
    /// prune-eligible.
    Mlp,
    /// Two 3x3 conv blocks (8, 16 channels) with pooling; both convs masked,
    /// only the second prune-eligible.
    SmallCnn,
    /// Conv blocks 32-64-128-128-256-256 with batchnorm; all convs masked,
    /// the last four prune-eligible.
    Vgg9,
}

/// Layer chain for a model family on the given input geometry.
pub fn model_spec(kind: ModelKind, input: Dims, classes: usize) -> Result<Vec<LayerSpec>> {
    use LayerKind::*;
    let specs = match kind {
        ModelKind::Mlp => {
            let d = match input {
                Dims::Flat(d) => d,
                other => {
                    return Err(Error::Config(format!("mlp expects flat input, got {other:?}")))
                }
            };
            vec![
                LayerSpec::masked(Dense { in_features: d, out_features: 300 }, true),
                LayerSpec::plain(Relu),
                LayerSpec::masked(Dense { in_features: 300, out_features: 100 }, true),
                LayerSpec::plain(Relu),
                LayerSpec::plain(Dense { in_features: 100, out_features: classes }),
            ]
        }
        ModelKind::SmallCnn => {
            let c = expect_28x28(kind, input)?;
            vec![
                LayerSpec::masked(Conv2d { in_channels: c, out_channels: 8 }, false),
                LayerSpec::plain(Relu),
                LayerSpec::plain(MaxPool2d),
                LayerSpec::masked(Conv2d { in_channels: 8, out_channels: 16 }, true),
                LayerSpec::plain(Relu),
                LayerSpec::plain(MaxPool2d),
                LayerSpec::plain(Flatten),
                LayerSpec::plain(Dense { in_features: 16 * 7 * 7, out_features: classes }),
            ]
        }
        ModelKind::Vgg9 => {
            let c = expect_28x28(kind, input)?;
            let mut specs = Vec::new();
            let push_block = |specs: &mut Vec<LayerSpec>, in_c: usize, out_c: usize, eligible: bool| {
                specs.push(LayerSpec::masked(
                    Conv2d { in_channels: in_c, out_channels: out_c },
                    eligible,
                ));
                specs.push(LayerSpec::plain(BatchNorm2d { channels: out_c }));
                specs.push(LayerSpec::plain(Relu));
            };
            push_block(&mut specs, c, 32, false);
            specs.push(LayerSpec::plain(MaxPool2d));
            push_block(&mut specs, 32, 64, false);
            specs.push(LayerSpec::plain(MaxPool2d));
            push_block(&mut specs, 64, 128, true);
            push_block(&mut specs, 128, 128, true);
            specs.push(LayerSpec::plain(MaxPool2d));
            push_block(&mut specs, 128, 256, true);
            push_block(&mut specs, 256, 256, true);
            specs.push(LayerSpec::plain(MaxPool2d));
            specs.push(LayerSpec::plain(Flatten));
            specs.push(LayerSpec::plain(Dense { in_features: 256, out_features: classes }));
            specs
        }
    };
    Ok(specs)
}

fn expect_28x28(kind: ModelKind, input: Dims) -> Result<usize> {
    match input {
        Dims::Chw(c, 28, 28) => Ok(c),
        other => Err(Error::Config(format!(
            "{kind:?} expects 28x28 spatial input, got {other:?}"
        ))),
    }
}
