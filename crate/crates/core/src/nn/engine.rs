//! Layer-chain forward and backward passes with exact analytic gradients.
//! Masked layers route their weight gradients through the straight-through
//! estimator from the mask module.

use crate::error::{Error, Result};
use crate::mask::{effective_weight, latent_grad, MaskView};
use crate::nn::{infer_dims, kernels, Dims, LayerKind, Model};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Batchnorm uses batch statistics and updates running statistics.
    Train,
    /// Batchnorm uses running statistics; nothing is mutated.
    Eval,
}

/// Which parameters receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    /// Ordinary training: every weight and bias (FedAvg).
    AllWeights,
    /// Masking is training: latents on masked layers, weights and bias on
    /// the classifier only.
    MaskAndClassifier,
}

/// Per-client batchnorm running statistics, aligned with model layers.
/// Never aggregated across clients.
#[derive(Debug, Clone)]
pub struct BnState {
    pub mean: Vec<Option<Vec<f32>>>,
    pub var: Vec<Option<Vec<f32>>>,
}

impl BnState {
    pub fn new(model: &Model) -> Self {
        let mut mean = Vec::with_capacity(model.specs.len());
        let mut var = Vec::with_capacity(model.specs.len());
        for spec in &model.specs {
            match spec.kind {
                LayerKind::BatchNorm2d { channels } => {
                    mean.push(Some(vec![0.0; channels]));
                    var.push(Some(vec![1.0; channels]));
                }
                _ => {
                    mean.push(None);
                    var.push(None);
                }
            }
        }
        BnState { mean, var }
    }
}

/// Activations and auxiliary values captured by a forward pass, consumed by
/// backward.
pub struct ForwardCache {
    inputs: Vec<Tensor>,
    /// Materialized effective weights for masked layers; None means the
    /// model's own weights were used.
    effective: Vec<Option<Tensor>>,
    argmax: Vec<Option<Vec<u32>>>,
    bn_xhat: Vec<Option<Tensor>>,
    bn_var: Vec<Option<Vec<f32>>>,
    out_shape: Vec<usize>,
}

/// Per-layer parameter gradients; entries are None where nothing is trained.
pub struct Gradients {
    pub weights: Vec<Option<Tensor>>,
    pub biases: Vec<Option<Tensor>>,
    pub latents: Vec<Option<Tensor>>,
}

fn check_batch(model: &Model, x: &Tensor) -> Result<usize> {
    let shape = x.shape();
    if shape.is_empty() {
        return Err(Error::Dimension("batch tensor needs a leading dim".into()));
    }
    let n = shape[0];
    let expected = model.input.batch_shape(n);
    if shape != expected.as_slice() {
        return Err(Error::Dimension(format!(
            "batch shape {:?} does not match model input {:?}",
            shape, expected
        )));
    }
    Ok(n)
}

fn resolve_weight<'m>(
    model: &'m Model,
    mask: Option<&MaskView>,
    layer: usize,
) -> Result<(Option<Tensor>, &'m Tensor)> {
    let w0 = model.weights[layer].as_ref().expect("weighted layer");
    if model.specs[layer].masked {
        if let Some(view) = mask {
            let latent = view.latents[layer].as_ref().ok_or_else(|| {
                Error::State(format!("masked layer {layer} has no latent in the view"))
            })?;
            let eff = effective_weight(w0, latent, view.kind, view.relaxed)?;
            return Ok((Some(eff), w0));
        }
    }
    Ok((None, w0))
}

/// Forward pass. Returns logits and the cache needed for backward.
pub fn forward(
    model: &Model,
    mask: Option<&MaskView>,
    bn: &mut BnState,
    phase: Phase,
    x: &Tensor,
) -> Result<(Tensor, ForwardCache)> {
    run_forward(model, mask, bn, phase, x, true)
}

/// Forward pass without gradient bookkeeping.
pub fn infer(
    model: &Model,
    mask: Option<&MaskView>,
    bn: &mut BnState,
    phase: Phase,
    x: &Tensor,
) -> Result<Tensor> {
    let (logits, _) = run_forward(model, mask, bn, phase, x, false)?;
    Ok(logits)
}

fn run_forward(
    model: &Model,
    mask: Option<&MaskView>,
    bn: &mut BnState,
    phase: Phase,
    x: &Tensor,
    keep_cache: bool,
) -> Result<(Tensor, ForwardCache)> {
    let n = check_batch(model, x)?;
    let (dims, _) = infer_dims(&model.specs, model.input)?;
    let layers = model.specs.len();
    let mut cache = ForwardCache {
        inputs: Vec::with_capacity(if keep_cache { layers } else { 0 }),
        effective: vec![None; layers],
        argmax: vec![None; layers],
        bn_xhat: vec![None; layers],
        bn_var: vec![None; layers],
        out_shape: Vec::new(),
    };
    let mut act = x.clone();
    for (l, spec) in model.specs.iter().enumerate() {
        let next = match spec.kind {
            LayerKind::Dense { in_features, out_features } => {
                let (eff, _) = resolve_weight(model, mask, l)?;
                let bias = model.biases[l].as_ref().expect("weighted layer");
                let mut y = Tensor::zeros(&[n, out_features]);
                {
                    let w = eff.as_ref().unwrap_or_else(|| model.weights[l].as_ref().unwrap());
                    kernels::dense_forward(
                        act.data(),
                        n,
                        in_features,
                        w.data(),
                        out_features,
                        Some(bias.data()),
                        y.data_mut(),
                    );
                }
                if keep_cache {
                    cache.effective[l] = eff;
                }
                y
            }
            LayerKind::Conv2d { in_channels, out_channels } => {
                let (h, wd) = match dims[l] {
                    Dims::Chw(_, h, w) => (h, w),
                    _ => unreachable!(),
                };
                let (eff, _) = resolve_weight(model, mask, l)?;
                let bias = model.biases[l].as_ref().expect("weighted layer");
                let mut y = Tensor::zeros(&[n, out_channels, h, wd]);
                {
                    let w = eff.as_ref().unwrap_or_else(|| model.weights[l].as_ref().unwrap());
                    kernels::conv_forward(
                        act.data(),
                        n,
                        in_channels,
                        h,
                        wd,
                        w.data(),
                        out_channels,
                        Some(bias.data()),
                        y.data_mut(),
                    );
                }
                if keep_cache {
                    cache.effective[l] = eff;
                }
                y
            }
            LayerKind::MaxPool2d => {
                let (c, h, wd) = match dims[l] {
                    Dims::Chw(c, h, w) => (c, h, w),
                    _ => unreachable!(),
                };
                let mut y = Tensor::zeros(&[n, c, h / 2, wd / 2]);
                let mut argmax = vec![0u32; y.len()];
                kernels::maxpool_forward(act.data(), n, c, h, wd, y.data_mut(), &mut argmax);
                if keep_cache {
                    cache.argmax[l] = Some(argmax);
                }
                y
            }
            LayerKind::Relu => {
                let mut y = Tensor::zeros(act.shape());
                kernels::relu_forward(act.data(), y.data_mut());
                y
            }
            LayerKind::Flatten => {
                let flat: usize = act.shape()[1..].iter().product();
                act.reshaped(&[n, flat])?
            }
            LayerKind::BatchNorm2d { channels } => {
                let (h, wd) = match dims[l] {
                    Dims::Chw(_, h, w) => (h, w),
                    _ => unreachable!(),
                };
                let plane = h * wd;
                let mut y = Tensor::zeros(act.shape());
                match phase {
                    Phase::Train => {
                        let (mean, var) = kernels::bn_batch_stats(act.data(), n, channels, plane);
                        kernels::bn_forward(act.data(), n, channels, plane, &mean, &var, y.data_mut());
                        let rm = bn.mean[l].as_mut().expect("bn state for bn layer");
                        let rv = bn.var[l].as_mut().expect("bn state for bn layer");
                        for c in 0..channels {
                            rm[c] = (1.0 - kernels::BN_MOMENTUM) * rm[c] + kernels::BN_MOMENTUM * mean[c];
                            rv[c] = (1.0 - kernels::BN_MOMENTUM) * rv[c] + kernels::BN_MOMENTUM * var[c];
                        }
                        if keep_cache {
                            cache.bn_xhat[l] = Some(y.clone());
                            cache.bn_var[l] = Some(var);
                        }
                    }
                    Phase::Eval => {
                        let mean = bn.mean[l].as_ref().expect("bn state for bn layer");
                        let var = bn.var[l].as_ref().expect("bn state for bn layer");
                        kernels::bn_forward(act.data(), n, channels, plane, mean, var, y.data_mut());
                    }
                }
                y
            }
        };
        if keep_cache {
            cache.inputs.push(act);
        }
        act = next;
    }
    cache.out_shape = act.shape().to_vec();
    Ok((act, cache))
}

/// Backward pass from the logits gradient. The cache must come from a
/// training-phase forward with the same mask view.
pub fn backward(
    model: &Model,
    mask: Option<&MaskView>,
    cache: &ForwardCache,
    grad_logits: &Tensor,
    scope: TrainScope,
) -> Result<Gradients> {
    if cache.inputs.len() != model.specs.len() {
        return Err(Error::State(
            "backward needs the cache of a full training forward".into(),
        ));
    }
    if grad_logits.shape() != cache.out_shape.as_slice() {
        return Err(Error::Dimension(format!(
            "grad_logits shape {:?} does not match forward output {:?}",
            grad_logits.shape(),
            cache.out_shape
        )));
    }
    let layers = model.specs.len();
    let mut grads = Gradients {
        weights: (0..layers).map(|_| None).collect(),
        biases: (0..layers).map(|_| None).collect(),
        latents: (0..layers).map(|_| None).collect(),
    };
    let mut g = grad_logits.clone();
    for (l, spec) in model.specs.iter().enumerate().rev() {
        let input = &cache.inputs[l];
        let n = input.shape()[0];
        match spec.kind {
            LayerKind::Dense { in_features, out_features } => {
                let want_weights = match scope {
                    TrainScope::AllWeights => true,
                    TrainScope::MaskAndClassifier => l == model.classifier,
                };
                let is_masked_here = spec.masked && mask.is_some();
                let want_latent =
                    scope == TrainScope::MaskAndClassifier && is_masked_here && l != model.classifier;
                let w0 = model.weights[l].as_ref().unwrap();
                let w_used = cache.effective[l].as_ref().unwrap_or(w0);
                let mut grad_w = Tensor::zeros(w0.shape());
                let mut grad_b = Tensor::zeros(&[out_features]);
                if want_weights || want_latent {
                    kernels::dense_backward_weights(
                        input.data(),
                        n,
                        in_features,
                        g.data(),
                        out_features,
                        grad_w.data_mut(),
                        Some(grad_b.data_mut()),
                    );
                }
                if l > 0 {
                    let mut gx = Tensor::zeros(input.shape());
                    kernels::dense_backward_input(
                        w_used.data(),
                        in_features,
                        g.data(),
                        n,
                        out_features,
                        gx.data_mut(),
                    );
                    g = gx;
                }
                if want_latent {
                    let view = mask.expect("latent grads only with a mask view");
                    let latent = view.latents[l].as_ref().expect("resolved during forward");
                    grads.latents[l] = Some(latent_grad(&grad_w, w0, latent, view.kind, view.psi)?);
                } else if want_weights {
                    grads.weights[l] = Some(grad_w);
                    grads.biases[l] = Some(grad_b);
                }
            }
            LayerKind::Conv2d { in_channels, out_channels } => {
                let (h, wd) = match input.shape() {
                    [_, _, h, w] => (*h, *w),
                    other => {
                        return Err(Error::Dimension(format!(
                            "conv input shape {other:?}"
                        )))
                    }
                };
                let want_weights = scope == TrainScope::AllWeights;
                let is_masked_here = spec.masked && mask.is_some();
                let want_latent = scope == TrainScope::MaskAndClassifier && is_masked_here;
                let w0 = model.weights[l].as_ref().unwrap();
                let w_used = cache.effective[l].as_ref().unwrap_or(w0);
                let mut grad_w = Tensor::zeros(w0.shape());
                let mut grad_b = Tensor::zeros(&[out_channels]);
                if want_weights || want_latent {
                    kernels::conv_backward_weights(
                        input.data(),
                        n,
                        in_channels,
                        h,
                        wd,
                        g.data(),
                        out_channels,
                        grad_w.data_mut(),
                        Some(grad_b.data_mut()),
                    );
                }
                if l > 0 {
                    let mut gx = Tensor::zeros(input.shape());
                    kernels::conv_backward_input(
                        w_used.data(),
                        in_channels,
                        h,
                        wd,
                        g.data(),
                        n,
                        out_channels,
                        gx.data_mut(),
                    );
                    g = gx;
                }
                if want_latent {
                    let view = mask.expect("latent grads only with a mask view");
                    let latent = view.latents[l].as_ref().expect("resolved during forward");
                    grads.latents[l] = Some(latent_grad(&grad_w, w0, latent, view.kind, view.psi)?);
                } else if want_weights {
                    grads.weights[l] = Some(grad_w);
                    grads.biases[l] = Some(grad_b);
                }
            }
            LayerKind::MaxPool2d => {
                let argmax = cache.argmax[l]
                    .as_ref()
                    .ok_or_else(|| Error::State("pool backward without cached argmax".into()))?;
                let mut gx = Tensor::zeros(input.shape());
                kernels::maxpool_backward(g.data(), argmax, gx.data_mut());
                g = gx;
            }
            LayerKind::Relu => {
                let mut gx = Tensor::zeros(input.shape());
                kernels::relu_backward(input.data(), g.data(), gx.data_mut());
                g = gx;
            }
            LayerKind::Flatten => {
                g = g.reshaped(input.shape())?;
            }
            LayerKind::BatchNorm2d { channels } => {
                let xhat = cache.bn_xhat[l]
                    .as_ref()
                    .ok_or_else(|| Error::State("batchnorm backward without cached stats".into()))?;
                let var = cache.bn_var[l].as_ref().expect("cached with xhat");
                let plane: usize = input.shape()[2..].iter().product();
                let mut gx = Tensor::zeros(input.shape());
                kernels::bn_backward(xhat.data(), n, channels, plane, var, g.data(), gx.data_mut());
                g = gx;
            }
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_model, LayerSpec};

    fn identity_dense_model() -> Model {
        let specs = vec![LayerSpec::plain(LayerKind::Dense {
            in_features: 3,
            out_features: 3,
        })];
        let mut m = init_model(specs, Dims::Flat(3), 0).unwrap();
        let w = m.weights[0].as_mut().unwrap();
        w.data_mut().fill(0.0);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        m
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let m = identity_dense_model();
        let x = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -0.5]).unwrap();
        let mut bn = BnState::new(&m);
        let y = infer(&m, None, &mut bn, Phase::Eval, &x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn zero_weights_zero_logits() {
        let specs = vec![LayerSpec::plain(LayerKind::Dense { in_features: 4, out_features: 2 })];
        let mut m = init_model(specs, Dims::Flat(4), 1).unwrap();
        m.weights[0].as_mut().unwrap().data_mut().fill(0.0);
        let x = Tensor::from_vec(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut bn = BnState::new(&m);
        let y = infer(&m, None, &mut bn, Phase::Eval, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_shape_mismatch_rejected() {
        let m = identity_dense_model();
        let x = Tensor::from_vec(&[1, 4], vec![0.0; 4]).unwrap();
        let mut bn = BnState::new(&m);
        assert!(matches!(
            infer(&m, None, &mut bn, Phase::Eval, &x),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn zero_grad_logits_zero_gradients() {
        let specs = vec![
            LayerSpec::plain(LayerKind::Dense { in_features: 3, out_features: 4 }),
            LayerSpec::plain(LayerKind::Relu),
            LayerSpec::plain(LayerKind::Dense { in_features: 4, out_features: 2 }),
        ];
        let m = init_model(specs, Dims::Flat(3), 4).unwrap();
        let x = Tensor::from_vec(&[2, 3], vec![0.3; 6]).unwrap();
        let mut bn = BnState::new(&m);
        let (logits, cache) = forward(&m, None, &mut bn, Phase::Train, &x).unwrap();
        let zero = Tensor::zeros(logits.shape());
        let grads = backward(&m, None, &cache, &zero, TrainScope::AllWeights).unwrap();
        for gw in grads.weights.iter().flatten() {
            assert!(gw.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn relu_blocks_gradient_at_negative_preactivation() {
        // one dense unit with negative output; grad through relu must vanish
        let specs = vec![
            LayerSpec::plain(LayerKind::Dense { in_features: 1, out_features: 1 }),
            LayerSpec::plain(LayerKind::Relu),
            LayerSpec::plain(LayerKind::Dense { in_features: 1, out_features: 1 }),
        ];
        let mut m = init_model(specs, Dims::Flat(1), 0).unwrap();
        m.weights[0].as_mut().unwrap().data_mut()[0] = -1.0; // pre-activation = -x
        m.weights[2].as_mut().unwrap().data_mut()[0] = 1.0;
        let x = Tensor::from_vec(&[1, 1], vec![2.0]).unwrap();
        let mut bn = BnState::new(&m);
        let (_, cache) = forward(&m, None, &mut bn, Phase::Train, &x).unwrap();
        let g = Tensor::from_vec(&[1, 1], vec![1.0]).unwrap();
        let grads = backward(&m, None, &cache, &g, TrainScope::AllWeights).unwrap();
        assert_eq!(grads.weights[0].as_ref().unwrap().data()[0], 0.0);
        assert_eq!(grads.biases[0].as_ref().unwrap().data()[0], 0.0);
    }
}
