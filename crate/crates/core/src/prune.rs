//! Server-side one-shot data-agnostic structured pruning by sign synaptic
//! saliency, plus the client-side one-shot pruning used by the baselines.

use crate::error::{Error, Result};
use crate::mask::{MaskKind, MaskView, PsiKind};
use crate::nn::{self, kernels, Dims, LayerKind, Model, Phase, TrainScope};
use crate::rng::{self, PURPOSE_CLIENT_PRUNE};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;

/// Keep/drop flags per unit (conv channel or dense node), one entry per
/// weighted layer. Non-eligible layers are all-keep.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    /// Aligned with model layers; `Some` for weighted layers.
    pub keep: Vec<Option<Vec<bool>>>,
}

impl PruneMask {
    pub fn all_keep(model: &Model) -> Self {
        let keep = model
            .specs
            .iter()
            .map(|s| {
                if s.kind.has_weights() {
                    Some(vec![true; s.kind.unit_count()])
                } else {
                    None
                }
            })
            .collect();
        PruneMask { keep }
    }

    pub fn kept_units(&self, layer: usize) -> usize {
        self.keep[layer]
            .as_ref()
            .map_or(0, |k| k.iter().filter(|&&b| b).count())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Jump straight to the target keep rate and iterate to a fixed point.
    Fixed,
    /// Approach the target geometrically: keep rate p_r^(i/iterations) at
    /// iteration i. Spreads the cut over many small steps, which protects
    /// narrow layers from collapsing under a global threshold.
    Exponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantilePopulation {
    /// Threshold quantile over units still alive (default).
    Surviving,
    /// Threshold quantile over all eligible units, counting zero-scored
    /// dropped ones.
    All,
}

#[derive(Debug, Clone, Copy)]
pub struct PruneConfig {
    /// Fraction of eligible units kept, in (0, 1].
    pub keep_rate: f32,
    pub iterations: usize,
    pub schedule: Schedule,
    pub population: QuantilePopulation,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            keep_rate: 0.8,
            iterations: 100,
            schedule: Schedule::Fixed,
            population: QuantilePopulation::Surviving,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.keep_rate > 0.0 && self.keep_rate <= 1.0) {
            return Err(Error::Config(format!(
                "keep rate must be in (0, 1], got {}",
                self.keep_rate
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Config("prune iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-layer "alive" flags for the input coordinates of every layer, given
/// per-unit keep flags. Raw network inputs are always alive; a flattened
/// conv channel spreads its flag over its spatial block.
pub(crate) fn structural_alive(model: &Model, keep: &[Option<Vec<bool>>]) -> Result<Vec<Vec<bool>>> {
    let (per_layer_dims, _) = nn::infer_dims(&model.specs, model.input)?;
    let mut alive: Vec<bool> = match model.input {
        Dims::Flat(d) => vec![true; d],
        Dims::Chw(c, _, _) => vec![true; c],
    };
    let mut out = Vec::with_capacity(model.specs.len());
    for (l, spec) in model.specs.iter().enumerate() {
        match spec.kind {
            LayerKind::Dense { .. } | LayerKind::Conv2d { .. } => {
                out.push(alive.clone());
                alive = keep[l]
                    .as_ref()
                    .ok_or_else(|| Error::State(format!("missing keep flags for layer {l}")))?
                    .clone();
            }
            LayerKind::Flatten => {
                let (h, w) = match per_layer_dims[l] {
                    Dims::Chw(_, h, w) => (h, w),
                    _ => unreachable!("flatten input is spatial"),
                };
                let mut flat = Vec::with_capacity(alive.len() * h * w);
                for &a in &alive {
                    flat.extend(std::iter::repeat_n(a, h * w));
                }
                out.push(alive.clone());
                alive = flat;
            }
            _ => out.push(alive.clone()),
        }
    }
    Ok(out)
}

/// Zeroes the weights of dropped units and every downstream weight that
/// reads from a dropped unit.
pub fn apply_prune_mask(model: &mut Model, mask: &PruneMask) -> Result<()> {
    let alive = structural_alive(model, &mask.keep)?;
    for l in model.weighted_layers() {
        let keep = mask.keep[l].as_ref().expect("weighted layer has keep flags");
        let in_alive = &alive[l];
        let w = model.weights[l].as_mut().expect("weighted layer");
        let b = model.biases[l].as_mut().expect("weighted layer");
        match model.specs[l].kind {
            LayerKind::Dense { in_features, out_features } => {
                let data = w.data_mut();
                for o in 0..out_features {
                    for i in 0..in_features {
                        if !keep[o] || !in_alive[i] {
                            data[o * in_features + i] = 0.0;
                        }
                    }
                    if !keep[o] {
                        b.data_mut()[o] = 0.0;
                    }
                }
            }
            LayerKind::Conv2d { in_channels, out_channels } => {
                let k2 = kernels::CONV_KERNEL * kernels::CONV_KERNEL;
                let data = w.data_mut();
                for oc in 0..out_channels {
                    for ic in 0..in_channels {
                        if !keep[oc] || !in_alive[ic] {
                            let base = (oc * in_channels + ic) * k2;
                            data[base..base + k2].fill(0.0);
                        }
                    }
                    if !keep[oc] {
                        b.data_mut()[oc] = 0.0;
                    }
                }
            }
            _ => unreachable!(),
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Saliency of weight signs
// ---------------------------------------------------------------------------

/// Sign synaptic saliency for every weight: the back-propagated sensitivity
/// of the all-ones linearized absolute network, times the weight magnitude.
/// On a purely linear chain this equals the sum over input-output paths
/// through the weight of the product of absolute weights along the path.
///
/// Runs in f64 on per-layer max-abs-normalized weights (a uniform global
/// rescaling of every path product, so rankings are unaffected) to avoid
/// overflow on deep products. Pooling is replaced by summation and
/// activations/batchnorm by identity for this pass.
pub fn sign_saliency(model: &Model) -> Result<Vec<Option<Vec<f64>>>> {
    for l in model.weighted_layers() {
        model.weights[l]
            .as_ref()
            .expect("weighted layer")
            .ensure_finite(&format!("weights of layer {l}"))?;
    }
    let (per_layer_dims, _) = nn::infer_dims(&model.specs, model.input)?;

    // Normalized absolute weights in f64.
    let mut abs_w: Vec<Option<Vec<f64>>> = vec![None; model.specs.len()];
    for l in model.weighted_layers() {
        let data = model.weights[l].as_ref().expect("weighted layer").data();
        let max = data.iter().fold(0.0f64, |m, &v| m.max(v.abs() as f64));
        let scale = if max > 0.0 { 1.0 / max } else { 1.0 };
        abs_w[l] = Some(data.iter().map(|&v| (v.abs() as f64) * scale).collect());
    }

    // Forward pass, all-ones input, caching each layer's input activations.
    let mut act: Vec<f64> = vec![1.0; model.input.volume()];
    let mut cached_inputs: Vec<Vec<f64>> = Vec::with_capacity(model.specs.len());
    for (l, spec) in model.specs.iter().enumerate() {
        cached_inputs.push(act.clone());
        act = match spec.kind {
            LayerKind::Dense { in_features, out_features } => {
                let w = abs_w[l].as_ref().unwrap();
                let mut y = vec![0.0f64; out_features];
                for (o, yo) in y.iter_mut().enumerate() {
                    let row = &w[o * in_features..(o + 1) * in_features];
                    *yo = row.iter().zip(&act).map(|(a, b)| a * b).sum();
                }
                y
            }
            LayerKind::Conv2d { in_channels, out_channels } => {
                let (h, wd) = spatial(per_layer_dims[l]);
                let w = abs_w[l].as_ref().unwrap();
                conv_f64_forward(&act, in_channels, h, wd, w, out_channels)
            }
            LayerKind::MaxPool2d => {
                let (h, wd) = spatial(per_layer_dims[l]);
                let c = channels(per_layer_dims[l]);
                sum_pool_forward(&act, c, h, wd)
            }
            LayerKind::Relu | LayerKind::BatchNorm2d { .. } => act,
            LayerKind::Flatten => act,
        };
    }

    // Backward pass with all-ones output sensitivity.
    let mut grad: Vec<f64> = vec![1.0; act.len()];
    let mut saliency: Vec<Option<Vec<f64>>> = vec![None; model.specs.len()];
    for (l, spec) in model.specs.iter().enumerate().rev() {
        match spec.kind {
            LayerKind::Dense { in_features, out_features } => {
                let w = abs_w[l].as_ref().unwrap();
                let x = &cached_inputs[l];
                let mut sal = vec![0.0f64; w.len()];
                let mut gx = vec![0.0f64; in_features];
                for o in 0..out_features {
                    let go = grad[o];
                    let row = &w[o * in_features..(o + 1) * in_features];
                    for i in 0..in_features {
                        // d(R)/d|w_oi| = g_o * x_i; saliency multiplies |w| back in
                        sal[o * in_features + i] = go * x[i] * row[i];
                        gx[i] += go * row[i];
                    }
                }
                saliency[l] = Some(sal);
                grad = gx;
            }
            LayerKind::Conv2d { in_channels, out_channels } => {
                let (h, wd) = spatial(per_layer_dims[l]);
                let w = abs_w[l].as_ref().unwrap();
                let x = &cached_inputs[l];
                let (sal, gx) =
                    conv_f64_backward(x, in_channels, h, wd, w, out_channels, &grad);
                saliency[l] = Some(sal);
                grad = gx;
            }
            LayerKind::MaxPool2d => {
                let (h, wd) = spatial(per_layer_dims[l]);
                let c = channels(per_layer_dims[l]);
                grad = sum_pool_backward(&grad, c, h, wd);
            }
            LayerKind::Relu | LayerKind::BatchNorm2d { .. } | LayerKind::Flatten => {}
        }
    }

    for sal in saliency.iter().flatten() {
        if sal.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(
                "saliency overflow despite per-layer normalization".into(),
            ));
        }
    }
    Ok(saliency)
}

fn spatial(d: Dims) -> (usize, usize) {
    match d {
        Dims::Chw(_, h, w) => (h, w),
        _ => unreachable!("spatial layer on flat input is rejected at build"),
    }
}

fn channels(d: Dims) -> usize {
    match d {
        Dims::Chw(c, _, _) => c,
        _ => unreachable!(),
    }
}

fn conv_f64_forward(
    x: &[f64],
    in_c: usize,
    h: usize,
    wd: usize,
    w: &[f64],
    out_c: usize,
) -> Vec<f64> {
    let k = kernels::CONV_KERNEL;
    let pad = kernels::CONV_PAD as isize;
    let plane = h * wd;
    let mut y = vec![0.0f64; out_c * plane];
    for oc in 0..out_c {
        for ic in 0..in_c {
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[((oc * in_c + ic) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..h {
                        let iy = oy as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wd {
                            let ix = ox as isize + kx as isize - pad;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            y[oc * plane + oy * wd + ox] +=
                                wv * x[ic * plane + iy as usize * wd + ix as usize];
                        }
                    }
                }
            }
        }
    }
    y
}

fn conv_f64_backward(
    x: &[f64],
    in_c: usize,
    h: usize,
    wd: usize,
    w: &[f64],
    out_c: usize,
    g: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let k = kernels::CONV_KERNEL;
    let pad = kernels::CONV_PAD as isize;
    let plane = h * wd;
    let mut sal = vec![0.0f64; w.len()];
    let mut gx = vec![0.0f64; in_c * plane];
    for oc in 0..out_c {
        for ic in 0..in_c {
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((oc * in_c + ic) * k + ky) * k + kx;
                    let wv = w[widx];
                    let mut acc = 0.0f64;
                    for oy in 0..h {
                        let iy = oy as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wd {
                            let ix = ox as isize + kx as isize - pad;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let gv = g[oc * plane + oy * wd + ox];
                            acc += gv * x[ic * plane + iy as usize * wd + ix as usize];
                            gx[ic * plane + iy as usize * wd + ix as usize] += gv * wv;
                        }
                    }
                    sal[widx] = acc * wv;
                }
            }
        }
    }
    (sal, gx)
}

fn sum_pool_forward(x: &[f64], c: usize, h: usize, wd: usize) -> Vec<f64> {
    let oh = h / 2;
    let ow = wd / 2;
    let mut y = vec![0.0f64; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        acc += x[ch * h * wd + (oy * 2 + dy) * wd + ox * 2 + dx];
                    }
                }
                y[ch * oh * ow + oy * ow + ox] = acc;
            }
        }
    }
    y
}

fn sum_pool_backward(g: &[f64], c: usize, h: usize, wd: usize) -> Vec<f64> {
    let oh = h / 2;
    let ow = wd / 2;
    let mut gx = vec![0.0f64; c * h * wd];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = g[ch * oh * ow + oy * ow + ox];
                for dy in 0..2 {
                    for dx in 0..2 {
                        gx[ch * h * wd + (oy * 2 + dy) * wd + ox * 2 + dx] = gv;
                    }
                }
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// Unit scores and the pruning loop
// ---------------------------------------------------------------------------

/// Per-unit prune score: L2 norm over the unit's weight slice of the
/// elementwise product weight x saliency.
pub fn unit_scores(model: &Model, saliency: &[Option<Vec<f64>>]) -> Vec<Option<Vec<f64>>> {
    let mut scores: Vec<Option<Vec<f64>>> = vec![None; model.specs.len()];
    for l in model.weighted_layers() {
        let w = model.weights[l].as_ref().expect("weighted layer").data();
        let sal = saliency[l].as_ref().expect("saliency for weighted layer");
        let units = model.specs[l].kind.unit_count();
        let per_unit = w.len() / units;
        let mut s = vec![0.0f64; units];
        for (u, su) in s.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for i in u * per_unit..(u + 1) * per_unit {
                let v = w[i] as f64 * sal[i];
                acc += v * v;
            }
            *su = acc.sqrt();
        }
        scores[l] = Some(s);
    }
    scores
}

/// One-shot data-agnostic structured pruning at initialization. Iteratively
/// re-scores surviving units, sets the global threshold from the keep-rate
/// quantile, and drops every unit scoring at or below it (ties at the
/// threshold are all dropped). Pure function of (weights, config): no data.
pub fn server_prune(model: &mut Model, cfg: &PruneConfig) -> Result<PruneMask> {
    cfg.validate()?;
    let eligible: Vec<usize> = model
        .specs
        .iter()
        .enumerate()
        .filter(|(_, s)| s.prune_eligible && s.kind.has_weights())
        .map(|(i, _)| i)
        .collect();
    let mut mask = PruneMask::all_keep(model);
    if eligible.is_empty() || cfg.keep_rate >= 1.0 {
        return Ok(mask);
    }
    let total: usize = eligible.iter().map(|&l| model.specs[l].kind.unit_count()).sum();

    for iter in 1..=cfg.iterations {
        let rate = match cfg.schedule {
            Schedule::Fixed => cfg.keep_rate as f64,
            Schedule::Exponential => {
                (cfg.keep_rate as f64).powf(iter as f64 / cfg.iterations as f64)
            }
        };
        let target = ((rate * total as f64).floor() as usize).min(total);

        let saliency = sign_saliency(model)?;
        let scores = unit_scores(model, &saliency);

        // Threshold from the pooled eligible-unit scores.
        let mut pool: Vec<f64> = Vec::new();
        for &l in &eligible {
            let keep = mask.keep[l].as_ref().unwrap();
            for (u, &s) in scores[l].as_ref().unwrap().iter().enumerate() {
                match cfg.population {
                    QuantilePopulation::Surviving => {
                        if keep[u] {
                            pool.push(s);
                        }
                    }
                    QuantilePopulation::All => pool.push(s),
                }
            }
        }
        if pool.len() <= target {
            continue; // already at or below target
        }
        let drop_count = pool.len() - target;
        pool.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
        let tau = pool[drop_count - 1];

        // Drop surviving units scoring <= tau; keep strictly greater.
        let mut changed = false;
        for &l in &eligible {
            let layer_scores = scores[l].as_ref().unwrap().clone();
            let keep = mask.keep[l].as_mut().unwrap();
            for (u, k) in keep.iter_mut().enumerate() {
                if *k && layer_scores[u] <= tau {
                    *k = false;
                    changed = true;
                }
            }
        }
        for &l in &eligible {
            if mask.kept_units(l) == 0 {
                return Err(Error::LayerCollapse {
                    layer: l,
                    units: model.specs[l].kind.unit_count(),
                    keep_rate: cfg.keep_rate,
                });
            }
        }
        if changed {
            apply_prune_mask(model, &mask)?;
        }
    }
    Ok(mask)
}

// ---------------------------------------------------------------------------
// Client-side one-shot pruning (FedMask-style and Signed baselines)
// ---------------------------------------------------------------------------

/// Trains latent masks for one epoch on the client's local data, scores
/// units by the L2 norm of their latent-mask slice, and keeps the top
/// keep-rate fraction per eligible layer (at least one unit per layer).
#[allow(clippy::too_many_arguments)]
pub fn client_oneshot_prune(
    model: &Model,
    features: &Tensor,
    labels: &[usize],
    train_indices: &[usize],
    mask_kind: MaskKind,
    lr: f32,
    batch_size: usize,
    keep_rate: f32,
    seed: u64,
    client_id: u64,
) -> Result<PruneMask> {
    if train_indices.is_empty() {
        return Err(Error::Input(format!(
            "client {client_id}: one-shot pruning needs local data"
        )));
    }

    // Latents start at +1 (every weight participating), trained one epoch.
    let mut latents: Vec<Option<Tensor>> = model
        .specs
        .iter()
        .enumerate()
        .map(|(l, s)| {
            if s.masked && s.kind.has_weights() {
                Some(model.weights[l].as_ref().unwrap().map(|_| 1.0))
            } else {
                None
            }
        })
        .collect();
    let mut velocity: Vec<Option<Tensor>> = latents
        .iter()
        .map(|t| t.as_ref().map(|t| Tensor::zeros(t.shape())))
        .collect();

    let mut order: Vec<usize> = train_indices.to_vec();
    let mut rng = rng::stream(&[seed, PURPOSE_CLIENT_PRUNE, client_id]);
    order.shuffle(&mut rng);
    let mut bn = nn::BnState::new(model);
    for chunk in order.chunks(batch_size.max(1)) {
        let (bx, by) = crate::data::gather_batch(features, labels, chunk, model.input)?;
        let view = MaskView {
            kind: mask_kind,
            relaxed: false,
            psi: PsiKind::TanhExact,
            latents: &latents,
        };
        let (logits, cache) = nn::forward(model, Some(&view), &mut bn, Phase::Train, &bx)?;
        let (_, grad_logits) = nn::cross_entropy(&logits, &by)?;
        let grads = nn::backward(model, Some(&view), &cache, &grad_logits, TrainScope::MaskAndClassifier)?;
        for l in 0..model.specs.len() {
            if let (Some(lat), Some(g)) = (latents[l].as_mut(), grads.latents[l].as_ref()) {
                let vel = velocity[l].as_mut().unwrap();
                nn::sgd_step(lat, g, vel, nn::SgdConfig { lr, momentum: 0.9 })?;
            }
        }
    }

    // Score units by the L2 norm of their latent slice; keep top fraction
    // per eligible layer.
    let mut mask = PruneMask::all_keep(model);
    for l in model.weighted_layers() {
        if !model.specs[l].prune_eligible {
            continue;
        }
        let lat = latents[l]
            .as_ref()
            .ok_or_else(|| Error::State(format!("eligible layer {l} is not masked")))?;
        let units = model.specs[l].kind.unit_count();
        let per_unit = lat.len() / units;
        let mut scored: Vec<(usize, f64)> = (0..units)
            .map(|u| {
                let slice = &lat.data()[u * per_unit..(u + 1) * per_unit];
                let norm = slice.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
                (u, norm)
            })
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .expect("finite scores")
                .then(a.0.cmp(&b.0))
        });
        let kept = nominal_client_kept(units, keep_rate);
        let keep = mask.keep[l].as_mut().unwrap();
        keep.iter_mut().for_each(|k| *k = false);
        for &(u, _) in scored.iter().take(kept) {
            keep[u] = true;
        }
    }
    Ok(mask)
}

/// Units a client keeps in an eligible layer: round(keep_rate * units),
/// floored at one.
pub fn nominal_client_kept(units: usize, keep_rate: f32) -> usize {
    (((units as f64) * keep_rate as f64).round() as usize).clamp(1, units)
}
