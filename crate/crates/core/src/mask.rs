//! Sign-supermask and binary-supermask arithmetic: quantized forward passes,
//! straight-through-estimator backward passes, and the bit-packed wire codec
//! for quantized masks.

use crate::error::{Error, Result};
use crate::nn::{kernels, Dims, LayerKind, Model};
use crate::prune::{structural_alive, PruneMask};
use crate::tensor::Tensor;

/// Backward surrogate derivative for the sign quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PsiKind {
    /// 1 - tanh(latent)^2, the exact derivative of the tanh surrogate.
    #[serde(rename = "tanh")]
    TanhExact,
    /// max(0, 1 - latent^2), a clamped parabola variant.
    #[serde(rename = "parabolic")]
    Parabolic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    /// +-1 mask multiplying frozen weights; quantizer is sign, surrogate tanh.
    Sign,
    /// {0,1} mask zeroing frozen weights; quantizer thresholds sigmoid at
    /// 0.5 (inclusive), surrogate sigmoid.
    Binary,
}

/// How masked layers see their latents during a pass.
#[derive(Clone, Copy)]
pub struct MaskView<'a> {
    pub kind: MaskKind,
    /// Quantized (training/eval) or relaxed (tanh/sigmoid) effective weights.
    /// The relaxed path exists so STE gradients can be checked against the
    /// exact gradient of the surrogate network.
    pub relaxed: bool,
    pub psi: PsiKind,
    /// Aligned with model layers; `Some` exactly for masked weighted layers.
    pub latents: &'a [Option<Tensor>],
}

#[inline]
pub(crate) fn sign_value(v: f32) -> f32 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

#[inline]
fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

/// Piecewise sign quantizer: +1 at zero and above, -1 below. Total on finite
/// inputs; never emits zero.
pub fn sign_quantize(latent: &Tensor) -> Result<Tensor> {
    latent.ensure_finite("sign_quantize input")?;
    Ok(latent.map(sign_value))
}

/// Effective weights for a masked layer under the given view.
pub fn effective_weight(w0: &Tensor, latent: &Tensor, kind: MaskKind, relaxed: bool) -> Result<Tensor> {
    w0.zip(latent, |w, l| match (kind, relaxed) {
        (MaskKind::Sign, false) => w * sign_value(l),
        (MaskKind::Sign, true) => w * l.tanh(),
        (MaskKind::Binary, false) => {
            if sigmoid(l) >= 0.5 {
                w
            } else {
                0.0
            }
        }
        (MaskKind::Binary, true) => w * sigmoid(l),
    })
}

#[inline]
fn surrogate_derivative(latent: f32, kind: MaskKind, psi: PsiKind) -> f32 {
    match kind {
        MaskKind::Sign => match psi {
            PsiKind::TanhExact => {
                let t = latent.tanh();
                1.0 - t * t
            }
            PsiKind::Parabolic => (1.0 - latent * latent).max(0.0),
        },
        MaskKind::Binary => {
            let s = sigmoid(latent);
            s * (1.0 - s)
        }
    }
}

/// grad_latent = Psi(latent) * grad_s with grad_s = grad_w_eff * w0.
pub fn latent_grad(
    grad_w_eff: &Tensor,
    w0: &Tensor,
    latent: &Tensor,
    kind: MaskKind,
    psi: PsiKind,
) -> Result<Tensor> {
    let grad_s = grad_w_eff.zip(w0, |g, w| g * w)?;
    grad_s.zip(latent, |g, l| g * surrogate_derivative(l, kind, psi))
}

// ---------------------------------------------------------------------------
// Standalone single-layer operations
// ---------------------------------------------------------------------------

/// Forward through one masked layer: the layer's ordinary forward with
/// effective weights w0 (.) quantize(latent). Dense and conv alike; pruned
/// (zeroed) weights contribute zero regardless of mask sign.
pub fn masked_forward(
    kind: &LayerKind,
    input: Dims,
    x: &Tensor,
    w0: &Tensor,
    bias: Option<&Tensor>,
    latent: &Tensor,
    mask_kind: MaskKind,
) -> Result<Tensor> {
    let w_eff = effective_weight(w0, latent, mask_kind, false)?;
    layer_forward(kind, input, x, &w_eff, bias)
}

/// STE backward through one masked layer evaluated with quantized weights:
/// grad_s = (grad_y . x^T) (.) w0 (conv analog via correlation),
/// grad_latent = Psi (.) grad_s, grad_x through the quantized weights.
#[allow(clippy::too_many_arguments)]
pub fn ste_backward(
    kind: &LayerKind,
    input: Dims,
    grad_y: &Tensor,
    x: &Tensor,
    w0: &Tensor,
    latent: &Tensor,
    mask_kind: MaskKind,
    psi: PsiKind,
) -> Result<(Tensor, Tensor)> {
    let w_eff = effective_weight(w0, latent, mask_kind, false)?;
    let (grad_w_eff, grad_x) = layer_backward(kind, input, grad_y, x, &w_eff)?;
    let grad_latent = latent_grad(&grad_w_eff, w0, latent, mask_kind, psi)?;
    Ok((grad_latent, grad_x))
}

/// Combined forward/backward for the binary-supermask layer.
#[allow(clippy::too_many_arguments)]
pub fn binary_masked_forward_backward(
    kind: &LayerKind,
    input: Dims,
    x: &Tensor,
    w0: &Tensor,
    bias: Option<&Tensor>,
    latent: &Tensor,
    grad_y: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let y = masked_forward(kind, input, x, w0, bias, latent, MaskKind::Binary)?;
    let (grad_latent, grad_x) =
        ste_backward(kind, input, grad_y, x, w0, latent, MaskKind::Binary, PsiKind::TanhExact)?;
    Ok((y, grad_latent, grad_x))
}

fn layer_forward(
    kind: &LayerKind,
    input: Dims,
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    let n = batch_of(x, input)?;
    match (*kind, input) {
        (LayerKind::Dense { in_features, out_features }, Dims::Flat(_)) => {
            let mut y = Tensor::zeros(&[n, out_features]);
            kernels::dense_forward(
                x.data(),
                n,
                in_features,
                w.data(),
                out_features,
                bias.map(Tensor::data),
                y.data_mut(),
            );
            Ok(y)
        }
        (LayerKind::Conv2d { in_channels, out_channels }, Dims::Chw(_, h, wd)) => {
            let mut y = Tensor::zeros(&[n, out_channels, h, wd]);
            kernels::conv_forward(
                x.data(),
                n,
                in_channels,
                h,
                wd,
                w.data(),
                out_channels,
                bias.map(Tensor::data),
                y.data_mut(),
            );
            Ok(y)
        }
        _ => Err(Error::Dimension(format!(
            "masked layer {kind:?} incompatible with input {input:?}"
        ))),
    }
}

fn layer_backward(
    kind: &LayerKind,
    input: Dims,
    grad_y: &Tensor,
    x: &Tensor,
    w: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let n = batch_of(x, input)?;
    match (*kind, input) {
        (LayerKind::Dense { in_features, out_features }, Dims::Flat(_)) => {
            if grad_y.shape() != [n, out_features] {
                return Err(Error::Dimension(format!(
                    "grad_y shape {:?}, expected [{n}, {out_features}]",
                    grad_y.shape()
                )));
            }
            let mut grad_w = Tensor::zeros(w.shape());
            let mut grad_x = Tensor::zeros(x.shape());
            kernels::dense_backward_weights(
                x.data(),
                n,
                in_features,
                grad_y.data(),
                out_features,
                grad_w.data_mut(),
                None,
            );
            kernels::dense_backward_input(
                w.data(),
                in_features,
                grad_y.data(),
                n,
                out_features,
                grad_x.data_mut(),
            );
            Ok((grad_w, grad_x))
        }
        (LayerKind::Conv2d { in_channels, out_channels }, Dims::Chw(_, h, wd)) => {
            if grad_y.shape() != [n, out_channels, h, wd] {
                return Err(Error::Dimension(format!(
                    "grad_y shape {:?}, expected [{n}, {out_channels}, {h}, {wd}]",
                    grad_y.shape()
                )));
            }
            let mut grad_w = Tensor::zeros(w.shape());
            let mut grad_x = Tensor::zeros(x.shape());
            kernels::conv_backward_weights(
                x.data(),
                n,
                in_channels,
                h,
                wd,
                grad_y.data(),
                out_channels,
                grad_w.data_mut(),
                None,
            );
            kernels::conv_backward_input(
                w.data(),
                in_channels,
                h,
                wd,
                grad_y.data(),
                n,
                out_channels,
                grad_x.data_mut(),
            );
            Ok((grad_w, grad_x))
        }
        _ => Err(Error::Dimension(format!(
            "masked layer {kind:?} incompatible with input {input:?}"
        ))),
    }
}

fn batch_of(x: &Tensor, input: Dims) -> Result<usize> {
    let n = *x
        .shape()
        .first()
        .ok_or_else(|| Error::Dimension("batch tensor needs a leading dim".into()))?;
    if x.shape()[1..] != input.batch_shape(n)[1..] {
        return Err(Error::Dimension(format!(
            "batch shape {:?} does not match layer input {input:?}",
            x.shape()
        )));
    }
    Ok(n)
}

// ---------------------------------------------------------------------------
// Wire codec
// ---------------------------------------------------------------------------

/// Which weight slots of which masked layers carry mask entries. Pruned
/// weights carry none: the wire representation is compacted to unpruned
/// slots, layer-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskLayout {
    /// (layer index, kept flat weight indices), in layer order.
    pub layers: Vec<(usize, Vec<u32>)>,
}

impl MaskLayout {
    /// Layout over the unpruned weights of every masked layer.
    pub fn from_model(model: &Model, prune: &PruneMask) -> Result<MaskLayout> {
        let alive = structural_alive(model, &prune.keep)?;
        let mut layers = Vec::new();
        for l in model.masked_layers() {
            let keep = prune.keep[l].as_ref().expect("weighted layer keep flags");
            let in_alive = &alive[l];
            let mut kept = Vec::new();
            match model.specs[l].kind {
                LayerKind::Dense { in_features, out_features } => {
                    for o in 0..out_features {
                        for i in 0..in_features {
                            if keep[o] && in_alive[i] {
                                kept.push((o * in_features + i) as u32);
                            }
                        }
                    }
                }
                LayerKind::Conv2d { in_channels, out_channels } => {
                    let k2 = kernels::CONV_KERNEL * kernels::CONV_KERNEL;
                    for oc in 0..out_channels {
                        for ic in 0..in_channels {
                            if keep[oc] && in_alive[ic] {
                                let base = (oc * in_channels + ic) * k2;
                                kept.extend((base..base + k2).map(|v| v as u32));
                            }
                        }
                    }
                }
                _ => unreachable!("masked layers are weighted"),
            }
            layers.push((l, kept));
        }
        Ok(MaskLayout { layers })
    }

    pub fn total_entries(&self) -> usize {
        self.layers.iter().map(|(_, k)| k.len()).sum()
    }

    /// Exact encoded size: per layer a 4-byte count plus byte-padded bits.
    pub fn encoded_len(&self) -> usize {
        self.layers.iter().map(|(_, k)| 4 + k.len().div_ceil(8)).sum()
    }

    /// Gathers the quantized view of dense latent tensors into compact bits,
    /// layer-major (true = +1 / keep, false = -1 / drop).
    pub fn gather_bits(
        &self,
        latents: &[Option<Tensor>],
        kind: MaskKind,
    ) -> Result<Vec<bool>> {
        let mut bits = Vec::with_capacity(self.total_entries());
        for (l, kept) in &self.layers {
            let lat = latents[*l]
                .as_ref()
                .ok_or_else(|| Error::Protocol(format!("no latent for masked layer {l}")))?;
            for &idx in kept {
                let v = lat.data()[idx as usize];
                if !v.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite latent in layer {l} slot {idx}"
                    )));
                }
                let bit = match kind {
                    MaskKind::Sign => v >= 0.0,
                    MaskKind::Binary => sigmoid(v) >= 0.5,
                };
                bits.push(bit);
            }
        }
        Ok(bits)
    }

    /// Expands compact values into dense per-layer latent tensors; pruned
    /// slots read zero.
    pub fn expand(&self, model: &Model, values: &[f32]) -> Result<Vec<Option<Tensor>>> {
        if values.len() != self.total_entries() {
            return Err(Error::Protocol(format!(
                "expected {} mask entries, got {}",
                self.total_entries(),
                values.len()
            )));
        }
        let mut latents: Vec<Option<Tensor>> = vec![None; model.specs.len()];
        let mut cursor = 0;
        for (l, kept) in &self.layers {
            let shape = model.weights[*l].as_ref().expect("masked layer").shape();
            let mut dense = Tensor::zeros(shape);
            for &idx in kept {
                dense.data_mut()[idx as usize] = values[cursor];
                cursor += 1;
            }
            latents[*l] = Some(dense);
        }
        Ok(latents)
    }

    /// Bit-packed wire format: per layer, a little-endian u32 element count
    /// followed by the layer's bits LSB-first, padded to a byte boundary.
    pub fn encode(&self, bits: &[bool]) -> Result<Vec<u8>> {
        if bits.len() != self.total_entries() {
            return Err(Error::Protocol(format!(
                "expected {} bits, got {}",
                self.total_entries(),
                bits.len()
            )));
        }
        let mut out = Vec::with_capacity(self.encoded_len());
        let mut cursor = 0;
        for (_, kept) in &self.layers {
            out.extend_from_slice(&(kept.len() as u32).to_le_bytes());
            let mut byte = 0u8;
            for (i, &b) in bits[cursor..cursor + kept.len()].iter().enumerate() {
                if b {
                    byte |= 1 << (i % 8);
                }
                if i % 8 == 7 {
                    out.push(byte);
                    byte = 0;
                }
            }
            if kept.len() % 8 != 0 {
                out.push(byte);
            }
            cursor += kept.len();
        }
        Ok(out)
    }

    pub fn decode(&self, payload: &[u8]) -> Result<Vec<bool>> {
        let mut bits = Vec::with_capacity(self.total_entries());
        let mut offset = 0usize;
        for (l, kept) in &self.layers {
            if payload.len() < offset + 4 {
                return Err(Error::Parse {
                    offset: offset as u64,
                    message: format!("truncated count for layer {l}"),
                });
            }
            let count =
                u32::from_le_bytes(payload[offset..offset + 4].try_into().unwrap()) as usize;
            offset += 4;
            if count != kept.len() {
                return Err(Error::Parse {
                    offset: (offset - 4) as u64,
                    message: format!(
                        "layer {l} count {count} does not match layout {}",
                        kept.len()
                    ),
                });
            }
            let nbytes = count.div_ceil(8);
            if payload.len() < offset + nbytes {
                return Err(Error::Parse {
                    offset: offset as u64,
                    message: format!("truncated bits for layer {l}"),
                });
            }
            for i in 0..count {
                let byte = payload[offset + i / 8];
                bits.push(byte & (1 << (i % 8)) != 0);
            }
            offset += nbytes;
        }
        if offset != payload.len() {
            return Err(Error::Parse {
                offset: offset as u64,
                message: "trailing bytes after mask payload".into(),
            });
        }
        Ok(bits)
    }
}

/// Compact bits as +-1 reals (+1 for true).
pub fn bits_to_signs(bits: &[bool]) -> Vec<f32> {
    bits.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect()
}
