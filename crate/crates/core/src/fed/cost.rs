//! Per-client per-round communication accounting.
//!
//! Two models are reported: the "byte" model (1 byte per binary mask
//! element, 4 bytes per float parameter — the smallest element sizes common
//! tensor runtimes move over the wire) and the exact bit-packed codec
//! lengths this simulator actually ships.

use crate::error::Result;
use crate::fed::Algorithm;
use crate::mask::MaskLayout;
use crate::nn::{Dims, LayerKind, Model};
use crate::prune::{nominal_client_kept, PruneMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostReport {
    /// Byte model: mask elements at 1 B, float params at 4 B.
    pub upload_bytes: u64,
    pub download_bytes: u64,
    /// Exact serialized payload lengths (bit-packed masks, raw f32 floats).
    pub upload_packed: u64,
    pub download_packed: u64,
}

/// Whole-model binary reference: every parameter quantized to one byte.
pub fn full_binary_reference_bytes(model: &Model) -> u64 {
    model.param_count() as u64
}

pub fn mib(bytes: u64) -> f64 {
    bytes as f64 / (1024.0 * 1024.0)
}

/// Raw little-endian f32 payload of all weights and biases, the FedAvg wire
/// format. Exactly 4 bytes per parameter.
pub fn encode_weights(model: &Model) -> Vec<u8> {
    let mut out = Vec::with_capacity(model.param_count() * 4);
    for l in model.weighted_layers() {
        for v in model.weights[l].as_ref().unwrap().data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in model.biases[l].as_ref().unwrap().data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn packed_len(per_layer_entries: &[usize]) -> u64 {
    per_layer_entries.iter().map(|&n| 4 + n.div_ceil(8) as u64).sum()
}

/// Mask entry counts per masked layer when a client prunes each eligible
/// layer to round(keep_rate * units) units. Counts walk the chain so that
/// weights reading from dropped units are excluded, matching the layout a
/// real client mask produces.
pub fn nominal_client_entries(model: &Model, keep_rate: f32) -> Vec<usize> {
    enum Alive {
        Flat(usize),
        Channels(usize),
    }
    let mut alive = match model.input {
        Dims::Flat(d) => Alive::Flat(d),
        Dims::Chw(c, _, _) => Alive::Channels(c),
    };
    let (dims, _) = crate::nn::infer_dims(&model.specs, model.input).expect("validated model");
    let mut entries = Vec::new();
    for (l, spec) in model.specs.iter().enumerate() {
        match spec.kind {
            LayerKind::Dense { out_features, .. } => {
                let kept = if spec.prune_eligible {
                    nominal_client_kept(out_features, keep_rate)
                } else {
                    out_features
                };
                if spec.masked {
                    let in_alive = match alive {
                        Alive::Flat(n) => n,
                        Alive::Channels(_) => unreachable!("dense after spatial requires flatten"),
                    };
                    entries.push(kept * in_alive);
                }
                alive = Alive::Flat(kept);
            }
            LayerKind::Conv2d { out_channels, .. } => {
                let kept = if spec.prune_eligible {
                    nominal_client_kept(out_channels, keep_rate)
                } else {
                    out_channels
                };
                if spec.masked {
                    let in_alive = match alive {
                        Alive::Channels(n) => n,
                        Alive::Flat(_) => unreachable!("conv on flat input is rejected"),
                    };
                    entries.push(kept * in_alive * 9);
                }
                alive = Alive::Channels(kept);
            }
            LayerKind::Flatten => {
                if let (Alive::Channels(n), Dims::Chw(_, h, w)) = (&alive, dims[l]) {
                    alive = Alive::Flat(n * h * w);
                }
            }
            _ => {}
        }
    }
    entries
}

/// Per-client, per-round transfer sizes for one algorithm. Classifier
/// parameters never count for mask algorithms (they stay local); FedAvg
/// moves the whole model both ways.
pub fn comm_cost(
    model: &Model,
    prune: &PruneMask,
    algorithm: Algorithm,
    keep_rate: f32,
) -> Result<CostReport> {
    match algorithm {
        Algorithm::Fedavg => {
            let bytes = model.param_count() as u64 * 4;
            Ok(CostReport {
                upload_bytes: bytes,
                download_bytes: bytes,
                upload_packed: bytes,
                download_packed: bytes,
            })
        }
        Algorithm::Hidenseek => {
            let layout = MaskLayout::from_model(model, prune)?;
            let per_layer: Vec<usize> = layout.layers.iter().map(|(_, k)| k.len()).collect();
            let elements = layout.total_entries() as u64;
            let packed = packed_len(&per_layer);
            Ok(CostReport {
                upload_bytes: elements,
                download_bytes: elements,
                upload_packed: packed,
                download_packed: packed,
            })
        }
        Algorithm::Fedmask | Algorithm::Signed => {
            let full = MaskLayout::from_model(model, &PruneMask::all_keep(model))?;
            let full_per_layer: Vec<usize> = full.layers.iter().map(|(_, k)| k.len()).collect();
            let up_per_layer = nominal_client_entries(model, keep_rate);
            Ok(CostReport {
                upload_bytes: up_per_layer.iter().map(|&n| n as u64).sum(),
                download_bytes: full.total_entries() as u64,
                upload_packed: packed_len(&up_per_layer),
                download_packed: packed_len(&full_per_layer),
            })
        }
    }
}
