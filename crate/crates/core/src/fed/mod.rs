//! The federated training loop: client sampling, local mask optimization
//! with a personalized classifier, quantized uploads, arctanh aggregation,
//! plus the FedAvg / binary-supermask / client-pruned-sign comparators.

pub mod aggregate;
pub mod cost;
pub mod sampling;

pub use aggregate::{aggregate_signs, clamped_atanh, clamped_logit, weighted_vote};
pub use cost::{comm_cost, CostReport};
pub use sampling::sample_clients;

use crate::data::{gather_batch, Dataset, Partition};
use crate::error::{Error, Result};
use crate::mask::{bits_to_signs, MaskKind, MaskLayout, MaskView, PsiKind};
use crate::nn::{self, BnState, Dims, LayerSpec, Model, Phase, SgdConfig, TrainScope};
use crate::prune::{apply_prune_mask, client_oneshot_prune, server_prune, PruneConfig, PruneMask};
use crate::rng::{self, PURPOSE_CLIENT, PURPOSE_SAMPLING};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rayon::prelude::*;

const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    /// Server-side pruning + federated sign supermask over frozen weights.
    Hidenseek,
    /// Full-model weight averaging.
    Fedavg,
    /// Client-side pruning + binary supermask (sigmoid surrogate).
    Fedmask,
    /// Client-side pruning + sign supermask (tanh surrogate).
    Signed,
}

impl Algorithm {
    pub fn mask_kind(&self) -> Option<MaskKind> {
        match self {
            Algorithm::Hidenseek | Algorithm::Signed => Some(MaskKind::Sign),
            Algorithm::Fedmask => Some(MaskKind::Binary),
            Algorithm::Fedavg => None,
        }
    }

    /// Empirically chosen per-algorithm learning rate: sign latents need
    /// large steps, float weights do not.
    pub fn default_lr(&self) -> f32 {
        match self {
            Algorithm::Hidenseek => 10.0,
            _ => 1e-3,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Hidenseek => "hidenseek",
            Algorithm::Fedavg => "fedavg",
            Algorithm::Fedmask => "fedmask",
            Algorithm::Signed => "signed",
        }
    }
}

#[derive(Debug, Clone)]
pub struct FedConfig {
    pub algorithm: Algorithm,
    /// K available clients.
    pub clients: usize,
    /// Participation rate rho per round.
    pub sample_rate: f64,
    /// E local epochs.
    pub local_epochs: usize,
    /// T communication rounds.
    pub rounds: usize,
    pub batch_size: usize,
    /// The algorithm's learning rate (mask latents for mask algorithms,
    /// weights for FedAvg).
    pub lr: f32,
    /// Learning rate of the personalized classifier head.
    pub classifier_lr: f32,
    pub momentum: f32,
    /// Domain guard for arctanh/logit on unanimous votes.
    pub clamp_eps: f64,
    pub seed: u64,
    pub psi: PsiKind,
    /// Broadcast s_t (.) s_t_k instead of the plain global mask (off by
    /// default: the protocol text sends the global supermask as-is).
    pub broadcast_client_product: bool,
    /// L1 coefficient on sigma(latent) for the binary-mask baseline.
    pub fedmask_l1: f32,
    /// Client-level worker threads inside a round.
    pub workers: usize,
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::Config("need at least one client".into()));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return Err(Error::Config(format!(
                "sample rate must be in (0, 1], got {}",
                self.sample_rate
            )));
        }
        if self.local_epochs == 0 {
            return Err(Error::Config("local epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 1.0) {
            return Err(Error::Config(format!(
                "clamp epsilon must be in (0, 1), got {}",
                self.clamp_eps
            )));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-client persistent state. The classifier head, its momentum buffers,
/// batchnorm statistics, the last uploaded mask, and (for the client-pruning
/// baselines) the local pruned model never leave the client.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub classifier_w: Tensor,
    pub classifier_b: Tensor,
    classifier_vw: Tensor,
    classifier_vb: Tensor,
    pub bn: BnState,
    /// Last uploaded quantized mask, over this client's upload layout.
    pub persisted_mask: Option<Vec<bool>>,
    /// Client-side one-shot prune result (fedmask/signed only).
    pub local_prune: Option<PruneMask>,
    pub local_model: Option<Model>,
}

impl ClientState {
    /// A client that has never participated: classifier copied from the
    /// model's initialization, empty optimizer and batchnorm state.
    pub fn fresh(id: usize, train: Vec<usize>, test: Vec<usize>, model: &Model) -> Self {
        let clf = model.classifier;
        let w = model.weights[clf].as_ref().expect("classifier weights").clone();
        let b = model.biases[clf].as_ref().expect("classifier bias").clone();
        ClientState {
            id,
            train,
            test,
            classifier_vw: Tensor::zeros(w.shape()),
            classifier_vb: Tensor::zeros(b.shape()),
            classifier_w: w,
            classifier_b: b,
            bn: BnState::new(model),
            persisted_mask: None,
            local_prune: None,
            local_model: None,
        }
    }

    pub fn sample_count(&self) -> u64 {
        self.train.len() as u64
    }
}

/// One client's local update for the sign-supermask protocol: initialize
/// real-valued latents from the received quantized mask, run E epochs of
/// straight-through SGD on the latents plus ordinary SGD on the private
/// classifier, and return the re-quantized mask with the mean local loss.
/// With zero epochs the returned mask equals the received one.
pub fn client_update(
    model: &Model,
    layout: &MaskLayout,
    global_bits: &[bool],
    client: &ClientState,
    dataset: &Dataset,
    cfg: &FedConfig,
    round: usize,
) -> Result<(Vec<bool>, f64)> {
    if cfg.algorithm != Algorithm::Hidenseek {
        return Err(Error::Config(
            "client_update drives the shared-layout sign protocol".into(),
        ));
    }
    let layer_offset = std::collections::HashMap::new();
    let download = layout.encode(global_bits)?.len() as u64;
    let out = mask_client_round(
        model,
        layout,
        &layer_offset,
        global_bits,
        download,
        client,
        dataset,
        cfg,
        &PruneConfig::default(),
        round,
    )?;
    Ok((out.bits.expect("mask round"), out.mean_loss))
}

#[derive(Debug, Clone)]
pub struct RoundMetrics {
    pub round: usize,
    /// Test-size-weighted mean of client accuracies, in percent.
    pub weighted_accuracy: f64,
    /// Mean training loss over the round's participating clients.
    pub mean_loss: f64,
    /// Serialized payload bytes per active client, in active-id order.
    pub upload_bytes: Vec<u64>,
    pub download_bytes: Vec<u64>,
    pub active_clients: Vec<usize>,
}

impl RoundMetrics {
    pub fn mean_upload(&self) -> f64 {
        mean_u64(&self.upload_bytes)
    }
    pub fn mean_download(&self) -> f64 {
        mean_u64(&self.download_bytes)
    }
}

fn mean_u64(v: &[u64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<u64>() as f64 / v.len() as f64
    }
}

pub struct TrainOutcome {
    pub metrics: Vec<RoundMetrics>,
    pub model: Model,
    pub prune_mask: PruneMask,
    pub clients: Vec<ClientState>,
    /// Masked-layer weight checksum right after setup (post-pruning).
    pub setup_checksum: u64,
    /// Same checksum after the final round.
    pub final_checksum: u64,
}

/// Initialization + (for hidenseek) server pruning, shared by training and
/// the prune-only/cost entry points.
pub fn setup_model(
    specs: Vec<LayerSpec>,
    input: Dims,
    cfg: &FedConfig,
    prune_cfg: &PruneConfig,
) -> Result<(Model, PruneMask)> {
    let mut model = nn::init_model(specs, input, cfg.seed)?;
    let prune_mask = if cfg.algorithm == Algorithm::Hidenseek {
        server_prune(&mut model, prune_cfg)?
    } else {
        PruneMask::all_keep(&model)
    };
    Ok((model, prune_mask))
}

/// Classifier weights, bias, and their momentum buffers.
type ClassifierDelta = (Tensor, Tensor, Tensor, Tensor);
/// Per-layer weights and biases returned by a FedAvg client.
type ParamDelta = (Vec<Option<Tensor>>, Vec<Option<Tensor>>);

struct ClientRoundOutput {
    id: usize,
    sample_count: u64,
    mean_loss: f64,
    upload_bytes: u64,
    download_bytes: u64,
    /// Quantized mask over the client's upload layout (mask algorithms).
    bits: Option<Vec<bool>>,
    /// Updated parameters (fedavg).
    params: Option<ParamDelta>,
    classifier: ClassifierDelta,
    bn: BnState,
    /// First-participation pruning artifacts (baselines).
    new_prune: Option<(PruneMask, Model, Vec<u32>)>,
}

/// Executes prune-once-then-train and returns the full metrics stream.
/// Replay-deterministic: identical config gives identical metrics, no
/// matter how many workers run the clients.
pub fn run_training(
    cfg: &FedConfig,
    prune_cfg: &PruneConfig,
    specs: Vec<LayerSpec>,
    input: Dims,
    dataset: &Dataset,
    partition: &Partition,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    prune_cfg.validate()?;
    if partition.clients() != cfg.clients {
        return Err(Error::Config(format!(
            "partition has {} clients, config wants {}",
            partition.clients(),
            cfg.clients
        )));
    }
    let empty = partition.empty_clients();
    if !empty.is_empty() {
        eprintln!(
            "warning: {} of {} clients have no training data: {:?}",
            empty.len(),
            cfg.clients,
            &empty[..empty.len().min(16)]
        );
    }

    let (mut model, prune_mask) = setup_model(specs, input, cfg, prune_cfg)?;
    let layout = MaskLayout::from_model(&model, &prune_mask)?;
    let setup_checksum = model.masked_weight_checksum();

    // Global latent mask, compacted to the layout; initialized from the
    // signs of the frozen weights.
    let mut latent: Vec<f32> = Vec::with_capacity(layout.total_entries());
    for (l, kept) in &layout.layers {
        let w = model.weights[*l].as_ref().expect("masked layer");
        for &idx in kept {
            latent.push(crate::mask::sign_value(w.data()[idx as usize]));
        }
    }

    let clf = model.classifier;
    let clf_w = model.weights[clf].as_ref().unwrap().clone();
    let clf_b = model.biases[clf].as_ref().unwrap().clone();
    let mut clients: Vec<ClientState> = (0..cfg.clients)
        .map(|id| ClientState {
            id,
            train: partition.train[id].clone(),
            test: partition.test[id].clone(),
            classifier_w: clf_w.clone(),
            classifier_b: clf_b.clone(),
            classifier_vw: Tensor::zeros(clf_w.shape()),
            classifier_vb: Tensor::zeros(clf_b.shape()),
            bn: BnState::new(&model),
            persisted_mask: None,
            local_prune: None,
            local_model: None,
        })
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;

    // Per-layer offsets of the global layout, for mapping client-layout
    // entries into global positions (baselines).
    let mut layer_offset = std::collections::HashMap::new();
    {
        let mut off = 0u32;
        for (l, kept) in &layout.layers {
            layer_offset.insert(*l, off);
            off += kept.len() as u32;
        }
    }

    let mut metrics = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let mut sampler = rng::stream(&[cfg.seed, PURPOSE_SAMPLING, round as u64]);
        let cohort: Vec<usize> = sample_clients(cfg.clients, cfg.sample_rate, &mut sampler)
            .into_iter()
            .filter(|&id| {
                let ok = !clients[id].train.is_empty();
                if !ok {
                    eprintln!("warning: round {round}: skipping client {id} with no local data");
                }
                ok
            })
            .collect();

        let mut outputs: Vec<ClientRoundOutput> = if cohort.is_empty() {
            Vec::new()
        } else {
            match cfg.algorithm {
                Algorithm::Fedavg => {
                    let model_ref = &model;
                    pool.install(|| {
                        cohort
                            .par_iter()
                            .map(|&id| {
                                fedavg_client_round(model_ref, &clients[id], dataset, cfg, round)
                            })
                            .collect::<Result<Vec<_>>>()
                    })?
                }
                _ => {
                    let global_bits: Vec<bool> = latent.iter().map(|&v| v >= 0.0).collect();
                    let download = layout.encode(&global_bits)?.len() as u64;
                    let model_ref = &model;
                    let layout_ref = &layout;
                    let bits_ref = &global_bits;
                    pool.install(|| {
                        cohort
                            .par_iter()
                            .map(|&id| {
                                mask_client_round(
                                    model_ref,
                                    layout_ref,
                                    &layer_offset,
                                    bits_ref,
                                    download,
                                    &clients[id],
                                    dataset,
                                    cfg,
                                    prune_cfg,
                                    round,
                                )
                            })
                            .collect::<Result<Vec<_>>>()
                    })?
                }
            }
        };
        outputs.sort_by_key(|o| o.id);

        // Fold client deltas back into persistent state, ascending id.
        for out in &mut outputs {
            let c = &mut clients[out.id];
            let (w, b, vw, vb) = (
                out.classifier.0.clone(),
                out.classifier.1.clone(),
                out.classifier.2.clone(),
                out.classifier.3.clone(),
            );
            c.classifier_w = w;
            c.classifier_b = b;
            c.classifier_vw = vw;
            c.classifier_vb = vb;
            c.bn = out.bn.clone();
            if let Some((prune, local_model, _)) = out.new_prune.take() {
                c.local_prune = Some(prune);
                c.local_model = Some(local_model);
            }
            if let Some(bits) = &out.bits {
                c.persisted_mask = Some(bits.clone());
            }
        }

        // Aggregate.
        match cfg.algorithm {
            Algorithm::Fedavg => {
                if !outputs.is_empty() {
                    fedavg_aggregate(&mut model, &outputs)?;
                }
            }
            Algorithm::Hidenseek => {
                if !outputs.is_empty() {
                    let masks: Vec<Vec<f32>> = outputs
                        .iter()
                        .map(|o| bits_to_signs(o.bits.as_ref().expect("mask round")))
                        .collect();
                    let counts: Vec<u64> = outputs.iter().map(|o| o.sample_count).collect();
                    latent = aggregate_signs(&masks, &counts, cfg.clamp_eps)?;
                }
            }
            Algorithm::Fedmask | Algorithm::Signed => {
                if !outputs.is_empty() {
                    partial_mask_aggregate(
                        &mut latent,
                        &outputs,
                        &clients,
                        &layer_offset,
                        cfg,
                    )?;
                }
            }
        }

        let weighted_accuracy = pool.install(|| {
            evaluate_global(&model, &layout, &latent, &clients, dataset, cfg.algorithm)
        })?;
        let mean_loss = if outputs.is_empty() {
            0.0
        } else {
            outputs.iter().map(|o| o.mean_loss).sum::<f64>() / outputs.len() as f64
        };
        if !mean_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "round {round}: training loss is not finite"
            )));
        }
        metrics.push(RoundMetrics {
            round,
            weighted_accuracy,
            mean_loss,
            upload_bytes: outputs.iter().map(|o| o.upload_bytes).collect(),
            download_bytes: outputs.iter().map(|o| o.download_bytes).collect(),
            active_clients: outputs.iter().map(|o| o.id).collect(),
        });
    }

    let final_checksum = model.masked_weight_checksum();
    if cfg.algorithm != Algorithm::Fedavg && final_checksum != setup_checksum {
        return Err(Error::State(
            "frozen-core violation: masked-layer weights changed during training".into(),
        ));
    }
    Ok(TrainOutcome {
        metrics,
        model,
        prune_mask,
        clients,
        setup_checksum,
        final_checksum,
    })
}

/// One client's local pass for the mask algorithms: initialize latents from
/// the received quantized mask, run E epochs of minibatch SGD on (a) mask
/// latents via the straight-through estimator and (b) the private
/// classifier, then upload the re-quantized mask.
#[allow(clippy::too_many_arguments)]
fn mask_client_round(
    global_model: &Model,
    global_layout: &MaskLayout,
    layer_offset: &std::collections::HashMap<usize, u32>,
    global_bits: &[bool],
    download_bytes: u64,
    client: &ClientState,
    dataset: &Dataset,
    cfg: &FedConfig,
    prune_cfg: &PruneConfig,
    round: usize,
) -> Result<ClientRoundOutput> {
    let kind = cfg.algorithm.mask_kind().expect("mask algorithm");
    let client_prunes = matches!(cfg.algorithm, Algorithm::Fedmask | Algorithm::Signed);

    // First participation for the client-pruning baselines: one-shot prune
    // on local data, then keep a zeroed-weights copy of the model.
    let mut new_prune = None;
    let (local_prune, local_model): (Option<&PruneMask>, &Model);
    let storage;
    if client_prunes {
        if let Some(existing) = client.local_model.as_ref() {
            local_prune = client.local_prune.as_ref();
            local_model = existing;
        } else {
            let mask = client_oneshot_prune(
                global_model,
                &dataset.features,
                &dataset.labels,
                &client.train,
                kind,
                cfg.lr,
                cfg.batch_size,
                prune_cfg.keep_rate,
                cfg.seed,
                client.id as u64,
            )?;
            let mut pruned = global_model.clone();
            apply_prune_mask(&mut pruned, &mask)?;
            let upload_layout = MaskLayout::from_model(&pruned, &mask)?;
            let positions = global_positions(&upload_layout, layer_offset);
            storage = (mask, pruned, positions);
            new_prune = Some(storage.clone());
            local_prune = Some(&storage.0);
            local_model = &storage.1;
        }
    } else {
        local_prune = None;
        local_model = global_model;
    }

    // Received mask, optionally multiplied by the client's persisted mask.
    let mut bits = global_bits.to_vec();
    if cfg.broadcast_client_product {
        if let Some(prev) = &client.persisted_mask {
            if client_prunes {
                // previous upload covers only the client's kept slots
                let positions = match &new_prune {
                    Some((_, _, p)) => p.clone(),
                    None => client_positions(local_model, local_prune, layer_offset)?,
                };
                for (j, &pos) in positions.iter().enumerate() {
                    let b = bits[pos as usize];
                    bits[pos as usize] = b == prev[j];
                }
            } else if prev.len() == bits.len() {
                for (b, &p) in bits.iter_mut().zip(prev.iter()) {
                    *b = *b == p;
                }
            }
        }
    }

    let mut latents = global_layout.expand(global_model, &bits_to_signs(&bits))?;
    let mut latent_vel: Vec<Option<Tensor>> = latents
        .iter()
        .map(|t| t.as_ref().map(|t| Tensor::zeros(t.shape())))
        .collect();

    // Local trainable copy: frozen feature extractor from the (possibly
    // client-pruned) model, personal classifier head swapped in.
    let mut local = local_model.clone();
    let clf = local.classifier;
    local.weights[clf] = Some(client.classifier_w.clone());
    local.biases[clf] = Some(client.classifier_b.clone());
    let mut vw = client.classifier_vw.clone();
    let mut vb = client.classifier_vb.clone();
    let mut bn = client.bn.clone();

    let mask_sgd = SgdConfig { lr: cfg.lr, momentum: cfg.momentum };
    let clf_sgd = SgdConfig { lr: cfg.classifier_lr, momentum: cfg.momentum };
    let mut loss_sum = 0.0f64;
    let mut loss_batches = 0usize;
    for epoch in 0..cfg.local_epochs {
        let mut order = client.train.clone();
        let mut erng = rng::stream(&[
            cfg.seed,
            PURPOSE_CLIENT,
            round as u64,
            client.id as u64,
            epoch as u64,
        ]);
        order.shuffle(&mut erng);
        for chunk in order.chunks(cfg.batch_size) {
            let (bx, by) = gather_batch(&dataset.features, &dataset.labels, chunk, local.input)?;
            let view = MaskView {
                kind,
                relaxed: false,
                psi: cfg.psi,
                latents: &latents,
            };
            let (logits, cache) = nn::forward(&local, Some(&view), &mut bn, Phase::Train, &bx)?;
            let (loss, grad_logits) = nn::cross_entropy(&logits, &by)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "client {}: non-finite loss in round {round}",
                    client.id
                )));
            }
            loss_sum += loss;
            loss_batches += 1;
            let grads = nn::backward(
                &local,
                Some(&view),
                &cache,
                &grad_logits,
                TrainScope::MaskAndClassifier,
            )?;
            for l in 0..local.specs.len() {
                if let (Some(lat), Some(g)) = (latents[l].as_mut(), grads.latents[l].as_ref()) {
                    let vel = latent_vel[l].as_mut().unwrap();
                    if kind == MaskKind::Binary && cfg.fedmask_l1 > 0.0 {
                        let g = g.zip(lat, |gv, lv| {
                            let s = 1.0 / (1.0 + (-lv).exp());
                            gv + cfg.fedmask_l1 * s * (1.0 - s)
                        })?;
                        nn::sgd_step(lat, &g, vel, mask_sgd)?;
                    } else {
                        nn::sgd_step(lat, g, vel, mask_sgd)?;
                    }
                }
            }
            if let Some(gw) = grads.weights[clf].as_ref() {
                nn::sgd_step(local.weights[clf].as_mut().unwrap(), gw, &mut vw, clf_sgd)?;
            }
            if let Some(gb) = grads.biases[clf].as_ref() {
                nn::sgd_step(local.biases[clf].as_mut().unwrap(), gb, &mut vb, clf_sgd)?;
            }
        }
    }

    // Quantize and upload over the client's own layout.
    let (upload_bits, upload_bytes) = if client_prunes {
        let prune = match &new_prune {
            Some((p, _, _)) => p,
            None => local_prune.expect("pruned baseline client"),
        };
        let upload_layout = MaskLayout::from_model(local_model, prune)?;
        let bits = upload_layout.gather_bits(&latents, kind)?;
        let bytes = upload_layout.encode(&bits)?.len() as u64;
        (bits, bytes)
    } else {
        let bits = global_layout.gather_bits(&latents, kind)?;
        let bytes = global_layout.encode(&bits)?.len() as u64;
        (bits, bytes)
    };

    let mean_loss = if loss_batches == 0 {
        0.0
    } else {
        loss_sum / loss_batches as f64
    };
    Ok(ClientRoundOutput {
        id: client.id,
        sample_count: client.sample_count(),
        mean_loss,
        upload_bytes,
        download_bytes,
        bits: Some(upload_bits),
        params: None,
        classifier: (
            local.weights[clf].take().unwrap(),
            local.biases[clf].take().unwrap(),
            vw,
            vb,
        ),
        bn,
        new_prune,
    })
}

fn global_positions(
    upload_layout: &MaskLayout,
    layer_offset: &std::collections::HashMap<usize, u32>,
) -> Vec<u32> {
    // The global layout of the baselines is all-keep, so a weight's global
    // position is its layer offset plus its flat index.
    let mut positions = Vec::with_capacity(upload_layout.total_entries());
    for (l, kept) in &upload_layout.layers {
        let off = layer_offset[l];
        positions.extend(kept.iter().map(|&idx| off + idx));
    }
    positions
}

fn client_positions(
    local_model: &Model,
    local_prune: Option<&PruneMask>,
    layer_offset: &std::collections::HashMap<usize, u32>,
) -> Result<Vec<u32>> {
    let prune = local_prune.ok_or_else(|| Error::State("client has no prune mask".into()))?;
    let layout = MaskLayout::from_model(local_model, prune)?;
    Ok(global_positions(&layout, layer_offset))
}

/// Ordinary FedAvg local training: full-model SGD from the broadcast
/// weights, fresh momentum buffers each round.
fn fedavg_client_round(
    model: &Model,
    client: &ClientState,
    dataset: &Dataset,
    cfg: &FedConfig,
    round: usize,
) -> Result<ClientRoundOutput> {
    let mut local = model.clone();
    let mut velocities_w: Vec<Option<Tensor>> = local
        .weights
        .iter()
        .map(|t| t.as_ref().map(|t| Tensor::zeros(t.shape())))
        .collect();
    let mut velocities_b: Vec<Option<Tensor>> = local
        .biases
        .iter()
        .map(|t| t.as_ref().map(|t| Tensor::zeros(t.shape())))
        .collect();
    let mut bn = client.bn.clone();
    let sgd = SgdConfig { lr: cfg.lr, momentum: cfg.momentum };
    let mut loss_sum = 0.0f64;
    let mut loss_batches = 0usize;
    for epoch in 0..cfg.local_epochs {
        let mut order = client.train.clone();
        let mut erng = rng::stream(&[
            cfg.seed,
            PURPOSE_CLIENT,
            round as u64,
            client.id as u64,
            epoch as u64,
        ]);
        order.shuffle(&mut erng);
        for chunk in order.chunks(cfg.batch_size) {
            let (bx, by) = gather_batch(&dataset.features, &dataset.labels, chunk, local.input)?;
            let (logits, cache) = nn::forward(&local, None, &mut bn, Phase::Train, &bx)?;
            let (loss, grad_logits) = nn::cross_entropy(&logits, &by)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "client {}: non-finite loss in round {round}",
                    client.id
                )));
            }
            loss_sum += loss;
            loss_batches += 1;
            let grads = nn::backward(&local, None, &cache, &grad_logits, TrainScope::AllWeights)?;
            for l in 0..local.specs.len() {
                if let (Some(w), Some(g)) = (local.weights[l].as_mut(), grads.weights[l].as_ref()) {
                    nn::sgd_step(w, g, velocities_w[l].as_mut().unwrap(), sgd)?;
                }
                if let (Some(b), Some(g)) = (local.biases[l].as_mut(), grads.biases[l].as_ref()) {
                    nn::sgd_step(b, g, velocities_b[l].as_mut().unwrap(), sgd)?;
                }
            }
        }
    }
    let bytes = local.param_count() as u64 * 4;
    let clf = local.classifier;
    let mean_loss = if loss_batches == 0 { 0.0 } else { loss_sum / loss_batches as f64 };
    Ok(ClientRoundOutput {
        id: client.id,
        sample_count: client.sample_count(),
        mean_loss,
        upload_bytes: bytes,
        download_bytes: bytes,
        bits: None,
        classifier: (
            local.weights[clf].as_ref().unwrap().clone(),
            local.biases[clf].as_ref().unwrap().clone(),
            client.classifier_vw.clone(),
            client.classifier_vb.clone(),
        ),
        params: Some((local.weights, local.biases)),
        bn,
        new_prune: None,
    })
}

/// Plain cohort average of returned parameters.
fn fedavg_aggregate(model: &mut Model, outputs: &[ClientRoundOutput]) -> Result<()> {
    let c = outputs.len() as f64;
    for l in 0..model.specs.len() {
        if model.weights[l].is_none() {
            continue;
        }
        let mut acc_w = vec![0.0f64; model.weights[l].as_ref().unwrap().len()];
        let mut acc_b = vec![0.0f64; model.biases[l].as_ref().unwrap().len()];
        for out in outputs {
            let (w, b) = out.params.as_ref().expect("fedavg round");
            for (a, &v) in acc_w.iter_mut().zip(w[l].as_ref().unwrap().data()) {
                *a += v as f64;
            }
            for (a, &v) in acc_b.iter_mut().zip(b[l].as_ref().unwrap().data()) {
                *a += v as f64;
            }
        }
        let w = model.weights[l].as_mut().unwrap().data_mut();
        for (wv, a) in w.iter_mut().zip(acc_w) {
            *wv = (a / c) as f32;
        }
        let b = model.biases[l].as_mut().unwrap().data_mut();
        for (bv, a) in b.iter_mut().zip(acc_b) {
            *bv = (a / c) as f32;
        }
    }
    Ok(())
}

/// Aggregation for the client-pruning baselines: a weighted vote per global
/// slot over the clients that kept that slot; slots nobody kept retain the
/// previous latent.
fn partial_mask_aggregate(
    latent: &mut [f32],
    outputs: &[ClientRoundOutput],
    clients: &[ClientState],
    layer_offset: &std::collections::HashMap<usize, u32>,
    cfg: &FedConfig,
) -> Result<()> {
    let binary = cfg.algorithm == Algorithm::Fedmask;
    let mut vote = vec![0.0f64; latent.len()];
    let mut weight = vec![0.0f64; latent.len()];
    for out in outputs {
        let c = &clients[out.id];
        let positions = client_positions(
            c.local_model
                .as_ref()
                .ok_or_else(|| Error::State(format!("client {} missing local model", out.id)))?,
            c.local_prune.as_ref(),
            layer_offset,
        )?;
        let bits = out.bits.as_ref().expect("mask round");
        if bits.len() != positions.len() {
            return Err(Error::Protocol(format!(
                "client {} uploaded {} bits for {} kept slots",
                out.id,
                bits.len(),
                positions.len()
            )));
        }
        let w = out.sample_count as f64;
        for (&pos, &bit) in positions.iter().zip(bits.iter()) {
            let v = if binary {
                if bit { 1.0 } else { 0.0 }
            } else if bit {
                1.0
            } else {
                -1.0
            };
            vote[pos as usize] += w * v;
            weight[pos as usize] += w;
        }
    }
    for i in 0..latent.len() {
        if weight[i] > 0.0 {
            let mean = vote[i] / weight[i];
            latent[i] = if binary {
                clamped_logit(mean, cfg.clamp_eps)
            } else {
                clamped_atanh(mean, cfg.clamp_eps)
            };
        }
    }
    Ok(())
}

/// Test-size-weighted mean of per-client accuracies. Mask algorithms
/// evaluate each client with the global feature-extractor mask and the
/// client's own classifier (and, for the client-pruning baselines, its own
/// pruned structure); FedAvg evaluates the global model as-is.
pub fn evaluate_global(
    model: &Model,
    layout: &MaskLayout,
    latent: &[f32],
    clients: &[ClientState],
    dataset: &Dataset,
    algorithm: Algorithm,
) -> Result<f64> {
    let eval_latents = match algorithm.mask_kind() {
        // quantize once: sign(v) for +-1 masks, sigmoid(v) >= 0.5 <=> v >= 0
        Some(_) => {
            let bits: Vec<bool> = latent.iter().map(|&v| v >= 0.0).collect();
            Some(layout.expand(model, &bits_to_signs(&bits))?)
        }
        None => None,
    };

    let per_client: Vec<(u64, u64)> = clients
        .par_iter()
        .map(|client| evaluate_client(model, &eval_latents, client, dataset, algorithm))
        .collect::<Result<Vec<_>>>()?;

    let mut weighted = 0.0f64;
    let mut total = 0u64;
    for (correct, tested) in per_client {
        if tested == 0 {
            continue; // empty test split contributes weight 0
        }
        weighted += correct as f64 / tested as f64 * 100.0 * tested as f64;
        total += tested;
    }
    Ok(if total == 0 { 0.0 } else { weighted / total as f64 })
}

fn evaluate_client(
    model: &Model,
    eval_latents: &Option<Vec<Option<Tensor>>>,
    client: &ClientState,
    dataset: &Dataset,
    algorithm: Algorithm,
) -> Result<(u64, u64)> {
    if client.test.is_empty() {
        return Ok((0, 0));
    }
    let base = match algorithm {
        Algorithm::Fedmask | Algorithm::Signed => client.local_model.as_ref().unwrap_or(model),
        _ => model,
    };
    let personal;
    let eval_model = if algorithm == Algorithm::Fedavg {
        base
    } else {
        let mut local = base.clone();
        let clf = local.classifier;
        local.weights[clf] = Some(client.classifier_w.clone());
        local.biases[clf] = Some(client.classifier_b.clone());
        personal = local;
        &personal
    };
    let view = eval_latents.as_ref().map(|latents| MaskView {
        kind: algorithm.mask_kind().expect("latents only for mask algorithms"),
        relaxed: false,
        psi: PsiKind::TanhExact,
        latents,
    });
    let mut bn = client.bn.clone();
    let mut correct = 0u64;
    for chunk in client.test.chunks(EVAL_CHUNK) {
        let (bx, by) = gather_batch(&dataset.features, &dataset.labels, chunk, eval_model.input)?;
        let logits = nn::infer(eval_model, view.as_ref(), &mut bn, Phase::Eval, &bx)?;
        correct += nn::loss::correct_count(&logits, &by) as u64;
    }
    Ok((correct, client.test.len() as u64))
}
