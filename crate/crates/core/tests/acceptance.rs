//! Acceptance gate: one test per criterion, each printing a PASS line when
//! it holds. Criteria 6-8 train on the real HAR/MNIST datasets and are
//! ignored by default; point HNS_DATA_DIR (or ./data at the workspace root)
//! at the extracted datasets and run `cargo test --test acceptance --
//! --ignored --nocapture` to include them.

mod common;

use common::*;
use hidenseek::config::parse_config;
use hidenseek::data::{dirichlet_partition, load_har, load_idx, synthetic_blobs};
use hidenseek::fed::{self, aggregate_signs, weighted_vote, Algorithm, FedConfig};
use hidenseek::mask::{MaskKind, MaskView, PsiKind};
use hidenseek::nn::{self, BnState, Dims, LayerKind, LayerSpec, ModelKind, Phase, TrainScope};
use hidenseek::prune::{server_prune, PruneConfig, PruneMask, QuantilePopulation, Schedule};
use hidenseek::runner;
use hidenseek::{rng, Error, Tensor};
use rand::Rng;
use std::path::PathBuf;
use std::time::Instant;

fn data_dir() -> PathBuf {
    match std::env::var_os("HNS_DATA_DIR") {
        Some(dir) => PathBuf::from(dir),
        None => PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"),
    }
}

fn set_layer(model: &mut nn::Model, layer: usize, w: &[f64], b: &[f64]) {
    let shape = model.weights[layer].as_ref().unwrap().shape().to_vec();
    model.weights[layer] = Some(Tensor::from_vec(&shape, to_f32(w)).unwrap());
    let bshape = model.biases[layer].as_ref().unwrap().shape().to_vec();
    model.biases[layer] = Some(Tensor::from_vec(&bshape, to_f32(b)).unwrap());
}

fn rows(flat: &[f64], cols: usize) -> Vec<Vec<f64>> {
    flat.chunks(cols).map(|c| c.to_vec()).collect()
}

#[test]
fn criterion_1_gradient_fidelity() {
    let start = Instant::now();
    let mut r = rng::stream(&[900, 1]);
    let mut worst: f64 = 0.0;
    let mut instance = 0usize;
    let mut attempts = 0usize;
    while instance < 20 {
        attempts += 1;
        assert!(attempts < 400, "could not draw 20 kink-free fixtures");
        let d0 = r.random_range(4..=8usize);
        let d1 = r.random_range(4..=7usize);
        let d2 = r.random_range(3..=6usize);
        let classes = 3usize;
        let params = d1 * d0 + d2 * d1 + classes * d2 + classes;
        assert!(params <= 200, "instance {instance} has {params} params");

        let specs = vec![
            LayerSpec::masked(LayerKind::Dense { in_features: d0, out_features: d1 }, true),
            LayerSpec::plain(LayerKind::Relu),
            LayerSpec::masked(LayerKind::Dense { in_features: d1, out_features: d2 }, true),
            LayerSpec::plain(LayerKind::Relu),
            LayerSpec::plain(LayerKind::Dense { in_features: d2, out_features: classes }),
        ];
        let mut model = nn::init_model(specs, Dims::Flat(d0), 900 + instance as u64).unwrap();
        let w0 = uniform_vec(&mut r, d1 * d0, 0.8);
        let b0 = uniform_vec(&mut r, d1, 0.3);
        let w2 = uniform_vec(&mut r, d2 * d1, 0.8);
        let b2 = uniform_vec(&mut r, d2, 0.3);
        set_layer(&mut model, 0, &w0, &b0);
        set_layer(&mut model, 2, &w2, &b2);
        let wc = to_f64(model.weights[4].as_ref().unwrap().data());
        let bc = to_f64(model.biases[4].as_ref().unwrap().data());

        let lat0 = uniform_vec(&mut r, d1 * d0, 1.5);
        let lat2 = uniform_vec(&mut r, d2 * d1, 1.5);
        let batch = 4;
        let x64 = uniform_vec(&mut r, batch * d0, 1.0);
        let labels: Vec<usize> = (0..batch).map(|_| r.random_range(0..classes)).collect();

        // relu is non-differentiable at zero; central differences are only
        // valid away from the kink, so redraw fixtures whose relaxed
        // pre-activations sit within reach of the probe step
        {
            let eff0: Vec<f64> = w0.iter().zip(&lat0).map(|(w, l)| w * l.tanh()).collect();
            let pre1 = dense(&rows(&x64, d0), &rows(&eff0, d0), &b0);
            let h1 = relu(&pre1);
            let eff2: Vec<f64> = w2.iter().zip(&lat2).map(|(w, l)| w * l.tanh()).collect();
            let pre2 = dense(&h1, &rows(&eff2, d1), &b2);
            let near_kink = pre1
                .iter()
                .chain(pre2.iter())
                .flatten()
                .any(|v| v.abs() < 2e-2);
            if near_kink {
                continue;
            }
        }
        let x = Tensor::from_vec(&[batch, d0], to_f32(&x64)).unwrap();

        let theta: Vec<f64> = [lat0.clone(), lat2.clone(), wc, bc].concat();
        let (n0, n2) = (lat0.len(), lat2.len());
        let loss = |t: &[f64]| {
            let (l0, rest) = t.split_at(n0);
            let (l2, rest) = rest.split_at(n2);
            let (wc, bc) = rest.split_at(classes * d2);
            let eff0: Vec<f64> = w0.iter().zip(l0).map(|(w, l)| w * l.tanh()).collect();
            let eff2: Vec<f64> = w2.iter().zip(l2).map(|(w, l)| w * l.tanh()).collect();
            let h1 = relu(&dense(&rows(&x64, d0), &rows(&eff0, d0), &b0));
            let h2 = relu(&dense(&h1, &rows(&eff2, d1), &b2));
            cross_entropy(&dense(&h2, &rows(wc, d2), bc), &labels)
        };
        let expected = central_diff(loss, &theta, 1e-3);

        let latents: Vec<Option<Tensor>> = vec![
            Some(Tensor::from_vec(&[d1, d0], to_f32(&lat0)).unwrap()),
            None,
            Some(Tensor::from_vec(&[d2, d1], to_f32(&lat2)).unwrap()),
            None,
            None,
        ];
        let view = MaskView {
            kind: MaskKind::Sign,
            relaxed: true,
            psi: PsiKind::TanhExact,
            latents: &latents,
        };
        let mut bn = BnState::new(&model);
        let (logits, cache) = nn::forward(&model, Some(&view), &mut bn, Phase::Train, &x).unwrap();
        let (_, grad_logits) = nn::cross_entropy(&logits, &labels).unwrap();
        let grads = nn::backward(
            &model,
            Some(&view),
            &cache,
            &grad_logits,
            TrainScope::MaskAndClassifier,
        )
        .unwrap();
        let actual: Vec<f32> = [
            grads.latents[0].as_ref().unwrap().data(),
            grads.latents[2].as_ref().unwrap().data(),
            grads.weights[4].as_ref().unwrap().data(),
            grads.biases[4].as_ref().unwrap().data(),
        ]
        .concat();
        assert_close(
            &actual,
            &expected,
            1e-4,
            1e-7,
            &format!("instance {instance} STE + classifier grads"),
        );
        worst = worst.max(max_rel_err(&actual, &expected, 1e-7));
        instance += 1;
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}");
    println!(
        "criterion 1: PASS — STE/classifier gradients within 1e-4 of the tanh-relaxed \
         finite differences on 20 masked MLPs (worst rel err {worst:.2e}, {elapsed:.2?})"
    );
}

#[test]
fn criterion_2_saliency_oracle() {
    let start = Instant::now();
    let mut r = rng::stream(&[900, 2]);
    let mut worst: f64 = 0.0;
    for net in 0..50 {
        let layers = r.random_range(2..=3usize);
        let widths: Vec<usize> = (0..=layers).map(|_| r.random_range(1..=5usize)).collect();
        let mut specs = Vec::new();
        for i in 0..layers - 1 {
            specs.push(LayerSpec::masked(
                LayerKind::Dense { in_features: widths[i], out_features: widths[i + 1] },
                true,
            ));
        }
        specs.push(LayerSpec::plain(LayerKind::Dense {
            in_features: widths[layers - 1],
            out_features: widths[layers],
        }));
        let mut model = nn::init_model(specs, Dims::Flat(widths[0]), 7000 + net).unwrap();
        let mut w64 = Vec::new();
        for l in 0..layers {
            let raw = uniform_vec(&mut r, widths[l] * widths[l + 1], 1.0);
            let shape = model.weights[l].as_ref().unwrap().shape().to_vec();
            model.weights[l] = Some(Tensor::from_vec(&shape, to_f32(&raw)).unwrap());
            w64.push(to_f64(model.weights[l].as_ref().unwrap().data()));
        }
        let computed = hidenseek::prune::sign_saliency(&model).unwrap();
        let oracle = saliency_by_path_enumeration(&w64, &widths);
        let scale: f64 = w64
            .iter()
            .map(|w| w.iter().fold(0.0f64, |m, &v| m.max(v.abs())))
            .product();
        for (l, expected) in oracle.iter().enumerate() {
            let actual = computed[l].as_ref().unwrap();
            for (j, (&a, &e)) in actual.iter().zip(expected.iter()).enumerate() {
                let rescaled = a * scale;
                let denom = rescaled.abs().max(e.abs());
                let rel = if denom == 0.0 { 0.0 } else { (rescaled - e).abs() / denom };
                assert!(
                    rel <= 1e-6,
                    "net {net} widths {widths:?} layer {l} weight {j}: {rescaled} vs {e}"
                );
                worst = worst.max(rel);
            }
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}");
    println!(
        "criterion 2: PASS — backward-pass saliency equals path-product enumeration on \
         50 random chains (worst rel err {worst:.2e}, {elapsed:.2?})"
    );
}

#[test]
fn criterion_3_prune_rate_contract() {
    let cases: [(&str, ModelKind, Dims, usize); 2] = [
        ("mlp", ModelKind::Mlp, Dims::Flat(1152), 6),
        ("smallcnn", ModelKind::SmallCnn, Dims::Chw(1, 28, 28), 10),
    ];
    for (name, kind, input, classes) in cases {
        for keep_rate in [0.2f32, 0.5, 0.8] {
            for schedule in [Schedule::Fixed, Schedule::Exponential] {
                let specs = nn::model_spec(kind, input, classes).unwrap();
                let mut model = nn::init_model(specs, input, 42).unwrap();
                let cfg = PruneConfig {
                    keep_rate,
                    iterations: 100,
                    schedule,
                    population: QuantilePopulation::Surviving,
                };
                match server_prune(&mut model, &cfg) {
                    Ok(mask) => {
                        let eligible: Vec<usize> = model
                            .specs
                            .iter()
                            .enumerate()
                            .filter(|(_, s)| s.prune_eligible)
                            .map(|(i, _)| i)
                            .collect();
                        let kept: usize = eligible.iter().map(|&l| mask.kept_units(l)).sum();
                        let total: usize = eligible
                            .iter()
                            .map(|&l| model.specs[l].kind.unit_count())
                            .sum();
                        let fraction = kept as f64 / total as f64;
                        assert!(
                            fraction <= keep_rate as f64 + 1e-12,
                            "{name} keep={keep_rate} {schedule:?}: kept fraction {fraction}"
                        );
                        // random init gives distinct scores, so the bound is
                        // tight: exactly floor(keep_rate * total) units stay
                        assert_eq!(
                            kept,
                            (keep_rate as f64 * total as f64).floor() as usize,
                            "{name} keep={keep_rate} {schedule:?}"
                        );
                        for &l in &eligible {
                            assert!(mask.kept_units(l) >= 1);
                        }
                    }
                    // a global threshold may empty a narrow layer under the
                    // one-shot fixed schedule; that aborts loudly, and the
                    // gradual schedule must then satisfy the rate
                    Err(Error::LayerCollapse { .. }) => {
                        assert_eq!(
                            (name, schedule),
                            ("mlp", Schedule::Fixed),
                            "collapse only expected for the one-shot cut on the deep MLP"
                        );
                        assert_eq!(keep_rate, 0.2);
                    }
                    Err(other) => panic!("{name} keep={keep_rate}: unexpected error {other}"),
                }
            }
        }
    }

    // tie rule: units scoring exactly at the threshold are all dropped
    let specs = vec![
        LayerSpec::masked(LayerKind::Dense { in_features: 2, out_features: 8 }, true),
        LayerSpec::plain(LayerKind::Relu),
        LayerSpec::plain(LayerKind::Dense { in_features: 8, out_features: 2 }),
    ];
    let mut model = nn::init_model(specs, Dims::Flat(2), 5).unwrap();
    {
        let w = model.weights[0].as_mut().unwrap();
        for u in 0..8 {
            let v = if u < 4 { 0.1 } else { 0.3 + u as f32 * 0.05 };
            w.data_mut()[u * 2..(u + 1) * 2].fill(v);
        }
        model.weights[2].as_mut().unwrap().data_mut().fill(0.5);
    }
    let mask = server_prune(
        &mut model,
        &PruneConfig { keep_rate: 5.0 / 8.0, ..Default::default() },
    )
    .unwrap();
    assert_eq!(
        mask.kept_units(0),
        4,
        "all four units tied at the threshold must drop together"
    );
    println!(
        "criterion 3: PASS — kept fraction <= keep rate across rates and models \
         (one-shot cut at 0.2 on the MLP aborts with the documented layer-collapse \
         error; the gradual schedule meets the rate), tie-drop rule verified"
    );
}

#[test]
fn criterion_4_aggregation_properties() {
    let start = Instant::now();
    let mut r = rng::stream(&[900, 4]);
    for cohort in 0..1000u64 {
        let entries = r.random_range(1..=32usize);
        let clients = r.random_range(1..=8usize);
        let masks: Vec<Vec<f32>> = (0..clients)
            .map(|_| {
                (0..entries)
                    .map(|_| if r.random::<bool>() { 1.0 } else { -1.0 })
                    .collect()
            })
            .collect();
        let counts: Vec<u64> = (0..clients).map(|_| r.random_range(1..=100u64)).collect();

        let latent = aggregate_signs(&masks, &counts, 1e-3).unwrap();
        let votes = weighted_vote(&masks, &counts).unwrap();
        let flipped: Vec<Vec<f32>> =
            masks.iter().map(|m| m.iter().map(|v| -v).collect()).collect();
        let latent_neg = aggregate_signs(&flipped, &counts, 1e-3).unwrap();
        let max_latent = (1.0f64 - 1e-3).atanh() as f32;
        for i in 0..entries {
            assert!(latent[i].is_finite(), "cohort {cohort}: non-finite latent");
            assert!(latent[i].abs() <= max_latent + 1e-6, "clamp bound violated");
            assert_eq!(latent[i], -latent_neg[i], "antisymmetry violated");
            if votes[i] != 0.0 {
                assert_eq!(
                    latent[i] >= 0.0,
                    votes[i] > 0.0,
                    "cohort {cohort} entry {i}: majority sign disagrees"
                );
            }
        }

        // zero-sum neutrality: equal weights, exactly opposing masks
        let opposing = vec![masks[0].clone(), masks[0].iter().map(|v| -v).collect()];
        let neutral = aggregate_signs(&opposing, &[7, 7], 1e-3).unwrap();
        assert!(neutral.iter().all(|&v| v == 0.0), "opposing masks must cancel");

        // clamp finiteness on unanimity
        let unanimous = vec![vec![1.0f32; entries]; clients];
        let clamped = aggregate_signs(&unanimous, &counts, 1e-3).unwrap();
        let expect = (1.0f64 - 1e-3).atanh();
        for &v in &clamped {
            assert!(v.is_finite());
            assert!((v as f64 - expect).abs() < 1e-6);
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 5.0, "took {elapsed:?}");
    println!(
        "criterion 4: PASS — antisymmetry, neutrality, clamp finiteness and majority \
         agreement over 1000 random cohorts ({elapsed:.2?})"
    );
}

#[test]
fn criterion_5_communication_cost_exact() {
    let specs = nn::model_spec(ModelKind::Mlp, Dims::Flat(1152), 6).unwrap();
    let model = nn::init_model(specs.clone(), Dims::Flat(1152), 3).unwrap();
    assert_eq!(model.param_count(), 376_606);

    let fedavg = fed::comm_cost(&model, &PruneMask::all_keep(&model), Algorithm::Fedavg, 0.8).unwrap();
    assert_eq!(fedavg.upload_bytes, 1_506_424);
    assert_eq!(fedavg.download_bytes, 1_506_424);
    assert_eq!(format!("{:.2}", fed::cost::mib(fedavg.upload_bytes)), "1.44");

    let binary = fed::cost::full_binary_reference_bytes(&model);
    assert_eq!(binary, 376_606);
    assert_eq!(format!("{:.2}", fed::cost::mib(binary)), "0.36");

    let mut pruned = nn::init_model(specs, Dims::Flat(1152), 3).unwrap();
    let mask = server_prune(&mut pruned, &PruneConfig::default()).unwrap();
    let hns = fed::comm_cost(&pruned, &mask, Algorithm::Hidenseek, 0.8).unwrap();
    let signed = fed::comm_cost(&model, &PruneMask::all_keep(&model), Algorithm::Signed, 0.8).unwrap();
    assert!(
        hns.upload_bytes < signed.upload_bytes,
        "hidenseek upload {} must be below signed upload {}",
        hns.upload_bytes,
        signed.upload_bytes
    );
    println!(
        "criterion 5: PASS — byte model reproduces 1.44 MiB (FedAvg) and 0.36 MiB \
         (full binary) exactly; hidenseek upload {} B < signed upload {} B at keep rate 0.8",
        hns.upload_bytes, signed.upload_bytes
    );
}

fn har_fed_config(algorithm: Algorithm, seed: u64) -> FedConfig {
    FedConfig {
        algorithm,
        clients: 30,
        sample_rate: 0.1,
        local_epochs: 5,
        rounds: 200,
        batch_size: 32,
        lr: algorithm.default_lr(),
        classifier_lr: 1e-3,
        momentum: 0.9,
        clamp_eps: 1e-3,
        seed,
        psi: PsiKind::TanhExact,
        broadcast_client_product: false,
        fedmask_l1: 0.0,
        workers: 4,
    }
}

#[test]
#[ignore = "needs the UCI HAR raw inertial signals under $HNS_DATA_DIR/har (train/ and test/)"]
fn criterion_6_end_to_end_har() {
    let root = data_dir().join("har");
    let (dataset, subjects) = load_har(&root).expect("HAR dataset present");
    let partition =
        hidenseek::data::har::subject_partition(&subjects, &dataset.labels, 6, 0.2).unwrap();
    assert_eq!(partition.clients(), 30, "HAR has 30 subjects");
    let specs = nn::model_spec(ModelKind::Mlp, Dims::Flat(1152), 6).unwrap();

    let start = Instant::now();
    let hns = fed::run_training(
        &har_fed_config(Algorithm::Hidenseek, 1),
        &PruneConfig::default(),
        specs.clone(),
        Dims::Flat(1152),
        &dataset,
        &partition,
    )
    .unwrap();
    let hns_time = start.elapsed();
    let hns_final = hns.metrics.last().unwrap().weighted_accuracy;
    assert!(
        hns_time.as_secs() < 1800,
        "hidenseek run took {hns_time:?}, target is under 30 minutes"
    );
    assert!(
        hns_final >= 85.0,
        "hidenseek final weighted accuracy {hns_final:.2} below 85"
    );

    let start = Instant::now();
    let avg = fed::run_training(
        &har_fed_config(Algorithm::Fedavg, 1),
        &PruneConfig::default(),
        specs,
        Dims::Flat(1152),
        &dataset,
        &partition,
    )
    .unwrap();
    let avg_time = start.elapsed();
    let avg_final = avg.metrics.last().unwrap().weighted_accuracy;
    assert!(avg_time.as_secs() < 1800, "fedavg run took {avg_time:?}");
    assert!(
        avg_final >= 91.0,
        "fedavg final weighted accuracy {avg_final:.2} below 91"
    );
    println!(
        "criterion 6: PASS — HAR finals: hidenseek {hns_final:.2} (>= 85, {hns_time:.0?}), \
         fedavg {avg_final:.2} (>= 91, {avg_time:.0?})"
    );
}

fn mnist_subset() -> hidenseek::data::Dataset {
    let root = data_dir().join("mnist");
    let ds = load_idx(
        &root.join("train-images-idx3-ubyte"),
        &root.join("train-labels-idx1-ubyte"),
    )
    .expect("MNIST dataset present");
    ds.truncated(10_000).unwrap()
}

fn mnist_cfg(algorithm: Algorithm, seed: u64) -> FedConfig {
    FedConfig {
        algorithm,
        clients: 40,
        sample_rate: 0.1,
        local_epochs: 5,
        rounds: 50,
        batch_size: 32,
        lr: algorithm.default_lr(),
        classifier_lr: 1e-3,
        momentum: 0.9,
        clamp_eps: 1e-3,
        seed,
        psi: PsiKind::TanhExact,
        broadcast_client_product: false,
        fedmask_l1: 0.0,
        workers: 4,
    }
}

fn run_mnist(algorithm: Algorithm, alpha: f64, seed: u64, ds: &hidenseek::data::Dataset) -> f64 {
    let partition = dirichlet_partition(&ds.labels, ds.num_classes, 40, alpha, seed, 0.2).unwrap();
    let specs = nn::model_spec(ModelKind::SmallCnn, Dims::Chw(1, 28, 28), ds.num_classes).unwrap();
    let outcome = fed::run_training(
        &mnist_cfg(algorithm, seed),
        &PruneConfig::default(),
        specs,
        Dims::Chw(1, 28, 28),
        ds,
        &partition,
    )
    .unwrap();
    outcome.metrics.last().unwrap().weighted_accuracy
}

#[test]
#[ignore = "needs MNIST IDX files under $HNS_DATA_DIR/mnist"]
fn criterion_7_ordering_at_reduced_scale() {
    let ds = mnist_subset();
    let hns = run_mnist(Algorithm::Hidenseek, 1.0, 1, &ds);
    let fmask = run_mnist(Algorithm::Fedmask, 1.0, 1, &ds);
    assert!(
        hns >= fmask + 5.0,
        "hidenseek {hns:.2} must exceed the binary-supermask baseline {fmask:.2} by >= 5 points"
    );
    println!(
        "criterion 7: PASS — reduced-scale MNIST finals: hidenseek {hns:.2} vs fedmask {fmask:.2}"
    );
}

#[test]
#[ignore = "needs MNIST IDX files under $HNS_DATA_DIR/mnist"]
fn criterion_8_heterogeneity_monotonicity() {
    let ds = mnist_subset();
    let mut means = Vec::new();
    for alpha in [0.1f64, 1.0, 10.0] {
        let finals: Vec<f64> = (1..=3u64)
            .map(|seed| run_mnist(Algorithm::Hidenseek, alpha, seed, &ds))
            .collect();
        means.push((alpha, finals.iter().sum::<f64>() / finals.len() as f64));
    }
    assert!(
        means[2].1 >= means[1].1 && means[1].1 >= means[0].1,
        "accuracy must not decrease with alpha: {means:?}"
    );
    println!(
        "criterion 8: PASS — mean finals over 3 seeds: alpha 0.1 -> {:.2}, 1 -> {:.2}, 10 -> {:.2}",
        means[0].1, means[1].1, means[2].1
    );
}

#[test]
fn criterion_9_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let overrides = |out: &std::path::Path, workers: &str| {
        vec![
            ("dataset".to_string(), "synthetic".to_string()),
            ("clients".to_string(), "8".to_string()),
            ("rounds".to_string(), "4".to_string()),
            ("repetitions".to_string(), "2".to_string()),
            ("local_epochs".to_string(), "2".to_string()),
            ("synthetic_per_class".to_string(), "60".to_string()),
            ("workers".to_string(), workers.to_string()),
            ("output_dir".to_string(), out.display().to_string()),
        ]
    };
    let run = |out: PathBuf, workers: &str| {
        let cfg = parse_config(None, &overrides(&out, workers)).unwrap();
        runner::run_experiment(&cfg).unwrap()
    };
    let a = run(dir.path().join("a"), "1");
    let b = run(dir.path().join("b"), "1");
    let par = run(dir.path().join("p"), "4");
    for name in ["metrics_seed0.csv", "metrics_seed1.csv", "summary.csv"] {
        let ra = std::fs::read(a.join(name)).unwrap();
        assert_eq!(ra, std::fs::read(b.join(name)).unwrap(), "{name}: rerun differs");
        assert_eq!(
            ra,
            std::fs::read(par.join(name)).unwrap(),
            "{name}: 4-way parallel run differs"
        );
    }
    println!(
        "criterion 9: PASS — identical configs give byte-identical metrics CSVs, \
         also under 4-way client parallelism"
    );
}

#[test]
fn criterion_10_frozen_core_audit() {
    let ds = synthetic_blobs(4, 16, 80, 0.12, 31).unwrap();
    let part = dirichlet_partition(&ds.labels, 4, 8, 1.0, 31, 0.2).unwrap();
    let specs = nn::model_spec(ModelKind::Mlp, Dims::Flat(16), 4).unwrap();
    for algorithm in [Algorithm::Hidenseek, Algorithm::Signed] {
        let cfg = FedConfig {
            algorithm,
            clients: 8,
            sample_rate: 0.5,
            local_epochs: 2,
            rounds: 5,
            batch_size: 16,
            lr: algorithm.default_lr(),
            classifier_lr: 1e-3,
            momentum: 0.9,
            clamp_eps: 1e-3,
            seed: 31,
            psi: PsiKind::TanhExact,
            broadcast_client_product: false,
            fedmask_l1: 0.0,
            workers: 2,
        };
        let outcome = fed::run_training(
            &cfg,
            &PruneConfig::default(),
            specs.clone(),
            Dims::Flat(16),
            &ds,
            &part,
        )
        .unwrap();
        assert_eq!(
            outcome.setup_checksum,
            outcome.final_checksum,
            "{algorithm:?}: masked-layer weights drifted from the post-pruning snapshot"
        );
        assert_eq!(outcome.model.masked_weight_checksum(), outcome.setup_checksum);
    }
    println!(
        "criterion 10: PASS — masked-layer weight checksums equal the post-pruning \
         snapshot after hidenseek and signed training"
    );
}
