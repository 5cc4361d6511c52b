//! Saliency backward pass vs explicit path-product enumeration, plus the
//! conservation law on bias-free dense chains.

mod common;

use common::*;
use hidenseek::nn::{self, Dims, LayerKind, LayerSpec};
use hidenseek::prune::{sign_saliency, unit_scores};
use hidenseek::rng;
use hidenseek::Tensor;

/// Random bias-free dense chain with the given widths; returns the model
/// and the exact f64 image of its weights.
fn random_chain(widths: &[usize], seed: u64) -> (nn::Model, Vec<Vec<f64>>) {
    let mut specs = Vec::new();
    for i in 0..widths.len() - 2 {
        specs.push(LayerSpec::masked(
            LayerKind::Dense { in_features: widths[i], out_features: widths[i + 1] },
            true,
        ));
    }
    let n = widths.len();
    specs.push(LayerSpec::plain(LayerKind::Dense {
        in_features: widths[n - 2],
        out_features: widths[n - 1],
    }));
    let mut model = nn::init_model(specs, Dims::Flat(widths[0]), seed).unwrap();
    let mut r = rng::stream(&[seed, 77]);
    let mut weights64 = Vec::new();
    for l in 0..widths.len() - 1 {
        let len = widths[l] * widths[l + 1];
        let w64 = uniform_vec(&mut r, len, 1.0);
        let shape = model.weights[l].as_ref().unwrap().shape().to_vec();
        model.weights[l] = Some(Tensor::from_vec(&shape, to_f32(&w64)).unwrap());
        // oracle sees the exact f32-rounded values
        weights64.push(to_f64(model.weights[l].as_ref().unwrap().data()));
    }
    (model, weights64)
}

fn normalization_constant(weights64: &[Vec<f64>]) -> f64 {
    weights64
        .iter()
        .map(|w| w.iter().fold(0.0f64, |m, &v| m.max(v.abs())))
        .product()
}

#[test]
fn backward_pass_equals_path_enumeration_on_small_chains() {
    let cases: &[&[usize]] = &[
        &[2, 3, 2],
        &[3, 4, 2],
        &[4, 5, 3, 2],
        &[5, 5, 5, 5],
        &[1, 1, 1],
    ];
    for (i, widths) in cases.iter().enumerate() {
        let (model, w64) = random_chain(widths, 100 + i as u64);
        let computed = sign_saliency(&model).unwrap();
        let oracle = saliency_by_path_enumeration(&w64, widths);
        let scale = normalization_constant(&w64);
        for (l, expected) in oracle.iter().enumerate() {
            let actual = computed[l].as_ref().unwrap();
            for (j, (&a, &e)) in actual.iter().zip(expected.iter()).enumerate() {
                let rescaled = a * scale;
                let diff = (rescaled - e).abs();
                assert!(
                    diff <= 1e-6 * rescaled.abs().max(e.abs()).max(1e-12),
                    "chain {widths:?} layer {l} weight {j}: {rescaled} vs {e}"
                );
            }
        }
    }
}

#[test]
fn saliency_sums_are_conserved_across_layers() {
    // bias-free dense chains: the total saliency in each layer equals the
    // total in the next (every input-output path crosses every layer once)
    for seed in 0..5u64 {
        let (model, _) = random_chain(&[6, 8, 7, 4], 200 + seed);
        let computed = sign_saliency(&model).unwrap();
        let sums: Vec<f64> = computed
            .iter()
            .flatten()
            .map(|layer| layer.iter().sum::<f64>())
            .collect();
        for pair in sums.windows(2) {
            let rel = (pair[0] - pair[1]).abs() / pair[0].abs().max(pair[1].abs());
            assert!(rel <= 1e-5, "adjacent layer sums {pair:?} differ by {rel}");
        }
    }
}

#[test]
fn unit_scores_follow_weight_and_saliency_slices() {
    let (model, w64) = random_chain(&[3, 4, 2], 300);
    let widths = [3usize, 4, 2];
    let saliency = sign_saliency(&model).unwrap();
    let scores = unit_scores(&model, &saliency);
    let oracle = saliency_by_path_enumeration(&w64, &widths);
    let scale = normalization_constant(&w64);
    let per_unit = 3;
    for u in 0..4 {
        let mut acc = 0.0f64;
        for j in 0..per_unit {
            let v = w64[0][u * per_unit + j] * oracle[0][u * per_unit + j] / scale;
            acc += v * v;
        }
        let expect = acc.sqrt();
        let actual = scores[0].as_ref().unwrap()[u];
        let rel = (actual - expect).abs() / expect.abs().max(1e-12);
        assert!(rel < 1e-6, "unit {u}: {actual} vs {expect}");
    }
}
