//! The feature-annihilation attack objective.
//!
//! For each tapped layer the clean and attacked activations are multiplied
//! elementwise and the loss accumulates `W_l * ln(1 + var(F_l))` where the
//! variance is taken over every element of the layer. Attacks minimize this:
//! driving the product toward a spatially constant map hollows out the
//! representation the decoder needs.

use crate::autodiff::{NodeId, Tape};
use crate::error::{DfaError, Result};
use crate::model::DepthModel;
use crate::tensor::{Real, Tensor};
use crate::types::{FeatureBundle, ImageTensor, TapSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Per-layer breakdown of the attack objective.
#[derive(Clone, Debug, Serialize)]
pub struct DfaLayerTerm {
    pub layer_id: String,
    pub variance: f64,
    pub weighted_term: f64,
}

/// Value of the attack objective with its per-layer decomposition.
#[derive(Clone, Debug, Serialize)]
pub struct DfaValue {
    pub total: f64,
    pub per_layer: Vec<DfaLayerTerm>,
}

/// Computes the loss between two feature bundles. Bundles must carry the
/// same layers in the same order; every layer needs a nonnegative weight in
/// `weights`.
pub fn dfa_loss(clean: &FeatureBundle, attacked: &FeatureBundle, weights: &TapSpec) -> Result<DfaValue> {
    weights.validate()?;
    if clean.layers.len() != attacked.layers.len() {
        return Err(DfaError::shape(
            "feature bundles",
            &[clean.layers.len()],
            &[attacked.layers.len()],
        ));
    }
    let mut per_layer = Vec::with_capacity(clean.layers.len());
    let mut total = 0.0f64;
    for ((id_c, t_c), (id_a, t_a)) in clean.layers.iter().zip(&attacked.layers) {
        if id_c != id_a {
            return Err(DfaError::InvalidArgument(format!(
                "bundle layer order mismatch: {id_c:?} vs {id_a:?}"
            )));
        }
        if t_c.shape() != t_a.shape() {
            return Err(DfaError::shape(
                format!("layer {id_c}"),
                t_c.shape(),
                t_a.shape(),
            ));
        }
        let weight = weights.weight_of(id_c).ok_or_else(|| {
            DfaError::InvalidArgument(format!("no weight for layer {id_c:?}"))
        })? as f64;
        let variance = product_variance(t_a, t_c);
        let weighted_term = weight * (1.0 + variance).ln();
        total += weighted_term;
        per_layer.push(DfaLayerTerm {
            layer_id: id_c.clone(),
            variance,
            weighted_term,
        });
    }
    Ok(DfaValue { total, per_layer })
}

/// Variance of the elementwise product, accumulated in f64.
pub fn product_variance(a: &Tensor<f32>, c: &Tensor<f32>) -> f64 {
    let n = a.len() as f64;
    if a.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    for (&av, &cv) in a.data().iter().zip(c.data()) {
        let f = av as f64 * cv as f64;
        sum += f;
        sum_sq += f * f;
    }
    let mean = sum / n;
    (sum_sq / n - mean * mean).max(0.0)
}

/// Builds the loss on a live tape from attacked tap nodes and constant clean
/// activations. Returns the scalar loss node.
pub fn dfa_loss_node<T: Real>(
    tape: &mut Tape<T>,
    attacked_taps: &[(String, NodeId)],
    clean_layers: &[(String, Tensor<T>)],
    weights: &TapSpec,
) -> Result<NodeId> {
    weights.validate()?;
    if attacked_taps.len() != clean_layers.len() {
        return Err(DfaError::shape(
            "tap count",
            &[clean_layers.len()],
            &[attacked_taps.len()],
        ));
    }
    let mut terms = Vec::with_capacity(attacked_taps.len());
    for ((id_a, node), (id_c, clean)) in attacked_taps.iter().zip(clean_layers) {
        if id_a != id_c {
            return Err(DfaError::InvalidArgument(format!(
                "tap order mismatch: {id_a:?} vs {id_c:?}"
            )));
        }
        let w = weights
            .weight_of(id_a)
            .ok_or_else(|| DfaError::InvalidArgument(format!("no weight for layer {id_a:?}")))?;
        let term = tape.dfa_term(*node, clean, T::from_f64(w as f64));
        terms.push(term);
    }
    Ok(tape.sum_scalars(&terms))
}

fn cast_bundle<T: Real>(bundle: &FeatureBundle) -> Vec<(String, Tensor<T>)> {
    bundle
        .layers
        .iter()
        .map(|(id, t)| (id.clone(), t.cast()))
        .collect()
}

/// Compares the analytic input gradient of the loss against central finite
/// differences at `epsilon`, over at least 64 sampled input pixels, and
/// returns the worst relative error. Runs in f64 so that the finite
/// differences themselves are trustworthy at the 1e-3 level.
pub fn dfa_gradient_check(model: &DepthModel, image: &ImageTensor, epsilon: f64) -> Result<f64> {
    if !(1e-6..=1e-2).contains(&epsilon) {
        return Err(DfaError::InvalidArgument(format!(
            "epsilon {epsilon} outside [1e-6, 1e-2]"
        )));
    }
    model.check_image(image)?;
    let net64 = model.net.cast::<f64>();
    let input64: Tensor<f64> = image.tensor().cast();

    // Clean activations at the unperturbed input, held constant.
    let clean_layers: Vec<(String, Tensor<f64>)> = {
        let mut tape = Tape::<f64>::new();
        let input = tape.constant(input64.clone());
        let nodes = net64.forward_on_tape(&mut tape, input, false);
        model
            .taps
            .layer_ids
            .iter()
            .map(|want| {
                let (_, node) = nodes
                    .taps
                    .iter()
                    .find(|(id, _)| id == want)
                    .expect("tap id validated");
                (want.clone(), tape.value(*node).clone())
            })
            .collect()
    };

    let loss_at = |img: &Tensor<f64>| -> f64 {
        let mut tape = Tape::<f64>::new();
        let input = tape.constant(img.clone());
        let nodes = net64.forward_on_tape(&mut tape, input, false);
        let taps: Vec<(String, NodeId)> = model
            .taps
            .layer_ids
            .iter()
            .map(|want| {
                let (_, node) = nodes.taps.iter().find(|(id, _)| id == want).unwrap();
                (want.clone(), *node)
            })
            .collect();
        let loss = dfa_loss_node(&mut tape, &taps, &clean_layers, &model.taps).unwrap();
        tape.value(loss).item()
    };

    // Analytic gradient w.r.t. the input image.
    let analytic = {
        let mut tape = Tape::<f64>::new();
        let input = tape.leaf(input64.clone(), true);
        let nodes = net64.forward_on_tape(&mut tape, input, false);
        let taps: Vec<(String, NodeId)> = model
            .taps
            .layer_ids
            .iter()
            .map(|want| {
                let (_, node) = nodes.taps.iter().find(|(id, _)| id == want).unwrap();
                (want.clone(), *node)
            })
            .collect();
        let loss = dfa_loss_node(&mut tape, &taps, &clean_layers, &model.taps)?;
        let grads = tape.backward(loss);
        grads[input].clone().expect("input gradient")
    };

    let mut rng = ChaCha8Rng::seed_from_u64(0xDFA6_C0DE);
    let n_coords = 64.max(96);
    let mut max_rel = 0.0f64;
    for _ in 0..n_coords {
        let idx = rng.gen_range(0..input64.len());
        let mut plus = input64.clone();
        plus.data_mut()[idx] += epsilon;
        let mut minus = input64.clone();
        minus.data_mut()[idx] -= epsilon;
        let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * epsilon);
        let a = analytic.data()[idx];
        let denom = a.abs().max(numeric.abs()).max(1e-7);
        let rel = (a - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

/// Convenience wrapper: clean-vs-attacked bundles captured from a model.
pub fn clean_layers_for_training(bundle: &FeatureBundle) -> Vec<(String, Tensor<f32>)> {
    cast_bundle::<f32>(bundle)
}
