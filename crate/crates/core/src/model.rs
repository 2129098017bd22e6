//! The victim depth estimator: a small encoder-decoder with skip connections
//! and a sigmoid disparity head, plus training and checkpointing.
//!
//! Four stride-2 encoder stages (32/64/128/256 channels) mirror into four
//! nearest-neighbor-upsample decoder stages. Every convolution output is a
//! nameable feature tap; the first two encoder convolutions are excluded
//! from the default tap set.

use crate::autodiff::{NodeId, Tape};
use crate::data::SceneDataset;
use crate::error::{DfaError, Result};
use crate::nn::{apply_conv, bind_conv, Adam, BoundConv, ConvLayer};
use crate::tensor::{Real, Tensor};
use crate::types::{DepthMap, FeatureBundle, ImageTensor, TapSpec};
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const ARCH_ENCDEC4: &str = "encdec4-skip-v1";

/// Number of leading encoder convolutions never exposed as taps.
pub const K_SKIP: usize = 2;

const ENC_CHANNELS: [usize; 4] = [32, 64, 128, 256];
const DEC_CHANNELS: [usize; 4] = [128, 64, 32, 16];

/// Names of every convolution output, in evaluation order.
pub const LAYER_IDS: [&str; 9] = [
    "enc1", "enc2", "enc3", "enc4", "dec4", "dec3", "dec2", "dec1", "disp",
];

/// Negative-side slope of the activations; keeps gradients alive everywhere.
pub const LEAKY_SLOPE: f32 = 0.1;

/// The raw network: nine convolutions with fixed wiring.
#[derive(Clone, Debug)]
pub struct DepthNet<T: Real = f32> {
    pub layers: Vec<ConvLayer<T>>,
    pub input_height: usize,
    pub input_width: usize,
}

/// Node handles produced by a forward pass on a tape.
pub struct ForwardNodes {
    /// (layer_id, node) for every convolution output, post-nonlinearity,
    /// in evaluation order.
    pub taps: Vec<(String, NodeId)>,
    /// The sigmoid disparity output (same node as the last tap).
    pub disp: NodeId,
    /// Parameter bindings in `layers` order, for gradient extraction.
    pub bound: Vec<BoundConv>,
}

impl DepthNet<f32> {
    pub fn seeded(input_height: usize, input_width: usize, seed: u64) -> Result<Self> {
        check_input_size(input_height, input_width)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(9);
        let mut in_ch = 3;
        for (i, &out_ch) in ENC_CHANNELS.iter().enumerate() {
            layers.push(ConvLayer::kaiming(LAYER_IDS[i], in_ch, out_ch, 2, &mut rng));
            in_ch = out_ch;
        }
        // Decoder inputs: upsampled previous output concatenated with the
        // matching encoder skip (none for the last stage).
        let dec_in = [
            ENC_CHANNELS[3] + ENC_CHANNELS[2],
            DEC_CHANNELS[0] + ENC_CHANNELS[1],
            DEC_CHANNELS[1] + ENC_CHANNELS[0],
            DEC_CHANNELS[2],
        ];
        for (i, (&in_c, &out_c)) in dec_in.iter().zip(DEC_CHANNELS.iter()).enumerate() {
            layers.push(ConvLayer::kaiming(LAYER_IDS[4 + i], in_c, out_c, 1, &mut rng));
        }
        let mut head = ConvLayer::kaiming("disp", DEC_CHANNELS[3], 1, 1, &mut rng);
        // Start the sigmoid head in the scene's typical disparity range so
        // early training does not saturate it.
        head.bias.data_mut()[0] = -2.0;
        layers.push(head);
        Ok(Self {
            layers,
            input_height,
            input_width,
        })
    }
}

impl<T: Real> DepthNet<T> {
    pub fn cast<U: Real>(&self) -> DepthNet<U> {
        DepthNet {
            layers: self.layers.iter().map(|l| l.cast()).collect(),
            input_height: self.input_height,
            input_width: self.input_width,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    /// Records the full forward pass on `tape` starting from `input`
    /// (a 3 x H x W node). Returns tap nodes for every convolution output.
    pub fn forward_on_tape(&self, tape: &mut Tape<T>, input: NodeId, trainable: bool) -> ForwardNodes {
        let bound: Vec<BoundConv> = self
            .layers
            .iter()
            .map(|l| bind_conv(tape, l, trainable))
            .collect();

        let slope = T::from_f64(LEAKY_SLOPE as f64);
        let mut taps = Vec::with_capacity(9);
        // encoder
        let mut x = input;
        let mut skips = Vec::with_capacity(4);
        for i in 0..4 {
            let c = apply_conv(tape, &bound[i], x);
            x = tape.leaky_relu(c, slope);
            taps.push((LAYER_IDS[i].to_string(), x));
            skips.push(x);
        }
        // decoder with skip connections
        for i in 0..4 {
            let up = tape.upsample2x(x);
            let cat = if i < 3 {
                tape.concat_channels(up, skips[2 - i])
            } else {
                up
            };
            let c = apply_conv(tape, &bound[4 + i], cat);
            x = tape.leaky_relu(c, slope);
            taps.push((LAYER_IDS[4 + i].to_string(), x));
        }
        let head = apply_conv(tape, &bound[8], x);
        let disp = tape.sigmoid(head);
        taps.push(("disp".to_string(), disp));
        ForwardNodes { taps, disp, bound }
    }
}

fn check_input_size(height: usize, width: usize) -> Result<()> {
    if height < 32 || width < 32 || height % 16 != 0 || width % 16 != 0 {
        return Err(DfaError::InvalidArgument(format!(
            "input size {height}x{width} must be >= 32 and divisible by 16"
        )));
    }
    Ok(())
}

/// Disparity in [0,1] to metric depth: 1/d = s/d_min + (1-s)/d_max, so s=1
/// is the near plane and s=0 the far plane.
pub fn disparity_to_depth(s: f32, d_min: f32, d_max: f32) -> f32 {
    d_min * d_max / (d_min + s * (d_max - d_min))
}

/// Inverse of [`disparity_to_depth`], used to build training targets.
pub fn depth_to_disparity(d: f32, d_min: f32, d_max: f32) -> f32 {
    (d_min * (d_max - d) / (d * (d_max - d_min))).clamp(0.0, 1.0)
}

/// A trained victim: network weights plus tap configuration and depth range.
#[derive(Clone, Debug)]
pub struct DepthModel {
    pub architecture_id: String,
    pub net: DepthNet<f32>,
    pub taps: TapSpec,
    pub d_min: f32,
    pub d_max: f32,
    pub seed: u64,
}

impl DepthModel {
    /// Freshly initialized model with the default tap set (every convolution
    /// after the first `K_SKIP` encoder stages, unit weights).
    pub fn new(input_height: usize, input_width: usize, d_min: f32, d_max: f32, seed: u64) -> Result<Self> {
        if !(d_min > 0.0 && d_max > d_min) {
            return Err(DfaError::InvalidArgument(
                "depth range must satisfy 0 < d_min < d_max".into(),
            ));
        }
        let net = DepthNet::seeded(input_height, input_width, seed)?;
        let taps = TapSpec::uniform(
            LAYER_IDS[K_SKIP..]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        );
        Ok(Self {
            architecture_id: ARCH_ENCDEC4.to_string(),
            net,
            taps,
            d_min,
            d_max,
            seed,
        })
    }

    /// Stable identifier used in artifact provenance.
    pub fn model_id(&self) -> String {
        format!("{}-seed{}", self.architecture_id, self.seed)
    }

    /// Replaces the tap configuration after validating it against the
    /// architecture (ids must exist, skipped prefix stays untapped).
    pub fn set_taps(&mut self, taps: TapSpec) -> Result<()> {
        taps.validate()?;
        for id in &taps.layer_ids {
            if !LAYER_IDS.contains(&id.as_str()) {
                return Err(DfaError::InvalidArgument(format!("unknown tap layer {id:?}")));
            }
            if LAYER_IDS[..K_SKIP].contains(&id.as_str()) {
                return Err(DfaError::InvalidArgument(format!(
                    "layer {id:?} is within the skipped encoder prefix"
                )));
            }
        }
        // Order must follow evaluation order.
        let positions: Vec<usize> = taps
            .layer_ids
            .iter()
            .map(|id| LAYER_IDS.iter().position(|l| l == id).unwrap())
            .collect();
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DfaError::InvalidArgument(
                "tap layers must be listed in evaluation order".into(),
            ));
        }
        self.taps = taps;
        Ok(())
    }

    pub fn check_image(&self, image: &ImageTensor) -> Result<()> {
        if image.height() != self.net.input_height || image.width() != self.net.input_width {
            return Err(DfaError::shape(
                "model input",
                &[3, self.net.input_height, self.net.input_width],
                &[3, image.height(), image.width()],
            ));
        }
        Ok(())
    }

    /// Forward pass. Returns dense depth (full valid mask) and, when asked,
    /// the activations of every tapped layer.
    pub fn forward(&self, image: &ImageTensor, capture_features: bool) -> Result<(DepthMap, Option<FeatureBundle>)> {
        self.check_image(image)?;
        let mut tape = Tape::<f32>::new();
        let input = tape.constant(image.tensor().clone());
        let nodes = self.net.forward_on_tape(&mut tape, input, false);

        for (id, node) in &nodes.taps {
            if !tape.value(*node).all_finite() {
                return Err(DfaError::NonFinite(format!("activation {id}")));
            }
        }

        let disp = tape.value(nodes.disp);
        let depth_data: Vec<f32> = disp
            .data()
            .iter()
            .map(|&s| disparity_to_depth(s, self.d_min, self.d_max))
            .collect();
        let depth = DepthMap::full_valid(
            self.net.input_height,
            self.net.input_width,
            depth_data,
            self.d_min,
            self.d_max,
        )?;

        let features = if capture_features {
            Some(self.bundle_from_tape(&tape, &nodes))
        } else {
            None
        };
        Ok((depth, features))
    }

    /// Extracts the configured taps from a completed forward pass.
    pub fn bundle_from_tape(&self, tape: &Tape<f32>, nodes: &ForwardNodes) -> FeatureBundle {
        let layers = self
            .taps
            .layer_ids
            .iter()
            .map(|want| {
                let (_, node) = nodes
                    .taps
                    .iter()
                    .find(|(id, _)| id == want)
                    .expect("tap id validated against architecture");
                (want.clone(), tape.value(*node).clone())
            })
            .collect();
        FeatureBundle { layers }
    }

    /// Tap nodes (in tap order) for building attack losses on a live tape.
    pub fn tap_nodes(&self, nodes: &ForwardNodes) -> Vec<(String, NodeId)> {
        self.taps
            .layer_ids
            .iter()
            .map(|want| {
                let (_, node) = nodes
                    .taps
                    .iter()
                    .find(|(id, _)| id == want)
                    .expect("tap id validated against architecture");
                (want.clone(), *node)
            })
            .collect()
    }

    /// Mean absolute depth error in meters over a set of scenes.
    pub fn mean_l1_meters(&self, dataset: &SceneDataset, indices: &[usize]) -> Result<f64> {
        let mut total = 0.0f64;
        for &i in indices {
            let (pred, _) = self.forward(&dataset.images[i], false)?;
            let gt = &dataset.depths[i];
            let mut acc = 0.0f64;
            let mut n = 0usize;
            for (j, (&p, &g)) in pred.data.data().iter().zip(gt.data.data()).enumerate() {
                if gt.valid_mask[j] {
                    acc += (p as f64 - g as f64).abs();
                    n += 1;
                }
            }
            total += acc / n.max(1) as f64;
        }
        Ok(total / indices.len().max(1) as f64)
    }
}

/// Victim training hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Mean L1 depth error (meters) the held-out split must reach.
    pub target_l1: f64,
    pub holdout_fraction: f32,
    pub d_min: f32,
    pub d_max: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            max_epochs: 20,
            batch_size: 4,
            target_l1: 3.0,
            holdout_fraction: 0.1,
            d_min: 1.0,
            d_max: 80.0,
        }
    }
}

/// Incremental victim trainer: owns the optimizer state so callers can run
/// epochs one at a time.
pub struct VictimTrainer<'a> {
    dataset: &'a SceneDataset,
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    targets: Vec<Tensor<f32>>,
    adam: Adam,
    rng: ChaCha8Rng,
    batch_size: usize,
}

impl<'a> VictimTrainer<'a> {
    pub fn new(dataset: &'a SceneDataset, config: &TrainConfig, seed: u64) -> Result<Self> {
        if dataset.is_empty() {
            return Err(DfaError::EmptyDataset);
        }
        if config.learning_rate <= 0.0 {
            return Err(DfaError::InvalidArgument("learning rate must be > 0".into()));
        }
        if config.max_epochs == 0 || config.batch_size == 0 {
            return Err(DfaError::InvalidArgument(
                "max_epochs and batch_size must be >= 1".into(),
            ));
        }
        let n = dataset.len();
        let holdout = ((n as f32 * config.holdout_fraction).round() as usize).clamp(1, n);
        let train_count = n - holdout;
        let (train_idx, val_idx): (Vec<usize>, Vec<usize>) = if train_count == 0 {
            ((0..n).collect(), (0..n).collect())
        } else {
            ((0..train_count).collect(), (train_count..n).collect())
        };
        let targets: Vec<Tensor<f32>> = dataset
            .depths
            .iter()
            .map(|d| {
                Tensor::new(
                    vec![1, d.height(), d.width()],
                    d.data
                        .data()
                        .iter()
                        .map(|&v| depth_to_disparity(v, config.d_min, config.d_max))
                        .collect(),
                )
                .unwrap()
            })
            .collect();
        Ok(Self {
            dataset,
            train_idx,
            val_idx,
            targets,
            adam: Adam::new(config.learning_rate),
            rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5EED_0001)),
            batch_size: config.batch_size,
        })
    }

    pub fn val_indices(&self) -> &[usize] {
        &self.val_idx
    }

    /// One shuffled pass over the training split.
    pub fn run_epoch(&mut self, model: &mut DepthModel) -> Result<()> {
        let mut order = self.train_idx.clone();
        order.shuffle(&mut self.rng);
        for batch in order.chunks(self.batch_size) {
            let mut grad_acc: Vec<Tensor<f32>> = Vec::new();
            for &i in batch {
                let mut tape = Tape::<f32>::new();
                let input = tape.constant(self.dataset.images[i].tensor().clone());
                let nodes = model.net.forward_on_tape(&mut tape, input, true);
                let loss = tape.l1_vs(nodes.disp, &self.targets[i]);
                if !tape.value(loss).all_finite() {
                    return Err(DfaError::NonFinite("training loss".into()));
                }
                let grads = tape.backward(loss);
                let mut k = 0;
                for b in &nodes.bound {
                    for id in [b.weight_id, b.bias_id] {
                        let g = grads[id].as_ref().expect("param gradient");
                        if grad_acc.len() <= k {
                            grad_acc.push(g.clone());
                        } else {
                            for (a, v) in grad_acc[k].data_mut().iter_mut().zip(g.data()) {
                                *a += *v;
                            }
                        }
                        k += 1;
                    }
                }
            }
            let inv = 1.0 / batch.len() as f32;
            for g in &mut grad_acc {
                for v in g.data_mut() {
                    *v *= inv;
                }
            }
            let mut params: Vec<&mut Tensor<f32>> = Vec::with_capacity(grad_acc.len());
            for layer in &mut model.net.layers {
                params.push(&mut layer.weight);
                params.push(&mut layer.bias);
            }
            self.adam.step(&mut params, &grad_acc);
        }
        Ok(())
    }
}

/// Trains a fresh victim until the held-out mean L1 depth error drops below
/// `config.target_l1`. The loss is L1 in disparity space (the head's own
/// parameterization); the acceptance metric stays in meters.
pub fn train_toy_model(dataset: &SceneDataset, config: &TrainConfig, seed: u64) -> Result<DepthModel> {
    let mut trainer = VictimTrainer::new(dataset, config, seed)?;
    let mut model = DepthModel::new(
        dataset.height(),
        dataset.width(),
        config.d_min,
        config.d_max,
        seed,
    )?;
    let mut last_val = f64::INFINITY;
    for _epoch in 0..config.max_epochs {
        trainer.run_epoch(&mut model)?;
        last_val = model.mean_l1_meters(dataset, trainer.val_indices())?;
        if last_val <= config.target_l1 {
            return Ok(model);
        }
    }
    Err(DfaError::TrainingFailed {
        target: config.target_l1,
        achieved: last_val,
        epochs: config.max_epochs,
    })
}

// --- checkpoint persistence -------------------------------------------------

const WEIGHTS_MAGIC: &[u8; 8] = b"DFAWTS01";

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    schema_version: u32,
    architecture_id: String,
    input_height: usize,
    input_width: usize,
    tap_layer_ids: Vec<String>,
    tap_weights: Vec<f32>,
    d_min: f32,
    d_max: f32,
    seed: u64,
}

/// Writes `manifest.json` and `weights.bin` into `dir`.
pub fn save_model(model: &DepthModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = CheckpointManifest {
        schema_version: 1,
        architecture_id: model.architecture_id.clone(),
        input_height: model.net.input_height,
        input_width: model.net.input_width,
        tap_layer_ids: model.taps.layer_ids.clone(),
        tap_weights: model.taps.weights.clone(),
        d_min: model.d_min,
        d_max: model.d_max,
        seed: model.seed,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;

    let mut file = std::fs::File::create(dir.join("weights.bin"))?;
    file.write_all(WEIGHTS_MAGIC)?;
    let tensors: Vec<(String, &Tensor<f32>)> = model
        .net
        .layers
        .iter()
        .flat_map(|l| {
            [
                (format!("{}.weight", l.name), &l.weight),
                (format!("{}.bias", l.name), &l.bias),
            ]
        })
        .collect();
    file.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, tensor) in tensors {
        file.write_all(&(name.len() as u32).to_le_bytes())?;
        file.write_all(name.as_bytes())?;
        file.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            file.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact_or_format(file: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    file.read_exact(buf)
        .map_err(|_| DfaError::Format(format!("weights file truncated reading {what}")))
}

/// Loads a checkpoint written by [`save_model`]. Rejects unknown
/// architectures and manifest/weight mismatches.
pub fn load_model(dir: &Path) -> Result<DepthModel> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| DfaError::Format(format!("cannot read {}: {e}", manifest_path.display())))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| DfaError::Format(format!("bad checkpoint manifest: {e}")))?;
    if manifest.schema_version != 1 {
        return Err(DfaError::Format(format!(
            "unsupported checkpoint schema version {}",
            manifest.schema_version
        )));
    }
    if manifest.architecture_id != ARCH_ENCDEC4 {
        return Err(DfaError::UnsupportedArchitecture(manifest.architecture_id));
    }

    let mut model = DepthModel::new(
        manifest.input_height,
        manifest.input_width,
        manifest.d_min,
        manifest.d_max,
        manifest.seed,
    )?;
    model.set_taps(TapSpec {
        layer_ids: manifest.tap_layer_ids,
        weights: manifest.tap_weights,
    })?;

    let mut file = std::fs::File::open(dir.join("weights.bin"))?;
    let mut magic = [0u8; 8];
    read_exact_or_format(&mut file, &mut magic, "magic")?;
    if &magic != WEIGHTS_MAGIC {
        return Err(DfaError::Format("bad weights magic".into()));
    }
    let mut u32buf = [0u8; 4];
    read_exact_or_format(&mut file, &mut u32buf, "tensor count")?;
    let count = u32::from_le_bytes(u32buf) as usize;
    for _ in 0..count {
        read_exact_or_format(&mut file, &mut u32buf, "name length")?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact_or_format(&mut file, &mut name_bytes, "name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| DfaError::Format("non-utf8 tensor name".into()))?;
        read_exact_or_format(&mut file, &mut u32buf, "ndim")?;
        let ndim = u32::from_le_bytes(u32buf) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            read_exact_or_format(&mut file, &mut u32buf, "dim")?;
            shape.push(u32::from_le_bytes(u32buf) as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = vec![0f32; len];
        for v in &mut data {
            read_exact_or_format(&mut file, &mut u32buf, "tensor data")?;
            *v = f32::from_le_bytes(u32buf);
        }
        let (layer_name, field) = name
            .rsplit_once('.')
            .ok_or_else(|| DfaError::Format(format!("bad tensor name {name:?}")))?;
        let layer = model
            .net
            .layers
            .iter_mut()
            .find(|l| l.name == layer_name)
            .ok_or_else(|| DfaError::Format(format!("unknown layer {layer_name:?}")))?;
        let slot = match field {
            "weight" => &mut layer.weight,
            "bias" => &mut layer.bias,
            _ => return Err(DfaError::Format(format!("unknown field {field:?}"))),
        };
        if slot.shape() != shape.as_slice() {
            return Err(DfaError::shape(
                format!("checkpoint tensor {name}"),
                slot.shape(),
                &shape,
            ));
        }
        *slot = Tensor::new(shape, data)?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_scenes;

    fn tiny_model(seed: u64) -> DepthModel {
        DepthModel::new(32, 32, 1.0, 80.0, seed).unwrap()
    }

    #[test]
    fn rejects_bad_input_sizes() {
        assert!(DepthModel::new(31, 32, 1.0, 80.0, 0).is_err());
        assert!(DepthModel::new(48, 40, 1.0, 80.0, 0).is_err());
        assert!(DepthModel::new(32, 32, 1.0, 80.0, 0).is_ok());
    }

    #[test]
    fn forward_depth_within_range_and_deterministic() {
        let model = tiny_model(3);
        let ds = generate_scenes("A", 1, 32, 32, 0).unwrap();
        let (d1, f1) = model.forward(&ds.images[0], true).unwrap();
        let (d2, _) = model.forward(&ds.images[0], false).unwrap();
        assert_eq!(d1.data, d2.data);
        for &v in d1.data.data() {
            assert!((model.d_min..=model.d_max).contains(&v));
        }
        let bundle = f1.unwrap();
        assert_eq!(
            bundle.layer_ids(),
            model.taps.layer_ids.iter().map(|s| s.as_str()).collect::<Vec<_>>()
        );
        assert_eq!(d1.valid_count(), 32 * 32);
    }

    #[test]
    fn forward_rejects_wrong_size() {
        let model = tiny_model(3);
        let img = ImageTensor::zeros(48, 48);
        assert!(matches!(
            model.forward(&img, false),
            Err(DfaError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn tap_shapes_stable_across_calls() {
        let model = tiny_model(4);
        let ds = generate_scenes("B", 2, 32, 32, 9).unwrap();
        let (_, f1) = model.forward(&ds.images[0], true).unwrap();
        let (_, f2) = model.forward(&ds.images[1], true).unwrap();
        let (f1, f2) = (f1.unwrap(), f2.unwrap());
        for ((id1, t1), (id2, t2)) in f1.layers.iter().zip(&f2.layers) {
            assert_eq!(id1, id2);
            assert_eq!(t1.shape(), t2.shape());
        }
    }

    #[test]
    fn default_taps_skip_first_two_encoder_convs() {
        let model = tiny_model(0);
        assert!(!model.taps.layer_ids.contains(&"enc1".to_string()));
        assert!(!model.taps.layer_ids.contains(&"enc2".to_string()));
        assert_eq!(model.taps.layer_ids.len(), LAYER_IDS.len() - K_SKIP);
        let mut bad = model.clone();
        assert!(bad
            .set_taps(TapSpec::uniform(vec!["enc1".into(), "enc3".into()]))
            .is_err());
    }

    #[test]
    fn disparity_depth_mapping_endpoints() {
        assert!((disparity_to_depth(1.0, 1.0, 80.0) - 1.0).abs() < 1e-6);
        assert!((disparity_to_depth(0.0, 1.0, 80.0) - 80.0).abs() < 1e-6);
        for &d in &[1.0f32, 2.5, 10.0, 79.0, 80.0] {
            let s = depth_to_disparity(d, 1.0, 80.0);
            assert!((disparity_to_depth(s, 1.0, 80.0) - d).abs() / d < 1e-5);
        }
    }

    #[test]
    fn training_empty_dataset_errors() {
        let ds = SceneDataset {
            images: vec![],
            depths: vec![],
            distribution_id: "A".into(),
            seed: 0,
        };
        assert!(matches!(
            train_toy_model(&ds, &TrainConfig::default(), 7),
            Err(DfaError::EmptyDataset)
        ));
    }

    #[test]
    fn training_is_deterministic_and_reaches_target() {
        let ds = generate_scenes("A", 24, 32, 32, 42).unwrap();
        let config = TrainConfig {
            max_epochs: 8,
            batch_size: 4,
            target_l1: 6.0,
            ..TrainConfig::default()
        };
        let m1 = train_toy_model(&ds, &config, 7).unwrap();
        let m2 = train_toy_model(&ds, &config, 7).unwrap();
        for (a, b) in m1.net.layers.iter().zip(&m2.net.layers) {
            assert_eq!(a.weight.data(), b.weight.data());
            assert_eq!(a.bias.data(), b.bias.data());
        }
        let m3 = train_toy_model(&ds, &config, 8).unwrap();
        assert_ne!(m1.net.layers[0].weight.data(), m3.net.layers[0].weight.data());
    }

    #[test]
    fn training_failure_carries_final_error() {
        let ds = generate_scenes("A", 6, 32, 32, 1).unwrap();
        let config = TrainConfig {
            max_epochs: 1,
            target_l1: 0.0001,
            ..TrainConfig::default()
        };
        match train_toy_model(&ds, &config, 7) {
            Err(DfaError::TrainingFailed { achieved, .. }) => assert!(achieved > 0.0001),
            other => panic!("expected training failure, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model(17);
        let ds = generate_scenes("A", 1, 32, 32, 5).unwrap();
        save_model(&model, dir.path()).unwrap();
        let loaded = load_model(dir.path()).unwrap();
        let (d1, _) = model.forward(&ds.images[0], false).unwrap();
        let (d2, _) = loaded.forward(&ds.images[0], false).unwrap();
        assert_eq!(d1.data.data(), d2.data.data());
    }

    #[test]
    fn corrupted_manifest_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&tiny_model(1), dir.path()).unwrap();
        std::fs::write(dir.path().join("manifest.json"), "{not json").unwrap();
        assert!(matches!(load_model(dir.path()), Err(DfaError::Format(_))));
    }

    #[test]
    fn unknown_architecture_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&tiny_model(1), dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        let text = text.replace(ARCH_ENCDEC4, "mystery-net-v9");
        std::fs::write(dir.path().join("manifest.json"), text).unwrap();
        assert!(matches!(
            load_model(dir.path()),
            Err(DfaError::UnsupportedArchitecture(_))
        ));
    }

    #[test]
    fn truncated_weights_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&tiny_model(1), dir.path()).unwrap();
        let bytes = std::fs::read(dir.path().join("weights.bin")).unwrap();
        std::fs::write(dir.path().join("weights.bin"), &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_model(dir.path()), Err(DfaError::Format(_))));
    }

    /// Convergence probe at full toy scale. Run explicitly:
    /// `cargo test -p dfa calibrate_victim -- --ignored --nocapture`
    #[test]
    #[ignore]
    fn calibrate_victim() {
        let n: usize = std::env::var("DFA_PROBE_SCENES").ok().and_then(|s| s.parse().ok()).unwrap_or(256);
        let epochs: usize = std::env::var("DFA_PROBE_EPOCHS").ok().and_then(|s| s.parse().ok()).unwrap_or(10);
        let lr: f32 = std::env::var("DFA_PROBE_LR").ok().and_then(|s| s.parse().ok()).unwrap_or(3e-3);
        let ds = generate_scenes("A", n, 96, 128, 100).unwrap();
        let holdout = generate_scenes("A", 32, 96, 128, 101).unwrap();
        let config = TrainConfig {
            learning_rate: lr,
            max_epochs: 1,
            batch_size: 4,
            target_l1: f64::INFINITY,
            holdout_fraction: 0.05,
            ..TrainConfig::default()
        };
        let mut model = DepthModel::new(96, 128, 1.0, 80.0, 7).unwrap();
        let mut trainer = VictimTrainer::new(&ds, &config, 7).unwrap();
        let val_idx: Vec<usize> = (0..holdout.len()).collect();
        let t0 = std::time::Instant::now();
        for epoch in 0..epochs {
            trainer.run_epoch(&mut model).unwrap();
            let l1 = model.mean_l1_meters(&holdout, &val_idx).unwrap();
            let mut absrel = 0.0f64;
            for &i in &val_idx {
                let (pred, _) = model.forward(&holdout.images[i], false).unwrap();
                let gt = &holdout.depths[i];
                let mut acc = 0.0f64;
                for (j, (&p, &g)) in pred.data.data().iter().zip(gt.data.data()).enumerate() {
                    if gt.valid_mask[j] {
                        acc += ((p - g).abs() / g) as f64;
                    }
                }
                absrel += acc / gt.valid_count() as f64;
            }
            absrel /= val_idx.len() as f64;
            println!(
                "epoch {epoch}: val L1 {l1:.3} m, AbsRel {absrel:.4}, elapsed {:?}",
                t0.elapsed()
            );
        }
    }

    /// Wall-clock probe for the full-size victim. Run explicitly:
    /// `cargo test -p dfa bench_full_size -- --ignored --nocapture`
    #[test]
    #[ignore]
    fn bench_full_size() {
        let ds = generate_scenes("A", 4, 96, 128, 0).unwrap();
        let model = DepthModel::new(96, 128, 1.0, 80.0, 7).unwrap();
        let t0 = std::time::Instant::now();
        for img in &ds.images {
            model.forward(img, true).unwrap();
        }
        println!("forward+capture: {:?}/image", t0.elapsed() / 4);

        let target = Tensor::full(&[1, 96, 128], 0.3f32);
        let t1 = std::time::Instant::now();
        for img in &ds.images {
            let mut tape = Tape::<f32>::new();
            let input = tape.constant(img.tensor().clone());
            let nodes = model.net.forward_on_tape(&mut tape, input, true);
            let loss = tape.l1_vs(nodes.disp, &target);
            let _ = tape.backward(loss);
        }
        println!("train step (fwd+bwd): {:?}/image", t1.elapsed() / 4);
    }

    /// Regenerates the committed golden depth output. Run explicitly:
    /// `cargo test -p dfa golden_capture -- --ignored`
    #[test]
    #[ignore]
    fn golden_capture() {
        let model = DepthModel::new(96, 128, 1.0, 80.0, 17).unwrap();
        let img = ImageTensor::zeros(96, 128);
        let (depth, _) = model.forward(&img, false).unwrap();
        let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
        std::fs::create_dir_all(&dir).unwrap();
        let mut bytes = Vec::new();
        for &v in depth.data.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(dir.join("zero_seed17_depth.bin"), bytes).unwrap();
    }

    #[test]
    fn golden_zero_image_depth_matches() {
        let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("tests/golden/zero_seed17_depth.bin");
        let bytes = std::fs::read(&path).expect("golden file committed at build time");
        let model = DepthModel::new(96, 128, 1.0, 80.0, 17).unwrap();
        let img = ImageTensor::zeros(96, 128);
        let (depth, _) = model.forward(&img, false).unwrap();
        assert_eq!(bytes.len(), depth.data.len() * 4);
        for (i, &v) in depth.data.data().iter().enumerate() {
            let stored = f32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap());
            assert_eq!(stored, v, "pixel {i}");
        }
    }
}
