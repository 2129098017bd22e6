//! Generator-based perturbation attacks and the FGSM baseline.
//!
//! A small encoder-decoder generator emits a bounded field `alpha` in
//! [-1, 1]; the attacked image is `clamp(I + eta * alpha, 0, 1)`. In global
//! mode the generator input is a frozen noise image, so a single alpha works
//! for every victim input; in image-specific mode the generator maps each
//! image to its own alpha.

use crate::autodiff::{NodeId, Tape};
use crate::config::AttackConfig;
use crate::data::SceneDataset;
use crate::dfa::dfa_loss_node;
use crate::error::{DfaError, Result};
use crate::model::DepthModel;
use crate::nn::{apply_conv, bind_conv, ConvLayer, Sgd};
use crate::tensor::Tensor;
use crate::types::{FeatureBundle, ImageTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub const GENERATOR_ARCH: &str = "pertgen3-v1";
const PERT_MAGIC: &[u8; 8] = b"DFAPERT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationMode {
    Global,
    ImageSpecific,
}

impl PerturbationMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PerturbationMode::Global => "global",
            PerturbationMode::ImageSpecific => "image_specific",
        }
    }
}

/// Where an artifact came from, carried inside the artifact file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub victim_id: String,
    pub mode: String,
    pub seed: u64,
    pub steps: usize,
}

/// A fixed additive perturbation field with its budget.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationArtifact {
    /// 3 x H x W, every entry in [-1, 1].
    pub alpha: Tensor<f32>,
    /// Budget; eta = 0 is the explicit null control.
    pub eta: f32,
    pub provenance: Provenance,
}

impl PerturbationArtifact {
    pub fn new(alpha: Tensor<f32>, eta: f32, provenance: Provenance) -> Result<Self> {
        if alpha.shape().len() != 3 || alpha.shape()[0] != 3 {
            return Err(DfaError::shape("perturbation alpha", &[3, 0, 0], alpha.shape()));
        }
        if !alpha.data().iter().all(|v| v.is_finite() && v.abs() <= 1.0) {
            return Err(DfaError::InvalidArgument(
                "alpha entries must be finite and within [-1, 1]".into(),
            ));
        }
        if !(0.0..=0.5).contains(&eta) {
            return Err(DfaError::InvalidArgument(format!(
                "eta {eta} outside [0, 0.5]"
            )));
        }
        Ok(Self {
            alpha,
            eta,
            provenance,
        })
    }

    pub fn height(&self) -> usize {
        self.alpha.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.alpha.shape()[2]
    }
}

/// One pixel of `clamp(I + eta*alpha, 0, 1)` with the budget enforced
/// exactly: the f64 intermediate is snapped back inside `[i-eta, i+eta]`
/// if the final f32 rounding stepped outside.
fn budgeted_pixel(i: f32, a: f32, eta: f32) -> f32 {
    let v64 = (i as f64 + eta as f64 * a as f64).clamp(0.0, 1.0);
    let mut v = v64 as f32;
    let (i64v, eta64) = (i as f64, eta as f64);
    if (v as f64) - i64v > eta64 {
        v = v.next_down();
    } else if i64v - (v as f64) > eta64 {
        v = v.next_up();
    }
    v.clamp(0.0, 1.0)
}

/// Applies a perturbation artifact: `clamp(I + eta * alpha, 0, 1)` with
/// `|result - I|_inf <= eta` guaranteed per pixel.
pub fn apply_perturbation(image: &ImageTensor, artifact: &PerturbationArtifact) -> Result<ImageTensor> {
    if image.height() != artifact.height() || image.width() != artifact.width() {
        return Err(DfaError::shape(
            "perturbation size",
            &[3, artifact.height(), artifact.width()],
            &[3, image.height(), image.width()],
        ));
    }
    let data: Vec<f32> = image
        .tensor()
        .data()
        .iter()
        .zip(artifact.alpha.data())
        .map(|(&i, &a)| budgeted_pixel(i, a, artifact.eta))
        .collect();
    Ok(ImageTensor::from_tensor_unchecked(
        Tensor::new(image.tensor().shape().to_vec(), data).unwrap(),
    ))
}

/// The perturbation generator network: three stride-2 stages mirrored by
/// three upsample stages, tanh output.
#[derive(Clone, Debug)]
pub struct PerturbationGenerator {
    pub layers: Vec<ConvLayer<f32>>,
    pub mode: PerturbationMode,
    pub input_noise_seed: u64,
    pub input_height: usize,
    pub input_width: usize,
}

const GEN_LAYER_NAMES: [&str; 6] = ["genc1", "genc2", "genc3", "gdec3", "gdec2", "gdec1"];

impl PerturbationGenerator {
    pub fn seeded(
        mode: PerturbationMode,
        input_height: usize,
        input_width: usize,
        seed: u64,
    ) -> Result<Self> {
        if input_height % 8 != 0 || input_width % 8 != 0 {
            return Err(DfaError::InvalidArgument(format!(
                "generator input {input_height}x{input_width} must be divisible by 8"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xA1FA_0001));
        let dims = [(3, 16, 2), (16, 32, 2), (32, 64, 2), (64, 32, 1), (32, 16, 1), (16, 3, 1)];
        let layers = GEN_LAYER_NAMES
            .iter()
            .zip(dims)
            .map(|(name, (cin, cout, stride))| ConvLayer::kaiming(name, cin, cout, stride, &mut rng))
            .collect();
        Ok(Self {
            layers,
            mode,
            input_noise_seed: seed,
            input_height,
            input_width,
        })
    }

    /// The frozen noise input used in global mode.
    pub fn noise_input(&self) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.input_noise_seed.wrapping_add(0xA1FA_0002));
        let len = 3 * self.input_height * self.input_width;
        let data = (0..len).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::new(vec![3, self.input_height, self.input_width], data).unwrap()
    }

    /// Records the generator on a tape; returns (alpha node, parameter binds).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<f32>,
        input: NodeId,
        trainable: bool,
    ) -> (NodeId, Vec<crate::nn::BoundConv>) {
        let bound: Vec<_> = self
            .layers
            .iter()
            .map(|l| bind_conv(tape, l, trainable))
            .collect();
        let slope = 0.1f32;
        let mut x = input;
        for b in bound.iter().take(3) {
            let c = apply_conv(tape, b, x);
            x = tape.leaky_relu(c, slope);
        }
        for (i, b) in bound.iter().enumerate().skip(3) {
            x = tape.upsample2x(x);
            let c = apply_conv(tape, b, x);
            x = if i == 5 {
                tape.tanh(c)
            } else {
                tape.leaky_relu(c, slope)
            };
        }
        (x, bound)
    }

    /// Runs the generator outside any training loop.
    pub fn generate(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        if input.shape() != [3, self.input_height, self.input_width] {
            return Err(DfaError::shape(
                "generator input",
                &[3, self.input_height, self.input_width],
                input.shape(),
            ));
        }
        let mut tape = Tape::<f32>::new();
        let node = tape.constant(input.clone());
        let (alpha, _) = self.forward_on_tape(&mut tape, node, false);
        let out = tape.value(alpha).clone();
        if !out.all_finite() {
            return Err(DfaError::NonFinite("generator output".into()));
        }
        Ok(out)
    }

    /// Alpha for a specific image (image-specific mode) or the frozen noise
    /// (global mode).
    pub fn alpha_for(&self, image: &ImageTensor) -> Result<Tensor<f32>> {
        match self.mode {
            PerturbationMode::Global => self.generate(&self.noise_input()),
            PerturbationMode::ImageSpecific => self.generate(image.tensor()),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }
}

/// Output of perturbation training: the fixed artifact, the generator that
/// produced it, and the recorded loss curve.
pub struct PerturbationTraining {
    pub artifact: PerturbationArtifact,
    pub generator: PerturbationGenerator,
    pub loss_curve: Vec<f64>,
}

/// Optimizes the generator against a frozen victim by gradient descent on
/// the feature-annihilation loss; clean-image features act as the constant
/// pseudo ground truth.
pub fn train_perturbation(
    victim: &DepthModel,
    dataset: &SceneDataset,
    mode: PerturbationMode,
    eta: f32,
    config: &AttackConfig,
    seed: u64,
) -> Result<PerturbationTraining> {
    config.validate()?;
    if eta < 0.0 || eta > 0.5 || !eta.is_finite() {
        return Err(DfaError::InvalidArgument(format!(
            "eta {eta} outside [0, 0.5]"
        )));
    }
    if dataset.is_empty() {
        return Err(DfaError::EmptyDataset);
    }
    victim.check_image(&dataset.images[0])?;

    let mut generator = PerturbationGenerator::seeded(
        mode,
        victim.net.input_height,
        victim.net.input_width,
        seed,
    )?;
    let noise = generator.noise_input();

    // Clean features are constants ("pseudo ground truth"); cache them for
    // the training subset.
    let subset: Vec<usize> = (0..dataset.len().min(config.train_subset)).collect();
    let mut clean_features: Vec<FeatureBundle> = Vec::with_capacity(subset.len());
    for &i in &subset {
        let (_, features) = victim.forward(&dataset.images[i], true)?;
        clean_features.push(features.expect("features requested"));
    }

    let sgd = Sgd {
        lr: config.learning_rate,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xA1FA_0003));
    let mut loss_curve = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let mut grad_acc: Vec<Tensor<f32>> = Vec::new();
        let mut batch_loss = 0.0f64;
        for _ in 0..config.batch_size {
            let pick = subset[rng.gen_range(0..subset.len())];
            let image = &dataset.images[pick];

            let mut tape = Tape::<f32>::new();
            let gen_input = match mode {
                PerturbationMode::Global => tape.constant(noise.clone()),
                PerturbationMode::ImageSpecific => tape.constant(image.tensor().clone()),
            };
            let (alpha, bound) = generator.forward_on_tape(&mut tape, gen_input, true);
            let pre = tape.add_scaled(alpha, eta, image.tensor());
            let attacked = tape.clamp01(pre);
            let nodes = victim.net.forward_on_tape(&mut tape, attacked, false);
            let taps = victim.tap_nodes(&nodes);
            let clean = &clean_features[subset.iter().position(|&s| s == pick).unwrap()];
            let loss = dfa_loss_node(
                &mut tape,
                &taps,
                &crate::dfa::clean_layers_for_training(clean),
                &victim.taps,
            )?;
            let loss_val = tape.value(loss).item() as f64;
            if !loss_val.is_finite() {
                return Err(DfaError::NonFinite(format!(
                    "perturbation training loss at step {step}"
                )));
            }
            batch_loss += loss_val;

            let grads = tape.backward(loss);
            let mut k = 0;
            for b in &bound {
                for id in [b.weight_id, b.bias_id] {
                    // eta = 0 leaves the generator unreachable from the loss
                    let g = grads[id].clone().unwrap_or_else(|| {
                        Tensor::zeros(if k % 2 == 0 {
                            generator.layers[k / 2].weight.shape()
                        } else {
                            generator.layers[k / 2].bias.shape()
                        })
                    });
                    if grad_acc.len() <= k {
                        grad_acc.push(g);
                    } else {
                        for (a, v) in grad_acc[k].data_mut().iter_mut().zip(g.data()) {
                            *a += *v;
                        }
                    }
                    k += 1;
                }
            }
        }
        let inv = 1.0 / config.batch_size as f32;
        for g in &mut grad_acc {
            for v in g.data_mut() {
                *v *= inv;
            }
        }
        let mut params: Vec<&mut Tensor<f32>> = Vec::with_capacity(grad_acc.len());
        for layer in &mut generator.layers {
            params.push(&mut layer.weight);
            params.push(&mut layer.bias);
        }
        sgd.step(&mut params, &grad_acc);
        loss_curve.push(batch_loss / config.batch_size as f64);
    }

    let alpha = match mode {
        PerturbationMode::Global => generator.generate(&noise)?,
        PerturbationMode::ImageSpecific => generator.generate(dataset.images[subset[0]].tensor())?,
    };
    let artifact = PerturbationArtifact::new(
        alpha,
        eta,
        Provenance {
            victim_id: victim.model_id(),
            mode: mode.as_str().to_string(),
            seed,
            steps: config.steps,
        },
    )?;
    Ok(PerturbationTraining {
        artifact,
        generator,
        loss_curve,
    })
}

fn sign_or_zero(g: f32) -> f32 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One-shot gradient-sign attack: ascend the mean squared error between the
/// prediction and the clean prediction (pseudo ground truth).
pub fn fgsm_attack(victim: &DepthModel, image: &ImageTensor, eta: f32) -> Result<ImageTensor> {
    if eta < 0.0 || !eta.is_finite() {
        return Err(DfaError::InvalidArgument(format!("eta {eta} must be >= 0")));
    }
    victim.check_image(image)?;

    let (clean_depth, _) = victim.forward(image, false)?;
    let target = Tensor::new(
        vec![1, clean_depth.height(), clean_depth.width()],
        clean_depth.data.data().to_vec(),
    )?;

    let mut tape = Tape::<f32>::new();
    let input = tape.leaf(image.tensor().clone(), true);
    let nodes = victim.net.forward_on_tape(&mut tape, input, false);
    let depth = tape.disp_to_depth(nodes.disp, victim.d_min, victim.d_max);
    let loss = tape.mse_vs(depth, &target);
    let grads = tape.backward(loss);
    let g = grads[input].as_ref().expect("input gradient");

    let data: Vec<f32> = image
        .tensor()
        .data()
        .iter()
        .zip(g.data())
        .map(|(&i, &gv)| budgeted_pixel(i, sign_or_zero(gv), eta))
        .collect();
    Ok(ImageTensor::from_tensor_unchecked(Tensor::new(
        image.tensor().shape().to_vec(),
        data,
    )?))
}

// --- artifact persistence ----------------------------------------------------

#[derive(Serialize, Deserialize)]
struct PertTrailer {
    schema_version: u32,
    eta: f32,
    provenance: Provenance,
}

/// Preview path: the artifact path with a `.png` extension.
pub fn preview_path(path: &Path) -> PathBuf {
    path.with_extension("png")
}

/// Writes the artifact (magic, dims, f32 HWC data, JSON trailer) plus a
/// human-viewable preview with alpha mapped by (alpha+1)/2.
pub fn save_perturbation(artifact: &PerturbationArtifact, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let (h, w) = (artifact.height(), artifact.width());
    let mut file = std::fs::File::create(path)?;
    file.write_all(PERT_MAGIC)?;
    file.write_all(&(h as u32).to_le_bytes())?;
    file.write_all(&(w as u32).to_le_bytes())?;
    file.write_all(&3u32.to_le_bytes())?;
    // row-major H x W x C
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = artifact.alpha.data()[(c * h + y) * w + x];
                file.write_all(&v.to_le_bytes())?;
            }
        }
    }
    let trailer = PertTrailer {
        schema_version: 1,
        eta: artifact.eta,
        provenance: artifact.provenance.clone(),
    };
    file.write_all(serde_json::to_string(&trailer)?.as_bytes())?;

    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| {
                let a = artifact.alpha.data()[(c * h + y) * w + x];
                (((a + 1.0) / 2.0) * 255.0).round().clamp(0.0, 255.0) as u8
            });
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(preview_path(path))?;
    Ok(())
}

pub fn load_perturbation(path: &Path) -> Result<PerturbationArtifact> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|_| DfaError::Format("perturbation file truncated".into()))?;
    if &magic != PERT_MAGIC {
        return Err(DfaError::Format(format!(
            "bad perturbation magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |file: &mut std::fs::File, what: &str| -> Result<u32> {
        file.read_exact(&mut u32buf)
            .map_err(|_| DfaError::Format(format!("perturbation file truncated at {what}")))?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let h = read_u32(&mut file, "height")? as usize;
    let w = read_u32(&mut file, "width")? as usize;
    let c = read_u32(&mut file, "channels")? as usize;
    if c != 3 {
        return Err(DfaError::Format(format!("expected 3 channels, got {c}")));
    }
    let mut raw = vec![0u8; h * w * 3 * 4];
    file.read_exact(&mut raw)
        .map_err(|_| DfaError::Format("perturbation file truncated in data".into()))?;
    let mut alpha = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let o = ((y * w + x) * 3 + ch) * 4;
                let v = f32::from_le_bytes(raw[o..o + 4].try_into().unwrap());
                alpha.data_mut()[(ch * h + y) * w + x] = v;
            }
        }
    }
    let mut trailer_text = String::new();
    file.read_to_string(&mut trailer_text)
        .map_err(|_| DfaError::Format("perturbation trailer unreadable".into()))?;
    let trailer: PertTrailer = serde_json::from_str(&trailer_text)
        .map_err(|e| DfaError::Format(format!("bad perturbation trailer: {e}")))?;
    if trailer.schema_version != 1 {
        return Err(DfaError::Format(format!(
            "unsupported perturbation schema version {}",
            trailer.schema_version
        )));
    }
    PerturbationArtifact::new(alpha, trailer.eta, trailer.provenance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_scenes;
    use proptest::prelude::*;

    fn test_provenance() -> Provenance {
        Provenance {
            victim_id: "test".into(),
            mode: "global".into(),
            seed: 0,
            steps: 0,
        }
    }

    fn uniform_alpha(h: usize, w: usize, v: f32) -> Tensor<f32> {
        Tensor::full(&[3, h, w], v)
    }

    #[test]
    fn zero_alpha_is_identity() {
        let ds = generate_scenes("A", 1, 32, 32, 0).unwrap();
        let artifact =
            PerturbationArtifact::new(uniform_alpha(32, 32, 0.0), 0.1, test_provenance()).unwrap();
        let out = apply_perturbation(&ds.images[0], &artifact).unwrap();
        assert_eq!(out.tensor().data(), ds.images[0].tensor().data());
    }

    #[test]
    fn clamp_keeps_white_image_white() {
        let white = ImageTensor::from_fn(32, 32, |_, _, _| 1.0).unwrap();
        let artifact =
            PerturbationArtifact::new(uniform_alpha(32, 32, 1.0), 0.1, test_provenance()).unwrap();
        let out = apply_perturbation(&white, &artifact).unwrap();
        assert!(out.tensor().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mid_gray_shifts_down() {
        let gray = ImageTensor::from_fn(32, 32, |_, _, _| 0.5).unwrap();
        let artifact =
            PerturbationArtifact::new(uniform_alpha(32, 32, -1.0), 0.05, test_provenance()).unwrap();
        let out = apply_perturbation(&gray, &artifact).unwrap();
        for &v in out.tensor().data() {
            assert!((v - 0.45).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn size_mismatch_rejected() {
        let ds = generate_scenes("A", 1, 32, 32, 0).unwrap();
        let artifact =
            PerturbationArtifact::new(uniform_alpha(48, 48, 0.0), 0.1, test_provenance()).unwrap();
        assert!(apply_perturbation(&ds.images[0], &artifact).is_err());
    }

    #[test]
    fn artifact_validation() {
        assert!(PerturbationArtifact::new(uniform_alpha(8, 8, 1.5), 0.1, test_provenance()).is_err());
        assert!(PerturbationArtifact::new(uniform_alpha(8, 8, 0.5), 0.6, test_provenance()).is_err());
        assert!(PerturbationArtifact::new(uniform_alpha(8, 8, 0.5), -0.1, test_provenance()).is_err());
        // eta = 0 permitted as the null control
        assert!(PerturbationArtifact::new(uniform_alpha(8, 8, 0.5), 0.0, test_provenance()).is_ok());
    }

    #[test]
    fn generator_output_bounded_and_deterministic() {
        let g = PerturbationGenerator::seeded(PerturbationMode::Global, 32, 32, 9).unwrap();
        assert!(g.param_count() <= 200_000);
        let a1 = g.generate(&g.noise_input()).unwrap();
        let a2 = g.generate(&g.noise_input()).unwrap();
        assert_eq!(a1.data(), a2.data());
        assert!(a1.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn training_tiny_runs_and_is_deterministic() {
        let ds = generate_scenes("A", 4, 32, 32, 5).unwrap();
        let victim = DepthModel::new(32, 32, 1.0, 80.0, 3).unwrap();
        let config = AttackConfig {
            steps: 4,
            batch_size: 1,
            train_subset: 2,
            ..AttackConfig::default()
        };
        let r1 =
            train_perturbation(&victim, &ds, PerturbationMode::Global, 0.05, &config, 11).unwrap();
        let r2 =
            train_perturbation(&victim, &ds, PerturbationMode::Global, 0.05, &config, 11).unwrap();
        assert_eq!(r1.artifact.alpha.data(), r2.artifact.alpha.data());
        assert_eq!(r1.loss_curve, r2.loss_curve);
        assert_eq!(r1.loss_curve.len(), 4);
    }

    #[test]
    fn eta_zero_training_loss_constant() {
        let ds = generate_scenes("A", 2, 32, 32, 5).unwrap();
        let victim = DepthModel::new(32, 32, 1.0, 80.0, 3).unwrap();
        let config = AttackConfig {
            steps: 3,
            batch_size: 1,
            train_subset: 1,
            ..AttackConfig::default()
        };
        let r = train_perturbation(&victim, &ds, PerturbationMode::Global, 0.0, &config, 1).unwrap();
        // attacked == clean, so the loss sits at the clean self-value
        let first = r.loss_curve[0];
        for &v in &r.loss_curve {
            assert_eq!(v, first);
        }
        let out = apply_perturbation(&ds.images[0], &r.artifact).unwrap();
        assert_eq!(out.tensor().data(), ds.images[0].tensor().data());
    }

    #[test]
    fn negative_eta_rejected() {
        let ds = generate_scenes("A", 1, 32, 32, 5).unwrap();
        let victim = DepthModel::new(32, 32, 1.0, 80.0, 3).unwrap();
        assert!(train_perturbation(
            &victim,
            &ds,
            PerturbationMode::Global,
            -0.05,
            &AttackConfig::default(),
            1
        )
        .is_err());
    }

    #[test]
    fn image_specific_mode_trains() {
        let ds = generate_scenes("A", 3, 32, 32, 6).unwrap();
        let victim = DepthModel::new(32, 32, 1.0, 80.0, 4).unwrap();
        let config = AttackConfig {
            steps: 2,
            batch_size: 1,
            train_subset: 3,
            ..AttackConfig::default()
        };
        let r = train_perturbation(
            &victim,
            &ds,
            PerturbationMode::ImageSpecific,
            0.05,
            &config,
            2,
        )
        .unwrap();
        // per-image alphas differ across inputs
        let a0 = r.generator.alpha_for(&ds.images[0]).unwrap();
        let a1 = r.generator.alpha_for(&ds.images[1]).unwrap();
        assert_ne!(a0.data(), a1.data());
    }

    #[test]
    fn fgsm_identity_at_zero_eta_and_sign_structure() {
        let ds = generate_scenes("A", 1, 32, 32, 8).unwrap();
        let victim = DepthModel::new(32, 32, 1.0, 80.0, 2).unwrap();
        let same = fgsm_attack(&victim, &ds.images[0], 0.0).unwrap();
        assert_eq!(same.tensor().data(), ds.images[0].tensor().data());

        let eta = 0.05f32;
        let attacked = fgsm_attack(&victim, &ds.images[0], eta).unwrap();
        let mut seen_moved = false;
        for (&a, &i) in attacked.tensor().data().iter().zip(ds.images[0].tensor().data()) {
            let diff = (a as f64 - i as f64).abs();
            assert!(diff <= eta as f64 + 1e-12);
            // away from the clamp boundary the step is 0 or full eta
            if i > 0.1 && i < 0.9 && diff > 0.0 {
                assert!((diff - eta as f64).abs() < 1e-6, "diff {diff}");
                seen_moved = true;
            }
        }
        assert!(seen_moved, "gradient should move at least one pixel");
    }

    #[test]
    fn roundtrip_is_bitwise_and_truncation_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pert");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let alpha = Tensor::new(
            vec![3, 8, 8],
            (0..192).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let artifact = PerturbationArtifact::new(alpha, 0.05, test_provenance()).unwrap();
        save_perturbation(&artifact, &path).unwrap();
        let loaded = load_perturbation(&path).unwrap();
        assert_eq!(loaded.alpha.data(), artifact.alpha.data());
        assert_eq!(loaded.eta, artifact.eta);
        assert_eq!(loaded.provenance, artifact.provenance);
        assert!(preview_path(&path).exists());

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..40]).unwrap();
        assert!(matches!(load_perturbation(&path), Err(DfaError::Format(_))));
    }

    #[test]
    fn preview_of_zero_alpha_is_mid_gray() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zero.pert");
        let artifact =
            PerturbationArtifact::new(uniform_alpha(8, 8, 0.0), 0.05, test_provenance()).unwrap();
        save_perturbation(&artifact, &path).unwrap();
        let img = image::open(preview_path(&path)).unwrap().to_rgb8();
        for p in img.pixels() {
            assert_eq!(p.0, [128, 128, 128]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        /// Budget invariant: per-pixel deviation never exceeds eta and the
        /// result stays a valid image.
        #[test]
        fn budget_holds_exactly(seed in 0u64..500, eta_milli in 0u32..500) {
            let eta = eta_milli as f32 / 1000.0;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = ImageTensor::from_fn(16, 16, |_, _, _| rng.gen_range(0.0..=1.0)).unwrap();
            let alpha = Tensor::new(
                vec![3, 16, 16],
                (0..3 * 256).map(|_| rng.gen_range(-1.0f32..=1.0)).collect(),
            ).unwrap();
            let artifact = PerturbationArtifact::new(alpha, eta, test_provenance()).unwrap();
            let out = apply_perturbation(&img, &artifact).unwrap();
            for (&o, &i) in out.tensor().data().iter().zip(img.tensor().data()) {
                prop_assert!((o as f64 - i as f64).abs() <= eta as f64);
                prop_assert!((0.0..=1.0).contains(&o));
            }
        }
    }
}
