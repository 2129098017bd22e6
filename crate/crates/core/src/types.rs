//! Core domain types shared across the toolkit: RGB images in `[0,1]` and
//! metric depth maps with validity masks.

use crate::error::{DfaError, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// RGB image with values in `[0,1]`, stored channel-major (3 x H x W).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Tensor<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, chw: Vec<f32>) -> Result<Self> {
        if chw.len() != 3 * height * width {
            return Err(DfaError::shape(
                "image construction",
                &[3, height, width],
                &[chw.len()],
            ));
        }
        if !chw.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(DfaError::InvalidArgument(
                "image values must be finite and within [0,1]".into(),
            ));
        }
        Ok(Self {
            data: Tensor::new(vec![3, height, width], chw)?,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Tensor::zeros(&[3, height, width]),
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f32) -> Result<Self> {
        let mut chw = vec![0.0; 3 * height * width];
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    chw[c * height * width + y * width + x] = f(c, y, x);
                }
            }
        }
        Self::new(height, width, chw)
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data.data()[(c * self.height() + y) * self.width() + x]
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.data
    }

    /// Wraps an already-validated CHW tensor. Clamps nothing; caller
    /// guarantees the range invariant.
    pub(crate) fn from_tensor_unchecked(data: Tensor<f32>) -> Self {
        debug_assert_eq!(data.shape()[0], 3);
        Self { data }
    }
}

/// Dense metric depth map with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub data: Tensor<f32>,
    pub valid_mask: Vec<bool>,
    pub d_min: f32,
    pub d_max: f32,
}

impl DepthMap {
    pub fn new(
        height: usize,
        width: usize,
        data: Vec<f32>,
        valid_mask: Vec<bool>,
        d_min: f32,
        d_max: f32,
    ) -> Result<Self> {
        if data.len() != height * width || valid_mask.len() != height * width {
            return Err(DfaError::shape(
                "depth map construction",
                &[height, width],
                &[data.len()],
            ));
        }
        if !(d_min > 0.0 && d_max > d_min) {
            return Err(DfaError::InvalidArgument(
                "depth bounds must satisfy 0 < d_min < d_max".into(),
            ));
        }
        for (v, &ok) in data.iter().zip(&valid_mask) {
            if ok && !(v.is_finite() && *v >= d_min && *v <= d_max) {
                return Err(DfaError::InvalidArgument(format!(
                    "valid depth {v} outside [{d_min}, {d_max}]"
                )));
            }
        }
        Ok(Self {
            data: Tensor::new(vec![height, width], data)?,
            valid_mask,
            d_min,
            d_max,
        })
    }

    pub fn full_valid(height: usize, width: usize, data: Vec<f32>, d_min: f32, d_max: f32) -> Result<Self> {
        let mask = vec![true; height * width];
        Self::new(height, width, data, mask, d_min, d_max)
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data.data()[y * self.width() + x]
    }

    pub fn valid_count(&self) -> usize {
        self.valid_mask.iter().filter(|&&v| v).count()
    }
}

/// Which layers of a depth network are exposed to the attack loss, with
/// per-layer weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TapSpec {
    pub layer_ids: Vec<String>,
    pub weights: Vec<f32>,
}

impl TapSpec {
    pub fn uniform(layer_ids: Vec<String>) -> Self {
        let weights = vec![1.0; layer_ids.len()];
        Self { layer_ids, weights }
    }

    pub fn weight_of(&self, layer_id: &str) -> Option<f32> {
        self.layer_ids
            .iter()
            .position(|id| id == layer_id)
            .map(|i| self.weights[i])
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_ids.len() != self.weights.len() {
            return Err(DfaError::InvalidArgument(
                "tap spec layer/weight length mismatch".into(),
            ));
        }
        for (i, id) in self.layer_ids.iter().enumerate() {
            if self.layer_ids[i + 1..].contains(id) {
                return Err(DfaError::InvalidArgument(format!(
                    "duplicate tap layer id {id:?}"
                )));
            }
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(DfaError::InvalidArgument(
                "tap weights must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Ordered set of tapped activations captured during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub layers: Vec<(String, Tensor<f32>)>,
}

impl FeatureBundle {
    pub fn layer_ids(&self) -> Vec<&str> {
        self.layers.iter().map(|(id, _)| id.as_str()).collect()
    }

    pub fn get(&self, layer_id: &str) -> Option<&Tensor<f32>> {
        self.layers
            .iter()
            .find(|(id, _)| id == layer_id)
            .map(|(_, t)| t)
    }
}
