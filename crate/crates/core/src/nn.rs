//! Convolution layers, parameter initialization, and optimizers.

use crate::autodiff::{NodeId, Tape};
use crate::tensor::{ConvSpec, Real, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A named 3x3 convolution with bias.
#[derive(Clone, Debug)]
pub struct ConvLayer<T: Real = f32> {
    pub name: String,
    pub spec: ConvSpec,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl ConvLayer<f32> {
    /// Kaiming-uniform initialization for ReLU fan-in.
    pub fn kaiming(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let spec = ConvSpec {
            in_channels,
            out_channels,
            kernel: 3,
            stride,
            padding: 1,
        };
        let fan_in = (in_channels * 9) as f32;
        let bound = (6.0 / fan_in).sqrt();
        let len = out_channels * in_channels * 9;
        let data = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
        Self {
            name: name.to_string(),
            spec,
            weight: Tensor::new(vec![out_channels, in_channels, 3, 3], data).unwrap(),
            bias: Tensor::zeros(&[out_channels]),
        }
    }
}

impl<T: Real> ConvLayer<T> {
    pub fn cast<U: Real>(&self) -> ConvLayer<U> {
        ConvLayer {
            name: self.name.clone(),
            spec: self.spec,
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// A convolution layer's parameters registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundConv {
    pub weight_id: NodeId,
    pub bias_id: NodeId,
    pub spec: ConvSpec,
}

pub fn bind_conv<T: Real>(tape: &mut Tape<T>, layer: &ConvLayer<T>, trainable: bool) -> BoundConv {
    BoundConv {
        weight_id: tape.leaf(layer.weight.clone(), trainable),
        bias_id: tape.leaf(layer.bias.clone(), trainable),
        spec: layer.spec,
    }
}

pub fn apply_conv<T: Real>(tape: &mut Tape<T>, bound: &BoundConv, input: NodeId) -> NodeId {
    tape.conv2d(input, bound.weight_id, bound.bias_id, bound.spec)
}

/// Plain gradient descent.
#[derive(Clone, Copy, Debug)]
pub struct Sgd {
    pub lr: f32,
}

impl Sgd {
    pub fn step(&self, params: &mut [&mut Tensor<f32>], grads: &[Tensor<f32>]) {
        debug_assert_eq!(params.len(), grads.len());
        for (p, g) in params.iter_mut().zip(grads) {
            debug_assert_eq!(p.shape(), g.shape());
            for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                *pv -= self.lr * gv;
            }
        }
    }
}

/// Adaptive-moment estimation with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step_count: u32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<f32>], grads: &[Tensor<f32>]) {
        debug_assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        self.step_count += 1;
        let t = self.step_count as f32;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..g.len() {
                let gv = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gv;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gv * gv;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.data_mut()[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn kaiming_bounds_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = ConvLayer::kaiming("c", 8, 16, 2, &mut rng);
        let bound = (6.0f32 / 72.0).sqrt();
        assert!(a.weight.data().iter().all(|w| w.abs() <= bound));
        assert!(a.bias.data().iter().all(|&b| b == 0.0));
        let mut rng2 = ChaCha8Rng::seed_from_u64(5);
        let b = ConvLayer::kaiming("c", 8, 16, 2, &mut rng2);
        assert_eq!(a.weight.data(), b.weight.data());
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // minimize (x - 3)^2 elementwise
        let mut x = Tensor::<f32>::zeros(&[4]);
        let mut adam = Adam::new(0.1);
        for _ in 0..500 {
            let grad = Tensor::new(
                vec![4],
                x.data().iter().map(|&v| 2.0 * (v - 3.0)).collect(),
            )
            .unwrap();
            adam.step(&mut [&mut x], &[grad]);
        }
        for &v in x.data() {
            assert!((v - 3.0).abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn sgd_descends() {
        let mut x = Tensor::new(vec![1], vec![10.0f32]).unwrap();
        let sgd = Sgd { lr: 0.1 };
        for _ in 0..100 {
            let grad = Tensor::new(vec![1], vec![2.0 * x.data()[0]]).unwrap();
            sgd.step(&mut [&mut x], &[grad]);
        }
        assert!(x.data()[0].abs() < 1e-4);
    }
}
