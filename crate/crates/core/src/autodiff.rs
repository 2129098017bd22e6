//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records the forward pass as a flat list of nodes and replays it
//! backwards to accumulate gradients. The op set is exactly what the networks
//! and attack objectives here need; nothing more.

use crate::tensor::{
    conv2d_backward, conv2d_forward, upsample2x, upsample2x_backward, ConvSpec, Real, Tensor,
};

pub type NodeId = usize;

/// Patch placement used by the tape-level paste op: top-left corner plus a
/// quarter-turn count (clockwise).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PastePlacement {
    pub x: usize,
    pub y: usize,
    pub rotation_k: u8,
}

/// Source coordinate in the unrotated patch for destination (i, j) after
/// `k` clockwise quarter turns of a `side x side` patch.
pub fn rotated_source(side: usize, k: u8, i: usize, j: usize) -> (usize, usize) {
    match k % 4 {
        0 => (i, j),
        1 => (side - 1 - j, i),
        2 => (side - 1 - i, side - 1 - j),
        _ => (j, side - 1 - i),
    }
}

enum Op<T: Real> {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        spec: ConvSpec,
        cols: Vec<T>,
        in_h: usize,
        in_w: usize,
    },
    Relu {
        input: NodeId,
    },
    LeakyRelu {
        input: NodeId,
        slope: T,
    },
    Sigmoid {
        input: NodeId,
    },
    Tanh {
        input: NodeId,
    },
    Upsample2x {
        input: NodeId,
    },
    ConcatChannels {
        a: NodeId,
        b: NodeId,
    },
    /// y = scale * x + offset (offset is a constant tensor)
    AddScaled {
        input: NodeId,
        scale: T,
    },
    Clamp01 {
        input: NodeId,
    },
    /// Paste a rotated square patch over a constant base image.
    PastePatch {
        patch: NodeId,
        placement: PastePlacement,
        side: usize,
    },
    /// Disparity in (0,1) to metric depth via 1/d = s/d_min + (1-s)/d_max.
    DispToDepth {
        input: NodeId,
        d_min: T,
        d_max: T,
    },
    /// Scalar w * ln(1 + var(attacked * clean)); clean is a constant.
    DfaTerm {
        attacked: NodeId,
        clean: Tensor<T>,
        weight: T,
    },
    SumScalars {
        inputs: Vec<NodeId>,
    },
    ScaleScalar {
        input: NodeId,
        factor: T,
    },
    /// Mean squared error against a constant target.
    MseVs {
        input: NodeId,
        target: Tensor<T>,
    },
    /// Mean absolute error against a constant target.
    L1Vs {
        input: NodeId,
        target: Tensor<T>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: NodeId, spec: ConvSpec) -> NodeId {
        let in_h = self.nodes[input].value.shape()[1];
        let in_w = self.nodes[input].value.shape()[2];
        let (out, cols) = conv2d_forward(
            &self.nodes[input].value,
            &self.nodes[weight].value,
            &self.nodes[bias].value,
            &spec,
        );
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
                cols,
                in_h,
                in_w,
            },
            needs,
        )
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = self.nodes[input]
            .value
            .map(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs(input);
        self.push(out, Op::Relu { input }, needs)
    }

    pub fn leaky_relu(&mut self, input: NodeId, slope: T) -> NodeId {
        let out = self.nodes[input]
            .value
            .map(|v| if v > T::zero() { v } else { v * slope });
        let needs = self.needs(input);
        self.push(out, Op::LeakyRelu { input, slope }, needs)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let one = T::one();
        let out = self.nodes[input].value.map(|v| one / (one + (-v).exp()));
        let needs = self.needs(input);
        self.push(out, Op::Sigmoid { input }, needs)
    }

    pub fn tanh(&mut self, input: NodeId) -> NodeId {
        let out = self.nodes[input].value.map(|v| v.tanh());
        let needs = self.needs(input);
        self.push(out, Op::Tanh { input }, needs)
    }

    pub fn upsample2x(&mut self, input: NodeId) -> NodeId {
        let out = upsample2x(&self.nodes[input].value);
        let needs = self.needs(input);
        self.push(out, Op::Upsample2x { input }, needs)
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ca, h, w) = {
            let s = self.nodes[a].value.shape();
            (s[0], s[1], s[2])
        };
        let cb = self.nodes[b].value.shape()[0];
        debug_assert_eq!(&self.nodes[b].value.shape()[1..], &[h, w]);
        let mut data = Vec::with_capacity((ca + cb) * h * w);
        data.extend_from_slice(self.nodes[a].value.data());
        data.extend_from_slice(self.nodes[b].value.data());
        let out = Tensor::new(vec![ca + cb, h, w], data).expect("concat shape");
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::ConcatChannels { a, b }, needs)
    }

    /// y = scale * x + offset, with `offset` treated as a constant.
    pub fn add_scaled(&mut self, input: NodeId, scale: T, offset: &Tensor<T>) -> NodeId {
        debug_assert_eq!(self.nodes[input].value.shape(), offset.shape());
        let x = &self.nodes[input].value;
        let data = x
            .data()
            .iter()
            .zip(offset.data())
            .map(|(&v, &o)| scale * v + o)
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("add_scaled shape");
        let needs = self.needs(input);
        self.push(out, Op::AddScaled { input, scale }, needs)
    }

    pub fn clamp01(&mut self, input: NodeId) -> NodeId {
        let one = T::one();
        let out = self.nodes[input].value.map(|v| v.max(T::zero()).min(one));
        let needs = self.needs(input);
        self.push(out, Op::Clamp01 { input }, needs)
    }

    /// Pastes the (rotated) square patch node over a constant base image.
    /// Gradients flow into the patch only.
    pub fn paste_patch(
        &mut self,
        base: &Tensor<T>,
        patch: NodeId,
        placement: PastePlacement,
    ) -> NodeId {
        let side = self.nodes[patch].value.shape()[1];
        debug_assert_eq!(self.nodes[patch].value.shape()[1], self.nodes[patch].value.shape()[2]);
        let (c, h, w) = (base.shape()[0], base.shape()[1], base.shape()[2]);
        let mut out = base.clone();
        {
            let patch_val = &self.nodes[patch].value;
            let dst = out.data_mut();
            for ch in 0..c {
                for i in 0..side {
                    for j in 0..side {
                        let (si, sj) = rotated_source(side, placement.rotation_k, i, j);
                        dst[ch * h * w + (placement.y + i) * w + (placement.x + j)] =
                            patch_val.data()[ch * side * side + si * side + sj];
                    }
                }
            }
        }
        let needs = self.needs(patch);
        self.push(
            out,
            Op::PastePatch {
                patch,
                placement,
                side,
            },
            needs,
        )
    }

    pub fn disp_to_depth(&mut self, input: NodeId, d_min: T, d_max: T) -> NodeId {
        let num = d_min * d_max;
        let span = d_max - d_min;
        let out = self.nodes[input].value.map(|s| num / (d_min + s * span));
        let needs = self.needs(input);
        self.push(out, Op::DispToDepth { input, d_min, d_max }, needs)
    }

    /// weight * ln(1 + var(attacked ⊙ clean)), clean held constant.
    pub fn dfa_term(&mut self, attacked: NodeId, clean: &Tensor<T>, weight: T) -> NodeId {
        debug_assert_eq!(self.nodes[attacked].value.shape(), clean.shape());
        let product = Tensor::new(
            clean.shape().to_vec(),
            self.nodes[attacked]
                .value
                .data()
                .iter()
                .zip(clean.data())
                .map(|(&a, &c)| a * c)
                .collect(),
        )
        .expect("dfa product shape");
        let v = product.variance_f64();
        let value = Tensor::scalar(T::from_f64(weight.as_f64() * (1.0 + v).ln()));
        let needs = self.needs(attacked);
        self.push(
            value,
            Op::DfaTerm {
                attacked,
                clean: clean.clone(),
                weight,
            },
            needs,
        )
    }

    pub fn sum_scalars(&mut self, inputs: &[NodeId]) -> NodeId {
        let mut acc = 0.0f64;
        for &id in inputs {
            acc += self.nodes[id].value.item().as_f64();
        }
        let needs = inputs.iter().any(|&id| self.needs(id));
        self.push(
            Tensor::scalar(T::from_f64(acc)),
            Op::SumScalars {
                inputs: inputs.to_vec(),
            },
            needs,
        )
    }

    pub fn scale_scalar(&mut self, input: NodeId, factor: T) -> NodeId {
        let out = Tensor::scalar(self.nodes[input].value.item() * factor);
        let needs = self.needs(input);
        self.push(out, Op::ScaleScalar { input, factor }, needs)
    }

    pub fn mse_vs(&mut self, input: NodeId, target: &Tensor<T>) -> NodeId {
        debug_assert_eq!(self.nodes[input].value.shape(), target.shape());
        let n = target.len() as f64;
        let mut acc = 0.0f64;
        for (&x, &t) in self.nodes[input].value.data().iter().zip(target.data()) {
            let d = x.as_f64() - t.as_f64();
            acc += d * d;
        }
        let needs = self.needs(input);
        self.push(
            Tensor::scalar(T::from_f64(acc / n)),
            Op::MseVs {
                input,
                target: target.clone(),
            },
            needs,
        )
    }

    pub fn l1_vs(&mut self, input: NodeId, target: &Tensor<T>) -> NodeId {
        debug_assert_eq!(self.nodes[input].value.shape(), target.shape());
        let n = target.len() as f64;
        let mut acc = 0.0f64;
        for (&x, &t) in self.nodes[input].value.data().iter().zip(target.data()) {
            acc += (x.as_f64() - t.as_f64()).abs();
        }
        let needs = self.needs(input);
        self.push(
            Tensor::scalar(T::from_f64(acc / n)),
            Op::L1Vs {
                input,
                target: target.clone(),
            },
            needs,
        )
    }

    /// Runs the backward pass from a scalar root. Returns one gradient slot
    /// per node; only nodes on a `requires_grad` path are populated.
    pub fn backward(&self, root: NodeId) -> Vec<Option<Tensor<T>>> {
        debug_assert_eq!(self.nodes[root].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root] = Some(Tensor::scalar(T::one()));

        for id in (0..=root).rev() {
            let Some(grad_out) = grads[id].take() else {
                continue;
            };
            if !self.nodes[id].needs_grad {
                continue;
            }
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(grad_out);
                    continue;
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    spec,
                    cols,
                    in_h,
                    in_w,
                } => {
                    let (gi, gw, gb) = conv2d_backward(
                        &grad_out,
                        cols,
                        &self.nodes[*weight].value,
                        spec,
                        *in_h,
                        *in_w,
                    );
                    if self.needs(*input) {
                        accumulate(&mut grads[*input], gi);
                    }
                    if self.needs(*weight) {
                        accumulate(&mut grads[*weight], gw);
                    }
                    if self.needs(*bias) {
                        accumulate(&mut grads[*bias], gb);
                    }
                }
                Op::Relu { input } => {
                    let g = elementwise(&grad_out, &self.nodes[id].value, |g, y| {
                        if y > T::zero() {
                            g
                        } else {
                            T::zero()
                        }
                    });
                    accumulate(&mut grads[*input], g);
                }
                Op::LeakyRelu { input, slope } => {
                    let g = elementwise(&grad_out, &self.nodes[*input].value, |g, x| {
                        if x > T::zero() {
                            g
                        } else {
                            g * *slope
                        }
                    });
                    accumulate(&mut grads[*input], g);
                }
                Op::Sigmoid { input } => {
                    let g = elementwise(&grad_out, &self.nodes[id].value, |g, y| {
                        g * y * (T::one() - y)
                    });
                    accumulate(&mut grads[*input], g);
                }
                Op::Tanh { input } => {
                    let g = elementwise(&grad_out, &self.nodes[id].value, |g, y| {
                        g * (T::one() - y * y)
                    });
                    accumulate(&mut grads[*input], g);
                }
                Op::Upsample2x { input } => {
                    accumulate(&mut grads[*input], upsample2x_backward(&grad_out));
                }
                Op::ConcatChannels { a, b } => {
                    let na = self.nodes[*a].value.len();
                    let shape_a = self.nodes[*a].value.shape().to_vec();
                    let shape_b = self.nodes[*b].value.shape().to_vec();
                    let ga = Tensor::new(shape_a, grad_out.data()[..na].to_vec()).unwrap();
                    let gb = Tensor::new(shape_b, grad_out.data()[na..].to_vec()).unwrap();
                    if self.needs(*a) {
                        accumulate(&mut grads[*a], ga);
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[*b], gb);
                    }
                }
                Op::AddScaled { input, scale } => {
                    let g = grad_out.map(|g| g * *scale);
                    accumulate(&mut grads[*input], g);
                }
                Op::Clamp01 { input } => {
                    // Matches the usual clamp subgradient: zero at and beyond
                    // the bounds.
                    let g = elementwise(&grad_out, &self.nodes[*input].value, |g, pre| {
                        if pre > T::zero() && pre < T::one() {
                            g
                        } else {
                            T::zero()
                        }
                    });
                    accumulate(&mut grads[*input], g);
                }
                Op::PastePatch {
                    patch,
                    placement,
                    side,
                } => {
                    let (c, h, w) = {
                        let s = self.nodes[id].value.shape();
                        (s[0], s[1], s[2])
                    };
                    let mut g = Tensor::zeros(&[c, *side, *side]);
                    for ch in 0..c {
                        for i in 0..*side {
                            for j in 0..*side {
                                let (si, sj) = rotated_source(*side, placement.rotation_k, i, j);
                                g.data_mut()[ch * side * side + si * side + sj] = grad_out.data()
                                    [ch * h * w + (placement.y + i) * w + (placement.x + j)];
                            }
                        }
                    }
                    accumulate(&mut grads[*patch], g);
                }
                Op::DispToDepth { input, d_min, d_max } => {
                    let num = *d_min * *d_max;
                    let span = *d_max - *d_min;
                    let g = elementwise(&grad_out, &self.nodes[*input].value, |g, s| {
                        let denom = *d_min + s * span;
                        g * (-num * span / (denom * denom))
                    });
                    accumulate(&mut grads[*input], g);
                }
                Op::DfaTerm {
                    attacked,
                    clean,
                    weight,
                } => {
                    let a = &self.nodes[*attacked].value;
                    let n = a.len() as f64;
                    let mut sum = 0.0f64;
                    let mut sum_sq = 0.0f64;
                    for (&av, &cv) in a.data().iter().zip(clean.data()) {
                        let f = av.as_f64() * cv.as_f64();
                        sum += f;
                        sum_sq += f * f;
                    }
                    let mean = sum / n;
                    let var = (sum_sq / n - mean * mean).max(0.0);
                    let go = grad_out.item().as_f64();
                    let coeff = go * weight.as_f64() / (1.0 + var) * 2.0 / n;
                    let data = a
                        .data()
                        .iter()
                        .zip(clean.data())
                        .map(|(&av, &cv)| {
                            let f = av.as_f64() * cv.as_f64();
                            T::from_f64(coeff * (f - mean) * cv.as_f64())
                        })
                        .collect();
                    let g = Tensor::new(a.shape().to_vec(), data).unwrap();
                    accumulate(&mut grads[*attacked], g);
                }
                Op::SumScalars { inputs } => {
                    for &i in inputs {
                        if self.needs(i) {
                            accumulate(&mut grads[i], grad_out.clone());
                        }
                    }
                }
                Op::ScaleScalar { input, factor } => {
                    let g = Tensor::scalar(grad_out.item() * *factor);
                    accumulate(&mut grads[*input], g);
                }
                Op::MseVs { input, target } => {
                    let n = T::from_f64(target.len() as f64);
                    let go = grad_out.item();
                    let two = T::from_f64(2.0);
                    let data = self.nodes[*input]
                        .value
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&x, &t)| go * two * (x - t) / n)
                        .collect();
                    let g = Tensor::new(target.shape().to_vec(), data).unwrap();
                    accumulate(&mut grads[*input], g);
                }
                Op::L1Vs { input, target } => {
                    let n = T::from_f64(target.len() as f64);
                    let go = grad_out.item();
                    let data = self.nodes[*input]
                        .value
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&x, &t)| {
                            let s = if x > t {
                                T::one()
                            } else if x < t {
                                -T::one()
                            } else {
                                T::zero()
                            };
                            go * s / n
                        })
                        .collect();
                    let g = Tensor::new(target.shape().to_vec(), data).unwrap();
                    accumulate(&mut grads[*input], g);
                }
            }
        }
        grads
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            debug_assert_eq!(acc.shape(), g.shape());
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
    }
}

fn elementwise<T: Real>(
    grad: &Tensor<T>,
    other: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    debug_assert_eq!(grad.shape(), other.shape());
    let data = grad
        .data()
        .iter()
        .zip(other.data())
        .map(|(&g, &o)| f(g, o))
        .collect();
    Tensor::new(grad.shape().to_vec(), data).unwrap()
}
