//! A small tanh MLP with exact backpropagation.
//!
//! Layer `l` (1-based) is stored as `fc{l}.weight` with shape `[out, in]`
//! (row-major) and `fc{l}.bias` with shape `[out]`. Hidden layers use tanh,
//! the output layer is linear. A task reads the softmax over its own block of
//! outputs (its head).

use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MdmError, Result};
use crate::params::{LayerLayout, ParameterVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    /// Squared error between the head's softmax and the one-hot label.
    SquaredError,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
struct LayerSlots {
    weight: usize,
    bias: usize,
    fan_in: usize,
    fan_out: usize,
}

/// Parameter offsets for each layer, resolved once from the layout.
#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    layout: Arc<LayerLayout>,
    slots: Vec<LayerSlots>,
}

impl MlpSpec {
    /// `input -> 32 -> 32 -> outputs`.
    pub fn standard(input: usize, outputs: usize) -> Self {
        Self {
            widths: vec![input, 32, 32, outputs],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 3 {
            return Err(MdmError::invalid("an MLP needs at least one hidden layer"));
        }
        if self.widths.contains(&0) {
            return Err(MdmError::invalid("layer widths must be positive"));
        }
        Ok(())
    }

    pub fn layer_count(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn layout(&self) -> Result<LayerLayout> {
        self.validate()?;
        let mut shapes = Vec::new();
        for l in 1..self.widths.len() {
            shapes.push((format!("fc{l}.weight"), vec![self.widths[l], self.widths[l - 1]]));
            shapes.push((format!("fc{l}.bias"), vec![self.widths[l]]));
        }
        // same order as a flattened checkpoint
        shapes.sort();
        LayerLayout::from_shapes(shapes)
    }

    pub fn build(&self) -> Result<Mlp> {
        let layout = Arc::new(self.layout()?);
        let slots = (1..self.widths.len())
            .map(|l| LayerSlots {
                weight: layout.get(&format!("fc{l}.weight")).expect("built above").offset,
                bias: layout.get(&format!("fc{l}.bias")).expect("built above").offset,
                fan_in: self.widths[l - 1],
                fan_out: self.widths[l],
            })
            .collect();
        Ok(Mlp {
            spec: self.clone(),
            layout,
            slots,
        })
    }
}

/// Activations of one forward pass; `acts[0]` is the input and the last
/// entry holds the logits.
pub struct Trace {
    acts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn logits(&self) -> &[f64] {
        self.acts.last().expect("non-empty")
    }
}

/// Softmax over `z` with the max shifted out.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `log(sum(exp(z)))`, computed stably.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Loss of one example and its gradient with respect to the head logits.
pub fn head_loss(kind: LossKind, z: &[f64], label: usize) -> (f64, Vec<f64>) {
    let p = softmax(z);
    match kind {
        LossKind::CrossEntropy => {
            let loss = log_sum_exp(z) - z[label];
            let mut g = p;
            g[label] -= 1.0;
            (loss, g)
        }
        LossKind::SquaredError => {
            let r: Vec<f64> = p
                .iter()
                .enumerate()
                .map(|(c, pc)| pc - f64::from(u8::from(c == label)))
                .collect();
            let loss = r.iter().map(|x| x * x).sum();
            let s: f64 = r.iter().zip(&p).map(|(a, b)| a * b).sum();
            let g = p.iter().zip(&r).map(|(pk, rk)| 2.0 * pk * (rk - s)).collect();
            (loss, g)
        }
    }
}

impl Mlp {
    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Arc<LayerLayout> {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.total_len()
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(&self, seed: u64) -> ParameterVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; self.param_count()];
        // fixed layer order keeps the draw sequence independent of layout sorting
        for s in &self.slots {
            let limit = (6.0 / (s.fan_in + s.fan_out) as f64).sqrt();
            for v in &mut values[s.weight..s.weight + s.fan_in * s.fan_out] {
                *v = rng.random_range(-limit..limit);
            }
        }
        ParameterVector::new(values, self.layout.clone()).expect("finite by construction")
    }

    pub fn check_params(&self, theta: &[f64]) -> Result<()> {
        crate::error::check_len(theta.len(), self.param_count())
    }

    pub fn forward(&self, theta: &[f64], x: &[f64]) -> Trace {
        debug_assert_eq!(x.len(), self.spec.input_width());
        let mut acts = Vec::with_capacity(self.slots.len() + 1);
        acts.push(x.to_vec());
        let last = self.slots.len() - 1;
        for (l, s) in self.slots.iter().enumerate() {
            let input = &acts[l];
            let w = &theta[s.weight..s.weight + s.fan_in * s.fan_out];
            let b = &theta[s.bias..s.bias + s.fan_out];
            let mut out = Vec::with_capacity(s.fan_out);
            for o in 0..s.fan_out {
                let row = &w[o * s.fan_in..(o + 1) * s.fan_in];
                let mut z = b[o];
                for (wi, xi) in row.iter().zip(input) {
                    z += wi * xi;
                }
                out.push(if l == last { z } else { z.tanh() });
            }
            acts.push(out);
        }
        Trace { acts }
    }

    pub fn logits(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        self.forward(theta, x).acts.pop().expect("non-empty")
    }

    /// Adds `d loss / d theta` to `grad` given `d loss / d logits` for one
    /// example.
    pub fn backward(&self, theta: &[f64], trace: &Trace, dlogits: &[f64], grad: &mut [f64]) {
        let mut delta = dlogits.to_vec();
        for l in (0..self.slots.len()).rev() {
            let s = self.slots[l];
            let input = &trace.acts[l];
            for o in 0..s.fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                grad[s.bias + o] += d;
                let row = &mut grad[s.weight + o * s.fan_in..s.weight + (o + 1) * s.fan_in];
                for (g, xi) in row.iter_mut().zip(input) {
                    *g += d * xi;
                }
            }
            if l == 0 {
                break;
            }
            let w = &theta[s.weight..s.weight + s.fan_in * s.fan_out];
            let mut prev = vec![0.0; s.fan_in];
            for o in 0..s.fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (p, wi) in prev.iter_mut().zip(&w[o * s.fan_in..(o + 1) * s.fan_in]) {
                    *p += d * wi;
                }
            }
            // tanh' = 1 - a^2 on the hidden activation feeding this layer
            for (p, a) in prev.iter_mut().zip(input) {
                *p *= 1.0 - a * a;
            }
            delta = prev;
        }
    }

    /// Mean loss over `indices` of (`inputs`, `labels`) on `head`, plus the
    /// mean gradient when `grad` is given.
    pub fn batch_loss(
        &self,
        theta: &[f64],
        inputs: &[Vec<f64>],
        labels: &[usize],
        indices: impl Iterator<Item = usize>,
        head: Range<usize>,
        kind: LossKind,
        mut grad: Option<&mut [f64]>,
    ) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        let mut dlogits = vec![0.0; self.spec.output_width()];
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        for i in indices {
            let trace = self.forward(theta, &inputs[i]);
            let (loss, dz) = head_loss(kind, &trace.logits()[head.clone()], labels[i]);
            total += loss;
            count += 1;
            if let Some(g) = grad.as_deref_mut() {
                dlogits.iter_mut().for_each(|v| *v = 0.0);
                dlogits[head.clone()].copy_from_slice(&dz);
                self.backward(theta, &trace, &dlogits, g);
            }
        }
        let n = count.max(1) as f64;
        if let Some(g) = grad {
            g.iter_mut().for_each(|v| *v /= n);
        }
        total / n
    }
}
