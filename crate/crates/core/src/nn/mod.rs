//! A small CPU network engine: dense/convolutional layers with exact
//! backward passes, assembled into feed-forward graphs.
//!
//! Everything is `f64` and deterministic: parallelism only spans batch
//! samples with outputs written to disjoint slices, and every reduction
//! runs in a fixed order, so identical inputs reproduce identical results
//! bit for bit.

pub mod layers;
pub mod loss;

use ndarray::{Array2, Array4, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
pub use layers::{
    BatchNorm2d, Conv2d, Dropout, Flatten, GlobalAvgPool, Inception, Layer, Linear, MaxPool2d,
    ReLU,
};

/// Forward mode. Train mode samples dropout and uses batch statistics;
/// eval mode is deterministic and uses running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Activation tensor passed between layers.
#[derive(Debug, Clone)]
pub enum Act {
    /// (batch, channels, height, width)
    Spatial(Array4<f64>),
    /// (batch, features)
    Flat(Array2<f64>),
}

impl Act {
    pub fn batch_len(&self) -> usize {
        match self {
            Act::Spatial(a) => a.shape()[0],
            Act::Flat(a) => a.shape()[0],
        }
    }

    pub fn into_spatial(self) -> Array4<f64> {
        match self {
            Act::Spatial(a) => a,
            Act::Flat(_) => panic!("expected spatial activation"),
        }
    }

    pub fn into_flat(self) -> Array2<f64> {
        match self {
            Act::Flat(a) => a,
            Act::Spatial(_) => panic!("expected flat activation"),
        }
    }
}

/// Static activation shape (without the batch dimension).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Spatial(usize, usize, usize),
    Flat(usize),
}

impl Shape {
    pub fn describe(&self) -> String {
        match self {
            Shape::Spatial(c, h, w) => format!("{c}x{h}x{w}"),
            Shape::Flat(f) => format!("{f}"),
        }
    }
}

/// A trainable tensor with its layer-group tag. Gradients are allocated
/// on first use so forward-only networks stay lean.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: String,
    pub values: ArrayD<f64>,
    pub grad: Option<ArrayD<f64>>,
}

impl Param {
    pub fn new(name: impl Into<String>, group: impl Into<String>, values: ArrayD<f64>) -> Self {
        Param {
            name: name.into(),
            group: group.into(),
            values,
            grad: None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn grad_mut(&mut self) -> &mut ArrayD<f64> {
        let shape = self.values.raw_dim();
        self.grad.get_or_insert_with(|| ArrayD::zeros(shape))
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.fill(0.0);
        }
    }
}

/// Xavier (Glorot) uniform fill: variance `2 / (fan_in + fan_out)`.
pub fn xavier_fill(values: &mut ArrayD<f64>, rng: &mut ChaCha12Rng) {
    let (fan_in, fan_out) = fans_of(values.shape());
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in values.iter_mut() {
        *v = rng.random_range(-a..a);
    }
}

/// (fan_in, fan_out) for a weight tensor shape.
pub fn fans_of(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        4 => {
            let (c_out, c_in, kh, kw) = (shape[0], shape[1], shape[2], shape[3]);
            (c_in * kh * kw, c_out * kh * kw)
        }
        2 => (shape[0], shape[1]),
        _ => {
            let n = shape.iter().product::<usize>().max(1);
            (n, n)
        }
    }
}

pub fn xavier_param(
    name: &str,
    group: &str,
    shape: &[usize],
    rng: &mut ChaCha12Rng,
) -> Param {
    let mut values = ArrayD::zeros(IxDyn(shape));
    xavier_fill(&mut values, rng);
    Param::new(name, group, values)
}

pub fn const_param(name: &str, group: &str, shape: &[usize], value: f64) -> Param {
    let values = ArrayD::from_elem(IxDyn(shape), value);
    Param::new(name, group, values)
}

/// Per-call forward context: mode, dropout RNG, and whether layers should
/// keep the caches the backward pass needs.
pub struct ForwardCtx<'a> {
    pub mode: Mode,
    pub rng: Option<&'a mut ChaCha12Rng>,
    pub record: bool,
}

/// A feed-forward network ending in a 2-way classifier head.
///
/// Inputs are `(batch, 3, side, side)` intensities in `[0, 1]`; the stored
/// per-channel means are subtracted on entry, identically in train and
/// eval mode. Forward returns pre-softmax class scores and the softmax
/// probabilities.
pub struct Network {
    pub arch_name: String,
    pub input_side: usize,
    pub channel_means: [f64; 3],
    layers: Vec<Layer>,
}

impl Network {
    pub fn from_layers(arch_name: &str, input_side: usize, layers: Vec<Layer>) -> Self {
        Network {
            arch_name: arch_name.to_string(),
            input_side,
            channel_means: [0.0; 3],
            layers,
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Forward pass; `record` keeps layer caches so [`Network::backward`]
    /// can run afterwards. Returns (logits, probabilities).
    pub fn forward(
        &mut self,
        input: &Array4<f64>,
        mode: Mode,
        rng: Option<&mut ChaCha12Rng>,
        record: bool,
    ) -> (Array2<f64>, Array2<f64>) {
        let mut x = input.clone();
        for (c, &mean) in self.channel_means.iter().enumerate() {
            if mean != 0.0 {
                x.index_axis_mut(ndarray::Axis(1), c).mapv_inplace(|v| v - mean);
            }
        }
        let mut ctx = ForwardCtx { mode, rng, record };
        let mut act = Act::Spatial(x);
        for layer in &mut self.layers {
            act = layer.forward(act, &mut ctx);
        }
        let logits = act.into_flat();
        let probs = loss::softmax(&logits);
        (logits, probs)
    }

    /// Backpropagates from a gradient on the logits down to the input.
    /// Requires the preceding forward to have been recorded.
    pub fn backward(&mut self, dlogits: Array2<f64>) -> Array4<f64> {
        let mut grad = Act::Flat(dlogits);
        for layer in self.layers.iter_mut().rev() {
            grad = layer.backward(grad);
        }
        grad.into_spatial()
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        for layer in &self.layers {
            layer.visit_params(f);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for layer in &mut self.layers {
            layer.visit_params_mut(f);
        }
    }

    /// Non-trainable state (batch-norm running statistics), name + values.
    pub fn visit_buffers(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for layer in &self.layers {
            layer.visit_buffers(f);
        }
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for layer in &mut self.layers {
            layer.visit_buffers_mut(f);
        }
    }

    pub fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }

    /// Distinct layer groups in construction order.
    pub fn groups(&self) -> Vec<String> {
        let mut seen = Vec::new();
        self.visit_params(&mut |p| {
            if !seen.contains(&p.group) {
                seen.push(p.group.clone());
            }
        });
        seen
    }

    /// Parameter count per group, in group order.
    pub fn group_param_counts(&self) -> Vec<(String, usize)> {
        let mut counts: Vec<(String, usize)> = Vec::new();
        self.visit_params(&mut |p| {
            match counts.iter_mut().find(|(g, _)| *g == p.group) {
                Some((_, n)) => *n += p.len(),
                None => counts.push((p.group.clone(), p.len())),
            }
        });
        counts
    }

    /// Static (layer label, output shape) trace from the input shape.
    pub fn shape_report(&self) -> Vec<(String, Shape)> {
        let mut shape = Shape::Spatial(3, self.input_side, self.input_side);
        let mut out = Vec::new();
        for layer in &self.layers {
            shape = layer.out_shape(&shape);
            out.push((layer.label(), shape));
        }
        out
    }

    /// Loads tensors by name from `(name, values)` pairs; returns the list
    /// of parameter names that were assigned.
    pub fn load_tensors(
        &mut self,
        tensors: &std::collections::HashMap<String, ArrayD<f64>>,
    ) -> Result<Vec<String>> {
        let mut loaded = Vec::new();
        let mut err: Option<Error> = None;
        self.visit_params_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            if let Some(t) = tensors.get(&p.name) {
                if t.shape() != p.values.shape() {
                    err = Some(Error::Model(format!(
                        "tensor {} has shape {:?}, expected {:?}",
                        p.name,
                        t.shape(),
                        p.values.shape()
                    )));
                    return;
                }
                p.values.assign(t);
                loaded.push(p.name.clone());
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        let mut buf_err: Option<Error> = None;
        self.visit_buffers_mut(&mut |name, values| {
            if buf_err.is_some() {
                return;
            }
            if let Some(t) = tensors.get(name) {
                if t.len() != values.len() {
                    buf_err = Some(Error::Model(format!(
                        "buffer {} has {} values, expected {}",
                        name,
                        t.len(),
                        values.len()
                    )));
                    return;
                }
                for (dst, src) in values.iter_mut().zip(t.iter()) {
                    *dst = *src;
                }
            }
        });
        match buf_err {
            Some(e) => Err(e),
            None => Ok(loaded),
        }
    }

    /// Text summary: layer trace, groups with parameter counts, and the
    /// multiplier attached to each group (1 when no scheme is given).
    pub fn summary(&self, multipliers: Option<&[(String, f64)]>) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "architecture: {} (input 3x{}x{})\n",
            self.arch_name, self.input_side, self.input_side
        ));
        out.push_str(&format!("parameters: {}\n\nlayers:\n", self.param_count()));
        for (label, shape) in self.shape_report() {
            out.push_str(&format!("  {:<44} -> {}\n", label, shape.describe()));
        }
        out.push_str("\ngroups:\n");
        for (group, count) in self.group_param_counts() {
            let mult = multipliers
                .and_then(|m| m.iter().find(|(g, _)| *g == group))
                .map(|(_, v)| *v)
                .unwrap_or(1.0);
            out.push_str(&format!("  {:<24} {:>12} params  lr_mult {}\n", group, count, mult));
        }
        out
    }
}
