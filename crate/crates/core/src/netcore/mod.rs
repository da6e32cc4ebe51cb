//! The multimodal network.
//!
//! Each modality `k` has an encoder `g_k` (affine → ReLU → affine) producing an
//! embedding of width `L`, and a head `h_k` (affine `L → C`). A joint head
//! `h` maps the concatenated embeddings (`M·L`) to `C` logits. Gradients are
//! derived by hand per layer; see [`backward`].

mod adamw;
mod checkpoint;
mod forward;

pub use adamw::{AdamWConfig, AdamWState};
pub use checkpoint::{Checkpoint, CHECKPOINT_SCHEMA_VERSION};
pub use forward::{
    backward, backward_heads, forward, forward_heads, softmax_backward, ForwardCache, HeadCache, ModalityCache,
    Upstream,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Mat64;
use crate::rng::{SeededRng, Stream};

/// Layer widths of a [`ModelParams`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input_dims: Vec<usize>,
    pub hidden: usize,
    pub embed: usize,
    pub classes: usize,
}

impl ModelDims {
    pub fn new(input_dims: Vec<usize>, hidden: usize, embed: usize, classes: usize) -> Self {
        ModelDims {
            input_dims,
            hidden,
            embed,
            classes,
        }
    }

    pub fn num_modalities(&self) -> usize {
        self.input_dims.len()
    }

    /// Width of the joint head's input.
    pub fn joint_width(&self) -> usize {
        self.embed * self.num_modalities()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dims.is_empty() {
            return Err(Error::Config("model needs at least one modality".into()));
        }
        if self.input_dims.contains(&0) || self.hidden == 0 || self.embed == 0 || self.classes == 0 {
            return Err(Error::Config(format!(
                "all model dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Affine map `y = W x + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Mat64,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: Mat64::zeros(outputs, inputs),
            bias: vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    #[inline]
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weight.affine(x, &self.bias)
    }

    /// Row-wise application to a batch.
    pub fn apply_batch(&self, xs: &Mat64) -> Mat64 {
        let mut out = Mat64::zeros(xs.rows(), self.outputs());
        for i in 0..xs.rows() {
            out.row_mut(i).copy_from_slice(&self.apply(xs.row(i)));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub hidden: Linear,
    pub output: Linear,
}

/// All trainable parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub encoders: Vec<Encoder>,
    pub heads: Vec<Linear>,
    pub joint: Linear,
}

/// Gradients share the parameter layout.
pub type GradBuffer = ModelParams;

impl ModelParams {
    pub fn zeros(dims: &ModelDims) -> Self {
        ModelParams {
            dims: dims.clone(),
            encoders: dims
                .input_dims
                .iter()
                .map(|&d| Encoder {
                    hidden: Linear::zeros(d, dims.hidden),
                    output: Linear::zeros(dims.hidden, dims.embed),
                })
                .collect(),
            heads: (0..dims.num_modalities())
                .map(|_| Linear::zeros(dims.embed, dims.classes))
                .collect(),
            joint: Linear::zeros(dims.joint_width(), dims.classes),
        }
    }

    /// Parameter slices in a fixed order: per-modality encoder (hidden W, b,
    /// output W, b), then per-modality head (W, b), then joint head (W, b).
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for e in &self.encoders {
            out.extend([
                e.hidden.weight.data(),
                &e.hidden.bias[..],
                e.output.weight.data(),
                &e.output.bias[..],
            ]);
        }
        for h in &self.heads {
            out.extend([h.weight.data(), &h.bias[..]]);
        }
        out.extend([self.joint.weight.data(), &self.joint.bias[..]]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for e in &mut self.encoders {
            out.push(e.hidden.weight.data_mut());
            out.push(&mut e.hidden.bias[..]);
            out.push(e.output.weight.data_mut());
            out.push(&mut e.output.bias[..]);
        }
        for h in &mut self.heads {
            out.push(h.weight.data_mut());
            out.push(&mut h.bias[..]);
        }
        out.push(self.joint.weight.data_mut());
        out.push(&mut self.joint.bias[..]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::Dimension(format!(
                "{} values for {} parameters",
                values.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&values[off..off + t.len()]);
            off += t.len();
        }
        Ok(())
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.dims == other.dims
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(dims: &ModelDims, seed: u64) -> Result<ModelParams> {
    dims.validate()?;
    let mut rng = SeededRng::new(seed, Stream::Init);
    let mut params = ModelParams::zeros(dims);
    let mut fill = |layer: &mut Linear| {
        let limit = glorot_limit(layer.inputs(), layer.outputs());
        for w in layer.weight.data_mut() {
            *w = rng.uniform_range(-limit, limit);
        }
    };
    for e in &mut params.encoders {
        fill(&mut e.hidden);
        fill(&mut e.output);
    }
    for h in &mut params.heads {
        fill(h);
    }
    fill(&mut params.joint);
    Ok(params)
}

pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ModelDims {
        ModelDims::new(vec![5, 3], 7, 4, 3)
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(init_params(&dims(), 9).unwrap(), init_params(&dims(), 9).unwrap());
        assert_ne!(init_params(&dims(), 9).unwrap(), init_params(&dims(), 10).unwrap());
    }

    #[test]
    fn init_biases_zero_weights_bounded() {
        let p = init_params(&dims(), 1).unwrap();
        let check = |l: &Linear| {
            assert!(l.bias.iter().all(|&b| b == 0.0));
            let lim = glorot_limit(l.inputs(), l.outputs());
            assert!(l.weight.data().iter().all(|w| w.abs() <= lim));
        };
        for e in &p.encoders {
            check(&e.hidden);
            check(&e.output);
        }
        p.heads.iter().for_each(check);
        check(&p.joint);
    }

    #[test]
    fn init_rejects_zero_dims() {
        assert!(init_params(&ModelDims::new(vec![3, 0], 2, 2, 2), 0).is_err());
        assert!(init_params(&ModelDims::new(vec![], 2, 2, 2), 0).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let p = init_params(&dims(), 2).unwrap();
        let mut q = ModelParams::zeros(&dims());
        q.set_flat(&p.flat()).unwrap();
        assert_eq!(p, q);
        assert_eq!(
            p.num_params(),
            (5 * 7 + 7 + 7 * 4 + 4) + (3 * 7 + 7 + 7 * 4 + 4) + 2 * (4 * 3 + 3) + (8 * 3 + 3)
        );
    }
}
