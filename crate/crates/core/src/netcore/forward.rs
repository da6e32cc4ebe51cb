use crate::datagen::MultimodalBatch;
use crate::error::{Error, Result};
use crate::numkit::{dot, softmax_raw, Mat64, ProbDist};

use super::{GradBuffer, Linear, ModelParams};

/// Activations of one modality branch for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityCache {
    pub input: Mat64,
    pub hidden_pre: Mat64,
    pub hidden: Mat64,
    /// Raw (unnormalised) embeddings `F^k`, one row per sample.
    pub embedding: Mat64,
    pub logits: Mat64,
    pub probs: Mat64,
}

/// Everything one forward pass produces, plus what backward needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    pub modalities: Vec<ModalityCache>,
    /// Concatenated embeddings `[F^1, …, F^M]`, the joint head's input.
    pub joint_input: Mat64,
    pub joint_logits: Mat64,
    pub joint_probs: Mat64,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.joint_logits.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn embedding(&self, modality: usize, sample: usize) -> &[f64] {
        self.modalities[modality].embedding.row(sample)
    }

    pub fn joint_prob_dist(&self, sample: usize) -> ProbDist {
        ProbDist::new(self.joint_probs.row(sample).to_vec()).expect("softmax output")
    }

    pub fn modality_prob_dist(&self, modality: usize, sample: usize) -> ProbDist {
        ProbDist::new(self.modalities[modality].probs.row(sample).to_vec()).expect("softmax output")
    }
}

/// Partial derivatives of a scalar loss with respect to the cached outputs.
///
/// Probability and logit partials for the same head are summed, so a loss can
/// supply whichever is more convenient (cross-entropy is cleanest on logits).
#[derive(Debug, Clone, PartialEq)]
pub struct Upstream {
    pub joint_probs: Mat64,
    pub joint_logits: Mat64,
    pub modality_probs: Vec<Mat64>,
    pub modality_logits: Vec<Mat64>,
    pub embeddings: Vec<Mat64>,
}

impl Upstream {
    pub fn zeros(cache: &ForwardCache) -> Self {
        let n = cache.len();
        let c = cache.joint_logits.cols();
        Upstream {
            joint_probs: Mat64::zeros(n, c),
            joint_logits: Mat64::zeros(n, c),
            modality_probs: cache.modalities.iter().map(|_| Mat64::zeros(n, c)).collect(),
            modality_logits: cache.modalities.iter().map(|_| Mat64::zeros(n, c)).collect(),
            embeddings: cache
                .modalities
                .iter()
                .map(|m| Mat64::zeros(n, m.embedding.cols()))
                .collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.joint_probs.scale(s);
        self.joint_logits.scale(s);
        for m in self
            .modality_probs
            .iter_mut()
            .chain(&mut self.modality_logits)
            .chain(&mut self.embeddings)
        {
            m.scale(s);
        }
    }

    /// `self += other`.
    pub fn add(&mut self, other: &Upstream) {
        let add = |a: &mut Mat64, b: &Mat64| a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
        add(&mut self.joint_probs, &other.joint_probs);
        add(&mut self.joint_logits, &other.joint_logits);
        for k in 0..self.embeddings.len() {
            add(&mut self.modality_probs[k], &other.modality_probs[k]);
            add(&mut self.modality_logits[k], &other.modality_logits[k]);
            add(&mut self.embeddings[k], &other.embeddings[k]);
        }
    }

    fn matches(&self, cache: &ForwardCache) -> bool {
        let same = |a: &Mat64, b: &Mat64| a.rows() == b.rows() && a.cols() == b.cols();
        same(&self.joint_probs, &cache.joint_probs)
            && same(&self.joint_logits, &cache.joint_logits)
            && self.embeddings.len() == cache.num_modalities()
            && self.modality_probs.len() == cache.num_modalities()
            && self.modality_logits.len() == cache.num_modalities()
            && cache.modalities.iter().enumerate().all(|(k, m)| {
                same(&self.modality_probs[k], &m.probs)
                    && same(&self.modality_logits[k], &m.logits)
                    && same(&self.embeddings[k], &m.embedding)
            })
    }
}

fn softmax_rows(logits: &Mat64) -> Mat64 {
    let mut probs = Mat64::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        probs.row_mut(i).copy_from_slice(&softmax_raw(logits.row(i)));
    }
    probs
}

pub fn forward(params: &ModelParams, batch: &MultimodalBatch) -> Result<ForwardCache> {
    let dims = &params.dims;
    if batch.num_modalities() != dims.num_modalities() {
        return Err(Error::Dimension(format!(
            "batch has {} modalities, model expects {}",
            batch.num_modalities(),
            dims.num_modalities()
        )));
    }
    let n = batch.len();
    let l = dims.embed;
    let mut joint_input = Mat64::zeros(n, dims.joint_width());
    let mut modalities = Vec::with_capacity(dims.num_modalities());
    for (k, (x, enc)) in batch.modalities.iter().zip(&params.encoders).enumerate() {
        if x.cols() != dims.input_dims[k] || x.rows() != n {
            return Err(Error::Dimension(format!(
                "modality {k} features are {}x{}, expected {n}x{}",
                x.rows(),
                x.cols(),
                dims.input_dims[k]
            )));
        }
        let hidden_pre = enc.hidden.apply_batch(x);
        let mut hidden = hidden_pre.clone();
        hidden.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let embedding = enc.output.apply_batch(&hidden);
        for i in 0..n {
            joint_input.row_mut(i)[k * l..(k + 1) * l].copy_from_slice(embedding.row(i));
        }
        let logits = params.heads[k].apply_batch(&embedding);
        let probs = softmax_rows(&logits);
        modalities.push(ModalityCache {
            input: x.clone(),
            hidden_pre,
            hidden,
            embedding,
            logits,
            probs,
        });
    }
    let joint_logits = params.joint.apply_batch(&joint_input);
    let joint_probs = softmax_rows(&joint_logits);
    Ok(ForwardCache {
        modalities,
        joint_input,
        joint_logits,
        joint_probs,
    })
}

/// Pulls `∂L/∂p` back through `p = softmax(z)`: `∂L/∂z_j = p_j (g_j − Σ_i p_i g_i)`.
pub fn softmax_backward(probs: &[f64], d_probs: &[f64]) -> Vec<f64> {
    let inner = dot(probs, d_probs);
    probs.iter().zip(d_probs).map(|(p, g)| p * (g - inner)).collect()
}

/// Accumulates weight/bias gradients for one sample and returns `Wᵀ d_out`.
fn linear_backward(layer: &Linear, grad: &mut Linear, input: &[f64], d_out: &[f64]) -> Vec<f64> {
    let mut d_in = vec![0.0; layer.inputs()];
    for (o, &g) in d_out.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        grad.bias[o] += g;
        let w = layer.weight.row(o);
        let gw = grad.weight.row_mut(o);
        for j in 0..input.len() {
            gw[j] += g * input[j];
            d_in[j] += g * w[j];
        }
    }
    d_in
}

fn logit_grad(d_logits: &[f64], probs: &[f64], d_probs: &[f64]) -> Vec<f64> {
    let mut g = if d_probs.iter().any(|&v| v != 0.0) {
        softmax_backward(probs, d_probs)
    } else {
        vec![0.0; probs.len()]
    };
    g.iter_mut().zip(d_logits).for_each(|(a, b)| *a += b);
    g
}

/// Exact reverse-mode gradient of the scalar loss whose output partials are `upstream`.
pub fn backward(params: &ModelParams, cache: &ForwardCache, upstream: &Upstream) -> Result<GradBuffer> {
    if !upstream.matches(cache) || cache.num_modalities() != params.dims.num_modalities() {
        return Err(Error::Dimension(
            "upstream gradient does not match the forward cache".into(),
        ));
    }
    let l = params.dims.embed;
    let mut grads = ModelParams::zeros(&params.dims);
    for i in 0..cache.len() {
        let d_joint = logit_grad(
            upstream.joint_logits.row(i),
            cache.joint_probs.row(i),
            upstream.joint_probs.row(i),
        );
        let d_joint_input = linear_backward(&params.joint, &mut grads.joint, cache.joint_input.row(i), &d_joint);
        for (k, mc) in cache.modalities.iter().enumerate() {
            let d_logits = logit_grad(
                upstream.modality_logits[k].row(i),
                mc.probs.row(i),
                upstream.modality_probs[k].row(i),
            );
            let mut d_emb = linear_backward(&params.heads[k], &mut grads.heads[k], mc.embedding.row(i), &d_logits);
            for (j, d) in d_emb.iter_mut().enumerate() {
                *d += upstream.embeddings[k].get(i, j) + d_joint_input[k * l + j];
            }
            let enc = &params.encoders[k];
            let genc = &mut grads.encoders[k];
            let mut d_hidden = linear_backward(&enc.output, &mut genc.output, mc.hidden.row(i), &d_emb);
            for (d, &pre) in d_hidden.iter_mut().zip(mc.hidden_pre.row(i)) {
                if pre <= 0.0 {
                    *d = 0.0;
                }
            }
            linear_backward(&enc.hidden, &mut genc.hidden, mc.input.row(i), &d_hidden);
        }
    }
    Ok(grads)
}

/// Modality-head outputs for vectors that bypass the encoders (fused prototypes).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadCache {
    /// `[modality]`, one row per input vector.
    pub inputs: Vec<Mat64>,
    pub logits: Vec<Mat64>,
    pub probs: Vec<Mat64>,
}

impl HeadCache {
    pub fn len(&self) -> usize {
        self.inputs.first().map_or(0, Mat64::rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn forward_heads(params: &ModelParams, inputs: &[Mat64]) -> Result<HeadCache> {
    if inputs.len() != params.heads.len() {
        return Err(Error::Dimension(format!(
            "{} head inputs for {} heads",
            inputs.len(),
            params.heads.len()
        )));
    }
    let mut logits = Vec::with_capacity(inputs.len());
    let mut probs = Vec::with_capacity(inputs.len());
    for (x, head) in inputs.iter().zip(&params.heads) {
        if x.cols() != head.inputs() || x.rows() != inputs[0].rows() {
            return Err(Error::Dimension(format!(
                "head input is {}x{}, expected width {}",
                x.rows(),
                x.cols(),
                head.inputs()
            )));
        }
        let z = head.apply_batch(x);
        probs.push(softmax_rows(&z));
        logits.push(z);
    }
    Ok(HeadCache {
        inputs: inputs.to_vec(),
        logits,
        probs,
    })
}

/// Accumulates head gradients for logit partials `d_logits[k]` into `grads`.
pub fn backward_heads(
    params: &ModelParams,
    cache: &HeadCache,
    d_logits: &[Mat64],
    grads: &mut GradBuffer,
) -> Result<()> {
    if d_logits.len() != cache.logits.len() {
        return Err(Error::Dimension("head upstream does not match the head cache".into()));
    }
    for (k, d) in d_logits.iter().enumerate() {
        if d.rows() != cache.logits[k].rows() || d.cols() != cache.logits[k].cols() {
            return Err(Error::Dimension(format!("head {k} upstream has the wrong shape")));
        }
        for i in 0..d.rows() {
            linear_backward(&params.heads[k], &mut grads.heads[k], cache.inputs[k].row(i), d.row(i));
        }
    }
    Ok(())
}
