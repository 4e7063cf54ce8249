//! Shared CNN encoder, task-specific CNN stacks, token decoders and the
//! document-level attention heads.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, Var};

/// The five tasks sharing the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Ate,
    Ote,
    Asc,
    Ddc,
    Dsc,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Ate, Task::Ote, Task::Asc, Task::Ddc, Task::Dsc];
    pub const ASPECT: [Task; 3] = [Task::Ate, Task::Ote, Task::Asc];
    pub const DOCUMENT: [Task; 2] = [Task::Ddc, Task::Dsc];

    pub fn name(self) -> &'static str {
        match self {
            Task::Ate => "ate",
            Task::Ote => "ote",
            Task::Asc => "asc",
            Task::Ddc => "ddc",
            Task::Dsc => "dsc",
        }
    }

    pub fn is_aspect(self) -> bool {
        matches!(self, Task::Ate | Task::Ote | Task::Asc)
    }

    /// Position among the aspect-level tasks.
    pub fn aspect_index(self) -> Option<usize> {
        Task::ASPECT.iter().position(|&t| t == self)
    }

    pub fn parse(s: &str) -> Result<Task> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Contract(format!("unknown task `{s}`")))
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Glorot-uniform weights, used for every matrix and kernel.
pub fn glorot<F: Scalar, R: Rng>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<F> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| F::lit(rng.gen_range(-a..a)))
}

pub(crate) fn conv_names(prefix: &str) -> (String, String) {
    (format!("{prefix}.kernel"), format!("{prefix}.bias"))
}

pub(crate) fn init_conv<F: Scalar, R: Rng>(
    params: &mut ParamStore<F>,
    prefix: &str,
    width: usize,
    din: usize,
    dout: usize,
    rng: &mut R,
) {
    let (k, b) = conv_names(prefix);
    params.insert(k, glorot(&[width, din, dout], width * din, width * dout, rng));
    params.insert(b, Tensor::zeros(&[dout]));
}

pub(crate) fn init_affine<F: Scalar, R: Rng>(
    params: &mut ParamStore<F>,
    prefix: &str,
    din: usize,
    dout: usize,
    rng: &mut R,
) {
    params.insert(format!("{prefix}.weight"), glorot(&[din, dout], din, dout, rng));
    params.insert(format!("{prefix}.bias"), Tensor::zeros(&[dout]));
}

/// Convolution + bias + ReLU, with padded rows forced back to zero so that
/// padding never leaks into real positions through later convolutions.
pub fn conv_relu<F: Scalar>(
    g: &mut Graph<F>,
    params: &ParamStore<F>,
    prefix: &str,
    x: Var,
    mask: &[bool],
) -> Result<Var> {
    let (k, b) = conv_names(prefix);
    let k = g.param(params, &k)?;
    let b = g.param(params, &b)?;
    let y = g.conv1d(x, k)?;
    let y = g.add_row(y, b)?;
    let y = g.relu(y);
    g.mask_rows(y, mask)
}

pub fn affine<F: Scalar>(g: &mut Graph<F>, params: &ParamStore<F>, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(params, &format!("{prefix}.weight"))?;
    let b = g.param(params, &format!("{prefix}.bias"))?;
    g.fully_connected(x, w, b)
}

/// Layer sizes shared by the encoder and the task layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDims {
    pub d_input: usize,
    pub kernel_widths: Vec<usize>,
    pub d_enc: usize,
    pub d_task: usize,
    pub task_layers: usize,
    pub task_kernel_width: usize,
    pub c1: usize,
    pub c2_domain: usize,
    pub c2_sentiment: usize,
}

impl LayerDims {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_widths.is_empty() {
            return Err(Error::Config("at least one encoder kernel width required".into()));
        }
        if let Some(w) = self.kernel_widths.iter().chain([&self.task_kernel_width]).find(|w| *w % 2 == 0) {
            return Err(Error::Config(format!("kernel width {w} must be odd")));
        }
        if self.d_enc % self.kernel_widths.len() != 0 {
            return Err(Error::Config(format!(
                "d_enc {} must be divisible by the number of kernel widths {}",
                self.d_enc,
                self.kernel_widths.len()
            )));
        }
        if self.task_layers == 0 || self.d_task == 0 || self.d_input == 0 {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        Ok(())
    }

    fn per_width(&self) -> usize {
        self.d_enc / self.kernel_widths.len()
    }

    pub fn classes(&self, task: Task) -> usize {
        match task {
            Task::Ddc => self.c2_domain,
            Task::Dsc => self.c2_sentiment,
            _ => self.c1,
        }
    }
}

pub fn init_encoder<F: Scalar, R: Rng>(params: &mut ParamStore<F>, dims: &LayerDims, rng: &mut R) {
    for &w in &dims.kernel_widths {
        init_conv(params, &format!("encoder.w{w}"), w, dims.d_input, dims.per_width(), rng);
    }
}

/// n-gram features from every kernel width, concatenated: `[n×d] → [n×d_enc]`.
pub fn encode_shared<F: Scalar>(
    g: &mut Graph<F>,
    params: &ParamStore<F>,
    dims: &LayerDims,
    embedded: Var,
    mask: &[bool],
) -> Result<Var> {
    let mut parts = Vec::with_capacity(dims.kernel_widths.len());
    for &w in &dims.kernel_widths {
        parts.push(conv_relu(g, params, &format!("encoder.w{w}"), embedded, mask)?);
    }
    g.concat(&parts, 1)
}

pub fn init_task_layers<F: Scalar, R: Rng>(params: &mut ParamStore<F>, dims: &LayerDims, rng: &mut R) {
    for task in Task::ALL {
        for l in 0..dims.task_layers {
            let din = if l == 0 { dims.d_enc } else { dims.d_task };
            init_conv(params, &format!("task.{task}.conv{l}"), dims.task_kernel_width, din, dims.d_task, rng);
        }
    }
}

/// Task-specific CNN stack: `[n×d_enc] → [n×d_task]`.
pub fn task_features<F: Scalar>(
    g: &mut Graph<F>,
    params: &ParamStore<F>,
    dims: &LayerDims,
    shared: Var,
    task: Task,
    mask: &[bool],
) -> Result<Var> {
    let mut h = shared;
    for l in 0..dims.task_layers {
        h = conv_relu(g, params, &format!("task.{task}.conv{l}"), h, mask)?;
    }
    Ok(h)
}

pub fn init_decoders<F: Scalar, R: Rng>(params: &mut ParamStore<F>, dims: &LayerDims, rng: &mut R) {
    for task in Task::ASPECT {
        init_affine(params, &format!("decoder.{task}"), dims.d_task, dims.c1, rng);
    }
}

/// Per-token logits and class distributions for an aspect-level task.
pub struct Decoded {
    pub logits: Var,
    pub probs: Var,
}

pub fn decode_tokens<F: Scalar>(g: &mut Graph<F>, params: &ParamStore<F>, h: Var, task: Task) -> Result<Decoded> {
    if !task.is_aspect() {
        return Err(Error::Contract(format!("{task} is not a token-level task")));
    }
    let logits = affine(g, params, &format!("decoder.{task}"), h)?;
    let probs = g.softmax(logits, 1)?;
    Ok(Decoded { logits, probs })
}

pub fn init_heads<F: Scalar, R: Rng>(params: &mut ParamStore<F>, dims: &LayerDims, rng: &mut R) {
    for task in Task::DOCUMENT {
        params.insert(format!("head.{task}.attn"), glorot(&[dims.d_task, 1], dims.d_task, 1, rng));
        init_affine(params, &format!("head.{task}.classifier"), dims.d_task, dims.classes(task), rng);
    }
}

/// Output of a document-level attention head.
pub struct Attended {
    /// Attention weights `[n]`, zero on padded tokens.
    pub weights: Var,
    pub doc_vec: Var,
    pub logits: Var,
    pub probs: Var,
}

/// Self-attention pooling followed by the head's classifier.
pub fn doc_attend<F: Scalar>(
    g: &mut Graph<F>,
    params: &ParamStore<F>,
    h: Var,
    mask: &[bool],
    task: Task,
) -> Result<Attended> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::Contract("attention over a fully masked sequence".into()));
    }
    let n = g.shape(h)[0];
    let d = g.shape(h)[1];
    let w = g.param(params, &format!("head.{task}.attn"))?;
    let scores = g.matmul(h, w)?;
    let scores = g.reshape(scores, &[n])?;
    let weights = g.softmax_masked(scores, 0, Some(mask))?;
    let row = g.reshape(weights, &[1, n])?;
    let pooled = g.matmul(row, h)?;
    let doc_vec = g.reshape(pooled, &[d])?;
    let logits = affine(g, params, &format!("head.{task}.classifier"), pooled)?;
    let logits = g.reshape(logits, &[g.shape(logits)[1]])?;
    let probs = g.softmax(logits, 0)?;
    Ok(Attended {
        weights,
        doc_vec,
        logits,
        probs,
    })
}
