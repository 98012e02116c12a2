//! Frozen toy backbone: visual/textual token encoders, a fusion encoder with
//! mean pooling, and the trainable classifier head.
//!
//! The prompt-conditioned pipeline is
//! `logits = classify(mean_rows(tanh([prompt; visual; textual] · W_fuse)))`,
//! and with no prompt it reduces to fusing `[visual; textual]` only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, mean_rows, Rng, Tensor2D};
use crate::prompting::KeyKeyPromptPool;

/// Backbone dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    /// Hidden width `D` shared by every token.
    pub hidden: usize,
    /// Width of each raw input row.
    pub raw_dim: usize,
    pub visual_tokens: usize,
    pub textual_tokens: usize,
    pub num_answers: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            hidden: 32,
            raw_dim: 16,
            visual_tokens: 8,
            textual_tokens: 8,
            num_answers: 16,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("hidden", self.hidden),
            ("raw_dim", self.raw_dim),
            ("visual_tokens", self.visual_tokens),
            ("textual_tokens", self.textual_tokens),
            ("num_answers", self.num_answers),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// A frozen `tanh(raw · projection + bias)` token encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenEncoder {
    projection: Tensor2D,
    bias: Tensor2D,
    token_count: usize,
}

impl FrozenEncoder {
    pub fn random(raw_dim: usize, hidden: usize, token_count: usize, rng: &mut Rng) -> Self {
        let s = 1.0 / (hidden as f64).sqrt();
        Self {
            projection: rng.uniform_tensor(raw_dim, hidden, -s, s),
            bias: rng.uniform_tensor(1, hidden, -s, s),
            token_count,
        }
    }

    pub fn from_parts(projection: Tensor2D, bias: Tensor2D, token_count: usize) -> Result<Self> {
        if bias.shape() != (1, projection.cols()) {
            return Err(Error::Shape(format!(
                "encoder bias {:?} does not match projection {:?}",
                bias.shape(),
                projection.shape()
            )));
        }
        Ok(Self {
            projection,
            bias,
            token_count,
        })
    }

    pub fn projection(&self) -> &Tensor2D {
        &self.projection
    }

    pub fn bias(&self) -> &Tensor2D {
        &self.bias
    }

    /// Nominal sequence length produced for this modality.
    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn raw_dim(&self) -> usize {
        self.projection.rows()
    }

    pub fn hidden(&self) -> usize {
        self.projection.cols()
    }

    /// Encodes every raw row into a hidden token.
    pub fn encode(&self, raw: &Tensor2D) -> Result<Tensor2D> {
        if raw.cols() != self.raw_dim() {
            return Err(Error::Shape(format!(
                "encoder expects raw rows of width {}, got {}",
                self.raw_dim(),
                raw.cols()
            )));
        }
        let mut out = matmul(raw, &self.projection)?;
        let bias = self.bias.as_slice();
        for r in 0..out.rows() {
            for (v, b) in out.row_mut(r).iter_mut().zip(bias) {
                *v = (*v + b).tanh();
            }
        }
        Ok(out)
    }

    pub fn checksum(&self) -> u64 {
        self.projection.checksum() ^ self.bias.checksum().rotate_left(17)
    }
}

/// Frozen per-token `tanh(x · W)` map followed by mean pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionEncoder {
    transform: Tensor2D,
}

impl FusionEncoder {
    pub fn random(hidden: usize, rng: &mut Rng) -> Self {
        let s = 1.0 / (hidden as f64).sqrt();
        Self {
            transform: rng.uniform_tensor(hidden, hidden, -s, s),
        }
    }

    pub fn from_transform(transform: Tensor2D) -> Result<Self> {
        if transform.rows() != transform.cols() {
            return Err(Error::Shape("fusion transform must be square".into()));
        }
        Ok(Self { transform })
    }

    pub fn transform(&self) -> &Tensor2D {
        &self.transform
    }

    /// Per-token activations `tanh(sequence · W)`.
    pub fn activate(&self, sequence: &Tensor2D) -> Result<Tensor2D> {
        Ok(matmul(sequence, &self.transform)?.map(f64::tanh))
    }

    /// Pooled `1 x D` representation of a token sequence.
    pub fn fuse(&self, sequence: &Tensor2D) -> Result<Tensor2D> {
        mean_rows(&self.activate(sequence)?)
    }

    pub fn checksum(&self) -> u64 {
        self.transform.checksum()
    }
}

/// Linear answer classifier; the only trainable part of the backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub weights: Tensor2D,
    pub bias: Tensor2D,
}

impl ClassifierHead {
    pub fn random(hidden: usize, num_answers: usize, rng: &mut Rng) -> Self {
        let s = 1.0 / (hidden as f64).sqrt();
        Self {
            weights: rng.uniform_tensor(hidden, num_answers, -s, s),
            bias: Tensor2D::zeros(1, num_answers),
        }
    }

    pub fn num_answers(&self) -> usize {
        self.weights.cols()
    }

    pub fn classify(&self, pooled: &Tensor2D) -> Result<Tensor2D> {
        let mut out = matmul(pooled, &self.weights)?;
        for r in 0..out.rows() {
            for (v, b) in out.row_mut(r).iter_mut().zip(self.bias.as_slice()) {
                *v += b;
            }
        }
        Ok(out)
    }
}

/// Gradients for the classifier head.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierGrads {
    pub weights: Tensor2D,
    pub bias: Tensor2D,
}

impl ClassifierGrads {
    pub fn zeros_like(head: &ClassifierHead) -> Self {
        Self {
            weights: Tensor2D::zeros(head.weights.rows(), head.weights.cols()),
            bias: Tensor2D::zeros(1, head.bias.cols()),
        }
    }

    pub fn accumulate(&mut self, other: &ClassifierGrads) -> Result<()> {
        self.weights.add_scaled(&other.weights, 1.0)?;
        self.bias.add_scaled(&other.bias, 1.0)
    }
}

/// Gradients of a scalar loss wrt every trainable tensor touched by one pass.
#[derive(Clone, Debug)]
pub struct TrainableGrads {
    pub classifier: ClassifierGrads,
    /// Present when the pass used a prompt.
    pub prompt: Option<Tensor2D>,
}

/// Activations retained by [`ModelState::forward_pass`] for the backward sweep.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    activations: Tensor2D,
    pooled: Tensor2D,
    logits: Tensor2D,
    prompt_rows: usize,
}

impl ForwardPass {
    pub fn logits(&self) -> &Tensor2D {
        &self.logits
    }

    pub fn pooled(&self) -> &Tensor2D {
        &self.pooled
    }

    /// Exact gradients of the loss wrt classifier parameters and prompt tokens,
    /// given `upstream = dL/dlogits`. Frozen encoders receive no gradient.
    pub fn backward(&self, model: &ModelState, upstream: &Tensor2D) -> Result<TrainableGrads> {
        self.logits.check_same_shape(upstream, "upstream gradient")?;
        let head = &model.classifier;
        let weights = matmul(&self.pooled.transpose(), upstream)?;
        let bias = upstream.clone();
        let classifier = ClassifierGrads { weights, bias };

        let prompt = if self.prompt_rows > 0 {
            // dL/dpooled, spread evenly over tokens by the mean pool.
            let d_pooled = matmul(upstream, &head.weights.transpose())?;
            let inv_n = 1.0 / self.activations.rows() as f64;
            let hidden = self.activations.cols();
            let mut d_pre = Tensor2D::zeros(self.prompt_rows, hidden);
            for r in 0..self.prompt_rows {
                let act = self.activations.row(r);
                for (c, out) in d_pre.row_mut(r).iter_mut().enumerate() {
                    *out = d_pooled.get(0, c) * inv_n * (1.0 - act[c] * act[c]);
                }
            }
            Some(matmul(&d_pre, &model.fusion.transform.transpose())?)
        } else {
            None
        };
        Ok(TrainableGrads { classifier, prompt })
    }
}

/// The full model: frozen encoders, trainable classifier and per-task pools.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub dims: ModelDims,
    pub visual: FrozenEncoder,
    pub textual: FrozenEncoder,
    pub fusion: FusionEncoder,
    pub classifier: ClassifierHead,
    pub pools: Vec<KeyKeyPromptPool>,
    /// Number of tasks trained, including prompt-free variants that add no pool.
    pub tasks_learned: usize,
    pub seed: u64,
}

impl ModelState {
    pub fn new(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let root = Rng::new(seed);
        let visual = FrozenEncoder::random(dims.raw_dim, dims.hidden, dims.visual_tokens, &mut root.fork(1));
        let textual = FrozenEncoder::random(dims.raw_dim, dims.hidden, dims.textual_tokens, &mut root.fork(2));
        let fusion = FusionEncoder::random(dims.hidden, &mut root.fork(3));
        let classifier = ClassifierHead::random(dims.hidden, dims.num_answers, &mut root.fork(4));
        Ok(Self {
            dims,
            visual,
            textual,
            fusion,
            classifier,
            pools: Vec::new(),
            tasks_learned: 0,
            seed,
        })
    }

    pub fn encode_visual(&self, raw: &Tensor2D) -> Result<Tensor2D> {
        self.visual.encode(raw)
    }

    pub fn encode_textual(&self, raw: &Tensor2D) -> Result<Tensor2D> {
        self.textual.encode(raw)
    }

    /// Runs the prompt-conditioned pipeline and keeps activations for backward.
    pub fn forward_pass(
        &self,
        prompt: Option<&Tensor2D>,
        visual_tokens: &Tensor2D,
        textual_tokens: &Tensor2D,
    ) -> Result<ForwardPass> {
        let hidden = self.dims.hidden;
        let mut parts: Vec<&Tensor2D> = Vec::with_capacity(3);
        if let Some(p) = prompt {
            parts.push(p);
        }
        parts.push(visual_tokens);
        parts.push(textual_tokens);
        for p in &parts {
            if p.cols() != hidden {
                return Err(Error::Shape(format!(
                    "token width {} does not match hidden size {hidden}",
                    p.cols()
                )));
            }
        }
        let sequence = Tensor2D::vstack(&parts)?;
        let activations = self.fusion.activate(&sequence)?;
        let pooled = mean_rows(&activations)?;
        let logits = self.classifier.classify(&pooled)?;
        Ok(ForwardPass {
            activations,
            pooled,
            logits,
            prompt_rows: prompt.map_or(0, Tensor2D::rows),
        })
    }

    pub fn forward(
        &self,
        prompt: Option<&Tensor2D>,
        visual_tokens: &Tensor2D,
        textual_tokens: &Tensor2D,
    ) -> Result<Tensor2D> {
        Ok(self.forward_pass(prompt, visual_tokens, textual_tokens)?.logits)
    }

    /// Deep, independent copy used as a frozen teacher.
    pub fn snapshot(&self) -> ModelState {
        self.clone()
    }

    /// Hash over every frozen backbone weight.
    pub fn backbone_checksum(&self) -> u64 {
        self.visual.checksum() ^ self.textual.checksum().rotate_left(21) ^ self.fusion.checksum().rotate_left(42)
    }

    pub fn apply_classifier_step(&mut self, grads: &ClassifierGrads, lr: f64) -> Result<()> {
        self.classifier.weights.add_scaled(&grads.weights, -lr)?;
        self.classifier.bias.add_scaled(&grads.bias, -lr)
    }
}
