use rayon::prelude::*;

use crate::datagen::TaskDataset;
use crate::encoders::ModelState;
use crate::error::Result;
use crate::numerics::{mean_rows, Tensor2D};

use super::KeyLayout;

/// An instance after the frozen encoders, with pooled per-modality features.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedInstance {
    pub visual_tokens: Tensor2D,
    pub textual_tokens: Tensor2D,
    /// `mean_rows(visual_tokens)`.
    pub visual_feature: Tensor2D,
    /// `mean_rows(textual_tokens)`.
    pub textual_feature: Tensor2D,
    pub answer: usize,
    pub groups: Option<(usize, usize)>,
}

impl EncodedInstance {
    pub fn from_tokens(visual_tokens: Tensor2D, textual_tokens: Tensor2D, answer: usize) -> Result<Self> {
        Ok(Self {
            visual_feature: mean_rows(&visual_tokens)?,
            textual_feature: mean_rows(&textual_tokens)?,
            visual_tokens,
            textual_tokens,
            answer,
            groups: None,
        })
    }
}

/// Encodes every instance of a dataset through the model's frozen encoders.
pub fn encode_dataset(model: &ModelState, dataset: &TaskDataset) -> Result<Vec<EncodedInstance>> {
    dataset
        .instances
        .par_iter()
        .map(|inst| {
            let mut enc = EncodedInstance::from_tokens(
                model.encode_visual(&inst.visual)?,
                model.encode_textual(&inst.textual)?,
                inst.answer,
            )?;
            enc.groups = inst.groups;
            Ok(enc)
        })
        .collect()
}

/// Per-modality key-matching features, one row per instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityFeatures {
    pub visual: Tensor2D,
    pub textual: Tensor2D,
}

impl ModalityFeatures {
    /// Stacks the query each layout matches against: pooled tokens, or the
    /// first visual token for [`KeyLayout::FirstToken`].
    pub fn collect(instances: &[EncodedInstance], layout: KeyLayout) -> Result<Self> {
        let visual: Vec<&Tensor2D> = instances.iter().map(|i| &i.visual_feature).collect();
        let visual = if layout == KeyLayout::FirstToken {
            let firsts: Vec<Tensor2D> = instances.iter().map(|i| i.visual_tokens.row_tensor(0)).collect();
            Tensor2D::vstack(&firsts.iter().collect::<Vec<_>>())?
        } else {
            Tensor2D::vstack(&visual)?
        };
        let textual: Vec<&Tensor2D> = instances.iter().map(|i| &i.textual_feature).collect();
        Ok(Self {
            visual,
            textual: Tensor2D::vstack(&textual)?,
        })
    }
}
