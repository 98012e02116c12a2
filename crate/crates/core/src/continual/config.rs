use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompting::{KMeansSettings, KeyLayout};

/// Training method: the full method, its ablations, and two baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Clumo,
    NoKd,
    NoCluster,
    TextualOnly,
    VisualOnly,
    Finetune,
    SingleKey,
}

impl Variant {
    /// Ablation table row order.
    pub const ALL: [Variant; 7] = [
        Variant::Clumo,
        Variant::NoKd,
        Variant::NoCluster,
        Variant::TextualOnly,
        Variant::VisualOnly,
        Variant::Finetune,
        Variant::SingleKey,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Clumo => "clumo",
            Variant::NoKd => "no_kd",
            Variant::NoCluster => "no_cluster",
            Variant::TextualOnly => "textual_only",
            Variant::VisualOnly => "visual_only",
            Variant::Finetune => "finetune",
            Variant::SingleKey => "single_key",
        }
    }

    /// Key layout of the per-task pools, or `None` for the prompt-free baseline.
    pub fn layout(self) -> Option<KeyLayout> {
        match self {
            Variant::Clumo | Variant::NoKd | Variant::NoCluster => Some(KeyLayout::Dual),
            Variant::TextualOnly => Some(KeyLayout::TextualOnly),
            Variant::VisualOnly => Some(KeyLayout::VisualOnly),
            Variant::SingleKey => Some(KeyLayout::FirstToken),
            Variant::Finetune => None,
        }
    }

    /// Whether stage 1 runs K-means on the keys.
    pub fn clusters_keys(self) -> bool {
        matches!(
            self,
            Variant::Clumo | Variant::NoKd | Variant::TextualOnly | Variant::VisualOnly
        )
    }

    /// Whether keys are trained by gradient alongside the prompts.
    pub fn learns_keys_by_gradient(self) -> bool {
        self == Variant::SingleKey
    }

    pub fn uses_distillation(self) -> bool {
        matches!(
            self,
            Variant::Clumo | Variant::NoCluster | Variant::TextualOnly | Variant::VisualOnly
        )
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown variant `{s}`")))
    }
}

/// How inference picks a task pool.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    /// Pool with the smallest combined key distance; ties go to the lowest task id.
    #[default]
    Nearest,
    /// The pool of the task the input belongs to.
    Oracle,
}

/// What the distillation term compares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdSpace {
    /// Raw classifier logits.
    #[default]
    Logits,
    /// Softmax answer distributions.
    Probabilities,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// `S_v`.
    pub visual_keys: usize,
    /// `S_t`.
    pub textual_keys: usize,
    /// `L_p`.
    pub prompt_len: usize,
    /// Step size for the classifier.
    pub lr: f64,
    /// Step size for prompts (and gradient-trained keys).
    pub prompt_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub kd_weight: f64,
    pub kd_space: KdSpace,
    pub variant: Variant,
    pub seed: u64,
    pub key_training: KMeansSettings,
    pub routing: Routing,
    /// Only train the classifier on the first task.
    pub freeze_classifier_after_first_task: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            visual_keys: 3,
            textual_keys: 3,
            prompt_len: 10,
            lr: 0.2,
            prompt_lr: 20.0,
            epochs: 20,
            batch_size: 32,
            kd_weight: 0.1,
            kd_space: KdSpace::Logits,
            variant: Variant::Clumo,
            seed: 0,
            key_training: KMeansSettings::default(),
            routing: Routing::Nearest,
            freeze_classifier_after_first_task: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("visual_keys", self.visual_keys),
            ("textual_keys", self.textual_keys),
            ("prompt_len", self.prompt_len),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("key_training.batch_size", self.key_training.batch_size),
            ("key_training.max_iters", self.key_training.max_iters),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("train.{name} must be at least 1")));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.prompt_lr >= 0.0 && self.prompt_lr.is_finite()) {
            return Err(Error::Config("train.lr and train.prompt_lr must be finite and non-negative".into()));
        }
        if !(self.kd_weight >= 0.0 && self.kd_weight.is_finite()) {
            return Err(Error::Config(format!("train.kd_weight must be non-negative, got {}", self.kd_weight)));
        }
        if !(self.key_training.tol >= 0.0) {
            return Err(Error::Config("train.key_training.tol must be non-negative".into()));
        }
        if let Some(layout) = self.variant.layout() {
            let (kv, kt) = layout.key_counts(self.visual_keys, self.textual_keys);
            let largest = kv.max(kt);
            if self.key_training.batch_size < largest {
                return Err(Error::Config(format!(
                    "train.key_training.batch_size {} is smaller than the {largest} keys",
                    self.key_training.batch_size
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.visual_keys, c.textual_keys, c.prompt_len), (3, 3, 10));
        assert_eq!(c.kd_weight, 0.1);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_zero_sizes_and_negative_weights() {
        let c = TrainConfig {
            visual_keys: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            kd_weight: -1.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
    }
}
