use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor2D};

use super::features::{EncodedInstance, ModalityFeatures};
use super::kmeans::{mini_batch_kmeans, ClusterStats, KMeansSettings, KeyInit};
use super::{prompt_index, select_key};

/// Which keys take part in prompt selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyLayout {
    /// One visual and one textual key jointly pick a prompt.
    Dual,
    /// Visual keys only; the textual key count is folded into the visual one.
    VisualOnly,
    /// Textual keys only; the visual key count is folded into the textual one.
    TextualOnly,
    /// One key per prompt, matched against the first visual token.
    FirstToken,
}

impl KeyLayout {
    /// Key counts `(visual, textual)` for a configured `s_v x s_t` grid.
    pub fn key_counts(self, s_v: usize, s_t: usize) -> (usize, usize) {
        match self {
            KeyLayout::Dual => (s_v, s_t),
            KeyLayout::VisualOnly | KeyLayout::FirstToken => (s_v * s_t, 1),
            KeyLayout::TextualOnly => (1, s_v * s_t),
        }
    }

    pub fn uses_visual(self) -> bool {
        !matches!(self, KeyLayout::TextualOnly)
    }

    pub fn uses_textual(self) -> bool {
        matches!(self, KeyLayout::Dual | KeyLayout::TextualOnly)
    }

    fn name(self) -> &'static str {
        match self {
            KeyLayout::Dual => "dual",
            KeyLayout::VisualOnly => "visual_only",
            KeyLayout::TextualOnly => "textual_only",
            KeyLayout::FirstToken => "first_token",
        }
    }
}

impl fmt::Display for KeyLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KeyLayout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [
            KeyLayout::Dual,
            KeyLayout::VisualOnly,
            KeyLayout::TextualOnly,
            KeyLayout::FirstToken,
        ]
        .into_iter()
        .find(|l| l.name() == s)
        .ok_or_else(|| Error::Parse(format!("unknown key layout `{s}`")))
    }
}

/// Outcome of routing one input through a pool.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Selection {
    pub visual_key: usize,
    pub textual_key: usize,
    pub prompt_id: usize,
    /// Sum of the distances of the participating modalities.
    pub distance: f64,
}

/// What stage-1 key training produced for both modalities.
#[derive(Clone, Debug)]
pub struct KeyTrainingOutcome {
    pub visual: ClusterStats,
    pub textual: ClusterStats,
    pub initial_visual_keys: Tensor2D,
    pub initial_textual_keys: Tensor2D,
}

/// One task's visual keys, textual keys and the prompts they index.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyKeyPromptPool {
    task_id: usize,
    layout: KeyLayout,
    visual_keys: Tensor2D,
    textual_keys: Tensor2D,
    prompts: Vec<Tensor2D>,
    keys_frozen: bool,
}

impl KeyKeyPromptPool {
    /// Creates a pool with zeroed keys and prompts drawn from `uniform(-0.1, 0.1)`.
    pub fn new(
        task_id: usize,
        layout: KeyLayout,
        s_v: usize,
        s_t: usize,
        prompt_len: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if s_v == 0 || s_t == 0 || prompt_len == 0 || hidden == 0 {
            return Err(Error::Config(format!(
                "pool sizes must be positive (S_v={s_v}, S_t={s_t}, L_p={prompt_len}, D={hidden})"
            )));
        }
        let (kv, kt) = layout.key_counts(s_v, s_t);
        let prompts = (0..kv * kt)
            .map(|_| rng.uniform_tensor(prompt_len, hidden, -0.1, 0.1))
            .collect();
        Ok(Self {
            task_id,
            layout,
            visual_keys: Tensor2D::zeros(kv, hidden),
            textual_keys: Tensor2D::zeros(kt, hidden),
            prompts,
            keys_frozen: false,
        })
    }

    /// Reassembles a pool from stored parts, checking every invariant.
    pub fn from_parts(
        task_id: usize,
        layout: KeyLayout,
        visual_keys: Tensor2D,
        textual_keys: Tensor2D,
        prompts: Vec<Tensor2D>,
        keys_frozen: bool,
    ) -> Result<Self> {
        let (kv, kt) = (visual_keys.rows(), textual_keys.rows());
        if kv == 0 || kt == 0 {
            return Err(Error::Shape("a pool needs at least one key per modality".into()));
        }
        if prompts.len() != kv * kt {
            return Err(Error::Shape(format!(
                "{} prompts for a {kv}x{kt} key grid",
                prompts.len()
            )));
        }
        let hidden = visual_keys.cols();
        if textual_keys.cols() != hidden || prompts.iter().any(|p| p.cols() != hidden || p.rows() != prompts[0].rows()) {
            return Err(Error::Shape("pool tensors disagree on width or prompt length".into()));
        }
        Ok(Self {
            task_id,
            layout,
            visual_keys,
            textual_keys,
            prompts,
            keys_frozen,
        })
    }

    pub fn task_id(&self) -> usize {
        self.task_id
    }

    pub fn layout(&self) -> KeyLayout {
        self.layout
    }

    pub fn visual_keys(&self) -> &Tensor2D {
        &self.visual_keys
    }

    pub fn textual_keys(&self) -> &Tensor2D {
        &self.textual_keys
    }

    pub fn visual_key_count(&self) -> usize {
        self.visual_keys.rows()
    }

    pub fn textual_key_count(&self) -> usize {
        self.textual_keys.rows()
    }

    pub fn prompt_len(&self) -> usize {
        self.prompts[0].rows()
    }

    pub fn prompts(&self) -> &[Tensor2D] {
        &self.prompts
    }

    pub fn prompt(&self, id: usize) -> &Tensor2D {
        &self.prompts[id]
    }

    pub fn keys_frozen(&self) -> bool {
        self.keys_frozen
    }

    /// Idempotent.
    pub fn freeze_keys(&mut self) {
        self.keys_frozen = true;
    }

    pub fn key_checksum(&self) -> u64 {
        self.visual_keys.checksum() ^ self.textual_keys.checksum().rotate_left(29)
    }

    pub fn checksum(&self) -> u64 {
        self.prompts
            .iter()
            .fold(self.key_checksum(), |h, p| h.rotate_left(7) ^ p.checksum())
    }

    /// Applies `prompt -= lr * grad` to one prompt.
    pub fn update_prompt(&mut self, id: usize, grad: &Tensor2D, lr: f64) -> Result<()> {
        if id >= self.prompts.len() {
            return Err(Error::Index(format!("prompt {id} of {}", self.prompts.len())));
        }
        self.prompts[id].add_scaled(grad, -lr)
    }

    fn ensure_unfrozen(&self) -> Result<()> {
        if self.keys_frozen {
            return Err(Error::Usage(format!("keys of task {} are frozen", self.task_id)));
        }
        Ok(())
    }

    /// Overwrites keys directly (checkpoint restore, test fixtures).
    pub fn set_keys(&mut self, visual: Tensor2D, textual: Tensor2D) -> Result<()> {
        self.ensure_unfrozen()?;
        if visual.shape() != self.visual_keys.shape() || textual.shape() != self.textual_keys.shape() {
            return Err(Error::Shape("replacement keys must keep the pool's shape".into()));
        }
        self.visual_keys = visual;
        self.textual_keys = textual;
        Ok(())
    }

    /// Seeds keys with distinct feature rows sampled from one random batch,
    /// without any clustering.
    pub fn initialize_keys(&mut self, features: &ModalityFeatures, batch_size: usize, rng: &mut Rng) -> Result<KeyTrainingOutcome> {
        let settings = KMeansSettings {
            batch_size,
            max_iters: 1,
            tol: 0.0,
        };
        self.fit_keys(features, &settings, rng, true)
    }

    /// Mini-batch K-means on each modality's features, run independently.
    pub fn train_keys(&mut self, features: &ModalityFeatures, settings: &KMeansSettings, rng: &mut Rng) -> Result<KeyTrainingOutcome> {
        self.fit_keys(features, settings, rng, false)
    }

    fn fit_keys(
        &mut self,
        features: &ModalityFeatures,
        settings: &KMeansSettings,
        rng: &mut Rng,
        init_only: bool,
    ) -> Result<KeyTrainingOutcome> {
        self.ensure_unfrozen()?;
        if features.visual.rows() == 0 {
            return Err(Error::Usage("cannot train keys on an empty dataset".into()));
        }
        let run = |points: &Tensor2D, k: usize, rng: &mut Rng| -> Result<(Tensor2D, Tensor2D, ClusterStats)> {
            if settings.batch_size < k {
                return Err(Error::Usage(format!(
                    "batch size {} is smaller than the {k} keys",
                    settings.batch_size
                )));
            }
            let fit = mini_batch_kmeans(points, k, KeyInit::SampleFirstBatch, settings, rng)?;
            let centers = if init_only {
                fit.initial_centers.clone()
            } else {
                fit.centers
            };
            Ok((centers, fit.initial_centers, fit.stats))
        };
        let (v, v0, vs) = run(&features.visual, self.visual_key_count(), &mut rng.fork(0))?;
        let (t, t0, ts) = run(&features.textual, self.textual_key_count(), &mut rng.fork(1))?;
        self.visual_keys = v;
        self.textual_keys = t;
        let (visual, textual) = if init_only {
            (
                assignment_stats(&features.visual, &self.visual_keys)?,
                assignment_stats(&features.textual, &self.textual_keys)?,
            )
        } else {
            (vs, ts)
        };
        Ok(KeyTrainingOutcome {
            visual,
            textual,
            initial_visual_keys: v0,
            initial_textual_keys: t0,
        })
    }

    /// Routes pre-pooled features through the pool's keys.
    pub fn select_features(&self, visual_feature: &[f64], textual_feature: &[f64]) -> Result<Selection> {
        let (m, dv) = select_key(visual_feature, &self.visual_keys)?;
        let (n, dt) = select_key(textual_feature, &self.textual_keys)?;
        let distance = match self.layout {
            KeyLayout::Dual => dv + dt,
            KeyLayout::VisualOnly | KeyLayout::FirstToken => dv,
            KeyLayout::TextualOnly => dt,
        };
        Ok(Selection {
            visual_key: m,
            textual_key: n,
            prompt_id: prompt_index(m, n, self.visual_key_count(), self.textual_key_count())?,
            distance,
        })
    }

    /// Routes an encoded instance, using the query this pool's layout expects.
    pub fn select(&self, inst: &EncodedInstance) -> Result<Selection> {
        self.select_features(self.visual_query(inst), inst.textual_feature.as_slice())
    }

    /// Routes encoded token sequences and returns the chosen prompt.
    pub fn select_prompt(&self, visual_tokens: &Tensor2D, textual_tokens: &Tensor2D) -> Result<(&Tensor2D, Selection)> {
        let inst = EncodedInstance::from_tokens(visual_tokens.clone(), textual_tokens.clone(), 0)?;
        let sel = self.select(&inst)?;
        Ok((&self.prompts[sel.prompt_id], sel))
    }

    pub(crate) fn visual_query<'a>(&self, inst: &'a EncodedInstance) -> &'a [f64] {
        match self.layout {
            KeyLayout::FirstToken => inst.visual_tokens.row(0),
            _ => inst.visual_feature.as_slice(),
        }
    }

    /// Pulls a visual key toward a query by one gradient step on `||query - key||^2`.
    pub(crate) fn pull_visual_key(&mut self, key: usize, grad: &[f64], lr: f64) -> Result<()> {
        self.ensure_unfrozen()?;
        for (k, g) in self.visual_keys.row_mut(key).iter_mut().zip(grad) {
            *k -= lr * g;
        }
        Ok(())
    }
}

/// Nearest-key assignment statistics without moving any key.
pub fn assignment_stats(points: &Tensor2D, keys: &Tensor2D) -> Result<ClusterStats> {
    let k = keys.rows();
    let mut counts = vec![0usize; k];
    let mut dist = vec![0.0; k];
    let mut sq = 0.0;
    for p in points.iter_rows() {
        let (key, d) = select_key(p, keys)?;
        counts[key] += 1;
        dist[key] += d;
        sq += d * d;
    }
    let mean_distances = dist
        .iter()
        .zip(&counts)
        .map(|(&d, &c)| if c == 0 { 0.0 } else { d / c as f64 })
        .collect();
    Ok(ClusterStats {
        counts,
        mean_distances,
        iterations: 0,
        converged: false,
        objective: vec![sq / points.rows().max(1) as f64],
    })
}
