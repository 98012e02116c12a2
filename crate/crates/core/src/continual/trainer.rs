use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::datagen::TaskDataset;
use crate::encoders::{ClassifierGrads, ModelState, TrainableGrads};
use crate::error::{Error, Result};
use crate::numerics::{mse, softmax_cross_entropy, softmax_mse, softmax_rows, Rng, Tensor2D};
use crate::prompting::{encode_dataset, EncodedInstance, KeyKeyPromptPool, KeyTrainingOutcome, ModalityFeatures};

use super::{predict_logits, KdSpace, Routing, TrainConfig};

/// Phases of [`learn_task`], in the order they happened.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    KeyTraining,
    KeysFrozen,
    /// Gradient steps on prompts and classifier.
    PromptTraining { steps: usize },
}

/// What learning one task produced.
#[derive(Clone, Debug)]
pub struct TaskLearning {
    /// Stage-1 statistics and the keys it started from; `None` without a pool.
    pub keys: Option<KeyTrainingOutcome>,
    pub phases: Vec<Phase>,
    /// Mean total loss of the last epoch.
    pub final_loss: f64,
}

/// Distillation loss against a frozen snapshot for one instance.
///
/// The current model routes through its newest pool (the one being trained),
/// the snapshot through its own pools by nearest key distance. Without a
/// snapshot the loss and all gradients are zero.
pub fn kd_loss(
    current: &ModelState,
    previous: Option<&ModelState>,
    inst: &EncodedInstance,
    space: KdSpace,
) -> Result<(f64, TrainableGrads)> {
    let pool = current.pools.last();
    let prompt = match pool {
        Some(p) => Some(p.prompt(p.select(inst)?.prompt_id)),
        None => None,
    };
    let pass = current.forward_pass(prompt, &inst.visual_tokens, &inst.textual_tokens)?;
    let Some(previous) = previous else {
        let zeros = Tensor2D::zeros(1, current.classifier.num_answers());
        return Ok((0.0, pass.backward(current, &zeros)?));
    };
    let target = predict_logits(previous, inst, Routing::Nearest, None)?;
    let (loss, grad) = kd_term(pass.logits(), &target, space)?;
    Ok((loss, pass.backward(current, &grad)?))
}

/// Distillation loss between student and teacher logits, with its gradient
/// wrt the student logits.
fn kd_term(student: &Tensor2D, teacher: &Tensor2D, space: KdSpace) -> Result<(f64, Tensor2D)> {
    match space {
        KdSpace::Logits => mse(student, teacher),
        KdSpace::Probabilities => softmax_mse(student, &softmax_rows(teacher)),
    }
}

/// Stage 1 then stage 2 for one task. `task.task_id` must equal the number of
/// tasks already learned.
pub fn learn_task(model: &mut ModelState, task: &TaskDataset, config: &TrainConfig) -> Result<TaskLearning> {
    config.validate()?;
    if task.task_id != model.tasks_learned {
        return Err(Error::Usage(format!(
            "expected task {} next, got task {}",
            model.tasks_learned, task.task_id
        )));
    }
    if task.is_empty() {
        return Err(Error::Usage(format!("task {} has no training data", task.task_id)));
    }
    let variant = config.variant;
    let root = Rng::new(config.seed).fork(1_000 + task.task_id as u64);
    let encoded = encode_dataset(model, task)?;
    let teacher = (variant.uses_distillation() && config.kd_weight > 0.0 && model.tasks_learned > 0)
        .then(|| model.snapshot());
    let mut phases = Vec::new();

    let keys = match variant.layout() {
        Some(layout) => {
            let mut pool = KeyKeyPromptPool::new(
                task.task_id,
                layout,
                config.visual_keys,
                config.textual_keys,
                config.prompt_len,
                model.dims.hidden,
                &mut root.fork(1),
            )?;
            let features = ModalityFeatures::collect(&encoded, layout)?;
            let mut key_rng = root.fork(2);
            let outcome = if variant.clusters_keys() {
                phases.push(Phase::KeyTraining);
                pool.train_keys(&features, &config.key_training, &mut key_rng)?
            } else {
                pool.initialize_keys(&features, config.key_training.batch_size, &mut key_rng)?
            };
            if !variant.learns_keys_by_gradient() {
                pool.freeze_keys();
                phases.push(Phase::KeysFrozen);
            }
            model.pools.push(pool);
            Some(outcome)
        }
        None => None,
    };

    let teacher_logits: Option<Vec<Tensor2D>> = match &teacher {
        Some(t) => Some(
            encoded
                .par_iter()
                .map(|inst| predict_logits(t, inst, Routing::Nearest, None))
                .collect::<Result<_>>()?,
        ),
        None => None,
    };

    let train_classifier = !(config.freeze_classifier_after_first_task && task.task_id > 0);
    let mut batch_rng = root.fork(3);
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut steps = 0;
    let mut final_loss = 0.0;
    for _ in 0..config.epochs {
        batch_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let loss = train_batch(model, &encoded, batch, teacher_logits.as_deref(), config, train_classifier)?;
            epoch_loss += loss * batch.len() as f64;
            steps += 1;
        }
        final_loss = epoch_loss / encoded.len() as f64;
    }
    phases.push(Phase::PromptTraining { steps });

    if let Some(pool) = model.pools.last_mut() {
        pool.freeze_keys();
        if variant.learns_keys_by_gradient() {
            phases.push(Phase::KeysFrozen);
        }
    }
    model.tasks_learned += 1;
    Ok(TaskLearning {
        keys,
        phases,
        final_loss,
    })
}

/// One gradient step on `L_ce + kd_weight * L_kd` over a batch; returns the loss.
fn train_batch(
    model: &mut ModelState,
    encoded: &[EncodedInstance],
    batch: &[usize],
    teacher_logits: Option<&[Tensor2D]>,
    config: &TrainConfig,
    train_classifier: bool,
) -> Result<f64> {
    let pool = if config.variant.layout().is_some() {
        model.pools.last()
    } else {
        None
    };
    let selections = batch
        .iter()
        .map(|&i| pool.map(|p| p.select(&encoded[i])).transpose())
        .collect::<Result<Vec<_>>>()?;
    let passes = batch
        .iter()
        .zip(&selections)
        .map(|(&i, sel)| {
            let prompt = match (pool, sel) {
                (Some(p), Some(s)) => Some(p.prompt(s.prompt_id)),
                _ => None,
            };
            model.forward_pass(prompt, &encoded[i].visual_tokens, &encoded[i].textual_tokens)
        })
        .collect::<Result<Vec<_>>>()?;

    let logits = Tensor2D::vstack(&passes.iter().map(|p| p.logits()).collect::<Vec<_>>())?;
    let labels: Vec<usize> = batch.iter().map(|&i| encoded[i].answer).collect();
    let (mut loss, mut upstream) = softmax_cross_entropy(&logits, &labels)?;
    if let Some(targets) = teacher_logits {
        let target = Tensor2D::vstack(&batch.iter().map(|&i| &targets[i]).collect::<Vec<_>>())?;
        let (kd, kd_grad) = kd_term(&logits, &target, config.kd_space)?;
        loss += config.kd_weight * kd;
        upstream.add_scaled(&kd_grad, config.kd_weight)?;
    }

    let mut classifier = ClassifierGrads::zeros_like(&model.classifier);
    let mut prompt_grads: BTreeMap<usize, Tensor2D> = BTreeMap::new();
    for (r, (pass, sel)) in passes.iter().zip(&selections).enumerate() {
        let g = pass.backward(model, &upstream.row_tensor(r))?;
        classifier.accumulate(&g.classifier)?;
        if let (Some(sel), Some(pg)) = (sel, g.prompt) {
            match prompt_grads.get_mut(&sel.prompt_id) {
                Some(acc) => acc.add_scaled(&pg, 1.0)?,
                None => {
                    prompt_grads.insert(sel.prompt_id, pg);
                }
            }
        }
    }

    if config.variant.learns_keys_by_gradient() {
        // Surrogate pull `mean ||query - key||^2` toward each selected key.
        let pool = model.pools.last_mut().expect("prompted variant has a pool");
        let scale = 2.0 / batch.len() as f64;
        for (&i, sel) in batch.iter().zip(&selections) {
            let sel = sel.expect("prompted variant selects");
            let query = pool.visual_query(&encoded[i]).to_vec();
            let key = pool.visual_keys().row(sel.visual_key);
            let grad: Vec<f64> = key.iter().zip(&query).map(|(k, q)| scale * (k - q)).collect();
            pool.pull_visual_key(sel.visual_key, &grad, config.prompt_lr)?;
        }
    }

    if train_classifier {
        model.apply_classifier_step(&classifier, config.lr)?;
    }
    if !prompt_grads.is_empty() {
        let pool = model.pools.last_mut().expect("prompt gradients imply a pool");
        for (id, g) in &prompt_grads {
            pool.update_prompt(*id, g, config.prompt_lr)?;
        }
    }
    Ok(loss)
}
