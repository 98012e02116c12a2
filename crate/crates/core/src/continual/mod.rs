//! Two-stage continual learning over a task stream: cluster the new task's
//! keys and freeze them, then train the selected prompts and the shared
//! classifier with cross-entropy plus distillation against the previous model.

mod config;
mod trainer;

pub use config::{KdSpace, Routing, TrainConfig, Variant};
pub use trainer::{kd_loss, learn_task, Phase, TaskLearning};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::TaskStream;
use crate::encoders::{ModelDims, ModelState};
use crate::error::{Error, Result};
use crate::metrics::accuracy;
use crate::numerics::{Rng, Tensor2D};
use crate::prompting::{clustering_error_encoded, encode_dataset, EncodedInstance, Selection};

/// Which pool and prompt a prediction went through.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Route {
    pub task_id: usize,
    pub selection: Selection,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub answer: usize,
    /// `None` for prompt-free models.
    pub route: Option<Route>,
}

/// Picks a pool for an input: the oracle task when given, else the pool with
/// the smallest combined key distance (lowest task id on ties).
pub fn route(model: &ModelState, inst: &EncodedInstance, routing: Routing, task_hint: Option<usize>) -> Result<Route> {
    if model.pools.is_empty() {
        return Err(Error::Usage("no task pools learned yet".into()));
    }
    if routing == Routing::Oracle {
        let id = task_hint.ok_or_else(|| Error::Usage("oracle routing needs the task id".into()))?;
        let pool = model
            .pools
            .get(id)
            .ok_or_else(|| Error::Usage(format!("no pool for task {id}")))?;
        return Ok(Route {
            task_id: id,
            selection: pool.select(inst)?,
        });
    }
    let mut best: Option<Route> = None;
    for pool in &model.pools {
        let selection = pool.select(inst)?;
        if best.is_none_or(|b| selection.distance < b.selection.distance) {
            best = Some(Route {
                task_id: pool.task_id(),
                selection,
            });
        }
    }
    Ok(best.expect("at least one pool"))
}

/// Logits for an instance; prompt-free when the model has no pools.
pub fn predict_logits(model: &ModelState, inst: &EncodedInstance, routing: Routing, task_hint: Option<usize>) -> Result<Tensor2D> {
    Ok(predict_with_logits(model, inst, routing, task_hint)?.1)
}

fn predict_with_logits(
    model: &ModelState,
    inst: &EncodedInstance,
    routing: Routing,
    task_hint: Option<usize>,
) -> Result<(Option<Route>, Tensor2D)> {
    if model.pools.is_empty() {
        let logits = model.forward(None, &inst.visual_tokens, &inst.textual_tokens)?;
        return Ok((None, logits));
    }
    let r = route(model, inst, routing, task_hint)?;
    let prompt = model.pools[r.task_id].prompt(r.selection.prompt_id);
    let logits = model.forward(Some(prompt), &inst.visual_tokens, &inst.textual_tokens)?;
    Ok((Some(r), logits))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Routes through the task pools and returns the answer, task and prompt used.
pub fn infer(model: &ModelState, inst: &EncodedInstance, routing: Routing, task_hint: Option<usize>) -> Result<Prediction> {
    if model.pools.is_empty() {
        return Err(Error::Usage("no task pools learned yet".into()));
    }
    predict(model, inst, routing, task_hint)
}

/// Like [`infer`], but prompt-free models answer without routing.
pub fn predict(model: &ModelState, inst: &EncodedInstance, routing: Routing, task_hint: Option<usize>) -> Result<Prediction> {
    let (route, logits) = predict_with_logits(model, inst, routing, task_hint)?;
    Ok(Prediction {
        answer: argmax(logits.row(0)),
        route,
    })
}

/// `A[i][j]`: accuracy on task `i` after training task `j`, defined for `j >= i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    values: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(num_tasks: usize) -> Self {
        Self {
            values: vec![vec![None; num_tasks]; num_tasks],
        }
    }

    pub fn from_rows(values: Vec<Vec<Option<f64>>>) -> Result<Self> {
        let n = values.len();
        for (i, row) in values.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Shape(format!("accuracy row {i} has {} entries, expected {n}", row.len())));
            }
            for (j, v) in row.iter().enumerate() {
                match v {
                    Some(a) if j < i => {
                        return Err(Error::Shape(format!("A[{i}][{j}] = {a} is defined before task {i} was learned")))
                    }
                    Some(a) if !(0.0..=1.0).contains(a) => {
                        return Err(Error::Shape(format!("A[{i}][{j}] = {a} outside [0, 1]")))
                    }
                    _ => {}
                }
            }
        }
        Ok(Self { values })
    }

    pub fn num_tasks(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.values.get(i)?.get(j).copied().flatten()
    }

    pub fn set(&mut self, i: usize, j: usize, acc: f64) -> Result<()> {
        if j < i || i >= self.num_tasks() || j >= self.num_tasks() {
            return Err(Error::Index(format!("A[{i}][{j}] is not a valid entry")));
        }
        if !(0.0..=1.0).contains(&acc) {
            return Err(Error::Shape(format!("accuracy {acc} outside [0, 1]")));
        }
        self.values[i][j] = Some(acc);
        Ok(())
    }

    /// Whether every entry with `j >= i` is filled.
    pub fn is_complete(&self) -> bool {
        (0..self.num_tasks()).all(|i| (i..self.num_tasks()).all(|j| self.get(i, j).is_some()))
    }

    pub fn rows(&self) -> &[Vec<Option<f64>>] {
        &self.values
    }

    /// Multiplies every entry by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            values: self
                .values
                .iter()
                .map(|r| r.iter().map(|v| v.map(|a| a * c)).collect())
                .collect(),
        }
    }
}

/// Fingerprint of a task's pool when it finished training.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezePoint {
    pub task_id: usize,
    pub backbone: u64,
    /// Key checksum of this task's pool, if it has one.
    pub keys: Option<u64>,
    /// Checksum of every tensor in this task's pool.
    pub pool: Option<u64>,
}

/// Everything a stream run produces.
#[derive(Clone, Debug)]
pub struct StreamRun {
    pub model: ModelState,
    pub accuracy: AccuracyMatrix,
    pub learning: Vec<TaskLearning>,
    pub freeze_points: Vec<FreezePoint>,
    /// `(visual, textual)` clustering error over all pools on the training splits.
    pub clustering_error: Option<(f64, f64)>,
}

/// Evaluates one encoded test split; order of instances does not matter.
pub fn evaluate(model: &ModelState, data: &[EncodedInstance], task_id: usize, routing: Routing) -> Result<f64> {
    let preds = data
        .par_iter()
        .map(|inst| predict(model, inst, routing, Some(task_id)).map(|p| p.answer))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = data.iter().map(|i| i.answer).collect();
    accuracy(&preds, &labels)
}

/// Learns every task of the stream in order, filling `A[i][j]` after each task.
pub fn run_stream(stream: &TaskStream, dims: ModelDims, config: &TrainConfig) -> Result<StreamRun> {
    config.validate()?;
    if stream.is_empty() {
        return Err(Error::Usage("cannot run an empty task stream".into()));
    }
    let mut model = ModelState::new(dims, Rng::new(config.seed).fork(0).seed())?;
    let tests = stream
        .tasks
        .iter()
        .map(|t| encode_dataset(&model, &t.test))
        .collect::<Result<Vec<_>>>()?;
    let n = stream.len();
    let mut acc = AccuracyMatrix::new(n);
    let mut learning = Vec::with_capacity(n);
    let mut freeze_points = Vec::with_capacity(n);
    for (j, task) in stream.tasks.iter().enumerate() {
        learning.push(learn_task(&mut model, &task.train, config)?);
        let pool = model.pools.iter().find(|p| p.task_id() == j);
        freeze_points.push(FreezePoint {
            task_id: j,
            backbone: model.backbone_checksum(),
            keys: pool.map(|p| p.key_checksum()),
            pool: pool.map(|p| p.checksum()),
        });
        for i in 0..=j {
            acc.set(i, j, evaluate(&model, &tests[i], i, config.routing)?)?;
        }
    }
    let clustering_error = if model.pools.is_empty() {
        None
    } else {
        let train = stream
            .tasks
            .iter()
            .map(|t| encode_dataset(&model, &t.train))
            .collect::<Result<Vec<_>>>()?;
        let ids: Vec<usize> = (0..n).collect();
        Some(clustering_error_encoded(&model.pools, &train, &ids)?)
    };
    Ok(StreamRun {
        model,
        accuracy: acc,
        learning,
        freeze_points,
        clustering_error,
    })
}
