//! Synthetic domain-incremental multimodal task streams.
//!
//! Each task owns `G_v` visual and `G_t` textual sub-domains. An instance draws
//! one group per modality, emits every token as the group center plus Gaussian
//! noise, and is labelled by a per-task `(visual group, textual group)` table.
//! Different tasks live in separated regions of raw space.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2_distance, Rng, Tensor2D};

/// Generator parameters for a whole stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub num_tasks: usize,
    pub visual_groups: usize,
    pub textual_groups: usize,
    pub train_per_task: usize,
    pub test_per_task: usize,
    /// Per-coordinate noise around a group center.
    pub noise_sigma: f64,
    /// Minimum raw-space distance between group centers of different tasks.
    pub task_separation: f64,
    /// Per-coordinate spread of group centers around their task anchor.
    pub group_spread: f64,
    /// Per-coordinate spread of task anchors around the origin.
    pub anchor_scale: f64,
    /// Give each task its own slice of the answer vocabulary.
    pub disjoint_answers: bool,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            num_tasks: 4,
            visual_groups: 3,
            textual_groups: 3,
            train_per_task: 512,
            test_per_task: 128,
            noise_sigma: 0.15,
            task_separation: 4.0,
            group_spread: 1.0,
            anchor_scale: 1.5,
            disjoint_answers: false,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_tasks", self.num_tasks),
            ("visual_groups", self.visual_groups),
            ("textual_groups", self.textual_groups),
            ("train_per_task", self.train_per_task),
            ("test_per_task", self.test_per_task),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("stream.{name} must be at least 1")));
            }
        }
        let reals = [
            ("noise_sigma", self.noise_sigma),
            ("group_spread", self.group_spread),
            ("anchor_scale", self.anchor_scale),
        ];
        for (name, v) in reals {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("stream.{name} must be positive, got {v}")));
            }
        }
        if !(self.task_separation >= 0.0 && self.task_separation.is_finite()) {
            return Err(Error::Config("stream.task_separation must be non-negative".into()));
        }
        Ok(())
    }
}

/// Full description of one synthetic task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub task_id: usize,
    pub visual_centers: Tensor2D,
    pub textual_centers: Tensor2D,
    pub noise_sigma: f64,
    /// `label_table[g_v][g_t]` is the answer for that group pair.
    pub label_table: Vec<Vec<usize>>,
    pub num_answers: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub visual_tokens: usize,
    pub textual_tokens: usize,
}

impl TaskSpec {
    pub fn visual_groups(&self) -> usize {
        self.visual_centers.rows()
    }

    pub fn textual_groups(&self) -> usize {
        self.textual_centers.rows()
    }

    pub fn label(&self, visual_group: usize, textual_group: usize) -> usize {
        self.label_table[visual_group][textual_group]
    }

    pub fn validate(&self) -> Result<()> {
        let (g_v, g_t) = (self.visual_groups(), self.textual_groups());
        if g_v == 0 || g_t == 0 {
            return Err(Error::Config("a task needs at least one group per modality".into()));
        }
        if self.visual_centers.cols() != self.textual_centers.cols() {
            return Err(Error::Config("visual and textual centers differ in width".into()));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise sigma must be positive, got {}", self.noise_sigma)));
        }
        if self.label_table.len() != g_v || self.label_table.iter().any(|r| r.len() != g_t) {
            return Err(Error::Config(format!("label table must be {g_v}x{g_t}")));
        }
        if let Some(&bad) = self.label_table.iter().flatten().find(|&&a| a >= self.num_answers) {
            return Err(Error::Config(format!("answer {bad} outside vocabulary of {}", self.num_answers)));
        }
        if self.visual_tokens == 0 || self.textual_tokens == 0 {
            return Err(Error::Config("token counts must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Parse(format!("unknown split `{other}`"))),
        }
    }
}

/// One labelled (visual, textual, answer) example.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub visual: Tensor2D,
    pub textual: Tensor2D,
    pub answer: usize,
    /// Hidden ground-truth `(visual group, textual group)`; absent for imported data.
    pub groups: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub task_id: usize,
    pub split: Split,
    pub instances: Vec<Instance>,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn answers(&self) -> Vec<usize> {
        self.instances.iter().map(|i| i.answer).collect()
    }
}

/// A task with its generating spec and both splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub spec: TaskSpec,
    /// Letter naming the task's domain in the canonical stream (`a`, `b`, ...).
    pub domain: char,
    pub train: TaskDataset,
    pub test: TaskDataset,
}

impl Task {
    pub fn task_id(&self) -> usize {
        self.spec.task_id
    }

    fn set_task_id(&mut self, id: usize) {
        self.spec.task_id = id;
        self.train.task_id = id;
        self.test.task_id = id;
    }
}

/// An ordered sequence of tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Domain letters in stream order, e.g. `"abcd"`.
    pub fn order(&self) -> String {
        self.tasks.iter().map(|t| t.domain).collect()
    }

    /// Reorders tasks by domain letters (`"badc"`) and renumbers task ids in the new order.
    pub fn reorder(&self, order: &str) -> Result<TaskStream> {
        let letters: Vec<char> = order.chars().collect();
        if letters.len() != self.tasks.len() {
            return Err(Error::Config(format!(
                "task order `{order}` names {} tasks, stream has {}",
                letters.len(),
                self.tasks.len()
            )));
        }
        let mut tasks = Vec::with_capacity(letters.len());
        for (i, &c) in letters.iter().enumerate() {
            if letters[..i].contains(&c) {
                return Err(Error::Config(format!("task order `{order}` repeats `{c}`")));
            }
            let mut task = self
                .tasks
                .iter()
                .find(|t| t.domain == c)
                .ok_or_else(|| Error::Config(format!("task order `{order}` names unknown task `{c}`")))?
                .clone();
            task.set_task_id(i);
            tasks.push(task);
        }
        Ok(TaskStream { tasks })
    }
}

/// Letter for the `i`-th canonical task.
pub fn domain_letter(i: usize) -> char {
    const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ";
    LETTERS.get(i).map_or('?', |&b| b as char)
}

fn sample_instances(spec: &TaskSpec, count: usize, split: Split, rng: &mut Rng) -> TaskDataset {
    let raw_dim = spec.visual_centers.cols();
    let noisy = |center: &[f64], rows: usize, rng: &mut Rng| {
        let mut t = Tensor2D::zeros(rows, raw_dim);
        for r in 0..rows {
            for (v, c) in t.row_mut(r).iter_mut().zip(center) {
                *v = c + spec.noise_sigma * rng.normal();
            }
        }
        t
    };
    let instances = (0..count)
        .map(|_| {
            let g_v = rng.index(spec.visual_groups());
            let g_t = rng.index(spec.textual_groups());
            let visual = noisy(spec.visual_centers.row(g_v), spec.visual_tokens, rng);
            let textual = noisy(spec.textual_centers.row(g_t), spec.textual_tokens, rng);
            Instance {
                visual,
                textual,
                answer: spec.label(g_v, g_t),
                groups: Some((g_v, g_t)),
            }
        })
        .collect();
    TaskDataset {
        task_id: spec.task_id,
        split,
        instances,
    }
}

/// Samples the train and test splits of one task.
pub fn make_task(spec: &TaskSpec, seed: u64) -> Result<Task> {
    spec.validate()?;
    let root = Rng::new(seed);
    let train = sample_instances(spec, spec.train_count, Split::Train, &mut root.fork(0));
    let test = sample_instances(spec, spec.test_count, Split::Test, &mut root.fork(1));
    Ok(Task {
        spec: spec.clone(),
        domain: domain_letter(spec.task_id),
        train,
        test,
    })
}

const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

fn min_cross_distance(a: &Tensor2D, b: &Tensor2D) -> f64 {
    let mut best = f64::INFINITY;
    for x in a.iter_rows() {
        for y in b.iter_rows() {
            best = best.min(l2_distance(x, y).expect("equal widths"));
        }
    }
    best
}

fn group_centers(anchor: &[f64], groups: usize, spread: f64, rng: &mut Rng) -> Tensor2D {
    let mut t = Tensor2D::zeros(groups, anchor.len());
    for g in 0..groups {
        for (v, a) in t.row_mut(g).iter_mut().zip(anchor) {
            *v = a + spread * rng.normal();
        }
    }
    t
}

/// Builds `config.num_tasks` tasks whose sub-domain centers are at least
/// `task_separation` apart across tasks, in each modality.
pub fn make_stream(config: &StreamConfig, dims: &crate::encoders::ModelDims, seed: u64) -> Result<TaskStream> {
    config.validate()?;
    dims.validate()?;
    let root = Rng::new(seed);
    let mut placement = root.fork(0);
    let mut labels = root.fork(1);
    let answer_slice = if config.disjoint_answers {
        let width = dims.num_answers / config.num_tasks;
        if width == 0 {
            return Err(Error::Config(format!(
                "{} answers cannot be split across {} tasks",
                dims.num_answers, config.num_tasks
            )));
        }
        Some(width)
    } else {
        None
    };

    let mut placed: Vec<(Tensor2D, Tensor2D)> = Vec::with_capacity(config.num_tasks);
    let mut tasks = Vec::with_capacity(config.num_tasks);
    for task_id in 0..config.num_tasks {
        let mut accepted = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let anchor = |rng: &mut Rng| -> Vec<f64> {
                (0..dims.raw_dim).map(|_| config.anchor_scale * rng.normal()).collect()
            };
            let v_anchor = anchor(&mut placement);
            let t_anchor = anchor(&mut placement);
            let v = group_centers(&v_anchor, config.visual_groups, config.group_spread, &mut placement);
            let t = group_centers(&t_anchor, config.textual_groups, config.group_spread, &mut placement);
            let separated = placed.iter().all(|(pv, pt)| {
                min_cross_distance(&v, pv) >= config.task_separation
                    && min_cross_distance(&t, pt) >= config.task_separation
            });
            if separated {
                accepted = Some((v, t));
                break;
            }
        }
        let (visual_centers, textual_centers) = accepted.ok_or_else(|| {
            Error::Config(format!(
                "could not place task {task_id} at separation {} after {MAX_PLACEMENT_ATTEMPTS} attempts",
                config.task_separation
            ))
        })?;
        placed.push((visual_centers.clone(), textual_centers.clone()));

        let (base, width) = match answer_slice {
            Some(w) => (task_id * w, w),
            None => (0, dims.num_answers),
        };
        let label_table = (0..config.visual_groups)
            .map(|_| (0..config.textual_groups).map(|_| base + labels.index(width)).collect())
            .collect();
        let spec = TaskSpec {
            task_id,
            visual_centers,
            textual_centers,
            noise_sigma: config.noise_sigma,
            label_table,
            num_answers: dims.num_answers,
            train_count: config.train_per_task,
            test_count: config.test_per_task,
            visual_tokens: dims.visual_tokens,
            textual_tokens: dims.textual_tokens,
        };
        tasks.push(make_task(&spec, root.fork(100 + task_id as u64).seed())?);
    }
    Ok(TaskStream { tasks })
}

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    task_id: usize,
    split: Split,
    answer: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    groups: Option<(usize, usize)>,
    visual_rows: usize,
    visual: Vec<f64>,
    textual_rows: usize,
    textual: Vec<f64>,
}

/// Writes one JSON record per instance: task id, split, answer, token rows
/// flattened row-major.
pub fn export_datasets<W: Write>(datasets: &[&TaskDataset], mut out: W) -> std::io::Result<()> {
    for ds in datasets {
        for inst in &ds.instances {
            let rec = InstanceRecord {
                task_id: ds.task_id,
                split: ds.split,
                answer: inst.answer,
                groups: inst.groups,
                visual_rows: inst.visual.rows(),
                visual: inst.visual.as_slice().to_vec(),
                textual_rows: inst.textual.rows(),
                textual: inst.textual.as_slice().to_vec(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Reads records written by [`export_datasets`], grouped by `(task, split)` in
/// first-seen order. Blank lines are skipped.
pub fn import_datasets<R: BufRead>(input: R) -> Result<Vec<TaskDataset>> {
    let mut out: Vec<TaskDataset> = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstanceRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
        let to_tensor = |rows: usize, values: Vec<f64>| -> Result<Tensor2D> {
            if rows == 0 || values.len() % rows != 0 {
                return Err(Error::Parse(format!(
                    "line {}: {} values do not split into {rows} rows",
                    lineno + 1,
                    values.len()
                )));
            }
            Tensor2D::from_vec(rows, values.len() / rows, values)
        };
        let inst = Instance {
            visual: to_tensor(rec.visual_rows, rec.visual)?,
            textual: to_tensor(rec.textual_rows, rec.textual)?,
            answer: rec.answer,
            groups: rec.groups,
        };
        match out.iter_mut().find(|d| d.task_id == rec.task_id && d.split == rec.split) {
            Some(ds) => ds.instances.push(inst),
            None => out.push(TaskDataset {
                task_id: rec.task_id,
                split: rec.split,
                instances: vec![inst],
            }),
        }
    }
    Ok(out)
}
