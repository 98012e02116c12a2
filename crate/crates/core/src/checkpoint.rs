//! Plain-text model checkpoints.
//!
//! One record per line, fields separated by single spaces:
//!
//! ```text
//! meta <key> <value>
//! tensor <name> <rows> <cols> <v_0> <v_1> ... <v_{rows*cols-1}>
//! ```
//!
//! Values are written in the shortest form that parses back to the same
//! `f64`, so a save/load cycle is bit-exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::encoders::{ClassifierHead, FrozenEncoder, FusionEncoder, ModelDims, ModelState};
use crate::error::{Error, Result};
use crate::numerics::Tensor2D;
use crate::prompting::{KeyKeyPromptPool, KeyLayout};

const FORMAT: &str = "clumo-checkpoint-1";

/// A trained model plus the keys each pool started from before clustering.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelState,
    /// `(visual, textual)` keys before stage 1, per pool.
    pub initial_keys: Vec<Option<(Tensor2D, Tensor2D)>>,
}

/// Parsed records of a text checkpoint.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Records {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor2D>,
}

impl Records {
    pub fn push_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.insert(key.into(), value.to_string());
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: &Tensor2D) {
        self.tensors.insert(name.into(), t.clone());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Parse(format!("checkpoint is missing `meta {key}`")))
    }

    pub fn meta_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| Error::Parse(format!("checkpoint `meta {key}` has invalid value `{raw}`")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor2D> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Parse(format!("checkpoint is missing `tensor {name}`")))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.meta {
            writeln!(out, "meta {k} {v}").unwrap();
        }
        for (name, t) in &self.tensors {
            write!(out, "tensor {name} {} {}", t.rows(), t.cols()).unwrap();
            for v in t.as_slice() {
                write!(out, " {v:?}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut records = Records::default();
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(' ');
            let bad = |what: &str| Error::Parse(format!("checkpoint line {line_no}: {what}"));
            match fields.next() {
                Some("meta") => {
                    let key = fields.next().ok_or_else(|| bad("meta without a key"))?;
                    let value: Vec<&str> = fields.collect();
                    records.meta.insert(key.to_string(), value.join(" "));
                }
                Some("tensor") => {
                    let name = fields.next().ok_or_else(|| bad("tensor without a name"))?;
                    let rows: usize = fields.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad row count"))?;
                    let cols: usize = fields.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad column count"))?;
                    let values = fields
                        .map(|s| s.parse::<f64>().map_err(|_| bad(&format!("bad value `{s}`"))))
                        .collect::<Result<Vec<_>>>()?;
                    if values.len() != rows * cols {
                        return Err(bad(&format!("{} values for a {rows}x{cols} tensor", values.len())));
                    }
                    records.tensors.insert(name.to_string(), Tensor2D::from_vec(rows, cols, values)?);
                }
                Some(other) => return Err(bad(&format!("unknown record `{other}`"))),
                None => unreachable!("non-empty line"),
            }
        }
        Ok(records)
    }
}

impl Checkpoint {
    pub fn to_records(&self) -> Records {
        let m = &self.model;
        let mut r = Records::default();
        r.push_meta("format", FORMAT);
        r.push_meta("seed", m.seed);
        r.push_meta("tasks_learned", m.tasks_learned);
        r.push_meta("pools", m.pools.len());
        r.push_meta("dims.hidden", m.dims.hidden);
        r.push_meta("dims.raw_dim", m.dims.raw_dim);
        r.push_meta("dims.visual_tokens", m.dims.visual_tokens);
        r.push_meta("dims.textual_tokens", m.dims.textual_tokens);
        r.push_meta("dims.num_answers", m.dims.num_answers);
        r.push_tensor("visual.projection", m.visual.projection());
        r.push_tensor("visual.bias", m.visual.bias());
        r.push_tensor("textual.projection", m.textual.projection());
        r.push_tensor("textual.bias", m.textual.bias());
        r.push_tensor("fusion.transform", m.fusion.transform());
        r.push_tensor("classifier.weights", &m.classifier.weights);
        r.push_tensor("classifier.bias", &m.classifier.bias);
        for (i, pool) in m.pools.iter().enumerate() {
            let p = format!("pool.{i}");
            r.push_meta(format!("{p}.task_id"), pool.task_id());
            r.push_meta(format!("{p}.layout"), pool.layout());
            r.push_meta(format!("{p}.keys_frozen"), pool.keys_frozen());
            r.push_meta(format!("{p}.prompts"), pool.prompts().len());
            r.push_tensor(format!("{p}.visual_keys"), pool.visual_keys());
            r.push_tensor(format!("{p}.textual_keys"), pool.textual_keys());
            for (j, prompt) in pool.prompts().iter().enumerate() {
                r.push_tensor(format!("{p}.prompt.{j}"), prompt);
            }
            if let Some(Some((v, t))) = self.initial_keys.get(i) {
                r.push_tensor(format!("{p}.initial_visual_keys"), v);
                r.push_tensor(format!("{p}.initial_textual_keys"), t);
            }
        }
        r
    }

    pub fn from_records(r: &Records) -> Result<Self> {
        let format = r.meta("format")?;
        if format != FORMAT {
            return Err(Error::Parse(format!("unsupported checkpoint format `{format}`")));
        }
        let dims = ModelDims {
            hidden: r.meta_parsed("dims.hidden")?,
            raw_dim: r.meta_parsed("dims.raw_dim")?,
            visual_tokens: r.meta_parsed("dims.visual_tokens")?,
            textual_tokens: r.meta_parsed("dims.textual_tokens")?,
            num_answers: r.meta_parsed("dims.num_answers")?,
        };
        dims.validate()?;
        let visual = FrozenEncoder::from_parts(
            r.tensor("visual.projection")?.clone(),
            r.tensor("visual.bias")?.clone(),
            dims.visual_tokens,
        )?;
        let textual = FrozenEncoder::from_parts(
            r.tensor("textual.projection")?.clone(),
            r.tensor("textual.bias")?.clone(),
            dims.textual_tokens,
        )?;
        let fusion = FusionEncoder::from_transform(r.tensor("fusion.transform")?.clone())?;
        let classifier = ClassifierHead {
            weights: r.tensor("classifier.weights")?.clone(),
            bias: r.tensor("classifier.bias")?.clone(),
        };
        if classifier.weights.shape() != (dims.hidden, dims.num_answers)
            || classifier.bias.shape() != (1, dims.num_answers)
        {
            return Err(Error::Shape("classifier does not match the stored dims".into()));
        }
        let n_pools: usize = r.meta_parsed("pools")?;
        let mut pools = Vec::with_capacity(n_pools);
        let mut initial_keys = Vec::with_capacity(n_pools);
        for i in 0..n_pools {
            let p = format!("pool.{i}");
            let n_prompts: usize = r.meta_parsed(&format!("{p}.prompts"))?;
            let prompts = (0..n_prompts)
                .map(|j| r.tensor(&format!("{p}.prompt.{j}")).cloned())
                .collect::<Result<Vec<_>>>()?;
            let layout: KeyLayout = r.meta_parsed(&format!("{p}.layout"))?;
            pools.push(KeyKeyPromptPool::from_parts(
                r.meta_parsed(&format!("{p}.task_id"))?,
                layout,
                r.tensor(&format!("{p}.visual_keys"))?.clone(),
                r.tensor(&format!("{p}.textual_keys"))?.clone(),
                prompts,
                r.meta_parsed(&format!("{p}.keys_frozen"))?,
            )?);
            let iv = r.tensors.get(&format!("{p}.initial_visual_keys"));
            let it = r.tensors.get(&format!("{p}.initial_textual_keys"));
            initial_keys.push(iv.zip(it).map(|(v, t)| (v.clone(), t.clone())));
        }
        Ok(Self {
            model: ModelState {
                dims,
                visual,
                textual,
                fusion,
                classifier,
                pools,
                tasks_learned: r.meta_parsed("tasks_learned")?,
                seed: r.meta_parsed("seed")?,
            },
            initial_keys,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_records().to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_records(&Records::parse(&text)?)
    }
}
