use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clumo_core::checkpoint::Checkpoint;
use clumo_core::continual::{run_stream, StreamRun, TrainConfig, Variant};
use clumo_core::datagen::{export_datasets, make_stream, TaskStream};
use clumo_core::metrics::{
    emit_report, format_method_table, pca_project, write_plot_csv, MethodRow, PlotPoint, RunReport,
};
use clumo_core::numerics::Tensor2D;
use clumo_core::prompting::{encode_dataset, select_key, ModalityFeatures};

use crate::{CliError, ExperimentConfig};

/// One finished run of one variant on one seed.
#[derive(Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub run: StreamRun,
    pub report: RunReport,
}

/// Builds the seed's stream in the configured task order.
pub fn build_stream(config: &ExperimentConfig, seed: u64) -> Result<TaskStream, CliError> {
    let stream = make_stream(&config.stream, &config.model, seed)?;
    Ok(match &config.task_order {
        Some(order) => stream.reorder(order)?,
        None => stream,
    })
}

/// Runs `train` on the seed's stream and builds its report.
pub fn run_seed(config: &ExperimentConfig, train: &TrainConfig, seed: u64) -> Result<SeedRun, CliError> {
    let start = Instant::now();
    let stream = build_stream(config, seed)?;
    let train = TrainConfig { seed, ..train.clone() };
    let run = run_stream(&stream, config.model, &train)?;
    let echo = ExperimentConfig {
        seeds: vec![seed],
        task_order: Some(stream.order()),
        out_dir: None,
        train: train.clone(),
        ..config.clone()
    };
    let echo = serde_json::to_value(&echo).map_err(|e| CliError::Runtime(e.to_string()))?;
    let report = RunReport::new(
        echo,
        &stream.order(),
        train.variant.name(),
        seed,
        &run.accuracy,
        run.clustering_error,
        start.elapsed().as_secs_f64(),
    )?;
    Ok(SeedRun { seed, run, report })
}

fn checkpoint_of(run: &StreamRun) -> Checkpoint {
    let initial_keys = run
        .learning
        .iter()
        .filter_map(|l| l.keys.as_ref())
        .map(|k| Some((k.initial_visual_keys.clone(), k.initial_textual_keys.clone())))
        .collect();
    Checkpoint {
        model: run.model.clone(),
        initial_keys,
    }
}

pub fn checkpoint_path(out: &Path, seed: u64) -> PathBuf {
    out.join("run").join(format!("seed-{seed}.ckpt"))
}

/// Sample mean and standard deviation (`None` for a single value).
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

/// Aggregates one method's seeds into a table row.
pub fn method_row(name: &str, runs: &[SeedRun]) -> MethodRow {
    let acc: Vec<f64> = runs.iter().map(|r| r.report.metrics.average_accuracy).collect();
    let fgt: Vec<f64> = runs.iter().filter_map(|r| r.report.metrics.forgetting.average).collect();
    let (accuracy, accuracy_std) = mean_std(&acc);
    let (forgetting, forgetting_std) = if fgt.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(&fgt);
        (Some(m), s)
    };
    MethodRow {
        method: name.to_string(),
        accuracy,
        accuracy_std,
        forgetting,
        forgetting_std,
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

/// Output of [`cmd_run`].
#[derive(Debug)]
pub struct RunOutput {
    pub runs: Vec<SeedRun>,
    pub summary: String,
}

/// Runs the configured variant on every seed; writes one report and one
/// checkpoint per seed plus `run/summary.txt`.
pub fn cmd_run(config: &ExperimentConfig, out: &Path) -> Result<RunOutput, CliError> {
    let dir = out.join("run");
    let mut runs = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let r = run_seed(config, &config.train, seed)?;
        emit_report(&r.report, &dir.join(format!("seed-{seed}.json")))?;
        checkpoint_of(&r.run).save(&checkpoint_path(out, seed))?;
        runs.push(r);
    }
    let mut summary = format_method_table(&config.order(), &[method_row(config.train.variant.name(), &runs)]);
    writeln!(summary, "seeds: {:?}", config.seeds).unwrap();
    write_text(&dir.join("summary.txt"), &summary)?;
    Ok(RunOutput { runs, summary })
}

/// Output of [`cmd_ablate`].
#[derive(Debug)]
pub struct AblationOutput {
    /// Variants in table order, each with its per-seed runs.
    pub rows: Vec<(Variant, Vec<SeedRun>)>,
    pub table: String,
}

/// Runs each variant on identical streams and seeds, in table order.
pub fn cmd_ablate(config: &ExperimentConfig, variants: &[Variant], out: &Path) -> Result<AblationOutput, CliError> {
    if variants.is_empty() {
        return Err(CliError::Usage("no variants selected".into()));
    }
    let dir = out.join("ablate");
    let mut rows = Vec::new();
    for variant in Variant::ALL.into_iter().filter(|v| variants.contains(v)) {
        let train = TrainConfig {
            variant,
            ..config.train.clone()
        };
        let mut runs = Vec::new();
        for &seed in &config.seeds {
            let r = run_seed(config, &train, seed)?;
            emit_report(&r.report, &dir.join(format!("{variant}-seed-{seed}.json")))?;
            runs.push(r);
        }
        rows.push((variant, runs));
    }
    let table_rows: Vec<MethodRow> = rows.iter().map(|(v, runs)| method_row(v.name(), runs)).collect();
    let table = format_method_table(&config.order(), &table_rows);
    write_text(&dir.join("table.txt"), &table)?;
    Ok(AblationOutput { rows, table })
}

/// Key grid `S_v x S_t`, optionally with a prompt length: `3x3` or `2x2x22`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KeySize {
    pub visual: usize,
    pub textual: usize,
    pub prompt_len: Option<usize>,
}

impl FromStr for KeySize {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self, CliError> {
        let bad = || CliError::Usage(format!("invalid key size `{s}`; expected e.g. 3x3 or 2x2x22"));
        let parts = s
            .split('x')
            .map(|p| p.trim().parse::<usize>().map_err(|_| bad()))
            .collect::<Result<Vec<_>, _>>()?;
        if !(2..=3).contains(&parts.len()) || parts.contains(&0) {
            return Err(bad());
        }
        Ok(KeySize {
            visual: parts[0],
            textual: parts[1],
            prompt_len: parts.get(2).copied(),
        })
    }
}

impl std::fmt::Display for KeySize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.visual, self.textual)?;
        if let Some(l) = self.prompt_len {
            write!(f, "x{l}")?;
        }
        Ok(())
    }
}

pub const DEFAULT_SWEEP: &str = "2x2,3x3,4x4,5x5,10x10";

pub fn parse_sizes(list: &str) -> Result<Vec<KeySize>, CliError> {
    let sizes = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<KeySize>, _>>()?;
    if sizes.is_empty() {
        return Err(CliError::Usage("no key sizes given".into()));
    }
    Ok(sizes)
}

/// Output of [`cmd_sweep_keys`].
#[derive(Debug)]
pub struct SweepOutput {
    pub rows: Vec<(KeySize, Vec<SeedRun>)>,
    /// Max minus min of the per-size mean accuracies.
    pub spread: f64,
    pub table: String,
}

/// One run per key size (and prompt length when given).
pub fn cmd_sweep_keys(config: &ExperimentConfig, sizes: &[KeySize], out: &Path) -> Result<SweepOutput, CliError> {
    let dir = out.join("sweep");
    let mut rows = Vec::new();
    for &size in sizes {
        let train = TrainConfig {
            visual_keys: size.visual,
            textual_keys: size.textual,
            prompt_len: size.prompt_len.unwrap_or(config.train.prompt_len),
            ..config.train.clone()
        };
        train.validate()?;
        let mut runs = Vec::new();
        for &seed in &config.seeds {
            let r = run_seed(config, &train, seed)?;
            emit_report(&r.report, &dir.join(format!("{size}-seed-{seed}.json")))?;
            runs.push(r);
        }
        rows.push((size, runs));
    }
    let table_rows: Vec<MethodRow> = rows.iter().map(|(s, runs)| method_row(&s.to_string(), runs)).collect();
    let means: Vec<f64> = table_rows.iter().map(|r| r.accuracy).collect();
    let max = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = means.iter().copied().fold(f64::INFINITY, f64::min);
    let spread = max - min;
    let mut table = format_method_table(&config.order(), &table_rows);
    writeln!(table, "accuracy spread (max - min): {:.6}", 100.0 * spread).unwrap();
    write_text(&dir.join("table.txt"), &table)?;
    Ok(SweepOutput { rows, spread, table })
}

/// Writes PCA plot data of every task's training features, coloured by the
/// keys before and after stage 1: four files per task.
pub fn cmd_viz(config: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    if !checkpoint.is_file() {
        return Err(CliError::Usage(format!(
            "checkpoint {} not found; run `clumo run` first or pass --checkpoint",
            checkpoint.display()
        )));
    }
    let ck = Checkpoint::load(checkpoint)?;
    let seed = config.seeds[0];
    let stream = build_stream(config, seed)?;
    if ck.model.pools.is_empty() {
        return Err(CliError::Runtime("checkpoint has no key pools to visualize".into()));
    }
    let dir = out.join("viz");
    let mut files = Vec::new();
    for (i, pool) in ck.model.pools.iter().enumerate() {
        let task = stream
            .tasks
            .get(pool.task_id())
            .ok_or_else(|| CliError::Usage(format!("checkpoint pool {} has no task in this stream", pool.task_id())))?;
        let encoded = encode_dataset(&ck.model, &task.train)?;
        let features = ModalityFeatures::collect(&encoded, pool.layout())?;
        let (init_v, init_t) = ck.initial_keys.get(i).cloned().flatten().ok_or_else(|| {
            CliError::Runtime(format!("checkpoint has no initial keys for pool {i}"))
        })?;
        let modalities = [
            ("visual", &features.visual, init_v, pool.visual_keys()),
            ("textual", &features.textual, init_t, pool.textual_keys()),
        ];
        for (name, points, before, after) in modalities {
            let pca = pca_project(points, 2)?;
            for (stage, keys) in [("before", &before), ("after", after)] {
                let plot = plot_points(points, &pca.projected, keys, pool.task_id())?;
                let path = dir.join(format!("task-{}-{name}-{stage}.csv", pool.task_id()));
                write_plot_csv(&path, &plot)?;
                files.push(path);
            }
        }
    }
    Ok(files)
}

fn plot_points(points: &Tensor2D, projected: &Tensor2D, keys: &Tensor2D, task_id: usize) -> Result<Vec<PlotPoint>, CliError> {
    points
        .iter_rows()
        .zip(projected.iter_rows())
        .map(|(p, xy)| {
            let (key_id, _) = select_key(p, keys)?;
            Ok(PlotPoint {
                x: xy[0],
                y: xy[1],
                key_id,
                task_id,
            })
        })
        .collect()
}

/// Writes every seed's stream (train and test splits) as JSON lines.
pub fn cmd_export_data(config: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let dir = out.join("data");
    fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for &seed in &config.seeds {
        let stream = build_stream(config, seed)?;
        let sets: Vec<_> = stream.tasks.iter().flat_map(|t| [&t.train, &t.test]).collect();
        let path = dir.join(format!("seed-{seed}.jsonl"));
        let file = fs::File::create(&path).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
        export_datasets(&sets, BufWriter::new(file))
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
        files.push(path);
    }
    Ok(files)
}
