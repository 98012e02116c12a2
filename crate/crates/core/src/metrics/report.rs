use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{average_accuracy, first_task_curve, forgetting};
use crate::continual::AccuracyMatrix;
use crate::error::{Error, Result};

static WRITE_LOCK: Mutex<()> = Mutex::new(());

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteringError {
    pub visual: f64,
    pub textual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingSection {
    pub per_task: Vec<Option<f64>>,
    pub average: Option<f64>,
    pub excluded: Vec<usize>,
    pub undefined: bool,
}

/// Everything in a report that must be reproducible from config and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetrics {
    pub task_order: String,
    pub variant: String,
    pub seed: u64,
    /// `accuracy[i][j]`, `null` below the diagonal.
    pub accuracy: Vec<Vec<Option<f64>>>,
    pub average_accuracy: f64,
    pub forgetting: ForgettingSection,
    pub clustering_error: Option<ClusteringError>,
    pub first_task_curve: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: serde_json::Value,
    pub metrics: ReportMetrics,
    pub timing: Timing,
}

impl RunReport {
    pub fn new(
        config: serde_json::Value,
        task_order: &str,
        variant: &str,
        seed: u64,
        accuracy: &AccuracyMatrix,
        clustering_error: Option<(f64, f64)>,
        wall_seconds: f64,
    ) -> Result<Self> {
        if accuracy.num_tasks() == 0 {
            return Err(Error::Usage("cannot report an empty run".into()));
        }
        let f = forgetting(accuracy)?;
        let report = Self {
            config,
            metrics: ReportMetrics {
                task_order: task_order.to_string(),
                variant: variant.to_string(),
                seed,
                accuracy: accuracy.rows().to_vec(),
                average_accuracy: average_accuracy(accuracy).expect("complete matrix"),
                forgetting: ForgettingSection {
                    per_task: f.per_task,
                    average: f.average,
                    excluded: f.excluded,
                    undefined: f.undefined,
                },
                clustering_error: clustering_error.map(|(visual, textual)| ClusteringError { visual, textual }),
                first_task_curve: first_task_curve(accuracy),
            },
            timing: Timing { wall_seconds },
        };
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.metrics;
        if m.accuracy.is_empty() {
            return Err(Error::Usage("cannot report an empty run".into()));
        }
        let matrix = AccuracyMatrix::from_rows(m.accuracy.clone())?;
        if !matrix.is_complete() {
            return Err(Error::Usage("accuracy matrix has missing entries".into()));
        }
        if m.task_order.chars().count() != matrix.num_tasks() {
            return Err(Error::Usage(format!(
                "task order `{}` does not match {} tasks",
                m.task_order,
                matrix.num_tasks()
            )));
        }
        if let Some(c) = m.clustering_error {
            if !(c.visual >= 0.0 && c.textual >= 0.0) {
                return Err(Error::Usage("clustering error must be non-negative".into()));
            }
        }
        Ok(())
    }

    /// Serialized `metrics` section; identical across reruns of the same config and seed.
    pub fn metrics_json(&self) -> String {
        serde_json::to_string_pretty(&self.metrics).expect("metrics serialize")
    }

    /// A/F table: the matrix as percentages, then average accuracy and forgetting.
    pub fn human_table(&self) -> String {
        let m = &self.metrics;
        let n = m.accuracy.len();
        let mut out = String::new();
        writeln!(out, "task order: {}  variant: {}  seed: {}", m.task_order, m.variant, m.seed).unwrap();
        write!(out, "{:>6}", "A[i][j]").unwrap();
        for c in m.task_order.chars() {
            write!(out, " {:>12}", format!("after {c}")).unwrap();
        }
        out.push('\n');
        for (i, row) in m.accuracy.iter().enumerate() {
            write!(out, "{:>7}", m.task_order.chars().nth(i).unwrap_or('?')).unwrap();
            for v in row.iter().take(n) {
                match v {
                    Some(a) => write!(out, " {:>12.6}", 100.0 * a).unwrap(),
                    None => write!(out, " {:>12}", "-").unwrap(),
                }
            }
            out.push('\n');
        }
        writeln!(out, "{:>12} {:>12}", "A", "F").unwrap();
        writeln!(out, "{:>12.6} {:>12}", 100.0 * m.average_accuracy, percent(m.forgetting.average)).unwrap();
        if let Some(c) = m.clustering_error {
            writeln!(out, "clustering error: visual {:.6} textual {:.6}", c.visual, c.textual).unwrap();
        }
        out
    }
}

fn percent(v: Option<f64>) -> String {
    v.map(|x| format!("{:.6}", 100.0 * x)).unwrap_or_else(|| "n/a".into())
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes the JSON report at `path` and the human table next to it as `.txt`.
pub fn emit_report(report: &RunReport, path: &Path) -> Result<()> {
    report.validate()?;
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Parse(e.to_string()))?;
    let _guard = WRITE_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    write_atomic(path, &(json + "\n"))?;
    write_atomic(&path.with_extension("txt"), &report.human_table())
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let report: RunReport = serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    report.validate()?;
    Ok(report)
}

/// One line of a method comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub accuracy: f64,
    pub accuracy_std: Option<f64>,
    pub forgetting: Option<f64>,
    pub forgetting_std: Option<f64>,
}

pub fn format_method_table(task_order: &str, rows: &[MethodRow]) -> String {
    let mut out = String::new();
    writeln!(out, "task order: {task_order}").unwrap();
    writeln!(out, "{:<14} {:>24} {:>24}", "method", "A", "F").unwrap();
    for r in rows {
        let a = with_std(Some(r.accuracy), r.accuracy_std);
        let f = with_std(r.forgetting, r.forgetting_std);
        writeln!(out, "{:<14} {:>24} {:>24}", r.method, a, f).unwrap();
    }
    out
}

fn with_std(v: Option<f64>, std: Option<f64>) -> String {
    match (v, std) {
        (Some(v), Some(s)) => format!("{:.6} ± {:.6}", 100.0 * v, 100.0 * s),
        (v, _) => percent(v),
    }
}

/// A projected feature with the key it was assigned to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlotPoint {
    pub x: f64,
    pub y: f64,
    pub key_id: usize,
    pub task_id: usize,
}

pub fn write_plot_csv(path: &Path, points: &[PlotPoint]) -> Result<()> {
    let mut out = String::from("x,y,key_id,task_id\n");
    for p in points {
        writeln!(out, "{},{},{},{}", p.x, p.y, p.key_id, p.task_id).unwrap();
    }
    let _guard = WRITE_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    write_atomic(path, &out)
}

pub fn read_plot_csv(path: &Path) -> Result<Vec<PlotPoint>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("x,y,key_id,task_id") {
        return Err(Error::Parse(format!("{}: missing plot header", path.display())));
    }
    lines
        .enumerate()
        .map(|(n, line)| {
            let bad = || Error::Parse(format!("{}:{}: malformed row `{line}`", path.display(), n + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(PlotPoint {
                x: f[0].parse().map_err(|_| bad())?,
                y: f[1].parse().map_err(|_| bad())?,
                key_id: f[2].parse().map_err(|_| bad())?,
                task_id: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn sample_matrix(seed: u64, n: usize) -> AccuracyMatrix {
        let mut rng = Rng::new(seed);
        let mut a = AccuracyMatrix::new(n);
        for i in 0..n {
            for j in i..n {
                a.set(i, j, rng.uniform(0.1, 1.0)).unwrap();
            }
        }
        a
    }

    fn sample_report() -> RunReport {
        RunReport::new(
            serde_json::json!({"train": {"lr": 0.5}}),
            "abcd",
            "clumo",
            7,
            &sample_matrix(1, 4),
            Some((0.123456789012345, 2.0 / 3.0)),
            1.25,
        )
        .unwrap()
    }

    #[test]
    fn average_matches_last_column() {
        let r = sample_report();
        let mean: f64 = r.metrics.accuracy.iter().map(|row| row[3].unwrap()).sum::<f64>() / 4.0;
        assert!((r.metrics.average_accuracy - mean).abs() < 1e-15);
        assert_eq!(r.metrics.first_task_curve.len(), 4);
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        let r = sample_report();
        emit_report(&r, &path).unwrap();
        let back = read_report(&path).unwrap();
        assert_eq!(back, r);
        let table = fs::read_to_string(path.with_extension("txt")).unwrap();
        assert!(table.starts_with("task order: abcd"));
    }

    #[test]
    fn empty_run_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.json");
        assert!(RunReport::new(serde_json::Value::Null, "", "clumo", 0, &AccuracyMatrix::new(0), None, 0.0).is_err());
        let mut r = sample_report();
        r.metrics.accuracy.clear();
        assert!(emit_report(&r, &path).is_err());
        assert!(!path.exists());
        assert!(!path.with_extension("txt").exists());
    }

    #[test]
    fn unwritable_path_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let err = emit_report(&sample_report(), &blocker.join("run.json")).unwrap_err();
        assert!(err.to_string().contains("file"));
    }

    #[test]
    fn method_table_lists_rows() {
        let rows = vec![
            MethodRow {
                method: "clumo".into(),
                accuracy: 0.5,
                accuracy_std: Some(0.01),
                forgetting: Some(0.1),
                forgetting_std: None,
            },
            MethodRow {
                method: "finetune".into(),
                accuracy: 0.25,
                accuracy_std: None,
                forgetting: None,
                forgetting_std: None,
            },
        ];
        let t = format_method_table("abcd", &rows);
        assert!(t.contains("50.000000 ± 1.000000"));
        assert!(t.contains("n/a"));
        assert_eq!(t.lines().count(), 4);
    }

    #[test]
    fn plot_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let pts = vec![
            PlotPoint { x: 0.1, y: -1e-300, key_id: 2, task_id: 0 },
            PlotPoint { x: 1.0 / 3.0, y: 5.0, key_id: 0, task_id: 3 },
        ];
        write_plot_csv(&path, &pts).unwrap();
        assert_eq!(read_plot_csv(&path).unwrap(), pts);
        fs::write(&path, "x,y,key_id,task_id\n1,2,3\n").unwrap();
        assert!(read_plot_csv(&path).is_err());
    }
}
