//! Evaluation: accuracy, forgetting rates, clustering statistics, PCA
//! projections for cluster plots, and run reports.

mod pca;
mod report;

pub use pca::{pca_project, PcaProjection};
pub use report::{
    emit_report, format_method_table, read_plot_csv, read_report, write_plot_csv, ClusteringError, ForgettingSection,
    MethodRow, PlotPoint, ReportMetrics, RunReport, Timing,
};

use crate::continual::AccuracyMatrix;
use crate::error::{Error, Result};
use crate::numerics::{l2_distance, Tensor2D};

/// Fraction of exact matches.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Usage(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Usage("accuracy of an empty split".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Relative accuracy drops `(A[i][i] - A[i][last]) / A[i][i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Forgetting {
    /// One entry per task before the last; `None` where `A[i][i] == 0`.
    pub per_task: Vec<Option<f64>>,
    /// Mean over the defined entries.
    pub average: Option<f64>,
    /// Tasks left out because their own accuracy was zero.
    pub excluded: Vec<usize>,
    /// Set when the stream has fewer than two tasks.
    pub undefined: bool,
}

pub fn forgetting(a: &AccuracyMatrix) -> Result<Forgetting> {
    let n = a.num_tasks();
    if !a.is_complete() {
        return Err(Error::Usage("accuracy matrix has missing entries".into()));
    }
    if n < 2 {
        return Ok(Forgetting {
            per_task: Vec::new(),
            average: None,
            excluded: Vec::new(),
            undefined: true,
        });
    }
    let last = n - 1;
    let mut per_task = Vec::with_capacity(last);
    let mut excluded = Vec::new();
    for i in 0..last {
        let own = a.get(i, i).expect("complete");
        let fin = a.get(i, last).expect("complete");
        if own == 0.0 {
            excluded.push(i);
            per_task.push(None);
        } else {
            per_task.push(Some((own - fin) / own));
        }
    }
    let defined: Vec<f64> = per_task.iter().flatten().copied().collect();
    let average = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(Forgetting {
        per_task,
        average,
        excluded,
        undefined: false,
    })
}

/// Accuracy on the first task after each training step.
pub fn first_task_curve(a: &AccuracyMatrix) -> Vec<f64> {
    (0..a.num_tasks()).filter_map(|j| a.get(0, j)).collect()
}

/// Mean of `A[i][last]` over all tasks.
pub fn average_accuracy(a: &AccuracyMatrix) -> Option<f64> {
    let n = a.num_tasks();
    if n == 0 {
        return None;
    }
    let vals: Vec<f64> = (0..n).filter_map(|i| a.get(i, n - 1)).collect();
    (vals.len() == n).then(|| vals.iter().sum::<f64>() / n as f64)
}

/// Ratio of mean point-to-own-centroid distance to mean pairwise distance
/// between the centroids of non-empty clusters. Smaller is better separated.
///
/// `None` when fewer than two clusters are populated.
pub fn cluster_separation(points: &Tensor2D, assignments: &[usize]) -> Option<f64> {
    assert_eq!(points.rows(), assignments.len(), "one assignment per point");
    let k = assignments.iter().copied().max()? + 1;
    let dim = points.cols();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter_rows().zip(assignments) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p) {
            *s += v;
        }
    }
    let centroids: Vec<Option<Vec<f64>>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
        .collect();
    let live: Vec<&Vec<f64>> = centroids.iter().flatten().collect();
    if live.len() < 2 {
        return None;
    }
    let intra = points
        .iter_rows()
        .zip(assignments)
        .map(|(p, &a)| l2_distance(p, centroids[a].as_ref().expect("populated")).expect("same width"))
        .sum::<f64>()
        / points.rows() as f64;
    let mut inter = 0.0;
    let mut pairs = 0;
    for i in 0..live.len() {
        for j in (i + 1)..live.len() {
            inter += l2_distance(live[i], live[j]).expect("same width");
            pairs += 1;
        }
    }
    let inter = inter / pairs as f64;
    if inter == 0.0 {
        return Some(f64::INFINITY);
    }
    Some(intra / inter)
}
