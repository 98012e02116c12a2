use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor2D};

use super::select_key;

/// Stopping and batching parameters for mini-batch K-means.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansSettings {
    pub batch_size: usize,
    pub max_iters: usize,
    /// Stop once no center moves farther than this in one iteration.
    pub tol: f64,
}

impl Default for KMeansSettings {
    fn default() -> Self {
        Self {
            batch_size: 128,
            max_iters: 200,
            tol: 1e-5,
        }
    }
}

/// Where the first centers come from.
#[derive(Clone, Debug)]
pub enum KeyInit {
    /// `k` distinct points drawn uniformly from the first batch.
    SampleFirstBatch,
    Given(Tensor2D),
}

/// Summary of a clustering run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    /// Points assigned to each key in the last pass.
    pub counts: Vec<usize>,
    /// Mean distance of those points to the key they were assigned to.
    pub mean_distances: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Mean squared distance to the assigned key, one entry per pass.
    pub objective: Vec<f64>,
}

/// Result of [`mini_batch_kmeans`].
#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub centers: Tensor2D,
    pub initial_centers: Tensor2D,
    pub stats: ClusterStats,
}

fn draw_batch(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<usize> {
    if batch_size >= n {
        (0..n).collect()
    } else {
        let mut idx = rng.sample_distinct(n, batch_size);
        idx.sort_unstable();
        idx
    }
}

/// Mini-batch K-means where every center is replaced by the plain mean of the
/// batch points assigned to it; centers with no assignment keep their value.
///
/// With `batch_size >= points.rows()` this is Lloyd's algorithm.
pub fn mini_batch_kmeans(
    points: &Tensor2D,
    k: usize,
    init: KeyInit,
    settings: &KMeansSettings,
    rng: &mut Rng,
) -> Result<KMeansFit> {
    let n = points.rows();
    if n == 0 {
        return Err(Error::Usage("cannot cluster an empty dataset".into()));
    }
    if k == 0 {
        return Err(Error::Usage("need at least one center".into()));
    }
    if settings.batch_size < k {
        return Err(Error::Usage(format!(
            "batch size {} is smaller than the {k} centers",
            settings.batch_size
        )));
    }
    let dim = points.cols();
    let mut centers: Option<Tensor2D> = match init {
        KeyInit::Given(c) => {
            if c.shape() != (k, dim) {
                return Err(Error::Shape(format!(
                    "initial centers {:?}, expected {k}x{dim}",
                    c.shape()
                )));
            }
            Some(c)
        }
        KeyInit::SampleFirstBatch => None,
    };
    let mut initial = centers.clone();
    let mut stats = ClusterStats {
        counts: vec![0; k],
        mean_distances: vec![0.0; k],
        iterations: 0,
        converged: false,
        objective: Vec::new(),
    };

    while stats.iterations < settings.max_iters {
        let batch = draw_batch(n, settings.batch_size, rng);
        let current = centers.get_or_insert_with(|| {
            let picks = rng.sample_distinct(batch.len(), k);
            let chosen: Vec<usize> = picks.iter().map(|&p| batch[p]).collect();
            let c = points.select_rows(&chosen);
            initial = Some(c.clone());
            c
        });
        // Fewer distinct batch points than centers leaves the tail of an
        // initial sample short; pad by repeating the last row.
        if current.rows() < k {
            let mut rows: Vec<usize> = (0..current.rows()).collect();
            rows.resize(k, current.rows() - 1);
            *current = current.select_rows(&rows);
            initial = Some(current.clone());
        }

        let mut sums = Tensor2D::zeros(k, dim);
        let mut counts = vec![0usize; k];
        let mut dist_sums = vec![0.0; k];
        let mut sq_sum = 0.0;
        for &i in &batch {
            let p = points.row(i);
            let (key, d) = select_key(p, current)?;
            counts[key] += 1;
            dist_sums[key] += d;
            sq_sum += d * d;
            for (s, v) in sums.row_mut(key).iter_mut().zip(p) {
                *s += v;
            }
        }
        stats.objective.push(sq_sum / batch.len() as f64);

        let mut displacement: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let inv = 1.0 / counts[c] as f64;
            let mut moved = 0.0;
            for (old, s) in current.row_mut(c).iter_mut().zip(sums.row(c)) {
                let new = s * inv;
                moved += (new - *old) * (new - *old);
                *old = new;
            }
            displacement = displacement.max(moved.sqrt());
        }
        stats.mean_distances = dist_sums
            .iter()
            .zip(&counts)
            .map(|(&d, &c)| if c == 0 { 0.0 } else { d / c as f64 })
            .collect();
        stats.counts = counts;
        stats.iterations += 1;
        if displacement < settings.tol {
            stats.converged = true;
            break;
        }
    }

    let centers = centers.expect("at least one iteration when max_iters > 0 and points exist");
    Ok(KMeansFit {
        initial_centers: initial.unwrap_or_else(|| centers.clone()),
        centers,
        stats,
    })
}
