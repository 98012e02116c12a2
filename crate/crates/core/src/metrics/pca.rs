use crate::error::{Error, Result};
use crate::numerics::{matmul, mean_rows, Tensor2D};

/// A fitted principal-component projection.
#[derive(Clone, Debug)]
pub struct PcaProjection {
    /// `N x k` coordinates of the fitted points.
    pub projected: Tensor2D,
    /// Share of total variance per component, non-increasing.
    pub explained_ratio: Vec<f64>,
    /// `k x D` unit directions; the largest-magnitude entry of each is positive.
    pub components: Tensor2D,
    pub mean: Tensor2D,
    /// Set when the data has no variance; coordinates and ratios are then zero.
    pub degenerate: bool,
}

impl PcaProjection {
    /// Projects new points with the fitted mean and components.
    pub fn transform(&self, points: &Tensor2D) -> Result<Tensor2D> {
        let centered = center(points, &self.mean)?;
        matmul(&centered, &self.components.transpose())
    }
}

fn center(points: &Tensor2D, mean: &Tensor2D) -> Result<Tensor2D> {
    if points.cols() != mean.cols() {
        return Err(Error::Shape(format!(
            "points of width {} against a mean of width {}",
            points.cols(),
            mean.cols()
        )));
    }
    let mut out = points.clone();
    for r in 0..out.rows() {
        for (v, m) in out.row_mut(r).iter_mut().zip(mean.as_slice()) {
            *v -= m;
        }
    }
    Ok(out)
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix. Returns
/// eigenvalues and eigenvectors (as columns), unsorted.
fn symmetric_eigen(a: &Tensor2D) -> (Vec<f64>, Tensor2D) {
    let n = a.rows();
    let mut m = a.clone();
    let mut v = Tensor2D::identity(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m.get(p, q) * m.get(p, q);
            }
        }
        let scale: f64 = (0..n).map(|i| m.get(i, i).abs()).sum::<f64>().max(f64::MIN_POSITIVE);
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    ((0..n).map(|i| m.get(i, i)).collect(), v)
}

/// Projects `points` onto their top-`k` principal directions.
pub fn pca_project(points: &Tensor2D, k: usize) -> Result<PcaProjection> {
    let (n, d) = points.shape();
    if n < 2 {
        return Err(Error::Usage(format!("PCA needs at least two points, got {n}")));
    }
    if k == 0 || k > d {
        return Err(Error::Usage(format!("cannot keep {k} components of {d} dimensions")));
    }
    let mean = mean_rows(points)?;
    let centered = center(points, &mean)?;
    let cov = matmul(&centered.transpose(), &centered)?.scale(1.0 / (n - 1) as f64);
    let total: f64 = (0..d).map(|i| cov.get(i, i)).sum();
    if total <= 0.0 {
        return Ok(PcaProjection {
            projected: Tensor2D::zeros(n, k),
            explained_ratio: vec![0.0; k],
            components: Tensor2D::zeros(k, d),
            mean,
            degenerate: true,
        });
    }

    let (values, vectors) = symmetric_eigen(&cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut components = Tensor2D::zeros(k, d);
    let mut explained_ratio = Vec::with_capacity(k);
    for (row, &col) in order.iter().take(k).enumerate() {
        let mut dir: Vec<f64> = (0..d).map(|i| vectors.get(i, col)).collect();
        let pivot = dir
            .iter()
            .copied()
            .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if pivot < 0.0 {
            dir.iter_mut().for_each(|x| *x = -*x);
        }
        components.row_mut(row).copy_from_slice(&dir);
        explained_ratio.push((values[col] / total).clamp(0.0, 1.0));
    }
    let projected = matmul(&centered, &components.transpose())?;
    Ok(PcaProjection {
        projected,
        explained_ratio,
        components,
        mean,
        degenerate: false,
    })
}
