use ndarray::{Array2, ArrayView1, Axis};
use rand::Rng;

use crate::encoder::FeatureMatrix;
use crate::error::{Error, Result};

/// Cluster centres, one row per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub centroids: Array2<f32>,
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub codebook: Codebook,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: ArrayView1<f32>, b: ArrayView1<f32>) -> f64 {
    a.iter().zip(b.iter()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    /// Nearest centroid per row (lowest index wins ties) and its squared distance.
    pub fn nearest(&self, row: ArrayView1<f32>) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (j, c) in self.centroids.axis_iter(Axis(0)).enumerate() {
            let d = sq_dist(row, c);
            if d < best.1 {
                best = (j, d);
            }
        }
        best
    }

    pub fn assign(&self, data: &FeatureMatrix) -> Result<Vec<usize>> {
        if data.ncols() != self.dim() {
            return Err(Error::shape(format!("features have {} dims, codebook has {}", data.ncols(), self.dim())));
        }
        Ok(data.axis_iter(Axis(0)).map(|r| self.nearest(r).0).collect())
    }

    pub fn inertia(&self, data: &FeatureMatrix) -> f64 {
        data.axis_iter(Axis(0)).map(|r| self.nearest(r).1).sum()
    }
}

/// Inertia of an arbitrary assignment, with centroids at the assigned means.
pub fn assignment_inertia(data: &FeatureMatrix, labels: &[usize], k: usize) -> f64 {
    let d = data.ncols();
    let mut sums = Array2::<f64>::zeros((k, d));
    let mut counts = vec![0usize; k];
    for (row, &l) in data.axis_iter(Axis(0)).zip(labels) {
        counts[l] += 1;
        for (s, &v) in sums.row_mut(l).iter_mut().zip(row.iter()) {
            *s += v as f64;
        }
    }
    let mut total = 0.0;
    for (row, &l) in data.axis_iter(Axis(0)).zip(labels) {
        let n = counts[l] as f64;
        total += row.iter().zip(sums.row(l).iter()).map(|(&v, &s)| (v as f64 - s / n).powi(2)).sum::<f64>();
    }
    total
}

/// k-means++ seeding followed by Lloyd iterations. Stops after `max_iters`
/// or once no centroid moves by more than 1e-6.
pub fn kmeans_fit(data: &FeatureMatrix, k: usize, rng: &mut impl Rng, max_iters: usize) -> Result<KMeansFit> {
    let n = data.nrows();
    if k < 2 {
        return Err(Error::invalid(format!("k-means needs K >= 2, got {k}")));
    }
    if n < k {
        return Err(Error::invalid(format!("k-means with K={k} needs at least {k} frames, got {n}")));
    }
    let d = data.ncols();

    // k-means++: first centre uniform, then proportional to squared distance.
    let mut centroids = Array2::<f32>::zeros((k, d));
    centroids.row_mut(0).assign(&data.row(rng.random_range(0..n)));
    let mut closest: Vec<f64> = data.axis_iter(Axis(0)).map(|r| sq_dist(r, centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = closest.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid(format!("k-means with K={k} needs at least {k} distinct frames")));
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, &w) in closest.iter().enumerate() {
            if w > 0.0 && target < w {
                pick = i;
                break;
            }
            target -= w;
        }
        if closest[pick] == 0.0 {
            pick = closest.iter().rposition(|&w| w > 0.0).unwrap_or(pick);
        }
        centroids.row_mut(c).assign(&data.row(pick));
        for (i, r) in data.axis_iter(Axis(0)).enumerate() {
            closest[i] = closest[i].min(sq_dist(r, centroids.row(c)));
        }
    }

    let mut codebook = Codebook { centroids };
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let mut labels = Vec::with_capacity(n);
        let mut inertia = 0.0;
        for r in data.axis_iter(Axis(0)) {
            let (j, dist) = codebook.nearest(r);
            labels.push(j);
            inertia += dist;
        }
        history.push(inertia);

        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (r, &l) in data.axis_iter(Axis(0)).zip(&labels) {
            counts[l] += 1;
            for (s, &v) in sums.row_mut(l).iter_mut().zip(r.iter()) {
                *s += v as f64;
            }
        }
        let mut moved = 0f64;
        for j in 0..k {
            if counts[j] == 0 {
                // An empty cluster keeps its centre; inertia cannot increase.
                continue;
            }
            let cnt = counts[j] as f64;
            let mut shift = 0.0;
            for (c, &s) in codebook.centroids.row_mut(j).iter_mut().zip(sums.row(j).iter()) {
                let new = (s / cnt) as f32;
                shift += (new as f64 - *c as f64).powi(2);
                *c = new;
            }
            moved = moved.max(shift.sqrt());
        }
        if moved < 1e-6 {
            break;
        }
    }
    Ok(KMeansFit { codebook, inertia_history: history, iterations })
}

/// Stacks per-utterance matrices into one frame collection.
pub fn stack_frames(parts: &[FeatureMatrix]) -> Result<FeatureMatrix> {
    let views: Vec<_> = parts.iter().map(|m| m.view()).collect();
    if views.is_empty() {
        return Err(Error::invalid("no feature matrices to stack"));
    }
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))
}
