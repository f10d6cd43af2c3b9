//! Standardized feature space for distance-based routines.
//!
//! Distance-based attacks and defenses operate on features standardized to
//! zero mean and unit variance (computed on the possibly-poisoned training
//! set); models always train on raw features.

use crate::dataset::Dataset;

pub(crate) struct StandardizedSpace {
    values: Vec<f64>,
    n: usize,
    d: usize,
}

impl StandardizedSpace {
    pub fn new(data: &Dataset) -> Self {
        let n = data.len();
        let d = data.n_features();
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (f, &v) in data.features(i).iter().enumerate() {
                mean[f] += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; d];
        for i in 0..n {
            for (f, &v) in data.features(i).iter().enumerate() {
                var[f] += (v - mean[f]) * (v - mean[f]);
            }
        }
        let mut values = vec![0.0; n * d];
        for f in 0..d {
            let std = (var[f] / n as f64).sqrt();
            if std > 0.0 {
                for i in 0..n {
                    values[i * d + f] = (data.value(i, f) - mean[f]) / std;
                }
            }
            // constant features carry no distance information and stay 0
        }
        StandardizedSpace { values, n, d }
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        let xa = &self.values[a * self.d..(a + 1) * self.d];
        let xb = &self.values[b * self.d..(b + 1) * self.d];
        xa.iter()
            .zip(xb)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    /// Indices of the `k` nearest neighbors of `i` (self excluded), ordered
    /// by `(distance, index)`.
    pub fn nearest_neighbors(&self, i: usize, k: usize) -> Vec<usize> {
        let mut others: Vec<(f64, usize)> = (0..self.n)
            .filter(|&j| j != i)
            .map(|j| (self.distance(i, j), j))
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        others.truncate(k);
        others.into_iter().map(|(_, j)| j).collect()
    }
}
