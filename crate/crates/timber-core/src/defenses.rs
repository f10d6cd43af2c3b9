//! Defenses against label-flipping poisoning: kNN-based training-data
//! sanitization and hash-bagging robust training.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{round_half_up, Dataset, Label};
use crate::ensemble::{forest_train, Forest, ForestParams};
use crate::error::{Error, Result};
use crate::metrics::Predictor;
use crate::space::StandardizedSpace;

/// kNN sanitization hyperparameters. The tuning grid is
/// `N in {4,8,12}`, `eta in {0.6,0.75,0.9}`, `M in {1,3,5}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnnDefenseParams {
    pub n_neighbors: usize,
    pub eta: f64,
    pub iterations: usize,
}

impl KnnDefenseParams {
    pub fn new(n_neighbors: usize, eta: f64, iterations: usize) -> Self {
        KnnDefenseParams {
            n_neighbors,
            eta,
            iterations,
        }
    }
}

/// Hash-bagging hyperparameters. The tuning grid is `G in {5,10,...,40}`,
/// `K in {20%,10%,5%,2.5%}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaggingDefenseParams {
    pub n_subsets: usize,
    pub subset_fraction: f64,
    pub seed: u64,
}

impl BaggingDefenseParams {
    pub fn new(n_subsets: usize, subset_fraction: f64, seed: u64) -> Self {
        BaggingDefenseParams {
            n_subsets,
            subset_fraction,
            seed,
        }
    }
}

/// Relabel every instance whose `N` nearest neighbors (standardized
/// Euclidean distance, self excluded) agree on a label with fraction
/// strictly above `eta`, repeated for `iterations` rounds. Relabeling is
/// computed against iteration-start labels and applied simultaneously, so
/// instance order never matters; a fixpoint ends the loop early with the
/// same result.
pub fn knn_sanitize(d: &Dataset, p: &KnnDefenseParams) -> Result<Dataset> {
    let n = d.len();
    if p.n_neighbors == 0 {
        return Err(Error::InvalidParams("N must be >= 1".to_string()));
    }
    if p.n_neighbors >= n {
        return Err(Error::InvalidParams(format!(
            "N = {} must be smaller than the dataset size {}",
            p.n_neighbors, n
        )));
    }
    if !(p.eta > 0.0 && p.eta <= 1.0) {
        return Err(Error::InvalidParams(format!(
            "eta = {} outside (0, 1]",
            p.eta
        )));
    }

    let space = StandardizedSpace::new(d);
    // Features never change across iterations, so neighbor lists are fixed.
    let neighbors: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| space.nearest_neighbors(i, p.n_neighbors))
        .collect();

    let mut labels = d.effective_labels();
    for _ in 0..p.iterations {
        let mut next = labels.clone();
        let mut changed = false;
        for i in 0..n {
            let pos = neighbors[i]
                .iter()
                .filter(|&&j| labels[j] == Label::Pos)
                .count();
            let neg = p.n_neighbors - pos;
            let (majority, count) = if pos > neg {
                (Label::Pos, pos)
            } else if neg > pos {
                (Label::Neg, neg)
            } else {
                continue; // no strict majority among the neighbors
            };
            if count as f64 / p.n_neighbors as f64 > p.eta && next[i] != majority {
                next[i] = majority;
                changed = true;
            }
        }
        labels = next;
        if !changed {
            break;
        }
    }
    d.replace_labels(labels)
}

/// A bagging ensemble trained on hash-selected subsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaggedModel {
    pub models: Vec<Forest>,
    pub params: BaggingDefenseParams,
}

impl BaggedModel {
    /// Hard majority vote over the base classifiers; ties go to `+1`.
    pub fn predict(&self, x: &[f64]) -> Label {
        let pos = self
            .models
            .iter()
            .filter(|m| m.predict(x) == Label::Pos)
            .count();
        if 2 * pos >= self.models.len() {
            Label::Pos
        } else {
            Label::Neg
        }
    }
}

impl Predictor for BaggedModel {
    fn predict_one(&self, x: &[f64]) -> Label {
        self.predict(x)
    }
}

/// Fixed 64-bit mixing function used for subset selection, pinned by golden
/// tests so subsets stay stable across releases.
pub fn hash64(seed: u64, subset: u64, index: u64) -> u64 {
    fn splitmix64(x: u64) -> u64 {
        let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix64(splitmix64(splitmix64(seed) ^ subset) ^ index)
}

/// Deterministic hash-selected subsets: subset `g` holds the
/// `round(K * n)` instance indices with the smallest `hash64(seed, g, i)`.
/// A pure function of `(seed, G, K, n)`, independent of data content.
pub fn hash_bagging_subsets(n: usize, p: &BaggingDefenseParams) -> Result<Vec<Vec<usize>>> {
    let size = round_half_up(p.subset_fraction * n as f64);
    if size < 2 {
        return Err(Error::InvalidParams(format!(
            "subset fraction {} of {} instances yields {} instances, need >= 2",
            p.subset_fraction, n, size
        )));
    }
    if p.n_subsets == 0 {
        return Err(Error::InvalidParams("G must be >= 1".to_string()));
    }
    let size = size.min(n);
    Ok((1..=p.n_subsets as u64)
        .map(|g| {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by_key(|&i| (hash64(p.seed, g, i as u64), i));
            let mut subset = order[..size].to_vec();
            subset.sort_unstable();
            subset
        })
        .collect())
}

/// Train one base classifier per hash-selected subset.
pub fn hash_bagging_train(
    d: &Dataset,
    p: &BaggingDefenseParams,
    base_params: &ForestParams,
) -> Result<BaggedModel> {
    base_params.validate()?;
    let subsets = hash_bagging_subsets(d.len(), p)?;
    let models: Vec<Forest> = subsets
        .par_iter()
        .enumerate()
        .map(|(g, subset)| {
            let sub = d.subset(subset, format!("{}-bag{}", d.name(), g + 1))?;
            Ok(forest_train(&sub, base_params)?.0)
        })
        .collect::<Result<_>>()?;
    Ok(BaggedModel { models, params: *p })
}

/// Majority-vote prediction of a bagged model.
pub fn bagged_predict(m: &BaggedModel, x: &[f64]) -> Label {
    m.predict(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cluster_dataset() -> Dataset {
        // 20 tightly clustered points, all positive.
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 * 0.01, 0.0]).collect();
        let labels = vec![Label::Pos; 20];
        Dataset::from_parts("cluster", rows, labels).unwrap()
    }

    #[test]
    fn knn_homogeneous_dataset_is_fixed_point() {
        let d = cluster_dataset();
        let out = knn_sanitize(&d, &KnnDefenseParams::new(8, 0.75, 3)).unwrap();
        for i in 0..d.len() {
            assert_eq!(out.effective_label(i), Label::Pos);
            assert_eq!(out.features(i), d.features(i));
        }
    }

    #[test]
    fn knn_reverts_single_flip_in_tight_cluster() {
        let d = cluster_dataset().apply_flip(7).unwrap();
        assert_eq!(d.effective_label(7), Label::Neg);
        let out = knn_sanitize(&d, &KnnDefenseParams::new(8, 0.75, 1)).unwrap();
        for i in 0..d.len() {
            assert_eq!(out.effective_label(i), Label::Pos, "instance {i}");
        }
    }

    #[test]
    fn knn_exact_eta_boundary_does_not_relabel() {
        // Instance 0 has 4 neighbors: 3 positive, 1 negative. With
        // eta = 0.75 the agreement 3/4 is not strictly greater, no relabel.
        let rows = vec![
            vec![0.0],
            vec![0.1],
            vec![0.2],
            vec![0.3],
            vec![0.4],
            vec![100.0],
        ];
        let labels = vec![
            Label::Neg, // the instance under test
            Label::Pos,
            Label::Pos,
            Label::Pos,
            Label::Neg,
            Label::Pos, // far away, never a neighbor
        ];
        let d = Dataset::from_parts("b", rows, labels).unwrap();
        let out = knn_sanitize(&d, &KnnDefenseParams::new(4, 0.75, 1)).unwrap();
        assert_eq!(out.effective_label(0), Label::Neg);

        // With eta = 0.7 the same 3/4 majority is strictly greater.
        let out = knn_sanitize(&d, &KnnDefenseParams::new(4, 0.7, 1)).unwrap();
        assert_eq!(out.effective_label(0), Label::Pos);
    }

    #[test]
    fn knn_requires_enough_instances() {
        let d = cluster_dataset();
        assert!(matches!(
            knn_sanitize(&d, &KnnDefenseParams::new(20, 0.75, 1)),
            Err(Error::InvalidParams(_))
        ));
    }

    #[test]
    fn knn_is_idempotent_after_fixpoint() {
        let d = cluster_dataset().apply_flip(3).unwrap();
        let once = knn_sanitize(&d, &KnnDefenseParams::new(8, 0.75, 1)).unwrap();
        let many = knn_sanitize(&d, &KnnDefenseParams::new(8, 0.75, 5)).unwrap();
        for i in 0..d.len() {
            assert_eq!(once.effective_label(i), many.effective_label(i));
        }
    }

    #[test]
    fn hash64_golden_values() {
        // Pinned: changing the mixing function changes every subset.
        assert_eq!(hash64(0, 0, 0), 0x2382_75bc_38fc_be91);
        assert_eq!(hash64(0, 1, 2), 0x5def_8c1f_8a9e_3322);
        assert_eq!(hash64(42, 7, 123), 0x3b0f_fb70_93fc_156f);
    }

    #[test]
    fn subsets_have_exact_size_and_are_deterministic() {
        let p = BaggingDefenseParams::new(5, 0.25, 9);
        let a = hash_bagging_subsets(40, &p).unwrap();
        let b = hash_bagging_subsets(40, &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        for subset in &a {
            assert_eq!(subset.len(), 10);
        }
        // Subsets differ across g (near-uniform selection).
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn subsets_are_data_independent() {
        let p = BaggingDefenseParams::new(3, 0.5, 1);
        let from_n = hash_bagging_subsets(20, &p).unwrap();
        let again = hash_bagging_subsets(20, &p).unwrap();
        assert_eq!(from_n, again);
    }

    #[test]
    fn empty_subset_errors() {
        let p = BaggingDefenseParams::new(3, 0.01, 1);
        assert!(matches!(
            hash_bagging_subsets(20, &p),
            Err(Error::InvalidParams(_))
        ));
    }

    fn toy_dataset() -> Dataset {
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|i| vec![i as f64, (i * i % 7) as f64])
            .collect();
        let labels = (0..12)
            .map(|i| if i < 6 { Label::Pos } else { Label::Neg })
            .collect();
        Dataset::from_parts("toy", rows, labels).unwrap()
    }

    #[test]
    fn full_fraction_single_bag_equals_undefended_model() {
        let d = toy_dataset();
        let base = ForestParams::new(1, 3);
        let bagged =
            hash_bagging_train(&d, &BaggingDefenseParams::new(1, 1.0, 5), &base).unwrap();
        let (undefended, _) = forest_train(&d, &base).unwrap();
        for i in 0..d.len() {
            assert_eq!(
                bagged.predict(d.features(i)),
                undefended.predict(d.features(i))
            );
        }
    }

    #[test]
    fn bagged_training_is_deterministic() {
        let d = toy_dataset();
        let base = ForestParams::new(1, 3);
        let p = BaggingDefenseParams::new(4, 0.5, 3);
        let a = hash_bagging_train(&d, &p, &base).unwrap();
        let b = hash_bagging_train(&d, &p, &base).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bagged_vote_tie_goes_positive() {
        let d = toy_dataset();
        let base = ForestParams::new(1, 1);
        // Two bases voting differently is data-dependent; check the tie rule
        // through the predict implementation directly instead.
        let bagged = hash_bagging_train(&d, &BaggingDefenseParams::new(2, 0.5, 1), &base).unwrap();
        for i in 0..d.len() {
            let votes: Vec<Label> = bagged
                .models
                .iter()
                .map(|m| m.predict(d.features(i)))
                .collect();
            let pos = votes.iter().filter(|&&v| v == Label::Pos).count();
            let expected = if 2 * pos >= votes.len() {
                Label::Pos
            } else {
                Label::Neg
            };
            assert_eq!(bagged_predict(&bagged, d.features(i)), expected);
        }
    }

    #[test]
    fn single_base_predicts_like_that_base() {
        let d = toy_dataset();
        let base = ForestParams::new(1, 2);
        let bagged = hash_bagging_train(&d, &BaggingDefenseParams::new(1, 0.5, 2), &base).unwrap();
        for i in 0..d.len() {
            assert_eq!(
                bagged.predict(d.features(i)),
                bagged.models[0].predict(d.features(i))
            );
        }
    }
}
