//! Random-forest training without bootstrap sampling, hard-majority
//! prediction, per-tree annotation, and ensemble flip-retraining.
//!
//! Every tree is trained on the full training set; with feature subsampling
//! disabled (the default) the trees are structurally identical, matching the
//! no-bootstrap configuration under evaluation. A per-tree feature subset is
//! available behind [`ForestParams::feature_subsample`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotation::{annotate, flip_retrain, instance_score, AnnotatedTree};
use crate::dataset::{round_half_up, Dataset, Label};
use crate::error::{Error, Result};
use crate::metrics::Predictor;
use crate::tree::{tree_train_with, TreeParams};

/// Forest hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub tree_params: TreeParams,
    /// When set, tree `i` enumerates splits over a seeded random fraction of
    /// the features. Off by default.
    pub feature_subsample: Option<f64>,
    pub seed: u64,
}

impl ForestParams {
    pub fn new(n_trees: usize, max_depth: usize) -> Self {
        ForestParams {
            n_trees,
            tree_params: TreeParams::new(max_depth),
            feature_subsample: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trees < 1 {
            return Err(Error::InvalidParams("n_trees must be >= 1".to_string()));
        }
        self.tree_params.validate()
    }
}

/// How per-tree instance scores are combined into an ensemble score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreAggregation {
    Mean,
    Max,
}

/// An ensemble of annotated trees trained on the same dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<AnnotatedTree>,
    /// Feature universe of each tree; `None` means all features.
    pub feature_subsets: Vec<Option<Vec<usize>>>,
    pub params: ForestParams,
}

pub const FOREST_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ForestDocument {
    version: u32,
    forest: Forest,
}

impl Forest {
    /// Hard-majority prediction; ties go to `+1`, mirroring the leaf rule.
    pub fn predict(&self, x: &[f64]) -> Label {
        let pos = self
            .trees
            .iter()
            .filter(|t| t.predict(x) == Label::Pos)
            .count();
        if 2 * pos >= self.trees.len() {
            Label::Pos
        } else {
            Label::Neg
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&ForestDocument {
            version: FOREST_FORMAT_VERSION,
            forest: self.clone(),
        })
        .expect("forest serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Forest> {
        let doc: ForestDocument =
            serde_json::from_str(s).map_err(|e| Error::Config(format!("bad forest json: {e}")))?;
        if doc.version != FOREST_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported forest format version {}",
                doc.version
            )));
        }
        Ok(doc.forest)
    }
}

impl Predictor for Forest {
    fn predict_one(&self, x: &[f64]) -> Label {
        self.predict(x)
    }
}

fn subsample_features(d: usize, fraction: f64, seed: u64, tree_index: usize) -> Result<Vec<usize>> {
    let count = round_half_up(fraction * d as f64);
    if count == 0 {
        return Err(Error::InvalidParams(format!(
            "feature_subsample {} of {} features yields an empty subset",
            fraction, d
        )));
    }
    let count = count.min(d);
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed.wrapping_add((tree_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
    let mut subset = rand::seq::index::sample(&mut rng, d, count).into_vec();
    subset.sort_unstable();
    Ok(subset)
}

/// Train `n_trees` annotated trees on the full training set. Returns the
/// forest and the total training workload (sum of per-tree root region
/// sizes).
pub fn forest_train(d: &Dataset, params: &ForestParams) -> Result<(Forest, u64)> {
    params.validate()?;
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let region: Vec<usize> = (0..d.len()).collect();
    let feature_subsets: Vec<Option<Vec<usize>>> = (0..params.n_trees)
        .map(|i| match params.feature_subsample {
            Some(frac) => subsample_features(d.n_features(), frac, params.seed, i).map(Some),
            None => Ok(None),
        })
        .collect::<Result<_>>()?;

    let trees: Vec<AnnotatedTree> = feature_subsets
        .par_iter()
        .map(|subset| {
            let features = subset.as_deref();
            let (tree, _) = tree_train_with(d, &region, &params.tree_params, features)?;
            annotate(&tree, d, &params.tree_params, features)
        })
        .collect::<Result<_>>()?;

    let workload = (d.len() as u64) * (params.n_trees as u64);
    Ok((
        Forest {
            trees,
            feature_subsets,
            params: *params,
        },
        workload,
    ))
}

/// Apply [`flip_retrain`] to every tree of the forest, in parallel.
///
/// Returns the retrained forest together with the aggregate workload, the
/// sum of the per-tree retrained-region sizes.
pub fn forest_flip_retrain(f: &Forest, d: &Dataset, flip_index: usize) -> Result<(Forest, u64)> {
    let results: Vec<(AnnotatedTree, u64)> = f
        .trees
        .par_iter()
        .zip(f.feature_subsets.par_iter())
        .map(|(tree, subset)| {
            flip_retrain(tree, d, flip_index, &f.params.tree_params, subset.as_deref())
        })
        .collect::<Result<_>>()?;
    let mut trees = Vec::with_capacity(results.len());
    let mut workload = 0u64;
    for (tree, w) in results {
        trees.push(tree);
        workload += w;
    }
    Ok((
        Forest {
            trees,
            feature_subsets: f.feature_subsets.clone(),
            params: f.params,
        },
        workload,
    ))
}

/// Ensemble score of a training instance: mean (default) or max of the
/// per-tree retraining-cost scores.
pub fn forest_score(f: &Forest, index: usize, agg: ScoreAggregation) -> Result<f64> {
    let mut acc: f64 = match agg {
        ScoreAggregation::Mean => 0.0,
        ScoreAggregation::Max => f64::MIN,
    };
    for tree in &f.trees {
        let s = instance_score(tree, index)?.value;
        match agg {
            ScoreAggregation::Mean => acc += s,
            ScoreAggregation::Max => acc = acc.max(s),
        }
    }
    Ok(match agg {
        ScoreAggregation::Mean => acc / f.trees.len() as f64,
        ScoreAggregation::Max => acc,
    })
}
