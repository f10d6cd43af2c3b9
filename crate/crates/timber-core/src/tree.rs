//! Entropy-based binary decision tree training and prediction.
//!
//! Training selects, at every node, the split with maximal information gain
//! over the candidate splits `(f, v)` where `v` is a distinct value of
//! feature `f` in the node's region. Candidates are processed in
//! lexicographic order (feature ascending, threshold ascending) with a
//! strict `>` update, so the first-processed split wins ties. Every gain in
//! the crate flows through [`gain_from_counts`], which makes independently
//! recomputed gains bit-identical to the ones found during training.

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Label, LabelCounts};
use crate::error::{Error, Result};

/// A split predicate `(feature, threshold)`: instances with
/// `x[feature] <= threshold` go left, the rest go right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub feature: usize,
    pub threshold: f64,
}

impl Split {
    pub fn new(feature: usize, threshold: f64) -> Self {
        Split { feature, threshold }
    }

    /// True iff the instance falls on the left side (`x_f <= v`).
    pub fn goes_left(&self, features: &[f64]) -> bool {
        features[self.feature] <= self.threshold
    }
}

impl Eq for Split {}

impl Ord for Split {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.feature
            .cmp(&other.feature)
            .then(self.threshold.total_cmp(&other.threshold))
    }
}

impl PartialOrd for Split {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    /// Maximum node depth; the root is at depth 0, so a tree of
    /// `max_depth = 1` is at most a single split with two leaves.
    pub max_depth: usize,
    /// A node is grown only if some split has gain strictly above this.
    pub min_gain: f64,
}

impl TreeParams {
    pub fn new(max_depth: usize) -> Self {
        TreeParams {
            max_depth,
            min_gain: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_depth < 1 {
            return Err(Error::InvalidParams("max_depth must be >= 1".to_string()));
        }
        if self.min_gain < 0.0 || !self.min_gain.is_finite() {
            return Err(Error::InvalidParams(
                "min_gain must be finite and >= 0".to_string(),
            ));
        }
        Ok(())
    }
}

/// A binary decision tree whose nodes record the training-set indices used
/// to construct them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Tree {
    Leaf {
        label: Label,
        train_set: Vec<usize>,
    },
    Node {
        split: Split,
        train_set: Vec<usize>,
        left: Box<Tree>,
        right: Box<Tree>,
    },
}

impl Tree {
    pub fn train_set(&self) -> &[usize] {
        match self {
            Tree::Leaf { train_set, .. } | Tree::Node { train_set, .. } => train_set,
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, Tree::Leaf { .. })
    }

    /// Label of the leaf reached by `x`; a boundary value `x_f = v` goes left.
    pub fn predict(&self, x: &[f64]) -> Label {
        match self {
            Tree::Leaf { label, .. } => *label,
            Tree::Node {
                split, left, right, ..
            } => {
                if split.goes_left(x) {
                    left.predict(x)
                } else {
                    right.predict(x)
                }
            }
        }
    }

    /// Maximum node depth (0 for a lone leaf).
    pub fn depth(&self) -> usize {
        match self {
            Tree::Leaf { .. } => 0,
            Tree::Node { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn node_count(&self) -> usize {
        match self {
            Tree::Leaf { .. } => 1,
            Tree::Node { left, right, .. } => 1 + left.node_count() + right.node_count(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&TreeDocument {
            version: FORMAT_VERSION,
            tree: self.clone(),
        })
        .expect("tree serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Tree> {
        let doc: TreeDocument =
            serde_json::from_str(s).map_err(|e| Error::Config(format!("bad tree json: {e}")))?;
        if doc.version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported tree format version {}",
                doc.version
            )));
        }
        Ok(doc.tree)
    }
}

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TreeDocument {
    version: u32,
    tree: Tree,
}

/// Workload counters for one training run: every constructed node
/// contributes a `(node, |train_set|)` pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainingStats {
    pub nodes: u64,
    pub instances: u64,
}

impl TrainingStats {
    pub fn absorb(&mut self, other: TrainingStats) {
        self.nodes += other.nodes;
        self.instances += other.instances;
    }
}

/// Binary entropy of the class ratio, with the convention `0 * log2(0) = 0`.
pub fn entropy(c: &LabelCounts) -> Result<f64> {
    if c.total() == 0 {
        return Err(Error::EmptyCounts);
    }
    Ok(binary_entropy(c.positives, c.negatives))
}

pub(crate) fn binary_entropy(positives: usize, negatives: usize) -> f64 {
    if positives == 0 || negatives == 0 {
        return 0.0;
    }
    let total = (positives + negatives) as f64;
    let p = positives as f64 / total;
    let n = negatives as f64 / total;
    -(p * p.log2() + n * n.log2())
}

/// Information gain of a split from the four side/class counts.
///
/// Returns 0 when either side is empty. This is the single arithmetic path
/// for every gain computed in the crate, so recomputing a gain from the same
/// counts always reproduces the same double.
pub fn gain_from_counts(
    left_pos: usize,
    left_neg: usize,
    right_pos: usize,
    right_neg: usize,
) -> f64 {
    let left = left_pos + left_neg;
    let right = right_pos + right_neg;
    if left == 0 || right == 0 {
        return 0.0;
    }
    let total = (left + right) as f64;
    let parent = binary_entropy(left_pos + right_pos, left_neg + right_neg);
    let gain = parent
        - (left as f64 / total) * binary_entropy(left_pos, left_neg)
        - (right as f64 / total) * binary_entropy(right_pos, right_neg);
    gain.max(0.0)
}

/// All candidate splits of `region`: the pairs `(f, v)` where `v` is a
/// distinct value of feature `f`, sorted lexicographically. Depends only on
/// features, never on labels or flips.
pub fn candidate_splits(d: &Dataset, region: &[usize]) -> Vec<Split> {
    let mut out = Vec::new();
    for f in 0..d.n_features() {
        let mut values: Vec<f64> = region.iter().map(|&i| d.value(i, f)).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        out.extend(values.into_iter().map(|v| Split::new(f, v)));
    }
    out
}

/// Information gain of `split` over `region`, computed on effective labels
/// by direct recount.
pub fn information_gain(d: &Dataset, region: &[usize], split: &Split) -> f64 {
    let (mut lp, mut ln, mut rp, mut rn) = (0, 0, 0, 0);
    for &i in region {
        let left = d.value(i, split.feature) <= split.threshold;
        match (left, d.effective_label(i)) {
            (true, Label::Pos) => lp += 1,
            (true, Label::Neg) => ln += 1,
            (false, Label::Pos) => rp += 1,
            (false, Label::Neg) => rn += 1,
        }
    }
    gain_from_counts(lp, ln, rp, rn)
}

/// Train a tree over `region` of `d`.
pub fn tree_train(d: &Dataset, region: &[usize], params: &TreeParams) -> Result<Tree> {
    tree_train_with(d, region, params, None).map(|(tree, _)| tree)
}

/// Train a tree, optionally restricting candidate splits to a feature
/// subset, and report workload counters.
pub fn tree_train_with(
    d: &Dataset,
    region: &[usize],
    params: &TreeParams,
    features: Option<&[usize]>,
) -> Result<(Tree, TrainingStats)> {
    tree_train_budget(d, region, params, features, params.max_depth)
}

/// Training entry point with an explicit remaining-depth budget, used when
/// retraining a sub-tree that sits below the root. A budget of 0 forces a
/// leaf.
pub(crate) fn tree_train_budget(
    d: &Dataset,
    region: &[usize],
    params: &TreeParams,
    features: Option<&[usize]>,
    depth_budget: usize,
) -> Result<(Tree, TrainingStats)> {
    params.validate()?;
    if region.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let features: Vec<usize> = match features {
        Some(fs) => {
            if fs.is_empty() {
                return Err(Error::InvalidParams("empty feature subset".to_string()));
            }
            let mut fs = fs.to_vec();
            fs.sort_unstable();
            fs.dedup();
            if *fs.last().unwrap() >= d.n_features() {
                return Err(Error::InvalidParams(format!(
                    "feature {} out of range",
                    fs.last().unwrap()
                )));
            }
            fs
        }
        None => (0..d.n_features()).collect(),
    };
    let labels = d.effective_labels();

    // Per-feature region orderings, filtered from the dataset-wide sorted
    // index cache so no per-node sorting is required.
    let mut in_region = vec![false; d.len()];
    for &i in region {
        in_region[i] = true;
    }
    let lists: Vec<Vec<u32>> = features
        .iter()
        .map(|&f| {
            d.sorted_by_feature(f)
                .iter()
                .copied()
                .filter(|&i| in_region[i as usize])
                .collect()
        })
        .collect();
    let mut members: Vec<u32> = region.iter().map(|&i| i as u32).collect();
    members.sort_unstable();

    let mut stats = TrainingStats::default();
    let tree = build(
        d,
        &labels,
        &features,
        lists,
        members,
        params,
        depth_budget,
        &mut stats,
    );
    Ok((tree, stats))
}

#[allow(clippy::too_many_arguments)]
fn build(
    d: &Dataset,
    labels: &[Label],
    features: &[usize],
    lists: Vec<Vec<u32>>,
    members: Vec<u32>,
    params: &TreeParams,
    depth_budget: usize,
    stats: &mut TrainingStats,
) -> Tree {
    stats.nodes += 1;
    stats.instances += members.len() as u64;

    let mut counts = LabelCounts::default();
    for &i in &members {
        counts.add(labels[i as usize]);
    }

    let best = if depth_budget == 0 {
        None
    } else {
        best_split_sweep(d, labels, features, &lists, &counts, params.min_gain)
    };

    match best {
        Some(split) => {
            let (left_lists, right_lists): (Vec<Vec<u32>>, Vec<Vec<u32>>) = lists
                .iter()
                .map(|list| {
                    list.iter()
                        .partition(|&&i| d.value(i as usize, split.feature) <= split.threshold)
                })
                .unzip();
            let (left_members, right_members): (Vec<u32>, Vec<u32>) = members
                .iter()
                .partition(|&&i| d.value(i as usize, split.feature) <= split.threshold);
            let left = build(
                d,
                labels,
                features,
                left_lists,
                left_members,
                params,
                depth_budget - 1,
                stats,
            );
            let right = build(
                d,
                labels,
                features,
                right_lists,
                right_members,
                params,
                depth_budget - 1,
                stats,
            );
            Tree::Node {
                split,
                train_set: members.iter().map(|&i| i as usize).collect(),
                left: Box::new(left),
                right: Box::new(right),
            }
        }
        None => Tree::Leaf {
            label: if counts.positives >= counts.negatives {
                Label::Pos
            } else {
                Label::Neg
            },
            train_set: members.iter().map(|&i| i as usize).collect(),
        },
    }
}

/// One gain-maximizing sweep over the per-feature sorted lists. Returns the
/// first split (in lexicographic order) whose gain strictly exceeds
/// `min_gain` and every later gain, i.e. Alg.-style first-processed-wins.
fn best_split_sweep(
    d: &Dataset,
    labels: &[Label],
    features: &[usize],
    lists: &[Vec<u32>],
    counts: &LabelCounts,
    min_gain: f64,
) -> Option<Split> {
    let total_pos = counts.positives;
    let total_neg = counts.negatives;
    let m = counts.total();
    let mut best: Option<Split> = None;
    let mut best_gain = min_gain;

    for (fi, &f) in features.iter().enumerate() {
        let list = &lists[fi];
        let mut left_pos = 0usize;
        let mut left_neg = 0usize;
        for (pos, &i) in list.iter().enumerate() {
            match labels[i as usize] {
                Label::Pos => left_pos += 1,
                Label::Neg => left_neg += 1,
            }
            let v = d.value(i as usize, f);
            // Only evaluate at value boundaries; duplicates share a split.
            if pos + 1 < m && d.value(list[pos + 1] as usize, f) == v {
                continue;
            }
            let gain = gain_from_counts(
                left_pos,
                left_neg,
                total_pos - left_pos,
                total_neg - left_neg,
            );
            if gain > best_gain {
                best_gain = gain;
                best = Some(Split::new(f, v));
            }
        }
    }
    best
}
