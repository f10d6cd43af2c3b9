//! Stability annotation and sub-tree retraining.
//!
//! Flipping the label of one training instance changes every split's
//! information gain in a way that depends only on which side of the split
//! the instance falls and on its class. The at-most-four post-flip gains of
//! a split are its *gain triples*; comparing the best split's triples
//! against every competitor's identifies the node's *stable instances*,
//! whose flip provably cannot change the node's best split. Retraining
//! after a flip then only needs to rebuild the sub-tree rooted at the first
//! node on the instance's path where it is not stable.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Label};
use crate::error::{Error, Result};
use crate::tree::{gain_from_counts, tree_train_budget, Split, Tree, TreeParams};

/// Which side of a split a triple refers to: `Left` is `x_f <= v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SplitSide {
    Left,
    Right,
}

/// Post-flip information gain of a split when one instance of
/// `flipped_class` on `side` has its label flipped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainTriple {
    pub gain: f64,
    pub side: SplitSide,
    pub flipped_class: Label,
}

/// A decision tree annotated, per node, with the training instances whose
/// single-label flip cannot change that node's best split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnnotatedTree {
    /// At a leaf every training instance is stable; its stable set is its
    /// train set and is not stored separately.
    Leaf {
        label: Label,
        train_set: Vec<usize>,
    },
    Node {
        split: Split,
        train_set: Vec<usize>,
        stable_set: Vec<usize>,
        left: Arc<AnnotatedTree>,
        right: Arc<AnnotatedTree>,
    },
}

/// Fraction of the training set inside the region that a flip of the scored
/// instance would force to retrain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceScore {
    pub value: f64,
}

impl AnnotatedTree {
    pub fn train_set(&self) -> &[usize] {
        match self {
            AnnotatedTree::Leaf { train_set, .. } | AnnotatedTree::Node { train_set, .. } => {
                train_set
            }
        }
    }

    /// Stable instances of this node (equal to the train set at leaves).
    pub fn stable_set(&self) -> &[usize] {
        match self {
            AnnotatedTree::Leaf { train_set, .. } => train_set,
            AnnotatedTree::Node { stable_set, .. } => stable_set,
        }
    }

    pub fn stable_contains(&self, index: usize) -> bool {
        self.stable_set().binary_search(&index).is_ok()
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, AnnotatedTree::Leaf { .. })
    }

    pub fn predict(&self, x: &[f64]) -> Label {
        match self {
            AnnotatedTree::Leaf { label, .. } => *label,
            AnnotatedTree::Node {
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

    /// Strip the annotation, yielding the underlying tree.
    pub fn to_tree(&self) -> Tree {
        match self {
            AnnotatedTree::Leaf { label, train_set } => Tree::Leaf {
                label: *label,
                train_set: train_set.clone(),
            },
            AnnotatedTree::Node {
                split,
                train_set,
                left,
                right,
                ..
            } => Tree::Node {
                split: *split,
                train_set: train_set.clone(),
                left: Box::new(left.to_tree()),
                right: Box::new(right.to_tree()),
            },
        }
    }

    /// Write one `depth,train_size,stable_size` line per node.
    pub fn dump_node_sizes(&self, out: &mut impl Write) -> Result<()> {
        fn rec(t: &AnnotatedTree, depth: usize, out: &mut impl Write) -> std::io::Result<()> {
            writeln!(
                out,
                "{},{},{}",
                depth,
                t.train_set().len(),
                t.stable_set().len()
            )?;
            if let AnnotatedTree::Node { left, right, .. } = t {
                rec(left, depth + 1, out)?;
                rec(right, depth + 1, out)?;
            }
            Ok(())
        }
        writeln!(out, "depth,train_size,stable_size")?;
        rec(self, 0, out)?;
        Ok(())
    }
}

/// The at-most-four gain triples of `split` over `region`.
///
/// Each triple is the gain [`crate::tree::information_gain`] would return
/// after flipping one instance of that class on that side; it is computed
/// incrementally from the side/class counts without rescanning the data,
/// through the same arithmetic path as a direct recount.
pub fn gain_triples(d: &Dataset, region: &[usize], split: &Split) -> Vec<GainTriple> {
    let counts = side_class_counts(d, region, split);
    triples_from_counts(&counts)
}

/// Side/class counts of a region relative to a split.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub(crate) struct SideCounts {
    pub left_pos: usize,
    pub left_neg: usize,
    pub right_pos: usize,
    pub right_neg: usize,
}

impl SideCounts {
    /// Post-flip gain for flipping one instance of `class` on `side`;
    /// `None` when that region is empty and the flip is impossible.
    pub fn post_flip_gain(&self, side: SplitSide, class: Label) -> Option<f64> {
        let (lp, ln, rp, rn) = (self.left_pos, self.left_neg, self.right_pos, self.right_neg);
        let adjusted = match (side, class) {
            (SplitSide::Left, Label::Pos) if lp > 0 => (lp - 1, ln + 1, rp, rn),
            (SplitSide::Left, Label::Neg) if ln > 0 => (lp + 1, ln - 1, rp, rn),
            (SplitSide::Right, Label::Pos) if rp > 0 => (lp, ln, rp - 1, rn + 1),
            (SplitSide::Right, Label::Neg) if rn > 0 => (lp, ln, rp + 1, rn - 1),
            _ => return None,
        };
        Some(gain_from_counts(adjusted.0, adjusted.1, adjusted.2, adjusted.3))
    }
}

fn side_class_counts(d: &Dataset, region: &[usize], split: &Split) -> SideCounts {
    let mut c = SideCounts::default();
    for &i in region {
        let left = d.value(i, split.feature) <= split.threshold;
        match (left, d.effective_label(i)) {
            (true, Label::Pos) => c.left_pos += 1,
            (true, Label::Neg) => c.left_neg += 1,
            (false, Label::Pos) => c.right_pos += 1,
            (false, Label::Neg) => c.right_neg += 1,
        }
    }
    c
}

const SIDE_CLASS: [(SplitSide, Label); 4] = [
    (SplitSide::Left, Label::Pos),
    (SplitSide::Left, Label::Neg),
    (SplitSide::Right, Label::Pos),
    (SplitSide::Right, Label::Neg),
];

fn triples_from_counts(counts: &SideCounts) -> Vec<GainTriple> {
    SIDE_CLASS
        .iter()
        .filter_map(|&(side, class)| {
            counts.post_flip_gain(side, class).map(|gain| GainTriple {
                gain,
                side,
                flipped_class: class,
            })
        })
        .collect()
}

/// Annotate a trained tree with per-node stable sets.
///
/// `t` must have been trained over `d` with the same parameters and feature
/// universe; if a node's recorded split is no longer the region's best split
/// the annotation is stale and an error is returned.
///
/// Beyond the pairwise triple comparison, an instance is also removed from
/// the stable set when its flip drives the best split's own gain to or below
/// `min_gain`: the node would then collapse to a leaf (or hand the split to
/// a competitor), so the split cannot be considered preserved.
pub fn annotate(
    t: &Tree,
    d: &Dataset,
    params: &TreeParams,
    features: Option<&[usize]>,
) -> Result<AnnotatedTree> {
    params.validate()?;
    let features: Vec<usize> = match features {
        Some(fs) => {
            let mut fs = fs.to_vec();
            fs.sort_unstable();
            fs.dedup();
            fs
        }
        None => (0..d.n_features()).collect(),
    };
    let labels = d.effective_labels();

    let region = t.train_set();
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

    annotate_rec(t, d, &labels, &features, lists, params.min_gain)
}

fn annotate_rec(
    t: &Tree,
    d: &Dataset,
    labels: &[Label],
    features: &[usize],
    lists: Vec<Vec<u32>>,
    min_gain: f64,
) -> Result<AnnotatedTree> {
    match t {
        Tree::Leaf { label, train_set } => Ok(AnnotatedTree::Leaf {
            label: *label,
            train_set: train_set.clone(),
        }),
        Tree::Node {
            split,
            train_set,
            left,
            right,
        } => {
            let stable_set =
                node_stable_set(d, labels, features, &lists, train_set, split, min_gain)?;

            let (left_lists, right_lists): (Vec<Vec<u32>>, Vec<Vec<u32>>) = lists
                .iter()
                .map(|list| {
                    list.iter()
                        .partition(|&&i| d.value(i as usize, split.feature) <= split.threshold)
                })
                .unzip();
            let left = annotate_rec(left, d, labels, features, left_lists, min_gain)?;
            let right = annotate_rec(right, d, labels, features, right_lists, min_gain)?;
            Ok(AnnotatedTree::Node {
                split: *split,
                train_set: train_set.clone(),
                stable_set,
                left: Arc::new(left),
                right: Arc::new(right),
            })
        }
    }
}

/// Per-(side, class) sweep bookkeeping: the widest competitor regions that
/// outrank the best split's post-flip gain.
#[derive(Clone, Copy)]
struct BeatRange {
    /// Largest competitor threshold whose left-side triple wins; instances
    /// with `x_f <= max_left` are unstable.
    max_left: Option<f64>,
    /// Smallest competitor threshold whose right-side triple wins.
    min_right: Option<f64>,
}

impl BeatRange {
    const EMPTY: BeatRange = BeatRange {
        max_left: None,
        min_right: None,
    };
}

fn side_class_slot(side: SplitSide, class: Label) -> usize {
    match (side, class) {
        (SplitSide::Left, Label::Pos) => 0,
        (SplitSide::Left, Label::Neg) => 1,
        (SplitSide::Right, Label::Pos) => 2,
        (SplitSide::Right, Label::Neg) => 3,
    }
}

/// Compute the stable set of one node, Alg.-2 style: every pairwise triple
/// comparison between the node's best split and each competitor split is
/// folded into one sweep per feature, and removal regions are accumulated as
/// prefix/suffix thresholds before a single marking pass.
fn node_stable_set(
    d: &Dataset,
    labels: &[Label],
    features: &[usize],
    lists: &[Vec<u32>],
    train_set: &[usize],
    split: &Split,
    min_gain: f64,
) -> Result<Vec<usize>> {
    let m = train_set.len();
    let counts = {
        let mut c = SideCounts::default();
        for &i in train_set {
            let left = d.value(i, split.feature) <= split.threshold;
            match (left, labels[i]) {
                (true, Label::Pos) => c.left_pos += 1,
                (true, Label::Neg) => c.left_neg += 1,
                (false, Label::Pos) => c.right_pos += 1,
                (false, Label::Neg) => c.right_neg += 1,
            }
        }
        c
    };
    let total_pos = counts.left_pos + counts.right_pos;
    let total_neg = counts.left_neg + counts.right_neg;

    // Post-flip gains of the node's own split, one per (side, class).
    let best_post: [Option<f64>; 4] = [
        counts.post_flip_gain(SplitSide::Left, Label::Pos),
        counts.post_flip_gain(SplitSide::Left, Label::Neg),
        counts.post_flip_gain(SplitSide::Right, Label::Pos),
        counts.post_flip_gain(SplitSide::Right, Label::Neg),
    ];

    // Gain-collapse rule: a flip that drops the best split's own gain to or
    // below min_gain invalidates the node even if no competitor overtakes.
    let collapsed: [bool; 4] = {
        let mut c = [false; 4];
        for slot in 0..4 {
            if let Some(g) = best_post[slot] {
                c[slot] = g <= min_gain;
            }
        }
        c
    };

    let mut beats: Vec<[BeatRange; 4]> = vec![[BeatRange::EMPTY; 4]; features.len()];

    // One sweep per feature: track the running best split for the staleness
    // check and, for every competitor split, whether any of its triples
    // outranks the corresponding best-split triple.
    let mut best_seen: Option<Split> = None;
    let mut best_seen_gain = min_gain;
    for (fi, &f) in features.iter().enumerate() {
        let list = &lists[fi];
        debug_assert_eq!(list.len(), m);
        let mut left_pos = 0usize;
        let mut left_neg = 0usize;
        for (pos, &i) in list.iter().enumerate() {
            match labels[i as usize] {
                Label::Pos => left_pos += 1,
                Label::Neg => left_neg += 1,
            }
            let v = d.value(i as usize, f);
            if pos + 1 < m && d.value(list[pos + 1] as usize, f) == v {
                continue;
            }
            let competitor = Split::new(f, v);
            let side = SideCounts {
                left_pos,
                left_neg,
                right_pos: total_pos - left_pos,
                right_neg: total_neg - left_neg,
            };

            let plain_gain = gain_from_counts(
                side.left_pos,
                side.left_neg,
                side.right_pos,
                side.right_neg,
            );
            if plain_gain > best_seen_gain {
                best_seen_gain = plain_gain;
                best_seen = Some(competitor);
            }

            if competitor == *split {
                continue;
            }
            // The competitor beats the best split for an instance when its
            // post-flip gain is higher, or equal with the competitor
            // processed earlier in lexicographic order.
            let wins = |g_competitor: f64, g_best: f64| {
                g_competitor > g_best || (g_competitor == g_best && competitor < *split)
            };
            for class in [Label::Pos, Label::Neg] {
                let g_left = side.post_flip_gain(SplitSide::Left, class);
                let g_right = side.post_flip_gain(SplitSide::Right, class);
                for best_side in [SplitSide::Left, SplitSide::Right] {
                    let slot = side_class_slot(best_side, class);
                    let Some(g_best) = best_post[slot] else {
                        continue;
                    };
                    if collapsed[slot] {
                        continue; // already removing the whole region
                    }
                    let range = &mut beats[fi][slot];
                    if let Some(g) = g_left {
                        if wins(g, g_best) {
                            range.max_left = Some(match range.max_left {
                                Some(cur) => cur.max(v),
                                None => v,
                            });
                        }
                    }
                    if let Some(g) = g_right {
                        if wins(g, g_best) {
                            range.min_right = Some(match range.min_right {
                                Some(cur) => cur.min(v),
                                None => v,
                            });
                        }
                    }
                }
            }
        }
    }

    if best_seen != Some(*split) {
        return Err(Error::StaleAnnotation(format!(
            "node split ({}, {}) is not the best split of its region",
            split.feature, split.threshold
        )));
    }

    // Marking pass: an instance is stable unless its (side, class) slot
    // collapsed or some competitor region covering it won.
    let mut stable = Vec::with_capacity(m);
    'instances: for &i in train_set {
        let class = labels[i];
        let on_left = d.value(i, split.feature) <= split.threshold;
        let slot = side_class_slot(
            if on_left {
                SplitSide::Left
            } else {
                SplitSide::Right
            },
            class,
        );
        if collapsed[slot] {
            continue;
        }
        for (fi, &f) in features.iter().enumerate() {
            let range = &beats[fi][slot];
            if range.max_left.is_none() && range.min_right.is_none() {
                continue;
            }
            let v = d.value(i, f);
            if let Some(mv) = range.max_left {
                if v <= mv {
                    continue 'instances;
                }
            }
            if let Some(mv) = range.min_right {
                if v > mv {
                    continue 'instances;
                }
            }
        }
        stable.push(i);
    }
    Ok(stable)
}

/// Alg.-3 sub-tree retraining: returns the annotated tree for `d` with
/// `flip_index` toggled, rebuilding only the sub-tree rooted at the first
/// node on the instance's path where it is not stable (or the reached leaf),
/// and sharing every off-path node. The second value is the retraining
/// workload, i.e. the size of the retrained region.
pub fn flip_retrain(
    t: &AnnotatedTree,
    d: &Dataset,
    flip_index: usize,
    params: &TreeParams,
    features: Option<&[usize]>,
) -> Result<(AnnotatedTree, u64)> {
    if t.train_set().binary_search(&flip_index).is_err() {
        return Err(Error::FlipOutsideTree(flip_index));
    }
    let flipped = d.apply_flip(flip_index)?;
    flip_retrain_rec(t, &flipped, flip_index, params, features, 0)
}

fn flip_retrain_rec(
    t: &AnnotatedTree,
    flipped: &Dataset,
    flip_index: usize,
    params: &TreeParams,
    features: Option<&[usize]>,
    depth: usize,
) -> Result<(AnnotatedTree, u64)> {
    if let AnnotatedTree::Node {
        split,
        train_set,
        stable_set,
        left,
        right,
    } = t
    {
        if t.stable_contains(flip_index) {
            let goes_left = split.goes_left(flipped.features(flip_index));
            let (new_left, new_right, workload) = if goes_left {
                let (l, w) =
                    flip_retrain_rec(left, flipped, flip_index, params, features, depth + 1)?;
                (Arc::new(l), Arc::clone(right), w)
            } else {
                let (r, w) =
                    flip_retrain_rec(right, flipped, flip_index, params, features, depth + 1)?;
                (Arc::clone(left), Arc::new(r), w)
            };
            return Ok((
                AnnotatedTree::Node {
                    split: *split,
                    train_set: train_set.clone(),
                    stable_set: stable_set.clone(),
                    left: new_left,
                    right: new_right,
                },
                workload,
            ));
        }
    }

    // First non-stable node, or a leaf: retrain this region on the flipped
    // data with the remaining depth budget and annotate the new sub-tree.
    let region = t.train_set();
    let budget = params.max_depth.saturating_sub(depth);
    let (subtree, _) = tree_train_budget(flipped, region, params, features, budget)?;
    let annotated = annotate(&subtree, flipped, params, features)?;
    Ok((annotated, region.len() as u64))
}

/// Retraining-cost score of a training instance: the train-set fraction of
/// the first node on its path where it is not stable, falling back to its
/// leaf's fraction when it is stable along the entire path.
pub fn instance_score(t: &AnnotatedTree, index: usize) -> Result<InstanceScore> {
    if t.train_set().binary_search(&index).is_err() {
        return Err(Error::FlipOutsideTree(index));
    }
    let n_root = t.train_set().len() as f64;
    let mut node = t;
    loop {
        match node {
            AnnotatedTree::Leaf { train_set, .. } => {
                return Ok(InstanceScore {
                    value: train_set.len() as f64 / n_root,
                });
            }
            AnnotatedTree::Node { left, right, .. } => {
                if !node.stable_contains(index) {
                    return Ok(InstanceScore {
                        value: node.train_set().len() as f64 / n_root,
                    });
                }
                node = if left.train_set().binary_search(&index).is_ok() {
                    left
                } else {
                    right
                };
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::{information_gain, tree_train};

    fn single_feature(values: &[f64], labels: &[i8]) -> Dataset {
        let rows: Vec<Vec<f64>> = values.iter().map(|&v| vec![v]).collect();
        let labels = labels
            .iter()
            .map(|&l| if l > 0 { Label::Pos } else { Label::Neg })
            .collect();
        Dataset::from_parts("t", rows, labels).unwrap()
    }

    fn full_region(d: &Dataset) -> Vec<usize> {
        (0..d.len()).collect()
    }

    /// left {4+,1-} / right {2+,4-} at split (0, 4.0).
    fn figure_region() -> Dataset {
        single_feature(
            &[0.0, 1.0, 2.0, 3.0, 4.0, 10.0, 11.0, 12.0, 13.0, 14.0, 15.0],
            &[1, 1, 1, 1, -1, 1, 1, -1, -1, -1, -1],
        )
    }

    fn triple(triples: &[GainTriple], side: SplitSide, class: Label) -> Option<f64> {
        triples
            .iter()
            .find(|t| t.side == side && t.flipped_class == class)
            .map(|t| t.gain)
    }

    #[test]
    fn gain_triples_match_worked_example() {
        let d = figure_region();
        let triples = gain_triples(&d, &full_region(&d), &Split::new(0, 4.0));
        assert_eq!(triples.len(), 4);
        let cases = [
            (SplitSide::Left, Label::Pos, 0.05),
            (SplitSide::Left, Label::Neg, 0.44),
            (SplitSide::Right, Label::Pos, 0.31),
            (SplitSide::Right, Label::Neg, 0.07),
        ];
        for (side, class, expected) in cases {
            let g = triple(&triples, side, class).unwrap();
            assert!(
                (g - expected).abs() < 0.005,
                "triple ({side:?}, {class:?}) = {g}, expected {expected}"
            );
        }
    }

    #[test]
    fn gain_triples_skip_impossible_flips() {
        // left side purely positive: no (Left, -1) triple.
        let d = single_feature(&[0.0, 1.0, 5.0, 6.0], &[1, 1, 1, -1]);
        let triples = gain_triples(&d, &full_region(&d), &Split::new(0, 1.0));
        assert_eq!(triples.len(), 3);
        assert!(triple(&triples, SplitSide::Left, Label::Neg).is_none());
    }

    #[test]
    fn gain_triples_equal_brute_force_recompute_exactly() {
        let d = figure_region();
        let region = full_region(&d);
        for split in crate::tree::candidate_splits(&d, &region) {
            let triples = gain_triples(&d, &region, &split);
            for t in &triples {
                // Find one instance matching (side, class) and flip it.
                let rep = region
                    .iter()
                    .find(|&&i| {
                        let left = d.value(i, split.feature) <= split.threshold;
                        let side_ok = match t.side {
                            SplitSide::Left => left,
                            SplitSide::Right => !left,
                        };
                        side_ok && d.effective_label(i) == t.flipped_class
                    })
                    .copied()
                    .expect("triple exists only for nonempty regions");
                let flipped = d.apply_flip(rep).unwrap();
                let recomputed = information_gain(&flipped, &region, &split);
                assert_eq!(t.gain, recomputed, "incremental and recomputed gains differ");
            }
        }
    }

    #[test]
    fn annotate_leaf_keeps_all_stable() {
        let d = single_feature(&[0.0, 1.0], &[1, 1]);
        let t = tree_train(&d, &full_region(&d), &TreeParams::new(3)).unwrap();
        let a = annotate(&t, &d, &TreeParams::new(3), None).unwrap();
        assert!(a.is_leaf());
        assert_eq!(a.stable_set(), a.train_set());
    }

    #[test]
    fn annotate_dominant_split_keeps_root_stable() {
        // Duplicated feature values leave the dominant split without a
        // usable competitor: every single flip keeps (0, 0.0) best,
        // confirmed below by brute force.
        let d = single_feature(
            &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0],
            &[1, 1, 1, -1, -1, -1, -1, 1],
        );
        let region = full_region(&d);
        let params = TreeParams::new(1);
        let t = tree_train(&d, &region, &params).unwrap();
        let root_split = match &t {
            Tree::Node { split, .. } => *split,
            _ => panic!("expected node"),
        };
        assert_eq!(root_split, Split::new(0, 0.0));
        let a = annotate(&t, &d, &params, None).unwrap();
        assert_eq!(a.stable_set(), a.train_set());

        // Brute-force confirmation: retraining after any single flip keeps
        // the same root split.
        for i in 0..d.len() {
            let flipped = d.apply_flip(i).unwrap();
            let t2 = tree_train(&flipped, &region, &params).unwrap();
            match t2 {
                Tree::Node { split, .. } => assert_eq!(split, root_split),
                Tree::Leaf { .. } => panic!("flip {i} collapsed the root"),
            }
        }
    }

    #[test]
    fn annotate_stale_on_label_change() {
        let d = single_feature(&[0.0, 1.0, 2.0, 3.0], &[1, 1, -1, -1]);
        let region = full_region(&d);
        let params = TreeParams::new(2);
        let t = tree_train(&d, &region, &params).unwrap();
        // Flip two labels so the recorded root split is no longer best.
        let poisoned = d.apply_flip(0).unwrap().apply_flip(3).unwrap();
        let err = annotate(&t, &poisoned, &params, None);
        assert!(matches!(err, Err(Error::StaleAnnotation(_))));
    }

    #[test]
    fn stability_matches_brute_force_on_small_random_data() {
        // For every (node, instance) pair: membership in the stable set must
        // coincide with the brute-force split-or-leaf decision after the
        // flip.
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut state = 9u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) as f64 / (1u64 << 31) as f64
        };
        for _ in 0..48 {
            rows.push(vec![next(), next(), next()]);
            labels.push(if next() < 0.5 { Label::Pos } else { Label::Neg });
        }
        let d = Dataset::from_parts("r", rows, labels).unwrap();
        let region = full_region(&d);
        let params = TreeParams::new(4);
        let t = tree_train(&d, &region, &params).unwrap();
        let a = annotate(&t, &d, &params, None).unwrap();

        fn brute_best(d: &Dataset, region: &[usize], min_gain: f64) -> Option<Split> {
            let mut best = None;
            let mut best_gain = min_gain;
            for s in crate::tree::candidate_splits(d, region) {
                let g = information_gain(d, region, &s);
                if g > best_gain {
                    best_gain = g;
                    best = Some(s);
                }
            }
            best
        }

        fn walk(a: &AnnotatedTree, d: &Dataset, params: &TreeParams) {
            if let AnnotatedTree::Node {
                split,
                train_set,
                left,
                right,
                ..
            } = a
            {
                for &i in train_set {
                    let flipped = d.apply_flip(i).unwrap();
                    let new_best = brute_best(&flipped, train_set, params.min_gain);
                    let kept = new_best == Some(*split);
                    assert_eq!(
                        a.stable_contains(i),
                        kept,
                        "instance {i} stability mismatch at split ({}, {})",
                        split.feature,
                        split.threshold
                    );
                }
                walk(left, d, params);
                walk(right, d, params);
            }
        }
        walk(&a, &d, &params);
    }

    /// 1000-instance scenario: root splits 400/600; the instance is stable
    /// at the root, falls left, and is not stable at the 400-instance child.
    fn path_cost_fixture() -> (AnnotatedTree, Dataset) {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..1000 {
            let x0 = if i < 400 { 5.0 } else { 15.0 };
            let x1 = if i < 250 {
                2.0
            } else if i < 400 {
                8.0
            } else if i < 750 {
                6.0
            } else {
                9.0
            };
            rows.push(vec![x0, x1]);
            labels.push(match i {
                0..=249 => Label::Pos,
                250..=399 => Label::Neg,
                400..=749 => Label::Pos,
                _ => Label::Neg,
            });
        }
        let d = Dataset::from_parts("f", rows, labels).unwrap();

        let leaf = |label, lo: usize, hi: usize| {
            Arc::new(AnnotatedTree::Leaf {
                label,
                train_set: (lo..hi).collect(),
            })
        };
        let left_child = AnnotatedTree::Node {
            split: Split::new(1, 5.0),
            train_set: (0..400).collect(),
            stable_set: (1..400).collect(), // instance 0 is not stable here
            left: leaf(Label::Pos, 0, 250),
            right: leaf(Label::Neg, 250, 400),
        };
        let right_child = AnnotatedTree::Node {
            split: Split::new(1, 8.0),
            train_set: (400..1000).collect(),
            stable_set: (400..1000).collect(),
            left: leaf(Label::Pos, 400, 750),
            right: leaf(Label::Neg, 750, 1000),
        };
        let root = AnnotatedTree::Node {
            split: Split::new(0, 10.0),
            train_set: (0..1000).collect(),
            stable_set: (0..1000).collect(),
            left: Arc::new(left_child),
            right: Arc::new(right_child),
        };
        (root, d)
    }

    #[test]
    fn flip_retrain_rebuilds_only_the_unstable_subtree() {
        let (root, d) = path_cost_fixture();
        let right_before = match &root {
            AnnotatedTree::Node { right, .. } => Arc::clone(right),
            _ => unreachable!(),
        };
        let (result, workload) =
            flip_retrain(&root, &d, 0, &TreeParams::new(3), None).unwrap();
        assert_eq!(workload, 400);
        match &result {
            AnnotatedTree::Node { split, right, .. } => {
                assert_eq!(*split, Split::new(0, 10.0));
                assert!(
                    Arc::ptr_eq(right, &right_before),
                    "off-path child must be shared, not copied"
                );
            }
            _ => panic!("root must stay an internal node"),
        }
    }

    #[test]
    fn flip_retrain_rejects_foreign_index() {
        let (root, d) = path_cost_fixture();
        let sub = match &root {
            AnnotatedTree::Node { left, .. } => left.as_ref().clone(),
            _ => unreachable!(),
        };
        let err = flip_retrain(&sub, &d, 900, &TreeParams::new(3), None);
        assert!(matches!(err, Err(Error::FlipOutsideTree(900))));
    }

    #[test]
    fn flip_retrain_equals_full_retrain_structure() {
        // Ancestor stable sets are left untouched by design, so equivalence
        // is on the underlying tree structure and on predictions.
        let d = single_feature(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0], &[1, 1, 1, -1, -1, -1]);
        let region = full_region(&d);
        let params = TreeParams::new(3);
        let t = tree_train(&d, &region, &params).unwrap();
        let a = annotate(&t, &d, &params, None).unwrap();
        for i in 0..d.len() {
            let (spliced, _) = flip_retrain(&a, &d, i, &params, None).unwrap();
            let flipped = d.apply_flip(i).unwrap();
            let full = tree_train(&flipped, &region, &params).unwrap();
            assert_eq!(
                spliced.to_tree(),
                full,
                "flip {i} diverged from full retrain"
            );
        }
    }

    #[test]
    fn instance_score_unstable_at_root_is_one() {
        let (root, d) = path_cost_fixture();
        let _ = d;
        let root = match root {
            AnnotatedTree::Node {
                split,
                train_set,
                left,
                right,
                ..
            } => AnnotatedTree::Node {
                split,
                train_set,
                stable_set: (1..1000).collect(),
                left,
                right,
            },
            _ => unreachable!(),
        };
        assert_eq!(instance_score(&root, 0).unwrap().value, 1.0);
    }

    #[test]
    fn instance_score_first_unstable_node_fraction() {
        let (root, _) = path_cost_fixture();
        assert_eq!(instance_score(&root, 0).unwrap().value, 0.4);
    }

    #[test]
    fn instance_score_leaf_fallback() {
        let root = AnnotatedTree::Node {
            split: Split::new(0, 0.0),
            train_set: (0..100).collect(),
            stable_set: (0..100).collect(),
            left: Arc::new(AnnotatedTree::Leaf {
                label: Label::Pos,
                train_set: (0..10).collect(),
            }),
            right: Arc::new(AnnotatedTree::Leaf {
                label: Label::Neg,
                train_set: (10..100).collect(),
            }),
        };
        let s = instance_score(&root, 5).unwrap();
        assert_eq!(s.value, 0.1);
    }

    #[test]
    fn instance_score_rejects_foreign_index() {
        let (root, _) = path_cost_fixture();
        assert!(matches!(
            instance_score(&root, 5000),
            Err(Error::FlipOutsideTree(5000))
        ));
    }
}
