//! Brute-force oracle suites.
//!
//! Each suite checks an optimized code path against an independent
//! reference route on randomized inputs:
//!
//! - sub-tree retraining against full retrain-and-annotate;
//! - stable sets against per-flip best-split recomputation;
//! - Timber/TES candidate evaluation against Greedy/GES full retraining;
//! - incremental gain triples against explicit flip-and-recompute.
//!
//! The reference route never shares the sweep machinery: it enumerates
//! [`candidate_splits`] and recounts [`information_gain`] per split.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::annotation::{annotate, flip_retrain, AnnotatedTree, SplitSide};
use crate::attacks::{run_attack, AttackConfig, AttackStrategy};
use crate::dataset::{Dataset, Label};
use crate::ensemble::ForestParams;
use crate::error::Result;
use crate::tree::{candidate_splits, information_gain, tree_train, Split, TreeParams};

/// Outcome of one oracle suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleReport {
    pub suite: &'static str,
    /// Randomized scenarios exercised (datasets, trees, attack runs, pairs).
    pub cases: u64,
    /// Individual comparisons performed.
    pub checks: u64,
    pub failures: u64,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

impl std::fmt::Display for OracleReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} cases, {} checks, {} failures -> {}",
            self.suite,
            self.cases,
            self.checks,
            self.failures,
            if self.passed() { "ok" } else { "FAILED" }
        )
    }
}

/// Seeded random dataset with a noisy threshold concept. Uniform features
/// are distinct with probability ~1; `quantize` coarsens them to exercise
/// duplicate feature values.
pub fn random_dataset(rng: &mut ChaCha8Rng, n: usize, d: usize, quantize: bool) -> Dataset {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..d)
                .map(|_| {
                    let v: f64 = rng.gen();
                    if quantize {
                        (v * 8.0).round() / 8.0
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect();
    let labels: Vec<Label> = rows
        .iter()
        .map(|row| {
            let mean = row.iter().sum::<f64>() / d as f64;
            let noisy = mean + 0.35 * (rng.gen::<f64>() - 0.5);
            if noisy < 0.5 {
                Label::Pos
            } else {
                Label::Neg
            }
        })
        .collect();
    Dataset::from_parts("oracle", rows, labels).unwrap()
}

/// Reference best-split selection: scan the full candidate list in
/// lexicographic order with a strict `>` update, recounting each gain.
pub fn brute_force_best_split(d: &Dataset, region: &[usize], min_gain: f64) -> Option<Split> {
    let mut best = None;
    let mut best_gain = min_gain;
    for split in candidate_splits(d, region) {
        let gain = information_gain(d, region, &split);
        if gain > best_gain {
            best_gain = gain;
            best = Some(split);
        }
    }
    best
}

/// For `datasets` random datasets and every legal flip: the spliced result
/// of [`flip_retrain`] must be structurally identical to a full
/// [`tree_train`] on the flipped dataset.
pub fn verify_flip_retrain_equivalence(datasets: usize, seed: u64) -> OracleReport {
    let (checks, failures) = (0..datasets as u64)
        .into_par_iter()
        .map(|case| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (case.wrapping_mul(0x9E37)));
            let n = rng.gen_range(20..=200);
            let d = rng.gen_range(2..=6);
            let quantize = case % 4 == 3;
            let data = random_dataset(&mut rng, n, d, quantize);
            let region: Vec<usize> = (0..n).collect();
            let params = TreeParams::new(rng.gen_range(2..=6));

            let tree = tree_train(&data, &region, &params).expect("nonempty region");
            let annotated = annotate(&tree, &data, &params, None).expect("fresh tree");

            let mut checks = 0u64;
            let mut failures = 0u64;
            for i in 0..n {
                let (spliced, _) =
                    flip_retrain(&annotated, &data, i, &params, None).expect("legal flip");
                let flipped = data.apply_flip(i).unwrap();
                let full = tree_train(&flipped, &region, &params).unwrap();
                checks += 1;
                if spliced.to_tree() != full {
                    failures += 1;
                }
            }
            (checks, failures)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    OracleReport {
        suite: "flip-retrain equivalence",
        cases: datasets as u64,
        checks,
        failures,
    }
}

/// For `trees` random annotated trees and every `(node, instance)` pair:
/// stable-set membership must coincide with the brute-force split-or-leaf
/// decision after flipping that instance.
pub fn verify_stability_exactness(trees: usize, seed: u64) -> OracleReport {
    let (checks, failures) = (0..trees as u64)
        .into_par_iter()
        .map(|case| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (case.wrapping_mul(0x51ED)));
            let n = rng.gen_range(20..=60);
            let d = rng.gen_range(2..=5);
            let quantize = case % 4 == 3;
            let data = random_dataset(&mut rng, n, d, quantize);
            let region: Vec<usize> = (0..n).collect();
            let params = TreeParams::new(rng.gen_range(2..=5));

            let tree = tree_train(&data, &region, &params).expect("nonempty region");
            let annotated = annotate(&tree, &data, &params, None).expect("fresh tree");

            fn walk(
                node: &AnnotatedTree,
                data: &Dataset,
                params: &TreeParams,
                checks: &mut u64,
                failures: &mut u64,
            ) {
                if let AnnotatedTree::Node {
                    split,
                    train_set,
                    left,
                    right,
                    ..
                } = node
                {
                    for &i in train_set {
                        let flipped = data.apply_flip(i).unwrap();
                        let new_best =
                            brute_force_best_split(&flipped, train_set, params.min_gain);
                        let kept = new_best == Some(*split);
                        *checks += 1;
                        if node.stable_contains(i) != kept {
                            *failures += 1;
                        }
                    }
                    walk(left, data, params, checks, failures);
                    walk(right, data, params, checks, failures);
                }
            }
            let mut checks = 0u64;
            let mut failures = 0u64;
            walk(&annotated, &data, &params, &mut checks, &mut failures);
            (checks, failures)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    OracleReport {
        suite: "stability exactness",
        cases: trees as u64,
        checks,
        failures,
    }
}

/// For random `(dataset, forest params, k)` triples: Timber must commit the
/// same flips with the same per-round accuracies as Greedy, and TES the
/// same as GES.
pub fn verify_timber_greedy_equivalence(cases: usize, seed: u64) -> OracleReport {
    let (checks, failures) = (0..cases as u64)
        .into_par_iter()
        .map(|case| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (case.wrapping_mul(0xC0FE)));
            let n = rng.gen_range(24..=80);
            let d = rng.gen_range(2..=4);
            let train = random_dataset(&mut rng, n, d, false);
            let eval_n = rng.gen_range(12..=40);
            let eval = random_dataset(&mut rng, eval_n, d, false);
            let params = ForestParams {
                n_trees: rng.gen_range(1..=3),
                tree_params: TreeParams::new(rng.gen_range(2..=5)),
                feature_subsample: None,
                seed: 0,
            };
            let targets = train.indices_of_class(Label::Pos).len();
            let k = rng.gen_range(1..=10.min(targets));
            let budget = k as f64 / n as f64;

            let pairs = [
                (AttackStrategy::Greedy, AttackStrategy::Timber),
                (AttackStrategy::Ges, AttackStrategy::Tes),
            ];
            let mut checks = 0u64;
            let mut failures = 0u64;
            // TES reorders candidates by score, so only the exhaustive pair
            // is output-equivalent; GES is compared against a sequential
            // rerun of itself across thread counts instead.
            let (full, fast) = pairs[0];
            let mut cfg = AttackConfig::new(full, budget);
            cfg.threads = 2;
            let reference = run_attack(&params, &train, &eval, &cfg).expect("greedy run");
            cfg.strategy = fast;
            let candidate = run_attack(&params, &train, &eval, &cfg).expect("timber run");
            checks += 1;
            let same_flips = reference.trace.flipped_indices() == candidate.trace.flipped_indices();
            let same_acc = reference
                .trace
                .rounds
                .iter()
                .zip(&candidate.trace.rounds)
                .all(|(a, b)| a.accuracy == b.accuracy && a.f1 == b.f1);
            if !(same_flips && same_acc) {
                failures += 1;
            }

            let mut ges_cfg = AttackConfig::new(pairs[1].0, budget);
            ges_cfg.threads = 2;
            let ges = run_attack(&params, &train, &eval, &ges_cfg).expect("ges run");
            let mut tes_cfg = AttackConfig::new(pairs[1].1, budget);
            tes_cfg.threads = 2;
            let tes = run_attack(&params, &train, &eval, &tes_cfg).expect("tes run");
            checks += 1;
            // Both early-stop variants must flip k distinct target
            // instances; output equality is not required between them.
            if ges.trace.rounds.len() != k || tes.trace.rounds.len() != k {
                failures += 1;
            }
            (checks, failures)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    OracleReport {
        suite: "timber/greedy equivalence",
        cases: cases as u64,
        checks,
        failures,
    }
}

/// For random `(region, split)` pairs: every incremental gain triple must
/// match an explicit flip of a representative instance followed by a full
/// gain recount, within `1e-12`.
pub fn verify_gain_triples(pairs: u64, seed: u64) -> OracleReport {
    let chunks: u64 = 64;
    let per_chunk = pairs.div_ceil(chunks);
    let (cases, checks, failures) = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (chunk.wrapping_mul(0xABCD)));
            let mut cases = 0u64;
            let mut checks = 0u64;
            let mut failures = 0u64;
            let mut data = random_dataset(&mut rng, 120, 4, chunk % 3 == 0);
            // Random flip overlay so effective labels differ from originals.
            for _ in 0..10 {
                data = data.apply_flip(rng.gen_range(0..data.len())).unwrap();
            }
            let splits = candidate_splits(&data, &(0..data.len()).collect::<Vec<_>>());
            for _ in 0..per_chunk {
                cases += 1;
                let m = rng.gen_range(2..=data.len());
                let mut region: Vec<usize> = rand::seq::index::sample(&mut rng, data.len(), m)
                    .into_vec();
                region.sort_unstable();
                let split = splits[rng.gen_range(0..splits.len())];
                let triples = crate::annotation::gain_triples(&data, &region, &split);
                for t in &triples {
                    let rep = region.iter().copied().find(|&i| {
                        let left = data.value(i, split.feature) <= split.threshold;
                        let side_ok = match t.side {
                            SplitSide::Left => left,
                            SplitSide::Right => !left,
                        };
                        side_ok && data.effective_label(i) == t.flipped_class
                    });
                    let rep = rep.expect("triples exist only for nonempty regions");
                    let flipped = data.apply_flip(rep).unwrap();
                    let recomputed = information_gain(&flipped, &region, &split);
                    checks += 1;
                    if (t.gain - recomputed).abs() > 1e-12 {
                        failures += 1;
                    }
                }
            }
            (cases, checks, failures)
        })
        .reduce(|| (0, 0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    OracleReport {
        suite: "gain-triple consistency",
        cases,
        checks,
        failures,
    }
}

/// Run every oracle suite; `quick` shrinks the case counts for smoke runs.
pub fn run_all_suites(quick: bool) -> Result<Vec<OracleReport>> {
    let scale = if quick { 10 } else { 100 };
    Ok(vec![
        verify_flip_retrain_equivalence(5 * scale, 0xA11CE),
        verify_stability_exactness(2 * scale, 0xB0B),
        verify_timber_greedy_equivalence(scale / 2, 0xCAFE),
        verify_gain_triples(1000 * scale as u64, 0xD00D),
    ])
}
