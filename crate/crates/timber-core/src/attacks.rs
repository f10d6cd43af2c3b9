//! Label-flipping attack strategies.
//!
//! Greedy and Timber evaluate every candidate flip each round and commit the
//! one minimizing post-flip evaluation accuracy; their early-stopping
//! variants GES and TES commit the first candidate causing any accuracy
//! loss, with TES scanning candidates in increasing order of retraining
//! cost. Timber and TES estimate each candidate through sub-tree retraining
//! instead of full retraining and are guaranteed to pick the same flips as
//! their full-retraining counterparts. Entropy, K-Medoids and Random are
//! single-round model-agnostic baselines.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{round_half_up, Dataset, Label};
use crate::ensemble::{forest_flip_retrain, forest_score, forest_train, Forest, ForestParams, ScoreAggregation};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, compute_metrics};
use crate::space::StandardizedSpace;
use crate::tree::binary_entropy;

/// The seven attack strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackStrategy {
    Greedy,
    Ges,
    Timber,
    Tes,
    Entropy,
    KMedoids,
    Random,
}

impl AttackStrategy {
    pub const ALL: [AttackStrategy; 7] = [
        AttackStrategy::Greedy,
        AttackStrategy::Ges,
        AttackStrategy::Timber,
        AttackStrategy::Tes,
        AttackStrategy::Entropy,
        AttackStrategy::KMedoids,
        AttackStrategy::Random,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AttackStrategy::Greedy => "greedy",
            AttackStrategy::Ges => "ges",
            AttackStrategy::Timber => "timber",
            AttackStrategy::Tes => "tes",
            AttackStrategy::Entropy => "entropy",
            AttackStrategy::KMedoids => "kmedoids",
            AttackStrategy::Random => "random",
        }
    }

    /// True for the greedy-family strategies that retrain per candidate.
    pub fn is_iterative(&self) -> bool {
        matches!(
            self,
            AttackStrategy::Greedy | AttackStrategy::Ges | AttackStrategy::Timber | AttackStrategy::Tes
        )
    }
}

impl std::str::FromStr for AttackStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackStrategy::ALL
            .iter()
            .find(|a| a.name() == s)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown attack strategy {s:?}")))
    }
}

/// Attack configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub strategy: AttackStrategy,
    /// Budget as a fraction of the training set; `k = round(fraction * n)`.
    pub budget_fraction: f64,
    /// Attacks flip only instances whose original label is this class.
    pub target_class: Label,
    pub seed: u64,
    pub threads: usize,
    /// Score aggregation used by TES candidate ordering.
    pub aggregation: ScoreAggregation,
}

impl AttackConfig {
    pub fn new(strategy: AttackStrategy, budget_fraction: f64) -> Self {
        AttackConfig {
            strategy,
            budget_fraction,
            target_class: Label::Pos,
            seed: 0,
            threads: 16,
            aggregation: ScoreAggregation::Mean,
        }
    }
}

/// One committed flip with post-commit evaluation metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub flipped_index: usize,
    pub accuracy: f64,
    pub f1: f64,
    /// Candidates the strategy needed to examine in scan order before
    /// committing (thread-count independent).
    pub candidates_evaluated: usize,
    /// Instances processed by retraining this round, candidate evaluation
    /// plus the post-commit full retrain.
    pub retrain_workload: u64,
}

/// Ordered record of an attack run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackTrace {
    pub strategy: AttackStrategy,
    pub k: usize,
    pub rounds: Vec<RoundRecord>,
    pub wall_seconds: f64,
    /// Per-training-instance scores averaged over rounds; recorded by the
    /// annotation-based strategies.
    pub mean_scores: Option<Vec<f64>>,
}

impl AttackTrace {
    pub fn total_workload(&self) -> u64 {
        self.rounds.iter().map(|r| r.retrain_workload).sum()
    }

    pub fn flipped_indices(&self) -> Vec<usize> {
        self.rounds.iter().map(|r| r.flipped_index).collect()
    }

    /// CSV with one row per round.
    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "round,flipped_index,accuracy,f1,candidates_evaluated,retrain_workload")?;
        for r in &self.rounds {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.round, r.flipped_index, r.accuracy, r.f1, r.candidates_evaluated, r.retrain_workload
            )?;
        }
        Ok(())
    }

    /// JSON with one record per round.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serialization cannot fail")
    }

    /// CSV of `(instance index, mean score)`, when score data was recorded.
    pub fn write_score_cdf_csv(&self, out: &mut impl Write) -> Result<()> {
        let Some(scores) = &self.mean_scores else {
            return Err(Error::Config(
                "no score data recorded for this strategy".to_string(),
            ));
        };
        writeln!(out, "instance,mean_score")?;
        for (i, s) in scores.iter().enumerate() {
            writeln!(out, "{},{}", i, s)?;
        }
        Ok(())
    }
}

/// Result of an attack: the trace, the poisoned training set, and the model
/// retrained on it with the attacked hyperparameters.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub trace: AttackTrace,
    pub poisoned: Dataset,
    pub final_model: Forest,
}

/// Run an attack to its budget. Candidate accuracy is measured on `eval`
/// (the held-out test set in the perfect-knowledge setting).
pub fn run_attack(
    params: &ForestParams,
    train: &Dataset,
    eval: &Dataset,
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    params.validate()?;
    if cfg.threads < 1 {
        return Err(Error::InvalidParams("threads must be >= 1".to_string()));
    }
    if !(0.0..=1.0).contains(&cfg.budget_fraction) {
        return Err(Error::InvalidParams(format!(
            "budget fraction {} outside [0, 1]",
            cfg.budget_fraction
        )));
    }
    let k = round_half_up(cfg.budget_fraction * train.len() as f64);
    let targets = train.indices_of_class(cfg.target_class);
    if targets.len() < k {
        return Err(Error::NotEnoughTargets {
            need: k,
            have: targets.len(),
        });
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::InvalidParams(format!("thread pool: {e}")))?;
    pool.install(|| run_attack_inner(params, train, eval, cfg, k, &targets))
}

fn run_attack_inner(
    params: &ForestParams,
    train: &Dataset,
    eval: &Dataset,
    cfg: &AttackConfig,
    k: usize,
    targets: &[usize],
) -> Result<AttackOutcome> {
    let start = Instant::now();
    let mut outcome = match cfg.strategy {
        AttackStrategy::Greedy => greedy_attack(params, train, eval, cfg, k, targets, false, false),
        AttackStrategy::Ges => greedy_attack(params, train, eval, cfg, k, targets, true, false),
        AttackStrategy::Timber => greedy_attack(params, train, eval, cfg, k, targets, false, true),
        AttackStrategy::Tes => greedy_attack(params, train, eval, cfg, k, targets, true, true),
        AttackStrategy::Entropy => {
            let flips = entropy_attack(train, k, cfg.target_class)?;
            single_round_trace(params, train, eval, cfg, flips)
        }
        AttackStrategy::KMedoids => {
            let flips = kmedoids_attack(train, k, cfg.target_class)?;
            single_round_trace(params, train, eval, cfg, flips)
        }
        AttackStrategy::Random => {
            let flips = random_attack(train, k, cfg.target_class, cfg.seed)?;
            single_round_trace(params, train, eval, cfg, flips)
        }
    }?;
    outcome.trace.wall_seconds = start.elapsed().as_secs_f64();
    Ok(outcome)
}

/// Candidate evaluation for the greedy family: full forest retraining for
/// Greedy/GES, sub-tree retraining against the committed annotated forest
/// for Timber/TES. Both return the same accuracies, so the strategies pick
/// the same flips.
fn evaluate_candidate(
    use_subtree: bool,
    model: &Forest,
    params: &ForestParams,
    committed: &Dataset,
    eval: &Dataset,
    candidate: usize,
) -> Result<(f64, u64)> {
    if use_subtree {
        let (retrained, workload) = forest_flip_retrain(model, committed, candidate)?;
        Ok((accuracy(&retrained, eval), workload))
    } else {
        let flipped = committed.apply_flip(candidate)?;
        let (retrained, workload) = forest_train(&flipped, params)?;
        Ok((accuracy(&retrained, eval), workload))
    }
}

#[allow(clippy::too_many_arguments)]
fn greedy_attack(
    params: &ForestParams,
    train: &Dataset,
    eval: &Dataset,
    cfg: &AttackConfig,
    k: usize,
    targets: &[usize],
    early_stop: bool,
    use_subtree: bool,
) -> Result<AttackOutcome> {
    let mut committed = train.clone();
    let (mut model, _) = forest_train(&committed, params)?;
    let mut current_accuracy = accuracy(&model, eval);
    let mut rounds = Vec::with_capacity(k);
    let mut score_sums = if use_subtree {
        Some(vec![0.0f64; train.len()])
    } else {
        None
    };

    for round in 0..k {
        // Scores of the committed model, for TES ordering and for the
        // score-distribution artifact.
        let scores: Option<Vec<f64>> = if use_subtree {
            let s: Vec<f64> = (0..train.len())
                .into_par_iter()
                .map(|i| forest_score(&model, i, cfg.aggregation))
                .collect::<Result<_>>()?;
            let sums = score_sums.as_mut().expect("allocated for subtree mode");
            for (acc, v) in sums.iter_mut().zip(&s) {
                *acc += v;
            }
            Some(s)
        } else {
            None
        };

        let mut candidates: Vec<usize> = targets
            .iter()
            .copied()
            .filter(|i| !committed.flips().contains(i))
            .collect();
        if early_stop && use_subtree {
            // TES scans in increasing score order, ties by index.
            let scores = scores.as_ref().expect("scores computed in subtree mode");
            candidates.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        }

        let (chosen, evaluated, eval_workload) = if early_stop {
            select_early_stop(
                use_subtree,
                &model,
                params,
                &committed,
                eval,
                &candidates,
                current_accuracy,
                cfg.threads,
            )?
        } else {
            select_exhaustive(use_subtree, &model, params, &committed, eval, &candidates)?
        };

        committed = committed.apply_flip(chosen)?;
        let (new_model, commit_workload) = forest_train(&committed, params)?;
        model = new_model;
        let metrics = compute_metrics(&model, eval, Label::Pos);
        current_accuracy = metrics.accuracy;
        rounds.push(RoundRecord {
            round,
            flipped_index: chosen,
            accuracy: metrics.accuracy,
            f1: metrics.f1,
            candidates_evaluated: evaluated,
            retrain_workload: eval_workload + commit_workload,
        });
    }

    let mean_scores = score_sums.map(|sums| {
        let denom = k.max(1) as f64;
        sums.into_iter().map(|s| s / denom).collect()
    });
    Ok(AttackOutcome {
        trace: AttackTrace {
            strategy: cfg.strategy,
            k,
            rounds,
            wall_seconds: 0.0,
            mean_scores,
        },
        poisoned: committed,
        final_model: model,
    })
}

/// Evaluate every candidate and pick the accuracy minimizer, ties broken by
/// the smallest candidate index. The parallel reduction is an ordered scan
/// over collected results, so the choice is thread-count independent.
fn select_exhaustive(
    use_subtree: bool,
    model: &Forest,
    params: &ForestParams,
    committed: &Dataset,
    eval: &Dataset,
    candidates: &[usize],
) -> Result<(usize, usize, u64)> {
    let results: Vec<(f64, u64)> = candidates
        .par_iter()
        .map(|&c| evaluate_candidate(use_subtree, model, params, committed, eval, c))
        .collect::<Result<_>>()?;
    let mut best: Option<(f64, usize)> = None;
    let mut workload = 0u64;
    for (&candidate, &(acc, w)) in candidates.iter().zip(&results) {
        workload += w;
        let better = match best {
            None => true,
            Some((best_acc, best_idx)) => {
                acc < best_acc || (acc == best_acc && candidate < best_idx)
            }
        };
        if better {
            best = Some((acc, candidate));
        }
    }
    let (_, chosen) = best.ok_or(Error::EmptyRegion)?;
    Ok((chosen, candidates.len(), workload))
}

/// Scan candidates in order, in parallel batches of `threads`, and commit
/// the first one whose accuracy falls strictly below the current model's.
/// When no candidate causes a loss, fall back to the smallest accuracy
/// increase (ties by smallest candidate index). Recorded counts cover the
/// scan prefix up to the committed candidate, independent of batching.
#[allow(clippy::too_many_arguments)]
fn select_early_stop(
    use_subtree: bool,
    model: &Forest,
    params: &ForestParams,
    committed: &Dataset,
    eval: &Dataset,
    candidates: &[usize],
    current_accuracy: f64,
    threads: usize,
) -> Result<(usize, usize, u64)> {
    let chunk_size = threads.max(1);
    let mut evaluated = Vec::with_capacity(candidates.len());
    let mut qualifying: Option<usize> = None; // scan position

    'scan: for chunk in candidates.chunks(chunk_size) {
        let results: Vec<(f64, u64)> = chunk
            .par_iter()
            .map(|&c| evaluate_candidate(use_subtree, model, params, committed, eval, c))
            .collect::<Result<_>>()?;
        for (offset, res) in results.into_iter().enumerate() {
            let _ = offset;
            evaluated.push(res);
            if res.0 < current_accuracy {
                qualifying = Some(evaluated.len() - 1);
                break 'scan;
            }
        }
    }

    let position = match qualifying {
        Some(pos) => pos,
        None => {
            // Fallback: smallest accuracy increase, smallest index on ties.
            let mut best: Option<(f64, usize)> = None;
            for (pos, &(acc, _)) in evaluated.iter().enumerate() {
                let candidate = candidates[pos];
                let better = match best {
                    None => true,
                    Some((best_acc, best_idx)) => {
                        acc < best_acc || (acc == best_acc && candidate < best_idx)
                    }
                };
                if better {
                    best = Some((acc, candidate));
                }
            }
            let (_, chosen) = best.ok_or(Error::EmptyRegion)?;
            candidates.iter().position(|&c| c == chosen).expect("chosen from candidates")
        }
    };

    let workload: u64 = evaluated[..=position].iter().map(|&(_, w)| w).sum();
    Ok((candidates[position], position + 1, workload))
}

/// Trace for the single-round strategies: an ordered flip list applied one
/// instance per round, retraining and evaluating after each.
fn single_round_trace(
    params: &ForestParams,
    train: &Dataset,
    eval: &Dataset,
    cfg: &AttackConfig,
    flips: Vec<usize>,
) -> Result<AttackOutcome> {
    let mut committed = train.clone();
    let mut rounds = Vec::with_capacity(flips.len());
    let k = flips.len();
    let mut model = forest_train(&committed, params)?.0;
    for (round, idx) in flips.into_iter().enumerate() {
        committed = committed.apply_flip(idx)?;
        let (new_model, workload) = forest_train(&committed, params)?;
        model = new_model;
        let metrics = compute_metrics(&model, eval, Label::Pos);
        rounds.push(RoundRecord {
            round,
            flipped_index: idx,
            accuracy: metrics.accuracy,
            f1: metrics.f1,
            candidates_evaluated: 0,
            retrain_workload: workload,
        });
    }
    Ok(AttackOutcome {
        trace: AttackTrace {
            strategy: cfg.strategy,
            k,
            rounds,
            wall_seconds: 0.0,
            mean_scores: None,
        },
        poisoned: committed,
        final_model: model,
    })
}

/// Entropy baseline: flip the `k` target-class instances with the lowest
/// label entropy over their 10-nearest neighborhood (standardized Euclidean
/// distance). Confidently labeled instances score low and are flipped
/// first; ties break by index. Returns the flips in selection order.
pub fn entropy_attack(train: &Dataset, k: usize, target_class: Label) -> Result<Vec<usize>> {
    let targets = train.indices_of_class(target_class);
    if targets.len() < k {
        return Err(Error::NotEnoughTargets {
            need: k,
            have: targets.len(),
        });
    }
    if train.len() < 2 {
        return Err(Error::InvalidParams(
            "entropy attack needs at least 2 instances".to_string(),
        ));
    }
    let space = StandardizedSpace::new(train);
    let nn = 10.min(train.len() - 1);
    let mut scored: Vec<(f64, usize)> = targets
        .iter()
        .map(|&i| {
            let neighbors = space.nearest_neighbors(i, nn);
            let pos = neighbors
                .iter()
                .filter(|&&j| train.effective_label(j) == Label::Pos)
                .count();
            (binary_entropy(pos, neighbors.len() - pos), i)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(k).map(|(_, i)| i).collect())
}

/// K-Medoids baseline: cluster the training set into two groups (PAM with
/// farthest-pair initialization, standardized Euclidean distance) and flip
/// the `k` target-class instances nearest to the medoid of the cluster
/// holding the fewest target-class instances. Ties break by index; returns
/// the flips in selection order.
pub fn kmedoids_attack(train: &Dataset, k: usize, target_class: Label) -> Result<Vec<usize>> {
    let n = train.len();
    let targets = train.indices_of_class(target_class);
    if targets.len() < k {
        return Err(Error::NotEnoughTargets {
            need: k,
            have: targets.len(),
        });
    }
    if n < 2 {
        return Err(Error::InvalidParams(
            "k-medoids needs at least 2 instances".to_string(),
        ));
    }
    let space = StandardizedSpace::new(train);

    // Initialize at the two mutually farthest points.
    let mut medoids = (0usize, 1usize);
    let mut max_dist = -1.0f64;
    for a in 0..n {
        for b in (a + 1)..n {
            let dist = space.distance(a, b);
            if dist > max_dist {
                max_dist = dist;
                medoids = (a, b);
            }
        }
    }

    if max_dist > 0.0 {
        // PAM swap phase: apply the best strictly-improving swap until none
        // remains. Deterministic scan order makes ties reproducible.
        let cost = |m: (usize, usize)| -> f64 {
            (0..n)
                .map(|i| space.distance(i, m.0).min(space.distance(i, m.1)))
                .sum()
        };
        let mut current_cost = cost(medoids);
        loop {
            let mut best_swap: Option<((usize, usize), f64)> = None;
            for slot in 0..2 {
                for o in 0..n {
                    if o == medoids.0 || o == medoids.1 {
                        continue;
                    }
                    let candidate = if slot == 0 { (o, medoids.1) } else { (medoids.0, o) };
                    let c = cost(candidate);
                    if c < current_cost && best_swap.map_or(true, |(_, bc)| c < bc) {
                        best_swap = Some((candidate, c));
                    }
                }
            }
            match best_swap {
                Some((m, c)) => {
                    medoids = m;
                    current_cost = c;
                }
                None => break,
            }
        }
    } else {
        // Degenerate all-identical data: split by index halves.
        medoids = (0, n / 2);
    }

    // Normalize so cluster 0 is the smaller medoid index.
    if medoids.0 > medoids.1 {
        medoids = (medoids.1, medoids.0);
    }

    // Assign to the nearer medoid (ties to cluster 0) and find the cluster
    // with the fewest target-class instances (ties to cluster 0).
    let assignment: Vec<usize> = (0..n)
        .map(|i| {
            if max_dist > 0.0 {
                usize::from(space.distance(i, medoids.1) < space.distance(i, medoids.0))
            } else {
                usize::from(i >= n / 2)
            }
        })
        .collect();
    let target_count_0 = targets.iter().filter(|&&i| assignment[i] == 0).count();
    let target_count_1 = targets.len() - target_count_0;
    let scarce_medoid = if target_count_0 <= target_count_1 {
        medoids.0
    } else {
        medoids.1
    };

    let mut ranked: Vec<(f64, usize)> = targets
        .iter()
        .map(|&i| (space.distance(i, scarce_medoid), i))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(ranked.into_iter().take(k).map(|(_, i)| i).collect())
}

/// Random baseline: a seeded uniform sample of `k` target-class instances
/// without replacement, in sample order.
pub fn random_attack(train: &Dataset, k: usize, target_class: Label, seed: u64) -> Result<Vec<usize>> {
    let mut targets = train.indices_of_class(target_class);
    if targets.len() < k {
        return Err(Error::NotEnoughTargets {
            need: k,
            have: targets.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    targets.shuffle(&mut rng);
    targets.truncate(k);
    Ok(targets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded_dataset(n: usize, d: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.gen::<f64>()).collect())
            .collect();
        let labels: Vec<Label> = rows
            .iter()
            .map(|row| {
                // Noisy linear concept so trees have structure to attack.
                let score: f64 = row.iter().sum::<f64>() / d as f64 + 0.4 * rng.gen::<f64>();
                if score < 0.7 {
                    Label::Pos
                } else {
                    Label::Neg
                }
            })
            .collect();
        Dataset::from_parts("synth", rows, labels).unwrap()
    }

    fn base_config(strategy: AttackStrategy, fraction: f64) -> AttackConfig {
        let mut cfg = AttackConfig::new(strategy, fraction);
        cfg.threads = 2;
        cfg
    }

    #[test]
    fn zero_budget_gives_empty_trace() {
        let train = seeded_dataset(30, 2, 1);
        let eval = seeded_dataset(10, 2, 2);
        let params = ForestParams::new(1, 3);
        let cfg = base_config(AttackStrategy::Greedy, 0.0);
        let out = run_attack(&params, &train, &eval, &cfg).unwrap();
        assert!(out.trace.rounds.is_empty());
        assert!(out.poisoned.flips().is_empty());
    }

    #[test]
    fn timber_trace_equals_greedy_trace() {
        for seed in 0..4 {
            let train = seeded_dataset(40, 2, seed);
            let eval = seeded_dataset(20, 2, seed + 100);
            let params = ForestParams::new(1, 4);
            let greedy = run_attack(
                &params,
                &train,
                &eval,
                &base_config(AttackStrategy::Greedy, 0.1),
            )
            .unwrap();
            let timber = run_attack(
                &params,
                &train,
                &eval,
                &base_config(AttackStrategy::Timber, 0.1),
            )
            .unwrap();
            assert_eq!(
                greedy.trace.flipped_indices(),
                timber.trace.flipped_indices(),
                "seed {seed}"
            );
            for (g, t) in greedy.trace.rounds.iter().zip(&timber.trace.rounds) {
                assert_eq!(g.accuracy, t.accuracy, "seed {seed} round {}", g.round);
                assert_eq!(g.f1, t.f1);
            }
        }
    }

    #[test]
    fn all_strategies_flip_exactly_k_target_instances() {
        let train = seeded_dataset(50, 2, 3);
        let eval = seeded_dataset(20, 2, 7);
        let params = ForestParams::new(1, 3);
        for strategy in AttackStrategy::ALL {
            let out = run_attack(&params, &train, &eval, &base_config(strategy, 0.08)).unwrap();
            let k = round_half_up(0.08 * train.len() as f64);
            assert_eq!(out.trace.rounds.len(), k, "{}", strategy.name());
            let flips = out.trace.flipped_indices();
            let mut unique = flips.clone();
            unique.sort_unstable();
            unique.dedup();
            assert_eq!(unique.len(), flips.len(), "{} repeated a flip", strategy.name());
            for &i in &flips {
                assert_eq!(
                    train.original_label(i),
                    Label::Pos,
                    "{} flipped a non-target instance",
                    strategy.name()
                );
            }
        }
    }

    #[test]
    fn early_stop_matches_sequential_reference() {
        // The chosen flip must be the first candidate (in scan order) whose
        // accuracy drops below the committed model's, regardless of how the
        // parallel batches are carved.
        let train = seeded_dataset(36, 2, 11);
        let eval = seeded_dataset(18, 2, 12);
        let params = ForestParams::new(1, 3);
        let cfg = base_config(AttackStrategy::Ges, 0.05);
        let out = run_attack(&params, &train, &eval, &cfg).unwrap();

        // Sequential reference for round 0.
        let (model, _) = forest_train(&train, &params).unwrap();
        let current = accuracy(&model, &eval);
        let candidates: Vec<usize> = train.indices_of_class(Label::Pos);
        let mut expected = None;
        let mut fallback: Option<(f64, usize)> = None;
        for &c in &candidates {
            let flipped = train.apply_flip(c).unwrap();
            let (m, _) = forest_train(&flipped, &params).unwrap();
            let acc = accuracy(&m, &eval);
            if acc < current {
                expected = Some(c);
                break;
            }
            let better = match fallback {
                None => true,
                Some((best_acc, best_idx)) => acc < best_acc || (acc == best_acc && c < best_idx),
            };
            if better {
                fallback = Some((acc, c));
            }
        }
        let expected = expected.or(fallback.map(|(_, c)| c)).unwrap();
        assert_eq!(out.trace.rounds[0].flipped_index, expected);
    }

    #[test]
    fn tes_scans_in_score_order() {
        let train = seeded_dataset(40, 2, 21);
        let eval = seeded_dataset(20, 2, 22);
        let params = ForestParams::new(2, 4);
        let cfg = base_config(AttackStrategy::Tes, 0.05);
        let out = run_attack(&params, &train, &eval, &cfg).unwrap();

        // Reference: first round, candidates ordered by (score, index); the
        // commit must be the first score-ordered candidate causing loss, or
        // the arg-min increase fallback.
        let (model, _) = forest_train(&train, &params).unwrap();
        let current = accuracy(&model, &eval);
        let mut candidates = train.indices_of_class(Label::Pos);
        let scores: Vec<f64> = (0..train.len())
            .map(|i| forest_score(&model, i, ScoreAggregation::Mean).unwrap())
            .collect();
        candidates.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        let mut expected = None;
        let mut fallback: Option<(f64, usize)> = None;
        for &c in &candidates {
            let (retrained, _) = flip_retrain_forest_reference(&model, &train, c);
            let acc = accuracy(&retrained, &eval);
            if acc < current {
                expected = Some(c);
                break;
            }
            let better = match fallback {
                None => true,
                Some((best_acc, best_idx)) => acc < best_acc || (acc == best_acc && c < best_idx),
            };
            if better {
                fallback = Some((acc, c));
            }
        }
        let expected = expected.or(fallback.map(|(_, c)| c)).unwrap();
        assert_eq!(out.trace.rounds[0].flipped_index, expected);
    }

    fn flip_retrain_forest_reference(model: &Forest, d: &Dataset, c: usize) -> (Forest, u64) {
        forest_flip_retrain(model, d, c).unwrap()
    }

    #[test]
    fn exhaustive_trace_is_thread_count_independent() {
        let train = seeded_dataset(30, 2, 31);
        let eval = seeded_dataset(15, 2, 32);
        let params = ForestParams::new(1, 3);
        let mut cfg1 = base_config(AttackStrategy::Timber, 0.1);
        cfg1.threads = 1;
        let mut cfg16 = cfg1;
        cfg16.threads = 16;
        let a = run_attack(&params, &train, &eval, &cfg1).unwrap();
        let b = run_attack(&params, &train, &eval, &cfg16).unwrap();
        assert_eq!(a.trace.rounds, b.trace.rounds);
    }

    #[test]
    fn random_attack_is_deterministic_and_covering() {
        let train = seeded_dataset(20, 2, 41);
        let targets = train.indices_of_class(Label::Pos);
        let a = random_attack(&train, 3, Label::Pos, 99).unwrap();
        let b = random_attack(&train, 3, Label::Pos, 99).unwrap();
        assert_eq!(a, b);
        let all = random_attack(&train, targets.len(), Label::Pos, 5).unwrap();
        let mut sorted = all.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, targets);

        // Union over many seeds covers every target index.
        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..1000 {
            for i in random_attack(&train, 1, Label::Pos, seed).unwrap() {
                seen.insert(i);
            }
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), targets);
    }

    #[test]
    fn entropy_attack_prefers_confidently_labeled_instances() {
        // Six positives deep in one cluster (low neighborhood entropy, all
        // labels agree except the distant crossed point) and one positive
        // stranded in the negative cluster (maximal entropy): the stranded
        // instance is selected last.
        let mut rows = vec![vec![0.0]; 6];
        let mut labels = vec![Label::Pos; 6];
        for _ in 0..5 {
            rows.push(vec![10.0]);
            labels.push(Label::Neg);
        }
        rows.push(vec![9.0]); // crossed positive near the negative cluster
        labels.push(Label::Pos);
        let train = Dataset::from_parts("two-cluster", rows, labels).unwrap();

        let order = entropy_attack(&train, 7, Label::Pos).unwrap();
        assert_eq!(order.len(), 7);
        assert_eq!(order[6], 11, "the stranded positive is flipped last");
        assert_eq!(&order[..6], &[0, 1, 2, 3, 4, 5]);

        // k covering all targets flips everything regardless of score.
        let all = entropy_attack(&train, 7, Label::Pos).unwrap();
        assert_eq!(all.len(), 7);
    }

    #[test]
    fn entropy_attack_identical_instances_share_scores() {
        let rows = vec![vec![1.0], vec![1.0], vec![5.0], vec![5.0]];
        let labels = vec![Label::Pos, Label::Pos, Label::Neg, Label::Neg];
        let train = Dataset::from_parts("dup", rows, labels).unwrap();
        let order = entropy_attack(&train, 2, Label::Pos).unwrap();
        // identical instances tie, broken by index
        assert_eq!(order, vec![0, 1]);
    }

    #[test]
    fn kmedoids_places_medoids_one_per_blob() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..5 {
            rows.push(vec![i as f64 * 0.1]);
            labels.push(Label::Pos);
        }
        for i in 0..5 {
            rows.push(vec![10.0 + i as f64 * 0.1]);
            labels.push(Label::Neg);
        }
        let train = Dataset::from_parts("blobs", rows, labels).unwrap();
        let space = StandardizedSpace::new(&train);

        // Exhaustive reference: the optimal pair has minimal total distance.
        let n = train.len();
        let cost = |a: usize, b: usize| -> f64 {
            (0..n)
                .map(|i| space.distance(i, a).min(space.distance(i, b)))
                .sum()
        };
        let mut best = (0, 1);
        let mut best_cost = f64::MAX;
        for a in 0..n {
            for b in (a + 1)..n {
                let c = cost(a, b);
                if c < best_cost {
                    best_cost = c;
                    best = (a, b);
                }
            }
        }
        assert!(best.0 < 5 && best.1 >= 5, "optimal medoids straddle the blobs");

        // The attack should flip positives nearest the negative blob's
        // medoid first: the selection must be ordered by distance to it.
        let order = kmedoids_attack(&train, 5, Label::Pos).unwrap();
        assert_eq!(order, vec![4, 3, 2, 1, 0]);
    }

    #[test]
    fn kmedoids_single_flip_targets_boundary_crosser() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..5 {
            rows.push(vec![i as f64 * 0.1]);
            labels.push(Label::Pos);
        }
        for i in 0..5 {
            rows.push(vec![10.0 + i as f64 * 0.1]);
            labels.push(Label::Neg);
        }
        rows.push(vec![10.5]); // positive stranded in the negative blob
        labels.push(Label::Pos);
        let train = Dataset::from_parts("blobs", rows, labels).unwrap();
        let order = kmedoids_attack(&train, 1, Label::Pos).unwrap();
        assert_eq!(order, vec![10]);
    }

    #[test]
    fn kmedoids_is_deterministic() {
        let train = seeded_dataset(25, 3, 51);
        let a = kmedoids_attack(&train, 4, Label::Pos).unwrap();
        let b = kmedoids_attack(&train, 4, Label::Pos).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_small_target_class_errors() {
        let train = seeded_dataset(20, 2, 61);
        let targets = train.indices_of_class(Label::Pos).len();
        let err = random_attack(&train, targets + 1, Label::Pos, 0);
        assert!(matches!(err, Err(Error::NotEnoughTargets { .. })));
    }

    #[test]
    fn timber_workload_never_exceeds_greedy() {
        let train = seeded_dataset(60, 3, 71);
        let eval = seeded_dataset(30, 3, 72);
        let params = ForestParams::new(1, 4);
        let greedy = run_attack(
            &params,
            &train,
            &eval,
            &base_config(AttackStrategy::Greedy, 0.05),
        )
        .unwrap();
        let timber = run_attack(
            &params,
            &train,
            &eval,
            &base_config(AttackStrategy::Timber, 0.05),
        )
        .unwrap();
        for (g, t) in greedy.trace.rounds.iter().zip(&timber.trace.rounds) {
            assert!(
                t.retrain_workload <= g.retrain_workload,
                "round {}: timber {} > greedy {}",
                g.round,
                t.retrain_workload,
                g.retrain_workload
            );
        }
    }

    #[test]
    fn trace_csv_has_one_row_per_round() {
        let train = seeded_dataset(30, 2, 81);
        let eval = seeded_dataset(10, 2, 82);
        let params = ForestParams::new(1, 3);
        let out = run_attack(
            &params,
            &train,
            &eval,
            &base_config(AttackStrategy::Random, 0.1),
        )
        .unwrap();
        let mut buf = Vec::new();
        out.trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), out.trace.rounds.len() + 1);
    }
}
