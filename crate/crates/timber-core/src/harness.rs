//! Grid search, the end-to-end experiment pipeline, and budget sweeps.
//!
//! The pipeline mirrors the evaluation protocol: split, grid-search the
//! model on clean data, attack to budget, retrain with the same
//! hyperparameters on the poisoned set, then tune and apply both defenses.
//! Every stage is seeded and every report embeds its configuration, so a
//! rerun reproduces the same report byte for byte (runtime fields aside).

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::attacks::{run_attack, AttackConfig, AttackStrategy, AttackTrace};
use crate::config::ExperimentConfig;
use crate::dataset::{round_half_up, stratified_split, Dataset, Label};
use crate::defenses::{
    hash_bagging_train, knn_sanitize, BaggingDefenseParams, KnnDefenseParams,
};
use crate::ensemble::{forest_train, Forest, ForestParams};
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, Metrics};
use crate::tree::TreeParams;

/// Model grid-search outcome: the winning hyperparameters refit on the full
/// training set.
#[derive(Debug, Clone)]
pub struct GridSearchResult {
    pub params: ForestParams,
    pub validation_f1: f64,
    pub model: Forest,
}

/// Grid-search forest hyperparameters on a stratified 80/20 validation
/// split of `train`. Ties break toward fewer trees, then smaller depth,
/// then grid order; the winner is refit on the full training set.
pub fn grid_search(
    train: &Dataset,
    grid: &crate::config::ModelGridConfig,
    selection_seed: u64,
) -> Result<GridSearchResult> {
    let (sub_train, validation) = stratified_split(train, 0.2, selection_seed)?;
    let points: Vec<(usize, usize)> = (grid.trees_min..=grid.trees_max)
        .flat_map(|t| (grid.depth_min..=grid.depth_max).map(move |d| (t, d)))
        .collect();
    if points.is_empty() {
        return Err(Error::InvalidParams("empty model grid".to_string()));
    }

    let scored: Vec<f64> = points
        .par_iter()
        .map(|&(n_trees, depth)| {
            let params = ForestParams {
                n_trees,
                tree_params: TreeParams::new(depth),
                feature_subsample: grid.feature_subsample,
                seed: grid.seed,
            };
            let (model, _) = forest_train(&sub_train, &params)?;
            Ok(compute_metrics(&model, &validation, Label::Pos).f1)
        })
        .collect::<Result<_>>()?;

    let mut best: Option<(f64, usize, usize)> = None; // (f1, trees, depth)
    for (&(n_trees, depth), &f1) in points.iter().zip(&scored) {
        let better = match best {
            None => true,
            Some((bf, bt, bd)) => {
                f1 > bf || (f1 == bf && (n_trees < bt || (n_trees == bt && depth < bd)))
            }
        };
        if better {
            best = Some((f1, n_trees, depth));
        }
    }
    let (validation_f1, n_trees, depth) = best.expect("grid is nonempty");
    let params = ForestParams {
        n_trees,
        tree_params: TreeParams::new(depth),
        feature_subsample: grid.feature_subsample,
        seed: grid.seed,
    };
    let (model, _) = forest_train(train, &params)?;
    Ok(GridSearchResult {
        params,
        validation_f1,
        model,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetSummary {
    pub name: String,
    pub n_train: usize,
    pub n_test: usize,
    pub n_features: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelSelection {
    pub n_trees: usize,
    pub max_depth: usize,
    pub validation_f1: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttackSummary {
    pub strategy: AttackStrategy,
    pub k: usize,
    pub flipped_indices: Vec<usize>,
    pub total_workload: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct KnnDefenseReport {
    pub params: KnnDefenseParams,
    pub metrics: Metrics,
    pub defense_benefit: f64,
    pub residual_damage: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BaggingDefenseReport {
    pub n_subsets: usize,
    pub subset_fraction: f64,
    pub metrics: Metrics,
    pub defense_benefit: f64,
    pub residual_damage: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RuntimeReport {
    pub total_seconds: f64,
    pub attack_wall_seconds: f64,
}

/// The complete result of one experiment run.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub version: u32,
    pub config: ExperimentConfig,
    pub dataset: DatasetSummary,
    pub model: ModelSelection,
    pub clean: Metrics,
    pub attack: AttackSummary,
    pub poisoned: Metrics,
    pub knn_defense: KnnDefenseReport,
    pub bagging_defense: BaggingDefenseReport,
    /// Wall-clock figures; excluded from determinism comparisons.
    pub runtime: RuntimeReport,
}

pub const REPORT_VERSION: u32 = 1;

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }
}

/// Everything `run_experiment` produces, including the per-round trace.
#[derive(Debug, Clone)]
pub struct ExperimentArtifacts {
    pub report: ExperimentReport,
    pub trace: AttackTrace,
}

/// Run the full pipeline: load, split, grid-search the clean model, attack,
/// retrain on the poisoned set, tune and apply both defenses.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentArtifacts> {
    cfg.validate()?;
    let started = Instant::now();

    let data = Dataset::load_csv(&cfg.dataset_path, &cfg.label_column, &cfg.positive_value)
        .map_err(|e| e.in_stage("load"))?;
    let (train, test) = stratified_split(&data, cfg.split_fraction, cfg.split_seed)
        .map_err(|e| e.in_stage("split"))?;

    let selected = grid_search(&train, &cfg.model, cfg.model.selection_seed)
        .map_err(|e| e.in_stage("grid_search"))?;
    let clean = compute_metrics(&selected.model, &test, Label::Pos);

    let attack_cfg = AttackConfig {
        strategy: cfg.attack_strategy,
        budget_fraction: cfg.attack_budget,
        target_class: cfg.attack_target_class,
        seed: cfg.attack_seed,
        threads: cfg.threads,
        aggregation: cfg.attack_aggregation,
    };
    let outcome = run_attack(&selected.params, &train, &test, &attack_cfg)
        .map_err(|e| e.in_stage("attack"))?;
    let poisoned_metrics = compute_metrics(&outcome.final_model, &test, Label::Pos);

    let knn_defense = tune_knn_defense(
        cfg,
        &outcome.poisoned,
        &test,
        &selected.params,
        clean.f1,
        poisoned_metrics.f1,
    )
    .map_err(|e| e.in_stage("knn_defense"))?;
    let bagging_defense = tune_bagging_defense(
        cfg,
        &outcome.poisoned,
        &test,
        &selected.params,
        clean.f1,
        poisoned_metrics.f1,
    )
    .map_err(|e| e.in_stage("bagging_defense"))?;

    let report = ExperimentReport {
        version: REPORT_VERSION,
        config: cfg.clone(),
        dataset: DatasetSummary {
            name: data.name().to_string(),
            n_train: train.len(),
            n_test: test.len(),
            n_features: data.n_features(),
        },
        model: ModelSelection {
            n_trees: selected.params.n_trees,
            max_depth: selected.params.tree_params.max_depth,
            validation_f1: selected.validation_f1,
        },
        clean,
        attack: AttackSummary {
            strategy: cfg.attack_strategy,
            k: outcome.trace.k,
            flipped_indices: outcome.trace.flipped_indices(),
            total_workload: outcome.trace.total_workload(),
        },
        poisoned: poisoned_metrics,
        knn_defense,
        bagging_defense,
        runtime: RuntimeReport {
            total_seconds: started.elapsed().as_secs_f64(),
            attack_wall_seconds: outcome.trace.wall_seconds,
        },
    };
    Ok(ExperimentArtifacts {
        report,
        trace: outcome.trace,
    })
}

/// Select kNN defense hyperparameters on a validation split carved from the
/// poisoned training set (the defender never sees clean labels). Returns
/// the winning parameters with their validation F1.
pub fn select_knn_defense(
    grids: &crate::config::DefenseGridConfig,
    poisoned: &Dataset,
    model_params: &ForestParams,
) -> Result<(KnnDefenseParams, f64)> {
    let (def_train, def_val) = stratified_split(poisoned, 0.2, grids.seed)?;
    let mut grid = Vec::new();
    for &n in &grids.knn_n {
        for &eta in &grids.knn_eta {
            for &m in &grids.knn_m {
                if n < def_train.len() {
                    grid.push(KnnDefenseParams::new(n, eta, m));
                }
            }
        }
    }
    if grid.is_empty() {
        return Err(Error::InvalidParams(
            "no feasible kNN defense grid point".to_string(),
        ));
    }

    let scored: Vec<f64> = grid
        .par_iter()
        .map(|p| {
            let sanitized = knn_sanitize(&def_train, p)?;
            let (model, _) = forest_train(&sanitized, model_params)?;
            Ok(compute_metrics(&model, &def_val, Label::Pos).f1)
        })
        .collect::<Result<_>>()?;
    Ok(pick_best(&grid, &scored))
}

/// Select hash-bagging hyperparameters the same way.
pub fn select_bagging_defense(
    grids: &crate::config::DefenseGridConfig,
    poisoned: &Dataset,
    model_params: &ForestParams,
) -> Result<(BaggingDefenseParams, f64)> {
    let (def_train, def_val) = stratified_split(poisoned, 0.2, grids.seed)?;
    let mut grid = Vec::new();
    for &g in &grids.bagging_g {
        for &k in &grids.bagging_k {
            if round_half_up(k * def_train.len() as f64) >= 2 {
                grid.push(BaggingDefenseParams::new(g, k, grids.seed));
            }
        }
    }
    if grid.is_empty() {
        return Err(Error::InvalidParams(
            "no feasible bagging defense grid point".to_string(),
        ));
    }

    let scored: Vec<f64> = grid
        .par_iter()
        .map(|p| {
            let bagged = hash_bagging_train(&def_train, p, model_params)?;
            Ok(compute_metrics(&bagged, &def_val, Label::Pos).f1)
        })
        .collect::<Result<_>>()?;
    Ok(pick_best(&grid, &scored))
}

/// Tune the kNN defense, sanitize the full poisoned set with the winner,
/// and measure on the test set.
fn tune_knn_defense(
    cfg: &ExperimentConfig,
    poisoned: &Dataset,
    test: &Dataset,
    model_params: &ForestParams,
    f1_clean: f64,
    f1_poisoned: f64,
) -> Result<KnnDefenseReport> {
    let (best, _) = select_knn_defense(&cfg.defense, poisoned, model_params)?;
    let sanitized = knn_sanitize(poisoned, &best)?;
    let (model, _) = forest_train(&sanitized, model_params)?;
    let metrics = compute_metrics(&model, test, Label::Pos);
    Ok(KnnDefenseReport {
        params: best,
        metrics,
        defense_benefit: metrics.f1 - f1_poisoned,
        residual_damage: f1_clean - metrics.f1,
    })
}

/// Tune hash bagging and train the winner on the full poisoned set.
fn tune_bagging_defense(
    cfg: &ExperimentConfig,
    poisoned: &Dataset,
    test: &Dataset,
    model_params: &ForestParams,
    f1_clean: f64,
    f1_poisoned: f64,
) -> Result<BaggingDefenseReport> {
    let (best, _) = select_bagging_defense(&cfg.defense, poisoned, model_params)?;
    let bagged = hash_bagging_train(poisoned, &best, model_params)?;
    let metrics = compute_metrics(&bagged, test, Label::Pos);
    Ok(BaggingDefenseReport {
        n_subsets: best.n_subsets,
        subset_fraction: best.subset_fraction,
        metrics,
        defense_benefit: metrics.f1 - f1_poisoned,
        residual_damage: f1_clean - metrics.f1,
    })
}

/// Highest validation F1 wins; ties go to the earliest grid point.
fn pick_best<P: Copy>(grid: &[P], scores: &[f64]) -> (P, f64) {
    let mut best = 0;
    for i in 1..grid.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    (grid[best], scores[best])
}

/// One row of the sweep matrix.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub strategy: AttackStrategy,
    pub budget_fraction: f64,
    pub k: usize,
    pub accuracy: f64,
    pub f1: f64,
}

/// Run each strategy once at the maximum budget and extract one row per
/// `(strategy, budget)` pair from trace prefixes. All strategies commit
/// flips incrementally in selection order, so the model after `k` rounds
/// equals the model attacked with budget `k`.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let data = Dataset::load_csv(&cfg.dataset_path, &cfg.label_column, &cfg.positive_value)
        .map_err(|e| e.in_stage("load"))?;
    let (train, test) = stratified_split(&data, cfg.split_fraction, cfg.split_seed)
        .map_err(|e| e.in_stage("split"))?;
    let selected = grid_search(&train, &cfg.model, cfg.model.selection_seed)
        .map_err(|e| e.in_stage("grid_search"))?;

    let max_budget = cfg
        .sweep_budgets
        .iter()
        .copied()
        .fold(0.0f64, f64::max);
    let mut rows = Vec::new();
    for &strategy in &cfg.sweep_strategies {
        let attack_cfg = AttackConfig {
            strategy,
            budget_fraction: max_budget,
            target_class: cfg.attack_target_class,
            seed: cfg.attack_seed,
            threads: cfg.threads,
            aggregation: cfg.attack_aggregation,
        };
        let outcome = run_attack(&selected.params, &train, &test, &attack_cfg)
            .map_err(|e| e.in_stage("attack"))?;
        for &budget in &cfg.sweep_budgets {
            let k = round_half_up(budget * train.len() as f64);
            let (accuracy, f1) = if k == 0 {
                let clean = compute_metrics(&selected.model, &test, Label::Pos);
                (clean.accuracy, clean.f1)
            } else {
                let r = &outcome.trace.rounds[k - 1];
                (r.accuracy, r.f1)
            };
            rows.push(SweepRow {
                strategy,
                budget_fraction: budget,
                k,
                accuracy,
                f1,
            });
        }
    }
    Ok(rows)
}

/// Serialize sweep rows as CSV.
pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("strategy,budget,k,accuracy,f1\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.strategy.name(),
            r.budget_fraction,
            r.k,
            r.accuracy,
            r.f1
        ));
    }
    out
}

/// Write report and trace files under `out_dir`, removing anything already
/// written on failure so no partial outputs remain.
pub fn write_experiment_outputs(
    artifacts: &ExperimentArtifacts,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let mut written: Vec<PathBuf> = Vec::new();

    let result = (|| -> Result<()> {
        let report_path = out_dir.join("report.json");
        std::fs::write(&report_path, artifacts.report.to_json())?;
        written.push(report_path);

        let trace_json = out_dir.join("trace.json");
        std::fs::write(&trace_json, artifacts.trace.to_json())?;
        written.push(trace_json);

        let trace_csv = out_dir.join("trace.csv");
        let mut buf = Vec::new();
        artifacts.trace.write_csv(&mut buf)?;
        std::fs::write(&trace_csv, buf)?;
        written.push(trace_csv);

        if artifacts.trace.mean_scores.is_some() {
            let cdf_csv = out_dir.join("score_cdf.csv");
            let mut buf = Vec::new();
            artifacts.trace.write_score_cdf_csv(&mut buf)?;
            std::fs::write(&cdf_csv, buf)?;
            written.push(cdf_csv);
        }
        Ok(())
    })();

    match result {
        Ok(()) => Ok(written),
        Err(e) => {
            for path in &written {
                let _ = std::fs::remove_file(path);
            }
            Err(e)
        }
    }
}
