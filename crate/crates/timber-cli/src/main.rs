//! `timber` command-line interface.
//!
//! Subcommands: `train`, `attack`, `defend`, `experiment`, `sweep`,
//! `verify`. All pipelines are driven by a flat key-value config file; see
//! the repository README for the key table.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use timber_core::attacks::{run_attack, AttackConfig};
use timber_core::config::ExperimentConfig;
use timber_core::dataset::{stratified_split, Dataset, Label};
use timber_core::defenses::{hash_bagging_train, knn_sanitize};
use timber_core::harness::{
    grid_search, run_experiment, run_sweep, select_bagging_defense, select_knn_defense,
    sweep_to_csv, write_experiment_outputs,
};
use timber_core::metrics::compute_metrics;
use timber_core::oracle::run_all_suites;

#[derive(Parser)]
#[command(
    name = "timber",
    version,
    about = "Label-flipping poisoning attacks, defenses, and experiments for tree ensembles"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct PipelineArgs {
    /// Experiment config file (flat `key = value` format).
    #[arg(long)]
    config: PathBuf,
    /// Worker threads for candidate evaluation, grids, and forests.
    #[arg(long, default_value_t = 16)]
    threads: usize,
    /// Overrides the attack seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for reports, traces, and exports.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Grid-search and fit a model on the clean training split; write
    /// `model.json` and print test metrics.
    Train(PipelineArgs),
    /// Run the configured attack strategy; write the trace and the poisoned
    /// training set.
    Attack(PipelineArgs),
    /// Tune both defenses against the training split of `dataset.path`
    /// (treated as possibly poisoned); write the sanitized dataset and a
    /// defense report.
    Defend(PipelineArgs),
    /// Full pipeline: clean model, attack, poisoned retrain, both defenses.
    Experiment(PipelineArgs),
    /// One row per (strategy, budget): attack each configured strategy at
    /// the maximum budget and tabulate metrics per budget prefix.
    Sweep(PipelineArgs),
    /// Run the brute-force oracle suites and print a pass/fail summary.
    Verify {
        /// Shrink case counts for a fast smoke run.
        #[arg(long)]
        quick: bool,
        /// Worker threads.
        #[arg(long, default_value_t = 16)]
        threads: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("timber: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> timber_core::Result<ExitCode> {
    match cli.command {
        Command::Train(args) => {
            let cfg = load_config(&args)?;
            init_threads(cfg.threads);
            let (train, test) = load_and_split(&cfg)?;
            let selected = grid_search(&train, &cfg.model, cfg.model.selection_seed)?;
            let metrics = compute_metrics(&selected.model, &test, Label::Pos);
            std::fs::create_dir_all(&args.out_dir)?;
            let model_path = args.out_dir.join("model.json");
            std::fs::write(&model_path, selected.model.to_json())?;
            println!(
                "model: {} trees, depth {} (validation F1 {:.4})",
                selected.params.n_trees,
                selected.params.tree_params.max_depth,
                selected.validation_f1
            );
            println!(
                "test accuracy {:.4}, F1 {:.4}",
                metrics.accuracy, metrics.f1
            );
            println!("wrote {}", model_path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Attack(args) => {
            let cfg = load_config(&args)?;
            init_threads(cfg.threads);
            let (train, test) = load_and_split(&cfg)?;
            let selected = grid_search(&train, &cfg.model, cfg.model.selection_seed)?;
            let clean = compute_metrics(&selected.model, &test, Label::Pos);
            let attack_cfg = AttackConfig {
                strategy: cfg.attack_strategy,
                budget_fraction: cfg.attack_budget,
                target_class: cfg.attack_target_class,
                seed: cfg.attack_seed,
                threads: cfg.threads,
                aggregation: cfg.attack_aggregation,
            };
            let outcome = run_attack(&selected.params, &train, &test, &attack_cfg)?;
            let poisoned = compute_metrics(&outcome.final_model, &test, Label::Pos);
            std::fs::create_dir_all(&args.out_dir)?;
            let mut buf = Vec::new();
            outcome.trace.write_csv(&mut buf)?;
            std::fs::write(args.out_dir.join("trace.csv"), buf)?;
            std::fs::write(args.out_dir.join("trace.json"), outcome.trace.to_json())?;
            outcome
                .poisoned
                .save_csv(args.out_dir.join("poisoned_train.csv"))?;
            if outcome.trace.mean_scores.is_some() {
                let mut buf = Vec::new();
                outcome.trace.write_score_cdf_csv(&mut buf)?;
                std::fs::write(args.out_dir.join("score_cdf.csv"), buf)?;
            }
            println!(
                "{}: k = {}, F1 {:.4} -> {:.4}, accuracy {:.4} -> {:.4} ({:.1}s)",
                cfg.attack_strategy.name(),
                outcome.trace.k,
                clean.f1,
                poisoned.f1,
                clean.accuracy,
                poisoned.accuracy,
                outcome.trace.wall_seconds
            );
            println!("outputs in {}", args.out_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Defend(args) => {
            let cfg = load_config(&args)?;
            init_threads(cfg.threads);
            let (train, _test) = load_and_split(&cfg)?;
            let selected = grid_search(&train, &cfg.model, cfg.model.selection_seed)?;
            let (knn_params, knn_f1) = select_knn_defense(&cfg.defense, &train, &selected.params)?;
            let (bag_params, bag_f1) =
                select_bagging_defense(&cfg.defense, &train, &selected.params)?;

            std::fs::create_dir_all(&args.out_dir)?;
            let sanitized = knn_sanitize(&train, &knn_params)?;
            sanitized.save_csv(args.out_dir.join("sanitized.csv"))?;
            let _ = hash_bagging_train(&train, &bag_params, &selected.params)?;
            let report = serde_json::json!({
                "version": 1,
                "knn": { "params": knn_params, "validation_f1": knn_f1 },
                "bagging": {
                    "n_subsets": bag_params.n_subsets,
                    "subset_fraction": bag_params.subset_fraction,
                    "validation_f1": bag_f1,
                },
            });
            std::fs::write(
                args.out_dir.join("defense_report.json"),
                serde_json::to_string_pretty(&report).expect("report"),
            )?;
            println!(
                "knn: N={} eta={} M={} (validation F1 {:.4})",
                knn_params.n_neighbors, knn_params.eta, knn_params.iterations, knn_f1
            );
            println!(
                "bagging: G={} K={} (validation F1 {:.4})",
                bag_params.n_subsets, bag_params.subset_fraction, bag_f1
            );
            println!("outputs in {}", args.out_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Experiment(args) => {
            let cfg = load_config(&args)?;
            init_threads(cfg.threads);
            let artifacts = run_experiment(&cfg)?;
            let written = write_experiment_outputs(&artifacts, &args.out_dir)?;
            let r = &artifacts.report;
            println!(
                "clean F1 {:.4} | poisoned F1 {:.4} | knn-defended F1 {:.4} | bagging-defended F1 {:.4}",
                r.clean.f1, r.poisoned.f1, r.knn_defense.metrics.f1, r.bagging_defense.metrics.f1
            );
            println!(
                "defense benefit: knn {:+.4}, bagging {:+.4}; residual damage: knn {:+.4}, bagging {:+.4}",
                r.knn_defense.defense_benefit,
                r.bagging_defense.defense_benefit,
                r.knn_defense.residual_damage,
                r.bagging_defense.residual_damage
            );
            for path in written {
                println!("wrote {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep(args) => {
            let cfg = load_config(&args)?;
            init_threads(cfg.threads);
            let rows = run_sweep(&cfg)?;
            std::fs::create_dir_all(&args.out_dir)?;
            let path = args.out_dir.join("sweep.csv");
            std::fs::write(&path, sweep_to_csv(&rows))?;
            println!("{} rows -> {}", rows.len(), path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { quick, threads } => {
            init_threads(threads);
            let reports = run_all_suites(quick)?;
            let mut all_ok = true;
            for report in &reports {
                println!("{report}");
                all_ok &= report.passed();
            }
            if all_ok {
                println!("all oracle suites passed");
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("oracle suite failures detected");
                Ok(ExitCode::FAILURE)
            }
        }
    }
}

fn load_config(args: &PipelineArgs) -> timber_core::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(&args.config)?;
    cfg.threads = args.threads;
    if let Some(seed) = args.seed {
        cfg.attack_seed = seed;
    }
    // Dataset paths are resolved relative to the config file's directory.
    let path = Path::new(&cfg.dataset_path);
    if path.is_relative() {
        if let Some(dir) = args.config.parent() {
            cfg.dataset_path = dir.join(path).to_string_lossy().into_owned();
        }
    }
    Ok(cfg)
}

fn load_and_split(cfg: &ExperimentConfig) -> timber_core::Result<(Dataset, Dataset)> {
    let data = Dataset::load_csv(&cfg.dataset_path, &cfg.label_column, &cfg.positive_value)?;
    stratified_split(&data, cfg.split_fraction, cfg.split_seed)
}

fn init_threads(threads: usize) {
    // Harness-level parallelism (grids, forests) runs on the global pool;
    // attacks build their own pool from the same setting.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
}
