//! Experiment configuration: a flat `key = value` text format.
//!
//! Lines are `key = value` pairs; `#` starts a comment. Unknown keys are
//! rejected so typos fail before any work starts. List-valued keys take
//! comma-separated entries. See the repository README for the key table.

use std::path::Path;

use serde::Serialize;

use crate::attacks::AttackStrategy;
use crate::dataset::Label;
use crate::ensemble::ScoreAggregation;
use crate::error::{Error, Result};

/// Model hyperparameter grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelGridConfig {
    pub trees_min: usize,
    pub trees_max: usize,
    pub depth_min: usize,
    pub depth_max: usize,
    pub seed: u64,
    pub feature_subsample: Option<f64>,
    /// Seed of the stratified validation split used for selection.
    pub selection_seed: u64,
}

/// Defense hyperparameter grids.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DefenseGridConfig {
    pub knn_n: Vec<usize>,
    pub knn_eta: Vec<f64>,
    pub knn_m: Vec<usize>,
    pub bagging_g: Vec<usize>,
    pub bagging_k: Vec<f64>,
    /// Seed of the defender's validation split and of subset hashing.
    pub seed: u64,
}

/// Full experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub dataset_path: String,
    pub label_column: String,
    pub positive_value: String,
    pub split_fraction: f64,
    pub split_seed: u64,
    pub model: ModelGridConfig,
    pub attack_strategy: AttackStrategy,
    pub attack_budget: f64,
    pub attack_target_class: Label,
    pub attack_seed: u64,
    pub attack_aggregation: ScoreAggregation,
    pub defense: DefenseGridConfig,
    pub sweep_strategies: Vec<AttackStrategy>,
    pub sweep_budgets: Vec<f64>,
    pub threads: usize,
}

impl ExperimentConfig {
    /// Paper-protocol defaults; only the dataset keys are mandatory.
    fn with_dataset(path: String, label_column: String, positive_value: String) -> Self {
        ExperimentConfig {
            dataset_path: path,
            label_column,
            positive_value,
            split_fraction: 0.2,
            split_seed: 7,
            model: ModelGridConfig {
                trees_min: 2,
                trees_max: 15,
                depth_min: 2,
                depth_max: 25,
                seed: 0,
                feature_subsample: None,
                selection_seed: 13,
            },
            attack_strategy: AttackStrategy::Timber,
            attack_budget: 0.1,
            attack_target_class: Label::Pos,
            attack_seed: 0,
            attack_aggregation: ScoreAggregation::Mean,
            defense: DefenseGridConfig {
                knn_n: vec![4, 8, 12],
                knn_eta: vec![0.6, 0.75, 0.9],
                knn_m: vec![1, 3, 5],
                bagging_g: vec![5, 10, 15, 20, 25, 30, 35, 40],
                bagging_k: vec![0.2, 0.1, 0.05, 0.025],
                seed: 11,
            },
            sweep_strategies: AttackStrategy::ALL.to_vec(),
            sweep_budgets: (1..=10).map(|p| p as f64 / 100.0).collect(),
            threads: 16,
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut pairs = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got {:?}",
                    no + 1,
                    raw
                )));
            };
            pairs.push((key.trim().to_string(), value.trim().to_string()));
        }

        let lookup = |key: &str| -> Option<&str> {
            pairs
                .iter()
                .rev()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
        };
        let required = |key: &str| -> Result<String> {
            lookup(key)
                .map(str::to_string)
                .ok_or_else(|| Error::Config(format!("missing required key {key:?}")))
        };

        let mut cfg = ExperimentConfig::with_dataset(
            required("dataset.path")?,
            required("dataset.label_column")?,
            required("dataset.positive_value")?,
        );

        const KNOWN: &[&str] = &[
            "dataset.path",
            "dataset.label_column",
            "dataset.positive_value",
            "split.fraction",
            "split.seed",
            "model.trees.min",
            "model.trees.max",
            "model.depth.min",
            "model.depth.max",
            "model.seed",
            "model.feature_subsample",
            "grid.seed",
            "attack.strategy",
            "attack.budget",
            "attack.target_class",
            "attack.seed",
            "attack.aggregation",
            "defense.seed",
            "defense.knn.N",
            "defense.knn.eta",
            "defense.knn.M",
            "defense.bagging.G",
            "defense.bagging.K",
            "sweep.strategies",
            "sweep.budgets",
            "threads",
        ];
        for (key, _) in &pairs {
            if !KNOWN.contains(&key.as_str()) {
                return Err(Error::Config(format!("unknown key {key:?}")));
            }
        }

        if let Some(v) = lookup("split.fraction") {
            cfg.split_fraction = parse_f64("split.fraction", v)?;
        }
        if let Some(v) = lookup("split.seed") {
            cfg.split_seed = parse_u64("split.seed", v)?;
        }
        if let Some(v) = lookup("model.trees.min") {
            cfg.model.trees_min = parse_usize("model.trees.min", v)?;
        }
        if let Some(v) = lookup("model.trees.max") {
            cfg.model.trees_max = parse_usize("model.trees.max", v)?;
        }
        if let Some(v) = lookup("model.depth.min") {
            cfg.model.depth_min = parse_usize("model.depth.min", v)?;
        }
        if let Some(v) = lookup("model.depth.max") {
            cfg.model.depth_max = parse_usize("model.depth.max", v)?;
        }
        if let Some(v) = lookup("model.seed") {
            cfg.model.seed = parse_u64("model.seed", v)?;
        }
        if let Some(v) = lookup("model.feature_subsample") {
            if !v.is_empty() && v != "off" {
                cfg.model.feature_subsample = Some(parse_f64("model.feature_subsample", v)?);
            }
        }
        if let Some(v) = lookup("grid.seed") {
            cfg.model.selection_seed = parse_u64("grid.seed", v)?;
        }
        if let Some(v) = lookup("attack.strategy") {
            cfg.attack_strategy = v.parse()?;
        }
        if let Some(v) = lookup("attack.budget") {
            cfg.attack_budget = parse_f64("attack.budget", v)?;
        }
        if let Some(v) = lookup("attack.target_class") {
            cfg.attack_target_class = parse_label("attack.target_class", v)?;
        }
        if let Some(v) = lookup("attack.seed") {
            cfg.attack_seed = parse_u64("attack.seed", v)?;
        }
        if let Some(v) = lookup("attack.aggregation") {
            cfg.attack_aggregation = match v {
                "mean" => ScoreAggregation::Mean,
                "max" => ScoreAggregation::Max,
                other => {
                    return Err(Error::Config(format!(
                        "attack.aggregation must be mean or max, got {other:?}"
                    )))
                }
            };
        }
        if let Some(v) = lookup("defense.seed") {
            cfg.defense.seed = parse_u64("defense.seed", v)?;
        }
        if let Some(v) = lookup("defense.knn.N") {
            cfg.defense.knn_n = parse_usize_list("defense.knn.N", v)?;
        }
        if let Some(v) = lookup("defense.knn.eta") {
            cfg.defense.knn_eta = parse_f64_list("defense.knn.eta", v)?;
        }
        if let Some(v) = lookup("defense.knn.M") {
            cfg.defense.knn_m = parse_usize_list("defense.knn.M", v)?;
        }
        if let Some(v) = lookup("defense.bagging.G") {
            cfg.defense.bagging_g = parse_usize_list("defense.bagging.G", v)?;
        }
        if let Some(v) = lookup("defense.bagging.K") {
            cfg.defense.bagging_k = parse_f64_list("defense.bagging.K", v)?;
        }
        if let Some(v) = lookup("sweep.strategies") {
            cfg.sweep_strategies = v
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<Result<_>>()?;
        }
        if let Some(v) = lookup("sweep.budgets") {
            cfg.sweep_budgets = parse_f64_list("sweep.budgets", v)?;
        }
        if let Some(v) = lookup("threads") {
            cfg.threads = parse_usize("threads", v)?;
        }

        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Config(format!(
                "split.fraction {} outside (0, 1)",
                self.split_fraction
            )));
        }
        if self.model.trees_min < 1 || self.model.trees_min > self.model.trees_max {
            return Err(Error::Config("bad model.trees range".to_string()));
        }
        if self.model.depth_min < 1 || self.model.depth_min > self.model.depth_max {
            return Err(Error::Config("bad model.depth range".to_string()));
        }
        if !(0.0..=1.0).contains(&self.attack_budget) {
            return Err(Error::Config(format!(
                "attack.budget {} outside [0, 1]",
                self.attack_budget
            )));
        }
        if self.threads < 1 {
            return Err(Error::Config("threads must be >= 1".to_string()));
        }
        if self.defense.knn_n.is_empty()
            || self.defense.knn_eta.is_empty()
            || self.defense.knn_m.is_empty()
            || self.defense.bagging_g.is_empty()
            || self.defense.bagging_k.is_empty()
        {
            return Err(Error::Config("defense grids must be nonempty".to_string()));
        }
        for &b in &self.sweep_budgets {
            if !(0.0..=1.0).contains(&b) {
                return Err(Error::Config(format!("sweep budget {b} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?} as a number")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?} as an integer")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?} as an integer")))
}

fn parse_usize_list(key: &str, v: &str) -> Result<Vec<usize>> {
    let list: Vec<usize> = v
        .split(',')
        .map(|s| parse_usize(key, s.trim()))
        .collect::<Result<_>>()?;
    if list.is_empty() {
        return Err(Error::Config(format!("{key}: empty list")));
    }
    Ok(list)
}

fn parse_f64_list(key: &str, v: &str) -> Result<Vec<f64>> {
    let list: Vec<f64> = v
        .split(',')
        .map(|s| parse_f64(key, s.trim()))
        .collect::<Result<_>>()?;
    if list.is_empty() {
        return Err(Error::Config(format!("{key}: empty list")));
    }
    Ok(list)
}

fn parse_label(key: &str, v: &str) -> Result<Label> {
    match v {
        "+1" | "1" | "pos" => Ok(Label::Pos),
        "-1" | "neg" => Ok(Label::Neg),
        other => Err(Error::Config(format!(
            "{key}: expected +1 or -1, got {other:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "\
dataset.path = data/breast_cancer.csv
dataset.label_column = diagnosis
dataset.positive_value = M
";

    #[test]
    fn minimal_config_uses_paper_defaults() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.split_fraction, 0.2);
        assert_eq!(cfg.model.trees_min, 2);
        assert_eq!(cfg.model.trees_max, 15);
        assert_eq!(cfg.model.depth_min, 2);
        assert_eq!(cfg.model.depth_max, 25);
        assert_eq!(cfg.attack_strategy, AttackStrategy::Timber);
        assert_eq!(cfg.attack_budget, 0.1);
        assert_eq!(cfg.defense.knn_n, vec![4, 8, 12]);
        assert_eq!(cfg.defense.bagging_g, vec![5, 10, 15, 20, 25, 30, 35, 40]);
        assert_eq!(cfg.threads, 16);
    }

    #[test]
    fn overrides_and_comments() {
        let text = format!(
            "{MINIMAL}
# tighter grid
model.trees.min = 3   # inline comment
model.trees.max = 3
attack.strategy = tes
attack.budget = 0.05
defense.knn.N = 6,10
threads = 4
"
        );
        let cfg = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(cfg.model.trees_min, 3);
        assert_eq!(cfg.attack_strategy, AttackStrategy::Tes);
        assert_eq!(cfg.attack_budget, 0.05);
        assert_eq!(cfg.defense.knn_n, vec![6, 10]);
        assert_eq!(cfg.threads, 4);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let text = format!("{MINIMAL}attack.bugdet = 0.1\n");
        assert!(matches!(
            ExperimentConfig::parse(&text),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn missing_dataset_is_rejected() {
        assert!(matches!(
            ExperimentConfig::parse("split.seed = 3\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        let text = format!("{MINIMAL}split.fraction = 1.5\n");
        assert!(ExperimentConfig::parse(&text).is_err());
        let text = format!("{MINIMAL}model.trees.min = 9\nmodel.trees.max = 3\n");
        assert!(ExperimentConfig::parse(&text).is_err());
    }
}
