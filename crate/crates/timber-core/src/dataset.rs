//! Loading, splitting, and flip-overlay management for binary-labeled
//! tabular data.
//!
//! A [`Dataset`] owns its rows through a shared, immutable storage block and
//! carries a set of flipped instance indices as an overlay. Flipping a label
//! never copies the underlying rows, so attack rounds can branch thousands of
//! candidate datasets cheaply.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary class label, one of `{+1, -1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "+1")]
    Pos,
    #[serde(rename = "-1")]
    Neg,
}

impl Label {
    /// The opposite class. `flip(flip(y)) == y`.
    pub fn flip(self) -> Label {
        match self {
            Label::Pos => Label::Neg,
            Label::Neg => Label::Pos,
        }
    }

    pub fn as_i8(self) -> i8 {
        match self {
            Label::Pos => 1,
            Label::Neg => -1,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Pos
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Label::Pos => write!(f, "+1"),
            Label::Neg => write!(f, "-1"),
        }
    }
}

/// Class counts for a region of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LabelCounts {
    pub positives: usize,
    pub negatives: usize,
}

impl LabelCounts {
    pub fn new(positives: usize, negatives: usize) -> Self {
        LabelCounts {
            positives,
            negatives,
        }
    }

    pub fn total(&self) -> usize {
        self.positives + self.negatives
    }

    pub fn add(&mut self, label: Label) {
        match label {
            Label::Pos => self.positives += 1,
            Label::Neg => self.negatives += 1,
        }
    }
}

/// Immutable row storage shared between dataset views.
#[derive(Debug)]
struct Storage {
    name: String,
    n_features: usize,
    feature_names: Vec<String>,
    label_column: String,
    /// Row-major `n x d` feature matrix.
    values: Vec<f64>,
    labels: Vec<Label>,
    /// Raw label strings for CSV export (positive, negative).
    raw_labels: (String, String),
    /// Per-feature index order sorted by `(value, index)`, built lazily.
    sorted_by_feature: OnceLock<Vec<Vec<u32>>>,
}

impl Storage {
    fn sorted_by_feature(&self) -> &[Vec<u32>] {
        self.sorted_by_feature.get_or_init(|| {
            let n = self.labels.len();
            (0..self.n_features)
                .map(|f| {
                    let mut order: Vec<u32> = (0..n as u32).collect();
                    order.sort_by(|&a, &b| {
                        let va = self.values[a as usize * self.n_features + f];
                        let vb = self.values[b as usize * self.n_features + f];
                        va.total_cmp(&vb).then(a.cmp(&b))
                    });
                    order
                })
                .collect()
        })
    }
}

/// Immutable labeled tabular data with an overlay of label flips.
///
/// The effective label of instance `i` is its original label, inverted iff
/// `i` is in the flip set. Iteration order is stable and equals insertion
/// order; every tie-breaking rule in the crate anchors on it.
#[derive(Debug, Clone)]
pub struct Dataset {
    storage: Arc<Storage>,
    flips: BTreeSet<usize>,
}

impl Dataset {
    /// Build a dataset from rows and labels.
    ///
    /// Validates row lengths and that every value is finite.
    pub fn from_parts(
        name: impl Into<String>,
        rows: Vec<Vec<f64>>,
        labels: Vec<Label>,
    ) -> Result<Dataset> {
        if rows.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if rows.len() != labels.len() {
            return Err(Error::InvalidParams(format!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        let d = rows[0].len();
        let mut values = Vec::with_capacity(rows.len() * d);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::BadRow {
                    line: i + 1,
                    message: format!("expected {} features, found {}", d, row.len()),
                });
            }
            for (f, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::BadRow {
                        line: i + 1,
                        message: format!("non-finite value {} in feature {}", v, f),
                    });
                }
                values.push(v);
            }
        }
        Ok(Dataset {
            storage: Arc::new(Storage {
                name: name.into(),
                n_features: d,
                feature_names: (0..d).map(|f| format!("f{}", f)).collect(),
                label_column: "label".to_string(),
                values,
                labels,
                raw_labels: ("+1".to_string(), "-1".to_string()),
                sorted_by_feature: OnceLock::new(),
            }),
            flips: BTreeSet::new(),
        })
    }

    /// Load a dataset from a CSV file with a header row.
    ///
    /// Every column other than `label_column` is parsed as a 64-bit float.
    /// Label values equal to `positive_value` map to `+1`, the single other
    /// raw value maps to `-1`. Rows with missing or non-finite features are
    /// rejected with the offending line number.
    pub fn load_csv(
        path: impl AsRef<Path>,
        label_column: &str,
        positive_value: &str,
    ) -> Result<Dataset> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path.as_ref())?;
        let headers = reader.headers()?.clone();
        let label_idx = headers
            .iter()
            .position(|h| h == label_column)
            .ok_or_else(|| Error::Config(format!("label column {:?} not found", label_column)))?;
        let feature_names: Vec<String> = headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != label_idx)
            .map(|(_, h)| h.to_string())
            .collect();
        let d = feature_names.len();

        let mut values = Vec::new();
        let mut raw = Vec::new();
        for (row_no, record) in reader.records().enumerate() {
            let line = row_no + 2; // header is line 1
            let record = record?;
            if record.len() != d + 1 {
                return Err(Error::BadRow {
                    line,
                    message: format!("expected {} columns, found {}", d + 1, record.len()),
                });
            }
            for (i, field) in record.iter().enumerate() {
                if i == label_idx {
                    raw.push(field.to_string());
                    continue;
                }
                let v: f64 = field.trim().parse().map_err(|_| Error::BadRow {
                    line,
                    message: format!("cannot parse feature value {:?}", field),
                })?;
                if !v.is_finite() {
                    return Err(Error::BadRow {
                        line,
                        message: format!("non-finite feature value {:?}", field),
                    });
                }
                values.push(v);
            }
        }
        if raw.is_empty() {
            return Err(Error::EmptyDataset);
        }

        let mut distinct: Vec<String> = raw.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
        if distinct.len() > 2 {
            return Err(Error::TooManyLabels {
                count: distinct.len(),
                values: distinct,
            });
        }
        if distinct.len() == 2 && !distinct.iter().any(|v| v == positive_value) {
            return Err(Error::PositiveLabelMissing {
                positive: positive_value.to_string(),
                values: distinct,
            });
        }
        let negative_raw = {
            distinct.retain(|v| v != positive_value);
            distinct.pop().unwrap_or_else(|| "-1".to_string())
        };
        let labels: Vec<Label> = raw
            .iter()
            .map(|v| {
                if v == positive_value {
                    Label::Pos
                } else {
                    Label::Neg
                }
            })
            .collect();

        let name = path
            .as_ref()
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".to_string());
        Ok(Dataset {
            storage: Arc::new(Storage {
                name,
                n_features: d,
                feature_names,
                label_column: label_column.to_string(),
                values,
                labels,
                raw_labels: (positive_value.to_string(), negative_raw),
                sorted_by_feature: OnceLock::new(),
            }),
            flips: BTreeSet::new(),
        })
    }

    /// Write the dataset (effective labels) to CSV.
    ///
    /// Feature values are formatted with the shortest representation that
    /// round-trips bit-exactly for finite doubles.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut writer = csv::Writer::from_path(path.as_ref())?;
        let s = &self.storage;
        let mut header: Vec<&str> = s.feature_names.iter().map(|n| n.as_str()).collect();
        header.push(&s.label_column);
        writer.write_record(&header)?;
        for i in 0..self.len() {
            let mut record: Vec<String> =
                self.features(i).iter().map(|v| v.to_string()).collect();
            record.push(match self.effective_label(i) {
                Label::Pos => s.raw_labels.0.clone(),
                Label::Neg => s.raw_labels.1.clone(),
            });
            writer.write_record(&record)?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.storage.name
    }

    /// Number of instances.
    pub fn len(&self) -> usize {
        self.storage.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.storage.n_features
    }

    pub fn feature_names(&self) -> &[String] {
        &self.storage.feature_names
    }

    /// Feature vector of instance `i`.
    pub fn features(&self, i: usize) -> &[f64] {
        let d = self.storage.n_features;
        &self.storage.values[i * d..(i + 1) * d]
    }

    /// Value of feature `f` for instance `i`.
    pub fn value(&self, i: usize, f: usize) -> f64 {
        self.storage.values[i * self.storage.n_features + f]
    }

    /// Label as loaded, before any flips.
    pub fn original_label(&self, i: usize) -> Label {
        self.storage.labels[i]
    }

    /// Label with the flip overlay applied.
    pub fn effective_label(&self, i: usize) -> Label {
        let l = self.storage.labels[i];
        if self.flips.contains(&i) {
            l.flip()
        } else {
            l
        }
    }

    /// All effective labels, materialized. Hot paths snapshot this once.
    pub fn effective_labels(&self) -> Vec<Label> {
        let mut labels = self.storage.labels.clone();
        for &i in &self.flips {
            labels[i] = labels[i].flip();
        }
        labels
    }

    /// The set of currently flipped instance indices.
    pub fn flips(&self) -> &BTreeSet<usize> {
        &self.flips
    }

    /// Returns a new dataset view whose flip set toggles `index`.
    ///
    /// The underlying rows are shared, not copied.
    pub fn apply_flip(&self, index: usize) -> Result<Dataset> {
        if index >= self.len() {
            return Err(Error::IndexOutOfRange {
                index,
                size: self.len(),
            });
        }
        let mut flips = self.flips.clone();
        if !flips.remove(&index) {
            flips.insert(index);
        }
        Ok(Dataset {
            storage: Arc::clone(&self.storage),
            flips,
        })
    }

    /// Counts of effective labels over the whole dataset.
    pub fn class_counts(&self) -> LabelCounts {
        let mut counts = LabelCounts::default();
        for i in 0..self.len() {
            counts.add(self.effective_label(i));
        }
        counts
    }

    /// Counts of effective labels over `region`.
    pub fn class_counts_in(&self, region: &[usize]) -> LabelCounts {
        let mut counts = LabelCounts::default();
        for &i in region {
            counts.add(self.effective_label(i));
        }
        counts
    }

    /// Indices of instances whose *original* label equals `class`, in order.
    pub fn indices_of_class(&self, class: Label) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.original_label(i) == class)
            .collect()
    }

    /// Index order sorted by feature `f` (ties by index). Shared and cached
    /// in the storage block; label flips never invalidate it.
    pub fn sorted_by_feature(&self, f: usize) -> &[u32] {
        &self.storage.sorted_by_feature()[f]
    }

    /// A dataset sharing this one's rows but carrying new labels (flip
    /// overlay cleared).
    pub fn replace_labels(&self, labels: Vec<Label>) -> Result<Dataset> {
        if labels.len() != self.len() {
            return Err(Error::InvalidParams(format!(
                "{} labels for {} instances",
                labels.len(),
                self.len()
            )));
        }
        Ok(Dataset {
            storage: Arc::new(Storage {
                name: self.storage.name.clone(),
                n_features: self.storage.n_features,
                feature_names: self.storage.feature_names.clone(),
                label_column: self.storage.label_column.clone(),
                values: self.storage.values.clone(),
                labels,
                raw_labels: self.storage.raw_labels.clone(),
                sorted_by_feature: OnceLock::new(),
            }),
            flips: BTreeSet::new(),
        })
    }

    /// Materialize a new dataset from a subset of instances (effective
    /// labels become the new originals; the flip overlay starts empty).
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let d = self.storage.n_features;
        let mut values = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    size: self.len(),
                });
            }
            values.extend_from_slice(self.features(i));
            labels.push(self.effective_label(i));
        }
        Ok(Dataset {
            storage: Arc::new(Storage {
                name: name.into(),
                n_features: d,
                feature_names: self.storage.feature_names.clone(),
                label_column: self.storage.label_column.clone(),
                values,
                labels,
                raw_labels: self.storage.raw_labels.clone(),
                sorted_by_feature: OnceLock::new(),
            }),
            flips: BTreeSet::new(),
        })
    }
}

/// Round half away from zero; for the non-negative quantities used here this
/// is round-half-up.
pub(crate) fn round_half_up(x: f64) -> usize {
    x.round() as usize
}

/// Split into train/test using stratified random sampling.
///
/// Per-class test counts are `round(class_size * test_fraction)`; if their
/// sum misses the global `round(n * test_fraction)` target, the difference is
/// corrected on the larger class (positive class on ties). Deterministic
/// given `seed`.
pub fn stratified_split(d: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidFraction(test_fraction));
    }
    let counts = d.class_counts();
    if counts.positives == 0 || counts.negatives == 0 {
        return Err(Error::InvalidParams(
            "stratified split requires at least one instance of each class".to_string(),
        ));
    }

    let n = d.len();
    let global_test = round_half_up(n as f64 * test_fraction);
    let mut want_pos = round_half_up(counts.positives as f64 * test_fraction);
    let mut want_neg = round_half_up(counts.negatives as f64 * test_fraction);
    let sum = want_pos + want_neg;
    if sum != global_test {
        let diff = global_test as isize - sum as isize;
        if counts.positives >= counts.negatives {
            want_pos = (want_pos as isize + diff).clamp(0, counts.positives as isize) as usize;
        } else {
            want_neg = (want_neg as isize + diff).clamp(0, counts.negatives as isize) as usize;
        }
    }

    let mut pos: Vec<usize> = (0..n).filter(|&i| d.effective_label(i) == Label::Pos).collect();
    let mut neg: Vec<usize> = (0..n).filter(|&i| d.effective_label(i) == Label::Neg).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);

    let mut test_idx: Vec<usize> = pos[..want_pos].to_vec();
    test_idx.extend_from_slice(&neg[..want_neg]);
    let mut train_idx: Vec<usize> = pos[want_pos..].to_vec();
    train_idx.extend_from_slice(&neg[want_neg..]);
    test_idx.sort_unstable();
    train_idx.sort_unstable();

    let train = d.subset(&train_idx, format!("{}-train", d.name()))?;
    let test = d.subset(&test_idx, format!("{}-test", d.name()))?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn toy(labels: &[i8]) -> Dataset {
        let rows: Vec<Vec<f64>> = (0..labels.len()).map(|i| vec![i as f64]).collect();
        let labels = labels
            .iter()
            .map(|&l| if l > 0 { Label::Pos } else { Label::Neg })
            .collect();
        Dataset::from_parts("toy", rows, labels).unwrap()
    }

    #[test]
    fn load_csv_maps_labels() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "x,y,kind").unwrap();
        writeln!(f, "1.0,2.0,spam").unwrap();
        writeln!(f, "3.0,4.0,ham").unwrap();
        writeln!(f, "5.0,6.0,spam").unwrap();
        let d = Dataset::load_csv(f.path(), "kind", "spam").unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.n_features(), 2);
        assert_eq!(d.effective_label(0), Label::Pos);
        assert_eq!(d.effective_label(1), Label::Neg);
        assert_eq!(d.effective_label(2), Label::Pos);
    }

    #[test]
    fn load_csv_empty_after_header() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "x,kind").unwrap();
        let err = Dataset::load_csv(f.path(), "kind", "spam").unwrap_err();
        assert!(matches!(err, Error::EmptyDataset));
    }

    #[test]
    fn load_csv_rejects_bad_row_with_line_number() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "x,kind").unwrap();
        writeln!(f, "1.0,spam").unwrap();
        writeln!(f, "oops,ham").unwrap();
        let err = Dataset::load_csv(f.path(), "kind", "spam").unwrap_err();
        match err {
            Error::BadRow { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn load_csv_rejects_three_label_values() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "x,kind").unwrap();
        writeln!(f, "1.0,a").unwrap();
        writeln!(f, "2.0,b").unwrap();
        writeln!(f, "3.0,c").unwrap();
        let err = Dataset::load_csv(f.path(), "kind", "a").unwrap_err();
        assert!(matches!(err, Error::TooManyLabels { count: 3, .. }));
    }

    #[test]
    fn load_breast_cancer_dimensions() {
        let path = concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../data/breast_cancer.csv"
        );
        let d = Dataset::load_csv(path, "diagnosis", "M").unwrap();
        assert_eq!(d.len(), 569);
        assert_eq!(d.n_features(), 30);
        let counts = d.class_counts();
        assert_eq!(counts.positives, 212);
        assert_eq!(counts.negatives, 357);
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let rows = vec![
            vec![0.1, 1.0 / 3.0, f64::MIN_POSITIVE],
            vec![-2.5e-17, 1e300, 7.0],
        ];
        let d = Dataset::from_parts("rt", rows.clone(), vec![Label::Pos, Label::Neg]).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        d.save_csv(f.path()).unwrap();
        let d2 = Dataset::load_csv(f.path(), "label", "+1").unwrap();
        for i in 0..d.len() {
            assert_eq!(d.features(i), d2.features(i));
            assert_eq!(d.effective_label(i), d2.effective_label(i));
        }
    }

    #[test]
    fn flip_is_involution() {
        let d = toy(&[1, 1, -1]);
        let once = d.apply_flip(1).unwrap();
        assert_eq!(once.effective_label(1), Label::Neg);
        let twice = once.apply_flip(1).unwrap();
        for i in 0..d.len() {
            assert_eq!(twice.effective_label(i), d.effective_label(i));
        }
    }

    #[test]
    fn flip_out_of_range() {
        let d = toy(&[1, -1]);
        assert!(matches!(
            d.apply_flip(5),
            Err(Error::IndexOutOfRange { index: 5, size: 2 })
        ));
    }

    #[test]
    fn flips_change_counts_by_net_of_originals() {
        let d = toy(&[1, 1, 1, -1, -1, 1]);
        let flipped = d.apply_flip(2).unwrap().apply_flip(4).unwrap();
        // index 2 was +1 (now -1), index 4 was -1 (now +1): net zero.
        assert_eq!(flipped.class_counts(), d.class_counts());
        let again = flipped.apply_flip(0).unwrap();
        assert_eq!(again.class_counts(), LabelCounts::new(3, 3));
    }

    #[test]
    fn class_counts_examples() {
        let d = toy(&[1, 1, 1, 1, 1, -1, -1, -1, -1, -1]);
        assert_eq!(d.class_counts(), LabelCounts::new(5, 5));
        let flipped = d.apply_flip(0).unwrap();
        assert_eq!(flipped.class_counts(), LabelCounts::new(4, 6));
    }

    #[test]
    fn flip_order_does_not_matter() {
        let d = toy(&[1, -1, 1, -1, 1]);
        let a = d.apply_flip(0).unwrap().apply_flip(3).unwrap();
        let b = d.apply_flip(3).unwrap().apply_flip(0).unwrap();
        for i in 0..d.len() {
            assert_eq!(a.effective_label(i), b.effective_label(i));
        }
    }

    #[test]
    fn stratified_split_exact_proportions() {
        let d = toy(&[1, 1, 1, 1, 1, 1, 1, 1, 1, 1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1]);
        let (train, test) = stratified_split(&d, 0.2, 7).unwrap();
        assert_eq!(test.class_counts(), LabelCounts::new(2, 2));
        assert_eq!(train.class_counts(), LabelCounts::new(8, 8));
    }

    #[test]
    fn stratified_split_deterministic() {
        let d = toy(&[1, 1, 1, -1, -1, 1, -1, 1, -1, 1]);
        let (tr1, te1) = stratified_split(&d, 0.3, 99).unwrap();
        let (tr2, te2) = stratified_split(&d, 0.3, 99).unwrap();
        for i in 0..tr1.len() {
            assert_eq!(tr1.features(i), tr2.features(i));
            assert_eq!(tr1.effective_label(i), tr2.effective_label(i));
        }
        for i in 0..te1.len() {
            assert_eq!(te1.features(i), te2.features(i));
        }
    }

    #[test]
    fn stratified_split_rounding_rule() {
        // 7+/3-, fraction 0.2: round(1.4) = 1, round(0.6) = 1.
        let d = toy(&[1, 1, 1, 1, 1, 1, 1, -1, -1, -1]);
        let (_, test) = stratified_split(&d, 0.2, 0).unwrap();
        assert_eq!(test.class_counts(), LabelCounts::new(1, 1));
    }

    #[test]
    fn stratified_split_preserves_counts_per_class() {
        let d = toy(&[1, -1, 1, 1, -1, -1, 1, 1, -1, 1, 1, -1, -1]);
        let before = d.class_counts();
        let (train, test) = stratified_split(&d, 0.31, 3).unwrap();
        let tr = train.class_counts();
        let te = test.class_counts();
        assert_eq!(tr.positives + te.positives, before.positives);
        assert_eq!(tr.negatives + te.negatives, before.negatives);
        assert_eq!(train.len() + test.len(), d.len());
    }

    #[test]
    fn stratified_split_rejects_bad_fraction() {
        let d = toy(&[1, -1]);
        assert!(matches!(
            stratified_split(&d, 0.0, 0),
            Err(Error::InvalidFraction(_))
        ));
        assert!(matches!(
            stratified_split(&d, 1.0, 0),
            Err(Error::InvalidFraction(_))
        ));
    }

    #[test]
    fn sorted_by_feature_orders_values() {
        let d = Dataset::from_parts(
            "s",
            vec![vec![3.0], vec![1.0], vec![2.0], vec![1.0]],
            vec![Label::Pos, Label::Neg, Label::Pos, Label::Neg],
        )
        .unwrap();
        assert_eq!(d.sorted_by_feature(0), &[1, 3, 2, 0]);
    }
}
