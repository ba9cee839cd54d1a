//! Nested-trial cohort data: covariates for every row, treatment and outcome
//! only for trial participants.

use std::collections::HashSet;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{stream_rng, Stream};

#[derive(Debug, Error, PartialEq)]
pub enum DatasetError {
    #[error("missing mandatory column `{0}`")]
    MissingColumn(String),
    #[error("duplicated column name `{0}`")]
    DuplicateColumn(String),
    #[error("effect modifier `{0}` is not a covariate column")]
    UnknownEffectModifier(String),
    #[error("row {row}: trial indicator must be 0 or 1, got `{value}`")]
    InvalidIndicator { row: usize, value: String },
    #[error("row {row}: treatment must be 0 or 1, got `{value}`")]
    InvalidTreatment { row: usize, value: String },
    #[error("row {row}: cannot parse `{value}` in column `{column}` as a number")]
    ParseValue { row: usize, column: String, value: String },
    #[error("row {row}: treatment on non-trial row")]
    TreatmentOnNonTrialRow { row: usize },
    #[error("row {row}: outcome on non-trial row")]
    OutcomeOnNonTrialRow { row: usize },
    #[error("row {row}: trial row without treatment or outcome")]
    IncompleteTrialRow { row: usize },
    #[error("row {row}: non-finite covariate value in `{column}`")]
    NonFiniteCovariate { row: usize, column: String },
    #[error("no trial rows (every s = 0); estimation impossible")]
    NoTrialRows,
    #[error("no non-trial rows (every s = 1); estimation impossible")]
    NoNonTrialRows,
    #[error("column lengths disagree: {0}")]
    LengthMismatch(String),
    #[error("invalid fold assignment: {0}")]
    InvalidFolds(String),
    #[error("csv: {0}")]
    Csv(String),
}

/// Column roles of a cohort file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schema {
    /// Trial participation indicator.
    pub s: String,
    /// Treatment, present only on trial rows.
    pub a: String,
    /// Outcome, present only on trial rows.
    pub y: String,
    pub effect_modifiers: Vec<String>,
    /// Covariates to use; every column other than `s`, `a`, `y` when absent.
    pub covariates: Option<Vec<String>>,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            s: "s".into(),
            a: "a".into(),
            y: "y".into(),
            effect_modifiers: Vec::new(),
            covariates: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    /// Every observed outcome is 0 or 1.
    Binary,
    Continuous,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub rows_read: usize,
    pub dropped_missing_covariate: usize,
    pub dropped_incomplete_trial: usize,
}

/// Validated nested-trial data. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortDataset {
    schema: Schema,
    covariate_names: Vec<String>,
    columns: Vec<Vec<f64>>,
    s: Vec<bool>,
    a: Vec<Option<bool>>,
    y: Vec<Option<f64>>,
    outcome_kind: OutcomeKind,
}

impl CohortDataset {
    /// Builds a dataset from columns. `a` and `y` must be `Some` exactly on
    /// rows with `s = true`.
    pub fn new(
        schema: Schema,
        covariate_names: Vec<String>,
        columns: Vec<Vec<f64>>,
        s: Vec<bool>,
        a: Vec<Option<bool>>,
        y: Vec<Option<f64>>,
    ) -> Result<Self, DatasetError> {
        let n = s.len();
        if covariate_names.len() != columns.len() {
            return Err(DatasetError::LengthMismatch(format!(
                "{} names for {} columns",
                covariate_names.len(),
                columns.len()
            )));
        }
        if a.len() != n || y.len() != n || columns.iter().any(|c| c.len() != n) {
            return Err(DatasetError::LengthMismatch(
                "s, a, y and covariate columns must have equal length".into(),
            ));
        }
        let mut seen = HashSet::new();
        for name in covariate_names.iter().chain([&schema.s, &schema.a, &schema.y]) {
            if !seen.insert(name.as_str()) {
                return Err(DatasetError::DuplicateColumn(name.clone()));
            }
        }
        for m in &schema.effect_modifiers {
            if !covariate_names.contains(m) {
                return Err(DatasetError::UnknownEffectModifier(m.clone()));
            }
        }
        for (name, col) in covariate_names.iter().zip(&columns) {
            if let Some(row) = col.iter().position(|v| !v.is_finite()) {
                return Err(DatasetError::NonFiniteCovariate { row, column: name.clone() });
            }
        }
        for row in 0..n {
            match (s[row], a[row].is_some(), y[row].is_some()) {
                (false, true, _) => return Err(DatasetError::TreatmentOnNonTrialRow { row }),
                (false, _, true) => return Err(DatasetError::OutcomeOnNonTrialRow { row }),
                (true, false, _) | (true, _, false) => {
                    return Err(DatasetError::IncompleteTrialRow { row })
                }
                _ => {}
            }
        }
        let binary = y.iter().flatten().all(|&v| v == 0.0 || v == 1.0);
        let outcome_kind = if binary { OutcomeKind::Binary } else { OutcomeKind::Continuous };
        let schema = Schema { covariates: Some(covariate_names.clone()), ..schema };
        Ok(CohortDataset { schema, covariate_names, columns, s, a, y, outcome_kind })
    }

    pub fn n_rows(&self) -> usize {
        self.s.len()
    }

    pub fn n_trial(&self) -> usize {
        self.s.iter().filter(|&&s| s).count()
    }

    /// Trial rows in the (control, treated) arms.
    pub fn arm_counts(&self) -> (usize, usize) {
        let treated = self.a.iter().filter(|a| **a == Some(true)).count();
        let control = self.a.iter().filter(|a| **a == Some(false)).count();
        (control, treated)
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn effect_modifiers(&self) -> &[String] {
        &self.schema.effect_modifiers
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.covariate_names
            .iter()
            .position(|c| c == name)
            .map(|j| self.columns[j].as_slice())
    }

    pub fn s(&self) -> &[bool] {
        &self.s
    }

    pub fn a(&self) -> &[Option<bool>] {
        &self.a
    }

    pub fn y(&self) -> &[Option<f64>] {
        &self.y
    }

    pub fn outcome_kind(&self) -> OutcomeKind {
        self.outcome_kind
    }

    pub fn trial_rows(&self) -> Vec<usize> {
        (0..self.n_rows()).filter(|&i| self.s[i]).collect()
    }

    /// Rows `rows` in the given order, as a new dataset.
    pub fn subset(&self, rows: &[usize]) -> CohortDataset {
        let pick_f = |v: &[f64]| rows.iter().map(|&i| v[i]).collect::<Vec<_>>();
        CohortDataset {
            schema: self.schema.clone(),
            covariate_names: self.covariate_names.clone(),
            columns: self.columns.iter().map(|c| pick_f(c)).collect(),
            s: rows.iter().map(|&i| self.s[i]).collect(),
            a: rows.iter().map(|&i| self.a[i]).collect(),
            y: rows.iter().map(|&i| self.y[i]).collect(),
            outcome_kind: self.outcome_kind,
        }
    }
}

fn parse_binary(field: &str) -> Option<bool> {
    match field.parse::<f64>() {
        Ok(v) if v == 0.0 => Some(false),
        Ok(v) if v == 1.0 => Some(true),
        _ => None,
    }
}

/// Reads a comma-separated cohort file with a header row. Blank fields are
/// missing. Rows with a missing covariate, or trial rows missing treatment
/// or outcome, are dropped and counted.
pub fn load_cohort<R: Read>(
    source: R,
    schema: &Schema,
) -> Result<(CohortDataset, LoadReport), DatasetError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(source);
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| DatasetError::Csv(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut seen = HashSet::new();
    for h in &headers {
        if !seen.insert(h.as_str()) {
            return Err(DatasetError::DuplicateColumn(h.clone()));
        }
    }
    let index_of = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DatasetError::MissingColumn(name.to_string()))
    };
    let s_idx = index_of(&schema.s)?;
    let a_idx = index_of(&schema.a)?;
    let y_idx = index_of(&schema.y)?;
    let covariate_names: Vec<String> = match &schema.covariates {
        Some(list) => {
            let mut names = list.clone();
            for m in &schema.effect_modifiers {
                if !names.contains(m) {
                    names.push(m.clone());
                }
            }
            names
        }
        None => headers
            .iter()
            .filter(|h| **h != schema.s && **h != schema.a && **h != schema.y)
            .cloned()
            .collect(),
    };
    for m in &schema.effect_modifiers {
        index_of(m)?;
    }
    let cov_idx = covariate_names
        .iter()
        .map(|c| index_of(c))
        .collect::<Result<Vec<_>, _>>()?;

    let mut report = LoadReport::default();
    let mut columns = vec![Vec::new(); covariate_names.len()];
    let (mut s, mut a, mut y) = (Vec::new(), Vec::new(), Vec::new());
    let mut values = vec![0.0; cov_idx.len()];
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DatasetError::Csv(e.to_string()))?;
        report.rows_read += 1;
        let field = |j: usize| record.get(j).unwrap_or("");
        let s_field = field(s_idx);
        let in_trial = parse_binary(s_field)
            .ok_or_else(|| DatasetError::InvalidIndicator { row, value: s_field.to_string() })?;
        let (a_field, y_field) = (field(a_idx), field(y_idx));
        if !in_trial {
            if !a_field.is_empty() {
                return Err(DatasetError::TreatmentOnNonTrialRow { row });
            }
            if !y_field.is_empty() {
                return Err(DatasetError::OutcomeOnNonTrialRow { row });
            }
        }
        let mut complete = true;
        for (k, &j) in cov_idx.iter().enumerate() {
            let f = field(j);
            if f.is_empty() {
                complete = false;
                break;
            }
            values[k] = f.parse::<f64>().map_err(|_| DatasetError::ParseValue {
                row,
                column: covariate_names[k].clone(),
                value: f.to_string(),
            })?;
            if !values[k].is_finite() {
                return Err(DatasetError::NonFiniteCovariate { row, column: covariate_names[k].clone() });
            }
        }
        if !complete {
            report.dropped_missing_covariate += 1;
            continue;
        }
        let (treat, outcome) = if in_trial {
            if a_field.is_empty() || y_field.is_empty() {
                report.dropped_incomplete_trial += 1;
                continue;
            }
            let treat = parse_binary(a_field)
                .ok_or_else(|| DatasetError::InvalidTreatment { row, value: a_field.to_string() })?;
            let outcome = y_field.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                DatasetError::ParseValue { row, column: schema.y.clone(), value: y_field.to_string() }
            })?;
            (Some(treat), Some(outcome))
        } else {
            (None, None)
        };
        for (col, v) in columns.iter_mut().zip(&values) {
            col.push(*v);
        }
        s.push(in_trial);
        a.push(treat);
        y.push(outcome);
    }
    if report.dropped_missing_covariate + report.dropped_incomplete_trial > 0 {
        log::warn!(
            "dropped {} rows with missing covariates and {} incomplete trial rows",
            report.dropped_missing_covariate,
            report.dropped_incomplete_trial
        );
    }
    if !s.iter().any(|&v| v) {
        return Err(DatasetError::NoTrialRows);
    }
    if s.iter().all(|&v| v) {
        return Err(DatasetError::NoNonTrialRows);
    }
    let schema = Schema { covariates: Some(covariate_names.clone()), ..schema.clone() };
    let ds = CohortDataset::new(schema, covariate_names, columns, s, a, y)?;
    Ok((ds, report))
}

/// Writes the dataset in the layout [`load_cohort`] reads: covariates, then
/// `s`, `a`, `y` under the dataset's schema names. Absent values are blank.
pub fn write_cohort<W: Write>(ds: &CohortDataset, sink: W) -> Result<(), DatasetError> {
    let csv_err = |e: csv::Error| DatasetError::Csv(e.to_string());
    let mut writer = csv::Writer::from_writer(sink);
    let mut header: Vec<&str> = ds.covariate_names.iter().map(String::as_str).collect();
    header.extend([ds.schema.s.as_str(), ds.schema.a.as_str(), ds.schema.y.as_str()]);
    writer.write_record(&header).map_err(csv_err)?;
    let mut record = Vec::with_capacity(header.len());
    for i in 0..ds.n_rows() {
        record.clear();
        record.extend(ds.columns.iter().map(|c| c[i].to_string()));
        record.push(if ds.s[i] { "1".into() } else { "0".into() });
        record.push(ds.a[i].map_or(String::new(), |a| if a { "1".into() } else { "0".into() }));
        record.push(ds.y[i].map_or(String::new(), |y| y.to_string()));
        writer.write_record(&record).map_err(csv_err)?;
    }
    writer.flush().map_err(|e| DatasetError::Csv(e.to_string()))?;
    Ok(())
}

/// Fold label (`1..=k`) for every row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    fold_ids: Vec<usize>,
    k: usize,
    seed: Option<u64>,
}

impl FoldAssignment {
    /// Wraps explicit fold labels, checking that every fold is nonempty and
    /// holds trial rows from both arms.
    pub fn from_ids(ds: &CohortDataset, fold_ids: Vec<usize>, k: usize) -> Result<Self, DatasetError> {
        if k < 2 {
            return Err(DatasetError::InvalidFolds(format!("k must be at least 2, got {k}")));
        }
        if fold_ids.len() != ds.n_rows() {
            return Err(DatasetError::InvalidFolds("one fold label per row required".into()));
        }
        if let Some(bad) = fold_ids.iter().find(|&&f| f == 0 || f > k) {
            return Err(DatasetError::InvalidFolds(format!("fold label {bad} outside 1..={k}")));
        }
        for fold in 1..=k {
            let mut arms = [false, false];
            for (i, &f) in fold_ids.iter().enumerate() {
                if f == fold {
                    if let Some(a) = ds.a[i] {
                        arms[a as usize] = true;
                    }
                }
            }
            if !arms[0] || !arms[1] {
                return Err(DatasetError::InvalidFolds(format!(
                    "fold {fold} lacks trial rows in both arms"
                )));
            }
        }
        Ok(FoldAssignment { fold_ids, k, seed: None })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn fold_ids(&self) -> &[usize] {
        &self.fold_ids
    }

    pub fn rows_in(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_ids.len()).filter(|&i| self.fold_ids[i] == fold).collect()
    }

    pub fn rows_not_in(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_ids.len()).filter(|&i| self.fold_ids[i] != fold).collect()
    }
}

/// Random `k`-fold split stratified by the (s, a) cells: non-trial rows,
/// trial controls and trial treated are each shuffled and dealt round-robin,
/// continuing the deal across cells so overall fold sizes stay balanced.
pub fn assign_folds(ds: &CohortDataset, k: usize, seed: u64) -> Result<FoldAssignment, DatasetError> {
    if k < 2 {
        return Err(DatasetError::InvalidFolds(format!("k must be at least 2, got {k}")));
    }
    let (control, treated) = ds.arm_counts();
    if k > control.min(treated) {
        return Err(DatasetError::InvalidFolds(format!(
            "k = {k} exceeds trial rows in an arm ({control} control, {treated} treated)"
        )));
    }
    let mut rng = stream_rng(seed, Stream::Folds);
    let mut cells: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for i in 0..ds.n_rows() {
        let cell = match ds.a[i] {
            None => 0,
            Some(false) => 1,
            Some(true) => 2,
        };
        cells[cell].push(i);
    }
    let mut fold_ids = vec![0; ds.n_rows()];
    let mut offset = 0;
    for cell in cells.iter_mut() {
        cell.shuffle(&mut rng);
        for (j, &row) in cell.iter().enumerate() {
            fold_ids[row] = (offset + j) % k + 1;
        }
        offset = (offset + cell.len()) % k;
    }
    Ok(FoldAssignment { fold_ids, k, seed: Some(seed) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Schema {
        Schema { effect_modifiers: vec!["x".into()], ..Schema::default() }
    }

    #[test]
    fn loads_four_row_file() {
        let text = "x,z,s,a,y\n0.1,1,1,1,1\n0.2,0,1,0,0\n0.3,1,0,,\n0.4,0,0,,\n";
        let (ds, report) = load_cohort(text.as_bytes(), &schema()).unwrap();
        assert_eq!(ds.n_rows(), 4);
        assert_eq!(ds.n_trial(), 2);
        assert_eq!(report.rows_read, 4);
        assert_eq!(ds.a()[2], None);
        assert_eq!(ds.y()[3], None);
        assert_eq!(ds.outcome_kind(), OutcomeKind::Binary);
        assert_eq!(ds.covariate_names(), &["x".to_string(), "z".to_string()]);
    }

    #[test]
    fn outcome_on_non_trial_row_is_rejected() {
        let text = "x,s,a,y\n0.1,1,1,1\n0.2,1,0,0\n0.3,0,,1\n";
        let err = load_cohort(text.as_bytes(), &schema()).unwrap_err();
        assert_eq!(err, DatasetError::OutcomeOnNonTrialRow { row: 2 });
        assert_eq!(err.to_string(), "row 2: outcome on non-trial row");
    }

    #[test]
    fn load_errors() {
        let missing = "x,s,a\n0.1,1,1\n";
        assert_eq!(
            load_cohort(missing.as_bytes(), &schema()).unwrap_err(),
            DatasetError::MissingColumn("y".into())
        );
        let bad_s = "x,s,a,y\n0.1,2,1,1\n";
        assert!(matches!(
            load_cohort(bad_s.as_bytes(), &schema()).unwrap_err(),
            DatasetError::InvalidIndicator { row: 0, .. }
        ));
        let all_trial = "x,s,a,y\n0.1,1,1,1\n0.2,1,0,0\n";
        assert_eq!(load_cohort(all_trial.as_bytes(), &schema()).unwrap_err(), DatasetError::NoNonTrialRows);
        let no_trial = "x,s,a,y\n0.1,0,,\n0.2,0,,\n";
        assert_eq!(load_cohort(no_trial.as_bytes(), &schema()).unwrap_err(), DatasetError::NoTrialRows);
        let dup = "x,x,s,a,y\n0.1,0.1,0,,\n";
        assert!(matches!(load_cohort(dup.as_bytes(), &schema()).unwrap_err(), DatasetError::DuplicateColumn(_)));
        let treat = "x,s,a,y\n0.1,0,1,\n";
        assert_eq!(
            load_cohort(treat.as_bytes(), &schema()).unwrap_err(),
            DatasetError::TreatmentOnNonTrialRow { row: 0 }
        );
    }

    #[test]
    fn missing_covariates_are_dropped_and_counted() {
        let text = "x,z,s,a,y\n0.1,,1,1,1\n0.2,0,1,0,0.5\n0.3,1,0,,\n,0,0,,\n0.5,1,1,1,\n0.6,1,1,1,2\n";
        let (ds, report) = load_cohort(text.as_bytes(), &schema()).unwrap();
        assert_eq!(ds.n_rows(), 3);
        assert_eq!(report.dropped_missing_covariate, 2);
        assert_eq!(report.dropped_incomplete_trial, 1);
        assert_eq!(ds.outcome_kind(), OutcomeKind::Continuous);
    }

    #[test]
    fn cass_shaped_counts() {
        let mut text = String::from("ef,s,a,y\n");
        for i in 0..1686 {
            if i < 731 {
                text.push_str(&format!("{},1,{},{}\n", 30 + i % 50, i % 2, (i / 2) % 2));
            } else {
                text.push_str(&format!("{},0,,\n", 30 + i % 50));
            }
        }
        let schema = Schema { effect_modifiers: vec!["ef".into()], ..Schema::default() };
        let (ds, _) = load_cohort(text.as_bytes(), &schema).unwrap();
        assert_eq!(ds.n_trial(), 731);
        assert_eq!(ds.n_rows() - ds.n_trial(), 955);
    }

    fn eight_rows() -> CohortDataset {
        let text = "x,s,a,y\n1,1,1,1\n2,1,1,0\n3,1,0,1\n4,1,0,0\n5,0,,\n6,0,,\n7,0,,\n8,0,,\n";
        load_cohort(text.as_bytes(), &schema()).unwrap().0
    }

    #[test]
    fn stratified_folds_balance_cells() {
        let ds = eight_rows();
        let folds = assign_folds(&ds, 2, 3).unwrap();
        for fold in 1..=2 {
            let rows = folds.rows_in(fold);
            let treated = rows.iter().filter(|&&i| ds.a()[i] == Some(true)).count();
            let control = rows.iter().filter(|&&i| ds.a()[i] == Some(false)).count();
            let outside = rows.iter().filter(|&&i| !ds.s()[i]).count();
            assert_eq!((treated, control, outside), (1, 1, 2));
        }
    }

    #[test]
    fn folds_are_deterministic() {
        let ds = eight_rows();
        assert_eq!(assign_folds(&ds, 2, 7).unwrap(), assign_folds(&ds, 2, 7).unwrap());
    }

    #[test]
    fn too_many_folds_for_smallest_arm() {
        let mut text = String::from("x,s,a,y\n");
        for i in 0..4 {
            text.push_str(&format!("{i},1,1,1\n"));
        }
        for i in 0..3 {
            text.push_str(&format!("{i},1,0,0\n"));
        }
        text.push_str("9,0,,\n");
        let ds = load_cohort(text.as_bytes(), &schema()).unwrap().0;
        assert!(matches!(assign_folds(&ds, 5, 1), Err(DatasetError::InvalidFolds(_))));
        assert!(matches!(assign_folds(&ds, 4, 1), Err(DatasetError::InvalidFolds(_))));
        assert!(assign_folds(&ds, 3, 1).is_ok());
    }

    #[test]
    fn explicit_folds_validate_arms() {
        let ds = eight_rows();
        assert!(FoldAssignment::from_ids(&ds, vec![1, 2, 1, 2, 1, 2, 1, 2], 2).is_ok());
        assert!(FoldAssignment::from_ids(&ds, vec![1, 1, 2, 2, 1, 2, 1, 2], 2).is_err());
        assert!(FoldAssignment::from_ids(&ds, vec![1, 2, 1, 3, 1, 2, 1, 2], 2).is_err());
    }
}
