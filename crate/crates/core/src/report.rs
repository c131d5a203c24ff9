//! Per-case and cohort evaluation files, the per-fold aggregation table
//! and the plain-text summary.
//!
//! Files under `evaluation/`:
//!
//! - `per_case.csv`: one row per case, full precision, `undefined` for a
//!   distance that cannot be computed
//! - `cohort.json`: [`EvaluationSummary`]
//!
//! Files written by [`report`] under `report/`:
//!
//! - `fold_table.csv`: Fold, Jaccard, Dice, Precision, Recall at 4 decimals
//! - `fold_table_full.csv`: the same rows at full precision plus case counts
//! - `cohort.csv`: Metric, Value
//! - `summary.txt`: both tables as text

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{CaseMetrics, CohortMetrics};
use crate::trainer::FoldSplit;

pub const UNDEFINED: &str = "undefined";
pub const PER_CASE_COLUMNS: [&str; 9] = [
    "case_id",
    "jaccard",
    "dice",
    "precision",
    "recall",
    "hausdorff_mm",
    "mean_distance_mm",
    "vol_pred_mm3",
    "vol_ref_mm3",
];
pub const TABLE_COLUMNS: [&str; 5] = ["Fold", "Jaccard", "Dice", "Precision", "Recall"];
pub const AVG_LABEL: &str = "AVG";
pub const MEAN_DISTANCE_DEFINITION: &str = "average symmetric surface distance";
pub const EMPTY_OVERLAP_CONVENTION: &str =
    "0/0 ratios score 1: both masks empty gives 1 everywhere; an empty prediction gives precision 1 and the rest 0; an empty reference gives recall 1 and the rest 0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub hd_percentile: f64,
    pub mean_distance_definition: String,
    pub empty_overlap_convention: String,
    pub cohort: CohortMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    /// Fold index, or [`AVG_LABEL`].
    pub fold: String,
    pub cases: usize,
    pub jaccard: f64,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
}

impl TableRow {
    pub fn values(&self) -> [f64; 4] {
        [self.jaccard, self.dice, self.precision, self.recall]
    }
}

/// Per-fold rows in fold order, then the AVG row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldTable {
    pub rows: Vec<TableRow>,
}

impl FoldTable {
    pub fn avg(&self) -> &TableRow {
        self.rows.last().expect("table has an AVG row")
    }

    pub fn folds(&self) -> &[TableRow] {
        &self.rows[..self.rows.len() - 1]
    }
}

fn row(fold: String, cases: &[&CaseMetrics]) -> TableRow {
    let n = cases.len() as f64;
    let mean = |f: fn(&CaseMetrics) -> f64| cases.iter().map(|c| f(c)).sum::<f64>() / n;
    TableRow {
        fold,
        cases: cases.len(),
        jaccard: mean(|c| c.jaccard),
        dice: mean(|c| c.dice),
        precision: mean(|c| c.precision),
        recall: mean(|c| c.recall),
    }
}

/// Unweighted means per fold, and the AVG row over all cases (not over
/// fold means). Cases are summed in id order, so the result does not
/// depend on the order of `per_case`.
pub fn aggregate_table(
    per_case: &[(String, CaseMetrics)],
    fold_of: &BTreeMap<String, usize>,
) -> Result<FoldTable> {
    if per_case.is_empty() {
        return Err(Error::Undefined("aggregation of an empty cohort".into()));
    }
    let mut sorted: Vec<&(String, CaseMetrics)> = per_case.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    if sorted.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::Config(
            "duplicate case ids in the per-case metrics".into(),
        ));
    }
    let missing: Vec<&str> = sorted
        .iter()
        .filter(|(id, _)| !fold_of.contains_key(id))
        .map(|(id, _)| id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "no fold assignment for {}",
            missing.join(", ")
        )));
    }
    let mut by_fold: BTreeMap<usize, Vec<&CaseMetrics>> = BTreeMap::new();
    for (id, m) in &sorted {
        by_fold.entry(fold_of[id]).or_default().push(m);
    }
    let mut rows: Vec<TableRow> = by_fold
        .iter()
        .map(|(f, cases)| row(f.to_string(), cases))
        .collect();
    let all: Vec<&CaseMetrics> = sorted.iter().map(|(_, m)| m).collect();
    rows.push(row(AVG_LABEL.into(), &all));
    Ok(FoldTable { rows })
}

pub fn fold_map(split: &FoldSplit) -> BTreeMap<String, usize> {
    split
        .folds
        .iter()
        .enumerate()
        .flat_map(|(f, ids)| ids.iter().map(move |id| (id.clone(), f)))
        .collect()
}

/// Shortest text that parses back to the same value.
pub fn full(v: f64) -> String {
    format!("{v:?}")
}

pub fn rounded(v: f64) -> String {
    format!("{v:.4}")
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.to_string(), full)
}

fn writer() -> csv::WriterBuilder {
    let mut b = csv::WriterBuilder::new();
    b.terminator(csv::Terminator::Any(b'\n'));
    b
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = writer().from_writer(Vec::new());
    w.write_record(header).expect("write to memory");
    for r in rows {
        w.write_record(&r).expect("write to memory");
    }
    w.into_inner().expect("flush to memory")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn per_case_csv(rows: &[(String, CaseMetrics)]) -> Vec<u8> {
    csv_bytes(
        &PER_CASE_COLUMNS,
        rows.iter().map(|(id, m)| {
            vec![
                id.clone(),
                full(m.jaccard),
                full(m.dice),
                full(m.precision),
                full(m.recall),
                opt(m.hausdorff_mm),
                opt(m.mean_distance_mm),
                full(m.vol_pred_mm3),
                full(m.vol_ref_mm3),
            ]
        }),
    )
}

pub fn parse_per_case_csv(bytes: &[u8]) -> Result<Vec<(String, CaseMetrics)>> {
    let bad = |m: String| Error::Config(format!("per-case CSV: {m}"));
    let mut r = csv::ReaderBuilder::new().from_reader(bytes);
    let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.iter().ne(PER_CASE_COLUMNS) {
        return Err(bad(format!(
            "unexpected header {:?}",
            header.iter().collect::<Vec<_>>()
        )));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let num = |i: usize| -> Result<f64> {
            rec[i].parse::<f64>().map_err(|_| {
                bad(format!(
                    "{} is not a number in column {}",
                    &rec[i], PER_CASE_COLUMNS[i]
                ))
            })
        };
        let maybe = |i: usize| -> Result<Option<f64>> {
            if &rec[i] == UNDEFINED {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        out.push((
            rec[0].to_string(),
            CaseMetrics {
                jaccard: num(1)?,
                dice: num(2)?,
                precision: num(3)?,
                recall: num(4)?,
                hausdorff_mm: maybe(5)?,
                mean_distance_mm: maybe(6)?,
                vol_pred_mm3: num(7)?,
                vol_ref_mm3: num(8)?,
            },
        ));
    }
    Ok(out)
}

/// The 4-decimal table, formatted from the same values as the sidecar.
pub fn table_csv(table: &FoldTable) -> Vec<u8> {
    csv_bytes(
        &TABLE_COLUMNS,
        table.rows.iter().map(|r| {
            std::iter::once(r.fold.clone())
                .chain(r.values().map(rounded))
                .collect()
        }),
    )
}

pub fn table_sidecar_csv(table: &FoldTable) -> Vec<u8> {
    csv_bytes(
        &["Fold", "Cases", "Jaccard", "Dice", "Precision", "Recall"],
        table.rows.iter().map(|r| {
            [r.fold.clone(), r.cases.to_string()]
                .into_iter()
                .chain(r.values().map(full))
                .collect()
        }),
    )
}

fn cohort_rows(s: &EvaluationSummary) -> Vec<(String, String)> {
    let c = &s.cohort;
    let undefined = |why: &Option<String>| match why {
        Some(w) => format!("{UNDEFINED} ({w})"),
        None => UNDEFINED.to_string(),
    };
    let no_distance = Some("no case with two nonempty masks".to_string());
    vec![
        ("Jaccard".into(), rounded(c.means.jaccard)),
        ("Dice".into(), rounded(c.means.dice)),
        ("Volume Bias (mm3)".into(), rounded(c.volume_bias_mm3)),
        (
            format!("Mean Distance (mm, {MEAN_DISTANCE_DEFINITION})"),
            c.means
                .mean_distance_mm
                .map_or_else(|| undefined(&no_distance), rounded),
        ),
        (
            "Volume Pearson R".into(),
            c.volume_pearson_r
                .map_or_else(|| undefined(&c.pearson_undefined), rounded),
        ),
        (
            format!("Hausdorff Distance (mm, percentile {})", s.hd_percentile),
            c.means
                .hausdorff_mm
                .map_or_else(|| undefined(&no_distance), rounded),
        ),
    ]
}

pub fn cohort_csv(s: &EvaluationSummary) -> Vec<u8> {
    csv_bytes(
        &["Metric", "Value"],
        cohort_rows(s).into_iter().map(|(k, v)| vec![k, v]),
    )
}

pub fn render_text(table: &FoldTable, s: &EvaluationSummary) -> String {
    let mut out = format!(
        "Cross-validation by fold (AVG over all {} cases)\n",
        table.avg().cases
    );
    out += &format!(
        "{:<6}{:>10}{:>10}{:>11}{:>10}\n",
        "Fold", "Jaccard", "Dice", "Precision", "Recall"
    );
    for r in &table.rows {
        let v = r.values().map(rounded);
        out += &format!(
            "{:<6}{:>10}{:>10}{:>11}{:>10}\n",
            r.fold, v[0], v[1], v[2], v[3]
        );
    }
    out += &format!("\nCohort ({} cases)\n", s.cohort.cases);
    let rows = cohort_rows(s);
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0) + 2;
    for (k, v) in rows {
        out += &format!("{k:<width$}{v}\n");
    }
    out
}

/// Standard locations inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn split(&self) -> PathBuf {
        self.root.join("split.json")
    }

    pub fn fold_dir(&self, fold: usize) -> PathBuf {
        self.root.join("folds").join(format!("fold_{fold}"))
    }

    pub fn checkpoint(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("checkpoint.ckpt")
    }

    pub fn log(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("log.jsonl")
    }

    pub fn manifest(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("manifest.json")
    }

    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions")
    }

    pub fn evaluation(&self) -> PathBuf {
        self.root.join("evaluation")
    }

    pub fn per_case(&self) -> PathBuf {
        self.evaluation().join("per_case.csv")
    }

    pub fn cohort(&self) -> PathBuf {
        self.evaluation().join("cohort.json")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}

/// Writes `per_case.csv` and `cohort.json` into `dir`.
pub fn write_evaluation(
    dir: &Path,
    rows: &[(String, CaseMetrics)],
    summary: &EvaluationSummary,
) -> Result<()> {
    write_file(&dir.join("per_case.csv"), &per_case_csv(rows))?;
    let json = serde_json::to_string_pretty(summary)?;
    write_file(&dir.join("cohort.json"), json.as_bytes())
}

#[derive(Debug, Clone)]
pub struct Summary {
    pub table: FoldTable,
    pub evaluation: EvaluationSummary,
    pub text: String,
}

/// Builds the report from `split.json` and the evaluation files of a run
/// directory and writes it under `report/`.
pub fn report(run_dir: &Path) -> Result<Summary> {
    let run = RunDir::new(run_dir);
    let inputs = [run.split(), run.per_case(), run.cohort()];
    let missing: Vec<PathBuf> = inputs.iter().filter(|p| !p.is_file()).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::MissingInputs(missing));
    }
    let split: FoldSplit = serde_json::from_slice(&read_file(&run.split())?)?;
    let rows = parse_per_case_csv(&read_file(&run.per_case())?)?;
    let evaluation: EvaluationSummary = serde_json::from_slice(&read_file(&run.cohort())?)?;
    let ids: BTreeSet<&String> = rows.iter().map(|(id, _)| id).collect();
    if ids.len() != evaluation.cohort.cases {
        return Err(Error::Config(format!(
            "{} lists {} cases but {} has {}",
            run.cohort().display(),
            evaluation.cohort.cases,
            run.per_case().display(),
            ids.len()
        )));
    }
    let table = aggregate_table(&rows, &fold_map(&split))?;
    let text = render_text(&table, &evaluation);
    let out = run.report();
    write_file(&out.join("fold_table.csv"), &table_csv(&table))?;
    write_file(&out.join("fold_table_full.csv"), &table_sidecar_csv(&table))?;
    write_file(&out.join("cohort.csv"), &cohort_csv(&evaluation))?;
    write_file(&out.join("summary.txt"), text.as_bytes())?;
    Ok(Summary {
        table,
        evaluation,
        text,
    })
}
