//! Report files and the report self-consistency check.
//!
//! Every table prints numbers with 4 decimals and `NA` for undefined values.
//! CSV tables start with a `# classes: 0=<name>,...` comment line.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{report_from_confusion, Method, ReportBundle, SplitName, SplitResult, Summary};
use crate::convnet::checkpoint;
use crate::metrics::{ClassConfusion, MetricError, MulticlassConfusion, Rates};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error(transparent)]
    Metric(#[from] MetricError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, reason: impl Into<String>) -> ReportError {
    ReportError::Parse {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn f4(v: f64) -> String {
    format!("{v:.4}")
}

pub fn opt4(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), f4)
}

/// `tp,tn,fp,fn,accuracy,sensitivity,specificity,gmean`.
pub fn counts_and_rates(c: &ClassConfusion, r: &Rates) -> String {
    [
        f4(c.true_pos),
        f4(c.true_neg),
        f4(c.false_pos),
        f4(c.false_neg),
        opt4(r.accuracy),
        opt4(r.sensitivity),
        opt4(r.specificity),
        opt4(r.gmean),
    ]
    .join(",")
}

pub fn class_header(names: &[String]) -> String {
    let parts: Vec<String> = names
        .iter()
        .enumerate()
        .map(|(i, n)| format!("{i}={n}"))
        .collect();
    format!("# classes: {}", parts.join(","))
}

pub fn confusion_file(split: SplitName, method: Method) -> String {
    format!("confusion_{split}_{method}.csv")
}

/// Table layout: header `actual\predicted,<names>`, one row per actual class.
pub fn confusion_csv(m: &MulticlassConfusion, names: &[String]) -> String {
    let mut s = class_header(names);
    s.push('\n');
    let _ = writeln!(s, "actual\\predicted,{}", names.join(","));
    for (name, row) in names.iter().zip(m.rows()) {
        let cells: Vec<String> = row.into_iter().map(f4).collect();
        let _ = writeln!(s, "{name},{}", cells.join(","));
    }
    s
}

pub fn parse_confusion_csv(path: &Path) -> Result<MulticlassConfusion, ReportError> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| parse_err(path, e.to_string()))?;
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| parse_err(path, e.to_string()))?;
        let row = rec
            .iter()
            .skip(1)
            .map(|c| {
                c.parse::<f64>()
                    .map_err(|_| parse_err(path, format!("bad cell {c:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok(MulticlassConfusion::from_rows(&rows)?)
}

pub fn per_class_csv(summary: &Summary) -> String {
    let mut s = class_header(&summary.class_names);
    s.push_str("\nmethod,split,class,tp,tn,fp,fn,accuracy,sensitivity,specificity,gmean,auc\n");
    for r in &summary.results {
        for (name, c) in summary.class_names.iter().zip(&r.metrics.per_class) {
            let _ = writeln!(
                s,
                "{},{},{name},{},{}",
                r.method,
                r.split,
                counts_and_rates(&c.confusion, &c.rates),
                opt4(c.auc)
            );
        }
    }
    s
}

pub fn summary_csv(summary: &Summary) -> String {
    let mut s = class_header(&summary.class_names);
    s.push_str("\nmethod,split,tp,tn,fp,fn,accuracy,sensitivity,specificity,gmean,auc,rmse\n");
    for r in &summary.results {
        let a = &r.metrics.aggregate;
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.method,
            r.split,
            counts_and_rates(&a.confusion, &a.rates),
            opt4(a.auc),
            opt4(a.rmse)
        );
    }
    s
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), ReportError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn write_with(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<fs::File>) -> io::Result<()>,
) -> Result<(), ReportError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
}

/// Writes the report files into `dir`, creating it if needed.
pub fn emit_reports(bundle: &ReportBundle, dir: &Path) -> Result<(), ReportError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let s = &bundle.summary;
    for r in &s.results {
        write_file(
            &dir.join(confusion_file(r.split, r.method)),
            confusion_csv(&r.confusion, &s.class_names).as_bytes(),
        )?;
    }
    write_file(
        &dir.join("metrics_per_class.csv"),
        per_class_csv(s).as_bytes(),
    )?;
    write_file(&dir.join("metrics_summary.csv"), summary_csv(s).as_bytes())?;

    let mut json = serde_json::to_string_pretty(s).expect("summary serialises");
    json.push('\n');
    write_file(&dir.join("summary.json"), json.as_bytes())?;

    let mut masks = String::new();
    for r in &s.runs {
        masks.push_str(&r.mask);
        masks.push('\n');
    }
    write_file(&dir.join("selection.txt"), masks.as_bytes())?;

    for (run, h) in &bundle.de_histories {
        write_with(&dir.join(format!("de_history_run{run}.csv")), |w| {
            h.write_csv(w)
        })?;
    }
    for (i, (run, h)) in bundle.train_histories.iter().enumerate() {
        let name = if i == 0 {
            "train_history.csv".to_string()
        } else {
            format!("train_history_run{run}.csv")
        };
        write_with(&dir.join(name), |w| h.write_csv(w))?;
    }
    if let Some(model) = &bundle.extractor {
        write_file(
            &dir.join("extractor.cnn"),
            checkpoint::to_text(model).as_bytes(),
        )?;
    }
    Ok(())
}

pub fn load_summary(path: &Path) -> Result<Summary, ReportError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e.to_string()))
}

/// Outcome of [`verify_report`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Verification {
    pub checks: usize,
    pub mismatches: Vec<String>,
}

impl Verification {
    pub fn is_ok(&self) -> bool {
        self.mismatches.is_empty()
    }

    fn expect_eq(&mut self, what: impl FnOnce() -> String, emitted: &str, recomputed: &str) {
        self.checks += 1;
        if emitted != recomputed {
            self.mismatches.push(format!(
                "{}: emitted {emitted}, recomputed {recomputed}",
                what()
            ));
        }
    }
}

/// Maps `method,split[,class]` to the remaining cells of a metrics table.
fn read_table(path: &Path, keys: usize) -> Result<Vec<(Vec<String>, Vec<String>)>, ReportError> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| parse_err(path, e.to_string()))?;
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| parse_err(path, e.to_string()))?;
        let cells: Vec<String> = rec.iter().map(str::to_string).collect();
        if cells.len() < keys {
            return Err(parse_err(path, "short row"));
        }
        let (k, v) = cells.split_at(keys);
        out.push((k.to_vec(), v.to_vec()));
    }
    Ok(out)
}

/// Recomputes every reported metric from the emitted confusion CSVs.
///
/// For each split and method the K x K matrix is read back, decomposed one
/// versus rest and aggregated; the resulting accuracy, sensitivity,
/// specificity and geometric mean must equal the printed values in both
/// metric tables and in `summary.json`. Mask lines in `selection.txt` must
/// match the recorded selected-feature counts.
pub fn verify_report(dir: &Path) -> Result<Verification, ReportError> {
    let summary = load_summary(&dir.join("summary.json"))?;
    let per_class_path = dir.join("metrics_per_class.csv");
    let summary_path = dir.join("metrics_summary.csv");
    let per_class = read_table(&per_class_path, 3)?;
    let agg_table = read_table(&summary_path, 2)?;
    let mut v = Verification::default();

    for r in &summary.results {
        let SplitResult {
            split,
            method,
            metrics,
            ..
        } = r;
        let path = dir.join(confusion_file(*split, *method));
        let matrix = parse_confusion_csv(&path)?;
        v.checks += 1;
        if matrix != r.confusion {
            v.mismatches.push(format!(
                "{}: matrix differs from summary.json",
                path.display()
            ));
        }
        let auc: Vec<Option<f64>> = metrics.per_class.iter().map(|c| c.auc).collect();
        let (_, recomputed) = report_from_confusion(&matrix, &auc, metrics.aggregate.rmse)?;

        // Accuracy straight from the aggregated counts.
        let agg = &recomputed.aggregate.confusion;
        let acc = super::q4(
            (agg.true_pos + agg.true_neg)
                / (agg.true_pos + agg.true_neg + agg.false_pos + agg.false_neg),
        );
        v.expect_eq(
            || format!("{method}/{split} aggregate accuracy (summary.json)"),
            &opt4(metrics.aggregate.rates.accuracy),
            &f4(acc),
        );

        let row = agg_table
            .iter()
            .find(|(k, _)| k[0] == method.as_str() && k[1] == split.as_str())
            .ok_or_else(|| parse_err(&summary_path, format!("no row for {method},{split}")))?;
        let expected =
            counts_and_rates(&recomputed.aggregate.confusion, &recomputed.aggregate.rates);
        v.expect_eq(
            || format!("{method}/{split} metrics_summary.csv"),
            &row.1[..8].join(","),
            &expected,
        );
        if recomputed.aggregate.rates != metrics.aggregate.rates {
            v.mismatches.push(format!(
                "{method}/{split}: summary.json aggregate rates differ"
            ));
        }

        for (k, (name, c)) in summary
            .class_names
            .iter()
            .zip(&recomputed.per_class)
            .enumerate()
        {
            let row = per_class
                .iter()
                .find(|(key, _)| {
                    key[0] == method.as_str() && key[1] == split.as_str() && &key[2] == name
                })
                .ok_or_else(|| {
                    parse_err(
                        &per_class_path,
                        format!("no row for {method},{split},{name}"),
                    )
                })?;
            v.expect_eq(
                || format!("{method}/{split}/{name} metrics_per_class.csv"),
                &row.1[..8].join(","),
                &counts_and_rates(&c.confusion, &c.rates),
            );
            v.checks += 1;
            if metrics.per_class[k].rates != c.rates {
                v.mismatches.push(format!(
                    "{method}/{split}/{name}: summary.json rates differ"
                ));
            }
        }
    }

    let sel_path = dir.join("selection.txt");
    let masks = fs::read_to_string(&sel_path).map_err(io_err(&sel_path))?;
    let lines: Vec<&str> = masks.lines().collect();
    v.checks += 1;
    if lines.len() != summary.runs.len() {
        v.mismatches.push(format!(
            "selection.txt has {} lines for {} runs",
            lines.len(),
            summary.runs.len()
        ));
    }
    for (line, run) in lines.iter().zip(&summary.runs) {
        let ones = line.chars().filter(|&c| c == '1').count();
        v.expect_eq(
            || format!("run {} selected count", run.run),
            &run.selected.to_string(),
            &ones.to_string(),
        );
        v.expect_eq(
            || format!("run {} mask length", run.run),
            &summary.feature_count.to_string(),
            &line.len().to_string(),
        );
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::Rates;

    #[test]
    fn table_row_formatting() {
        let c = ClassConfusion::new(363.3, 727.0, 1.0, 0.7).unwrap();
        assert_eq!(
            counts_and_rates(&c, &Rates::of(&c)),
            "363.3000,727.0000,1.0000,0.7000,0.9984,0.9981,0.9986,0.9984"
        );
    }

    #[test]
    fn undefined_prints_na() {
        let c = ClassConfusion::new(5.0, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(
            counts_and_rates(&c, &Rates::of(&c)),
            "5.0000,0.0000,0.0000,0.0000,1.0000,1.0000,NA,NA"
        );
    }

    #[test]
    fn confusion_csv_round_trip() {
        let m = MulticlassConfusion::from_rows(&[
            vec![51.75, 0.0, 0.2],
            vec![0.15, 54.9, 0.1],
            vec![0.4, 0.55, 55.95],
        ])
        .unwrap();
        let names: Vec<String> = ["covid", "normal", "pneumonia"].map(String::from).to_vec();
        let text = confusion_csv(&m, &names);
        assert!(text.starts_with("# classes: 0=covid,1=normal,2=pneumonia\n"));
        assert!(text.contains("covid,51.7500,0.0000,0.2000\n"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        fs::write(&p, text).unwrap();
        assert_eq!(parse_confusion_csv(&p).unwrap(), m);
    }
}
