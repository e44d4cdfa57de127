//! Metrics CSV files: one per trial, plus summaries.

use std::path::Path;

use pvlu_core::harness::EpochMetrics;
use pvlu_core::{Summary, TrialResult};

use crate::error::{LabError, LabResult};

pub const TRIAL_HEADER: [&str; 6] = [
    "epoch",
    "train_loss",
    "train_acc",
    "test_loss",
    "test_acc",
    "dead_frac",
];
pub const SUMMARY_HEADER: [&str; 4] = ["activation", "mean_peak", "std_err", "n"];

/// Formats `x` with 6 significant digits, `%g` style.
pub fn sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        trim_zeros(format!("{x:.*}", (5 - exp) as usize))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

fn csv_err(path: &Path, e: impl std::fmt::Display) -> LabError {
    LabError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> LabResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| csv_err(path, e))?;
    std::fs::write(path, bytes).map_err(|e| LabError::io(path, e))
}

fn epoch_row(m: &EpochMetrics) -> Vec<String> {
    vec![
        m.epoch.to_string(),
        sig6(m.train_loss),
        sig6(m.train_acc),
        sig6(m.test_loss),
        sig6(m.test_acc),
        sig6(m.dead_frac),
    ]
}

/// Writes a trial's per-epoch metrics. Fine-tuning trials start with their epoch-0 row.
pub fn write_trial(path: &Path, trial: &TrialResult) -> LabResult<()> {
    let rows: Vec<_> = trial
        .initial
        .iter()
        .chain(&trial.epochs)
        .map(epoch_row)
        .collect();
    write_rows(path, &TRIAL_HEADER, &rows)
}

pub fn write_summary(path: &Path, summaries: &[Summary]) -> LabResult<()> {
    let rows: Vec<_> = summaries
        .iter()
        .map(|s| {
            vec![
                s.activation.clone(),
                sig6(s.mean_peak),
                s.std_err.map(sig6).unwrap_or_default(),
                s.n.to_string(),
            ]
        })
        .collect();
    write_rows(path, &SUMMARY_HEADER, &rows)
}

/// Writes an arbitrary table of preformatted cells.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> LabResult<()> {
    write_rows(path, header, rows)
}

/// Reads a trial CSV back. The header must match [`TRIAL_HEADER`] exactly.
pub fn read_trial(path: &Path) -> LabResult<Vec<EpochMetrics>> {
    let bytes = std::fs::read(path).map_err(|e| LabError::io(path, e))?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.is_empty() {
        return Err(csv_err(path, "empty file"));
    }
    if header.iter().ne(TRIAL_HEADER) {
        return Err(csv_err(
            path,
            format!(
                "header {:?} does not match {}",
                header.iter().collect::<Vec<_>>(),
                TRIAL_HEADER.join(",")
            ),
        ));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let field = |j: usize| -> LabResult<f64> {
            rec[j].parse().map_err(|_| {
                csv_err(
                    path,
                    format!("row {}: bad {} {:?}", i + 1, TRIAL_HEADER[j], &rec[j]),
                )
            })
        };
        rows.push(EpochMetrics {
            epoch: rec[0]
                .parse()
                .map_err(|_| csv_err(path, format!("row {}: bad epoch {:?}", i + 1, &rec[0])))?,
            train_loss: field(1)?,
            train_acc: field(2)?,
            test_loss: field(3)?,
            test_acc: field(4)?,
            dead_frac: field(5)?,
        });
    }
    if rows.is_empty() {
        return Err(csv_err(path, "no data rows"));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sig6_examples() {
        for (x, s) in [
            (0.0, "0"),
            (-0.0, "0"),
            (1.0, "1"),
            (0.5, "0.5"),
            (0.123456789, "0.123457"),
            (123456.7, "123457"),
            (1234567.0, "1.23457e6"),
            (0.0000123456789, "1.23457e-5"),
            (0.000123456789, "0.000123457"),
            (9.9999996, "10"),
            (-2.5, "-2.5"),
            (1e-12, "1e-12"),
        ] {
            assert_eq!(sig6(x), s, "{x}");
        }
    }

    proptest! {
        #[test]
        fn sig6_keeps_six_digits(x in -1e9f64..1e9) {
            let back: f64 = sig6(x).parse().unwrap();
            prop_assert!((back - x).abs() <= x.abs() * 5e-6 + 1e-300);
        }
    }
}
