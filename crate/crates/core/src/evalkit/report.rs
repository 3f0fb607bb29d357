use std::fmt::{self, Write as _};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Printed above every comparison table.
pub const BANNER: &str = "NOTE: accuracies published for Kinetics-400 with ImageNet-21k \
pretraining are reference values only and are not reproducible here; \
every number below comes from synthetic toy data.";

/// One line of a comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    /// Row label, e.g. a variant name or `4 / 8`.
    pub label: String,
    pub top1: Option<f64>,
    /// Empty when the task has fewer than five classes.
    pub top5: Option<f64>,
    pub final_loss: Option<f64>,
    pub flops: u64,
    /// Error message when the cell failed.
    pub error: Option<String>,
}

/// A titled table of rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub title: String,
    /// Heading of the label column.
    pub label_heading: String,
    pub rows: Vec<ComparisonRow>,
}

fn pct(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{:.2}", 100.0 * v))
}

impl ComparisonTable {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let fail = |e: csv::Error| Error::Contract(e.to_string());
        out.write_record([
            &self.label_heading,
            "top1",
            "top5",
            "final_loss",
            "flops",
            "error",
        ])
        .map_err(fail)?;
        for r in &self.rows {
            let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
            out.write_record([
                r.label.clone(),
                opt(r.top1),
                opt(r.top5),
                opt(r.final_loss),
                r.flops.to_string(),
                r.error.clone().unwrap_or_default(),
            ])
            .map_err(fail)?;
        }
        out.flush().map_err(|e| Error::Contract(e.to_string()))
    }
}

impl fmt::Display for ComparisonTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let heads = [
            self.label_heading.as_str(),
            "Top-1",
            "Top-5",
            "Loss",
            "MACs",
        ];
        let cells: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                let loss = r.final_loss.map_or("-".into(), |l| format!("{l:.4}"));
                match &r.error {
                    Some(e) => [
                        r.label.clone(),
                        "FAILED".into(),
                        "-".into(),
                        "-".into(),
                        e.clone(),
                    ],
                    None => [
                        r.label.clone(),
                        pct(r.top1),
                        pct(r.top5),
                        loss,
                        r.flops.to_string(),
                    ],
                }
            })
            .collect();
        let mut widths = heads.map(str::len);
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let rule: String = widths
            .iter()
            .map(|w| "-".repeat(w + 2))
            .collect::<Vec<_>>()
            .join("+");
        writeln!(f, "{BANNER}")?;
        writeln!(f)?;
        writeln!(f, "{}", self.title)?;
        let mut line = String::new();
        for (i, h) in heads.iter().enumerate() {
            let _ = write!(line, " {:<w$} ", h, w = widths[i]);
            if i + 1 < heads.len() {
                line.push('|');
            }
        }
        writeln!(f, "{}", line.trim_end())?;
        writeln!(f, "{rule}")?;
        for row in &cells {
            let mut line = String::new();
            for (i, c) in row.iter().enumerate() {
                if i == 0 {
                    let _ = write!(line, " {:<w$} ", c, w = widths[i]);
                } else {
                    let _ = write!(line, " {:>w$} ", c, w = widths[i]);
                }
                if i + 1 < row.len() {
                    line.push('|');
                }
            }
            writeln!(f, "{}", line.trim_end())?;
        }
        Ok(())
    }
}
