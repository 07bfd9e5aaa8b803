//! Metrics rows and their CSV serialization.

use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

pub const CSV_HEADER: &str = "step,split,class,dice,loss_main,loss_aux_sum,loss_total";

/// One evaluation record: a per-class row uses `class = Some(c)`, the
/// foreground mean uses `class = None` and renders as `mean`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub split: String,
    pub class: Option<usize>,
    pub dice: f64,
    pub loss_main: f64,
    pub loss_aux_sum: f64,
    pub loss_total: f64,
}

impl MetricsRow {
    fn class_label(&self) -> String {
        match self.class {
            Some(c) => c.to_string(),
            None => "mean".to_string(),
        }
    }
}

pub fn to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:?},{:?},{:?},{:?}",
            r.step,
            r.split,
            r.class_label(),
            r.dice,
            r.loss_main,
            r.loss_aux_sum,
            r.loss_total
        );
    }
    out
}

pub fn write_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(to_csv(rows).as_bytes())?;
    Ok(())
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format {
            offset: 0,
            msg: "empty metrics file".into(),
        })?;
    if header != CSV_HEADER {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad header {header:?}"),
        });
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Format {
                offset: i + 1,
                msg: format!("expected 7 fields, got {}", fields.len()),
            });
        }
        let bad = |what: &str| Error::Format {
            offset: i + 1,
            msg: format!("bad {what} field"),
        };
        rows.push(MetricsRow {
            step: fields[0].parse().map_err(|_| bad("step"))?,
            split: fields[1].to_string(),
            class: if fields[2] == "mean" {
                None
            } else {
                Some(fields[2].parse().map_err(|_| bad("class"))?)
            },
            dice: fields[3].parse().map_err(|_| bad("dice"))?,
            loss_main: fields[4].parse().map_err(|_| bad("loss_main"))?,
            loss_aux_sum: fields[5].parse().map_err(|_| bad("loss_aux_sum"))?,
            loss_total: fields[6].parse().map_err(|_| bad("loss_total"))?,
        });
    }
    Ok(rows)
}

/// Expands an evaluation summary into per-class rows plus a `mean` row,
/// all carrying the same loss columns.
pub fn summary_rows(
    step: u64,
    split: &str,
    tally: &crate::train::DiceTally,
    loss_main: f64,
    loss_aux_sum: f64,
    loss_total: f64,
) -> Vec<MetricsRow> {
    let classes = tally.inter.len();
    let mut rows: Vec<MetricsRow> = (0..classes)
        .map(|c| MetricsRow {
            step,
            split: split.to_string(),
            class: Some(c),
            dice: tally.dice(c),
            loss_main,
            loss_aux_sum,
            loss_total,
        })
        .collect();
    rows.push(MetricsRow {
        step,
        split: split.to_string(),
        class: None,
        dice: tally.mean_foreground(),
        loss_main,
        loss_aux_sum,
        loss_total,
    });
    rows
}
