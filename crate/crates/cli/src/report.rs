//! CSV writers: one header row, six decimals.

use std::fmt::Write as _;

use patchmoe::{EvalReport, StepRecord};

pub fn fixed(v: f64) -> String {
    format!("{v:.6}")
}

/// One row per class plus a final `mean` row.
pub fn metrics_csv(r: &EvalReport) -> String {
    let mut out = String::from("class,image_auroc,image_ap,pixel_auroc,pixel_ap\n");
    for row in r.rows.iter().chain([&r.mean]) {
        let class = row.class_id.map_or_else(|| "mean".to_string(), |c| c.to_string());
        let _ = writeln!(
            out,
            "{class},{},{},{},{}",
            fixed(row.image_auroc),
            fixed(row.image_ap),
            fixed(row.pixel_auroc),
            fixed(row.pixel_ap)
        );
    }
    out
}

pub fn loss_trace_csv(trace: &[StepRecord]) -> String {
    let mut out = String::from("step,epoch,lr,seg,ac,etf,bal,total\n");
    for r in trace {
        let l = &r.loss;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.step,
            r.epoch,
            fixed(r.lr),
            fixed(l.seg),
            fixed(l.ac),
            fixed(l.etf),
            fixed(l.bal),
            fixed(l.total)
        );
    }
    out
}

/// Square matrix with `expert0..` headers; NaN entries are written as `nan`.
pub fn square_csv(values: &[f64], k: usize) -> String {
    let mut out = String::from("expert");
    for j in 0..k {
        let _ = write!(out, ",expert{j}");
    }
    out.push('\n');
    for i in 0..k {
        let _ = write!(out, "expert{i}");
        for j in 0..k {
            let v = values[i * k + j];
            if v.is_nan() {
                out.push_str(",nan");
            } else {
                let _ = write!(out, ",{}", fixed(v));
            }
        }
        out.push('\n');
    }
    out
}

/// Rows of `(label, shares)`.
pub fn utilization_csv(rows: &[(String, Vec<f64>)], k: usize) -> String {
    let mut out = String::from("level,class");
    for j in 0..k {
        let _ = write!(out, ",expert{j}");
    }
    out.push('\n');
    for (label, shares) in rows {
        out.push_str(label);
        for s in shares {
            let _ = write!(out, ",{}", fixed(*s));
        }
        out.push('\n');
    }
    out
}

/// Splits a CSV body (header skipped) into string cells.
pub fn parse_rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}
