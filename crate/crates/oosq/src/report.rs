//! Tabular renderings of benchmark, agreement and retrieval results.
//! Every table is written as TSV for reading and JSON for tooling.

use std::fmt::Write as _;
use std::path::Path;

use oosq_core::harness::{BenchmarkReport, BenchmarkRow};
use oosq_core::metrics::{AgreementReport, ConfusionMatrix2x2, TaskPair};
use oosq_core::retrieval::RetrievalReport;
use serde::Serialize;

use crate::datastore::write_atomic;
use crate::error::Result;

/// Two decimals; `-` for an empty cell.
pub fn fmt2(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.2}"),
        None => "-".into(),
    }
}

fn row_cells(row: &BenchmarkRow) -> Vec<String> {
    let mut out: Vec<String> = row
        .cells
        .iter()
        .map(|c| {
            let mut s = fmt2(c.percent);
            // Cells with failed questions are marked; their value covers
            // only what completed.
            if c.percent.is_some() && !c.complete {
                s.push('*');
            }
            s
        })
        .collect();
    out.push(fmt2(row.avg));
    let mut sd = fmt2(row.std_dev);
    if row.std_dev.is_some() && !row.std_dev_defined {
        sd.push('^');
    }
    out.push(sd);
    out
}

/// Defusion accuracy per topic, one row per (variant, model).
pub fn benchmark_tsv(report: &BenchmarkReport) -> String {
    let mut s = String::from("variant\tmodel");
    for t in &report.topics {
        s.push('\t');
        s.push_str(t);
    }
    s.push_str("\tAvg\tStd Dev\tdetection_acc\n");
    for row in &report.rows {
        let _ = write!(s, "{}\t{}", row.prompt_variant, row.model);
        for c in row_cells(row) {
            s.push('\t');
            s.push_str(&c);
        }
        let det = row.detection.as_ref().and_then(|d| d.accuracy).map(|a| a * 100.0);
        let _ = writeln!(s, "\t{}", fmt2(det));
    }
    if report.rows.iter().any(|r| !r.complete) {
        s.push_str("# * cell has failed questions; value covers completed judgements only\n");
    }
    if report.rows.iter().any(|r| r.std_dev.is_some() && !r.std_dev_defined) {
        s.push_str("# ^ single topic; sample deviation undefined\n");
    }
    s
}

fn pct(v: Option<f64>) -> String {
    fmt2(v.map(|x| x * 100.0))
}

/// Per-group kappa and accuracies, followed by the ground-truth accuracy
/// and the confusion matrices of system versus ground truth.
pub fn agreement_tsv(report: &AgreementReport) -> String {
    let mut s = String::from("group\trow\tout_of_scope\tdefusion\n");
    let pair = |s: &mut String, group: &str, name: &str, p: &TaskPair, scale: bool| {
        let f = |v: Option<f64>| if scale { pct(v) } else { fmt2(v) };
        let _ = writeln!(s, "{group}\t{name}\t{}\t{}", f(p.out_of_scope), f(p.defusion));
    };
    for g in &report.groups {
        pair(&mut s, &g.group, "kappa", &g.kappa, false);
        for a in &g.annotators {
            pair(&mut s, &g.group, &format!("acc {}", a.annotator), &a.annotator_acc, true);
        }
        pair(&mut s, &g.group, "group_agree_acc", &g.group_agree_acc, true);
    }
    pair(&mut s, "all", "ground_truth_acc", &report.ground_truth_acc, true);
    let matrix = |s: &mut String, name: &str, m: &Option<ConfusionMatrix2x2>| {
        if let Some(m) = m {
            let _ = writeln!(s, "# {name}: tp={} fp={} fn={} tn={}", m.tp, m.fp, m.fn_, m.tn);
        }
    };
    matrix(&mut s, "out_of_scope", &report.out_of_scope_matrix);
    matrix(&mut s, "defusion", &report.defusion_matrix);
    s
}

/// Recall@{1,5,10} and MRR in percent, one row per retriever.
pub fn retrieval_tsv(reports: &[RetrievalReport]) -> String {
    let mut s = String::from("retriever\tqueries\tR@1\tR@5\tR@10\tMRR\tdepth\n");
    for r in reports {
        let _ = writeln!(
            s,
            "{}\t{}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{}",
            r.retriever,
            r.queries,
            r.recall_at_1 * 100.0,
            r.recall_at_5 * 100.0,
            r.recall_at_10 * 100.0,
            r.mrr * 100.0,
            r.depth
        );
    }
    s
}

/// Writes `<stem>.tsv` and `<stem>.json` into `dir`.
pub fn write_table<T: Serialize + ?Sized>(dir: &Path, stem: &str, tsv: &str, value: &T) -> Result<Vec<String>> {
    let tsv_name = format!("{stem}.tsv");
    let json_name = format!("{stem}.json");
    write_atomic(&dir.join(&tsv_name), tsv.as_bytes())?;
    let mut json = serde_json::to_vec_pretty(value).expect("report serializes");
    json.push(b'\n');
    write_atomic(&dir.join(&json_name), &json)?;
    Ok(vec![tsv_name, json_name])
}
