//! Writes an [`EvalReport`] as plain CSV files plus a JSON copy that
//! `report` can re-emit from.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::reference::{round1, REFERENCE};
use super::sweep::{CellOutcome, EvalReport};

pub const TABLE_FILE: &str = "report.csv";
pub const BOXPLOT_FILE: &str = "boxplot.csv";
pub const TESTS_FILE: &str = "tests.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const JSON_FILE: &str = "report.json";

fn num(x: f64) -> String {
    format!("{x:.6}")
}

/// Per-cell table: `prompt,variant,lora,seed,wer_percent,delta_percent`.
/// Not-applicable cells print `-`, failed ones `failed`.
pub fn table_csv(report: &EvalReport) -> String {
    let mut out = String::from("prompt,variant,lora,seed,wer_percent,delta_percent\n");
    for cell in &report.cells {
        let k = &cell.key;
        let wer = match &cell.outcome {
            CellOutcome::Done(r) => num(r.wer_percent),
            CellOutcome::NotApplicable => "-".into(),
            CellOutcome::Failed { .. } => "failed".into(),
        };
        let delta = report.delta(k).map(num).unwrap_or_default();
        let lora = if k.lora { "on" } else { "off" };
        writeln!(out, "{},{},{lora},{},{wer},{delta}", csv_field(&k.template), k.variant.as_str(), k.seed).unwrap();
    }
    out
}

/// One line per variant: the label followed by every finished WER.
pub fn boxplot_csv(report: &EvalReport) -> String {
    let mut out = String::new();
    for (variant, lora) in report.labels() {
        let mut line = super::sweep::variant_label(variant, lora);
        for w in report.wers(variant, lora) {
            line.push(',');
            line.push_str(&num(w));
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}

/// `dataset,t,p,n`; `nan` when the test is undefined.
pub fn tests_csv(report: &EvalReport) -> String {
    let mut out = String::from("dataset,t,p,n\n");
    for row in report.tests() {
        match row.test {
            Some(t) => writeln!(out, "{},{},{:.6e},{}", row.dataset, num(t.t), t.p, t.n).unwrap(),
            None => writeln!(out, "{},nan,nan,{}", row.dataset, row.pairs).unwrap(),
        }
    }
    out
}

/// `variant,n,min,median,max,mean,std` over every finished cell.
pub fn summary_csv(report: &EvalReport) -> String {
    let mut out = String::from("variant,n,min,median,max,mean,std\n");
    for (label, s) in report.summaries() {
        match s {
            Some(s) => writeln!(
                out,
                "{label},{},{},{},{},{},{}",
                s.n,
                num(s.min),
                num(s.median),
                num(s.max),
                num(s.mean),
                num(s.std)
            )
            .unwrap(),
            None => writeln!(out, "{label},0,,,,,").unwrap(),
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Writes all report files into `dir` and returns their paths.
pub fn emit_report(report: &EvalReport, dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    if report.cells.is_empty() {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidInput, "report has no cells"));
    }
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(report).expect("plain data serializes") + "\n";
    let files = [
        (TABLE_FILE, table_csv(report)),
        (BOXPLOT_FILE, boxplot_csv(report)),
        (TESTS_FILE, tests_csv(report)),
        (SUMMARY_FILE, summary_csv(report)),
        (JSON_FILE, json),
    ];
    let mut paths = Vec::new();
    for (name, text) in files {
        let path = dir.join(name);
        std::fs::write(&path, text)?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn load_report(dir: &Path) -> std::io::Result<EvalReport> {
    let text = std::fs::read_to_string(dir.join(JSON_FILE))?;
    serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

/// Re-derivation of the published comparison: Δ% per prompt against the
/// printed values, and the paired test per dataset.
pub fn reference_csv() -> (String, String) {
    let mut deltas = String::from("dataset,prompt,vanilla,pp,delta_percent,printed_delta,consistent\n");
    let mut tests = String::from("dataset,t,p,n,printed_p,base_to_1_reduction,printed_reduction\n");
    for col in REFERENCE.iter() {
        let checks = col.delta_checks().expect("reference baselines are positive");
        for (i, check) in checks.iter().enumerate() {
            writeln!(
                deltas,
                "{},{},{:.2},{:.2},{:.1},{:.1},{}",
                col.dataset,
                check.prompt,
                col.vanilla[i],
                col.pp[i],
                round1(check.computed),
                check.printed,
                check.consistent
            )
            .unwrap();
        }
        let t = col.paired_test().expect("reference columns have variance");
        let reduction = col
            .base_to_first_reduction()
            .map(|r| format!("{r:.2}"))
            .unwrap_or_default();
        let printed_reduction = col.printed_reduction.map(|r| format!("{r:.1}")).unwrap_or_default();
        let printed_p = format!("{:e}", col.printed_p);
        writeln!(
            tests,
            "{},{},{:.6e},{},{printed_p},{reduction},{printed_reduction}",
            col.dataset,
            num(t.t),
            t.p,
            t.n
        )
        .unwrap();
    }
    (deltas, tests)
}
