use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use touchpit::experiments::{summary_rows, ResultRecord};

use crate::error::CliError;

pub const RESULTS_FILE: &str = "results.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SUMMARY_HEADER: [&str; 5] = ["variant", "group", "parameter", "metric", "value"];
pub const ROC_HEADER: [&str; 4] = ["fpr", "tpr_mean", "tpr_ci_low", "tpr_ci_high"];

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>, CliError> {
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(File::create(path)?)))
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

/// File name of a record's ROC table.
pub fn roc_file_name(r: &ResultRecord) -> String {
    let mut name = format!("roc_{}_{}", slug(r.variant.as_str()), slug(&r.group));
    for (k, v) in &r.params {
        let v = match v {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        name.push('_');
        name.push_str(&slug(&format!("{k}-{v}")));
    }
    name + ".csv"
}

pub fn write_jsonl(path: &Path, records: &[ResultRecord]) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| CliError::Data(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<ResultRecord>, CliError> {
    let f = File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line)
            .map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(r);
    }
    Ok(out)
}

/// Writes the summary table and one ROC table per record carrying a curve.
/// Returns the written file names.
pub fn write_tables(dir: &Path, records: &[ResultRecord]) -> Result<Vec<String>, CliError> {
    let mut written = vec![SUMMARY_FILE.to_string()];
    let mut w = csv_writer(&dir.join(SUMMARY_FILE))?;
    w.write_record(SUMMARY_HEADER)?;
    for r in records {
        for row in summary_rows(r) {
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    for r in records {
        let Some(roc) = &r.roc else { continue };
        let name = roc_file_name(r);
        let mut w = csv_writer(&dir.join(&name))?;
        w.write_record(ROC_HEADER)?;
        for i in 0..roc.fpr.len() {
            w.write_record([
                roc.fpr[i].to_string(),
                roc.tpr_mean[i].to_string(),
                roc.tpr_ci_low[i].to_string(),
                roc.tpr_ci_high[i].to_string(),
            ])?;
        }
        w.flush()?;
        written.push(name);
    }
    Ok(written)
}
