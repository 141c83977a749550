//! Feature dump files: CSV with a header row `f0,...,f{d-1},label,predicted`.

use std::fs;
use std::path::Path;

use robustfeat_core::metrics::FeatureRow;

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};

pub fn to_csv(rows: &[FeatureRow]) -> Result<Vec<u8>> {
    let d = rows.first().map_or(0, |r| r.features.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (0..d).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    header.push("predicted".into());
    let fail = |e: csv::Error| Error::Usage(format!("csv: {e}"));
    w.write_record(&header).map_err(fail)?;
    for r in rows {
        // `{:?}` on f64 prints the shortest string that parses back exactly.
        let mut rec: Vec<String> = r.features.iter().map(|v| format!("{v:?}")).collect();
        rec.push(r.label.to_string());
        rec.push(r.predicted.to_string());
        w.write_record(&rec).map_err(fail)?;
    }
    w.into_inner().map_err(|e| Error::Usage(format!("csv: {e}")))
}

pub fn write(path: &Path, rows: &[FeatureRow]) -> Result<()> {
    write_atomic(path, &to_csv(rows)?)
}

pub fn read(path: &Path) -> Result<Vec<FeatureRow>> {
    let text = fs::read(path).map_err(Error::io(path))?;
    let mut r = csv::Reader::from_reader(text.as_slice());
    let bad = |m: String| Error::format(path, m);
    let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    let n = header.len();
    if n < 2 || &header[n - 2] != "label" || &header[n - 1] != "predicted" {
        return Err(bad("header must end with label,predicted".into()));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let num = |j: usize| rec[j].parse::<f64>().map_err(|e| bad(format!("row {i}, column {j}: {e}")));
        let int = |j: usize| rec[j].parse::<usize>().map_err(|e| bad(format!("row {i}, column {j}: {e}")));
        out.push(FeatureRow {
            features: (0..n - 2).map(num).collect::<Result<_>>()?,
            label: int(n - 2)?,
            predicted: int(n - 1)?,
        });
    }
    Ok(out)
}
