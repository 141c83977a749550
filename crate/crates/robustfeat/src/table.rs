//! Aggregates per-seed results into mean ± std cells, with Welch p-values
//! for paired runs. Every number written is listed in a provenance sidecar.

use std::fmt::Write as _;
use std::path::PathBuf;

use robustfeat_core::metrics::t_test;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::manifest::ResolvedRun;
use crate::pipeline::{write_json, Context};

/// One number that went into a table cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Source {
    pub run: String,
    pub run_hash: String,
    pub seed: u64,
    pub column: String,
    /// Hash of the attack configuration; `None` for clean accuracy.
    pub attack_hash: Option<String>,
    pub file: PathBuf,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    /// Accuracies in percent, one per seed.
    pub values: Vec<f64>,
}

impl Cell {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Sample standard deviation; 0 for a single seed.
    pub fn std(&self) -> f64 {
        let n = self.values.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        (self.values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64).sqrt()
    }

    pub fn display(&self) -> String {
        format!("{:.2} ± {:.2}", self.mean(), self.std())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub run: String,
    pub cells: Vec<Cell>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    /// Per column; `None` when either side has fewer than two seeds.
    pub p: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Row>,
    pub comparisons: Vec<Comparison>,
    pub provenance: Vec<Source>,
}

pub fn format_p(p: Option<f64>) -> String {
    match p {
        None => "n/a".into(),
        Some(p) if p < 1e-3 => "<0.001".into(),
        Some(p) => format!("{p:.3}"),
    }
}

/// Runs that differ only in lambda: each lambda = 0 run is paired with
/// every lambda > 0 run sharing its remaining settings.
pub fn auto_pairs(runs: &[ResolvedRun]) -> Vec<(String, String)> {
    let key = |r: &ResolvedRun| {
        let mut t = r.train.clone();
        t.lambda = 0.0;
        serde_json::to_string(&(r.arch, r.init, t, &r.adversarial, &r.seeds.len())).expect("serializable")
    };
    let mut out = Vec::new();
    for a in runs.iter().filter(|r| r.train.lambda == 0.0) {
        for b in runs.iter().filter(|r| r.train.lambda > 0.0) {
            if key(a) == key(b) {
                out.push((a.name.clone(), b.name.clone()));
            }
        }
    }
    out
}

pub fn build(ctx: &Context) -> Result<Table> {
    let runs = ctx.runs()?;
    let attacks: Vec<_> = ctx
        .manifest
        .attacks
        .iter()
        .filter(|a| ctx.opts.attacks.is_empty() || ctx.opts.attacks.contains(&a.name))
        .collect();
    let mut columns = vec!["clean".to_string()];
    columns.extend(attacks.iter().map(|a| a.name.clone()));
    let mut rows = Vec::new();
    let mut provenance = Vec::new();
    for run in &runs {
        let mut cells = vec![Cell { values: Vec::new() }; columns.len()];
        let run_hash = ctx.run_hash(run);
        for &seed in &run.seeds {
            let dir = ctx.cell_dir(run, seed);
            let record_path = dir.join("record.json");
            if !record_path.exists() {
                return Err(Error::Missing(record_path));
            }
            let rec = ctx.read_record(run, seed)?;
            let v = 100.0 * rec.record.final_clean_accuracy;
            cells[0].values.push(v);
            provenance.push(Source {
                run: run.name.clone(),
                run_hash: run_hash.clone(),
                seed,
                column: "clean".into(),
                attack_hash: None,
                file: record_path,
                value: v,
            });
            for (j, a) in attacks.iter().enumerate() {
                let path = ctx.attack_path(run, seed, a);
                if !path.exists() {
                    return Err(Error::Missing(path));
                }
                let r = ctx.read_attack(run, seed, a)?;
                let v = 100.0 * r.adversarial_accuracy;
                cells[j + 1].values.push(v);
                provenance.push(Source {
                    run: run.name.clone(),
                    run_hash: run_hash.clone(),
                    seed,
                    column: a.name.clone(),
                    attack_hash: Some(r.attack_hash),
                    file: path,
                    value: v,
                });
            }
        }
        rows.push(Row {
            run: run.name.clone(),
            cells,
        });
    }
    let pairs = if ctx.manifest.table.pairs.is_empty() {
        auto_pairs(&runs)
    } else {
        ctx.manifest.table.pairs.clone()
    };
    let mut comparisons = Vec::new();
    for (a, b) in pairs {
        let (Some(ra), Some(rb)) = (rows.iter().find(|r| r.run == a), rows.iter().find(|r| r.run == b)) else {
            // A --run filter dropped one side.
            continue;
        };
        let p = ra
            .cells
            .iter()
            .zip(&rb.cells)
            .map(|(x, y)| t_test(&x.values, &y.values).ok().map(|r| r.p))
            .collect();
        comparisons.push(Comparison { a, b, p });
    }
    Ok(Table {
        columns,
        rows,
        comparisons,
        provenance,
    })
}

fn align(lines: &[Vec<String>]) -> String {
    let ncol = lines.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..ncol)
        .map(|j| lines.iter().filter_map(|l| l.get(j)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for l in lines {
        let cells: Vec<String> = l
            .iter()
            .enumerate()
            .map(|(j, s)| format!("{s:<w$}", w = widths[j]))
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

impl Table {
    fn row(&self, name: &str) -> &Row {
        self.rows.iter().find(|r| r.run == name).expect("compared runs are rows")
    }

    /// Aligned text: one line per run, then one block per compared pair
    /// with both runs and the p-value for every column.
    pub fn to_text(&self) -> String {
        let mut lines = vec![std::iter::once("run".to_string()).chain(self.columns.iter().cloned()).collect::<Vec<_>>()];
        for r in &self.rows {
            lines.push(std::iter::once(r.run.clone()).chain(r.cells.iter().map(Cell::display)).collect());
        }
        let mut out = String::from("Accuracy (%), mean ± std over seeds\n\n");
        out.push_str(&align(&lines));
        for c in &self.comparisons {
            let (ra, rb) = (self.row(&c.a), self.row(&c.b));
            let mut lines = vec![vec![
                "column".to_string(),
                c.a.clone(),
                c.b.clone(),
                "p (Welch)".to_string(),
            ]];
            for (j, col) in self.columns.iter().enumerate() {
                lines.push(vec![col.clone(), ra.cells[j].display(), rb.cells[j].display(), format_p(c.p[j])]);
            }
            let _ = write!(out, "\n{} vs {}\n\n", c.a, c.b);
            out.push_str(&align(&lines));
        }
        out
    }

    /// Long-form CSV: one line per (run, column) and one per (pair, column).
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let fail = |e: csv::Error| Error::Usage(format!("csv: {e}"));
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["kind", "run_a", "run_b", "column", "mean_a", "std_a", "n_a", "mean_b", "std_b", "n_b", "p"])
            .map_err(fail)?;
        let num = |v: f64| format!("{v:.6}");
        for r in &self.rows {
            for (col, c) in self.columns.iter().zip(&r.cells) {
                w.write_record([
                    "run",
                    &r.run,
                    "",
                    col,
                    &num(c.mean()),
                    &num(c.std()),
                    &c.values.len().to_string(),
                    "",
                    "",
                    "",
                    "",
                ])
                .map_err(fail)?;
            }
        }
        for c in &self.comparisons {
            let (ra, rb) = (self.row(&c.a), self.row(&c.b));
            for (j, col) in self.columns.iter().enumerate() {
                let (x, y) = (&ra.cells[j], &rb.cells[j]);
                w.write_record([
                    "pair",
                    &c.a,
                    &c.b,
                    col,
                    &num(x.mean()),
                    &num(x.std()),
                    &x.values.len().to_string(),
                    &num(y.mean()),
                    &num(y.std()),
                    &y.values.len().to_string(),
                    &c.p[j].map(|p| format!("{p:.6e}")).unwrap_or_default(),
                ])
                .map_err(fail)?;
            }
        }
        w.into_inner().map_err(|e| Error::Usage(format!("csv: {e}")))
    }
}

/// Writes `table.txt`, `table.csv` and `table.provenance.json` under
/// `<out>/tables` and returns their paths.
pub fn write(ctx: &Context) -> Result<Vec<PathBuf>> {
    let t = build(ctx)?;
    let dir = ctx.out.join("tables");
    let txt = dir.join("table.txt");
    let csv = dir.join("table.csv");
    let prov = dir.join("table.provenance.json");
    write_atomic(&txt, t.to_text().as_bytes())?;
    write_atomic(&csv, &t.to_csv()?)?;
    // Paths relative to the output root keep the sidecar byte-identical
    // when the output directory moves.
    let rel: Vec<Source> = t
        .provenance
        .iter()
        .map(|s| Source {
            file: s.file.strip_prefix(&ctx.out).map(PathBuf::from).unwrap_or_else(|_| s.file.clone()),
            ..s.clone()
        })
        .collect();
    write_json(&prov, &rel)?;
    Ok(vec![txt, csv, prov])
}
