//! Long-form result tables, their mean/std summaries and pass/fail checks.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

/// One row: an optional seed, key columns (step, layer, ratio, ...) and numeric values.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub seed: Option<u64>,
    pub keys: Vec<String>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub key_columns: Vec<String>,
    pub value_columns: Vec<String>,
    pub rows: Vec<Row>,
}

impl Table {
    pub fn new(name: &str, keys: &[&str], values: &[&str]) -> Self {
        Table {
            name: name.to_string(),
            key_columns: keys.iter().map(|s| s.to_string()).collect(),
            value_columns: values.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, seed: Option<u64>, keys: Vec<String>, values: Vec<f64>) {
        debug_assert_eq!(keys.len(), self.key_columns.len());
        debug_assert_eq!(values.len(), self.value_columns.len());
        self.rows.push(Row { seed, keys, values });
    }

    pub fn append(&mut self, other: Table) {
        self.rows.extend(other.rows);
    }

    pub fn has_seeds(&self) -> bool {
        self.rows.iter().any(|r| r.seed.is_some())
    }

    fn value_index(&self, column: &str) -> Option<usize> {
        self.value_columns.iter().position(|c| c == column)
    }

    /// Values of `column` grouped by key tuple, groups in first-appearance order.
    pub fn grouped(&self, column: &str) -> Vec<(Vec<String>, Vec<f64>)> {
        let Some(idx) = self.value_index(column) else {
            return Vec::new();
        };
        let mut order: Vec<Vec<String>> = Vec::new();
        let mut groups: BTreeMap<Vec<String>, Vec<f64>> = BTreeMap::new();
        for row in &self.rows {
            let entry = groups.entry(row.keys.clone()).or_insert_with(|| {
                order.push(row.keys.clone());
                Vec::new()
            });
            entry.push(row.values[idx]);
        }
        order
            .into_iter()
            .map(|k| {
                let v = groups.remove(&k).unwrap_or_default();
                (k, v)
            })
            .collect()
    }

    /// Mean and sample standard deviation of every value column per key tuple.
    pub fn summary(&self) -> Table {
        let mut values = vec!["n".to_string()];
        for c in &self.value_columns {
            values.push(format!("{c}_mean"));
            values.push(format!("{c}_std"));
        }
        let mut out = Table {
            name: format!("{}_summary", self.name),
            key_columns: self.key_columns.clone(),
            value_columns: values,
            rows: Vec::new(),
        };
        let per_column: Vec<_> = self.value_columns.iter().map(|c| self.grouped(c)).collect();
        let Some(first) = per_column.first() else {
            return out;
        };
        for (g, (keys, samples)) in first.iter().enumerate() {
            let mut row = vec![samples.len() as f64];
            for col in &per_column {
                let (m, s) = mean_std(&col[g].1);
                row.push(m);
                row.push(s);
            }
            out.rows.push(Row {
                seed: None,
                keys: keys.clone(),
                values: row,
            });
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = csv::Writer::from_writer(file);
        let seeded = self.has_seeds();
        let mut header: Vec<&str> = Vec::new();
        if seeded {
            header.push("seed");
        }
        header.extend(self.key_columns.iter().map(String::as_str));
        header.extend(self.value_columns.iter().map(String::as_str));
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec: Vec<String> = Vec::with_capacity(header.len());
            if seeded {
                rec.push(row.seed.map(|s| s.to_string()).unwrap_or_default());
            }
            rec.extend(row.keys.iter().cloned());
            rec.extend(row.values.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v: Vec<f64> = xs.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let ra = ranks(a);
    let rb = ranks(b);
    let (ma, _) = mean_std(&ra);
    let (mb, _) = mean_std(&rb);
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - ma) * (y - mb);
        da += (x - ma).powi(2);
        db += (y - mb).powi(2);
    }
    if da == 0.0 || db == 0.0 {
        return 0.0;
    }
    num / (da * db).sqrt()
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[idx[k]] = r;
        }
        i = j + 1;
    }
    out
}

/// One acceptance threshold and whether the run met it.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }

    /// `passes` out of `total` seeds, passing when at least `needed` do.
    pub fn count(name: &str, passes: usize, total: usize, needed: usize, what: &str) -> Self {
        Check::new(name, passes >= needed, format!("{passes}/{total} seeds {what} (need {needed})"))
    }
}

/// Everything an experiment produced.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub tables: Vec<Table>,
    pub checks: Vec<Check>,
    /// Per-seed failures that did not stop the run.
    pub errors: Vec<String>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn merge(&mut self, other: Report) {
        self.tables.extend(other.tables);
        self.checks.extend(other.checks);
        self.errors.extend(other.errors);
    }

    /// Writes every table, a `_summary.csv` for seeded tables and `<experiment>_checks.csv`.
    pub fn write(&self, dir: &Path, experiment: &str) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        for t in &self.tables {
            let p = dir.join(format!("{}.csv", t.name));
            t.write_csv(&p)?;
            written.push(p);
            if t.has_seeds() {
                let s = t.summary();
                let p = dir.join(format!("{}.csv", s.name));
                s.write_csv(&p)?;
                written.push(p);
            }
        }
        let p = dir.join(format!("{experiment}_checks.csv"));
        let file = File::create(&p).with_context(|| format!("creating {}", p.display()))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["check", "passed", "detail"])?;
        for c in &self.checks {
            w.write_record([c.name.as_str(), if c.passed { "pass" } else { "fail" }, c.detail.as_str()])?;
        }
        for e in &self.errors {
            w.write_record(["seed-error", "fail", e.as_str()])?;
        }
        w.flush()?;
        written.push(p);
        Ok(written)
    }
}
