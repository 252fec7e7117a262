//! Line-oriented `key value` reports and plain numeric plot columns.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use dynrefine::optim::Trace;

use crate::config::RunConfig;

#[derive(Clone, Debug, Default)]
pub struct Report {
    lines: Vec<(String, String)>,
}

impl Report {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&mut self, key: impl Into<String>, value: impl ToString) {
        self.lines.push((key.into(), value.to_string()));
    }

    pub fn config(&mut self, config: &RunConfig) {
        for (k, v) in config.entries() {
            self.put(format!("config.{k}"), v);
        }
    }

    pub fn trace(&mut self, name: &str, trace: &Trace) {
        self.put(format!("trace.{name}.steps"), trace.values.len());
        if let Some(v) = trace.initial() {
            self.put(format!("trace.{name}.initial"), v);
        }
        if let Some(v) = trace.final_best() {
            self.put(format!("trace.{name}.final"), v);
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.lines {
            writeln!(out, "{k} {v}").expect("string write");
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        fs::write(path, self.render()).with_context(|| format!("writing {}", path.display()))
    }
}

/// Whitespace-separated columns with a `#` header line.
pub fn write_columns(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut out = format!("# {}\n", header.join(" "));
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn write_trace(path: &Path, trace: &Trace) -> Result<()> {
    let rows: Vec<Vec<f64>> = trace
        .values
        .iter()
        .zip(&trace.best)
        .enumerate()
        .map(|(i, (v, b))| vec![i as f64, *v, *b])
        .collect();
    write_columns(path, &["step", "value", "best"], &rows)
}

/// Fixed-width histogram of `values` over `[0, max]` with `bins` bins.
pub fn histogram(values: &[f64], bins: usize) -> Vec<Vec<f64>> {
    let max = values.iter().copied().fold(0.0f64, f64::max);
    let width = if max > 0.0 { max / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for v in values {
        let b = ((v / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .iter()
        .enumerate()
        .map(|(i, &c)| vec![i as f64 * width, (i + 1) as f64 * width, c as f64])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_counts_everything() {
        let h = histogram(&[0.0, 0.1, 0.5, 1.0, 1.0], 4);
        assert_eq!(h.len(), 4);
        assert_eq!(h.iter().map(|r| r[2]).sum::<f64>(), 5.0);
        assert_eq!(h[3][2], 2.0);
        assert_eq!(h[3][1], 1.0);
    }

    #[test]
    fn report_renders_in_insertion_order() {
        let mut r = Report::new();
        r.put("b", 2);
        r.put("a", 1.5);
        assert_eq!(r.render(), "b 2\na 1.5\n");
    }
}
