//! Metrics persistence: append-only self-describing records, a fixed
//! CSV export, and multi-run curve merging for plotting.
//!
//! Record lines look like `env_steps=1024 train_return=0.5 ...`. Every
//! f64 is printed with Rust's shortest-roundtrip formatting, so a file
//! read back yields bit-identical values and identical runs yield
//! byte-identical files.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// One record: env_steps plus named values. Wall-clock time is kept
/// in memory for reporting but never written to the metrics file,
/// which must be deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub env_steps: u64,
    pub wall_time_s: f64,
    pub fields: Vec<(String, f64)>,
}

impl MetricsRecord {
    pub fn new(env_steps: u64) -> MetricsRecord {
        MetricsRecord {
            env_steps,
            wall_time_s: 0.0,
            fields: Vec::new(),
        }
    }

    pub fn push(&mut self, key: &str, value: f64) -> &mut Self {
        self.fields.push((key.to_string(), value));
        self
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    fn to_line(&self) -> String {
        let mut s = format!("env_steps={}", self.env_steps);
        for (k, v) in &self.fields {
            s.push(' ');
            s.push_str(k);
            s.push('=');
            s.push_str(&format_f64(*v));
        }
        s
    }
}

/// Shortest decimal that round-trips the exact f64.
fn format_f64(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 && v.is_finite() {
        // Keep integers readable but unambiguous as floats.
        format!("{v:.1}")
    } else {
        format!("{v}")
    }
}

/// Fixed CSV column order; documented in the export header.
pub const CSV_COLUMNS: &[&str] = &[
    "env_steps",
    "train_return",
    "eval_return",
    "eval_stderr",
    "success_rate",
    "loss_total",
    "loss_pg",
    "loss_baseline",
    "loss_entropy",
    "loss_aux",
    "loss_aux_rp",
    "loss_aux_rq",
    "loss_aux_pq",
    "grad_norm",
];

/// Append-only writer enforcing nondecreasing env_steps.
pub struct MetricsWriter {
    out: BufWriter<File>,
    last_env_steps: Option<u64>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<MetricsWriter> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "# metrics: one record per line, key=value pairs")?;
        out.flush()?;
        Ok(MetricsWriter {
            out,
            last_env_steps: None,
        })
    }

    /// Reopen for appending; `last_env_steps` restores the
    /// monotonicity check from the existing contents.
    pub fn append(path: &Path) -> Result<MetricsWriter> {
        let existing = read_metrics(path)?;
        let last_env_steps = existing.last().map(|r| r.env_steps);
        let out = BufWriter::new(OpenOptions::new().append(true).open(path)?);
        Ok(MetricsWriter {
            out,
            last_env_steps,
        })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        if let Some(last) = self.last_env_steps {
            if record.env_steps < last {
                return Err(Error::Domain {
                    op: "metrics",
                    msg: format!(
                        "env_steps must be nondecreasing: {} after {}",
                        record.env_steps, last
                    ),
                });
            }
        }
        self.last_env_steps = Some(record.env_steps);
        writeln!(self.out, "{}", record.to_line())?;
        self.out.flush()?;
        Ok(())
    }
}

/// Parse a metrics file back into records. Comment lines start `#`.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut env_steps: Option<u64> = None;
        let mut fields = Vec::new();
        for pair in line.split_whitespace() {
            let Some((k, v)) = pair.split_once('=') else {
                return Err(Error::Domain {
                    op: "metrics",
                    msg: format!("line {}: malformed pair `{pair}`", idx + 1),
                });
            };
            if k == "env_steps" {
                env_steps = Some(v.parse().map_err(|_| Error::Domain {
                    op: "metrics",
                    msg: format!("line {}: bad env_steps `{v}`", idx + 1),
                })?);
            } else {
                let value: f64 = v.parse().map_err(|_| Error::Domain {
                    op: "metrics",
                    msg: format!("line {}: bad value `{v}` for {k}", idx + 1),
                })?;
                fields.push((k.to_string(), value));
            }
        }
        let Some(env_steps) = env_steps else {
            return Err(Error::Domain {
                op: "metrics",
                msg: format!("line {}: record missing env_steps", idx + 1),
            });
        };
        records.push(MetricsRecord {
            env_steps,
            wall_time_s: 0.0,
            fields,
        });
    }
    Ok(records)
}

/// Write the fixed-column CSV; cells for absent keys stay empty.
pub fn export_csv(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{}", CSV_COLUMNS.join(","))?;
    for r in records {
        let mut cells: Vec<String> = Vec::with_capacity(CSV_COLUMNS.len());
        for col in CSV_COLUMNS {
            if *col == "env_steps" {
                cells.push(r.env_steps.to_string());
            } else {
                cells.push(r.get(col).map(format_f64).unwrap_or_default());
            }
        }
        writeln!(out, "{}", cells.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// One run's curve: (env_steps, value) for records containing `key`.
pub fn extract_curve(records: &[MetricsRecord], key: &str) -> Vec<(u64, f64)> {
    records
        .iter()
        .filter_map(|r| r.get(key).map(|v| (r.env_steps, v)))
        .collect()
}

/// Merge several runs onto the union of their step grids; values are
/// linearly interpolated inside each run's range and empty outside it.
/// Returns (grid, per-run columns aligned to the grid).
pub fn merge_curves(curves: &[Vec<(u64, f64)>]) -> (Vec<u64>, Vec<Vec<Option<f64>>>) {
    let mut grid: Vec<u64> = curves.iter().flatten().map(|(s, _)| *s).collect();
    grid.sort_unstable();
    grid.dedup();

    let columns = curves
        .iter()
        .map(|curve| grid.iter().map(|s| interpolate(curve, *s)).collect())
        .collect();
    (grid, columns)
}

/// Linear interpolation inside the curve's domain; None outside.
/// Curves are assumed sorted by step (metrics files guarantee it).
fn interpolate(curve: &[(u64, f64)], step: u64) -> Option<f64> {
    if curve.is_empty() {
        return None;
    }
    let (first, last) = (curve[0].0, curve[curve.len() - 1].0);
    if step < first || step > last {
        return None;
    }
    match curve.binary_search_by_key(&step, |(s, _)| *s) {
        Ok(i) => Some(curve[i].1),
        Err(i) => {
            let (x0, y0) = curve[i - 1];
            let (x1, y1) = curve[i];
            let w = (step - x0) as f64 / (x1 - x0) as f64;
            Some(y0 + w * (y1 - y0))
        }
    }
}

/// CSV for merged curves: env_steps plus one named column per run.
pub fn write_merged_csv(
    path: &Path,
    names: &[String],
    grid: &[u64],
    columns: &[Vec<Option<f64>>],
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "env_steps,{}", names.join(","))?;
    for (i, step) in grid.iter().enumerate() {
        let mut row = step.to_string();
        for col in columns {
            row.push(',');
            if let Some(v) = col[i] {
                row.push_str(&format_f64(v));
            }
        }
        writeln!(out, "{row}")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn rec(steps: u64, fields: &[(&str, f64)]) -> MetricsRecord {
        let mut r = MetricsRecord::new(steps);
        for (k, v) in fields {
            r.push(k, *v);
        }
        r
    }

    #[test]
    fn write_read_roundtrip_is_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("metrics.txt");
        let records = vec![
            rec(0, &[("train_return", -0.125), ("grad_norm", 3.0000000000000004)]),
            rec(1024, &[("train_return", 1.0 / 3.0), ("eval_return", 0.99)]),
        ];
        let mut w = MetricsWriter::create(&path).unwrap();
        for r in &records {
            w.write(r).unwrap();
        }
        drop(w);
        let back = read_metrics(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in records.iter().zip(&back) {
            assert_eq!(a.env_steps, b.env_steps);
            for (k, v) in &a.fields {
                assert_eq!(v.to_bits(), b.get(k).unwrap().to_bits(), "{k}");
            }
        }
    }

    #[test]
    fn identical_record_sequences_give_byte_identical_files() {
        let dir = tempdir().unwrap();
        let write = |name: &str| {
            let path = dir.path().join(name);
            let mut w = MetricsWriter::create(&path).unwrap();
            for i in 0..5u64 {
                w.write(&rec(i * 100, &[("train_return", (i as f64).sin())]))
                    .unwrap();
            }
            std::fs::read(&path).unwrap()
        };
        assert_eq!(write("a.txt"), write("b.txt"));
    }

    #[test]
    fn env_steps_must_not_decrease() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("metrics.txt");
        let mut w = MetricsWriter::create(&path).unwrap();
        w.write(&rec(100, &[])).unwrap();
        w.write(&rec(100, &[])).unwrap();
        assert!(w.write(&rec(99, &[])).is_err());
    }

    #[test]
    fn append_restores_monotonicity_guard() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("metrics.txt");
        let mut w = MetricsWriter::create(&path).unwrap();
        w.write(&rec(500, &[])).unwrap();
        drop(w);
        let mut w = MetricsWriter::append(&path).unwrap();
        assert!(w.write(&rec(400, &[])).is_err());
        w.write(&rec(600, &[])).unwrap();
        drop(w);
        assert_eq!(read_metrics(&path).unwrap().len(), 2);
    }

    #[test]
    fn csv_export_has_fixed_columns_and_blank_gaps() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let records = vec![
            rec(0, &[("train_return", 0.5)]),
            rec(50, &[("train_return", 0.25), ("eval_return", 1.0)]),
        ];
        export_csv(&records, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CSV_COLUMNS.join(","));
        assert!(lines[1].starts_with("0,0.5,,"));
        assert!(lines[2].starts_with("50,0.25,1.0,"));
    }

    #[test]
    fn interpolation_matches_hand_computation() {
        // Runs with disjoint grids; check union grid and midpoints.
        let a = vec![(0u64, 0.0), (100, 1.0)];
        let b = vec![(50u64, 5.0), (150, 7.0)];
        let (grid, cols) = merge_curves(&[a, b]);
        assert_eq!(grid, vec![0, 50, 100, 150]);
        // Run a at 50: halfway between 0.0 and 1.0.
        assert_eq!(cols[0][1], Some(0.5));
        // Run a outside its range.
        assert_eq!(cols[0][3], None);
        // Run b at 100: halfway between 5.0 and 7.0.
        assert_eq!(cols[1][2], Some(6.0));
        assert_eq!(cols[1][0], None);
        // Shared exact points pass through untouched.
        assert_eq!(cols[0][0], Some(0.0));
        assert_eq!(cols[1][1], Some(5.0));
    }

    #[test]
    fn single_run_merge_is_identity() {
        let a = vec![(0u64, 1.5), (10, 2.5), (20, 3.5)];
        let (grid, cols) = merge_curves(&[a.clone()]);
        assert_eq!(grid, vec![0, 10, 20]);
        for (i, (_, v)) in a.iter().enumerate() {
            assert_eq!(cols[0][i], Some(*v));
        }
    }
}
