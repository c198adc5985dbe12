//! Line-buffered CSV metrics log, one row per logged step.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub struct MetricsLogger {
    out: BufWriter<File>,
    columns: usize,
    last_step: Option<u64>,
}

impl MetricsLogger {
    /// Opens the file and writes the header. The first column is always
    /// `step` and the last is `wall_seconds`.
    pub fn create<P: AsRef<Path>>(path: P, value_columns: &[&str]) -> Result<Self> {
        let file = File::create(path.as_ref())?;
        let mut out = BufWriter::new(file);
        let mut header = String::from("step");
        for c in value_columns {
            header.push(',');
            header.push_str(c);
        }
        header.push_str(",wall_seconds\n");
        out.write_all(header.as_bytes())?;
        out.flush()?;
        Ok(MetricsLogger {
            out,
            columns: value_columns.len(),
            last_step: None,
        })
    }

    /// Appends one row and flushes. Steps must be strictly increasing.
    pub fn log(&mut self, step: u64, values: &[f64], wall_seconds: f64) -> Result<()> {
        assert_eq!(values.len(), self.columns, "metrics row width mismatch");
        if let Some(prev) = self.last_step {
            assert!(step > prev, "metrics steps must increase: {prev} then {step}");
        }
        self.last_step = Some(step);
        let mut row = step.to_string();
        for v in values {
            row.push(',');
            row.push_str(&format_value(*v));
        }
        row.push(',');
        row.push_str(&format_value(wall_seconds));
        row.push('\n');
        self.out.write_all(row.as_bytes())?;
        self.out.flush()?;
        Ok(())
    }
}

fn format_value(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.9}")
    }
}

/// Strip the wall-clock column so two logs of the same run can be compared.
pub fn without_wall_column(csv: &str) -> String {
    csv.lines()
        .map(|line| match line.rfind(',') {
            Some(i) => &line[..i],
            None => line,
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Parse one named column from a metrics CSV.
pub fn read_column(csv: &str, name: &str) -> Result<Vec<f64>> {
    let mut lines = csv.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Config("empty metrics file".into()))?;
    let idx = header
        .split(',')
        .position(|c| c == name)
        .ok_or_else(|| Error::Config(format!("no column {name:?} in metrics header")))?;
    let mut out = Vec::new();
    for line in lines {
        let field = line
            .split(',')
            .nth(idx)
            .ok_or_else(|| Error::Config("short metrics row".into()))?;
        out.push(
            field
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("bad metrics value {field:?}: {e}")))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_and_header_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut log = MetricsLogger::create(&path, &["lr", "loss"]).unwrap();
        log.log(1, &[0.1, 2.0], 0.5).unwrap();
        log.log(2, &[0.2, 1.5], 1.0).unwrap();
        log.log(5, &[0.3, 1.0], 1.5).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("step,lr,loss,wall_seconds\n"));
        let losses = read_column(&text, "loss").unwrap();
        assert_eq!(losses, vec![2.0, 1.5, 1.0]);
    }

    #[test]
    #[should_panic]
    fn non_monotone_steps_panic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut log = MetricsLogger::create(&path, &["loss"]).unwrap();
        log.log(2, &[1.0], 0.0).unwrap();
        log.log(2, &[1.0], 0.0).unwrap();
    }

    #[test]
    fn wall_column_strips_cleanly() {
        let csv = "step,loss,wall_seconds\n1,2.0,0.11\n2,1.0,0.22";
        let stripped = without_wall_column(csv);
        assert_eq!(stripped, "step,loss\n1,2.0\n2,1.0");
    }
}
