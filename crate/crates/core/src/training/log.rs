use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub step: u64,
    pub name: String,
    pub value: f64,
}

impl MetricRecord {
    /// `step<TAB>name<TAB>value`; values print in shortest round-trip form.
    pub fn to_line(&self) -> String {
        format!("{}\t{}\t{}", self.step, self.name, self.value)
    }

    pub fn parse_line(line: &str) -> Option<Self> {
        let mut parts = line.split('\t');
        let step = parts.next()?.parse().ok()?;
        let name = parts.next()?.to_string();
        let value = parts.next()?.parse().ok()?;
        parts.next().is_none().then_some(MetricRecord { step, name, value })
    }
}

/// Line-oriented metrics, kept in memory and optionally appended to a file.
#[derive(Debug, Default)]
pub struct MetricsLog {
    records: Vec<MetricRecord>,
    sink: Option<(PathBuf, BufWriter<File>)>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Appends to `path`, creating it if needed.
    pub fn append_to(path: &Path) -> Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog { records: Vec::new(), sink: Some((path.to_path_buf(), BufWriter::new(f))) })
    }

    pub fn record(&mut self, step: u64, name: &str, value: f64) -> Result<()> {
        let r = MetricRecord { step, name: name.to_string(), value };
        if let Some((path, w)) = &mut self.sink {
            writeln!(w, "{}", r.to_line()).map_err(|e| Error::io(path.clone(), e))?;
        }
        self.records.push(r);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some((path, w)) = &mut self.sink {
            w.flush().map_err(|e| Error::io(path.clone(), e))?;
        }
        Ok(())
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn values(&self, name: &str) -> Vec<f64> {
        self.records.iter().filter(|r| r.name == name).map(|r| r.value).collect()
    }

    pub fn read_file(path: &Path) -> Result<Vec<MetricRecord>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| MetricRecord::parse_line(l).ok_or_else(|| Error::format(path, format!("bad metrics line {}", i + 1))))
            .collect()
    }
}

impl Drop for MetricsLog {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}
