//! Buffered artifacts: nothing touches the disk until the run has succeeded.

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::Path;

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(Sha256::digest(bytes).as_slice())
}

#[derive(Default)]
pub struct Outputs {
    files: Vec<(String, Vec<u8>)>,
}

/// Plot stub for a generic plotting tool (gnuplot syntax).
fn plot_stub(csv_name: &str, header: &str) -> String {
    let cols: Vec<&str> = header.split(',').collect();
    let mut s = format!("# columns: {}\nset datafile separator ','\nset key autotitle columnhead\n", cols.join(" "));
    let y = if cols.len() > 1 { 2 } else { 1 };
    s.push_str(&format!("plot '{csv_name}' using 1:{y} with linespoints\n"));
    s
}

impl Outputs {
    /// Adds a CSV (header first, LF endings) and its plot stub.
    pub fn csv(&mut self, name: &str, content: String) {
        debug_assert!(!content.contains('\r'));
        let header = content.lines().next().unwrap_or("").to_string();
        let stem = name.trim_end_matches(".csv");
        self.files.push((format!("{stem}.gp"), plot_stub(name, &header).into_bytes()));
        self.files.push((name.to_string(), content.into_bytes()));
    }

    /// Builds a CSV from a header and rows with the `csv` writer.
    pub fn table<I, R>(&mut self, name: &str, header: &[&str], rows: I) -> Result<()>
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator<Item = String>,
    {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().context("flushing CSV")?;
        self.csv(name, String::from_utf8(bytes)?);
        Ok(())
    }

    pub fn json<S: Serialize>(&mut self, name: &str, value: &S) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.files.push((name.to_string(), bytes));
        Ok(())
    }

    /// Writes every file and a manifest listing each with its digest.
    pub fn commit(mut self, dir: &Path, manifest: serde_json::Value) -> Result<Vec<String>> {
        self.files.sort_by(|a, b| a.0.cmp(&b.0));
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut listed = Vec::new();
        for (name, bytes) in &self.files {
            std::fs::write(dir.join(name), bytes).with_context(|| format!("writing {name}"))?;
            listed.push(serde_json::json!({ "name": name, "bytes": bytes.len(), "sha256": sha256_hex(bytes) }));
        }
        let mut m = manifest;
        m["files"] = serde_json::Value::Array(listed);
        let mut bytes = serde_json::to_vec_pretty(&m)?;
        bytes.push(b'\n');
        std::fs::write(dir.join("manifest.json"), bytes).context("writing manifest.json")?;
        let mut names: Vec<String> = self.files.into_iter().map(|f| f.0).collect();
        names.push("manifest.json".into());
        Ok(names)
    }
}

/// Formats a float for CSV output.
pub fn f(x: f64) -> String {
    format!("{x:e}")
}
