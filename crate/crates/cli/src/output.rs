//! Artifact writers. Every JSON file carries a `provenance` object and every
//! CSV starts with `#` comment lines holding the same record.

use anyhow::{Context, Result};
use deud::model::Provenance;
use serde::Serialize;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

fn header_lines(prov: &Provenance) -> String {
    let mut s = format!("# tool_version: {}\n", prov.tool_version);
    match prov.seed {
        Some(seed) => s.push_str(&format!("# seed: {seed}\n")),
        None => s.push_str("# seed: none\n"),
    }
    s.push_str(&format!(
        "# config_hash: {}\n",
        prov.config_hash.as_deref().unwrap_or("none")
    ));
    s
}

/// CSV file with provenance comments above the column header.
pub struct CsvOut {
    path: PathBuf,
    writer: csv::Writer<BufWriter<File>>,
}

impl CsvOut {
    pub fn create(path: &Path, prov: &Provenance, columns: &[&str]) -> Result<Self> {
        let file =
            File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
        let mut buf = BufWriter::new(file);
        buf.write_all(header_lines(prov).as_bytes())?;
        let mut writer = csv::Writer::from_writer(buf);
        writer.write_record(columns)?;
        Ok(Self {
            path: path.to_path_buf(),
            writer,
        })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer
            .write_record(fields)
            .with_context(|| format!("cannot write {}", self.path.display()))
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}

/// Shortest round-tripping representation, `NaN` for missing values.
pub fn num(v: f64) -> String {
    format!("{v:e}")
}
