//! `run_record.json`: what was run, with which settings, and what it wrote.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Result;
use depthuq::io;
use serde::Serialize;

pub const RECORD_FILE: &str = "run_record.json";

#[derive(Serialize)]
pub struct OutputHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Serialize)]
pub struct RunRecord {
    pub version: &'static str,
    pub command_line: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub outputs: Vec<OutputHash>,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

impl RunRecord {
    pub fn start<T: Serialize>(argv: &[String], config: &T, seeds: Vec<u64>) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION"),
            command_line: argv.to_vec(),
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            seeds,
            started_unix_ms: now_ms(),
            finished_unix_ms: 0,
            outputs: Vec::new(),
        }
    }

    /// Hashes files given relative to `root`.
    pub fn add_outputs<'a>(&mut self, root: &Path, rel: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for p in rel {
            self.outputs.push(OutputHash {
                path: p.to_string(),
                sha256: io::hash_file(&root.join(p))?,
            });
        }
        Ok(())
    }

    pub fn finish(mut self, root: &Path) -> Result<()> {
        self.finished_unix_ms = now_ms();
        self.outputs.sort_by(|a, b| a.path.cmp(&b.path));
        self.outputs.dedup_by(|a, b| a.path == b.path);
        io::write_json(&root.join(RECORD_FILE), &self)?;
        Ok(())
    }
}
