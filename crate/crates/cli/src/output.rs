//! Artifact writers. Every file carries the config hash and base seed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub command: &'static str,
    pub config_hash: String,
    pub seed: u64,
}

pub struct Writer {
    dir: PathBuf,
    provenance: Provenance,
    written: Vec<PathBuf>,
}

impl Writer {
    pub fn new(dir: &Path, provenance: Provenance) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            provenance,
            written: Vec::new(),
        })
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    /// Writes `body` (a JSON object) with a `provenance` member added.
    pub fn json(&mut self, name: &str, body: Value) -> Result<PathBuf, CliError> {
        let mut body = body;
        match body.as_object_mut() {
            Some(obj) => {
                obj.insert("provenance".into(), json!(self.provenance));
            }
            None => body = json!({ "data": body, "provenance": self.provenance }),
        }
        let text = serde_json::to_string_pretty(&body).map_err(|e| CliError::Io(e.to_string()))?;
        self.put(name, text + "\n")
    }

    /// Writes serialisable rows as CSV, appending `config_hash` and `seed`
    /// columns.
    pub fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<PathBuf, CliError> {
        let mut out = csv::Writer::from_writer(Vec::new());
        let mut header_done = false;
        for row in rows {
            let value = serde_json::to_value(row).map_err(|e| CliError::Io(e.to_string()))?;
            let Value::Object(obj) = value else {
                return Err(CliError::Io("CSV rows must be records".into()));
            };
            if !header_done {
                let mut header: Vec<String> = obj.keys().cloned().collect();
                header.extend(["config_hash".into(), "seed".into()]);
                out.write_record(&header).map_err(csv_err)?;
                header_done = true;
            }
            let mut fields: Vec<String> = obj.values().map(cell).collect();
            fields.push(self.provenance.config_hash.clone());
            fields.push(self.provenance.seed.to_string());
            out.write_record(&fields).map_err(csv_err)?;
        }
        let bytes = out.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
        self.put(name, String::from_utf8(bytes).expect("CSV is UTF-8"))
    }

    fn put(&mut self, name: &str, text: String) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        log::info!("wrote {}", path.display());
        self.written.push(path.clone());
        Ok(path)
    }
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Io(e.to_string())
}

fn cell(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}
