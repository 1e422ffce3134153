use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::Context;
use crate::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub version: &'static str,
}

/// Single-writer artifact sink; every file carries the provenance block.
pub struct Artifacts {
    dir: PathBuf,
    pub provenance: Provenance,
}

fn io(e: std::io::Error) -> CliError {
    CliError::Internal(e.to_string())
}

impl Artifacts {
    pub fn new(ctx: &Context) -> Result<Self, CliError> {
        std::fs::create_dir_all(&ctx.out_dir).map_err(io)?;
        Ok(Self {
            dir: ctx.out_dir.clone(),
            provenance: Provenance {
                config_hash: ctx.config_hash.clone(),
                seed: ctx.seed,
                version: env!("CARGO_PKG_VERSION"),
            },
        })
    }

    /// Writes `value` with a `provenance` entry added and returns the stored document.
    pub fn json(&self, name: &str, value: Value) -> Result<Value, CliError> {
        let mut doc = match value {
            Value::Object(m) => Value::Object(m),
            other => json!({ "value": other }),
        };
        doc["provenance"] = serde_json::to_value(&self.provenance).expect("provenance serializes");
        let text = serde_json::to_string_pretty(&doc).expect("json serializes");
        std::fs::write(self.dir.join(name), text + "\n").map_err(io)?;
        Ok(doc)
    }

    /// Opens a CSV file whose first line is a `#` comment holding the provenance.
    pub fn csv(&self, name: &str) -> Result<BufWriter<File>, CliError> {
        let mut w = BufWriter::new(File::create(self.dir.join(name)).map_err(io)?);
        let p = &self.provenance;
        writeln!(w, "# config_hash={} seed={} version={}", p.config_hash, p.seed, p.version).map_err(io)?;
        Ok(w)
    }

    pub fn csv_rows(&self, name: &str, header: &[&str], rows: &[Vec<f64>]) -> Result<(), CliError> {
        let mut w = self.csv(name)?;
        writeln!(w, "{}", header.join(",")).map_err(io)?;
        for r in rows {
            let cells: Vec<String> = r.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", cells.join(",")).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}
