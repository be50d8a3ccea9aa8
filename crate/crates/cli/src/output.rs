//! JSON documents and CSV tables. Both carry the tool version and the
//! resolved configuration; CSV does so in leading `#` comment lines.

use std::fs::File;
use std::io::{self, BufWriter, Write};

use serde::Serialize;

use crate::opts::{Format, Resolved};
use crate::CliError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Serialize)]
struct Document<'a, T> {
    tool: &'static str,
    version: &'static str,
    config: &'a Resolved,
    result: T,
}

fn sink(cfg: &Resolved) -> Result<Box<dyn Write>, CliError> {
    Ok(match &cfg.out {
        Some(path) => Box::new(BufWriter::new(File::create(path).map_err(|e| {
            CliError::validation("io", format!("out: {}: {e}", path.display()))
        })?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

/// Writes `result` as JSON, or `rows` as CSV when the CSV format is selected.
pub fn emit<T: Serialize, R: Serialize>(cfg: &Resolved, result: &T, rows: &[R]) -> Result<(), CliError> {
    let mut w = sink(cfg)?;
    match cfg.format {
        Format::Json => {
            let doc = Document {
                tool: "rwrp",
                version: VERSION,
                config: cfg,
                result,
            };
            serde_json::to_writer_pretty(&mut w, &doc).map_err(io::Error::from)?;
            writeln!(w)?;
        }
        Format::Csv => {
            writeln!(w, "# rwrp {VERSION} {}", cfg.command)?;
            writeln!(w, "# config {}", serde_json::to_string(cfg).map_err(io::Error::from)?)?;
            let mut csv = csv::Writer::from_writer(&mut w);
            for row in rows {
                csv.serialize(row).map_err(|e| CliError::validation("io", e.to_string()))?;
            }
            csv.flush()?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Coordinates as a space-separated string, e.g. `1 0`.
pub fn coords<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}
