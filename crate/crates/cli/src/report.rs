//! Report emission: a timestamp header line followed by a deterministic
//! body, to stdout or a file under --out.

use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Text,
}

impl Format {
    pub fn extension(&self) -> &'static str {
        match self {
            Format::Json => "json",
            Format::Csv => "csv",
            Format::Text => "txt",
        }
    }
}

/// Reruns with identical inputs must produce byte-identical bodies, so the
/// only volatile content is this single header line.
pub fn header() -> String {
    format!("# teamring report generated_at={}\n", chrono::Utc::now().to_rfc3339())
}

pub struct Sink {
    out_dir: Option<PathBuf>,
}

impl Sink {
    pub fn new(out_dir: Option<&Path>) -> Result<Self, String> {
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)
                .map_err(|e| format!("cannot create output dir {}: {}", dir.display(), e))?;
        }
        Ok(Sink {
            out_dir: out_dir.map(|p| p.to_path_buf()),
        })
    }

    /// Writes header + body to `<out>/<name>.<ext>` or stdout.
    pub fn write(&self, name: &str, format: Format, body: &str) -> Result<(), String> {
        let content = format!("{}{}", header(), body);
        match &self.out_dir {
            Some(dir) => {
                let path = dir.join(format!("{}.{}", name, format.extension()));
                std::fs::write(&path, content)
                    .map_err(|e| format!("cannot write {}: {}", path.display(), e))
            }
            None => {
                let mut stdout = std::io::stdout().lock();
                stdout
                    .write_all(content.as_bytes())
                    .map_err(|e| format!("stdout write failed: {}", e))
            }
        }
    }
}

/// Renders aligned `key value` rows for the text format.
pub fn kv_block(rows: &[(String, String)]) -> String {
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    rows.iter()
        .map(|(k, v)| format!("{:width$}  {}\n", k, v, width = width))
        .collect()
}

pub fn gib(bytes: u64) -> f64 {
    bytes as f64 / (1024.0 * 1024.0 * 1024.0)
}
