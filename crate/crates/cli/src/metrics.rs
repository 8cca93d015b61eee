//! Append-only CSV metric log.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use speechtext::{Error, Result};

pub struct MetricsLog {
    path: PathBuf,
    writer: csv::Writer<File>,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => Error::Parse(format!("{}: {other:?}", path.display())),
    }
}

impl MetricsLog {
    /// Opens `path` for appending. A fresh run refuses a non-empty file; a
    /// resumed run requires the same header.
    pub fn open(path: &Path, header: &[String], resume: bool) -> Result<Self> {
        let existing = match fs::metadata(path) {
            Ok(m) if m.len() > 0 => {
                let f = File::open(path).map_err(|e| Error::Io {
                    path: path.to_path_buf(),
                    source: e,
                })?;
                let mut first = String::new();
                BufReader::new(f).read_line(&mut first).map_err(|e| Error::Io {
                    path: path.to_path_buf(),
                    source: e,
                })?;
                Some(first.trim_end().to_string())
            }
            _ => None,
        };
        if let Some(first) = &existing {
            if !resume {
                return Err(Error::Config(format!(
                    "{} already has rows; use --resume or a fresh --out",
                    path.display()
                )));
            }
            if *first != header.join(",") {
                return Err(Error::Config(format!("{}: header {first:?} does not match", path.display())));
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
        let mut log = Self {
            path: path.to_path_buf(),
            writer: csv::Writer::from_writer(file),
        };
        if existing.is_none() {
            log.row(header.to_vec())?;
        }
        Ok(log)
    }

    pub fn row(&mut self, fields: Vec<String>) -> Result<()> {
        self.writer.write_record(&fields).map_err(|e| csv_err(&self.path, e))?;
        self.writer.flush().map_err(|e| Error::Io {
            path: self.path.clone(),
            source: e,
        })
    }
}
