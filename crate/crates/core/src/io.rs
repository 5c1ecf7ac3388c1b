//! JSON and JSON-lines helpers with path context on every error.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CklError, Result};

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CklError::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| CklError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| CklError::json(path, e))?;
        w.write_all(b"\n").map_err(|e| CklError::io(path, e))?;
    }
    w.flush().map_err(|e| CklError::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| CklError::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| CklError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CklError::json(path, e))?);
    }
    Ok(out)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CklError::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CklError::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CklError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CklError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CklError::json(path, e))
}
