//! Report bundles on disk: hash-stamped CSV tables, checkpoints and a JSON
//! manifest.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::runner::Bundle;

pub const HASH_PREFIX: &str = "# config_hash=";
pub const LOCK_FILE: &str = ".lock";
pub const PARTIAL_FILE: &str = "PARTIAL";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, header: Vec<String>) -> Self {
        Self {
            name: name.into(),
            header,
            rows: Vec::new(),
        }
    }

    pub fn with_header(name: &str, header: &[&str]) -> Self {
        Self::new(name, header.iter().map(|s| s.to_string()).collect())
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len(), "{}", self.name);
        self.rows.push(row);
    }

    /// CSV text preceded by the config-hash comment line.
    pub fn to_csv(&self, hash: &str) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let body = String::from_utf8(w.into_inner()?)?;
        Ok(format!("{HASH_PREFIX}{hash}\n{body}"))
    }
}

/// Reads a CSV written by [`Table::to_csv`], returning its hash and rows.
pub fn read_csv(path: &Path) -> Result<(Option<String>, Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let hash = text
        .lines()
        .next()
        .and_then(|l| l.strip_prefix(HASH_PREFIX))
        .map(str::to_string);
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header = r.headers()?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(String::from).collect()))
        .collect::<Result<_, _>>()?;
    Ok((hash, header, rows))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub config_hash: String,
    pub afa_version: String,
    pub tables: Vec<String>,
    pub checkpoints: Vec<String>,
    pub histories: Vec<String>,
    /// Seconds per run; the only non-reproducible field in the bundle.
    pub wall_seconds: Vec<(String, f64)>,
    pub total_wall_seconds: f64,
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => bail!(
                "{} is locked by another run (remove {} if that run is gone)",
                dir.display(),
                path.display()
            ),
            Err(e) => Err(e).with_context(|| format!("creating {}", path.display())),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn mark_partial(dir: &Path, hash: &str, note: &str) -> Result<()> {
    let mut f = File::create(dir.join(PARTIAL_FILE))?;
    writeln!(f, "{HASH_PREFIX}{hash}")?;
    writeln!(f, "{note}")?;
    Ok(())
}

pub fn clear_partial(dir: &Path) -> Result<()> {
    match fs::remove_file(dir.join(PARTIAL_FILE)) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e.into()),
        _ => Ok(()),
    }
}

/// Writes every table, history and checkpoint, then the manifest.
pub fn write_bundle(dir: &Path, name: &str, hash: &str, bundle: &Bundle, total_seconds: f64) -> Result<Manifest> {
    let mut tables = Vec::new();
    for t in &bundle.tables {
        let file = format!("{}.csv", t.name);
        fs::write(dir.join(&file), t.to_csv(hash)?)?;
        tables.push(file);
    }
    let mut histories = Vec::new();
    for (stem, csv) in &bundle.histories {
        let file = format!("{stem}.csv");
        fs::write(dir.join(&file), format!("{HASH_PREFIX}{hash}\n{csv}"))?;
        histories.push(file);
    }
    let mut checkpoints = Vec::new();
    if !bundle.checkpoints.is_empty() {
        fs::create_dir_all(dir.join("checkpoints"))?;
    }
    for (run, model) in &bundle.checkpoints {
        let file = format!("checkpoints/{run}.afa");
        afa_core::nn::save_checkpoint(model, dir.join(&file))?;
        checkpoints.push(file);
    }
    let manifest = Manifest {
        name: name.into(),
        config_hash: hash.into(),
        afa_version: env!("CARGO_PKG_VERSION").into(),
        tables,
        checkpoints,
        histories,
        wall_seconds: bundle.timings.clone(),
        total_wall_seconds: total_seconds,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let p = dir.join(MANIFEST_FILE);
    if dir.join(PARTIAL_FILE).exists() {
        bail!("{} holds a partial run; rerun it first", dir.display());
    }
    let bytes = fs::read(&p).with_context(|| format!("reading {}", p.display()))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn cell(s: &str) -> Value {
    if s.is_empty() {
        return Value::Null;
    }
    if let Ok(i) = s.parse::<i64>() {
        return Value::from(i);
    }
    match s.parse::<f64>() {
        Ok(f) if f.is_finite() => Value::from(f),
        _ => Value::from(s),
    }
}

/// All tables of a bundle as one JSON document.
pub fn bundle_json(dir: &Path) -> Result<Value> {
    let m = read_manifest(dir)?;
    let mut tables = Map::new();
    for file in &m.tables {
        let (_, header, rows) = read_csv(&dir.join(file))?;
        let rows: Vec<Value> = rows
            .iter()
            .map(|r| Value::Object(header.iter().zip(r).map(|(h, c)| (h.clone(), cell(c))).collect()))
            .collect();
        tables.insert(file.trim_end_matches(".csv").to_string(), Value::Array(rows));
    }
    let mut out = Map::new();
    out.insert("name".into(), Value::from(m.name.clone()));
    out.insert("config_hash".into(), Value::from(m.config_hash.clone()));
    out.insert("tables".into(), Value::Object(tables));
    Ok(Value::Object(out))
}

/// All tables of a bundle as consecutive CSV blocks, each headed by its name.
pub fn bundle_csv(dir: &Path) -> Result<String> {
    let m = read_manifest(dir)?;
    let mut out = format!("{HASH_PREFIX}{}\n", m.config_hash);
    for file in &m.tables {
        let text = fs::read_to_string(dir.join(file))?;
        out.push_str(&format!("# table={}\n", file.trim_end_matches(".csv")));
        out.extend(text.lines().filter(|l| !l.starts_with(HASH_PREFIX)).map(|l| format!("{l}\n")));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_keeps_hash_and_quoting() {
        let mut t = Table::with_header("x", &["a", "b"]);
        t.push(vec!["1".into(), "p;q,r".into()]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        fs::write(&p, t.to_csv("abcd").unwrap()).unwrap();
        let (hash, header, rows) = read_csv(&p).unwrap();
        assert_eq!(hash.as_deref(), Some("abcd"));
        assert_eq!(header, vec!["a", "b"]);
        assert_eq!(rows, vec![vec!["1".to_string(), "p;q,r".to_string()]]);
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = DirLock::acquire(dir.path()).unwrap();
        assert!(DirLock::acquire(dir.path()).unwrap_err().to_string().contains("locked"));
        drop(a);
        DirLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn cells_become_typed_json() {
        assert_eq!(cell(""), Value::Null);
        assert_eq!(cell("3"), Value::from(3));
        assert_eq!(cell("0.5"), Value::from(0.5));
        assert_eq!(cell("aligned"), Value::from("aligned"));
        assert_eq!(cell("inf"), Value::from("inf"));
    }
}
