//! Output directory: JSON with sorted keys, CSV with headers, `.dat` columns,
//! DOT graphs, and a manifest of SHA-256 hashes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// One pass/fail check; `value` is compared against `limit`.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub family: String,
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub pass: bool,
}

impl Check {
    /// Passes when `value <= limit`.
    pub fn at_most(family: &str, name: &str, value: f64, limit: f64) -> Self {
        Check { family: family.into(), name: name.into(), value, limit, pass: value <= limit }
    }

    /// A boolean condition, recorded as 1/0 against a limit of 1.
    pub fn flag(family: &str, name: &str, ok: bool) -> Self {
        Check { family: family.into(), name: name.into(), value: if ok { 1.0 } else { 0.0 }, limit: 1.0, pass: ok }
    }
}

#[derive(Serialize)]
struct ManifestEntry {
    path: String,
    sha256: String,
    bytes: usize,
}

#[derive(Serialize)]
struct Manifest {
    config_sha256: String,
    files: Vec<ManifestEntry>,
}

pub struct Artifacts {
    dir: PathBuf,
    files: Vec<(String, String, usize)>,
}

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io { path: path.display().to_string(), source: e }
}

/// `{}` on f64 prints the shortest string that parses back to the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

impl Artifacts {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        Ok(Artifacts { dir: dir.to_path_buf(), files: Vec::new() })
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| io(&path, e))?;
        self.files.retain(|f| f.0 != name);
        self.files.push((name.to_string(), sha256_hex(bytes), bytes.len()));
        Ok(())
    }

    /// Pretty JSON with object keys sorted.
    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let v = serde_json::to_value(value).map_err(|e| CliError::Serialize(e.to_string()))?;
        let mut text = serde_json::to_string_pretty(&v).map_err(|e| CliError::Serialize(e.to_string()))?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    /// CSV with a header row taken from the record fields.
    pub fn write_csv<T: Serialize>(&mut self, name: &str, rows: &[T], header: &[&str]) -> Result<(), CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if rows.is_empty() {
            w.write_record(header).map_err(|e| CliError::Serialize(e.to_string()))?;
        }
        for r in rows {
            w.serialize(r).map_err(|e| CliError::Serialize(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Serialize(e.to_string()))?;
        self.write_bytes(name, &bytes)
    }

    /// Whitespace-separated columns under a `#` header line.
    pub fn write_dat(&mut self, name: &str, columns: &[&str], rows: &[Vec<f64>]) -> Result<(), CliError> {
        let mut text = format!("# {}\n", columns.join(" "));
        for r in rows {
            text.push_str(&r.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(" "));
            text.push('\n');
        }
        self.write_bytes(name, text.as_bytes())
    }

    /// Writes `manifest.json` listing every other file, sorted by path.
    pub fn finish(mut self, config_sha256: &str) -> Result<PathBuf, CliError> {
        self.files.sort();
        let manifest = Manifest {
            config_sha256: config_sha256.to_string(),
            files: self.files.iter().map(|(p, h, n)| ManifestEntry { path: p.clone(), sha256: h.clone(), bytes: *n }).collect(),
        };
        let v = serde_json::to_value(&manifest).map_err(|e| CliError::Serialize(e.to_string()))?;
        let mut text = serde_json::to_string_pretty(&v).map_err(|e| CliError::Serialize(e.to_string()))?;
        text.push('\n');
        let path = self.dir.join("manifest.json");
        fs::write(&path, text).map_err(|e| io(&path, e))?;
        Ok(self.dir)
    }
}

/// Groups checks by family, in first-seen order.
pub fn families(checks: &[Check]) -> Vec<(String, Vec<Check>)> {
    let mut out: Vec<(String, Vec<Check>)> = Vec::new();
    for c in checks {
        match out.iter_mut().find(|(f, _)| *f == c.family) {
            Some((_, v)) => v.push(c.clone()),
            None => out.push((c.family.clone(), vec![c.clone()])),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, -1.0 / 3.0, 1e-300, 6.02e23, 0.0, -0.0] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }

    #[test]
    fn json_keys_are_sorted() {
        #[derive(Serialize)]
        struct S {
            zeta: u8,
            alpha: u8,
        }
        let dir = std::env::temp_dir().join(format!("lipdyn-art-{}", std::process::id()));
        let mut a = Artifacts::create(&dir).unwrap();
        a.write_json("s.json", &S { zeta: 1, alpha: 2 }).unwrap();
        let text = fs::read_to_string(dir.join("s.json")).unwrap();
        assert!(text.find("alpha").unwrap() < text.find("zeta").unwrap());
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn families_keep_first_seen_order() {
        let checks = [Check::flag("b", "x", true), Check::flag("a", "y", false), Check::flag("b", "z", true)];
        let f = families(&checks);
        assert_eq!(f.iter().map(|(n, c)| (n.as_str(), c.len())).collect::<Vec<_>>(), [("b", 2), ("a", 1)]);
    }

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }
}
