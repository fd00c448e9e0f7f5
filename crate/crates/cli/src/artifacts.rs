use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Provenance shared by every file of one run.
pub struct Run {
    pub command: &'static str,
    pub seed: u64,
    pub config_sha256: String,
    config: serde_json::Value,
    out: PathBuf,
    files: Vec<(String, Vec<u8>)>,
}

impl Run {
    /// Hash of the resolved config as compact JSON (field order is fixed by
    /// the config structs, so the hash is stable).
    pub fn new<C: Serialize>(command: &'static str, config: &C, seed: u64, out: &Path) -> Result<Self, CliError> {
        let config = serde_json::to_value(config).map_err(|e| CliError::Runtime(e.to_string()))?;
        let compact = serde_json::to_string(&config).map_err(|e| CliError::Runtime(e.to_string()))?;
        let digest = Sha256::digest(compact.as_bytes());
        let mut hex = String::with_capacity(64);
        for b in digest {
            write!(hex, "{b:02x}").unwrap();
        }
        Ok(Self { command, seed, config_sha256: hex, config, out: out.to_path_buf(), files: Vec::new() })
    }

    fn header(&self) -> String {
        format!("# config_sha256={}\n# seed={}\n", self.config_sha256, self.seed)
    }

    /// CSV with provenance comment lines ahead of the header row; `extra`
    /// adds further `# key=value` lines.
    pub fn csv(&mut self, name: &str, body: &str, extra: &[(&str, String)]) {
        let mut s = self.header();
        for (k, v) in extra {
            s.push_str(&format!("# {k}={v}\n"));
        }
        s.push_str(body);
        self.files.push((name.to_string(), s.into_bytes()));
    }

    /// JSON object with `config_sha256` and `seed` merged in.
    pub fn json(&mut self, name: &str, mut value: serde_json::Value) -> Result<(), CliError> {
        match value.as_object_mut() {
            Some(obj) => {
                obj.insert("config_sha256".into(), self.config_sha256.clone().into());
                obj.insert("seed".into(), self.seed.into());
            }
            None => return Err(CliError::Runtime(format!("{name}: report is not a JSON object"))),
        }
        let text = serde_json::to_string_pretty(&value).map_err(|e| CliError::Runtime(e.to_string()))?;
        self.files.push((name.to_string(), format!("{text}\n").into_bytes()));
        Ok(())
    }

    pub fn bytes(&mut self, name: &str, data: Vec<u8>) {
        self.files.push((name.to_string(), data));
    }

    /// Everything is buffered until the run succeeds, so a failed run
    /// leaves no partial artifacts behind.
    pub fn finish(mut self) -> Result<Vec<PathBuf>, CliError> {
        let manifest = serde_json::json!({
            "command": self.command,
            "config": self.config,
            "files": self.files.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>(),
        });
        self.json("run.json", manifest)?;
        fs::create_dir_all(&self.out).map_err(|e| CliError::Runtime(format!("{}: {e}", self.out.display())))?;
        let mut written = Vec::new();
        for (name, data) in &self.files {
            let p = self.out.join(name);
            fs::write(&p, data).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
            written.push(p);
        }
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Cfg {
        a: u32,
        b: &'static str,
    }

    #[test]
    fn hash_depends_on_config_only() {
        let out = Path::new("/nonexistent");
        let x = Run::new("t", &Cfg { a: 1, b: "x" }, 3, out).unwrap();
        let y = Run::new("u", &Cfg { a: 1, b: "x" }, 9, out).unwrap();
        let z = Run::new("t", &Cfg { a: 2, b: "x" }, 3, out).unwrap();
        assert_eq!(x.config_sha256, y.config_sha256);
        assert_ne!(x.config_sha256, z.config_sha256);
        assert_eq!(x.config_sha256.len(), 64);
    }

    #[test]
    fn csv_header_lines_precede_body() {
        let mut r = Run::new("t", &Cfg { a: 1, b: "x" }, 3, Path::new("o")).unwrap();
        r.csv("f.csv", "a,b\n1,2\n", &[("slope", "2.5".into())]);
        let text = String::from_utf8(r.files[0].1.clone()).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert!(lines[0].starts_with("# config_sha256="));
        assert_eq!(&lines[1..], ["# seed=3", "# slope=2.5", "a,b", "1,2"]);
    }

    #[test]
    fn json_requires_an_object() {
        let mut r = Run::new("t", &Cfg { a: 1, b: "x" }, 3, Path::new("o")).unwrap();
        assert!(r.json("x.json", serde_json::json!([1, 2])).is_err());
        r.json("y.json", serde_json::json!({"k": 1})).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&r.files[0].1).unwrap();
        assert_eq!(v["seed"], 3);
        assert_eq!(v["k"], 1);
    }
}
