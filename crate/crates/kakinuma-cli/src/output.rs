use std::fs;
use std::path::{Path, PathBuf};

use kakinuma::format::fmt_g17;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

/// SHA-256 over `"blob <len>\0" + content`, hex encoded.
pub fn config_hash(content: &str) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Collects the files of one run and writes the manifest last.
pub struct RunWriter {
    dir: PathBuf,
    command: &'static str,
    hash: String,
    files: Vec<String>,
}

impl RunWriter {
    pub fn new(dir: &Path, command: &'static str, hash: String) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(RunWriter { dir: dir.to_path_buf(), command, hash, files: Vec::new() })
    }

    /// Metadata lines common to every CSV of this run.
    pub fn metadata(&self, cfg: &RunConfig, extra: &[(&str, String)]) -> Vec<(String, String)> {
        let mut m = vec![
            ("config_hash".to_string(), self.hash.clone()),
            ("command".to_string(), self.command.to_string()),
            ("N".to_string(), cfg.n.to_string()),
            ("case".to_string(), format!("{:?}", cfg.case)),
            ("M".to_string(), cfg.m.to_string()),
        ];
        m.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
        m
    }

    pub fn write(&mut self, name: &str, content: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, content).map_err(|e| CliError::io(&path, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, mut value: Value) -> Result<(), CliError> {
        if let Value::Object(map) = &mut value {
            map.insert("config_hash".into(), Value::String(self.hash.clone()));
        }
        self.write(name, &pretty(&value))
    }

    /// Writes `manifest.json`: config echo, grid, spec, hash, outputs and status.
    pub fn finish(self, cfg: &RunConfig, raw: &str, seed: u64, status: Value) -> Result<(), CliError> {
        let manifest = json!({
            "command": self.command,
            "config_hash": self.hash,
            "config_text": raw,
            "config_resolved": cfg.resolved_ini(),
            "seed": seed,
            "grid": { "M": cfg.m, "length": cfg.length, "P_reference": cfg.p_reference },
            "spec": { "N": cfg.n, "case": format!("{:?}", cfg.case) },
            "params": { "rho1": cfg.rho1, "h1": cfg.h1, "delta": cfg.delta },
            "outputs": self.files,
            "status": status,
            "version": env!("CARGO_PKG_VERSION"),
        });
        let path = self.dir.join("manifest.json");
        fs::write(&path, pretty(&manifest)).map_err(|e| CliError::io(&path, e))
    }
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json values serialize");
    s.push('\n');
    s
}

/// CSV from named columns, `%.17g` values, LF endings.
pub fn columns_csv(metadata: &[(String, String)], names: &[&str], cols: &[&[f64]]) -> String {
    let mut s = String::new();
    for (k, v) in metadata {
        s.push_str(&format!("# {k}={v}\n"));
    }
    s.push_str(&names.join(","));
    s.push('\n');
    let rows = cols.first().map_or(0, |c| c.len());
    for i in 0..rows {
        s.push_str(&cols.iter().map(|c| fmt_g17(c[i])).collect::<Vec<_>>().join(","));
        s.push('\n');
    }
    s
}
