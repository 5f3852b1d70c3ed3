//! Run manifests, file digests and layered configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    /// Arguments after the program name, as given; relative paths resolve
    /// against `cwd`.
    pub argv: Vec<String>,
    #[serde(default)]
    pub cwd: String,
    /// Fully resolved configuration keyed by command name.
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub threads: usize,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub started_unix: f64,
    pub wall_seconds: f64,
}

pub fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let mut f = std::fs::File::open(path).with_context(|| format!("open {}", path.display()))?;
    let mut h = Sha256::new();
    let bytes = std::io::copy(&mut f, &mut h)?;
    Ok((hex::encode(h.finalize()), bytes))
}

/// Digests of a file, or of every file below a directory in sorted order.
pub fn digest_paths(paths: &[PathBuf]) -> Result<Vec<FileDigest>> {
    let mut out = Vec::new();
    for p in paths {
        let mut files = Vec::new();
        collect_files(p, &mut files)?;
        for f in files {
            let (sha256, bytes) = sha256_file(&f)?;
            out.push(FileDigest { path: f.display().to_string(), sha256, bytes });
        }
    }
    Ok(out)
}

fn collect_files(p: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if p.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(p)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        entries.sort();
        for e in entries {
            // manifests describe runs, not data
            if e.file_name().is_some_and(|n| n.to_string_lossy().ends_with("manifest.json")) {
                continue;
            }
            collect_files(&e, out)?;
        }
    } else if p.exists() {
        out.push(p.to_path_buf());
    }
    Ok(())
}

/// Parses a TOML or JSON config file into a JSON object.
pub fn load_config_file(path: &Path) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("read config {}", path.display()))?;
    let value: serde_json::Value = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text)?
    } else {
        let t: toml::Table = toml::from_str(&text).with_context(|| format!("parse {}", path.display()))?;
        serde_json::to_value(t)?
    };
    if !value.is_object() {
        bail!("config {} must be a table", path.display());
    }
    Ok(value)
}

/// The `[command]` table of a config file. A file without any command
/// tables applies as a whole.
pub fn section(file: Option<&serde_json::Value>, command: &str, all_commands: &[&str]) -> Option<serde_json::Value> {
    let file = file?;
    if let Some(v) = file.get(command).filter(|v| v.is_object()) {
        return Some(v.clone());
    }
    if all_commands.iter().any(|c| file.get(*c).is_some_and(|v| v.is_object())) {
        return None;
    }
    Some(file.clone())
}

/// Replaces fields of `base` with those present in `layer`. Unknown keys are
/// rejected.
pub fn overlay<T: Serialize + DeserializeOwned>(base: T, layer: Option<serde_json::Value>) -> Result<T> {
    let Some(layer) = layer else { return Ok(base) };
    let mut v = serde_json::to_value(&base)?;
    let obj = v.as_object_mut().expect("config structs serialize to objects");
    for (k, val) in layer.as_object().expect("object layer") {
        if !obj.contains_key(k) {
            bail!("unknown config key {k:?}");
        }
        obj.insert(k.clone(), val.clone());
    }
    Ok(serde_json::from_value(v)?)
}

/// `out.ext` -> `out.ext.manifest.json`; directories get `manifest.json` inside.
pub fn manifest_path_for(out: &Path) -> PathBuf {
    if out.is_dir() {
        out.join("manifest.json")
    } else {
        let mut s = out.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }
}
