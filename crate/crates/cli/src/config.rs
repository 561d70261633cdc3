//! Config resolution (flags over config file over defaults) and run manifests.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use flim_core::volume::write_atomic;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// Recursively overlays `top` onto `base`; nulls in `top` are ignored.
pub fn merge(base: &mut Value, top: &Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                if v.is_null() {
                    continue;
                }
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, t) if !t.is_null() => *b = t.clone(),
        _ => {}
    }
}

/// Sets `path` in a JSON object tree when `value` is present.
pub fn put<T: Serialize>(root: &mut Value, path: &[&str], value: Option<T>) {
    let Some(value) = value else { return };
    let mut node = root;
    for key in &path[..path.len() - 1] {
        if !node.is_object() {
            *node = Value::Object(Map::new());
        }
        node = node
            .as_object_mut()
            .expect("object")
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    if !node.is_object() {
        *node = Value::Object(Map::new());
    }
    node.as_object_mut()
        .expect("object")
        .insert(path[path.len() - 1].to_string(), serde_json::to_value(value).expect("serializable flag"));
}

pub fn load_config_file(path: Option<&Path>) -> Result<Value> {
    let Some(path) = path else { return Ok(Value::Object(Map::new())) };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    anyhow::ensure!(v.is_object(), "config {} must hold a JSON object", path.display());
    Ok(v)
}

/// `defaults ← file ← flags`, deserialized into `T`.
pub fn resolve<T: Default + Serialize + DeserializeOwned>(file: &Value, flags: &Value) -> Result<T> {
    let mut v = serde_json::to_value(T::default())?;
    merge(&mut v, file);
    merge(&mut v, flags);
    serde_json::from_value(v).context("resolving configuration")
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: Value,
    pub seeds: Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub wall_time_s: f64,
}

/// Collects what a command read and wrote, then writes the manifest.
pub struct Recorder {
    start: Instant,
    pub manifest: RunManifest,
}

impl Recorder {
    pub fn new(command: &str) -> Self {
        Self {
            start: Instant::now(),
            manifest: RunManifest {
                command: command.to_string(),
                argv: std::env::args().collect(),
                config: Value::Null,
                seeds: Value::Null,
                inputs: Vec::new(),
                outputs: Vec::new(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                wall_time_s: 0.0,
            },
        }
    }

    pub fn config<T: Serialize>(&mut self, cfg: &T) {
        self.manifest.config = serde_json::to_value(cfg).expect("serializable config");
    }

    pub fn seeds(&mut self, seeds: Value) {
        self.manifest.seeds = seeds;
    }

    pub fn input(&mut self, p: impl Into<PathBuf>) {
        self.manifest.inputs.push(p.into());
    }

    pub fn output(&mut self, p: impl Into<PathBuf>) {
        self.manifest.outputs.push(p.into());
    }

    pub fn finish(mut self, out: &Path) -> Result<()> {
        self.manifest.wall_time_s = self.start.elapsed().as_secs_f64();
        let text = serde_json::to_string_pretty(&self.manifest)?;
        write_atomic(&out.join(RUN_MANIFEST), text.as_bytes())?;
        Ok(())
    }
}
