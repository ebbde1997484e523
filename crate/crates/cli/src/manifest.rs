use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Map, Value};

/// Record of one run. Everything except `wall_clock_seconds` is a function of
/// the arguments.
pub struct RunManifest {
    command: &'static str,
    problem: String,
    out: PathBuf,
    parameters: Map<String, Value>,
    extra: Map<String, Value>,
    files: Vec<String>,
    started: Instant,
}

impl RunManifest {
    pub fn new(command: &'static str, problem: String, out: &Path, started: Instant) -> RunManifest {
        RunManifest {
            command,
            problem,
            out: out.to_path_buf(),
            parameters: Map::new(),
            extra: Map::new(),
            files: Vec::new(),
            started,
        }
    }

    pub fn param(&mut self, key: &str, value: impl Into<Value>) {
        self.parameters.insert(key.into(), value.into());
    }

    pub fn record(&mut self, key: &str, value: impl Into<Value>) {
        self.extra.insert(key.into(), value.into());
    }

    /// Writes `name` under the output directory and lists it.
    pub fn write(&mut self, name: &str, contents: &str) -> std::io::Result<()> {
        fs::write(self.out.join(name), contents)?;
        self.files.push(name.into());
        Ok(())
    }

    pub fn finish(self) -> std::io::Result<()> {
        let mut v = json!({
            "command": self.command,
            "problem": self.problem,
            "parameters": Value::Object(self.parameters),
            "output_dir": self.out.display().to_string(),
            "tool_version": env!("CARGO_PKG_VERSION"),
            "files": self.files,
            "wall_clock_seconds": self.started.elapsed().as_secs_f64(),
        });
        if let Value::Object(m) = &mut v {
            m.extend(self.extra);
        }
        let text = serde_json::to_string_pretty(&v).expect("manifest serializes");
        fs::write(self.out.join("manifest.json"), text + "\n")
    }
}
