//! Timestamped output directories with a JSON-lines log.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use serde_json::{json, Value};

pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "log.jsonl";

pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Creates `explicit`, or `<parent>/<command>-<timestamp>` with a
    /// numeric suffix if that already exists.
    pub fn create(parent: &Path, explicit: Option<&Path>, command: &str) -> anyhow::Result<Self> {
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => {
                let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
                let base = parent.join(format!("{command}-{stamp}"));
                let mut path = base.clone();
                let mut i = 1;
                while path.exists() {
                    path = PathBuf::from(format!("{}-{i}", base.display()));
                    i += 1;
                }
                path
            }
        };
        fs::create_dir_all(&path)
            .with_context(|| format!("creating run directory {}", path.display()))?;
        Ok(Self { path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Appends one event to the log. Logging failures are reported on
    /// stderr and otherwise ignored.
    pub fn log(&self, event: &str, fields: Value) {
        let mut line = json!({
            "ts": chrono::Local::now().to_rfc3339(),
            "event": event,
        });
        if let (Some(obj), Value::Object(extra)) = (line.as_object_mut(), fields) {
            obj.extend(extra);
        }
        let result = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.file(LOG_FILE))
            .and_then(|mut f| writeln!(f, "{line}"));
        if let Err(e) = result {
            eprintln!("warning: could not write log: {e}");
        }
    }

    pub fn write_text(&self, name: &str, text: &str) -> anyhow::Result<PathBuf> {
        let path = self.file(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn write_json<T: Serialize + ?Sized>(
        &self,
        name: &str,
        value: &T,
    ) -> anyhow::Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_text(name, &text)
    }
}
