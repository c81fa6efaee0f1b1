//! Append-only JSON Lines metrics log and its conversion to CSV columns.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use crate::engine::{EngineError, Event, EventSink};

use super::{io_err, PersistError, Result};

pub const LOG_VERSION: u32 = 1;

/// Writes one event per line with a `"v"` version field. Lines are buffered
/// and flushed at phase, epoch and episode boundaries.
pub struct JsonlSink {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlSink {
    /// Opens `path` for appending, creating parent directories.
    pub fn open(path: &Path) -> Result<Self> {
        Self::with_options(path, OpenOptions::new().create(true).append(true))
    }

    /// Starts a new log at `path`, discarding any previous contents.
    pub fn create(path: &Path) -> Result<Self> {
        Self::with_options(
            path,
            OpenOptions::new().create(true).write(true).truncate(true),
        )
    }

    fn with_options(path: &Path, options: &OpenOptions) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        let f = options.open(path).map_err(|e| io_err(path, e))?;
        Ok(JsonlSink {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn fail(&self, e: impl std::fmt::Display) -> EngineError {
        EngineError::Sink(format!(
            "{}: {e}; the log may be partial",
            self.path.display()
        ))
    }
}

impl EventSink for JsonlSink {
    fn emit(&mut self, event: Event) -> crate::engine::Result<()> {
        let mut line = Map::new();
        line.insert("v".into(), LOG_VERSION.into());
        match serde_json::to_value(&event).map_err(|e| self.fail(e))? {
            Value::Object(fields) => line.extend(fields),
            _ => unreachable!("events serialize to objects"),
        }
        let text = serde_json::to_string(&line).map_err(|e| self.fail(e))?;
        writeln!(self.out, "{text}").map_err(|e| self.fail(e))
    }

    fn flush(&mut self) -> crate::engine::Result<()> {
        self.out.flush().map_err(|e| self.fail(e))
    }
}

impl Drop for JsonlSink {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

/// Parses every line of a metrics log.
pub fn read_log(path: &Path) -> Result<Vec<Value>> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line)
            .map_err(|e| PersistError::Format(format!("{} line {}: {e}", path.display(), i + 1)))?;
        match v.get("v").and_then(Value::as_u64) {
            Some(n) if n == LOG_VERSION as u64 => out.push(v),
            found => {
                return Err(PersistError::Version {
                    found: found.unwrap_or(0) as u32,
                    expected: LOG_VERSION,
                })
            }
        }
    }
    Ok(out)
}

/// Flattens nested objects and arrays into `a_b` / `a_0` keys with numeric
/// or string leaves, e.g. `dev.accuracy` becomes `dev_accuracy`.
pub fn flatten_event(v: &Value) -> Map<String, Value> {
    fn walk(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
        let key = |k: &str| {
            if prefix.is_empty() {
                k.to_string()
            } else {
                format!("{prefix}_{k}")
            }
        };
        match v {
            Value::Object(m) => m.iter().for_each(|(k, v)| walk(&key(k), v, out)),
            Value::Array(a) => a
                .iter()
                .enumerate()
                .for_each(|(i, v)| walk(&key(&i.to_string()), v, out)),
            Value::Null => {}
            leaf => {
                out.insert(prefix.to_string(), leaf.clone());
            }
        }
    }
    let mut out = Map::new();
    walk("", v, &mut out);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub run: String,
    pub event: String,
    pub episode: Option<u64>,
    pub step: Option<u64>,
    pub value: f64,
}

/// One row per event that carries `metric`, in log order.
pub fn extract_metric(events: &[Value], metric: &str) -> Vec<MetricRow> {
    events
        .iter()
        .map(flatten_event)
        .filter_map(|f| {
            let value = f.get(metric)?.as_f64()?;
            let text = |k: &str| {
                f.get(k)
                    .and_then(Value::as_str)
                    .unwrap_or_default()
                    .to_string()
            };
            Some(MetricRow {
                run: text("run"),
                event: text("event"),
                episode: f.get("episode").and_then(Value::as_u64),
                step: f
                    .get("step")
                    .or_else(|| f.get("steps"))
                    .and_then(Value::as_u64),
                value,
            })
        })
        .collect()
}

/// CSV with columns `run,event,episode,step,<metric>`.
pub fn write_metric_csv<W: Write>(out: W, metric: &str, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let fail = |e: csv::Error| PersistError::Format(format!("writing CSV: {e}"));
    w.write_record(["run", "event", "episode", "step", metric])
        .map_err(fail)?;
    let opt = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.run.clone(),
            r.event.clone(),
            opt(r.episode),
            opt(r.step),
            r.value.to_string(),
        ])
        .map_err(fail)?;
    }
    w.flush()
        .map_err(|e| PersistError::Format(format!("writing CSV: {e}")))
}
