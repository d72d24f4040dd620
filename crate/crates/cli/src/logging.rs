//! Line-delimited JSON logs on stderr.

use std::io::Write;

use log::{Level, LevelFilter, Log, Metadata, Record};
use serde_json::{json, Map, Value};

struct JsonLogger {
    level: LevelFilter,
}

impl Log for JsonLogger {
    fn enabled(&self, m: &Metadata) -> bool {
        m.level() <= self.level
    }

    fn log(&self, r: &Record) {
        if self.enabled(r.metadata()) {
            let line = json!({ "level": r.level().as_str().to_lowercase(), "target": r.target(), "msg": r.args().to_string() });
            let _ = writeln!(std::io::stderr().lock(), "{line}");
        }
    }

    fn flush(&self) {}
}

/// Installs the logger; `TUMORSEG_LOG` (error/warn/info/debug) sets the level.
pub fn init() {
    let level = std::env::var("TUMORSEG_LOG").ok().and_then(|s| s.parse().ok()).unwrap_or(LevelFilter::Info);
    if log::set_logger(Box::leak(Box::new(JsonLogger { level }))).is_ok() {
        log::set_max_level(level);
    }
}

/// A structured event: `{"level": ..., "event": name, ...fields}`.
pub fn event(level: Level, name: &str, fields: Value) {
    if level > log::max_level() {
        return;
    }
    let mut obj = Map::new();
    obj.insert("level".into(), level.as_str().to_lowercase().into());
    obj.insert("event".into(), name.into());
    if let Value::Object(f) = fields {
        obj.extend(f);
    }
    let _ = writeln!(std::io::stderr().lock(), "{}", Value::Object(obj));
}
