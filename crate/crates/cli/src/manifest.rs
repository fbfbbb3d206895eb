use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

/// Record of one invocation, written to `<out>/manifest-<command>.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_path: Option<String>,
    /// Resolved configuration as TOML; feeding it back via `--config`
    /// repeats the run.
    pub config: Option<String>,
    pub seed: Option<u64>,
    pub build: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub exit_status: i32,
    pub error: Option<String>,
}

pub fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

pub fn build_id() -> String {
    format!("{}+{}", env!("CARGO_PKG_VERSION"), env!("CDNET_BUILD_REV"))
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.to_string(),
            args: std::env::args().collect(),
            config_path: None,
            config: None,
            seed: None,
            build: build_id(),
            started_unix_ms: now_ms(),
            finished_unix_ms: 0,
            exit_status: -1,
            error: None,
        }
    }

    pub fn write(&mut self, out: &Path, status: i32, error: Option<String>) -> cdnet_core::Result<()> {
        self.finished_unix_ms = now_ms();
        self.exit_status = status;
        self.error = error;
        let json = serde_json::to_string_pretty(self).expect("manifest serialises");
        cdnet_core::io::write_atomic(&out.join(format!("manifest-{}.json", self.command)), json.as_bytes())
    }
}
