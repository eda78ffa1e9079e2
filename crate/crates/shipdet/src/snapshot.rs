//! Reproducibility snapshots: every CLI run writes the fully resolved
//! parameters next to its outputs. Snapshot content is a pure function of
//! the resolved arguments (no timestamps, no absolute-path leakage beyond
//! what the user passed), so reruns stay byte-identical.

use std::path::{Path, PathBuf};

use anyhow::Result;
use serde_json::{json, Value};

/// Seed environment variable; the `--seed` flag wins over it.
pub const SEED_ENV: &str = "SHIPDET_SEED";

/// Resolution order: explicit flag, then environment, then default 0.
pub fn resolve_seed(flag: Option<u64>) -> u64 {
    if let Some(s) = flag {
        return s;
    }
    if let Ok(text) = std::env::var(SEED_ENV) {
        if let Ok(v) = text.trim().parse::<u64>() {
            return v;
        }
    }
    0
}

/// Snapshot path for a file output: `<out>.config.json`.
pub fn snapshot_path_for_file(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".config.json");
    out.with_file_name(name)
}

/// Snapshot path for a directory output.
pub fn snapshot_path_for_dir(out: &Path) -> PathBuf {
    out.join("config_snapshot.json")
}

pub fn write_snapshot(path: &Path, command: &str, seed: u64, parameters: Value) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let snapshot = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": seed,
        "parameters": parameters,
    });
    let mut text = serde_json::to_string_pretty(&snapshot)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
