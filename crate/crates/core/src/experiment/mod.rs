//! Configuration-driven experiments behind the `selfdistill` binary.
//!
//! Every command takes an [`ExperimentConfig`] and writes its tables into
//! an output directory. Numbers are written with 12 significant digits and
//! all indices are 0-based. Given the same config and seed, reruns produce
//! byte-identical files.

mod commands;
mod config;
mod ingest;

use std::io::Write;
use std::path::{Path, PathBuf};

pub use commands::{cmd_approx_error, cmd_phase, cmd_theory, cmd_trajectory, project_kgon};
pub use config::{apply_override, CorruptionSpec, ExperimentConfig, IngestSpec, Mode, Realization, Sweep};
pub use ingest::{cmd_ingest, suggest_lambda, IngestReport};

use crate::error::{Error, Result};
use crate::noise::{realize_labels, realize_labels_rounded, CorruptionMatrix, LabelAssignment};

pub(crate) fn realize(cfg: &ExperimentConfig, c: &CorruptionMatrix, n: usize) -> Result<LabelAssignment> {
    match cfg.realization {
        Realization::Exact => realize_labels(c, n, cfg.seed),
        Realization::Rounded => realize_labels_rounded(c, n, cfg.seed),
    }
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes a header and rows of already-formatted cells.
pub(crate) fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut body = header.join(",");
    body.push('\n');
    for r in rows {
        body.push_str(&r.join(","));
        body.push('\n');
    }
    write_file(path, body.as_bytes())
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Files produced by a command, in write order.
pub type Written = Vec<PathBuf>;
