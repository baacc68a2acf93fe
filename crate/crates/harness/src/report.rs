//! Human-readable summary of a verified manifest.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;
use crate::manifest::{read_manifest, verify, RunManifest};

/// Verifies every digest of the manifest at `path` (a file or its directory)
/// and renders the summary.
pub fn report(path: &Path) -> Result<String> {
    let (manifest, dir) = read_manifest(path)?;
    verify(&manifest, &dir)?;
    Ok(render(&manifest, &dir))
}

pub fn render(m: &RunManifest, dir: &Path) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "experiment {} ({})", m.experiment, m.code_version);
    let _ = writeln!(s, "spec sha256 {}", m.spec_sha256);
    let _ = writeln!(s, "master seed {}, {} replica cells, {} failed", m.master_seed, m.runs.len(), m.failed_cells.len());
    for (k, v) in &m.notes {
        let _ = writeln!(s, "  {k}: {v}");
    }
    for cell in &m.failed_cells {
        let _ = writeln!(s, "FAILED CELL N={} replica={}: {}", cell.n, cell.replica, cell.error);
    }
    for c in &m.checks {
        let files: Vec<String> = c.files.iter().map(|f| dir.join(f).display().to_string()).collect();
        let _ = writeln!(
            s,
            "{} {}: {} [{}] -> {}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.tolerance,
            files.join(", ")
        );
    }
    let _ = writeln!(s, "{} files verified", m.files.len());
    s
}
