//! Run provenance record. Every successful command writes exactly one
//! `manifest.json` into its output directory; two runs are reproductions of
//! each other iff their manifests agree on everything except `wall_ms`.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stacking_core::Result;

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    /// Subcommand name.
    pub command: String,
    /// SHA-256 of the resolved configuration (all arguments after defaults).
    pub config_sha256: String,
    pub seed: u64,
    /// Input files, as given on the command line.
    pub inputs: Vec<String>,
    /// Artifacts written into the output directory, manifest excluded.
    pub outputs: Vec<String>,
    pub versions: Versions,
    /// Elapsed milliseconds; excluded from reproduction comparisons.
    pub wall_ms: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Versions {
    pub tool: String,
    pub core: String,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            config_sha256: config_hash(config),
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            versions: Versions {
                tool: env!("CARGO_PKG_VERSION").to_string(),
                core: stacking_core::VERSION.to_string(),
            },
            wall_ms: 0,
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    /// Record an artifact by name relative to the output directory, so
    /// reruns into different directories still compare equal.
    pub fn output(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    /// Stamp the elapsed time and write `manifest.json` into `dir`.
    pub fn write(mut self, dir: &Path, started: Instant) -> Result<()> {
        self.wall_ms = started.elapsed().as_millis() as u64;
        let f = std::fs::File::create(dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(&f, &self)
            .map_err(|e| stacking_core::Error::Invalid(e.to_string()))?;
        use std::io::Write;
        writeln!(&f)?;
        Ok(())
    }
}

/// Hash of the canonical (sorted-key) JSON form of the configuration.
pub fn config_hash(config: &impl Serialize) -> String {
    let canon = serde_json::to_string(config).expect("configuration serializes");
    let mut h = Sha256::new();
    h.update(canon.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
