use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use morphprint_core::config::RunConfig;
use morphprint_core::seed::sha256_hex;
use morphprint_core::synth::read_manifest;
use morphprint_core::Result;
use serde::Serialize;

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const RUN_MANIFEST: &str = "run.toml";

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config_hash: String,
    /// Input path to SHA-256 of its bytes.
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    /// Seconds since the Unix epoch; the only field that differs between identical runs.
    timestamp: u64,
}

/// Inputs and outputs of one command invocation.
#[derive(Debug, Default)]
pub struct Record {
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl Record {
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        self.inputs
            .insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    /// The manifest and every file it references.
    pub fn cohort_input(&mut self, manifest: &Path) -> Result<()> {
        self.input(manifest)?;
        let base = manifest.parent().unwrap_or(Path::new("."));
        for row in read_manifest(manifest)? {
            self.input(&base.join(&row.mesh_path))?;
            self.input(&base.join(&row.feature_path))?;
        }
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Writes the resolved config and the run manifest into `out`.
    pub fn finish(mut self, out: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
        std::fs::create_dir_all(out)?;
        let resolved = out.join(RESOLVED_CONFIG);
        std::fs::write(&resolved, cfg.resolved())?;
        self.output(&resolved);
        let m = RunManifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed: cfg.seed,
            config_hash: cfg.hash(),
            inputs: self.inputs,
            outputs: self.outputs,
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        };
        std::fs::write(
            out.join(RUN_MANIFEST),
            toml::to_string(&m).expect("manifest serializes"),
        )?;
        Ok(())
    }
}
