//! Run manifests: enough provenance next to every output set to re-execute
//! the run (command line, config echo, seed, input digests, artifact
//! version). Two runs whose manifests agree up to timestamps produce
//! bit-identical outputs.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};
use sigforest::Result;

#[derive(Serialize)]
pub struct RunManifest {
    artifact_version: String,
    command: String,
    command_line: Vec<String>,
    master_seed: Option<u64>,
    config: serde_json::Value,
    input_digests: BTreeMap<String, String>,
    outputs: Vec<String>,
    started_unix: u64,
    finished_unix: u64,
}

impl RunManifest {
    pub fn new(command: &str, master_seed: Option<u64>, config: serde_json::Value) -> Self {
        RunManifest {
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            command_line: std::env::args().collect(),
            master_seed,
            config,
            input_digests: BTreeMap::new(),
            outputs: Vec::new(),
            started_unix: now_unix(),
            finished_unix: 0,
        }
    }

    pub fn set_config(&mut self, config: serde_json::Value) {
        self.config = config;
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        use std::io::Read;
        let mut file = File::open(path)?;
        let mut hasher = Sha256::new();
        let mut buf = [0u8; 64 * 1024];
        loop {
            let n = file.read(&mut buf)?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
        }
        let digest = hasher.finalize();
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        self.input_digests
            .insert(path.display().to_string(), format!("sha256:{hex}"));
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Stamps the finish time and writes the manifest.
    pub fn write(mut self, path: &Path) -> Result<()> {
        self.finished_unix = now_unix();
        let mut writer = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut writer, &self)
            .map_err(|e| sigforest::Error::InvalidConfig(format!("manifest: {e}")))?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        Ok(())
    }
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}
