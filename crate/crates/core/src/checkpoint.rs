//! Parameter checkpoints and atomic file output.
//!
//! A checkpoint is one JSON document: a header describing the network
//! (dimensions, combine mode, layer manifest) and a flat array holding
//! every parameter in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Module, Tensor};

/// Identifies the run that produced a file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<H> {
    pub header: H,
    pub manifest: Vec<ManifestEntry>,
    pub params: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl<H> Checkpoint<H> {
    pub fn capture<M: Module + ?Sized>(header: H, module: &M, provenance: Option<Provenance>) -> Self {
        let mut manifest = Vec::new();
        let mut params = Vec::new();
        for (name, t) in module.named_parameters() {
            manifest.push(ManifestEntry { name, shape: t.shape().to_vec() });
            params.extend_from_slice(t.data());
        }
        Self { header, manifest, params, provenance }
    }

    /// Copies the flat parameters into `module`, checking the manifest.
    pub fn restore_into<M: Module + ?Sized>(&self, module: &mut M) -> Result<()> {
        let expected: Vec<ManifestEntry> = module
            .named_parameters()
            .into_iter()
            .map(|(name, t)| ManifestEntry { name, shape: t.shape().to_vec() })
            .collect();
        if expected != self.manifest {
            return Err(Error::dim("checkpoint", "parameter manifest does not match the network"));
        }
        let total: usize = expected.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if total != self.params.len() {
            return Err(Error::dim(
                "checkpoint",
                format!("{} values for {} parameters", self.params.len(), total),
            ));
        }
        let mut offset = 0;
        for t in module.parameters_mut() {
            let n = t.numel();
            *t = Tensor::new(t.shape().to_vec(), self.params[offset..offset + n].to_vec())?;
            t.ensure_finite("checkpoint")?;
            offset += n;
        }
        Ok(())
    }
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format { path: path.to_path_buf(), detail: e.to_string() })
}
