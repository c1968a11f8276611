//! Network checkpoints: one FSTN file per parameter tensor, described by a
//! serialisable record that callers embed in their own manifests.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::{tensor_read_f32, tensor_write};
use super::nn::{LayerSpec, Network, Topology};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkRecord {
    pub topology: Topology,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    /// Parameter files relative to the checkpoint directory.
    pub files: Vec<String>,
}

/// Writes `{name}_{i}.fstn` for each parameter tensor.
pub fn save_network(dir: &Path, name: &str, net: &Network<f32>) -> Result<NetworkRecord> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for (i, p) in net.params().iter().enumerate() {
        let rel = format!("{name}_{i:02}.fstn");
        tensor_write(dir.join(&rel), p)?;
        files.push(rel);
    }
    Ok(NetworkRecord {
        topology: net.topology,
        input_shape: net.input_shape().to_vec(),
        layers: net.specs().to_vec(),
        files,
    })
}

pub fn load_network(dir: &Path, rec: &NetworkRecord) -> Result<Network<f32>> {
    let mut net = Network::zeroed(rec.topology, &rec.input_shape, rec.layers.clone())?;
    let params = rec
        .files
        .iter()
        .map(|f| tensor_read_f32(dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    net.set_params(params)?;
    Ok(net)
}

/// Serialises `value` as TOML into `path`.
pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::Config(format!("serialising {}: {e}", path.display())))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(toml::from_str(&text)?)
}
