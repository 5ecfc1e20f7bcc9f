//! Checkpoint directories: one tensor file per parameter plus `config.json`.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::params::ParamStore;
use crate::error::{Error, Result};

pub const CONFIG_FILE: &str = "config.json";

pub fn save_checkpoint<C: Serialize>(dir: &Path, config: &C, params: &ParamStore) -> Result<()> {
    params.save(dir)?;
    let path = dir.join(CONFIG_FILE);
    let json = serde_json::to_string_pretty(config)?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint<C: DeserializeOwned>(dir: &Path) -> Result<(C, ParamStore)> {
    let path = dir.join(CONFIG_FILE);
    if !path.is_file() {
        return Err(Error::MissingArtifact(path));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let config = serde_json::from_str(&text)?;
    Ok((config, ParamStore::load(dir)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_base, DenoiserConfig};

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DenoiserConfig { width: 8, blocks: 1, heads: 2, ..DenoiserConfig::default() };
        let params = init_base(&cfg, 9).unwrap();
        save_checkpoint(dir.path(), &cfg, &params).unwrap();
        let (c2, p2): (DenoiserConfig, _) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(c2, cfg);
        assert!(params.iter().all(|(k, v)| p2.get(k).unwrap().bit_eq(v)));
        assert!(matches!(
            load_checkpoint::<DenoiserConfig>(&dir.path().join("nope")),
            Err(Error::MissingArtifact(_))
        ));
    }
}
