//! Run configuration: a TOML file naming the network and holding one block
//! per stage. Every block is optional and falls back to the library
//! defaults.
//!
//! ```toml
//! network = "desk5.json"   # relative to this file
//! seed = 0                 # drives every stage; --seed overrides it
//! out = "runs/desk"        # relative to the working directory; --out overrides it
//!
//! [es]
//! generations = 30
//!
//! [collect]
//! episodes = 100
//!
//! [train]
//! iterations = 2000
//!
//! [eval]
//! episodes = 10
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use signalopt::marl::CollectConfig;
use signalopt::{EsConfig, MaddpgConfig, NetworkSpec};

use crate::Failure;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Network description (JSON), relative to the config file.
    pub network: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Plan the batch is collected around; defaults to the ES output in the
    /// run directory. Relative to the config file.
    #[serde(default)]
    pub base_plan: Option<PathBuf>,
    #[serde(default)]
    pub es: EsConfig,
    #[serde(default)]
    pub collect: CollectConfig,
    #[serde(default)]
    pub train: MaddpgConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Independent arrival streams averaged per variant.
    pub episodes: usize,
    pub warmup_cycles: usize,
    /// `None` uses the network horizon.
    pub measured_cycles: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { episodes: 10, warmup_cycles: 2, measured_cycles: None }
    }
}

impl EvalConfig {
    pub fn measured(&self, spec: &NetworkSpec) -> usize {
        self.measured_cycles.unwrap_or(spec.horizon.max(1))
    }
}

/// A loaded, validated configuration with its resolved inputs.
pub struct Run {
    pub cfg: RunConfig,
    pub spec: NetworkSpec,
    pub config_dir: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub config_hash: String,
}

impl Run {
    /// Reads `path`, applies the command-line overrides and loads the
    /// network. Nothing is written.
    pub fn load(path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<Run, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Failure::config(format!("invalid config {}: {e}", path.display())))?;
        let config_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();

        let seed = seed.unwrap_or(cfg.seed);
        cfg.seed = seed;
        cfg.es.seed = seed;
        cfg.collect.seed = seed;
        cfg.train.seed = seed;

        let network_path = config_dir.join(&cfg.network);
        let network = std::fs::read_to_string(&network_path)
            .map_err(|e| Failure::config(format!("cannot read network {}: {e}", network_path.display())))?;
        let spec = NetworkSpec::from_json(&network)
            .map_err(|e| Failure::config(format!("invalid network {}: {e}", network_path.display())))?;

        if cfg.eval.episodes == 0 {
            return Err(Failure::config("eval.episodes must be at least 1"));
        }
        if cfg.eval.measured_cycles == Some(0) {
            return Err(Failure::config("eval.measured_cycles must be at least 1"));
        }

        let out = out
            .map(Path::to_path_buf)
            .or_else(|| cfg.out.clone())
            .unwrap_or_else(|| PathBuf::from("runs"));
        if out.exists() && !out.is_dir() {
            return Err(Failure::config(format!("output path {} is not a directory", out.display())));
        }
        let config_hash = config_hash(&cfg, &spec);
        Ok(Run { cfg, spec, config_dir, out, seed, config_hash })
    }

    /// A path from the config file, resolved against its directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.config_dir.join(p)
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

/// Hash of everything that determines the outputs: the stage settings, the
/// seed and the network content. Paths are left out so that moving a run
/// directory does not change it.
pub fn config_hash(cfg: &RunConfig, spec: &NetworkSpec) -> String {
    let settings = serde_json::json!({
        "seed": cfg.seed,
        "es": cfg.es,
        "collect": cfg.collect,
        "train": cfg.train,
        "eval": cfg.eval,
    });
    let mut h = Sha256::new();
    h.update(settings.to_string().as_bytes());
    h.update(b"\n");
    h.update(spec.content_hash().as_bytes());
    hex::encode(h.finalize())[..16].to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> RunConfig {
        toml::from_str(text).unwrap()
    }

    #[test]
    fn blocks_default_to_library_settings() {
        let cfg = parse("network = \"n.json\"\n");
        assert_eq!(cfg.es, EsConfig::default());
        assert_eq!(cfg.train, MaddpgConfig::default());
        assert_eq!(cfg.eval, EvalConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("network = \"n.json\"\nsede = 3\n").is_err());
        assert!(toml::from_str::<RunConfig>("network = \"n.json\"\n[es]\nsigma2 = 1.0\n").is_err());
    }

    #[test]
    fn hash_tracks_settings_but_not_paths() {
        let spec = signalopt::scenario::desk_network();
        let a = parse("network = \"n.json\"\n");
        let mut b = parse("network = \"other/n.json\"\nout = \"x\"\n");
        assert_eq!(config_hash(&a, &spec), config_hash(&b, &spec));
        b.seed = 1;
        assert_ne!(config_hash(&a, &spec), config_hash(&b, &spec));
    }
}
