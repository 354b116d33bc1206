//! Run configuration: a schema-validated JSON file plus flag overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use curelora::router::default_router_recipe;
use curelora::toyforge::SftRecipe;
use curelora::translator::{Family, Hyper, InferOptions, TrainRecipe};
use curelora::{Error, Result};

pub const CONFIG_ENV_VAR: &str = "CURELORA_CONFIG";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; every stream in a run derives from it.
    pub seed: u64,
    /// All artifacts live under this directory.
    pub out_dir: PathBuf,
    #[serde(default)]
    pub toy: ToyConfig,
    #[serde(default)]
    pub sft: SftRecipe,
    /// Per-family recipe overrides; families not listed use their defaults.
    #[serde(default)]
    pub recipes: FamilyTable<TrainRecipe>,
    /// Per-family architecture overrides.
    #[serde(default)]
    pub hyper: FamilyTable<Hyper>,
    #[serde(default = "default_router_recipe")]
    pub router_recipe: TrainRecipe,
    #[serde(default)]
    pub infer: InferOptions,
    #[serde(default)]
    pub analytic: AnalyticConfig,
    /// Worker-thread cap for per-shape training.
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

fn default_jobs() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    pub base_seed: u64,
    pub domain_count: usize,
    pub corpus_size: usize,
    pub pairs_per_domain: usize,
    /// Pairs per domain reserved for translator training; the rest are the
    /// held-out evaluation adapters.
    pub train_per_domain: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            base_seed: 0xBA5E,
            domain_count: 8,
            corpus_size: 48,
            pairs_per_domain: 10,
            train_per_domain: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyTable<T> {
    pub mlp: Option<T>,
    pub ae: Option<T>,
    pub cvae: Option<T>,
    pub fm: Option<T>,
}

impl<T> Default for FamilyTable<T> {
    fn default() -> Self {
        FamilyTable {
            mlp: None,
            ae: None,
            cvae: None,
            fm: None,
        }
    }
}

impl<T: Clone> FamilyTable<T> {
    pub fn get(&self, family: Family) -> Option<T> {
        match family {
            Family::Mlp => self.mlp.clone(),
            Family::Ae => self.ae.clone(),
            Family::Cvae => self.cvae.clone(),
            Family::Fm => self.fm.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticConfig {
    pub n: usize,
    pub sigma: f64,
    /// Shapes as (d, k) tuples.
    pub keys: Vec<(usize, usize)>,
}

impl Default for AnalyticConfig {
    fn default() -> Self {
        AnalyticConfig {
            n: 256,
            sigma: 0.01,
            keys: vec![(4, 4)],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.toy.domain_count == 0 || self.toy.pairs_per_domain == 0 {
            return Err(Error::Config(
                "toy.domain_count and toy.pairs_per_domain must be positive".into(),
            ));
        }
        if self.toy.train_per_domain >= self.toy.pairs_per_domain {
            return Err(Error::Config(
                "toy.train_per_domain must leave at least one held-out pair".into(),
            ));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        for family in Family::all() {
            if let Some(r) = self.recipes.get(family) {
                r.validate().map_err(|e| Error::Config(format!("{family} recipe: {e}")))?;
            }
        }
        self.router_recipe
            .validate()
            .map_err(|e| Error::Config(format!("router recipe: {e}")))?;
        Ok(())
    }

    pub fn recipe_for(&self, family: Family) -> TrainRecipe {
        self.recipes
            .get(family)
            .unwrap_or_else(|| TrainRecipe::default_for(family))
    }

    pub fn hyper_for(&self, family: Family) -> Hyper {
        self.hyper
            .get(family)
            .unwrap_or_else(|| Hyper::default_for(family))
    }

    // Artifact layout.
    pub fn checkpoints_dir(&self) -> PathBuf {
        self.out_dir.join("checkpoints")
    }
    pub fn cured_dir(&self) -> PathBuf {
        self.out_dir.join("cured")
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.out_dir.join("eval")
    }
    pub fn manifest_path(&self) -> PathBuf {
        self.out_dir.join("manifest.json")
    }
    pub fn checkpoint_path(&self, tag: &str) -> PathBuf {
        self.checkpoints_dir().join(format!("{tag}.ct"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"seed": 7, "out_dir": "/tmp/x"}"#).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.toy.domain_count, 8);
        assert_eq!(cfg.recipe_for(Family::Mlp).epochs, 150);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<RunConfig>(
            r#"{"seed": 7, "out_dir": "/tmp/x", "bogus": 1}"#,
        );
        assert!(err.is_err());
    }

    #[test]
    fn split_must_hold_out_pairs() {
        let mut cfg: RunConfig =
            serde_json::from_str(r#"{"seed": 7, "out_dir": "/tmp/x"}"#).unwrap();
        cfg.toy.train_per_domain = cfg.toy.pairs_per_domain;
        assert!(cfg.validate().is_err());
    }
}
