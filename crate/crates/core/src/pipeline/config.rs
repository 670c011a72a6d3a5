use std::collections::BTreeSet;
use std::fs;
use std::hash::Hasher;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use super::{stage_msg, PipelineError, Stage, StageExt};
use crate::edges::EdgePredictorConfig;
use crate::features::FeatureSpec;
use crate::federation::WeightSource;
use crate::llm::{HttpConfig, QueryPolicy};
use crate::nn::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GcnConfig {
    pub hidden: usize,
    pub local_epochs: u32,
    pub adam: AdamConfig,
}

impl Default for GcnConfig {
    fn default() -> Self {
        GcnConfig {
            hidden: 256,
            local_epochs: 3,
            adam: AdamConfig {
                lr: 1e-2,
                weight_decay: 5e-4,
                ..AdamConfig::default()
            },
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlmBackend {
    #[default]
    Mock,
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockConfig {
    /// Defaults to `vocab.json` in the dataset directory.
    pub vocab: Option<PathBuf>,
    pub p_correct_generate: f64,
    pub p_correct_reflect: f64,
    pub seed: u64,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            vocab: None,
            p_correct_generate: 0.8,
            p_correct_reflect: 0.95,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub backend: LlmBackend,
    pub query: QueryPolicy,
    pub http: HttpConfig,
    pub mock: MockConfig,
}

/// Which pipeline components to switch off.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    NoReflection,
    NoEdges,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    pub n_clients: usize,
    pub alpha: f64,
    /// Generated neighbors per original node.
    pub n_gen: usize,
    /// Lowest-confidence nodes reflected per client per reflection round.
    pub reflection_k: usize,
    /// Predicted-edge budget per client.
    pub edge_k: usize,
    pub rounds: u32,
    /// Reflect every this many rounds when `reflection_rounds` is unset.
    pub reflection_every: u32,
    pub reflection_rounds: Option<Vec<u32>>,
    pub seeds: Vec<u64>,
    pub no_reflection: bool,
    pub no_edge_predictor: bool,
    /// Skip the LLM entirely (plain FedAvg on the partitioned graph).
    pub no_generation: bool,
    pub weight_source: WeightSource,
    pub categories: Option<Vec<String>>,
    pub features: FeatureSpec,
    pub gcn: GcnConfig,
    pub edge_predictor: EdgePredictorConfig,
    pub llm: LlmConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
            n_clients: 5,
            alpha: 100.0,
            n_gen: 5,
            reflection_k: 10,
            edge_k: 100,
            rounds: 100,
            reflection_every: 5,
            reflection_rounds: None,
            seeds: vec![0],
            no_reflection: false,
            no_edge_predictor: false,
            no_generation: false,
            weight_source: WeightSource::OriginalOnly,
            categories: None,
            features: FeatureSpec::default(),
            gcn: GcnConfig::default(),
            edge_predictor: EdgePredictorConfig::default(),
            llm: LlmConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).stage(Stage::Config)?;
        let mut cfg: RunConfig = toml::from_str(&text).stage(Stage::Config)?;
        // relative paths are taken from the config file's directory
        if let Some(base) = path.parent() {
            for p in [&mut cfg.dataset, &mut cfg.out_dir] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
            if let Some(v) = cfg.llm.mock.vocab.as_mut() {
                if v.is_relative() {
                    *v = base.join(&*v);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(stage_msg(Stage::Config, m));
        if self.n_clients == 0 {
            return bad("n_clients must be positive");
        }
        if !(self.alpha > 0.0) {
            return bad("alpha must be positive");
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1");
        }
        if self.gcn.local_epochs == 0 || self.edge_predictor.local_epochs == 0 {
            return bad("local_epochs must be at least 1");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if self.features.dim == 0 {
            return bad("features.dim must be positive");
        }
        if let Some(r) = &self.reflection_rounds {
            if r.iter().any(|&t| t == 0 || t > self.rounds) {
                return bad("reflection_rounds must lie in [1, rounds]");
            }
        }
        if self.llm.query.retry_budget == 0 {
            return bad("llm.query.retry_budget must be at least 1");
        }
        Ok(())
    }

    /// Rounds after which reflection runs; empty when reflection is off.
    pub fn reflection_set(&self) -> BTreeSet<u32> {
        if self.no_reflection || self.no_generation {
            return BTreeSet::new();
        }
        match &self.reflection_rounds {
            Some(r) => r.iter().copied().collect(),
            None if self.reflection_every == 0 => BTreeSet::new(),
            None => (1..=self.rounds).filter(|t| t % self.reflection_every == 0).collect(),
        }
    }

    pub fn apply_ablation(&mut self, a: Ablation) {
        match a {
            Ablation::NoReflection => self.no_reflection = true,
            Ablation::NoEdges => self.no_edge_predictor = true,
            Ablation::Both => {
                self.no_reflection = true;
                self.no_edge_predictor = true;
            }
        }
    }

    pub fn uses_edges(&self) -> bool {
        !self.no_generation && !self.no_edge_predictor
    }

    /// Stable hex digest of the full configuration.
    pub fn hash(&self) -> String {
        let mut h = FnvHasher::default();
        h.write(serde_json::to_string(self).expect("config serializes").as_bytes());
        format!("{:016x}", h.finish())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_covers_every_field() {
        let mut cfg = RunConfig {
            reflection_rounds: Some(vec![2, 4]),
            categories: Some(vec!["a".into()]),
            ..RunConfig::default()
        };
        cfg.llm.mock.vocab = Some(PathBuf::from("/v.json"));
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "dataset = \"data\"\nrounds = 20\n[gcn]\nhidden = 32\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.rounds, 20);
        assert_eq!(cfg.gcn.hidden, 32);
        assert_eq!(cfg.gcn.adam.weight_decay, 5e-4);
        assert_eq!(cfg.dataset, dir.path().join("data"));
        assert_eq!(cfg.alpha, 100.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "roundz = 3\n").unwrap();
        assert!(RunConfig::load(&path).is_err());
    }

    #[test]
    fn reflection_rounds() {
        let cfg = RunConfig {
            rounds: 12,
            ..RunConfig::default()
        };
        assert_eq!(cfg.reflection_set().into_iter().collect::<Vec<_>>(), vec![5, 10]);
        let mut off = cfg.clone();
        off.apply_ablation(Ablation::NoReflection);
        assert!(off.reflection_set().is_empty());
        let bad = RunConfig {
            reflection_rounds: Some(vec![13]),
            ..cfg
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.edge_k = 7;
        assert_ne!(a.hash(), b.hash());
    }
}
