//! Experiment configuration (TOML).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::DEFAULT_EMBEDDING_DIM;
use crate::scenario::{ScenarioConfig, ScenarioSampler};
use crate::topology::{build_topology, Topology, TopologySpec};
use crate::trainer::PolicyConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub episodes: usize,
    /// Log the deterministic policy every this many episodes (0 disables).
    pub eval_interval: usize,
    /// Seeds `seed .. seed + num_seeds`.
    pub num_seeds: u64,
    /// Trailing window for summary statistics.
    pub window: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            episodes: 5000,
            eval_interval: 100,
            num_seeds: 5,
            window: 100,
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnowledgeConfig {
    pub store_path: PathBuf,
    pub embedding_dim: usize,
    pub window: usize,
    pub overlap: usize,
    pub top_k: usize,
}

impl Default for KnowledgeConfig {
    fn default() -> Self {
        Self {
            store_path: PathBuf::from("chunks.tsv"),
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            window: 64,
            overlap: 16,
            top_k: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub topology: TopologySpec,
    pub scenario: ScenarioConfig,
    pub policy: PolicyConfig,
    pub run: RunConfig,
    pub knowledge: KnowledgeConfig,
}

impl ExperimentConfig {
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.run.num_seeds).map(|i| self.seed.wrapping_add(i)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.topology
            .validate()
            .map_err(|e| Error::config("topology", e.to_string()))?;
        self.scenario.validate()?;
        self.policy.validate()?;
        if self.run.num_seeds == 0 {
            return Err(Error::config("run.num_seeds", "must be >= 1"));
        }
        if self.run.window == 0 {
            return Err(Error::config("run.window", "must be >= 1"));
        }
        let k = &self.knowledge;
        if k.embedding_dim == 0 {
            return Err(Error::config("knowledge.embedding_dim", "must be >= 1"));
        }
        if k.window == 0 {
            return Err(Error::config("knowledge.window", "must be >= 1"));
        }
        if k.overlap >= k.window {
            return Err(Error::config("knowledge.overlap", "must be < knowledge.window"));
        }
        if k.top_k == 0 {
            return Err(Error::config("knowledge.top_k", "must be >= 1"));
        }
        Ok(())
    }

    /// Builds the topology and the scenario sampler on it.
    pub fn build(&self) -> Result<(Topology, ScenarioSampler)> {
        let topo = build_topology(&self.topology).map_err(|e| Error::config("topology", e.to_string()))?;
        let sampler = ScenarioSampler::new(&self.scenario, &topo)?;
        Ok((topo, sampler))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = toml::Deserializer::new(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        let inner = e.into_inner();
        Error::config(key, inner.message().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(format!("config file {}", path.display())),
        _ => Error::Io(e),
    })?;
    parse_config(&text)
}

const KEY_DOCS: &[(&str, &str)] = &[
    ("seed", "first seed; runs use seed .. seed + run.num_seeds"),
    ("kind", "fat_tree | three_tier | dcell"),
    ("fat_tree_k", "fat-tree arity (even, >= 2)"),
    ("per_hop_latency_ms", "latency added per link on the gateway path"),
    ("edge_uplinks", "aggregation switches each edge switch connects to"),
    ("n", "hosts per DCell0 cell"),
    ("level", "DCell level (0 or 1)"),
    ("servers", "storage servers N (hosts after the gateway)"),
    ("chunks", "knowledge chunks K"),
    ("gateway_host", "index into the host list of the query gateway"),
    ("base_read_ms", "[lo, hi] unloaded read latency per server"),
    ("base_write_ms", "[lo, hi] unloaded write latency per server"),
    ("capacity", "[lo, hi] chunk slots per server"),
    ("alpha", "[lo, hi] congestion coefficient, redrawn each episode"),
    ("w_read", "[lo, hi] read weight; write weight is 1 - w_read"),
    ("zipf_s", "Zipf exponent of read popularity (0 = uniform)"),
    ("write_freq", "[lo, hi] per-chunk write frequency"),
    ("fleet", "fixed: hardware drawn once from fleet_seed | per_episode"),
    ("fleet_seed", "seed of the fixed fleet draw"),
    ("latency_jitter", "relative per-episode jitter of fixed-fleet latencies"),
    ("steps", "denoising steps T"),
    ("beta_min", "first noise-schedule beta"),
    ("beta_max", "last noise-schedule beta"),
    ("time_dim", "sinusoidal step-embedding width (even)"),
    ("actor_hidden", "denoiser hidden layer widths"),
    ("critic_hidden", "critic hidden layer widths"),
    ("activation", "silu | tanh | identity"),
    ("critic_encoding", "server_traffic | row_softmax | raw action features for the critic"),
    ("action_l2", "penalty on the mean squared action logit in the actor objective"),
    ("actor_lr", "Adam step size for the denoiser"),
    ("critic_lr", "Adam step size for the critic"),
    ("buffer_capacity", "replay buffer size"),
    ("batch_size", "replay batch per update"),
    ("warmup", "episodes before the first update"),
    ("episodes", "training episodes per seed"),
    ("eval_interval", "deterministic-policy logging interval (0 = off)"),
    ("num_seeds", "number of consecutive seeds"),
    ("window", "run: summary window / knowledge: words per chunk"),
    ("out_dir", "output directory for metrics"),
    ("store_path", "chunk store file"),
    ("embedding_dim", "hashed embedding dimension"),
    ("overlap", "words shared by consecutive chunks"),
    ("top_k", "chunks retrieved per query"),
];

/// The default configuration as commented TOML.
pub fn reference_toml() -> String {
    let mut out = String::from("# dcnlab experiment configuration (all keys optional; defaults shown)\n");
    for line in ExperimentConfig::default().to_toml().lines() {
        let key = line.split('=').next().unwrap_or("").trim();
        if let Some((_, doc)) = KEY_DOCS.iter().find(|(k, _)| *k == key) {
            out.push_str(&format!("# {doc}\n"));
        }
        out.push_str(line);
        out.push('\n');
    }
    out
}
