//! Episode generator: draws placement scenarios over a topology, and the
//! fixed-statistics encoder that turns an [`EnvState`] into network inputs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{EnvState, ServerProfile};
use crate::error::{Error, Result};
use crate::topology::{NodeId, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FleetMode {
    /// Server hardware drawn once from `fleet_seed`; episodes vary the
    /// workload and apply multiplicative latency jitter.
    Fixed,
    /// Server hardware redrawn every episode.
    PerEpisode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub servers: usize,
    pub chunks: usize,
    /// Index into the topology's host list of the query gateway.
    pub gateway_host: usize,
    pub base_read_ms: [f64; 2],
    pub base_write_ms: [f64; 2],
    pub capacity: [u32; 2],
    pub alpha: [f64; 2],
    pub w_read: [f64; 2],
    pub zipf_s: f64,
    pub write_freq: [f64; 2],
    pub fleet: FleetMode,
    pub fleet_seed: u64,
    pub latency_jitter: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            servers: 8,
            chunks: 16,
            gateway_host: 0,
            base_read_ms: [2.0, 12.0],
            base_write_ms: [2.0, 12.0],
            capacity: [16, 16],
            alpha: [0.5, 0.5],
            w_read: [0.5, 0.5],
            zipf_s: 1.0,
            write_freq: [0.5, 1.5],
            fleet: FleetMode::Fixed,
            fleet_seed: 0,
            latency_jitter: 0.05,
        }
    }
}

fn check_range(key: &str, r: [f64; 2], min: f64, strict: bool) -> Result<()> {
    let [lo, hi] = r;
    if !(lo.is_finite() && hi.is_finite()) || lo > hi {
        return Err(Error::config(key, format!("empty or non-finite range [{lo}, {hi}]")));
    }
    if (strict && lo <= min) || (!strict && lo < min) {
        let op = if strict { ">" } else { ">=" };
        return Err(Error::config(key, format!("lower bound must be {op} {min}, got {lo}")));
    }
    Ok(())
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.servers == 0 {
            return Err(Error::config("scenario.servers", "must be >= 1"));
        }
        if self.chunks == 0 {
            return Err(Error::config("scenario.chunks", "must be >= 1"));
        }
        check_range("scenario.base_read_ms", self.base_read_ms, 0.0, true)?;
        check_range("scenario.base_write_ms", self.base_write_ms, 0.0, true)?;
        check_range("scenario.alpha", self.alpha, 0.0, false)?;
        check_range("scenario.w_read", self.w_read, 0.0, false)?;
        if self.w_read[1] > 1.0 {
            return Err(Error::config("scenario.w_read", "upper bound must be <= 1"));
        }
        check_range("scenario.write_freq", self.write_freq, 0.0, true)?;
        let [clo, chi] = self.capacity;
        if clo == 0 || clo > chi {
            return Err(Error::config(
                "scenario.capacity",
                format!("empty range or zero capacity [{clo}, {chi}]"),
            ));
        }
        if !(self.zipf_s.is_finite() && self.zipf_s >= 0.0) {
            return Err(Error::config("scenario.zipf_s", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.latency_jitter) {
            return Err(Error::config("scenario.latency_jitter", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

#[derive(Debug, Clone)]
struct Hardware {
    read: f64,
    write: f64,
    capacity: u32,
}

/// Scenario generator bound to one topology.
#[derive(Debug, Clone)]
pub struct ScenarioSampler {
    cfg: ScenarioConfig,
    server_hosts: Vec<NodeId>,
    gateway_hops: Vec<usize>,
    per_hop_latency_ms: f64,
    fleet: Option<Vec<Hardware>>,
}

impl ScenarioSampler {
    /// Servers are the first `cfg.servers` hosts after the gateway, in id order.
    pub fn new(cfg: &ScenarioConfig, topology: &Topology) -> Result<Self> {
        cfg.validate()?;
        let hosts = topology.host_ids();
        if cfg.gateway_host >= hosts.len() {
            return Err(Error::config(
                "scenario.gateway_host",
                format!("topology has only {} hosts", hosts.len()),
            ));
        }
        if cfg.servers > hosts.len() - 1 {
            return Err(Error::config(
                "scenario.servers",
                format!("topology has only {} non-gateway hosts", hosts.len() - 1),
            ));
        }
        let gateway = hosts[cfg.gateway_host];
        let server_hosts: Vec<NodeId> = (1..=cfg.servers)
            .map(|i| hosts[(cfg.gateway_host + i) % hosts.len()])
            .collect();
        let dist = topology.hops_from(gateway);
        let gateway_hops = server_hosts.iter().map(|&h| dist[h]).collect();

        let mut sampler = Self {
            cfg: cfg.clone(),
            server_hosts,
            gateway_hops,
            per_hop_latency_ms: topology.spec().per_hop_latency_ms,
            fleet: None,
        };
        if cfg.fleet == FleetMode::Fixed {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.fleet_seed);
            sampler.fleet = Some(sampler.draw_fleet(&mut rng));
        }
        Ok(sampler)
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn gateway_hops(&self) -> &[usize] {
        &self.gateway_hops
    }

    pub fn per_hop_latency_ms(&self) -> f64 {
        self.per_hop_latency_ms
    }

    fn draw_hardware<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Hardware> {
        let [clo, chi] = self.cfg.capacity;
        (0..self.cfg.servers)
            .map(|_| Hardware {
                read: uniform(rng, self.cfg.base_read_ms),
                write: uniform(rng, self.cfg.base_write_ms),
                capacity: rng.gen_range(clo..=chi),
            })
            .collect()
    }

    /// Latin-hypercube draw: each latency range is cut into `servers` equal
    /// strata, one uniform value per stratum, strata shuffled across servers.
    /// Marginals stay uniform but a small fleet cannot miss a whole end of the
    /// range.
    fn draw_fleet<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Hardware> {
        let n = self.cfg.servers;
        let mut stratified = |[lo, hi]: [f64; 2]| {
            let width = (hi - lo) / n as f64;
            let mut v: Vec<f64> = (0..n).map(|i| uniform(rng, [lo + width * i as f64, lo + width * (i + 1) as f64])).collect();
            v.shuffle(rng);
            v
        };
        let read = stratified(self.cfg.base_read_ms);
        let write = stratified(self.cfg.base_write_ms);
        let [clo, chi] = self.cfg.capacity;
        read.into_iter()
            .zip(write)
            .map(|(read, write)| Hardware {
                read,
                write,
                capacity: rng.gen_range(clo..=chi),
            })
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> EnvState {
        let cfg = &self.cfg;
        let hardware = match &self.fleet {
            Some(fleet) => {
                let j = cfg.latency_jitter;
                fleet
                    .iter()
                    .map(|h| Hardware {
                        read: h.read * uniform(rng, [1.0 - j, 1.0 + j]),
                        write: h.write * uniform(rng, [1.0 - j, 1.0 + j]),
                        capacity: h.capacity,
                    })
                    .collect()
            }
            None => self.draw_hardware(rng),
        };
        let servers = hardware
            .into_iter()
            .enumerate()
            .map(|(i, h)| ServerProfile {
                server_id: self.server_hosts[i],
                base_read_ms: h.read,
                base_write_ms: h.write,
                capacity: h.capacity,
                gateway_hops: self.gateway_hops[i],
            })
            .collect();

        let load_factor_alpha = uniform(rng, cfg.alpha);
        let w_read = uniform(rng, cfg.w_read);

        // Zipf popularity over a random ranking of the chunks.
        let mut ranks: Vec<usize> = (1..=cfg.chunks).collect();
        ranks.shuffle(rng);
        let chunk_popularity = ranks
            .iter()
            .map(|&r| (r as f64).powf(-cfg.zipf_s))
            .collect();
        let chunk_write_freq = (0..cfg.chunks).map(|_| uniform(rng, cfg.write_freq)).collect();

        EnvState {
            servers,
            chunk_popularity,
            chunk_write_freq,
            w_read,
            w_write: 1.0 - w_read,
            load_factor_alpha,
            per_hop_latency_ms: self.per_hop_latency_ms,
        }
    }
}

pub fn sample_scenario<R: Rng + ?Sized>(
    cfg: &ScenarioConfig,
    topology: &Topology,
    rng: &mut R,
) -> Result<EnvState> {
    Ok(ScenarioSampler::new(cfg, topology)?.sample(rng))
}

/// `(x - center) / scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Standardize {
    center: f64,
    scale: f64,
}

impl Standardize {
    fn from_range(lo: f64, hi: f64) -> Self {
        let half = (hi - lo) / 2.0;
        Self {
            center: (lo + hi) / 2.0,
            scale: if half > 0.0 { half } else { 1.0 },
        }
    }

    fn from_values(values: impl Iterator<Item = f64> + Clone) -> Self {
        let (lo, hi) = values
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        Self::from_range(lo, hi)
    }

    fn apply(&self, x: f64) -> f64 {
        (x - self.center) / self.scale
    }
}

/// Flattens an [`EnvState`] into the conditioning vector of the policy and
/// critic: `[read | write | capacity | path (N each) | alpha | w_read |
/// popularity share | write share (K each)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateEncoder {
    n_servers: usize,
    n_chunks: usize,
    read: Standardize,
    write: Standardize,
    capacity: Standardize,
    path: Standardize,
    alpha: Standardize,
    w_read: Standardize,
}

impl StateEncoder {
    /// Statistics fixed from the configured scenario ranges.
    pub fn from_sampler(sampler: &ScenarioSampler) -> Self {
        let cfg = sampler.config();
        let j = match cfg.fleet {
            FleetMode::Fixed => cfg.latency_jitter,
            FleetMode::PerEpisode => 0.0,
        };
        let per_hop = sampler.per_hop_latency_ms();
        Self {
            n_servers: cfg.servers,
            n_chunks: cfg.chunks,
            read: Standardize::from_range(cfg.base_read_ms[0] * (1.0 - j), cfg.base_read_ms[1] * (1.0 + j)),
            write: Standardize::from_range(cfg.base_write_ms[0] * (1.0 - j), cfg.base_write_ms[1] * (1.0 + j)),
            capacity: Standardize::from_range(cfg.capacity[0] as f64, cfg.capacity[1] as f64),
            path: Standardize::from_values(sampler.gateway_hops().iter().map(|&h| h as f64 * per_hop)),
            alpha: Standardize::from_range(cfg.alpha[0], cfg.alpha[1]),
            w_read: Standardize::from_range(cfg.w_read[0], cfg.w_read[1]),
        }
    }

    /// Statistics taken from a single environment, for runs that replay one
    /// fixed scenario.
    pub fn from_env(env: &EnvState) -> Self {
        let s = &env.servers;
        Self {
            n_servers: env.n_servers(),
            n_chunks: env.n_chunks(),
            read: Standardize::from_values(s.iter().map(|x| x.base_read_ms)),
            write: Standardize::from_values(s.iter().map(|x| x.base_write_ms)),
            capacity: Standardize::from_values(s.iter().map(|x| x.capacity as f64)),
            path: Standardize::from_values((0..s.len()).map(|i| env.path_ms(i))),
            alpha: Standardize::from_range(env.load_factor_alpha, env.load_factor_alpha),
            w_read: Standardize::from_range(env.w_read, env.w_read),
        }
    }

    pub fn n_servers(&self) -> usize {
        self.n_servers
    }

    pub fn n_chunks(&self) -> usize {
        self.n_chunks
    }

    pub fn state_dim(&self) -> usize {
        4 * self.n_servers + 2 + 2 * self.n_chunks
    }

    pub fn encode(&self, env: &EnvState) -> Result<Vec<f64>> {
        if env.n_servers() != self.n_servers || env.n_chunks() != self.n_chunks {
            return Err(Error::ShapeMismatch(format!(
                "encoder expects N={}, K={}, environment has N={}, K={}",
                self.n_servers,
                self.n_chunks,
                env.n_servers(),
                env.n_chunks()
            )));
        }
        let mut f = Vec::with_capacity(self.state_dim());
        f.extend(env.servers.iter().map(|s| self.read.apply(s.base_read_ms)));
        f.extend(env.servers.iter().map(|s| self.write.apply(s.base_write_ms)));
        f.extend(env.servers.iter().map(|s| self.capacity.apply(s.capacity as f64)));
        f.extend((0..self.n_servers).map(|i| self.path.apply(env.path_ms(i))));
        f.push(self.alpha.apply(env.load_factor_alpha));
        f.push(self.w_read.apply(env.w_read));
        push_shares(&mut f, &env.chunk_popularity);
        push_shares(&mut f, &env.chunk_write_freq);
        Ok(f)
    }
}

/// Relative shares `K * x_k / sum(x) - 1`, zero for a uniform vector.
fn push_shares(out: &mut Vec<f64>, xs: &[f64]) {
    let total: f64 = xs.iter().sum();
    let k = xs.len() as f64;
    out.extend(xs.iter().map(|&x| k * x / total - 1.0));
}
