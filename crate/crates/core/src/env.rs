//! The chunk placement problem: load-coupled read/write latencies, the
//! reciprocal-latency reward, the Random and Greedy baselines and an
//! exhaustive oracle for small instances.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::NodeId;

/// Upper bound on `N^K` accepted by [`brute_force_optimal`].
pub const BRUTE_FORCE_LIMIT: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerProfile {
    pub server_id: NodeId,
    pub base_read_ms: f64,
    pub base_write_ms: f64,
    pub capacity: u32,
    /// Hops from the client gateway host.
    pub gateway_hops: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub servers: Vec<ServerProfile>,
    pub chunk_popularity: Vec<f64>,
    pub chunk_write_freq: Vec<f64>,
    pub w_read: f64,
    pub w_write: f64,
    pub load_factor_alpha: f64,
    pub per_hop_latency_ms: f64,
}

impl EnvState {
    pub fn n_servers(&self) -> usize {
        self.servers.len()
    }

    pub fn n_chunks(&self) -> usize {
        self.chunk_popularity.len()
    }

    /// Gateway path latency of server `i`.
    pub fn path_ms(&self, i: usize) -> f64 {
        self.servers[i].gateway_hops as f64 * self.per_hop_latency_ms
    }

    /// Read-side cost seen by a load-blind client: base read plus gateway path.
    pub fn unloaded_read_ms(&self, i: usize) -> f64 {
        self.servers[i].base_read_ms + self.path_ms(i)
    }

    fn congestion(&self, i: usize, load: usize) -> f64 {
        1.0 + self.load_factor_alpha * load as f64 / self.servers[i].capacity as f64
    }

    /// Read latency of a chunk on server `i` when `load` chunks live there.
    pub fn read_latency_ms(&self, i: usize, load: usize) -> f64 {
        self.servers[i].base_read_ms * self.congestion(i, load) + self.path_ms(i)
    }

    pub fn write_latency_ms(&self, i: usize, load: usize) -> f64 {
        self.servers[i].base_write_ms * self.congestion(i, load) + self.path_ms(i)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.servers.is_empty() {
            return bad("environment needs at least one server".into());
        }
        if self.chunk_popularity.is_empty() {
            return bad("environment needs at least one chunk".into());
        }
        if self.chunk_write_freq.len() != self.chunk_popularity.len() {
            return bad(format!(
                "write frequencies ({}) and popularities ({}) differ in length",
                self.chunk_write_freq.len(),
                self.chunk_popularity.len()
            ));
        }
        for (i, s) in self.servers.iter().enumerate() {
            if !(s.base_read_ms > 0.0 && s.base_read_ms.is_finite())
                || !(s.base_write_ms > 0.0 && s.base_write_ms.is_finite())
            {
                return bad(format!("server {i}: base latencies must be positive"));
            }
            if s.capacity == 0 {
                return bad(format!("server {i}: capacity must be >= 1"));
            }
        }
        if self
            .chunk_popularity
            .iter()
            .chain(&self.chunk_write_freq)
            .any(|&p| !(p > 0.0 && p.is_finite()))
        {
            return bad("chunk popularities and write frequencies must be positive".into());
        }
        if !(self.w_read >= 0.0 && self.w_write >= 0.0) || (self.w_read + self.w_write - 1.0).abs() > 1e-9 {
            return bad(format!(
                "reward weights must be nonnegative and sum to 1, got ({}, {})",
                self.w_read, self.w_write
            ));
        }
        if !(self.load_factor_alpha >= 0.0 && self.load_factor_alpha.is_finite()) {
            return bad("load_factor_alpha must be >= 0".into());
        }
        if !(self.per_hop_latency_ms >= 0.0 && self.per_hop_latency_ms.is_finite()) {
            return bad("per_hop_latency_ms must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Placement {
    pub assignment: Vec<usize>,
}

impl Placement {
    pub fn new(assignment: Vec<usize>) -> Self {
        Self { assignment }
    }

    pub fn uniform(n_chunks: usize, server: usize) -> Self {
        Self::new(vec![server; n_chunks])
    }

    pub fn loads(&self, n_servers: usize) -> Vec<usize> {
        let mut loads = vec![0; n_servers];
        for &s in &self.assignment {
            loads[s] += 1;
        }
        loads
    }

    fn check(&self, env: &EnvState) -> Result<()> {
        if self.assignment.len() != env.n_chunks() {
            return Err(Error::InvalidArgument(format!(
                "placement has {} chunks, environment has {}",
                self.assignment.len(),
                env.n_chunks()
            )));
        }
        if let Some(&s) = self.assignment.iter().find(|&&s| s >= env.n_servers()) {
            return Err(Error::InvalidArgument(format!(
                "server index {s} out of range (N = {})",
                env.n_servers()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementOutcome {
    pub mean_read_ms: f64,
    pub mean_write_ms: f64,
    pub reward: f64,
    pub per_server_load: Vec<usize>,
}

/// Per-chunk read latencies under `p`.
pub fn chunk_read_latencies(env: &EnvState, p: &Placement) -> Result<Vec<f64>> {
    env.validate()?;
    p.check(env)?;
    let loads = p.loads(env.n_servers());
    Ok(p.assignment
        .iter()
        .map(|&s| env.read_latency_ms(s, loads[s]))
        .collect())
}

pub fn evaluate_placement(env: &EnvState, p: &Placement) -> Result<PlacementOutcome> {
    env.validate()?;
    p.check(env)?;
    Ok(evaluate_unchecked(env, p))
}

pub(crate) fn evaluate_unchecked(env: &EnvState, p: &Placement) -> PlacementOutcome {
    let loads = p.loads(env.n_servers());
    let (mut read_num, mut read_den, mut write_num, mut write_den) = (0.0, 0.0, 0.0, 0.0);
    for (k, &s) in p.assignment.iter().enumerate() {
        let pop = env.chunk_popularity[k];
        let wf = env.chunk_write_freq[k];
        read_num += pop * env.read_latency_ms(s, loads[s]);
        read_den += pop;
        write_num += wf * env.write_latency_ms(s, loads[s]);
        write_den += wf;
    }
    let mean_read_ms = read_num / read_den;
    let mean_write_ms = write_num / write_den;
    PlacementOutcome {
        mean_read_ms,
        mean_write_ms,
        // w_r/R + w_w/W over a common denominator: one rounding in the final division
        reward: (env.w_read * mean_write_ms + env.w_write * mean_read_ms) / (mean_read_ms * mean_write_ms),
        per_server_load: loads,
    }
}

/// Every chunk on an independently, uniformly drawn server.
pub fn random_placement<R: Rng + ?Sized>(env: &EnvState, rng: &mut R) -> Placement {
    let n = env.n_servers();
    Placement::new((0..env.n_chunks()).map(|_| rng.gen_range(0..n)).collect())
}

/// Every chunk on the server with the lowest unloaded read cost (base read
/// plus gateway path); ties go to the lowest index. Load is ignored.
pub fn greedy_placement(env: &EnvState) -> Placement {
    let mut best = 0;
    for i in 1..env.n_servers() {
        if env.unloaded_read_ms(i) < env.unloaded_read_ms(best) {
            best = i;
        }
    }
    Placement::uniform(env.n_chunks(), best)
}

/// Exhaustive search over all `N^K` placements in lexicographic order.
pub fn brute_force_optimal(env: &EnvState) -> Result<(Placement, PlacementOutcome)> {
    env.validate()?;
    let n = env.n_servers();
    let k = env.n_chunks();
    let total = (n as u64)
        .checked_pow(k as u32)
        .filter(|&t| t <= BRUTE_FORCE_LIMIT)
        .ok_or_else(|| {
            Error::InstanceTooLarge(format!("{n}^{k} placements exceed {BRUTE_FORCE_LIMIT}"))
        })?;

    let mut current = Placement::uniform(k, 0);
    let mut best = (current.clone(), evaluate_unchecked(env, &current));
    for _ in 1..total {
        // odometer increment, last chunk fastest
        for pos in (0..k).rev() {
            current.assignment[pos] += 1;
            if current.assignment[pos] < n {
                break;
            }
            current.assignment[pos] = 0;
        }
        let outcome = evaluate_unchecked(env, &current);
        if outcome.reward > best.1.reward {
            best = (current.clone(), outcome);
        }
    }
    Ok(best)
}
