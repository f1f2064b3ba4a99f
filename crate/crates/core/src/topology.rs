//! Data-center network topologies: three-tier, k-ary fat-tree and DCell.
//!
//! Node ids follow construction order: hosts first, then switches layer by
//! layer (edge, aggregation, core) or the per-cell DCell switches. Links are
//! undirected and stored once as `(lo, hi)` pairs; `Topology` keeps an
//! adjacency list for breadth-first hop queries.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    ThreeTier,
    FatTree,
    Dcell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThreeTierSpec {
    pub core: usize,
    pub agg: usize,
    pub edge: usize,
    pub hosts_per_edge: usize,
    /// Aggregation switches each edge switch is wired to.
    pub edge_uplinks: usize,
}

impl Default for ThreeTierSpec {
    fn default() -> Self {
        Self {
            core: 2,
            agg: 4,
            edge: 8,
            hosts_per_edge: 4,
            edge_uplinks: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DcellSpec {
    /// Hosts per DCell_0.
    pub n: usize,
    pub level: usize,
}

impl Default for DcellSpec {
    fn default() -> Self {
        Self { n: 4, level: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopologySpec {
    pub kind: TopologyKind,
    pub fat_tree_k: usize,
    pub three_tier: ThreeTierSpec,
    pub dcell: DcellSpec,
    pub per_hop_latency_ms: f64,
}

impl Default for TopologySpec {
    fn default() -> Self {
        Self {
            kind: TopologyKind::FatTree,
            fat_tree_k: 4,
            three_tier: ThreeTierSpec::default(),
            dcell: DcellSpec::default(),
            per_hop_latency_ms: 0.5,
        }
    }
}

impl TopologySpec {
    pub fn fat_tree(k: usize, per_hop_latency_ms: f64) -> Self {
        Self {
            kind: TopologyKind::FatTree,
            fat_tree_k: k,
            per_hop_latency_ms,
            ..Self::default()
        }
    }

    pub fn three_tier(spec: ThreeTierSpec, per_hop_latency_ms: f64) -> Self {
        Self {
            kind: TopologyKind::ThreeTier,
            three_tier: spec,
            per_hop_latency_ms,
            ..Self::default()
        }
    }

    pub fn dcell(n: usize, level: usize, per_hop_latency_ms: f64) -> Self {
        Self {
            kind: TopologyKind::Dcell,
            dcell: DcellSpec { n, level },
            per_hop_latency_ms,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.per_hop_latency_ms.is_finite() && self.per_hop_latency_ms >= 0.0) {
            return Err(Error::InvalidSpec(format!(
                "per_hop_latency_ms must be finite and >= 0, got {}",
                self.per_hop_latency_ms
            )));
        }
        match self.kind {
            TopologyKind::FatTree => {
                let k = self.fat_tree_k;
                if k < 2 || !k.is_multiple_of(2) {
                    return Err(Error::InvalidSpec(format!(
                        "fat_tree_k must be an even integer >= 2, got {k}"
                    )));
                }
            }
            TopologyKind::ThreeTier => {
                let t = &self.three_tier;
                for (name, v) in [
                    ("core", t.core),
                    ("agg", t.agg),
                    ("edge", t.edge),
                    ("hosts_per_edge", t.hosts_per_edge),
                    ("edge_uplinks", t.edge_uplinks),
                ] {
                    if v == 0 {
                        return Err(Error::InvalidSpec(format!("three_tier.{name} must be >= 1")));
                    }
                }
            }
            TopologyKind::Dcell => {
                if self.dcell.n == 0 {
                    return Err(Error::InvalidSpec("dcell.n must be >= 1".into()));
                }
                if self.dcell.level > 1 {
                    return Err(Error::Unsupported(format!(
                        "dcell level {} (only levels 0 and 1 are built)",
                        self.dcell.level
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    Host,
    Edge,
    Agg,
    Core,
    DcellSwitch,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub id: NodeId,
    pub role: NodeRole,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    nodes: Vec<Node>,
    links: Vec<(NodeId, NodeId)>,
    adjacency: Vec<Vec<NodeId>>,
    host_ids: Vec<NodeId>,
    spec: TopologySpec,
}

struct Builder {
    nodes: Vec<Node>,
    links: Vec<(NodeId, NodeId)>,
}

impl Builder {
    fn new() -> Self {
        Self {
            nodes: Vec::new(),
            links: Vec::new(),
        }
    }

    fn add(&mut self, role: NodeRole, count: usize) -> Vec<NodeId> {
        let start = self.nodes.len();
        for id in start..start + count {
            self.nodes.push(Node { id, role });
        }
        (start..start + count).collect()
    }

    fn link(&mut self, a: NodeId, b: NodeId) {
        self.links.push((a.min(b), a.max(b)));
    }
}

/// Builds the canonical construction for `spec`.
pub fn build_topology(spec: &TopologySpec) -> Result<Topology> {
    spec.validate()?;
    let mut b = Builder::new();
    match spec.kind {
        TopologyKind::FatTree => build_fat_tree(&mut b, spec.fat_tree_k),
        TopologyKind::ThreeTier => build_three_tier(&mut b, &spec.three_tier),
        TopologyKind::Dcell => build_dcell(&mut b, spec.dcell.n, spec.dcell.level),
    }
    b.links.sort_unstable();
    b.links.dedup();

    let mut adjacency = vec![Vec::new(); b.nodes.len()];
    for &(u, v) in &b.links {
        adjacency[u].push(v);
        adjacency[v].push(u);
    }
    let host_ids = b
        .nodes
        .iter()
        .filter(|n| n.role == NodeRole::Host)
        .map(|n| n.id)
        .collect();
    Ok(Topology {
        nodes: b.nodes,
        links: b.links,
        adjacency,
        host_ids,
        spec: spec.clone(),
    })
}

fn build_fat_tree(b: &mut Builder, k: usize) {
    let half = k / 2;
    let hosts = b.add(NodeRole::Host, k * half * half);
    let edges = b.add(NodeRole::Edge, k * half);
    let aggs = b.add(NodeRole::Agg, k * half);
    let cores = b.add(NodeRole::Core, half * half);

    for pod in 0..k {
        for e in 0..half {
            let edge = edges[pod * half + e];
            for h in 0..half {
                b.link(hosts[(pod * half + e) * half + h], edge);
            }
            for a in 0..half {
                b.link(edge, aggs[pod * half + a]);
            }
        }
        // Aggregation switch `a` of every pod uplinks to core group `a`.
        for a in 0..half {
            for c in 0..half {
                b.link(aggs[pod * half + a], cores[a * half + c]);
            }
        }
    }
}

fn build_three_tier(b: &mut Builder, t: &ThreeTierSpec) {
    let hosts = b.add(NodeRole::Host, t.edge * t.hosts_per_edge);
    let edges = b.add(NodeRole::Edge, t.edge);
    let aggs = b.add(NodeRole::Agg, t.agg);
    let cores = b.add(NodeRole::Core, t.core);

    for (e, &edge) in edges.iter().enumerate() {
        for h in 0..t.hosts_per_edge {
            b.link(hosts[e * t.hosts_per_edge + h], edge);
        }
        let base = e * t.agg / t.edge;
        for u in 0..t.edge_uplinks.min(t.agg) {
            b.link(edge, aggs[(base + u) % t.agg]);
        }
    }
    for &agg in &aggs {
        for &core in &cores {
            b.link(agg, core);
        }
    }
}

fn build_dcell(b: &mut Builder, n: usize, level: usize) {
    let cells = if level == 0 { 1 } else { n + 1 };
    let hosts = b.add(NodeRole::Host, cells * n);
    let switches = b.add(NodeRole::DcellSwitch, cells);
    for (c, &sw) in switches.iter().enumerate() {
        for h in 0..n {
            b.link(hosts[c * n + h], sw);
        }
    }
    if level == 1 {
        // DCell_1 recursion: for i < j, host j-1 of cell i meets host i of cell j.
        for i in 0..cells {
            for j in i + 1..cells {
                b.link(hosts[i * n + j - 1], hosts[j * n + i]);
            }
        }
    }
}

impl Topology {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn links(&self) -> &[(NodeId, NodeId)] {
        &self.links
    }

    pub fn host_ids(&self) -> &[NodeId] {
        &self.host_ids
    }

    pub fn spec(&self) -> &TopologySpec {
        &self.spec
    }

    pub fn neighbors(&self, id: NodeId) -> &[NodeId] {
        &self.adjacency[id]
    }

    pub fn count_role(&self, role: NodeRole) -> usize {
        self.nodes.iter().filter(|n| n.role == role).count()
    }

    pub fn switch_count(&self) -> usize {
        self.nodes.len() - self.host_ids.len()
    }

    fn check_host(&self, id: NodeId) -> Result<()> {
        match self.nodes.get(id) {
            Some(n) if n.role == NodeRole::Host => Ok(()),
            _ => Err(Error::NotFound(format!("host id {id}"))),
        }
    }

    /// BFS hop distances from `src` to every node (`usize::MAX` if unreachable).
    pub fn hops_from(&self, src: NodeId) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.nodes.len()];
        let mut queue = VecDeque::new();
        dist[src] = 0;
        queue.push_back(src);
        while let Some(u) = queue.pop_front() {
            for &v in &self.adjacency[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    pub fn shortest_hops(&self, a: NodeId, b: NodeId) -> Result<usize> {
        self.check_host(a)?;
        self.check_host(b)?;
        if a == b {
            return Ok(0);
        }
        let d = self.hops_from(a)[b];
        if d == usize::MAX {
            return Err(Error::NotFound(format!("no path between hosts {a} and {b}")));
        }
        Ok(d)
    }

    pub fn path_latency_ms(&self, a: NodeId, b: NodeId) -> Result<f64> {
        Ok(self.shortest_hops(a, b)? as f64 * self.spec.per_hop_latency_ms)
    }

    pub fn is_connected(&self) -> bool {
        if self.nodes.is_empty() {
            return true;
        }
        self.hops_from(0).iter().all(|&d| d != usize::MAX)
    }

    /// Hop count -> number of unordered distinct host pairs at that distance.
    pub fn hop_histogram(&self) -> BTreeMap<usize, usize> {
        let mut hist = BTreeMap::new();
        for (i, &a) in self.host_ids.iter().enumerate() {
            let dist = self.hops_from(a);
            for &b in &self.host_ids[i + 1..] {
                *hist.entry(dist[b]).or_insert(0) += 1;
            }
        }
        hist
    }

    /// Plain-text inspection report used by the `topo` subcommand.
    pub fn describe(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let _ = writeln!(out, "kind: {:?}", self.spec.kind);
        let _ = writeln!(out, "nodes: {}", self.nodes.len());
        let _ = writeln!(out, "links: {}", self.links.len());
        let _ = writeln!(out, "hosts: {}", self.host_ids.len());
        let _ = writeln!(out, "switches: {}", self.switch_count());
        for role in [NodeRole::Edge, NodeRole::Agg, NodeRole::Core, NodeRole::DcellSwitch] {
            let c = self.count_role(role);
            if c > 0 {
                let _ = writeln!(out, "  {role:?}: {c}");
            }
        }
        let _ = writeln!(out, "host-pair hop histogram:");
        for (hops, count) in self.hop_histogram() {
            let _ = writeln!(out, "  {hops}: {count}");
        }
        out
    }
}
