//! Multi-seed training runs and their on-disk outputs.

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::diffusion::write_checkpoint;
use crate::error::{Error, Result};
use crate::trainer::{train, PolicyKind, ScenarioSource, TrainedRun, TrainingReport, WindowStats};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_TABLE: &str = "summary.txt";

const POLICIES: [PolicyKind; 4] = [
    PolicyKind::Random,
    PolicyKind::Greedy,
    PolicyKind::Diffusion,
    PolicyKind::DiffusionEval,
];

#[derive(Debug, Serialize)]
struct MetricsRow {
    episode: usize,
    policy: &'static str,
    reward: f64,
    mean_read_ms: f64,
    mean_write_ms: f64,
    critic_loss: Option<f64>,
    mean_q: Option<f64>,
    seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub wall_clock_s: f64,
    pub random: WindowStats,
    pub greedy: WindowStats,
    pub diffusion: WindowStats,
    pub diffusion_eval: WindowStats,
}

impl SeedSummary {
    pub fn of(report: &TrainingReport, window: usize, eval_interval: usize) -> Self {
        // the eval series is sparse; cover the same trailing episodes
        let eval_window = if eval_interval == 0 { 0 } else { window.div_ceil(eval_interval) };
        Self {
            seed: report.seed,
            wall_clock_s: report.wall_clock_s,
            random: report.final_window(PolicyKind::Random, window),
            greedy: report.final_window(PolicyKind::Greedy, window),
            diffusion: report.final_window(PolicyKind::Diffusion, window),
            diffusion_eval: report.final_window(PolicyKind::DiffusionEval, eval_window),
        }
    }

    pub fn stats(&self, policy: PolicyKind) -> WindowStats {
        match policy {
            PolicyKind::Random => self.random,
            PolicyKind::Greedy => self.greedy,
            PolicyKind::Diffusion => self.diffusion,
            PolicyKind::DiffusionEval => self.diffusion_eval,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub window: usize,
    pub seeds: Vec<SeedSummary>,
}

impl EvalSummary {
    /// Seed-averaged final-window means in the order random, greedy,
    /// diffusion, diffusion_eval.
    pub fn mean_rewards(&self) -> [f64; 4] {
        POLICIES.map(|p| {
            let n = self.seeds.len() as f64;
            self.seeds.iter().map(|s| s.stats(p).mean).sum::<f64>() / n
        })
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "final {}-episode reward over {} episodes (mean ± std)",
            self.window, self.episodes
        );
        let _ = write!(out, "{:>6}", "seed");
        for p in POLICIES {
            let _ = write!(out, "  {:>21}", p.name());
        }
        out.push('\n');
        for s in &self.seeds {
            let _ = write!(out, "{:>6}", s.seed);
            for p in POLICIES {
                let w = s.stats(p);
                let _ = write!(out, "  {:>10.5} ± {:<8.5}", w.mean, w.std);
            }
            out.push('\n');
        }
        let _ = write!(out, "{:>6}", "mean");
        for m in self.mean_rewards() {
            let _ = write!(out, "  {:>10.5}{:11}", m, "");
        }
        out.push('\n');
        out
    }
}

/// Trains one policy per seed, each seed on its own thread.
pub fn run_seeds(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<TrainedRun>> {
    cfg.validate()?;
    let (_, sampler) = cfg.build()?;
    let echo = cfg.to_toml();
    std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let source = ScenarioSource::Sampled(sampler.clone());
                let echo = echo.clone();
                scope.spawn(move || {
                    train(&cfg.policy, source, cfg.run.episodes, cfg.run.eval_interval, seed, echo)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect()
    })
}

/// Writes the per-episode metrics of all runs, seed by seed.
pub fn write_metrics(path: &Path, runs: &[TrainedRun]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(fs::File::create(path)?));
    if runs.iter().all(|r| r.report.records.is_empty()) {
        w.write_record([
            "episode",
            "policy",
            "reward",
            "mean_read_ms",
            "mean_write_ms",
            "critic_loss",
            "mean_q",
            "seed",
        ])?;
    }
    for run in runs {
        for r in &run.report.records {
            w.serialize(MetricsRow {
                episode: r.episode,
                policy: r.policy.name(),
                reward: r.reward,
                mean_read_ms: r.mean_read_ms,
                mean_write_ms: r.mean_write_ms,
                critic_loss: r.critic_loss,
                mean_q: r.mean_q,
                seed: run.report.seed,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn checkpoint_path(out_dir: &Path, seed: u64) -> PathBuf {
    out_dir.join(format!("policy_seed{seed}.bin"))
}

/// Trains every configured seed and writes metrics, summaries and one
/// checkpoint per seed into `out_dir`.
pub fn run_eval(cfg: &ExperimentConfig, seeds: &[u64], out_dir: &Path) -> Result<EvalSummary> {
    if seeds.is_empty() {
        return Err(Error::config("run.num_seeds", "no seeds to run"));
    }
    fs::create_dir_all(out_dir)?;
    let runs = run_seeds(cfg, seeds)?;
    write_metrics(&out_dir.join(METRICS_FILE), &runs)?;
    for run in &runs {
        let mut f = BufWriter::new(fs::File::create(checkpoint_path(out_dir, run.report.seed))?);
        write_checkpoint(&mut f, &run.policy, &run.schedule)?;
    }
    let summary = EvalSummary {
        episodes: cfg.run.episodes,
        window: cfg.run.window,
        seeds: runs
            .iter()
            .map(|r| SeedSummary::of(&r.report, cfg.run.window, cfg.run.eval_interval))
            .collect(),
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::format("summary", e.to_string()))?;
    fs::write(out_dir.join(SUMMARY_JSON), json)?;
    fs::write(out_dir.join(SUMMARY_TABLE), summary.table())?;
    Ok(summary)
}
