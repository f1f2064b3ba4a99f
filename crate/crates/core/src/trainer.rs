//! Actor-critic training of the diffusion policy.
//!
//! Episodes are one-shot: a scenario is drawn, the policy proposes logits,
//! the discretized placement is scored and the critic regresses onto that
//! immediate reward. The actor ascends the critic's value by differentiating
//! through the full reverse chain. Random and Greedy are scored on the same
//! scenario stream.

use std::collections::VecDeque;
use std::time::Instant;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    chain_backward, logits_to_placement, make_schedule, run_chain, sample_action, ActionLogits, ChainNoise,
    LogitMode, NoiseSchedule, PolicyParams,
};
use crate::env::{evaluate_placement, greedy_placement, random_placement, EnvState, PlacementOutcome};
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, Mlp, MlpGrads};
use crate::scenario::{ScenarioSampler, StateEncoder};

/// How the critic sees an action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionEncoding {
    /// Logits fed as-is.
    Raw,
    /// Per-chunk softmax over servers, i.e. the placement distribution the
    /// logits induce.
    RowSoftmax,
    /// Row softmax followed by three per-server sums of it: chunk share, read
    /// popularity mass and write mass. Needs the [`StateEncoder`] layout.
    ServerTraffic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub time_dim: usize,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub activation: Activation,
    pub critic_encoding: ActionEncoding,
    /// Weight of the mean squared logit subtracted from the actor objective.
    pub action_l2: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub warmup: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            steps: 5,
            beta_min: 0.1,
            beta_max: 0.5,
            time_dim: 16,
            actor_hidden: vec![128, 128],
            critic_hidden: vec![128, 128],
            activation: Activation::Silu,
            critic_encoding: ActionEncoding::ServerTraffic,
            action_l2: 3e-4,
            actor_lr: 3e-4,
            critic_lr: 1e-3,
            buffer_capacity: 10_000,
            batch_size: 64,
            warmup: 256,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        make_schedule(self.steps, self.beta_min, self.beta_max)
            .map_err(|e| Error::config("policy.steps/beta_min/beta_max", e.to_string()))?;
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::config("policy.time_dim", "must be a positive even number"));
        }
        if self.actor_hidden.contains(&0) {
            return Err(Error::config("policy.actor_hidden", "layer sizes must be >= 1"));
        }
        if self.critic_hidden.contains(&0) {
            return Err(Error::config("policy.critic_hidden", "layer sizes must be >= 1"));
        }
        for (key, lr) in [("policy.actor_lr", self.actor_lr), ("policy.critic_lr", self.critic_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config(key, "must be > 0"));
            }
        }
        if !(self.action_l2 >= 0.0 && self.action_l2.is_finite()) {
            return Err(Error::config("policy.action_l2", "must be >= 0"));
        }
        if self.buffer_capacity == 0 {
            return Err(Error::config("policy.buffer_capacity", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("policy.batch_size", "must be >= 1"));
        }
        Ok(())
    }
}

/// Q(state, action) network. Input layout is `[state | encoded action]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticParams {
    pub net: Mlp,
    pub n_chunks: usize,
    pub n_servers: usize,
    pub state_dim: usize,
    pub encoding: ActionEncoding,
}

impl CriticParams {
    pub fn new<R: Rng + ?Sized>(
        n_chunks: usize,
        n_servers: usize,
        state_dim: usize,
        hidden: &[usize],
        activation: Activation,
        encoding: ActionEncoding,
        rng: &mut R,
    ) -> Self {
        let input = state_dim + Self::feature_dim(encoding, n_chunks, n_servers);
        Self {
            net: Mlp::new(&Self::layer_sizes(input, hidden), activation, rng),
            n_chunks,
            n_servers,
            state_dim,
            encoding,
        }
    }

    pub fn from_net(net: Mlp, n_chunks: usize, n_servers: usize, state_dim: usize, encoding: ActionEncoding) -> Result<Self> {
        let features = Self::feature_dim(encoding, n_chunks, n_servers);
        if net.input_dim() != state_dim + features || net.output_dim() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "critic network {:?} does not map state {state_dim} + action features {features} to a scalar",
                net.sizes(),
            )));
        }
        Ok(Self {
            net,
            n_chunks,
            n_servers,
            state_dim,
            encoding,
        })
    }

    fn feature_dim(encoding: ActionEncoding, n_chunks: usize, n_servers: usize) -> usize {
        match encoding {
            ActionEncoding::Raw | ActionEncoding::RowSoftmax => n_chunks * n_servers,
            ActionEncoding::ServerTraffic => n_chunks * n_servers + 3 * n_servers,
        }
    }

    fn layer_sizes(input: usize, hidden: &[usize]) -> Vec<usize> {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        sizes
    }

    fn action_dim(&self) -> usize {
        self.n_chunks * self.n_servers
    }

    fn check(&self, states: &ArrayView2<f64>, actions: &ArrayView2<f64>) -> Result<()> {
        if states.ncols() != self.state_dim || actions.ncols() != self.action_dim() || states.nrows() != actions.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "critic expects state {} / action {}, got {:?} / {:?}",
                self.state_dim,
                self.action_dim(),
                states.shape(),
                actions.shape()
            )));
        }
        if self.encoding == ActionEncoding::ServerTraffic && self.state_dim != 4 * self.n_servers + 2 + 2 * self.n_chunks {
            return Err(Error::ShapeMismatch(format!(
                "server_traffic encoding needs the encoder state layout, got state dim {}",
                self.state_dim
            )));
        }
        Ok(())
    }

    /// Per-chunk weights of the traffic sums for one state row: chunk count,
    /// read share, write share. Shares are decoded from `K * share - 1`.
    fn traffic_weights(&self, state: ndarray::ArrayView1<f64>) -> [Array1<f64>; 3] {
        let (k, n) = (self.n_chunks, self.n_servers);
        let kf = k as f64;
        let pop = 4 * n + 2;
        let decode = |off: usize| state.slice(s![off..off + k]).mapv(|f| (f + 1.0) / kf);
        [Array1::from_elem(k, 1.0 / kf), decode(pop), decode(pop + k)]
    }

    /// Critic input features of a batch of actions, and the row-softmax
    /// probabilities when the encoding uses them.
    fn encode(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        if self.encoding == ActionEncoding::Raw {
            return (actions.to_owned(), Array2::zeros((0, 0)));
        }
        let (k, n) = (self.n_chunks, self.n_servers);
        let mut probs = actions.to_owned();
        for mut row in probs.rows_mut() {
            for mut chunk in row.exact_chunks_mut(n) {
                let max = chunk.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                chunk.mapv_inplace(|v| (v - max).exp());
                let total = chunk.sum();
                chunk /= total;
            }
        }
        if self.encoding == ActionEncoding::RowSoftmax {
            return (probs.clone(), probs);
        }
        let mut features = Array2::zeros((probs.nrows(), k * n + 3 * n));
        features.slice_mut(s![.., ..k * n]).assign(&probs);
        for (b, prow) in probs.rows().into_iter().enumerate() {
            let p = prow.into_shape_with_order((k, n)).expect("row-major");
            for (j, w) in self.traffic_weights(states.row(b)).iter().enumerate() {
                let sums = p.t().dot(w);
                features.slice_mut(s![b, k * n + j * n..k * n + (j + 1) * n]).assign(&sums);
            }
        }
        (features, probs)
    }

    fn input(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let (features, probs) = self.encode(states, actions);
        let sd = self.state_dim;
        let mut input = Array2::zeros((states.nrows(), sd + features.ncols()));
        input.slice_mut(s![.., ..sd]).assign(&states);
        input.slice_mut(s![.., sd..]).assign(&features);
        (input, probs)
    }

    /// Q-values for a batch.
    pub fn eval_batch(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.check(&states, &actions)?;
        let (input, _) = self.input(states, actions);
        Ok(self.net.forward(input.view())?.column(0).to_owned())
    }

    /// Q-values plus gradients of `sum(dq ⊙ q)` w.r.t. critic weights and
    /// w.r.t. the raw actions.
    fn eval_with_grads(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
        dq: impl Fn(&Array1<f64>) -> Array1<f64>,
    ) -> Result<(Array1<f64>, MlpGrads, Array2<f64>)> {
        self.check(&states, &actions)?;
        let (input, probs) = self.input(states, actions);
        let (out, cache) = self.net.forward_cached(input.view())?;
        let q = out.column(0).to_owned();
        let d_out = dq(&q).insert_axis(Axis(1));
        let mut grads = self.net.zero_grads();
        let d_input = self.net.backward(&cache, d_out.view(), &mut grads);
        let (k, n, sd) = (self.n_chunks, self.n_servers, self.state_dim);
        if self.encoding == ActionEncoding::Raw {
            return Ok((q, grads, d_input.slice(s![.., sd..]).to_owned()));
        }
        let mut d = d_input.slice(s![.., sd..sd + k * n]).to_owned();
        if self.encoding == ActionEncoding::ServerTraffic {
            for (b, mut drow) in d.rows_mut().into_iter().enumerate() {
                let mut dp = drow.view_mut().into_shape_with_order((k, n)).expect("row-major");
                for (j, w) in self.traffic_weights(states.row(b)).iter().enumerate() {
                    let off = sd + k * n + j * n;
                    let d_sums = d_input.slice(s![b, off..off + n]);
                    for (mut dp_row, &wk) in dp.rows_mut().into_iter().zip(w) {
                        dp_row.scaled_add(wk, &d_sums);
                    }
                }
            }
        }
        for (mut drow, prow) in d.rows_mut().into_iter().zip(probs.rows()) {
            for (mut dc, pc) in drow.exact_chunks_mut(n).into_iter().zip(prow.exact_chunks(n)) {
                let dot: f64 = dc.iter().zip(pc.iter()).map(|(g, p)| g * p).sum();
                dc.zip_mut_with(&pc, |g, &p| *g = p * (*g - dot));
            }
        }
        Ok((q, grads, d))
    }
}

fn row(v: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, v.len()), v).expect("contiguous")
}

pub fn critic_eval(c: &CriticParams, state: &[f64], action: &ActionLogits) -> Result<f64> {
    let flat = action.flat();
    Ok(c.eval_batch(row(state), row(&flat))?[0])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: ActionLogits,
    pub reward: f64,
    pub seed: u64,
}

fn stack_rows<'a>(rows: impl ExactSizeIterator<Item = &'a [f64]>, width: usize) -> Array2<f64> {
    let n = rows.len();
    let mut out = Array2::zeros((n, width));
    for (mut dst, src) in out.rows_mut().into_iter().zip(rows) {
        dst.assign(&ndarray::ArrayView1::from(src));
    }
    out
}

fn batch_arrays(batch: &[&Transition]) -> Result<(Array2<f64>, Array2<f64>, Array1<f64>)> {
    let first = batch.first().ok_or(Error::EmptyBatch)?;
    let sd = first.state.len();
    let ad = first.action.0.len();
    if batch.iter().any(|t| t.state.len() != sd || t.action.0.len() != ad) {
        return Err(Error::ShapeMismatch("transitions in a batch differ in shape".into()));
    }
    let states = stack_rows(batch.iter().map(|t| t.state.as_slice()), sd);
    let mut actions = Array2::zeros((batch.len(), ad));
    for (mut dst, t) in actions.rows_mut().into_iter().zip(batch) {
        dst.assign(&ndarray::ArrayView1::from(t.action.0.as_slice().expect("standard layout")));
    }
    let rewards = batch.iter().map(|t| t.reward).collect();
    Ok((states, actions, rewards))
}

/// Mean squared error of the critic on `batch` and its weight gradient.
pub fn critic_loss_and_grad(batch: &[&Transition], c: &CriticParams) -> Result<(f64, MlpGrads)> {
    let (states, actions, rewards) = batch_arrays(batch)?;
    let b = batch.len() as f64;
    let (q, grads, _) = c.eval_with_grads(states.view(), actions.view(), |q| (q - &rewards) * (2.0 / b))?;
    let loss = (&q - &rewards).mapv(|e| e * e).sum() / b;
    Ok((loss, grads))
}

/// One Adam step on the critic's regression loss; returns the pre-step loss.
pub fn critic_update(batch: &[&Transition], c: &mut CriticParams, opt: &mut Adam) -> Result<f64> {
    let (loss, grads) = critic_loss_and_grad(batch, c)?;
    opt.step(&mut c.net, &grads);
    Ok(loss)
}

/// Actor objective on one batch: mean critic value of the actions produced
/// from `noise`, minus `action_l2` times the mean squared logit. Returns
/// `(objective, mean_q, gradient of the objective)`; the critic is held fixed.
pub fn actor_objective_and_grad(
    states: ArrayView2<f64>,
    p: &PolicyParams,
    c: &CriticParams,
    schedule: &NoiseSchedule,
    noise: &ChainNoise,
    action_l2: f64,
) -> Result<(f64, f64, MlpGrads)> {
    let (x0, tape) = run_chain(states, p, schedule, noise, true)?;
    let b = states.nrows() as f64;
    let (q, _, mut d_x0) = c.eval_with_grads(states, x0.view(), |q| Array1::from_elem(q.len(), 1.0 / b))?;
    let per_elem = 1.0 / x0.len() as f64;
    let penalty = action_l2 * x0.mapv(|x| x * x).sum() * per_elem;
    d_x0.scaled_add(-2.0 * action_l2 * per_elem, &x0);
    let grads = chain_backward(p, schedule, &tape.expect("recorded"), d_x0.view());
    let mean_q = q.sum() / b;
    Ok((mean_q - penalty, mean_q, grads))
}

/// One Adam ascent step on the denoiser; returns the pre-step mean Q.
pub fn actor_update<R: Rng + ?Sized>(
    states: ArrayView2<f64>,
    p: &mut PolicyParams,
    opt: &mut Adam,
    c: &CriticParams,
    schedule: &NoiseSchedule,
    action_l2: f64,
    rng: &mut R,
) -> Result<f64> {
    if states.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let noise = ChainNoise::draw(states.nrows(), p.action_dim(), schedule.steps(), false, rng);
    let (_, mean_q, mut grads) = actor_objective_and_grad(states, p, c, schedule, &noise, action_l2)?;
    grads.scale(-1.0);
    opt.step(&mut p.denoiser, &grads);
    Ok(mean_q)
}

/// Central-difference gradient check. `f` returns the value and analytic
/// gradient at a parameter vector; the result is the largest relative error
/// with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(mut f: F, params: &[f64], epsilon: f64) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(params);
    let mut p = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + epsilon;
        let up = f(&p).0;
        p[i] = orig - epsilon;
        let down = f(&p).0;
        p[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

/// Bounded FIFO of transitions with seeded uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    /// `n` draws with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&Transition> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| &self.items[rng.gen_range(0..self.items.len())]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Random,
    Greedy,
    Diffusion,
    /// Deterministic (argmax) diffusion policy, logged every eval interval.
    DiffusionEval,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Random => "random",
            PolicyKind::Greedy => "greedy",
            PolicyKind::Diffusion => "diffusion",
            PolicyKind::DiffusionEval => "diffusion_eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub policy: PolicyKind,
    pub reward: f64,
    pub mean_read_ms: f64,
    pub mean_write_ms: f64,
    pub critic_loss: Option<f64>,
    pub mean_q: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl WindowStats {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                count: 0,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        Self {
            mean,
            std: var.sqrt(),
            count: n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub seed: u64,
    pub episodes: usize,
    /// Records in episode order; within an episode: random, greedy, diffusion,
    /// then the optional deterministic evaluation.
    pub records: Vec<EpisodeRecord>,
    pub wall_clock_s: f64,
    pub config_echo: String,
}

impl TrainingReport {
    pub fn rewards(&self, policy: PolicyKind) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.policy == policy)
            .map(|r| r.reward)
            .collect()
    }

    pub fn moving_average(&self, policy: PolicyKind, window: usize) -> Vec<f64> {
        moving_average(&self.rewards(policy), window)
    }

    pub fn final_window(&self, policy: PolicyKind, window: usize) -> WindowStats {
        let r = self.rewards(policy);
        WindowStats::of(&r[r.len().saturating_sub(window)..])
    }
}

/// Trailing mean over up to `window` values ending at each index.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// Where episodes come from.
#[derive(Debug, Clone)]
pub enum ScenarioSource {
    Sampled(ScenarioSampler),
    /// The same environment every episode.
    Fixed(EnvState),
}

impl ScenarioSource {
    fn next<R: Rng + ?Sized>(&self, rng: &mut R) -> EnvState {
        match self {
            ScenarioSource::Sampled(s) => s.sample(rng),
            ScenarioSource::Fixed(env) => env.clone(),
        }
    }

    pub fn encoder(&self) -> StateEncoder {
        match self {
            ScenarioSource::Sampled(s) => StateEncoder::from_sampler(s),
            ScenarioSource::Fixed(env) => StateEncoder::from_env(env),
        }
    }
}

/// Independent generator streams derived from one run seed.
mod stream {
    pub const INIT: u64 = 0;
    pub const SCENARIO: u64 = 1;
    pub const EXPLORE: u64 = 2;
    pub const RANDOM_BASELINE: u64 = 3;
    pub const REPLAY: u64 = 4;
    pub const ACTOR_NOISE: u64 = 5;
    pub const EVAL: u64 = 6;
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mutable training state for one seed.
pub struct Trainer {
    cfg: PolicyConfig,
    source: ScenarioSource,
    encoder: StateEncoder,
    schedule: NoiseSchedule,
    pub policy: PolicyParams,
    pub critic: CriticParams,
    actor_opt: Adam,
    critic_opt: Adam,
    buffer: ReplayBuffer,
    seed: u64,
    episode: usize,
    rngs: [ChaCha8Rng; 6],
}

impl Trainer {
    pub fn new(cfg: &PolicyConfig, source: ScenarioSource, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let encoder = source.encoder();
        let schedule = make_schedule(cfg.steps, cfg.beta_min, cfg.beta_max)?;
        let (k, n, sd) = (encoder.n_chunks(), encoder.n_servers(), encoder.state_dim());
        let mut init = stream_rng(seed, stream::INIT);
        let policy = PolicyParams::new(k, n, sd, cfg.time_dim, &cfg.actor_hidden, cfg.activation, &mut init);
        let critic = CriticParams::new(k, n, sd, &cfg.critic_hidden, cfg.activation, cfg.critic_encoding, &mut init);
        Ok(Self {
            actor_opt: Adam::new(&policy.denoiser, cfg.actor_lr),
            critic_opt: Adam::new(&critic.net, cfg.critic_lr),
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            cfg: cfg.clone(),
            source,
            encoder,
            schedule,
            policy,
            critic,
            seed,
            episode: 0,
            rngs: [
                stream_rng(seed, stream::SCENARIO),
                stream_rng(seed, stream::EXPLORE),
                stream_rng(seed, stream::RANDOM_BASELINE),
                stream_rng(seed, stream::REPLAY),
                stream_rng(seed, stream::ACTOR_NOISE),
                stream_rng(seed, stream::EVAL),
            ],
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn encoder(&self) -> &StateEncoder {
        &self.encoder
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    /// Runs one episode and appends its records to `out`.
    pub fn step(&mut self, eval_interval: usize, out: &mut Vec<EpisodeRecord>) -> Result<()> {
        let [scen_rng, explore_rng, random_rng, replay_rng, actor_rng, eval_rng] = &mut self.rngs;
        let episode = self.episode;
        let env = self.source.next(scen_rng);
        let state = self.encoder.encode(&env)?;

        let record = |policy, o: &PlacementOutcome, loss, q| EpisodeRecord {
            episode,
            policy,
            reward: o.reward,
            mean_read_ms: o.mean_read_ms,
            mean_write_ms: o.mean_write_ms,
            critic_loss: loss,
            mean_q: q,
        };

        let random = evaluate_placement(&env, &random_placement(&env, random_rng))?;
        let greedy = evaluate_placement(&env, &greedy_placement(&env))?;

        let action = sample_action(&state, &self.policy, &self.schedule, explore_rng, true)?;
        let placement = logits_to_placement(&action, LogitMode::SoftmaxSample, explore_rng);
        let outcome = evaluate_placement(&env, &placement)?;
        self.buffer.push(Transition {
            state: state.clone(),
            action,
            reward: outcome.reward,
            seed: self.seed,
        });

        let (mut loss, mut mean_q) = (None, None);
        if episode >= self.cfg.warmup {
            let batch = self.buffer.sample(self.cfg.batch_size, replay_rng);
            loss = Some(critic_update(&batch, &mut self.critic, &mut self.critic_opt)?);
            let (states, _, _) = batch_arrays(&batch)?;
            mean_q = Some(actor_update(
                states.view(),
                &mut self.policy,
                &mut self.actor_opt,
                &self.critic,
                &self.schedule,
                self.cfg.action_l2,
                actor_rng,
            )?);
        }

        out.push(record(PolicyKind::Random, &random, None, None));
        out.push(record(PolicyKind::Greedy, &greedy, None, None));
        out.push(record(PolicyKind::Diffusion, &outcome, loss, mean_q));

        if eval_interval > 0 && (episode + 1).is_multiple_of(eval_interval) {
            let det = sample_action(&state, &self.policy, &self.schedule, eval_rng, false)?;
            let o = evaluate_placement(&env, &logits_to_placement(&det, LogitMode::Argmax, eval_rng))?;
            out.push(record(PolicyKind::DiffusionEval, &o, None, None));
        }
        self.episode += 1;
        Ok(())
    }

    /// Reward of the deterministic (argmax) policy on `env`, drawing `x_T`
    /// from the evaluation stream.
    pub fn evaluate_deterministic(&mut self, env: &EnvState) -> Result<PlacementOutcome> {
        let state = self.encoder.encode(env)?;
        let rng = &mut self.rngs[5];
        let det = sample_action(&state, &self.policy, &self.schedule, rng, false)?;
        evaluate_placement(env, &logits_to_placement(&det, LogitMode::Argmax, rng))
    }
}

/// A finished run: report plus the trained actor.
pub struct TrainedRun {
    pub report: TrainingReport,
    pub policy: PolicyParams,
    pub schedule: NoiseSchedule,
}

pub fn train(
    cfg: &PolicyConfig,
    source: ScenarioSource,
    episodes: usize,
    eval_interval: usize,
    seed: u64,
    config_echo: String,
) -> Result<TrainedRun> {
    let start = Instant::now();
    let mut trainer = Trainer::new(cfg, source, seed)?;
    let mut records = Vec::with_capacity(episodes * 3 + episodes / eval_interval.max(1));
    for _ in 0..episodes {
        trainer.step(eval_interval, &mut records)?;
    }
    Ok(TrainedRun {
        report: TrainingReport {
            seed,
            episodes,
            records,
            wall_clock_s: start.elapsed().as_secs_f64(),
            config_echo,
        },
        schedule: trainer.schedule.clone(),
        policy: trainer.policy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::fixtures::two_by_two;
    use crate::nn::Dense;
    use ndarray::array;

    fn tiny_cfg() -> PolicyConfig {
        PolicyConfig {
            steps: 2,
            actor_hidden: vec![8],
            critic_hidden: vec![8],
            batch_size: 4,
            warmup: 2,
            ..PolicyConfig::default()
        }
    }

    fn transition(state: Vec<f64>, action: Vec<f64>, k: usize, n: usize, reward: f64) -> Transition {
        Transition {
            state,
            action: ActionLogits::from_flat(k, n, action).unwrap(),
            reward,
            seed: 0,
        }
    }

    #[test]
    fn zero_critic_is_zero() {
        let c = CriticParams::from_net(
            Mlp::zeros(&[6, 4, 1], Activation::Silu),
            2,
            2,
            2,
            ActionEncoding::RowSoftmax,
        )
        .unwrap();
        let a = ActionLogits::from_flat(2, 2, vec![1.0, -3.0, 0.5, 2.0]).unwrap();
        assert_eq!(critic_eval(&c, &[0.3, -0.7], &a).unwrap(), 0.0);
    }

    #[test]
    fn linear_critic_dot_product() {
        // state dim 1, action 1x2, raw encoding: Q = 0.5*s + 2*a0 - 1*a1
        let net = Mlp::from_layers(
            vec![Dense {
                weight: array![[0.5, 2.0, -1.0]],
                bias: array![0.0],
            }],
            Activation::Identity,
        )
        .unwrap();
        let c = CriticParams::from_net(net, 1, 2, 1, ActionEncoding::Raw).unwrap();
        let a = ActionLogits::from_flat(1, 2, vec![3.0, 4.0]).unwrap();
        let q = critic_eval(&c, &[2.0], &a).unwrap();
        assert_eq!(q, 0.5 * 2.0 + 2.0 * 3.0 - 4.0);
        assert_eq!(q, critic_eval(&c, &[2.0], &a).unwrap());
    }

    #[test]
    fn critic_shape_mismatch() {
        let c = CriticParams::from_net(Mlp::zeros(&[6, 1], Activation::Identity), 2, 2, 2, ActionEncoding::Raw).unwrap();
        let a = ActionLogits::zeros(2, 3);
        assert!(matches!(critic_eval(&c, &[0.0, 0.0], &a), Err(Error::ShapeMismatch(_))));
        assert!(CriticParams::from_net(Mlp::zeros(&[5, 1], Activation::Identity), 2, 2, 2, ActionEncoding::Raw).is_err());
    }

    #[test]
    fn critic_update_rejects_empty_batch() {
        let mut c = CriticParams::from_net(Mlp::zeros(&[3, 1], Activation::Identity), 1, 2, 1, ActionEncoding::Raw).unwrap();
        let mut opt = Adam::new(&c.net, 1e-3);
        assert!(matches!(critic_update(&[], &mut c, &mut opt), Err(Error::EmptyBatch)));
    }

    #[test]
    fn already_fit_batch_is_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut c = CriticParams::new(2, 2, 3, &[6], Activation::Silu, ActionEncoding::RowSoftmax, &mut rng);
        let mut ts = Vec::new();
        for i in 0..5 {
            let s = vec![i as f64 * 0.1, -0.2, 0.4];
            let a = vec![0.1 * i as f64, 1.0, -1.0, 0.5];
            let q = critic_eval(&c, &s, &ActionLogits::from_flat(2, 2, a.clone()).unwrap()).unwrap();
            ts.push(transition(s, a, 2, 2, q));
        }
        let before = c.clone();
        let mut opt = Adam::new(&c.net, 1e-3);
        let batch: Vec<&Transition> = ts.iter().collect();
        let loss = critic_update(&batch, &mut c, &mut opt).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(c, before);
    }

    #[test]
    fn scalar_critic_gradient_matches_formula_and_differences() {
        // Q = w * x with a single weight; loss (wx - r)^2, gradient 2(wx - r)x
        let (x, r, w) = (1.5, 0.4, 0.7);
        let mk = |w: f64| {
            CriticParams::from_net(
                Mlp::from_layers(vec![Dense { weight: array![[w]], bias: array![0.0] }], Activation::Identity).unwrap(),
                1,
                1,
                0,
                ActionEncoding::Raw,
            )
            .unwrap()
        };
        let t = transition(vec![], vec![x], 1, 1, r);
        let (_, grads) = critic_loss_and_grad(&[&t], &mk(w)).unwrap();
        let expected = 2.0 * (w * x - r) * x;
        assert!((grads.weight[0][[0, 0]] - expected).abs() < 1e-15);

        let h = 1e-6;
        let loss = |w: f64| critic_loss_and_grad(&[&t], &mk(w)).unwrap().0;
        let numeric = (loss(w + h) - loss(w - h)) / (2.0 * h);
        assert!((numeric - expected).abs() / expected.abs() < 1e-6);
    }

    #[test]
    fn repeated_critic_updates_converge() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = CriticParams::new(2, 2, 2, &[8], Activation::Silu, ActionEncoding::RowSoftmax, &mut rng);
        let t = transition(vec![0.2, -0.4], vec![1.0, 0.0, -0.5, 0.5], 2, 2, 0.05);
        let mut opt = Adam::new(&c.net, 1e-3);
        let mut loss = f64::INFINITY;
        for _ in 0..2000 {
            loss = critic_update(&[&t], &mut c, &mut opt).unwrap();
        }
        assert!(loss < 1e-6, "loss {loss}");
    }

    #[test]
    fn zero_critic_leaves_actor_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sched = make_schedule(2, 0.1, 0.5).unwrap();
        let mut p = PolicyParams::new(2, 2, 3, 16, &[8], Activation::Silu, &mut rng);
        let c = CriticParams::from_net(Mlp::zeros(&[7, 8, 1], Activation::Silu), 2, 2, 3, ActionEncoding::RowSoftmax).unwrap();
        let before = p.clone();
        let mut opt = Adam::new(&p.denoiser, 1e-3);
        let states = Array2::from_shape_fn((4, 3), |(i, j)| (i + j) as f64 * 0.1);
        let q = actor_update(states.view(), &mut p, &mut opt, &c, &sched, 0.0, &mut rng).unwrap();
        assert_eq!(q, 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn penalty_alone_shrinks_actions() {
        // zero critic: the objective reduces to -action_l2 * mean(x0^2)
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sched = make_schedule(2, 0.1, 0.5).unwrap();
        let mut p = PolicyParams::new(2, 2, 3, 16, &[8], Activation::Silu, &mut rng);
        let c = CriticParams::from_net(Mlp::zeros(&[7, 8, 1], Activation::Silu), 2, 2, 3, ActionEncoding::RowSoftmax).unwrap();
        let mut opt = Adam::new(&p.denoiser, 1e-3);
        let states = Array2::from_shape_fn((8, 3), |(i, j)| (i as f64 - j as f64) * 0.2);
        let probe = ChainNoise::draw(8, 4, 2, false, &mut rng);
        let mut norms = Vec::new();
        for _ in 0..200 {
            actor_update(states.view(), &mut p, &mut opt, &c, &sched, 1.0, &mut rng).unwrap();
            let (x0, _) = run_chain(states.view(), &p, &sched, &probe, false).unwrap();
            norms.push(x0.mapv(|v| v * v).mean().unwrap().sqrt());
        }
        let ma = moving_average(&norms, 50);
        assert!(ma.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{ma:?}");
        assert!(norms[199] < 0.9 * norms[0], "{} -> {}", norms[0], norms[199]);
    }

    #[test]
    fn critic_loss_falls_on_frozen_buffer() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let env = two_by_two();
        let encoder = StateEncoder::from_env(&env);
        let state = encoder.encode(&env).unwrap();
        let transitions: Vec<Transition> = (0..64)
            .map(|_| {
                let flat: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let action = ActionLogits::from_flat(2, 2, flat).unwrap();
                let placement = logits_to_placement(&action, LogitMode::Argmax, &mut rng);
                let reward = evaluate_placement(&env, &placement).unwrap().reward;
                Transition { state: state.clone(), action, reward, seed: 0 }
            })
            .collect();
        let batch: Vec<&Transition> = transitions.iter().collect();
        let sd = encoder.state_dim();
        let mut c = CriticParams::new(2, 2, sd, &[16], Activation::Silu, ActionEncoding::ServerTraffic, &mut rng);
        let mut opt = Adam::new(&c.net, 1e-3);
        let losses: Vec<f64> = (0..300).map(|_| critic_update(&batch, &mut c, &mut opt).unwrap()).collect();
        let ma = moving_average(&losses, 50);
        assert!(ma.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert!(losses[299] < 0.1 * losses[0], "{} -> {}", losses[0], losses[299]);
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sched = make_schedule(2, 0.1, 0.5).unwrap();
        let p = PolicyParams::new(2, 2, 3, 16, &[8], Activation::Silu, &mut rng);
        let c = CriticParams::new(2, 2, 3, &[8], Activation::Silu, ActionEncoding::RowSoftmax, &mut rng);
        let states = Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0));
        let noise = ChainNoise::draw(3, 4, 2, false, &mut rng);
        let err = finite_diff_check(
            |theta| {
                let mut q = p.clone();
                q.denoiser.set_params_flat(theta).unwrap();
                let (j, _, g) = actor_objective_and_grad(states.view(), &q, &c, &sched, &noise, 0.0).unwrap();
                (j, g.flat())
            },
            &p.denoiser.params_flat(),
            1e-5,
        );
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn traffic_critic_and_penalty_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sched = make_schedule(2, 0.1, 0.5).unwrap();
        let sd = 4 * 2 + 2 + 2 * 2;
        let p = PolicyParams::new(2, 2, sd, 16, &[8], Activation::Silu, &mut rng);
        let c = CriticParams::new(2, 2, sd, &[8], Activation::Tanh, ActionEncoding::ServerTraffic, &mut rng);
        let states = Array2::from_shape_fn((3, sd), |_| rng.gen_range(-1.0..1.0));
        let noise = ChainNoise::draw(3, 4, 2, false, &mut rng);
        let err = finite_diff_check(
            |theta| {
                let mut q = p.clone();
                q.denoiser.set_params_flat(theta).unwrap();
                let (j, _, g) = actor_objective_and_grad(states.view(), &q, &c, &sched, &noise, 0.05).unwrap();
                (j, g.flat())
            },
            &p.denoiser.params_flat(),
            1e-5,
        );
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn traffic_features_are_server_sums() {
        // one chunk-row per server pinned by large logits: chunk 0 -> server 1, chunk 1 -> server 0
        let sd = 4 * 2 + 2 + 2 * 2;
        let c = CriticParams::new(2, 2, sd, &[4], Activation::Silu, ActionEncoding::ServerTraffic, &mut ChaCha8Rng::seed_from_u64(0));
        let mut state = Array2::zeros((1, sd));
        // popularity shares 0.75 / 0.25, write shares 0.5 / 0.5
        state[[0, 10]] = 0.5;
        state[[0, 11]] = -0.5;
        let actions = array![[-50.0, 50.0, 50.0, -50.0]];
        let (features, _) = c.encode(state.view(), actions.view());
        let tail: Vec<f64> = features.row(0).iter().skip(4).map(|x| (x * 1e6).round() / 1e6).collect();
        assert_eq!(tail, vec![0.5, 0.5, 0.25, 0.75, 0.5, 0.5]);
    }

    #[test]
    fn finite_diff_check_simple_functions() {
        let quad = finite_diff_check(|w| (w[0] * w[0], vec![2.0 * w[0]]), &[3.0], 1e-5);
        assert!(quad < 1e-8, "{quad}");
        let lin = finite_diff_check(|w| (4.0 * w[0] - 2.0 * w[1], vec![4.0, -2.0]), &[0.25, 0.5], 1e-5);
        assert!(lin < 1e-9, "{lin}");
    }

    #[test]
    fn replay_buffer_is_bounded_and_seeded() {
        let mut buf = ReplayBuffer::new(3);
        assert!(buf.sample(2, &mut ChaCha8Rng::seed_from_u64(0)).is_empty());
        for i in 0..10 {
            buf.push(transition(vec![i as f64], vec![0.0], 1, 1, i as f64));
            assert!(buf.len() <= 3);
        }
        let a: Vec<f64> = buf.sample(8, &mut ChaCha8Rng::seed_from_u64(5)).iter().map(|t| t.reward).collect();
        let b: Vec<f64> = buf.sample(8, &mut ChaCha8Rng::seed_from_u64(5)).iter().map(|t| t.reward).collect();
        assert_eq!(a, b);
        assert!(a.iter().all(|&r| r >= 7.0));
    }

    #[test]
    fn zero_episodes_gives_empty_report() {
        let run = train(&tiny_cfg(), ScenarioSource::Fixed(two_by_two()), 0, 10, 1, String::new()).unwrap();
        assert!(run.report.records.is_empty());
        assert_eq!(run.report.episodes, 0);
    }

    #[test]
    fn single_server_policies_agree() {
        let mut env = two_by_two();
        env.servers.truncate(1);
        let run = train(&tiny_cfg(), ScenarioSource::Fixed(env), 20, 5, 7, String::new()).unwrap();
        let r = run.report.rewards(PolicyKind::Random);
        assert_eq!(r.len(), 20);
        assert_eq!(r, run.report.rewards(PolicyKind::Greedy));
        assert_eq!(r, run.report.rewards(PolicyKind::Diffusion));
        assert_eq!(run.report.rewards(PolicyKind::DiffusionEval).len(), 4);
    }

    #[test]
    fn training_is_deterministic() {
        let a = train(&tiny_cfg(), ScenarioSource::Fixed(two_by_two()), 30, 10, 3, String::new()).unwrap();
        let b = train(&tiny_cfg(), ScenarioSource::Fixed(two_by_two()), 30, 10, 3, String::new()).unwrap();
        assert_eq!(a.report.records, b.report.records);
        assert_eq!(a.policy, b.policy);
    }

    #[test]
    fn moving_average_and_window() {
        assert_eq!(moving_average(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
        let w = WindowStats::of(&[1.0, 3.0]);
        assert_eq!((w.mean, w.std, w.count), (2.0, 1.0, 2));
    }
}
