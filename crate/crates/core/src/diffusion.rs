//! Diffusion policy: a state-conditioned ε-prediction denoiser that turns
//! Gaussian noise into per-chunk server logits through a Markov reverse
//! chain, with a recorded tape for pathwise gradients.

use std::io::{Read, Write};

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::Placement;
use crate::error::{Error, Result};
use crate::nn::{Activation, Dense, Mlp, MlpCache, MlpGrads};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_sigmas: Vec<f64>,
}

/// Linearly spaced betas from `beta_min` to `beta_max` over `steps` steps.
pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let betas = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("empty beta schedule".into()));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) || betas.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidArgument(
                "betas must be nondecreasing and lie in (0, 1)".into(),
            ));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        let posterior_sigmas = (0..betas.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                (betas[i] * (1.0 - prev) / (1.0 - alpha_bars[i])).sqrt()
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            posterior_sigmas,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product up to step `t`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.posterior_sigmas[t - 1]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// K×N matrix of server-preference logits, one row per chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionLogits(pub Array2<f64>);

impl ActionLogits {
    pub fn zeros(n_chunks: usize, n_servers: usize) -> Self {
        Self(Array2::zeros((n_chunks, n_servers)))
    }

    pub fn from_flat(n_chunks: usize, n_servers: usize, flat: Vec<f64>) -> Result<Self> {
        Array2::from_shape_vec((n_chunks, n_servers), flat)
            .map(Self)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))
    }

    pub fn n_chunks(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_servers(&self) -> usize {
        self.0.ncols()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.0.iter().copied().collect()
    }
}

/// Forward (noising) process in closed form.
pub fn forward_noise<R: Rng + ?Sized>(
    x0: &ActionLogits,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<ActionLogits> {
    if t == 0 {
        return Ok(x0.clone());
    }
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar(t);
    let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(ActionLogits(x0.0.mapv(|x| {
        let eps: f64 = rng.sample(StandardNormal);
        signal * x + noise * eps
    })))
}

/// Sinusoidal embedding of the step index: `[sin(t·f_j).., cos(t·f_j)..]`.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for j in 0..half {
        let freq = (-(10_000f64.ln()) * j as f64 / half as f64).exp();
        let a = t as f64 * freq;
        out[j] = a.sin();
        out[half + j] = a.cos();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitMode {
    Argmax,
    SoftmaxSample,
}

pub fn logits_to_placement<R: Rng + ?Sized>(l: &ActionLogits, mode: LogitMode, rng: &mut R) -> Placement {
    let assignment = l
        .0
        .rows()
        .into_iter()
        .map(|row| match mode {
            LogitMode::Argmax => {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            }
            LogitMode::SoftmaxSample => {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                let total: f64 = weights.iter().sum();
                let mut u = rng.gen::<f64>() * total;
                let mut pick = weights.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    if u < *w {
                        pick = i;
                        break;
                    }
                    u -= w;
                }
                pick
            }
        })
        .collect();
    Placement::new(assignment)
}

/// The ε-prediction denoiser. Input layout is `[action | state | time embedding]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub denoiser: Mlp,
    pub n_chunks: usize,
    pub n_servers: usize,
    pub state_dim: usize,
    pub time_dim: usize,
}

impl PolicyParams {
    pub fn new<R: Rng + ?Sized>(
        n_chunks: usize,
        n_servers: usize,
        state_dim: usize,
        time_dim: usize,
        hidden: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let sizes = Self::layer_sizes(n_chunks * n_servers, state_dim, time_dim, hidden);
        Self {
            denoiser: Mlp::new(&sizes, activation, rng),
            n_chunks,
            n_servers,
            state_dim,
            time_dim,
        }
    }

    /// A denoiser whose ε-prediction is identically zero.
    pub fn zeros(
        n_chunks: usize,
        n_servers: usize,
        state_dim: usize,
        time_dim: usize,
        hidden: &[usize],
        activation: Activation,
    ) -> Self {
        let sizes = Self::layer_sizes(n_chunks * n_servers, state_dim, time_dim, hidden);
        Self {
            denoiser: Mlp::zeros(&sizes, activation),
            n_chunks,
            n_servers,
            state_dim,
            time_dim,
        }
    }

    fn layer_sizes(action_dim: usize, state_dim: usize, time_dim: usize, hidden: &[usize]) -> Vec<usize> {
        let mut sizes = vec![action_dim + state_dim + time_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(action_dim);
        sizes
    }

    pub fn action_dim(&self) -> usize {
        self.n_chunks * self.n_servers
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.action_dim();
        if self.denoiser.input_dim() != a + self.state_dim + self.time_dim || self.denoiser.output_dim() != a {
            return Err(Error::ShapeMismatch(format!(
                "denoiser {:?} does not fit action {a}, state {}, time {}",
                self.denoiser.sizes(),
                self.state_dim,
                self.time_dim
            )));
        }
        Ok(())
    }

    fn check_batch(&self, x: &ArrayView2<f64>, states: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.action_dim() || states.ncols() != self.state_dim || x.nrows() != states.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "actions {:?} / states {:?} vs action_dim {} state_dim {}",
                x.shape(),
                states.shape(),
                self.action_dim(),
                self.state_dim
            )));
        }
        Ok(())
    }

    fn denoiser_input(&self, x: ArrayView2<f64>, states: ArrayView2<f64>, t: usize) -> Array2<f64> {
        let (b, a, s) = (x.nrows(), x.ncols(), states.ncols());
        let emb = time_embedding(t, self.time_dim);
        let mut input = Array2::zeros((b, a + s + self.time_dim));
        input.slice_mut(s![.., ..a]).assign(&x);
        input.slice_mut(s![.., a..a + s]).assign(&states);
        input
            .slice_mut(s![.., a + s..])
            .assign(&ArrayView2::from_shape((1, self.time_dim), &emb).unwrap());
        input
    }

    /// Predicted noise for a batch of actions `(B, K·N)` and states `(B, S)`.
    pub fn predict_noise(&self, x: ArrayView2<f64>, states: ArrayView2<f64>, t: usize) -> Result<Array2<f64>> {
        self.check_batch(&x, &states)?;
        self.denoiser.forward(self.denoiser_input(x, states, t).view())
    }
}

fn as_row<'a>(l: &'a ActionLogits) -> ArrayView2<'a, f64> {
    l.0.view().into_shape_with_order((1, l.0.len())).expect("standard layout")
}

fn check_logits(l: &ActionLogits, p: &PolicyParams) -> Result<()> {
    if l.n_chunks() != p.n_chunks || l.n_servers() != p.n_servers {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} vs policy K={} N={}",
            l.0.shape(),
            p.n_chunks,
            p.n_servers
        )));
    }
    Ok(())
}

fn state_row(state: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, state.len()), state).expect("contiguous slice")
}

/// One reverse step `x_t -> x_{t-1}`.
#[allow(clippy::too_many_arguments)]
pub fn denoise_step<R: Rng + ?Sized>(
    x_t: &ActionLogits,
    t: usize,
    state: &[f64],
    p: &PolicyParams,
    schedule: &NoiseSchedule,
    rng: &mut R,
    stochastic: bool,
) -> Result<ActionLogits> {
    schedule.check_step(t)?;
    check_logits(x_t, p)?;
    let eps = p.predict_noise(as_row(x_t), state_row(state), t)?;
    let c2 = step_coefficients(schedule, t).1;
    let mut next = (&x_t.0 - &(eps.into_shape_with_order(x_t.0.raw_dim()).unwrap() * c2)) / schedule.alpha(t).sqrt();
    if stochastic && t > 1 {
        let sigma = schedule.sigma(t);
        next.mapv_inplace(|v| {
            let z: f64 = rng.sample(StandardNormal);
            v + sigma * z
        });
    }
    Ok(ActionLogits(next))
}

/// `(1/sqrt(α_t), β_t/sqrt(1-ᾱ_t))`.
fn step_coefficients(schedule: &NoiseSchedule, t: usize) -> (f64, f64) {
    (
        1.0 / schedule.alpha(t).sqrt(),
        schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt(),
    )
}

/// Draws `x_T` and runs the reverse chain down to `x_0`.
pub fn sample_action<R: Rng + ?Sized>(
    state: &[f64],
    p: &PolicyParams,
    schedule: &NoiseSchedule,
    rng: &mut R,
    stochastic: bool,
) -> Result<ActionLogits> {
    let mut x = ActionLogits(Array2::from_shape_simple_fn((p.n_chunks, p.n_servers), || {
        rng.sample(StandardNormal)
    }));
    for t in (1..=schedule.steps()).rev() {
        x = denoise_step(&x, t, state, p, schedule, rng, stochastic)?;
    }
    Ok(x)
}

/// Pre-drawn randomness for a batched reverse chain: `x_T` and the per-step
/// posterior noise `z_t` for `t = T..2` (empty when deterministic).
#[derive(Debug, Clone)]
pub struct ChainNoise {
    pub x_t: Array2<f64>,
    pub z: Vec<Array2<f64>>,
}

impl ChainNoise {
    /// Consumes the generator in the same order as repeated [`sample_action`]
    /// calls would for a batch of one.
    pub fn draw<R: Rng + ?Sized>(batch: usize, action_dim: usize, steps: usize, stochastic: bool, rng: &mut R) -> Self {
        let mut normal = |n: usize| Array2::from_shape_simple_fn((n, action_dim), || rng.sample(StandardNormal));
        let x_t = normal(batch);
        let z = if stochastic { (2..=steps).map(|_| normal(batch)).collect() } else { Vec::new() };
        Self { x_t, z }
    }
}

/// Per-step denoiser activations, in chain order `t = T..1`.
#[derive(Debug, Clone)]
pub struct ChainTape {
    caches: Vec<MlpCache>,
}

/// Batched reverse chain with explicit noise; optionally records a tape.
pub fn run_chain(
    states: ArrayView2<f64>,
    p: &PolicyParams,
    schedule: &NoiseSchedule,
    noise: &ChainNoise,
    record: bool,
) -> Result<(Array2<f64>, Option<ChainTape>)> {
    p.check_batch(&noise.x_t.view(), &states)?;
    let steps = schedule.steps();
    let mut x = noise.x_t.clone();
    let mut caches = Vec::new();
    for (i, t) in (1..=steps).rev().enumerate() {
        let input = p.denoiser_input(x.view(), states, t);
        let eps = if record {
            let (eps, cache) = p.denoiser.forward_cached(input.view())?;
            caches.push(cache);
            eps
        } else {
            p.denoiser.forward(input.view())?
        };
        let c2 = step_coefficients(schedule, t).1;
        x = (x - eps * c2) / schedule.alpha(t).sqrt();
        if t > 1 {
            if let Some(z) = noise.z.get(i) {
                x.scaled_add(schedule.sigma(t), z);
            }
        }
    }
    Ok((x, record.then_some(ChainTape { caches })))
}

/// Gradient of `sum(d_x0 ⊙ x_0)` with respect to the denoiser weights.
pub fn chain_backward(
    p: &PolicyParams,
    schedule: &NoiseSchedule,
    tape: &ChainTape,
    d_x0: ArrayView2<f64>,
) -> MlpGrads {
    let a = p.action_dim();
    let mut grads = p.denoiser.zero_grads();
    let mut g = d_x0.to_owned();
    for (cache, t) in tape.caches.iter().rev().zip(1..=schedule.steps()) {
        let (c1, c2) = step_coefficients(schedule, t);
        let d_eps = &g * (-c1 * c2);
        let d_input = p.denoiser.backward(cache, d_eps.view(), &mut grads);
        g *= c1;
        g += &d_input.slice(s![.., ..a]);
    }
    grads
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"DCNLABPC";
const CHECKPOINT_VERSION: u32 = 1;

fn put_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64<W: Write>(w: &mut W, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn dim(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::format("policy checkpoint", format!("dimension {v} overflows u32")))
}

/// Little-endian layout: magic, version, T, betas, K, N, state dim, time
/// dim, activation code, layer count, then per layer `(out, in)`, row-major
/// weights and biases as f64.
pub fn write_checkpoint<W: Write>(w: &mut W, p: &PolicyParams, schedule: &NoiseSchedule) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(w, CHECKPOINT_VERSION)?;
    put_u32(w, dim(schedule.steps())?)?;
    for &b in schedule.betas() {
        put_f64(w, b)?;
    }
    for v in [p.n_chunks, p.n_servers, p.state_dim, p.time_dim] {
        put_u32(w, dim(v)?)?;
    }
    put_u32(w, p.denoiser.activation().code())?;
    put_u32(w, dim(p.denoiser.layers().len())?)?;
    for layer in p.denoiser.layers() {
        put_u32(w, dim(layer.out_dim())?)?;
        put_u32(w, dim(layer.in_dim())?)?;
        for &v in layer.weight.iter() {
            put_f64(w, v)?;
        }
        for &v in layer.bias.iter() {
            put_f64(w, v)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(PolicyParams, NoiseSchedule)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format("policy checkpoint", "bad magic"));
    }
    let version = get_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format("policy checkpoint", format!("unsupported version {version}")));
    }
    let steps = get_u32(r)? as usize;
    if steps > 1 << 16 {
        return Err(Error::format("policy checkpoint", format!("implausible step count {steps}")));
    }
    let betas = (0..steps).map(|_| get_f64(r)).collect::<Result<Vec<_>>>()?;
    let schedule = NoiseSchedule::from_betas(betas)?;
    let n_chunks = get_u32(r)? as usize;
    let n_servers = get_u32(r)? as usize;
    let state_dim = get_u32(r)? as usize;
    let time_dim = get_u32(r)? as usize;
    let activation = Activation::from_code(get_u32(r)?)
        .ok_or_else(|| Error::format("policy checkpoint", "unknown activation code"))?;
    let n_layers = get_u32(r)? as usize;
    let mut layers = Vec::with_capacity(n_layers.min(64));
    for _ in 0..n_layers {
        let out = get_u32(r)? as usize;
        let inp = get_u32(r)? as usize;
        let weights = (0..out * inp).map(|_| get_f64(r)).collect::<Result<Vec<_>>>()?;
        let bias = (0..out).map(|_| get_f64(r)).collect::<Result<Vec<_>>>()?;
        layers.push(Dense {
            weight: Array2::from_shape_vec((out, inp), weights).map_err(|e| Error::format("policy checkpoint", e.to_string()))?,
            bias: Array1::from(bias),
        });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::format("policy checkpoint", "trailing bytes"));
    }
    let params = PolicyParams {
        denoiser: Mlp::from_layers(layers, activation)?,
        n_chunks,
        n_servers,
        state_dim,
        time_dim,
    };
    params.validate()?;
    Ok((params, schedule))
}
