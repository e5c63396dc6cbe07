//! Wheel contextual bandit and a Thompson-sampling agent driven by a
//! last-layer posterior.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::{init_model, Activation, AdamParams, BackboneConfig, BackboneModel, TrainConfig, Trainer};
use crate::densela::DenseMatrix;
use crate::error::{Error, Result};
use crate::ntk_features::{HiddenMode, SketchConfig};
use crate::posthoc::{fit_variant, FittedPosterior, Variant};
use crate::transform::SubsampleSpec;

pub const CONTEXT_DIM: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WheelConfig {
    pub delta: f64,
    pub n_actions: usize,
    pub reward_noise_std: f64,
    pub baseline_mean: f64,
    /// Mean of the safe arm (action 0) everywhere.
    pub safe_mean: f64,
    pub jackpot_mean: f64,
    pub seed: u64,
}

impl Default for WheelConfig {
    fn default() -> Self {
        Self { delta: 0.5, n_actions: 5, reward_noise_std: 0.01, baseline_mean: 1.0, safe_mean: 1.2, jackpot_mean: 50.0, seed: 0 }
    }
}

impl WheelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidConfig(format!("delta {} not in (0, 1)", self.delta)));
        }
        if self.n_actions != 5 {
            return Err(Error::InvalidConfig("the wheel has exactly 5 actions".into()));
        }
        if !(self.reward_noise_std >= 0.0) {
            return Err(Error::InvalidConfig("reward_noise_std must be >= 0".into()));
        }
        Ok(())
    }

    /// Quadrant arm for a context: `(+,+) -> 1, (+,-) -> 2, (-,+) -> 3, (-,-) -> 4`.
    pub fn quadrant_action(context: [f64; 2]) -> usize {
        match (context[0] >= 0.0, context[1] >= 0.0) {
            (true, true) => 1,
            (true, false) => 2,
            (false, true) => 3,
            (false, false) => 4,
        }
    }

    pub fn expected_reward(&self, context: [f64; 2], action: usize) -> f64 {
        if action == 0 {
            return self.safe_mean;
        }
        let norm = context[0].hypot(context[1]);
        if norm > self.delta && action == Self::quadrant_action(context) {
            self.jackpot_mean
        } else {
            self.baseline_mean
        }
    }

    pub fn optimal_action(&self, context: [f64; 2]) -> usize {
        if context[0].hypot(context[1]) > self.delta && self.jackpot_mean > self.safe_mean {
            Self::quadrant_action(context)
        } else {
            0
        }
    }

    pub fn optimal_expected(&self, context: [f64; 2]) -> f64 {
        (0..self.n_actions).map(|a| self.expected_reward(context, a)).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Seeded environment: contexts and reward noise use separate streams, so
/// every policy sees the same context sequence.
#[derive(Clone, Debug)]
pub struct WheelEnv {
    pub config: WheelConfig,
    contexts: ChaCha8Rng,
    noise: ChaCha8Rng,
}

impl WheelEnv {
    pub fn new(config: WheelConfig) -> Result<Self> {
        config.validate()?;
        let mut contexts = ChaCha8Rng::seed_from_u64(config.seed);
        contexts.set_stream(0);
        let mut noise = ChaCha8Rng::seed_from_u64(config.seed);
        noise.set_stream(1);
        Ok(Self { config, contexts, noise })
    }

    /// Uniform on the closed unit disk by rejection from the square.
    pub fn sample_context(&mut self) -> [f64; 2] {
        loop {
            let x: f64 = self.contexts.random_range(-1.0..=1.0);
            let y: f64 = self.contexts.random_range(-1.0..=1.0);
            if x * x + y * y <= 1.0 {
                return [x, y];
            }
        }
    }

    /// `(realized reward, optimal expected reward)`.
    pub fn reward(&mut self, context: [f64; 2], action: usize) -> (f64, f64) {
        wheel_reward(&self.config, context, action, &mut self.noise)
    }
}

pub fn wheel_reward(cfg: &WheelConfig, context: [f64; 2], action: usize, rng: &mut impl Rng) -> (f64, f64) {
    assert!(action < cfg.n_actions, "action {action} out of range");
    let z: f64 = StandardNormal.sample(rng);
    let mean = cfg.expected_reward(context, action);
    let reward = if cfg.reward_noise_std == 0.0 { mean } else { mean + cfg.reward_noise_std * z };
    (reward, cfg.optimal_expected(context))
}

/// Network input for a context/action pair: context followed by a one-hot action.
pub fn action_input(context: [f64; 2], action: usize, n_actions: usize) -> Vec<f64> {
    let mut v = vec![0.0; CONTEXT_DIM + n_actions];
    v[..CONTEXT_DIM].copy_from_slice(&context);
    v[CONTEXT_DIM + action] = 1.0;
    v
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReplayBuffer {
    n_actions: usize,
    contexts: Vec<[f64; 2]>,
    actions: Vec<usize>,
    rewards: Vec<f64>,
}

impl ReplayBuffer {
    pub fn new(n_actions: usize) -> Self {
        Self { n_actions, ..Default::default() }
    }

    pub fn push(&mut self, context: [f64; 2], action: usize, reward: f64) -> Result<()> {
        if action >= self.n_actions {
            return Err(Error::InvalidConfig(format!("action {action} >= {}", self.n_actions)));
        }
        if !reward.is_finite() {
            return Err(Error::NonFinite("reward"));
        }
        self.contexts.push(context);
        self.actions.push(action);
        self.rewards.push(reward);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn get(&self, i: usize) -> ([f64; 2], usize, f64) {
        (self.contexts[i], self.actions[i], self.rewards[i])
    }

    /// Inputs and targets for the given rows.
    pub fn batch(&self, rows: &[usize]) -> (DenseMatrix, DenseMatrix) {
        let w = CONTEXT_DIM + self.n_actions;
        let mut x = Vec::with_capacity(rows.len() * w);
        for &i in rows {
            x.extend(action_input(self.contexts[i], self.actions[i], self.n_actions));
        }
        let y = rows.iter().map(|&i| self.rewards[i]).collect();
        (DenseMatrix::from_vec(rows.len(), w, x).expect("finite"), DenseMatrix::from_vec(rows.len(), 1, y).expect("finite"))
    }

    pub fn all(&self) -> (DenseMatrix, DenseMatrix) {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmpiricalNoise {
    pub enabled: bool,
    pub window: usize,
    pub floor: f64,
    /// Noise variance before any prediction errors are recorded, and the
    /// fixed value when the heuristic is off.
    pub initial: f64,
}

impl Default for EmpiricalNoise {
    fn default() -> Self {
        Self { enabled: true, window: 200, floor: 1e-4, initial: 1.0 }
    }
}

/// Thompson agent settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentSpec {
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub variant: Variant,
    pub ridge: f64,
    pub env_steps_per_phase: usize,
    pub grad_steps_per_phase: usize,
    /// Rebuild the posterior after every this many gradient steps; the
    /// default equals one rebuild per update phase.
    pub rebuild_cadence: usize,
    /// When the buffer holds more rows than this, the posterior (and the
    /// transform) use a uniform subsample of `max(cap, r)` rows with the
    /// `N / k` rescale. Required for `rich-sub`.
    pub buffer_cap: Option<usize>,
    pub empirical_noise: EmpiricalNoise,
    pub warm_start_pulls: usize,
    /// Add observation noise to the Thompson draw.
    pub sample_observation_noise: bool,
    pub sketch: Option<SketchConfig>,
    pub seed: u64,
}

impl Default for AgentSpec {
    fn default() -> Self {
        Self {
            hidden_widths: vec![100, 100],
            activation: Activation::Relu,
            learning_rate: 3e-3,
            batch_size: 512,
            grad_clip: 1.0,
            variant: Variant::Rich,
            ridge: 1.0,
            env_steps_per_phase: 20,
            grad_steps_per_phase: 100,
            rebuild_cadence: 100,
            buffer_cap: None,
            empirical_noise: EmpiricalNoise::default(),
            warm_start_pulls: 3,
            sample_observation_noise: false,
            sketch: None,
            seed: 0,
        }
    }
}

impl AgentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rebuild_cadence == 0 || self.empirical_noise.window == 0 {
            return Err(Error::InvalidConfig("rebuild_cadence and window must be >= 1".into()));
        }
        if self.env_steps_per_phase == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("env_steps_per_phase and batch_size must be >= 1".into()));
        }
        if !(self.empirical_noise.floor > 0.0) || !(self.empirical_noise.initial > 0.0) {
            return Err(Error::InvalidConfig("noise floor and initial variance must be > 0".into()));
        }
        if self.variant == Variant::RichSub && self.buffer_cap.is_none() {
            return Err(Error::InvalidConfig("rich-sub needs buffer_cap".into()));
        }
        Ok(())
    }
}

/// Action-selection policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum PolicySpec {
    Thompson(AgentSpec),
    Uniform { seed: u64 },
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub action: usize,
    pub reward: f64,
    pub optimal_expected: f64,
    pub cum_regret: f64,
    pub norm_regret: f64,
    /// Regret of acting greedily on the posterior mean at this context.
    pub simple_regret: f64,
    pub noise_var: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegretTrace {
    pub rows: Vec<TraceRow>,
}

impl RegretTrace {
    pub fn final_norm_regret(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.norm_regret)
    }

    pub fn final_cum_regret(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.cum_regret)
    }

    /// Mean greedy-on-mean regret over the last `tail` steps.
    pub fn simple_regret(&self, tail: usize) -> f64 {
        let tail = tail.clamp(1, self.rows.len().max(1));
        let rows = &self.rows[self.rows.len().saturating_sub(tail)..];
        rows.iter().map(|r| r.simple_regret).sum::<f64>() / rows.len().max(1) as f64
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "action", "reward", "cum_regret", "norm_regret"])?;
        for r in &self.rows {
            out.write_record([
                r.step.to_string(),
                r.action.to_string(),
                r.reward.to_string(),
                r.cum_regret.to_string(),
                r.norm_regret.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Online Thompson-sampling agent.
pub struct ThompsonAgent {
    spec: AgentSpec,
    n_actions: usize,
    model: BackboneModel,
    trainer: Trainer,
    posterior: Option<FittedPosterior>,
    rng: ChaCha8Rng,
    sq_errors: VecDeque<f64>,
    noise_var: f64,
    grad_steps: usize,
    rebuilds: usize,
}

impl ThompsonAgent {
    pub fn new(spec: &AgentSpec, n_actions: usize) -> Result<Self> {
        spec.validate()?;
        let mut cfg = BackboneConfig::new(CONTEXT_DIM + n_actions, spec.hidden_widths.clone());
        cfg.activation = spec.activation;
        cfg.seed = spec.seed;
        let model = init_model(&cfg)?;
        let train = TrainConfig {
            learning_rate: spec.learning_rate,
            epochs: 1,
            batch_size: spec.batch_size,
            grad_clip: spec.grad_clip,
            adam: AdamParams::default(),
            seed: spec.seed,
        };
        let trainer = Trainer::new(&model, &train)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(7);
        Ok(Self {
            spec: spec.clone(),
            n_actions,
            model,
            trainer,
            posterior: None,
            rng,
            sq_errors: VecDeque::new(),
            noise_var: spec.empirical_noise.initial,
            grad_steps: 0,
            rebuilds: 0,
        })
    }

    pub fn model(&self) -> &BackboneModel {
        &self.model
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn rebuilds(&self) -> usize {
        self.rebuilds
    }

    pub fn posterior(&self) -> Option<&FittedPosterior> {
        self.posterior.as_ref()
    }

    fn inputs_for(&self, context: [f64; 2]) -> DenseMatrix {
        let rows: Vec<Vec<f64>> = (0..self.n_actions).map(|a| action_input(context, a, self.n_actions)).collect();
        DenseMatrix::from_rows(&rows).expect("finite context")
    }

    /// Backbone means and posterior variances for every action.
    pub fn action_moments(&self, context: [f64; 2]) -> Result<(Vec<f64>, Vec<f64>)> {
        let x = self.inputs_for(context);
        let means = self.model.predict_batch(&x).into_vec();
        let vars = match &self.posterior {
            Some(p) => p.variances(&self.model, &x)?,
            None => vec![0.0; self.n_actions],
        };
        Ok((means, vars))
    }

    /// One Thompson draw per action; returns the argmax (lowest index on ties).
    pub fn select(&mut self, context: [f64; 2]) -> Result<usize> {
        let (means, vars) = self.action_moments(context)?;
        let extra = if self.spec.sample_observation_noise { self.noise_var } else { 0.0 };
        let samples: Vec<f64> = means
            .iter()
            .zip(&vars)
            .map(|(m, v)| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                m + (v.max(0.0) + extra).sqrt() * z
            })
            .collect();
        Ok(argmax(&samples))
    }

    pub fn greedy(&self, context: [f64; 2]) -> usize {
        argmax(&self.model.predict_batch(&self.inputs_for(context)).into_vec())
    }

    /// Records the squared error of the current mean on a new observation.
    pub fn observe(&mut self, context: [f64; 2], action: usize, reward: f64) {
        if !self.spec.empirical_noise.enabled {
            return;
        }
        let (pred, _) = self.model.forward(&action_input(context, action, self.n_actions));
        self.sq_errors.push_back((reward - pred[0]).powi(2));
        if self.sq_errors.len() > self.spec.empirical_noise.window {
            self.sq_errors.pop_front();
        }
        let mean = self.sq_errors.iter().sum::<f64>() / self.sq_errors.len() as f64;
        self.noise_var = mean.max(self.spec.empirical_noise.floor);
    }

    /// Gradient steps on random buffer batches, rebuilding the posterior at
    /// the configured cadence and once more at the end of the phase.
    pub fn update(&mut self, buffer: &ReplayBuffer) -> Result<()> {
        let n = buffer.len();
        let mut rebuilt_last = false;
        for _ in 0..self.spec.grad_steps_per_phase {
            let rows = index::sample(&mut self.rng, n, self.spec.batch_size.min(n)).into_vec();
            let (x, y) = buffer.batch(&rows);
            self.trainer.step(&mut self.model, &x, &y);
            self.grad_steps += 1;
            rebuilt_last = false;
            if self.grad_steps % self.spec.rebuild_cadence == 0 {
                self.rebuild(buffer)?;
                rebuilt_last = true;
            }
        }
        if !rebuilt_last {
            self.rebuild(buffer)?;
        }
        Ok(())
    }

    pub fn rebuild(&mut self, buffer: &ReplayBuffer) -> Result<()> {
        let (x, _) = buffer.all();
        let r = self.model.r();
        let subsample = match self.spec.buffer_cap {
            Some(cap) if buffer.len() > cap.max(r) => {
                let seed = self.spec.seed.wrapping_mul(0x9E37_79B9).wrapping_add(self.rebuilds as u64);
                Some(SubsampleSpec::new(cap.max(r), seed))
            }
            _ => None,
        };
        let variant = if self.spec.variant == Variant::RichSub && subsample.is_none() { Variant::Rich } else { self.spec.variant };
        let mode = match &self.spec.sketch {
            Some(s) => HiddenMode::Sketched(s.clone()),
            None => HiddenMode::default(),
        };
        self.posterior =
            Some(fit_variant(&self.model, &x, variant, self.noise_var, self.spec.ridge, subsample.as_ref(), &mode)?);
        self.rebuilds += 1;
        Ok(())
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Result of one bandit run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BanditRun {
    pub trace: RegretTrace,
    pub uniform_cum_regret: f64,
    pub rebuilds: usize,
}

/// Runs `horizon` steps of `policy` on the wheel. Regret is expected regret;
/// the normalizer is the expected regret of a uniform policy on the same
/// contexts.
pub fn run_bandit(wheel: &WheelConfig, policy: &PolicySpec, horizon: usize) -> Result<BanditRun> {
    let mut env = WheelEnv::new(wheel.clone())?;
    let n_actions = wheel.n_actions;
    let mut agent = match policy {
        PolicySpec::Thompson(spec) => {
            let warm = spec.warm_start_pulls * n_actions;
            if horizon < warm {
                return Err(Error::InvalidConfig(format!("horizon {horizon} shorter than warm start {warm}")));
            }
            Some(ThompsonAgent::new(spec, n_actions)?)
        }
        _ => None,
    };
    let mut uniform_rng = match policy {
        PolicySpec::Uniform { seed } => ChaCha8Rng::seed_from_u64(*seed),
        _ => ChaCha8Rng::seed_from_u64(0),
    };
    let mut buffer = ReplayBuffer::new(n_actions);
    let mut trace = RegretTrace { rows: Vec::with_capacity(horizon) };
    let mut cum = 0.0;
    let mut cum_uniform = 0.0;
    let mut since_update = 0;
    for step in 0..horizon {
        let context = env.sample_context();
        let action = match (&mut agent, policy) {
            (Some(a), PolicySpec::Thompson(spec)) => {
                if step < spec.warm_start_pulls * n_actions {
                    step % n_actions
                } else {
                    a.select(context)?
                }
            }
            (_, PolicySpec::Uniform { .. }) => uniform_rng.random_range(0..n_actions),
            _ => wheel.optimal_action(context),
        };
        let (reward, optimal) = env.reward(context, action);
        let mean_reward = (0..n_actions).map(|a| wheel.expected_reward(context, a)).sum::<f64>() / n_actions as f64;
        cum += optimal - wheel.expected_reward(context, action);
        cum_uniform += optimal - mean_reward;
        let greedy = match &agent {
            Some(a) if a.posterior().is_some() => a.greedy(context),
            Some(_) => action,
            None => action,
        };
        let noise_var = agent.as_ref().map_or(0.0, |a| a.noise_var());
        trace.rows.push(TraceRow {
            step,
            action,
            reward,
            optimal_expected: optimal,
            cum_regret: cum,
            norm_regret: if cum_uniform > 0.0 { cum / cum_uniform } else { 0.0 },
            simple_regret: optimal - wheel.expected_reward(context, greedy),
            noise_var,
        });
        buffer.push(context, action, reward)?;
        if let (Some(a), PolicySpec::Thompson(spec)) = (&mut agent, policy) {
            a.observe(context, action, reward);
            since_update += 1;
            let warm_done = buffer.len() >= spec.warm_start_pulls * n_actions;
            if warm_done && (a.posterior().is_none() || since_update >= spec.env_steps_per_phase) {
                a.update(&buffer)?;
                since_update = 0;
            }
        }
    }
    Ok(BanditRun { trace, uniform_cum_regret: cum_uniform, rebuilds: agent.map_or(0, |a| a.rebuilds()) })
}
