use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::agent::{actor_update, critic_targets, critic_update, dual_update, select_action, soft_update, AgentNets};
use super::noise::{annealed, OuNoise};
use super::replay::{Experience, ReplayBuffer};
use crate::env::{network_eta_c, threshold_from_eta, CisacEnv};
use crate::error::{CisacError, Result};
use crate::scenario::Stream;

/// Hyperparameters of the primal-dual agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes: usize,
    pub batch: usize,
    pub discount: f64,
    pub lr_reward_critic: f64,
    pub lr_cost_critic: f64,
    pub lr_actor: f64,
    pub dual_step: f64,
    pub tau: f64,
    /// Wolpertinger candidates per step.
    pub candidates: usize,
    /// Std of candidate perturbations, in box units.
    pub perturb_std: f64,
    pub ou_theta: f64,
    pub ou_sigma_start: f64,
    pub ou_sigma_end: f64,
    pub replay_capacity: usize,
    pub warmup: usize,
    pub hidden: Vec<usize>,
    pub grad_clip: f64,
    /// Reward multiplier seen by the agent; 0 means `1/p_max`.
    pub reward_scale: f64,
    /// Cost multiplier seen by the agent; 0 means `1/η_c`.
    pub cost_scale: f64,
    /// Scaled costs are clipped to `[cost_floor, cost_clip]`. With the default
    /// scale a floor of −1 is the per-step threshold, so over-satisfying the
    /// constraints earns nothing.
    pub cost_floor: f64,
    pub cost_clip: f64,
    /// Stop when the episode reward stays below this ...
    pub divergence_reward: f64,
    /// ... for this many consecutive episodes.
    pub divergence_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 2000,
            batch: 64,
            discount: 0.5,
            lr_reward_critic: 1e-3,
            lr_cost_critic: 1e-3,
            lr_actor: 1e-4,
            dual_step: 1e-2,
            tau: 5e-3,
            candidates: 16,
            perturb_std: 0.2,
            ou_theta: 0.15,
            ou_sigma_start: 0.2,
            ou_sigma_end: 0.02,
            replay_capacity: 100_000,
            warmup: 1000,
            hidden: vec![128, 128],
            grad_clip: 1.0,
            reward_scale: 0.0,
            cost_scale: 0.0,
            cost_floor: -1.0,
            cost_clip: 10.0,
            divergence_reward: -1e6,
            divergence_patience: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr_reward_critic, self.lr_cost_critic, self.lr_actor, self.dual_step, self.tau, self.grad_clip, self.cost_clip];
        if positive.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(CisacError::Config("learning rates, dual step, tau, clip values must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(CisacError::Config(format!("discount {} outside [0, 1)", self.discount)));
        }
        if self.candidates == 0 || self.batch == 0 || self.replay_capacity < self.batch || self.hidden.contains(&0) {
            return Err(CisacError::Config("candidates, batch, replay capacity and widths must be positive".into()));
        }
        if !(self.cost_floor < self.cost_clip) {
            return Err(CisacError::Config("cost_floor must be below cost_clip".into()));
        }
        if self.reward_scale < 0.0 || self.cost_scale < 0.0 || self.perturb_std <= 0.0 {
            return Err(CisacError::Config("scales must be nonnegative and perturb_std positive".into()));
        }
        Ok(())
    }
}

/// One learning-curve row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub episode: usize,
    /// Discounted sum of rewards in watts.
    pub cum_reward: f64,
    /// Discounted sum of raw costs, comparable with `Γ_c`.
    pub cum_cost: f64,
    pub lambda: f64,
    /// Mean transmit power over the episode.
    pub power: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub nets: AgentNets,
    pub curve: Vec<CurvePoint>,
    pub gamma_c: f64,
    pub reward_scale: f64,
    pub cost_scale: f64,
    /// Set when the divergence detector stopped training.
    pub diverged: Option<String>,
    pub updates: usize,
}

impl TrainReport {
    /// Deterministic action of the trained actor.
    pub fn greedy_action(&self, env: &CisacEnv) -> Result<Vec<f64>> {
        self.nets.act(&env.state().features())
    }
}

pub fn write_curve_csv<W: Write>(out: W, curve: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in curve {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

/// Primal-dual DDPG with Wolpertinger refinement. The root seed of the
/// environment's scenario fixes initialization, exploration and replay.
pub fn train(env: &mut CisacEnv, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    let scenario = env.scenario().clone();
    let mut init_rng = scenario.rng(Stream::AgentInit);
    let mut explore_rng = scenario.rng(Stream::Exploration);
    let mut replay_rng = scenario.rng(Stream::Replay);

    let state_dim = env.state_dim();
    let action_dim = env.action_dim();
    let mut nets = AgentNets::new(state_dim, action_dim, &config.hidden, &mut init_rng)?;
    let mut buffer = ReplayBuffer::new(config.replay_capacity)?;
    let mut noise = OuNoise::new(action_dim, config.ou_theta, config.ou_sigma_start);
    let gates: Vec<usize> = (0..env.codec.num_bs).map(|b| env.codec.gate_index(b)).collect();

    let eta = network_eta_c(&scenario);
    let gamma_c = threshold_from_eta(eta, env.horizon(), config.discount);
    let reward_scale = if config.reward_scale > 0.0 { config.reward_scale } else { 1.0 / scenario.action.p_max };
    let cost_scale = if config.cost_scale > 0.0 { config.cost_scale } else { 1.0 / eta.abs().max(f64::MIN_POSITIVE) };
    let scaled_gamma_c = gamma_c * cost_scale;

    let mut curve = Vec::with_capacity(config.episodes);
    let mut diverged = None;
    let mut low_streak = 0;
    let mut updates = 0;
    for episode in 0..config.episodes {
        let features = env.reset().features();
        noise.reset();
        noise.sigma = annealed(config.ou_sigma_start, config.ou_sigma_end, episode, config.episodes);
        let (mut cum_reward, mut cum_cost, mut power_sum, mut weight) = (0.0, 0.0, 0.0, 1.0);
        let mut steps = 0;
        loop {
            let raw = if buffer.len() < config.warmup {
                (0..action_dim).map(|_| explore_rng.random_range(-1.0..=1.0)).collect()
            } else {
                let n = noise.sample(&mut explore_rng);
                select_action(&nets, &features, scaled_gamma_c, config.candidates, &n, &gates, config.perturb_std, &mut explore_rng)?.action
            };
            let action = env.decode(&raw)?;
            let out = env.step(&action)?;
            cum_reward += weight * out.reward;
            cum_cost += weight * out.cost;
            weight *= config.discount;
            power_sum += out.power;
            steps += 1;
            buffer.push(Experience {
                state: features.clone(),
                action: raw,
                reward: out.reward * reward_scale,
                cost: (out.cost * cost_scale).clamp(config.cost_floor, config.cost_clip),
                next_state: out.next_state.features(),
            });

            if buffer.len() >= config.warmup.max(config.batch) {
                let batch = buffer.sample(config.batch, &mut replay_rng)?;
                let (y, z) = critic_targets(&batch, &nets, config.discount)?;
                critic_update(&batch, &y, &z, &mut nets, config.lr_reward_critic, config.lr_cost_critic, Some(config.grad_clip))?;
                actor_update(&batch, &mut nets, config.lr_actor, Some(config.grad_clip))?;
                dual_update(&batch, &mut nets, config.dual_step, scaled_gamma_c)?;
                soft_update(&mut nets, config.tau)?;
                updates += 1;
                if !nets.is_finite() {
                    return Err(CisacError::Training(format!("non-finite parameters after update {updates} (episode {episode})")));
                }
            }
            if out.done {
                break;
            }
        }
        curve.push(CurvePoint { episode, cum_reward, cum_cost, lambda: nets.lambda, power: power_sum / steps as f64 });
        if cum_reward < config.divergence_reward {
            low_streak += 1;
            if low_streak >= config.divergence_patience {
                diverged = Some(format!("reward below {} for {low_streak} episodes, stopped at episode {episode}", config.divergence_reward));
                break;
            }
        } else {
            low_streak = 0;
        }
    }
    Ok(TrainReport { nets, curve, gamma_c, reward_scale, cost_scale, diverged, updates })
}
