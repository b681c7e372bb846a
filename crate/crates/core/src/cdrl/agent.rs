use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::replay::Batch;
use crate::error::{CisacError, Result};
use crate::nn::{read_checkpoint, write_checkpoint, Gradients, Mlp, Output};

/// Actor, reward critic, cost critic, their target copies and the dual
/// variable.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentNets {
    pub actor: Mlp,
    pub reward_critic: Mlp,
    pub cost_critic: Mlp,
    pub actor_target: Mlp,
    pub reward_target: Mlp,
    pub cost_target: Mlp,
    pub lambda: f64,
}

/// Result of a Wolpertinger selection.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub action: Vec<f64>,
    pub candidates: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
    pub chosen: usize,
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

fn joined(states: &Array2<f64>, actions: &Array2<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[states.view(), actions.view()]).expect("row counts agree")
}

fn negated(g: &Gradients) -> Gradients {
    Gradients { layers: g.layers.iter().map(|(w, b)| (-w, -b)).collect() }
}

fn column(x: Array2<f64>) -> Array1<f64> {
    x.column(0).to_owned()
}

impl AgentNets {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let actor = Mlp::new(&widths(state_dim, hidden, action_dim), Output::Tanh, rng)?;
        let reward_critic = Mlp::new(&widths(state_dim + action_dim, hidden, 1), Output::Linear, rng)?;
        let cost_critic = Mlp::new(&widths(state_dim + action_dim, hidden, 1), Output::Linear, rng)?;
        Ok(AgentNets {
            actor_target: actor.clone(),
            reward_target: reward_critic.clone(),
            cost_target: cost_critic.clone(),
            actor,
            reward_critic,
            cost_critic,
            lambda: 0.0,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.actor.output_dim()
    }

    pub fn is_finite(&self) -> bool {
        self.lambda.is_finite()
            && [&self.actor, &self.reward_critic, &self.cost_critic, &self.actor_target, &self.reward_target, &self.cost_target]
                .iter()
                .all(|n| n.is_finite())
    }

    pub fn act(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.actor.forward_one(state)
    }

    /// `(Q₁, Q₂)` for each row pair.
    pub fn q_values(&self, states: &Array2<f64>, actions: &Array2<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
        let x = joined(states, actions);
        Ok((column(self.reward_critic.forward(&x)?), column(self.cost_critic.forward(&x)?)))
    }

    pub fn save<W: std::io::Write>(&self, out: &mut W) -> Result<()> {
        write_checkpoint(
            out,
            &[&self.actor, &self.reward_critic, &self.cost_critic, &self.actor_target, &self.reward_target, &self.cost_target],
            &[self.lambda],
        )
    }

    pub fn load<R: std::io::Read>(input: &mut R) -> Result<Self> {
        let (nets, extra) = read_checkpoint(input)?;
        let (Ok([actor, reward_critic, cost_critic, actor_target, reward_target, cost_target]), [lambda]) =
            (<[Mlp; 6]>::try_from(nets), extra.as_slice())
        else {
            return Err(CisacError::Checkpoint("agent checkpoint needs six networks and one scalar".into()));
        };
        Ok(AgentNets { actor, reward_critic, cost_critic, actor_target, reward_target, cost_target, lambda: *lambda })
    }
}

/// Lagrangian score `Q₁ − λ(Q₂ − Γ_c)`.
pub fn lagrangian(q1: f64, q2: f64, lambda: f64, gamma_c: f64) -> f64 {
    q1 - lambda * (q2 - gamma_c)
}

/// Candidates around a proto-action: the proto itself, then Gaussian
/// perturbations whose gates are rounded to ±1 following a binary counter so
/// both roundings of every gate appear when `k` allows.
pub fn wolpertinger_candidates<R: Rng + ?Sized>(proto: &[f64], gates: &[usize], k: usize, perturb_std: f64, rng: &mut R) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, perturb_std).expect("finite perturbation scale");
    let mut out = Vec::with_capacity(k);
    out.push(proto.to_vec());
    for i in 1..k {
        let mut c: Vec<f64> = proto.iter().map(|&v| (v + normal.sample(rng)).clamp(-1.0, 1.0)).collect();
        let pattern = i - 1;
        for (bit, &g) in gates.iter().enumerate() {
            let on = if bit < usize::BITS as usize { (pattern >> bit) & 1 == 0 } else { proto[g] >= 0.0 };
            c[g] = if on { 1.0 } else { -1.0 };
        }
        out.push(c);
    }
    out
}

/// Proto-action `κ(s) + noise`, refined by the critics over `k` candidates.
/// Ties go to the lowest index.
#[allow(clippy::too_many_arguments)]
pub fn select_action<R: Rng + ?Sized>(
    nets: &AgentNets,
    state: &[f64],
    gamma_c: f64,
    k: usize,
    noise: &[f64],
    gates: &[usize],
    perturb_std: f64,
    rng: &mut R,
) -> Result<Selection> {
    if k == 0 {
        return Err(CisacError::Usage("Wolpertinger K must be >= 1".into()));
    }
    let base = nets.act(state)?;
    if noise.len() != base.len() {
        return Err(CisacError::Usage("noise has the wrong dimension".into()));
    }
    let proto: Vec<f64> = base.iter().zip(noise).map(|(a, n)| (a + n).clamp(-1.0, 1.0)).collect();
    let candidates = wolpertinger_candidates(&proto, gates, k, perturb_std, rng);
    score_candidates(nets, state, gamma_c, candidates)
}

/// Pick the best of the given candidates under the Lagrangian score.
pub fn score_candidates(nets: &AgentNets, state: &[f64], gamma_c: f64, candidates: Vec<Vec<f64>>) -> Result<Selection> {
    let k = candidates.len();
    if k == 1 {
        let action = candidates[0].clone();
        return Ok(Selection { action, candidates, scores: vec![f64::NAN], chosen: 0 });
    }
    let da = candidates[0].len();
    let states = Array2::from_shape_fn((k, state.len()), |(_, j)| state[j]);
    let actions = Array2::from_shape_fn((k, da), |(i, j)| candidates[i][j]);
    let (q1, q2) = nets.q_values(&states, &actions)?;
    let scores: Vec<f64> = q1.iter().zip(&q2).map(|(&a, &b)| lagrangian(a, b, nets.lambda, gamma_c)).collect();
    let chosen = argmax_first(&scores);
    debug_assert!(scores.iter().all(|&s| s.is_nan() || scores[chosen] >= s));
    Ok(Selection { action: candidates[chosen].clone(), candidates, scores, chosen })
}

/// Index of the largest score, lowest index on ties. NaN never wins.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut chosen = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[chosen] || (scores[chosen].is_nan() && !s.is_nan()) {
            chosen = i;
        }
    }
    chosen
}

/// `y = r + γ·Q₁′(s′, κ′(s′))`, `z = c + γ·Q₂′(s′, κ′(s′))`.
pub fn critic_targets(batch: &Batch, nets: &AgentNets, gamma: f64) -> Result<(Array1<f64>, Array1<f64>)> {
    if batch.is_empty() {
        return Err(CisacError::Usage("empty batch".into()));
    }
    let next_a = nets.actor_target.forward(&batch.next_states)?;
    let x = joined(&batch.next_states, &next_a);
    let q1 = column(nets.reward_target.forward(&x)?);
    let q2 = column(nets.cost_target.forward(&x)?);
    Ok((&batch.rewards + &(q1 * gamma), &batch.costs + &(q2 * gamma)))
}

/// Mean squared error `Σ(t − Q)²/N` and its parameter gradient.
pub fn critic_loss_grad(critic: &Mlp, states: &Array2<f64>, actions: &Array2<f64>, targets: &Array1<f64>) -> Result<(f64, Gradients)> {
    let n = targets.len() as f64;
    let tape = critic.forward_tape(&joined(states, actions))?;
    let q = tape.output().column(0).to_owned();
    let resid = &q - targets;
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / n;
    let grad_out = (resid * (2.0 / n)).insert_axis(Axis(1));
    Ok((loss, critic.backward(&tape, &grad_out).0))
}

/// One descent step per critic. Returns the two losses before the step.
pub fn critic_update(
    batch: &Batch,
    y: &Array1<f64>,
    z: &Array1<f64>,
    nets: &mut AgentNets,
    lr_reward: f64,
    lr_cost: f64,
    clip: Option<f64>,
) -> Result<(f64, f64)> {
    let (f1, g1) = critic_loss_grad(&nets.reward_critic, &batch.states, &batch.actions, y)?;
    let (f2, g2) = critic_loss_grad(&nets.cost_critic, &batch.states, &batch.actions, z)?;
    if !f1.is_finite() || !f2.is_finite() {
        return Err(CisacError::Training(format!("critic loss is not finite (reward {f1}, cost {f2})")));
    }
    nets.reward_critic.apply(&g1, lr_reward, clip)?;
    nets.cost_critic.apply(&g2, lr_cost, clip)?;
    Ok((f1, f2))
}

/// `J = Σ_i [Q₁(s_i, κ(s_i)) − λ·Q₂(s_i, κ(s_i))]/N` and `∇J` over the
/// actor parameters.
pub fn actor_objective_grad(nets: &AgentNets, states: &Array2<f64>) -> Result<(f64, Gradients)> {
    let n = states.nrows() as f64;
    let ds = states.ncols();
    let actor_tape = nets.actor.forward_tape(states)?;
    let x = joined(states, actor_tape.output());
    let t1 = nets.reward_critic.forward_tape(&x)?;
    let t2 = nets.cost_critic.forward_tape(&x)?;
    let j = (t1.output().sum() - nets.lambda * t2.output().sum()) / n;
    let (_, dx1) = nets.reward_critic.backward(&t1, &Array2::from_elem((states.nrows(), 1), 1.0 / n));
    let (_, dx2) = nets.cost_critic.backward(&t2, &Array2::from_elem((states.nrows(), 1), -nets.lambda / n));
    let da = (&dx1 + &dx2).slice(s![.., ds..]).to_owned();
    Ok((j, nets.actor.backward(&actor_tape, &da).0))
}

/// Ascent step on `J`. Returns `J` before the step.
pub fn actor_update(batch: &Batch, nets: &mut AgentNets, lr: f64, clip: Option<f64>) -> Result<f64> {
    let (j, g) = actor_objective_grad(nets, &batch.states)?;
    if !g.is_finite() || !j.is_finite() {
        return Err(CisacError::Training("actor gradient is not finite".into()));
    }
    nets.actor.apply(&negated(&g), lr, clip)?;
    Ok(j)
}

/// `max(λ + ρ·v, 0)`.
pub fn dual_step(lambda: f64, rho: f64, violation: f64) -> f64 {
    (lambda + rho * violation).max(0.0)
}

/// `λ ← max(λ + ρ·Σ_i[Q₂(s_i, κ(s_i)) − Γ_c]/N, 0)`. Returns the mean violation.
pub fn dual_update(batch: &Batch, nets: &mut AgentNets, rho: f64, gamma_c: f64) -> Result<f64> {
    let actions = nets.actor.forward(&batch.states)?;
    let (_, q2) = nets.q_values(&batch.states, &actions)?;
    let v = q2.mean().unwrap_or(0.0) - gamma_c;
    nets.lambda = dual_step(nets.lambda, rho, v);
    Ok(v)
}

/// Move all three target networks toward their online copies.
pub fn soft_update(nets: &mut AgentNets, tau: f64) -> Result<()> {
    nets.actor_target.soft_update_from(&nets.actor, tau)?;
    nets.reward_target.soft_update_from(&nets.reward_critic, tau)?;
    nets.cost_target.soft_update_from(&nets.cost_critic, tau)?;
    Ok(())
}
