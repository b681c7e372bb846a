//! Primal-dual DDPG with Wolpertinger action refinement.

mod agent;
mod noise;
mod replay;
mod train;

pub use agent::{
    actor_objective_grad, actor_update, argmax_first, critic_loss_grad, critic_targets, critic_update, dual_step, dual_update, lagrangian,
    score_candidates, select_action, soft_update, wolpertinger_candidates, AgentNets, Selection,
};
pub use noise::{annealed, OuNoise};
pub use replay::{Batch, Experience, ReplayBuffer};
pub use train::{train, write_curve_csv, CurvePoint, TrainConfig, TrainReport};
