//! Centralized-critic training: discrete-action MADDPG and multiagent soft
//! actor-critic. Each agent owns a decentralized actor and centralized
//! critics over the joint observation and joint action.
//!
//! The `*_loss` functions take their exploration noise as an argument so the
//! losses are deterministic functions of the parameters; the `*_update`
//! functions draw the noise and evaluate every agent.

pub mod batch;
pub mod maddpg;
pub mod masac;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::env::{JointAction, JointObs, ObsVector, DISCRETE_ACTIONS, FORCE_DIM};
use crate::error::{Error, Result};
use crate::replay::ReplayBuffer;
use crate::tensor::{adam_step, AdamState, Grad, Mlp, SquashedGaussian};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Algorithm {
    /// MADDPG over five discrete actions with a Gumbel-softmax actor update.
    MaddpgDiscrete,
    /// Multiagent soft actor-critic with tanh-squashed Gaussian actors.
    Masac,
}

impl Algorithm {
    pub fn is_discrete(self) -> bool {
        matches!(self, Algorithm::MaddpgDiscrete)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::MaddpgDiscrete => "maddpg",
            Algorithm::Masac => "masac",
        })
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "maddpg" | "maddpg_discrete" => Ok(Algorithm::MaddpgDiscrete),
            "masac" => Ok(Algorithm::Masac),
            other => Err(Error::Config(format!("unknown algorithm `{other}`"))),
        }
    }
}

/// Linear decay from `start` to `end` over the first `decay_fraction` of a
/// phase's environment steps, flat afterwards.
#[derive(Clone, Debug, PartialEq)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_fraction: f64,
    /// Restart the decay at the beginning of every phase.
    pub reset_each_phase: bool,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        EpsilonSchedule {
            start: 1.0,
            end: 0.05,
            decay_fraction: 0.2,
            reset_each_phase: true,
        }
    }
}

impl EpsilonSchedule {
    pub fn value(&self, step: usize, phase_steps: usize) -> f64 {
        let horizon = self.decay_fraction * phase_steps as f64;
        if horizon <= 0.0 || step as f64 >= horizon {
            return self.end;
        }
        self.start + (self.end - self.start) * (step as f64 / horizon)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlgoConfig {
    pub algorithm: Algorithm,
    /// Hidden layer widths shared by every network.
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub batch_size: usize,
    /// Entropy coefficient (MA-SAC).
    pub alpha: f64,
    /// Polyak rate for target networks.
    pub rho: f64,
    /// Gumbel-softmax temperature for the MADDPG actor update.
    pub gumbel_temperature: f64,
    pub epsilon: EpsilonSchedule,
    /// Optional L2 clip applied to every gradient before Adam.
    pub grad_clip: Option<f64>,
    /// Weight of the mean squared logit penalty in the MADDPG actor loss.
    pub logit_reg: f64,
    /// Environment steps between update rounds.
    pub update_every: usize,
}

impl AlgoConfig {
    pub fn for_algorithm(algorithm: Algorithm) -> Self {
        let (lr, grad_clip, logit_reg) = match algorithm {
            Algorithm::MaddpgDiscrete => (0.01, Some(0.5), 1e-3),
            Algorithm::Masac => (3e-4, None, 0.0),
        };
        AlgoConfig {
            algorithm,
            hidden: vec![256, 256],
            gamma: 0.95,
            actor_lr: lr,
            critic_lr: lr,
            batch_size: 1024,
            alpha: 0.1,
            rho: 0.01,
            gumbel_temperature: 1.0,
            epsilon: EpsilonSchedule::default(),
            grad_clip,
            logit_reg,
            update_every: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.gamma) {
            return fail(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if !(self.alpha > 0.0) && self.algorithm == Algorithm::Masac {
            return fail(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return fail(format!("rho must lie in (0, 1], got {}", self.rho));
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return fail("learning rates must be positive".into());
        }
        if self.batch_size == 0 || self.update_every == 0 {
            return fail("batch size and update cadence must be positive".into());
        }
        if !(self.gumbel_temperature > 0.0) {
            return fail("gumbel temperature must be positive".into());
        }
        if self.hidden.iter().any(|h| *h == 0) {
            return fail("hidden widths must be positive".into());
        }
        let e = &self.epsilon;
        if !(0.0..=1.0).contains(&e.start) || !(0.0..=1.0).contains(&e.end) || e.decay_fraction < 0.0 {
            return fail("epsilon schedule out of range".into());
        }
        Ok(())
    }
}

/// Team-wide layout: every agent shares these widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TeamDims {
    pub n_agents: usize,
    pub obs_dim: usize,
    /// Width of one agent's action block in critic inputs.
    pub act_dim: usize,
}

impl TeamDims {
    pub fn for_algorithm(algorithm: Algorithm, n_agents: usize, obs_dim: usize) -> Self {
        let act_dim = if algorithm.is_discrete() { DISCRETE_ACTIONS } else { FORCE_DIM };
        TeamDims {
            n_agents,
            obs_dim,
            act_dim,
        }
    }

    pub fn joint_obs_dim(&self) -> usize {
        self.n_agents * self.obs_dim
    }

    pub fn critic_input_dim(&self) -> usize {
        self.n_agents * (self.obs_dim + self.act_dim)
    }

    /// Logits for discrete actors, `[mean, log-stddev]` for Gaussian ones.
    pub fn actor_output_dim(&self, algorithm: Algorithm) -> usize {
        if algorithm.is_discrete() {
            self.act_dim
        } else {
            2 * self.act_dim
        }
    }
}

fn layer_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut sizes = vec![input];
    sizes.extend_from_slice(hidden);
    sizes.push(output);
    sizes
}

/// Every network and optimizer belonging to one agent.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentBundle {
    pub algorithm: Algorithm,
    pub dims: TeamDims,
    pub actor: Mlp,
    pub critic: Mlp,
    /// Centralized soft value function (MA-SAC).
    pub value: Option<Mlp>,
    pub target_value: Option<Mlp>,
    /// MADDPG target actor and critic.
    pub target_actor: Option<Mlp>,
    pub target_critic: Option<Mlp>,
    pub actor_opt: AdamState,
    pub critic_opt: AdamState,
    pub value_opt: Option<AdamState>,
}

impl AgentBundle {
    pub fn new<R: Rng + ?Sized>(cfg: &AlgoConfig, dims: TeamDims, rng: &mut R) -> Self {
        let actor = Mlp::new(
            &layer_sizes(dims.obs_dim, &cfg.hidden, dims.actor_output_dim(cfg.algorithm)),
            rng,
        );
        let critic = Mlp::new(&layer_sizes(dims.critic_input_dim(), &cfg.hidden, 1), rng);
        let actor_opt = AdamState::new(&actor, cfg.actor_lr);
        let critic_opt = AdamState::new(&critic, cfg.critic_lr);
        match cfg.algorithm {
            Algorithm::MaddpgDiscrete => AgentBundle {
                algorithm: cfg.algorithm,
                dims,
                target_actor: Some(actor.clone()),
                target_critic: Some(critic.clone()),
                actor,
                critic,
                value: None,
                target_value: None,
                actor_opt,
                critic_opt,
                value_opt: None,
            },
            Algorithm::Masac => {
                let value = Mlp::new(&layer_sizes(dims.joint_obs_dim(), &cfg.hidden, 1), rng);
                AgentBundle {
                    algorithm: cfg.algorithm,
                    dims,
                    actor,
                    critic,
                    target_value: Some(value.clone()),
                    value_opt: Some(AdamState::new(&value, cfg.critic_lr)),
                    value: Some(value),
                    target_actor: None,
                    target_critic: None,
                    actor_opt,
                    critic_opt,
                }
            }
        }
    }

    /// Named networks in a stable order.
    pub fn networks(&self) -> Vec<(&'static str, &Mlp)> {
        let mut out = vec![("actor", &self.actor), ("critic", &self.critic)];
        for (name, net) in [
            ("value", &self.value),
            ("target_value", &self.target_value),
            ("target_actor", &self.target_actor),
            ("target_critic", &self.target_critic),
        ] {
            if let Some(n) = net {
                out.push((name, n));
            }
        }
        out
    }

    pub fn network_mut(&mut self, name: &str) -> Option<&mut Mlp> {
        match name {
            "actor" => Some(&mut self.actor),
            "critic" => Some(&mut self.critic),
            "value" => self.value.as_mut(),
            "target_value" => self.target_value.as_mut(),
            "target_actor" => self.target_actor.as_mut(),
            "target_critic" => self.target_critic.as_mut(),
            _ => None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.networks().iter().all(|(_, n)| n.is_finite())
    }

    /// Re-copies every target network from its source.
    pub fn sync_targets(&mut self) -> Result<()> {
        if let (Some(t), Some(v)) = (self.target_value.as_mut(), self.value.as_ref()) {
            t.copy_from(v)?;
        }
        if let Some(t) = self.target_actor.as_mut() {
            t.copy_from(&self.actor)?;
        }
        if let Some(t) = self.target_critic.as_mut() {
            t.copy_from(&self.critic)?;
        }
        Ok(())
    }
}

/// Gradient and loss for one agent's network.
#[derive(Clone, Debug)]
pub struct AgentUpdate {
    pub grad: Grad,
    pub loss: f64,
}

/// Action selection regime.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActionMode {
    /// Epsilon-greedy (MADDPG) or sampling (MA-SAC).
    Explore { epsilon: f64 },
    /// Greedy logits (MADDPG) or `tanh(mean)` (MA-SAC).
    Evaluate,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AgentAction {
    Discrete(usize),
    Continuous(Vec<f64>),
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn select_action<R: Rng + ?Sized>(
    bundle: &AgentBundle,
    obs: &ObsVector,
    mode: ActionMode,
    rng: &mut R,
) -> Result<AgentAction> {
    let head = bundle.actor.forward(obs)?;
    match bundle.algorithm {
        Algorithm::MaddpgDiscrete => {
            let greedy = argmax(&head);
            Ok(AgentAction::Discrete(match mode {
                ActionMode::Explore { epsilon } if rng.random::<f64>() < epsilon => {
                    rng.random_range(0..head.len())
                }
                _ => greedy,
            }))
        }
        Algorithm::Masac => {
            let dist = SquashedGaussian::from_head(&head)?;
            Ok(AgentAction::Continuous(match mode {
                ActionMode::Explore { .. } => {
                    let noise: Vec<f64> = (0..dist.dim()).map(|_| rng.sample(StandardNormal)).collect();
                    dist.sample(&noise)?.action
                }
                ActionMode::Evaluate => dist.deterministic_action(),
            }))
        }
    }
}

/// Decentralized execution: agent `i` acts on its own observation only.
pub fn select_joint_action<R: Rng + ?Sized>(
    bundles: &[AgentBundle],
    obs: &JointObs,
    mode: ActionMode,
    rng: &mut R,
) -> Result<JointAction> {
    let actions = bundles
        .iter()
        .zip(obs)
        .map(|(b, o)| select_action(b, o, mode, rng))
        .collect::<Result<Vec<_>>>()?;
    if bundles.first().is_some_and(|b| b.algorithm.is_discrete()) {
        Ok(JointAction::Discrete(
            actions
                .into_iter()
                .map(|a| match a {
                    AgentAction::Discrete(i) => i,
                    AgentAction::Continuous(_) => unreachable!(),
                })
                .collect(),
        ))
    } else {
        Ok(JointAction::Continuous(
            actions
                .into_iter()
                .map(|a| match a {
                    AgentAction::Continuous(v) => v,
                    AgentAction::Discrete(_) => unreachable!(),
                })
                .collect(),
        ))
    }
}

/// Polyak-averages every target network toward its source.
pub fn target_update(bundles: &mut [AgentBundle], rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Config(format!("rho must lie in (0, 1], got {rho}")));
    }
    for b in bundles.iter_mut() {
        if let (Some(t), Some(v)) = (b.target_value.as_mut(), b.value.as_ref()) {
            t.polyak_from(v, rho)?;
        }
        if let Some(t) = b.target_actor.as_mut() {
            t.polyak_from(&b.actor, rho)?;
        }
        if let Some(t) = b.target_critic.as_mut() {
            t.polyak_from(&b.critic, rho)?;
        }
    }
    Ok(())
}

/// Clips (optionally) and applies one Adam step.
pub fn apply_grad(net: &mut Mlp, opt: &mut AdamState, mut grad: Grad, clip: Option<f64>) -> Result<()> {
    if let Some(c) = clip {
        grad.clip_norm(c);
    }
    adam_step(net, &grad, opt)
}

/// Mean losses over agents for one update round.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RoundStats {
    pub actor_loss: f64,
    pub critic_loss: f64,
    /// MA-SAC value loss; zero for MADDPG.
    pub value_loss: f64,
}

fn mean_loss(updates: &[AgentUpdate]) -> f64 {
    updates.iter().map(|u| u.loss).sum::<f64>() / updates.len().max(1) as f64
}

/// One gradient round for the whole team on a shared minibatch, followed by
/// the target-network update.
pub fn train_round<R: Rng + ?Sized>(
    bundles: &mut [AgentBundle],
    buffer: &ReplayBuffer,
    cfg: &AlgoConfig,
    rng: &mut R,
) -> Result<RoundStats> {
    let batch = buffer.sample_batch(cfg.batch_size, rng)?;
    let stats = match cfg.algorithm {
        Algorithm::MaddpgDiscrete => {
            let critic = maddpg::critic_update(bundles, &batch, cfg)?;
            let critic_loss = mean_loss(&critic);
            for (b, u) in bundles.iter_mut().zip(critic) {
                apply_grad(&mut b.critic, &mut b.critic_opt, u.grad, cfg.grad_clip)?;
            }
            let actor = maddpg::actor_update(bundles, &batch, cfg, rng)?;
            let actor_loss = mean_loss(&actor);
            for (b, u) in bundles.iter_mut().zip(actor) {
                apply_grad(&mut b.actor, &mut b.actor_opt, u.grad, cfg.grad_clip)?;
            }
            RoundStats {
                actor_loss,
                critic_loss,
                value_loss: 0.0,
            }
        }
        Algorithm::Masac => {
            let actor = masac::actor_update(bundles, &batch, cfg, rng)?;
            let value = masac::value_update(bundles, &batch, cfg, rng)?;
            let critic = masac::q_update(bundles, &batch, cfg)?;
            let stats = RoundStats {
                actor_loss: mean_loss(&actor),
                critic_loss: mean_loss(&critic),
                value_loss: mean_loss(&value),
            };
            for (((b, a), v), q) in bundles.iter_mut().zip(actor).zip(value).zip(critic) {
                apply_grad(&mut b.actor, &mut b.actor_opt, a.grad, cfg.grad_clip)?;
                let (net, opt) = (b.value.as_mut().unwrap(), b.value_opt.as_mut().unwrap());
                apply_grad(net, opt, v.grad, cfg.grad_clip)?;
                apply_grad(&mut b.critic, &mut b.critic_opt, q.grad, cfg.grad_clip)?;
            }
            stats
        }
    };
    target_update(bundles, cfg.rho)?;
    Ok(stats)
}
