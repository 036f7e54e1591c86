//! Multiagent soft actor-critic with one centralized Q and one centralized
//! soft value function per agent.
//!
//! Noise arguments hold one `batch x act_dim` standard-normal matrix per
//! agent and drive every agent's reparameterized sample.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::replay::Transition;
use crate::tensor::{Grad, Matrix, Mlp, SquashedGaussian, SquashedSample, Trace};

use super::batch::{
    action_slot, agent_obs, check_batch, column, critic_input, critic_input_with_actions, joint_obs, not_done, rewards,
};
use super::{AgentBundle, AgentUpdate, AlgoConfig, TeamDims};

fn team_dims(bundles: &[AgentBundle], agent: usize) -> Result<TeamDims> {
    let dims = bundles
        .first()
        .ok_or_else(|| Error::Shape("no agents".into()))?
        .dims;
    if agent >= dims.n_agents || bundles.len() != dims.n_agents {
        return Err(Error::Shape(format!(
            "agent {agent} of a team of {} bundles sized for {}",
            bundles.len(),
            dims.n_agents
        )));
    }
    Ok(dims)
}

fn value_nets(bundle: &AgentBundle) -> Result<(&Mlp, &Mlp)> {
    match (&bundle.value, &bundle.target_value) {
        (Some(v), Some(t)) => Ok((v, t)),
        _ => Err(Error::State("MA-SAC bundle without value networks".into())),
    }
}

/// One agent's reparameterized samples over a minibatch.
struct PolicySamples {
    trace: Trace,
    dists: Vec<SquashedGaussian>,
    samples: Vec<SquashedSample>,
    actions: Matrix,
}

fn sample_policy(bundle: &AgentBundle, obs: &Matrix, noise: &Matrix) -> Result<PolicySamples> {
    let act_dim = bundle.dims.act_dim;
    if noise.rows() != obs.rows() || noise.cols() != act_dim {
        return Err(Error::Shape(format!(
            "policy noise is {}x{}, expected {}x{act_dim}",
            noise.rows(),
            noise.cols(),
            obs.rows()
        )));
    }
    let trace = bundle.actor.forward_batch(obs)?;
    let mut dists = Vec::with_capacity(obs.rows());
    let mut samples = Vec::with_capacity(obs.rows());
    let mut actions = Matrix::zeros(obs.rows(), act_dim);
    for r in 0..obs.rows() {
        let dist = SquashedGaussian::from_head(trace.output().row(r))?;
        let s = dist.sample(noise.row(r))?;
        actions.row_mut(r).copy_from_slice(&s.action);
        dists.push(dist);
        samples.push(s);
    }
    Ok(PolicySamples {
        trace,
        dists,
        samples,
        actions,
    })
}

fn sample_team(bundles: &[AgentBundle], batch: &[&Transition], noise: &[Matrix], dims: &TeamDims) -> Result<Vec<PolicySamples>> {
    if noise.len() != bundles.len() {
        return Err(Error::Shape(format!("{} noise blocks for {} agents", noise.len(), bundles.len())));
    }
    bundles
        .iter()
        .zip(noise)
        .enumerate()
        .map(|(i, (b, n))| sample_policy(b, &agent_obs(batch.iter().map(|t| &t.obs), i, dims.obs_dim), n))
        .collect()
}

fn check_finite(loss: f64, grad: &Grad) -> Result<()> {
    if !loss.is_finite() || !grad.is_finite() {
        return Err(Error::Numeric("non-finite loss or gradient".into()));
    }
    Ok(())
}

/// Half mean squared error of `net(input)` against `targets`, with gradient.
fn regression(net: &Mlp, input: &Matrix, targets: &[f64]) -> Result<AgentUpdate> {
    let trace = net.forward_batch(input)?;
    let n = targets.len() as f64;
    let mut loss = 0.0;
    let upstream: Vec<f64> = targets
        .iter()
        .enumerate()
        .map(|(r, y)| {
            let e = trace.output().get(r, 0) - y;
            loss += 0.5 * e * e / n;
            e / n
        })
        .collect();
    let mut grad = Grad::zeros_like(net);
    net.accumulate_grad(&trace, &column(&upstream), &mut grad)?;
    check_finite(loss, &grad)?;
    Ok(AgentUpdate { grad, loss })
}

fn value_targets_from(
    bundle: &AgentBundle,
    agent: usize,
    sampled_input: &Matrix,
    team: &[PolicySamples],
    alpha: f64,
) -> Result<Vec<f64>> {
    let q = bundle.critic.forward_batch(sampled_input)?;
    Ok(team[agent]
        .samples
        .iter()
        .enumerate()
        .map(|(r, s)| q.output().get(r, 0) - alpha * s.log_prob)
        .collect())
}

/// Single-sample soft value targets `Q(o, a~) - alpha log pi_i(a~_i | o_i)`
/// with every agent's action drawn from its current policy.
pub fn value_targets(
    bundles: &[AgentBundle],
    agent: usize,
    batch: &[&Transition],
    noise: &[Matrix],
    cfg: &AlgoConfig,
) -> Result<Vec<f64>> {
    let dims = team_dims(bundles, agent)?;
    check_batch(batch, &dims, false)?;
    let team = sample_team(bundles, batch, noise, &dims)?;
    let joint = joint_obs(batch.iter().map(|t| &t.obs), &dims);
    let actions: Vec<Matrix> = team.iter().map(|p| p.actions.clone()).collect();
    let input = critic_input_with_actions(&joint, &actions, &dims);
    value_targets_from(&bundles[agent], agent, &input, &team, cfg.alpha)
}

/// Soft value regression for agent `agent`.
pub fn value_loss(
    bundles: &[AgentBundle],
    agent: usize,
    batch: &[&Transition],
    noise: &[Matrix],
    cfg: &AlgoConfig,
) -> Result<AgentUpdate> {
    let dims = team_dims(bundles, agent)?;
    let targets = value_targets(bundles, agent, batch, noise, cfg)?;
    let joint = joint_obs(batch.iter().map(|t| &t.obs), &dims);
    regression(value_nets(&bundles[agent])?.0, &joint, &targets)
}

fn q_targets_from(bundle: &AgentBundle, next_joint: &Matrix, batch: &[&Transition], gamma: f64) -> Result<Vec<f64>> {
    let v = value_nets(bundle)?.1.forward_batch(next_joint)?;
    let mask = not_done(batch);
    Ok(rewards(batch)
        .iter()
        .enumerate()
        .map(|(r, reward)| reward + gamma * mask[r] * v.output().get(r, 0))
        .collect())
}

/// `r + gamma (1 - done) V'(o')` from agent `agent`'s target value network.
pub fn q_targets(bundles: &[AgentBundle], agent: usize, batch: &[&Transition], cfg: &AlgoConfig) -> Result<Vec<f64>> {
    let dims = team_dims(bundles, agent)?;
    check_batch(batch, &dims, false)?;
    let next = joint_obs(batch.iter().map(|t| &t.next_obs), &dims);
    q_targets_from(&bundles[agent], &next, batch, cfg.gamma)
}

/// Soft Q regression for agent `agent` on the recorded joint actions.
pub fn q_loss(bundles: &[AgentBundle], agent: usize, batch: &[&Transition], cfg: &AlgoConfig) -> Result<AgentUpdate> {
    let dims = team_dims(bundles, agent)?;
    let targets = q_targets(bundles, agent, batch, cfg)?;
    let input = critic_input(batch.iter().map(|t| (&t.obs, &t.actions)), &dims);
    regression(&bundles[agent].critic, &input, &targets)
}

fn actor_loss_from(
    bundle: &AgentBundle,
    agent: usize,
    sampled_input: &Matrix,
    team: &[PolicySamples],
    dims: &TeamDims,
    alpha: f64,
) -> Result<AgentUpdate> {
    let own = &team[agent];
    let b = own.samples.len() as f64;
    let q = bundle.critic.forward_batch(sampled_input)?;
    let mean_q = q.output().as_slice().iter().sum::<f64>() / b;
    let mean_log_prob = own.samples.iter().map(|s| s.log_prob).sum::<f64>() / b;
    let loss = alpha * mean_log_prob - mean_q;

    let d_input = bundle
        .critic
        .input_gradient(&q, &column(&vec![-1.0 / b; own.samples.len()]))?;
    let d_action = action_slot(&d_input, agent, dims);
    let mut d_head = Matrix::zeros(own.samples.len(), 2 * dims.act_dim);
    for (r, (dist, s)) in own.dists.iter().zip(&own.samples).enumerate() {
        d_head
            .row_mut(r)
            .copy_from_slice(&dist.sample_backward(s, d_action.row(r), alpha / b));
    }
    let mut grad = Grad::zeros_like(&bundle.actor);
    bundle.actor.accumulate_grad(&own.trace, &d_head, &mut grad)?;
    check_finite(loss, &grad)?;
    Ok(AgentUpdate { grad, loss })
}

/// `mean[alpha log pi_i(a~_i | o_i) - Q(o, a~)]` with agent `agent`'s
/// action reparameterized and the others sampled without gradient.
pub fn actor_loss(
    bundles: &[AgentBundle],
    agent: usize,
    batch: &[&Transition],
    noise: &[Matrix],
    cfg: &AlgoConfig,
) -> Result<AgentUpdate> {
    let dims = team_dims(bundles, agent)?;
    check_batch(batch, &dims, false)?;
    let team = sample_team(bundles, batch, noise, &dims)?;
    let joint = joint_obs(batch.iter().map(|t| &t.obs), &dims);
    let actions: Vec<Matrix> = team.iter().map(|p| p.actions.clone()).collect();
    let input = critic_input_with_actions(&joint, &actions, &dims);
    actor_loss_from(&bundles[agent], agent, &input, &team, &dims, cfg.alpha)
}

/// Standard-normal noise for every agent over a minibatch.
pub fn draw_noise<R: Rng + ?Sized>(dims: &TeamDims, rows: usize, rng: &mut R) -> Vec<Matrix> {
    (0..dims.n_agents)
        .map(|_| {
            let data = (0..rows * dims.act_dim).map(|_| rng.sample(StandardNormal)).collect();
            Matrix::from_vec(rows, dims.act_dim, data).expect("noise shape")
        })
        .collect()
}

struct SampledBatch {
    joint: Matrix,
    input: Matrix,
    team: Vec<PolicySamples>,
}

fn sampled_batch<R: Rng + ?Sized>(
    bundles: &[AgentBundle],
    batch: &[&Transition],
    dims: &TeamDims,
    rng: &mut R,
) -> Result<SampledBatch> {
    check_batch(batch, dims, false)?;
    let noise = draw_noise(dims, batch.len(), rng);
    let team = sample_team(bundles, batch, &noise, dims)?;
    let joint = joint_obs(batch.iter().map(|t| &t.obs), dims);
    let actions: Vec<Matrix> = team.iter().map(|p| p.actions.clone()).collect();
    let input = critic_input_with_actions(&joint, &actions, dims);
    Ok(SampledBatch { joint, input, team })
}

/// Value losses and gradients for every agent, sharing one draw of actions.
pub fn value_update<R: Rng + ?Sized>(
    bundles: &[AgentBundle],
    batch: &[&Transition],
    cfg: &AlgoConfig,
    rng: &mut R,
) -> Result<Vec<AgentUpdate>> {
    let dims = team_dims(bundles, 0)?;
    let s = sampled_batch(bundles, batch, &dims, rng)?;
    bundles
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let targets = value_targets_from(b, i, &s.input, &s.team, cfg.alpha)?;
            regression(value_nets(b)?.0, &s.joint, &targets)
        })
        .collect()
}

/// Q losses and gradients for every agent.
pub fn q_update(bundles: &[AgentBundle], batch: &[&Transition], cfg: &AlgoConfig) -> Result<Vec<AgentUpdate>> {
    let dims = team_dims(bundles, 0)?;
    check_batch(batch, &dims, false)?;
    let next = joint_obs(batch.iter().map(|t| &t.next_obs), &dims);
    let input = critic_input(batch.iter().map(|t| (&t.obs, &t.actions)), &dims);
    bundles
        .iter()
        .map(|b| regression(&b.critic, &input, &q_targets_from(b, &next, batch, cfg.gamma)?))
        .collect()
}

/// Actor losses and gradients for every agent, sharing one draw of actions.
pub fn actor_update<R: Rng + ?Sized>(
    bundles: &[AgentBundle],
    batch: &[&Transition],
    cfg: &AlgoConfig,
    rng: &mut R,
) -> Result<Vec<AgentUpdate>> {
    let dims = team_dims(bundles, 0)?;
    let s = sampled_batch(bundles, batch, &dims, rng)?;
    bundles
        .iter()
        .enumerate()
        .map(|(i, b)| actor_loss_from(b, i, &s.input, &s.team, &dims, cfg.alpha))
        .collect()
}
