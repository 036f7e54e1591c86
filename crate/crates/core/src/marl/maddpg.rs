//! Discrete-action MADDPG: centralized critics regressed onto one-step
//! targets from the target networks, actors improved through a
//! Gumbel-softmax relaxation of their own action slot.

use rand::Rng;

use crate::error::{Error, Result};
use crate::replay::Transition;
use crate::tensor::{gumbel_softmax, gumbel_softmax_backward, sample_gumbel, Grad, Matrix};

use super::batch::{
    action_slot, agent_obs, check_batch, column, critic_input, critic_input_with_actions, joint_obs, map_rows,
    not_done, overwrite_action_slot, rewards,
};
use super::{argmax, AgentBundle, AgentUpdate, AlgoConfig, TeamDims};

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

fn one_hot_rows(logits: &Matrix) -> Matrix {
    map_rows(logits, logits.cols(), |_, row| {
        let mut v = vec![0.0; row.len()];
        v[argmax(row)] = 1.0;
        v
    })
}

/// Critic inputs at the next observations with every slot filled by the
/// one-hot greedy action of that agent's target actor.
fn next_critic_input(bundles: &[AgentBundle], batch: &[&Transition], dims: &TeamDims) -> Result<Matrix> {
    let next = batch.iter().map(|t| &t.next_obs);
    let joint = joint_obs(next.clone(), dims);
    let actions = bundles
        .iter()
        .enumerate()
        .map(|(j, b)| {
            let target = b
                .target_actor
                .as_ref()
                .ok_or_else(|| Error::State("MADDPG bundle without a target actor".into()))?;
            let obs = agent_obs(next.clone(), j, dims.obs_dim);
            Ok(one_hot_rows(target.forward_batch(&obs)?.output()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(critic_input_with_actions(&joint, &actions, dims))
}

fn targets_from(
    bundle: &AgentBundle,
    next_input: &Matrix,
    batch: &[&Transition],
    gamma: f64,
) -> Result<Vec<f64>> {
    let target = bundle
        .target_critic
        .as_ref()
        .ok_or_else(|| Error::State("MADDPG bundle without a target critic".into()))?;
    let q_next = target.forward_batch(next_input)?;
    let mask = not_done(batch);
    Ok(rewards(batch)
        .iter()
        .enumerate()
        .map(|(r, reward)| reward + gamma * mask[r] * q_next.output().get(r, 0))
        .collect())
}

/// Bootstrapped regression targets `r + gamma (1 - done) Q'(o', a')` for
/// agent `agent`'s critic.
pub fn td_targets(bundles: &[AgentBundle], agent: usize, batch: &[&Transition], cfg: &AlgoConfig) -> Result<Vec<f64>> {
    let dims = team_dims(bundles, agent)?;
    check_batch(batch, &dims, true)?;
    let next_input = next_critic_input(bundles, batch, &dims)?;
    targets_from(&bundles[agent], &next_input, batch, cfg.gamma)
}

fn critic_loss_from(bundle: &AgentBundle, input: &Matrix, targets: &[f64]) -> Result<AgentUpdate> {
    let trace = bundle.critic.forward_batch(input)?;
    let n = targets.len() as f64;
    let mut loss = 0.0;
    let residual: Vec<f64> = targets
        .iter()
        .enumerate()
        .map(|(r, y)| {
            let e = trace.output().get(r, 0) - y;
            loss += e * e / n;
            2.0 * e / n
        })
        .collect();
    let mut grad = Grad::zeros_like(&bundle.critic);
    bundle.critic.accumulate_grad(&trace, &column(&residual), &mut grad)?;
    check_finite(loss, &grad)?;
    Ok(AgentUpdate { grad, loss })
}

fn check_finite(loss: f64, grad: &Grad) -> Result<()> {
    if !loss.is_finite() || !grad.is_finite() {
        return Err(Error::Numeric("non-finite loss or gradient".into()));
    }
    Ok(())
}

/// Mean squared TD error of agent `agent`'s critic and its gradient.
pub fn critic_loss(bundles: &[AgentBundle], agent: usize, batch: &[&Transition], cfg: &AlgoConfig) -> Result<AgentUpdate> {
    let dims = team_dims(bundles, agent)?;
    let targets = td_targets(bundles, agent, batch, cfg)?;
    let input = critic_input(batch.iter().map(|t| (&t.obs, &t.actions)), &dims);
    critic_loss_from(&bundles[agent], &input, &targets)
}

/// Critic losses and gradients for every agent on one minibatch.
pub fn critic_update(bundles: &[AgentBundle], batch: &[&Transition], cfg: &AlgoConfig) -> Result<Vec<AgentUpdate>> {
    let dims = team_dims(bundles, 0)?;
    check_batch(batch, &dims, true)?;
    let next_input = next_critic_input(bundles, batch, &dims)?;
    let input = critic_input(batch.iter().map(|t| (&t.obs, &t.actions)), &dims);
    bundles
        .iter()
        .map(|b| critic_loss_from(b, &input, &targets_from(b, &next_input, batch, cfg.gamma)?))
        .collect()
}

/// Actor loss `-mean Q(o, a_1 .. y_i .. a_n) + logit_reg * mean(logits^2)`
/// where `y_i` relaxes agent `agent`'s logits with the given Gumbel noise
/// (one row per transition) and the other slots hold the recorded actions.
pub fn actor_loss(
    bundles: &[AgentBundle],
    agent: usize,
    batch: &[&Transition],
    gumbel: &Matrix,
    cfg: &AlgoConfig,
) -> Result<AgentUpdate> {
    let dims = team_dims(bundles, agent)?;
    check_batch(batch, &dims, true)?;
    if gumbel.rows() != batch.len() || gumbel.cols() != dims.act_dim {
        return Err(Error::Shape(format!(
            "gumbel noise is {}x{}, expected {}x{}",
            gumbel.rows(),
            gumbel.cols(),
            batch.len(),
            dims.act_dim
        )));
    }
    let bundle = &bundles[agent];
    let temp = cfg.gumbel_temperature;
    let obs = agent_obs(batch.iter().map(|t| &t.obs), agent, dims.obs_dim);
    let actor_trace = bundle.actor.forward_batch(&obs)?;
    let logits = actor_trace.output();
    let relaxed = map_rows(logits, dims.act_dim, |r, row| gumbel_softmax(row, gumbel.row(r), temp));

    let mut input = critic_input(batch.iter().map(|t| (&t.obs, &t.actions)), &dims);
    overwrite_action_slot(&mut input, agent, &relaxed, &dims);
    let critic_trace = bundle.critic.forward_batch(&input)?;

    let b = batch.len() as f64;
    let cells = b * dims.act_dim as f64;
    let mean_q = critic_trace.output().as_slice().iter().sum::<f64>() / b;
    let reg = logits.as_slice().iter().map(|l| l * l).sum::<f64>() / cells;
    let loss = -mean_q + cfg.logit_reg * reg;

    let d_input = bundle
        .critic
        .input_gradient(&critic_trace, &column(&vec![-1.0 / b; batch.len()]))?;
    let d_relaxed = action_slot(&d_input, agent, &dims);
    let d_logits = map_rows(logits, dims.act_dim, |r, row| {
        let mut g = gumbel_softmax_backward(relaxed.row(r), d_relaxed.row(r), temp);
        for (gk, l) in g.iter_mut().zip(row) {
            *gk += 2.0 * cfg.logit_reg * l / cells;
        }
        g
    });
    let mut grad = Grad::zeros_like(&bundle.actor);
    bundle.actor.accumulate_grad(&actor_trace, &d_logits, &mut grad)?;
    check_finite(loss, &grad)?;
    Ok(AgentUpdate { grad, loss })
}

/// Gumbel noise for one agent's relaxed actions over a minibatch.
pub fn draw_gumbel<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let data = (0..rows * cols).map(|_| sample_gumbel(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("gumbel shape")
}

/// Actor losses and gradients for every agent, each with fresh noise.
pub fn actor_update<R: Rng + ?Sized>(
    bundles: &[AgentBundle],
    batch: &[&Transition],
    cfg: &AlgoConfig,
    rng: &mut R,
) -> Result<Vec<AgentUpdate>> {
    let dims = team_dims(bundles, 0)?;
    (0..bundles.len())
        .map(|i| {
            let noise = draw_gumbel(batch.len(), dims.act_dim, rng);
            actor_loss(bundles, i, batch, &noise, cfg)
        })
        .collect()
}
