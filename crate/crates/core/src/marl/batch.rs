//! Packing joint transitions into network-ready matrices.
//!
//! Centralized networks see `[o_1 .. o_n, a_1 .. a_n]` in fixed agent order.

use crate::env::{JointAction, JointObs};
use crate::error::{Error, Result};
use crate::replay::Transition;
use crate::tensor::Matrix;

use super::TeamDims;

/// Agent `i`'s observations, one row per joint observation.
pub fn agent_obs<'a>(obs: impl ExactSizeIterator<Item = &'a JointObs>, agent: usize, obs_dim: usize) -> Matrix {
    let rows = obs.len();
    let mut m = Matrix::zeros(rows, obs_dim);
    for (r, o) in obs.enumerate() {
        m.row_mut(r).copy_from_slice(&o[agent]);
    }
    m
}

/// Concatenated joint observations, one row each.
pub fn joint_obs<'a>(obs: impl ExactSizeIterator<Item = &'a JointObs>, dims: &TeamDims) -> Matrix {
    let rows = obs.len();
    let mut m = Matrix::zeros(rows, dims.joint_obs_dim());
    for (r, o) in obs.enumerate() {
        let row = m.row_mut(r);
        for (i, block) in o.iter().enumerate() {
            row[i * dims.obs_dim..(i + 1) * dims.obs_dim].copy_from_slice(block);
        }
    }
    m
}

/// Critic input rows built from joint observations and the recorded actions.
pub fn critic_input<'a>(
    pairs: impl ExactSizeIterator<Item = (&'a JointObs, &'a JointAction)>,
    dims: &TeamDims,
) -> Matrix {
    let rows = pairs.len();
    let mut m = Matrix::zeros(rows, dims.critic_input_dim());
    let offset = dims.joint_obs_dim();
    for (r, (o, a)) in pairs.enumerate() {
        let row = m.row_mut(r);
        for (i, block) in o.iter().enumerate() {
            row[i * dims.obs_dim..(i + 1) * dims.obs_dim].copy_from_slice(block);
        }
        for i in 0..dims.n_agents {
            let start = offset + i * dims.act_dim;
            a.encode_into(i, &mut row[start..start + dims.act_dim]);
        }
    }
    m
}

/// Critic input rows where every action slot comes from `actions[i]`.
pub fn critic_input_with_actions(joint: &Matrix, actions: &[Matrix], dims: &TeamDims) -> Matrix {
    let mut m = Matrix::zeros(joint.rows(), dims.critic_input_dim());
    let offset = dims.joint_obs_dim();
    for r in 0..joint.rows() {
        let row = m.row_mut(r);
        row[..offset].copy_from_slice(joint.row(r));
        for (i, a) in actions.iter().enumerate() {
            let start = offset + i * dims.act_dim;
            row[start..start + dims.act_dim].copy_from_slice(a.row(r));
        }
    }
    m
}

/// Overwrites agent `i`'s action slot in a critic input.
pub fn overwrite_action_slot(input: &mut Matrix, agent: usize, actions: &Matrix, dims: &TeamDims) {
    let start = dims.joint_obs_dim() + agent * dims.act_dim;
    for r in 0..input.rows() {
        input.row_mut(r)[start..start + dims.act_dim].copy_from_slice(actions.row(r));
    }
}

/// Extracts agent `i`'s action slot from a critic input gradient.
pub fn action_slot(grad: &Matrix, agent: usize, dims: &TeamDims) -> Matrix {
    grad.columns(dims.joint_obs_dim() + agent * dims.act_dim, dims.act_dim)
}

pub fn rewards(batch: &[&Transition]) -> Vec<f64> {
    batch.iter().map(|t| t.reward).collect()
}

pub fn not_done(batch: &[&Transition]) -> Vec<f64> {
    batch.iter().map(|t| if t.done { 0.0 } else { 1.0 }).collect()
}

/// Column vector from a slice.
pub fn column(values: &[f64]) -> Matrix {
    Matrix::from_vec(values.len(), 1, values.to_vec()).expect("column shape")
}

/// Rejects empty batches and transitions whose blocks do not match `dims`.
pub fn check_batch(batch: &[&Transition], dims: &TeamDims, discrete: bool) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Shape("empty minibatch".into()));
    }
    for t in batch {
        let blocks_ok = |o: &JointObs| o.len() == dims.n_agents && o.iter().all(|b| b.len() == dims.obs_dim);
        if !blocks_ok(&t.obs) || !blocks_ok(&t.next_obs) {
            return Err(Error::Shape(format!(
                "transition observations do not match {} agents of width {}",
                dims.n_agents, dims.obs_dim
            )));
        }
        let actions_ok = match &t.actions {
            JointAction::Discrete(a) => discrete && a.len() == dims.n_agents && a.iter().all(|x| *x < dims.act_dim),
            JointAction::Continuous(a) => {
                !discrete && a.len() == dims.n_agents && a.iter().all(|v| v.len() == dims.act_dim)
            }
        };
        if !actions_ok {
            return Err(Error::Shape("transition actions do not match the team layout".into()));
        }
    }
    Ok(())
}

/// Row-wise application of `f` to a matrix, producing rows of width `cols`.
pub fn map_rows(m: &Matrix, cols: usize, mut f: impl FnMut(usize, &[f64]) -> Vec<f64>) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), cols);
    for r in 0..m.rows() {
        out.row_mut(r).copy_from_slice(&f(r, m.row(r)));
    }
    out
}
