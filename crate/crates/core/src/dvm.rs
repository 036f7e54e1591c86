//! Distillation and value matching: merges a team of independently trained
//! agents into one actor and one permutation-invariant critic, then
//! overwrites every agent with the merged networks.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::env::{permutations, permute_joint, JointObs};
use crate::error::{Error, Result};
use crate::marl::batch::{agent_obs, column, critic_input, joint_obs};
use crate::marl::{AgentBundle, Algorithm, TeamDims};
use crate::replay::{ReplayBuffer, Transition};
use crate::tensor::{
    adam_step, gaussian_kl, kl_categorical, softmax_with_temperature, AdamState, Grad, Matrix, Mlp, SquashedGaussian,
};

/// Which parts of the merge run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DvmMode {
    None,
    DistillOnly,
    ValueMatchOnly,
    Dvm,
}

impl DvmMode {
    pub fn distills(self) -> bool {
        matches!(self, DvmMode::DistillOnly | DvmMode::Dvm)
    }

    pub fn value_matches(self) -> bool {
        matches!(self, DvmMode::ValueMatchOnly | DvmMode::Dvm)
    }
}

impl fmt::Display for DvmMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DvmMode::None => "none",
            DvmMode::DistillOnly => "distill_only",
            DvmMode::ValueMatchOnly => "value_match_only",
            DvmMode::Dvm => "dvm",
        })
    }
}

impl FromStr for DvmMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(DvmMode::None),
            "distill_only" => Ok(DvmMode::DistillOnly),
            "value_match_only" => Ok(DvmMode::ValueMatchOnly),
            "dvm" => Ok(DvmMode::Dvm),
            other => Err(Error::Config(format!("unknown DVM mode `{other}`"))),
        }
    }
}

/// Scheduling of the two merge losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DvmOrder {
    /// Each iteration distills and value-matches every agent in turn.
    Interleaved,
    /// All distillation iterations, then all value-matching iterations.
    DistillFirst,
}

impl FromStr for DvmOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "interleaved" => Ok(DvmOrder::Interleaved),
            "distill_first" => Ok(DvmOrder::DistillFirst),
            other => Err(Error::Config(format!("unknown DVM order `{other}`"))),
        }
    }
}

impl fmt::Display for DvmOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DvmOrder::Interleaved => "interleaved",
            DvmOrder::DistillFirst => "distill_first",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DvmConfig {
    pub mode: DvmMode,
    pub iterations: usize,
    pub batch_size: usize,
    /// Softmax temperature for discrete distillation.
    pub temperature: f64,
    pub lr: f64,
    /// Start the merged networks from agent 0 instead of fresh weights.
    pub warm_start: bool,
    pub order: DvmOrder,
    /// Largest number of agent orderings value matching may enumerate.
    pub permutation_cap: usize,
    /// Clear each agent's optimizer moments for the networks the merge
    /// replaces. When off, agents keep the moments of their own training.
    pub reset_optimizers: bool,
}

impl Default for DvmConfig {
    fn default() -> Self {
        DvmConfig {
            mode: DvmMode::Dvm,
            iterations: 2048,
            batch_size: 1024,
            temperature: 1.0,
            lr: 0.01,
            warm_start: false,
            order: DvmOrder::Interleaved,
            permutation_cap: 24,
            reset_optimizers: true,
        }
    }
}

impl DvmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode != DvmMode::None && (self.iterations == 0 || self.batch_size == 0) {
            return Err(Error::Config("DVM needs positive iterations and batch size".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("DVM learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// The merged actor, critic and (for MA-SAC) value networks.
#[derive(Clone, Debug, PartialEq)]
pub struct DistilledBundle {
    pub algorithm: Algorithm,
    pub dims: TeamDims,
    pub actor: Mlp,
    pub critic: Mlp,
    pub value: Option<Mlp>,
    pub target_value: Option<Mlp>,
    pub actor_opt: AdamState,
    pub critic_opt: AdamState,
    pub value_opt: Option<AdamState>,
}

impl DistilledBundle {
    /// Fresh networks shaped like `template`'s.
    pub fn fresh<R: Rng + ?Sized>(template: &AgentBundle, lr: f64, rng: &mut R) -> Self {
        let actor = Mlp::new(template.actor.sizes(), rng);
        let critic = Mlp::new(template.critic.sizes(), rng);
        let value = template.value.as_ref().map(|v| Mlp::new(v.sizes(), rng));
        Self::assemble(template, actor, critic, value, lr)
    }

    /// Copies of `template`'s networks.
    pub fn warm(template: &AgentBundle, lr: f64) -> Self {
        Self::assemble(
            template,
            template.actor.clone(),
            template.critic.clone(),
            template.value.clone(),
            lr,
        )
    }

    fn assemble(template: &AgentBundle, actor: Mlp, critic: Mlp, value: Option<Mlp>, lr: f64) -> Self {
        DistilledBundle {
            algorithm: template.algorithm,
            dims: template.dims,
            actor_opt: AdamState::new(&actor, lr),
            critic_opt: AdamState::new(&critic, lr),
            value_opt: value.as_ref().map(|v| AdamState::new(v, lr)),
            target_value: value.clone(),
            actor,
            critic,
            value,
        }
    }

    pub fn for_team<R: Rng + ?Sized>(bundles: &[AgentBundle], cfg: &DvmConfig, rng: &mut R) -> Result<Self> {
        let first = bundles
            .first()
            .ok_or_else(|| Error::Homogeneity("empty team".into()))?;
        Ok(if cfg.warm_start {
            Self::warm(first, cfg.lr)
        } else {
            Self::fresh(first, cfg.lr, rng)
        })
    }
}

/// Overwrites `target` with `source`, bit for bit.
pub fn hard_update(target: &mut Mlp, source: &Mlp) -> Result<()> {
    target.copy_from(source)
}

/// Mean `KL(teacher || student)` of two actors on a batch of one agent's
/// observations, and its gradient with respect to the student.
///
/// Discrete actors compare temperature softmaxes of their logits;
/// Gaussian actors compare pre-squash Gaussians per dimension, averaged
/// over dimensions as well.
pub fn distill_loss(student: &Mlp, teacher: &Mlp, obs: &Matrix, discrete: bool, temperature: f64) -> Result<(f64, Grad)> {
    if !student.same_shape(teacher) {
        return Err(Error::Homogeneity("student and teacher actors differ in shape".into()));
    }
    let rows = obs.rows();
    if rows == 0 {
        return Err(Error::Shape("empty observation batch".into()));
    }
    let t_out = teacher.forward_batch(obs)?;
    let s_trace = student.forward_batch(obs)?;
    let width = student.output_dim();
    let mut upstream = Matrix::zeros(rows, width);
    let mut loss = 0.0;
    if discrete {
        let scale = 1.0 / (rows as f64 * temperature);
        for r in 0..rows {
            let p = softmax_with_temperature(t_out.output().row(r), temperature)?;
            let q = softmax_with_temperature(s_trace.output().row(r), temperature)?;
            loss += kl_categorical(&p, &q)?;
            for (k, g) in upstream.row_mut(r).iter_mut().enumerate() {
                *g = (q.probs()[k] - p.probs()[k]) * scale;
            }
        }
        loss /= rows as f64;
    } else {
        let dim = width / 2;
        let scale = 1.0 / (rows * dim) as f64;
        for r in 0..rows {
            let t = SquashedGaussian::from_head(t_out.output().row(r))?;
            let s = SquashedGaussian::from_head(s_trace.output().row(r))?;
            let g = upstream.row_mut(r);
            for d in 0..dim {
                let (kl, d_mean, d_log_std) = gaussian_kl((t.mean()[d], t.log_std()[d]), (s.mean()[d], s.log_std()[d]));
                loss += kl * scale;
                g[d] = d_mean * scale;
                if !s.clamped()[d] {
                    g[dim + d] = d_log_std * scale;
                }
            }
        }
    }
    let mut grad = Grad::zeros_like(student);
    student.accumulate_grad(&s_trace, &upstream, &mut grad)?;
    if !loss.is_finite() || !grad.is_finite() {
        return Err(Error::Numeric("distillation loss".into()));
    }
    Ok((loss.max(0.0), grad))
}

/// One Adam step of the merged actor toward `teacher` on agent `agent`'s
/// observations. Returns the loss before the step.
pub fn distill_step(
    distilled: &mut DistilledBundle,
    teacher: &AgentBundle,
    agent: usize,
    obs_batch: &[&JointObs],
    cfg: &DvmConfig,
) -> Result<f64> {
    let obs = agent_obs(obs_batch.iter().copied(), agent, distilled.dims.obs_dim);
    let (loss, grad) = distill_loss(
        &distilled.actor,
        &teacher.actor,
        &obs,
        distilled.algorithm.is_discrete(),
        cfg.temperature,
    )?;
    adam_step(&mut distilled.actor, &grad, &mut distilled.actor_opt)?;
    Ok(loss)
}

/// Orderings enumerated by value matching, refusing teams whose count
/// exceeds `cap`.
pub fn checked_permutations(n: usize, cap: usize) -> Result<Vec<Vec<usize>>> {
    let count: usize = (1..=n).product();
    if count > cap {
        return Err(Error::Config(format!(
            "{n} agents need {count} orderings, above the cap of {cap}"
        )));
    }
    Ok(permutations(n))
}

/// Losses from one value-matching evaluation.
#[derive(Clone, Debug)]
pub struct ValueMatchLoss {
    pub critic: f64,
    pub critic_grad: Grad,
    /// Soft value network terms (MA-SAC).
    pub value: Option<(f64, Grad)>,
    /// Orderings each sample was evaluated under.
    pub orderings: usize,
}

/// `sum_X mean_batch (Q_teacher(o, a) - Q_merged(X o, X a))^2`, and the same
/// for the value networks on observations alone, with gradients for the
/// merged networks. Teacher outputs are constants.
pub fn value_match_loss(
    distilled: &DistilledBundle,
    teacher: &AgentBundle,
    batch: &[&Transition],
    orderings: &[Vec<usize>],
) -> Result<ValueMatchLoss> {
    if batch.is_empty() {
        return Err(Error::Shape("empty minibatch".into()));
    }
    let dims = distilled.dims;
    let n = batch.len() as f64;
    let input = critic_input(batch.iter().map(|t| (&t.obs, &t.actions)), &dims);
    let q_target = teacher.critic.forward_batch(&input)?;
    let v_target = match (&teacher.value, &distilled.value) {
        (Some(v), Some(_)) => Some(v.forward_batch(&joint_obs(batch.iter().map(|t| &t.obs), &dims))?),
        (None, None) => None,
        _ => return Err(Error::Homogeneity("value networks present on only one side".into())),
    };

    let mut critic = 0.0;
    let mut critic_grad = Grad::zeros_like(&distilled.critic);
    let mut value = distilled.value.as_ref().map(|v| (0.0, Grad::zeros_like(v)));
    let mut touched = 0;
    for perm in orderings {
        touched += 1;
        let permuted = batch
            .iter()
            .map(|t| permute_joint(&t.obs, &t.actions, perm))
            .collect::<Result<Vec<_>>>()?;
        let p_input = critic_input(permuted.iter().map(|(o, a)| (o, a)), &dims);
        let trace = distilled.critic.forward_batch(&p_input)?;
        let mut up = vec![0.0; batch.len()];
        for (r, u) in up.iter_mut().enumerate() {
            let e = trace.output().get(r, 0) - q_target.output().get(r, 0);
            critic += e * e / n;
            *u = 2.0 * e / n;
        }
        distilled.critic.accumulate_grad(&trace, &column(&up), &mut critic_grad)?;

        if let (Some((loss, grad)), Some(net), Some(target)) = (value.as_mut(), distilled.value.as_ref(), v_target.as_ref()) {
            let p_obs = joint_obs(permuted.iter().map(|(o, _)| o), &dims);
            let trace = net.forward_batch(&p_obs)?;
            for (r, u) in up.iter_mut().enumerate() {
                let e = trace.output().get(r, 0) - target.output().get(r, 0);
                *loss += e * e / n;
                *u = 2.0 * e / n;
            }
            net.accumulate_grad(&trace, &column(&up), grad)?;
        }
    }
    if !critic.is_finite() || !critic_grad.is_finite() {
        return Err(Error::Numeric("value-matching loss".into()));
    }
    Ok(ValueMatchLoss {
        critic,
        critic_grad,
        value,
        orderings: touched,
    })
}

/// Losses of one value-matching step, measured before the update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchStep {
    pub critic_loss: f64,
    pub value_loss: Option<f64>,
    pub orderings: usize,
}

/// One Adam step of the merged critic (and value network) toward
/// `teacher`'s outputs.
pub fn value_match_step(
    distilled: &mut DistilledBundle,
    teacher: &AgentBundle,
    batch: &[&Transition],
    cfg: &DvmConfig,
) -> Result<MatchStep> {
    let orderings = checked_permutations(distilled.dims.n_agents, cfg.permutation_cap)?;
    let l = value_match_loss(distilled, teacher, batch, &orderings)?;
    adam_step(&mut distilled.critic, &l.critic_grad, &mut distilled.critic_opt)?;
    let value_loss = match (l.value, distilled.value.as_mut(), distilled.value_opt.as_mut()) {
        (Some((loss, grad)), Some(net), Some(opt)) => {
            adam_step(net, &grad, opt)?;
            Some(loss)
        }
        _ => None,
    };
    Ok(MatchStep {
        critic_loss: l.critic,
        value_loss,
        orderings: l.orderings,
    })
}

/// Per-iteration losses averaged over agents.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DvmReport {
    pub distill_losses: Vec<f64>,
    pub critic_losses: Vec<f64>,
    pub value_losses: Vec<f64>,
    /// Orderings each sample was evaluated under, as counted by value
    /// matching; 0 when it did not run.
    pub orderings: usize,
}

fn check_homogeneous(bundles: &[AgentBundle], distilled: &DistilledBundle) -> Result<()> {
    for (i, b) in bundles.iter().enumerate() {
        let shapes_match = b.algorithm == distilled.algorithm
            && b.dims == distilled.dims
            && b.actor.same_shape(&distilled.actor)
            && b.critic.same_shape(&distilled.critic)
            && match (&b.value, &distilled.value) {
                (Some(a), Some(d)) => a.same_shape(d),
                (None, None) => true,
                _ => false,
            };
        if !shapes_match {
            return Err(Error::Homogeneity(format!(
                "agent {i}'s networks differ in shape from the merged networks"
            )));
        }
    }
    Ok(())
}

/// Runs the merge on `bundles`, sampling agent `i`'s teaching data from
/// `buffers[i]`, then hard-updates every agent from the merged networks.
///
/// Replaced networks get fresh optimizer moments and re-copied targets.
pub fn run_dvm<R: Rng + ?Sized>(
    bundles: &mut [AgentBundle],
    distilled: &mut DistilledBundle,
    buffers: &[&ReplayBuffer],
    cfg: &DvmConfig,
    rng: &mut R,
) -> Result<DvmReport> {
    cfg.validate()?;
    if cfg.mode == DvmMode::None {
        return Ok(DvmReport::default());
    }
    if bundles.len() != distilled.dims.n_agents || buffers.len() != bundles.len() {
        return Err(Error::Homogeneity(format!(
            "{} agents and {} buffers for a team of {}",
            bundles.len(),
            buffers.len(),
            distilled.dims.n_agents
        )));
    }
    check_homogeneous(bundles, distilled)?;
    if cfg.mode.value_matches() {
        checked_permutations(distilled.dims.n_agents, cfg.permutation_cap)?;
    }
    let mut report = DvmReport::default();
    let n = bundles.len() as f64;

    let distill_round = |distilled: &mut DistilledBundle, rng: &mut R, report: &mut DvmReport| -> Result<()> {
        let mut total = 0.0;
        for (i, teacher) in bundles.iter().enumerate() {
            let obs = buffers[i].sample_observations(cfg.batch_size, rng)?;
            total += distill_step(distilled, teacher, i, &obs, cfg)?;
        }
        report.distill_losses.push(total / n);
        Ok(())
    };
    let match_round = |distilled: &mut DistilledBundle, rng: &mut R, report: &mut DvmReport| -> Result<()> {
        let (mut critic, mut value) = (0.0, 0.0);
        for (i, teacher) in bundles.iter().enumerate() {
            let batch = buffers[i].sample_batch(cfg.batch_size, rng)?;
            let step = value_match_step(distilled, teacher, &batch, cfg)?;
            critic += step.critic_loss;
            value += step.value_loss.unwrap_or(0.0);
            if report.orderings != 0 && report.orderings != step.orderings {
                return Err(Error::State(format!(
                    "value matching touched {} orderings after {} earlier",
                    step.orderings, report.orderings
                )));
            }
            report.orderings = step.orderings;
        }
        report.critic_losses.push(critic / n);
        if distilled.value.is_some() {
            report.value_losses.push(value / n);
        }
        Ok(())
    };

    match cfg.order {
        DvmOrder::Interleaved => {
            for _ in 0..cfg.iterations {
                if cfg.mode.distills() {
                    distill_round(distilled, rng, &mut report)?;
                }
                if cfg.mode.value_matches() {
                    match_round(distilled, rng, &mut report)?;
                }
            }
        }
        DvmOrder::DistillFirst => {
            if cfg.mode.distills() {
                for _ in 0..cfg.iterations {
                    distill_round(distilled, rng, &mut report)?;
                }
            }
            if cfg.mode.value_matches() {
                for _ in 0..cfg.iterations {
                    match_round(distilled, rng, &mut report)?;
                }
            }
        }
    }

    for b in bundles.iter_mut() {
        if cfg.mode.distills() {
            hard_update(&mut b.actor, &distilled.actor)?;
            if cfg.reset_optimizers {
                b.actor_opt.reset();
            }
        }
        if cfg.mode.value_matches() {
            hard_update(&mut b.critic, &distilled.critic)?;
            if let (Some(v), Some(src)) = (b.value.as_mut(), distilled.value.as_ref()) {
                hard_update(v, src)?;
            }
            if cfg.reset_optimizers {
                b.critic_opt.reset();
                if let Some(opt) = b.value_opt.as_mut() {
                    opt.reset();
                }
            }
        }
        b.sync_targets()?;
    }
    Ok(report)
}

/// Largest `|Q(o, a) - Q(X o, X a)|` over the batch and all orderings `X`.
pub fn critic_asymmetry(critic: &Mlp, dims: &TeamDims, batch: &[&Transition]) -> Result<f64> {
    let base = critic.forward_batch(&critic_input(batch.iter().map(|t| (&t.obs, &t.actions)), dims))?;
    let mut worst: f64 = 0.0;
    for perm in permutations(dims.n_agents) {
        let permuted = batch
            .iter()
            .map(|t| permute_joint(&t.obs, &t.actions, &perm))
            .collect::<Result<Vec<_>>>()?;
        let out = critic.forward_batch(&critic_input(permuted.iter().map(|(o, a)| (o, a)), dims))?;
        for r in 0..batch.len() {
            worst = worst.max((out.output().get(r, 0) - base.output().get(r, 0)).abs());
        }
    }
    Ok(worst)
}
