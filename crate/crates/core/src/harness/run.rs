//! The two-phase protocol: independent training, an optional merge, then
//! continued training (or evaluation) under a new initialization regime.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dvm::{run_dvm, DistilledBundle, DvmConfig, DvmReport};
use crate::env::{Domain, ParticleEnv, Phase, PhaseSpec};
use crate::error::{Error, Result};
use crate::marl::{select_joint_action, train_round, ActionMode, AgentBundle, AlgoConfig, TeamDims};
use crate::replay::{ReplayBuffer, Transition};

use super::config::{Condition, ExperimentConfig};

/// One evaluation point.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub seed: u64,
    /// 1 and 2 for spread; 1 (Tasks I and II) and 3 (Task III) for push box.
    pub phase: u8,
    /// Training episodes completed in this phase.
    pub episode: usize,
    pub mean_return: f64,
    /// Mean over agents and update rounds since the previous point.
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub wall_clock_s: f64,
}

#[derive(Clone, Copy)]
enum Stream {
    Init = 1,
    FirstPhase = 2,
    Merge = 3,
    SecondPhase = 4,
}

fn stream(seed: u64, s: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s as u64);
    rng
}

/// Every evaluation point of a phase replays the same start states.
pub fn eval_rng(seed: u64, phase: u8) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(100 + phase as u64);
    rng
}

/// Undiscounted return of each of `episodes` exploration-free episodes.
pub fn episode_returns<R: Rng + ?Sized>(
    bundles: &[AgentBundle],
    env: &ParticleEnv,
    episodes: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if bundles.len() != env.n_agents() {
        return Err(Error::Shape(format!(
            "{} agents for a {}-agent environment",
            bundles.len(),
            env.n_agents()
        )));
    }
    (0..episodes)
        .map(|_| {
            let (mut state, mut obs) = env.reset(rng);
            let mut total = 0.0;
            loop {
                let actions = select_joint_action(bundles, &obs, ActionMode::Evaluate, rng)?;
                let out = env.step(&state, &actions)?;
                total += out.reward;
                if out.done {
                    return Ok(total);
                }
                state = out.state;
                obs = out.obs;
            }
        })
        .collect()
}

/// Mean undiscounted return over `episodes` exploration-free episodes.
pub fn evaluate_policy<R: Rng + ?Sized>(
    bundles: &[AgentBundle],
    env: &ParticleEnv,
    episodes: usize,
    rng: &mut R,
) -> Result<f64> {
    if episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let returns = episode_returns(bundles, env, episodes, rng)?;
    Ok(returns.iter().sum::<f64>() / episodes as f64)
}

/// Agents acting together in one environment, with their shared buffer.
#[derive(Clone, Debug)]
pub struct Team {
    pub bundles: Vec<AgentBundle>,
    pub env: ParticleEnv,
    pub buffer: ReplayBuffer,
}

#[derive(Clone, Copy, Debug, Default)]
struct LossMeter {
    actor: f64,
    critic: f64,
    rounds: usize,
}

impl LossMeter {
    fn take(&mut self) -> (f64, f64) {
        let out = if self.rounds == 0 {
            (0.0, 0.0)
        } else {
            (self.actor / self.rounds as f64, self.critic / self.rounds as f64)
        };
        *self = LossMeter::default();
        out
    }
}

/// Exploration progress within a phase.
#[derive(Clone, Copy, Debug)]
struct Schedule {
    step: usize,
    horizon: usize,
}

impl Team {
    fn train_episode<R: Rng + ?Sized>(
        &mut self,
        algo: &AlgoConfig,
        schedule: &mut Schedule,
        learning: bool,
        rng: &mut R,
        meter: &mut LossMeter,
    ) -> Result<()> {
        let (mut state, mut obs) = self.env.reset(rng);
        loop {
            let epsilon = algo.epsilon.value(schedule.step, schedule.horizon);
            let actions = select_joint_action(&self.bundles, &obs, ActionMode::Explore { epsilon }, rng)?;
            let out = self.env.step(&state, &actions)?;
            // Episodes end on a time limit only, so nothing is terminal.
            self.buffer.push(Transition {
                obs: std::mem::take(&mut obs),
                actions,
                reward: out.reward,
                next_obs: out.obs.clone(),
                done: false,
            })?;
            schedule.step += 1;
            if learning && self.buffer.len() >= algo.batch_size && schedule.step % algo.update_every == 0 {
                let stats = train_round(&mut self.bundles, &self.buffer, algo, rng)?;
                if !(stats.actor_loss.is_finite() && stats.critic_loss.is_finite()) {
                    return Err(Error::Numeric("training loss".into()));
                }
                meter.actor += stats.actor_loss;
                meter.critic += stats.critic_loss;
                meter.rounds += 1;
            }
            if out.done {
                return Ok(());
            }
            state = out.state;
            obs = out.obs;
        }
    }
}

/// State after the first phase, from which any condition can continue.
#[derive(Clone, Debug)]
pub struct FirstPhase {
    pub seed: u64,
    /// One team for spread; the Task I and Task II pairs for push box.
    pub teams: Vec<Team>,
    pub records: Vec<EvalRecord>,
    steps: usize,
    started: Instant,
}

/// Everything a seed produced.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub condition: Condition,
    pub records: Vec<EvalRecord>,
    /// The team as the second phase begins, after the merge.
    pub second_phase_start: Vec<AgentBundle>,
    pub final_bundles: Vec<AgentBundle>,
    pub merge_report: DvmReport,
}

pub fn phase_env(cfg: &ExperimentConfig, phase: Phase) -> Result<ParticleEnv> {
    ParticleEnv::new(PhaseSpec::new(cfg.domain, phase, &cfg.physics)?, cfg.physics.clone())
}

/// Phase whose environment the second half of the protocol uses.
pub fn second_phase(domain: Domain) -> Phase {
    match domain {
        Domain::Spread(_) => Phase::II,
        Domain::PushBox => Phase::III,
    }
}

fn team_dims(cfg: &ExperimentConfig, n_agents: usize) -> TeamDims {
    TeamDims::for_algorithm(cfg.algo.algorithm, n_agents, cfg.domain.obs_dim())
}

fn wall_clock(cfg: &ExperimentConfig, started: Instant) -> f64 {
    if cfg.record_wall_clock {
        started.elapsed().as_secs_f64()
    } else {
        0.0
    }
}

fn evaluate_teams(cfg: &ExperimentConfig, seed: u64, phase: u8, teams: &[(&[AgentBundle], &ParticleEnv)]) -> Result<f64> {
    let mut rng = eval_rng(seed, phase);
    let mut total = 0.0;
    for (bundles, env) in teams {
        total += evaluate_policy(bundles, env, cfg.eval_episodes, &mut rng)?;
    }
    Ok(total / teams.len() as f64)
}

#[allow(clippy::too_many_arguments)]
fn train_phase(
    cfg: &ExperimentConfig,
    seed: u64,
    phase: u8,
    teams: &mut [Team],
    episodes: usize,
    schedule: &mut Schedule,
    learning: bool,
    rng: &mut ChaCha8Rng,
    started: Instant,
    records: &mut Vec<EvalRecord>,
) -> Result<()> {
    let mut meter = LossMeter::default();
    let mut record = |teams: &[Team], episode: usize, meter: &mut LossMeter| -> Result<()> {
        let views: Vec<(&[AgentBundle], &ParticleEnv)> = teams.iter().map(|t| (&t.bundles[..], &t.env)).collect();
        let mean_return = evaluate_teams(cfg, seed, phase, &views)?;
        let (actor_loss, critic_loss) = meter.take();
        records.push(EvalRecord {
            seed,
            phase,
            episode,
            mean_return,
            actor_loss,
            critic_loss,
            wall_clock_s: wall_clock(cfg, started),
        });
        Ok(())
    };
    record(teams, 0, &mut meter)?;
    for episode in 1..=episodes {
        for team in teams.iter_mut() {
            team.train_episode(&cfg.algo, schedule, learning, rng, &mut meter)?;
        }
        if episode % cfg.eval_interval == 0 {
            record(teams, episode, &mut meter)?;
        }
    }
    Ok(())
}

/// Initializes the agents and runs the first phase.
pub fn run_first_phase(cfg: &ExperimentConfig, seed: u64) -> Result<FirstPhase> {
    cfg.validate()?;
    let started = Instant::now();
    let mut init = stream(seed, Stream::Init);
    let env = phase_env(cfg, Phase::I)?;
    let new_team = |env: ParticleEnv, init: &mut ChaCha8Rng| {
        let dims = team_dims(cfg, env.n_agents());
        Team {
            bundles: (0..env.n_agents()).map(|_| AgentBundle::new(&cfg.algo, dims, init)).collect(),
            env,
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
        }
    };
    let mut teams = vec![new_team(env, &mut init)];
    if cfg.domain == Domain::PushBox {
        teams.push(new_team(phase_env(cfg, Phase::II)?, &mut init));
    }
    let per_episode = cfg.physics.episode_len * teams.len();
    let mut schedule = Schedule {
        step: 0,
        horizon: cfg.phase1_episodes * per_episode,
    };
    let mut rng = stream(seed, Stream::FirstPhase);
    let mut records = Vec::new();
    train_phase(
        cfg,
        seed,
        1,
        &mut teams,
        cfg.phase1_episodes,
        &mut schedule,
        true,
        &mut rng,
        started,
        &mut records,
    )?;
    Ok(FirstPhase {
        seed,
        teams,
        records,
        steps: schedule.step,
        started,
    })
}

/// Runs the merge, or leaves the team alone when there is no experience yet.
fn merge(
    bundles: &mut [AgentBundle],
    buffers: &[&ReplayBuffer],
    dvm: &DvmConfig,
    rng: &mut ChaCha8Rng,
) -> Result<DvmReport> {
    if buffers.iter().any(|b| b.is_empty()) {
        return Ok(DvmReport::default());
    }
    let mut distilled = DistilledBundle::for_team(bundles, dvm, rng)?;
    run_dvm(bundles, &mut distilled, buffers, dvm, rng)
}

/// Applies `condition` to a finished first phase and runs the second.
pub fn run_second_phase(cfg: &ExperimentConfig, first: &FirstPhase, condition: Condition) -> Result<SeedRun> {
    let cfg = ExperimentConfig {
        condition,
        ..cfg.clone()
    };
    cfg.validate()?;
    let seed = first.seed;
    let dvm = cfg.dvm_config();
    let mut merge_rng = stream(seed, Stream::Merge);

    let ((merged, merge_report), buffer) = match cfg.domain {
        Domain::Spread(_) => {
            let team = &first.teams[0];
            let mut bundles = team.bundles.clone();
            let buffers = vec![&team.buffer; bundles.len()];
            let report = merge(&mut bundles, &buffers, &dvm, &mut merge_rng)?;
            ((bundles, report), team.buffer.clone())
        }
        Domain::PushBox => {
            let (a, b) = (&first.teams[0], &first.teams[1]);
            let mut bundles = vec![a.bundles[0].clone(), b.bundles[0].clone()];
            let report = merge(&mut bundles, &[&a.buffer, &b.buffer], &dvm, &mut merge_rng)?;
            ((bundles, report), ReplayBuffer::new(cfg.buffer_capacity))
        }
    };
    let second_phase_start = merged.clone();

    let phase = second_phase(cfg.domain);
    let mut teams = vec![Team {
        bundles: merged,
        env: phase_env(&cfg, phase)?,
        buffer,
    }];
    let episode_steps = cfg.physics.episode_len;
    let mut schedule = if cfg.algo.epsilon.reset_each_phase {
        Schedule {
            step: 0,
            horizon: cfg.phase2_episodes * episode_steps,
        }
    } else {
        Schedule {
            step: first.steps,
            horizon: cfg.phase1_episodes * episode_steps * first.teams.len(),
        }
    };
    let learning = cfg.phase2_learning || cfg.domain.is_spread();
    let mut rng = stream(seed, Stream::SecondPhase);
    let mut records = first.records.clone();
    train_phase(
        &cfg,
        seed,
        phase.number(),
        &mut teams,
        cfg.phase2_episodes,
        &mut schedule,
        learning,
        &mut rng,
        first.started,
        &mut records,
    )?;
    let final_bundles = teams.remove(0).bundles;
    Ok(SeedRun {
        seed,
        condition,
        records,
        second_phase_start,
        final_bundles,
        merge_report,
    })
}

pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    let first = run_first_phase(cfg, seed)?;
    run_second_phase(cfg, &first, cfg.condition)
}

/// Runs every configured seed in order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<SeedRun>> {
    cfg.validate()?;
    cfg.seeds.iter().map(|&s| run_seed(cfg, s)).collect()
}
