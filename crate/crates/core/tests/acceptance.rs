//! Acceptance suite. Runs each criterion at its stated tolerance and prints
//! one PASS/FAIL line per criterion; exits nonzero if any fails.
//!
//! `cargo test --test acceptance -- 4 5` runs a subset by number.

use std::fmt::Write as _;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use dvm::dvm::{
    critic_asymmetry, distill_loss, run_dvm, value_match_loss, DistilledBundle, DvmConfig, DvmMode,
};
use dvm::env::{Domain, EnvState, JointAction, JointObs, ParticleEnv, Phase, PhaseSpec, Physics};
use dvm::harness::{
    dump_policy_grid, eval_rng, phase_env, run_first_phase, run_second_phase, Condition, ExperimentConfig,
    FirstPhase, GridLayout, SeedRun,
};
use dvm::marl::{maddpg, masac, AgentBundle, AlgoConfig, Algorithm, TeamDims};
use dvm::replay::{ReplayBuffer, Transition};
use dvm::tensor::{adam_step, AdamState, Grad, Matrix, Mlp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two-agent discrete spread at desk scale, shared by criteria 2, 4, 5 and
/// the policy-grid check.
const SPREAD_MADDPG: &str = "\
domain = spread2
algorithm = maddpg
seeds = 0,1,2,3,4
phase1_episodes = 150
phase2_episodes = 400
eval_interval = 10
eval_episodes = 10
hidden = 64,64
batch_size = 256
update_every = 4
actor_lr = 0.001
critic_lr = 0.003
epsilon_reset_each_phase = false
dvm_iterations = 2048
dvm_batch_size = 256
dvm_lr = 0.001
dvm_warm_start = true
";

/// Continuous two-agent spread for criterion 7.
const SPREAD_MASAC: &str = "\
domain = spread2
algorithm = masac
seeds = 0,1,2,3,4
phase1_episodes = 400
phase2_episodes = 0
eval_interval = 10
eval_episodes = 10
hidden = 64,64
batch_size = 256
update_every = 4
lr = 0.001
";

const DETERMINISM: &str = "\
domain = spread2
algorithm = maddpg
seeds = 3
phase1_episodes = 12
phase2_episodes = 8
eval_interval = 4
eval_episodes = 3
hidden = 16
batch_size = 32
update_every = 2
dvm_iterations = 32
dvm_batch_size = 32
";

struct Outcome {
    pass: bool,
    detail: String,
}

type Check = anyhow::Result<Outcome>;

fn outcome(pass: bool, detail: String) -> Check {
    Ok(Outcome { pass, detail })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

// ---------------------------------------------------------------- criterion 1

const FD_TRIALS: u64 = 50;
const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

/// Worst relative error between `analytic` and central differences of
/// `loss` over every parameter of the perturbed network.
fn fd_worst(analytic: &Grad, net: &Mlp, loss: impl Fn(&Mlp) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut probe = net.clone();
    for p in 0..net.params().len() {
        let base = net.params()[p];
        probe.params_mut()[p] = base + FD_STEP;
        let up = loss(&probe);
        probe.params_mut()[p] = base - FD_STEP;
        let down = loss(&probe);
        probe.params_mut()[p] = base;
        worst = worst.max(rel(analytic.values()[p], (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

fn random_hidden(rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..rng.random_range(1..=2)).map(|_| rng.random_range(3..=8)).collect()
}

fn random_obs(rng: &mut ChaCha8Rng, n: usize, obs_dim: usize) -> JointObs {
    (0..n)
        .map(|_| (0..obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

fn random_batch(rng: &mut ChaCha8Rng, dims: &TeamDims, discrete: bool, rows: usize) -> Vec<Transition> {
    (0..rows)
        .map(|_| Transition {
            obs: random_obs(rng, dims.n_agents, dims.obs_dim),
            actions: if discrete {
                JointAction::Discrete((0..dims.n_agents).map(|_| rng.random_range(0..5)).collect())
            } else {
                JointAction::Continuous(
                    (0..dims.n_agents)
                        .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                        .collect(),
                )
            },
            reward: rng.random_range(-2.0..0.0),
            next_obs: random_obs(rng, dims.n_agents, dims.obs_dim),
            done: rng.random_bool(0.2),
        })
        .collect()
}

struct Trial {
    cfg: AlgoConfig,
    dims: TeamDims,
    bundles: Vec<AgentBundle>,
    batch: Vec<Transition>,
    agent: usize,
}

fn trial(algorithm: Algorithm, seed: u64) -> (Trial, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=3);
    let obs_dim = rng.random_range(2..=5);
    let cfg = AlgoConfig {
        hidden: random_hidden(&mut rng),
        gamma: rng.random_range(0.5..0.99),
        alpha: rng.random_range(0.05..0.5),
        gumbel_temperature: rng.random_range(0.5..1.5),
        logit_reg: 0.05,
        ..AlgoConfig::for_algorithm(algorithm)
    };
    let dims = TeamDims::for_algorithm(algorithm, n, obs_dim);
    let mut bundles: Vec<AgentBundle> = (0..n).map(|_| AgentBundle::new(&cfg, dims, &mut rng)).collect();
    // Targets differ from the online networks so bootstrapped terms are
    // not accidentally symmetric.
    for b in &mut bundles {
        for net in [&mut b.target_actor, &mut b.target_critic, &mut b.target_value].into_iter().flatten() {
            *net = Mlp::new(net.sizes(), &mut rng);
        }
    }
    let rows = rng.random_range(4..=10);
    let batch = random_batch(&mut rng, &dims, algorithm.is_discrete(), rows);
    let agent = rng.random_range(0..n);
    (
        Trial {
            cfg,
            dims,
            bundles,
            batch,
            agent,
        },
        rng,
    )
}

fn with_net(bundles: &[AgentBundle], agent: usize, role: &str, net: &Mlp) -> Vec<AgentBundle> {
    let mut b = bundles.to_vec();
    *b[agent].network_mut(role).expect("role exists") = net.clone();
    b
}

type Loss = fn(u64) -> anyhow::Result<f64>;

fn maddpg_critic(seed: u64) -> anyhow::Result<f64> {
    let (t, _) = trial(Algorithm::MaddpgDiscrete, seed);
    let batch: Vec<&Transition> = t.batch.iter().collect();
    let u = maddpg::critic_loss(&t.bundles, t.agent, &batch, &t.cfg)?;
    Ok(fd_worst(&u.grad, &t.bundles[t.agent].critic, |net| {
        let b = with_net(&t.bundles, t.agent, "critic", net);
        maddpg::critic_loss(&b, t.agent, &batch, &t.cfg).unwrap().loss
    }))
}

fn maddpg_actor(seed: u64) -> anyhow::Result<f64> {
    let (t, mut rng) = trial(Algorithm::MaddpgDiscrete, seed);
    let batch: Vec<&Transition> = t.batch.iter().collect();
    let gumbel = maddpg::draw_gumbel(batch.len(), t.dims.act_dim, &mut rng);
    let u = maddpg::actor_loss(&t.bundles, t.agent, &batch, &gumbel, &t.cfg)?;
    Ok(fd_worst(&u.grad, &t.bundles[t.agent].actor, |net| {
        let b = with_net(&t.bundles, t.agent, "actor", net);
        maddpg::actor_loss(&b, t.agent, &batch, &gumbel, &t.cfg).unwrap().loss
    }))
}

fn masac_value(seed: u64) -> anyhow::Result<f64> {
    let (t, mut rng) = trial(Algorithm::Masac, seed);
    let batch: Vec<&Transition> = t.batch.iter().collect();
    let noise = masac::draw_noise(&t.dims, batch.len(), &mut rng);
    let u = masac::value_loss(&t.bundles, t.agent, &batch, &noise, &t.cfg)?;
    let value = t.bundles[t.agent].value.as_ref().expect("soft value network");
    Ok(fd_worst(&u.grad, value, |net| {
        let b = with_net(&t.bundles, t.agent, "value", net);
        masac::value_loss(&b, t.agent, &batch, &noise, &t.cfg).unwrap().loss
    }))
}

fn masac_q(seed: u64) -> anyhow::Result<f64> {
    let (t, _) = trial(Algorithm::Masac, seed);
    let batch: Vec<&Transition> = t.batch.iter().collect();
    let u = masac::q_loss(&t.bundles, t.agent, &batch, &t.cfg)?;
    Ok(fd_worst(&u.grad, &t.bundles[t.agent].critic, |net| {
        let b = with_net(&t.bundles, t.agent, "critic", net);
        masac::q_loss(&b, t.agent, &batch, &t.cfg).unwrap().loss
    }))
}

fn masac_actor(seed: u64) -> anyhow::Result<f64> {
    let (t, mut rng) = trial(Algorithm::Masac, seed);
    let batch: Vec<&Transition> = t.batch.iter().collect();
    let noise = masac::draw_noise(&t.dims, batch.len(), &mut rng);
    let u = masac::actor_loss(&t.bundles, t.agent, &batch, &noise, &t.cfg)?;
    Ok(fd_worst(&u.grad, &t.bundles[t.agent].actor, |net| {
        let b = with_net(&t.bundles, t.agent, "actor", net);
        masac::actor_loss(&b, t.agent, &batch, &noise, &t.cfg).unwrap().loss
    }))
}

fn distill(seed: u64, discrete: bool) -> anyhow::Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obs_dim = rng.random_range(2..=5);
    let out = if discrete { 5 } else { 4 };
    let mut sizes = vec![obs_dim];
    sizes.extend(random_hidden(&mut rng));
    sizes.push(out);
    let student = Mlp::new(&sizes, &mut rng);
    let teacher = Mlp::new(&sizes, &mut rng);
    let rows: Vec<Vec<f64>> = (0..rng.random_range(4..=10))
        .map(|_| (0..obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let obs = Matrix::from_rows(&rows)?;
    let temperature = rng.random_range(0.5..2.0);
    let (_, grad) = distill_loss(&student, &teacher, &obs, discrete, temperature)?;
    Ok(fd_worst(&grad, &student, |s| {
        distill_loss(s, &teacher, &obs, discrete, temperature).unwrap().0
    }))
}

fn matching_fixture(seed: u64, algorithm: Algorithm) -> (DistilledBundle, Trial, Vec<Vec<usize>>) {
    let (t, mut rng) = trial(algorithm, seed);
    let distilled = DistilledBundle::fresh(&t.bundles[0], 1e-3, &mut rng);
    let orderings = dvm::env::permutations(t.dims.n_agents);
    (distilled, t, orderings)
}

fn value_match_critic(seed: u64) -> anyhow::Result<f64> {
    let algorithm = if seed % 2 == 0 { Algorithm::MaddpgDiscrete } else { Algorithm::Masac };
    let (distilled, t, orderings) = matching_fixture(seed, algorithm);
    let batch: Vec<&Transition> = t.batch.iter().collect();
    let teacher = &t.bundles[t.agent];
    let l = value_match_loss(&distilled, teacher, &batch, &orderings)?;
    Ok(fd_worst(&l.critic_grad, &distilled.critic, |net| {
        let d = DistilledBundle {
            critic: net.clone(),
            ..distilled.clone()
        };
        value_match_loss(&d, teacher, &batch, &orderings).unwrap().critic
    }))
}

fn value_match_value(seed: u64) -> anyhow::Result<f64> {
    let (distilled, t, orderings) = matching_fixture(seed, Algorithm::Masac);
    let batch: Vec<&Transition> = t.batch.iter().collect();
    let teacher = &t.bundles[t.agent];
    let l = value_match_loss(&distilled, teacher, &batch, &orderings)?;
    let (_, grad) = l.value.expect("soft value terms");
    let value = distilled.value.clone().expect("soft value network");
    Ok(fd_worst(&grad, &value, |net| {
        let d = DistilledBundle {
            value: Some(net.clone()),
            ..distilled.clone()
        };
        value_match_loss(&d, teacher, &batch, &orderings).unwrap().value.unwrap().0
    }))
}

fn gradient_integrity() -> Check {
    let losses: [(&str, Loss); 9] = [
        ("maddpg critic", maddpg_critic),
        ("maddpg actor", maddpg_actor),
        ("soft value", masac_value),
        ("soft q", masac_q),
        ("soft actor", masac_actor),
        ("distill discrete", |s| distill(s, true)),
        ("distill gaussian", |s| distill(s, false)),
        ("value match q", value_match_critic),
        ("value match v", value_match_value),
    ];
    let mut pass = true;
    let mut detail = String::new();
    for (name, loss) in losses {
        let mut worst: f64 = 0.0;
        let mut failures = 0;
        for k in 0..FD_TRIALS {
            let e = loss(1000 + k)?;
            worst = worst.max(e);
            failures += usize::from(!(e < FD_TOL));
        }
        pass &= failures == 0;
        let _ = write!(detail, "{name} {worst:.1e}{}; ", if failures > 0 { format!(" ({failures} bad)") } else { String::new() });
    }
    outcome(pass, format!("worst relative error per loss over {FD_TRIALS} trials: {}", detail.trim_end_matches("; ")))
}

// ------------------------------------------------------ shared spread runs

struct SpreadRuns {
    cfg: ExperimentConfig,
    first: Vec<FirstPhase>,
    /// Per seed: none, distill, dvm.
    runs: Vec<[SeedRun; 3]>,
}

fn spread_runs() -> anyhow::Result<SpreadRuns> {
    let cfg = ExperimentConfig::parse(SPREAD_MADDPG)?;
    let mut first = Vec::new();
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let f = run_first_phase(&cfg, seed)?;
        runs.push([
            run_second_phase(&cfg, &f, Condition::None)?,
            run_second_phase(&cfg, &f, Condition::Distill)?,
            run_second_phase(&cfg, &f, Condition::Dvm)?,
        ]);
        first.push(f);
    }
    Ok(SpreadRuns { cfg, first, runs })
}

/// Evaluation returns from the post-merge point to the end of the second
/// phase.
fn second_phase_curve(run: &SeedRun) -> Vec<f64> {
    run.records.iter().filter(|r| r.phase == 2).map(|r| r.mean_return).collect()
}

fn final_fifth(curve: &[f64]) -> f64 {
    let k = (curve.len() / 5).max(1);
    mean(&curve[curve.len() - k..])
}

// ---------------------------------------------------------------- criterion 2

fn value_matching_symmetry(runs: &SpreadRuns) -> Check {
    let first = &runs.first[0];
    let team = &first.teams[0];
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let probe = team.buffer.sample_batch(1000, &mut rng)?;
    let dims = team.bundles[0].dims;
    let before: Vec<f64> = team
        .bundles
        .iter()
        .map(|b| critic_asymmetry(&b.critic, &dims, &probe))
        .collect::<Result<_, _>>()?;

    // The experiment's own merge settings, matching critics only.
    let cfg = DvmConfig {
        mode: DvmMode::ValueMatchOnly,
        ..runs.cfg.dvm.clone()
    };
    anyhow::ensure!(cfg.iterations == 2048 && cfg.warm_start, "unexpected merge settings {cfg:?}");
    let mut bundles = team.bundles.clone();
    let mut distilled = DistilledBundle::for_team(&bundles, &cfg, &mut rng)?;
    run_dvm(&mut bundles, &mut distilled, &[&team.buffer, &team.buffer], &cfg, &mut rng)?;
    let after = critic_asymmetry(&bundles[0].critic, &dims, &probe)?;
    // The merged critic starts from agent 0's, so that is the baseline.
    let ratio = after / before[0];
    outcome(
        ratio <= 0.1,
        format!(
            "max swap asymmetry {:.4} -> {after:.4} (ratio {ratio:.3}, limit 0.1; agent critics {:.4}, {:.4})",
            before[0], before[0], before[1]
        ),
    )
}

// ---------------------------------------------------------------- criterion 3

/// The landmark each expert steers toward; the region it is trained on
/// is `x < -0.2` for expert 0 and `x > 0.2` for expert 1.
const EXPERT_GOALS: [[f64; 2]; 2] = [[-0.6, 0.5], [0.6, -0.5]];

fn region_point(rng: &mut ChaCha8Rng, expert: usize) -> [f64; 2] {
    let x = rng.random_range(0.2..1.0);
    [if expert == 0 { -x } else { x }, rng.random_range(-1.0..1.0)]
}

/// Discrete move along the dominant axis toward the goal.
fn steer(p: [f64; 2], goal: [f64; 2]) -> usize {
    let d = [goal[0] - p[0], goal[1] - p[1]];
    if d[0].abs() >= d[1].abs() {
        if d[0] > 0.0 {
            1
        } else {
            2
        }
    } else if d[1] > 0.0 {
        3
    } else {
        4
    }
}

fn greedy(net: &Mlp, x: &[f64]) -> usize {
    let out = net.forward(x).expect("probe shape");
    (0..out.len()).fold(0, |m, k| if out[k] > out[m] { k } else { m })
}

/// Cross-entropy training of `actor` on its own region.
fn train_expert(actor: &mut Mlp, expert: usize, rng: &mut ChaCha8Rng) -> anyhow::Result<()> {
    let mut opt = AdamState::new(actor, 3e-3);
    for _ in 0..3000 {
        let points: Vec<[f64; 2]> = (0..64).map(|_| region_point(rng, expert)).collect();
        let input = Matrix::from_rows(&points)?;
        let trace = actor.forward_batch(&input)?;
        let mut up = Matrix::zeros(points.len(), 5);
        for (r, p) in points.iter().enumerate() {
            let logits = trace.output().row(r);
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - top).exp()).sum();
            let label = steer(*p, EXPERT_GOALS[expert]);
            for k in 0..5 {
                let prob = (logits[k] - top).exp() / z;
                let onehot = if k == label { 1.0 } else { 0.0 };
                up.set(r, k, (prob - onehot) / points.len() as f64);
            }
        }
        let mut grad = Grad::zeros_like(actor);
        actor.accumulate_grad(&trace, &up, &mut grad)?;
        adam_step(actor, &grad, &mut opt)?;
    }
    Ok(())
}

fn distillation_merges_experts() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let algo = AlgoConfig {
        hidden: vec![32],
        ..AlgoConfig::for_algorithm(Algorithm::MaddpgDiscrete)
    };
    let dims = TeamDims::for_algorithm(Algorithm::MaddpgDiscrete, 2, 2);
    let mut bundles: Vec<AgentBundle> = (0..2).map(|_| AgentBundle::new(&algo, dims, &mut rng)).collect();
    let mut expert_acc = [0.0; 2];
    for (i, b) in bundles.iter_mut().enumerate() {
        train_expert(&mut b.actor, i, &mut rng)?;
        let hits = (0..1000)
            .filter(|_| {
                let p = region_point(&mut rng, i);
                greedy(&b.actor, &p) == steer(p, EXPERT_GOALS[i])
            })
            .count();
        expert_acc[i] = hits as f64 / 1000.0;
    }

    // Each agent's buffer only holds observations from its own region.
    let mut buffers = [ReplayBuffer::new(4000), ReplayBuffer::new(4000)];
    for (i, buffer) in buffers.iter_mut().enumerate() {
        for mut t in random_batch(&mut rng, &dims, true, 4000) {
            let p = region_point(&mut rng, i);
            t.obs[i] = p.to_vec();
            buffer.push(t)?;
        }
    }
    let cfg = DvmConfig {
        mode: DvmMode::DistillOnly,
        iterations: 2048,
        batch_size: 64,
        lr: 1e-2,
        ..DvmConfig::default()
    };
    let teachers = bundles.clone();
    let mut distilled = DistilledBundle::for_team(&bundles, &cfg, &mut rng)?;
    run_dvm(&mut bundles, &mut distilled, &[&buffers[0], &buffers[1]], &cfg, &mut rng)?;

    let probes = 2000;
    let agree = (0..probes)
        .filter(|k| {
            let expert = k % 2;
            let p = region_point(&mut rng, expert);
            greedy(&distilled.actor, &p) == greedy(&teachers[expert].actor, &p)
        })
        .count();
    let frac = agree as f64 / probes as f64;
    outcome(
        frac >= 0.95,
        format!(
            "merged policy matches the region expert on {:.1}% of {probes} probes (limit 95%; experts fit their regions {:.1}%, {:.1}%)",
            100.0 * frac,
            100.0 * expert_acc[0],
            100.0 * expert_acc[1]
        ),
    )
}

// ------------------------------------------------------------ criteria 4, 5

fn ordering_at_desk_scale(runs: &SpreadRuns) -> Check {
    let finals: Vec<[f64; 3]> = runs
        .runs
        .iter()
        .map(|r| [0, 1, 2].map(|c| final_fifth(&second_phase_curve(&r[c]))))
        .collect();
    let avg = |c: usize| mean(&finals.iter().map(|f| f[c]).collect::<Vec<_>>());
    let (none, distill, dvm) = (avg(0), avg(1), avg(2));
    let wins = finals.iter().filter(|f| f[2] > f[1]).count();
    outcome(
        dvm >= distill && dvm >= none && wins >= 4,
        format!(
            "final-fifth Phase II return: none {none:.3}, distill {distill:.3}, dvm {dvm:.3}; dvm beats distill in {wins}/{} seeds (need 4)",
            finals.len()
        ),
    )
}

/// Whether the curve falls below its first value within the first tenth of
/// the later points.
fn drops_early(curve: &[f64]) -> bool {
    let m = curve.len() - 1;
    let k = ((m as f64) * 0.1).ceil() as usize;
    curve[1..=k.min(m)].iter().any(|&v| v < curve[0])
}

/// Whether any fall below the first value is followed, by the halfway
/// point, by a return to at least that value.
fn recovers_by_half(curve: &[f64]) -> bool {
    let half = (curve.len() - 1) / 2;
    match (1..=half).find(|&i| curve[i] < curve[0]) {
        None => true,
        Some(d) => curve[d + 1..=half].iter().any(|&v| v >= curve[0]),
    }
}

fn divergence_phenomenon(runs: &SpreadRuns) -> Check {
    let mut distill_drops = 0;
    let mut dvm_recovers = 0;
    let mut per_seed = Vec::new();
    for r in &runs.runs {
        let distill = second_phase_curve(&r[1]);
        let dvm = second_phase_curve(&r[2]);
        distill_drops += usize::from(drops_early(&distill));
        dvm_recovers += usize::from(recovers_by_half(&dvm));
        let half = (dvm.len() - 1) / 2;
        let best = dvm[1..=half].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        per_seed.push(format!("{:.2}/{best:.2}", dvm[0]));
    }
    let n = runs.runs.len();
    outcome(
        distill_drops >= 3 && dvm_recovers >= 4,
        format!(
            "distill drops early in {distill_drops}/{n} (need 3); dvm recovers by the halfway point in {dvm_recovers}/{n} (need 4); dvm post-merge/best-by-half {}",
            per_seed.join(" ")
        ),
    )
}

/// Share of lattice cells whose greedy move has a positive component toward
/// the nearest landmark.
fn toward_nearest_share(bundles: &[AgentBundle], env: &ParticleEnv) -> anyhow::Result<f64> {
    let cells = dump_policy_grid(bundles, env, 0, 21, GridLayout::Mirrored)?;
    let landmarks = env.landmarks(2);
    let good = cells
        .iter()
        .filter(|c| {
            let nearest = landmarks
                .iter()
                .min_by(|a, b| {
                    let da = (a[0] - c.x).hypot(a[1] - c.y);
                    let db = (b[0] - c.x).hypot(b[1] - c.y);
                    da.total_cmp(&db)
                })
                .expect("two landmarks");
            let dir: [f64; 2] = match c.action as usize {
                1 => [1.0, 0.0],
                2 => [-1.0, 0.0],
                3 => [0.0, 1.0],
                4 => [0.0, -1.0],
                _ => [0.0, 0.0],
            };
            dir[0] * (nearest[0] - c.x) + dir[1] * (nearest[1] - c.y) > 0.0
        })
        .count();
    Ok(good as f64 / cells.len() as f64)
}

fn policy_grid(runs: &SpreadRuns) -> Check {
    let env = phase_env(&runs.cfg, Phase::II)?;
    let shares = runs
        .runs
        .iter()
        .map(|r| toward_nearest_share(&r[2].second_phase_start, &env))
        .collect::<anyhow::Result<Vec<f64>>>()?;
    let passing = shares.iter().filter(|&&s| s >= 0.8).count();
    let list: Vec<String> = shares.iter().map(|s| format!("{:.0}%", 100.0 * s)).collect();
    outcome(
        passing == shares.len(),
        format!("post-merge greedy moves toward the nearest landmark: {} (limit 80% each)", list.join(" ")),
    )
}

// ---------------------------------------------------------------- criterion 6

fn contact_point(rng: &mut ChaCha8Rng, centre: [f64; 2], angle: f64, physics: &Physics) -> [f64; 2] {
    let reach = physics.contact_radius() + physics.contact_slack;
    let r = rng.random_range(0.5 * reach..reach);
    [centre[0] + r * angle.cos(), centre[1] + r * angle.sin()]
}

fn box_state(rng: &mut ChaCha8Rng, pos: Vec<[f64; 2]>, centre: [f64; 2]) -> EnvState {
    EnvState {
        vel: (0..pos.len())
            .map(|_| [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)])
            .collect(),
        pos,
        landmarks: Vec::new(),
        push_box: Some(dvm::env::BoxState {
            pos: centre,
            vel: [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)],
        }),
        target: Some([0.8, 0.0]),
        step: 0,
    }
}

fn random_action(rng: &mut ChaCha8Rng, continuous: bool) -> JointAction {
    if continuous {
        JointAction::Continuous(
            (0..2)
                .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect(),
        )
    } else {
        JointAction::Discrete((0..2).map(|_| rng.random_range(0..5)).collect())
    }
}

fn push_box_gate() -> Check {
    let physics = Physics::default();
    let env = ParticleEnv::new(PhaseSpec::new(Domain::PushBox, Phase::I, &physics)?, physics.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let pi = std::f64::consts::PI;

    let mut single_moved = 0;
    let mut single = 0;
    while single < 10_000 {
        let centre = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
        let pusher = rng.random_range(0..2);
        let angle = rng.random_range(-pi..pi);
        let mut pos = vec![[0.0; 2]; 2];
        pos[pusher] = contact_point(&mut rng, centre, angle, &physics);
        // The other agent is either touching too or anywhere in the arena.
        pos[1 - pusher] = if rng.random_bool(0.5) {
            let other = rng.random_range(-pi..pi);
            contact_point(&mut rng, centre, other, &physics)
        } else {
            [rng.random_range(-1.2..1.2), rng.random_range(-1.2..1.2)]
        };
        let state = box_state(&mut rng, pos, centre);
        let continuous = rng.random_bool(0.5);
        let actions = random_action(&mut rng, continuous);
        let pushing: Vec<usize> = (0..2).filter(|&i| env.is_pushing(&state, &actions, i)).collect();
        if pushing != [pusher] {
            continue;
        }
        single += 1;
        let next = env.step(&state, &actions)?.state;
        if next.push_box.as_ref().map(|b| b.pos) != Some(centre) {
            single_moved += 1;
        }
    }

    let mut joint_still = 0;
    for k in 0..1000 {
        let centre = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
        let continuous = k % 2 == 0;
        let heading = if continuous { rng.random_range(-pi..pi) } else { (rng.random_range(0..4) as f64) * pi / 2.0 };
        let spread = rng.random_range(0.0..0.7);
        let pos = vec![
            contact_point(&mut rng, centre, heading + pi + spread, &physics),
            contact_point(&mut rng, centre, heading + pi - spread, &physics),
        ];
        let state = box_state(&mut rng, pos, centre);
        let actions = if continuous {
            let f = vec![heading.cos(), heading.sin()];
            JointAction::Continuous(vec![f.clone(), f])
        } else {
            let a = [1, 3, 2, 4][((heading / (pi / 2.0)).round() as usize) % 4];
            JointAction::Discrete(vec![a, a])
        };
        anyhow::ensure!(
            (0..2).all(|i| env.is_pushing(&state, &actions, i)),
            "fixture {k} is not a two-pusher contact"
        );
        let next = env.step(&state, &actions)?.state;
        if next.push_box.as_ref().map(|b| b.pos) == Some(centre) {
            joint_still += 1;
        }
    }
    outcome(
        single_moved == 0 && joint_still == 0,
        format!("box moved on {single_moved}/10000 single-pusher steps and stayed put on {joint_still}/1000 two-pusher steps"),
    )
}

// ---------------------------------------------------------------- criterion 7

/// Each agent keeps the landmark a sorted nearest-pair assignment gave it at
/// reset and steers there with a saturated PD law.
fn assignment_controller_return(env: &ParticleEnv, seed: u64, episodes: usize, gains: (f64, f64)) -> anyhow::Result<f64> {
    let mut rng = eval_rng(seed, Phase::I.number());
    let mut total = 0.0;
    for _ in 0..episodes {
        let (mut s, _) = env.reset(&mut rng);
        let n = s.n_agents();
        let mut pairs: Vec<(f64, usize, usize)> = (0..n)
            .flat_map(|i| (0..n).map(move |l| (i, l)))
            .map(|(i, l)| ((s.pos[i][0] - s.landmarks[l][0]).hypot(s.pos[i][1] - s.landmarks[l][1]), i, l))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut goal = vec![usize::MAX; n];
        let mut taken = vec![false; n];
        for (_, i, l) in pairs {
            if goal[i] == usize::MAX && !taken[l] {
                goal[i] = l;
                taken[l] = true;
            }
        }
        loop {
            let forces = (0..n)
                .map(|i| {
                    (0..2)
                        .map(|k| (gains.0 * (s.landmarks[goal[i]][k] - s.pos[i][k]) - gains.1 * s.vel[i][k]).clamp(-1.0, 1.0))
                        .collect()
                })
                .collect();
            let out = env.step(&s, &JointAction::Continuous(forces))?;
            total += out.reward;
            if out.done {
                break;
            }
            s = out.state;
        }
    }
    Ok(total / episodes as f64)
}

/// Best assignment-controller return over a small gain grid.
fn oracle_return(env: &ParticleEnv, seed: u64, episodes: usize) -> anyhow::Result<f64> {
    let mut best = f64::NEG_INFINITY;
    for kp in [2.0, 4.0, 8.0, 16.0, 32.0] {
        for kd in [0.0, 0.25, 0.5, 1.0, 2.0] {
            best = best.max(assignment_controller_return(env, seed, episodes, (kp, kd))?);
        }
    }
    Ok(best)
}

/// Uniform random forces from the same start states, averaged over ten
/// passes.
fn random_return(env: &ParticleEnv, seed: u64, episodes: usize) -> anyhow::Result<f64> {
    let mut act = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut total = 0.0;
    for _ in 0..10 {
        let mut rng = eval_rng(seed, Phase::I.number());
        for _ in 0..episodes {
            let (mut s, _) = env.reset(&mut rng);
            loop {
                let out = env.step(&s, &random_action(&mut act, true))?;
                total += out.reward;
                if out.done {
                    break;
                }
                s = out.state;
            }
        }
    }
    Ok(total / (10 * episodes) as f64)
}

fn masac_sanity() -> Check {
    let cfg = ExperimentConfig::parse(SPREAD_MASAC)?;
    let env = phase_env(&cfg, Phase::I)?;
    let mut passing = 0;
    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        let oracle = oracle_return(&env, seed, cfg.eval_episodes)?;
        let random = random_return(&env, seed, cfg.eval_episodes)?;
        let first = run_first_phase(&cfg, seed)?;
        let curve: Vec<f64> = first.records.iter().map(|r| r.mean_return).collect();
        let trained = final_fifth(&curve);
        let share = (trained - random) / (oracle - random);
        passing += usize::from(share >= 0.5);
        per_seed.push(format!("{:.0}%", 100.0 * share));
    }
    outcome(
        passing >= 4,
        format!(
            "share of the random-to-oracle gap closed: {} (limit 50%, need 4/{})",
            per_seed.join(" "),
            cfg.seeds.len()
        ),
    )
}

// ---------------------------------------------------------------- criterion 8

fn determinism() -> Check {
    let dir = tempfile::tempdir()?;
    std::fs::write(dir.path().join("short.txt"), DETERMINISM)?;
    for out in ["a", "b"] {
        let status = Command::new(env!("CARGO_BIN_EXE_dvm"))
            .args(["train", "--config", "short.txt", "--out", out])
            .current_dir(dir.path())
            .env_remove("DVM_SEED_OFFSET")
            .output()?;
        anyhow::ensure!(status.status.success(), "train failed: {}", String::from_utf8_lossy(&status.stderr));
    }
    let a = std::fs::read(dir.path().join("a/metrics.csv"))?;
    let b = std::fs::read(dir.path().join("b/metrics.csv"))?;
    let snapshots_equal =
        std::fs::read(dir.path().join("a/snapshot_seed3.bin"))? == std::fs::read(dir.path().join("b/snapshot_seed3.bin"))?;
    outcome(
        a == b,
        format!(
            "two runs wrote {} metrics bytes each, byte-identical {}; snapshots identical {snapshots_equal}",
            a.len(),
            a == b
        ),
    )
}

// ---------------------------------------------------------------- criterion 9

fn permutation_enumeration() -> Check {
    let physics = Physics::default();
    let env = ParticleEnv::new(PhaseSpec::new(Domain::Spread(4), Phase::II, &physics)?, physics)?;
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let mut buffer = ReplayBuffer::new(500);
    while buffer.len() < 500 {
        let (mut s, mut obs) = env.reset(&mut rng);
        loop {
            let actions = JointAction::Discrete((0..4).map(|_| rng.random_range(0..5)).collect());
            let out = env.step(&s, &actions)?;
            buffer.push(Transition {
                obs,
                actions,
                reward: out.reward,
                next_obs: out.obs.clone(),
                done: out.done,
            })?;
            if out.done || buffer.len() == 500 {
                break;
            }
            (s, obs) = (out.state, out.obs);
        }
    }
    let algo = AlgoConfig {
        hidden: vec![8],
        ..AlgoConfig::for_algorithm(Algorithm::MaddpgDiscrete)
    };
    let dims = TeamDims::for_algorithm(Algorithm::MaddpgDiscrete, 4, Domain::Spread(4).obs_dim());
    let mut bundles: Vec<AgentBundle> = (0..4).map(|_| AgentBundle::new(&algo, dims, &mut rng)).collect();
    let cfg = DvmConfig {
        mode: DvmMode::ValueMatchOnly,
        iterations: 4,
        batch_size: 16,
        ..DvmConfig::default()
    };
    let mut distilled = DistilledBundle::for_team(&bundles, &cfg, &mut rng)?;
    let buffers = vec![&buffer; 4];
    let report = run_dvm(&mut bundles, &mut distilled, &buffers, &cfg, &mut rng)?;
    outcome(
        report.orderings == 24,
        format!("spread4 value matching evaluated each sample under {} orderings (expected 24)", report.orderings),
    )
}

// ---------------------------------------------------------------------- main

struct Runner {
    only: Vec<String>,
    failed: usize,
}

impl Runner {
    fn wanted(&self, label: &str) -> bool {
        self.only.is_empty() || self.only.iter().any(|o| o == label)
    }

    fn run(&mut self, label: &str, budget: Duration, check: impl FnOnce() -> Check) {
        if !self.wanted(label) {
            return;
        }
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let (pass, detail) = match result {
            Ok(o) => (o.pass && elapsed <= budget, o.detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        let budget_note = if elapsed > budget { ", over budget" } else { "" };
        println!(
            "criterion {label} {} [{:.1}s of {}s{budget_note}] {detail}",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
        self.failed += usize::from(!pass);
    }
}

fn main() -> ExitCode {
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut runner = Runner { only, failed: 0 };
    let minutes = |m: u64| Duration::from_secs(60 * m);

    runner.run("1", minutes(1), gradient_integrity);
    runner.run("3", minutes(5), distillation_merges_experts);
    runner.run("6", minutes(1), push_box_gate);
    runner.run("8", minutes(5), determinism);
    runner.run("9", minutes(1), permutation_enumeration);

    if ["2", "4", "5", "grid"].iter().any(|l| runner.wanted(l)) {
        let start = Instant::now();
        match spread_runs() {
            Ok(runs) => {
                let shared = start.elapsed();
                println!("shared two-agent spread experiment: {:.1}s", shared.as_secs_f64());
                runner.run("2", minutes(5), || value_matching_symmetry(&runs));
                runner.run("4", minutes(120).saturating_sub(shared), || ordering_at_desk_scale(&runs));
                runner.run("5", minutes(120), || divergence_phenomenon(&runs));
                runner.run("grid", minutes(1), || policy_grid(&runs));
            }
            Err(e) => {
                for label in ["2", "4", "5", "grid"] {
                    runner.run(label, minutes(1), || Err(anyhow::anyhow!("shared experiment failed: {e:#}")));
                }
            }
        }
    }
    runner.run("7", minutes(120), masac_sanity);

    if runner.failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{} acceptance check(s) failed", runner.failed);
        ExitCode::FAILURE
    }
}
