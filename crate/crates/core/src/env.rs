//! Two-dimensional particle simulation: the spread (cooperative navigation)
//! domain with quadrant-restricted starts, and the cooperative push-box domain
//! whose box only moves under a joint push.
//!
//! Observations are agent-relative and list the other agents sorted by the
//! heading of their relative offset, so swapping two agents' kinematic states
//! swaps their observations and nothing else.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

pub type ObsVector = Vec<f64>;
pub type JointObs = Vec<ObsVector>;

/// Number of discrete actions: no-op, +x, -x, +y, -y.
pub const DISCRETE_ACTIONS: usize = 5;
/// Dimension of a continuous force action.
pub const FORCE_DIM: usize = 2;

/// Largest team the spread domain supports (one agent per quadrant).
pub const MAX_SPREAD_AGENTS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    /// `n` agents and `n` landmarks, one per quadrant.
    Spread(usize),
    PushBox,
}

impl Domain {
    pub fn n_agents(self) -> usize {
        match self {
            Domain::Spread(n) => n,
            Domain::PushBox => 2,
        }
    }

    pub fn is_spread(self) -> bool {
        matches!(self, Domain::Spread(_))
    }

    /// Observation width per agent.
    pub fn obs_dim(self) -> usize {
        match self {
            // velocity, position, n landmark offsets, n - 1 sorted neighbours
            Domain::Spread(n) => 4 + 2 * n + 2 * (n - 1),
            // velocity, position, box offset, target offset, the other agent
            Domain::PushBox => 10,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::Spread(n) => write!(f, "spread{n}"),
            Domain::PushBox => write!(f, "pushbox"),
        }
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "pushbox" => Ok(Domain::PushBox),
            other => other
                .strip_prefix("spread")
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|n| (1..=MAX_SPREAD_AGENTS).contains(n))
                .map(Domain::Spread)
                .ok_or_else(|| Error::Config(format!("unknown domain `{s}`"))),
        }
    }
}

/// Training phase (spread) or task (push box).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    I,
    II,
    III,
}

impl Phase {
    pub fn number(self) -> u8 {
        match self {
            Phase::I => 1,
            Phase::II => 2,
            Phase::III => 3,
        }
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "1" | "I" | "i" => Ok(Phase::I),
            "2" | "II" | "ii" => Ok(Phase::II),
            "3" | "III" | "iii" => Ok(Phase::III),
            _ => Err(Error::Config(format!("unknown phase `{s}`"))),
        }
    }
}

/// Which quadrant each agent starts in.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum QuadrantAssignment {
    /// `quadrants[i]` is agent `i`'s start quadrant.
    Fixed(Vec<usize>),
    /// A fresh uniformly random permutation at every reset.
    Randomized,
}

/// Quadrants in the order landmarks are allotted:
/// lower-left, upper-right, upper-left, lower-right.
pub const QUADRANT_SIGNS: [[f64; 2]; 4] = [[-1.0, -1.0], [1.0, 1.0], [-1.0, 1.0], [1.0, -1.0]];

/// Domain plus the phase-dependent initialization regime.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseSpec {
    pub domain: Domain,
    pub phase: Phase,
    pub assignment: QuadrantAssignment,
    /// Push box: candidate targets, one drawn uniformly per reset.
    pub targets: Vec<[f64; 2]>,
}

impl PhaseSpec {
    /// Default layout for a domain and phase.
    ///
    /// Spread Phase I puts agent `i` in quadrant `i`. Phase II swaps the two
    /// agents of spread2, cyclically shifts spread3, and randomizes spread4.
    /// Push-box Task I targets the left, Task II the right, and Task III
    /// draws from left, right and a third point above the box.
    pub fn new(domain: Domain, phase: Phase, physics: &Physics) -> Result<Self> {
        let d = physics.target_distance;
        match domain {
            Domain::Spread(n) => {
                let assignment = match phase {
                    Phase::I => QuadrantAssignment::Fixed((0..n).collect()),
                    Phase::II if n == 4 => QuadrantAssignment::Randomized,
                    Phase::II => QuadrantAssignment::Fixed((0..n).map(|i| (i + 1) % n).collect()),
                    Phase::III => {
                        return Err(Error::Parameter("spread domains have phases I and II only".into()))
                    }
                };
                Ok(PhaseSpec {
                    domain,
                    phase,
                    assignment,
                    targets: Vec::new(),
                })
            }
            Domain::PushBox => {
                let targets = match phase {
                    Phase::I => vec![[-d, 0.0]],
                    Phase::II => vec![[d, 0.0]],
                    Phase::III => vec![[-d, 0.0], [d, 0.0], [0.0, d]],
                };
                Ok(PhaseSpec {
                    domain,
                    phase,
                    assignment: QuadrantAssignment::Fixed(Vec::new()),
                    targets,
                })
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.domain {
            Domain::Spread(n) => {
                if !(1..=MAX_SPREAD_AGENTS).contains(&n) {
                    return Err(Error::Parameter(format!("spread supports 1..=4 agents, got {n}")));
                }
                if let QuadrantAssignment::Fixed(q) = &self.assignment {
                    check_permutation(q, n)?;
                }
                Ok(())
            }
            Domain::PushBox if self.targets.is_empty() => {
                Err(Error::Parameter("push box needs at least one target".into()))
            }
            Domain::PushBox => Ok(()),
        }
    }
}

/// Physical constants shared by both domains.
#[derive(Clone, Debug, PartialEq)]
pub struct Physics {
    pub dt: f64,
    pub damping: f64,
    pub accel: f64,
    /// Acceleration gain of the box under the summed push force.
    pub box_accel: f64,
    /// Positions are clamped to `[-bound, bound]^2`.
    pub bound: f64,
    pub agent_radius: f64,
    pub box_radius: f64,
    /// Extra gap tolerated when deciding whether an agent touches the box.
    pub contact_slack: f64,
    /// Landmarks sit at `(±anchor, ±anchor)`.
    pub anchor: f64,
    /// Push-box target distance from the box's start.
    pub target_distance: f64,
    /// Push-box agents start in this annulus around the box.
    pub spawn_annulus: (f64, f64),
    pub episode_len: usize,
}

impl Default for Physics {
    fn default() -> Self {
        Physics {
            dt: 0.1,
            damping: 0.25,
            accel: 5.0,
            box_accel: 2.5,
            bound: 1.2,
            agent_radius: 0.05,
            box_radius: 0.15,
            contact_slack: 0.02,
            anchor: 0.5,
            target_distance: 0.8,
            spawn_annulus: (0.3, 0.6),
            episode_len: 25,
        }
    }
}

impl Physics {
    pub fn contact_radius(&self) -> f64 {
        self.agent_radius + self.box_radius
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoxState {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
}

/// Full simulator state.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub pos: Vec<[f64; 2]>,
    pub vel: Vec<[f64; 2]>,
    /// Spread landmarks in fixed order.
    pub landmarks: Vec<[f64; 2]>,
    pub push_box: Option<BoxState>,
    pub target: Option<[f64; 2]>,
    pub step: usize,
}

impl EnvState {
    pub fn n_agents(&self) -> usize {
        self.pos.len()
    }
}

/// One action per agent.
#[derive(Clone, Debug, PartialEq)]
pub enum JointAction {
    /// Indices into `{no-op, +x, -x, +y, -y}`.
    Discrete(Vec<usize>),
    /// Force vectors in `[-1, 1]^2`.
    Continuous(Vec<Vec<f64>>),
}

impl JointAction {
    pub fn n_agents(&self) -> usize {
        match self {
            JointAction::Discrete(a) => a.len(),
            JointAction::Continuous(a) => a.len(),
        }
    }

    /// Width of one agent's encoded action block.
    pub fn block_dim(&self) -> usize {
        match self {
            JointAction::Discrete(_) => DISCRETE_ACTIONS,
            JointAction::Continuous(a) => a.first().map_or(FORCE_DIM, Vec::len),
        }
    }

    /// Critic-facing encoding of agent `i`'s action: one-hot or the raw vector.
    pub fn encode_into(&self, agent: usize, out: &mut [f64]) {
        match self {
            JointAction::Discrete(a) => {
                out.iter_mut().for_each(|v| *v = 0.0);
                out[a[agent]] = 1.0;
            }
            JointAction::Continuous(a) => out.copy_from_slice(&a[agent]),
        }
    }

    pub fn encode(&self, agent: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.block_dim()];
        self.encode_into(agent, &mut out);
        out
    }

    /// The force agent `i` applies, before the acceleration gain.
    pub fn force(&self, agent: usize) -> [f64; 2] {
        match self {
            JointAction::Discrete(a) => match a[agent] {
                1 => [1.0, 0.0],
                2 => [-1.0, 0.0],
                3 => [0.0, 1.0],
                4 => [0.0, -1.0],
                _ => [0.0, 0.0],
            },
            JointAction::Continuous(a) => [a[agent][0].clamp(-1.0, 1.0), a[agent][1].clamp(-1.0, 1.0)],
        }
    }

    pub fn validate(&self, n_agents: usize) -> Result<()> {
        if self.n_agents() != n_agents {
            return Err(Error::Shape(format!(
                "{} actions for {n_agents} agents",
                self.n_agents()
            )));
        }
        match self {
            JointAction::Discrete(a) => {
                if let Some(bad) = a.iter().find(|x| **x >= DISCRETE_ACTIONS) {
                    return Err(Error::Parameter(format!("discrete action {bad} out of range")));
                }
            }
            JointAction::Continuous(a) => {
                if a.iter().any(|v| v.len() != FORCE_DIM || v.iter().any(|x| !x.is_finite())) {
                    return Err(Error::Parameter("continuous actions must be finite 2-vectors".into()));
                }
            }
        }
        Ok(())
    }
}

/// Result of one environment transition.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub state: EnvState,
    pub obs: JointObs,
    pub reward: f64,
    pub done: bool,
}

/// A domain/phase pairing with its physics.
#[derive(Clone, Debug)]
pub struct ParticleEnv {
    spec: PhaseSpec,
    physics: Physics,
}

impl ParticleEnv {
    pub fn new(spec: PhaseSpec, physics: Physics) -> Result<Self> {
        spec.validate()?;
        Ok(ParticleEnv { spec, physics })
    }

    pub fn spec(&self) -> &PhaseSpec {
        &self.spec
    }

    pub fn physics(&self) -> &Physics {
        &self.physics
    }

    pub fn n_agents(&self) -> usize {
        self.spec.domain.n_agents()
    }

    /// Landmark anchors for a spread team of `n`.
    pub fn landmarks(&self, n: usize) -> Vec<[f64; 2]> {
        QUADRANT_SIGNS[..n]
            .iter()
            .map(|s| [s[0] * self.physics.anchor, s[1] * self.physics.anchor])
            .collect()
    }

    /// Start quadrants for this reset.
    pub fn draw_quadrants<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let n = self.n_agents();
        match &self.spec.assignment {
            QuadrantAssignment::Fixed(q) => q.clone(),
            QuadrantAssignment::Randomized => {
                let mut q: Vec<usize> = (0..n).collect();
                q.shuffle(rng);
                q
            }
        }
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> (EnvState, JointObs) {
        let n = self.n_agents();
        let state = match self.spec.domain {
            Domain::Spread(_) => {
                let quadrants = self.draw_quadrants(rng);
                let pos = quadrants
                    .iter()
                    .map(|q| {
                        let s = QUADRANT_SIGNS[*q];
                        // (0, 1] keeps the start strictly inside the quadrant.
                        let x = 1.0 - rng.random::<f64>();
                        let y = 1.0 - rng.random::<f64>();
                        [s[0] * x, s[1] * y]
                    })
                    .collect();
                EnvState {
                    pos,
                    vel: vec![[0.0; 2]; n],
                    landmarks: self.landmarks(n),
                    push_box: None,
                    target: None,
                    step: 0,
                }
            }
            Domain::PushBox => {
                let (r_min, r_max) = self.physics.spawn_annulus;
                let pos = (0..n)
                    .map(|_| {
                        let r = rng.random_range(r_min * r_min..r_max * r_max).sqrt();
                        let theta = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                        [r * theta.cos(), r * theta.sin()]
                    })
                    .collect();
                let target = self.spec.targets[rng.random_range(0..self.spec.targets.len())];
                EnvState {
                    pos,
                    vel: vec![[0.0; 2]; n],
                    landmarks: Vec::new(),
                    push_box: Some(BoxState {
                        pos: [0.0, 0.0],
                        vel: [0.0, 0.0],
                    }),
                    target: Some(target),
                    step: 0,
                }
            }
        };
        let obs = self.observe_all(&state);
        (state, obs)
    }

    /// Whether agent `i` currently satisfies the push condition.
    pub fn is_pushing(&self, state: &EnvState, actions: &JointAction, agent: usize) -> bool {
        let Some(b) = &state.push_box else {
            return false;
        };
        let p = state.pos[agent];
        let f = actions.force(agent);
        let to_box = [b.pos[0] - p[0], b.pos[1] - p[1]];
        let dist = (to_box[0] * to_box[0] + to_box[1] * to_box[1]).sqrt();
        let touching = dist <= self.physics.contact_radius() + self.physics.contact_slack;
        touching && (f[0] != 0.0 || f[1] != 0.0) && f[0] * to_box[0] + f[1] * to_box[1] > 0.0
    }

    pub fn step(&self, state: &EnvState, actions: &JointAction) -> Result<StepOutcome> {
        let ph = &self.physics;
        if state.step >= ph.episode_len {
            return Err(Error::Protocol(format!(
                "step called on a finished episode (step {})",
                state.step
            )));
        }
        actions.validate(state.n_agents())?;
        let mut next = state.clone();

        if let Some(b) = &mut next.push_box {
            let n = state.n_agents();
            let pushers: Vec<usize> = (0..n).filter(|i| self.is_pushing(state, actions, *i)).collect();
            if pushers.len() == n && n >= 2 {
                let mut force = [0.0; 2];
                for i in &pushers {
                    let f = actions.force(*i);
                    force[0] += f[0];
                    force[1] += f[1];
                }
                for k in 0..2 {
                    b.vel[k] = b.vel[k] * (1.0 - ph.damping) + force[k] * ph.dt * ph.box_accel;
                    b.pos[k] += b.vel[k] * ph.dt;
                }
                let limit = ph.bound - ph.box_radius;
                for k in 0..2 {
                    if b.pos[k].abs() > limit {
                        b.pos[k] = b.pos[k].clamp(-limit, limit);
                        b.vel[k] = 0.0;
                    }
                }
            } else {
                // Static friction holds the heavy box unless everyone pushes.
                b.vel = [0.0, 0.0];
            }
        }

        for i in 0..state.n_agents() {
            let f = actions.force(i);
            for k in 0..2 {
                let v = next.vel[i][k] * (1.0 - ph.damping) + f[k] * ph.dt * ph.accel;
                let mut p = next.pos[i][k] + v * ph.dt;
                let mut v = v;
                if p.abs() > ph.bound {
                    p = p.clamp(-ph.bound, ph.bound);
                    v = 0.0;
                }
                next.pos[i][k] = p;
                next.vel[i][k] = v;
            }
            if let Some(b) = &next.push_box {
                resolve_box_overlap(&mut next.pos[i], &mut next.vel[i], b.pos, ph.contact_radius());
            }
        }

        next.step += 1;
        let reward = self.reward(&next);
        let obs = self.observe_all(&next);
        let done = next.step >= ph.episode_len;
        Ok(StepOutcome {
            state: next,
            obs,
            reward,
            done,
        })
    }

    pub fn reward(&self, state: &EnvState) -> f64 {
        match self.spec.domain {
            Domain::Spread(_) => spread_reward(state),
            Domain::PushBox => pushbox_reward(state),
        }
    }

    pub fn observe_all(&self, state: &EnvState) -> JointObs {
        (0..state.n_agents()).map(|i| build_observation(state, i)).collect()
    }
}

/// Pushes an agent that ended up inside the box back onto its surface and
/// removes the inward velocity component.
fn resolve_box_overlap(pos: &mut [f64; 2], vel: &mut [f64; 2], center: [f64; 2], contact: f64) {
    let d = [pos[0] - center[0], pos[1] - center[1]];
    let dist = (d[0] * d[0] + d[1] * d[1]).sqrt();
    if dist >= contact {
        return;
    }
    let normal = if dist > 1e-12 {
        [d[0] / dist, d[1] / dist]
    } else {
        [1.0, 0.0]
    };
    pos[0] = center[0] + normal[0] * contact;
    pos[1] = center[1] + normal[1] * contact;
    let inward = vel[0] * normal[0] + vel[1] * normal[1];
    if inward < 0.0 {
        vel[0] -= inward * normal[0];
        vel[1] -= inward * normal[1];
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Negative sum over landmarks of the distance to the closest agent.
pub fn spread_reward(state: &EnvState) -> f64 {
    -state
        .landmarks
        .iter()
        .map(|l| {
            state
                .pos
                .iter()
                .map(|p| dist(*p, *l))
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
}

/// Negative squared distance between box and target.
pub fn pushbox_reward(state: &EnvState) -> f64 {
    match (&state.push_box, state.target) {
        (Some(b), Some(t)) => -((t[0] - b.pos[0]).powi(2) + (t[1] - b.pos[1]).powi(2)),
        _ => 0.0,
    }
}

/// Agent `i`'s observation: own velocity, own position, offsets to the
/// landmarks (or box and target), then the other agents' offsets ordered by
/// heading angle, ties broken by distance.
pub fn build_observation(state: &EnvState, agent: usize) -> ObsVector {
    let p = state.pos[agent];
    let v = state.vel[agent];
    let mut obs = vec![v[0], v[1], p[0], p[1]];
    for l in &state.landmarks {
        obs.extend_from_slice(&[l[0] - p[0], l[1] - p[1]]);
    }
    if let Some(b) = &state.push_box {
        obs.extend_from_slice(&[b.pos[0] - p[0], b.pos[1] - p[1]]);
    }
    if let Some(t) = state.target {
        obs.extend_from_slice(&[t[0] - p[0], t[1] - p[1]]);
    }
    let mut others: Vec<[f64; 2]> = state
        .pos
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != agent)
        .map(|(_, q)| [q[0] - p[0], q[1] - p[1]])
        .collect();
    others.sort_by(|a, b| {
        let ha = a[1].atan2(a[0]);
        let hb = b[1].atan2(b[0]);
        ha.total_cmp(&hb)
            .then_with(|| (a[0] * a[0] + a[1] * a[1]).total_cmp(&(b[0] * b[0] + b[1] * b[1])))
    });
    for o in others {
        obs.extend_from_slice(&o);
    }
    obs
}

fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(Error::Parameter(format!("permutation of length {} for {n} agents", perm.len())));
    }
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::Parameter(format!("{perm:?} is not a permutation of 0..{n}")));
        }
        seen[p] = true;
    }
    Ok(())
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut current: Vec<usize> = (0..n).collect();
    let mut out = vec![current.clone()];
    loop {
        // Next lexicographic permutation.
        let Some(i) = (1..n).rev().find(|&i| current[i - 1] < current[i]) else {
            return out;
        };
        let j = (i..n).rev().find(|&j| current[j] > current[i - 1]).unwrap();
        current.swap(i - 1, j);
        current[i..].reverse();
        out.push(current.clone());
    }
}

/// Reorders agent blocks of a joint observation and joint action with the
/// same permutation: slot `k` of the result holds agent `perm[k]`'s block.
pub fn permute_joint(obs: &[ObsVector], actions: &JointAction, perm: &[usize]) -> Result<(JointObs, JointAction)> {
    let n = obs.len();
    check_permutation(perm, n)?;
    if actions.n_agents() != n {
        return Err(Error::Shape(format!("{} action blocks for {n} observations", actions.n_agents())));
    }
    let obs = perm.iter().map(|&p| obs[p].clone()).collect();
    let actions = match actions {
        JointAction::Discrete(a) => JointAction::Discrete(perm.iter().map(|&p| a[p]).collect()),
        JointAction::Continuous(a) => JointAction::Continuous(perm.iter().map(|&p| a[p].clone()).collect()),
    };
    Ok((obs, actions))
}

/// Inverse of a permutation.
pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn env(domain: Domain, phase: Phase) -> ParticleEnv {
        let physics = Physics::default();
        ParticleEnv::new(PhaseSpec::new(domain, phase, &physics).unwrap(), physics).unwrap()
    }

    fn spread_state(pos: Vec<[f64; 2]>, landmarks: Vec<[f64; 2]>) -> EnvState {
        EnvState {
            vel: vec![[0.0; 2]; pos.len()],
            pos,
            landmarks,
            push_box: None,
            target: None,
            step: 0,
        }
    }

    #[test]
    fn domain_parsing() {
        assert_eq!("spread3".parse::<Domain>().unwrap(), Domain::Spread(3));
        assert_eq!("pushbox".parse::<Domain>().unwrap(), Domain::PushBox);
        assert!("spread5".parse::<Domain>().is_err());
        assert!("tag".parse::<Domain>().is_err());
    }

    #[test]
    fn spread2_phase_one_starts_in_assigned_quadrants() {
        let e = env(Domain::Spread(2), Phase::I);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let (s, obs) = e.reset(&mut rng);
            assert!(s.pos[0][0] < 0.0 && s.pos[0][1] < 0.0);
            assert!(s.pos[1][0] > 0.0 && s.pos[1][1] > 0.0);
            assert_eq!(s.vel, vec![[0.0; 2]; 2]);
            assert_eq!(s.step, 0);
            assert_eq!(obs[0].len(), Domain::Spread(2).obs_dim());
        }
        let e2 = env(Domain::Spread(2), Phase::II);
        let (s, _) = e2.reset(&mut rng);
        assert!(s.pos[0][0] > 0.0 && s.pos[0][1] > 0.0);
    }

    #[test]
    fn pushbox_box_starts_at_rest_in_the_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for phase in [Phase::I, Phase::II, Phase::III] {
            let e = env(Domain::PushBox, phase);
            let (s, obs) = e.reset(&mut rng);
            let b = s.push_box.unwrap();
            assert_eq!(b.pos, [0.0, 0.0]);
            assert_eq!(b.vel, [0.0, 0.0]);
            assert_eq!(obs[0].len(), Domain::PushBox.obs_dim());
        }
    }

    #[test]
    fn task_three_draws_all_three_targets() {
        let e = env(Domain::PushBox, Phase::III);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seen: HashSet<_> = (0..300)
            .map(|_| {
                let t = e.reset(&mut rng).0.target.unwrap();
                (t[0].to_bits(), t[1].to_bits())
            })
            .collect();
        assert_eq!(seen.len(), 3);
    }

    #[test]
    fn spread4_phase_two_reaches_every_start_configuration() {
        let e = env(Domain::Spread(4), Phase::II);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seen: HashSet<Vec<usize>> = (0..10_000).map(|_| e.draw_quadrants(&mut rng)).collect();
        assert_eq!(seen.len(), 24);
    }

    #[test]
    fn no_op_from_rest_stays_put() {
        let e = env(Domain::Spread(3), Phase::I);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (s, _) = e.reset(&mut rng);
        let out = e.step(&s, &JointAction::Discrete(vec![0, 0, 0])).unwrap();
        assert_eq!(out.state.pos, s.pos);
    }

    #[test]
    fn constant_push_follows_damped_geometric_series() {
        let e = env(Domain::Spread(1), Phase::I);
        let ph = e.physics().clone();
        let mut s = spread_state(vec![[-0.9, -0.5]], e.landmarks(1));
        let x0 = s.pos[0][0];
        let a = 1.0 - ph.damping;
        let c = ph.dt * ph.accel;
        for k in 1..=8u32 {
            s = e.step(&s, &JointAction::Discrete(vec![1])).unwrap().state;
            // v_m = c (1 - a^m) / (1 - a); x_k = x0 + dt * sum_{m=1..k} v_m
            let sum_v: f64 = (1..=k).map(|m| c * (1.0 - a.powi(m as i32)) / (1.0 - a)).sum();
            let expected = x0 + ph.dt * sum_v;
            assert!((s.pos[0][0] - expected).abs() < 1e-9, "step {k}");
            assert_eq!(s.pos[0][1], -0.5);
        }
    }

    #[test]
    fn episode_ends_exactly_at_the_configured_length() {
        let e = env(Domain::Spread(2), Phase::I);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut s, _) = e.reset(&mut rng);
        for t in 1..=e.physics().episode_len {
            let out = e.step(&s, &JointAction::Discrete(vec![1, 3])).unwrap();
            assert_eq!(out.done, t == e.physics().episode_len);
            s = out.state;
        }
        assert!(matches!(
            e.step(&s, &JointAction::Discrete(vec![0, 0])),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn positions_respect_world_bounds() {
        let e = env(Domain::Spread(2), Phase::I);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (mut s, _) = e.reset(&mut rng);
        for _ in 0..e.physics().episode_len {
            s = e.step(&s, &JointAction::Discrete(vec![2, 1])).unwrap().state;
            for p in &s.pos {
                assert!(p[0].abs() <= 1.2 && p[1].abs() <= 1.2);
            }
        }
    }

    #[test]
    fn bad_actions_are_rejected() {
        let e = env(Domain::Spread(2), Phase::I);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (s, _) = e.reset(&mut rng);
        assert!(e.step(&s, &JointAction::Discrete(vec![5, 0])).is_err());
        assert!(e.step(&s, &JointAction::Discrete(vec![0])).is_err());
    }

    #[test]
    fn spread_reward_examples() {
        let s = spread_state(vec![[0.5, 0.5], [-0.5, -0.5]], vec![[-0.5, -0.5], [0.5, 0.5]]);
        assert_eq!(spread_reward(&s), 0.0);
        let s = spread_state(vec![[0.0, 0.0]], vec![[3.0, 4.0]]);
        assert_eq!(spread_reward(&s), -5.0);
        let a = spread_state(vec![[0.1, 0.2], [-0.7, 0.3], [0.9, -0.4]], e3_landmarks());
        let b = spread_state(vec![[0.9, -0.4], [0.1, 0.2], [-0.7, 0.3]], e3_landmarks());
        assert_eq!(spread_reward(&a), spread_reward(&b));
    }

    fn e3_landmarks() -> Vec<[f64; 2]> {
        env(Domain::Spread(3), Phase::I).landmarks(3)
    }

    #[test]
    fn pushbox_reward_examples() {
        let mut s = spread_state(vec![[0.5, 0.0], [-0.5, 0.0]], vec![]);
        s.push_box = Some(BoxState {
            pos: [0.0, 0.0],
            vel: [0.0, 0.0],
        });
        s.target = Some([1.0, 1.0]);
        assert_eq!(pushbox_reward(&s), -2.0);
        s.target = Some([0.0, 0.0]);
        assert_eq!(pushbox_reward(&s), 0.0);
        s.target = Some([-0.8, 0.0]);
        let mut prev = pushbox_reward(&s);
        for k in 1..8 {
            s.push_box.as_mut().unwrap().pos = [-0.1 * k as f64, 0.0];
            let r = pushbox_reward(&s);
            assert!(r > prev);
            prev = r;
        }
    }

    fn contact_state() -> (ParticleEnv, EnvState) {
        let e = env(Domain::PushBox, Phase::I);
        let c = e.physics().contact_radius();
        let mut s = spread_state(vec![[c, 0.0], [0.0, c]], vec![]);
        s.push_box = Some(BoxState {
            pos: [0.0, 0.0],
            vel: [0.0, 0.0],
        });
        s.target = Some([-0.8, 0.0]);
        (e, s)
    }

    #[test]
    fn single_pusher_cannot_move_the_box() {
        let (e, s) = contact_state();
        // agent 0 pushes -x into the box, agent 1 idles
        let out = e.step(&s, &JointAction::Discrete(vec![2, 0])).unwrap();
        assert_eq!(out.state.push_box.unwrap().vel, [0.0, 0.0]);
    }

    #[test]
    fn joint_push_moves_the_box_along_the_summed_force() {
        let (e, s) = contact_state();
        let out = e.step(&s, &JointAction::Discrete(vec![2, 4])).unwrap();
        let b = out.state.push_box.unwrap();
        assert!(b.pos[0] < 0.0 && b.pos[1] < 0.0);
        assert!((b.pos[0] - b.pos[1]).abs() < 1e-15);
    }

    #[test]
    fn pulling_away_does_not_count_as_pushing() {
        let (e, s) = contact_state();
        let out = e.step(&s, &JointAction::Discrete(vec![1, 4])).unwrap();
        assert_eq!(out.state.push_box.unwrap().pos, [0.0, 0.0]);
    }

    #[test]
    fn agents_cannot_enter_the_box() {
        let (e, mut s) = contact_state();
        for _ in 0..10 {
            s = e.step(&s, &JointAction::Discrete(vec![2, 0])).unwrap().state;
            let b = s.push_box.as_ref().unwrap().pos;
            assert!(dist(s.pos[0], b) >= e.physics().contact_radius() - 1e-12);
        }
    }

    #[test]
    fn swapping_two_agents_swaps_their_observations() {
        let s = spread_state(vec![[0.3, -0.2], [-0.6, 0.8]], env(Domain::Spread(2), Phase::I).landmarks(2));
        let mut swapped = s.clone();
        swapped.pos.swap(0, 1);
        assert_eq!(build_observation(&swapped, 0), build_observation(&s, 1));
        assert_eq!(build_observation(&swapped, 1), build_observation(&s, 0));
    }

    #[test]
    fn single_agent_has_no_neighbour_block() {
        let s = spread_state(vec![[0.3, -0.2]], vec![[0.5, 0.5]]);
        assert_eq!(build_observation(&s, 0).len(), Domain::Spread(1).obs_dim());
        assert_eq!(Domain::Spread(1).obs_dim(), 6);
    }

    #[test]
    fn neighbours_are_sorted_like_a_direct_angle_sort() {
        let positions = vec![[0.0, 0.0], [1.0, 1.0], [-1.0, 0.5], [0.2, -0.9]];
        let s = spread_state(positions.clone(), e4_landmarks());
        for agent in 0..4 {
            let obs = build_observation(&s, agent);
            let block = &obs[4 + 8..];
            // oracle: sort other indices by atan2 of the offset
            let p = positions[agent];
            let mut idx: Vec<usize> = (0..4).filter(|j| *j != agent).collect();
            idx.sort_by(|&a, &b| {
                let ha = (positions[a][1] - p[1]).atan2(positions[a][0] - p[0]);
                let hb = (positions[b][1] - p[1]).atan2(positions[b][0] - p[0]);
                ha.partial_cmp(&hb).unwrap()
            });
            for (k, j) in idx.iter().enumerate() {
                assert_eq!(block[2 * k], positions[*j][0] - p[0]);
                assert_eq!(block[2 * k + 1], positions[*j][1] - p[1]);
            }
        }
    }

    fn e4_landmarks() -> Vec<[f64; 2]> {
        env(Domain::Spread(4), Phase::I).landmarks(4)
    }

    #[test]
    fn permutation_enumeration() {
        assert_eq!(permutations(1), vec![vec![0]]);
        let p4 = permutations(4);
        assert_eq!(p4.len(), 24);
        assert_eq!(p4.iter().collect::<HashSet<_>>().len(), 24);
        assert_eq!(p4[0], vec![0, 1, 2, 3]);
    }

    #[test]
    fn permute_joint_identity_and_inverse() {
        let obs = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        let act = JointAction::Discrete(vec![4, 0, 2]);
        let (o, a) = permute_joint(&obs, &act, &[0, 1, 2]).unwrap();
        assert_eq!((o, a), (obs.clone(), act.clone()));
        for perm in permutations(3) {
            let (o, a) = permute_joint(&obs, &act, &perm).unwrap();
            // pairing survives: the block in slot k came from agent perm[k]
            for k in 0..3 {
                assert_eq!(o[k], obs[perm[k]]);
                assert_eq!(a.encode(k), act.encode(perm[k]));
            }
            let (back_o, back_a) = permute_joint(&o, &a, &invert_permutation(&perm)).unwrap();
            assert_eq!((back_o, back_a), (obs.clone(), act.clone()));
        }
        assert!(matches!(permute_joint(&obs, &act, &[0, 0, 1]), Err(Error::Parameter(_))));
    }

    proptest! {
        #[test]
        fn swap_symmetry_holds_for_any_spread_state(
            coords in prop::collection::vec(-1.2f64..1.2, 8),
            vels in prop::collection::vec(-1.0f64..1.0, 8),
            i in 0usize..4,
            j in 0usize..4,
        ) {
            prop_assume!(i != j);
            let mut s = spread_state(
                (0..4).map(|k| [coords[2 * k], coords[2 * k + 1]]).collect(),
                e4_landmarks(),
            );
            s.vel = (0..4).map(|k| [vels[2 * k], vels[2 * k + 1]]).collect();
            let mut swapped = s.clone();
            swapped.pos.swap(i, j);
            swapped.vel.swap(i, j);
            let mut perm: Vec<usize> = (0..4).collect();
            perm.swap(i, j);
            let before = JointAction::Discrete(vec![0; 4]);
            let (expected, _) = permute_joint(&(0..4).map(|k| build_observation(&s, k)).collect::<Vec<_>>(), &before, &perm).unwrap();
            let got: JointObs = (0..4).map(|k| build_observation(&swapped, k)).collect();
            prop_assert_eq!(got, expected);
        }

        #[test]
        fn trajectories_are_deterministic(seed in 0u64..1000, acts in prop::collection::vec(0usize..5, 50)) {
            let e = env(Domain::Spread(2), Phase::I);
            let run = || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (mut s, _) = e.reset(&mut rng);
                let mut trace = Vec::new();
                for t in 0..e.physics().episode_len {
                    let out = e.step(&s, &JointAction::Discrete(vec![acts[2 * t], acts[2 * t + 1]])).unwrap();
                    trace.push((out.reward.to_bits(), out.obs.clone()));
                    s = out.state;
                }
                trace
            };
            let a = run();
            let b = run();
            prop_assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(x.0, y.0);
                prop_assert_eq!(&x.1, &y.1);
            }
        }

        #[test]
        fn box_never_moves_with_at_most_one_pusher(seed in 0u64..500) {
            let e = env(Domain::PushBox, Phase::III);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mut s, _) = e.reset(&mut rng);
            for _ in 0..e.physics().episode_len {
                let mut acts = JointAction::Discrete(vec![rng.random_range(0..5), rng.random_range(0..5)]);
                if e.is_pushing(&s, &acts, 0) && e.is_pushing(&s, &acts, 1) {
                    acts = JointAction::Discrete(vec![0, match &acts { JointAction::Discrete(a) => a[1], _ => 0 }]);
                }
                s = e.step(&s, &acts).unwrap().state;
                prop_assert_eq!(s.push_box.as_ref().unwrap().pos, [0.0, 0.0]);
            }
        }
    }
}
