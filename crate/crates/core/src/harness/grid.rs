//! Greedy-action and action-value fields over a lattice of positions for
//! one agent, for external plotting.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::env::{Domain, EnvState, JointAction, ParticleEnv, PhaseSpec, QuadrantAssignment, QUADRANT_SIGNS};
use crate::error::{Error, Result};
use crate::marl::batch::critic_input;
use crate::marl::{select_joint_action, ActionMode, AgentBundle, TeamDims};

/// Where the other agents sit while one agent sweeps the lattice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridLayout {
    /// Others at the point reflected through the origin (two agents) or at
    /// its quarter-turn rotations (four agents), so every agent is equally
    /// close to its own nearest landmark.
    Mirrored,
    /// Others at `±0.75` inside the quadrants the phase starts them in.
    PhaseStart,
}

impl fmt::Display for GridLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GridLayout::Mirrored => "mirrored",
            GridLayout::PhaseStart => "phase_start",
        })
    }
}

impl FromStr for GridLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mirrored" => Ok(GridLayout::Mirrored),
            "phase_start" | "phase-start" => Ok(GridLayout::PhaseStart),
            _ => Err(Error::Config(format!("unknown grid layout `{s}`"))),
        }
    }
}

/// Offset of the other agents in the phase-start layout.
pub const PHASE_START_OFFSET: f64 = 0.75;

#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    pub x: f64,
    pub y: f64,
    /// Discrete action index, or the heading in radians of a continuous action.
    pub action: f64,
    /// Centralized critic value with every agent acting greedily.
    pub q_value: f64,
}

/// Cell centres of an `r`-point lattice over `[-1, 1]`.
pub fn lattice(resolution: usize) -> Vec<f64> {
    (0..resolution)
        .map(|k| -1.0 + (2 * k + 1) as f64 / resolution as f64)
        .collect()
}

fn rotate_quarter(p: [f64; 2], turns: usize) -> [f64; 2] {
    (0..turns % 4).fold(p, |[x, y], _| [-y, x])
}

fn other_positions(spec: &PhaseSpec, layout: GridLayout, agent: usize, p: [f64; 2]) -> Result<Vec<[f64; 2]>> {
    let n = spec.domain.n_agents();
    let others = (0..n).filter(|&j| j != agent);
    match layout {
        GridLayout::Mirrored => match n {
            1 => Ok(Vec::new()),
            2 => Ok(vec![[-p[0], -p[1]]]),
            4 => Ok(others.enumerate().map(|(k, _)| rotate_quarter(p, k + 1)).collect()),
            _ => Err(Error::Unsupported(format!("mirrored layout needs 1, 2 or 4 agents, got {n}"))),
        },
        GridLayout::PhaseStart => {
            let quadrants = match &spec.assignment {
                QuadrantAssignment::Fixed(q) => q.clone(),
                QuadrantAssignment::Randomized => (0..n).collect(),
            };
            Ok(others
                .map(|j| {
                    let s = QUADRANT_SIGNS[quadrants[j]];
                    [s[0] * PHASE_START_OFFSET, s[1] * PHASE_START_OFFSET]
                })
                .collect())
        }
    }
}

/// Sweeps `agent` over a `resolution × resolution` lattice, row-major in y
/// then x, with every velocity zero.
pub fn dump_policy_grid(
    bundles: &[AgentBundle],
    env: &ParticleEnv,
    agent: usize,
    resolution: usize,
    layout: GridLayout,
) -> Result<Vec<GridCell>> {
    let spec = env.spec();
    if !matches!(spec.domain, Domain::Spread(_)) {
        return Err(Error::Unsupported(format!("policy grids need a spread domain, got {}", spec.domain)));
    }
    let n = env.n_agents();
    if bundles.len() != n {
        return Err(Error::Shape(format!("{} agents for a {n}-agent environment", bundles.len())));
    }
    if agent >= n {
        return Err(Error::Parameter(format!("agent {agent} out of range for {n} agents")));
    }
    if resolution == 0 {
        return Err(Error::Parameter("grid resolution must be positive".into()));
    }
    let dims = TeamDims::for_algorithm(bundles[0].algorithm, n, spec.domain.obs_dim());
    // Evaluation mode draws nothing; the generator only satisfies the signature.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let axis = lattice(resolution);
    let mut points = Vec::with_capacity(resolution * resolution);
    let mut pairs = Vec::with_capacity(resolution * resolution);
    for &y in &axis {
        for &x in &axis {
            let p = [x, y];
            let mut pos = other_positions(spec, layout, agent, p)?;
            pos.insert(agent, p);
            let state = EnvState {
                pos,
                vel: vec![[0.0; 2]; n],
                landmarks: env.landmarks(n),
                push_box: None,
                target: None,
                step: 0,
            };
            let obs = env.observe_all(&state);
            let actions = select_joint_action(bundles, &obs, ActionMode::Evaluate, &mut rng)?;
            points.push(p);
            pairs.push((obs, actions));
        }
    }
    let input = critic_input(pairs.iter().map(|(o, a)| (o, a)), &dims);
    let q = bundles[agent].critic.forward_batch(&input)?;
    Ok(points
        .into_iter()
        .zip(&pairs)
        .enumerate()
        .map(|(r, (p, (_, actions)))| GridCell {
            x: p[0],
            y: p[1],
            action: match actions {
                JointAction::Discrete(a) => a[agent] as f64,
                JointAction::Continuous(a) => a[agent][1].atan2(a[agent][0]),
            },
            q_value: q.output().get(r, 0),
        })
        .collect())
}

/// Writes `x,y,action,q_value` rows.
pub fn write_grid(cells: &[GridCell], path: &Path) -> Result<()> {
    let io = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::io(path, std::io::Error::other(format!("{other:?}"))),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["x", "y", "action", "q_value"]).map_err(io)?;
    for c in cells {
        w.write_record([c.x.to_string(), c.y.to_string(), c.action.to_string(), c.q_value.to_string()])
            .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
