//! Experiment configuration and its flat `key = value` file format.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dvm::{checked_permutations, DvmConfig, DvmMode};
use crate::env::{Domain, Physics};
use crate::error::{Error, Result};
use crate::marl::{AlgoConfig, Algorithm};
use crate::replay::DEFAULT_CAPACITY;

/// What happens between the two training phases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Condition {
    None,
    Distill,
    ValueMatch,
    Dvm,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::None, Condition::Distill, Condition::ValueMatch, Condition::Dvm];

    pub fn mode(self) -> DvmMode {
        match self {
            Condition::None => DvmMode::None,
            Condition::Distill => DvmMode::DistillOnly,
            Condition::ValueMatch => DvmMode::ValueMatchOnly,
            Condition::Dvm => DvmMode::Dvm,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::None => "none",
            Condition::Distill => "distill",
            Condition::ValueMatch => "value_match",
            Condition::Dvm => "dvm",
        })
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(Condition::None),
            "distill" | "distill_only" => Ok(Condition::Distill),
            "value_match" | "value_match_only" => Ok(Condition::ValueMatch),
            "dvm" => Ok(Condition::Dvm),
            other => Err(Error::Config(format!("unknown condition `{other}`"))),
        }
    }
}

/// Environment variable whose integer value is added to every seed.
pub const SEED_OFFSET_VAR: &str = "DVM_SEED_OFFSET";

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub domain: Domain,
    pub condition: Condition,
    pub seeds: Vec<u64>,
    /// Spread Phase I, or push-box Tasks I and II.
    pub phase1_episodes: usize,
    /// Spread Phase II, or push-box Task III.
    pub phase2_episodes: usize,
    /// Training episodes between evaluation points.
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub algo: AlgoConfig,
    /// `mode` is overridden by `condition` when the run starts.
    pub dvm: DvmConfig,
    pub buffer_capacity: usize,
    /// Whether the second phase trains at all; push box without learning
    /// only evaluates the merged team on Task III.
    pub phase2_learning: bool,
    /// Write measured seconds into the metrics; off keeps files byte-stable.
    pub record_wall_clock: bool,
    pub physics: Physics,
    pub out_dir: Option<PathBuf>,
}

fn default_episodes(domain: Domain) -> usize {
    match domain {
        Domain::Spread(n) => 4000 << n.saturating_sub(2),
        Domain::PushBox => 4000,
    }
}

impl ExperimentConfig {
    pub fn new(domain: Domain, algorithm: Algorithm) -> Self {
        let algo = AlgoConfig::for_algorithm(algorithm);
        let dvm = DvmConfig {
            lr: algo.critic_lr,
            ..DvmConfig::default()
        };
        ExperimentConfig {
            domain,
            condition: Condition::Dvm,
            seeds: (0..10).collect(),
            phase1_episodes: default_episodes(domain),
            phase2_episodes: default_episodes(domain),
            eval_interval: 10,
            eval_episodes: 10,
            algo,
            dvm,
            buffer_capacity: DEFAULT_CAPACITY,
            phase2_learning: true,
            record_wall_clock: false,
            physics: Physics::default(),
            out_dir: None,
        }
    }

    /// The merge configuration for this run's condition.
    pub fn dvm_config(&self) -> DvmConfig {
        DvmConfig {
            mode: self.condition.mode(),
            ..self.dvm.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Domain::Spread(n) = self.domain {
            if !(1..=4).contains(&n) {
                return Err(Error::Config(format!("spread supports 1 to 4 agents, got {n}")));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.eval_interval == 0 || self.eval_episodes == 0 {
            return Err(Error::Config("evaluation interval and episode count must be positive".into()));
        }
        if self.buffer_capacity == 0 {
            return Err(Error::Config("buffer capacity must be positive".into()));
        }
        self.algo.validate()?;
        let dvm = self.dvm_config();
        dvm.validate()?;
        if dvm.mode.value_matches() {
            let team = match self.domain {
                Domain::Spread(n) => n,
                Domain::PushBox => 2,
            };
            checked_permutations(team, dvm.permutation_cap)?;
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let bad = |what: &str| Error::Config(format!("invalid value `{value}` for `{key}`: expected {what}"));
        let float = || value.parse::<f64>().map_err(|_| bad("a number"));
        let int = || value.parse::<usize>().map_err(|_| bad("a non-negative integer"));
        let flag = || value.parse::<bool>().map_err(|_| bad("true or false"));
        match key.trim() {
            "domain" => self.domain = value.parse().map_err(|_| bad("spread1..spread4 or pushbox"))?,
            "algorithm" | "algo" => {
                let algorithm: Algorithm = value.parse()?;
                if algorithm != self.algo.algorithm {
                    let fresh = AlgoConfig::for_algorithm(algorithm);
                    self.algo = AlgoConfig {
                        hidden: self.algo.hidden.clone(),
                        batch_size: self.algo.batch_size,
                        ..fresh
                    };
                    self.dvm.lr = self.algo.critic_lr;
                }
            }
            "condition" => self.condition = value.parse()?,
            "seeds" => self.seeds = parse_list(value).map_err(|_| bad("a comma-separated list of integers"))?,
            "phase1_episodes" => self.phase1_episodes = int()?,
            "phase2_episodes" => self.phase2_episodes = int()?,
            "eval_interval" => self.eval_interval = int()?,
            "eval_episodes" => self.eval_episodes = int()?,
            "hidden" => self.algo.hidden = parse_list(value).map_err(|_| bad("a comma-separated list of widths"))?,
            "gamma" => self.algo.gamma = float()?,
            "lr" => {
                self.algo.actor_lr = float()?;
                self.algo.critic_lr = float()?;
            }
            "actor_lr" => self.algo.actor_lr = float()?,
            "critic_lr" => self.algo.critic_lr = float()?,
            "batch_size" => self.algo.batch_size = int()?,
            "alpha" => self.algo.alpha = float()?,
            "rho" => self.algo.rho = float()?,
            "gumbel_temperature" => self.algo.gumbel_temperature = float()?,
            "epsilon_start" => self.algo.epsilon.start = float()?,
            "epsilon_end" => self.algo.epsilon.end = float()?,
            "epsilon_decay_fraction" => self.algo.epsilon.decay_fraction = float()?,
            "epsilon_reset_each_phase" => self.algo.epsilon.reset_each_phase = flag()?,
            "grad_clip" => {
                self.algo.grad_clip = match value {
                    "none" | "off" => None,
                    _ => Some(float()?),
                }
            }
            "logit_reg" => self.algo.logit_reg = float()?,
            "update_every" => self.algo.update_every = int()?,
            "dvm_iterations" => self.dvm.iterations = int()?,
            "dvm_batch_size" => self.dvm.batch_size = int()?,
            "dvm_temperature" => self.dvm.temperature = float()?,
            "dvm_lr" => self.dvm.lr = float()?,
            "dvm_warm_start" => self.dvm.warm_start = flag()?,
            "dvm_order" => self.dvm.order = value.parse()?,
            "dvm_reset_optimizers" => self.dvm.reset_optimizers = flag()?,
            "permutation_cap" => self.dvm.permutation_cap = int()?,
            "buffer_capacity" => self.buffer_capacity = int()?,
            "phase2_learning" => self.phase2_learning = flag()?,
            "record_wall_clock" => self.record_wall_clock = flag()?,
            "episode_len" => self.physics.episode_len = int()?,
            "out" | "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            other => return Err(Error::Config(format!("unknown setting `{other}`"))),
        }
        Ok(())
    }

    /// Parses settings text on top of the defaults for its `domain` and
    /// `algorithm` (spread2 and maddpg when absent).
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let lookup = |key: &str| pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let domain = lookup("domain").unwrap_or("spread2").parse()?;
        let algorithm = lookup("algorithm").or(lookup("algo")).unwrap_or("maddpg").parse()?;
        let mut cfg = ExperimentConfig::new(domain, algorithm);
        // Learning-rate keys decide the merge rate unless it is given.
        for (k, v) in &pairs {
            cfg.set(k, v)?;
            if matches!(k.as_str(), "lr" | "critic_lr") && lookup("dvm_lr").is_none() {
                cfg.dvm.lr = cfg.algo.critic_lr;
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Serializes every setting, so `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let a = &self.algo;
        let d = &self.dvm;
        let mut lines = vec![
            format!("domain = {}", self.domain),
            format!("algorithm = {}", a.algorithm),
            format!("condition = {}", self.condition),
            format!(
                "seeds = {}",
                self.seeds.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
            ),
            format!("phase1_episodes = {}", self.phase1_episodes),
            format!("phase2_episodes = {}", self.phase2_episodes),
            format!("eval_interval = {}", self.eval_interval),
            format!("eval_episodes = {}", self.eval_episodes),
            format!("hidden = {}", list(&a.hidden)),
            format!("gamma = {}", a.gamma),
            format!("actor_lr = {}", a.actor_lr),
            format!("critic_lr = {}", a.critic_lr),
            format!("batch_size = {}", a.batch_size),
            format!("alpha = {}", a.alpha),
            format!("rho = {}", a.rho),
            format!("gumbel_temperature = {}", a.gumbel_temperature),
            format!("epsilon_start = {}", a.epsilon.start),
            format!("epsilon_end = {}", a.epsilon.end),
            format!("epsilon_decay_fraction = {}", a.epsilon.decay_fraction),
            format!("epsilon_reset_each_phase = {}", a.epsilon.reset_each_phase),
            format!("grad_clip = {}", a.grad_clip.map_or("none".to_string(), |c| c.to_string())),
            format!("logit_reg = {}", a.logit_reg),
            format!("update_every = {}", a.update_every),
            format!("dvm_iterations = {}", d.iterations),
            format!("dvm_batch_size = {}", d.batch_size),
            format!("dvm_temperature = {}", d.temperature),
            format!("dvm_lr = {}", d.lr),
            format!("dvm_warm_start = {}", d.warm_start),
            format!("dvm_order = {}", d.order),
            format!("dvm_reset_optimizers = {}", d.reset_optimizers),
            format!("permutation_cap = {}", d.permutation_cap),
            format!("buffer_capacity = {}", self.buffer_capacity),
            format!("phase2_learning = {}", self.phase2_learning),
            format!("record_wall_clock = {}", self.record_wall_clock),
            format!("episode_len = {}", self.physics.episode_len),
        ];
        if let Some(out) = &self.out_dir {
            lines.push(format!("out = {}", out.display()));
        }
        let mut text = lines.join("\n");
        text.push('\n');
        text
    }

    /// Adds `offset` to every seed.
    pub fn offset_seeds(&mut self, offset: u64) {
        for s in &mut self.seeds {
            *s = s.wrapping_add(offset);
        }
    }
}

fn parse_list<T: FromStr>(value: &str) -> std::result::Result<Vec<T>, T::Err> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

/// Reads the seed offset from the environment, `0` when unset.
pub fn seed_offset_from_env() -> Result<u64> {
    match std::env::var(SEED_OFFSET_VAR) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_OFFSET_VAR} must be a non-negative integer, got `{v}`"))),
        Err(std::env::VarError::NotPresent) => Ok(0),
        Err(e) => Err(Error::Config(format!("{SEED_OFFSET_VAR}: {e}"))),
    }
}
