//! Parameter snapshots.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"DVM1"
//! u32 metadata length, UTF-8 `key = value` lines
//! u32 network count
//! per network:
//!   u32 name length, UTF-8 name
//!   u32 layer-size count, u64 per size
//!   u64 parameter count, f64 per parameter
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::env::{Phase, PhaseSpec};
use crate::error::{Error, Result};
use crate::marl::{AgentBundle, TeamDims};
use crate::tensor::Mlp;

use super::config::ExperimentConfig;

pub const MAGIC: &[u8; 4] = b"DVM1";

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub metadata: String,
    pub networks: Vec<(String, Mlp)>,
}

/// What a snapshot restores into.
#[derive(Clone, Debug)]
pub struct SavedTeam {
    pub config: ExperimentConfig,
    pub phase: Phase,
    pub seed: u64,
    pub bundles: Vec<AgentBundle>,
}

impl Snapshot {
    pub fn from_team(config: &ExperimentConfig, phase: Phase, seed: u64, bundles: &[AgentBundle]) -> Self {
        let mut metadata = config.to_text();
        metadata.push_str(&format!("# snapshot\nphase = {}\nseed = {seed}\n", phase.number()));
        let networks = bundles
            .iter()
            .enumerate()
            .flat_map(|(i, b)| {
                b.networks()
                    .into_iter()
                    .map(move |(name, net)| (format!("agent{i}/{name}"), net.clone()))
            })
            .collect();
        Snapshot { metadata, networks }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend((s.len() as u32).to_le_bytes());
            out.extend(s.as_bytes());
        };
        put_str(&mut out, &self.metadata);
        out.extend((self.networks.len() as u32).to_le_bytes());
        for (name, net) in &self.networks {
            put_str(&mut out, name);
            out.extend((net.sizes().len() as u32).to_le_bytes());
            for s in net.sizes() {
                out.extend((*s as u64).to_le_bytes());
            }
            out.extend((net.params().len() as u64).to_le_bytes());
            for p in net.params() {
                out.extend(p.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Snapshot("missing DVM1 magic".into()));
        }
        let metadata = read_str(&mut r)?;
        let count = read_u32(&mut r)?;
        let mut networks = Vec::new();
        for _ in 0..count {
            let name = read_str(&mut r)?;
            let n_sizes = read_u32(&mut r)? as usize;
            if n_sizes > r.len() / 8 {
                return Err(Error::Snapshot(format!("{name}: truncated layer sizes")));
            }
            let sizes = (0..n_sizes)
                .map(|_| read_u64(&mut r).map(|s| s as usize))
                .collect::<Result<Vec<_>>>()?;
            let n_params = read_u64(&mut r)? as usize;
            if n_params > r.len() / 8 {
                return Err(Error::Snapshot(format!("{name}: truncated parameters")));
            }
            let params = (0..n_params)
                .map(|_| read_u64(&mut r).map(f64::from_bits))
                .collect::<Result<Vec<_>>>()?;
            let net = Mlp::from_parts(sizes, params).map_err(|e| Error::Snapshot(format!("{name}: {e}")))?;
            networks.push((name, net));
        }
        if !r.is_empty() {
            return Err(Error::Snapshot(format!("{} trailing bytes", r.len())));
        }
        Ok(Snapshot { metadata, networks })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn meta(&self, key: &str) -> Option<&str> {
        self.metadata
            .lines()
            .filter_map(|l| l.split_once('='))
            .filter(|(k, _)| k.trim() == key)
            .map(|(_, v)| v.trim())
            .last()
    }

    /// Rebuilds the configuration and the agents.
    pub fn restore(&self) -> Result<SavedTeam> {
        let settings: String = self
            .metadata
            .lines()
            .take_while(|l| !l.starts_with("# snapshot"))
            .map(|l| format!("{l}\n"))
            .collect();
        let config = ExperimentConfig::parse(&settings)?;
        let phase: Phase = self
            .meta("phase")
            .ok_or_else(|| Error::Snapshot("no phase recorded".into()))?
            .parse()?;
        let seed = self
            .meta("seed")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Snapshot("no seed recorded".into()))?;
        let n_agents = PhaseSpec::new(config.domain, phase, &config.physics)?.domain.n_agents();
        let dims = TeamDims::for_algorithm(config.algo.algorithm, n_agents, config.domain.obs_dim());
        // Placeholder weights; every network is overwritten below.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut bundles: Vec<AgentBundle> = (0..n_agents)
            .map(|_| AgentBundle::new(&config.algo, dims, &mut rng))
            .collect();
        let mut filled = 0;
        for (name, net) in &self.networks {
            let (agent, role) = name
                .strip_prefix("agent")
                .and_then(|s| s.split_once('/'))
                .and_then(|(i, role)| i.parse::<usize>().ok().map(|i| (i, role)))
                .ok_or_else(|| Error::Snapshot(format!("unexpected network name `{name}`")))?;
            let slot = bundles
                .get_mut(agent)
                .and_then(|b| b.network_mut(role))
                .ok_or_else(|| Error::Snapshot(format!("no slot for `{name}`")))?;
            slot.copy_from(net).map_err(|e| Error::Snapshot(format!("{name}: {e}")))?;
            filled += 1;
        }
        let expected: usize = bundles.iter().map(|b| b.networks().len()).sum();
        if filled != expected {
            return Err(Error::Snapshot(format!("{filled} networks stored, {expected} expected")));
        }
        Ok(SavedTeam {
            config,
            phase,
            seed,
            bundles,
        })
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Snapshot("unexpected end of data".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str(r: &mut &[u8]) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > r.len() {
        return Err(Error::Snapshot("string runs past the end".into()));
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Snapshot("name is not UTF-8".into()))
}
