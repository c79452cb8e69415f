//! Environment presets and expert trajectory collection.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelRealization, EnvConfig, EnvConfigFile, Environment};
use crate::diffusion::channel_to_vector;
use crate::error::{D2tError, Result};
use crate::expert::{optimize_phases, ExpertConfig};
use crate::trajectory::{Trajectory, TrajectoryBuffer};

/// Mixes a stream tag into a base seed (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Channel statistics that distinguish one deployment from another.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvPreset {
    pub name: String,
    pub d1: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    pub xi2: f64,
    /// Drives the LOS angles and the environment's random stream.
    pub seed: u64,
}

impl EnvPreset {
    fn new(name: &str, d1: f64, kappa1: f64, kappa2: f64, xi2: f64, seed: u64) -> Self {
        EnvPreset {
            name: name.into(),
            d1,
            kappa1,
            kappa2,
            xi2,
            seed,
        }
    }

    /// Overlays the preset on shared geometry (N, M, T, powers, pilots).
    pub fn apply(&self, base: &EnvConfigFile) -> Result<EnvConfig> {
        EnvConfigFile {
            d1: self.d1,
            kappa1: self.kappa1,
            kappa2: self.kappa2,
            xi2: self.xi2,
            seed: self.seed,
            los_angles: None,
            ..base.clone()
        }
        .resolve()
    }
}

/// The three pre-training presets: urban, suburban, rural.
pub fn builtin_presets() -> Vec<EnvPreset> {
    vec![
        EnvPreset::new("urban", 25.0, 2.0, 3.0, 3.0, 11),
        EnvPreset::new("suburban", 35.0, 6.0, 6.0, 2.6, 23),
        EnvPreset::new("rural", 50.0, 15.0, 12.0, 2.2, 37),
    ]
}

/// Deployment kept out of pre-training.
pub fn held_out_preset() -> EnvPreset {
    EnvPreset::new("industrial", 40.0, 4.0, 8.0, 2.8, 53)
}

pub fn preset_by_name(name: &str) -> Result<EnvPreset> {
    builtin_presets()
        .into_iter()
        .chain(std::iter::once(held_out_preset()))
        .find(|p| p.name == name)
        .ok_or_else(|| D2tError::Config(format!("unknown preset '{name}'")))
}

/// Runs one episode from the environment's current state, choosing actions
/// with `policy`. The environment must be fresh (slot 0).
pub fn run_episode<F>(env: &mut Environment, env_id: u32, mut policy: F) -> Result<Trajectory>
where
    F: FnMut(&ChannelRealization) -> Result<Vec<f64>>,
{
    let t = env.horizon();
    let (mut rewards, mut states, mut actions, mut pilots) = (
        Vec::with_capacity(t),
        Vec::with_capacity(t),
        Vec::with_capacity(t),
        Vec::with_capacity(t),
    );
    for _ in 0..t {
        let ch = env.channel().clone();
        states.push(channel_to_vector(&ch.cascaded));
        pilots.push(env.pilot().y.clone());
        let a = policy(&ch)?;
        rewards.push(env.step(&a)?.reward);
        actions.push(a);
    }
    Trajectory::new(env_id, rewards, states, actions, pilots)
}

/// Expert action, or all-zero phases on a degenerate channel.
pub fn expert_action<R: Rng + ?Sized>(
    ch: &ChannelRealization,
    cfg: &ExpertConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    match optimize_phases(&ch.cascaded, ch.n, ch.m, cfg, rng) {
        Ok(s) => Ok(s.phases),
        Err(D2tError::DegenerateChannel) => Ok(vec![0.0; ch.n]),
        Err(e) => Err(e),
    }
}

pub fn random_action<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-PI..PI)).collect()
}

fn empty_buffer(cfg: &EnvConfig) -> TrajectoryBuffer {
    TrajectoryBuffer::new(cfg.n, cfg.m, cfg.episode_len, 2 * cfg.num_pilots())
}

/// `episodes` expert trajectories from one environment.
fn collect_env(
    cfg: &EnvConfig,
    env_id: u32,
    expert: &ExpertConfig,
    episodes: usize,
    seed: u64,
) -> Result<TrajectoryBuffer> {
    let mut buf = empty_buffer(cfg);
    let mut env = Environment::with_seed(cfg.clone(), derive_seed(seed, 2 * env_id as u64))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2 * env_id as u64 + 1));
    for ep in 0..episodes {
        if ep > 0 {
            env.reset()?;
        }
        buf.push(run_episode(&mut env, env_id, |ch| {
            expert_action(ch, expert, &mut rng)
        })?)?;
    }
    Ok(buf)
}

/// Expert trajectories from every environment, tagged with its index, in
/// environment order.
pub fn collect_trajectories(
    envs: &[EnvConfig],
    expert: &ExpertConfig,
    episodes_per_env: usize,
    seed: u64,
) -> Result<TrajectoryBuffer> {
    expert.validate()?;
    let first = envs
        .first()
        .ok_or_else(|| D2tError::Config("no environments to collect from".into()))?;
    let mut buf = empty_buffer(first);
    for (i, cfg) in envs.iter().enumerate() {
        if (cfg.n, cfg.m, cfg.episode_len, cfg.pilot_seed)
            != (first.n, first.m, first.episode_len, first.pilot_seed)
        {
            return Err(D2tError::Config(
                "environments must share N, M, T and the pilot codebook".into(),
            ));
        }
        buf.extend(collect_env(cfg, i as u32, expert, episodes_per_env, seed)?)?;
    }
    Ok(buf)
}

/// Fine-tuning data from the partially trained expert.
pub fn make_fewshot_buffer(
    env: &EnvConfig,
    env_id: u32,
    expert: &ExpertConfig,
    count: usize,
    seed: u64,
) -> Result<TrajectoryBuffer> {
    expert.validate()?;
    collect_env(env, env_id, &expert.suboptimal(), count, seed)
}

/// Uniformly random phases on the same channel stream as [`collect_trajectories`].
pub fn random_trajectories(
    cfg: &EnvConfig,
    env_id: u32,
    episodes: usize,
    seed: u64,
) -> Result<TrajectoryBuffer> {
    let mut buf = empty_buffer(cfg);
    let mut env = Environment::with_seed(cfg.clone(), derive_seed(seed, 2 * env_id as u64))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2 * env_id as u64 + 1));
    for ep in 0..episodes {
        if ep > 0 {
            env.reset()?;
        }
        buf.push(run_episode(&mut env, env_id, |ch| {
            Ok(random_action(ch.n, &mut rng))
        })?)?;
    }
    Ok(buf)
}
