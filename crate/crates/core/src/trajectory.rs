//! Trajectories of (return-to-go, state, action, reward) and the buffer
//! container they are stored in.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! magic     8 bytes "D2TTRAJ1"
//! n, m, horizon, pilot_len   u32 each
//! count     u64
//! per trajectory:
//!   env_id  u32
//!   returns_to_go  f64 × T
//!   rewards        f64 × T
//!   states         f64 × T × 2NM   (raw channel vectors)
//!   actions        f64 × T × N     (phases)
//!   pilots         f64 × T × pilot_len
//! ```

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{D2tError, Result};

pub const BUFFER_MAGIC: &[u8; 8] = b"D2TTRAJ1";

/// Suffix sums `R̂_t = Σ_{t' ≥ t} r_{t'}`.
pub fn compute_returns_to_go(rewards: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        acc += r;
        *o = acc;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub env_id: u32,
    pub returns_to_go: Vec<f64>,
    pub rewards: Vec<f64>,
    /// Raw (unnormalized) channel vectors, one per slot.
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    /// Pilot observations paired with each state, for diffusion training.
    pub pilots: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn new(
        env_id: u32,
        rewards: Vec<f64>,
        states: Vec<Vec<f64>>,
        actions: Vec<Vec<f64>>,
        pilots: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let t = Trajectory {
            env_id,
            returns_to_go: compute_returns_to_go(&rewards),
            rewards,
            states,
            actions,
            pilots,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn episode_return(&self) -> f64 {
        self.returns_to_go.first().copied().unwrap_or(0.0)
    }

    /// Equal lengths and the telescoping identity `R̂_t = R̂_{t+1} + r_t`.
    pub fn validate(&self) -> Result<()> {
        let t = self.rewards.len();
        if t == 0 {
            return Err(D2tError::Buffer("empty trajectory".into()));
        }
        if [
            self.returns_to_go.len(),
            self.states.len(),
            self.actions.len(),
            self.pilots.len(),
        ]
        .iter()
        .any(|&l| l != t)
        {
            return Err(D2tError::Buffer(
                "trajectory fields differ in length".into(),
            ));
        }
        for i in 0..t {
            let next = if i + 1 < t {
                self.returns_to_go[i + 1]
            } else {
                0.0
            };
            let want = next + self.rewards[i];
            if (self.returns_to_go[i] - want).abs() > 1e-9 * want.abs().max(1.0) {
                return Err(D2tError::Buffer(format!(
                    "returns-to-go do not telescope at slot {i}"
                )));
            }
        }
        Ok(())
    }
}

/// Trajectories of one channel geometry, tagged by source environment.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryBuffer {
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    pub pilot_len: usize,
    pub capacity: Option<usize>,
    trajectories: Vec<Trajectory>,
}

impl TrajectoryBuffer {
    pub fn new(n: usize, m: usize, horizon: usize, pilot_len: usize) -> Self {
        TrajectoryBuffer {
            n,
            m,
            horizon,
            pilot_len,
            capacity: None,
            trajectories: Vec::new(),
        }
    }

    pub fn with_capacity(mut self, capacity: usize) -> Self {
        self.capacity = Some(capacity);
        self
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn state_dim(&self) -> usize {
        2 * self.n * self.m
    }

    /// Appends a trajectory, evicting the oldest one when full.
    pub fn push(&mut self, t: Trajectory) -> Result<()> {
        t.validate()?;
        if t.len() != self.horizon {
            return Err(D2tError::Buffer(format!(
                "trajectory length {} != horizon {}",
                t.len(),
                self.horizon
            )));
        }
        let dims_ok = t.states.iter().all(|s| s.len() == self.state_dim())
            && t.actions.iter().all(|a| a.len() == self.n)
            && t.pilots.iter().all(|p| p.len() == self.pilot_len);
        if !dims_ok {
            return Err(D2tError::Buffer("state/action/pilot width mismatch".into()));
        }
        if let Some(cap) = self.capacity {
            if cap == 0 {
                return Ok(());
            }
            if self.trajectories.len() == cap {
                self.trajectories.remove(0);
            }
        }
        self.trajectories.push(t);
        Ok(())
    }

    /// Merges another buffer with the same geometry, in order.
    pub fn extend(&mut self, other: TrajectoryBuffer) -> Result<()> {
        for t in other.trajectories {
            self.push(t)?;
        }
        Ok(())
    }

    pub fn env_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.trajectories.iter().map(|t| t.env_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn mean_reward(&self) -> f64 {
        let (s, c) = self
            .trajectories
            .iter()
            .flat_map(|t| t.rewards.iter())
            .fold((0.0, 0usize), |(s, c), r| (s + r, c + 1));
        if c == 0 {
            0.0
        } else {
            s / c as f64
        }
    }

    pub fn max_slot_reward(&self) -> f64 {
        self.trajectories
            .iter()
            .flat_map(|t| t.rewards.iter().copied())
            .fold(0.0, f64::max)
    }

    pub fn best_return(&self) -> f64 {
        self.trajectories
            .iter()
            .map(Trajectory::episode_return)
            .fold(0.0, f64::max)
    }

    /// Uniformly sampled trajectory indices, with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<usize> {
        (0..batch)
            .map(|_| rng.random_range(0..self.len()))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BUFFER_MAGIC);
        for v in [self.n, self.m, self.horizon, self.pilot_len] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.trajectories.len() as u64).to_le_bytes());
        let put = |xs: &[f64], out: &mut Vec<u8>| {
            xs.iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes()))
        };
        for t in &self.trajectories {
            out.extend_from_slice(&t.env_id.to_le_bytes());
            put(&t.returns_to_go, &mut out);
            put(&t.rewards, &mut out);
            t.states.iter().for_each(|s| put(s, &mut out));
            t.actions.iter().for_each(|a| put(a, &mut out));
            t.pilots.iter().for_each(|p| put(p, &mut out));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { buf: bytes, pos: 0 };
        if cur.take(8)? != BUFFER_MAGIC {
            return Err(D2tError::Buffer("bad magic".into()));
        }
        let n = cur.u32()? as usize;
        let m = cur.u32()? as usize;
        let horizon = cur.u32()? as usize;
        let pilot_len = cur.u32()? as usize;
        let count = cur.u64()?;
        let mut buf = TrajectoryBuffer::new(n, m, horizon, pilot_len);
        for _ in 0..count {
            let env_id = cur.u32()?;
            let returns_to_go = cur.f64s(horizon)?;
            let rewards = cur.f64s(horizon)?;
            let states = (0..horizon)
                .map(|_| cur.f64s(2 * n * m))
                .collect::<Result<_>>()?;
            let actions = (0..horizon).map(|_| cur.f64s(n)).collect::<Result<_>>()?;
            let pilots = (0..horizon)
                .map(|_| cur.f64s(pilot_len))
                .collect::<Result<_>>()?;
            buf.push(Trajectory {
                env_id,
                returns_to_go,
                rewards,
                states,
                actions,
                pilots,
            })?;
        }
        if cur.pos != bytes.len() {
            return Err(D2tError::Buffer("trailing bytes".into()));
        }
        Ok(buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// One JSON object per trajectory.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.trajectories {
            serde_json::to_writer(&mut f, t)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(D2tError::Buffer("truncated buffer file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(8 * n)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn returns_to_go_examples() {
        assert_eq!(compute_returns_to_go(&[1.0, 2.0, 3.0]), vec![6.0, 5.0, 3.0]);
        assert_eq!(compute_returns_to_go(&[0.0; 4]), vec![0.0; 4]);
        assert_eq!(compute_returns_to_go(&[2.5]), vec![2.5]);
    }

    fn traj(env: u32, rewards: Vec<f64>, n: usize, m: usize, p: usize) -> Trajectory {
        let t = rewards.len();
        Trajectory::new(
            env,
            rewards,
            (0..t).map(|i| vec![i as f64; 2 * n * m]).collect(),
            (0..t).map(|i| vec![-(i as f64); n]).collect(),
            (0..t).map(|i| vec![0.5 * i as f64; p]).collect(),
        )
        .unwrap()
    }

    #[test]
    fn rejects_broken_telescoping() {
        let mut t = traj(0, vec![1.0, 2.0], 1, 1, 2);
        t.returns_to_go[0] = 10.0;
        assert!(t.validate().is_err());
    }

    #[test]
    fn capacity_evicts_oldest() {
        let mut b = TrajectoryBuffer::new(1, 1, 2, 2).with_capacity(2);
        for e in 0..3 {
            b.push(traj(e, vec![1.0, 1.0], 1, 1, 2)).unwrap();
        }
        assert_eq!(b.env_ids(), vec![1, 2]);
    }

    #[test]
    fn header_fields() {
        let mut b = TrajectoryBuffer::new(2, 3, 4, 6);
        b.push(traj(7, vec![1.0; 4], 2, 3, 6)).unwrap();
        let bytes = b.to_bytes();
        assert_eq!(&bytes[..8], BUFFER_MAGIC);
        let field = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
        assert_eq!((field(0), field(1), field(2), field(3)), (2, 3, 4, 6));
        assert_eq!(u64::from_le_bytes(bytes[24..32].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[32..36].try_into().unwrap()), 7);
        assert!(TrajectoryBuffer::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn telescoping_and_round_trip(rewards in prop::collection::vec(0.0f64..10.0, 1..12), env in 0u32..5) {
            let rtg = compute_returns_to_go(&rewards);
            for t in 0..rewards.len() {
                let next = rtg.get(t + 1).copied().unwrap_or(0.0);
                prop_assert!((rtg[t] - next - rewards[t]).abs() < 1e-9);
            }
            let horizon = rewards.len();
            let mut b = TrajectoryBuffer::new(2, 1, horizon, 4);
            b.push(traj(env, rewards, 2, 1, 4)).unwrap();
            let back = TrajectoryBuffer::from_bytes(&b.to_bytes()).unwrap();
            prop_assert_eq!(back, b);
        }
    }
}
