//! Frame-level replay storage.
//!
//! Each slot holds one rendered frame, the action taken from that frame, and
//! episode-boundary flags. A stacked observation is rebuilt from the newest
//! `stack` slots of its episode, repeating the episode's first frame where
//! the history runs out. Storing single frames instead of `(s, a, s')`
//! stacks keeps million-entry buffers in memory; the transition view is
//! unchanged.

use rand::Rng;

use crate::env::dequantize;
use crate::error::{Error, Result};

/// Draws per requested sample before giving up on finding complete windows.
const MAX_DRAWS_PER_SAMPLE: usize = 1000;

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    frame_len: usize,
    stack: usize,
    act_dim: usize,
    frames: Vec<u8>,
    actions: Vec<f64>,
    first: Vec<bool>,
    last: Vec<bool>,
    /// Slots written so far; logical index `i` lives at `i % capacity`.
    count: u64,
}

/// `len` consecutive transitions starting at logical slot `start`, cut short
/// when the episode ends.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub start: u64,
    pub len: usize,
    /// The window reached the last step of its episode.
    pub done: bool,
}

impl Window {
    /// Logical slots of the `k`-th `(s, s')` pair.
    pub fn pair(&self, k: usize) -> (u64, u64) {
        let t = self.start + k as u64;
        (t, t + 1)
    }

    pub fn end(&self) -> u64 {
        self.start + self.len as u64
    }
}

impl ReplayBuffer {
    pub fn new(capacity: usize, frame_len: usize, stack: usize, act_dim: usize) -> Result<Self> {
        if capacity < 2 || frame_len == 0 || stack == 0 || act_dim == 0 {
            return Err(Error::Config(
                "replay buffer needs capacity ≥ 2 and positive frame, stack and action sizes".into(),
            ));
        }
        Ok(ReplayBuffer {
            capacity,
            frame_len,
            stack,
            act_dim,
            frames: vec![0; capacity * frame_len],
            actions: vec![0.0; capacity * act_dim],
            first: vec![false; capacity],
            last: vec![false; capacity],
            count: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Slots currently held.
    pub fn len(&self) -> usize {
        (self.count as usize).min(self.capacity)
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn total_written(&self) -> u64 {
        self.count
    }

    /// Oldest logical slot still stored.
    pub fn oldest(&self) -> u64 {
        self.count.saturating_sub(self.capacity as u64)
    }

    fn slot(&self, i: u64) -> usize {
        (i % self.capacity as u64) as usize
    }

    fn write(&mut self, frame: &[u8], first: bool, last: bool) -> Result<()> {
        if frame.len() != self.frame_len {
            return Err(Error::shape(
                "replay push",
                format!("frame of {} bytes, expected {}", frame.len(), self.frame_len),
            ));
        }
        let s = self.slot(self.count);
        self.frames[s * self.frame_len..(s + 1) * self.frame_len].copy_from_slice(frame);
        self.actions[s * self.act_dim..(s + 1) * self.act_dim].fill(0.0);
        self.first[s] = first;
        self.last[s] = last;
        self.count += 1;
        Ok(())
    }

    /// Starts an episode with its first frame.
    pub fn push_reset(&mut self, frame: &[u8]) -> Result<()> {
        self.write(frame, true, false)
    }

    /// Records `action` as taken from the previous frame and appends the
    /// resulting frame.
    pub fn push_step(&mut self, action: &[f64], frame: &[u8], done: bool) -> Result<()> {
        if self.count == 0 || self.last[self.slot(self.count - 1)] {
            return Err(Error::Insufficient("push_step needs an open episode; call push_reset first".into()));
        }
        if action.len() != self.act_dim {
            return Err(Error::shape(
                "replay push",
                format!("action of length {}, expected {}", action.len(), self.act_dim),
            ));
        }
        let p = self.slot(self.count - 1);
        self.actions[p * self.act_dim..(p + 1) * self.act_dim].copy_from_slice(action);
        self.write(frame, false, done)
    }

    fn check(&self, i: u64) -> Result<()> {
        if i < self.oldest() || i >= self.count {
            return Err(Error::Insufficient(format!(
                "slot {i} is outside the stored range {}..{}",
                self.oldest(),
                self.count
            )));
        }
        Ok(())
    }

    pub fn frame(&self, i: u64) -> Result<&[u8]> {
        self.check(i)?;
        let s = self.slot(i);
        Ok(&self.frames[s * self.frame_len..(s + 1) * self.frame_len])
    }

    pub fn action(&self, i: u64) -> Result<&[f64]> {
        self.check(i)?;
        let s = self.slot(i);
        Ok(&self.actions[s * self.act_dim..(s + 1) * self.act_dim])
    }

    pub fn is_first(&self, i: u64) -> Result<bool> {
        self.check(i)?;
        Ok(self.first[self.slot(i)])
    }

    pub fn is_last(&self, i: u64) -> Result<bool> {
        self.check(i)?;
        Ok(self.last[self.slot(i)])
    }

    /// Indices of the frames that make up the stacked observation at `i`,
    /// oldest first.
    pub fn stack_indices(&self, i: u64) -> Result<Vec<u64>> {
        self.check(i)?;
        let mut idx = vec![i; self.stack];
        let mut cur = i;
        for k in (0..self.stack - 1).rev() {
            if !self.first[self.slot(cur)] {
                self.check(cur - 1)?;
                cur -= 1;
            }
            idx[k] = cur;
        }
        Ok(idx)
    }

    /// Appends the stacked observation at `i` as values in `[0, 1]`.
    pub fn extend_observation(&self, i: u64, out: &mut Vec<f64>) -> Result<()> {
        for j in self.stack_indices(i)? {
            out.extend(self.frame(j)?.iter().map(|&b| dequantize(b)));
        }
        Ok(())
    }

    fn window_at(&self, start: u64, n: usize) -> Option<Window> {
        let lo = self.oldest() + self.stack as u64 - 1;
        if start < lo || start + 1 >= self.count || self.last[self.slot(start)] {
            return None;
        }
        for k in 1..=n {
            let t = start + k as u64;
            if t >= self.count {
                return None;
            }
            if self.last[self.slot(t)] {
                return Some(Window { start, len: k, done: true });
            }
        }
        Some(Window { start, len: n, done: false })
    }

    /// Uniformly drawn windows of up to `n` transitions that stay inside one
    /// episode and inside the stored range.
    pub fn sample_windows<R: Rng>(&self, batch: usize, n: usize, rng: &mut R) -> Result<Vec<Window>> {
        if n == 0 {
            return Err(Error::Config("n-step length must be positive".into()));
        }
        let lo = self.oldest() + self.stack as u64 - 1;
        if self.count < lo + n as u64 + 1 {
            return Err(Error::Insufficient(format!(
                "{} stored slots cannot hold a {n}-step window",
                self.len()
            )));
        }
        let mut out = Vec::with_capacity(batch);
        let mut draws = 0;
        while out.len() < batch {
            if draws >= MAX_DRAWS_PER_SAMPLE * batch.max(1) {
                return Err(Error::Insufficient("no complete n-step window in the buffer".into()));
            }
            draws += 1;
            let start = rng.gen_range(lo..self.count - 1);
            if let Some(w) = self.window_at(start, n) {
                out.push(w);
            }
        }
        Ok(out)
    }
}

/// `Σ_k γ^k r_k` and the bootstrap mask `γ^n·(1 − done)`.
pub fn nstep_target(rewards: &[f64], done: bool, n: usize, gamma: f64) -> (f64, f64) {
    let mut ret = 0.0;
    let mut g = 1.0;
    for r in rewards {
        ret += g * r;
        g *= gamma;
    }
    let mask = if done { 0.0 } else { gamma.powi(n as i32) };
    (ret, mask)
}
