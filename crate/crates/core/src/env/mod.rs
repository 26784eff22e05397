//! A point mass on the unit square, rendered to grayscale pixels, with a
//! privileged scripted expert and demonstration files.

pub mod demos;

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use demos::{load_demos, save_demos, DemoSet, Trajectory};

pub const ACTION_DIM: usize = 2;
pub const ENV_NAME: &str = "point_mass";

const AGENT_RADIUS: f64 = 0.08;
const AGENT_LEVEL: f64 = 1.0;
const RING_RADIUS: f64 = 0.12;
const RING_WIDTH: f64 = 0.04;
const RING_LEVEL: f64 = 0.5;

/// Goals and start positions are drawn from `[MARGIN, 1 − MARGIN]²`.
const MARGIN: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GoalMode {
    /// A fresh goal every episode.
    Random,
    Fixed(f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvConfig {
    pub image_size: usize,
    pub frame_stack: usize,
    pub action_repeat: usize,
    /// Decision steps per episode.
    pub episode_len: usize,
    /// Physics step; one decision step moves at most
    /// `dt · action_repeat` along each axis.
    pub dt: f64,
    pub goal: GoalMode,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            image_size: 84,
            frame_stack: 3,
            action_repeat: 2,
            episode_len: 250,
            dt: 0.025,
            goal: GoalMode::Random,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 4 || self.frame_stack == 0 || self.action_repeat == 0 || self.episode_len == 0 {
            return Err(Error::Config(
                "image_size ≥ 4 and positive frame_stack, action_repeat, episode_len required".into(),
            ));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config("dt must be positive".into()));
        }
        if let GoalMode::Fixed(x, y) = self.goal {
            if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                return Err(Error::Config("fixed goal must lie in the unit square".into()));
            }
        }
        Ok(())
    }

    /// Largest per-axis displacement in one decision step.
    pub fn max_step(&self) -> f64 {
        self.dt * self.action_repeat as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct State {
    pub pos: [f64; 2],
    pub goal: [f64; 2],
}

impl State {
    pub fn distance(&self) -> f64 {
        ((self.pos[0] - self.goal[0]).powi(2) + (self.pos[1] - self.goal[1]).powi(2)).sqrt()
    }

    /// Ground-truth reward: `1 − distance(agent, goal)`.
    pub fn reward(&self) -> f64 {
        1.0 - self.distance()
    }
}

/// Intensity quantized to 8 bits.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `b / 255` rounded through `f32`, so observations survive the demo file
/// format bit for bit.
pub fn dequantize(b: u8) -> f64 {
    (b as f32 / 255.0) as f64
}

/// Anti-aliased coverage of a pixel whose centre lies `d` pixels from an
/// edge (positive inside).
fn coverage(d: f64) -> f64 {
    (d + 0.5).clamp(0.0, 1.0)
}

/// Renders one frame: dim goal ring under a bright agent disc. Position
/// `(x, y)` maps to column `x·S` and row `y·S`.
pub fn render(state: &State, size: usize) -> Vec<u8> {
    let s = size as f64;
    let mut out = vec![0u8; size * size];
    for r in 0..size {
        for c in 0..size {
            let (py, px) = ((r as f64 + 0.5) / s, (c as f64 + 0.5) / s);
            let dg = ((px - state.goal[0]).powi(2) + (py - state.goal[1]).powi(2)).sqrt();
            let ring = coverage((RING_WIDTH / 2.0 - (dg - RING_RADIUS).abs()) * s);
            let da = ((px - state.pos[0]).powi(2) + (py - state.pos[1]).powi(2)).sqrt();
            let disc = coverage((AGENT_RADIUS - da) * s);
            out[r * size + c] = quantize((RING_LEVEL * ring).max(AGENT_LEVEL * disc));
        }
    }
    out
}

/// Proportional controller toward the goal, clipped to `[-1, 1]²`.
pub fn scripted_expert(state: &State) -> [f64; 2] {
    const GAIN: f64 = 10.0;
    [
        (GAIN * (state.goal[0] - state.pos[0])).clamp(-1.0, 1.0),
        (GAIN * (state.goal[1] - state.pos[1])).clamp(-1.0, 1.0),
    ]
}

/// Best achievable return from `start`: moving every axis straight at the
/// goal with full speed keeps the agent at the closest reachable point at
/// every step, so no controller can do better.
pub fn optimal_return(start: &State, config: &EnvConfig) -> f64 {
    let v = config.max_step();
    let mut total = 0.0;
    for t in 1..=config.episode_len {
        let reach = v * t as f64;
        let mut d2 = 0.0;
        for k in 0..2 {
            let gap = (start.goal[k] - start.pos[k]).abs();
            d2 += (gap - reach).max(0.0).powi(2);
        }
        total += 1.0 - d2.sqrt();
    }
    total
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Tensor,
    pub reward: f64,
    pub done: bool,
}

#[derive(Clone, Debug)]
pub struct PointMassEnv {
    pub config: EnvConfig,
    rng: ChaCha8Rng,
    state: State,
    frames: VecDeque<Vec<u8>>,
    t: usize,
    done: bool,
    started: bool,
}

impl PointMassEnv {
    pub fn new(config: EnvConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(PointMassEnv {
            frames: VecDeque::with_capacity(config.frame_stack),
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            state: State {
                pos: [0.5; 2],
                goal: [0.5; 2],
            },
            t: 0,
            done: false,
            started: false,
        })
    }

    pub fn state(&self) -> State {
        self.state
    }

    pub fn elapsed(&self) -> usize {
        self.t
    }

    /// New start and goal; the stack is filled with copies of the first
    /// frame.
    pub fn reset(&mut self) -> Tensor {
        let mut draw = || [self.rng.gen_range(MARGIN..1.0 - MARGIN), self.rng.gen_range(MARGIN..1.0 - MARGIN)];
        let pos = draw();
        let goal = match self.config.goal {
            GoalMode::Random => draw(),
            GoalMode::Fixed(x, y) => [x, y],
        };
        self.reset_to(State { pos, goal })
    }

    pub fn reset_to(&mut self, state: State) -> Tensor {
        self.state = state;
        self.t = 0;
        self.done = false;
        self.started = true;
        let f = render(&self.state, self.config.image_size);
        self.frames.clear();
        for _ in 0..self.config.frame_stack {
            self.frames.push_back(f.clone());
        }
        self.observation()
    }

    /// Newest rendered frame.
    pub fn latest_frame(&self) -> &[u8] {
        self.frames.back().map(Vec::as_slice).unwrap_or(&[])
    }

    /// Stacked frames `[stack, H, W]`, oldest first.
    pub fn observation(&self) -> Tensor {
        let s = self.config.image_size;
        let data = self.frames.iter().flatten().map(|&b| dequantize(b)).collect();
        Tensor::new(vec![self.config.frame_stack, s, s], data).expect("stack shape")
    }

    pub fn step(&mut self, action: [f64; 2]) -> Result<StepResult> {
        if !self.started || self.done {
            return Err(Error::Env("step called before reset or after the episode ended".into()));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::Env(format!("non-finite action {action:?}")));
        }
        for _ in 0..self.config.action_repeat {
            for k in 0..2 {
                let v = action[k].clamp(-1.0, 1.0);
                self.state.pos[k] = (self.state.pos[k] + v * self.config.dt).clamp(0.0, 1.0);
            }
        }
        self.t += 1;
        self.done = self.t >= self.config.episode_len;
        self.frames.pop_front();
        self.frames.push_back(render(&self.state, self.config.image_size));
        Ok(StepResult {
            observation: self.observation(),
            reward: self.state.reward(),
            done: self.done,
        })
    }
}

/// One recorded episode.
#[derive(Clone, Debug)]
pub struct Episode {
    /// `T + 1` stacked observations.
    pub observations: Vec<Tensor>,
    pub actions: Vec<[f64; 2]>,
    pub rewards: Vec<f64>,
    pub start: State,
}

/// Sum of ground-truth rewards. Every reported return goes through here.
pub fn score(rewards: &[f64]) -> f64 {
    rewards.iter().sum()
}

/// Runs one episode from a fresh reset.
pub fn run_episode<F>(env: &mut PointMassEnv, mut policy: F, record: bool) -> Result<Episode>
where
    F: FnMut(&Tensor, &State) -> Result<[f64; 2]>,
{
    let mut obs = env.reset();
    let start = env.state();
    let mut ep = Episode {
        observations: Vec::new(),
        actions: Vec::new(),
        rewards: Vec::new(),
        start,
    };
    loop {
        let a = policy(&obs, &env.state())?;
        let step = env.step(a)?;
        if record {
            ep.observations.push(std::mem::replace(&mut obs, step.observation));
        } else {
            obs = step.observation;
        }
        ep.actions.push(a);
        ep.rewards.push(step.reward);
        if step.done {
            break;
        }
    }
    if record {
        ep.observations.push(obs);
    }
    Ok(ep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EnvConfig {
        EnvConfig {
            image_size: 16,
            ..EnvConfig::default()
        }
    }

    #[test]
    fn zero_action_keeps_position() {
        let mut env = PointMassEnv::new(small(), 1).unwrap();
        env.reset();
        let s0 = env.state();
        let r1 = env.step([0.0, 0.0]).unwrap().reward;
        let r2 = env.step([0.0, 0.0]).unwrap().reward;
        assert_eq!(env.state(), s0);
        assert_eq!(r1, r2);
    }

    #[test]
    fn at_goal_reward_is_one_and_expert_rests() {
        let s = State {
            pos: [0.3, 0.7],
            goal: [0.3, 0.7],
        };
        assert_eq!(s.reward(), 1.0);
        assert_eq!(scripted_expert(&s), [0.0, 0.0]);
        let left = State {
            pos: [0.2, 0.5],
            goal: [0.6, 0.5],
        };
        assert!(scripted_expert(&left)[0] > 0.0);
    }

    #[test]
    fn horizon_and_step_after_done() {
        let mut env = PointMassEnv::new(small(), 0).unwrap();
        assert!(env.step([0.0; 2]).is_err());
        env.reset();
        for t in 1..=250 {
            let r = env.step([0.3, -0.2]).unwrap();
            assert_eq!(r.done, t == 250);
        }
        assert!(env.step([0.0; 2]).is_err());
    }

    #[test]
    fn observations_are_deterministic_and_bounded() {
        let run = || {
            let mut env = PointMassEnv::new(small(), 9).unwrap();
            let mut obs = vec![env.reset()];
            for i in 0..20 {
                obs.push(env.step([(i as f64 * 0.37).sin(), 0.5]).unwrap().observation);
            }
            obs
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        for o in &a {
            assert_eq!(o.shape(), &[3, 16, 16]);
            assert!(o.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn rendering_is_pure_and_shows_both_objects() {
        let s = State {
            pos: [0.25, 0.25],
            goal: [0.75, 0.75],
        };
        let f = render(&s, 84);
        assert_eq!(f, render(&s, 84));
        let at = |x: f64, y: f64| f[(y * 84.0) as usize * 84 + (x * 84.0) as usize];
        assert_eq!(at(0.25, 0.25), 255);
        assert_eq!(at(0.75 + RING_RADIUS, 0.75), 128);
        assert_eq!(at(0.75, 0.75), 0);
        assert_eq!(at(0.5, 0.1), 0);
    }

    #[test]
    fn quantization_round_trips() {
        for b in 0..=255u8 {
            let v = dequantize(b);
            assert_eq!(quantize(v), b);
            assert_eq!(v as f32 as f64, v);
        }
    }

    #[test]
    fn positions_stay_in_the_square() {
        let mut env = PointMassEnv::new(small(), 3).unwrap();
        env.reset();
        for _ in 0..100 {
            env.step([1.0, -1.0]).unwrap();
        }
        assert_eq!(env.state().pos, [1.0, 0.0]);
    }

    #[test]
    fn optimum_upper_bounds_any_controller() {
        let cfg = small();
        let start = State {
            pos: [0.1, 0.2],
            goal: [0.8, 0.3],
        };
        let best = optimal_return(&start, &cfg);
        let mut env = PointMassEnv::new(cfg.clone(), 0).unwrap();
        env.reset_to(start);
        let mut total = 0.0;
        loop {
            let s = env.step(scripted_expert(&env.state())).unwrap();
            total += s.reward;
            if s.done {
                break;
            }
        }
        assert!(total <= best + 1e-12);
        assert!(total >= 0.95 * best);
    }
}
