//! The imitation loop: collect with the current policy, update the
//! discriminator on expert and agent pairs, relabel the agent batch with
//! patch rewards, and update the actor-critic.

pub mod config;
pub mod log;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{nstep_target, random_shift, Agent, CriticBatch, ReplayBuffer, Window};
use crate::discriminator::{Discriminator, ExpertStats};
use crate::env::{quantize, run_episode, score, scripted_expert, DemoSet, EnvConfig, PointMassEnv, ACTION_DIM};
use crate::error::{Error, Result};
use crate::nets::module::Module;
use crate::reward::{compose_reward, sim_bar, sim_raw};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::Tensor;

pub use config::TrainConfig;
pub use log::{LogRow, TrainLog};

pub const CHECKPOINT_FILE: &str = "checkpoint.ptck";
pub const CONFIG_FILE: &str = "config.txt";
pub const LOG_FILE: &str = "train_log.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const SIMILARITY_FILE: &str = "similarity.csv";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.txt";

/// Independent seeds for every consumer of randomness in a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    pub env: u64,
    pub eval: u64,
    pub discriminator: u64,
    pub agent: u64,
    pub train: u64,
    pub probe: u64,
}

impl Seeds {
    pub fn derive(seed: u64) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Seeds {
            env: r.gen(),
            eval: r.gen(),
            discriminator: r.gen(),
            agent: r.gen(),
            train: r.gen(),
            probe: r.gen(),
        }
    }
}

/// Mean and population standard deviation of episode returns.
#[derive(Clone, Debug, PartialEq)]
pub struct ReturnStats {
    pub mean: f64,
    pub std: f64,
    pub returns: Vec<f64>,
}

impl ReturnStats {
    pub fn from_returns(returns: Vec<f64>) -> Self {
        let n = returns.len().max(1) as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        ReturnStats {
            mean,
            std: var.sqrt(),
            returns,
        }
    }
}

/// Runs `episodes` episodes of `policy` in one environment seeded with
/// `seed` and scores them. Every evaluation in the crate goes through here.
pub fn rollout_returns<F>(env_config: &EnvConfig, seed: u64, episodes: usize, mut policy: F) -> Result<ReturnStats>
where
    F: FnMut(&Tensor, &crate::env::State) -> Result<[f64; 2]>,
{
    let mut env = PointMassEnv::new(env_config.clone(), seed)?;
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let ep = run_episode(&mut env, &mut policy, false)?;
        returns.push(score(&ep.rewards));
    }
    Ok(ReturnStats::from_returns(returns))
}

fn to_action(v: &[f64]) -> [f64; 2] {
    [v[0], v[1]]
}

/// Deterministic rollouts of the agent's policy.
pub fn evaluate_agent(agent: &Agent, env_config: &EnvConfig, seed: u64, episodes: usize) -> Result<ReturnStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    rollout_returns(env_config, seed, episodes, |obs, _| {
        Ok(to_action(&agent.act(obs, u64::MAX, false, &mut rng)?))
    })
}

/// Uniformly random actions.
pub fn random_policy_returns(env_config: &EnvConfig, seed: u64, episodes: usize, policy_seed: u64) -> Result<ReturnStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(policy_seed);
    rollout_returns(env_config, seed, episodes, |_, _| {
        Ok([rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)])
    })
}

/// Records `episodes` scripted-expert episodes from an environment seeded
/// with `seed`.
pub fn generate_demos(env_config: &EnvConfig, seed: u64, episodes: usize) -> Result<DemoSet> {
    let mut env = PointMassEnv::new(env_config.clone(), seed)?;
    let mut demos = DemoSet::default();
    demos.meta.env = crate::env::ENV_NAME.to_string();
    demos.meta.seed = seed;
    for _ in 0..episodes {
        let ep = run_episode(&mut env, |_, s| Ok(scripted_expert(s)), true)?;
        let (stack, h, w) = {
            let s = ep.observations[0].shape();
            (s[0], s[1], s[2])
        };
        let t = ep.actions.len();
        let obs: Vec<f64> = ep.observations.iter().flat_map(|o| o.data().iter().copied()).collect();
        let acts: Vec<f64> = ep.actions.iter().flatten().copied().collect();
        demos.trajectories.push(crate::env::Trajectory {
            observations: Tensor::new(vec![t + 1, stack, h, w], obs)?,
            actions: Some(Tensor::new(vec![t, ACTION_DIM], acts)?),
        });
        demos.meta.returns.push(score(&ep.rewards));
    }
    Ok(demos)
}

/// Replays stored actions from the recorded seed and scores the result.
pub fn replay_demo_returns(demos: &DemoSet, env_config: &EnvConfig) -> Result<Vec<f64>> {
    let mut env = PointMassEnv::new(env_config.clone(), demos.meta.seed)?;
    let mut out = Vec::new();
    for t in &demos.trajectories {
        let actions = t
            .actions
            .as_ref()
            .ok_or_else(|| Error::Insufficient("replay needs stored actions".into()))?;
        let mut k = 0;
        let ep = run_episode(
            &mut env,
            |_, _| {
                let a = to_action(actions.sample(k));
                k += 1;
                Ok(a)
            },
            false,
        )?;
        out.push(score(&ep.rewards));
    }
    Ok(out)
}

/// Expert observations quantized back to bytes.
struct ExpertPool {
    /// One entry per trajectory: `(T + 1)` stacked observations.
    stacks: Vec<Vec<u8>>,
    obs_len: usize,
    pairs: Vec<(usize, usize)>,
}

impl ExpertPool {
    fn new(demos: &DemoSet, config: &TrainConfig) -> Result<Self> {
        let want = (config.frame_stack, config.image_size, config.image_size);
        let mut pairs = Vec::new();
        let mut stacks = Vec::new();
        for (k, t) in demos.trajectories.iter().enumerate() {
            if t.frame_shape() != want {
                return Err(Error::Config(format!(
                    "demo trajectory {k} has frames {:?}, config expects {want:?}",
                    t.frame_shape()
                )));
            }
            stacks.push(t.observations.data().iter().map(|&v| quantize(v)).collect());
            pairs.extend((0..t.len()).map(|i| (k, i)));
        }
        if pairs.is_empty() {
            return Err(Error::Insufficient("demonstrations contain no transitions".into()));
        }
        Ok(ExpertPool {
            stacks,
            obs_len: want.0 * want.1 * want.2,
            pairs,
        })
    }

    fn extend_pair(&self, (k, t): (usize, usize), out: &mut Vec<f64>) {
        let s = &self.stacks[k][t * self.obs_len..(t + 2) * self.obs_len];
        out.extend(s.iter().map(|&b| crate::env::dequantize(b)));
    }

    fn pairs_tensor(&self, which: &[(usize, usize)], shape: [usize; 3]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(which.len() * 2 * self.obs_len);
        for &p in which {
            self.extend_pair(p, &mut data);
        }
        Tensor::new(vec![which.len(), 2 * shape[0], shape[1], shape[2]], data)
    }

    fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<(usize, usize)> {
        (0..n).map(|_| self.pairs[rng.gen_range(0..self.pairs.len())]).collect()
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Mean {
    sum: f64,
    n: usize,
}

impl Mean {
    fn add(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    fn get(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Interval {
    disc_loss: Mean,
    gp: Mean,
    patch_reward: Mean,
    sim: Mean,
    actor: Mean,
    critic: Mean,
}

/// Counts of each kind of update, for checking the loop's ordering.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct UpdateCounts {
    pub discriminator: u64,
    pub agent: u64,
    pub stats_refreshes: u64,
}

/// Outcome of a finished run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub rows: Vec<LogRow>,
    pub final_eval: Option<ReturnStats>,
    pub counts: UpdateCounts,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub seeds: Seeds,
    pub disc: Discriminator,
    pub agent: Agent,
    pub stats: Option<ExpertStats>,
    pub counts: UpdateCounts,
    expert: ExpertPool,
    demos: DemoSet,
    buffer: ReplayBuffer,
    env: PointMassEnv,
    obs: Tensor,
    rng: ChaCha8Rng,
    probe_rng: ChaCha8Rng,
    step: u64,
    interval: Interval,
}

impl Trainer {
    pub fn new(config: TrainConfig, demos: DemoSet) -> Result<Self> {
        config.validate()?;
        let seeds = Seeds::derive(config.seed);
        let expert = ExpertPool::new(&demos, &config)?;
        let disc = Discriminator::new(config.disc_config(), seeds.discriminator)?;
        let agent = Agent::new(config.agent_config(), seeds.agent)?;
        let buffer = ReplayBuffer::new(
            config.buffer_size.max(config.nstep + config.frame_stack + 1),
            config.image_size * config.image_size,
            config.frame_stack,
            ACTION_DIM,
        )?;
        let mut env = PointMassEnv::new(config.env_config(), seeds.env)?;
        let obs = env.reset();
        let mut buffer = buffer;
        buffer.push_reset(env.latest_frame())?;
        Ok(Trainer {
            rng: ChaCha8Rng::seed_from_u64(seeds.train),
            probe_rng: ChaCha8Rng::seed_from_u64(seeds.probe),
            config,
            seeds,
            disc,
            agent,
            stats: None,
            counts: UpdateCounts::default(),
            expert,
            demos,
            buffer,
            env,
            obs,
            step: 0,
            interval: Interval::default(),
        })
    }

    /// Agent decisions taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn env_steps(&self) -> u64 {
        self.step * self.config.action_repeat as u64
    }

    fn obs_shape(&self) -> [usize; 3] {
        [self.config.frame_stack, self.config.image_size, self.config.image_size]
    }

    fn agent_pairs(&self, windows: &[Window], all_steps: bool) -> Result<Tensor> {
        let [c, h, w] = self.obs_shape();
        let mut data = Vec::new();
        let mut n = 0;
        for win in windows {
            let ks = if all_steps { win.len } else { 1 };
            for k in 0..ks {
                let (a, b) = win.pair(k);
                self.buffer.extend_observation(a, &mut data)?;
                self.buffer.extend_observation(b, &mut data)?;
                n += 1;
            }
        }
        Tensor::new(vec![n, 2 * c, h, w], data)
    }

    fn observations(&self, idx: impl Iterator<Item = u64>) -> Result<Tensor> {
        let [c, h, w] = self.obs_shape();
        let mut data = Vec::new();
        let mut n = 0;
        for i in idx {
            self.buffer.extend_observation(i, &mut data)?;
            n += 1;
        }
        Tensor::new(vec![n, c, h, w], data)
    }

    fn refresh_stats(&mut self) -> Result<()> {
        let which = self.expert.sample(self.config.stats_samples, &mut self.rng);
        let pairs = self.expert.pairs_tensor(&which, self.obs_shape())?;
        self.stats = Some(self.disc.refresh_expert_stats(&pairs, self.step)?);
        self.counts.stats_refreshes += 1;
        Ok(())
    }

    fn update(&mut self) -> Result<()> {
        let cfg = &self.config;
        let (b, n, pad) = (cfg.batch_size, cfg.nstep, cfg.aug_pad);
        let windows = self.buffer.sample_windows(b, n, &mut self.rng)?;

        for i in 0..self.config.disc_updates {
            let ws = if i == 0 {
                windows.clone()
            } else {
                self.buffer.sample_windows(b, n, &mut self.rng)?
            };
            let agent = random_shift(&self.agent_pairs(&ws, false)?, pad, &mut self.rng)?;
            let which = self.expert.sample(b, &mut self.rng);
            let expert = self.expert.pairs_tensor(&which, self.obs_shape())?;
            let expert = random_shift(&expert, pad, &mut self.rng)?;
            let u = self.disc.update(&expert, &agent, &mut self.rng)?;
            self.interval.disc_loss.add(u.loss);
            self.interval.gp.add(u.penalty);
            self.counts.discriminator += 1;
        }

        let due = match &self.stats {
            None => true,
            Some(s) => self.step - s.refresh_step >= self.config.stats_refresh,
        };
        if due {
            self.refresh_stats()?;
        }

        let pairs = random_shift(&self.agent_pairs(&windows, true)?, pad, &mut self.rng)?;
        let logits = self.disc.logits(&pairs)?;
        let mut rewards = Vec::with_capacity(logits.shape()[0]);
        for i in 0..logits.shape()[0] {
            let parts = compose_reward(logits.sample(i), &self.config.reward, self.stats.as_ref(), self.step)?;
            self.interval.patch_reward.add(parts.aggregate);
            if let Some(s) = parts.similarity {
                self.interval.sim.add(s);
            }
            rewards.push(parts.reward);
        }
        let mut reward = Vec::with_capacity(b);
        let mut mask = Vec::with_capacity(b);
        let mut actions = Vec::with_capacity(b * ACTION_DIM);
        let mut offset = 0;
        for w in &windows {
            let (r, m) = nstep_target(&rewards[offset..offset + w.len], w.done, n, self.config.gamma);
            offset += w.len;
            reward.push(r);
            mask.push(m);
            actions.extend_from_slice(self.buffer.action(w.start)?);
        }
        let obs = self.observations(windows.iter().map(|w| w.start))?;
        let next = self.observations(windows.iter().map(Window::end))?;
        let batch = CriticBatch {
            obs: random_shift(&obs, pad, &mut self.rng)?,
            action: Tensor::new(vec![b, ACTION_DIM], actions)?,
            reward,
            mask,
            next_obs: random_shift(&next, pad, &mut self.rng)?,
        };
        let u = self.agent.update(&batch, self.step, &mut self.rng)?;
        self.interval.actor.add(u.actor_loss);
        self.interval.critic.add(u.critic_loss);
        self.counts.agent += 1;
        Ok(())
    }

    /// One decision: act, store, and update when due.
    pub fn advance(&mut self) -> Result<()> {
        let a = self.agent.act(&self.obs, self.step, true, &mut self.rng)?;
        let out = self.env.step(to_action(&a))?;
        // the ground-truth reward in `out` is dropped here; training never sees it
        self.buffer.push_step(&a, self.env.latest_frame(), out.done)?;
        if out.done {
            self.obs = self.env.reset();
            self.buffer.push_reset(self.env.latest_frame())?;
        } else {
            self.obs = out.observation;
        }
        let s = self.step;
        self.step += 1;
        if s >= self.config.exploration_steps && s % self.config.update_every == 0 {
            self.update()?;
        }
        Ok(())
    }

    pub fn evaluate(&self) -> Result<ReturnStats> {
        evaluate_agent(&self.agent, &self.config.env_config(), self.seeds.eval, self.config.eval_episodes)
    }

    /// Means of `sim_raw` against every demo pair and of `sim_bar` against
    /// fresh statistics over the same pairs, on one agent batch drawn from a
    /// separate random stream.
    pub fn similarity_probe(&mut self) -> Result<Option<(f64, f64)>> {
        let Ok(windows) = self.buffer.sample_windows(self.config.batch_size, 1, &mut self.probe_rng) else {
            return Ok(None);
        };
        let agent = self.disc.logits(&self.agent_pairs(&windows, false)?)?;
        let all = self.expert.pairs_tensor(&self.expert.pairs, self.obs_shape())?;
        let expert = self.disc.logits(&all)?;
        let stats = self.disc.refresh_expert_stats(&all, self.step)?;
        let n = agent.shape()[0];
        let (mut raw, mut bar) = (0.0, 0.0);
        for i in 0..n {
            let a = agent.sample(i);
            raw += sim_raw(a, (0..expert.shape()[0]).map(|j| expert.sample(j)))?;
            bar += sim_bar(a, &stats)?;
        }
        Ok(Some((raw / n as f64, bar / n as f64)))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        self.disc.save_into("disc", &mut ck);
        self.agent.save_into(&mut ck);
        if let Some(s) = &self.stats {
            ck.push("expert_stats.mean_logits", &s.mean_logits);
            ck.push("expert_stats.refresh_step", &Tensor::scalar(s.refresh_step as f64));
        }
        ck
    }

    fn take_row(&mut self, eval_return: f64) -> LogRow {
        let i = std::mem::take(&mut self.interval);
        LogRow {
            step: self.env_steps(),
            disc_loss: i.disc_loss.get(),
            gp: i.gp.get(),
            mean_patch_reward: i.patch_reward.get(),
            sim_bar_mean: i.sim.get(),
            actor_loss: i.actor.get(),
            critic_loss: i.critic.get(),
            eval_return,
        }
    }

    pub fn demos(&self) -> &DemoSet {
        &self.demos
    }
}

fn write_diagnostic(dir: &Path, err: &Error, trainer: &Trainer) {
    let i = &trainer.interval;
    let text = format!(
        "error: {err}\nenv_steps: {}\ndecisions: {}\ndisc_updates: {}\nagent_updates: {}\n\
         interval disc_loss: {:?}\ninterval gp: {:?}\ninterval patch_reward: {:?}\n\
         interval critic_loss: {:?}\ninterval actor_loss: {:?}\n",
        trainer.env_steps(),
        trainer.step,
        trainer.counts.discriminator,
        trainer.counts.agent,
        i.disc_loss.get(),
        i.gp.get(),
        i.patch_reward.get(),
        i.critic.get(),
        i.actor.get(),
    );
    let _ = fs::write(dir.join(DIAGNOSTIC_FILE), text);
}

fn run(config: TrainConfig, compare: bool) -> Result<TrainOutcome> {
    let demos = crate::env::load_demos(&config.demo_path)?;
    let out_dir = config.out_dir.clone();
    fs::create_dir_all(&out_dir)?;
    fs::write(out_dir.join(CONFIG_FILE), config.to_text())?;
    let mut trainer = Trainer::new(config, demos)?;
    let mut log = TrainLog::create(&out_dir.join(LOG_FILE), &out_dir.join(TIMING_FILE))?;
    let mut sim_log = if compare {
        Some(log::SimilarityLog::create(&out_dir.join(SIMILARITY_FILE))?)
    } else {
        None
    };
    let ck_path = out_dir.join(CHECKPOINT_FILE);
    trainer.checkpoint().save(&ck_path)?;

    let start = Instant::now();
    let total = trainer.config.total_decisions();
    let every = trainer.config.eval_every_decisions();
    let mut final_eval = None;
    while trainer.step < total {
        if let Err(e) = trainer.advance() {
            write_diagnostic(&out_dir, &e, &trainer);
            return Err(e);
        }
        if trainer.step % every == 0 || trainer.step == total {
            let eval = trainer.evaluate()?;
            let row = trainer.take_row(eval.mean);
            if let Err(e) = row.check_finite() {
                write_diagnostic(&out_dir, &e, &trainer);
                return Err(e);
            }
            log.append(&row, start.elapsed().as_secs_f64())?;
            if let Some(sl) = sim_log.as_mut() {
                if let Some((raw, bar)) = trainer.similarity_probe()? {
                    sl.append(row.step, raw, bar)?;
                }
            }
            trainer.checkpoint().save(&ck_path)?;
            final_eval = Some(eval);
        }
    }
    Ok(TrainOutcome {
        out_dir,
        rows: log.rows,
        final_eval,
        counts: trainer.counts,
    })
}

/// Trains from `config`, writing the config echo, log, timing sidecar and
/// checkpoint into `config.out_dir`.
pub fn train(config: TrainConfig) -> Result<TrainOutcome> {
    run(config, false)
}

/// Trains as [`train`] does and also writes `similarity.csv` with both
/// similarity formulations per log interval.
pub fn compare_similarity(config: TrainConfig) -> Result<TrainOutcome> {
    run(config, true)
}

/// Everything restored from a run directory's checkpoint.
pub struct LoadedRun {
    pub config: TrainConfig,
    pub disc: Discriminator,
    pub agent: Agent,
    pub stats: Option<ExpertStats>,
}

/// Loads a checkpoint together with the `config.txt` beside it.
pub fn load_run(checkpoint: impl AsRef<Path>) -> Result<LoadedRun> {
    let checkpoint = checkpoint.as_ref();
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let config = TrainConfig::load(dir.join(CONFIG_FILE))?;
    let ck = Checkpoint::load(checkpoint)?;
    let seeds = Seeds::derive(config.seed);
    let mut disc = Discriminator::new(config.disc_config(), seeds.discriminator)?;
    disc.restore_from("disc", &ck)?;
    let mut agent = Agent::new(config.agent_config(), seeds.agent)?;
    agent.restore_from(&ck)?;
    let stats = match (ck.get("expert_stats.mean_logits"), ck.get("expert_stats.refresh_step")) {
        (Some(m), Some(s)) => Some(ExpertStats {
            mean_logits: m.clone(),
            refresh_step: s.data()[0] as u64,
        }),
        _ => None,
    };
    Ok(LoadedRun {
        config,
        disc,
        agent,
        stats,
    })
}

/// Deterministic returns of the policy stored in `checkpoint`.
pub fn evaluate(checkpoint: impl AsRef<Path>, episodes: usize, seed: u64) -> Result<ReturnStats> {
    let run = load_run(checkpoint)?;
    evaluate_agent(&run.agent, &run.config.env_config(), seed, episodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::save_demos;
    use crate::tensor::ConvSpec;

    fn tiny_config(dir: &Path) -> TrainConfig {
        let c = |k, ch, s, p| ConvSpec::new(k, ch, s, p).unwrap();
        TrainConfig {
            total_env_steps: 240,
            eval_every_env_steps: 80,
            eval_episodes: 1,
            episode_len: 20,
            demo_path: dir.join("demos.pail"),
            out_dir: dir.join("run"),
            image_size: 8,
            batch_size: 4,
            hidden_dim: 8,
            feature_dim: 4,
            exploration_steps: 10,
            stats_refresh: 20,
            stats_samples: 4,
            buffer_size: 60,
            aug_pad: 1,
            arch: crate::nets::ArchSpec::fcn(vec![c(3, 2, 2, 1), c(3, 1, 1, 1)]),
            encoder: crate::nets::ArchSpec::encoder_from(vec![c(3, 2, 2, 0)]),
            ..TrainConfig::for_variant(crate::reward::Variant::Weight)
        }
    }

    fn write_demos(cfg: &TrainConfig, episodes: usize) {
        let d = generate_demos(&cfg.env_config(), 5, episodes).unwrap();
        save_demos(&d, &cfg.demo_path).unwrap();
    }

    #[test]
    fn return_stats_of_one_episode_has_zero_std() {
        let s = ReturnStats::from_returns(vec![3.5]);
        assert_eq!((s.mean, s.std), (3.5, 0.0));
    }

    #[test]
    fn demo_replay_reproduces_stored_returns() {
        let cfg = EnvConfig {
            image_size: 8,
            episode_len: 30,
            ..EnvConfig::default()
        };
        let d = generate_demos(&cfg, 11, 3).unwrap();
        let replayed = replay_demo_returns(&d, &cfg).unwrap();
        for (a, b) in replayed.iter().zip(&d.meta.returns) {
            assert!((a - b).abs() <= 1e-9);
        }
        let direct = rollout_returns(&cfg, 11, 3, |_, s| Ok(scripted_expert(s))).unwrap();
        assert!((direct.mean - d.meta.mean_return()).abs() <= 1e-9);
    }

    #[test]
    fn zero_steps_writes_config_header_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.total_env_steps = 0;
        write_demos(&cfg, 1);
        let out = train(cfg.clone()).unwrap();
        assert!(out.rows.is_empty());
        let log = fs::read_to_string(out.out_dir.join(LOG_FILE)).unwrap();
        assert_eq!(log, format!("{}\n", log::LOG_HEADER));
        assert_eq!(TrainConfig::load(out.out_dir.join(CONFIG_FILE)).unwrap(), cfg);
        assert!(out.out_dir.join(CHECKPOINT_FILE).exists());
    }

    #[test]
    fn short_run_is_deterministic_and_ordered() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        write_demos(&cfg, 2);
        let a = train(cfg.clone()).unwrap();
        let log_a = fs::read(a.out_dir.join(LOG_FILE)).unwrap();
        let ck_a = fs::read(a.out_dir.join(CHECKPOINT_FILE)).unwrap();
        let b = train(cfg.clone()).unwrap();
        assert_eq!(log_a, fs::read(b.out_dir.join(LOG_FILE)).unwrap());
        assert_eq!(ck_a, fs::read(b.out_dir.join(CHECKPOINT_FILE)).unwrap());

        assert_eq!(a.rows.len(), 3);
        assert!(a.counts.agent > 0);
        assert!(a.counts.discriminator >= a.counts.agent);
        assert!(a.counts.stats_refreshes >= 2);
        for r in &a.rows {
            r.check_finite().unwrap();
        }
        assert_eq!(log::read_log(a.out_dir.join(LOG_FILE)).unwrap(), a.rows);

        let ck = a.out_dir.join(CHECKPOINT_FILE);
        let e1 = evaluate(&ck, 2, 3).unwrap();
        let e2 = evaluate(&ck, 2, 3).unwrap();
        assert_eq!(e1, e2);
        let run = load_run(&ck).unwrap();
        assert!(run.stats.is_some());
    }

    #[test]
    fn mismatched_demos_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let mut other = cfg.clone();
        other.image_size = 12;
        write_demos(&other, 1);
        assert!(matches!(train(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn single_pair_similarities_coincide() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        let env = cfg.env_config();
        let mut d = generate_demos(&env, 2, 1).unwrap();
        let t = &mut d.trajectories[0];
        let [_, c, h, w] = [0, t.frame_shape().0, t.frame_shape().1, t.frame_shape().2];
        t.observations = Tensor::new(vec![2, c, h, w], t.observations.data()[..2 * c * h * w].to_vec()).unwrap();
        t.actions = Some(Tensor::new(vec![1, 2], t.actions.as_ref().unwrap().sample(0).to_vec()).unwrap());
        save_demos(&d, &cfg.demo_path).unwrap();
        cfg.total_env_steps = 160;
        let out = compare_similarity(cfg).unwrap();
        let text = fs::read_to_string(out.out_dir.join(SIMILARITY_FILE)).unwrap();
        let rows: Vec<Vec<f64>> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect();
        assert!(!rows.is_empty());
        for r in rows {
            assert_eq!(r[1], r[2]);
            assert!(r[1] > 0.0 && r[1] <= 1.0);
        }
    }

    #[test]
    fn exploration_phase_matches_random_baseline() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let agent = Agent::new(cfg.agent_config(), 3).unwrap();
        let env = cfg.env_config();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let behaviour = rollout_returns(&env, 4, 3, |obs, _| Ok(to_action(&agent.act(obs, 0, true, &mut rng)?))).unwrap();
        let random = random_policy_returns(&env, 4, 3, 8).unwrap();
        assert_eq!(behaviour, random);
    }
}
