//! Off-policy pixel actor-critic: deterministic actor, twin critics with
//! soft-updated targets, n-step bootstrapping and scheduled Gaussian
//! exploration.

pub mod augment;
pub mod replay;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nets::heads::{Actor, Critic, Encoder};
use crate::nets::module::Module;
use crate::nets::ArchSpec;
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{Adam, AdamConfig, Tape, Tensor, Var};

pub use augment::{random_shift, shift_with_offsets};
pub use replay::{nstep_target, ReplayBuffer, Window};

/// Linear interpolation from `start` to `end` over `horizon` steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExplorationSchedule {
    pub start: f64,
    pub end: f64,
    pub horizon: u64,
}

impl Default for ExplorationSchedule {
    fn default() -> Self {
        ExplorationSchedule {
            start: 1.0,
            end: 0.1,
            horizon: 500_000,
        }
    }
}

impl ExplorationSchedule {
    pub fn value(&self, step: u64) -> f64 {
        if self.horizon == 0 || step >= self.horizon {
            return self.end;
        }
        let mix = step as f64 / self.horizon as f64;
        (1.0 - mix) * self.start + mix * self.end
    }

    /// Parses `linear(start,end,horizon)`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("expected linear(start,end,horizon), got `{s}`"));
        let inner = s
            .trim()
            .strip_prefix("linear(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(bad)?;
        let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let start: f64 = parts[0].parse().map_err(|_| bad())?;
        let end: f64 = parts[1].parse().map_err(|_| bad())?;
        let horizon: u64 = parts[2].parse().map_err(|_| bad())?;
        if !(start >= 0.0 && end >= 0.0) {
            return Err(Error::Config("exploration noise must be non-negative".into()));
        }
        Ok(ExplorationSchedule { start, end, horizon })
    }
}

impl std::fmt::Display for ExplorationSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "linear({},{},{})", self.start, self.end, self.horizon)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentConfig {
    pub encoder: ArchSpec,
    pub frame_stack: usize,
    pub image_size: usize,
    pub action_dim: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub lr: f64,
    pub gamma: f64,
    pub nstep: usize,
    pub tau: f64,
    pub exploration_steps: u64,
    pub schedule: ExplorationSchedule,
    /// Clip on the smoothing noise added to target actions.
    pub target_noise_clip: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            encoder: ArchSpec::encoder(),
            frame_stack: 3,
            image_size: 84,
            action_dim: 2,
            feature_dim: 50,
            hidden_dim: 1024,
            lr: 1e-4,
            gamma: 0.99,
            nstep: 3,
            tau: 0.01,
            exploration_steps: 2000,
            schedule: ExplorationSchedule::default(),
            target_noise_clip: 0.3,
        }
    }
}

/// Augmented critic inputs with relabelled n-step returns.
#[derive(Clone, Debug)]
pub struct CriticBatch {
    /// `[B, stack, H, W]`.
    pub obs: Tensor,
    /// `[B, action_dim]`.
    pub action: Tensor,
    pub reward: Vec<f64>,
    /// `γ^n·(1 − done)` per sample.
    pub mask: Vec<f64>,
    pub next_obs: Tensor,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AgentUpdate {
    pub critic_loss: f64,
    pub actor_loss: f64,
}

#[derive(Clone, Debug)]
pub struct Agent {
    pub config: AgentConfig,
    pub encoder: Encoder,
    pub actor: Actor,
    pub critic1: Critic,
    pub critic2: Critic,
    pub target1: Critic,
    pub target2: Critic,
    opt_encoder: Adam,
    opt_actor: Adam,
    opt_critic1: Adam,
    opt_critic2: Adam,
}

fn adam<M: Module>(lr: f64, m: &M) -> Adam {
    Adam::new(
        AdamConfig {
            lr,
            ..AdamConfig::default()
        },
        m.params(),
    )
}

fn mse(tape: &mut Tape, q: Var, y: Var) -> Result<Var> {
    let d = tape.sub(q, y)?;
    let d = tape.square(d);
    Ok(tape.mean(d))
}

impl Agent {
    /// Networks seeded from `seed`, targets copied from the online critics.
    pub fn new(config: AgentConfig, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&config.tau) || !(0.0..=1.0).contains(&config.gamma) || config.nstep == 0 {
            return Err(Error::Config("tau and gamma must lie in [0, 1] and nstep be positive".into()));
        }
        let encoder = Encoder::new(&config.encoder, config.frame_stack, config.image_size, seed)?;
        let repr = encoder.repr_dim();
        let (f, h, a) = (config.feature_dim, config.hidden_dim, config.action_dim);
        let actor = Actor::new(repr, f, h, a, seed.wrapping_add(1))?;
        let critic1 = Critic::new(repr, f, h, a, seed.wrapping_add(2))?;
        let critic2 = Critic::new(repr, f, h, a, seed.wrapping_add(3))?;
        let lr = config.lr;
        Ok(Agent {
            opt_encoder: adam(lr, &encoder),
            opt_actor: adam(lr, &actor),
            opt_critic1: adam(lr, &critic1),
            opt_critic2: adam(lr, &critic2),
            target1: critic1.clone(),
            target2: critic2.clone(),
            config,
            encoder,
            actor,
            critic1,
            critic2,
        })
    }

    /// Encoder features without gradient tracking.
    pub fn features(&self, obs: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let x = tape.constant(obs);
        let v = self.encoder.bind(&mut tape, false);
        let h = self.encoder.features(&mut tape, &v, x)?;
        Ok(tape.tensor(h))
    }

    /// Deterministic actions for a batch of features.
    pub fn policy(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let h = tape.constant(features);
        let v = self.actor.bind(&mut tape, false);
        let a = self.actor.forward(&mut tape, &v, h)?;
        Ok(tape.tensor(a))
    }

    /// Action for one stacked observation `[stack, H, W]`. While exploring,
    /// the first `exploration_steps` are uniform and later ones add
    /// scheduled Gaussian noise.
    pub fn act<R: Rng>(&self, obs: &Tensor, step: u64, explore: bool, rng: &mut R) -> Result<Vec<f64>> {
        let a_dim = self.config.action_dim;
        if explore && step < self.config.exploration_steps {
            return Ok((0..a_dim).map(|_| rng.gen_range(-1.0..=1.0)).collect());
        }
        let mut shape = vec![1];
        shape.extend_from_slice(obs.shape());
        let batch = Tensor::new(shape, obs.data().to_vec())?;
        let mut a = self.policy(&self.features(&batch)?)?.into_data();
        if explore {
            let sigma = self.config.schedule.value(step);
            if sigma > 0.0 {
                let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
                for v in a.iter_mut() {
                    *v = (*v + noise.sample(rng)).clamp(-1.0, 1.0);
                }
            }
        }
        Ok(a)
    }

    /// Twin target `r + mask·min(Q'_1, Q'_2)` at smoothed target actions.
    pub fn td_target<R: Rng>(&self, batch: &CriticBatch, step: u64, rng: &mut R) -> Result<Vec<f64>> {
        let h_next = self.features(&batch.next_obs)?;
        let mut a_next = self.policy(&h_next)?.into_data();
        let sigma = self.config.schedule.value(step);
        if sigma > 0.0 {
            let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
            let clip = self.config.target_noise_clip;
            for v in a_next.iter_mut() {
                *v = (*v + noise.sample(rng).clamp(-clip, clip)).clamp(-1.0, 1.0);
            }
        }
        let a_next = Tensor::new(vec![batch.reward.len(), self.config.action_dim], a_next)?;
        let q1 = q_values(&self.target1, &h_next, &a_next)?;
        let q2 = q_values(&self.target2, &h_next, &a_next)?;
        Ok((0..batch.reward.len())
            .map(|i| batch.reward[i] + batch.mask[i] * q1[i].min(q2[i]))
            .collect())
    }

    /// Critic loss against fixed targets, without updating.
    pub fn critic_loss(&self, batch: &CriticBatch, target: &[f64]) -> Result<f64> {
        let h = self.features(&batch.obs)?;
        let q1 = q_values(&self.critic1, &h, &batch.action)?;
        let q2 = q_values(&self.critic2, &h, &batch.action)?;
        let n = target.len() as f64;
        Ok(q1.iter().zip(target).map(|(q, y)| (q - y).powi(2)).sum::<f64>() / n
            + q2.iter().zip(target).map(|(q, y)| (q - y).powi(2)).sum::<f64>() / n)
    }

    /// One step on both critics and the encoder, then a soft target update.
    /// Returns the loss and the (detached) features of `batch.obs`.
    pub fn update_critic<R: Rng>(&mut self, batch: &CriticBatch, step: u64, rng: &mut R) -> Result<(f64, Tensor)> {
        let b = batch.reward.len();
        if batch.mask.len() != b || batch.obs.shape().first() != Some(&b) || batch.action.shape() != [b, self.config.action_dim] {
            return Err(Error::shape("update_critic", "batch fields disagree on size"));
        }
        let target = self.td_target(batch, step, rng)?;

        let mut tape = Tape::new();
        let obs = tape.constant(&batch.obs);
        let act = tape.constant(&batch.action);
        let y = tape.leaf(vec![b, 1], target, false)?;
        let ve = self.encoder.bind(&mut tape, true);
        let v1 = self.critic1.bind(&mut tape, true);
        let v2 = self.critic2.bind(&mut tape, true);
        let h = self.encoder.features(&mut tape, &ve, obs)?;
        let q1 = self.critic1.forward(&mut tape, &v1, h, act)?;
        let q2 = self.critic2.forward(&mut tape, &v2, h, act)?;
        let l1 = mse(&mut tape, q1, y)?;
        let l2 = mse(&mut tape, q2, y)?;
        let loss = tape.add(l1, l2)?;
        tape.backward(loss)?;
        let value = tape.item(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite {
                what: "critic loss".into(),
                step,
            });
        }
        let features = tape.tensor(h);

        for (m, v) in [(&mut self.critic1, &v1), (&mut self.critic2, &v2)] {
            m.zero_grad();
            m.accumulate(&tape, v)?;
        }
        self.encoder.zero_grad();
        self.encoder.accumulate(&tape, &ve)?;
        drop(tape);
        self.opt_encoder.step(self.encoder.params_mut())?;
        self.opt_critic1.step(self.critic1.params_mut())?;
        self.opt_critic2.step(self.critic2.params_mut())?;
        self.soft_update();
        Ok((value, features))
    }

    /// Deterministic policy gradient through critic 1 on detached features;
    /// critic and encoder parameters enter as constants.
    pub fn update_actor(&mut self, features: &Tensor, step: u64) -> Result<f64> {
        let mut tape = Tape::new();
        let h = tape.constant(features);
        let va = self.actor.bind(&mut tape, true);
        let vc = self.critic1.bind(&mut tape, false);
        let a = self.actor.forward(&mut tape, &va, h)?;
        let q = self.critic1.forward(&mut tape, &vc, h, a)?;
        let q = tape.mean(q);
        let loss = tape.neg(q);
        tape.backward(loss)?;
        let value = tape.item(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite {
                what: "actor loss".into(),
                step,
            });
        }
        debug_assert!(vc.iter().all(|&v| tape.grad(v).is_none()));
        self.actor.zero_grad();
        self.actor.accumulate(&tape, &va)?;
        drop(tape);
        self.opt_actor.step(self.actor.params_mut())?;
        Ok(value)
    }

    pub fn update<R: Rng>(&mut self, batch: &CriticBatch, step: u64, rng: &mut R) -> Result<AgentUpdate> {
        let (critic_loss, features) = self.update_critic(batch, step, rng)?;
        let actor_loss = self.update_actor(&features, step)?;
        Ok(AgentUpdate {
            critic_loss,
            actor_loss,
        })
    }

    pub fn soft_update(&mut self) {
        let tau = self.config.tau;
        self.target1.soft_update_from(&self.critic1, tau);
        self.target2.soft_update_from(&self.critic2, tau);
    }

    pub fn save_into(&self, ck: &mut Checkpoint) {
        self.encoder.save_into("encoder", ck);
        self.actor.save_into("actor", ck);
        self.critic1.save_into("critic1", ck);
        self.critic2.save_into("critic2", ck);
        self.target1.save_into("critic1_target", ck);
        self.target2.save_into("critic2_target", ck);
    }

    pub fn restore_from(&mut self, ck: &Checkpoint) -> Result<()> {
        self.encoder.restore_from("encoder", ck)?;
        self.actor.restore_from("actor", ck)?;
        self.critic1.restore_from("critic1", ck)?;
        self.critic2.restore_from("critic2", ck)?;
        self.target1.restore_from("critic1_target", ck)?;
        self.target2.restore_from("critic2_target", ck)
    }
}

/// `Q(h, a)` for a batch, shape `[B]`.
pub fn q_values(critic: &Critic, features: &Tensor, action: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::inference();
    let h = tape.constant(features);
    let a = tape.constant(action);
    let v = critic.bind(&mut tape, false);
    let q = critic.forward(&mut tape, &v, h, a)?;
    Ok(tape.value(q).to_vec())
}
