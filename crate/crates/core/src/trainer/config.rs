//! Flat `key=value` training configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors. Step
//! counts are agent decisions unless the key says `env_steps`; one decision
//! spans `action_repeat` environment steps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::agent::{AgentConfig, ExplorationSchedule};
use crate::discriminator::{DiscriminatorConfig, CLAMP_EPS};
use crate::env::{EnvConfig, GoalMode};
use crate::error::{Error, Result};
use crate::nets::{format_layers, ArchSpec};
use crate::reward::{RewardConfig, Variant};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub total_env_steps: u64,
    pub eval_every_env_steps: u64,
    pub eval_episodes: usize,
    pub demo_path: PathBuf,
    pub out_dir: PathBuf,

    pub image_size: usize,
    pub frame_stack: usize,
    pub action_repeat: usize,
    pub episode_len: usize,
    pub goal: GoalMode,

    pub lr: f64,
    pub gamma: f64,
    pub nstep: usize,
    pub batch_size: usize,
    pub update_every: u64,
    pub tau: f64,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub exploration_steps: u64,
    pub schedule: ExplorationSchedule,
    pub target_noise_clip: f64,
    pub gp_coef: f64,
    pub stats_refresh: u64,
    pub stats_samples: usize,
    pub buffer_size: usize,
    pub aug_pad: usize,
    /// Discriminator updates per agent update.
    pub disc_updates: usize,

    pub arch: ArchSpec,
    pub encoder: ArchSpec,
    pub reward: RewardConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::for_variant(Variant::Plain)
    }
}

const KEYS: &[&str] = &[
    "seed",
    "total_env_steps",
    "eval_every_env_steps",
    "eval_episodes",
    "demo_path",
    "out_dir",
    "image_size",
    "frame_stack",
    "action_repeat",
    "episode_len",
    "goal",
    "lr",
    "gamma",
    "nstep",
    "batch_size",
    "update_every",
    "tau",
    "feature_dim",
    "hidden_dim",
    "exploration_steps",
    "schedule",
    "target_noise_clip",
    "gp_coef",
    "stats_refresh",
    "stats_samples",
    "buffer_size",
    "aug_pad",
    "disc_updates",
    "arch",
    "encoder",
    "reward.transform",
    "reward.aggregator",
    "reward.variant",
    "reward.lambda",
    "reward.lambda_decay",
    "reward.scale",
];

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn parse_goal(v: &str) -> Result<GoalMode> {
    if v == "random" {
        return Ok(GoalMode::Random);
    }
    let bad = || Error::Config(format!("goal must be `random` or `x,y`, got `{v}`"));
    let (x, y) = v.split_once(',').ok_or_else(bad)?;
    Ok(GoalMode::Fixed(
        x.trim().parse().map_err(|_| bad())?,
        y.trim().parse().map_err(|_| bad())?,
    ))
}

fn split_line(line: &str) -> Result<Option<(&str, &str)>> {
    let line = line.split('#').next().unwrap_or("").trim();
    if line.is_empty() {
        return Ok(None);
    }
    let (k, v) = line
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected key=value, got `{line}`")))?;
    Ok(Some((k.trim(), v.trim())))
}

impl TrainConfig {
    /// Reference hyperparameters; the variant picks λ, reward scale and buffer
    /// size.
    pub fn for_variant(variant: Variant) -> Self {
        let buffer_size = match variant {
            Variant::Plain => 150_000,
            _ => 1_000_000,
        };
        TrainConfig {
            seed: 1,
            total_env_steps: 1_000_000,
            eval_every_env_steps: 20_000,
            eval_episodes: 10,
            demo_path: PathBuf::from("demos.pail"),
            out_dir: PathBuf::from("runs/default"),
            image_size: 84,
            frame_stack: 3,
            action_repeat: 2,
            episode_len: 250,
            goal: GoalMode::Random,
            lr: 1e-4,
            gamma: 0.99,
            nstep: 3,
            batch_size: 256,
            update_every: 2,
            tau: 0.01,
            feature_dim: 50,
            hidden_dim: 1024,
            exploration_steps: 2000,
            schedule: ExplorationSchedule::default(),
            target_noise_clip: 0.3,
            gp_coef: 10.0,
            stats_refresh: 20_000,
            stats_samples: 256,
            buffer_size,
            aug_pad: 4,
            disc_updates: 1,
            arch: ArchSpec::dmc_discriminator(),
            encoder: ArchSpec::encoder(),
            reward: RewardConfig::for_variant(variant),
        }
    }

    /// Desk-scale profile for the point-mass benchmark: weighted variant,
    /// 16-pixel frames, one off-centre goal, narrow networks, a larger
    /// learning rate and horizons shrunk to a 30k-step run.
    pub fn smoke() -> Self {
        let c = |k, ch, s, p| crate::tensor::ConvSpec::new(k, ch, s, p).expect("valid layer");
        TrainConfig {
            total_env_steps: 30_000,
            eval_every_env_steps: 2_000,
            eval_episodes: 5,
            demo_path: PathBuf::from("demos/smoke.pail"),
            out_dir: PathBuf::from("runs/smoke"),
            image_size: 16,
            goal: GoalMode::Fixed(0.75, 0.25),
            lr: 1e-3,
            batch_size: 32,
            hidden_dim: 128,
            schedule: ExplorationSchedule {
                start: 1.0,
                end: 0.1,
                horizon: 10_000,
            },
            stats_refresh: 1_000,
            stats_samples: 32,
            buffer_size: 50_000,
            aug_pad: 1,
            arch: ArchSpec::fcn(vec![c(4, 8, 2, 1), c(3, 16, 1, 1), c(3, 1, 1, 1)]),
            encoder: ArchSpec::encoder_from(vec![c(3, 16, 2, 0), c(3, 16, 1, 0)]),
            ..TrainConfig::for_variant(Variant::Weight)
        }
    }

    /// Applies `key=value` pairs on top of `base`. A `reward.variant` entry
    /// is applied first and resets λ, reward scale and buffer size to that
    /// variant's defaults unless they are also given.
    pub fn apply<'a>(mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let pairs: Vec<(&str, &str)> = pairs.into_iter().collect();
        if let Some((_, v)) = pairs.iter().rev().find(|(k, _)| *k == "reward.variant") {
            let variant: Variant = v.parse()?;
            if variant != self.reward.variant {
                let d = TrainConfig::for_variant(variant);
                self.reward.variant = variant;
                self.reward.lambda = d.reward.lambda;
                self.reward.scale = d.reward.scale;
                self.buffer_size = d.buffer_size;
            }
        }
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "total_env_steps" => self.total_env_steps = parse(key, v)?,
            "eval_every_env_steps" => self.eval_every_env_steps = parse(key, v)?,
            "eval_episodes" => self.eval_episodes = parse(key, v)?,
            "demo_path" => self.demo_path = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "image_size" => self.image_size = parse(key, v)?,
            "frame_stack" => self.frame_stack = parse(key, v)?,
            "action_repeat" => self.action_repeat = parse(key, v)?,
            "episode_len" => self.episode_len = parse(key, v)?,
            "goal" => self.goal = parse_goal(v)?,
            "lr" => self.lr = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "nstep" => self.nstep = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "update_every" => self.update_every = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "feature_dim" => self.feature_dim = parse(key, v)?,
            "hidden_dim" => self.hidden_dim = parse(key, v)?,
            "exploration_steps" => self.exploration_steps = parse(key, v)?,
            "schedule" => self.schedule = ExplorationSchedule::parse(v)?,
            "target_noise_clip" => self.target_noise_clip = parse(key, v)?,
            "gp_coef" => self.gp_coef = parse(key, v)?,
            "stats_refresh" => self.stats_refresh = parse(key, v)?,
            "stats_samples" => self.stats_samples = parse(key, v)?,
            "buffer_size" => self.buffer_size = parse(key, v)?,
            "aug_pad" => self.aug_pad = parse(key, v)?,
            "disc_updates" => self.disc_updates = parse(key, v)?,
            "arch" => self.arch = ArchSpec::fcn(ArchSpec::parse_layers(v)?),
            "encoder" => self.encoder = ArchSpec::encoder_from(ArchSpec::parse_layers(v)?),
            "reward.transform" => self.reward.transform = v.parse()?,
            "reward.aggregator" => self.reward.aggregator = v.parse()?,
            "reward.variant" => self.reward.variant = v.parse()?,
            "reward.lambda" => self.reward.lambda = parse(key, v)?,
            "reward.lambda_decay" => self.reward.lambda_decay = parse(key, v)?,
            "reward.scale" => self.reward.scale = parse(key, v)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown key `{other}`; known keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        TrainConfig::parse_with_base(TrainConfig::default(), text)
    }

    pub fn parse_with_base(base: TrainConfig, text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for line in text.lines() {
            if let Some(kv) = split_line(line)? {
                pairs.push(kv);
            }
        }
        base.apply(pairs)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        TrainConfig::parse_str(&std::fs::read_to_string(path)?)
    }

    /// Every key, one per line; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let goal = match self.goal {
            GoalMode::Random => "random".to_string(),
            GoalMode::Fixed(x, y) => format!("{x},{y}"),
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("seed", self.seed.to_string());
        kv("total_env_steps", self.total_env_steps.to_string());
        kv("eval_every_env_steps", self.eval_every_env_steps.to_string());
        kv("eval_episodes", self.eval_episodes.to_string());
        kv("demo_path", self.demo_path.display().to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv("image_size", self.image_size.to_string());
        kv("frame_stack", self.frame_stack.to_string());
        kv("action_repeat", self.action_repeat.to_string());
        kv("episode_len", self.episode_len.to_string());
        kv("goal", goal);
        kv("lr", self.lr.to_string());
        kv("gamma", self.gamma.to_string());
        kv("nstep", self.nstep.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("update_every", self.update_every.to_string());
        kv("tau", self.tau.to_string());
        kv("feature_dim", self.feature_dim.to_string());
        kv("hidden_dim", self.hidden_dim.to_string());
        kv("exploration_steps", self.exploration_steps.to_string());
        kv("schedule", self.schedule.to_string());
        kv("target_noise_clip", self.target_noise_clip.to_string());
        kv("gp_coef", self.gp_coef.to_string());
        kv("stats_refresh", self.stats_refresh.to_string());
        kv("stats_samples", self.stats_samples.to_string());
        kv("buffer_size", self.buffer_size.to_string());
        kv("aug_pad", self.aug_pad.to_string());
        kv("disc_updates", self.disc_updates.to_string());
        kv("arch", format_layers(&self.arch.layers));
        kv("encoder", format_layers(&self.encoder.layers));
        kv("reward.transform", self.reward.transform.to_string());
        kv("reward.aggregator", self.reward.aggregator.to_string());
        kv("reward.variant", self.reward.variant.to_string());
        kv("reward.lambda", self.reward.lambda.to_string());
        kv("reward.lambda_decay", self.reward.lambda_decay.to_string());
        kv("reward.scale", self.reward.scale.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("eval_every_env_steps", self.eval_every_env_steps as f64),
            ("eval_episodes", self.eval_episodes as f64),
            ("nstep", self.nstep as f64),
            ("batch_size", self.batch_size as f64),
            ("update_every", self.update_every as f64),
            ("feature_dim", self.feature_dim as f64),
            ("hidden_dim", self.hidden_dim as f64),
            ("stats_refresh", self.stats_refresh as f64),
            ("stats_samples", self.stats_samples as f64),
            ("buffer_size", self.buffer_size as f64),
            ("disc_updates", self.disc_updates as f64),
            ("lr", self.lr),
            ("tau", self.tau),
        ];
        for (k, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("`{k}` must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) || self.tau > 1.0 {
            return Err(Error::Config("gamma and tau must lie in [0, 1]".into()));
        }
        if !(self.gp_coef >= 0.0) || !(self.target_noise_clip >= 0.0) {
            return Err(Error::Config("gp_coef and target_noise_clip must be non-negative".into()));
        }
        if self.image_size <= 2 * self.aug_pad {
            return Err(Error::Config(format!(
                "image_size {} is too small for aug_pad {}",
                self.image_size, self.aug_pad
            )));
        }
        self.env_config().validate()?;
        self.reward.validate()?;
        let hw = (self.image_size, self.image_size);
        self.arch.geometry(hw)?;
        if self.arch.out_channels() != 1 {
            return Err(Error::Config("the discriminator's last layer must have one channel".into()));
        }
        self.encoder.geometry(hw)?;
        Ok(())
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            image_size: self.image_size,
            frame_stack: self.frame_stack,
            action_repeat: self.action_repeat,
            episode_len: self.episode_len,
            goal: self.goal,
            ..EnvConfig::default()
        }
    }

    pub fn disc_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            arch: self.arch.clone(),
            frame_stack: self.frame_stack,
            image_size: self.image_size,
            lr: self.lr,
            gp_coef: self.gp_coef,
            clamp_eps: CLAMP_EPS,
            ..DiscriminatorConfig::default()
        }
    }

    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            encoder: self.encoder.clone(),
            frame_stack: self.frame_stack,
            image_size: self.image_size,
            action_dim: crate::env::ACTION_DIM,
            feature_dim: self.feature_dim,
            hidden_dim: self.hidden_dim,
            lr: self.lr,
            gamma: self.gamma,
            nstep: self.nstep,
            tau: self.tau,
            exploration_steps: self.exploration_steps,
            schedule: self.schedule,
            target_noise_clip: self.target_noise_clip,
        }
    }

    /// Agent decisions in the whole run.
    pub fn total_decisions(&self) -> u64 {
        self.total_env_steps.div_ceil(self.action_repeat as u64)
    }

    pub fn eval_every_decisions(&self) -> u64 {
        (self.eval_every_env_steps / self.action_repeat as u64).max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::Aggregator;

    #[test]
    fn reference_defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.gamma, c.nstep, c.frame_stack, c.action_repeat), (1e-4, 0.99, 3, 3, 2));
        assert_eq!((c.batch_size, c.update_every, c.tau), (256, 2, 0.01));
        assert_eq!((c.feature_dim, c.hidden_dim, c.exploration_steps), (50, 1024, 2000));
        assert_eq!(c.schedule.to_string(), "linear(1,0.1,500000)");
        assert_eq!((c.gp_coef, c.stats_refresh, c.buffer_size), (10.0, 20_000, 150_000));
        let w = TrainConfig::for_variant(Variant::Weight);
        assert_eq!((w.reward.lambda, w.reward.scale, w.buffer_size), (1.3, 1.0, 1_000_000));
        let b = TrainConfig::for_variant(Variant::Bonus);
        assert_eq!((b.reward.lambda, b.reward.scale, b.buffer_size), (0.5, 0.5, 1_000_000));
        c.validate().unwrap();
        TrainConfig::smoke().validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        for c in [TrainConfig::default(), TrainConfig::smoke()] {
            assert_eq!(TrainConfig::parse_str(&c.to_text()).unwrap(), c);
        }
        let mut c = TrainConfig::smoke();
        c.goal = GoalMode::Fixed(0.25, 0.75);
        assert_eq!(TrainConfig::parse_str(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn overrides_and_variant_defaults() {
        let c = TrainConfig::parse_str("# comment\nreward.variant = bonus\nseed=7 # trailing\n").unwrap();
        assert_eq!((c.seed, c.reward.lambda, c.reward.scale), (7, 0.5, 0.5));
        let c = TrainConfig::default()
            .apply([("reward.scale", "2"), ("reward.variant", "weight"), ("reward.aggregator", "max")])
            .unwrap();
        assert_eq!((c.reward.scale, c.reward.lambda), (2.0, 1.3));
        assert_eq!(c.reward.aggregator, Aggregator::Max);
    }

    #[test]
    fn bad_input_is_rejected() {
        assert!(TrainConfig::parse_str("learning_rate=1").is_err());
        assert!(TrainConfig::parse_str("lr=fast").is_err());
        assert!(TrainConfig::parse_str("lr").is_err());
        assert!(TrainConfig::parse_str("batch_size=0").is_err());
        assert!(TrainConfig::parse_str("arch=[(4,8,2,1)]").is_err());
        assert!(TrainConfig::parse_str("arch=[(99,1,1,0)]").is_err());
        assert!(TrainConfig::parse_str("goal=2,2").is_err());
    }
}

#[cfg(test)]
mod smoke_file {
    use super::*;

    #[test]
    fn shipped_smoke_config_matches_profile() {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.cfg");
        assert_eq!(TrainConfig::load(path).unwrap(), TrainConfig::smoke());
    }
}
