//! From patch scores to scalar rewards: per-cell transform, aggregation,
//! patch-distribution similarity and the weighted/bonus compositions.

use std::fmt;
use std::str::FromStr;

use crate::discriminator::ExpertStats;
use crate::error::{Error, Result};
use crate::tensor::tape::{reduce, sigmoid, softmax_in_place};
use crate::tensor::Reduction;

/// Floor applied to normalized patch masses before taking ratios.
pub const MASS_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    /// `log D`
    LogD,
    /// `−log(1 − D)`
    NegLog1mD,
    /// `log D − log(1 − D)`
    Airl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregator {
    Mean,
    Max,
    Min,
    Median,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Plain,
    /// Similarity as a multiplier on the aggregated reward.
    Weight,
    /// Similarity as an additive bonus.
    Bonus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distance {
    Kl,
}

macro_rules! keyword_enum {
    ($ty:ident, $what:literal, $($variant:ident => $name:literal),+ $(,)?) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self {
                    $($ty::$variant => $name),+
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", $what, " `{}` (expected one of: {})"),
                        other,
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }
    };
}

keyword_enum!(Transform, "reward transform", LogD => "logd", NegLog1mD => "neg_log1md", Airl => "airl");
keyword_enum!(Aggregator, "aggregator", Mean => "mean", Max => "max", Min => "min", Median => "median");
keyword_enum!(Variant, "reward variant", Plain => "plain", Weight => "weight", Bonus => "bonus");
keyword_enum!(Distance, "distance", Kl => "kl");

impl Aggregator {
    pub fn reduction(self) -> Reduction {
        match self {
            Aggregator::Mean => Reduction::Mean,
            Aggregator::Max => Reduction::Max,
            Aggregator::Min => Reduction::Min,
            Aggregator::Median => Reduction::Median,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardConfig {
    pub transform: Transform,
    pub aggregator: Aggregator,
    pub variant: Variant,
    pub lambda: f64,
    /// Per-step decrement of λ; zero keeps it constant.
    pub lambda_decay: f64,
    pub distance: Distance,
    pub scale: f64,
    pub clamp_eps: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig::for_variant(Variant::Plain)
    }
}

impl RewardConfig {
    /// AIRL transform and mean aggregation with the variant's default λ and
    /// scale.
    pub fn for_variant(variant: Variant) -> Self {
        let (lambda, scale) = match variant {
            Variant::Bonus => (0.5, 0.5),
            _ => (1.3, 1.0),
        };
        RewardConfig {
            transform: Transform::Airl,
            aggregator: Aggregator::Mean,
            variant,
            lambda,
            lambda_decay: 0.0,
            distance: Distance::Kl,
            scale,
            clamp_eps: crate::discriminator::CLAMP_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!("reward.lambda must be positive, got {}", self.lambda)));
        }
        if !(self.scale > 0.0) {
            return Err(Error::Config(format!("reward.scale must be positive, got {}", self.scale)));
        }
        if !(self.lambda_decay >= 0.0) {
            return Err(Error::Config("reward.lambda_decay must be non-negative".into()));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return Err(Error::Config("reward.clamp_eps must lie in (0, 0.5)".into()));
        }
        Ok(())
    }

    /// λ after `step` decay steps, floored at zero.
    pub fn lambda_at(&self, step: u64) -> f64 {
        (self.lambda - self.lambda_decay * step as f64).max(0.0)
    }
}

/// Elementwise reward from clamped probabilities.
pub fn transform(probs: &[f64], kind: Transform) -> Vec<f64> {
    probs
        .iter()
        .map(|&d| match kind {
            Transform::LogD => d.ln(),
            Transform::NegLog1mD => -(1.0 - d).ln(),
            Transform::Airl => d.ln() - (1.0 - d).ln(),
        })
        .collect()
}

pub fn aggregate(rewards: &[f64], aggregator: Aggregator) -> f64 {
    reduce(rewards, aggregator.reduction())
}

/// Softmax over the flattened grid.
pub fn normalize(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

/// `KL(p ‖ q)` with both masses floored at [`MASS_FLOOR`].
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let a = a.max(MASS_FLOOR);
            a * (a / b.max(MASS_FLOOR)).ln()
        })
        .sum::<f64>()
        .max(0.0)
}

/// `exp(−KL(Δ(agent) ‖ Δ(mean expert logits)))`.
pub fn sim_bar(agent_logits: &[f64], stats: &ExpertStats) -> Result<f64> {
    let mean = stats.mean_logits.data();
    if agent_logits.len() != mean.len() {
        return Err(Error::shape(
            "sim_bar",
            format!("{} agent cells vs {} expert cells", agent_logits.len(), mean.len()),
        ));
    }
    Ok((-kl(&normalize(agent_logits), &normalize(mean))).exp())
}

/// `exp(−min_i KL(Δ(agent) ‖ Δ(expert_i)))` over every expert member.
pub fn sim_raw<'a>(agent_logits: &[f64], experts: impl IntoIterator<Item = &'a [f64]>) -> Result<f64> {
    let p = normalize(agent_logits);
    let mut best: Option<f64> = None;
    for e in experts {
        if e.len() != p.len() {
            return Err(Error::shape(
                "sim_raw",
                format!("{} agent cells vs {} expert cells", p.len(), e.len()),
            ));
        }
        let d = kl(&p, &normalize(e));
        best = Some(best.map_or(d, |b: f64| b.min(d)));
    }
    best.map(|d| (-d).exp())
        .ok_or_else(|| Error::Insufficient("sim_raw needs at least one expert member".into()))
}

/// Parts of one composed reward.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardParts {
    pub reward: f64,
    /// Aggregated transformed patch rewards.
    pub aggregate: f64,
    /// Similarity, or `None` for the plain variant.
    pub similarity: Option<f64>,
}

/// Scalar reward of one pair from its patch logits.
pub fn compose_reward(
    logits: &[f64],
    config: &RewardConfig,
    stats: Option<&ExpertStats>,
    step: u64,
) -> Result<RewardParts> {
    let eps = config.clamp_eps;
    let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z).clamp(eps, 1.0 - eps)).collect();
    let aggr = aggregate(&transform(&probs, config.transform), config.aggregator);
    let (reward, similarity) = match config.variant {
        Variant::Plain => (config.scale * aggr, None),
        Variant::Weight | Variant::Bonus => {
            let stats = stats.ok_or_else(|| {
                Error::Insufficient(format!(
                    "the {} variant needs expert statistics; none were computed",
                    config.variant
                ))
            })?;
            let sim = sim_bar(logits, stats)?;
            let lambda = config.lambda_at(step);
            let r = if config.variant == Variant::Weight {
                config.scale * lambda * sim * aggr
            } else {
                config.scale * (lambda * sim + aggr)
            };
            (r, Some(sim))
        }
    };
    Ok(RewardParts {
        reward,
        aggregate: aggr,
        similarity,
    })
}
