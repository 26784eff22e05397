//! Image encoder and the actor/critic heads that sit on top of it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{LayerNorm, Linear};
use super::module::Module;
use super::{build_network, ArchSpec, ConvNet};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Conv feature extractor for stacked observations; emits flattened
/// features. Observations in `[0, 1]` are centred to `[-0.5, 0.5]` first.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub net: ConvNet,
}

impl Encoder {
    pub fn new(spec: &ArchSpec, stack: usize, image: usize, seed: u64) -> Result<Self> {
        Ok(Encoder {
            net: build_network(spec, stack, (image, image), seed)?,
        })
    }

    /// Flattened feature length.
    pub fn repr_dim(&self) -> usize {
        let (h, w) = self.net.output_hw();
        h * w * self.net.spec.out_channels()
    }

    pub fn features(&self, tape: &mut Tape, vars: &[Var], obs: Var) -> Result<Var> {
        let x = tape.add_scalar(obs, -0.5);
        let y = self.net.forward(tape, vars, x)?;
        tape.flatten(y)
    }
}

impl Module for Encoder {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.net.named_params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.net.params_mut()
    }
}

/// Linear → LayerNorm → tanh projection to the feature dimension.
#[derive(Clone, Debug)]
pub struct Trunk {
    pub linear: Linear,
    pub norm: LayerNorm,
}

impl Trunk {
    const PARAMS: usize = 4;

    pub fn new(input: usize, feature_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Trunk {
            linear: Linear::new(input, feature_dim, rng),
            norm: LayerNorm::new(feature_dim),
        }
    }

    fn forward(&self, tape: &mut Tape, v: &[Var], h: Var) -> Result<Var> {
        let z = tape.linear(h, v[0], v[1])?;
        let z = tape.layer_norm(z, v[2], v[3], LayerNorm::EPS)?;
        Ok(tape.tanh(z))
    }

    fn named(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("trunk.weight".into(), &self.linear.weight),
            ("trunk.bias".into(), &self.linear.bias),
            ("trunk.ln.gamma".into(), &self.norm.gamma),
            ("trunk.ln.beta".into(), &self.norm.beta),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.linear.weight,
            &mut self.linear.bias,
            &mut self.norm.gamma,
            &mut self.norm.beta,
        ]
    }
}

/// Linear layers with ReLU in between and nothing after the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(sizes: &[usize], rng: &mut ChaCha8Rng) -> Self {
        Mlp {
            layers: sizes.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, v: &[Var], mut h: Var) -> Result<Var> {
        for i in 0..self.layers.len() {
            h = tape.linear(h, v[2 * i], v[2 * i + 1])?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    fn named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}{i}.weight"), &l.weight));
            out.push((format!("{prefix}{i}.bias"), &l.bias));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// Deterministic policy: trunk → MLP → tanh.
#[derive(Clone, Debug)]
pub struct Actor {
    pub trunk: Trunk,
    pub policy: Mlp,
    pub action_dim: usize,
}

impl Actor {
    pub fn new(repr_dim: usize, feature_dim: usize, hidden: usize, action_dim: usize, seed: u64) -> Result<Self> {
        if action_dim == 0 {
            return Err(Error::Spec("action dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Actor {
            trunk: Trunk::new(repr_dim, feature_dim, &mut rng),
            policy: Mlp::new(&[feature_dim, hidden, hidden, action_dim], &mut rng),
            action_dim,
        })
    }

    /// Actions in `[-1, 1]`, shape `[N, action_dim]`.
    pub fn forward(&self, tape: &mut Tape, v: &[Var], h: Var) -> Result<Var> {
        let z = self.trunk.forward(tape, &v[..Trunk::PARAMS], h)?;
        let a = self.policy.forward(tape, &v[Trunk::PARAMS..], z)?;
        Ok(tape.tanh(a))
    }
}

impl Module for Actor {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.trunk.named();
        out.extend(self.policy.named("policy"));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.trunk.params_mut();
        out.extend(self.policy.params_mut());
        out
    }
}

/// Q(h, a): trunk on the features, action appended, MLP to a scalar.
#[derive(Clone, Debug)]
pub struct Critic {
    pub trunk: Trunk,
    pub q: Mlp,
}

impl Critic {
    pub fn new(repr_dim: usize, feature_dim: usize, hidden: usize, action_dim: usize, seed: u64) -> Result<Self> {
        if action_dim == 0 {
            return Err(Error::Spec("action dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Critic {
            trunk: Trunk::new(repr_dim, feature_dim, &mut rng),
            q: Mlp::new(&[feature_dim + action_dim, hidden, hidden, 1], &mut rng),
        })
    }

    /// Shape `[N, 1]`.
    pub fn forward(&self, tape: &mut Tape, v: &[Var], h: Var, action: Var) -> Result<Var> {
        let z = self.trunk.forward(tape, &v[..Trunk::PARAMS], h)?;
        let za = tape.concat(&[z, action])?;
        self.q.forward(tape, &v[Trunk::PARAMS..], za)
    }
}

impl Module for Critic {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.trunk.named();
        out.extend(self.q.named("q"));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.trunk.params_mut();
        out.extend(self.q.params_mut());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::uniform_tensor;

    #[test]
    fn reference_encoder_gives_39200_features() {
        let enc = Encoder::new(&ArchSpec::encoder(), 3, 84, 0).unwrap();
        assert_eq!(enc.net.output_hw(), (35, 35));
        assert_eq!(enc.repr_dim(), 39200);
        let mut t = Tape::inference();
        let x = t.constant(&Tensor::full(&[1, 3, 84, 84], 0.5));
        let v = enc.bind(&mut t, false);
        let f = enc.features(&mut t, &v, x).unwrap();
        assert_eq!(t.shape(f), &[1, 39200]);
        let bad = t.constant(&Tensor::full(&[1, 3, 64, 64], 0.5));
        assert!(enc.features(&mut t, &v, bad).is_err());
    }

    #[test]
    fn actor_is_bounded_and_critic_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let actor = Actor::new(12, 6, 16, 2, 1).unwrap();
        let critic = Critic::new(12, 6, 16, 2, 2).unwrap();
        let h = uniform_tensor(&mut rng, &[7, 12], -50.0, 50.0);
        let a = uniform_tensor(&mut rng, &[7, 2], -1.0, 1.0);
        let mut t = Tape::inference();
        let hv = t.constant(&h);
        let av = t.constant(&a);
        let va = actor.bind(&mut t, false);
        let out = actor.forward(&mut t, &va, hv).unwrap();
        assert!(t.value(out).iter().all(|v| (-1.0..=1.0).contains(v)));
        let vc = critic.bind(&mut t, false);
        let q = critic.forward(&mut t, &vc, hv, av).unwrap();
        assert_eq!(t.shape(q), &[7, 1]);
        assert!(Actor::new(12, 6, 16, 0, 1).is_err());
    }

    #[test]
    fn differently_seeded_critics_disagree() {
        let c1 = Critic::new(8, 4, 8, 2, 10).unwrap();
        let c2 = Critic::new(8, 4, 8, 2, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = uniform_tensor(&mut rng, &[4, 8], -1.0, 1.0);
        let a = uniform_tensor(&mut rng, &[4, 2], -1.0, 1.0);
        let q = |c: &Critic| {
            let mut t = Tape::inference();
            let (hv, av) = (t.constant(&h), t.constant(&a));
            let v = c.bind(&mut t, false);
            let q = c.forward(&mut t, &v, hv, av).unwrap();
            t.value(q).to_vec()
        };
        assert_ne!(q(&c1), q(&c2));
    }
}
