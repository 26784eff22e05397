//! Network architectures built from `[size, channels, stride, padding]`
//! layer lists, plus patch geometry.

pub mod geometry;
pub mod heads;
pub mod layers;
pub mod module;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use geometry::{patch_geometry, Footprint, PatchGeometry};
pub use heads::{Actor, Critic, Encoder, Mlp, Trunk};
pub use layers::{Conv2d, LayerNorm, Linear};
pub use module::Module;

use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu(a) => tape.leaky_relu(x, a),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpHead {
    pub hidden: Vec<usize>,
    pub output: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    pub layers: Vec<ConvSpec>,
    /// Applied after every conv layer except the last.
    pub hidden_activation: Activation,
    /// Applied to the network output.
    pub terminal_activation: Activation,
    pub mlp_head: Option<MlpHead>,
}

fn conv(k: usize, c: usize, s: usize, p: usize) -> ConvSpec {
    ConvSpec {
        kernel: k,
        out_channels: c,
        stride: s,
        padding: p,
    }
}

impl ArchSpec {
    /// A patch discriminator: LeakyReLU(0.2) between layers, sigmoid output,
    /// no MLP head.
    pub fn fcn(layers: Vec<ConvSpec>) -> Self {
        ArchSpec {
            layers,
            hidden_activation: Activation::LeakyRelu(0.2),
            terminal_activation: Activation::Sigmoid,
            mlp_head: None,
        }
    }

    /// Default control-suite discriminator: 39×39 patches on 84×84 input.
    pub fn dmc_discriminator() -> Self {
        ArchSpec::fcn(vec![conv(4, 32, 2, 1), conv(4, 64, 1, 1), conv(4, 128, 1, 1), conv(4, 1, 1, 1)])
    }

    /// Atari discriminator: 19×19 patches on 84×84 input.
    pub fn atari_discriminator() -> Self {
        ArchSpec::fcn(vec![conv(4, 32, 2, 1), conv(4, 64, 2, 1), conv(4, 128, 1, 1), conv(4, 1, 1, 1)])
    }

    /// The default discriminator with every kernel replaced by `k×k`.
    pub fn kernel_ablation(k: usize) -> Self {
        ArchSpec::fcn(vec![conv(k, 32, 2, 1), conv(k, 64, 1, 1), conv(k, 128, 1, 1), conv(k, 1, 1, 1)])
    }

    /// Four 1×1 layers: one patch per pixel.
    pub fn pixel_level() -> Self {
        ArchSpec::fcn(vec![conv(1, 32, 1, 0), conv(1, 64, 1, 0), conv(1, 128, 1, 0), conv(1, 1, 1, 0)])
    }

    /// Policy/critic image encoder: 35×35×32 features on 84×84 input.
    pub fn encoder() -> Self {
        ArchSpec::encoder_from(vec![conv(3, 32, 2, 0), conv(3, 32, 1, 0), conv(3, 32, 1, 0), conv(3, 32, 1, 0)])
    }

    /// ReLU after every layer, including the last.
    pub fn encoder_from(layers: Vec<ConvSpec>) -> Self {
        ArchSpec {
            layers,
            hidden_activation: Activation::Relu,
            terminal_activation: Activation::Relu,
            mlp_head: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Spec("architecture has no layers".into()));
        }
        for l in &self.layers {
            l.validate()?;
        }
        if let Some(h) = &self.mlp_head {
            if h.output == 0 || h.hidden.contains(&0) {
                return Err(Error::Spec("MLP head sizes must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn output_hw(&self, input: (usize, usize)) -> Result<(usize, usize)> {
        geometry::output_hw(&self.layers, input)
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    pub fn geometry(&self, input: (usize, usize)) -> Result<PatchGeometry> {
        self.validate()?;
        patch_geometry(&self.layers, input)
    }

    /// Parses `[(4,32,2,1),(4,64,1,1)]`; square brackets for the inner
    /// tuples work too.
    pub fn parse_layers(s: &str) -> Result<Vec<ConvSpec>> {
        let cleaned: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        let inner = cleaned
            .strip_prefix('[')
            .and_then(|r| r.strip_suffix(']'))
            .ok_or_else(|| Error::Spec(format!("layer list must be bracketed: `{s}`")))?;
        let mut layers = Vec::new();
        let mut rest = inner;
        while !rest.is_empty() {
            let open = rest.chars().next().unwrap();
            let close = match open {
                '(' => ')',
                '[' => ']',
                _ => return Err(Error::Spec(format!("expected a 4-tuple in `{s}`"))),
            };
            let end = rest
                .find(close)
                .ok_or_else(|| Error::Spec(format!("unterminated tuple in `{s}`")))?;
            let nums = rest[1..end]
                .split(',')
                .map(|v| {
                    v.parse::<usize>()
                        .map_err(|_| Error::Spec(format!("bad number `{v}` in `{s}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            if nums.len() != 4 {
                return Err(Error::Spec(format!(
                    "each layer needs [size, channels, stride, padding], got {nums:?}"
                )));
            }
            layers.push(ConvSpec::new(nums[0], nums[1], nums[2], nums[3])?);
            rest = rest[end + 1..].trim_start_matches(',');
        }
        if layers.is_empty() {
            return Err(Error::Spec("empty layer list".into()));
        }
        Ok(layers)
    }
}

pub fn format_layers(layers: &[ConvSpec]) -> String {
    let items: Vec<String> = layers
        .iter()
        .map(|l| format!("({},{},{},{})", l.kernel, l.out_channels, l.stride, l.padding))
        .collect();
    format!("[{}]", items.join(","))
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_layers(&self.layers))
    }
}

/// Intermediate activations of one forward pass.
pub struct Trace {
    /// Output of each conv layer: post-activation for hidden layers, raw for
    /// the last one.
    pub layers: Vec<Var>,
    /// Network output before the terminal activation.
    pub pre_terminal: Var,
    pub output: Var,
}

/// Convolution stack with an optional MLP head.
#[derive(Clone, Debug)]
pub struct ConvNet {
    pub spec: ArchSpec,
    pub in_channels: usize,
    pub input_hw: (usize, usize),
    pub convs: Vec<Conv2d>,
    pub head: Vec<Linear>,
}

/// Builds a network for `[N, in_channels, H, W]` inputs.
pub fn build_network(spec: &ArchSpec, in_channels: usize, input_hw: (usize, usize), seed: u64) -> Result<ConvNet> {
    spec.validate()?;
    if in_channels == 0 {
        return Err(Error::Spec("input must have at least one channel".into()));
    }
    let out_hw = spec.output_hw(input_hw)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut convs = Vec::with_capacity(spec.layers.len());
    let mut c = in_channels;
    for l in &spec.layers {
        convs.push(Conv2d::new(c, *l, &mut rng));
        c = l.out_channels;
    }
    let mut head = Vec::new();
    if let Some(h) = &spec.mlp_head {
        let mut d = c * out_hw.0 * out_hw.1;
        for &n in h.hidden.iter().chain(std::iter::once(&h.output)) {
            head.push(Linear::new(d, n, &mut rng));
            d = n;
        }
    }
    Ok(ConvNet {
        spec: spec.clone(),
        in_channels,
        input_hw,
        convs,
        head,
    })
}

impl ConvNet {
    pub fn output_hw(&self) -> (usize, usize) {
        self.spec.output_hw(self.input_hw).expect("validated at build time")
    }

    pub fn geometry(&self) -> Result<PatchGeometry> {
        self.spec.geometry(self.input_hw)
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let s = tape.shape(x);
        if s.len() != 4 || s[1] != self.in_channels || (s[2], s[3]) != self.input_hw {
            return Err(Error::shape(
                "network input",
                format!(
                    "expected [N, {}, {}, {}], got {s:?}",
                    self.in_channels, self.input_hw.0, self.input_hw.1
                ),
            ));
        }
        Ok(())
    }

    pub fn trace(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Trace> {
        self.check_input(tape, x)?;
        let last = self.convs.len() - 1;
        let mut h = x;
        let mut layers = Vec::with_capacity(self.convs.len());
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(tape, vars[2 * i], vars[2 * i + 1], h)?;
            if i < last || !self.head.is_empty() {
                h = self.spec.hidden_activation.apply(tape, h);
            }
            layers.push(h);
        }
        if !self.head.is_empty() {
            h = tape.flatten(h)?;
            let base = 2 * self.convs.len();
            for (j, _) in self.head.iter().enumerate() {
                h = tape.linear(h, vars[base + 2 * j], vars[base + 2 * j + 1])?;
                if j + 1 < self.head.len() {
                    h = tape.relu(h);
                }
            }
        }
        let output = self.spec.terminal_activation.apply(tape, h);
        Ok(Trace {
            layers,
            pre_terminal: h,
            output,
        })
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        Ok(self.trace(tape, vars, x)?.output)
    }

    /// Output before the terminal activation (logits for a discriminator).
    pub fn forward_logits(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        Ok(self.trace(tape, vars, x)?.pre_terminal)
    }
}

impl Module for ConvNet {
    fn named_params(&self) -> Vec<(String, &crate::tensor::Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("conv{i}.weight"), &c.weight));
            out.push((format!("conv{i}.bias"), &c.bias));
        }
        for (i, l) in self.head.iter().enumerate() {
            out.push((format!("head{i}.weight"), &l.weight));
            out.push((format!("head{i}.bias"), &l.bias));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut crate::tensor::Tensor> {
        let mut out = Vec::new();
        for c in self.convs.iter_mut() {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        for l in self.head.iter_mut() {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn parse_and_format_round_trip() {
        let s = "[(4,32,2,1),(4,64,1,1),(4,128,1,1),(4,1,1,1)]";
        let layers = ArchSpec::parse_layers(s).unwrap();
        assert_eq!(layers, ArchSpec::dmc_discriminator().layers);
        assert_eq!(format_layers(&layers), s);
        assert_eq!(ArchSpec::parse_layers("[[3, 8, 1, 0], [3,1,1,0]]").unwrap().len(), 2);
        assert!(ArchSpec::parse_layers("[(4,32,2)]").is_err());
        assert!(ArchSpec::parse_layers("(4,32,2,1)").is_err());
        assert!(ArchSpec::parse_layers("[(0,32,2,1)]").is_err());
        assert!(ArchSpec::parse_layers("[]").is_err());
    }

    #[test]
    fn dmc_network_emits_39_by_39_logits() {
        let net = build_network(&ArchSpec::dmc_discriminator(), 6, (84, 84), 0).unwrap();
        let mut t = Tape::inference();
        let x = t.constant(&Tensor::full(&[1, 6, 84, 84], 0.25));
        let vars = net.bind(&mut t, false);
        let y = net.forward_logits(&mut t, &vars, x).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 39, 39]);
    }

    #[test]
    fn mlp_head_flattens_conv_output() {
        let mut spec = ArchSpec::encoder_from(vec![conv(3, 4, 2, 0)]);
        spec.mlp_head = Some(MlpHead {
            hidden: vec![5],
            output: 2,
        });
        spec.terminal_activation = Activation::Identity;
        let net = build_network(&spec, 1, (9, 9), 3).unwrap();
        assert_eq!(net.head[0].input_dim(), 4 * 4 * 4);
        let mut t = Tape::inference();
        let x = t.constant(&Tensor::full(&[3, 1, 9, 9], 0.5));
        let vars = net.bind(&mut t, false);
        let y = net.forward(&mut t, &vars, x).unwrap();
        assert_eq!(t.shape(y), &[3, 2]);
    }

    #[test]
    fn rejects_inputs_that_collapse() {
        assert!(build_network(&ArchSpec::dmc_discriminator(), 6, (4, 4), 0).is_err());
        let net = build_network(&ArchSpec::dmc_discriminator(), 6, (20, 20), 0).unwrap();
        let mut t = Tape::inference();
        let x = t.constant(&Tensor::zeros(&[1, 6, 21, 21]));
        let vars = net.bind(&mut t, false);
        assert!(net.forward(&mut t, &vars, x).is_err());
    }
}
