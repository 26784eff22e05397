//! Parameterized layers and their initializers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::Result;
use crate::tensor::{ConvSpec, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv2d {
    /// Kaiming-uniform (fan-in, ReLU gain) weights and zero bias.
    pub fn new(in_channels: usize, spec: ConvSpec, rng: &mut impl Rng) -> Self {
        let k = spec.kernel;
        let fan_in = (in_channels * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let n = spec.out_channels * in_channels * k * k;
        let w = (0..n).map(|_| dist.sample(rng)).collect();
        Conv2d {
            spec,
            weight: Tensor::param(vec![spec.out_channels, in_channels, k, k], w).unwrap(),
            bias: Tensor::param(vec![spec.out_channels], vec![0.0; spec.out_channels]).unwrap(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, w: Var, b: Var, x: Var) -> Result<Var> {
        tape.conv2d(x, w, b, self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Orthogonal weights (gain 1) and zero bias.
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: Tensor::param(vec![output, input], orthogonal(output, input, rng)).unwrap(),
            bias: Tensor::param(vec![output], vec![0.0; output]).unwrap(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::param(vec![dim], vec![1.0; dim]).unwrap(),
            beta: Tensor::param(vec![dim], vec![0.0; dim]).unwrap(),
        }
    }
}

/// Row-major `rows × cols` matrix whose rows (if `rows ≤ cols`) or columns
/// are orthonormal, from Gram-Schmidt on Gaussian samples.
pub fn orthogonal(rows: usize, cols: usize, rng: &mut impl Rng) -> Vec<f64> {
    let (count, len) = (rows.min(cols), rows.max(cols));
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    let mut out = vec![0.0; rows * cols];
    for (i, b) in basis.iter().enumerate() {
        for (j, &x) in b.iter().enumerate() {
            if rows <= cols {
                out[i * cols + j] = x;
            } else {
                out[j * cols + i] = x;
            }
        }
    }
    out
}
