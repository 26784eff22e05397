use crate::error::Result;
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{Tape, Tensor, Var};

/// A collection of named parameter tensors with a fixed order.
///
/// `bind` places the parameters on a tape in that order; forward passes index
/// the returned handles positionally.
pub trait Module {
    fn named_params(&self) -> Vec<(String, &Tensor)>;

    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn params(&self) -> Vec<&Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Leaves for every parameter; gradients are tracked only if `trainable`.
    fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|t| if trainable { tape.param(t) } else { tape.constant(t) })
            .collect()
    }

    /// Adds the tape gradients of `vars` into the parameter gradients.
    fn accumulate(&mut self, tape: &Tape, vars: &[Var]) -> Result<()> {
        for (p, v) in self.params_mut().into_iter().zip(vars) {
            tape.accumulate_into(*v, p)?;
        }
        Ok(())
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn save_into(&self, prefix: &str, ck: &mut Checkpoint) {
        for (name, t) in self.named_params() {
            ck.push(format!("{prefix}.{name}"), t);
        }
    }

    fn restore_from(&mut self, prefix: &str, ck: &Checkpoint) -> Result<()> {
        let names: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, p) in names.iter().zip(self.params_mut()) {
            ck.restore(&format!("{prefix}.{name}"), p)?;
        }
        Ok(())
    }

    /// `self ← τ·source + (1 − τ)·self`, parameter by parameter.
    fn soft_update_from(&mut self, source: &Self, tau: f64)
    where
        Self: Sized,
    {
        let src: Vec<Vec<f64>> = source.params().iter().map(|t| t.data().to_vec()).collect();
        for (dst, s) in self.params_mut().into_iter().zip(&src) {
            for (d, v) in dst.data_mut().iter_mut().zip(s) {
                *d = tau * v + (1.0 - tau) * *d;
            }
        }
    }
}

/// Squared L2 distance between two modules' parameters.
pub fn param_distance_sq<M: Module>(a: &M, b: &M) -> f64 {
    a.params()
        .iter()
        .zip(b.params())
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).powi(2)))
        .sum()
}
