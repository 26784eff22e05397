//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{ConvSpec, Reduction, Tape, Tensor, Var};

/// Outcome of one check: the worst relative error over all inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Default tolerance for single ops.
pub const OP_TOL: f64 = 1e-5;

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)`; absolute when both norms vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// Compares the tape gradient of a scalar function with central differences
/// of step `h` for every element of every input.
pub fn check<F>(name: &str, inputs: &[Tensor], h: f64, tol: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.shape().to_vec(), t.data().to_vec(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::inference();
        let vs = xs
            .iter()
            .map(|x| t.leaf(x.shape().to_vec(), x.data().to_vec(), false))
            .collect::<Result<Vec<_>>>()?;
        let o = f(&mut t, &vs)?;
        Ok(t.item(o))
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let mut numeric = vec![0.0; analytic.len()];
        for j in 0..numeric.len() {
            let orig = work[k].data()[j];
            work[k].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[k].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[k].data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * h);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(GradCheck {
        name: name.to_string(),
        max_rel_err: worst,
        tol,
    })
}

pub fn uniform_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// `Σ op(x) ⊙ r` with a fixed random `r`, so that every output element
/// contributes a distinct weight.
fn weighted(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = uniform_tensor(&mut rng, t.shape(y), -1.0, 1.0);
    let rv = t.constant(&r);
    let p = t.mul(y, rv)?;
    Ok(t.sum(p))
}

/// Finite-difference checks for every differentiable tape op.
pub fn op_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut out = Vec::new();
    let mut u = |shape: &[usize]| uniform_tensor(&mut rng, shape, -1.0, 1.0);

    for (name, spec, hw) in [
        ("conv2d k3 s2 p0", ConvSpec::new(3, 2, 2, 0)?, 7),
        ("conv2d k4 s2 p1", ConvSpec::new(4, 3, 2, 1)?, 6),
        ("conv2d k2 s1 p1", ConvSpec::new(2, 2, 1, 1)?, 4),
    ] {
        let x = u(&[2, 2, hw, hw]);
        let w = u(&[spec.out_channels, 2, spec.kernel, spec.kernel]);
        let b = u(&[spec.out_channels]);
        out.push(check(name, &[x, w, b], h, OP_TOL, |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], spec)?;
            weighted(t, y, 1)
        })?);
    }

    let (x, w, b) = (u(&[3, 4]), u(&[5, 4]), u(&[5]));
    out.push(check("linear", &[x, w, b], h, OP_TOL, |t, v| {
        let y = t.linear(v[0], v[1], v[2])?;
        weighted(t, y, 2)
    })?);

    type UnaryFn = fn(&mut Tape, Var) -> Result<Var>;
    let unaries: [(&str, UnaryFn); 9] = [
        ("relu", |t, x| Ok(t.relu(x))),
        ("leaky_relu", |t, x| Ok(t.leaky_relu(x, 0.2))),
        ("tanh", |t, x| Ok(t.tanh(x))),
        ("sigmoid", |t, x| Ok(t.sigmoid(x))),
        ("exp", |t, x| Ok(t.exp(x))),
        ("square", |t, x| Ok(t.square(x))),
        ("scale", |t, x| Ok(t.scale(x, -1.7))),
        ("add_scalar", |t, x| Ok(t.add_scalar(x, 0.3))),
        ("clamp", |t, x| Ok(t.clamp(x, -0.5, 0.5))),
    ];
    for (name, f) in unaries {
        let x = u(&[2, 3, 3]);
        out.push(check(name, &[x], h, OP_TOL, |t, v| {
            let y = f(t, v[0])?;
            weighted(t, y, 3)
        })?);
    }
    let x = uniform_tensor(&mut rng, &[2, 5], 0.1, 1.0);
    out.push(check("log", &[x], h, OP_TOL, |t, v| {
        let y = t.log(v[0])?;
        weighted(t, y, 4)
    })?);

    type BinaryFn = fn(&mut Tape, Var, Var) -> Result<Var>;
    let binaries: [(&str, BinaryFn); 3] = [
        ("add", |t, a, b| t.add(a, b)),
        ("sub", |t, a, b| t.sub(a, b)),
        ("mul", |t, a, b| t.mul(a, b)),
    ];
    for (name, f) in binaries {
        let mut u = |shape: &[usize]| uniform_tensor(&mut rng, shape, -1.0, 1.0);
        let (a, b) = (u(&[2, 4]), u(&[2, 4]));
        out.push(check(name, &[a, b], h, OP_TOL, |t, v| {
            let y = f(t, v[0], v[1])?;
            weighted(t, y, 5)
        })?);
    }

    let mut u = |shape: &[usize]| uniform_tensor(&mut rng, shape, -1.0, 1.0);
    out.push(check("softmax_flat", &[u(&[2, 3, 3])], h, OP_TOL, |t, v| {
        let y = t.softmax_flat(v[0])?;
        weighted(t, y, 6)
    })?);
    out.push(check("sum", &[u(&[3, 2])], h, OP_TOL, |t, v| {
        let s = t.sum(v[0]);
        Ok(t.square(s))
    })?);
    out.push(check("mean", &[u(&[3, 2])], h, OP_TOL, |t, v| {
        let s = t.mean(v[0]);
        Ok(t.square(s))
    })?);
    for (name, kind) in [
        ("reduce mean", Reduction::Mean),
        ("reduce min", Reduction::Min),
        ("reduce max", Reduction::Max),
        ("reduce median (odd)", Reduction::Median),
    ] {
        out.push(check(name, &[u(&[3, 5])], h, OP_TOL, |t, v| {
            let y = t.reduce_per_sample(v[0], kind)?;
            weighted(t, y, 7)
        })?);
    }
    out.push(check("reduce median (even)", &[u(&[3, 2, 2])], h, OP_TOL, |t, v| {
        let y = t.reduce_per_sample(v[0], Reduction::Median)?;
        weighted(t, y, 8)
    })?);
    out.push(check("concat", &[u(&[2, 2, 3]), u(&[2, 1, 3])], h, OP_TOL, |t, v| {
        let y = t.concat(&[v[0], v[1]])?;
        weighted(t, y, 9)
    })?);
    out.push(check("reshape", &[u(&[2, 6])], h, OP_TOL, |t, v| {
        let y = t.reshape(v[0], vec![3, 4])?;
        let y = t.tanh(y);
        weighted(t, y, 10)
    })?);
    out.push(check("layer_norm", &[u(&[3, 6]), u(&[6]), u(&[6])], h, OP_TOL, |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        weighted(t, y, 11)
    })?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_at_1e5() {
        for r in op_suite(7).unwrap() {
            assert!(r.passed(), "{} rel err {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // recorded and inference paths disagree on purpose
        let x = Tensor::new(vec![2], vec![0.3, 0.4]).unwrap();
        let r = check("mismatch", &[x], 1e-5, OP_TOL, |t, v| {
            if t.is_recording() {
                let y = t.scale(v[0], 2.0);
                Ok(t.sum(y))
            } else {
                let y = t.scale(v[0], 3.0);
                Ok(t.sum(y))
            }
        })
        .unwrap();
        assert!(!r.passed());
    }
}
