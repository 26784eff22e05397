//! Patch discriminator training: per-cell binary cross-entropy, gradient
//! penalty at interpolated inputs, and the cached expert logit statistics
//! used by the similarity regularizer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nets::module::Module;
use crate::nets::{build_network, ArchSpec, ConvNet};
use crate::tensor::gradcheck::{self, relative_error, uniform_tensor, GradCheck};
use crate::tensor::{Adam, AdamConfig, ConvSpec, Reduction, Tape, Tensor, Var};

/// Probability clamp applied before every log.
pub const CLAMP_EPS: f64 = 1e-6;

/// Samples per inference chunk when scoring large batches.
const CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub arch: ArchSpec,
    pub frame_stack: usize,
    pub image_size: usize,
    pub lr: f64,
    pub gp_coef: f64,
    pub clamp_eps: f64,
    /// Input-space step of the forward-difference pass for the penalty's
    /// parameter gradient.
    pub fd_step: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            arch: ArchSpec::dmc_discriminator(),
            frame_stack: 3,
            image_size: 84,
            lr: 1e-4,
            gp_coef: 10.0,
            clamp_eps: CLAMP_EPS,
            fd_step: 1e-4,
        }
    }
}

/// Channel-concatenates two stacked observations `[N, stack, H, W]` into
/// discriminator inputs `[N, 2·stack, H, W]`.
pub fn observation_pairs(s: &Tensor, s_next: &Tensor) -> Result<Tensor> {
    if s.shape() != s_next.shape() || s.shape().len() != 4 {
        return Err(Error::shape(
            "observation_pairs",
            format!("{:?} and {:?}", s.shape(), s_next.shape()),
        ));
    }
    let [n, c, h, w] = [s.shape()[0], s.shape()[1], s.shape()[2], s.shape()[3]];
    let per = c * h * w;
    let mut data = Vec::with_capacity(2 * n * per);
    for i in 0..n {
        data.extend_from_slice(s.sample(i));
        data.extend_from_slice(s_next.sample(i));
    }
    Tensor::new(vec![n, 2 * c, h, w], data)
}

/// Mean raw logits of expert pairs, cached between refreshes.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertStats {
    /// `[P, P]`.
    pub mean_logits: Tensor,
    pub refresh_step: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DiscUpdate {
    pub loss: f64,
    pub penalty: f64,
}

/// Penalty value together with the per-sample input-gradient norms.
#[derive(Clone, Debug, PartialEq)]
pub struct Penalty {
    pub value: f64,
    pub grad_norms: Vec<f64>,
}

/// Binary cross-entropy over all cells, from already clamped probabilities.
pub fn disc_loss_from_probs(expert: &[f64], agent: &[f64]) -> f64 {
    let e = expert.iter().map(|p| -p.ln()).sum::<f64>() / expert.len() as f64;
    let a = agent.iter().map(|p| -(1.0 - p).ln()).sum::<f64>() / agent.len() as f64;
    e + a
}

/// Records the clamped-BCE loss for expert and agent logits on `tape`.
pub fn disc_loss_on_tape(tape: &mut Tape, expert_logits: Var, agent_logits: Var, eps: f64) -> Result<Var> {
    if tape.shape(expert_logits) != tape.shape(agent_logits) {
        return Err(Error::shape(
            "disc_loss",
            format!(
                "expert {:?} vs agent {:?}",
                tape.shape(expert_logits),
                tape.shape(agent_logits)
            ),
        ));
    }
    let pe = tape.sigmoid(expert_logits);
    let pe = tape.clamp(pe, eps, 1.0 - eps);
    let le = tape.log(pe)?;
    let le = tape.mean(le);

    let pa = tape.sigmoid(agent_logits);
    let pa = tape.clamp(pa, eps, 1.0 - eps);
    let qa = tape.neg(pa);
    let qa = tape.add_scalar(qa, 1.0);
    let la = tape.log(qa)?;
    let la = tape.mean(la);

    let total = tape.add(le, la)?;
    Ok(tape.neg(total))
}

/// Sum over samples of the mean-cell logit; one backward pass gives every
/// sample's input gradient at once.
fn summed_cell_means(net: &ConvNet, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
    let z = net.forward_logits(tape, vars, x)?;
    let f = tape.reduce_per_sample(z, Reduction::Mean)?;
    Ok(tape.sum(f))
}

/// Input gradient of each sample's mean-cell logit and the parameter
/// gradient of their sum, both at `x`.
fn input_and_param_grads(net: &ConvNet, x: &Tensor, want_input: bool) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.shape().to_vec(), x.data().to_vec(), want_input)?;
    let vars = net.bind(&mut tape, true);
    let root = summed_cell_means(net, &mut tape, &vars, xv)?;
    tape.backward(root)?;
    let gx = if want_input {
        tape.grad(xv).map(<[f64]>::to_vec).unwrap_or_default()
    } else {
        Vec::new()
    };
    let gp = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();
    Ok((gx, gp))
}

/// Convex combination `α·expert + (1 − α)·agent`, one `α` per sample.
pub fn interpolate(expert: &Tensor, agent: &Tensor, alpha: &[f64]) -> Result<Tensor> {
    if expert.shape() != agent.shape() || expert.shape().first() != Some(&alpha.len()) {
        return Err(Error::shape(
            "gradient_penalty",
            format!(
                "expert {:?}, agent {:?}, {} mixing weights",
                expert.shape(),
                agent.shape(),
                alpha.len()
            ),
        ));
    }
    let mut data = Vec::with_capacity(expert.numel());
    for (i, &a) in alpha.iter().enumerate() {
        data.extend(
            expert
                .sample(i)
                .iter()
                .zip(agent.sample(i))
                .map(|(e, g)| a * e + (1.0 - a) * g),
        );
    }
    Tensor::new(expert.shape().to_vec(), data)
}

fn penalty_terms(gx: &[f64], n: usize, coef: f64) -> (f64, Vec<f64>) {
    let per = gx.len() / n;
    let norms: Vec<f64> = gx
        .chunks(per)
        .map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let value = coef * norms.iter().map(|m| (m - 1.0).powi(2)).sum::<f64>() / n as f64;
    (value, norms)
}

/// Penalty value only.
pub fn penalty_value(net: &ConvNet, x_hat: &Tensor, coef: f64) -> Result<Penalty> {
    let n = x_hat.shape()[0];
    let (gx, _) = input_and_param_grads(net, x_hat, true)?;
    let (value, grad_norms) = penalty_terms(&gx, n, coef);
    Ok(Penalty { value, grad_norms })
}

/// Penalty value plus its gradient with respect to every parameter of `net`.
///
/// With `g_n` the input gradient of sample `n` and
/// `w_n = coef · 2(‖g_n‖ − 1)/N · g_n/‖g_n‖`, the parameter gradient is the
/// directional derivative of `∇_θ Σ_n f_n` along `w`, taken as a forward
/// difference between the pass at `x̂` and one at `x̂ + h·w/‖w‖`.
pub fn penalty_with_param_grads(net: &ConvNet, x_hat: &Tensor, coef: f64, h: f64) -> Result<(Penalty, Vec<Vec<f64>>)> {
    let n = x_hat.shape()[0];
    let (gx, g0) = input_and_param_grads(net, x_hat, true)?;
    let (value, grad_norms) = penalty_terms(&gx, n, coef);
    let per = gx.len() / n;
    let mut w = vec![0.0; gx.len()];
    for (i, &m) in grad_norms.iter().enumerate() {
        if m > 0.0 {
            let c = coef * 2.0 * (m - 1.0) / (n as f64 * m);
            for j in i * per..(i + 1) * per {
                w[j] = c * gx[j];
            }
        }
    }
    let wn = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    let grads = if wn == 0.0 {
        g0.iter().map(|g| vec![0.0; g.len()]).collect()
    } else {
        let shifted: Vec<f64> = x_hat.data().iter().zip(&w).map(|(x, d)| x + h * d / wn).collect();
        let shifted = Tensor::new(x_hat.shape().to_vec(), shifted)?;
        let (_, g1) = input_and_param_grads(net, &shifted, false)?;
        g0.iter()
            .zip(&g1)
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| wn * (q - p) / h).collect())
            .collect()
    };
    Ok((Penalty { value, grad_norms }, grads))
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub net: ConvNet,
    pub config: DiscriminatorConfig,
    opt: Adam,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        if config.arch.mlp_head.is_some() || config.arch.out_channels() != 1 {
            return Err(Error::Spec(
                "a patch discriminator must end in a single-channel conv layer".into(),
            ));
        }
        let size = config.image_size;
        let net = build_network(&config.arch, 2 * config.frame_stack, (size, size), seed)?;
        let opt = Adam::new(
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
            net.params(),
        );
        Ok(Discriminator { net, config, opt })
    }

    /// Patch grid side lengths.
    pub fn grid(&self) -> (usize, usize) {
        self.net.output_hw()
    }

    pub fn updates(&self) -> u64 {
        self.opt.steps()
    }

    /// Raw logits `[N, P, P]` without recording gradients.
    pub fn logits(&self, pairs: &Tensor) -> Result<Tensor> {
        let s = pairs.shape();
        if s.len() != 4 {
            return Err(Error::shape("discriminator input", format!("{s:?}")));
        }
        let n = s[0];
        let per = pairs.numel() / n.max(1);
        let (p, q) = self.grid();
        let mut out = Vec::with_capacity(n * p * q);
        for start in (0..n).step_by(CHUNK) {
            let m = CHUNK.min(n - start);
            let mut tape = Tape::inference();
            let x = tape.leaf(
                vec![m, s[1], s[2], s[3]],
                pairs.data()[start * per..(start + m) * per].to_vec(),
                false,
            )?;
            let vars = self.net.bind(&mut tape, false);
            let z = self.net.forward_logits(&mut tape, &vars, x)?;
            out.extend_from_slice(tape.value(z));
        }
        Tensor::new(vec![n, p, q], out)
    }

    /// Clamped patch probabilities `[N, P, P]`.
    pub fn probs(&self, pairs: &Tensor) -> Result<Tensor> {
        let eps = self.config.clamp_eps;
        let mut z = self.logits(pairs)?;
        for v in z.data_mut() {
            *v = crate::tensor::tape::sigmoid(*v).clamp(eps, 1.0 - eps);
        }
        Ok(z)
    }

    /// Loss value without updating anything.
    pub fn loss(&self, expert: &Tensor, agent: &Tensor) -> Result<f64> {
        if expert.shape() != agent.shape() {
            return Err(Error::shape(
                "disc_loss",
                format!("expert {:?} vs agent {:?}", expert.shape(), agent.shape()),
            ));
        }
        let pe = self.probs(expert)?;
        let pa = self.probs(agent)?;
        Ok(disc_loss_from_probs(pe.data(), pa.data()))
    }

    /// Penalty at `x̂` built from the given mixing weights, without updating.
    pub fn gradient_penalty(&self, expert: &Tensor, agent: &Tensor, alpha: &[f64]) -> Result<Penalty> {
        let x_hat = interpolate(expert, agent, alpha)?;
        penalty_value(&self.net, &x_hat, self.config.gp_coef)
    }

    /// One Adam step on BCE + gradient penalty. Inputs are expected to be
    /// augmented already.
    pub fn update<R: Rng>(&mut self, expert: &Tensor, agent: &Tensor, rng: &mut R) -> Result<DiscUpdate> {
        let mut tape = Tape::new();
        let ev = tape.constant(expert);
        let av = tape.constant(agent);
        let vars = self.net.bind(&mut tape, true);
        let ze = self.net.forward_logits(&mut tape, &vars, ev)?;
        let za = self.net.forward_logits(&mut tape, &vars, av)?;
        let loss = disc_loss_on_tape(&mut tape, ze, za, self.config.clamp_eps)?;
        tape.backward(loss)?;
        let loss = tape.item(loss);

        self.net.zero_grad();
        self.net.accumulate(&tape, &vars)?;
        drop(tape);

        let mut penalty = 0.0;
        if self.config.gp_coef > 0.0 {
            let n = expert.shape()[0];
            let alpha: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let x_hat = interpolate(expert, agent, &alpha)?;
            let (p, grads) =
                penalty_with_param_grads(&self.net, &x_hat, self.config.gp_coef, self.config.fd_step)?;
            for (t, g) in self.net.params_mut().into_iter().zip(&grads) {
                t.accumulate_grad(g)?;
            }
            penalty = p.value;
        }
        if !loss.is_finite() || !penalty.is_finite() {
            return Err(Error::NonFinite {
                what: format!("discriminator loss {loss}, penalty {penalty}"),
                step: self.opt.steps(),
            });
        }
        self.opt.step(self.net.params_mut())?;
        Ok(DiscUpdate { loss, penalty })
    }

    /// Mean raw logits over `demo_pairs` with the current weights.
    pub fn refresh_expert_stats(&self, demo_pairs: &Tensor, step: u64) -> Result<ExpertStats> {
        let n = demo_pairs.shape().first().copied().unwrap_or(0);
        if n == 0 {
            return Err(Error::Insufficient("expert statistics need at least one pair".into()));
        }
        let z = self.logits(demo_pairs)?;
        let (p, q) = self.grid();
        let mut mean = vec![0.0; p * q];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(z.sample(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        Ok(ExpertStats {
            mean_logits: Tensor::new(vec![p, q], mean)?,
            refresh_step: step,
        })
    }
}

impl Module for Discriminator {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.net.named_params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.net.params_mut()
    }
}

/// Finite-difference checks of the assembled discriminator: the loss
/// gradient with respect to every parameter, the penalty's input gradients,
/// and the forward-difference parameter gradient of the penalty.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradCheck>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let arch = ArchSpec::fcn(vec![ConvSpec::new(3, 3, 2, 1)?, ConvSpec::new(3, 1, 1, 1)?]);
    let config = DiscriminatorConfig {
        arch,
        frame_stack: 1,
        image_size: 6,
        ..DiscriminatorConfig::default()
    };
    let disc = Discriminator::new(config, seed)?;
    let expert = uniform_tensor(&mut rng, &[2, 2, 6, 6], 0.0, 1.0);
    let agent = uniform_tensor(&mut rng, &[2, 2, 6, 6], 0.0, 1.0);
    let mut out = Vec::new();

    let params: Vec<Tensor> = disc.net.params().into_iter().cloned().collect();
    let net = &disc.net;
    out.push(gradcheck::check(
        "discriminator loss / parameters",
        &params,
        1e-5,
        gradcheck::OP_TOL,
        |t, v| {
            let e = t.constant(&expert);
            let a = t.constant(&agent);
            let ze = net.forward_logits(t, v, e)?;
            let za = net.forward_logits(t, v, a)?;
            disc_loss_on_tape(t, ze, za, CLAMP_EPS)
        },
    )?);

    let alpha = [0.3, 0.8];
    let x_hat = interpolate(&expert, &agent, &alpha)?;
    let mut gp_checks = Vec::new();
    for i in 0..2 {
        let single = Tensor::new(vec![1, 2, 6, 6], x_hat.sample(i).to_vec())?;
        gp_checks.push(gradcheck::check(
            &format!("penalty input gradient, sample {i}"),
            &[single],
            1e-5,
            1e-4,
            |t, v| {
                let vars = net.bind(t, false);
                let z = net.forward_logits(t, &vars, v[0])?;
                Ok(t.mean(z))
            },
        )?);
    }
    out.extend(gp_checks);

    let coef = disc.config.gp_coef;
    let (_, analytic) = penalty_with_param_grads(net, &x_hat, coef, disc.config.fd_step)?;
    let delta = 1e-5;
    let mut numeric = Vec::new();
    let mut probe = net.clone();
    for pi in 0..analytic.len() {
        for j in 0..analytic[pi].len() {
            let orig = probe.params()[pi].data()[j];
            probe.params_mut()[pi].data_mut()[j] = orig + delta;
            let up = penalty_value(&probe, &x_hat, coef)?.value;
            probe.params_mut()[pi].data_mut()[j] = orig - delta;
            let down = penalty_value(&probe, &x_hat, coef)?.value;
            probe.params_mut()[pi].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * delta));
        }
    }
    let flat: Vec<f64> = analytic.concat();
    out.push(GradCheck {
        name: "penalty / parameters (forward-difference pass)".into(),
        max_rel_err: relative_error(&flat, &numeric),
        tol: 1e-4,
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(seed: u64) -> Discriminator {
        let arch = ArchSpec::fcn(vec![ConvSpec::new(3, 4, 2, 1).unwrap(), ConvSpec::new(3, 1, 1, 1).unwrap()]);
        Discriminator::new(
            DiscriminatorConfig {
                arch,
                frame_stack: 1,
                image_size: 8,
                ..DiscriminatorConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    /// Single conv covering the whole 4×4 two-channel input: the logit is
    /// `w·x + b`, so the input gradient is `w` everywhere.
    fn linear_disc(norm: f64) -> Discriminator {
        let arch = ArchSpec::fcn(vec![ConvSpec::new(4, 1, 1, 0).unwrap()]);
        let mut d = Discriminator::new(
            DiscriminatorConfig {
                arch,
                frame_stack: 1,
                image_size: 4,
                ..DiscriminatorConfig::default()
            },
            0,
        )
        .unwrap();
        let w = d.net.convs[0].weight.data_mut();
        let cur = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        w.iter_mut().for_each(|v| *v *= norm / cur);
        d
    }

    #[test]
    fn uninformative_discriminator_loss_is_two_ln2() {
        let p = vec![0.5; 8];
        assert!((disc_loss_from_probs(&p, &p) - 2.0 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn perfect_classifier_hits_clamp_floor() {
        let e = vec![1.0 - CLAMP_EPS; 4];
        let a = vec![CLAMP_EPS; 4];
        let want = 2.0 * (1.0 / (1.0 - CLAMP_EPS)).ln();
        assert!((disc_loss_from_probs(&e, &a) - want).abs() < 1e-15);
        let mut t = Tape::inference();
        let ze = t.constant(&Tensor::full(&[1, 1, 2, 2], 500.0));
        let za = t.constant(&Tensor::full(&[1, 1, 2, 2], -500.0));
        let l = disc_loss_on_tape(&mut t, ze, za, CLAMP_EPS).unwrap();
        assert!((t.item(l) - want).abs() < 1e-12);
    }

    #[test]
    fn tape_loss_matches_per_cell_bce_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let ze = uniform_tensor(&mut rng, &[3, 1, 2, 2], -4.0, 4.0);
            let za = uniform_tensor(&mut rng, &[3, 1, 2, 2], -4.0, 4.0);
            let mut t = Tape::inference();
            let (a, b) = (t.constant(&ze), t.constant(&za));
            let l = disc_loss_on_tape(&mut t, a, b, CLAMP_EPS).unwrap();
            let mut sum_e = 0.0;
            let mut sum_a = 0.0;
            for k in 0..12 {
                let pe = 1.0 / (1.0 + (-ze.data()[k]).exp());
                let pa = 1.0 / (1.0 + (-za.data()[k]).exp());
                sum_e += -pe.ln();
                sum_a += -(1.0 - pa).ln();
            }
            let oracle = sum_e / 12.0 + sum_a / 12.0;
            assert!((t.item(l) - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_batches_are_rejected() {
        let d = tiny(0);
        let a = Tensor::zeros(&[2, 2, 8, 8]);
        let b = Tensor::zeros(&[3, 2, 8, 8]);
        assert!(d.loss(&a, &b).is_err());
        assert!(d.gradient_penalty(&a, &b, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn unit_norm_linear_map_has_zero_penalty() {
        let d = linear_disc(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = uniform_tensor(&mut rng, &[3, 2, 4, 4], 0.0, 1.0);
        let a = uniform_tensor(&mut rng, &[3, 2, 4, 4], 0.0, 1.0);
        let p = d.gradient_penalty(&e, &a, &[0.1, 0.5, 0.9]).unwrap();
        assert!(p.value.abs() < 1e-20);
    }

    #[test]
    fn tripled_linear_map_penalty_is_forty() {
        let d = linear_disc(3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = uniform_tensor(&mut rng, &[4, 2, 4, 4], 0.0, 1.0);
        let a = uniform_tensor(&mut rng, &[4, 2, 4, 4], 0.0, 1.0);
        let p = d.gradient_penalty(&e, &a, &[0.0, 0.25, 0.5, 1.0]).unwrap();
        assert!((p.value - 40.0).abs() < 1e-10);
        assert!(p.grad_norms.iter().all(|m| (m - 3.0).abs() < 1e-12));
    }

    #[test]
    fn assembled_discriminator_passes_gradcheck() {
        for r in gradcheck_suite(11).unwrap() {
            assert!(r.passed(), "{}: {:e}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn expert_stats_average_logits() {
        let d = tiny(4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pairs = uniform_tensor(&mut rng, &[64, 2, 8, 8], 0.0, 1.0);
        let z = d.logits(&pairs).unwrap();
        let stats = d.refresh_expert_stats(&pairs, 7).unwrap();
        assert_eq!(stats.refresh_step, 7);
        let cells = z.shape()[1] * z.shape()[2];
        for c in 0..cells {
            let mut acc = 0.0;
            for i in 0..64 {
                acc += z.data()[i * cells + c];
            }
            assert!((stats.mean_logits.data()[c] - acc / 64.0).abs() < 1e-12);
        }

        let one = Tensor::new(vec![1, 2, 8, 8], pairs.sample(0).to_vec()).unwrap();
        let s1 = d.refresh_expert_stats(&one, 0).unwrap();
        assert_eq!(s1.mean_logits.data(), z.sample(0));

        let empty = Tensor::zeros(&[0, 2, 8, 8]);
        assert!(d.refresh_expert_stats(&empty, 0).is_err());
    }

    #[test]
    fn update_changes_weights_and_rejects_nonscalar_heads() {
        let mut d = tiny(5);
        let before = d.net.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = uniform_tensor(&mut rng, &[4, 2, 8, 8], 0.0, 1.0);
        let a = uniform_tensor(&mut rng, &[4, 2, 8, 8], 0.0, 1.0);
        let u = d.update(&e, &a, &mut rng).unwrap();
        assert!(u.loss.is_finite() && u.penalty >= 0.0);
        assert!(crate::nets::module::param_distance_sq(&before, &d.net) > 0.0);
        assert_eq!(d.updates(), 1);

        let arch = ArchSpec::fcn(vec![ConvSpec::new(3, 2, 1, 1).unwrap()]);
        let cfg = DiscriminatorConfig {
            arch,
            frame_stack: 1,
            image_size: 8,
            ..DiscriminatorConfig::default()
        };
        assert!(Discriminator::new(cfg, 0).is_err());
    }

    #[test]
    fn pairs_concatenate_channels() {
        let s = Tensor::new(vec![2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let t = Tensor::new(vec![2, 1, 1, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let p = observation_pairs(&s, &t).unwrap();
        assert_eq!(p.shape(), &[2, 2, 1, 2]);
        assert_eq!(p.data(), &[1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
    }
}
