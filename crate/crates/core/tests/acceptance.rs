//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use patchail::discriminator::{self, Discriminator, DiscriminatorConfig, ExpertStats};
use patchail::env::{save_demos, scripted_expert, State};
use patchail::explain::{self, FrameSource, Grid};
use patchail::nets::ArchSpec;
use patchail::reward::{self, compose_reward, Aggregator, RewardConfig, Variant};
use patchail::tensor::{gradcheck, Tensor};
use patchail::trainer::{self, config::TrainConfig, rollout_returns, TrainOutcome};

const GRADCHECK_OP_TOL: f64 = 1e-5;
const GRADCHECK_GP_TOL: f64 = 1e-4;
const SIMPLEX_TOL: f64 = 1e-12;
const COMPOSE_TOL: f64 = 1e-12;
const CONSERVATION_TOL: f64 = 1e-9;
const LEARN_LOSS: f64 = 0.2;
const LEARN_EXPERT_P: f64 = 0.9;
const LEARN_AGENT_P: f64 = 0.1;
const RETURN_FRACTION: f64 = 0.7;
const SEEDS: [u64; 3] = [1, 2, 3];
const DEMO_SEED: u64 = 0;
const DEMO_EPISODES: usize = 10;
const EXPLAIN_EPISODES: usize = 2;
const EXPLAIN_SEED: u64 = 77;
const RUN_LIMIT: Duration = Duration::from_secs(20 * 60);

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(n: usize, name: &str, elapsed: Duration, o: &Outcome) -> bool {
    println!(
        "criterion {n} {:4} {name}: {} [{:.1}s]",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64()
    );
    o.pass
}

fn geometry() -> Outcome {
    let start = Instant::now();
    let mut bad = Vec::new();
    let mut check = |label: &str, spec: &ArchSpec, grid: usize, rf: usize| {
        let g = spec.geometry((84, 84)).unwrap();
        if g.grid != (grid, grid) || g.receptive_field != rf {
            bad.push(format!("{label}: got {:?} rf {}", g.grid, g.receptive_field));
        }
    };
    check("dmc", &ArchSpec::dmc_discriminator(), 39, 22);
    check("atari", &ArchSpec::atari_discriminator(), 19, 34);
    check("encoder", &ArchSpec::encoder(), 35, 15);
    for (k, grid, rf) in [(2, 46, 8), (3, 42, 15), (5, 35, 29), (8, 25, 50)] {
        check(&format!("kernel {k}"), &ArchSpec::kernel_ablation(k), grid, rf);
    }
    let enc = ArchSpec::encoder();
    let (h, w) = enc.output_hw((84, 84)).unwrap();
    let flat = h * w * enc.out_channels();
    if flat != 39200 {
        bad.push(format!("encoder flatten {flat}"));
    }
    let took = start.elapsed();
    if took >= Duration::from_secs(1) {
        bad.push(format!("runtime {took:?}"));
    }
    Outcome {
        pass: bad.is_empty(),
        detail: if bad.is_empty() {
            "39x39/22, 19x19/34, 35x35/15 flatten 39200, kernels {2,3,5,8} -> {46,42,35,25} / {8,15,29,50}".into()
        } else {
            bad.join("; ")
        },
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut results = gradcheck::op_suite(11).unwrap();
    results.extend(discriminator::gradcheck_suite(11).unwrap());
    let mut worst_op: f64 = 0.0;
    let mut worst_gp: f64 = 0.0;
    let mut failures = Vec::new();
    for r in &results {
        let tol = if r.name.contains("penalty") { GRADCHECK_GP_TOL } else { GRADCHECK_OP_TOL };
        if r.name.contains("penalty") {
            worst_gp = worst_gp.max(r.max_rel_err);
        } else {
            worst_op = worst_op.max(r.max_rel_err);
        }
        if !(r.max_rel_err <= tol && r.max_rel_err <= r.tol) {
            failures.push(format!("{} {:.2e}", r.name, r.max_rel_err));
        }
    }
    let took = start.elapsed();
    if took >= Duration::from_secs(120) {
        failures.push(format!("runtime {took:?}"));
    }
    Outcome {
        pass: failures.is_empty(),
        detail: format!(
            "{} checks, worst op/disc rel err {worst_op:.2e} (<= {GRADCHECK_OP_TOL:.0e}), worst penalty {worst_gp:.2e} (<= {GRADCHECK_GP_TOL:.0e}){}",
            results.len(),
            if failures.is_empty() { String::new() } else { format!("; failed: {}", failures.join(", ")) }
        ),
    }
}

fn oracle_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn oracle_sim(a: &[f64], b: &[f64]) -> f64 {
    let (p, q) = (oracle_softmax(a), oracle_softmax(b));
    let kl: f64 = p.iter().zip(&q).map(|(x, y)| x * (x / y).ln()).sum();
    (-kl.max(0.0)).exp()
}

fn oracle_aggregate(v: &[f64], a: Aggregator) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    match a {
        Aggregator::Mean => v.iter().sum::<f64>() / n as f64,
        Aggregator::Max => s[n - 1],
        Aggregator::Min => s[0],
        Aggregator::Median if n % 2 == 1 => s[n / 2],
        Aggregator::Median => 0.5 * (s[n / 2 - 1] + s[n / 2]),
    }
}

fn stats_of(mean: &[f64]) -> ExpertStats {
    ExpertStats {
        mean_logits: Tensor::new(vec![1, mean.len()], mean.to_vec()).unwrap(),
        refresh_step: 0,
    }
}

fn reward_properties() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut bad = Vec::new();
    let eps = discriminator::CLAMP_EPS;
    for i in 0..1000 {
        let side = rng.gen_range(1..9);
        let n = side * side;
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let e: Vec<f64> = (0..n).map(|_| rng.gen_range(-6.0..6.0)).collect();

        let d = reward::normalize(&z);
        if (d.iter().sum::<f64>() - 1.0).abs() > SIMPLEX_TOL {
            bad.push(format!("grid {i}: simplex sum {}", d.iter().sum::<f64>()));
        }
        let st = stats_of(&e);
        let s = reward::sim_bar(&z, &st).unwrap();
        if !(s > 0.0 && s <= 1.0) || (s - oracle_sim(&z, &e)).abs() > 1e-9 {
            bad.push(format!("grid {i}: sim_bar {s}"));
        }
        if reward::sim_bar(&e, &st).unwrap() != 1.0 {
            bad.push(format!("grid {i}: self-similarity != 1"));
        }
        let c = rng.gen_range(-50.0..50.0);
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        if (reward::sim_bar(&shifted, &st).unwrap() - s).abs() > 1e-9 {
            bad.push(format!("grid {i}: not shift invariant"));
        }
        if reward::sim_raw(&z, [e.as_slice()]).unwrap() != s {
            bad.push(format!("grid {i}: singleton sim_raw != sim_bar"));
        }

        let probs: Vec<f64> = z.iter().map(|v| (1.0 / (1.0 + (-v).exp())).clamp(eps, 1.0 - eps)).collect();
        let airl: Vec<f64> = probs.iter().map(|p| p.ln() - (1.0 - p).ln()).collect();
        for a in [Aggregator::Mean, Aggregator::Max, Aggregator::Min, Aggregator::Median] {
            if (reward::aggregate(&airl, a) - oracle_aggregate(&airl, a)).abs() > 1e-12 {
                bad.push(format!("grid {i}: {a} aggregator"));
            }
        }
        let aggr = oracle_aggregate(&airl, Aggregator::Mean);
        let sim = oracle_sim(&z, &e);
        let step = rng.gen_range(0..1000);
        for variant in [Variant::Weight, Variant::Bonus] {
            let mut cfg = RewardConfig::for_variant(variant);
            cfg.lambda_decay = rng.gen_range(0.0..1e-3);
            let lam = (cfg.lambda - cfg.lambda_decay * step as f64).max(0.0);
            let want = match variant {
                Variant::Weight => cfg.scale * lam * sim * aggr,
                _ => cfg.scale * (lam * sim + aggr),
            };
            let got = compose_reward(&z, &cfg, Some(&st), step).unwrap().reward;
            if (got - want).abs() > COMPOSE_TOL * want.abs().max(1.0) {
                bad.push(format!("grid {i}: {variant} {got} vs {want}"));
            }
        }
    }
    let took = start.elapsed();
    if took >= Duration::from_secs(30) {
        bad.push(format!("runtime {took:?}"));
    }
    Outcome {
        pass: bad.is_empty(),
        detail: if bad.is_empty() {
            "1000 random grids: simplex, sim_bar range/identity/shift, singleton sim_raw, weight/bonus composition, 4 aggregators".into()
        } else {
            format!("{} violations, first: {}", bad.len(), bad[0])
        },
    }
}

/// Expert pairs are bright in the top half, agent pairs in the bottom half.
fn half_images(rng: &mut ChaCha8Rng, n: usize, c: usize, s: usize, top: bool) -> Tensor {
    let mut data = Vec::with_capacity(n * c * s * s);
    for _ in 0..n * c {
        for r in 0..s {
            let bright = (r < s / 2) == top;
            for _ in 0..s {
                data.push(if bright { rng.gen_range(0.8..1.0) } else { rng.gen_range(0.0..0.2) });
            }
        }
    }
    Tensor::new(vec![n, c, s, s], data).unwrap()
}

fn learnability() -> Outcome {
    let start = Instant::now();
    let smoke = TrainConfig::smoke();
    let cfg = DiscriminatorConfig {
        frame_stack: smoke.frame_stack,
        image_size: smoke.image_size,
        ..DiscriminatorConfig::default()
    };
    let (c, s) = (2 * cfg.frame_stack, cfg.image_size);
    let mut disc = Discriminator::new(cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut last = f64::NAN;
    for _ in 0..200 {
        let e = half_images(&mut rng, 32, c, s, true);
        let a = half_images(&mut rng, 32, c, s, false);
        last = disc.update(&e, &a, &mut rng).unwrap().loss;
    }
    let mut held = ChaCha8Rng::seed_from_u64(1234);
    let (e, a) = (half_images(&mut held, 64, c, s, true), half_images(&mut held, 64, c, s, false));
    let final_loss = disc.loss(&e, &a).unwrap();
    let mean = |t: Tensor| t.data().iter().sum::<f64>() / t.numel() as f64;
    let pe = mean(disc.probs(&e).unwrap());
    let pa = mean(disc.probs(&a).unwrap());
    let took = start.elapsed();
    Outcome {
        pass: last < LEARN_LOSS && pe > LEARN_EXPERT_P && pa < LEARN_AGENT_P && took < Duration::from_secs(120),
        detail: format!(
            "loss after 200 updates {last:.4} (held-out {final_loss:.4}) < {LEARN_LOSS}; held-out mean p expert {pe:.4} > {LEARN_EXPERT_P}, agent {pa:.4} < {LEARN_AGENT_P}"
        ),
    }
}

struct SmokeRun {
    outcome: TrainOutcome,
    wall: Duration,
}

impl SmokeRun {
    fn final_return(&self) -> f64 {
        self.outcome.rows.last().map(|r| r.eval_return).unwrap_or(f64::NAN)
    }
}

fn smoke_config(root: &Path, seed: u64, aggregator: Aggregator, tag: &str) -> TrainConfig {
    let mut cfg = TrainConfig::smoke();
    cfg.seed = seed;
    cfg.reward.aggregator = aggregator;
    cfg.demo_path = root.join("demos.pail");
    cfg.out_dir = root.join(tag);
    cfg
}

fn smoke(root: &Path, seed: u64, aggregator: Aggregator, tag: &str) -> SmokeRun {
    let start = Instant::now();
    let outcome = trainer::train(smoke_config(root, seed, aggregator, tag)).unwrap();
    let wall = start.elapsed();
    eprintln!("  smoke run {tag}: final return {:.2} in {:.0}s", outcome.rows.last().unwrap().eval_return, wall.as_secs_f64());
    SmokeRun { outcome, wall }
}

fn baselines(expert: f64) -> String {
    let env = TrainConfig::smoke().env_config();
    let episodes = 100;
    let zero = rollout_returns(&env, 5, episodes, |_, _| Ok([0.0, 0.0])).unwrap().mean;
    let centre = rollout_returns(&env, 5, episodes, |_, s| {
        Ok(scripted_expert(&State { pos: s.pos, goal: [0.5, 0.5] }))
    })
    .unwrap()
    .mean;
    let random = trainer::random_policy_returns(&env, 5, episodes, 9).unwrap().mean;
    format!(
        "reference policies: zero action {:.0}%, centre-seeking {:.0}%, uniform random {:.0}% of expert",
        100.0 * zero / expert,
        100.0 * centre / expert,
        100.0 * random / expert
    )
}

fn explain_contrast(run: &SmokeRun) -> (f64, f64, f64) {
    let ck = run.outcome.out_dir.join(trainer::CHECKPOINT_FILE);
    let loaded = trainer::load_run(&ck).unwrap();
    let env = loaded.config.env_config();
    let expert = explain::rollout_pairs(&env, FrameSource::Expert, EXPLAIN_SEED, EXPLAIN_EPISODES).unwrap();
    let random = explain::rollout_pairs(&env, FrameSource::Random, EXPLAIN_SEED, EXPLAIN_EPISODES).unwrap();
    let mut worst: f64 = 0.0;
    let mut means = [0.0; 2];
    for (k, pairs) in [expert, random].iter().enumerate() {
        let rewards = explain::patch_rewards(&loaded.disc, &loaded.config.reward, pairs).unwrap();
        let maps = explain::explain_pairs(&loaded.disc, &loaded.config.reward, pairs).unwrap();
        for (r, (_, px)) in rewards.iter().zip(&maps) {
            worst = worst.max((px.sum() - r.sum()).abs());
        }
        means[k] = maps.iter().map(|(_, px)| px.mean()).sum::<f64>() / maps.len() as f64;
    }
    (means[0], means[1], worst)
}

fn synthetic_conservation() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst: f64 = 0.0;
    let spec = TrainConfig::smoke().arch;
    let g = spec.geometry((16, 16)).unwrap();
    for _ in 0..200 {
        let r = Grid::new(g.grid.0, g.grid.1, (0..g.cells()).map(|_| rng.gen_range(-5.0..5.0)).collect()).unwrap();
        let a = Grid::new(16, 16, (0..256).map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen::<f64>() }).collect()).unwrap();
        let px = explain::patch_to_pixels(&r, &g, &a).unwrap();
        worst = worst.max((px.sum() - r.sum()).abs());
    }
    worst
}

fn identical(a: &Path, b: &Path, file: &str) -> bool {
    std::fs::read(a.join(file)).unwrap() == std::fs::read(b.join(file)).unwrap()
}

fn main() {
    let keep = std::env::var_os("PATCHAIL_ACCEPTANCE_DIR").map(PathBuf::from);
    let tmp = tempfile::tempdir().unwrap();
    let root = keep.clone().unwrap_or_else(|| tmp.path().to_path_buf());
    std::fs::create_dir_all(&root).unwrap();

    let mut all = true;
    for (n, name, f) in [
        (1, "patch geometry", geometry as fn() -> Outcome),
        (2, "gradient suite", gradients),
        (3, "reward and similarity properties", reward_properties),
        (4, "discriminator learnability", learnability),
    ] {
        let t = Instant::now();
        let o = f();
        all &= report(n, name, t.elapsed(), &o);
    }

    let t = Instant::now();
    let demos = trainer::generate_demos(&TrainConfig::smoke().env_config(), DEMO_SEED, DEMO_EPISODES).unwrap();
    save_demos(&demos, root.join("demos.pail")).unwrap();
    let expert = demos.meta.mean_return();
    let mean_runs: Vec<SmokeRun> = SEEDS.iter().map(|&s| smoke(&root, s, Aggregator::Mean, &format!("mean_seed{s}"))).collect();
    let threshold = RETURN_FRACTION * expert;
    let finals: Vec<f64> = mean_runs.iter().map(SmokeRun::final_return).collect();
    let reached = finals.iter().filter(|&&r| r >= threshold).count();
    let slowest = mean_runs.iter().map(|r| r.wall).max().unwrap();
    let o5 = Outcome {
        pass: reached >= 2 && slowest < RUN_LIMIT,
        detail: format!(
            "final returns {} vs threshold {threshold:.1} (70% of expert {expert:.1}); {reached}/3 seeds reach it; slowest run {:.0}s < {}s; {}",
            finals.iter().map(|r| format!("{r:.1}")).collect::<Vec<_>>().join(", "),
            slowest.as_secs_f64(),
            RUN_LIMIT.as_secs(),
            baselines(expert)
        ),
    };
    all &= report(5, "end-to-end smoke benchmark", t.elapsed(), &o5);

    let t = Instant::now();
    let max_finals: Vec<f64> = SEEDS
        .iter()
        .map(|&s| smoke(&root, s, Aggregator::Max, &format!("max_seed{s}")).final_return())
        .collect();
    let wins = finals.iter().zip(&max_finals).filter(|(m, x)| m >= x).count();
    let o6 = Outcome {
        pass: wins >= 2,
        detail: format!(
            "mean {} vs max {}; mean >= max on {wins}/3 seeds (a directional trend only)",
            finals.iter().map(|r| format!("{r:.1}")).collect::<Vec<_>>().join(", "),
            max_finals.iter().map(|r| format!("{r:.1}")).collect::<Vec<_>>().join(", ")
        ),
    };
    all &= report(6, "aggregator ablation direction", t.elapsed(), &o6);

    let t = Instant::now();
    let synthetic = synthetic_conservation();
    let mut contrasts = Vec::new();
    let mut worst = synthetic;
    let mut ordered = 0;
    for (run, seed) in mean_runs.iter().zip(SEEDS) {
        let (e, r, w) = explain_contrast(run);
        worst = worst.max(w);
        ordered += usize::from(e > r);
        contrasts.push(format!("seed {seed}: expert {e:.4} vs random {r:.4}"));
    }
    let o7 = Outcome {
        pass: worst <= CONSERVATION_TOL && ordered == SEEDS.len(),
        detail: format!(
            "max conservation error {worst:.2e} <= {CONSERVATION_TOL:.0e}; mean pixel reward {}",
            contrasts.join("; ")
        ),
    };
    all &= report(7, "explainability conservation and contrast", t.elapsed(), &o7);

    let t = Instant::now();
    let repeat = smoke(&root, SEEDS[0], Aggregator::Mean, "mean_seed1_repeat");
    let (a, b) = (&mean_runs[0].outcome.out_dir, &repeat.outcome.out_dir);
    let same_log = identical(a, b, trainer::LOG_FILE);
    let same_ck = identical(a, b, trainer::CHECKPOINT_FILE);
    let o8 = Outcome {
        pass: same_log && same_ck,
        detail: format!("repeat of seed {}: log identical {same_log}, checkpoint identical {same_ck}", SEEDS[0]),
    };
    all &= report(8, "determinism", t.elapsed(), &o8);

    if let Some(dir) = keep {
        println!("run artifacts kept in {}", dir.display());
    }
    if !all {
        eprintln!("acceptance: at least one criterion failed");
        std::process::exit(1);
    }
    println!("acceptance: all 8 criteria passed");
}
