//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so every line reaches the output. Failed criteria are reported
//! in a summary line; set `ACCEPTANCE_STRICT=1` to also exit nonzero, which
//! otherwise would stop `cargo test` before the remaining test targets.

use std::io::Write;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use vdn_core::autodiff::finite_diff_check;
use vdn_core::bounds::{dirichlet, kl};
use vdn_core::distributions::{
    kl_gaussians, kl_gaussians_var, laplace_log_pdf_var, monte_carlo_kl, reparam_sample_var, DiagGaussian,
};
use vdn_core::experiments::{run_dg, run_toy_xor, DgSettings, ToyRun, Variant};
use vdn_core::fdiv::{dual_value_exact, output_activation};
use vdn_core::models::{checkpoint, ImageShape, ModelConfig, Perceptual, VdnModel};
use vdn_core::nn::Group;
use vdn_core::objective::{total_loss, ObjectiveOptions, Phase};
use vdn_core::synth::{gen_multidomain, lodo_split, Dataset, DomainSpec};
use vdn_core::trainer::{epoch_batches, fit, step_inputs, train_step, TrainConfig, TrainState};
use vdn_core::{Result, Tape, Tensor, Var};

const IDENTITY_TOL: f64 = 1e-10;
const SLACK_TOL: f64 = -1e-10;
const THEORY_WORLDS: &str = "100";
const THEORY_BUDGET: Duration = Duration::from_secs(60);
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_POINTS: u64 = 10;
const MC_SAMPLES: usize = 1_000_000;
const MC_PAIRS: u64 = 20;
const MC_SIGMAS: f64 = 3.0;
const KL_UNIT_TOL: f64 = 1e-12;
const DUAL_PAIRS: u64 = 50;
const DUAL_CRITICS: usize = 100;
const DUAL_TOL: f64 = 1e-9;
const AUTODIFF_BUDGET: Duration = Duration::from_secs(120);
const TOY_SEEDS: u64 = 10;
const TOY_ACCURACY: f64 = 0.90;
const TOY_BUDGET: Duration = Duration::from_secs(300);
const DG_SEEDS: u64 = 3;
const DG_HOLDOUTS: usize = 4;
const DG_MARGIN: f64 = 0.03;
const DG_BUDGET: Duration = Duration::from_secs(30 * 60);
const ENGINEERING_STEPS: u64 = 100;
const CADENCE: usize = 5;

struct Ledger {
    failed: Vec<String>,
}

impl Ledger {
    fn record(&mut self, name: &str, pass: bool, detail: String) {
        println!("ACCEPTANCE {} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        std::io::stdout().flush().ok();
        if !pass {
            self.failed.push(name.to_string());
        }
    }
}

fn verify(suite: &str) -> (Value, Duration) {
    let t = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_vdn"))
        .args(["verify", "--suite", suite, "--worlds", THEORY_WORLDS, "--seed", "1"])
        .env_remove("VDN_SEED")
        .output()
        .expect("run vdn verify");
    let report: Value = serde_json::from_slice(&out.stdout).expect("verify prints JSON");
    let code = out.status.code();
    assert_eq!(code == Some(0), report["pass"] == true, "exit code must mirror the report");
    (report["suites"][0].clone(), t.elapsed())
}

fn theory(l: &mut Ledger) {
    let (r, t) = verify("lemma1");
    let worst = r["worst"].as_f64().unwrap();
    l.record(
        "theory/lemma1",
        worst < IDENTITY_TOL && t < THEORY_BUDGET,
        format!("max residual {worst:.3e} over 100 worlds (< {IDENTITY_TOL:e}), {t:.2?}"),
    );
    for (name, suite) in [("theory/thm1", "thm1"), ("theory/thm2", "thm2")] {
        let (r, t) = verify(suite);
        let worst = r["worst"].as_f64().unwrap();
        l.record(
            name,
            worst >= SLACK_TOL && t < THEORY_BUDGET,
            format!(
                "min slack {worst:.3e} (>= {SLACK_TOL:e}), {} of 100 worlds violate, worst world seed {}, {t:.2?}",
                r["failures"], r["worst_world_seed"]
            ),
        );
    }
    let (r, t) = verify("relax");
    let worst = r["worst"].as_f64().unwrap();
    let rho = r["ratio_m_spearman"].as_f64().unwrap();
    l.record(
        "theory/relax",
        worst >= SLACK_TOL && rho > 0.0 && t < THEORY_BUDGET,
        format!(
            "min slack {worst:.3e} (>= {SLACK_TOL:e}), {} of 100 worlds violate; rank correlation of ratio k and M {rho:.3} (> 0); {t:.2?}",
            r["failures"]
        ),
    );
}

type OpFn = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

/// Weighted sum so every output coordinate gets a distinct weight.
fn reduce(t: &mut Tape, y: Var) -> Result<Var> {
    let shape = t.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| (i % 7) as f64 * 0.25 - 0.7).collect())?;
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn halves(t: &mut Tape, x: Var, rows: usize) -> Result<(Var, Var)> {
    Ok((t.slice(x, 0, 0, rows)?, t.slice(x, 0, rows, rows)?))
}

/// Differentiable ops with the input shape and value range of their test
/// points.
fn op_table() -> Vec<(&'static str, Vec<usize>, (f64, f64), OpFn)> {
    let mut v: Vec<(&'static str, Vec<usize>, (f64, f64), OpFn)> = Vec::new();
    let binary = |f: fn(&mut Tape, Var, Var) -> Result<Var>| -> OpFn {
        Box::new(move |t: &mut Tape, x| {
            let (a, b) = halves(t, x, 2)?;
            let y = f(t, a, b)?;
            reduce(t, y)
        })
    };
    v.push(("add", vec![4, 3], (-2.0, 2.0), binary(|t, a, b| t.add(a, b))));
    v.push(("sub", vec![4, 3], (-2.0, 2.0), binary(|t, a, b| t.sub(a, b))));
    v.push(("mul", vec![4, 3], (-2.0, 2.0), binary(|t, a, b| t.mul(a, b))));
    v.push(("div", vec![4, 3], (0.5, 2.0), binary(|t, a, b| t.div(a, b))));
    let unary = |f: fn(&mut Tape, Var) -> Result<Var>| -> OpFn {
        Box::new(move |t: &mut Tape, x| {
            let y = f(t, x)?;
            reduce(t, y)
        })
    };
    let r = (-2.0, 2.0);
    v.push(("neg", vec![2, 3], r, unary(|t, x| Ok(t.neg(x)))));
    v.push(("scale", vec![2, 3], r, unary(|t, x| Ok(t.scale(x, 1.7)))));
    v.push(("offset", vec![2, 3], r, unary(|t, x| Ok(t.offset(x, 0.3)))));
    v.push(("exp", vec![2, 3], r, unary(|t, x| Ok(t.exp(x)))));
    v.push(("log", vec![2, 3], (0.2, 3.0), unary(|t, x| t.log(x))));
    v.push(("tanh", vec![2, 3], r, unary(|t, x| Ok(t.tanh(x)))));
    v.push(("relu", vec![2, 3], r, unary(|t, x| Ok(t.relu(x)))));
    v.push(("leaky_relu", vec![2, 3], r, unary(|t, x| Ok(t.leaky_relu(x, 0.2)))));
    v.push(("softplus", vec![2, 3], r, unary(|t, x| Ok(t.softplus(x)))));
    v.push(("abs", vec![2, 3], r, unary(|t, x| Ok(t.abs(x)))));
    v.push(("clamp", vec![2, 3], r, unary(|t, x| Ok(t.clamp(x, -1.0, 1.0)))));
    v.push(("sum", vec![2, 3], r, unary(|t, x| Ok(t.sum(x)))));
    v.push(("mean", vec![2, 3], r, unary(|t, x| Ok(t.mean(x)))));
    v.push(("sum_axis0", vec![2, 3], r, unary(|t, x| t.sum_axis(x, 0))));
    v.push(("sum_axis1", vec![2, 3], r, unary(|t, x| t.sum_axis(x, 1))));
    v.push(("mean_axis1", vec![2, 3], r, unary(|t, x| t.mean_axis(x, 1))));
    v.push(("max_axis1", vec![2, 3], r, unary(|t, x| t.max_axis(x, 1))));
    v.push(("broadcast", vec![3], r, unary(|t, x| t.broadcast(x, &[4, 3]))));
    v.push(("reshape", vec![2, 3], r, unary(|t, x| t.reshape(x, &[3, 2]))));
    v.push(("slice", vec![2, 3], r, unary(|t, x| t.slice(x, 1, 1, 2))));
    v.push((
        "matmul",
        vec![12],
        r,
        unary(|t, x| {
            let a = t.slice(x, 0, 0, 6)?;
            let a = t.reshape(a, &[2, 3])?;
            let b = t.slice(x, 0, 6, 6)?;
            let b = t.reshape(b, &[3, 2])?;
            t.matmul(a, b)
        }),
    ));
    v.push((
        "concat",
        vec![4, 3],
        r,
        unary(|t, x| {
            let (a, b) = halves(t, x, 2)?;
            t.concat(&[a, b], 1)
        }),
    ));
    v.push(("softmax_cross_entropy", vec![3, 4], (-3.0, 3.0), unary(|t, x| t.softmax_cross_entropy(x, &[0, 3, 1]))));
    v.push((
        "reparam_sample",
        vec![2, 3],
        r,
        unary(|t, x| {
            let (mu, lv) = halves(t, x, 1)?;
            reparam_sample_var(t, mu, lv, Tensor::new(vec![1, 3], vec![0.3, -1.1, 0.8])?)
        }),
    ));
    v.push((
        "gaussian_kl",
        vec![4, 3],
        r,
        unary(|t, x| {
            let (mu, lv) = halves(t, x, 2)?;
            kl_gaussians_var(t, mu, lv, &DiagGaussian::new(vec![0.5, -0.2, 0.0], vec![0.3, -0.4, 0.1])?)
        }),
    ));
    v.push((
        "laplace_log_pdf",
        vec![4, 3],
        r,
        unary(|t, x| {
            let (a, b) = halves(t, x, 2)?;
            laplace_log_pdf_var(t, a, b, 0.7)
        }),
    ));
    v.push(("critic_activation", vec![2, 3], r, unary(|t, x| Ok(output_activation(t, x)))));
    v
}

fn random_point(shape: &[usize], (lo, hi): (f64, f64), rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn small_model(seed: u64, reparameterize: bool) -> VdnModel {
    VdnModel::new(ModelConfig {
        input_dim: 12,
        image: Some(ImageShape {
            height: 2,
            width: 2,
            channels: 3,
        }),
        zc_dim: 3,
        zd_dim: 2,
        hidden: 6,
        critic_hidden: 5,
        classes: 3,
        domains: 2,
        reparameterize,
        perceptual: Perceptual::Random { width: 4 },
        init_seed: seed,
        ..ModelConfig::default()
    })
    .unwrap()
}

/// Worst relative error of both phase losses over every trainable parameter
/// coordinate. Parameters are jittered off their zero-bias init, which puts
/// dead ReLU rows exactly on a kink.
fn composed_loss_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = small_model(seed, seed % 2 == 1);
    for p in model.params.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let x = random_point(&[4, 12], (-1.0, 1.0), &mut rng);
    let inputs = step_inputs(&model, x, vec![0, 1, 2, 1], vec![0, 0, 1, 1], &[0, 1], &mut rng).unwrap();
    let opts = ObjectiveOptions::default();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for phase in [Phase::Generator, Phase::Critic] {
        let ev = total_loss(&model, &inputs, &opts, phase).unwrap();
        for (i, g) in ev.grads.iter().enumerate() {
            let Some(g) = g else { continue };
            for (j, &a) in g.iter().enumerate() {
                let at = |delta: f64| {
                    let mut m = model.clone();
                    let p = m.params.iter_mut().nth(i).unwrap();
                    p.value.data_mut()[j] += delta;
                    total_loss(&m, &inputs, &opts, phase).unwrap().report.total
                };
                let numeric = (at(h) - at(-h)) / (2.0 * h);
                worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
            }
        }
    }
    worst
}

fn autodiff(l: &mut Ledger) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: (f64, &str) = (0.0, "");
    let table = op_table();
    for (name, shape, range, f) in &table {
        for _ in 0..GRAD_POINTS {
            let p = random_point(shape, *range, &mut rng);
            let e = finite_diff_check(f, &p, 1e-6).unwrap();
            if e >= worst.0 {
                worst = (e, name);
            }
        }
    }
    let composed = (0..GRAD_POINTS).map(composed_loss_check).fold(0.0, f64::max);
    l.record(
        "autodiff/gradcheck",
        worst.0 < GRAD_REL_TOL && composed < GRAD_REL_TOL,
        format!(
            "{} ops x {GRAD_POINTS} points: worst rel error {:.2e} ({}); composed phase losses x {GRAD_POINTS} points: {composed:.2e} (< {GRAD_REL_TOL:e})",
            table.len(),
            worst.0,
            worst.1
        ),
    );

    let unit = kl_gaussians(
        &DiagGaussian::new(vec![1.0], vec![0.0]).unwrap(),
        &DiagGaussian::standard(1),
    )
    .unwrap();
    let mut worst_z: f64 = 0.0;
    for pair in 0..MC_PAIRS {
        let mut r = ChaCha8Rng::seed_from_u64(100 + pair);
        let d = r.random_range(1..=4);
        let g = |r: &mut ChaCha8Rng| {
            DiagGaussian::new(
                (0..d).map(|_| r.random_range(-1.5..1.5)).collect(),
                (0..d).map(|_| r.random_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        };
        let (q, p) = (g(&mut r), g(&mut r));
        let exact = kl_gaussians(&q, &p).unwrap();
        let (mc, se) = monte_carlo_kl(&q, &p, MC_SAMPLES, &mut r).unwrap();
        worst_z = worst_z.max((mc - exact).abs() / se);
    }
    l.record(
        "divergence/gaussian-kl",
        (unit - 0.5).abs() < KL_UNIT_TOL && worst_z <= MC_SIGMAS,
        format!(
            "KL(N(1,1)||N(0,1)) - 0.5 = {:.1e}; worst |MC - exact| over {MC_PAIRS} pairs = {worst_z:.2} standard errors (<= {MC_SIGMAS})",
            unit - 0.5
        ),
    );

    let (mut max_gap, mut max_opt_err) = (f64::NEG_INFINITY, 0.0f64);
    for pair in 0..DUAL_PAIRS {
        let mut r = ChaCha8Rng::seed_from_u64(500 + pair);
        let n = r.random_range(2..=8);
        let p = dirichlet(n, 1.0, &mut r);
        let q = dirichlet(n, 1.0, &mut r);
        let exact = kl(&q, &p);
        for _ in 0..DUAL_CRITICS {
            let t: Vec<f64> = (0..n).map(|_| -(r.random_range(-3.0f64..3.0)).exp()).collect();
            max_gap = max_gap.max(dual_value_exact(&p, &q, &t).unwrap() - exact);
        }
        let opt: Vec<f64> = q.iter().zip(&p).map(|(a, b)| -a / b).collect();
        max_opt_err = max_opt_err.max((dual_value_exact(&p, &q, &opt).unwrap() - exact).abs());
    }
    let elapsed = start.elapsed();
    l.record(
        "divergence/dual-lower-bound",
        max_gap <= DUAL_TOL && max_opt_err <= DUAL_TOL && elapsed < AUTODIFF_BUDGET,
        format!(
            "max(dual - KL) over {DUAL_PAIRS} pairs x {DUAL_CRITICS} critics = {max_gap:.2e}; |dual(T*) - KL| = {max_opt_err:.1e} (<= {DUAL_TOL:e}); suite {elapsed:.1?}"
        ),
    );
}

fn toy(l: &mut Ledger) {
    let start = Instant::now();
    let runs: Vec<(ToyRun, ToyRun)> = (0..TOY_SEEDS)
        .map(|s| (run_toy_xor(true, s).unwrap(), run_toy_xor(false, s).unwrap()))
        .collect();
    let elapsed = start.elapsed();
    let n = TOY_SEEDS as f64;
    let mean = |f: &dyn Fn(&(ToyRun, ToyRun)) -> f64| runs.iter().map(f).sum::<f64>() / n;
    let acc_with = mean(&|r| r.0.test_accuracy);
    let acc_without = mean(&|r| r.1.test_accuracy);
    let kl_with = mean(&|r| r.0.posterior_kl);
    let kl_without = mean(&|r| r.1.posterior_kl);
    let min_acc = runs
        .iter()
        .flat_map(|r| [r.0.test_accuracy, r.1.test_accuracy])
        .fold(f64::INFINITY, f64::min);
    l.record(
        "toy-xor/accuracy",
        acc_with >= TOY_ACCURACY && acc_without >= TOY_ACCURACY && elapsed < TOY_BUDGET,
        format!(
            "mean test accuracy with L_reg {acc_with:.4}, without {acc_without:.4} (>= {TOY_ACCURACY}); lowest single run {min_acc:.3}; {TOY_SEEDS} seeds in {elapsed:.1?}"
        ),
    );
    l.record(
        "toy-xor/regularizer-accuracy",
        acc_with - acc_without >= 0.0,
        format!("mean difference with - without = {:+.4} (>= 0)", acc_with - acc_without),
    );
    l.record(
        "toy-xor/posterior-kl",
        kl_with < kl_without,
        format!("mean final D(Q(z_c|x)||P(z_c)) with L_reg {kl_with:.4} < without {kl_without:.4}"),
    );
}

fn engineering_data() -> Dataset {
    let mut spec = DomainSpec::new(3, 3).unwrap();
    spec.image = ImageShape {
        height: 4,
        width: 4,
        channels: 3,
    };
    gen_multidomain(&spec, 10, &mut ChaCha8Rng::seed_from_u64(3)).unwrap().data
}

fn engineering_model(data: &Dataset, seed: u64) -> VdnModel {
    VdnModel::new(ModelConfig {
        input_dim: data.dim,
        image: data.image,
        zc_dim: 4,
        zd_dim: 2,
        hidden: 12,
        critic_hidden: 8,
        classes: data.classes,
        domains: data.domains,
        perceptual: Perceptual::Random { width: 6 },
        init_seed: seed,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn group_values(m: &VdnModel, critic: bool) -> Vec<u64> {
    Group::ALL
        .iter()
        .filter(|g| g.is_critic() == critic)
        .flat_map(|g| m.group_values(*g))
        .map(f64::to_bits)
        .collect()
}

fn engineering(l: &mut Ledger) {
    let data = engineering_data();

    // checkpoint round trip
    let model = VdnModel::new(ModelConfig {
        init_seed: 5,
        ..ModelConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    checkpoint::save(&model, &a).unwrap();
    let back = checkpoint::load(&a, Some(&model.config)).unwrap();
    checkpoint::save(&back, &b).unwrap();
    let bytes_equal = [checkpoint::MANIFEST_FILE, checkpoint::BLOB_FILE]
        .iter()
        .all(|f| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_point(&[10, model.config.input_dim], (-1.0, 1.0), &mut rng);
    let same_forward = model.predict(&x).unwrap() == back.predict(&x).unwrap()
        && model.content_posteriors(&x).unwrap() == back.content_posteriors(&x).unwrap();
    l.record(
        "engineering/checkpoint",
        bytes_equal && same_forward,
        format!("save->load->save byte-identical: {bytes_equal}; forward outputs identical on 10 inputs: {same_forward}"),
    );

    // reproducibility
    let (train, test) = lodo_split(&data, 1).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 8,
        gen_lr: 1e-3,
        critic_lr: 1e-3,
        seed: 21,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = engineering_model(&data, 2);
        let log = fit(&mut m, &train, &[("target", &test)], &cfg, true).unwrap();
        (m.flat_params().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), log)
    };
    let (p1, log1) = run();
    let (p2, log2) = run();
    l.record(
        "engineering/reproducible",
        p1 == p2 && log1 == log2,
        format!("two runs of {} steps: parameters bit-identical {}, logs identical {}", log1.steps, p1 == p2, log1 == log2),
    );

    // phase isolation and cadence over one run
    let mut m = engineering_model(&data, 3);
    let cfg = TrainConfig {
        gen_lr: 1e-3,
        critic_lr: 1e-3,
        critic_update_every: CADENCE,
        ..TrainConfig::default()
    };
    let sources = data.domains_present();
    let mut state = TrainState::new(&m, 8);
    let (mut leaks, mut cadence_errors, mut critic_moves) = (0, 0, Vec::new());
    for step in 1..=ENGINEERING_STEPS {
        let idx = epoch_batches(&data, 9, &mut state.rng).remove(0);
        let sub = data.subset(&idx);
        let xb = Tensor::new(vec![sub.len(), sub.dim], sub.x).unwrap();
        let inputs = step_inputs(&m, xb, sub.y, sub.d, &sources, &mut state.rng).unwrap();
        for phase in [Phase::Generator, Phase::Critic] {
            let ev = total_loss(&m, &inputs, &cfg.objective, phase).unwrap();
            for (p, g) in m.params.params().iter().zip(&ev.grads) {
                let nonzero = g.as_ref().is_some_and(|g| g.iter().any(|v| *v != 0.0));
                if !phase.trains(p.group) && nonzero {
                    leaks += 1;
                }
            }
        }
        let critic_before = group_values(&m, true);
        let perceptual = m.group_values(Group::Perceptual);
        train_step(&mut m, &mut state, &inputs, &cfg, 1.0).unwrap();
        if m.group_values(Group::Perceptual) != perceptual {
            leaks += 1;
        }
        let moved = group_values(&m, true) != critic_before;
        if moved {
            critic_moves.push(step);
        }
        if moved != (step % CADENCE as u64 == 0) {
            cadence_errors += 1;
        }
    }
    l.record(
        "engineering/phase-isolation",
        leaks == 0,
        format!("{leaks} out-of-phase gradients or frozen-parameter changes over {ENGINEERING_STEPS} steps"),
    );
    l.record(
        "engineering/critic-cadence",
        cadence_errors == 0,
        format!(
            "k={CADENCE}: critic moved at {} steps, first {:?}; {cadence_errors} steps off cadence",
            critic_moves.len(),
            &critic_moves[..critic_moves.len().min(4)]
        ),
    );
}

fn dg(l: &mut Ledger) {
    let start = Instant::now();
    let s = DgSettings::default();
    let mut means = Vec::new();
    for v in Variant::ALL {
        let mut accs = Vec::new();
        for seed in 0..DG_SEEDS {
            for h in 0..DG_HOLDOUTS {
                accs.push(run_dg(v, seed, h, &s).unwrap());
            }
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let cells: Vec<String> = accs.iter().map(|a| format!("{a:.3}")).collect();
        println!("  dg {:>10}: mean {mean:.4} [{}]", v.name(), cells.join(" "));
        means.push(mean);
    }
    let elapsed = start.elapsed();
    let [erm, info, post, both, full] = means[..] else { unreachable!() };
    l.record(
        "dg/full-vs-erm",
        full - erm >= DG_MARGIN && elapsed < DG_BUDGET,
        format!(
            "full {full:.4} - erm {erm:.4} = {:+.4} (>= {DG_MARGIN}) over {DG_SEEDS} seeds x {DG_HOLDOUTS} holdouts; suite {elapsed:.0?}",
            full - erm
        ),
    );
    let ordered = full >= both && both >= info.max(post) && info.max(post) >= erm;
    l.record(
        "dg/ablation-order",
        ordered,
        format!("full {full:.4} >= both {both:.4} >= max(info-gain {info:.4}, posterior {post:.4}) >= erm {erm:.4}"),
    );
}

fn main() {
    // libtest flags such as --nocapture or a name filter are accepted and ignored
    let mut l = Ledger { failed: Vec::new() };
    theory(&mut l);
    autodiff(&mut l);
    engineering(&mut l);
    toy(&mut l);
    dg(&mut l);
    if l.failed.is_empty() {
        println!("ACCEPTANCE all criteria passed");
    } else {
        println!("ACCEPTANCE {} criteria failed: {}", l.failed.len(), l.failed.join(", "));
        if std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
