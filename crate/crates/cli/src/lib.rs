//! The `vdn` command line: data generation, training, evaluation and the
//! theory checks.
//!
//! Exit codes: 0 success, 1 runtime failure (including a failed theory
//! check), 2 usage error, 3 a world rejected by the invariant gate.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use vdn_core::bounds::{self, BoundsError, DiscreteWorld, Suite, SuiteReport};
use vdn_core::experiments::{fit_toy_xor, ToyRun};
use vdn_core::kv::KvMap;
use vdn_core::models::{checkpoint, ModelConfig, VdnModel, MODEL_KEYS};
use vdn_core::synth::{gen_multidomain, gen_xor, load_dataset, lodo_split, save_dataset, Dataset, DomainSpec};
use vdn_core::trainer::{evaluate, fit, Accuracy, TrainConfig, TrainLog, TRAIN_KEYS};

/// Version of every JSON document and of the metrics CSV layout.
pub const SCHEMA_VERSION: u32 = 1;
pub const METRICS_HEADER: &str = "epoch,split,domain,loss_task,loss_reg,loss_gan,loss_rec,accuracy";
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_GATE: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "vdn", version, about = "Variational disentanglement for domain generalization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset (manifest.txt + data.bin).
    GenData(GenDataArgs),
    /// Train a model; writes metrics.csv, run_manifest.json and a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Check the divergence identities and bounds on random discrete worlds.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Xor,
    Multidomain,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub task: Task,
    /// Examples (xor) or examples per domain (multidomain).
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    #[arg(long, default_value_t = 4)]
    pub domains: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, env = "VDN_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TrainMode {
    /// Train on `--data` with the given configuration.
    Standard,
    /// The XOR toy pair, with and without the information-gain term.
    ToyXor,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// `key = value` file with model and training keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, required_if_eq("mode", "standard"))]
    pub data: Option<PathBuf>,
    /// Domain excluded from training and reported as the target split.
    #[arg(long)]
    pub holdout_domain: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long, env = "VDN_SEED")]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = TrainMode::Standard)]
    pub mode: TrainMode,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Model config the checkpoint must match.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long, default_value = "all", value_parser = ["all", "lemma1", "thm1", "relax", "thm2"])]
    pub suite: String,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    pub worlds: u64,
    #[arg(long, env = "VDN_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Check one world from a JSON file instead of random worlds.
    #[arg(long, conflicts_with = "worlds")]
    pub world: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Outcome of a command that ran to completion.
#[derive(Debug, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    /// Ran, but a check failed.
    Failed,
    /// Input rejected by the invariant gate.
    Rejected,
}

impl Outcome {
    pub fn code(&self) -> i32 {
        match self {
            Outcome::Ok => 0,
            Outcome::Failed => EXIT_FAILURE,
            Outcome::Rejected => EXIT_GATE,
        }
    }
}

pub fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::GenData(a) => gen_data(&a).map(|_| Outcome::Ok),
        Command::Train(a) => train(&a).map(|_| Outcome::Ok),
        Command::Eval(a) => eval(&a).map(|_| Outcome::Ok),
        Command::Verify(a) => verify(&a),
    }
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let n = a.n as usize;
    let (data, task) = match a.task {
        Task::Xor => (gen_xor(n, &mut rng)?, "xor"),
        Task::Multidomain => {
            let spec = DomainSpec::new(a.domains, a.classes)?;
            (gen_multidomain(&spec, n, &mut rng)?.data, "multidomain")
        }
    };
    for w in &data.warnings {
        eprintln!("warning: {w}");
    }
    save_dataset(&data, task, &a.out).with_context(|| format!("writing dataset to {}", a.out.display()))?;
    Ok(())
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Model and training configuration read from a `key = value` file.
pub fn read_config(path: Option<&Path>, model_base: &ModelConfig) -> Result<(ModelConfig, TrainConfig)> {
    let kv = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            KvMap::parse(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => KvMap::default(),
    };
    let valid: Vec<&str> = MODEL_KEYS.iter().chain(TRAIN_KEYS).copied().collect();
    kv.check_keys(&valid)?;
    let model = ModelConfig::from_kv(&kv, model_base)?;
    let train = TrainConfig::from_kv(&kv, &TrainConfig::default())?;
    Ok((model, train))
}

/// All resolved keys, in a form `--config` accepts.
pub fn resolved_config(model: &ModelConfig, train: &TrainConfig) -> String {
    let mut kv = model.to_kv();
    let t = train.to_kv();
    for k in t.keys() {
        kv.insert(k, t.get_str(k).unwrap_or_default());
    }
    kv.render()
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub schema_version: u32,
    pub code_version: String,
    pub mode: String,
    pub seed: u64,
    pub holdout_domain: Option<usize>,
    pub data: Option<String>,
    pub out: String,
    /// Resolved configuration, also written to `config.txt`.
    pub config: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub outputs: Vec<String>,
}

fn write_manifest(dir: &Path, m: &RunManifest) -> Result<()> {
    fs::write(dir.join("run_manifest.json"), serde_json::to_string_pretty(m)? + "\n")?;
    Ok(())
}

/// Writes the metrics CSV: one row per epoch, split and domain, plus an
/// `all` row per split.
pub fn write_metrics(path: &Path, log: &TrainLog) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "{METRICS_HEADER}")?;
    for e in &log.epochs {
        let l = &e.losses;
        let row = |f: &mut dyn Write, split: &str, domain: &str, acc: f64| {
            writeln!(
                f,
                "{},{split},{domain},{},{},{},{},{}",
                e.epoch, l.l_task, l.l_reg, l.l_gan, l.l_rec, acc
            )
        };
        for (split, acc) in &e.eval {
            for &(d, c, t) in &acc.per_domain {
                row(&mut f, split, &d.to_string(), c as f64 / t as f64)?;
            }
            row(&mut f, split, "all", acc.overall())?;
        }
    }
    f.flush()?;
    Ok(())
}

/// One line per training example drawn: batch number and its domain.
fn write_batches(path: &Path, log: &TrainLog, train: &Dataset) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "batch,domain")?;
    for (b, idx) in log.batches.iter().enumerate() {
        for &i in idx {
            writeln!(f, "{b},{}", train.d[i])?;
        }
    }
    f.flush()?;
    Ok(())
}

fn model_base_for(data: &Dataset) -> ModelConfig {
    ModelConfig {
        input_dim: data.dim,
        image: data.image,
        classes: data.classes,
        domains: data.domains,
        ..ModelConfig::default()
    }
}

pub fn train(a: &TrainArgs) -> Result<()> {
    if a.mode == TrainMode::ToyXor {
        return train_toy(a);
    }
    let data_dir = a.data.as_ref().context("--data is required")?;
    let data = load_dataset(data_dir).with_context(|| format!("loading data from {}", data_dir.display()))?;
    let (model_cfg, mut cfg) = read_config(a.config.as_deref(), &model_base_for(&data))?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    model_cfg.validate()?;
    cfg.validate()?;
    if data.dim != model_cfg.input_dim {
        bail!("data dimension {} does not match input_dim {}", data.dim, model_cfg.input_dim);
    }
    let (train_set, target) = match a.holdout_domain {
        Some(h) => {
            let (tr, te) = lodo_split(&data, h)?;
            (tr, Some(te))
        }
        None => (data.clone(), None),
    };
    if train_set.is_empty() {
        bail!("no training examples left after holding out domain {:?}", a.holdout_domain);
    }

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let config_text = resolved_config(&model_cfg, &cfg);
    fs::write(a.out.join("config.txt"), &config_text)?;
    let mut manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        mode: "standard".into(),
        seed: cfg.seed,
        holdout_domain: a.holdout_domain,
        data: Some(data_dir.display().to_string()),
        out: a.out.display().to_string(),
        config: config_text,
        started_unix: unix_now(),
        finished_unix: None,
        outputs: ["config.txt", "metrics.csv", "batches.csv", "checkpoint"].map(String::from).to_vec(),
    };
    write_manifest(&a.out, &manifest)?;

    let mut model = VdnModel::new(model_cfg)?;
    let mut evals: Vec<(&str, &Dataset)> = vec![("train", &train_set)];
    if let Some(t) = &target {
        evals.push(("target", t));
    }
    let log = fit(&mut model, &train_set, &evals, &cfg, true)?;
    write_metrics(&a.out.join("metrics.csv"), &log)?;
    write_batches(&a.out.join("batches.csv"), &log, &train_set)?;
    checkpoint::save(&model, &a.out.join("checkpoint"))?;

    manifest.finished_unix = Some(unix_now());
    write_manifest(&a.out, &manifest)?;
    if let Some(acc) = log.last_eval("target") {
        println!("target accuracy {:.4}", acc.overall());
    }
    Ok(())
}

#[derive(Serialize, Debug)]
struct ToyReport {
    schema_version: u32,
    seed: u64,
    with_reg: ToyJson,
    without_reg: ToyJson,
}

#[derive(Serialize, Debug)]
struct ToyJson {
    test_accuracy: f64,
    posterior_kl: f64,
}

impl From<ToyRun> for ToyJson {
    fn from(r: ToyRun) -> Self {
        ToyJson {
            test_accuracy: r.test_accuracy,
            posterior_kl: r.posterior_kl,
        }
    }
}

fn train_toy(a: &TrainArgs) -> Result<()> {
    if a.config.is_some() || a.data.is_some() {
        bail!("--mode toy-xor uses its fixed configuration and generated data; drop --config/--data");
    }
    let seed = a.seed.unwrap_or(0);
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        mode: "toy-xor".into(),
        seed,
        holdout_domain: None,
        data: None,
        out: a.out.display().to_string(),
        config: String::new(),
        started_unix: unix_now(),
        finished_unix: None,
        outputs: ["with_reg", "without_reg", "toy_xor.json"].map(String::from).to_vec(),
    };
    write_manifest(&a.out, &manifest)?;
    let mut runs = Vec::new();
    for (with_reg, name) in [(true, "with_reg"), (false, "without_reg")] {
        let (model, log) = fit_toy_xor(with_reg, seed)?;
        let dir = a.out.join(name);
        fs::create_dir_all(&dir)?;
        write_metrics(&dir.join("metrics.csv"), &log)?;
        checkpoint::save(&model, &dir.join("checkpoint"))?;
        runs.push(ToyRun::from_log(&log));
    }
    let report = ToyReport {
        schema_version: SCHEMA_VERSION,
        seed,
        with_reg: runs[0].into(),
        without_reg: runs[1].into(),
    };
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(a.out.join("toy_xor.json"), json.clone() + "\n")?;
    println!("{json}");
    manifest.finished_unix = Some(unix_now());
    write_manifest(&a.out, &manifest)
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct DomainAccuracy {
    pub domain: usize,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub schema_version: u32,
    pub examples: usize,
    pub accuracy: f64,
    /// Unweighted mean over the domains present.
    pub mean_domain_accuracy: f64,
    pub per_domain: Vec<DomainAccuracy>,
}

impl From<&Accuracy> for EvalReport {
    fn from(a: &Accuracy) -> Self {
        EvalReport {
            schema_version: SCHEMA_VERSION,
            examples: a.total,
            accuracy: a.overall(),
            mean_domain_accuracy: a.domain_mean(),
            per_domain: a
                .per_domain
                .iter()
                .map(|&(domain, correct, total)| DomainAccuracy {
                    domain,
                    correct,
                    total,
                    accuracy: correct as f64 / total as f64,
                })
                .collect(),
        }
    }
}

pub fn eval(a: &EvalArgs) -> Result<EvalReport> {
    let expected = match &a.config {
        Some(p) => {
            // the checkpoint decides shapes the config leaves unset
            let stored = checkpoint::load(&a.checkpoint, None)?;
            Some(read_config(Some(p), &stored.config)?.0)
        }
        None => None,
    };
    let model = checkpoint::load(&a.checkpoint, expected.as_ref())
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let data = load_dataset(&a.data).with_context(|| format!("loading data from {}", a.data.display()))?;
    if data.dim != model.config.input_dim || data.classes > model.config.classes {
        bail!(
            "checkpoint expects {} inputs and {} classes, data has {} and {}",
            model.config.input_dim,
            model.config.classes,
            data.dim,
            data.classes
        );
    }
    let report = EvalReport::from(&evaluate(&model, &data)?);
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &a.out {
        fs::write(out, json.clone() + "\n")?;
    }
    println!("{json}");
    Ok(report)
}

#[derive(Serialize, Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub schema_version: u32,
    pub seed: u64,
    pub worlds: usize,
    pub suites: Vec<SuiteReport>,
    pub pass: bool,
}

/// A discrete world as stored on disk; `q_x` defaults to `p(x)`.
#[derive(Deserialize, Debug)]
pub struct WorldFile {
    pub nx: usize,
    pub nc: usize,
    pub nd: usize,
    pub joint: Vec<f64>,
    pub q_c_given_x: Vec<f64>,
    pub q_x: Option<Vec<f64>>,
}

#[derive(Serialize, Debug)]
struct WorldCheck {
    x: usize,
    lemma1_residual: f64,
    thm1_slack: f64,
    relax_m: f64,
    relax_slack: f64,
}

#[derive(Serialize, Debug)]
struct WorldReport {
    schema_version: u32,
    checks: Vec<WorldCheck>,
    pass: bool,
}

fn verify_world(path: &Path) -> Result<Outcome> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let f: WorldFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let mut w = DiscreteWorld {
        nx: f.nx,
        nc: f.nc,
        nd: f.nd,
        joint: f.joint,
        q_c_given_x: f.q_c_given_x,
        q_x: Vec::new(),
    };
    w.q_x = match f.q_x {
        Some(q) => q,
        None if w.joint.len() == w.nx * w.nc * w.nd => w.p_x(),
        None => Vec::new(),
    };
    if let Err(e) = w.validate() {
        eprintln!("world rejected: {e}");
        return Ok(Outcome::Rejected);
    }
    let mut checks = Vec::new();
    for x in 0..w.nx {
        let checked = (|| -> Result<WorldCheck, BoundsError> {
            let r = bounds::check_relaxation(&w, x)?;
            Ok(WorldCheck {
                x,
                lemma1_residual: bounds::check_lemma1(&w, x)?,
                thm1_slack: bounds::check_thm1(&w, x, None)?.slack,
                relax_m: r.m,
                relax_slack: r.slack,
            })
        })();
        match checked {
            Ok(c) => checks.push(c),
            // points outside the data support carry no claim
            Err(BoundsError::Contract(_)) => {}
            Err(e) => bail!(e),
        }
    }
    let pass = checks.iter().all(|c| {
        c.lemma1_residual < bounds::CHECK_TOL && c.thm1_slack >= -bounds::CHECK_TOL && c.relax_slack >= -bounds::CHECK_TOL
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&WorldReport {
            schema_version: SCHEMA_VERSION,
            checks,
            pass
        })?
    );
    Ok(if pass { Outcome::Ok } else { Outcome::Failed })
}

pub fn verify_report(suites: &[Suite], worlds: usize, seed: u64) -> Result<VerifyReport> {
    let reports = suites
        .iter()
        .map(|&s| bounds::run_suite(s, worlds, seed))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(VerifyReport {
        schema_version: SCHEMA_VERSION,
        seed,
        worlds,
        pass: reports.iter().all(|r| r.pass),
        suites: reports,
    })
}

pub fn verify(a: &VerifyArgs) -> Result<Outcome> {
    if let Some(p) = &a.world {
        return verify_world(p);
    }
    let suites = Suite::parse(&a.suite).context("unknown suite")?;
    let report = verify_report(&suites, a.worlds as usize, a.seed)?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &a.out {
        fs::write(out, json.clone() + "\n")?;
    }
    println!("{json}");
    for r in report.suites.iter().filter(|r| !r.pass) {
        let name = r.suite.name();
        match r.failing_world_seeds.first() {
            Some(ws) => eprintln!(
                "{name}: {} of {} worlds failed; first failing world seed {ws}; replay with `vdn verify --suite {name} --worlds {} --seed {}`",
                r.failures, r.worlds, a.worlds, a.seed
            ),
            None => eprintln!(
                "{name}: rank correlation of disentanglement ratio and M is {:?}, not positive; replay with `vdn verify --suite {name} --worlds {} --seed {}`",
                r.ratio_m_spearman, a.worlds, a.seed
            ),
        }
    }
    Ok(if report.pass { Outcome::Ok } else { Outcome::Failed })
}
