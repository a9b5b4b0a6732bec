//! The six trainable networks (content encoder, style encoder, task head,
//! generator, image critic, dual critic) and the frozen perceptual map.
//!
//! Images are flattened in height-width-channel order so that the channel
//! vector of each pixel is contiguous.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::distributions::{reparam_sample_var, DiagGaussian};
use crate::error::{Error, Result};
use crate::fdiv::DualCritic;
use crate::kv::{KvError, KvMap};
use crate::nn::{Activation, Bindings, Group, Linear, Mlp, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.pixels() * self.channels
    }
}

/// Feature space used by the reconstruction loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Perceptual {
    /// Raw pixels; reduces the reconstruction term to a pixel L1 loss.
    Identity,
    /// Frozen random two-layer map of the given output width.
    Random { width: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub image: Option<ImageShape>,
    pub zc_dim: usize,
    pub zd_dim: usize,
    pub hidden: usize,
    pub critic_hidden: usize,
    pub classes: usize,
    pub domains: usize,
    pub reparameterize: bool,
    pub toy_mode: bool,
    pub perceptual: Perceptual,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 12 * 12 * 3,
            image: Some(ImageShape {
                height: 12,
                width: 12,
                channels: 3,
            }),
            zc_dim: 8,
            zd_dim: 4,
            hidden: 64,
            critic_hidden: 64,
            classes: 4,
            domains: 4,
            reparameterize: false,
            toy_mode: false,
            perceptual: Perceptual::Random { width: 32 },
            init_seed: 0,
        }
    }
}

pub const MODEL_KEYS: &[&str] = &[
    "input_dim",
    "image_height",
    "image_width",
    "image_channels",
    "zc_dim",
    "zd_dim",
    "hidden",
    "critic_hidden",
    "classes",
    "domains",
    "reparameterize",
    "toy_mode",
    "perceptual",
    "perceptual_width",
    "init_seed",
];

impl ModelConfig {
    /// The XOR toy network: FC(3,3) + ReLU, mean and log-variance heads
    /// FC(3,2), task head FC(2,1), single pseudo-domain.
    pub fn toy() -> Self {
        ModelConfig {
            input_dim: 3,
            image: None,
            zc_dim: 2,
            zd_dim: 1,
            hidden: 3,
            critic_hidden: 16,
            classes: 2,
            domains: 1,
            reparameterize: true,
            toy_mode: true,
            perceptual: Perceptual::Identity,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("input_dim", self.input_dim),
            ("zc_dim", self.zc_dim),
            ("zd_dim", self.zd_dim),
            ("hidden", self.hidden),
            ("critic_hidden", self.critic_hidden),
            ("classes", self.classes),
            ("domains", self.domains),
        ];
        for (k, v) in extents {
            if v == 0 {
                return Err(Error::Contract(format!("model config: {k} must be positive")));
            }
        }
        if let Some(img) = self.image {
            if img.len() != self.input_dim || img.len() == 0 {
                return Err(Error::Contract(format!(
                    "model config: image {}x{}x{} does not match input_dim {}",
                    img.height, img.width, img.channels, self.input_dim
                )));
            }
        }
        if let Perceptual::Random { width: 0 } = self.perceptual {
            return Err(Error::Contract("model config: perceptual width must be positive".into()));
        }
        if self.toy_mode {
            if self.zc_dim != 2 || self.input_dim != 3 || self.hidden != 3 || self.classes != 2 {
                return Err(Error::Contract(
                    "toy mode requires input 3, hidden 3, z_c dim 2 and 2 classes".into(),
                ));
            }
        } else if self.classes < 2 {
            return Err(Error::Contract("model config: need at least 2 classes".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::default();
        m.insert("input_dim", self.input_dim);
        let img = self.image.unwrap_or(ImageShape {
            height: 0,
            width: 0,
            channels: 0,
        });
        m.insert("image_height", img.height);
        m.insert("image_width", img.width);
        m.insert("image_channels", img.channels);
        m.insert("zc_dim", self.zc_dim);
        m.insert("zd_dim", self.zd_dim);
        m.insert("hidden", self.hidden);
        m.insert("critic_hidden", self.critic_hidden);
        m.insert("classes", self.classes);
        m.insert("domains", self.domains);
        m.insert("reparameterize", self.reparameterize);
        m.insert("toy_mode", self.toy_mode);
        match self.perceptual {
            Perceptual::Identity => {
                m.insert("perceptual", "identity");
                m.insert("perceptual_width", 0);
            }
            Perceptual::Random { width } => {
                m.insert("perceptual", "random");
                m.insert("perceptual_width", width);
            }
        }
        m.insert("init_seed", self.init_seed);
        m
    }

    /// Reads a config from `m`, starting from `base` for absent keys.
    pub fn from_kv(m: &KvMap, base: &ModelConfig) -> std::result::Result<Self, KvError> {
        let mut c = base.clone();
        m.set("input_dim", &mut c.input_dim)?;
        let mut img = c.image.unwrap_or(ImageShape {
            height: 0,
            width: 0,
            channels: 0,
        });
        m.set("image_height", &mut img.height)?;
        m.set("image_width", &mut img.width)?;
        m.set("image_channels", &mut img.channels)?;
        c.image = (img.len() > 0).then_some(img);
        m.set("zc_dim", &mut c.zc_dim)?;
        m.set("zd_dim", &mut c.zd_dim)?;
        m.set("hidden", &mut c.hidden)?;
        m.set("critic_hidden", &mut c.critic_hidden)?;
        m.set("classes", &mut c.classes)?;
        m.set("domains", &mut c.domains)?;
        m.set("reparameterize", &mut c.reparameterize)?;
        m.set("toy_mode", &mut c.toy_mode)?;
        m.set("init_seed", &mut c.init_seed)?;
        let mut width = match c.perceptual {
            Perceptual::Random { width } => width,
            Perceptual::Identity => 32,
        };
        m.set("perceptual_width", &mut width)?;
        let kind: String = m.get("perceptual")?.unwrap_or_else(|| match c.perceptual {
            Perceptual::Identity => "identity".into(),
            Perceptual::Random { .. } => "random".into(),
        });
        c.perceptual = match kind.as_str() {
            "identity" => Perceptual::Identity,
            "random" => Perceptual::Random { width },
            other => {
                return Err(KvError::BadValue {
                    key: "perceptual".into(),
                    value: other.into(),
                    reason: "expected `identity` or `random`".into(),
                })
            }
        };
        Ok(c)
    }
}

#[derive(Clone, Debug)]
struct ContentEncoder {
    trunk: Mlp,
    mu: Linear,
    log_var: Option<Linear>,
}

#[derive(Clone, Debug)]
enum StyleEncoder {
    /// Per-pixel features, global average pooling, then a projection.
    Pooled {
        pixel: Linear,
        out: Linear,
        shape: ImageShape,
    },
    Dense(Mlp),
}

#[derive(Clone, Debug)]
struct PosteriorNets {
    style: StyleEncoder,
    generator: Mlp,
    image_critic: Mlp,
    perceptual: Option<Mlp>,
}

/// Output of the encoders for a batch.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// Mean of Q(z_c | x); the deterministic test-time feature.
    pub mu: Var,
    /// Log-variance of Q(z_c | x), present when reparameterizing.
    pub log_var: Option<Var>,
    /// Style code; absent in toy mode.
    pub z_d: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct VdnModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    content: ContentEncoder,
    task: Linear,
    dual: DualCritic,
    posterior: Option<PosteriorNets>,
}

fn check_batch(tape: &Tape, x: Var, width: usize, what: &str) -> Result<usize> {
    let s = tape.shape(x);
    if s.len() != 2 || s[1] != width {
        return Err(Error::Contract(format!(
            "{what}: expected [batch, {width}], got {s:?}"
        )));
    }
    Ok(s[0])
}

fn one_hot(indices: &[usize], n: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[indices.len(), n]);
    for (i, &k) in indices.iter().enumerate() {
        if k >= n {
            return Err(Error::Contract(format!("index {k} out of range for {n}")));
        }
        t.data_mut()[i * n + k] = 1.0;
    }
    Ok(t)
}

/// One-hot rows for `indices` over `n` categories.
pub fn one_hot_tags(indices: &[usize], n: usize) -> Result<Tensor> {
    one_hot(indices, n)
}

impl VdnModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        let c = &config;

        let trunk_widths = if c.toy_mode {
            vec![c.input_dim, c.hidden]
        } else {
            vec![c.input_dim, c.hidden, c.hidden]
        };
        let trunk = Mlp::new(&mut params, "trunk", Group::ContentEncoder, &trunk_widths, Activation::Relu, &mut rng);
        let mu = Linear::new(&mut params, "mu", Group::ContentEncoder, c.hidden, c.zc_dim, &mut rng);
        let log_var = c
            .reparameterize
            .then(|| Linear::new(&mut params, "log_var", Group::ContentEncoder, c.hidden, c.zc_dim, &mut rng));
        let content = ContentEncoder { trunk, mu, log_var };

        let logits = if c.toy_mode { 1 } else { c.classes };
        let task = Linear::new(&mut params, "fc", Group::TaskHead, c.zc_dim, logits, &mut rng);

        let dual = DualCritic::new(
            &mut params,
            c.zc_dim + c.domains,
            &[c.critic_hidden, c.critic_hidden],
            &mut rng,
        );

        let posterior = if c.toy_mode {
            None
        } else {
            let style = match c.image {
                Some(shape) => StyleEncoder::Pooled {
                    pixel: Linear::new(&mut params, "pixel", Group::StyleEncoder, shape.channels, c.hidden, &mut rng),
                    out: Linear::new(&mut params, "out", Group::StyleEncoder, c.hidden, c.zd_dim, &mut rng),
                    shape,
                },
                None => StyleEncoder::Dense(Mlp::new(
                    &mut params,
                    "fc",
                    Group::StyleEncoder,
                    &[c.input_dim, c.hidden, c.zd_dim],
                    Activation::Relu,
                    &mut rng,
                )),
            };
            let generator = Mlp::new(
                &mut params,
                "fc",
                Group::Generator,
                &[c.zc_dim + c.zd_dim, c.hidden, c.hidden, c.input_dim],
                Activation::Relu,
                &mut rng,
            );
            let image_critic = Mlp::new(
                &mut params,
                "fc",
                Group::ImageCritic,
                &[c.input_dim, c.critic_hidden, c.critic_hidden, c.domains],
                Activation::LeakyRelu,
                &mut rng,
            );
            let perceptual = match c.perceptual {
                Perceptual::Identity => None,
                Perceptual::Random { width } => Some(Mlp::new(
                    &mut params,
                    "fc",
                    Group::Perceptual,
                    &[c.input_dim, c.hidden, width],
                    Activation::Relu,
                    &mut rng,
                )),
            };
            Some(PosteriorNets {
                style,
                generator,
                image_critic,
                perceptual,
            })
        };

        Ok(VdnModel {
            config,
            params,
            content,
            task,
            dual,
            posterior,
        })
    }

    fn posterior(&self) -> Result<&PosteriorNets> {
        self.posterior
            .as_ref()
            .ok_or_else(|| Error::Contract("toy-mode model has no generator or critics".into()))
    }

    pub fn has_posterior_nets(&self) -> bool {
        self.posterior.is_some()
    }

    pub fn dual_critic(&self) -> &DualCritic {
        &self.dual
    }

    /// Parameters of Q(z_c | x): mean and (when reparameterizing) log-variance.
    pub fn encode_content(&self, tape: &mut Tape, bind: &Bindings, x: Var) -> Result<(Var, Option<Var>)> {
        check_batch(tape, x, self.config.input_dim, "encode")?;
        let h = self.content.trunk.forward(tape, bind, x)?;
        let h = tape.relu(h);
        let mu = self.content.mu.forward(tape, bind, h)?;
        let lv = match &self.content.log_var {
            Some(l) => Some(l.forward(tape, bind, h)?),
            None => None,
        };
        Ok((mu, lv))
    }

    /// Style code `[batch, zd_dim]`, free of spatial layout.
    pub fn encode_style(&self, tape: &mut Tape, bind: &Bindings, x: Var) -> Result<Var> {
        let b = check_batch(tape, x, self.config.input_dim, "encode")?;
        match &self.posterior()?.style {
            StyleEncoder::Pooled { pixel, out, shape } => {
                let px = tape.reshape(x, &[b * shape.pixels(), shape.channels])?;
                let h = pixel.forward(tape, bind, px)?;
                let h = tape.relu(h);
                let h = tape.reshape(h, &[b, shape.pixels(), self.config.hidden])?;
                let pooled = tape.mean_axis(h, 1)?;
                out.forward(tape, bind, pooled)
            }
            StyleEncoder::Dense(m) => m.forward(tape, bind, x),
        }
    }

    pub fn encode(&self, tape: &mut Tape, bind: &Bindings, x: Var) -> Result<Encoded> {
        let (mu, log_var) = self.encode_content(tape, bind, x)?;
        let z_d = match self.posterior {
            Some(_) => Some(self.encode_style(tape, bind, x)?),
            None => None,
        };
        Ok(Encoded { mu, log_var, z_d })
    }

    /// Sampled content code when reparameterizing and `noise` is given,
    /// otherwise the mean.
    pub fn content_code(&self, tape: &mut Tape, enc: &Encoded, noise: Option<&Tensor>) -> Result<Var> {
        match (enc.log_var, noise) {
            (Some(lv), Some(n)) => reparam_sample_var(tape, enc.mu, lv, n.clone()),
            _ => Ok(enc.mu),
        }
    }

    /// Class logits `[batch, classes]`. The toy head's single logit `s` is
    /// expanded to `[0, s]`, so softmax cross-entropy equals the logistic loss.
    pub fn classify(&self, tape: &mut Tape, bind: &Bindings, zc: Var) -> Result<Var> {
        let b = check_batch(tape, zc, self.config.zc_dim, "classify")?;
        let s = self.task.forward(tape, bind, zc)?;
        if self.config.toy_mode {
            let z = tape.constant(Tensor::zeros(&[b, 1]));
            tape.concat(&[z, s], 1)
        } else {
            Ok(s)
        }
    }

    /// Generated images in `[-1, 1]`.
    pub fn generate(&self, tape: &mut Tape, bind: &Bindings, zc: Var, zd: Var) -> Result<Var> {
        let b = check_batch(tape, zc, self.config.zc_dim, "generate (z_c)")?;
        let bd = check_batch(tape, zd, self.config.zd_dim, "generate (z_d)")?;
        if b != bd {
            return Err(Error::Contract(format!("generate: {b} content codes vs {bd} style codes")));
        }
        let z = tape.concat(&[zc, zd], 1)?;
        let h = self.posterior()?.generator.forward(tape, bind, z)?;
        Ok(tape.tanh(h))
    }

    /// Image critic score of each row under the head of its domain.
    pub fn image_critic(&self, tape: &mut Tape, bind: &Bindings, x: Var, domains: &[usize]) -> Result<Var> {
        let b = check_batch(tape, x, self.config.input_dim, "image critic")?;
        if domains.len() != b {
            return Err(Error::Contract(format!(
                "image critic: {b} rows but {} domain labels",
                domains.len()
            )));
        }
        let out = self.posterior()?.image_critic.forward(tape, bind, x)?;
        let mask = tape.constant(one_hot(domains, self.config.domains)?);
        let sel = tape.mul(out, mask)?;
        tape.sum_axis(sel, 1)
    }

    pub fn perceive(&self, tape: &mut Tape, bind: &Bindings, x: Var) -> Result<Var> {
        check_batch(tape, x, self.config.input_dim, "perceptual")?;
        match &self.posterior()?.perceptual {
            Some(m) => m.forward(tape, bind, x),
            None => Ok(x),
        }
    }

    /// Predicted classes using only the content-encoder mean and task head.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let bind = self
            .params
            .bind_groups(&mut tape, &[Group::ContentEncoder, Group::TaskHead], |_| false);
        let xv = tape.constant(x.clone());
        let (mu, _) = self.encode_content(&mut tape, &bind, xv)?;
        let logits = self.classify(&mut tape, &bind, mu)?;
        let c = tape.shape(logits)[1];
        Ok(tape
            .data(logits)
            .chunks(c)
            .map(|row| {
                let mut best = 0;
                for j in 1..c {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    /// Q(z_c | x) for each row of `x`; zero log-variance when the model is
    /// deterministic.
    pub fn content_posteriors(&self, x: &Tensor) -> Result<Vec<DiagGaussian>> {
        let mut tape = Tape::new();
        let bind = self.params.bind_groups(&mut tape, &[Group::ContentEncoder], |_| false);
        let xv = tape.constant(x.clone());
        let (mu, lv) = self.encode_content(&mut tape, &bind, xv)?;
        let d = self.config.zc_dim;
        let mus = tape.data(mu).chunks(d);
        let zeros = vec![0.0; tape.data(mu).len()];
        let lvs = lv.map_or(&zeros[..], |v| tape.data(v)).chunks(d);
        mus.zip(lvs)
            .map(|(m, l)| DiagGaussian::new(m.to_vec(), l.to_vec()))
            .collect()
    }

    /// Flat copy of all parameter values, in store order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params
            .params()
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    pub fn group_values(&self, group: Group) -> Vec<f64> {
        self.params
            .params()
            .iter()
            .filter(|p| p.group == group)
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }
}

pub mod checkpoint {
    //! Checkpoints: a text manifest plus one little-endian `f64` blob.
    //!
    //! Manifest layout:
    //! ```text
    //! format = vdn-checkpoint-v1
    //! blob = params.bin
    //! blob_bytes = <total bytes>
    //! model.<key> = <value>            # one per model config key
    //! param <name> f64 <d0xd1...> <byte offset> <element count>
    //! ```

    use std::fs;
    use std::path::Path;

    use thiserror::Error;

    use super::{ModelConfig, VdnModel, MODEL_KEYS};
    use crate::autodiff::Tensor;
    use crate::kv::KvMap;

    pub const FORMAT: &str = "vdn-checkpoint-v1";
    pub const MANIFEST_FILE: &str = "manifest.txt";
    pub const BLOB_FILE: &str = "params.bin";

    #[derive(Debug, Error)]
    pub enum CheckpointError {
        #[error("checkpoint i/o: {0}")]
        Io(#[from] std::io::Error),
        #[error("corrupt manifest: {0}")]
        CorruptManifest(String),
        #[error("checkpoint does not match configuration: {0}")]
        ConfigMismatch(String),
        #[error("truncated blob: expected {expected} bytes, found {found}")]
        Truncated { expected: usize, found: usize },
    }

    struct Record {
        name: String,
        shape: Vec<usize>,
        offset: usize,
        len: usize,
    }

    pub fn manifest_text(model: &VdnModel) -> String {
        let mut out = String::new();
        out.push_str(&format!("format = {FORMAT}\n"));
        out.push_str(&format!("blob = {BLOB_FILE}\n"));
        let total: usize = model.params.params().iter().map(|p| p.value.numel() * 8).sum();
        out.push_str(&format!("blob_bytes = {total}\n"));
        for line in model.config.to_kv().render().lines() {
            out.push_str(&format!("model.{line}\n"));
        }
        let mut offset = 0;
        for p in model.params.params() {
            let shape: Vec<String> = p.value.shape().iter().map(usize::to_string).collect();
            out.push_str(&format!(
                "param {} f64 {} {} {}\n",
                p.name,
                shape.join("x"),
                offset,
                p.value.numel()
            ));
            offset += p.value.numel() * 8;
        }
        out
    }

    pub fn blob_bytes(model: &VdnModel) -> Vec<u8> {
        model
            .params
            .params()
            .iter()
            .flat_map(|p| p.value.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    /// Writes `manifest.txt` and `params.bin` into directory `dir`.
    pub fn save(model: &VdnModel, dir: &Path) -> Result<(), CheckpointError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(BLOB_FILE), blob_bytes(model))?;
        fs::write(dir.join(MANIFEST_FILE), manifest_text(model))?;
        Ok(())
    }

    fn corrupt(msg: impl Into<String>) -> CheckpointError {
        CheckpointError::CorruptManifest(msg.into())
    }

    fn parse_record(line: &str) -> Result<Record, CheckpointError> {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 || f[0] != "param" {
            return Err(corrupt(format!("bad param record {line:?}")));
        }
        if f[2] != "f64" {
            return Err(corrupt(format!("unsupported dtype {}", f[2])));
        }
        let shape = if f[3].is_empty() || f[3] == "scalar" {
            vec![]
        } else {
            f[3].split('x')
                .map(|d| d.parse().map_err(|_| corrupt(format!("bad shape {:?}", f[3]))))
                .collect::<Result<Vec<usize>, _>>()?
        };
        let offset = f[4].parse().map_err(|_| corrupt(format!("bad offset {:?}", f[4])))?;
        let len = f[5].parse().map_err(|_| corrupt(format!("bad length {:?}", f[5])))?;
        Ok(Record {
            name: f[1].to_string(),
            shape,
            offset,
            len,
        })
    }

    /// Loads a checkpoint directory. With `expected`, the stored model
    /// configuration must equal it.
    pub fn load(dir: &Path, expected: Option<&ModelConfig>) -> Result<VdnModel, CheckpointError> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let mut header = String::new();
        let mut records = Vec::new();
        for line in text.lines() {
            if line.starts_with("param ") {
                records.push(parse_record(line)?);
            } else {
                header.push_str(line);
                header.push('\n');
            }
        }
        let kv = KvMap::parse(&header).map_err(|e| corrupt(e.to_string()))?;
        if kv.get_str("format") != Some(FORMAT) {
            return Err(corrupt(format!("unknown format {:?}", kv.get_str("format"))));
        }
        let blob_name = kv.get_str("blob").ok_or_else(|| corrupt("missing blob"))?.to_string();
        let blob_bytes: usize = kv
            .get("blob_bytes")
            .map_err(|e| corrupt(e.to_string()))?
            .ok_or_else(|| corrupt("missing blob_bytes"))?;

        let mut model_kv = KvMap::default();
        for key in kv.keys() {
            if let Some(k) = key.strip_prefix("model.") {
                if !MODEL_KEYS.contains(&k) {
                    return Err(corrupt(format!("unknown model key {k}")));
                }
                model_kv.insert(k, kv.get_str(key).unwrap_or_default());
            } else if !["format", "blob", "blob_bytes"].contains(&key) {
                return Err(corrupt(format!("unknown key {key}")));
            }
        }
        for k in MODEL_KEYS {
            if model_kv.get_str(k).is_none() {
                return Err(corrupt(format!("missing model.{k}")));
            }
        }
        let config = ModelConfig::from_kv(&model_kv, &ModelConfig::default())
            .map_err(|e| corrupt(e.to_string()))?;
        if let Some(exp) = expected {
            if exp != &config {
                return Err(CheckpointError::ConfigMismatch(format!(
                    "expected {exp:?}, checkpoint has {config:?}"
                )));
            }
        }
        let mut model =
            VdnModel::new(config).map_err(|e| CheckpointError::ConfigMismatch(e.to_string()))?;
        if records.len() != model.params.len() {
            return Err(CheckpointError::ConfigMismatch(format!(
                "{} parameter records for a model with {} parameters",
                records.len(),
                model.params.len()
            )));
        }

        let blob = fs::read(dir.join(&blob_name))?;
        if blob.len() < blob_bytes {
            return Err(CheckpointError::Truncated {
                expected: blob_bytes,
                found: blob.len(),
            });
        }
        let mut values = Vec::with_capacity(records.len());
        for (rec, p) in records.iter().zip(model.params.params()) {
            if rec.name != p.name {
                return Err(corrupt(format!("record {} where {} expected", rec.name, p.name)));
            }
            if rec.shape != p.value.shape() {
                return Err(CheckpointError::ConfigMismatch(format!(
                    "{}: stored shape {:?}, model shape {:?}",
                    rec.name,
                    rec.shape,
                    p.value.shape()
                )));
            }
            if rec.len != p.value.numel() {
                return Err(corrupt(format!("{}: length {} disagrees with shape", rec.name, rec.len)));
            }
            let end = rec.offset + rec.len * 8;
            if end > blob.len() {
                return Err(CheckpointError::Truncated {
                    expected: end,
                    found: blob.len(),
                });
            }
            let data: Vec<f64> = blob[rec.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            values.push(Tensor::new(rec.shape.clone(), data).map_err(|e| corrupt(e.to_string()))?);
        }
        for (p, v) in model.params.iter_mut().zip(values) {
            p.value = v;
        }
        Ok(model)
    }
}
