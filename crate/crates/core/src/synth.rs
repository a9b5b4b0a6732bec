//! Synthetic data with a known content/style factorization.
//!
//! * XOR toy: `x ~ U(-1,1)^3`, `y = [x0>0] ^ [x1>0] ^ [x2>0]`.
//! * Multi-domain images: a grey content image (a blob in the quadrant of
//!   the class) mapped through a per-domain style: a colour transform
//!   `gain[c] * content^gamma + bias[c]` plus a fixed +-amplitude texture
//!   (rows, columns or checkerboard).
//!
//! Content values are quantized to multiples of 1/256 and style constants
//! are short dyadic fractions, so styles invert exactly in f64 and
//! translating between domains is lossless.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::models::ImageShape;

/// A flat collection of examples; `x` holds `len() * dim` values row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub image: Option<ImageShape>,
    pub classes: usize,
    pub domains: usize,
    pub x: Vec<f64>,
    pub y: Vec<usize>,
    pub d: Vec<usize>,
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn empty_like(other: &Dataset) -> Self {
        Dataset {
            x: Vec::new(),
            y: Vec::new(),
            d: Vec::new(),
            ..other.clone()
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, x: &[f64], y: usize, d: usize) {
        debug_assert_eq!(x.len(), self.dim);
        self.x.extend_from_slice(x);
        self.y.push(y);
        self.d.push(d);
    }

    /// Examples at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut out = Dataset::empty_like(self);
        for &i in idx {
            out.push(self.row(i), self.y[i], self.d[i]);
        }
        out
    }

    pub fn domain_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.domains];
        for &d in &self.d {
            c[d] += 1;
        }
        c
    }

    pub fn domains_present(&self) -> Vec<usize> {
        let c = self.domain_counts();
        (0..self.domains).filter(|&d| c[d] > 0).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.len() != self.len() * self.dim || self.d.len() != self.len() {
            return Err(Error::Contract("dataset arrays disagree in length".into()));
        }
        if let Some(i) = (0..self.len()).find(|&i| self.y[i] >= self.classes || self.d[i] >= self.domains) {
            return Err(Error::Contract(format!(
                "example {i}: label {} / domain {} out of range",
                self.y[i], self.d[i]
            )));
        }
        if self.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset contains a non-finite value".into()));
        }
        Ok(())
    }
}

pub fn xor_label(x: &[f64]) -> usize {
    ((x[0] > 0.0) as usize) ^ ((x[1] > 0.0) as usize) ^ ((x[2] > 0.0) as usize)
}

/// `n` XOR examples in the single domain 0.
pub fn gen_xor<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Contract("gen_xor needs n >= 1".into()));
    }
    let mut ds = Dataset {
        dim: 3,
        image: None,
        classes: 2,
        domains: 1,
        x: Vec::with_capacity(3 * n),
        y: Vec::with_capacity(n),
        d: Vec::with_capacity(n),
        warnings: Vec::new(),
    };
    for _ in 0..n {
        let x: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        ds.push(&x, xor_label(&x), 0);
    }
    Ok(ds)
}

/// Fixed background pattern added by a style.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Texture {
    Flat,
    /// Alternating rows.
    Rows,
    /// Alternating columns.
    Columns,
    Checker,
}

impl Texture {
    fn sign(self, r: usize, c: usize) -> f64 {
        let odd = match self {
            Texture::Flat => return 0.0,
            Texture::Rows => r % 2 == 1,
            Texture::Columns => c % 2 == 1,
            Texture::Checker => (r + c) % 2 == 1,
        };
        if odd {
            -1.0
        } else {
            1.0
        }
    }
}

/// Colour transform of one domain:
/// `x[r, c, ch] = gain[ch] * v^gamma + bias[ch] + amplitude * texture(r, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Style {
    pub gain: [f64; 3],
    pub bias: [f64; 3],
    /// Contrast curve exponent, 1 or 2.
    pub gamma: u32,
    pub texture: Texture,
    pub amplitude: f64,
}

impl Style {
    fn apply_value(&self, v: f64, ch: usize, t: f64) -> f64 {
        let v = if self.gamma == 2 { v * v } else { v };
        self.gain[ch] * v + self.bias[ch] + self.amplitude * t
    }

    fn invert_value(&self, x: f64, ch: usize, t: f64) -> f64 {
        let v = (x - self.amplitude * t - self.bias[ch]) / self.gain[ch];
        if self.gamma == 2 {
            v.max(0.0).sqrt()
        } else {
            v
        }
    }

    /// Whether every value of `[0, 1]` maps into `[-1, 1]`.
    pub fn in_range(&self) -> bool {
        (0..3).all(|ch| {
            let a = self.bias[ch] - self.amplitude;
            let b = self.gain[ch] + self.bias[ch] + self.amplitude;
            a.min(b) >= -1.0 && a.max(b) <= 1.0 && self.gain[ch] != 0.0
        })
    }
}

/// Built-in styles: different colour gains, background levels, contrast
/// curves and background textures. All gains are positive.
pub fn preset_styles() -> Vec<Style> {
    vec![
        Style {
            gain: [1.25, 1.25, 1.25],
            bias: [-0.75, -0.75, -0.75],
            gamma: 1,
            texture: Texture::Flat,
            amplitude: 0.0,
        },
        Style {
            gain: [0.5, 1.0, 1.5],
            bias: [0.0, -0.5, -0.75],
            gamma: 1,
            texture: Texture::Rows,
            amplitude: 0.25,
        },
        Style {
            gain: [1.5, 0.75, 0.5],
            bias: [-0.75, 0.0, 0.25],
            gamma: 2,
            texture: Texture::Columns,
            amplitude: 0.25,
        },
        Style {
            gain: [0.75, 0.75, 1.25],
            bias: [0.0, -0.25, -0.5],
            gamma: 1,
            texture: Texture::Checker,
            amplitude: 0.25,
        },
    ]
}

/// Extra styles beyond the presets, on a 1/8 grid.
fn extra_style(index: usize) -> Style {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5717_1e00 + index as u64);
    let textures = [Texture::Flat, Texture::Rows, Texture::Columns, Texture::Checker];
    let texture = textures[rng.random_range(0..4)];
    let amplitude = if texture == Texture::Flat { 0.0 } else { 0.125 };
    let mut gain = [0.0; 3];
    let mut bias = [0.0; 3];
    for c in 0..3 {
        gain[c] = rng.random_range(3..=12) as f64 / 8.0;
        // keep the range inside [-1, 1]
        let lo = -1.0 + amplitude;
        let hi = 1.0 - gain[c] - amplitude;
        let steps = ((hi - lo) * 8.0).round() as i64;
        bias[c] = lo + rng.random_range(0..=steps) as f64 / 8.0;
    }
    Style {
        gain,
        bias,
        gamma: if rng.random_bool(0.5) { 2 } else { 1 },
        texture,
        amplitude,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub image: ImageShape,
    pub classes: usize,
    pub styles: Vec<Style>,
    /// Blob width range in pixels.
    pub sigma: (f64, f64),
    /// Maximum jitter of the blob centre from its quadrant centre.
    pub jitter: f64,
    /// Amplitude of uniform background noise in content space.
    pub noise: f64,
    /// Blob peak intensity range.
    pub peak: (f64, f64),
}

pub const MAX_CLASSES: usize = 4;

impl DomainSpec {
    pub fn new(domains: usize, classes: usize) -> Result<Self> {
        if domains < 3 {
            return Err(Error::Contract(format!("need at least 3 domains, got {domains}")));
        }
        if !(2..=MAX_CLASSES).contains(&classes) {
            return Err(Error::Contract(format!(
                "classes must be in 2..={MAX_CLASSES}, got {classes}"
            )));
        }
        let mut styles = preset_styles();
        styles.truncate(domains);
        styles.extend((styles.len()..domains).map(extra_style));
        Ok(DomainSpec {
            image: ImageShape {
                height: 12,
                width: 12,
                channels: 3,
            },
            classes,
            styles,
            sigma: (1.2, 2.0),
            jitter: 2.5,
            noise: 0.5,
            peak: (0.4, 1.0),
        })
    }

    pub fn domains(&self) -> usize {
        self.styles.len()
    }

    /// Pairs of domains whose styles coincide.
    pub fn degenerate_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.styles.len() {
            for j in i + 1..self.styles.len() {
                if self.styles[i] == self.styles[j] {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

/// Ground-truth content of one example.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContentFactors {
    pub class: usize,
    /// Blob centre (row, column) in pixel coordinates.
    pub center: (f64, f64),
    pub sigma: f64,
    pub peak: f64,
    pub noise_seed: u64,
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 256.0).round() / 256.0
}

/// Quadrant centre of a class: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
fn quadrant_center(class: usize, shape: &ImageShape) -> (f64, f64) {
    let (h, w) = (shape.height as f64, shape.width as f64);
    let r = if class / 2 == 0 { h * 0.25 } else { h * 0.75 } - 0.5;
    let c = if class.is_multiple_of(2) { w * 0.25 } else { w * 0.75 } - 0.5;
    (r, c)
}

pub fn sample_factors<R: Rng + ?Sized>(spec: &DomainSpec, class: usize, rng: &mut R) -> ContentFactors {
    let (r, c) = quadrant_center(class, &spec.image);
    let j = spec.jitter;
    ContentFactors {
        class,
        center: (r + rng.random_range(-j..=j), c + rng.random_range(-j..=j)),
        sigma: rng.random_range(spec.sigma.0..=spec.sigma.1),
        peak: rng.random_range(spec.peak.0..=spec.peak.1),
        noise_seed: rng.random(),
    }
}

/// Single-channel content image in `[0, 1]`, quantized to 1/256.
pub fn render_content(spec: &DomainSpec, f: &ContentFactors) -> Vec<f64> {
    let mut noise = ChaCha8Rng::seed_from_u64(f.noise_seed);
    let s2 = 2.0 * f.sigma * f.sigma;
    let mut out = Vec::with_capacity(spec.image.pixels());
    for r in 0..spec.image.height {
        for c in 0..spec.image.width {
            let d2 = (r as f64 - f.center.0).powi(2) + (c as f64 - f.center.1).powi(2);
            let blob = f.peak * (-d2 / s2).exp();
            let bg: f64 = noise.random_range(0.0..=spec.noise);
            out.push(quantize(blob + bg));
        }
    }
    out
}

/// Applies `style` to a content image of `shape`, giving an HWC image.
pub fn stylize(style: &Style, shape: &ImageShape, content: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(content.len() * 3);
    for (i, &v) in content.iter().enumerate() {
        let t = style.texture.sign(i / shape.width, i % shape.width);
        out.extend((0..3).map(|ch| style.apply_value(v, ch, t)));
    }
    out
}

/// Recovers the content image from an image of `style`, using the first
/// channel.
pub fn destylize(style: &Style, shape: &ImageShape, x: &[f64]) -> Vec<f64> {
    x.chunks(3)
        .enumerate()
        .map(|(i, px)| style.invert_value(px[0], 0, style.texture.sign(i / shape.width, i % shape.width)))
        .collect()
}

/// Re-renders image `x` of domain `from` in the style of domain `to`.
pub fn translate(spec: &DomainSpec, x: &[f64], from: usize, to: usize) -> Result<Vec<f64>> {
    let n = spec.domains();
    if from >= n || to >= n {
        return Err(Error::Contract(format!("domain out of range for {n} domains")));
    }
    Ok(stylize(&spec.styles[to], &spec.image, &destylize(&spec.styles[from], &spec.image, x)))
}

/// Generated examples together with their content factors.
#[derive(Clone, Debug)]
pub struct MultiDomain {
    pub data: Dataset,
    pub factors: Vec<ContentFactors>,
}

/// `n_per_domain` examples per domain, classes balanced round-robin.
pub fn gen_multidomain<R: Rng + ?Sized>(spec: &DomainSpec, n_per_domain: usize, rng: &mut R) -> Result<MultiDomain> {
    if spec.domains() < 3 || spec.classes < 2 {
        return Err(Error::Contract("need at least 3 domains and 2 classes".into()));
    }
    if n_per_domain == 0 {
        return Err(Error::Contract("n_per_domain must be positive".into()));
    }
    let mut data = Dataset {
        dim: spec.image.len(),
        image: Some(spec.image),
        classes: spec.classes,
        domains: spec.domains(),
        x: Vec::with_capacity(spec.image.len() * n_per_domain * spec.domains()),
        y: Vec::new(),
        d: Vec::new(),
        warnings: spec
            .degenerate_pairs()
            .into_iter()
            .map(|(i, j)| format!("domains {i} and {j} share a style"))
            .collect(),
    };
    let mut factors = Vec::new();
    for (d, style) in spec.styles.iter().enumerate() {
        for i in 0..n_per_domain {
            let f = sample_factors(spec, i % spec.classes, rng);
            data.push(&stylize(style, &spec.image, &render_content(spec, &f)), f.class, d);
            factors.push(f);
        }
    }
    Ok(MultiDomain { data, factors })
}

/// Splits off every example of `held_out` as the test set.
pub fn lodo_split(data: &Dataset, held_out: usize) -> Result<(Dataset, Dataset)> {
    if held_out >= data.domains || !data.d.contains(&held_out) {
        return Err(Error::Contract(format!("domain {held_out} is not present")));
    }
    let (test, train): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&i| data.d[i] == held_out);
    Ok((data.subset(&train), data.subset(&test)))
}

#[derive(Debug, Error)]
pub enum DataFileError {
    #[error("data i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad data manifest: {0}")]
    Manifest(String),
    #[error("data blob has {found} bytes, manifest implies {expected}")]
    Size { expected: usize, found: usize },
    #[error(transparent)]
    Invalid(#[from] Error),
}

pub const DATA_FORMAT: &str = "vdn-data-v1";
pub const DATA_MANIFEST: &str = "manifest.txt";
pub const DATA_BLOB: &str = "data.bin";

/// Writes `manifest.txt` and `data.bin` into `dir`.
///
/// The blob is a sequence of records of `dim + 2` little-endian f64 values:
/// the example (row-major, HWC for images), then its label and domain.
pub fn save_dataset(data: &Dataset, task: &str, dir: &Path) -> std::result::Result<(), DataFileError> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(data.len() * (data.dim + 2) * 8);
    for i in 0..data.len() {
        for v in data.row(i).iter().chain(&[data.y[i] as f64, data.d[i] as f64]) {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut m = KvMap::default();
    m.insert("format", DATA_FORMAT);
    m.insert("task", task);
    m.insert("blob", DATA_BLOB);
    m.insert("count", data.len());
    m.insert("dim", data.dim);
    m.insert("record_f64s", data.dim + 2);
    let img = data.image.unwrap_or(ImageShape {
        height: 0,
        width: 0,
        channels: 0,
    });
    m.insert("height", img.height);
    m.insert("width", img.width);
    m.insert("channels", img.channels);
    m.insert("classes", data.classes);
    m.insert("domains", data.domains);
    let counts: Vec<String> = data.domain_counts().iter().map(usize::to_string).collect();
    m.insert("domain_counts", counts.join(","));
    m.insert("warnings", data.warnings.join("; "));
    fs::write(dir.join(DATA_BLOB), blob)?;
    fs::write(dir.join(DATA_MANIFEST), m.render())?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> std::result::Result<Dataset, DataFileError> {
    let bad = |e: crate::kv::KvError| DataFileError::Manifest(e.to_string());
    let m = KvMap::parse(&fs::read_to_string(dir.join(DATA_MANIFEST))?).map_err(bad)?;
    if m.get_str("format") != Some(DATA_FORMAT) {
        return Err(DataFileError::Manifest(format!("unknown format {:?}", m.get_str("format"))));
    }
    let count: usize = m.require("count").map_err(bad)?;
    let dim: usize = m.require("dim").map_err(bad)?;
    let classes: usize = m.require("classes").map_err(bad)?;
    let domains: usize = m.require("domains").map_err(bad)?;
    let image = ImageShape {
        height: m.require("height").map_err(bad)?,
        width: m.require("width").map_err(bad)?,
        channels: m.require("channels").map_err(bad)?,
    };
    let image = (image.len() > 0).then_some(image);
    if image.is_some_and(|i| i.len() != dim) {
        return Err(DataFileError::Manifest("image shape disagrees with dim".into()));
    }
    let blob_name: String = m.require("blob").map_err(bad)?;
    let blob = fs::read(dir.join(blob_name))?;
    let expected = count * (dim + 2) * 8;
    if blob.len() != expected {
        return Err(DataFileError::Size {
            expected,
            found: blob.len(),
        });
    }
    let vals: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let warnings = m
        .get_str("warnings")
        .filter(|w| !w.is_empty())
        .map(|w| w.split("; ").map(String::from).collect())
        .unwrap_or_default();
    let mut ds = Dataset {
        dim,
        image,
        classes,
        domains,
        x: Vec::with_capacity(count * dim),
        y: Vec::with_capacity(count),
        d: Vec::with_capacity(count),
        warnings,
    };
    let as_index = |v: f64, what: &str| -> std::result::Result<usize, DataFileError> {
        if v >= 0.0 && v.fract() == 0.0 && v < usize::MAX as f64 {
            Ok(v as usize)
        } else {
            Err(DataFileError::Manifest(format!("{what} {v} is not an index")))
        }
    };
    for rec in vals.chunks_exact(dim + 2) {
        let y = as_index(rec[dim], "label")?;
        let d = as_index(rec[dim + 1], "domain")?;
        ds.push(&rec[..dim], y, d);
    }
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xor_truth_table() {
        for bits in 0..8usize {
            let x: Vec<f64> = (0..3).map(|i| if bits >> i & 1 == 1 { 0.5 } else { -0.5 }).collect();
            assert_eq!(xor_label(&x), bits.count_ones() as usize % 2);
        }
        assert_eq!(xor_label(&[0.5, 0.5, 0.5]), 1);
        assert_eq!(xor_label(&[-0.5, -0.5, -0.5]), 0);
    }

    #[test]
    fn xor_is_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ds = gen_xor(100_000, &mut rng).unwrap();
        let p = ds.y.iter().sum::<usize>() as f64 / ds.len() as f64;
        assert!((p - 0.5).abs() < 0.01, "{p}");
        assert!(ds.x.iter().all(|v| (-1.0..1.0).contains(v)));
        assert!(gen_xor(0, &mut rng).is_err());
    }

    #[test]
    fn styles_stay_in_range() {
        let spec = DomainSpec::new(8, 4).unwrap();
        for s in &spec.styles {
            assert!(s.in_range(), "{s:?}");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let md = gen_multidomain(&spec, 4, &mut rng).unwrap();
        assert!(md.data.x.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn same_content_different_domains_agree_after_inversion() {
        let spec = DomainSpec::new(4, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = sample_factors(&spec, 3, &mut rng);
        let c = render_content(&spec, &f);
        let a = stylize(&spec.styles[0], &spec.image, &c);
        let b = stylize(&spec.styles[2], &spec.image, &c);
        assert_ne!(a, b);
        let ca = destylize(&spec.styles[0], &spec.image, &a);
        assert_eq!(ca, destylize(&spec.styles[2], &spec.image, &b));
        assert_eq!(ca, c);
    }

    #[test]
    fn swap_and_back_is_exact() {
        let spec = DomainSpec::new(6, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let md = gen_multidomain(&spec, 8, &mut rng).unwrap();
        for i in 0..md.data.len() {
            let from = md.data.d[i];
            for to in 0..spec.domains() {
                let there = translate(&spec, md.data.row(i), from, to).unwrap();
                let back = translate(&spec, &there, to, from).unwrap();
                assert_eq!(back, md.data.row(i));
                // the translated image is exactly what the target domain renders
                let direct = stylize(&spec.styles[to], &spec.image, &render_content(&spec, &md.factors[i]));
                assert_eq!(there, direct);
            }
        }
    }

    #[test]
    fn degenerate_spec_is_flagged() {
        let mut spec = DomainSpec::new(3, 2).unwrap();
        spec.styles[2] = spec.styles[0].clone();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let md = gen_multidomain(&spec, 2, &mut rng).unwrap();
        assert_eq!(md.data.warnings.len(), 1);
        assert!(DomainSpec::new(2, 4).is_err());
        assert!(DomainSpec::new(4, 5).is_err());
    }

    #[test]
    fn lodo_split_partitions() {
        let spec = DomainSpec::new(4, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let md = gen_multidomain(&spec, 10, &mut rng).unwrap();
        let (train, test) = lodo_split(&md.data, 1).unwrap();
        assert_eq!(train.len() + test.len(), md.data.len());
        assert_eq!(train.domains_present(), vec![0, 2, 3]);
        assert!(test.d.iter().all(|&d| d == 1));
        assert_eq!(train.domain_counts(), vec![10, 0, 10, 10]);
        assert!(lodo_split(&md.data, 4).is_err());
    }

    #[test]
    fn dataset_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DomainSpec::new(4, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let md = gen_multidomain(&spec, 5, &mut rng).unwrap();
        save_dataset(&md.data, "multidomain", dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), md.data);
        let blob = dir.path().join(DATA_BLOB);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(DataFileError::Size { .. })));
    }
}
