//! Synthetic multi-domain image data, client partitioning, leave-one-domain
//! out splits and the `FDGD` binary dataset format.
//!
//! Each image is a class-dependent geometric pattern (the content) passed
//! through a per-domain colour transform (the style). Content is rendered
//! without reference to the domain, so the label is recoverable from every
//! domain by construction.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numerics::Tensor;
use crate::rng::{stream, stream_rng, SimRng};

pub const DATASET_MAGIC: &[u8; 4] = b"FDGD";
pub const DATASET_VERSION: u16 = 1;
const HEADER_LEN: u64 = 4 + 2 + 4 + 2 * 5;

/// Number of image channels. The style transform mixes exactly three.
pub const CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub domains: usize,
    pub classes: usize,
    pub per_domain: usize,
    pub image_size: usize,
    /// Client composition: 1 = one domain per client, 0 = uniform split.
    pub skew: f64,
    /// Smallest allowed distance between the mean colours of two domains.
    pub min_style_shift: f64,
    /// Draw the same content for sample `j` of every domain.
    pub paired_content: bool,
    /// Magnitude of the per-domain style parameters; 0 gives the identity.
    pub style_strength: f64,
    /// Optional `FDGD` file to load instead of generating.
    pub path: Option<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            domains: 4,
            classes: 5,
            per_domain: 200,
            image_size: 16,
            skew: 1.0,
            min_style_shift: 0.5,
            paired_content: false,
            style_strength: 1.0,
            path: None,
        }
    }
}

impl DataConfig {
    pub fn validate(&self, errors: &mut Vec<String>, prefix: &str) {
        if self.domains < 2 {
            errors.push(format!(
                "{prefix}.domains must be ≥ 2, got {}",
                self.domains
            ));
        }
        if self.classes < 2 || self.classes > u16::MAX as usize {
            errors.push(format!(
                "{prefix}.classes must be ≥ 2, got {}",
                self.classes
            ));
        }
        if self.per_domain == 0 {
            errors.push(format!("{prefix}.per_domain must be ≥ 1"));
        }
        if self.image_size < 4 || self.image_size > 256 {
            errors.push(format!(
                "{prefix}.image_size must be in [4, 256], got {}",
                self.image_size
            ));
        }
        if !(0.0..=1.0).contains(&self.skew) {
            errors.push(format!(
                "{prefix}.skew must be in [0, 1], got {}",
                self.skew
            ));
        }
        if !(self.min_style_shift >= 0.0) {
            errors.push(format!("{prefix}.min_style_shift must be ≥ 0"));
        }
        if !(self.style_strength >= 0.0 && self.style_strength.is_finite()) {
            errors.push(format!("{prefix}.style_strength must be ≥ 0"));
        }
    }
}

/// Per-domain colour transform: `x' = gain ⊙ (A x) + bias + noise · ε`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub id: u16,
    pub gain: [f64; CHANNELS],
    pub bias: [f64; CHANNELS],
    pub mixing: [[f64; CHANNELS]; CHANNELS],
    pub noise: f64,
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

impl DomainSpec {
    pub fn identity(id: u16) -> Self {
        Self {
            id,
            gain: [1.0; CHANNELS],
            bias: [0.0; CHANNELS],
            mixing: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            noise: 0.0,
        }
    }

    pub fn is_invertible(&self) -> bool {
        det3(&self.mixing).abs() > 1e-3
    }

    /// Effective per-channel contrast applied to a grey (channel-replicated)
    /// content image: gain times the mixing row sum.
    pub fn contrast(&self) -> [f64; CHANNELS] {
        std::array::from_fn(|c| self.gain[c] * self.mixing[c].iter().sum::<f64>())
    }

    fn random<R: Rng + ?Sized>(id: u16, strength: f64, rng: &mut R) -> Self {
        let n = Normal::new(0.0, 1.0).unwrap();
        let (lo, hi) = ((-strength).exp(), strength.exp());
        loop {
            let mut spec = Self::identity(id);
            for c in 0..CHANNELS {
                // Log-uniform gain in [1/e, e] at full strength.
                spec.gain[c] = (strength * rng.random_range(-1.0..1.0f64)).exp();
                spec.bias[c] = strength * rng.random_range(-1.0..1.0);
                for k in 0..CHANNELS {
                    spec.mixing[c][k] += strength * 0.3 * n.sample(rng);
                }
            }
            spec.noise = strength * rng.random_range(0.0..0.1);
            // Content must survive with positive, bounded contrast in every
            // channel; otherwise the shift is no longer a change of style.
            let ok = spec
                .contrast()
                .iter()
                .all(|&g| g >= 0.8 * lo && g <= 1.25 * hi);
            if ok && spec.is_invertible() {
                return spec;
            }
        }
    }

    /// Mean colour of a zero-mean content image after the transform.
    fn mean_colour(&self) -> [f64; CHANNELS] {
        self.bias
    }

    /// Applies the style to a `[3, H, W]` content image in place.
    pub fn apply<R: Rng + ?Sized>(&self, img: &mut [f64], hw: usize, rng: &mut R) {
        let n = Normal::new(0.0, 1.0).unwrap();
        let src = img.to_vec();
        for c in 0..CHANNELS {
            for p in 0..hw {
                let mixed: f64 = (0..CHANNELS)
                    .map(|k| self.mixing[c][k] * src[k * hw + p])
                    .sum();
                let mut v = self.gain[c] * mixed + self.bias[c];
                if self.noise > 0.0 {
                    v += self.noise * n.sample(rng);
                }
                img[c * hw + p] = v;
            }
        }
    }
}

/// Draws `m` domain styles whose mean colours are pairwise at least
/// `min_shift` apart (Euclidean). Style strength 0 yields identities.
pub fn domain_specs(m: usize, strength: f64, min_shift: f64, seed: u64) -> Vec<DomainSpec> {
    let mut rng = stream_rng(seed, &[stream::DATA, 0]);
    if strength == 0.0 {
        return (0..m).map(|d| DomainSpec::identity(d as u16)).collect();
    }
    let mut specs: Vec<DomainSpec> = Vec::with_capacity(m);
    let mut attempts = 0;
    while specs.len() < m {
        let cand = DomainSpec::random(specs.len() as u16, strength, &mut rng);
        let mc = cand.mean_colour();
        let far = specs.iter().all(|s| {
            let o = s.mean_colour();
            (0..CHANNELS)
                .map(|c| (o[c] - mc[c]).powi(2))
                .sum::<f64>()
                .sqrt()
                >= min_shift
        });
        attempts += 1;
        // Give up on the separation requirement rather than loop forever.
        if far || attempts > 10_000 {
            specs.push(cand);
        }
    }
    specs
}

/// Renders the grey-level content pattern of `class` into `[0, 1]`.
fn render_content<R: Rng + ?Sized>(
    class: usize,
    classes: usize,
    size: usize,
    rng: &mut R,
) -> Vec<f64> {
    let s = size as f64;
    let period = rng.random_range(3.5..5.5f64);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let (cx, cy) = (
        rng.random_range(0.3..0.7) * s,
        rng.random_range(0.3..0.7) * s,
    );
    let radius = rng.random_range(0.18..0.3) * s;
    let cell = rng.random_range(3..=5) as f64;
    let jitter = rng.random_range(-0.15..0.15f64);
    let grating = |angle: f64, x: f64, y: f64| {
        let u = x * angle.cos() + y * angle.sin();
        0.5 + 0.5 * (std::f64::consts::TAU * u / period + phase).sin()
    };
    let mut out = vec![0.0; size * size];
    for yi in 0..size {
        for xi in 0..size {
            let (x, y) = (xi as f64 + 0.5, yi as f64 + 0.5);
            let v = match class {
                0 => grating(std::f64::consts::FRAC_PI_2 + jitter, x, y),
                1 => grating(jitter, x, y),
                2 => grating(std::f64::consts::FRAC_PI_4 + jitter, x, y),
                3 => {
                    let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                    (-d2 / (2.0 * radius * radius)).exp()
                }
                4 => {
                    let a = ((x + phase) / cell).floor() as i64;
                    let b = ((y + phase) / cell).floor() as i64;
                    if (a + b).rem_euclid(2) == 0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                c => {
                    // Further classes: gratings at evenly spaced extra angles.
                    let extra = (c - 4) as f64 / (classes - 4) as f64;
                    grating(std::f64::consts::PI * (0.125 + 0.75 * extra) + jitter, x, y)
                }
            };
            out[yi * size + xi] = v;
        }
    }
    out
}

/// One image with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub id: u32,
    pub domain: u16,
    pub label: u16,
    /// `[3, H, W]`
    pub image: Tensor,
}

/// A labelled multi-domain image collection.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub domains: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<LabeledSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Index of each sample id.
    pub fn index(&self) -> BTreeMap<u32, usize> {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id, i))
            .collect()
    }

    /// Stacks the images with the given ids into `[B, C, H, W]`, returning
    /// labels alongside.
    pub fn batch(&self, index: &BTreeMap<u32, usize>, ids: &[u32]) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::with_capacity(ids.len() * self.channels * self.height * self.width);
        let mut labels = Vec::with_capacity(ids.len());
        for id in ids {
            let Some(&i) = index.get(id) else {
                return contract(format!("sample id {id} not in dataset"));
            };
            data.extend_from_slice(self.samples[i].image.data());
            labels.push(self.samples[i].label as usize);
        }
        let t = Tensor::new(
            vec![ids.len(), self.channels, self.height, self.width],
            data,
        )?;
        Ok((t, labels))
    }
}

/// Generates `per_domain` samples for each of `domains` styles. Labels
/// cycle through the classes so every domain is balanced.
pub fn generate_synthetic_domains(cfg: &DataConfig, seed: u64) -> Result<Dataset> {
    let mut errors = Vec::new();
    cfg.validate(&mut errors, "data");
    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    let specs = domain_specs(cfg.domains, cfg.style_strength, cfg.min_style_shift, seed);
    generate_with_specs(cfg, &specs, seed)
}

/// As [`generate_synthetic_domains`] with explicit domain styles.
pub fn generate_with_specs(cfg: &DataConfig, specs: &[DomainSpec], seed: u64) -> Result<Dataset> {
    let size = cfg.image_size;
    let hw = size * size;
    let mut samples = Vec::with_capacity(specs.len() * cfg.per_domain);
    for (d, spec) in specs.iter().enumerate() {
        if !spec.is_invertible() {
            return contract(format!("domain {d} has a singular channel-mixing matrix"));
        }
        for j in 0..cfg.per_domain {
            let label = j % cfg.classes;
            let content_key = if cfg.paired_content {
                u64::MAX
            } else {
                d as u64
            };
            let mut content_rng = stream_rng(seed, &[stream::DATA, 1, content_key, j as u64]);
            let grey = render_content(label, cfg.classes, size, &mut content_rng);
            // Per-sample contrast jitter is part of the content.
            let level = content_rng.random_range(0.8..1.2);
            let mut img = Vec::with_capacity(CHANNELS * hw);
            for _ in 0..CHANNELS {
                img.extend(grey.iter().map(|v| level * (v - 0.5)));
            }
            let mut style_rng = stream_rng(seed, &[stream::DATA, 2, d as u64, j as u64]);
            spec.apply(&mut img, hw, &mut style_rng);
            // Stored at single precision so the file format round-trips exactly.
            for v in &mut img {
                *v = *v as f32 as f64;
            }
            samples.push(LabeledSample {
                id: (d * cfg.per_domain + j) as u32,
                domain: d as u16,
                label: label as u16,
                image: Tensor::new(vec![CHANNELS, size, size], img)?,
            });
        }
    }
    Ok(Dataset {
        classes: cfg.classes,
        domains: specs.len(),
        channels: CHANNELS,
        height: size,
        width: size,
        samples,
    })
}

/// Train/test division for one held-out domain.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitPlan {
    pub target: u16,
    /// Sample ids held by each client, indexed by client id.
    pub clients: Vec<Vec<u32>>,
    pub test: Vec<u32>,
}

/// Holds out every sample of `target`. Remaining domains go one per client
/// when `k` equals their count; otherwise samples are dealt round-robin to
/// clients in domain-major order.
pub fn leave_one_domain_out(ds: &Dataset, target: u16, k: usize) -> Result<SplitPlan> {
    if target as usize >= ds.domains {
        return contract(format!(
            "unknown domain {target} (dataset has {})",
            ds.domains
        ));
    }
    if k == 0 {
        return contract("need at least one client");
    }
    let mut test = Vec::new();
    let mut by_domain: BTreeMap<u16, Vec<u32>> = BTreeMap::new();
    for s in &ds.samples {
        if s.domain == target {
            test.push(s.id);
        } else {
            by_domain.entry(s.domain).or_default().push(s.id);
        }
    }
    let mut clients = vec![Vec::new(); k];
    if k == by_domain.len() {
        for (c, ids) in by_domain.into_values().enumerate() {
            clients[c] = ids;
        }
    } else {
        for (i, id) in by_domain.into_values().flatten().enumerate() {
            clients[i % k].push(id);
        }
    }
    if let Some(c) = clients.iter().position(Vec::is_empty) {
        return Err(Error::Degenerate(format!("client {c} received no samples")));
    }
    Ok(SplitPlan {
        target,
        clients,
        test,
    })
}

/// Splits `(id, domain)` pairs over `k` clients. Each sample is, with
/// probability `skew`, routed to a client owning its domain (clients are
/// assigned home domains round-robin), and otherwise dealt into a uniform
/// pool; both groups are shuffled and dealt round-robin.
pub fn partition_to_clients<R: Rng + ?Sized>(
    samples: &[(u32, u16)],
    k: usize,
    skew: f64,
    rng: &mut R,
) -> Result<Vec<Vec<u32>>> {
    if k == 0 || k > samples.len() {
        return contract(format!(
            "cannot split {} samples over {k} clients",
            samples.len()
        ));
    }
    if !(0.0..=1.0).contains(&skew) {
        return contract(format!("skew must be in [0, 1], got {skew}"));
    }
    let domains: Vec<u16> = {
        let mut d: Vec<u16> = samples.iter().map(|s| s.1).collect();
        d.sort_unstable();
        d.dedup();
        d
    };
    // Home clients of each domain.
    let mut homes: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    if k >= domains.len() {
        for c in 0..k {
            homes.entry(domains[c % domains.len()]).or_default().push(c);
        }
    } else {
        for (i, &d) in domains.iter().enumerate() {
            homes.entry(d).or_default().push(i % k);
        }
    }

    let mut pure: BTreeMap<u16, Vec<u32>> = BTreeMap::new();
    let mut pool = Vec::new();
    for &(id, d) in samples {
        let routed = skew >= 1.0 || (skew > 0.0 && rng.random::<f64>() < skew);
        if routed {
            pure.entry(d).or_default().push(id);
        } else {
            pool.push(id);
        }
    }
    let mut clients = vec![Vec::new(); k];
    for (d, mut ids) in pure {
        ids.shuffle(rng);
        let h = &homes[&d];
        for (i, id) in ids.into_iter().enumerate() {
            clients[h[i % h.len()]].push(id);
        }
    }
    pool.shuffle(rng);
    // Deal the pool starting with the currently smallest clients.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by_key(|&c| (clients[c].len(), c));
    for (i, id) in pool.into_iter().enumerate() {
        clients[order[i % k]].push(id);
    }
    for c in &mut clients {
        c.sort_unstable();
    }
    if let Some(c) = clients.iter().position(Vec::is_empty) {
        return Err(Error::Degenerate(format!("client {c} received no samples")));
    }
    Ok(clients)
}

/// Writes `ds` in the `FDGD` format.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_dataset<W: Write>(ds: &Dataset, w: &mut W) -> Result<()> {
    let dims = [ds.classes, ds.domains, ds.channels, ds.height, ds.width];
    if dims.iter().any(|&d| d > u16::MAX as usize) || ds.len() > u32::MAX as usize {
        return contract("dataset dimensions exceed the file format");
    }
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(ds.len() as u32).to_le_bytes())?;
    for d in dims {
        w.write_all(&(d as u16).to_le_bytes())?;
    }
    for s in &ds.samples {
        w.write_all(&s.id.to_le_bytes())?;
        w.write_all(&s.domain.to_le_bytes())?;
        w.write_all(&s.label.to_le_bytes())?;
        for &v in s.image.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(&mut BufReader::new(File::open(path)?))
}

struct Cursor<'a, R> {
    inner: &'a mut R,
    offset: u64,
}

impl<R: Read> Cursor<'_, R> {
    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.fill(&mut buf, what)?;
        Ok(buf)
    }

    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let start = self.offset;
        let mut got = 0;
        while got < buf.len() {
            match self.inner.read(&mut buf[got..]) {
                Ok(0) => {
                    return Err(Error::Format {
                        offset: start + got as u64,
                        message: format!("truncated {what}"),
                    })
                }
                Ok(n) => got += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(what)?))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(what)?))
    }
}

/// Reads an `FDGD` stream one record at a time.
pub fn read_dataset<R: Read>(r: &mut R) -> Result<Dataset> {
    let mut cur = Cursor {
        inner: r,
        offset: 0,
    };
    let magic: [u8; 4] = cur.take("magic")?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, not an FDGD file".into(),
        });
    }
    let version = cur.u16("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let count = cur.u32("sample count")? as usize;
    let classes = cur.u16("class count")? as usize;
    let domains = cur.u16("domain count")? as usize;
    let channels = cur.u16("channels")? as usize;
    let height = cur.u16("height")? as usize;
    let width = cur.u16("width")? as usize;
    debug_assert_eq!(cur.offset, HEADER_LEN);
    if count > 0 && (channels == 0 || height == 0 || width == 0) {
        return Err(Error::Format {
            offset: 14,
            message: "zero image extent".into(),
        });
    }
    let pixels = channels * height * width;
    let mut raw = vec![0u8; 4 * pixels];
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let record = cur.offset;
        let id = cur.u32(&format!("record {i}"))?;
        let domain_at = cur.offset;
        let domain = cur.u16(&format!("record {i}"))?;
        let label_at = cur.offset;
        let label = cur.u16(&format!("record {i}"))?;
        if domain as usize >= domains {
            return Err(Error::Format {
                offset: domain_at,
                message: format!("record {i}: domain {domain} out of range"),
            });
        }
        if label as usize >= classes {
            return Err(Error::Format {
                offset: label_at,
                message: format!("record {i}: label {label} out of range"),
            });
        }
        cur.fill(&mut raw, &format!("record {i} (starting at byte {record})"))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        samples.push(LabeledSample {
            id,
            domain,
            label,
            image: Tensor::new(vec![channels, height, width], data)?,
        });
    }
    Ok(Dataset {
        classes,
        domains,
        channels,
        height,
        width,
        samples,
    })
}

/// Deterministic per-run rng for partitioning.
pub fn partition_rng(seed: u64, target: u16, k: usize) -> SimRng {
    stream_rng(seed, &[stream::PARTITION, target as u64, k as u64])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DataConfig {
        DataConfig {
            per_domain: 20,
            image_size: 8,
            ..DataConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic_domains(&small(), 3).unwrap();
        let b = generate_synthetic_domains(&small(), 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic_domains(&small(), 4).unwrap());
        assert_eq!(a.len(), 80);
        let ids: std::collections::BTreeSet<u32> = a.samples.iter().map(|s| s.id).collect();
        assert_eq!(ids.len(), 80);
        assert!(a.samples.iter().all(|s| s.image.is_finite()));
    }

    #[test]
    fn identity_style_gives_identical_pairs() {
        let cfg = DataConfig {
            paired_content: true,
            style_strength: 0.0,
            ..small()
        };
        let ds = generate_synthetic_domains(&cfg, 5).unwrap();
        for j in 0..20 {
            assert_eq!(ds.samples[j].image, ds.samples[20 + j].image);
            assert_eq!(ds.samples[j].label, ds.samples[20 + j].label);
        }
    }

    #[test]
    fn styles_are_separated_and_invertible() {
        let specs = domain_specs(4, 1.0, 0.5, 11);
        for (i, a) in specs.iter().enumerate() {
            assert!(a.is_invertible());
            for b in &specs[i + 1..] {
                let (ma, mb) = (a.mean_colour(), b.mean_colour());
                let d: f64 = (0..3).map(|c| (ma[c] - mb[c]).powi(2)).sum::<f64>().sqrt();
                assert!(d >= 0.5);
            }
        }
    }

    #[test]
    fn lodo_one_domain_per_client() {
        let ds = generate_synthetic_domains(&small(), 1).unwrap();
        let plan = leave_one_domain_out(&ds, 3, 3).unwrap();
        assert_eq!(plan.test.len(), 20);
        for (c, ids) in plan.clients.iter().enumerate() {
            assert!(ids
                .iter()
                .all(|&id| ds.samples[id as usize].domain == c as u16));
            assert_eq!(ids.len(), 20);
        }
        assert!(leave_one_domain_out(&ds, 4, 3).is_err());
        let mut seen = vec![0; 4];
        for t in 0..4u16 {
            let p = leave_one_domain_out(&ds, t, 3).unwrap();
            for id in &p.test {
                seen[ds.samples[*id as usize].domain as usize] += 1;
                assert!(p.clients.iter().all(|c| !c.contains(id)));
            }
        }
        assert_eq!(seen, vec![20; 4]);
    }

    #[test]
    fn partition_forced_branches() {
        let samples: Vec<(u32, u16)> = (0..400).map(|i| (i, (i / 100) as u16)).collect();
        let mut rng = partition_rng(1, 0, 4);
        let pure = partition_to_clients(&samples, 4, 1.0, &mut rng).unwrap();
        for c in &pure {
            let d = samples[c[0] as usize].1;
            assert!(c.iter().all(|&id| samples[id as usize].1 == d));
        }
        let uni = partition_to_clients(&samples, 4, 0.0, &mut rng).unwrap();
        assert!(uni.iter().all(|c| c.len() == 100));
        let mut all: Vec<u32> = partition_to_clients(&samples, 7, 0.4, &mut rng)
            .unwrap()
            .concat();
        all.sort_unstable();
        assert_eq!(all, (0..400).collect::<Vec<_>>());
        assert!(partition_to_clients(&samples[..3], 4, 0.0, &mut rng).is_err());
    }

    #[test]
    fn file_round_trip_and_errors() {
        let ds = generate_synthetic_domains(&small(), 2).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        assert_eq!(buf.len() as u64, HEADER_LEN + 80 * (8 + 4 * 3 * 64));
        assert_eq!(read_dataset(&mut buf.as_slice()).unwrap(), ds);

        let cut = &buf[..buf.len() - 10];
        match read_dataset(&mut &cut[..]) {
            Err(Error::Format { offset, .. }) => assert!(offset > HEADER_LEN),
            other => panic!("expected format error, got {other:?}"),
        }
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_dataset(&mut bad.as_slice()),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut bad_label = buf.clone();
        let label_at = HEADER_LEN as usize + 6;
        bad_label[label_at..label_at + 2].copy_from_slice(&99u16.to_le_bytes());
        match read_dataset(&mut bad_label.as_slice()) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, label_at as u64),
            other => panic!("expected format error, got {other:?}"),
        }

        let empty = Dataset {
            samples: vec![],
            ..ds
        };
        let mut buf = Vec::new();
        write_dataset(&empty, &mut buf).unwrap();
        assert!(read_dataset(&mut buf.as_slice()).unwrap().is_empty());
    }
}
