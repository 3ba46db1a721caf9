//! Style-statistics augmentation.
//!
//! A feature map's "style" is its per-channel spatial mean and standard
//! deviation. Mixing replaces a sample's style with a convex combination of its
//! own and a partner's, drawn either from the same batch or from a bank of
//! statistics uploaded by other clients. Bank entries are grouped by k-means
//! over their standardized (mean ∥ std) vectors, and clusters are sampled in
//! proportion to their internal spread.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Beta;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numerics::{moments, Tensor};

/// Floor applied to every per-channel standard deviation.
pub const STYLE_EPS: f64 = 1e-6;

/// Where a set of statistics came from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Origin {
    pub client: u32,
    pub sample: u32,
}

/// Per-channel (mean, std) of one sample at one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub origin: Origin,
    /// Mix point the statistics were measured at.
    pub layer: u16,
}

impl StyleStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// `(mean ∥ std)`, the vector clustered on.
    pub fn feature_vector(&self) -> Vec<f64> {
        let mut v = self.mean.clone();
        v.extend_from_slice(&self.std);
        v
    }

    /// Bytes taken by one record with `channels` channels on the wire.
    pub const fn wire_size(channels: usize) -> usize {
        4 + 4 + 2 + 2 + 16 * channels
    }

    /// `client u32 | sample u32 | layer u16 | C u16 | C means | C stds`,
    /// all little-endian.
    pub fn write_wire(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.origin.client.to_le_bytes());
        out.extend_from_slice(&self.origin.sample.to_le_bytes());
        out.extend_from_slice(&self.layer.to_le_bytes());
        out.extend_from_slice(&(self.channels() as u16).to_le_bytes());
        for v in self.mean.iter().chain(&self.std) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    /// Decodes one record from the front of `buf`, returning it and the
    /// number of bytes consumed. `base` is the offset of `buf` in the
    /// enclosing message, for error reporting.
    pub fn read_wire(buf: &[u8], base: u64) -> Result<(Self, usize)> {
        let trunc = |at: usize| Error::Format {
            offset: base + at as u64,
            message: "truncated style-statistics record".into(),
        };
        if buf.len() < 12 {
            return Err(trunc(buf.len()));
        }
        let client = u32::from_le_bytes(buf[0..4].try_into().unwrap());
        let sample = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        let layer = u16::from_le_bytes(buf[8..10].try_into().unwrap());
        let c = u16::from_le_bytes(buf[10..12].try_into().unwrap()) as usize;
        let size = Self::wire_size(c);
        if buf.len() < size {
            return Err(trunc(buf.len()));
        }
        let vals: Vec<f64> = buf[12..size]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let stats = StyleStats {
            mean: vals[..c].to_vec(),
            std: vals[c..].to_vec(),
            origin: Origin { client, sample },
            layer,
        };
        if stats.std.iter().any(|&s| !(s >= STYLE_EPS)) || stats.mean.iter().any(|m| !m.is_finite())
        {
            return Err(Error::Format {
                offset: base,
                message: "style statistics out of range".into(),
            });
        }
        Ok((stats, size))
    }
}

/// Encodes a list of records back to back.
pub fn encode_stats(stats: &[StyleStats]) -> Vec<u8> {
    let mut out = Vec::new();
    for s in stats {
        s.write_wire(&mut out);
    }
    out
}

pub fn decode_stats(mut buf: &[u8]) -> Result<Vec<StyleStats>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    while !buf.is_empty() {
        let (s, used) = StyleStats::read_wire(buf, offset)?;
        out.push(s);
        buf = &buf[used..];
        offset += used as u64;
    }
    Ok(out)
}

/// Which of the two mixed statistics scales and which shifts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleRoles {
    /// Scale by the mixed std, shift by the mixed mean. Mixing a sample with
    /// itself returns it unchanged.
    #[default]
    Standard,
    /// Scale by the mixed mean, shift by the mixed std. Kept for comparison
    /// only; it does not preserve the input when λ = 1.
    Swapped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixConfig {
    /// Beta(α, α) shape for the mixing weight.
    pub alpha: f64,
    /// Chance of taking the partner from the cross-client bank.
    pub p_cross: f64,
    pub k_clusters: usize,
    /// Chance that a call to the augmenter mixes at all.
    pub apply_prob: f64,
    /// Candidate layers (1-based, after each conv+relu).
    pub mix_points: Vec<usize>,
    pub roles: StyleRoles,
    /// Pins λ instead of sampling it. Test hook.
    #[serde(skip)]
    pub fixed_lambda: Option<f64>,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            p_cross: 0.5,
            k_clusters: 3,
            apply_prob: 0.5,
            mix_points: vec![1, 2],
            roles: StyleRoles::Standard,
            fixed_lambda: None,
        }
    }
}

impl MixConfig {
    pub fn validate(&self, errors: &mut Vec<String>, prefix: &str) {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            errors.push(format!("{prefix}.alpha must be > 0, got {}", self.alpha));
        }
        for (name, p) in [("p_cross", self.p_cross), ("apply_prob", self.apply_prob)] {
            if !(0.0..=1.0).contains(&p) {
                errors.push(format!("{prefix}.{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.k_clusters == 0 {
            errors.push(format!("{prefix}.k_clusters must be ≥ 1"));
        }
        if self.mix_points.is_empty() || self.mix_points.iter().any(|p| !(1..=2).contains(p)) {
            errors.push(format!(
                "{prefix}.mix_points must be a non-empty subset of {{1, 2}}, got {:?}",
                self.mix_points
            ));
        }
    }
}

/// Style statistics of every sample in a `[B, C, H, W]` batch. Samples are
/// tagged with their batch position and layer 0.
pub fn channel_stats(x: &Tensor) -> Result<Vec<StyleStats>> {
    let &[b, c, h, w] = x.shape() else {
        return contract(format!(
            "channel_stats: expected [B,C,H,W], got {:?}",
            x.shape()
        ));
    };
    let hw = h * w;
    Ok((0..b)
        .map(|i| {
            let mut mean = Vec::with_capacity(c);
            let mut std = Vec::with_capacity(c);
            for ch in 0..c {
                let start = (i * c + ch) * hw;
                let (m, s) = moments(&x.data()[start..start + hw]);
                mean.push(m);
                std.push(s.max(STYLE_EPS));
            }
            StyleStats {
                mean,
                std,
                origin: Origin {
                    client: 0,
                    sample: i as u32,
                },
                layer: 0,
            }
        })
        .collect())
}

/// λ ~ Beta(α, α).
pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::Contract(format!("Beta({alpha}, {alpha}): {e}")))?;
    Ok(beta.sample(rng).clamp(0.0, 1.0))
}

/// `λ·s_i + (1−λ)·s_j` for both means and stds.
pub fn mix_statistics(
    own: &StyleStats,
    partner: &StyleStats,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if own.channels() != partner.channels() {
        return contract(format!(
            "mix_statistics: {} vs {} channels",
            own.channels(),
            partner.channels()
        ));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return contract(format!("mix_statistics: λ = {lambda} outside [0, 1]"));
    }
    let lerp = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter()
            .zip(b)
            .map(|(x, y)| lambda * x + (1.0 - lambda) * y)
            .collect()
    };
    Ok((lerp(&own.mean, &partner.mean), lerp(&own.std, &partner.std)))
}

/// Re-styles one `[C, H, W]` sample whose own statistics are `own` to the
/// mixed statistics.
pub fn apply_mixstyle(
    x: &Tensor,
    own: &StyleStats,
    mixed: (&[f64], &[f64]),
    roles: StyleRoles,
) -> Result<Tensor> {
    let &[c, h, w] = x.shape() else {
        return contract(format!(
            "apply_mixstyle: expected [C,H,W], got {:?}",
            x.shape()
        ));
    };
    if own.channels() != c || mixed.0.len() != c || mixed.1.len() != c {
        return contract("apply_mixstyle: channel count mismatch");
    }
    let (scale, shift) = match roles {
        StyleRoles::Standard => (mixed.1, mixed.0),
        StyleRoles::Swapped => (mixed.0, mixed.1),
    };
    let hw = h * w;
    let mut out = x.clone();
    for (ch, plane) in out.data_mut().chunks_mut(hw).enumerate() {
        let (mu, sd) = (own.mean[ch], own.std[ch]);
        for v in plane.iter_mut() {
            *v = scale[ch] * (*v - mu) / sd + shift[ch];
        }
    }
    Ok(out)
}

/// Result of k-means over a set of style vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    /// Cluster of each input point.
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Point indices per cluster.
    pub members: Vec<Vec<usize>>,
    pub iterations: usize,
}

const KMEANS_MAX_ITERS: usize = 50;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Lloyd's k-means with k-means++ seeding, stopping when assignments are
/// stable or after 50 iterations.
pub fn kmeans<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Result<Clustering> {
    if k == 0 {
        return contract("kmeans: k must be ≥ 1");
    }
    if points.len() < k {
        return Err(Error::Degenerate(format!(
            "cannot form {k} clusters from {} points",
            points.len()
        )));
    }
    // k-means++ seeding.
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    while centroids.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                centroids
                    .iter()
                    .map(|c| sq_dist(p, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            // Every point coincides with a centroid: take the first unused one.
            Err(_) => (0..points.len())
                .find(|i| !centroids.iter().any(|c| c == &points[*i]))
                .unwrap_or(centroids.len()),
        };
        centroids.push(points[next].clone());
    }

    let dim = points[0].len();
    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITERS {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // Re-seed an empty cluster at the point farthest from its centroid.
                let far = (0..points.len())
                    .max_by(|&i, &j| {
                        let di = sq_dist(&points[i], &centroids[assignment[i]]);
                        let dj = sq_dist(&points[j], &centroids[assignment[j]]);
                        di.total_cmp(&dj).then(j.cmp(&i))
                    })
                    .unwrap();
                centroids[c] = points[far].clone();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }
    let mut members = vec![Vec::new(); k];
    for (i, &a) in assignment.iter().enumerate() {
        members[a].push(i);
    }
    Ok(Clustering {
        assignment,
        centroids,
        members,
        iterations,
    })
}

/// Z-scores each dimension across the point set. Constant dimensions map
/// to zero.
pub fn standardize(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let Some(first) = points.first() else {
        return Vec::new();
    };
    let n = points.len() as f64;
    let dim = first.len();
    let mut out = points.to_vec();
    for d in 0..dim {
        let mean = points.iter().map(|p| p[d]).sum::<f64>() / n;
        let sd = (points.iter().map(|p| (p[d] - mean).powi(2)).sum::<f64>() / n).sqrt();
        for p in &mut out {
            p[d] = if sd > 1e-12 { (p[d] - mean) / sd } else { 0.0 };
        }
    }
    out
}

/// Clusters style statistics on their standardized (mean ∥ std) vectors.
pub fn cluster_styles<R: Rng + ?Sized>(
    stats: &[StyleStats],
    k: usize,
    rng: &mut R,
) -> Result<Clustering> {
    let raw: Vec<Vec<f64>> = stats.iter().map(StyleStats::feature_vector).collect();
    kmeans(&standardize(&raw), k, rng)
}

/// Total variance (mean squared distance to the centroid) of a point set.
pub fn total_variance(points: &[Vec<f64>]) -> f64 {
    let Some(first) = points.first() else {
        return 0.0;
    };
    let n = points.len() as f64;
    let mut centroid = vec![0.0; first.len()];
    for p in points {
        for (c, v) in centroid.iter_mut().zip(p) {
            *c += v / n;
        }
    }
    points.iter().map(|p| sq_dist(p, &centroid)).sum::<f64>() / n
}

/// Normalizes per-cluster variances into sampling probabilities, falling
/// back to uniform when the variances sum to less than `1e-12`.
pub fn weights_from_variances(variances: &[f64]) -> Vec<f64> {
    let total: f64 = variances.iter().sum();
    if !(total >= 1e-12) {
        let u = 1.0 / variances.len() as f64;
        return vec![u; variances.len()];
    }
    variances.iter().map(|v| v / total).collect()
}

/// Cluster sampling probabilities proportional to within-cluster variance.
pub fn sampling_weights(clusters: &[Vec<Vec<f64>>]) -> Vec<f64> {
    let vars: Vec<f64> = clusters.iter().map(|c| total_variance(c)).collect();
    weights_from_variances(&vars)
}

/// Clustered statistics of one layer of a bank.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerClusters {
    /// Indices into [`StyleBank::entries`].
    pub entries: Vec<usize>,
    /// Cluster members, as indices into `entries`.
    pub members: Vec<Vec<usize>>,
    pub weights: Vec<f64>,
}

/// Statistics received from other clients, immutable for one round.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StyleBank {
    pub entries: Vec<StyleStats>,
    clusters: BTreeMap<u16, LayerClusters>,
}

impl StyleBank {
    pub fn new(entries: Vec<StyleStats>) -> Self {
        Self {
            entries,
            clusters: BTreeMap::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Clusters each layer's entries into `min(k, entries)` groups and
    /// derives variance-proportional sampling weights.
    pub fn cluster<R: Rng + ?Sized>(&mut self, k: usize, rng: &mut R) -> Result<()> {
        let mut by_layer: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.entries.iter().enumerate() {
            by_layer.entry(s.layer).or_default().push(i);
        }
        self.clusters.clear();
        for (layer, idx) in by_layer {
            let stats: Vec<StyleStats> = idx.iter().map(|&i| self.entries[i].clone()).collect();
            let raw: Vec<Vec<f64>> = stats.iter().map(StyleStats::feature_vector).collect();
            let points = standardize(&raw);
            let clustering = kmeans(&points, k.min(points.len()), rng)?;
            // Coincident points can leave clusters empty; those are dropped.
            let members: Vec<Vec<usize>> = clustering
                .members
                .into_iter()
                .filter(|m| !m.is_empty())
                .collect();
            let groups: Vec<Vec<Vec<f64>>> = members
                .iter()
                .map(|m| m.iter().map(|&i| points[i].clone()).collect())
                .collect();
            self.clusters.insert(
                layer,
                LayerClusters {
                    entries: idx,
                    members,
                    weights: sampling_weights(&groups),
                },
            );
        }
        Ok(())
    }

    pub fn layer_clusters(&self, layer: u16) -> Option<&LayerClusters> {
        self.clusters.get(&layer)
    }

    fn has_layer(&self, layer: u16) -> bool {
        self.entries.iter().any(|s| s.layer == layer)
    }

    /// Draws one entry of `layer`: a cluster by weight then a uniform member,
    /// or a uniform entry when the bank has not been clustered.
    fn draw<R: Rng + ?Sized>(&self, layer: u16, rng: &mut R) -> Option<&StyleStats> {
        if let Some(lc) = self.clusters.get(&layer) {
            let dist = WeightedIndex::new(&lc.weights).ok()?;
            let members = &lc.members[dist.sample(rng)];
            let pick = members[rng.random_range(0..members.len())];
            return Some(&self.entries[lc.entries[pick]]);
        }
        let candidates: Vec<&StyleStats> =
            self.entries.iter().filter(|s| s.layer == layer).collect();
        if candidates.is_empty() {
            return None;
        }
        Some(candidates[rng.random_range(0..candidates.len())])
    }
}

/// Picks the style partner for batch element `own`: from the bank with
/// probability `p_cross` (when it holds statistics for `layer`), otherwise
/// a uniformly drawn other batch element (itself only if the batch has one
/// element).
pub fn select_partner<R: Rng + ?Sized>(
    own: usize,
    batch: &[StyleStats],
    bank: &StyleBank,
    layer: u16,
    cfg: &MixConfig,
    rng: &mut R,
) -> Result<StyleStats> {
    if batch.is_empty() || own >= batch.len() {
        return contract("select_partner: empty batch or index out of range");
    }
    if bank.has_layer(layer) && rng.random::<f64>() < cfg.p_cross {
        if let Some(s) = bank.draw(layer, rng) {
            return Ok(s.clone());
        }
    }
    if batch.len() == 1 {
        return Ok(batch[0].clone());
    }
    let mut j = rng.random_range(0..batch.len() - 1);
    if j >= own {
        j += 1;
    }
    Ok(batch[j].clone())
}

/// Everything needed to re-style one batch at one mix point.
#[derive(Clone, Debug, PartialEq)]
pub struct MixDirective {
    pub point: usize,
    pub partners: Vec<StyleStats>,
    pub lambdas: Vec<f64>,
    pub roles: StyleRoles,
}

impl MixDirective {
    /// Directive that mixes every sample with itself at weight 1.
    pub fn identity(point: usize, batch: &[StyleStats]) -> Self {
        Self {
            point,
            partners: batch.to_vec(),
            lambdas: vec![1.0; batch.len()],
            roles: StyleRoles::Standard,
        }
    }

    /// Per-sample mixed (mean, std) targets, flattened as `B·C` vectors in the
    /// order the re-styling op expects (scale targets second).
    pub fn targets(&self, own: &[StyleStats]) -> Result<(Vec<f64>, Vec<f64>)> {
        if own.len() != self.partners.len() || own.len() != self.lambdas.len() {
            return contract(format!(
                "mix directive covers {} samples, batch has {}",
                self.partners.len(),
                own.len()
            ));
        }
        let mut shift = Vec::new();
        let mut scale = Vec::new();
        for ((o, p), &l) in own.iter().zip(&self.partners).zip(&self.lambdas) {
            let (m, s) = mix_statistics(o, p, l)?;
            match self.roles {
                StyleRoles::Standard => {
                    shift.extend(m);
                    scale.extend(s);
                }
                StyleRoles::Swapped => {
                    shift.extend(s);
                    scale.extend(m);
                }
            }
        }
        Ok((shift, scale))
    }
}

fn fires<R: Rng + ?Sized>(cfg: &MixConfig, rng: &mut R) -> bool {
    rng.random::<f64>() < cfg.apply_prob
}

fn draw_mix<R: Rng + ?Sized>(
    point: usize,
    batch: &[StyleStats],
    bank: &StyleBank,
    cfg: &MixConfig,
    rng: &mut R,
) -> Result<MixDirective> {
    let mut partners = Vec::with_capacity(batch.len());
    let mut lambdas = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        partners.push(select_partner(i, batch, bank, point as u16, cfg, rng)?);
        lambdas.push(match cfg.fixed_lambda {
            Some(l) => l,
            None => sample_lambda(cfg.alpha, rng)?,
        });
    }
    Ok(MixDirective {
        point,
        partners,
        lambdas,
        roles: cfg.roles,
    })
}

/// Decides whether and how one augmented view is mixed. `stats_at` gives
/// the batch statistics at each configured mix point. Returns `None` when
/// the augmenter does not fire.
pub fn plan_mix<R: Rng + ?Sized>(
    stats_at: &BTreeMap<usize, Vec<StyleStats>>,
    bank: &StyleBank,
    cfg: &MixConfig,
    rng: &mut R,
) -> Result<Option<MixDirective>> {
    if !fires(cfg, rng) {
        return Ok(None);
    }
    let point = cfg.mix_points[rng.random_range(0..cfg.mix_points.len())];
    let Some(batch) = stats_at.get(&point) else {
        return contract(format!("no batch statistics for mix point {point}"));
    };
    draw_mix(point, batch, bank, cfg, rng).map(Some)
}

/// The augmenter on a standalone `[B, C, H, W]` map treated as mix point
/// `layer`: with probability `apply_prob` every sample is mixed with its
/// selected partner under a fresh λ; otherwise the input is returned.
pub fn augment_batch<R: Rng + ?Sized>(
    x: &Tensor,
    layer: usize,
    bank: &StyleBank,
    cfg: &MixConfig,
    rng: &mut R,
) -> Result<Tensor> {
    if !fires(cfg, rng) {
        return Ok(x.clone());
    }
    let mut stats = channel_stats(x)?;
    for s in &mut stats {
        s.layer = layer as u16;
    }
    let plan = draw_mix(layer, &stats, bank, cfg, rng)?;
    let mut out = Vec::with_capacity(stats.len());
    for (i, own) in stats.iter().enumerate() {
        let mixed = mix_statistics(own, &plan.partners[i], plan.lambdas[i])?;
        out.push(apply_mixstyle(
            &x.index_outer(i),
            own,
            (&mixed.0, &mixed.1),
            cfg.roles,
        )?);
    }
    Tensor::stack(&out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn stats(mean: &[f64], std: &[f64]) -> StyleStats {
        StyleStats {
            mean: mean.to_vec(),
            std: std.to_vec(),
            origin: Origin::default(),
            layer: 1,
        }
    }

    #[test]
    fn stats_of_small_map() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = channel_stats(&x).unwrap();
        assert_eq!(s.len(), 1);
        assert!((s[0].mean[0] - 2.5).abs() < 1e-15);
        assert!((s[0].std[0] - 1.25f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn constant_map_hits_floor() {
        let x = Tensor::full(&[1, 1, 3, 3], 5.0);
        let s = channel_stats(&x).unwrap();
        assert_eq!(s[0].mean[0], 5.0);
        assert_eq!(s[0].std[0], STYLE_EPS);
    }

    #[test]
    fn stats_shape_contract() {
        let x = Tensor::full(&[2, 3, 4, 4], 1.0);
        let s = channel_stats(&x).unwrap();
        assert_eq!(s.len(), 2);
        assert!(s.iter().all(|t| t.mean.len() == 3 && t.std.len() == 3));
    }

    #[test]
    fn lambda_in_unit_interval() {
        let mut rng = stream_rng(1, &[]);
        for _ in 0..1000 {
            let l = sample_lambda(0.1, &mut rng).unwrap();
            assert!((0.0..=1.0).contains(&l));
        }
    }

    #[test]
    fn lambda_uniform_mean() {
        let mut rng = stream_rng(2, &[]);
        let n = 100_000;
        let mean = (0..n)
            .map(|_| sample_lambda(1.0, &mut rng).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
    }

    #[test]
    fn small_alpha_is_u_shaped() {
        let mut rng = stream_rng(3, &[]);
        let n = 100_000;
        let extreme = (0..n)
            .map(|_| sample_lambda(0.1, &mut rng).unwrap())
            .filter(|&l| !(0.1..=0.9).contains(&l))
            .count();
        assert!(extreme as f64 / n as f64 > 0.5);
    }

    #[test]
    fn mix_endpoints_and_midpoint() {
        let a = stats(&[1.0], &[2.0]);
        let b = stats(&[3.0], &[4.0]);
        assert_eq!(mix_statistics(&a, &b, 1.0).unwrap(), (vec![1.0], vec![2.0]));
        assert_eq!(mix_statistics(&a, &b, 0.0).unwrap(), (vec![3.0], vec![4.0]));
        assert_eq!(mix_statistics(&a, &b, 0.5).unwrap(), (vec![2.0], vec![3.0]));
        let c = stats(&[1.0, 2.0], &[1.0, 1.0]);
        assert!(matches!(
            mix_statistics(&a, &c, 0.5),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn restyle_to_unit_normal() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let own = channel_stats(&x.clone().reshape(vec![1, 1, 2, 2]).unwrap()).unwrap();
        let out = apply_mixstyle(&x, &own[0], (&[0.0], &[1.0]), StyleRoles::Standard).unwrap();
        let expect = [-1.3416407865, -0.4472135955, 0.4472135955, 1.3416407865];
        for (g, e) in out.data().iter().zip(expect) {
            assert!((g - e).abs() < 1e-9);
        }
    }

    #[test]
    fn kmeans_k1_and_degenerate() {
        let mut rng = stream_rng(4, &[]);
        let pts = vec![vec![0.0], vec![1.0], vec![5.0]];
        let c = kmeans(&pts, 1, &mut rng).unwrap();
        assert_eq!(c.assignment, vec![0, 0, 0]);
        let two = vec![vec![0.0], vec![1.0]];
        assert!(matches!(
            kmeans(&two, 3, &mut rng),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn weights_cases() {
        assert_eq!(weights_from_variances(&[1.0, 3.0]), vec![0.25, 0.75]);
        assert_eq!(weights_from_variances(&[2.0, 2.0]), vec![0.5, 0.5]);
        let singles = vec![
            vec![vec![1.0, 2.0]],
            vec![vec![3.0, 4.0]],
            vec![vec![0.0, 0.0]],
        ];
        let w = sampling_weights(&singles);
        assert!(w.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn partner_from_batch_when_bank_empty() {
        let batch = vec![
            stats(&[0.0], &[1.0]),
            stats(&[1.0], &[1.0]),
            stats(&[2.0], &[1.0]),
        ];
        let cfg = MixConfig {
            p_cross: 1.0,
            ..MixConfig::default()
        };
        let mut rng = stream_rng(5, &[]);
        for _ in 0..50 {
            let p = select_partner(1, &batch, &StyleBank::default(), 1, &cfg, &mut rng).unwrap();
            assert_ne!(p.mean[0], 1.0);
        }
        let single = vec![stats(&[7.0], &[1.0])];
        let p = select_partner(0, &single, &StyleBank::default(), 1, &cfg, &mut rng).unwrap();
        assert_eq!(p.mean[0], 7.0);
    }

    #[test]
    fn partner_from_bank_when_forced() {
        let batch = vec![stats(&[0.0], &[1.0]), stats(&[1.0], &[1.0])];
        let mut remote = stats(&[9.0], &[3.0]);
        remote.origin.client = 42;
        let mut bank = StyleBank::new(vec![remote.clone(), remote.clone()]);
        let mut rng = stream_rng(6, &[]);
        bank.cluster(3, &mut rng).unwrap();
        let cfg = MixConfig {
            p_cross: 1.0,
            ..MixConfig::default()
        };
        for _ in 0..20 {
            let p = select_partner(0, &batch, &bank, 1, &cfg, &mut rng).unwrap();
            assert_eq!(p.origin.client, 42);
        }
        // Layer-2 mixing cannot use layer-1 statistics.
        let p = select_partner(0, &batch, &bank, 2, &cfg, &mut rng).unwrap();
        assert_eq!(p.origin.client, 0);
    }

    #[test]
    fn wire_record_layout() {
        let mut s = stats(&[1.5, -2.0], &[0.5, 3.0]);
        s.origin = Origin {
            client: 7,
            sample: 300,
        };
        let bytes = encode_stats(std::slice::from_ref(&s));
        assert_eq!(bytes.len(), StyleStats::wire_size(2));
        assert_eq!(&bytes[0..4], &7u32.to_le_bytes());
        assert_eq!(&bytes[4..8], &300u32.to_le_bytes());
        assert_eq!(&bytes[8..10], &1u16.to_le_bytes());
        assert_eq!(&bytes[10..12], &2u16.to_le_bytes());
        assert_eq!(&bytes[12..20], &1.5f64.to_le_bytes());
        assert_eq!(decode_stats(&bytes).unwrap(), vec![s]);
        assert!(matches!(
            decode_stats(&bytes[..bytes.len() - 1]),
            Err(Error::Format { .. })
        ));
    }
}
