//! Server round loop, client-side local training, weighted aggregation and
//! the style-statistics exchange.

pub mod transport;

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SplitPlan};
use crate::error::{contract, Error, Result};
use crate::losses::{
    add_proximal, adversarial_loss_on, classification_objective_on, total_objective_on,
    Discriminator, LossBreakdown, LossConfig, ViewTriple,
};
use crate::mixstyle::{
    channel_stats, decode_stats, encode_stats, plan_mix, MixConfig, Origin, StyleBank, StyleStats,
};
use crate::model::{first_point_activations, trace_stats, ArchConfig, ModelParams};
use crate::numerics::{adam_step, cosine_lr, AdamState, LrSchedule, Tape, Tensor};
use crate::rng::{stream, stream_rng};

use transport::{AuditEntry, ByteMeter, ClientMessage, ServerMessage, Transport};

/// Training algorithm run by every client.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    FedAlign,
    FedAvg,
    FedProx,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedAlign => "fedalign",
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedProx => "fedprox",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fedalign" => Some(Algorithm::FedAlign),
            "fedavg" => Some(Algorithm::FedAvg),
            "fedprox" => Some(Algorithm::FedProx),
            _ => None,
        }
    }

    /// Whether clients augment, align and exchange statistics.
    pub fn aligns(self) -> bool {
        self == Algorithm::FedAlign
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub clients: usize,
    pub fraction: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub upload_ratio: f64,
    pub prox_mu: f64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            local_epochs: 3,
            clients: 3,
            fraction: 1.0,
            lr: 0.001,
            batch_size: 32,
            upload_ratio: 0.1,
            prox_mu: 0.01,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self, errors: &mut Vec<String>, prefix: &str) {
        if self.rounds == 0 {
            errors.push(format!("{prefix}.rounds must be ≥ 1"));
        }
        if self.clients == 0 {
            errors.push(format!("{prefix}.clients must be ≥ 1"));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            errors.push(format!(
                "{prefix}.fraction must be in (0, 1], got {}",
                self.fraction
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            errors.push(format!(
                "{prefix}.lr must be a finite value ≥ 0, got {}",
                self.lr
            ));
        }
        if self.batch_size == 0 {
            errors.push(format!("{prefix}.batch_size must be ≥ 1"));
        }
        if !(0.0..=1.0).contains(&self.upload_ratio) {
            errors.push(format!(
                "{prefix}.upload_ratio must be in [0, 1], got {}",
                self.upload_ratio
            ));
        }
        if !(self.prox_mu >= 0.0 && self.prox_mu.is_finite()) {
            errors.push(format!(
                "{prefix}.prox_mu must be ≥ 0, got {}",
                self.prox_mu
            ));
        }
    }
}

/// Everything local training needs besides data and parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSettings {
    pub algorithm: Algorithm,
    pub federation: FederationConfig,
    pub loss: LossConfig,
    pub mix: MixConfig,
    pub arch: ArchConfig,
}

/// `⌈fraction · K⌉` distinct client ids drawn uniformly, in ascending order.
pub fn select_clients(k: usize, fraction: f64, round: usize, seed: u64) -> Result<Vec<u32>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return contract(format!("client fraction must be in (0, 1], got {fraction}"));
    }
    if k == 0 {
        return contract("no clients to select from");
    }
    let m = ((fraction * k as f64) - 1e-9).ceil().max(1.0) as usize;
    if m >= k {
        return Ok((0..k as u32).collect());
    }
    let mut rng = stream_rng(seed, &[stream::SELECT, round as u64]);
    let mut ids: Vec<u32> = index::sample(&mut rng, k, m)
        .into_iter()
        .map(|i| i as u32)
        .collect();
    ids.sort_unstable();
    Ok(ids)
}

/// One client's contribution to aggregation.
#[derive(Clone, Debug)]
pub struct Update {
    pub client: u32,
    pub samples: usize,
    pub params: ModelParams,
}

/// `Σ (n_k / N) θ_k`, evaluated as `θ_ref + Σ (n_k / N)(θ_k − θ_ref)` with
/// the lowest-id client as reference and summation in ascending id order.
/// The reference form returns a single update, or identical updates,
/// bit-for-bit.
pub fn aggregate(updates: &[Update]) -> Result<ModelParams> {
    if updates.is_empty() {
        return contract("aggregate: no updates");
    }
    let mut order: Vec<&Update> = updates.iter().collect();
    order.sort_by_key(|u| u.client);
    let reference = &order[0].params;
    for u in &order {
        if u.samples == 0 {
            return contract(format!(
                "aggregate: client {} reports zero samples",
                u.client
            ));
        }
        if !u.params.is_congruent(reference) {
            return contract(format!(
                "aggregate: client {} has a different architecture",
                u.client
            ));
        }
    }
    let total: usize = order.iter().map(|u| u.samples).sum();
    let mut out = reference.clone();
    for (ti, t) in out.tensors_mut().iter_mut().enumerate() {
        let base = reference.tensors()[ti].data();
        let mut acc = vec![0.0; base.len()];
        for u in &order {
            let w = u.samples as f64 / total as f64;
            for ((a, &v), &r) in acc.iter_mut().zip(u.params.tensors()[ti].data()).zip(base) {
                *a += w * (v - r);
            }
        }
        for ((o, &r), a) in t.data_mut().iter_mut().zip(base).zip(acc) {
            *o = r + a;
        }
    }
    Ok(out)
}

/// Persistent per-client state.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: u32,
    pub sample_ids: Vec<u32>,
    /// Discriminator of the adversarial term; kept across rounds.
    pub discriminator: Option<Discriminator>,
}

impl ClientState {
    pub fn new(id: u32, sample_ids: Vec<u32>, settings: &RunSettings, seed: u64) -> Self {
        let discriminator = (settings.algorithm.aligns() && settings.loss.adversarial).then(|| {
            let mut rng = stream_rng(seed, &[stream::DISCRIMINATOR, id as u64]);
            Discriminator::init(settings.arch.d_z, settings.loss.disc_hidden, &mut rng)
        });
        Self {
            id,
            sample_ids,
            discriminator,
        }
    }
}

/// Read-only data view shared by all clients.
pub struct DataView<'a> {
    pub dataset: &'a Dataset,
    pub index: BTreeMap<u32, usize>,
}

impl<'a> DataView<'a> {
    pub fn new(dataset: &'a Dataset) -> Self {
        Self {
            dataset,
            index: dataset.index(),
        }
    }
}

/// Result of one client's round of local training.
#[derive(Clone, Debug)]
pub struct LocalOutcome {
    pub params: ModelParams,
    pub loss: LossBreakdown,
    pub steps: usize,
}

fn batches_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

/// Runs `E` epochs of local optimization starting from `global` in round
/// `round` (1-based). The global parameters are not modified.
pub fn local_train(
    view: &DataView<'_>,
    client: &mut ClientState,
    global: &ModelParams,
    bank: &StyleBank,
    round: usize,
    settings: &RunSettings,
    seed: u64,
) -> Result<LocalOutcome> {
    let n = client.sample_ids.len();
    if n == 0 {
        return Err(Error::Degenerate(format!(
            "client {} holds no samples",
            client.id
        )));
    }
    let fed = &settings.federation;
    if round == 0 || round > fed.rounds {
        return contract(format!("round {round} outside 1..={}", fed.rounds));
    }
    if fed.local_epochs == 0 {
        return Ok(LocalOutcome {
            params: global.clone(),
            loss: LossBreakdown::default(),
            steps: 0,
        });
    }
    let nb = batches_per_epoch(n, fed.batch_size);
    let schedule = LrSchedule::new(fed.lr, (fed.rounds * fed.local_epochs * nb) as u64)?;
    let mut rng = stream_rng(seed, &[stream::CLIENT, client.id as u64, round as u64]);
    let mut params = global.clone();
    let mut adam = AdamState::new(params.tensors());
    let mut disc_adam = client
        .discriminator
        .as_ref()
        .map(|d| AdamState::new(&d.params));
    let mut losses = Vec::with_capacity(fed.local_epochs * nb);
    let mut order = client.sample_ids.clone();

    for epoch in 0..fed.local_epochs {
        order.shuffle(&mut rng);
        for (b, ids) in order.chunks(fed.batch_size).enumerate() {
            let (x, labels) = view.dataset.batch(&view.index, ids)?;
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, true);
            let xv = tape.constant(x);
            let clean = bound.encode(&mut tape, xv, None)?;
            let y = bound.classify(&mut tape, clean.z)?;

            let mut disc_vars = None;
            let obj = match settings.algorithm {
                Algorithm::FedAlign => {
                    let stats = trace_stats(&tape, &clean, &settings.mix.mix_points)?;
                    let mut zs = [clean.z; 2];
                    let mut ys = [y; 2];
                    for v in 0..2 {
                        if let Some(d) = plan_mix(&stats, bank, &settings.mix, &mut rng)? {
                            zs[v] = bound.encode_from(&mut tape, &clean, &d)?;
                            ys[v] = bound.classify(&mut tape, zs[v])?;
                        }
                    }
                    let views = ViewTriple {
                        z: clean.z,
                        z1: zs[0],
                        z2: zs[1],
                        y,
                        y1: ys[0],
                        y2: ys[1],
                    };
                    let adv = match &client.discriminator {
                        Some(disc) => {
                            let dv = disc.bind(&mut tape);
                            let l = adversarial_loss_on(&mut tape, &dv, clean.z, &zs)?;
                            disc_vars = Some(dv);
                            Some(l)
                        }
                        None => None,
                    };
                    total_objective_on(&mut tape, &views, &labels, &settings.loss, adv)?
                }
                Algorithm::FedAvg => classification_objective_on(&mut tape, y, &labels)?,
                Algorithm::FedProx => {
                    let mut o = classification_objective_on(&mut tape, y, &labels)?;
                    add_proximal(
                        &mut tape,
                        &mut o,
                        bound.vars(),
                        global.tensors(),
                        fed.prox_mu,
                    )?;
                    o
                }
            };
            losses.push(obj.breakdown(&tape)?);
            tape.backward(obj.l_total)?;
            let step = ((round - 1) * fed.local_epochs * nb + epoch * nb + b) as u64;
            let lr = cosine_lr(step, &schedule)?;
            let grads = bound.grads(&tape);
            adam_step(params.tensors_mut(), &grads, &mut adam, lr)?;
            if let (Some(dv), Some(disc), Some(st)) = (
                disc_vars.take(),
                client.discriminator.as_mut(),
                disc_adam.as_mut(),
            ) {
                let g: Vec<Tensor> = dv
                    .iter()
                    .map(|&v| {
                        tape.grad(v)
                            .cloned()
                            .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
                    })
                    .collect();
                adam_step(&mut disc.params, &g, st, lr)?;
            }
        }
    }
    Ok(LocalOutcome {
        params,
        loss: LossBreakdown::mean(&losses),
        steps: losses.len(),
    })
}

/// Number of statistics records a client with `n` samples uploads.
pub fn upload_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Per-sample statistics at mix point 1 under `params` for `⌈r·n_k⌉`
/// samples drawn without replacement, tagged with their origin.
pub fn upload_stats(
    view: &DataView<'_>,
    client: &ClientState,
    params: &ModelParams,
    ratio: f64,
    round: usize,
    seed: u64,
) -> Result<Vec<StyleStats>> {
    if !(0.0..=1.0).contains(&ratio) {
        return contract(format!("upload ratio must be in [0, 1], got {ratio}"));
    }
    let n = client.sample_ids.len();
    let count = upload_count(n, ratio).min(n);
    if count == 0 {
        return Ok(Vec::new());
    }
    let mut rng = stream_rng(seed, &[stream::UPLOAD, client.id as u64, round as u64]);
    let mut picks: Vec<usize> = index::sample(&mut rng, n, count).into_vec();
    picks.sort_unstable();
    let ids: Vec<u32> = picks.iter().map(|&i| client.sample_ids[i]).collect();
    let mut out = Vec::with_capacity(count);
    for chunk in ids.chunks(64) {
        let (x, _) = view.dataset.batch(&view.index, chunk)?;
        let act = first_point_activations(params, &x)?;
        for (mut s, &id) in channel_stats(&act)?.into_iter().zip(chunk) {
            s.layer = 1;
            s.origin = Origin {
                client: client.id,
                sample: id,
            };
            out.push(s);
        }
    }
    Ok(out)
}

/// Pooled statistics minus those originating at `client`.
pub fn redistribute_stats(pool: &[StyleStats], client: u32) -> Vec<StyleStats> {
    pool.iter()
        .filter(|s| s.origin.client != client)
        .cloned()
        .collect()
}

/// Fraction of `ids` whose arg-max prediction (lowest index on ties)
/// equals the label.
pub fn evaluate(params: &ModelParams, view: &DataView<'_>, ids: &[u32]) -> Result<f64> {
    if ids.is_empty() {
        return contract("evaluate: empty test set");
    }
    let mut correct = 0usize;
    for chunk in ids.chunks(256) {
        let (x, labels) = view.dataset.batch(&view.index, chunk)?;
        let (_, y) = crate::model::forward_full(params, &x)?;
        for (i, &l) in labels.iter().enumerate() {
            if argmax(y.row(i)) == l {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / ids.len() as f64)
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Summary of one communication round.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: usize,
    pub selected: Vec<u32>,
    pub client_losses: Vec<(u32, LossBreakdown)>,
    /// Mean of the selected clients' losses.
    pub loss: LossBreakdown,
    /// Accuracy on every domain after aggregation, by domain id.
    pub domain_acc: Vec<f64>,
    /// Accuracy on the held-out test set.
    pub test_acc: f64,
    /// Mean accuracy over the training domains.
    pub source_acc: f64,
    /// Cumulative meter readings after this round.
    pub bytes: ByteMeter,
    /// Statistics records in the server pool after this round.
    pub pool_size: usize,
}

/// Final parameters, per-round reports and the transport log of a run.
#[derive(Debug)]
pub struct FederationOutcome {
    pub params: ModelParams,
    pub reports: Vec<RoundReport>,
    pub audit: Vec<AuditEntry>,
}

struct ClientResult {
    id: u32,
    samples: usize,
    outcome: LocalOutcome,
    stats: Vec<StyleStats>,
}

/// Runs the full protocol for one held-out split. Clients of a round train
/// concurrently on the ambient rayon pool; results do not depend on its
/// size.
pub fn run_federation(
    dataset: &Dataset,
    split: &SplitPlan,
    settings: &RunSettings,
    seed: u64,
) -> Result<FederationOutcome> {
    let fed = &settings.federation;
    if split.clients.len() != fed.clients {
        return contract(format!(
            "split has {} clients, config expects {}",
            split.clients.len(),
            fed.clients
        ));
    }
    let view = DataView::new(dataset);

    let mut global = ModelParams::init(settings.arch, &mut stream_rng(seed, &[stream::INIT]))?;
    let mut clients: Vec<ClientState> = split
        .clients
        .iter()
        .enumerate()
        .map(|(k, ids)| ClientState::new(k as u32, ids.clone(), settings, seed))
        .collect();
    let mut transport = Transport::new();
    let mut pool: Vec<StyleStats> = Vec::new();
    let mut reports = Vec::with_capacity(fed.rounds);
    let source_domains: Vec<u16> = (0..dataset.domains as u16)
        .filter(|&d| d != split.target)
        .collect();
    let by_domain: Vec<Vec<u32>> = (0..dataset.domains as u16)
        .map(|d| {
            dataset
                .samples
                .iter()
                .filter(|s| s.domain == d)
                .map(|s| s.id)
                .collect()
        })
        .collect();

    for round in 1..=fed.rounds {
        let r32 = round as u32;
        let selected = select_clients(fed.clients, fed.fraction, round, seed)?;

        // Server → clients: global parameters and, when aligning, the bank.
        let ckpt = global.to_checkpoint();
        let mut inbox: BTreeMap<u32, (Vec<u8>, Option<Vec<u8>>)> = BTreeMap::new();
        for &k in &selected {
            let f = transport.send_down(r32, k, &ServerMessage::Broadcast(ckpt.clone()));
            let bank = settings.algorithm.aligns().then(|| {
                let body = encode_stats(&redistribute_stats(&pool, k));
                transport.send_down(r32, k, &ServerMessage::Bank(body))
            });
            inbox.insert(k, (f, bank));
        }

        let work: Vec<&mut ClientState> = clients
            .iter_mut()
            .filter(|c| selected.contains(&c.id))
            .collect();
        let results: Vec<Result<ClientResult>> = work
            .into_par_iter()
            .map(|client| {
                let (bf, bank_frame) = &inbox[&client.id];
                let theta = match Transport::receive_down(bf)?.1 {
                    ServerMessage::Broadcast(b) => ModelParams::from_checkpoint(&b)?,
                    ServerMessage::Bank(_) => return contract("expected a broadcast"),
                };
                let mut bank = match bank_frame {
                    Some(f) => match Transport::receive_down(f)?.1 {
                        ServerMessage::Bank(b) => StyleBank::new(decode_stats(&b)?),
                        ServerMessage::Broadcast(_) => return contract("expected a bank"),
                    },
                    None => StyleBank::default(),
                };
                if !bank.is_empty() {
                    let mut crng =
                        stream_rng(seed, &[stream::CLUSTER, client.id as u64, round as u64]);
                    bank.cluster(settings.mix.k_clusters, &mut crng)?;
                }
                let outcome = local_train(&view, client, &theta, &bank, round, settings, seed)?;
                let stats = if settings.algorithm.aligns() {
                    upload_stats(&view, client, &theta, fed.upload_ratio, round, seed)?
                } else {
                    Vec::new()
                };
                Ok(ClientResult {
                    id: client.id,
                    samples: client.sample_ids.len(),
                    outcome,
                    stats,
                })
            })
            .collect();

        // Clients → server, in id order.
        let mut updates = Vec::with_capacity(results.len());
        let mut client_losses = Vec::with_capacity(results.len());
        let mut next_pool = Vec::new();
        for res in results {
            let res = res?;
            let mut frames = vec![transport.send_up(
                r32,
                res.id,
                &ClientMessage::Checkpoint(res.outcome.params.to_checkpoint()),
            )];
            if !res.stats.is_empty() {
                frames.push(transport.send_up(
                    r32,
                    res.id,
                    &ClientMessage::Stats(encode_stats(&res.stats)),
                ));
            }
            for f in frames {
                match Transport::receive_up(&f)? {
                    (_, ClientMessage::Checkpoint(b)) => updates.push(Update {
                        client: res.id,
                        samples: res.samples,
                        params: ModelParams::from_checkpoint(&b)?,
                    }),
                    (_, ClientMessage::Stats(b)) => next_pool.extend(decode_stats(&b)?),
                }
            }
            client_losses.push((res.id, res.outcome.loss));
        }
        global = aggregate(&updates)?;
        pool = next_pool;

        let mut domain_acc = Vec::with_capacity(dataset.domains);
        for ids in &by_domain {
            domain_acc.push(if ids.is_empty() {
                0.0
            } else {
                evaluate(&global, &view, ids)?
            });
        }
        let test_acc = evaluate(&global, &view, &split.test)?;
        let source_acc = if source_domains.is_empty() {
            0.0
        } else {
            source_domains
                .iter()
                .map(|&d| domain_acc[d as usize])
                .sum::<f64>()
                / source_domains.len() as f64
        };
        let losses: Vec<LossBreakdown> = client_losses.iter().map(|(_, l)| *l).collect();
        reports.push(RoundReport {
            round,
            selected,
            loss: LossBreakdown::mean(&losses),
            client_losses,
            domain_acc,
            test_acc,
            source_acc,
            bytes: transport.meter(),
            pool_size: pool.len(),
        });
    }
    Ok(FederationOutcome {
        params: global,
        reports,
        audit: transport.audit().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn scalar_params(v: f64) -> ModelParams {
        let arch = ArchConfig {
            in_channels: 1,
            conv1_channels: 1,
            conv2_channels: 1,
            d_z: 1,
            num_classes: 1,
        };
        let tensors = arch
            .layout()
            .iter()
            .map(|(_, s)| Tensor::full(s, v))
            .collect();
        ModelParams::from_tensors(arch, tensors).unwrap()
    }

    fn upd(client: u32, samples: usize, v: f64) -> Update {
        Update {
            client,
            samples,
            params: scalar_params(v),
        }
    }

    #[test]
    fn weighted_mean_examples() {
        let out = aggregate(&[upd(0, 1, 0.0), upd(1, 3, 4.0)]).unwrap();
        assert!(out.flatten().iter().all(|&v| v == 3.0));
        let eq = aggregate(&[upd(0, 2, 1.0), upd(1, 2, 2.0)]).unwrap();
        assert!(eq.flatten().iter().all(|&v| v == 1.5));
        let single = aggregate(&[upd(5, 7, 0.1)]).unwrap();
        assert_eq!(single, scalar_params(0.1));
        let same = aggregate(&[upd(0, 3, 0.3), upd(1, 5, 0.3), upd(2, 1, 0.3)]).unwrap();
        assert_eq!(same, scalar_params(0.3));
        assert!(aggregate(&[]).is_err());
        assert!(aggregate(&[upd(0, 0, 1.0)]).is_err());
    }

    #[test]
    fn aggregation_ignores_submission_order() {
        let a = [upd(2, 3, 0.7), upd(0, 1, -0.2), upd(1, 5, 0.11)];
        let b = [upd(1, 5, 0.11), upd(2, 3, 0.7), upd(0, 1, -0.2)];
        assert_eq!(aggregate(&a).unwrap(), aggregate(&b).unwrap());
    }

    #[test]
    fn selection_contract() {
        assert_eq!(select_clients(5, 1.0, 3, 1).unwrap(), vec![0, 1, 2, 3, 4]);
        let s = select_clients(4, 0.5, 2, 9).unwrap();
        assert_eq!(s.len(), 2);
        assert!(s[0] < s[1]);
        assert_eq!(s, select_clients(4, 0.5, 2, 9).unwrap());
        assert_eq!(select_clients(10, 0.3, 1, 0).unwrap().len(), 3);
        assert!(select_clients(4, 0.0, 1, 0).is_err());
        assert!(select_clients(4, 1.5, 1, 0).is_err());
    }

    #[test]
    fn upload_counts() {
        assert_eq!(upload_count(50, 0.1), 5);
        assert_eq!(upload_count(51, 0.1), 6);
        assert_eq!(upload_count(50, 0.0), 0);
        assert_eq!(upload_count(50, 1.0), 50);
        assert_eq!(upload_count(200, 0.1), 20);
    }

    #[test]
    fn redistribution_excludes_own_origin() {
        let mk = |c: u32, s: u32| StyleStats {
            mean: vec![0.0],
            std: vec![1.0],
            origin: Origin {
                client: c,
                sample: s,
            },
            layer: 1,
        };
        let pool: Vec<StyleStats> = (0..3)
            .map(|s| mk(0, s))
            .chain((0..3).map(|s| mk(1, s)))
            .collect();
        let to0 = redistribute_stats(&pool, 0);
        let to1 = redistribute_stats(&pool, 1);
        assert!(to0.iter().all(|s| s.origin.client == 1) && to0.len() == 3);
        assert!(to1.iter().all(|s| s.origin.client == 0) && to1.len() == 3);
        let only: Vec<StyleStats> = (0..3).map(|s| mk(0, s)).collect();
        assert!(redistribute_stats(&only, 0).is_empty());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.2; 5]), 0);
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
    }
}
