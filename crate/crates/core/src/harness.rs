//! Experiment driver: runs every (seed, held-out domain) pair, writes the
//! per-round metrics CSV and summaries, compares algorithms and sweeps the
//! client count.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::data::{
    generate_synthetic_domains, leave_one_domain_out, load_dataset, partition_rng,
    partition_to_clients, Dataset, SplitPlan,
};
use crate::error::{contract, Error, Result};
use crate::federation::{run_federation, Algorithm, RoundReport};

pub use crate::federation::evaluate;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";
pub const DELTAS_FILE: &str = "deltas.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_SUMMARY_FILE: &str = "sweep_summary.json";

/// Column order of [`METRICS_FILE`].
pub const METRICS_COLUMNS: [&str; 15] = [
    "seed",
    "algorithm",
    "target",
    "round",
    "test_acc",
    "source_acc",
    "domain_acc",
    "l_cls",
    "l_sc",
    "l_rc",
    "l_js",
    "l_total",
    "bytes_up",
    "bytes_down",
    "stats_bytes_up",
];

/// One line of the metrics CSV. Byte counters are cumulative within a run.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub algorithm: String,
    pub target: u16,
    pub round: usize,
    pub test_acc: f64,
    pub source_acc: f64,
    /// Accuracy on each domain in id order, `;`-separated.
    pub domain_acc: String,
    pub l_cls: f64,
    pub l_sc: f64,
    pub l_rc: f64,
    pub l_js: f64,
    pub l_total: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub stats_bytes_up: u64,
}

impl MetricsRow {
    fn from_report(seed: u64, algorithm: Algorithm, target: u16, r: &RoundReport) -> Self {
        Self {
            seed,
            algorithm: algorithm.name().to_string(),
            target,
            round: r.round,
            test_acc: r.test_acc,
            source_acc: r.source_acc,
            domain_acc: r
                .domain_acc
                .iter()
                .map(|a| a.to_string())
                .collect::<Vec<_>>()
                .join(";"),
            l_cls: r.loss.l_cls,
            l_sc: r.loss.l_sc,
            l_rc: r.loss.l_rc,
            l_js: r.loss.l_js,
            l_total: r.loss.l_total,
            bytes_up: r.bytes.up,
            bytes_down: r.bytes.down,
            stats_bytes_up: r.bytes.stats_up,
        }
    }
}

/// Reports of one federation run.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub seed: u64,
    pub algorithm: Algorithm,
    pub target: u16,
    pub reports: Vec<RoundReport>,
    pub seconds: f64,
}

impl RunRecord {
    pub fn final_acc(&self) -> f64 {
        self.reports.last().map_or(0.0, |r| r.test_acc)
    }

    pub fn best_acc(&self) -> f64 {
        self.reports.iter().map(|r| r.test_acc).fold(0.0, f64::max)
    }
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TargetSummary {
    pub target: u16,
    pub final_acc: MeanStd,
    pub best_acc: MeanStd,
}

#[derive(Clone, Debug, Serialize)]
pub struct AlgorithmSummary {
    pub algorithm: Algorithm,
    pub seeds: Vec<u64>,
    pub targets: Vec<TargetSummary>,
    /// Final held-out accuracy averaged over targets, per seed.
    pub domain_avg_per_seed: Vec<f64>,
    pub domain_avg: MeanStd,
}

/// Every run of one algorithm under one config.
#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub algorithm: Algorithm,
    pub runs: Vec<RunRecord>,
}

impl ExperimentResult {
    pub fn rows(&self) -> Vec<MetricsRow> {
        self.runs
            .iter()
            .flat_map(|run| {
                run.reports
                    .iter()
                    .map(|r| MetricsRow::from_report(run.seed, run.algorithm, run.target, r))
            })
            .collect()
    }

    pub fn targets(&self) -> Vec<u16> {
        let mut t: Vec<u16> = self.runs.iter().map(|r| r.target).collect();
        t.sort_unstable();
        t.dedup();
        t
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.runs.iter().map(|r| r.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    fn run(&self, seed: u64, target: u16) -> Option<&RunRecord> {
        self.runs
            .iter()
            .find(|r| r.seed == seed && r.target == target)
    }

    /// Final held-out accuracy averaged over targets, per seed.
    pub fn domain_avg_per_seed(&self) -> Vec<f64> {
        let targets = self.targets();
        self.seeds()
            .iter()
            .map(|&s| {
                targets
                    .iter()
                    .filter_map(|&t| self.run(s, t).map(RunRecord::final_acc))
                    .sum::<f64>()
                    / targets.len() as f64
            })
            .collect()
    }

    pub fn summary(&self) -> AlgorithmSummary {
        let seeds = self.seeds();
        let targets = self
            .targets()
            .into_iter()
            .map(|t| {
                let runs: Vec<&RunRecord> = self.runs.iter().filter(|r| r.target == t).collect();
                TargetSummary {
                    target: t,
                    final_acc: MeanStd::of(&runs.iter().map(|r| r.final_acc()).collect::<Vec<_>>()),
                    best_acc: MeanStd::of(&runs.iter().map(|r| r.best_acc()).collect::<Vec<_>>()),
                }
            })
            .collect();
        let per_seed = self.domain_avg_per_seed();
        AlgorithmSummary {
            algorithm: self.algorithm,
            seeds,
            targets,
            domain_avg: MeanStd::of(&per_seed),
            domain_avg_per_seed: per_seed,
        }
    }
}

/// Generated (or loaded) data for one seed.
pub fn dataset_for(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    match &cfg.data.path {
        Some(p) => load_dataset(Path::new(p)),
        None => generate_synthetic_domains(&cfg.data, seed),
    }
}

/// Held-out split for one target. One source domain per client when the
/// client count equals the number of source domains and `skew` is 1;
/// otherwise the training samples are partitioned with the configured skew.
pub fn split_for(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    target: u16,
    seed: u64,
) -> Result<SplitPlan> {
    let k = cfg.federation.clients;
    let plan = leave_one_domain_out(ds, target, 1)?;
    if k == ds.domains - 1 && cfg.data.skew >= 1.0 {
        return leave_one_domain_out(ds, target, k);
    }
    let train: Vec<(u32, u16)> = ds
        .samples
        .iter()
        .filter(|s| s.domain != target)
        .map(|s| (s.id, s.domain))
        .collect();
    let mut rng = partition_rng(seed, target, k);
    Ok(SplitPlan {
        target,
        clients: partition_to_clients(&train, k, cfg.data.skew, &mut rng)?,
        test: plan.test,
    })
}

/// Runs one algorithm for every seed and target. Runs execute on the
/// ambient rayon pool and are returned in (seed, target) order.
pub fn run_algorithm(cfg: &ExperimentConfig, algorithm: Algorithm) -> Result<ExperimentResult> {
    cfg.validate()?;
    let seeds = cfg.seed_list();
    let datasets: Vec<Dataset> = seeds
        .iter()
        .map(|&s| dataset_for(cfg, s))
        .collect::<Result<_>>()?;
    let mut jobs = Vec::new();
    for (si, &seed) in seeds.iter().enumerate() {
        let ds = &datasets[si];
        for target in cfg.targets(ds.domains) {
            if target as usize >= ds.domains {
                return contract(format!(
                    "target {target} not in dataset with {} domains",
                    ds.domains
                ));
            }
            jobs.push((seed, si, target));
        }
    }
    let runs = jobs
        .par_iter()
        .map(|&(seed, si, target)| {
            let ds = &datasets[si];
            let start = Instant::now();
            let split = split_for(cfg, ds, target, seed)?;
            let settings = cfg.run_settings(algorithm, ds.classes);
            let out = run_federation(ds, &split, &settings, seed)?;
            Ok(RunRecord {
                seed,
                algorithm,
                target,
                reports: out.reports,
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentResult {
        config: cfg.clone(),
        algorithm,
        runs,
    })
}

/// Files written by one command; removed again if a later step fails.
struct Outputs {
    written: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    fn new() -> Self {
        Self {
            written: Vec::new(),
            committed: false,
        }
    }

    fn write(&mut self, path: PathBuf, bytes: &[u8]) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, bytes)?;
        self.written.push(path);
        Ok(())
    }

    fn commit(mut self) -> Vec<PathBuf> {
        self.committed = true;
        std::mem::take(&mut self.written)
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if !self.committed {
            for p in &self.written {
                let _ = fs::remove_file(p);
            }
        }
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(METRICS_COLUMNS)
            .map_err(|e| Error::Contract(e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| Error::Contract(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Contract(e.to_string()))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Contract(e.to_string()))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<MetricsRow>, _>>()
        .map_err(|e| Error::Contract(e.to_string()))
}

fn timings_csv(runs: &[RunRecord]) -> String {
    let mut out = String::from("seed,algorithm,target,seconds\n");
    for r in runs {
        out.push_str(&format!(
            "{},{},{},{:.3}\n",
            r.seed, r.algorithm, r.target, r.seconds
        ));
    }
    out
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("summary serializes");
    s.push(b'\n');
    s
}

/// `train`: runs the configured algorithm and writes metrics and summary.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<(ExperimentResult, Vec<PathBuf>)> {
    let result = run_algorithm(cfg, cfg.algorithm)?;
    let mut out = Outputs::new();
    out.write(out_dir.join(METRICS_FILE), &metrics_csv(&result.rows())?)?;
    out.write(out_dir.join(SUMMARY_FILE), &json(&result.summary()))?;
    out.write(
        out_dir.join(TIMINGS_FILE),
        timings_csv(&result.runs).as_bytes(),
    )?;
    Ok((result, out.commit()))
}

/// One `(algorithm, target)` cell of the comparison table; target `None`
/// is the average over targets.
#[derive(Clone, Debug, Serialize)]
pub struct ComparisonCell {
    pub algorithm: Algorithm,
    pub target: Option<u16>,
    pub acc: MeanStd,
}

/// Per-seed paired difference `first − second` of final held-out accuracy.
#[derive(Clone, Debug, Serialize)]
pub struct PairedDelta {
    pub seed: u64,
    pub target: Option<u16>,
    pub delta: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Comparison {
    pub cells: Vec<ComparisonCell>,
    /// Algorithms the deltas compare, as `(minuend, subtrahend)`.
    pub delta_pair: (Algorithm, Algorithm),
    pub deltas: Vec<PairedDelta>,
    pub mean_delta: f64,
    pub seeds_positive: usize,
}

/// Builds the comparison table from runs on identical data and seeds.
pub fn compare_results(results: &[ExperimentResult]) -> Result<Comparison> {
    if results.len() < 2 {
        return contract("comparison needs at least two algorithms");
    }
    let base = &results[0];
    for r in &results[1..] {
        if r.config.data != base.config.data {
            return contract(format!(
                "{} and {} were run on different data configs",
                base.algorithm, r.algorithm
            ));
        }
        if r.seeds() != base.seeds() || r.targets() != base.targets() {
            return contract("compared runs cover different seeds or targets");
        }
    }
    let mut cells = Vec::new();
    for r in results {
        for t in r.summary().targets {
            cells.push(ComparisonCell {
                algorithm: r.algorithm,
                target: Some(t.target),
                acc: t.final_acc,
            });
        }
        cells.push(ComparisonCell {
            algorithm: r.algorithm,
            target: None,
            acc: MeanStd::of(&r.domain_avg_per_seed()),
        });
    }

    let find = |a: Algorithm| results.iter().find(|r| r.algorithm == a);
    let (first, second) = match (find(Algorithm::FedAlign), find(Algorithm::FedAvg)) {
        (Some(a), Some(b)) => (a, b),
        _ => (&results[0], &results[1]),
    };
    let mut deltas = Vec::new();
    for &seed in &first.seeds() {
        for &t in &first.targets() {
            let (a, b) = (first.run(seed, t), second.run(seed, t));
            if let (Some(a), Some(b)) = (a, b) {
                deltas.push(PairedDelta {
                    seed,
                    target: Some(t),
                    delta: a.final_acc() - b.final_acc(),
                });
            }
        }
    }
    let avg_a = first.domain_avg_per_seed();
    let avg_b = second.domain_avg_per_seed();
    let per_seed: Vec<f64> = avg_a.iter().zip(&avg_b).map(|(a, b)| a - b).collect();
    for (&seed, &d) in first.seeds().iter().zip(&per_seed) {
        deltas.push(PairedDelta {
            seed,
            target: None,
            delta: d,
        });
    }
    Ok(Comparison {
        cells,
        delta_pair: (first.algorithm, second.algorithm),
        mean_delta: MeanStd::of(&per_seed).mean,
        seeds_positive: per_seed.iter().filter(|&&d| d > 0.0).count(),
        deltas,
    })
}

fn target_label(t: Option<u16>) -> String {
    t.map_or_else(|| "avg".to_string(), |t| t.to_string())
}

impl Comparison {
    /// `algorithm, d0 … d{M−1}, avg` with `mean±std` cells.
    pub fn table(&self) -> String {
        let mut targets: Vec<Option<u16>> = self.cells.iter().map(|c| c.target).collect();
        targets.sort_by_key(|t| t.map_or(u32::MAX, u32::from));
        targets.dedup();
        let mut algos: Vec<Algorithm> = self.cells.iter().map(|c| c.algorithm).collect();
        algos.dedup();
        let mut out = String::from("algorithm");
        for t in &targets {
            out.push(',');
            out.push_str(&match t {
                Some(t) => format!("d{t}"),
                None => "avg".to_string(),
            });
        }
        out.push('\n');
        for a in algos {
            out.push_str(a.name());
            for t in &targets {
                let c = self
                    .cells
                    .iter()
                    .find(|c| c.algorithm == a && c.target == *t);
                out.push(',');
                if let Some(c) = c {
                    out.push_str(&format!("{:.4}±{:.4}", c.acc.mean, c.acc.std));
                }
            }
            out.push('\n');
        }
        out
    }

    fn deltas_csv(&self) -> String {
        let mut out = format!(
            "seed,target,delta_{}_minus_{}\n",
            self.delta_pair.0, self.delta_pair.1
        );
        for d in &self.deltas {
            out.push_str(&format!(
                "{},{},{}\n",
                d.seed,
                target_label(d.target),
                d.delta
            ));
        }
        out
    }
}

/// `compare`: runs each algorithm on the same seeds and data.
pub fn compare(
    cfg: &ExperimentConfig,
    algorithms: &[Algorithm],
    out_dir: &Path,
) -> Result<(Comparison, Vec<PathBuf>)> {
    if algorithms.len() < 2 {
        return contract("compare needs at least two algorithms");
    }
    let results: Vec<ExperimentResult> = algorithms
        .iter()
        .map(|&a| run_algorithm(cfg, a))
        .collect::<Result<_>>()?;
    let cmp = compare_results(&results)?;
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for r in &results {
        rows.extend(r.rows());
        runs.extend(r.runs.iter().cloned());
    }
    let summaries: Vec<AlgorithmSummary> = results.iter().map(ExperimentResult::summary).collect();
    let mut out = Outputs::new();
    out.write(out_dir.join(METRICS_FILE), &metrics_csv(&rows)?)?;
    out.write(out_dir.join(SUMMARY_FILE), &json(&summaries))?;
    out.write(out_dir.join(COMPARISON_FILE), cmp.table().as_bytes())?;
    out.write(out_dir.join(DELTAS_FILE), cmp.deltas_csv().as_bytes())?;
    out.write(out_dir.join(TIMINGS_FILE), timings_csv(&runs).as_bytes())?;
    Ok((cmp, out.commit()))
}

/// One row of the scaling-sweep CSV.
#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub clients: usize,
    pub algorithm: Algorithm,
    pub mean_acc: f64,
    pub std_acc: f64,
}

/// Degradation of each algorithm between the smallest and largest client
/// counts, and whether the comparison is distinguishable from seed noise.
#[derive(Clone, Debug, Serialize)]
pub struct SweepSummary {
    pub k_small: usize,
    pub k_large: usize,
    /// `acc(k_small) − acc(k_large)`, per algorithm.
    pub degradation: BTreeMap<String, f64>,
    /// FedAlign degrades less than FedAvg.
    pub fedalign_degrades_less: Option<bool>,
    /// The difference in degradation is smaller than the seed spread.
    pub within_noise: bool,
}

/// `sweep`: runs every compared algorithm at each client count.
pub fn scaling_sweep(
    cfg: &ExperimentConfig,
    algorithms: &[Algorithm],
    k_list: &[usize],
    out_dir: &Path,
) -> Result<(Vec<SweepRow>, SweepSummary, Vec<PathBuf>)> {
    if k_list.is_empty() {
        return contract("sweep needs at least one client count");
    }
    let mut rows = Vec::new();
    let mut per_seed: BTreeMap<(usize, Algorithm), Vec<f64>> = BTreeMap::new();
    for &k in k_list {
        let mut c = cfg.clone();
        c.federation.clients = k;
        for &a in algorithms {
            let res = run_algorithm(&c, a)?;
            let accs = res.domain_avg_per_seed();
            let ms = MeanStd::of(&accs);
            rows.push(SweepRow {
                clients: k,
                algorithm: a,
                mean_acc: ms.mean,
                std_acc: ms.std,
            });
            per_seed.insert((k, a), accs);
        }
    }
    let (k_small, k_large) = (*k_list.iter().min().unwrap(), *k_list.iter().max().unwrap());
    let mut degradation = BTreeMap::new();
    let mut spread = Vec::new();
    for &a in algorithms {
        let small = &per_seed[&(k_small, a)];
        let large = &per_seed[&(k_large, a)];
        let drops: Vec<f64> = small.iter().zip(large).map(|(s, l)| s - l).collect();
        let ms = MeanStd::of(&drops);
        degradation.insert(a.name().to_string(), ms.mean);
        spread.push(ms.std);
    }
    let fedalign_degrades_less = match (degradation.get("fedalign"), degradation.get("fedavg")) {
        (Some(a), Some(b)) => Some(a < b),
        _ => None,
    };
    let gap = match (degradation.get("fedalign"), degradation.get("fedavg")) {
        (Some(a), Some(b)) => (a - b).abs(),
        _ => 0.0,
    };
    let noise = spread.iter().cloned().fold(0.0, f64::max);
    let summary = SweepSummary {
        k_small,
        k_large,
        degradation,
        fedalign_degrades_less,
        within_noise: gap <= noise,
    };

    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(|e| Error::Contract(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Contract(e.to_string()))?;
    let mut out = Outputs::new();
    out.write(out_dir.join(SWEEP_FILE), &bytes)?;
    out.write(out_dir.join(SWEEP_SUMMARY_FILE), &json(&summary))?;
    Ok((rows, summary, out.commit()))
}
