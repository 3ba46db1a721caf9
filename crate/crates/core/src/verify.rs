//! Finite-difference verification of every differentiable op, every loss
//! and the full training objective with respect to the model parameters.

use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::losses::{
    add_proximal, adversarial_loss_on, classification_objective_on, cross_entropy_on,
    js_alignment_on, l_sc_symmetric_on, representation_consistency_on, supervised_contrastive_on,
    total_objective_on, Discriminator, LossConfig, ViewTriple,
};
use crate::mixstyle::{channel_stats, MixDirective, StyleRoles};
use crate::model::{ArchConfig, BoundParams, MixTargets, ModelParams};
use crate::numerics::{grad_check_many, Tape, Tensor, Var};
use crate::rng::{stream_rng, SimRng};

/// Finite-difference step used by the suite.
pub const DELTA: f64 = 1e-5;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct SuiteReport {
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn worst(&self) -> f64 {
        self.checks
            .iter()
            .map(|c| c.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<String> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.clone())
            .collect()
    }

    fn push(&mut self, name: &str, err: f64) {
        self.checks.push(Check {
            name: name.to_string(),
            max_rel_err: err,
            passed: err < TOLERANCE,
        });
    }
}

fn randn(shape: &[usize], rng: &mut SimRng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Normal samples pushed at least `margin` away from zero, so ReLU kinks
/// are never crossed by a finite-difference step.
fn away_from_zero(shape: &[usize], margin: f64, rng: &mut SimRng) -> Tensor {
    let mut t = randn(shape, rng);
    for v in t.data_mut() {
        *v = v.signum() * (margin + v.abs());
    }
    t
}

/// `Σ W ⊙ out` with a fixed random `W`, turning any op into a scalar whose
/// gradient exercises every output element differently.
fn contract_with(tape: &mut Tape, out: Var, w: &Tensor) -> Result<Var> {
    let wv = tape.constant(w.clone());
    let p = tape.mul(out, wv)?;
    tape.sum(p)
}

/// Checks an op applied to freshly drawn inputs.
fn op_check<F>(
    report: &mut SuiteReport,
    name: &str,
    inputs: Vec<Tensor>,
    out_shape: &[usize],
    f: F,
    rng: &mut SimRng,
) -> Result<()>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let w = randn(out_shape, rng);
    let err = grad_check_many(
        |t, v| {
            let o = f(t, v)?;
            contract_with(t, o, &w)
        },
        &inputs,
        DELTA,
    )?;
    report.push(name, err);
    Ok(())
}

fn elementwise_ops(report: &mut SuiteReport, rng: &mut SimRng) -> Result<()> {
    let s = [3, 4];
    op_check(
        report,
        "op/add",
        vec![randn(&s, rng), randn(&s, rng)],
        &s,
        |t, v| t.add(v[0], v[1]),
        rng,
    )?;
    op_check(
        report,
        "op/sub",
        vec![randn(&s, rng), randn(&s, rng)],
        &s,
        |t, v| t.sub(v[0], v[1]),
        rng,
    )?;
    op_check(
        report,
        "op/mul",
        vec![randn(&s, rng), randn(&s, rng)],
        &s,
        |t, v| t.mul(v[0], v[1]),
        rng,
    )?;
    op_check(
        report,
        "op/mul_self",
        vec![randn(&s, rng)],
        &s,
        |t, v| t.mul(v[0], v[0]),
        rng,
    )?;
    op_check(
        report,
        "op/scale",
        vec![randn(&s, rng)],
        &s,
        |t, v| t.scale(v[0], -2.5),
        rng,
    )?;
    op_check(
        report,
        "op/add_scalar",
        vec![randn(&s, rng)],
        &s,
        |t, v| t.add_scalar(v[0], 0.7),
        rng,
    )?;
    op_check(
        report,
        "op/relu",
        vec![away_from_zero(&s, 0.05, rng)],
        &s,
        |t, v| t.relu(v[0]),
        rng,
    )?;
    op_check(
        report,
        "op/sigmoid",
        vec![randn(&s, rng)],
        &s,
        |t, v| t.sigmoid(v[0]),
        rng,
    )?;
    let mut pos = randn(&s, rng);
    for v in pos.data_mut() {
        *v = 0.2 + v.abs();
    }
    op_check(
        report,
        "op/log",
        vec![pos],
        &s,
        |t, v| t.log_floor(v[0], 1e-12),
        rng,
    )?;
    let rev = reverse_check(rng)?;
    report.push("op/grad_reverse", rev);
    Ok(())
}

/// The analytic gradient through `grad_reverse(·, −0.5)` must equal −0.5
/// times the finite difference of the (identity) forward pass.
fn reverse_check(rng: &mut SimRng) -> Result<f64> {
    let factor = -0.5;
    let x = randn(&[2, 3], rng);
    let w = randn(&[2, 3], rng);
    let forward = |t: &mut Tape, xv: Var| -> Result<Var> {
        let r = t.grad_reverse(xv, factor)?;
        let sq = t.mul(r, r)?;
        contract_with(t, sq, &w)
    };
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let l = forward(&mut tape, xv)?;
    tape.backward(l)?;
    let analytic = tape.grad(xv).expect("gradient reaches input").clone();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let eval = |shift: f64| -> Result<f64> {
            let mut p = x.clone();
            p.data_mut()[i] += shift;
            let mut t = Tape::new();
            let v = t.constant(p);
            let l = forward(&mut t, v)?;
            Ok(t.value(l).item())
        };
        let fd = factor * (eval(DELTA)? - eval(-DELTA)?) / (2.0 * DELTA);
        let a = analytic.data()[i];
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-8));
    }
    Ok(worst)
}

fn structural_ops(report: &mut SuiteReport, rng: &mut SimRng) -> Result<()> {
    op_check(
        report,
        "op/add_bias",
        vec![randn(&[4, 5], rng), randn(&[5], rng)],
        &[4, 5],
        |t, v| t.add_bias(v[0], v[1]),
        rng,
    )?;
    op_check(
        report,
        "op/add_bias_4d",
        vec![randn(&[2, 3, 2, 2], rng), randn(&[2], rng)],
        &[2, 3, 2, 2],
        |t, v| t.add_bias(v[0], v[1]),
        rng,
    )?;
    op_check(
        report,
        "op/matmul",
        vec![randn(&[3, 4], rng), randn(&[4, 2], rng)],
        &[3, 2],
        |t, v| t.matmul(v[0], v[1]),
        rng,
    )?;
    op_check(
        report,
        "op/transpose",
        vec![randn(&[3, 4], rng)],
        &[4, 3],
        |t, v| t.transpose(v[0]),
        rng,
    )?;
    op_check(
        report,
        "op/conv2d",
        vec![
            randn(&[2, 3, 5, 5], rng),
            randn(&[4, 3, 3, 3], rng),
            randn(&[4], rng),
        ],
        &[2, 4, 5, 5],
        |t, v| t.conv2d(v[0], v[1], v[2]),
        rng,
    )?;
    op_check(
        report,
        "op/global_avg_pool",
        vec![randn(&[2, 3, 4, 4], rng)],
        &[2, 3],
        |t, v| t.global_avg_pool(v[0]),
        rng,
    )?;
    op_check(
        report,
        "op/softmax",
        vec![randn(&[3, 5], rng)],
        &[3, 5],
        |t, v| t.softmax(v[0]),
        rng,
    )?;
    op_check(
        report,
        "op/log_softmax",
        vec![randn(&[3, 5], rng)],
        &[3, 5],
        |t, v| t.log_softmax(v[0]),
        rng,
    )?;
    op_check(
        report,
        "op/sum",
        vec![randn(&[3, 5], rng)],
        &[1],
        |t, v| t.sum(v[0]),
        rng,
    )?;
    op_check(
        report,
        "op/mean",
        vec![randn(&[3, 5], rng)],
        &[1],
        |t, v| t.mean(v[0]),
        rng,
    )?;
    op_check(
        report,
        "op/l2_normalize",
        vec![randn(&[3, 4], rng)],
        &[3, 4],
        |t, v| t.l2_normalize(v[0]),
        rng,
    )?;
    op_check(
        report,
        "op/concat",
        vec![randn(&[2, 3], rng), randn(&[1, 3], rng)],
        &[3, 3],
        |t, v| t.concat(&[v[0], v[1]]),
        rng,
    )?;
    let shift: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let scale: Vec<f64> = (0..6).map(|_| rng.random_range(0.5..2.0)).collect();
    op_check(
        report,
        "op/restyle",
        vec![randn(&[2, 3, 4, 4], rng)],
        &[2, 3, 4, 4],
        move |t, v| t.restyle(v[0], shift.clone(), scale.clone(), 1e-6),
        rng,
    )?;
    let err = grad_check_many(
        |t, v| {
            let p: Vec<Var> = v.iter().map(|&x| t.softmax(x)).collect::<Result<_>>()?;
            t.js_divergence([p[0], p[1], p[2]], 1e-12)
        },
        &[
            randn(&[3, 4], rng),
            randn(&[3, 4], rng),
            randn(&[3, 4], rng),
        ],
        DELTA,
    )?;
    report.push("op/js_divergence", err);
    Ok(())
}

fn loss_checks(report: &mut SuiteReport, rng: &mut SimRng) -> Result<()> {
    let labels = [0usize, 1, 0, 2, 1, 0];
    let tau = 0.1;
    let err = grad_check_many(
        |t, v| {
            let y = t.softmax(v[0])?;
            cross_entropy_on(t, y, &labels[..4])
        },
        &[randn(&[4, 5], rng)],
        DELTA,
    )?;
    report.push("loss/cross_entropy", err);

    let err = grad_check_many(
        |t, v| supervised_contrastive_on(t, v[0], v[1], &labels, tau),
        &[randn(&[6, 4], rng), randn(&[6, 4], rng)],
        DELTA,
    )?;
    report.push("loss/supervised_contrastive", err);

    let err = grad_check_many(
        |t, v| l_sc_symmetric_on(t, v[0], v[1], v[2], &labels, tau),
        &[
            randn(&[6, 4], rng),
            randn(&[6, 4], rng),
            randn(&[6, 4], rng),
        ],
        DELTA,
    )?;
    report.push("loss/l_sc_symmetric", err);

    let err = grad_check_many(
        |t, v| representation_consistency_on(t, v[0], &[v[1], v[2]]),
        &[
            randn(&[4, 3], rng),
            randn(&[4, 3], rng),
            randn(&[4, 3], rng),
        ],
        DELTA,
    )?;
    report.push("loss/representation_consistency", err);

    let err = grad_check_many(
        |t, v| {
            let p: Vec<Var> = v.iter().map(|&x| t.softmax(x)).collect::<Result<_>>()?;
            js_alignment_on(t, p[0], p[1], p[2])
        },
        &[
            randn(&[4, 5], rng),
            randn(&[4, 5], rng),
            randn(&[4, 5], rng),
        ],
        DELTA,
    )?;
    report.push("loss/js_alignment", err);

    // Discriminator side of the adversarial term (no reversal on its
    // parameters); the encoder side is covered by op/grad_reverse.
    let disc = Discriminator::init(4, 6, rng);
    let (z, za, zb) = (
        randn(&[3, 4], rng),
        randn(&[3, 4], rng),
        randn(&[3, 4], rng),
    );
    let err = grad_check_many(
        |t, v| {
            let (zv, av, bv) = (
                t.constant(z.clone()),
                t.constant(za.clone()),
                t.constant(zb.clone()),
            );
            adversarial_loss_on(t, v, zv, &[av, bv])
        },
        &disc.params,
        DELTA,
    )?;
    report.push("loss/adversarial_discriminator", err);

    let reference = vec![randn(&[3, 2], rng), randn(&[2], rng)];
    let err = grad_check_many(
        |t, v| {
            let y = t.softmax(v[0])?;
            let mut obj = classification_objective_on(t, y, &[1, 0, 1])?;
            add_proximal(t, &mut obj, v, &reference, 0.3)?;
            Ok(obj.l_total)
        },
        &[randn(&[3, 2], rng), randn(&[2], rng)],
        DELTA,
    )?;
    report.push("loss/proximal", err);

    let cfg = LossConfig {
        lambda1: 0.7,
        lambda2: 1.3,
        ..LossConfig::default()
    };
    let err = grad_check_many(
        |t, v| {
            let y = t.softmax(v[3])?;
            let y1 = t.softmax(v[4])?;
            let y2 = t.softmax(v[5])?;
            let views = ViewTriple {
                z: v[0],
                z1: v[1],
                z2: v[2],
                y,
                y1,
                y2,
            };
            Ok(total_objective_on(t, &views, &labels[..4], &cfg, None)?.l_total)
        },
        &(0..6).map(|_| randn(&[4, 3], rng)).collect::<Vec<_>>(),
        DELTA,
    )?;
    report.push("loss/total", err);
    Ok(())
}

/// Smallest distance to a ReLU kink accepted for the model-level checks.
/// A single parameter step moves a pre-activation by roughly `DELTA` times
/// an activation of order one, so this keeps every ReLU on one side.
pub const KINK_MARGIN: f64 = 2e-4;
const MAX_DRAWS: usize = 10_000;

struct ModelPoint {
    arch: ArchConfig,
    params: ModelParams,
    x: Tensor,
    targets: [MixTargets; 2],
}

fn mix_targets(params: &ModelParams, x: &Tensor) -> Result<[MixTargets; 2]> {
    let directive = |point: usize, own: &[crate::mixstyle::StyleStats], lambda: f64| MixDirective {
        point,
        partners: (0..own.len())
            .map(|i| own[(i + 1) % own.len()].clone())
            .collect(),
        lambdas: vec![lambda; own.len()],
        roles: StyleRoles::Standard,
    };
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let clean = bound.encode(&mut tape, xv, None)?;
    let own1 = channel_stats(tape.value(clean.at(1)))?;
    let own2 = channel_stats(tape.value(clean.at(2)))?;
    Ok([
        MixTargets::resolve(&tape, &clean, &directive(1, &own1, 0.3))?,
        MixTargets::resolve(&tape, &clean, &directive(2, &own2, 0.8))?,
    ])
}

/// Full objective with one view mixed at each mix point; mix targets are
/// held fixed at the values resolved for the starting parameters.
fn full_objective(t: &mut Tape, v: &[Var], point: &ModelPoint, labels: &[usize]) -> Result<Var> {
    let bound = BoundParams::from_vars(t, point.arch, v.to_vec())?;
    let xv = t.constant(point.x.clone());
    let clean = bound.encode(t, xv, None)?;
    let y = bound.classify(t, clean.z)?;
    let z1 = bound.encode_from_targets(t, &clean, &point.targets[0])?;
    let z2 = bound.encode_from_targets(t, &clean, &point.targets[1])?;
    let y1 = bound.classify(t, z1)?;
    let y2 = bound.classify(t, z2)?;
    let views = ViewTriple {
        z: clean.z,
        z1,
        z2,
        y,
        y1,
        y2,
    };
    Ok(total_objective_on(t, &views, labels, &LossConfig::default(), None)?.l_total)
}

/// Draws parameters and a batch until every ReLU input on every view is at
/// least [`KINK_MARGIN`] from zero.
fn draw_model_point(rng: &mut SimRng, batch: usize, labels: &[usize]) -> Result<ModelPoint> {
    let arch = ArchConfig::with_classes(3);
    for _ in 0..MAX_DRAWS {
        let params = ModelParams::init(arch, rng)?;
        let x = randn(&[batch, 3, 16, 16], rng);
        let targets = mix_targets(&params, &x)?;
        let point = ModelPoint {
            arch,
            params,
            x,
            targets,
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = point
            .params
            .tensors()
            .iter()
            .map(|p| tape.constant(p.clone()))
            .collect();
        full_objective(&mut tape, &vars, &point, labels)?;
        if tape.relu_margin() >= KINK_MARGIN {
            return Ok(point);
        }
    }
    Err(crate::Error::Degenerate(format!(
        "no draw in {MAX_DRAWS} keeps ReLU inputs {KINK_MARGIN} from zero"
    )))
}

/// The full objective and plain cross-entropy as functions of every model
/// parameter, on 16×16 images.
fn model_checks(report: &mut SuiteReport, rng: &mut SimRng) -> Result<()> {
    let labels = [0usize, 1, 0, 2];
    let point = draw_model_point(rng, labels.len(), &labels)?;
    let err = grad_check_many(
        |t, v| full_objective(t, v, &point, &labels),
        point.params.tensors(),
        DELTA,
    )?;
    report.push("model/full_objective", err);

    let err = grad_check_many(
        |t, v| {
            let bound = BoundParams::from_vars(t, point.arch, v.to_vec())?;
            let xv = t.constant(point.x.clone());
            let clean = bound.encode(t, xv, None)?;
            let y = bound.classify(t, clean.z)?;
            cross_entropy_on(t, y, &labels)
        },
        point.params.tensors(),
        DELTA,
    )?;
    report.push("model/cross_entropy", err);
    Ok(())
}

/// Runs every check with inputs drawn from `seed`.
pub fn run_suite(seed: u64) -> Result<SuiteReport> {
    let mut rng = stream_rng(seed, &[0x6772_6164]);
    let mut report = SuiteReport::default();
    elementwise_ops(&mut report, &mut rng)?;
    structural_ops(&mut report, &mut rng)?;
    loss_checks(&mut report, &mut rng)?;
    model_checks(&mut report, &mut rng)?;
    Ok(report)
}
