//! Training objective: classification, supervised contrastive alignment,
//! representation consistency, prediction alignment and their weighted sum.
//!
//! Every loss is built on a [`Tape`] so it can be differentiated; the plain
//! functions taking tensors evaluate the same graph on constants.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Floor applied to probabilities before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub adversarial: bool,
    pub lambda_adv: f64,
    /// Hidden width of the discriminator used by the adversarial term.
    pub disc_hidden: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            tau: 0.1,
            adversarial: false,
            lambda_adv: 0.1,
            disc_hidden: 16,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, errors: &mut Vec<String>, prefix: &str) {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda_adv", self.lambda_adv),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                errors.push(format!(
                    "{prefix}.{name} must be a finite value ≥ 0, got {v}"
                ));
            }
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            errors.push(format!("{prefix}.tau must be > 0, got {}", self.tau));
        }
        if self.disc_hidden == 0 {
            errors.push(format!("{prefix}.disc_hidden must be ≥ 1"));
        }
    }
}

/// Scalar values of every objective term for one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_sc: f64,
    pub l_rc: f64,
    pub l_ra: f64,
    pub l_js: f64,
    pub l_total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub l_adv: Option<f64>,
    pub lambda_adv: f64,
    /// Proximal penalty, present only for the FedProx comparator.
    pub l_prox: Option<f64>,
}

impl LossBreakdown {
    /// Component-wise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let Some(first) = items.first() else {
            return LossBreakdown::default();
        };
        let n = items.len() as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        let avg_opt = |f: fn(&LossBreakdown) -> Option<f64>| {
            f(first).map(|_| items.iter().filter_map(f).sum::<f64>() / n)
        };
        LossBreakdown {
            l_cls: avg(|b| b.l_cls),
            l_sc: avg(|b| b.l_sc),
            l_rc: avg(|b| b.l_rc),
            l_ra: avg(|b| b.l_ra),
            l_js: avg(|b| b.l_js),
            l_total: avg(|b| b.l_total),
            lambda1: first.lambda1,
            lambda2: first.lambda2,
            l_adv: avg_opt(|b| b.l_adv),
            lambda_adv: first.lambda_adv,
            l_prox: avg_opt(|b| b.l_prox),
        }
    }
}

fn check_labels(labels: &[usize], rows: usize, classes: Option<usize>, op: &str) -> Result<()> {
    if labels.len() != rows {
        return contract(format!("{op}: {} labels for {rows} rows", labels.len()));
    }
    if let Some(k) = classes {
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return contract(format!("{op}: label {bad} out of range for {k} classes"));
        }
    }
    Ok(())
}

fn matrix_dims(tape: &Tape, v: Var, op: &str) -> Result<(usize, usize)> {
    match *tape.shape(v) {
        [r, c] => Ok((r, c)),
        ref s => contract(format!("{op}: expected a 2-D tensor, got {s:?}")),
    }
}

/// Mean over rows of `−ln max(Ŷ[i, yᵢ], 10⁻¹²)`.
pub fn cross_entropy_on(tape: &mut Tape, yhat: Var, labels: &[usize]) -> Result<Var> {
    let (b, k) = matrix_dims(tape, yhat, "cross_entropy")?;
    check_labels(labels, b, Some(k), "cross_entropy")?;
    let mut pick = vec![0.0; b * k];
    for (i, &l) in labels.iter().enumerate() {
        pick[i * k + l] = -1.0 / b as f64;
    }
    let logs = tape.log_floor(yhat, PROB_FLOOR)?;
    let mask = tape.constant(Tensor::new(vec![b, k], pick)?);
    let picked = tape.mul(logs, mask)?;
    tape.sum(picked)
}

/// Supervised contrastive loss with rows of `z_view` as anchors and every
/// row of `z_ref` as a candidate. For anchor `i` the positives are the rows
/// `p ≠ i` of `z_ref` sharing its label; the per-anchor term is
/// `−(1/|P(i)|) Σ_p ln softmax_a(cos(z_i, r_a)/τ)[p]`, averaged over
/// anchors whose positive set is nonempty (0 if there are none).
pub fn supervised_contrastive_on(
    tape: &mut Tape,
    z_view: Var,
    z_ref: Var,
    labels: &[usize],
    tau: f64,
) -> Result<Var> {
    if !(tau > 0.0) {
        return contract(format!("supervised_contrastive: τ must be > 0, got {tau}"));
    }
    let (b, d) = matrix_dims(tape, z_view, "supervised_contrastive")?;
    if tape.shape(z_ref) != [b, d] {
        return contract(format!(
            "supervised_contrastive: views have shapes {:?} and {:?}",
            tape.shape(z_view),
            tape.shape(z_ref)
        ));
    }
    check_labels(labels, b, None, "supervised_contrastive")?;

    let positives: Vec<usize> = (0..b)
        .map(|i| (0..b).filter(|&p| p != i && labels[p] == labels[i]).count())
        .collect();
    let valid = positives.iter().filter(|&&n| n > 0).count();
    let mut weights = vec![0.0; b * b];
    if valid > 0 {
        for i in 0..b {
            for p in 0..b {
                if p != i && labels[p] == labels[i] {
                    weights[i * b + p] = -1.0 / (positives[i] * valid) as f64;
                }
            }
        }
    }

    let zv = tape.l2_normalize(z_view)?;
    let zr = tape.l2_normalize(z_ref)?;
    let zr_t = tape.transpose(zr)?;
    let sim = tape.matmul(zv, zr_t)?;
    let logits = tape.scale(sim, 1.0 / tau)?;
    let log_prob = tape.log_softmax(logits)?;
    let w = tape.constant(Tensor::new(vec![b, b], weights)?);
    let weighted = tape.mul(log_prob, w)?;
    tape.sum(weighted)
}

/// `½ (L(Z¹, Z) + L(Z², Z))`.
pub fn l_sc_symmetric_on(
    tape: &mut Tape,
    z: Var,
    z1: Var,
    z2: Var,
    labels: &[usize],
    tau: f64,
) -> Result<Var> {
    let a = supervised_contrastive_on(tape, z1, z, labels, tau)?;
    let b = supervised_contrastive_on(tape, z2, z, labels, tau)?;
    let s = tape.add(a, b)?;
    tape.scale(s, 0.5)
}

/// Mean over views, rows and components of `(Z − Z_v)²`.
pub fn representation_consistency_on(tape: &mut Tape, z: Var, views: &[Var]) -> Result<Var> {
    if views.is_empty() {
        return contract("representation_consistency: no augmented views");
    }
    let mut acc: Option<Var> = None;
    for &v in views {
        if tape.shape(v) != tape.shape(z) {
            return contract(format!(
                "representation_consistency: view shape {:?} differs from {:?}",
                tape.shape(v),
                tape.shape(z)
            ));
        }
        let diff = tape.sub(z, v)?;
        let sq = tape.mul(diff, diff)?;
        let s = tape.sum(sq)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    let n = (views.len() * tape.value(z).len()) as f64;
    tape.scale(acc.expect("at least one view"), 1.0 / n)
}

/// Mean over rows of `(1/3) Σ_k KL(ŷ_k ‖ ȳ)` with `ȳ` the mean of the three.
pub fn js_alignment_on(tape: &mut Tape, y: Var, y1: Var, y2: Var) -> Result<Var> {
    tape.js_divergence([y, y1, y2], PROB_FLOOR)
}

/// Handles to the component losses of one objective on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveVars {
    pub l_cls: Var,
    pub l_sc: Option<Var>,
    pub l_rc: Option<Var>,
    pub l_ra: Option<Var>,
    pub l_js: Option<Var>,
    pub l_adv: Option<Var>,
    pub l_prox: Option<Var>,
    pub l_total: Var,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_adv: f64,
}

impl ObjectiveVars {
    /// Reads every component off the tape, faulting on the first
    /// non-finite one.
    pub fn breakdown(&self, tape: &Tape) -> Result<LossBreakdown> {
        let get = |name: &str, v: Option<Var>| -> Result<f64> {
            let x = v.map_or(0.0, |v| tape.value(v).item());
            if x.is_finite() {
                Ok(x)
            } else {
                Err(Error::Numeric { op: name.into() })
            }
        };
        Ok(LossBreakdown {
            l_cls: get("l_cls", Some(self.l_cls))?,
            l_sc: get("l_sc", self.l_sc)?,
            l_rc: get("l_rc", self.l_rc)?,
            l_ra: get("l_ra", self.l_ra)?,
            l_js: get("l_js", self.l_js)?,
            l_total: get("l_total", Some(self.l_total))?,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            l_adv: self.l_adv.map(|v| get("l_adv", Some(v))).transpose()?,
            lambda_adv: self.lambda_adv,
            l_prox: self.l_prox.map(|v| get("l_prox", Some(v))).transpose()?,
        })
    }
}

/// Nodes of the three forward passes (original and two augmented views).
#[derive(Clone, Copy, Debug)]
pub struct ViewTriple {
    pub z: Var,
    pub z1: Var,
    pub z2: Var,
    pub y: Var,
    pub y1: Var,
    pub y2: Var,
}

fn weighted(tape: &mut Tape, acc: Var, term: Var, w: f64) -> Result<Var> {
    let t = tape.scale(term, w)?;
    tape.add(acc, t)
}

/// `L = L_CLS + λ1 (L_SC + L_RC) + λ2 L_JS`, plus `λ_adv · L_adv` when an
/// adversarial term is supplied.
pub fn total_objective_on(
    tape: &mut Tape,
    views: &ViewTriple,
    labels: &[usize],
    cfg: &LossConfig,
    l_adv: Option<Var>,
) -> Result<ObjectiveVars> {
    let l_cls = cross_entropy_on(tape, views.y, labels)?;
    let l_sc = l_sc_symmetric_on(tape, views.z, views.z1, views.z2, labels, cfg.tau)?;
    let l_rc = representation_consistency_on(tape, views.z, &[views.z1, views.z2])?;
    let l_ra = tape.add(l_sc, l_rc)?;
    let l_js = js_alignment_on(tape, views.y, views.y1, views.y2)?;
    let mut total = weighted(tape, l_cls, l_ra, cfg.lambda1)?;
    total = weighted(tape, total, l_js, cfg.lambda2)?;
    let lambda_adv = if l_adv.is_some() { cfg.lambda_adv } else { 0.0 };
    if let Some(adv) = l_adv {
        total = weighted(tape, total, adv, cfg.lambda_adv)?;
    }
    Ok(ObjectiveVars {
        l_cls,
        l_sc: Some(l_sc),
        l_rc: Some(l_rc),
        l_ra: Some(l_ra),
        l_js: Some(l_js),
        l_adv,
        l_prox: None,
        l_total: total,
        lambda1: cfg.lambda1,
        lambda2: cfg.lambda2,
        lambda_adv,
    })
}

/// Classification-only objective used by the baselines.
pub fn classification_objective_on(
    tape: &mut Tape,
    y: Var,
    labels: &[usize],
) -> Result<ObjectiveVars> {
    let l_cls = cross_entropy_on(tape, y, labels)?;
    Ok(ObjectiveVars {
        l_cls,
        l_sc: None,
        l_rc: None,
        l_ra: None,
        l_js: None,
        l_adv: None,
        l_prox: None,
        l_total: l_cls,
        lambda1: 0.0,
        lambda2: 0.0,
        lambda_adv: 0.0,
    })
}

/// Adds `(μ/2) ‖θ − θ_ref‖²` to an objective.
pub fn add_proximal(
    tape: &mut Tape,
    obj: &mut ObjectiveVars,
    params: &[Var],
    reference: &[Tensor],
    mu: f64,
) -> Result<()> {
    if params.len() != reference.len() {
        return contract("proximal term: parameter lists differ in length");
    }
    let mut acc: Option<Var> = None;
    for (&p, r) in params.iter().zip(reference) {
        let rv = tape.constant(r.clone());
        let d = tape.sub(p, rv)?;
        let sq = tape.mul(d, d)?;
        let s = tape.sum(sq)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    let Some(acc) = acc else { return Ok(()) };
    let prox = tape.scale(acc, 0.5 * mu)?;
    obj.l_total = tape.add(obj.l_total, prox)?;
    obj.l_prox = Some(prox);
    Ok(())
}

/// Two-layer binary classifier telling original from augmented
/// representations: `sigmoid(W2 · relu(W1 z + b1) + b2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub params: Vec<Tensor>,
}

impl Discriminator {
    pub fn init<R: Rng + ?Sized>(d_z: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            params: vec![
                Tensor::randn(&[d_z, hidden], (2.0 / d_z as f64).sqrt(), rng),
                Tensor::zeros(&[hidden]),
                Tensor::randn(&[hidden, 1], (1.0 / hidden as f64).sqrt(), rng),
                Tensor::zeros(&[1]),
            ],
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|t| tape.param(t.clone())).collect()
    }
}

/// Discriminator output `[B, 1]` in (0, 1).
pub fn discriminate_on(tape: &mut Tape, disc: &[Var], z: Var) -> Result<Var> {
    let [w1, b1, w2, b2] = disc else {
        return contract("discriminator needs exactly four parameter tensors");
    };
    let h = tape.matmul(z, *w1)?;
    let h = tape.add_bias(h, *b1)?;
    let h = tape.relu(h)?;
    let o = tape.matmul(h, *w2)?;
    let o = tape.add_bias(o, *b2)?;
    tape.sigmoid(o)
}

/// Binary cross-entropy of the discriminator with original rows labelled 1
/// and augmented rows labelled 0. Representations pass through a gradient
/// reversal, so the encoder is pushed to confuse the discriminator while
/// the discriminator itself learns to separate the two.
pub fn adversarial_loss_on(tape: &mut Tape, disc: &[Var], z: Var, augs: &[Var]) -> Result<Var> {
    let mut parts = vec![tape.grad_reverse(z, -1.0)?];
    for &a in augs {
        parts.push(tape.grad_reverse(a, -1.0)?);
    }
    let all = tape.concat(&parts)?;
    let n = tape.shape(all)[0];
    let n_orig = tape.shape(z)[0];
    let d = discriminate_on(tape, disc, all)?;
    let one_minus = tape.scale(d, -1.0)?;
    let one_minus = tape.add_scalar(one_minus, 1.0)?;
    let log_d = tape.log_floor(d, PROB_FLOOR)?;
    let log_1md = tape.log_floor(one_minus, PROB_FLOOR)?;
    let w_pos: Vec<f64> = (0..n)
        .map(|i| if i < n_orig { -1.0 / n as f64 } else { 0.0 })
        .collect();
    let w_neg: Vec<f64> = (0..n)
        .map(|i| if i < n_orig { 0.0 } else { -1.0 / n as f64 })
        .collect();
    let wp = tape.constant(Tensor::new(vec![n, 1], w_pos)?);
    let wn = tape.constant(Tensor::new(vec![n, 1], w_neg)?);
    let a = tape.mul(log_d, wp)?;
    let b = tape.mul(log_1md, wn)?;
    let s = tape.add(a, b)?;
    tape.sum(s)
}

fn eval<F>(inputs: &[&Tensor], f: F) -> Result<f64>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant((*t).clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

fn check_stochastic(m: &Tensor, op: &str) -> Result<()> {
    let &[_, k] = m.shape() else {
        return contract(format!("{op}: expected a 2-D probability matrix"));
    };
    for row in m.data().chunks(k) {
        if row.iter().any(|&v| !(v >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-8 {
            return contract(format!("{op}: rows must be probability vectors"));
        }
    }
    Ok(())
}

pub fn cross_entropy(yhat: &Tensor, labels: &[usize]) -> Result<f64> {
    check_stochastic(yhat, "cross_entropy")?;
    eval(&[yhat], |t, v| cross_entropy_on(t, v[0], labels))
}

pub fn supervised_contrastive(
    z_view: &Tensor,
    z_ref: &Tensor,
    labels: &[usize],
    tau: f64,
) -> Result<f64> {
    eval(&[z_view, z_ref], |t, v| {
        supervised_contrastive_on(t, v[0], v[1], labels, tau)
    })
}

pub fn l_sc_symmetric(
    z: &Tensor,
    z1: &Tensor,
    z2: &Tensor,
    labels: &[usize],
    tau: f64,
) -> Result<f64> {
    eval(&[z, z1, z2], |t, v| {
        l_sc_symmetric_on(t, v[0], v[1], v[2], labels, tau)
    })
}

pub fn representation_consistency(z: &Tensor, views: &[Tensor]) -> Result<f64> {
    let mut inputs = vec![z];
    inputs.extend(views);
    eval(&inputs, |t, v| {
        representation_consistency_on(t, v[0], &v[1..])
    })
}

pub fn js_alignment(y: &Tensor, y1: &Tensor, y2: &Tensor) -> Result<f64> {
    for m in [y, y1, y2] {
        check_stochastic(m, "js_alignment")?;
    }
    eval(&[y, y1, y2], |t, v| js_alignment_on(t, v[0], v[1], v[2]))
}

/// `Σ P (ln P − ln Q)` with both arguments floored at 10⁻¹².
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return contract(format!(
            "kl_divergence: lengths {} and {}",
            p.len(),
            q.len()
        ));
    }
    for v in [p, q] {
        if v.iter().any(|&x| !(x >= 0.0)) || (v.iter().sum::<f64>() - 1.0).abs() > 1e-8 {
            return contract("kl_divergence: arguments must be probability vectors");
        }
    }
    Ok(p.iter()
        .zip(q)
        .map(|(&a, &b)| a * (a.max(PROB_FLOOR).ln() - b.max(PROB_FLOOR).ln()))
        .sum())
}

/// Component values fed to [`total_loss`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Components {
    pub l_cls: f64,
    pub l_sc: f64,
    pub l_rc: f64,
    pub l_js: f64,
    pub l_adv: Option<f64>,
}

/// Weighted sum of precomputed component values.
pub fn total_loss(
    c: Components,
    lambda1: f64,
    lambda2: f64,
    lambda_adv: f64,
) -> Result<LossBreakdown> {
    for (name, v) in [
        ("l_cls", c.l_cls),
        ("l_sc", c.l_sc),
        ("l_rc", c.l_rc),
        ("l_js", c.l_js),
        ("l_adv", c.l_adv.unwrap_or(0.0)),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric { op: name.into() });
        }
    }
    let l_ra = c.l_sc + c.l_rc;
    let mut l_total = c.l_cls + lambda1 * l_ra + lambda2 * c.l_js;
    if let Some(a) = c.l_adv {
        l_total += lambda_adv * a;
    }
    Ok(LossBreakdown {
        l_cls: c.l_cls,
        l_sc: c.l_sc,
        l_rc: c.l_rc,
        l_ra,
        l_js: c.l_js,
        l_total,
        lambda1,
        lambda2,
        l_adv: c.l_adv,
        lambda_adv: if c.l_adv.is_some() { lambda_adv } else { 0.0 },
        l_prox: None,
    })
}
