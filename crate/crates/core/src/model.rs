//! Small convolutional classifier split into an encoder and a linear head.
//!
//! ```text
//! encoder: conv3x3(in→c1) → relu → [mix point 1]
//!          conv3x3(c1→c2) → relu → [mix point 2]
//!          global-avg-pool → fc(c2→d_z)                 = Z
//! head:    fc(d_z→classes) → softmax                    = Ŷ
//! ```

use std::collections::BTreeMap;
use std::io::Read;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::mixstyle::{channel_stats, MixDirective, StyleStats, STYLE_EPS};
use crate::numerics::{Tape, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FAW1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub d_z: usize,
    pub num_classes: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            conv1_channels: 8,
            conv2_channels: 16,
            d_z: 16,
            num_classes: 5,
        }
    }
}

impl ArchConfig {
    pub fn with_classes(num_classes: usize) -> Self {
        Self {
            num_classes,
            ..Self::default()
        }
    }

    /// `(name, shape)` of every parameter, in storage order.
    pub fn layout(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (i, c1, c2, dz, k) = (
            self.in_channels,
            self.conv1_channels,
            self.conv2_channels,
            self.d_z,
            self.num_classes,
        );
        vec![
            ("h.conv1.weight", vec![c1, i, 3, 3]),
            ("h.conv1.bias", vec![c1]),
            ("h.conv2.weight", vec![c2, c1, 3, 3]),
            ("h.conv2.bias", vec![c2]),
            ("h.fc.weight", vec![c2, dz]),
            ("h.fc.bias", vec![dz]),
            ("g.fc.weight", vec![dz, k]),
            ("g.fc.bias", vec![k]),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Channel count at a mix point.
    pub fn channels_at(&self, point: usize) -> Option<usize> {
        match point {
            1 => Some(self.conv1_channels),
            2 => Some(self.conv2_channels),
            _ => None,
        }
    }

    fn validate(&self) -> Result<()> {
        if [
            self.in_channels,
            self.conv1_channels,
            self.conv2_channels,
            self.d_z,
            self.num_classes,
        ]
        .contains(&0)
        {
            return contract(format!("architecture extents must be positive: {self:?}"));
        }
        Ok(())
    }
}

/// Encoder and classifier weights as an ordered list of tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    arch: ArchConfig,
    tensors: Vec<Tensor>,
}

// Indices into `tensors`.
const CONV1_W: usize = 0;
const CONV1_B: usize = 1;
const CONV2_W: usize = 2;
const CONV2_B: usize = 3;
const HFC_W: usize = 4;
const HFC_B: usize = 5;
const GFC_W: usize = 6;
const GFC_B: usize = 7;

impl ModelParams {
    /// Fan-in scaled normal weights (std √(2/fan_in)), zero biases.
    pub fn init<R: Rng + ?Sized>(arch: ArchConfig, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let tensors = arch
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with("bias") {
                    Tensor::zeros(&shape)
                } else {
                    let fan_in: usize = if shape.len() == 4 {
                        shape[1..].iter().product()
                    } else {
                        shape[0]
                    };
                    Tensor::randn(&shape, (2.0 / fan_in as f64).sqrt(), rng)
                }
            })
            .collect();
        Ok(Self { arch, tensors })
    }

    pub fn from_tensors(arch: ArchConfig, tensors: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        if layout.len() != tensors.len()
            || layout
                .iter()
                .zip(&tensors)
                .any(|((_, s), t)| s.as_slice() != t.shape())
        {
            return contract("parameter tensors do not match the architecture layout");
        }
        Ok(Self { arch, tensors })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.tensors
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.arch.layout().into_iter().map(|(n, _)| n).collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// All values concatenated in storage order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn unflatten(arch: ArchConfig, flat: &[f64]) -> Result<Self> {
        if flat.len() != arch.param_count() {
            return contract(format!(
                "expected {} parameter values, got {}",
                arch.param_count(),
                flat.len()
            ));
        }
        let mut off = 0;
        let tensors = arch
            .layout()
            .into_iter()
            .map(|(_, shape)| {
                let n: usize = shape.iter().product();
                let t = Tensor::new(shape, flat[off..off + n].to_vec());
                off += n;
                t
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { arch, tensors })
    }

    pub fn is_congruent(&self, other: &ModelParams) -> bool {
        self.arch == other.arch
    }

    /// Places every tensor on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundParams {
        BoundParams {
            arch: self.arch,
            vars: self
                .tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), requires_grad))
                .collect(),
        }
    }

    /// `FAW1 | u32 header length | JSON header | little-endian f64 values`.
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            params: self
                .names()
                .into_iter()
                .zip(&self.tensors)
                .map(|(n, t)| HeaderEntry {
                    name: n.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + json.len() + 8 * self.param_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn checkpoint_size(arch: &ArchConfig) -> usize {
        let dummy = Self {
            arch: *arch,
            tensors: arch
                .layout()
                .iter()
                .map(|(_, s)| Tensor::zeros(s))
                .collect(),
        };
        dummy.to_checkpoint().len()
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        Self::read_checkpoint(&mut r)
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        let mut offset = 0u64;
        let mut read = |buf: &mut [u8], what: &str| -> Result<()> {
            r.read_exact(buf).map_err(|_| Error::Format {
                offset,
                message: format!("truncated checkpoint ({what})"),
            })?;
            offset += buf.len() as u64;
            Ok(())
        };
        let mut magic = [0u8; 4];
        read(&mut magic, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad checkpoint magic".into(),
            });
        }
        let mut len = [0u8; 4];
        read(&mut len, "header length")?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        read(&mut json, "header")?;
        let header: CheckpointHeader =
            serde_json::from_slice(&json).map_err(|e| Error::Format {
                offset: 8,
                message: format!("bad checkpoint header: {e}"),
            })?;
        let arch = infer_arch(&header)?;
        let mut tensors = Vec::with_capacity(header.params.len());
        for entry in &header.params {
            let n: usize = entry.shape.iter().product();
            let mut raw = vec![0u8; 8 * n];
            read(&mut raw, &entry.name)?;
            let data = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            tensors.push(Tensor::new(entry.shape.clone(), data)?);
        }
        Self::from_tensors(arch, tensors)
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    params: Vec<HeaderEntry>,
}

fn infer_arch(header: &CheckpointHeader) -> Result<ArchConfig> {
    let bad = || Error::Format {
        offset: 8,
        message: "checkpoint header does not describe this architecture".into(),
    };
    let shape = |i: usize| {
        header
            .params
            .get(i)
            .map(|e| e.shape.as_slice())
            .ok_or_else(bad)
    };
    let (c1w, c2w, hw, gw) = (
        shape(CONV1_W)?,
        shape(CONV2_W)?,
        shape(HFC_W)?,
        shape(GFC_W)?,
    );
    if c1w.len() != 4 || c2w.len() != 4 || hw.len() != 2 || gw.len() != 2 {
        return Err(bad());
    }
    let arch = ArchConfig {
        in_channels: c1w[1],
        conv1_channels: c1w[0],
        conv2_channels: c2w[0],
        d_z: hw[1],
        num_classes: gw[1],
    };
    let expected = arch.layout();
    if expected.len() != header.params.len()
        || expected
            .iter()
            .zip(&header.params)
            .any(|((n, s), e)| *n != e.name || *s != e.shape)
    {
        return Err(bad());
    }
    Ok(arch)
}

/// Parameters placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    arch: ArchConfig,
    vars: Vec<Var>,
}

/// Intermediate nodes of one encoder pass.
#[derive(Clone, Debug)]
pub struct EncoderTrace {
    /// Post-relu activations at mix points 1 and 2.
    pub points: [Var; 2],
    pub z: Var,
}

impl EncoderTrace {
    pub fn at(&self, point: usize) -> Var {
        self.points[point - 1]
    }
}

impl BoundParams {
    /// Wraps existing tape nodes laid out as [`ArchConfig::layout`].
    pub fn from_vars(tape: &Tape, arch: ArchConfig, vars: Vec<Var>) -> Result<Self> {
        let layout = arch.layout();
        if layout.len() != vars.len()
            || layout
                .iter()
                .zip(&vars)
                .any(|((_, s), &v)| s.as_slice() != tape.shape(v))
        {
            return contract("bound parameters do not match the architecture layout");
        }
        Ok(Self { arch, vars })
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    /// Gradients of every parameter, zero where none reached.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
            })
            .collect()
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        match *tape.shape(x) {
            [_, c, h, w] if c == self.arch.in_channels && h >= 1 && w >= 2 => Ok(()),
            ref s => contract(format!(
                "encoder input must be [B, {}, H, W], got {s:?}",
                self.arch.in_channels
            )),
        }
    }

    /// Runs the encoder, re-styling at the directive's mix point if given.
    pub fn encode(
        &self,
        tape: &mut Tape,
        x: Var,
        mix: Option<&MixDirective>,
    ) -> Result<EncoderTrace> {
        self.check_input(tape, x)?;
        if let Some(m) = mix {
            if self.arch.channels_at(m.point).is_none() {
                return contract(format!("mix point {} does not exist", m.point));
            }
        }
        let v = &self.vars;
        let c1 = tape.conv2d(x, v[CONV1_W], v[CONV1_B])?;
        let a1 = tape.relu(c1)?;
        let m1 = match mix {
            Some(d) if d.point == 1 => restyle_at(tape, a1, d)?,
            _ => a1,
        };
        let c2 = tape.conv2d(m1, v[CONV2_W], v[CONV2_B])?;
        let a2 = tape.relu(c2)?;
        let m2 = match mix {
            Some(d) if d.point == 2 => restyle_at(tape, a2, d)?,
            _ => a2,
        };
        let z = self.head_of_encoder(tape, m2)?;
        Ok(EncoderTrace {
            points: [a1, a2],
            z,
        })
    }

    /// Re-runs the encoder from a previous clean trace with mixing applied
    /// at `mix.point`, sharing every node before that point.
    pub fn encode_from(
        &self,
        tape: &mut Tape,
        clean: &EncoderTrace,
        mix: &MixDirective,
    ) -> Result<Var> {
        let targets = MixTargets::resolve(tape, clean, mix)?;
        self.encode_from_targets(tape, clean, &targets)
    }

    /// As [`encode_from`](Self::encode_from) with already resolved targets.
    pub fn encode_from_targets(
        &self,
        tape: &mut Tape,
        clean: &EncoderTrace,
        targets: &MixTargets,
    ) -> Result<Var> {
        let v = &self.vars;
        match targets.point {
            1 => {
                let m1 = targets.apply(tape, clean.at(1))?;
                let c2 = tape.conv2d(m1, v[CONV2_W], v[CONV2_B])?;
                let a2 = tape.relu(c2)?;
                self.head_of_encoder(tape, a2)
            }
            2 => {
                let m2 = targets.apply(tape, clean.at(2))?;
                self.head_of_encoder(tape, m2)
            }
            p => contract(format!("mix point {p} does not exist")),
        }
    }

    fn head_of_encoder(&self, tape: &mut Tape, a2: Var) -> Result<Var> {
        let v = &self.vars;
        let pooled = tape.global_avg_pool(a2)?;
        let fc = tape.matmul(pooled, v[HFC_W])?;
        tape.add_bias(fc, v[HFC_B])
    }

    /// Class probabilities from representations.
    pub fn classify(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        match *tape.shape(z) {
            [_, d] if d == self.arch.d_z => {}
            ref s => {
                return contract(format!(
                    "classifier input must be [B, {}], got {s:?}",
                    self.arch.d_z
                ))
            }
        }
        let v = &self.vars;
        let logits = tape.matmul(z, v[GFC_W])?;
        let logits = tape.add_bias(logits, v[GFC_B])?;
        tape.softmax(logits)
    }
}

fn restyle_at(tape: &mut Tape, act: Var, mix: &MixDirective) -> Result<Var> {
    MixTargets::for_activation(tape, act, mix)?.apply(tape, act)
}

/// Per-sample re-styling targets at one mix point, flattened to `B·C`
/// vectors. They enter the graph as constants: gradients flow through the
/// normalization by the sample's own statistics but not through the
/// mixed statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct MixTargets {
    pub point: usize,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl MixTargets {
    /// Targets for `mix` given the clean activations of a trace.
    pub fn resolve(tape: &Tape, clean: &EncoderTrace, mix: &MixDirective) -> Result<Self> {
        if !(1..=2).contains(&mix.point) {
            return contract(format!("mix point {} does not exist", mix.point));
        }
        Self::for_activation(tape, clean.at(mix.point), mix)
    }

    fn for_activation(tape: &Tape, act: Var, mix: &MixDirective) -> Result<Self> {
        let mut own = channel_stats(tape.value(act))?;
        for s in &mut own {
            s.layer = mix.point as u16;
        }
        let (shift, scale) = mix.targets(&own)?;
        Ok(Self {
            point: mix.point,
            shift,
            scale,
        })
    }

    fn apply(&self, tape: &mut Tape, act: Var) -> Result<Var> {
        tape.restyle(act, self.shift.clone(), self.scale.clone(), STYLE_EPS)
    }
}

/// Per-sample statistics at each mix point of a clean trace, tagged with
/// the layer they were measured at.
pub fn trace_stats(
    tape: &Tape,
    trace: &EncoderTrace,
    points: &[usize],
) -> Result<BTreeMap<usize, Vec<StyleStats>>> {
    let mut out = BTreeMap::new();
    for &p in points {
        if !(1..=2).contains(&p) {
            return contract(format!("mix point {p} does not exist"));
        }
        let mut s = channel_stats(tape.value(trace.at(p)))?;
        for st in &mut s {
            st.layer = p as u16;
        }
        out.insert(p, s);
    }
    Ok(out)
}

/// `Z = h(X)` without gradient tracking.
pub fn encode(params: &ModelParams, x: &Tensor, mix: Option<&MixDirective>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let trace = bound.encode(&mut tape, xv, mix)?;
    Ok(tape.value(trace.z).clone())
}

/// `Ŷ = g(Z)`, row-stochastic.
pub fn classify(params: &ModelParams, z: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let zv = tape.constant(z.clone());
    let y = bound.classify(&mut tape, zv)?;
    Ok(tape.value(y).clone())
}

/// `(Z, Ŷ)` for a batch.
pub fn forward_full(params: &ModelParams, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let trace = bound.encode(&mut tape, xv, None)?;
    let y = bound.classify(&mut tape, trace.z)?;
    Ok((tape.value(trace.z).clone(), tape.value(y).clone()))
}

/// Activations at mix point 1 for a batch.
pub fn first_point_activations(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    bound.check_input(&tape, xv)?;
    let c1 = tape.conv2d(xv, bound.vars[CONV1_W], bound.vars[CONV1_B])?;
    let a1 = tape.relu(c1)?;
    Ok(tape.value(a1).clone())
}
