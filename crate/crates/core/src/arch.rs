//! Declarative layer records, parameter accounting, parameter storage and the
//! forward context that applies layers on a tape.
//!
//! Convolutions carry no bias. A batch-norm layer contributes a learnable
//! scale and shift per channel; running statistics are buffers and are not
//! counted.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BnMode, Tape, Var};
use crate::ops::ConvGeom;
use crate::tensor::{Real, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    /// Convolution, batch norm, ReLU.
    Cbr,
    /// Convolution, batch norm.
    Cb,
    /// Bare convolution.
    Conv,
}

impl LayerKind {
    pub fn has_bn(self) -> bool {
        !matches!(self, LayerKind::Conv)
    }
}

/// One learnable layer. Records sharing a `group` name refer to the same
/// weights and are counted once.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub group: String,
    pub kind: LayerKind,
    pub kernel: (usize, usize),
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
}

impl LayerRecord {
    pub fn new(group: impl Into<String>, kind: LayerKind, kernel: (usize, usize), in_ch: usize, out_ch: usize) -> Self {
        Self { group: group.into(), kind, kernel, in_ch, out_ch, stride: 1 }
    }

    pub fn cbr(group: impl Into<String>, k: usize, in_ch: usize, out_ch: usize) -> Self {
        Self::new(group, LayerKind::Cbr, (k, k), in_ch, out_ch)
    }

    pub fn cb(group: impl Into<String>, k: usize, in_ch: usize, out_ch: usize) -> Self {
        Self::new(group, LayerKind::Cb, (k, k), in_ch, out_ch)
    }

    pub fn strided(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn weight_count(&self) -> u64 {
        (self.kernel.0 * self.kernel.1 * self.in_ch * self.out_ch) as u64
    }

    pub fn param_count(&self) -> u64 {
        self.weight_count() + if self.kind.has_bn() { 2 * self.out_ch as u64 } else { 0 }
    }

    pub fn geom(&self) -> ConvGeom {
        ConvGeom::new(self.stride, [(self.kernel.0 - 1) / 2, (self.kernel.1 - 1) / 2])
    }

    fn same_weights(&self, other: &LayerRecord) -> bool {
        self.kind == other.kind
            && self.kernel == other.kernel
            && self.in_ch == other.in_ch
            && self.out_ch == other.out_ch
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub layers: Vec<LayerRecord>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    /// Per sharing group, in first-appearance order.
    pub groups: Vec<(String, u64)>,
    pub total: u64,
}

impl ParamCount {
    /// Sum over groups whose name starts with `prefix`.
    pub fn under(&self, prefix: &str) -> u64 {
        self.groups.iter().filter(|(g, _)| g.starts_with(prefix)).map(|(_, n)| n).sum()
    }
}

impl ArchSpec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, r: LayerRecord) -> &mut Self {
        self.layers.push(r);
        self
    }

    pub fn extend(&mut self, other: ArchSpec) -> &mut Self {
        self.layers.extend(other.layers);
        self
    }

    /// Records that share a group must describe identical weights.
    pub fn validate(&self) -> Result<()> {
        let mut seen: HashMap<&str, &LayerRecord> = HashMap::new();
        for r in &self.layers {
            if r.kernel.0 == 0 || r.kernel.1 == 0 || r.in_ch == 0 || r.out_ch == 0 || r.stride == 0 {
                return Err(Error::Config(format!("layer `{}` has a zero dimension", r.group)));
            }
            if let Some(prev) = seen.insert(&r.group, r) {
                if !prev.same_weights(r) {
                    return Err(Error::Config(format!("sharing group `{}` used with different shapes", r.group)));
                }
            }
        }
        Ok(())
    }

    /// Distinct groups in first-appearance order.
    pub fn groups(&self) -> Vec<&LayerRecord> {
        let mut seen = std::collections::HashSet::new();
        self.layers.iter().filter(|r| seen.insert(r.group.as_str())).collect()
    }

    pub fn count_params(&self) -> ParamCount {
        let groups: Vec<(String, u64)> =
            self.groups().into_iter().map(|r| (r.group.clone(), r.param_count())).collect();
        let total = groups.iter().map(|(_, n)| n).sum();
        ParamCount { groups, total }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("arch spec serialises")
    }
}

/// Weights of one sharing group.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup<T: Real> {
    pub record: LayerRecord,
    /// `(out, in, kh, kw)`.
    pub weight: Tensor4<T>,
    pub scale: Vec<T>,
    pub shift: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Real> {
    groups: Vec<ParamGroup<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamSet<T> {
    /// He-normal conv weights, unit BN scale, zero shift, unit running variance.
    pub fn init(spec: &ArchSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups = spec
            .groups()
            .into_iter()
            .map(|r| {
                let fan_in = (r.in_ch * r.kernel.0 * r.kernel.1) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                let weight =
                    Tensor4::from_fn([r.out_ch, r.in_ch, r.kernel.0, r.kernel.1], |_| T::of(normal.sample(&mut rng)));
                let bn = if r.kind.has_bn() { r.out_ch } else { 0 };
                ParamGroup {
                    record: r.clone(),
                    weight,
                    scale: vec![T::one(); bn],
                    shift: vec![T::zero(); bn],
                    running_mean: vec![T::zero(); bn],
                    running_var: vec![T::one(); bn],
                }
            })
            .collect();
        Ok(Self::from_groups(groups))
    }

    pub fn from_groups(groups: Vec<ParamGroup<T>>) -> Self {
        let index = groups.iter().enumerate().map(|(i, g)| (g.record.group.clone(), i)).collect();
        Self { groups, index }
    }

    pub fn groups(&self) -> &[ParamGroup<T>] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [ParamGroup<T>] {
        &mut self.groups
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&ParamGroup<T>> {
        self.position(name).map(|i| &self.groups[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamGroup<T>> {
        self.position(name).map(move |i| &mut self.groups[i])
    }

    pub fn learnable_count(&self) -> u64 {
        self.groups.iter().map(|g| g.record.param_count()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect::<Vec<U>>();
        ParamSet::from_groups(
            self.groups
                .iter()
                .map(|g| ParamGroup {
                    record: g.record.clone(),
                    weight: g.weight.cast(),
                    scale: conv(&g.scale),
                    shift: conv(&g.shift),
                    running_mean: conv(&g.running_mean),
                    running_var: conv(&g.running_var),
                })
                .collect(),
        )
    }
}

/// Gradients for one group, aligned with [`ParamGroup`].
#[derive(Clone, Debug, PartialEq)]
pub struct GroupGrads<T> {
    pub weight: Vec<T>,
    pub scale: Vec<T>,
    pub shift: Vec<T>,
}

struct GroupVars {
    weight: Var,
    scale: Option<Var>,
    shift: Option<Var>,
}

/// Batch-norm configuration shared by every layer of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BnConfig {
    pub eps: f64,
    /// Fraction of the previous running estimate retained per update.
    pub momentum: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        Self { eps: 1e-5, momentum: 0.9 }
    }
}

/// Applies parameter groups on a tape. Every group is attached as a leaf up
/// front so gradients can be collected after the backward pass.
pub struct Forward<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    params: &'a ParamSet<T>,
    vars: Vec<GroupVars>,
    pub training: bool,
    pub bn: BnConfig,
    /// Batch statistics observed in training mode: (group, mean, var).
    pub bn_updates: Vec<(usize, Vec<T>, Vec<T>)>,
}

impl<'a, T: Real> Forward<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, params: &'a ParamSet<T>, training: bool, bn: BnConfig) -> Self {
        let vars = params
            .groups
            .iter()
            .map(|g| {
                let weight = tape.leaf(g.weight.clone(), true);
                let (scale, shift) = if g.record.kind.has_bn() {
                    let dims = [1, g.scale.len(), 1, 1];
                    (
                        Some(tape.leaf(Tensor4::new(dims, g.scale.clone()).expect("bn dims"), true)),
                        Some(tape.leaf(Tensor4::new(dims, g.shift.clone()).expect("bn dims"), true)),
                    )
                } else {
                    (None, None)
                };
                GroupVars { weight, scale, shift }
            })
            .collect();
        Self { tape, params, vars, training, bn, bn_updates: Vec::new() }
    }

    fn lookup(&self, group: &str) -> Result<usize> {
        self.params.position(group).ok_or_else(|| Error::Config(format!("unknown parameter group `{group}`")))
    }

    /// Layer record of a parameter group.
    pub fn record(&self, group: &str) -> Result<&LayerRecord> {
        Ok(&self.params.groups[self.lookup(group)?].record)
    }

    /// Applies one group to `x`.
    pub fn layer(&mut self, group: &str, x: Var) -> Result<Var> {
        Ok(self.layer_shared(group, &[x])?.remove(0))
    }

    /// Applies one group to several inputs with identical weights. Batch
    /// norm sees the inputs as one population: a single set of batch
    /// statistics in training and one running estimate.
    pub fn layer_shared(&mut self, group: &str, xs: &[Var]) -> Result<Vec<Var>> {
        let gi = self.lookup(group)?;
        let g = &self.params.groups[gi];
        let (kind, geom) = (g.record.kind, g.record.geom());
        let w = self.vars[gi].weight;
        let convs = xs.iter().map(|&x| self.tape.conv2d(x, w, geom)).collect::<Result<Vec<_>>>()?;
        if !kind.has_bn() {
            return Ok(convs);
        }
        let (scale, shift) = (self.vars[gi].scale.unwrap(), self.vars[gi].shift.unwrap());
        let normed = if convs.len() == 1 {
            vec![self.bn(gi, convs[0], scale, shift)?]
        } else {
            let dims: Vec<_> = convs.iter().map(|&v| self.tape.value(v).dims()).collect();
            let packed = self.tape.pack_spatial(&convs)?;
            let packed = self.bn(gi, packed, scale, shift)?;
            let mut offset = 0;
            let mut outs = Vec::with_capacity(convs.len());
            for d in dims {
                outs.push(self.tape.unpack_spatial(packed, offset, d[2], d[3])?);
                offset += d[2] * d[3];
            }
            outs
        };
        Ok(match kind {
            LayerKind::Cbr => normed.into_iter().map(|v| self.tape.relu(v)).collect(),
            _ => normed,
        })
    }

    fn bn(&mut self, gi: usize, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let g = &self.params.groups[gi];
        if self.training {
            let (y, saved) = self.tape.batch_norm(x, scale, shift, BnMode::Train { eps: self.bn.eps })?;
            let saved = saved.expect("training mode saves statistics");
            self.bn_updates.push((gi, saved.mean, saved.var));
            Ok(y)
        } else {
            let mode = BnMode::Infer { mean: &g.running_mean, var: &g.running_var, eps: self.bn.eps };
            Ok(self.tape.batch_norm(x, scale, shift, mode)?.0)
        }
    }

    /// Gradients of every group after [`Tape::backward`]; zeros where no
    /// gradient reached the group.
    pub fn grads(&self) -> Vec<GroupGrads<T>> {
        self.params
            .groups
            .iter()
            .zip(&self.vars)
            .map(|(g, v)| {
                let get = |var: Option<Var>, len: usize| {
                    var.and_then(|v| self.tape.grad(v).map(<[T]>::to_vec)).unwrap_or_else(|| vec![T::zero(); len])
                };
                GroupGrads {
                    weight: get(Some(v.weight), g.weight.len()),
                    scale: get(v.scale, g.scale.len()),
                    shift: get(v.shift, g.shift.len()),
                }
            })
            .collect()
    }

    /// Folds the recorded batch statistics into `params`' running estimates.
    pub fn apply_bn_updates(updates: &[(usize, Vec<T>, Vec<T>)], params: &mut ParamSet<T>, momentum: f64) {
        let m = T::of(momentum);
        let one_minus = T::of(1.0 - momentum);
        for (gi, mean, var) in updates {
            let g = &mut params.groups[*gi];
            for (r, &b) in g.running_mean.iter_mut().zip(mean) {
                *r = m * *r + one_minus * b;
            }
            for (r, &b) in g.running_var.iter_mut().zip(var) {
                *r = m * *r + one_minus * b;
            }
        }
    }
}
