//! Anchor labelling, half-positive sampling and the RPN loss.
//!
//! The loss over a batch of `N_B` images with `N_A` sampled anchors each is
//!
//! ```text
//! L = 1/(N_B·N_A) · Σ_images [ Σ_pos (smoothL1(t − t*) + BCE(o, 1)) + Σ_neg BCE(o, 0) ]
//! ```
//!
//! where the positive and negative sums run over the two halves of the
//! sample, not over `N_A` anchors each.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{iou, BBox};
use crate::data::GtInstance;
use crate::error::{shape_err, Error, Result};
use crate::graph::{Backward, Tape, Var};
use crate::ops::sigmoid_scalar;
use crate::tensor::{Real, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    /// Matched to the gt with index `gt`.
    Positive {
        gt: usize,
    },
    Negative,
    Ignore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelAssignment {
    pub labels: Vec<Label>,
}

impl LabelAssignment {
    pub fn positives(&self) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, l)| matches!(l, Label::Positive { .. })).map(|(i, _)| i).collect()
    }

    pub fn negatives(&self) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, l)| **l == Label::Negative).map(|(i, _)| i).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignConfig {
    pub positive_iou: f64,
    pub negative_iou: f64,
}

impl Default for AssignConfig {
    fn default() -> Self {
        Self { positive_iou: 0.7, negative_iou: 0.3 }
    }
}

/// Labels anchors against the non-crowd gts:
/// IoU > hi → positive; max IoU < lo → negative; otherwise ignored. Each gt's
/// best anchor (lowest index on ties) is promoted to positive when its IoU
/// exceeds lo. Positives are matched to their highest-IoU gt (lowest index on
/// ties). Non-positive anchors overlapping a crowd region by more than lo are
/// ignored.
pub fn assign_labels(anchors: &[BBox], gts: &[GtInstance], cfg: &AssignConfig) -> Result<LabelAssignment> {
    let (hi, lo) = (cfg.positive_iou, cfg.negative_iou);
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
        return Err(Error::InvalidArgument(format!("assign_labels: need 0 <= lo < hi <= 1, got lo={lo} hi={hi}")));
    }
    let real: Vec<&BBox> = gts.iter().filter(|g| !g.crowd).map(|g| &g.bbox).collect();
    let real_index: Vec<usize> = gts.iter().enumerate().filter(|(_, g)| !g.crowd).map(|(i, _)| i).collect();
    let crowd: Vec<&BBox> = gts.iter().filter(|g| g.crowd).map(|g| &g.bbox).collect();

    let mut best_gt = vec![(0usize, 0.0f64); anchors.len()];
    let mut best_anchor = vec![(0usize, f64::NEG_INFINITY); real.len()];
    for (i, a) in anchors.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in real.iter().enumerate() {
            let v = iou(a, g);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
            if v > best_anchor[j].1 {
                best_anchor[j] = (i, v);
            }
        }
        best_gt[i] = best.unwrap_or((0, 0.0));
    }
    let mut labels: Vec<Label> = best_gt
        .iter()
        .map(|&(j, v)| {
            if !real.is_empty() && v > hi {
                Label::Positive { gt: real_index[j] }
            } else if v < lo {
                Label::Negative
            } else {
                Label::Ignore
            }
        })
        .collect();
    for &(i, v) in &best_anchor {
        if v > lo {
            labels[i] = Label::Positive { gt: real_index[best_gt[i].0] };
        }
    }
    if !crowd.is_empty() {
        for (i, a) in anchors.iter().enumerate() {
            if !matches!(labels[i], Label::Positive { .. }) && crowd.iter().any(|c| iou(a, c) > lo) {
                labels[i] = Label::Ignore;
            }
        }
    }
    Ok(LabelAssignment { labels })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// `N_A`, even.
    pub anchors_per_image: usize,
    /// `N_B`.
    pub images_per_batch: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { anchors_per_image: 256, images_per_batch: 2 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.anchors_per_image == 0 || !self.anchors_per_image.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "anchors_per_image must be even and positive, got {}",
                self.anchors_per_image
            )));
        }
        if self.images_per_batch == 0 {
            return Err(Error::Config("images_per_batch must be positive".into()));
        }
        Ok(())
    }
}

/// Anchor indices drawn for one image, each list ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

fn draw(pool: &[usize], amount: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut picked: Vec<usize> = if amount >= pool.len() {
        pool.to_vec()
    } else {
        index::sample(rng, pool.len(), amount).into_iter().map(|i| pool[i]).collect()
    };
    picked.sort_unstable();
    picked
}

/// Up to `N_A/2` positives uniformly without replacement, then negatives to
/// fill `N_A`.
pub fn sample_minibatch(assignment: &LabelAssignment, cfg: &SamplerConfig, rng: &mut impl Rng) -> Result<Sample> {
    cfg.validate()?;
    let pos = assignment.positives();
    let neg = assignment.negatives();
    if pos.is_empty() && neg.is_empty() {
        return Err(Error::InvalidArgument("sample_minibatch: image has no positive or negative anchors".into()));
    }
    let positives = draw(&pos, cfg.anchors_per_image / 2, rng);
    let negatives = draw(&neg, cfg.anchors_per_image - positives.len(), rng);
    Ok(Sample { positives, negatives })
}

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Supervision of one pooled row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleTarget {
    /// Anchor id, used in error messages.
    pub anchor: usize,
    pub positive: bool,
    /// Regression target; ignored for negatives.
    pub target: [f64; 4],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Sum of smooth-L1 terms over positives.
    pub reg: f64,
    /// Sum of cross-entropy terms over positives.
    pub pos_cls: f64,
    /// Sum of cross-entropy terms over negatives.
    pub neg_cls: f64,
}

impl std::ops::AddAssign for LossBreakdown {
    fn add_assign(&mut self, o: Self) {
        self.total += o.total;
        self.reg += o.reg;
        self.pos_cls += o.pos_cls;
        self.neg_cls += o.neg_cls;
    }
}

/// `1/(N_B·N_A)`.
pub fn loss_scale(cfg: &SamplerConfig) -> f64 {
    1.0 / (cfg.images_per_batch * cfg.anchors_per_image) as f64
}

/// Loss over pooled rows `(t_x, t_y, t_w, t_h, o)`.
pub fn compute_loss(rows: &[[f64; 5]], targets: &[SampleTarget], scale: f64) -> Result<LossBreakdown> {
    if rows.len() != targets.len() {
        return shape_err(format!("compute_loss: {} rows for {} targets", rows.len(), targets.len()));
    }
    let mut b = LossBreakdown::default();
    for (r, s) in rows.iter().zip(targets) {
        if r.iter().any(|v| !v.is_finite()) || s.target.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "loss input".into(), location: format!("anchor {}", s.anchor) });
        }
        if s.positive {
            b.reg += (0..4).map(|c| smooth_l1(r[c] - s.target[c])).sum::<f64>();
            b.pos_cls += softplus(-r[4]);
        } else {
            b.neg_cls += softplus(r[4]);
        }
    }
    b.total = (b.reg + b.pos_cls + b.neg_cls) * scale;
    Ok(b)
}

struct LossRule {
    targets: Vec<SampleTarget>,
    splits: Vec<usize>,
    scale: f64,
}

impl<T: Real> Backward<T> for LossRule {
    fn backward(&self, inputs: &[&Tensor4<T>], _output: &Tensor4<T>, grad_out: &[T]) -> Vec<Option<Vec<T>>> {
        let g = grad_out[0].as_f64() * self.scale;
        let mut start = 0;
        inputs
            .iter()
            .zip(&self.splits)
            .map(|(x, &n)| {
                let mut grad = vec![T::zero(); x.len()];
                for (i, s) in self.targets[start..start + n].iter().enumerate() {
                    let r = &x.data()[i * 5..i * 5 + 5];
                    let o = r[4].as_f64();
                    if s.positive {
                        for c in 0..4 {
                            grad[i * 5 + c] = T::of(g * smooth_l1_grad(r[c].as_f64() - s.target[c]));
                        }
                        grad[i * 5 + 4] = T::of(g * (sigmoid_scalar::<f64>(o) - 1.0));
                    } else {
                        grad[i * 5 + 4] = T::of(g * sigmoid_scalar::<f64>(o));
                    }
                }
                start += n;
                Some(grad)
            })
            .collect()
    }
}

/// Records the loss over several pooled `(n, 5, 1, 1)` tensors whose rows,
/// concatenated, align with `targets`. Returns a scalar var.
pub fn loss_var<T: Real>(
    tape: &mut Tape<T>,
    pooled: &[Var],
    targets: Vec<SampleTarget>,
    scale: f64,
) -> Result<(Var, LossBreakdown)> {
    let mut rows = Vec::with_capacity(targets.len());
    let mut splits = Vec::with_capacity(pooled.len());
    for &p in pooled {
        let t = tape.value(p);
        if t.dims()[1..] != [5, 1, 1] {
            return shape_err(format!("loss: pooled tensor has dims {:?}", t.dims()));
        }
        splits.push(t.batch());
        rows.extend(t.data().chunks(5).map(|r| std::array::from_fn::<f64, 5, _>(|c| r[c].as_f64())));
    }
    let b = compute_loss(&rows, &targets, scale)?;
    let out = Tensor4::new([1, 1, 1, 1], vec![T::of(b.total)])?;
    let var = tape.push(out, pooled.to_vec(), Box::new(LossRule { targets, splits, scale }));
    Ok((var, b))
}
