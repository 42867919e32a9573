//! The full proposal network: pyramid, head, anchors, training loss and the
//! inference pipeline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{generate_grid_anchors, generate_window_anchors, AnchorSet, GridRatios, WindowProfile};
use crate::arch::{ArchSpec, BnConfig, Forward, GroupGrads, ParamSet};
use crate::assign::{
    assign_labels, loss_var, sample_minibatch, AssignConfig, Label, LossBreakdown, SampleTarget, SamplerConfig,
};
use crate::data::GtInstance;
use crate::error::{shape_err, Error, Result};
use crate::eval::{nms, sort_by_score, Proposal};
use crate::graph::{Tape, Var};
use crate::heads::{head_forward, head_spec, HeadConfig, HeadOutput};
use crate::pspool::{decode_box_checked, encode_box, filter_image_bounds, pool_sites, pool_var, PoolMode, PoolSite};
use crate::pyramid::{decode, encode, pyramid_spec, PyramidConfig};
use crate::tensor::{Real, Tensor4};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorConfig {
    /// Grid anchors (non-position-sensitive heads) have side `grid_scale · stride`.
    pub grid_scale: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self { grid_scale: 8.0 }
    }
}

#[derive(Default, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub pyramid: PyramidConfig,
    pub head: HeadConfig,
    #[serde(default)]
    pub anchors: AnchorConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.pyramid.validate()?;
        self.head.validate()?;
        if !self.head.position_sensitive && GridRatios::from_count(self.head.ratios).is_none() {
            return Err(Error::Config(format!("head.ratios must be 3 or 5, got {}", self.head.ratios)));
        }
        if self.anchors.grid_scale.is_nan() || self.anchors.grid_scale <= 0.0 {
            return Err(Error::Config("anchors.grid_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn spec(&self) -> ArchSpec {
        let mut s = pyramid_spec(&self.pyramid);
        s.extend(head_spec(&self.head, self.pyramid.decoder_channels));
        s
    }

    pub fn pool_mode(&self) -> PoolMode {
        if self.head.position_sensitive {
            PoolMode::Grid { k: self.head.k }
        } else {
            PoolMode::Cell { ratios: self.head.ratios }
        }
    }

    /// Window anchors for position-sensitive heads, cell-centred grid
    /// anchors otherwise.
    pub fn anchors(&self, height: usize, width: usize) -> AnchorSet {
        let strides = &self.pyramid.strides;
        if self.head.position_sensitive {
            generate_window_anchors(height, width, strides, &WindowProfile::standard(strides.len()))
        } else {
            let ratios = GridRatios::from_count(self.head.ratios).unwrap_or(GridRatios::Three);
            generate_grid_anchors(height, width, strides, ratios, self.anchors.grid_scale)
        }
    }
}

/// Settings of the scoring → decoding → filtering → NMS pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposeConfig {
    pub pre_nms_top_k: usize,
    pub nms_iou: f64,
    pub post_nms_top_n: usize,
}

impl Default for ProposeConfig {
    fn default() -> Self {
        Self { pre_nms_top_k: 6000, nms_iou: 0.7, post_nms_top_n: 1000 }
    }
}

/// Proposals of one image plus the number of size offsets clamped while
/// decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalSet {
    pub proposals: Vec<Proposal>,
    pub clamped: usize,
}

/// Per-level score maps.
pub fn forward_maps<T: Real>(fwd: &mut Forward<'_, T>, image: Var, cfg: &ModelConfig) -> Result<Vec<HeadOutput>> {
    let e = encode(fwd, image, &cfg.pyramid)?;
    let d = decode(fwd, e, &cfg.pyramid)?;
    head_forward(fwd, &d, &cfg.head)
}

/// Result of one training forward/backward pass.
pub struct StepOutput<T> {
    pub loss: LossBreakdown,
    pub grads: Vec<GroupGrads<T>>,
    pub bn_updates: Vec<(usize, Vec<T>, Vec<T>)>,
    pub positives: usize,
}

/// Sampled anchors and targets of a batch, grouped per level.
struct BatchTargets {
    sites: Vec<Vec<PoolSite>>,
    targets: Vec<Vec<SampleTarget>>,
    positives: usize,
}

fn batch_targets(
    anchors: &AnchorSet,
    gts: &[Vec<GtInstance>],
    assign: &AssignConfig,
    sampler: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<BatchTargets> {
    let boxes = anchors.boxes();
    let mut level_of = Vec::with_capacity(boxes.len());
    for (l, level) in anchors.levels.iter().enumerate() {
        level_of.extend((0..level.anchors.len()).map(|i| (l, i)));
    }
    let nl = anchors.levels.len();
    let mut out = BatchTargets { sites: vec![Vec::new(); nl], targets: vec![Vec::new(); nl], positives: 0 };
    for (b, image_gts) in gts.iter().enumerate() {
        let assignment = assign_labels(&boxes, image_gts, assign)?;
        let sample = sample_minibatch(&assignment, sampler, rng)?;
        out.positives += sample.positives.len();
        for &i in sample.positives.iter().chain(&sample.negatives) {
            let (l, j) = level_of[i];
            let (positive, target) = match assignment.labels[i] {
                Label::Positive { gt } => (true, encode_box(&boxes[i], &image_gts[gt].bbox)),
                _ => (false, [0.0; 4]),
            };
            out.sites[l].push(PoolSite::from_anchor(b, &anchors.levels[l].anchors[j]));
            out.targets[l].push(SampleTarget { anchor: i, positive, target });
        }
    }
    Ok(out)
}

/// Training forward and backward on a batch `(N_B, 3, H, W)` with one gt
/// list per image. BN runs in training mode.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Real>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    images: &Tensor4<T>,
    gts: &[Vec<GtInstance>],
    assign: &AssignConfig,
    sampler: &SamplerConfig,
    bn: BnConfig,
    rng: &mut impl Rng,
) -> Result<StepOutput<T>> {
    if images.batch() != gts.len() || gts.len() != sampler.images_per_batch {
        return shape_err(format!(
            "train_step: {} images, {} gt lists, images_per_batch {}",
            images.batch(),
            gts.len(),
            sampler.images_per_batch
        ));
    }
    let anchors = cfg.anchors(images.height(), images.width());
    let bt = batch_targets(&anchors, gts, assign, sampler, rng)?;
    let mut tape = Tape::new();
    let image = tape.constant(images.clone());
    let mut fwd = Forward::new(&mut tape, params, true, bn);
    let maps = forward_maps(&mut fwd, image, cfg)?;
    let mut pooled = Vec::new();
    let mut targets = Vec::new();
    for ((m, sites), t) in maps.iter().zip(bt.sites).zip(bt.targets) {
        if sites.is_empty() {
            continue;
        }
        pooled.push(pool_var(fwd.tape, m.reg, m.cls, sites, cfg.pool_mode())?);
        targets.extend(t);
    }
    let scale = crate::assign::loss_scale(sampler);
    let (loss_v, loss) = loss_var(fwd.tape, &pooled, targets, scale)?;
    fwd.tape.backward(loss_v);
    Ok(StepOutput {
        loss,
        grads: fwd.grads(),
        bn_updates: std::mem::take(&mut fwd.bn_updates),
        positives: bt.positives,
    })
}

/// Scores every anchor of a `(1, 3, H, W)` image (already padded to a
/// multiple of the largest stride) and runs the proposal pipeline. Boxes
/// must lie inside the unpadded `width × height`.
pub fn propose<T: Real>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    image: &Tensor4<T>,
    width: usize,
    height: usize,
    pc: &ProposeConfig,
) -> Result<ProposalSet> {
    if image.batch() != 1 {
        return shape_err(format!("propose: expected one image, got batch {}", image.batch()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(image.clone());
    let mut fwd = Forward::new(&mut tape, params, false, BnConfig::default());
    let maps = forward_maps(&mut fwd, x, cfg)?;
    let anchors = cfg.anchors(image.height(), image.width());
    let mut all = Vec::with_capacity(anchors.total());
    let mut clamped = 0;
    for (l, (m, level)) in maps.iter().zip(&anchors.levels).enumerate() {
        if level.anchors.is_empty() {
            continue;
        }
        let sites: Vec<PoolSite> = level.anchors.iter().map(|a| PoolSite::from_anchor(0, a)).collect();
        let pooled = pool_sites(fwd.tape.value(m.reg), fwd.tape.value(m.cls), &sites, cfg.pool_mode())?;
        for (a, row) in level.anchors.iter().zip(pooled.data().chunks(5)) {
            let v: [f64; 5] = std::array::from_fn(|c| row[c].as_f64());
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { what: "score map".into(), location: format!("level {l}") });
            }
            let (bbox, c) = decode_box_checked(&a.bbox, &[v[0], v[1], v[2], v[3]]);
            clamped += c as usize;
            all.push(Proposal { bbox, score: crate::ops::sigmoid_scalar(v[4]), level: l });
        }
    }
    Ok(ProposalSet { proposals: rank_proposals(all, width, height, pc), clamped })
}

/// Bounds filter, pre-NMS top-k, NMS and post-NMS top-n.
pub fn rank_proposals(proposals: Vec<Proposal>, width: usize, height: usize, pc: &ProposeConfig) -> Vec<Proposal> {
    let mut kept = filter_image_bounds(proposals, width, height);
    kept.retain(|p| p.bbox.is_valid());
    sort_by_score(&mut kept);
    kept.truncate(pc.pre_nms_top_k);
    let mut out = nms(kept, pc.nms_iou);
    out.truncate(pc.post_nms_top_n);
    out
}
