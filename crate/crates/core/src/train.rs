//! SGD with momentum, the exponential learning-rate decay, the epoch loop
//! and checkpoints.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{BnConfig, Forward, GroupGrads, ParamSet};
use crate::assign::{AssignConfig, LossBreakdown, SamplerConfig};
use crate::data::{pad_to_multiple, transform_train, GtInstance, ImageSource, TrainMode};
use crate::error::{shape_err, Error, Result};
use crate::model::{train_step, ModelConfig};
use crate::tensor::{load_pft, save_pft, Real, Tensor4};

/// `l_e = l0 · b^(−λ·e)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub decay: f64,
    pub base: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { base_lr: 0.1, decay: 0.1, base: 10.0 }
    }
}

impl LrSchedule {
    /// Integral exponents divide by an exact power so that 0.1 · 10^−1 is
    /// exactly 0.01.
    pub fn at(&self, epoch: usize) -> f64 {
        let x = self.decay * epoch as f64;
        if x.fract() == 0.0 && x.abs() < 300.0 {
            self.base_lr / self.base.powi(x as i32)
        } else {
            self.base_lr * self.base.powf(-x)
        }
    }
}

/// The default schedule at epoch `e`.
pub fn lr_at(epoch: usize) -> f64 {
    LrSchedule::default().at(epoch)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub momentum: f64,
    /// Applied to convolution weights only.
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { momentum: 0.9, weight_decay: 1e-4 }
    }
}

/// Classical momentum: `m ← μ·m + g + wd·p`, then `p ← p − lr·m`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub cfg: SgdConfig,
    buffers: Vec<GroupGrads<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(cfg: SgdConfig, params: &ParamSet<T>) -> Self {
        let buffers = params
            .groups()
            .iter()
            .map(|g| GroupGrads {
                weight: vec![T::zero(); g.weight.len()],
                scale: vec![T::zero(); g.scale.len()],
                shift: vec![T::zero(); g.shift.len()],
            })
            .collect();
        Self { cfg, buffers }
    }

    pub fn buffers(&self) -> &[GroupGrads<T>] {
        &self.buffers
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[GroupGrads<T>], lr: f64) -> Result<()> {
        if grads.len() != self.buffers.len() {
            return shape_err(format!(
                "sgd: {} gradient groups for {} parameter groups",
                grads.len(),
                self.buffers.len()
            ));
        }
        let mu = T::of(self.cfg.momentum);
        let wd = T::of(self.cfg.weight_decay);
        let lr = T::of(lr);
        let update = |p: &mut [T], g: &[T], m: &mut [T], decay: Option<T>| -> Result<()> {
            if p.len() != g.len() || p.len() != m.len() {
                return shape_err(format!("sgd: gradient of {} for parameter of {}", g.len(), p.len()));
            }
            for ((p, &g), m) in p.iter_mut().zip(g).zip(m.iter_mut()) {
                let mut d = g;
                if let Some(wd) = decay {
                    d += wd * *p;
                }
                *m = mu * *m + d;
                *p -= lr * *m;
            }
            Ok(())
        };
        for ((group, g), m) in params.groups_mut().iter_mut().zip(grads).zip(&mut self.buffers) {
            update(group.weight.data_mut(), &g.weight, &mut m.weight, Some(wd))?;
            update(&mut group.scale, &g.scale, &mut m.scale, None)?;
            update(&mut group.shift, &g.shift, &mut m.shift, None)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: LrSchedule,
    pub sgd: SgdConfig,
    pub sampler: SamplerConfig,
    pub assign: AssignConfig,
    pub bn: BnConfig,
    /// Resize/crop applied to every training image; `None` only pads to a
    /// multiple of 64.
    pub transform: Option<TrainMode>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            lr: LrSchedule::default(),
            sgd: SgdConfig::default(),
            sampler: SamplerConfig::default(),
            assign: AssignConfig::default(),
            bn: BnConfig::default(),
            transform: None,
        }
    }
}

/// Mean per-step loss of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub loss: LossBreakdown,
    /// Positive anchors sampled over the epoch.
    pub positives: usize,
    /// Wall time, excluded from the CSV so equal seeds give equal files.
    pub seconds: f64,
}

pub fn epochs_csv(records: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,lr,steps,loss,reg,pos_cls,neg_cls,positives\n");
    for r in records {
        s += &format!(
            "{},{:e},{},{:.9e},{:.9e},{:.9e},{:.9e},{}\n",
            r.epoch, r.lr, r.steps, r.loss.total, r.loss.reg, r.loss.pos_cls, r.loss.neg_cls, r.positives
        );
    }
    s
}

/// Concatenates `(1, c, h, w)` images along the batch axis.
pub fn stack<T: Real>(images: &[Tensor4<T>]) -> Result<Tensor4<T>> {
    let Some(first) = images.first() else {
        return shape_err("stack: no images");
    };
    let [_, c, h, w] = first.dims();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for im in images {
        if im.dims() != [1, c, h, w] {
            return shape_err(format!("stack: image {:?} differs from {:?}", im.dims(), first.dims()));
        }
        data.extend_from_slice(im.data());
    }
    Tensor4::new([images.len(), c, h, w], data)
}

fn prepare(
    image: Tensor4<f32>,
    gts: Vec<GtInstance>,
    mode: Option<TrainMode>,
    seed: u64,
) -> Result<(Tensor4<f32>, Vec<GtInstance>)> {
    match mode {
        Some(m) => {
            let (x, g, _) = transform_train(&image, &gts, m, seed)?;
            Ok((x, g))
        }
        None => Ok((pad_to_multiple(&image, 64).0, gts)),
    }
}

pub struct TrainOutcome {
    pub params: ParamSet<f32>,
    pub epochs: Vec<EpochRecord>,
}

/// Trains from `init` for `cfg.epochs` epochs. Batches are drawn from a
/// per-epoch shuffle; a trailing partial batch is dropped.
pub fn train(
    source: &dyn ImageSource,
    model: &ModelConfig,
    cfg: &TrainConfig,
    init: ParamSet<f32>,
    seed: u64,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    model.validate()?;
    cfg.sampler.validate()?;
    let nb = cfg.sampler.images_per_batch;
    if source.len() < nb {
        return Err(Error::InvalidArgument(format!("training needs at least {nb} images, got {}", source.len())));
    }
    let mut params = init;
    let mut sgd = Sgd::new(cfg.sgd, &params);
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = cfg.lr.at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..source.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        let mut positives = 0;
        let steps = source.len() / nb;
        for (step, chunk) in order.chunks_exact(nb).enumerate() {
            let mut images = Vec::with_capacity(nb);
            let mut gts = Vec::with_capacity(nb);
            for &i in chunk {
                let (im, g) = source.get(i)?;
                let crop_seed = seed ^ ((epoch as u64) << 32) ^ i as u64;
                let (im, g) = prepare(im, g, cfg.transform, crop_seed)?;
                images.push(im);
                gts.push(g);
            }
            let batch = stack(&images)?;
            let out = match train_step(&params, model, &batch, &gts, &cfg.assign, &cfg.sampler, cfg.bn, &mut rng) {
                Err(Error::NonFinite { .. }) => return Err(Error::Diverged { epoch, step, loss: f64::NAN }),
                r => r?,
            };
            let finite_grads =
                out.grads.iter().all(|g| g.weight.iter().chain(&g.scale).chain(&g.shift).all(|v| v.is_finite()));
            if !out.loss.total.is_finite() || !finite_grads {
                return Err(Error::Diverged { epoch, step, loss: out.loss.total });
            }
            sgd.step(&mut params, &out.grads, lr)?;
            Forward::apply_bn_updates(&out.bn_updates, &mut params, cfg.bn.momentum);
            sum += out.loss;
            positives += out.positives;
        }
        let n = steps.max(1) as f64;
        let loss = LossBreakdown {
            total: sum.total / n,
            reg: sum.reg / n,
            pos_cls: sum.pos_cls / n,
            neg_cls: sum.neg_cls / n,
        };
        let rec = EpochRecord { epoch, lr, steps, loss, positives, seconds: start.elapsed().as_secs_f64() };
        progress(&rec);
        records.push(rec);
    }
    Ok(TrainOutcome { params, epochs: records })
}

/// One tensor of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub group: String,
    pub field: String,
    pub dims: [usize; 4],
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub version: u32,
    pub config_hash: String,
    pub model: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.toml";
const FIELDS: [&str; 5] = ["weight", "scale", "shift", "running_mean", "running_var"];

fn vector(v: &[f32]) -> Tensor4<f32> {
    Tensor4::new([1, v.len(), 1, 1], v.to_vec()).expect("dims match")
}

/// Writes `manifest.toml` plus one PFT1 file per parameter tensor.
pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    model: &ModelConfig,
    params: &ParamSet<f32>,
    config_hash: &str,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    for g in params.groups() {
        let parts =
            [&g.weight, &vector(&g.scale), &vector(&g.shift), &vector(&g.running_mean), &vector(&g.running_var)];
        for (field, t) in FIELDS.iter().zip(parts) {
            if t.is_empty() {
                continue;
            }
            let file = format!("{}.{field}.pft", g.record.group);
            save_pft(dir.join(&file), t)?;
            tensors.push(TensorEntry { group: g.record.group.clone(), field: field.to_string(), dims: t.dims(), file });
        }
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        config_hash: config_hash.into(),
        model: model.clone(),
        tensors,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(format!("checkpoint manifest: {e}")))?;
    std::fs::write(dir.join(MANIFEST), text)?;
    Ok(())
}

/// Reads a checkpoint, checking every tensor against the model's layer
/// records.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(CheckpointManifest, ParamSet<f32>)> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path)?;
    let manifest: CheckpointManifest =
        toml::from_str(&text).map_err(|e| Error::Parse { path: path.display().to_string(), message: e.to_string() })?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!("checkpoint version {} is not {CHECKPOINT_VERSION}", manifest.version)));
    }
    manifest.model.validate()?;
    let mut params = ParamSet::<f32>::init(&manifest.model.spec(), 0)?;
    let mut seen = vec![[false; 5]; params.groups().len()];
    for e in &manifest.tensors {
        let gi = params
            .position(&e.group)
            .ok_or_else(|| Error::Config(format!("checkpoint group `{}` is not in the model", e.group)))?;
        let fi = FIELDS
            .iter()
            .position(|f| *f == e.field)
            .ok_or_else(|| Error::Config(format!("checkpoint field `{}` is unknown", e.field)))?;
        let t = load_pft(dir.join(&e.file))?;
        if t.dims() != e.dims {
            return shape_err(format!("{}: dims {:?}, manifest says {:?}", e.file, t.dims(), e.dims));
        }
        let g = &mut params.groups_mut()[gi];
        let slot_len = [g.weight.len(), g.scale.len(), g.shift.len(), g.running_mean.len(), g.running_var.len()][fi];
        if (fi == 0 && t.dims() != g.weight.dims()) || t.len() != slot_len {
            return shape_err(format!("{}: {:?} does not fit group `{}`", e.file, t.dims(), e.group));
        }
        match fi {
            0 => g.weight = t,
            1 => g.scale = t.into_data(),
            2 => g.shift = t.into_data(),
            3 => g.running_mean = t.into_data(),
            _ => g.running_var = t.into_data(),
        }
        seen[gi][fi] = true;
    }
    for (g, s) in params.groups().iter().zip(&seen) {
        let needed = if g.scale.is_empty() { 1 } else { 5 };
        if s[..needed].iter().any(|&x| !x) {
            return Err(Error::Config(format!("checkpoint is missing tensors of group `{}`", g.record.group)));
        }
    }
    Ok((manifest, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::BBox;
    use crate::heads::{HeadConfig, HeadVariant};
    use crate::model::AnchorConfig;
    use crate::pyramid::{EncoderSpec, PyramidConfig};
    use rand::Rng;

    #[test]
    fn schedule_values_are_exact() {
        assert_eq!(lr_at(0), 0.1);
        assert_eq!(lr_at(10), 0.01);
        assert_eq!(lr_at(40), 1e-5);
        assert!((1..60).all(|e| lr_at(e) < lr_at(e - 1)));
        assert!((lr_at(5) - 0.1 * 10f64.powf(-0.5)).abs() < 1e-15);
    }

    fn small_params(seed: u64) -> ParamSet<f64> {
        let cfg = tiny();
        ParamSet::init(&cfg.spec(), seed).unwrap()
    }

    fn random_grads(p: &ParamSet<f64>, rng: &mut ChaCha8Rng) -> Vec<GroupGrads<f64>> {
        let mut r = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        p.groups()
            .iter()
            .map(|g| GroupGrads { weight: r(g.weight.len()), scale: r(g.scale.len()), shift: r(g.shift.len()) })
            .collect()
    }

    #[test]
    fn sgd_matches_scalar_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = small_params(1);
        let mut sgd = Sgd::new(SgdConfig::default(), &p);
        let mut m_ref: Vec<f64> = vec![0.0; p.groups()[0].weight.len()];
        let mut ms_ref = 0.0;
        for step in 0..3 {
            let lr = lr_at(step);
            let before = p.groups()[0].weight.data().to_vec();
            let before_scale = p.groups()[0].scale.clone();
            let g = random_grads(&p, &mut rng);
            let m_old = m_ref.clone();
            sgd.step(&mut p, &g, lr).unwrap();
            for i in 0..before.len() {
                // p ← p − l·(g + wd·p + μ·m_old)
                let expect = before[i] - lr * (g[0].weight[i] + 1e-4 * before[i] + 0.9 * m_old[i]);
                assert!((p.groups()[0].weight.data()[i] - expect).abs() < 1e-12);
                m_ref[i] = 0.9 * m_old[i] + g[0].weight[i] + 1e-4 * before[i];
            }
            // No decay on BN parameters.
            let s_expect = before_scale[0] - lr * (g[0].scale[0] + 0.9 * ms_ref);
            assert!((p.groups()[0].scale[0] - s_expect).abs() < 1e-12);
            ms_ref = 0.9 * ms_ref + g[0].scale[0];
        }
        assert_eq!(sgd.buffers()[0].weight.len(), m_ref.len());
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = small_params(2);
        let before = p.clone();
        let mut sgd = Sgd::new(SgdConfig::default(), &p);
        for _ in 0..3 {
            let g = random_grads(&p, &mut rng);
            sgd.step(&mut p, &g, 0.0).unwrap();
        }
        assert_eq!(p, before);
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            pyramid: PyramidConfig {
                decoder_channels: 8,
                encoder: EncoderSpec::Toy { widths: [4, 8, 8, 8] },
                ..Default::default()
            },
            head: HeadConfig {
                gcn_mid_width: 4,
                lk_width: 4,
                large_kernel: 5,
                ..HeadConfig::new(HeadVariant::GcnNs, true)
            },
            anchors: AnchorConfig::default(),
        }
    }

    #[test]
    fn checkpoint_round_trips_bytes() {
        let model = tiny();
        let mut params = ParamSet::<f32>::init(&model.spec(), 9).unwrap();
        params.groups_mut()[1].running_mean[0] = 0.123_456_7;
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        save_checkpoint(a.path(), &model, &params, "abc").unwrap();
        let (manifest, loaded) = load_checkpoint(a.path()).unwrap();
        assert_eq!(loaded, params);
        assert_eq!(manifest.model, model);
        save_checkpoint(b.path(), &manifest.model, &loaded, &manifest.config_hash).unwrap();
        let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        for n in names {
            assert_eq!(std::fs::read(a.path().join(&n)).unwrap(), std::fs::read(b.path().join(&n)).unwrap(), "{n:?}");
        }
        std::fs::remove_file(a.path().join("head.cls.weight.pft")).unwrap();
        assert!(load_checkpoint(a.path()).is_err());
    }

    struct OneImage;

    impl ImageSource for OneImage {
        fn len(&self) -> usize {
            1
        }
        fn get(&self, _: usize) -> Result<(Tensor4<f32>, Vec<GtInstance>)> {
            let b = BBox::new(20.0, 16.0, 44.0, 48.0);
            let img = Tensor4::from_fn([1, 3, 64, 64], |[_, c, y, x]| {
                let inside = (x as f64) >= b.x0 && (x as f64) < b.x1 && (y as f64) >= b.y0 && (y as f64) < b.y1;
                if inside {
                    0.9 - 0.2 * c as f32
                } else {
                    0.2
                }
            });
            Ok((img, vec![GtInstance::new(b, 1)]))
        }
    }

    #[test]
    fn overfits_one_image() {
        let mut model = tiny();
        model.pyramid.decoder_channels = 16;
        model.pyramid.encoder = EncoderSpec::Toy { widths: [8, 16, 16, 16] };
        // A constant, larger step: 50 steps on one image is a sanity check of
        // the whole loop, not a schedule study.
        let cfg = TrainConfig {
            epochs: 50,
            lr: LrSchedule { base_lr: 1.0, decay: 0.0, base: 10.0 },
            sampler: SamplerConfig { anchors_per_image: 32, images_per_batch: 1 },
            ..Default::default()
        };
        let init = ParamSet::init(&model.spec(), 7).unwrap();
        let out = train(&OneImage, &model, &cfg, init, 7, &mut |_| {}).unwrap();
        let first = out.epochs[0].loss.total;
        let last = out.epochs.last().unwrap().loss.total;
        assert!(last <= 0.1 * first, "loss {first} -> {last}");
    }

    #[test]
    fn equal_seeds_give_equal_curves() {
        let model = tiny();
        let cfg = TrainConfig {
            epochs: 3,
            sampler: SamplerConfig { anchors_per_image: 16, images_per_batch: 1 },
            ..Default::default()
        };
        let run = || {
            let init = ParamSet::init(&model.spec(), 3).unwrap();
            train(&OneImage, &model, &cfg, init, 3, &mut |_| {}).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(epochs_csv(&a.epochs), epochs_csv(&b.epochs));
        assert_eq!(a.params, b.params);
    }
}
