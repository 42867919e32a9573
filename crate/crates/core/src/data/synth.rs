//! Synthetic shapes: filled rectangles and ellipses on textured noise with
//! exact boxes. Image `i` of a seed is generated from its own random stream,
//! so any subset can be produced without the others.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{emit_coco, AnnotatedImage, Annotations, GtInstance, ImageRecord, ImageSource};
use crate::anchors::{iou, BBox};
use crate::error::{Error, Result};
use crate::tensor::{save_pft, Tensor4};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Square image side; a multiple of 64.
    pub size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Shortest allowed box side in pixels.
    pub min_side: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { size: 128, min_shapes: 1, max_shapes: 8, min_side: 8, seed: 7 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !self.size.is_multiple_of(64) {
            return Err(Error::Config(format!("synthetic image size {} is not a multiple of 64", self.size)));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::Config("synthetic shape counts must satisfy 1 <= min <= max".into()));
        }
        if self.min_side == 0 || 2 * self.min_side > self.size {
            return Err(Error::Config("synthetic min_side out of range".into()));
        }
        Ok(())
    }
}

const RECT: u32 = 1;
const ELLIPSE: u32 = 2;
const PLACEMENT_TRIES: usize = 30;

/// Generates image `index` of the dataset described by `cfg`.
pub fn synth_image(cfg: &SynthConfig, index: u64) -> (Tensor4<f32>, Vec<GtInstance>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let n = cfg.size;
    let sz = n as f64;

    // Background: a base colour, a gentle diagonal texture and pixel noise.
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    let freq = rng.random_range(0.05..0.3f32);
    let phase = rng.random_range(0.0..6.3f32);
    let mut data = vec![0f32; 3 * n * n];
    for c in 0..3 {
        for y in 0..n {
            for x in 0..n {
                let tex = 0.06 * ((x as f32 + 0.7 * y as f32) * freq + phase + c as f32).sin();
                data[(c * n + y) * n + x] = base[c] + tex + rng.random_range(-0.06..0.06);
            }
        }
    }

    let count = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
    let max_side = (n - 2) as f64;
    let min_side = cfg.min_side as f64;
    let mut gts: Vec<GtInstance> = Vec::new();
    for _ in 0..count {
        for _ in 0..PLACEMENT_TRIES {
            // Log-uniform area and aspect ratio.
            let area = (rng.random_range((min_side * 1.5).ln()..(0.9 * sz).ln()) * 2.0).exp();
            let ratio = rng.random_range((1.0f64 / 3.0).ln()..3f64.ln()).exp();
            let w = (area / ratio).sqrt().clamp(min_side, max_side).round();
            let h = (area * ratio).sqrt().clamp(min_side, max_side).round();
            let x0 = rng.random_range(0..=(n - w as usize)) as f64;
            let y0 = rng.random_range(0..=(n - h as usize)) as f64;
            let bbox = BBox::new(x0, y0, x0 + w, y0 + h);
            let clash = gts.iter().any(|g| {
                let inter = g.bbox.intersection(&bbox);
                iou(&g.bbox, &bbox) > 0.1 || inter > 0.3 * g.bbox.area().min(bbox.area())
            });
            if clash {
                continue;
            }
            let kind = if rng.random_bool(0.5) { RECT } else { ELLIPSE };
            let colour: [f32; 3] = loop {
                let c: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
                let dist: f32 = c.iter().zip(&base).map(|(a, b)| (a - b).abs()).sum();
                if dist > 0.6 {
                    break c;
                }
            };
            paint(&mut data, n, &bbox, kind, colour);
            gts.push(GtInstance::new(bbox, kind));
            break;
        }
    }
    let image = Tensor4::new([1, 3, n, n], data).expect("dims match buffer");
    (image, gts)
}

fn paint(data: &mut [f32], n: usize, b: &BBox, kind: u32, colour: [f32; 3]) {
    let (cx, cy) = b.center();
    let (rx, ry) = (b.width() / 2.0, b.height() / 2.0);
    for y in b.y0 as usize..b.y1 as usize {
        for x in b.x0 as usize..b.x1 as usize {
            if kind == ELLIPSE {
                let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
                if dx * dx + dy * dy > 1.0 {
                    continue;
                }
            }
            for (c, &v) in colour.iter().enumerate() {
                data[(c * n + y) * n + x] = v;
            }
        }
    }
}

/// A contiguous slice of a synthetic dataset, generated on demand.
#[derive(Clone, Debug)]
pub struct SynthSource {
    pub cfg: SynthConfig,
    pub offset: u64,
    pub count: usize,
}

impl SynthSource {
    pub fn new(cfg: SynthConfig, offset: u64, count: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, offset, count })
    }
}

impl ImageSource for SynthSource {
    fn len(&self) -> usize {
        self.count
    }

    fn get(&self, index: usize) -> Result<(Tensor4<f32>, Vec<GtInstance>)> {
        Ok(synth_image(&self.cfg, self.offset + index as u64))
    }

    fn id(&self, index: usize) -> u64 {
        self.offset + index as u64
    }
}

/// Materialises a source as `img<id>.pft` files plus `annotations.json`.
pub fn write_synth_dataset(dir: impl AsRef<Path>, source: &SynthSource) -> Result<Annotations> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut images = Vec::with_capacity(source.len());
    for i in 0..source.len() {
        let (img, gts) = source.get(i)?;
        let id = source.id(i);
        let file_name = format!("img{id:06}.pft");
        save_pft(dir.join(&file_name), &img)?;
        images.push(AnnotatedImage { record: ImageRecord::new(id, file_name, img.width(), img.height()), gts });
    }
    let ann = Annotations { images, rejected: 0 };
    std::fs::write(dir.join("annotations.json"), emit_coco(&ann))?;
    Ok(ann)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_index() {
        let cfg = SynthConfig::default();
        let (a, ga) = synth_image(&cfg, 3);
        let (b, gb) = synth_image(&cfg, 3);
        assert_eq!(a.data(), b.data());
        assert_eq!(ga, gb);
        assert_ne!(synth_image(&cfg, 4).0.data(), a.data());
    }

    #[test]
    fn every_image_has_a_shape_inside() {
        let cfg = SynthConfig::default();
        for i in 0..100 {
            let (img, gts) = synth_image(&cfg, i);
            assert!(!gts.is_empty() && gts.len() <= cfg.max_shapes);
            assert!(img.is_finite());
            for g in &gts {
                assert!(g.bbox.inside(128.0, 128.0) && g.bbox.width() >= 8.0 && g.bbox.height() >= 8.0);
            }
        }
    }

    #[test]
    fn areas_span_all_strata() {
        let cfg = SynthConfig::default();
        let mut census = [0usize; 3];
        for i in 0..100 {
            for g in synth_image(&cfg, i).1 {
                census[if g.area < 1024.0 {
                    0
                } else if g.area < 9216.0 {
                    1
                } else {
                    2
                }] += 1;
            }
        }
        assert!(census.iter().all(|&c| c > 0), "{census:?}");
    }

    #[test]
    fn shapes_are_painted() {
        let cfg = SynthConfig { min_shapes: 1, max_shapes: 1, ..Default::default() };
        let (img, gts) = synth_image(&cfg, 0);
        let b = gts[0].bbox;
        let (cx, cy) = b.center();
        let centre: Vec<f32> = (0..3).map(|c| img.at(0, c, cy as usize, cx as usize)).collect();
        let inner: Vec<f32> = (0..3).map(|c| img.at(0, c, cy as usize, cx as usize + 1)).collect();
        assert_eq!(centre, inner);
    }
}
