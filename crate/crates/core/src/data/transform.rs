//! Resize, pad and crop transforms with invertible box mappings.
//!
//! Padding is always added on the right and bottom, so a transform maps
//! `x ↦ x·scale − crop_x` (likewise for y).

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::GtInstance;
use crate::anchors::BBox;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor4};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub scale: f64,
    /// Crop origin `(x, y)` in rescaled pixels.
    pub crop: [usize; 2],
    /// Zero padding `(right, bottom)`.
    pub pad: [usize; 2],
    pub out_width: usize,
    pub out_height: usize,
}

impl Transform {
    pub fn identity(width: usize, height: usize) -> Self {
        Self { scale: 1.0, crop: [0, 0], pad: [0, 0], out_width: width, out_height: height }
    }

    pub fn apply(&self, b: &BBox) -> BBox {
        let (cx, cy) = (self.crop[0] as f64, self.crop[1] as f64);
        BBox::new(b.x0 * self.scale - cx, b.y0 * self.scale - cy, b.x1 * self.scale - cx, b.y1 * self.scale - cy)
    }

    pub fn invert(&self, b: &BBox) -> BBox {
        let (cx, cy) = (self.crop[0] as f64, self.crop[1] as f64);
        BBox::new(
            (b.x0 + cx) / self.scale,
            (b.y0 + cy) / self.scale,
            (b.x1 + cx) / self.scale,
            (b.y1 + cy) / self.scale,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    /// Long side to 640, zero-pad the short side to 640 × 640.
    #[serde(rename = "voc-640")]
    Voc640,
    /// Short side to 768, random crop of the long side to 768 × 768.
    #[serde(rename = "coco-768")]
    Coco768,
}

impl FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "voc-640" => Ok(TrainMode::Voc640),
            "coco-768" => Ok(TrainMode::Coco768),
            _ => Err(Error::InvalidArgument(format!("unknown transform mode `{s}`"))),
        }
    }
}

/// Bilinear resize with half-pixel centres.
pub fn resize_bilinear<T: Real>(x: &Tensor4<T>, oh: usize, ow: usize) -> Tensor4<T> {
    let [n, c, h, w] = x.dims();
    if (oh, ow) == (h, w) {
        return x.clone();
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, T)> {
        let ratio = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, T::of(src - lo as f64))
            })
            .collect()
    };
    let ys = axis(oh, h);
    let xs = axis(ow, w);
    Tensor4::from_fn([n, c, oh, ow], |[b, ch, y, xx]| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[xx];
        let p = x.plane(b, ch);
        let top = p[y0 * w + x0] * (T::one() - fx) + p[y0 * w + x1] * fx;
        let bot = p[y1 * w + x0] * (T::one() - fx) + p[y1 * w + x1] * fx;
        top * (T::one() - fy) + bot * fy
    })
}

/// Copies the window `[x0, x0 + ow) × [y0, y0 + oh)`, zero outside the source.
fn crop_pad<T: Real>(x: &Tensor4<T>, x0: usize, y0: usize, oh: usize, ow: usize) -> Tensor4<T> {
    let [n, c, h, w] = x.dims();
    Tensor4::from_fn([n, c, oh, ow], |[b, ch, y, xx]| {
        let (sy, sx) = (y + y0, xx + x0);
        if sy < h && sx < w {
            x.at(b, ch, sy, sx)
        } else {
            T::zero()
        }
    })
}

fn map_gts(gts: &[GtInstance], t: &Transform) -> Vec<GtInstance> {
    let (w, h) = (t.out_width as f64, t.out_height as f64);
    gts.iter()
        .filter_map(|g| {
            let full = t.apply(&g.bbox);
            let clipped = BBox::new(full.x0.max(0.0), full.y0.max(0.0), full.x1.min(w), full.y1.min(h));
            if !clipped.is_valid() {
                return None;
            }
            let kept = if full.area() > 0.0 { clipped.area() / full.area() } else { 1.0 };
            Some(GtInstance { bbox: clipped, area: g.area * t.scale * t.scale * kept, ..g.clone() })
        })
        .collect()
}

/// Rescales and pads or crops a `(1, c, h, w)` image for training. Boxes are
/// mapped alongside; boxes fully outside a crop are dropped and partially
/// outside ones clipped.
pub fn transform_train<T: Real>(
    image: &Tensor4<T>,
    gts: &[GtInstance],
    mode: TrainMode,
    seed: u64,
) -> Result<(Tensor4<T>, Vec<GtInstance>, Transform)> {
    let [_, _, h, w] = image.dims();
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument("transform_train: empty image".into()));
    }
    let (target, scale) = match mode {
        TrainMode::Voc640 => (640, 640.0 / h.max(w) as f64),
        TrainMode::Coco768 => (768, 768.0 / h.min(w) as f64),
    };
    let sh = ((h as f64 * scale).round() as usize).max(1);
    let sw = ((w as f64 * scale).round() as usize).max(1);
    let resized = resize_bilinear(image, sh, sw);
    let mut crop = [0, 0];
    if mode == TrainMode::Coco768 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        crop = [rng.random_range(0..=sw.saturating_sub(target)), rng.random_range(0..=sh.saturating_sub(target))];
    }
    let t = Transform {
        scale,
        crop,
        pad: [target.saturating_sub(sw), target.saturating_sub(sh)],
        out_width: target,
        out_height: target,
    };
    let out = crop_pad(&resized, crop[0], crop[1], target, target);
    Ok((out, map_gts(gts, &t), t))
}

/// Zero-pads right and bottom up to the next multiple of `m`.
pub fn pad_to_multiple<T: Real>(image: &Tensor4<T>, m: usize) -> (Tensor4<T>, Transform) {
    let [_, _, h, w] = image.dims();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let t = Transform { scale: 1.0, crop: [0, 0], pad: [pw - w, ph - h], out_width: pw, out_height: ph };
    (crop_pad(image, 0, 0, ph, pw), t)
}

/// Test-time padding to a multiple of the largest stride, 64.
pub fn transform_test_pad<T: Real>(image: &Tensor4<T>) -> (Tensor4<T>, Transform) {
    pad_to_multiple(image, 64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gt(x0: f64, y0: f64, x1: f64, y1: f64) -> GtInstance {
        GtInstance::new(BBox::new(x0, y0, x1, y1), 1)
    }

    #[test]
    fn square_voc_is_pure_scale() {
        let img = Tensor4::<f32>::full([1, 3, 320, 320], 0.5);
        let (out, gts, t) = transform_train(&img, &[gt(10.0, 20.0, 30.0, 40.0)], TrainMode::Voc640, 0).unwrap();
        assert_eq!(out.dims(), [1, 3, 640, 640]);
        assert_eq!((t.scale, t.pad), (2.0, [0, 0]));
        assert!(out.data().iter().all(|&v| (v - 0.5).abs() < 1e-6));
        assert_eq!(gts[0].bbox, BBox::new(20.0, 40.0, 60.0, 80.0));
        assert_eq!(gts[0].area, 1600.0);
    }

    #[test]
    fn wide_voc_pads_rows() {
        let img = Tensor4::<f32>::full([1, 3, 640, 1280], 1.0);
        let (out, _, t) = transform_train(&img, &[], TrainMode::Voc640, 0).unwrap();
        assert_eq!(t.scale, 0.5);
        assert_eq!(t.pad, [0, 320]);
        for y in [0, 319, 320, 639] {
            assert_eq!(out.at(0, 1, y, 5), if y < 320 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn coco_crop_is_seeded() {
        let img = Tensor4::<f32>::from_fn([1, 3, 300, 500], |[_, c, y, x]| (c + y + x) as f32);
        let gts: Vec<_> = (0..10).map(|i| gt(i as f64 * 45.0, 10.0, i as f64 * 45.0 + 60.0, 90.0)).collect();
        let a = transform_train(&img, &gts, TrainMode::Coco768, 9).unwrap();
        let b = transform_train(&img, &gts, TrainMode::Coco768, 9).unwrap();
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
        assert_eq!(a.0.dims(), [1, 3, 768, 768]);
        for g in &a.1 {
            assert!(g.bbox.inside(768.0, 768.0));
        }
        let seeds: std::collections::HashSet<_> =
            (0..20).map(|s| transform_train(&img, &gts, TrainMode::Coco768, s).unwrap().2.crop).collect();
        assert!(seeds.len() > 1);
    }

    #[test]
    fn test_padding() {
        let (out, t) = transform_test_pad(&Tensor4::<f32>::zeros([1, 3, 375, 500]));
        assert_eq!(out.dims(), [1, 3, 384, 512]);
        assert_eq!(t.pad, [12, 9]);
        let (same, _) = transform_test_pad(&Tensor4::<f32>::zeros([1, 3, 640, 640]));
        assert_eq!(same.dims(), [1, 3, 640, 640]);
    }

    proptest! {
        #[test]
        fn padded_dims_are_multiples(h in 1usize..300, w in 1usize..300) {
            let (out, _) = transform_test_pad(&Tensor4::<f32>::zeros([1, 1, h, w]));
            prop_assert_eq!(out.height() % 64, 0);
            prop_assert_eq!(out.width() % 64, 0);
            prop_assert!(out.height() - h < 64 && out.width() - w < 64);
        }

        #[test]
        fn transform_inverts(h in 50usize..900, w in 50usize..900, x in 0.0..40.0f64, y in 0.0..40.0f64, seed in 0u64..100) {
            for mode in [TrainMode::Voc640, TrainMode::Coco768] {
                let img = Tensor4::<f32>::zeros([1, 1, h, w]);
                let (_, _, t) = transform_train(&img, &[], mode, seed).unwrap();
                let b = BBox::new(x, y, x + 10.0, y + 7.5);
                let back = t.apply(&t.invert(&b));
                prop_assert!((back.x0 - b.x0).abs() < 0.5 && (back.y1 - b.y1).abs() < 0.5);
                let fwd = t.invert(&t.apply(&b));
                prop_assert!((fwd.x1 - b.x1).abs() < 0.5 && (fwd.y0 - b.y0).abs() < 0.5);
            }
        }
    }
}
