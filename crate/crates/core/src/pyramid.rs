//! Encoder feature maps E2..E5 and the top-down decoder D2..D6.

use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, Forward, LayerRecord};
use crate::error::{shape_err, Error, Result};
use crate::graph::Var;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EncoderSpec {
    /// Small trainable encoder: two stride-2 CBR3 blocks reach E2, then one
    /// stride-2 CBR3 per stage.
    Toy { widths: [usize; 4] },
    /// ResNet-50 layer graph, used for parameter counting only.
    Resnet50Graph,
}

impl EncoderSpec {
    /// Channel widths of E2..E5.
    pub fn widths(&self) -> [usize; 4] {
        match self {
            EncoderSpec::Toy { widths } => *widths,
            EncoderSpec::Resnet50Graph => [256, 512, 1024, 2048],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PyramidConfig {
    /// Strides of D2..D6.
    pub strides: Vec<usize>,
    pub decoder_channels: usize,
    pub encoder: EncoderSpec,
    /// Emit D6 by 2x2 average pooling of D5.
    pub use_d6: bool,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            strides: vec![4, 8, 16, 32, 64],
            decoder_channels: 256,
            encoder: EncoderSpec::Toy { widths: [64, 128, 256, 512] },
            use_d6: true,
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        let expect_len = if self.use_d6 { 5 } else { 4 };
        if self.strides.len() != expect_len || self.strides[0] != 4 {
            return Err(Error::Config(format!(
                "pyramid strides must start at 4 with {expect_len} levels, got {:?}",
                self.strides
            )));
        }
        if self.strides.windows(2).any(|w| w[1] != 2 * w[0]) {
            return Err(Error::Config(format!("pyramid strides must double per level: {:?}", self.strides)));
        }
        if self.decoder_channels == 0 {
            return Err(Error::Config("decoder_channels must be positive".into()));
        }
        if self.encoder.widths().contains(&0) {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        Ok(())
    }

    pub fn max_stride(&self) -> usize {
        *self.strides.last().unwrap_or(&1)
    }

    pub fn levels(&self) -> usize {
        self.strides.len()
    }
}

pub fn toy_encoder_spec(widths: [usize; 4]) -> ArchSpec {
    let mut s = ArchSpec::new();
    s.push(LayerRecord::cbr("enc.stem1", 3, 3, widths[0]).strided(2));
    s.push(LayerRecord::cbr("enc.stem2", 3, widths[0], widths[0]).strided(2));
    for (i, pair) in widths.windows(2).enumerate() {
        s.push(LayerRecord::cbr(format!("enc.stage{}", i + 3), 3, pair[0], pair[1]).strided(2));
    }
    s
}

/// ResNet-50 without the average pool and classifier, bottleneck blocks
/// [3, 4, 6, 3]. conv1 is counted although the pyramid starts at E2.
pub fn resnet50_spec() -> ArchSpec {
    let mut s = ArchSpec::new();
    s.push(LayerRecord::cbr("resnet.conv1", 7, 3, 64).strided(2));
    let mut in_ch = 64;
    for (stage, (blocks, width, stride)) in [(3, 64, 1), (4, 128, 2), (6, 256, 2), (3, 512, 2)].into_iter().enumerate()
    {
        for b in 0..blocks {
            let p = format!("resnet.layer{}.{}", stage + 1, b);
            let st = if b == 0 { stride } else { 1 };
            s.push(LayerRecord::cbr(format!("{p}.conv1"), 1, in_ch, width));
            s.push(LayerRecord::cbr(format!("{p}.conv2"), 3, width, width).strided(st));
            s.push(LayerRecord::cb(format!("{p}.conv3"), 1, width, 4 * width));
            if b == 0 {
                s.push(LayerRecord::cb(format!("{p}.downsample"), 1, in_ch, 4 * width).strided(st));
            }
            in_ch = 4 * width;
        }
    }
    s
}

pub fn encoder_spec(enc: &EncoderSpec) -> ArchSpec {
    match enc {
        EncoderSpec::Toy { widths } => toy_encoder_spec(*widths),
        EncoderSpec::Resnet50Graph => resnet50_spec(),
    }
}

/// CBR1 selection of E5, a CBR1 skip per lower level, and a de-aliasing CBR3
/// after each upsample-and-add. D6 has no parameters.
pub fn decoder_spec(encoder_widths: [usize; 4], channels: usize) -> ArchSpec {
    let mut s = ArchSpec::new();
    s.push(LayerRecord::cbr("dec.lat5", 1, encoder_widths[3], channels));
    for level in (2..=4).rev() {
        s.push(LayerRecord::cbr(format!("dec.skip{level}"), 1, encoder_widths[level - 2], channels));
        s.push(LayerRecord::cbr(format!("dec.smooth{level}"), 3, channels, channels));
    }
    s
}

pub fn pyramid_spec(cfg: &PyramidConfig) -> ArchSpec {
    let mut s = encoder_spec(&cfg.encoder);
    s.extend(decoder_spec(cfg.encoder.widths(), cfg.decoder_channels));
    s
}

/// Runs the toy encoder. The image must have height and width divisible by 64.
pub fn encode<T: Real>(fwd: &mut Forward<'_, T>, image: Var, cfg: &PyramidConfig) -> Result<[Var; 4]> {
    let [_, c, h, w] = fwd.tape.value(image).dims();
    if c != 3 {
        return shape_err(format!("encode: expected 3 image channels, got {c}"));
    }
    let m = 64;
    if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
        return shape_err(format!("encode: image {h}x{w} is not a multiple of {m}; pad it first"));
    }
    if cfg.encoder == EncoderSpec::Resnet50Graph {
        return Err(Error::Config("the ResNet-50 graph is for parameter counting only".into()));
    }
    let x = fwd.layer("enc.stem1", image)?;
    let e2 = fwd.layer("enc.stem2", x)?;
    let e3 = fwd.layer("enc.stage3", e2)?;
    let e4 = fwd.layer("enc.stage4", e3)?;
    let e5 = fwd.layer("enc.stage5", e4)?;
    Ok([e2, e3, e4, e5])
}

/// Top-down decoding; returns D2..D5 and, when configured, D6.
pub fn decode<T: Real>(fwd: &mut Forward<'_, T>, e: [Var; 4], cfg: &PyramidConfig) -> Result<Vec<Var>> {
    for (i, pair) in e.windows(2).enumerate() {
        let (a, b) = (fwd.tape.value(pair[0]).dims(), fwd.tape.value(pair[1]).dims());
        if a[2] != 2 * b[2] || a[3] != 2 * b[3] {
            return shape_err(format!("decode: E{} {:?} is not twice E{} {:?}", i + 2, a, i + 3, b));
        }
    }
    let mut d = vec![fwd.layer("dec.lat5", e[3])?];
    for level in (2..=4).rev() {
        let up = fwd.tape.upsample2x(*d.last().unwrap())?;
        let skip = fwd.layer(&format!("dec.skip{level}"), e[level - 2])?;
        let sum = fwd.tape.add(up, skip)?;
        d.push(fwd.layer(&format!("dec.smooth{level}"), sum)?);
    }
    d.reverse();
    if cfg.use_d6 {
        let d6 = fwd.tape.avg_downsample2x(d[3])?;
        d.push(d6);
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{BnConfig, ParamSet};
    use crate::graph::Tape;
    use crate::tensor::Tensor4;

    fn toy_cfg(widths: [usize; 4], c: usize) -> PyramidConfig {
        PyramidConfig { decoder_channels: c, encoder: EncoderSpec::Toy { widths }, ..Default::default() }
    }

    #[test]
    fn resnet50_count_is_standard() {
        // torchvision's 25,557,032 minus the 2,049,000-parameter classifier.
        assert_eq!(resnet50_spec().count_params().total, 23_508_032);
    }

    #[test]
    fn decoder_count() {
        let c = decoder_spec([256, 512, 1024, 2048], 256).count_params();
        assert_eq!(c.under("dec.lat"), 2048 * 256 + 512);
        assert_eq!(c.under("dec.smooth"), 3 * 590_336);
    }

    #[test]
    fn config_validation() {
        assert!(PyramidConfig::default().validate().is_ok());
        let mut bad = PyramidConfig { strides: vec![4, 8, 12, 32, 64], ..Default::default() };
        assert!(bad.validate().is_err());
        bad = PyramidConfig { decoder_channels: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn level_dims_follow_strides() {
        let cfg = toy_cfg([4, 4, 4, 4], 4);
        let params = ParamSet::<f32>::init(&pyramid_spec(&cfg), 1).unwrap();
        let mut tape = Tape::new();
        let img = tape.constant(Tensor4::full([1, 3, 64, 128], 0.5));
        let mut fwd = Forward::new(&mut tape, &params, true, BnConfig::default());
        let e = encode(&mut fwd, img, &cfg).unwrap();
        assert_eq!(fwd.tape.value(e[3]).dims(), [1, 4, 2, 4]);
        let d = decode(&mut fwd, e, &cfg).unwrap();
        let dims: Vec<_> = d.iter().map(|&v| fwd.tape.value(v).dims()).collect();
        assert_eq!(dims, vec![[1, 4, 16, 32], [1, 4, 8, 16], [1, 4, 4, 8], [1, 4, 2, 4], [1, 4, 1, 2]]);
    }

    #[test]
    fn d6_is_pooled_d5_and_optional() {
        let run = |use_d6: bool| {
            let strides = if use_d6 { vec![4, 8, 16, 32, 64] } else { vec![4, 8, 16, 32] };
            let cfg = PyramidConfig { use_d6, strides, ..toy_cfg([3, 4, 4, 5], 3) };
            cfg.validate().unwrap();
            let params = ParamSet::<f64>::init(&pyramid_spec(&cfg), 2).unwrap();
            let mut tape = Tape::new();
            let img =
                tape.constant(Tensor4::from_fn([1, 3, 64, 64], |[_, c, y, x]| ((c + 2 * y + 3 * x) % 7) as f64 / 7.0));
            let mut fwd = Forward::new(&mut tape, &params, false, BnConfig::default());
            let e = encode(&mut fwd, img, &cfg).unwrap();
            let d = decode(&mut fwd, e, &cfg).unwrap();
            d.iter().map(|&v| fwd.tape.value(v).clone()).collect::<Vec<_>>()
        };
        let with = run(true);
        let without = run(false);
        assert_eq!((with.len(), without.len()), (5, 4));
        assert_eq!(&with[..4], &without[..]);
        assert_eq!(with[4], crate::ops::avg_downsample2x(&with[3]).unwrap());
    }

    #[test]
    fn rejects_unpadded_image() {
        let cfg = toy_cfg([4, 4, 4, 4], 4);
        let params = ParamSet::<f32>::init(&pyramid_spec(&cfg), 1).unwrap();
        let mut tape = Tape::new();
        let img = tape.constant(Tensor4::zeros([1, 3, 96, 64]));
        let mut fwd = Forward::new(&mut tape, &params, false, BnConfig::default());
        assert!(encode(&mut fwd, img, &cfg).is_err());
    }
}
