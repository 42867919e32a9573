//! Annotations, image files, transforms and the synthetic shapes dataset.

mod coco;
mod synth;
mod transform;
mod voc;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchors::BBox;
use crate::error::{Error, Result};
use crate::tensor::{load_pft, Tensor4};

pub use coco::{emit_coco, parse_coco};
pub use synth::{synth_image, write_synth_dataset, SynthConfig, SynthSource};
pub use transform::{pad_to_multiple, resize_bilinear, transform_test_pad, transform_train, TrainMode, Transform};
pub use voc::{emit_voc, parse_voc, VOC_CLASSES};

/// One ground-truth object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtInstance {
    pub bbox: BBox,
    pub category: u32,
    /// Region of many overlapping instances; neither rewarded nor penalised.
    pub crowd: bool,
    /// VOC `difficult` flag; ignored in evaluation by default.
    pub difficult: bool,
    /// Pixel area; the box area unless the source supplied one.
    pub area: f64,
}

impl GtInstance {
    pub fn new(bbox: BBox, category: u32) -> Self {
        Self { bbox, category, crowd: false, difficult: false, area: bbox.area() }
    }

    pub fn crowd(mut self) -> Self {
        self.crowd = true;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    pub transform: Transform,
}

impl ImageRecord {
    pub fn new(id: u64, file_name: impl Into<String>, width: usize, height: usize) -> Self {
        Self { id, file_name: file_name.into(), width, height, transform: Transform::identity(width, height) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedImage {
    pub record: ImageRecord,
    pub gts: Vec<GtInstance>,
}

/// A parsed annotation file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Annotations {
    pub images: Vec<AnnotatedImage>,
    /// Records dropped while parsing (negative sizes, dangling references).
    pub rejected: usize,
}

impl Annotations {
    pub fn find(&self, id: u64) -> Option<&AnnotatedImage> {
        self.images.iter().find(|i| i.record.id == id)
    }
}

/// Anything that yields training or evaluation images with their objects.
pub trait ImageSource: Sync {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<(Tensor4<f32>, Vec<GtInstance>)>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Stable id of an image, used in proposal manifests.
    fn id(&self, index: usize) -> u64 {
        index as u64
    }
}

/// Images on disk described by a COCO-style annotation file. Paths are
/// resolved relative to `root`.
pub struct DirSource {
    pub root: std::path::PathBuf,
    pub annotations: Annotations,
}

impl DirSource {
    pub fn open(annotation_file: impl AsRef<Path>) -> Result<Self> {
        let path = annotation_file.as_ref();
        let bytes = std::fs::read(path)?;
        let annotations = parse_coco(&bytes).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse { path: path.display().to_string(), message },
            e => e,
        })?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, annotations })
    }
}

impl ImageSource for DirSource {
    fn len(&self) -> usize {
        self.annotations.images.len()
    }

    fn get(&self, index: usize) -> Result<(Tensor4<f32>, Vec<GtInstance>)> {
        let img = &self.annotations.images[index];
        let t = load_image(self.root.join(&img.record.file_name))?;
        Ok((t, img.gts.clone()))
    }

    fn id(&self, index: usize) -> u64 {
        self.annotations.images[index].record.id
    }
}

/// Loads a `.pft` tensor or a binary `.ppm` image as `(1, 3, h, w)` in `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor4<f32>> {
    let path = path.as_ref();
    let t = match path.extension().and_then(|e| e.to_str()) {
        Some("pft") => load_pft(path)?,
        Some("ppm") => read_ppm(&std::fs::read(path)?)
            .map_err(|e| Error::Parse { path: path.display().to_string(), message: e.to_string() })?,
        _ => return Err(Error::InvalidArgument(format!("unsupported image file {}", path.display()))),
    };
    if t.batch() != 1 || t.channels() != 3 {
        return Err(Error::InvalidArgument(format!(
            "{}: expected a 1x3xHxW image, got {:?}",
            path.display(),
            t.dims()
        )));
    }
    Ok(t)
}

/// Parses a binary (P6) PPM with 8-bit samples.
pub fn read_ppm(bytes: &[u8]) -> Result<Tensor4<f32>> {
    let bad = |m: &str| Error::Parse { path: "<ppm>".into(), message: m.to_string() };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?.to_string());
    }
    if fields[0] != "P6" {
        return Err(bad("only binary P6 images are supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit samples are supported"));
    }
    let pixels = &bytes[(pos + 1).min(bytes.len())..];
    if pixels.len() < w * h * 3 {
        return Err(bad("truncated pixel data"));
    }
    Ok(Tensor4::from_fn([1, 3, h, w], |[_, c, y, x]| pixels[(y * w + x) * 3 + c] as f32 / 255.0))
}

/// Writes `(1, 3, h, w)` values in `[0, 1]` as a binary PPM.
pub fn write_ppm(image: &Tensor4<f32>) -> Result<Vec<u8>> {
    let [n, c, h, w] = image.dims();
    if n != 1 || c != 3 {
        return Err(Error::InvalidArgument(format!("write_ppm: expected 1x3xHxW, got {:?}", image.dims())));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                out.push((image.at(0, ch, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let img = Tensor4::from_fn([1, 3, 5, 7], |[_, c, y, x]| ((c * 50 + y * 7 + x) % 256) as f32 / 255.0);
        let bytes = write_ppm(&img).unwrap();
        assert_eq!(read_ppm(&bytes).unwrap(), img);
    }

    #[test]
    fn ppm_rejects_garbage() {
        assert!(read_ppm(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(read_ppm(b"P6\n4 4\n255\n\x00\x01").is_err());
        assert!(read_ppm(b"").is_err());
    }
}
