//! COCO-style JSON annotations.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{AnnotatedImage, Annotations, GtInstance, ImageRecord};
use crate::anchors::BBox;
use crate::error::{Error, Result};

#[derive(Deserialize, Serialize)]
struct Doc {
    images: Vec<Image>,
    annotations: Vec<Ann>,
}

#[derive(Deserialize, Serialize)]
struct Image {
    id: u64,
    width: usize,
    height: usize,
    #[serde(default)]
    file_name: String,
}

#[derive(Deserialize, Serialize)]
struct Ann {
    image_id: u64,
    /// `[x, y, w, h]`.
    bbox: [f64; 4],
    #[serde(default)]
    category_id: u32,
    #[serde(default)]
    iscrowd: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    area: Option<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    difficult: bool,
}

/// Parses a COCO-style document. Boxes become corner form; `iscrowd` and
/// `area` are honoured; unknown fields are ignored. Annotations with negative
/// sizes or unknown image ids are dropped and counted in `rejected`.
pub fn parse_coco(bytes: &[u8]) -> Result<Annotations> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    let doc: Doc = serde_path_to_error::deserialize(de)
        .map_err(|e| Error::Parse { path: e.path().to_string(), message: e.inner().to_string() })?;
    let mut images: Vec<AnnotatedImage> = doc
        .images
        .into_iter()
        .map(|i| AnnotatedImage { record: ImageRecord::new(i.id, i.file_name, i.width, i.height), gts: Vec::new() })
        .collect();
    let index: HashMap<u64, usize> = images.iter().enumerate().map(|(i, im)| (im.record.id, i)).collect();
    let mut rejected = 0;
    for a in doc.annotations {
        let [x, y, w, h] = a.bbox;
        let ok = [x, y, w, h].iter().all(|v| v.is_finite()) && w >= 0.0 && h >= 0.0;
        match index.get(&a.image_id) {
            Some(&i) if ok => {
                let bbox = BBox::new(x, y, x + w, y + h);
                images[i].gts.push(GtInstance {
                    bbox,
                    category: a.category_id,
                    crowd: a.iscrowd != 0,
                    difficult: a.difficult,
                    area: a.area.unwrap_or(w * h),
                });
            }
            _ => rejected += 1,
        }
    }
    Ok(Annotations { images, rejected })
}

/// Serialises annotations in the form [`parse_coco`] reads.
pub fn emit_coco(ann: &Annotations) -> String {
    let doc = Doc {
        images: ann
            .images
            .iter()
            .map(|i| Image {
                id: i.record.id,
                width: i.record.width,
                height: i.record.height,
                file_name: i.record.file_name.clone(),
            })
            .collect(),
        annotations: ann
            .images
            .iter()
            .flat_map(|i| {
                i.gts.iter().map(move |g| Ann {
                    image_id: i.record.id,
                    bbox: [g.bbox.x0, g.bbox.y0, g.bbox.width(), g.bbox.height()],
                    category_id: g.category,
                    iscrowd: g.crowd as u8,
                    area: Some(g.area),
                    difficult: g.difficult,
                })
            })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).expect("annotations serialise")
}
