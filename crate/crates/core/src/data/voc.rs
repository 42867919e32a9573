//! Pascal VOC-style XML annotations.
//!
//! VOC corners are 1-based and inclusive; they map to 0-based half-open
//! boxes as `[xmin − 1, xmax) × [ymin − 1, ymax)`.

use roxmltree::{Document, Node};

use super::{AnnotatedImage, GtInstance, ImageRecord};
use crate::anchors::BBox;
use crate::error::{Error, Result};

pub const VOC_CLASSES: [&str; 20] = [
    "aeroplane",
    "bicycle",
    "bird",
    "boat",
    "bottle",
    "bus",
    "car",
    "cat",
    "chair",
    "cow",
    "diningtable",
    "dog",
    "horse",
    "motorbike",
    "person",
    "pottedplant",
    "sheep",
    "sofa",
    "train",
    "tvmonitor",
];

fn err(path: &str, message: impl Into<String>) -> Error {
    Error::Parse { path: path.to_string(), message: message.into() }
}

fn child<'a>(node: Node<'a, 'a>, name: &str, path: &str) -> Result<Node<'a, 'a>> {
    node.children().find(|c| c.has_tag_name(name)).ok_or_else(|| err(path, format!("missing <{name}>")))
}

fn text<'a>(node: Node<'a, 'a>, name: &str, path: &str) -> Result<&'a str> {
    Ok(child(node, name, path)?.text().unwrap_or("").trim())
}

fn number(node: Node<'_, '_>, name: &str, path: &str) -> Result<f64> {
    let s = text(node, name, path)?;
    s.parse::<f64>().map_err(|_| err(&format!("{path}.{name}"), format!("`{s}` is not a number")))
}

/// Parses one VOC annotation file. Category ids are 1-based indices into
/// [`VOC_CLASSES`].
pub fn parse_voc(xml: &[u8], id: u64) -> Result<AnnotatedImage> {
    let s = std::str::from_utf8(xml).map_err(|_| err("annotation", "not UTF-8"))?;
    let doc = Document::parse(s).map_err(|e| err("annotation", e.to_string()))?;
    let root = doc.root_element();
    if !root.has_tag_name("annotation") {
        return Err(err("annotation", format!("root element is <{}>", root.tag_name().name())));
    }
    let file_name = root.children().find(|c| c.has_tag_name("filename")).and_then(|n| n.text()).unwrap_or("").trim();
    let size = child(root, "size", "annotation")?;
    let width = number(size, "width", "annotation.size")? as usize;
    let height = number(size, "height", "annotation.size")? as usize;
    let mut gts = Vec::new();
    for (i, obj) in root.children().filter(|c| c.has_tag_name("object")).enumerate() {
        let path = format!("annotation.object[{i}]");
        let name = text(obj, "name", &path)?;
        let category = VOC_CLASSES
            .iter()
            .position(|c| *c == name)
            .ok_or_else(|| err(&format!("{path}.name"), format!("unknown class `{name}`")))?;
        let difficult = match obj.children().find(|c| c.has_tag_name("difficult")) {
            Some(d) => d.text().map(str::trim) == Some("1"),
            None => false,
        };
        let bpath = format!("{path}.bndbox");
        let b = child(obj, "bndbox", &path)?;
        let (xmin, ymin) = (number(b, "xmin", &bpath)?, number(b, "ymin", &bpath)?);
        let (xmax, ymax) = (number(b, "xmax", &bpath)?, number(b, "ymax", &bpath)?);
        if xmax < xmin || ymax < ymin {
            return Err(err(&bpath, "inverted corners"));
        }
        let bbox = BBox::new(xmin - 1.0, ymin - 1.0, xmax, ymax);
        gts.push(GtInstance { bbox, category: category as u32 + 1, crowd: false, difficult, area: bbox.area() });
    }
    Ok(AnnotatedImage { record: ImageRecord::new(id, file_name, width, height), gts })
}

/// Serialises one image in the form [`parse_voc`] reads.
pub fn emit_voc(image: &AnnotatedImage) -> Result<String> {
    let r = &image.record;
    let mut s = format!(
        "<annotation>\n  <filename>{}</filename>\n  <size><width>{}</width><height>{}</height><depth>3</depth></size>\n",
        r.file_name, r.width, r.height
    );
    for g in &image.gts {
        let name = (g.category as usize)
            .checked_sub(1)
            .and_then(|i| VOC_CLASSES.get(i))
            .ok_or_else(|| Error::InvalidArgument(format!("category {} is not a VOC class", g.category)))?;
        s.push_str(&format!(
            "  <object>\n    <name>{name}</name>\n    <difficult>{}</difficult>\n    <bndbox><xmin>{}</xmin><ymin>{}</ymin><xmax>{}</xmax><ymax>{}</ymax></bndbox>\n  </object>\n",
            g.difficult as u8,
            g.bbox.x0 + 1.0,
            g.bbox.y0 + 1.0,
            g.bbox.x1,
            g.bbox.y1
        ));
    }
    s.push_str("</annotation>\n");
    Ok(s)
}
