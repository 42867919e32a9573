//! Writes a few synthetic images with COCO annotations, reads them back and
//! round-trips one image through Pascal VOC XML.

use psrpn::data::{emit_voc, parse_voc, write_synth_dataset, DirSource, ImageSource, SynthConfig, SynthSource};

fn main() -> psrpn::Result<()> {
    let dir = std::env::temp_dir().join("psrpn-dataset-io");
    let source = SynthSource::new(SynthConfig::default(), 0, 4)?;
    let written = write_synth_dataset(&dir, &source)?;
    let read = DirSource::open(dir.join("annotations.json"))?;
    assert_eq!(read.annotations, written);
    for i in 0..read.len() {
        let (image, gts) = read.get(i)?;
        println!("image {} {:?}: {} objects", read.id(i), image.dims(), gts.len());
        for g in &gts {
            let b = g.bbox;
            println!("  category {} box ({}, {}) - ({}, {}) area {}", g.category, b.x0, b.y0, b.x1, b.y1, g.area);
        }
    }
    let first = &written.images[0];
    let xml = emit_voc(first)?;
    let back = parse_voc(xml.as_bytes(), first.record.id)?;
    println!("voc round trip preserves {} boxes: {}", back.gts.len(), back.gts.len() == first.gts.len());
    println!("files in {}", dir.display());
    Ok(())
}
