//! The evaluation protocol on hand-made fixtures: ground truth fed back as
//! proposals, jittered proposals and an empty proposal set.

use psrpn::anchors::BBox;
use psrpn::data::GtInstance;
use psrpn::eval::{evaluate, EvalConfig, Proposal};

fn main() {
    let gts = vec![
        GtInstance::new(BBox::new(10.0, 10.0, 30.0, 40.0), 1),
        GtInstance::new(BBox::new(50.0, 20.0, 120.0, 90.0), 2),
    ];
    let as_props = |shift: f64| -> Vec<Proposal> {
        gts.iter()
            .enumerate()
            .map(|(i, g)| Proposal { bbox: g.bbox.translated(shift, shift), score: 1.0 - 0.1 * i as f64, level: 0 })
            .collect()
    };
    let cfg = EvalConfig::default();
    for (name, props) in [("ground truth", as_props(0.0)), ("shifted by 2px", as_props(2.0)), ("empty", Vec::new())] {
        let report = evaluate(&[(props, gts.clone())], &cfg, "fixture");
        println!("{name}:\n{}", report.render());
    }
}
