//! Short training run, proposals on held-out synthetic images, average
//! recall and an SVG of the curves.

use psrpn::arch::ParamSet;
use psrpn::config::RunConfig;
use psrpn::data::{transform_test_pad, ImageSource, SynthSource};
use psrpn::eval::{evaluate, plot_svg};
use psrpn::model::propose;
use psrpn::train::train;

fn main() -> psrpn::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.train.epochs = 6;
    let train_set = SynthSource::new(cfg.data.synth.clone(), 0, 96)?;
    let val = SynthSource::new(cfg.data.synth.clone(), 1000, 24)?;
    let init = ParamSet::init(&cfg.model.spec(), cfg.seed)?;
    let params = train(&train_set, &cfg.model, &cfg.train, init, cfg.seed, &mut |r| {
        println!("epoch {}  loss {:.5}", r.epoch, r.loss.total)
    })?
    .params;

    let mut items = Vec::new();
    for i in 0..val.len() {
        let (image, gts) = val.get(i)?;
        let (padded, _) = transform_test_pad(&image);
        let set = propose(&params, &cfg.model, &padded, image.width(), image.height(), &cfg.propose)?;
        items.push((set.proposals, gts));
    }
    let report = evaluate(&items, &cfg.eval, &cfg.hash());
    print!("{}", report.render());
    let path = std::env::temp_dir().join("psrpn-curves.svg");
    std::fs::write(&path, plot_svg(&report))?;
    println!("curves in {}", path.display());
    Ok(())
}
