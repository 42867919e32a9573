//! Trains the desk-scale GCN-NS + PS model on a slice of the synthetic
//! shapes dataset and saves a checkpoint. Arguments: images, epochs.

use psrpn::arch::ParamSet;
use psrpn::config::RunConfig;
use psrpn::data::SynthSource;
use psrpn::train::{epochs_csv, save_checkpoint, train};

fn main() -> psrpn::Result<()> {
    let mut args = std::env::args().skip(1);
    let images = args.next().and_then(|s| s.parse().ok()).unwrap_or(64);
    let mut cfg = RunConfig::default();
    cfg.train.epochs = args.next().and_then(|s| s.parse().ok()).unwrap_or(4);
    let source = SynthSource::new(cfg.data.synth.clone(), 0, images)?;
    let init = ParamSet::init(&cfg.model.spec(), cfg.seed)?;
    let outcome = train(&source, &cfg.model, &cfg.train, init, cfg.seed, &mut |r| {
        println!("epoch {:>2}  lr {:.4}  loss {:.5}  ({:.1}s)", r.epoch, r.lr, r.loss.total, r.seconds)
    })?;
    let dir = std::env::temp_dir().join("psrpn-train-synthetic");
    save_checkpoint(dir.join("checkpoint"), &cfg.model, &outcome.params, &cfg.hash())?;
    std::fs::write(dir.join("epochs.csv"), epochs_csv(&outcome.epochs))?;
    println!("checkpoint in {}", dir.display());
    Ok(())
}
