//! The `psrpn` command line. Exit codes: 0 success, 1 audit mismatch,
//! 2 input error.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::anchors::{audit, AnchorMode};
use crate::arch::ParamSet;
use crate::config::RunConfig;
use crate::data::{transform_test_pad, write_synth_dataset, DirSource, GtInstance, ImageSource, SynthSource};
use crate::error::{Error, Result};
use crate::eval::{evaluate, plot_svg, read_proposals, write_proposals, EvalReport, ProposalManifest};
use crate::gradsuite::{render_suite, run_suite, suite_config};
use crate::heads::{head_param_table, HeadConfig, HeadVariant};
use crate::model::propose;
use crate::train::{epochs_csv, load_checkpoint, save_checkpoint, train};

pub const EXIT_OK: u8 = 0;
pub const EXIT_MISMATCH: u8 = 1;
pub const EXIT_INPUT: u8 = 2;

const STRIDES: [usize; 5] = [4, 8, 16, 32, 64];
const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Parser)]
#[command(name = "psrpn", version, about = "Scale-invariant, position-sensitive region proposals")]
pub struct Cli {
    /// Run configuration (TOML); defaults apply to omitted keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-level anchor counts, checked against the published 640×640 numbers.
    Anchors {
        #[arg(long, default_value_t = 640)]
        size: usize,
        /// window | grid3 | grid5
        #[arg(long, default_value = "window")]
        mode: AnchorMode,
    },
    /// Parameter counts of the full-size heads and the structural identities.
    Params {
        /// Show only this variant's rows.
        #[arg(long)]
        variant: Option<HeadVariant>,
        /// Show only position-sensitive (true) or plain (false) rows.
        #[arg(long)]
        ps: Option<bool>,
    },
    /// Finite-difference gradient suite in f64.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        /// Run only cases whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
    },
    /// Trains on the configured data and writes a checkpoint.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        /// Training images: `annotations.json` or `synth:OFFSET:COUNT`.
        #[arg(long)]
        images: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Writes ranked proposals, one file per image, plus a manifest.
    Propose {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `annotations.json` or `synth:OFFSET:COUNT`.
        #[arg(long)]
        images: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scores a proposal directory against ground truth.
    Eval {
        /// Directory holding the proposal manifest.
        #[arg(long)]
        proposals: PathBuf,
        /// `annotations.json` or `synth:OFFSET:COUNT`.
        #[arg(long)]
        annotations: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Renders an evaluation report as SVG curves.
    Plot {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Materialises synthetic images and their annotation file.
    Synth {
        #[arg(long, default_value_t = 0)]
        offset: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses the process arguments, runs the command and returns the exit code.
pub fn main_with_args<I, S>(args: I, out: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_INPUT
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// An image set named on the command line.
pub fn open_images(spec: &str, cfg: &RunConfig) -> Result<Box<dyn ImageSource>> {
    if let Some(rest) = spec.strip_prefix("synth:") {
        let bad = || Error::InvalidArgument(format!("expected `synth:OFFSET:COUNT`, got `{spec}`"));
        let (o, c) = rest.split_once(':').ok_or_else(bad)?;
        let offset = o.parse().map_err(|_| bad())?;
        let count = c.parse().map_err(|_| bad())?;
        return Ok(Box::new(SynthSource::new(cfg.data.synth.clone(), offset, count)?));
    }
    Ok(Box::new(DirSource::open(spec)?))
}

/// Ground truth keyed by image id, without loading pixels where avoidable.
fn ground_truth(spec: &str, cfg: &RunConfig) -> Result<Vec<(u64, Vec<GtInstance>)>> {
    if spec.starts_with("synth:") {
        let src = open_images(spec, cfg)?;
        return (0..src.len()).map(|i| Ok((src.id(i), src.get(i)?.1))).collect();
    }
    let dir = DirSource::open(spec)?;
    Ok(dir.annotations.images.into_iter().map(|a| (a.record.id, a.gts)).collect())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<u8> {
    let cfg = load_config(cli)?;
    let hash = cfg.hash();
    match &cli.command {
        Command::Anchors { size, mode } => {
            if *size == 0 || size % STRIDES[STRIDES.len() - 1] != 0 {
                return Err(Error::InvalidArgument(format!("size {size} must be a positive multiple of 64")));
            }
            let a = audit(*size, *mode, &STRIDES);
            write!(out, "{}", a.render())?;
            Ok(if a.matches() { EXIT_OK } else { EXIT_MISMATCH })
        }
        Command::Params { variant, ps } => {
            let mut table = head_param_table(&HeadConfig::default());
            let holds = table.identities_hold();
            table
                .rows
                .retain(|r| variant.is_none_or(|v| v == r.variant) && ps.is_none_or(|p| p == r.position_sensitive));
            write!(out, "{}", table.render())?;
            Ok(if holds { EXIT_OK } else { EXIT_MISMATCH })
        }
        Command::Gradcheck { seeds, filter } => {
            if *seeds == 0 {
                return Err(Error::InvalidArgument("--seeds must be positive".into()));
            }
            let entries = run_suite(*seeds, &suite_config(), filter.as_deref())?;
            if entries.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "no gradient case matches `{}`",
                    filter.as_deref().unwrap_or("")
                )));
            }
            write!(out, "{}", render_suite(&entries))?;
            Ok(if entries.iter().all(|e| e.passed) { EXIT_OK } else { EXIT_MISMATCH })
        }
        Command::Train { epochs, images, out: dir } => {
            let mut cfg = cfg;
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            let hash = cfg.hash();
            let spec = images.clone().unwrap_or_else(|| format!("synth:0:{}", cfg.data.train_images));
            let source = open_images(&spec, &cfg)?;
            let init = ParamSet::<f32>::init(&cfg.model.spec(), cfg.seed)?;
            writeln!(out, "config {hash}: {} images, {} epochs", source.len(), cfg.train.epochs)?;
            let outcome = train(source.as_ref(), &cfg.model, &cfg.train, init, cfg.seed, &mut |r| {
                let _ = writeln!(
                    out,
                    "epoch {:>3}  lr {:.6}  loss {:.5}  positives {}  {:.1}s",
                    r.epoch, r.lr, r.loss.total, r.positives, r.seconds
                );
            })?;
            save_checkpoint(dir.join("checkpoint"), &cfg.model, &outcome.params, &hash)?;
            write_file(&dir.join("epochs.csv"), format!("# config {hash}\n{}", epochs_csv(&outcome.epochs)))?;
            write_file(&dir.join("config.toml"), cfg.to_toml())?;
            writeln!(out, "wrote {}", dir.display())?;
            Ok(EXIT_OK)
        }
        Command::Propose { checkpoint, images, out: dir } => {
            let (manifest, params) = load_checkpoint(checkpoint)?;
            let mut cfg = cfg;
            cfg.model = manifest.model;
            let hash = cfg.hash();
            let source = open_images(images, &cfg)?;
            std::fs::create_dir_all(dir)?;
            let mut entries = Vec::with_capacity(source.len());
            let mut clamped = 0;
            for i in 0..source.len() {
                let (image, _) = source.get(i)?;
                let (padded, _) = transform_test_pad(&image);
                let set = propose(&params, &cfg.model, &padded, image.width(), image.height(), &cfg.propose)?;
                clamped += set.clamped;
                let id = source.id(i);
                let file = format!("{id:06}.txt");
                write_proposals(dir.join(&file), &set.proposals)?;
                entries.push((id, file));
            }
            write_file(&dir.join(MANIFEST), ProposalManifest { config_hash: hash.clone(), entries }.render())?;
            writeln!(out, "config {hash}: proposals for {} images ({clamped} clamped deltas)", source.len())?;
            Ok(EXIT_OK)
        }
        Command::Eval { proposals, annotations, out: dir } => {
            let path = proposals.join(MANIFEST);
            let manifest = ProposalManifest::parse(&std::fs::read_to_string(&path)?)?;
            let gts = ground_truth(annotations, &cfg)?;
            if let Some((id, _)) = manifest.entries.iter().find(|(id, _)| !gts.iter().any(|(g, _)| g == id)) {
                return Err(Error::InvalidArgument(format!("proposals for image {id} have no annotation")));
            }
            // Images without a proposal file are scored with no proposals.
            let mut items = Vec::with_capacity(gts.len());
            for (id, g) in gts {
                let props = match manifest.entries.iter().find(|(m, _)| *m == id) {
                    Some((_, f)) => read_proposals(proposals.join(f))?,
                    None => Vec::new(),
                };
                items.push((props, g));
            }
            let report = evaluate(&items, &cfg.eval, &hash);
            std::fs::create_dir_all(dir)?;
            write_file(&dir.join("summary.csv"), report.summary_csv())?;
            write_file(&dir.join("curves.csv"), format!("# config {hash}\n{}", report.curves_csv()))?;
            write_file(&dir.join("report.json"), report.to_json())?;
            write!(out, "{}", report.render())?;
            Ok(EXIT_OK)
        }
        Command::Plot { report, out: path } => {
            let r = EvalReport::from_json(&std::fs::read_to_string(report)?)?;
            write_file(path, plot_svg(&r))?;
            writeln!(out, "wrote {}", path.display())?;
            Ok(EXIT_OK)
        }
        Command::Synth { offset, count, out: dir } => {
            let src = SynthSource::new(cfg.data.synth.clone(), *offset, *count)?;
            let ann = write_synth_dataset(dir, &src)?;
            writeln!(out, "wrote {} images to {}", ann.images.len(), dir.display())?;
            Ok(EXIT_OK)
        }
    }
}
