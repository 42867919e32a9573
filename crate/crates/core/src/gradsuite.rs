//! The gradient suite: every tape op, composite blocks, all head variants
//! composed with pooling, and the loss, each checked over several seeds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchors::{generate_grid_anchors, generate_window_anchors, GridRatios, WindowProfile};
use crate::arch::{BnConfig, Forward, ParamSet};
use crate::assign::{loss_var, SampleTarget};
use crate::error::Result;
use crate::gradcheck::{gradcheck, GradcheckConfig, GradcheckReport};
use crate::graph::{BnMode, Tape, Var};
use crate::heads::{head_forward, head_spec, HeadConfig, HeadVariant};
use crate::ops::ConvGeom;
use crate::pspool::{pool_var, PoolMode, PoolSite};
use crate::pyramid::{decode, encode, pyramid_spec, EncoderSpec, PyramidConfig};
use crate::tensor::Tensor4;

type Case = fn(u64, &GradcheckConfig) -> Result<GradcheckReport>;
/// A named case, possibly capturing its head variant.
pub type NamedCase = (String, Box<dyn Fn(u64, &GradcheckConfig) -> Result<GradcheckReport>>);

/// Aggregate over seeds of one case.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub seeds: usize,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn rand_tensor(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    Tensor4::from_fn(dims, |_| rng.random_range(-1.0..1.0))
}

fn inputs(seed: u64, dims: &[[usize; 4]]) -> Vec<Tensor4<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    dims.iter().map(|&d| rand_tensor(d, &mut rng)).collect()
}

fn check(
    seed: u64,
    cfg: &GradcheckConfig,
    dims: &[[usize; 4]],
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<GradcheckReport> {
    gradcheck(&inputs(seed, dims), f, &GradcheckConfig { seed, ..cfg.clone() })
}

fn conv3(seed: u64, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    check(seed, cfg, &[[2, 3, 6, 5], [4, 3, 3, 3]], |t, v| t.conv2d(v[0], v[1], ConvGeom::same(3, 3)))
}

fn conv_strided(seed: u64, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    check(seed, cfg, &[[1, 2, 7, 7], [3, 2, 3, 3]], |t, v| t.conv2d(v[0], v[1], ConvGeom::new(2, [1, 1])))
}

fn conv_separable(seed: u64, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    check(seed, cfg, &[[1, 3, 6, 7], [2, 3, 1, 5], [2, 3, 5, 1]], |t, v| {
        let a = t.conv2d(v[0], v[1], ConvGeom::same(1, 5))?;
        let b = t.conv2d(v[0], v[2], ConvGeom::same(5, 1))?;
        t.add(a, b)
    })
}

fn bn_train(seed: u64, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    check(seed, cfg, &[[3, 4, 3, 3], [1, 4, 1, 1], [1, 4, 1, 1]], |t, v| {
        Ok(t.batch_norm(v[0], v[1], v[2], BnMode::Train { eps: 1e-5 })?.0)
    })
}

fn bn_infer(seed: u64, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb0);
    let mean: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let var: Vec<f64> = (0..4).map(|_| rng.random_range(0.2..2.0)).collect();
    check(seed, cfg, &[[2, 4, 3, 3], [1, 4, 1, 1], [1, 4, 1, 1]], move |t, v| {
        Ok(t.batch_norm(v[0], v[1], v[2], BnMode::Infer { mean: &mean, var: &var, eps: 1e-5 })?.0)
    })
}

fn relu(seed: u64, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    check(seed, cfg, &[[2, 3, 4, 4]], |t, v| Ok(t.relu(v[0])))
}

fn sigmoid(seed: u64, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    check(seed, cfg, &[[2, 3, 4, 4]], |t, v| Ok(t.sigmoid(v[0])))
}

fn add(seed: u64, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    check(seed, cfg, &[[2, 3, 4, 4], [2, 3, 4, 4]], |t, v| t.add(v[0], v[1]))
}

fn scale(seed: u64, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    check(seed, cfg, &[[1, 3, 4, 4]], |t, v| Ok(t.scale(v[0], -1.75)))
}

fn upsample(seed: u64, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    check(seed, cfg, &[[2, 2, 3, 4]], |t, v| t.upsample2x(v[0]))
}

fn downsample(seed: u64, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    check(seed, cfg, &[[2, 2, 4, 6]], |t, v| t.avg_downsample2x(v[0]))
}

fn global_pool(seed: u64, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    check(seed, cfg, &[[2, 3, 4, 5]], |t, v| Ok(t.global_avg_pool(v[0])))
}

fn pack_unpack(seed: u64, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    check(seed, cfg, &[[2, 3, 4, 4], [2, 3, 2, 3]], |t, v| {
        let p = t.pack_spatial(v)?;
        let sq = t.sigmoid(p);
        let a = t.unpack_spatial(sq, 0, 4, 4)?;
        let b = t.unpack_spatial(sq, 16, 2, 3)?;
        let up = t.upsample2x(b)?;
        let sum = t.pack_spatial(&[a, up])?;
        Ok(sum)
    })
}

fn pyramid_cfg() -> PyramidConfig {
    PyramidConfig {
        decoder_channels: 3,
        encoder: EncoderSpec::Toy { widths: [2, 3, 3, 3] },
        ..PyramidConfig::default()
    }
}

fn pyramid(seed: u64, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let pc = pyramid_cfg();
    let params = ParamSet::<f64>::init(&pyramid_spec(&pc), seed)?;
    check(seed, cfg, &[[2, 3, 64, 64]], move |t, v| {
        let mut fwd = Forward::new(t, &params, true, BnConfig::default());
        let e = encode(&mut fwd, v[0], &pc)?;
        let d = decode(&mut fwd, e, &pc)?;
        fwd.tape.pack_spatial(&d)
    })
}

/// A head on random pyramid features, pooled at every anchor of a 64 × 64
/// image and reduced to one fixed weighted sum per level.
fn head_case(variant: HeadVariant, ps: bool, seed: u64, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let c = 3;
    let hc = HeadConfig { gcn_mid_width: 2, lk_width: 2, large_kernel: 3, k: 2, ..HeadConfig::new(variant, ps) };
    let params = ParamSet::<f64>::init(&head_spec(&hc, c), seed)?;
    let strides = [4, 8, 16, 32, 64];
    let anchors = if ps {
        generate_window_anchors(64, 64, &strides, &WindowProfile::standard(5))
    } else {
        generate_grid_anchors(64, 64, &strides, GridRatios::Three, 8.0)
    };
    let mode = if ps { PoolMode::Grid { k: hc.k } } else { PoolMode::Cell { ratios: 3 } };
    let dims: Vec<[usize; 4]> = strides.iter().map(|s| [2, c, 64 / s, 64 / s]).collect();
    check(seed, cfg, &dims, move |t, v| {
        let mut fwd = Forward::new(t, &params, true, BnConfig::default());
        let maps = head_forward(&mut fwd, v, &hc)?;
        let mut pooled = Vec::new();
        for (m, level) in maps.iter().zip(&anchors.levels) {
            let sites: Vec<PoolSite> =
                level.anchors.iter().enumerate().map(|(i, a)| PoolSite::from_anchor(i % 2, a)).collect();
            if sites.is_empty() {
                continue;
            }
            pooled.push(pool_var(fwd.tape, m.reg, m.cls, sites, mode)?);
        }
        let mut reduced = Vec::with_capacity(pooled.len());
        for p in pooled {
            let w = (0..fwd.tape.value(p).len()).map(|i| (i as f64 * 0.7).sin()).collect();
            reduced.push(fwd.tape.weighted_sum(p, w)?);
        }
        fwd.tape.pack_spatial(&reduced)
    })
}

fn ps_pool_grid(seed: u64, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let anchors = generate_window_anchors(64, 64, &[4], &WindowProfile::standard(5));
    let sites: Vec<PoolSite> =
        anchors.levels[0].anchors.iter().step_by(7).enumerate().map(|(i, a)| PoolSite::from_anchor(i % 2, a)).collect();
    check(seed, cfg, &[[2, 64, 16, 16], [2, 16, 16, 16]], move |t, v| {
        pool_var(t, v[0], v[1], sites.clone(), PoolMode::Grid { k: 4 })
    })
}

fn cell_pool(seed: u64, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let anchors = generate_grid_anchors(32, 32, &[8], GridRatios::Five, 8.0);
    let sites: Vec<PoolSite> =
        anchors.levels[0].anchors.iter().enumerate().map(|(i, a)| PoolSite::from_anchor(i % 2, a)).collect();
    check(seed, cfg, &[[2, 20, 4, 4], [2, 5, 4, 4]], move |t, v| {
        pool_var(t, v[0], v[1], sites.clone(), PoolMode::Cell { ratios: 5 })
    })
}

fn loss(seed: u64, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1055);
    let targets: Vec<SampleTarget> = (0..10)
        .map(|i| SampleTarget {
            anchor: i,
            positive: i % 3 != 0,
            target: std::array::from_fn(|_| rng.random_range(-1.5..1.5)),
        })
        .collect();
    check(seed, cfg, &[[6, 5, 1, 1], [4, 5, 1, 1]], move |t, v| {
        let scaled: Vec<Var> = v.iter().map(|&x| t.scale(x, 2.0)).collect();
        Ok(loss_var(t, &scaled, targets.clone(), 1.0 / 16.0)?.0)
    })
}

/// Every case with its name. Head cases are listed per variant and pooling
/// mode.
pub fn cases() -> Vec<NamedCase> {
    let plain: [(&str, Case); 17] = [
        ("conv2d 3x3", conv3),
        ("conv2d stride 2", conv_strided),
        ("conv2d 1xk + kx1", conv_separable),
        ("batch_norm train", bn_train),
        ("batch_norm infer", bn_infer),
        ("relu", relu),
        ("sigmoid", sigmoid),
        ("add", add),
        ("scale", scale),
        ("upsample2x", upsample),
        ("avg_downsample2x", downsample),
        ("global_avg_pool", global_pool),
        ("pack/unpack spatial", pack_unpack),
        ("pyramid encode+decode", pyramid),
        ("ps_pool grid k=4", ps_pool_grid),
        ("cell pool 5 ratios", cell_pool),
        ("compute_loss", loss),
    ];
    let mut out: Vec<NamedCase> = plain.into_iter().map(|(n, f)| (n.to_string(), Box::new(f) as Box<_>)).collect();
    for variant in HeadVariant::ALL {
        for ps in [true, false] {
            let name = format!("head {} {} + pool", variant.name(), if ps { "PS" } else { "non-PS" });
            out.push((name, Box::new(move |s, c| head_case(variant, ps, s, c))));
        }
    }
    out
}

/// Suite defaults: a small step keeps deep ReLU stacks from straddling
/// kinks; f64 rounding stays far below the tolerance.
pub fn suite_config() -> GradcheckConfig {
    GradcheckConfig { step: 1e-6, tolerance: 1e-4, ..GradcheckConfig::default() }
}

/// Runs every case over seeds `0..seeds`. `filter` keeps cases whose name
/// contains it.
pub fn run_suite(seeds: usize, cfg: &GradcheckConfig, filter: Option<&str>) -> Result<Vec<SuiteEntry>> {
    let mut entries = Vec::new();
    for (name, case) in cases() {
        if filter.is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let mut e = SuiteEntry { name, seeds, checked: 0, skipped_kinks: 0, max_rel_error: 0.0, passed: true };
        for seed in 0..seeds as u64 {
            let r = case(seed, cfg)?;
            e.checked += r.checked;
            e.skipped_kinks += r.skipped_kinks;
            e.max_rel_error = e.max_rel_error.max(r.max_rel_error);
            e.passed &= r.passed();
        }
        entries.push(e);
    }
    Ok(entries)
}

pub fn render_suite(entries: &[SuiteEntry]) -> String {
    let mut s =
        format!("{:<28} {:>5} {:>7} {:>6} {:>11}  result\n", "case", "seeds", "checked", "kinks", "max rel err");
    for e in entries {
        s += &format!(
            "{:<28} {:>5} {:>7} {:>6} {:>11.3e}  {}\n",
            e.name,
            e.seeds,
            e.checked,
            e.skipped_kinks,
            e.max_rel_error,
            if e.passed { "pass" } else { "FAIL" }
        );
    }
    s
}
