//! RPN heads shared across all pyramid levels.
//!
//! Every variant ends in two sibling CB1 outputs, `reg` and `cls`. With
//! position-sensitive maps they have `4k²` and `k²` channels; otherwise
//! `4·R` and `R` for `R` anchor ratios per cell.
//!
//! | variant  | before the smoother                    | smoother            |
//! |----------|----------------------------------------|---------------------|
//! | baseline | -                                      | one CBR3            |
//! | naive    | -                                      | three CBR3 in series|
//! | gcn-s    | `x + gcn(x)`, separable k×1 / 1×k      | one CBR3            |
//! | lk-s     | `x + proj(lk(x))`, dense k×k CBR       | one CBR3            |
//! | gcn-ns   | as gcn-s                               | one CBR3 per branch |
//! | lk-ns    | as lk-s                                | one CBR3 per branch |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, Forward, LayerKind, LayerRecord};
use crate::error::{shape_err, Error, Result};
use crate::graph::Var;
use crate::ops::{self, ConvGeom};
use crate::pyramid::{decoder_spec, resnet50_spec};
use crate::tensor::{Real, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadVariant {
    Baseline,
    Naive,
    GcnS,
    LkS,
    GcnNs,
    LkNs,
}

impl HeadVariant {
    pub const ALL: [HeadVariant; 6] = [
        HeadVariant::Baseline,
        HeadVariant::Naive,
        HeadVariant::GcnS,
        HeadVariant::LkS,
        HeadVariant::GcnNs,
        HeadVariant::LkNs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeadVariant::Baseline => "baseline",
            HeadVariant::Naive => "naive",
            HeadVariant::GcnS => "gcn-s",
            HeadVariant::LkS => "lk-s",
            HeadVariant::GcnNs => "gcn-ns",
            HeadVariant::LkNs => "lk-ns",
        }
    }

    pub fn uses_gcn(self) -> bool {
        matches!(self, HeadVariant::GcnS | HeadVariant::GcnNs)
    }

    pub fn uses_large_kernel(self) -> bool {
        matches!(self, HeadVariant::LkS | HeadVariant::LkNs)
    }

    pub fn shared_smoother(self) -> bool {
        !matches!(self, HeadVariant::GcnNs | HeadVariant::LkNs)
    }
}

impl fmt::Display for HeadVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        HeadVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown head variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub variant: HeadVariant,
    /// Position-sensitive grid size.
    pub k: usize,
    pub position_sensitive: bool,
    /// Bottleneck width inside each separable branch.
    pub gcn_mid_width: usize,
    /// Output width of the dense large-kernel CBR.
    pub lk_width: usize,
    /// Kernel length of the GCN and LK blocks (odd).
    pub large_kernel: usize,
    /// Anchors per cell when not position-sensitive.
    pub ratios: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            variant: HeadVariant::Baseline,
            k: 4,
            position_sensitive: true,
            gcn_mid_width: 32,
            lk_width: 16,
            large_kernel: 15,
            ratios: 3,
        }
    }
}

impl HeadConfig {
    pub fn new(variant: HeadVariant, position_sensitive: bool) -> Self {
        Self { variant, position_sensitive, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("head.k must be at least 1".into()));
        }
        if self.large_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("head.large_kernel must be odd, got {}", self.large_kernel)));
        }
        if self.ratios == 0 || self.gcn_mid_width == 0 || self.lk_width == 0 {
            return Err(Error::Config("head widths and ratio count must be positive".into()));
        }
        Ok(())
    }

    pub fn reg_channels(&self) -> usize {
        if self.position_sensitive {
            4 * self.k * self.k
        } else {
            4 * self.ratios
        }
    }

    pub fn cls_channels(&self) -> usize {
        if self.position_sensitive {
            self.k * self.k
        } else {
            self.ratios
        }
    }
}

pub fn head_spec(cfg: &HeadConfig, channels: usize) -> ArchSpec {
    let c = channels;
    let k = cfg.large_kernel;
    let mut s = ArchSpec::new();
    if cfg.variant.uses_gcn() {
        let m = cfg.gcn_mid_width;
        s.push(LayerRecord::new("head.gcn.a1", LayerKind::Conv, (k, 1), c, m));
        s.push(LayerRecord::new("head.gcn.a2", LayerKind::Conv, (1, k), m, c));
        s.push(LayerRecord::new("head.gcn.b1", LayerKind::Conv, (1, k), c, m));
        s.push(LayerRecord::new("head.gcn.b2", LayerKind::Conv, (k, 1), m, c));
    }
    if cfg.variant.uses_large_kernel() {
        s.push(LayerRecord::cbr("head.lk.conv", k, c, cfg.lk_width));
        s.push(LayerRecord::cbr("head.lk.proj", 1, cfg.lk_width, c));
    }
    if cfg.variant.shared_smoother() {
        s.push(LayerRecord::cbr("head.smoother", 3, c, c));
        if cfg.variant == HeadVariant::Naive {
            s.push(LayerRecord::cbr("head.extra1", 3, c, c));
            s.push(LayerRecord::cbr("head.extra2", 3, c, c));
        }
    } else {
        s.push(LayerRecord::cbr("head.smoother.reg", 3, c, c));
        s.push(LayerRecord::cbr("head.smoother.cls", 3, c, c));
    }
    s.push(LayerRecord::cb("head.reg", 1, c, cfg.reg_channels()));
    s.push(LayerRecord::cb("head.cls", 1, c, cfg.cls_channels()));
    s
}

/// Score maps of one pyramid level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadOutput {
    pub reg: Var,
    pub cls: Var,
}

/// Two summed branches, `k×1 → 1×k` and `1×k → k×1`, each padded to keep
/// spatial dims. Weights are `(out, in, kh, kw)`.
pub fn separable_gcn<T: Real>(
    x: &Tensor4<T>,
    a1: &Tensor4<T>,
    a2: &Tensor4<T>,
    b1: &Tensor4<T>,
    b2: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let k = a1.height();
    if k.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("separable_gcn: kernel {k} must be odd")));
    }
    let shapes_ok = a1.width() == 1 && a2.dims()[2..] == [1, k] && b1.dims()[2..] == [1, k] && b2.dims()[2..] == [k, 1];
    if !shapes_ok {
        return shape_err(format!(
            "separable_gcn: branch kernels {:?} {:?} {:?} {:?} are not k×1 / 1×k pairs",
            a1.dims(),
            a2.dims(),
            b1.dims(),
            b2.dims()
        ));
    }
    let col = ConvGeom::same(k, 1);
    let row = ConvGeom::same(1, k);
    let a = ops::conv2d(&ops::conv2d(x, a1, col)?, a2, row)?;
    let b = ops::conv2d(&ops::conv2d(x, b1, row)?, b2, col)?;
    ops::add(&a, &b)
}

/// Runs the head on every level with shared weights and shared batch-norm
/// statistics.
pub fn head_forward<T: Real>(fwd: &mut Forward<'_, T>, levels: &[Var], cfg: &HeadConfig) -> Result<Vec<HeadOutput>> {
    cfg.validate()?;
    let expected = fwd.record("head.reg")?.in_ch;
    for &x in levels {
        let c = fwd.tape.value(x).channels();
        if c != expected {
            return shape_err(format!("head: input has {c} channels, head expects {expected}"));
        }
    }
    let mut trunk = levels.to_vec();
    if cfg.variant.uses_gcn() {
        let a = fwd.layer_shared("head.gcn.a1", &trunk)?;
        let a = fwd.layer_shared("head.gcn.a2", &a)?;
        let b = fwd.layer_shared("head.gcn.b1", &trunk)?;
        let b = fwd.layer_shared("head.gcn.b2", &b)?;
        trunk = residual(fwd, &trunk, &a, Some(&b))?;
    }
    if cfg.variant.uses_large_kernel() {
        let l = fwd.layer_shared("head.lk.conv", &trunk)?;
        let l = fwd.layer_shared("head.lk.proj", &l)?;
        trunk = residual(fwd, &trunk, &l, None)?;
    }
    let (reg_in, cls_in) = if cfg.variant.shared_smoother() {
        let mut s = fwd.layer_shared("head.smoother", &trunk)?;
        if cfg.variant == HeadVariant::Naive {
            s = fwd.layer_shared("head.extra1", &s)?;
            s = fwd.layer_shared("head.extra2", &s)?;
        }
        (s.clone(), s)
    } else {
        (fwd.layer_shared("head.smoother.reg", &trunk)?, fwd.layer_shared("head.smoother.cls", &trunk)?)
    };
    let reg = fwd.layer_shared("head.reg", &reg_in)?;
    let cls = fwd.layer_shared("head.cls", &cls_in)?;
    Ok(reg.into_iter().zip(cls).map(|(reg, cls)| HeadOutput { reg, cls }).collect())
}

fn residual<T: Real>(fwd: &mut Forward<'_, T>, x: &[Var], a: &[Var], b: Option<&[Var]>) -> Result<Vec<Var>> {
    (0..x.len())
        .map(|i| {
            let mut y = fwd.tape.add(x[i], a[i])?;
            if let Some(b) = b {
                y = fwd.tape.add(y, b[i])?;
            }
            Ok(y)
        })
        .collect()
}

/// Published parameter totals: (variant, without PS, with PS).
pub const PUBLISHED_PARAMS: [(HeadVariant, u64, u64); 6] = [
    (HeadVariant::Baseline, 26_858_334, 26_875_104),
    (HeadVariant::Naive, 28_039_006, 28_055_776),
    (HeadVariant::GcnS, 27_137_630, 27_154_400),
    (HeadVariant::LkS, 27_813_470, 27_830_240),
    (HeadVariant::GcnNs, 27_727_966, 27_744_736),
    (HeadVariant::LkNs, 28_403_806, 28_420_576),
];

pub fn published(variant: HeadVariant, ps: bool) -> u64 {
    let row = PUBLISHED_PARAMS.iter().find(|r| r.0 == variant).expect("all variants listed");
    if ps {
        row.2
    } else {
        row.1
    }
}

/// Full-model spec: ResNet-50 graph, 256-channel decoder and the head.
pub fn full_model_spec(cfg: &HeadConfig) -> ArchSpec {
    let mut s = resnet50_spec();
    s.extend(decoder_spec([256, 512, 1024, 2048], 256));
    s.extend(head_spec(cfg, 256));
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamRow {
    pub variant: HeadVariant,
    pub position_sensitive: bool,
    pub head: u64,
    pub total: u64,
    pub published: u64,
}

impl ParamRow {
    pub fn residual(&self) -> i64 {
        self.published as i64 - self.total as i64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Identity {
    pub name: &'static str,
    pub ours: i64,
    pub published: i64,
    pub expected: i64,
}

impl Identity {
    pub fn holds(&self) -> bool {
        self.ours == self.expected && self.published == self.expected
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTable {
    pub rows: Vec<ParamRow>,
    pub identities: Vec<Identity>,
}

impl ParamTable {
    pub fn identities_hold(&self) -> bool {
        self.identities.iter().all(Identity::holds)
    }

    pub fn row(&self, variant: HeadVariant, ps: bool) -> &ParamRow {
        self.rows.iter().find(|r| r.variant == variant && r.position_sensitive == ps).expect("row present")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,position_sensitive,head_params,total_params,published,residual\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.variant,
                r.position_sensitive,
                r.head,
                r.total,
                r.published,
                r.residual()
            ));
        }
        s
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "{:<9} {:>3}  {:>10}  {:>11}  {:>11}  {:>9}\n",
            "variant", "ps", "head", "total", "published", "residual"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<9} {:>3}  {:>10}  {:>11}  {:>11}  {:>9}\n",
                r.variant.name(),
                if r.position_sensitive { "yes" } else { "no" },
                r.head,
                r.total,
                r.published,
                r.residual()
            ));
        }
        s.push('\n');
        for i in &self.identities {
            s.push_str(&format!(
                "{:<28} ours {:>9}  published {:>9}  expected {:>9}  {}\n",
                i.name,
                i.ours,
                i.published,
                i.expected,
                if i.holds() { "ok" } else { "MISMATCH" }
            ));
        }
        s
    }
}

/// Parameter counts of every head variant on the full model, compared with
/// the published totals. Only the structural deltas are asserted; the GCN and
/// LK rows depend on internal widths that the totals do not pin down.
pub fn head_param_table(base: &HeadConfig) -> ParamTable {
    let mut rows = Vec::new();
    for variant in HeadVariant::ALL {
        for ps in [false, true] {
            let cfg = HeadConfig { variant, position_sensitive: ps, ..base.clone() };
            let counts = full_model_spec(&cfg).count_params();
            rows.push(ParamRow {
                variant,
                position_sensitive: ps,
                head: counts.under("head."),
                total: counts.total,
                published: published(variant, ps),
            });
        }
    }
    let t = |rows: &[ParamRow], v, ps| {
        rows.iter().find(|r| r.variant == v && r.position_sensitive == ps).unwrap().total as i64
    };
    let p = |v, ps| published(v, ps) as i64;
    use HeadVariant::*;
    let mut identities = vec![Identity {
        name: "naive - baseline",
        ours: t(&rows, Naive, false) - t(&rows, Baseline, false),
        published: p(Naive, false) - p(Baseline, false),
        expected: 1_180_672,
    }];
    for ps in [false, true] {
        identities.push(Identity {
            name: if ps { "gcn-ns - gcn-s (ps)" } else { "gcn-ns - gcn-s" },
            ours: t(&rows, GcnNs, ps) - t(&rows, GcnS, ps),
            published: p(GcnNs, ps) - p(GcnS, ps),
            expected: 590_336,
        });
        identities.push(Identity {
            name: if ps { "lk-ns - lk-s (ps)" } else { "lk-ns - lk-s" },
            ours: t(&rows, LkNs, ps) - t(&rows, LkS, ps),
            published: p(LkNs, ps) - p(LkS, ps),
            expected: 590_336,
        });
    }
    identities.push(Identity {
        name: "baseline ps - baseline",
        ours: t(&rows, Baseline, true) - t(&rows, Baseline, false),
        published: p(Baseline, true) - p(Baseline, false),
        expected: 16_770,
    });
    ParamTable { rows, identities }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{BnConfig, ParamSet};
    use crate::graph::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small(variant: HeadVariant, ps: bool) -> HeadConfig {
        HeadConfig {
            variant,
            position_sensitive: ps,
            gcn_mid_width: 3,
            lk_width: 3,
            large_kernel: 5,
            ..Default::default()
        }
    }

    fn run(params: &ParamSet<f64>, cfg: &HeadConfig, inputs: &[Tensor4<f64>]) -> Vec<(Tensor4<f64>, Tensor4<f64>)> {
        let mut tape = Tape::new();
        let xs: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let mut fwd = Forward::new(&mut tape, params, true, BnConfig::default());
        let outs = head_forward(&mut fwd, &xs, cfg).unwrap();
        outs.iter().map(|o| (fwd.tape.value(o.reg).clone(), fwd.tape.value(o.cls).clone())).collect()
    }

    fn rand_input(dims: [usize; 4], seed: u64) -> Tensor4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn(dims, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn variant_names_round_trip() {
        for v in HeadVariant::ALL {
            assert_eq!(v.name().parse::<HeadVariant>().unwrap(), v);
        }
        assert!("gcn".parse::<HeadVariant>().is_err());
    }

    #[test]
    fn output_channels() {
        let cfg = HeadConfig::default();
        let params = ParamSet::<f32>::init(&head_spec(&cfg, 256), 0).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor4::full([1, 256, 20, 20], 0.1));
        let mut fwd = Forward::new(&mut tape, &params, false, BnConfig::default());
        let out = head_forward(&mut fwd, &[x], &cfg).unwrap();
        assert_eq!(fwd.tape.value(out[0].reg).dims(), [1, 64, 20, 20]);
        assert_eq!(fwd.tape.value(out[0].cls).dims(), [1, 16, 20, 20]);

        let cfg = HeadConfig { position_sensitive: false, ..Default::default() };
        assert_eq!((cfg.reg_channels(), cfg.cls_channels()), (12, 3));
    }

    #[test]
    fn rejects_channel_mismatch() {
        let cfg = small(HeadVariant::Baseline, true);
        let params = ParamSet::<f64>::init(&head_spec(&cfg, 4), 0).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor4::zeros([1, 5, 4, 4]));
        let mut fwd = Forward::new(&mut tape, &params, false, BnConfig::default());
        assert!(head_forward(&mut fwd, &[x], &cfg).is_err());
    }

    #[test]
    fn levels_share_weights() {
        for variant in HeadVariant::ALL {
            let cfg = small(variant, true);
            let params = ParamSet::<f64>::init(&head_spec(&cfg, 4), 3).unwrap();
            let x = rand_input([1, 4, 6, 6], 9);
            let outs = run(&params, &cfg, &[x.clone(), x]);
            assert_eq!(outs[0], outs[1], "{variant}");
        }
    }

    #[test]
    fn zero_gcn_reduces_to_baseline() {
        let gcn = small(HeadVariant::GcnNs, true);
        let mut p_gcn = ParamSet::<f64>::init(&head_spec(&gcn, 4), 5).unwrap();
        for g in ["head.gcn.a1", "head.gcn.a2", "head.gcn.b1", "head.gcn.b2"] {
            p_gcn.get_mut(g).unwrap().weight.data_mut().fill(0.0);
        }
        // Baseline with the same (tied) smoother and sibling weights.
        let base = small(HeadVariant::Baseline, true);
        let mut p_base = ParamSet::<f64>::init(&head_spec(&base, 4), 6).unwrap();
        let smoother = p_gcn.get("head.smoother.reg").unwrap().clone();
        *p_gcn.get_mut("head.smoother.cls").unwrap() = ParamSetExt::renamed(&smoother, "head.smoother.cls");
        *p_base.get_mut("head.smoother").unwrap() = ParamSetExt::renamed(&smoother, "head.smoother");
        for g in ["head.reg", "head.cls"] {
            *p_base.get_mut(g).unwrap() = p_gcn.get(g).unwrap().clone();
        }
        let x = rand_input([2, 4, 5, 7], 1);
        assert_eq!(run(&p_gcn, &gcn, std::slice::from_ref(&x)), run(&p_base, &base, &[x]));
    }

    #[test]
    fn tied_ns_equals_s() {
        for (s_var, ns_var) in [(HeadVariant::GcnS, HeadVariant::GcnNs), (HeadVariant::LkS, HeadVariant::LkNs)] {
            let s_cfg = small(s_var, true);
            let ns_cfg = small(ns_var, true);
            let p_s = ParamSet::<f64>::init(&head_spec(&s_cfg, 4), 11).unwrap();
            let mut p_ns = ParamSet::<f64>::init(&head_spec(&ns_cfg, 4), 12).unwrap();
            for g in p_s.groups() {
                if g.record.group == "head.smoother" {
                    for name in ["head.smoother.reg", "head.smoother.cls"] {
                        *p_ns.get_mut(name).unwrap() = ParamSetExt::renamed(g, name);
                    }
                } else {
                    *p_ns.get_mut(&g.record.group).unwrap() = g.clone();
                }
            }
            let x = rand_input([1, 4, 6, 6], 2);
            let tied = run(&p_ns, &ns_cfg, std::slice::from_ref(&x));
            assert_eq!(tied, run(&p_s, &s_cfg, std::slice::from_ref(&x)));

            // Untying the cls smoother moves only the cls maps.
            p_ns.get_mut("head.smoother.cls").unwrap().weight.data_mut()[0] += 0.5;
            let untied = run(&p_ns, &ns_cfg, &[x]);
            assert_eq!(untied[0].0, tied[0].0);
            assert_ne!(untied[0].1, tied[0].1);
        }
    }

    struct ParamSetExt;
    impl ParamSetExt {
        fn renamed(g: &crate::arch::ParamGroup<f64>, name: &str) -> crate::arch::ParamGroup<f64> {
            let mut g = g.clone();
            g.record.group = name.to_string();
            g
        }
    }

    #[test]
    fn separable_gcn_properties() {
        let x = rand_input([1, 2, 6, 6], 4);
        let a1 = rand_input([3, 2, 3, 1], 5);
        let a2 = rand_input([2, 3, 1, 3], 6);
        let b1 = rand_input([3, 2, 1, 3], 7);
        let b2 = rand_input([2, 3, 3, 1], 8);
        let zero = |t: &Tensor4<f64>| Tensor4::zeros(t.dims());
        let y = separable_gcn(&x, &zero(&a1), &zero(&a2), &zero(&b1), &zero(&b2)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let full = separable_gcn(&x, &a1, &a2, &b1, &b2).unwrap();
        let only_a = separable_gcn(&x, &a1, &a2, &zero(&b1), &zero(&b2)).unwrap();
        let a = ops::conv2d(&ops::conv2d(&x, &a1, ConvGeom::same(3, 1)).unwrap(), &a2, ConvGeom::same(1, 3)).unwrap();
        assert_eq!(only_a, a);
        assert_eq!(full.dims(), [1, 2, 6, 6]);

        let even = rand_input([3, 2, 4, 1], 9);
        assert!(separable_gcn(&x, &even, &a2, &b1, &b2).is_err());
    }

    #[test]
    fn separable_gcn_equals_dense_kernel() {
        // Each branch is a rank-limited factorisation of a dense 3×3 kernel:
        // K[o,i,y,x] = Σ_m a2[o,m,0,x]·a1[m,i,y,0] + b2[o,m,y,0]·b1[m,i,0,x].
        let x = rand_input([2, 2, 5, 7], 14);
        let a1 = rand_input([3, 2, 3, 1], 15);
        let a2 = rand_input([2, 3, 1, 3], 16);
        let b1 = rand_input([3, 2, 1, 3], 17);
        let b2 = rand_input([2, 3, 3, 1], 18);
        let dense = Tensor4::from_fn([2, 2, 3, 3], |[o, i, ky, kx]| {
            (0..3).map(|m| a2.at(o, m, 0, kx) * a1.at(m, i, ky, 0) + b2.at(o, m, ky, 0) * b1.at(m, i, 0, kx)).sum()
        });
        let got = separable_gcn(&x, &a1, &a2, &b1, &b2).unwrap();
        let want = ops::conv2d(&x, &dense, ConvGeom::same(3, 3)).unwrap();
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn published_identities() {
        let table = head_param_table(&HeadConfig::default());
        assert!(table.identities_hold(), "{}", table.render());
        assert_eq!(table.row(HeadVariant::Baseline, false).total, 26_858_334);
        assert_eq!(table.row(HeadVariant::Baseline, true).total, 26_875_104);
        assert_eq!(table.row(HeadVariant::Naive, false).residual(), 0);
        assert_eq!(table.rows.len(), 12);
    }
}
