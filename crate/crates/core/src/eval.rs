//! Proposal ranking, deduplication and the average-recall protocol.
//!
//! Recall at IoU `τ` and budget `N` greedily matches the top `N` proposals, in
//! descending score order, one-to-one to the evaluated ground truth (the
//! unmatched gt with the highest IoU, lowest index on ties). Crowd regions,
//! and by default VOC `difficult` objects, are left out of the denominator.
//! A proposal that only covers an ignored region still uses up budget.
//!
//! AR averages recall over `τ ∈ {0.50, 0.55, …, 0.95}`. Per-image recalls are
//! averaged over images with at least one evaluated gt.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchors::{iou, BBox};
use crate::data::GtInstance;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BBox,
    pub score: f64,
    /// Pyramid level the proposal came from.
    pub level: usize,
}

/// IoU thresholds of the AR protocol.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Proposal budgets over which the AUC is integrated.
pub const AUC_BUDGETS: [usize; 10] = [1, 2, 5, 10, 20, 50, 100, 200, 500, 1000];

/// Stable descending-score order; equal scores keep their input order.
pub fn sort_by_score(proposals: &mut [Proposal]) {
    proposals.sort_by(|a, b| b.score.total_cmp(&a.score));
}

/// Greedy non-maximum suppression. Input order breaks score ties.
pub fn nms(mut proposals: Vec<Proposal>, threshold: f64) -> Vec<Proposal> {
    sort_by_score(&mut proposals);
    let mut kept: Vec<Proposal> = Vec::new();
    for p in proposals {
        if kept.iter().all(|k| iou(&k.bbox, &p.bbox) <= threshold) {
            kept.push(p);
        }
    }
    kept
}

/// Ground truth of one image as seen by the metric.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalGt {
    pub bbox: BBox,
    pub area: f64,
    /// Counted in the denominator.
    pub evaluated: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtPolicy {
    /// Leave VOC `difficult` objects out, like crowd regions.
    pub ignore_difficult: bool,
}

impl Default for GtPolicy {
    fn default() -> Self {
        Self { ignore_difficult: true }
    }
}

impl GtPolicy {
    pub fn prepare(&self, gts: &[GtInstance]) -> Vec<EvalGt> {
        gts.iter()
            .map(|g| EvalGt {
                bbox: g.bbox,
                area: g.area,
                evaluated: !g.crowd && !(self.ignore_difficult && g.difficult),
            })
            .collect()
    }
}

/// Indices of the gts matched by the top `budget` proposals at `tau`.
/// `proposals` must already be in score order.
pub fn greedy_match(proposals: &[Proposal], gts: &[EvalGt], budget: usize, tau: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; gts.len()];
    proposals
        .iter()
        .take(budget)
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if !g.evaluated || taken[j] {
                    continue;
                }
                let v = iou(&p.bbox, &g.bbox);
                if v >= tau && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            let j = best.map(|(j, _)| j);
            if let Some(j) = j {
                taken[j] = true;
            }
            j
        })
        .collect()
}

/// Fraction of evaluated gts matched; `None` if the image has none.
pub fn recall_at(proposals: &[Proposal], gts: &[EvalGt], budget: usize, tau: f64) -> Option<f64> {
    let total = gts.iter().filter(|g| g.evaluated).count();
    if total == 0 {
        return None;
    }
    let matched = greedy_match(proposals, gts, budget, tau).iter().flatten().count();
    Some(matched as f64 / total as f64)
}

/// Mean recall over the ten IoU thresholds.
pub fn average_recall(proposals: &[Proposal], gts: &[EvalGt], budget: usize) -> Option<f64> {
    let ts = iou_thresholds();
    let rs: Option<Vec<f64>> = ts.iter().map(|&t| recall_at(proposals, gts, budget, t)).collect();
    rs.map(|r| r.iter().sum::<f64>() / ts.len() as f64)
}

/// Trapezoidal area under `ar` (one value per [`AUC_BUDGETS`] entry) over
/// `log10 N`, normalised to `[0, 1]`.
pub fn auc_from_curve(ar: &[f64]) -> f64 {
    assert_eq!(ar.len(), AUC_BUDGETS.len());
    let xs: Vec<f64> = AUC_BUDGETS.iter().map(|&n| (n as f64).log10()).collect();
    let span = xs[xs.len() - 1] - xs[0];
    let area: f64 = (1..xs.len()).map(|i| 0.5 * (ar[i] + ar[i - 1]) * (xs[i] - xs[i - 1])).sum();
    area / span
}

pub fn auc(proposals: &[Proposal], gts: &[EvalGt]) -> Option<f64> {
    let curve: Option<Vec<f64>> = AUC_BUDGETS.iter().map(|&n| average_recall(proposals, gts, n)).collect();
    curve.map(|c| auc_from_curve(&c))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

impl SizeBucket {
    pub const ALL: [SizeBucket; 3] = [SizeBucket::Small, SizeBucket::Medium, SizeBucket::Large];

    /// Small `a < 32²`, medium `32² ≤ a < 96²`, large `a ≥ 96²`.
    pub fn of(area: f64) -> Self {
        if area < 1024.0 {
            SizeBucket::Small
        } else if area < 9216.0 {
            SizeBucket::Medium
        } else {
            SizeBucket::Large
        }
    }
}

fn restrict(gts: &[EvalGt], bucket: SizeBucket) -> Vec<EvalGt> {
    gts.iter().map(|g| EvalGt { evaluated: g.evaluated && SizeBucket::of(g.area) == bucket, ..g.clone() }).collect()
}

/// AR of one image per size bucket; `None` where the bucket is empty.
pub fn size_stratified(proposals: &[Proposal], gts: &[EvalGt], budget: usize) -> [Option<f64>; 3] {
    SizeBucket::ALL.map(|b| average_recall(proposals, &restrict(gts, b), budget))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// IoU of the pre-budget NMS; `None` (key omitted) disables it.
    pub nms_iou: Option<f64>,
    pub gt_policy: GtPolicy,
    /// Budgets of the recall-vs-IoU curves.
    pub curve_budgets: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { nms_iou: Some(0.7), gt_policy: GtPolicy::default(), curve_budgets: vec![10, 100, 1000] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub images_with_gt: usize,
    pub ar_10: f64,
    pub ar_100: f64,
    pub ar_1k: f64,
    pub auc: f64,
    pub ar_small_1k: Option<f64>,
    pub ar_medium_1k: Option<f64>,
    pub ar_large_1k: Option<f64>,
    pub auc_budgets: Vec<usize>,
    /// AR per [`AUC_BUDGETS`] entry.
    pub ar_curve: Vec<f64>,
    /// Recall-vs-IoU on a 0.50..=1.00 grid per curve budget.
    pub recall_ious: Vec<f64>,
    pub recall_curves: Vec<(usize, Vec<f64>)>,
    pub nms_iou: Option<f64>,
    pub ignore_difficult: bool,
    pub config_hash: String,
}

/// Accumulates per-image results; combining is a plain sum, so images can be
/// scored in any order or in parallel.
#[derive(Clone, Debug, Default)]
struct Accum {
    images: usize,
    with_gt: usize,
    ar_curve: Vec<f64>,
    strata: [(f64, usize); 3],
    recall: Vec<Vec<f64>>,
}

fn recall_grid() -> Vec<f64> {
    (0..=10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Scores a set of images. Each item is `(proposals, gts)`; proposals need
/// not be sorted.
pub fn evaluate(items: &[(Vec<Proposal>, Vec<GtInstance>)], cfg: &EvalConfig, config_hash: &str) -> EvalReport {
    let grid = recall_grid();
    let mut acc = Accum {
        ar_curve: vec![0.0; AUC_BUDGETS.len()],
        recall: vec![vec![0.0; grid.len()]; cfg.curve_budgets.len()],
        ..Default::default()
    };
    for (props, gts) in items {
        acc.images += 1;
        let mut props = match cfg.nms_iou {
            Some(t) => nms(props.clone(), t),
            None => props.clone(),
        };
        sort_by_score(&mut props);
        let gts = cfg.gt_policy.prepare(gts);
        for (i, s) in size_stratified(&props, &gts, 1000).into_iter().enumerate() {
            if let Some(s) = s {
                acc.strata[i].0 += s;
                acc.strata[i].1 += 1;
            }
        }
        if !gts.iter().any(|g| g.evaluated) {
            continue;
        }
        acc.with_gt += 1;
        for (i, &n) in AUC_BUDGETS.iter().enumerate() {
            acc.ar_curve[i] += average_recall(&props, &gts, n).expect("image has gts");
        }
        for (bi, &n) in cfg.curve_budgets.iter().enumerate() {
            for (ti, &t) in grid.iter().enumerate() {
                acc.recall[bi][ti] += recall_at(&props, &gts, n, t).expect("image has gts");
            }
        }
    }
    let norm = |v: f64| if acc.with_gt == 0 { 0.0 } else { v / acc.with_gt as f64 };
    let ar_curve: Vec<f64> = acc.ar_curve.iter().map(|&v| norm(v)).collect();
    let at = |n: usize| ar_curve[AUC_BUDGETS.iter().position(|&b| b == n).expect("budget on grid")];
    let stratum = |i: usize| {
        let (s, c) = acc.strata[i];
        (c > 0).then(|| s / c as f64)
    };
    EvalReport {
        images: acc.images,
        images_with_gt: acc.with_gt,
        ar_10: at(10),
        ar_100: at(100),
        ar_1k: at(1000),
        auc: auc_from_curve(&ar_curve),
        ar_small_1k: stratum(0),
        ar_medium_1k: stratum(1),
        ar_large_1k: stratum(2),
        auc_budgets: AUC_BUDGETS.to_vec(),
        recall_curves: cfg
            .curve_budgets
            .iter()
            .zip(&acc.recall)
            .map(|(&n, r)| (n, r.iter().map(|&v| norm(v)).collect()))
            .collect(),
        recall_ious: grid,
        ar_curve,
        nms_iou: cfg.nms_iou,
        ignore_difficult: cfg.gt_policy.ignore_difficult,
        config_hash: config_hash.to_string(),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_else(|| "nan".into())
}

impl EvalReport {
    /// One-line CSV summary with header.
    pub fn summary_csv(&self) -> String {
        format!(
            "images,images_with_gt,ar_10,ar_100,ar_1k,auc,ar_s_1k,ar_m_1k,ar_l_1k,nms_iou,ignore_difficult,config_hash\n\
             {},{},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{},{}\n",
            self.images,
            self.images_with_gt,
            self.ar_10,
            self.ar_100,
            self.ar_1k,
            self.auc,
            opt(self.ar_small_1k),
            opt(self.ar_medium_1k),
            opt(self.ar_large_1k),
            self.nms_iou.map(|v| v.to_string()).unwrap_or_else(|| "off".into()),
            self.ignore_difficult,
            self.config_hash
        )
    }

    /// Long-format curves: `curve,budget,iou,value`.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("curve,budget,iou,value\n");
        for (n, v) in self.auc_budgets.iter().zip(&self.ar_curve) {
            let _ = writeln!(s, "ar_vs_budget,{n},,{v:.6}");
        }
        for (n, r) in &self.recall_curves {
            for (t, v) in self.recall_ious.iter().zip(r) {
                let _ = writeln!(s, "recall_vs_iou,{n},{t:.2},{v:.6}");
            }
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse { path: "report".into(), message: e.to_string() })
    }

    pub fn render(&self) -> String {
        format!(
            "images {} ({} with gt)\nAR@10 {:.4}  AR@100 {:.4}  AR@1k {:.4}  AUC {:.4}\nAR_s@1k {}  AR_m@1k {}  AR_l@1k {}\n",
            self.images,
            self.images_with_gt,
            self.ar_10,
            self.ar_100,
            self.ar_1k,
            self.auc,
            opt(self.ar_small_1k),
            opt(self.ar_medium_1k),
            opt(self.ar_large_1k)
        )
    }
}

/// Writes proposals as `x0 y0 x1 y1 score` lines.
pub fn write_proposals(path: impl AsRef<Path>, proposals: &[Proposal]) -> Result<()> {
    let mut s = String::with_capacity(proposals.len() * 48);
    for p in proposals {
        let b = p.bbox;
        let _ = writeln!(s, "{} {} {} {} {}", b.x0, b.y0, b.x1, b.y1, p.score);
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn parse_proposals(text: &str) -> Result<Vec<Proposal>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = |m: String| Error::Parse { path: format!("line {}", i + 1), message: m };
            let v: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| bad(format!("`{t}` is not a number"))))
                .collect::<Result<_>>()?;
            if v.len() != 5 {
                return Err(bad(format!("expected 5 fields, got {}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(bad("non-finite value".into()));
            }
            Ok(Proposal { bbox: BBox::new(v[0], v[1], v[2], v[3]), score: v[4], level: 0 })
        })
        .collect()
}

pub fn read_proposals(path: impl AsRef<Path>) -> Result<Vec<Proposal>> {
    let path = path.as_ref();
    parse_proposals(&std::fs::read_to_string(path)?).map_err(|e| match e {
        Error::Parse { path: at, message } => Error::Parse { path: format!("{}:{at}", path.display()), message },
        e => e,
    })
}

/// Maps image ids to proposal files, one `id file` pair per line.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProposalManifest {
    pub config_hash: String,
    pub entries: Vec<(u64, String)>,
}

impl ProposalManifest {
    pub fn render(&self) -> String {
        let mut s = format!("# config {}\n", self.config_hash);
        for (id, f) in &self.entries {
            let _ = writeln!(s, "{id} {f}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = ProposalManifest::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if let Some(h) = line.strip_prefix("# config ") {
                m.config_hash = h.trim().to_string();
                continue;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::Parse {
                path: format!("manifest line {}", i + 1),
                message: format!("expected `id file`, got `{line}`"),
            };
            let (id, file) = line.split_once(char::is_whitespace).ok_or_else(bad)?;
            m.entries.push((id.parse().map_err(|_| bad())?, file.trim().to_string()));
        }
        Ok(m)
    }
}

/// SVG chart of recall-vs-IoU (left) and AR-vs-budget (right).
pub fn plot_svg(report: &EvalReport) -> String {
    const W: f64 = 360.0;
    const H: f64 = 260.0;
    const M: f64 = 40.0;
    let colours = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"11\">\n",
        2.0 * W,
        H
    );
    let _ = writeln!(s, "<!-- config {} -->", report.config_hash);
    let mut panel = |ox: f64,
                     title: &str,
                     xlabel: &str,
                     xticks: &[(f64, String)],
                     series: &[(String, Vec<(f64, f64)>)]| {
        let px = |x: f64| ox + M + x * (W - 2.0 * M);
        let py = |y: f64| H - M - y * (H - 2.0 * M);
        let _ = writeln!(
            s,
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444\"/>",
            px(0.0),
            py(1.0),
            W - 2.0 * M,
            H - 2.0 * M
        );
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{title}</text>", ox + W / 2.0, M - 12.0);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{xlabel}</text>", ox + W / 2.0, H - 6.0);
        for i in 0..=4 {
            let y = i as f64 / 4.0;
            let _ =
                writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{y:.2}</text>", px(0.0) - 4.0, py(y) + 4.0);
        }
        for (x, label) in xticks {
            let _ =
                writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{label}</text>", px(*x), py(0.0) + 14.0);
        }
        for (i, (name, pts)) in series.iter().enumerate() {
            let c = colours[i % colours.len()];
            let path: Vec<String> =
                pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y.clamp(0.0, 1.0)))).collect();
            let _ = writeln!(
                s,
                "<polyline fill=\"none\" stroke=\"{c}\" stroke-width=\"1.5\" points=\"{}\"/>",
                path.join(" ")
            );
            let _ =
                writeln!(s, "<text x=\"{}\" y=\"{}\" fill=\"{c}\">{name}</text>", px(0.62), py(0.95) + 13.0 * i as f64);
        }
    };
    let recall_series: Vec<(String, Vec<(f64, f64)>)> = report
        .recall_curves
        .iter()
        .map(|(n, r)| {
            let pts = report.recall_ious.iter().zip(r).map(|(&t, &v)| ((t - 0.5) / 0.5, v)).collect();
            (format!("{n} proposals"), pts)
        })
        .collect();
    let iou_ticks: Vec<(f64, String)> =
        (0..=5).map(|i| (i as f64 / 5.0, format!("{:.1}", 0.5 + 0.1 * i as f64))).collect();
    panel(0.0, "recall vs IoU", "IoU", &iou_ticks, &recall_series);
    let lo = (*report.auc_budgets.first().unwrap_or(&1) as f64).log10();
    let hi = (*report.auc_budgets.last().unwrap_or(&1000) as f64).log10();
    let span = (hi - lo).max(1e-9);
    let pts: Vec<(f64, f64)> =
        report.auc_budgets.iter().zip(&report.ar_curve).map(|(&n, &v)| (((n as f64).log10() - lo) / span, v)).collect();
    let budget_ticks: Vec<(f64, String)> =
        [1, 10, 100, 1000].iter().map(|&n| (((n as f64).log10() - lo) / span, n.to_string())).collect();
    panel(W, "AR vs proposals", "proposals", &budget_ticks, &[(format!("AUC {:.3}", report.auc), pts)]);
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn prop(b: BBox, score: f64) -> Proposal {
        Proposal { bbox: b, score, level: 0 }
    }

    fn gt(b: BBox) -> EvalGt {
        EvalGt { bbox: b, area: b.area(), evaluated: true }
    }

    fn random_box(rng: &mut ChaCha8Rng) -> BBox {
        let (x, y) = (rng.random_range(0.0..80.0), rng.random_range(0.0..80.0));
        BBox::new(x, y, x + rng.random_range(5.0..40.0), y + rng.random_range(5.0..40.0))
    }

    /// Suppression by an explicit kept/suppressed sweep over the full IoU matrix.
    fn nms_reference(props: &[Proposal], t: f64) -> Vec<Proposal> {
        let mut order: Vec<usize> = (0..props.len()).collect();
        order.sort_by(|&a, &b| props[b].score.partial_cmp(&props[a].score).unwrap().then(a.cmp(&b)));
        let n = props.len();
        let m: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| iou(&props[i].bbox, &props[j].bbox)).collect()).collect();
        let mut suppressed = vec![false; n];
        let mut out = Vec::new();
        for (pos, &i) in order.iter().enumerate() {
            if suppressed[i] {
                continue;
            }
            out.push(props[i]);
            for &j in &order[pos + 1..] {
                if m[i][j] > t {
                    suppressed[j] = true;
                }
            }
        }
        out
    }

    #[test]
    fn nms_examples() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(vec![prop(b, 0.4), prop(b, 0.9)], 0.7), vec![prop(b, 0.9)]);
        let far = BBox::new(50.0, 50.0, 60.0, 60.0);
        assert_eq!(nms(vec![prop(b, 0.4), prop(far, 0.9)], 0.7).len(), 2);
    }

    #[test]
    fn nms_matches_reference() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let props: Vec<_> =
                (0..50).map(|_| prop(random_box(&mut rng), (rng.random_range(0..10) as f64) / 10.0)).collect();
            for t in [0.3, 0.5, 0.7] {
                assert_eq!(nms(props.clone(), t), nms_reference(&props, t));
            }
        }
    }

    #[test]
    fn recall_basics() {
        let gts: Vec<_> = (0..3).map(|i| gt(BBox::new(i as f64 * 20.0, 0.0, i as f64 * 20.0 + 10.0, 10.0))).collect();
        let perfect: Vec<_> = gts.iter().map(|g| prop(g.bbox, 0.9)).collect();
        for t in iou_thresholds() {
            assert_eq!(recall_at(&perfect, &gts, 1000, t), Some(1.0));
        }
        assert_eq!(recall_at(&perfect, &gts, 1000, 1.0), Some(1.0));
        assert_eq!(recall_at(&[], &gts, 1000, 0.5), Some(0.0));
        assert_eq!(recall_at(&perfect, &gts, 2, 0.5), Some(2.0 / 3.0));
        assert_eq!(recall_at(&perfect, &[], 10, 0.5), None);
    }

    #[test]
    fn ar_at_fixed_overlap() {
        // A copy shifted by x widths overlaps (1 − x) / (1 + x) = 0.72.
        let g = BBox::new(0.0, 0.0, 100.0, 100.0);
        let x = 0.28 / 1.72;
        let p = BBox::new(100.0 * x, 0.0, 100.0 + 100.0 * x, 100.0);
        assert!((iou(&g, &p) - 0.72).abs() < 1e-12);
        assert_eq!(average_recall(&[prop(p, 0.5)], &[gt(g)], 100), Some(0.5));
    }

    #[test]
    fn crowd_only_proposals_are_free() {
        let crowd = EvalGt { evaluated: false, ..gt(BBox::new(0.0, 0.0, 50.0, 50.0)) };
        let real = gt(BBox::new(60.0, 60.0, 80.0, 80.0));
        let props = [prop(crowd.bbox, 0.9), prop(real.bbox, 0.8)];
        assert_eq!(recall_at(&props, &[crowd.clone(), real.clone()], 2, 0.5), Some(1.0));
        assert_eq!(recall_at(&props, std::slice::from_ref(&crowd), 2, 0.5), None);
        // The crowd proposal still consumes the budget.
        assert_eq!(recall_at(&props, &[crowd, real], 1, 0.5), Some(0.0));
    }

    /// Largest number of gts any one-to-one assignment can cover.
    fn optimal_matching(props: &[Proposal], gts: &[EvalGt], tau: f64) -> usize {
        fn go(i: usize, props: &[Proposal], gts: &[EvalGt], used: &mut Vec<bool>, tau: f64) -> usize {
            if i == props.len() {
                return 0;
            }
            let mut best = go(i + 1, props, gts, used, tau);
            for j in 0..gts.len() {
                if !used[j] && iou(&props[i].bbox, &gts[j].bbox) >= tau {
                    used[j] = true;
                    best = best.max(1 + go(i + 1, props, gts, used, tau));
                    used[j] = false;
                }
            }
            best
        }
        go(0, props, gts, &mut vec![false; gts.len()], tau)
    }

    #[test]
    fn greedy_matcher_against_brute_force() {
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gts: Vec<_> = (0..5).map(|_| gt(random_box(&mut rng))).collect();
            let mut props: Vec<_> = (0..8)
                .map(|i| {
                    let b = if i < 5 && rng.random_bool(0.6) {
                        let g = gts[i].bbox;
                        g.translated(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0))
                    } else {
                        random_box(&mut rng)
                    };
                    prop(b, rng.random_range(0.0..1.0))
                })
                .collect();
            sort_by_score(&mut props);
            for tau in [0.5, 0.7, 0.9] {
                let m = greedy_match(&props, &gts, 8, tau);
                // One-to-one.
                let mut seen = std::collections::HashSet::new();
                assert!(m.iter().flatten().all(|j| seen.insert(*j)));
                // Each proposal took the best gt still free at its turn.
                let mut free = vec![true; gts.len()];
                for (p, got) in props.iter().zip(&m) {
                    let want = (0..gts.len()).filter(|&j| free[j] && iou(&p.bbox, &gts[j].bbox) >= tau).fold(
                        None::<usize>,
                        |b, j| match b {
                            Some(k) if iou(&p.bbox, &gts[k].bbox) >= iou(&p.bbox, &gts[j].bbox) => Some(k),
                            _ => Some(j),
                        },
                    );
                    assert_eq!(*got, want);
                    if let Some(j) = want {
                        free[j] = false;
                    }
                }
                assert!(m.iter().flatten().count() <= optimal_matching(&props, &gts, tau));
            }
        }
    }

    #[test]
    fn auc_closed_forms() {
        assert!((auc_from_curve(&[1.0; 10]) - 1.0).abs() < 1e-12);
        assert_eq!(auc_from_curve(&[0.0; 10]), 0.0);
        // Step from 0 to 1 between budgets 10 and 20: the ramp contributes half
        // of log10(2), the rest is full height from 20 to 1000.
        let step = [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let expect = (0.5 * 2f64.log10() + (1000f64 / 20.0).log10()) / 3.0;
        assert!((auc_from_curve(&step) - expect).abs() < 1e-12);
    }

    #[test]
    fn size_buckets() {
        let small = gt(BBox::new(0.0, 0.0, 20.0, 20.0));
        let medium = gt(BBox::new(30.0, 30.0, 80.0, 80.0));
        let large = gt(BBox::new(0.0, 100.0, 100.0, 200.0));
        let gts = [small.clone(), medium.clone(), large.clone()];
        let props = [prop(small.bbox, 0.9), prop(large.bbox, 0.8)];
        assert_eq!(size_stratified(&props, &gts, 1000), [Some(1.0), Some(0.0), Some(1.0)]);
        assert_eq!(size_stratified(&props, &gts[..1], 1000), [Some(1.0), None, None]);
        assert_eq!(SizeBucket::of(1023.0), SizeBucket::Small);
        assert_eq!(SizeBucket::of(1024.0), SizeBucket::Medium);
        assert_eq!(SizeBucket::of(9216.0), SizeBucket::Large);
    }

    #[test]
    fn gt_as_proposals_scores_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let items: Vec<(Vec<Proposal>, Vec<GtInstance>)> = (0..10)
            .map(|_| {
                let gts: Vec<GtInstance> =
                    (0..rng.random_range(1..6)).map(|_| GtInstance::new(random_box(&mut rng), 1)).collect();
                let props = gts.iter().map(|g| prop(g.bbox, 0.9)).collect();
                (props, gts)
            })
            .collect();
        let cfg = EvalConfig { nms_iou: None, ..Default::default() };
        let r = evaluate(&items, &cfg, "h");
        assert_eq!((r.ar_10, r.ar_100, r.ar_1k), (1.0, 1.0, 1.0));
        // With g objects, budget N recovers min(N, g) of them.
        let curve: Vec<f64> = AUC_BUDGETS
            .iter()
            .map(|&n| {
                let per: Vec<f64> = items.iter().map(|(_, g)| n.min(g.len()) as f64 / g.len() as f64).collect();
                per.iter().sum::<f64>() / per.len() as f64
            })
            .collect();
        assert!((r.auc - auc_from_curve(&curve)).abs() < 1e-12);
        let single: Vec<_> = items.iter().map(|(p, g)| (p[..1].to_vec(), g[..1].to_vec())).collect();
        assert_eq!(evaluate(&single, &cfg, "h").auc, 1.0);
        let empty: Vec<_> = items.iter().map(|(_, g)| (Vec::new(), g.clone())).collect();
        let r = evaluate(&empty, &cfg, "h");
        assert_eq!((r.ar_10, r.ar_1k, r.auc), (0.0, 0.0, 0.0));
    }

    #[test]
    fn monotone_in_budget_and_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gts: Vec<_> = (0..6).map(|_| gt(random_box(&mut rng))).collect();
        let mut props: Vec<_> = (0..300).map(|_| prop(random_box(&mut rng), rng.random_range(0.0..1.0))).collect();
        sort_by_score(&mut props);
        let mut last = 0.0;
        for n in AUC_BUDGETS {
            let ar = average_recall(&props, &gts, n).unwrap();
            assert!(ar >= last);
            last = ar;
        }
        let mut last = 1.0;
        for t in iou_thresholds() {
            let r = recall_at(&props, &gts, 100, t).unwrap();
            assert!(r <= last);
            last = r;
        }
    }

    #[test]
    fn proposal_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.txt");
        let props = vec![prop(BBox::new(1.5, 2.0, 30.25, 40.0), 0.875), prop(BBox::new(0.0, 0.0, 1.0, 1.0), 1e-3)];
        write_proposals(&path, &props).unwrap();
        assert_eq!(read_proposals(&path).unwrap(), props);
        assert!(parse_proposals("1 2 3 4").is_err());
        assert!(parse_proposals("1 2 3 4 x").is_err());
        let m =
            ProposalManifest { config_hash: "abc".into(), entries: vec![(3, "a.txt".into()), (9, "b c.txt".into())] };
        assert_eq!(ProposalManifest::parse(&m.render()).unwrap(), m);
    }

    #[test]
    fn report_outputs() {
        let items = vec![(
            vec![prop(BBox::new(0.0, 0.0, 10.0, 10.0), 0.9)],
            vec![GtInstance::new(BBox::new(0.0, 0.0, 10.0, 10.0), 1)],
        )];
        let r = evaluate(&items, &EvalConfig::default(), "cafe");
        assert!(r.summary_csv().lines().nth(1).unwrap().ends_with(",cafe"));
        assert_eq!(r.curves_csv().lines().count(), 1 + 10 + 3 * 11);
        assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);
        let svg = plot_svg(&r);
        assert!(svg.starts_with("<svg") && svg.contains("cafe") && svg.matches("<polyline").count() == 4);
    }
}
