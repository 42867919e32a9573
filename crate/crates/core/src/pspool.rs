//! Position-sensitive pooling of head score maps over anchor windows, and box
//! coding.
//!
//! Channel layout with grid size `k`: cls channel `g = gy·k + gx` holds the
//! evidence for grid cell `(gy, gx)`; reg channel `c·k² + g` holds coordinate
//! `c` of `(t_x, t_y, t_w, t_h)` for that cell. Without position sensitivity
//! each feature cell carries `R` anchors: reg channel `4r + c`, cls channel `r`.

use std::ops::Range;

use crate::anchors::{Anchor, AnchorShape, BBox};
use crate::error::{shape_err, Error, Result};
use crate::eval::Proposal;
use crate::graph::{Backward, Tape, Var};
use crate::ops::sigmoid_scalar;
use crate::tensor::{Real, Tensor4};

/// Largest `|t_w|`, `|t_h|` accepted by [`decode_box`].
pub const MAX_LOG_SCALE: f64 = 8.0;

/// Bin boundaries `round(i·len/k)` for `i = 0..=k`; bins may be empty when
/// `len < k`.
pub fn native_bins(len: usize, k: usize) -> Vec<Range<usize>> {
    // Half-away-from-zero rounding of a non-negative ratio, in integers.
    let edge = |i: usize| (2 * i * len + k) / (2 * k);
    (0..k).map(|i| edge(i)..edge(i + 1)).collect()
}

/// Like [`native_bins`], but an empty bin takes the range of its nearest
/// non-empty neighbour (the preceding one on a tie), so every bin has at
/// least one cell.
pub fn grid_bins(len: usize, k: usize) -> Vec<Range<usize>> {
    assert!(len > 0 && k > 0, "grid_bins needs a non-empty window and k >= 1");
    let native = native_bins(len, k);
    (0..k)
        .map(|i| {
            if !native[i].is_empty() {
                return native[i].clone();
            }
            (1..k)
                .flat_map(|d| [i.checked_sub(d), Some(i + d).filter(|&j| j < k)])
                .flatten()
                .find(|&j| !native[j].is_empty())
                .map(|j| native[j].clone())
                .expect("len > 0 leaves a non-empty bin")
        })
        .collect()
}

/// Where one anchor reads from the head maps of its level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSite {
    pub batch: usize,
    pub row: usize,
    pub col: usize,
    pub shape: AnchorShape,
}

impl PoolSite {
    pub fn from_anchor(batch: usize, a: &Anchor) -> Self {
        Self { batch, row: a.row, col: a.col, shape: a.shape }
    }
}

/// Pooled regression offsets and objectness of one anchor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PsPoolResult {
    pub t: [f64; 4],
    pub o: f64,
    pub score: f64,
}

impl PsPoolResult {
    fn from_row(row: &[f64]) -> Self {
        Self { t: [row[0], row[1], row[2], row[3]], o: row[4], score: sigmoid_scalar(row[4]) }
    }
}

/// Pooling mode for a set of head maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    /// Position-sensitive grid of `k × k`.
    Grid { k: usize },
    /// One anchor per ratio per cell.
    Cell { ratios: usize },
}

impl PoolMode {
    pub fn channels(self) -> (usize, usize) {
        match self {
            PoolMode::Grid { k } => (4 * k * k, k * k),
            PoolMode::Cell { ratios } => (4 * ratios, ratios),
        }
    }
}

/// Cell regions read by one site, one per grid bin.
struct SiteReads {
    regions: Vec<(Range<usize>, Range<usize>)>,
}

fn site_regions(site: &PoolSite, mode: PoolMode, h: usize, w: usize) -> Result<SiteReads> {
    let regions = match (mode, site.shape) {
        (PoolMode::Grid { k }, AnchorShape::Window { w: ww, h: wh }) => {
            if site.row + wh > h || site.col + ww > w {
                return Err(Error::InvalidArgument(format!(
                    "ps_pool: {ww}x{wh} window at ({}, {}) leaves the {h}x{w} map",
                    site.row, site.col
                )));
            }
            let rows = grid_bins(wh, k);
            let cols = grid_bins(ww, k);
            let mut out = Vec::with_capacity(k * k);
            for r in &rows {
                for c in &cols {
                    out.push((site.row + r.start..site.row + r.end, site.col + c.start..site.col + c.end));
                }
            }
            out
        }
        (PoolMode::Cell { ratios }, AnchorShape::Grid { ratio }) => {
            if site.row >= h || site.col >= w || ratio >= ratios {
                return Err(Error::InvalidArgument(format!(
                    "cell pool: site ({}, {}) ratio {ratio} outside {h}x{w} map with {ratios} ratios",
                    site.row, site.col
                )));
            }
            vec![(site.row..site.row + 1, site.col..site.col + 1)]
        }
        (mode, shape) => {
            return Err(Error::InvalidArgument(format!("pooling mode {mode:?} cannot read a {shape:?} anchor")));
        }
    };
    Ok(SiteReads { regions })
}

/// Channel read by output slot `slot` (0..4 regression, 4 objectness) for
/// region `g`.
fn channel(mode: PoolMode, site: &PoolSite, slot: usize, g: usize) -> usize {
    match (mode, site.shape) {
        (PoolMode::Grid { k }, _) => {
            if slot < 4 {
                slot * k * k + g
            } else {
                g
            }
        }
        (_, AnchorShape::Grid { ratio }) => {
            if slot < 4 {
                4 * ratio + slot
            } else {
                ratio
            }
        }
        _ => unreachable!("validated by site_regions"),
    }
}

fn check_maps<T: Real>(reg: &Tensor4<T>, cls: &Tensor4<T>, mode: PoolMode) -> Result<()> {
    let (rc, cc) = mode.channels();
    if reg.channels() != rc || cls.channels() != cc {
        return shape_err(format!(
            "pool: expected {rc} reg / {cc} cls channels, got {} / {}",
            reg.channels(),
            cls.channels()
        ));
    }
    if reg.dims()[2..] != cls.dims()[2..] || reg.batch() != cls.batch() {
        return shape_err(format!("pool: reg {:?} and cls {:?} disagree", reg.dims(), cls.dims()));
    }
    Ok(())
}

fn region_sum<T: Real>(x: &Tensor4<T>, b: usize, c: usize, rows: &Range<usize>, cols: &Range<usize>) -> T {
    let w = x.width();
    let plane = x.plane(b, c);
    let mut acc = T::zero();
    for y in rows.clone() {
        for v in &plane[y * w + cols.start..y * w + cols.end] {
            acc += *v;
        }
    }
    acc
}

/// Pools every site into an `(n, 5, 1, 1)` tensor of `(t_x, t_y, t_w, t_h, o)`.
pub fn pool_sites<T: Real>(
    reg: &Tensor4<T>,
    cls: &Tensor4<T>,
    sites: &[PoolSite],
    mode: PoolMode,
) -> Result<Tensor4<T>> {
    check_maps(reg, cls, mode)?;
    let [nb, _, h, w] = reg.dims();
    let mut out = Vec::with_capacity(sites.len() * 5);
    for site in sites {
        if site.batch >= nb {
            return Err(Error::InvalidArgument(format!("pool: batch index {} out of {nb}", site.batch)));
        }
        let reads = site_regions(site, mode, h, w)?;
        let ng = T::of(reads.regions.len() as f64);
        for slot in 0..5 {
            let map = if slot < 4 { reg } else { cls };
            let mut acc = T::zero();
            for (g, (rows, cols)) in reads.regions.iter().enumerate() {
                let count = T::of((rows.len() * cols.len()) as f64);
                acc += region_sum(map, site.batch, channel(mode, site, slot, g), rows, cols) / count;
            }
            out.push(acc / ng);
        }
    }
    Tensor4::new([sites.len(), 5, 1, 1], out)
}

/// Pools one window anchor with a `k × k` grid.
pub fn ps_pool<T: Real>(reg: &Tensor4<T>, cls: &Tensor4<T>, site: &PoolSite, k: usize) -> Result<PsPoolResult> {
    let pooled = pool_sites(reg, cls, std::slice::from_ref(site), PoolMode::Grid { k })?;
    let row: Vec<f64> = pooled.data().iter().map(|v| v.as_f64()).collect();
    Ok(PsPoolResult::from_row(&row))
}

/// Results of [`pool_sites`] as plain records.
pub fn pooled_results<T: Real>(pooled: &Tensor4<T>) -> Vec<PsPoolResult> {
    pooled.data().chunks(5).map(|r| PsPoolResult::from_row(&r.iter().map(|v| v.as_f64()).collect::<Vec<_>>())).collect()
}

struct PoolRule {
    sites: Vec<PoolSite>,
    mode: PoolMode,
}

impl<T: Real> Backward<T> for PoolRule {
    fn backward(&self, inputs: &[&Tensor4<T>], _output: &Tensor4<T>, grad_out: &[T]) -> Vec<Option<Vec<T>>> {
        let (reg, cls) = (inputs[0], inputs[1]);
        let [_, _, h, w] = reg.dims();
        let mut greg = vec![T::zero(); reg.len()];
        let mut gcls = vec![T::zero(); cls.len()];
        for (i, site) in self.sites.iter().enumerate() {
            let reads = site_regions(site, self.mode, h, w).expect("validated in forward");
            let ng = reads.regions.len() as f64;
            for slot in 0..5 {
                let go = grad_out[i * 5 + slot];
                if go == T::zero() {
                    continue;
                }
                let (map, grad) = if slot < 4 { (reg, &mut greg) } else { (cls, &mut gcls) };
                for (g, (rows, cols)) in reads.regions.iter().enumerate() {
                    let share = go / T::of(ng * (rows.len() * cols.len()) as f64);
                    let c = channel(self.mode, site, slot, g);
                    for y in rows.clone() {
                        let base = map.offset(site.batch, c, y, 0);
                        for v in &mut grad[base + cols.start..base + cols.end] {
                            *v += share;
                        }
                    }
                }
            }
        }
        vec![Some(greg), Some(gcls)]
    }
}

/// Records [`pool_sites`] on a tape.
pub fn pool_var<T: Real>(tape: &mut Tape<T>, reg: Var, cls: Var, sites: Vec<PoolSite>, mode: PoolMode) -> Result<Var> {
    let y = pool_sites(tape.value(reg), tape.value(cls), &sites, mode)?;
    Ok(tape.push(y, vec![reg, cls], Box::new(PoolRule { sites, mode })))
}

/// Offsets of `gt` relative to `anchor`: centre shift in anchor units and
/// log size ratio.
pub fn encode_box(anchor: &BBox, gt: &BBox) -> [f64; 4] {
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [(gcx - acx) / aw, (gcy - acy) / ah, (gt.width() / aw).ln(), (gt.height() / ah).ln()]
}

/// Inverse of [`encode_box`]. Also reports whether a size offset had to be
/// clamped to `±MAX_LOG_SCALE`.
pub fn decode_box_checked(anchor: &BBox, t: &[f64; 4]) -> (BBox, bool) {
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let tw = t[2].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
    let th = t[3].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
    let clamped = tw != t[2] || th != t[3];
    (BBox::from_center(acx + t[0] * aw, acy + t[1] * ah, aw * tw.exp(), ah * th.exp()), clamped)
}

pub fn decode_box(anchor: &BBox, t: &[f64; 4]) -> BBox {
    decode_box_checked(anchor, t).0
}

/// Drops proposals with any coordinate outside `[0, width] × [0, height]`.
pub fn filter_image_bounds(proposals: Vec<Proposal>, width: usize, height: usize) -> Vec<Proposal> {
    proposals.into_iter().filter(|p| p.bbox.inside(width as f64, height as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::WindowProfile;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn window(row: usize, col: usize, w: usize, h: usize) -> PoolSite {
        PoolSite { batch: 0, row, col, shape: AnchorShape::Window { w, h } }
    }

    fn random(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4<f64> {
        Tensor4::from_fn(dims, |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn bins_divide_evenly() {
        assert_eq!(native_bins(8, 4), vec![0..2, 2..4, 4..6, 6..8]);
        assert_eq!(native_bins(9, 4), vec![0..2, 2..5, 5..7, 7..9]);
        // 3 cells over 4 bins: edges 0, 1, 2, 2, 3.
        assert_eq!(native_bins(3, 4), vec![0..1, 1..2, 2..2, 2..3]);
        assert_eq!(grid_bins(3, 4), vec![0..1, 1..2, 1..2, 2..3]);
        assert_eq!(grid_bins(2, 4), vec![0..1, 0..1, 1..2, 1..2]);
    }

    #[test]
    fn native_bins_cover_every_profile_window() {
        let profile = WindowProfile::standard(5);
        for k in 1..=6 {
            for &(w, h) in profile.levels.iter().flatten() {
                let (rows, cols) = (native_bins(h, k), native_bins(w, k));
                let cells: usize = rows.iter().flat_map(|r| cols.iter().map(move |c| r.len() * c.len())).sum();
                assert_eq!(cells, w * h, "{w}x{h} k={k}");
                assert!(grid_bins(h, k).iter().all(|r| !r.is_empty() && r.end <= h));
            }
        }
    }

    #[test]
    fn constant_maps() {
        let reg = Tensor4::full([1, 64, 10, 10], 0.25);
        let cls = Tensor4::full([1, 16, 10, 10], 1.5);
        let r = ps_pool(&reg, &cls, &window(1, 2, 8, 4), 4).unwrap();
        assert_eq!(r.o, 1.5);
        assert_eq!(r.t, [0.25; 4]);
        assert!((r.score - 1.0 / (1.0 + (-1.5f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn grid_index_channels() {
        // cls channel g holds g everywhere: o = mean(0..16) = 7.5.
        let cls = Tensor4::from_fn([1, 16, 4, 4], |[_, c, _, _]| c as f64);
        let reg = Tensor4::zeros([1, 64, 4, 4]);
        assert_eq!(ps_pool(&reg, &cls, &window(0, 0, 4, 4), 4).unwrap().o, 7.5);
    }

    #[test]
    fn brute_force_grid_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let reg = random([2, 64, 12, 12], &mut rng);
        let cls = random([2, 16, 12, 12], &mut rng);
        for &(w, h) in &[(8, 8), (3, 9), (9, 3), (2, 4), (12, 12)] {
            let site = PoolSite { batch: 1, ..window(12 - h, 0, w, h) };
            let r = ps_pool(&reg, &cls, &site, 4).unwrap();
            // Each cell of grid (gy, gx) averaged directly from the maps.
            let mut expect = [0.0; 5];
            for gy in 0..4 {
                for gx in 0..4 {
                    let g = gy * 4 + gx;
                    let rr = grid_bins(h, 4)[gy].clone();
                    let cc = grid_bins(w, 4)[gx].clone();
                    let cells: Vec<(usize, usize)> = rr.flat_map(|y| cc.clone().map(move |x| (y, x))).collect();
                    let mean = |t: &Tensor4<f64>, ch: usize| {
                        cells.iter().map(|&(y, x)| t.at(1, ch, site.row + y, site.col + x)).sum::<f64>()
                            / cells.len() as f64
                    };
                    for (c, e) in expect[..4].iter_mut().enumerate() {
                        *e += mean(&reg, c * 16 + g) / 16.0;
                    }
                    expect[4] += mean(&cls, g) / 16.0;
                }
            }
            for (t, e) in r.t.iter().zip(&expect) {
                assert!((t - e).abs() < 1e-12);
            }
            assert!((r.o - expect[4]).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (r1, c1) = (random([1, 64, 10, 10], &mut rng), random([1, 16, 10, 10], &mut rng));
        let (r2, c2) = (random([1, 64, 10, 10], &mut rng), random([1, 16, 10, 10], &mut rng));
        let (a, b) = (0.7, -1.3);
        let mix = |x: &Tensor4<f64>, y: &Tensor4<f64>| {
            Tensor4::new(x.dims(), x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap()
        };
        let sites = [window(0, 0, 8, 8), window(1, 1, 3, 9), window(2, 0, 9, 3)];
        let p = pool_sites(&mix(&r1, &r2), &mix(&c1, &c2), &sites, PoolMode::Grid { k: 4 }).unwrap();
        let p1 = pool_sites(&r1, &c1, &sites, PoolMode::Grid { k: 4 }).unwrap();
        let p2 = pool_sites(&r2, &c2, &sites, PoolMode::Grid { k: 4 }).unwrap();
        for i in 0..p.len() {
            assert!((p.data()[i] - (a * p1.data()[i] + b * p2.data()[i])).abs() < 1e-5);
        }
    }

    #[test]
    fn cell_mode_reads_one_cell() {
        let reg = Tensor4::from_fn([1, 12, 3, 3], |[_, c, y, x]| (c * 100 + y * 10 + x) as f64);
        let cls = Tensor4::from_fn([1, 3, 3, 3], |[_, c, y, x]| -((c * 100 + y * 10 + x) as f64));
        let site = PoolSite { batch: 0, row: 2, col: 1, shape: AnchorShape::Grid { ratio: 2 } };
        let p = pool_sites(&reg, &cls, &[site], PoolMode::Cell { ratios: 3 }).unwrap();
        assert_eq!(p.data(), &[821.0, 921.0, 1021.0, 1121.0, -221.0]);
    }

    #[test]
    fn rejects_window_outside_map() {
        let reg = Tensor4::<f64>::zeros([1, 64, 8, 8]);
        let cls = Tensor4::<f64>::zeros([1, 16, 8, 8]);
        assert!(ps_pool(&reg, &cls, &window(1, 0, 8, 8), 4).is_err());
        assert!(ps_pool(&reg, &cls, &window(0, 0, 8, 8), 3).is_err());
    }

    #[test]
    fn box_coding_examples() {
        let a = BBox::new(0.0, 0.0, 100.0, 40.0);
        assert_eq!(decode_box(&a, &[0.0; 4]), a);
        assert_eq!(encode_box(&a, &a), [0.0; 4]);
        let moved = decode_box(&a, &[0.1, 0.0, 0.0, 0.0]);
        assert!((moved.center().0 - 60.0).abs() < 1e-12);
        let wide = decode_box(&a, &[0.0, 0.0, 2f64.ln(), 0.0]);
        assert!((wide.width() - 200.0).abs() < 1e-9);
        let (_, clamped) = decode_box_checked(&a, &[0.0, 0.0, 50.0, 0.0]);
        assert!(clamped);
    }

    #[test]
    fn bounds_filter() {
        let p = |x1: f64| Proposal { bbox: BBox::new(0.0, 0.0, x1, 10.0), score: 0.5, level: 0 };
        let kept = filter_image_bounds(vec![p(64.0), p(65.0), p(10.0)], 64, 64);
        assert_eq!(kept.len(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let props: Vec<Proposal> = (0..200)
            .map(|_| {
                let x0 = rng.random_range(-10.0..70.0);
                let y0 = rng.random_range(-10.0..70.0);
                let b = BBox::new(x0, y0, x0 + rng.random_range(1.0..30.0), y0 + rng.random_range(1.0..30.0));
                Proposal { bbox: b, score: 0.5, level: 0 }
            })
            .collect();
        let brute: Vec<_> = props
            .iter()
            .filter(|p| p.bbox.x0 >= 0.0 && p.bbox.y0 >= 0.0 && p.bbox.x1 <= 64.0 && p.bbox.y1 <= 64.0)
            .cloned()
            .collect();
        assert_eq!(filter_image_bounds(props, 64, 64), brute);
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(
            ax in 0.0..500.0f64, ay in 0.0..500.0f64, aw in 4.0..300.0f64, ah in 4.0..300.0f64,
            gx in 0.0..500.0f64, gy in 0.0..500.0f64, gw in 2.0..400.0f64, gh in 2.0..400.0f64,
        ) {
            let a = BBox::new(ax, ay, ax + aw, ay + ah);
            let g = BBox::new(gx, gy, gx + gw, gy + gh);
            let back = decode_box(&a, &encode_box(&a, &g));
            for (u, v) in [(back.x0, g.x0), (back.y0, g.y0), (back.x1, g.x1), (back.y1, g.y1)] {
                prop_assert!((u - v).abs() < 1e-5);
            }
        }
    }
}
