//! Sliding-window anchors mapped as `(w·s)×(h·s)` boxes, plus classic
//! per-cell grid anchors for comparison.

use serde::{Deserialize, Serialize};

/// Axis-aligned box in image pixels, half-open `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub const fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x1 > self.x0 && self.y1 > self.y0 && [self.x0, self.y0, self.x1, self.y1].iter().all(|v| v.is_finite())
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        w * h
    }

    pub fn scaled(&self, f: f64) -> BBox {
        BBox::new(self.x0 * f, self.y0 * f, self.x1 * f, self.y1 * f)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> BBox {
        BBox::new(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)
    }

    pub fn inside(&self, width: f64, height: f64) -> bool {
        self.x0 >= 0.0 && self.y0 >= 0.0 && self.x1 <= width && self.y1 <= height
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Window sizes `(w, h)` in feature cells for every pyramid level.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowProfile {
    pub levels: Vec<Vec<(usize, usize)>>,
}

pub const BASE_WINDOWS: [(usize, usize); 5] = [(8, 8), (4, 8), (8, 4), (3, 9), (9, 3)];
pub const TOP_EXTRA_WINDOWS: [(usize, usize); 5] = [(12, 12), (6, 12), (12, 6), (12, 4), (4, 12)];
pub const BOTTOM_EXTRA_WINDOWS: [(usize, usize); 3] = [(4, 4), (2, 4), (4, 2)];

impl WindowProfile {
    /// Base windows at every level; the finest level adds the small set and
    /// the coarsest adds the large set.
    pub fn standard(levels: usize) -> Self {
        let levels = (0..levels)
            .map(|l| {
                let mut shapes = BASE_WINDOWS.to_vec();
                if l == 0 {
                    shapes.extend(BOTTOM_EXTRA_WINDOWS);
                }
                if l + 1 == levels && levels > 1 {
                    shapes.extend(TOP_EXTRA_WINDOWS);
                }
                shapes
            })
            .collect();
        Self { levels }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnchorShape {
    /// Sliding window of `w × h` cells anchored at its top-left cell.
    Window { w: usize, h: usize },
    /// Cell-centred anchor with the given index into the ratio list.
    Grid { ratio: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub level: usize,
    pub row: usize,
    pub col: usize,
    pub shape: AnchorShape,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelAnchors {
    pub stride: usize,
    pub feat_h: usize,
    pub feat_w: usize,
    pub anchors: Vec<Anchor>,
}

/// Anchors per pyramid level in (level, shape, row, col) order.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub levels: Vec<LevelAnchors>,
}

impl AnchorSet {
    pub fn total(&self) -> usize {
        self.levels.iter().map(|l| l.anchors.len()).sum()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.anchors.len()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Anchor> {
        self.levels.iter().flat_map(|l| l.anchors.iter())
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.iter().map(|a| a.bbox).collect()
    }
}

/// Number of placements of a `w × h` window on an `fw × fh` map.
pub fn window_placements(fh: usize, fw: usize, w: usize, h: usize) -> usize {
    (fh + 1).saturating_sub(h) * (fw + 1).saturating_sub(w)
}

pub fn generate_window_anchors(
    image_h: usize,
    image_w: usize,
    strides: &[usize],
    profile: &WindowProfile,
) -> AnchorSet {
    let levels = strides
        .iter()
        .enumerate()
        .map(|(level, &s)| {
            let (fh, fw) = (image_h / s, image_w / s);
            let shapes = profile.levels.get(level).map(Vec::as_slice).unwrap_or(&[]);
            let mut anchors = Vec::with_capacity(shapes.iter().map(|&(w, h)| window_placements(fh, fw, w, h)).sum());
            for &(w, h) in shapes {
                for row in 0..(fh + 1).saturating_sub(h) {
                    for col in 0..(fw + 1).saturating_sub(w) {
                        let sf = s as f64;
                        let bbox = BBox::new(
                            (col * s) as f64,
                            (row * s) as f64,
                            ((col + w) * s) as f64,
                            ((row + h) * s) as f64,
                        );
                        debug_assert!(bbox.width() == w as f64 * sf && bbox.height() == h as f64 * sf);
                        anchors.push(Anchor { level, row, col, shape: AnchorShape::Window { w, h }, bbox });
                    }
                }
            }
            LevelAnchors { stride: s, feat_h: fh, feat_w: fw, anchors }
        })
        .collect();
    AnchorSet { levels }
}

/// Aspect ratios (height / width) of the grid-anchor mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridRatios {
    Three,
    Five,
}

impl GridRatios {
    pub fn values(self) -> &'static [f64] {
        match self {
            GridRatios::Three => &[1.0, 2.0, 0.5],
            GridRatios::Five => &[1.0, 2.0, 0.5, 3.0, 1.0 / 3.0],
        }
    }

    pub fn count(self) -> usize {
        self.values().len()
    }

    pub fn from_count(n: usize) -> Option<Self> {
        match n {
            3 => Some(GridRatios::Three),
            5 => Some(GridRatios::Five),
            _ => None,
        }
    }
}

/// One cell-centred anchor of area `(scale·s)²` per ratio per feature cell,
/// with no boundary filtering.
pub fn generate_grid_anchors(
    image_h: usize,
    image_w: usize,
    strides: &[usize],
    ratios: GridRatios,
    scale: f64,
) -> AnchorSet {
    let levels = strides
        .iter()
        .enumerate()
        .map(|(level, &s)| {
            let (fh, fw) = (image_h / s, image_w / s);
            let side = scale * s as f64;
            let mut anchors = Vec::with_capacity(fh * fw * ratios.count());
            for (ri, &r) in ratios.values().iter().enumerate() {
                let (w, h) = (side / r.sqrt(), side * r.sqrt());
                for row in 0..fh {
                    for col in 0..fw {
                        let (cx, cy) = ((col as f64 + 0.5) * s as f64, (row as f64 + 0.5) * s as f64);
                        let bbox = BBox::from_center(cx, cy, w, h);
                        anchors.push(Anchor { level, row, col, shape: AnchorShape::Grid { ratio: ri }, bbox });
                    }
                }
            }
            LevelAnchors { stride: s, feat_h: fh, feat_w: fw, anchors }
        })
        .collect();
    AnchorSet { levels }
}

/// Anchor-generation modes known to the audit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorMode {
    Window,
    Grid3,
    Grid5,
}

impl std::str::FromStr for AnchorMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "window" => Ok(AnchorMode::Window),
            "grid3" => Ok(AnchorMode::Grid3),
            "grid5" => Ok(AnchorMode::Grid5),
            other => Err(format!("unknown anchor mode `{other}` (window | grid3 | grid5)")),
        }
    }
}

/// Published per-level anchor counts (D2..D6) for a 640×640 input.
pub fn expected_counts_640(mode: AnchorMode) -> [usize; 5] {
    match mode {
        AnchorMode::Window => [194_058, 27_803, 5_963, 1_043, 83],
        AnchorMode::Grid3 => [76_800, 19_200, 4_800, 1_200, 300],
        AnchorMode::Grid5 => [128_000, 32_000, 8_000, 2_000, 500],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorAuditRow {
    pub level: usize,
    pub stride: usize,
    pub feature: (usize, usize),
    pub count: usize,
    pub expected: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorAudit {
    pub size: usize,
    pub mode: AnchorMode,
    pub rows: Vec<AnchorAuditRow>,
    pub total: usize,
    pub expected_total: Option<usize>,
}

impl AnchorAudit {
    /// True when every embedded expectation matches; sizes without published
    /// numbers have nothing to mismatch.
    pub fn matches(&self) -> bool {
        self.rows.iter().all(|r| r.expected.is_none_or(|e| e == r.count))
            && self.expected_total.is_none_or(|e| e == self.total)
    }

    pub fn render(&self) -> String {
        let mut s = format!("anchor audit: {0}x{0}, mode {1:?}\n", self.size, self.mode);
        s.push_str("level  stride  feature    count  expected\n");
        for r in &self.rows {
            let exp = r.expected.map_or("-".to_string(), |e| e.to_string());
            let flag = if r.expected.is_some_and(|e| e != r.count) { "  MISMATCH" } else { "" };
            s.push_str(&format!(
                "D{:<4} {:>6}  {:>3}x{:<3}  {:>7}  {:>8}{}\n",
                r.level + 2,
                r.stride,
                r.feature.0,
                r.feature.1,
                r.count,
                exp,
                flag
            ));
        }
        let exp = self.expected_total.map_or("-".to_string(), |e| e.to_string());
        s.push_str(&format!("total                    {:>7}  {:>8}\n", self.total, exp));
        s
    }
}

pub fn audit(size: usize, mode: AnchorMode, strides: &[usize]) -> AnchorAudit {
    let set = match mode {
        AnchorMode::Window => generate_window_anchors(size, size, strides, &WindowProfile::standard(strides.len())),
        AnchorMode::Grid3 => generate_grid_anchors(size, size, strides, GridRatios::Three, 8.0),
        AnchorMode::Grid5 => generate_grid_anchors(size, size, strides, GridRatios::Five, 8.0),
    };
    let published = (size == 640 && strides == [4, 8, 16, 32, 64]).then(|| expected_counts_640(mode));
    let rows = set
        .levels
        .iter()
        .enumerate()
        .map(|(level, l)| AnchorAuditRow {
            level,
            stride: l.stride,
            feature: (l.feat_h, l.feat_w),
            count: l.anchors.len(),
            expected: published.map(|p| p[level]),
        })
        .collect();
    AnchorAudit { size, mode, rows, total: set.total(), expected_total: published.map(|p| p.iter().sum()) }
}
