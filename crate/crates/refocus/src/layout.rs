//! Layouts: labeled bounding boxes, grid coordinate sets, and the
//! `label: (x1, y1, x2, y2)` text format.
//!
//! Coordinates are (left, top, right, bottom) with inclusive bounds, origin
//! at the top-left, x growing right and y growing down. A layout lives on a
//! pixel canvas; guidance runs on the attention grid, so [`Layout::to_grid`]
//! rescales every box with floor arithmetic.
//!
//! Text format grammar (the LLM wire format):
//!
//! ```text
//! layout := entry ((',' | ';' | newline | whitespace) entry)*
//! entry  := label ':' '(' int ',' int ',' int ',' int ')'
//! label  := any run of characters without ',' ';' ':' '(' ')' or newline
//! ```
//!
//! Labels are trimmed and lower-cased. Prose before the first entry is
//! ignored as long as it is separated from the label by one of the
//! separator characters (this accepts replies like "Here are the corrected
//! coordinates: cat: (1, 2, 3, 4)").

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inclusive box: `x1 <= x <= x2`, `y1 <= y <= y2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "[u32; 4]", try_from = "[u32; 4]")]
pub struct BBox {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

impl BBox {
    pub fn new(x1: u32, y1: u32, x2: u32, y2: u32) -> Result<Self> {
        if x1 > x2 {
            return Err(Error::Invalid {
                what: "bounding box",
                reason: format!("x1 ({x1}) > x2 ({x2})"),
            });
        }
        if y1 > y2 {
            return Err(Error::Invalid {
                what: "bounding box",
                reason: format!("y1 ({y1}) > y2 ({y2})"),
            });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> u32 {
        self.x2 - self.x1 + 1
    }

    pub fn height(&self) -> u32 {
        self.y2 - self.y1 + 1
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        self.x1 <= x && x <= self.x2 && self.y1 <= y && y <= self.y2
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x1 + self.x2) as f64 / 2.0,
            (self.y1 + self.y2) as f64 / 2.0,
        )
    }

    fn fits_in(&self, w: u32, h: u32) -> bool {
        self.x2 < w && self.y2 < h
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl TryFrom<[u32; 4]> for BBox {
    type Error = Error;
    fn try_from(v: [u32; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

/// One grounded region: a box, the phrase it carries, and the indices of
/// the caption tokens that phrase grounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutEntry {
    #[serde(rename = "label")]
    pub phrase: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(rename = "tokens", default)]
    pub token_indices: Vec<usize>,
}

/// A canvas plus its labeled boxes. Boxes may overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub canvas_w: u32,
    pub canvas_h: u32,
    pub entries: Vec<LayoutEntry>,
}

#[derive(Serialize, Deserialize)]
struct LayoutWire {
    canvas: [u32; 2],
    entries: Vec<LayoutEntry>,
}

impl Serialize for Layout {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        LayoutWire {
            canvas: [self.canvas_w, self.canvas_h],
            entries: self.entries.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Layout {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let wire = LayoutWire::deserialize(d)?;
        Layout::new(wire.canvas[0], wire.canvas[1], wire.entries).map_err(serde::de::Error::custom)
    }
}

impl Layout {
    pub fn new(canvas_w: u32, canvas_h: u32, entries: Vec<LayoutEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Invalid {
                what: "layout",
                reason: "no entries".into(),
            });
        }
        for e in &entries {
            if !e.bbox.fits_in(canvas_w, canvas_h) {
                return Err(Error::Invalid {
                    what: "layout",
                    reason: format!(
                        "box {:?} exceeds the {canvas_w}x{canvas_h} canvas",
                        <[u32; 4]>::from(e.bbox)
                    ),
                });
            }
        }
        Ok(Self {
            canvas_w,
            canvas_h,
            entries,
        })
    }

    /// Rescale every box onto a `grid_w × grid_h` attention grid.
    pub fn to_grid(&self, grid_w: usize, grid_h: usize) -> GridLayout {
        GridLayout {
            width: grid_w,
            height: grid_h,
            entries: self
                .entries
                .iter()
                .map(|e| LayoutEntry {
                    phrase: e.phrase.clone(),
                    bbox: rescale_box(
                        &e.bbox,
                        (self.canvas_w, self.canvas_h),
                        (grid_w, grid_h),
                    ),
                    token_indices: e.token_indices.clone(),
                })
                .collect(),
        }
    }
}

/// A layout already expressed in attention-grid cells.
#[derive(Debug, Clone, PartialEq)]
pub struct GridLayout {
    pub width: usize,
    pub height: usize,
    pub entries: Vec<LayoutEntry>,
}

impl GridLayout {
    pub fn foreground(&self, entry: usize) -> Result<CoordSet> {
        foreground_set(&self.entries[entry].bbox, (self.width, self.height))
    }

    pub fn background(&self, entry: usize) -> Result<CoordSet> {
        background_set(&self.entries[entry].bbox, (self.width, self.height))
    }

    /// B^p for a pixel: everything outside the union of the foregrounds of
    /// the boxes containing p. The full grid when no box contains p.
    pub fn exclusion(&self, p: (usize, usize)) -> CoordSet {
        exclusion_set(self, p)
    }
}

/// Membership bitmask over the cells of a `w × h` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoordSet {
    width: usize,
    height: usize,
    mask: Vec<bool>,
}

impl CoordSet {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            mask: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            mask: vec![true; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn insert(&mut self, x: usize, y: usize) {
        self.mask[y * self.width + x] = true;
    }

    pub fn remove(&mut self, x: usize, y: usize) {
        self.mask[y * self.width + x] = false;
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&m| m)
    }

    /// Row-major mask, the layout [`crate::autodiff::Tape::masked_max`] expects.
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Cells in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(move |(i, _)| (i % w, i / w))
    }

    pub fn complement(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            mask: self.mask.iter().map(|&m| !m).collect(),
        }
    }

    pub fn intersects(&self, other: &CoordSet) -> bool {
        self.mask
            .iter()
            .zip(&other.mask)
            .any(|(&a, &b)| a && b)
    }
}

/// Floor-rescale a canvas box onto grid cells, clamped to the grid. Chosen
/// so that enlarging a canvas box never shrinks the grid box.
pub fn rescale_box(bbox: &BBox, canvas: (u32, u32), grid: (usize, usize)) -> BBox {
    let (cw, ch) = canvas;
    let (gw, gh) = grid;
    debug_assert!(gw >= 1 && gh >= 1);
    let scale = |v: u32, c: u32, g: usize| -> u32 {
        let raw = (v as u64 * g as u64) / c.max(1) as u64;
        (raw as u32).min(g as u32 - 1)
    };
    let mut x1 = scale(bbox.x1, cw, gw);
    let mut y1 = scale(bbox.y1, ch, gh);
    let x2 = scale(bbox.x2, cw, gw).max(x1);
    let y2 = scale(bbox.y2, ch, gh).max(y1);
    // Inclusive bounds cannot produce an empty box after floor+clamp, but
    // guard anyway: guidance on an empty foreground would be vacuous.
    if x1 > x2 {
        x1 = x2;
    }
    if y1 > y2 {
        y1 = y2;
    }
    BBox { x1, y1, x2, y2 }
}

fn check_box_in_grid(bbox: &BBox, grid: (usize, usize)) -> Result<()> {
    if bbox.x2 as usize >= grid.0 || bbox.y2 as usize >= grid.1 {
        return Err(Error::Invalid {
            what: "grid box",
            reason: format!(
                "box {:?} outside {}x{} grid",
                <[u32; 4]>::from(*bbox),
                grid.0,
                grid.1
            ),
        });
    }
    Ok(())
}

/// The inclusive rectangle of cells covered by a grid-space box.
pub fn foreground_set(bbox: &BBox, grid: (usize, usize)) -> Result<CoordSet> {
    check_box_in_grid(bbox, grid)?;
    let mut set = CoordSet::empty(grid.0, grid.1);
    for y in bbox.y1..=bbox.y2 {
        for x in bbox.x1..=bbox.x2 {
            set.insert(x as usize, y as usize);
        }
    }
    Ok(set)
}

/// Complement of [`foreground_set`] within the grid.
pub fn background_set(bbox: &BBox, grid: (usize, usize)) -> Result<CoordSet> {
    Ok(foreground_set(bbox, grid)?.complement())
}

/// The grid minus the union of foregrounds of every box containing `p`.
pub fn exclusion_set(layout: &GridLayout, p: (usize, usize)) -> CoordSet {
    let mut set = CoordSet::full(layout.width, layout.height);
    let (px, py) = (p.0 as u32, p.1 as u32);
    for entry in &layout.entries {
        if entry.bbox.contains(px, py) {
            for y in entry.bbox.y1..=entry.bbox.y2 {
                for x in entry.bbox.x1..=entry.bbox.x2 {
                    set.remove(x as usize, y as usize);
                }
            }
        }
    }
    set
}

/// Render a layout in the text wire format. Token indices are not part of
/// the format; grounding is reattached after parsing.
pub fn format_layout_text(layout: &Layout) -> String {
    layout
        .entries
        .iter()
        .map(|e| {
            format!(
                "{}: ({}, {}, {}, {})",
                e.phrase, e.bbox.x1, e.bbox.y1, e.bbox.x2, e.bbox.y2
            )
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// Parse `label: (x1, y1, x2, y2)` entries out of free text.
pub fn parse_layout_text(text: &str, canvas: (u32, u32)) -> Result<Layout> {
    let bytes = text.as_bytes();
    let mut entries = Vec::new();
    let mut cursor = 0usize;
    let mut label_floor = 0usize; // labels never reach back past this

    while cursor < bytes.len() {
        // find the next ':' that opens an entry: ':' then optional ws then '('
        let Some(rel) = text[cursor..].find(':') else {
            break;
        };
        let colon = cursor + rel;
        let mut after = colon + 1;
        while after < bytes.len() && (bytes[after] == b' ' || bytes[after] == b'\t') {
            after += 1;
        }
        if after >= bytes.len() || bytes[after] != b'(' {
            // not an entry colon; labels may start after it ("coordinates: cat: (...)")
            label_floor = colon + 1;
            cursor = colon + 1;
            continue;
        }
        let open = after;

        // label: text between the last separator (or floor) and the colon
        let mut start = label_floor;
        for (i, &b) in bytes[label_floor..colon].iter().enumerate() {
            if matches!(b, b',' | b';' | b'\n' | b')' | b'(' | b'.') {
                start = label_floor + i + 1;
            }
        }
        let label = text[start..colon].trim().to_lowercase();
        if label.is_empty() {
            return Err(Error::Parse {
                offset: colon,
                reason: "entry has an empty label".into(),
            });
        }

        // the 4-integer tuple
        let Some(close_rel) = text[open..].find(')') else {
            return Err(Error::Parse {
                offset: open,
                reason: "unterminated coordinate tuple".into(),
            });
        };
        let close = open + close_rel;
        let inner = &text[open + 1..close];
        let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(Error::Parse {
                offset: open,
                reason: format!("expected 4 comma-separated coordinates, got {}", parts.len()),
            });
        }
        let mut coords = [0u32; 4];
        for (slot, part) in coords.iter_mut().zip(&parts) {
            *slot = part.parse::<u32>().map_err(|_| Error::Parse {
                offset: open,
                reason: format!("non-integer coordinate {part:?}"),
            })?;
        }
        let [x1, y1, x2, y2] = coords;
        if x1 > x2 {
            return Err(Error::Parse {
                offset: open,
                reason: format!("x1 ({x1}) > x2 ({x2})"),
            });
        }
        if y1 > y2 {
            return Err(Error::Parse {
                offset: open,
                reason: format!("y1 ({y1}) > y2 ({y2})"),
            });
        }
        if x2 >= canvas.0 || y2 >= canvas.1 {
            return Err(Error::Parse {
                offset: open,
                reason: format!(
                    "box ({x1}, {y1}, {x2}, {y2}) outside the {}x{} canvas",
                    canvas.0, canvas.1
                ),
            });
        }
        entries.push(LayoutEntry {
            phrase: label,
            bbox: BBox { x1, y1, x2, y2 },
            token_indices: Vec::new(),
        });
        cursor = close + 1;
        label_floor = close + 1;
    }

    if entries.is_empty() {
        return Err(Error::Parse {
            offset: 0,
            reason: "no `label: (x1, y1, x2, y2)` entries found".into(),
        });
    }
    Layout::new(canvas.0, canvas.1, entries)
}
