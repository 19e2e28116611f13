//! HMI screenshot handling: loading, percentage crops, LED classification,
//! synthetic screenshots and debug overlays.

use std::fmt;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VisionError {
    #[error("cannot read image {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode image {path}: {message}")]
    Decode { path: String, message: String },
    #[error("cannot write image {path}: {message}")]
    Encode { path: String, message: String },
    #[error("layout error: {0}")]
    Layout(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid bounding box: {0}")]
pub struct BBoxError(pub String);

/// Region of an image in percent of its width and height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBBox", into = "RawBBox")]
pub struct BBoxPct {
    left: f64,
    top: f64,
    width: f64,
    height: f64,
}

#[derive(Serialize, Deserialize)]
struct RawBBox {
    left: f64,
    top: f64,
    width: f64,
    height: f64,
}

impl TryFrom<RawBBox> for BBoxPct {
    type Error = BBoxError;
    fn try_from(r: RawBBox) -> Result<Self, BBoxError> {
        BBoxPct::new(r.left, r.top, r.width, r.height)
    }
}

impl From<BBoxPct> for RawBBox {
    fn from(b: BBoxPct) -> Self {
        RawBBox {
            left: b.left,
            top: b.top,
            width: b.width,
            height: b.height,
        }
    }
}

// Sums like 78 + 22 land a few ulps past 100 in binary.
const PCT_SLACK: f64 = 1e-9;

impl BBoxPct {
    pub fn new(left: f64, top: f64, width: f64, height: f64) -> Result<Self, BBoxError> {
        let all = [left, top, width, height];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 100.0) {
            return Err(BBoxError(format!(
                "components must lie in [0,100]: {left},{top},{width},{height}"
            )));
        }
        if width <= 0.0 || height <= 0.0 {
            return Err(BBoxError("width and height must be positive".into()));
        }
        if left + width > 100.0 + PCT_SLACK || top + height > 100.0 + PCT_SLACK {
            return Err(BBoxError(format!(
                "box extends past the image: left+width={}, top+height={}",
                left + width,
                top + height
            )));
        }
        Ok(BBoxPct {
            left,
            top,
            width,
            height,
        })
    }

    /// The identity box covering the whole image.
    pub fn full() -> Self {
        BBoxPct {
            left: 0.0,
            top: 0.0,
            width: 100.0,
            height: 100.0,
        }
    }

    /// Right-hand indicator cluster of the default screen layout.
    pub fn default_cluster() -> Self {
        BBoxPct {
            left: 78.0,
            top: 5.0,
            width: 22.0,
            height: 35.0,
        }
    }

    pub fn left(&self) -> f64 {
        self.left
    }
    pub fn top(&self) -> f64 {
        self.top
    }
    pub fn width(&self) -> f64 {
        self.width
    }
    pub fn height(&self) -> f64 {
        self.height
    }

    fn overlaps(&self, other: &BBoxPct) -> bool {
        self.left < other.left + other.width
            && other.left < self.left + self.width
            && self.top < other.top + other.height
            && other.top < self.top + self.height
    }

    /// Maps a box given relative to `self` into the coordinates of the parent image.
    pub fn compose(&self, inner: &BBoxPct) -> BBoxPct {
        BBoxPct {
            left: self.left + inner.left * self.width / 100.0,
            top: self.top + inner.top * self.height / 100.0,
            width: inner.width * self.width / 100.0,
            height: inner.height * self.height / 100.0,
        }
    }
}

impl fmt::Display for BBoxPct {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.left, self.top, self.width, self.height)
    }
}

impl std::str::FromStr for BBoxPct {
    type Err = BBoxError;

    /// Parses `left,top,width,height`.
    fn from_str(s: &str) -> Result<Self, BBoxError> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(BBoxError(format!(
                "expected left,top,width,height, got {s:?}"
            )));
        }
        let mut v = [0.0; 4];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p
                .parse()
                .map_err(|_| BBoxError(format!("not a number: {p:?}")))?;
        }
        BBoxPct::new(v[0], v[1], v[2], v[3])
    }
}

/// Integer pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl PixelRect {
    /// Percent → pixels with round-half-away-from-zero, clamped to the image,
    /// never smaller than 1×1.
    pub fn from_pct(bbox: &BBoxPct, image_width: u32, image_height: u32) -> PixelRect {
        let (x, width) = axis_span(bbox.left, bbox.width, image_width);
        let (y, height) = axis_span(bbox.top, bbox.height, image_height);
        PixelRect {
            x,
            y,
            width,
            height,
        }
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && x < self.x + self.width && y >= self.y && y < self.y + self.height
    }
}

fn axis_span(start_pct: f64, len_pct: f64, extent: u32) -> (u32, u32) {
    let extent_f = extent as f64;
    let start = ((start_pct / 100.0 * extent_f).round() as u32).min(extent.saturating_sub(1));
    let len = ((len_pct / 100.0 * extent_f).round() as u32).max(1);
    let len = len.min(extent - start).max(1);
    (start, len)
}

/// The three machine-readiness indicators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct IndicatorStates {
    pub collet_clamped: bool,
    pub refx: bool,
    pub refz: bool,
}

impl IndicatorStates {
    pub const fn new(collet_clamped: bool, refx: bool, refz: bool) -> Self {
        IndicatorStates {
            collet_clamped,
            refx,
            refz,
        }
    }

    /// All eight combinations, in binary counting order F/F/F … T/T/T.
    pub fn all() -> [IndicatorStates; 8] {
        std::array::from_fn(|i| IndicatorStates::new(i & 4 != 0, i & 2 != 0, i & 1 != 0))
    }

    pub fn as_array(&self) -> [bool; 3] {
        [self.collet_clamped, self.refx, self.refz]
    }
}

impl fmt::Display for IndicatorStates {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = |b: bool| if b { 'T' } else { 'F' };
        write!(
            f,
            "{}/{}/{}",
            c(self.collet_clamped),
            c(self.refx),
            c(self.refz)
        )
    }
}

/// Geometry and colour thresholds for the indicator cluster. Boxes are in
/// percent of the cluster crop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorLayout {
    pub collet_clamped: BBoxPct,
    pub refx: BBoxPct,
    pub refz: BBoxPct,
    pub on_color: [u8; 3],
    pub color_tolerance: u8,
    pub min_on_fraction: f64,
}

impl Default for IndicatorLayout {
    fn default() -> Self {
        // collet box has roughly 1.5x the area of the reference boxes
        IndicatorLayout {
            collet_clamped: BBoxPct::new(58.0, 8.0, 33.0, 23.0).unwrap(),
            refx: BBoxPct::new(60.0, 42.0, 30.0, 17.0).unwrap(),
            refz: BBoxPct::new(60.0, 70.0, 30.0, 17.0).unwrap(),
            on_color: [0, 200, 0],
            color_tolerance: 40,
            min_on_fraction: 0.30,
        }
    }
}

impl IndicatorLayout {
    pub fn boxes(&self) -> [(&'static str, BBoxPct); 3] {
        [
            ("COLLET CLAMPED", self.collet_clamped),
            ("REF X", self.refx),
            ("REF Z", self.refz),
        ]
    }

    pub fn validate(&self) -> Result<(), VisionError> {
        let boxes = self.boxes();
        for (i, (a_name, a)) in boxes.iter().enumerate() {
            BBoxPct::new(a.left, a.top, a.width, a.height)
                .map_err(|e| VisionError::Layout(format!("{a_name}: {e}")))?;
            for (b_name, b) in &boxes[i + 1..] {
                if a.overlaps(b) {
                    return Err(VisionError::Layout(format!(
                        "{a_name} overlaps {b_name}"
                    )));
                }
            }
        }
        if !(self.min_on_fraction > 0.0 && self.min_on_fraction <= 1.0) {
            return Err(VisionError::Layout(format!(
                "min_on_fraction must be in (0,1], got {}",
                self.min_on_fraction
            )));
        }
        Ok(())
    }
}

pub fn load_image(path: &Path) -> Result<RgbImage, VisionError> {
    let display = path.display().to_string();
    let reader = image::ImageReader::open(path).map_err(|source| VisionError::Io {
        path: display.clone(),
        source,
    })?;
    let reader = reader.with_guessed_format().map_err(|source| VisionError::Io {
        path: display.clone(),
        source,
    })?;
    let decoded = reader.decode().map_err(|e| VisionError::Decode {
        path: display,
        message: e.to_string(),
    })?;
    Ok(decoded.to_rgb8())
}

pub fn save_png(image: &RgbImage, path: &Path) -> Result<(), VisionError> {
    image
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| VisionError::Encode {
            path: path.display().to_string(),
            message: e.to_string(),
        })
}

/// Encodes to PNG in memory.
pub fn encode_png(image: &RgbImage) -> Vec<u8> {
    let mut out = std::io::Cursor::new(Vec::new());
    image
        .write_to(&mut out, image::ImageFormat::Png)
        .expect("in-memory PNG encoding cannot fail");
    out.into_inner()
}

pub fn crop_pct(image: &RgbImage, bbox: &BBoxPct) -> RgbImage {
    let r = PixelRect::from_pct(bbox, image.width(), image.height());
    image::imageops::crop_imm(image, r.x, r.y, r.width, r.height).to_image()
}

fn within_tolerance(px: &Rgb<u8>, target: [u8; 3], tol: u8) -> bool {
    px.0.iter()
        .zip(target)
        .all(|(&a, b)| a.abs_diff(b) <= tol)
}

/// Fraction of pixels in `rect` that match the layout's on colour.
pub fn on_fraction(cluster: &RgbImage, rect: PixelRect, layout: &IndicatorLayout) -> f64 {
    let mut on = 0u64;
    for y in rect.y..rect.y + rect.height {
        for x in rect.x..rect.x + rect.width {
            if within_tolerance(cluster.get_pixel(x, y), layout.on_color, layout.color_tolerance) {
                on += 1;
            }
        }
    }
    on as f64 / (rect.width as u64 * rect.height as u64) as f64
}

pub fn classify_indicators(
    cluster: &RgbImage,
    layout: &IndicatorLayout,
) -> Result<IndicatorStates, VisionError> {
    layout.validate()?;
    let (w, h) = cluster.dimensions();
    let mut lit = [false; 3];
    for (slot, (name, bbox)) in lit.iter_mut().zip(layout.boxes()) {
        let rect = PixelRect::from_pct(&bbox, w, h);
        let exact_right = (bbox.left + bbox.width) / 100.0 * w as f64;
        let exact_bottom = (bbox.top + bbox.height) / 100.0 * h as f64;
        if rect.x + rect.width > w
            || rect.y + rect.height > h
            || exact_right.round() as u32 > w
            || exact_bottom.round() as u32 > h
            || (bbox.width / 100.0 * w as f64).round() < 1.0
            || (bbox.height / 100.0 * h as f64).round() < 1.0
        {
            return Err(VisionError::Layout(format!(
                "{name} box {bbox} does not fit a {w}x{h} cluster image"
            )));
        }
        *slot = on_fraction(cluster, rect, layout) >= layout.min_on_fraction;
    }
    Ok(IndicatorStates::new(lit[0], lit[1], lit[2]))
}

/// Screen geometry used by the synthetic renderer.
#[derive(Debug, Clone, PartialEq)]
pub struct ScreenSpec {
    pub width: u32,
    pub height: u32,
    pub cluster: BBoxPct,
    pub layout: IndicatorLayout,
}

impl Default for ScreenSpec {
    fn default() -> Self {
        ScreenSpec {
            width: 1280,
            height: 800,
            cluster: BBoxPct::default_cluster(),
            layout: IndicatorLayout::default(),
        }
    }
}

const BACKGROUND: [u8; 3] = [34, 38, 46];
const TITLE_BAR: [u8; 3] = [52, 58, 70];
const PANE: [u8; 3] = [20, 22, 26];
const PANE_TEXT: [u8; 3] = [150, 156, 168];
const CLUSTER_PANEL: [u8; 3] = [48, 52, 60];
const LED_OFF: [u8; 3] = [60, 60, 60];
const LED_RIM: [u8; 3] = [96, 96, 96];
const LABEL: [u8; 3] = [220, 220, 220];
const OVERLAY: [u8; 3] = [255, 0, 255];

fn fill(img: &mut RgbImage, r: PixelRect, color: [u8; 3]) {
    let (w, h) = img.dimensions();
    for y in r.y..(r.y + r.height).min(h) {
        for x in r.x..(r.x + r.width).min(w) {
            img.put_pixel(x, y, Rgb(color));
        }
    }
}

fn pct_rect(img: &RgbImage, left: f64, top: f64, width: f64, height: f64) -> PixelRect {
    PixelRect::from_pct(
        &BBoxPct::new(left, top, width, height).expect("static geometry"),
        img.width(),
        img.height(),
    )
}

pub fn render_synthetic(states: IndicatorStates, noise_seed: Option<u64>) -> RgbImage {
    render_screen(&ScreenSpec::default(), states, noise_seed)
}

/// Paints a control-screen mock-up with the three indicators at the layout
/// positions. Deterministic for a fixed seed; noise amplitude is half the
/// layout's colour tolerance so classification stays exact.
pub fn render_screen(spec: &ScreenSpec, states: IndicatorStates, noise_seed: Option<u64>) -> RgbImage {
    let mut img = RgbImage::from_pixel(spec.width, spec.height, Rgb(BACKGROUND));

    let title = pct_rect(&img, 0.0, 0.0, 100.0, 4.0);
    fill(&mut img, title, TITLE_BAR);
    draw_text(&mut img, title.x + 8, title.y + 4, "LATHE CONTROL", LABEL, 2);

    // program listing pane with placeholder text rows
    let pane = pct_rect(&img, 2.0, 8.0, 60.0, 84.0);
    fill(&mut img, pane, PANE);
    let mut y = pane.y + 10;
    let mut row = 0u32;
    while y + 6 < pane.y + pane.height {
        let len = 40 + (row * 37) % 200;
        fill(
            &mut img,
            PixelRect {
                x: pane.x + 12,
                y,
                width: len.min(pane.width.saturating_sub(24)),
                height: 5,
            },
            PANE_TEXT,
        );
        y += 16;
        row += 1;
    }

    // readout pane under the cluster
    let dro = pct_rect(&img, 66.0, 48.0, 32.0, 44.0);
    fill(&mut img, dro, PANE);
    for (i, axis) in ["X", "Z"].iter().enumerate() {
        draw_text(&mut img, dro.x + 12, dro.y + 16 + i as u32 * 40, axis, LABEL, 3);
    }

    let cluster = PixelRect::from_pct(&spec.cluster, spec.width, spec.height);
    fill(&mut img, cluster, CLUSTER_PANEL);
    for ((label, bbox), lit) in spec.layout.boxes().into_iter().zip(states.as_array()) {
        let r = PixelRect::from_pct(&bbox, cluster.width, cluster.height);
        let abs = PixelRect {
            x: cluster.x + r.x,
            y: cluster.y + r.y,
            ..r
        };
        let rim = PixelRect {
            x: abs.x.saturating_sub(1),
            y: abs.y.saturating_sub(1),
            width: abs.width + 2,
            height: abs.height + 2,
        };
        fill(&mut img, rim, LED_RIM);
        fill(&mut img, abs, if lit { spec.layout.on_color } else { LED_OFF });
        let text_x = cluster.x + cluster.width / 20;
        let text_y = abs.y + abs.height / 2;
        draw_text(&mut img, text_x, text_y.saturating_sub(3), label, LABEL, 1);
    }

    if let Some(seed) = noise_seed {
        add_noise(&mut img, seed, spec.layout.color_tolerance / 2);
    }
    img
}

fn add_noise(img: &mut RgbImage, seed: u64, amplitude: u8) {
    if amplitude == 0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = 2 * amplitude as u32 + 1;
    // four stream bytes per pixel, the last one unused
    let mut buf = vec![0u8; 4 * 4096];
    for chunk in img.as_mut().chunks_mut(3 * 4096) {
        let bytes = &mut buf[..chunk.len() / 3 * 4];
        rng.fill_bytes(bytes);
        for (px, noise) in chunk.chunks_exact_mut(3).zip(bytes.chunks_exact(4)) {
            for (c, b) in px.iter_mut().zip(noise) {
                let offset = (*b as u32 % span) as i32 - amplitude as i32;
                *c = (*c as i32 + offset).clamp(0, 255) as u8;
            }
        }
    }
}

/// Copy of `image` with a 2-pixel rectangle drawn just inside each box edge.
pub fn debug_overlay(image: &RgbImage, boxes: &[BBoxPct]) -> RgbImage {
    let mut out = image.clone();
    let (w, h) = out.dimensions();
    for bbox in boxes {
        let r = PixelRect::from_pct(bbox, w, h);
        for y in r.y..r.y + r.height {
            for x in r.x..r.x + r.width {
                let edge = x < r.x + 2
                    || y < r.y + 2
                    || x + 2 >= r.x + r.width
                    || y + 2 >= r.y + r.height;
                if edge {
                    out.put_pixel(x, y, Rgb(OVERLAY));
                }
            }
        }
    }
    out
}

/// Cluster box plus the three indicator boxes, in full-image percentages.
pub fn overlay_boxes(cluster: &BBoxPct, layout: &IndicatorLayout) -> Vec<BBoxPct> {
    let mut boxes = vec![*cluster];
    boxes.extend(layout.boxes().iter().map(|(_, b)| cluster.compose(b)));
    boxes
}

fn glyph(c: char) -> Option<[u8; 7]> {
    Some(match c {
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        _ => return None,
    })
}

fn draw_text(img: &mut RgbImage, x0: u32, y0: u32, text: &str, color: [u8; 3], scale: u32) {
    let (w, h) = img.dimensions();
    for (i, c) in text.chars().enumerate() {
        let Some(rows) = glyph(c) else { continue };
        let cx = x0 + i as u32 * 6 * scale;
        for (ry, bits) in rows.iter().enumerate() {
            for rx in 0..5u32 {
                if bits & (0x10 >> rx) == 0 {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        let (x, y) = (cx + rx * scale + dx, y0 + ry as u32 * scale + dy);
                        if x < w && y < h {
                            img.put_pixel(x, y, Rgb(color));
                        }
                    }
                }
            }
        }
    }
}
