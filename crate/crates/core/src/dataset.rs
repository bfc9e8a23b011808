//! Patch extraction from annotated slides, fixed class prompts, and a seeded
//! synthetic five-class dataset.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 5;
pub const CHANNELS: usize = 3;

/// The five glomerular categories, in their fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "usize", try_from = "usize")]
pub enum ClassLabel {
    GlobalGlomerulosclerosis = 0,
    ViableGlomerulus = 1,
    IschemicGlomerulus = 2,
    SegmentalGlomerulosclerosis = 3,
    AtubularGlomerulus = 4,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; NUM_CLASSES] = [
        ClassLabel::GlobalGlomerulosclerosis,
        ClassLabel::ViableGlomerulus,
        ClassLabel::IschemicGlomerulus,
        ClassLabel::SegmentalGlomerulosclerosis,
        ClassLabel::AtubularGlomerulus,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::GlobalGlomerulosclerosis => "global glomerulosclerosis",
            ClassLabel::ViableGlomerulus => "viable glomerulus",
            ClassLabel::IschemicGlomerulus => "ischemic glomerulus",
            ClassLabel::SegmentalGlomerulosclerosis => "segmental glomerulosclerosis",
            ClassLabel::AtubularGlomerulus => "atubular glomerulus",
        }
    }

    pub fn from_index(index: usize) -> Result<Self> {
        Self::ALL.get(index).copied().ok_or(Error::LabelOutOfRange(index))
    }

    /// Case-insensitive lookup by class name.
    pub fn from_name(name: &str) -> Result<Self> {
        let wanted = name.trim().to_lowercase();
        Self::ALL
            .into_iter()
            .find(|c| c.name() == wanted)
            .ok_or_else(|| Error::UnknownLabel(name.to_string()))
    }
}

impl From<ClassLabel> for usize {
    fn from(c: ClassLabel) -> usize {
        c.index()
    }
}

impl TryFrom<usize> for ClassLabel {
    type Error = Error;
    fn try_from(i: usize) -> Result<Self> {
        ClassLabel::from_index(i)
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Fixed text anchor for a class.
pub fn build_prompt(label: ClassLabel) -> String {
    format!("A histopathology image of {}.", label.name())
}

/// All class prompts in class-index order.
pub fn class_prompts() -> Vec<String> {
    ClassLabel::ALL.into_iter().map(build_prompt).collect()
}

/// Half-open integer rectangle `[x0, x1) × [y0, y1)` in slide pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl Rect {
    pub fn new(x0: i64, y0: i64, x1: i64, y1: i64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> i64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> i64 {
        self.y1 - self.y0
    }

    fn invalid(&self, reason: &'static str) -> Error {
        Error::InvalidRect {
            x0: self.x0,
            y0: self.y0,
            x1: self.x1,
            y1: self.y1,
            reason,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.x0 >= self.x1 || self.y0 >= self.y1 {
            return Err(self.invalid("zero or negative area"));
        }
        Ok(())
    }

    pub fn contains(&self, other: &Rect) -> bool {
        other.x0 >= self.x0 && other.y0 >= self.y0 && other.x1 <= self.x1 && other.y1 <= self.y1
    }
}

/// Result of squarifying a box: the square, and whether the slide was too
/// small to hold the requested side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SquareRegion {
    pub rect: Rect,
    pub clamped: bool,
}

/// Grow `[lo, hi)` symmetrically to `side`, then slide it into `[min, max)`.
fn fit_axis(lo: i64, hi: i64, side: i64, min: i64, max: i64) -> (i64, i64) {
    let grow = side - (hi - lo);
    let mut start = lo - grow / 2;
    if start < min {
        start = min;
    }
    if start + side > max {
        start = max - side;
    }
    (start, start + side)
}

/// Expand `bbox` by `margin` on all sides, grow the shorter dimension to a
/// square around the expanded box's center, and translate it inside
/// `slide_extent`. The side only shrinks when the slide cannot hold it.
pub fn expand_and_squarify(bbox: Rect, margin: i64, slide_extent: Rect) -> Result<SquareRegion> {
    bbox.validate()?;
    slide_extent.validate()?;
    if margin < 0 {
        return Err(Error::InvalidArgument(format!("negative margin {margin}")));
    }
    if !slide_extent.contains(&bbox) {
        return Err(bbox.invalid("box outside slide extent"));
    }
    let expanded = Rect::new(bbox.x0 - margin, bbox.y0 - margin, bbox.x1 + margin, bbox.y1 + margin);
    let wanted = expanded.width().max(expanded.height());
    let room = slide_extent.width().min(slide_extent.height());
    let side = wanted.min(room);
    let (x0, x1) = fit_axis(expanded.x0, expanded.x1, side, slide_extent.x0, slide_extent.x1);
    let (y0, y1) = fit_axis(expanded.y0, expanded.y1, side, slide_extent.y0, slide_extent.y1);
    Ok(SquareRegion {
        rect: Rect::new(x0, y0, x1, y1),
        clamped: side < wanted,
    })
}

/// Read access to a slide raster. Pixels are H×W×C in `[0, 1]`.
pub trait SlideImage: Sync {
    fn slide_id(&self) -> &str;
    fn extent(&self) -> Rect;
    fn read_region(&self, rect: Rect) -> std::result::Result<Array3<f64>, String>;
}

/// A slide fully held in memory.
#[derive(Debug, Clone)]
pub struct InMemorySlide {
    pub id: String,
    pub pixels: Array3<f64>,
}

impl InMemorySlide {
    pub fn new(id: impl Into<String>, pixels: Array3<f64>) -> Self {
        Self { id: id.into(), pixels }
    }

    pub fn open(id: impl Into<String>, path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::new(id, rgb_to_array(&img.to_rgb8())))
    }
}

impl SlideImage for InMemorySlide {
    fn slide_id(&self) -> &str {
        &self.id
    }

    fn extent(&self) -> Rect {
        let (h, w, _) = self.pixels.dim();
        Rect::new(0, 0, w as i64, h as i64)
    }

    fn read_region(&self, r: Rect) -> std::result::Result<Array3<f64>, String> {
        if !self.extent().contains(&r) || r.width() <= 0 || r.height() <= 0 {
            return Err("region outside slide".into());
        }
        Ok(self
            .pixels
            .slice(s![r.y0 as usize..r.y1 as usize, r.x0 as usize..r.x1 as usize, ..])
            .to_owned())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedInstance {
    pub slide_id: String,
    pub bbox: Rect,
    pub label: ClassLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PatchSource {
    Instance { slide_id: String, rect: Rect, clamped: bool },
    Synthetic { seed: u64, index: usize },
    File { path: PathBuf },
}

/// A square H×W×C image in `[0, 1]` with its class.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub pixels: Array3<f64>,
    pub label: ClassLabel,
    pub source: PatchSource,
}

impl PatchSample {
    pub fn side(&self) -> usize {
        self.pixels.dim().0
    }
}

/// Crop the squarified region around `instance` from `slide`.
pub fn extract_patch(slide: &dyn SlideImage, instance: &AnnotatedInstance, margin: i64) -> Result<PatchSample> {
    let region = expand_and_squarify(instance.bbox, margin, slide.extent())?;
    let r = region.rect;
    let pixels = slide.read_region(r).map_err(|reason| Error::RegionUnreadable {
        slide_id: instance.slide_id.clone(),
        x0: r.x0,
        y0: r.y0,
        x1: r.x1,
        y1: r.y1,
        reason,
    })?;
    Ok(PatchSample {
        pixels,
        label: instance.label,
        source: PatchSource::Instance {
            slide_id: instance.slide_id.clone(),
            rect: r,
            clamped: region.clamped,
        },
    })
}

#[derive(Debug, Deserialize)]
struct AnnotationLine {
    slide_id: String,
    x0: i64,
    y0: i64,
    x1: i64,
    y1: i64,
    label_name: String,
}

/// Parse a JSON-lines annotation file (`slide_id, x0, y0, x1, y1, label_name`).
pub fn read_annotations(path: &Path) -> Result<Vec<AnnotatedInstance>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationLine = serde_json::from_str(&line)
            .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        let bbox = Rect::new(rec.x0, rec.y0, rec.x1, rec.y1);
        bbox.validate()?;
        out.push(AnnotatedInstance {
            slide_id: rec.slide_id,
            bbox,
            label: ClassLabel::from_name(&rec.label_name)?,
        });
    }
    Ok(out)
}

/// One row of a patch manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label_index: usize,
    pub rect: Rect,
    pub clamped: bool,
}

pub const MANIFEST_FILE: &str = "manifest.csv";

/// Extract every instance (slides looked up by `slide_id`), write
/// `{slide_id}_{instance_index}_{label_index}.png` files and a manifest into
/// `out_dir`.
pub fn extract_to_dir<S: SlideImage>(
    slides: &[S],
    instances: &[AnnotatedInstance],
    margin: i64,
    out_dir: &Path,
) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let entries = instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let slide = slides
                .iter()
                .find(|s| s.slide_id() == inst.slide_id)
                .ok_or_else(|| Error::RegionUnreadable {
                    slide_id: inst.slide_id.clone(),
                    x0: inst.bbox.x0,
                    y0: inst.bbox.y0,
                    x1: inst.bbox.x1,
                    y1: inst.bbox.y1,
                    reason: "slide not found".into(),
                })?;
            let patch = extract_patch(slide, inst, margin)?;
            let name = format!("{}_{}_{}.png", inst.slide_id, i, inst.label.index());
            let path = out_dir.join(&name);
            array_to_rgb(&patch.pixels)
                .save(&path)
                .map_err(|source| Error::Image { path, source })?;
            let PatchSource::Instance { rect, clamped, .. } = patch.source else {
                unreachable!("extract_patch always records its instance")
            };
            Ok(ManifestEntry {
                path: name,
                label_index: inst.label.index(),
                rect,
                clamped,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_manifest(&out_dir.join(MANIFEST_FILE), &entries)?;
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("path,label_index,x0,y0,x1,y1,clamped\n");
    for e in entries {
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            e.path, e.label_index, e.rect.x0, e.rect.y0, e.rect.x1, e.rect.y1, e.clamped
        ));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |n: usize, what: &str| Error::Config(format!("{}:{}: {what}", path.display(), n + 1));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad(n, "expected 7 fields"));
        }
        let num = |s: &str| s.trim().parse::<i64>().map_err(|_| bad(n, "bad integer"));
        let label_index = num(f[1])? as usize;
        ClassLabel::from_index(label_index)?;
        out.push(ManifestEntry {
            path: f[0].to_string(),
            label_index,
            rect: Rect::new(num(f[2])?, num(f[3])?, num(f[4])?, num(f[5])?),
            clamped: f[6].trim() == "true",
        });
    }
    Ok(out)
}

/// Load the patches listed in a manifest, resampled to `side`×`side`.
pub fn load_manifest_patches(manifest: &Path, side: usize) -> Result<Vec<PatchSample>> {
    let dir = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?
        .into_iter()
        .map(|e| {
            let path = dir.join(&e.path);
            let img = image::open(&path)
                .map_err(|source| Error::Image {
                    path: path.clone(),
                    source,
                })?
                .to_rgb8();
            let img = if img.width() as usize != side || img.height() as usize != side {
                image::imageops::resize(&img, side as u32, side as u32, image::imageops::FilterType::Triangle)
            } else {
                img
            };
            Ok(PatchSample {
                pixels: rgb_to_array(&img),
                label: ClassLabel::from_index(e.label_index)?,
                source: PatchSource::File { path },
            })
        })
        .collect()
}

pub fn rgb_to_array(img: &image::RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, CHANNELS), |(y, x, c)| {
        f64::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
    })
}

pub fn array_to_rgb(a: &Array3<f64>) -> image::RgbImage {
    let (h, w, _) = a.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (a[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

const BACKGROUND: [f64; 3] = [0.93, 0.82, 0.88];
const TUFT: [f64; 3] = [0.78, 0.55, 0.74];
const SCAR: [f64; 3] = [0.52, 0.22, 0.50];
const NUCLEUS: [f64; 3] = [0.30, 0.15, 0.45];
const ISCHEMIC_WALL: [f64; 3] = [0.72, 0.26, 0.36];
const SEGMENTAL_TUFT: [f64; 3] = [0.62, 0.56, 0.84];
const ATUBULAR_TUFT: [f64; 3] = [0.86, 0.68, 0.62];

struct Canvas {
    side: usize,
    px: Array3<f64>,
}

impl Canvas {
    fn new(side: usize, rng: &mut ChaCha8Rng) -> Self {
        // background with a random linear gradient
        let gx = rng.gen_range(-0.08..0.08);
        let gy = rng.gen_range(-0.08..0.08);
        let px = Array3::from_shape_fn((side, side, CHANNELS), |(y, x, c)| {
            let u = x as f64 / side as f64 - 0.5;
            let v = y as f64 / side as f64 - 0.5;
            BACKGROUND[c] + gx * u + gy * v
        });
        Self { side, px }
    }

    /// Paint pixels whose center satisfies `inside(dx, dy)` relative to (cx, cy).
    fn paint(&mut self, cx: f64, cy: f64, color: [f64; 3], inside: impl Fn(f64, f64) -> bool) {
        for y in 0..self.side {
            for x in 0..self.side {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                if inside(dx, dy) {
                    for c in 0..CHANNELS {
                        self.px[[y, x, c]] = color[c];
                    }
                }
            }
        }
    }

    fn scatter_nuclei(&mut self, cx: f64, cy: f64, radius: f64, count: usize, rng: &mut ChaCha8Rng) {
        for _ in 0..count {
            let a = rng.gen_range(0.0..std::f64::consts::TAU);
            let d = radius * rng.gen_range(0.0f64..1.0).sqrt();
            let (nx, ny) = (cx + d * a.cos(), cy + d * a.sin());
            let nr = rng.gen_range(0.9..1.5);
            self.paint(nx, ny, NUCLEUS, |dx, dy| dx * dx + dy * dy <= nr * nr);
        }
    }

    fn finish(mut self, rng: &mut ChaCha8Rng) -> Array3<f64> {
        let noise = Normal::new(0.0, 0.04).expect("valid sigma");
        self.px.mapv_inplace(|v| (v + noise.sample(rng)).clamp(0.0, 1.0));
        self.px
    }
}

fn jitter(color: [f64; 3], rng: &mut ChaCha8Rng, amount: f64) -> [f64; 3] {
    let shift = rng.gen_range(-amount..amount);
    color.map(|c| c + shift)
}

fn render(label: ClassLabel, side: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let s = side as f64;
    let mut canvas = Canvas::new(side, rng);
    let cx = s / 2.0 + rng.gen_range(-0.08..0.08) * s;
    let cy = s / 2.0 + rng.gen_range(-0.08..0.08) * s;
    let r = rng.gen_range(0.28..0.36) * s;
    match label {
        ClassLabel::GlobalGlomerulosclerosis => {
            // uniformly scarred tuft
            let col = jitter(SCAR, rng, 0.06);
            canvas.paint(cx, cy, col, |dx, dy| dx * dx + dy * dy <= r * r);
        }
        ClassLabel::ViableGlomerulus => {
            let col = jitter(TUFT, rng, 0.05);
            canvas.paint(cx, cy, col, |dx, dy| dx * dx + dy * dy <= r * r);
            let n = rng.gen_range(10..18);
            canvas.scatter_nuclei(cx, cy, r * 0.85, n, rng);
        }
        ClassLabel::IschemicGlomerulus => {
            // thick wrinkled capsule wall around a pale collapsed interior
            let col = jitter(ISCHEMIC_WALL, rng, 0.06);
            let thick = rng.gen_range(0.22..0.32) * r;
            let waves = f64::from(rng.gen_range(5..9));
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            canvas.paint(cx, cy, col, |dx, dy| {
                let d = (dx * dx + dy * dy).sqrt();
                let wobble = 0.08 * r * (waves * dy.atan2(dx) + phase).sin();
                d <= r + wobble && d >= r - thick + wobble
            });
        }
        ClassLabel::SegmentalGlomerulosclerosis => {
            let tuft = jitter(SEGMENTAL_TUFT, rng, 0.05);
            canvas.paint(cx, cy, tuft, |dx, dy| dx * dx + dy * dy <= r * r);
            let n = rng.gen_range(5..10);
            canvas.scatter_nuclei(cx, cy, r * 0.85, n, rng);
            // scarred segment on one side
            let scar = jitter(SCAR, rng, 0.06);
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let (ux, uy) = (theta.cos(), theta.sin());
            let cut = rng.gen_range(0.0..0.3) * r;
            canvas.paint(cx, cy, scar, |dx, dy| dx * dx + dy * dy <= r * r && dx * ux + dy * uy >= cut);
        }
        ClassLabel::AtubularGlomerulus => {
            // small tuft inside an enlarged empty capsule
            let wall = jitter(TUFT, rng, 0.05);
            let rr = r * 1.15;
            canvas.paint(cx, cy, wall, |dx, dy| {
                let d2 = dx * dx + dy * dy;
                d2 <= rr * rr && d2 >= (rr - 1.5) * (rr - 1.5)
            });
            let tr = rng.gen_range(0.35..0.5) * r;
            let col = jitter(ATUBULAR_TUFT, rng, 0.05);
            canvas.paint(cx, cy, col, |dx, dy| dx * dx + dy * dy <= tr * tr);
            let n = rng.gen_range(2..5);
            canvas.scatter_nuclei(cx, cy, tr * 0.7, n, rng);
        }
    }
    canvas.finish(rng)
}

/// `5 · n_per_class` seeded square patches, class-major order. Each class is a
/// distinct parametric shape family with per-sample jitter and pixel noise.
pub fn generate_synthetic_dataset(n_per_class: usize, image_side: usize, seed: u64) -> Result<Vec<PatchSample>> {
    if n_per_class == 0 {
        return Err(Error::InvalidArgument("n_per_class must be at least 1".into()));
    }
    if image_side < 16 {
        return Err(Error::InvalidArgument(format!("image_side {image_side} below 16")));
    }
    let out = (0..NUM_CLASSES * n_per_class)
        .into_par_iter()
        .map(|index| {
            let label = ClassLabel::ALL[index / n_per_class];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(index as u64 + 1);
            PatchSample {
                pixels: render(label, image_side, &mut rng),
                label,
                source: PatchSource::Synthetic { seed, index },
            }
        })
        .collect();
    Ok(out)
}
