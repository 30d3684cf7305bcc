//! Procedural generator of layout-annotated scenes in multiple visual
//! styles: the desk-scale stand-in for real street/scene datasets.
//!
//! Geometry (and therefore the label map) depends only on the scene seed;
//! the style transform only changes colors. Rendering and labeling share
//! one rasterization, so labels are exact at shape boundaries.

use crate::error::{AldmError, Result};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

pub const MANIFEST_VERSION: &str = "1";
pub const NUM_STYLES: usize = 3;

/// One training example: image in [-1,1], exact per-pixel labels, style id.
#[derive(Debug, Clone)]
pub struct LayoutSample {
    /// (H, W, 3), values in [-1, 1].
    pub image: Array3<f64>,
    /// (H, W), values in [0, N).
    pub labels: Array2<usize>,
    pub style_id: usize,
    pub scene_seed: u64,
}

impl LayoutSample {
    /// Channel-first copy (3, H, W) for the networks.
    pub fn image_chw(&self) -> Array3<f64> {
        let (h, w, _) = self.image.dim();
        Array3::from_shape_fn((3, h, w), |(c, i, j)| self.image[[i, j, c]])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image: String,
    pub labels: String,
    pub style_id: usize,
    pub scene_seed: u64,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: String,
    pub n_train: usize,
    pub n_val: usize,
    pub num_classes: usize,
    pub num_styles: usize,
    pub resolution: usize,
    pub styles: Vec<usize>,
    pub seed: u64,
    pub dataset_hash: String,
    pub records: Vec<SampleRecord>,
}

#[derive(Debug, Clone, Copy)]
pub enum ShapeKind {
    Disc,
    Rect,
    Triangle,
}

/// Analytic shape description; membership is evaluated per pixel center.
#[derive(Debug, Clone)]
pub struct Shape {
    pub kind: ShapeKind,
    pub class: usize,
    pub params: [f64; 6],
    pub jitter: [f64; 3],
}

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self.kind {
            ShapeKind::Disc => {
                let (cx, cy, r) = (self.params[0], self.params[1], self.params[2]);
                (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r
            }
            ShapeKind::Rect => {
                let (x0, y0, x1, y1) = (self.params[0], self.params[1], self.params[2], self.params[3]);
                x >= x0 && x <= x1 && y >= y0 && y <= y1
            }
            ShapeKind::Triangle => {
                let (ax, ay) = (self.params[0], self.params[1]);
                let (bx, by) = (self.params[2], self.params[3]);
                let (cx, cy) = (self.params[4], self.params[5]);
                let sign = |px: f64, py: f64, qx: f64, qy: f64, rx: f64, ry: f64| {
                    (px - rx) * (qy - ry) - (qx - rx) * (py - ry)
                };
                let d1 = sign(x, y, ax, ay, bx, by);
                let d2 = sign(x, y, bx, by, cx, cy);
                let d3 = sign(x, y, cx, cy, ax, ay);
                let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(has_neg && has_pos)
            }
        }
    }
}

/// Class-consistent base colors in [0,1]; per-instance jitter is added on top.
fn base_color(class: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 8] = [
        [0.18, 0.48, 0.22], // background: green
        [0.82, 0.20, 0.18], // red
        [0.20, 0.32, 0.85], // blue
        [0.88, 0.82, 0.20], // yellow
        [0.62, 0.25, 0.72], // purple
        [0.20, 0.75, 0.75], // cyan
        [0.90, 0.55, 0.15], // orange
        [0.55, 0.35, 0.20], // brown
    ];
    PALETTE[class % PALETTE.len()]
}

/// Global style transform applied to a [0,1] color.
fn apply_style(style_id: usize, rgb: [f64; 3]) -> [f64; 3] {
    match style_id {
        // day: identity
        0 => rgb,
        // night: luminance scaled down with a blue shift
        1 => [rgb[0] * 0.30, rgb[1] * 0.32, rgb[2] * 0.55 + 0.10],
        // fog: contrast compression toward gray
        2 => [
            0.35 * rgb[0] + 0.65 * 0.68,
            0.35 * rgb[1] + 0.65 * 0.68,
            0.35 * rgb[2] + 0.65 * 0.70,
        ],
        _ => unreachable!("style id validated before use"),
    }
}

/// Geometry for one scene: deterministic in the scene seed alone.
pub fn scene_shapes(scene_seed: u64, resolution: usize, n_classes: usize) -> (Vec<Shape>, [f64; 3]) {
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
    let r = resolution as f64;
    let bg_jitter = [
        rng.gen_range(-0.06..0.06),
        rng.gen_range(-0.06..0.06),
        rng.gen_range(-0.06..0.06),
    ];
    let n_shapes = rng.gen_range(2..=5);
    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let kind_idx = rng.gen_range(0..3usize);
        let class = (kind_idx % (n_classes - 1)) + 1;
        let jitter = [
            rng.gen_range(-0.08..0.08),
            rng.gen_range(-0.08..0.08),
            rng.gen_range(-0.08..0.08),
        ];
        let shape = match kind_idx {
            0 => {
                let radius = rng.gen_range(r / 8.0..r / 3.5);
                let cx = rng.gen_range(radius..r - radius);
                let cy = rng.gen_range(radius..r - radius);
                Shape { kind: ShapeKind::Disc, class, params: [cx, cy, radius, 0.0, 0.0, 0.0], jitter }
            }
            1 => {
                let w = rng.gen_range(r / 6.0..r / 2.0);
                let h = rng.gen_range(r / 6.0..r / 2.0);
                let x0 = rng.gen_range(0.0..r - w);
                let y0 = rng.gen_range(0.0..r - h);
                Shape { kind: ShapeKind::Rect, class, params: [x0, y0, x0 + w, y0 + h, 0.0, 0.0], jitter }
            }
            _ => {
                let cx = rng.gen_range(r * 0.2..r * 0.8);
                let cy = rng.gen_range(r * 0.2..r * 0.8);
                let size = rng.gen_range(r / 6.0..r / 3.0);
                let a0 = rng.gen_range(0.0..std::f64::consts::TAU);
                let mut pts = [0.0f64; 6];
                for v in 0..3 {
                    let ang = a0 + v as f64 * std::f64::consts::TAU / 3.0;
                    pts[2 * v] = cx + size * ang.cos();
                    pts[2 * v + 1] = cy + size * ang.sin();
                }
                Shape { kind: ShapeKind::Triangle, class, params: pts, jitter }
            }
        };
        shapes.push(shape);
    }
    (shapes, bg_jitter)
}

pub fn generate_scene(
    scene_seed: u64,
    style_id: usize,
    resolution: usize,
    n_classes: usize,
) -> Result<LayoutSample> {
    if resolution < 16 {
        return Err(AldmError::invalid("resolution must be at least 16"));
    }
    if n_classes < 3 {
        return Err(AldmError::invalid("need at least 3 classes"));
    }
    if style_id >= NUM_STYLES {
        return Err(AldmError::invalid(format!(
            "style id {style_id} out of range 0..{NUM_STYLES}"
        )));
    }
    let (shapes, bg_jitter) = scene_shapes(scene_seed, resolution, n_classes);
    // per-pixel texture noise, independent of style
    let mut tex_rng = ChaCha8Rng::seed_from_u64(scene_seed ^ 0x9e37_79b9_7f4a_7c15);
    let h = resolution;
    let w = resolution;
    let mut labels = Array2::<usize>::zeros((h, w));
    let mut owner = Array2::<isize>::from_elem((h, w), -1);
    for i in 0..h {
        for j in 0..w {
            let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
            // paint order: later shapes overwrite earlier ones
            for (si, s) in shapes.iter().enumerate() {
                if s.contains(x, y) {
                    labels[[i, j]] = s.class;
                    owner[[i, j]] = si as isize;
                }
            }
        }
    }
    let mut image = Array3::<f64>::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            let (class, jitter) = match owner[[i, j]] {
                -1 => (0usize, bg_jitter),
                si => {
                    let s = &shapes[si as usize];
                    (s.class, s.jitter)
                }
            };
            let base = base_color(class);
            let noise = tex_rng.gen_range(-0.03..0.03);
            let mut rgb = [0.0f64; 3];
            for c in 0..3 {
                rgb[c] = (base[c] + jitter[c] + noise).clamp(0.0, 1.0);
            }
            let styled = apply_style(style_id, rgb);
            for c in 0..3 {
                image[[i, j, c]] = (styled[c].clamp(0.0, 1.0)) * 2.0 - 1.0;
            }
        }
    }
    Ok(LayoutSample { image, labels, style_id, scene_seed })
}

fn image_to_png_bytes(image: &Array3<f64>) -> Vec<u8> {
    let (h, w, _) = image.dim();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let px = [
                (((image[[i, j, 0]] + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8,
                (((image[[i, j, 1]] + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8,
                (((image[[i, j, 2]] + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            buf.put_pixel(j as u32, i as u32, image::Rgb(px));
        }
    }
    let mut out = Vec::new();
    image::DynamicImage::ImageRgb8(buf)
        .write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
        .expect("png encode");
    out
}

fn labels_to_png_bytes(labels: &Array2<usize>) -> Vec<u8> {
    let (h, w) = labels.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            buf.put_pixel(j as u32, i as u32, image::Luma([labels[[i, j]] as u8]));
        }
    }
    let mut out = Vec::new();
    image::DynamicImage::ImageLuma8(buf)
        .write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
        .expect("png encode");
    out
}

pub fn load_image_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f64>::zeros((h as usize, w as usize, 3));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[y as usize, x as usize, c]] = px[c] as f64 / 255.0 * 2.0 - 1.0;
        }
    }
    Ok(out)
}

pub fn load_labels_png(path: &Path) -> Result<Array2<usize>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array2::<usize>::zeros((h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        out[[y as usize, x as usize]] = px[0] as usize;
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub fn generate_dataset(
    n_train: usize,
    n_val: usize,
    styles: &[usize],
    seed: u64,
    resolution: usize,
    n_classes: usize,
    out_path: &Path,
    force: bool,
) -> Result<DatasetManifest> {
    if n_train == 0 || n_val == 0 {
        return Err(AldmError::invalid("need n_train >= 1 and n_val >= 1"));
    }
    if styles.is_empty() {
        return Err(AldmError::invalid("need at least one style"));
    }
    for &s in styles {
        if s >= NUM_STYLES {
            return Err(AldmError::invalid(format!("style id {s} out of range")));
        }
    }
    let manifest_path = out_path.join("manifest.json");
    if manifest_path.exists() && !force {
        return Err(AldmError::invalid(format!(
            "dataset already exists at {} (use force to overwrite)",
            out_path.display()
        )));
    }
    std::fs::create_dir_all(out_path.join("images"))?;
    std::fs::create_dir_all(out_path.join("labels"))?;

    // train and val scene seeds are drawn from disjoint counter ranges
    let mut records = Vec::with_capacity(n_train + n_val);
    let make = |idx: usize, split: Split, global: usize| -> Result<SampleRecord> {
        let scene_seed = derive_scene_seed(seed, split, idx);
        let style_id = styles[global % styles.len()];
        let sample = generate_scene(scene_seed, style_id, resolution, n_classes)?;
        let img_rel = format!("images/{global:06}.png");
        let lab_rel = format!("labels/{global:06}.png");
        std::fs::write(out_path.join(&img_rel), image_to_png_bytes(&sample.image))?;
        std::fs::write(out_path.join(&lab_rel), labels_to_png_bytes(&sample.labels))?;
        Ok(SampleRecord { image: img_rel, labels: lab_rel, style_id, scene_seed, split })
    };
    for i in 0..n_train {
        records.push(make(i, Split::Train, i)?);
    }
    for i in 0..n_val {
        records.push(make(i, Split::Val, n_train + i)?);
    }

    let mut manifest = DatasetManifest {
        format_version: MANIFEST_VERSION.to_string(),
        n_train,
        n_val,
        num_classes: n_classes,
        num_styles: NUM_STYLES,
        resolution,
        styles: styles.to_vec(),
        seed,
        dataset_hash: String::new(),
        records,
    };
    manifest.dataset_hash = manifest_hash(&manifest);
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&manifest_path, json)?;
    Ok(manifest)
}

fn derive_scene_seed(seed: u64, split: Split, idx: usize) -> u64 {
    let tag: u64 = match split {
        Split::Train => 0x1111_0000,
        Split::Val => 0x2222_0000,
    };
    // splitmix-style mixing keeps train/val streams disjoint
    let mut z = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(tag)
        .wrapping_add(idx as u64);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash over the identity of a dataset (not file bytes): config + records.
pub fn manifest_hash(m: &DatasetManifest) -> String {
    let mut h = Sha256::new();
    h.update(m.format_version.as_bytes());
    h.update(m.n_train.to_le_bytes());
    h.update(m.n_val.to_le_bytes());
    h.update(m.num_classes.to_le_bytes());
    h.update(m.resolution.to_le_bytes());
    h.update(m.seed.to_le_bytes());
    for s in &m.styles {
        h.update(s.to_le_bytes());
    }
    for r in &m.records {
        h.update(r.image.as_bytes());
        h.update(r.labels.as_bytes());
        h.update(r.style_id.to_le_bytes());
        h.update(r.scene_seed.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// On-disk dataset handle.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest_path = root.join("manifest.json");
        let json = std::fs::read_to_string(&manifest_path).map_err(|e| {
            AldmError::invalid(format!("cannot read {}: {e}", manifest_path.display()))
        })?;
        let manifest: DatasetManifest = serde_json::from_str(&json)?;
        for r in &manifest.records {
            if !root.join(&r.image).exists() || !root.join(&r.labels).exists() {
                return Err(AldmError::invalid(format!(
                    "dataset record file missing: {}",
                    r.image
                )));
            }
        }
        let expected = manifest.n_train + manifest.n_val;
        if manifest.records.len() != expected {
            return Err(AldmError::invalid("manifest record count mismatch"));
        }
        Ok(Dataset { root: root.to_path_buf(), manifest })
    }

    pub fn load(&self, idx: usize) -> Result<LayoutSample> {
        let r = &self.manifest.records[idx];
        Ok(LayoutSample {
            image: load_image_png(&self.root.join(&r.image))?,
            labels: load_labels_png(&self.root.join(&r.labels))?,
            style_id: r.style_id,
            scene_seed: r.scene_seed,
        })
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.manifest.n_train).collect()
    }

    pub fn val_indices(&self) -> Vec<usize> {
        (self.manifest.n_train..self.manifest.n_train + self.manifest.n_val).collect()
    }
}
