//! Dataset ingestion, resolution standardization and tiling.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

pub const DEFAULT_TARGET_MPP: f64 = 0.25;
pub const DEFAULT_TILE_SIZE: u32 = 224;
pub const DEFAULT_WHITE_THRESHOLD: u8 = 220;
pub const DEFAULT_MAX_WHITE_FRACTION: f64 = 0.5;

const IMAGE_EXTENSIONS: &[&str] = &["png", "tif", "tiff"];

/// A square RGB patch with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub pixels: RgbImage,
    pub source_id: String,
    pub grid_xy: (u32, u32),
    pub patient_id: Option<String>,
}

impl Tile {
    pub fn new(pixels: RgbImage, source_id: impl Into<String>) -> Self {
        Self { pixels, source_id: source_id.into(), grid_xy: (0, 0), patient_id: None }
    }

    pub fn size(&self) -> u32 {
        self.pixels.width()
    }

    /// Identifier unique within a dataset: source plus zero-padded grid position.
    pub fn id(&self) -> String {
        format!("{}@{:05}_{:05}", self.source_id, self.grid_xy.1, self.grid_xy.0)
    }
}

/// Tiles with class labels, e.g. a folder-per-class tissue dataset.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub tiles: Vec<Tile>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(tiles: Vec<Tile>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if class_names.len() < 2 {
            return Err(Error::InvalidDataset(format!(
                "need at least 2 classes, found {}",
                class_names.len()
            )));
        }
        if tiles.len() != labels.len() {
            return Err(Error::InvalidDataset(format!(
                "{} tiles but {} labels",
                tiles.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::InvalidDataset(format!("label {bad} out of range")));
        }
        if let Some(first) = tiles.first() {
            let size = first.pixels.dimensions();
            if size.0 != size.1 {
                return Err(Error::InvalidDataset(format!(
                    "{} is not square ({}x{})",
                    first.source_id, size.0, size.1
                )));
            }
            if let Some(t) = tiles.iter().find(|t| t.pixels.dimensions() != size) {
                return Err(Error::InvalidDataset(format!(
                    "{} is {:?}, expected {:?}",
                    t.source_id,
                    t.pixels.dimensions(),
                    size
                )));
            }
        }
        Ok(Self { tiles, labels, class_names })
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn tile_size(&self) -> Option<u32> {
        self.tiles.first().map(Tile::size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub patient_id: String,
    pub image_path: PathBuf,
    pub mpp: f64,
}

/// Patient → image table (`patient_id,image_path,mpp`).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PatientManifest {
    pub rows: Vec<ManifestRow>,
}

impl PatientManifest {
    /// Read a manifest CSV. Relative image paths resolve against the manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::ItemError { path: path.to_path_buf(), message: e.to_string() })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::InvalidDataset("empty manifest".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols != ["patient_id", "image_path", "mpp"] {
            return Err(Error::InvalidDataset(format!(
                "manifest header must be patient_id,image_path,mpp, got {header}"
            )));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(Error::InvalidDataset(format!("manifest line {}: expected 3 fields", i + 2)));
            }
            if fields[0].is_empty() {
                return Err(Error::InvalidDataset(format!("manifest line {}: empty patient id", i + 2)));
            }
            let mpp: f64 = fields[2].parse().map_err(|_| {
                Error::InvalidDataset(format!("manifest line {}: bad mpp {:?}", i + 2, fields[2]))
            })?;
            if !(mpp.is_finite() && mpp > 0.0) {
                return Err(Error::InvalidDataset(format!("manifest line {}: mpp must be positive", i + 2)));
            }
            let p = Path::new(fields[1]);
            let image_path = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
            rows.push(ManifestRow { patient_id: fields[0].to_string(), image_path, mpp });
        }
        Ok(Self { rows })
    }

    /// Serialize with image paths relative to `base` when possible.
    pub fn to_csv(&self, base: &Path) -> String {
        let mut out = String::from("patient_id,image_path,mpp\n");
        for r in &self.rows {
            let p = r.image_path.strip_prefix(base).unwrap_or(&r.image_path);
            out.push_str(&format!("{},{},{}\n", r.patient_id, p.display(), r.mpp));
        }
        out
    }
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    image::open(path)
        .map(|img| img.to_rgb8())
        .map_err(|e| Error::ItemError { path: path.to_path_buf(), message: e.to_string() })
}

/// Resample so that one pixel covers `target_mpp` microns.
///
/// Output dimensions are `round(dim * source_mpp / target_mpp)`, sampled
/// bilinearly at pixel centers. Equal resolutions return the input unchanged.
pub fn rescale_to_mpp(image: &RgbImage, source_mpp: f64, target_mpp: f64) -> Result<RgbImage> {
    for (name, v) in [("source_mpp", source_mpp), ("target_mpp", target_mpp)] {
        if !(v > 0.0 && v < 100.0) {
            return Err(Error::invalid(format!("{name} must lie in (0, 100), got {v}")));
        }
    }
    if source_mpp == target_mpp {
        return Ok(image.clone());
    }
    let factor = source_mpp / target_mpp;
    let w = (image.width() as f64 * factor).round() as u32;
    let h = (image.height() as f64 * factor).round() as u32;
    if w == 0 || h == 0 {
        return Err(Error::invalid(format!(
            "rescaling {}x{} by {factor} gives an empty image",
            image.width(),
            image.height()
        )));
    }
    Ok(resize_bilinear(image, w, h))
}

pub fn resize_bilinear(image: &RgbImage, w: u32, h: u32) -> RgbImage {
    let (sw, sh) = image.dimensions();
    let sx = sw as f64 / w as f64;
    let sy = sh as f64 / h as f64;
    let axis = |o: u32, scale: f64, n: u32| -> (u32, u32, f64) {
        let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = pos.floor() as u32;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, pos - i0 as f64)
    };
    RgbImage::from_fn(w, h, |x, y| {
        let (x0, x1, fx) = axis(x, sx, sw);
        let (y0, y1, fy) = axis(y, sy, sh);
        let (p00, p10) = (image.get_pixel(x0, y0).0, image.get_pixel(x1, y0).0);
        let (p01, p11) = (image.get_pixel(x0, y1).0, image.get_pixel(x1, y1).0);
        let mut out = [0u8; 3];
        for c in 0..3 {
            let top = p00[c] as f64 * (1.0 - fx) + p10[c] as f64 * fx;
            let bottom = p01[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
            out[c] = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
        }
        Rgb(out)
    })
}

/// Cut an image into `tile_size` squares at multiples of `stride`, row-major.
/// Partial tiles at the right and bottom edges are dropped.
pub fn tile_image(image: &RgbImage, tile_size: u32, stride: u32, source_id: &str) -> Result<Vec<Tile>> {
    if tile_size == 0 || stride == 0 {
        return Err(Error::invalid("tile_size and stride must be at least 1"));
    }
    let (w, h) = image.dimensions();
    if w < tile_size || h < tile_size {
        return Ok(Vec::new());
    }
    let nx = (w - tile_size) / stride + 1;
    let ny = (h - tile_size) / stride + 1;
    let mut tiles = Vec::with_capacity((nx * ny) as usize);
    for gy in 0..ny {
        for gx in 0..nx {
            let view = image::imageops::crop_imm(image, gx * stride, gy * stride, tile_size, tile_size);
            tiles.push(Tile {
                pixels: view.to_image(),
                source_id: source_id.to_string(),
                grid_xy: (gx, gy),
                patient_id: None,
            });
        }
    }
    Ok(tiles)
}

/// Keep a tile unless the fraction of near-white pixels exceeds `max_white_fraction`.
pub fn content_filter(tile: &Tile, white_threshold: u8, max_white_fraction: f64) -> bool {
    let total = tile.pixels.pixels().len();
    if total == 0 {
        return false;
    }
    let white = tile.pixels.pixels().filter(|p| p.0.iter().all(|&v| v >= white_threshold)).count();
    (white as f64 / total as f64) <= max_white_fraction
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let read = fs::read_dir(dir)
        .map_err(|e| Error::ItemError { path: dir.to_path_buf(), message: e.to_string() })?;
    let mut entries = Vec::new();
    for entry in read {
        let entry = entry.map_err(|e| Error::ItemError { path: dir.to_path_buf(), message: e.to_string() })?;
        entries.push(entry.path());
    }
    entries.sort();
    Ok(entries)
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Load a `root/CLASS_NAME/*.{png,tif}` dataset. Classes are indexed by the
/// lexicographic rank of their folder name; files load in lexicographic order.
pub fn load_class_dataset(root: &Path) -> Result<LabeledDataset> {
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.len() < 2 {
        return Err(Error::InvalidDataset(format!(
            "{} has {} class folders, need at least 2",
            root.display(),
            class_dirs.len()
        )));
    }
    let mut tiles = Vec::new();
    let mut labels = Vec::new();
    let mut class_names = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let files: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| is_image(p)).collect();
        if files.is_empty() {
            return Err(Error::InvalidDataset(format!("class folder {name} has no images")));
        }
        for file in files {
            let pixels = load_image(&file)?;
            let fname = file.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            tiles.push(Tile::new(pixels, format!("{name}/{fname}")));
            labels.push(label);
        }
        class_names.push(name);
    }
    LabeledDataset::new(tiles, labels, class_names)
}
