//! Synthetic H&E-like data rendered through Beer-Lambert absorption.
//!
//! Three tile domains share nine tissue classes: a source domain (pretraining
//! stand-in: rotated stain hues, shifted texture frequencies, one distinct
//! color per class), and a target domain split into fine-tuning and test sets
//! where some classes share stain intensities and differ only by texture.
//! Patients are mosaics of target-domain tiles with per-slide stain drift;
//! their expression and mutation targets are noisy functions of the class mix.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use histotune_core::seed::{derive_seed, rng_from, tag};
use histotune_core::tiling::{resize_bilinear, ManifestRow, PatientManifest};
use image::{Rgb, RgbImage};
use log::info;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const CLASS_NAMES: [&str; 9] = ["ADI", "BACK", "DEB", "LYM", "MUC", "MUS", "NORM", "STR", "TUM"];

/// Hematoxylin and eosin OD directions of the target domain.
const H_VECTOR: [f64; 3] = [0.5626, 0.7201, 0.4062];
const E_VECTOR: [f64; 3] = [0.2159, 0.8012, 0.5581];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    /// Target-domain tiles per class used for fine-tuning.
    pub tiles_per_class: usize,
    /// Independent target-domain tiles per class for the tissue experiment.
    pub test_tiles_per_class: usize,
    pub source_tiles_per_class: usize,
    pub tile_size: u32,
    pub n_patients: usize,
    pub tiles_per_patient: usize,
    pub n_genes: usize,
    pub n_mutations: usize,
    /// Share of patients whose slide holds a single tissue class.
    pub pure_patient_fraction: f64,
    /// Standard deviation of the log-expression noise.
    pub expression_noise: f64,
    /// Rotation of the source-domain stain vectors about the gray axis, degrees.
    pub hue_shift_deg: f64,
    /// Relative change of source-domain texture frequencies.
    pub texture_freq_shift: f64,
    /// Chance that a source tile takes the texture of a random class, so that
    /// source classes are told apart by color rather than texture.
    pub source_texture_mixing: f64,
    /// Per-slide stain drift (relative concentration scale spread and hue jitter in radians).
    pub slide_stain_jitter: f64,
    pub pixel_noise: f64,
    /// Share of slides exported at 0.5 mpp instead of 0.25.
    pub half_resolution_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 9,
            tiles_per_class: 200,
            test_tiles_per_class: 100,
            source_tiles_per_class: 150,
            tile_size: 32,
            n_patients: 60,
            tiles_per_patient: 16,
            n_genes: 20,
            n_mutations: 5,
            pure_patient_fraction: 0.2,
            expression_noise: 0.25,
            hue_shift_deg: 40.0,
            texture_freq_shift: 0.6,
            source_texture_mixing: 1.0,
            slide_stain_jitter: 0.1,
            pixel_noise: 4.0,
            half_resolution_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pattern {
    Flat,
    Stripes { freq: f64, angle_deg: f64 },
    Rings { freq: f64 },
    Speckle { freq: f64 },
}

/// Appearance of one tissue class in one domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassStyle {
    /// Mean hematoxylin and eosin concentrations.
    pub conc: [f64; 2],
    pub pattern: Pattern,
    pub amplitude: f64,
    pub nuclei: usize,
    pub nucleus_radius: f64,
}

fn style(conc: [f64; 2], pattern: Pattern, amplitude: f64, nuclei: usize, nucleus_radius: f64) -> ClassStyle {
    ClassStyle { conc, pattern, amplitude, nuclei, nucleus_radius }
}

/// Target-domain atlas. MUS/STR and NORM/TUM share stain intensities and differ
/// by texture: stripe orientation and frequency, nuclear size and crowding.
pub fn target_styles() -> [ClassStyle; 9] {
    use Pattern::*;
    [
        style([0.05, 0.15], Rings { freq: 1.5 }, 0.8, 1, 1.2),
        style([0.02, 0.04], Flat, 0.1, 0, 1.0),
        style([0.35, 0.35], Speckle { freq: 8.0 }, 0.6, 6, 1.0),
        style([0.9, 0.2], Speckle { freq: 3.0 }, 0.3, 20, 1.6),
        style([0.15, 0.35], Flat, 0.3, 1, 1.0),
        style([0.25, 0.8], Stripes { freq: 4.0, angle_deg: 30.0 }, 0.6, 3, 1.2),
        style([0.6, 0.5], Rings { freq: 3.0 }, 0.5, 8, 1.3),
        style([0.25, 0.8], Stripes { freq: 2.5, angle_deg: 120.0 }, 0.6, 2, 1.0),
        style([0.6, 0.5], Rings { freq: 3.0 }, 0.5, 16, 2.0),
    ]
}

/// Source-domain atlas: the same textures at shifted frequency, one distinct
/// color per class, and a single nucleus size throughout.
pub fn source_styles(freq_shift: f64) -> [ClassStyle; 9] {
    let colors = [[0.1, 0.3], [0.03, 0.05], [0.5, 0.25], [1.0, 0.1], [0.2, 0.6], [0.2, 1.0], [0.75, 0.7], [0.45, 0.55], [0.9, 0.45]];
    let mut out = target_styles();
    for (s, c) in out.iter_mut().zip(colors) {
        s.conc = c;
        s.nucleus_radius = 1.5;
        let m = 1.0 + freq_shift;
        s.pattern = match s.pattern {
            Pattern::Flat => Pattern::Flat,
            Pattern::Stripes { freq, angle_deg } => Pattern::Stripes { freq: freq * m, angle_deg },
            Pattern::Rings { freq } => Pattern::Rings { freq: freq * m },
            Pattern::Speckle { freq } => Pattern::Speckle { freq: freq * m },
        };
    }
    out
}

/// Rotation of a unit OD vector about the gray axis (1,1,1)/sqrt(3), kept non-negative.
pub fn rotate_hue(v: [f64; 3], radians: f64) -> [f64; 3] {
    let k = 1.0 / 3f64.sqrt();
    let axis = [k, k, k];
    let (s, c) = radians.sin_cos();
    let dot: f64 = (0..3).map(|i| axis[i] * v[i]).sum();
    let cross = [axis[1] * v[2] - axis[2] * v[1], axis[2] * v[0] - axis[0] * v[2], axis[0] * v[1] - axis[1] * v[0]];
    let mut r = [0.0; 3];
    for i in 0..3 {
        r[i] = (v[i] * c + cross[i] * s + axis[i] * dot * (1.0 - c)).max(0.02);
    }
    let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
    r.map(|x| x / n)
}

/// Stain vectors plus rendering noise for one domain or slide.
#[derive(Debug, Clone, Copy)]
pub struct Optics {
    pub h: [f64; 3],
    pub e: [f64; 3],
    pub conc_scale: [f64; 2],
    pub pixel_noise: f64,
}

/// Renders one tile of the given style.
pub fn render_tile(style: &ClassStyle, optics: &Optics, size: u32, seed: u64) -> RgbImage {
    let mut rng = rng_from(seed, &[]);
    let s = size as f64;
    let jitter_deg: f64 = rng.random_range(-15.0..15.0);
    let phase: f64 = rng.random_range(0.0..2.0 * PI);
    let center = (rng.random_range(0.0..s), rng.random_range(0.0..s));
    let scale_h = (0.1 * Normal::new(0.0, 1.0).unwrap().sample(&mut rng) as f64).exp();
    let scale_e = (0.1 * Normal::new(0.0, 1.0).unwrap().sample(&mut rng) as f64).exp();
    let amp = style.amplitude * rng.random_range(0.8..1.2);
    // speckle: a few random plane waves
    let waves: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| (rng.random_range(0.0..PI), rng.random_range(0.0..2.0 * PI), rng.random_range(0.7..1.3)))
        .collect();
    let n_nuclei = if style.nuclei == 0 {
        0
    } else {
        let lo = (style.nuclei as f64 * 0.7).floor() as usize;
        let hi = (style.nuclei as f64 * 1.3).ceil() as usize;
        rng.random_range(lo..=hi.max(lo))
    };
    let nuclei: Vec<(f64, f64, f64)> = (0..n_nuclei)
        .map(|_| (rng.random_range(0.0..s), rng.random_range(0.0..s), style.nucleus_radius * rng.random_range(0.8..1.2)))
        .collect();
    let noise = Normal::new(0.0, optics.pixel_noise.max(1e-12)).unwrap();

    RgbImage::from_fn(size, size, |x, y| {
        let (u, v) = (x as f64 + 0.5, y as f64 + 0.5);
        let t = match style.pattern {
            Pattern::Flat => 0.0,
            Pattern::Stripes { freq, angle_deg } => {
                let a = (angle_deg + jitter_deg).to_radians();
                (2.0 * PI * freq * (u * a.cos() + v * a.sin()) / s + phase).sin()
            }
            Pattern::Rings { freq } => {
                let r = ((u - center.0).powi(2) + (v - center.1).powi(2)).sqrt();
                (2.0 * PI * freq * r / s + phase).sin()
            }
            Pattern::Speckle { freq } => {
                waves
                    .iter()
                    .map(|&(a, p, m)| (2.0 * PI * freq * m * (u * a.cos() + v * a.sin()) / s + p).sin())
                    .sum::<f64>()
                    / 2.0
            }
        };
        let mut nuc = 0.0;
        for &(nx, ny, r) in &nuclei {
            let d = ((u - nx).powi(2) + (v - ny).powi(2)).sqrt();
            nuc += (1.0 - (d - r).max(0.0)).clamp(0.0, 1.0);
        }
        let ch = (style.conc[0] * scale_h * optics.conc_scale[0] * (1.0 + amp * t) + 0.8 * nuc.min(1.5)).max(0.0);
        let ce = (style.conc[1] * scale_e * optics.conc_scale[1] * (1.0 + 0.7 * amp * t)).max(0.0);
        let px = [0, 1, 2].map(|k| {
            let od = ch * optics.h[k] + ce * optics.e[k];
            // inverse of OD = -log10((v + 1) / 255)
            let val = 255.0 * 10f64.powf(-od) - 1.0 + noise.sample(&mut rng);
            val.round().clamp(0.0, 255.0) as u8
        });
        Rgb(px)
    })
}

/// Ground truth behind the generated patient targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub spec: SyntheticSpec,
    pub seed: u64,
    pub class_names: Vec<String>,
    pub gene_names: Vec<String>,
    /// Per gene, per class mean of ln(1 + expression).
    pub gene_class_means: Vec<Vec<f64>>,
    pub mutation_names: Vec<String>,
    /// Per mutation, per class logit contribution.
    pub mutation_class_effects: Vec<Vec<f64>>,
    pub mutation_bias: Vec<f64>,
    /// Realized per-patient class fractions, keyed by patient id.
    pub mixtures: BTreeMap<String, Vec<f64>>,
}

impl SyntheticTruth {
    /// Noise-free ln(1 + expression) of gene `g` for a class mixture.
    pub fn expected_log_expression(&self, g: usize, mixture: &[f64]) -> f64 {
        self.gene_class_means[g].iter().zip(mixture).map(|(m, p)| m * p).sum()
    }

    /// Mutation probability of mutation `m` for a class mixture.
    pub fn mutation_probability(&self, m: usize, mixture: &[f64]) -> f64 {
        let z: f64 = self.mutation_class_effects[m].iter().zip(mixture).map(|(t, p)| t * p).sum::<f64>() + self.mutation_bias[m];
        1.0 / (1.0 + (-z).exp())
    }
}

/// Locations of everything written by [`generate`].
#[derive(Debug, Clone)]
pub struct SyntheticLayout {
    pub root: PathBuf,
}

impl SyntheticLayout {
    pub fn source(&self) -> PathBuf {
        self.root.join("source")
    }
    pub fn target_train(&self) -> PathBuf {
        self.root.join("target_train")
    }
    pub fn target_test(&self) -> PathBuf {
        self.root.join("target_test")
    }
    pub fn slides(&self) -> PathBuf {
        self.root.join("slides")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.csv")
    }
    pub fn expression(&self) -> PathBuf {
        self.root.join("expression.csv")
    }
    pub fn mutation(&self) -> PathBuf {
        self.root.join("mutation.csv")
    }
    pub fn mixtures(&self) -> PathBuf {
        self.root.join("mixtures.csv")
    }
    pub fn truth(&self) -> PathBuf {
        self.root.join("truth.json")
    }
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    img.save(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn target_optics(spec: &SyntheticSpec) -> Optics {
    Optics { h: H_VECTOR, e: E_VECTOR, conc_scale: [1.0, 1.0], pixel_noise: spec.pixel_noise }
}

fn source_optics(spec: &SyntheticSpec) -> Optics {
    let r = spec.hue_shift_deg.to_radians();
    Optics { h: rotate_hue(H_VECTOR, r), e: rotate_hue(E_VECTOR, r), conc_scale: [1.0, 1.0], pixel_noise: spec.pixel_noise }
}

/// `texture_mixing` is the chance that a tile borrows the texture of a random class
/// while keeping the stain intensities of its own.
fn write_class_folders(root: &Path, styles: &[ClassStyle], optics: &Optics, spec: &SyntheticSpec, per_class: usize, texture_mixing: f64, seed: u64) -> Result<()> {
    let jobs: Vec<(usize, usize)> = (0..spec.n_classes).flat_map(|k| (0..per_class).map(move |i| (k, i))).collect();
    jobs.par_iter().try_for_each(|&(k, i)| {
        let tile_seed = derive_seed(seed, &[k as u64, i as u64]);
        let mut rng = rng_from(tile_seed, &[tag("texture")]);
        let style = if texture_mixing > 0.0 && rng.random_bool(texture_mixing) {
            ClassStyle { conc: styles[k].conc, ..styles[rng.random_range(0..spec.n_classes)] }
        } else {
            styles[k]
        };
        let img = render_tile(&style, optics, spec.tile_size, tile_seed);
        save_png(&img, &root.join(CLASS_NAMES[k]).join(format!("{}_{i:05}.png", CLASS_NAMES[k])))
    })
}

/// Class counts summing to `n`, proportional to `p` by largest remainder.
fn apportion(p: &[f64], n: usize) -> Vec<usize> {
    let raw: Vec<f64> = p.iter().map(|x| x * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let missing = n - counts.iter().sum::<usize>();
    for &k in order.iter().take(missing) {
        counts[k] += 1;
    }
    counts
}

/// Writes the full synthetic tree under `root`; byte-identical for a fixed seed.
pub fn generate(spec: &SyntheticSpec, seed: u64, root: &Path) -> Result<SyntheticTruth> {
    let layout = SyntheticLayout { root: root.to_path_buf() };
    let n_classes = spec.n_classes;
    let class_names: Vec<String> = CLASS_NAMES[..n_classes].iter().map(|s| s.to_string()).collect();

    info!("rendering {} source, {} fine-tuning and {} test tiles per class", spec.source_tiles_per_class, spec.tiles_per_class, spec.test_tiles_per_class);
    let src = source_styles(spec.texture_freq_shift);
    let tgt = target_styles();
    let (src_seed, train_seed, test_seed) = (derive_seed(seed, &[tag("source")]), derive_seed(seed, &[tag("target_train")]), derive_seed(seed, &[tag("target_test")]));
    write_class_folders(&layout.source(), &src, &source_optics(spec), spec, spec.source_tiles_per_class, spec.source_texture_mixing, src_seed)?;
    write_class_folders(&layout.target_train(), &tgt, &target_optics(spec), spec, spec.tiles_per_class, 0.0, train_seed)?;
    write_class_folders(&layout.target_test(), &tgt, &target_optics(spec), spec, spec.test_tiles_per_class, 0.0, test_seed)?;

    // tissue classes a slide can contain: everything but background
    let tissue: Vec<usize> = (0..n_classes).filter(|&k| CLASS_NAMES[k] != "BACK").collect();
    let mut rng = rng_from(seed, &[tag("patients")]);
    let mut mixtures = BTreeMap::new();
    let mut rows = Vec::new();
    let mut slides = Vec::new();
    for p in 0..spec.n_patients {
        let id = format!("P{p:04}");
        let mut weights = vec![0.0; n_classes];
        if rng.random_bool(spec.pure_patient_fraction) {
            weights[tissue[rng.random_range(0..tissue.len())]] = 1.0;
        } else {
            // Dirichlet(0.5) via normalized squared normals
            let normal = Normal::new(0.0, 1.0).unwrap();
            for &k in &tissue {
                let z: f64 = normal.sample(&mut rng);
                weights[k] = z * z + 1e-6;
            }
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
        }
        let counts = apportion(&weights, spec.tiles_per_patient);
        let realized: Vec<f64> = counts.iter().map(|&c| c as f64 / spec.tiles_per_patient as f64).collect();
        let mut classes: Vec<usize> = counts.iter().enumerate().flat_map(|(k, &c)| std::iter::repeat_n(k, c)).collect();
        // shuffle placement on the mosaic
        for i in (1..classes.len()).rev() {
            classes.swap(i, rng.random_range(0..=i));
        }
        let jitter = spec.slide_stain_jitter;
        let optics = Optics {
            h: rotate_hue(H_VECTOR, rng.random_range(-jitter..=jitter)),
            e: rotate_hue(E_VECTOR, rng.random_range(-jitter..=jitter)),
            conc_scale: [rng.random_range(1.0 - jitter..=1.0 + jitter), rng.random_range(1.0 - jitter..=1.0 + jitter)],
            pixel_noise: spec.pixel_noise,
        };
        let half = rng.random_bool(spec.half_resolution_fraction);
        slides.push((id.clone(), classes, optics, half, derive_seed(seed, &[tag("slide"), p as u64])));
        rows.push(ManifestRow {
            patient_id: id.clone(),
            image_path: layout.slides().join(format!("{id}.png")),
            mpp: if half { 0.5 } else { 0.25 },
        });
        mixtures.insert(id, realized);
    }

    let side = (spec.tiles_per_patient as f64).sqrt().ceil() as u32;
    let ts = spec.tile_size;
    slides.par_iter().try_for_each(|(id, classes, optics, half, slide_seed)| {
        let mut img = RgbImage::from_pixel(side * ts, side * ts, Rgb([255, 255, 255]));
        for (i, &k) in classes.iter().enumerate() {
            let tile = render_tile(&tgt[k], optics, ts, derive_seed(*slide_seed, &[i as u64]));
            let (gx, gy) = (i as u32 % side, i as u32 / side);
            image::imageops::replace(&mut img, &tile, (gx * ts) as i64, (gy * ts) as i64);
        }
        if *half {
            img = resize_bilinear(&img, img.width() / 2, img.height() / 2);
        }
        save_png(&img, &layout.slides().join(format!("{id}.png")))
    })?;
    write_text(&layout.manifest(), &PatientManifest { rows }.to_csv(&layout.root))?;

    let gene_names: Vec<String> = (1..=spec.n_genes).map(|g| format!("G{g:03}")).collect();
    let gene_class_means: Vec<Vec<f64>> =
        (0..spec.n_genes).map(|_| (0..n_classes).map(|_| rng.random_range(0.5..4.0)).collect()).collect();
    let mutation_names: Vec<String> = (1..=spec.n_mutations).map(|m| format!("M{m:02}")).collect();
    let effect = Normal::new(0.0, 3.0).unwrap();
    let mutation_class_effects: Vec<Vec<f64>> =
        (0..spec.n_mutations).map(|_| (0..n_classes).map(|_| effect.sample(&mut rng)).collect()).collect();
    let mutation_bias: Vec<f64> = (0..spec.n_mutations).map(|_| rng.random_range(-1.0..0.5)).collect();
    let truth = SyntheticTruth {
        spec: spec.clone(),
        seed,
        class_names: class_names.clone(),
        gene_names,
        gene_class_means,
        mutation_names,
        mutation_class_effects,
        mutation_bias,
        mixtures,
    };

    let noise = Normal::new(0.0, spec.expression_noise.max(1e-300)).unwrap();
    let mut expr = format!("patient_id,{}\n", truth.gene_names.join(","));
    let mut muts = format!("patient_id,{}\n", truth.mutation_names.join(","));
    let mut mix = format!("patient_id,{}\n", class_names.join(","));
    for (id, p) in &truth.mixtures {
        let values: Vec<String> = (0..spec.n_genes)
            .map(|g| {
                let eps = if spec.expression_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                let log_value = (truth.expected_log_expression(g, p) + eps).max(0.0);
                format!("{:.6}", log_value.exp_m1())
            })
            .collect();
        expr.push_str(&format!("{id},{}\n", values.join(",")));
        let flags: Vec<String> = (0..spec.n_mutations)
            .map(|m| u8::from(rng.random_bool(truth.mutation_probability(m, p))).to_string())
            .collect();
        muts.push_str(&format!("{id},{}\n", flags.join(",")));
        let fr: Vec<String> = p.iter().map(|v| format!("{v:.6}")).collect();
        mix.push_str(&format!("{id},{}\n", fr.join(",")));
    }
    write_text(&layout.expression(), &expr)?;
    write_text(&layout.mutation(), &muts)?;
    write_text(&layout.mixtures(), &mix)?;
    write_text(&layout.truth(), &(serde_json::to_string_pretty(&truth)? + "\n"))?;
    info!("wrote synthetic tree to {}", root.display());
    Ok(truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apportion_sums_and_follows_weights() {
        assert_eq!(apportion(&[0.5, 0.25, 0.25], 4), vec![2, 1, 1]);
        assert_eq!(apportion(&[1.0 / 3.0; 3], 16).iter().sum::<usize>(), 16);
        assert_eq!(apportion(&[0.0, 1.0], 5), vec![0, 5]);
    }

    #[test]
    fn hue_rotation_keeps_unit_length_and_zero_is_identity() {
        let r = rotate_hue(H_VECTOR, 0.0);
        for k in 0..3 {
            assert!((r[k] - H_VECTOR[k] / H_VECTOR.iter().map(|x| x * x).sum::<f64>().sqrt()).abs() < 1e-12);
        }
        let r = rotate_hue(E_VECTOR, 0.7);
        assert!((r.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tiles_are_deterministic() {
        let spec = SyntheticSpec::default();
        let a = render_tile(&target_styles()[5], &target_optics(&spec), 32, 9);
        let b = render_tile(&target_styles()[5], &target_optics(&spec), 32, 9);
        assert_eq!(a, b);
    }
}
