//! Subcommand implementations. Each is a pure function of (config, inputs).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use histotune_core::finetune::{self, extract_tile_features, TrainLog};
use histotune_core::nn::{read_checkpoint, write_checkpoint, Architecture, NetworkParams};
use histotune_core::seed::{derive_seed, tag};
use histotune_core::stain::{normalize_image, MacenkoParams, StainBasis};
use histotune_core::tiling::{
    content_filter, load_class_dataset, load_image, rescale_to_mpp, tile_image, LabeledDataset, PatientManifest, Tile,
};
use histotune_core::FeatureMatrix;
use log::{debug, info, warn};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{require_exists, NormScope, PipelineConfig};
use crate::error::{CliError, Result};
use crate::experiment::{self, CvReport, ExperimentKind, TargetTable};
use crate::report;
use crate::synth::{self, SyntheticTruth};

fn create_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    create_parent(path)?;
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| CliError::io(path, e))
}

pub fn save_checkpoint(params: &NetworkParams<f32>, path: &Path) -> Result<()> {
    create_parent(path)?;
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    write_checkpoint(params, BufWriter::new(file))?;
    Ok(())
}

/// Loads a checkpoint and the architecture it fits; the class count comes from the classifier bias.
pub fn load_checkpoint(cfg: &PipelineConfig, path: &Path) -> Result<(Architecture, NetworkParams<f32>)> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let params = read_checkpoint(BufReader::new(file))?;
    let n_classes = params
        .get("b.classifier.b")
        .map(|t| t.data().len())
        .ok_or_else(|| CliError::Data(format!("{}: checkpoint has no classifier", path.display())))?;
    let arch = Architecture::mini_xception(&cfg.network.net_config(n_classes))?;
    params.validate(&arch).map_err(|e| CliError::config("network", format!("{}: {e}", path.display())))?;
    Ok((arch, params))
}

fn macenko(cfg: &PipelineConfig) -> MacenkoParams {
    MacenkoParams { alpha: cfg.stain.alpha, beta: cfg.stain.beta, io: cfg.stain.io }
}

/// Per-tile normalization; tiles whose stains cannot be estimated (flat or
/// nearly empty ones) stay as they are. Returns how many were left unchanged.
fn normalize_tiles(cfg: &PipelineConfig, tiles: &mut [Tile]) -> usize {
    let reference = StainBasis::reference();
    let params = macenko(cfg);
    tiles
        .par_iter_mut()
        .map(|t| match normalize_image(&t.pixels, &reference, &params) {
            Ok(img) => {
                t.pixels = img;
                0
            }
            Err(e) => {
                debug!("{}: stain normalization skipped: {e}", t.id());
                1
            }
        })
        .sum()
}

/// Class-folder dataset; `normalize` applies per-tile stain normalization.
pub fn load_dataset(cfg: &PipelineConfig, dir: &Path, normalize: bool) -> Result<LabeledDataset> {
    let mut ds = load_class_dataset(dir)?;
    if normalize {
        let skipped = normalize_tiles(cfg, &mut ds.tiles);
        if skipped > 0 {
            info!("{}: {skipped} of {} tiles kept unnormalized", dir.display(), ds.len());
        }
    }
    let size = cfg.tiling.tile_size;
    if ds.tile_size() != Some(size) || ds.tiles.iter().any(|t| t.pixels.dimensions() != (size, size)) {
        return Err(CliError::Data(format!("{}: every tile must be {size}x{size}", dir.display())));
    }
    Ok(ds)
}

pub fn gen_synthetic(cfg: &PipelineConfig) -> Result<SyntheticTruth> {
    synth::generate(&cfg.synthetic, derive_seed(cfg.seed, &[tag("synthetic")]), &cfg.synthetic_dir())
}

/// End-to-end training on the source-domain class folders.
pub fn pretrain(cfg: &PipelineConfig) -> Result<TrainLog> {
    let dir = cfg.source_dir();
    require_exists("paths.source", &dir)?;
    let ds = load_dataset(cfg, &dir, false)?;
    let arch = Architecture::mini_xception(&cfg.network.net_config(ds.n_classes()))?;
    let mut params = NetworkParams::init(&arch, derive_seed(cfg.seed, &[tag("pretrain_init")]));
    info!("pretraining on {} tiles of {} classes", ds.len(), ds.n_classes());
    let p = &cfg.pretrain;
    let log = finetune::pretrain(&arch, &mut params, &ds, p.lr, p.epochs, p.batch_size, derive_seed(cfg.seed, &[tag("pretrain")]))?;
    let path = cfg.pretrained_path();
    save_checkpoint(&params, &path)?;
    write_json(&path.with_extension("log.json"), &log)?;
    info!("wrote {}", path.display());
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FineTuneLog {
    pub step1: TrainLog,
    pub step2: TrainLog,
}

/// Two-step fine-tuning of a pretrained checkpoint on the target-domain class folders.
///
/// Part A is taken from the checkpoint; Part B (the add-on head) is freshly
/// initialized for the target classes before step 1.
pub fn finetune(cfg: &PipelineConfig, checkpoint: Option<&Path>) -> Result<FineTuneLog> {
    let ckpt = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| cfg.pretrained_path());
    require_exists("paths.pretrained", &ckpt)?;
    let dir = cfg.target_train_dir();
    require_exists("paths.target_train", &dir)?;
    let (_, pretrained) = load_checkpoint(cfg, &ckpt)?;
    let ds = load_dataset(cfg, &dir, cfg.stain.normalize_tiles)?;
    let arch = Architecture::mini_xception(&cfg.network.net_config(ds.n_classes()))?;
    let mut params = NetworkParams::init(&arch, derive_seed(cfg.seed, &[tag("head_init")]));
    params.part_a = pretrained.part_a;
    let mut ft = cfg.finetune.to_core();
    ft.seed = derive_seed(cfg.seed, &[tag("finetune"), cfg.finetune.seed]);
    info!("fine-tuning on {} tiles of {} classes", ds.len(), ds.n_classes());
    let step1 = finetune::finetune_step1(&arch, &mut params, &ds, &ft)?;
    let step2 = finetune::finetune_step2(&arch, &mut params, &ds, &ft)?;
    let path = cfg.finetuned_path();
    save_checkpoint(&params, &path)?;
    let log = FineTuneLog { step1, step2 };
    write_json(&path.with_extension("log.json"), &log)?;
    info!("wrote {}", path.display());
    Ok(log)
}

#[derive(Debug, Clone)]
pub enum ExtractInput {
    /// Folder-per-class tiles; one feature row per tile.
    Dataset(PathBuf),
    /// Patient slides; tile rows plus one averaged row per patient.
    Manifest(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractOutput {
    pub tiles: PathBuf,
    pub patients: Option<PathBuf>,
}

fn save_features(fm: &FeatureMatrix, path: &Path) -> Result<()> {
    create_parent(path)?;
    fm.save(path)?;
    let csv = path.with_extension("csv");
    std::fs::write(&csv, fm.to_csv()).map_err(|e| CliError::io(&csv, e))
}

/// Rescale, tile, filter and stain-normalize one slide; with slide scope the
/// normalization runs on the whole slide before tiling.
fn slide_tiles(cfg: &PipelineConfig, patient: &str, image: &Path, mpp: f64, slide_index: usize) -> Result<Vec<Tile>> {
    let img = load_image(image)?;
    let img = rescale_to_mpp(&img, mpp, cfg.tiling.target_mpp)?;
    let slide_scope = cfg.stain.normalize_slides && cfg.stain.scope == NormScope::Slide;
    let img = if slide_scope {
        match normalize_image(&img, &StainBasis::reference(), &macenko(cfg)) {
            Ok(n) => n,
            Err(e) => {
                warn!("{}: stain normalization failed ({e}); using the unnormalized slide", image.display());
                img
            }
        }
    } else {
        img
    };
    let t = &cfg.tiling;
    let mut tiles = tile_image(&img, t.tile_size, t.stride, &format!("{patient}/{slide_index:03}"))?;
    tiles.retain(|tile| content_filter(tile, t.white_threshold, t.max_white_fraction));
    if cfg.stain.normalize_slides && !slide_scope {
        let skipped = normalize_tiles(cfg, &mut tiles);
        if skipped > 0 {
            debug!("{}: {skipped} of {} tiles kept unnormalized", image.display(), tiles.len());
        }
    }
    for tile in &mut tiles {
        tile.patient_id = Some(patient.to_string());
    }
    Ok(tiles)
}

/// Writes `<name>.pfv` (tiles, or patients for a manifest) plus CSV copies under the features directory.
pub fn extract(cfg: &PipelineConfig, checkpoint: &Path, input: &ExtractInput, name: &str) -> Result<ExtractOutput> {
    require_exists("checkpoint", checkpoint)?;
    let (arch, params) = load_checkpoint(cfg, checkpoint)?;
    let dir = cfg.features_dir();
    match input {
        ExtractInput::Dataset(root) => {
            require_exists("dataset", root)?;
            let ds = load_dataset(cfg, root, cfg.stain.normalize_tiles)?;
            let fm = extract_parallel(&arch, &params, &ds.tiles)?;
            let path = dir.join(format!("{name}.pfv"));
            save_features(&fm, &path)?;
            info!("wrote {} tile rows to {}", fm.n_rows(), path.display());
            Ok(ExtractOutput { tiles: path, patients: None })
        }
        ExtractInput::Manifest(path) => {
            require_exists("paths.manifest", path)?;
            let manifest = PatientManifest::load(path)?;
            let mut slide_index: BTreeMap<&str, usize> = BTreeMap::new();
            let jobs: Vec<(&str, &Path, f64, usize)> = manifest
                .rows
                .iter()
                .map(|r| {
                    let i = slide_index.entry(r.patient_id.as_str()).or_insert(0);
                    *i += 1;
                    (r.patient_id.as_str(), r.image_path.as_path(), r.mpp, *i - 1)
                })
                .collect();
            let per_slide = jobs
                .par_iter()
                .map(|&(p, img, mpp, i)| slide_tiles(cfg, p, img, mpp, i))
                .collect::<Result<Vec<_>>>()?;
            let tiles: Vec<Tile> = per_slide.into_iter().flatten().collect();
            let mut map = BTreeMap::new();
            for t in &tiles {
                map.insert(t.id(), t.patient_id.clone().expect("set above"));
            }
            for r in &manifest.rows {
                if !map.values().any(|p| p == &r.patient_id) {
                    return Err(CliError::Core(histotune_core::Error::EmptyPatient(r.patient_id.clone())));
                }
            }
            let fm = extract_parallel(&arch, &params, &tiles)?;
            let tiles_path = dir.join(format!("{name}_tiles.pfv"));
            save_features(&fm, &tiles_path)?;
            let patients = finetune::aggregate_patient(&fm, &map)?;
            let patients_path = dir.join(format!("{name}.pfv"));
            save_features(&patients, &patients_path)?;
            info!("wrote {} tile rows and {} patient rows", fm.n_rows(), patients.n_rows());
            Ok(ExtractOutput { tiles: tiles_path, patients: Some(patients_path) })
        }
    }
}

/// Chunked extraction across the worker pool; row order follows `tiles`.
fn extract_parallel(arch: &Architecture, params: &NetworkParams<f32>, tiles: &[Tile]) -> Result<FeatureMatrix> {
    let parts = tiles
        .par_chunks(256)
        .map(|c| extract_tile_features(arch, params, c))
        .collect::<histotune_core::Result<Vec<_>>>()?;
    let mut ids = Vec::with_capacity(tiles.len());
    let mut values = Vec::with_capacity(tiles.len() * arch.feature_dim());
    for p in parts {
        ids.extend_from_slice(p.ids());
        values.extend_from_slice(p.values());
    }
    Ok(FeatureMatrix::new(ids, arch.feature_dim(), values)?)
}

fn label_of(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("features").to_string()
}

/// Runs one experiment on two feature files and writes its report directory.
pub fn experiment(
    cfg: &PipelineConfig,
    kind: ExperimentKind,
    features_a: &Path,
    features_b: &Path,
    targets: Option<&Path>,
) -> Result<CvReport> {
    require_exists("features_a", features_a)?;
    require_exists("features_b", features_b)?;
    let a = FeatureMatrix::load(features_a)?;
    let b = FeatureMatrix::load(features_b)?;
    let mut labels = [label_of(features_a), label_of(features_b)];
    if labels[0] == labels[1] {
        labels = [format!("{}_a", labels[0]), format!("{}_b", labels[1])];
    }
    let report = match kind {
        ExperimentKind::Tissue => experiment::run_tissue(cfg, [&a, &b], labels)?,
        ExperimentKind::Expression | ExperimentKind::Mutation => {
            let path = match (targets, kind) {
                (Some(p), _) => p.to_path_buf(),
                (None, ExperimentKind::Expression) => cfg.expression_path(),
                _ => cfg.mutation_path(),
            };
            require_exists("targets", &path)?;
            let table = TargetTable::load(&path)?;
            if kind == ExperimentKind::Expression {
                experiment::run_expression(cfg, [&a, &b], &table, labels)?
            } else {
                experiment::run_mutation(cfg, [&a, &b], &table, labels)?
            }
        }
    };
    let dir = cfg.reports_dir().join(kind.name());
    report::write_report(&report, &dir)?;
    info!("wrote report to {}", dir.display());
    Ok(report)
}

/// Regenerates tables and figures from a saved `report.json`.
pub fn regenerate_report(report_json: &Path, out_dir: Option<&Path>) -> Result<Vec<PathBuf>> {
    require_exists("report", report_json)?;
    let report = report::read_report(report_json)?;
    let dir = out_dir.map(Path::to_path_buf).unwrap_or_else(|| report_json.parent().unwrap_or(Path::new(".")).to_path_buf());
    report::write_report(&report, &dir)
}

/// Paths produced by [`run_all`].
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub tissue: CvReport,
    pub expression: Option<CvReport>,
    pub mutation: Option<CvReport>,
}

/// Synthetic data through every experiment, in order.
pub fn run_all(cfg: &PipelineConfig, which: &[ExperimentKind]) -> Result<RunOutputs> {
    gen_synthetic(cfg)?;
    pretrain(cfg)?;
    finetune(cfg, None)?;
    let pre = cfg.pretrained_path();
    let ft = cfg.finetuned_path();
    let test = ExtractInput::Dataset(cfg.target_test_dir());
    let ta = extract(cfg, &pre, &test, "pretrained_tiles")?.tiles;
    let tb = extract(cfg, &ft, &test, "finetuned_tiles")?.tiles;
    let tissue = experiment(cfg, ExperimentKind::Tissue, &ta, &tb, None)?;
    let mut out = RunOutputs { tissue, expression: None, mutation: None };
    if which.iter().any(|k| *k != ExperimentKind::Tissue) {
        let manifest = ExtractInput::Manifest(cfg.manifest_path());
        let pa = extract(cfg, &pre, &manifest, "pretrained_patients")?.patients.expect("manifest input");
        let pb = extract(cfg, &ft, &manifest, "finetuned_patients")?.patients.expect("manifest input");
        if which.contains(&ExperimentKind::Expression) {
            out.expression = Some(experiment(cfg, ExperimentKind::Expression, &pa, &pb, None)?);
        }
        if which.contains(&ExperimentKind::Mutation) {
            out.mutation = Some(experiment(cfg, ExperimentKind::Mutation, &pa, &pb, None)?);
        }
    }
    Ok(out)
}
