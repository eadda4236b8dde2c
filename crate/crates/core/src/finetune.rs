//! Two-step fine-tuning (train the head on a frozen backbone, then adapt the
//! backbone under a frozen head), feature extraction and patient pooling.

use std::collections::{BTreeMap, BTreeSet};

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::nn::{adam_step, extract_features, loss_and_grads, Architecture, NetworkParams, OptimizerState, Tensor};
use crate::seed;
use crate::tiling::{LabeledDataset, Tile};

const EXTRACT_BATCH: usize = 64;
const STAGE_PRETRAIN: u64 = 0;
const STAGE_STEP1: u64 = 1;
const STAGE_STEP2: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FineTuneConfig {
    pub lr_step1: f64,
    pub epochs_step1: usize,
    pub lr_step2: f64,
    pub epochs_step2: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self { lr_step1: 4e-4, epochs_step1: 20, lr_step2: 5e-5, epochs_step2: 10, batch_size: 128, seed: 0 }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_step1 > 0.0 && self.lr_step2 > 0.0) {
            return Err(Error::ConfigError("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::ConfigError("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Mean minibatch loss per epoch plus the full-pass loss after training.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
}

/// Stack tiles into a `[N, H, W, 3]` batch scaled to [0, 1].
pub fn tiles_to_batch(tiles: &[&Tile]) -> Result<Tensor<f32>> {
    let first = tiles.first().ok_or_else(|| Error::invalid("empty tile batch"))?;
    let (w, h) = first.pixels.dimensions();
    let mut data = Vec::with_capacity(tiles.len() * (w * h * 3) as usize);
    for t in tiles {
        if t.pixels.dimensions() != (w, h) {
            return Err(Error::shape(format!("tile {} has a different size", t.id())));
        }
        data.extend(t.pixels.as_raw().iter().map(|&v| v as f32 / 255.0));
    }
    Tensor::new(vec![tiles.len(), h as usize, w as usize, 3], data)
}

fn check_dataset(arch: &Architecture, dataset: &LabeledDataset) -> Result<()> {
    if dataset.n_classes() != arch.n_classes() {
        return Err(Error::ConfigError(format!(
            "dataset has {} classes but the classifier has {} outputs",
            dataset.n_classes(),
            arch.n_classes()
        )));
    }
    if let Some(size) = dataset.tile_size() {
        let expect = arch.input_shape().dims();
        if [size as usize, size as usize, 3] != expect[..] {
            return Err(Error::ConfigError(format!("tiles are {size}px but the network expects {expect:?}")));
        }
    }
    Ok(())
}

/// Mean loss over the whole dataset, evaluated in fixed-size batches.
pub fn dataset_loss(arch: &Architecture, params: &NetworkParams<f32>, dataset: &LabeledDataset, batch_size: usize) -> Result<f64> {
    let all: BTreeSet<String> = arch.param_specs().into_iter().map(|(n, _)| n).collect();
    let mut total = 0.0;
    for start in (0..dataset.len()).step_by(batch_size.max(1)) {
        let end = (start + batch_size).min(dataset.len());
        let tiles: Vec<&Tile> = dataset.tiles[start..end].iter().collect();
        let batch = tiles_to_batch(&tiles)?;
        let (loss, _) = loss_and_grads(arch, params, &batch, &dataset.labels[start..end], &all, None)?;
        total += loss as f64 * (end - start) as f64;
    }
    Ok(total / dataset.len().max(1) as f64)
}

/// Fraction of tiles whose arg-max logit equals the label.
pub fn dataset_accuracy(arch: &Architecture, params: &NetworkParams<f32>, dataset: &LabeledDataset) -> Result<f64> {
    let mut correct = 0usize;
    for start in (0..dataset.len()).step_by(EXTRACT_BATCH) {
        let end = (start + EXTRACT_BATCH).min(dataset.len());
        let tiles: Vec<&Tile> = dataset.tiles[start..end].iter().collect();
        let out = crate::nn::forward(arch, params, &tiles_to_batch(&tiles)?, false)?;
        for (i, &label) in dataset.labels[start..end].iter().enumerate() {
            let row = out.logits.row(i);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            correct += (best == label) as usize;
        }
    }
    Ok(correct as f64 / dataset.len().max(1) as f64)
}

/// Minibatch Adam over `epochs` reshuffled passes; parameters in `frozen` are never touched.
#[allow(clippy::too_many_arguments)]
pub fn train(
    arch: &Architecture,
    params: &mut NetworkParams<f32>,
    dataset: &LabeledDataset,
    frozen: &BTreeSet<String>,
    lr: f64,
    epochs: usize,
    batch_size: usize,
    seed: u64,
    stage: u64,
) -> Result<TrainLog> {
    check_dataset(arch, dataset)?;
    if batch_size == 0 {
        return Err(Error::ConfigError("batch_size must be at least 1".into()));
    }
    let mut state = OptimizerState::new(lr);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::rng_from(seed, &[stage, epoch as u64]));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch_size) {
            let tiles: Vec<&Tile> = chunk.iter().map(|&i| &dataset.tiles[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| dataset.labels[i]).collect();
            let batch = tiles_to_batch(&tiles)?;
            let (loss, grads) = loss_and_grads(arch, params, &batch, &labels, frozen, None)?;
            adam_step(params, &grads, &mut state)?;
            epoch_loss += loss as f64 * chunk.len() as f64;
        }
        let mean = epoch_loss / dataset.len().max(1) as f64;
        info!("stage {stage} epoch {} loss {mean:.6}", epoch + 1);
        log.epoch_losses.push(mean);
    }
    log.final_loss = dataset_loss(arch, params, dataset, batch_size)?;
    Ok(log)
}

/// End-to-end training of every parameter (the source-domain pretraining stand-in).
pub fn pretrain(
    arch: &Architecture,
    params: &mut NetworkParams<f32>,
    dataset: &LabeledDataset,
    lr: f64,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<TrainLog> {
    train(arch, params, dataset, &BTreeSet::new(), lr, epochs, batch_size, seed, STAGE_PRETRAIN)
}

/// Step 1: Part A frozen, Part B trained at `lr_step1` for `epochs_step1` epochs.
pub fn finetune_step1(
    arch: &Architecture,
    params: &mut NetworkParams<f32>,
    dataset: &LabeledDataset,
    cfg: &FineTuneConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    train(arch, params, dataset, &arch.part_a_names(), cfg.lr_step1, cfg.epochs_step1, cfg.batch_size, cfg.seed, STAGE_STEP1)
}

/// Step 2: Part B frozen, Part A trained at `lr_step2` for `epochs_step2` epochs.
pub fn finetune_step2(
    arch: &Architecture,
    params: &mut NetworkParams<f32>,
    dataset: &LabeledDataset,
    cfg: &FineTuneConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    train(arch, params, dataset, &arch.part_b_names(), cfg.lr_step2, cfg.epochs_step2, cfg.batch_size, cfg.seed, STAGE_STEP2)
}

/// Penultimate activations, one row per tile, keyed by tile id.
pub fn extract_tile_features(arch: &Architecture, params: &NetworkParams<f32>, tiles: &[Tile]) -> Result<FeatureMatrix> {
    let dim = arch.feature_dim();
    let mut values = Vec::with_capacity(tiles.len() * dim);
    for chunk in tiles.chunks(EXTRACT_BATCH) {
        let refs: Vec<&Tile> = chunk.iter().collect();
        let rows = extract_features(arch, params, &tiles_to_batch(&refs)?)?;
        values.extend_from_slice(rows.data());
    }
    FeatureMatrix::new(tiles.iter().map(Tile::id).collect(), dim, values)
}

/// Average tile rows per patient.
///
/// Tiles are visited in ascending id order and patients are emitted in
/// ascending id order, so the output does not depend on input row order.
pub fn aggregate_patient(features: &FeatureMatrix, tile_to_patient: &BTreeMap<String, String>) -> Result<FeatureMatrix> {
    let dim = features.dim();
    let mut order: Vec<usize> = (0..features.n_rows()).collect();
    order.sort_by(|&a, &b| features.ids()[a].cmp(&features.ids()[b]));
    let mut sums: BTreeMap<&str, (Vec<f64>, usize)> =
        tile_to_patient.values().map(|p| (p.as_str(), (vec![0.0; dim], 0))).collect();
    for i in order {
        let id = &features.ids()[i];
        let patient = tile_to_patient
            .get(id)
            .ok_or_else(|| Error::invalid(format!("tile {id} is not mapped to a patient")))?;
        let (sum, count) = sums.get_mut(patient.as_str()).expect("patients come from the map");
        for (s, &v) in sum.iter_mut().zip(features.row(i)) {
            *s += v as f64;
        }
        *count += 1;
    }
    let mut ids = Vec::with_capacity(sums.len());
    let mut values = Vec::with_capacity(sums.len() * dim);
    for (patient, (sum, count)) in sums {
        if count == 0 {
            return Err(Error::EmptyPatient(patient.to_string()));
        }
        ids.push(patient.to_string());
        values.extend(sum.iter().map(|s| (s / count as f64) as f32));
    }
    FeatureMatrix::new(ids, dim, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetConfig;
    use image::{Rgb, RgbImage};

    fn matrix(rows: &[(&str, [f32; 2])]) -> FeatureMatrix {
        FeatureMatrix::new(
            rows.iter().map(|r| r.0.to_string()).collect(),
            2,
            rows.iter().flat_map(|r| r.1).collect(),
        )
        .unwrap()
    }

    fn map(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(t, p)| (t.to_string(), p.to_string())).collect()
    }

    #[test]
    fn one_tile_per_patient_is_identity() {
        let m = matrix(&[("t1", [1.0, 2.0]), ("t2", [3.0, 4.0])]);
        let out = aggregate_patient(&m, &map(&[("t1", "p1"), ("t2", "p2")])).unwrap();
        assert_eq!(out.ids(), &["p1".to_string(), "p2".to_string()]);
        assert_eq!(out.values(), m.values());
    }

    #[test]
    fn two_tiles_average() {
        let m = matrix(&[("t1", [0.0, 2.0]), ("t2", [2.0, 0.0])]);
        let out = aggregate_patient(&m, &map(&[("t1", "p"), ("t2", "p")])).unwrap();
        assert_eq!(out.values(), &[1.0, 1.0]);
    }

    #[test]
    fn row_order_does_not_matter() {
        let a = matrix(&[("t1", [0.1, 0.7]), ("t2", [0.3, 0.2]), ("t3", [0.9, 0.4])]);
        let b = matrix(&[("t3", [0.9, 0.4]), ("t1", [0.1, 0.7]), ("t2", [0.3, 0.2])]);
        let m = map(&[("t1", "p"), ("t2", "p"), ("t3", "q")]);
        assert_eq!(aggregate_patient(&a, &m).unwrap(), aggregate_patient(&b, &m).unwrap());
    }

    #[test]
    fn patient_without_tiles_is_an_error() {
        let m = matrix(&[("t1", [0.0, 2.0])]);
        let err = aggregate_patient(&m, &map(&[("t1", "p"), ("t9", "q")])).unwrap_err();
        assert!(matches!(err, Error::EmptyPatient(p) if p == "q"));
        assert!(aggregate_patient(&m, &map(&[("t2", "p")])).is_err());
    }

    #[test]
    fn extraction_is_batch_invariant() {
        let arch = Architecture::mini_xception(&NetConfig {
            input_size: 8,
            stem_channels: 4,
            block_channels: [4, 6],
            feature_dim: 5,
            n_classes: 2,
        })
        .unwrap();
        let params = NetworkParams::<f32>::init(&arch, 3);
        let tiles: Vec<Tile> = (0..8)
            .map(|i| {
                Tile::new(
                    RgbImage::from_fn(8, 8, |x, y| Rgb([(x * 30 + i * 7) as u8, (y * 20) as u8, (i * 25) as u8])),
                    format!("t{i}"),
                )
            })
            .collect();
        let all = extract_tile_features(&arch, &params, &tiles).unwrap();
        for (i, t) in tiles.iter().enumerate() {
            let one = extract_tile_features(&arch, &params, std::slice::from_ref(t)).unwrap();
            assert_eq!(one.row(0), all.row(i));
        }
        let twin = Tile::new(tiles[0].pixels.clone(), "twin");
        let dup = extract_tile_features(&arch, &params, &[tiles[0].clone(), twin]).unwrap();
        assert_eq!(dup.row(0), dup.row(1));
    }
}
