//! Pipeline configuration: one TOML file of dotted keys, every section optional.

use std::path::{Path, PathBuf};

use histotune_core::downstream::LassoFamily;
use histotune_core::finetune::FineTuneConfig;
use histotune_core::nn::NetConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::synth::SyntheticSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker threads; 0 lets the pool pick.
    pub threads: usize,
    pub out: PathBuf,
    pub paths: PathsConfig,
    pub synthetic: SyntheticSpec,
    pub network: NetworkConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub tiling: TilingConfig,
    pub stain: StainConfig,
    pub svc: SvcConfig,
    pub svr: SvrConfig,
    pub lasso: LassoConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            out: PathBuf::from("out"),
            paths: PathsConfig::default(),
            synthetic: SyntheticSpec::default(),
            network: NetworkConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            tiling: TilingConfig::default(),
            stain: StainConfig::default(),
            svc: SvcConfig::default(),
            svr: SvrConfig::default(),
            lasso: LassoConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Explicit locations; anything unset falls back to the layout under `out`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub source: Option<PathBuf>,
    pub target_train: Option<PathBuf>,
    pub target_test: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub expression: Option<PathBuf>,
    pub mutation: Option<PathBuf>,
    pub pretrained: Option<PathBuf>,
    pub finetuned: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub reports: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_size: usize,
    pub stem_channels: usize,
    pub block_channels: [usize; 2],
    /// Width of the Part B dense layer, i.e. the extracted feature dimension.
    pub feature_dim: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { input_size: 32, stem_channels: 16, block_channels: [32, 64], feature_dim: 64 }
    }
}

impl NetworkConfig {
    pub fn net_config(&self, n_classes: usize) -> NetConfig {
        NetConfig {
            input_size: self.input_size,
            stem_channels: self.stem_channels,
            block_channels: self.block_channels,
            feature_dim: self.feature_dim,
            n_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { lr: 1e-3, epochs: 15, batch_size: 32 }
    }
}

/// Two-step schedule. Learning rates and epochs follow the reference protocol;
/// the batch is smaller so that a desk-scale dataset still sees enough steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub lr_step1: f64,
    pub epochs_step1: usize,
    pub lr_step2: f64,
    pub epochs_step2: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { batch_size: 16, ..FinetuneConfig::from(&FineTuneConfig::default()) }
    }
}

impl From<&FineTuneConfig> for FinetuneConfig {
    fn from(c: &FineTuneConfig) -> Self {
        Self {
            lr_step1: c.lr_step1,
            epochs_step1: c.epochs_step1,
            lr_step2: c.lr_step2,
            epochs_step2: c.epochs_step2,
            batch_size: c.batch_size,
            seed: c.seed,
        }
    }
}

impl FinetuneConfig {
    pub fn to_core(&self) -> FineTuneConfig {
        FineTuneConfig {
            lr_step1: self.lr_step1,
            epochs_step1: self.epochs_step1,
            lr_step2: self.lr_step2,
            epochs_step2: self.epochs_step2,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TilingConfig {
    pub target_mpp: f64,
    pub tile_size: u32,
    pub stride: u32,
    pub white_threshold: u8,
    pub max_white_fraction: f64,
}

impl Default for TilingConfig {
    fn default() -> Self {
        Self { target_mpp: 0.25, tile_size: 32, stride: 32, white_threshold: 220, max_white_fraction: 0.5 }
    }
}

/// Where slide normalization is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    /// Once per slide before tiling.
    Slide,
    /// Per tile after tiling.
    Tile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StainConfig {
    /// Normalize slides listed in a patient manifest.
    pub normalize_slides: bool,
    pub scope: NormScope,
    /// Normalize target-domain class-folder tiles. Source tiles are never normalized.
    pub normalize_tiles: bool,
    pub alpha: f64,
    pub beta: f64,
    pub io: f64,
}

impl Default for StainConfig {
    fn default() -> Self {
        Self { normalize_slides: true, scope: NormScope::Slide, normalize_tiles: false, alpha: 1.0, beta: 0.15, io: 255.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvcConfig {
    pub c: f64,
    pub tol: f64,
    pub max_passes: usize,
}

impl Default for SvcConfig {
    fn default() -> Self {
        Self { c: 1.0, tol: 1e-4, max_passes: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvrConfig {
    pub c: f64,
    pub epsilon: f64,
    pub passes: usize,
}

impl Default for SvrConfig {
    fn default() -> Self {
        Self { c: 1.0, epsilon: 0.1, passes: 5000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LassoConfig {
    pub family: LassoFamily,
    pub n_lambda: usize,
    pub lambda_min_ratio: f64,
    pub inner_folds: usize,
    /// Coordinate-descent stop: largest scaled weight change per pass.
    pub tol: f64,
    pub max_passes: usize,
}

impl Default for LassoConfig {
    fn default() -> Self {
        Self { family: LassoFamily::Logistic, n_lambda: 30, lambda_min_ratio: 5e-2, inner_folds: 5, tol: 1e-4, max_passes: 10_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairedTestKind {
    Wilcoxon,
    PairedT,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    pub repeats: usize,
    pub alpha: f64,
    /// Test whose p-value is used for the headline comparison; both are always reported.
    pub test: PairedTestKind,
    /// Number of genes drawn in the observed-versus-predicted scatter figure.
    pub scatter_genes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k: 5, repeats: 50, alpha: 0.05, test: PairedTestKind::Wilcoxon, scatter_genes: 4 }
    }
}

impl PipelineConfig {
    /// Parses a config file; unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let field = e.span().map(|s| locate_key(text, s.start)).unwrap_or_default();
            CliError::config(if field.is_empty() { "<file>".to_string() } else { field }, e.message().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Applies `dotted.key=value` overrides. Values parse as TOML, falling back to a bare string.
    pub fn with_overrides(&self, sets: &[String]) -> Result<Self> {
        if sets.is_empty() {
            return Ok(self.clone());
        }
        let mut root = match toml::Value::try_from(self) {
            Ok(toml::Value::Table(t)) => t,
            _ => return Err(CliError::config("<config>", "cannot represent the configuration as a table")),
        };
        for set in sets {
            let (key, raw) = set.split_once('=').ok_or_else(|| CliError::config(set.as_str(), "expected key=value"))?;
            let (key, raw) = (key.trim(), raw.trim());
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let parts: Vec<&str> = key.split('.').collect();
            let (last, parents) = parts.split_last().expect("split yields at least one part");
            let mut table = &mut root;
            for p in parents {
                table = table
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| CliError::config(key, "is not a table"))?;
            }
            table.insert(last.to_string(), value);
        }
        let text = toml::to_string(&root).map_err(|e| CliError::config("<config>", e.to_string()))?;
        Self::from_toml(&text)
    }

    /// Checks every numeric precondition, reporting the first offending field path.
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, msg: &str| if ok { Ok(()) } else { Err(CliError::config(field, msg)) };
        let s = &self.synthetic;
        check(s.n_classes >= 2, "synthetic.n_classes", "must be at least 2")?;
        check(s.n_classes <= 9, "synthetic.n_classes", "at most 9 tissue classes are defined")?;
        check(s.tiles_per_class >= 1, "synthetic.tiles_per_class", "must be at least 1")?;
        check(s.test_tiles_per_class >= 1, "synthetic.test_tiles_per_class", "must be at least 1")?;
        check(s.source_tiles_per_class >= 1, "synthetic.source_tiles_per_class", "must be at least 1")?;
        check(s.tile_size >= 8, "synthetic.tile_size", "must be at least 8")?;
        check(s.n_patients >= 2, "synthetic.n_patients", "must be at least 2")?;
        check(s.tiles_per_patient >= 1, "synthetic.tiles_per_patient", "must be at least 1")?;
        check((0.0..=1.0).contains(&s.pure_patient_fraction), "synthetic.pure_patient_fraction", "must lie in [0, 1]")?;
        check(s.expression_noise >= 0.0, "synthetic.expression_noise", "must be non-negative")?;
        check(s.texture_freq_shift > -1.0, "synthetic.texture_freq_shift", "must exceed -1")?;
        check((0.0..=1.0).contains(&s.source_texture_mixing), "synthetic.source_texture_mixing", "must lie in [0, 1]")?;

        let n = &self.network;
        check(n.input_size >= 4, "network.input_size", "must be at least 4")?;
        check(n.stem_channels >= 1, "network.stem_channels", "must be at least 1")?;
        check(n.block_channels.iter().all(|&c| c >= 1), "network.block_channels", "entries must be at least 1")?;
        check(n.feature_dim >= 1, "network.feature_dim", "must be at least 1")?;

        let p = &self.pretrain;
        check(p.lr > 0.0, "pretrain.lr", "must be positive")?;
        check(p.batch_size >= 1, "pretrain.batch_size", "must be at least 1")?;

        let f = &self.finetune;
        check(f.lr_step1 > 0.0, "finetune.lr_step1", "must be positive")?;
        check(f.lr_step2 > 0.0, "finetune.lr_step2", "must be positive")?;
        check(f.batch_size >= 1, "finetune.batch_size", "must be at least 1")?;

        let t = &self.tiling;
        check(t.target_mpp > 0.0, "tiling.target_mpp", "must be positive")?;
        check(t.tile_size as usize == n.input_size, "tiling.tile_size", "must equal network.input_size")?;
        check(t.stride >= 1, "tiling.stride", "must be at least 1")?;
        check((0.0..=1.0).contains(&t.max_white_fraction), "tiling.max_white_fraction", "must lie in [0, 1]")?;
        check(s.tile_size == t.tile_size, "synthetic.tile_size", "must equal tiling.tile_size")?;

        let st = &self.stain;
        check(st.alpha > 0.0 && st.alpha < 50.0, "stain.alpha", "must lie in (0, 50)")?;
        check(st.beta > 0.0, "stain.beta", "must be positive")?;
        check(st.io > 0.0, "stain.io", "must be positive")?;

        check(self.svc.c > 0.0, "svc.c", "must be positive")?;
        check(self.svc.tol > 0.0, "svc.tol", "must be positive")?;
        check(self.svc.max_passes >= 1, "svc.max_passes", "must be at least 1")?;
        check(self.svr.c > 0.0, "svr.c", "must be positive")?;
        check(self.svr.epsilon >= 0.0, "svr.epsilon", "must be non-negative")?;
        check(self.svr.passes >= 1, "svr.passes", "must be at least 1")?;
        check(self.lasso.n_lambda >= 1, "lasso.n_lambda", "must be at least 1")?;
        check(
            self.lasso.lambda_min_ratio > 0.0 && self.lasso.lambda_min_ratio < 1.0,
            "lasso.lambda_min_ratio",
            "must lie in (0, 1)",
        )?;
        check(self.lasso.inner_folds >= 2, "lasso.inner_folds", "must be at least 2")?;
        check(self.lasso.tol > 0.0, "lasso.tol", "must be positive")?;
        check(self.lasso.max_passes >= 1, "lasso.max_passes", "must be at least 1")?;

        let e = &self.eval;
        check(e.k >= 2, "eval.k", "must be at least 2")?;
        check(e.repeats >= 1, "eval.repeats", "must be at least 1")?;
        check(e.alpha > 0.0 && e.alpha < 1.0, "eval.alpha", "must lie in (0, 1)")?;
        Ok(())
    }

    pub fn synthetic_dir(&self) -> PathBuf {
        self.out.join("synthetic")
    }

    pub fn source_dir(&self) -> PathBuf {
        self.paths.source.clone().unwrap_or_else(|| self.synthetic_dir().join("source"))
    }

    pub fn target_train_dir(&self) -> PathBuf {
        self.paths.target_train.clone().unwrap_or_else(|| self.synthetic_dir().join("target_train"))
    }

    pub fn target_test_dir(&self) -> PathBuf {
        self.paths.target_test.clone().unwrap_or_else(|| self.synthetic_dir().join("target_test"))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.paths.manifest.clone().unwrap_or_else(|| self.synthetic_dir().join("manifest.csv"))
    }

    pub fn expression_path(&self) -> PathBuf {
        self.paths.expression.clone().unwrap_or_else(|| self.synthetic_dir().join("expression.csv"))
    }

    pub fn mutation_path(&self) -> PathBuf {
        self.paths.mutation.clone().unwrap_or_else(|| self.synthetic_dir().join("mutation.csv"))
    }

    pub fn pretrained_path(&self) -> PathBuf {
        self.paths.pretrained.clone().unwrap_or_else(|| self.out.join("checkpoints").join("pretrained.hfnn"))
    }

    pub fn finetuned_path(&self) -> PathBuf {
        self.paths.finetuned.clone().unwrap_or_else(|| self.out.join("checkpoints").join("finetuned.hfnn"))
    }

    pub fn features_dir(&self) -> PathBuf {
        self.paths.features.clone().unwrap_or_else(|| self.out.join("features"))
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.paths.reports.clone().unwrap_or_else(|| self.out.join("reports"))
    }
}

/// Dotted key path of the table entry enclosing byte offset `pos`.
fn locate_key(text: &str, pos: usize) -> String {
    let mut section = String::new();
    let mut key = String::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if trimmed.starts_with('[') {
            section = trimmed.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            key.clear();
        } else if let Some((k, _)) = trimmed.split_once('=') {
            key = k.trim().to_string();
        }
        offset += line.len();
        if offset > pos {
            break;
        }
    }
    match (section.is_empty(), key.is_empty()) {
        (true, _) => key,
        (false, true) => section,
        (false, false) => format!("{section}.{key}"),
    }
}

/// Fails with the field path when an input the command needs is missing.
pub fn require_exists(field: &str, path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::config(field, format!("{} does not exist", path.display())))
    }
}
