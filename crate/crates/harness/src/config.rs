use std::path::{Path, PathBuf};

use ddt_core::backbone::FeatureExtractionConfig;
use ddt_core::datasets::{DomainPairSpec, ShiftDescriptor, ShiftPreset};
use ddt_core::detector::DetectorConfig;
use ddt_core::diffusion::{DenoiserArch, PretrainConfig};
use ddt_core::self_training::SelfTrainingConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const OUTPUT_ROOT_ENV: &str = "DDT_OUTPUT_ROOT";
pub const THREADS_ENV: &str = "DDT_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory holding `source_train.json`, `source_val.json`,
    /// `target_train.json` and `target_val.json`. Generated from `spec`
    /// into `<output_dir>/data` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub spec: DomainPairSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { dir: None, spec: DomainPairSpec::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    /// Pretrained denoiser; trained into `<output_dir>/denoiser.json` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub beta_start: f64,
    pub beta_end: f64,
    pub pretrain: PretrainConfig,
    pub pretrain_seed: u64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig { checkpoint: None, beta_start: 1e-4, beta_end: 0.02, pretrain: PretrainConfig::default(), pretrain_seed: 0 }
    }
}

/// Optimization settings of the diffusion teacher's source-only run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherTrainingConfig {
    /// Trained diffusion teacher to reuse instead of training one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub total_steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for TeacherTrainingConfig {
    fn default() -> Self {
        TeacherTrainingConfig { checkpoint: None, total_steps: 20000, batch_size: 16, base_lr: 0.02, warmup_steps: 500, seed: 0 }
    }
}

impl TeacherTrainingConfig {
    pub fn apply(&self, base: &SelfTrainingConfig) -> SelfTrainingConfig {
        SelfTrainingConfig {
            total_steps: self.total_steps,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            warmup_steps: self.warmup_steps,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seed of the student runs (initialization and batch sampling).
    pub seed: u64,
    /// Relative paths are resolved against `$DDT_OUTPUT_ROOT` when set.
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub diffusion: DiffusionConfig,
    pub features: FeatureExtractionConfig,
    pub detector: DetectorConfig,
    pub teacher_training: TeacherTrainingConfig,
    pub self_training: SelfTrainingConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            diffusion: DiffusionConfig::default(),
            features: FeatureExtractionConfig::default(),
            detector: DetectorConfig::default(),
            teacher_training: TeacherTrainingConfig::default(),
            self_training: SelfTrainingConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Small setting that trains on one CPU core in minutes.
    pub fn desk(preset: ShiftPreset) -> Self {
        let side = 48;
        let steps = 1000;
        ExperimentConfig {
            seed: 0,
            output_dir: PathBuf::from(format!("runs/desk-{}", preset.name())),
            data: DataConfig {
                dir: None,
                spec: DomainPairSpec {
                    train_images: 256,
                    val_images: 64,
                    image_side: side,
                    objects_per_image: [1, 4],
                    object_scale: [0.2, 0.4],
                    shift: ShiftDescriptor::preset(preset),
                    seed: 11,
                    ..Default::default()
                },
            },
            diffusion: DiffusionConfig {
                pretrain: PretrainConfig {
                    arch: DenoiserArch { stage_channels: [8, 16, 32, 64], image_side: side, time_embed_dim: 32, t_max: 1000 },
                    steps: 2000,
                    batch_size: 8,
                    lr: 2e-3,
                    grad_clip: 1.0,
                },
                ..Default::default()
            },
            features: FeatureExtractionConfig::default(),
            detector: DetectorConfig {
                image_side: side,
                pyramid_widths: [16, 32, 64, 128],
                neck_width: 32,
                roi_hidden: 128,
                roi_canonical_size: 8.0,
                bottleneck_rank_divisor: 1,
                ..Default::default()
            },
            teacher_training: TeacherTrainingConfig { checkpoint: None, total_steps: 3 * steps, batch_size: 4, base_lr: 0.02, warmup_steps: 150, seed: 0 },
            self_training: SelfTrainingConfig {
                total_steps: steps,
                batch_size: 4,
                warmup_steps: 50,
                ema_alpha: 0.99,
                ..Default::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.spec.validate()?;
        self.detector.validate()?;
        self.features.validate(1000)?;
        self.self_training.validate()?;
        let pre = &self.diffusion.pretrain;
        if self.diffusion.checkpoint.is_none() && pre.arch.image_side != self.detector.image_side {
            return Err(HarnessError::Config(format!(
                "diffusion.pretrain.arch.image_side = {} but detector.image_side = {}",
                pre.arch.image_side, self.detector.image_side
            )));
        }
        if self.data.dir.is_none() && self.data.spec.image_side != self.detector.image_side {
            return Err(HarnessError::Config(format!(
                "data.spec.image_side = {} but detector.image_side = {}",
                self.data.spec.image_side, self.detector.image_side
            )));
        }
        if self.detector.num_classes != self.data.spec.categories.len() && self.data.dir.is_none() {
            return Err(HarnessError::Config("detector.num_classes differs from data.spec.categories".into()));
        }
        Ok(())
    }

    /// Output directory after applying `$DDT_OUTPUT_ROOT`.
    pub fn resolved_output_dir(&self) -> PathBuf {
        resolve_output(&self.output_dir)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = load_toml(path, &Self::schema())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| HarnessError::Toml { file: "<resolved config>".into(), message: e.to_string() })
    }

    /// Every accepted key, with optional ones filled in.
    fn schema() -> toml::Value {
        let mut full = ExperimentConfig::default();
        full.data.dir = Some(PathBuf::new());
        full.diffusion.checkpoint = Some(PathBuf::new());
        full.teacher_training.checkpoint = Some(PathBuf::new());
        full.self_training.grad_clip = Some(0.0);
        toml::Value::try_from(full).expect("config serializes")
    }
}

pub fn resolve_output(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

/// Applies `$DDT_THREADS` to the global worker pool, once.
pub fn init_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

/// Dotted paths of keys in `user` that `schema` does not have.
pub fn unknown_keys(user: &toml::Value, schema: &toml::Value) -> Vec<String> {
    fn walk(user: &toml::Value, schema: &toml::Value, prefix: &str, out: &mut Vec<String>) {
        if let (Some(u), Some(s)) = (user.as_table(), schema.as_table()) {
            for (k, v) in u {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match s.get(k) {
                    Some(sv) => walk(v, sv, &path, out),
                    None => out.push(path),
                }
            }
        }
    }
    let mut out = Vec::new();
    walk(user, schema, "", &mut out);
    out
}

/// Parses a TOML file, first rejecting every key absent from `schema`.
pub fn load_toml<T: DeserializeOwned>(path: &Path, schema: &toml::Value) -> Result<T> {
    let file = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let value: toml::Value = text.parse().map_err(|e: toml::de::Error| HarnessError::Toml { file: file.clone(), message: e.to_string() })?;
    let unknown = unknown_keys(&value, schema);
    if !unknown.is_empty() {
        return Err(HarnessError::UnknownKeys { file, keys: unknown });
    }
    toml::from_str(&text).map_err(|e| HarnessError::Toml { file, message: e.to_string() })
}

pub fn load_spec(path: &Path) -> Result<DomainPairSpec> {
    let schema = toml::Value::try_from(DomainPairSpec::default()).expect("spec serializes");
    let spec: DomainPairSpec = load_toml(path, &schema)?;
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::desk(ShiftPreset::ArtisticLike);
        let text = cfg.to_toml().unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn lists_every_unknown_key() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 3\nbogus = 1\n[self_training]\nsigma = 0.4\nsgima = 0.2\n[detector]\nwidth = 2\n").unwrap();
        match ExperimentConfig::load(&p) {
            Err(HarnessError::UnknownKeys { keys, .. }) => {
                assert_eq!(keys, vec!["bogus", "detector.width", "self_training.sgima"]);
            }
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, "seed = 3\n[self_training]\nsigma = 0.4\ngrad_clip = 5.0\n[data]\ndir = \"x\"\n").unwrap();
        let cfg = ExperimentConfig::load(&p).unwrap();
        assert_eq!((cfg.seed, cfg.self_training.sigma, cfg.self_training.grad_clip), (3, 0.4, Some(5.0)));
    }
}
