//! TOML experiment files. Every section is optional; command-line flags
//! override whatever the file sets.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use facevis::dataset::DatasetConfig;
use facevis::model::{generate_synthetic_model, load_model, MaskKind, ShapeModel, SynthConfig};
use facevis::nn::{BlockConfig, InputVariant, TrainConfig};
use serde::Deserialize;

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Overrides `dataset.seed` and `training.seed` when set.
    pub seed: Option<u64>,
    /// Faces generated for validation on top of `dataset.count`.
    pub validation_count: usize,
    pub model: ModelSection,
    pub dataset: DatasetConfig,
    pub network: NetworkSection,
    pub training: TrainConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: None,
            validation_count: 50,
            model: ModelSection::default(),
            dataset: DatasetConfig::default(),
            network: NetworkSection::default(),
            training: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Model file; relative paths are resolved against the config file.
    pub path: Option<PathBuf>,
    pub seed: u64,
    pub vertices: usize,
    pub id_bases: usize,
    pub exp_bases: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            path: None,
            seed: s.seed,
            vertices: s.vertices,
            id_bases: s.n_id,
            exp_bases: s.n_exp,
        }
    }
}

impl ModelSection {
    pub fn load(&self) -> Result<ShapeModel> {
        match &self.path {
            Some(path) => load_model(path).with_context(|| format!("loading model {}", path.display())),
            None => generate_synthetic_model(&SynthConfig {
                seed: self.seed,
                vertices: self.vertices,
                n_id: self.id_bases,
                n_exp: self.exp_bases,
            })
            .context("invalid [model] section"),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub n_blocks: usize,
    pub vis_size: usize,
    pub variant: InputVariant,
    pub mask: MaskKind,
    /// Filter counts and the hidden width are the full-size values divided
    /// by this.
    pub width_divisor: usize,
    pub hidden: Option<usize>,
    pub dropout: f64,
    pub sigma: f64,
    pub support_radius: usize,
    /// Per-block loss weights; defaults to `1..=n_blocks`.
    pub loss_weights: Option<Vec<f64>>,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            n_blocks: 2,
            vis_size: 32,
            variant: InputVariant::Ifv,
            mask: MaskKind::Nose,
            width_divisor: 4,
            hidden: None,
            dropout: 0.1,
            sigma: 1.0,
            support_radius: 2,
            loss_weights: None,
        }
    }
}

impl NetworkSection {
    pub fn block_config(&self, param_dim: usize) -> Result<BlockConfig> {
        if self.n_blocks == 0 {
            bail!("network.n_blocks must be >= 1");
        }
        if self.width_divisor == 0 {
            bail!("network.width_divisor must be >= 1");
        }
        let mut cfg = BlockConfig::with_width(self.n_blocks, param_dim, self.width_divisor);
        cfg.vis_size = self.vis_size;
        cfg.variant = self.variant;
        cfg.mask = self.mask;
        cfg.dropout = self.dropout;
        cfg.sigma = self.sigma;
        cfg.support_radius = self.support_radius;
        if let Some(h) = self.hidden {
            cfg.fc_sizes[0] = h;
        }
        if let Some(w) = &self.loss_weights {
            if w.len() != self.n_blocks {
                bail!(
                    "network.loss_weights has {} entries, network.n_blocks is {}",
                    w.len(),
                    self.n_blocks
                );
            }
            for (spec, &weight) in cfg.loss_schedule.iter_mut().zip(w) {
                spec.weight = weight;
            }
        }
        cfg.validate(param_dim).context("invalid [network] section")?;
        Ok(cfg)
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Config =
            toml::from_str(&text).with_context(|| format!("in config {}", path.display()))?;
        if let Some(p) = &cfg.model.path {
            if p.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.model.path = Some(base.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Applies the seed to every seeded section.
    pub fn apply_seed(&mut self, cli_seed: Option<u64>) {
        if let Some(s) = cli_seed.or(self.seed) {
            self.seed = Some(s);
            self.dataset.seed = s;
            self.training.seed = s;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate().context("invalid [training] section")?;
        if self.dataset.count == 0 {
            bail!("dataset.count must be >= 1");
        }
        if self.validation_count == 0 {
            bail!("validation_count must be >= 1");
        }
        Ok(())
    }
}
