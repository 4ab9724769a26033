//! Declarative run configuration: one flat TOML document, every field with a
//! recorded default, unknown keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adam::AdamConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    // Model extents.
    pub d: usize,
    pub heads: usize,
    pub f_hidden: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub n_kg: usize,
    pub n_b: usize,
    pub image_size: usize,
    pub t_max: usize,

    // Ablation switches.
    pub shared_f: bool,
    pub use_bank: bool,

    // Optimization.
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,

    // Stage budgets.
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub finetune_steps: usize,
    /// Stage-2 denoising: Gaussian noise added to the report knowledge,
    /// as a fraction of its standard deviation.
    pub stage2_noise: f64,

    pub seed: u64,
    /// Paired-data ratio in [0, 1]; 0 means fully unsupervised.
    pub ratio: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            d: 32,
            heads: 4,
            f_hidden: 128,
            enc_layers: 2,
            dec_layers: 3,
            n_kg: 26,
            n_b: 64,
            image_size: 56,
            t_max: 96,
            shared_f: true,
            use_bank: true,
            batch_size: 16,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: 1.0,
            stage1_steps: 600,
            stage2_steps: 2000,
            finetune_steps: 600,
            stage2_noise: 0.25,
            seed: 0,
            ratio: 0.0,
        }
    }
}

impl Config {
    /// Patch-grid side length of the conv stack output.
    pub fn patch_grid(&self) -> usize {
        self.image_size / 8
    }

    /// N_I = N_R: rows of the image and report embeddings.
    pub fn n_slots(&self) -> usize {
        self.patch_grid() * self.patch_grid()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("heads", self.heads),
            ("f_hidden", self.f_hidden),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("n_kg", self.n_kg),
            ("n_b", self.n_b),
            ("image_size", self.image_size),
            ("t_max", self.t_max),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{name}` must be positive")));
            }
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "`heads` ({}) must divide `d` ({})",
                self.heads, self.d
            )));
        }
        if self.image_size % 8 != 0 {
            return Err(Error::Config(format!(
                "`image_size` ({}) must be a multiple of 8 (three stride-2 convolutions)",
                self.image_size
            )));
        }
        if self.stage2_noise < 0.0 {
            return Err(Error::Config(format!(
                "`stage2_noise` ({}) must be non-negative",
                self.stage2_noise
            )));
        }
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::Config(format!(
                "`ratio` ({}) must lie in [0, 1]",
                self.ratio
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.to_string_lossy(), e))?;
        let cfg: Config =
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path.to_string_lossy(), e))
    }
}
