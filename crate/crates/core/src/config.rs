//! Experiment configuration: one TOML file with `[system]`, `[controller]`
//! and `[train]` tables. Every key is required and unknown keys are
//! rejected, so a typo fails loudly instead of silently using a default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// dBm to milliwatts.
pub fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    /// Metamaterial elements per RIMSA along x and y.
    pub n_ex: usize,
    pub n_ey: usize,
    /// RF chains (RIMSAs) along x and y.
    pub n_rx: usize,
    pub n_ry: usize,
    pub k_users: usize,
    /// Carrier wavelength in meters.
    pub wavelength: f64,
    /// Inter-element spacing in meters.
    pub element_spacing: f64,
    pub bs_position: [f64; 3],
    pub user_region: Region,
    /// LoS to NLoS power ratio.
    pub rician_k: f64,
    pub pathloss_ref: f64,
    pub pathloss_exp: f64,
    pub p_pilot_dbm: f64,
    pub p_data_dbm: f64,
    pub noise_ul_dbm: f64,
    pub noise_dl_dbm: f64,
    pub pilot_len: usize,
}

impl SystemConfig {
    /// Total elements.
    pub fn n_t(&self) -> usize {
        self.n_e() * self.n_r()
    }
    /// RF chains.
    pub fn n_r(&self) -> usize {
        self.n_rx * self.n_ry
    }
    /// Elements per RF chain.
    pub fn n_e(&self) -> usize {
        self.n_ex * self.n_ey
    }
    /// Aperture width in elements.
    pub fn n_x(&self) -> usize {
        self.n_ex * self.n_rx
    }
    pub fn n_y(&self) -> usize {
        self.n_ey * self.n_ry
    }
    pub fn p_pilot_mw(&self) -> f64 {
        dbm_to_mw(self.p_pilot_dbm)
    }
    pub fn p_data_mw(&self) -> f64 {
        dbm_to_mw(self.p_data_dbm)
    }
    pub fn noise_ul_mw(&self) -> f64 {
        dbm_to_mw(self.noise_ul_dbm)
    }
    pub fn noise_dl_mw(&self) -> f64 {
        dbm_to_mw(self.noise_dl_dbm)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.n_ex == 0 || self.n_ey == 0 || self.n_rx == 0 || self.n_ry == 0 {
            return bad("array dimensions must be positive".into());
        }
        if self.k_users == 0 {
            return bad("k_users must be positive".into());
        }
        if !(self.wavelength > 0.0) || !(self.element_spacing > 0.0) {
            return bad("wavelength and element_spacing must be positive".into());
        }
        if !(self.pathloss_exp > 0.0) || !(self.pathloss_ref > 0.0) {
            return bad("pathloss_ref and pathloss_exp must be positive".into());
        }
        if !(self.rician_k >= 0.0) {
            return bad("rician_k must be non-negative".into());
        }
        if self.pilot_len < self.k_users {
            return bad(format!(
                "pilot_len {} is shorter than k_users {}",
                self.pilot_len, self.k_users
            ));
        }
        let r = &self.user_region;
        if !(r.x_min <= r.x_max) || !(r.y_min <= r.y_max) || !r.z.is_finite() {
            return bad("user_region bounds are inverted or not finite".into());
        }
        Ok(())
    }
}

/// How decoder tokens are reduced to one embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Last,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    /// Backbone embedding width.
    pub n_p: usize,
    /// Decoder layers.
    pub n_layers: usize,
    /// Decoder attention heads.
    pub heads: usize,
    /// Heads of the spatio-temporal attention block; must divide `2·N_R`.
    pub st_heads: usize,
    pub ffn_expansion: usize,
    /// Longest token sequence accepted by the positional table.
    pub max_seq: usize,
    pub residual_stages: usize,
    pub freeze_backbone: bool,
    pub pooling: Pooling,
}

impl ControllerConfig {
    pub fn validate(&self, sys: &SystemConfig) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.n_p == 0 || self.heads == 0 || self.n_p % self.heads != 0 {
            return bad(format!(
                "n_p {} not divisible by heads {}",
                self.n_p, self.heads
            ));
        }
        if self.st_heads == 0 || (2 * sys.n_r()) % self.st_heads != 0 {
            return bad(format!(
                "st_heads {} does not divide 2*N_R = {}",
                self.st_heads,
                2 * sys.n_r()
            ));
        }
        if self.n_layers == 0 {
            return bad("n_layers must be at least 1".into());
        }
        if self.ffn_expansion == 0 {
            return bad("ffn_expansion must be positive".into());
        }
        if self.residual_stages != 4 {
            return bad(format!(
                "residual_stages must be 4, got {}",
                self.residual_stages
            ));
        }
        if sys.pilot_len < 2 {
            return bad("pilot_len must be at least 2 for pooling".into());
        }
        if sys.pilot_len / 2 > self.max_seq {
            return bad(format!(
                "{} pooled pilot steps exceed max_seq {}",
                sys.pilot_len / 2,
                self.max_seq
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Utility {
    Sum,
    Maxmin,
}

impl std::str::FromStr for Utility {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sum" => Ok(Utility::Sum),
            "maxmin" => Ok(Utility::Maxmin),
            other => Err(format!(
                "unknown utility `{other}` (expected sum or maxmin)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub betas: [f64; 2],
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub accum_steps: usize,
    pub batch_size: usize,
    pub early_stop_patience: usize,
    pub lambda_pre: f64,
    pub lambda_rate_max: f64,
    pub warmup_fraction: f64,
    pub utility: Utility,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(m.to_string()));
        if !(self.lr_min < self.lr_max) || !(self.lr_min >= 0.0) {
            return bad("need 0 <= lr_min < lr_max");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be at least 1");
        }
        if self.accum_steps == 0 {
            return bad("accum_steps must be at least 1");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 (batch norm)");
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction <= 1.0) {
            return bad("warmup_fraction must lie in (0, 1]");
        }
        let [b1, b2] = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad("betas must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub system: SystemConfig,
    pub controller: ControllerConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Config> {
        let cfg: Config = toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        self.controller.validate(&self.system)?;
        self.train.validate()
    }

    /// Desk-scale defaults: a 16×8 element aperture split into 4×2 RF
    /// chains, two users, full-size power and noise levels.
    pub fn desk() -> Config {
        let wavelength = 0.01;
        Config {
            system: SystemConfig {
                n_ex: 4,
                n_ey: 4,
                n_rx: 4,
                n_ry: 2,
                k_users: 2,
                wavelength,
                element_spacing: wavelength / 2.0,
                bs_position: [0.0, 0.0, 20.0],
                user_region: Region {
                    x_min: 20.0,
                    x_max: 30.0,
                    y_min: 20.0,
                    y_max: 30.0,
                    z: 1.5,
                },
                rician_k: 10.0,
                pathloss_ref: 1e-4,
                pathloss_exp: 2.2,
                p_pilot_dbm: 15.0,
                p_data_dbm: 20.0,
                noise_ul_dbm: -100.0,
                noise_dl_dbm: -80.0,
                pilot_len: 30,
            },
            controller: ControllerConfig {
                n_p: 64,
                n_layers: 2,
                heads: 4,
                st_heads: 8,
                ffn_expansion: 4,
                max_seq: 64,
                residual_stages: 4,
                freeze_backbone: true,
                pooling: Pooling::Mean,
            },
            train: TrainConfig {
                epochs: 500,
                lr_max: 3e-4,
                lr_min: 1e-5,
                betas: [0.9, 0.999],
                weight_decay: 1e-6,
                grad_clip: 1.0,
                accum_steps: 4,
                batch_size: 32,
                early_stop_patience: 20,
                lambda_pre: 0.1,
                lambda_rate_max: 1.0,
                warmup_fraction: 0.5,
                utility: Utility::Sum,
            },
        }
    }

    /// Full-size geometry: 1024 elements on a 32×32 aperture, 16×8 RF
    /// chains, three users, GPT-2 small backbone width.
    pub fn full() -> Config {
        let mut cfg = Config::desk();
        cfg.system.n_ex = 2;
        cfg.system.n_ey = 4;
        cfg.system.n_rx = 16;
        cfg.system.n_ry = 8;
        cfg.system.k_users = 3;
        cfg.controller.n_p = 768;
        cfg.controller.n_layers = 6;
        cfg.controller.heads = 12;
        cfg.controller.max_seq = 1024;
        cfg
    }
}
