use std::fmt::Write as _;
use std::path::Path;

use crate::autoencoder::{AeArch, AeLossConfig, AeLossWeights, AeStepConfig};
use crate::diffnet::AdamW;
use crate::diffusion::{make_schedule, DenoiserConfig, NoiseSchedule};
use crate::error::{Error, Result};

/// Every hyperparameter of a run. Parsed from line-oriented `key = value`
/// text; keys not listed here are rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub image_size: usize,
    pub n_pairs: usize,
    pub window_width: f64,
    pub window_level: f64,

    pub latent_channels: usize,
    pub codebook_size: usize,
    pub normalize_latent: bool,

    pub s1_steps: u64,
    pub s1_batch_size: usize,
    pub s1_lr: f64,
    pub s1_cosine_decay: bool,
    pub s1_weight_decay: f64,
    pub lambda_r: f64,
    pub lambda_q: f64,
    pub lambda_s: f64,
    pub lambda_adv: f64,
    pub gamma: f64,
    pub floor: f64,
    pub beta_commit: f64,
    pub hf_beta: f64,
    pub hf_sigma: f64,
    pub dead_code_steps: u64,

    pub s2_epochs: u64,
    pub s2_steps_per_epoch: u64,
    pub s2_batch_size: usize,
    pub s2_lr: f64,
    pub s2_weight_decay: f64,
    pub t_max: usize,
    pub beta_1: f64,
    pub beta_t: f64,
    pub alpha: f64,
    pub denoiser_width: usize,
    pub denoiser_groups: usize,

    pub t_start: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 64,
            n_pairs: 40,
            window_width: crate::phantom::DEFAULT_WINDOW_WIDTH,
            window_level: crate::phantom::DEFAULT_WINDOW_LEVEL,
            latent_channels: 8,
            codebook_size: 128,
            normalize_latent: true,
            s1_steps: 1000,
            s1_batch_size: 2,
            s1_lr: 1e-4,
            s1_cosine_decay: false,
            s1_weight_decay: 0.0,
            lambda_r: 1.0,
            lambda_q: 1.0,
            lambda_s: 0.1,
            lambda_adv: 0.0,
            gamma: 1.0,
            floor: 1e-7,
            beta_commit: 0.25,
            hf_beta: 1.0,
            hf_sigma: 1.0,
            dead_code_steps: 200,
            s2_epochs: 10,
            s2_steps_per_epoch: 100,
            s2_batch_size: 2,
            s2_lr: 1e-4,
            s2_weight_decay: 0.0,
            t_max: 1000,
            beta_1: 1e-4,
            beta_t: 0.02,
            alpha: 2.0,
            denoiser_width: 16,
            denoiser_groups: 8,
            t_start: 500,
        }
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse::<T>().map_err(|_| format!("cannot parse `{v}`"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

macro_rules! config_keys {
    ($($key:literal => $field:ident : $kind:ident),* $(,)?) => {
        /// Recognised keys in canonical order.
        pub const CONFIG_KEYS: &[&str] = &[$($key),*];

        impl RunConfig {
            fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
                match key {
                    $($key => self.$field = config_keys!(@parse $kind, value)?,)*
                    _ => return Err(format!("unknown key `{key}`")),
                }
                Ok(())
            }

            /// The configuration as parseable text, one key per line.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $(writeln!(s, "{} = {}", $key, config_keys!(@show $kind, self.$field)).expect("write to string");)*
                s
            }
        }
    };
    (@parse bool, $v:expr) => { parse_bool($v) };
    (@parse num, $v:expr) => { parse_num($v) };
    (@show bool, $v:expr) => { $v };
    (@show num, $v:expr) => { format!("{:?}", $v) };
}

config_keys! {
    "seed" => seed: num,
    "image_size" => image_size: num,
    "n_pairs" => n_pairs: num,
    "window_width" => window_width: num,
    "window_level" => window_level: num,
    "ae.latent_channels" => latent_channels: num,
    "ae.codebook_size" => codebook_size: num,
    "ae.normalize_latent" => normalize_latent: bool,
    "stage1.steps" => s1_steps: num,
    "stage1.batch_size" => s1_batch_size: num,
    "stage1.lr" => s1_lr: num,
    "stage1.cosine_decay" => s1_cosine_decay: bool,
    "stage1.weight_decay" => s1_weight_decay: num,
    "stage1.lambda_r" => lambda_r: num,
    "stage1.lambda_q" => lambda_q: num,
    "stage1.lambda_s" => lambda_s: num,
    "stage1.lambda_adv" => lambda_adv: num,
    "stage1.gamma" => gamma: num,
    "stage1.floor" => floor: num,
    "stage1.beta_commit" => beta_commit: num,
    "stage1.hf_beta" => hf_beta: num,
    "stage1.hf_sigma" => hf_sigma: num,
    "stage1.dead_code_steps" => dead_code_steps: num,
    "stage2.epochs" => s2_epochs: num,
    "stage2.steps_per_epoch" => s2_steps_per_epoch: num,
    "stage2.batch_size" => s2_batch_size: num,
    "stage2.lr" => s2_lr: num,
    "stage2.weight_decay" => s2_weight_decay: num,
    "stage2.T" => t_max: num,
    "stage2.beta_1" => beta_1: num,
    "stage2.beta_T" => beta_t: num,
    "stage2.alpha" => alpha: num,
    "stage2.denoiser_width" => denoiser_width: num,
    "stage2.denoiser_groups" => denoiser_groups: num,
    "sampler.t_start" => t_start: num,
}

impl RunConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment;
    /// a key may appear at most once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |reason: String| Error::Config { line: line_no, reason };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            cfg.set(key, value).map_err(|r| err(format!("{key}: {r}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Range checks on every field.
    pub fn validate(&self) -> Result<()> {
        let bad = |arg: &'static str, reason: String| Err(Error::invalid(arg, reason));
        if self.image_size < 32 || self.image_size % 16 != 0 {
            return bad("image_size", format!("must be a multiple of 16 and >= 32, got {}", self.image_size));
        }
        if self.n_pairs < 10 {
            return bad("n_pairs", format!("must be >= 10, got {}", self.n_pairs));
        }
        if !(self.window_width > 0.0 && self.window_width.is_finite() && self.window_level.is_finite()) {
            return bad("window_width", "window must be finite with positive width".into());
        }
        if self.latent_channels == 0 || self.codebook_size < 2 {
            return bad("ae", "latent_channels >= 1 and codebook_size >= 2 required".into());
        }
        for (arg, v) in [("stage1.batch_size", self.s1_batch_size), ("stage2.batch_size", self.s2_batch_size)] {
            if v == 0 {
                return bad(arg, "must be >= 1".into());
            }
        }
        for (arg, v) in [("stage1.lr", self.s1_lr), ("stage2.lr", self.s2_lr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(arg, format!("must be finite and >= 0, got {v}"));
            }
        }
        for (arg, v) in [
            ("stage1.weight_decay", self.s1_weight_decay),
            ("stage2.weight_decay", self.s2_weight_decay),
            ("stage1.gamma", self.gamma),
            ("stage1.beta_commit", self.beta_commit),
            ("stage1.hf_beta", self.hf_beta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(arg, format!("must be finite and >= 0, got {v}"));
            }
        }
        if !(self.floor > 0.0 && self.floor < 1.0) {
            return bad("stage1.floor", format!("must lie in (0, 1), got {}", self.floor));
        }
        if !(self.hf_sigma > 0.0 && self.hf_sigma.is_finite()) {
            return bad("stage1.hf_sigma", format!("must be > 0, got {}", self.hf_sigma));
        }
        self.loss_weights().validate()?;
        if self.s2_epochs == 0 || self.s2_steps_per_epoch == 0 {
            return bad("stage2.epochs", "epochs and steps_per_epoch must be >= 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("stage2.alpha", format!("must be > 0, got {}", self.alpha));
        }
        if self.denoiser_width == 0 || self.denoiser_groups == 0 || self.denoiser_width % self.denoiser_groups != 0 {
            return bad("stage2.denoiser_width", "width must be a positive multiple of groups".into());
        }
        self.schedule()?;
        if self.t_start > self.t_max {
            return bad("sampler.t_start", format!("{} exceeds T = {}", self.t_start, self.t_max));
        }
        Ok(())
    }

    pub fn arch(&self) -> AeArch {
        AeArch {
            latent_channels: self.latent_channels,
            codebook_size: self.codebook_size,
            normalize_latent: self.normalize_latent,
        }
    }

    pub fn loss_weights(&self) -> AeLossWeights {
        AeLossWeights {
            lambda_r: self.lambda_r,
            lambda_q: self.lambda_q,
            lambda_s: self.lambda_s,
            lambda_adv: self.lambda_adv,
        }
    }

    pub fn loss_config(&self) -> AeLossConfig {
        AeLossConfig {
            weights: self.loss_weights(),
            gamma: self.gamma,
            floor: self.floor,
            beta_commit: self.beta_commit,
            hf_beta: self.hf_beta,
            hf_sigma: self.hf_sigma,
        }
    }

    /// Stage-1 step settings at step `step` (cosine-decayed when enabled).
    pub fn step_config(&self, step: u64) -> AeStepConfig {
        AeStepConfig {
            loss: self.loss_config(),
            opt: AdamW::new(self.stage1_lr_at(step), self.s1_weight_decay),
            dead_code_steps: self.dead_code_steps,
        }
    }

    /// `lr * (1 + cos(pi * step / steps)) / 2` with decay on, else `lr`.
    pub fn stage1_lr_at(&self, step: u64) -> f64 {
        if !self.s1_cosine_decay || self.s1_steps == 0 {
            return self.s1_lr;
        }
        let frac = step as f64 / self.s1_steps as f64;
        0.5 * self.s1_lr * (1.0 + (std::f64::consts::PI * frac).cos())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.t_max, self.beta_1, self.beta_t)
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            latent_channels: self.latent_channels,
            base_width: self.denoiser_width,
            groups: self.denoiser_groups,
        }
    }

    pub fn stage2_opt(&self) -> AdamW {
        AdamW::new(self.s2_lr, self.s2_weight_decay)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(cfg.to_text().lines().count(), CONFIG_KEYS.len());
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = RunConfig::parse("# header\n\nseed = 9  # trailing\nstage1.lambda_s=0.5\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.lambda_s, 0.5);
    }

    #[test]
    fn unknown_key_names_line() {
        match RunConfig::parse("seed = 1\nstage1.lamda_s = 0.1\n") {
            Err(Error::Config { line, reason }) => {
                assert_eq!(line, 2);
                assert!(reason.contains("lamda_s"), "{reason}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_and_duplicate_lines() {
        assert!(matches!(RunConfig::parse("seed 1"), Err(Error::Config { line: 1, .. })));
        assert!(matches!(RunConfig::parse("seed = x"), Err(Error::Config { line: 1, .. })));
        assert!(matches!(
            RunConfig::parse("seed = 1\nseed = 2"),
            Err(Error::Config { line: 2, .. })
        ));
        assert!(matches!(
            RunConfig::parse("ae.normalize_latent = yes"),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn range_violations() {
        for text in [
            "image_size = 40",
            "stage1.lr = -1",
            "stage1.floor = 0",
            "stage2.alpha = 0",
            "stage2.epochs = 0",
            "sampler.t_start = 2000",
            "stage2.beta_T = 1.5",
            "stage1.lambda_r = 0\nstage1.lambda_q = 0\nstage1.lambda_s = 0",
        ] {
            assert!(
                matches!(RunConfig::parse(text), Err(Error::InvalidArgument { .. })),
                "{text}"
            );
        }
    }

    #[test]
    fn cosine_decay_endpoints() {
        let cfg = RunConfig {
            s1_cosine_decay: true,
            s1_steps: 100,
            s1_lr: 2e-3,
            ..RunConfig::default()
        };
        assert_eq!(cfg.stage1_lr_at(0), 2e-3);
        assert!((cfg.stage1_lr_at(50) - 1e-3).abs() < 1e-15);
        assert!(cfg.stage1_lr_at(100).abs() < 1e-18);
        let flat = RunConfig::default();
        assert_eq!(flat.stage1_lr_at(77), flat.s1_lr);
    }
}
