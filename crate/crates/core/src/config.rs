//! Model, training and sampling configuration.
//!
//! Configurations are plain structs with a flat `key = value` text form used
//! both by configuration files and by checkpoint headers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Names accepted by [`ModelConfig::preset`].
pub const PRESET_NAMES: [&str; 5] = ["S-16kHz", "S-44.1kHz", "M-44.1kHz", "L-44.1kHz", "tiny"];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub name: String,
    /// Joint (audio/visual/text) blocks.
    pub n_mm_blocks: usize,
    /// Audio-only blocks following the joint ones.
    pub n_single_blocks: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub latent_fps: f64,
    pub visual_feat_dim: usize,
    pub text_feat_dim: usize,
    pub sync_feat_dim: usize,
    pub visual_fps: f64,
    pub sync_fps: f64,
    pub text_len: usize,
    pub n_heads: usize,
    pub mlp_ratio: f64,
    /// Width of the sinusoidal timestep encoding.
    pub time_freq_dim: usize,
    pub rope_base: f64,
    /// When false the frame-aligned condition degenerates to the broadcast
    /// global condition (no synchronization features are used).
    pub sync_module: bool,
}

impl ModelConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (n_mm, n_single, h, latent_dim, latent_fps) = match name {
            "S-16kHz" => (4, 8, 448, 20, 16000.0 / 256.0 / 2.0),
            "S-44.1kHz" => (4, 8, 448, 40, 44100.0 / 512.0 / 2.0),
            "M-44.1kHz" => (4, 8, 896, 40, 44100.0 / 512.0 / 2.0),
            "L-44.1kHz" => (7, 14, 896, 40, 44100.0 / 512.0 / 2.0),
            "tiny" => (2, 2, 64, 8, 31.25),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset '{other}', valid presets: {}",
                    PRESET_NAMES.join(", ")
                )))
            }
        };
        let mut cfg = ModelConfig {
            name: name.to_string(),
            n_mm_blocks: n_mm,
            n_single_blocks: n_single,
            hidden_dim: h,
            latent_dim,
            latent_fps,
            visual_feat_dim: 1024,
            text_feat_dim: 1024,
            sync_feat_dim: 768,
            visual_fps: 8.0,
            sync_fps: 24.0,
            text_len: 77,
            n_heads: (h / 64).max(1),
            mlp_ratio: 4.0,
            time_freq_dim: 256,
            rope_base: 10_000.0,
            sync_module: true,
        };
        if name == "tiny" {
            // Raw feature widths are shrunk so CPU training stays in minutes.
            cfg.visual_feat_dim = 64;
            cfg.text_feat_dim = 64;
            cfg.sync_feat_dim = 48;
            cfg.time_freq_dim = 64;
        }
        Ok(cfg)
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.hidden_dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Position multiplier for the visual stream so that equal wall-clock
    /// times share the same rotary phase as the audio stream.
    pub fn visual_rate_scale(&self) -> f64 {
        self.latent_fps / self.visual_fps
    }

    pub fn audio_len(&self, duration_sec: f64) -> usize {
        (duration_sec * self.latent_fps).round() as usize
    }

    pub fn visual_len(&self, duration_sec: f64) -> usize {
        (duration_sec * self.visual_fps).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || self.hidden_dim % self.n_heads != 0 {
            return bad(format!(
                "hidden_dim {} is not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head dimension {} must be even", self.head_dim()));
        }
        if !(self.visual_fps > 0.0 && self.latent_fps > self.visual_fps) {
            return bad(format!(
                "need latent_fps > visual_fps > 0 (got {} and {})",
                self.latent_fps, self.visual_fps
            ));
        }
        if !(self.sync_fps > 0.0) {
            return bad("sync_fps must be positive".into());
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        if self.time_freq_dim == 0 || self.time_freq_dim % 2 != 0 {
            return bad("time_freq_dim must be a positive even number".into());
        }
        for (k, v) in [
            ("hidden_dim", self.hidden_dim),
            ("latent_dim", self.latent_dim),
            ("visual_feat_dim", self.visual_feat_dim),
            ("text_feat_dim", self.text_feat_dim),
            ("sync_feat_dim", self.sync_feat_dim),
            ("text_len", self.text_len),
        ] {
            if v == 0 {
                return bad(format!("{k} must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub mask_prob: f64,
    pub dup_factor: usize,
    pub ema_rel_width: f64,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-4,
            warmup_steps: 1000,
            total_steps: 300_000,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 1e-6,
            mask_prob: 0.1,
            dup_factor: 5,
            ema_rel_width: 0.05,
            batch_size: 512,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return bad("mask_prob must lie in [0, 1]");
        }
        if self.warmup_steps >= self.total_steps {
            return bad("warmup_steps must be smaller than total_steps");
        }
        if !(self.base_lr > 0.0 && self.weight_decay >= 0.0 && self.ema_rel_width > 0.0) {
            return bad("rates must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.dup_factor == 0 {
            return bad("batch_size and dup_factor must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleConfig {
    pub n_steps: usize,
    pub cfg_strength: f64,
    pub duration_sec: f64,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            n_steps: 25,
            cfg_strength: 4.5,
            duration_sec: 8.0,
            seed: 0,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::Config("n_steps must be at least 1".into()));
        }
        if !(self.duration_sec > 0.0) {
            return Err(Error::Config("duration_sec must be positive".into()));
        }
        Ok(())
    }
}

/// Piecewise learning-rate schedule: linear warmup, then the base rate,
/// dropping tenfold after 80% and again after 90% of training.
pub fn lr_at_step(step: u64, cfg: &TrainConfig) -> f64 {
    let s = step as f64;
    let total = cfg.total_steps as f64;
    if step < cfg.warmup_steps {
        cfg.base_lr * s / cfg.warmup_steps as f64
    } else if s < 0.8 * total {
        cfg.base_lr
    } else if s < 0.9 * total {
        cfg.base_lr * 0.1
    } else {
        cfg.base_lr * 0.01
    }
}

/// Ordered `key = value` pairs as read from a configuration file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues(pub BTreeMap<String, String>);

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(KeyValues(map))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Entries under `prefix.`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> Vec<(String, String)> {
        let p = format!("{prefix}.");
        self.0
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }
}

fn parse_val<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value '{v}' for '{key}'")))
}

/// Text round-tripping for configuration structs.
pub trait KeyValueConfig: Sized {
    fn set(&mut self, key: &str, value: &str) -> Result<()>;
    fn pairs(&self) -> Vec<(&'static str, String)>;

    fn apply(&mut self, entries: &[(String, String)]) -> Result<()> {
        for (k, v) in entries {
            self.set(k, v)?;
        }
        Ok(())
    }

    fn to_text(&self, prefix: &str) -> String {
        let mut out = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(out, "{prefix}.{k} = {v}");
        }
        out
    }
}

impl KeyValueConfig for ModelConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "name" => self.name = v.to_string(),
            "n_mm_blocks" => self.n_mm_blocks = parse_val(key, v)?,
            "n_single_blocks" => self.n_single_blocks = parse_val(key, v)?,
            "hidden_dim" => self.hidden_dim = parse_val(key, v)?,
            "latent_dim" => self.latent_dim = parse_val(key, v)?,
            "latent_fps" => self.latent_fps = parse_val(key, v)?,
            "visual_feat_dim" => self.visual_feat_dim = parse_val(key, v)?,
            "text_feat_dim" => self.text_feat_dim = parse_val(key, v)?,
            "sync_feat_dim" => self.sync_feat_dim = parse_val(key, v)?,
            "visual_fps" => self.visual_fps = parse_val(key, v)?,
            "sync_fps" => self.sync_fps = parse_val(key, v)?,
            "text_len" => self.text_len = parse_val(key, v)?,
            "n_heads" => self.n_heads = parse_val(key, v)?,
            "mlp_ratio" => self.mlp_ratio = parse_val(key, v)?,
            "time_freq_dim" => self.time_freq_dim = parse_val(key, v)?,
            "rope_base" => self.rope_base = parse_val(key, v)?,
            "sync_module" => self.sync_module = parse_val(key, v)?,
            _ => return Err(Error::Config(format!("unknown model key '{key}'"))),
        }
        Ok(())
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("name", self.name.clone()),
            ("n_mm_blocks", self.n_mm_blocks.to_string()),
            ("n_single_blocks", self.n_single_blocks.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("latent_dim", self.latent_dim.to_string()),
            ("latent_fps", self.latent_fps.to_string()),
            ("visual_feat_dim", self.visual_feat_dim.to_string()),
            ("text_feat_dim", self.text_feat_dim.to_string()),
            ("sync_feat_dim", self.sync_feat_dim.to_string()),
            ("visual_fps", self.visual_fps.to_string()),
            ("sync_fps", self.sync_fps.to_string()),
            ("text_len", self.text_len.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("time_freq_dim", self.time_freq_dim.to_string()),
            ("rope_base", self.rope_base.to_string()),
            ("sync_module", self.sync_module.to_string()),
        ]
    }
}

impl KeyValueConfig for TrainConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "base_lr" => self.base_lr = parse_val(key, v)?,
            "warmup_steps" => self.warmup_steps = parse_val(key, v)?,
            "total_steps" => self.total_steps = parse_val(key, v)?,
            "beta1" => self.beta1 = parse_val(key, v)?,
            "beta2" => self.beta2 = parse_val(key, v)?,
            "weight_decay" => self.weight_decay = parse_val(key, v)?,
            "mask_prob" => self.mask_prob = parse_val(key, v)?,
            "dup_factor" => self.dup_factor = parse_val(key, v)?,
            "ema_rel_width" => self.ema_rel_width = parse_val(key, v)?,
            "batch_size" => self.batch_size = parse_val(key, v)?,
            "grad_clip" => self.grad_clip = parse_val(key, v)?,
            "seed" => self.seed = parse_val(key, v)?,
            _ => return Err(Error::Config(format!("unknown train key '{key}'"))),
        }
        Ok(())
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("base_lr", self.base_lr.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("mask_prob", self.mask_prob.to_string()),
            ("dup_factor", self.dup_factor.to_string()),
            ("ema_rel_width", self.ema_rel_width.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

impl KeyValueConfig for SampleConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "n_steps" => self.n_steps = parse_val(key, v)?,
            "cfg_strength" => self.cfg_strength = parse_val(key, v)?,
            "duration_sec" => self.duration_sec = parse_val(key, v)?,
            "seed" => self.seed = parse_val(key, v)?,
            _ => return Err(Error::Config(format!("unknown sample key '{key}'"))),
        }
        Ok(())
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n_steps", self.n_steps.to_string()),
            ("cfg_strength", self.cfg_strength.to_string()),
            ("duration_sec", self.duration_sec.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}
