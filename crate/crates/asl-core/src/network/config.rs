//! Model hyperparameters.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Mq,
    Nlq,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Mq => "mq",
            Mode::Nlq => "nlq",
        }
    }

    pub fn parse(s: &str) -> Result<Mode> {
        match s {
            "mq" => Ok(Mode::Mq),
            "nlq" => Ok(Mode::Nlq),
            other => Err(Error::config(format!(
                "mode must be 'mq' or 'nlq', got '{other}'"
            ))),
        }
    }
}

/// Architecture description; desk-scale defaults, larger values accepted.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub mode: Mode,
    pub classes: usize,
    /// Input channel count per feature source.
    pub source_dims: Vec<usize>,
    /// Per-source projection widths; must sum to `embed_dim`.
    pub proj_dims: Vec<usize>,
    pub embed_dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub levels: usize,
    pub head_convs: usize,
    pub head_kernel: usize,
    pub ffn_mult: usize,
    /// Text side (NLQ only).
    pub text_dim: usize,
    pub text_layers: usize,
    pub fuse_layers: usize,
    pub max_text_tokens: usize,
    /// Sensitivity learning.
    pub learn_sensitivity: bool,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub mu_init: f64,
    pub sigma_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: Mode::Mq,
            classes: 5,
            source_dims: vec![16],
            proj_dims: vec![64],
            embed_dim: 64,
            heads: 4,
            depth: 2,
            levels: 4,
            head_convs: 2,
            head_kernel: 3,
            ffn_mult: 4,
            text_dim: 32,
            text_layers: 1,
            fuse_layers: 1,
            max_text_tokens: 64,
            learn_sensitivity: true,
            sigma_min: 0.1,
            sigma_max: 8.0,
            mu_init: 0.5,
            sigma_init: 2.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::config("classes must be >= 1"));
        }
        if self.mode == Mode::Nlq && self.classes != 1 {
            return Err(Error::config(format!(
                "nlq mode is single-class, got classes={}",
                self.classes
            )));
        }
        if self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.source_dims.is_empty() || self.source_dims.len() != self.proj_dims.len() {
            return Err(Error::config(format!(
                "source_dims ({}) and proj_dims ({}) must be non-empty and parallel",
                self.source_dims.len(),
                self.proj_dims.len()
            )));
        }
        let proj_sum: usize = self.proj_dims.iter().sum();
        if proj_sum != self.embed_dim {
            return Err(Error::config(format!(
                "proj_dims sum to {proj_sum} but embed_dim is {}",
                self.embed_dim
            )));
        }
        if self.levels == 0 {
            return Err(Error::config("levels must be >= 1"));
        }
        if self.head_kernel % 2 == 0 || self.head_kernel == 0 {
            return Err(Error::config(format!(
                "head_kernel must be odd, got {}",
                self.head_kernel
            )));
        }
        if self.mode == Mode::Nlq {
            if self.text_dim == 0 || self.text_layers == 0 || self.fuse_layers == 0 {
                return Err(Error::config(
                    "nlq mode needs text_dim, text_layers and fuse_layers >= 1",
                ));
            }
            if self.max_text_tokens == 0 {
                return Err(Error::config("max_text_tokens must be >= 1"));
            }
        }
        if !(self.sigma_min > 0.0 && self.sigma_max >= self.sigma_min) {
            return Err(Error::config(format!(
                "sigma bounds invalid: [{}, {}]",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(0.0..=1.0).contains(&self.mu_init) {
            return Err(Error::config(format!(
                "mu_init must lie in [0,1], got {}",
                self.mu_init
            )));
        }
        Ok(())
    }

    /// Frame count granularity the pyramid needs: inputs are padded to a
    /// multiple of `2^(levels-1)`.
    pub fn pad_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    /// Key=value text form used inside checkpoints; `from_text` inverts it.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| -> String {
            v.iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut s = String::new();
        s.push_str(&format!("mode = {}\n", self.mode.as_str()));
        s.push_str(&format!("classes = {}\n", self.classes));
        s.push_str(&format!("source_dims = {}\n", list(&self.source_dims)));
        s.push_str(&format!("proj_dims = {}\n", list(&self.proj_dims)));
        s.push_str(&format!("embed_dim = {}\n", self.embed_dim));
        s.push_str(&format!("heads = {}\n", self.heads));
        s.push_str(&format!("depth = {}\n", self.depth));
        s.push_str(&format!("levels = {}\n", self.levels));
        s.push_str(&format!("head_convs = {}\n", self.head_convs));
        s.push_str(&format!("head_kernel = {}\n", self.head_kernel));
        s.push_str(&format!("ffn_mult = {}\n", self.ffn_mult));
        s.push_str(&format!("text_dim = {}\n", self.text_dim));
        s.push_str(&format!("text_layers = {}\n", self.text_layers));
        s.push_str(&format!("fuse_layers = {}\n", self.fuse_layers));
        s.push_str(&format!("max_text_tokens = {}\n", self.max_text_tokens));
        s.push_str(&format!("learn_sensitivity = {}\n", self.learn_sensitivity));
        s.push_str(&format!("sigma_min = {}\n", self.sigma_min));
        s.push_str(&format!("sigma_max = {}\n", self.sigma_max));
        s.push_str(&format!("mu_init = {}\n", self.mu_init));
        s.push_str(&format!("sigma_init = {}\n", self.sigma_init));
        s
    }

    pub fn from_text(text: &str) -> Result<ModelConfig> {
        let mut map = std::collections::BTreeMap::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("model config line {}: expected key = value", ln + 1))
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut take = |key: &str| -> Result<String> {
            map.remove(key)
                .ok_or_else(|| Error::config(format!("model config missing key {key}")))
        };
        let parse_usize = |key: &str, v: String| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::config(format!("model config {key}: bad integer '{v}'")))
        };
        let parse_f64 = |key: &str, v: String| -> Result<f64> {
            v.parse()
                .map_err(|_| Error::config(format!("model config {key}: bad number '{v}'")))
        };
        let parse_list = |key: &str, v: String| -> Result<Vec<usize>> {
            v.split(',')
                .map(|p| {
                    p.trim().parse().map_err(|_| {
                        Error::config(format!("model config {key}: bad list entry '{p}'"))
                    })
                })
                .collect()
        };
        let cfg = ModelConfig {
            mode: Mode::parse(&take("mode")?)?,
            classes: parse_usize("classes", take("classes")?)?,
            source_dims: parse_list("source_dims", take("source_dims")?)?,
            proj_dims: parse_list("proj_dims", take("proj_dims")?)?,
            embed_dim: parse_usize("embed_dim", take("embed_dim")?)?,
            heads: parse_usize("heads", take("heads")?)?,
            depth: parse_usize("depth", take("depth")?)?,
            levels: parse_usize("levels", take("levels")?)?,
            head_convs: parse_usize("head_convs", take("head_convs")?)?,
            head_kernel: parse_usize("head_kernel", take("head_kernel")?)?,
            ffn_mult: parse_usize("ffn_mult", take("ffn_mult")?)?,
            text_dim: parse_usize("text_dim", take("text_dim")?)?,
            text_layers: parse_usize("text_layers", take("text_layers")?)?,
            fuse_layers: parse_usize("fuse_layers", take("fuse_layers")?)?,
            max_text_tokens: parse_usize("max_text_tokens", take("max_text_tokens")?)?,
            learn_sensitivity: take("learn_sensitivity")? == "true",
            sigma_min: parse_f64("sigma_min", take("sigma_min")?)?,
            sigma_max: parse_f64("sigma_max", take("sigma_max")?)?,
            mu_init: parse_f64("mu_init", take("mu_init")?)?,
            sigma_init: parse_f64("sigma_init", take("sigma_init")?)?,
        };
        if let Some(extra) = map.keys().next() {
            return Err(Error::config(format!(
                "model config has unknown key {extra}"
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
