//! Flat key=value run configuration.
//!
//! One file drives every command. Keys are grouped by prefix (`data.*`,
//! `model.*`, `loss.*`, `train.*`, `decode.*`, `eval.*`, `synth.*`);
//! unknown keys are rejected at load. `--set key=value` overrides apply on
//! top of the file, and the fully resolved snapshot is written next to
//! every artifact a command produces.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::network::{Mode, ModelConfig};
use crate::postprocess::DecodeConfig;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DataPaths {
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub lr: f64,
    pub epochs: usize,
    pub warmup_epochs: f64,
    pub batch: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// Learning-rate multiplier for the sensitivity parameters.
    pub sensitivity_lr_mult: f64,
    /// Write a checkpoint every N epochs (0 = final only).
    pub checkpoint_every: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            lr: 1e-3,
            epochs: 20,
            warmup_epochs: 1.0,
            batch: 4,
            seed: 1,
            weight_decay: 0.0,
            sensitivity_lr_mult: 10.0,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeSettings {
    pub score_floor: f64,
    pub pre_nms_topk: usize,
    pub nms_sigma: f64,
    pub min_score: f64,
    /// 0 means the mode default: 2000 for detection, 5 for grounding.
    pub max_keep: usize,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        DecodeSettings {
            score_floor: 0.05,
            pre_nms_topk: 200,
            nms_sigma: 0.5,
            min_score: 0.001,
            max_keep: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub thresholds: Vec<f64>,
    pub recall_k: usize,
    pub recall_tiou: f64,
    pub query_ks: Vec<usize>,
    pub query_tious: Vec<f64>,
    pub dump_pr: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            thresholds: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            recall_k: 1,
            recall_tiou: 0.5,
            query_ks: vec![1, 5],
            query_tious: vec![0.3, 0.5],
            dump_pr: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSettings {
    pub seed: u64,
    pub videos: usize,
    pub val_videos: usize,
    pub frames: usize,
    pub dim: usize,
    pub classes: usize,
    pub instances_per_video: usize,
    pub noise: f64,
    pub stride: f64,
    pub queries_per_video: usize,
    pub text_tokens: usize,
    pub text_dim: usize,
    pub signal_scale: f64,
    pub presence_scale: f64,
    pub sensitive_width: f64,
    /// Amplitude of wrong-class evidence on frames far from the sensitive
    /// region (transitional/blurred frames). Kept below the signature floor
    /// so classes stay separable at zero noise.
    pub confusion: f64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        SynthSettings {
            seed: 7,
            videos: 200,
            val_videos: 50,
            frames: 256,
            dim: 16,
            classes: 5,
            instances_per_video: 3,
            noise: 0.5,
            stride: 1.0,
            queries_per_video: 3,
            text_tokens: 8,
            text_dim: 32,
            signal_scale: 2.0,
            presence_scale: 1.0,
            sensitive_width: 0.18,
            confusion: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub data: DataPaths,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainSettings,
    pub decode: DecodeSettings,
    pub eval: EvalSettings,
    pub synth: SynthSettings,
}

fn fmt_f64(v: f64) -> String {
    // Round-trippable and stable.
    format!("{v}")
}

fn fmt_usize_list(v: &[usize]) -> String {
    v.iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn fmt_f64_list(v: &[f64]) -> String {
    v.iter().map(|d| format!("{d}")).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Loads a config file (missing keys keep defaults), then applies
    /// `key=value` overrides, then validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut map = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_kv_lines(&text, &mut map)?;
        }
        for ov in overrides {
            let (k, v) = ov.split_once('=').ok_or_else(|| {
                Error::config(format!("override '{ov}' must look like key=value"))
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let cfg = Self::from_map(map)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut map = BTreeMap::new();
        parse_kv_lines(text, &mut map)?;
        let cfg = Self::from_map(map)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn from_map(mut map: BTreeMap<String, String>) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();

        let mut take_str = |key: &str| map.remove(key);
        macro_rules! set {
            ($key:literal, $slot:expr, $parse:expr) => {
                if let Some(raw) = take_str($key) {
                    $slot = $parse(&raw)
                        .ok_or_else(|| Error::config(format!("bad value for {}: '{raw}'", $key)))?;
                }
            };
        }
        let pf = |s: &str| s.parse::<f64>().ok().filter(|v| v.is_finite());
        let pu = |s: &str| s.parse::<usize>().ok();
        let pu64 = |s: &str| s.parse::<u64>().ok();
        let pb = |s: &str| match s {
            "true" | "on" | "1" => Some(true),
            "false" | "off" | "0" => Some(false),
            _ => None,
        };
        let pul = |s: &str| {
            s.split(',')
                .map(|p| p.trim().parse::<usize>().ok())
                .collect::<Option<Vec<_>>>()
        };
        let pfl = |s: &str| {
            s.split(',')
                .map(|p| p.trim().parse::<f64>().ok().filter(|v| v.is_finite()))
                .collect::<Option<Vec<_>>>()
        };
        let ppath = |s: &str| {
            if s.is_empty() {
                Some(None)
            } else {
                Some(Some(PathBuf::from(s)))
            }
        };

        set!("data.train_manifest", cfg.data.train_manifest, ppath);
        set!("data.val_manifest", cfg.data.val_manifest, ppath);

        set!("model.mode", cfg.model.mode, |s: &str| Mode::parse(s).ok());
        set!("model.classes", cfg.model.classes, pu);
        set!("model.source_dims", cfg.model.source_dims, pul);
        set!("model.proj_dims", cfg.model.proj_dims, pul);
        set!("model.embed_dim", cfg.model.embed_dim, pu);
        set!("model.heads", cfg.model.heads, pu);
        set!("model.depth", cfg.model.depth, pu);
        set!("model.levels", cfg.model.levels, pu);
        set!("model.head_convs", cfg.model.head_convs, pu);
        set!("model.head_kernel", cfg.model.head_kernel, pu);
        set!("model.ffn_mult", cfg.model.ffn_mult, pu);
        set!("model.text_dim", cfg.model.text_dim, pu);
        set!("model.text_layers", cfg.model.text_layers, pu);
        set!("model.fuse_layers", cfg.model.fuse_layers, pu);
        set!("model.max_text_tokens", cfg.model.max_text_tokens, pu);
        set!("model.learn_sensitivity", cfg.model.learn_sensitivity, pb);
        set!("model.sigma_min", cfg.model.sigma_min, pf);
        set!("model.sigma_max", cfg.model.sigma_max, pf);
        set!("model.mu_init", cfg.model.mu_init, pf);
        set!("model.sigma_init", cfg.model.sigma_init, pf);

        set!("loss.focal_alpha", cfg.loss.focal_alpha, pf);
        set!("loss.focal_gamma", cfg.loss.focal_gamma, pf);
        set!("loss.nce_temperature", cfg.loss.nce_temperature, pf);
        set!("loss.lambda_loc", cfg.loss.lambda_loc, pf);
        set!("loss.lambda_nce", cfg.loss.lambda_nce, pf);

        set!("train.lr", cfg.train.lr, pf);
        set!("train.epochs", cfg.train.epochs, pu);
        set!("train.warmup_epochs", cfg.train.warmup_epochs, pf);
        set!("train.batch", cfg.train.batch, pu);
        set!("train.seed", cfg.train.seed, pu64);
        set!("train.weight_decay", cfg.train.weight_decay, pf);
        set!(
            "train.sensitivity_lr_mult",
            cfg.train.sensitivity_lr_mult,
            pf
        );
        set!("train.checkpoint_every", cfg.train.checkpoint_every, pu);

        set!("decode.score_floor", cfg.decode.score_floor, pf);
        set!("decode.pre_nms_topk", cfg.decode.pre_nms_topk, pu);
        set!("decode.nms_sigma", cfg.decode.nms_sigma, pf);
        set!("decode.min_score", cfg.decode.min_score, pf);
        set!("decode.max_keep", cfg.decode.max_keep, pu);

        set!("eval.thresholds", cfg.eval.thresholds, pfl);
        set!("eval.recall_k", cfg.eval.recall_k, pu);
        set!("eval.recall_tiou", cfg.eval.recall_tiou, pf);
        set!("eval.query_ks", cfg.eval.query_ks, pul);
        set!("eval.query_tious", cfg.eval.query_tious, pfl);
        set!("eval.dump_pr", cfg.eval.dump_pr, pb);

        set!("synth.seed", cfg.synth.seed, pu64);
        set!("synth.videos", cfg.synth.videos, pu);
        set!("synth.val_videos", cfg.synth.val_videos, pu);
        set!("synth.frames", cfg.synth.frames, pu);
        set!("synth.dim", cfg.synth.dim, pu);
        set!("synth.classes", cfg.synth.classes, pu);
        set!(
            "synth.instances_per_video",
            cfg.synth.instances_per_video,
            pu
        );
        set!("synth.noise", cfg.synth.noise, pf);
        set!("synth.stride", cfg.synth.stride, pf);
        set!("synth.queries_per_video", cfg.synth.queries_per_video, pu);
        set!("synth.text_tokens", cfg.synth.text_tokens, pu);
        set!("synth.text_dim", cfg.synth.text_dim, pu);
        set!("synth.signal_scale", cfg.synth.signal_scale, pf);
        set!("synth.presence_scale", cfg.synth.presence_scale, pf);
        set!("synth.sensitive_width", cfg.synth.sensitive_width, pf);
        set!("synth.confusion", cfg.synth.confusion, pf);

        if !map.is_empty() {
            let unknown: Vec<String> = map.keys().cloned().collect();
            return Err(Error::config(format!(
                "unknown config keys: {}",
                unknown.join(", ")
            )));
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.train.lr <= 0.0 {
            return Err(Error::config(format!(
                "train.lr must be > 0, got {}",
                self.train.lr
            )));
        }
        if self.train.epochs == 0 || self.train.batch == 0 {
            return Err(Error::config("train.epochs and train.batch must be >= 1"));
        }
        if self.train.warmup_epochs < 0.0 {
            return Err(Error::config("train.warmup_epochs must be >= 0"));
        }
        if self.train.sensitivity_lr_mult <= 0.0 {
            return Err(Error::config("train.sensitivity_lr_mult must be > 0"));
        }
        self.resolved_decode().validate()?;
        if self.eval.thresholds.is_empty()
            || self
                .eval
                .thresholds
                .iter()
                .any(|t| !(0.0..=1.0).contains(t))
        {
            return Err(Error::config("eval.thresholds must lie in [0,1]"));
        }
        if self.eval.recall_k == 0 || self.eval.query_ks.iter().any(|&k| k == 0) {
            return Err(Error::config("recall k values must be >= 1"));
        }
        if self.synth.dim < self.synth.classes + 1 {
            return Err(Error::config(format!(
                "synth.dim ({}) must exceed synth.classes ({}) for distinct signatures",
                self.synth.dim, self.synth.classes
            )));
        }
        if !(self.synth.noise >= 0.0) || self.synth.frames == 0 || self.synth.stride <= 0.0 {
            return Err(Error::config("synth noise/frames/stride out of range"));
        }
        if !(self.synth.sensitive_width > 0.0) {
            return Err(Error::config("synth.sensitive_width must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.synth.confusion) {
            return Err(Error::config("synth.confusion must lie in [0,1]"));
        }
        Ok(())
    }

    /// Final decode configuration with the mode-dependent keep cap.
    pub fn resolved_decode(&self) -> DecodeConfig {
        let max_keep = if self.decode.max_keep > 0 {
            self.decode.max_keep
        } else {
            match self.model.mode {
                Mode::Mq => 2000,
                Mode::Nlq => 5,
            }
        };
        DecodeConfig {
            score_floor: self.decode.score_floor,
            pre_nms_topk: self.decode.pre_nms_topk,
            nms_sigma: self.decode.nms_sigma,
            min_score: self.decode.min_score,
            max_keep,
            per_class: self.model.mode == Mode::Mq,
        }
    }

    /// Fully resolved snapshot; `parse` inverts it.
    pub fn to_text(&self) -> String {
        let path_str = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        let mut s = String::new();
        s.push_str("# resolved run configuration\n");
        s.push_str(&format!(
            "data.train_manifest = {}\n",
            path_str(&self.data.train_manifest)
        ));
        s.push_str(&format!(
            "data.val_manifest = {}\n",
            path_str(&self.data.val_manifest)
        ));
        s.push_str(&format!("model.mode = {}\n", self.model.mode.as_str()));
        s.push_str(&format!("model.classes = {}\n", self.model.classes));
        s.push_str(&format!(
            "model.source_dims = {}\n",
            fmt_usize_list(&self.model.source_dims)
        ));
        s.push_str(&format!(
            "model.proj_dims = {}\n",
            fmt_usize_list(&self.model.proj_dims)
        ));
        s.push_str(&format!("model.embed_dim = {}\n", self.model.embed_dim));
        s.push_str(&format!("model.heads = {}\n", self.model.heads));
        s.push_str(&format!("model.depth = {}\n", self.model.depth));
        s.push_str(&format!("model.levels = {}\n", self.model.levels));
        s.push_str(&format!("model.head_convs = {}\n", self.model.head_convs));
        s.push_str(&format!("model.head_kernel = {}\n", self.model.head_kernel));
        s.push_str(&format!("model.ffn_mult = {}\n", self.model.ffn_mult));
        s.push_str(&format!("model.text_dim = {}\n", self.model.text_dim));
        s.push_str(&format!("model.text_layers = {}\n", self.model.text_layers));
        s.push_str(&format!("model.fuse_layers = {}\n", self.model.fuse_layers));
        s.push_str(&format!(
            "model.max_text_tokens = {}\n",
            self.model.max_text_tokens
        ));
        s.push_str(&format!(
            "model.learn_sensitivity = {}\n",
            self.model.learn_sensitivity
        ));
        s.push_str(&format!("model.sigma_min = {}\n", fmt_f64(self.model.sigma_min)));
        s.push_str(&format!("model.sigma_max = {}\n", fmt_f64(self.model.sigma_max)));
        s.push_str(&format!("model.mu_init = {}\n", fmt_f64(self.model.mu_init)));
        s.push_str(&format!(
            "model.sigma_init = {}\n",
            fmt_f64(self.model.sigma_init)
        ));
        s.push_str(&format!(
            "loss.focal_alpha = {}\n",
            fmt_f64(self.loss.focal_alpha)
        ));
        s.push_str(&format!(
            "loss.focal_gamma = {}\n",
            fmt_f64(self.loss.focal_gamma)
        ));
        s.push_str(&format!(
            "loss.nce_temperature = {}\n",
            fmt_f64(self.loss.nce_temperature)
        ));
        s.push_str(&format!("loss.lambda_loc = {}\n", fmt_f64(self.loss.lambda_loc)));
        s.push_str(&format!("loss.lambda_nce = {}\n", fmt_f64(self.loss.lambda_nce)));
        s.push_str(&format!("train.lr = {}\n", fmt_f64(self.train.lr)));
        s.push_str(&format!("train.epochs = {}\n", self.train.epochs));
        s.push_str(&format!(
            "train.warmup_epochs = {}\n",
            fmt_f64(self.train.warmup_epochs)
        ));
        s.push_str(&format!("train.batch = {}\n", self.train.batch));
        s.push_str(&format!("train.seed = {}\n", self.train.seed));
        s.push_str(&format!(
            "train.weight_decay = {}\n",
            fmt_f64(self.train.weight_decay)
        ));
        s.push_str(&format!(
            "train.sensitivity_lr_mult = {}\n",
            fmt_f64(self.train.sensitivity_lr_mult)
        ));
        s.push_str(&format!(
            "train.checkpoint_every = {}\n",
            self.train.checkpoint_every
        ));
        s.push_str(&format!(
            "decode.score_floor = {}\n",
            fmt_f64(self.decode.score_floor)
        ));
        s.push_str(&format!("decode.pre_nms_topk = {}\n", self.decode.pre_nms_topk));
        s.push_str(&format!("decode.nms_sigma = {}\n", fmt_f64(self.decode.nms_sigma)));
        s.push_str(&format!("decode.min_score = {}\n", fmt_f64(self.decode.min_score)));
        s.push_str(&format!("decode.max_keep = {}\n", self.decode.max_keep));
        s.push_str(&format!(
            "eval.thresholds = {}\n",
            fmt_f64_list(&self.eval.thresholds)
        ));
        s.push_str(&format!("eval.recall_k = {}\n", self.eval.recall_k));
        s.push_str(&format!(
            "eval.recall_tiou = {}\n",
            fmt_f64(self.eval.recall_tiou)
        ));
        s.push_str(&format!(
            "eval.query_ks = {}\n",
            fmt_usize_list(&self.eval.query_ks)
        ));
        s.push_str(&format!(
            "eval.query_tious = {}\n",
            fmt_f64_list(&self.eval.query_tious)
        ));
        s.push_str(&format!("eval.dump_pr = {}\n", self.eval.dump_pr));
        s.push_str(&format!("synth.seed = {}\n", self.synth.seed));
        s.push_str(&format!("synth.videos = {}\n", self.synth.videos));
        s.push_str(&format!("synth.val_videos = {}\n", self.synth.val_videos));
        s.push_str(&format!("synth.frames = {}\n", self.synth.frames));
        s.push_str(&format!("synth.dim = {}\n", self.synth.dim));
        s.push_str(&format!("synth.classes = {}\n", self.synth.classes));
        s.push_str(&format!(
            "synth.instances_per_video = {}\n",
            self.synth.instances_per_video
        ));
        s.push_str(&format!("synth.noise = {}\n", fmt_f64(self.synth.noise)));
        s.push_str(&format!("synth.stride = {}\n", fmt_f64(self.synth.stride)));
        s.push_str(&format!(
            "synth.queries_per_video = {}\n",
            self.synth.queries_per_video
        ));
        s.push_str(&format!("synth.text_tokens = {}\n", self.synth.text_tokens));
        s.push_str(&format!("synth.text_dim = {}\n", self.synth.text_dim));
        s.push_str(&format!(
            "synth.signal_scale = {}\n",
            fmt_f64(self.synth.signal_scale)
        ));
        s.push_str(&format!(
            "synth.presence_scale = {}\n",
            fmt_f64(self.synth.presence_scale)
        ));
        s.push_str(&format!(
            "synth.sensitive_width = {}\n",
            fmt_f64(self.synth.sensitive_width)
        ));
        s.push_str(&format!(
            "synth.confusion = {}\n",
            fmt_f64(self.synth.confusion)
        ));
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

fn parse_kv_lines(text: &str, map: &mut BTreeMap<String, String>) -> Result<()> {
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("config line {}: expected key = value", ln + 1))
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(())
}
