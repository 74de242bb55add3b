//! Flat sectioned key=value run configuration.
//!
//! The file format is `[section]` headers over `key = value` lines, with `#`
//! comments. CLI `--set section.key=value` overrides file values; dedicated
//! flags (`--seed`, `--out`) override both. Every run serializes its resolved
//! config in canonical order so reruns are diffable.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use profashion_core::error::{Error, Result};
use profashion_core::modelcfg::ModelConfig;

/// Fully resolved run configuration.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub resolution: usize,
    pub n_frames: usize,

    pub model: ModelConfig,

    // synth
    pub turn_rate: Option<f64>,
    pub drift: (f64, f64),
    pub start_yaw: Option<f64>,

    // train
    pub stage: u8,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lambda: f64,
    pub batch: usize,
    pub still_prob: f64,
    pub probes: usize,
    pub probe_step: f64,
    pub ref_dropout: f64,
    pub grad_clip: f64,
    pub param_clamp: f64,
    pub t_min_frac: f64,
    pub eps_bank: usize,
    pub t_anchor_frac: f64,
    pub t_steps: usize,

    // sample
    pub ddim_steps: usize,
    pub cfg_scale: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            resolution: 64,
            n_frames: 16,
            model: ModelConfig::default(),
            turn_rate: None,
            drift: (0.0, 0.0),
            start_yaw: None,
            stage: 1,
            steps: 200,
            lr: 0.02,
            momentum: 0.9,
            lambda: 0.1,
            batch: 2,
            still_prob: 0.3,
            probes: 1,
            probe_step: 1e-3,
            ref_dropout: 0.1,
            grad_clip: 1.0,
            param_clamp: 1.5,
            t_min_frac: 0.0,
            eps_bank: 2,
            t_anchor_frac: 0.5,
            t_steps: 1000,
            ddim_steps: 35,
            cfg_scale: 3.5,
        }
    }
}

impl RunConfig {
    /// Effective turn rate: explicit value or one full turn over the clip.
    pub fn effective_turn_rate(&self) -> f64 {
        self.turn_rate
            .unwrap_or(std::f64::consts::TAU / self.n_frames as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage != 1 && self.stage != 2 {
            return Err(Error::Config(format!("train.stage must be 1 or 2, got {}", self.stage)));
        }
        if self.ddim_steps == 0 || self.ddim_steps > self.t_steps {
            return Err(Error::Config(format!(
                "sample.ddim_steps must be in 1..={}",
                self.t_steps
            )));
        }
        if self.cfg_scale < 0.0 {
            return Err(Error::Config("sample.cfg_scale must be >= 0".into()));
        }
        if self.n_frames < 2 {
            return Err(Error::Config("run.n_frames must be >= 2".into()));
        }
        self.model.validate()
    }

    /// Canonical serialization: fixed section and key order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("[run]\n");
        s.push_str(&format!("seed = {}\n", self.seed));
        s.push_str(&format!("resolution = {}\n", self.resolution));
        s.push_str(&format!("n_frames = {}\n", self.n_frames));
        s.push_str("\n[model]\n");
        let m = &self.model;
        s.push_str(&format!("n_refs = {}\n", m.n_refs));
        s.push_str(&format!("codec_block = {}\n", m.codec_block));
        s.push_str(&format!("base_channels = {}\n", m.base_channels));
        s.push_str(&format!("heads = {}\n", m.heads));
        s.push_str(&format!("selector_dim = {}\n", m.selector_dim));
        s.push_str(&format!("global_dim = {}\n", m.global_dim));
        s.push_str(&format!(
            "pose_channels = {},{},{}\n",
            m.pose_channels[0], m.pose_channels[1], m.pose_channels[2]
        ));
        s.push_str(&format!("groups = {}\n", m.groups));
        s.push_str(&format!("window = {}\n", m.window));
        s.push_str(&format!("window_stride = {}\n", m.window_stride));
        s.push_str(&format!("t_embed_dim = {}\n", m.t_embed_dim));
        s.push_str("\n[synth]\n");
        match self.turn_rate {
            Some(v) => s.push_str(&format!("turn_rate = {:.17e}\n", v)),
            None => s.push_str("turn_rate = auto\n"),
        }
        s.push_str(&format!("drift_y = {:.17e}\n", self.drift.0));
        s.push_str(&format!("drift_x = {:.17e}\n", self.drift.1));
        match self.start_yaw {
            Some(v) => s.push_str(&format!("start_yaw = {:.17e}\n", v)),
            None => s.push_str("start_yaw = auto\n"),
        }
        s.push_str("\n[train]\n");
        s.push_str(&format!("stage = {}\n", self.stage));
        s.push_str(&format!("steps = {}\n", self.steps));
        s.push_str(&format!("lr = {:.17e}\n", self.lr));
        s.push_str(&format!("momentum = {:.17e}\n", self.momentum));
        s.push_str(&format!("lambda = {:.17e}\n", self.lambda));
        s.push_str(&format!("batch = {}\n", self.batch));
        s.push_str(&format!("still_prob = {:.17e}\n", self.still_prob));
        s.push_str(&format!("probes = {}\n", self.probes));
        s.push_str(&format!("probe_step = {:.17e}\n", self.probe_step));
        s.push_str(&format!("ref_dropout = {:.17e}\n", self.ref_dropout));
        s.push_str(&format!("grad_clip = {:.17e}\n", self.grad_clip));
        s.push_str(&format!("param_clamp = {:.17e}\n", self.param_clamp));
        s.push_str(&format!("t_min_frac = {:.17e}\n", self.t_min_frac));
        s.push_str(&format!("eps_bank = {}\n", self.eps_bank));
        s.push_str(&format!("t_anchor_frac = {:.17e}\n", self.t_anchor_frac));
        s.push_str(&format!("t_steps = {}\n", self.t_steps));
        s.push_str("\n[sample]\n");
        s.push_str(&format!("ddim_steps = {}\n", self.ddim_steps));
        s.push_str(&format!("cfg_scale = {:.17e}\n", self.cfg_scale));
        s
    }

    /// FNV-1a hash of the canonical text, as hex.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_text().as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        format!("{h:016x}")
    }

    /// Hash of only the fields a checkpoint depends on (model section plus
    /// resolution); used for checkpoint compatibility checks.
    pub fn model_hash(&self) -> String {
        let text = self.to_text();
        let model_part: String = text
            .lines()
            .skip_while(|l| *l != "[model]")
            .take_while(|l| *l != "[synth]")
            .chain(std::iter::once(""))
            .collect::<Vec<_>>()
            .join("\n");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in format!("resolution={}\n{model_part}", self.resolution).as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        format!("{h:016x}")
    }
}

/// Parse the sectioned key=value text into (section.key -> value).
pub fn parse_flat(text: &str) -> Result<BTreeMap<String, String>> {
    let mut section = String::new();
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "config line {} is neither section nor key=value: '{raw}'",
                lineno + 1
            )));
        };
        if section.is_empty() {
            return Err(Error::Config(format!(
                "config line {} outside any [section]",
                lineno + 1
            )));
        }
        map.insert(
            format!("{section}.{}", k.trim()),
            v.trim().to_string(),
        );
    }
    Ok(map)
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value for {key}: '{v}'")))
}

/// Apply a (section.key -> value) map onto a config.
pub fn apply_values(cfg: &mut RunConfig, values: &BTreeMap<String, String>) -> Result<()> {
    for (key, v) in values {
        match key.as_str() {
            "run.seed" => cfg.seed = parse_num(key, v)?,
            "run.out" => cfg.out = PathBuf::from(v),
            "run.resolution" => {
                cfg.resolution = parse_num(key, v)?;
                cfg.model.resolution = cfg.resolution;
            }
            "run.n_frames" => cfg.n_frames = parse_num(key, v)?,
            "model.n_refs" => cfg.model.n_refs = parse_num(key, v)?,
            "model.codec_block" => cfg.model.codec_block = parse_num(key, v)?,
            "model.base_channels" => cfg.model.base_channels = parse_num(key, v)?,
            "model.heads" => cfg.model.heads = parse_num(key, v)?,
            "model.selector_dim" => cfg.model.selector_dim = parse_num(key, v)?,
            "model.global_dim" => cfg.model.global_dim = parse_num(key, v)?,
            "model.pose_channels" => {
                let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(Error::Config("model.pose_channels needs 3 values".into()));
                }
                cfg.model.pose_channels = [
                    parse_num(key, parts[0])?,
                    parse_num(key, parts[1])?,
                    parse_num(key, parts[2])?,
                ];
            }
            "model.groups" => cfg.model.groups = parse_num(key, v)?,
            "model.window" => cfg.model.window = parse_num(key, v)?,
            "model.window_stride" => cfg.model.window_stride = parse_num(key, v)?,
            "model.t_embed_dim" => cfg.model.t_embed_dim = parse_num(key, v)?,
            "synth.turn_rate" => {
                cfg.turn_rate = if v == "auto" {
                    None
                } else {
                    Some(parse_num(key, v)?)
                }
            }
            "synth.drift_y" => cfg.drift.0 = parse_num(key, v)?,
            "synth.drift_x" => cfg.drift.1 = parse_num(key, v)?,
            "synth.start_yaw" => {
                cfg.start_yaw = if v == "auto" {
                    None
                } else {
                    Some(parse_num(key, v)?)
                }
            }
            "train.stage" => cfg.stage = parse_num(key, v)?,
            "train.steps" => cfg.steps = parse_num(key, v)?,
            "train.lr" => cfg.lr = parse_num(key, v)?,
            "train.momentum" => cfg.momentum = parse_num(key, v)?,
            "train.lambda" => cfg.lambda = parse_num(key, v)?,
            "train.batch" => cfg.batch = parse_num(key, v)?,
            "train.still_prob" => cfg.still_prob = parse_num(key, v)?,
            "train.probes" => cfg.probes = parse_num(key, v)?,
            "train.probe_step" => cfg.probe_step = parse_num(key, v)?,
            "train.ref_dropout" => cfg.ref_dropout = parse_num(key, v)?,
            "train.grad_clip" => cfg.grad_clip = parse_num(key, v)?,
            "train.param_clamp" => cfg.param_clamp = parse_num(key, v)?,
            "train.t_min_frac" => cfg.t_min_frac = parse_num(key, v)?,
            "train.eps_bank" => cfg.eps_bank = parse_num(key, v)?,
            "train.t_anchor_frac" => cfg.t_anchor_frac = parse_num(key, v)?,
            "train.t_steps" => cfg.t_steps = parse_num(key, v)?,
            "sample.ddim_steps" => cfg.ddim_steps = parse_num(key, v)?,
            "sample.cfg_scale" => cfg.cfg_scale = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
    }
    Ok(())
}

/// Load defaults, then a file (optional), then `--set` overrides, then flags.
pub fn resolve_config(
    file: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("cannot read config {}: {e}", path.display())))?;
        apply_values(&mut cfg, &parse_flat(&text)?)?;
    }
    let mut override_map = BTreeMap::new();
    for s in sets {
        let Some((k, v)) = s.split_once('=') else {
            return Err(Error::Config(format!("--set expects section.key=value, got '{s}'")));
        };
        override_map.insert(k.trim().to_string(), v.trim().to_string());
    }
    apply_values(&mut cfg, &override_map)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out = o.to_path_buf();
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_apply() {
        let text = "# comment\n[run]\nseed = 9\nresolution = 32\n\n[model]\nheads = 2\nbase_channels = 8\nselector_dim = 16\nglobal_dim = 16\npose_channels = 4, 8, 8\n";
        let map = parse_flat(text).unwrap();
        let mut cfg = RunConfig::default();
        apply_values(&mut cfg, &map).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.resolution, 32);
        assert_eq!(cfg.model.resolution, 32);
        assert_eq!(cfg.model.heads, 2);
        assert_eq!(cfg.model.pose_channels, [4, 8, 8]);
    }

    #[test]
    fn unknown_key_rejected() {
        let map = parse_flat("[run]\nbogus = 1\n").unwrap();
        let mut cfg = RunConfig::default();
        assert!(apply_values(&mut cfg, &map).is_err());
    }

    #[test]
    fn canonical_text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.seed = 123;
        cfg.model.heads = 2;
        cfg.model.base_channels = 8;
        cfg.model.selector_dim = 16;
        cfg.model.global_dim = 16;
        let text = cfg.to_text();
        let map = parse_flat(&text).unwrap();
        let mut cfg2 = RunConfig::default();
        apply_values(&mut cfg2, &map).unwrap();
        assert_eq!(cfg.to_text(), cfg2.to_text());
        assert_eq!(cfg.hash(), cfg2.hash());
    }

    #[test]
    fn model_hash_ignores_training_fields() {
        let mut a = RunConfig::default();
        let mut b = RunConfig::default();
        b.steps = 999;
        b.cfg_scale = 9.0;
        assert_eq!(a.model_hash(), b.model_hash());
        b.model.heads = 2;
        assert_ne!(a.model_hash(), b.model_hash());
        a.resolution = 32;
        assert_ne!(a.model_hash(), RunConfig::default().model_hash());
    }

    #[test]
    fn defaults_follow_contract() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.model.n_refs, 3);
        assert_eq!(cfg.ddim_steps, 35);
        assert!((cfg.cfg_scale - 3.5).abs() < 1e-15);
    }
}
