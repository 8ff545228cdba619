//! Run configuration as dotted `key = value` text.
//!
//! Every key has a default; unknown keys and unparsable values are rejected.
//! The canonical text (all keys, sorted) is what gets hashed and echoed to run
//! directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{CadaError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Image height and width.
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub image_layers: usize,
    pub text_layers: usize,
    pub width_v: usize,
    pub width_t: usize,
    pub heads: usize,
    /// Shared latent dimension of the global projections.
    pub latent_dim: usize,
    pub max_len: usize,
    /// 0 means "take it from the dataset vocabulary".
    pub vocab_size: usize,
    pub ffn_mult: usize,
    pub init_std: f64,
    pub ln_eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub group_size: usize,
    pub group_stride: usize,
    pub kl_eps: f64,
    pub ndf: bool,
    pub atp: bool,
    pub ara: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Fixed step budget; 0 derives it from `epochs`.
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
    pub grad_accum: usize,
    /// Random flip and pixel noise on training images.
    pub augment: bool,
    /// Global gradient-norm cap (0 = off).
    pub grad_clip: f64,
    /// AdamW second-moment decay.
    pub beta2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub eta: usize,
    pub local: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config::desk()
    }
}

impl Config {
    /// CPU-sized defaults.
    pub fn desk() -> Self {
        Config {
            model: ModelConfig {
                image_size: 32,
                channels: 3,
                patch: 8,
                image_layers: 2,
                text_layers: 2,
                width_v: 64,
                width_t: 64,
                heads: 4,
                latent_dim: 32,
                max_len: 24,
                vocab_size: 0,
                ffn_mult: 4,
                init_std: 0.02,
                ln_eps: 1e-5,
            },
            loss: LossConfig {
                tau: 0.02,
                lambda: 0.1,
                alpha: 0.8,
                group_size: 12,
                group_stride: 12,
                kl_eps: 1e-8,
                ndf: true,
                atp: true,
                ara: true,
            },
            train: TrainConfig {
                epochs: 150,
                steps: 0,
                batch_size: 16,
                lr: 1.5e-4,
                weight_decay: 0.05,
                seed: 0,
                checkpoint_every: 0,
                grad_accum: 1,
                augment: true,
                grad_clip: 0.0,
                beta2: 0.999,
            },
            eval: EvalConfig { eta: 32, local: true },
        }
    }

    /// The published setting (ViT-B/16 + BERT-base sized, 72 tokens).
    pub fn paper() -> Self {
        let mut c = Config::desk();
        c.model = ModelConfig {
            image_size: 224,
            channels: 3,
            patch: 16,
            image_layers: 12,
            text_layers: 12,
            width_v: 768,
            width_t: 768,
            heads: 12,
            latent_dim: 256,
            max_len: 72,
            vocab_size: 0,
            ffn_mult: 4,
            init_std: 0.02,
            ln_eps: 1e-12,
        };
        c.loss.group_size = 36;
        c.loss.group_stride = 36;
        c.train.epochs = 40;
        c.train.batch_size = 96;
        c.train.lr = 1e-5;
        c
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (m, l, t, e) = (&self.model, &self.loss, &self.train, &self.eval);
        let mut v = vec![
            ("eval.eta", e.eta.to_string()),
            ("eval.protocol", if e.local { "local" } else { "global" }.to_string()),
            ("loss.alpha", fmt_f(l.alpha)),
            ("loss.ara", l.ara.to_string()),
            ("loss.atp", l.atp.to_string()),
            ("loss.group_size", l.group_size.to_string()),
            ("loss.group_stride", l.group_stride.to_string()),
            ("loss.kl_eps", fmt_f(l.kl_eps)),
            ("loss.lambda", fmt_f(l.lambda)),
            ("loss.ndf", l.ndf.to_string()),
            ("loss.tau", fmt_f(l.tau)),
            ("model.channels", m.channels.to_string()),
            ("model.ffn_mult", m.ffn_mult.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.image_layers", m.image_layers.to_string()),
            ("model.image_size", m.image_size.to_string()),
            ("model.init_std", fmt_f(m.init_std)),
            ("model.latent_dim", m.latent_dim.to_string()),
            ("model.ln_eps", fmt_f(m.ln_eps)),
            ("model.max_len", m.max_len.to_string()),
            ("model.patch", m.patch.to_string()),
            ("model.text_layers", m.text_layers.to_string()),
            ("model.vocab_size", m.vocab_size.to_string()),
            ("model.width_t", m.width_t.to_string()),
            ("model.width_v", m.width_v.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.grad_accum", t.grad_accum.to_string()),
            ("train.augment", t.augment.to_string()),
            ("train.grad_clip", fmt_f(t.grad_clip)),
            ("train.beta2", fmt_f(t.beta2)),
            ("train.lr", fmt_f(t.lr)),
            ("train.seed", t.seed.to_string()),
            ("train.steps", t.steps.to_string()),
            ("train.weight_decay", fmt_f(t.weight_decay)),
        ];
        v.sort_by_key(|e| e.0);
        v
    }

    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let (m, l, t, e) = (&mut self.model, &mut self.loss, &mut self.train, &mut self.eval);
        match key.trim() {
            "eval.eta" => e.eta = parse(key, v)?,
            "eval.protocol" => {
                e.local = match v {
                    "local" => true,
                    "global" => false,
                    _ => return Err(CadaError::Config(format!("eval.protocol must be global or local, got {v:?}"))),
                }
            }
            "loss.alpha" => l.alpha = parse(key, v)?,
            "loss.ara" => l.ara = parse(key, v)?,
            "loss.atp" => l.atp = parse(key, v)?,
            "loss.group_size" => l.group_size = parse(key, v)?,
            "loss.group_stride" => l.group_stride = parse(key, v)?,
            "loss.kl_eps" => l.kl_eps = parse(key, v)?,
            "loss.lambda" => l.lambda = parse(key, v)?,
            "loss.ndf" => l.ndf = parse(key, v)?,
            "loss.tau" => l.tau = parse(key, v)?,
            "model.channels" => m.channels = parse(key, v)?,
            "model.ffn_mult" => m.ffn_mult = parse(key, v)?,
            "model.heads" => m.heads = parse(key, v)?,
            "model.image_layers" => m.image_layers = parse(key, v)?,
            "model.image_size" => m.image_size = parse(key, v)?,
            "model.init_std" => m.init_std = parse(key, v)?,
            "model.latent_dim" => m.latent_dim = parse(key, v)?,
            "model.ln_eps" => m.ln_eps = parse(key, v)?,
            "model.max_len" => m.max_len = parse(key, v)?,
            "model.patch" => m.patch = parse(key, v)?,
            "model.text_layers" => m.text_layers = parse(key, v)?,
            "model.vocab_size" => m.vocab_size = parse(key, v)?,
            "model.width_t" => m.width_t = parse(key, v)?,
            "model.width_v" => m.width_v = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.grad_accum" => t.grad_accum = parse(key, v)?,
            "train.augment" => t.augment = parse(key, v)?,
            "train.grad_clip" => t.grad_clip = parse(key, v)?,
            "train.beta2" => t.beta2 = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.steps" => t.steps = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            other => return Err(CadaError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CadaError::Config(format!("override `{kv}` is not key=value")))?;
        self.set(k, v)
    }

    /// Parses config text on top of the desk defaults. `#` starts a comment;
    /// a line `preset = paper` switches the base to the paper-scale values.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Config::desk();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CadaError::Config(format!("config line {}: expected key = value", n + 1)))?;
            if k.trim() == "preset" {
                c = match v.trim() {
                    "desk" => Config::desk(),
                    "paper" => Config::paper(),
                    other => return Err(CadaError::Config(format!("unknown preset `{other}`"))),
                };
                continue;
            }
            c.set(k, v).map_err(|e| CadaError::Config(format!("config line {}: {e}", n + 1)))?;
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| CadaError::io(path, e))?)
    }

    /// All keys in sorted order, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    /// Keys whose values differ, as `key: ours -> theirs` lines.
    pub fn diff(&self, other: &Config) -> Vec<String> {
        let theirs: BTreeMap<_, _> = other.entries().into_iter().collect();
        self.entries()
            .into_iter()
            .filter(|(k, v)| theirs.get(k) != Some(v))
            .map(|(k, v)| format!("{k}: {v} -> {}", theirs[k]))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let bad = |msg: String| Err(CadaError::Config(msg));
        let positive = [
            ("model.image_size", m.image_size),
            ("model.channels", m.channels),
            ("model.patch", m.patch),
            ("model.image_layers", m.image_layers),
            ("model.text_layers", m.text_layers),
            ("model.width_v", m.width_v),
            ("model.width_t", m.width_t),
            ("model.heads", m.heads),
            ("model.latent_dim", m.latent_dim),
            ("model.ffn_mult", m.ffn_mult),
            ("loss.group_size", self.loss.group_size),
            ("loss.group_stride", self.loss.group_stride),
            ("train.batch_size", self.train.batch_size),
            ("train.grad_accum", self.train.grad_accum),
        ];
        for (k, v) in positive {
            if v == 0 {
                return bad(format!("{k} must be positive"));
            }
        }
        if m.image_size % m.patch != 0 {
            return bad(format!("image size {} is not divisible by patch size {}", m.image_size, m.patch));
        }
        if m.width_v % m.heads != 0 || m.width_t % m.heads != 0 {
            return bad(format!("widths {}/{} are not divisible by {} heads", m.width_v, m.width_t, m.heads));
        }
        if m.max_len < 2 {
            return bad("model.max_len must be at least 2".into());
        }
        if self.loss.group_size > m.max_len {
            return bad(format!("group size {} exceeds max_len {}", self.loss.group_size, m.max_len));
        }
        if !(0.0..=1.0).contains(&self.loss.alpha) {
            return bad(format!("loss.alpha {} outside [0, 1]", self.loss.alpha));
        }
        let pos_f = [
            ("loss.tau", self.loss.tau),
            ("loss.kl_eps", self.loss.kl_eps),
            ("train.lr", self.train.lr),
            ("model.init_std", m.init_std),
            ("model.ln_eps", m.ln_eps),
        ];
        for (k, v) in pos_f {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{k} must be positive and finite, got {v}"));
            }
        }
        if !(self.loss.lambda >= 0.0) || !(self.train.weight_decay >= 0.0) {
            return bad("loss.lambda and train.weight_decay must be non-negative".into());
        }
        if !(self.train.grad_clip >= 0.0 && self.train.grad_clip.is_finite()) {
            return bad(format!("train.grad_clip must be non-negative, got {}", self.train.grad_clip));
        }
        if !(self.train.beta2 > 0.0 && self.train.beta2 < 1.0) {
            return bad(format!("train.beta2 must lie in (0, 1), got {}", self.train.beta2));
        }
        if self.train.batch_size < 2 {
            return bad("train.batch_size must be at least 2 (hard negatives need two identities)".into());
        }
        if self.train.steps == 0 && self.train.epochs == 0 {
            return bad("one of train.steps or train.epochs must be positive".into());
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let g = self.model.image_size / self.model.patch;
        g * g
    }
}

fn parse<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse().map_err(|_| CadaError::Config(format!("cannot parse {v:?} for `{key}`")))
}

/// Shortest text that parses back to the same `f64`.
fn fmt_f(x: f64) -> String {
    format!("{x:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_and_hash() {
        let mut c = Config::desk();
        c.apply_override("loss.lambda=0").unwrap();
        c.apply_override("eval.protocol = global").unwrap();
        let back = Config::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(Config::desk().hash(), c.hash());
        assert_eq!(Config::desk().diff(&c), vec!["eval.protocol: local -> global", "loss.lambda: 0.1 -> 0.0"]);
    }

    #[test]
    fn every_key_is_listed_once_in_order_and_settable() {
        let c = Config::desk();
        let keys: Vec<&str> = c.entries().iter().map(|e| e.0).collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]), "{keys:?}");
        let mut d = Config::paper();
        for (k, v) in c.entries() {
            d.set(k, &v).unwrap();
        }
        assert_eq!(d.to_text(), c.to_text());
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(matches!(Config::parse("model.depth = 3"), Err(CadaError::Config(_))));
        assert!(Config::parse("loss.tau = warm").is_err());
        assert!(Config::parse("loss.tau").is_err());
        let mut c = Config::desk();
        c.model.patch = 7;
        assert!(c.validate().is_err());
        c = Config::desk();
        c.loss.group_size = 30;
        assert!(c.validate().is_err());
    }

    #[test]
    fn presets() {
        let c = Config::parse("preset = paper\ntrain.seed = 3 # comment").unwrap();
        assert_eq!(c.model.max_len, 72);
        assert_eq!(c.num_patches(), 196);
        assert_eq!(c.train.seed, 3);
        assert_eq!(Config::desk().num_patches(), 16);
        Config::paper().validate().unwrap();
        Config::desk().validate().unwrap();
    }
}
