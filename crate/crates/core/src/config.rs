//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` or `;` are ignored, as are
//! `[section]` headers. Every key is optional; unknown keys and
//! out-of-range values are rejected by name. The canonical form lists every
//! key in sorted order with its effective value, and its SHA-256 is the
//! fingerprint stored in checkpoints and reports.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::embed::PretrainConfig;
use crate::error::{io_err, Error, Result};
use crate::losses::LossWeights;
use crate::nets::Arch;
use crate::synth::{NUM_ATTRIBUTES, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Root seed; every consumer derives its own stream from it.
    pub seed: u64,
    /// Canvas side in pixels (square images).
    pub canvas: usize,
    pub n_attr: usize,
    pub n_classes: usize,
    pub g_width: usize,
    pub d_width: usize,
    pub attr_width: usize,
    pub seg_width: usize,
    pub weights: LossWeights,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch: usize,
    pub steps: u64,
    pub checkpoint_every: u64,
    /// Use the squared Euclidean distance as reconstruction loss.
    pub squared_recon: bool,
    pub pretrain_epochs: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub pretrain_masked_fraction: f64,
    pub retrieval_k: usize,
    /// Side of the centered retrieval hole as a fraction of the image side.
    pub retrieval_mask_fraction: f64,
    pub data: String,
    pub attr_ckpt: String,
    pub seg_ckpt: String,
    pub out: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let arch = Arch::default();
        let pre = PretrainConfig::default();
        Self {
            seed: 0,
            canvas: 64,
            n_attr: NUM_ATTRIBUTES,
            n_classes: NUM_CLASSES,
            g_width: arch.g_width,
            d_width: arch.d_width,
            attr_width: arch.attr_width,
            seg_width: arch.seg_width,
            weights: LossWeights::default(),
            lr: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            batch: 16,
            steps: 10_000,
            checkpoint_every: 1000,
            squared_recon: false,
            pretrain_epochs: pre.epochs,
            pretrain_batch: pre.batch,
            pretrain_lr: pre.lr,
            pretrain_masked_fraction: pre.masked_fraction,
            retrieval_k: 10,
            retrieval_mask_fraction: 0.5,
            data: String::new(),
            attr_ckpt: String::new(),
            seg_ckpt: String::new(),
            out: String::new(),
        }
    }
}

fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected a boolean, got {value:?}"
        ))),
    }
}

impl ExperimentConfig {
    /// Sets one key from its textual value without range checks.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse_value(key, v)?,
            "canvas" => self.canvas = parse_value(key, v)?,
            "n_attr" => self.n_attr = parse_value(key, v)?,
            "n_classes" => self.n_classes = parse_value(key, v)?,
            "g_width" => self.g_width = parse_value(key, v)?,
            "d_width" => self.d_width = parse_value(key, v)?,
            "attr_width" => self.attr_width = parse_value(key, v)?,
            "seg_width" => self.seg_width = parse_value(key, v)?,
            "beta" => self.weights.beta = parse_value(key, v)?,
            "lambda_a" => self.weights.lambda_a = parse_value(key, v)?,
            "lambda_s" => self.weights.lambda_s = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "adam_beta1" => self.adam_beta1 = parse_value(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse_value(key, v)?,
            "batch" => self.batch = parse_value(key, v)?,
            "steps" => self.steps = parse_value(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, v)?,
            "squared_recon" => self.squared_recon = parse_bool(key, v)?,
            "pretrain_epochs" => self.pretrain_epochs = parse_value(key, v)?,
            "pretrain_batch" => self.pretrain_batch = parse_value(key, v)?,
            "pretrain_lr" => self.pretrain_lr = parse_value(key, v)?,
            "pretrain_masked_fraction" => self.pretrain_masked_fraction = parse_value(key, v)?,
            "retrieval_k" => self.retrieval_k = parse_value(key, v)?,
            "retrieval_mask_fraction" => self.retrieval_mask_fraction = parse_value(key, v)?,
            "data" => self.data = v.to_string(),
            "attr_ckpt" => self.attr_ckpt = v.to_string(),
            "seg_ckpt" => self.seg_ckpt = v.to_string(),
            "out" => self.out = v.to_string(),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses a document and applies `overrides` (`key=value`) on top.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty()
                || line.starts_with('#')
                || line.starts_with(';')
                || line.starts_with('[')
            {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected key = value, got {line:?}",
                    n + 1
                ))
            })?;
            cfg.set(k, v)?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (if given) and applies `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(io_err(p))?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::Config(format!("{key} {why}")));
        if self.canvas < 32 || !self.canvas.is_multiple_of(16) {
            return bad("canvas", "must be a multiple of 16 and at least 32");
        }
        for (key, v) in [
            ("n_attr", self.n_attr),
            ("g_width", self.g_width),
            ("d_width", self.d_width),
            ("attr_width", self.attr_width),
            ("seg_width", self.seg_width),
            ("pretrain_epochs", self.pretrain_epochs),
            ("pretrain_batch", self.pretrain_batch),
            ("retrieval_k", self.retrieval_k),
        ] {
            if v == 0 {
                return bad(key, "must be at least 1");
            }
        }
        if self.n_classes < 2 || self.n_classes > 256 {
            return bad("n_classes", "must be between 2 and 256");
        }
        if self.batch < 2 {
            return bad("batch", "must be at least 2");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every", "must be at least 1");
        }
        LossWeights::new(
            self.weights.beta,
            self.weights.lambda_a,
            self.weights.lambda_s,
        )?;
        for (key, v) in [("lr", self.lr), ("pretrain_lr", self.pretrain_lr)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(key, "must be a finite value >= 0");
            }
        }
        for (key, v) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(key, "must lie in [0, 1)");
            }
        }
        if !(0.0..=1.0).contains(&self.pretrain_masked_fraction) {
            return bad("pretrain_masked_fraction", "must lie in [0, 1]");
        }
        if !(self.retrieval_mask_fraction > 0.0 && self.retrieval_mask_fraction < 1.0) {
            return bad("retrieval_mask_fraction", "must lie in (0, 1)");
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let mut e = vec![
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("attr_ckpt", self.attr_ckpt.clone()),
            ("attr_width", self.attr_width.to_string()),
            ("batch", self.batch.to_string()),
            ("beta", self.weights.beta.to_string()),
            ("canvas", self.canvas.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("d_width", self.d_width.to_string()),
            ("data", self.data.clone()),
            ("g_width", self.g_width.to_string()),
            ("lambda_a", self.weights.lambda_a.to_string()),
            ("lambda_s", self.weights.lambda_s.to_string()),
            ("lr", self.lr.to_string()),
            ("n_attr", self.n_attr.to_string()),
            ("n_classes", self.n_classes.to_string()),
            ("out", self.out.clone()),
            ("pretrain_batch", self.pretrain_batch.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("pretrain_lr", self.pretrain_lr.to_string()),
            (
                "pretrain_masked_fraction",
                self.pretrain_masked_fraction.to_string(),
            ),
            ("retrieval_k", self.retrieval_k.to_string()),
            (
                "retrieval_mask_fraction",
                self.retrieval_mask_fraction.to_string(),
            ),
            ("seed", self.seed.to_string()),
            ("seg_ckpt", self.seg_ckpt.clone()),
            ("seg_width", self.seg_width.to_string()),
            ("squared_recon", self.squared_recon.to_string()),
            ("steps", self.steps.to_string()),
        ];
        e.sort_by_key(|(k, _)| *k);
        e
    }

    /// Every key with its effective value, one `key=value` per line, sorted.
    pub fn canonical(&self) -> String {
        self.entries()
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Hex SHA-256 of the canonical form.
    pub fn fingerprint(&self) -> String {
        hex(&Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn arch(&self) -> Arch {
        Arch {
            height: self.canvas,
            width: self.canvas,
            n_attr: self.n_attr,
            n_classes: self.n_classes,
            g_width: self.g_width,
            d_width: self.d_width,
            attr_width: self.attr_width,
            seg_width: self.seg_width,
        }
    }

    pub fn pretrain(&self, seed: u64) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            batch: self.pretrain_batch,
            lr: self.pretrain_lr,
            seed,
            masked_fraction: self.pretrain_masked_fraction,
        }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
