//! Flat `key = value` experiment configuration.
//!
//! The canonical defaults live in `config/default.conf` and are compiled in.
//! A user file overrides any subset of keys; `#` starts a comment.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{AugmentSpec, DomainShift, DomainSpec};
use crate::error::{Error, Result};
use crate::losses::{LossWeights, SpcrNorm};
use crate::mining::{HardPool, Pairing};
use crate::propagation::PropagationParams;

pub const DEFAULT_CONFIG: &str = include_str!("../config/default.conf");

/// Where the unlabeled cross-entropy takes its targets from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PseudoSource {
    Propagate,
    Argmax,
}

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|_| format!("expected a number, got `{s}`"))
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for usize {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse()
            .map_err(|_| format!("expected a non-negative integer, got `{s}`"))
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for u64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse()
            .map_err(|_| format!("expected a non-negative integer, got `{s}`"))
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl<T: ConfigValue> ConfigValue for Vec<T> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s.trim().is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|p| T::parse_value(p.trim())).collect()
    }
    fn render(&self) -> String {
        self.iter().map(T::render).collect::<Vec<_>>().join(",")
    }
}

macro_rules! keyword_value {
    ($ty:ty { $($variant:path => $name:literal),+ $(,)? }) => {
        impl ConfigValue for $ty {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($name => Ok($variant),)+
                    _ => Err(format!(
                        "expected one of {}, got `{s}`",
                        [$($name),+].join("|")
                    )),
                }
            }
            fn render(&self) -> String {
                match self {
                    $($variant => $name.to_string(),)+
                }
            }
        }
    };
}

keyword_value!(PseudoSource { PseudoSource::Propagate => "propagate", PseudoSource::Argmax => "argmax" });
keyword_value!(Pairing { Pairing::CyclicRandom => "cyclic-random", Pairing::WithinClass => "within-class" });
keyword_value!(HardPool { HardPool::ClassRestricted => "class-restricted", HardPool::Global => "global" });
keyword_value!(SpcrNorm { SpcrNorm::Batch => "batch", SpcrNorm::Sum => "sum", SpcrNorm::Positives => "positives" });

macro_rules! experiment_config {
    ($($field:ident : $ty:ty),+ $(,)?) => {
        /// Every hyperparameter of a run. Field names are the config keys.
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct ExperimentConfig {
            $(pub $field: $ty,)+
        }

        impl ExperimentConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),+];

            fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($field) => {
                        self.$field = <$ty as ConfigValue>::parse_value(value)
                            .map_err(|m| Error::config(key, m))?;
                    })+
                    _ => return Err(Error::config(key, "unknown key")),
                }
                Ok(())
            }

            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($field), self.$field.render())),+]
            }
        }
    };
}

experiment_config! {
    lambda_prob: f64,
    lambda_mix: f64,
    lambda_pre: f64,
    tau: f64,
    beta: f64,
    mixup_alpha: f64,
    spcr_norm: SpcrNorm,
    pseudo_source: PseudoSource,
    knn_k: usize,
    prop_alpha: f64,
    seed_quantile: f64,
    prop_max_iters: usize,
    prop_tol: f64,
    n_easy: usize,
    n_hard: usize,
    pair: Pairing,
    hard_pool: HardPool,
    classes: usize,
    n_per_class: usize,
    class_std: f64,
    radius: f64,
    rotation_deg: f64,
    translation: Vec<f64>,
    scale: f64,
    label_noise: f64,
    embed_dim: usize,
    shots: usize,
    test_fraction: f64,
    data_seed: u64,
    aug_weak_std: f64,
    aug_strong_std: f64,
    aug_mask: f64,
    hidden_dim: usize,
    bottleneck_dim: usize,
    cls_temperature: f64,
    seeds: Vec<u64>,
    source_epochs: usize,
    adapt_epochs: usize,
    source_batch: usize,
    labeled_batch: usize,
    unlabeled_batch: usize,
    lr_backbone: f64,
    lr_bottleneck: f64,
    lr_classifier: f64,
    momentum: f64,
    weight_decay: f64,
}

fn parse_lines(text: &str, mut apply: impl FnMut(&str, &str) -> Result<()>) -> Result<()> {
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i as u64 + 1,
            msg: format!("expected `key = value`, got `{line}`"),
        })?;
        apply(key.trim(), value.trim())?;
    }
    Ok(())
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cfg = ExperimentConfig {
            lambda_prob: 0.0,
            lambda_mix: 0.0,
            lambda_pre: 0.0,
            tau: 0.0,
            beta: 0.0,
            mixup_alpha: 0.0,
            spcr_norm: SpcrNorm::Batch,
            pseudo_source: PseudoSource::Propagate,
            knn_k: 0,
            prop_alpha: 0.0,
            seed_quantile: 0.0,
            prop_max_iters: 0,
            prop_tol: 0.0,
            n_easy: 0,
            n_hard: 0,
            pair: Pairing::CyclicRandom,
            hard_pool: HardPool::ClassRestricted,
            classes: 0,
            n_per_class: 0,
            class_std: 0.0,
            radius: 0.0,
            rotation_deg: 0.0,
            translation: Vec::new(),
            scale: 0.0,
            label_noise: 0.0,
            embed_dim: 0,
            shots: 0,
            test_fraction: 0.0,
            data_seed: 0,
            aug_weak_std: 0.0,
            aug_strong_std: 0.0,
            aug_mask: 0.0,
            hidden_dim: 0,
            bottleneck_dim: 0,
            cls_temperature: 0.0,
            seeds: Vec::new(),
            source_epochs: 0,
            adapt_epochs: 0,
            source_batch: 0,
            labeled_batch: 0,
            unlabeled_batch: 0,
            lr_backbone: 0.0,
            lr_bottleneck: 0.0,
            lr_classifier: 0.0,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let mut seen = std::collections::BTreeSet::new();
        parse_lines(DEFAULT_CONFIG, |k, v| {
            seen.insert(k.to_string());
            cfg.set(k, v)
        })
        .expect("canonical config parses");
        debug_assert_eq!(seen.len(), Self::KEYS.len(), "canonical config lists every key");
        cfg
    }
}

impl ExperimentConfig {
    /// Defaults overridden by the keys present in `text`, then validated.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        parse_lines(text, |k, v| cfg.set(k, v)).map_err(|e| match e {
            Error::Parse { line, msg } => Error::config(format!("line {line}"), msg),
            other => other,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Every key in canonical order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_weights().validate()?;
        let positive = [
            ("tau", self.tau),
            ("mixup_alpha", self.mixup_alpha),
            ("class_std", self.class_std),
            ("radius", self.radius),
            ("scale", self.scale),
            ("cls_temperature", self.cls_temperature),
            ("prop_tol", self.prop_tol),
        ];
        for (k, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(k, format!("must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("lr_backbone", self.lr_backbone),
            ("lr_bottleneck", self.lr_bottleneck),
            ("lr_classifier", self.lr_classifier),
            ("weight_decay", self.weight_decay),
        ];
        for (k, v) in non_negative {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(k, format!("must be non-negative, got {v}")));
            }
        }
        let unit = [
            ("beta", self.beta),
            ("prop_alpha", self.prop_alpha),
            ("seed_quantile", self.seed_quantile),
            ("momentum", self.momentum),
            ("label_noise", self.label_noise),
            ("test_fraction", self.test_fraction),
            ("aug_mask", self.aug_mask),
        ];
        for (k, v) in unit {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(k, format!("must lie in [0, 1), got {v}")));
            }
        }
        let counts = [
            ("knn_k", self.knn_k),
            ("prop_max_iters", self.prop_max_iters),
            ("n_easy", self.n_easy),
            ("n_hard", self.n_hard),
            ("n_per_class", self.n_per_class),
            ("shots", self.shots),
            ("hidden_dim", self.hidden_dim),
            ("bottleneck_dim", self.bottleneck_dim),
            ("source_batch", self.source_batch),
            ("labeled_batch", self.labeled_batch),
        ];
        for (k, v) in counts {
            if v == 0 {
                return Err(Error::config(k, "must be at least 1"));
            }
        }
        if self.unlabeled_batch < 2 {
            return Err(Error::config("unlabeled_batch", "must be at least 2"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        if self.embed_dim != 0 && self.embed_dim < 2 {
            return Err(Error::config("embed_dim", "must be 0 (off) or at least 2"));
        }
        if self.n_per_class < self.shots + 1 {
            return Err(Error::config("shots", "n_per_class must exceed shots"));
        }
        self.domain_spec().validate()?;
        self.augment_spec().validate()?;
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            prob: self.lambda_prob,
            mix: self.lambda_mix,
            pre: self.lambda_pre,
        }
    }

    pub fn domain_spec(&self) -> DomainSpec {
        let mut spec = DomainSpec::circle(self.classes, self.radius, self.class_std);
        spec.shift = DomainShift {
            rotation_deg: self.rotation_deg,
            translation: self.translation.clone(),
            scale: self.scale,
        };
        spec.label_noise = self.label_noise;
        spec.embed_dim = (self.embed_dim > 0).then_some(self.embed_dim);
        spec
    }

    pub fn augment_spec(&self) -> AugmentSpec {
        AugmentSpec {
            weak_std: self.aug_weak_std,
            strong_std: self.aug_strong_std,
            mask: self.aug_mask,
        }
    }

    pub fn propagation(&self) -> PropagationParams {
        PropagationParams {
            alpha: self.prop_alpha,
            max_iters: self.prop_max_iters,
            tol: self.prop_tol,
        }
    }

    pub fn input_dim(&self) -> usize {
        if self.embed_dim > 0 {
            self.embed_dim
        } else {
            2
        }
    }

    /// Extractor layer sizes: input, two hidden layers, bottleneck.
    pub fn layer_dims(&self) -> Vec<usize> {
        vec![self.input_dim(), self.hidden_dim, self.hidden_dim, self.bottleneck_dim]
    }
}
