use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::AugmentRanges;
use crate::networks::NetworkConfig;
use crate::objectives::LossWeights;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub data_dir: Option<PathBuf>,
    pub run_id: String,
    pub seed: u64,
    pub labels_fraction: f64,
    pub val_subjects: usize,
    pub test_subjects: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Optimiser steps per epoch; 0 means one pass over the training frames.
    pub steps_per_epoch: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub lr_period_epochs: f64,
    pub ema_decay: f64,
    pub patience_evals: usize,
    /// Epochs over which the adversarial weight ramps linearly up from 0.
    pub adv_warmup_epochs: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub parallel: bool,
    pub weights: LossWeights,
    pub augment: AugmentRanges,
    pub network: NetworkConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            run_id: "run".into(),
            seed: 0,
            labels_fraction: 0.05,
            val_subjects: 20,
            test_subjects: 20,
            batch_size: 4,
            max_epochs: 100,
            steps_per_epoch: 0,
            lr_max: 1e-4,
            lr_min: 1e-5,
            lr_period_epochs: 20.0,
            ema_decay: 0.999,
            patience_evals: 20,
            adv_warmup_epochs: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            parallel: true,
            weights: LossWeights::default(),
            augment: AugmentRanges::default(),
            network: NetworkConfig::default(),
        }
    }
}

/// A settable configuration key. `section` is the optional dotted prefix.
pub struct ConfigKey {
    pub name: &'static str,
    pub section: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, section: &'static str, help: &'static str) -> ConfigKey {
    ConfigKey { name, section, help }
}

pub const CONFIG_KEYS: &[ConfigKey] = &[
    key("data_dir", "data", "dataset root written by `sdtnet phantom`"),
    key("run_id", "", "run directory name under the runs root"),
    key("seed", "", "seed for splits, initialisation, sampling and augmentation"),
    key("labels_fraction", "data", "fraction of training subjects with labels"),
    key("val_subjects", "data", "validation subjects"),
    key("test_subjects", "data", "test subjects"),
    key("batch_size", "training", "frames per labelled, unlabelled and pair batch"),
    key("max_epochs", "training", "epoch limit"),
    key("steps_per_epoch", "training", "optimiser steps per epoch (0: one pass over training frames)"),
    key("lr_max", "training", "triangular schedule maximum"),
    key("lr_min", "training", "triangular schedule minimum"),
    key("lr_period_epochs", "training", "triangular schedule period"),
    key("ema_decay", "training", "decay of the parameter moving average"),
    key("patience_evals", "training", "epochs without validation improvement before stopping"),
    key("adv_warmup_epochs", "training", "epochs of linear ramp-up of lambda2 (0: none)"),
    key("adam_beta1", "training", "Adam first-moment decay"),
    key("adam_beta2", "training", "Adam second-moment decay"),
    key("adam_eps", "training", "Adam epsilon"),
    key("parallel", "training", "data-parallel kernels (false: single-threaded)"),
    key("lambda0", "weights", "supervised term weight"),
    key("lambda1", "weights", "unsupervised term weight"),
    key("lambda2", "weights", "adversarial term weight"),
    key("lambda3", "weights", "temporal transformer term weight"),
    key("lambda_kl", "weights", "KL weight inside the unsupervised term"),
    key("ce_weight", "weights", "cross-entropy weight inside the supervised term"),
    key("max_rotation_deg", "augment", "rotation range in degrees"),
    key("max_translation", "augment", "shift range as a fraction of the image size"),
    key("min_scale", "augment", "smallest scale factor"),
    key("max_scale", "augment", "largest scale factor"),
    key("anatomy_channels", "network", "anatomy factor channels"),
    key("n_z", "network", "modality code length"),
    key("anatomy_widths", "network", "anatomy UNet widths per level"),
    key("transformer_widths", "network", "transformer UNet widths above the bottleneck (4 levels)"),
    key("transformer_bottleneck", "network", "transformer bottleneck channels"),
    key("transformer_hidden", "network", "hidden width of the temporal MLP"),
    key("transformer_code_channels", "network", "channels of the temporal code at the bottleneck"),
    key("modality_widths", "network", "modality encoder widths"),
    key("decoder_width", "network", "decoder width"),
    key("segmentor_width", "network", "segmentor width"),
    key("discriminator_widths", "network", "discriminator widths"),
    key("mi_widths", "network", "mutual-information estimator widths"),
    key("leaky_slope", "network", "leaky ReLU slope"),
];

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| parse(key, p)).collect()
}

fn list(v: &[usize]) -> String {
    v.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")
}

/// Canonical key for `name` or its `section.name` alias.
pub fn canonical_key(name: &str) -> Option<&'static str> {
    let name = name.trim();
    CONFIG_KEYS.iter().find_map(|k| {
        let dotted = name
            .split_once('.')
            .is_some_and(|(s, n)| !k.section.is_empty() && s == k.section && n == k.name);
        (name == k.name || dotted).then_some(k.name)
    })
}

impl TrainingConfig {
    /// Desk-scale settings used for CPU experiments on `size x size` phantoms.
    pub fn desk(size: usize) -> Self {
        Self {
            network: NetworkConfig::desk(size),
            ..Self::default()
        }
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let k = canonical_key(key).ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        let (w, n, a) = (&self.weights, &self.network, &self.augment);
        Ok(match k {
            "data_dir" => self.data_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "run_id" => self.run_id.clone(),
            "seed" => self.seed.to_string(),
            "labels_fraction" => self.labels_fraction.to_string(),
            "val_subjects" => self.val_subjects.to_string(),
            "test_subjects" => self.test_subjects.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "max_epochs" => self.max_epochs.to_string(),
            "steps_per_epoch" => self.steps_per_epoch.to_string(),
            "lr_max" => self.lr_max.to_string(),
            "lr_min" => self.lr_min.to_string(),
            "lr_period_epochs" => self.lr_period_epochs.to_string(),
            "ema_decay" => self.ema_decay.to_string(),
            "patience_evals" => self.patience_evals.to_string(),
            "adv_warmup_epochs" => self.adv_warmup_epochs.to_string(),
            "adam_beta1" => self.adam_beta1.to_string(),
            "adam_beta2" => self.adam_beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "parallel" => self.parallel.to_string(),
            "lambda0" => w.lambda0.to_string(),
            "lambda1" => w.lambda1.to_string(),
            "lambda2" => w.lambda2.to_string(),
            "lambda3" => w.lambda3.to_string(),
            "lambda_kl" => w.lambda_kl.to_string(),
            "ce_weight" => w.ce_weight.to_string(),
            "max_rotation_deg" => a.max_rotation_deg.to_string(),
            "max_translation" => a.max_translation.to_string(),
            "min_scale" => a.min_scale.to_string(),
            "max_scale" => a.max_scale.to_string(),
            "anatomy_channels" => n.anatomy_channels.to_string(),
            "n_z" => n.n_z.to_string(),
            "anatomy_widths" => list(&n.anatomy_widths),
            "transformer_widths" => list(&n.transformer_widths),
            "transformer_bottleneck" => n.transformer_bottleneck.to_string(),
            "transformer_hidden" => n.transformer_hidden.to_string(),
            "transformer_code_channels" => n.transformer_code_channels.to_string(),
            "modality_widths" => list(&n.modality_widths),
            "decoder_width" => n.decoder_width.to_string(),
            "segmentor_width" => n.segmentor_width.to_string(),
            "discriminator_widths" => list(&n.discriminator_widths),
            "mi_widths" => list(&n.mi_widths),
            "leaky_slope" => n.leaky_slope.to_string(),
            _ => unreachable!("every listed key is handled"),
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = canonical_key(key).ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        let v = value.trim();
        let (w, n, a) = (&mut self.weights, &mut self.network, &mut self.augment);
        match k {
            "data_dir" => self.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "run_id" => self.run_id = v.to_string(),
            "seed" => self.seed = parse(k, v)?,
            "labels_fraction" => self.labels_fraction = parse(k, v)?,
            "val_subjects" => self.val_subjects = parse(k, v)?,
            "test_subjects" => self.test_subjects = parse(k, v)?,
            "batch_size" => self.batch_size = parse(k, v)?,
            "max_epochs" => self.max_epochs = parse(k, v)?,
            "steps_per_epoch" => self.steps_per_epoch = parse(k, v)?,
            "lr_max" => self.lr_max = parse(k, v)?,
            "lr_min" => self.lr_min = parse(k, v)?,
            "lr_period_epochs" => self.lr_period_epochs = parse(k, v)?,
            "ema_decay" => self.ema_decay = parse(k, v)?,
            "patience_evals" => self.patience_evals = parse(k, v)?,
            "adv_warmup_epochs" => self.adv_warmup_epochs = parse(k, v)?,
            "adam_beta1" => self.adam_beta1 = parse(k, v)?,
            "adam_beta2" => self.adam_beta2 = parse(k, v)?,
            "adam_eps" => self.adam_eps = parse(k, v)?,
            "parallel" => self.parallel = parse(k, v)?,
            "lambda0" => w.lambda0 = parse(k, v)?,
            "lambda1" => w.lambda1 = parse(k, v)?,
            "lambda2" => w.lambda2 = parse(k, v)?,
            "lambda3" => w.lambda3 = parse(k, v)?,
            "lambda_kl" => w.lambda_kl = parse(k, v)?,
            "ce_weight" => w.ce_weight = parse(k, v)?,
            "max_rotation_deg" => a.max_rotation_deg = parse(k, v)?,
            "max_translation" => a.max_translation = parse(k, v)?,
            "min_scale" => a.min_scale = parse(k, v)?,
            "max_scale" => a.max_scale = parse(k, v)?,
            "anatomy_channels" => n.anatomy_channels = parse(k, v)?,
            "n_z" => n.n_z = parse(k, v)?,
            "anatomy_widths" => n.anatomy_widths = parse_list(k, v)?,
            "transformer_widths" => n.transformer_widths = parse_list(k, v)?,
            "transformer_bottleneck" => n.transformer_bottleneck = parse(k, v)?,
            "transformer_hidden" => n.transformer_hidden = parse(k, v)?,
            "transformer_code_channels" => n.transformer_code_channels = parse(k, v)?,
            "modality_widths" => n.modality_widths = parse_list(k, v)?,
            "decoder_width" => n.decoder_width = parse(k, v)?,
            "segmentor_width" => n.segmentor_width = parse(k, v)?,
            "discriminator_widths" => n.discriminator_widths = parse_list(k, v)?,
            "mi_widths" => n.mi_widths = parse_list(k, v)?,
            "leaky_slope" => n.leaky_slope = parse(k, v)?,
            _ => unreachable!("every listed key is handled"),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    /// Later lines override earlier ones.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", i + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Every key with its current value, one `key = value` line each.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in CONFIG_KEYS {
            let _ = writeln!(out, "{} = {}", k.name, self.get(k.name).expect("listed key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr_min > 0.0 && self.lr_min < self.lr_max && self.lr_max.is_finite()) {
            return bad(format!("need 0 < lr_min < lr_max, got {} and {}", self.lr_min, self.lr_max));
        }
        if !(self.lr_period_epochs > 0.0 && self.lr_period_epochs.is_finite()) {
            return bad("lr_period_epochs must be positive".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay));
        }
        if !(self.adv_warmup_epochs >= 0.0 && self.adv_warmup_epochs.is_finite()) {
            return bad(format!("adv_warmup_epochs must be finite and >= 0, got {}", self.adv_warmup_epochs));
        }
        if self.patience_evals == 0 {
            return bad("patience_evals must be at least 1".into());
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive".into());
        }
        if !(self.labels_fraction > 0.0 && self.labels_fraction <= 1.0) {
            return bad(format!("labels_fraction must lie in (0, 1], got {}", self.labels_fraction));
        }
        if self.val_subjects == 0 {
            return bad("early stopping needs at least one validation subject".into());
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2) && self.adam_eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and epsilon must be positive".into());
        }
        self.weights.validate().map_err(Error::Config)?;
        self.augment
            .validate()
            .map_err(|e| Error::Config(strip_prefix(&e)))?;
        self.network.validate()
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) | Error::Parameter(m) => m.clone(),
        other => other.to_string(),
    }
}
