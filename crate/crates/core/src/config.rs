//! Run configuration: a line-oriented `key = value` file with `[section]`
//! headers. Every known key has a default, so an empty file is a complete
//! configuration and the fully resolved form can be echoed into manifests.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use ini::Ini;

use crate::denoiser::ArchConfig;
use crate::embed::TsneConfig;
use crate::error::{Error, Result};
use crate::metrics::EncoderConfig;
use crate::numerics::tns::DType;
use crate::phantom::{DatasetConfig, NUM_CLASSES};
use crate::sampler::{Method, SamplerConfig};
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::segcheck::SegConfig;
use crate::trainer::optim::StatePrecision;
use crate::trainer::TrainConfig;

/// Sections that manifests add around the config echo; ignored on parse.
pub const MANIFEST_SECTIONS: [&str; 3] = ["manifest", "inputs", "outputs"];

/// `(section, key, default)` for every recognised setting, in echo order.
pub const DEFAULTS: &[(&str, &str, &str)] = &[
    ("run", "seed", "0"),
    ("run", "precision", "fp32"),
    ("data", "total", "200"),
    ("data", "size", "64"),
    ("data", "min_per_class", "20"),
    ("schedule", "kind", "scaled"),
    ("schedule", "steps", "1000"),
    ("schedule", "beta_start", "0.00085"),
    ("schedule", "beta_end", "0.012"),
    ("model", "width", "8"),
    ("model", "hidden", "128"),
    ("model", "time_dim", "32"),
    ("model", "embed_dim", "16"),
    ("model", "grid", "16"),
    ("model", "lora_rank", "4"),
    ("model", "lora_alpha", "4"),
    ("train", "epochs", "10"),
    ("train", "batch_size", "4"),
    ("train", "lr", "0.002"),
    ("train", "draws_per_sample", "8"),
    ("train", "optimizer_state", "q8"),
    ("train", "cond_dropout", "0.1"),
    ("train", "clip_norm", "1"),
    ("train", "balance_classes", "true"),
    ("train", "cosine_decay", "true"),
    ("finetune", "subject_class", "3"),
    ("finetune", "epochs", "10"),
    ("finetune", "batch_size", "4"),
    ("finetune", "lr", "0.002"),
    ("finetune", "draws_per_sample", "4"),
    ("finetune", "prior_lambda", "1"),
    ("finetune", "prior_per_class", "8"),
    ("finetune", "prior_steps", "26"),
    ("finetune", "prior_guidance", "4"),
    ("sample", "method", "euler"),
    ("sample", "steps", "20"),
    ("sample", "guidance", "4"),
    ("sample", "class", "all"),
    ("sample", "neg_class", "0"),
    ("sample", "per_class", "100"),
    ("sample", "adapter", "auto"),
    ("evaluate", "n_fid", "250"),
    ("evaluate", "msssim_pairs", "100"),
    ("evaluate", "encoder_epochs", "12"),
    ("evaluate", "encoder_lr", "0.01"),
    ("embed", "perplexity", "30"),
    ("embed", "iterations", "500"),
    ("embed", "per_class", "20"),
    ("segcheck", "epochs", "8"),
    ("segcheck", "batch_size", "8"),
    ("segcheck", "lr", "0.005"),
    ("segcheck", "overlays", "4"),
];

/// When adapters exist, `Auto` applies them only to the fine-tune subject class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterUse {
    Auto,
    On,
    Off,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<(String, String), String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let values = DEFAULTS
            .iter()
            .map(|&(s, k, v)| ((s.to_string(), k.to_string()), v.to_string()))
            .collect();
        Self { values }
    }
}

fn config_err(reason: impl Into<String>) -> Error {
    Error::Config { line: 0, reason: reason.into() }
}

fn known(section: &str, key: &str) -> bool {
    DEFAULTS.iter().any(|&(s, k, _)| s == section && k == key)
}

/// Line of the first occurrence of `section.key` in `text`, for diagnostics.
fn line_of(text: &str, section: &str, key: &str) -> usize {
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let l = raw.trim();
        if let Some(s) = l.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            current = s.trim().to_string();
        } else if current == section && l.split('=').next().map(str::trim) == Some(key) {
            return i + 1;
        }
    }
    0
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config {
            line: e.line,
            reason: e.msg.to_string(),
        })?;
        let mut cfg = Self::default();
        for (section, props) in ini.iter() {
            let section = section.unwrap_or("");
            if MANIFEST_SECTIONS.contains(&section) {
                continue;
            }
            for (key, value) in props.iter() {
                if !known(section, key) {
                    return Err(Error::Config {
                        line: line_of(text, section, key),
                        reason: format!("unknown setting `{key}` in section [{section}]"),
                    });
                }
                cfg.values.insert((section.to_string(), key.to_string()), value.trim().to_string());
            }
        }
        cfg.validate().map_err(|e| match e {
            Error::Config { line: 0, reason } => {
                let line = cfg
                    .values
                    .keys()
                    .find(|(s, k)| reason.starts_with(&format!("{s}.{k}")))
                    .map(|(s, k)| line_of(text, s, k))
                    .unwrap_or(0);
                Error::Config { line, reason }
            }
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Overrides one setting, validating the result.
    pub fn set(&mut self, section: &str, key: &str, value: impl ToString) -> Result<()> {
        if !known(section, key) {
            return Err(config_err(format!("unknown setting {section}.{key}")));
        }
        let old = self.values.insert((section.into(), key.into()), value.to_string());
        if let Err(e) = self.validate() {
            self.values.insert((section.into(), key.into()), old.unwrap_or_default());
            return Err(e);
        }
        Ok(())
    }

    pub fn raw(&self, section: &str, key: &str) -> &str {
        self.values
            .get(&(section.to_string(), key.to_string()))
            .map(String::as_str)
            .unwrap_or_else(|| panic!("setting {section}.{key} is not declared"))
    }

    fn get<T: FromStr>(&self, section: &str, key: &str) -> Result<T> {
        let raw = self.raw(section, key);
        raw.parse()
            .map_err(|_| config_err(format!("{section}.{key}: cannot parse `{raw}`")))
    }

    /// Resolved configuration in canonical order, one `[section]` block each.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for &(s, k, _) in DEFAULTS {
            if s != section {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{s}]\n"));
                section = s;
            }
            out.push_str(&format!("{k} = {}\n", self.raw(s, k)));
        }
        out
    }

    /// Builds every typed view once, surfacing the first bad value.
    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        self.precision()?;
        self.dataset()?;
        self.schedule()?;
        self.arch()?;
        self.train()?.validate().map_err(|e| config_err(format!("train: {e}")))?;
        self.finetune()?.validate().map_err(|e| config_err(format!("finetune: {e}")))?;
        self.sampler(1)?;
        self.sample_classes()?;
        self.sample_count()?;
        self.adapter_use()?;
        self.encoder()?;
        self.eval_sizes()?;
        self.tsne()?;
        self.embed_per_class()?;
        self.segcheck()?;
        self.overlays()?;
        Ok(())
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("run", "seed")
    }

    pub fn precision(&self) -> Result<DType> {
        let raw = self.raw("run", "precision");
        DType::parse(raw).ok_or_else(|| config_err(format!("run.precision: expected fp32, fp64 or fp16-store, got `{raw}`")))
    }

    pub fn dataset(&self) -> Result<DatasetConfig> {
        Ok(DatasetConfig {
            total: self.get("data", "total")?,
            seed: self.seed()?,
            size: self.get("data", "size")?,
            min_per_class: self.get("data", "min_per_class")?,
            ..DatasetConfig::default()
        })
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let raw = self.raw("schedule", "kind");
        let kind = ScheduleKind::parse(raw).ok_or_else(|| config_err(format!("schedule.kind: unknown `{raw}`")))?;
        NoiseSchedule::new(kind, self.get("schedule", "steps")?, self.get("schedule", "beta_start")?, self.get("schedule", "beta_end")?)
            .map_err(|e| config_err(format!("schedule.kind: {e}")))
    }

    pub fn arch(&self) -> Result<ArchConfig> {
        Ok(ArchConfig {
            width: self.get("model", "width")?,
            hidden: self.get("model", "hidden")?,
            time_dim: self.get("model", "time_dim")?,
            embed_dim: self.get("model", "embed_dim")?,
            grid: self.get("model", "grid")?,
            lora_rank: self.get("model", "lora_rank")?,
            lora_alpha: self.get("model", "lora_alpha")?,
        })
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let raw = self.raw("train", "optimizer_state");
        let precision =
            StatePrecision::parse(raw).ok_or_else(|| config_err(format!("train.optimizer_state: expected fp32 or q8, got `{raw}`")))?;
        Ok(TrainConfig {
            epochs: self.get("train", "epochs")?,
            batch_size: self.get("train", "batch_size")?,
            lr: self.get("train", "lr")?,
            precision,
            lora: false,
            cond_dropout: self.get("train", "cond_dropout")?,
            seed: self.seed()?,
            clip_norm: self.get("train", "clip_norm")?,
            draws_per_sample: self.get("train", "draws_per_sample")?,
            balance_classes: self.get("train", "balance_classes")?,
            cosine_decay: self.get("train", "cosine_decay")?,
            ..TrainConfig::default()
        })
    }

    pub fn finetune(&self) -> Result<TrainConfig> {
        let subject: u8 = self.get("finetune", "subject_class")?;
        crate::phantom::check_class(subject).map_err(|_| config_err("finetune.subject_class: expected 1..5"))?;
        Ok(TrainConfig {
            epochs: self.get("finetune", "epochs")?,
            batch_size: self.get("finetune", "batch_size")?,
            lr: self.get("finetune", "lr")?,
            lora: true,
            prior_lambda: self.get("finetune", "prior_lambda")?,
            draws_per_sample: self.get("finetune", "draws_per_sample")?,
            subject_class: subject,
            prior_per_class: self.get("finetune", "prior_per_class")?,
            prior_steps: self.get("finetune", "prior_steps")?,
            prior_guidance: self.get("finetune", "prior_guidance")?,
            balance_classes: false,
            ..self.train()?
        })
    }

    /// Sampler settings for one class; the per-sample stream is set by the caller.
    pub fn sampler(&self, class_id: u8) -> Result<SamplerConfig> {
        crate::phantom::check_class(class_id).map_err(|_| config_err(format!("sample class {class_id} outside 1..5")))?;
        let raw = self.raw("sample", "method");
        let method = Method::parse(raw).ok_or_else(|| config_err(format!("sample.method: expected ddpm, euler or euler_a, got `{raw}`")))?;
        let neg: usize = self.get("sample", "neg_class")?;
        if neg > NUM_CLASSES {
            return Err(config_err(format!("sample.neg_class: {neg} outside 0..=5")));
        }
        let size: usize = self.get("data", "size")?;
        let cfg = SamplerConfig {
            method,
            steps: self.get("sample", "steps")?,
            guidance: self.get("sample", "guidance")?,
            pos_token: class_id as usize,
            neg_token: neg,
            seed: self.seed()?,
            stream: class_id as u64 * 1_000_000,
            height: size,
            width: size,
        };
        cfg.validate(&self.schedule()?).map_err(|e| config_err(format!("sample.steps: {e}")))?;
        Ok(cfg)
    }

    /// Classes to sample: `all` or a single class id.
    pub fn sample_classes(&self) -> Result<Vec<u8>> {
        match self.raw("sample", "class") {
            "all" => Ok((1..=NUM_CLASSES as u8).collect()),
            raw => {
                let c: u8 = raw.parse().map_err(|_| config_err(format!("sample.class: expected all or 1..5, got `{raw}`")))?;
                crate::phantom::check_class(c).map_err(|_| config_err(format!("sample.class: {c} outside 1..5")))?;
                Ok(vec![c])
            }
        }
    }

    pub fn sample_count(&self) -> Result<usize> {
        let n: usize = self.get("sample", "per_class")?;
        if n == 0 {
            return Err(config_err("sample.per_class must be ≥ 1"));
        }
        Ok(n)
    }

    pub fn adapter_use(&self) -> Result<AdapterUse> {
        match self.raw("sample", "adapter") {
            "auto" => Ok(AdapterUse::Auto),
            "on" => Ok(AdapterUse::On),
            "off" => Ok(AdapterUse::Off),
            raw => Err(config_err(format!("sample.adapter: expected auto, on or off, got `{raw}`"))),
        }
    }

    pub fn encoder(&self) -> Result<EncoderConfig> {
        Ok(EncoderConfig {
            epochs: self.get("evaluate", "encoder_epochs")?,
            lr: self.get("evaluate", "encoder_lr")?,
            seed: self.seed()?,
            ..EncoderConfig::default()
        })
    }

    /// `(n_fid, msssim_pairs)`.
    pub fn eval_sizes(&self) -> Result<(usize, usize)> {
        let n: usize = self.get("evaluate", "n_fid")?;
        let pairs: usize = self.get("evaluate", "msssim_pairs")?;
        if n < 2 || pairs == 0 {
            return Err(config_err("evaluate.n_fid must be ≥ 2 and msssim_pairs ≥ 1"));
        }
        Ok((n, pairs))
    }

    pub fn tsne(&self) -> Result<TsneConfig> {
        Ok(TsneConfig {
            perplexity: self.get("embed", "perplexity")?,
            iterations: self.get("embed", "iterations")?,
            seed: self.seed()?,
            ..TsneConfig::default()
        })
    }

    pub fn embed_per_class(&self) -> Result<usize> {
        let n: usize = self.get("embed", "per_class")?;
        if n == 0 {
            return Err(config_err("embed.per_class must be ≥ 1"));
        }
        Ok(n)
    }

    pub fn segcheck(&self) -> Result<SegConfig> {
        Ok(SegConfig {
            epochs: self.get("segcheck", "epochs")?,
            batch_size: self.get("segcheck", "batch_size")?,
            lr: self.get("segcheck", "lr")?,
            seed: self.seed()?,
        })
    }

    pub fn overlays(&self) -> Result<usize> {
        self.get("segcheck", "overlays")
    }
}
