//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default, unknown or repeated keys are errors, and [`ExperimentConfig::to_text`]
//! writes a file that parses back to the same value.

use std::fmt::Write as _;
use std::path::PathBuf;

use m2dan_core::data::{Half, DEFAULT_FRACTION};
use m2dan_core::layers::GrlMode;
use m2dan_core::losses::HyperParams;
use m2dan_core::model::{ExtractorSpec, ModelSpec, ScaleVariant};
use m2dan_core::training::{ClassLoss, Objective};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{0}` given twice")]
    DuplicateKey(String),
    #[error("bad value for `{key}`: {message}")]
    BadValue { key: String, message: String },
    #[error("override `{0}` is not of the form key=value")]
    BadOverride(String),
}

/// Training with the adversarial objective or the classifier-only baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    M2dan,
    SourceOnly,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::M2dan => "m2dan",
            Method::SourceOnly => "source_only",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub alpha: f64,
    pub lambda: f64,
    pub eta: f64,
    pub gamma: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub grl_mode: GrlMode,
    pub grl_ramp_length: Option<u64>,
    pub method: Method,
    pub scale: ScaleVariant,
    pub branch_channels: usize,
    pub extractor_channels: Vec<usize>,
    pub extractor_kernel: usize,
    pub head_hidden: [usize; 2],
    pub class_loss: ClassLoss,
    pub domain_loss: bool,
    pub entropy: bool,
    /// Dataset directory; synthetic data is generated when absent.
    pub data_dir: Option<PathBuf>,
    pub half: Half,
    pub data_seed: u64,
    pub scale_fraction: f64,
    pub image_size: usize,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let hp = HyperParams::default();
        let model = ModelSpec::default();
        let objective = Objective::full();
        Self {
            alpha: hp.alpha,
            lambda: hp.lambda,
            eta: hp.eta,
            gamma: hp.gamma,
            lr: hp.lr,
            epochs: hp.epochs,
            batch_size: hp.batch_size,
            seed: hp.seed,
            grl_mode: hp.grl_mode,
            grl_ramp_length: hp.grl_ramp_length,
            method: Method::M2dan,
            scale: ScaleVariant::Mixed,
            branch_channels: model.scale.branch_channels,
            extractor_channels: model.extractor.channels,
            extractor_kernel: model.extractor.kernel,
            head_hidden: model.head_hidden,
            class_loss: objective.classification,
            domain_loss: objective.domain,
            entropy: objective.entropy,
            data_dir: None,
            half: Half::None,
            data_seed: 42,
            scale_fraction: DEFAULT_FRACTION,
            image_size: 64,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Every accepted key, in echo order.
pub const KEYS: [&str; 25] = [
    "alpha",
    "lambda",
    "eta",
    "gamma",
    "lr",
    "epochs",
    "batch_size",
    "seed",
    "grl_mode",
    "grl_ramp_length",
    "method",
    "scale",
    "branch_channels",
    "extractor_channels",
    "extractor_kernel",
    "head_hidden",
    "class_loss",
    "domain_loss",
    "entropy",
    "data_dir",
    "half",
    "data_seed",
    "scale_fraction",
    "image_size",
    "out_dir",
];

fn bad(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_string(),
        message: message.into(),
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| bad(key, format!("`{v}`: {e}")))
}

fn float(key: &str, v: &str) -> Result<f64, ConfigError> {
    let x: f64 = num(key, v)?;
    if !x.is_finite() {
        return Err(bad(key, "must be finite"));
    }
    Ok(x)
}

fn switch(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(bad(key, format!("`{v}` is not on/off"))),
    }
}

fn list(key: &str, v: &str) -> Result<Vec<usize>, ConfigError> {
    v.split(',').map(|s| num(key, s.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                message: format!("expected `key = value`, found `{line}`"),
            })?;
            let key = key.trim();
            if seen.iter().any(|k| k == key) {
                return Err(ConfigError::DuplicateKey(key.to_string()));
            }
            cfg.set(key, value.trim())?;
            seen.push(key.to_string());
        }
        Ok(cfg)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<(), ConfigError> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| ConfigError::BadOverride(o.to_string()))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        match key {
            "alpha" => self.alpha = float(key, v)?,
            "lambda" => self.lambda = float(key, v)?,
            "eta" => self.eta = float(key, v)?,
            "gamma" => self.gamma = float(key, v)?,
            "lr" => self.lr = float(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "grl_mode" => {
                self.grl_mode = match v {
                    "constant" => GrlMode::Constant,
                    "ramp" => GrlMode::Ramp,
                    _ => return Err(bad(key, format!("`{v}` is not constant/ramp"))),
                }
            }
            "grl_ramp_length" => {
                self.grl_ramp_length = match v {
                    "none" | "" => None,
                    _ => Some(num(key, v)?),
                }
            }
            "method" => {
                self.method = match v {
                    "m2dan" => Method::M2dan,
                    "source_only" => Method::SourceOnly,
                    _ => return Err(bad(key, format!("`{v}` is not m2dan/source_only"))),
                }
            }
            "scale" => {
                self.scale = ScaleVariant::parse(v)
                    .ok_or_else(|| bad(key, format!("`{v}` is not mixed/s1/s3/s5")))?
            }
            "branch_channels" => self.branch_channels = num(key, v)?,
            "extractor_channels" => self.extractor_channels = list(key, v)?,
            "extractor_kernel" => self.extractor_kernel = num(key, v)?,
            "head_hidden" => {
                let h = list(key, v)?;
                self.head_hidden = h
                    .try_into()
                    .map_err(|_| bad(key, "expects exactly two widths"))?;
            }
            "class_loss" => {
                self.class_loss = match v {
                    "ce" => ClassLoss::CrossEntropy,
                    "focal" => ClassLoss::Focal,
                    _ => return Err(bad(key, format!("`{v}` is not ce/focal"))),
                }
            }
            "domain_loss" => self.domain_loss = switch(key, v)?,
            "entropy" => self.entropy = switch(key, v)?,
            "data_dir" => self.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "half" => {
                self.half =
                    Half::parse(v).ok_or_else(|| bad(key, format!("`{v}` is not none/left/right/both")))?
            }
            "data_seed" => self.data_seed = num(key, v)?,
            "scale_fraction" => {
                let f = float(key, v)?;
                if !(f > 0.0 && f <= 1.0) {
                    return Err(bad(key, "must lie in (0, 1]"));
                }
                self.scale_fraction = f;
            }
            "image_size" => self.image_size = num(key, v)?,
            "out_dir" => {
                if v.is_empty() {
                    return Err(bad(key, "must not be empty"));
                }
                self.out_dir = PathBuf::from(v);
            }
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// The effective configuration as a config file.
    pub fn to_text(&self) -> String {
        let onoff = |b: bool| if b { "on" } else { "off" };
        let mut out = String::new();
        for key in KEYS {
            let value = match key {
                "alpha" => self.alpha.to_string(),
                "lambda" => self.lambda.to_string(),
                "eta" => self.eta.to_string(),
                "gamma" => self.gamma.to_string(),
                "lr" => self.lr.to_string(),
                "epochs" => self.epochs.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "seed" => self.seed.to_string(),
                "grl_mode" => match self.grl_mode {
                    GrlMode::Constant => "constant".into(),
                    GrlMode::Ramp => "ramp".into(),
                },
                "grl_ramp_length" => self.grl_ramp_length.map_or("none".into(), |n| n.to_string()),
                "method" => self.method.name().into(),
                "scale" => self.scale.name().into(),
                "branch_channels" => self.branch_channels.to_string(),
                "extractor_channels" => join(&self.extractor_channels),
                "extractor_kernel" => self.extractor_kernel.to_string(),
                "head_hidden" => join(&self.head_hidden),
                "class_loss" => match self.class_loss {
                    ClassLoss::CrossEntropy => "ce".into(),
                    ClassLoss::Focal => "focal".into(),
                },
                "domain_loss" => onoff(self.domain_loss).into(),
                "entropy" => onoff(self.entropy).into(),
                "data_dir" => self
                    .data_dir
                    .as_ref()
                    .map_or(String::new(), |p| p.display().to_string()),
                "half" => self.half.name().into(),
                "data_seed" => self.data_seed.to_string(),
                "scale_fraction" => self.scale_fraction.to_string(),
                "image_size" => self.image_size.to_string(),
                "out_dir" => self.out_dir.display().to_string(),
                _ => unreachable!("every key is listed"),
            };
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    pub fn hyper_params(&self) -> HyperParams {
        HyperParams {
            alpha: self.alpha,
            lambda: self.lambda,
            eta: self.eta,
            gamma: self.gamma,
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            grl_mode: self.grl_mode,
            grl_ramp_length: self.grl_ramp_length,
        }
    }

    pub fn objective(&self) -> Objective {
        Objective {
            classification: self.class_loss,
            domain: self.domain_loss,
            entropy: self.entropy,
        }
    }

    pub fn model_spec(&self, num_domains: usize) -> ModelSpec {
        ModelSpec {
            scale: self.scale.spec(self.branch_channels),
            extractor: ExtractorSpec {
                in_channels: 1,
                channels: self.extractor_channels.clone(),
                kernel: self.extractor_kernel,
            },
            head_hidden: self.head_hidden,
            num_classes: 2,
            num_domains,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_reference_weights() {
        let c = ExperimentConfig::default();
        assert_eq!((c.lambda, c.eta, c.alpha, c.gamma), (1.0, 0.1, 0.03, 2.0));
        assert_eq!(c.lr, 0.001);
        assert_eq!(c.scale, ScaleVariant::Mixed);
    }

    #[test]
    fn echo_round_trips() {
        let mut c = ExperimentConfig::default();
        c.apply_overrides(&["alpha=0", "data_dir = some/dir", "half=left", "entropy=off", "head_hidden=5,7"])
            .unwrap();
        let back = ExperimentConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), c.to_text());
        assert_eq!(ExperimentConfig::parse(&ExperimentConfig::default().to_text()).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let c = ExperimentConfig::parse("# run\n\n  eta = 1 \nscale=s3\n").unwrap();
        assert_eq!(c.eta, 1.0);
        assert_eq!(c.scale, ScaleVariant::S3);
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(
            ExperimentConfig::parse("learning_rate = 1"),
            Err(ConfigError::UnknownKey("learning_rate".into()))
        );
        assert_eq!(
            ExperimentConfig::parse("eta = 1\neta = 2"),
            Err(ConfigError::DuplicateKey("eta".into()))
        );
        assert!(matches!(ExperimentConfig::parse("eta"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(ExperimentConfig::parse("eta = x"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(ExperimentConfig::parse("alpha = NaN"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(ExperimentConfig::parse("scale = s7"), Err(ConfigError::BadValue { .. })));
        let mut c = ExperimentConfig::default();
        assert_eq!(c.apply_overrides(&["alpha"]), Err(ConfigError::BadOverride("alpha".into())));
    }

    #[test]
    fn later_overrides_win() {
        let mut c = ExperimentConfig::default();
        c.apply_overrides(&["alpha=0.3", "alpha=0"]).unwrap();
        assert_eq!(c.alpha, 0.0);
    }
}
