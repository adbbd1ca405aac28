//! Flat key=value run configuration. Every key is documented, unknown keys
//! are errors, and the serialized form round-trips losslessly so a config
//! echoed into a run artifact can reproduce the run.

use crate::error::{BeraError, Result};
use crate::fbl::{EpsilonSpec, ThresholdSpec};
use crate::mae::LossMode;
use crate::testbed::TriggerType;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EpsilonSetting {
    Auto,
    Fixed(f64),
}

impl EpsilonSetting {
    pub fn to_spec(self) -> EpsilonSpec {
        match self {
            EpsilonSetting::Auto => EpsilonSpec::Auto,
            EpsilonSetting::Fixed(v) => EpsilonSpec::Fixed(v),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdSetting {
    Auto,
    Analytic,
    Empirical,
}

impl ThresholdSetting {
    pub fn to_spec(self) -> ThresholdSpec {
        match self {
            ThresholdSetting::Auto => ThresholdSpec::Auto,
            ThresholdSetting::Analytic => ThresholdSpec::Analytic,
            ThresholdSetting::Empirical => ThresholdSpec::Empirical,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CalibrationScope {
    PerTask,
    Pooled,
}

/// Ablation switch for the anomaly stage: `RandomTenth` replaces flagged
/// tokens with a random 10% draw (matching the trigger proportion).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FblMode {
    On,
    RandomTenth,
}

/// Ablation switch for the saliency filter: `Off` swaps the aggregated
/// cluster for the same random 10% baseline, so anomalies intersect an
/// uninformed filter instead of the attention-derived one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AfmMode {
    On,
    Off,
}

/// Ablation switch for reconstruction: `ZeroFill` blanks the masked patches
/// instead of decoding them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderMode {
    On,
    ZeroFill,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossModeSetting {
    FullImage,
    MaskedOnly,
}

impl LossModeSetting {
    pub fn to_mode(self) -> LossMode {
        match self {
            LossModeSetting::FullImage => LossMode::FullImage,
            LossModeSetting::MaskedOnly => LossMode::MaskedOnly,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub tasks: Vec<usize>,
    pub episodes: usize,
    pub poison_rate: f64,
    pub trigger_types: Vec<TriggerType>,
    pub trigger_fraction: f64,
    pub theta: f64,
    pub alpha: f64,
    pub epsilon: EpsilonSetting,
    pub threshold_mode: ThresholdSetting,
    pub reference_fraction: f64,
    pub calibration_scope: CalibrationScope,
    pub l_mid: usize,
    pub clusters: usize,
    pub em_tol: f64,
    pub em_max_iter: usize,
    pub patch: usize,
    pub decoder_dim: usize,
    pub train_steps: usize,
    pub train_batch: usize,
    pub learning_rate: f64,
    pub mask_lo: f64,
    pub mask_hi: f64,
    pub loss_mode: LossModeSetting,
    pub ablation_fbl: FblMode,
    pub ablation_afm: AfmMode,
    pub ablation_decoder: DecoderMode,
    pub sweep_fractions: Vec<f64>,
    pub sweep_rates: Vec<f64>,
    pub sweep_types: Vec<TriggerType>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0x42,
            tasks: vec![0],
            episodes: 100,
            poison_rate: 0.3,
            trigger_types: vec![TriggerType::Checkerboard],
            trigger_fraction: 0.10,
            theta: 0.1,
            alpha: 0.05,
            epsilon: EpsilonSetting::Auto,
            threshold_mode: ThresholdSetting::Auto,
            reference_fraction: 0.2,
            calibration_scope: CalibrationScope::PerTask,
            l_mid: 2,
            clusters: 6,
            em_tol: 1e-6,
            em_max_iter: 200,
            patch: 8,
            decoder_dim: 64,
            train_steps: 200,
            train_batch: 8,
            learning_rate: 1e-3,
            mask_lo: 0.05,
            mask_hi: 0.25,
            loss_mode: LossModeSetting::FullImage,
            ablation_fbl: FblMode::On,
            ablation_afm: AfmMode::On,
            ablation_decoder: DecoderMode::On,
            sweep_fractions: vec![0.05, 0.10, 0.15, 0.20],
            sweep_rates: vec![0.10, 0.20, 0.30],
            sweep_types: TriggerType::ALL.to_vec(),
        }
    }
}

fn parse_scalar<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| BeraError::Config(format!("bad value '{}' for key {}", v, key)))
}

fn parse_list<T, F: Fn(&str) -> Result<T>>(key: &str, v: &str, f: F) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Err(BeraError::Config(format!("empty list for key {}", key)));
    }
    v.split(',').map(|item| f(item.trim())).collect()
}

fn fmt_f64_list(vs: &[f64]) -> String {
    vs.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl PipelineConfig {
    pub fn parse_str(text: &str) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::default();
        let mut seen = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                BeraError::Config(format!("line {}: expected key=value, got '{}'", ln + 1, line))
            })?;
            let key = key.trim();
            let value = value.trim();
            if seen.contains(&key.to_string()) {
                return Err(BeraError::Config(format!("duplicate key {}", key)));
            }
            seen.push(key.to_string());
            cfg.apply(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text)
    }

    fn apply(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_scalar(key, v)?,
            "tasks" => self.tasks = parse_list(key, v, |s| parse_scalar(key, s))?,
            "episodes" => self.episodes = parse_scalar(key, v)?,
            "poison_rate" => self.poison_rate = parse_scalar(key, v)?,
            "trigger_types" => {
                self.trigger_types = parse_list(key, v, TriggerType::from_name)?
            }
            "trigger_fraction" => self.trigger_fraction = parse_scalar(key, v)?,
            "theta" => self.theta = parse_scalar(key, v)?,
            "alpha" => self.alpha = parse_scalar(key, v)?,
            "epsilon" => {
                self.epsilon = if v == "auto" {
                    EpsilonSetting::Auto
                } else {
                    EpsilonSetting::Fixed(parse_scalar(key, v)?)
                }
            }
            "threshold_mode" => {
                self.threshold_mode = match v {
                    "auto" => ThresholdSetting::Auto,
                    "analytic" => ThresholdSetting::Analytic,
                    "empirical" => ThresholdSetting::Empirical,
                    _ => {
                        return Err(BeraError::Config(format!(
                            "threshold_mode must be auto|analytic|empirical, got '{}'",
                            v
                        )))
                    }
                }
            }
            "reference_fraction" => self.reference_fraction = parse_scalar(key, v)?,
            "calibration_scope" => {
                self.calibration_scope = match v {
                    "per-task" => CalibrationScope::PerTask,
                    "pooled" => CalibrationScope::Pooled,
                    _ => {
                        return Err(BeraError::Config(format!(
                            "calibration_scope must be per-task|pooled, got '{}'",
                            v
                        )))
                    }
                }
            }
            "l_mid" => self.l_mid = parse_scalar(key, v)?,
            "clusters" => self.clusters = parse_scalar(key, v)?,
            "em_tol" => self.em_tol = parse_scalar(key, v)?,
            "em_max_iter" => self.em_max_iter = parse_scalar(key, v)?,
            "patch" => self.patch = parse_scalar(key, v)?,
            "decoder_dim" => self.decoder_dim = parse_scalar(key, v)?,
            "train_steps" => self.train_steps = parse_scalar(key, v)?,
            "train_batch" => self.train_batch = parse_scalar(key, v)?,
            "learning_rate" => self.learning_rate = parse_scalar(key, v)?,
            "mask_lo" => self.mask_lo = parse_scalar(key, v)?,
            "mask_hi" => self.mask_hi = parse_scalar(key, v)?,
            "loss_mode" => {
                self.loss_mode = match v {
                    "full-image" => LossModeSetting::FullImage,
                    "masked-only" => LossModeSetting::MaskedOnly,
                    _ => {
                        return Err(BeraError::Config(format!(
                            "loss_mode must be full-image|masked-only, got '{}'",
                            v
                        )))
                    }
                }
            }
            "ablation_fbl" => {
                self.ablation_fbl = match v {
                    "on" => FblMode::On,
                    "random-10%" => FblMode::RandomTenth,
                    _ => {
                        return Err(BeraError::Config(format!(
                            "ablation_fbl must be on|random-10%, got '{}'",
                            v
                        )))
                    }
                }
            }
            "ablation_afm" => {
                self.ablation_afm = match v {
                    "on" => AfmMode::On,
                    "off" => AfmMode::Off,
                    _ => {
                        return Err(BeraError::Config(format!(
                            "ablation_afm must be on|off, got '{}'",
                            v
                        )))
                    }
                }
            }
            "ablation_decoder" => {
                self.ablation_decoder = match v {
                    "on" => DecoderMode::On,
                    "zero-fill" => DecoderMode::ZeroFill,
                    _ => {
                        return Err(BeraError::Config(format!(
                            "ablation_decoder must be on|zero-fill, got '{}'",
                            v
                        )))
                    }
                }
            }
            "sweep_fractions" => {
                self.sweep_fractions = parse_list(key, v, |s| parse_scalar(key, s))?
            }
            "sweep_rates" => self.sweep_rates = parse_list(key, v, |s| parse_scalar(key, s))?,
            "sweep_types" => self.sweep_types = parse_list(key, v, TriggerType::from_name)?,
            other => return Err(BeraError::Config(format!("unknown key '{}'", other))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(BeraError::Config(m));
        if self.tasks.is_empty() {
            return cfg_err("tasks must be nonempty".into());
        }
        if self.episodes == 0 {
            return cfg_err("episodes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.poison_rate) {
            return cfg_err(format!("poison_rate {} outside [0, 1)", self.poison_rate));
        }
        if !(0.0 < self.alpha && self.alpha < 1.0) {
            return cfg_err(format!("alpha {} outside (0, 1)", self.alpha));
        }
        if let EpsilonSetting::Fixed(e) = self.epsilon {
            if !(e > 0.0) {
                return cfg_err(format!("epsilon {} must be positive", e));
            }
        }
        if !(0.0 < self.reference_fraction && self.reference_fraction <= 1.0) {
            return cfg_err(format!(
                "reference_fraction {} outside (0, 1]",
                self.reference_fraction
            ));
        }
        if !(self.theta > 0.0) {
            return cfg_err(format!("theta {} must be positive", self.theta));
        }
        if self.l_mid >= 6 {
            return cfg_err(format!("l_mid {} outside the 6-layer encoder", self.l_mid));
        }
        if self.clusters < 2 {
            return cfg_err("clusters must be at least 2".into());
        }
        if !(self.em_tol > 0.0) || self.em_max_iter == 0 {
            return cfg_err("EM settings must be positive".into());
        }
        if self.patch == 0 || 64 % self.patch != 0 {
            return cfg_err(format!("patch {} must divide the 64-pixel canvas", self.patch));
        }
        if self.decoder_dim == 0 {
            return cfg_err("decoder_dim must be positive".into());
        }
        if self.train_batch == 0 {
            return cfg_err("train_batch must be positive".into());
        }
        if !(self.learning_rate >= 0.0) {
            return cfg_err(format!("learning_rate {} must be >= 0", self.learning_rate));
        }
        if !(0.0 < self.mask_lo && self.mask_lo <= self.mask_hi && self.mask_hi < 1.0) {
            return cfg_err(format!(
                "mask range [{}, {}] invalid",
                self.mask_lo, self.mask_hi
            ));
        }
        for &f in std::iter::once(&self.trigger_fraction).chain(&self.sweep_fractions) {
            if !crate::testbed::ALLOWED_FRACTIONS
                .iter()
                .any(|a| (a - f).abs() < 1e-9)
            {
                return cfg_err(format!(
                    "trigger fraction {} not in {:?}",
                    f,
                    crate::testbed::ALLOWED_FRACTIONS
                ));
            }
        }
        for &r in &self.sweep_rates {
            if !(0.0..1.0).contains(&r) {
                return cfg_err(format!("sweep rate {} outside [0, 1)", r));
            }
        }
        if self.trigger_types.is_empty() || self.sweep_types.is_empty() {
            return cfg_err("trigger type lists must be nonempty".into());
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string())?;
        Ok(())
    }
}

impl fmt::Display for PipelineConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(
            f,
            "tasks = {}",
            self.tasks
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(",")
        )?;
        writeln!(f, "episodes = {}", self.episodes)?;
        writeln!(f, "poison_rate = {}", self.poison_rate)?;
        writeln!(
            f,
            "trigger_types = {}",
            self.trigger_types
                .iter()
                .map(|t| t.as_str())
                .collect::<Vec<_>>()
                .join(",")
        )?;
        writeln!(f, "trigger_fraction = {}", self.trigger_fraction)?;
        writeln!(f, "theta = {}", self.theta)?;
        writeln!(f, "alpha = {}", self.alpha)?;
        match self.epsilon {
            EpsilonSetting::Auto => writeln!(f, "epsilon = auto")?,
            EpsilonSetting::Fixed(e) => writeln!(f, "epsilon = {}", e)?,
        }
        let tm = match self.threshold_mode {
            ThresholdSetting::Auto => "auto",
            ThresholdSetting::Analytic => "analytic",
            ThresholdSetting::Empirical => "empirical",
        };
        writeln!(f, "threshold_mode = {}", tm)?;
        writeln!(f, "reference_fraction = {}", self.reference_fraction)?;
        let scope = match self.calibration_scope {
            CalibrationScope::PerTask => "per-task",
            CalibrationScope::Pooled => "pooled",
        };
        writeln!(f, "calibration_scope = {}", scope)?;
        writeln!(f, "l_mid = {}", self.l_mid)?;
        writeln!(f, "clusters = {}", self.clusters)?;
        writeln!(f, "em_tol = {}", self.em_tol)?;
        writeln!(f, "em_max_iter = {}", self.em_max_iter)?;
        writeln!(f, "patch = {}", self.patch)?;
        writeln!(f, "decoder_dim = {}", self.decoder_dim)?;
        writeln!(f, "train_steps = {}", self.train_steps)?;
        writeln!(f, "train_batch = {}", self.train_batch)?;
        writeln!(f, "learning_rate = {}", self.learning_rate)?;
        writeln!(f, "mask_lo = {}", self.mask_lo)?;
        writeln!(f, "mask_hi = {}", self.mask_hi)?;
        let lm = match self.loss_mode {
            LossModeSetting::FullImage => "full-image",
            LossModeSetting::MaskedOnly => "masked-only",
        };
        writeln!(f, "loss_mode = {}", lm)?;
        let fbl = match self.ablation_fbl {
            FblMode::On => "on",
            FblMode::RandomTenth => "random-10%",
        };
        writeln!(f, "ablation_fbl = {}", fbl)?;
        let afm = match self.ablation_afm {
            AfmMode::On => "on",
            AfmMode::Off => "off",
        };
        writeln!(f, "ablation_afm = {}", afm)?;
        let dec = match self.ablation_decoder {
            DecoderMode::On => "on",
            DecoderMode::ZeroFill => "zero-fill",
        };
        writeln!(f, "ablation_decoder = {}", dec)?;
        writeln!(f, "sweep_fractions = {}", fmt_f64_list(&self.sweep_fractions))?;
        writeln!(f, "sweep_rates = {}", fmt_f64_list(&self.sweep_rates))?;
        writeln!(
            f,
            "sweep_types = {}",
            self.sweep_types
                .iter()
                .map(|t| t.as_str())
                .collect::<Vec<_>>()
                .join(",")
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_roundtrips() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_string();
        let back = PipelineConfig::parse_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(text, back.to_string());
    }

    #[test]
    fn partial_file_overrides_defaults() {
        let cfg = PipelineConfig::parse_str(
            "# comment\nseed = 7\n\nalpha = 0.01\ntrigger_types = red-cap-disc,checkerboard\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.alpha, 0.01);
        assert_eq!(
            cfg.trigger_types,
            vec![TriggerType::RedCapDisc, TriggerType::Checkerboard]
        );
        assert_eq!(cfg.episodes, 100);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = PipelineConfig::parse_str("alhpa = 0.05\n").unwrap_err();
        assert!(matches!(err, BeraError::Config(_)));
        assert!(err.to_string().contains("alhpa"));
    }

    #[test]
    fn duplicate_key_is_an_error() {
        assert!(PipelineConfig::parse_str("seed = 1\nseed = 2\n").is_err());
    }

    #[test]
    fn malformed_lines_and_values_rejected() {
        assert!(PipelineConfig::parse_str("seed\n").is_err());
        assert!(PipelineConfig::parse_str("seed = banana\n").is_err());
        assert!(PipelineConfig::parse_str("loss_mode = sometimes\n").is_err());
        assert!(PipelineConfig::parse_str("trigger_types = \n").is_err());
    }

    #[test]
    fn validation_bounds() {
        for bad in [
            "alpha = 1.5",
            "poison_rate = 1.0",
            "episodes = 0",
            "mask_lo = 0.5\nmask_hi = 0.3",
            "trigger_fraction = 0.12",
            "patch = 7",
            "l_mid = 6",
            "tasks = ,",
        ] {
            assert!(
                PipelineConfig::parse_str(bad).is_err(),
                "accepted: {}",
                bad
            );
        }
    }

    #[test]
    fn ablation_switch_values() {
        let cfg = PipelineConfig::parse_str(
            "ablation_fbl = random-10%\nablation_afm = off\nablation_decoder = zero-fill\n",
        )
        .unwrap();
        assert_eq!(cfg.ablation_fbl, FblMode::RandomTenth);
        assert_eq!(cfg.ablation_afm, AfmMode::Off);
        assert_eq!(cfg.ablation_decoder, DecoderMode::ZeroFill);
        let text = cfg.to_string();
        assert!(text.contains("ablation_fbl = random-10%"));
        assert_eq!(PipelineConfig::parse_str(&text).unwrap(), cfg);
    }

    #[test]
    fn epsilon_fixed_roundtrip() {
        let cfg = PipelineConfig::parse_str("epsilon = 0.125\n").unwrap();
        assert_eq!(cfg.epsilon, EpsilonSetting::Fixed(0.125));
        let back = PipelineConfig::parse_str(&cfg.to_string()).unwrap();
        assert_eq!(back.epsilon, EpsilonSetting::Fixed(0.125));
    }
}
