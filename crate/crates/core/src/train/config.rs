use crate::error::{Error, Result};
use crate::losses::{AdversarialMode, Distance, LossMode, LossWeights, Objective};
use crate::nn::{Architecture, DiscriminatorConfig, GeneratorConfig, UNetConfig};

/// Sizes of the three network families trained together.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub gen_width: usize,
    pub gen_blocks: usize,
    pub disc_width: usize,
    pub disc_layers: usize,
    pub disc_padding: usize,
    pub pred_width: usize,
}

impl Default for ModelConfig {
    /// Desk-scale networks for 32×32 frames.
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            gen_width: 8,
            gen_blocks: 6,
            disc_width: 8,
            disc_layers: 1,
            disc_padding: 0,
            pred_width: 8,
        }
    }
}

impl ModelConfig {
    pub fn generator(&self) -> Architecture {
        Architecture::Generator(GeneratorConfig {
            input_channels: self.channels,
            base_width: self.gen_width,
            n_residual_blocks: self.gen_blocks,
            image_size: self.image_size,
        })
    }

    pub fn discriminator(&self) -> Architecture {
        Architecture::Discriminator(DiscriminatorConfig {
            input_channels: self.channels,
            base_width: self.disc_width,
            n_layers: self.disc_layers,
            padding: self.disc_padding,
        })
    }

    pub fn predictor(&self) -> Result<Architecture> {
        Ok(Architecture::UNet(UNetConfig::predictor(
            self.channels,
            self.pred_width,
            self.image_size,
        )?))
    }

    pub fn validate(&self) -> Result<()> {
        self.generator().validate()?;
        self.predictor()?.validate()?;
        let disc = self.discriminator();
        disc.validate()?;
        if let Architecture::Discriminator(d) = disc {
            let rf = d.receptive_field();
            if rf > self.image_size || d.output_size(self.image_size).is_err() {
                return Err(Error::Config(format!(
                    "discriminator receptive field {rf} does not fit {0}x{0} frames",
                    self.image_size
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weights: LossWeights,
    pub adversarial: AdversarialMode,
    pub mode: LossMode,
    pub distance: Distance,
    pub seed: u64,
    /// Fake-history buffer capacity per domain; 0 disables it.
    pub pool_size: usize,
    /// Steps between periodic checkpoints; 0 disables them.
    pub checkpoint_interval: u64,
    /// Step after which the learning rate decays linearly to zero.
    pub decay_start: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 1,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            weights: LossWeights::default(),
            adversarial: AdversarialMode::LeastSquares,
            mode: LossMode::Recycle,
            distance: Distance::L2,
            seed: 0,
            pool_size: 50,
            checkpoint_interval: 500,
            decay_start: 1000,
            model: ModelConfig::default(),
        }
    }
}

pub(crate) fn parse_mode(s: &str) -> Option<LossMode> {
    match s {
        "cycle" => Some(LossMode::Cycle),
        "recycle" => Some(LossMode::Recycle),
        "combined" => Some(LossMode::Combined),
        _ => None,
    }
}

pub(crate) fn mode_tag(m: LossMode) -> &'static str {
    match m {
        LossMode::Cycle => "cycle",
        LossMode::Recycle => "recycle",
        LossMode::Combined => "combined",
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl TrainConfig {
    pub fn objective(&self) -> Objective {
        Objective {
            weights: self.weights,
            adversarial: self.adversarial,
            mode: self.mode,
            distance: self.distance,
        }
    }

    /// `steps = 0` is accepted and leaves the initial state untouched.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return Err(Error::Config(format!("adam_eps must be positive, got {}", self.adam_eps)));
        }
        if self.pool_size != 0 && self.pool_size < self.batch_size {
            return Err(Error::Config(format!(
                "pool_size {} must be 0 or at least batch_size {}",
                self.pool_size, self.batch_size
            )));
        }
        self.weights.validate()?;
        self.model.validate()
    }

    /// Constant `lr` before `decay_start`, then linear to zero at `steps`.
    /// A `decay_start` at or past `steps` keeps the rate constant.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.decay_start || self.steps <= self.decay_start {
            self.lr
        } else {
            self.lr * (self.steps.saturating_sub(step)) as f64 / (self.steps - self.decay_start) as f64
        }
    }

    pub const KEYS: &'static [&'static str] = &[
        "steps",
        "batch_size",
        "lr",
        "beta1",
        "beta2",
        "adam_eps",
        "lambda_rx",
        "lambda_ry",
        "lambda_tau_x",
        "lambda_tau_y",
        "lambda_cycle_x",
        "lambda_cycle_y",
        "lambda_adv_x",
        "lambda_adv_y",
        "adversarial",
        "loss",
        "distance",
        "seed",
        "pool_size",
        "checkpoint_interval",
        "decay_start",
        "image_size",
        "channels",
        "gen_width",
        "gen_blocks",
        "disc_width",
        "disc_layers",
        "disc_padding",
        "pred_width",
    ];

    /// Sets one field from its `key=value` spelling.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let w = &mut self.weights;
        let m = &mut self.model;
        match key {
            "steps" => self.steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "lambda_rx" => w.lambda_rx = parse(key, value)?,
            "lambda_ry" => w.lambda_ry = parse(key, value)?,
            "lambda_tau_x" => w.lambda_tau_x = parse(key, value)?,
            "lambda_tau_y" => w.lambda_tau_y = parse(key, value)?,
            "lambda_cycle_x" => w.lambda_cycle_x = parse(key, value)?,
            "lambda_cycle_y" => w.lambda_cycle_y = parse(key, value)?,
            "lambda_adv_x" => w.lambda_adv_x = parse(key, value)?,
            "lambda_adv_y" => w.lambda_adv_y = parse(key, value)?,
            "adversarial" => {
                self.adversarial = match value.trim() {
                    "log" => AdversarialMode::Log,
                    "least_squares" => AdversarialMode::LeastSquares,
                    other => return Err(Error::Config(format!("adversarial: unknown mode {other:?}"))),
                }
            }
            "loss" => {
                self.mode = parse_mode(value.trim())
                    .ok_or_else(|| Error::Config(format!("loss: unknown mode {value:?}")))?
            }
            "distance" => {
                self.distance = match value.trim() {
                    "l2" => Distance::L2,
                    "l1" => Distance::L1,
                    other => return Err(Error::Config(format!("distance: unknown value {other:?}"))),
                }
            }
            "seed" => self.seed = parse(key, value)?,
            "pool_size" => self.pool_size = parse(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(key, value)?,
            "decay_start" => self.decay_start = parse(key, value)?,
            "image_size" => m.image_size = parse(key, value)?,
            "channels" => m.channels = parse(key, value)?,
            "gen_width" => m.gen_width = parse(key, value)?,
            "gen_blocks" => m.gen_blocks = parse(key, value)?,
            "disc_width" => m.disc_width = parse(key, value)?,
            "disc_layers" => m.disc_layers = parse(key, value)?,
            "disc_padding" => m.disc_padding = parse(key, value)?,
            "pred_width" => m.pred_width = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every field as `(key, value)`, in [`Self::KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let w = &self.weights;
        let m = &self.model;
        let values = [
            self.steps.to_string(),
            self.batch_size.to_string(),
            self.lr.to_string(),
            self.beta1.to_string(),
            self.beta2.to_string(),
            self.adam_eps.to_string(),
            w.lambda_rx.to_string(),
            w.lambda_ry.to_string(),
            w.lambda_tau_x.to_string(),
            w.lambda_tau_y.to_string(),
            w.lambda_cycle_x.to_string(),
            w.lambda_cycle_y.to_string(),
            w.lambda_adv_x.to_string(),
            w.lambda_adv_y.to_string(),
            match self.adversarial {
                AdversarialMode::Log => "log".into(),
                AdversarialMode::LeastSquares => "least_squares".into(),
            },
            mode_tag(self.mode).into(),
            match self.distance {
                Distance::L2 => "l2".into(),
                Distance::L1 => "l1".into(),
            },
            self.seed.to_string(),
            self.pool_size.to_string(),
            self.checkpoint_interval.to_string(),
            self.decay_start.to_string(),
            m.image_size.to_string(),
            m.channels.to_string(),
            m.gen_width.to_string(),
            m.gen_blocks.to_string(),
            m.disc_width.to_string(),
            m.disc_layers.to_string(),
            m.disc_padding.to_string(),
            m.pred_width.to_string(),
        ];
        Self::KEYS.iter().copied().zip(values).collect()
    }

    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {line:?}")))?;
            c.set(k.trim(), v)?;
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        TrainConfig::default().validate().unwrap();
        assert_eq!(TrainConfig::default().lr, 2e-4);
        assert_eq!((TrainConfig::default().beta1, TrainConfig::default().beta2), (0.5, 0.999));
    }

    #[test]
    fn text_round_trip_covers_every_key() {
        let mut c = TrainConfig::default();
        c.set("lambda_tau_y", "3.25").unwrap();
        c.set("loss", "combined").unwrap();
        c.set("lr", "0.00012345678901234").unwrap();
        let back = TrainConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.entries().len(), TrainConfig::KEYS.len());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut c = TrainConfig::default();
        assert!(c.set("learning_rate", "1").is_err());
        assert!(c.set("steps", "-3").is_err());
        assert!(c.set("loss", "both").is_err());
        assert!(TrainConfig::from_text("steps 3").is_err());
    }

    #[test]
    fn validation() {
        let ok = TrainConfig::default();
        assert!(TrainConfig { lr: 0.0, ..ok }.validate().is_err());
        assert!(TrainConfig { pool_size: 1, batch_size: 2, ..ok }.validate().is_err());
        assert!(TrainConfig { pool_size: 0, batch_size: 2, ..ok }.validate().is_ok());
        let late = TrainConfig { decay_start: 5000, ..ok };
        assert!(late.validate().is_ok());
        assert_eq!((late.lr_at(0), late.lr_at(late.steps), late.lr_at(6000)), (ok.lr, ok.lr, ok.lr));
        let big_disc = ModelConfig {
            disc_layers: 3,
            ..ModelConfig::default()
        };
        assert!(TrainConfig { model: big_disc, ..ok }.validate().is_err());
    }

    #[test]
    fn lr_schedule_is_constant_then_linear() {
        let c = TrainConfig {
            steps: 100,
            decay_start: 60,
            lr: 1.0,
            ..TrainConfig::default()
        };
        assert_eq!(c.lr_at(0), 1.0);
        assert_eq!(c.lr_at(59), 1.0);
        assert_eq!(c.lr_at(60), 1.0);
        assert_eq!(c.lr_at(80), 0.5);
        assert_eq!(c.lr_at(100), 0.0);
        let diffs: Vec<f64> = (60..100).map(|s| c.lr_at(s) - c.lr_at(s + 1)).collect();
        assert!(diffs.iter().all(|d| (d - 1.0 / 40.0).abs() < 1e-12));
    }
}
