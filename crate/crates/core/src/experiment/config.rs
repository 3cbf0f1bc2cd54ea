//! Experiment configuration: flat `key = value` files with `#` comments,
//! layered over a named preset.

use std::fmt;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::cluster::KMeansConfig;
use crate::data::{AugmentRanges, Stain, SyntheticConfig};
use crate::error::{Error, Result};
use crate::models::{ArchitectureConfig, TargetStain};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Unsupervised,
    SemiSupervised,
    Supervised,
}

impl Method {
    pub const ALL: [Method; 3] = [
        Method::Unsupervised,
        Method::SemiSupervised,
        Method::Supervised,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Unsupervised => "unsupervised",
            Method::SemiSupervised => "semi-supervised",
            Method::Supervised => "supervised",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "unsupervised" | "unsup" => Ok(Method::Unsupervised),
            "semi-supervised" | "semi_supervised" | "semi" => Ok(Method::SemiSupervised),
            "supervised" | "sup" => Ok(Method::Supervised),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

/// Input/target stain pairing of one results column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StainVariant {
    /// Autoencoder H&E -> H&E.
    HeToHe,
    /// Autoencoder H&E -> IHC.
    HeToIhc,
    /// Supervised on H&E input.
    He,
    /// Supervised on IHC input.
    Ihc,
}

impl StainVariant {
    pub fn for_target(target: TargetStain) -> StainVariant {
        match target {
            TargetStain::SameStain => StainVariant::HeToHe,
            TargetStain::CrossStain => StainVariant::HeToIhc,
        }
    }

    pub fn for_input(stain: Stain) -> StainVariant {
        match stain {
            Stain::He => StainVariant::He,
            Stain::Ihc => StainVariant::Ihc,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StainVariant::HeToHe => "he-he",
            StainVariant::HeToIhc => "he-ihc",
            StainVariant::He => "he",
            StainVariant::Ihc => "ihc",
        }
    }

    /// Column heading in the rendered table.
    pub fn arrow(self) -> &'static str {
        match self {
            StainVariant::HeToHe => "H&E->H&E",
            StainVariant::HeToIhc => "H&E->IHC",
            StainVariant::He => "H&E",
            StainVariant::Ihc => "IHC",
        }
    }
}

impl fmt::Display for StainVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StainVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "he-he" => Ok(StainVariant::HeToHe),
            "he-ihc" => Ok(StainVariant::HeToIhc),
            "he" => Ok(StainVariant::He),
            "ihc" => Ok(StainVariant::Ihc),
            other => Err(Error::Config(format!("unknown stain variant {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected desk or paper)"
            ))),
        }
    }
}

/// Optimisation settings of one training procedure.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// `None` disables augmentation.
    pub augment: Option<AugmentRanges>,
    pub seed: u64,
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub methods: Vec<Method>,
    /// Reconstruction targets pretrained for the autoencoder methods.
    pub targets: Vec<TargetStain>,
    /// Input stains of the supervised baseline.
    pub supervised_inputs: Vec<Stain>,
    pub nlp_grid: Vec<usize>,
    pub repeats: usize,
    pub dr_size: usize,
    pub db_size: usize,
    pub test_size: usize,

    pub patch_size: usize,
    pub latent_dim: usize,
    pub base_channels: usize,
    pub channel_cap: usize,

    pub batch_size: usize,
    pub ae_epochs: usize,
    pub ae_learning_rate: f64,
    pub head_epochs: usize,
    pub head_learning_rate: f64,
    pub supervised_epochs: usize,
    pub supervised_learning_rate: f64,
    pub augment: bool,
    pub augment_ranges: AugmentRanges,

    pub kmeans_k: usize,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,

    /// Directory holding `manifest.csv` and `test_manifest.csv`; when unset
    /// the synthetic generator is used.
    pub data_dir: Option<PathBuf>,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub field_ratios: [f64; 3],
    pub mix_probability: f64,
    pub stain_variation: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::preset(Preset::Desk)
    }
}

fn parse_list<T: FromStr<Err = Error>>(value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected a boolean, got {value:?}"
        ))),
    }
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let synthetic = SyntheticConfig::default();
        let desk = ExperimentConfig {
            seed: 2024,
            methods: Method::ALL.to_vec(),
            targets: vec![TargetStain::SameStain, TargetStain::CrossStain],
            supervised_inputs: vec![Stain::He],
            nlp_grid: vec![30, 100, 300, 1000, 2000],
            repeats: 5,
            dr_size: 2000,
            db_size: 2000,
            test_size: 1000,
            patch_size: 64,
            latent_dim: 128,
            base_channels: 16,
            channel_cap: 128,
            batch_size: 32,
            ae_epochs: 30,
            ae_learning_rate: 1e-3,
            head_epochs: 100,
            head_learning_rate: 1e-3,
            supervised_epochs: 50,
            supervised_learning_rate: 1e-3,
            augment: true,
            augment_ranges: AugmentRanges::default(),
            kmeans_k: 50,
            kmeans_max_iter: 300,
            kmeans_tol: 1e-6,
            data_dir: None,
            synthetic_train: synthetic.train_count,
            synthetic_test: synthetic.test_count,
            field_ratios: synthetic.field_ratios,
            mix_probability: synthetic.mix_probability,
            stain_variation: synthetic.stain_variation,
        };
        match preset {
            Preset::Desk => desk,
            Preset::Paper => ExperimentConfig {
                supervised_inputs: vec![Stain::He, Stain::Ihc],
                nlp_grid: vec![100, 500, 1000, 2000, 10000, 100000],
                dr_size: 100_000,
                db_size: 100_000,
                test_size: 10_000,
                patch_size: 256,
                synthetic_train: 225_000,
                synthetic_test: 15_000,
                ..desk
            },
        }
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "methods" => self.methods = parse_list(v)?,
            "targets" | "target_stain" => self.targets = parse_list(v)?,
            "supervised_inputs" | "input_stain" => self.supervised_inputs = parse_list(v)?,
            "nlp_grid" => {
                self.nlp_grid = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_num(key, s))
                    .collect::<Result<_>>()?
            }
            "repeats" => self.repeats = parse_num(key, v)?,
            "dr_size" => self.dr_size = parse_num(key, v)?,
            "db_size" => self.db_size = parse_num(key, v)?,
            "test_size" => self.test_size = parse_num(key, v)?,
            "patch_size" => self.patch_size = parse_num(key, v)?,
            "latent_dim" => self.latent_dim = parse_num(key, v)?,
            "base_channels" => self.base_channels = parse_num(key, v)?,
            "channel_cap" => self.channel_cap = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "ae_epochs" => self.ae_epochs = parse_num(key, v)?,
            "ae_learning_rate" => self.ae_learning_rate = parse_num(key, v)?,
            "head_epochs" => self.head_epochs = parse_num(key, v)?,
            "head_learning_rate" => self.head_learning_rate = parse_num(key, v)?,
            "supervised_epochs" => self.supervised_epochs = parse_num(key, v)?,
            "supervised_learning_rate" => self.supervised_learning_rate = parse_num(key, v)?,
            "augment" => self.augment = parse_bool(key, v)?,
            "augment_flips" => self.augment_ranges.flips = parse_bool(key, v)?,
            "augment_hue_degrees" => self.augment_ranges.hue_degrees = parse_num(key, v)?,
            "augment_saturation_min" => self.augment_ranges.saturation.0 = parse_num(key, v)?,
            "augment_saturation_max" => self.augment_ranges.saturation.1 = parse_num(key, v)?,
            "augment_brightness" => self.augment_ranges.brightness = parse_num(key, v)?,
            "augment_contrast_min" => self.augment_ranges.contrast.0 = parse_num(key, v)?,
            "augment_contrast_max" => self.augment_ranges.contrast.1 = parse_num(key, v)?,
            "kmeans_k" | "k" => self.kmeans_k = parse_num(key, v)?,
            "kmeans_max_iter" => self.kmeans_max_iter = parse_num(key, v)?,
            "kmeans_tol" => self.kmeans_tol = parse_num(key, v)?,
            "data_dir" => {
                self.data_dir = if v.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(v))
                }
            }
            "synthetic_train" => self.synthetic_train = parse_num(key, v)?,
            "synthetic_test" => self.synthetic_test = parse_num(key, v)?,
            "field_ratios" => {
                let parts = v
                    .split(',')
                    .map(|p| parse_num::<f64>(key, p))
                    .collect::<Result<Vec<_>>>()?;
                self.field_ratios = parts.try_into().map_err(|_| {
                    Error::Config(format!("{key}: expected three comma-separated ratios"))
                })?;
            }
            "mix_probability" => self.mix_probability = parse_num(key, v)?,
            "stain_variation" => self.stain_variation = parse_num(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies every setting of a config file body. A `preset = ...` line
    /// must come first if present; it resets all values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            if key.trim() == "preset" {
                *self = ExperimentConfig::preset(value.parse()?);
                continue;
            }
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut config = ExperimentConfig::default();
        config.apply_text(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Canonical `key = value` rendering; parsing it reproduces `self`.
    pub fn to_text(&self) -> String {
        let r = &self.augment_ranges;
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        line("seed", self.seed.to_string());
        line("methods", join(&self.methods));
        line("targets", join(&self.targets));
        line("supervised_inputs", join(&self.supervised_inputs));
        line("nlp_grid", join(&self.nlp_grid));
        line("repeats", self.repeats.to_string());
        line("dr_size", self.dr_size.to_string());
        line("db_size", self.db_size.to_string());
        line("test_size", self.test_size.to_string());
        line("patch_size", self.patch_size.to_string());
        line("latent_dim", self.latent_dim.to_string());
        line("base_channels", self.base_channels.to_string());
        line("channel_cap", self.channel_cap.to_string());
        line("batch_size", self.batch_size.to_string());
        line("ae_epochs", self.ae_epochs.to_string());
        line("ae_learning_rate", format!("{:?}", self.ae_learning_rate));
        line("head_epochs", self.head_epochs.to_string());
        line(
            "head_learning_rate",
            format!("{:?}", self.head_learning_rate),
        );
        line("supervised_epochs", self.supervised_epochs.to_string());
        line(
            "supervised_learning_rate",
            format!("{:?}", self.supervised_learning_rate),
        );
        line("augment", self.augment.to_string());
        line("augment_flips", r.flips.to_string());
        line("augment_hue_degrees", format!("{:?}", r.hue_degrees));
        line("augment_saturation_min", format!("{:?}", r.saturation.0));
        line("augment_saturation_max", format!("{:?}", r.saturation.1));
        line("augment_brightness", format!("{:?}", r.brightness));
        line("augment_contrast_min", format!("{:?}", r.contrast.0));
        line("augment_contrast_max", format!("{:?}", r.contrast.1));
        line("kmeans_k", self.kmeans_k.to_string());
        line("kmeans_max_iter", self.kmeans_max_iter.to_string());
        line("kmeans_tol", format!("{:?}", self.kmeans_tol));
        line(
            "data_dir",
            self.data_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        line("synthetic_train", self.synthetic_train.to_string());
        line("synthetic_test", self.synthetic_test.to_string());
        line(
            "field_ratios",
            join(&self.field_ratios.map(|r| format!("{r:?}"))),
        );
        line("mix_probability", format!("{:?}", self.mix_probability));
        line("stain_variation", format!("{:?}", self.stain_variation));
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture(TargetStain::SameStain).validate()?;
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if self.nlp_grid.is_empty() {
            return Err(Error::Config("nlp_grid is empty".into()));
        }
        if let Some(&bad) = self.nlp_grid.iter().find(|&&n| n == 0 || n > self.db_size) {
            return Err(Error::Config(format!(
                "grid size {bad} must be positive and at most db_size {}",
                self.db_size
            )));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods selected".into()));
        }
        let uses_ae = self.methods.iter().any(|m| *m != Method::Supervised);
        if uses_ae && self.targets.is_empty() {
            return Err(Error::Config(
                "autoencoder methods need at least one target".into(),
            ));
        }
        if self.methods.contains(&Method::Supervised) && self.supervised_inputs.is_empty() {
            return Err(Error::Config(
                "supervised method needs at least one input stain".into(),
            ));
        }
        if self.kmeans_k == 0 {
            return Err(Error::Config("kmeans_k must be at least 1".into()));
        }
        if self.dr_size == 0 || self.test_size == 0 {
            return Err(Error::Config(
                "dr_size and test_size must be positive".into(),
            ));
        }
        for hyper in [
            self.ae_hyper(0),
            self.head_hyper(0),
            self.supervised_hyper(0),
        ] {
            hyper.validate()?;
        }
        Ok(())
    }

    pub fn architecture(&self, target_stain: TargetStain) -> ArchitectureConfig {
        ArchitectureConfig {
            patch_size: self.patch_size,
            latent_dim: self.latent_dim,
            base_channels: self.base_channels,
            channel_cap: self.channel_cap,
            target_stain,
        }
    }

    pub fn kmeans(&self) -> KMeansConfig {
        KMeansConfig {
            k: self.kmeans_k,
            max_iter: self.kmeans_max_iter,
            tol: self.kmeans_tol,
        }
    }

    fn augment_ranges(&self) -> Option<AugmentRanges> {
        self.augment.then_some(self.augment_ranges)
    }

    pub fn ae_hyper(&self, seed: u64) -> TrainHyper {
        TrainHyper {
            epochs: self.ae_epochs,
            batch_size: self.batch_size,
            learning_rate: self.ae_learning_rate,
            augment: self.augment_ranges(),
            seed,
        }
    }

    /// Heads train on fixed latents, so no augmentation applies.
    pub fn head_hyper(&self, seed: u64) -> TrainHyper {
        TrainHyper {
            epochs: self.head_epochs,
            batch_size: self.batch_size,
            learning_rate: self.head_learning_rate,
            augment: None,
            seed,
        }
    }

    pub fn supervised_hyper(&self, seed: u64) -> TrainHyper {
        TrainHyper {
            epochs: self.supervised_epochs,
            batch_size: self.batch_size,
            learning_rate: self.supervised_learning_rate,
            augment: self.augment_ranges(),
            seed,
        }
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            patch_size: self.patch_size,
            train_count: self.synthetic_train,
            test_count: self.synthetic_test,
            field_ratios: self.field_ratios,
            mix_probability: self.mix_probability,
            stain_variation: self.stain_variation,
            ..SyntheticConfig::default()
        }
    }

    /// Result columns in table order.
    pub fn variants(&self) -> Vec<(Method, StainVariant)> {
        let mut out = Vec::new();
        for &m in &self.methods {
            if m == Method::Supervised {
                out.extend(
                    self.supervised_inputs
                        .iter()
                        .map(|&s| (m, StainVariant::for_input(s))),
                );
            } else {
                out.extend(
                    self.targets
                        .iter()
                        .map(|&t| (m, StainVariant::for_target(t))),
                );
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_defaults() {
        let c = ExperimentConfig::default();
        assert_eq!(c.nlp_grid, vec![30, 100, 300, 1000, 2000]);
        assert_eq!(
            (c.dr_size, c.db_size, c.test_size, c.repeats),
            (2000, 2000, 1000, 5)
        );
        assert_eq!(
            (c.ae_epochs, c.head_epochs, c.supervised_epochs),
            (30, 100, 50)
        );
        assert_eq!((c.patch_size, c.latent_dim, c.kmeans_k), (64, 128, 50));
        c.validate().unwrap();
        let p = ExperimentConfig::preset(Preset::Paper);
        assert_eq!(p.nlp_grid, vec![100, 500, 1000, 2000, 10000, 100000]);
        assert_eq!(p.patch_size, 256);
        p.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = ExperimentConfig::default();
        c.seed = 99;
        c.methods = vec![Method::Supervised];
        c.supervised_inputs = vec![Stain::Ihc, Stain::He];
        c.head_learning_rate = 0.0123;
        c.data_dir = Some(PathBuf::from("some/dir"));
        assert_eq!(ExperimentConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn comments_presets_and_errors() {
        let c =
            ExperimentConfig::from_text("# comment\npreset = paper\nrepeats = 2 # trailing\n\n")
                .unwrap();
        assert_eq!(c.patch_size, 256);
        assert_eq!(c.repeats, 2);
        let err = ExperimentConfig::from_text("bogus = 1").unwrap_err();
        assert!(err.to_string().contains("bogus"));
        assert!(ExperimentConfig::from_text("repeats = 0").is_err());
        assert!(ExperimentConfig::from_text("nlp_grid = 30, 5000").is_err());
        assert!(ExperimentConfig::from_text("patch_size = 63")
            .unwrap_err()
            .to_string()
            .contains("power of two"));
        assert!(ExperimentConfig::from_text("just words").is_err());
    }

    #[test]
    fn variants_follow_methods() {
        let c = ExperimentConfig::default();
        assert_eq!(
            c.variants(),
            vec![
                (Method::Unsupervised, StainVariant::HeToHe),
                (Method::Unsupervised, StainVariant::HeToIhc),
                (Method::SemiSupervised, StainVariant::HeToHe),
                (Method::SemiSupervised, StainVariant::HeToIhc),
                (Method::Supervised, StainVariant::He),
            ]
        );
    }
}
