//! Flat `key = value` run configuration.
//!
//! Resolution order is built-in defaults, then the config file, then flags.
//! Every key doubles as a long flag with `_` spelled `-`.

use std::fmt::Write as _;
use std::path::Path;

use bayes_impute::data::SynthConfig;
use bayes_impute::model::ModelConfig;
use bayes_impute::pipeline::ProtocolConfig;
use bayes_impute::train::{AdamConfig, KlWeighting, TrainConfig};
use bayes_impute::variational::ScaleMixturePrior;

use crate::CliError;

/// `(key, default, help)` in the order they are echoed.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "7", "run seed; every random stream is derived from it"),
    ("n", "600", "synthetic: number of samples"),
    ("t", "24", "time steps per sample (synthetic length and grid length when loading)"),
    ("m", "5", "synthetic: number of features"),
    ("latent_dim", "3", "synthetic: latent factor dimension"),
    ("missing_rate", "0.4", "synthetic: fraction of cells left unobserved"),
    ("label_noise", "0.5", "synthetic: logistic noise scale on the label score"),
    ("hidden", "32", "recurrent state size"),
    ("impute_hidden", "32", "hidden width of the imputation network"),
    ("deterministic", "false", "train point weights instead of a posterior"),
    ("epochs", "50", "training epochs"),
    ("batch_size", "64", "mini-batch size"),
    ("learning_rate", "0.01", "Adam step size"),
    ("beta1", "0.9", "Adam first-moment decay"),
    ("beta2", "0.999", "Adam second-moment decay"),
    ("adam_eps", "1e-8", "Adam denominator offset"),
    ("lambda_imputation", "1", "imputation loss weight"),
    ("lambda_prediction", "1", "prediction loss weight"),
    ("prediction_nll_count", "1", "repeat count on the prediction loss"),
    ("kl_weighting", "per_batch", "KL scale: per_batch (1/batches) or per_sample (1/N)"),
    ("mc_train_samples", "1", "weight draws per training step"),
    ("grad_clip", "5", "global gradient-norm clip; `none` disables"),
    ("prior_pi", "0.5", "scale-mixture prior weight of the wide component"),
    ("prior_sigma1", "1", "wide prior component scale"),
    ("prior_sigma2", "0.0024787521766663585", "narrow prior component scale"),
    ("test_fraction", "0.2", "fraction of samples held out for testing"),
    ("mar_rate", "0.1", "fraction of observed cells hidden for imputation scoring"),
    ("mc_samples", "100", "Monte-Carlo weight draws at evaluation"),
];

/// Keys needed to rebuild the held-out split from a checkpoint.
pub const SPLIT_KEYS: &[&str] = &["seed", "t", "test_fraction", "mar_rate"];

pub fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: Vec<(&'static str, String)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|&(k, v, _)| (k, v.to_string())).collect(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Core(bayes_impute::Error::Config(msg.into()))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let slot = self
            .values
            .iter_mut()
            .find(|(k, _)| *k == key)
            .ok_or_else(|| config_err(format!("unknown key `{key}`")))?;
        slot.1 = value.trim().to_string();
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v.as_str())
            .unwrap_or_else(|| panic!("no config key `{key}`"))
    }

    pub fn merge_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("{origin}:{}: expected `key = value`", no + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| config_err(format!("{origin}:{}: {e}", no + 1)))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        self.merge_text(&text, &path.display().to_string())
    }

    /// The resolved configuration in the same format the loader reads.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = self.get(key);
        raw.parse()
            .map_err(|_| config_err(format!("`{key}`: cannot parse `{raw}`")))
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.parse("seed")
    }

    pub fn steps(&self) -> Result<usize, CliError> {
        self.parse("t")
    }

    pub fn mc_samples(&self) -> Result<usize, CliError> {
        let k: usize = self.parse("mc_samples")?;
        if k == 0 {
            return Err(config_err("`mc_samples` must be at least 1"));
        }
        Ok(k)
    }

    pub fn synth(&self) -> Result<SynthConfig, CliError> {
        let cfg = SynthConfig {
            samples: self.parse("n")?,
            steps: self.parse("t")?,
            features: self.parse("m")?,
            latent_dim: self.parse("latent_dim")?,
            missing_rate: self.parse("missing_rate")?,
            label_noise: self.parse("label_noise")?,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Model shape for data with `features` columns.
    pub fn model(&self, features: usize) -> Result<ModelConfig, CliError> {
        let cfg = ModelConfig {
            impute_hidden: self.parse("impute_hidden")?,
            deterministic: self.parse("deterministic")?,
            ..ModelConfig::new(features, self.parse("hidden")?)
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        let grad_clip = match self.get("grad_clip") {
            "none" => None,
            _ => Some(self.parse("grad_clip")?),
        };
        let cfg = TrainConfig {
            epochs: self.parse("epochs")?,
            batch_size: self.parse("batch_size")?,
            adam: AdamConfig {
                learning_rate: self.parse("learning_rate")?,
                beta1: self.parse("beta1")?,
                beta2: self.parse("beta2")?,
                eps: self.parse("adam_eps")?,
            },
            lambda_imputation: self.parse("lambda_imputation")?,
            lambda_prediction: self.parse("lambda_prediction")?,
            prediction_nll_count: self.parse("prediction_nll_count")?,
            kl_weighting: KlWeighting::parse(self.get("kl_weighting"))?,
            mc_train_samples: self.parse("mc_train_samples")?,
            grad_clip,
            prior: ScaleMixturePrior::new(
                self.parse("prior_pi")?,
                self.parse("prior_sigma1")?,
                self.parse("prior_sigma2")?,
            )?,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn protocol(&self) -> Result<ProtocolConfig, CliError> {
        Ok(ProtocolConfig {
            test_fraction: self.parse("test_fraction")?,
            mar_rate: self.parse("mar_rate")?,
            seed: self.seed()?,
        })
    }

    pub fn split_settings(&self) -> Vec<(String, String)> {
        SPLIT_KEYS
            .iter()
            .map(|&k| (k.to_string(), self.get(k).to_string()))
            .collect()
    }
}
