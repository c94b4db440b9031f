//! Experiment configuration, read from TOML.
//!
//! Every model and training hyperparameter has a key named after its symbol
//! (`lambda_k`, `eta`, `K_item`, ...). Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{InteractionFormat, Modality, NoiseMode, SplitRatios, SyntheticSpec};
use crate::error::{Error, Result};

/// Candidate pool for the cold setting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColdPool {
    /// Only the cold test items.
    ColdTest,
    /// Every item the user has not trained on.
    Catalog,
}

/// Which branches take part in the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub ba: bool,
    pub ka: bool,
    pub ma_text: bool,
    pub ma_image: bool,
    pub ms: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            ba: true,
            ka: true,
            ma_text: true,
            ma_image: true,
            ms: true,
        }
    }
}

impl Ablation {
    pub fn modality(&self, m: Modality) -> bool {
        match m {
            Modality::Text => self.ma_text,
            Modality::Image => self.ma_image,
        }
    }

    /// Disables the branches named in a comma-separated list such as
    /// `ba,ka,ma_text,ma_image,ms`.
    pub fn disable(&mut self, list: &str) -> Result<()> {
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match name {
                "ba" => self.ba = false,
                "ka" => self.ka = false,
                "ma_text" => self.ma_text = false,
                "ma_image" => self.ma_image = false,
                "ma" => {
                    self.ma_text = false;
                    self.ma_image = false;
                }
                "ms" => self.ms = false,
                other => return Err(Error::Argument(format!("unknown ablation `{other}`"))),
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ba || self.ka || self.ma_text || self.ma_image) {
            return Err(Error::Config("at least one of ba, ka, ma_text, ma_image must stay enabled".into()));
        }
        Ok(())
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let off: Vec<&str> = [
            (self.ba, "ba"),
            (self.ka, "ka"),
            (self.ma_text, "ma_text"),
            (self.ma_image, "ma_image"),
            (self.ms, "ms"),
        ]
        .iter()
        .filter(|(on, _)| !on)
        .map(|(_, n)| *n)
        .collect();
        if off.is_empty() {
            f.write_str("full")
        } else {
            write!(f, "without {}", off.join(","))
        }
    }
}

/// Model and optimization hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub d: usize,
    pub d_know: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    #[serde(rename = "L_ii")]
    pub layers_ii: usize,
    #[serde(rename = "L_uu")]
    pub layers_uu: usize,
    #[serde(rename = "H")]
    pub heads: usize,
    /// Rounds of knowledge attention.
    pub kg_layers: usize,
    pub lambda_k: f64,
    pub lambda_m: f64,
    pub lambda_adv: f64,
    pub lambda_contr: f64,
    pub lambda_reg: f64,
    pub eta: f64,
    pub tau: f64,
    pub gamma: f64,
    pub xi: f64,
    #[serde(rename = "K_item")]
    pub k_item: usize,
    #[serde(rename = "K_user")]
    pub k_user: usize,
    pub batch_size: usize,
    /// Knowledge quadruples per step; 0 means `batch_size`.
    pub kg_batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub dropout: f64,
    pub disc_dropout: f64,
    pub leaky_slope: f64,
    /// `1/sqrt(|N_u||N_i|)` instead of the one-sided `1/sqrt(|N|)`.
    pub symmetric_norm: bool,
    /// Divide the layer sum by `L + 1` instead of `L`.
    pub pool_mean: bool,
    pub contrastive_temperature: f64,
    /// Consecutive non-finite steps tolerated before training stops.
    pub max_bad_steps: usize,
    pub ablation: Ablation,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            d: 64,
            d_know: 64,
            layers: 2,
            layers_ii: 1,
            layers_uu: 1,
            heads: 2,
            kg_layers: 1,
            lambda_k: 0.36,
            lambda_m: 1.10,
            lambda_adv: 0.1,
            lambda_contr: 0.01,
            lambda_reg: 1e-4,
            eta: 0.999,
            tau: 0.2,
            gamma: 0.1,
            xi: 10.0,
            k_item: 10,
            k_user: 10,
            batch_size: 2048,
            kg_batch_size: 0,
            epochs: 300,
            patience: 10,
            learning_rate: 1e-3,
            seed: 2023,
            dropout: 0.1,
            disc_dropout: 0.1,
            leaky_slope: 0.01,
            symmetric_norm: false,
            pool_mean: false,
            contrastive_temperature: 1.0,
            max_bad_steps: 5,
            ablation: Ablation::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("d", self.d),
            ("d_know", self.d_know),
            ("L", self.layers),
            ("H", self.heads),
            ("K_item", self.k_item),
            ("K_user", self.k_user),
            ("batch_size", self.batch_size),
            ("kg_layers", self.kg_layers),
        ] {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        if self.d % self.heads != 0 {
            return err(format!("H = {} does not divide d = {}", self.heads, self.d));
        }
        for (name, v) in [
            ("lambda_k", self.lambda_k),
            ("lambda_m", self.lambda_m),
            ("lambda_adv", self.lambda_adv),
            ("lambda_contr", self.lambda_contr),
            ("lambda_reg", self.lambda_reg),
            ("gamma", self.gamma),
            ("xi", self.xi),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(format!("{name} must be a nonnegative number, got {v}"));
            }
        }
        for (name, v) in [
            ("tau", self.tau),
            ("learning_rate", self.learning_rate),
            ("contrastive_temperature", self.contrastive_temperature),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return err(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return err(format!("eta must lie in [0, 1], got {}", self.eta));
        }
        for (name, p) in [("dropout", self.dropout), ("disc_dropout", self.disc_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return err(format!("{name} must lie in [0, 1), got {p}"));
            }
        }
        self.ablation.validate()
    }

    pub fn kg_batch(&self) -> usize {
        if self.kg_batch_size == 0 {
            self.batch_size
        } else {
            self.kg_batch_size
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Interaction file; when absent the synthetic generator is used.
    pub interactions: Option<PathBuf>,
    pub interactions_format: String,
    pub metadata: Option<PathBuf>,
    /// Prebuilt knowledge graph; takes precedence over `metadata`.
    pub kg_entities: Option<PathBuf>,
    pub kg_triples: Option<PathBuf>,
    pub text_features: Option<PathBuf>,
    pub image_features: Option<PathBuf>,
    /// Artifact directory, relative to the output root.
    pub output: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            interactions: None,
            interactions_format: "tsv".into(),
            metadata: None,
            kg_entities: None,
            kg_triples: None,
            text_features: None,
            image_features: None,
            output: PathBuf::from("run"),
        }
    }
}

impl PathsConfig {
    pub fn format(&self) -> Result<InteractionFormat> {
        match self.interactions_format.as_str() {
            "tsv" => Ok(InteractionFormat::Tsv),
            "csv" => Ok(InteractionFormat::Csv),
            other => Err(Error::Config(format!("unknown interactions_format `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub k_core: usize,
    pub cold_fraction: f64,
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
    pub word_freq_lo: usize,
    pub word_freq_hi: usize,
    pub tfidf_threshold: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            k_core: 5,
            cold_fraction: 0.2,
            train: 0.8,
            val: 0.1,
            test: 0.1,
            seed: 2023,
            word_freq_lo: 10,
            word_freq_hi: 1000,
            tfidf_threshold: 0.1,
        }
    }
}

impl SplitConfig {
    pub fn ratios(&self) -> SplitRatios {
        SplitRatios {
            train: self.train,
            val: self.val,
            test: self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// `outlier`, `duplicate` or `discrepancy`; empty disables noise.
    pub mode: String,
    pub fraction: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            mode: String::new(),
            fraction: 0.2,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn mode(&self) -> Result<Option<NoiseMode>> {
        if self.mode.is_empty() {
            Ok(None)
        } else {
            self.mode.parse().map(Some)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(rename = "K")]
    pub k: Vec<usize>,
    pub cold_pool: ColdPool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: vec![20],
            cold_pool: ColdPool::ColdTest,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    pub clusters: usize,
    pub interactions_per_user: usize,
    pub min_user_interactions: usize,
    pub preference: f64,
    pub text_dim: usize,
    pub image_dim: usize,
    pub feature_noise: f64,
    pub kg_fidelity: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            users: s.users,
            items: s.items,
            clusters: s.clusters,
            interactions_per_user: s.interactions_per_user,
            min_user_interactions: s.min_user_interactions,
            preference: s.preference,
            text_dim: s.text_dim,
            image_dim: s.image_dim,
            feature_noise: s.feature_noise,
            kg_fidelity: s.kg_fidelity,
            seed: s.seed,
        }
    }
}

impl SyntheticConfig {
    pub fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            users: self.users,
            items: self.items,
            clusters: self.clusters,
            interactions_per_user: self.interactions_per_user,
            min_user_interactions: self.min_user_interactions,
            preference: self.preference,
            text_dim: self.text_dim,
            image_dim: self.image_dim,
            feature_noise: self.feature_noise,
            kg_fidelity: self.kg_fidelity,
            seed: self.seed,
            ..SyntheticSpec::default()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub paths: PathsConfig,
    pub split: SplitConfig,
    pub train: TrainingConfig,
    pub noise: NoiseConfig,
    pub eval: EvalConfig,
    pub synthetic: SyntheticConfig,
}

impl FromStr for ExperimentConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        text.parse()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.eval.k.is_empty() || self.eval.k.contains(&0) {
            return Err(Error::Config("eval K list must be nonempty and positive".into()));
        }
        self.noise.mode()?;
        self.paths.format()?;
        Ok(())
    }
}
