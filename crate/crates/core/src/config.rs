//! Run configuration: defaults, TOML loading, dotted-key overrides and
//! validation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::evaluation::{OptimizerConfig, Strategy};
use crate::genome::SearchSpace;
use crate::variation::MutationRates;
use crate::Error;

/// Environment variable naming the dataset root directory.
pub const DATA_DIR_ENV: &str = "COEGAN_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    Ring,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "ring" => Ok(DatasetKind::Ring),
            other => Err(Error::Config(format!("dataset: unknown dataset {other:?} (mnist | ring)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    Identity,
    RawPixels,
    ConvClassifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RingConfig {
    pub modes: usize,
    pub radius: f64,
    pub sigma: f64,
    pub samples: usize,
}

impl Default for RingConfig {
    fn default() -> Self {
        Self { modes: 8, radius: 0.8, sigma: 0.05, samples: 10_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// MNIST directory; falls back to `$COEGAN_DATA_DIR` (or its `mnist`
    /// subdirectory).
    pub path: Option<String>,
    pub ring: RingConfig,
    /// Seed for synthetic data and the feature-extractor classifier.
    pub data_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { kind: DatasetKind::Mnist, path: None, ring: RingConfig::default(), data_seed: 12345 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    /// Unset picks `conv_classifier` for images and `identity` for flat data.
    pub kind: Option<ExtractorKind>,
    /// Training mini-batches for the convolutional classifier.
    pub classifier_steps: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self { kind: None, classifier_steps: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub generations: usize,
    pub pop_gen: usize,
    pub pop_disc: usize,
    pub mutation: MutationRates,
    pub crossover_rate: f64,
    pub feature_range: [usize; 2],
    pub channel_range: [usize; 2],
    /// Adversaries per individual.
    pub k: usize,
    pub tournament_k: usize,
    pub fid_samples: usize,
    pub genome_limit: usize,
    pub species: usize,
    pub batch_size: usize,
    pub batches_per_gen: usize,
    pub optimizer: OptimizerConfig,
    pub strategy: Strategy,
    pub elitism: bool,
    pub latent_dim: usize,
    pub base_channels: usize,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub extractor: ExtractorConfig,
    /// Train trainees on multiple threads. Results do not depend on it.
    pub parallel: bool,
    /// Write a sample image every this many generations (plus the first and
    /// last); 0 disables intermediate images.
    pub sample_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            generations: 100,
            pop_gen: 20,
            pop_disc: 20,
            mutation: MutationRates::default(),
            crossover_rate: 0.0,
            feature_range: [32, 1024],
            channel_range: [16, 128],
            k: 3,
            tournament_k: 2,
            fid_samples: 1000,
            genome_limit: 4,
            species: 4,
            batch_size: 64,
            batches_per_gen: 20,
            optimizer: OptimizerConfig::default(),
            strategy: Strategy::AllVsBest,
            elitism: true,
            latent_dim: 100,
            base_channels: 32,
            seed: 0,
            dataset: DatasetConfig::default(),
            extractor: ExtractorConfig::default(),
            parallel: true,
            sample_every: 10,
        }
    }
}

impl RunConfig {
    pub fn search_space(&self, spatial: bool) -> SearchSpace {
        SearchSpace {
            genome_limit: self.genome_limit,
            feature_range: (self.feature_range[0], self.feature_range[1]),
            channel_range: (self.channel_range[0], self.channel_range[1]),
            spatial,
        }
    }

    /// The configured feature extractor, or the default for the dataset.
    pub fn extractor_kind(&self) -> ExtractorKind {
        self.extractor.kind.unwrap_or(match self.dataset.kind {
            DatasetKind::Mnist => ExtractorKind::ConvClassifier,
            DatasetKind::Ring => ExtractorKind::Identity,
        })
    }

    /// Checks every field and reports all problems at once.
    pub fn validate(&self) -> Result<(), Error> {
        let mut errs = Vec::new();
        let mut positive = |name: &str, v: usize| {
            if v == 0 {
                errs.push(format!("{name}: must be positive"));
            }
        };
        positive("pop_gen", self.pop_gen);
        positive("pop_disc", self.pop_disc);
        positive("k", self.k);
        positive("tournament_k", self.tournament_k);
        positive("genome_limit", self.genome_limit);
        positive("species", self.species);
        positive("batch_size", self.batch_size);
        positive("batches_per_gen", self.batches_per_gen);
        positive("latent_dim", self.latent_dim);
        positive("base_channels", self.base_channels);
        if self.fid_samples < 2 {
            errs.push("fid_samples: must be at least 2".into());
        }
        for (name, v) in [
            ("mutation.add", self.mutation.add),
            ("mutation.remove", self.mutation.remove),
            ("mutation.change", self.mutation.change),
            ("crossover_rate", self.crossover_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                errs.push(format!("{name}: rate {v} outside [0, 1]"));
            }
        }
        for (name, r) in [("feature_range", self.feature_range), ("channel_range", self.channel_range)] {
            if r[0] == 0 || r[0] > r[1] {
                errs.push(format!("{name}: [{}, {}] is not a positive ascending range", r[0], r[1]));
            }
        }
        if !(self.optimizer.learning_rate > 0.0 && self.optimizer.learning_rate.is_finite()) {
            errs.push(format!("optimizer.learning_rate: {} must be positive", self.optimizer.learning_rate));
        }
        let ring = &self.dataset.ring;
        if self.dataset.kind == DatasetKind::Ring {
            if ring.modes == 0 {
                errs.push("dataset.ring.modes: must be positive".into());
            }
            if ring.sigma.is_nan() || ring.sigma <= 0.0 {
                errs.push("dataset.ring.sigma: must be positive".into());
            }
            if ring.samples < self.batch_size.max(2) {
                errs.push(format!("dataset.ring.samples: {} is smaller than one batch", ring.samples));
            }
            if self.extractor.kind == Some(ExtractorKind::ConvClassifier) {
                errs.push("extractor.kind: conv_classifier needs image data".into());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    /// SHA-256 of the canonical JSON form of the resolved config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), Error> {
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config(format!("{key}: {part} is not a table")))?;
    }
    Err(Error::Config("empty override key".into()))
}

fn parse_value(raw: &str) -> toml::Value {
    // Bare words that are not valid TOML values are taken as strings.
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Resolves a config from an optional TOML document and `key=value`
/// overrides (dotted keys address nested tables). Missing keys take the
/// defaults; unknown keys and out-of-range values are rejected.
pub fn parse_config(document: Option<&str>, overrides: &[(String, String)]) -> Result<RunConfig, Error> {
    let mut table: toml::Table = match document {
        Some(doc) => toml::from_str(doc).map_err(|e| Error::Config(format!("malformed config: {e}")))?,
        None => toml::Table::new(),
    };
    for (k, v) in overrides {
        set_dotted(&mut table, k, parse_value(v))?;
    }
    let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig, Error> {
    let doc = path.map(std::fs::read_to_string).transpose()?;
    parse_config(doc.as_deref(), overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_has_published_defaults() {
        let c = parse_config(None, &[]).unwrap();
        assert_eq!(c.generations, 100);
        assert_eq!((c.pop_gen, c.pop_disc), (20, 20));
        assert_eq!(c.mutation, MutationRates { add: 0.3, remove: 0.1, change: 0.1 });
        assert_eq!(c.crossover_rate, 0.0);
        assert_eq!((c.feature_range, c.channel_range), ([32, 1024], [16, 128]));
        assert_eq!((c.k, c.tournament_k, c.fid_samples, c.genome_limit, c.species), (3, 2, 1000, 4, 4));
        assert_eq!((c.batch_size, c.batches_per_gen), (64, 20));
        assert_eq!(c.optimizer.learning_rate, 0.001);
        assert_eq!(c, parse_config(Some(""), &[]).unwrap());
    }

    #[test]
    fn overrides_beat_file_values() {
        let c = parse_config(Some("generations = 50\n[mutation]\nadd = 0.5\n"), &[("generations".into(), "5".into())]).unwrap();
        assert_eq!(c.generations, 5);
        assert_eq!(c.mutation.add, 0.5);
        let c = parse_config(None, &[("dataset.kind".into(), "ring".into())]).unwrap();
        assert_eq!(c.dataset.kind, DatasetKind::Ring);
        assert_eq!(c.extractor_kind(), ExtractorKind::Identity);
        assert_eq!(RunConfig::default().extractor_kind(), ExtractorKind::ConvClassifier);
        assert!(parse_config(None, &[("dataset.kind".into(), "ring".into()), ("extractor.kind".into(), "conv_classifier".into())]).is_err());
    }

    #[test]
    fn bad_values_are_rejected() {
        let e = parse_config(Some("[mutation]\nadd = 1.5\n"), &[]).unwrap_err().to_string();
        assert!(e.contains("mutation.add"), "{e}");
        let e = parse_config(Some("generatoins = 5\n"), &[]).unwrap_err().to_string();
        assert!(e.contains("generatoins"), "{e}");
        assert!(parse_config(Some("pop_gen = 0"), &[]).is_err());
        assert!(parse_config(Some("not toml ["), &[]).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        let back: RunConfig = toml::from_str(&a.to_toml()).unwrap();
        assert_eq!(back, a);
    }
}
