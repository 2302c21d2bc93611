//! Flat key-value experiment configuration.
//!
//! The file is TOML restricted to top-level keys; every key below is
//! optional and unknown keys are rejected.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `seeds` | `[0, …, 9]` | one run per seed (synthetic data and classifier) |
//! | `out_dir` | `"runs"` | artifact root, overridden by `--out` |
//! | `data_dir` | unset | read `train.stmp`, `validation.stmp`, `test.stmp` from here instead of synthesizing |
//! | `n_inliers` … `artifact_mix` | synth defaults | synthetic benchmark, one key per generator field |
//! | `catalogs` | `["shifts9"]` | built-in names or paths to catalog files |
//! | `compare` | every pair | Welch rows as `"a:b"` catalog pairs |
//! | `architecture` … `width` | classifier defaults | detector training |
//! | `selection_catalog` | `"geo72"` | catalog pruned by `select` |
//! | `window` | `[0.49, 0.51]` | redundancy window |
//! | `pair_architecture` … `pair_width` | pair defaults | pairwise classifiers |

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use geoscore::classifier::{AdamConfig, Architecture, ClassifierConfig};
use geoscore::selection::{default_pair_config, DEFAULT_WINDOW};
use geoscore::synth::SynthConfig;
use geoscore::transforms::{build_catalog, TransformSet, CATALOG_NAMES};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub data_dir: Option<PathBuf>,

    pub n_inliers: usize,
    pub n_outliers: usize,
    pub train: usize,
    pub validation: usize,
    pub side: usize,
    pub channels: usize,
    pub psf_sigma_range: (f64, f64),
    pub noise_sigma: f64,
    pub jitter: f64,
    pub amplitude_range: (f64, f64),
    pub dipole_separation: (f64, f64),
    pub hot_pixel_range: (f64, f64),
    pub artifact_mix: [f64; 4],

    pub catalogs: Vec<String>,
    pub compare: Vec<String>,

    pub architecture: String,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub early_stopping: bool,
    pub width: usize,

    pub selection_catalog: String,
    pub window: (f64, f64),
    pub pair_architecture: String,
    pub pair_max_epochs: usize,
    pub pair_patience: usize,
    pub pair_width: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        let c = ClassifierConfig::default();
        let p = default_pair_config(0);
        ExperimentConfig {
            seeds: (0..10).collect(),
            out_dir: PathBuf::from("runs"),
            data_dir: None,
            n_inliers: s.n_inliers,
            n_outliers: s.n_outliers,
            train: s.train,
            validation: s.validation,
            side: s.side,
            channels: s.channels,
            psf_sigma_range: s.psf_sigma_range,
            noise_sigma: s.noise_sigma,
            jitter: s.jitter,
            amplitude_range: s.amplitude_range,
            dipole_separation: s.dipole_separation,
            hot_pixel_range: s.hot_pixel_range,
            artifact_mix: s.artifact_mix,
            catalogs: vec!["shifts9".into()],
            compare: Vec::new(),
            architecture: c.architecture.tag().into(),
            batch_size: c.batch_size,
            learning_rate: c.optimizer.learning_rate,
            beta1: c.optimizer.beta1,
            beta2: c.optimizer.beta2,
            epsilon: c.optimizer.epsilon,
            max_epochs: c.max_epochs,
            patience: c.patience,
            early_stopping: c.early_stopping,
            width: c.width,
            selection_catalog: "geo72".into(),
            window: DEFAULT_WINDOW,
            pair_architecture: p.architecture.tag().into(),
            pair_max_epochs: p.max_epochs,
            pair_patience: p.patience,
            pair_width: p.width,
        }
    }
}

/// A built-in name or a catalog file, resolved once.
#[derive(Clone, Debug)]
pub struct Catalog {
    /// What the config said.
    pub key: String,
    pub set: TransformSet,
}

impl Catalog {
    /// Directory-safe label used in artifact paths and tables.
    pub fn label(&self) -> String {
        self.set
            .name()
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                    c
                } else {
                    '_'
                }
            })
            .collect()
    }
}

fn architecture(key: &str, tag: &str) -> Result<Architecture> {
    Architecture::from_tag(tag).with_context(|| {
        format!("{key} = {tag:?} is not an architecture; use one of wrn_10_4, compact_cnn, linear_softmax")
    })
}

pub fn resolve_catalog(key: &str) -> Result<TransformSet> {
    if CATALOG_NAMES.contains(&key) {
        return Ok(build_catalog(key)?);
    }
    let path = Path::new(key);
    if path.is_file() {
        return TransformSet::from_file(path).with_context(|| format!("reading catalog file {}", path.display()));
    }
    // delegate so the message lists every valid name
    Err(build_catalog(key).expect_err("not a built-in name").into())
}

impl ExperimentConfig {
    /// Loads a TOML config, or the config echoed inside a run manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig = if path.extension().is_some_and(|e| e == "json") {
            #[derive(Deserialize)]
            struct Echo {
                config: ExperimentConfig,
            }
            serde_json::from_str::<Echo>(&text)
                .with_context(|| format!("{} is not a run manifest with a config field", path.display()))?
                .config
        } else {
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("seeds must list at least one seed");
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            bail!("seeds must not repeat");
        }
        if self.catalogs.is_empty() {
            bail!("catalogs must name at least one catalog");
        }
        if self.data_dir.is_none() {
            self.synth_config(0).validate()?;
        }
        self.classifier_config(0, 2)?.validate()?;
        self.pair_config(0)?.validate()?;
        let (lo, hi) = self.window;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            bail!("window = [{lo}, {hi}] must be an ordered pair inside [0, 1]");
        }
        for c in &self.compare {
            let Some((a, b)) = c.split_once(':') else {
                bail!("compare entry {c:?} must look like \"catalog_a:catalog_b\"");
            };
            for side in [a, b] {
                if !self.catalogs.iter().any(|k| k == side) {
                    bail!("compare entry {c:?} names {side:?}, which is not in catalogs");
                }
            }
        }
        Ok(())
    }

    pub fn synth_config(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            n_inliers: self.n_inliers,
            n_outliers: self.n_outliers,
            train: self.train,
            validation: self.validation,
            side: self.side,
            channels: self.channels,
            psf_sigma_range: self.psf_sigma_range,
            noise_sigma: self.noise_sigma,
            jitter: self.jitter,
            amplitude_range: self.amplitude_range,
            dipole_separation: self.dipole_separation,
            hot_pixel_range: self.hot_pixel_range,
            artifact_mix: self.artifact_mix,
            seed,
        }
    }

    pub fn classifier_config(&self, seed: u64, n_classes: usize) -> Result<ClassifierConfig> {
        Ok(ClassifierConfig {
            architecture: architecture("architecture", &self.architecture)?,
            n_classes,
            batch_size: self.batch_size,
            optimizer: AdamConfig {
                learning_rate: self.learning_rate,
                beta1: self.beta1,
                beta2: self.beta2,
                epsilon: self.epsilon,
            },
            max_epochs: self.max_epochs,
            patience: self.patience,
            early_stopping: self.early_stopping,
            seed,
            width: self.width,
        })
    }

    pub fn pair_config(&self, seed: u64) -> Result<ClassifierConfig> {
        Ok(ClassifierConfig {
            architecture: architecture("pair_architecture", &self.pair_architecture)?,
            max_epochs: self.pair_max_epochs,
            patience: self.pair_patience,
            width: self.pair_width,
            ..default_pair_config(seed)
        })
    }

    pub fn catalogs(&self) -> Result<Vec<Catalog>> {
        let out: Vec<Catalog> = self
            .catalogs
            .iter()
            .map(|key| {
                Ok(Catalog {
                    key: key.clone(),
                    set: resolve_catalog(key)?,
                })
            })
            .collect::<Result<_>>()?;
        for (i, a) in out.iter().enumerate() {
            if let Some(b) = out[..i].iter().find(|b| b.label() == a.label()) {
                bail!(
                    "catalogs {:?} and {:?} would share the artifact directory {:?}",
                    b.key,
                    a.key,
                    a.label()
                );
            }
        }
        Ok(out)
    }

    /// Welch comparisons as index pairs into `catalogs`.
    pub fn comparisons(&self) -> Vec<(usize, usize)> {
        let index = |k: &str| self.catalogs.iter().position(|c| c == k).expect("validated");
        if self.compare.is_empty() {
            let n = self.catalogs.len();
            return (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
        }
        self.compare
            .iter()
            .map(|c| {
                let (a, b) = c.split_once(':').expect("validated");
                (index(a), index(b))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg: ExperimentConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        cfg.validate().unwrap();
        assert_eq!(
            cfg.synth_config(4),
            SynthConfig {
                seed: 4,
                ..Default::default()
            }
        );
        assert_eq!(cfg.classifier_config(0, 2).unwrap(), ClassifierConfig::default());
        assert_eq!(cfg.pair_config(5).unwrap(), default_pair_config(5));
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = toml::from_str::<ExperimentConfig>("max_epoch = 3").unwrap_err();
        assert!(err.to_string().contains("max_epoch"), "{err}");
        assert!(toml::from_str::<ExperimentConfig>("[synth]\nside = 15").is_err());
    }

    #[test]
    fn rejects_bad_values() {
        let bad = |text: &str| {
            toml::from_str::<ExperimentConfig>(text)
                .unwrap()
                .validate()
                .unwrap_err()
                .to_string()
        };
        assert!(bad("architecture = \"resnet\"").contains("wrn_10_4"));
        assert!(bad("seeds = [1, 1]").contains("repeat"));
        assert!(bad("compare = [\"shifts9\"]").contains("catalog_a:catalog_b"));
        assert!(bad("compare = [\"shifts9:geo72\"]").contains("not in catalogs"));
        assert!(bad("window = [0.6, 0.4]").contains("window"));
    }

    #[test]
    fn unknown_catalog_lists_valid_names() {
        let cfg: ExperimentConfig = toml::from_str("catalogs = [\"geo100\"]").unwrap();
        let msg = cfg.catalogs().unwrap_err().to_string();
        for name in CATALOG_NAMES {
            assert!(msg.contains(name), "{msg}");
        }
    }

    #[test]
    fn default_comparisons_cover_every_pair() {
        let cfg: ExperimentConfig = toml::from_str("catalogs = [\"geo72\", \"geo99\", \"shifts9\"]").unwrap();
        assert_eq!(cfg.comparisons(), vec![(0, 1), (0, 2), (1, 2)]);
        let cfg: ExperimentConfig =
            toml::from_str("catalogs = [\"geo72\", \"geo99\"]\ncompare = [\"geo99:geo72\"]").unwrap();
        assert_eq!(cfg.comparisons(), vec![(1, 0)]);
    }
}
