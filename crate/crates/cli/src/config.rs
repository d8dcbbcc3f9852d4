//! Experiment configuration: one TOML file, strict schema, every component
//! seed derived from the root `seed`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use stegattack::attack::LossWeights;
use stegattack::dataset::DatasetSpec;
use stegattack::oracle::OracleConfig;
use stegattack::seed::derive;
use stegattack::training::TrainSchedule;

pub const DATA_DIR_ENV: &str = "STEGATTACK_DATA_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Root of all randomness; per-component seeds are derived from it.
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub oracle: OracleConfig,
    pub attack: AttackSection,
    pub tuples: TupleSection,
    pub evaluate: EvaluateSection,
    pub paths: PathSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub weights: LossWeights,
    pub schedule: TrainSchedule,
    /// Write the resumable training state every this many epochs (and always
    /// at the end).
    pub checkpoint_every: usize,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            schedule: TrainSchedule::default(),
            checkpoint_every: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TupleSection {
    pub train_budget: usize,
    pub test_budget: usize,
    /// Directory of real target-domain images for the discriminator. When
    /// unset, the dataset's validation split is used.
    pub real_root: Option<PathBuf>,
}

impl Default for TupleSection {
    fn default() -> Self {
        Self {
            train_budget: 500,
            test_budget: 100,
            real_root: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    /// Tuples per panel image.
    pub panel_row_width: usize,
    pub include_alpha: bool,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            panel_row_width: 8,
            include_alpha: false,
        }
    }
}

/// Output layout. Relative entries are resolved against `out_dir`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathSection {
    pub out_dir: PathBuf,
    pub checkpoints: PathBuf,
    pub tuples: PathBuf,
    pub reports: PathBuf,
    pub panels: PathBuf,
    pub figures: PathBuf,
}

impl Default for PathSection {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            checkpoints: PathBuf::from("checkpoints"),
            tuples: PathBuf::from("tuples"),
            reports: PathBuf::from("reports"),
            panels: PathBuf::from("panels"),
            figures: PathBuf::from("figures"),
        }
    }
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetSpec {
                root_path: PathBuf::new(),
                ..DatasetSpec::default()
            },
            oracle: OracleConfig::default(),
            attack: AttackSection::default(),
            tuples: TupleSection::default(),
            evaluate: EvaluateSection::default(),
            paths: PathSection::default(),
        }
    }
}

/// Per-component seeds live under the root seed, so they are not accepted in
/// the file.
const DERIVED_SEEDS: [&[&str]; 3] = [
    &["dataset", "seed"],
    &["oracle", "seed"],
    &["attack", "schedule", "seed"],
];

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let value: toml::Table = toml::from_str(text).context("config is not valid TOML")?;
        for key in DERIVED_SEEDS {
            let (last, parents) = key.split_last().expect("non-empty key");
            let table = parents
                .iter()
                .try_fold(&value, |t, part| t.get(*part).and_then(toml::Value::as_table));
            if table.is_some_and(|t| t.contains_key(*last)) {
                bail!(
                    "unknown config key `{}`: component seeds are derived from the root `seed`",
                    key.join(".")
                );
            }
        }
        let mut config: Config = toml::from_str(text).context("invalid config")?;
        let has_root = value
            .get("dataset")
            .and_then(toml::Value::as_table)
            .is_some_and(|t| t.contains_key("root_path"));
        if !has_root {
            // leave room for the command-line and environment fallbacks
            config.dataset.root_path = PathBuf::new();
        }
        Ok(config)
    }

    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("in {}", p.display()))?
            }
            None => Config::default(),
        };
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        if let Some(dir) = &overrides.out_dir {
            config.paths.out_dir = dir.clone();
        }
        if let Some(dir) = &overrides.data_dir {
            config.dataset.root_path = dir.clone();
        } else if config.dataset.root_path.as_os_str().is_empty() {
            if let Some(dir) = std::env::var_os(DATA_DIR_ENV) {
                config.dataset.root_path = PathBuf::from(dir);
            }
        }
        config.expand_seeds();
        Ok(config)
    }

    /// Fills the component seeds from the root seed.
    pub fn expand_seeds(&mut self) {
        self.dataset.seed = derive(self.seed, "dataset", 0);
        self.oracle.seed = derive(self.seed, "oracle", 0);
        self.attack.schedule.seed = derive(self.seed, "attack", 0);
    }

    pub fn evaluation_seed(&self) -> u64 {
        derive(self.seed, "evaluate", 0)
    }

    pub fn attack_noise_seed(&self) -> u64 {
        derive(self.seed, "attack-command", 0)
    }

    /// The dataset root, or an error naming both ways to provide one.
    pub fn data_root(&self) -> Result<&Path> {
        if self.dataset.root_path.as_os_str().is_empty() {
            bail!(
                "no dataset root: set `dataset.root_path`, pass --data-dir or export {DATA_DIR_ENV}"
            );
        }
        Ok(&self.dataset.root_path)
    }

    fn under_out(&self, p: &Path) -> PathBuf {
        self.paths.out_dir.join(p)
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.under_out(&self.paths.checkpoints)
    }

    pub fn oracle_checkpoint(&self) -> PathBuf {
        self.checkpoint_dir().join("oracle.ckpt")
    }

    pub fn attack_checkpoint(&self) -> PathBuf {
        self.checkpoint_dir().join("attack.ckpt")
    }

    pub fn attack_state(&self) -> PathBuf {
        self.checkpoint_dir().join("attack_state.ckpt")
    }

    pub fn tuple_dir(&self, split: &str) -> PathBuf {
        self.under_out(&self.paths.tuples).join(split)
    }

    pub fn report_dir(&self) -> PathBuf {
        self.under_out(&self.paths.reports)
    }

    pub fn panel_dir(&self) -> PathBuf {
        self.under_out(&self.paths.panels)
    }

    pub fn figure_dir(&self) -> PathBuf {
        self.under_out(&self.paths.figures)
    }

    pub fn to_toml(&self) -> Result<String> {
        // Derived seeds span the full u64 range, which TOML integers cannot
        // hold; they are dropped from the table and recorded in a comment.
        let mut plain = self.clone();
        plain.dataset.seed = 0;
        plain.oracle.seed = 0;
        plain.attack.schedule.seed = 0;
        let mut table = toml::Table::try_from(&plain)?;
        for key in DERIVED_SEEDS {
            let (last, parents) = key.split_last().expect("non-empty key");
            let mut node = &mut table;
            for part in parents {
                node = node
                    .get_mut(*part)
                    .and_then(toml::Value::as_table_mut)
                    .expect("config sections serialize as tables");
            }
            node.remove(*last);
        }
        Ok(format!(
            "# effective configuration\n# derived seeds: dataset {}, oracle {}, attack {}\n{}",
            self.dataset.seed,
            self.oracle.seed,
            self.attack.schedule.seed,
            toml::to_string_pretty(&table)?
        ))
    }

    /// Writes the effective config next to the command's outputs.
    pub fn archive(&self, command: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.paths.out_dir)
            .with_context(|| format!("creating {}", self.paths.out_dir.display()))?;
        let path = self.paths.out_dir.join(format!("config.{command}.toml"));
        std::fs::write(&path, self.to_toml()?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_named() {
        let err = Config::parse("[attack.weights]\nalpah = 1.0\n").unwrap_err();
        assert!(format!("{err:#}").contains("alpah"), "{err:#}");
    }

    #[test]
    fn component_seed_keys_are_rejected() {
        let err = Config::parse("[oracle]\nseed = 3\n").unwrap_err();
        assert!(format!("{err:#}").contains("oracle.seed"), "{err:#}");
    }

    #[test]
    fn effective_config_round_trips() {
        let mut c = Config::parse("seed = 9\n[tuples]\ntrain_budget = 40\n").unwrap();
        c.expand_seeds();
        let mut back = Config::parse(&c.to_toml().unwrap()).unwrap();
        back.expand_seeds();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = Config::parse(
            "[attack.weights]\nalpha = 0.05\n[attack.schedule.learning_rates]\ndecoder = 1e-3\n",
        )
        .unwrap();
        assert_eq!(c.attack.weights.alpha, 0.05);
        assert_eq!(c.attack.weights.gamma, LossWeights::default().gamma);
        assert_eq!(c.attack.schedule.learning_rates.decoder, 1e-3);
        assert_eq!(
            c.attack.schedule.learning_rates.discriminator,
            TrainSchedule::default().learning_rates.discriminator
        );
    }

    #[test]
    fn flags_take_precedence() {
        let o = Overrides {
            seed: Some(4),
            out_dir: Some("elsewhere".into()),
            data_dir: Some("imgs".into()),
        };
        let c = Config::load(None, &o).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.paths.out_dir, PathBuf::from("elsewhere"));
        assert_eq!(c.dataset.root_path, PathBuf::from("imgs"));
        assert_eq!(c.oracle.seed, derive(4, "oracle", 0));
    }
}
