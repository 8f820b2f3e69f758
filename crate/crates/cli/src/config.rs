use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use update_core::dataset::{default_updates, GrammarConfig, ReverseRule, SplitSizes, UpdateSpec};
use update_core::model::ParserConfig;
use update_core::strategies::{ClassifierConfig, Strategy};

use crate::CliError;

/// Everything one experiment depends on, read from a single TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub corpus: CorpusConfig,
    pub splits: SplitSizes,
    pub model: ModelSection,
    pub classifier: ClassifierConfig,
    pub run: RunSection,
    pub curve: CurveSection,
    /// Update specs; the five standard ones when absent.
    pub updates: Vec<UpdateSpec>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    /// Corpus TSV to use instead of the toy generator.
    pub path: Option<PathBuf>,
    pub grammar: GrammarConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Paper,
    #[default]
    Desk,
}

/// The published hyperparameters and the desk-scale block that overrides them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub scale: Scale,
    pub paper: ParserConfig,
    pub desk: ParserConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { scale: Scale::Desk, paper: ParserConfig::full_scale(), desk: ParserConfig::default() }
    }
}

impl ModelSection {
    pub fn active(&self) -> &ParserConfig {
        match self.scale {
            Scale::Paper => &self.paper,
            Scale::Desk => &self.desk,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub strategies: Vec<Strategy>,
    /// Update names to run; all configured updates when empty.
    pub updates: Vec<String>,
    pub seeds: Vec<u64>,
    pub workers: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { strategies: Strategy::ALL.to_vec(), updates: Vec::new(), seeds: vec![1, 2, 3, 4, 5], workers: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurveSection {
    pub sizes: Vec<usize>,
    /// Changed examples kept with stale labels in V1.
    pub conflicting: usize,
    pub test_per_partition: usize,
    pub updates: Vec<String>,
    pub seeds: Vec<u64>,
}

impl Default for CurveSection {
    fn default() -> Self {
        CurveSection {
            sizes: vec![25, 50, 100, 200],
            conflicting: 50,
            test_per_partition: 100,
            updates: Vec::new(),
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

impl Default for Config {
    fn default() -> Self {
        Config {
            corpus: CorpusConfig::default(),
            splits: SplitSizes::default(),
            model: ModelSection::default(),
            classifier: ClassifierConfig::default(),
            run: RunSection::default(),
            curve: CurveSection::default(),
            updates: default_updates(),
        }
    }
}

/// Command-line selections layered over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub strategies: Option<Vec<Strategy>>,
    pub updates: Option<Vec<String>>,
    pub seeds: Option<Vec<u64>>,
    pub sizes: Option<Vec<usize>>,
    pub workers: Option<usize>,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Config::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Config, CliError> {
        let cfg: Config = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = &o.strategies {
            self.run.strategies = s.clone();
        }
        if let Some(u) = &o.updates {
            self.run.updates = u.clone();
            self.curve.updates = u.clone();
        }
        if let Some(s) = &o.seeds {
            self.run.seeds = s.clone();
            self.curve.seeds = s.clone();
        }
        if let Some(s) = &o.sizes {
            self.curve.sizes = s.clone();
        }
        if let Some(w) = o.workers {
            self.run.workers = w;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.active().validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.updates.is_empty() {
            return Err(CliError::Config("no update specs configured".into()));
        }
        for spec in &self.updates {
            spec.validate()?;
        }
        for name in self.run.updates.iter().chain(&self.curve.updates) {
            self.update(name)?;
        }
        if self.run.seeds.is_empty() || self.curve.seeds.is_empty() {
            return Err(CliError::Config("at least one seed is required".into()));
        }
        if self.curve.sizes.is_empty() {
            return Err(CliError::Config("curve sizes are empty".into()));
        }
        Ok(())
    }

    pub fn update(&self, name: &str) -> Result<&UpdateSpec, CliError> {
        self.updates
            .iter()
            .find(|u| u.name == name)
            .ok_or_else(|| CliError::Config(format!("unknown update {name:?}")))
    }

    /// Updates selected for `run`, in configuration order.
    pub fn run_updates(&self) -> Vec<&UpdateSpec> {
        select(&self.updates, &self.run.updates)
    }

    pub fn curve_updates(&self) -> Vec<&UpdateSpec> {
        select(&self.updates, &self.curve.updates)
    }

    /// Hash of the settings that determine results. Seed lists, strategy
    /// selection and worker count are excluded so a run can be extended.
    pub fn experiment_hash(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            corpus: &'a CorpusConfig,
            splits: &'a SplitSizes,
            model: &'a ParserConfig,
            classifier: &'a ClassifierConfig,
            updates: &'a [UpdateSpec],
            curve_conflicting: usize,
            curve_test: usize,
        }
        let key = Key {
            corpus: &self.corpus,
            splits: &self.splits,
            model: self.model.active(),
            classifier: &self.classifier,
            updates: &self.updates,
            curve_conflicting: self.curve.conflicting,
            curve_test: self.curve.test_per_partition,
        };
        let bytes = serde_json::to_vec(&key).expect("config serializes");
        format!("{:x}", Sha256::digest(&bytes))
    }
}

fn select<'a>(all: &'a [UpdateSpec], names: &[String]) -> Vec<&'a UpdateSpec> {
    all.iter().filter(|u| names.is_empty() || names.contains(&u.name)).collect()
}

/// Intents an update refers to, on either side of the change.
pub fn referenced_intents(spec: &UpdateSpec) -> Vec<&str> {
    let mut out: Vec<&str> = spec.affected_intents.iter().map(String::as_str).collect();
    for r in &spec.rules {
        match r {
            ReverseRule::MergeIntent { new_intent, merged_into, .. } => {
                out.push(new_intent);
                out.push(merged_into);
            }
            ReverseRule::RemoveArgument { intent_set, .. } => out.extend(intent_set.iter().map(String::as_str)),
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}
