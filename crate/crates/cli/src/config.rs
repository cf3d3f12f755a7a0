use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mpgnn::bench::Variant;
use mpgnn::instance::{read_text, CorpusSpec};
use mpgnn::losses::LossConfig;
use mpgnn::refine::PipelineConfig;
use mpgnn::train::TrainConfig;
use mpgnn::{Error, Result};

/// Everything a run needs. Persisted next to its outputs so the run can be
/// repeated from the file alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub k: usize,
    pub corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub generate: CorpusSpec,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
    pub bench: BenchSection,
    pub verify: VerifySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let generate = CorpusSpec::default();
        Self {
            seed: generate.seed,
            k: generate.k,
            corpus: None,
            checkpoint: None,
            out: None,
            jobs: None,
            generate,
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            pipeline: PipelineConfig::default(),
            bench: BenchSection::default(),
            verify: VerifySection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub variants: Vec<Variant>,
    pub sweep_passes: Vec<usize>,
    /// Extra labelled checkpoints compared alongside `checkpoint`.
    pub models: Vec<LabelledModel>,
}

impl Default for BenchSection {
    fn default() -> Self {
        let d = mpgnn::bench::BenchConfig::default();
        Self {
            variants: d.variants,
            sweep_passes: d.sweep_passes,
            models: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelledModel {
    pub label: String,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    /// Every connected graph up to this many nodes.
    pub max_exhaustive_nodes: usize,
    pub random_graphs: usize,
    pub max_random_nodes: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            max_exhaustive_nodes: 7,
            random_graphs: 500,
            max_random_nodes: 10,
        }
    }
}

impl RunConfig {
    /// Reads TOML, or JSON when the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path).map_err(|e| match e {
            Error::Io { path, source } => {
                Error::Config(format!("cannot read config {}: {source}", path.display()))
            }
            other => other,
        })?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Pushes the top-level seed and `k` into the sections that use them.
    pub fn propagate(&mut self) {
        self.generate.seed = self.seed;
        self.generate.k = self.k;
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!(
                "k must be at least 2, got {}",
                self.k
            )));
        }
        if self.jobs == Some(0) {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        self.loss.validate()?;
        self.train.validate()?;
        self.pipeline
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.pipeline.inference.forward_passes == 0 {
            return Err(Error::Config("passes must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml_and_json() {
        let c = RunConfig::default();
        let t = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&t).unwrap(), c);
        let j = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&j).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sed = 3").is_err());
        assert!(toml::from_str::<RunConfig>("[train]\nepochz = 3").is_err());
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c: RunConfig = toml::from_str("seed = 9\n[train]\nepochs = 7\n").unwrap();
        assert_eq!((c.seed, c.train.epochs), (9, 7));
        assert_eq!(c.k, 3);
    }
}
