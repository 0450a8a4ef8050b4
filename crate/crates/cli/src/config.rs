use std::path::{Path, PathBuf};

use dvox::data::SynthSpec;
use dvox::eval::CvPlan;
use dvox::model::ModelConfig;
use dvox::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Read volumes from this manifest instead of generating them.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    pub synth: SynthSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs") }
    }
}

/// The whole experiment description. Every command writes the resolved
/// version of this document as `config.toml` into its output directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: CvPlan,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, Failure> {
        let de = toml::Deserializer::parse(text).map_err(|e| Failure::Usage(format!("config: {e}")))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Failure::Usage(format!("config key `{path}`: {}", e.into_inner().message().trim()))
        })
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String, Failure> {
        toml::to_string(self).map_err(|e| Failure::Runtime(format!("serializing config: {e}")))
    }

    /// Points every seed at `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.synth.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
    }

    pub fn validate(&self) -> Result<(), Failure> {
        let section = |name: &str, r: dvox::Result<()>| {
            r.map_err(|e| Failure::Usage(format!("config section `{name}`: {e}")))
        };
        section("data.synth", self.data.synth.validate())?;
        section("model", self.model.validate())?;
        section("train", self.train.validate())?;
        section("eval", self.eval.validate())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_reports_its_path() {
        let err = RunConfig::parse("[train]\nepochz = 3\n").unwrap_err();
        let Failure::Usage(msg) = err else { panic!("{err:?}") };
        assert!(msg.contains("epochz"), "{msg}");
        let err = RunConfig::parse("[train.optimizer]\nkind = \"adam\"\nlr = \"fast\"\n").unwrap_err();
        let Failure::Usage(msg) = err else { panic!("{err:?}") };
        assert!(msg.contains("train.optimizer"), "{msg}");
    }

    #[test]
    fn resolved_document_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.model = cfg.model.with_placement("4, 5 ; 2, 3").unwrap();
        cfg.train.early_stop_patience = Some(2);
        cfg.data.manifest = Some(PathBuf::from("data/manifest.tsv"));
        cfg.set_seed(17);
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }
}
