//! One declarative run configuration covering every pipeline stage.
//!
//! The file is TOML with one section per stage; unknown keys are
//! rejected, and every omitted key takes the default documented on its
//! field. A top-level `seed` replaces each stage's own seed, so a whole
//! run reproduces from a single number. Command-line flags override file
//! values after loading.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detect::DetectionConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::parser::{AdapterKind, ParserConfig};
use crate::synth::SynthSpec;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// Group events by their session key.
    Session,
    /// Group events into tumbling time windows.
    Window,
}

impl std::str::FromStr for Grouping {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "session" => Ok(Grouping::Session),
            "window" => Ok(Grouping::Window),
            other => Err(Error::Usage(format!(
                "unknown grouping '{other}', expected session or window"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceSettings {
    pub grouping: Grouping,
    /// Tumbling window width for window grouping, in seconds.
    pub window_secs: i64,
}

impl Default for SequenceSettings {
    fn default() -> Self {
        SequenceSettings {
            grouping: Grouping::Session,
            window_secs: 3600,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, replaces the seed of every stage below.
    pub seed: Option<u64>,
    /// Input line format for `parse`.
    pub adapter: AdapterKind,
    pub parser: ParserConfig,
    pub sequence: SequenceSettings,
    /// `vocab_size` 0 means "fill in from the data's vocabulary".
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub detect: DetectionConfig,
    pub synth: SynthSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            adapter: AdapterKind::Generic,
            parser: ParserConfig::default(),
            sequence: SequenceSettings::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            detect: DetectionConfig::default(),
            synth: SynthSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Materialize the effective configuration: the run seed, when given,
    /// flows into every stage. Model initialization uses the train seed.
    pub fn resolve(&self) -> RunConfig {
        let mut out = self.clone();
        if let Some(seed) = self.seed {
            out.train.seed = seed;
            out.detect.seed = seed;
            out.synth.seed = seed;
        }
        out
    }

    /// Stable TOML rendering, echoed so every run documents the exact
    /// settings it used.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::DetectMode;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.model.d_embed, 50);
        assert_eq!(c.train.epochs, 200);
        assert_eq!(c.detect.top_g, 10);
    }

    #[test]
    fn sections_override_their_fields_only() {
        let c = RunConfig::from_toml(
            "seed = 7\n\n[model]\nd_model = 64\n\n[detect]\nmode = \"distance\"\n",
        )
        .unwrap();
        assert_eq!(c.seed, Some(7));
        assert_eq!(c.model.d_model, 64);
        assert_eq!(c.model.d_embed, 50);
        assert_eq!(c.detect.mode, DetectMode::Distance);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[train]\nbogus = 1").is_err());
        assert!(RunConfig::from_toml("[model]\nd_modell = 8").is_err());
    }

    #[test]
    fn run_seed_flows_into_every_stage() {
        let c = RunConfig::from_toml("seed = 99").unwrap().resolve();
        assert_eq!(c.train.seed, 99);
        assert_eq!(c.detect.seed, 99);
        assert_eq!(c.synth.seed, 99);
        // without a run seed, stage seeds stand
        let c = RunConfig::from_toml("[train]\nseed = 5").unwrap().resolve();
        assert_eq!(c.train.seed, 5);
        assert_eq!(c.detect.seed, 0);
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.seed = Some(3);
        c.train.alpha = 0.25;
        c.detect.mode = DetectMode::Distance;
        c.detect.distance_threshold = 1.5;
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn infinite_distance_threshold_survives_toml() {
        let c = RunConfig::default();
        assert!(c.detect.distance_threshold.is_infinite());
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert!(back.detect.distance_threshold.is_infinite());
    }

    #[test]
    fn warmup_center_update_round_trips() {
        let mut c = RunConfig::default();
        c.train.center_update = crate::train::CenterUpdate::FixedAfterWarmup { warmup_epochs: 4 };
        let text = c.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, c);
    }
}
