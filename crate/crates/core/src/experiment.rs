//! Named experiment presets: feature set, corpus filter and the best grid
//! cell reported for each.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::features::FeatureConfig;
use crate::midi::TimeSignature;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Experiment {
    /// No structure features.
    Baseline,
    /// Count-down column only.
    Countdown,
    /// Whole-beat marker only.
    MeterMarker,
    /// Count-down and beat marker.
    Combined,
    /// Count-down and beat marker, 4/4 pieces only.
    CommonTime,
}

/// Hyperparameters and losses of the best grid cell for one experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reference {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub dropout_keep: f64,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub seconds_per_epoch: f64,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::Baseline,
        Experiment::Countdown,
        Experiment::MeterMarker,
        Experiment::Combined,
        Experiment::CommonTime,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Experiment::Baseline => "BL",
            Experiment::Countdown => "CD",
            Experiment::MeterMarker => "MM",
            Experiment::Combined => "FC",
            Experiment::CommonTime => "4/4",
        }
    }

    pub fn features(&self) -> FeatureConfig {
        match self {
            Experiment::Baseline => FeatureConfig::NONE,
            Experiment::Countdown => FeatureConfig::countdown(),
            Experiment::MeterMarker => FeatureConfig::beat_marker(),
            Experiment::Combined | Experiment::CommonTime => FeatureConfig::countdown_and_beat(),
        }
    }

    pub fn time_signature_filter(&self) -> Option<TimeSignature> {
        match self {
            Experiment::CommonTime => Some(TimeSignature::COMMON),
            _ => None,
        }
    }

    pub fn reference(&self) -> Reference {
        let (num_layers, hidden_size, dropout_keep, train_loss, valid_loss, seconds_per_epoch) = match self {
            Experiment::Baseline => (2, 150, 0.5, 0.29601, 0.51209, 74.48),
            Experiment::Countdown => (2, 100, 0.5, 0.39425, 0.47357, 58.57),
            Experiment::MeterMarker => (2, 200, 0.3, 0.30572, 0.48993, 82.54),
            Experiment::Combined => (2, 200, 0.3, 0.34760, 0.46932, 116.5),
            Experiment::CommonTime => (2, 200, 0.5, 0.27501, 0.46910, 85.17),
        };
        Reference {
            num_layers,
            hidden_size,
            dropout_keep,
            train_loss,
            valid_loss,
            seconds_per_epoch,
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "BL" => Ok(Experiment::Baseline),
            "CD" => Ok(Experiment::Countdown),
            "MM" => Ok(Experiment::MeterMarker),
            "FC" | "CM" => Ok(Experiment::Combined),
            "4/4" | "44" => Ok(Experiment::CommonTime),
            _ => Err(format!("unknown experiment {s:?} (expected BL, CD, MM, FC or 4/4)")),
        }
    }
}

impl From<Experiment> for String {
    fn from(e: Experiment) -> String {
        e.label().to_string()
    }
}

impl TryFrom<String> for Experiment {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}
