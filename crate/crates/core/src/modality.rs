//! Imaging modality tags and their per-modality defaults.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Mprage,
    Flair,
    Dwi,
    Ct,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown modality {0:?} (expected mprage, flair, dwi or ct)")]
pub struct UnknownModality(pub String);

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Mprage, Modality::Flair, Modality::Dwi, Modality::Ct];

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Mprage => "mprage",
            Modality::Flair => "flair",
            Modality::Dwi => "dwi",
            Modality::Ct => "ct",
        }
    }

    /// Aggregate CV above which a segmentation is flagged.
    pub fn cv_threshold(self) -> f64 {
        match self {
            Modality::Mprage => 0.010,
            _ => 0.025,
        }
    }

    /// Full-size network input dims used for clinical volumes.
    pub fn clinical_input_dims(self) -> [usize; 3] {
        match self {
            Modality::Mprage | Modality::Flair => [128, 128, 128],
            Modality::Dwi => [160, 160, 32],
            Modality::Ct => [96, 128, 128],
        }
    }

    /// Stable small integer used when deriving seeds.
    pub fn ordinal(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Modality {
    type Err = UnknownModality;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Modality::ALL
            .into_iter()
            .find(|m| m.tag().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| UnknownModality(s.to_string()))
    }
}
