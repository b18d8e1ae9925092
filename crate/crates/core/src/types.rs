use std::fmt;

use serde::{Deserialize, Serialize};

/// Lung cancer subtype. LUSC is the positive class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subtype {
    #[serde(rename = "LUAD")]
    Luad,
    #[serde(rename = "LUSC")]
    Lusc,
}

impl Subtype {
    pub fn target(self) -> f64 {
        match self {
            Subtype::Luad => 0.0,
            Subtype::Lusc => 1.0,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Subtype::Lusc
    }

    pub fn from_positive(positive: bool) -> Self {
        if positive {
            Subtype::Lusc
        } else {
            Subtype::Luad
        }
    }
}

impl fmt::Display for Subtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Subtype::Luad => "LUAD",
            Subtype::Lusc => "LUSC",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "CT")]
    Ct,
    #[serde(rename = "PATH")]
    Path,
}

/// Whether a batch carries pathology alongside CT.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BatchMode {
    #[serde(rename = "PAIRED")]
    Paired,
    #[serde(rename = "CT_ONLY")]
    CtOnly,
}

impl BatchMode {
    pub fn is_paired(self) -> bool {
        self == BatchMode::Paired
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BatchMode::Paired => "paired",
            BatchMode::CtOnly => "ct_only",
        }
    }
}

impl fmt::Display for BatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}
