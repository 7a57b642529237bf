use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Which enhancement branch an image takes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Route {
    /// Uniformly dark: scene-wide correction.
    Global,
    /// Unevenly lit: spatially selective correction.
    Local,
}

impl Route {
    pub fn as_str(self) -> &'static str {
        match self {
            Route::Global => "global",
            Route::Local => "local",
        }
    }
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Route {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "global" => Ok(Route::Global),
            "local" => Ok(Route::Local),
            other => Err(Error::InvalidArgument(format!("unknown route `{other}`"))),
        }
    }
}

/// Classifier decision with its probability of [`Route::Global`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IlluminationLabel {
    pub label: Route,
    pub probability: f64,
}

impl IlluminationLabel {
    /// Applies the 0.5 rule; ties go to `Global`.
    pub fn from_probability(probability: f64) -> Self {
        let label = if probability >= 0.5 {
            Route::Global
        } else {
            Route::Local
        };
        IlluminationLabel { label, probability }
    }
}
