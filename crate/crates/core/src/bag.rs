//! Bags of instance features and their task labels.

use serde::{Deserialize, Serialize};

use crate::error::{MicoError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Survival,
    Subtype,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Task::Survival => f.write_str("survival"),
            Task::Subtype => f.write_str("subtype"),
        }
    }
}

impl std::str::FromStr for Task {
    type Err = MicoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "survival" => Ok(Task::Survival),
            "subtype" => Ok(Task::Subtype),
            other => Err(MicoError::Config(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalLabel {
    pub time: f64,
    /// `true` when the event was observed, `false` when censored.
    pub event: bool,
    /// Discrete-time bin, assigned from the training split's quantile edges.
    pub bin: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtypeLabel {
    pub class_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Survival(SurvivalLabel),
    Subtype(SubtypeLabel),
}

impl Label {
    pub fn task(&self) -> Task {
        match self {
            Label::Survival(_) => Task::Survival,
            Label::Subtype(_) => Task::Subtype,
        }
    }

    pub fn survival(&self) -> Option<&SurvivalLabel> {
        match self {
            Label::Survival(s) => Some(s),
            Label::Subtype(_) => None,
        }
    }

    pub fn subtype(&self) -> Option<&SubtypeLabel> {
        match self {
            Label::Subtype(s) => Some(s),
            Label::Survival(_) => None,
        }
    }
}

/// One slide: an `M x d` instance matrix plus metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBag {
    pub bag_id: String,
    pub features: Tensor,
    /// Grid position of each instance. Never read by the model.
    pub coords: Option<Vec<[f64; 2]>>,
    pub label: Label,
    /// Generator ground truth: prototype index of each instance.
    pub true_type_map: Option<Vec<u32>>,
}

impl FeatureBag {
    pub fn new(bag_id: impl Into<String>, features: Tensor, label: Label) -> Result<Self> {
        let bag = FeatureBag {
            bag_id: bag_id.into(),
            features,
            coords: None,
            label,
            true_type_map: None,
        };
        bag.validate()?;
        Ok(bag)
    }

    /// Number of instances `M`.
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.rank() != 2 {
            return Err(MicoError::Data(format!(
                "bag `{}`: features must be M x d, got {:?}",
                self.bag_id,
                self.features.shape()
            )));
        }
        if !self.features.is_finite() {
            return Err(MicoError::Data(format!("bag `{}`: non-finite feature", self.bag_id)));
        }
        let m = self.len();
        if self.coords.as_ref().is_some_and(|c| c.len() != m) {
            return Err(MicoError::Data(format!("bag `{}`: coords length != M", self.bag_id)));
        }
        if self.true_type_map.as_ref().is_some_and(|t| t.len() != m) {
            return Err(MicoError::Data(format!("bag `{}`: type map length != M", self.bag_id)));
        }
        Ok(())
    }

    /// Same bag with instances reordered: new row `i` is old row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> FeatureBag {
        FeatureBag {
            bag_id: self.bag_id.clone(),
            features: self.features.select_rows(perm),
            coords: self.coords.as_ref().map(|c| perm.iter().map(|&i| c[i]).collect()),
            label: self.label,
            true_type_map: self
                .true_type_map
                .as_ref()
                .map(|t| perm.iter().map(|&i| t[i]).collect()),
        }
    }
}
