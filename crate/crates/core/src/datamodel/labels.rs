use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One emotion category of a label space.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EmotionLabel {
    pub id: usize,
    pub name: String,
}

/// A dense, ordered set of at least two emotion categories.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LabelSpaceRepr", into = "LabelSpaceRepr")]
pub struct LabelSpace {
    name: String,
    labels: Vec<EmotionLabel>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelSpaceRepr {
    name: String,
    labels: Vec<String>,
}

impl TryFrom<LabelSpaceRepr> for LabelSpace {
    type Error = Error;

    fn try_from(r: LabelSpaceRepr) -> Result<Self> {
        LabelSpace::new(r.name, &r.labels)
    }
}

impl From<LabelSpace> for LabelSpaceRepr {
    fn from(s: LabelSpace) -> Self {
        LabelSpaceRepr {
            name: s.name,
            labels: s.labels.into_iter().map(|l| l.name).collect(),
        }
    }
}

pub const MELD_LABELS: [&str; 7] = [
    "neutral", "surprise", "fear", "sadness", "joy", "disgust", "anger",
];

pub const IEMOCAP_LABELS: [&str; 6] = [
    "happiness",
    "sadness",
    "anger",
    "excitement",
    "frustration",
    "neutral",
];

impl LabelSpace {
    pub fn new<S: AsRef<str>>(name: impl Into<String>, names: &[S]) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::Validation(format!(
                "a label space needs at least 2 classes, got {}",
                names.len()
            )));
        }
        let mut labels: Vec<EmotionLabel> = Vec::with_capacity(names.len());
        for (id, n) in names.iter().enumerate() {
            let n = n.as_ref();
            if n.is_empty() || labels.iter().any(|l| l.name == n) {
                return Err(Error::Validation(format!("duplicate or empty label {n:?}")));
            }
            labels.push(EmotionLabel {
                id,
                name: n.to_string(),
            });
        }
        Ok(Self {
            name: name.into(),
            labels,
        })
    }

    pub fn meld() -> Self {
        Self::new("meld", &MELD_LABELS).expect("static preset")
    }

    pub fn iemocap() -> Self {
        Self::new("iemocap", &IEMOCAP_LABELS).expect("static preset")
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "meld" => Some(Self::meld()),
            "iemocap" => Some(Self::iemocap()),
            _ => None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[EmotionLabel] {
        &self.labels
    }

    pub fn get(&self, id: usize) -> Option<&EmotionLabel> {
        self.labels.get(id)
    }

    pub fn by_name(&self, name: &str) -> Option<&EmotionLabel> {
        self.labels.iter().find(|l| l.name == name)
    }
}
