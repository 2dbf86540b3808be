use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::labels::EmotionLabel;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Audio,
    Video,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Audio, Modality::Video];

    pub fn tag(self) -> u8 {
        match self {
            Modality::Text => 0,
            Modality::Audio => 1,
            Modality::Video => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Modality::Text),
            1 => Some(Modality::Audio),
            2 => Some(Modality::Video),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Audio => "audio",
            Modality::Video => "video",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Optional raw inputs. Audio and video are opaque references (paths or keys).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawPayloads {
    pub text: Option<String>,
    pub audio: Option<String>,
    pub video: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Utterance {
    pub utterance_id: String,
    pub speaker_id: u32,
    pub label: EmotionLabel,
    pub payloads: RawPayloads,
}

/// An ordered dialogue. Utterance order is fixed at construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conversation {
    id: String,
    split: Split,
    utterances: Vec<Utterance>,
}

impl Conversation {
    pub fn new(id: impl Into<String>, split: Split, utterances: Vec<Utterance>) -> Result<Self> {
        let id = id.into();
        if utterances.is_empty() {
            return Err(Error::Validation(format!(
                "conversation {id} has no utterances"
            )));
        }
        let mut seen = HashSet::new();
        for u in &utterances {
            if !seen.insert(u.utterance_id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate utterance id {} in conversation {id}",
                    u.utterance_id
                )));
            }
        }
        Ok(Self {
            id,
            split,
            utterances,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.utterances.iter().map(|u| u.label.id).collect()
    }

    pub fn speakers(&self) -> Vec<u32> {
        self.utterances.iter().map(|u| u.speaker_id).collect()
    }
}

/// Conversations of one split, in their original order.
pub fn of_split(convs: &[Conversation], split: Split) -> Vec<&Conversation> {
    convs.iter().filter(|c| c.split() == split).collect()
}
