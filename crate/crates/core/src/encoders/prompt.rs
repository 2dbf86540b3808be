//! Context and prompt strings for the masked text encoder.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datamodel::Conversation;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    pub mask_token: String,
    pub sep_token: String,
    /// Keep at most this many whitespace tokens of context, dropping the oldest.
    #[serde(default)]
    pub max_context_tokens: Option<usize>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            mask_token: "<mask>".into(),
            sep_token: "</s>".into(),
            max_context_tokens: None,
        }
    }
}

/// Display names for speaker ids; unnamed speakers render as `Speaker{id}`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SpeakerNames(pub BTreeMap<u32, String>);

impl SpeakerNames {
    pub fn name(&self, id: u32) -> String {
        self.0
            .get(&id)
            .cloned()
            .unwrap_or_else(|| format!("Speaker{id}"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptedInput {
    pub context_string: String,
    pub prompt_string: String,
    pub joined: String,
    /// Index of the mask token in the whitespace tokenization of `joined`.
    pub mask_position: usize,
}

impl PromptedInput {
    pub fn tokens(&self) -> Vec<&str> {
        self.joined.split_whitespace().collect()
    }
}

fn text_of(conv: &Conversation, k: usize) -> Result<(&str, u32)> {
    if k == 0 || k > conv.len() {
        return Err(Error::Input(format!(
            "utterance index {k} outside 1..={} in conversation {}",
            conv.len(),
            conv.id()
        )));
    }
    let u = &conv.utterances()[k - 1];
    let text =
        u.payloads.text.as_deref().ok_or_else(|| {
            Error::Input(format!("utterance {} has no text payload", u.utterance_id))
        })?;
    Ok((text, u.speaker_id))
}

/// `"name_1: t_1 name_2: t_2 ... name_k: t_k"` for the 1-based index `k`.
pub fn build_context(conv: &Conversation, k: usize, names: &SpeakerNames) -> Result<String> {
    text_of(conv, k)?;
    let mut parts = Vec::with_capacity(k);
    for j in 1..=k {
        let (text, speaker) = text_of(conv, j)?;
        parts.push(format!("{}: {}", names.name(speaker), text));
    }
    Ok(parts.join(" "))
}

pub fn build_prompt(
    conv: &Conversation,
    k: usize,
    names: &SpeakerNames,
    cfg: &PromptConfig,
) -> Result<PromptedInput> {
    let mut context_string = build_context(conv, k, names)?;
    if let Some(max) = cfg.max_context_tokens {
        let toks: Vec<&str> = context_string.split_whitespace().collect();
        if toks.len() > max {
            context_string = toks[toks.len() - max..].join(" ");
        }
    }
    let (text, speaker) = text_of(conv, k)?;
    let name = names.name(speaker);
    let prompt_string = format!("For {name}: {text} Now {name} feels {}", cfg.mask_token);
    let joined = format!("{context_string} {} {prompt_string}", cfg.sep_token);
    let positions: Vec<usize> = joined
        .split_whitespace()
        .enumerate()
        .filter(|(_, t)| *t == cfg.mask_token)
        .map(|(i, _)| i)
        .collect();
    match positions.as_slice() {
        [p] => Ok(PromptedInput {
            context_string,
            prompt_string,
            joined,
            mask_position: *p,
        }),
        _ => Err(Error::Input(format!(
            "prompt for utterance {k} of {} contains {} mask tokens",
            conv.id(),
            positions.len()
        ))),
    }
}
