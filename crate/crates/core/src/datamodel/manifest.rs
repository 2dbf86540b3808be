//! JSON-lines conversation manifests, one conversation per line.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::conversation::{Conversation, RawPayloads, Split, Utterance};
use super::labels::LabelSpace;
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConversationLine {
    conversation_id: String,
    split: Split,
    utterances: Vec<UtteranceLine>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UtteranceLine {
    utterance_id: String,
    speaker_id: u32,
    label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    audio: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    video: Option<String>,
}

/// Parses manifest text. Blank lines are skipped; utterance and conversation
/// ids must be unique across the whole manifest.
pub fn parse_manifest(text: &str, labels: &LabelSpace) -> Result<Vec<Conversation>> {
    let mut out = Vec::new();
    let mut utt_ids = HashSet::new();
    let mut conv_ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ConversationLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        if !conv_ids.insert(parsed.conversation_id.clone()) {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("duplicate conversation id {}", parsed.conversation_id),
            });
        }
        let mut utts = Vec::with_capacity(parsed.utterances.len());
        for u in parsed.utterances {
            let label = labels.by_name(&u.label).ok_or_else(|| Error::Parse {
                line: lineno,
                msg: format!(
                    "unknown label {:?} for label space {}",
                    u.label,
                    labels.name()
                ),
            })?;
            if !utt_ids.insert(u.utterance_id.clone()) {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("duplicate utterance id {}", u.utterance_id),
                });
            }
            utts.push(Utterance {
                utterance_id: u.utterance_id,
                speaker_id: u.speaker_id,
                label: label.clone(),
                payloads: RawPayloads {
                    text: u.text,
                    audio: u.audio,
                    video: u.video,
                },
            });
        }
        let conv = Conversation::new(parsed.conversation_id, parsed.split, utts).map_err(|e| {
            Error::Parse {
                line: lineno,
                msg: e.to_string(),
            }
        })?;
        out.push(conv);
    }
    Ok(out)
}

pub fn load_conversation_manifest(
    path: impl AsRef<Path>,
    labels: &LabelSpace,
) -> Result<Vec<Conversation>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, labels)
}

pub fn render_manifest(convs: &[Conversation]) -> String {
    let mut out = String::new();
    for c in convs {
        let line = ConversationLine {
            conversation_id: c.id().to_string(),
            split: c.split(),
            utterances: c
                .utterances()
                .iter()
                .map(|u| UtteranceLine {
                    utterance_id: u.utterance_id.clone(),
                    speaker_id: u.speaker_id,
                    label: u.label.name.clone(),
                    text: u.payloads.text.clone(),
                    audio: u.payloads.audio.clone(),
                    video: u.payloads.video.clone(),
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&line).expect("plain struct"));
        out.push('\n');
    }
    out
}

pub fn write_manifest(convs: &[Conversation], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, render_manifest(convs)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINE: &str = r#"{"conversation_id":"c1","split":"train","utterances":[{"utterance_id":"u1","speaker_id":0,"label":"joy","text":"hi"},{"utterance_id":"u2","speaker_id":1,"label":"anger"}]}"#;

    #[test]
    fn empty_manifest_is_empty() {
        assert!(parse_manifest("", &LabelSpace::meld()).unwrap().is_empty());
        assert!(parse_manifest("\n  \n", &LabelSpace::meld())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn parses_labels_against_space() {
        let convs = parse_manifest(LINE, &LabelSpace::meld()).unwrap();
        assert_eq!(convs.len(), 1);
        let u = &convs[0].utterances()[0];
        assert_eq!(u.label.id, 4);
        assert_eq!(u.label.name, "joy");
        assert_eq!(u.payloads.text.as_deref(), Some("hi"));
        assert_eq!(convs[0].utterances()[1].utterance_id, "u2");
    }

    #[test]
    fn errors_carry_line_numbers() {
        let bad_label = LINE.replace("\"joy\"", "\"confusion\"");
        let text = format!("\n{bad_label}\n");
        match parse_manifest(&text, &LabelSpace::meld()) {
            Err(Error::Parse { line: 2, msg }) => assert!(msg.contains("confusion")),
            other => panic!("unexpected {other:?}"),
        }

        let missing = r#"{"conversation_id":"c1","split":"train","utterances":[{"utterance_id":"u1","label":"joy"}]}"#;
        assert!(matches!(
            parse_manifest(missing, &LabelSpace::meld()),
            Err(Error::Parse { line: 1, .. })
        ));

        let dup = format!("{LINE}\n{}", LINE.replace("\"c1\"", "\"c2\""));
        match parse_manifest(&dup, &LabelSpace::meld()) {
            Err(Error::Parse { line: 2, msg }) => assert!(msg.contains("duplicate")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn render_round_trips() {
        let convs = parse_manifest(LINE, &LabelSpace::meld()).unwrap();
        let again = parse_manifest(&render_manifest(&convs), &LabelSpace::meld()).unwrap();
        assert_eq!(again, convs);
    }
}
