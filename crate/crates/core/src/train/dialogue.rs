use serde::{Deserialize, Serialize};

use crate::data::{tokenize, TokenSeq, SEP};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Assistant,
}

impl Speaker {
    /// Bytes prepended to a turn's text when it is flattened into a prompt.
    pub fn tag(self) -> &'static str {
        match self {
            Speaker::User => "User: ",
            Speaker::Assistant => "Assistant: ",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueHistory {
    pub turns: Vec<Turn>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptResponsePair {
    pub prompt: TokenSeq,
    pub response: TokenSeq,
}

impl PromptResponsePair {
    pub fn from_text(prompt: &str, response: &str) -> Self {
        PromptResponsePair {
            prompt: tokenize(prompt),
            response: tokenize(response),
        }
    }

    /// Positions the model window needs for `BOS x SEP y EOS`: every token
    /// after BOS is predicted from the ones before it.
    pub fn window_len(&self) -> usize {
        self.prompt.len() + self.response.len() + 2
    }
}

/// Folds a multi-round dialogue into one training pair.
///
/// The prompt is every turn but the last, each prefixed with its speaker tag
/// and joined by SEP; the response is the final assistant turn.
pub fn flatten_dialogue(history: &DialogueHistory) -> Result<PromptResponsePair> {
    let turns = &history.turns;
    if turns.len() < 2 {
        return Err(Error::Format(
            "dialogue needs a user turn and an assistant reply".into(),
        ));
    }
    for (i, turn) in turns.iter().enumerate() {
        let expected = if i % 2 == 0 {
            Speaker::User
        } else {
            Speaker::Assistant
        };
        if turn.speaker != expected {
            return Err(Error::Format(format!(
                "turn {i} is {:?}, expected {expected:?} (turns must alternate starting with the user)",
                turn.speaker
            )));
        }
    }
    if turns.len() % 2 != 0 {
        return Err(Error::Format(
            "the last turn must be the assistant's".into(),
        ));
    }
    let (last, context) = turns.split_last().unwrap();
    let mut prompt = TokenSeq::default();
    for (i, turn) in context.iter().enumerate() {
        if i > 0 {
            prompt.push(SEP);
        }
        prompt.extend_from(&tokenize(turn.speaker.tag()));
        prompt.extend_from(&tokenize(&turn.text));
    }
    Ok(PromptResponsePair {
        prompt,
        response: tokenize(&last.text),
    })
}

/// One line of an instruction dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InstructRecord {
    Pair { prompt: String, response: String },
    Dialogue { turns: Vec<Turn> },
}

impl InstructRecord {
    pub fn to_pair(&self) -> Result<PromptResponsePair> {
        match self {
            InstructRecord::Pair { prompt, response } => {
                if prompt.is_empty() || response.is_empty() {
                    return Err(Error::Format(
                        "prompt and response must be non-empty".into(),
                    ));
                }
                Ok(PromptResponsePair::from_text(prompt, response))
            }
            InstructRecord::Dialogue { turns } => flatten_dialogue(&DialogueHistory {
                turns: turns.clone(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::detokenize;

    fn turn(speaker: Speaker, text: &str) -> Turn {
        Turn {
            speaker,
            text: text.into(),
        }
    }

    fn dialogue(n_rounds: usize) -> DialogueHistory {
        let mut turns = Vec::new();
        for r in 0..n_rounds {
            turns.push(turn(Speaker::User, &format!("question {r}")));
            turns.push(turn(Speaker::Assistant, &format!("answer {r}")));
        }
        DialogueHistory { turns }
    }

    /// Splits a flattened prompt back into (speaker, text) turns.
    fn unflatten(prompt: &TokenSeq) -> Vec<(Speaker, String)> {
        prompt
            .split(|&t| t == SEP)
            .map(|chunk| {
                let text = detokenize(&TokenSeq::new(chunk.to_vec()).unwrap()).text;
                for s in [Speaker::User, Speaker::Assistant] {
                    if let Some(rest) = text.strip_prefix(s.tag()) {
                        return (s, rest.to_string());
                    }
                }
                panic!("untagged turn {text:?}");
            })
            .collect()
    }

    #[test]
    fn single_round_is_tagged_user_turn() {
        let p = flatten_dialogue(&dialogue(1)).unwrap();
        assert_eq!(p.prompt, tokenize("User: question 0"));
        assert_eq!(p.response, tokenize("answer 0"));
    }

    #[test]
    fn three_rounds_keep_five_turns_in_order() {
        let d = dialogue(3);
        let p = flatten_dialogue(&d).unwrap();
        let turns = unflatten(&p.prompt);
        assert_eq!(turns.len(), 5);
        for (got, want) in turns.iter().zip(&d.turns) {
            assert_eq!(got.0, want.speaker);
            assert_eq!(got.1, want.text);
        }
        assert_eq!(detokenize(&p.response).text, "answer 2");
    }

    #[test]
    fn malformed_alternation_is_a_format_error() {
        let bad = DialogueHistory {
            turns: vec![turn(Speaker::User, "a"), turn(Speaker::User, "b")],
        };
        assert!(matches!(flatten_dialogue(&bad), Err(Error::Format(_))));
        let ends_with_user = DialogueHistory {
            turns: vec![
                turn(Speaker::User, "a"),
                turn(Speaker::Assistant, "b"),
                turn(Speaker::User, "c"),
            ],
        };
        assert!(flatten_dialogue(&ends_with_user).is_err());
        assert!(flatten_dialogue(&DialogueHistory { turns: vec![] }).is_err());
    }

    #[test]
    fn instruct_records_parse_both_shapes() {
        let a: InstructRecord = serde_json::from_str(r#"{"prompt":"hi","response":"yo"}"#).unwrap();
        assert_eq!(
            a.to_pair().unwrap(),
            PromptResponsePair::from_text("hi", "yo")
        );
        let b: InstructRecord = serde_json::from_str(
            r#"{"turns":[{"speaker":"user","text":"hi"},{"speaker":"assistant","text":"yo"}]}"#,
        )
        .unwrap();
        assert_eq!(b.to_pair().unwrap().response, tokenize("yo"));
    }
}
