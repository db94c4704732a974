use chrono::{DateTime, Utc};
use rand::Rng;

use super::{PreferenceRecord, Source};
use crate::data::tokenize;
use crate::error::{Error, Result};
use crate::model::{reward_forward, Params};
use crate::rng;

/// A programmatic judge standing in for an AI annotator.
#[derive(Debug, Clone)]
pub enum Judge {
    /// The longer response wins.
    Length,
    /// More occurrences of the keyword win.
    Keyword(String),
    /// Higher score under a reward model wins.
    OracleModel(Box<Params>),
}

impl Judge {
    /// Parses `length`, `keyword:<word>` or `oracle-model`; the last needs `model`.
    pub fn parse(spec: &str, model: Option<Params>) -> Result<Judge> {
        match spec.split_once(':') {
            None if spec == "length" => Ok(Judge::Length),
            None if spec == "oracle-model" => model
                .map(|m| Judge::OracleModel(Box::new(m)))
                .ok_or_else(|| {
                    Error::Config("oracle-model judge needs a reward checkpoint".into())
                }),
            Some(("keyword", w)) if !w.is_empty() => Ok(Judge::Keyword(w.to_string())),
            _ => Err(Error::Config(format!("unknown judge {spec:?}"))),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Judge::Length => "length".into(),
            Judge::Keyword(w) => format!("keyword:{w}"),
            Judge::OracleModel(_) => "oracle-model".into(),
        }
    }

    /// `-1` if `a` is better, `+1` if `b` is better, `0` on a tie.
    pub fn label(&self, prompt: &str, a: &str, b: &str) -> Result<i8> {
        let (sa, sb) = match self {
            Judge::Length => (a.len() as f64, b.len() as f64),
            Judge::Keyword(w) => (
                a.matches(w.as_str()).count() as f64,
                b.matches(w.as_str()).count() as f64,
            ),
            Judge::OracleModel(m) => {
                let x = tokenize(prompt);
                (
                    reward_forward(m, &x, &tokenize(a))?,
                    reward_forward(m, &x, &tokenize(b))?,
                )
            }
        };
        Ok(match sa.partial_cmp(&sb) {
            Some(std::cmp::Ordering::Greater) => -1,
            Some(std::cmp::Ordering::Less) => 1,
            _ => 0,
        })
    }
}

/// Labels one response pair with `judge`.
pub fn ai_feedback(
    judge: &Judge,
    id: impl Into<String>,
    prompt: &str,
    response_a: &str,
    response_b: &str,
    created_at: DateTime<Utc>,
) -> Result<PreferenceRecord> {
    Ok(PreferenceRecord {
        id: id.into(),
        prompt: prompt.into(),
        response_a: response_a.into(),
        response_b: response_b.into(),
        d: judge.label(prompt, response_a, response_b)?,
        accept_a: None,
        accept_b: None,
        source: Source::Ai,
        annotator_id: Some(judge.name()),
        created_at,
        quality_flag: None,
    })
}

/// Unlabelled `(prompt, response_a, response_b)` triples of random lowercase
/// text; responses are 1..=`max_response` bytes long.
pub fn random_pairs(
    n: usize,
    seed: u64,
    max_prompt: usize,
    max_response: usize,
) -> Vec<(String, String, String)> {
    let mut g = rng::stream(seed, 0x7061_6972);
    let mut word = |max: usize| -> String {
        let len = g.random_range(1..=max.max(1));
        (0..len)
            .map(|_| g.random_range(b'a'..=b'z') as char)
            .collect()
    };
    (0..n)
        .map(|_| (word(max_prompt), word(max_response), word(max_response)))
        .collect()
}
