//! Multiple-choice exam harness with few-shot, direct-answer and
//! chain-of-thought prompting.
//!
//! Prompt layout (each exemplar, then the scored item):
//!
//! ```text
//! Question: {question}
//! A. {choice A}
//! B. {choice B}
//! C. {choice C}
//! D. {choice D}
//! Answer: {answer}
//!
//! ```
//!
//! Exemplars end with the answer and a blank line. For the scored item the
//! context stops after `Answer:` and each candidate ` {choice}` (or ` {letter}`
//! in letter mode) is scored as a continuation. Chain-of-thought items replace
//! `Answer:` by `Let's reason step by step:`, greedily generate a rationale,
//! then append `\nAnswer:` and score as above.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{read_jsonl, tokenize, TokenSeq};
use crate::error::{Error, Result};
use crate::model::{forward, sample, Direction, Params};
use crate::parallel::par_map;
use crate::rng::SplitMix64;
use crate::tensor::log_softmax_row;

pub const LETTERS: [char; 4] = ['A', 'B', 'C', 'D'];
pub const COT_CUE: &str = "Let's reason step by step:";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawItem", into = "RawItem")]
pub struct ExamItem {
    pub question: String,
    pub choices: [String; 4],
    /// 0..4
    pub answer: usize,
    pub category: String,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawAnswer {
    Letter(String),
    Index(usize),
}

#[derive(Serialize, Deserialize)]
struct RawItem {
    question: String,
    choices: Vec<String>,
    answer: RawAnswer,
    #[serde(default)]
    category: String,
}

impl TryFrom<RawItem> for ExamItem {
    type Error = String;
    fn try_from(r: RawItem) -> std::result::Result<Self, String> {
        let choices: [String; 4] = r
            .choices
            .try_into()
            .map_err(|c: Vec<String>| format!("expected 4 choices, got {}", c.len()))?;
        let answer = match r.answer {
            RawAnswer::Letter(s) => LETTERS
                .iter()
                .position(|l| s.trim().eq_ignore_ascii_case(&l.to_string()))
                .ok_or_else(|| format!("answer {s:?} is not one of A-D"))?,
            RawAnswer::Index(i) if i < 4 => i,
            RawAnswer::Index(i) => return Err(format!("answer index {i} out of range")),
        };
        Ok(ExamItem {
            question: r.question,
            choices,
            answer,
            category: r.category,
        })
    }
}

impl From<ExamItem> for RawItem {
    fn from(e: ExamItem) -> RawItem {
        RawItem {
            question: e.question,
            choices: e.choices.to_vec(),
            answer: RawAnswer::Letter(LETTERS[e.answer].to_string()),
            category: e.category,
        }
    }
}

pub fn load_exam(path: &Path) -> Result<Vec<ExamItem>> {
    read_jsonl(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    #[default]
    Da,
    Cot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// Summed log-likelihood of the choice text.
    Sumll,
    /// Log-likelihood per token of the choice text.
    #[default]
    Meanll,
    /// Log-likelihood of the answer letter.
    Letter,
}

macro_rules! from_str_via_serde {
    ($t:ty) => {
        impl std::str::FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                serde_json::from_value(serde_json::Value::String(s.to_string()))
                    .map_err(|_| Error::Config(format!("unknown {} {s:?}", stringify!($t))))
            }
        }
    };
}
from_str_via_serde!(Style);
from_str_via_serde!(ScoreMode);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub style: Style,
    pub score: ScoreMode,
    /// Rationale budget for chain-of-thought items.
    pub cot_tokens: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            style: Style::Da,
            score: ScoreMode::Meanll,
            cot_tokens: 64,
        }
    }
}

fn question_block(item: &ExamItem) -> String {
    let mut s = format!("Question: {}\n", item.question);
    for (l, c) in LETTERS.iter().zip(&item.choices) {
        s.push_str(&format!("{l}. {c}\n"));
    }
    s
}

fn continuation(item: &ExamItem, choice: usize, mode: ScoreMode) -> String {
    match mode {
        ScoreMode::Letter => format!(" {}", LETTERS[choice]),
        _ => format!(" {}", item.choices[choice]),
    }
}

/// Few-shot exemplars followed by the item's question block.
pub fn format_prompt(item: &ExamItem, shots: &[ExamItem], style: Style, mode: ScoreMode) -> String {
    let mut s = String::new();
    for shot in shots {
        s.push_str(&question_block(shot));
        s.push_str("Answer:");
        s.push_str(&continuation(shot, shot.answer, mode));
        s.push_str("\n\n");
    }
    s.push_str(&question_block(item));
    s.push_str(match style {
        Style::Da => "Answer:",
        Style::Cot => COT_CUE,
    });
    s
}

/// Log-likelihood of `cont` after `ctx`, summed and per token.
fn continuation_ll(params: &Params, ctx: &TokenSeq, cont: &TokenSeq) -> Result<(f64, f64)> {
    let mut seq = ctx.clone();
    seq.extend_from(cont);
    let logits = forward(params, &seq, Direction::Forward)?;
    let mut sum = 0.0;
    for (k, &t) in cont.iter().enumerate() {
        let row = ctx.len() + k;
        sum += log_softmax_row(logits.row(row))
            .nth(t as usize)
            .expect("token in vocab");
    }
    Ok((sum, sum / cont.len().max(1) as f64))
}

/// Predicted choice index, or `None` when the prompt does not fit the context.
pub fn score_item(
    params: &Params,
    item: &ExamItem,
    shots: &[ExamItem],
    cfg: &EvalConfig,
) -> Result<Option<usize>> {
    let max = params.config.max_seq_len;
    let mut ctx = tokenize(&format_prompt(item, shots, cfg.style, cfg.score));
    let conts: Vec<TokenSeq> = (0..4)
        .map(|c| tokenize(&continuation(item, c, cfg.score)))
        .collect();
    let longest = conts.iter().map(|c| c.len()).max().unwrap_or(0);
    if cfg.style == Style::Cot {
        let cue = tokenize("\nAnswer:");
        if ctx.len() + cue.len() + longest > max {
            return Ok(None);
        }
        let room = max - ctx.len() - cue.len() - longest;
        let budget = cfg.cot_tokens.min(room);
        if budget > 0 {
            let rationale = sample(params, &ctx, Direction::Forward, budget, 0.0, 0)?;
            ctx.extend_from(&rationale);
        }
        ctx.extend_from(&cue);
    }
    if ctx.len() + longest > max {
        return Ok(None);
    }
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, cont) in conts.iter().enumerate() {
        let (sum, mean) = continuation_ll(params, &ctx, cont)?;
        let s = if cfg.score == ScoreMode::Meanll {
            mean
        } else {
            sum
        };
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    Ok(Some(best))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryReport {
    pub category: String,
    /// Items scored (excludes exemplars and skipped items).
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Items whose prompt did not fit the context window.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExamReport {
    pub categories: Vec<CategoryReport>,
    pub n: usize,
    pub correct: usize,
    /// Micro average over all scored items.
    pub accuracy: f64,
    /// Unweighted mean of category accuracies.
    pub macro_accuracy: f64,
    /// Categories with no more items than exemplars.
    pub skipped_categories: Vec<String>,
}

impl ExamReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<24} {:>6} {:>8} {:>8}\n",
            "category", "n", "correct", "acc"
        );
        for c in &self.categories {
            s.push_str(&format!(
                "{:<24} {:>6} {:>8} {:>7.2}%\n",
                c.category,
                c.n,
                c.correct,
                100.0 * c.accuracy
            ));
        }
        s.push_str(&format!(
            "{:<24} {:>6} {:>8} {:>7.2}%  (macro {:.2}%)\n",
            "overall",
            self.n,
            self.correct,
            100.0 * self.accuracy,
            100.0 * self.macro_accuracy
        ));
        for c in &self.skipped_categories {
            s.push_str(&format!(
                "skipped category {c}: not enough items for the requested shots\n"
            ));
        }
        s
    }

    /// One JSON object per category followed by an `overall` line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for c in &self.categories {
            out.push_str(&serde_json::to_string(c)?);
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&serde_json::json!({
            "category": "overall",
            "n": self.n,
            "correct": self.correct,
            "accuracy": self.accuracy,
            "macro_accuracy": self.macro_accuracy,
        }))?);
        out.push('\n');
        Ok(out)
    }
}

/// Scores every item using the first `shots` items of its category as
/// exemplars; exemplars are not scored.
pub fn run_exam(
    params: &Params,
    items: &[ExamItem],
    shots: usize,
    cfg: &EvalConfig,
) -> Result<ExamReport> {
    if items.is_empty() {
        return Err(Error::contract("empty exam"));
    }
    let mut order: Vec<&str> = Vec::new();
    for it in items {
        if !order.contains(&it.category.as_str()) {
            order.push(&it.category);
        }
    }
    let mut report = ExamReport {
        categories: Vec::new(),
        n: 0,
        correct: 0,
        accuracy: 0.0,
        macro_accuracy: 0.0,
        skipped_categories: Vec::new(),
    };
    for cat in order {
        let members: Vec<ExamItem> = items
            .iter()
            .filter(|i| i.category == cat)
            .cloned()
            .collect();
        if members.len() <= shots {
            log::warn!(
                "category {cat:?} has {} items, not more than {shots} shots; skipped",
                members.len()
            );
            report.skipped_categories.push(cat.to_string());
            continue;
        }
        let (exemplars, scored) = members.split_at(shots);
        let preds = par_map(scored, |_, item| score_item(params, item, exemplars, cfg));
        let mut c = CategoryReport {
            category: cat.to_string(),
            n: 0,
            correct: 0,
            accuracy: 0.0,
            skipped: 0,
        };
        for (item, p) in scored.iter().zip(preds) {
            match p? {
                None => c.skipped += 1,
                Some(k) => {
                    c.n += 1;
                    c.correct += usize::from(k == item.answer);
                }
            }
        }
        if c.skipped > 0 {
            log::warn!(
                "category {cat:?}: {} items exceed the context window",
                c.skipped
            );
        }
        c.accuracy = if c.n > 0 {
            c.correct as f64 / c.n as f64
        } else {
            0.0
        };
        report.n += c.n;
        report.correct += c.correct;
        report.categories.push(c);
    }
    if report.n > 0 {
        report.accuracy = report.correct as f64 / report.n as f64;
    }
    let scored: Vec<&CategoryReport> = report.categories.iter().filter(|c| c.n > 0).collect();
    if !scored.is_empty() {
        report.macro_accuracy =
            scored.iter().map(|c| c.accuracy).sum::<f64>() / scored.len() as f64;
    }
    Ok(report)
}

/// Random exam whose answer keys cycle A, B, C, D, so every letter is the
/// correct answer equally often.
pub fn balanced_exam(n: usize, seed: u64, categories: usize) -> Vec<ExamItem> {
    let mut g = SplitMix64::new(seed);
    let mut word = |len: usize| -> String {
        (0..len)
            .map(|_| (b'a' + g.below(26) as u8) as char)
            .collect()
    };
    (0..n)
        .map(|i| ExamItem {
            question: word(6),
            choices: [word(3), word(3), word(3), word(3)],
            answer: i % 4,
            category: format!("cat{}", i % categories.max(1)),
        })
        .collect()
}
