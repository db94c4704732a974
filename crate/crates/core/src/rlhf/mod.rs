//! Preference data, reward-model training, PPO and programmatic feedback.

mod feedback;
mod ppo;

pub use feedback::*;
pub use ppo::*;

use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::data::{read_jsonl, tokenize, TokenSeq};
use crate::error::{Error, Result};
use crate::model::{reward_forward, reward_on_tape, Params, Stage};
use crate::parallel::par_map;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::{batch_grads, Adam, BatchSampler, PreferenceSign, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Human,
    Ai,
}

/// One pairwise judgment. `d = -1` prefers `response_a`, `+1` prefers
/// `response_b`, `0` marks them equivalent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub id: String,
    pub prompt: String,
    pub response_a: String,
    pub response_b: String,
    pub d: i8,
    #[serde(default)]
    pub accept_a: Option<bool>,
    #[serde(default)]
    pub accept_b: Option<bool>,
    pub source: Source,
    #[serde(default)]
    pub annotator_id: Option<String>,
    pub created_at: DateTime<Utc>,
    /// `"low"` when both responses were judged poor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality_flag: Option<String>,
}

impl PreferenceRecord {
    pub fn validate(&self) -> Result<()> {
        check_label(self.d)?;
        if self.source == Source::Ai && self.annotator_id.as_deref().is_none_or(str::is_empty) {
            return Err(Error::Format(format!(
                "record {}: ai records must name their judge",
                self.id
            )));
        }
        Ok(())
    }
}

fn check_label(d: i8) -> Result<()> {
    if matches!(d, -1..=1) {
        Ok(())
    } else {
        Err(Error::contract(format!(
            "preference label must be -1, 0 or 1, got {d}"
        )))
    }
}

/// Reads and validates a JSON Lines preference file.
pub fn load_preferences(path: &Path) -> Result<Vec<PreferenceRecord>> {
    let records: Vec<PreferenceRecord> = read_jsonl(path)?;
    for r in &records {
        r.validate()?;
    }
    Ok(records)
}

/// `max(0, 1 - d·(r_y - r_yp))`.
pub fn reward_loss(r_y: f64, r_yp: f64, d: i8) -> Result<f64> {
    check_label(d)?;
    Ok((1.0 - d as f64 * (r_y - r_yp)).max(0.0))
}

/// Tape version of [`reward_loss`]; `sign` optionally flips the label.
pub fn reward_loss_on_tape(
    tape: &mut Tape,
    r_y: Var,
    r_yp: Var,
    d: i8,
    sign: PreferenceSign,
) -> Var {
    let diff = tape.sub(r_y, r_yp);
    let neg = tape.scale(diff, -(d as f64) * sign.factor());
    let one = tape.constant(Tensor::full(tape.value(neg).shape(), 1.0));
    let z = tape.add(one, neg);
    tape.hinge(z)
}

/// A preference record in token form.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefPair {
    pub prompt: TokenSeq,
    pub a: TokenSeq,
    pub b: TokenSeq,
    pub d: i8,
}

impl PrefPair {
    pub fn from_record(r: &PreferenceRecord) -> Result<PrefPair> {
        check_label(r.d)?;
        Ok(PrefPair {
            prompt: tokenize(&r.prompt),
            a: tokenize(&r.response_a),
            b: tokenize(&r.response_b),
            d: r.d,
        })
    }

    /// Whether both `prompt SEP response` inputs fit the context window.
    pub fn fits(&self, max_seq_len: usize) -> bool {
        self.prompt.len() + 1 + self.a.len().max(self.b.len()) <= max_seq_len
    }
}

/// Loss of one pair on a reward-model tape.
pub fn pair_loss_on_tape(
    tape: &mut Tape,
    b: &crate::model::Bound,
    pair: &PrefPair,
    sign: PreferenceSign,
) -> Result<Var> {
    let ra = reward_on_tape(tape, b, &pair.prompt, &pair.a)?;
    let rb = reward_on_tape(tape, b, &pair.prompt, &pair.b)?;
    Ok(reward_loss_on_tape(tape, ra, rb, pair.d, sign))
}

/// Signed reward gap `d·(r(a) - r(b))`. The literal loss is minimized once this is ≥ 1.
pub fn margin(params: &Params, pair: &PrefPair, sign: PreferenceSign) -> Result<f64> {
    let ra = reward_forward(params, &pair.prompt, &pair.a)?;
    let rb = reward_forward(params, &pair.prompt, &pair.b)?;
    Ok(sign.factor() * pair.d as f64 * (ra - rb))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RewardReport {
    /// Mean hinge loss over the non-tie records of each mini-batch.
    pub losses: Vec<f64>,
    pub ties: usize,
    /// Records left out because a response does not fit the context window.
    pub skipped: usize,
}

/// Trains a reward model on preference records.
///
/// `init` is used as is when it is already a reward model, otherwise its
/// backbone is cloned under a zero head. Ties carry no gradient, so batches
/// are drawn from the non-tie records only and the mean is taken over them;
/// adding or removing ties leaves every update unchanged.
pub fn train_reward_model(
    init: &Params,
    prefs: &[PreferenceRecord],
    cfg: &TrainConfig,
) -> Result<(Params, RewardReport)> {
    cfg.validate()?;
    let mut params = if init.stage == Stage::Reward {
        init.clone()
    } else {
        init.to_reward_model()?
    };
    let mut report = RewardReport::default();
    let mut pairs = Vec::new();
    for r in prefs {
        r.validate()?;
        if r.d == 0 {
            report.ties += 1;
            continue;
        }
        let p = PrefPair::from_record(r)?;
        if p.fits(params.config.max_seq_len) {
            pairs.push(p);
        } else {
            report.skipped += 1;
        }
    }
    if report.skipped > 0 {
        log::warn!(
            "{} preference records exceed the context window",
            report.skipped
        );
    }
    if pairs.is_empty() {
        return Err(Error::contract(
            "no usable preference record with d != 0; ties alone carry no training signal",
        ));
    }
    let mut sampler = BatchSampler::new(pairs.len(), cfg.batch_size, cfg.seed)?;
    let snapshot: Vec<Tensor> = params.named().into_iter().map(|(_, t)| t.clone()).collect();
    let mut adam = Adam::new(&snapshot.iter().collect::<Vec<_>>());
    for step in 0..cfg.steps {
        let batch = sampler.next_batch();
        let items: Vec<&PrefPair> = batch.iter().map(|&i| &pairs[i]).collect();
        let bg = batch_grads(&params, &items, |tape, b, pair| {
            pair_loss_on_tape(tape, b, pair, cfg.preference_sign).map(Some)
        })?;
        if !bg.loss.is_finite() || !bg.grads.iter().all(Tensor::is_finite) {
            return Err(Error::NonFinite { step, batch });
        }
        adam.update(params.tensors_mut(), &bg.grads, cfg);
        log::debug!("reward step {step} loss {:.6}", bg.loss);
        report.losses.push(bg.loss);
    }
    Ok((params, report))
}

/// Gradient of the mean non-tie pair loss over `prefs`, in [`Params::named`] order.
pub fn reward_gradient(
    params: &Params,
    prefs: &[PreferenceRecord],
    sign: PreferenceSign,
) -> Result<Vec<Tensor>> {
    let pairs = prefs
        .iter()
        .map(PrefPair::from_record)
        .collect::<Result<Vec<_>>>()?;
    let bg = batch_grads(params, &pairs, |tape, b, pair| {
        if pair.d == 0 {
            return Ok(None);
        }
        pair_loss_on_tape(tape, b, pair, sign).map(Some)
    })?;
    Ok(bg.grads)
}

/// Mean [`reward_loss`] over all records, ties included (each contributes 1).
pub fn mean_reward_loss(
    params: &Params,
    prefs: &[PreferenceRecord],
    sign: PreferenceSign,
) -> Result<f64> {
    if prefs.is_empty() {
        return Err(Error::contract("no preference records"));
    }
    let losses = par_map(prefs, |_, r| -> Result<f64> {
        let p = PrefPair::from_record(r)?;
        let ra = reward_forward(params, &p.prompt, &p.a)?;
        let rb = reward_forward(params, &p.prompt, &p.b)?;
        reward_loss(ra, rb, (sign.factor() * p.d as f64) as i8)
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / prefs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RankingReport {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// Fraction of non-tie records ranked the way the loss drives them: a record
/// counts as correct when `d·(r(a) - r(b)) > 0`.
pub fn ranking_accuracy(
    params: &Params,
    prefs: &[PreferenceRecord],
    sign: PreferenceSign,
) -> Result<RankingReport> {
    let pairs: Vec<PrefPair> = prefs
        .iter()
        .filter(|r| r.d != 0)
        .map(PrefPair::from_record)
        .collect::<Result<_>>()?;
    let pairs: Vec<PrefPair> = pairs
        .into_iter()
        .filter(|p| p.fits(params.config.max_seq_len))
        .collect();
    if pairs.is_empty() {
        return Err(Error::contract("no non-tie record to rank"));
    }
    let margins = par_map(&pairs, |_, p| margin(params, p, sign));
    let mut correct = 0;
    for m in margins {
        if m? > 0.0 {
            correct += 1;
        }
    }
    Ok(RankingReport {
        correct,
        total: pairs.len(),
        accuracy: correct as f64 / pairs.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use crate::model::ModelConfig;
    use crate::precision::{with_precision, Precision};

    pub(crate) fn record(id: usize, prompt: &str, a: &str, b: &str, d: i8) -> PreferenceRecord {
        PreferenceRecord {
            id: id.to_string(),
            prompt: prompt.into(),
            response_a: a.into(),
            response_b: b.into(),
            d,
            accept_a: None,
            accept_b: None,
            source: Source::Human,
            annotator_id: Some("t".into()),
            created_at: DateTime::from_timestamp(0, 0).unwrap(),
            quality_flag: None,
        }
    }

    fn backbone() -> Params {
        with_precision(Precision::F64, || {
            Params::init_with_std(ModelConfig::new(16, 2, 32, 1, 24), 3, 0.2).unwrap()
        })
    }

    #[test]
    fn reward_loss_examples() {
        assert_eq!(reward_loss(0.5, 0.0, 1).unwrap(), 0.5);
        assert_eq!(reward_loss(2.0, 0.0, 1).unwrap(), 0.0);
        assert_eq!(reward_loss(-3.0, 7.5, 0).unwrap(), 1.0);
        assert_eq!(reward_loss(0.0, 2.0, -1).unwrap(), 0.0);
        assert!(reward_loss(0.0, 0.0, 2).is_err());
    }

    #[test]
    fn tie_has_zero_gradient_and_flip_mirrors() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::scalar(0.3));
        let b = tape.param(Tensor::scalar(-1.1));
        let l = reward_loss_on_tape(&mut tape, a, b, 0, PreferenceSign::Literal);
        assert_eq!(tape.value(l).item(), 1.0);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(a).unwrap().item(), 0.0);
        assert_eq!(g.get(b).unwrap().item(), 0.0);

        let mut tape = Tape::new();
        let a = tape.param(Tensor::scalar(0.3));
        let b = tape.param(Tensor::scalar(0.1));
        let l = reward_loss_on_tape(&mut tape, a, b, 1, PreferenceSign::Flipped);
        assert!((tape.value(l).item() - reward_loss(0.3, 0.1, -1).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn reward_loss_gradient_matches_finite_differences() {
        for (ry, ryp, d) in [(0.2, 0.5, 1), (0.9, -0.4, -1), (0.1, 0.3, -1)] {
            let err = finite_diff_check(
                |tape, v| {
                    Ok(reward_loss_on_tape(
                        tape,
                        v[0],
                        v[1],
                        d,
                        PreferenceSign::Literal,
                    ))
                },
                &[Tensor::scalar(ry), Tensor::scalar(ryp)],
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-6, "err={err}");
        }
    }

    #[test]
    fn record_validation_and_serde() {
        let r = record(1, "p", "a", "b", -1);
        let line = serde_json::to_string(&r).unwrap();
        assert!(!line.contains("quality_flag"));
        let back: PreferenceRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, r);
        let mut bad = r.clone();
        bad.d = 3;
        assert!(bad.validate().is_err());
        let mut ai = r;
        ai.source = Source::Ai;
        ai.annotator_id = None;
        assert!(ai.validate().is_err());
    }

    #[test]
    fn ties_do_not_change_the_gradient() {
        with_precision(Precision::F64, || {
            let p = backbone().to_reward_model().unwrap();
            let mut p = p;
            p.reward_head = Some(Tensor::full(&[16, 1], 0.1));
            let base = vec![
                record(0, "q", "long answer", "no", -1),
                record(1, "w", "a", "bbb", 1),
            ];
            let mut with_ties = base.clone();
            with_ties.insert(1, record(2, "e", "same", "same", 0));
            with_ties.push(record(3, "r", "x", "yy", 0));
            let g1 = reward_gradient(&p, &base, PreferenceSign::Literal).unwrap();
            let g2 = reward_gradient(&p, &with_ties, PreferenceSign::Literal).unwrap();
            assert_eq!(g1, g2);
        });
    }

    #[test]
    fn all_tie_dataset_is_refused() {
        let prefs = vec![record(0, "q", "a", "b", 0)];
        let r = train_reward_model(&backbone(), &prefs, &TrainConfig::default());
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn single_record_reaches_unit_margin() {
        let prefs = vec![record(0, "prompt", "first", "second one", 1)];
        let cfg = TrainConfig {
            steps: 200,
            batch_size: 1,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let (rm, report) = train_reward_model(&backbone(), &prefs, &cfg).unwrap();
        let pair = PrefPair::from_record(&prefs[0]).unwrap();
        let m = margin(&rm, &pair, PreferenceSign::Literal).unwrap();
        assert!(m >= 1.0 - 1e-3, "margin {m}");
        assert_eq!(*report.losses.last().unwrap(), 0.0);
        assert_eq!(
            ranking_accuracy(&rm, &prefs, PreferenceSign::Literal)
                .unwrap()
                .accuracy,
            1.0
        );
        assert!(mean_reward_loss(&rm, &prefs, PreferenceSign::Literal).unwrap() <= 1e-3);
    }
}
