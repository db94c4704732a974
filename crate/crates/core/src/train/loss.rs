//! Pre-training and instruction-tuning objectives.

use super::dialogue::PromptResponsePair;
use crate::data::{TokenSeq, EOS, PAD, SEP};
use crate::error::{Error, Result};
use crate::model::{bind, token_logprobs_on_tape, Bound, Direction, Params};
use crate::tape::{Tape, Var};

/// Summed negative log-likelihood of the non-PAD tokens of `seq` in one
/// direction, with the number of tokens counted. `None` if every token is PAD.
pub fn direction_nll_on_tape(
    tape: &mut Tape,
    b: &Bound,
    seq: &TokenSeq,
    dir: Direction,
) -> Result<Option<(Var, usize)>> {
    let weights: Vec<f64> = seq
        .iter()
        .map(|&t| if t == PAD { 0.0 } else { -1.0 })
        .collect();
    let count = weights.iter().filter(|&&w| w != 0.0).count();
    if count == 0 {
        return Ok(None);
    }
    let lp = token_logprobs_on_tape(tape, b, seq, dir)?;
    Ok(Some((tape.dot(lp, &weights), count)))
}

/// `(NLL_forward + NLL_backward) / (2T)` for one sequence.
pub fn pretrain_seq_loss_on_tape(
    tape: &mut Tape,
    b: &Bound,
    seq: &TokenSeq,
) -> Result<Option<Var>> {
    let Some((fwd, n)) = direction_nll_on_tape(tape, b, seq, Direction::Forward)? else {
        return Ok(None);
    };
    let (bwd, _) =
        direction_nll_on_tape(tape, b, seq, Direction::Backward)?.expect("same token count");
    let total = tape.add(fwd, bwd);
    Ok(Some(tape.scale(total, 1.0 / (2 * n) as f64)))
}

fn mean_of(tape: &mut Tape, terms: Vec<Var>) -> Result<Var> {
    let n = terms.len();
    let mut it = terms.into_iter();
    let first = it
        .next()
        .ok_or_else(|| Error::contract("batch has no scorable sequence"))?;
    let sum = it.fold(first, |acc, v| tape.add(acc, v));
    Ok(tape.scale(sum, 1.0 / n as f64))
}

/// Mean over the batch of the per-sequence bidirectional loss.
pub fn pretrain_loss_on_tape(tape: &mut Tape, b: &Bound, batch: &[TokenSeq]) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let mut terms = Vec::with_capacity(batch.len());
    for seq in batch {
        if let Some(v) = pretrain_seq_loss_on_tape(tape, b, seq)? {
            terms.push(v);
        }
    }
    mean_of(tape, terms)
}

/// Mean over the batch of the per-token NLL in a single direction.
pub fn direction_loss_on_tape(
    tape: &mut Tape,
    b: &Bound,
    batch: &[TokenSeq],
    dir: Direction,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let mut terms = Vec::with_capacity(batch.len());
    for seq in batch {
        if let Some((nll, n)) = direction_nll_on_tape(tape, b, seq, dir)? {
            terms.push(tape.scale(nll, 1.0 / n as f64));
        }
    }
    mean_of(tape, terms)
}

/// Bidirectional pre-training loss in nats per token.
pub fn bidir_pretrain_loss(params: &Params, batch: &[TokenSeq]) -> Result<f64> {
    let mut tape = Tape::frozen();
    let b = bind(&mut tape, params, false);
    let v = pretrain_loss_on_tape(&mut tape, &b, batch)?;
    Ok(tape.value(v).item())
}

pub fn direction_loss(params: &Params, batch: &[TokenSeq], dir: Direction) -> Result<f64> {
    let mut tape = Tape::frozen();
    let b = bind(&mut tape, params, false);
    let v = direction_loss_on_tape(&mut tape, &b, batch, dir)?;
    Ok(tape.value(v).item())
}

/// Negative log-likelihood of each token of `seq` in direction `dir`.
pub fn token_nll(params: &Params, seq: &TokenSeq, dir: Direction) -> Result<Vec<f64>> {
    let mut tape = Tape::frozen();
    let b = bind(&mut tape, params, false);
    let lp = token_logprobs_on_tape(&mut tape, &b, seq, dir)?;
    Ok(tape.value(lp).data().iter().map(|x| -x).collect())
}

/// The sequence `x SEP y EOS` and the loss weights selecting `y EOS`.
pub(crate) fn instruct_sequence(pair: &PromptResponsePair) -> (TokenSeq, Vec<f64>) {
    let mut seq = pair.prompt.clone();
    seq.push(SEP);
    seq.extend_from(&pair.response);
    seq.push(EOS);
    let start = pair.prompt.len() + 1;
    let weights = (0..seq.len())
        .map(|i| if i >= start { 1.0 } else { 0.0 })
        .collect();
    (seq, weights)
}

/// Mean NLL of the response tokens and EOS given the prompt, forward direction.
/// `None` when the pair does not fit the context window.
pub fn instruct_pair_loss_on_tape(
    tape: &mut Tape,
    b: &Bound,
    pair: &PromptResponsePair,
) -> Result<Option<Var>> {
    if pair.window_len() > b.config.max_seq_len {
        return Ok(None);
    }
    let (seq, weights) = instruct_sequence(pair);
    let n = weights.iter().sum::<f64>();
    let scaled: Vec<f64> = weights.iter().map(|w| -w / n).collect();
    let lp = token_logprobs_on_tape(tape, b, &seq, Direction::Forward)?;
    Ok(Some(tape.dot(lp, &scaled)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstructLoss {
    pub loss: f64,
    /// Pairs left out because they exceed the context window.
    pub skipped: usize,
}

pub fn instruct_loss_on_tape(
    tape: &mut Tape,
    b: &Bound,
    batch: &[PromptResponsePair],
) -> Result<(Var, usize)> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let mut terms = Vec::new();
    for pair in batch {
        if let Some(v) = instruct_pair_loss_on_tape(tape, b, pair)? {
            terms.push(v);
        }
    }
    let skipped = batch.len() - terms.len();
    if skipped > 0 {
        log::warn!(
            "{skipped} of {} instruction pairs exceed the context window",
            batch.len()
        );
    }
    if terms.is_empty() {
        return Err(Error::contract(
            "every pair in the batch exceeds the context window",
        ));
    }
    Ok((mean_of(tape, terms)?, skipped))
}

pub fn instruct_loss(params: &Params, batch: &[PromptResponsePair]) -> Result<InstructLoss> {
    let mut tape = Tape::frozen();
    let b = bind(&mut tape, params, false);
    let (v, skipped) = instruct_loss_on_tape(&mut tape, &b, batch)?;
    Ok(InstructLoss {
        loss: tape.value(v).item(),
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{tokenize, VOCAB_SIZE};
    use crate::model::forward;
    use crate::model::ModelConfig;
    use crate::precision::{with_precision, Precision};
    use crate::tensor::{log_softmax, Tensor};

    fn uniform_model() -> Params {
        let mut p = Params::init(ModelConfig::new(16, 2, 32, 1, 32), 1).unwrap();
        p.unembed = Tensor::zeros(&[16, VOCAB_SIZE]);
        p
    }

    fn random_model() -> Params {
        with_precision(Precision::F64, || {
            Params::init_with_std(ModelConfig::new(16, 2, 32, 2, 32), 4, 0.3).unwrap()
        })
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let p = uniform_model();
        let batch = vec![tokenize("hello"), tokenize("a much longer sequence")];
        let l = with_precision(Precision::F64, || bidir_pretrain_loss(&p, &batch).unwrap());
        assert!((l - (VOCAB_SIZE as f64).ln()).abs() < 1e-12);
        assert!((l - 5.5607).abs() < 1e-4);
    }

    #[test]
    fn token_nll_averages_to_direction_loss() {
        with_precision(Precision::F64, || {
            let p = random_model();
            let seq = tokenize("abcab");
            for dir in Direction::BOTH {
                let per = token_nll(&p, &seq, dir).unwrap();
                let mean = per.iter().sum::<f64>() / per.len() as f64;
                assert!((mean - direction_loss(&p, &[seq.clone()], dir).unwrap()).abs() < 1e-12);
            }
        });
    }

    #[test]
    fn bidirectional_loss_is_mean_of_directional_losses() {
        with_precision(Precision::F64, || {
            let p = random_model();
            let batch = vec![tokenize("abcab"), tokenize("zz top"), tokenize("q")];
            let both = bidir_pretrain_loss(&p, &batch).unwrap();
            let f = direction_loss(&p, &batch, Direction::Forward).unwrap();
            let b = direction_loss(&p, &batch, Direction::Backward).unwrap();
            assert!((both - (f + b) / 2.0).abs() < 1e-12);
        });
    }

    #[test]
    fn pad_positions_are_excluded() {
        with_precision(Precision::F64, || {
            let p = uniform_model();
            let mut padded = tokenize("abc");
            padded.push(PAD);
            padded.push(PAD);
            let l = bidir_pretrain_loss(&p, &[padded]).unwrap();
            assert!((l - (VOCAB_SIZE as f64).ln()).abs() < 1e-12);
        });
    }

    #[test]
    fn batch_order_does_not_change_loss() {
        with_precision(Precision::F64, || {
            let p = random_model();
            let batch = vec![tokenize("one"), tokenize("two two"), tokenize("three!")];
            let mut shuffled = batch.clone();
            shuffled.rotate_left(1);
            let a = bidir_pretrain_loss(&p, &batch).unwrap();
            let b = bidir_pretrain_loss(&p, &shuffled).unwrap();
            assert!((a - b).abs() < 1e-14);
        });
    }

    #[test]
    fn empty_batch_is_rejected() {
        assert!(bidir_pretrain_loss(&uniform_model(), &[]).is_err());
        assert!(instruct_loss(&uniform_model(), &[]).is_err());
    }

    #[test]
    fn instruct_loss_ignores_prompt_under_uniform_model() {
        with_precision(Precision::F64, || {
            let p = uniform_model();
            for prompt in ["x", "a longer prompt"] {
                let l = instruct_loss(&p, &[PromptResponsePair::from_text(prompt, "abc")]).unwrap();
                assert!((l.loss - (VOCAB_SIZE as f64).ln()).abs() < 1e-12);
            }
        });
    }

    #[test]
    fn instruct_loss_conditions_on_prompt() {
        let p = random_model();
        let a = PromptResponsePair::from_text("first prompt", "resp");
        let b = PromptResponsePair::from_text("other", "resp");
        let la = instruct_loss(&p, &[a.clone()]).unwrap().loss;
        let lb = instruct_loss(&p, &[b]).unwrap().loss;
        assert_ne!(la, lb);
        assert_eq!(
            la.to_bits(),
            instruct_loss(&p, &[a]).unwrap().loss.to_bits()
        );
    }

    #[test]
    fn instruct_loss_matches_per_token_log_softmax() {
        with_precision(Precision::F64, || {
            let p = random_model();
            let pair = PromptResponsePair::from_text("hi", "there");
            let got = instruct_loss(&p, &[pair.clone()]).unwrap().loss;

            // Oracle: explicit log-softmax over forward logits, summed over y and EOS.
            let (seq, _) = instruct_sequence(&pair);
            let logits = forward(&p, &seq, Direction::Forward).unwrap();
            let ls = log_softmax(&logits);
            let start = pair.prompt.len() + 1;
            let targets = &seq[start..];
            let nll: f64 = targets
                .iter()
                .enumerate()
                .map(|(k, &t)| -ls.get2(start + k, t as usize))
                .sum();
            assert!((got - nll / targets.len() as f64).abs() < 1e-12);
        });
    }

    #[test]
    fn overlong_pairs_are_skipped_and_counted() {
        let p = uniform_model();
        let long = PromptResponsePair::from_text(&"p".repeat(30), "resp");
        let short = PromptResponsePair::from_text("p", "resp");
        let l = instruct_loss(&p, &[long.clone(), short]).unwrap();
        assert_eq!(l.skipped, 1);
        assert!(instruct_loss(&p, &[long]).is_err());
    }
}
