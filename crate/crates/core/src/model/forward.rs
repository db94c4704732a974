use super::{check_tokens, Direction, ModelConfig, Params};
use crate::data::{TokenSeq, BOS, EOS, SEP};
use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct BoundLayer {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub ff_w1: Var,
    pub ff_w2: Var,
}

/// A [`Params`] registered on a tape.
#[derive(Debug, Clone)]
pub struct Bound {
    pub config: ModelConfig,
    /// Leaves in [`Params::named`] order.
    pub vars: Vec<Var>,
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub dir_emb: Var,
    pub layers: Vec<BoundLayer>,
    pub lnf_gain: Var,
    pub lnf_bias: Var,
    pub unembed: Var,
    pub reward_head: Option<Var>,
}

impl Bound {
    /// Gradients in [`Params::named`] order; parameters that did not influence
    /// the loss get zeros.
    pub fn collect_grads(&self, tape: &Tape, grads: &Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
            })
            .collect()
    }
}

/// Registers every tensor of `params` on `tape`, as trainable leaves or constants.
pub fn bind(tape: &mut Tape, params: &Params, trainable: bool) -> Bound {
    let vars: Vec<Var> = params
        .named()
        .into_iter()
        .map(|(_, t)| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    Bound::from_vars(params.config, params.reward_head.is_some(), vars)
}

impl Bound {
    /// Interprets `vars` (in [`Params::named`] order) as a model.
    pub fn from_vars(config: ModelConfig, has_reward_head: bool, vars: Vec<Var>) -> Bound {
        let expected = 6 + 10 * config.n_layers + usize::from(has_reward_head);
        assert_eq!(vars.len(), expected, "bound tensor count");
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("bound tensor count");
        let tok_emb = next();
        let pos_emb = next();
        let dir_emb = next();
        let layers = (0..config.n_layers)
            .map(|_| BoundLayer {
                ln1_gain: next(),
                ln1_bias: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                ln2_gain: next(),
                ln2_bias: next(),
                ff_w1: next(),
                ff_w2: next(),
            })
            .collect();
        let lnf_gain = next();
        let lnf_bias = next();
        let unembed = next();
        let reward_head = has_reward_head.then(&mut next);
        Bound {
            config,
            vars,
            tok_emb,
            pos_emb,
            dir_emb,
            layers,
            lnf_gain,
            lnf_bias,
            unembed,
            reward_head,
        }
    }
}

/// Final-norm hidden states of the causal stack over `input` (T×d_model).
pub fn hidden_on_tape(tape: &mut Tape, b: &Bound, input: &[usize], dir: Direction) -> Var {
    let c = &b.config;
    let t = input.len();
    assert!(t >= 1 && t <= c.max_seq_len, "input length {t}");
    let positions: Vec<usize> = (0..t).collect();
    let tok = tape.gather(b.tok_emb, input);
    let pos = tape.gather(b.pos_emb, &positions);
    let dvec = tape.gather(b.dir_emb, &[dir.index()]);
    let x = tape.add(tok, pos);
    let mut x = tape.add_row(x, dvec);

    let scale = 1.0 / (c.d_head as f64).sqrt();
    for layer in &b.layers {
        let a = tape.layernorm(x, layer.ln1_gain, layer.ln1_bias);
        let q = tape.matmul(a, layer.wq);
        let q = tape.scale(q, scale);
        let k = tape.matmul(a, layer.wk);
        let v = tape.matmul(a, layer.wv);
        let heads: Vec<Var> = (0..c.n_heads)
            .map(|h| {
                let start = h * c.d_head;
                let qh = tape.slice_cols(q, start, c.d_head);
                let kh = tape.slice_cols(k, start, c.d_head);
                let vh = tape.slice_cols(v, start, c.d_head);
                let scores = tape.matmul_nt(qh, kh);
                let p = tape.causal_softmax(scores);
                tape.matmul(p, vh)
            })
            .collect();
        let attn = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)
        };
        let o = tape.matmul(attn, layer.wo);
        x = tape.add(x, o);

        let f = tape.layernorm(x, layer.ln2_gain, layer.ln2_bias);
        let f = tape.matmul(f, layer.ff_w1);
        let f = tape.gelu(f);
        let f = tape.matmul(f, layer.ff_w2);
        x = tape.add(x, f);
    }
    tape.layernorm(x, b.lnf_gain, b.lnf_bias)
}

/// Model input for predicting every token of `tokens` in direction `dir`.
///
/// Forward: `BOS x_1 .. x_{T-1}`. Backward: `EOS x_T .. x_2`.
pub(crate) fn framed_input(tokens: &TokenSeq, dir: Direction) -> Vec<usize> {
    let t = tokens.len();
    match dir {
        Direction::Forward => std::iter::once(BOS as usize)
            .chain(tokens[..t - 1].iter().map(|&x| x as usize))
            .collect(),
        Direction::Backward => std::iter::once(EOS as usize)
            .chain(tokens[1..].iter().rev().map(|&x| x as usize))
            .collect(),
    }
}

/// Logits (T×vocab) whose row `t` predicts `tokens[t]`: from `tokens[..t]` in
/// the forward direction, from `tokens[t+1..]` in the backward direction.
pub fn forward_on_tape(
    tape: &mut Tape,
    b: &Bound,
    tokens: &TokenSeq,
    dir: Direction,
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::contract("forward on an empty sequence"));
    }
    check_tokens(&b.config, tokens, b.config.max_seq_len)?;
    let input = framed_input(tokens, dir);
    let h = hidden_on_tape(tape, b, &input, dir);
    let logits = tape.matmul(h, b.unembed);
    Ok(match dir {
        Direction::Forward => logits,
        Direction::Backward => tape.reverse_rows(logits),
    })
}

/// Log-probability of each token of `tokens` under direction `dir` (length T).
pub fn token_logprobs_on_tape(
    tape: &mut Tape,
    b: &Bound,
    tokens: &TokenSeq,
    dir: Direction,
) -> Result<Var> {
    let logits = forward_on_tape(tape, b, tokens, dir)?;
    Ok(tape.log_softmax_pick(logits, &tokens.as_usize()))
}

/// Inference-only [`forward_on_tape`].
pub fn forward(params: &Params, tokens: &TokenSeq, dir: Direction) -> Result<Tensor> {
    let mut tape = Tape::frozen();
    let b = bind(&mut tape, params, false);
    let out = forward_on_tape(&mut tape, &b, tokens, dir)?;
    Ok(tape.value(out).clone())
}

pub(crate) fn reward_input(
    cfg: &ModelConfig,
    prompt: &TokenSeq,
    response: &TokenSeq,
) -> Result<Vec<usize>> {
    let len = prompt.len() + 1 + response.len();
    if len > cfg.max_seq_len {
        return Err(Error::Length {
            len,
            max: cfg.max_seq_len,
        });
    }
    check_tokens(cfg, prompt, usize::MAX)?;
    check_tokens(cfg, response, usize::MAX)?;
    Ok(prompt
        .iter()
        .chain(std::iter::once(&SEP))
        .chain(response.iter())
        .map(|&x| x as usize)
        .collect())
}

/// Scalar reward: the linear head applied to the last hidden state of the
/// forward pass over `prompt SEP response`.
pub fn reward_on_tape(
    tape: &mut Tape,
    b: &Bound,
    prompt: &TokenSeq,
    response: &TokenSeq,
) -> Result<Var> {
    let head = b
        .reward_head
        .ok_or_else(|| Error::contract("reward_forward needs a reward-stage model"))?;
    let input = reward_input(&b.config, prompt, response)?;
    let h = hidden_on_tape(tape, b, &input, Direction::Forward);
    let last = tape.slice_rows(h, input.len() - 1, 1);
    let r = tape.matmul(last, head);
    Ok(tape.reshape(r, vec![1]))
}

pub fn reward_forward(params: &Params, prompt: &TokenSeq, response: &TokenSeq) -> Result<f64> {
    let mut tape = Tape::frozen();
    let b = bind(&mut tape, params, false);
    let r = reward_on_tape(&mut tape, &b, prompt, response)?;
    Ok(tape.value(r).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{tokenize, VOCAB_SIZE};
    use crate::precision::{with_precision, Precision};
    use crate::tensor::LN_EPS;
    use proptest::prelude::*;

    fn small() -> Params {
        Params::init_with_std(ModelConfig::new(16, 2, 32, 2, 12), 11, 0.3).unwrap()
    }

    #[test]
    fn rejects_overlong_and_out_of_vocab() {
        let p = small();
        let long = TokenSeq::from(&[b'a'; 13][..]);
        assert!(matches!(
            forward(&p, &long, Direction::Forward),
            Err(Error::Length { len: 13, max: 12 })
        ));
        let bad = TokenSeq::new(vec![1, 2]).unwrap();
        assert!(forward(&p, &bad, Direction::Forward).is_ok());
        assert!(forward(&p, &TokenSeq::default(), Direction::Forward).is_err());
    }

    #[test]
    fn zero_layer_model_matches_hand_evaluation() {
        with_precision(Precision::F64, || {
            let cfg = ModelConfig::new(4, 1, 4, 0, 4);
            let p = Params::init_with_std(cfg, 5, 0.5).unwrap();
            let tokens = TokenSeq::from(&b"x"[..]);
            let logits = forward(&p, &tokens, Direction::Forward).unwrap();

            // embed(BOS at position 0, forward direction), layer norm, unembed.
            let e: Vec<f64> = (0..4)
                .map(|j| {
                    p.tok_emb.get2(BOS as usize, j) + p.pos_emb.get2(0, j) + p.dir_emb.get2(0, j)
                })
                .collect();
            let mean = e.iter().sum::<f64>() / 4.0;
            let var = e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            let n: Vec<f64> = e
                .iter()
                .enumerate()
                .map(|(j, v)| {
                    (v - mean) / (var + LN_EPS).sqrt() * p.lnf_gain.data()[j] + p.lnf_bias.data()[j]
                })
                .collect();
            for v in 0..VOCAB_SIZE {
                let expected: f64 = (0..4).map(|j| n[j] * p.unembed.get2(j, v)).sum();
                assert!((logits.get2(0, v) - expected).abs() < 1e-12);
            }
        });
    }

    #[test]
    fn backward_direction_mirrors_reversed_forward_pass() {
        let p = small();
        let s = tokenize("bidirect");
        let back = forward(&p, &s, Direction::Backward).unwrap();

        let mut tape = Tape::frozen();
        let b = bind(&mut tape, &p, false);
        let rev = s.reversed();
        let mut input = vec![EOS as usize];
        input.extend(rev[..rev.len() - 1].iter().map(|&x| x as usize));
        let h = hidden_on_tape(&mut tape, &b, &input, Direction::Backward);
        let l = tape.matmul(h, b.unembed);
        let direct = tape.value(l);
        let t = s.len();
        for i in 0..t {
            assert_eq!(back.row(i), direct.row(t - 1 - i));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn logits_respect_causality(
            seq in proptest::collection::vec(0u16..260, 2..12),
            pos in 0usize..11,
            replacement in 0u16..260,
        ) {
            let p = small();
            let s = TokenSeq::new(seq.clone()).unwrap();
            let k = pos % s.len();
            let mut changed = seq.clone();
            changed[k] = replacement;
            let s2 = TokenSeq::new(changed).unwrap();

            let f1 = forward(&p, &s, Direction::Forward).unwrap();
            let f2 = forward(&p, &s2, Direction::Forward).unwrap();
            for t in 0..=k {
                prop_assert_eq!(f1.row(t), f2.row(t));
            }
            let b1 = forward(&p, &s, Direction::Backward).unwrap();
            let b2 = forward(&p, &s2, Direction::Backward).unwrap();
            for t in k..s.len() {
                prop_assert_eq!(b1.row(t), b2.row(t));
            }
            prop_assert!(f1.is_finite() && b1.is_finite());
        }
    }

    #[test]
    fn precisions_agree_on_logits() {
        let p = with_precision(Precision::F64, || {
            Params::init_with_std(ModelConfig::new(64, 4, 128, 2, 16), 2, 0.1).unwrap()
        });
        let s = tokenize("precision check");
        for dir in Direction::BOTH {
            let hi = with_precision(Precision::F64, || forward(&p, &s, dir).unwrap());
            let lo = with_precision(Precision::F32, || forward(&p, &s, dir).unwrap());
            assert!(hi.max_abs_diff(&lo) <= 1e-3);
        }
    }

    #[test]
    fn zero_head_gives_zero_reward_deterministically() {
        let p = small().to_reward_model().unwrap();
        let r = reward_forward(&p, &tokenize("q"), &tokenize("answer")).unwrap();
        assert_eq!(r, 0.0);

        let mut p = p;
        p.reward_head = Some(Tensor::full(&[16, 1], 0.25));
        let a = reward_forward(&p, &tokenize("q"), &tokenize("answer")).unwrap();
        let b = reward_forward(&p, &tokenize("q"), &tokenize("answer")).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(reward_forward(&p, &tokenize("q"), &tokenize("far too long here")).is_err());
    }
}
