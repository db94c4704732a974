//! Incremental decoding with a key/value cache.
//!
//! Runs outside the tape at full `f64` width. It is the fast path for
//! sampling and an independent check on the tape forward.

use rand::Rng;

use super::{check_tokens, Direction, Params};
use crate::data::{TokenSeq, BOS, EOS};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{gelu_scalar, Tensor, LN_EPS};

fn vecmat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (k, m) = w.dims2();
    debug_assert_eq!(x.len(), k);
    let mut out = vec![0.0; m];
    for (p, &xv) in x.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(w.row(p)) {
            *o += xv * wv;
        }
    }
    out
}

fn layernorm(x: &[f64], gain: &Tensor, bias: &Tensor) -> Vec<f64> {
    let m = x.len() as f64;
    let mean = x.iter().sum::<f64>() / m;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    x.iter()
        .zip(gain.data().iter().zip(bias.data()))
        .map(|(v, (g, b))| (v - mean) * rstd * g + b)
        .collect()
}

/// Causal decoder state for one direction.
#[derive(Debug, Clone)]
pub struct Decoder<'a> {
    params: &'a Params,
    dir: Direction,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
    hidden: Option<Vec<f64>>,
}

impl<'a> Decoder<'a> {
    pub fn new(params: &'a Params, dir: Direction) -> Self {
        Decoder {
            params,
            dir,
            keys: vec![Vec::new(); params.layers.len()],
            values: vec![Vec::new(); params.layers.len()],
            len: 0,
            hidden: None,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_full(&self) -> bool {
        self.len >= self.params.config.max_seq_len
    }

    /// Appends one input token.
    pub fn push(&mut self, token: u16) -> Result<()> {
        let p = self.params;
        let c = &p.config;
        if self.is_full() {
            return Err(Error::Length {
                len: self.len + 1,
                max: c.max_seq_len,
            });
        }
        if token as usize >= c.vocab_size {
            return Err(Error::Vocab {
                id: token as usize,
                vocab: c.vocab_size,
            });
        }
        let pos = self.len;
        let mut x: Vec<f64> = (0..c.d_model)
            .map(|j| {
                p.tok_emb.get2(token as usize, j)
                    + p.pos_emb.get2(pos, j)
                    + p.dir_emb.get2(self.dir.index(), j)
            })
            .collect();
        let scale = 1.0 / (c.d_head as f64).sqrt();
        let width = c.n_heads * c.d_head;
        for (l, layer) in p.layers.iter().enumerate() {
            let a = layernorm(&x, &layer.ln1_gain, &layer.ln1_bias);
            let q: Vec<f64> = vecmat(&a, &layer.wq)
                .into_iter()
                .map(|v| v * scale)
                .collect();
            self.keys[l].extend(vecmat(&a, &layer.wk));
            self.values[l].extend(vecmat(&a, &layer.wv));
            let keys = &self.keys[l];
            let values = &self.values[l];
            let mut attn = vec![0.0; width];
            for h in 0..c.n_heads {
                let hs = h * c.d_head..(h + 1) * c.d_head;
                let scores: Vec<f64> = (0..=pos)
                    .map(|j| {
                        let kj = &keys[j * width..(j + 1) * width];
                        q[hs.clone()]
                            .iter()
                            .zip(&kj[hs.clone()])
                            .map(|(a, b)| a * b)
                            .sum()
                    })
                    .collect();
                let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = w.iter().sum();
                for (j, wj) in w.iter().enumerate() {
                    let vj = &values[j * width..(j + 1) * width];
                    for (o, v) in attn[hs.clone()].iter_mut().zip(&vj[hs.clone()]) {
                        *o += wj / z * v;
                    }
                }
            }
            for (xi, o) in x.iter_mut().zip(vecmat(&attn, &layer.wo)) {
                *xi += o;
            }
            let f = layernorm(&x, &layer.ln2_gain, &layer.ln2_bias);
            let f: Vec<f64> = vecmat(&f, &layer.ff_w1)
                .into_iter()
                .map(gelu_scalar)
                .collect();
            for (xi, o) in x.iter_mut().zip(vecmat(&f, &layer.ff_w2)) {
                *xi += o;
            }
        }
        self.hidden = Some(layernorm(&x, &p.lnf_gain, &p.lnf_bias));
        self.len += 1;
        Ok(())
    }

    /// Final-norm hidden state at the last pushed position.
    pub fn hidden(&self) -> &[f64] {
        self.hidden.as_deref().expect("decoder has no input yet")
    }

    pub fn logits(&self) -> Vec<f64> {
        vecmat(self.hidden(), &self.params.unembed)
    }
}

fn argmax(xs: &[f64]) -> usize {
    // Strict comparison keeps the lowest index on ties.
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Autoregressive continuation of `prompt` in direction `dir`.
///
/// Forward decoding extends to the right and stops at EOS; backward decoding
/// extends to the left and stops at BOS. The stop token is not returned, and
/// decoding also ends when the context window is full. The continuation is
/// returned in reading order. Temperature 0 is greedy with lowest-id
/// tie-breaking.
pub fn sample(
    params: &Params,
    prompt: &TokenSeq,
    dir: Direction,
    max_new: usize,
    temperature: f64,
    seed: u64,
) -> Result<TokenSeq> {
    Ok(generate(params, prompt, dir, max_new, temperature, seed)?.tokens)
}

/// Output of [`generate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    /// Continuation in reading order, without the stop token.
    pub tokens: TokenSeq,
    /// Whether decoding ended by emitting the stop token.
    pub stopped: bool,
}

/// [`sample`] that also reports whether the stop token was drawn.
pub fn generate(
    params: &Params,
    prompt: &TokenSeq,
    dir: Direction,
    max_new: usize,
    temperature: f64,
    seed: u64,
) -> Result<Generation> {
    if !(temperature >= 0.0) {
        return Err(Error::contract("temperature must be non-negative"));
    }
    if max_new == 0 {
        return Err(Error::contract("max_new must be at least 1"));
    }
    check_tokens(&params.config, prompt, params.config.max_seq_len)?;
    let (start, stop) = match dir {
        Direction::Forward => (BOS, EOS),
        Direction::Backward => (EOS, BOS),
    };
    let mut dec = Decoder::new(params, dir);
    dec.push(start)?;
    let context: Vec<u16> = match dir {
        Direction::Forward => prompt.to_vec(),
        Direction::Backward => prompt.iter().rev().copied().collect(),
    };
    for &t in &context {
        if dec.is_full() {
            return Ok(Generation {
                tokens: TokenSeq::default(),
                stopped: false,
            });
        }
        dec.push(t)?;
    }

    let mut rng = rng::stream(seed, 0x7361_6d70);
    let mut out = Vec::new();
    let mut stopped = false;
    while out.len() < max_new {
        let logits = dec.logits();
        let next = if temperature == 0.0 {
            argmax(&logits)
        } else {
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits
                .iter()
                .map(|l| ((l - mx) / temperature).exp())
                .collect();
            let z: f64 = w.iter().sum();
            let u: f64 = rng.random::<f64>() * z;
            let mut acc = 0.0;
            let mut pick = w.len() - 1;
            for (i, wi) in w.iter().enumerate() {
                acc += wi;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        } as u16;
        if next == stop {
            stopped = true;
            break;
        }
        out.push(next);
        if dec.is_full() {
            break;
        }
        dec.push(next)?;
    }
    if dir == Direction::Backward {
        out.reverse();
    }
    Ok(Generation {
        tokens: TokenSeq::new(out)?,
        stopped,
    })
}

/// [`super::reward_forward`] computed through the incremental decoder.
pub fn reward_forward_cached(
    params: &Params,
    prompt: &TokenSeq,
    response: &TokenSeq,
) -> Result<f64> {
    let head = params
        .reward_head
        .as_ref()
        .ok_or_else(|| Error::contract("reward_forward needs a reward-stage model"))?;
    let input = super::forward::reward_input(&params.config, prompt, response)?;
    let mut dec = Decoder::new(params, Direction::Forward);
    for t in input {
        dec.push(t as u16)?;
    }
    Ok(vecmat(dec.hidden(), head)[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{tokenize, SEP, VOCAB_SIZE};
    use crate::model::{forward, reward_forward, ModelConfig};
    use crate::precision::{with_precision, Precision};

    fn model() -> Params {
        with_precision(Precision::F64, || {
            Params::init_with_std(ModelConfig::new(16, 4, 32, 2, 24), 3, 0.4).unwrap()
        })
    }

    #[test]
    fn cached_logits_match_tape_forward() {
        let p = model();
        let s = tokenize("kv cache!");
        with_precision(Precision::F64, || {
            for dir in Direction::BOTH {
                let full = forward(&p, &s, dir).unwrap();
                let mut dec = Decoder::new(&p, dir);
                let input = crate::model::forward::framed_input(&s, dir);
                let mut rows = Vec::new();
                for &t in &input {
                    dec.push(t as u16).unwrap();
                    rows.push(dec.logits());
                }
                if dir == Direction::Backward {
                    rows.reverse();
                }
                for (i, r) in rows.iter().enumerate() {
                    for (a, b) in r.iter().zip(full.row(i)) {
                        assert!((a - b).abs() < 1e-10);
                    }
                }
            }
        });
    }

    #[test]
    fn cached_reward_matches_full_forward() {
        let mut p = model().to_reward_model().unwrap();
        p.reward_head = Some(Tensor::new(
            vec![16, 1],
            (0..16).map(|i| (i as f64 - 7.5) / 8.0).collect(),
        ));
        with_precision(Precision::F64, || {
            for (q, a) in [("hi", "there"), ("what is 2+2", "4"), ("", "x")] {
                let (q, a) = (tokenize(q), tokenize(a));
                let full = reward_forward(&p, &q, &a).unwrap();
                let cached = reward_forward_cached(&p, &q, &a).unwrap();
                assert!((full - cached).abs() <= 1e-6, "{full} vs {cached}");

                // Shared prefix: cache `q SEP` once, then branch.
                let mut prefix = Decoder::new(&p, Direction::Forward);
                for &t in q.iter().chain(std::iter::once(&SEP)) {
                    prefix.push(t).unwrap();
                }
                let mut branch = prefix.clone();
                for &t in a.iter() {
                    branch.push(t).unwrap();
                }
                let head = p.reward_head.as_ref().unwrap();
                let r = vecmat(branch.hidden(), head)[0];
                assert!((full - r).abs() <= 1e-6);
            }
        });
    }

    #[test]
    fn greedy_ignores_seed_and_sampling_respects_it() {
        let p = model();
        let prompt = tokenize("ab");
        for dir in Direction::BOTH {
            let a = sample(&p, &prompt, dir, 6, 0.0, 1).unwrap();
            let b = sample(&p, &prompt, dir, 6, 0.0, 999).unwrap();
            assert_eq!(a, b);
            let c = sample(&p, &prompt, dir, 6, 1.0, 5).unwrap();
            let d = sample(&p, &prompt, dir, 6, 1.0, 5).unwrap();
            assert_eq!(c, d);
        }
    }

    #[test]
    fn eos_model_produces_empty_continuation() {
        let mut p = model();
        p.lnf_gain = Tensor::zeros(&[16]);
        p.lnf_bias = Tensor::full(&[16], 1.0);
        let mut u = vec![0.0; 16 * VOCAB_SIZE];
        for j in 0..16 {
            u[j * VOCAB_SIZE + EOS as usize] = 10.0;
        }
        p.unembed = Tensor::new(vec![16, VOCAB_SIZE], u);
        let out = sample(&p, &tokenize("hello"), Direction::Forward, 8, 1.0, 0).unwrap();
        assert!(out.is_empty());
        let g = generate(&p, &tokenize("hello"), Direction::Forward, 8, 0.0, 0).unwrap();
        assert!(g.stopped && g.tokens.is_empty());
        let full = generate(&model(), &tokenize("hello"), Direction::Forward, 3, 0.0, 0).unwrap();
        assert!(!full.stopped || full.tokens.len() < 3);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
        assert_eq!(argmax(&[0.0; 5]), 0);
    }

    #[test]
    fn sample_validates_inputs() {
        let p = model();
        assert!(sample(&p, &tokenize("a"), Direction::Forward, 0, 1.0, 0).is_err());
        assert!(sample(&p, &tokenize("a"), Direction::Forward, 1, -1.0, 0).is_err());
        let long = TokenSeq::from(&[b'a'; 25][..]);
        assert!(matches!(
            sample(&p, &long, Direction::Forward, 1, 0.0, 0),
            Err(Error::Length { .. })
        ));
        let cont = sample(&p, &tokenize("abc"), Direction::Forward, 100, 0.0, 0).unwrap();
        assert!(cont.len() <= 24 - 1 - 3 + 1);
    }
}
