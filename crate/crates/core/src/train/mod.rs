//! Optimization loops for the pre-training and instruction-tuning stages.

mod dialogue;
mod loss;
mod optim;

pub use dialogue::*;
pub use loss::*;
pub use optim::{global_norm, Adam};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::TokenSeq;
use crate::error::{Error, Result};
use crate::model::{bind, Bound, Params};
use crate::parallel::par_map;
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which way round the preference label enters the reward loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PreferenceSign {
    /// `max(0, 1 - d·(r(y) - r(y')))`.
    #[default]
    Literal,
    /// `max(0, 1 + d·(r(y) - r(y')))`.
    Flipped,
}

impl PreferenceSign {
    pub fn factor(self) -> f64 {
        match self {
            PreferenceSign::Literal => 1.0,
            PreferenceSign::Flipped => -1.0,
        }
    }
}

impl std::str::FromStr for PreferenceSign {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(PreferenceSign::Literal),
            "flipped" => Ok(PreferenceSign::Flipped),
            _ => Err(Error::Config(format!("unknown preference sign {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// 0 disables clipping.
    pub grad_clip_norm: f64,
    /// KL-style penalty weight on the per-token log-ratio in PPO returns.
    pub lambda_it: f64,
    /// Weight of the pre-training loss mixed into the PPO objective.
    pub lambda_pt: f64,
    pub ppo_clip: f64,
    /// Policy updates per batch of rollouts.
    pub ppo_inner_steps: usize,
    pub ppo_max_new_tokens: usize,
    pub ppo_temperature: f64,
    pub preference_sign: PreferenceSign,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            steps: 100,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip_norm: 1.0,
            lambda_it: 0.02,
            lambda_pt: 0.0,
            ppo_clip: 0.2,
            ppo_inner_steps: 2,
            ppo_max_new_tokens: 16,
            ppo_temperature: 1.0,
            preference_sign: PreferenceSign::Literal,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if !(self.grad_clip_norm >= 0.0) {
            return bad("grad_clip_norm must be non-negative");
        }
        if !(self.lambda_it >= 0.0 && self.lambda_pt >= 0.0) {
            return bad("lambda weights must be non-negative");
        }
        if !(self.ppo_clip >= 0.0) {
            return bad("ppo_clip must be non-negative");
        }
        if !(self.ppo_temperature >= 0.0) {
            return bad("ppo_temperature must be non-negative");
        }
        Ok(())
    }
}

/// Shuffled mini-batches: a fresh permutation per epoch, seeded by `(seed, epoch)`.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::contract(
                "cannot sample batches from an empty dataset",
            ));
        }
        let mut s = BatchSampler {
            n,
            batch_size: batch_size.max(1),
            seed,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut rng::stream(self.seed, self.epoch));
        self.cursor = 0;
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size {
            if self.cursor == self.n {
                self.epoch += 1;
                self.reshuffle();
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Mean loss and gradient over the items that produced a loss.
#[derive(Debug, Clone)]
pub struct BatchGrads {
    pub loss: f64,
    /// In [`Params::named`] order.
    pub grads: Vec<Tensor>,
    pub used: usize,
}

/// Evaluates `f` on every item on its own tape, in parallel, and averages the
/// losses and gradients in input order. Items for which `f` returns `None` are
/// left out of the average.
pub fn batch_grads<T, F>(params: &Params, items: &[T], f: F) -> Result<BatchGrads>
where
    T: Sync,
    F: Fn(&mut Tape, &Bound, &T) -> Result<Option<Var>> + Sync,
{
    let (bg, _) = batch_grads_with(params, items, |tape, b, item| {
        Ok(f(tape, b, item)?.map(|v| (v, ())))
    })?;
    Ok(bg)
}

/// [`batch_grads`] where `f` also returns per-item side information.
pub fn batch_grads_with<T, X, F>(
    params: &Params,
    items: &[T],
    f: F,
) -> Result<(BatchGrads, Vec<Option<X>>)>
where
    T: Sync,
    X: Send,
    F: Fn(&mut Tape, &Bound, &T) -> Result<Option<(Var, X)>> + Sync,
{
    let per_item = par_map(items, |_, item| -> Result<Option<(f64, Vec<Tensor>, X)>> {
        let mut tape = Tape::new();
        let b = bind(&mut tape, params, true);
        let Some((loss, aux)) = f(&mut tape, &b, item)? else {
            return Ok(None);
        };
        let grads = tape.backward(loss)?;
        Ok(Some((
            tape.value(loss).item(),
            b.collect_grads(&tape, &grads),
            aux,
        )))
    });
    let mut total = 0.0;
    let mut sum: Option<Vec<Tensor>> = None;
    let mut used = 0;
    let mut auxes = Vec::with_capacity(items.len());
    for r in per_item {
        let Some((loss, grads, aux)) = r? else {
            auxes.push(None);
            continue;
        };
        auxes.push(Some(aux));
        used += 1;
        total += loss;
        match &mut sum {
            None => sum = Some(grads),
            Some(acc) => acc
                .iter_mut()
                .zip(&grads)
                .for_each(|(a, g)| a.add_assign(g)),
        }
    }
    let Some(mut grads) = sum else {
        return Err(Error::contract("no item in the batch produced a loss"));
    };
    let inv = 1.0 / used as f64;
    for g in &mut grads {
        *g = crate::tensor::scale(g, inv);
    }
    Ok((
        BatchGrads {
            loss: total * inv,
            grads,
            used,
        },
        auxes,
    ))
}

/// Training data for [`train`].
#[derive(Debug, Clone)]
pub enum Objective {
    /// Bidirectional next-token loss over raw sequences.
    Pretrain(Vec<TokenSeq>),
    /// Response likelihood given the prompt.
    Instruct(Vec<PromptResponsePair>),
}

impl Objective {
    fn len(&self) -> usize {
        match self {
            Objective::Pretrain(v) => v.len(),
            Objective::Instruct(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mini-batch loss before each update.
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
    /// Instruction pairs skipped for exceeding the context window, summed over steps.
    pub skipped: usize,
}

/// Runs `cfg.steps` Adam updates and returns the trained parameters.
pub fn train(
    mut params: Params,
    objective: &Objective,
    cfg: &TrainConfig,
) -> Result<(Params, TrainReport)> {
    let report = train_in_place(&mut params, objective, cfg, |_, _| {})?;
    Ok((params, report))
}

/// [`train`] on borrowed parameters, calling `on_step(step, loss)` after each update.
pub fn train_in_place(
    params: &mut Params,
    objective: &Objective,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    params.config.validate()?;
    if let Objective::Pretrain(seqs) = objective {
        for s in seqs {
            crate::model::check_tokens(&params.config, s, params.config.max_seq_len)?;
        }
    }
    let mut sampler = BatchSampler::new(objective.len(), cfg.batch_size, cfg.seed)?;
    let shapes: Vec<Tensor> = params.named().into_iter().map(|(_, t)| t.clone()).collect();
    let mut adam = Adam::new(&shapes.iter().collect::<Vec<_>>());
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let batch = sampler.next_batch();
        let bg = match objective {
            Objective::Pretrain(seqs) => {
                let items: Vec<&TokenSeq> = batch.iter().map(|&i| &seqs[i]).collect();
                batch_grads(params, &items, |tape, b, seq| {
                    pretrain_seq_loss_on_tape(tape, b, seq)
                })?
            }
            Objective::Instruct(pairs) => {
                let items: Vec<&PromptResponsePair> = batch.iter().map(|&i| &pairs[i]).collect();
                let bg = batch_grads(params, &items, |tape, b, pair| {
                    instruct_pair_loss_on_tape(tape, b, pair)
                })
                .map_err(|e| match e {
                    Error::Contract(_) => Error::contract(format!(
                        "step {step}: every pair in the batch exceeds the context window"
                    )),
                    e => e,
                })?;
                report.skipped += items.len() - bg.used;
                bg
            }
        };
        if !bg.loss.is_finite() || !bg.grads.iter().all(Tensor::is_finite) {
            return Err(Error::NonFinite { step, batch });
        }
        let norm = adam.update(params.tensors_mut(), &bg.grads, cfg);
        log::debug!("step {step} loss {:.6} grad_norm {:.4}", bg.loss, norm);
        report.losses.push(bg.loss);
        report.grad_norms.push(norm);
        on_step(step, bg.loss);
    }
    Ok(report)
}
