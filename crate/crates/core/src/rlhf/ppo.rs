use serde::Serialize;

use crate::data::{TokenSeq, EOS, SEP};
use crate::error::{Error, Result};
use crate::model::{
    bind, generate, reward_forward_cached, token_logprobs_on_tape, Bound, Direction, Params, Stage,
};
use crate::parallel::par_map;
use crate::rng::SplitMix64;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::{
    batch_grads, batch_grads_with, bidir_pretrain_loss, pretrain_seq_loss_on_tape, Adam,
    BatchSampler, TrainConfig,
};

/// Scores a response to a prompt.
pub trait RewardFn: Sync {
    fn score(&self, prompt: &TokenSeq, response: &TokenSeq) -> Result<f64>;
}

impl RewardFn for Params {
    fn score(&self, prompt: &TokenSeq, response: &TokenSeq) -> Result<f64> {
        reward_forward_cached(self, prompt, response)
    }
}

/// A closure used as a reward.
pub struct FnReward<F>(pub F);

impl<F> RewardFn for FnReward<F>
where
    F: Fn(&TokenSeq, &TokenSeq) -> f64 + Sync,
{
    fn score(&self, prompt: &TokenSeq, response: &TokenSeq) -> Result<f64> {
        Ok((self.0)(prompt, response))
    }
}

/// Fraction of `response` equal to `byte`; 0 for an empty response.
pub fn byte_density(byte: u8, response: &TokenSeq) -> f64 {
    if response.is_empty() {
        return 0.0;
    }
    response.iter().filter(|&&t| t == byte as u16).count() as f64 / response.len() as f64
}

/// One sampled response with the quantities fixed at sampling time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rollout {
    pub prompt: TokenSeq,
    pub response: TokenSeq,
    /// Whether the policy emitted EOS; if so EOS is the final action.
    pub stopped: bool,
    pub reward: f64,
    /// Per-action log-probabilities under the sampling policy.
    pub logp_old: Vec<f64>,
    /// Per-action log-probabilities under the reference model.
    pub logp_ref: Vec<f64>,
}

impl Rollout {
    pub fn n_actions(&self) -> usize {
        self.response.len() + usize::from(self.stopped)
    }

    /// Sequence-level `log π(y|x) - log π_ref(y|x)`.
    pub fn log_ratio(&self) -> f64 {
        self.logp_old
            .iter()
            .zip(&self.logp_ref)
            .map(|(a, b)| a - b)
            .sum()
    }
}

fn action_sequence(prompt: &TokenSeq, response: &TokenSeq, stopped: bool) -> TokenSeq {
    let mut seq = prompt.clone();
    seq.push(SEP);
    seq.extend_from(response);
    if stopped {
        seq.push(EOS);
    }
    seq
}

/// Log-probabilities of the response tokens (and EOS when `stopped`) given
/// `prompt SEP`, as a vector on the tape. `None` when there are no actions.
pub fn action_logprobs_on_tape(
    tape: &mut Tape,
    b: &Bound,
    prompt: &TokenSeq,
    response: &TokenSeq,
    stopped: bool,
) -> Result<Option<Var>> {
    let n = response.len() + usize::from(stopped);
    if n == 0 {
        return Ok(None);
    }
    let seq = action_sequence(prompt, response, stopped);
    let lp = token_logprobs_on_tape(tape, b, &seq, Direction::Forward)?;
    let col = tape.reshape(lp, vec![seq.len(), 1]);
    let tail = tape.slice_rows(col, prompt.len() + 1, n);
    Ok(Some(tape.reshape(tail, vec![n])))
}

pub fn action_logprobs(
    params: &Params,
    prompt: &TokenSeq,
    response: &TokenSeq,
    stopped: bool,
) -> Result<Vec<f64>> {
    let mut tape = Tape::frozen();
    let b = bind(&mut tape, params, false);
    Ok(
        match action_logprobs_on_tape(&mut tape, &b, prompt, response, stopped)? {
            Some(v) => tape.value(v).data().to_vec(),
            None => Vec::new(),
        },
    )
}

/// Negated clipped surrogate of one rollout averaged over its actions, plus
/// (clipped actions, actions).
pub fn surrogate_loss_on_tape(
    tape: &mut Tape,
    b: &Bound,
    r: &Rollout,
    advantage: f64,
    eps: f64,
) -> Result<Option<(Var, (usize, usize))>> {
    let Some(lp) = action_logprobs_on_tape(tape, b, &r.prompt, &r.response, r.stopped)? else {
        return Ok(None);
    };
    let k = r.n_actions();
    if r.logp_old.len() != k {
        return Err(Error::contract(
            "rollout log-probabilities do not match its actions",
        ));
    }
    let clipped = tape
        .value(lp)
        .data()
        .iter()
        .zip(&r.logp_old)
        .filter(|(a, b)| ((*a - *b).exp() - 1.0).abs() > eps)
        .count();
    let sur = tape.clipped_surrogate(lp, &r.logp_old, &vec![advantage; k], eps);
    let loss = tape.dot(sur, &vec![-1.0 / k as f64; k]);
    Ok(Some((loss, (clipped, k))))
}

fn rollout_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    let mut g = SplitMix64::new(seed ^ (epoch as u64).rotate_left(32));
    let a = g.next_u64();
    SplitMix64::new(a ^ index as u64).next_u64()
}

/// Samples one response per prompt, in parallel with a seeded stream per prompt.
pub fn collect_rollouts(
    policy: &Params,
    reference: &Params,
    reward: &dyn RewardFn,
    prompts: &[TokenSeq],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Vec<Rollout>> {
    par_map(prompts, |i, prompt| -> Result<Rollout> {
        let mut framed = prompt.clone();
        framed.push(SEP);
        let g = generate(
            policy,
            &framed,
            Direction::Forward,
            cfg.ppo_max_new_tokens,
            cfg.ppo_temperature,
            rollout_seed(cfg.seed, epoch, i),
        )?;
        Ok(Rollout {
            logp_old: action_logprobs(policy, prompt, &g.tokens, g.stopped)?,
            logp_ref: action_logprobs(reference, prompt, &g.tokens, g.stopped)?,
            reward: reward.score(prompt, &g.tokens)?,
            prompt: prompt.clone(),
            response: g.tokens,
            stopped: g.stopped,
        })
    })
    .into_iter()
    .collect()
}

/// Monte-Carlo estimate of the regularized objective on `rollouts`:
/// mean of `r(x,y) - λ_IT·(log π(y|x) - log π_ref(y|x))`, plus `λ_PT` times the
/// mean bidirectional log-likelihood of `pretrain_batch` under `policy`.
pub fn rl_objective_estimate(
    policy: &Params,
    reference: &Params,
    reward: &dyn RewardFn,
    rollouts: &[Rollout],
    pretrain_batch: &[TokenSeq],
    lambda_it: f64,
    lambda_pt: f64,
) -> Result<f64> {
    if rollouts.is_empty() {
        return Err(Error::contract("no rollouts"));
    }
    if policy.config != reference.config {
        return Err(Error::contract("policy and reference differ in shape"));
    }
    let terms = par_map(rollouts, |_, r| -> Result<f64> {
        let lp: f64 = action_logprobs(policy, &r.prompt, &r.response, r.stopped)?
            .iter()
            .sum();
        let lr: f64 = action_logprobs(reference, &r.prompt, &r.response, r.stopped)?
            .iter()
            .sum();
        Ok(reward.score(&r.prompt, &r.response)? - lambda_it * (lp - lr))
    });
    let mut sum = 0.0;
    for t in terms {
        sum += t?;
    }
    let mut est = sum / rollouts.len() as f64;
    if lambda_pt != 0.0 {
        est -= lambda_pt * bidir_pretrain_loss(policy, pretrain_batch)?;
    }
    Ok(est)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PpoStats {
    pub epoch: usize,
    pub mean_reward: f64,
    /// Mean over rollouts of the sequence-level log-ratio to the reference.
    pub mean_log_ratio: f64,
    /// Share of action tokens with `|ρ - 1| > ε`, per inner step.
    pub clip_fraction: Vec<f64>,
    pub surrogate_loss: Vec<f64>,
    pub pretrain_loss: Vec<f64>,
    pub mean_response_len: f64,
}

/// PPO on a sequence-level reward with a batch-mean baseline.
pub struct PpoTrainer<'a> {
    policy: Params,
    reference: &'a Params,
    reward: &'a dyn RewardFn,
    prompts: Vec<TokenSeq>,
    pretrain: Vec<TokenSeq>,
    pretrain_sampler: Option<BatchSampler>,
    adam: Adam,
    cfg: TrainConfig,
    epoch: usize,
}

impl<'a> PpoTrainer<'a> {
    pub fn new(
        policy: Params,
        reference: &'a Params,
        reward: &'a dyn RewardFn,
        prompts: Vec<TokenSeq>,
        pretrain: Vec<TokenSeq>,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if policy.stage != Stage::RlPolicy {
            return Err(Error::contract(format!(
                "PPO needs an rl_policy model, got {:?}",
                policy.stage
            )));
        }
        if policy.config != reference.config {
            return Err(Error::contract("policy and reference differ in shape"));
        }
        if prompts.is_empty() {
            return Err(Error::contract("empty prompt set"));
        }
        let max = policy.config.max_seq_len;
        for p in &prompts {
            if p.len() > max / 2 {
                return Err(Error::Length {
                    len: p.len(),
                    max: max / 2,
                });
            }
        }
        let pretrain_sampler = if cfg.lambda_pt > 0.0 {
            if pretrain.is_empty() {
                return Err(Error::contract("lambda_pt > 0 needs a pre-training corpus"));
            }
            for s in &pretrain {
                crate::model::check_tokens(&policy.config, s, max)?;
            }
            Some(BatchSampler::new(
                pretrain.len(),
                cfg.batch_size,
                cfg.seed ^ 0x7074,
            )?)
        } else {
            None
        };
        let snapshot: Vec<Tensor> = policy.named().into_iter().map(|(_, t)| t.clone()).collect();
        let adam = Adam::new(&snapshot.iter().collect::<Vec<_>>());
        Ok(PpoTrainer {
            policy,
            reference,
            reward,
            prompts,
            pretrain,
            pretrain_sampler,
            adam,
            cfg,
            epoch: 0,
        })
    }

    pub fn policy(&self) -> &Params {
        &self.policy
    }

    pub fn into_policy(self) -> Params {
        self.policy
    }

    /// Samples one response per prompt and applies the inner policy updates.
    pub fn run_epoch(&mut self) -> Result<PpoStats> {
        let cfg = &self.cfg;
        let rollouts = collect_rollouts(
            &self.policy,
            self.reference,
            self.reward,
            &self.prompts,
            cfg,
            self.epoch,
        )?;
        let n = rollouts.len() as f64;
        let returns: Vec<f64> = rollouts
            .iter()
            .map(|r| r.reward - cfg.lambda_it * r.log_ratio())
            .collect();
        let baseline = returns.iter().sum::<f64>() / n;
        let items: Vec<(&Rollout, f64)> = rollouts
            .iter()
            .zip(returns.iter().map(|r| r - baseline))
            .collect();
        let any_actions = rollouts.iter().any(|r| r.n_actions() > 0);

        let mut stats = PpoStats {
            epoch: self.epoch,
            mean_reward: rollouts.iter().map(|r| r.reward).sum::<f64>() / n,
            mean_log_ratio: rollouts.iter().map(Rollout::log_ratio).sum::<f64>() / n,
            clip_fraction: Vec::new(),
            surrogate_loss: Vec::new(),
            pretrain_loss: Vec::new(),
            mean_response_len: rollouts.iter().map(|r| r.response.len()).sum::<usize>() as f64 / n,
        };

        for _ in 0..cfg.ppo_inner_steps {
            let mut grads: Option<Vec<Tensor>> = None;
            if any_actions {
                let eps = cfg.ppo_clip;
                let (bg, aux) = batch_grads_with(&self.policy, &items, |tape, b, (r, adv)| {
                    surrogate_loss_on_tape(tape, b, r, *adv, eps)
                })?;
                let (c, t) = aux
                    .iter()
                    .flatten()
                    .fold((0, 0), |(c, t), (a, b)| (c + a, t + b));
                stats.clip_fraction.push(c as f64 / t as f64);
                stats.surrogate_loss.push(bg.loss);
                grads = Some(bg.grads);
            }
            if let Some(sampler) = &mut self.pretrain_sampler {
                let batch: Vec<&TokenSeq> = sampler
                    .next_batch()
                    .into_iter()
                    .map(|i| &self.pretrain[i])
                    .collect();
                let bg = batch_grads(&self.policy, &batch, |tape, b, s| {
                    pretrain_seq_loss_on_tape(tape, b, s)
                })?;
                stats.pretrain_loss.push(bg.loss);
                let weighted: Vec<Tensor> = bg
                    .grads
                    .iter()
                    .map(|g| crate::tensor::scale(g, cfg.lambda_pt))
                    .collect();
                match &mut grads {
                    Some(acc) => acc
                        .iter_mut()
                        .zip(&weighted)
                        .for_each(|(a, g)| a.add_assign(g)),
                    None => grads = Some(weighted),
                }
            }
            let Some(grads) = grads else { break };
            if !grads.iter().all(Tensor::is_finite) {
                let dump = serde_json::to_string(&rollouts).unwrap_or_default();
                log::error!(
                    "non-finite PPO gradient at epoch {}; rollouts: {dump}",
                    self.epoch
                );
                return Err(Error::NonFinite {
                    step: self.epoch,
                    batch: (0..rollouts.len()).collect(),
                });
            }
            self.adam.update(self.policy.tensors_mut(), &grads, cfg);
        }
        log::info!(
            "ppo epoch {} reward {:.4} log-ratio {:.4} clip {:?}",
            self.epoch,
            stats.mean_reward,
            stats.mean_log_ratio,
            stats.clip_fraction
        );
        self.epoch += 1;
        Ok(stats)
    }
}

/// Runs `epochs` PPO epochs and returns the final policy with per-epoch stats.
pub fn ppo_train(
    policy: Params,
    reference: &Params,
    reward: &dyn RewardFn,
    prompts: Vec<TokenSeq>,
    pretrain: Vec<TokenSeq>,
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<(Params, Vec<PpoStats>)> {
    let mut t = PpoTrainer::new(policy, reference, reward, prompts, pretrain, cfg.clone())?;
    let stats = (0..epochs)
        .map(|_| t.run_epoch())
        .collect::<Result<Vec<_>>>()?;
    Ok((t.into_policy(), stats))
}
