use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};

use super::{ModelConfig, Stage};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    /// d_model × (n_heads·d_head); weights map row vectors as `x · W`.
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    /// d_model × d_ff
    pub ff_w1: Tensor,
    /// d_ff × d_model
    pub ff_w2: Tensor,
}

const LAYER_FIELDS: [&str; 10] = [
    "ln1.gain", "ln1.bias", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "ln2.gain", "ln2.bias",
    "ffn.w1", "ffn.w2",
];

impl LayerParams {
    fn tensors(&self) -> [&Tensor; 10] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.ff_w1,
            &self.ff_w2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 10] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.ff_w1,
            &mut self.ff_w2,
        ]
    }
}

/// All tensors of one model, tagged with the stage they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub config: ModelConfig,
    pub stage: Stage,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub dir_emb: Tensor,
    pub layers: Vec<LayerParams>,
    pub lnf_gain: Tensor,
    pub lnf_bias: Tensor,
    pub unembed: Tensor,
    /// d_model × 1, present only on reward models.
    pub reward_head: Option<Tensor>,
}

fn normal(shape: &[usize], rng: &mut impl rand::Rng, dist: &Normal<f64>) -> Tensor {
    let n = shape.iter().product();
    Tensor::computed(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

impl Params {
    /// Random initialization: N(0, 0.02²) weights, unit layer-norm gains, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Params> {
        Self::init_with_std(config, seed, INIT_STD)
    }

    pub fn init_with_std(config: ModelConfig, seed: u64, std: f64) -> Result<Params> {
        config.validate()?;
        let c = &config;
        let mut rng = rng::stream(seed, 0x696e_6974);
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let width = c.n_heads * c.d_head;
        let layers = (0..c.n_layers)
            .map(|_| LayerParams {
                ln1_gain: Tensor::full(&[c.d_model], 1.0),
                ln1_bias: Tensor::zeros(&[c.d_model]),
                wq: normal(&[c.d_model, width], &mut rng, &dist),
                wk: normal(&[c.d_model, width], &mut rng, &dist),
                wv: normal(&[c.d_model, width], &mut rng, &dist),
                wo: normal(&[width, c.d_model], &mut rng, &dist),
                ln2_gain: Tensor::full(&[c.d_model], 1.0),
                ln2_bias: Tensor::zeros(&[c.d_model]),
                ff_w1: normal(&[c.d_model, c.d_ff], &mut rng, &dist),
                ff_w2: normal(&[c.d_ff, c.d_model], &mut rng, &dist),
            })
            .collect();
        Ok(Params {
            config,
            stage: Stage::Pretrain,
            tok_emb: normal(&[c.vocab_size, c.d_model], &mut rng, &dist),
            pos_emb: normal(&[c.max_seq_len, c.d_model], &mut rng, &dist),
            dir_emb: normal(&[2, c.d_model], &mut rng, &dist),
            layers,
            lnf_gain: Tensor::full(&[c.d_model], 1.0),
            lnf_bias: Tensor::zeros(&[c.d_model]),
            unembed: normal(&[c.d_model, c.vocab_size], &mut rng, &dist),
            reward_head: None,
        })
    }

    /// Copy of `self` as a reward model: same backbone, zero linear head.
    pub fn to_reward_model(&self) -> Result<Params> {
        let mut p = self.with_stage(Stage::Reward)?;
        p.reward_head = Some(Tensor::zeros(&[self.config.d_model, 1]));
        Ok(p)
    }

    /// Clone re-tagged to `stage`, refusing backward transitions.
    pub fn with_stage(&self, stage: Stage) -> Result<Params> {
        if !self.stage.can_become(stage) {
            return Err(Error::contract(format!(
                "stage cannot move from {:?} to {:?}",
                self.stage, stage
            )));
        }
        let mut p = self.clone();
        p.stage = stage;
        Ok(p)
    }

    /// Tensors with their canonical names, in canonical order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
            ("dir_emb".to_string(), &self.dir_emb),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (field, t) in LAYER_FIELDS.iter().zip(layer.tensors()) {
                out.push((format!("layers.{i}.{field}"), t));
            }
        }
        out.push(("ln_f.gain".to_string(), &self.lnf_gain));
        out.push(("ln_f.bias".to_string(), &self.lnf_bias));
        out.push(("unembed".to_string(), &self.unembed));
        if let Some(h) = &self.reward_head {
            out.push(("reward_head".to_string(), h));
        }
        out
    }

    /// Same order as [`Params::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb, &mut self.dir_emb];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_bias);
        out.push(&mut self.unembed);
        if let Some(h) = &mut self.reward_head {
            out.push(h);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    /// Rebuilds a parameter set from named tensors, checking every shape.
    pub fn from_named(
        config: ModelConfig,
        stage: Stage,
        mut tensors: BTreeMap<String, Tensor>,
    ) -> Result<Params> {
        config.validate()?;
        let mut take = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
        };
        let zeros =
            |shape: &[usize]| Tensor::new(shape.to_vec(), vec![0.0; shape.iter().product()]);
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let mut t = LAYER_FIELDS
                .iter()
                .map(|f| take(&format!("layers.{i}.{f}")));
            layers.push(LayerParams {
                ln1_gain: t.next().unwrap()?,
                ln1_bias: t.next().unwrap()?,
                wq: t.next().unwrap()?,
                wk: t.next().unwrap()?,
                wv: t.next().unwrap()?,
                wo: t.next().unwrap()?,
                ln2_gain: t.next().unwrap()?,
                ln2_bias: t.next().unwrap()?,
                ff_w1: t.next().unwrap()?,
                ff_w2: t.next().unwrap()?,
            });
        }
        let mut p = Params {
            config,
            stage,
            tok_emb: take("tok_emb")?,
            pos_emb: take("pos_emb")?,
            dir_emb: take("dir_emb")?,
            layers,
            lnf_gain: take("ln_f.gain")?,
            lnf_bias: take("ln_f.bias")?,
            unembed: take("unembed")?,
            reward_head: None,
        };
        if stage == Stage::Reward {
            p.reward_head = Some(take("reward_head")?);
        }
        drop(take);
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {extra}")));
        }
        let expected = Params::shape_template(&config, stage, zeros);
        for ((name, t), (_, e)) in p.named().iter().zip(expected.named()) {
            if t.shape() != e.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    e.shape()
                )));
            }
        }
        p.stage = stage;
        Ok(p)
    }

    fn shape_template(c: &ModelConfig, stage: Stage, zeros: impl Fn(&[usize]) -> Tensor) -> Params {
        let width = c.n_heads * c.d_head;
        Params {
            config: *c,
            stage,
            tok_emb: zeros(&[c.vocab_size, c.d_model]),
            pos_emb: zeros(&[c.max_seq_len, c.d_model]),
            dir_emb: zeros(&[2, c.d_model]),
            layers: (0..c.n_layers)
                .map(|_| LayerParams {
                    ln1_gain: zeros(&[c.d_model]),
                    ln1_bias: zeros(&[c.d_model]),
                    wq: zeros(&[c.d_model, width]),
                    wk: zeros(&[c.d_model, width]),
                    wv: zeros(&[c.d_model, width]),
                    wo: zeros(&[width, c.d_model]),
                    ln2_gain: zeros(&[c.d_model]),
                    ln2_bias: zeros(&[c.d_model]),
                    ff_w1: zeros(&[c.d_model, c.d_ff]),
                    ff_w2: zeros(&[c.d_ff, c.d_model]),
                })
                .collect(),
            lnf_gain: zeros(&[c.d_model]),
            lnf_bias: zeros(&[c.d_model]),
            unembed: zeros(&[c.d_model, c.vocab_size]),
            reward_head: (stage == Stage::Reward).then(|| zeros(&[c.d_model, 1])),
        }
    }
}
