use super::TrainConfig;
use crate::precision::{precision, round_slice};
use crate::tensor::Tensor;

/// Adam with global-norm gradient clipping and a constant learning rate.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt()
}

impl Adam {
    pub fn new(shapes: &[&Tensor]) -> Self {
        let zeros: Vec<Tensor> = shapes.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update; returns the pre-clipping gradient norm.
    pub fn update(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], cfg: &TrainConfig) -> f64 {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count");
        assert_eq!(params.len(), self.m.len(), "optimizer state count");
        let norm = global_norm(grads);
        let clip = if cfg.grad_clip_norm > 0.0 && norm > cfg.grad_clip_norm {
            cfg.grad_clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let p = precision();
        for (((param, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let data = param.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..data.len() {
                let gi = g.data()[i] * clip;
                md[i] = b1 * md[i] + (1.0 - b1) * gi;
                vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                data[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.adam_eps);
            }
            round_slice(md, p);
            round_slice(vd, p);
            round_slice(data, p);
        }
        norm
    }
}
