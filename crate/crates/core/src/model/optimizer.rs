//! AdamW with decoupled weight decay.
//!
//! Weight decay is applied to rank-2 tensors (kernels and embedding tables)
//! only; biases and layer-norm parameters are not decayed.

use serde::{Deserialize, Serialize};

use super::Params;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Optional global gradient-norm clip.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            grad_clip: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub(crate) step: u64,
    pub(crate) first_moment: Vec<Tensor<f32>>,
    pub(crate) second_moment: Vec<Tensor<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &Params<f32>) -> Self {
        let zeros = |p: &Params<f32>| p.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Self {
            config,
            step: 0,
            first_moment: zeros(params),
            second_moment: zeros(params),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<f32>], &[Tensor<f32>]) {
        (&self.first_moment, &self.second_moment)
    }

    pub(crate) fn from_parts(
        config: AdamWConfig,
        step: u64,
        first_moment: Vec<Tensor<f32>>,
        second_moment: Vec<Tensor<f32>>,
    ) -> Self {
        Self {
            config,
            step,
            first_moment,
            second_moment,
        }
    }

    /// Applies one update with learning rate `lr`. `grads` follows
    /// [`Params::tensors`] order.
    pub fn update(&mut self, params: &mut Params<f32>, grads: &[Tensor<f32>], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let clip_scale = match c.grad_clip {
            Some(max_norm) => {
                let norm = grads
                    .iter()
                    .flat_map(|g| g.data())
                    .map(|&v| (v as f64) * (v as f64))
                    .sum::<f64>()
                    .sqrt();
                if norm > max_norm {
                    max_norm / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let bias1 = (1.0 - c.beta1.powi(t)) as f32;
        let bias2 = (1.0 - c.beta2.powi(t)) as f32;
        let eps = c.epsilon as f32;
        let lr32 = lr as f32;
        let clip = clip_scale as f32;

        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            debug_assert_eq!(p.shape(), g.shape());
            let decay = if p.shape().len() == 2 {
                1.0 - (lr * c.weight_decay) as f32
            } else {
                1.0
            };
            for (((w, &gr), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gr = gr * clip;
                *mi = b1 * *mi + (1.0 - b1) * gr;
                *vi = b2 * *vi + (1.0 - b2) * gr * gr;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *w = *w * decay - lr32 * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_model: 4,
            n_heads: 2,
            d_hidden: vec![8],
            vocab_size: 5,
            seq_len: 3,
            seed: 1,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn moments_match_parameter_shapes() {
        let params = init_params(&tiny()).unwrap();
        let opt = AdamW::new(AdamWConfig::default(), &params);
        for (p, (m, v)) in params
            .tensors()
            .iter()
            .zip(opt.first_moment.iter().zip(&opt.second_moment))
        {
            assert_eq!(p.shape(), m.shape());
            assert_eq!(p.shape(), v.shape());
        }
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut params = init_params(&tiny()).unwrap();
        let before = params.clone();
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            &params,
        );
        let grads: Vec<Tensor<f32>> = params.tensors().iter().map(|t| Tensor::full(t.shape(), 0.5)).collect();
        opt.update(&mut params, &grads, 1e-2);
        assert_eq!(opt.step(), 1);
        // with bias correction the first Adam step is lr * g/|g|
        for (a, b) in params.tensors().iter().zip(before.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!(((y - x) - 1e-2).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn decay_skips_vectors() {
        let mut params = init_params(&tiny()).unwrap();
        params.final_norm_gain = Tensor::full(&[4], 2.0);
        let before = params.clone();
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.5,
                ..AdamWConfig::default()
            },
            &params,
        );
        let grads: Vec<Tensor<f32>> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        opt.update(&mut params, &grads, 0.1);
        assert_eq!(params.final_norm_gain, before.final_norm_gain);
        let w0 = before.unembed.data()[0];
        assert!((params.unembed.data()[0] - w0 * 0.95).abs() < 1e-7);
    }
}
