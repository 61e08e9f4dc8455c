use ndarray::Array2;

use super::params::{Gradients, Group, ParamStore};
use super::tape::Mat;

/// Adam with one learning rate per parameter group.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Mat>,
    second: Vec<Mat>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr_encoder: f64, lr_decoder: f64) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, p)| Array2::zeros(p.value.dim()))
                .collect::<Vec<_>>()
        };
        Adam {
            lr_encoder,
            lr_decoder,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn lr(&self, group: Group) -> f64 {
        match group {
            Group::Encoder => self.lr_encoder,
            Group::Decoder => self.lr_decoder,
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let correction1 = 1.0 - self.beta1.powi(t);
        let correction2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads.iter() {
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let lr = self.lr(params.get(id).group);
            let m = &mut self.first[id.0];
            let v = &mut self.second[id.0];
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let param = &mut params.get_mut(id).value;
            ndarray::Zip::from(param).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let m_hat = m / correction1;
                let v_hat = v / correction2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
        }
    }
}
