use crate::config::TrainConfig;
use crate::model::{Gradients, Model, ParamKind};

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, model: &mut Model, grads: &Gradients, lr: f64) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powf(self.step as f64);
        let bc2 = 1.0 - self.beta2.powf(self.step as f64);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let mut idx = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_params_mut(&mut |kind, p| {
            let (g, m, v) = (&grads[idx], &mut ms[idx], &mut vs[idx]);
            idx += 1;
            if kind == ParamKind::Frozen {
                return;
            }
            let decay = if kind == ParamKind::Decay { lr * wd } else { 0.0 };
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= decay * p[i] + lr * mhat / (vhat.sqrt() + eps);
            }
        });
    }
}

/// Global L2 norm of all gradients, skipping frozen tensors.
pub fn grad_norm(model: &mut Model, grads: &Gradients) -> f64 {
    let mut total = 0.0;
    let mut idx = 0;
    model.visit_params_mut(&mut |kind, _| {
        if kind != ParamKind::Frozen {
            total += grads[idx].iter().map(|g| g * g).sum::<f64>();
        }
        idx += 1;
    });
    total.sqrt()
}
