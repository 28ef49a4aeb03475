//! First-order optimizers with coupled L2 weight decay.

use serde::{Deserialize, Serialize};

use super::{Gradients, Model};

/// SGD with heavy-ball momentum: `v = mu * v + (g + wd * w)`, `w -= lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f32, weight_decay: f32) -> Self {
        Sgd { momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients, lr: f32) {
        let gs = grads.slices();
        let mut ps = model.params_mut();
        if self.velocity.is_empty() {
            self.velocity = ps.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((p, g), v) in ps.iter_mut().zip(gs).zip(&mut self.velocity) {
            for ((w, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                let d = g + self.weight_decay * *w;
                *v = self.momentum * *v + d;
                *w -= lr * *v;
            }
        }
    }
}

/// Adam with bias correction; weight decay is added to the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(beta1: f32, beta2: f32, weight_decay: f32) -> Self {
        Adam { beta1, beta2, eps: 1e-8, weight_decay, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients, lr: f32) {
        let gs = grads.slices();
        let mut ps = model.params_mut();
        if self.m.is_empty() {
            self.m = ps.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in ps.iter_mut().zip(gs).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let d = g + self.weight_decay * *w;
                *m = self.beta1 * *m + (1.0 - self.beta1) * d;
                *v = self.beta2 * *v + (1.0 - self.beta2) * d * d;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Which optimizer family drives a training run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Either optimizer behind one interface.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn step(&mut self, model: &mut Model, grads: &Gradients, lr: f32) {
        match self {
            Optimizer::Sgd(o) => o.step(model, grads, lr),
            Optimizer::Adam(o) => o.step(model, grads, lr),
        }
    }
}
