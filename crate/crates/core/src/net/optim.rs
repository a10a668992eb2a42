//! Adam with per-tensor-group step counts. Heads that receive no gradient in
//! a step are left untouched, moments included.

use super::model::{Gradients, Head, Linear, ModelParams};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    m: ModelParams,
    v: ModelParams,
    dense_steps: u64,
    head_steps: [Vec<u64>; 2],
    aggregate_steps: [u64; 2],
}

fn update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, step: u64) {
    let bc1 = 1.0 - BETA1.powi(step as i32);
    let bc2 = 1.0 - BETA2.powi(step as i32);
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + EPSILON);
    }
}

fn update_linear(p: &mut Linear, g: &Linear, m: &mut Linear, v: &mut Linear, lr: f64, step: u64) {
    update(&mut p.weight, &g.weight, &mut m.weight, &mut v.weight, lr, step);
    update(&mut p.bias, &g.bias, &mut m.bias, &mut v.bias, lr, step);
}

fn update_head(p: &mut Head, g: &Head, m: &mut Head, v: &mut Head, lr: f64, step: u64) {
    update(&mut p.weight, &g.weight, &mut m.weight, &mut v.weight, lr, step);
    update(
        std::slice::from_mut(&mut p.bias),
        std::slice::from_ref(&g.bias),
        std::slice::from_mut(&mut m.bias),
        std::slice::from_mut(&mut v.bias),
        lr,
        step,
    );
}

impl Adam {
    pub fn new(params: &ModelParams, learning_rate: f64) -> Self {
        let zeros = ModelParams::zeros(params.config.clone()).expect("config already validated");
        let n = params.n_heads();
        Self {
            learning_rate,
            m: zeros.clone(),
            v: zeros,
            dense_steps: 0,
            head_steps: [vec![0; n], vec![0; n]],
            aggregate_steps: [0; 2],
        }
    }

    /// Descend along `grads` (gradients of a loss to minimize).
    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients) {
        let lr = self.learning_rate;
        self.dense_steps += 1;
        let s = self.dense_steps;
        update_linear(&mut params.trunk, &grads.trunk, &mut self.m.trunk, &mut self.v.trunk, lr, s);
        for d in 0..2 {
            let (p, g) = (&mut params.branches[d], &grads.branches[d]);
            let (m, v) = (&mut self.m.branches[d], &mut self.v.branches[d]);
            update_linear(&mut p.first, &g.first, &mut m.first, &mut v.first, lr, s);
            update_linear(&mut p.second, &g.second, &mut m.second, &mut v.second, lr, s);
            for (&i, g) in &grads.heads[d] {
                self.head_steps[d][i] += 1;
                let step = self.head_steps[d][i];
                update_head(
                    &mut params.heads[d][i],
                    g,
                    &mut self.m.heads[d][i],
                    &mut self.v.heads[d][i],
                    lr,
                    step,
                );
            }
            if let Some(g) = &grads.aggregate[d] {
                self.aggregate_steps[d] += 1;
                let step = self.aggregate_steps[d];
                update_head(
                    &mut params.aggregate[d],
                    g,
                    &mut self.m.aggregate[d],
                    &mut self.v.aggregate[d],
                    lr,
                    step,
                );
            }
        }
    }
}
