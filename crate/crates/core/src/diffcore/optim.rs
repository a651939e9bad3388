use std::collections::BTreeMap;

use super::ParamStore;

/// Adam with bias correction, restricted to parameters under `prefixes`.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    prefixes: Vec<String>,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, prefixes: &[&str]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            prefixes: prefixes.iter().map(|p| format!("{p}.")).collect(),
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradient slots, then zeroes every slot.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let names: Vec<String> = store
            .names()
            .filter(|n| self.prefixes.iter().any(|p| n.starts_with(p.as_str())))
            .map(str::to_string)
            .collect();
        for name in names {
            let (value, grad) = store.value_and_grad_mut(&name).unwrap();
            let n = value.len();
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (((p, &g), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        store.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Tape, Tensor};

    #[test]
    fn minimizes_quadratic_and_skips_other_prefixes() {
        let mut s = ParamStore::new();
        s.insert("a.x", Tensor::vector(vec![3.0, -2.0])).unwrap();
        s.insert("b.y", Tensor::scalar(1.0)).unwrap();
        let mut opt = Adam::new(0.1, &["a"]);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let x = tape.param(&s, "a.x").unwrap();
            let y = tape.param(&s, "b.y").unwrap();
            let sq = tape.mul(x, x).unwrap();
            let l = tape.sum(sq).unwrap();
            let l = tape.mul(l, y).unwrap();
            tape.backward_scalar(l, &mut s).unwrap();
            opt.step(&mut s);
        }
        assert!(s.get("a.x").unwrap().data().iter().all(|v| v.abs() < 1e-2));
        assert_eq!(s.get("b.y").unwrap().item(), 1.0);
    }
}
